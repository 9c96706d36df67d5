// Shared between the oracle, gradient, and acceptance test targets; each
// binary only uses part of it.
#![allow(dead_code)]

pub mod grad_suite;
pub mod oracle_suite;
