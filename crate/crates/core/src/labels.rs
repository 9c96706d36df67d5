//! Label-space algebra: class sets of the target domain and of each source
//! domain, plus the union-set constraint tying them together.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// An ordered set of target-class indices covered by one domain's
/// annotations. Classes are kept sorted by target index, so channel layouts
/// derived from a space are unambiguous.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    classes: Vec<usize>,
}

impl LabelSpace {
    pub fn new(classes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut classes: Vec<usize> = classes.into_iter().collect();
        classes.sort_unstable();
        if classes.is_empty() {
            return Err(Error::InvalidLabelSpace("empty class set".into()));
        }
        if classes.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidLabelSpace(format!(
                "duplicate class in {classes:?}"
            )));
        }
        Ok(Self { classes })
    }

    /// The full space `{0, .., n-1}`.
    pub fn full(n: usize) -> Self {
        Self {
            classes: (0..n).collect(),
        }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.binary_search(&class).is_ok()
    }

    /// Classifier channel for `class`: channel 0 is the "other" class, so a
    /// class at position `p` in the space occupies channel `1 + p`.
    pub fn channel_of(&self, class: usize) -> Option<usize> {
        self.classes.binary_search(&class).ok().map(|p| 1 + p)
    }

    /// Inverse of [`channel_of`](Self::channel_of); `None` for channel 0.
    pub fn class_of_channel(&self, channel: usize) -> Option<usize> {
        if channel == 0 {
            None
        } else {
            self.classes.get(channel - 1).copied()
        }
    }

    /// Classifier output channel count: 1 ("other") + one per class.
    pub fn channel_count(&self) -> usize {
        1 + self.classes.len()
    }

    pub fn is_subset_of(&self, other: &LabelSpace) -> bool {
        self.classes.iter().all(|&c| other.contains(c))
    }
}

/// The adaptation problem: a target label space and `k` source label spaces
/// whose union must equal the target space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnionSetProblem {
    pub target_space: LabelSpace,
    pub source_spaces: Vec<LabelSpace>,
}

/// Outcome of checking the union-set constraint. Violations are data, not
/// errors: an invalid problem is still a value that can be reported on.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UnionReport {
    /// Target classes covered by no source space.
    pub uncovered: Vec<usize>,
    /// `(source index, class)` pairs where a source claims a class outside
    /// the target space.
    pub extraneous: Vec<(usize, usize)>,
}

impl UnionReport {
    pub fn is_ok(&self) -> bool {
        self.uncovered.is_empty() && self.extraneous.is_empty()
    }
}

impl std::fmt::Display for UnionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        if !self.uncovered.is_empty() {
            write!(f, "uncovered target classes: {:?}", self.uncovered)?;
        }
        if !self.extraneous.is_empty() {
            if !self.uncovered.is_empty() {
                write!(f, "; ")?;
            }
            write!(f, "classes outside target: {:?}", self.extraneous)?;
        }
        Ok(())
    }
}

impl UnionSetProblem {
    pub fn new(target_space: LabelSpace, source_spaces: Vec<LabelSpace>) -> Self {
        Self {
            target_space,
            source_spaces,
        }
    }

    pub fn k(&self) -> usize {
        self.source_spaces.len()
    }

    /// Checks that every source space is a subset of the target space and
    /// that the union of the source spaces covers the target space exactly.
    pub fn validate_union(&self) -> UnionReport {
        let mut report = UnionReport::default();
        let mut covered: BTreeSet<usize> = BTreeSet::new();
        for (i, space) in self.source_spaces.iter().enumerate() {
            for &c in space.classes() {
                if self.target_space.contains(c) {
                    covered.insert(c);
                } else {
                    report.extraneous.push((i, c));
                }
            }
        }
        for &c in self.target_space.classes() {
            if !covered.contains(&c) {
                report.uncovered.push(c);
            }
        }
        report
    }

    /// Validated constructor: errors (instead of reporting) on violation.
    pub fn validated(target_space: LabelSpace, source_spaces: Vec<LabelSpace>) -> Result<Self> {
        if source_spaces.is_empty() {
            return Err(Error::UnionViolation("k must be at least 1".into()));
        }
        let problem = Self::new(target_space, source_spaces);
        let report = problem.validate_union();
        if report.is_ok() {
            Ok(problem)
        } else {
            Err(Error::UnionViolation(report.to_string()))
        }
    }

    /// Plain-text key-value manifest consumed by the other modules.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        writeln!(out, "version 1").unwrap();
        let fmt = |classes: &[usize]| {
            classes
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(out, "target {}", fmt(self.target_space.classes())).unwrap();
        for (i, s) in self.source_spaces.iter().enumerate() {
            writeln!(out, "source{} {}", i, fmt(s.classes())).unwrap();
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut target: Option<LabelSpace> = None;
        let mut sources: Vec<(usize, LabelSpace)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::Parse(format!("bad manifest line: {line}")))?;
            if key == "version" {
                if rest.trim() != "1" {
                    return Err(Error::Parse(format!("unsupported manifest version {rest}")));
                }
                continue;
            }
            let classes = rest
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::Parse(format!("bad class id {t}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let space = LabelSpace::new(classes)?;
            if key == "target" {
                target = Some(space);
            } else if let Some(idx) = key.strip_prefix("source") {
                let idx = idx
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad source index {key}")))?;
                sources.push((idx, space));
            } else {
                return Err(Error::Parse(format!("unknown manifest key {key}")));
            }
        }
        let target = target.ok_or_else(|| Error::Parse("manifest missing target".into()))?;
        sources.sort_by_key(|(i, _)| *i);
        Ok(Self::new(target, sources.into_iter().map(|(_, s)| s).collect()))
    }
}
