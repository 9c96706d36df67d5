//! Training schedule: SGD with momentum and poly learning-rate decay, loss
//! weights, and backbone/classifier recombination sampling.

use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-loss weights; all default to 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pseudo_label: f64,
    pub consistency_overall: f64,
    pub consistency_per_class: f64,
    pub adversarial_classifier: f64,
    pub adversarial_backbone: f64,
    pub max_squares: f64,
    pub distillation: f64,
    pub ensemble_ce: f64,
    pub classifier_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pseudo_label: 1.0,
            consistency_overall: 1.0,
            consistency_per_class: 1.0,
            adversarial_classifier: 1.0,
            adversarial_backbone: 1.0,
            max_squares: 1.0,
            distillation: 1.0,
            ensemble_ce: 1.0,
            classifier_ce: 1.0,
        }
    }
}

/// Optimization hyperparameters shared by pretraining and both adaptation
/// stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub total_iterations: usize,
    pub initial_lr: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_interval: usize,
    pub checkpoint_interval: usize,
    pub loss_weights: LossWeights,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            total_iterations: 500,
            initial_lr: 2.5e-4,
            poly_power: 0.9,
            batch_size: 1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            log_interval: 50,
            checkpoint_interval: 0,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.initial_lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.total_iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        poly_lr(
            self.initial_lr,
            iteration,
            self.total_iterations,
            self.poly_power,
        )
    }
}

/// Poly decay: `lr0 * (1 - t/T)^power`.
pub fn poly_lr(lr0: f64, t: usize, total: usize, power: f64) -> f64 {
    let frac = 1.0 - t as f64 / total as f64;
    lr0 * frac.max(0.0).powf(power)
}

/// A permutation `ma` matching backbone `i` with classifier `ma(i)`
/// (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecombinationMap {
    ma: Vec<usize>,
}

impl RecombinationMap {
    pub fn identity(k: usize) -> Self {
        Self {
            ma: (0..k).collect(),
        }
    }

    pub fn from_perm(ma: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; ma.len()];
        for &m in &ma {
            if m >= ma.len() || seen[m] {
                return Err(Error::Config(format!("not a permutation: {ma:?}")));
            }
            seen[m] = true;
        }
        Ok(Self { ma })
    }

    pub fn k(&self) -> usize {
        self.ma.len()
    }

    /// Classifier index matched with backbone `i`.
    pub fn matched(&self, i: usize) -> usize {
        self.ma[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.ma
    }

    pub fn is_identity(&self) -> bool {
        self.ma.iter().enumerate().all(|(i, &m)| i == m)
    }
}

/// Uniform random permutation; for `k >= 2` resampled until it is not the
/// identity so the consistency signal is never vacuous.
pub fn sample_recombination<R: Rng>(k: usize, rng: &mut R) -> RecombinationMap {
    assert!(k >= 1);
    if k == 1 {
        return RecombinationMap::identity(1);
    }
    loop {
        // Fisher-Yates
        let mut ma: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            let j = rng.gen_range(0..=i);
            ma.swap(i, j);
        }
        let map = RecombinationMap { ma };
        if !map.is_identity() {
            return map;
        }
    }
}

/// SGD with momentum and weight decay over one parameter group. Velocity
/// buffers persist across steps.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn for_schedule(schedule: &TrainSchedule) -> Self {
        Self::new(schedule.momentum, schedule.weight_decay)
    }

    pub fn step(&mut self, params: &mut [&mut ArrayD<f64>], grads: &[&ArrayD<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| ArrayD::zeros(p.raw_dim()))
                .collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "parameter group changed");
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            ndarray::Zip::from(vel.view_mut())
                .and(param.view())
                .and(grad.view())
                .for_each(|v, &p, &g| {
                    *v = self.momentum * *v + g + self.weight_decay * p;
                });
            ndarray::Zip::from(param.view_mut())
                .and(vel.view())
                .for_each(|p, &v| *p -= lr * v);
        }
    }
}
