//! Training objectives: self-training cross-entropy, cross-model consistency
//! (overall and per-class), backbone/classifier adversarial terms, knowledge
//! distillation, and the maximum-squares confidence term. All are scalar tape
//! nodes so one backward pass serves any combination.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::labels::LabelSpace;
use crate::nn::{Backbone, Classifier};
use crate::sched::RecombinationMap;
use crate::IGNORE_LABEL;

/// A scalar loss with its named sub-terms, for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub components: Vec<(String, f64)>,
}

impl LossValue {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components.iter().all(|(_, v)| v.is_finite())
    }
}

/// All cross combinations `C_j(B_i(x))` for one image, with the parameter
/// leaves needed to read gradients afterwards.
pub struct ModelGraph {
    pub backbone_leaves: Vec<Vec<Var>>,
    pub classifier_leaves: Vec<Vec<Var>>,
    pub features: Vec<Var>,
    /// `logits[i][j]` = classifier `j` applied to backbone `i`'s features.
    pub logits: Vec<Vec<Var>>,
}

/// Forwards every backbone once and every classifier over every backbone's
/// features.
pub fn build_model_graph(
    tape: &mut Tape,
    backbones: &[&Backbone],
    classifiers: &[&Classifier],
    image: Var,
) -> ModelGraph {
    let d = backbones[0].spec.downsample_factor;
    let backbone_leaves: Vec<Vec<Var>> = backbones.iter().map(|b| b.leaves(tape)).collect();
    let classifier_leaves: Vec<Vec<Var>> = classifiers.iter().map(|c| c.leaves(tape)).collect();
    let features: Vec<Var> = backbones
        .iter()
        .zip(&backbone_leaves)
        .map(|(b, leaves)| b.apply(tape, leaves, image))
        .collect();
    let logits: Vec<Vec<Var>> = features
        .iter()
        .map(|&f| {
            classifiers
                .iter()
                .zip(&classifier_leaves)
                .map(|(c, leaves)| c.apply(tape, leaves, f, d))
                .collect()
        })
        .collect();
    ModelGraph {
        backbone_leaves,
        classifier_leaves,
        features,
        logits,
    }
}

/// Maps a target-space label grid from class identifiers to target channel
/// positions (the layout of ensemble outputs).
pub fn target_channel_labels(labels: &Array2<u32>, target: &LabelSpace) -> Array2<u32> {
    labels.mapv(|l| {
        if l == IGNORE_LABEL {
            IGNORE_LABEL
        } else {
            let pos = target
                .classes()
                .iter()
                .position(|&c| c == l as usize)
                .expect("label outside target space");
            pos as u32
        }
    })
}

/// Positions in the target channel layout of one source space's classes.
fn target_positions(space: &LabelSpace, target: &LabelSpace) -> Vec<usize> {
    space
        .classes()
        .iter()
        .map(|&c| {
            target
                .classes()
                .iter()
                .position(|&t| t == c)
                .expect("source class outside target space")
        })
        .collect()
}

/// Channels `1..` of a classifier over `space` (everything but "other").
fn class_channels(space: &LabelSpace) -> Vec<usize> {
    (1..space.channel_count()).collect()
}

/// Self-training loss: per-model CE against its own pseudo labels plus the
/// ensemble CE (all classifiers on each backbone's features) against the
/// target-space pseudo labels.
pub fn loss_pl(
    tape: &mut Tape,
    graph: &ModelGraph,
    spaces: &[LabelSpace],
    target: &LabelSpace,
    pseudo_sources: &[Array2<u32>],
    pseudo_target: &Array2<u32>,
) -> Var {
    let k = spaces.len();
    let y_t = target_channel_labels(pseudo_target, target);
    let mut terms = Vec::with_capacity(2 * k);
    for i in 0..k {
        terms.push(tape.ce_mean(graph.logits[i][i], &pseudo_sources[i]));
        let row: Vec<Var> = graph.logits[i].clone();
        let en = tape.ensemble_avg(&row, spaces, target);
        terms.push(tape.ce_mean(en, &y_t));
    }
    tape.add_many(&terms)
}

/// Overall consistency: mean L1 between the softmaxed ensemble predictions
/// of the original models and of the recombined models.
pub fn loss_cm1(
    tape: &mut Tape,
    graph: &ModelGraph,
    spaces: &[LabelSpace],
    target: &LabelSpace,
    recombination: &RecombinationMap,
) -> Var {
    let k = spaces.len();
    let original: Vec<Var> = (0..k).map(|i| graph.logits[i][i]).collect();
    let recombined: Vec<Var> = (0..k).map(|i| graph.logits[i][recombination.matched(i)]).collect();
    let matched_spaces: Vec<LabelSpace> =
        (0..k).map(|i| spaces[recombination.matched(i)].clone()).collect();
    let en_orig = tape.ensemble_avg(&original, spaces, target);
    let en_rec = tape.ensemble_avg(&recombined, &matched_spaces, target);
    let p_orig = tape.softmax_channels(en_orig);
    let p_rec = tape.softmax_channels(en_rec);
    tape.l1_mean(p_orig, p_rec)
}

/// Per-class consistency: each recombined model's class logits pulled toward
/// the per-class average logits of all recombined models. The class range of
/// each term is the matched classifier's own space (its real channels).
pub fn loss_cm2(
    tape: &mut Tape,
    graph: &ModelGraph,
    spaces: &[LabelSpace],
    target: &LabelSpace,
    recombination: &RecombinationMap,
) -> Var {
    let k = spaces.len();
    let recombined: Vec<Var> = (0..k).map(|i| graph.logits[i][recombination.matched(i)]).collect();
    let matched_spaces: Vec<LabelSpace> =
        (0..k).map(|i| spaces[recombination.matched(i)].clone()).collect();
    let delta = tape.ensemble_avg(&recombined, &matched_spaces, target);
    let mut terms = Vec::with_capacity(k);
    for i in 0..k {
        let space = &matched_spaces[i];
        let own = tape.gather_channels(recombined[i], &class_channels(space));
        let avg = tape.gather_channels(delta, &target_positions(space, target));
        terms.push(tape.l1_mean(own, avg));
    }
    tape.add_many(&terms)
}

/// Negated prediction discrepancy trained by the classifiers: for each
/// classifier, minus the L1 distance between its outputs on its own
/// backbone's features and on every other backbone's features. Zero (as a
/// structural constant) when there is a single model.
pub fn loss_c_discrepancy(tape: &mut Tape, graph: &ModelGraph) -> Var {
    let k = graph.logits.len();
    let mut terms = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if j == i {
                continue;
            }
            let l1 = tape.l1_mean(graph.logits[i][i], graph.logits[j][i]);
            terms.push(tape.scale(l1, -1.0));
        }
    }
    if terms.is_empty() {
        return tape.zero_scalar();
    }
    tape.add_many(&terms)
}

/// CE of each classifier on its own backbone's features against its pseudo
/// labels.
pub fn ce_per_model(tape: &mut Tape, graph: &ModelGraph, pseudo_sources: &[Array2<u32>]) -> Var {
    let terms: Vec<Var> = (0..pseudo_sources.len())
        .map(|i| tape.ce_mean(graph.logits[i][i], &pseudo_sources[i]))
        .collect();
    tape.add_many(&terms)
}

/// Classifier adversarial loss: the negated discrepancy anchored by CE on
/// each classifier's own pseudo labels.
pub fn loss_c_adv(
    tape: &mut Tape,
    graph: &ModelGraph,
    pseudo_sources: &[Array2<u32>],
) -> Var {
    let disc = loss_c_discrepancy(tape, graph);
    let ce = ce_per_model(tape, graph, pseudo_sources);
    tape.add(disc, ce)
}

/// Alignment part of the backbone loss: on each backbone's features, every
/// classifier's class logits pulled toward the per-class average over all
/// classifiers. Structurally zero for a single model.
pub fn loss_b_alignment(
    tape: &mut Tape,
    graph: &ModelGraph,
    spaces: &[LabelSpace],
    target: &LabelSpace,
) -> Var {
    let k = spaces.len();
    let mut terms = Vec::with_capacity(k * k);
    for i in 0..k {
        let row: Vec<Var> = graph.logits[i].clone();
        let delta_i = tape.ensemble_avg(&row, spaces, target);
        for j in 0..k {
            let own = tape.gather_channels(graph.logits[i][j], &class_channels(&spaces[j]));
            let avg = tape.gather_channels(delta_i, &target_positions(&spaces[j], target));
            terms.push(tape.l1_mean(own, avg));
        }
    }
    tape.add_many(&terms)
}

/// CE of every classifier on every backbone's features against that
/// classifier's pseudo labels.
pub fn ce_cross_models(
    tape: &mut Tape,
    graph: &ModelGraph,
    pseudo_sources: &[Array2<u32>],
) -> Var {
    let k = pseudo_sources.len();
    let mut terms = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            terms.push(tape.ce_mean(graph.logits[i][j], &pseudo_sources[j]));
        }
    }
    tape.add_many(&terms)
}

/// Backbone adversarial loss: alignment toward the per-class average plus CE
/// against each classifier's pseudo labels.
pub fn loss_b_adv(
    tape: &mut Tape,
    graph: &ModelGraph,
    spaces: &[LabelSpace],
    target: &LabelSpace,
    pseudo_sources: &[Array2<u32>],
) -> Var {
    let align = loss_b_alignment(tape, graph, spaces, target);
    let ce = ce_cross_models(tape, graph, pseudo_sources);
    tape.add(align, ce)
}

/// Knowledge distillation: per classifier, mean-pixel KL divergence of the
/// student softmax (final backbone features) from the teacher softmax
/// (frozen source backbone features). Teachers must be leaves so no gradient
/// reaches them.
pub fn loss_kd(tape: &mut Tape, student_logits: &[Var], teacher_logits: &[Var]) -> Var {
    assert_eq!(student_logits.len(), teacher_logits.len());
    let terms: Vec<Var> = student_logits
        .iter()
        .zip(teacher_logits)
        .map(|(&s, &t)| tape.kld_mean(s, t))
        .collect();
    tape.add_many(&terms)
}

/// Maximum squares confidence term over a probability field.
pub fn loss_maxsquares(tape: &mut Tape, probabilities: Var) -> Var {
    tape.neg_half_square_mean(probabilities)
}
