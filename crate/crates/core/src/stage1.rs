//! First adaptation stage: per iteration, (1) a joint update of all
//! backbones and classifiers on the self-training and consistency losses,
//! (2) a classifier-only update maximizing cross-backbone discrepancy, and
//! (3) a backbone-only update aligning classifier outputs, all on the same
//! batch with a freshly sampled recombination.

use ndarray::{Array2, Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::labels::LabelSpace;
use crate::losses::{
    build_model_graph, ce_cross_models, ce_per_model, loss_b_alignment, loss_c_discrepancy,
    loss_cm1, loss_cm2, loss_pl, ModelGraph,
};
use crate::models::{accumulate, apply_step, ModelBundle, TrainMeta};
use crate::nn::{Backbone, Classifier};
use crate::pseudo::PseudoLabels;
use crate::sched::{sample_recombination, RecombinationMap, Sgd, TrainSchedule};
use crate::{Error, Result};

/// Which training components run. The ladder rows toggle these cumulatively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSwitches {
    pub self_training: bool,
    pub cross_model_consistency: bool,
    pub adversarial: bool,
    pub max_squares: bool,
    pub model_integration: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        Self {
            self_training: true,
            cross_model_consistency: true,
            adversarial: true,
            max_squares: true,
            model_integration: true,
        }
    }
}

impl AblationSwitches {
    pub fn self_training_only() -> Self {
        Self {
            self_training: true,
            cross_model_consistency: false,
            adversarial: false,
            max_squares: false,
            model_integration: false,
        }
    }
}

/// The cumulative ablation ladder, in reporting order.
pub fn ablation_ladder() -> Vec<(&'static str, AblationSwitches)> {
    let st = AblationSwitches::self_training_only();
    let cmc = AblationSwitches {
        cross_model_consistency: true,
        ..st
    };
    let adv = AblationSwitches {
        adversarial: true,
        ..cmc
    };
    let msl = AblationSwitches {
        max_squares: true,
        ..adv
    };
    let full = AblationSwitches {
        model_integration: true,
        ..msl
    };
    vec![
        ("st", st),
        ("st_cmc", cmc),
        ("st_cmc_adv", adv),
        ("st_cmc_adv_msl", msl),
        ("full", full),
    ]
}

pub fn ladder_switches(row: &str) -> Result<AblationSwitches> {
    ablation_ladder()
        .into_iter()
        .find(|(name, _)| *name == row)
        .map(|(_, s)| s)
        .ok_or_else(|| Error::Config(format!("unknown ladder row {row}")))
}

/// One step's mean loss with named components.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub components: Vec<(String, f64)>,
}

impl StepLoss {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
    }
}

/// Loss record of one iteration (one entry per active step).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lr: f64,
    pub recombination: Vec<usize>,
    pub joint: Option<StepLoss>,
    pub classifiers: Option<StepLoss>,
    pub backbones: Option<StepLoss>,
}

#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub bundles: Vec<ModelBundle>,
    pub trace: Vec<IterationRecord>,
}

/// A weighted loss term: name, weight, tape node.
type Terms = Vec<(&'static str, f64, Var)>;

struct StepOutcome {
    loss: StepLoss,
    grads_backbones: Vec<Vec<ArrayD<f64>>>,
    grads_classifiers: Vec<Vec<ArrayD<f64>>>,
}

/// Forwards one batch, builds a step's weighted loss, and accumulates the
/// per-model parameter gradients.
fn run_step(
    backbones: &[Backbone],
    classifiers: &[Classifier],
    images: &[Array3<f64>],
    batch: &[usize],
    build: &mut dyn FnMut(&mut Tape, &ModelGraph, usize) -> Terms,
) -> Result<StepOutcome> {
    let k = backbones.len();
    let mut grads_b: Vec<Option<Vec<ArrayD<f64>>>> = vec![None; k];
    let mut grads_c: Vec<Option<Vec<ArrayD<f64>>>> = vec![None; k];
    let mut total = 0.0;
    let mut components: Vec<(String, f64)> = Vec::new();
    for &n in batch {
        let mut tape = Tape::new();
        let x = tape.leaf3(images[n].clone());
        let b_refs: Vec<&Backbone> = backbones.iter().collect();
        let c_refs: Vec<&Classifier> = classifiers.iter().collect();
        let graph = build_model_graph(&mut tape, &b_refs, &c_refs, x);
        let terms = build(&mut tape, &graph, n);
        let weighted: Vec<Var> = terms
            .iter()
            .map(|&(_, w, v)| tape.scale(v, w))
            .collect();
        let loss = tape.add_many(&weighted);
        total += tape.scalar_value(loss);
        for &(name, w, v) in &terms {
            let value = w * tape.scalar_value(v);
            match components.iter_mut().find(|(n, _)| n == name) {
                Some((_, acc)) => *acc += value,
                None => components.push((name.to_string(), value)),
            }
        }
        tape.backward(loss);
        for i in 0..k {
            accumulate(&mut grads_b[i], &graph.backbone_leaves[i], &tape);
            accumulate(&mut grads_c[i], &graph.classifier_leaves[i], &tape);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let scale_group = |gs: Vec<Option<Vec<ArrayD<f64>>>>| -> Vec<Vec<ArrayD<f64>>> {
        gs.into_iter()
            .map(|g| {
                g.unwrap()
                    .into_iter()
                    .map(|t| t.mapv(|v| v * inv))
                    .collect()
            })
            .collect()
    };
    Ok(StepOutcome {
        loss: StepLoss {
            total: total * inv,
            components: components
                .into_iter()
                .map(|(n, v)| (n, v * inv))
                .collect(),
        },
        grads_backbones: scale_group(grads_b),
        grads_classifiers: scale_group(grads_c),
    })
}

fn apply_group(
    opts: &mut [Sgd],
    params: Vec<Vec<&mut ArrayD<f64>>>,
    grads: &[Vec<ArrayD<f64>>],
    lr: f64,
) {
    for ((opt, p), g) in opts.iter_mut().zip(params).zip(grads) {
        apply_step(opt, p, g, lr, 1.0);
    }
}

/// Which sub-step an observer callback follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StagePhase {
    /// After the joint backbone+classifier update.
    Joint,
    /// After the classifier-only discrepancy update.
    ClassifierStep,
    /// After the backbone-only alignment update.
    BackboneStep,
}

/// Called after each applied sub-step with the current parameters.
pub type StepObserver<'a> = &'a mut dyn FnMut(usize, StagePhase, &[Backbone], &[Classifier]);

/// Runs the full first-stage schedule on pre-generated pseudo labels.
pub fn run_stage1(
    bundles: &[ModelBundle],
    target: &LabelSpace,
    images: &[Array3<f64>],
    pseudo: &PseudoLabels,
    schedule: &TrainSchedule,
    switches: AblationSwitches,
) -> Result<Stage1Result> {
    run_stage1_observed(
        bundles,
        target,
        images,
        pseudo,
        schedule,
        switches,
        &mut |_, _, _, _| {},
    )
}

/// `run_stage1` with a callback after every applied sub-step, e.g. to audit
/// which parameter groups each step touches.
pub fn run_stage1_observed(
    bundles: &[ModelBundle],
    target: &LabelSpace,
    images: &[Array3<f64>],
    pseudo: &PseudoLabels,
    schedule: &TrainSchedule,
    switches: AblationSwitches,
    observer: StepObserver,
) -> Result<Stage1Result> {
    schedule.validate()?;
    let k = bundles.len();
    if k == 0 {
        return Err(Error::Data("no models to adapt".into()));
    }
    if images.is_empty() {
        return Err(Error::Data("empty target training split".into()));
    }
    if pseudo.target.len() != images.len() || pseudo.per_source.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "pseudo labels cover {} images / {} sources; need {} / {k}",
            pseudo.target.len(),
            pseudo.per_source.len(),
            images.len()
        )));
    }
    let spaces: Vec<LabelSpace> = bundles.iter().map(|b| b.label_space().clone()).collect();
    let mut backbones: Vec<Backbone> = bundles.iter().map(|b| b.backbone.clone()).collect();
    let mut classifiers: Vec<Classifier> = bundles.iter().map(|b| b.classifier.clone()).collect();
    let w = &schedule.loss_weights;

    let mut opt_joint_b: Vec<Sgd> = (0..k).map(|_| Sgd::for_schedule(schedule)).collect();
    let mut opt_joint_c: Vec<Sgd> = (0..k).map(|_| Sgd::for_schedule(schedule)).collect();
    let mut opt_adv_c: Vec<Sgd> = (0..k).map(|_| Sgd::for_schedule(schedule)).collect();
    let mut opt_adv_b: Vec<Sgd> = (0..k).map(|_| Sgd::for_schedule(schedule)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(schedule.total_iterations);

    for iter in 0..schedule.total_iterations {
        let lr = schedule.lr_at(iter);
        let mut batch = Vec::with_capacity(schedule.batch_size);
        for _ in 0..schedule.batch_size {
            if order.is_empty() {
                order = (0..images.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().unwrap());
        }
        let ma = sample_recombination(k, &mut rng);
        let mut record = IterationRecord {
            iteration: iter,
            lr,
            recombination: ma.as_slice().to_vec(),
            ..Default::default()
        };

        // Step 1: joint update of all backbones and classifiers.
        let step1_active =
            switches.self_training || switches.cross_model_consistency || switches.max_squares;
        if step1_active {
            let outcome = run_step(
                &backbones,
                &classifiers,
                images,
                &batch,
                &mut |tape, graph, n| {
                    joint_terms(tape, graph, n, &spaces, target, pseudo, &ma, &switches, w)
                },
            )?;
            check_finite(&outcome.loss, iter)?;
            apply_group(
                &mut opt_joint_b,
                backbones.iter_mut().map(|b| b.params_mut()).collect(),
                &outcome.grads_backbones,
                lr,
            );
            apply_group(
                &mut opt_joint_c,
                classifiers.iter_mut().map(|c| c.params_mut()).collect(),
                &outcome.grads_classifiers,
                lr,
            );
            record.joint = Some(outcome.loss);
            observer(iter, StagePhase::Joint, &backbones, &classifiers);
        }

        if switches.adversarial {
            // Step 2: classifiers only, maximizing discrepancy.
            let outcome = run_step(
                &backbones,
                &classifiers,
                images,
                &batch,
                &mut |tape, graph, n| {
                    let disc = loss_c_discrepancy(tape, graph);
                    let y = source_labels(pseudo, n);
                    let ce = ce_per_model(tape, graph, &y);
                    vec![
                        ("adv_c_l1", w.adversarial_classifier, disc),
                        ("adv_c_ce", w.adversarial_classifier, ce),
                    ]
                },
            )?;
            check_finite(&outcome.loss, iter)?;
            apply_group(
                &mut opt_adv_c,
                classifiers.iter_mut().map(|c| c.params_mut()).collect(),
                &outcome.grads_classifiers,
                lr,
            );
            record.classifiers = Some(outcome.loss);
            observer(iter, StagePhase::ClassifierStep, &backbones, &classifiers);

            // Step 3: backbones only, aligning classifier outputs.
            let outcome = run_step(
                &backbones,
                &classifiers,
                images,
                &batch,
                &mut |tape, graph, n| {
                    let align = loss_b_alignment(tape, graph, &spaces, target);
                    let y = source_labels(pseudo, n);
                    let ce = ce_cross_models(tape, graph, &y);
                    let mut terms = vec![
                        ("adv_b_l1", w.adversarial_backbone, align),
                        ("adv_b_ce", w.adversarial_backbone, ce),
                    ];
                    if switches.max_squares {
                        let msl = per_backbone_max_squares(tape, graph, &spaces, target);
                        terms.push(("msl_b", w.max_squares, msl));
                    }
                    terms
                },
            )?;
            check_finite(&outcome.loss, iter)?;
            apply_group(
                &mut opt_adv_b,
                backbones.iter_mut().map(|b| b.params_mut()).collect(),
                &outcome.grads_backbones,
                lr,
            );
            record.backbones = Some(outcome.loss);
            observer(iter, StagePhase::BackboneStep, &backbones, &classifiers);
        }

        trace.push(record);
    }

    let bundles = backbones
        .into_iter()
        .zip(classifiers)
        .zip(bundles)
        .map(|((backbone, classifier), orig)| ModelBundle {
            backbone,
            classifier,
            meta: TrainMeta {
                iterations: orig.meta.iterations + schedule.total_iterations,
                seed: schedule.seed,
                stage: "stage1".into(),
            },
        })
        .collect();
    Ok(Stage1Result { bundles, trace })
}

fn source_labels(pseudo: &PseudoLabels, n: usize) -> Vec<Array2<u32>> {
    pseudo.per_source.iter().map(|p| p[n].clone()).collect()
}

#[allow(clippy::too_many_arguments)]
fn joint_terms(
    tape: &mut Tape,
    graph: &ModelGraph,
    n: usize,
    spaces: &[LabelSpace],
    target: &LabelSpace,
    pseudo: &PseudoLabels,
    ma: &RecombinationMap,
    switches: &AblationSwitches,
    w: &crate::sched::LossWeights,
) -> Terms {
    let mut terms = Terms::new();
    if switches.self_training {
        let y_src = source_labels(pseudo, n);
        let pl = loss_pl(tape, graph, spaces, target, &y_src, &pseudo.target[n]);
        terms.push(("pl", w.pseudo_label, pl));
    }
    if switches.cross_model_consistency {
        let cm1 = loss_cm1(tape, graph, spaces, target, ma);
        let cm2 = loss_cm2(tape, graph, spaces, target, ma);
        terms.push(("cm1", w.consistency_overall, cm1));
        terms.push(("cm2", w.consistency_per_class, cm2));
    }
    if switches.max_squares {
        let k = spaces.len();
        let originals: Vec<Var> = (0..k).map(|i| graph.logits[i][i]).collect();
        let en = tape.ensemble_avg(&originals, spaces, target);
        let p = tape.softmax_channels(en);
        let msl = tape.neg_half_square_mean(p);
        terms.push(("msl", w.max_squares, msl));
    }
    terms
}

/// Maximum squares summed over each backbone's own ensemble prediction.
fn per_backbone_max_squares(
    tape: &mut Tape,
    graph: &ModelGraph,
    spaces: &[LabelSpace],
    target: &LabelSpace,
) -> Var {
    let k = spaces.len();
    let terms: Vec<Var> = (0..k)
        .map(|i| {
            let row: Vec<Var> = graph.logits[i].clone();
            let en = tape.ensemble_avg(&row, spaces, target);
            let p = tape.softmax_channels(en);
            tape.neg_half_square_mean(p)
        })
        .collect();
    tape.add_many(&terms)
}

fn check_finite(loss: &StepLoss, iteration: usize) -> Result<()> {
    if loss.total.is_finite() && loss.components.iter().all(|(_, v)| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged(iteration))
    }
}
