//! Central-difference gradient checks for every training loss on small
//! one-stage networks: 100 randomly sampled parameters per loss, step 1e-3,
//! relative error below 1e-3 on at least 95% of them.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unionseg::autodiff::{Tape, Var};
use unionseg::labels::LabelSpace;
use unionseg::losses::{
    build_model_graph, loss_b_adv, loss_c_adv, loss_cm1, loss_cm2, loss_kd, loss_maxsquares,
    loss_pl, ModelGraph,
};
use unionseg::nn::{forward_backbone, forward_classifier, Backbone, BackboneSpec, Classifier, ClassifierSpec};
use unionseg::sched::RecombinationMap;
use unionseg::IGNORE_LABEL;

const STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-3;
const SAMPLES: usize = 100;
const MIN_PASS_RATE: f64 = 0.95;

struct Toy {
    backbones: Vec<Backbone>,
    classifiers: Vec<Classifier>,
    spaces: Vec<LabelSpace>,
    target: LabelSpace,
    image: Array3<f64>,
    pseudo_sources: Vec<Array2<u32>>,
    pseudo_target: Array2<u32>,
    recombination: RecombinationMap,
}

fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = LabelSpace::new([0usize, 1, 2]).unwrap();
    let spaces = vec![
        LabelSpace::new([0usize, 1]).unwrap(),
        LabelSpace::new([1usize, 2]).unwrap(),
    ];
    let spec = BackboneSpec {
        input_channels: 3,
        feature_channels: 4,
        depth: 1,
        downsample_factor: 2,
    };
    let backbones: Vec<Backbone> = (0..2)
        .map(|_| Backbone::init(spec, &mut rng).unwrap())
        .collect();
    let classifiers: Vec<Classifier> = spaces
        .iter()
        .map(|s| {
            Classifier::init(
                ClassifierSpec {
                    label_space: s.clone(),
                    feature_channels: 4,
                },
                &mut rng,
            )
        })
        .collect();
    let image = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(0.0..1.0));
    let pseudo_sources: Vec<Array2<u32>> = spaces
        .iter()
        .map(|s| {
            Array2::from_shape_fn((4, 4), |_| {
                if rng.gen_bool(0.15) {
                    IGNORE_LABEL
                } else {
                    rng.gen_range(0..s.channel_count()) as u32
                }
            })
        })
        .collect();
    let pseudo_target = Array2::from_shape_fn((4, 4), |_| {
        if rng.gen_bool(0.15) {
            IGNORE_LABEL
        } else {
            [0u32, 1, 2][rng.gen_range(0..3)]
        }
    });
    Toy {
        backbones,
        classifiers,
        spaces,
        target,
        image,
        pseudo_sources,
        pseudo_target,
        recombination: RecombinationMap::from_perm(vec![1, 0]).unwrap(),
    }
}

fn scalar_param_count(toy: &Toy) -> usize {
    toy.backbones
        .iter()
        .flat_map(|b| b.params())
        .chain(toy.classifiers.iter().flat_map(|c| c.params()))
        .map(|p| p.len())
        .sum()
}

fn nudge(toy: &mut Toy, global: usize, delta: f64) {
    let mut at = 0usize;
    for p in toy
        .backbones
        .iter_mut()
        .flat_map(|b| b.params_mut())
        .chain(toy.classifiers.iter_mut().flat_map(|c| c.params_mut()))
    {
        if global < at + p.len() {
            *p.iter_mut().nth(global - at).unwrap() += delta;
            return;
        }
        at += p.len();
    }
    panic!("parameter index {global} out of range");
}

/// Analytic gradient for one global parameter index after a backward pass.
fn analytic_grad(tape: &Tape, graph: &ModelGraph, global: usize) -> f64 {
    let mut at = 0usize;
    for &leaf in graph
        .backbone_leaves
        .iter()
        .flatten()
        .chain(graph.classifier_leaves.iter().flatten())
    {
        let g = tape.grad(leaf);
        if global < at + g.len() {
            return *g.iter().nth(global - at).unwrap();
        }
        at += g.len();
    }
    panic!("parameter index {global} out of range");
}

fn forward_loss<F>(toy: &Toy, build: &F) -> (Tape, ModelGraph, Var)
where
    F: Fn(&mut Tape, &ModelGraph, &Toy) -> Var,
{
    let mut tape = Tape::new();
    let img = tape.leaf3(toy.image.clone());
    let b_refs: Vec<&Backbone> = toy.backbones.iter().collect();
    let c_refs: Vec<&Classifier> = toy.classifiers.iter().collect();
    let graph = build_model_graph(&mut tape, &b_refs, &c_refs, img);
    let loss = build(&mut tape, &graph, toy);
    (tape, graph, loss)
}

/// Central differences against the tape gradient on `SAMPLES` random
/// parameters; asserts the pass rate.
fn check<F>(name: &str, seed: u64, build: F)
where
    F: Fn(&mut Tape, &ModelGraph, &Toy) -> Var,
{
    let base = toy(seed);
    let (mut tape, graph, loss) = forward_loss(&base, &build);
    tape.backward(loss);
    let total = scalar_param_count(&base);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut passed = 0usize;
    for _ in 0..SAMPLES {
        let idx = rng.gen_range(0..total);
        let ad = analytic_grad(&tape, &graph, idx);
        let mut plus = toy(seed);
        nudge(&mut plus, idx, STEP);
        let (t1, _, l1) = forward_loss(&plus, &build);
        let f_plus = t1.scalar_value(l1);
        let mut minus = toy(seed);
        nudge(&mut minus, idx, -STEP);
        let (t2, _, l2) = forward_loss(&minus, &build);
        let f_minus = t2.scalar_value(l2);
        let fd = (f_plus - f_minus) / (2.0 * STEP);
        let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
        if rel < REL_TOL {
            passed += 1;
        }
    }
    let rate = passed as f64 / SAMPLES as f64;
    assert!(
        rate >= MIN_PASS_RATE,
        "{name}: only {passed}/{SAMPLES} sampled parameters within {REL_TOL} relative"
    );
}

pub fn pseudo_label_loss_gradients() {
    check("pseudo-label", 1, |tape, graph, toy| {
        loss_pl(
            tape,
            graph,
            &toy.spaces,
            &toy.target,
            &toy.pseudo_sources,
            &toy.pseudo_target,
        )
    });
}

pub fn overall_consistency_gradients() {
    check("overall consistency", 2, |tape, graph, toy| {
        loss_cm1(tape, graph, &toy.spaces, &toy.target, &toy.recombination)
    });
}

pub fn per_class_consistency_gradients() {
    check("per-class consistency", 3, |tape, graph, toy| {
        loss_cm2(tape, graph, &toy.spaces, &toy.target, &toy.recombination)
    });
}

pub fn classifier_adversarial_gradients() {
    check("classifier adversarial", 4, |tape, graph, toy| {
        loss_c_adv(tape, graph, &toy.pseudo_sources)
    });
}

pub fn backbone_adversarial_gradients() {
    check("backbone adversarial", 5, |tape, graph, toy| {
        loss_b_adv(tape, graph, &toy.spaces, &toy.target, &toy.pseudo_sources)
    });
}

pub fn maximum_squares_gradients() {
    check("maximum squares", 6, |tape, graph, toy| {
        let diag: Vec<Var> = (0..toy.spaces.len()).map(|i| graph.logits[i][i]).collect();
        let en = tape.ensemble_avg(&diag, &toy.spaces, &toy.target);
        let p = tape.softmax_channels(en);
        loss_maxsquares(tape, p)
    });
}

pub fn distillation_gradients() {
    // Teachers are fixed logits from an independent toy; students are the
    // live graph's diagonal. Only student parameters carry gradient.
    let teacher_nets = toy(99);
    let mut teacher_logits: Vec<Array3<f64>> = Vec::new();
    for (i, b) in teacher_nets.backbones.iter().enumerate() {
        let feats = forward_backbone(b, &teacher_nets.image).unwrap();
        teacher_logits.push(
            forward_classifier(&teacher_nets.classifiers[i], &feats, 2).unwrap(),
        );
    }
    check("distillation", 7, move |tape, graph, toy| {
        let students: Vec<Var> = (0..toy.spaces.len()).map(|i| graph.logits[i][i]).collect();
        let teachers: Vec<Var> = teacher_logits
            .iter()
            .map(|l| tape.leaf3(l.clone()))
            .collect();
        loss_kd(tape, &students, &teachers)
    });
}
