//! Model bundles (backbone + classifier + label space), the final
//! integration model, checkpoint persistence, and source pretraining.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::LabeledSample;
use crate::ensemble::{ensemble_logits, softmax_channels, LogitsField};
use crate::labels::LabelSpace;
use crate::metrics::ConfusionMatrix;
use crate::nn::{forward_backbone, forward_classifier, Backbone, BackboneSpec, Classifier, ClassifierSpec};
use crate::sched::{Sgd, TrainSchedule};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub iterations: usize,
    pub seed: u64,
    pub stage: String,
}

/// One source-derived model: a backbone paired with a classifier over that
/// source's label space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub backbone: Backbone,
    pub classifier: Classifier,
    pub meta: TrainMeta,
}

impl ModelBundle {
    pub fn label_space(&self) -> &LabelSpace {
        &self.classifier.spec.label_space
    }

    pub fn downsample(&self) -> usize {
        self.backbone.spec.downsample_factor
    }

    /// Full-resolution logits over this bundle's own channels.
    pub fn logits(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        let features = forward_backbone(&self.backbone, image)?;
        forward_classifier(&self.classifier, &features, self.downsample())
    }

    /// Softmax over the bundle's own channels (including "other").
    pub fn probabilities(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(softmax_channels(&self.logits(image)?))
    }
}

/// The integrated model: one backbone shared by all source classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalModel {
    pub backbone: Backbone,
    pub classifiers: Vec<Classifier>,
    pub meta: TrainMeta,
}

impl FinalModel {
    pub fn spaces(&self) -> Vec<LabelSpace> {
        self.classifiers
            .iter()
            .map(|c| c.spec.label_space.clone())
            .collect()
    }
}

/// Target-space ensemble logits of one backbone with a set of classifiers.
pub fn ensemble_infer_logits(
    backbone: &Backbone,
    classifiers: &[&Classifier],
    target: &LabelSpace,
    image: &Array3<f64>,
) -> Result<Array3<f64>> {
    let features = forward_backbone(backbone, image)?;
    let d = backbone.spec.downsample_factor;
    let mut fields = Vec::with_capacity(classifiers.len());
    let mut spaces = Vec::with_capacity(classifiers.len());
    for c in classifiers {
        let logits = forward_classifier(c, &features, d)?;
        fields.push(LogitsField::new(logits, &c.spec.label_space)?);
        spaces.push(c.spec.label_space.clone());
    }
    ensemble_logits(&fields, &spaces, target)
}

pub fn argmax_channels(x: &Array3<f64>) -> Array2<u32> {
    let (c, h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(y, xx)| {
        let mut best = 0usize;
        for ch in 1..c {
            if x[[ch, y, xx]] > x[[best, y, xx]] {
                best = ch;
            }
        }
        best as u32
    })
}

/// Confusion matrix of one backbone + classifier set, evaluated as the
/// target-space ensemble argmax against target-space ground truth.
pub fn ensemble_confusion(
    backbone: &Backbone,
    classifiers: &[&Classifier],
    target: &LabelSpace,
    samples: &[LabeledSample],
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(target.len());
    for s in samples {
        let logits = ensemble_infer_logits(backbone, classifiers, target, &s.image)?;
        let pred_idx = argmax_channels(&logits);
        // Map target-space channel index back to the class identifier.
        let pred = pred_idx.mapv(|i| target.classes()[i as usize] as u32);
        cm.accumulate(&pred, &s.labels)?;
    }
    Ok(cm)
}

/// mIoU convenience wrapper over [`ensemble_confusion`].
pub fn evaluate_ensemble(
    backbone: &Backbone,
    classifiers: &[&Classifier],
    target: &LabelSpace,
    samples: &[LabeledSample],
) -> Result<f64> {
    ensemble_confusion(backbone, classifiers, target, samples)?
        .miou(None)
        .ok_or_else(|| Error::Data("no defined classes in evaluation".into()))
}

/// Confusion matrix of the multi-model prediction used before integration:
/// each bundle's softmax output is cast to the target space, the casts are
/// averaged, and the argmax is compared against target-space ground truth.
pub fn cast_ensemble_confusion(
    bundles: &[&ModelBundle],
    target: &LabelSpace,
    samples: &[LabeledSample],
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(target.len());
    for s in samples {
        let mut cast = Vec::with_capacity(bundles.len());
        for bundle in bundles {
            cast.push(crate::ensemble::cast_probability(
                &bundle.probabilities(&s.image)?,
                bundle.label_space(),
                target,
            )?);
        }
        let avg = crate::ensemble::average_cast(&cast)?;
        let pred_idx = argmax_channels(avg.values());
        let pred = pred_idx.mapv(|i| target.classes()[i as usize] as u32);
        cm.accumulate(&pred, &s.labels)?;
    }
    Ok(cm)
}

/// mIoU convenience wrapper over [`cast_ensemble_confusion`].
pub fn evaluate_cast_ensemble(
    bundles: &[&ModelBundle],
    target: &LabelSpace,
    samples: &[LabeledSample],
) -> Result<f64> {
    cast_ensemble_confusion(bundles, target, samples)?
        .miou(None)
        .ok_or_else(|| Error::Data("no defined classes in evaluation".into()))
}

/// mIoU of a bundle over its own channel space (labels must already be in
/// channel space, as produced by source restriction).
pub fn evaluate_source(bundle: &ModelBundle, samples: &[LabeledSample]) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(bundle.label_space().channel_count());
    for s in samples {
        let logits = bundle.logits(&s.image)?;
        cm.accumulate(&argmax_channels(&logits), &s.labels)?;
    }
    cm.miou(None)
        .ok_or_else(|| Error::Data("no defined classes in evaluation".into()))
}

/// Pretrains one source model with cross-entropy on labels in the source's
/// channel space (0 = "other"), SGD with poly decay.
pub fn pretrain_source(
    train: &[LabeledSample],
    backbone_spec: BackboneSpec,
    classifier_spec: ClassifierSpec,
    schedule: &TrainSchedule,
) -> Result<ModelBundle> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty pretraining dataset".into()));
    }
    let channels = classifier_spec.output_channels() as u32;
    for s in train {
        for &l in s.labels.iter() {
            if l != crate::IGNORE_LABEL && l >= channels {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    channels: channels as usize,
                });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut backbone = Backbone::init(backbone_spec, &mut rng)?;
    let mut classifier = Classifier::init(classifier_spec, &mut rng);
    let mut opt_b = Sgd::for_schedule(schedule);
    let mut opt_c = Sgd::for_schedule(schedule);
    let mut order: Vec<usize> = Vec::new();
    for iter in 0..schedule.total_iterations {
        let lr = schedule.lr_at(iter);
        let d = backbone.spec.downsample_factor;
        let mut grads_b: Option<Vec<ArrayD<f64>>> = None;
        let mut grads_c: Option<Vec<ArrayD<f64>>> = None;
        let mut loss_sum = 0.0;
        for _ in 0..schedule.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            let sample = &train[order.pop().unwrap()];
            let mut tape = Tape::new();
            let x = tape.leaf3(sample.image.clone());
            let lb = backbone.leaves(&mut tape);
            let lc = classifier.leaves(&mut tape);
            let features = backbone.apply(&mut tape, &lb, x);
            let logits = classifier.apply(&mut tape, &lc, features, d);
            let loss = tape.ce_mean(logits, &sample.labels);
            loss_sum += tape.scalar_value(loss);
            tape.backward(loss);
            accumulate(&mut grads_b, &lb, &tape);
            accumulate(&mut grads_c, &lc, &tape);
        }
        if !loss_sum.is_finite() {
            return Err(Error::Diverged(iter));
        }
        let inv = 1.0 / schedule.batch_size as f64;
        apply_step(&mut opt_b, backbone.params_mut(), grads_b.as_ref().unwrap(), lr, inv);
        apply_step(&mut opt_c, classifier.params_mut(), grads_c.as_ref().unwrap(), lr, inv);
    }
    Ok(ModelBundle {
        backbone,
        classifier,
        meta: TrainMeta {
            iterations: schedule.total_iterations,
            seed: schedule.seed,
            stage: "pretrain".into(),
        },
    })
}

pub(crate) fn accumulate(
    acc: &mut Option<Vec<ArrayD<f64>>>,
    vars: &[crate::autodiff::Var],
    tape: &Tape,
) {
    match acc {
        None => *acc = Some(vars.iter().map(|&v| tape.grad(v).clone()).collect()),
        Some(gs) => {
            for (g, &v) in gs.iter_mut().zip(vars) {
                *g += tape.grad(v);
            }
        }
    }
}

pub(crate) fn apply_step(
    opt: &mut Sgd,
    mut params: Vec<&mut ArrayD<f64>>,
    grads: &[ArrayD<f64>],
    lr: f64,
    scale: f64,
) {
    let scaled: Vec<ArrayD<f64>> = grads.iter().map(|g| g.mapv(|v| v * scale)).collect();
    let refs: Vec<&ArrayD<f64>> = scaled.iter().collect();
    opt.step(&mut params, &refs, lr);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    kind: String,
    backbone: BackboneSpec,
    classifiers: Vec<ClassifierSpec>,
    meta: TrainMeta,
}

fn write_tensor(path: &Path, tensor: &ArrayD<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + tensor.len() * 8);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_tensor(path: &Path, expected_shape: &[usize]) -> Result<ArrayD<f64>> {
    let mut file = fs::File::open(path)
        .map_err(|_| Error::Checkpoint(format!("missing tensor {}", path.display())))?;
    let mut head = [0u8; 12];
    file.read_exact(&mut head)
        .map_err(|_| Error::Checkpoint(format!("truncated tensor {}", path.display())))?;
    if &head[0..4] != TENSOR_MAGIC {
        return Err(Error::Checkpoint(format!("bad tensor magic in {}", path.display())));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported tensor version {version}")));
    }
    let ndim = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut dims_buf = vec![0u8; ndim * 4];
    file.read_exact(&mut dims_buf)
        .map_err(|_| Error::Checkpoint(format!("truncated tensor {}", path.display())))?;
    let shape: Vec<usize> = dims_buf
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    if shape != expected_shape {
        return Err(Error::Checkpoint(format!(
            "tensor {} has shape {shape:?}, manifest expects {expected_shape:?}",
            path.display()
        )));
    }
    let count: usize = shape.iter().product();
    let mut data = vec![0u8; count * 8];
    file.read_exact(&mut data)
        .map_err(|_| Error::Checkpoint(format!("truncated tensor {}", path.display())))?;
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&shape), values)
        .map_err(|e| Error::Checkpoint(format!("bad tensor data: {e}")))
}

fn save_params(dir: &Path, prefix: &str, names: &[String], params: &[&ArrayD<f64>]) -> Result<()> {
    for (name, tensor) in names.iter().zip(params) {
        write_tensor(&dir.join(format!("{prefix}.{name}.tensor")), tensor)?;
    }
    Ok(())
}

fn load_params(dir: &Path, prefix: &str, names: &[String], params: Vec<&mut ArrayD<f64>>) -> Result<()> {
    for (name, param) in names.iter().zip(params) {
        let loaded = read_tensor(&dir.join(format!("{prefix}.{name}.tensor")), param.shape())?;
        *param = loaded;
    }
    Ok(())
}

pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        kind: "bundle".into(),
        backbone: bundle.backbone.spec,
        classifiers: vec![bundle.classifier.spec.clone()],
        meta: bundle.meta.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
    save_params(dir, "backbone", &bundle.backbone.param_names(), &bundle.backbone.params())?;
    save_params(dir, "classifier", &bundle.classifier.param_names(), &bundle.classifier.params())?;
    Ok(())
}

fn read_checkpoint_manifest(dir: &Path, expected_kind: &str) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    if manifest.kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "checkpoint kind {} where {expected_kind} expected",
            manifest.kind
        )));
    }
    Ok(manifest)
}

pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let manifest = read_checkpoint_manifest(dir, "bundle")?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut backbone = Backbone::init(manifest.backbone, &mut rng)?;
    let mut classifier = Classifier::init(manifest.classifiers[0].clone(), &mut rng);
    load_params(dir, "backbone", &backbone.param_names(), backbone.params_mut())?;
    load_params(dir, "classifier", &classifier.param_names(), classifier.params_mut())?;
    Ok(ModelBundle {
        backbone,
        classifier,
        meta: manifest.meta,
    })
}

/// Loads a bundle and checks its label space against an expected one.
pub fn load_bundle_expecting(dir: &Path, space: &LabelSpace) -> Result<ModelBundle> {
    let bundle = load_bundle(dir)?;
    if bundle.label_space() != space {
        return Err(Error::Checkpoint(format!(
            "checkpoint label space {:?} does not match expected {:?}",
            bundle.label_space().classes(),
            space.classes()
        )));
    }
    Ok(bundle)
}

pub fn save_final(model: &FinalModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        kind: "final".into(),
        backbone: model.backbone.spec,
        classifiers: model.classifiers.iter().map(|c| c.spec.clone()).collect(),
        meta: model.meta.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
    save_params(dir, "backbone", &model.backbone.param_names(), &model.backbone.params())?;
    for (i, c) in model.classifiers.iter().enumerate() {
        save_params(dir, &format!("classifier{i}"), &c.param_names(), &c.params())?;
    }
    Ok(())
}

pub fn load_final(dir: &Path) -> Result<FinalModel> {
    let manifest = read_checkpoint_manifest(dir, "final")?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut backbone = Backbone::init(manifest.backbone, &mut rng)?;
    load_params(dir, "backbone", &backbone.param_names(), backbone.params_mut())?;
    let mut classifiers = Vec::new();
    for (i, spec) in manifest.classifiers.iter().enumerate() {
        let mut c = Classifier::init(spec.clone(), &mut rng);
        load_params(dir, &format!("classifier{i}"), &c.param_names(), c.params_mut())?;
        classifiers.push(c);
    }
    Ok(FinalModel {
        backbone,
        classifiers,
        meta: manifest.meta,
    })
}
