//! Pseudo-label generation on the unlabeled target split: target-space labels
//! from the casting ensemble and per-model labels in each classifier's own
//! channel space, both with a confidence floor, plus their on-disk store.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{read_labels, write_labels};
use crate::ensemble::{average_cast, cast_probability};
use crate::labels::LabelSpace;
use crate::models::ModelBundle;
use crate::{Error, Result, IGNORE_LABEL};

/// Pseudo labels for one target training split.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    /// Target-space class identifiers per image; low-confidence pixels are
    /// `IGNORE_LABEL`.
    pub target: Vec<Array2<u32>>,
    /// `per_source[i][n]`: model `i`'s channel-space labels for image `n`
    /// (0 = "other").
    pub per_source: Vec<Vec<Array2<u32>>>,
    pub threshold: f64,
    /// Which models produced these labels, e.g. "pretrained" or "adapted".
    pub provenance: String,
}

/// Argmax with a confidence floor: pixels whose top probability is strictly
/// below `threshold` become `IGNORE_LABEL`; ties keep the lowest channel.
fn confident_argmax(probs: &Array3<f64>, threshold: f64) -> Array2<u32> {
    let (c, h, w) = probs.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        for ch in 1..c {
            if probs[[ch, y, x]] > probs[[best, y, x]] {
                best = ch;
            }
        }
        if probs[[best, y, x]] < threshold {
            IGNORE_LABEL
        } else {
            best as u32
        }
    })
}

/// Target-space pseudo label of one image from already-cast probability
/// fields: the fields are averaged, argmaxed, and mapped back to class
/// identifiers.
pub fn ensemble_pseudo_from_probs(
    cast: &[crate::ensemble::TargetProbField],
    target: &LabelSpace,
    threshold: f64,
) -> Result<Array2<u32>> {
    let avg = average_cast(cast)?;
    let idx = confident_argmax(avg.values(), threshold);
    Ok(idx.mapv(|i| {
        if i == IGNORE_LABEL {
            IGNORE_LABEL
        } else {
            target.classes()[i as usize] as u32
        }
    }))
}

/// Generates pseudo labels for every image: the target-space label via
/// probability casting and averaging over all models, and each model's own
/// channel-space label from its softmax output.
pub fn generate_pseudo_labels(
    bundles: &[&ModelBundle],
    target: &LabelSpace,
    images: &[Array3<f64>],
    threshold: f64,
    provenance: &str,
) -> Result<PseudoLabels> {
    if bundles.is_empty() {
        return Err(Error::Data("no models to label with".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "confidence threshold {threshold} outside [0, 1]"
        )));
    }
    let mut target_labels = Vec::with_capacity(images.len());
    let mut per_source: Vec<Vec<Array2<u32>>> =
        vec![Vec::with_capacity(images.len()); bundles.len()];
    for image in images {
        let mut cast = Vec::with_capacity(bundles.len());
        for (i, bundle) in bundles.iter().enumerate() {
            let probs = bundle.probabilities(image)?;
            per_source[i].push(confident_argmax(&probs, threshold));
            cast.push(cast_probability(&probs, bundle.label_space(), target)?);
        }
        target_labels.push(ensemble_pseudo_from_probs(&cast, target, threshold)?);
    }
    Ok(PseudoLabels {
        target: target_labels,
        per_source,
        threshold,
        provenance: provenance.to_string(),
    })
}

// ---------------------------------------------------------------------------
// On-disk store
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct PseudoIndex {
    version: u32,
    threshold: f64,
    provenance: String,
    images: usize,
    sources: usize,
}

pub fn save_pseudo_labels(dir: &Path, labels: &PseudoLabels) -> Result<()> {
    fs::create_dir_all(dir)?;
    let index = PseudoIndex {
        version: 1,
        threshold: labels.threshold,
        provenance: labels.provenance.clone(),
        images: labels.target.len(),
        sources: labels.per_source.len(),
    };
    fs::write(
        dir.join("index.json"),
        serde_json::to_string_pretty(&index).unwrap(),
    )?;
    for (n, grid) in labels.target.iter().enumerate() {
        write_labels(&dir.join(format!("target_{n:04}.lblg")), grid)?;
    }
    for (i, per_image) in labels.per_source.iter().enumerate() {
        for (n, grid) in per_image.iter().enumerate() {
            write_labels(&dir.join(format!("src{i}_{n:04}.lblg")), grid)?;
        }
    }
    Ok(())
}

pub fn load_pseudo_labels(dir: &Path) -> Result<PseudoLabels> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
    let index: PseudoIndex =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("bad pseudo index: {e}")))?;
    if index.version != 1 {
        return Err(Error::Parse(format!(
            "unsupported pseudo-label version {}",
            index.version
        )));
    }
    let target = (0..index.images)
        .map(|n| read_labels(&dir.join(format!("target_{n:04}.lblg"))))
        .collect::<Result<Vec<_>>>()?;
    let per_source = (0..index.sources)
        .map(|i| {
            (0..index.images)
                .map(|n| read_labels(&dir.join(format!("src{i}_{n:04}.lblg"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabels {
        target,
        per_source,
        threshold: index.threshold,
        provenance: index.provenance,
    })
}
