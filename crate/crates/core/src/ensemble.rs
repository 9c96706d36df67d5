//! Combining partial-label-space classifier outputs into target-space
//! predictions: logit averaging over the classifiers possessing each class,
//! probability casting of the "other" mass, and the per-class average-logit
//! operators used by the consistency and adversarial losses.

use ndarray::{Array3, Axis};

use crate::labels::LabelSpace;
use crate::{Error, Result};

/// Per-pixel classifier logits, shape `[1 + |space|, H, W]`. Channel 0 is the
/// "other" channel (classes outside the owning space); channels `1..` follow
/// the owning space's class order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsField {
    values: Array3<f64>,
}

impl LogitsField {
    pub fn new(values: Array3<f64>, space: &LabelSpace) -> Result<Self> {
        if values.shape()[0] != space.channel_count() {
            return Err(Error::ShapeMismatch(format!(
                "logits have {} channels, space needs {}",
                values.shape()[0],
                space.channel_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite logits".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }
}

/// Per-pixel probabilities over the target classes, shape `[|target|, H, W]`,
/// summing to 1 per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetProbField {
    values: Array3<f64>,
}

impl TargetProbField {
    pub const SUM_TOLERANCE: f64 = 1e-5;

    pub fn new(values: Array3<f64>) -> Result<Self> {
        for v in values.iter() {
            if !(0.0..=1.0 + 1e-12).contains(v) {
                return Err(Error::Data(format!("probability {v} outside [0,1]")));
            }
        }
        let sums = values.sum_axis(Axis(0));
        if sums.iter().any(|s| (s - 1.0).abs() > Self::SUM_TOLERANCE) {
            return Err(Error::Data("per-pixel probabilities do not sum to 1".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }
}

/// Softmax over the channel axis of a `[C, H, W]` grid.
pub fn softmax_channels(x: &Array3<f64>) -> Array3<f64> {
    let mut out = x.clone();
    let (_, h, w) = out.dim();
    for y in 0..h {
        for xx in 0..w {
            let mut col = out.slice_mut(ndarray::s![.., y, xx]);
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            col.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = col.sum();
            col.mapv_inplace(|v| v / sum);
        }
    }
    out
}

fn check_fields(
    fields: &[&Array3<f64>],
    spaces: &[LabelSpace],
    target: &LabelSpace,
) -> Result<(usize, usize)> {
    if fields.len() != spaces.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} fields but {} spaces",
            fields.len(),
            spaces.len()
        )));
    }
    if fields.is_empty() {
        return Err(Error::ShapeMismatch("empty model list".into()));
    }
    let (_, h, w) = fields[0].dim();
    for (field, space) in fields.iter().zip(spaces) {
        let (c, fh, fw) = field.dim();
        if c != space.channel_count() {
            return Err(Error::ShapeMismatch(format!(
                "field has {c} channels, space needs {}",
                space.channel_count()
            )));
        }
        if (fh, fw) != (h, w) {
            return Err(Error::ShapeMismatch("field grids differ in size".into()));
        }
        if !space.is_subset_of(target) {
            return Err(Error::UnionViolation(
                "source space not a subset of target".into(),
            ));
        }
    }
    Ok((h, w))
}

/// Average, per target class, the logits of the classifiers possessing that
/// class; the "other" channel of each field is excluded. The union constraint
/// guarantees every class has at least one contributor.
pub fn ensemble_logits(
    fields: &[LogitsField],
    spaces: &[LabelSpace],
    target: &LabelSpace,
) -> Result<Array3<f64>> {
    let raw: Vec<&Array3<f64>> = fields.iter().map(|f| f.values()).collect();
    let (h, w) = check_fields(&raw, spaces, target)?;
    let mut out = Array3::<f64>::zeros((target.len(), h, w));
    for (tc, &class) in target.classes().iter().enumerate() {
        let mut count = 0usize;
        for (field, space) in raw.iter().zip(spaces) {
            if let Some(ch) = space.channel_of(class) {
                let mut dst = out.index_axis_mut(Axis(0), tc);
                dst += &field.index_axis(Axis(0), ch);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::UnionViolation(format!(
                "class {class} covered by no source space"
            )));
        }
        out.index_axis_mut(Axis(0), tc)
            .mapv_inplace(|v| v / count as f64);
    }
    Ok(out)
}

/// The classifier ensemble: averaged per-class logits followed by softmax
/// over the target-class axis.
pub fn ensemble_predict(
    fields: &[LogitsField],
    spaces: &[LabelSpace],
    target: &LabelSpace,
) -> Result<TargetProbField> {
    let logits = ensemble_logits(fields, spaces, target)?;
    TargetProbField::new(softmax_channels(&logits))
}

/// Casts one model's softmax output (over `1 + |space|` channels, channel 0
/// being "other") to the target label space: in-space classes keep their
/// probability, the "other" mass is split uniformly over the out-of-space
/// classes. When the space equals the target, the "other" mass is discarded
/// and the remaining channels renormalized.
pub fn cast_probability(
    probs: &Array3<f64>,
    space: &LabelSpace,
    target: &LabelSpace,
) -> Result<TargetProbField> {
    let (c, h, w) = probs.dim();
    if c != space.channel_count() {
        return Err(Error::ShapeMismatch(format!(
            "probability field has {c} channels, space needs {}",
            space.channel_count()
        )));
    }
    if !space.is_subset_of(target) {
        return Err(Error::UnionViolation(
            "source space not a subset of target".into(),
        ));
    }
    let missing = target.len() - space.len();
    let mut out = Array3::<f64>::zeros((target.len(), h, w));
    for (tc, &class) in target.classes().iter().enumerate() {
        match space.channel_of(class) {
            Some(ch) => out
                .index_axis_mut(Axis(0), tc)
                .assign(&probs.index_axis(Axis(0), ch)),
            None => {
                let other = probs.index_axis(Axis(0), 0);
                out.index_axis_mut(Axis(0), tc)
                    .assign(&other.mapv(|v| v / missing as f64));
            }
        }
    }
    if missing == 0 {
        // Full-space model: drop the "other" mass and renormalize.
        for y in 0..h {
            for x in 0..w {
                let mut col = out.slice_mut(ndarray::s![.., y, x]);
                let sum: f64 = col.sum();
                if sum > 0.0 {
                    col.mapv_inplace(|v| v / sum);
                } else {
                    col.fill(1.0 / target.len() as f64);
                }
            }
        }
    }
    TargetProbField::new(out)
}

/// Arithmetic mean of target-space probability fields.
pub fn average_cast(fields: &[TargetProbField]) -> Result<TargetProbField> {
    if fields.is_empty() {
        return Err(Error::ShapeMismatch("empty field list".into()));
    }
    let dim = fields[0].values().dim();
    let mut sum = Array3::<f64>::zeros(dim);
    for f in fields {
        if f.values().dim() != dim {
            return Err(Error::ShapeMismatch("field grids differ in size".into()));
        }
        sum += f.values();
    }
    sum.mapv_inplace(|v| v / fields.len() as f64);
    TargetProbField::new(sum)
}

/// Per-class average logits of the recombined models: each field is
/// `C_ma(i)(B_i(x))` and `spaces` are the matched classifiers' spaces. The
/// recombination map being a permutation, per-class contributor counts equal
/// those of the original classifier set.
pub fn average_logits_delta(
    recombined: &[LogitsField],
    matched_spaces: &[LabelSpace],
    target: &LabelSpace,
) -> Result<Array3<f64>> {
    ensemble_logits(recombined, matched_spaces, target)
}

/// Per-class average logits of all classifiers applied to one backbone's
/// features: each field is `C_j(B_i(x))` for fixed `i`.
pub fn average_logits_delta_i(
    per_backbone: &[LogitsField],
    spaces: &[LabelSpace],
    target: &LabelSpace,
) -> Result<Array3<f64>> {
    ensemble_logits(per_backbone, spaces, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr3;

    fn space(cs: &[usize]) -> LabelSpace {
        LabelSpace::new(cs.iter().copied()).unwrap()
    }

    fn field(vals: Array3<f64>, s: &LabelSpace) -> LogitsField {
        LogitsField::new(vals, s).unwrap()
    }

    // Target {a,b,c} = {0,1,2}; S1 = {a,b}, S2 = {b,c}.
    #[test]
    fn ensemble_single_pixel() {
        let target = space(&[0, 1, 2]);
        let s1 = space(&[0, 1]);
        let s2 = space(&[1, 2]);
        // channels: [other, a, b] and [other, b, c]
        let f1 = field(arr3(&[[[7.0]], [[2.0]], [[0.0]]]), &s1);
        let f2 = field(arr3(&[[[-3.0]], [[4.0]], [[1.0]]]), &s2);
        let out = ensemble_logits(&[f1, f2], &[s1, s2], &target).unwrap();
        assert_abs_diff_eq!(out[[0, 0, 0]], 2.0); // a: only model 1
        assert_abs_diff_eq!(out[[1, 0, 0]], 2.0); // b: (0 + 4) / 2
        assert_abs_diff_eq!(out[[2, 0, 0]], 1.0); // c: only model 2
    }

    #[test]
    fn ensemble_identity_when_single_full_model() {
        let target = space(&[0, 1]);
        let s = target.clone();
        let f = field(arr3(&[[[0.5]], [[1.5]], [[-2.0]]]), &s);
        let out = ensemble_logits(&[f.clone()], &[s], &target).unwrap();
        assert_abs_diff_eq!(out[[0, 0, 0]], 1.5);
        assert_abs_diff_eq!(out[[1, 0, 0]], -2.0);
    }

    #[test]
    fn predict_softmax_of_averaged_logits() {
        let target = space(&[0, 1, 2]);
        let s1 = space(&[0, 1]);
        let s2 = space(&[1, 2]);
        let f1 = field(arr3(&[[[0.0]], [[2.0]], [[0.0]]]), &s1);
        let f2 = field(arr3(&[[[0.0]], [[4.0]], [[1.0]]]), &s2);
        let probs = ensemble_predict(&[f1, f2], &[s1, s2], &target).unwrap();
        // ensemble logits {2, 2, 1} -> proportional to (e^2, e^2, e^1)
        let z = 2.0 * 2.0f64.exp() + 1.0f64.exp();
        assert_abs_diff_eq!(probs.values()[[0, 0, 0]], 2.0f64.exp() / z, epsilon = 1e-12);
        assert_abs_diff_eq!(probs.values()[[2, 0, 0]], 1.0f64.exp() / z, epsilon = 1e-12);
    }

    #[test]
    fn predict_uniform_for_equal_logits_and_shift_invariant() {
        let target = space(&[0, 1, 2]);
        let s = target.clone();
        let f = field(Array3::zeros((4, 2, 2)), &s);
        let probs = ensemble_predict(&[f], &[s.clone()], &target).unwrap();
        for v in probs.values().iter() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
        }
        let f1 = field(arr3(&[[[0.0]], [[1.0]], [[2.0]], [[3.0]]]), &s);
        let f2 = field(arr3(&[[[5.0]], [[6.0]], [[7.0]], [[8.0]]]), &s);
        let p1 = ensemble_predict(&[f1], &[s.clone()], &target).unwrap();
        let p2 = ensemble_predict(&[f2], &[s.clone()], &target).unwrap();
        for (a, b) in p1.values().iter().zip(p2.values().iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn cast_splits_other_mass_uniformly() {
        let target = space(&[0, 1, 2]);
        let s = space(&[0]);
        let probs = arr3(&[[[0.4]], [[0.6]]]);
        let out = cast_probability(&probs, &s, &target).unwrap();
        assert_abs_diff_eq!(out.values()[[0, 0, 0]], 0.6);
        assert_abs_diff_eq!(out.values()[[1, 0, 0]], 0.2);
        assert_abs_diff_eq!(out.values()[[2, 0, 0]], 0.2);
    }

    #[test]
    fn cast_two_of_four() {
        let target = space(&[0, 1, 2, 3]);
        let s = space(&[0, 1]);
        let probs = arr3(&[[[0.5]], [[0.3]], [[0.2]]]);
        let out = cast_probability(&probs, &s, &target).unwrap();
        assert_abs_diff_eq!(out.values()[[0, 0, 0]], 0.3);
        assert_abs_diff_eq!(out.values()[[1, 0, 0]], 0.2);
        assert_abs_diff_eq!(out.values()[[2, 0, 0]], 0.25);
        assert_abs_diff_eq!(out.values()[[3, 0, 0]], 0.25);
    }

    #[test]
    fn cast_full_space_renormalizes() {
        let target = space(&[0, 1]);
        let s = target.clone();
        let probs = arr3(&[[[0.0]], [[0.7]], [[0.3]]]);
        let out = cast_probability(&probs, &s, &target).unwrap();
        assert_abs_diff_eq!(out.values()[[0, 0, 0]], 0.7);
        assert_abs_diff_eq!(out.values()[[1, 0, 0]], 0.3);
        // Nonzero "other" mass is dropped and the rest renormalized.
        let probs = arr3(&[[[0.2]], [[0.4]], [[0.4]]]);
        let out = cast_probability(&probs, &s, &target).unwrap();
        assert_abs_diff_eq!(out.values()[[0, 0, 0]], 0.5);
        assert_abs_diff_eq!(out.values()[[1, 0, 0]], 0.5);
    }

    #[test]
    fn average_cast_mean() {
        let a = TargetProbField::new(arr3(&[[[1.0]], [[0.0]]])).unwrap();
        let b = TargetProbField::new(arr3(&[[[0.0]], [[1.0]]])).unwrap();
        let avg = average_cast(&[a.clone(), b]).unwrap();
        assert_abs_diff_eq!(avg.values()[[0, 0, 0]], 0.5);
        let same = average_cast(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(same.values(), a.values());
        assert!(average_cast(&[]).is_err());
    }

    #[test]
    fn delta_disjoint_spaces() {
        let target = space(&[0, 1]);
        let s1 = space(&[0]);
        let s2 = space(&[1]);
        let f1 = field(arr3(&[[[0.0]], [[3.0]]]), &s1);
        let f2 = field(arr3(&[[[0.0]], [[5.0]]]), &s2);
        let d = average_logits_delta(&[f1, f2], &[s1, s2], &target).unwrap();
        assert_abs_diff_eq!(d[[0, 0, 0]], 3.0);
        assert_abs_diff_eq!(d[[1, 0, 0]], 5.0);
    }

    #[test]
    fn delta_i_partial_overlap() {
        let target = space(&[0, 1]);
        let s1 = space(&[0, 1]);
        let s2 = space(&[1]);
        // C_1 on B_i: {a:1, b:2}; C_2 on B_i: {b:4}
        let f1 = field(arr3(&[[[0.0]], [[1.0]], [[2.0]]]), &s1);
        let f2 = field(arr3(&[[[0.0]], [[4.0]]]), &s2);
        let d = average_logits_delta_i(&[f1, f2], &[s1, s2], &target).unwrap();
        assert_abs_diff_eq!(d[[0, 0, 0]], 1.0);
        assert_abs_diff_eq!(d[[1, 0, 0]], 3.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let target = space(&[0, 1]);
        let s = space(&[0]);
        let f = LogitsField::new(Array3::zeros((3, 1, 1)), &target).unwrap();
        assert!(ensemble_logits(&[f], &[s], &target).is_err());
    }
}
