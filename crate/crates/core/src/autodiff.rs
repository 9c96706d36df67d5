//! Minimal reverse-mode autodiff on dense `f64` arrays.
//!
//! A [`Tape`] records every operation; [`Tape::backward`] walks the records
//! in reverse creation order and accumulates gradients. The op set is exactly
//! what the training losses need: convolution, ReLU, bilinear upsampling,
//! channel softmax, the partial-label-space ensemble average, channel
//! gather, and scalar reductions (cross-entropy, L1, KL divergence, maximum
//! squares). Everything is `f64` so central-difference checks are meaningful.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix3, Ix4, IxDyn};

use crate::labels::LabelSpace;
use crate::IGNORE_LABEL;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    SoftmaxCh(Var),
    /// `out[c] = mean over assign[c] of inputs[m][ch]`.
    EnsembleAvg {
        inputs: Vec<Var>,
        assign: Vec<Vec<(usize, usize)>>,
    },
    GatherCh {
        x: Var,
        chans: Vec<usize>,
    },
    /// Mean cross-entropy over non-ignored pixels; 0 when all are ignored.
    CeMean {
        logits: Var,
        labels: Array2<u32>,
    },
    /// Mean over pixels of the per-pixel sum over channels of `|a - b|`.
    L1Mean {
        a: Var,
        b: Var,
    },
    /// Mean over pixels of `KL(softmax(student) || softmax(teacher))`;
    /// the teacher is detached.
    KldMean {
        student: Var,
        teacher: Var,
    },
    /// `-(1/(2N)) * sum p^2` over a probability field with N pixels.
    NegHalfSquareMean(Var),
}

struct Node {
    value: ArrayD<f64>,
    grad: ArrayD<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn softmax3(x: &Array3<f64>) -> Array3<f64> {
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

fn as3(x: &ArrayD<f64>) -> Array3<f64> {
    x.clone().into_dimensionality::<Ix3>().expect("3-d array")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        let grad = ArrayD::zeros(value.raw_dim());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf3(&mut self, value: Array3<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.sum()
    }

    pub fn grad(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].grad
    }

    pub fn zero_scalar(&mut self) -> Var {
        self.leaf(scalar(0.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn add_many(&mut self, vs: &[Var]) -> Var {
        assert!(!vs.is_empty(), "add_many over empty list");
        let mut acc = vs[0];
        for &v in &vs[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    /// 2-d convolution: `x` is `[IC, H, W]`, `w` is `[OC, IC, KH, KW]`,
    /// `b` is `[OC]`; zero padding `pad` on both spatial axes.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let wv = self.nodes[w.0]
            .value
            .clone()
            .into_dimensionality::<Ix4>()
            .expect("conv weight is 4-d");
        let bv = self.nodes[b.0]
            .value
            .clone()
            .into_dimensionality::<Ix1>()
            .expect("conv bias is 1-d");
        let (ic, h, wdt) = xv.dim();
        let (oc, wic, kh, kw) = wv.dim();
        assert_eq!(ic, wic, "conv channel mismatch");
        assert_eq!(oc, bv.len(), "conv bias mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wdt + 2 * pad - kw) / stride + 1;
        let mut out = Array3::<f64>::zeros((oc, oh, ow));
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bv[o];
                    for i in 0..ic {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wdt as isize {
                                    continue;
                                }
                                acc += xv[[i, iy as usize, ix as usize]] * wv[[o, i, ky, kx]];
                            }
                        }
                    }
                    out[[o, oy, ox]] = acc;
                }
            }
        }
        self.push(
            out.into_dyn(),
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Bilinear upsampling of `[C, H, W]` by an integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return self.scale(x, 1.0);
        }
        let xv = as3(&self.nodes[x.0].value);
        let (c, h, w) = xv.dim();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Array3::<f64>::zeros((c, oh, ow));
        for oy in 0..oh {
            let (y0, y1, wy) = upsample_coords(oy, factor, h);
            for ox in 0..ow {
                let (x0, x1, wx) = upsample_coords(ox, factor, w);
                for ch in 0..c {
                    let top = xv[[ch, y0, x0]] * (1.0 - wx) + xv[[ch, y0, x1]] * wx;
                    let bot = xv[[ch, y1, x0]] * (1.0 - wx) + xv[[ch, y1, x1]] * wx;
                    out[[ch, oy, ox]] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        self.push(out.into_dyn(), Op::Upsample { x, factor })
    }

    /// Softmax over the channel axis of `[C, H, W]`.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let value = softmax3(&as3(&self.nodes[x.0].value));
        self.push(value.into_dyn(), Op::SoftmaxCh(x))
    }

    /// Target-space per-class logit average over partial-label-space
    /// classifier outputs. Each input is `[1 + |space|, H, W]` with channel 0
    /// as "other"; the output is `[|target|, H, W]`.
    pub fn ensemble_avg(&mut self, inputs: &[Var], spaces: &[LabelSpace], target: &LabelSpace) -> Var {
        assert_eq!(inputs.len(), spaces.len());
        assert!(!inputs.is_empty());
        let assign: Vec<Vec<(usize, usize)>> = target
            .classes()
            .iter()
            .map(|&class| {
                let contributors: Vec<(usize, usize)> = spaces
                    .iter()
                    .enumerate()
                    .filter_map(|(m, s)| s.channel_of(class).map(|ch| (m, ch)))
                    .collect();
                assert!(
                    !contributors.is_empty(),
                    "class {class} covered by no space; validate the union constraint first"
                );
                contributors
            })
            .collect();
        let fields: Vec<Array3<f64>> = inputs.iter().map(|v| as3(&self.nodes[v.0].value)).collect();
        let (_, h, w) = fields[0].dim();
        let mut out = Array3::<f64>::zeros((target.len(), h, w));
        for (c, contributors) in assign.iter().enumerate() {
            let inv = 1.0 / contributors.len() as f64;
            for &(m, ch) in contributors {
                let src = fields[m].index_axis(Axis(0), ch);
                let mut dst = out.index_axis_mut(Axis(0), c);
                dst.zip_mut_with(&src, |d, s| *d += s * inv);
            }
        }
        self.push(
            out.into_dyn(),
            Op::EnsembleAvg {
                inputs: inputs.to_vec(),
                assign,
            },
        )
    }

    /// Selects channels of a `[C, H, W]` grid.
    pub fn gather_channels(&mut self, x: Var, chans: &[usize]) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let (_, h, w) = xv.dim();
        let mut out = Array3::<f64>::zeros((chans.len(), h, w));
        for (j, &ch) in chans.iter().enumerate() {
            out.index_axis_mut(Axis(0), j)
                .assign(&xv.index_axis(Axis(0), ch));
        }
        self.push(
            out.into_dyn(),
            Op::GatherCh {
                x,
                chans: chans.to_vec(),
            },
        )
    }

    /// Mean cross-entropy of `[C, H, W]` logits against a `[H, W]` label
    /// grid; `IGNORE_LABEL` pixels are skipped, and an all-ignored grid
    /// yields 0.
    pub fn ce_mean(&mut self, logits: Var, labels: &Array2<u32>) -> Var {
        let lv = as3(&self.nodes[logits.0].value);
        let (c, h, w) = lv.dim();
        assert_eq!((h, w), labels.dim(), "label grid size mismatch");
        let probs = softmax3(&lv);
        let mut total = 0.0;
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                let label = labels[[y, x]];
                if label == IGNORE_LABEL {
                    continue;
                }
                assert!((label as usize) < c, "label {label} out of range for {c} channels");
                total -= probs[[label as usize, y, x]].max(1e-300).ln();
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            scalar(value),
            Op::CeMean {
                logits,
                labels: labels.clone(),
            },
        )
    }

    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let av = as3(&self.nodes[a.0].value);
        let bv = as3(&self.nodes[b.0].value);
        assert_eq!(av.dim(), bv.dim());
        let (_, h, w) = av.dim();
        let n = (h * w) as f64;
        let total: f64 = av
            .iter()
            .zip(bv.iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        self.push(scalar(total / n), Op::L1Mean { a, b })
    }

    pub fn kld_mean(&mut self, student: Var, teacher: Var) -> Var {
        let sv = as3(&self.nodes[student.0].value);
        let tv = as3(&self.nodes[teacher.0].value);
        assert_eq!(sv.dim(), tv.dim());
        let (c, h, w) = sv.dim();
        let p = softmax3(&sv);
        let q = softmax3(&tv);
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let pc = p[[ch, y, x]];
                    if pc > 0.0 {
                        total += pc * (pc.ln() - q[[ch, y, x]].max(1e-300).ln());
                    }
                }
            }
        }
        self.push(scalar(total / (h * w) as f64), Op::KldMean { student, teacher })
    }

    /// Maximum-squares objective on a probability field.
    pub fn neg_half_square_mean(&mut self, p: Var) -> Var {
        let pv = as3(&self.nodes[p.0].value);
        let (_, h, w) = pv.dim();
        let n = (h * w) as f64;
        let total: f64 = pv.iter().map(|v| v * v).sum();
        self.push(scalar(-total / (2.0 * n)), Op::NegHalfSquareMean(p))
    }

    /// Backpropagates from a scalar output through the whole tape.
    pub fn backward(&mut self, out: Var) {
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
        self.nodes[out.0].grad.fill(1.0);
        for i in (0..=out.0).rev() {
            let (before, after) = self.nodes.split_at_mut(i);
            let node = &after[0];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = node.grad.clone();
                    before[a.0].grad += &g;
                    before[b.0].grad += &g;
                }
                Op::Scale(a, c) => {
                    let g = node.grad.mapv(|v| v * c);
                    before[a.0].grad += &g;
                }
                Op::Relu(x) => {
                    let xv = &before[x.0].value;
                    let mut g = node.grad.clone();
                    g.zip_mut_with(xv, |gv, &xval| {
                        if xval <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    before[x.0].grad += &g;
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let g = as3(&node.grad);
                    let xv = as3(&before[x.0].value);
                    let wv = before[w.0]
                        .value
                        .clone()
                        .into_dimensionality::<Ix4>()
                        .unwrap();
                    let (ic, h, wdt) = xv.dim();
                    let (oc, _, kh, kw) = wv.dim();
                    let (_, oh, ow) = g.dim();
                    let mut dx = Array3::<f64>::zeros((ic, h, wdt));
                    let mut dw = Array4::<f64>::zeros(wv.raw_dim());
                    let mut db = Array1::<f64>::zeros(oc);
                    for o in 0..oc {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[[o, oy, ox]];
                                if gv == 0.0 {
                                    continue;
                                }
                                db[o] += gv;
                                for i in 0..ic {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if ix < 0 || ix >= wdt as isize {
                                                continue;
                                            }
                                            let (iy, ix) = (iy as usize, ix as usize);
                                            dx[[i, iy, ix]] += gv * wv[[o, i, ky, kx]];
                                            dw[[o, i, ky, kx]] += gv * xv[[i, iy, ix]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    before[x.0].grad += &dx.into_dyn();
                    before[w.0].grad += &dw.into_dyn();
                    before[b.0].grad += &db.into_dyn();
                }
                Op::Upsample { x, factor } => {
                    let g = as3(&node.grad);
                    let (c, oh, ow) = g.dim();
                    let (h, w) = (oh / factor, ow / factor);
                    let mut dx = Array3::<f64>::zeros((c, h, w));
                    for oy in 0..oh {
                        let (y0, y1, wy) = upsample_coords(oy, *factor, h);
                        for ox in 0..ow {
                            let (x0, x1, wx) = upsample_coords(ox, *factor, w);
                            for ch in 0..c {
                                let gv = g[[ch, oy, ox]];
                                dx[[ch, y0, x0]] += gv * (1.0 - wy) * (1.0 - wx);
                                dx[[ch, y0, x1]] += gv * (1.0 - wy) * wx;
                                dx[[ch, y1, x0]] += gv * wy * (1.0 - wx);
                                dx[[ch, y1, x1]] += gv * wy * wx;
                            }
                        }
                    }
                    before[x.0].grad += &dx.into_dyn();
                }
                Op::SoftmaxCh(x) => {
                    let p = as3(&node.value);
                    let g = as3(&node.grad);
                    let (c, h, w) = p.dim();
                    let mut dx = Array3::<f64>::zeros((c, h, w));
                    for y in 0..h {
                        for xx in 0..w {
                            let mut dot = 0.0;
                            for ch in 0..c {
                                dot += g[[ch, y, xx]] * p[[ch, y, xx]];
                            }
                            for ch in 0..c {
                                dx[[ch, y, xx]] = p[[ch, y, xx]] * (g[[ch, y, xx]] - dot);
                            }
                        }
                    }
                    before[x.0].grad += &dx.into_dyn();
                }
                Op::EnsembleAvg { inputs, assign } => {
                    let g = as3(&node.grad);
                    for (c, contributors) in assign.iter().enumerate() {
                        let inv = 1.0 / contributors.len() as f64;
                        let gc = g.index_axis(Axis(0), c);
                        for &(m, ch) in contributors {
                            let parent = inputs[m];
                            let mut pg = before[parent.0]
                                .grad
                                .view_mut()
                                .into_dimensionality::<Ix3>()
                                .unwrap();
                            let mut dst = pg.index_axis_mut(Axis(0), ch);
                            dst.zip_mut_with(&gc, |d, s| *d += s * inv);
                        }
                    }
                }
                Op::GatherCh { x, chans } => {
                    let g = as3(&node.grad);
                    let mut pg = before[x.0]
                        .grad
                        .view_mut()
                        .into_dimensionality::<Ix3>()
                        .unwrap();
                    for (j, &ch) in chans.iter().enumerate() {
                        let src = g.index_axis(Axis(0), j);
                        let mut dst = pg.index_axis_mut(Axis(0), ch);
                        dst.zip_mut_with(&src, |d, s| *d += s);
                    }
                }
                Op::CeMean { logits, labels } => {
                    let upstream = node.grad.sum();
                    if upstream == 0.0 {
                        continue;
                    }
                    let lv = as3(&before[logits.0].value);
                    let (c, h, w) = lv.dim();
                    let count = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
                    if count == 0 {
                        continue;
                    }
                    let probs = softmax3(&lv);
                    let scale = upstream / count as f64;
                    let mut dl = Array3::<f64>::zeros((c, h, w));
                    for y in 0..h {
                        for x in 0..w {
                            let label = labels[[y, x]];
                            if label == IGNORE_LABEL {
                                continue;
                            }
                            for ch in 0..c {
                                let onehot = if ch == label as usize { 1.0 } else { 0.0 };
                                dl[[ch, y, x]] = (probs[[ch, y, x]] - onehot) * scale;
                            }
                        }
                    }
                    before[logits.0].grad += &dl.into_dyn();
                }
                Op::L1Mean { a, b } => {
                    let upstream = node.grad.sum();
                    if upstream == 0.0 {
                        continue;
                    }
                    let av = as3(&before[a.0].value);
                    let bv = as3(&before[b.0].value);
                    let (_, h, w) = av.dim();
                    let scale = upstream / (h * w) as f64;
                    let sign = ndarray::Zip::from(&av)
                        .and(&bv)
                        .map_collect(|&x, &y| (x - y).signum_or_zero() * scale);
                    before[a.0].grad += &sign.clone().into_dyn();
                    before[b.0].grad -= &sign.into_dyn();
                }
                Op::KldMean { student, teacher } => {
                    let upstream = node.grad.sum();
                    if upstream == 0.0 {
                        continue;
                    }
                    let sv = as3(&before[student.0].value);
                    let tv = as3(&before[teacher.0].value);
                    let p = softmax3(&sv);
                    let q = softmax3(&tv);
                    let (c, h, w) = p.dim();
                    let scale = upstream / (h * w) as f64;
                    let mut ds = Array3::<f64>::zeros((c, h, w));
                    for y in 0..h {
                        for x in 0..w {
                            let mut kl = 0.0;
                            for ch in 0..c {
                                let pc = p[[ch, y, x]];
                                if pc > 0.0 {
                                    kl += pc * (pc.ln() - q[[ch, y, x]].max(1e-300).ln());
                                }
                            }
                            for ch in 0..c {
                                let pc = p[[ch, y, x]];
                                let logr = if pc > 0.0 {
                                    pc.ln() - q[[ch, y, x]].max(1e-300).ln()
                                } else {
                                    0.0
                                };
                                ds[[ch, y, x]] = pc * (logr - kl) * scale;
                            }
                        }
                    }
                    before[student.0].grad += &ds.into_dyn();
                }
                Op::NegHalfSquareMean(p) => {
                    let upstream = node.grad.sum();
                    if upstream == 0.0 {
                        continue;
                    }
                    let pv = as3(&before[p.0].value);
                    let (_, h, w) = pv.dim();
                    let scale = upstream / (h * w) as f64;
                    let dp = pv.mapv(|v| -v * scale);
                    before[p.0].grad += &dp.into_dyn();
                }
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

fn upsample_coords(out: usize, factor: usize, size: usize) -> (usize, usize, f64) {
    let src = (out as f64 + 0.5) / factor as f64 - 0.5;
    let src = src.clamp(0.0, (size - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(size - 1);
    (lo, hi, src - lo as f64)
}
