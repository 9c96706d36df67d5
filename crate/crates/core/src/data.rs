//! Deterministic synthetic multi-domain segmentation data: shape scenes with
//! per-domain appearance (palette, hue shift, noise, blur) and exact labels,
//! plus the on-disk dataset format shared with real-data ingestion.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::labels::{LabelSpace, UnionSetProblem};
use crate::{Error, Result, IGNORE_LABEL};

/// Appearance and scene parameters of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    /// Base color per class, index 0 being the background class.
    pub palette: Vec<[f64; 3]>,
    pub noise_amp: f64,
    /// Blend factor toward a channel-rotated color, in [0, 1].
    pub hue_shift: f64,
    pub blur_radius: usize,
    pub brightness: f64,
    /// Relative sampling frequency of each foreground class (classes 1..).
    pub shape_freq: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.palette.len() < 2 {
            return Err(Error::Config("palette needs background + classes".into()));
        }
        if self.shape_freq.len() != self.palette.len() - 1 {
            return Err(Error::Config(format!(
                "shape_freq has {} entries for {} foreground classes",
                self.shape_freq.len(),
                self.palette.len() - 1
            )));
        }
        if self.noise_amp < 0.0 {
            return Err(Error::Config("noise amplitude must be >= 0".into()));
        }
        Ok(())
    }

    /// The default three-domain family: two source domains and a target
    /// domain sharing geometry but differing in appearance.
    pub fn default_set(num_classes: usize, image_size: usize, seed: u64) -> Vec<DomainSpec> {
        let base = base_palette(num_classes);
        let freq = vec![1.0; num_classes - 1];
        let mk = |id: &str, hue: f64, noise: f64, blur: usize, bright: f64, salt: u64| DomainSpec {
            id: id.to_string(),
            palette: base.clone(),
            noise_amp: noise,
            hue_shift: hue,
            blur_radius: blur,
            brightness: bright,
            shape_freq: freq.clone(),
            height: image_size,
            width: image_size,
            seed: seed.wrapping_add(salt),
        };
        vec![
            mk("source_a", 0.0, 0.03, 0, 1.0, 1),
            mk("source_b", 0.15, 0.05, 1, 0.82, 2),
            mk("target", 0.35, 0.08, 1, 1.12, 3),
        ]
    }
}

fn base_palette(num_classes: usize) -> Vec<[f64; 3]> {
    let named: &[[f64; 3]] = &[
        [0.15, 0.15, 0.15], // background
        [0.80, 0.20, 0.20],
        [0.20, 0.80, 0.20],
        [0.20, 0.30, 0.85],
        [0.85, 0.80, 0.20],
        [0.80, 0.20, 0.80],
        [0.20, 0.80, 0.80],
        [0.95, 0.55, 0.15],
    ];
    assert!(num_classes <= named.len(), "palette supports up to 8 classes");
    named[..num_classes].to_vec()
}

/// One rendered scene with dense ground truth in the target label space.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `[3, H, W]` RGB in [0, 1].
    pub image: Array3<f64>,
    /// `[H, W]` target-class indices.
    pub labels: Array2<u32>,
    pub domain: String,
}

/// Which label-space layout a task uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    NonOverlapping,
    PartlyOverlapping,
    FullyOverlapping,
}

impl std::str::FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "non_overlapping" => Ok(Self::NonOverlapping),
            "partly_overlapping" => Ok(Self::PartlyOverlapping),
            "fully_overlapping" => Ok(Self::FullyOverlapping),
            other => Err(Error::Config(format!("unknown setting {other}"))),
        }
    }
}

/// A label-space layout: the target class list plus each source domain's
/// subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPreset {
    pub setting: Setting,
    pub target_classes: Vec<usize>,
    pub source_spaces: Vec<Vec<usize>>,
}

impl TaskPreset {
    pub fn build(setting: Setting, num_classes: usize, k: usize) -> Result<Self> {
        if num_classes < 2 || k < 1 {
            return Err(Error::Config("need >= 2 classes and >= 1 source".into()));
        }
        let target: Vec<usize> = (0..num_classes).collect();
        let source_spaces = match setting {
            Setting::FullyOverlapping => vec![target.clone(); k],
            Setting::NonOverlapping => partition(&target, k),
            Setting::PartlyOverlapping => {
                // Background class shared by every source; foreground
                // classes partitioned.
                let fg: Vec<usize> = (1..num_classes).collect();
                partition(&fg, k)
                    .into_iter()
                    .map(|mut part| {
                        part.insert(0, 0);
                        part
                    })
                    .collect()
            }
        };
        if source_spaces.iter().any(|s| s.is_empty()) {
            return Err(Error::Config(format!(
                "{k} sources cannot cover {num_classes} classes in this setting"
            )));
        }
        Ok(Self {
            setting,
            target_classes: target,
            source_spaces,
        })
    }

    pub fn problem(&self) -> Result<UnionSetProblem> {
        let target = LabelSpace::new(self.target_classes.iter().copied())?;
        let sources = self
            .source_spaces
            .iter()
            .map(|s| LabelSpace::new(s.iter().copied()))
            .collect::<Result<Vec<_>>>()?;
        UnionSetProblem::validated(target, sources)
    }
}

fn partition(classes: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut parts = vec![Vec::new(); k];
    let chunk = classes.len().div_ceil(k);
    for (i, &c) in classes.iter().enumerate() {
        parts[(i / chunk).min(k - 1)].push(c);
    }
    parts
}

fn sample_class<R: Rng>(freq: &[f64], rng: &mut R) -> usize {
    let total: f64 = freq.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (i, &f) in freq.iter().enumerate() {
        if x < f {
            return i + 1;
        }
        x -= f;
    }
    freq.len()
}

fn render_scene(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> LabeledSample {
    let (h, w) = (spec.height, spec.width);
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut image = Array3::<f64>::zeros((3, h, w));
    for ch in 0..3 {
        image
            .index_axis_mut(ndarray::Axis(0), ch)
            .fill(spec.palette[0][ch]);
    }
    let n_shapes = rng.gen_range(2..=6usize);
    for _ in 0..n_shapes {
        let class = sample_class(&spec.shape_freq, rng);
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let r = rng.gen_range(h as f64 / 8.0..h as f64 / 3.5);
        let color = spec.palette[class];
        // Shape geometry is a function of the class so the classes stay
        // distinguishable across domains.
        let kind = (class - 1) % 5;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let inside = match kind {
                    0 => dx * dx + dy * dy <= r * r,
                    1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
                    2 => dy >= -r && dy <= r && dx.abs() <= (r - dy) * 0.5,
                    3 => (dx / (r * 1.2)).powi(2) + (dy / (r * 0.6)).powi(2) <= 1.0,
                    _ => dx.abs() + dy.abs() <= r,
                };
                if inside {
                    labels[[y, x]] = class as u32;
                    for ch in 0..3 {
                        image[[ch, y, x]] = color[ch];
                    }
                }
            }
        }
    }
    // Appearance: hue rotation blend, brightness, per-pixel noise, box blur.
    let jitter = 1.0 + rng.gen_range(-0.05..0.05);
    for y in 0..h {
        for x in 0..w {
            let (r0, g0, b0) = (image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]);
            let a = spec.hue_shift;
            let r1 = (1.0 - a) * r0 + a * g0;
            let g1 = (1.0 - a) * g0 + a * b0;
            let b1 = (1.0 - a) * b0 + a * r0;
            let gain = spec.brightness * jitter;
            image[[0, y, x]] = r1 * gain;
            image[[1, y, x]] = g1 * gain;
            image[[2, y, x]] = b1 * gain;
        }
    }
    if spec.noise_amp > 0.0 {
        for v in image.iter_mut() {
            *v += rng.gen_range(-spec.noise_amp..spec.noise_amp);
        }
    }
    if spec.blur_radius > 0 {
        image = box_blur(&image, spec.blur_radius);
    }
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    LabeledSample {
        image,
        labels,
        domain: spec.id.clone(),
    }
}

fn box_blur(image: &Array3<f64>, radius: usize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    let r = radius as isize;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut n = 0usize;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = y as isize + dy;
                        let xx = x as isize + dx;
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            acc += image[[ch, yy as usize, xx as usize]];
                            n += 1;
                        }
                    }
                }
                out[[ch, y, x]] = acc / n as f64;
            }
        }
    }
    out
}

/// Renders `count` seeded scenes for one domain.
pub fn generate_domain(spec: &DomainSpec, count: usize) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    Ok((0..count)
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(spec.seed ^ (i as u64).wrapping_mul(0x9E3779B97F4A7C15));
            render_scene(spec, &mut rng)
        })
        .collect())
}

/// Remaps ground-truth labels into one source's classifier channel space:
/// classes in the space become their channel index, everything else becomes
/// the "other" channel 0. Ignore pixels stay ignored.
pub fn restrict_to_source_space(samples: &[LabeledSample], space: &LabelSpace) -> Vec<LabeledSample> {
    samples
        .iter()
        .map(|s| {
            let labels = s.labels.mapv(|l| {
                if l == IGNORE_LABEL {
                    IGNORE_LABEL
                } else {
                    space.channel_of(l as usize).unwrap_or(0) as u32
                }
            });
            LabeledSample {
                image: s.image.clone(),
                labels,
                domain: s.domain.clone(),
            }
        })
        .collect()
}

/// One source domain's datasets in its own channel label space.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub space: LabelSpace,
    pub domain: String,
    pub train: Vec<LabeledSample>,
    pub heldout: Vec<LabeledSample>,
}

/// A fully materialized task.
#[derive(Debug, Clone)]
pub struct BuiltTask {
    pub problem: UnionSetProblem,
    pub sources: Vec<SourceData>,
    /// Unlabeled target training images.
    pub target_train: Vec<Array3<f64>>,
    /// Labeled target test split, for evaluation only.
    pub target_test: Vec<LabeledSample>,
}

/// Sample counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train_per_domain: usize,
    pub test_per_domain: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train_per_domain: 200,
            test_per_domain: 50,
        }
    }
}

/// Generates source datasets restricted to their label spaces, an unlabeled
/// target training split, and a labeled target test split. `domain_specs`
/// must hold one spec per source followed by the target domain spec.
pub fn build_task(
    preset: &TaskPreset,
    domain_specs: &[DomainSpec],
    sizes: SplitSizes,
) -> Result<BuiltTask> {
    let k = preset.source_spaces.len();
    if domain_specs.len() != k + 1 {
        return Err(Error::Config(format!(
            "preset has {k} sources; need {} domain specs (sources + target), got {}",
            k + 1,
            domain_specs.len()
        )));
    }
    let problem = preset.problem()?;
    let heldout_count = (sizes.test_per_domain).max(sizes.train_per_domain / 4).max(1);
    let mut sources = Vec::with_capacity(k);
    for (i, spec) in domain_specs[..k].iter().enumerate() {
        if spec.num_classes() != problem.target_space.len() {
            return Err(Error::Config(format!(
                "domain {} palette size {} != {} target classes",
                spec.id,
                spec.num_classes(),
                problem.target_space.len()
            )));
        }
        let all = generate_domain(spec, sizes.train_per_domain + heldout_count)?;
        let space = problem.source_spaces[i].clone();
        let restricted = restrict_to_source_space(&all, &space);
        let (train, heldout) = restricted.split_at(sizes.train_per_domain);
        sources.push(SourceData {
            space,
            domain: spec.id.clone(),
            train: train.to_vec(),
            heldout: heldout.to_vec(),
        });
    }
    let target_spec = &domain_specs[k];
    let all = generate_domain(target_spec, sizes.train_per_domain + sizes.test_per_domain)?;
    let (train, test) = all.split_at(sizes.train_per_domain);
    Ok(BuiltTask {
        problem,
        sources,
        target_train: train.iter().map(|s| s.image.clone()).collect(),
        target_test: test.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

const IMAGE_MAGIC: &[u8; 4] = b"IMGF";
const LABEL_MAGIC: &[u8; 4] = b"LBLG";
const FORMAT_VERSION: u32 = 1;

pub fn write_image(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (c, h, w) = image.dim();
    let mut buf = Vec::with_capacity(16 + c * h * w * 4);
    buf.extend_from_slice(IMAGE_MAGIC);
    for v in [FORMAT_VERSION, c as u32, h as u32, w as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in image.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Array3<f64>> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 20];
    file.read_exact(&mut header)
        .map_err(|_| Error::Parse(format!("truncated image file {}", path.display())))?;
    if &header[0..4] != IMAGE_MAGIC {
        return Err(Error::Parse(format!("bad image magic in {}", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    if word(4) != FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported image version {}", word(4))));
    }
    let (c, h, w) = (word(8) as usize, word(12) as usize, word(16) as usize);
    let mut data = vec![0u8; c * h * w * 4];
    file.read_exact(&mut data)
        .map_err(|_| Error::Parse(format!("truncated image data in {}", path.display())))?;
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Array3::from_shape_vec((c, h, w), values)
        .map_err(|e| Error::Parse(format!("bad image shape: {e}")))
}

pub fn write_labels(path: &Path, labels: &Array2<u32>) -> Result<()> {
    let (h, w) = labels.dim();
    let mut buf = Vec::with_capacity(16 + h * w);
    buf.extend_from_slice(LABEL_MAGIC);
    for v in [FORMAT_VERSION, h as u32, w as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in labels.iter() {
        debug_assert!(v < 255 || v == IGNORE_LABEL);
        buf.push(v as u8);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Array2<u32>> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)
        .map_err(|_| Error::Parse(format!("truncated label file {}", path.display())))?;
    if &header[0..4] != LABEL_MAGIC {
        return Err(Error::Parse(format!("bad label magic in {}", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    if word(4) != FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported label version {}", word(4))));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let mut data = vec![0u8; h * w];
    file.read_exact(&mut data)
        .map_err(|_| Error::Parse(format!("truncated label data in {}", path.display())))?;
    Array2::from_shape_vec((h, w), data.into_iter().map(|b| b as u32).collect())
        .map_err(|e| Error::Parse(format!("bad label shape: {e}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub preset: TaskPreset,
    pub domains: Vec<DomainSpec>,
    pub sizes: SplitSizes,
    pub config_hash: String,
}

/// FNV-1a over the serialized generation config; used for idempotence checks.
pub fn config_hash(preset: &TaskPreset, domains: &[DomainSpec], sizes: SplitSizes) -> String {
    let blob = serde_json::to_string(&(preset, domains, sizes)).expect("serializable config");
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in blob.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

fn split_dir(root: &Path, parts: &[&str]) -> PathBuf {
    let mut p = root.to_path_buf();
    for part in parts {
        p.push(part);
    }
    p
}

fn write_split(
    dir: &Path,
    images: &[Array3<f64>],
    labels: Option<&[Array2<u32>]>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, image) in images.iter().enumerate() {
        write_image(&dir.join(format!("img_{i:04}.imgf")), image)?;
        if let Some(labels) = labels {
            write_labels(&dir.join(format!("lbl_{i:04}.lblg")), &labels[i])?;
        }
    }
    Ok(())
}

fn read_split(dir: &Path, with_labels: bool, domain: &str) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    for i in 0.. {
        let img_path = dir.join(format!("img_{i:04}.imgf"));
        if !img_path.exists() {
            break;
        }
        let image = read_image(&img_path)?;
        let labels = if with_labels {
            read_labels(&dir.join(format!("lbl_{i:04}.lblg")))?
        } else {
            let (_, h, w) = image.dim();
            Array2::from_elem((h, w), IGNORE_LABEL)
        };
        out.push(LabeledSample {
            image,
            labels,
            domain: domain.to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no samples under {}", dir.display())));
    }
    Ok(out)
}

/// Materializes a built task under `root`.
pub fn write_task(
    root: &Path,
    task: &BuiltTask,
    preset: &TaskPreset,
    domains: &[DomainSpec],
    sizes: SplitSizes,
) -> Result<()> {
    fs::create_dir_all(root)?;
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        preset: preset.clone(),
        domains: domains.to_vec(),
        sizes,
        config_hash: config_hash(preset, domains, sizes),
    };
    fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    fs::write(root.join("problem.txt"), task.problem.to_manifest())?;
    for (i, src) in task.sources.iter().enumerate() {
        for (name, split) in [("train", &src.train), ("heldout", &src.heldout)] {
            let images: Vec<_> = split.iter().map(|s| s.image.clone()).collect();
            let labels: Vec<_> = split.iter().map(|s| s.labels.clone()).collect();
            write_split(
                &split_dir(root, &["sources", &i.to_string(), name]),
                &images,
                Some(&labels),
            )?;
        }
    }
    write_split(&split_dir(root, &["target", "train"]), &task.target_train, None)?;
    let test_images: Vec<_> = task.target_test.iter().map(|s| s.image.clone()).collect();
    let test_labels: Vec<_> = task.target_test.iter().map(|s| s.labels.clone()).collect();
    write_split(
        &split_dir(root, &["target", "test"]),
        &test_images,
        Some(&test_labels),
    )?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("bad dataset manifest: {e}")))
}

/// Everything training may see: the problem, labeled source splits, and the
/// unlabeled target train split. Target test labels live only behind
/// [`load_eval_split`].
pub struct TrainingView {
    pub problem: UnionSetProblem,
    pub sources: Vec<SourceData>,
    pub target_train: Vec<Array3<f64>>,
}

pub fn load_training_view(root: &Path) -> Result<TrainingView> {
    let manifest = read_manifest(root)?;
    let problem = UnionSetProblem::from_manifest(&fs::read_to_string(root.join("problem.txt"))?)?;
    let mut sources = Vec::new();
    for (i, space) in problem.source_spaces.iter().enumerate() {
        let domain = manifest.domains[i].id.clone();
        sources.push(SourceData {
            space: space.clone(),
            domain: domain.clone(),
            train: read_split(&split_dir(root, &["sources", &i.to_string(), "train"]), true, &domain)?,
            heldout: read_split(
                &split_dir(root, &["sources", &i.to_string(), "heldout"]),
                true,
                &domain,
            )?,
        });
    }
    let target_train = read_split(&split_dir(root, &["target", "train"]), false, "target")?
        .into_iter()
        .map(|s| s.image)
        .collect();
    Ok(TrainingView {
        problem,
        sources,
        target_train,
    })
}

/// Evaluation-only accessor for the labeled target test split.
pub fn load_eval_split(root: &Path) -> Result<Vec<LabeledSample>> {
    read_split(&split_dir(root, &["target", "test"]), true, "target")
}
