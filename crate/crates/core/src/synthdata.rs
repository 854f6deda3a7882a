//! Deterministic synthetic tasks: textured normal images, rectangle defects,
//! pixel masks and per-patch segment labels.
//!
//! Each task draws its own pair of sinusoidal gratings (frequency and
//! orientation) from a generator seeded by `(seed, task_id)`; every image
//! then draws random phases, so normal images of one task share a texture
//! family while tasks differ. Segment classes come from quantizing the phase
//! of the first grating.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{patchify, Image};
use crate::error::{Error, Result};
use crate::losses::PatchLabels;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub tasks: u32,
    pub train_samples: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub noise_sigma: f64,
    pub segment_classes: u32,
    /// Anomaly rectangle sides, as fractions of the image side.
    pub min_defect_fraction: f64,
    pub max_defect_fraction: f64,
    pub defect_shift: f64,
    /// Amplitude of each of the two gratings around mid-gray.
    pub texture_amplitude: f64,
    /// Grating frequency range, in cycles per image side.
    pub min_frequency: f64,
    pub max_frequency: f64,
    /// Per-sample grating phase spread around the task's base phase, as a
    /// fraction of a full cycle (1 = uniformly random phase).
    pub phase_jitter: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tasks: 3,
            train_samples: 24,
            test_normal: 16,
            test_anomalous: 16,
            noise_sigma: 0.05,
            segment_classes: 3,
            min_defect_fraction: 0.1,
            max_defect_fraction: 0.4,
            defect_shift: 0.5,
            texture_amplitude: 0.2,
            min_frequency: 4.0,
            max_frequency: 8.0,
            phase_jitter: 0.1,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.train_samples == 0 {
            return Err(Error::config(
                "data: tasks and train_samples must be positive",
            ));
        }
        if self.test_normal == 0 || self.test_anomalous == 0 {
            return Err(Error::config(
                "data: test sets need both normal and anomalous samples",
            ));
        }
        if self.segment_classes == 0 {
            return Err(Error::config("data: segment_classes must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(
                "data: noise_sigma must be a finite non-negative number",
            ));
        }
        if !(0.0 < self.min_defect_fraction
            && self.min_defect_fraction <= self.max_defect_fraction
            && self.max_defect_fraction <= 1.0)
        {
            return Err(Error::config(
                "data: defect fractions must satisfy 0 < min <= max <= 1",
            ));
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude <= 0.25) {
            return Err(Error::config(
                "data: texture_amplitude must lie in [0, 0.25]",
            ));
        }
        if !(0.0 < self.min_frequency
            && self.min_frequency < self.max_frequency
            && self.max_frequency.is_finite())
        {
            return Err(Error::config(
                "data: frequencies must satisfy 0 < min < max",
            ));
        }
        if !(0.0..=1.0).contains(&self.phase_jitter) {
            return Err(Error::config("data: phase_jitter must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Image geometry the generator must match.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub image_size: usize,
    pub patch_size: usize,
}

impl Geometry {
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub task: u32,
    pub split: Split,
    pub index: u32,
}

impl SampleId {
    /// Packs the id into one integer: task in the high 32 bits, split in bit 31.
    pub fn key(&self) -> u64 {
        let split = match self.split {
            Split::Train => 0,
            Split::Test => 1u64 << 31,
        };
        (u64::from(self.task) << 32) | split | u64::from(self.index & 0x7fff_ffff)
    }

    pub fn from_key(key: u64) -> Self {
        let split = if key & (1 << 31) == 0 {
            Split::Train
        } else {
            Split::Test
        };
        Self {
            task: (key >> 32) as u32,
            split,
            index: (key & 0x7fff_ffff) as u32,
        }
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let split = match self.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        write!(f, "t{}-{split}-{:04}", self.task, self.index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub id: SampleId,
    pub image: Image,
    pub is_anomalous: bool,
    /// Row-major binary mask, same size as the image.
    pub mask: Vec<u8>,
    pub segment_labels: PatchLabels,
}

impl TaskSample {
    /// Per-patch ground truth: a patch is anomalous when at least half of its
    /// pixels are masked.
    pub fn patch_labels(&self, patch: usize) -> Result<Vec<bool>> {
        let side = self.image.side();
        let mask: Vec<f64> = self.mask.iter().map(|&m| f64::from(m)).collect();
        let p = patchify(&mask, side, side, patch)?;
        Ok(p.row_iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64 >= 0.5)
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: u32,
    pub seed: u64,
    pub geometry: Geometry,
    pub train: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
}

/// Texture parameters of one task.
#[derive(Clone, Copy, Debug)]
struct Texture {
    freq: [f64; 2],
    angle: [f64; 2],
    amplitude: f64,
    phase: [f64; 2],
    jitter: f64,
}

fn task_rng(seed: u64, task_id: u32) -> ChaCha8Rng {
    // Distinct stream per task; golden-ratio stride keeps nearby seeds apart.
    ChaCha8Rng::seed_from_u64(seed ^ u64::from(task_id).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn draw_texture(rng: &mut ChaCha8Rng, cfg: &DataConfig) -> Texture {
    let f = cfg.min_frequency..cfg.max_frequency;
    Texture {
        freq: [rng.random_range(f.clone()), rng.random_range(f)],
        angle: [rng.random_range(0.0..PI), rng.random_range(0.0..PI)],
        amplitude: cfg.texture_amplitude,
        phase: [
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
        ],
        jitter: cfg.phase_jitter * PI,
    }
}

struct Render {
    pixels: Vec<f64>,
    /// Phase of the first grating at each pixel, in radians.
    phase: Vec<f64>,
}

fn render(tex: &Texture, side: usize, phases: [f64; 2], noise: &[f64]) -> Render {
    let mut pixels = Vec::with_capacity(side * side);
    let mut phase = Vec::with_capacity(side * side);
    let s = side as f64;
    for y in 0..side {
        for x in 0..side {
            let mut value = 0.5;
            for (g, &offset) in phases.iter().enumerate() {
                let (sin_a, cos_a) = tex.angle[g].sin_cos();
                let arg =
                    2.0 * PI * tex.freq[g] * (x as f64 * cos_a + y as f64 * sin_a) / s + offset;
                if g == 0 {
                    phase.push(arg);
                }
                value += tex.amplitude * arg.sin();
            }
            pixels.push(value + noise[y * side + x]);
        }
    }
    Render { pixels, phase }
}

/// Majority segment class per patch; ties go to the lowest class id.
fn segment_labels(phase: &[f64], side: usize, patch: usize, classes: u32, offset: f64) -> Vec<u32> {
    let cls: Vec<f64> = phase
        .iter()
        .map(|&p| {
            let t = ((p + offset) / (2.0 * PI)).rem_euclid(1.0);
            ((t * f64::from(classes)).floor() as u32).min(classes - 1) as f64
        })
        .collect();
    let grid = patchify(&cls, side, side, patch).expect("geometry validated by caller");
    grid.row_iter()
        .map(|r| {
            let mut counts = vec![0usize; classes as usize];
            for &c in r {
                counts[c as usize] += 1;
            }
            let mut best = 0;
            for (c, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

fn make_sample(
    rng: &mut ChaCha8Rng,
    tex: &Texture,
    geometry: Geometry,
    cfg: &DataConfig,
    id: SampleId,
    anomalous: bool,
) -> Result<TaskSample> {
    let side = geometry.image_size;
    let noise_dist =
        Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::config(format!("data: {e}")))?;
    // Some phase/offset draws quantize to fewer than K patch classes; redraw.
    let mut attempt = 0;
    let (mut pixels, labels) = loop {
        let mut phases = tex.phase;
        if tex.jitter > 0.0 {
            for p in &mut phases {
                *p += rng.random_range(-tex.jitter..tex.jitter);
            }
        }
        let noise: Vec<f64> = (0..side * side).map(|_| noise_dist.sample(rng)).collect();
        let r = render(tex, side, phases, &noise);
        let mut found = None;
        for _ in 0..16 {
            let offset = rng.random_range(0.0..2.0 * PI);
            let labels = segment_labels(
                &r.phase,
                side,
                geometry.patch_size,
                cfg.segment_classes,
                offset,
            );
            let covered = (0..cfg.segment_classes).all(|c| labels.contains(&c));
            if covered {
                found = Some(labels);
                break;
            }
        }
        attempt += 1;
        match found {
            Some(labels) => break (r.pixels, labels),
            None if attempt >= 256 => {
                return Err(Error::config(format!(
                    "data: cannot cover {} segment classes with {}-pixel patches",
                    cfg.segment_classes, geometry.patch_size
                )))
            }
            None => continue,
        }
    };

    let mut mask = vec![0u8; side * side];
    if anomalous {
        let lo = ((cfg.min_defect_fraction * side as f64).ceil() as usize).max(1);
        let hi = ((cfg.max_defect_fraction * side as f64).floor() as usize).clamp(lo, side);
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        let x0 = rng.random_range(0..=side - w);
        let y0 = rng.random_range(0..=side - h);
        let shift = if rng.random_bool(0.5) {
            cfg.defect_shift
        } else {
            -cfg.defect_shift
        };
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                pixels[y * side + x] += shift;
                mask[y * side + x] = 1;
            }
        }
    }
    for p in &mut pixels {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(TaskSample {
        id,
        image: Image::new(side, pixels)?,
        is_anomalous: anomalous,
        mask,
        segment_labels: PatchLabels(labels),
    })
}

pub fn generate_task(task_id: u32, geometry: Geometry, cfg: &DataConfig) -> Result<TaskDataset> {
    cfg.validate()?;
    if task_id == 0 {
        return Err(Error::config("data: task ids start at 1"));
    }
    if geometry.patch_size == 0 || !geometry.image_size.is_multiple_of(geometry.patch_size) {
        return Err(Error::config("data: patch size must divide the image size"));
    }
    let mut rng = task_rng(cfg.seed, task_id);
    let tex = draw_texture(&mut rng, cfg);
    let id = |split, index: usize| SampleId {
        task: task_id,
        split,
        index: index as u32,
    };
    let train = (0..cfg.train_samples)
        .map(|i| make_sample(&mut rng, &tex, geometry, cfg, id(Split::Train, i), false))
        .collect::<Result<Vec<_>>>()?;
    let n_test = cfg.test_normal + cfg.test_anomalous;
    let test = (0..n_test)
        .map(|i| {
            let anomalous = i >= cfg.test_normal;
            make_sample(&mut rng, &tex, geometry, cfg, id(Split::Test, i), anomalous)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskDataset {
        task_id,
        seed: cfg.seed,
        geometry,
        train,
        test,
    })
}

pub fn generate_all(geometry: Geometry, cfg: &DataConfig) -> Result<Vec<TaskDataset>> {
    (1..=cfg.tasks)
        .map(|t| generate_task(t, geometry, cfg))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub split: Split,
    pub index: u32,
    pub anomalous: bool,
    /// Relative path of the raw little-endian `f32` image.
    pub image: String,
    /// Relative path of the raw `u8` mask.
    pub mask: String,
    pub segment_labels: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub task_id: u32,
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub tasks: Vec<String>,
}

pub const INDEX_FILE: &str = "datasets.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_image_f32(path: &Path, pixels: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = pixels
        .iter()
        .flat_map(|&p| (p as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_image_f32(path: &Path, side: usize) -> Result<Image> {
    let bytes = fs::read(path)?;
    if bytes.len() != side * side * 4 {
        return Err(Error::parse(
            bytes.len() as u64,
            format!(
                "{}: expected {} bytes for a {side}x{side} f32 image",
                path.display(),
                side * side * 4
            ),
        ));
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Image::new(side, pixels)
}

/// Writes each task to `dir/task<t>/` (flat binaries plus a manifest) and a
/// top-level index.
pub fn export_datasets(dir: &Path, datasets: &[TaskDataset]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = DatasetIndex { tasks: Vec::new() };
    for ds in datasets {
        let name = format!("task{}", ds.task_id);
        let tdir = dir.join(&name);
        fs::create_dir_all(tdir.join("images"))?;
        fs::create_dir_all(tdir.join("masks"))?;
        let mut samples = Vec::new();
        for s in ds.train.iter().chain(&ds.test) {
            let image = format!("images/{}.f32", s.id);
            let mask = format!("masks/{}.u8", s.id);
            write_image_f32(&tdir.join(&image), s.image.pixels())?;
            fs::write(tdir.join(&mask), &s.mask)?;
            samples.push(SampleEntry {
                id: s.id.to_string(),
                split: s.id.split,
                index: s.id.index,
                anomalous: s.is_anomalous,
                image,
                mask,
                segment_labels: s.segment_labels.0.clone(),
            });
        }
        let manifest = TaskManifest {
            task_id: ds.task_id,
            seed: ds.seed,
            image_size: ds.geometry.image_size,
            patch_size: ds.geometry.patch_size,
            samples,
        };
        fs::write(
            tdir.join(MANIFEST_FILE),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        index.tasks.push(name);
    }
    fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn import_task(task_dir: &Path) -> Result<TaskDataset> {
    let manifest: TaskManifest = serde_json::from_slice(&fs::read(task_dir.join(MANIFEST_FILE))?)?;
    let geometry = Geometry {
        image_size: manifest.image_size,
        patch_size: manifest.patch_size,
    };
    if geometry.patch_size == 0 || !geometry.image_size.is_multiple_of(geometry.patch_size) {
        return Err(Error::config(format!(
            "{}: patch size does not tile the image",
            task_dir.display()
        )));
    }
    let side = geometry.image_size;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in manifest.samples {
        let image = read_image_f32(&task_dir.join(&e.image), side)?;
        let mask = fs::read(task_dir.join(&e.mask))?;
        if mask.len() != side * side || mask.iter().any(|&m| m > 1) {
            return Err(Error::parse(0, format!("{}: malformed mask", e.mask)));
        }
        if e.segment_labels.len() != geometry.num_patches() {
            return Err(Error::parse(
                0,
                format!("{}: wrong number of segment labels", e.id),
            ));
        }
        let has_defect = mask.contains(&1);
        if has_defect != e.anomalous {
            return Err(Error::parse(
                0,
                format!("{}: mask disagrees with label", e.id),
            ));
        }
        let sample = TaskSample {
            id: SampleId {
                task: manifest.task_id,
                split: e.split,
                index: e.index,
            },
            image,
            is_anomalous: e.anomalous,
            mask,
            segment_labels: PatchLabels(e.segment_labels),
        };
        match e.split {
            Split::Train if sample.is_anomalous => {
                return Err(Error::parse(
                    0,
                    format!("{}: anomalous training sample", e.id),
                ))
            }
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    Ok(TaskDataset {
        task_id: manifest.task_id,
        seed: manifest.seed,
        geometry,
        train,
        test,
    })
}

pub fn import_datasets(dir: &Path) -> Result<Vec<TaskDataset>> {
    let index: DatasetIndex = serde_json::from_slice(&fs::read(dir.join(INDEX_FILE))?)?;
    index
        .tasks
        .iter()
        .map(|t| import_task(&dir.join(t)))
        .collect()
}
