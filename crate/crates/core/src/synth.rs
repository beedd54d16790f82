//! Synthetic "scans": stacks of 2-D slices through a soft elliptical
//! structure whose size follows a unimodal profile along the slice axis,
//! with free meta-labels (slice partition, patient, phase).
//!
//! Label noise comes from two sources controlled by `noise_level`:
//! per-volume integer slice shifts applied when computing the partition
//! label (so same-partition slices of two volumes may cover different
//! anatomy) and background-only slices at the ends of each volume.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const VOLUME_MAGIC: &[u8; 4] = b"SPCV";

/// Maximum in-plane offset (pixels) of a patient's structure center from
/// the image center.
pub const CENTER_JITTER: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_patients: usize,
    pub val_patients: usize,
    pub test_patients: usize,
    /// How many training patients come with segmentation masks.
    pub labeled_patients: usize,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    /// Number of slice-position partitions `Q`.
    pub partitions: usize,
    /// Foreground classes + background: 2 (structure) or 3 (wall + core).
    pub num_classes: usize,
    pub noise_level: f64,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_patients: 10,
            val_patients: 2,
            test_patients: 10,
            labeled_patients: 2,
            slices: 12,
            height: 16,
            width: 16,
            partitions: 4,
            num_classes: 3,
            noise_level: 0.0,
            pixel_noise: 0.1,
        }
    }
}

impl DataConfig {
    pub fn num_patients(&self) -> usize {
        self.train_patients + self.val_patients + self.test_patients
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_patients() < 2 || self.train_patients < 2 {
            return bad("need at least 2 patients and 2 training patients".into());
        }
        if self.slices < 4 {
            return bad(format!("need at least 4 slices per volume, got {}", self.slices));
        }
        if self.partitions == 0 || self.partitions > self.slices {
            return bad(format!("partitions must be in 1..={}", self.slices));
        }
        if self.labeled_patients == 0 || self.labeled_patients > self.train_patients {
            return bad("labeled_patients must be in 1..=train_patients".into());
        }
        if self.height < 8 || self.width < 8 || self.height % 4 != 0 || self.width % 4 != 0 {
            return bad("image extents must be multiples of 4, at least 8".into());
        }
        if !(2..=3).contains(&self.num_classes) {
            return bad("num_classes must be 2 or 3".into());
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad("noise_level must lie in [0, 1]".into());
        }
        if !(self.pixel_noise >= 0.0) {
            return bad("pixel_noise must be non-negative".into());
        }
        Ok(())
    }

    pub fn meta_spec(&self) -> MetaLabelSpec {
        MetaLabelSpec {
            partitions: self.partitions,
            num_patients: self.num_patients(),
        }
    }
}

/// Class counts of the three meta-label kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaLabelSpec {
    pub partitions: usize,
    pub num_patients: usize,
}

impl MetaLabelSpec {
    pub const KINDS: usize = 3;

    pub fn class_counts(&self) -> [usize; 3] {
        [self.partitions, self.num_patients, 2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaLabels {
    pub partition: usize,
    pub patient: usize,
    pub phase: usize,
}

impl MetaLabels {
    pub fn as_array(&self) -> [usize; 3] {
        [self.partition, self.patient, self.phase]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthVolume {
    pub patient_id: usize,
    pub phase: u8,
    /// `[H, W]` images with values in `[0, 1]`.
    pub slices: Vec<Tensor>,
    /// Per-slice class maps, `H·W` row-major.
    pub masks: Vec<Vec<u8>>,
    pub misalignment_offset: i32,
    /// In-plane structure centroid per slice, `None` for background-only
    /// slices.
    pub centroids: Vec<Option<(f64, f64)>>,
}

impl SynthVolume {
    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }
}

/// Partition, patient, and phase labels for one slice. The partition uses
/// the misaligned index `slice + offset`, clamped to the volume.
pub fn meta_labels_for(volume: &SynthVolume, slice_index: usize, spec: &MetaLabelSpec) -> MetaLabels {
    let s = volume.num_slices();
    assert!(slice_index < s);
    MetaLabels {
        partition: partition_of(slice_index, volume.misalignment_offset, s, spec.partitions),
        patient: volume.patient_id,
        phase: volume.phase as usize,
    }
}

/// `floor(Q · clamp(slice + offset) / S)`.
pub fn partition_of(slice_index: usize, offset: i32, slices: usize, partitions: usize) -> usize {
    let shifted = (slice_index as i64 + offset as i64).clamp(0, slices as i64 - 1) as usize;
    partitions * shifted / slices
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Subset of `train` with masks available.
    pub labeled: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub seed: u64,
    /// Indexed by patient id.
    pub volumes: Vec<SynthVolume>,
    pub splits: Splits,
}

/// Per-patient anatomy drawn once per volume.
struct Anatomy {
    center: (f64, f64),
    drift: (f64, f64),
    radius: f64,
    aspect: f64,
    angle: f64,
    wall: f64,
    /// Slices at each end with the structure removed.
    empty_ends: (usize, usize),
    peak: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Structure radius scale at true slice `s`: rises from the base, peaks,
/// then tapers to the apex.
fn radius_profile(s: usize, slices: usize, peak: f64) -> f64 {
    let t = (s as f64 + 0.5) / slices as f64;
    // unimodal bump with its maximum at `peak`
    let left = (t / peak).min(1.0);
    let right = ((1.0 - t) / (1.0 - peak)).min(1.0);
    (left.min(right) * std::f64::consts::FRAC_PI_2).sin().powf(0.8)
}

/// Low-frequency background texture: a few random planar waves.
fn background_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.06),
            )
        })
        .collect();
    let mut field = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            field[y * w + x] = waves
                .iter()
                .map(|(ky, kx, ph, a)| a * (ky * y as f64 + kx * x as f64 + ph).sin())
                .sum();
        }
    }
    field
}

fn generate_volume(cfg: &DataConfig, patient: usize, seed: u64) -> SynthVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(patient as u64 + 1);
    let (h, w, s) = (cfg.height, cfg.width, cfg.slices);
    let phase: u8 = rng.gen_range(0..2);
    let size = h.min(w) as f64;
    let anatomy = Anatomy {
        center: (
            (h as f64 - 1.0) / 2.0 + rng.gen_range(-CENTER_JITTER..CENTER_JITTER),
            (w as f64 - 1.0) / 2.0 + rng.gen_range(-CENTER_JITTER..CENTER_JITTER),
        ),
        drift: (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)),
        radius: size * rng.gen_range(0.26..0.34) * if phase == 1 { 0.8 } else { 1.0 },
        aspect: rng.gen_range(0.8..1.2),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        wall: rng.gen_range(0.3..0.45),
        empty_ends: {
            let max_empty = (cfg.noise_level * s as f64 / 4.0).round() as usize;
            (rng.gen_range(0..=max_empty), rng.gen_range(0..=max_empty))
        },
        peak: rng.gen_range(0.35..0.55),
    };
    let spread = cfg.noise_level * s as f64 / 4.0;
    let misalignment_offset = if spread > 0.0 {
        let n = Normal::new(0.0, spread).expect("positive spread");
        (n.sample(&mut rng).round() as i32).clamp(-(s as i32) / 2, s as i32 / 2)
    } else {
        0
    };
    let noise = Normal::new(0.0, cfg.pixel_noise.max(1e-12)).expect("valid noise");
    let background = background_field(&mut rng, h, w);
    let (bg_level, wall_level, core_level) = (0.4, 0.2, 0.85);

    let mut slices = Vec::with_capacity(s);
    let mut masks = Vec::with_capacity(s);
    let mut centroids = Vec::with_capacity(s);
    let (cos, sin) = (anatomy.angle.cos(), anatomy.angle.sin());
    for k in 0..s {
        let empty = k < anatomy.empty_ends.0 || k >= s - anatomy.empty_ends.1;
        let r = if empty { 0.0 } else { anatomy.radius * radius_profile(k, s, anatomy.peak) };
        let cy = anatomy.center.0 + anatomy.drift.0 * k as f64;
        let cx = anatomy.center.1 + anatomy.drift.1 * k as f64;
        let mut img = vec![0.0; h * w];
        let mut mask = vec![0u8; h * w];
        let (mut sy, mut sx, mut count) = (0.0, 0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let u = (cos * dx + sin * dy) / anatomy.aspect;
                let v = (-sin * dx + cos * dy) * anatomy.aspect;
                let dist = (u * u + v * v).sqrt();
                let inner = r * (1.0 - anatomy.wall);
                let (outer_soft, inner_soft) = if r > 0.0 {
                    (sigmoid((r - dist) / 0.35), sigmoid((inner - dist) / 0.35))
                } else {
                    (0.0, 0.0)
                };
                let base = bg_level + background[y * w + x];
                let val = base * (1.0 - outer_soft)
                    + outer_soft * (wall_level * (1.0 - inner_soft) + core_level * inner_soft)
                    + noise.sample(&mut rng) * (cfg.pixel_noise > 0.0) as u8 as f64;
                img[y * w + x] = val.clamp(0.0, 1.0);
                let class = if r > 0.0 && dist < inner {
                    if cfg.num_classes == 3 { 2 } else { 1 }
                } else if r > 0.0 && dist < r {
                    1
                } else {
                    0
                };
                mask[y * w + x] = class;
                if class > 0 {
                    sy += y as f64;
                    sx += x as f64;
                    count += 1;
                }
            }
        }
        slices.push(Tensor::from_raw(vec![h, w], img));
        masks.push(mask);
        centroids.push((count > 0).then(|| (sy / count as f64, sx / count as f64)));
    }
    SynthVolume {
        patient_id: patient,
        phase,
        slices,
        masks,
        misalignment_offset,
        centroids,
    }
}

/// Deterministic dataset for `seed`. Patients `0..train` form the training
/// split (the first `labeled_patients` of them carry masks), followed by
/// validation and test patients.
pub fn generate_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let volumes = (0..cfg.num_patients())
        .map(|p| generate_volume(cfg, p, seed))
        .collect();
    let t = cfg.train_patients;
    let v = t + cfg.val_patients;
    let splits = Splits {
        train: (0..t).collect(),
        val: (t..v).collect(),
        test: (v..cfg.num_patients()).collect(),
        labeled: (0..cfg.labeled_patients).collect(),
    };
    Ok(Dataset {
        config: cfg.clone(),
        seed,
        volumes,
        splits,
    })
}

/// A slice reference `(patient, slice)`.
pub type SliceRef = (usize, usize);

impl Dataset {
    pub fn meta_spec(&self) -> MetaLabelSpec {
        self.config.meta_spec()
    }

    pub fn slice_refs(&self, patients: &[usize]) -> Vec<SliceRef> {
        patients
            .iter()
            .flat_map(|&p| (0..self.volumes[p].num_slices()).map(move |s| (p, s)))
            .collect()
    }

    pub fn image(&self, r: SliceRef) -> &Tensor {
        &self.volumes[r.0].slices[r.1]
    }

    pub fn mask(&self, r: SliceRef) -> &[u8] {
        &self.volumes[r.0].masks[r.1]
    }

    pub fn meta_labels(&self, r: SliceRef) -> MetaLabels {
        meta_labels_for(&self.volumes[r.0], r.1, &self.meta_spec())
    }

    /// Same dataset with every training patient labeled.
    pub fn fully_labeled(&self) -> Dataset {
        let mut d = self.clone();
        d.splits.labeled = d.splits.train.clone();
        d
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format_version: DATASET_FORMAT_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            meta_spec: self.meta_spec(),
            splits: self.splits.clone(),
            volumes: self
                .volumes
                .iter()
                .map(|v| VolumeEntry {
                    patient_id: v.patient_id,
                    phase: v.phase,
                    misalignment_offset: v.misalignment_offset,
                    centroids: v.centroids.clone(),
                    file: volume_file_name(v.patient_id),
                })
                .collect(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        for v in &self.volumes {
            let path = dir.join(volume_file_name(v.patient_id));
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(&encode_volume(v)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Data(e.to_string()))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported dataset format version {}",
                manifest.format_version
            )));
        }
        manifest.config.validate()?;
        let mut volumes = Vec::with_capacity(manifest.volumes.len());
        for entry in &manifest.volumes {
            let path = dir.join(&entry.file);
            let mut bytes = Vec::new();
            fs::File::open(&path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| Error::io(&path, e))?;
            let (slices, masks) = decode_volume(&bytes)?;
            volumes.push(SynthVolume {
                patient_id: entry.patient_id,
                phase: entry.phase,
                slices,
                masks,
                misalignment_offset: entry.misalignment_offset,
                centroids: entry.centroids.clone(),
            });
        }
        Ok(Dataset {
            config: manifest.config,
            seed: manifest.seed,
            volumes,
            splits: manifest.splits,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    seed: u64,
    config: DataConfig,
    meta_spec: MetaLabelSpec,
    splits: Splits,
    volumes: Vec<VolumeEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeEntry {
    patient_id: usize,
    phase: u8,
    misalignment_offset: i32,
    centroids: Vec<Option<(f64, f64)>>,
    file: String,
}

fn volume_file_name(patient: usize) -> String {
    format!("volume_{patient:04}.bin")
}

/// `SPCV | version u32 | S, H, W u32 | S·H·W f64 images | S·H·W u8 masks`,
/// all little-endian.
fn encode_volume(v: &SynthVolume) -> Vec<u8> {
    let (h, w) = (v.slices[0].shape()[0], v.slices[0].shape()[1]);
    let mut out = Vec::with_capacity(20 + v.num_slices() * h * w * 9);
    out.extend_from_slice(VOLUME_MAGIC);
    for x in [DATASET_FORMAT_VERSION, v.num_slices() as u32, h as u32, w as u32] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for s in &v.slices {
        for x in s.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for m in &v.masks {
        out.extend_from_slice(m);
    }
    out
}

fn decode_volume(bytes: &[u8]) -> Result<(Vec<Tensor>, Vec<Vec<u8>>)> {
    let bad = |m: &str| Error::Data(format!("corrupt volume file: {m}"));
    if bytes.len() < 20 || &bytes[..4] != VOLUME_MAGIC {
        return Err(bad("bad header"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    if word(0) as u32 != DATASET_FORMAT_VERSION {
        return Err(bad("unsupported version"));
    }
    let (s, h, w) = (word(1), word(2), word(3));
    let px = h * w;
    if bytes.len() != 20 + s * px * 9 {
        return Err(bad("length does not match header"));
    }
    let mut offset = 20;
    let mut slices = Vec::with_capacity(s);
    for _ in 0..s {
        let data = bytes[offset..offset + px * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        slices.push(Tensor::new(vec![h, w], data)?);
        offset += px * 8;
    }
    let masks = (0..s).map(|k| bytes[offset + k * px..offset + (k + 1) * px].to_vec()).collect();
    Ok((slices, masks))
}

/// Ranges of the random transforms used to create positive views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Probability of a horizontal mirror.
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    /// Smallest crop side as a fraction of the image; 1 disables cropping.
    pub min_crop_scale: f64,
    /// Gamma drawn log-uniformly from `[1/g, g]`.
    pub gamma_jitter: f64,
    pub brightness: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_rotation_deg: 15.0,
            min_crop_scale: 0.8,
            gamma_jitter: 1.3,
            brightness: 0.1,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            min_crop_scale: 1.0,
            gamma_jitter: 1.0,
            brightness: 0.0,
        }
    }

    pub fn flip_only() -> Self {
        Self {
            flip_prob: 0.5,
            ..Self::identity()
        }
    }

    fn draw(&self, rng: &mut impl Rng, h: usize, w: usize) -> Transform {
        let flip = self.flip_prob > 0.0 && rng.gen_bool(self.flip_prob.min(1.0));
        let angle = if self.max_rotation_deg > 0.0 {
            rng.gen_range(-self.max_rotation_deg..=self.max_rotation_deg).to_radians()
        } else {
            0.0
        };
        let (scale, shift) = if self.min_crop_scale < 1.0 {
            let s = rng.gen_range(self.min_crop_scale..=1.0);
            let slack_y = (1.0 - s) * h as f64 / 2.0;
            let slack_x = (1.0 - s) * w as f64 / 2.0;
            (
                s,
                (rng.gen_range(-slack_y..=slack_y), rng.gen_range(-slack_x..=slack_x)),
            )
        } else {
            (1.0, (0.0, 0.0))
        };
        let gamma = if self.gamma_jitter > 1.0 {
            let l = self.gamma_jitter.ln();
            rng.gen_range(-l..=l).exp()
        } else {
            1.0
        };
        let brightness = if self.brightness > 0.0 {
            rng.gen_range(-self.brightness..=self.brightness)
        } else {
            0.0
        };
        Transform {
            flip,
            angle,
            scale,
            shift,
            gamma,
            brightness,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Transform {
    flip: bool,
    angle: f64,
    scale: f64,
    shift: (f64, f64),
    gamma: f64,
    brightness: f64,
}

impl Transform {
    fn is_geometric_identity(&self) -> bool {
        !self.flip && self.angle == 0.0 && self.scale == 1.0 && self.shift == (0.0, 0.0)
    }

    /// Source coordinates for output pixel `(y, x)`.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let x = if self.flip { w - 1 - x } else { x };
        let (dy, dx) = ((y as f64 - cy) * self.scale, (x as f64 - cx) * self.scale);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        (
            cy + self.shift.0 + s * dx + c * dy,
            cx + self.shift.1 + c * dx - s * dy,
        )
    }

    fn apply_image(&self, img: &Tensor) -> Tensor {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let src = img.data();
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let v = if self.is_geometric_identity() {
                    src[y * w + x]
                } else {
                    let (sy, sx) = self.source(y, x, h, w);
                    bilinear(src, h, w, sy, sx)
                };
                let v = if self.gamma != 1.0 { v.max(0.0).powf(self.gamma) } else { v };
                out.push((v + self.brightness).clamp(0.0, 1.0));
            }
        }
        Tensor::from_raw(vec![h, w], out)
    }

    fn apply_mask(&self, mask: &[u8], h: usize, w: usize) -> Vec<u8> {
        if self.is_geometric_identity() {
            return mask.to_vec();
        }
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(y, x, h, w);
                let yy = sy.round().clamp(0.0, h as f64 - 1.0) as usize;
                let xx = sx.round().clamp(0.0, w as f64 - 1.0) as usize;
                out.push(mask[yy * w + xx]);
            }
        }
        out
    }
}

/// Clamp-to-edge bilinear sample.
fn bilinear(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, h as f64 - 1.0);
    let x = x.clamp(0.0, w as f64 - 1.0);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// One random view of an image.
pub fn augment(image: &Tensor, policy: &AugmentationPolicy, rng: &mut impl Rng) -> Tensor {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    policy.draw(rng, h, w).apply_image(image)
}

/// One random view of an image and its mask under the same geometry.
pub fn augment_with_mask(
    image: &Tensor,
    mask: &[u8],
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> (Tensor, Vec<u8>) {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let t = policy.draw(rng, h, w);
    (t.apply_image(image), t.apply_mask(mask, h, w))
}

/// Two independent views of `image` drawn from a generator seeded with
/// `seed`.
pub fn augment_pair(image: &Tensor, policy: &AugmentationPolicy, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = augment(image, policy, &mut rng);
    let b = augment(image, policy, &mut rng);
    (a, b)
}

/// Foreground Dice between two class maps (any non-zero class counts).
pub fn foreground_overlap(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x > 0, y > 0);
        inter += (x && y) as usize;
        sa += x as usize;
        sb += y as usize;
    }
    if sa + sb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sa + sb) as f64
    }
}

/// Fraction of cross-volume slice pairs sharing a partition label whose
/// foreground overlap falls below `threshold`.
pub fn misaligned_pair_fraction(data: &Dataset, patients: &[usize], threshold: f64) -> f64 {
    let refs = data.slice_refs(patients);
    let (mut bad, mut total) = (0usize, 0usize);
    for (a, &ra) in refs.iter().enumerate() {
        for &rb in &refs[a + 1..] {
            if ra.0 == rb.0 || data.meta_labels(ra).partition != data.meta_labels(rb).partition {
                continue;
            }
            total += 1;
            if foreground_overlap(data.mask(ra), data.mask(rb)) < threshold {
                bad += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        bad as f64 / total as f64
    }
}
