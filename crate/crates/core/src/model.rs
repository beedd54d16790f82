//! A miniature U-Net-shaped model: convolutional encoder `E`, projection
//! head `g`, and a decoder `D` with skip connections.
//!
//! Feature maps are channels-last matrices `[B·H·W, C]`. A 3×3 convolution
//! is an im2col gather followed by a matmul, so every layer runs on the
//! ordinary tape primitives.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Channels of the three encoder stages (full, 1/2, 1/4 resolution).
    pub channels: [usize; 3],
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub proj_dim: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            num_classes: 3,
            channels: [8, 16, 16],
            embed_dim: 32,
            head_hidden: 64,
            proj_dim: 32,
            leaky_slope: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.height < 4 || self.width < 4 || self.height % 4 != 0 || self.width % 4 != 0 {
            return bad("model input extents must be positive multiples of 4");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.channels.contains(&0) || self.embed_dim == 0 || self.head_hidden == 0 || self.proj_dim == 0 {
            return bad("layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad("leaky_slope must lie in [0, 1)");
        }
        Ok(())
    }

    fn layers(&self) -> Vec<(&'static str, usize, usize)> {
        let [c1, c2, c3] = self.channels;
        let q = (self.height / 4) * (self.width / 4);
        let (d, h, p) = (self.embed_dim, self.head_hidden, self.proj_dim);
        vec![
            ("enc.conv1", 9, c1),
            ("enc.conv2", 9 * c1, c2),
            ("enc.conv3", 9 * c2, c3),
            ("enc.fc", q * c3, d),
            ("head.fc1", d, h),
            ("head.fc2", h, p),
            ("dec.fc", d, q * c3),
            ("dec.conv3", 9 * 2 * c3, c2),
            ("dec.conv2", 9 * 2 * c2, c1),
            ("dec.conv1", 9 * 2 * c1, c1),
            ("dec.out", c1, self.num_classes),
        ]
    }
}

/// Parameter-index ranges of the three parts.
const ENCODER: std::ops::Range<usize> = 0..8;
const HEAD: std::ops::Range<usize> = 8..12;
const DECODER: std::ops::Range<usize> = 12..22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Head,
    Decoder,
}

impl Part {
    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            Part::Encoder => ENCODER,
            Part::Head => HEAD,
            Part::Decoder => DECODER,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Model parameters bound to a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Encoder output: the global feature vector plus skip maps at full, 1/2,
/// and 1/4 resolution.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub features: Var,
    pub skips: [Var; 3],
    pub batch: usize,
}

impl ParamModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, fan_in, fan_out) in config.layers() {
            names.push(format!("{name}.w"));
            names.push(format!("{name}.b"));
            params.push(Tensor::zeros(&[fan_in, fan_out]));
            params.push(Tensor::zeros(&[fan_out]));
        }
        let mut model = Self { config, names, params };
        model.init_range(0..model.params.len(), seed);
        Ok(model)
    }

    /// Centered uniform weights with bound `sqrt(6 / fan_in)`, zero biases.
    fn init_range(&mut self, range: std::ops::Range<usize>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in range {
            let t = &mut self.params[k];
            if t.shape().len() == 2 {
                let bound = (6.0 / t.shape()[0] as f64).sqrt();
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            } else {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Fresh decoder weights, leaving encoder and head untouched.
    pub fn reinit_decoder(&mut self, seed: u64) {
        self.init_range(DECODER, seed ^ 0xdec0_de00);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self, part: Part) -> usize {
        self.params[part.range()].iter().map(Tensor::len).sum()
    }

    pub fn total_param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Copies encoder and head parameters from `other`.
    pub fn copy_encoder_from(&mut self, other: &ParamModel) -> Result<()> {
        for k in ENCODER.chain(HEAD) {
            if self.params[k].shape() != other.params[k].shape() {
                return Err(Error::ShapeMismatch {
                    expected: self.params[k].shape().to_vec(),
                    found: other.params[k].shape().to_vec(),
                });
            }
            self.params[k] = other.params[k].clone();
        }
        Ok(())
    }

    /// Binds parameters as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.clone())).collect(),
        }
    }

    /// Binds parameters as constants (no gradient flows to them).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.constant(p.clone())).collect(),
        }
    }

    /// Stacks `[H, W]` images into a `[B·H·W, 1]` constant.
    pub fn input(&self, tape: &mut Tape, images: &[&Tensor]) -> Result<Var> {
        let (h, w) = (self.config.height, self.config.width);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.shape() != [h, w] {
                return Err(Error::ShapeMismatch {
                    expected: vec![h, w],
                    found: img.shape().to_vec(),
                });
            }
            data.extend_from_slice(img.data());
        }
        Ok(tape.constant(Tensor::new(vec![images.len() * h * w, 1], data)?))
    }

    fn dense(&self, tape: &mut Tape, b: &Bound, layer: usize, x: Var, act: bool) -> Var {
        let y = tape.matmul(x, b.vars[2 * layer]);
        let y = tape.add_bias(y, b.vars[2 * layer + 1]);
        if act {
            tape.leaky_relu(y, self.config.leaky_slope)
        } else {
            y
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&self, tape: &mut Tape, b: &Bound, layer: usize, x: Var, geom: (usize, usize, usize), stride: usize) -> Var {
        let (batch, h, w) = geom;
        let cin = tape.value(x).cols();
        let (index, rows) = im2col_index(batch, h, w, cin, stride);
        let cols = tape.gather(x, index, &[rows, 9 * cin]);
        self.dense(tape, b, layer, cols, true)
    }

    pub fn encode(&self, tape: &mut Tape, b: &Bound, x: Var) -> Encoded {
        let (h, w) = (self.config.height, self.config.width);
        let batch = tape.value(x).rows() / (h * w);
        let e1 = self.conv(tape, b, 0, x, (batch, h, w), 1);
        let e2 = self.conv(tape, b, 1, e1, (batch, h, w), 2);
        let e3 = self.conv(tape, b, 2, e2, (batch, h / 2, w / 2), 2);
        let c3 = self.config.channels[2];
        let flat = tape.reshape(e3, &[batch, (h / 4) * (w / 4) * c3]);
        let features = self.dense(tape, b, 3, flat, true);
        Encoded {
            features,
            skips: [e1, e2, e3],
            batch,
        }
    }

    /// `g(E(x))`, before normalization.
    pub fn project(&self, tape: &mut Tape, b: &Bound, features: Var) -> Var {
        let hidden = self.dense(tape, b, 4, features, true);
        self.dense(tape, b, 5, hidden, false)
    }

    /// Unit-norm embeddings `[B, proj_dim]`.
    pub fn embed_on_tape(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let enc = self.encode(tape, b, x);
        let p = self.project(tape, b, enc.features);
        tape.normalize_rows(p)
    }

    /// Per-pixel logits `[B·H·W, num_classes]`.
    pub fn decode(&self, tape: &mut Tape, b: &Bound, enc: &Encoded) -> Var {
        let (h, w) = (self.config.height, self.config.width);
        let [_, _, c3] = self.config.channels;
        let batch = enc.batch;
        let d0 = self.dense(tape, b, 6, enc.features, true);
        let d0 = tape.reshape(d0, &[batch * (h / 4) * (w / 4), c3]);
        let x = tape.concat_cols(d0, enc.skips[2]);
        let d3 = self.conv(tape, b, 7, x, (batch, h / 4, w / 4), 1);
        let up = upsample(tape, d3, batch, h / 4, w / 4);
        let x = tape.concat_cols(up, enc.skips[1]);
        let d2 = self.conv(tape, b, 8, x, (batch, h / 2, w / 2), 1);
        let up = upsample(tape, d2, batch, h / 2, w / 2);
        let x = tape.concat_cols(up, enc.skips[0]);
        let d1 = self.conv(tape, b, 9, x, (batch, h, w), 1);
        self.dense(tape, b, 10, d1, false)
    }

    pub fn segment_on_tape(&self, tape: &mut Tape, b: &Bound, x: Var) -> Var {
        let enc = self.encode(tape, b, x);
        self.decode(tape, b, &enc)
    }

    /// `l2_normalize(g(E(x)))` for one image.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let z = self.embed_batch(&[image])?;
        Tensor::from_vec(z.data().to_vec())
    }

    /// Unit-norm embeddings `[B, proj_dim]` for a batch of images.
    pub fn embed_batch(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let x = self.input(&mut tape, images)?;
        let z = self.embed_on_tape(&mut tape, &b, x)?;
        Ok(tape.value(z).clone())
    }

    /// Logits of shape `[H, W, num_classes]`.
    pub fn segment(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w, c) = (self.config.height, self.config.width, self.config.num_classes);
        self.segment_batch(&[image])?.reshape(&[h, w, c])
    }

    /// Logits `[B·H·W, num_classes]`.
    pub fn segment_batch(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let x = self.input(&mut tape, images)?;
        let y = self.segment_on_tape(&mut tape, &b, x);
        Ok(tape.value(y).clone())
    }

    /// Per-pixel argmax class maps, one per image.
    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<Vec<u8>>> {
        let logits = self.segment_batch(images)?;
        let px = self.config.height * self.config.width;
        let preds: Vec<u8> = (0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Ok(preds.chunks(px).map(<[u8]>::to_vec).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string(&ckpt)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Data(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format version {}",
                ckpt.format_version
            )));
        }
        let mut model = ParamModel::new(ckpt.config, 0)?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::Data("checkpoint parameter count mismatch".into()));
        }
        for (k, nt) in ckpt.params.into_iter().enumerate() {
            if nt.name != model.names[k] || nt.shape != model.params[k].shape() {
                return Err(Error::Data(format!("unexpected checkpoint entry {}", nt.name)));
            }
            model.params[k] = Tensor::new(nt.shape, nt.data)?;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    params: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

type IndexKey = (usize, usize, usize, usize, usize);

fn index_cache() -> &'static Mutex<HashMap<IndexKey, Arc<[Option<u32>]>>> {
    static CACHE: OnceLock<Mutex<HashMap<IndexKey, Arc<[Option<u32>]>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn cached(key: IndexKey, build: impl FnOnce() -> Vec<Option<u32>>) -> Arc<[Option<u32>]> {
    let mut cache = index_cache().lock().expect("index cache poisoned");
    cache.entry(key).or_insert_with(|| build().into()).clone()
}

/// Gather index for a zero-padded 3×3 im2col of a `[B·H·W, C]` map.
/// Columns are ordered `(ky, kx, c)`.
fn im2col_index(batch: usize, h: usize, w: usize, c: usize, stride: usize) -> (Arc<[Option<u32>]>, usize) {
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let index = cached((batch, h, w, c, stride), || {
        let mut idx = Vec::with_capacity(batch * ho * wo * 9 * c);
        for b in 0..batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let y = (oy * stride + ky) as isize - 1;
                            let x = (ox * stride + kx) as isize - 1;
                            let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                            for ch in 0..c {
                                idx.push(inside.then(|| (((b * h + y as usize) * w + x as usize) * c + ch) as u32));
                            }
                        }
                    }
                }
            }
        }
        idx
    });
    (index, batch * ho * wo)
}

/// Nearest-neighbor 2× upsampling of a `[B·H·W, C]` map.
fn upsample(tape: &mut Tape, x: Var, batch: usize, h: usize, w: usize) -> Var {
    let c = tape.value(x).cols();
    let index = cached((batch, h, w, c, 0), || {
        let mut idx = Vec::with_capacity(batch * 4 * h * w * c);
        for b in 0..batch {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    for ch in 0..c {
                        idx.push(Some((((b * h + y / 2) * w + xx / 2) * c + ch) as u32));
                    }
                }
            }
        }
        idx
    });
    tape.gather(x, index, &[batch * 4 * h * w, c])
}

/// `t ← α·t + (1−α)·s` for every tensor.
pub fn ema_update(teacher: &mut [Tensor], student: &[Tensor], alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("EMA decay {alpha} outside [0, 1)")));
    }
    if teacher.len() != student.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![teacher.len()],
            found: vec![student.len()],
        });
    }
    for (t, s) in teacher.iter().zip(student) {
        if t.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                expected: t.shape().to_vec(),
                found: s.shape().to_vec(),
            });
        }
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(())
}

/// Exponential-moving-average copy of a student model.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaTeacher {
    pub model: ParamModel,
    pub alpha: f64,
}

impl EmaTeacher {
    pub fn new(student: &ParamModel, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!("EMA decay {alpha} outside [0, 1)")));
        }
        Ok(Self {
            model: student.clone(),
            alpha,
        })
    }

    pub fn update(&mut self, student: &ParamModel) -> Result<()> {
        ema_update(&mut self.model.params, &student.params, self.alpha)
    }
}
