//! Latent texture autoencoder and latent-space expression editing.
//!
//! Face textures live on a fixed square UV chart. This module compresses
//! them into a *latent stack* — one code row per decoder layer — so that
//! expression changes become straight lines in latent space: an editing
//! direction is the difference between mean codes of an expressive set and
//! a neutral set, and editing adds intensity-scaled directions onto a
//! frame's code before decoding.
//!
//! The decoder grows a learned base-resolution feature map through `n`
//! rounds of bilinear upsampling; each round's channels are gated by an
//! affine function of that layer's code row (a 1x1 "modulated convolution").
//! The encoder is a small regression network from a pooled copy of the
//! texture to all code rows at once. Both directions run on the shared
//! autodiff tape, so the functions used at inference are the exact
//! functions trained.

mod directions;
mod train;

pub use directions::{
    compute_editing_directions, edit_texture, edit_texture_masked, load_directions,
    save_directions, shift_codes, stack_cosine, EditingDirectionSet,
};
pub use train::{
    synthetic_textures, train_texture_model, LabeledTexture, TextureCorpusSpec, TextureTrainLog,
};
pub(crate) use train::{prepare_images, run_phase};

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, Mask};
use crate::nn::{Linear, LinearNodes};
use crate::tape::{NodeId, Tape};
use crate::tensorfile::{TensorFile, TensorFileError};

#[derive(Debug, Error)]
pub enum TextureError {
    #[error("{what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("texture must be {expected}x{expected}, got {got_w}x{got_h}")]
    WrongTextureSize {
        expected: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("mask size {mask_w}x{mask_h} does not match texture {tex_w}x{tex_h}")]
    MaskSizeMismatch {
        mask_w: usize,
        mask_h: usize,
        tex_w: usize,
        tex_h: usize,
    },
    #[error("invalid texture model config: {0}")]
    BadConfig(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training set must contain neutral and at least one non-neutral texture")]
    UniformTrainingSet,
    #[error("no textures labeled with emotion index {0}")]
    MissingEmotionTextures(usize),
    #[error("no neutral textures in the input set")]
    MissingNeutralTextures,
    #[error("direction set covers {available} emotions but the edit vector has {requested}")]
    DirectionCountMismatch { available: usize, requested: usize },
    #[error("emotion intensity {0} exceeds 1; pass extrapolate=true to allow up to 2")]
    IntensityOutOfRange(f64),
    #[error("unusable model or direction file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Tensor(#[from] TensorFileError),
}

/// Architecture and training settings for the texture autoencoder.
///
/// `tex_size` must equal `base << n_layers` for an integer base of at least
/// 2: the decoder starts from a learned `base x base` feature map and
/// doubles the resolution once per layer. The perceptual half of the
/// reconstruction loss uses a fixed random feature extractor built from
/// `feature_seed`, which is recorded in checkpoints so a reloaded model is
/// scored with the identical measuring stick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureConfig {
    pub tex_size: usize,
    /// Latent stack height `n` (one code row and one decoder layer each).
    pub n_layers: usize,
    /// Latent stack width `d`.
    pub latent_dim: usize,
    /// Decoder feature channels.
    pub channels: usize,
    /// Encoder input resolution; textures are average-pooled down to this.
    pub enc_res: usize,
    pub enc_hidden: usize,
    pub feature_seed: u64,
    pub leaky_slope: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Joint decoder + encoder reconstruction steps.
    pub phase1_steps: usize,
    /// Encoder-only fine-tuning steps with the decoder frozen.
    pub phase2_steps: usize,
    pub lambda_perceptual: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            tex_size: 256,
            n_layers: 4,
            latent_dim: 64,
            channels: 32,
            enc_res: 32,
            enc_hidden: 128,
            feature_seed: 7,
            leaky_slope: 0.2,
            lr: 1e-3,
            batch_size: 4,
            phase1_steps: 1500,
            phase2_steps: 500,
            lambda_perceptual: 0.1,
        }
    }
}

impl TextureConfig {
    /// Small preset for tests and fast experiments (32x32 textures).
    pub fn quick() -> Self {
        Self {
            tex_size: 32,
            n_layers: 2,
            latent_dim: 16,
            channels: 16,
            enc_res: 16,
            enc_hidden: 64,
            batch_size: 8,
            phase1_steps: 900,
            phase2_steps: 250,
            ..Self::default()
        }
    }

    pub fn base_res(&self) -> usize {
        self.tex_size >> self.n_layers
    }

    pub fn pooled_dim(&self) -> usize {
        self.enc_res * self.enc_res * 3
    }

    pub fn validate(&self) -> Result<(), TextureError> {
        let fail = |msg: String| Err(TextureError::BadConfig(msg));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if !self.tex_size.is_power_of_two() || self.tex_size < 8 {
            return fail(format!("tex_size {} must be a power of two >= 8", self.tex_size));
        }
        if self.base_res() < 2 {
            return fail(format!(
                "tex_size {} too small for {} doubling layers",
                self.tex_size, self.n_layers
            ));
        }
        if !self.enc_res.is_power_of_two() || self.enc_res < 4 || self.enc_res > self.tex_size {
            return fail(format!(
                "enc_res {} must be a power of two in [4, tex_size]",
                self.enc_res
            ));
        }
        if self.latent_dim == 0 || self.channels == 0 || self.enc_hidden == 0 {
            return fail("latent_dim, channels and enc_hidden must be positive".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope <= 1.0) {
            return fail(format!("leaky_slope {} outside (0, 1]", self.leaky_slope));
        }
        if self.lr <= 0.0 || self.batch_size == 0 {
            return fail("lr must be positive and batch_size nonzero".into());
        }
        Ok(())
    }
}

/// Stacked latent code: row `i` modulates decoder layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStack {
    /// `n_layers x latent_dim`.
    pub codes: Array2<f64>,
}

impl LatentStack {
    pub fn zeros(n_layers: usize, latent_dim: usize) -> Self {
        Self {
            codes: Array2::zeros((n_layers, latent_dim)),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.codes.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.codes.ncols()
    }

    /// Frobenius norm of the whole stack.
    pub fn norm(&self) -> f64 {
        self.codes.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One decoder round: a style map from the layer's code row to per-channel
/// gains and shifts (`2 * channels` outputs, gains first), and a 1x1
/// convolution mixing channels after modulation. The additive shift half
/// keeps the decoder's response to codes well-conditioned — pure gain
/// modulation loses code components along weak directions of the style
/// map, which breaks round-trip encoding of edited latents.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub style: Linear,
    pub conv: Linear,
}

/// Texture autoencoder: progressive modulated decoder plus pooled-input
/// regression encoder. See the module docs for the data flow.
#[derive(Debug, Clone)]
pub struct TextureModel {
    pub config: TextureConfig,
    /// Learned base-resolution feature map, `base² x channels` row-major.
    pub const_map: Array2<f64>,
    /// Spatial injection for the first code row: a linear map from the code
    /// to a feature map at the first layer's resolution, added after that
    /// layer's modulation. Gain/shift modulation alone reshapes only what
    /// the constant map already contains; this path lets codes contribute
    /// spatial content directly, which keeps the decoder responsive along
    /// every latent direction.
    pub spatial: Linear,
    pub layers: Vec<DecoderLayer>,
    pub rgb: Linear,
    pub enc_in: Linear,
    pub enc_heads: Vec<Linear>,
    pub trained: bool,
}

pub(crate) struct ModelNodes {
    pub const_map: NodeId,
    pub spatial: LinearNodes,
    pub layers: Vec<(LinearNodes, LinearNodes)>,
    pub rgb: LinearNodes,
    pub enc_in: LinearNodes,
    pub enc_heads: Vec<LinearNodes>,
}

impl ModelNodes {
    /// Leaf ids in the same order as [`TextureModel::param_refs_mut`].
    pub(crate) fn param_ids(&self, decoder: bool, encoder: bool) -> Vec<NodeId> {
        let mut ids = Vec::new();
        if decoder {
            ids.push(self.const_map);
            ids.extend([self.spatial.weight, self.spatial.bias]);
            for (style, conv) in &self.layers {
                ids.extend([style.weight, style.bias, conv.weight, conv.bias]);
            }
            ids.extend([self.rgb.weight, self.rgb.bias]);
        }
        if encoder {
            ids.extend([self.enc_in.weight, self.enc_in.bias]);
            for head in &self.enc_heads {
                ids.extend([head.weight, head.bias]);
            }
        }
        ids
    }
}

impl TextureModel {
    /// Fresh untrained model. Style biases start at one (so modulation is
    /// initially a no-op) and the color head starts at mid-gray, which keeps
    /// early decodes inside `[0, 1]`.
    pub fn init(config: TextureConfig, rng: &mut impl Rng) -> Result<Self, TextureError> {
        config.validate()?;
        let base = config.base_res();
        let c = config.channels;
        let const_map = Array2::from_shape_fn((base * base, c), |_| {
            use rand_distr::Distribution;
            rand_distr::Normal::new(0.0, 1.0).expect("valid").sample(rng)
        });
        let layers = (0..config.n_layers)
            .map(|_| {
                let mut style = Linear::init(config.latent_dim, 2 * c, rng);
                // Gains start at one, shifts at zero: modulation is a no-op
                // for the zero code.
                for j in 0..c {
                    style.bias[[0, j]] = 1.0;
                    style.bias[[0, c + j]] = 0.0;
                }
                DecoderLayer {
                    style,
                    conv: Linear::init(c, c, rng),
                }
            })
            .collect();
        let mut rgb = Linear::init(c, 3, rng);
        rgb.bias.fill(0.5);
        let first_res = 2 * base;
        let spatial = Linear::init(config.latent_dim, first_res * first_res * c, rng);
        let enc_in = Linear::init(config.pooled_dim(), config.enc_hidden, rng);
        let enc_heads = (0..config.n_layers)
            .map(|_| Linear::init(config.enc_hidden, config.latent_dim, rng))
            .collect();
        Ok(Self {
            config,
            const_map,
            spatial,
            layers,
            rgb,
            enc_in,
            enc_heads,
            trained: false,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_stack(&self, w: &LatentStack) -> Result<(), TextureError> {
        if w.n_layers() != self.config.n_layers {
            return Err(TextureError::DimMismatch {
                what: "latent stack layers",
                expected: self.config.n_layers,
                got: w.n_layers(),
            });
        }
        if w.latent_dim() != self.config.latent_dim {
            return Err(TextureError::DimMismatch {
                what: "latent stack width",
                expected: self.config.latent_dim,
                got: w.latent_dim(),
            });
        }
        Ok(())
    }

    fn check_texture(&self, t: &Image) -> Result<(), TextureError> {
        if t.width() != self.config.tex_size || t.height() != self.config.tex_size {
            return Err(TextureError::WrongTextureSize {
                expected: self.config.tex_size,
                got_w: t.width(),
                got_h: t.height(),
            });
        }
        Ok(())
    }

    /// Mirror all parameters onto a tape. `decoder` / `encoder` select which
    /// halves track gradients; the rest enter as constants.
    pub(crate) fn nodes(&self, tape: &mut Tape, decoder: bool, encoder: bool) -> ModelNodes {
        ModelNodes {
            const_map: tape.leaf(self.const_map.clone(), decoder),
            spatial: self.spatial.nodes(tape, decoder),
            layers: self
                .layers
                .iter()
                .map(|l| (l.style.nodes(tape, decoder), l.conv.nodes(tape, decoder)))
                .collect(),
            rgb: self.rgb.nodes(tape, decoder),
            enc_in: self.enc_in.nodes(tape, encoder),
            enc_heads: self
                .enc_heads
                .iter()
                .map(|h| h.nodes(tape, encoder))
                .collect(),
        }
    }

    /// Decoder graph from per-layer `1 x d` code nodes to an unclamped
    /// `tex² x 3` color node.
    pub(crate) fn decode_graph(
        &self,
        tape: &mut Tape,
        nodes: &ModelNodes,
        codes: &[NodeId],
    ) -> NodeId {
        assert_eq!(codes.len(), self.config.n_layers);
        let c = self.config.channels;
        let mut size = self.config.base_res();
        let mut f = nodes.const_map;
        for (i, (style, conv)) in nodes.layers.iter().enumerate() {
            f = tape.upsample2x(f, size, size);
            size *= 2;
            let s = style.apply(tape, codes[i]);
            let gains = tape.gather_cols(s, 0, c);
            let shifts = tape.gather_cols(s, c, 2 * c);
            let ones = tape.constant(Array2::ones((size * size, 1)));
            let gain_rows = tape.matmul(ones, gains);
            let shift_rows = tape.matmul(ones, shifts);
            let scaled = tape.mul_elem(f, gain_rows);
            let mut modulated = tape.add(scaled, shift_rows);
            if i == 0 {
                let spat = nodes.spatial.apply(tape, codes[0]);
                let spat_map = tape.reshape(spat, size * size, c);
                modulated = tape.add(modulated, spat_map);
            }
            let mixed = conv.apply(tape, modulated);
            f = tape.leaky_relu(mixed, self.config.leaky_slope);
        }
        nodes.rgb.apply(tape, f)
    }

    /// Encoder graph from a `1 x pooled_dim` input row to one `1 x d` code
    /// node per layer.
    pub(crate) fn encode_graph(
        &self,
        tape: &mut Tape,
        nodes: &ModelNodes,
        pooled: NodeId,
    ) -> Vec<NodeId> {
        let h = nodes.enc_in.apply(tape, pooled);
        let h = tape.leaky_relu(h, self.config.leaky_slope);
        nodes.enc_heads.iter().map(|head| head.apply(tape, h)).collect()
    }

    /// Deterministic decode of a latent stack to a `[0, 1]` texture.
    pub fn decode(&self, w: &LatentStack) -> Result<Image, TextureError> {
        self.check_stack(w)?;
        let mut tape = Tape::new();
        let nodes = self.nodes(&mut tape, false, false);
        let codes: Vec<NodeId> = (0..self.config.n_layers)
            .map(|i| tape.constant(w.codes.row(i).to_owned().insert_axis(Axis(0))))
            .collect();
        let out = self.decode_graph(&mut tape, &nodes, &codes);
        let size = self.config.tex_size;
        Ok(matrix_to_image(tape.value(out), size, size))
    }

    /// Deterministic encode of a texture into its latent stack.
    pub fn encode(&self, t: &Image) -> Result<LatentStack, TextureError> {
        self.check_texture(t)?;
        let pooled = pooled_row(t, self.config.enc_res);
        let mut tape = Tape::new();
        let nodes = self.nodes(&mut tape, false, false);
        let p = tape.constant(pooled);
        let code_ids = self.encode_graph(&mut tape, &nodes, p);
        let mut codes = Array2::zeros((self.config.n_layers, self.config.latent_dim));
        for (i, id) in code_ids.iter().enumerate() {
            codes.row_mut(i).assign(&tape.value(*id).row(0));
        }
        Ok(LatentStack { codes })
    }

    /// Mutable parameter list in the canonical (checkpoint) order,
    /// restricted to the selected halves.
    pub(crate) fn param_refs_mut(&mut self, decoder: bool, encoder: bool) -> Vec<&mut Array2<f64>> {
        let mut refs: Vec<&mut Array2<f64>> = Vec::new();
        if decoder {
            refs.push(&mut self.const_map);
            refs.push(&mut self.spatial.weight);
            refs.push(&mut self.spatial.bias);
            for l in &mut self.layers {
                refs.push(&mut l.style.weight);
                refs.push(&mut l.style.bias);
                refs.push(&mut l.conv.weight);
                refs.push(&mut l.conv.bias);
            }
            refs.push(&mut self.rgb.weight);
            refs.push(&mut self.rgb.bias);
        }
        if encoder {
            refs.push(&mut self.enc_in.weight);
            refs.push(&mut self.enc_in.bias);
            for h in &mut self.enc_heads {
                refs.push(&mut h.weight);
                refs.push(&mut h.bias);
            }
        }
        refs
    }

    fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![("dec.const".into(), &self.const_map)];
        out.push(("dec.spatial.weight".into(), &self.spatial.weight));
        out.push(("dec.spatial.bias".into(), &self.spatial.bias));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("dec.layer{i}.style.weight"), &l.style.weight));
            out.push((format!("dec.layer{i}.style.bias"), &l.style.bias));
            out.push((format!("dec.layer{i}.conv.weight"), &l.conv.weight));
            out.push((format!("dec.layer{i}.conv.bias"), &l.conv.bias));
        }
        out.push(("dec.rgb.weight".into(), &self.rgb.weight));
        out.push(("dec.rgb.bias".into(), &self.rgb.bias));
        out.push(("enc.in.weight".into(), &self.enc_in.weight));
        out.push(("enc.in.bias".into(), &self.enc_in.bias));
        for (i, h) in self.enc_heads.iter().enumerate() {
            out.push((format!("enc.head{i}.weight"), &h.weight));
            out.push((format!("enc.head{i}.bias"), &h.bias));
        }
        out
    }
}

/// Fixed random two-stage convolutional feature extractor used as the
/// perceptual half of the reconstruction loss. Weights are drawn once from
/// a seeded generator and never trained, so feature distances stay
/// comparable across runs and checkpoints (the seed is part of the model
/// config).
pub(crate) struct PerceptualExtractor {
    /// Nine 3x`C1` tap matrices of the first 3x3 convolution.
    taps1: Vec<Array2<f64>>,
    /// Nine `C1`x`C2` tap matrices of the second.
    taps2: Vec<Array2<f64>>,
}

const PERC_C1: usize = 8;
const PERC_C2: usize = 16;

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| {
            let normal = rand_distr::Normal::new(0.0, 1.0 / (9.0 * rows as f64).sqrt())
                .expect("valid normal");
            (0..9)
                .map(|_| Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng)))
                .collect::<Vec<_>>()
        };
        Self {
            taps1: draw(3, PERC_C1),
            taps2: draw(PERC_C1, PERC_C2),
        }
    }

    /// Features of an `(h*w) x 3` image node: 3x3 conv → leaky relu → 2x2
    /// pool, twice. Output is `(h/4 * w/4) x 16`; needs `h, w >= 4`.
    pub fn features(&self, tape: &mut Tape, img: NodeId, h: usize, w: usize) -> NodeId {
        let c1 = conv3x3(tape, img, h, w, &self.taps1);
        let a1 = tape.leaky_relu(c1, 0.2);
        let p1 = tape.avgpool2x(a1, h, w);
        let c2 = conv3x3(tape, p1, h / 2, w / 2, &self.taps2);
        let a2 = tape.leaky_relu(c2, 0.2);
        tape.avgpool2x(a2, h / 2, w / 2)
    }
}

/// 3x3 convolution over a row-major `(h*w) x C_in` map as nine shifted
/// per-pixel matmuls (zero padding at the borders).
fn conv3x3(tape: &mut Tape, x: NodeId, h: usize, w: usize, taps: &[Array2<f64>]) -> NodeId {
    let mut acc: Option<NodeId> = None;
    let mut k = 0;
    for dy in -1..=1i64 {
        for dx in -1..=1i64 {
            let shifted = tape.shift2d(x, h, w, dy, dx);
            let weight = tape.constant(taps[k].clone());
            k += 1;
            let term = tape.matmul(shifted, weight);
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term),
            });
        }
    }
    acc.expect("nine taps")
}

/// Row-major `(h*w) x 3` matrix view of an image's pixels.
pub(crate) fn image_to_matrix(img: &Image) -> Array2<f64> {
    Array2::from_shape_vec((img.width() * img.height(), 3), img.data().to_vec())
        .expect("image data is dense row-major")
}

/// Inverse of [`image_to_matrix`]; clamps into `[0, 1]`.
pub(crate) fn matrix_to_image(m: &Array2<f64>, width: usize, height: usize) -> Image {
    assert_eq!(m.nrows(), width * height);
    assert_eq!(m.ncols(), 3);
    let mut img = Image::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let r = y * width + x;
            img.set(x, y, [m[[r, 0]], m[[r, 1]], m[[r, 2]]]);
        }
    }
    img
}

/// Encoder input: the texture average-pooled down to `enc_res` and
/// flattened to a `1 x (enc_res² * 3)` row.
pub(crate) fn pooled_row(img: &Image, enc_res: usize) -> Array2<f64> {
    let mut cur = img.clone();
    while cur.width() > enc_res {
        cur = cur.avg_pool2();
    }
    assert_eq!(cur.width(), enc_res, "texture size must be a power-of-two multiple of enc_res");
    Array2::from_shape_vec((1, enc_res * enc_res * 3), cur.data().to_vec())
        .expect("pooled data is dense")
}

#[derive(Serialize, Deserialize)]
struct TextureCheckpointMeta {
    format: String,
    version: u32,
    trained: bool,
    config: TextureConfig,
}

const TEXTURE_FORMAT: &str = "texture-model";

fn insert_matrix(file: &mut TensorFile, name: &str, m: &Array2<f64>) {
    let data: Vec<f64> = m.iter().cloned().collect();
    file.insert_f64(name, &[m.nrows(), m.ncols()], data);
}

fn read_matrix(file: &TensorFile, name: &str) -> Result<Array2<f64>, TextureError> {
    let (dims, data) = file.f64_entry(name)?;
    if dims.len() != 2 {
        return Err(TextureError::BadFile(format!("tensor {name} is not a matrix")));
    }
    Array2::from_shape_vec((dims[0], dims[1]), data.to_vec())
        .map_err(|e| TextureError::BadFile(format!("tensor {name}: {e}")))
}

/// Write the model (both halves plus config) to one file. The config block
/// records the latent geometry, texture size and perceptual feature seed,
/// so a loaded model reproduces training-time behavior exactly.
pub fn save_texture_model(
    path: impl AsRef<std::path::Path>,
    model: &TextureModel,
) -> Result<(), TextureError> {
    let meta = TextureCheckpointMeta {
        format: TEXTURE_FORMAT.to_string(),
        version: 1,
        trained: model.trained,
        config: model.config.clone(),
    };
    let mut file = TensorFile::new(serde_json::to_value(&meta).expect("serializable meta"));
    for (name, m) in model.named_params() {
        insert_matrix(&mut file, &name, m);
    }
    file.save(path)?;
    Ok(())
}

pub fn load_texture_model(path: impl AsRef<std::path::Path>) -> Result<TextureModel, TextureError> {
    let file = TensorFile::load(path)?;
    let meta: TextureCheckpointMeta = serde_json::from_value(file.meta.clone())
        .map_err(|e| TextureError::BadFile(format!("bad metadata: {e}")))?;
    if meta.format != TEXTURE_FORMAT {
        return Err(TextureError::BadFile(format!(
            "format is {:?}, expected {TEXTURE_FORMAT:?}",
            meta.format
        )));
    }
    if meta.version != 1 {
        return Err(TextureError::BadFile(format!(
            "unsupported version {}",
            meta.version
        )));
    }
    meta.config.validate()?;
    let config = meta.config;
    let layers = (0..config.n_layers)
        .map(|i| {
            Ok(DecoderLayer {
                style: Linear {
                    weight: read_matrix(&file, &format!("dec.layer{i}.style.weight"))?,
                    bias: read_matrix(&file, &format!("dec.layer{i}.style.bias"))?,
                },
                conv: Linear {
                    weight: read_matrix(&file, &format!("dec.layer{i}.conv.weight"))?,
                    bias: read_matrix(&file, &format!("dec.layer{i}.conv.bias"))?,
                },
            })
        })
        .collect::<Result<Vec<_>, TextureError>>()?;
    let enc_heads = (0..config.n_layers)
        .map(|i| {
            Ok(Linear {
                weight: read_matrix(&file, &format!("enc.head{i}.weight"))?,
                bias: read_matrix(&file, &format!("enc.head{i}.bias"))?,
            })
        })
        .collect::<Result<Vec<_>, TextureError>>()?;
    let model = TextureModel {
        const_map: read_matrix(&file, "dec.const")?,
        spatial: Linear {
            weight: read_matrix(&file, "dec.spatial.weight")?,
            bias: read_matrix(&file, "dec.spatial.bias")?,
        },
        layers,
        rgb: Linear {
            weight: read_matrix(&file, "dec.rgb.weight")?,
            bias: read_matrix(&file, "dec.rgb.bias")?,
        },
        enc_in: Linear {
            weight: read_matrix(&file, "enc.in.weight")?,
            bias: read_matrix(&file, "enc.in.bias")?,
        },
        enc_heads,
        trained: meta.trained,
        config,
    };
    let base = model.config.base_res();
    let first_res = 2 * base;
    if model.const_map.nrows() != base * base
        || model.const_map.ncols() != model.config.channels
        || model.spatial.out_dim() != first_res * first_res * model.config.channels
        || model.enc_in.in_dim() != model.config.pooled_dim()
    {
        return Err(TextureError::BadFile(
            "tensor shapes disagree with recorded config".into(),
        ));
    }
    Ok(model)
}

/// Replace every invalid texel (coverage below 0.5 in `mask`) with its
/// nearest valid texel's color, found by multi-source breadth-first
/// dilation from the valid region. Valid texels are untouched; an
/// all-invalid mask returns the texture unchanged.
pub fn fill_invalid_texels(texture: &Image, mask: &Mask) -> Result<Image, TextureError> {
    if mask.width() != texture.width() || mask.height() != texture.height() {
        return Err(TextureError::MaskSizeMismatch {
            mask_w: mask.width(),
            mask_h: mask.height(),
            tex_w: texture.width(),
            tex_h: texture.height(),
        });
    }
    let (w, h) = (texture.width(), texture.height());
    let mut source: Vec<Option<usize>> = vec![None; w * h];
    let mut queue = std::collections::VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) >= 0.5 {
                source[y * w + x] = Some(y * w + x);
                queue.push_back((x, y));
            }
        }
    }
    if queue.is_empty() {
        log::warn!("texel dilation: mask has no valid texels, texture left unchanged");
        return Ok(texture.clone());
    }
    while let Some((x, y)) = queue.pop_front() {
        let src = source[y * w + x].expect("queued texels have sources");
        let neighbors = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in neighbors {
            if nx < w && ny < h && source[ny * w + nx].is_none() {
                source[ny * w + nx] = Some(src);
                queue.push_back((nx, ny));
            }
        }
    }
    let mut out = texture.clone();
    for y in 0..h {
        for x in 0..w {
            let src = source[y * w + x].expect("all texels reached");
            if src != y * w + x {
                out.set(x, y, texture.get(src % w, src / w));
            }
        }
    }
    Ok(out)
}
