//! Coefficient-space expression transform: a WGAN-GP generator/discriminator
//! pair over flat `(alpha | beta)` face coefficients, conditioned on an
//! emotion vector.
//!
//! The generator maps `(c, e)` to edited coefficients `c'` of the same
//! dimension; the discriminator scores coefficient realism (`rf` head) and
//! regresses the emotion carried by a coefficient vector (`reg` head).
//! Training combines the adversarial pair with cycle-consistency, mouth-shape
//! preservation and identity-deformation penalties, all measured in vertex
//! space through a bound [`MorphableBasis`].

mod losses;
mod train;

pub use losses::{
    loss_adv, loss_gp, loss_mouth, loss_r, loss_rec, loss_reg_d, loss_reg_g, total_losses,
    CoeffBatch, LossComponents, VertexOps,
};
pub use train::{train_shape_gan, IterationRecord, TrainingLog};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::morphable::{EmotionVector, FaceCoefficients, MorphableBasis, MorphableError};
use crate::nn::{leaky_relu, Linear, LinearNodes};
use crate::tape::{NodeId, Tape};
use crate::tensorfile::{TensorFile, TensorFileError};

#[derive(Debug, thiserror::Error)]
pub enum ShapeGanError {
    #[error("{what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch sizes differ: {0} vs {1}")]
    BatchSizeMismatch(usize, usize),
    #[error("training data has no samples for emotion indices {0:?} (0-based)")]
    MissingEmotions(Vec<usize>),
    #[error("training data has no neutral samples")]
    MissingNeutral,
    #[error("generator parameters are untrained; train or load a checkpoint first")]
    Untrained,
    #[error("invalid shape-transform config: {0}")]
    BadConfig(String),
    #[error(
        "checkpoint was trained against a basis with (n_alpha, n_beta) = \
         ({ckpt_alpha}, {ckpt_beta}) but the bound basis has ({basis_alpha}, {basis_beta})"
    )]
    BasisMismatch {
        ckpt_alpha: usize,
        ckpt_beta: usize,
        basis_alpha: usize,
        basis_beta: usize,
    },
    #[error("unrecognized checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("training log io: {0}")]
    LogIo(#[from] csv::Error),
    #[error(transparent)]
    Tensor(#[from] TensorFileError),
    #[error(transparent)]
    Morphable(#[from] MorphableError),
}

/// Hyperparameters for the coefficient transform GAN.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeGanConfig {
    /// Flat coefficient dimension `n_alpha + n_beta` of the bound basis.
    pub n_c: usize,
    /// Emotion dimension (number of non-neutral emotion types).
    pub n_e: usize,
    /// Hidden width of both networks.
    pub n_h: usize,
    pub lambda_gp: f64,
    pub lambda_reg: f64,
    pub lambda_rec: f64,
    pub lambda_mouth: f64,
    pub lambda_r: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub iterations: usize,
    /// Must be even: generator batches mix the two cycle directions half/half.
    pub batch_size: usize,
    /// Discriminator updates per generator update.
    pub critic_steps: usize,
    pub leaky_slope: f64,
}

impl Default for ShapeGanConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl ShapeGanConfig {
    /// Full-scale profile (coefficient dims of a production face model,
    /// 80k iterations). Training at this size takes hours on a laptop.
    pub fn full_scale() -> Self {
        Self {
            n_c: 144,
            n_e: 7,
            n_h: 512,
            iterations: 80_000,
            ..Self::quick(144, 7)
        }
    }

    /// Small profile that trains in minutes; loss weights and optimizer
    /// settings match [`full_scale`](Self::full_scale).
    pub fn quick(n_c: usize, n_e: usize) -> Self {
        Self {
            n_c,
            n_e,
            n_h: 64,
            lambda_gp: 10.0,
            lambda_reg: 20.0,
            lambda_rec: 5e3,
            lambda_mouth: 1.0,
            lambda_r: 1e3,
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            iterations: 5_000,
            batch_size: 64,
            critic_steps: 5,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self, basis: &MorphableBasis) -> Result<(), ShapeGanError> {
        if self.n_c != basis.n_coeff() {
            return Err(ShapeGanError::DimMismatch {
                what: "config n_c vs basis coefficient dim",
                expected: basis.n_coeff(),
                got: self.n_c,
            });
        }
        if self.n_c == 0 || self.n_e == 0 || self.n_h == 0 {
            return Err(ShapeGanError::BadConfig("zero-sized dimension".into()));
        }
        for (name, w) in [
            ("lambda_gp", self.lambda_gp),
            ("lambda_reg", self.lambda_reg),
            ("lambda_rec", self.lambda_rec),
            ("lambda_mouth", self.lambda_mouth),
            ("lambda_r", self.lambda_r),
        ] {
            if !(w >= 0.0) {
                return Err(ShapeGanError::BadConfig(format!(
                    "{name} must be >= 0, got {w}"
                )));
            }
        }
        if !(self.lr > 0.0) {
            return Err(ShapeGanError::BadConfig("lr must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(ShapeGanError::BadConfig(format!(
                    "{name} must be in [0, 1), got {b}"
                )));
            }
        }
        if self.iterations == 0 {
            return Err(ShapeGanError::BadConfig("iterations must be >= 1".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(ShapeGanError::BadConfig(format!(
                "batch_size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if self.critic_steps == 0 {
            return Err(ShapeGanError::BadConfig("critic_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(ShapeGanError::BadConfig(
                "leaky_slope must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Generator network: input `(c, e)`, four leaky-rectified hidden layers of
/// width `n_h`, linear output of dimension `n_c`. The first hidden layer is
/// stored with its weight split into a coefficient block and an emotion block
/// (`pre = c . w_c + e . w_e + b1`), which is equivalent to a single layer on
/// the concatenated input.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// `n_c x n_h`.
    pub w_c: Array2<f64>,
    /// `n_e x n_h`.
    pub w_e: Array2<f64>,
    /// `1 x n_h`.
    pub b1: Array2<f64>,
    /// Hidden layers 2..=4, each `n_h x n_h`.
    pub hidden: Vec<Linear>,
    /// `n_h x n_c`, linear.
    pub out: Linear,
    pub leaky_slope: f64,
    /// Set once training completes (or a trained checkpoint is loaded);
    /// freshly initialized parameters refuse to serve [`edit_shape`].
    pub trained: bool,
}

impl GeneratorParams {
    pub fn init(config: &ShapeGanConfig, rng: &mut impl Rng) -> Self {
        // Fan-in of the split first layer is the full input width n_c + n_e.
        let std = (1.0 / (config.n_c + config.n_e) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let w_c = Array2::from_shape_fn((config.n_c, config.n_h), |_| dist.sample(rng));
        let w_e = Array2::from_shape_fn((config.n_e, config.n_h), |_| dist.sample(rng));
        Self {
            w_c,
            w_e,
            b1: Array2::zeros((1, config.n_h)),
            hidden: (0..3)
                .map(|_| Linear::init(config.n_h, config.n_h, rng))
                .collect(),
            out: Linear::init(config.n_h, config.n_c, rng),
            leaky_slope: config.leaky_slope,
            trained: false,
        }
    }

    pub fn n_c(&self) -> usize {
        self.w_c.nrows()
    }

    pub fn n_e(&self) -> usize {
        self.w_e.nrows()
    }

    pub fn n_h(&self) -> usize {
        self.w_c.ncols()
    }

    /// Concrete batched forward: `c` is `B x n_c`, `e` is `B x n_e`.
    pub fn forward_batch(
        &self,
        c: &Array2<f64>,
        e: &Array2<f64>,
    ) -> Result<Array2<f64>, ShapeGanError> {
        if c.ncols() != self.n_c() {
            return Err(ShapeGanError::DimMismatch {
                what: "coefficient width",
                expected: self.n_c(),
                got: c.ncols(),
            });
        }
        if e.ncols() != self.n_e() {
            return Err(ShapeGanError::DimMismatch {
                what: "emotion width",
                expected: self.n_e(),
                got: e.ncols(),
            });
        }
        if c.nrows() != e.nrows() {
            return Err(ShapeGanError::BatchSizeMismatch(c.nrows(), e.nrows()));
        }
        let mut h = leaky_relu(&(c.dot(&self.w_c) + e.dot(&self.w_e) + &self.b1), self.leaky_slope);
        for layer in &self.hidden {
            h = leaky_relu(&layer.forward(&h), self.leaky_slope);
        }
        Ok(self.out.forward(&h))
    }

    /// Push parameters onto a tape. `requires_grad = false` freezes them
    /// (generator side of a discriminator step, and vice versa).
    pub(crate) fn nodes(&self, tape: &mut Tape, requires_grad: bool) -> GenNodes {
        let mut leaf = |v: &Array2<f64>| {
            if requires_grad {
                tape.leaf(v.clone(), true)
            } else {
                tape.constant(v.clone())
            }
        };
        let w_c = leaf(&self.w_c);
        let w_e = leaf(&self.w_e);
        let b1 = leaf(&self.b1);
        drop(leaf);
        let hidden = self
            .hidden
            .iter()
            .map(|l| l.nodes(tape, requires_grad))
            .collect();
        let out = self.out.nodes(tape, requires_grad);
        GenNodes {
            w_c,
            w_e,
            b1,
            hidden,
            out,
            slope: self.leaky_slope,
        }
    }

    /// Canonical parameter order shared by the optimizer, gradient collection
    /// and the checkpoint format.
    pub(crate) fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut refs = vec![&mut self.w_c, &mut self.w_e, &mut self.b1];
        for l in &mut self.hidden {
            refs.push(&mut l.weight);
            refs.push(&mut l.bias);
        }
        refs.push(&mut self.out.weight);
        refs.push(&mut self.out.bias);
        refs
    }

    fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut v = vec![
            ("gen.w_c".to_string(), &self.w_c),
            ("gen.w_e".to_string(), &self.w_e),
            ("gen.b1".to_string(), &self.b1),
        ];
        for (i, l) in self.hidden.iter().enumerate() {
            v.push((format!("gen.h{}.weight", i + 2), &l.weight));
            v.push((format!("gen.h{}.bias", i + 2), &l.bias));
        }
        v.push(("gen.out.weight".to_string(), &self.out.weight));
        v.push(("gen.out.bias".to_string(), &self.out.bias));
        v
    }
}

/// Tape handles for the generator parameters.
#[derive(Debug, Clone)]
pub(crate) struct GenNodes {
    pub w_c: NodeId,
    pub w_e: NodeId,
    pub b1: NodeId,
    pub hidden: Vec<LinearNodes>,
    pub out: LinearNodes,
    pub slope: f64,
}

impl GenNodes {
    pub fn forward(&self, tape: &mut Tape, c: NodeId, e: NodeId) -> NodeId {
        let cw = tape.matmul(c, self.w_c);
        let ew = tape.matmul(e, self.w_e);
        let pre = tape.add(cw, ew);
        let pre = tape.add_row(pre, self.b1);
        let mut h = tape.leaky_relu(pre, self.slope);
        for layer in &self.hidden {
            let pre = layer.apply(tape, h);
            h = tape.leaky_relu(pre, self.slope);
        }
        self.out.apply(tape, h)
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut ids = vec![self.w_c, self.w_e, self.b1];
        for l in &self.hidden {
            ids.push(l.weight);
            ids.push(l.bias);
        }
        ids.push(self.out.weight);
        ids.push(self.out.bias);
        ids
    }
}

/// Discriminator network: input `c`, four leaky-rectified hidden layers, then
/// two linear heads — a scalar realism score `rf` and an `n_e`-dimensional
/// emotion regression `reg`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    /// Hidden layers 1..=4: `n_c x n_h`, then three `n_h x n_h`.
    pub layers: Vec<Linear>,
    /// `n_h x 1`.
    pub rf: Linear,
    /// `n_h x n_e`.
    pub reg: Linear,
    pub leaky_slope: f64,
}

impl DiscriminatorParams {
    pub fn init(config: &ShapeGanConfig, rng: &mut impl Rng) -> Self {
        let mut layers = vec![Linear::init(config.n_c, config.n_h, rng)];
        for _ in 0..3 {
            layers.push(Linear::init(config.n_h, config.n_h, rng));
        }
        Self {
            layers,
            rf: Linear::init(config.n_h, 1, rng),
            reg: Linear::init(config.n_h, config.n_e, rng),
            leaky_slope: config.leaky_slope,
        }
    }

    pub fn n_c(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn n_e(&self) -> usize {
        self.reg.out_dim()
    }

    /// Concrete trunk: last hidden activation for a `B x n_c` batch.
    fn trunk(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = leaky_relu(&layer.forward(&h), self.leaky_slope);
        }
        h
    }

    /// Concrete realism scores, `B x 1`.
    pub fn rf_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>, ShapeGanError> {
        if x.ncols() != self.n_c() {
            return Err(ShapeGanError::DimMismatch {
                what: "coefficient width",
                expected: self.n_c(),
                got: x.ncols(),
            });
        }
        Ok(self.rf.forward(&self.trunk(x)))
    }

    /// Concrete emotion regression, `B x n_e`.
    pub fn reg_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>, ShapeGanError> {
        if x.ncols() != self.n_c() {
            return Err(ShapeGanError::DimMismatch {
                what: "coefficient width",
                expected: self.n_c(),
                got: x.ncols(),
            });
        }
        Ok(self.reg.forward(&self.trunk(x)))
    }

    pub(crate) fn nodes(&self, tape: &mut Tape, requires_grad: bool) -> DiscNodes {
        DiscNodes {
            layers: self
                .layers
                .iter()
                .map(|l| l.nodes(tape, requires_grad))
                .collect(),
            rf: self.rf.nodes(tape, requires_grad),
            reg: self.reg.nodes(tape, requires_grad),
            slope: self.leaky_slope,
        }
    }

    pub(crate) fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut refs = Vec::new();
        for l in &mut self.layers {
            refs.push(&mut l.weight);
            refs.push(&mut l.bias);
        }
        refs.push(&mut self.rf.weight);
        refs.push(&mut self.rf.bias);
        refs.push(&mut self.reg.weight);
        refs.push(&mut self.reg.bias);
        refs
    }

    fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            v.push((format!("disc.h{}.weight", i + 1), &l.weight));
            v.push((format!("disc.h{}.bias", i + 1), &l.bias));
        }
        v.push(("disc.rf.weight".to_string(), &self.rf.weight));
        v.push(("disc.rf.bias".to_string(), &self.rf.bias));
        v.push(("disc.reg.weight".to_string(), &self.reg.weight));
        v.push(("disc.reg.bias".to_string(), &self.reg.bias));
        v
    }
}

/// Tape handles for the discriminator parameters.
#[derive(Debug, Clone)]
pub(crate) struct DiscNodes {
    pub layers: Vec<LinearNodes>,
    pub rf: LinearNodes,
    pub reg: LinearNodes,
    pub slope: f64,
}

impl DiscNodes {
    fn trunk(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let mut h = x;
        for layer in &self.layers {
            let pre = layer.apply(tape, h);
            h = tape.leaky_relu(pre, self.slope);
        }
        h
    }

    pub fn rf(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let h = self.trunk(tape, x);
        self.rf.apply(tape, h)
    }

    pub fn reg(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let h = self.trunk(tape, x);
        self.reg.apply(tape, h)
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.push(l.weight);
            ids.push(l.bias);
        }
        ids.push(self.rf.weight);
        ids.push(self.rf.bias);
        ids.push(self.reg.weight);
        ids.push(self.reg.bias);
        ids
    }
}

/// Run the generator on one coefficient vector.
pub fn generator_forward(
    params: &GeneratorParams,
    c: &[f64],
    e: &EmotionVector,
) -> Result<Array1<f64>, ShapeGanError> {
    let cb = Array2::from_shape_vec((1, c.len()), c.to_vec()).expect("row vector");
    let eb = Array2::from_shape_vec((1, e.len()), e.values().to_vec()).expect("row vector");
    let out = params.forward_batch(&cb, &eb)?;
    Ok(out.row(0).to_owned())
}

/// Edit a face's editable coefficients under an emotion vector. Pose, delta
/// and gamma pass through unchanged; requires trained generator parameters.
pub fn edit_shape(
    params: &GeneratorParams,
    coeffs: &FaceCoefficients,
    e: &EmotionVector,
) -> Result<FaceCoefficients, ShapeGanError> {
    if !params.trained {
        return Err(ShapeGanError::Untrained);
    }
    let flat = coeffs.flat();
    let edited = generator_forward(params, flat.as_slice().expect("contiguous"), e)?;
    Ok(coeffs.with_flat(edited.as_slice().expect("contiguous"))?)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    version: u32,
    n_alpha: usize,
    n_beta: usize,
    trained: bool,
    config: ShapeGanConfig,
}

const CHECKPOINT_FORMAT: &str = "shape-transform-checkpoint";

fn insert_matrix(file: &mut TensorFile, name: &str, m: &Array2<f64>) {
    let data: Vec<f64> = m.iter().cloned().collect();
    file.insert_f64(name, &[m.nrows(), m.ncols()], data);
}

fn read_matrix(file: &TensorFile, name: &str) -> Result<Array2<f64>, ShapeGanError> {
    let (dims, data) = file.f64_entry(name)?;
    if dims.len() != 2 {
        return Err(ShapeGanError::BadCheckpoint(format!(
            "tensor {name} is not a matrix"
        )));
    }
    Array2::from_shape_vec((dims[0], dims[1]), data.to_vec())
        .map_err(|e| ShapeGanError::BadCheckpoint(format!("tensor {name}: {e}")))
}

/// Write generator + discriminator + config to one checkpoint file, recording
/// the basis dimensions the networks were trained against.
pub fn save_checkpoint(
    path: impl AsRef<std::path::Path>,
    config: &ShapeGanConfig,
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    basis: &MorphableBasis,
) -> Result<(), ShapeGanError> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.to_string(),
        version: 1,
        n_alpha: basis.n_alpha(),
        n_beta: basis.n_beta(),
        trained: gen.trained,
        config: config.clone(),
    };
    let mut file = TensorFile::new(serde_json::to_value(&meta).expect("serializable meta"));
    for (name, m) in gen.named_params().into_iter().chain(disc.named_params()) {
        insert_matrix(&mut file, &name, m);
    }
    file.save(path)?;
    Ok(())
}

/// Load a checkpoint and bind it to `basis`; a checkpoint recorded for
/// different basis dimensions is rejected.
pub fn load_checkpoint(
    path: impl AsRef<std::path::Path>,
    basis: &MorphableBasis,
) -> Result<(ShapeGanConfig, GeneratorParams, DiscriminatorParams), ShapeGanError> {
    let file = TensorFile::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(file.meta.clone())
        .map_err(|e| ShapeGanError::BadCheckpoint(format!("bad metadata: {e}")))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(ShapeGanError::BadCheckpoint(format!(
            "format is {:?}, expected {CHECKPOINT_FORMAT:?}",
            meta.format
        )));
    }
    if meta.version != 1 {
        return Err(ShapeGanError::BadCheckpoint(format!(
            "unsupported version {}",
            meta.version
        )));
    }
    if meta.n_alpha != basis.n_alpha() || meta.n_beta != basis.n_beta() {
        return Err(ShapeGanError::BasisMismatch {
            ckpt_alpha: meta.n_alpha,
            ckpt_beta: meta.n_beta,
            basis_alpha: basis.n_alpha(),
            basis_beta: basis.n_beta(),
        });
    }
    let slope = meta.config.leaky_slope;
    let gen = GeneratorParams {
        w_c: read_matrix(&file, "gen.w_c")?,
        w_e: read_matrix(&file, "gen.w_e")?,
        b1: read_matrix(&file, "gen.b1")?,
        hidden: (2..=4)
            .map(|i| {
                Ok(Linear {
                    weight: read_matrix(&file, &format!("gen.h{i}.weight"))?,
                    bias: read_matrix(&file, &format!("gen.h{i}.bias"))?,
                })
            })
            .collect::<Result<_, ShapeGanError>>()?,
        out: Linear {
            weight: read_matrix(&file, "gen.out.weight")?,
            bias: read_matrix(&file, "gen.out.bias")?,
        },
        leaky_slope: slope,
        trained: meta.trained,
    };
    let disc = DiscriminatorParams {
        layers: (1..=4)
            .map(|i| {
                Ok(Linear {
                    weight: read_matrix(&file, &format!("disc.h{i}.weight"))?,
                    bias: read_matrix(&file, &format!("disc.h{i}.bias"))?,
                })
            })
            .collect::<Result<_, ShapeGanError>>()?,
        rf: Linear {
            weight: read_matrix(&file, "disc.rf.weight")?,
            bias: read_matrix(&file, "disc.rf.bias")?,
        },
        reg: Linear {
            weight: read_matrix(&file, "disc.reg.weight")?,
            bias: read_matrix(&file, "disc.reg.bias")?,
        },
        leaky_slope: slope,
    };
    if gen.n_c() != meta.n_alpha + meta.n_beta || disc.n_c() != gen.n_c() {
        return Err(ShapeGanError::BadCheckpoint(
            "tensor shapes disagree with recorded basis dims".into(),
        ));
    }
    Ok((meta.config, gen, disc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::synth::{build_synthetic_basis, BasisConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_basis() -> MorphableBasis {
        build_synthetic_basis(&BasisConfig {
            grid_w: 16,
            grid_h: 12,
            n_alpha: 12,
            n_beta: 12,
            ..BasisConfig::default()
        })
        .expect("valid test basis")
    }

    #[test]
    fn forward_output_dimension_matches_config() {
        let config = ShapeGanConfig {
            iterations: 1,
            ..ShapeGanConfig::full_scale()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen = GeneratorParams::init(&config, &mut rng);
        let c = vec![0.1; 144];
        let e = EmotionVector::one_hot(7, 2, 1.0).unwrap();
        let out = generator_forward(&gen, &c, &e).unwrap();
        assert_eq!(out.len(), 144);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let config = ShapeGanConfig::quick(10, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut gen = GeneratorParams::init(&config, &mut rng);
        gen.w_c.fill(0.0);
        gen.w_e.fill(0.0);
        for l in &mut gen.hidden {
            l.weight.fill(0.0);
        }
        gen.out.weight.fill(0.0);
        let e = EmotionVector::one_hot(3, 0, 1.0).unwrap();
        let out = generator_forward(&gen, &vec![0.5; 10], &e).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let config = ShapeGanConfig::quick(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen = GeneratorParams::init(&config, &mut rng);
        let c = vec![0.3; 8];
        let e = EmotionVector::one_hot(3, 1, 0.5).unwrap();
        let a = generator_forward(&gen, &c, &e).unwrap();
        let b = generator_forward(&gen, &c, &e).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn tape_forward_matches_concrete_forward() {
        let config = ShapeGanConfig::quick(6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen = GeneratorParams::init(&config, &mut rng);
        let c = Array2::from_shape_fn((5, 6), |_| rng.gen_range(-1.0..1.0));
        let e = Array2::from_shape_fn((5, 2), |_| rng.gen_range(0.0..1.0));
        let concrete = gen.forward_batch(&c, &e).unwrap();

        let mut tape = Tape::new();
        let nodes = gen.nodes(&mut tape, true);
        let cn = tape.constant(c);
        let en = tape.constant(e);
        let out = nodes.forward(&mut tape, cn, en);
        for (a, b) in concrete.iter().zip(tape.value(out).iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn disc_heads_have_expected_shapes() {
        let config = ShapeGanConfig::quick(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let disc = DiscriminatorParams::init(&config, &mut rng);
        let x = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        assert_eq!(disc.rf_batch(&x).unwrap().dim(), (4, 1));
        assert_eq!(disc.reg_batch(&x).unwrap().dim(), (4, 3));
    }

    #[test]
    fn edit_shape_requires_training_and_passes_pose_through() {
        let basis = tiny_basis();
        let config = ShapeGanConfig::quick(basis.n_coeff(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut gen = GeneratorParams::init(&config, &mut rng);
        let mut coeffs = FaceCoefficients::zeros(basis.n_alpha(), basis.n_beta());
        coeffs.pose = [0.1, -0.2, 0.3, 4.0, 5.0, 6.0];
        coeffs.delta = Some(vec![1.0, 2.0]);
        let e = EmotionVector::one_hot(3, 0, 1.0).unwrap();

        assert!(matches!(
            edit_shape(&gen, &coeffs, &e),
            Err(ShapeGanError::Untrained)
        ));

        gen.trained = true;
        let edited = edit_shape(&gen, &coeffs, &e).unwrap();
        assert_eq!(edited.pose, coeffs.pose);
        assert_eq!(edited.delta, coeffs.delta);
        assert_eq!(edited.gamma, coeffs.gamma);
        assert_eq!(edited.alpha.len(), basis.n_alpha());
        assert_eq!(edited.beta.len(), basis.n_beta());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let basis = tiny_basis();
        let config = ShapeGanConfig::quick(basis.n_coeff(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut gen = GeneratorParams::init(&config, &mut rng);
        gen.trained = true;
        let disc = DiscriminatorParams::init(&config, &mut rng);

        let dir = std::env::temp_dir().join("shape_gan_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.bin");
        save_checkpoint(&path, &config, &gen, &disc, &basis).unwrap();
        let (config2, gen2, disc2) = load_checkpoint(&path, &basis).unwrap();
        assert_eq!(config2.n_h, config.n_h);
        assert_eq!(gen2, gen);
        assert_eq!(disc2, disc);
        assert!(gen2.trained);
    }

    #[test]
    fn checkpoint_rejects_mismatched_basis() {
        let basis = tiny_basis();
        let config = ShapeGanConfig::quick(basis.n_coeff(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gen = GeneratorParams::init(&config, &mut rng);
        let disc = DiscriminatorParams::init(&config, &mut rng);

        let dir = std::env::temp_dir().join("shape_gan_ckpt_mismatch");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.bin");
        save_checkpoint(&path, &config, &gen, &disc, &basis).unwrap();

        let other = build_synthetic_basis(&BasisConfig {
            grid_w: 16,
            grid_h: 12,
            n_alpha: 10,
            n_beta: 12,
            ..BasisConfig::default()
        })
        .unwrap();
        match load_checkpoint(&path, &other) {
            Err(ShapeGanError::BasisMismatch {
                ckpt_alpha,
                basis_alpha,
                ..
            }) => {
                assert_eq!(ckpt_alpha, basis.n_alpha());
                assert_eq!(basis_alpha, other.n_alpha());
            }
            other => panic!("expected BasisMismatch, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_catches_bad_settings() {
        let basis = tiny_basis();
        let good = ShapeGanConfig::quick(basis.n_coeff(), 4);
        good.validate(&basis).unwrap();

        let mut odd_batch = good.clone();
        odd_batch.batch_size = 33;
        assert!(matches!(
            odd_batch.validate(&basis),
            Err(ShapeGanError::BadConfig(_))
        ));

        let mut neg_weight = good.clone();
        neg_weight.lambda_rec = -1.0;
        assert!(matches!(
            neg_weight.validate(&basis),
            Err(ShapeGanError::BadConfig(_))
        ));

        let mut wrong_dim = good;
        wrong_dim.n_c += 1;
        assert!(matches!(
            wrong_dim.validate(&basis),
            Err(ShapeGanError::DimMismatch { .. })
        ));
    }
}
