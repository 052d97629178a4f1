//! Loss terms of the coefficient transform GAN.
//!
//! Every vertex-space loss compares *differences* of reconstructed shapes, so
//! the basis mean cancels and only the basis columns matter:
//! `V(c1) - V(c2) = (c1 - c2) . B_combined^T` for row-vector batches. The
//! public loss functions evaluate on a fresh tape; training composes the same
//! graph builders with parameter leaves so the logged components and the
//! optimized objective are one and the same arithmetic.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DiscNodes, DiscriminatorParams, GenNodes, GeneratorParams, ShapeGanConfig,
            ShapeGanError};
use crate::morphable::MorphableBasis;
use crate::nn::leaky_relu;
use crate::tape::{lrelu_mask, NodeId, Tape};

/// A batch of flat coefficients with aligned emotion vectors. Depending on
/// the loss, the emotion rows are ground-truth labels (discriminator
/// regression) or editing targets (generator cycles).
#[derive(Debug, Clone)]
pub struct CoeffBatch {
    /// `B x n_c`.
    pub coeffs: Array2<f64>,
    /// `B x n_e`.
    pub emotions: Array2<f64>,
}

impl CoeffBatch {
    pub fn new(coeffs: Array2<f64>, emotions: Array2<f64>) -> Result<Self, ShapeGanError> {
        if coeffs.nrows() == 0 {
            return Err(ShapeGanError::EmptyBatch);
        }
        if coeffs.nrows() != emotions.nrows() {
            return Err(ShapeGanError::BatchSizeMismatch(
                coeffs.nrows(),
                emotions.nrows(),
            ));
        }
        Ok(Self { coeffs, emotions })
    }

    pub fn len(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Precomputed transposed basis blocks for the vertex-space losses. The mean
/// shape never appears because all losses consume shape differences.
#[derive(Debug, Clone)]
pub struct VertexOps {
    /// `n_c x 3V`: transpose of `[shape_basis | exp_basis]`.
    pub bt_combined: Array2<f64>,
    /// `n_alpha x 3V`: transpose of the shape block alone.
    pub bt_shape: Array2<f64>,
    /// `n_c x 3L`: transpose of (upper-lip rows − lower-lip rows) of the
    /// combined basis; zero-width when the basis defines no lip key points,
    /// which makes the mouth loss identically zero.
    pub dt_lip: Array2<f64>,
    pub n_alpha: usize,
}

impl VertexOps {
    pub fn new(basis: &MorphableBasis) -> Self {
        let n_a = basis.n_alpha();
        let n_b = basis.n_beta();
        let n_c = n_a + n_b;
        let three_v = basis.mean_shape.len();
        let mut combined = Array2::zeros((three_v, n_c));
        combined
            .slice_mut(ndarray::s![.., ..n_a])
            .assign(&basis.shape_basis);
        combined
            .slice_mut(ndarray::s![.., n_a..])
            .assign(&basis.exp_basis);

        let n_lip = basis.lip_upper_idx.len();
        let mut d_lip = Array2::zeros((3 * n_lip, n_c));
        for (k, (&u, &d)) in basis
            .lip_upper_idx
            .iter()
            .zip(&basis.lip_lower_idx)
            .enumerate()
        {
            for axis in 0..3 {
                for col in 0..n_c {
                    d_lip[[3 * k + axis, col]] =
                        combined[[3 * u + axis, col]] - combined[[3 * d + axis, col]];
                }
            }
        }

        Self {
            bt_combined: combined.t().to_owned(),
            bt_shape: basis.shape_basis.t().to_owned(),
            dt_lip: d_lip.t().to_owned(),
            n_alpha: n_a,
        }
    }
}

/// Batch mean of `||(a - b) . m||^2` — the shared shape of every
/// vertex-space term.
pub(crate) fn mean_sq_proj(tape: &mut Tape, a: NodeId, b: NodeId, m: NodeId) -> NodeId {
    let diff = tape.sub(a, b);
    let proj = tape.matmul(diff, m);
    let sq = tape.square(proj);
    let per_row = tape.sum_axis1(sq);
    tape.mean_all(per_row)
}

/// Batch mean of `||target - pred||^2`.
pub(crate) fn mean_sq_diff(tape: &mut Tape, target: NodeId, pred: NodeId) -> NodeId {
    let diff = tape.sub(target, pred);
    let sq = tape.square(diff);
    let per_row = tape.sum_axis1(sq);
    tape.mean_all(per_row)
}

/// `E[D_rf(real)] - E[D_rf(fake)]` on the tape.
pub(crate) fn adv_graph(tape: &mut Tape, disc: &DiscNodes, real: NodeId, fake: NodeId) -> NodeId {
    let r = disc.rf(tape, real);
    let f = disc.rf(tape, fake);
    let mr = tape.mean_all(r);
    let mf = tape.mean_all(f);
    tape.sub(mr, mf)
}

/// Wasserstein critic difference `E[D_rf(real)] - E[D_rf(fake)]`. The
/// discriminator objective uses its negation, the generator the value itself.
pub fn loss_adv(
    disc: &DiscriminatorParams,
    real: &Array2<f64>,
    fake: &Array2<f64>,
) -> Result<f64, ShapeGanError> {
    if real.nrows() == 0 || fake.nrows() == 0 {
        return Err(ShapeGanError::EmptyBatch);
    }
    let r = disc.rf_batch(real)?;
    let f = disc.rf_batch(fake)?;
    Ok(r.mean().expect("non-empty") - f.mean().expect("non-empty"))
}

/// Per-row interpolates `u * real + (1 - u) * fake`, one `u ~ U(0,1)` per
/// sample.
pub(crate) fn gp_interpolates(
    real: &Array2<f64>,
    fake: &Array2<f64>,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let mut x = Array2::zeros(real.raw_dim());
    for i in 0..real.nrows() {
        let u: f64 = rng.gen();
        for j in 0..real.ncols() {
            x[[i, j]] = u * real[[i, j]] + (1.0 - u) * fake[[i, j]];
        }
    }
    x
}

/// Input gradient `d D_rf / d x` at `x_hat`, built as explicit tape
/// operations. Activation masks come from a concrete forward pass and enter
/// the graph as constants; for the piecewise-linear leaky rectifier their own
/// derivative is zero almost everywhere, so gradients of this graph with
/// respect to the discriminator parameters carry the exact second-order
/// semantics the gradient penalty needs.
pub(crate) fn rf_input_grad_graph(
    tape: &mut Tape,
    params: &DiscriminatorParams,
    nodes: &DiscNodes,
    x_hat: &Array2<f64>,
) -> NodeId {
    let slope = params.leaky_slope;
    let mut h = x_hat.clone();
    let mut masks = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let pre = layer.forward(&h);
        masks.push(lrelu_mask(&pre, slope));
        h = leaky_relu(&pre, slope);
    }
    let b = x_hat.nrows();
    let ones = tape.constant(Array2::ones((b, 1)));
    let w_rf_t = tape.transpose(nodes.rf.weight);
    let mut g = tape.matmul(ones, w_rf_t);
    for (layer, mask) in nodes.layers.iter().zip(&masks).rev() {
        let m = tape.constant(mask.clone());
        let gm = tape.mul_elem(g, m);
        let wt = tape.transpose(layer.weight);
        g = tape.matmul(gm, wt);
    }
    g
}

/// `E[(||grad_x D_rf(x_hat)|| - 1)^2]` on the tape.
pub(crate) fn gp_graph(
    tape: &mut Tape,
    params: &DiscriminatorParams,
    nodes: &DiscNodes,
    x_hat: &Array2<f64>,
) -> NodeId {
    let g = rf_input_grad_graph(tape, params, nodes, x_hat);
    let sq = tape.square(g);
    let norm_sq = tape.sum_axis1(sq);
    // Epsilon keeps sqrt differentiable at an (unlikely) exactly-zero
    // gradient.
    let shifted = tape.add_scalar(norm_sq, 1e-12);
    let norm = tape.sqrt(shifted);
    let dev = tape.add_scalar(norm, -1.0);
    let dev_sq = tape.square(dev);
    tape.mean_all(dev_sq)
}

/// Gradient penalty at per-sample random interpolates between the real and
/// fake batches.
pub fn loss_gp(
    disc: &DiscriminatorParams,
    real: &Array2<f64>,
    fake: &Array2<f64>,
    seed: u64,
) -> Result<f64, ShapeGanError> {
    if real.nrows() == 0 {
        return Err(ShapeGanError::EmptyBatch);
    }
    if real.dim() != fake.dim() {
        return Err(ShapeGanError::BatchSizeMismatch(real.nrows(), fake.nrows()));
    }
    if real.ncols() != disc.n_c() {
        return Err(ShapeGanError::DimMismatch {
            what: "coefficient width",
            expected: disc.n_c(),
            got: real.ncols(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_hat = gp_interpolates(real, fake, &mut rng);
    let mut tape = Tape::new();
    let nodes = disc.nodes(&mut tape, false);
    let gp = gp_graph(&mut tape, disc, &nodes, &x_hat);
    Ok(tape.scalar(gp))
}

/// Discriminator regression loss: `E||e_true - D_reg(c)||^2`.
pub fn loss_reg_d(
    disc: &DiscriminatorParams,
    c_batch: &Array2<f64>,
    labels: &Array2<f64>,
) -> Result<f64, ShapeGanError> {
    if c_batch.nrows() == 0 {
        return Err(ShapeGanError::EmptyBatch);
    }
    if c_batch.nrows() != labels.nrows() {
        return Err(ShapeGanError::BatchSizeMismatch(
            c_batch.nrows(),
            labels.nrows(),
        ));
    }
    if labels.ncols() != disc.n_e() {
        return Err(ShapeGanError::DimMismatch {
            what: "emotion label width",
            expected: disc.n_e(),
            got: labels.ncols(),
        });
    }
    let pred = disc.reg_batch(c_batch)?;
    let diff = labels - &pred;
    Ok(diff.mapv(|d| d * d).sum() / c_batch.nrows() as f64)
}

/// Generator regression loss: `E||e - D_reg(G(c, e))||^2`.
pub fn loss_reg_g(
    disc: &DiscriminatorParams,
    gen: &GeneratorParams,
    c_batch: &Array2<f64>,
    e_batch: &Array2<f64>,
) -> Result<f64, ShapeGanError> {
    if c_batch.nrows() == 0 {
        return Err(ShapeGanError::EmptyBatch);
    }
    let fake = gen.forward_batch(c_batch, e_batch)?;
    let pred = disc.reg_batch(&fake)?;
    let diff = e_batch - &pred;
    Ok(diff.mapv(|d| d * d).sum() / c_batch.nrows() as f64)
}

/// Cycle-consistency loss in vertex space. The first expectation drives a
/// neutral sample to its paired target emotion and back to neutral; the
/// second drives a non-neutral sample to neutral and back to its own label.
pub(crate) fn rec_graph(
    tape: &mut Tape,
    gen: &GenNodes,
    vo: &VertexOps,
    neutral: &CoeffBatch,
    starred: &CoeffBatch,
) -> NodeId {
    let bt = tape.constant(vo.bt_combined.clone());
    let n_e = neutral.emotions.ncols();

    let c_n = tape.constant(neutral.coeffs.clone());
    let e_n = tape.constant(neutral.emotions.clone());
    let zeros_n = tape.constant(Array2::zeros((neutral.len(), n_e)));
    let fwd = gen.forward(tape, c_n, e_n);
    let cycled_n = gen.forward(tape, fwd, zeros_n);
    let term_n = mean_sq_proj(tape, c_n, cycled_n, bt);

    let c_s = tape.constant(starred.coeffs.clone());
    let e_s = tape.constant(starred.emotions.clone());
    let zeros_s = tape.constant(Array2::zeros((starred.len(), n_e)));
    let neutralized = gen.forward(tape, c_s, zeros_s);
    let cycled_s = gen.forward(tape, neutralized, e_s);
    let term_s = mean_sq_proj(tape, c_s, cycled_s, bt);

    tape.add(term_n, term_s)
}

/// Cycle-consistency loss (see [`rec_graph`]). `neutral` pairs each sample
/// with a random non-neutral target; `starred` carries its own label.
pub fn loss_rec(
    gen: &GeneratorParams,
    basis: &MorphableBasis,
    neutral: &CoeffBatch,
    starred: &CoeffBatch,
) -> Result<f64, ShapeGanError> {
    check_gen_batch(gen, neutral)?;
    check_gen_batch(gen, starred)?;
    let vo = VertexOps::new(basis);
    let mut tape = Tape::new();
    let nodes = gen.nodes(&mut tape, false);
    let loss = rec_graph(&mut tape, &nodes, &vo, neutral, starred);
    Ok(tape.scalar(loss))
}

/// Mouth preservation loss: difference of (upper − lower) lip key-point
/// offsets between input and transformed coefficients.
pub(crate) fn mouth_graph(
    tape: &mut Tape,
    gen: &GenNodes,
    vo: &VertexOps,
    neutral: &CoeffBatch,
    starred: &CoeffBatch,
) -> NodeId {
    let dt = tape.constant(vo.dt_lip.clone());
    let n_e = neutral.emotions.ncols();

    let c_n = tape.constant(neutral.coeffs.clone());
    let e_n = tape.constant(neutral.emotions.clone());
    let edited = gen.forward(tape, c_n, e_n);
    let term_n = mean_sq_proj(tape, c_n, edited, dt);

    let c_s = tape.constant(starred.coeffs.clone());
    let zeros_s = tape.constant(Array2::zeros((starred.len(), n_e)));
    let neutralized = gen.forward(tape, c_s, zeros_s);
    let term_s = mean_sq_proj(tape, c_s, neutralized, dt);

    tape.add(term_n, term_s)
}

/// Mouth preservation loss (see [`mouth_graph`]). Uniform translations of
/// the whole mouth leave it unchanged: only the upper-minus-lower relative
/// offsets enter.
pub fn loss_mouth(
    gen: &GeneratorParams,
    basis: &MorphableBasis,
    neutral: &CoeffBatch,
    starred: &CoeffBatch,
) -> Result<f64, ShapeGanError> {
    check_gen_batch(gen, neutral)?;
    check_gen_batch(gen, starred)?;
    let vo = VertexOps::new(basis);
    let mut tape = Tape::new();
    let nodes = gen.nodes(&mut tape, false);
    let loss = mouth_graph(&mut tape, &nodes, &vo, neutral, starred);
    Ok(tape.scalar(loss))
}

/// Identity-deformation regularizer: vertex difference of the shapes rebuilt
/// from the original and transformed alpha blocks alone.
pub(crate) fn r_graph(
    tape: &mut Tape,
    gen: &GenNodes,
    vo: &VertexOps,
    batch: &CoeffBatch,
) -> NodeId {
    let bts = tape.constant(vo.bt_shape.clone());
    let c = tape.constant(batch.coeffs.clone());
    let e = tape.constant(batch.emotions.clone());
    let edited = gen.forward(tape, c, e);
    let a = tape.gather_cols(c, 0, vo.n_alpha);
    let a_edited = tape.gather_cols(edited, 0, vo.n_alpha);
    mean_sq_proj(tape, a, a_edited, bts)
}

/// Identity-deformation regularizer (see [`r_graph`]).
pub fn loss_r(
    gen: &GeneratorParams,
    basis: &MorphableBasis,
    batch: &CoeffBatch,
) -> Result<f64, ShapeGanError> {
    check_gen_batch(gen, batch)?;
    if basis.n_alpha() == 0 {
        return Ok(0.0);
    }
    let vo = VertexOps::new(basis);
    let mut tape = Tape::new();
    let nodes = gen.nodes(&mut tape, false);
    let loss = r_graph(&mut tape, &nodes, &vo, batch);
    Ok(tape.scalar(loss))
}

fn check_gen_batch(gen: &GeneratorParams, batch: &CoeffBatch) -> Result<(), ShapeGanError> {
    if batch.is_empty() {
        return Err(ShapeGanError::EmptyBatch);
    }
    if batch.coeffs.ncols() != gen.n_c() {
        return Err(ShapeGanError::DimMismatch {
            what: "coefficient width",
            expected: gen.n_c(),
            got: batch.coeffs.ncols(),
        });
    }
    if batch.emotions.ncols() != gen.n_e() {
        return Err(ShapeGanError::DimMismatch {
            what: "emotion width",
            expected: gen.n_e(),
            got: batch.emotions.ncols(),
        });
    }
    Ok(())
}

/// The scalar components of one training step, as logged.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub adv: f64,
    pub gp: f64,
    pub reg_d: f64,
    pub reg_g: f64,
    pub rec: f64,
    pub mouth: f64,
    pub r: f64,
}

/// Weighted discriminator and generator objectives
/// `(-adv + λ_gp gp + λ_reg reg_d,  adv + λ_reg reg_g + λ_rec rec + λ_mouth mouth + λ_r r)`.
pub fn total_losses(config: &ShapeGanConfig, comp: &LossComponents) -> (f64, f64) {
    let l_d = -comp.adv + config.lambda_gp * comp.gp + config.lambda_reg * comp.reg_d;
    let l_g = comp.adv
        + config.lambda_reg * comp.reg_g
        + config.lambda_rec * comp.rec
        + config.lambda_mouth * comp.mouth
        + config.lambda_r * comp.r;
    (l_d, l_g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::{reconstruct_shape, FaceCoefficients};
    use crate::nn::Linear;
    use ndarray::{array, Array1};

    /// A discriminator whose rf head computes exactly `<w, x>`, built with the
    /// paired-lane trick: each layer carries `(t, -t)` so that
    /// `lrelu(t) - lrelu(-t) = (1 + slope) * t` regardless of sign.
    fn linear_rf_disc(w: &[f64], n_e: usize, slope: f64) -> DiscriminatorParams {
        let n_c = w.len();
        let n_h = 4;
        let mut first = Linear::zeros(n_c, n_h);
        for (i, &wi) in w.iter().enumerate() {
            first.weight[[i, 0]] = wi;
            first.weight[[i, 1]] = -wi;
        }
        let mut pass = Linear::zeros(n_h, n_h);
        pass.weight[[0, 0]] = 1.0;
        pass.weight[[1, 0]] = -1.0;
        pass.weight[[0, 1]] = -1.0;
        pass.weight[[1, 1]] = 1.0;
        let mut rf = Linear::zeros(n_h, 1);
        let k = (1.0 + slope).powi(4).recip();
        rf.weight[[0, 0]] = k;
        rf.weight[[1, 0]] = -k;
        DiscriminatorParams {
            layers: vec![first, pass.clone(), pass.clone(), pass],
            rf,
            reg: Linear::zeros(n_h, n_e),
            leaky_slope: slope,
        }
    }

    /// A generator computing exactly `G(c, e) = c + offset`, using slope-1
    /// activations (the identity function), so the map is bit-exact.
    fn offset_gen(n_c: usize, n_e: usize, offset: &[f64]) -> GeneratorParams {
        assert_eq!(offset.len(), n_c);
        let eye = |n: usize| {
            let mut l = Linear::zeros(n, n);
            for i in 0..n {
                l.weight[[i, i]] = 1.0;
            }
            l
        };
        let mut out = eye(n_c);
        for (j, &o) in offset.iter().enumerate() {
            out.bias[[0, j]] = o;
        }
        let mut w_c = Array2::zeros((n_c, n_c));
        for i in 0..n_c {
            w_c[[i, i]] = 1.0;
        }
        GeneratorParams {
            w_c,
            w_e: Array2::zeros((n_e, n_c)),
            b1: Array2::zeros((1, n_c)),
            hidden: vec![eye(n_c), eye(n_c), eye(n_c)],
            out,
            leaky_slope: 1.0,
            trained: true,
        }
    }

    fn identity_gen(n_c: usize, n_e: usize) -> GeneratorParams {
        offset_gen(n_c, n_e, &vec![0.0; n_c])
    }

    /// A generator returning a fixed vector regardless of input: all weights
    /// zero, output bias = the constant.
    fn constant_gen(n_c: usize, n_e: usize, n_h: usize, value: &[f64]) -> GeneratorParams {
        let mut out = Linear::zeros(n_h, n_c);
        for (j, &v) in value.iter().enumerate() {
            out.bias[[0, j]] = v;
        }
        GeneratorParams {
            w_c: Array2::zeros((n_c, n_h)),
            w_e: Array2::zeros((n_e, n_h)),
            b1: Array2::zeros((1, n_h)),
            hidden: vec![
                Linear::zeros(n_h, n_h),
                Linear::zeros(n_h, n_h),
                Linear::zeros(n_h, n_h),
            ],
            out,
            leaky_slope: 0.2,
            trained: true,
        }
    }

    /// Minimal basis built field-by-field for hand computations.
    fn hand_basis(
        mean: Vec<f64>,
        shape_cols: Vec<Vec<f64>>,
        exp_cols: Vec<Vec<f64>>,
        lip_upper: Vec<usize>,
        lip_lower: Vec<usize>,
    ) -> MorphableBasis {
        let three_v = mean.len();
        let v = three_v / 3;
        let col_mat = |cols: &[Vec<f64>]| {
            let mut m = Array2::zeros((three_v, cols.len()));
            for (j, col) in cols.iter().enumerate() {
                for (i, &x) in col.iter().enumerate() {
                    m[[i, j]] = x;
                }
            }
            m
        };
        MorphableBasis {
            mean_shape: Array1::from_vec(mean),
            shape_basis: col_mat(&shape_cols),
            exp_basis: col_mat(&exp_cols),
            faces: Vec::new(),
            uv_coords: Array2::zeros((v, 2)),
            lip_upper_idx: lip_upper,
            lip_lower_idx: lip_lower,
            landmark_idx: vec![0, 0],
            mouth_landmark_idx: Vec::new(),
        }
    }

    #[test]
    fn adv_zero_disc_scores_zero() {
        let disc = DiscriminatorParams {
            layers: vec![
                Linear::zeros(3, 4),
                Linear::zeros(4, 4),
                Linear::zeros(4, 4),
                Linear::zeros(4, 4),
            ],
            rf: Linear::zeros(4, 1),
            reg: Linear::zeros(4, 2),
            leaky_slope: 0.2,
        };
        let real = array![[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]];
        let fake = array![[0.0, 0.0, 1.0], [4.0, 4.0, 4.0]];
        assert_eq!(loss_adv(&disc, &real, &fake).unwrap(), 0.0);
    }

    #[test]
    fn adv_linear_disc_matches_hand_computed_mean_difference() {
        let disc = linear_rf_disc(&[0.5, -0.25], 2, 0.2);
        let real = array![[1.0, 2.0], [3.0, 4.0]];
        let fake = array![[0.0, 1.0], [-1.0, 0.0]];
        // <w, real> = {0, 0.5}, mean 0.25; <w, fake> = {-0.25, -0.5}, mean -0.375.
        let got = loss_adv(&disc, &real, &fake).unwrap();
        assert!((got - 0.625).abs() < 1e-9, "{got}");

        let swapped = loss_adv(&disc, &fake, &real).unwrap();
        assert!((swapped + got).abs() < 1e-12, "antisymmetry violated");
    }

    #[test]
    fn gp_unit_gradient_disc_scores_zero() {
        let disc = linear_rf_disc(&[0.6, 0.8], 2, 0.2);
        let real = array![[0.3, -0.4], [1.0, 2.0], [-0.7, 0.2]];
        let fake = array![[0.1, 0.9], [-1.5, 0.4], [2.0, -2.0]];
        let gp = loss_gp(&disc, &real, &fake, 11).unwrap();
        assert!(gp.abs() < 1e-9, "{gp}");
    }

    #[test]
    fn gp_gradient_norm_two_scores_one() {
        let disc = linear_rf_disc(&[2.0, 0.0], 2, 0.2);
        let real = array![[0.3, -0.4], [1.0, 2.0]];
        let fake = array![[0.1, 0.9], [-1.5, 0.4]];
        let gp = loss_gp(&disc, &real, &fake, 5).unwrap();
        assert!((gp - 1.0).abs() < 1e-9, "{gp}");
    }

    #[test]
    fn gp_input_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let config = ShapeGanConfig {
            n_h: 12,
            ..ShapeGanConfig::quick(6, 2)
        };
        let disc = DiscriminatorParams::init(&config, &mut rng);
        let x_hat = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));

        let mut tape = Tape::new();
        let nodes = disc.nodes(&mut tape, false);
        let g = rf_input_grad_graph(&mut tape, &disc, &nodes, &x_hat);
        let analytic = tape.value(g).clone();

        let h = 1e-4;
        for i in 0..x_hat.nrows() {
            for j in 0..x_hat.ncols() {
                let mut xp = x_hat.clone();
                xp[[i, j]] += h;
                let mut xm = x_hat.clone();
                xm[[i, j]] -= h;
                let fp = disc.rf_batch(&xp).unwrap()[[i, 0]];
                let fm = disc.rf_batch(&xm).unwrap()[[i, 0]];
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic[[i, j]];
                assert!(
                    (a - fd).abs() <= 1e-3 * (1.0 + fd.abs()),
                    "grad[{i},{j}] analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn gp_parameter_gradients_match_finite_differences() {
        // The decisive check for the constant-mask construction: d(GP)/dW must
        // equal central differences of the penalty as a function of W.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        let config = ShapeGanConfig {
            n_h: 8,
            ..ShapeGanConfig::quick(4, 2)
        };
        let disc = DiscriminatorParams::init(&config, &mut rng);
        let real = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let fake = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let seed = 77;
        let mut prep_rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x_hat = gp_interpolates(&real, &fake, &mut prep_rng);

        let mut tape = Tape::new();
        let nodes = disc.nodes(&mut tape, true);
        let gp = gp_graph(&mut tape, &disc, &nodes, &x_hat);
        tape.backward(gp);
        let analytic = tape.grad(nodes.layers[1].weight);

        let h = 1e-5;
        for i in 0..3 {
            for j in 0..3 {
                let mut dp = disc.clone();
                dp.layers[1].weight[[i, j]] += h;
                let mut dm = disc.clone();
                dm.layers[1].weight[[i, j]] -= h;
                let fp = loss_gp(&dp, &real, &fake, seed).unwrap();
                let fm = loss_gp(&dm, &real, &fake, seed).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic[[i, j]];
                assert!(
                    (a - fd).abs() <= 1e-4 * (1.0 + fd.abs()),
                    "dGP/dW[{i},{j}] analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn reg_losses_trivial_cases() {
        // D_reg outputs exactly the label -> 0.
        let mut disc = linear_rf_disc(&[1.0, 0.0], 2, 0.2);
        disc.reg.bias[[0, 0]] = 0.3;
        disc.reg.bias[[0, 1]] = -0.1;
        let c = array![[0.5, 0.5], [1.0, -1.0]];
        let labels = array![[0.3, -0.1], [0.3, -0.1]];
        let l = loss_reg_d(&disc, &c, &labels).unwrap();
        assert!(l.abs() < 1e-18, "{l}");

        // D_reg = 0, unit-vector labels -> 1.
        disc.reg.bias.fill(0.0);
        let unit = array![[1.0, 0.0], [0.0, 1.0]];
        let l = loss_reg_d(&disc, &c, &unit).unwrap();
        assert!((l - 1.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn reg_losses_match_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let config = ShapeGanConfig {
            n_h: 8,
            ..ShapeGanConfig::quick(5, 3)
        };
        let disc = DiscriminatorParams::init(&config, &mut rng);
        let gen = GeneratorParams::init(&config, &mut rng);
        let c = Array2::from_shape_fn((6, 5), |_| rng.gen_range(-1.0..1.0));
        let e = Array2::from_shape_fn((6, 3), |_| rng.gen_range(0.0..1.0));

        let got_d = loss_reg_d(&disc, &c, &e).unwrap();
        let pred = disc.reg_batch(&c).unwrap();
        let mut want = 0.0;
        for i in 0..6 {
            for j in 0..3 {
                let d = e[[i, j]] - pred[[i, j]];
                want += d * d;
            }
        }
        want /= 6.0;
        assert!((got_d - want).abs() < 1e-9, "{got_d} vs {want}");

        let got_g = loss_reg_g(&disc, &gen, &c, &e).unwrap();
        let fake = gen.forward_batch(&c, &e).unwrap();
        let pred = disc.reg_batch(&fake).unwrap();
        let mut want = 0.0;
        for i in 0..6 {
            for j in 0..3 {
                let d = e[[i, j]] - pred[[i, j]];
                want += d * d;
            }
        }
        want /= 6.0;
        assert!((got_g - want).abs() < 1e-9, "{got_g} vs {want}");
    }

    #[test]
    fn rec_identity_generator_is_exactly_zero() {
        let basis = hand_basis(
            vec![0.0; 6],
            vec![vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]],
            vec![vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]],
            vec![],
            vec![],
        );
        let gen = identity_gen(2, 2);
        let neutral = CoeffBatch::new(array![[0.2, -0.3], [1.0, 0.5]], array![[1.0, 0.0], [0.0, 1.0]])
            .unwrap();
        let starred =
            CoeffBatch::new(array![[0.7, 0.1]], array![[0.0, 1.0]]).unwrap();
        assert_eq!(loss_rec(&gen, &basis, &neutral, &starred).unwrap(), 0.0);
        assert_eq!(loss_mouth(&gen, &basis, &neutral, &starred).unwrap(), 0.0);
        assert_eq!(loss_r(&gen, &basis, &neutral).unwrap(), 0.0);
    }

    #[test]
    fn rec_one_vertex_hand_case() {
        // Single vertex, mean (0,0,0), single shape column (1,0,0), no
        // expression columns. The generator maps everything to alpha = 3.
        let basis = hand_basis(vec![0.0; 3], vec![vec![1.0, 0.0, 0.0]], vec![], vec![], vec![]);
        let gen = constant_gen(1, 1, 4, &[3.0]);
        // Neutral sample alpha = 1: cycle lands at 3, ||(1,0,0)-(3,0,0)||^2 = 4.
        let neutral = CoeffBatch::new(array![[1.0]], array![[1.0]]).unwrap();
        // Starred sample alpha = 3: cycle lands at 3 again, contributes 0.
        let starred = CoeffBatch::new(array![[3.0]], array![[1.0]]).unwrap();
        let got = loss_rec(&gen, &basis, &neutral, &starred).unwrap();
        assert!((got - 4.0).abs() < 1e-12, "{got}");

        let got_r = loss_r(&gen, &basis, &neutral).unwrap();
        assert!((got_r - 4.0).abs() < 1e-12, "{got_r}");
    }

    #[test]
    fn r_is_insensitive_to_expression_changes() {
        // Basis with one alpha and one beta column; generator keeps alpha and
        // wrecks beta. The identity regularizer must not notice.
        let basis = hand_basis(
            vec![0.0; 3],
            vec![vec![1.0, 0.0, 0.0]],
            vec![vec![0.0, 1.0, 0.0]],
            vec![],
            vec![],
        );
        let gen = offset_gen(2, 1, &[0.0, 99.0]);
        let batch = CoeffBatch::new(array![[0.4, 0.2]], array![[1.0]]).unwrap();
        assert_eq!(loss_r(&gen, &basis, &batch).unwrap(), 0.0);
        assert!(loss_rec(&gen, &basis, &batch, &batch).unwrap() > 1.0);
    }

    #[test]
    fn mouth_two_keypoint_hand_case() {
        // Upper lip vertex at (0,1,0), lower at origin; one expression column
        // lifts the upper lip by +1 in y. G maps everything to beta = 1, so
        // the relative offset goes (0,1,0) -> (0,2,0): loss 1 from the neutral
        // term, 0 from the starred term (already at the target).
        let basis = hand_basis(
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            vec![],
            vec![vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]],
            vec![0],
            vec![1],
        );
        let gen = constant_gen(1, 1, 4, &[1.0]);
        let neutral = CoeffBatch::new(array![[0.0]], array![[1.0]]).unwrap();
        let starred = CoeffBatch::new(array![[1.0]], array![[1.0]]).unwrap();
        let got = loss_mouth(&gen, &basis, &neutral, &starred).unwrap();
        assert!((got - 1.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn mouth_ignores_uniform_lateral_shifts() {
        // Four lip vertices (two pairs). Expression column 0 translates the
        // whole mouth in x; column 1 lifts only the upper lip. A generator
        // adding the lateral column leaves the loss at zero; adding the
        // asymmetric column does not.
        let mut lateral = vec![0.0; 12];
        for v in 0..4 {
            lateral[3 * v] = 1.0;
        }
        let mut lift_upper = vec![0.0; 12];
        lift_upper[1] = 1.0;
        lift_upper[4] = 1.0;
        let basis = hand_basis(
            vec![0.0; 12],
            vec![],
            vec![lateral, lift_upper],
            vec![0, 1],
            vec![2, 3],
        );
        let batch = CoeffBatch::new(array![[0.3, -0.2]], array![[1.0]]).unwrap();

        let shift = offset_gen(2, 1, &[5.0, 0.0]);
        assert_eq!(loss_mouth(&shift, &basis, &batch, &batch).unwrap(), 0.0);

        let lift = offset_gen(2, 1, &[0.0, 1.0]);
        let got = loss_mouth(&lift, &basis, &batch, &batch).unwrap();
        // Both terms move the pair-0 upper lip by (0,1,0) and pair 1 by the
        // same: 2 pairs x 1.0 squared, two expectation terms.
        assert!((got - 4.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn vertex_losses_match_reconstruction_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        // Random small basis: 4 vertices, 2 alpha, 3 beta, one lip pair.
        let rand_col = |rng: &mut rand_chacha::ChaCha8Rng| {
            (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()
        };
        let basis = hand_basis(
            (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            vec![rand_col(&mut rng), rand_col(&mut rng)],
            vec![rand_col(&mut rng), rand_col(&mut rng), rand_col(&mut rng)],
            vec![1],
            vec![3],
        );
        let config = ShapeGanConfig {
            n_h: 8,
            ..ShapeGanConfig::quick(5, 2)
        };
        let gen = GeneratorParams::init(&config, &mut rng);
        let batch_of = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
            CoeffBatch::new(
                Array2::from_shape_fn((n, 5), |_| rng.gen_range(-1.0..1.0)),
                Array2::from_shape_fn((n, 2), |_| rng.gen_range(0.0..1.0)),
            )
            .unwrap()
        };
        let neutral = batch_of(&mut rng, 4);
        let starred = batch_of(&mut rng, 3);

        let coeffs_of = |row: ndarray::ArrayView1<f64>| {
            FaceCoefficients::zeros(2, 3)
                .with_flat(row.as_slice().unwrap())
                .unwrap()
        };
        let verts =
            |flat: &Array2<f64>, i: usize| reconstruct_shape(&basis, &coeffs_of(flat.row(i))).unwrap();

        // Oracle for loss_rec: full reconstruction including the mean.
        let zeros_n = Array2::zeros((neutral.len(), 2));
        let zeros_s = Array2::zeros((starred.len(), 2));
        let fwd = gen.forward_batch(&neutral.coeffs, &neutral.emotions).unwrap();
        let cyc_n = gen.forward_batch(&fwd, &zeros_n).unwrap();
        let neu = gen.forward_batch(&starred.coeffs, &zeros_s).unwrap();
        let cyc_s = gen.forward_batch(&neu, &starred.emotions).unwrap();
        let mut want = 0.0;
        for i in 0..neutral.len() {
            let a = verts(&neutral.coeffs, i);
            let b = verts(&cyc_n, i);
            want += (&a - &b).mapv(|d| d * d).sum();
        }
        let mut term = 0.0;
        for i in 0..starred.len() {
            let a = verts(&starred.coeffs, i);
            let b = verts(&cyc_s, i);
            term += (&a - &b).mapv(|d| d * d).sum();
        }
        let want = want / neutral.len() as f64 + term / starred.len() as f64;
        let got = loss_rec(&gen, &basis, &neutral, &starred).unwrap();
        assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()), "{got} vs {want}");

        // Oracle for loss_mouth: reconstructed lip key points.
        let rel = |flat: &Array2<f64>, i: usize| {
            let v = verts(flat, i);
            [
                v[[1, 0]] - v[[3, 0]],
                v[[1, 1]] - v[[3, 1]],
                v[[1, 2]] - v[[3, 2]],
            ]
        };
        let mut want_m = 0.0;
        for i in 0..neutral.len() {
            let a = rel(&neutral.coeffs, i);
            let b = rel(&fwd, i);
            want_m += (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<f64>();
        }
        want_m /= neutral.len() as f64;
        let mut term_m = 0.0;
        for i in 0..starred.len() {
            let a = rel(&starred.coeffs, i);
            let b = rel(&neu, i);
            term_m += (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<f64>();
        }
        want_m += term_m / starred.len() as f64;
        let got_m = loss_mouth(&gen, &basis, &neutral, &starred).unwrap();
        assert!(
            (got_m - want_m).abs() < 1e-9 * (1.0 + want_m.abs()),
            "{got_m} vs {want_m}"
        );

        // Oracle for loss_r: alpha-only reconstructions.
        let alpha_only = |flat: &Array2<f64>, i: usize| {
            let mut c = coeffs_of(flat.row(i));
            c.beta.iter_mut().for_each(|b| *b = 0.0);
            reconstruct_shape(&basis, &c).unwrap()
        };
        let mut want_r = 0.0;
        for i in 0..neutral.len() {
            let a = alpha_only(&neutral.coeffs, i);
            let b = alpha_only(&fwd, i);
            want_r += (&a - &b).mapv(|d| d * d).sum();
        }
        want_r /= neutral.len() as f64;
        let got_r = loss_r(&gen, &basis, &neutral).unwrap();
        assert!(
            (got_r - want_r).abs() < 1e-9 * (1.0 + want_r.abs()),
            "{got_r} vs {want_r}"
        );
    }

    #[test]
    fn total_losses_weighted_sums() {
        let config = ShapeGanConfig::full_scale();
        let ones = LossComponents {
            adv: 1.0,
            gp: 1.0,
            reg_d: 1.0,
            reg_g: 1.0,
            rec: 1.0,
            mouth: 1.0,
            r: 1.0,
        };
        let (l_d, l_g) = total_losses(&config, &ones);
        assert_eq!(l_d, -1.0 + 10.0 + 20.0);
        assert_eq!(l_g, 1.0 + 20.0 + 5e3 + 1.0 + 1e3);

        let zeros = LossComponents::default();
        assert_eq!(total_losses(&config, &zeros), (0.0, 0.0));

        // Affine combination with randomized components and weights.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(51);
        for _ in 0..20 {
            let comp = LossComponents {
                adv: rng.gen_range(-2.0..2.0),
                gp: rng.gen_range(0.0..2.0),
                reg_d: rng.gen_range(0.0..2.0),
                reg_g: rng.gen_range(0.0..2.0),
                rec: rng.gen_range(0.0..2.0),
                mouth: rng.gen_range(0.0..2.0),
                r: rng.gen_range(0.0..2.0),
            };
            let mut cfg = ShapeGanConfig::quick(4, 2);
            cfg.lambda_gp = rng.gen_range(0.0..5.0);
            cfg.lambda_reg = rng.gen_range(0.0..5.0);
            cfg.lambda_rec = rng.gen_range(0.0..5.0);
            cfg.lambda_mouth = rng.gen_range(0.0..5.0);
            cfg.lambda_r = rng.gen_range(0.0..5.0);
            let (l_d, l_g) = total_losses(&cfg, &comp);
            let want_d = -comp.adv + cfg.lambda_gp * comp.gp + cfg.lambda_reg * comp.reg_d;
            let want_g = comp.adv
                + cfg.lambda_reg * comp.reg_g
                + cfg.lambda_rec * comp.rec
                + cfg.lambda_mouth * comp.mouth
                + cfg.lambda_r * comp.r;
            assert!((l_d - want_d).abs() < 1e-12);
            assert!((l_g - want_g).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_construction_errors() {
        assert!(matches!(
            CoeffBatch::new(Array2::zeros((0, 3)), Array2::zeros((0, 2))),
            Err(ShapeGanError::EmptyBatch)
        ));
        assert!(matches!(
            CoeffBatch::new(Array2::zeros((2, 3)), Array2::zeros((3, 2))),
            Err(ShapeGanError::BatchSizeMismatch(2, 3))
        ));
    }
}
