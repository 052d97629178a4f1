//! WGAN-GP training loop for the coefficient transform.
//!
//! Each iteration runs `critic_steps` discriminator updates followed by one
//! generator update. Generator batches mix the two cycle directions half and
//! half: neutral sources driven to a random non-neutral target (drawn from
//! the empirical label distribution) and non-neutral sources driven to
//! neutral. Fake samples for the critic are the first-generation outputs of
//! both halves. Everything is driven by one seeded stream, so a fixed seed
//! reproduces the run bit for bit.

use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{
    adv_graph, gp_graph, gp_interpolates, mean_sq_diff, mouth_graph, r_graph, rec_graph,
    total_losses, CoeffBatch, LossComponents, VertexOps,
};
use super::{DiscriminatorParams, GeneratorParams, ShapeGanConfig, ShapeGanError};
use crate::morphable::synth::LabeledCoeffs;
use crate::morphable::MorphableBasis;
use crate::nn::{Adam, AdamConfig};
use crate::tape::Tape;

/// Loss components and timing of one training iteration. Discriminator
/// figures come from the last critic step of the iteration.
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub iteration: usize,
    pub adv: f64,
    pub gp: f64,
    pub reg_d: f64,
    pub loss_d: f64,
    pub adv_g: f64,
    pub reg_g: f64,
    pub rec: f64,
    pub mouth: f64,
    pub r: f64,
    pub loss_g: f64,
    /// Wall time since training started, seconds.
    pub elapsed_s: f64,
}

/// Per-iteration records plus a sparse validation track of the
/// discriminator's emotion-regression MSE on a held-out batch.
#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub records: Vec<IterationRecord>,
    /// `(iteration, mse)` sampled every 100 iterations and at the end.
    pub validation_reg_mse: Vec<(usize, f64)>,
}

impl TrainingLog {
    pub fn save_csv(&self, path: impl AsRef<std::path::Path>) -> Result<(), ShapeGanError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "iteration", "adv", "gp", "reg_d", "loss_d", "adv_g", "reg_g", "rec", "mouth", "r",
            "loss_g", "elapsed_s",
        ])?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                r.adv.to_string(),
                r.gp.to_string(),
                r.reg_d.to_string(),
                r.loss_d.to_string(),
                r.adv_g.to_string(),
                r.reg_g.to_string(),
                r.rec.to_string(),
                r.mouth.to_string(),
                r.r.to_string(),
                r.loss_g.to_string(),
                r.elapsed_s.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

struct PreparedData {
    coeffs: Array2<f64>,
    labels: Array2<f64>,
    neutral_rows: Vec<usize>,
    starred_rows: Vec<usize>,
}

fn prepare(items: &[LabeledCoeffs], config: &ShapeGanConfig) -> Result<PreparedData, ShapeGanError> {
    if items.is_empty() {
        return Err(ShapeGanError::EmptyBatch);
    }
    let n = items.len();
    let mut coeffs = Array2::zeros((n, config.n_c));
    let mut labels = Array2::zeros((n, config.n_e));
    let mut neutral_rows = Vec::new();
    let mut starred_rows = Vec::new();
    let mut seen = vec![false; config.n_e];
    for (i, item) in items.iter().enumerate() {
        let flat = item.coeffs.flat();
        if flat.len() != config.n_c {
            return Err(ShapeGanError::DimMismatch {
                what: "sample coefficient length",
                expected: config.n_c,
                got: flat.len(),
            });
        }
        if item.emotion.len() != config.n_e {
            return Err(ShapeGanError::DimMismatch {
                what: "sample emotion length",
                expected: config.n_e,
                got: item.emotion.len(),
            });
        }
        coeffs.row_mut(i).assign(&flat);
        for (j, &v) in item.emotion.values().iter().enumerate() {
            labels[[i, j]] = v;
        }
        match item.emotion.argmax() {
            None => neutral_rows.push(i),
            Some(y) => {
                seen[y] = true;
                starred_rows.push(i);
            }
        }
    }
    let missing: Vec<usize> = (0..config.n_e).filter(|&y| !seen[y]).collect();
    if !missing.is_empty() {
        return Err(ShapeGanError::MissingEmotions(missing));
    }
    if neutral_rows.is_empty() {
        return Err(ShapeGanError::MissingNeutral);
    }
    Ok(PreparedData {
        coeffs,
        labels,
        neutral_rows,
        starred_rows,
    })
}

impl PreparedData {
    fn len(&self) -> usize {
        self.coeffs.nrows()
    }

    /// Gather rows (with replacement sampling done by the caller).
    fn gather(&self, rows: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let mut c = Array2::zeros((rows.len(), self.coeffs.ncols()));
        let mut e = Array2::zeros((rows.len(), self.labels.ncols()));
        for (k, &i) in rows.iter().enumerate() {
            c.row_mut(k).assign(&self.coeffs.row(i));
            e.row_mut(k).assign(&self.labels.row(i));
        }
        (c, e)
    }
}

fn sample_rows(rng: &mut ChaCha8Rng, pool: &[usize], n: usize) -> Vec<usize> {
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

fn vstack(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(0), &[a.view(), b.view()]).expect("equal widths")
}

/// Train the generator/discriminator pair on labeled coefficients. Returns
/// the trained parameters and the per-iteration loss log; deterministic for a
/// fixed seed.
pub fn train_shape_gan(
    items: &[LabeledCoeffs],
    basis: &MorphableBasis,
    config: &ShapeGanConfig,
    seed: u64,
) -> Result<(GeneratorParams, DiscriminatorParams, TrainingLog), ShapeGanError> {
    config.validate(basis)?;
    let data = prepare(items, config)?;
    let vo = VertexOps::new(basis);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = GeneratorParams::init(config, &mut rng);
    let mut disc = DiscriminatorParams::init(config, &mut rng);
    let mut adam_g = Adam::new(AdamConfig::new(config.lr, config.beta1, config.beta2));
    let mut adam_d = Adam::new(AdamConfig::new(config.lr, config.beta1, config.beta2));

    // Held-out-style validation batch for the regression-quality track (the
    // corpus is sampled with replacement during training, so "held out" here
    // means a fixed probe, not excluded data).
    let val_rows = sample_rows(&mut rng, &(0..data.len()).collect::<Vec<_>>(), 256.min(data.len()));
    let (val_c, val_e) = data.gather(&val_rows);

    let half = config.batch_size / 2;
    let all_rows: Vec<usize> = (0..data.len()).collect();
    let start = Instant::now();
    let mut log = TrainingLog::default();

    for iteration in 1..=config.iterations {
        let mut comp = LossComponents::default();

        for _ in 0..config.critic_steps {
            // Real batch: any emotion, with labels for the regression head.
            let real_rows = sample_rows(&mut rng, &all_rows, config.batch_size);
            let (real_c, real_e) = data.gather(&real_rows);

            // Fake batch (concrete; the generator is frozen here): the two
            // cycle directions half and half.
            let n_rows = sample_rows(&mut rng, &data.neutral_rows, half);
            let target_rows = sample_rows(&mut rng, &data.starred_rows, half);
            let (n_c, _) = data.gather(&n_rows);
            let (_, n_targets) = data.gather(&target_rows);
            let s_rows = sample_rows(&mut rng, &data.starred_rows, half);
            let (s_c, _) = data.gather(&s_rows);
            let fake_n = gen.forward_batch(&n_c, &n_targets)?;
            let fake_s = gen.forward_batch(&s_c, &Array2::zeros((half, config.n_e)))?;
            let fake = vstack(&fake_n, &fake_s);
            let x_hat = gp_interpolates(&real_c, &fake, &mut rng);

            let mut tape = Tape::new();
            let disc_nodes = disc.nodes(&mut tape, true);
            let real_node = tape.constant(real_c);
            let fake_node = tape.constant(fake);
            let adv = adv_graph(&mut tape, &disc_nodes, real_node, fake_node);
            let gp = gp_graph(&mut tape, &disc, &disc_nodes, &x_hat);
            let pred = disc_nodes.reg(&mut tape, real_node);
            let labels_node = tape.constant(real_e);
            let reg_d = mean_sq_diff(&mut tape, labels_node, pred);

            let neg_adv = tape.scale(adv, -1.0);
            let gp_w = tape.scale(gp, config.lambda_gp);
            let reg_w = tape.scale(reg_d, config.lambda_reg);
            let partial = tape.add(neg_adv, gp_w);
            let loss_d = tape.add(partial, reg_w);
            tape.backward(loss_d);

            let ids = disc_nodes.param_ids();
            let grads: Vec<Array2<f64>> = ids.iter().map(|&id| tape.grad(id)).collect();
            let mut refs = disc.param_refs_mut();
            adam_d.step(&mut refs, &grads);

            comp.adv = tape.scalar(adv);
            comp.gp = tape.scalar(gp);
            comp.reg_d = tape.scalar(reg_d);
        }

        // Generator step.
        let n_rows = sample_rows(&mut rng, &data.neutral_rows, half);
        let target_rows = sample_rows(&mut rng, &data.starred_rows, half);
        let (n_c, _) = data.gather(&n_rows);
        let (_, n_targets) = data.gather(&target_rows);
        let s_rows = sample_rows(&mut rng, &data.starred_rows, half);
        let (s_c, s_e) = data.gather(&s_rows);
        let real_rows = sample_rows(&mut rng, &all_rows, config.batch_size);
        let (real_c, _) = data.gather(&real_rows);

        let neutral = CoeffBatch::new(n_c.clone(), n_targets.clone())?;
        let starred = CoeffBatch::new(s_c.clone(), s_e.clone())?;
        let zeros_half = Array2::zeros((half, config.n_e));
        let combined = CoeffBatch::new(vstack(&n_c, &s_c), vstack(&n_targets, &zeros_half))?;

        let mut tape = Tape::new();
        let gen_nodes = gen.nodes(&mut tape, true);
        let disc_nodes = disc.nodes(&mut tape, false);

        // First-generation outputs double as the critic's fake batch.
        let cn = tape.constant(n_c);
        let en = tape.constant(n_targets.clone());
        let cs = tape.constant(s_c);
        let zs = tape.constant(zeros_half.clone());
        let fake_n = gen_nodes.forward(&mut tape, cn, en);
        let fake_s = gen_nodes.forward(&mut tape, cs, zs);
        let fake = tape.concat_rows(fake_n, fake_s);
        let real_node = tape.constant(real_c);
        let adv = adv_graph(&mut tape, &disc_nodes, real_node, fake);

        let reg_target = tape.constant(vstack(&n_targets, &zeros_half));
        let reg_pred = disc_nodes.reg(&mut tape, fake);
        let reg_g = mean_sq_diff(&mut tape, reg_target, reg_pred);

        let rec = rec_graph(&mut tape, &gen_nodes, &vo, &neutral, &starred);
        let mouth = mouth_graph(&mut tape, &gen_nodes, &vo, &neutral, &starred);
        let r = r_graph(&mut tape, &gen_nodes, &vo, &combined);

        let reg_w = tape.scale(reg_g, config.lambda_reg);
        let rec_w = tape.scale(rec, config.lambda_rec);
        let mouth_w = tape.scale(mouth, config.lambda_mouth);
        let r_w = tape.scale(r, config.lambda_r);
        let mut loss_g = tape.add(adv, reg_w);
        loss_g = tape.add(loss_g, rec_w);
        loss_g = tape.add(loss_g, mouth_w);
        loss_g = tape.add(loss_g, r_w);
        tape.backward(loss_g);

        let ids = gen_nodes.param_ids();
        let grads: Vec<Array2<f64>> = ids.iter().map(|&id| tape.grad(id)).collect();
        let mut refs = gen.param_refs_mut();
        adam_g.step(&mut refs, &grads);

        // comp.adv keeps the critic-side value; the generator-side critic
        // difference is logged separately as adv_g.
        comp.reg_g = tape.scalar(reg_g);
        comp.rec = tape.scalar(rec);
        comp.mouth = tape.scalar(mouth);
        comp.r = tape.scalar(r);
        let adv_g = tape.scalar(adv);
        let (loss_d_val, _) = total_losses(config, &comp);
        let loss_g_val = tape.scalar(loss_g);

        if iteration == 1 || iteration % 100 == 0 || iteration == config.iterations {
            let pred = disc.reg_batch(&val_c)?;
            let diff = &val_e - &pred;
            let mse = diff.mapv(|d| d * d).sum() / val_c.nrows() as f64;
            log.validation_reg_mse.push((iteration, mse));
        }

        log.records.push(IterationRecord {
            iteration,
            adv: comp.adv,
            gp: comp.gp,
            reg_d: comp.reg_d,
            loss_d: loss_d_val,
            adv_g,
            reg_g: comp.reg_g,
            rec: comp.rec,
            mouth: comp.mouth,
            r: comp.r,
            loss_g: loss_g_val,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
    }

    gen.trained = true;
    Ok((gen, disc, log))
}
