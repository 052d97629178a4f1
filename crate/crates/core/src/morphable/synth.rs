//! Synthetic morphable basis and emotion-labeled coefficient corpus.
//!
//! The basis is built on a rectangular grid face with a rectangular mouth
//! opening (cells omitted from the triangulation), which gives the rest of the
//! stack real topology to work against: a bijective UV chart, lip key points
//! bordering a genuine cavity, and landmarks dense enough for least-squares
//! fitting. Basis columns are orthonormalized Gaussian vectors with a
//! decaying per-column spectrum, imitating the energy falloff of a PCA basis.
//!
//! A configurable leading block of expression columns has all mouth-region
//! rows zeroed before orthonormalization. Those "lip-neutral" directions can
//! carry emotion signal without moving the lips, which is what lets mouth
//! preservation and emotion transfer coexist; the remaining columns move the
//! lips. The corpus generator places each emotion's class signature in the
//! lip-neutral block and a smaller mouth-motion component in the rest.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EmotionVector, FaceCoefficients, MorphableBasis, MorphableError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisConfig {
    /// Vertex grid width (columns).
    pub grid_w: usize,
    /// Vertex grid height (rows).
    pub grid_h: usize,
    pub n_alpha: usize,
    pub n_beta: usize,
    pub seed: u64,
    /// Spectrum amplitude of the identity-shape columns, model units.
    pub shape_amp: f64,
    /// Spectrum amplitude of the expression columns, model units.
    pub exp_amp: f64,
    /// Fraction of expression columns constrained to leave the mouth region
    /// untouched.
    pub lip_neutral_fraction: f64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            grid_w: 26,
            grid_h: 18,
            n_alpha: 80,
            n_beta: 64,
            seed: 1234,
            shape_amp: 0.12,
            exp_amp: 0.08,
            lip_neutral_fraction: 0.5,
        }
    }
}

impl BasisConfig {
    /// Number of leading expression columns that cannot move the mouth.
    pub fn lip_neutral_count(&self) -> usize {
        (self.n_beta as f64 * self.lip_neutral_fraction).round() as usize
    }
}

/// Mouth-opening placement on the vertex grid, shared by the mesh builder and
/// by consumers that need the cavity rectangle (e.g. decal rendering).
#[derive(Debug, Clone, Copy)]
pub struct MouthLayout {
    /// Vertex row of the upper lip.
    pub row_upper: usize,
    /// Vertex row of the lower lip (`row_upper + 2`).
    pub row_lower: usize,
    /// First vertex column of the lip line.
    pub col_start: usize,
    /// Last vertex column of the lip line (inclusive), `col_start + 7`.
    pub col_end: usize,
}

pub fn mouth_layout(grid_w: usize, grid_h: usize) -> MouthLayout {
    let row_upper = ((grid_h - 1) as f64 * 0.68).round() as usize;
    let mid = ((grid_w - 1) as f64 * 0.5).round() as usize;
    let col_start = mid - 4;
    MouthLayout {
        row_upper,
        row_lower: row_upper + 2,
        col_start,
        col_end: col_start + 7,
    }
}

fn vertex_index(grid_w: usize, row: usize, col: usize) -> usize {
    row * grid_w + col
}

/// Deterministically builds the synthetic grid-face basis described in the
/// module docs. Fails if the grid is too small to host the mouth opening and
/// eye landmarks.
pub fn build_synthetic_basis(config: &BasisConfig) -> Result<MorphableBasis, MorphableError> {
    let (w, h) = (config.grid_w, config.grid_h);
    if w < 14 || h < 10 {
        return Err(MorphableError::BadBasis(format!(
            "grid {w}x{h} too small; need at least 14x10"
        )));
    }
    let v = w * h;
    let n_total = config.n_alpha + config.n_beta;
    if n_total > 3 * v {
        return Err(MorphableError::BadBasis(format!(
            "cannot orthonormalize {n_total} columns in dimension {}",
            3 * v
        )));
    }

    // Geometry: x in [-0.9, 0.9], y in [-1.2, 1.2] growing downward (image
    // convention), z smallest (closest to the camera) at the face center.
    let mut mean = Array1::zeros(3 * v);
    let mut uv = Array2::zeros((v, 2));
    for r in 0..h {
        for c in 0..w {
            let i = vertex_index(w, r, c);
            let u = c as f64 / (w - 1) as f64;
            let vv = r as f64 / (h - 1) as f64;
            let x = (u - 0.5) * 1.8;
            let y = (vv - 0.5) * 2.4;
            let r2 = (x / 0.9).powi(2) + (y / 1.2).powi(2);
            let z = 2.0 - 0.6 * (1.0 - r2.min(1.0));
            mean[3 * i] = x;
            mean[3 * i + 1] = y;
            mean[3 * i + 2] = z;
            uv[[i, 0]] = u;
            uv[[i, 1]] = vv;
        }
    }

    // Triangulation with the mouth cells omitted, leaving a cavity.
    let m = mouth_layout(w, h);
    if m.row_lower >= h || m.col_end + 1 >= w || m.col_start == 0 {
        return Err(MorphableError::BadBasis(
            "grid cannot host the mouth opening".into(),
        ));
    }
    let mut faces = Vec::new();
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let in_mouth =
                r >= m.row_upper && r < m.row_lower && c >= m.col_start && c < m.col_end;
            if in_mouth {
                continue;
            }
            let a = vertex_index(w, r, c) as u32;
            let b = vertex_index(w, r + 1, c) as u32;
            let d = vertex_index(w, r, c + 1) as u32;
            let e = vertex_index(w, r + 1, c + 1) as u32;
            faces.push([a, b, d]);
            faces.push([d, b, e]);
        }
    }

    // Lip key points: 8 upper + 8 lower, left to right, pairing columnwise.
    let lip_upper_idx: Vec<usize> = (m.col_start..=m.col_end)
        .map(|c| vertex_index(w, m.row_upper, c))
        .collect();
    let lip_lower_idx: Vec<usize> = (m.col_start..=m.col_end)
        .map(|c| vertex_index(w, m.row_lower, c))
        .collect();

    // Ordered loop around the cavity: upper lip left-to-right, right corner,
    // lower lip right-to-left, left corner.
    let corner_row = m.row_upper + 1;
    let mut mouth_landmark_idx = lip_upper_idx.clone();
    mouth_landmark_idx.push(vertex_index(w, corner_row, m.col_end));
    mouth_landmark_idx.extend(lip_lower_idx.iter().rev());
    mouth_landmark_idx.push(vertex_index(w, corner_row, m.col_start));

    // Landmarks: eye centers first (the scale reference), then the mouth
    // loop, then a coarse grid sample for fitting coverage.
    let r_eye = ((h - 1) as f64 * 0.3).round() as usize;
    let left_eye = vertex_index(w, r_eye, ((w - 1) as f64 * 0.27).round() as usize);
    let right_eye = vertex_index(w, r_eye, ((w - 1) as f64 * 0.73).round() as usize);
    let mut landmark_idx = vec![left_eye, right_eye];
    landmark_idx.extend(&mouth_landmark_idx);
    for r in (0..h).step_by(2) {
        for c in (0..w).step_by(3) {
            landmark_idx.push(vertex_index(w, r, c));
        }
    }
    let mut seen = std::collections::HashSet::new();
    landmark_idx.retain(|&i| seen.insert(i));

    // Mouth-region rows (vertex rows around the cavity, expanded by one) to
    // be zeroed in the lip-neutral expression columns.
    let mut lip_rows = Vec::new();
    for r in m.row_upper.saturating_sub(1)..=(m.row_lower + 1).min(h - 1) {
        for c in m.col_start.saturating_sub(1)..=(m.col_end + 1).min(w - 1) {
            let i = vertex_index(w, r, c);
            lip_rows.extend_from_slice(&[3 * i, 3 * i + 1, 3 * i + 2]);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw_column = |zero_rows: &[usize]| -> Vec<f64> {
        let mut col: Vec<f64> = (0..3 * v).map(|_| normal.sample(&mut rng)).collect();
        for &r in zero_rows {
            col[r] = 0.0;
        }
        col
    };

    // Modified Gram-Schmidt over the concatenated column list. The leading
    // lip-neutral expression columns are generated (and orthonormalized)
    // before the lip-moving ones; because linear combinations of lip-zero
    // vectors stay lip-zero, the constraint survives orthonormalization.
    let n_lip_neutral = config.lip_neutral_count().min(config.n_beta);
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(n_total);
    let push_ortho = |ortho: &mut Vec<Vec<f64>>, mut col: Vec<f64>, against: std::ops::Range<usize>| {
        for q in &ortho[against] {
            let dot: f64 = col.iter().zip(q).map(|(a, b)| a * b).sum();
            for (c, qv) in col.iter_mut().zip(q) {
                *c -= dot * qv;
            }
        }
        let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-9, "degenerate random column");
        for c in col.iter_mut() {
            *c /= norm;
        }
        ortho.push(col);
    };

    for _ in 0..config.n_alpha {
        let col = draw_column(&[]);
        let n = ortho.len();
        push_ortho(&mut ortho, col, 0..n);
    }
    for j in 0..config.n_beta {
        // Lip-neutral columns are only orthonormalized among themselves so
        // projections against lip-moving vectors cannot reintroduce lip
        // motion; cross-block correlations are O(1/sqrt(3V)) and harmless.
        let (col, against) = if j < n_lip_neutral {
            (draw_column(&lip_rows), config.n_alpha..ortho.len())
        } else {
            (draw_column(&[]), 0..ortho.len())
        };
        push_ortho(&mut ortho, col, against);
    }

    let spectrum = |j: usize, amp: f64| amp * (1.0 + j as f64).powf(-0.6);
    let mut shape_basis = Array2::zeros((3 * v, config.n_alpha));
    for j in 0..config.n_alpha {
        let s = spectrum(j, config.shape_amp);
        for r in 0..3 * v {
            shape_basis[[r, j]] = ortho[j][r] * s;
        }
    }
    let mut exp_basis = Array2::zeros((3 * v, config.n_beta));
    for j in 0..config.n_beta {
        let s = spectrum(j, config.exp_amp);
        for r in 0..3 * v {
            exp_basis[[r, j]] = ortho[config.n_alpha + j][r] * s;
        }
    }

    let basis = MorphableBasis {
        mean_shape: mean,
        shape_basis,
        exp_basis,
        faces,
        uv_coords: uv,
        lip_upper_idx,
        lip_lower_idx,
        landmark_idx,
        mouth_landmark_idx,
    };
    basis.validate()?;
    Ok(basis)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthDataConfig {
    /// Non-neutral emotion count.
    pub n_e: usize,
    /// Samples per (emotion, intensity level) pair.
    pub samples_per_combo: usize,
    pub neutral_samples: usize,
    /// Ascending intensities; the default is the three-level ladder
    /// `{1/3, 2/3, 1}`.
    pub intensity_levels: Vec<f64>,
    /// Identity spread (per-dimension standard deviation of alpha).
    pub alpha_std: f64,
    /// Per-sample expression noise standard deviation.
    pub noise_std: f64,
    /// Norm of each emotion offset inside the lip-neutral block.
    pub offset_core: f64,
    /// Norm of each emotion offset inside the lip-moving block.
    pub offset_lip: f64,
    /// Leading expression dimensions that carry no lip motion; must match the
    /// basis the corpus will be used with.
    pub lip_neutral_dims: usize,
    /// When positive, each sample gets uniform rotation angles in
    /// `[-pose_jitter, pose_jitter]` and in-plane translation of the same
    /// magnitude.
    pub pose_jitter: f64,
}

impl Default for SynthDataConfig {
    fn default() -> Self {
        Self {
            n_e: 7,
            samples_per_combo: 50,
            neutral_samples: 150,
            intensity_levels: vec![1.0 / 3.0, 2.0 / 3.0, 1.0],
            alpha_std: 0.3,
            noise_std: 0.05,
            offset_core: 1.0,
            offset_lip: 0.5,
            lip_neutral_dims: 32,
            pose_jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledCoeffs {
    pub coeffs: FaceCoefficients,
    pub emotion: EmotionVector,
}

/// Synthetic labeled corpus. `offsets` keeps the generating per-emotion
/// expression deltas (row `y` is the full-intensity offset of emotion `y`) so
/// evaluations can compare recovered structure against the construction.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub items: Vec<LabeledCoeffs>,
    pub n_e: usize,
    pub offsets: Array2<f64>,
}

impl SynthDataset {
    pub fn iter_flat(&self) -> impl Iterator<Item = (Array1<f64>, &EmotionVector)> + '_ {
        self.items.iter().map(|it| (it.coeffs.flat(), &it.emotion))
    }

    /// Class index convention used by desk-scale classifiers: 0 = neutral,
    /// `1 + y` for emotion `y`.
    pub fn class_of(e: &EmotionVector) -> usize {
        e.argmax().map_or(0, |y| y + 1)
    }
}

/// Deterministically generates the labeled coefficient corpus: for emotion
/// `y` at intensity `s`, `beta = s * offset_y + noise`, with identity drawn
/// independently of the label. Neutral samples carry noise only.
pub fn synth_emotion_dataset(
    basis: &MorphableBasis,
    config: &SynthDataConfig,
    seed: u64,
) -> Result<SynthDataset, MorphableError> {
    if config.samples_per_combo == 0 {
        return Err(MorphableError::EmptySynthRequest);
    }
    let n_beta = basis.n_beta();
    let k = config.lip_neutral_dims.min(n_beta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Per-emotion offsets: a unit vector in the lip-neutral block scaled by
    // offset_core, plus one in the lip-moving block scaled by offset_lip.
    let mut offsets = Array2::zeros((config.n_e, n_beta));
    for y in 0..config.n_e {
        let mut fill_block = |range: std::ops::Range<usize>, scale: f64, rng: &mut ChaCha8Rng| {
            if range.is_empty() || scale == 0.0 {
                return;
            }
            let g: Vec<f64> = range.clone().map(|_| normal.sample(rng)).collect();
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (i, gv) in range.zip(g) {
                offsets[[y, i]] = gv * scale / norm;
            }
        };
        fill_block(0..k, config.offset_core, &mut rng);
        fill_block(k..n_beta, config.offset_lip, &mut rng);
    }

    let mut items = Vec::new();
    let make_sample = |rng: &mut ChaCha8Rng, emotion_vec: EmotionVector, beta_target: Vec<f64>| {
        let mut coeffs = FaceCoefficients::zeros(basis.n_alpha(), n_beta);
        for a in coeffs.alpha.iter_mut() {
            *a = config.alpha_std * normal.sample(rng);
        }
        for (b, t) in coeffs.beta.iter_mut().zip(beta_target) {
            *b = t + config.noise_std * normal.sample(rng);
        }
        if config.pose_jitter > 0.0 {
            let j = config.pose_jitter;
            for p in 0..3 {
                coeffs.pose[p] = rng.gen_range(-j..j);
            }
            coeffs.pose[3] = rng.gen_range(-j..j);
            coeffs.pose[4] = rng.gen_range(-j..j);
        }
        LabeledCoeffs {
            coeffs,
            emotion: emotion_vec,
        }
    };

    for y in 0..config.n_e {
        for &level in &config.intensity_levels {
            for _ in 0..config.samples_per_combo {
                let target: Vec<f64> = (0..n_beta).map(|i| level * offsets[[y, i]]).collect();
                let e = EmotionVector::one_hot(config.n_e, y, level)?;
                items.push(make_sample(&mut rng, e, target));
            }
        }
    }
    for _ in 0..config.neutral_samples {
        let e = EmotionVector::zeros(config.n_e);
        items.push(make_sample(&mut rng, e, vec![0.0; n_beta]));
    }

    Ok(SynthDataset {
        items,
        n_e: config.n_e,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_basis_config() -> BasisConfig {
        BasisConfig {
            grid_w: 16,
            grid_h: 12,
            n_alpha: 8,
            n_beta: 12,
            ..BasisConfig::default()
        }
    }

    #[test]
    fn grid_face_has_expected_counts_and_cavity() {
        let cfg = test_basis_config();
        let basis = build_synthetic_basis(&cfg).unwrap();
        assert_eq!(basis.n_vertices(), 16 * 12);
        let full_cells = (16 - 1) * (12 - 1);
        // 7x2 cells are omitted for the mouth opening.
        assert_eq!(basis.faces.len(), 2 * (full_cells - 14));
        assert_eq!(basis.lip_upper_idx.len(), 8);
        assert_eq!(basis.lip_lower_idx.len(), 8);
        assert_eq!(basis.mouth_landmark_idx.len(), 18);
        basis.validate().unwrap();
        assert!(basis.inter_ocular_distance() > 0.5);
    }

    #[test]
    fn default_basis_matches_published_defaults() {
        let basis = build_synthetic_basis(&BasisConfig::default()).unwrap();
        assert_eq!(basis.n_vertices(), 468);
        assert_eq!(basis.n_alpha(), 80);
        assert_eq!(basis.n_beta(), 64);
        assert_eq!(basis.n_coeff(), 144);
        // Enough landmark rows for a full-rank unregularized fit.
        assert!(2 * basis.landmark_idx.len() >= basis.n_coeff());
    }

    #[test]
    fn lip_neutral_columns_leave_lips_fixed() {
        let cfg = test_basis_config();
        let basis = build_synthetic_basis(&cfg).unwrap();
        let k = cfg.lip_neutral_count();
        assert!(k > 0);
        for j in 0..k {
            for &vi in basis.lip_upper_idx.iter().chain(&basis.lip_lower_idx) {
                for c in 0..3 {
                    assert_eq!(
                        basis.exp_basis[[3 * vi + c, j]],
                        0.0,
                        "lip-neutral column {j} moves lip vertex {vi}"
                    );
                }
            }
        }
        // Lip-moving columns do move the lips.
        let mut moved = 0.0;
        for j in k..cfg.n_beta {
            for &vi in &basis.lip_upper_idx {
                moved += basis.exp_basis[[3 * vi, j]].abs();
            }
        }
        assert!(moved > 0.0);
    }

    #[test]
    fn basis_columns_are_orthonormal_before_spectrum() {
        let cfg = test_basis_config();
        let basis = build_synthetic_basis(&cfg).unwrap();
        // Undo the spectrum scaling and check pairwise orthonormality within
        // the shape block.
        for a in 0..cfg.n_alpha {
            for b in a..cfg.n_alpha {
                let dot: f64 = (0..basis.mean_shape.len())
                    .map(|r| basis.shape_basis[[r, a]] * basis.shape_basis[[r, b]])
                    .sum();
                let sa = cfg.shape_amp * (1.0 + a as f64).powf(-0.6);
                let sb = cfg.shape_amp * (1.0 + b as f64).powf(-0.6);
                let expected = if a == b { sa * sb } else { 0.0 };
                assert!((dot - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dataset_is_deterministic_and_levels_are_thirds() {
        let basis = build_synthetic_basis(&test_basis_config()).unwrap();
        let cfg = SynthDataConfig {
            n_e: 3,
            samples_per_combo: 4,
            neutral_samples: 5,
            lip_neutral_dims: test_basis_config().lip_neutral_count(),
            ..SynthDataConfig::default()
        };
        let d1 = synth_emotion_dataset(&basis, &cfg, 99).unwrap();
        let d2 = synth_emotion_dataset(&basis, &cfg, 99).unwrap();
        assert_eq!(d1.items.len(), 3 * 3 * 4 + 5);
        for (a, b) in d1.items.iter().zip(&d2.items) {
            assert_eq!(a.coeffs, b.coeffs);
            assert_eq!(a.emotion, b.emotion);
        }
        let mut seen_levels: Vec<f64> = d1
            .items
            .iter()
            .filter_map(|it| it.emotion.argmax().map(|y| it.emotion.values()[y]))
            .collect();
        seen_levels.sort_by(f64::total_cmp);
        seen_levels.dedup();
        assert_eq!(seen_levels.len(), 3);
        assert!((seen_levels[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((seen_levels[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((seen_levels[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_sample_request_is_rejected() {
        let basis = build_synthetic_basis(&test_basis_config()).unwrap();
        let cfg = SynthDataConfig {
            samples_per_combo: 0,
            ..SynthDataConfig::default()
        };
        assert!(matches!(
            synth_emotion_dataset(&basis, &cfg, 1),
            Err(MorphableError::EmptySynthRequest)
        ));
    }

    #[test]
    fn linear_classifier_separates_the_corpus() {
        let bcfg = test_basis_config();
        let basis = build_synthetic_basis(&bcfg).unwrap();
        let cfg = SynthDataConfig {
            n_e: 4,
            samples_per_combo: 30,
            neutral_samples: 90,
            lip_neutral_dims: bcfg.lip_neutral_count(),
            ..SynthDataConfig::default()
        };
        let data = synth_emotion_dataset(&basis, &cfg, 7).unwrap();
        let x: Vec<Array1<f64>> = data.items.iter().map(|it| it.coeffs.flat()).collect();
        let y: Vec<usize> = data
            .items
            .iter()
            .map(|it| SynthDataset::class_of(&it.emotion))
            .collect();
        let clf = crate::metrics::SoftmaxClassifier::train(
            &x,
            &y,
            cfg.n_e + 1,
            &crate::metrics::ClassifierConfig::default(),
            5,
        );
        let acc = clf.accuracy(&x, &y);
        assert!(acc >= 0.95, "training accuracy {acc} below 0.95");
    }
}
