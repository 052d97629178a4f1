//! Linear morphable-model algebra: basis containers, coefficient containers,
//! shape reconstruction, rigid pose, and a landmark-based least-squares
//! coefficient fit.
//!
//! A face shape is `mean + shape_basis * alpha + exp_basis * beta`, a flat
//! vector of `3 * V` coordinates reshaped to `V x 3`. Pose is applied
//! separately as a rigid transform.

pub mod synth;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorfile::{TensorFile, TensorFileError};

#[derive(Debug, Error)]
pub enum MorphableError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("basis is inconsistent: {0}")]
    BadBasis(String),
    #[error("normal equations are rank-deficient; pass a positive ridge weight")]
    RankDeficient,
    #[error("emotion vector component {index} = {value} outside [0, {max}]")]
    EmotionOutOfRange {
        index: usize,
        value: f64,
        max: f64,
    },
    #[error("strict emotion mode allows at most one nonzero component, found {0}")]
    MultipleEmotions(usize),
    #[error("requested an empty dataset (samples_per_class = 0)")]
    EmptySynthRequest,
    #[error("tensor file error: {0}")]
    Tensor(#[from] TensorFileError),
}

/// Linear face model plus the topology and index sets the rest of the
/// pipeline needs: triangle list, a UV chart, lip key points and landmarks.
///
/// Conventions baked into the synthetic builder and assumed downstream:
/// * `landmark_idx[0]` / `landmark_idx[1]` are the left / right eye centers
///   (used for the inter-ocular distance scale).
/// * `lip_upper_idx` and `lip_lower_idx` are stored left-to-right and pair up
///   elementwise (upper key point `i` sits above lower key point `i`).
#[derive(Debug, Clone)]
pub struct MorphableBasis {
    /// Flat `3 * V` mean shape, vertex-major (x, y, z per vertex).
    pub mean_shape: Array1<f64>,
    /// `3V x n_alpha` identity-shape basis.
    pub shape_basis: Array2<f64>,
    /// `3V x n_beta` expression basis.
    pub exp_basis: Array2<f64>,
    /// Triangle list, indices into the vertex array.
    pub faces: Vec<[u32; 3]>,
    /// `V x 2` texture coordinates in `[0, 1]^2`.
    pub uv_coords: Array2<f64>,
    pub lip_upper_idx: Vec<usize>,
    pub lip_lower_idx: Vec<usize>,
    pub landmark_idx: Vec<usize>,
    /// Ordered loop around the mouth opening; subset of `landmark_idx`.
    pub mouth_landmark_idx: Vec<usize>,
}

impl MorphableBasis {
    pub fn n_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn n_alpha(&self) -> usize {
        self.shape_basis.ncols()
    }

    pub fn n_beta(&self) -> usize {
        self.exp_basis.ncols()
    }

    /// Length of the flat editable coefficient vector `(alpha | beta)`.
    pub fn n_coeff(&self) -> usize {
        self.n_alpha() + self.n_beta()
    }

    pub fn validate(&self) -> Result<(), MorphableError> {
        let v = self.n_vertices();
        if self.mean_shape.len() != 3 * v {
            return Err(MorphableError::BadBasis("mean shape length not 3V".into()));
        }
        for (name, rows) in [
            ("shape_basis", self.shape_basis.nrows()),
            ("exp_basis", self.exp_basis.nrows()),
        ] {
            if rows != 3 * v {
                return Err(MorphableError::BadBasis(format!(
                    "{name} has {rows} rows, expected {}",
                    3 * v
                )));
            }
        }
        if self.uv_coords.nrows() != v || self.uv_coords.ncols() != 2 {
            return Err(MorphableError::BadBasis("uv_coords not V x 2".into()));
        }
        if self.uv_coords.iter().any(|&u| !(0.0..=1.0).contains(&u)) {
            return Err(MorphableError::BadBasis("uv_coords outside [0,1]".into()));
        }
        for f in &self.faces {
            if f.iter().any(|&i| i as usize >= v) {
                return Err(MorphableError::BadBasis("face index out of range".into()));
            }
        }
        if self.lip_upper_idx.len() != self.lip_lower_idx.len() {
            return Err(MorphableError::BadBasis(
                "lip index sets differ in length".into(),
            ));
        }
        if self
            .lip_upper_idx
            .iter()
            .any(|i| self.lip_lower_idx.contains(i))
        {
            return Err(MorphableError::BadBasis("lip index sets overlap".into()));
        }
        for (name, set) in [
            ("lip_upper_idx", &self.lip_upper_idx),
            ("lip_lower_idx", &self.lip_lower_idx),
            ("landmark_idx", &self.landmark_idx),
            ("mouth_landmark_idx", &self.mouth_landmark_idx),
        ] {
            if set.iter().any(|&i| i >= v) {
                return Err(MorphableError::BadBasis(format!(
                    "{name} contains an index >= V"
                )));
            }
        }
        if self
            .mouth_landmark_idx
            .iter()
            .any(|i| !self.landmark_idx.contains(i))
        {
            return Err(MorphableError::BadBasis(
                "mouth_landmark_idx not a subset of landmark_idx".into(),
            ));
        }
        if self.landmark_idx.len() < 2 {
            return Err(MorphableError::BadBasis(
                "need at least the two eye-center landmarks".into(),
            ));
        }
        Ok(())
    }

    /// Inter-ocular distance of the mean shape, the model's scale reference.
    pub fn inter_ocular_distance(&self) -> f64 {
        let l = self.landmark_idx[0];
        let r = self.landmark_idx[1];
        let p = |i: usize| {
            [
                self.mean_shape[3 * i],
                self.mean_shape[3 * i + 1],
                self.mean_shape[3 * i + 2],
            ]
        };
        let (a, b) = (p(l), p(r));
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), MorphableError> {
        let mut tf = TensorFile::new(serde_json::json!({
            "kind": "morphable-basis",
            "version": 1,
        }));
        let v = self.n_vertices();
        tf.insert_f64("mean_shape", &[3 * v], self.mean_shape.to_vec());
        tf.insert_f64(
            "shape_basis",
            &[3 * v, self.n_alpha()],
            self.shape_basis.iter().copied().collect(),
        );
        tf.insert_f64(
            "exp_basis",
            &[3 * v, self.n_beta()],
            self.exp_basis.iter().copied().collect(),
        );
        tf.insert_u32(
            "faces",
            &[self.faces.len(), 3],
            self.faces.iter().flatten().copied().collect(),
        );
        tf.insert_f64("uv", &[v, 2], self.uv_coords.iter().copied().collect());
        let as_u32 = |s: &[usize]| s.iter().map(|&i| i as u32).collect::<Vec<_>>();
        tf.insert_u32("lip_upper", &[self.lip_upper_idx.len()], as_u32(&self.lip_upper_idx));
        tf.insert_u32("lip_lower", &[self.lip_lower_idx.len()], as_u32(&self.lip_lower_idx));
        tf.insert_u32("landmarks", &[self.landmark_idx.len()], as_u32(&self.landmark_idx));
        tf.insert_u32(
            "mouth_landmarks",
            &[self.mouth_landmark_idx.len()],
            as_u32(&self.mouth_landmark_idx),
        );
        tf.save(path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, MorphableError> {
        let tf = TensorFile::load(path)?;
        let (_, mean) = tf.f64_entry("mean_shape")?;
        let (sdims, sdata) = tf.f64_entry("shape_basis")?;
        let (edims, edata) = tf.f64_entry("exp_basis")?;
        let (fdims, fdata) = tf.u32_entry("faces")?;
        let (udims, udata) = tf.f64_entry("uv")?;
        let (_, lu) = tf.u32_entry("lip_upper")?;
        let (_, ll) = tf.u32_entry("lip_lower")?;
        let (_, lm) = tf.u32_entry("landmarks")?;
        let (_, ml) = tf.u32_entry("mouth_landmarks")?;
        let to_usize = |s: &[u32]| s.iter().map(|&i| i as usize).collect::<Vec<_>>();
        let basis = Self {
            mean_shape: Array1::from_vec(mean.to_vec()),
            shape_basis: Array2::from_shape_vec((sdims[0], sdims[1]), sdata.to_vec())
                .map_err(|e| MorphableError::BadBasis(e.to_string()))?,
            exp_basis: Array2::from_shape_vec((edims[0], edims[1]), edata.to_vec())
                .map_err(|e| MorphableError::BadBasis(e.to_string()))?,
            faces: fdata
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
            uv_coords: Array2::from_shape_vec((udims[0], udims[1]), udata.to_vec())
                .map_err(|e| MorphableError::BadBasis(e.to_string()))?,
            lip_upper_idx: to_usize(lu),
            lip_lower_idx: to_usize(ll),
            landmark_idx: to_usize(lm),
            mouth_landmark_idx: to_usize(ml),
        };
        let _ = fdims;
        basis.validate()?;
        Ok(basis)
    }
}

/// Per-frame reconstruction coefficients. `alpha` and `beta` are the editable
/// part; `delta` (texture) and `gamma` (lighting) are carried through
/// untouched so a frame can be re-rendered from its original appearance data;
/// `pose` is rotation angles (radians) followed by translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceCoefficients {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub delta: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    /// `[rx, ry, rz, tx, ty, tz]`.
    pub pose: [f64; 6],
}

impl FaceCoefficients {
    pub fn zeros(n_alpha: usize, n_beta: usize) -> Self {
        Self {
            alpha: vec![0.0; n_alpha],
            beta: vec![0.0; n_beta],
            delta: None,
            gamma: None,
            pose: [0.0; 6],
        }
    }

    /// Flat editable vector `(alpha | beta)` consumed by the coefficient GAN.
    pub fn flat(&self) -> Array1<f64> {
        let mut v = Vec::with_capacity(self.alpha.len() + self.beta.len());
        v.extend_from_slice(&self.alpha);
        v.extend_from_slice(&self.beta);
        Array1::from_vec(v)
    }

    /// New coefficients with `(alpha | beta)` replaced from a flat vector and
    /// pose / delta / gamma copied unchanged.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self, MorphableError> {
        let n_a = self.alpha.len();
        let n = n_a + self.beta.len();
        if flat.len() != n {
            return Err(MorphableError::DimMismatch {
                what: "flat coefficient vector",
                expected: n,
                got: flat.len(),
            });
        }
        Ok(Self {
            alpha: flat[..n_a].to_vec(),
            beta: flat[n_a..].to_vec(),
            delta: self.delta.clone(),
            gamma: self.gamma.clone(),
            pose: self.pose,
        })
    }
}

/// Emotion-vector validation mode. Strict mode is the baseline contract (one
/// emotion at a time); multi-label mode admits arbitrary combinations in
/// `[0, 1]` and is what keyframe cross-fades produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmotionMode {
    Strict,
    MultiLabel,
}

/// Non-negative per-emotion intensity vector; the zero vector is neutral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionVector {
    values: Vec<f64>,
}

impl EmotionVector {
    pub fn zeros(n_e: usize) -> Self {
        Self {
            values: vec![0.0; n_e],
        }
    }

    /// Validates components against `[0, max]` (`max` is 1 except when
    /// extrapolated editing is explicitly enabled) and the mode's
    /// single-label restriction.
    pub fn new_checked(
        values: Vec<f64>,
        mode: EmotionMode,
        max: f64,
    ) -> Result<Self, MorphableError> {
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 || v > max {
                return Err(MorphableError::EmotionOutOfRange {
                    index: i,
                    value: v,
                    max,
                });
            }
        }
        if mode == EmotionMode::Strict {
            let nonzero = values.iter().filter(|&&v| v > 0.0).count();
            if nonzero > 1 {
                return Err(MorphableError::MultipleEmotions(nonzero));
            }
        }
        Ok(Self { values })
    }

    pub fn new(values: Vec<f64>, mode: EmotionMode) -> Result<Self, MorphableError> {
        Self::new_checked(values, mode, 1.0)
    }

    pub fn one_hot(n_e: usize, index: usize, intensity: f64) -> Result<Self, MorphableError> {
        let mut values = vec![0.0; n_e];
        if index >= n_e {
            return Err(MorphableError::DimMismatch {
                what: "emotion index",
                expected: n_e,
                got: index,
            });
        }
        values[index] = intensity;
        Self::new(values, EmotionMode::Strict)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_neutral(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Index of the strongest component, or `None` when neutral.
    pub fn argmax(&self) -> Option<usize> {
        let (i, &v) = self
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))?;
        (v > 0.0).then_some(i)
    }
}

/// `S = mean + shape_basis * alpha + exp_basis * beta`, reshaped `V x 3`.
/// Pose is deliberately not applied here.
pub fn reconstruct_shape(
    basis: &MorphableBasis,
    coeffs: &FaceCoefficients,
) -> Result<Array2<f64>, MorphableError> {
    if coeffs.alpha.len() != basis.n_alpha() {
        return Err(MorphableError::DimMismatch {
            what: "alpha",
            expected: basis.n_alpha(),
            got: coeffs.alpha.len(),
        });
    }
    if coeffs.beta.len() != basis.n_beta() {
        return Err(MorphableError::DimMismatch {
            what: "beta",
            expected: basis.n_beta(),
            got: coeffs.beta.len(),
        });
    }
    let alpha = Array1::from_vec(coeffs.alpha.clone());
    let beta = Array1::from_vec(coeffs.beta.clone());
    let flat = &basis.mean_shape + &basis.shape_basis.dot(&alpha) + &basis.exp_basis.dot(&beta);
    let v = basis.n_vertices();
    Array2::from_shape_vec((v, 3), flat.to_vec())
        .map_err(|e| MorphableError::BadBasis(e.to_string()))
}

/// Rotation matrix for intrinsic X-then-Y-then-Z Euler angles, i.e.
/// `R = Rx(rx) * Ry(ry) * Rz(rz)` acting on column vectors.
pub fn rotation_matrix(pose: &[f64; 6]) -> nalgebra::Matrix3<f64> {
    let (sx, cx) = pose[0].sin_cos();
    let (sy, cy) = pose[1].sin_cos();
    let (sz, cz) = pose[2].sin_cos();
    let rx = nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = nalgebra::Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = nalgebra::Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

/// Rigid transform `R * v + t` applied to every vertex.
pub fn apply_pose(vertices: &Array2<f64>, pose: &[f64; 6]) -> Result<Array2<f64>, MorphableError> {
    if pose.iter().any(|v| !v.is_finite()) {
        return Err(MorphableError::NonFinite("pose"));
    }
    let r = rotation_matrix(pose);
    let t = nalgebra::Vector3::new(pose[3], pose[4], pose[5]);
    let mut out = vertices.clone();
    for mut row in out.rows_mut() {
        let p = nalgebra::Vector3::new(row[0], row[1], row[2]);
        let q = r * p + t;
        row[0] = q.x;
        row[1] = q.y;
        row[2] = q.z;
    }
    Ok(out)
}

/// Least-squares fit of `(alpha | beta)` from 2D landmarks observed under a
/// known pose and orthographic projection in model units (callers using a
/// pixel camera divide out scale and principal point first).
///
/// Minimizes `sum_l ||P2 (R s_l(c) + t) - landmark_l||^2 + ridge ||c||^2`
/// where `P2` keeps the x/y rows and `s_l(c)` is the reconstructed landmark
/// vertex. With `ridge = 0` the normal equations must be full rank.
pub fn fit_coefficients(
    landmarks_2d: &Array2<f64>,
    basis: &MorphableBasis,
    pose: &[f64; 6],
    ridge: f64,
) -> Result<(Vec<f64>, Vec<f64>), MorphableError> {
    let l = basis.landmark_idx.len();
    if landmarks_2d.nrows() != l || landmarks_2d.ncols() != 2 {
        return Err(MorphableError::DimMismatch {
            what: "landmarks_2d rows",
            expected: l,
            got: landmarks_2d.nrows(),
        });
    }
    let n_c = basis.n_coeff();
    let r = rotation_matrix(pose);
    // Only the x/y rows of the rotation survive orthographic projection.
    let p2 = r.fixed_rows::<2>(0).into_owned();

    let mut a = nalgebra::DMatrix::<f64>::zeros(2 * l, n_c);
    let mut b = nalgebra::DVector::<f64>::zeros(2 * l);
    for (li, &vi) in basis.landmark_idx.iter().enumerate() {
        let mean = nalgebra::Vector3::new(
            basis.mean_shape[3 * vi],
            basis.mean_shape[3 * vi + 1],
            basis.mean_shape[3 * vi + 2],
        );
        let proj_mean = p2 * mean;
        b[2 * li] = landmarks_2d[[li, 0]] - proj_mean.x - pose[3];
        b[2 * li + 1] = landmarks_2d[[li, 1]] - proj_mean.y - pose[4];
        for j in 0..n_c {
            let col = if j < basis.n_alpha() {
                &basis.shape_basis
            } else {
                &basis.exp_basis
            };
            let cj = if j < basis.n_alpha() {
                j
            } else {
                j - basis.n_alpha()
            };
            let bv = nalgebra::Vector3::new(
                col[[3 * vi, cj]],
                col[[3 * vi + 1, cj]],
                col[[3 * vi + 2, cj]],
            );
            let pb = p2 * bv;
            a[(2 * li, j)] = pb.x;
            a[(2 * li + 1, j)] = pb.y;
        }
    }

    // Normal equations with optional Tikhonov term.
    let ata = a.transpose() * &a + nalgebra::DMatrix::identity(n_c, n_c) * ridge;
    let atb = a.transpose() * b;
    let chol = match ata.clone().cholesky() {
        Some(c) => c,
        None => return Err(MorphableError::RankDeficient),
    };
    // Cholesky succeeding on a numerically singular matrix would yield a
    // garbage solution; double-check conditioning when unregularized.
    if ridge == 0.0 {
        let sv = ata.symmetric_eigenvalues();
        let max = sv.iter().cloned().fold(f64::MIN, f64::max);
        let min = sv.iter().cloned().fold(f64::MAX, f64::min);
        if !(min > max * 1e-12) {
            return Err(MorphableError::RankDeficient);
        }
    }
    let c = chol.solve(&atb);
    let alpha = c.as_slice()[..basis.n_alpha()].to_vec();
    let beta = c.as_slice()[basis.n_alpha()..].to_vec();
    Ok((alpha, beta))
}

#[cfg(test)]
mod tests {
    use super::synth::{build_synthetic_basis, BasisConfig};
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_basis() -> MorphableBasis {
        build_synthetic_basis(&BasisConfig {
            grid_w: 16,
            grid_h: 12,
            n_alpha: 8,
            n_beta: 8,
            ..BasisConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_coefficients_give_mean_shape() {
        let basis = small_basis();
        let coeffs = FaceCoefficients::zeros(basis.n_alpha(), basis.n_beta());
        let s = reconstruct_shape(&basis, &coeffs).unwrap();
        for (i, row) in s.rows().into_iter().enumerate() {
            for k in 0..3 {
                assert_eq!(row[k], basis.mean_shape[3 * i + k]);
            }
        }
    }

    #[test]
    fn unit_alpha_adds_first_basis_column() {
        let basis = small_basis();
        let mut coeffs = FaceCoefficients::zeros(basis.n_alpha(), basis.n_beta());
        coeffs.alpha[0] = 1.0;
        let s = reconstruct_shape(&basis, &coeffs).unwrap();
        for i in 0..basis.n_vertices() {
            for k in 0..3 {
                let expect = basis.mean_shape[3 * i + k] + basis.shape_basis[[3 * i + k, 0]];
                assert!((s[[i, k]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reconstruction_is_affine_in_coefficients() {
        let basis = small_basis();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rand_coeffs = || {
            let mut c = FaceCoefficients::zeros(basis.n_alpha(), basis.n_beta());
            for v in c.alpha.iter_mut().chain(c.beta.iter_mut()) {
                *v = rng.gen_range(-1.0..1.0);
            }
            c
        };
        let (c1, c2) = (rand_coeffs(), rand_coeffs());
        let (a, b) = (0.7, -1.3);
        let mixed = FaceCoefficients {
            alpha: c1.alpha.iter().zip(&c2.alpha).map(|(x, y)| a * x + b * y).collect(),
            beta: c1.beta.iter().zip(&c2.beta).map(|(x, y)| a * x + b * y).collect(),
            delta: None,
            gamma: None,
            pose: [0.0; 6],
        };
        let s_mixed = reconstruct_shape(&basis, &mixed).unwrap();
        let s1 = reconstruct_shape(&basis, &c1).unwrap();
        let s2 = reconstruct_shape(&basis, &c2).unwrap();
        let mean = Array2::from_shape_vec(
            (basis.n_vertices(), 3),
            basis.mean_shape.to_vec(),
        )
        .unwrap();
        let expect = &(&s1 * a) + &(&s2 * b) - &(&mean * (a + b - 1.0));
        let err = (&s_mixed - &expect).iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "affine combination mismatch {err}");
    }

    #[test]
    fn pose_identity_translation_and_inverse_rotation() {
        let basis = small_basis();
        let coeffs = FaceCoefficients::zeros(basis.n_alpha(), basis.n_beta());
        let s = reconstruct_shape(&basis, &coeffs).unwrap();

        let same = apply_pose(&s, &[0.0; 6]).unwrap();
        assert_eq!(s, same);

        let shifted = apply_pose(&s, &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        for i in 0..s.nrows() {
            assert!((shifted[[i, 0]] - s[[i, 0]] - 1.0).abs() < 1e-12);
            assert!((shifted[[i, 1]] - s[[i, 1]] - 2.0).abs() < 1e-12);
            assert!((shifted[[i, 2]] - s[[i, 2]] - 3.0).abs() < 1e-12);
        }

        let pi = std::f64::consts::PI;
        let once = apply_pose(&s, &[0.0, 0.0, pi, 0.0, 0.0, 0.0]).unwrap();
        let back = apply_pose(&once, &[0.0, 0.0, -pi, 0.0, 0.0, 0.0]).unwrap();
        let err = (&back - &s).iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn pose_preserves_pairwise_distances() {
        let basis = small_basis();
        let coeffs = FaceCoefficients::zeros(basis.n_alpha(), basis.n_beta());
        let s = reconstruct_shape(&basis, &coeffs).unwrap();
        let posed = apply_pose(&s, &[0.3, -0.4, 0.9, 5.0, -2.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let i = rng.gen_range(0..s.nrows());
            let j = rng.gen_range(0..s.nrows());
            let d0: f64 = (0..3).map(|k| (s[[i, k]] - s[[j, k]]).powi(2)).sum::<f64>().sqrt();
            let d1: f64 = (0..3)
                .map(|k| (posed[[i, k]] - posed[[j, k]]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((d0 - d1).abs() < 1e-9);
        }
    }

    /// Projects the landmark vertices of posed, reconstructed coefficients
    /// orthographically (model units).
    fn synth_landmarks(
        basis: &MorphableBasis,
        coeffs: &FaceCoefficients,
    ) -> Array2<f64> {
        let s = reconstruct_shape(basis, coeffs).unwrap();
        let posed = apply_pose(&s, &coeffs.pose).unwrap();
        let mut lm = Array2::zeros((basis.landmark_idx.len(), 2));
        for (li, &vi) in basis.landmark_idx.iter().enumerate() {
            lm[[li, 0]] = posed[[vi, 0]];
            lm[[li, 1]] = posed[[vi, 1]];
        }
        lm
    }

    #[test]
    fn fit_recovers_known_coefficients_exactly() {
        let basis = small_basis();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let mut truth = FaceCoefficients::zeros(basis.n_alpha(), basis.n_beta());
            for v in truth.alpha.iter_mut().chain(truth.beta.iter_mut()) {
                *v = rng.gen_range(-0.8..0.8);
            }
            truth.pose = [0.2, -0.1, 0.15, 0.5, -0.3, 0.0];
            let lm = synth_landmarks(&basis, &truth);
            let (alpha, beta) = fit_coefficients(&lm, &basis, &truth.pose, 0.0).unwrap();
            for (a, b) in alpha.iter().zip(&truth.alpha) {
                assert!((a - b).abs() < 1e-6, "alpha mismatch {a} vs {b}");
            }
            for (a, b) in beta.iter().zip(&truth.beta) {
                assert!((a - b).abs() < 1e-6, "beta mismatch {a} vs {b}");
            }
        }
    }

    #[test]
    fn fit_of_mean_face_landmarks_is_zero_with_ridge() {
        let basis = small_basis();
        let truth = FaceCoefficients::zeros(basis.n_alpha(), basis.n_beta());
        let lm = synth_landmarks(&basis, &truth);
        let (alpha, beta) = fit_coefficients(&lm, &basis, &truth.pose, 1e-6).unwrap();
        for v in alpha.iter().chain(beta.iter()) {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn noisy_fit_reprojection_rmse_is_bounded() {
        let basis = small_basis();
        let sigma = 0.01;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut total_sq = 0.0;
        let mut count = 0usize;
        for _ in 0..100 {
            let mut truth = FaceCoefficients::zeros(basis.n_alpha(), basis.n_beta());
            for v in truth.alpha.iter_mut().chain(truth.beta.iter_mut()) {
                *v = rng.gen_range(-0.5..0.5);
            }
            let mut lm = synth_landmarks(&basis, &truth);
            for v in lm.iter_mut() {
                // Box-Muller normal noise.
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                *v += sigma * (-2.0 * u1.ln()).sqrt() * u2.cos();
            }
            let (alpha, beta) = fit_coefficients(&lm, &basis, &truth.pose, 1e-9).unwrap();
            let fitted = FaceCoefficients {
                alpha,
                beta,
                delta: None,
                gamma: None,
                pose: truth.pose,
            };
            let relm = synth_landmarks(&basis, &fitted);
            for (a, b) in relm.iter().zip(lm.iter()) {
                total_sq += (a - b) * (a - b);
                count += 1;
            }
        }
        let rmse = (total_sq / count as f64).sqrt();
        assert!(rmse <= 2.0 * sigma, "reprojection rmse {rmse} > {}", 2.0 * sigma);
    }

    #[test]
    fn strict_emotion_mode_rejects_two_labels() {
        assert!(EmotionVector::new(vec![0.5, 0.0, 0.5], EmotionMode::Strict).is_err());
        assert!(EmotionVector::new(vec![0.5, 0.0, 0.5], EmotionMode::MultiLabel).is_ok());
        assert!(EmotionVector::new(vec![1.2, 0.0], EmotionMode::Strict).is_err());
        let e = EmotionVector::one_hot(4, 2, 0.75).unwrap();
        assert_eq!(e.argmax(), Some(2));
        assert!(!e.is_neutral());
        assert!(EmotionVector::zeros(4).is_neutral());
    }

    #[test]
    fn basis_round_trips_through_archive() {
        let basis = small_basis();
        let dir = std::env::temp_dir().join("faceedit-basis-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("basis.fetf");
        basis.save(&path).unwrap();
        let back = MorphableBasis::load(&path).unwrap();
        assert_eq!(basis.mean_shape, back.mean_shape);
        assert_eq!(basis.shape_basis, back.shape_basis);
        assert_eq!(basis.exp_basis, back.exp_basis);
        assert_eq!(basis.faces, back.faces);
        assert_eq!(basis.uv_coords, back.uv_coords);
        assert_eq!(basis.landmark_idx, back.landmark_idx);
        assert_eq!(basis.mouth_landmark_idx, back.mouth_landmark_idx);
        std::fs::remove_file(&path).ok();
    }
}
