//! Evaluation metrics: linearity of intensity editing (LIE), Fréchet distance
//! between feature distributions, identity similarity, and the small linear
//! emotion classifier used as a desk-scale feature extractor.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::image::Image;
use crate::tensorfile::{TensorFile, TensorFileError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {expected} {what}, got {got}")]
    TooFew {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("mean feature vector has zero norm")]
    ZeroNormMean,
    #[error("non-finite Fréchet distance after regularization")]
    NonFinite,
    #[error("feature cache was produced by extractor {found:?}, expected {expected:?}")]
    ExtractorMismatch { expected: String, found: String },
    #[error("tensor file error: {0}")]
    Tensor(#[from] TensorFileError),
}

/// A set of feature vectors together with the identifier (hash) of the
/// extractor that produced them, so cached features are never mixed across
/// extractors.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn from_rows(rows: &[Array1<f64>], extractor_id: &str) -> Result<Self, MetricsError> {
        if rows.is_empty() {
            return Err(MetricsError::TooFew {
                what: "feature rows",
                expected: 1,
                got: 0,
            });
        }
        let d = rows[0].len();
        let mut features = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(MetricsError::DimMismatch(d, r.len()));
            }
            features.row_mut(i).assign(r);
        }
        Ok(Self {
            features,
            extractor_id: extractor_id.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), MetricsError> {
        let mut tf = TensorFile::new(serde_json::json!({
            "kind": "feature-set",
            "extractor_id": self.extractor_id,
        }));
        tf.insert_f64(
            "features",
            &[self.features.nrows(), self.features.ncols()],
            self.features.iter().copied().collect(),
        );
        tf.save(path)?;
        Ok(())
    }

    /// Loads a cached feature set, refusing caches from a different
    /// extractor.
    pub fn load(
        path: impl AsRef<std::path::Path>,
        expected_extractor: &str,
    ) -> Result<Self, MetricsError> {
        let tf = TensorFile::load(path)?;
        let found = tf.meta["extractor_id"].as_str().unwrap_or("").to_string();
        if found != expected_extractor {
            return Err(MetricsError::ExtractorMismatch {
                expected: expected_extractor.to_string(),
                found,
            });
        }
        let (dims, data) = tf.f64_entry("features")?;
        Ok(Self {
            features: Array2::from_shape_vec((dims[0], dims[1]), data.to_vec())
                .expect("dims consistent with data"),
            extractor_id: found,
        })
    }

    fn mean(&self) -> Array1<f64> {
        let n = self.features.nrows() as f64;
        self.features.sum_axis(ndarray::Axis(0)) / n
    }

    /// Sample covariance (N−1 divisor) regularized by `eps` on the diagonal.
    fn covariance(&self, eps: f64) -> Array2<f64> {
        let n = self.features.nrows();
        let d = self.features.ncols();
        let mu = self.mean();
        let mut cov = Array2::zeros((d, d));
        for row in self.features.rows() {
            let c = &row.to_owned() - &mu;
            for i in 0..d {
                for j in 0..d {
                    cov[[i, j]] += c[i] * c[j];
                }
            }
        }
        cov /= (n - 1) as f64;
        for i in 0..d {
            cov[[i, i]] += eps;
        }
        cov
    }
}

/// Population coefficient of variation `σ/μ`; zero mean maps to zero (a
/// degenerate, perfectly flat sequence) with a logged notice.
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    if mu == 0.0 {
        log::warn!("coefficient of variation of an all-zero sequence; reporting 0");
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    var.sqrt() / mu
}

/// Linearity of intensity editing: the coefficient of variation of the
/// perceptual distances between consecutive frames of an intensity sweep.
/// Zero means the perceived change per intensity step is constant.
pub fn lie_metric(
    images: &[Image],
    distance: impl Fn(&Image, &Image) -> f64,
) -> Result<f64, MetricsError> {
    if images.len() < 3 {
        return Err(MetricsError::TooFew {
            what: "sweep images",
            expected: 3,
            got: images.len(),
        });
    }
    let d: Vec<f64> = images
        .windows(2)
        .map(|w| distance(&w[0], &w[1]))
        .collect();
    Ok(coefficient_of_variation(&d))
}

/// Pixel L2 distance, the default desk-scale perceptual distance.
pub fn pixel_l2(a: &Image, b: &Image) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

const FRECHET_EPS: f64 = 1e-6;

/// Fréchet distance between Gaussian fits of two feature sets:
/// `||μ_A − μ_B||² + tr(Σ_A + Σ_B − 2 (Σ_A Σ_B)^{1/2})`.
///
/// The cross term is computed as the trace of `(S_A Σ_B S_A)^{1/2}` with
/// `S_A = Σ_A^{1/2}`, which is symmetric and therefore numerically stable.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64, MetricsError> {
    if a.features.ncols() != b.features.ncols() {
        return Err(MetricsError::DimMismatch(
            a.features.ncols(),
            b.features.ncols(),
        ));
    }
    for (set, name) in [(a, "A"), (b, "B")] {
        if set.features.nrows() < 2 {
            let _ = name;
            return Err(MetricsError::TooFew {
                what: "samples per set",
                expected: 2,
                got: set.features.nrows(),
            });
        }
    }
    let d = a.features.ncols();
    let mu_a = a.mean();
    let mu_b = b.mean();
    let cov_a = a.covariance(FRECHET_EPS);
    let cov_b = b.covariance(FRECHET_EPS);

    let to_na = |m: &Array2<f64>| {
        nalgebra::DMatrix::from_fn(d, d, |i, j| m[[i, j]])
    };
    let na_a = to_na(&cov_a);
    let na_b = to_na(&cov_b);

    // S_A = Σ_A^{1/2} via symmetric eigendecomposition (eigenvalues clamped
    // at zero against rounding).
    let eig_a = nalgebra::SymmetricEigen::new(na_a.clone());
    let sqrt_vals =
        nalgebra::DVector::from_iterator(d, eig_a.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    let s_a = &eig_a.eigenvectors
        * nalgebra::DMatrix::from_diagonal(&sqrt_vals)
        * eig_a.eigenvectors.transpose();

    let inner = &s_a * na_b * &s_a;
    // Symmetrize against rounding before the second eigendecomposition.
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig_inner = nalgebra::SymmetricEigen::new(inner);
    let cross: f64 = eig_inner
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();

    let mean_term = (&mu_a - &mu_b).iter().map(|x| x * x).sum::<f64>();
    let trace_a: f64 = (0..d).map(|i| cov_a[[i, i]]).sum();
    let trace_b: f64 = (0..d).map(|i| cov_b[[i, i]]).sum();
    let dist = mean_term + trace_a + trace_b - 2.0 * cross;
    if !dist.is_finite() {
        return Err(MetricsError::NonFinite);
    }
    // Tiny negative values are rounding noise on identical distributions.
    Ok(dist.max(0.0))
}

/// Cosine similarity of the mean feature vectors of two sets.
pub fn identity_similarity(a: &FeatureSet, b: &FeatureSet) -> Result<f64, MetricsError> {
    if a.features.ncols() != b.features.ncols() {
        return Err(MetricsError::DimMismatch(
            a.features.ncols(),
            b.features.ncols(),
        ));
    }
    let mu_a = a.mean();
    let mu_b = b.mean();
    let na = mu_a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = mu_b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricsError::ZeroNormMean);
    }
    let dot: f64 = mu_a.iter().zip(mu_b.iter()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Hooks for sharpness / lip-sync style scores that depend on external
/// pretrained estimators. The toolkit reserves the interface but ships no
/// implementation.
pub trait FrameScoreHook {
    fn name(&self) -> &str;
    fn score(&self, frames: &[Image]) -> Result<f64, MetricsError>;
}

#[derive(Debug, Clone)]
pub struct ClassifierConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression trained by full-batch gradient descent.
/// Deterministic (zero initialization of a convex problem), so the same data
/// always yields the same classifier. Doubles as the desk-scale emotion
/// feature extractor: its logits are the features fed to the Fréchet metric.
#[derive(Debug, Clone)]
pub struct SoftmaxClassifier {
    /// `D x K` weights.
    pub weights: Array2<f64>,
    /// `K` biases.
    pub bias: Array1<f64>,
}

impl SoftmaxClassifier {
    pub fn train(
        xs: &[Array1<f64>],
        ys: &[usize],
        n_classes: usize,
        config: &ClassifierConfig,
        _seed: u64,
    ) -> Self {
        assert_eq!(xs.len(), ys.len());
        assert!(!xs.is_empty());
        let n = xs.len();
        let d = xs[0].len();
        let mut x = Array2::zeros((n, d));
        for (i, row) in xs.iter().enumerate() {
            x.row_mut(i).assign(row);
        }
        let mut w: Array2<f64> = Array2::zeros((d, n_classes));
        let mut b: Array1<f64> = Array1::zeros(n_classes);

        for _ in 0..config.iterations {
            let mut p = x.dot(&w);
            for mut row in p.rows_mut() {
                row += &b;
                let max = row.iter().cloned().fold(f64::MIN, f64::max);
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            for (i, &label) in ys.iter().enumerate() {
                p[[i, label]] -= 1.0;
            }
            let grad_w = x.t().dot(&p) / n as f64 + &(&w * config.l2);
            let grad_b = p.sum_axis(ndarray::Axis(0)) / n as f64;
            w -= &(&grad_w * config.learning_rate);
            b -= &(&grad_b * config.learning_rate);
        }
        Self {
            weights: w,
            bias: b,
        }
    }

    /// Raw class scores (logits); the desk-scale emotion features.
    pub fn logits(&self, x: &Array1<f64>) -> Array1<f64> {
        x.dot(&self.weights) + &self.bias
    }

    pub fn predict(&self, x: &Array1<f64>) -> usize {
        let l = self.logits(x);
        l.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("non-empty logits")
    }

    pub fn accuracy(&self, xs: &[Array1<f64>], ys: &[usize]) -> f64 {
        let correct = xs
            .iter()
            .zip(ys)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        correct as f64 / xs.len() as f64
    }

    /// Stable content hash of the parameters, used as the extractor id for
    /// feature caching.
    pub fn extractor_id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.weights.iter().chain(self.bias.iter()) {
            h.update(v.to_le_bytes());
        }
        format!("softmax-{:x}", h.finalize())[..23].to_string()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), MetricsError> {
        let mut tf = TensorFile::new(serde_json::json!({
            "kind": "softmax-classifier",
            "version": 1,
        }));
        tf.insert_f64(
            "weights",
            &[self.weights.nrows(), self.weights.ncols()],
            self.weights.iter().copied().collect(),
        );
        tf.insert_f64("bias", &[self.bias.len()], self.bias.to_vec());
        tf.save(path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, MetricsError> {
        let tf = TensorFile::load(path)?;
        let (wd, w) = tf.f64_entry("weights")?;
        let (_, b) = tf.f64_entry("bias")?;
        Ok(Self {
            weights: Array2::from_shape_vec((wd[0], wd[1]), w.to_vec())
                .expect("dims consistent with data"),
            bias: Array1::from_vec(b.to_vec()),
        })
    }
}
