//! Inter-frame continuity: windowed smoothing of per-frame code vectors
//! (morphable coefficients or flattened latent stacks) and emotion-track
//! construction from sparse keyframes.

use ndarray::Array1;
use thiserror::Error;

use crate::morphable::{EmotionMode, EmotionVector, MorphableError};

#[derive(Debug, Error)]
pub enum TemporalError {
    #[error("window weights sum to {0}, expected 1")]
    WeightsNotNormalized(f64),
    #[error("window length must be odd, got {0}")]
    EvenWindow(usize),
    #[error("series is empty")]
    EmptySeries,
    #[error("series element {index} has length {got}, expected {expected}")]
    ShapeMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("keyframe indices must be strictly increasing (offender: frame {0})")]
    KeyframeOrder(usize),
    #[error("keyframe index {0} outside the sequence of {1} frames")]
    KeyframeRange(usize, usize),
    #[error("no keyframes given")]
    NoKeyframes,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad track row: {0}")]
    BadRow(String),
    #[error(transparent)]
    Emotion(#[from] MorphableError),
}

/// The default 3-tap window: the interior samples of a length-5 Hann window,
/// normalized. (The length-3 Hann window itself has zero endpoints and would
/// degenerate to the identity.)
pub const HANN3: [f64; 3] = [0.25, 0.5, 0.25];

/// How the window is placed relative to the output frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPlacement {
    /// `out[t]` averages `t-1, t, t+1` (default; needs both neighbors).
    Centered,
    /// `out[t]` averages `t-2, t-1, t`; usable while streaming.
    Causal,
}

/// Convex windowed average over a series of equal-length vectors, with edge
/// replication at the boundaries. Weights must sum to 1.
pub fn smooth_series(
    series: &[Array1<f64>],
    weights: &[f64],
    placement: WindowPlacement,
) -> Result<Vec<Array1<f64>>, TemporalError> {
    if series.is_empty() {
        return Err(TemporalError::EmptySeries);
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(TemporalError::WeightsNotNormalized(sum));
    }
    if weights.len() % 2 == 0 {
        return Err(TemporalError::EvenWindow(weights.len()));
    }
    let dim = series[0].len();
    for (i, s) in series.iter().enumerate() {
        if s.len() != dim {
            return Err(TemporalError::ShapeMismatch {
                index: i,
                expected: dim,
                got: s.len(),
            });
        }
    }
    let t_len = series.len() as isize;
    let half = (weights.len() / 2) as isize;
    let offset = match placement {
        WindowPlacement::Centered => -half,
        WindowPlacement::Causal => -(weights.len() as isize - 1),
    };
    let mut out = Vec::with_capacity(series.len());
    for t in 0..t_len {
        let mut acc = Array1::<f64>::zeros(dim);
        for (k, &w) in weights.iter().enumerate() {
            let src = (t + offset + k as isize).clamp(0, t_len - 1) as usize;
            acc.scaled_add(w, &series[src]);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Convenience: default Hann 3-tap centered smoothing.
pub fn smooth_default(series: &[Array1<f64>]) -> Result<Vec<Array1<f64>>, TemporalError> {
    smooth_series(series, &HANN3, WindowPlacement::Centered)
}

/// Sum of neighbor-difference norms; the jitter measure smoothing reduces.
pub fn total_variation(series: &[Array1<f64>]) -> f64 {
    series
        .windows(2)
        .map(|w| (&w[1] - &w[0]).iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackProvenance {
    Dense,
    KeyframeInterpolated,
}

/// Per-frame emotion vectors for a whole sequence.
#[derive(Debug, Clone)]
pub struct EmotionTrack {
    pub frames: Vec<EmotionVector>,
    pub provenance: TrackProvenance,
}

impl EmotionTrack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn constant(e: EmotionVector, t: usize) -> Self {
        Self {
            frames: vec![e; t],
            provenance: TrackProvenance::Dense,
        }
    }

    /// Writes `frame,e0,...,e{n-1}` rows.
    pub fn save_csv(&self, path: impl AsRef<std::path::Path>) -> Result<(), TemporalError> {
        let mut w = csv::Writer::from_path(path)?;
        let n_e = self.frames.first().map_or(0, |e| e.len());
        let mut header = vec!["frame".to_string()];
        header.extend((0..n_e).map(|i| format!("e{i}")));
        w.write_record(&header)?;
        for (i, e) in self.frames.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(e.values().iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<std::path::Path>) -> Result<Self, TemporalError> {
        let rows = read_rows(path)?;
        let frames = rows
            .into_iter()
            .map(|(_, e)| e)
            .collect::<Vec<_>>();
        Ok(Self {
            frames,
            provenance: TrackProvenance::Dense,
        })
    }
}

fn read_rows(
    path: impl AsRef<std::path::Path>,
) -> Result<Vec<(usize, EmotionVector)>, TemporalError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut it = rec.iter();
        let frame: usize = it
            .next()
            .ok_or_else(|| TemporalError::BadRow("empty row".into()))?
            .trim()
            .parse()
            .map_err(|e| TemporalError::BadRow(format!("frame column: {e}")))?;
        let values: Vec<f64> = it
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| TemporalError::BadRow(format!("intensity column: {e}")))
            })
            .collect::<Result<_, _>>()?;
        out.push((
            frame,
            EmotionVector::new(values, EmotionMode::MultiLabel)?,
        ));
    }
    Ok(out)
}

/// Reads sparse keyframe rows (same schema as a dense track).
pub fn load_keyframes_csv(
    path: impl AsRef<std::path::Path>,
) -> Result<Vec<(usize, EmotionVector)>, TemporalError> {
    read_rows(path)
}

/// Componentwise linear interpolation between keyframes; before the first and
/// after the last keyframe, the nearest keyframe value is held. Cross-fades
/// between different emotions legitimately produce multi-label vectors.
pub fn interpolate_emotions(
    keyframes: &[(usize, EmotionVector)],
    t_count: usize,
) -> Result<EmotionTrack, TemporalError> {
    if keyframes.is_empty() {
        return Err(TemporalError::NoKeyframes);
    }
    for w in keyframes.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(TemporalError::KeyframeOrder(w[1].0));
        }
    }
    for &(idx, _) in keyframes {
        if idx >= t_count {
            return Err(TemporalError::KeyframeRange(idx, t_count));
        }
    }
    let n_e = keyframes[0].1.len();
    let mut frames = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let e = if t <= keyframes[0].0 {
            keyframes[0].1.clone()
        } else if t >= keyframes[keyframes.len() - 1].0 {
            keyframes[keyframes.len() - 1].1.clone()
        } else {
            let seg = keyframes
                .windows(2)
                .find(|w| w[0].0 <= t && t < w[1].0)
                .expect("t between first and last keyframe");
            let (t0, ref e0) = seg[0];
            let (t1, ref e1) = seg[1];
            let u = (t - t0) as f64 / (t1 - t0) as f64;
            let values: Vec<f64> = (0..n_e)
                .map(|i| (1.0 - u) * e0.values()[i] + u * e1.values()[i])
                .collect();
            EmotionVector::new(values, EmotionMode::MultiLabel)?
        };
        frames.push(e);
    }
    Ok(EmotionTrack {
        frames,
        provenance: TrackProvenance::KeyframeInterpolated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_series(vals: &[f64]) -> Vec<Array1<f64>> {
        vals.iter().map(|&v| Array1::from_vec(vec![v])).collect()
    }

    #[test]
    fn spike_is_averaged_with_hann_weights() {
        let s = scalar_series(&[0.0, 3.0, 0.0]);
        let out = smooth_default(&s).unwrap();
        assert!((out[1][0] - 1.5).abs() < 1e-12);
        // Edges replicate: out[0] = 0.25*0 + 0.5*0 + 0.25*3.
        assert!((out[0][0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn constant_and_singleton_series_are_fixed_points() {
        let s = scalar_series(&[2.5; 7]);
        let out = smooth_default(&s).unwrap();
        for v in out {
            assert_eq!(v[0], 2.5);
        }
        let one = scalar_series(&[1.25]);
        assert_eq!(smooth_default(&one).unwrap()[0][0], 1.25);
    }

    #[test]
    fn bad_weights_are_rejected() {
        let s = scalar_series(&[1.0, 2.0]);
        assert!(matches!(
            smooth_series(&s, &[0.3, 0.3, 0.3], WindowPlacement::Centered),
            Err(TemporalError::WeightsNotNormalized(_))
        ));
        assert!(matches!(
            smooth_series(&s, &[0.5, 0.5], WindowPlacement::Centered),
            Err(TemporalError::EvenWindow(2))
        ));
        assert!(matches!(
            smooth_default(&[]),
            Err(TemporalError::EmptySeries)
        ));
    }

    #[test]
    fn causal_window_only_looks_backward() {
        let s = scalar_series(&[0.0, 0.0, 0.0, 4.0]);
        let out = smooth_series(&s, &HANN3, WindowPlacement::Causal).unwrap();
        // Frame 2 must not see the future spike at frame 3.
        assert_eq!(out[2][0], 0.0);
        // out[3] = 0.25*s[1] + 0.5*s[2] + 0.25*s[3]
        assert!((out[3][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reversal_commutes_for_symmetric_window() {
        let s = scalar_series(&[0.1, 0.9, 0.4, 0.7, 0.2, 0.6]);
        let fwd = smooth_default(&s).unwrap();
        let mut rev_in = s.clone();
        rev_in.reverse();
        let mut rev_out = smooth_default(&rev_in).unwrap();
        rev_out.reverse();
        for (a, b) in fwd.iter().zip(&rev_out) {
            assert!((a[0] - b[0]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn smoothing_is_linear(
            xs in prop::collection::vec(-10.0f64..10.0, 3..12),
            ys_seed in 0u64..1000,
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ys_seed);
            let ys: Vec<f64> = (0..xs.len()).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let sx = scalar_series(&xs);
            let sy = scalar_series(&ys);
            let mixed: Vec<Array1<f64>> = sx.iter().zip(&sy)
                .map(|(x, y)| x * a + y * b)
                .collect();
            let lhs = smooth_default(&mixed).unwrap();
            let sx_s = smooth_default(&sx).unwrap();
            let sy_s = smooth_default(&sy).unwrap();
            for t in 0..xs.len() {
                let rhs = a * sx_s[t][0] + b * sy_s[t][0];
                prop_assert!((lhs[t][0] - rhs).abs() < 1e-9);
            }
        }

        #[test]
        fn smoothing_never_increases_total_variation(
            xs in prop::collection::vec(-5.0f64..5.0, 2..20),
        ) {
            let s = scalar_series(&xs);
            let out = smooth_default(&s).unwrap();
            let tv_in = total_variation(&s);
            let tv_out = total_variation(&out);
            prop_assert!(tv_out <= tv_in + 1e-12, "{tv_out} > {tv_in}");
        }
    }

    #[test]
    fn keyframe_interpolation_midpoint_and_crossfade() {
        let happy = EmotionVector::one_hot(3, 0, 1.0).unwrap();
        let sad = EmotionVector::one_hot(3, 1, 1.0).unwrap();
        let neutral = EmotionVector::zeros(3);

        let track = interpolate_emotions(&[(0, neutral.clone()), (10, happy.clone())], 11).unwrap();
        assert!((track.frames[5].values()[0] - 0.5).abs() < 1e-12);
        assert_eq!(track.frames[0].values()[0], 0.0);
        assert_eq!(track.frames[10].values()[0], 1.0);

        let fade = interpolate_emotions(&[(0, happy), (10, sad)], 11).unwrap();
        let mid = &fade.frames[5];
        assert!((mid.values()[0] - 0.5).abs() < 1e-12);
        assert!((mid.values()[1] - 0.5).abs() < 1e-12);

        let constant = interpolate_emotions(&[(4, neutral)], 8).unwrap();
        assert_eq!(constant.frames.len(), 8);
        assert!(constant.frames.iter().all(|e| e.is_neutral()));
    }

    #[test]
    fn keyframe_validation() {
        let e = EmotionVector::zeros(2);
        assert!(matches!(
            interpolate_emotions(&[(3, e.clone()), (3, e.clone())], 5),
            Err(TemporalError::KeyframeOrder(3))
        ));
        assert!(matches!(
            interpolate_emotions(&[(9, e.clone())], 5),
            Err(TemporalError::KeyframeRange(9, 5))
        ));
        assert!(matches!(
            interpolate_emotions(&[], 5),
            Err(TemporalError::NoKeyframes)
        ));
    }

    #[test]
    fn track_csv_round_trip() {
        let dir = std::env::temp_dir().join("faceedit-temporal-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("track.csv");
        let track = interpolate_emotions(
            &[
                (0, EmotionVector::zeros(3)),
                (4, EmotionVector::one_hot(3, 2, 1.0).unwrap()),
            ],
            6,
        )
        .unwrap();
        track.save_csv(&path).unwrap();
        let back = EmotionTrack::load_csv(&path).unwrap();
        assert_eq!(back.len(), track.len());
        for (a, b) in track.frames.iter().zip(&back.frames) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        std::fs::remove_file(&path).ok();
    }
}
