//! The end-to-end edit loop and the evaluation report.
//!
//! Editing a sequence runs per frame in coefficient and latent space —
//! shape transform, then latent texture shift — smooths both series over
//! time, and only then renders: decoded texture on the edited shape under
//! the frame's *original* pose, teeth filled, result blended over the
//! original frame. Pose is deliberately left unsmoothed; it comes from the
//! tracker and carries the real head motion.

use ndarray::{Array1, Array2};

use crate::image::Image;
use crate::metrics::{
    frechet_distance, identity_similarity, FeatureSet, MetricsError, SoftmaxClassifier,
};
use crate::morphable::{EmotionVector, FaceCoefficients, MorphableBasis};
use crate::mouth_inpaint::fill_teeth;
use crate::render::{blend, polygon_mask, project, rasterize, Camera};
use crate::shape_gan::{edit_shape, GeneratorParams};
use crate::tape::Tape;
use crate::temporal::{smooth_series, EmotionTrack, WindowPlacement};
use crate::texture_space::{
    fill_invalid_texels, shift_codes, EditingDirectionSet, LatentStack, TextureModel,
};

use super::{FrameRecord, PipelineError, ProjectConfig};

/// The trained artifacts an edit needs. The mouth translator is optional;
/// without it the cavity keeps the raw rendered interior.
pub struct EditModels {
    pub generator: GeneratorParams,
    pub texture: TextureModel,
    pub directions: EditingDirectionSet,
    pub mouth: Option<TextureModel>,
}

/// Runtime knobs of the edit loop.
#[derive(Debug, Clone)]
pub struct EditOptions {
    /// Temporal window applied to the edited coefficient and latent series.
    pub smoothing: Option<(Vec<f64>, WindowPlacement)>,
    /// Admit intensities in (1, 2].
    pub extrapolate: bool,
    pub erode_radius: usize,
    pub blur_sigma: f64,
}

impl EditOptions {
    pub fn from_config(config: &ProjectConfig) -> Result<Self, PipelineError> {
        let smoothing = if config.smoothing.enabled {
            Some((
                config.smoothing.weights.clone(),
                config.smoothing.placement()?,
            ))
        } else {
            None
        };
        Ok(Self {
            smoothing,
            extrapolate: config.edit.extrapolate,
            erode_radius: config.edit.erode_radius,
            blur_sigma: config.edit.blur_sigma,
        })
    }

    /// No smoothing, no extrapolation, default compositing.
    pub fn plain() -> Self {
        Self {
            smoothing: None,
            extrapolate: false,
            erode_radius: 2,
            blur_sigma: 1.5,
        }
    }
}

impl EditModels {
    /// Checks that the models fit the basis, each other, and an emotion
    /// dimension before any frame is touched.
    fn validate(&self, basis: &MorphableBasis, n_e: usize) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::ModelMismatch(msg));
        if !self.generator.trained {
            return bad("shape transform generator is untrained".into());
        }
        if self.generator.n_c() != basis.n_coeff() {
            return bad(format!(
                "shape transform works on {} coefficients, basis has {}",
                self.generator.n_c(),
                basis.n_coeff()
            ));
        }
        if self.generator.n_e() != n_e {
            return bad(format!(
                "shape transform expects {} emotions, track has {n_e}",
                self.generator.n_e()
            ));
        }
        if !self.texture.trained {
            return bad("texture model is untrained".into());
        }
        if self.directions.n_emotions() != n_e {
            return bad(format!(
                "direction set covers {} emotions, track has {n_e}",
                self.directions.n_emotions()
            ));
        }
        for d in &self.directions.directions {
            if d.dim() != (self.texture.config.n_layers, self.texture.config.latent_dim) {
                return bad(format!(
                    "directions are {}x{} but the texture model uses {}x{} codes",
                    d.nrows(),
                    d.ncols(),
                    self.texture.config.n_layers,
                    self.texture.config.latent_dim
                ));
            }
        }
        if let Some(mouth) = &self.mouth {
            if !mouth.trained {
                return bad("mouth translator is untrained".into());
            }
        }
        Ok(())
    }
}

/// Latent stack of a record: the precomputed one if present, otherwise the
/// extracted texture is hole-filled and encoded.
fn record_latent(
    record: &FrameRecord,
    model: &TextureModel,
) -> Result<LatentStack, PipelineError> {
    if let Some(w) = &record.latent {
        return Ok(w.clone());
    }
    let filled = fill_invalid_texels(&record.texture, &record.tex_valid)?;
    Ok(model.encode(&filled)?)
}

/// Renders edited coefficients + texture over the original frame: rasterize
/// under the frame pose, blend inside the face-plus-cavity mask, then fill
/// the cavity from the mouth translator.
pub fn render_face_over(
    frame: &Image,
    basis: &MorphableBasis,
    coeffs: &FaceCoefficients,
    texture: &Image,
    camera: &Camera,
    mouth: Option<&TextureModel>,
    erode_radius: usize,
    blur_sigma: f64,
) -> Result<Image, PipelineError> {
    let shape = crate::morphable::reconstruct_shape(basis, coeffs)?;
    let posed = crate::morphable::apply_pose(&shape, &coeffs.pose)?;
    let raster = rasterize(basis, &posed, texture, camera, frame.width())?;
    // The mesh leaves the mouth cavity uncovered, so the rasterized mask
    // has a hole there. The blend mask must include it, or the original
    // mouth would show through the edited face.
    let proj = project(&posed, camera)?;
    let loop_pts: Vec<(f64, f64)> = basis
        .mouth_landmark_idx
        .iter()
        .map(|&vi| (proj[[vi, 0]], proj[[vi, 1]]))
        .collect();
    let cavity = polygon_mask(&loop_pts, frame.width(), frame.height());
    let face_mask = raster.mask.union(&cavity);
    let composed = blend(&raster.image, frame, &face_mask, erode_radius, blur_sigma)?;
    match mouth {
        Some(model) => Ok(fill_teeth(&composed, basis, coeffs, camera, model)?),
        None => Ok(composed),
    }
}

/// Edits a frame sequence toward a per-frame emotion track and returns the
/// re-rendered frames.
pub fn edit_video(
    records: &[FrameRecord],
    track: &EmotionTrack,
    models: &EditModels,
    basis: &MorphableBasis,
    camera: &Camera,
    opts: &EditOptions,
) -> Result<Vec<Image>, PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::Data("no frames to edit".into()));
    }
    if track.len() != records.len() {
        return Err(PipelineError::Data(format!(
            "emotion track has {} frames, sequence has {}",
            track.len(),
            records.len()
        )));
    }
    let n_e = track.frames[0].len();
    models.validate(basis, n_e)?;
    for r in records {
        r.validate(basis)?;
    }

    // Per-frame edits in coefficient and latent space.
    let mut flats: Vec<Array1<f64>> = Vec::with_capacity(records.len());
    let mut codes: Vec<Array1<f64>> = Vec::with_capacity(records.len());
    let (n_layers, latent_dim) = (
        models.texture.config.n_layers,
        models.texture.config.latent_dim,
    );
    for (r, e) in records.iter().zip(&track.frames) {
        if e.len() != n_e {
            return Err(PipelineError::Data(format!(
                "frame {}: emotion dimension changes mid-track ({} vs {n_e})",
                r.index,
                e.len()
            )));
        }
        let edited = edit_shape(&models.generator, &r.coeffs, e)?;
        flats.push(edited.flat());
        let mut w = record_latent(r, &models.texture)?;
        shift_codes(&mut w, &models.directions, e, opts.extrapolate)?;
        codes.push(Array1::from_iter(w.codes.iter().cloned()));
    }

    // Smooth both series over time; pose stays as tracked.
    if let Some((weights, placement)) = &opts.smoothing {
        flats = smooth_series(&flats, weights, *placement)?;
        codes = smooth_series(&codes, weights, *placement)?;
    }

    let mut out = Vec::with_capacity(records.len());
    for (t, r) in records.iter().enumerate() {
        let coeffs = r
            .coeffs
            .with_flat(flats[t].as_slice().expect("contiguous"))?;
        let stack = LatentStack {
            codes: Array2::from_shape_vec((n_layers, latent_dim), codes[t].to_vec())
                .expect("length preserved by smoothing"),
        };
        let texture = models.texture.decode(&stack)?;
        out.push(render_face_over(
            &r.image,
            basis,
            &coeffs,
            &texture,
            camera,
            models.mouth.as_ref(),
            opts.erode_radius,
            opts.blur_sigma,
        )?);
    }
    Ok(out)
}

/// Re-renders each frame from its reconstruction as-is: no shape transform,
/// no latent shift, no smoothing. This is the identity baseline an all-zero
/// edit is compared against.
pub fn render_reconstruction(
    records: &[FrameRecord],
    basis: &MorphableBasis,
    camera: &Camera,
    mouth: Option<&TextureModel>,
    opts: &EditOptions,
) -> Result<Vec<Image>, PipelineError> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        r.validate(basis)?;
        let texture = fill_invalid_texels(&r.texture, &r.tex_valid)?;
        out.push(render_face_over(
            &r.image,
            basis,
            &r.coeffs,
            &texture,
            camera,
            mouth,
            opts.erode_radius,
            opts.blur_sigma,
        )?);
    }
    Ok(out)
}

/// Renders one frame at `steps + 1` evenly spaced intensities of a single
/// emotion, from 0 to 1. Feeding the result to a sweep-linearity metric
/// measures how evenly intensity maps to image change.
pub fn lie_sweep(
    record: &FrameRecord,
    emotion_index: usize,
    models: &EditModels,
    basis: &MorphableBasis,
    camera: &Camera,
    opts: &EditOptions,
    steps: usize,
) -> Result<Vec<Image>, PipelineError> {
    if steps < 2 {
        return Err(PipelineError::Config(format!(
            "an intensity sweep needs at least 2 steps, got {steps}"
        )));
    }
    let n_e = models.generator.n_e();
    if emotion_index >= n_e {
        return Err(PipelineError::Config(format!(
            "emotion index {emotion_index} out of range for {n_e} emotions"
        )));
    }
    // Encode once; every step shifts the same latent.
    let mut record = record.clone();
    record.latent = Some(record_latent(&record, &models.texture)?);
    let records = std::slice::from_ref(&record);
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let intensity = k as f64 / steps as f64;
        let e = EmotionVector::one_hot(n_e, emotion_index, intensity)?;
        let track = EmotionTrack::constant(e, 1);
        let mut frames = edit_video(records, &track, models, basis, camera, opts)?;
        out.push(frames.pop().expect("one frame in, one frame out"));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Fixed random-convolution image embedding: each image is resampled to
/// `size`², passed through the shared two-stage feature extractor, and
/// summarized by per-channel mean/std plus raw RGB mean/std.
pub fn image_feature_rows(
    images: &[Image],
    seed: u64,
    size: usize,
) -> Result<Vec<Array1<f64>>, PipelineError> {
    if size < 4 || size % 4 != 0 {
        return Err(PipelineError::Config(format!(
            "feature size must be a positive multiple of 4, got {size}"
        )));
    }
    let extractor = crate::texture_space::PerceptualExtractor::new(seed);
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        let resized = resize_bilinear(img, size);
        let mut tape = Tape::new();
        let node = tape.constant(crate::texture_space::image_to_matrix(&resized));
        let feat = extractor.features(&mut tape, node, size, size);
        let map = tape.value(feat);
        let n = map.nrows() as f64;
        let mut row = Vec::with_capacity(2 * map.ncols() + 6);
        for c in 0..map.ncols() {
            let col = map.column(c);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.push(mean);
            row.push(var.sqrt());
        }
        let px = resized.data();
        let np = (px.len() / 3) as f64;
        for c in 0..3 {
            let mean = px.iter().skip(c).step_by(3).sum::<f64>() / np;
            let var = px
                .iter()
                .skip(c)
                .step_by(3)
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / np;
            row.push(mean);
            row.push(var.sqrt());
        }
        rows.push(Array1::from_vec(row));
    }
    Ok(rows)
}

/// Identifier of [`image_feature_rows`] output, recorded in feature sets so
/// sets from different extractors never get compared.
pub fn image_feature_id(seed: u64, size: usize) -> String {
    let dim = 2 * 16 + 6;
    format!("randconv-pool-v1:seed={seed}:size={size}:dim={dim}")
}

fn resize_bilinear(img: &Image, size: usize) -> Image {
    let mut out = Image::new(size, size);
    let sx = img.width() as f64 / size as f64;
    let sy = img.height() as f64 / size as f64;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) * sx - 0.5;
            let v = (y as f64 + 0.5) * sy - 0.5;
            out.set(x, y, img.sample_bilinear(u, v));
        }
    }
    out
}

/// Named scalar results of an evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn save_csv(&self, path: impl AsRef<std::path::Path>) -> Result<(), PipelineError> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        w.write_record(["metric", "value"])
            .and_then(|_| {
                for (name, value) in &self.rows {
                    w.write_record([name.as_str(), &format!("{value}")])?;
                }
                w.flush().map_err(csv::Error::from)
            })
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        Ok(())
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        for (name, value) in &self.rows {
            writeln!(f, "{name:width$}  {value:.6}")?;
        }
        Ok(())
    }
}

/// Compares an edited sequence against a reference set of real frames:
/// Fréchet distance and identity cosine in image-feature space, per-pixel
/// deviation when the sequences pair up frame by frame, and — when an
/// emotion classifier is supplied — Fréchet distance between classifier
/// feature distributions.
pub fn run_metrics(
    edited: &[Image],
    reference: &[Image],
    classifier: Option<&SoftmaxClassifier>,
    seed: u64,
    size: usize,
) -> Result<MetricsReport, PipelineError> {
    if edited.is_empty() || reference.is_empty() {
        return Err(PipelineError::Data(
            "metrics need at least one edited and one reference image".into(),
        ));
    }
    let id = image_feature_id(seed, size);
    let edited_rows = image_feature_rows(edited, seed, size)?;
    let reference_rows = image_feature_rows(reference, seed, size)?;
    let edited_set = FeatureSet::from_rows(&edited_rows, &id)?;
    let reference_set = FeatureSet::from_rows(&reference_rows, &id)?;

    let mut rows = vec![
        (
            "frechet_image".to_string(),
            frechet_distance(&edited_set, &reference_set)?,
        ),
        (
            "identity_cosine".to_string(),
            identity_similarity(&edited_set, &reference_set)?,
        ),
    ];
    if edited.len() == reference.len() {
        let mut total = 0.0;
        for (a, b) in edited.iter().zip(reference) {
            total += a.mean_abs_diff(b)?;
        }
        rows.push((
            "mean_abs_pixel".to_string(),
            total / edited.len() as f64,
        ));
    }
    if let Some(clf) = classifier {
        let dim = edited_rows[0].len();
        if clf.weights.nrows() != dim {
            return Err(PipelineError::ModelMismatch(format!(
                "classifier expects {}-dimensional features, extractor produces {dim}",
                clf.weights.nrows()
            )));
        }
        let clf_id = clf.extractor_id();
        let logit_set = |rows: &[Array1<f64>]| -> Result<FeatureSet, MetricsError> {
            let logits: Vec<Array1<f64>> = rows.iter().map(|r| clf.logits(r)).collect();
            FeatureSet::from_rows(&logits, &clf_id)
        };
        rows.push((
            "frechet_emotion".to_string(),
            frechet_distance(&logit_set(&edited_rows)?, &logit_set(&reference_rows)?)?,
        ));
    }
    Ok(MetricsReport { rows })
}
