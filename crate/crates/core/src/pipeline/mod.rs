//! Orchestration: project configuration, dataset ingestion, cached per-frame
//! reconstruction, the end-to-end edit loop, and evaluation reports.
//!
//! The per-frame flow wired here is reconstruct → edit shape → edit texture →
//! smooth across the sequence → render with the original pose → fill teeth →
//! blend over the original background. Training commands and the editor all
//! consume the same [`FrameRecord`]s, produced by [`load_records`] from a
//! manifest + tracker output, with reconstruction results cached on disk by
//! content hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::{Image, ImageError, Mask};
use crate::metrics::MetricsError;
use crate::morphable::{
    fit_coefficients, EmotionMode, EmotionVector, FaceCoefficients, MorphableBasis,
    MorphableError,
};
use crate::mouth_inpaint::{MouthError, MouthPairConfig};
use crate::render::{extract_texture, Camera, RenderError};
use crate::shape_gan::{ShapeGanConfig, ShapeGanError};
use crate::temporal::{TemporalError, WindowPlacement};
use crate::tensorfile::{TensorFile, TensorFileError};
use crate::texture_space::{TextureConfig, TextureError};

mod edit;
mod synth;

pub use edit::{
    edit_video, image_feature_rows, lie_sweep, render_reconstruction, run_metrics, EditModels,
    EditOptions, MetricsReport,
};
pub use synth::{generate_frame_corpus, CorpusSummary, FrameCorpusConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Unusable configuration (bad file, bad values, missing referenced
    /// inputs). Maps to exit code 2.
    #[error("configuration: {0}")]
    Config(String),
    /// Loaded artifacts that do not fit each other or the data. Exit code 3.
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    /// Broken or inconsistent data (manifest, frames, tracks). Exit code 4.
    #[error("data: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Morphable(#[from] MorphableError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    ShapeGan(#[from] ShapeGanError),
    #[error(transparent)]
    Texture(#[from] TextureError),
    #[error(transparent)]
    Mouth(#[from] MouthError),
    #[error(transparent)]
    Temporal(#[from] TemporalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorFileError),
}

impl PipelineError {
    /// Process exit code for command-line front ends: 2 configuration,
    /// 3 model mismatch, 4 any data or processing failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::ModelMismatch(_) => 3,
            _ => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Project configuration
// ---------------------------------------------------------------------------

/// All file locations a project uses. Relative paths are resolved against the
/// directory containing the config file at load time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub basis: PathBuf,
    pub dataset_root: PathBuf,
    pub manifest: PathBuf,
    /// Tracker output (per-frame pose + 2-D landmarks).
    pub tracks: PathBuf,
    pub output_dir: PathBuf,
    /// Reconstruction cache; empty disables caching.
    pub cache_dir: PathBuf,
    pub shape_checkpoint: PathBuf,
    pub texture_model: PathBuf,
    pub directions: PathBuf,
    pub mouth_model: PathBuf,
    /// Optional emotion classifier for the Fréchet emotion-feature row.
    pub classifier: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            basis: "data/basis.tf".into(),
            dataset_root: "data".into(),
            manifest: "data/manifest.csv".into(),
            tracks: "data/tracks.tf".into(),
            output_dir: "out".into(),
            cache_dir: "out/cache".into(),
            shape_checkpoint: "out/shape.ckpt".into(),
            texture_model: "out/texture.ckpt".into(),
            directions: "out/directions.tf".into(),
            mouth_model: "out/mouth.ckpt".into(),
            classifier: None,
        }
    }
}

/// Non-neutral emotion names, in vector order, plus the labeling mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmotionsConfig {
    pub names: Vec<String>,
    /// `"single"` restricts emotion vectors to one active component
    /// (training labels); `"multi"` admits blends (cross-fades).
    pub mode: String,
}

impl Default for EmotionsConfig {
    fn default() -> Self {
        Self {
            names: [
                "angry",
                "contempt",
                "disgusted",
                "fear",
                "happy",
                "sad",
                "surprised",
            ]
            .map(String::from)
            .to_vec(),
            mode: "single".into(),
        }
    }
}

impl EmotionsConfig {
    pub fn n_e(&self) -> usize {
        self.names.len()
    }

    pub fn mode(&self) -> Result<EmotionMode, PipelineError> {
        match self.mode.as_str() {
            "single" => Ok(EmotionMode::SingleLabel),
            "multi" => Ok(EmotionMode::MultiLabel),
            other => Err(PipelineError::Config(format!(
                "emotions.mode must be \"single\" or \"multi\", got {other:?}"
            ))),
        }
    }

    /// Index of a non-neutral emotion name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Dataset ingestion knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Keep every `stride`-th frame of each clip (1 = all frames).
    pub stride: usize,
    /// Number of non-zero intensity levels in the labels.
    pub intensity_levels: u32,
    /// Ridge term of the landmark fit.
    pub fit_ridge: f64,
    /// Resolution of extracted textures; must match the texture model.
    pub tex_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            intensity_levels: 3,
            fit_ridge: 1e-6,
            tex_size: 128,
        }
    }
}

/// Mouth translator settings: patch collection sizes plus its own texture
/// model (whose `tex_size` must equal the crop size).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MouthConfig {
    pub pair: MouthPairConfig,
    pub model: TextureConfig,
}

impl Default for MouthConfig {
    fn default() -> Self {
        let pair = MouthPairConfig::default();
        let model = TextureConfig {
            tex_size: pair.crop_size,
            ..TextureConfig::default()
        };
        Self { pair, model }
    }
}

/// Windowed smoothing of the edited coefficient and latent series.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    pub enabled: bool,
    /// Convex window; must sum to 1 with an odd tap count.
    pub weights: Vec<f64>,
    /// `"centered"` or `"causal"`.
    pub placement: String,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            weights: vec![0.25, 0.5, 0.25],
            placement: "centered".into(),
        }
    }
}

impl SmoothingConfig {
    pub fn placement(&self) -> Result<WindowPlacement, PipelineError> {
        match self.placement.as_str() {
            "centered" => Ok(WindowPlacement::Centered),
            "causal" => Ok(WindowPlacement::Causal),
            other => Err(PipelineError::Config(format!(
                "smoothing.placement must be \"centered\" or \"causal\", got {other:?}"
            ))),
        }
    }
}

/// Editing and compositing knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    /// Admit intensities in (1, 2] instead of rejecting them.
    pub extrapolate: bool,
    /// Blend mask erosion radius in pixels.
    pub erode_radius: usize,
    /// Blend mask blur sigma in pixels.
    pub blur_sigma: f64,
    /// Run the teeth-filling stage (requires a trained mouth model).
    pub fill_teeth: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            extrapolate: false,
            erode_radius: 2,
            blur_sigma: 1.5,
            fill_teeth: true,
        }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seed of the fixed random-convolution image feature extractor.
    pub feature_seed: u64,
    /// Images are resampled to this square size before feature extraction;
    /// must be a multiple of 4.
    pub feature_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            feature_seed: 7001,
            feature_size: 64,
        }
    }
}

/// One structured config file drives every command. All fields have
/// defaults, so an empty file is a valid project rooted at the current
/// directory; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub paths: PathsConfig,
    pub camera: Camera,
    pub emotions: EmotionsConfig,
    pub data: DataConfig,
    pub shape_gan: ShapeGanConfig,
    pub texture: TextureConfig,
    pub mouth: MouthConfig,
    pub smoothing: SmoothingConfig,
    pub edit: EditConfig,
    pub eval: EvalConfig,
}

/// Commands declare which configured files they read so existence can be
/// checked up front (a missing input is a configuration error, reported
/// before any work starts).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SynthData,
    TrainShape,
    TrainTexture,
    TrainMouth,
    Directions,
    Edit,
    Metrics,
    LieSweep,
}

impl ProjectConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let mut config: ProjectConfig = toml::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    /// Anchors every relative path to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        resolve(&mut self.paths.basis);
        resolve(&mut self.paths.dataset_root);
        resolve(&mut self.paths.manifest);
        resolve(&mut self.paths.tracks);
        resolve(&mut self.paths.output_dir);
        resolve(&mut self.paths.cache_dir);
        resolve(&mut self.paths.shape_checkpoint);
        resolve(&mut self.paths.texture_model);
        resolve(&mut self.paths.directions);
        resolve(&mut self.paths.mouth_model);
        if let Some(c) = &mut self.paths.classifier {
            resolve(c);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(msg));
        if self.emotions.names.is_empty() {
            return bad("emotions.names must not be empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.emotions.names {
            if n == "neutral" {
                return bad("\"neutral\" is implicit and cannot be an emotion name".into());
            }
            if !seen.insert(n) {
                return bad(format!("duplicate emotion name {n:?}"));
            }
        }
        self.emotions.mode()?;
        self.smoothing.placement()?;
        if self.smoothing.weights.is_empty() || self.smoothing.weights.len() % 2 == 0 {
            return bad("smoothing.weights needs an odd number of taps".into());
        }
        let sum: f64 = self.smoothing.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("smoothing.weights sum to {sum}, expected 1"));
        }
        if self.data.stride == 0 {
            return bad("data.stride must be at least 1".into());
        }
        if self.data.intensity_levels == 0 {
            return bad("data.intensity_levels must be at least 1".into());
        }
        if self.mouth.model.tex_size != self.mouth.pair.crop_size {
            return bad(format!(
                "mouth.model.tex_size ({}) must equal mouth.pair.crop_size ({})",
                self.mouth.model.tex_size, self.mouth.pair.crop_size
            ));
        }
        if self.eval.feature_size == 0 || self.eval.feature_size % 4 != 0 {
            return bad(format!(
                "eval.feature_size must be a positive multiple of 4, got {}",
                self.eval.feature_size
            ));
        }
        Ok(())
    }

    /// Verifies that every input file a stage reads exists.
    pub fn check_stage_inputs(&self, stage: Stage) -> Result<(), PipelineError> {
        let p = &self.paths;
        let mut required: Vec<(&str, &Path)> = Vec::new();
        let dataset: [(&str, &Path); 3] = [
            ("paths.basis", &p.basis),
            ("paths.manifest", &p.manifest),
            ("paths.tracks", &p.tracks),
        ];
        match stage {
            Stage::SynthData => {}
            Stage::TrainShape | Stage::TrainTexture => required.extend(dataset),
            Stage::TrainMouth => required.extend(dataset),
            Stage::Directions => {
                required.extend(dataset);
                required.push(("paths.texture_model", &p.texture_model));
            }
            Stage::Edit | Stage::LieSweep => {
                required.extend(dataset);
                required.push(("paths.shape_checkpoint", &p.shape_checkpoint));
                required.push(("paths.texture_model", &p.texture_model));
                required.push(("paths.directions", &p.directions));
                if self.edit.fill_teeth {
                    required.push(("paths.mouth_model", &p.mouth_model));
                }
            }
            Stage::Metrics => {
                if let Some(c) = &p.classifier {
                    required.push(("paths.classifier", c));
                }
            }
        }
        for (name, path) in required {
            if !path.exists() {
                return Err(PipelineError::Config(format!(
                    "{name} refers to {}, which does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Manifest ingestion
// ---------------------------------------------------------------------------

/// One manifest line. `path` is relative to the dataset root; `frame` orders
/// frames within a clip.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub actor: String,
    pub emotion: String,
    pub intensity_level: u32,
    pub clip: String,
    pub frame: u64,
}

/// A manifest row with its emotion label parsed and its path resolved.
#[derive(Debug, Clone)]
pub struct IngestRecord {
    /// Absolute frame location.
    pub path: PathBuf,
    pub row: ManifestRow,
    pub emotion: EmotionVector,
}

/// Reads and validates the manifest: labels are parsed into emotion vectors
/// (`intensity_level / intensity_levels`), per-clip frames are subsampled by
/// `stride`, referenced files must exist, and the result is path-sorted so
/// ingestion order never depends on the manifest's row order.
pub fn ingest_dataset(
    root: &Path,
    manifest: &Path,
    emotions: &EmotionsConfig,
    data: &DataConfig,
) -> Result<Vec<IngestRecord>, PipelineError> {
    let mode = emotions.mode()?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| PipelineError::Data(format!("manifest {}: {e}", manifest.display())))?;
    let mut by_clip: BTreeMap<(String, String), Vec<ManifestRow>> = BTreeMap::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row =
            row.map_err(|e| PipelineError::Data(format!("manifest row {}: {e}", i + 2)))?;
        by_clip
            .entry((row.actor.clone(), row.clip.clone()))
            .or_default()
            .push(row);
    }

    let levels = data.intensity_levels;
    let mut records = Vec::new();
    for ((_, _), mut rows) in by_clip {
        rows.sort_by_key(|r| r.frame);
        for row in rows.into_iter().step_by(data.stride) {
            let emotion = if row.emotion == "neutral" {
                if row.intensity_level != 0 {
                    return Err(PipelineError::Data(format!(
                        "{}: neutral frames must have intensity_level 0, got {}",
                        row.path, row.intensity_level
                    )));
                }
                EmotionVector::zeros(emotions.n_e())
            } else {
                let Some(idx) = emotions.index_of(&row.emotion) else {
                    return Err(PipelineError::Data(format!(
                        "{}: unknown emotion {:?} (declared: {:?} or \"neutral\")",
                        row.path, row.emotion, emotions.names
                    )));
                };
                if row.intensity_level == 0 || row.intensity_level > levels {
                    return Err(PipelineError::Data(format!(
                        "{}: intensity_level {} outside declared range 1..={levels}",
                        row.path, row.intensity_level
                    )));
                }
                let intensity = row.intensity_level as f64 / levels as f64;
                let mut values = vec![0.0; emotions.n_e()];
                values[idx] = intensity;
                EmotionVector::new(values, mode)?
            };
            let path = root.join(&row.path);
            if !path.exists() {
                return Err(PipelineError::Data(format!(
                    "manifest references {}, which does not exist",
                    path.display()
                )));
            }
            records.push(IngestRecord { path, row, emotion });
        }
    }
    records.sort_by(|a, b| a.row.path.cmp(&b.row.path));
    Ok(records)
}

// ---------------------------------------------------------------------------
// Tracker output
// ---------------------------------------------------------------------------

/// Stand-in for a face tracker's per-frame output: the head pose and the 2-D
/// pixel positions of the basis landmarks. Real-data projects would produce
/// this file with an external detector; the synthetic corpus generator writes
/// it from ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackEntry {
    pub pose: [f64; 6],
    /// `L x 2` pixel coordinates, ordered like `basis.landmark_idx`.
    pub landmarks: Array2<f64>,
}

/// Per-frame tracks keyed by manifest path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackSet {
    entries: BTreeMap<String, TrackEntry>,
}

const TRACKS_FORMAT: &str = "face-tracks";

#[derive(Serialize, Deserialize)]
struct TracksMeta {
    format: String,
    version: u32,
    paths: Vec<String>,
}

impl TrackSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, entry: TrackEntry) {
        self.entries.insert(path.into(), entry);
    }

    pub fn get(&self, path: &str) -> Option<&TrackEntry> {
        self.entries.get(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        let meta = TracksMeta {
            format: TRACKS_FORMAT.into(),
            version: 1,
            paths: self.entries.keys().cloned().collect(),
        };
        let mut file = TensorFile::new(serde_json::to_value(&meta).expect("serializable meta"));
        for (i, entry) in self.entries.values().enumerate() {
            file.insert_f64(&format!("{i}.pose"), &[6], entry.pose.to_vec());
            let l = entry.landmarks.nrows();
            file.insert_f64(
                &format!("{i}.landmarks"),
                &[l, 2],
                entry.landmarks.iter().cloned().collect(),
            );
        }
        file.save(path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let file = TensorFile::load(path.as_ref())?;
        let meta: TracksMeta = serde_json::from_value(file.meta.clone())
            .map_err(|e| PipelineError::Data(format!("track file metadata: {e}")))?;
        if meta.format != TRACKS_FORMAT || meta.version != 1 {
            return Err(PipelineError::Data(format!(
                "not a track file: format {:?} version {}",
                meta.format, meta.version
            )));
        }
        let mut entries = BTreeMap::new();
        for (i, p) in meta.paths.into_iter().enumerate() {
            let (pd, pv) = file.f64_entry(&format!("{i}.pose"))?;
            if pd != [6] {
                return Err(PipelineError::Data(format!("track {p}: pose dims {pd:?}")));
            }
            let mut pose = [0.0; 6];
            pose.copy_from_slice(pv);
            let (ld, lv) = file.f64_entry(&format!("{i}.landmarks"))?;
            if ld.len() != 2 || ld[1] != 2 {
                return Err(PipelineError::Data(format!(
                    "track {p}: landmark dims {ld:?}"
                )));
            }
            let landmarks = Array2::from_shape_vec((ld[0], 2), lv.to_vec())
                .expect("dims consistent with data");
            entries.insert(p, TrackEntry { pose, landmarks });
        }
        Ok(Self { entries })
    }
}

// ---------------------------------------------------------------------------
// Reconstruction and caching
// ---------------------------------------------------------------------------

/// Everything the pipeline knows about one frame. The emotion carries the
/// training label during ingestion and the edit target during editing.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub image: Image,
    pub coeffs: FaceCoefficients,
    /// Extracted texture with its valid-texel mask.
    pub texture: Image,
    pub tex_valid: Mask,
    /// Latent code, when one has been computed for the current model.
    pub latent: Option<crate::texture_space::LatentStack>,
    pub emotion: EmotionVector,
    pub index: usize,
}

impl FrameRecord {
    /// Checks that the fields describe the same face and sizes.
    pub fn validate(&self, basis: &MorphableBasis) -> Result<(), PipelineError> {
        if self.image.width() != self.image.height() {
            return Err(PipelineError::Data(format!(
                "frame {}: image {}x{} is not square",
                self.index,
                self.image.width(),
                self.image.height()
            )));
        }
        if self.coeffs.alpha.len() != basis.n_alpha() || self.coeffs.beta.len() != basis.n_beta()
        {
            return Err(PipelineError::ModelMismatch(format!(
                "frame {}: coefficients ({}, {}) do not fit the basis ({}, {})",
                self.index,
                self.coeffs.alpha.len(),
                self.coeffs.beta.len(),
                basis.n_alpha(),
                basis.n_beta()
            )));
        }
        if self.texture.width() != self.texture.height()
            || self.texture.width() != self.tex_valid.width()
            || self.texture.height() != self.tex_valid.height()
        {
            return Err(PipelineError::Data(format!(
                "frame {}: texture {}x{} / mask {}x{} sizes disagree",
                self.index,
                self.texture.width(),
                self.texture.height(),
                self.tex_valid.width(),
                self.tex_valid.height()
            )));
        }
        Ok(())
    }
}

/// Converts tracked pixel landmarks to model units for the orthographic fit.
fn landmarks_to_model(
    landmarks: &Array2<f64>,
    camera: &Camera,
) -> Result<Array2<f64>, PipelineError> {
    match *camera {
        Camera::Orthographic { scale, cx, cy } => {
            let mut out = landmarks.clone();
            for mut row in out.rows_mut() {
                row[0] = (row[0] - cx) / scale;
                row[1] = (row[1] - cy) / scale;
            }
            Ok(out)
        }
        Camera::Pinhole { .. } => Err(PipelineError::Config(
            "coefficient fitting requires an orthographic camera".into(),
        )),
    }
}

/// Fits coefficients to one tracked frame and extracts its texture.
pub fn reconstruct_frame(
    frame: &Image,
    track: &TrackEntry,
    basis: &MorphableBasis,
    camera: &Camera,
    tex_size: usize,
    ridge: f64,
) -> Result<(FaceCoefficients, Image, Mask), PipelineError> {
    let lm = landmarks_to_model(&track.landmarks, camera)?;
    let (alpha, beta) = fit_coefficients(&lm, basis, &track.pose, ridge)?;
    let mut coeffs = FaceCoefficients::zeros(basis.n_alpha(), basis.n_beta());
    coeffs.alpha = alpha;
    coeffs.beta = beta;
    coeffs.pose = track.pose;
    let shape = crate::morphable::reconstruct_shape(basis, &coeffs)?;
    let posed = crate::morphable::apply_pose(&shape, &coeffs.pose)?;
    let (texture, valid) = extract_texture(frame, basis, &posed, camera, tex_size)?;
    Ok((coeffs, texture, valid))
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    format!("{:x}", h.finalize())
}

/// Disk cache of per-frame reconstructions, keyed by a content hash of every
/// input that influences the result. Cache corruption is never fatal: bad
/// entries are recomputed.
pub struct FrameCache {
    dir: Option<PathBuf>,
}

const CACHE_FORMAT: &str = "recon-cache";

impl FrameCache {
    /// A cache rooted at `dir`, created on demand; `None` disables caching.
    pub fn new(dir: Option<PathBuf>) -> Result<Self, PipelineError> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(io_err(d))?;
        }
        Ok(Self { dir })
    }

    pub fn disabled() -> Self {
        Self { dir: None }
    }

    /// Content key of a reconstruction: frame bytes, basis identity, camera,
    /// extraction size, fit inputs.
    pub fn reconstruction_key(
        frame_bytes: &[u8],
        basis_hash: &str,
        camera: &Camera,
        tex_size: usize,
        ridge: f64,
        track: &TrackEntry,
    ) -> String {
        let camera_json = serde_json::to_vec(camera).expect("camera serializes");
        let mut track_bytes = Vec::with_capacity(8 * (6 + track.landmarks.len()));
        for v in track.pose.iter().chain(track.landmarks.iter()) {
            track_bytes.extend_from_slice(&v.to_le_bytes());
        }
        sha_hex(&[
            b"recon-v1",
            frame_bytes,
            basis_hash.as_bytes(),
            &camera_json,
            &tex_size.to_le_bytes(),
            &ridge.to_le_bytes(),
            &track_bytes,
        ])
    }

    fn entry_path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.tf")))
    }

    pub fn load(&self, key: &str) -> Option<(FaceCoefficients, Image, Mask)> {
        let path = self.entry_path(key)?;
        if !path.exists() {
            return None;
        }
        match Self::read_entry(&path) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
                None
            }
        }
    }

    fn read_entry(path: &Path) -> Result<(FaceCoefficients, Image, Mask), PipelineError> {
        let file = TensorFile::load(path)?;
        if file.meta["format"].as_str() != Some(CACHE_FORMAT) {
            return Err(PipelineError::Data("not a cache entry".into()));
        }
        let (ad, av) = file.f64_entry("alpha")?;
        let (bd, bv) = file.f64_entry("beta")?;
        let (pd, pv) = file.f64_entry("pose")?;
        if ad.len() != 1 || bd.len() != 1 || pd != [6] {
            return Err(PipelineError::Data("cache entry has bad dims".into()));
        }
        let mut coeffs = FaceCoefficients::zeros(av.len(), bv.len());
        coeffs.alpha = av.to_vec();
        coeffs.beta = bv.to_vec();
        coeffs.pose.copy_from_slice(pv);
        let (td, tv) = file.f64_entry("texture")?;
        let (vd, vv) = file.f64_entry("valid")?;
        if td.len() != 3 || td[2] != 3 || vd.len() != 2 || vd[0] != td[0] || vd[1] != td[1] {
            return Err(PipelineError::Data("cache entry has bad dims".into()));
        }
        let (h, w) = (td[0], td[1]);
        let mut texture = Image::new(w, h);
        let mut valid = Mask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let o = (y * w + x) * 3;
                texture.set(x, y, [tv[o], tv[o + 1], tv[o + 2]]);
                valid.set(x, y, vv[y * w + x]);
            }
        }
        Ok((coeffs, texture, valid))
    }

    pub fn store(
        &self,
        key: &str,
        coeffs: &FaceCoefficients,
        texture: &Image,
        valid: &Mask,
    ) -> Result<(), PipelineError> {
        let Some(path) = self.entry_path(key) else {
            return Ok(());
        };
        let mut file = TensorFile::new(serde_json::json!({
            "format": CACHE_FORMAT,
            "version": 1,
        }));
        file.insert_f64("alpha", &[coeffs.alpha.len()], coeffs.alpha.clone());
        file.insert_f64("beta", &[coeffs.beta.len()], coeffs.beta.clone());
        file.insert_f64("pose", &[6], coeffs.pose.to_vec());
        file.insert_f64(
            "texture",
            &[texture.height(), texture.width(), 3],
            texture.data().to_vec(),
        );
        file.insert_f64(
            "valid",
            &[valid.height(), valid.width()],
            valid.data().to_vec(),
        );
        file.save(&path)?;
        Ok(())
    }
}

/// Ingests the manifest and produces fully reconstructed [`FrameRecord`]s,
/// reading and populating the cache. `basis_hash` must identify the basis
/// contents (e.g. a hash of its file); it keys the cache.
pub fn load_records(
    records: &[IngestRecord],
    tracks: &TrackSet,
    basis: &MorphableBasis,
    basis_hash: &str,
    camera: &Camera,
    data: &DataConfig,
    cache: &FrameCache,
) -> Result<Vec<FrameRecord>, PipelineError> {
    let mut out = Vec::with_capacity(records.len());
    for (index, rec) in records.iter().enumerate() {
        let track = tracks.get(&rec.row.path).ok_or_else(|| {
            PipelineError::Data(format!("no track entry for {}", rec.row.path))
        })?;
        let frame_bytes = std::fs::read(&rec.path).map_err(io_err(&rec.path))?;
        let image = Image::load_png(&rec.path)?;
        let key = FrameCache::reconstruction_key(
            &frame_bytes,
            basis_hash,
            camera,
            data.tex_size,
            data.fit_ridge,
            track,
        );
        let (coeffs, texture, tex_valid) = match cache.load(&key) {
            Some(hit) => hit,
            None => {
                let computed = reconstruct_frame(
                    &image,
                    track,
                    basis,
                    camera,
                    data.tex_size,
                    data.fit_ridge,
                )?;
                cache.store(&key, &computed.0, &computed.1, &computed.2)?;
                computed
            }
        };
        let record = FrameRecord {
            image,
            coeffs,
            texture,
            tex_valid,
            latent: None,
            emotion: rec.emotion.clone(),
            index,
        };
        record.validate(basis)?;
        out.push(record);
    }
    Ok(out)
}

/// Hash of a file's contents, for cache keys tied to artifacts on disk.
pub fn file_content_hash(path: impl AsRef<Path>) -> Result<String, PipelineError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(sha_hex(&[&bytes]))
}
