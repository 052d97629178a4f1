//! Teeth completion for rendered face frames.
//!
//! The face mesh has no teeth or mouth interior, so a re-rendered frame
//! shows a blank cavity wherever the mouth is open. This module fills that
//! cavity with a learned encoder-decoder translator:
//!
//! 1. **Alignment.** Mouth landmarks are projected twice — once under the
//!    frame's head pose and once with the pose zeroed — and a projective
//!    transform between the two point sets frontalizes the mouth, so the
//!    translator always sees an upright, centered crop.
//! 2. **Paired data.** For each training frame the unedited reconstruction
//!    is rendered (cavity blank) while the original frame keeps its real
//!    teeth; both are frontalized with the *same* homography and cropped to
//!    the same box, yielding (toothless, toothed) patch pairs.
//! 3. **Translation.** A texture autoencoder is trained on the toothed
//!    patches and its encoder is then fine-tuned to map toothless patches to
//!    codes whose decode matches the paired toothed patch.
//! 4. **Filling.** At edit time the rendered frame's mouth is frontalized,
//!    cropped, translated, warped back, and pasted into the inner-mouth
//!    polygon with a feathered border. Pixels outside the pasted region are
//!    bit-identical to the input.
//!
//! Everything here is pose-driven geometry plus the texture model; emotion
//! labels are never consulted (teeth look the same regardless of the
//! expression being edited). All entry points take shared references only,
//! so per-frame filling is safe to parallelize over frames.

mod translate;

pub use translate::train_mouth_translator;

use nalgebra::{DMatrix, Matrix3, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{composite, Image, ImageError, Mask};
use crate::morphable::{
    apply_pose, reconstruct_shape, FaceCoefficients, MorphableBasis, MorphableError,
};
use crate::render::{extract_texture, polygon_mask, project, rasterize, Camera, RenderError};
use crate::tensorfile::{TensorFile, TensorFileError};
use crate::texture_space::{fill_invalid_texels, TextureError, TextureModel};

#[derive(Debug, Error)]
pub enum MouthError {
    #[error("need at least 4 point correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("point arrays must be L x 2 with equal row counts, got {0}x{1} and {2}x{3}")]
    PointShape(usize, usize, usize, usize),
    #[error("degenerate point configuration: {0}")]
    Degenerate(&'static str),
    #[error("alignment homography is numerically singular")]
    SingularHomography,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("frame {0} is {1}x{2}; paired-data frames must be square")]
    NonSquareFrame(usize, usize, usize),
    #[error("{0} frames but {1} coefficient sets")]
    FrameCoeffMismatch(usize, usize),
    #[error("patch {0} is {1}x{2}, expected {3}x{3}")]
    WrongPatchSize(usize, usize, usize, usize),
    #[error("no mouth pairs provided")]
    EmptyPairs,
    #[error("mouth model is not trained")]
    Untrained,
    #[error("unusable mouth pair file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Morphable(#[from] MorphableError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Texture(#[from] TextureError),
    #[error(transparent)]
    Tensor(#[from] TensorFileError),
}

/// The crop box around the frontalized mouth landmarks is their bounding box
/// grown by this fraction on every side.
pub const CROP_EXPAND: f64 = 0.25;

/// Width of the blending ramp, in pixels, at the edge of the pasted mouth
/// region.
pub const FEATHER_PX: usize = 2;

/// A square mouth crop together with the projective transform that
/// frontalized it and the index of the frame it came from.
#[derive(Debug, Clone)]
pub struct MouthPatch {
    pub image: Image,
    /// Maps frame coordinates to frontalized coordinates; invertible
    /// (`|det| > 1e-12`).
    pub homography: Matrix3<f64>,
    pub frame_index: usize,
}

impl MouthPatch {
    pub fn new(
        image: Image,
        homography: Matrix3<f64>,
        frame_index: usize,
    ) -> Result<Self, MouthError> {
        if image.width() != image.height() {
            return Err(MouthError::WrongPatchSize(
                frame_index,
                image.width(),
                image.height(),
                image.width(),
            ));
        }
        if homography.determinant().abs() <= 1e-12 {
            return Err(MouthError::SingularHomography);
        }
        Ok(Self {
            image,
            homography,
            frame_index,
        })
    }

    pub fn size(&self) -> usize {
        self.image.width()
    }
}

/// Applies a homography to a 2-D point with the projective divide. A
/// vanishing third coordinate is nudged to `±1e-12` instead of dividing by
/// zero; the resulting far-out coordinate is then handled by the samplers'
/// clamp-to-border rule.
fn apply_homography(h: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let v = h * Vector3::new(x, y, 1.0);
    let w = if v.z.abs() < 1e-12 {
        1e-12_f64.copysign(if v.z == 0.0 { 1.0 } else { v.z })
    } else {
        v.z
    };
    (v.x / w, v.y / w)
}

/// Similarity transform taking `pts` to centroid zero and mean distance
/// `sqrt(2)`, returned with the transformed copy.
fn normalize_points(pts: &Array2<f64>) -> Result<(Matrix3<f64>, Array2<f64>), MouthError> {
    let l = pts.nrows() as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for r in pts.rows() {
        cx += r[0];
        cy += r[1];
    }
    cx /= l;
    cy /= l;
    let mut mean_dist = 0.0;
    for r in pts.rows() {
        mean_dist += ((r[0] - cx).powi(2) + (r[1] - cy).powi(2)).sqrt();
    }
    mean_dist /= l;
    if mean_dist < 1e-12 {
        return Err(MouthError::Degenerate("all points coincide"));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let mut out = pts.to_owned();
    for mut r in out.rows_mut() {
        r[0] = s * (r[0] - cx);
        r[1] = s * (r[1] - cy);
    }
    Ok((t, out))
}

/// True when some line carries all but at most one of the points (such a
/// configuration cannot pin down a projective transform). Coordinates are
/// assumed normalized to O(1) scale.
fn nearly_collinear(pts: &Array2<f64>) -> bool {
    let l = pts.nrows();
    if l < 3 {
        return true;
    }
    let p = |i: usize| (pts[[i, 0]], pts[[i, 1]]);
    for i in 0..l {
        for j in (i + 1)..l {
            let (xi, yi) = p(i);
            let (xj, yj) = p(j);
            let len = ((xj - xi).powi(2) + (yj - yi).powi(2)).sqrt();
            if len < 1e-9 {
                continue;
            }
            let mut on_line = 0;
            for k in 0..l {
                let (xk, yk) = p(k);
                let dist = ((xj - xi) * (yk - yi) - (yj - yi) * (xk - xi)).abs() / len;
                if dist <= 1e-9 {
                    on_line += 1;
                }
            }
            if on_line >= l - 1 {
                return true;
            }
        }
    }
    false
}

/// Estimates the projective transform `H` with `dst ~ H . src` by the
/// normalized direct linear transform: both point sets are translated and
/// scaled to a canonical frame, the algebraic least-squares system is solved
/// through the smallest eigenvector of its normal matrix, and the result is
/// de-normalized and scaled so the bottom-right entry is one.
///
/// Fails when fewer than four correspondences are given, when all but at
/// most one point of either set lie on a single line, or when the solution
/// is otherwise not unique.
pub fn estimate_homography(
    src: &Array2<f64>,
    dst: &Array2<f64>,
) -> Result<Matrix3<f64>, MouthError> {
    if src.ncols() != 2 || dst.ncols() != 2 || src.nrows() != dst.nrows() {
        return Err(MouthError::PointShape(
            src.nrows(),
            src.ncols(),
            dst.nrows(),
            dst.ncols(),
        ));
    }
    let l = src.nrows();
    if l < 4 {
        return Err(MouthError::TooFewPoints(l));
    }
    if src.iter().chain(dst.iter()).any(|v| !v.is_finite()) {
        return Err(MouthError::NonFinite("point coordinates"));
    }
    let (t_src, ns) = normalize_points(src)?;
    let (t_dst, nd) = normalize_points(dst)?;
    if nearly_collinear(&ns) || nearly_collinear(&nd) {
        return Err(MouthError::Degenerate(
            "all but at most one point lie on a line",
        ));
    }

    let mut a = DMatrix::<f64>::zeros(2 * l, 9);
    for i in 0..l {
        let (x, y) = (ns[[i, 0]], ns[[i, 1]]);
        let (xp, yp) = (nd[[i, 0]], nd[[i, 1]]);
        a[(2 * i, 3)] = -x;
        a[(2 * i, 4)] = -y;
        a[(2 * i, 5)] = -1.0;
        a[(2 * i, 6)] = yp * x;
        a[(2 * i, 7)] = yp * y;
        a[(2 * i, 8)] = yp;
        a[(2 * i + 1, 0)] = x;
        a[(2 * i + 1, 1)] = y;
        a[(2 * i + 1, 2)] = 1.0;
        a[(2 * i + 1, 6)] = -xp * x;
        a[(2 * i + 1, 7)] = -xp * y;
        a[(2 * i + 1, 8)] = -xp;
    }
    let ata = a.transpose() * &a;
    let eig = nalgebra::SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    // One vanishing eigenvalue is the solution; a second means the system
    // does not determine the transform (backstop behind the explicit
    // collinearity test, e.g. for partially coincident points).
    let lam_max = eig.eigenvalues[order[8]].max(f64::MIN_POSITIVE);
    if eig.eigenvalues[order[1]] <= 1e-10 * lam_max {
        return Err(MouthError::Degenerate("solution is not unique"));
    }
    let hv = eig.eigenvectors.column(order[0]);
    let hn = Matrix3::new(hv[0], hv[1], hv[2], hv[3], hv[4], hv[5], hv[6], hv[7], hv[8]);
    let t_dst_inv = t_dst.try_inverse().ok_or(MouthError::SingularHomography)?;
    let h = t_dst_inv * hn * t_src;
    let h33 = h[(2, 2)];
    if h33.abs() < 1e-12 {
        return Err(MouthError::Degenerate("vanishing bottom-right entry"));
    }
    Ok(h / h33)
}

/// Projects the mouth landmark loop twice: under the frame's pose (`l`) and
/// with the pose zeroed (`l'`), both as `L x 2` pixel coordinates. The pair
/// feeds [`estimate_homography`] to frontalize the mouth area.
pub fn frontalize_landmarks(
    basis: &MorphableBasis,
    coeffs: &FaceCoefficients,
    camera: &Camera,
) -> Result<(Array2<f64>, Array2<f64>), MouthError> {
    let shape = reconstruct_shape(basis, coeffs)?;
    let posed = apply_pose(&shape, &coeffs.pose)?;
    let proj_posed = project(&posed, camera)?;
    let proj_frontal = project(&shape, camera)?;
    let m = &basis.mouth_landmark_idx;
    let mut l = Array2::zeros((m.len(), 2));
    let mut l0 = Array2::zeros((m.len(), 2));
    for (k, &vi) in m.iter().enumerate() {
        l[[k, 0]] = proj_posed[[vi, 0]];
        l[[k, 1]] = proj_posed[[vi, 1]];
        l0[[k, 0]] = proj_frontal[[vi, 0]];
        l0[[k, 1]] = proj_frontal[[vi, 1]];
    }
    Ok((l, l0))
}

/// Square sampling window in frontalized coordinates: the bounding box of
/// the frontal mouth landmarks grown by [`CROP_EXPAND`], squared up to its
/// longer side, mapped to a `size x size` patch. Both crop directions go
/// through this one struct so the data generator and the filler cannot
/// disagree about framing.
pub(crate) struct FrontalCrop {
    /// Frame -> frontal.
    forward: Matrix3<f64>,
    /// Frontal -> frame.
    inverse: Matrix3<f64>,
    min_x: f64,
    min_y: f64,
    extent: f64,
    size: usize,
}

impl FrontalCrop {
    pub fn new(
        homography: &Matrix3<f64>,
        frontal_pts: &Array2<f64>,
        size: usize,
    ) -> Result<Self, MouthError> {
        let inverse = homography
            .try_inverse()
            .ok_or(MouthError::SingularHomography)?;
        let (mut lo_x, mut lo_y) = (f64::INFINITY, f64::INFINITY);
        let (mut hi_x, mut hi_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for r in frontal_pts.rows() {
            lo_x = lo_x.min(r[0]);
            hi_x = hi_x.max(r[0]);
            lo_y = lo_y.min(r[1]);
            hi_y = hi_y.max(r[1]);
        }
        let half = 0.5 * (hi_x - lo_x).max(hi_y - lo_y) * (1.0 + CROP_EXPAND);
        if !(half > 1e-9) {
            return Err(MouthError::Degenerate("crop window collapsed to a point"));
        }
        let cx = 0.5 * (lo_x + hi_x);
        let cy = 0.5 * (lo_y + hi_y);
        Ok(Self {
            forward: *homography,
            inverse,
            min_x: cx - half,
            min_y: cy - half,
            extent: 2.0 * half,
            size,
        })
    }

    /// Continuous patch coordinates (pixel centers at `k + 0.5`) to frame
    /// coordinates.
    fn patch_to_frame(&self, px: f64, py: f64) -> (f64, f64) {
        let fx = self.min_x + px / self.size as f64 * self.extent;
        let fy = self.min_y + py / self.size as f64 * self.extent;
        apply_homography(&self.inverse, fx, fy)
    }

    /// Frame coordinates to continuous patch coordinates.
    fn frame_to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        let (fx, fy) = apply_homography(&self.forward, x, y);
        (
            (fx - self.min_x) / self.extent * self.size as f64,
            (fy - self.min_y) / self.extent * self.size as f64,
        )
    }

    /// Frontal coordinates to continuous patch coordinates (no homography).
    pub fn frontal_to_patch(&self, fx: f64, fy: f64) -> (f64, f64) {
        (
            (fx - self.min_x) / self.extent * self.size as f64,
            (fy - self.min_y) / self.extent * self.size as f64,
        )
    }

    /// Samples the frontalized crop out of a frame.
    pub fn crop(&self, frame: &Image) -> Image {
        let mut out = Image::new(self.size, self.size);
        for y in 0..self.size {
            for x in 0..self.size {
                let (fx, fy) = self.patch_to_frame(x as f64 + 0.5, y as f64 + 0.5);
                out.set(x, y, frame.sample_bilinear(fx - 0.5, fy - 0.5));
            }
        }
        out
    }
}

/// Sizes used when collecting paired mouth data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MouthPairConfig {
    /// Side length of the square mouth patches.
    pub crop_size: usize,
    /// Resolution of the texture extracted for the blank-cavity re-render.
    pub tex_size: usize,
}

impl Default for MouthPairConfig {
    fn default() -> Self {
        Self {
            crop_size: 64,
            tex_size: 128,
        }
    }
}

/// Renders the reconstruction of `frame` (which has a blank mouth cavity,
/// since the mesh does not model it) composited over the frame itself.
/// Returns the composite and the projected mouth-loop polygon points.
fn blank_cavity_render(
    frame: &Image,
    basis: &MorphableBasis,
    coeffs: &FaceCoefficients,
    camera: &Camera,
    tex_size: usize,
) -> Result<(Image, Vec<(f64, f64)>), MouthError> {
    let shape = reconstruct_shape(basis, coeffs)?;
    let posed = apply_pose(&shape, &coeffs.pose)?;
    let (texture, valid) = extract_texture(frame, basis, &posed, camera, tex_size)?;
    let texture = fill_invalid_texels(&texture, &valid)?;
    let raster = rasterize(basis, &posed, &texture, camera, frame.width())?;
    let projected = project(&posed, camera)?;
    let loop_pts: Vec<(f64, f64)> = basis
        .mouth_landmark_idx
        .iter()
        .map(|&vi| (projected[[vi, 0]], projected[[vi, 1]]))
        .collect();
    let cavity = polygon_mask(&loop_pts, frame.width(), frame.height());
    // The cavity is inside the face outline but uncovered by triangles, so
    // including it in the composite mask keeps the (black) rendered values
    // there instead of letting the original mouth show through.
    let face_mask = raster.mask.union(&cavity);
    let composite_frame = composite(&raster.image, frame, &face_mask)?;
    Ok((composite_frame, loop_pts))
}

/// Collects (toothless, toothed) mouth patch pairs from original frames and
/// their reconstruction coefficients: the toothless side is the re-rendered
/// reconstruction (blank cavity), the toothed side is the original frame,
/// and each frame's two patches are frontalized with the identical
/// homography and cropped to the identical box. Emotion labels play no role.
pub fn make_paired_mouth_data(
    frames: &[Image],
    basis: &MorphableBasis,
    coeff_list: &[FaceCoefficients],
    camera: &Camera,
    config: &MouthPairConfig,
) -> Result<Vec<(MouthPatch, MouthPatch)>, MouthError> {
    if frames.len() != coeff_list.len() {
        return Err(MouthError::FrameCoeffMismatch(
            frames.len(),
            coeff_list.len(),
        ));
    }
    let mut pairs = Vec::with_capacity(frames.len());
    for (i, (frame, coeffs)) in frames.iter().zip(coeff_list).enumerate() {
        if frame.width() != frame.height() {
            return Err(MouthError::NonSquareFrame(i, frame.width(), frame.height()));
        }
        let (toothless_frame, _) = blank_cavity_render(frame, basis, coeffs, camera, config.tex_size)?;
        let (l, l0) = frontalize_landmarks(basis, coeffs, camera)?;
        let h = estimate_homography(&l, &l0)?;
        let crop = FrontalCrop::new(&h, &l0, config.crop_size)?;
        let toothless = MouthPatch::new(crop.crop(&toothless_frame), h, i)?;
        let toothed = MouthPatch::new(crop.crop(frame), h, i)?;
        pairs.push((toothless, toothed));
    }
    Ok(pairs)
}

const PAIRS_FORMAT: &str = "mouth-pairs";

#[derive(Debug, Serialize, Deserialize)]
struct MouthPairsMeta {
    format: String,
    version: u32,
    crop_size: usize,
    frame_indices: Vec<usize>,
}

fn image_tensor(img: &Image) -> (Vec<usize>, Vec<f64>) {
    (
        vec![img.height(), img.width(), 3],
        img.data().to_vec(),
    )
}

fn homography_tensor(h: &Matrix3<f64>) -> Vec<f64> {
    (0..3).flat_map(|r| (0..3).map(move |c| h[(r, c)])).collect()
}

/// Writes a paired-patch archive: per pair the toothless patch, the toothed
/// patch, and their shared homography (row-major 3x3).
pub fn save_mouth_pairs(
    path: impl AsRef<std::path::Path>,
    pairs: &[(MouthPatch, MouthPatch)],
) -> Result<(), MouthError> {
    let crop_size = pairs.first().map_or(0, |(a, _)| a.size());
    let meta = MouthPairsMeta {
        format: PAIRS_FORMAT.into(),
        version: 1,
        crop_size,
        frame_indices: pairs.iter().map(|(a, _)| a.frame_index).collect(),
    };
    let mut file = TensorFile::new(serde_json::to_value(&meta).expect("serializable meta"));
    for (i, (toothless, toothed)) in pairs.iter().enumerate() {
        for (name, patch) in [("toothless", toothless), ("toothed", toothed)] {
            if patch.size() != crop_size {
                return Err(MouthError::WrongPatchSize(
                    patch.frame_index,
                    patch.image.width(),
                    patch.image.height(),
                    crop_size,
                ));
            }
            let (dims, data) = image_tensor(&patch.image);
            file.insert_f64(&format!("pair{i}.{name}"), &dims, data);
        }
        file.insert_f64(
            &format!("pair{i}.homography"),
            &[3, 3],
            homography_tensor(&toothless.homography),
        );
    }
    file.save(path)?;
    Ok(())
}

pub fn load_mouth_pairs(
    path: impl AsRef<std::path::Path>,
) -> Result<Vec<(MouthPatch, MouthPatch)>, MouthError> {
    let file = TensorFile::load(path)?;
    let meta: MouthPairsMeta = serde_json::from_value(file.meta.clone())
        .map_err(|e| MouthError::BadFile(format!("bad metadata: {e}")))?;
    if meta.format != PAIRS_FORMAT {
        return Err(MouthError::BadFile(format!(
            "format is {:?}, expected {PAIRS_FORMAT:?}",
            meta.format
        )));
    }
    if meta.version != 1 {
        return Err(MouthError::BadFile(format!(
            "unsupported version {}",
            meta.version
        )));
    }
    let read_image = |name: &str| -> Result<Image, MouthError> {
        let (dims, data) = file.f64_entry(name)?;
        if dims.len() != 3 || dims[2] != 3 || dims[0] != meta.crop_size || dims[1] != meta.crop_size
        {
            return Err(MouthError::BadFile(format!("{name} has dims {dims:?}")));
        }
        Ok(Image::from_raw(dims[1], dims[0], data.to_vec()))
    };
    let mut pairs = Vec::with_capacity(meta.frame_indices.len());
    for (i, &frame_index) in meta.frame_indices.iter().enumerate() {
        let (dims, data) = file.f64_entry(&format!("pair{i}.homography"))?;
        if dims != [3, 3] {
            return Err(MouthError::BadFile(format!(
                "pair{i}.homography has dims {dims:?}"
            )));
        }
        let h = Matrix3::from_fn(|r, c| data[3 * r + c]);
        let toothless =
            MouthPatch::new(read_image(&format!("pair{i}.toothless"))?, h, frame_index)?;
        let toothed = MouthPatch::new(read_image(&format!("pair{i}.toothed"))?, h, frame_index)?;
        pairs.push((toothless, toothed));
    }
    Ok(pairs)
}

/// Per-pixel paste opacity for a cavity mask: 0 outside, ramping linearly
/// over [`FEATHER_PX`] interior pixels to 1 deep inside. Distance to the
/// outside is measured with a 4-neighborhood breadth-first search; the image
/// boundary counts as outside.
fn feather_alpha(cavity: &Mask) -> Vec<f64> {
    let (w, h) = (cavity.width(), cavity.height());
    let mut dist = vec![usize::MAX; w * h];
    let mut queue = std::collections::VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if cavity.get(x, y) < 0.5 {
                dist[y * w + x] = 0;
                queue.push_back((x, y));
            } else if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                dist[y * w + x] = 1;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        let d = dist[y * w + x];
        let mut push = |nx: usize, ny: usize| {
            if dist[ny * w + nx] == usize::MAX {
                dist[ny * w + nx] = d + 1;
                queue.push_back((nx, ny));
            }
        };
        if x > 0 {
            push(x - 1, y);
        }
        if x + 1 < w {
            push(x + 1, y);
        }
        if y > 0 {
            push(x, y - 1);
        }
        if y + 1 < h {
            push(x, y + 1);
        }
    }
    let ramp = (FEATHER_PX + 1) as f64;
    (0..w * h)
        .map(|i| {
            if cavity.data()[i] < 0.5 {
                0.0
            } else {
                (dist[i] as f64 / ramp).min(1.0)
            }
        })
        .collect()
}

/// Fills the blank mouth cavity of a rendered frame: frontalize, crop,
/// translate through the trained mouth model, warp back, and paste into the
/// inner-mouth polygon with a [`FEATHER_PX`]-pixel blending ramp. Every
/// pixel outside that polygon is returned bit-identical; an empty cavity
/// returns the frame unchanged, and a failed alignment estimate returns it
/// unchanged with a logged warning.
pub fn fill_teeth(
    frame: &Image,
    basis: &MorphableBasis,
    coeffs: &FaceCoefficients,
    camera: &Camera,
    model: &TextureModel,
) -> Result<Image, MouthError> {
    if !model.trained {
        return Err(MouthError::Untrained);
    }
    let (l, l0) = frontalize_landmarks(basis, coeffs, camera)?;
    let h = match estimate_homography(&l, &l0) {
        Ok(h) => h,
        Err(e) => {
            log::warn!("teeth filling skipped: mouth alignment failed ({e})");
            return Ok(frame.clone());
        }
    };
    let loop_pts: Vec<(f64, f64)> = (0..l.nrows()).map(|k| (l[[k, 0]], l[[k, 1]])).collect();
    let cavity = polygon_mask(&loop_pts, frame.width(), frame.height());
    if cavity.data().iter().all(|&v| v < 0.5) {
        return Ok(frame.clone());
    }
    let crop = FrontalCrop::new(&h, &l0, model.config.tex_size)?;
    let patch = crop.crop(frame);
    let filled = model.decode(&model.encode(&patch)?)?;

    let alpha = feather_alpha(&cavity);
    let mut out = frame.clone();
    let size = model.config.tex_size as f64;
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let a = alpha[y * frame.width() + x];
            if a <= 0.0 {
                continue;
            }
            let (px, py) = crop.frame_to_patch(x as f64 + 0.5, y as f64 + 0.5);
            // Pasted samples stay inside the patch for any point the crop
            // itself covered; the border clamp only engages in the feather
            // ring of extreme crops.
            let (px, py) = (px.clamp(0.0, size), py.clamp(0.0, size));
            let c = filled.sample_bilinear(px - 0.5, py - 0.5);
            let o = frame.get(x, y);
            out.set(
                x,
                y,
                [
                    o[0] + a * (c[0] - o[0]),
                    o[1] + a * (c[1] - o[1]),
                    o[2] + a * (c[2] - o[2]),
                ],
            );
        }
    }
    Ok(out)
}
