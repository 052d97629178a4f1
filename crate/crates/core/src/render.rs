//! Minimal software rasterizer: orthographic / pinhole projection, z-buffered
//! barycentric rasterization with UV texture lookup, the inverse operation
//! (sampling a frame back into UV space), and soft-mask blending.
//!
//! Conventions: the camera looks along +z, so smaller depth wins visibility;
//! image origin is the top-left corner and pixel `(i, j)` covers the unit
//! square with center `(i + 0.5, j + 0.5)`; texel centers follow the same
//! rule, so UV `u` maps to texture pixel coordinate `u * size - 0.5`.

use ndarray::Array2;
use thiserror::Error;

use crate::image::{composite, Image, ImageError, Mask};
use crate::morphable::MorphableBasis;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("camera scale/focal must be positive, got {0}")]
    NonPositiveCamera(f64),
    #[error("pinhole projection of a vertex with depth {0} <= 0")]
    NonPositiveDepth(f64),
    #[error("non-finite vertex coordinates")]
    NonFinite,
    #[error("texture must be square, got {0}x{1}")]
    NonSquareTexture(usize, usize),
    #[error("vertex count {0} does not match basis vertex count {1}")]
    VertexCountMismatch(usize, usize),
    #[error("image error: {0}")]
    Image(#[from] ImageError),
}

/// Projection model. Scale (orthographic) and focal length (pinhole) are in
/// pixels per model unit; the principal point is in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Camera {
    Orthographic { scale: f64, cx: f64, cy: f64 },
    Pinhole { focal: f64, cx: f64, cy: f64 },
}

/// An orthographic view centered in a 128-pixel frame.
impl Default for Camera {
    fn default() -> Self {
        Camera::Orthographic {
            scale: 40.0,
            cx: 64.0,
            cy: 64.0,
        }
    }
}

impl Camera {
    pub fn orthographic(scale: f64, cx: f64, cy: f64) -> Result<Self, RenderError> {
        if scale <= 0.0 {
            return Err(RenderError::NonPositiveCamera(scale));
        }
        Ok(Camera::Orthographic { scale, cx, cy })
    }

    pub fn pinhole(focal: f64, cx: f64, cy: f64) -> Result<Self, RenderError> {
        if focal <= 0.0 {
            return Err(RenderError::NonPositiveCamera(focal));
        }
        Ok(Camera::Pinhole { focal, cx, cy })
    }

    fn project_point(&self, x: f64, y: f64, z: f64) -> Result<[f64; 3], RenderError> {
        match *self {
            Camera::Orthographic { scale, cx, cy } => Ok([scale * x + cx, scale * y + cy, z]),
            Camera::Pinhole { focal, cx, cy } => {
                if z <= 0.0 {
                    return Err(RenderError::NonPositiveDepth(z));
                }
                Ok([focal * x / z + cx, focal * y / z + cy, z])
            }
        }
    }
}

/// Projects posed vertices to `(x_pix, y_pix, depth)` rows.
pub fn project(vertices: &Array2<f64>, camera: &Camera) -> Result<Array2<f64>, RenderError> {
    if vertices.iter().any(|v| !v.is_finite()) {
        return Err(RenderError::NonFinite);
    }
    let mut out = Array2::zeros((vertices.nrows(), 3));
    for (i, row) in vertices.rows().into_iter().enumerate() {
        let p = camera.project_point(row[0], row[1], row[2])?;
        out[[i, 0]] = p[0];
        out[[i, 1]] = p[1];
        out[[i, 2]] = p[2];
    }
    Ok(out)
}

pub struct RasterOutput {
    pub image: Image,
    /// 1 where any triangle covers the pixel center.
    pub mask: Mask,
    /// Winning depth per pixel, `f64::INFINITY` where uncovered; row-major.
    pub zbuffer: Vec<f64>,
    /// Zero-area triangles that were skipped.
    pub degenerate_faces: usize,
}

const DEGENERATE_AREA: f64 = 1e-12;
/// Depth slack when re-testing a surface point against the z-buffer.
const VISIBILITY_EPS: f64 = 1e-4;

struct Tri2 {
    x: [f64; 3],
    y: [f64; 3],
    denom: f64,
}

impl Tri2 {
    fn new(x: [f64; 3], y: [f64; 3]) -> Option<Self> {
        let denom = (y[1] - y[2]) * (x[0] - x[2]) + (x[2] - x[1]) * (y[0] - y[2]);
        if denom.abs() < DEGENERATE_AREA {
            return None;
        }
        Some(Self { x, y, denom })
    }

    /// Barycentric coordinates of `(px, py)`.
    fn bary(&self, px: f64, py: f64) -> [f64; 3] {
        let w0 = ((self.y[1] - self.y[2]) * (px - self.x[2])
            + (self.x[2] - self.x[1]) * (py - self.y[2]))
            / self.denom;
        let w1 = ((self.y[2] - self.y[0]) * (px - self.x[2])
            + (self.x[0] - self.x[2]) * (py - self.y[2]))
            / self.denom;
        [w0, w1, 1.0 - w0 - w1]
    }
}

fn inside(w: &[f64; 3]) -> bool {
    // Inclusive edges; shared edges resolve by the depth test.
    w.iter().all(|&v| v >= -1e-12)
}

/// Renders the textured mesh into a square `out_size` image with a z-buffer.
pub fn rasterize(
    basis: &MorphableBasis,
    posed_vertices: &Array2<f64>,
    texture: &Image,
    camera: &Camera,
    out_size: usize,
) -> Result<RasterOutput, RenderError> {
    if texture.width() != texture.height() {
        return Err(RenderError::NonSquareTexture(
            texture.width(),
            texture.height(),
        ));
    }
    if posed_vertices.nrows() != basis.n_vertices() {
        return Err(RenderError::VertexCountMismatch(
            posed_vertices.nrows(),
            basis.n_vertices(),
        ));
    }
    let projected = project(posed_vertices, camera)?;
    let mut image = Image::new(out_size, out_size);
    let mut mask = Mask::new(out_size, out_size);
    let mut zbuffer = vec![f64::INFINITY; out_size * out_size];
    let mut degenerate = 0usize;
    let ts = texture.width() as f64;

    for face in &basis.faces {
        let [a, b, c] = face.map(|i| i as usize);
        let tri = match Tri2::new(
            [projected[[a, 0]], projected[[b, 0]], projected[[c, 0]]],
            [projected[[a, 1]], projected[[b, 1]], projected[[c, 1]]],
        ) {
            Some(t) => t,
            None => {
                degenerate += 1;
                continue;
            }
        };
        let z = [projected[[a, 2]], projected[[b, 2]], projected[[c, 2]]];
        let uv = [
            (basis.uv_coords[[a, 0]], basis.uv_coords[[a, 1]]),
            (basis.uv_coords[[b, 0]], basis.uv_coords[[b, 1]]),
            (basis.uv_coords[[c, 0]], basis.uv_coords[[c, 1]]),
        ];
        let min_x = tri.x.iter().cloned().fold(f64::MAX, f64::min);
        let max_x = tri.x.iter().cloned().fold(f64::MIN, f64::max);
        let min_y = tri.y.iter().cloned().fold(f64::MAX, f64::min);
        let max_y = tri.y.iter().cloned().fold(f64::MIN, f64::max);
        let px0 = (min_x - 0.5).floor().max(0.0) as usize;
        let px1 = ((max_x - 0.5).ceil() as isize).clamp(0, out_size as isize - 1) as usize;
        let py0 = (min_y - 0.5).floor().max(0.0) as usize;
        let py1 = ((max_y - 0.5).ceil() as isize).clamp(0, out_size as isize - 1) as usize;
        if min_x > (out_size as f64) || max_x < 0.0 || min_y > (out_size as f64) || max_y < 0.0 {
            continue;
        }
        for py in py0..=py1 {
            for px in px0..=px1 {
                let w = tri.bary(px as f64 + 0.5, py as f64 + 0.5);
                if !inside(&w) {
                    continue;
                }
                let depth = w[0] * z[0] + w[1] * z[1] + w[2] * z[2];
                let zi = py * out_size + px;
                if depth >= zbuffer[zi] {
                    continue;
                }
                zbuffer[zi] = depth;
                let u = w[0] * uv[0].0 + w[1] * uv[1].0 + w[2] * uv[2].0;
                let v = w[0] * uv[0].1 + w[1] * uv[1].1 + w[2] * uv[2].1;
                let rgb = texture.sample_bilinear(u * ts - 0.5, v * ts - 0.5);
                image.set(px, py, rgb);
                mask.set(px, py, 1.0);
            }
        }
    }

    if degenerate > 0 {
        log::debug!("rasterize: skipped {degenerate} degenerate faces");
    }
    Ok(RasterOutput {
        image,
        mask,
        zbuffer,
        degenerate_faces: degenerate,
    })
}

/// Depth-only pass: the z-buffer a full rasterization would produce.
fn depth_pass(
    basis: &MorphableBasis,
    projected: &Array2<f64>,
    out_size: usize,
) -> Vec<f64> {
    let mut zbuffer = vec![f64::INFINITY; out_size * out_size];
    for face in &basis.faces {
        let [a, b, c] = face.map(|i| i as usize);
        let tri = match Tri2::new(
            [projected[[a, 0]], projected[[b, 0]], projected[[c, 0]]],
            [projected[[a, 1]], projected[[b, 1]], projected[[c, 1]]],
        ) {
            Some(t) => t,
            None => continue,
        };
        let z = [projected[[a, 2]], projected[[b, 2]], projected[[c, 2]]];
        let px0 = (tri.x.iter().cloned().fold(f64::MAX, f64::min) - 0.5).floor().max(0.0) as usize;
        let px1 = ((tri.x.iter().cloned().fold(f64::MIN, f64::max) - 0.5).ceil() as isize)
            .clamp(0, out_size as isize - 1) as usize;
        let py0 = (tri.y.iter().cloned().fold(f64::MAX, f64::min) - 0.5).floor().max(0.0) as usize;
        let py1 = ((tri.y.iter().cloned().fold(f64::MIN, f64::max) - 0.5).ceil() as isize)
            .clamp(0, out_size as isize - 1) as usize;
        for py in py0..=py1 {
            for px in px0..=px1 {
                let w = tri.bary(px as f64 + 0.5, py as f64 + 0.5);
                if !inside(&w) {
                    continue;
                }
                let depth = w[0] * z[0] + w[1] * z[1] + w[2] * z[2];
                let zi = py * out_size + px;
                if depth < zbuffer[zi] {
                    zbuffer[zi] = depth;
                }
            }
        }
    }
    zbuffer
}

/// Samples the frame back into UV space: for every texel, find the UV-space
/// triangle containing it, interpolate the posed 3D surface point, project it
/// and bilinear-sample the frame. A texel is valid only when its surface
/// point survives the z-buffer visibility test (it is the front-most surface
/// at that frame pixel) and projects inside the frame.
pub fn extract_texture(
    frame: &Image,
    basis: &MorphableBasis,
    posed_vertices: &Array2<f64>,
    camera: &Camera,
    tex_size: usize,
) -> Result<(Image, Mask), RenderError> {
    if posed_vertices.nrows() != basis.n_vertices() {
        return Err(RenderError::VertexCountMismatch(
            posed_vertices.nrows(),
            basis.n_vertices(),
        ));
    }
    let projected = project(posed_vertices, camera)?;
    let zbuffer = depth_pass(basis, &projected, frame.width().max(frame.height()));
    let zb_size = frame.width().max(frame.height());

    // Bucket grid over UV space so each texel only tests nearby triangles.
    const GRID: usize = 64;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); GRID * GRID];
    for (fi, face) in basis.faces.iter().enumerate() {
        let us: Vec<f64> = face.iter().map(|&i| basis.uv_coords[[i as usize, 0]]).collect();
        let vs: Vec<f64> = face.iter().map(|&i| basis.uv_coords[[i as usize, 1]]).collect();
        let b0 = |v: f64| ((v * GRID as f64).floor() as isize).clamp(0, GRID as isize - 1) as usize;
        let (u0, u1) = (
            b0(us.iter().cloned().fold(f64::MAX, f64::min)),
            b0(us.iter().cloned().fold(f64::MIN, f64::max)),
        );
        let (v0, v1) = (
            b0(vs.iter().cloned().fold(f64::MAX, f64::min)),
            b0(vs.iter().cloned().fold(f64::MIN, f64::max)),
        );
        for gv in v0..=v1 {
            for gu in u0..=u1 {
                buckets[gv * GRID + gu].push(fi);
            }
        }
    }

    let mut texture = Image::new(tex_size, tex_size);
    let mut valid = Mask::new(tex_size, tex_size);
    for ty in 0..tex_size {
        for tx in 0..tex_size {
            let u = (tx as f64 + 0.5) / tex_size as f64;
            let v = (ty as f64 + 0.5) / tex_size as f64;
            let gu = ((u * GRID as f64).floor() as usize).min(GRID - 1);
            let gv = ((v * GRID as f64).floor() as usize).min(GRID - 1);
            for &fi in &buckets[gv * GRID + gu] {
                let [a, b, c] = basis.faces[fi].map(|i| i as usize);
                let tri = match Tri2::new(
                    [
                        basis.uv_coords[[a, 0]],
                        basis.uv_coords[[b, 0]],
                        basis.uv_coords[[c, 0]],
                    ],
                    [
                        basis.uv_coords[[a, 1]],
                        basis.uv_coords[[b, 1]],
                        basis.uv_coords[[c, 1]],
                    ],
                ) {
                    Some(t) => t,
                    None => continue,
                };
                let w = tri.bary(u, v);
                if !inside(&w) {
                    continue;
                }
                // Interpolate the projected position and depth directly; the
                // projections in use are affine per triangle to sufficient
                // accuracy at desk scale (orthographic is exactly affine).
                let x = w[0] * projected[[a, 0]] + w[1] * projected[[b, 0]] + w[2] * projected[[c, 0]];
                let y = w[0] * projected[[a, 1]] + w[1] * projected[[b, 1]] + w[2] * projected[[c, 1]];
                let z = w[0] * projected[[a, 2]] + w[1] * projected[[b, 2]] + w[2] * projected[[c, 2]];
                if x < 0.0 || y < 0.0 || x >= frame.width() as f64 || y >= frame.height() as f64 {
                    break;
                }
                // The z-buffer holds pixel-center depths while the surface
                // point sits anywhere inside its pixel, so a fixed epsilon
                // would misclassify steeply sloped surfaces as occluded.
                // Compare against the finite depth band of the 3x3
                // neighborhood, padded by the band's own spread: slope alone
                // keeps the sample inside the padded band, while a genuine
                // occluder pushes the whole band well in front of it.
                let (px, py) = (x.floor() as usize, y.floor() as usize);
                let mut near = f64::INFINITY;
                let mut far = f64::NEG_INFINITY;
                for ny in py.saturating_sub(1)..=(py + 1).min(zb_size - 1) {
                    for nx in px.saturating_sub(1)..=(px + 1).min(zb_size - 1) {
                        let zv = zbuffer[ny * zb_size + nx];
                        if zv.is_finite() {
                            near = near.min(zv);
                            far = far.max(zv);
                        }
                    }
                }
                if far.is_finite() && z - far > VISIBILITY_EPS + (far - near) {
                    break; // occluded: another surface is in front
                }
                texture.set(tx, ty, frame.sample_bilinear(x - 0.5, y - 0.5));
                valid.set(tx, ty, 1.0);
                break;
            }
        }
    }
    Ok((texture, valid))
}

/// Soft-mask compositing of a rendered face over the original background:
/// erode the hard mask, blur it, and alpha-blend. Produces an all-background
/// frame (with a warning) when erosion wipes the mask out.
pub fn blend(
    rendered: &Image,
    background: &Image,
    hard_mask: &Mask,
    erode_radius: usize,
    blur_sigma: f64,
) -> Result<Image, RenderError> {
    let eroded = hard_mask.erode_disk(erode_radius);
    if hard_mask.data().iter().any(|&v| v >= 0.5)
        && eroded.data().iter().all(|&v| v < 0.5)
    {
        log::warn!("blend: erosion radius {erode_radius} removed the whole mask");
    }
    let soft = eroded.blur_gaussian(blur_sigma);
    Ok(composite(rendered, background, &soft)?)
}

/// Rasterizes a closed polygon (even-odd rule, pixel-center sampling) into a
/// mask; used for the mouth-cavity region.
pub fn polygon_mask(points: &[(f64, f64)], width: usize, height: usize) -> Mask {
    let mut mask = Mask::new(width, height);
    if points.len() < 3 {
        return mask;
    }
    for py in 0..height {
        let yc = py as f64 + 0.5;
        // Gather x-crossings of the scanline with polygon edges.
        let mut xs = Vec::new();
        for i in 0..points.len() {
            let (x0, y0) = points[i];
            let (x1, y1) = points[(i + 1) % points.len()];
            if (y0 <= yc && y1 > yc) || (y1 <= yc && y0 > yc) {
                xs.push(x0 + (yc - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // First and last pixel whose center lies inside [pair[0], pair[1]].
            let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let end = (pair[1] - 0.5).floor() as isize;
            if end < 0 || start >= width {
                continue;
            }
            for px in start..=(end as usize).min(width - 1) {
                mask.set(px, py, 1.0);
            }
        }
    }
    mask
}
