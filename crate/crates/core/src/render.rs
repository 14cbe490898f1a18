//! Forward splatting with per-pixel compositing weights, and the analytic
//! colour/SH gradient that those weights make possible.
//!
//! Pixel `(x, y)` is sampled at image-plane coordinates `(x, y)`, so a camera
//! with `cx = (width - 1) / 2` puts the optical axis on a pixel centre.

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{sh_count, GaussianCloud, ShCoeffs, SH_COEFFS};
use crate::geom::{self, Mat3, Vec3};
use crate::scalar::Real;
use crate::sh;

/// Screen-space variance added to every projected covariance, in px².
pub const COVARIANCE_DILATION: f64 = 0.3;
/// Upper clamp on a single Gaussian's per-pixel alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("degenerate 2D covariance for gaussian {0}")]
    DegenerateCovariance(usize),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
}

/// Pinhole camera with an OpenCV-style frame (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
    /// Row-major 4×4 rigid transform from world to camera coordinates.
    pub world_to_cam: [[T; 4]; 4],
    pub near: T,
    pub far: T,
}

impl<T: Real> Camera<T> {
    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: &str| Err(RenderError::InvalidCamera(m.to_string()));
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return bad("focal lengths must be positive");
        }
        if !(self.near > T::zero() && self.near < self.far) {
            return bad("need 0 < near < far");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        let r = self.rotation();
        let rrt = geom::mat_mul(&r, &geom::transpose(&r));
        for (i, row) in rrt.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (v.as_f64() - want).abs() > 1e-4 {
                    return bad("world_to_cam rotation is not orthonormal");
                }
            }
        }
        Ok(())
    }

    pub fn rotation(&self) -> Mat3<T> {
        let m = &self.world_to_cam;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> Vec3<T> {
        let m = &self.world_to_cam;
        [m[0][3], m[1][3], m[2][3]]
    }

    pub fn to_camera(&self, p: Vec3<T>) -> Vec3<T> {
        geom::add(geom::mat_vec(&self.rotation(), p), self.translation())
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        let rt = geom::transpose(&self.rotation());
        geom::scale(geom::mat_vec(&rt, self.translation()), -T::one())
    }

    /// Camera at `eye` looking at `target`, principal point at the pixel-grid centre.
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>, focal: T, width: usize, height: usize) -> Self {
        let forward = geom::normalize(geom::sub(target, eye));
        let mut right = geom::cross(forward, up);
        if geom::norm(right) < T::lit(1e-9) {
            right = geom::cross(forward, [T::one(), T::zero(), T::zero()]);
        }
        let right = geom::normalize(right);
        let down = geom::cross(forward, right);
        let r = [right, down, forward];
        let t = geom::scale(geom::mat_vec(&r, eye), -T::one());
        let z = T::zero();
        Self {
            fx: focal,
            fy: focal,
            cx: T::lit((width as f64 - 1.0) / 2.0),
            cy: T::lit((height as f64 - 1.0) / 2.0),
            width,
            height,
            world_to_cam: [
                [r[0][0], r[0][1], r[0][2], t[0]],
                [r[1][0], r[1][1], r[1][2], t[1]],
                [r[2][0], r[2][1], r[2][2], t[2]],
                [z, z, z, T::one()],
            ],
            near: T::lit(0.01),
            far: T::lit(1000.0),
        }
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        let c = |v: T| U::lit(v.as_f64());
        Camera {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            width: self.width,
            height: self.height,
            world_to_cam: self.world_to_cam.map(|r| r.map(c)),
            near: c(self.near),
            far: c(self.far),
        }
    }
}

/// A Gaussian after projection to the image plane.
#[derive(Clone, Copy, Debug)]
pub struct Splat<T> {
    pub index: usize,
    pub center: [T; 2],
    /// Inverse 2D covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    pub conic: [T; 3],
    pub depth: T,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]`.
    pub bounds: [i64; 4],
}

/// Projects every Gaussian in front of the near plane, sorted front to back
/// (ties broken by index).
pub fn project<T: Real>(cloud: &GaussianCloud<T>, cam: &Camera<T>) -> Result<Vec<Splat<T>>, RenderError> {
    let rot = cam.rotation();
    let tan_x = T::lit(0.5 * cam.width as f64) / cam.fx;
    let tan_y = T::lit(0.5 * cam.height as f64) / cam.fy;
    let lim_x = T::lit(1.3) * tan_x;
    let lim_y = T::lit(1.3) * tan_y;
    let dil = T::lit(COVARIANCE_DILATION);
    let mut out = Vec::new();
    for i in 0..cloud.len() {
        let p = cam.to_camera(cloud.means()[i]);
        let z = p[2];
        if z <= cam.near || z >= cam.far {
            continue;
        }
        let u = cam.fx * p[0] / z + cam.cx;
        let v = cam.fy * p[1] / z + cam.cy;

        let r = geom::quat_to_mat(cloud.rotations()[i]);
        let s = cloud.scales()[i];
        let mut m = r;
        for row in m.iter_mut() {
            for (j, e) in row.iter_mut().enumerate() {
                *e *= s[j];
            }
        }
        let cov3 = geom::mat_mul(&m, &geom::transpose(&m));
        let cov_cam = geom::mat_mul(&geom::mat_mul(&rot, &cov3), &geom::transpose(&rot));

        let tx = (p[0] / z).max(-lim_x).min(lim_x) * z;
        let ty = (p[1] / z).max(-lim_y).min(lim_y) * z;
        let j = [
            [cam.fx / z, T::zero(), -cam.fx * tx / (z * z)],
            [T::zero(), cam.fy / z, -cam.fy * ty / (z * z)],
        ];
        let mut jc = [[T::zero(); 3]; 2];
        for a in 0..2 {
            for b in 0..3 {
                jc[a][b] = geom::dot(j[a], [cov_cam[0][b], cov_cam[1][b], cov_cam[2][b]]);
            }
        }
        let ca = geom::dot(jc[0], j[0]) + dil;
        let cb = geom::dot(jc[0], j[1]);
        let cc = geom::dot(jc[1], j[1]) + dil;
        let det = ca * cc - cb * cb;
        if !(det > T::zero()) || !det.is_finite() {
            return Err(RenderError::DegenerateCovariance(i));
        }
        let conic = [cc / det, -cb / det, ca / det];
        let mid = T::half() * (ca + cc);
        let lambda = mid + (mid * mid - det).max(T::lit(0.1)).sqrt();
        let radius = (T::lit(3.0) * lambda.sqrt()).ceil();
        let bounds = [
            (u - radius).ceil().to_i64().unwrap_or(i64::MIN).max(0),
            (u + radius).floor().to_i64().unwrap_or(i64::MAX).min(cam.width as i64 - 1),
            (v - radius).ceil().to_i64().unwrap_or(i64::MIN).max(0),
            (v + radius).floor().to_i64().unwrap_or(i64::MAX).min(cam.height as i64 - 1),
        ];
        if bounds[0] > bounds[1] || bounds[2] > bounds[3] {
            continue;
        }
        out.push(Splat {
            index: i,
            center: [u, v],
            conic,
            depth: z,
            bounds,
        });
    }
    out.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
    Ok(out)
}

/// Alpha of `splat` at pixel `(x, y)` before the skip threshold.
#[inline]
pub fn splat_alpha<T: Real>(splat: &Splat<T>, opacity: T, x: usize, y: usize) -> T {
    let dx = T::lit(x as f64) - splat.center[0];
    let dy = T::lit(y as f64) - splat.center[1];
    let [a, b, c] = splat.conic;
    let power = -T::half() * (a * dx * dx + c * dy * dy) - b * dx * dy;
    if power > T::zero() {
        return T::zero();
    }
    (opacity * power.exp()).min(T::lit(ALPHA_MAX))
}

/// Per-pixel sparse compositing weights in CSR layout, front to back.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelWeights<T> {
    offsets: Vec<usize>,
    entries: Vec<(u32, T)>,
}

impl<T: Real> PixelWeights<T> {
    /// `(gaussian index, weight)` pairs at pixel `(x, y)` of a `width`-wide image.
    pub fn at(&self, x: usize, y: usize, width: usize) -> &[(u32, T)] {
        let p = y * width + x;
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn pixel(&self, p: usize) -> &[(u32, T)] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn num_pixels(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Renderer settings recorded alongside every bundle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderMeta {
    pub covariance_dilation_px2: f64,
    pub alpha_max: f64,
    pub alpha_min: f64,
}

impl Default for RenderMeta {
    fn default() -> Self {
        Self {
            covariance_dilation_px2: COVARIANCE_DILATION,
            alpha_max: ALPHA_MAX,
            alpha_min: ALPHA_MIN,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RenderBundle<T> {
    /// `H × W × 3`.
    pub rgb: Array3<T>,
    pub alpha: Array2<T>,
    /// Alpha-normalized expected depth; zero where nothing was hit.
    pub depth: Array2<T>,
    /// Transmittance left after the last contribution.
    pub transmittance: Array2<T>,
    pub weights: PixelWeights<T>,
    pub meta: RenderMeta,
}

impl<T: Real> RenderBundle<T> {
    pub fn height(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn width(&self) -> usize {
        self.alpha.ncols()
    }

    /// Sum of the weights of the selected Gaussians at each pixel.
    pub fn mask(&self, selected: &[bool]) -> Array2<T> {
        let (h, w) = (self.height(), self.width());
        Array2::from_shape_fn((h, w), |(y, x)| {
            self.weights
                .at(x, y, w)
                .iter()
                .filter(|(i, _)| selected.get(*i as usize).copied().unwrap_or(false))
                .fold(T::zero(), |acc, (_, wt)| acc + *wt)
        })
    }
}

/// View-dependent colour of each Gaussian plus its clamp gates.
pub(crate) struct GaussianColors<T> {
    pub(crate) colors: Vec<[T; 3]>,
    gates: Vec<[bool; 3]>,
    basis: Vec<[T; SH_COEFFS]>,
}

pub(crate) fn gaussian_colors<T: Real>(cloud: &GaussianCloud<T>, cam: &Camera<T>) -> GaussianColors<T> {
    let center = cam.center();
    let degree = cloud.active_sh_degree();
    let mut colors = Vec::with_capacity(cloud.len());
    let mut gates = Vec::with_capacity(cloud.len());
    let mut basis = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let dir = geom::normalize(geom::sub(cloud.means()[i], center));
        let raw = sh::eval_sh_unclamped(&cloud.sh()[i], dir, degree);
        colors.push(raw.map(|v| v.max(T::zero()).min(T::one())));
        gates.push(raw.map(|v| v >= T::zero() && v <= T::one()));
        basis.push(sh::sh_basis(dir, degree));
    }
    GaussianColors { colors, gates, basis }
}

/// Renders colour, alpha, depth and compositing weights.
pub fn render<T: Real>(
    cloud: &GaussianCloud<T>,
    cam: &Camera<T>,
    background: [T; 3],
) -> Result<RenderBundle<T>, RenderError> {
    cam.validate()?;
    let splats = project(cloud, cam)?;
    let colors = gaussian_colors(cloud, cam).colors;
    let (w, h) = (cam.width, cam.height);
    let alpha_min = T::lit(ALPHA_MIN);

    struct Row<T> {
        entries: Vec<(u32, T)>,
        counts: Vec<usize>,
        rgb: Vec<[T; 3]>,
        alpha: Vec<T>,
        depth: Vec<T>,
        trans: Vec<T>,
    }

    let rows: Vec<Row<T>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Row {
                entries: Vec::new(),
                counts: Vec::with_capacity(w),
                rgb: Vec::with_capacity(w),
                alpha: Vec::with_capacity(w),
                depth: Vec::with_capacity(w),
                trans: Vec::with_capacity(w),
            };
            let yi = y as i64;
            let active: Vec<&Splat<T>> = splats.iter().filter(|s| s.bounds[2] <= yi && yi <= s.bounds[3]).collect();
            for x in 0..w {
                let xi = x as i64;
                let mut t = T::one();
                let mut color = [T::zero(); 3];
                let mut acc = T::zero();
                let mut depth = T::zero();
                let mut n = 0;
                for s in &active {
                    if xi < s.bounds[0] || xi > s.bounds[1] {
                        continue;
                    }
                    let a = splat_alpha(s, cloud.opacities()[s.index], x, y);
                    if a < alpha_min {
                        continue;
                    }
                    let wt = a * t;
                    let c = colors[s.index];
                    for k in 0..3 {
                        color[k] += wt * c[k];
                    }
                    acc += wt;
                    depth += wt * s.depth;
                    t *= T::one() - a;
                    row.entries.push((s.index as u32, wt));
                    n += 1;
                }
                for k in 0..3 {
                    color[k] += (T::one() - acc) * background[k];
                }
                row.counts.push(n);
                row.rgb.push(color);
                row.alpha.push(acc);
                row.depth.push(if acc > T::zero() { depth / acc } else { T::zero() });
                row.trans.push(t);
            }
            row
        })
        .collect();

    let mut rgb = Array3::zeros((h, w, 3));
    let mut alpha = Array2::zeros((h, w));
    let mut depth = Array2::zeros((h, w));
    let mut trans = Array2::zeros((h, w));
    let mut offsets = Vec::with_capacity(w * h + 1);
    let mut entries = Vec::new();
    offsets.push(0);
    for (y, row) in rows.into_iter().enumerate() {
        for x in 0..w {
            for k in 0..3 {
                rgb[[y, x, k]] = row.rgb[x][k];
            }
            alpha[[y, x]] = row.alpha[x];
            depth[[y, x]] = row.depth[x];
            trans[[y, x]] = row.trans[x];
        }
        let mut start = 0;
        for &c in &row.counts {
            entries.extend_from_slice(&row.entries[start..start + c]);
            start += c;
            offsets.push(entries.len());
        }
    }
    Ok(RenderBundle {
        rgb,
        alpha,
        depth,
        transmittance: trans,
        weights: PixelWeights { offsets, entries },
        meta: RenderMeta::default(),
    })
}

/// Per-pixel total weight of the Gaussians at `indices`.
pub fn render_mask<T: Real>(
    cloud: &GaussianCloud<T>,
    cam: &Camera<T>,
    indices: &[usize],
) -> Result<Array2<T>, RenderError> {
    let bundle = render(cloud, cam, [T::zero(); 3])?;
    Ok(bundle.mask(&selection(cloud.len(), indices)))
}

/// Boolean membership vector for `indices` (out-of-range indices ignored).
pub fn selection(len: usize, indices: &[usize]) -> Vec<bool> {
    let mut sel = vec![false; len];
    for &i in indices {
        if i < len {
            sel[i] = true;
        }
    }
    sel
}

/// Gradient of a scalar loss with respect to every SH coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorGrad<T> {
    pub sh: Vec<ShCoeffs<T>>,
}

impl<T: Real> ColorGrad<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            sh: vec![[[T::zero(); 3]; SH_COEFFS]; n],
        }
    }
}

/// Pulls an image cotangent back to SH coefficients through the frozen
/// compositing weights of `bundle`. Channels whose colour hit the `[0,1]`
/// clamp receive no gradient.
pub fn backprop_color<T: Real>(
    bundle: &RenderBundle<T>,
    cloud: &GaussianCloud<T>,
    cam: &Camera<T>,
    d_image: &Array3<T>,
) -> Result<ColorGrad<T>, RenderError> {
    let (h, w) = (bundle.height(), bundle.width());
    if d_image.shape() != [h, w, 3] {
        return Err(RenderError::ShapeMismatch {
            expected: vec![h, w, 3],
            got: d_image.shape().to_vec(),
        });
    }
    if cam.width != w || cam.height != h {
        return Err(RenderError::ShapeMismatch {
            expected: vec![h, w],
            got: vec![cam.height, cam.width],
        });
    }
    let colors = gaussian_colors(cloud, cam);
    let mut per_color = vec![[T::zero(); 3]; cloud.len()];
    for y in 0..h {
        for x in 0..w {
            let g = [d_image[[y, x, 0]], d_image[[y, x, 1]], d_image[[y, x, 2]]];
            for &(i, wt) in bundle.weights.at(x, y, w) {
                let acc = &mut per_color[i as usize];
                for k in 0..3 {
                    acc[k] += wt * g[k];
                }
            }
        }
    }
    let n_coeffs = sh_count(cloud.active_sh_degree());
    let mut grad = ColorGrad::zeros(cloud.len());
    for i in 0..cloud.len() {
        let basis = &colors.basis[i];
        for c in 0..3 {
            if !colors.gates[i][c] {
                continue;
            }
            for k in 0..n_coeffs {
                grad.sh[i][k][c] = per_color[i][c] * basis[k];
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Gaussian;

    fn axis_camera(size: usize) -> Camera<f64> {
        Camera::look_at([0.0, 0.0, -5.0], [0.0; 3], [0.0, -1.0, 0.0], 20.0, size, size)
    }

    #[test]
    fn empty_cloud_is_background() {
        let cam = axis_camera(9);
        let b = render(&GaussianCloud::<f64>::empty(), &cam, [0.5; 3]).unwrap();
        assert!(b.rgb.iter().all(|&v| v == 0.5));
        assert!(b.alpha.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn opaque_white_blob_at_centre() {
        let cam = axis_camera(9);
        let g = Gaussian::isotropic([0.0; 3], 0.5, 1.0, [1.0; 3]);
        let cloud = GaussianCloud::from_gaussians(vec![g]).unwrap();
        let b = render(&cloud, &cam, [0.0; 3]).unwrap();
        assert!(b.alpha[[4, 4]] >= 0.98);
        for k in 0..3 {
            assert!((b.rgb[[4, 4, k]] - 0.99).abs() < 1e-6, "{}", b.rgb[[4, 4, k]]);
        }
        assert!((b.depth[[4, 4]] - 5.0).abs() < 0.05);
    }

    #[test]
    fn camera_validation() {
        let mut cam = axis_camera(4);
        cam.near = 0.0;
        assert!(cam.validate().is_err());
        let mut cam = axis_camera(4);
        cam.fx = -1.0;
        assert!(cam.validate().is_err());
        let mut cam = axis_camera(4);
        cam.width = 0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = axis_camera(9);
        let g = Gaussian::isotropic([0.0, 0.0, -10.0], 0.5, 1.0, [1.0; 3]);
        let cloud = GaussianCloud::from_gaussians(vec![g]).unwrap();
        let b = render(&cloud, &cam, [0.0; 3]).unwrap();
        assert!(b.alpha.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backprop_rejects_wrong_shape() {
        let cam = axis_camera(5);
        let cloud = GaussianCloud::<f64>::empty();
        let b = render(&cloud, &cam, [0.0; 3]).unwrap();
        let bad = Array3::zeros((4, 5, 3));
        assert!(matches!(
            backprop_color(&b, &cloud, &cam, &bad),
            Err(RenderError::ShapeMismatch { .. })
        ));
    }
}
