//! Gaussian cloud data model, rigid insertion and appearance initialization.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Quat, Vec3};
use crate::scalar::Real;

/// Highest spherical harmonics degree carried per Gaussian.
pub const SH_MAX_DEGREE: usize = 3;
/// Coefficients per colour channel for degrees `0..=SH_MAX_DEGREE`.
pub const SH_COEFFS: usize = (SH_MAX_DEGREE + 1) * (SH_MAX_DEGREE + 1);

const UNIT_QUAT_TOL: f64 = 1e-6;

/// Per-Gaussian SH coefficients, `[coefficient][channel]`.
pub type ShCoeffs<T> = [[T; 3]; SH_COEFFS];

/// Number of SH coefficients used by bands `0..=degree`.
pub const fn sh_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("malformed cloud file: {0}")]
    MalformedFile(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("empty index range")]
    EmptyRange,
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// One Gaussian with activated (linear) attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian<T> {
    pub mean: Vec3<T>,
    pub scale: Vec3<T>,
    pub rotation: Quat<T>,
    pub opacity: T,
    pub sh: ShCoeffs<T>,
}

impl<T: Real> Gaussian<T> {
    /// Isotropic Gaussian with a flat base colour `rgb` (in `[0,1]`).
    pub fn isotropic(mean: Vec3<T>, radius: T, opacity: T, rgb: [T; 3]) -> Self {
        let mut sh = [[T::zero(); 3]; SH_COEFFS];
        for (c, v) in rgb.iter().enumerate() {
            sh[0][c] = rgb_to_dc(*v);
        }
        Self {
            mean,
            scale: [radius; 3],
            rotation: geom::quat_identity(),
            opacity,
            sh,
        }
    }
}

/// Degree-0 coefficient that renders as colour `v` under the `+0.5` offset.
pub fn rgb_to_dc<T: Real>(v: T) -> T {
    (v - T::half()) / T::lit(crate::sh::SH_C0)
}

/// Inverse of [`rgb_to_dc`].
pub fn dc_to_rgb<T: Real>(dc: T) -> T {
    dc * T::lit(crate::sh::SH_C0) + T::half()
}

/// A 3D Gaussian splatting cloud stored as structure-of-arrays.
///
/// Values are immutable once constructed; the crate's optimizers only touch
/// SH coefficients through crate-internal accessors.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud<T> {
    means: Vec<Vec3<T>>,
    scales: Vec<Vec3<T>>,
    rotations: Vec<Quat<T>>,
    opacities: Vec<T>,
    sh: Vec<ShCoeffs<T>>,
    active_sh_degree: usize,
}

impl<T: Real> Default for GaussianCloud<T> {
    fn default() -> Self {
        Self::empty()
    }
}

impl<T: Real> GaussianCloud<T> {
    pub fn empty() -> Self {
        Self {
            means: Vec::new(),
            scales: Vec::new(),
            rotations: Vec::new(),
            opacities: Vec::new(),
            sh: Vec::new(),
            active_sh_degree: SH_MAX_DEGREE,
        }
    }

    /// Builds a cloud, checking every invariant.
    pub fn new(
        means: Vec<Vec3<T>>,
        scales: Vec<Vec3<T>>,
        rotations: Vec<Quat<T>>,
        opacities: Vec<T>,
        sh: Vec<ShCoeffs<T>>,
        active_sh_degree: usize,
    ) -> Result<Self, CloudError> {
        let n = means.len();
        if scales.len() != n || rotations.len() != n || opacities.len() != n || sh.len() != n {
            return Err(CloudError::InvariantViolation(
                "attribute arrays have different lengths".into(),
            ));
        }
        let cloud = Self {
            means,
            scales,
            rotations,
            opacities,
            sh,
            active_sh_degree,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn from_gaussians(gaussians: Vec<Gaussian<T>>) -> Result<Self, CloudError> {
        let mut cloud = Self::empty();
        for g in gaussians {
            cloud.means.push(g.mean);
            cloud.scales.push(g.scale);
            cloud.rotations.push(geom::quat_normalize(g.rotation));
            cloud.opacities.push(g.opacity);
            cloud.sh.push(g.sh);
        }
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        if self.active_sh_degree > SH_MAX_DEGREE {
            return Err(CloudError::InvariantViolation(format!(
                "active SH degree {} exceeds {}",
                self.active_sh_degree, SH_MAX_DEGREE
            )));
        }
        for i in 0..self.len() {
            let finite = self.means[i].iter().all(|v| v.is_finite())
                && self.scales[i].iter().all(|v| v.is_finite())
                && self.rotations[i].iter().all(|v| v.is_finite())
                && self.opacities[i].is_finite()
                && self.sh[i].iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(CloudError::InvariantViolation(format!(
                    "gaussian {i} has a non-finite attribute"
                )));
            }
            let o = self.opacities[i];
            if o < T::zero() || o > T::one() {
                return Err(CloudError::InvariantViolation(format!(
                    "gaussian {i} opacity {o} outside [0, 1]"
                )));
            }
            if self.scales[i].iter().any(|&s| s <= T::zero()) {
                return Err(CloudError::InvariantViolation(format!(
                    "gaussian {i} has a non-positive scale"
                )));
            }
            let qn = geom::quat_norm(self.rotations[i]).as_f64();
            if (qn - 1.0).abs() > UNIT_QUAT_TOL {
                return Err(CloudError::InvariantViolation(format!(
                    "gaussian {i} rotation has norm {qn}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn means(&self) -> &[Vec3<T>] {
        &self.means
    }

    pub fn scales(&self) -> &[Vec3<T>] {
        &self.scales
    }

    pub fn rotations(&self) -> &[Quat<T>] {
        &self.rotations
    }

    pub fn opacities(&self) -> &[T] {
        &self.opacities
    }

    pub fn sh(&self) -> &[ShCoeffs<T>] {
        &self.sh
    }

    pub fn active_sh_degree(&self) -> usize {
        self.active_sh_degree
    }

    pub fn gaussian(&self, i: usize) -> Gaussian<T> {
        Gaussian {
            mean: self.means[i],
            scale: self.scales[i],
            rotation: self.rotations[i],
            opacity: self.opacities[i],
            sh: self.sh[i],
        }
    }

    pub fn with_active_sh_degree(mut self, degree: usize) -> Result<Self, CloudError> {
        if degree > SH_MAX_DEGREE {
            return Err(CloudError::InvariantViolation(format!(
                "active SH degree {degree} exceeds {SH_MAX_DEGREE}"
            )));
        }
        self.active_sh_degree = degree;
        Ok(self)
    }

    pub(crate) fn sh_mut(&mut self) -> &mut [ShCoeffs<T>] {
        &mut self.sh
    }

    /// Replaces the SH block of the Gaussians in `range`.
    pub fn with_sh_block(mut self, range: Range<usize>, block: &[ShCoeffs<T>]) -> Result<Self, CloudError> {
        if range.end > self.len() || block.len() != range.len() {
            return Err(CloudError::InvariantViolation("SH block does not match range".into()));
        }
        if block.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(CloudError::InvariantViolation("non-finite SH coefficient".into()));
        }
        self.sh[range].copy_from_slice(block);
        Ok(self)
    }

    /// Cloud holding only the Gaussians outside `range`, in their original order.
    pub fn without(&self, range: Range<usize>) -> Self {
        let keep = |i: &usize| !range.contains(i);
        let idx: Vec<usize> = (0..self.len()).filter(keep).collect();
        self.select(&idx)
    }

    /// Cloud holding the Gaussians at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            means: indices.iter().map(|&i| self.means[i]).collect(),
            scales: indices.iter().map(|&i| self.scales[i]).collect(),
            rotations: indices.iter().map(|&i| self.rotations[i]).collect(),
            opacities: indices.iter().map(|&i| self.opacities[i]).collect(),
            sh: indices.iter().map(|&i| self.sh[i]).collect(),
            active_sh_degree: self.active_sh_degree,
        }
    }

    fn push(&mut self, g: Gaussian<T>) {
        self.means.push(g.mean);
        self.scales.push(g.scale);
        self.rotations.push(g.rotation);
        self.opacities.push(g.opacity);
        self.sh.push(g.sh);
    }

    /// Converts every attribute to another scalar type.
    pub fn cast<U: Real>(&self) -> GaussianCloud<U> {
        let c = |v: T| U::lit(v.as_f64());
        GaussianCloud {
            means: self.means.iter().map(|m| m.map(c)).collect(),
            scales: self.scales.iter().map(|m| m.map(c)).collect(),
            rotations: self.rotations.iter().map(|m| m.map(c)).collect(),
            opacities: self.opacities.iter().map(|&v| c(v)).collect(),
            sh: self.sh.iter().map(|s| s.map(|k| k.map(c))).collect(),
            active_sh_degree: self.active_sh_degree,
        }
    }

    /// Centre and radius of a sphere enclosing every mean.
    pub fn bounding_sphere(&self) -> (Vec3<T>, T) {
        if self.is_empty() {
            return ([T::zero(); 3], T::zero());
        }
        let n = T::from_usize(self.len()).unwrap();
        let mut c = [T::zero(); 3];
        for m in &self.means {
            c = geom::add(c, *m);
        }
        let c = geom::scale(c, T::one() / n);
        let r = self
            .means
            .iter()
            .map(|m| geom::norm(geom::sub(*m, c)))
            .fold(T::zero(), T::max);
        (c, r)
    }
}

/// Similarity transform placing an object into a scene, plus the index range
/// the object occupies after insertion.
#[derive(Clone, Debug, PartialEq)]
pub struct InsertionSpec<T> {
    pub translation: Vec3<T>,
    pub rotation: Quat<T>,
    pub uniform_scale: T,
    pub object_range: Range<usize>,
}

impl<T: Real> InsertionSpec<T> {
    pub fn identity() -> Self {
        Self {
            translation: [T::zero(); 3],
            rotation: geom::quat_identity(),
            uniform_scale: T::one(),
            object_range: 0..0,
        }
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        let qn = geom::quat_norm(self.rotation).as_f64();
        if (qn - 1.0).abs() > UNIT_QUAT_TOL {
            return Err(CloudError::InvariantViolation(format!(
                "insertion rotation has norm {qn}"
            )));
        }
        if !(self.uniform_scale > T::zero()) || !self.uniform_scale.is_finite() {
            return Err(CloudError::InvariantViolation(format!(
                "insertion scale {} must be positive",
                self.uniform_scale
            )));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(CloudError::InvariantViolation("non-finite translation".into()));
        }
        Ok(())
    }

    /// Applies the similarity transform to a point: `R(s·p) + t`.
    pub fn apply_point(&self, p: Vec3<T>) -> Vec3<T> {
        geom::add(
            geom::quat_rotate(self.rotation, geom::scale(p, self.uniform_scale)),
            self.translation,
        )
    }

    /// The transform `after ∘ self`.
    pub fn then(&self, after: &Self) -> Self {
        Self {
            translation: after.apply_point(self.translation),
            rotation: geom::quat_normalize(geom::quat_mul(after.rotation, self.rotation)),
            uniform_scale: after.uniform_scale * self.uniform_scale,
            object_range: self.object_range.clone(),
        }
    }
}

/// JSON form of an insertion spec: `{translation:[3], rotation_wxyz:[4], scale}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InsertionSpecFile {
    pub translation: [f64; 3],
    pub rotation_wxyz: [f64; 4],
    pub scale: f64,
}

impl InsertionSpecFile {
    pub fn to_spec<T: Real>(&self) -> InsertionSpec<T> {
        InsertionSpec {
            translation: self.translation.map(T::lit),
            rotation: self.rotation_wxyz.map(T::lit),
            uniform_scale: T::lit(self.scale),
            object_range: 0..0,
        }
    }
}

/// What happens to view-dependent SH bands of an inserted object.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ShInsertion {
    /// Bands of degree ≥ 1 are zeroed (the relighting pipeline reinitializes them).
    #[default]
    ZeroHigherBands,
    /// Keep the original coefficients unrotated. View-dependent colour of the
    /// object is then evaluated in the object's original frame, so it is off
    /// by the insertion rotation.
    RawPreview,
}

/// Rigidly places `object` into `scene`. Scene Gaussians come first and are
/// copied bit-exactly; the returned spec's `object_range` indexes the
/// appended object Gaussians.
pub fn insert_object<T: Real>(
    scene: &GaussianCloud<T>,
    object: &GaussianCloud<T>,
    spec: &InsertionSpec<T>,
    sh_mode: ShInsertion,
) -> Result<(GaussianCloud<T>, InsertionSpec<T>), CloudError> {
    spec.validate()?;
    let mut merged = scene.clone();
    let start = merged.len();
    for i in 0..object.len() {
        let mut g = object.gaussian(i);
        g.mean = spec.apply_point(g.mean);
        g.rotation = geom::quat_mul(spec.rotation, g.rotation);
        if (geom::quat_norm(g.rotation).as_f64() - 1.0).abs() > UNIT_QUAT_TOL * 0.5 {
            g.rotation = geom::quat_normalize(g.rotation);
        }
        g.scale = geom::scale(g.scale, spec.uniform_scale);
        if sh_mode == ShInsertion::ZeroHigherBands {
            for k in g.sh.iter_mut().skip(1) {
                *k = [T::zero(); 3];
            }
        }
        merged.push(g);
    }
    if scene.is_empty() {
        merged.active_sh_degree = object.active_sh_degree;
    }
    merged.validate()?;
    let mut out = spec.clone();
    out.object_range = start..merged.len();
    Ok((merged, out))
}

/// Applies a similarity transform to the Gaussians in `range` only.
pub fn transform_range<T: Real>(
    cloud: &GaussianCloud<T>,
    range: Range<usize>,
    spec: &InsertionSpec<T>,
) -> Result<GaussianCloud<T>, CloudError> {
    spec.validate()?;
    if range.end > cloud.len() {
        return Err(CloudError::InvariantViolation("range out of bounds".into()));
    }
    let mut out = cloud.clone();
    for i in range {
        out.means[i] = spec.apply_point(out.means[i]);
        out.rotations[i] = geom::quat_normalize(geom::quat_mul(spec.rotation, out.rotations[i]));
        out.scales[i] = geom::scale(out.scales[i], spec.uniform_scale);
    }
    Ok(out)
}

/// Sets every object Gaussian's base colour to the object's mean degree-0
/// coefficient (per channel) and zeroes the higher SH bands.
pub fn init_object_appearance<T: Real>(
    cloud: &GaussianCloud<T>,
    range: Range<usize>,
) -> Result<GaussianCloud<T>, CloudError> {
    if range.is_empty() {
        return Err(CloudError::EmptyRange);
    }
    if range.end > cloud.len() {
        return Err(CloudError::InvariantViolation("range out of bounds".into()));
    }
    let n = T::from_usize(range.len()).unwrap();
    let mut mean = [T::zero(); 3];
    for sh in &cloud.sh[range.clone()] {
        for c in 0..3 {
            mean[c] += sh[0][c];
        }
    }
    let mean = mean.map(|v| v / n);
    let mut out = cloud.clone();
    for sh in &mut out.sh[range] {
        sh[0] = mean;
        for k in sh.iter_mut().skip(1) {
            *k = [T::zero(); 3];
        }
    }
    Ok(out)
}

/// Progressive SH activation: one extra band every `sh_degree_interval` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShScheduleConfig {
    pub sh_degree_interval: u64,
}

impl Default for ShScheduleConfig {
    fn default() -> Self {
        Self {
            sh_degree_interval: 5000,
        }
    }
}

pub fn active_degree_at(step: u64, cfg: &ShScheduleConfig, max_degree: usize) -> usize {
    let interval = cfg.sh_degree_interval.max(1);
    ((step / interval) as usize).min(max_degree)
}
