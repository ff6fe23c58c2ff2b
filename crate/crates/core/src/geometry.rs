//! Pinhole camera math for plane sweeping and inverse warping.
//!
//! Conventions: poses map world to camera, `x_cam = R * x_world + t`; pixel
//! `(x, y)` addresses column `x` and row `y` with integer values on pixel
//! centers and the origin at the top-left pixel center; depth is the camera
//! frame `z` coordinate.

use autodiff::{bilinear_sample, Tensor, Var};
use nalgebra::{Matrix3, Vector3};

use crate::error::{invalid, Result};

/// Homogeneous components at or below this magnitude are treated as invalid.
pub const MIN_HOMOGENEOUS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    k: Matrix3<f64>,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::from_matrix(Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0))
    }

    /// Accepts an upper-triangular calibration matrix with positive focal lengths and `K[2][2] == 1`.
    pub fn from_matrix(k: Matrix3<f64>) -> Result<Self> {
        let lower_zero = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
        if !lower_zero || !(k[(0, 0)] > 0.0) || !(k[(1, 1)] > 0.0) || k[(2, 2)] != 1.0 {
            return invalid(format!("intrinsics must be upper-triangular with positive focal lengths: {k}"));
        }
        Ok(Self { k })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn inverse(&self) -> Result<Matrix3<f64>> {
        match self.k.try_inverse() {
            Some(inv) => Ok(inv),
            None => invalid("singular intrinsics"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= 1e-9) || !((det - 1.0).abs() <= 1e-9) || !translation.iter().all(|v| v.is_finite()) {
            return invalid(format!("not a proper rotation (orthogonality error {ortho:e}, det {det})"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Camera at `eye` looking at `target`, image `y` axis pointing along world `+y` as far as possible.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return invalid("look_at: eye and target coincide");
        }
        let z = forward.normalize();
        let right = Vector3::y().cross(&z);
        if right.norm() < 1e-9 {
            return invalid("look_at: viewing direction parallel to the down axis");
        }
        let x = right.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::new(rotation, -(rotation * eye))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }
}

/// Viewing direction of the camera in world coordinates, `Rᵀ (0, 0, 1)ᵀ`.
pub fn principal_axis(pose: &Pose) -> Vector3<f64> {
    pose.rotation.row(2).transpose()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Self {
        Self { intrinsics, pose }
    }

    /// Projects a world point; `None` behind or on the camera plane.
    pub fn project(&self, world: &Vector3<f64>) -> Option<(f64, f64)> {
        let p = self.intrinsics.matrix() * self.pose.to_camera(world);
        (p.z > MIN_HOMOGENEOUS).then(|| (p.x / p.z, p.y / p.z))
    }

    /// World point at camera-frame depth `depth` along the ray through pixel `(x, y)`.
    pub fn back_project(&self, x: f64, y: f64, depth: f64) -> Result<Vector3<f64>> {
        let ray = self.intrinsics.inverse()? * Vector3::new(x, y, 1.0);
        let cam = ray * (depth / ray.z);
        Ok(self.pose.rotation.transpose() * (cam - self.pose.translation))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosedImage {
    /// `[H, W, 3]`, entries in `[0, 1]`.
    pub image: Tensor,
    pub camera: Camera,
}

impl PosedImage {
    pub fn new(image: Tensor, camera: Camera) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 || s[0] < 8 || s[1] < 8 {
            return invalid(format!("posed image must be at least 8x8 with 3 channels, got {s:?}"));
        }
        Ok(Self { image, camera })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// `count` depth planes spaced uniformly over `[d_min, d_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthHypotheses {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl DepthHypotheses {
    pub fn new(d_min: f64, d_max: f64, count: usize) -> Result<Self> {
        if !(d_min > 0.0 && d_min < d_max) || count == 0 {
            return invalid(format!("invalid depth range [{d_min}, {d_max}] with {count} planes"));
        }
        Ok(Self { d_min, d_max, count })
    }

    pub fn interval(&self) -> f64 {
        if self.count > 1 {
            (self.d_max - self.d_min) / (self.count - 1) as f64
        } else {
            0.0
        }
    }

    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![0.5 * (self.d_min + self.d_max)];
        }
        let step = self.interval();
        (0..self.count)
            .map(|k| if k + 1 == self.count { self.d_max } else { self.d_min + step * k as f64 })
            .collect()
    }
}

/// Binary per-pixel validity over an `H x W` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl VisibilityMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return invalid(format!("mask of {} entries for {height}x{width}", bits.len()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `[H, W]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.height, self.width], |i| if self.bits[i] { 1.0 } else { 0.0 })
    }

    pub fn and(&self, other: &Self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        }
    }
}

/// Plane-induced homography split as `H(d) = A + B / d`.
#[derive(Clone, Copy, Debug)]
pub struct HomographyTerms {
    pub rotation_part: Matrix3<f64>,
    pub translation_part: Matrix3<f64>,
}

impl HomographyTerms {
    pub fn at(&self, depth: f64) -> Matrix3<f64> {
        self.rotation_part + self.translation_part / depth
    }
}

/// Decomposes the reference-to-source plane homography
/// `K_s R_s (I - (c_s - c_r) n_rᵀ / d) R_rᵀ K_r⁻¹`, where `c` are camera
/// centers (`c = -Rᵀ t`) and `n_r` the reference principal axis.
pub fn homography_terms(reference: &Camera, source: &Camera) -> Result<HomographyTerms> {
    let k_ref_inv = reference.intrinsics.inverse()?;
    let ks_rs = source.intrinsics.matrix() * source.pose.rotation();
    let back = reference.pose.rotation().transpose() * k_ref_inv;
    let baseline = source.pose.center() - reference.pose.center();
    let normal = principal_axis(&reference.pose);
    Ok(HomographyTerms {
        rotation_part: ks_rs * back,
        translation_part: -(ks_rs * baseline * normal.transpose() * back),
    })
}

/// Homography mapping reference pixels to source pixels for the fronto-parallel plane at `depth`.
pub fn homography(reference: &Camera, source: &Camera, depth: f64) -> Result<Matrix3<f64>> {
    if !(depth > 0.0) {
        return invalid(format!("homography depth must be positive, got {depth}"));
    }
    Ok(homography_terms(reference, source)?.at(depth))
}

/// [`homography`] as a `[3, 3]` variable, differentiable in the scalar `depth`.
pub fn homography_var(reference: &Camera, source: &Camera, depth: &Var) -> Result<Var> {
    if depth.value().len() != 1 || !(depth.item() > 0.0) {
        return invalid("homography_var expects one positive depth");
    }
    let terms = homography_terms(reference, source)?;
    let a = Var::constant(matrix_tensor(&terms.rotation_part));
    let b = Var::constant(matrix_tensor(&terms.translation_part));
    let inv = Var::constant(Tensor::ones(&[1])).div(&depth.reshape(&[1])?)?;
    let inv = inv.broadcast_axis(0, 9)?.reshape(&[3, 3])?;
    Ok(a.add(&b.mul(&inv)?)?)
}

pub(crate) fn matrix_tensor(m: &Matrix3<f64>) -> Tensor {
    Tensor::from_fn(&[3, 3], |i| m[(i / 3, i % 3)])
}

/// Dehomogenized `H (u, 1)ᵀ`, or `None` when the homogeneous component is not positive.
pub fn apply_homography(h: &Matrix3<f64>, u: (f64, f64)) -> Option<(f64, f64)> {
    let p = h * Vector3::new(u.0, u.1, 1.0);
    (p.z > MIN_HOMOGENEOUS).then(|| (p.x / p.z, p.y / p.z))
}

/// Mapped coordinates from per-point homogeneous components, plus validity.
pub struct MappedCoords {
    pub xs: Var,
    pub ys: Var,
    pub valid: Vec<bool>,
}

/// Divides by `hz` where it is valid; invalid points get a finite dummy
/// coordinate outside every image so sampling rejects them.
fn dehomogenize(hx: &Var, hy: &Var, hz: &Var) -> Result<MappedCoords> {
    let valid: Vec<bool> = hz.value().data().iter().map(|&z| z > MIN_HOMOGENEOUS).collect();
    let n = valid.len();
    let keep = Tensor::from_fn(&[n], |i| if valid[i] { 1.0 } else { 0.0 });
    let fill = Tensor::from_fn(&[n], |i| if valid[i] { 0.0 } else { 1.0 });
    let keep = Var::constant(keep);
    let denom = hz.mul(&keep)?.add(&Var::constant(fill.clone()))?;
    let outside = Var::constant(fill.map(|f| f * -1e6));
    let xs = hx.mul(&keep)?.div(&denom)?.add(&outside)?;
    let ys = hy.mul(&keep)?.div(&denom)?.add(&outside)?;
    Ok(MappedCoords { xs, ys, valid })
}

/// Differentiable [`apply_homography`] for a batch: `h` is `[3, 3]`, `points` is `[Q, 2]`.
pub fn apply_homography_var(h: &Var, points: &Var) -> Result<MappedCoords> {
    let q = points.shape()[0];
    let ones = Var::constant(Tensor::ones(&[q, 1]));
    let hom = concat_columns(points, &ones)?;
    let mapped = hom.matmul_nt(&h)?;
    let col = |j: usize| -> Result<Var> {
        let map: std::rc::Rc<[u32]> = (0..q).map(|i| (i * 3 + j) as u32).collect();
        Ok(mapped.gather(map, &[q])?)
    };
    dehomogenize(&col(0)?, &col(1)?, &col(2)?)
}

fn concat_columns(a: &Var, b: &Var) -> Result<Var> {
    // [Q, 2] and [Q, 1] into [Q, 3] via two scatters.
    let q = a.shape()[0];
    let ma: std::rc::Rc<[u32]> = (0..q * 2).map(|i| ((i / 2) * 3 + i % 2) as u32).collect();
    let mb: std::rc::Rc<[u32]> = (0..q).map(|i| (i * 3 + 2) as u32).collect();
    Ok(a.scatter_add(ma, &[q, 3])?.add(&b.scatter_add(mb, &[q, 3])?)?)
}

/// Reference-to-source pixel coordinates for every reference pixel at its own depth.
///
/// `depth` is `[H, W]`; coordinates are differentiable with respect to it.
pub fn warp_coords(reference: &Camera, source: &Camera, depth: &Var) -> Result<MappedCoords> {
    let shape = depth.shape();
    if shape.len() != 2 {
        return invalid(format!("depth map must be [H, W], got {shape:?}"));
    }
    let (h, w) = (shape[0], shape[1]);
    let terms = homography_terms(reference, source)?;
    let mut a = [vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]];
    let mut b = [vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]];
    for row in 0..h {
        for col in 0..w {
            let u = Vector3::new(col as f64, row as f64, 1.0);
            let pa = terms.rotation_part * u;
            let pb = terms.translation_part * u;
            let i = row * w + col;
            for k in 0..3 {
                a[k][i] = pa[k];
                b[k][i] = pb[k];
            }
        }
    }
    let inv_depth = Var::constant(Tensor::ones(&[h * w])).div(&depth.reshape(&[h * w])?)?;
    let comp = |k: usize| -> Result<Var> {
        let ak = Var::constant(Tensor::vector(a[k].clone()));
        let bk = Var::constant(Tensor::vector(b[k].clone()));
        Ok(ak.add(&bk.mul(&inv_depth)?)?)
    };
    dehomogenize(&comp(0)?, &comp(1)?, &comp(2)?)
}

/// Samples `source.image` at the reference pixels' correspondences under `depth`.
///
/// Returns the `[H, W, 3]` warped image and the visibility mask (valid
/// homogeneous component and in-bounds bilinear neighborhood).
pub fn inverse_warp(source: &PosedImage, reference: &Camera, depth: &Var) -> Result<(Var, VisibilityMask)> {
    if depth.value().data().iter().any(|&d| !(d > 0.0)) {
        return invalid("inverse_warp: depth must be positive");
    }
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let coords = warp_coords(reference, &source.camera, depth)?;
    let grid = Var::constant(source.image.clone());
    let sampled = bilinear_sample(&grid, &coords.xs, &coords.ys)?;
    let bits: Vec<bool> = sampled.in_bounds.iter().zip(&coords.valid).map(|(a, b)| *a && *b).collect();
    let c = source.image.shape()[2];
    let warped = sampled.values.reshape(&[h, w, c])?;
    Ok((warped, VisibilityMask::new(h, w, bits)?))
}
