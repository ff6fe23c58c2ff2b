//! Deterministic synthetic multi-view scenes with analytic depth.
//!
//! The world frame is the reference camera frame. Surfaces are bounded planes
//! carrying a view-independent procedural texture, so any two renders of the
//! same surface point agree up to 8-bit quantization.

mod io;
mod texture;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use autodiff::{Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::geometry::{inverse_warp, Camera, DepthHypotheses, Intrinsics, Pose, PosedImage, VisibilityMask};

pub use io::{
    decode_pfm, decode_ppm, encode_pfm, encode_ppm, format_cam, parse_cam, read_pfm, read_ppm, read_scene, write_pfm,
    write_ppm, write_scene,
};
pub use texture::Texture;

/// Minimum fraction of reference pixels each source view must cover.
pub const MIN_VISIBILITY: f64 = 0.7;
const MAX_ATTEMPTS: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    FrontoParallel,
    Slanted,
    TwoPlaneStep,
    TexturedBox,
}

impl Layout {
    pub const ALL: [Layout; 4] = [Layout::FrontoParallel, Layout::Slanted, Layout::TwoPlaneStep, Layout::TexturedBox];

    pub fn name(&self) -> &'static str {
        match self {
            Layout::FrontoParallel => "fronto-parallel",
            Layout::Slanted => "slanted",
            Layout::TwoPlaneStep => "two-plane-step",
            Layout::TexturedBox => "textured-box",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureSpec {
    /// Lattice frequency of the coarsest noise octave, per world unit.
    pub base_frequency: f64,
    pub octaves: usize,
    /// Checker cell size in world units; no overlay when absent.
    pub checker: Option<f64>,
    pub checker_weight: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self { base_frequency: 2.0, octaves: 2, checker: None, checker_weight: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Fixed layout, or cycle through all layouts by scene index when absent.
    pub layout: Option<Layout>,
    pub texture: TextureSpec,
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    /// Views used by the depth network, reference included.
    pub n_views: usize,
    /// Source views available to the photometric loss.
    pub m_sources: usize,
    pub ring_radius: f64,
    /// Look-at target jitter in world units.
    pub jitter: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub depth_count: usize,
    /// Per-source additive brightness offset drawn from `[-b, b]`.
    pub brightness_jitter: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            layout: None,
            texture: TextureSpec::default(),
            height: 32,
            width: 48,
            focal: 40.0,
            n_views: 3,
            m_sources: 4,
            ring_radius: 0.5,
            jitter: 0.05,
            d_min: 2.0,
            d_max: 4.0,
            depth_count: 16,
            brightness_jitter: 0.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return invalid(format!("images must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if self.n_views < 2 || self.m_sources + 1 < self.n_views {
            return invalid(format!("need 2 <= n_views <= m_sources + 1, got N={} M={}", self.n_views, self.m_sources));
        }
        if !(self.focal > 0.0 && self.ring_radius > 0.0 && self.jitter >= 0.0 && self.brightness_jitter >= 0.0) {
            return invalid("focal and ring radius must be positive; jitters nonnegative");
        }
        DepthHypotheses::new(self.d_min, self.d_max, self.depth_count)?;
        Ok(())
    }

    pub fn hypotheses(&self) -> Result<DepthHypotheses> {
        DepthHypotheses::new(self.d_min, self.d_max, self.depth_count)
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// Seed of scene `index`; its parity decides the train/test split.
    pub fn scene_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
    }
}

/// One training or test sample: reference view first, then `M` sources.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub seed: u64,
    pub layout: Layout,
    pub views: Vec<PosedImage>,
    /// `[H, W]` reference depth; invalid pixels hold `d_max`.
    pub gt_depth: Tensor,
    pub valid: VisibilityMask,
    pub hyps: DepthHypotheses,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.gt_depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.gt_depth.shape()[1]
    }

    pub fn sources(&self) -> usize {
        self.views.len() - 1
    }

    pub fn is_train(&self) -> bool {
        self.seed % 2 == 0
    }

    /// Mean absolute intensity difference between the reference image and
    /// every source warped with the ground-truth depth, pooled over the
    /// channels of pixels both valid and visible.
    pub fn warp_error(&self) -> Result<f64> {
        let depth = Var::constant(self.gt_depth.clone());
        let reference = self.views[0].image.data();
        let (mut total, mut count) = (0.0, 0usize);
        for source in &self.views[1..] {
            let (warped, mask) = inverse_warp(source, &self.views[0].camera, &depth)?;
            let warped = warped.value();
            for (p, &ok) in mask.and(&self.valid).bits().iter().enumerate() {
                if ok {
                    for c in 0..3 {
                        total += (warped.data()[p * 3 + c] - reference[p * 3 + c]).abs();
                    }
                    count += 3;
                }
            }
        }
        if count == 0 {
            return invalid(format!("scene {}: no pixel is visible in any source", self.seed));
        }
        Ok(total / count as f64)
    }
}

/// Plane `normal . p = offset`, restricted to `lo[a] <= p[a] <= hi[a]`.
#[derive(Clone, Debug)]
pub struct BoundedPlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub lo: Vector3<f64>,
    pub hi: Vector3<f64>,
}

impl BoundedPlane {
    fn new(normal: Vector3<f64>, offset: f64) -> Self {
        let big = Vector3::repeat(f64::INFINITY);
        Self { normal, offset, lo: -big, hi: big }
    }

    fn bounded(mut self, axis: usize, lo: f64, hi: f64) -> Self {
        self.lo[axis] = lo;
        self.hi[axis] = hi;
        self
    }

    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.offset - self.normal.dot(origin)) / denom;
        if !(t > 1e-9) {
            return None;
        }
        let p = origin + dir * t;
        let slack = 1e-9;
        (0..3).all(|a| p[a] >= self.lo[a] - slack && p[a] <= self.hi[a] + slack).then_some(t)
    }
}

/// Scene geometry plus its texture.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub surfaces: Vec<BoundedPlane>,
    /// Axis-aligned solids that a camera must not sit inside.
    pub solids: Vec<(Vector3<f64>, Vector3<f64>)>,
    pub texture: Texture,
}

impl Geometry {
    fn constant_z(z: f64, extent: f64) -> BoundedPlane {
        BoundedPlane::new(Vector3::z(), z).bounded(0, -extent, extent).bounded(1, -extent, extent)
    }

    pub fn fronto_parallel(z: f64, texture: Texture) -> Self {
        Self { surfaces: vec![Self::constant_z(z, 3.0)], solids: vec![], texture }
    }

    /// Plane through `(0, 0, z)` with unit normal `normal`.
    pub fn slanted(normal: Vector3<f64>, z: f64, texture: Texture) -> Self {
        let n = normal.normalize();
        Self { surfaces: vec![BoundedPlane::new(n, n.z * z)], solids: vec![], texture }
    }

    /// `z = near` for `x < split`, `z = far` beyond, joined by a wall at `x = split`.
    pub fn step(split: f64, near: f64, far: f64, texture: Texture) -> Self {
        let e = 3.0;
        let surfaces = vec![
            Self::constant_z(near, e).bounded(0, -e, split),
            Self::constant_z(far, e).bounded(0, split, e),
            BoundedPlane::new(Vector3::x(), split).bounded(1, -e, e).bounded(2, near, far),
        ];
        Self { surfaces, solids: vec![], texture }
    }

    /// Axis-aligned box `[lo, hi]` in front of a back wall at `z = wall`.
    pub fn textured_box(lo: Vector3<f64>, hi: Vector3<f64>, wall: f64, texture: Texture) -> Self {
        let mut surfaces = vec![Self::constant_z(wall, 3.0)];
        for axis in 0..3 {
            let mut n = Vector3::zeros();
            n[axis] = 1.0;
            for v in [lo[axis], hi[axis]] {
                let mut face = BoundedPlane::new(n, v);
                for other in (0..3).filter(|&o| o != axis) {
                    face = face.bounded(other, lo[other], hi[other]);
                }
                surfaces.push(face);
            }
        }
        Self { surfaces, solids: vec![(lo, hi)], texture }
    }

    /// Nearest hit along the ray, as `(t, point)`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        self.surfaces
            .iter()
            .filter_map(|s| s.intersect(origin, dir))
            .min_by(f64::total_cmp)
            .map(|t| (t, origin + dir * t))
    }
}

pub const BACKGROUND: f64 = 0.0;

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders an `[H, W, 3]` image and the `[H, W]` camera-frame depth; pixels
/// without a hit get [`BACKGROUND`] intensity and `None` depth.
pub fn render_view(
    geometry: &Geometry,
    camera: &Camera,
    height: usize,
    width: usize,
    brightness: f64,
) -> Result<(Tensor, Vec<Option<f64>>)> {
    let center = camera.pose.center();
    for (lo, hi) in &geometry.solids {
        if (0..3).all(|a| center[a] > lo[a] && center[a] < hi[a]) {
            return invalid("camera is inside the scene geometry");
        }
    }
    let k_inv = camera.intrinsics.inverse()?;
    let r_t = camera.pose.rotation().transpose();
    let mut image = vec![BACKGROUND; height * width * 3];
    let mut depth = vec![None; height * width];
    for row in 0..height {
        for col in 0..width {
            let ray_cam = k_inv * Vector3::new(col as f64, row as f64, 1.0);
            let dir = r_t * ray_cam;
            if let Some((t, p)) = geometry.cast(&center, &dir) {
                let i = row * width + col;
                depth[i] = Some(t * ray_cam.z);
                let rgb = geometry.texture.color(&p);
                for c in 0..3 {
                    image[i * 3 + c] = quantize(rgb[c] + brightness);
                }
            }
        }
    }
    Ok((Tensor::new(vec![height, width, 3], image)?, depth))
}

fn draw_geometry(layout: Layout, rng: &mut ChaCha8Rng, texture: Texture) -> Geometry {
    match layout {
        Layout::FrontoParallel => Geometry::fronto_parallel(rng.gen_range(2.6..3.4), texture),
        Layout::Slanted => {
            let tilt = rng.gen_range(0.1_f64..0.28);
            let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
            let normal = Vector3::new(tilt.sin() * azimuth.cos(), tilt.sin() * azimuth.sin(), -tilt.cos());
            Geometry::slanted(normal, rng.gen_range(2.8..3.2), texture)
        }
        Layout::TwoPlaneStep => {
            let near = rng.gen_range(2.5..2.9);
            let far = near + rng.gen_range(0.4..0.8);
            Geometry::step(rng.gen_range(-0.4..0.4), near, far, texture)
        }
        Layout::TexturedBox => {
            let front = rng.gen_range(2.6..2.9);
            let wall = front + rng.gen_range(0.45..0.7);
            let half = Vector3::new(rng.gen_range(0.4..0.7), rng.gen_range(0.3..0.5), 0.0);
            let shift = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.2..0.2), 0.0);
            let lo = Vector3::new(shift.x - half.x, shift.y - half.y, front);
            let hi = Vector3::new(shift.x + half.x, shift.y + half.y, wall - 0.15);
            Geometry::textured_box(lo, hi, wall, texture)
        }
    }
}

fn draw_cameras(spec: &SceneSpec, rng: &mut ChaCha8Rng, target_depth: f64) -> Result<Vec<Camera>> {
    let k = spec.intrinsics()?;
    let mut cams = vec![Camera::new(k, Pose::identity())];
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    for m in 0..spec.m_sources {
        let angle = phase + std::f64::consts::TAU * m as f64 / spec.m_sources as f64;
        let radius = spec.ring_radius * rng.gen_range(0.85..1.15);
        let eye = Vector3::new(radius * angle.cos(), radius * angle.sin(), rng.gen_range(-0.05..0.05));
        let j = spec.jitter;
        let target = Vector3::new(rng.gen_range(-j..=j), rng.gen_range(-j..=j), target_depth + rng.gen_range(-j..=j));
        cams.push(Camera::new(k, Pose::look_at(eye, target)?));
    }
    Ok(cams)
}

fn try_generate(spec: &SceneSpec, seed: u64, layout: Layout, attempt: u64) -> Result<Option<SceneSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let texture = Texture::new(rng.gen(), &spec.texture);
    let geometry = draw_geometry(layout, &mut rng, texture);
    let cams = draw_cameras(spec, &mut rng, 0.5 * (spec.d_min + spec.d_max))?;
    let (h, w) = (spec.height, spec.width);
    let hyps = spec.hypotheses()?;

    let mut views = Vec::with_capacity(cams.len());
    let mut ref_depth = Vec::new();
    for (i, cam) in cams.into_iter().enumerate() {
        let brightness = if i == 0 || spec.brightness_jitter == 0.0 {
            0.0
        } else {
            rng.gen_range(-spec.brightness_jitter..=spec.brightness_jitter)
        };
        let (image, depth) = render_view(&geometry, &cam, h, w, brightness)?;
        if i == 0 {
            ref_depth = depth;
        }
        views.push(PosedImage::new(image, cam)?);
    }
    if ref_depth.iter().any(|d| d.is_some_and(|d| d < spec.d_min || d > spec.d_max)) {
        return Ok(None);
    }
    let bits: Vec<bool> = ref_depth.iter().map(Option::is_some).collect();
    let valid = VisibilityMask::new(h, w, bits)?;
    if (valid.count() as f64) < MIN_VISIBILITY * (h * w) as f64 {
        return Ok(None);
    }
    let gt_depth = Tensor::new(vec![h, w], ref_depth.iter().map(|d| d.unwrap_or(spec.d_max)).collect())?;
    let depth_var = Var::constant(gt_depth.clone());
    for src in &views[1..] {
        let (_, mask) = inverse_warp(src, &views[0].camera, &depth_var)?;
        if (mask.and(&valid).count() as f64) < MIN_VISIBILITY * (h * w) as f64 {
            return Ok(None);
        }
    }
    Ok(Some(SceneSample { seed, layout, views, gt_depth, valid, hyps }))
}

/// Generates the scene with the given seed, redrawing until depth range and
/// visibility constraints hold.
pub fn generate_scene(spec: &SceneSpec, seed: u64, layout: Layout) -> Result<SceneSample> {
    spec.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        if let Some(s) = try_generate(spec, seed, layout, attempt)? {
            return Ok(s);
        }
    }
    Err(Error::Invalid(format!(
        "scene {seed}: no {} draw met the depth-range and visibility constraints in {MAX_ATTEMPTS} attempts",
        layout.name()
    )))
}

pub fn generate_dataset(spec: &SceneSpec, count: usize) -> Result<Vec<SceneSample>> {
    if count == 0 {
        return invalid("dataset count must be at least 1");
    }
    (0..count)
        .map(|i| {
            let layout = spec.layout.unwrap_or(Layout::ALL[i % Layout::ALL.len()]);
            generate_scene(spec, spec.scene_seed(i), layout)
        })
        .collect()
}

/// Splits by scene-seed parity: even seeds train, odd seeds test.
pub fn split(samples: Vec<SceneSample>) -> (Vec<SceneSample>, Vec<SceneSample>) {
    samples.into_iter().partition(SceneSample::is_train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tex() -> Texture {
        Texture::new(7, &TextureSpec::default())
    }

    fn cam(pose: Pose) -> Camera {
        Camera::new(Intrinsics::new(40.0, 40.0, 23.5, 15.5).unwrap(), pose)
    }

    #[test]
    fn fronto_parallel_depth_is_constant() {
        let g = Geometry::fronto_parallel(3.1, tex());
        let (_, depth) = render_view(&g, &cam(Pose::identity()), 32, 48, 0.0).unwrap();
        assert!(depth.iter().all(|d| (d.unwrap() - 3.1).abs() < 1e-12));
    }

    #[test]
    fn slanted_depth_matches_ray_plane_solution() {
        let n = Vector3::new(0.2, -0.1, -1.0).normalize();
        let g = Geometry::slanted(n, 3.0, tex());
        let c = cam(Pose::identity());
        let (_, depth) = render_view(&g, &c, 32, 48, 0.0).unwrap();
        for (row, col) in [(0, 0), (5, 40), (31, 47), (16, 24)] {
            let ray = c.intrinsics.inverse().unwrap() * Vector3::new(col as f64, row as f64, 1.0);
            let t = n.z * 3.0 / n.dot(&ray);
            assert!((depth[row * 48 + col].unwrap() - t).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_poses_render_identically() {
        let g = Geometry::step(0.1, 2.6, 3.2, tex());
        let pose = Pose::look_at(Vector3::new(0.4, 0.1, 0.0), Vector3::new(0.0, 0.0, 3.0)).unwrap();
        let a = render_view(&g, &cam(pose.clone()), 16, 20, 0.0).unwrap();
        let b = render_view(&g, &cam(pose), 16, 20, 0.0).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn camera_inside_box_is_rejected() {
        let g = Geometry::textured_box(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0), 3.5, tex());
        assert!(render_view(&g, &cam(Pose::identity()), 8, 8, 0.0).is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_in_range() {
        let spec = SceneSpec { seed: 3, ..Default::default() };
        let a = generate_dataset(&spec, 4).unwrap();
        let b = generate_dataset(&spec, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.seed, y.seed);
            assert_eq!(x.gt_depth, y.gt_depth);
            for (u, v) in x.views.iter().zip(&y.views) {
                assert_eq!(u.image, v.image);
            }
            assert_eq!(x.views.len(), spec.m_sources + 1);
            for (d, ok) in x.gt_depth.data().iter().zip(x.valid.bits()) {
                assert!(!ok || (spec.d_min..=spec.d_max).contains(d));
            }
        }
        let (train, test) = split(a);
        assert!(train.iter().all(|t| test.iter().all(|s| s.seed != t.seed)));
        assert_eq!(train.len() + test.len(), 4);
    }
}
