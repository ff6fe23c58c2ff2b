//! The miniature plane-sweep network.
//!
//! Pipeline: shared 2D conv feature extractor, homography-warped feature
//! volumes, variance cost, a per-voxel projection plus one 3D convolution,
//! softmax over depth of the negated score, and soft-argmax depth.

mod checkpoint;
mod conv;

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use autodiff::{bilinear_sample, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{homography_terms, DepthHypotheses, PosedImage, VisibilityMask};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub(crate) use conv::im2col_map;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self { in_channels, out_channels, kernel }
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Layer list fixing how the flat parameter vector is partitioned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub feature_layers: Vec<ConvSpec>,
    /// Edge length of the cubic kernel over `(H, W, D)` in the regularizer.
    pub cost_kernel: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self::with_width(8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BlockKind {
    ConvWeight(usize),
    ConvBias(usize),
    ProjWeight,
    ProjBias,
    CostWeight,
    CostBias,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    kind: BlockKind,
    offset: usize,
    rows: usize,
    cols: usize,
    fan_in: usize,
}

impl Arch {
    /// Two 3x3 conv layers `3 -> width -> width` and a 3x3x3 cost kernel.
    pub fn with_width(width: usize) -> Self {
        Self {
            feature_layers: vec![ConvSpec::new(3, width, 3), ConvSpec::new(width, width, 3)],
            cost_kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.feature_layers.first() else {
            return invalid("arch needs at least one feature layer");
        };
        if first.in_channels != 3 {
            return invalid("first feature layer must take 3 input channels");
        }
        for pair in self.feature_layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return invalid(format!("feature layers do not chain: {:?} -> {:?}", pair[0], pair[1]));
            }
        }
        for l in &self.feature_layers {
            if l.kernel % 2 == 0 || l.out_channels == 0 {
                return invalid(format!("conv layers need odd kernels and outputs: {l:?}"));
            }
        }
        if self.cost_kernel % 2 == 0 {
            return invalid("cost kernel must be odd");
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        self.feature_layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn feature_param_count(&self) -> usize {
        self.feature_layers.iter().map(|l| l.fan_in() * l.out_channels + l.out_channels).sum()
    }

    pub fn param_count(&self) -> usize {
        self.blocks().last().map_or(0, |b| b.offset + b.rows * b.cols)
    }

    fn blocks(&self) -> Vec<Block> {
        let mut out = Vec::new();
        let mut offset = 0;
        let mut push = |kind, rows: usize, cols: usize, fan_in| {
            out.push(Block { kind, offset, rows, cols, fan_in });
            offset += rows * cols;
        };
        for (i, l) in self.feature_layers.iter().enumerate() {
            push(BlockKind::ConvWeight(i), l.fan_in(), l.out_channels, l.fan_in());
            push(BlockKind::ConvBias(i), 1, l.out_channels, 0);
        }
        let f = self.feature_width();
        push(BlockKind::ProjWeight, f, 1, f);
        push(BlockKind::ProjBias, 1, 1, 0);
        let taps = self.cost_kernel.pow(3);
        push(BlockKind::CostWeight, taps, 1, taps);
        push(BlockKind::CostBias, 1, 1, 0);
        out
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let layers: Vec<String> = self
            .feature_layers
            .iter()
            .map(|l| format!("{}>{}:{}", l.in_channels, l.out_channels, l.kernel))
            .collect();
        write!(f, "features={};cost_kernel={}", layers.join(","), self.cost_kernel)
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("malformed arch descriptor {s:?}"));
        let (feat, cost) = s.split_once(';').ok_or_else(bad)?;
        let feat = feat.strip_prefix("features=").ok_or_else(bad)?;
        let cost = cost.strip_prefix("cost_kernel=").ok_or_else(bad)?;
        let mut layers = Vec::new();
        for item in feat.split(',') {
            let (io, k) = item.split_once(':').ok_or_else(bad)?;
            let (i, o) = io.split_once('>').ok_or_else(bad)?;
            let p = |v: &str| v.parse::<usize>().map_err(|_| bad());
            layers.push(ConvSpec::new(p(i)?, p(o)?, p(k)?));
        }
        let arch = Arch { feature_layers: layers, cost_kernel: cost.parse().map_err(|_| bad())? };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn new(arch: Arch, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.param_count() {
            return invalid(format!(
                "parameter vector has {} entries, arch {} needs {}",
                theta.len(),
                arch,
                arch.param_count()
            ));
        }
        Ok(Self { arch, theta })
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::vector(self.theta.clone())
    }

    /// Same arch with a new parameter vector.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.arch.clone(), theta)
    }
}

/// Uniform `[-s, s]` weights with `s = sqrt(1 / fan_in)` and zero biases.
pub fn init_params(arch: &Arch, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0.0; arch.param_count()];
    for b in arch.blocks() {
        if b.fan_in == 0 {
            continue;
        }
        let s = (1.0 / b.fan_in as f64).sqrt();
        for v in &mut theta[b.offset..b.offset + b.rows * b.cols] {
            *v = rng.gen_range(-s..=s);
        }
    }
    ModelParams::new(arch.clone(), theta)
}

/// The network bound to one parameter variable.
pub struct Network<'a> {
    arch: &'a Arch,
    conv_w: Vec<Var>,
    conv_b: Vec<Var>,
    proj_w: Var,
    proj_b: Var,
    cost_w: Var,
    cost_b: Var,
}

fn slice(theta: &Var, b: &Block) -> Result<Var> {
    let map: Rc<[u32]> = (b.offset..b.offset + b.rows * b.cols).map(|i| i as u32).collect();
    Ok(theta.gather(map, &[b.rows, b.cols])?)
}

fn add_bias(x: &Var, bias: &Var) -> Result<Var> {
    let rows = x.shape()[0];
    let cols = bias.shape()[1];
    Ok(x.add(&bias.reshape(&[cols])?.broadcast_axis(0, rows)?)?)
}

impl<'a> Network<'a> {
    pub fn new(arch: &'a Arch, theta: &Var) -> Result<Self> {
        arch.validate()?;
        if theta.shape() != [arch.param_count()] {
            return invalid(format!("theta shape {:?} does not match arch {arch}", theta.shape()));
        }
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let (mut proj_w, mut proj_b, mut cost_w, mut cost_b) = (None, None, None, None);
        for b in arch.blocks() {
            let v = slice(theta, &b)?;
            match b.kind {
                BlockKind::ConvWeight(_) => conv_w.push(v),
                BlockKind::ConvBias(_) => conv_b.push(v),
                BlockKind::ProjWeight => proj_w = Some(v),
                BlockKind::ProjBias => proj_b = Some(v),
                BlockKind::CostWeight => cost_w = Some(v),
                BlockKind::CostBias => cost_b = Some(v),
            }
        }
        let take = |v: Option<Var>| v.expect("every block kind is present");
        Ok(Self {
            arch,
            conv_w,
            conv_b,
            proj_w: take(proj_w),
            proj_b: take(proj_b),
            cost_w: take(cost_w),
            cost_b: take(cost_b),
        })
    }

    pub fn arch(&self) -> &Arch {
        self.arch
    }

    /// `[H, W, 3]` image to `[H, W, F]` features: same-padding convolutions with ELU between layers.
    pub fn extract_features(&self, image: &Tensor) -> Result<Var> {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let mut x = Var::constant(image.clone());
        let last = self.arch.feature_layers.len() - 1;
        for (i, layer) in self.arch.feature_layers.iter().enumerate() {
            let map = im2col_map(&[h, w], layer.in_channels, layer.kernel, &[false, false]);
            let cols = x.reshape(&[h * w * layer.in_channels])?.gather(map, &[h * w, layer.fan_in()])?;
            let mut y = add_bias(&cols.matmul(&self.conv_w[i])?, &self.conv_b[i])?;
            if i < last {
                y = y.elu()?;
            }
            x = y.reshape(&[h, w, layer.out_channels])?;
        }
        Ok(x)
    }

    /// Feature volumes for `views` (reference first). See [`warp_feature_volumes`].
    pub fn build_feature_volumes(&self, views: &[PosedImage], hyps: &DepthHypotheses) -> Result<Vec<Var>> {
        if views.len() < 2 {
            return invalid(format!("plane sweep needs at least 2 views, got {}", views.len()));
        }
        let features = views.iter().map(|v| self.extract_features(&v.image)).collect::<Result<Vec<_>>>()?;
        warp_feature_volumes(views, &features, hyps)
    }

    /// `[H, W, D, F]` cost to a `[H, W, D]` probability volume.
    pub fn regularize(&self, cost: &Var) -> Result<Var> {
        let s = cost.shape().to_vec();
        if s.len() != 4 || s[3] != self.arch.feature_width() {
            return invalid(format!("cost volume shape {s:?} does not match arch {}", self.arch));
        }
        let (h, w, d, f) = (s[0], s[1], s[2], s[3]);
        let n = h * w * d;
        let score = add_bias(&cost.reshape(&[n, f])?.matmul(&self.proj_w)?, &self.proj_b)?;
        let k = self.arch.cost_kernel;
        // Replicating along depth keeps a per-pixel constant score constant
        // over hypotheses, so it cannot bias the softmax toward the ends.
        let map = im2col_map(&[h, w, d], 1, k, &[false, false, true]);
        let cols = score.reshape(&[n])?.gather(map, &[n, k * k * k])?;
        let refined = add_bias(&cols.matmul(&self.cost_w)?, &self.cost_b)?;
        Ok(refined.reshape(&[h, w, d])?.neg()?.softmax(2)?)
    }

    /// Depth map for the reference view `views[0]` using every view given.
    pub fn forward(&self, views: &[PosedImage], hyps: &DepthHypotheses) -> Result<Var> {
        let volumes = self.build_feature_volumes(views, hyps)?;
        let cost = variance_cost(&volumes)?;
        let prob = self.regularize(&cost)?;
        expected_depth(&prob, hyps)
    }
}

/// Reference volume replicates the reference features across depth; source
/// volumes sample each source feature map at the plane-induced correspondences.
pub fn warp_feature_volumes(views: &[PosedImage], features: &[Var], hyps: &DepthHypotheses) -> Result<Vec<Var>> {
    if views.len() < 2 || views.len() != features.len() {
        return invalid("warp_feature_volumes needs matching views and features, at least 2");
    }
    let fs = features[0].shape().to_vec();
    let (h, w, f) = (fs[0], fs[1], fs[2]);
    let depths = hyps.values();
    let d = depths.len();
    let reference = &views[0].camera;
    let mut out = vec![features[0].broadcast_axis(2, d)?];
    for (view, feat) in views.iter().zip(features).skip(1) {
        let terms = homography_terms(reference, &view.camera)?;
        let mats: Vec<_> = depths.iter().map(|&dk| terms.at(dk)).collect();
        let mut xs = Vec::with_capacity(h * w * d);
        let mut ys = Vec::with_capacity(h * w * d);
        for row in 0..h {
            for col in 0..w {
                for m in &mats {
                    match crate::geometry::apply_homography(m, (col as f64, row as f64)) {
                        Some((x, y)) => {
                            xs.push(x);
                            ys.push(y);
                        }
                        None => {
                            xs.push(-1e6);
                            ys.push(-1e6);
                        }
                    }
                }
            }
        }
        let sampled = bilinear_sample(feat, &Var::constant(Tensor::vector(xs)), &Var::constant(Tensor::vector(ys)))?;
        out.push(sampled.values.reshape(&[h, w, d, f])?);
    }
    Ok(out)
}

/// Elementwise variance across volumes: `(1/N) Σ (V_i - mean)²`.
pub fn variance_cost(volumes: &[Var]) -> Result<Var> {
    if volumes.len() < 2 {
        return invalid("variance cost needs at least 2 volumes");
    }
    let n = volumes.len() as f64;
    let mut total = volumes[0].clone();
    for v in &volumes[1..] {
        total = total.add(v)?;
    }
    let mean = total.scale(1.0 / n)?;
    let mut acc = volumes[0].sub(&mean)?.square()?;
    for v in &volumes[1..] {
        acc = acc.add(&v.sub(&mean)?.square()?)?;
    }
    Ok(acc.scale(1.0 / n)?)
}

/// `Σ_d d · Pr(d)` over the hypothesis planes; `prob` is `[H, W, D]`.
pub fn expected_depth(prob: &Var, hyps: &DepthHypotheses) -> Result<Var> {
    let s = prob.shape();
    if s.len() != 3 || s[2] != hyps.count {
        return invalid(format!("probability volume {s:?} does not match {} hypotheses", hyps.count));
    }
    let depths = hyps.values();
    let d = depths.len();
    let planes = Tensor::from_fn(s, |i| depths[i % d]);
    Ok(prob.mul(&Var::constant(planes))?.sum_axis(2)?)
}

/// Mean absolute depth error over valid pixels.
pub fn primary_loss(pred: &Var, gt: &Tensor, valid: &VisibilityMask) -> Result<Var> {
    if pred.shape() != gt.shape() || pred.shape() != [valid.height(), valid.width()] {
        return invalid(format!(
            "primary loss shapes differ: pred {:?}, gt {:?}, mask {}x{}",
            pred.shape(),
            gt.shape(),
            valid.height(),
            valid.width()
        ));
    }
    let count = valid.count();
    if count == 0 {
        return invalid("primary loss: empty validity mask");
    }
    let diff = pred.sub(&Var::constant(gt.clone()))?.abs()?;
    Ok(diff.mul(&Var::constant(valid.to_tensor()))?.sum()?.scale(1.0 / count as f64)?)
}

/// Plain-value forward pass.
pub fn predict_depth(params: &ModelParams, views: &[PosedImage], hyps: &DepthHypotheses) -> Result<Tensor> {
    let theta = Var::constant(params.tensor());
    let net = Network::new(&params.arch, &theta)?;
    Ok(net.forward(views, hyps)?.value().clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        let arch = Arch::with_width(8);
        assert_eq!(arch.feature_param_count(), 8 * 3 * 9 + 8 + 8 * 8 * 9 + 8);
        assert_eq!(arch.feature_param_count(), 808);
        assert_eq!(arch.param_count(), 808 + 8 + 1 + 27 + 1);
    }

    #[test]
    fn descriptor_round_trip() {
        let arch = Arch::with_width(4);
        let text = arch.to_string();
        assert_eq!(text, "features=3>4:3,4>4:3;cost_kernel=3");
        assert_eq!(text.parse::<Arch>().unwrap(), arch);
        assert!("features=3>4;cost_kernel=3".parse::<Arch>().is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let arch = Arch::default();
        let a = init_params(&arch, 5).unwrap();
        let b = init_params(&arch, 5).unwrap();
        let c = init_params(&arch, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.theta, c.theta);
        for blk in arch.blocks() {
            let vals = &a.theta[blk.offset..blk.offset + blk.rows * blk.cols];
            if blk.fan_in == 0 {
                assert!(vals.iter().all(|&v| v == 0.0));
            } else {
                let s = (1.0 / blk.fan_in as f64).sqrt();
                assert!(vals.iter().all(|v| v.abs() <= s));
            }
        }
    }

    #[test]
    fn variance_examples() {
        let c = |v: f64| Var::constant(Tensor::full(&[2, 2, 1, 3], v));
        let same = variance_cost(&[c(0.7), c(0.7), c(0.7)]).unwrap();
        assert!(same.value().data().iter().all(|&v| v.abs() < 1e-30));
        let two = variance_cost(&[c(1.0), c(4.0)]).unwrap();
        assert!(two.value().data().iter().all(|&v| (v - 9.0 / 4.0).abs() < 1e-15));
        let three = variance_cost(&[c(0.0), c(1.0), c(2.0)]).unwrap();
        assert!(three.value().data().iter().all(|&v| (v - 2.0 / 3.0).abs() < 1e-15));
        assert!(variance_cost(&[c(1.0)]).is_err());
    }

    #[test]
    fn expected_depth_examples() {
        let hyps = DepthHypotheses::new(2.0, 4.0, 2).unwrap();
        let prob = Var::constant(Tensor::new(vec![1, 1, 2], vec![0.25, 0.75]).unwrap());
        assert_eq!(expected_depth(&prob, &hyps).unwrap().item(), 3.5);

        let hyps = DepthHypotheses::new(1.0, 3.0, 5).unwrap();
        let uniform = Var::constant(Tensor::full(&[2, 3, 5], 0.2));
        for &v in expected_depth(&uniform, &hyps).unwrap().value().data() {
            assert!((v - 2.0).abs() < 1e-12);
        }
        let one_hot = Var::constant(Tensor::from_fn(&[1, 1, 5], |i| if i == 3 { 1.0 } else { 0.0 }));
        assert_eq!(expected_depth(&one_hot, &hyps).unwrap().item(), hyps.values()[3]);
    }

    #[test]
    fn primary_loss_examples() {
        let gt = Tensor::from_fn(&[2, 4], |i| 2.0 + i as f64 * 0.1);
        let full = VisibilityMask::full(2, 4);
        let exact = primary_loss(&Var::constant(gt.clone()), &gt, &full).unwrap();
        assert_eq!(exact.item(), 0.0);
        let shifted = primary_loss(&Var::constant(gt.map(|v| v + 0.5)), &gt, &full).unwrap();
        assert!((shifted.item() - 0.5).abs() < 1e-12);
        let half = Tensor::from_fn(&[2, 4], |i| gt.data()[i] + if i % 2 == 0 { 1.0 } else { 0.0 });
        assert!((primary_loss(&Var::constant(half), &gt, &full).unwrap().item() - 0.5).abs() < 1e-12);
        let empty = VisibilityMask::new(2, 4, vec![false; 8]).unwrap();
        assert!(primary_loss(&Var::constant(gt.clone()), &gt, &empty).is_err());
    }
}
