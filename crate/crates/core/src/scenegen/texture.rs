use nalgebra::Vector3;

use super::TextureSpec;

/// Seeded 3D value noise, one independent field per color channel, with an
/// optional checker overlay.
#[derive(Clone, Debug)]
pub struct Texture {
    seed: u64,
    base_frequency: f64,
    octaves: usize,
    checker: Option<f64>,
    checker_weight: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(x as u64 ^ splitmix(y as u64 ^ splitmix(z as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, p: &Vector3<f64>) -> f64 {
    let base = p.map(f64::floor);
    let f = p - base;
    let (bx, by, bz) = (base.x as i64, base.y as i64, base.z as i64);
    let (sx, sy, sz) = (smooth(f.x), smooth(f.y), smooth(f.z));
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { sx } else { 1.0 - sx })
                    * (if dy == 1 { sy } else { 1.0 - sy })
                    * (if dz == 1 { sz } else { 1.0 - sz });
                acc += w * lattice(seed, bx + dx, by + dy, bz + dz);
            }
        }
    }
    acc
}

impl Texture {
    pub fn new(seed: u64, spec: &TextureSpec) -> Self {
        Self {
            seed,
            base_frequency: spec.base_frequency,
            octaves: spec.octaves.max(1),
            checker: spec.checker,
            checker_weight: spec.checker_weight,
        }
    }

    /// RGB reflectance at a world point, each channel in `[0, 1]`.
    pub fn color(&self, p: &Vector3<f64>) -> [f64; 3] {
        let overlay = self.checker.map_or(0.0, |cell| {
            let q = p / cell;
            let parity = (q.x.floor() + q.y.floor() + q.z.floor()).rem_euclid(2.0);
            self.checker_weight * (parity - 0.5)
        });
        std::array::from_fn(|c| {
            let seed = splitmix(self.seed.wrapping_add(c as u64));
            let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, self.base_frequency);
            for o in 0..self.octaves {
                sum += amp * value_noise(seed.wrapping_add(o as u64), &(p * freq));
                norm += amp;
                amp *= 0.5;
                freq *= 2.0;
            }
            (0.5 + 1.8 * (sum / norm - 0.5) + overlay).clamp(0.02, 0.98)
        })
    }
}
