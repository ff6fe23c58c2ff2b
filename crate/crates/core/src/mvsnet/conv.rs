use std::rc::Rc;

use autodiff::PAD;

use crate::maps::cached;

/// Gather map turning a row-major `[dims..., channels]` array into a
/// `[prod(dims), k^ndim * channels]` patch matrix.
///
/// Axes flagged in `edge` replicate their border values; the others are zero
/// padded. Column order is tap-major (row-major over the kernel window),
/// channel-minor.
pub(crate) fn im2col_map(dims: &[usize], channels: usize, k: usize, edge: &[bool]) -> Rc<[u32]> {
    debug_assert_eq!(dims.len(), edge.len());
    let mut key = dims.to_vec();
    key.extend([channels, k]);
    key.extend(edge.iter().map(|&e| e as usize));
    cached("im2col", &key, || build(dims, channels, k, edge))
}

fn build(dims: &[usize], channels: usize, k: usize, edge: &[bool]) -> Vec<u32> {
    let nd = dims.len();
    let half = (k / 2) as isize;
    let points: usize = dims.iter().product();
    let taps = k.pow(nd as u32);
    let mut map = Vec::with_capacity(points * taps * channels);
    let mut pos = vec![0usize; nd];
    let mut off = vec![0usize; nd];
    for p in 0..points {
        unravel(p, dims, &mut pos);
        for t in 0..taps {
            unravel(t, &vec![k; nd], &mut off);
            let mut flat = 0usize;
            let mut inside = true;
            for a in 0..nd {
                let mut q = pos[a] as isize + off[a] as isize - half;
                if edge[a] {
                    q = q.clamp(0, dims[a] as isize - 1);
                }
                if q < 0 || q >= dims[a] as isize {
                    inside = false;
                    break;
                }
                flat = flat * dims[a] + q as usize;
            }
            for c in 0..channels {
                map.push(if inside { (flat * channels + c) as u32 } else { PAD });
            }
        }
    }
    map
}

fn unravel(mut i: usize, dims: &[usize], out: &mut [usize]) {
    for a in (0..dims.len()).rev() {
        out[a] = i % dims[a];
        i /= dims[a];
    }
}
