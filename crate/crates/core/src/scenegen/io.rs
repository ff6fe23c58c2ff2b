//! Scene directories: `images/NNN.ppm`, `cams/NNN.txt`, `depth/ref.pfm`, `meta.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use autodiff::Tensor;

use super::{Layout, SceneSample};
use crate::error::{io_err, Error, Result};
use crate::geometry::{Camera, DepthHypotheses, Intrinsics, Pose, PosedImage, VisibilityMask};

fn format_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Header tokens of a netpbm-style file with their 1-based line numbers,
/// plus the offset of the byte following the last token's single whitespace.
fn header_tokens(bytes: &[u8], count: usize, path: &Path) -> Result<(Vec<(String, usize)>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let (mut i, mut line) = (0, 1);
    while tokens.len() < count {
        match bytes.get(i) {
            None => return Err(format_err(path, line, "truncated header")),
            Some(b'#') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => {
                if *b == b'\n' {
                    line += 1;
                }
                i += 1;
            }
            Some(_) => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                tokens.push((String::from_utf8_lossy(&bytes[start..i]).into_owned(), line));
            }
        }
    }
    match bytes.get(i) {
        Some(b) if b.is_ascii_whitespace() => Ok((tokens, i + 1)),
        _ => Err(format_err(path, line, "header must end with one whitespace byte")),
    }
}

fn parse_dim(tok: &(String, usize), path: &Path, what: &str) -> Result<usize> {
    match tok.0.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format_err(path, tok.1, format!("bad {what} {:?}", tok.0))),
    }
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Invalid(format!("ppm needs an [H, W, 3] image, got {s:?}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (tok, start) = header_tokens(bytes, 4, path)?;
    if tok[0].0 != "P6" {
        return Err(format_err(path, tok[0].1, format!("expected P6 magic, found {:?}", tok[0].0)));
    }
    let w = parse_dim(&tok[1], path, "width")?;
    let h = parse_dim(&tok[2], path, "height")?;
    if tok[3].0 != "255" {
        return Err(format_err(path, tok[3].1, format!("only maxval 255 is supported, found {:?}", tok[3].0)));
    }
    let body = &bytes[start..];
    let need = h * w * 3;
    if body.len() != need {
        return Err(format_err(
            path,
            tok[3].1 + 1,
            format!("pixel data has {} bytes, expected {need}", body.len()),
        ));
    }
    Ok(Tensor::new(vec![h, w, 3], body.iter().map(|&b| b as f64 / 255.0).collect())?)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(io_err(path))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path).map_err(io_err(path))?, path)
}

/// Little-endian single-channel PFM, rows stored bottom to top.
pub fn encode_pfm(depth: &Tensor) -> Result<Vec<u8>> {
    let s = depth.shape();
    if s.len() != 2 {
        return Err(Error::Invalid(format!("pfm needs an [H, W] map, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for row in (0..h).rev() {
        for &v in &depth.data()[row * w..(row + 1) * w] {
            out.extend((v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (tok, start) = header_tokens(bytes, 4, path)?;
    if tok[0].0 != "Pf" {
        return Err(format_err(path, tok[0].1, format!("expected Pf magic, found {:?}", tok[0].0)));
    }
    let w = parse_dim(&tok[1], path, "width")?;
    let h = parse_dim(&tok[2], path, "height")?;
    let scale: f64 = tok[3].0.parse().map_err(|_| format_err(path, tok[3].1, "bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err(path, tok[3].1, "scale must be finite and nonzero"));
    }
    let little = scale < 0.0;
    let body = &bytes[start..];
    if body.len() != h * w * 4 {
        return Err(format_err(path, tok[3].1 + 1, format!("data has {} bytes, expected {}", body.len(), h * w * 4)));
    }
    let mut data = vec![0.0; h * w];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (h - 1 - k / w, k % w);
        data[row * w + col] = v as f64;
    }
    Ok(Tensor::new(vec![h, w], data)?)
}

pub fn write_pfm(path: &Path, depth: &Tensor) -> Result<()> {
    fs::write(path, encode_pfm(depth)?).map_err(io_err(path))
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    decode_pfm(&fs::read(path).map_err(io_err(path))?, path)
}

pub fn format_cam(camera: &Camera, hyps: &DepthHypotheses) -> String {
    let (r, t) = (camera.pose.rotation(), camera.pose.translation());
    let mut s = String::new();
    for i in 0..3 {
        s += &format!("{} {} {} {}\n", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
    }
    s += "0 0 0 1\n\n";
    let k = camera.intrinsics.matrix();
    for i in 0..3 {
        s += &format!("{} {} {}\n", k[(i, 0)], k[(i, 1)], k[(i, 2)]);
    }
    s += &format!("\n{} {} {}\n", hyps.d_min, hyps.interval(), hyps.count);
    s
}

/// Parses a cam file into the camera and `(d_min, d_interval, D)`.
pub fn parse_cam(text: &str, path: &Path) -> Result<(Camera, (f64, f64, usize))> {
    let lines: Vec<&str> = text.lines().collect();
    let row = |i: usize, n: usize| -> Result<Vec<f64>> {
        let line = lines.get(i).ok_or_else(|| format_err(path, i + 1, "unexpected end of file"))?;
        let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        match vals {
            Ok(v) if v.len() == n && v.iter().all(|x| x.is_finite()) => Ok(v),
            _ => Err(format_err(path, i + 1, format!("expected {n} finite numbers, found {line:?}"))),
        }
    };
    let blank = |i: usize| -> Result<()> {
        match lines.get(i) {
            Some(l) if l.trim().is_empty() => Ok(()),
            _ => Err(format_err(path, i + 1, "expected a blank line")),
        }
    };
    let mut r = Matrix3::zeros();
    let mut t = Vector3::zeros();
    for i in 0..3 {
        let v = row(i, 4)?;
        for j in 0..3 {
            r[(i, j)] = v[j];
        }
        t[i] = v[3];
    }
    if row(3, 4)? != [0.0, 0.0, 0.0, 1.0] {
        return Err(format_err(path, 4, "last extrinsic row must be 0 0 0 1"));
    }
    blank(4)?;
    let mut k = Matrix3::zeros();
    for i in 0..3 {
        let v = row(5 + i, 3)?;
        for j in 0..3 {
            k[(i, j)] = v[j];
        }
    }
    blank(8)?;
    let d = row(9, 3)?;
    if d[2] < 1.0 || d[2].fract() != 0.0 {
        return Err(format_err(path, 10, format!("hypothesis count must be a positive integer, found {}", d[2])));
    }
    if lines[10..].iter().any(|l| !l.trim().is_empty()) {
        return Err(format_err(path, 11, "unexpected trailing content"));
    }
    let pose = Pose::new(r, t).map_err(|e| format_err(path, 1, e.to_string()))?;
    let intr = Intrinsics::from_matrix(k).map_err(|e| format_err(path, 6, e.to_string()))?;
    Ok((Camera::new(intr, pose), (d[0], d[1], d[2] as usize)))
}

fn format_meta(s: &SceneSample) -> String {
    format!(
        "seed={}\nlayout={}\nheight={}\nwidth={}\nsources={}\nd_min={}\nd_max={}\ndepth_count={}\n",
        s.seed,
        s.layout.name(),
        s.height(),
        s.width(),
        s.sources(),
        s.hyps.d_min,
        s.hyps.d_max,
        s.hyps.count
    )
}

fn parse_meta(text: &str, path: &Path) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format_err(path, i + 1, "expected key=value"))?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

fn meta_value<T: std::str::FromStr>(meta: &[(String, String, usize)], key: &str, path: &Path) -> Result<T> {
    let (_, v, line) = meta
        .iter()
        .find(|(k, _, _)| k == key)
        .ok_or_else(|| format_err(path, 0, format!("missing key {key}")))?;
    v.parse().map_err(|_| format_err(path, *line, format!("bad value {v:?} for {key}")))
}

fn write_all(dir: &Path, s: &SceneSample) -> Result<()> {
    for sub in ["images", "cams", "depth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    for (i, view) in s.views.iter().enumerate() {
        write_ppm(&dir.join(format!("images/{i:03}.ppm")), &view.image)?;
        let cam = dir.join(format!("cams/{i:03}.txt"));
        fs::write(&cam, format_cam(&view.camera, &s.hyps)).map_err(io_err(&cam))?;
    }
    let stored = Tensor::from_fn(s.gt_depth.shape(), |i| if s.valid.bits()[i] { s.gt_depth.data()[i] } else { 0.0 });
    write_pfm(&dir.join("depth/ref.pfm"), &stored)?;
    let meta = dir.join("meta.txt");
    fs::write(&meta, format_meta(s)).map_err(io_err(&meta))
}

/// Writes into a sibling temporary directory, then renames it into place.
///
/// An existing scene directory (one holding `meta.txt`) is replaced; any
/// other existing path is an error.
pub fn write_scene(dir: &Path, sample: &SceneSample) -> Result<()> {
    let name = dir.file_name().ok_or_else(|| Error::Invalid(format!("{}: not a directory name", dir.display())))?;
    let tmp: PathBuf = dir.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    if let Err(e) = write_all(&tmp, sample) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dir.exists() {
        if !dir.join("meta.txt").is_file() {
            let _ = fs::remove_dir_all(&tmp);
            return Err(Error::Invalid(format!("{}: exists and is not a scene directory", dir.display())));
        }
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io_err(dir))
}

pub fn read_scene(dir: &Path) -> Result<SceneSample> {
    if !dir.is_dir() {
        return Err(Error::Invalid(format!("{}: scene directory not found", dir.display())));
    }
    let meta_path = dir.join("meta.txt");
    let meta = parse_meta(&fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?, &meta_path)?;
    let seed: u64 = meta_value(&meta, "seed", &meta_path)?;
    let layout_name: String = meta_value(&meta, "layout", &meta_path)?;
    let layout = Layout::from_name(&layout_name)
        .ok_or_else(|| format_err(&meta_path, 0, format!("unknown layout {layout_name:?}")))?;
    let (h, w): (usize, usize) = (meta_value(&meta, "height", &meta_path)?, meta_value(&meta, "width", &meta_path)?);
    let sources: usize = meta_value(&meta, "sources", &meta_path)?;
    let hyps = DepthHypotheses::new(
        meta_value(&meta, "d_min", &meta_path)?,
        meta_value(&meta, "d_max", &meta_path)?,
        meta_value(&meta, "depth_count", &meta_path)?,
    )?;

    let mut views = Vec::with_capacity(sources + 1);
    for i in 0..=sources {
        let img_path = dir.join(format!("images/{i:03}.ppm"));
        let image = read_ppm(&img_path)?;
        if image.shape() != [h, w, 3] {
            return Err(format_err(&img_path, 2, format!("image is {:?}, meta says {h}x{w}", image.shape())));
        }
        let cam_path = dir.join(format!("cams/{i:03}.txt"));
        let text = fs::read_to_string(&cam_path).map_err(io_err(&cam_path))?;
        let (camera, (d_min, interval, count)) = parse_cam(&text, &cam_path)?;
        if d_min != hyps.d_min || count != hyps.count || (interval - hyps.interval()).abs() > 1e-12 * hyps.d_max {
            return Err(format_err(&cam_path, 10, "depth range disagrees with meta.txt"));
        }
        views.push(PosedImage::new(image, camera)?);
    }
    let depth_path = dir.join("depth/ref.pfm");
    let stored = read_pfm(&depth_path)?;
    if stored.shape() != [h, w] {
        return Err(format_err(&depth_path, 2, format!("depth is {:?}, meta says {h}x{w}", stored.shape())));
    }
    let bits: Vec<bool> = stored.data().iter().map(|&d| d > 0.0).collect();
    let gt_depth = Tensor::from_fn(&[h, w], |i| if bits[i] { stored.data()[i] } else { hyps.d_max });
    Ok(SceneSample { seed, layout, views, gt_depth, valid: VisibilityMask::new(h, w, bits)?, hyps })
}
