use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Arch, ModelParams};
use crate::error::{io_err, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MVSTTAP1";

/// Serializes as magic, endianness byte `L`, descriptor length (u32 LE),
/// descriptor text, parameter count (u64 LE), then the f64 LE values.
pub fn write_checkpoint(params: &ModelParams, out: &mut impl Write) -> std::io::Result<()> {
    let desc = params.arch.to_string();
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(b"L")?;
    out.write_all(&(desc.len() as u32).to_le_bytes())?;
    out.write_all(desc.as_bytes())?;
    out.write_all(&(params.theta.len() as u64).to_le_bytes())?;
    for v in &params.theta {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read, expected: Option<&Arch>) -> Result<ModelParams> {
    let fail = |msg: String| Error::Invalid(format!("checkpoint: {msg}"));
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| fail(e.to_string()))?;
    let mut cur = bytes.as_slice();
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(fail(format!("truncated while reading {what}")));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(fail("bad magic".into()));
    }
    if take(1, "endianness")? != b"L" {
        return Err(fail("unsupported endianness marker".into()));
    }
    let len = u32::from_le_bytes(take(4, "descriptor length")?.try_into().unwrap()) as usize;
    let desc = std::str::from_utf8(take(len, "descriptor")?).map_err(|_| fail("descriptor is not utf-8".into()))?;
    let arch: Arch = desc.parse()?;
    if let Some(want) = expected {
        if *want != arch {
            return Err(fail(format!("arch mismatch: file has {arch}, expected {want}")));
        }
    }
    let count = u64::from_le_bytes(take(8, "parameter count")?.try_into().unwrap()) as usize;
    if count != arch.param_count() {
        return Err(fail(format!("arch {arch} needs {} parameters, file declares {count}", arch.param_count())));
    }
    let raw = take(count * 8, "parameters")?;
    let theta: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if !cur.is_empty() {
        return Err(fail(format!("{} trailing bytes", cur.len())));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    ModelParams::new(arch, theta)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf).map_err(io_err(path))?;
    fs::write(path, buf).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path, expected: Option<&Arch>) -> Result<ModelParams> {
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    read_checkpoint(&mut f, expected).map_err(|e| match e {
        Error::Invalid(msg) => Error::Invalid(format!("{}: {msg}", path.display())),
        other => other,
    })
}
