//! Field serialization: raw little-endian binary with a JSON sidecar, and
//! 8-bit binary PGM images for visualizing 2-D slices.
//!
//! A field saved to `foo.bin` gets a sidecar `foo.bin.json` describing
//! `{name, dtype, shape}`; loading verifies the sidecar against the target
//! field before touching any data.

use super::{Context, RuntimeError};
use crate::ir::ScalarType;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("field `{field}`: file holds {found}, expected {expected}")]
    Mismatch { field: String, expected: String, found: String },
    #[error("malformed PGM: {0}")]
    BadPgm(String),
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Sidecar {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    s.into()
}

fn dtype_str(t: ScalarType) -> &'static str {
    match t {
        ScalarType::F32 => "f32",
        ScalarType::I32 => "i32",
    }
}

/// Writes a field's contents (f32 or i32 little-endian) plus its sidecar.
pub fn save_field(ctx: &Context, field: &str, path: &Path) -> Result<(), IoError> {
    let decl = ctx
        .program()
        .field(field)
        .ok_or_else(|| RuntimeError::UnknownField(field.to_string()))?
        .clone();
    let values = ctx.read_field(field)?;
    let mut bytes = Vec::with_capacity(values.len() * 4);
    match decl.elem {
        ScalarType::F32 => {
            for v in &values {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        ScalarType::I32 => {
            for v in &values {
                bytes.extend_from_slice(&(*v as i32).to_le_bytes());
            }
        }
    }
    std::fs::File::create(path)?.write_all(&bytes)?;
    let sc = Sidecar {
        name: decl.name.clone(),
        dtype: dtype_str(decl.elem).to_string(),
        shape: decl.shape.clone(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sc)?)?;
    Ok(())
}

/// Loads a field saved by [`save_field`], verifying dtype and shape.
pub fn load_field(ctx: &mut Context, field: &str, path: &Path) -> Result<(), IoError> {
    let decl = ctx
        .program()
        .field(field)
        .ok_or_else(|| RuntimeError::UnknownField(field.to_string()))?
        .clone();
    let sc: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let expected = Sidecar {
        name: decl.name.clone(),
        dtype: dtype_str(decl.elem).to_string(),
        shape: decl.shape.clone(),
    };
    if sc.dtype != expected.dtype || sc.shape != expected.shape {
        return Err(IoError::Mismatch {
            field: field.to_string(),
            expected: format!("{}{:?}", expected.dtype, expected.shape),
            found: format!("{}{:?}", sc.dtype, sc.shape),
        });
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let n = decl.len().max(1);
    if bytes.len() != n * 4 {
        return Err(IoError::Mismatch {
            field: field.to_string(),
            expected: format!("{} bytes", n * 4),
            found: format!("{} bytes", bytes.len()),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            match decl.elem {
                ScalarType::F32 => f32::from_le_bytes(b) as f64,
                ScalarType::I32 => i32::from_le_bytes(b) as f64,
            }
        })
        .collect();
    ctx.write_field(field, &values)?;
    Ok(())
}

/// Writes a `rows x cols` scalar image as binary PGM (P5), min-max
/// normalized to 0..=255. A constant image maps to mid-gray.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<(), IoError> {
    assert_eq!(data.len(), rows * cols, "image data size mismatch");
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut out = Vec::with_capacity(data.len() + 32);
    out.extend_from_slice(format!("P5\n{cols} {rows}\n255\n").as_bytes());
    for &v in data {
        let g = if span > 0.0 && span.is_finite() { ((v - lo) / span * 255.0).round() as u8 } else { 128 };
        out.push(g);
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Reads a binary PGM written by [`write_pgm`]; returns (rows, cols, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), IoError> {
    let bytes = std::fs::read(path)?;
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| IoError::BadPgm("missing header".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| IoError::BadPgm("non-utf8 header".into()))?;
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some("P5") {
        return Err(IoError::BadPgm("not a P5 file".into()));
    }
    let cols: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| IoError::BadPgm("bad width".into()))?;
    let rows: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| IoError::BadPgm("bad height".into()))?;
    let pixels = bytes[header_end + 1..].to_vec();
    if pixels.len() != rows * cols {
        return Err(IoError::BadPgm(format!(
            "expected {} pixels, found {}",
            rows * cols,
            pixels.len()
        )));
    }
    Ok((rows, cols, pixels))
}

#[cfg(test)]
mod tests {
    use super::super::tests::build;
    use super::*;
    use crate::runtime::{Context, Precision};

    fn ctx() -> Context {
        let p = build(
            "
field a: f32[2, 3];
field n: i32[4];
",
            &[],
        );
        let mut c = Context::new(p).unwrap();
        c.set_precision(Precision::F64);
        c
    }

    #[test]
    fn field_roundtrip_preserves_values() {
        let dir = std::env::temp_dir().join("adjk_io_test_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let mut c = ctx();
        let vals = [1.5, -2.0, 0.25, 3.0, -0.125, 7.0];
        c.write_field("a", &vals).unwrap();
        let path = dir.join("a.bin");
        save_field(&c, "a", &path).unwrap();
        c.fill("a", 0.0).unwrap();
        load_field(&mut c, "a", &path).unwrap();
        assert_eq!(c.read_field("a").unwrap(), vals);
        let ints = [3.0, -7.0, 0.0, 12.0];
        c.write_field("n", &ints).unwrap();
        let path = dir.join("n.bin");
        save_field(&c, "n", &path).unwrap();
        c.fill("n", 0.0).unwrap();
        load_field(&mut c, "n", &path).unwrap();
        assert_eq!(c.read_field("n").unwrap(), ints);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = std::env::temp_dir().join("adjk_io_test_mismatch");
        std::fs::create_dir_all(&dir).unwrap();
        let c = ctx();
        let path = dir.join("a.bin");
        save_field(&c, "a", &path).unwrap();
        let mut c2 = c;
        // loading field `n` (i32[4]) from an f32[2,3] file must fail
        let err = load_field(&mut c2, "n", &path).unwrap_err();
        assert!(matches!(err, IoError::Mismatch { .. }), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pgm_roundtrip_and_normalization() {
        let dir = std::env::temp_dir().join("adjk_io_test_pgm");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("frame_0000.pgm");
        let data = [0.0, 0.5, 1.0, 0.25, 0.75, 1.0];
        write_pgm(&path, 2, 3, &data).unwrap();
        let (rows, cols, px) = read_pgm(&path).unwrap();
        assert_eq!((rows, cols), (2, 3));
        assert_eq!(px[0], 0);
        assert_eq!(px[2], 255);
        assert_eq!(px[1], 128); // 0.5 of range, rounded
        std::fs::remove_dir_all(&dir).ok();
    }
}
