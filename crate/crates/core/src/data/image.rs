//! Binary P6 PPM decoding/encoding and the TNSR raw-tensor sidecar.
//!
//! TNSR layout, little-endian: magic "TNSR", u32 rank, rank * u32 dims,
//! then numel * 8 bytes of f64 values. It exists so tests and tools can
//! move exact tensors around without going through image quantization.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"TNSR";

fn decode_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Loads a P6 PPM or TNSR file as an H-by-W-by-3 tensor of reals in
/// [0, 1] (PPM) or stored values (TNSR).
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Data(format!("image file not found: {}", path.display())),
        _ => Error::io(path, e),
    })?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes, path)
    } else if bytes.starts_with(&TENSOR_MAGIC) {
        let t = decode_tensor(&bytes, path)?;
        if t.shape().len() != 3 || t.shape()[2] != 3 {
            return Err(decode_err(
                path,
                format!("image tensor must be H x W x 3, got {:?}", t.shape()),
            ));
        }
        Ok(t)
    } else {
        let head: Vec<u8> = bytes.iter().take(4).copied().collect();
        Err(decode_err(path, format!("unknown magic bytes {head:?}")))
    }
}

/// Decodes binary P6 with maxval 255. Header tokens may be separated by
/// any whitespace and `#` comments.
fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut pos = 2; // past "P6"
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(decode_err(path, "malformed P6 header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| decode_err(path, "P6 header field overflow"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(decode_err(path, format!("zero image dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(decode_err(path, format!("unsupported maxval {maxval}, need 255")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(decode_err(path, "missing whitespace after P6 header"));
    }
    pos += 1;
    let expected = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(decode_err(
            path,
            format!("truncated pixel data: have {}, need {expected}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(decode_err(
            path,
            format!("{} trailing bytes after pixel data", payload.len() - expected),
        ));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::from_vec(vec![height, width, 3], data)
}

/// Writes an H-by-W-by-3 tensor with values in [0, 1] as binary P6,
/// rounding to 8-bit.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::ShapeMismatch {
            op: "write_ppm",
            left: shape.to_vec(),
            right: vec![0, 0, 3],
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(decode_err(path, "TNSR file shorter than its header"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut pos = 8;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        if pos + 4 > bytes.len() {
            return Err(decode_err(path, "TNSR dims truncated"));
        }
        dims.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize);
        pos += 4;
    }
    let numel: usize = dims.iter().product();
    if bytes.len() != pos + numel * 8 {
        return Err(decode_err(
            path,
            format!("TNSR payload is {} bytes, expected {}", bytes.len() - pos, numel * 8),
        ));
    }
    let data: Vec<f64> = bytes[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(decode_err(path, "TNSR payload contains non-finite values"));
    }
    Tensor::from_vec(dims, data)
}

/// Reads any-rank TNSR data.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Data(format!("tensor file not found: {}", path.display())),
        _ => Error::io(path, e),
    })?;
    if !bytes.starts_with(&TENSOR_MAGIC) {
        return Err(decode_err(path, "not a TNSR file"));
    }
    decode_tensor(&bytes, path)
}

/// Writes any-rank TNSR data.
pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 4 * tensor.shape().len() + 8 * tensor.numel());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn known_p6_bytes_decode_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.ppm");
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[
            0, 0, 0, 255, 255, 255, //
            10, 20, 30, 100, 150, 200,
        ]);
        fs::write(&path, &bytes).unwrap();
        let t = load_image(&path).unwrap();
        assert_eq!(t.shape(), &[2, 2, 3]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[3], 1.0);
        assert!((t.data()[6] - 10.0 / 255.0).abs() < 1e-15);
        assert!((t.data()[11] - 200.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# comment line\n1 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        fs::write(&path, &bytes).unwrap();
        assert_eq!(load_image(&path).unwrap().shape(), &[1, 1, 3]);
    }

    #[test]
    fn truncated_ppm_is_a_decode_error_not_a_partial_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0; 5]);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_image(&path), Err(Error::Decode { .. })));
    }

    #[test]
    fn unknown_magic_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, b"JUNKDATA").unwrap();
        assert!(matches!(load_image(&path), Err(Error::Decode { .. })));
        let missing = dir.path().join("nope.ppm");
        let err = load_image(&missing).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("nope.ppm"));
    }

    #[test]
    fn zero_dimension_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.ppm");
        fs::write(&path, b"P6\n0 2\n255\n").unwrap();
        assert!(matches!(load_image(&path), Err(Error::Decode { .. })));
    }

    #[test]
    fn ppm_write_read_round_trip_at_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.ppm");
        let data: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let img = Tensor::from_vec(vec![2, 2, 3], data).unwrap();
        write_ppm(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn tensor_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let t = Tensor::randn(vec![3, 4, 3], 1.0, &mut Rng::new(1));
        write_tensor(&path, &t).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let t = Tensor::randn(vec![4, 4], 1.0, &mut Rng::new(2));
        write_tensor(&path, &t).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Decode { .. })));
    }
}
