//! Binary netpbm readers/writers: PPM (P6) for images, PGM (P5) for label
//! maps. Maxval is fixed at 255; label value 255 is the ignore marker.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::{DataError, Result};
use crate::tensor::Tensor;

/// Write a `[3, H, W]` image with values in [0, 1] as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(DataError::Format(format!(
            "expected [3, H, W] image, got {:?}",
            shape
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", w, h)?;
    let data = image.data();
    let mut row = Vec::with_capacity(3 * w);
    for p in 0..plane {
        for c in 0..3 {
            let v = (data[c * plane + p] * 255.0).round().clamp(0.0, 255.0) as u8;
            row.push(v);
        }
        if row.len() == 3 * w {
            out.write_all(&row)?;
            row.clear();
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a binary PPM into a `[3, H, W]` tensor with values in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let (w, h, payload) = parse_header(&bytes, b"P6", path)?;
    if payload.len() != 3 * w * h {
        return Err(DataError::Format(format!(
            "{}: payload holds {} bytes for {}x{} rgb",
            path.display(),
            payload.len(),
            w,
            h
        )));
    }
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = payload[3 * p + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data).expect("ppm shape"))
}

/// Write raw 8-bit labels as binary PGM.
pub fn write_pgm(path: &Path, height: usize, width: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != height * width {
        return Err(DataError::Format(format!(
            "label buffer holds {} entries for {}x{}",
            labels.len(),
            height,
            width
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{} {}\n255\n", width, height)?;
    out.write_all(labels)?;
    out.flush()?;
    Ok(())
}

/// Read a binary PGM as raw 8-bit labels.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let (w, h, payload) = parse_header(&bytes, b"P5", path)?;
    if payload.len() != w * h {
        return Err(DataError::Format(format!(
            "{}: payload holds {} bytes for {}x{}",
            path.display(),
            payload.len(),
            w,
            h
        )));
    }
    Ok((h, w, payload.to_vec()))
}

/// Parse `<magic> <w> <h> <maxval>` with whitespace and `#` comments, and
/// return the binary payload after the single whitespace byte that closes
/// the header.
fn parse_header<'a>(bytes: &'a [u8], magic: &[u8], path: &Path) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(DataError::Format(format!(
            "{}: missing {} magic",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut at = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comment lines.
        loop {
            while at < bytes.len() && bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            if at < bytes.len() && bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
            } else {
                break;
            }
        }
        let start = at;
        while at < bytes.len() && bytes[at].is_ascii_digit() {
            at += 1;
        }
        if start == at {
            return Err(DataError::Format(format!(
                "{}: malformed netpbm header",
                path.display()
            )));
        }
        *field = std::str::from_utf8(&bytes[start..at])
            .expect("ascii digits")
            .parse()
            .map_err(|_| DataError::Format(format!("{}: header overflow", path.display())))?;
    }
    if fields[2] != 255 {
        return Err(DataError::Format(format!(
            "{}: only maxval 255 is supported, got {}",
            path.display(),
            fields[2]
        )));
    }
    if at >= bytes.len() || !bytes[at].is_ascii_whitespace() {
        return Err(DataError::Format(format!(
            "{}: header not terminated",
            path.display()
        )));
    }
    Ok((fields[0], fields[1], &bytes[at + 1..]))
}
