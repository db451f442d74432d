//! Raster I/O: binary PPM (P6) for 8-bit RGB previews, binary PGM (P5) for
//! masks, and the float-exact TNSR container for round trips that must be
//! bitwise.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kvedit::PixelMask;
use crate::numerics::Tensor;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn format_err(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        detail: detail.into(),
    }
}

/// Quantize a [0,1] float to an 8-bit channel value.
fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a C x H x W float image as binary PPM (P6, 8-bit). Lossy.
pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape(
            "write_ppm",
            format!("want [3, H, W], got {:?}", image.shape()),
        ));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = Vec::with_capacity(15 + 3 * h * w);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(to_byte(image.data()[ch * h * w + y * w + x]));
            }
        }
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Parse one whitespace-delimited ASCII token, skipping `#` comments.
/// Returns the token and the offset just past it.
fn ascii_token(bytes: &[u8], mut pos: usize) -> Option<(String, usize)> {
    while pos < bytes.len() {
        match bytes[pos] {
            b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = pos;
    while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    if pos == start {
        return None;
    }
    Some((
        String::from_utf8_lossy(&bytes[start..pos]).into_owned(),
        pos,
    ))
}

struct RasterHeader {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &str, path: &Path) -> Result<RasterHeader> {
    let (got_magic, mut pos) =
        ascii_token(bytes, 0).ok_or_else(|| format_err(path, 0, "empty file"))?;
    if got_magic != magic {
        return Err(format_err(path, 0, format!("expected {magic}, got {got_magic}")));
    }
    let mut dims = [0usize; 3];
    for slot in dims.iter_mut() {
        let (tok, next) = ascii_token(bytes, pos)
            .ok_or_else(|| format_err(path, pos as u64, "truncated header"))?;
        *slot = tok
            .parse()
            .map_err(|_| format_err(path, pos as u64, format!("bad header token {tok}")))?;
        pos = next;
    }
    if dims[2] != 255 {
        return Err(format_err(path, pos as u64, "only 8-bit rasters supported"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() {
        return Err(format_err(path, pos as u64, "missing payload"));
    }
    pos += 1;
    Ok(RasterHeader {
        width: dims[0],
        height: dims[1],
        data_start: pos,
    })
}

/// Read a binary PPM (P6, 8-bit) into a [3, H, W] float image in [0,1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let header = parse_header(&bytes, "P6", path)?;
    let (w, h) = (header.width, header.height);
    let need = header.data_start + 3 * w * h;
    if bytes.len() < need {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("payload truncated: need {need} bytes"),
        ));
    }
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let b = bytes[header.data_start + 3 * (y * w + x) + ch];
                data[ch * h * w + y * w + x] = b as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Write a mask as binary PGM (P5): foreground 255, background 0.
pub fn write_pgm_mask(mask: &PixelMask, path: &Path) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::with_capacity(15 + h * w);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            out.push(if mask.get(y, x) == 1 { 255 } else { 0 });
        }
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Read a binary PGM (P5) mask: values above 127 are foreground.
pub fn read_pgm_mask(path: &Path) -> Result<PixelMask> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let header = parse_header(&bytes, "P5", path)?;
    let (w, h) = (header.width, header.height);
    let need = header.data_start + w * h;
    if bytes.len() < need {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("payload truncated: need {need} bytes"),
        ));
    }
    let data = bytes[header.data_start..need]
        .iter()
        .map(|&b| if b > 127 { 1 } else { 0 })
        .collect();
    PixelMask::new(h, w, data)
}

/// Read an image by extension: `.tnsr` is float-exact, `.ppm` is 8-bit.
pub fn read_image(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tnsr") => Tensor::load_tnsr(path),
        Some("ppm") => read_ppm(path),
        other => Err(Error::Config(format!(
            "unsupported image extension {other:?} (use .tnsr or .ppm)"
        ))),
    }
}

/// Write an image by extension, mirroring [`read_image`].
pub fn write_image(image: &Tensor, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tnsr") => image.save_tnsr(path),
        Some("ppm") => write_ppm(image, path),
        other => Err(Error::Config(format!(
            "unsupported image extension {other:?} (use .tnsr or .ppm)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("kvedit_imageio");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn ppm_round_trip_within_quantization() {
        let img = Rng::new(1).gaussian(vec![3, 16, 16]).map(|v| (v * 0.25 + 0.5).clamp(0.0, 1.0));
        let path = tmp("rt.ppm");
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.max_abs_diff(&img) <= 1.0 / 255.0 + 1e-12);
    }

    #[test]
    fn ppm_header_exact_for_defaults() {
        let img = Tensor::zeros(vec![3, 16, 16]);
        let path = tmp("hdr.ppm");
        write_ppm(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
        assert_eq!(bytes.len(), b"P6\n16 16\n255\n".len() + 3 * 256);
    }

    #[test]
    fn tnsr_image_round_trip_bitwise() {
        let img = Rng::new(2).gaussian(vec![3, 16, 16]);
        let path = tmp("rt.tnsr");
        write_image(&img, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn pgm_mask_round_trip() {
        let mut mask = PixelMask::zeros(16, 16);
        let mut rng = Rng::new(3);
        for y in 0..16 {
            for x in 0..16 {
                if rng.uniform() < 0.3 {
                    mask.set(y, x, 1);
                }
            }
        }
        let path = tmp("mask.pgm");
        write_pgm_mask(&mask, &path).unwrap();
        assert_eq!(read_pgm_mask(&path).unwrap(), mask);
    }

    #[test]
    fn malformed_header_reports_offset() {
        let path = tmp("bad.ppm");
        std::fs::write(&path, b"P5\n16 16\n255\n").unwrap();
        let err = read_ppm(&path).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));

        let path2 = tmp("trunc.ppm");
        std::fs::write(&path2, b"P6\n16 16\n255\nabc").unwrap();
        let err2 = read_ppm(&path2).unwrap_err();
        match err2 {
            Error::Format { offset, .. } => assert!(offset > 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_extension_rejected() {
        assert!(read_image(std::path::Path::new("x.png")).is_err());
    }
}
