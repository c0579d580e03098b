//! Binary NetPBM: P6 (RGB) and P5 (grayscale), maxval 255 only.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub pixels: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Header<'_> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_string(),
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.fail(format!("{what} out of range")))
    }
}

/// Parses a P5/P6 byte stream. `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &str) -> Result<Pnm> {
    let mut h = Header { bytes, pos: 0, path };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(h.fail("bad magic, expected P5 or P6")),
    };
    h.pos = 2;
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(h.fail(format!("maxval {maxval} unsupported, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(h.fail("zero image dimension"));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(h.fail("missing whitespace after header")),
    }
    let need = width * height * channels;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        h.pos = bytes.len();
        return Err(h.fail(format!(
            "truncated payload: {} of {need} sample bytes",
            payload.len()
        )));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        pixels: payload[..need].to_vec(),
    })
}

pub fn encode(p: &Pnm) -> Vec<u8> {
    let magic = if p.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", p.width, p.height).into_bytes();
    out.extend_from_slice(&p.pixels);
    out
}

pub fn read(path: &Path) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

fn write(path: &Path, p: &Pnm) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(p)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    write(
        path,
        &Pnm {
            width,
            height,
            channels: 1,
            pixels: pixels.to_vec(),
        },
    )
}

/// `pixels` interleaved RGB.
pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height * 3);
    write(
        path,
        &Pnm {
            width,
            height,
            channels: 3,
            pixels: pixels.to_vec(),
        },
    )
}

/// Quantizes `[0, 1]` to 8 bits: `round(v * 255)`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Planar RGB image, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `(3, h, w)` planar.
    pub data: Vec<f32>,
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let p = read(path)?;
    if p.channels != 3 {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            detail: "expected an RGB (P6) image".into(),
        });
    }
    let plane = p.width * p.height;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in p.pixels.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Ok(RgbImage {
        width: p.width,
        height: p.height,
        data,
    })
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let plane = img.width * img.height;
    let pixels: Vec<u8> = (0..plane)
        .flat_map(|i| (0..3).map(move |c| (c, i)))
        .map(|(c, i)| quantize(img.data[c * plane + i]))
        .collect();
    write_ppm(path, img.width, img.height, &pixels)
}

/// Grayscale map scaled to `[0, 1]`.
pub fn read_map(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let p = read(path)?;
    if p.channels != 1 {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            detail: "expected a grayscale (P5) map".into(),
        });
    }
    Ok((
        p.width,
        p.height,
        p.pixels.iter().map(|&v| f32::from(v) / 255.0).collect(),
    ))
}

/// Binary mask: samples `>= 128` are foreground.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let (w, h, v) = read_map(path)?;
    Ok((w, h, v.iter().map(|&x| if x >= 128.0 / 255.0 { 1.0 } else { 0.0 }).collect()))
}

pub fn write_map(path: &Path, width: usize, height: usize, map: &[f32]) -> Result<()> {
    let px: Vec<u8> = map.iter().map(|&v| quantize(v)).collect();
    write_pgm(path, width, height, &px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0, 255]);
        let p = decode(&bytes, "mem").unwrap();
        assert_eq!((p.width, p.height, p.channels), (2, 1, 1));
        assert_eq!(p.pixels, vec![0, 255]);
    }

    #[test]
    fn rejects_other_maxval() {
        let bytes = b"P6\n1 1\n65535\n\0\0\0\0\0\0".to_vec();
        let err = decode(&bytes, "mem").unwrap_err();
        assert!(err.to_string().contains("maxval"), "{err}");
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = b"P6\n2 2\n255\n\x01\x02".to_vec();
        match decode(&bytes, "mem").unwrap_err() {
            Error::Format { offset, detail, .. } => {
                assert_eq!(offset, bytes.len());
                assert!(detail.contains("truncated"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(
            decode(b"P3\n1 1\n255\n0 0 0", "mem"),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn map_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let map: Vec<f32> = (0..35).map(|i| (i as f32 * 0.0371) % 1.0).collect();
        write_map(&path, 7, 5, &map).unwrap();
        let (w, h, back) = read_map(&path).unwrap();
        assert_eq!((w, h), (7, 5));
        for (a, b) in map.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
        }
    }

    #[test]
    fn mask_is_binary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        write_pgm(&path, 4, 1, &[0, 255, 127, 128]).unwrap();
        let (_, _, m) = read_mask(&path).unwrap();
        assert_eq!(m, vec![0.0, 1.0, 0.0, 1.0]);
    }
}
