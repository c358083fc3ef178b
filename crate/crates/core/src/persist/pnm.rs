//! Binary portable pixmap (P6) and graymap (P5) reading and writing.
//!
//! P6 carries 8-bit RGB images; P5 carries label maps, 16-bit big-endian
//! when the maxval is 65535 so entity ids are stored directly. Headers allow
//! '#' comments per the netpbm convention; payloads must match the header
//! exactly, with no trailing bytes.

use std::path::Path;

use super::write_atomic;
use crate::error::PersistError;
use crate::tensor::Tensor;

fn header(magic: &str, w: usize, h: usize, maxval: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes()
}

pub fn encode_ppm(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * w * h);
    let mut out = header("P6", w, h, 255);
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm8(w: usize, h: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), w * h);
    let mut out = header("P5", w, h, 255);
    out.extend_from_slice(gray);
    out
}

pub fn encode_pgm16(w: usize, h: usize, gray: &[u16]) -> Vec<u8> {
    assert_eq!(gray.len(), w * h);
    let mut out = header("P5", w, h, 65535);
    for &v in gray {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

struct HeaderParse {
    w: usize,
    h: usize,
    maxval: usize,
    payload_start: usize,
}

/// Parses "magic w h maxval" with whitespace and '#' comments, returning the
/// offset one byte past the single whitespace that terminates the maxval.
fn parse_header(bytes: &[u8], magic: &str) -> Result<HeaderParse, PersistError> {
    if bytes.len() < 2 || &bytes[0..2] != magic.as_bytes() {
        return Err(PersistError::Malformed {
            what: "pnm header",
            msg: format!("expected {magic} magic"),
        });
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b' ') | Some(b'\t') | Some(b'\n') | Some(b'\r') => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => {
                    return Err(PersistError::Truncated("pnm header".into()));
                }
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(PersistError::Malformed {
                what: "pnm header",
                msg: "expected a decimal field".into(),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("digits are utf-8")
            .parse()
            .map_err(|_| PersistError::Malformed {
                what: "pnm header",
                msg: "field out of range".into(),
            })?;
    }
    // exactly one whitespace byte after maxval
    match bytes.get(pos) {
        Some(b' ') | Some(b'\t') | Some(b'\n') | Some(b'\r') => pos += 1,
        _ => {
            return Err(PersistError::Malformed {
                what: "pnm header",
                msg: "missing whitespace after maxval".into(),
            })
        }
    }
    if fields[0] == 0 || fields[1] == 0 {
        return Err(PersistError::Malformed {
            what: "pnm header",
            msg: "zero image dimension".into(),
        });
    }
    if fields[2] != 255 && fields[2] != 65535 {
        return Err(PersistError::Malformed {
            what: "pnm header",
            msg: format!("unsupported maxval {}", fields[2]),
        });
    }
    Ok(HeaderParse {
        w: fields[0],
        h: fields[1],
        maxval: fields[2],
        payload_start: pos,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), PersistError> {
    let hp = parse_header(bytes, "P6")?;
    if hp.maxval != 255 {
        return Err(PersistError::Malformed {
            what: "ppm",
            msg: "only 8-bit pixmaps are supported".into(),
        });
    }
    let need = 3 * hp.w * hp.h;
    let payload = &bytes[hp.payload_start..];
    if payload.len() < need {
        return Err(PersistError::Truncated("ppm payload".into()));
    }
    if payload.len() > need {
        return Err(PersistError::TrailingGarbage);
    }
    Ok((hp.w, hp.h, payload.to_vec()))
}

/// Decodes a P5 graymap into u16 samples regardless of stored depth.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>), PersistError> {
    let hp = parse_header(bytes, "P5")?;
    let per = if hp.maxval == 255 { 1 } else { 2 };
    let need = per * hp.w * hp.h;
    let payload = &bytes[hp.payload_start..];
    if payload.len() < need {
        return Err(PersistError::Truncated("pgm payload".into()));
    }
    if payload.len() > need {
        return Err(PersistError::TrailingGarbage);
    }
    let data = if per == 1 {
        payload.iter().map(|&b| b as u16).collect()
    } else {
        payload
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok((hp.w, hp.h, data))
}

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<(), PersistError> {
    write_atomic(path, &encode_ppm(w, h, rgb))
}

pub fn write_pgm16(path: &Path, w: usize, h: usize, gray: &[u16]) -> Result<(), PersistError> {
    write_atomic(path, &encode_pgm16(w, h, gray))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>), PersistError> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u16>), PersistError> {
    decode_pgm(&std::fs::read(path)?)
}

/// [3, h, w] tensor in [0, 1] to interleaved 8-bit RGB.
pub fn image_to_rgb8(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut out = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            out[p * 3 + c] = (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

/// Interleaved 8-bit RGB to a [3, h, w] tensor in [0, 1].
pub fn rgb8_to_image(w: usize, h: usize, rgb: &[u8]) -> Tensor {
    let mut data = vec![0.0f32; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = rgb[p * 3 + c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("image shape")
}
