//! Binary PGM (P5) and PPM (P6) images, maxval 255.

use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

pub fn encode_pgm(img: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().flatten());
    out
}

fn fmt_err(msg: &str) -> Error {
    Error::Format(format!("pgm: {msg}"))
}

/// Parses the header tokens (skipping `#` comments) and returns the payload.
fn header<'a>(buf: &'a [u8], magic: &[u8]) -> Result<(usize, usize, &'a [u8])> {
    if !buf.starts_with(magic) {
        return Err(fmt_err("bad magic"));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && buf[pos].is_ascii_digit() {
            pos += 1;
        }
        let tok = std::str::from_utf8(&buf[start..pos]).map_err(|_| fmt_err("bad header"))?;
        *f = tok.parse().map_err(|_| fmt_err("bad header field"))?;
    }
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(fmt_err("truncated header"));
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(fmt_err("only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(fmt_err("zero dimension"));
    }
    Ok((w, h, &buf[pos + 1..]))
}

pub fn decode_pgm(buf: &[u8]) -> Result<Gray> {
    let (width, height, data) = header(buf, b"P5")?;
    if data.len() != width * height {
        return Err(fmt_err("payload length does not match dimensions"));
    }
    Ok(Gray {
        width,
        height,
        pixels: data.to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&buf)
}

pub fn write_pgm(path: &Path, img: &Gray) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    std::fs::write(path, encode_ppm(width, height, rgb)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let img = Gray {
            width: 3,
            height: 2,
            pixels: vec![0, 10, 255, 7, 8, 9],
        };
        let bytes = encode_pgm(&img);
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn comments_and_errors() {
        let buf = b"P5 # c\n2 # w\n1\n255\n\x01\x02";
        assert_eq!(decode_pgm(buf).unwrap().pixels, vec![1, 2]);
        assert!(decode_pgm(b"P6\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn ppm_header() {
        let bytes = encode_ppm(1, 1, &[[1, 2, 3]]);
        assert_eq!(bytes, b"P6\n1 1\n255\n\x01\x02\x03");
    }
}
