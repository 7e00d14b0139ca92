//! Binary 8-bit PGM (P5) images.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{} pixels do not form a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage { width, height, pixels: vec![value; width * height] }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err("truncated header".into()),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                pos += 1;
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err("not a binary PGM (P5)".into());
        }
        let mut number = |what: &str| -> std::result::Result<usize, String> {
            let t = token()?;
            t.parse().map_err(|_| format!("bad {what} `{t}`"))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if maxval != 255 {
            return Err(format!("maxval {maxval} unsupported, expected 255"));
        }
        // exactly one whitespace byte separates the header from the raster
        let data = &bytes[(pos + 1).min(bytes.len())..];
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(format!("raster has {} bytes, expected {width}x{height}", data.len()));
        }
        Ok(GrayImage { width, height, pixels: data.to_vec() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        GrayImage::decode(&bytes).map_err(|msg| Error::Dataset { path: path.to_path_buf(), msg })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = GrayImage::new(3, 2, vec![0, 10, 255, 7, 8, 9]).unwrap();
        assert_eq!(GrayImage::decode(&img.encode()).unwrap(), img);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([1, 2]);
        assert_eq!(GrayImage::decode(&bytes).unwrap().pixels, vec![1, 2]);
    }

    #[test]
    fn corrupt_inputs() {
        assert!(GrayImage::decode(b"P2\n1 1\n255\n0").is_err());
        assert!(GrayImage::decode(b"P5\n2 2\n255\n\x01\x02").is_err());
        assert!(GrayImage::decode(b"P5\n2 x\n255\n").is_err());
        assert!(GrayImage::decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(GrayImage::decode(b"").is_err());
    }
}
