//! Float images and binary PPM (P6) / PGM (P5) files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major, channel-interleaved image with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Self {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Single channel `c` as a new one-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    /// Values after an 8-bit write/read round trip.
    pub fn quantized(&self) -> Image {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = to_byte(*v) as f64 / 255.0;
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Shape(format!(
                "ppm needs 3 channels, image has {}",
                self.channels
            )));
        }
        write_netpbm(path, "P6", self)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::Shape(format!(
                "pgm needs 1 channel, image has {}",
                self.channels
            )));
        }
        write_netpbm(path, "P5", self)
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        read_netpbm(path, "P6", 3)
    }

    pub fn read_pgm(path: &Path) -> Result<Image> {
        read_netpbm(path, "P5", 1)
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_netpbm(path: &Path, magic: &str, img: &Image) -> Result<()> {
    let mut bytes = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend(img.data.iter().map(|&v| to_byte(v)));
    crate::io::write_atomic(path, &bytes)
}

fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // Skip whitespace and comments.
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::FormatAt {
                path: path.into(),
                offset: pos,
                msg: "truncated header".into(),
            });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if fields[0].1 != magic {
        return Err(Error::FormatAt {
            path: path.into(),
            offset: 0,
            msg: format!("expected magic {magic}, found {:?}", fields[0].1),
        });
    }
    let mut nums = [0usize; 3];
    for (slot, (offset, text)) in nums.iter_mut().zip(&fields[1..]) {
        *slot = text.parse().map_err(|_| Error::FormatAt {
            path: path.into(),
            offset: *offset,
            msg: format!("bad header number {text:?}"),
        })?;
    }
    let [width, height, maxval] = nums;
    if maxval != 255 {
        return Err(Error::FormatAt {
            path: path.into(),
            offset: fields[3].0,
            msg: format!("only 8-bit files are supported, maxval {maxval}"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(Error::FormatAt {
            path: path.into(),
            offset: bytes.len(),
            msg: format!("raster truncated: need {need} bytes after offset {pos}"),
        });
    }
    let data = bytes[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Image::from_data(width, height, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(5, 3, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        let p = dir.path().join("a.ppm");
        img.write_ppm(&p).unwrap();
        assert_eq!(Image::read_ppm(&p).unwrap(), img);

        let mask = Image::from_data(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let p = dir.path().join("m.pgm");
        mask.write_pgm(&p).unwrap();
        assert_eq!(Image::read_pgm(&p).unwrap(), mask);
        assert!(Image::read_ppm(&p).is_err());
    }

    #[test]
    fn header_comments_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        fs::write(&p, b"P5\n# hi\n2 1\n255\n\x00\xff").unwrap();
        let img = Image::read_pgm(&p).unwrap();
        assert_eq!(img.data, vec![0.0, 1.0]);
        fs::write(&p, b"P5\n2 2\n255\n\x00").unwrap();
        match Image::read_pgm(&p) {
            Err(Error::FormatAt { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quantization_clamps() {
        let img = Image::from_data(1, 1, 3, vec![-0.2, 0.5, 1.7]).unwrap();
        assert_eq!(img.quantized().data, vec![0.0, 128.0 / 255.0, 1.0]);
    }
}
