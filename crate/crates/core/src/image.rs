//! Planar RGB images, label maps and their binary PPM/PGM encodings.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::IGNORE;

/// Planar `3 × H × W` image with channel values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::BadShape {
                len: data.len(),
                shape: vec![Self::CHANNELS, height, width],
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Self { height, width, data }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, channel: usize, pixel: usize) -> f64 {
        self.data[channel * self.pixels() + pixel]
    }

    pub fn set(&mut self, channel: usize, pixel: usize, v: f64) {
        let n = self.pixels();
        self.data[channel * n + pixel] = v;
    }

    pub fn rgb(&self, pixel: usize) -> [f64; 3] {
        [self.get(0, pixel), self.get(1, pixel), self.get(2, pixel)]
    }

    pub fn same_extent(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    pub fn write_ppm(&self, out: &mut impl Write) -> Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let n = self.pixels();
        let mut bytes = Vec::with_capacity(3 * n);
        for p in 0..n {
            for c in 0..3 {
                bytes.push((self.get(c, p).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ppm(input: impl Read) -> Result<Self> {
        let (magic, width, height, raw) = read_netpbm(input, 3)?;
        if magic != "P6" {
            return Err(Error::ImageFormat(format!("expected P6, found {magic}")));
        }
        let n = width * height;
        let mut data = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                data[c * n + p] = raw[3 * p + c] as f64 / 255.0;
            }
        }
        Self::new(height, width, data)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ppm(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_ppm(std::fs::File::open(path)?)
    }
}

/// Per-pixel class ids, with [`IGNORE`] marking unlabelled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::BadShape {
                len: data.len(),
                shape: vec![height, width],
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn pixels(&self) -> usize {
        self.data.len()
    }

    pub fn contains(&self, class: u8) -> bool {
        self.data.contains(&class)
    }

    /// Distinct labelled classes in increasing order.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (0..=254u8).filter(|&c| seen[c as usize] && c != IGNORE).collect()
    }

    pub fn write_pgm(&self, out: &mut impl Write) -> Result<()> {
        write_pgm(out, self.width, self.height, &self.data)
    }

    pub fn read_pgm(input: impl Read) -> Result<Self> {
        let (magic, width, height, raw) = read_netpbm(input, 1)?;
        if magic != "P5" {
            return Err(Error::ImageFormat(format!("expected P5, found {magic}")));
        }
        Self::new(height, width, raw)
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_pgm(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_pgm(std::fs::File::open(path)?)
    }
}

pub fn write_pgm(out: &mut impl Write, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(bytes)?;
    Ok(())
}

fn read_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let ch = byte[0] as char;
        if ch == '#' && tok.is_empty() {
            let mut comment = String::new();
            r.read_line(&mut comment)?;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(ch);
    }
    if tok.is_empty() {
        return Err(Error::ImageFormat("truncated header".into()));
    }
    Ok(tok)
}

fn read_netpbm(input: impl Read, channels: usize) -> Result<(String, usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(input);
    let magic = read_token(&mut r)?;
    let mut dim = |what: &str| -> Result<usize> {
        read_token(&mut r)?
            .parse()
            .map_err(|_| Error::ImageFormat(format!("bad {what}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let maxval = dim("maxval")?;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!("unsupported maxval {maxval}")));
    }
    let mut raw = vec![0u8; width * height * channels];
    r.read_exact(&mut raw)?;
    Ok((magic, width, height, raw))
}
