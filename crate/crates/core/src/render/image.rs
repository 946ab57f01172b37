use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// Row-major RGB float image in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf<T> {
    pub width: u32,
    pub height: u32,
    pub data: Vec<Vector3<T>>,
}

impl<T: Real> ImageBuf<T> {
    pub fn filled(width: u32, height: u32, color: Vector3<T>) -> Self {
        ImageBuf {
            width,
            height,
            data: vec![color; (width * height) as usize],
        }
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self::filled(width, height, Vector3::zeros())
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> &Vector3<T> {
        &self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut Vector3<T> {
        &mut self.data[(y * self.width + x) as usize]
    }

    pub fn same_shape(&self, other: &ImageBuf<T>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Write as binary PPM (P6, 8-bit). Values are clamped and rounded;
    /// metric computation always uses the float buffer, not this file.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut bytes = Vec::with_capacity(self.data.len() * 3);
        for px in &self.data {
            for c in 0..3 {
                bytes.push(quantize(px[c]));
            }
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let (magic, width, height, maxval) = read_pnm_header(&mut r)?;
        if magic != "P6" {
            return Err(Error::invalid(format!("expected P6 ppm, got {magic}")));
        }
        if maxval != 255 {
            return Err(Error::invalid(format!("unsupported maxval {maxval}")));
        }
        let mut bytes = vec![0u8; (width * height * 3) as usize];
        r.read_exact(&mut bytes)?;
        let inv = real::<T>(1.0 / 255.0);
        let data = bytes
            .chunks_exact(3)
            .map(|c| {
                Vector3::new(
                    real::<T>(c[0] as f64) * inv,
                    real::<T>(c[1] as f64) * inv,
                    real::<T>(c[2] as f64) * inv,
                )
            })
            .collect();
        Ok(ImageBuf {
            width,
            height,
            data,
        })
    }
}

fn quantize<T: Real>(v: T) -> u8 {
    let x = (v.clamp(T::zero(), T::one()) * real(255.0)).round();
    x.to_f64_lossy() as u8
}

/// Binary PGM (P5, 8-bit) for per-pixel labels.
pub fn write_pgm(path: &Path, width: u32, height: u32, values: &[u8]) -> Result<()> {
    assert_eq!(values.len(), (width * height) as usize);
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(values)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let (magic, width, height, maxval) = read_pnm_header(&mut r)?;
    if magic != "P5" {
        return Err(Error::invalid(format!("expected P5 pgm, got {magic}")));
    }
    if maxval != 255 {
        return Err(Error::invalid(format!("unsupported maxval {maxval}")));
    }
    let mut bytes = vec![0u8; (width * height) as usize];
    r.read_exact(&mut bytes)?;
    Ok((width, height, bytes))
}

/// Parse "magic\nwidth height\nmaxval\n" allowing arbitrary whitespace and
/// `#` comments, per the netpbm spec.
fn read_pnm_header(r: &mut impl BufRead) -> Result<(String, u32, u32, u32)> {
    let mut fields = Vec::new();
    let mut token = Vec::new();
    let mut in_comment = false;
    while fields.len() < 4 {
        let mut byte = [0u8];
        r.read_exact(&mut byte)?;
        let b = byte[0];
        if in_comment {
            if b == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match b {
            b'#' => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !token.is_empty() {
                    fields.push(String::from_utf8_lossy(&token).into_owned());
                    token.clear();
                }
            }
            _ => token.push(b),
        }
    }
    let magic = fields[0].clone();
    let parse = |s: &str| {
        s.parse::<u32>()
            .map_err(|_| Error::invalid(format!("bad pnm header field {s}")))
    };
    Ok((magic, parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?))
}
