//! Image tensors, resampling, patch partitions and binary pixmap IO.
//!
//! Images are stored row-major, channels interleaved (`[y][x][c]`), which is
//! also the byte order of P5/P6 pixmaps. Pixel values live in `[-1, 1]`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn square(side: usize, channels: usize) -> Self {
        Self {
            height: side,
            width: side,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == shape.len(),
            Shape,
            "{} values for image of shape {shape}",
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape.width + x) * self.shape.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        ensure!(
            self.shape == other.shape,
            Shape,
            "{what}: {} vs {}",
            self.shape,
            other.shape
        );
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn l2_distance(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Image {
        let s = self.shape;
        let out_shape = Shape {
            height: s.height * factor,
            width: s.width * factor,
            channels: s.channels,
        };
        let mut out = Image::zeros(out_shape);
        for y in 0..out_shape.height {
            for x in 0..out_shape.width {
                for c in 0..s.channels {
                    out.set(y, x, c, self.get(y / factor, x / factor, c));
                }
            }
        }
        out
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample_mean(&self, factor: usize) -> Result<Image> {
        let s = self.shape;
        ensure!(
            factor > 0 && s.height.is_multiple_of(factor) && s.width.is_multiple_of(factor),
            Shape,
            "cannot downsample {s} by {factor}"
        );
        let out_shape = Shape {
            height: s.height / factor,
            width: s.width / factor,
            channels: s.channels,
        };
        let mut out = Image::zeros(out_shape);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..out_shape.height {
            for x in 0..out_shape.width {
                for c in 0..s.channels {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(y * factor + dy, x * factor + dx, c);
                        }
                    }
                    out.set(y, x, c, acc * norm);
                }
            }
        }
        Ok(out)
    }

    /// Resample to a square side length by box-downsampling or nearest upsampling.
    pub fn resize_to(&self, side: usize) -> Result<Image> {
        let cur = self.shape.height;
        ensure!(
            self.shape.width == cur,
            Shape,
            "resize_to expects a square image"
        );
        if side == cur {
            Ok(self.clone())
        } else if side < cur {
            ensure!(
                cur.is_multiple_of(side),
                Shape,
                "{cur} is not a multiple of {side}"
            );
            self.downsample_mean(cur / side)
        } else {
            ensure!(
                side.is_multiple_of(cur),
                Shape,
                "{side} is not a multiple of {cur}"
            );
            Ok(self.upsample_nearest(side / cur))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_byte(v)).collect()
    }

    pub fn from_bytes(shape: Shape, bytes: &[u8]) -> Result<Image> {
        ensure!(
            bytes.len() == shape.len(),
            Shape,
            "{} bytes for image of shape {shape}",
            bytes.len()
        );
        Ok(Image {
            shape,
            data: bytes.iter().map(|&b| from_byte(b)).collect(),
        })
    }

    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() + 32);
        encode_pnm(self, &mut buf)?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_pnm(path: &Path) -> Result<Image> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        decode_pnm(BufReader::new(f))
    }
}

/// `[-1, 1]` to `[0, 255]`, affine, round half to even.
pub fn to_byte(v: f64) -> u8 {
    let p = (v.clamp(-1.0, 1.0) + 1.0) * 127.5;
    p.round_ties_even().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

pub fn encode_pnm(img: &Image, out: &mut impl Write) -> Result<()> {
    let s = img.shape();
    let magic = match s.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::Shape(format!(
                "pixmaps hold 1 or 3 channels, got {c}"
            )))
        }
    };
    let wrap = |e| Error::io("<pnm>", e);
    write!(out, "{magic}\n{} {}\n255\n", s.width, s.height).map_err(wrap)?;
    out.write_all(&img.to_bytes()).map_err(wrap)
}

pub fn decode_pnm(mut r: impl BufRead) -> Result<Image> {
    let mut header = Vec::new();
    let mut fields: Vec<String> = Vec::new();
    // magic, width, height, maxval separated by whitespace, '#' comments allowed
    while fields.len() < 4 {
        let mut byte = [0u8; 1];
        let n = r.read(&mut byte).map_err(|e| Error::io("<pnm>", e))?;
        if n == 0 {
            return Err(Error::Format("truncated pixmap header".into()));
        }
        let b = byte[0];
        if b == b'#' && header.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)
                .map_err(|e| Error::io("<pnm>", e))?;
        } else if b.is_ascii_whitespace() {
            if !header.is_empty() {
                fields.push(String::from_utf8_lossy(&header).into_owned());
                header.clear();
            }
        } else {
            header.push(b);
        }
    }
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported pixmap magic {m:?}"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad pixmap header field {s:?}")))
    };
    let width = parse(&fields[1])?;
    let height = parse(&fields[2])?;
    if parse(&fields[3])? != 255 {
        return Err(Error::Format("only maxval 255 is supported".into()));
    }
    let shape = Shape {
        height,
        width,
        channels,
    };
    let mut bytes = vec![0u8; shape.len()];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::io("<pnm>", e))?;
    Image::from_bytes(shape, &bytes)
}

/// A partition of an image's pixels into patches. Every channel of a pixel
/// belongs to the pixel's patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    height: usize,
    width: usize,
    assignment: Vec<usize>,
    n_patches: usize,
}

impl PatchSpec {
    pub fn whole(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            assignment: vec![0; height * width],
            n_patches: 1,
        }
    }

    /// Square tiles of `patch` pixels per side, numbered row-major.
    pub fn grid(height: usize, width: usize, patch: usize) -> Result<Self> {
        ensure!(
            patch > 0 && height.is_multiple_of(patch) && width.is_multiple_of(patch),
            InvalidArgument,
            "patch size {patch} does not divide {height}x{width}"
        );
        let per_row = width / patch;
        let assignment = (0..height * width)
            .map(|i| {
                let (y, x) = (i / width, i % width);
                (y / patch) * per_row + x / patch
            })
            .collect();
        Ok(Self {
            height,
            width,
            assignment,
            n_patches: (height / patch) * per_row,
        })
    }

    /// Arbitrary partition; patch ids must be dense in `0..n`.
    pub fn from_assignment(height: usize, width: usize, assignment: Vec<usize>) -> Result<Self> {
        ensure!(
            assignment.len() == height * width,
            Shape,
            "assignment has {} entries for {height}x{width}",
            assignment.len()
        );
        let n_patches = assignment.iter().copied().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; n_patches];
        for &a in &assignment {
            seen[a] = true;
        }
        ensure!(
            seen.iter().all(|&s| s),
            InvalidArgument,
            "patch ids must be dense"
        );
        Ok(Self {
            height,
            width,
            assignment,
            n_patches,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn patch_of_pixel(&self, pixel: usize) -> usize {
        self.assignment[pixel]
    }

    pub fn matches(&self, shape: Shape) -> bool {
        self.height == shape.height && self.width == shape.width
    }

    /// Sum per-element values of an `[y][x][c]` buffer into per-patch totals.
    pub fn reduce(&self, channels: usize, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_patches];
        for (pixel, chunk) in values.chunks(channels).enumerate() {
            out[self.assignment[pixel]] += chunk.iter().sum::<f64>();
        }
        out
    }

    /// Number of scalar elements per patch.
    pub fn patch_sizes(&self, channels: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_patches];
        for &a in &self.assignment {
            out[a] += channels;
        }
        out
    }
}
