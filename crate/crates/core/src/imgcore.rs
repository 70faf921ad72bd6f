//! Binary and grayscale image primitives: exact Euclidean distance transform,
//! symmetric chamfer distance, distance-based blurring, mirroring and tool
//! noise augmentation.

use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};

pub const SIZE: usize = 64;

/// Row-major bitmap with pixel values in {0, 1}; 1 is white (object or tool).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

/// Row-major real-valued image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidImage(format!("pixel value {v} is not 0 or 1")));
        }
        Ok(Self { width, height, pixels })
    }

    /// Thresholds real values at 0.5.
    pub fn from_gray(img: &GrayImage, threshold: f64) -> Self {
        Self {
            width: img.width,
            height: img.height,
            pixels: img.values.iter().map(|&v| u8::from(v > threshold)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.width + col] == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, white: bool) {
        self.pixels[row * self.width + col] = u8::from(white);
    }

    #[inline]
    pub fn is_white_at(&self, idx: usize) -> bool {
        self.pixels[idx] == 1
    }

    #[inline]
    pub fn set_at(&mut self, idx: usize, white: bool) {
        self.pixels[idx] = u8::from(white);
    }

    pub fn white_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 1).count()
    }

    /// `(row, col)` of every white pixel in row-major order.
    pub fn white_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.pixels
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == 1)
            .map(move |(i, _)| (i / w, i % w))
    }

    /// Number of white pixels among the 4-neighbours of `idx`.
    pub fn count_adjacent_white(&self, idx: usize) -> usize {
        let (r, c) = (idx / self.width, idx % self.width);
        let mut n = 0;
        if r > 0 && self.get(r - 1, c) {
            n += 1;
        }
        if r + 1 < self.height && self.get(r + 1, c) {
            n += 1;
        }
        if c > 0 && self.get(r, c - 1) {
            n += 1;
        }
        if c + 1 < self.width && self.get(r, c + 1) {
            n += 1;
        }
        n
    }

    pub fn same_size(&self, other: &BinaryImage) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::SizeMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// Centroid `(row, col)` of the white pixels, `None` for an all-black image.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut n, mut sr, mut sc) = (0usize, 0.0, 0.0);
        for (r, c) in self.white_pixels() {
            n += 1;
            sr += r as f64;
            sc += c as f64;
        }
        (n > 0).then(|| (sr / n as f64, sc / n as f64))
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32).collect()
    }

    pub fn write_pgm<W: Write>(&self, out: W) -> std::io::Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&p| p * 255).collect();
        write_pgm_bytes(out, self.width, self.height, &bytes)
    }

    /// Reads a binary (P5) PGM; any nonzero value is white.
    pub fn read_pgm<R: BufRead>(input: R) -> Result<Self> {
        let (width, height, bytes) = read_pgm_bytes(input)?;
        Ok(Self {
            width,
            height,
            pixels: bytes.into_iter().map(|b| u8::from(b > 0)).collect(),
        })
    }
}

impl GrayImage {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn write_pgm<W: Write>(&self, out: W) -> std::io::Result<()> {
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        write_pgm_bytes(out, self.width, self.height, &bytes)
    }
}

pub(crate) fn write_pgm_bytes<W: Write>(mut out: W, width: usize, height: usize, bytes: &[u8]) -> std::io::Result<()> {
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(bytes)
}

fn read_pgm_bytes<R: BufRead>(mut input: R) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |detail: &str| Error::Format {
        what: "pgm",
        offset: 0,
        detail: detail.to_string(),
    };
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        let n = input.read_line(&mut line).map_err(|e| bad(&e.to_string()))?;
        if n == 0 {
            return Err(bad("unexpected end of header"));
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_string));
    }
    if tokens[0] != "P5" {
        return Err(bad("not a P5 image"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let mut bytes = vec![0u8; w * h];
    input.read_exact(&mut bytes).map_err(|_| bad("truncated pixel data"))?;
    Ok((w, h, bytes))
}

/// Distance value used when an image has no white pixel at all.
pub fn d_max(img: &BinaryImage) -> f64 {
    (img.width + img.height) as f64
}

/// Exact squared Euclidean distance transform of a 1-D sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let parabola = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = parabola(q, v[k]);
        // z[0] = -inf stops the walk at k = 0
        while s <= z[k] {
            k -= 1;
            s = parabola(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance (px) from every pixel to the nearest white pixel.
/// An image without white pixels maps to `width + height` everywhere.
pub fn distance_transform(img: &BinaryImage) -> GrayImage {
    let (w, h) = (img.width, img.height);
    if img.pixels.iter().all(|&p| p == 0) {
        return GrayImage {
            width: w,
            height: h,
            values: vec![d_max(img); w * h],
        };
    }
    // finite sentinel above any realizable squared distance keeps the
    // parabola intersections exact
    let inf = (2 * (w * w + h * h) + 1) as f64;
    let m = w.max(h);
    let (mut f, mut out) = (vec![0.0; m], vec![0.0; m]);
    let (mut v, mut z) = (vec![0usize; m], vec![0.0; m + 1]);
    let mut grid: Vec<f64> = img.pixels.iter().map(|&p| if p == 1 { 0.0 } else { inf }).collect();
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..][..w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..][..w].copy_from_slice(&out[..w]);
    }
    GrayImage {
        width: w,
        height: h,
        values: grid.into_iter().map(f64::sqrt).collect(),
    }
}

/// Symmetric chamfer distance `Σ (a·DT(b) + b·DT(a))` in pixels.
pub fn chamfer_distance(a: &BinaryImage, b: &BinaryImage) -> Result<f64> {
    a.same_size(b)?;
    let (da, db) = (distance_transform(a), distance_transform(b));
    let mut total = 0.0;
    for i in 0..a.pixels.len() {
        if a.pixels[i] == 1 {
            total += db.values[i];
        }
        if b.pixels[i] == 1 {
            total += da.values[i];
        }
    }
    Ok(total)
}

/// Soft target `1 − tanh(c_blur · d)` where `d` is the distance to the nearest
/// white pixel: exactly 1 on the object, decaying away from it.
pub fn blur(img: &BinaryImage, c_blur: f64) -> GrayImage {
    let mut dt = distance_transform(img);
    for v in &mut dt.values {
        *v = 1.0 - (c_blur * *v).tanh();
    }
    dt
}

/// Horizontal flip about the vertical centre line.
pub fn mirror(img: &BinaryImage) -> BinaryImage {
    let w = img.width;
    let mut out = img.clone();
    for r in 0..img.height {
        let row = &mut out.pixels[r * w..][..w];
        row.reverse();
    }
    out
}

/// Random draws allowed per phase of [`add_noise_to_tool`].
pub fn noise_attempt_cap(img: &BinaryImage) -> usize {
    10 * img.width * img.height
}

/// Tool noise augmentation: whitens up to `c_add` black pixels that touch a
/// white 4-neighbour and blackens up to `c_del` white pixels. Eligibility is
/// judged on the input image, every flipped pixel is distinct, and each phase
/// gives up after [`noise_attempt_cap`] random draws.
pub fn add_noise_to_tool<R: Rng + ?Sized>(t: &BinaryImage, c_add: usize, c_del: usize, rng: &mut R) -> BinaryImage {
    let n = t.pixels.len();
    let mut out = t.clone();
    if n == 0 {
        return out;
    }
    let cap = noise_attempt_cap(t);
    let mut flipped = vec![false; n];

    let (mut added, mut attempts) = (0, 0);
    while added < c_add && attempts < cap {
        attempts += 1;
        let p = rng.random_range(0..n);
        if !t.is_white_at(p) && !flipped[p] && t.count_adjacent_white(p) > 0 {
            out.set_at(p, true);
            flipped[p] = true;
            added += 1;
        }
    }

    let (mut deleted, mut attempts) = (0, 0);
    while deleted < c_del && attempts < cap {
        attempts += 1;
        let p = rng.random_range(0..n);
        if t.is_white_at(p) && !flipped[p] {
            out.set_at(p, false);
            flipped[p] = true;
            deleted += 1;
        }
    }
    out
}
