//! Address ⇄ image codec, per-bit set entropy, and feature stitching.
//!
//! An address becomes an 8×16 binary image: row `g` holds the 16 bits of
//! group `g`, most significant bit in column 0. Two images stacked vertically
//! form a 16×16 stitched training example.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::Address;

pub const ROWS: usize = 8;
pub const COLS: usize = 16;
pub const PIXELS: usize = ROWS * COLS;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("entropy of an empty address set is undefined")]
    EmptySet,
    #[error("cannot stitch an empty subclass")]
    EmptySubclass,
    #[error("stitch fanout must be at least 1")]
    ZeroFanout,
    #[error("expected {expected} pixel values, got {got}")]
    PixelCount { expected: usize, got: usize },
}

/// One address as an 8×16 bit image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AddressImage {
    rows: [u16; ROWS],
}

impl AddressImage {
    pub fn encode(a: Address) -> Self {
        AddressImage { rows: a.groups() }
    }

    pub fn decode(&self) -> Address {
        Address::from_groups(self.rows)
    }

    pub fn rows(&self) -> [u16; ROWS] {
        self.rows
    }

    pub fn pixel(&self, row: usize, col: usize) -> u8 {
        ((self.rows[row] >> (15 - col)) & 1) as u8
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, on: bool) {
        let m = 1u16 << (15 - col);
        if on {
            self.rows[row] |= m;
        } else {
            self.rows[row] &= !m;
        }
    }

    /// Raster-order pixels as 0.0 / 1.0.
    pub fn to_f32(&self) -> [f32; PIXELS] {
        std::array::from_fn(|q| self.pixel(q / COLS, q % COLS) as f32)
    }

    /// Builds an image from raster-order values, thresholding at 0.5.
    pub fn from_values(values: &[f32]) -> Result<Self, ImageError> {
        if values.len() != PIXELS {
            return Err(ImageError::PixelCount { expected: PIXELS, got: values.len() });
        }
        let mut img = AddressImage { rows: [0; ROWS] };
        for (q, &v) in values.iter().enumerate() {
            img.set_pixel(q / COLS, q % COLS, v >= 0.5);
        }
        Ok(img)
    }

    /// Plain (P2) PGM, white for set bits.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{COLS} {ROWS}\n255\n");
        for r in 0..ROWS {
            let line: Vec<String> = (0..COLS).map(|c| (self.pixel(r, c) as u32 * 255).to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..ROWS {
            let line: Vec<String> = (0..COLS).map(|c| self.pixel(r, c).to_string()).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

pub fn encode(a: Address) -> AddressImage {
    AddressImage::encode(a)
}

pub fn decode(img: &AddressImage) -> Address {
    img.decode()
}

/// Two address images stacked: rows 0..8 are `top`, rows 8..16 are `bottom`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StitchedImage {
    pub top: AddressImage,
    pub bottom: AddressImage,
}

impl StitchedImage {
    pub const ROWS: usize = 2 * ROWS;

    pub fn pixel(&self, row: usize, col: usize) -> u8 {
        if row < ROWS {
            self.top.pixel(row, col)
        } else {
            self.bottom.pixel(row - ROWS, col)
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        let mut v = self.top.to_f32().to_vec();
        v.extend_from_slice(&self.bottom.to_f32());
        v
    }

    pub fn halves(&self) -> (Address, Address) {
        (self.top.decode(), self.bottom.decode())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyMode {
    /// Binary entropy in bits, each value in [0, 1].
    #[default]
    Standard,
    /// Binary entropy scaled by 1/4, each value in [0, 0.25].
    PaperLiteral,
}

impl EntropyMode {
    pub fn ceiling(self) -> f64 {
        match self {
            EntropyMode::Standard => 1.0,
            EntropyMode::PaperLiteral => 0.25,
        }
    }
}

impl std::str::FromStr for EntropyMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(EntropyMode::Standard),
            "paper-literal" => Ok(EntropyMode::PaperLiteral),
            other => Err(format!("unknown entropy mode {other:?} (standard|paper-literal)")),
        }
    }
}

/// Per-bit entropy of an address set plus its mean (the comprehensive entropy).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyImage {
    pub values: [[f64; COLS]; ROWS],
    pub ce: f64,
    pub mode: EntropyMode,
}

fn binary_entropy(p: f64) -> f64 {
    [p, 1.0 - p].iter().filter(|&&x| x > 0.0).map(|&x| -x * x.log2()).sum()
}

pub fn set_entropy(addrs: &[Address], mode: EntropyMode) -> Result<EntropyImage, ImageError> {
    if addrs.is_empty() {
        return Err(ImageError::EmptySet);
    }
    let mut ones = [0usize; PIXELS];
    for a in addrs {
        for (q, c) in ones.iter_mut().enumerate() {
            *c += a.bit(q) as usize;
        }
    }
    let n = addrs.len() as f64;
    let scale = match mode {
        EntropyMode::Standard => 1.0,
        EntropyMode::PaperLiteral => 0.25,
    };
    let mut values = [[0.0; COLS]; ROWS];
    let mut sum = 0.0;
    for (q, &c) in ones.iter().enumerate() {
        let h = scale * binary_entropy(c as f64 / n);
        values[q / COLS][q % COLS] = h;
        sum += h;
    }
    Ok(EntropyImage { values, ce: sum / PIXELS as f64, mode })
}

impl EntropyImage {
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row][col]
    }

    /// Plain (P2) PGM; black is zero entropy, white the mode's ceiling.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{COLS} {ROWS}\n255\n");
        let ceil = self.mode.ceiling();
        for row in &self.values {
            let line: Vec<String> =
                row.iter().map(|v| ((v / ceil).clamp(0.0, 1.0) * 255.0).round().to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in &self.values {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }
}

/// Sorts addresses in dictionary order of their 32-digit hex form.
pub fn sort_dictionary(addrs: &mut [Address]) {
    // fixed-width hex compares exactly like the integer value
    addrs.sort_unstable();
}

/// Pairs each image with the next `fanout` images of an ordered subclass,
/// wrapping around. Distances are taken mod the subclass size; repeats and
/// the zero distance are dropped. A singleton subclass pairs with itself once.
pub fn stitch_pairs(subclass: &[AddressImage], fanout: usize) -> Result<Vec<StitchedImage>, ImageError> {
    if subclass.is_empty() {
        return Err(ImageError::EmptySubclass);
    }
    if fanout == 0 {
        return Err(ImageError::ZeroFanout);
    }
    let n = subclass.len();
    if n == 1 {
        return Ok(vec![StitchedImage { top: subclass[0], bottom: subclass[0] }]);
    }
    let mut distances: Vec<usize> = (1..=fanout).map(|d| d % n).filter(|&d| d != 0).collect();
    distances.sort_unstable();
    distances.dedup();
    let mut out = Vec::with_capacity(n * distances.len());
    for t in 0..n {
        for &d in &distances {
            out.push(StitchedImage { top: subclass[t], bottom: subclass[(t + d) % n] });
        }
    }
    Ok(out)
}

/// Random pairing: each image is paired with `fanout` partners drawn
/// uniformly from the rest of the subclass.
pub fn stitch_random(subclass: &[AddressImage], fanout: usize, seed: u64) -> Result<Vec<StitchedImage>, ImageError> {
    if subclass.is_empty() {
        return Err(ImageError::EmptySubclass);
    }
    if fanout == 0 {
        return Err(ImageError::ZeroFanout);
    }
    let n = subclass.len();
    if n == 1 {
        return Ok(vec![StitchedImage { top: subclass[0], bottom: subclass[0] }]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * fanout);
    let mut others: Vec<usize> = Vec::with_capacity(n - 1);
    for t in 0..n {
        others.clear();
        others.extend((0..n).filter(|&u| u != t));
        others.shuffle(&mut rng);
        for &u in others.iter().take(fanout) {
            out.push(StitchedImage { top: subclass[t], bottom: subclass[u] });
        }
    }
    Ok(out)
}
