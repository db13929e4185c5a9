use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};

use super::BBox;

/// A dense binary mask, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return dim_err(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            ));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    /// Thresholds a row-major probability map at `threshold` (inclusive).
    pub fn from_probs(width: usize, height: usize, probs: &[f64], threshold: f64) -> Result<Self> {
        Self::from_bits(width, height, probs.iter().map(|&p| p >= threshold).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return dim_err(format!(
                "mask sizes {}x{} and {}x{} differ",
                self.width, self.height, other.width, other.height
            ));
        }
        Ok(())
    }

    /// `|a ∩ b| / |a ∪ b|`, zero when both are empty.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        self.check_dims(other)?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        })
    }

    /// Tight bounding box of the foreground in pixel units, `None` if empty.
    pub fn tight_box(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }

    pub fn to_rle(&self) -> Rle {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b != current {
                runs.push(len);
                current = b;
                len = 0;
            }
            len += 1;
        }
        runs.push(len);
        Rle {
            width: self.width,
            height: self.height,
            runs,
        }
    }
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryMask({}x{}, area {})", self.width, self.height, self.area())
    }
}

/// Run-length encoding of a binary mask: row-major runs alternating
/// background and foreground, starting with background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rle {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<u32>,
}

impl Rle {
    pub fn decode(&self) -> Result<BinaryMask> {
        let total: u64 = self.runs.iter().map(|&r| r as u64).sum();
        if total != (self.width * self.height) as u64 {
            return dim_err(format!(
                "runs cover {total} pixels of a {}x{} mask",
                self.width, self.height
            ));
        }
        let mut bits = Vec::with_capacity(self.width * self.height);
        for (i, &r) in self.runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
        }
        BinaryMask::from_bits(self.width, self.height, bits)
    }
}

/// Text form `"w h; r0 r1 r2 ..."`.
impl fmt::Display for Rle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {};", self.width, self.height)?;
        for r in &self.runs {
            write!(f, " {r}")?;
        }
        Ok(())
    }
}

impl FromStr for Rle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: &str| Error::Parse {
            offset: 0,
            message: format!("{m} in RLE {s:?}"),
        };
        let (dims, runs) = s.split_once(';').ok_or_else(|| bad("missing ';'"))?;
        let mut dims = dims.split_whitespace().map(str::parse::<usize>);
        let (Some(Ok(width)), Some(Ok(height)), None) = (dims.next(), dims.next(), dims.next()) else {
            return Err(bad("malformed dimensions"));
        };
        let runs = runs
            .split_whitespace()
            .map(str::parse::<u32>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("malformed run"))?;
        let rle = Rle {
            width,
            height,
            runs,
        };
        let total: u64 = rle.runs.iter().map(|&r| r as u64).sum();
        if total != (width * height) as u64 {
            return Err(bad("runs do not cover the mask"));
        }
        Ok(rle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    #[test]
    fn mask_iou_cases() {
        let a = rect(10, 10, 0, 0, 4, 4);
        assert_eq!(a.iou(&a).unwrap(), 1.0);
        assert_eq!(a.iou(&rect(10, 10, 6, 6, 9, 9)).unwrap(), 0.0);
        assert_eq!(BinaryMask::new(3, 3).iou(&BinaryMask::new(3, 3)).unwrap(), 0.0);
        assert!(matches!(a.iou(&BinaryMask::new(9, 10)), Err(Error::Dimension(_))));
    }

    #[test]
    fn half_overlapping_rectangles_match_bit_count() {
        let a = rect(12, 8, 0, 0, 8, 8);
        let b = rect(12, 8, 4, 0, 12, 8);
        let inter = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count();
        let union = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x || **y).count();
        assert_eq!(a.iou(&b).unwrap(), inter as f64 / union as f64);
        assert_eq!(a.iou(&b).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn rle_text_form() {
        let m = rect(4, 2, 1, 0, 3, 1);
        let rle = m.to_rle();
        assert_eq!(rle.to_string(), "4 2; 1 2 5");
        let parsed: Rle = "4 2; 1 2 5".parse().unwrap();
        assert_eq!(parsed.decode().unwrap(), m);
        // starts with foreground: leading zero-length background run
        let full = BinaryMask::from_fn(2, 1, |_, _| true);
        assert_eq!(full.to_rle().to_string(), "2 1; 0 2");
        assert!("4 2; 1 2".parse::<Rle>().is_err());
    }

    #[test]
    fn tight_box_is_half_open() {
        let m = rect(10, 10, 2, 3, 5, 9);
        assert_eq!(m.tight_box().unwrap(), BBox::from_corners(2.0, 3.0, 5.0, 9.0));
        assert!(BinaryMask::new(2, 2).tight_box().is_none());
    }

    proptest! {
        #[test]
        fn rle_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let mut state = seed;
            let m = BinaryMask::from_fn(w, h, |_, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 61) & 1 == 1
            });
            let rle = m.to_rle();
            prop_assert_eq!(rle.runs.iter().map(|&r| r as usize).sum::<usize>(), w * h);
            let text = rle.to_string();
            prop_assert_eq!(text.parse::<Rle>().unwrap().decode().unwrap(), m);
        }

        #[test]
        fn mask_iou_symmetric(seed in any::<u64>()) {
            let mut state = seed;
            let mut next = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1); (state >> 62) == 0 };
            let a = BinaryMask::from_fn(7, 5, |_, _| next());
            let b = BinaryMask::from_fn(7, 5, |_, _| next());
            let (ab, ba) = (a.iou(&b).unwrap(), b.iou(&a).unwrap());
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
