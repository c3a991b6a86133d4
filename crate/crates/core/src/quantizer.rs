//! Symmetric uniform INT-B number systems with per-output-channel scales, and
//! the two rounding rules onto them: rounding-to-nearest and Bernoulli
//! stochastic rounding.
//!
//! Channel `c` of a weight matrix `W: [C × D_in]` gets the grid
//! `{ m · s_c : |m| ≤ 2^(B-1) − 1 }` with `s_c = max_j |W[c, j]| / (2^(B-1) − 1)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// Largest representable code magnitude, `2^(B-1) − 1`.
pub fn max_code(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

pub fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "bit width must be in [{MIN_BITS}, {MAX_BITS}], got {bits}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantGridSet {
    bits: u8,
    scales: Vec<f32>,
}

impl QuantGridSet {
    pub fn new(bits: u8, scales: Vec<f32>) -> Result<Self> {
        check_bits(bits)?;
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::Config(format!("invalid channel scale {s}")));
        }
        Ok(Self { bits, scales })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn channels(&self) -> usize {
        self.scales.len()
    }

    pub fn max_code(&self) -> i32 {
        max_code(self.bits)
    }
}

/// Per-channel absmax grids for a `[C × D_in]` weight matrix.
pub fn build_grids(w: &Tensor, bits: u8) -> Result<QuantGridSet> {
    check_bits(bits)?;
    let &[_, _] = w.shape() else {
        return Err(Error::Dimension(format!(
            "per-channel grids need a 2-D weight, got {:?}",
            w.shape()
        )));
    };
    if !w.is_finite() {
        return Err(Error::Data("weights contain non-finite values".into()));
    }
    let qmax = max_code(bits) as f32;
    let scales = w
        .rows()
        .map(|row| row.iter().fold(0.0f32, |m, v| m.max(v.abs())) / qmax)
        .collect();
    QuantGridSet::new(bits, scales)
}

/// Codes of the grid points bracketing `w`: `(floor, ceil)`, equal when `w`
/// is exactly representable. Requires `scale > 0`.
fn bracket_codes(w: f32, scale: f32) -> (i32, i32) {
    let value = |m: i32| m as f32 * scale;
    let mut lo = (w / scale).floor() as i32;
    while value(lo) > w {
        lo -= 1;
    }
    while value(lo + 1) <= w {
        lo += 1;
    }
    if value(lo) == w {
        (lo, lo)
    } else {
        (lo, lo + 1)
    }
}

fn clamp_to_grid(w: f32, scale: f32, qmax: i32) -> f32 {
    let top = qmax as f32 * scale;
    w.clamp(-top, top)
}

/// Neighbouring grid values `(⌊w⌋, ⌈w⌉)` on a grid of resolution `scale`.
/// A zero scale is the degenerate all-zero grid.
pub fn floor_ceil(w: f32, scale: f32) -> (f32, f32) {
    if scale == 0.0 {
        return (0.0, 0.0);
    }
    let (lo, hi) = bracket_codes(w, scale);
    (lo as f32 * scale, hi as f32 * scale)
}

/// Integer codes plus the grids they index.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<i8>,
    grids: QuantGridSet,
    shape: [usize; 2],
}

impl QuantizedTensor {
    pub fn new(codes: Vec<i8>, grids: QuantGridSet, shape: [usize; 2]) -> Result<Self> {
        if shape[0] != grids.channels() || codes.len() != shape[0] * shape[1] {
            return Err(Error::Dimension(format!(
                "{} codes and {} channels for shape {shape:?}",
                codes.len(),
                grids.channels()
            )));
        }
        let qmax = grids.max_code();
        if let Some(c) = codes.iter().find(|&&c| (c as i32).abs() > qmax) {
            return Err(Error::Data(format!(
                "code {c} not representable in {} bits",
                grids.bits()
            )));
        }
        Ok(Self {
            codes,
            grids,
            shape,
        })
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn grids(&self) -> &QuantGridSet {
        &self.grids
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

fn check_grids(w: &Tensor, grids: &QuantGridSet) -> Result<[usize; 2]> {
    match *w.shape() {
        [c, d] if c == grids.channels() => Ok([c, d]),
        ref s => Err(Error::Dimension(format!(
            "weight {s:?} does not match grids with {} channels",
            grids.channels()
        ))),
    }
}

fn quantize_with(
    w: &Tensor,
    grids: &QuantGridSet,
    pick: impl Fn(usize, f32, f32, i32, i32) -> i32 + Sync,
) -> Result<QuantizedTensor> {
    let shape = check_grids(w, grids)?;
    let qmax = grids.max_code();
    let cols = shape[1];
    let mut codes = vec![0i8; w.len()];
    codes
        .par_chunks_mut(cols)
        .zip(w.data().par_chunks(cols))
        .zip(grids.scales().par_iter())
        .enumerate()
        .for_each(|(c, ((out, row), &scale))| {
            if scale == 0.0 {
                return;
            }
            for (j, (code, &v)) in out.iter_mut().zip(row).enumerate() {
                let v = clamp_to_grid(v, scale, qmax);
                let (lo, hi) = bracket_codes(v, scale);
                let m = if lo == hi {
                    lo
                } else {
                    pick(c * cols + j, v, scale, lo, hi)
                };
                *code = m.clamp(-qmax, qmax) as i8;
            }
        });
    QuantizedTensor::new(codes, grids.clone(), shape)
}

/// Rounding to the nearest grid point; exact ties go away from zero.
pub fn rtn(w: &Tensor, grids: &QuantGridSet) -> Result<QuantizedTensor> {
    quantize_with(w, grids, |_, v, scale, lo, hi| {
        let d_lo = v as f64 - (lo as f32 * scale) as f64;
        let d_hi = (hi as f32 * scale) as f64 - v as f64;
        if d_lo < d_hi {
            lo
        } else if d_hi < d_lo || v > 0.0 {
            hi
        } else {
            lo
        }
    })
}

/// Bernoulli stochastic rounding: the ceiling is taken with probability
/// `(w − ⌊w⌋) / (⌈w⌉ − ⌊w⌋)`, so the dequantized value is unbiased.
///
/// Entry `k` (row-major) always consumes position `k` of `rng`.
pub fn bsr_sample(w: &Tensor, grids: &QuantGridSet, rng: &CounterRng) -> Result<QuantizedTensor> {
    quantize_with(w, grids, |k, v, scale, lo, hi| {
        let lo_v = (lo as f32 * scale) as f64;
        let hi_v = (hi as f32 * scale) as f64;
        let p_ceil = (v as f64 - lo_v) / (hi_v - lo_v);
        if rng.uniform(k as u64) < p_ceil {
            hi
        } else {
            lo
        }
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let cols = q.shape[1];
    let data = q
        .codes
        .chunks_exact(cols)
        .zip(q.grids.scales())
        .flat_map(|(row, &s)| row.iter().map(move |&m| m as f32 * s))
        .collect();
    Tensor::new(q.shape.to_vec(), data).expect("codes match shape")
}
