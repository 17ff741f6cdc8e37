//! Low-precision copy of the index rows, used to rule out most of the pool
//! before the exact pass.
//!
//! Rows and the query are quantized to 12-bit codes, each against its own
//! largest magnitude. With `x̂`, `q̂` the dequantized vectors,
//!
//! ```text
//! |x·q − x̂·q̂| ≤ ‖x − x̂‖·‖q‖ + ‖x̂‖·‖q − q̂‖
//! ```
//!
//! and both residual norms are known exactly, so the integer dot product
//! gives a rigorous interval for every cosine.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use super::{dot, SIMILARITY_RESOLUTION};

const LEVELS: f64 = 2047.0;

/// Above this the `i32` accumulator could overflow (2047² · 512 < 2³¹).
pub(super) const MAX_DIM: usize = 512;

#[derive(Debug, Clone, Default, PartialEq)]
pub(super) struct Sketch {
    codes: Vec<i16>,
    /// Value of one code step, per row.
    unit: Vec<f64>,
    /// `‖x − x̂‖` per row.
    residual: Vec<f64>,
    /// `‖x̂‖` per row.
    approx_norm: Vec<f64>,
}

/// Codes, unit, `‖v − v̂‖`, `‖v̂‖`.
fn quantize(v: &[f64]) -> (Vec<i16>, f64, f64, f64) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let unit = max / LEVELS;
    let (mut res, mut norm) = (0.0, 0.0);
    let codes = v
        .iter()
        .map(|&x| {
            let c = if unit > 0.0 {
                (x / unit).round().clamp(-LEVELS, LEVELS)
            } else {
                0.0
            };
            let back = c * unit;
            res += (x - back) * (x - back);
            norm += back * back;
            c as i16
        })
        .collect();
    (codes, unit, res.sqrt(), norm.sqrt())
}

impl Sketch {
    pub(super) fn new(rows: &[f64], dim: usize) -> Self {
        if dim == 0 || dim > MAX_DIM {
            return Self::default();
        }
        let n = rows.len() / dim;
        let mut out = Self {
            codes: Vec::with_capacity(rows.len()),
            unit: Vec::with_capacity(n),
            residual: Vec::with_capacity(n),
            approx_norm: Vec::with_capacity(n),
        };
        for row in rows.chunks_exact(dim) {
            let (codes, unit, residual, approx_norm) = quantize(row);
            out.codes.extend(codes);
            out.unit.push(unit);
            out.residual.push(residual);
            out.approx_norm.push(approx_norm);
        }
        out
    }

    pub(super) fn is_empty(&self) -> bool {
        self.unit.is_empty()
    }

    /// Row indices whose snapped similarity to the query `q` could rank
    /// among the top `take`. Always a superset of the true top `take`.
    pub(super) fn candidates(&self, q: &[f64], take: usize) -> Vec<usize> {
        let n = self.unit.len();
        let (qcodes, v, q_residual, _) = quantize(q);
        let q_norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dots = int_dots(&self.codes, &qcodes, n);

        // Upper bounds per row; the `take` largest lower bounds in a min-heap.
        let mut hi = vec![0.0; n];
        let mut best: BinaryHeap<Reverse<Bound>> = BinaryHeap::with_capacity(take + 1);
        let mut floor = f64::NEG_INFINITY;
        let rows = dots
            .iter()
            .zip(&self.unit)
            .zip(&self.residual)
            .zip(&self.approx_norm);
        for ((((&d, &unit), &residual), &approx_norm), h) in rows.zip(&mut hi) {
            let approx = unit * v * d as f64;
            // Relative slack covers rounding in the bound itself; the grid
            // term covers snapping.
            let e = (residual * q_norm + approx_norm * q_residual) * (1.0 + 1e-6)
                + SIMILARITY_RESOLUTION
                + 1e-12;
            *h = approx + e;
            let lo = approx - e;
            if lo > floor || best.len() < take {
                if best.len() == take {
                    best.pop();
                }
                best.push(Reverse(Bound(lo)));
                if best.len() == take {
                    floor = best.peek().map_or(floor, |Reverse(b)| b.0);
                }
            }
        }
        let cut = if take == 0 { f64::INFINITY } else { floor };
        hi.iter()
            .enumerate()
            .filter(|(_, &h)| h >= cut)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bound(f64);

impl Eq for Bound {}

impl PartialOrd for Bound {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Bound {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Eight codes as one SSE register. `p` must point at eight readable codes.
#[cfg(target_arch = "x86_64")]
#[inline(always)]
unsafe fn load(p: *const i16) -> std::arch::x86_64::__m128i {
    // A plain value read; `_mm_loadu_si128` goes through a checked copy
    // when debug assertions are on.
    unsafe { std::mem::transmute::<[i16; 8], std::arch::x86_64::__m128i>(*(p as *const [i16; 8])) }
}

/// `q · row` for each of the `n` rows packed in `codes`. Codes lie in ±2047
/// and rows are at most `MAX_DIM` long, so no partial sum leaves the i32
/// range.
#[cfg(target_arch = "x86_64")]
fn int_dots(codes: &[i16], q: &[i16], n: usize) -> Vec<i32> {
    use std::arch::x86_64::{
        __m128i, _mm_add_epi32, _mm_madd_epi16, _mm_setzero_si128, _mm_storeu_si128,
    };
    let dim = q.len();
    assert!(codes.len() >= n * dim);
    let wide = dim / 16 * 16;
    let mut out = vec![0i32; n];
    // One pass over the whole matrix with plain pointer offsets, so that
    // the speed does not depend on debug assertions being enabled.
    // SAFETY: SSE2 is part of the x86-64 baseline; row `r` spans
    // `r*dim..(r+1)*dim`, inside `codes` by the assertion above, and every
    // load stays within its row.
    unsafe {
        let (qp, mut row) = (q.as_ptr(), codes.as_ptr());
        let mut dst = out.as_mut_ptr();
        let stop = dst.wrapping_add(n);
        while dst < stop {
            let (mut lo, mut hi) = (_mm_setzero_si128(), _mm_setzero_si128());
            let mut j = 0;
            while j < wide {
                let x0 = load(row.wrapping_add(j));
                let y0 = load(qp.wrapping_add(j));
                let x1 = load(row.wrapping_add(j + 8));
                let y1 = load(qp.wrapping_add(j + 8));
                lo = _mm_add_epi32(lo, _mm_madd_epi16(x0, y0));
                hi = _mm_add_epi32(hi, _mm_madd_epi16(x1, y1));
                j += 16;
            }
            let mut lanes = [0i32; 4];
            _mm_storeu_si128(lanes.as_mut_ptr() as *mut __m128i, _mm_add_epi32(lo, hi));
            let mut sum = lanes[0] + lanes[1] + lanes[2] + lanes[3];
            while j < dim {
                sum += *row.wrapping_add(j) as i32 * *qp.wrapping_add(j) as i32;
                j += 1;
            }
            *dst = sum;
            dst = dst.wrapping_add(1);
            row = row.wrapping_add(dim);
        }
    }
    out
}

#[cfg(not(target_arch = "x86_64"))]
fn int_dots(codes: &[i16], q: &[i16], n: usize) -> Vec<i32> {
    let dim = q.len();
    (0..n)
        .map(|r| {
            let row = &codes[r * dim..(r + 1) * dim];
            row.iter().zip(q).map(|(&x, &y)| x as i32 * y as i32).sum()
        })
        .collect()
}

/// Exact dot products for the given rows.
pub(super) fn exact(rows: &[f64], dim: usize, q: &[f64], which: &[usize]) -> Vec<f64> {
    which
        .iter()
        .map(|&i| dot(&rows[i * dim..(i + 1) * dim], q))
        .collect()
}
