//! Dense row-major `f64` arrays and the raw kernels the autodiff graph is built on.

use std::fmt;

use crate::error::{Error, Result};

/// A dense, row-major n-dimensional array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("shape {shape:?} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        Ok(Tensor {
            shape: vec![c, r],
            data: transpose(&self.data, r, c),
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let head: Vec<_> = self.data.iter().take(PREVIEW).collect();
        write!(f, " {head:?}")?;
        if self.data.len() > PREVIEW {
            write!(f, " ..")?;
        }
        Ok(())
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut tmp = vec![0.0; ROW_BLOCK * n];
    for i in (0..m).step_by(ROW_BLOCK) {
        let rows = ROW_BLOCK.min(m - i);
        rows_mul(&a[i * k..(i + rows) * k], b, &mut tmp, rows, k, n);
        for (o, t) in out[i * n..(i + rows) * n].iter_mut().zip(&tmp) {
            *o += t;
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in (0..m).step_by(ROW_BLOCK) {
        let rows = ROW_BLOCK.min(m - i);
        rows_mul_nt(&a[i * k..(i + rows) * k], b, &mut out[i * n..(i + rows) * n], rows, k, n);
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in (0..k).step_by(ROW_BLOCK) {
        let rows = ROW_BLOCK.min(k - p);
        rows_mul_tn(&a[p * m..(p + rows) * m], &b[p * n..(p + rows) * n], out, rows, m, n);
    }
}

#[inline(always)]
fn dot_generic(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

const LOG2_E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
/// Adding 1.5·2^52 rounds to the nearest integer and leaves it in the low mantissa bits.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

/// `exp(x)` for `x ≤ 0`, branch-free so that loops over it vectorize.
/// Arguments below -708 are clamped, which returns ~3e-308 instead of
/// underflowing; NaN propagates.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    let x = if x < -708.0 { -708.0 } else { x };
    let t = x * LOG2_E + ROUND_MAGIC;
    let k = t - ROUND_MAGIC;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series to degree 12; |r| ≤ ln2/2 keeps the truncation below 1 ulp
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let ki = (t.to_bits() as i64).wrapping_sub(ROUND_MAGIC.to_bits() as i64);
    p * f64::from_bits(((ki + 1023) << 52) as u64)
}

#[inline(always)]
fn exp_shifted_generic(row: &mut [f64], shift: f64) {
    for x in row.iter_mut() {
        *x = exp_nonpositive(*x - shift);
    }
}

#[inline(always)]
fn sum_generic(x: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let mut chunks = x.chunks_exact(8);
    for c in &mut chunks {
        for l in 0..8 {
            acc[l] += c[l];
        }
    }
    let tail: f64 = chunks.remainder().iter().sum();
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

/// Largest element; NaNs are skipped (they still propagate through `exp`).
#[inline(always)]
fn max_generic(x: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; 8];
    let mut chunks = x.chunks_exact(8);
    for c in &mut chunks {
        for l in 0..8 {
            if c[l] > acc[l] {
                acc[l] = c[l];
            }
        }
    }
    let tail = chunks.remainder().iter().fold(f64::NEG_INFINITY, |m, &v| if v > m { v } else { m });
    acc.iter().fold(tail, |m, &v| if v > m { v } else { m })
}

/// Rows handled together by the blocked kernels below.
pub(crate) const ROW_BLOCK: usize = 4;

/// `out[R×n] = a[R×k] · bt[k×n]`.
#[inline(always)]
fn rows_mul_generic<const R: usize>(a: &[f64], bt: &[f64], out: &mut [f64], k: usize, n: usize) {
    let (a, bt, out) = (&a[..R * k], &bt[..k * n], &mut out[..R * n]);
    let full = n / 8 * 8;
    for j in (0..full).step_by(8) {
        let mut acc = [[0.0; 8]; R];
        for c in 0..k {
            let b: &[f64; 8] = bt[c * n + j..c * n + j + 8].try_into().unwrap();
            for r in 0..R {
                let x = a[r * k + c];
                for l in 0..8 {
                    acc[r][l] += x * b[l];
                }
            }
        }
        for r in 0..R {
            out[r * n + j..r * n + j + 8].copy_from_slice(&acc[r]);
        }
    }
    for j in full..n {
        for r in 0..R {
            let mut s = 0.0;
            for c in 0..k {
                s += a[r * k + c] * bt[c * n + j];
            }
            out[r * n + j] = s;
        }
    }
}

/// `out[R×m] += a[R×n] · b[m×n]ᵀ`.
#[inline(always)]
fn rows_mul_nt_generic<const R: usize>(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize) {
    let (a, b, out) = (&a[..R * n], &b[..m * n], &mut out[..R * m]);
    let full = n / 8 * 8;
    for c in 0..m {
        let bc = &b[c * n..(c + 1) * n];
        let mut acc = [[0.0; 8]; R];
        for j in (0..full).step_by(8) {
            let bb: &[f64; 8] = bc[j..j + 8].try_into().unwrap();
            for r in 0..R {
                let ar: &[f64; 8] = a[r * n + j..r * n + j + 8].try_into().unwrap();
                for l in 0..8 {
                    acc[r][l] += ar[l] * bb[l];
                }
            }
        }
        for r in 0..R {
            let x = &acc[r];
            let tail: f64 = (full..n).map(|j| a[r * n + j] * bc[j]).sum();
            out[r * m + c] += ((x[0] + x[4]) + (x[2] + x[6])) + ((x[1] + x[5]) + (x[3] + x[7])) + tail;
        }
    }
}

/// `out[k×n] += a[R×k]ᵀ · b[R×n]`.
#[inline(always)]
fn rows_mul_tn_generic<const R: usize>(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize) {
    let (a, b, out) = (&a[..R * k], &b[..R * n], &mut out[..k * n]);
    let full = n / 8 * 8;
    for c in 0..k {
        let coef: [f64; R] = std::array::from_fn(|r| a[r * k + c]);
        let o = &mut out[c * n..(c + 1) * n];
        for j in (0..full).step_by(8) {
            let dst: &mut [f64; 8] = (&mut o[j..j + 8]).try_into().unwrap();
            let mut acc = *dst;
            for r in 0..R {
                let br: &[f64; 8] = b[r * n + j..r * n + j + 8].try_into().unwrap();
                for l in 0..8 {
                    acc[l] += coef[r] * br[l];
                }
            }
            *dst = acc;
        }
        for j in full..n {
            for r in 0..R {
                o[j] += coef[r] * b[r * n + j];
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn max(x: &[f64]) -> f64 {
        super::max_generic(x)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn exp_shifted(row: &mut [f64], shift: f64) {
        super::exp_shifted_generic(row, shift)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn sum(x: &[f64]) -> f64 {
        super::sum_generic(x)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn dot(a: &[f64], b: &[f64]) -> f64 {
        super::dot_generic(a, b)
    }

    use std::arch::x86_64::*;

    #[target_feature(enable = "avx2,fma")]
    unsafe fn hsum(x: __m256d) -> f64 {
        let lo = _mm256_castpd256_pd128(x);
        let hi = _mm256_extractf128_pd(x, 1);
        let s = _mm_add_pd(lo, hi);
        _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)))
    }

    /// Four-row case of [`super::rows_mul_generic`]; other row counts use the generic code.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn rows_mul<const R: usize>(a: &[f64], bt: &[f64], out: &mut [f64], k: usize, n: usize) {
        if R != 4 {
            return super::rows_mul_generic::<R>(a, bt, out, k, n);
        }
        assert!(a.len() >= 4 * k && bt.len() >= k * n && out.len() >= 4 * n);
        let (a, bt, o) = (a.as_ptr(), bt.as_ptr(), out.as_mut_ptr());
        let full = n / 8 * 8;
        let mut j = 0;
        while j < full {
            let mut acc = [_mm256_setzero_pd(); 8];
            for c in 0..k {
                let b0 = _mm256_loadu_pd(bt.add(c * n + j));
                let b1 = _mm256_loadu_pd(bt.add(c * n + j + 4));
                for r in 0..4 {
                    let x = _mm256_set1_pd(*a.add(r * k + c));
                    acc[2 * r] = _mm256_fmadd_pd(x, b0, acc[2 * r]);
                    acc[2 * r + 1] = _mm256_fmadd_pd(x, b1, acc[2 * r + 1]);
                }
            }
            for r in 0..4 {
                _mm256_storeu_pd(o.add(r * n + j), acc[2 * r]);
                _mm256_storeu_pd(o.add(r * n + j + 4), acc[2 * r + 1]);
            }
            j += 8;
        }
        for j in full..n {
            for r in 0..4 {
                let mut s = 0.0;
                for c in 0..k {
                    s += *a.add(r * k + c) * *bt.add(c * n + j);
                }
                *o.add(r * n + j) = s;
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn rows_mul_nt<const R: usize>(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize) {
        if R != 4 {
            return super::rows_mul_nt_generic::<R>(a, b, out, n, m);
        }
        assert!(a.len() >= 4 * n && b.len() >= m * n && out.len() >= 4 * m);
        let (ap, bp, o) = (a.as_ptr(), b.as_ptr(), out.as_mut_ptr());
        let full = n / 8 * 8;
        for c in 0..m {
            let bc = bp.add(c * n);
            let mut acc = [_mm256_setzero_pd(); 8];
            let mut j = 0;
            while j < full {
                let b0 = _mm256_loadu_pd(bc.add(j));
                let b1 = _mm256_loadu_pd(bc.add(j + 4));
                for r in 0..4 {
                    let ar = ap.add(r * n + j);
                    acc[2 * r] = _mm256_fmadd_pd(_mm256_loadu_pd(ar), b0, acc[2 * r]);
                    acc[2 * r + 1] = _mm256_fmadd_pd(_mm256_loadu_pd(ar.add(4)), b1, acc[2 * r + 1]);
                }
                j += 8;
            }
            for r in 0..4 {
                let mut s = hsum(_mm256_add_pd(acc[2 * r], acc[2 * r + 1]));
                for j in full..n {
                    s += *ap.add(r * n + j) * *bc.add(j);
                }
                *o.add(r * m + c) += s;
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn rows_mul_tn<const R: usize>(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize) {
        if R != 4 {
            return super::rows_mul_tn_generic::<R>(a, b, out, k, n);
        }
        assert!(a.len() >= 4 * k && b.len() >= 4 * n && out.len() >= k * n);
        let (ap, bp, o) = (a.as_ptr(), b.as_ptr(), out.as_mut_ptr());
        let full = n / 8 * 8;
        for c in 0..k {
            let coef = [*ap.add(c), *ap.add(k + c), *ap.add(2 * k + c), *ap.add(3 * k + c)];
            let x = coef.map(|v| _mm256_set1_pd(v));
            let oc = o.add(c * n);
            let mut j = 0;
            while j < full {
                let mut o0 = _mm256_loadu_pd(oc.add(j));
                let mut o1 = _mm256_loadu_pd(oc.add(j + 4));
                for (r, &xr) in x.iter().enumerate() {
                    let br = bp.add(r * n + j);
                    o0 = _mm256_fmadd_pd(xr, _mm256_loadu_pd(br), o0);
                    o1 = _mm256_fmadd_pd(xr, _mm256_loadu_pd(br.add(4)), o1);
                }
                _mm256_storeu_pd(oc.add(j), o0);
                _mm256_storeu_pd(oc.add(j + 4), o1);
                j += 8;
            }
            for j in full..n {
                for (r, &cr) in coef.iter().enumerate() {
                    *oc.add(j) += cr * *bp.add(r * n + j);
                }
            }
        }
    }

    pub fn available() -> bool {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
}

/// Replaces every `x` in `row` by `exp(x - shift)`; requires `x ≤ shift`.
#[inline]
pub(crate) fn exp_shifted(row: &mut [f64], shift: f64) {
    #[cfg(target_arch = "x86_64")]
    if simd::available() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { simd::exp_shifted(row, shift) };
    }
    exp_shifted_generic(row, shift)
}

#[inline]
pub(crate) fn max(x: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if simd::available() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { simd::max(x) };
    }
    max_generic(x)
}

#[inline]
pub(crate) fn sum(x: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if simd::available() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { simd::sum(x) };
    }
    sum_generic(x)
}

/// Dot product over the common prefix of `a` and `b`.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if simd::available() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { simd::dot(a, b) };
    }
    dot_generic(a, b)
}

/// Runs `$kernel::<R>` for a row count known only at run time.
macro_rules! dispatch_rows {
    ($rows:expr, $simd:ident, $generic:ident, ($($arg:expr),*)) => {{
        #[cfg(target_arch = "x86_64")]
        if simd::available() {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe {
                return match $rows {
                    1 => simd::$simd::<1>($($arg),*),
                    2 => simd::$simd::<2>($($arg),*),
                    3 => simd::$simd::<3>($($arg),*),
                    4 => simd::$simd::<4>($($arg),*),
                    r => panic!("row block of {r} exceeds {ROW_BLOCK}"),
                };
            }
        }
        match $rows {
            1 => $generic::<1>($($arg),*),
            2 => $generic::<2>($($arg),*),
            3 => $generic::<3>($($arg),*),
            4 => $generic::<4>($($arg),*),
            r => panic!("row block of {r} exceeds {ROW_BLOCK}"),
        }
    }};
}

/// `out[rows×n] = a[rows×k] · bt[k×n]`, `rows ≤ ROW_BLOCK`.
pub(crate) fn rows_mul(a: &[f64], bt: &[f64], out: &mut [f64], rows: usize, k: usize, n: usize) {
    dispatch_rows!(rows, rows_mul, rows_mul_generic, (a, bt, out, k, n))
}

/// `out[rows×m] += a[rows×n] · b[m×n]ᵀ`, `rows ≤ ROW_BLOCK`.
pub(crate) fn rows_mul_nt(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, n: usize, m: usize) {
    dispatch_rows!(rows, rows_mul_nt, rows_mul_nt_generic, (a, b, out, n, m))
}

/// `out[k×n] += a[rows×k]ᵀ · b[rows×n]`, `rows ≤ ROW_BLOCK`.
pub(crate) fn rows_mul_tn(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, k: usize, n: usize) {
    dispatch_rows!(rows, rows_mul_tn, rows_mul_tn_generic, (a, b, out, k, n))
}
