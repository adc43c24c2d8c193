//! Dense f64 tensors plus the reverse-mode graph, optimizer, and
//! finite-difference checker used by every trainable module.
//!
//! Everything runs in 64-bit precision so the gradient checks are meaningful;
//! the shapes involved are desk-scale, so throughput comes from the
//! auto-vectorized inner loops rather than threading. All kernels use a fixed
//! reduction order, which makes every forward/backward bit-deterministic.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod stack;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::{AdamConfig, AdamW};
pub use params::{ParamId, ParamSet};
pub use stack::{StackConfig, StackParams};

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major dense tensor of f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Gaussian init, the standard transformer weight initializer.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| gaussian(rng) * std).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor (a scalar/1-D tensor is treated as one row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.data.len(),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_2d(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "{what}: expected 2-D tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Box-Muller; keeps the dependency surface to `rand`'s core trait.
pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ── Fast transcendentals ─────────────────────────────────────────────────
//
// Softmax and GELU evaluate exp/tanh tens of thousands of times per frame
// batch, and scalar libm calls serialize that work. The core below is
// branch-free pure f64 arithmetic (range reduction, Taylor polynomial,
// power-of-two scaling through the exponent bits), so LLVM auto-vectorizes
// the slice-level loops. Accuracy is a few ulps — every tolerance in this
// crate treats the results as exact — and being libm-free the values are
// bit-identical on any platform.

const EXP_LO: f64 = -745.0; // exp underflows to 0 just below this
const EXP_HI: f64 = 709.7; // exp overflows just above this

/// exp(x) for x already clamped to [EXP_LO, EXP_HI]; branch-free.
#[inline(always)]
fn exp_core(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 0.6931471803691238;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let k = (x * LOG2E + 0.5).floor();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Degree-12 Taylor on |r| ≤ (ln 2)/2: remainder < 2e-16 relative.
    let mut p: f64 = 1.0 / 479_001_600.0;
    p = p.mul_add(r, 1.0 / 39_916_800.0);
    p = p.mul_add(r, 1.0 / 3_628_800.0);
    p = p.mul_add(r, 1.0 / 362_880.0);
    p = p.mul_add(r, 1.0 / 40_320.0);
    p = p.mul_add(r, 1.0 / 5_040.0);
    p = p.mul_add(r, 1.0 / 720.0);
    p = p.mul_add(r, 1.0 / 120.0);
    p = p.mul_add(r, 1.0 / 24.0);
    p = p.mul_add(r, 1.0 / 6.0);
    p = p.mul_add(r, 0.5);
    p = p.mul_add(r, 1.0);
    p = p.mul_add(r, 1.0);
    // 2^k in two halves so k down to −1075 stays inside the exponent field
    // and exp(709.x) does not overflow in the intermediate product.
    let ki = k as i64;
    let hi = ki >> 1;
    let lo = ki - hi;
    let s1 = f64::from_bits(((hi + 1023) as u64) << 52);
    let s2 = f64::from_bits(((lo + 1023) as u64) << 52);
    p * s1 * s2
}

/// exp(x) to ~2 ulp, with the usual overflow/underflow limits.
#[inline]
pub(crate) fn fexp(x: f64) -> f64 {
    if x >= 709.782_712_893_384 {
        return f64::INFINITY;
    }
    if x <= -745.133_219_101_941_1 {
        return 0.0;
    }
    exp_core(x)
}

/// In-place exp over a slice; saturates instead of overflowing to infinity.
#[inline]
pub(crate) fn vexp(xs: &mut [f64]) {
    for x in xs.iter_mut() {
        *x = exp_core((*x).clamp(EXP_LO, EXP_HI));
    }
}

/// tanh(x) to a few ulp; saturates to exactly ±1 for large |x| because
/// (e−1)/(e+1) rounds to 1 once e exceeds 2^54.
#[inline]
pub(crate) fn ftanh(x: f64) -> f64 {
    let e = exp_core((2.0 * x).clamp(-64.0, 64.0));
    (e - 1.0) / (e + 1.0)
}

/// In-place tanh over a slice.
#[inline]
pub(crate) fn vtanh(xs: &mut [f64]) {
    for x in xs.iter_mut() {
        *x = ftanh(*x);
    }
}

// ── Dense kernels ────────────────────────────────────────────────────────
//
// c += a·b with a: [m,k], b: [k,n]. The j-inner loop keeps every output
// element's accumulation order fixed while still vectorizing.

pub(crate) fn mm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Two output rows per sweep so each b-row load feeds two FMA streams.
    let m2 = m / 2 * 2;
    let mut i = 0;
    while i < m2 {
        let (c0, c1) = c[i * n..(i + 2) * n].split_at_mut(n);
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
            }
        }
        i += 2;
    }
    if i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    mm_acc(&mut c, a, b, m, k, n);
    c
}

/// c += a·bᵀ with a: [m,k], b: [n,k]. Transposes b into scratch first so
/// the inner loop is the same broadcast-FMA sweep as `mm_acc`; the dot-product
/// formulation stalls on one horizontal reduction per output element.
pub(crate) fn mm_abt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    mm_acc(c, a, &bt, m, k, n);
}

pub(crate) fn mm_abt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    mm_abt_acc(&mut c, a, b, m, k, n);
    c
}

/// c += aᵀ·b with a: [k,m], b: [k,n] (the weight-gradient kernel).
pub(crate) fn mm_atb_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_kernels_agree_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (5, 7, 3);
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let want = naive_mm(a.data(), b.data(), m, k, n);
        let got = mm(a.data(), b.data(), m, k, n);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // a·bᵀ with b stored [n,k]
        let bt: Vec<f64> = (0..n * k).map(|i| b.data()[(i % k) * n + i / k]).collect();
        let got2 = mm_abt(a.data(), &bt, m, k, n);
        for (x, y) in got2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ·b with a stored [k,m]
        let at: Vec<f64> = (0..k * m).map(|i| a.data()[(i % m) * k + i / m]).collect();
        let mut got3 = vec![0.0; m * n];
        mm_atb_acc(&mut got3, &at, b.data(), m, k, n);
        for (x, y) in got3.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            Tensor::randn(&[4, 4], 0.02, &mut r1),
            Tensor::randn(&[4, 4], 0.02, &mut r2)
        );
    }

    #[test]
    fn fexp_matches_libm_over_working_range() {
        let mut worst = 0.0f64;
        let mut x = -700.0;
        while x <= 700.0 {
            let a = fexp(x);
            let b = x.exp();
            let rel = (a - b).abs() / b.max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            x += 0.137;
        }
        assert!(worst < 1e-14, "worst rel err {worst}");
        assert_eq!(fexp(0.0), 1.0);
        assert_eq!(fexp(-800.0), 0.0);
        assert_eq!(fexp(800.0), f64::INFINITY);
    }

    #[test]
    fn ftanh_matches_libm_and_saturates() {
        let mut worst = 0.0f64;
        let mut x = -18.0;
        while x <= 18.0 {
            let rel = (ftanh(x) - x.tanh()).abs() / x.tanh().abs().max(1e-12);
            worst = worst.max(rel);
            x += 0.0917;
        }
        assert!(worst < 1e-13, "worst rel err {worst}");
        assert_eq!(ftanh(25.0), 1.0);
        assert_eq!(ftanh(-25.0), -1.0);
        assert_eq!(ftanh(0.0), 0.0);
    }
}
