use rand_core::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Deterministic xoshiro256++ stream seeded through splitmix64 expansion.
///
/// Single-owner state. Parallel work takes child generators from
/// [`Rng::derive`] rather than sharing one instance.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256PlusPlus,
    spare_normal: Option<f64>,
}

/// One splitmix64 step; used to derive child seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a purpose label and index into a base seed.
pub fn derive_seed(base: u64, purpose: &str, index: u64) -> u64 {
    let mut h = splitmix64(base);
    for b in purpose.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ splitmix64(index))
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent child stream for `(purpose, index)` of `base`.
    pub fn derive(base: u64, purpose: &str, index: u64) -> Self {
        Self::seed_from_u64(derive_seed(base, purpose, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Standard normal via Box–Muller; the second variate of each pair is cached.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Matrix of i.i.d. `N(0, stddev²)` entries drawn from `rng`.
pub fn gaussian_matrix(rows: usize, cols: usize, stddev: f64, rng: &mut Rng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Argument(format!(
            "gaussian_matrix extents must be positive, got {rows}x{cols}"
        )));
    }
    if !(stddev > 0.0 && stddev.is_finite()) {
        return Err(Error::Argument(format!("stddev must be positive, got {stddev}")));
    }
    let data = (0..rows * cols)
        .map(|_| stddev * rng.standard_normal())
        .collect();
    Ok(Matrix::from_parts(rows, cols, data))
}
