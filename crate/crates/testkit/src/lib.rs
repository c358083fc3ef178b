//! Reference oracles used by the test suites and the `gradcheck` command.
//!
//! Everything in this crate is written as plain, slow, f64 loop code with no
//! dependency on the production crate. The point is independence: when a test
//! compares the optimized implementation against these routines, agreement is
//! evidence that both are right, not that one copies the other.

pub mod band;
pub mod fd;
pub mod jacobi;
pub mod lossref;
pub mod naive;

/// Relative error with an absolute floor: |a - b| / max(1, |a|, |b|).
///
/// The floor makes the comparison absolute for small magnitudes, which is what
/// gradient checks need (a near-zero gradient with 1e-8 noise is fine).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Largest `rel_err` over two equally long slices.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_rel_err: length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Tiny deterministic generator (SplitMix64) so oracle inputs do not depend
/// on any external RNG crate.
#[derive(Clone)]
pub struct SplitMix64(pub u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}
