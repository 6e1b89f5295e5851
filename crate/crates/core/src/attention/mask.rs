use crate::error::{Error, Result};

/// Largest `n·T` accepted by [`build_masks`]; each mask holds `(n·T)²` flags.
pub const MAX_MASK_POSITIONS: usize = 4096;

/// Same-variable mask and its complement over time-major positions
/// `a = t·n + i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPair {
    pub n: usize,
    pub t: usize,
    /// Row-major `nT × nT`; `gamma[a·nT + b]` iff `a mod n == b mod n`.
    pub gamma: Vec<bool>,
    pub complement: Vec<bool>,
}

impl MaskPair {
    /// Number of positions `n·T`.
    pub fn size(&self) -> usize {
        self.n * self.t
    }

    pub fn gamma_at(&self, a: usize, b: usize) -> bool {
        self.gamma[a * self.size() + b]
    }

    pub fn complement_at(&self, a: usize, b: usize) -> bool {
        self.complement[a * self.size() + b]
    }

    /// The complement branch has no support when there is one variable.
    pub fn has_complement(&self) -> bool {
        self.n > 1
    }
}

pub fn build_masks(n: usize, t: usize) -> Result<MaskPair> {
    build_masks_capped(n, t, MAX_MASK_POSITIONS)
}

pub fn build_masks_capped(n: usize, t: usize, cap: usize) -> Result<MaskPair> {
    if n == 0 || t == 0 {
        return Err(Error::invalid("build_masks", format!("need n, T >= 1, got n={n}, T={t}")));
    }
    let size = n
        .checked_mul(t)
        .filter(|&s| s <= cap)
        .ok_or_else(|| {
            Error::invalid("build_masks", format!("n·T = {n}·{t} exceeds the cap of {cap} positions"))
        })?;
    let mut gamma = Vec::with_capacity(size * size);
    for a in 0..size {
        gamma.extend((0..size).map(|b| a % n == b % n));
    }
    let complement = gamma.iter().map(|&g| !g).collect();
    Ok(MaskPair { n, t, gamma, complement })
}
