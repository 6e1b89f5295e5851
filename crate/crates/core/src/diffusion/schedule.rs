use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How σ² is spread between its endpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Linear,
}

/// Per-step weight of the score-matching residual `‖s − ∇log q(z_i | z_0)‖²`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `1 − ᾱ_i`; equal to the plain noise-prediction error.
    #[default]
    OneMinusAlphaBar,
    /// `σ_i²` (that is `g²`), the likelihood weighting; in noise-prediction
    /// form it reads `g² / (1 − ᾱ_i)`.
    Likelihood,
}

/// Everything needed to rebuild a schedule exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub sigma_sq_min: f64,
    pub sigma_sq_max: f64,
    pub interpolation: Interpolation,
    pub weighting: Weighting,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            steps: 50,
            sigma_sq_min: 1e-4,
            sigma_sq_max: 0.02,
            interpolation: Interpolation::Linear,
            weighting: Weighting::OneMinusAlphaBar,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let mut s = make_schedule(self.steps, self.sigma_sq_min, self.sigma_sq_max)?;
        s.weighting = self.weighting;
        Ok(s)
    }
}

/// Discrete variance-preserving schedule. Steps are numbered `1..=N`;
/// step 0 is the clean latent.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    sigma_sq: Vec<f64>,
    alpha_bar: Vec<f64>,
    pub weighting: Weighting,
    spec_min: f64,
    spec_max: f64,
}

/// `σ_i²` linear from `min` to `max` over `N` steps, `ᾱ_i = Π_{j≤i} (1 − σ_j²)`.
pub fn make_schedule(steps: usize, min: f64, max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("make_schedule", "need at least one step"));
    }
    if !(min > 0.0 && min < max && max < 1.0) {
        return Err(Error::invalid(
            "make_schedule",
            format!("need 0 < min < max < 1, got min={min}, max={max}"),
        ));
    }
    let sigma_sq: Vec<f64> = if steps == 1 {
        vec![min]
    } else {
        (0..steps)
            .map(|i| min + (max - min) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for s in &sigma_sq {
        acc *= 1.0 - s;
        alpha_bar.push(acc);
    }
    if !(acc > 0.0) || sigma_sq.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid(
            "make_schedule",
            "schedule is not strictly monotone in floating point",
        ));
    }
    Ok(NoiseSchedule {
        sigma_sq,
        alpha_bar,
        weighting: Weighting::default(),
        spec_min: min,
        spec_max: max,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.sigma_sq.len()
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            steps: self.steps(),
            sigma_sq_min: self.spec_min,
            sigma_sq_max: self.spec_max,
            interpolation: Interpolation::Linear,
            weighting: self.weighting,
        }
    }

    pub fn check_step(&self, op: &'static str, i: usize) -> Result<()> {
        if i == 0 || i > self.steps() {
            return Err(Error::invalid(
                op,
                format!("step {i} outside 1..={}", self.steps()),
            ));
        }
        Ok(())
    }

    pub fn sigma_sq_all(&self) -> &[f64] {
        &self.sigma_sq
    }

    pub fn alpha_bar_all(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `σ_i²` for `i` in `1..=N`.
    pub fn sigma_sq(&self, i: usize) -> f64 {
        self.sigma_sq[i - 1]
    }

    /// `ᾱ_i`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            self.alpha_bar[i - 1]
        }
    }

    /// The product `Π_{j≤i} σ_j²` as printed in some write-ups of this
    /// process. It is not a valid marginal coefficient: it collapses towards
    /// 0 after one step instead of decaying from 1. Kept only so the
    /// difference from [`alpha_bar`](Self::alpha_bar) can be shown.
    pub fn literal_alpha(&self, i: usize) -> f64 {
        self.sigma_sq[..i].iter().product()
    }

    /// `−ln(1 − σ_i²)`: the constant rate `β` on `(i−1, i]` whose
    /// continuous-time process has exactly the discrete marginals at integer
    /// times. Equal to `σ_i²` to first order.
    pub fn beta(&self, i: usize) -> f64 {
        -(-self.sigma_sq(i)).ln_1p()
    }

    /// `ᾱ(t)` for continuous `t ∈ [0, N]`, geometric within each step.
    pub fn alpha_bar_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.steps() as f64);
        if t == 0.0 {
            return 1.0;
        }
        let i = (t.ceil() as usize).max(1);
        let frac = t - (i - 1) as f64;
        self.alpha_bar(i - 1) * (1.0 - self.sigma_sq(i)).powf(frac)
    }

    /// Loss weight of step `i` under the configured [`Weighting`].
    pub fn weight(&self, i: usize) -> f64 {
        match self.weighting {
            Weighting::OneMinusAlphaBar => 1.0 - self.alpha_bar(i),
            Weighting::Likelihood => self.sigma_sq(i),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = make_schedule(1, 0.01, 0.5).unwrap();
        assert_eq!(s.sigma_sq_all(), &[0.01]);
        assert_eq!(s.alpha_bar_all(), &[0.99]);
    }

    #[test]
    fn default_schedule_matches_direct_product() {
        let s = ScheduleSpec::default().build().unwrap();
        assert_eq!(s.steps(), 50);
        for i in 1..=50 {
            let direct: f64 = (1..=i)
                .map(|j| 1.0 - (1e-4 + (0.02 - 1e-4) * (j - 1) as f64 / 49.0))
                .product();
            assert!((s.alpha_bar(i) - direct).abs() < 1e-12);
        }
        assert!(s.sigma_sq_all().windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bar_all().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn bad_bounds_rejected() {
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        assert!(make_schedule(10, 0.0, 0.5).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.1, f64::NAN).is_err());
    }

    #[test]
    fn continuous_alpha_hits_integer_steps() {
        let s = make_schedule(5, 0.01, 0.3).unwrap();
        for i in 0..=5 {
            assert!((s.alpha_bar_at(i as f64) - s.alpha_bar(i)).abs() < 1e-15);
        }
        assert!(s.alpha_bar_at(2.5) < s.alpha_bar(2) && s.alpha_bar_at(2.5) > s.alpha_bar(3));
        let b: f64 = (1..=5).map(|i| s.beta(i)).sum();
        assert!(((-b).exp() - s.alpha_bar(5)).abs() < 1e-14);
    }

    #[test]
    fn literal_alpha_disagrees() {
        let s = ScheduleSpec::default().build().unwrap();
        assert!(s.literal_alpha(1) < 1e-3);
        assert!(s.alpha_bar(1) > 0.999);
    }

    #[test]
    fn spec_round_trip() {
        let spec = ScheduleSpec {
            steps: 7,
            sigma_sq_min: 0.001,
            sigma_sq_max: 0.3,
            weighting: Weighting::Likelihood,
            ..Default::default()
        };
        let s = spec.build().unwrap();
        assert_eq!(s.spec(), spec);
        assert_eq!(spec.build().unwrap(), s);
    }
}
