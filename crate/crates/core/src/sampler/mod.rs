//! Reverse-time samplers for the latent prior: ancestral (AS), reverse SDE
//! by Euler–Maruyama (RD), and the probability-flow ODE by Euler (PF).
//!
//! RD and PF treat step `i` as the interval `(i−1, i]` with constant rate
//! `β_i = −ln(1 − σ_i²)`, so their refinement limit reproduces the discrete
//! marginals exactly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, Scorer};
use crate::error::{Error, Result};
use crate::numeric::{NoiseSource, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    As,
    Rd,
    Pf,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 3] = [SamplerKind::As, SamplerKind::Rd, SamplerKind::Pf];

    pub fn tag(self) -> &'static str {
        match self {
            SamplerKind::As => "AS",
            SamplerKind::Rd => "RD",
            SamplerKind::Pf => "PF",
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "as" => Ok(SamplerKind::As),
            "rd" => Ok(SamplerKind::Rd),
            "pf" => Ok(SamplerKind::Pf),
            _ => Err(Error::invalid("sampler", format!("unknown sampler `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    /// Diffusion steps walked back; `None` means the schedule's `N`.
    pub steps: Option<usize>,
    /// Euler sub-steps per diffusion step (RD and PF).
    pub substeps: usize,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            kind: SamplerKind::As,
            steps: None,
            substeps: 1,
        }
    }
}

impl SamplerSpec {
    pub fn new(kind: SamplerKind, substeps: usize) -> Self {
        SamplerSpec {
            kind,
            steps: None,
            substeps,
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<usize> {
        if self.substeps == 0 {
            return Err(Error::invalid("sampler", "sub-steps must be at least 1"));
        }
        let steps = self.steps.unwrap_or(sched.steps());
        if steps == 0 || steps > sched.steps() {
            return Err(Error::invalid(
                "sampler",
                format!("steps {steps} outside 1..={}", sched.steps()),
            ));
        }
        Ok(steps)
    }
}

/// `z_{i−1} = (z_i + σ_i² s(z_i, i)) / √(1 − σ_i²) + σ_i ε`, noise dropped at
/// `i = 1`.
pub fn ancestral_step(
    scorer: Scorer<'_>,
    sched: &NoiseSchedule,
    z: &Tensor,
    i: usize,
    noise: &mut dyn NoiseSource,
) -> Result<Tensor> {
    sched.check_step("ancestral_step", i)?;
    let s2 = sched.sigma_sq(i);
    let s = scorer.eval_at(z, i as f64)?;
    let c = 1.0 / (1.0 - s2).sqrt();
    let mean = z.zip_map(&s, |z, s| (z + s2 * s) * c)?;
    if i == 1 {
        return Ok(mean);
    }
    let eps = noise.normal(z.shape());
    let sd = s2.sqrt();
    mean.zip_map(&eps, |m, e| m + sd * e)
}

/// Euler–Maruyama from `t = i` to `t = i − 1`:
/// `z ← z + (½β z + β s) h + √(β h) ε` with `h = 1 / substeps`.
pub fn reverse_sde_step(
    scorer: Scorer<'_>,
    sched: &NoiseSchedule,
    z: &Tensor,
    i: usize,
    noise: &mut dyn NoiseSource,
    substeps: usize,
) -> Result<Tensor> {
    sched.check_step("reverse_sde_step", i)?;
    if substeps == 0 {
        return Err(Error::invalid("reverse_sde_step", "sub-steps must be at least 1"));
    }
    let beta = sched.beta(i);
    let h = 1.0 / substeps as f64;
    let sd = (beta * h).sqrt();
    let mut z = z.clone();
    for j in 0..substeps {
        let t = i as f64 - j as f64 * h;
        let s = scorer.eval_at(&z, t)?;
        let drift = z.zip_map(&s, |z, s| z + (0.5 * beta * z + beta * s) * h)?;
        let eps = noise.normal(z.shape());
        z = drift.zip_map(&eps, |d, e| d + sd * e)?;
    }
    Ok(z)
}

/// Euler on `dz/dt = −½β (z + s)` from `t = i` to `t = i − 1`; draws no noise.
pub fn probability_flow_step(
    scorer: Scorer<'_>,
    sched: &NoiseSchedule,
    z: &Tensor,
    i: usize,
    substeps: usize,
) -> Result<Tensor> {
    sched.check_step("probability_flow_step", i)?;
    if substeps == 0 {
        return Err(Error::invalid("probability_flow_step", "sub-steps must be at least 1"));
    }
    let beta = sched.beta(i);
    let h = 1.0 / substeps as f64;
    let mut z = z.clone();
    for j in 0..substeps {
        let t = i as f64 - j as f64 * h;
        let s = scorer.eval_at(&z, t)?;
        z = z.zip_map(&s, |z, s| z + 0.5 * beta * (z + s) * h)?;
    }
    Ok(z)
}

fn step(
    scorer: Scorer<'_>,
    sched: &NoiseSchedule,
    spec: &SamplerSpec,
    z: &Tensor,
    i: usize,
    noise: &mut dyn NoiseSource,
) -> Result<Tensor> {
    match spec.kind {
        SamplerKind::As => ancestral_step(scorer, sched, z, i, noise),
        SamplerKind::Rd => reverse_sde_step(scorer, sched, z, i, noise, spec.substeps),
        SamplerKind::Pf => probability_flow_step(scorer, sched, z, i, spec.substeps),
    }
}

/// Walks `z_start` (taken to sit at step `start`) back to step 0.
pub fn denoise_from(
    scorer: Scorer<'_>,
    sched: &NoiseSchedule,
    spec: &SamplerSpec,
    z_start: &Tensor,
    start: usize,
    noise: &mut dyn NoiseSource,
) -> Result<Tensor> {
    spec.validate(sched)?;
    if start > sched.steps() {
        return Err(Error::invalid("denoise", format!("start step {start} beyond N")));
    }
    let mut z = z_start.clone();
    for i in (1..=start).rev() {
        z = step(scorer, sched, spec, &z, i, noise)?;
    }
    Ok(z)
}

/// Draws `count` latents: `z_N ~ N(0, I)` then the chosen reverse chain.
pub fn sample_prior(
    scorer: Scorer<'_>,
    sched: &NoiseSchedule,
    spec: &SamplerSpec,
    noise: &mut dyn NoiseSource,
    count: usize,
) -> Result<Tensor> {
    let start = spec.validate(sched)?;
    let z = noise.normal(&[count, scorer.f.latent_dim()]);
    denoise_from(scorer, sched, spec, &z, start, noise)
}

/// [`sample_prior`] keeping every intermediate state, from step `N` down to 0.
pub fn sample_trajectory(
    scorer: Scorer<'_>,
    sched: &NoiseSchedule,
    spec: &SamplerSpec,
    noise: &mut dyn NoiseSource,
    count: usize,
) -> Result<Vec<(usize, Tensor)>> {
    let start = spec.validate(sched)?;
    let mut z = noise.normal(&[count, scorer.f.latent_dim()]);
    let mut path = vec![(start, z.clone())];
    for i in (1..=start).rev() {
        z = step(scorer, sched, spec, &z, i, noise)?;
        path.push((i - 1, z.clone()));
    }
    Ok(path)
}

/// CSV rows `sample,step,z0,z1,..` for a trajectory.
pub fn write_trajectory_csv(out: &mut impl Write, path: &[(usize, Tensor)]) -> Result<()> {
    let k = path.first().map_or(0, |(_, z)| z.shape()[1]);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample".to_string(), "step".to_string()];
    header.extend((0..k).map(|j| format!("z{j}")));
    w.write_record(&header).map_err(crate::attention::csv_io)?;
    for (i, z) in path {
        for (b, row) in z.data().chunks(k.max(1)).enumerate() {
            let mut rec = vec![b.to_string(), i.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(crate::attention::csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}
