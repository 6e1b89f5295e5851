use std::f64::consts::TAU;

use super::series::RawSeries;
use crate::numeric::Rng;

const SLOW_PERIOD: usize = 24;
const FAST_PERIOD: usize = 8;

/// `n` phase-shifted mixtures of a period-24 and a period-8 sinusoid with
/// additive Gaussian noise. Variable names are `v0..`, target `v0`.
///
/// Phases are taken from `t mod period` so that noise-free output repeats
/// exactly. `n` or `len` of zero is clamped to one.
pub fn synth_sinusoids(rng: &mut Rng, n: usize, len: usize, noise_std: f64) -> RawSeries {
    let n = n.max(1);
    let len = len.max(1);
    let shape: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|i| {
            let phase = TAU * i as f64 / n as f64 + 0.5 * rng.uniform();
            let fast_phase = TAU * rng.uniform();
            let amp = 1.0 + 0.5 * rng.uniform();
            let fast_amp = 0.3 + 0.4 * rng.uniform();
            (phase, fast_phase, amp, fast_amp)
        })
        .collect();
    let noise_std = if noise_std.is_finite() { noise_std.max(0.0) } else { 0.0 };
    let values = (0..len)
        .map(|t| {
            let slow = TAU * (t % SLOW_PERIOD) as f64 / SLOW_PERIOD as f64;
            let fast = TAU * (t % FAST_PERIOD) as f64 / FAST_PERIOD as f64;
            shape
                .iter()
                .map(|&(p, q, a, b)| {
                    let clean = a * (slow + p).sin() + b * (fast + q).sin();
                    if noise_std > 0.0 {
                        clean + noise_std * rng.standard_normal()
                    } else {
                        clean
                    }
                })
                .collect()
        })
        .collect();
    RawSeries::new(
        (0..n).map(|i| format!("v{i}")).collect(),
        (0..len).map(|t| t as f64).collect(),
        values,
        "v0",
    )
    .expect("synthetic series is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_target() {
        let s = synth_sinusoids(&mut Rng::new(3), 4, 512, 0.1);
        assert_eq!((s.len(), s.n_vars()), (512, 4));
        assert_eq!(s.target_index(), 0);
    }

    #[test]
    fn noise_free_is_periodic() {
        let s = synth_sinusoids(&mut Rng::new(3), 3, 200, 0.0);
        for t in 0..200 - 24 {
            assert_eq!(s.values[t], s.values[t + 24]);
        }
    }

    #[test]
    fn seeded() {
        let a = synth_sinusoids(&mut Rng::new(9), 2, 50, 0.2);
        let b = synth_sinusoids(&mut Rng::new(9), 2, 50, 0.2);
        let c = synth_sinusoids(&mut Rng::new(10), 2, 50, 0.2);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
