use crate::attention::SIGMA_FLOOR;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Mlp, ParamStore, Rng, Tensor, Var};

const SIGMA_INIT_BIAS: f64 = -4.0;

/// Mean and diagonal-covariance networks of the dual reparameterization.
#[derive(Clone, Debug)]
pub struct FusionNets {
    /// Residual: `μ_f(s) = s + mlp(s)`.
    pub mu: Mlp,
    /// `Σ(s) = softplus(mlp(s)) + 1e−6`.
    pub sigma: Mlp,
    /// Step whose `σ²` sets the covariance scale.
    pub t_star: usize,
    pub latent_dim: usize,
}

impl FusionNets {
    pub fn new(store: &mut ParamStore, name: &str, k: usize, width: usize, t_star: usize, rng: &mut Rng) -> Result<Self> {
        let mu = Mlp::new(store, &format!("{name}.mu"), &[k, width, k], rng)?;
        let sigma = Mlp::new(store, &format!("{name}.sigma"), &[k, width, k], rng)?;
        // Start close to `z = s` with little noise: a small residual and
        // Σ ≈ softplus(−4) ≈ 0.018. Nothing is exactly zero, so every weight
        // still gets a gradient.
        let w = mu.layers.last().expect("two layers").weight;
        *store.get_mut(w) = store.get(w).scale(0.1);
        if let Some(b) = sigma.layers.last().and_then(|l| l.bias) {
            *store.get_mut(b) = Tensor::full(store.get(b).shape(), SIGMA_INIT_BIAS);
        }
        Ok(FusionNets {
            mu,
            sigma,
            t_star,
            latent_dim: k,
        })
    }

    /// `1 / √(1 − σ²_{t*})`.
    pub fn scale(&self, sched: &NoiseSchedule) -> Result<f64> {
        sched.check_step("fusion", self.t_star)?;
        Ok(1.0 / (1.0 - sched.sigma_sq(self.t_star)).sqrt())
    }

    pub fn mean(&self, g: &Graph, s: Var) -> Result<Var> {
        g.add(s, self.mu.forward(g, s)?)
    }

    pub fn covariance(&self, g: &Graph, s: Var) -> Result<Var> {
        g.add_scalar(g.softplus(self.sigma.forward(g, s)?)?, SIGMA_FLOOR)
    }
}

/// `z = μ_f(s) + √(scale · Σ(s)) ⊙ ε` with `s = z_θ + z_φ`.
pub fn dual_reparam_sample(
    g: &Graph,
    z_theta: Var,
    z_phi: Var,
    fusion: &FusionNets,
    sched: &NoiseSchedule,
    eps: &Tensor,
) -> Result<Var> {
    let (a, b) = (g.shape(z_theta), g.shape(z_phi));
    if a != b || a.len() != 2 || a[1] != fusion.latent_dim {
        return Err(Error::shape("dual_reparam_sample", &a, &b));
    }
    if eps.shape() != a.as_slice() {
        return Err(Error::shape("dual_reparam_sample", &a, eps.shape()));
    }
    let s = g.add(z_theta, z_phi)?;
    let mu = fusion.mean(g, s)?;
    let cov = fusion.covariance(g, s)?;
    let sd = g.sqrt(g.mul_scalar(cov, fusion.scale(sched)?)?)?;
    g.add(mu, g.mul(sd, g.input(eps.clone()))?)
}
