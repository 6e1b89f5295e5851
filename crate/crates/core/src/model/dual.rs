//! The full model: encoder, score prior, dual fusion and decoder.

use serde::{Deserialize, Serialize};

use super::config::{Dims, ModelConfig, TrainConfig};
use super::decoder::Decoder;
use super::fusion::{dual_reparam_sample, FusionNets};
use super::prepare::{DataInfo, PreparedData};
use super::loss::{elbo_tail, posterior_sample, recon_term, LossReport, LossVars};
use crate::attention::Encoder;
use crate::data::{Batch, NormStats, SeriesWindow};
use crate::diffusion::{dsm_terms, DsmDraw, NoiseSchedule, ScoreFunction, ScoreNet, Scorer};
use crate::error::{Error, Result};
use crate::numeric::{Adam, Graph, NoiseSource, ParamStore, Rng, RowNoise, Tensor, Var};
use crate::sampler::denoise_from;

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
/// Forecast streams are `FORECAST_STREAM + origin`, far from the others.
const FORECAST_STREAM: u64 = 1 << 40;
const EVAL_BATCH: usize = 256;

/// Variable names and target of the series a model was fitted on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub names: Vec<String>,
    pub target: String,
}

impl SeriesMeta {
    pub fn anonymous(n: usize) -> Self {
        SeriesMeta {
            names: (0..n).map(|i| format!("v{i}")).collect(),
            target: "v0".into(),
        }
    }

    pub fn target_index(&self) -> usize {
        self.names.iter().position(|n| *n == self.target).unwrap_or(0)
    }
}

/// Every random draw one loss evaluation consumes.
///
/// Fixing these makes the loss a deterministic function of the parameters,
/// which is what gradient checks and descent tests need. `z_theta` is the
/// (non-differentiated) prior-chain output and is only used by dual models.
#[derive(Clone, Debug)]
pub struct LossDraws {
    pub eps_phi: Tensor,
    pub z_theta: Option<Tensor>,
    pub dsm: Option<DsmDraw>,
    pub eps_fusion: Option<Tensor>,
}

/// Forecast error on a set of windows, in normalized units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Target variable only.
    pub mse: f64,
    pub mae: f64,
    /// All variables.
    pub mse_all: f64,
    pub mae_all: f64,
    pub n_windows: usize,
}

#[derive(Clone, Debug)]
pub struct DualVdt {
    pub config: ModelConfig,
    pub dims: Dims,
    /// Seed the parameters were initialized from.
    pub init_seed: u64,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub score: Option<ScoreNet>,
    pub fusion: Option<FusionNets>,
    pub schedule: NoiseSchedule,
    /// Statistics that map original units to model units.
    pub norm: Option<NormStats>,
    pub meta: SeriesMeta,
    pub data: Option<DataInfo>,
}

impl DualVdt {
    pub fn new(config: ModelConfig, dims: Dims, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.n == 0 || dims.lookback == 0 || dims.horizon == 0 {
            return Err(Error::invalid("model", "n, lookback and horizon must be positive"));
        }
        let schedule = config.schedule.build()?;
        let k = config.latent_dim;
        let mut rng = Rng::with_stream(seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "encoder", &config.encoder, dims.n, dims.lookback, k, &mut rng)?;
        let decoder = Decoder::new(&mut store, "decoder", &config.encoder, dims.n, dims.horizon, k, &mut rng)?;
        let score = if config.score_prior {
            Some(ScoreNet::new(&mut store, "score", &config.score, k, schedule.clone(), &mut rng)?)
        } else {
            None
        };
        let fusion = if config.dual {
            Some(FusionNets::new(&mut store, "fusion", k, config.fusion_width, schedule.steps(), &mut rng)?)
        } else {
            None
        };
        Ok(DualVdt {
            meta: SeriesMeta::anonymous(dims.n),
            config,
            dims,
            init_seed: seed,
            store,
            encoder,
            decoder,
            score,
            fusion,
            schedule,
            norm: None,
            data: None,
        })
    }

    /// A fresh model sized for `data`, carrying its statistics and names.
    pub fn for_data(config: ModelConfig, data: &PreparedData, seed: u64) -> Result<Self> {
        let mut m = DualVdt::new(config, data.dims.clone(), seed)?;
        m.meta = data.meta.clone();
        m.norm = Some(data.norm.clone());
        m.data = Some(data.info);
        Ok(m)
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// `k/2 · ln(2πe σ_1²)`, the constant of the score-matching bound.
    pub fn prior_const(&self) -> f64 {
        if !self.config.score_prior {
            return 0.0;
        }
        let k = self.latent_dim() as f64;
        0.5 * k * (2.0 * std::f64::consts::PI * std::f64::consts::E * self.schedule.sigma_sq(1)).ln()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let d = &self.dims;
        let want_x = [batch.len(), d.lookback, d.n];
        let want_y = [batch.len(), d.horizon, d.n];
        if batch.x.shape() != want_x {
            return Err(Error::shape("model", batch.x.shape(), &want_x));
        }
        if batch.y.shape() != want_y {
            return Err(Error::shape("model", batch.y.shape(), &want_y));
        }
        Ok(())
    }

    /// Runs the prior's reverse chain from `z_start` at the sampler's first
    /// step down to 0. No gradient flows through this.
    pub fn prior_chain(&self, z_start: &Tensor, noise: &mut dyn NoiseSource) -> Result<Tensor> {
        let score = self
            .score
            .as_ref()
            .ok_or_else(|| Error::invalid("prior_chain", "model has no score prior"))?;
        let start = self.config.sampler.validate(&self.schedule)?;
        denoise_from(Scorer::new(score, &self.store), &self.schedule, &self.config.sampler, z_start, start, noise)
    }

    /// Loss on `batch`, drawing everything it needs from `rng` in a fixed
    /// order: posterior noise, prior-chain noise, DSM steps and noise,
    /// fusion noise.
    pub fn loss(&self, g: &Graph, batch: &Batch, rng: &mut Rng) -> Result<LossVars> {
        self.check_batch(batch)?;
        let (b, k) = (batch.len(), self.latent_dim());
        let eps_phi = rng.normal_tensor(&[b, k]);
        let (mu, sigma, z_phi) = posterior_sample(g, &self.encoder, &batch.x, &eps_phi)?;
        if !self.config.score_prior {
            return elbo_tail(g, &self.decoder, batch, mu, sigma, z_phi, self.config.loss_weights);
        }
        let z_theta = if self.config.dual {
            Some(self.prior_chain(&g.value(z_phi), rng)?)
        } else {
            None
        };
        let dsm = DsmDraw::sample(rng, &self.schedule, b, k);
        let eps_fusion = self.config.dual.then(|| rng.normal_tensor(&[b, k]));
        let net = self.score.as_ref().expect("score prior present");
        self.score_tail(g, batch, z_phi, net, &dsm, z_theta.as_ref(), eps_fusion.as_ref())
    }

    /// Draws exactly what [`loss`](Self::loss) would, without building a graph.
    pub fn sample_draws(&self, batch: &Batch, rng: &mut Rng) -> Result<LossDraws> {
        self.check_batch(batch)?;
        let (b, k) = (batch.len(), self.latent_dim());
        let eps_phi = rng.normal_tensor(&[b, k]);
        if !self.config.score_prior {
            return Ok(LossDraws {
                eps_phi,
                z_theta: None,
                dsm: None,
                eps_fusion: None,
            });
        }
        let z_theta = if self.config.dual {
            let g = Graph::inference(&self.store);
            let (_, _, z_phi) = posterior_sample(&g, &self.encoder, &batch.x, &eps_phi)?;
            Some(self.prior_chain(&g.value(z_phi), rng)?)
        } else {
            None
        };
        let dsm = DsmDraw::sample(rng, &self.schedule, b, k);
        let eps_fusion = self.config.dual.then(|| rng.normal_tensor(&[b, k]));
        Ok(LossDraws {
            eps_phi,
            z_theta,
            dsm: Some(dsm),
            eps_fusion,
        })
    }

    /// Loss with every random draw fixed.
    pub fn loss_with(&self, g: &Graph, batch: &Batch, draws: &LossDraws) -> Result<LossVars> {
        match &self.score {
            Some(net) => self.loss_with_score(g, batch, draws, net),
            None => self.loss_with_score(g, batch, draws, &crate::diffusion::ZeroScore(self.latent_dim())),
        }
    }

    /// [`loss_with`](Self::loss_with) with `score` standing in for the
    /// model's own score network in the denoising term.
    pub fn loss_with_score(
        &self,
        g: &Graph,
        batch: &Batch,
        draws: &LossDraws,
        score: &dyn ScoreFunction,
    ) -> Result<LossVars> {
        self.check_batch(batch)?;
        let (mu, sigma, z_phi) = posterior_sample(g, &self.encoder, &batch.x, &draws.eps_phi)?;
        if !self.config.score_prior {
            return elbo_tail(g, &self.decoder, batch, mu, sigma, z_phi, self.config.loss_weights);
        }
        let dsm = draws
            .dsm
            .as_ref()
            .ok_or_else(|| Error::invalid("loss", "score prior needs a DSM draw"))?;
        if self.config.dual && (draws.z_theta.is_none() || draws.eps_fusion.is_none()) {
            return Err(Error::invalid("loss", "dual fusion needs z_theta and fusion noise"));
        }
        self.score_tail(g, batch, z_phi, score, dsm, draws.z_theta.as_ref(), draws.eps_fusion.as_ref())
    }

    fn score_tail(
        &self,
        g: &Graph,
        batch: &Batch,
        z_phi: Var,
        score_fn: &dyn ScoreFunction,
        dsm: &DsmDraw,
        z_theta: Option<&Tensor>,
        eps_fusion: Option<&Tensor>,
    ) -> Result<LossVars> {
        let score = g.mean(dsm_terms(g, score_fn, z_phi, &self.schedule, dsm)?)?;
        let z = match (&self.fusion, z_theta, eps_fusion) {
            (Some(f), Some(zt), Some(eps)) => dual_reparam_sample(g, g.input(zt.clone()), z_phi, f, &self.schedule, eps)?,
            _ => z_phi,
        };
        let y_hat = self.decoder.forward(g, z)?;
        let recon = recon_term(g, y_hat, &batch.y, &batch.y_mask)?;
        let w = self.config.loss_weights;
        let total = g.add(g.mul_scalar(recon, w.recon)?, g.mul_scalar(score, w.score)?)?;
        Ok(LossVars {
            recon,
            score: Some(score),
            kl: None,
            total,
        })
    }

    pub fn report(&self, g: &Graph, vars: &LossVars) -> Result<LossReport> {
        vars.report(g, self.prior_const())
    }

    /// Fits the model on (already normalized) training windows. Returns the
    /// batch-size weighted mean loss of each epoch.
    pub fn train(&mut self, windows: &[SeriesWindow], cfg: &TrainConfig) -> Result<Vec<LossReport>> {
        self.train_with(windows, cfg, |_, _| {})
    }

    /// [`train`](Self::train) calling `on_epoch(epoch, report)` after each
    /// epoch (1-based).
    pub fn train_with(
        &mut self,
        windows: &[SeriesWindow],
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(usize, &LossReport),
    ) -> Result<Vec<LossReport>> {
        cfg.validate()?;
        if windows.is_empty() {
            return Err(Error::invalid("train", "no training windows"));
        }
        let mut rng = Rng::with_stream(cfg.seed, TRAIN_STREAM);
        let mut adam = Adam::new(&self.store, cfg.lr).with_clip_norm(cfg.clip_norm.filter(|c| *c > 0.0));
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 1..=cfg.epochs {
            rng.shuffle(&mut order);
            let mut acc = LossReport::default();
            for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let diverged = || Error::Diverged { epoch, batch: bi };
                let batch = Batch::from_windows(chunk.iter().map(|&i| &windows[i]))?;
                let (report, grads) = {
                    let g = Graph::with_params(&self.store);
                    let vars = self.loss(&g, &batch, &mut rng).map_err(|e| match e {
                        Error::NonFinite { .. } => diverged(),
                        e => e,
                    })?;
                    let report = self.report(&g, &vars)?;
                    if !report.is_finite() {
                        return Err(diverged());
                    }
                    let grads = g.backward(vars.total)?.into_param_grads();
                    (report, grads)
                };
                if grads.iter().flatten().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                    return Err(diverged());
                }
                adam.step(&mut self.store, &grads);
                acc = acc.plus(report.scaled(batch.len() as f64));
            }
            let mean = acc.scaled(1.0 / windows.len() as f64);
            on_epoch(epoch, &mean);
            history.push(mean);
        }
        Ok(history)
    }

    fn check_window(&self, w: &SeriesWindow) -> Result<()> {
        let want = [self.dims.lookback, self.dims.n];
        if w.x.shape() != want {
            return Err(Error::shape("forecast", w.x.shape(), &want));
        }
        Ok(())
    }

    /// Forecasts `[T_y, n]` for each window in model (normalized) units.
    ///
    /// Window `w` draws all its noise from `Rng::with_stream(seed, S + w.origin)`,
    /// so a window's forecast does not depend on its batch companions.
    pub fn forecast_normalized(&self, windows: &[&SeriesWindow], seed: u64) -> Result<Vec<Tensor>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        for w in windows {
            self.check_window(w)?;
        }
        let mut noise = RowNoise::new(
            windows
                .iter()
                .map(|w| Rng::with_stream(seed, FORECAST_STREAM + w.origin as u64))
                .collect(),
        );
        let (b, k) = (windows.len(), self.latent_dim());
        let x = Tensor::stack(&windows.iter().map(|w| w.x.clone()).collect::<Vec<_>>())?;
        let g = Graph::inference(&self.store);
        let eps_phi = noise.normal(&[b, k]);
        let (_, _, z_phi) = posterior_sample(&g, &self.encoder, &x, &eps_phi)?;
        let z = match &self.fusion {
            Some(f) => {
                let z_theta = self.prior_chain(&g.value(z_phi), &mut noise)?;
                let eps = noise.normal(&[b, k]);
                dual_reparam_sample(&g, g.input(z_theta), z_phi, f, &self.schedule, &eps)?
            }
            None => z_phi,
        };
        let y = g.value(self.decoder.forward(&g, z)?);
        let per = self.dims.horizon * self.dims.n;
        y.data()
            .chunks(per)
            .map(|c| Tensor::new(&[self.dims.horizon, self.dims.n], c.to_vec()))
            .collect()
    }

    /// Forecast for a window given in original units; the result is in
    /// original units too. Without stored statistics units are left as is.
    pub fn forecast(&self, window: &SeriesWindow, seed: u64) -> Result<Tensor> {
        let w = match &self.norm {
            Some(n) => n.apply(window)?,
            None => window.clone(),
        };
        let y = self.forecast_normalized(&[&w], seed)?.remove(0);
        match &self.norm {
            Some(n) => n.invert_tensor(&y),
            None => Ok(y),
        }
    }

    /// Forecast error over normalized windows, skipping padded cells.
    pub fn evaluate(&self, windows: &[SeriesWindow], seed: u64) -> Result<Metrics> {
        if windows.is_empty() {
            return Err(Error::invalid("evaluate", "no windows to evaluate"));
        }
        let n = self.dims.n;
        let target = self.meta.target_index();
        let (mut se, mut ae, mut cnt) = (0.0, 0.0, 0usize);
        let (mut se_all, mut ae_all, mut cnt_all) = (0.0, 0.0, 0usize);
        for chunk in windows.chunks(EVAL_BATCH) {
            let refs: Vec<&SeriesWindow> = chunk.iter().collect();
            let preds = self.forecast_normalized(&refs, seed)?;
            for (w, p) in chunk.iter().zip(&preds) {
                if w.y.shape() != p.shape() {
                    return Err(Error::shape("evaluate", w.y.shape(), p.shape()));
                }
                for (c, ((&yv, &pv), &pad)) in w.y.data().iter().zip(p.data()).zip(w.horizon_pad()).enumerate() {
                    if pad {
                        continue;
                    }
                    let d = pv - yv;
                    se_all += d * d;
                    ae_all += d.abs();
                    cnt_all += 1;
                    if c % n == target {
                        se += d * d;
                        ae += d.abs();
                        cnt += 1;
                    }
                }
            }
        }
        if cnt == 0 {
            return Err(Error::invalid("evaluate", "no observed target cells"));
        }
        Ok(Metrics {
            mse: se / cnt as f64,
            mae: ae / cnt as f64,
            mse_all: se_all / cnt_all as f64,
            mae_all: ae_all / cnt_all as f64,
            n_windows: windows.len(),
        })
    }
}
