//! Encoder × score model × dual grid, plus a sampler sweep at the best cell.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use super::dual::DualVdt;
use super::prepare::PreparedData;
use crate::attention::EncoderKind;
use crate::diffusion::ScoreKind;
use crate::error::{Error, Result};
use crate::sampler::SamplerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub encoder: EncoderKind,
    pub score: ScoreKind,
    pub dual: bool,
    pub sampler: SamplerKind,
}

impl AblationCell {
    /// `base` with this cell's architecture. The score prior stays on, so a
    /// dual-OFF cell still trains the diffusion prior but skips fusion.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.encoder.kind = self.encoder;
        cfg.score.kind = self.score;
        cfg.dual = self.dual;
        cfg.score_prior = true;
        cfg.sampler.kind = self.sampler;
        cfg
    }
}

/// The product grid, in encoder-major order, all with `sampler`.
pub fn ablation_cells(
    encoders: &[EncoderKind],
    scores: &[ScoreKind],
    duals: &[bool],
    sampler: SamplerKind,
) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for &encoder in encoders {
        for &score in scores {
            for &dual in duals {
                cells.push(AblationCell {
                    encoder,
                    score,
                    dual,
                    sampler,
                });
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub cells: Vec<AblationCell>,
    /// After the grid, retrain the best cell (lowest validation MSE, test
    /// MSE when there is no validation split) with each of these samplers.
    pub sweep_samplers: Vec<SamplerKind>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Shared by initialization, training and evaluation of every cell.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub dataset: String,
    pub mse: f64,
    pub mae: f64,
    pub seed: u64,
    /// Selection score; not written to the CSV.
    pub valid_mse: f64,
}

fn run_cell(data: &PreparedData, spec: &AblationSpec, cell: AblationCell) -> Result<AblationRow> {
    let mut model = DualVdt::for_data(cell.apply(&spec.model), data, spec.seed)?;
    let train = TrainConfig {
        seed: spec.seed,
        ..spec.train.clone()
    };
    model.train(&data.train, &train)?;
    let test = model.evaluate(&data.test, spec.seed)?;
    let valid_mse = if data.valid.is_empty() {
        test.mse
    } else {
        model.evaluate(&data.valid, spec.seed)?.mse
    };
    Ok(AblationRow {
        cell,
        dataset: data.name.clone(),
        mse: test.mse,
        mae: test.mae,
        seed: spec.seed,
        valid_mse,
    })
}

/// Trains and evaluates every cell; `on_row` sees each row as it finishes.
pub fn run_ablation(
    data: &PreparedData,
    spec: &AblationSpec,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if spec.cells.is_empty() {
        return Err(Error::invalid("ablate", "empty grid"));
    }
    let mut rows = Vec::new();
    for &cell in &spec.cells {
        let row = run_cell(data, spec, cell)?;
        on_row(&row);
        rows.push(row);
    }
    if spec.sweep_samplers.is_empty() {
        return Ok(rows);
    }
    let best = rows
        .iter()
        .min_by(|a, b| a.valid_mse.total_cmp(&b.valid_mse))
        .map(|r| r.cell)
        .expect("grid not empty");
    for &sampler in &spec.sweep_samplers {
        let cell = AblationCell { sampler, ..best };
        if rows.iter().any(|r| r.cell == cell) {
            continue;
        }
        let row = run_cell(data, spec, cell)?;
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

fn on_off(b: bool) -> &'static str {
    if b {
        "ON"
    } else {
        "OFF"
    }
}

pub fn write_ablation_csv(out: impl Write, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["encoder", "score_model", "dual", "sampler", "dataset", "mse", "mae", "seed"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.cell.encoder.tag().to_string(),
            r.cell.score.tag().to_string(),
            on_off(r.cell.dual).to_string(),
            r.cell.sampler.tag().to_string(),
            r.dataset.clone(),
            format!("{:.6}", r.mse),
            format!("{:.6}", r.mae),
            r.seed.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_ablation_csv`]. The selection score is
/// not stored and comes back as the test MSE.
pub fn read_ablation_csv(input: impl std::io::Read) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_reader(input);
    let bad = |line: usize, msg: String| Error::Csv {
        path: "ablation".into(),
        line: line as u64,
        column: String::new(),
        msg,
    };
    let header: Vec<String> = r.headers().map_err(|e| bad(1, e.to_string()))?.iter().map(str::to_string).collect();
    if header != ["encoder", "score_model", "dual", "sampler", "dataset", "mse", "mae", "seed"] {
        return Err(bad(1, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad(line, e.to_string()))?;
        let f = |j: usize| rec.get(j).unwrap_or("");
        let num = |j: usize| f(j).parse::<f64>().map_err(|_| bad(line, format!("bad number `{}`", f(j))));
        let dual = match f(2) {
            "ON" => true,
            "OFF" => false,
            other => return Err(bad(line, format!("dual must be ON or OFF, got `{other}`"))),
        };
        let cell = AblationCell {
            encoder: f(0).parse()?,
            score: f(1).parse()?,
            dual,
            sampler: f(3).parse()?,
        };
        let mse = num(5)?;
        rows.push(AblationRow {
            cell,
            dataset: f(4).to_string(),
            mse,
            mae: num(6)?,
            seed: f(7).parse().map_err(|_| bad(line, format!("bad seed `{}`", f(7))))?,
            valid_mse: mse,
        });
    }
    Ok(rows)
}

/// Markdown table, one row per cell and an MSE/MAE column pair per dataset.
pub fn write_ablation_report(out: &mut impl Write, rows: &[AblationRow]) -> Result<()> {
    let mut datasets: Vec<&str> = Vec::new();
    let mut cells: Vec<AblationCell> = Vec::new();
    for r in rows {
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
        if !cells.contains(&r.cell) {
            cells.push(r.cell);
        }
    }
    write!(out, "| Encoder | Score Model | Dual Reparametrized | Latent Sampler |")?;
    for d in &datasets {
        write!(out, " {d} MSE | {d} MAE |")?;
    }
    write!(out, "\n|---|---|---|---|")?;
    for _ in &datasets {
        write!(out, "---|---|")?;
    }
    writeln!(out)?;
    for c in &cells {
        write!(
            out,
            "| {} | {} | {} | {} |",
            c.encoder.tag(),
            c.score.tag(),
            on_off(c.dual),
            c.sampler.tag()
        )?;
        for d in &datasets {
            match rows.iter().find(|r| r.cell == *c && r.dataset == *d) {
                Some(r) => write!(out, " {:.3} | {:.3} |", r.mse, r.mae)?,
                None => write!(out, " - | - |")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}
