use serde::{Deserialize, Serialize};

use super::config::Dims;
use super::dual::SeriesMeta;
use crate::data::{NormStats, RawSeries, SeriesWindow, Split, SplitRatios, SplitWindows};
use crate::error::{Error, Result};

/// How the training series was cut into windows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataInfo {
    pub stride: usize,
    pub split: SplitRatios,
}

/// Chronologically split, normalized windows of one series.
///
/// Statistics come from the training windows only.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub name: String,
    pub meta: SeriesMeta,
    pub dims: Dims,
    pub norm: NormStats,
    pub info: DataInfo,
    pub train: Vec<SeriesWindow>,
    pub valid: Vec<SeriesWindow>,
    pub test: Vec<SeriesWindow>,
}

impl PreparedData {
    pub fn new(
        series: &RawSeries,
        name: impl Into<String>,
        lookback: usize,
        horizon: usize,
        stride: usize,
        ratios: SplitRatios,
    ) -> Result<Self> {
        let sw = SplitWindows::new(series, ratios, lookback, horizon, stride)?;
        let raw_train = sw.get(Split::Train);
        if raw_train.is_empty() {
            return Err(Error::invalid(
                "prepare",
                format!("series of {} rows yields no training windows", series.len()),
            ));
        }
        let norm = NormStats::fit(raw_train)?;
        Ok(PreparedData {
            name: name.into(),
            meta: SeriesMeta {
                names: series.names.clone(),
                target: series.target.clone(),
            },
            dims: Dims {
                n: series.n_vars(),
                lookback,
                horizon,
            },
            info: DataInfo { stride, split: ratios },
            train: norm.apply_all(raw_train)?,
            valid: norm.apply_all(sw.get(Split::Valid))?,
            test: norm.apply_all(sw.get(Split::Test))?,
            norm,
        })
    }

    pub fn split(&self, split: Split) -> &[SeriesWindow] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}
