//! Windowing, chronological splits, and mini-batches.

use std::ops::Range;

use super::series::RawSeries;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// One (lookback, horizon) pair cut from a [`RawSeries`].
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesWindow {
    /// `[T_x, n]`
    pub x: Tensor,
    /// `[T_y, n]`
    pub y: Tensor,
    /// Row of the series where `x` starts.
    pub origin: usize,
    /// Row-major `(T_x + T_y) × n` over the stacked `[x; y]`; `true` marks a
    /// zero-padded cell.
    pub pad_mask: Vec<bool>,
}

impl SeriesWindow {
    pub fn lookback(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn n_vars(&self) -> usize {
        self.x.shape()[1]
    }

    /// Padding flags restricted to the horizon rows.
    pub fn horizon_pad(&self) -> &[bool] {
        &self.pad_mask[self.x.len()..]
    }

    pub fn is_padded(&self) -> bool {
        self.pad_mask.iter().any(|&m| m)
    }
}

/// Number of full windows: `floor((T − T_x − T_y) / stride) + 1`, or 0.
pub fn window_count(len: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if lookback == 0 || horizon == 0 || stride == 0 || len < lookback + horizon {
        return 0;
    }
    (len - lookback - horizon) / stride + 1
}

fn cut(series: &RawSeries, origin: usize, lookback: usize, horizon: usize, end: usize) -> SeriesWindow {
    let n = series.n_vars();
    let mut xs = Vec::with_capacity(lookback * n);
    let mut ys = Vec::with_capacity(horizon * n);
    let mut pad = Vec::with_capacity((lookback + horizon) * n);
    for t in origin..origin + lookback {
        xs.extend_from_slice(&series.values[t]);
        pad.extend(std::iter::repeat_n(false, n));
    }
    for t in origin + lookback..origin + lookback + horizon {
        if t < end {
            ys.extend_from_slice(&series.values[t]);
            pad.extend(std::iter::repeat_n(false, n));
        } else {
            ys.extend(std::iter::repeat_n(0.0, n));
            pad.extend(std::iter::repeat_n(true, n));
        }
    }
    SeriesWindow {
        x: Tensor::new(&[lookback, n], xs).expect("sized above"),
        y: Tensor::new(&[horizon, n], ys).expect("sized above"),
        origin,
        pad_mask: pad,
    }
}

/// Full windows over rows `range` of `series`, advancing by `stride`.
///
/// Origins are absolute row indices. Degenerate sizes yield no windows.
pub fn windows_in(
    series: &RawSeries,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Vec<SeriesWindow> {
    let count = window_count(range.len(), lookback, horizon, stride);
    (0..count)
        .map(|w| cut(series, range.start + w * stride, lookback, horizon, range.end))
        .collect()
}

/// Full windows over the whole series.
pub fn make_windows(
    series: &RawSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Vec<SeriesWindow> {
    windows_in(series, 0..series.len(), lookback, horizon, stride)
}

/// Full windows followed by trailing partial windows whose horizon runs past
/// the end of the series; missing horizon cells are zero and pad-masked.
pub fn make_windows_padded(
    series: &RawSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Vec<SeriesWindow> {
    let mut out = make_windows(series, lookback, horizon, stride);
    if lookback == 0 || horizon == 0 || stride == 0 {
        return out;
    }
    let mut origin = out.len() * stride;
    while origin + lookback < series.len() {
        out.push(cut(series, origin, lookback, horizon, series.len()));
        origin += stride;
    }
    out
}

/// Train/validation/test fractions of a chronological split.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            valid: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|&p| !(p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "split",
                format!("ratios must be non-negative and sum to 1, got {parts:?}"),
            ));
        }
        Ok(())
    }

    /// Row ranges `[train, valid, test]` for a series of `len` rows.
    pub fn ranges(&self, len: usize) -> [Range<usize>; 3] {
        let a = (len as f64 * self.train).floor() as usize;
        let b = ((len as f64 * (self.train + self.valid)).floor() as usize).clamp(a, len);
        [0..a, a..b, b..len]
    }
}

/// Which part of a chronological split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "val" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split", format!("unknown split `{other}`"))),
        }
    }
}

/// Windows for each part of a chronological split, windowed within each part.
#[derive(Clone, Debug)]
pub struct SplitWindows {
    pub ranges: [Range<usize>; 3],
    pub parts: [Vec<SeriesWindow>; 3],
}

impl SplitWindows {
    pub fn new(
        series: &RawSeries,
        ratios: SplitRatios,
        lookback: usize,
        horizon: usize,
        stride: usize,
    ) -> Result<Self> {
        ratios.validate()?;
        let ranges = ratios.ranges(series.len());
        let parts = ranges
            .clone()
            .map(|r| windows_in(series, r, lookback, horizon, stride));
        Ok(SplitWindows { ranges, parts })
    }

    pub fn get(&self, split: Split) -> &[SeriesWindow] {
        &self.parts[split.index()]
    }
}

/// Stacked windows ready for a forward pass.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, T_x, n]`
    pub x: Tensor,
    /// `[B, T_y, n]`
    pub y: Tensor,
    /// `[B, T_y, n]`: 1 for observed horizon cells, 0 for padding.
    pub y_mask: Tensor,
    pub origins: Vec<usize>,
}

impl Batch {
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a SeriesWindow>) -> Result<Self> {
        let windows: Vec<&SeriesWindow> = windows.into_iter().collect();
        if windows.is_empty() {
            return Err(Error::invalid("batch", "no windows"));
        }
        let xs: Vec<Tensor> = windows.iter().map(|w| w.x.clone()).collect();
        let ys: Vec<Tensor> = windows.iter().map(|w| w.y.clone()).collect();
        let masks: Vec<Tensor> = windows
            .iter()
            .map(|w| {
                let m = w.horizon_pad().iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
                Tensor::new(w.y.shape(), m).expect("mask matches horizon")
            })
            .collect();
        Ok(Batch {
            x: Tensor::stack(&xs)?,
            y: Tensor::stack(&ys)?,
            y_mask: Tensor::stack(&masks)?,
            origins: windows.iter().map(|w| w.origin).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(len: usize, n: usize) -> RawSeries {
        RawSeries::new(
            (0..n).map(|i| format!("v{i}")).collect(),
            (0..len).map(|t| t as f64).collect(),
            (0..len)
                .map(|t| (0..n).map(|i| (t * 10 + i) as f64).collect())
                .collect(),
            "v0",
        )
        .unwrap()
    }

    #[test]
    fn count_formula_by_enumeration() {
        // T=10, T_x=4, T_y=2, stride 1: origins 0..=4
        let w = make_windows(&ramp(10, 2), 4, 2, 1);
        assert_eq!(w.len(), 5);
        assert_eq!(w.iter().map(|w| w.origin).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert_eq!(w[4].y.data(), &[80.0, 81.0, 90.0, 91.0]);
        assert_eq!(make_windows(&ramp(5, 2), 4, 2, 1).len(), 0);
    }

    #[test]
    fn count_matches_enumeration_for_many_sizes() {
        for len in 0..20 {
            for tx in 1..5 {
                for ty in 1..4 {
                    for stride in 1..5 {
                        let brute = (0..len)
                            .step_by(stride)
                            .filter(|o| o + tx + ty <= len)
                            .count();
                        assert_eq!(window_count(len, tx, ty, stride), brute);
                    }
                }
            }
        }
    }

    #[test]
    fn disjoint_at_full_stride() {
        let w = make_windows(&ramp(30, 1), 4, 2, 6);
        for pair in w.windows(2) {
            assert!(pair[0].origin + 6 <= pair[1].origin);
        }
    }

    #[test]
    fn x_and_y_are_contiguous() {
        let w = &make_windows(&ramp(12, 1), 3, 2, 1)[2];
        assert_eq!(w.x.data(), &[20.0, 30.0, 40.0]);
        assert_eq!(w.y.data(), &[50.0, 60.0]);
    }

    #[test]
    fn partial_windows_are_padded_and_flagged() {
        let s = ramp(7, 2);
        let w = make_windows_padded(&s, 4, 2, 1);
        assert_eq!(w.len(), 3);
        let last = w.last().unwrap();
        assert_eq!(last.origin, 2);
        assert_eq!(last.y.data(), &[60.0, 61.0, 0.0, 0.0]);
        assert_eq!(last.horizon_pad(), &[false, false, true, true]);
        for win in &w {
            let cells: Vec<f64> = win.x.data().iter().chain(win.y.data()).copied().collect();
            for (v, &m) in cells.iter().zip(&win.pad_mask) {
                if m {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn split_is_chronological() {
        let s = ramp(100, 1);
        let sw = SplitWindows::new(&s, SplitRatios::default(), 4, 2, 1).unwrap();
        assert_eq!(sw.ranges, [0..70, 70..80, 80..100]);
        let max_train = sw.get(Split::Train).iter().map(|w| w.origin + 5).max().unwrap();
        let min_valid = sw.get(Split::Valid).iter().map(|w| w.origin).min().unwrap();
        let min_test = sw.get(Split::Test).iter().map(|w| w.origin).min().unwrap();
        assert!(max_train < min_valid && min_valid < min_test);
    }

    #[test]
    fn bad_ratios_rejected() {
        let r = SplitRatios {
            train: 0.8,
            valid: 0.3,
            test: 0.0,
        };
        assert!(r.validate().is_err());
    }

    #[test]
    fn batch_masks_padding() {
        let s = ramp(7, 1);
        let w = make_windows_padded(&s, 4, 2, 1);
        let b = Batch::from_windows(&w).unwrap();
        assert_eq!(b.x.shape(), &[w.len(), 4, 1]);
        assert_eq!(b.y_mask.data().last(), Some(&0.0));
        assert_eq!(b.y_mask.data()[0], 1.0);
    }
}
