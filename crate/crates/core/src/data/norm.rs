use serde::{Deserialize, Serialize};

use super::window::SeriesWindow;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Smallest standard deviation used for scaling.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-variable z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Mean and (population) standard deviation of every non-padded cell of
    /// `windows`, lookback and horizon alike.
    pub fn fit(windows: &[SeriesWindow]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::invalid("fit_normalize", "no training windows"))?;
        let n = first.n_vars();
        let mut sum = vec![0.0; n];
        let mut count = vec![0usize; n];
        let cells = |w: &SeriesWindow| {
            w.x.data()
                .iter()
                .chain(w.y.data())
                .copied()
                .zip(w.pad_mask.clone())
                .enumerate()
                .filter(|(_, (_, pad))| !pad)
                .map(|(c, (v, _))| (c % n, v))
                .collect::<Vec<_>>()
        };
        for w in windows {
            if w.n_vars() != n {
                return Err(Error::shape("fit_normalize", first.x.shape(), w.x.shape()));
            }
            for (i, v) in cells(w) {
                sum[i] += v;
                count[i] += 1;
            }
        }
        let mean: Vec<f64> = sum
            .iter()
            .zip(&count)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        let mut sq = vec![0.0; n];
        for w in windows {
            for (i, v) in cells(w) {
                sq[i] += (v - mean[i]).powi(2);
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(s, &c)| {
                let var = if c > 0 { s / c as f64 } else { 0.0 };
                var.sqrt().max(STD_FLOOR)
            })
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn n_vars(&self) -> usize {
        self.mean.len()
    }

    fn map_cells(&self, t: &Tensor, pad: Option<&[bool]>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let n = self.n_vars();
        if t.shape().last() != Some(&n) {
            return Err(Error::shape("normalize", t.shape(), &[n]));
        }
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(c, &v)| {
                if pad.is_some_and(|p| p[c]) {
                    0.0
                } else {
                    f(v, self.mean[c % n], self.std[c % n])
                }
            })
            .collect();
        Tensor::new(t.shape(), data)
    }

    /// `(v − mean) / std` on a `[.., n]` tensor.
    pub fn apply_tensor(&self, t: &Tensor) -> Result<Tensor> {
        self.map_cells(t, None, |v, m, s| (v - m) / s)
    }

    pub fn invert_tensor(&self, t: &Tensor) -> Result<Tensor> {
        self.map_cells(t, None, |v, m, s| v * s + m)
    }

    /// Normalized copy of a window; padded cells stay 0.
    pub fn apply(&self, w: &SeriesWindow) -> Result<SeriesWindow> {
        let (px, py) = w.pad_mask.split_at(w.x.len());
        Ok(SeriesWindow {
            x: self.map_cells(&w.x, Some(px), |v, m, s| (v - m) / s)?,
            y: self.map_cells(&w.y, Some(py), |v, m, s| (v - m) / s)?,
            origin: w.origin,
            pad_mask: w.pad_mask.clone(),
        })
    }

    pub fn invert(&self, w: &SeriesWindow) -> Result<SeriesWindow> {
        let (px, py) = w.pad_mask.split_at(w.x.len());
        Ok(SeriesWindow {
            x: self.map_cells(&w.x, Some(px), |v, m, s| v * s + m)?,
            y: self.map_cells(&w.y, Some(py), |v, m, s| v * s + m)?,
            origin: w.origin,
            pad_mask: w.pad_mask.clone(),
        })
    }

    pub fn apply_all(&self, windows: &[SeriesWindow]) -> Result<Vec<SeriesWindow>> {
        windows.iter().map(|w| self.apply(w)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::series::RawSeries;
    use crate::data::window::{make_windows, make_windows_padded, SplitRatios, SplitWindows};

    fn series(values: Vec<Vec<f64>>) -> RawSeries {
        let n = values[0].len();
        RawSeries::new(
            (0..n).map(|i| format!("v{i}")).collect(),
            (0..values.len()).map(|t| t as f64).collect(),
            values,
            "v0",
        )
        .unwrap()
    }

    #[test]
    fn empty_training_set_rejected() {
        assert!(NormStats::fit(&[]).is_err());
    }

    #[test]
    fn constant_variable_is_floored() {
        let s = series((0..10).map(|t| vec![3.0, t as f64]).collect());
        let w = make_windows(&s, 3, 2, 1);
        let st = NormStats::fit(&w).unwrap();
        assert_eq!(st.std[0], STD_FLOOR);
        let nw = st.apply(&w[0]).unwrap();
        assert!(nw.x.data().iter().step_by(2).all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_and_padding() {
        let s = series((0..9).map(|t| vec![(t as f64).sin() * 5.0, t as f64 * 0.3 - 1.0]).collect());
        let w = make_windows_padded(&s, 4, 3, 1);
        let st = NormStats::fit(&w).unwrap();
        for win in &w {
            let back = st.invert(&st.apply(win).unwrap()).unwrap();
            for (a, b) in back.x.data().iter().zip(win.x.data()) {
                assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in back.y.data().iter().zip(win.y.data()) {
                assert!((a - b).abs() < 1e-10);
            }
            let normed = st.apply(win).unwrap();
            for (v, &p) in normed.y.data().iter().zip(win.horizon_pad()) {
                if p {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn split_boundary_moves_train_stats() {
        // Step function: 0 for the first 50 rows, 10 afterwards.
        let s = series((0..100).map(|t| vec![if t < 50 { 0.0 } else { 10.0 }]).collect());
        // Disjoint windows of 5 rows: stats equal row stats of the covered rows.
        let stats = |train: f64| {
            let r = SplitRatios {
                train,
                valid: 0.0,
                test: 1.0 - train,
            };
            let sw = SplitWindows::new(&s, r, 3, 2, 5).unwrap();
            NormStats::fit(sw.get(crate::data::Split::Train)).unwrap()
        };
        // 60 train rows: 50 zeros and 10 tens → mean 10/6, std sqrt(p(1-p))·10 with p=1/6.
        let a = stats(0.6);
        assert!((a.mean[0] - 10.0 / 6.0).abs() < 1e-12);
        assert!((a.std[0] - 10.0 * (5.0f64 / 36.0).sqrt()).abs() < 1e-12);
        // 80 train rows: 50 zeros, 30 tens → mean 30/8 = 3.75.
        let b = stats(0.8);
        assert!((b.mean[0] - 3.75).abs() < 1e-12);
        assert_ne!(a, b);
    }
}
