//! Series ingestion, windowing, normalization and synthetic data.

mod cache;
mod norm;
mod series;
mod synth;
mod window;

pub use cache::{read_window_cache, write_window_cache};
pub use norm::{NormStats, STD_FLOOR};
pub use series::{load_csv, write_csv, CsvSchema, RawSeries, ETT_COLUMNS, ETT_TARGET};
pub use synth::synth_sinusoids;
pub use window::{
    make_windows, make_windows_padded, window_count, windows_in, Batch, SeriesWindow, Split,
    SplitRatios, SplitWindows,
};

