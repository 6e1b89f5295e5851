//! CSV ingestion into [`RawSeries`].

use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column set of the published Electricity Transformer Temperature files.
pub const ETT_COLUMNS: [&str; 8] = ["date", "HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"];
pub const ETT_TARGET: &str = "OT";

/// How a CSV file is interpreted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum CsvSchema {
    /// `date` plus the six load columns and `OT`; target is `OT`.
    Ett,
    /// First column is the timestamp, every other column numeric.
    Generic { target: String },
}

/// Multivariate series: `values[t][i]` is variable `i` at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub names: Vec<String>,
    /// Sort keys of the timestamps (seconds since epoch for calendar stamps).
    pub timestamps: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub target: String,
}

impl RawSeries {
    pub fn new(
        names: Vec<String>,
        timestamps: Vec<f64>,
        values: Vec<Vec<f64>>,
        target: impl Into<String>,
    ) -> Result<Self> {
        let target = target.into();
        let n = names.len();
        if !names.contains(&target) {
            return Err(Error::invalid(
                "raw_series",
                format!("target `{target}` is not one of {names:?}"),
            ));
        }
        if timestamps.len() != values.len() {
            return Err(Error::invalid("raw_series", "timestamp and row counts differ"));
        }
        for (t, row) in values.iter().enumerate() {
            if row.len() != n || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(
                    "raw_series",
                    format!("row {t} must hold {n} finite values"),
                ));
            }
        }
        if let Some(t) = timestamps.windows(2).position(|w| !(w[0] < w[1])) {
            return Err(Error::invalid(
                "raw_series",
                format!("timestamps not strictly increasing at row {}", t + 1),
            ));
        }
        Ok(RawSeries {
            names,
            timestamps,
            values,
            target,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn target_index(&self) -> usize {
        self.names
            .iter()
            .position(|n| *n == self.target)
            .expect("target validated at construction")
    }

    /// Rows `start..end` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> RawSeries {
        RawSeries {
            names: self.names.clone(),
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values[start..end].to_vec(),
            target: self.target.clone(),
        }
    }
}

fn parse_timestamp(s: &str) -> Option<f64> {
    let s = s.trim();
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp() as f64);
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(d.and_hms_opt(0, 0, 0)?.and_utc().timestamp() as f64);
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a CSV file under `schema`.
///
/// Errors carry the file line (header is line 1) and column name of the
/// offending cell.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<RawSeries> {
    let file = std::fs::File::open(path)?;
    read_csv(file, path, schema)
}

pub(crate) fn read_csv(
    reader: impl std::io::Read,
    path: &Path,
    schema: &CsvSchema,
) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let csv_err = |line: u64, column: &str, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        column: column.to_string(),
        msg,
    };
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(1, "", e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            msg: "need a timestamp column and at least one value column".into(),
        });
    }

    let target = match schema {
        CsvSchema::Ett => {
            let missing: Vec<&str> = ETT_COLUMNS
                .iter()
                .copied()
                .filter(|c| !header.iter().any(|h| h == c))
                .collect();
            let extra: Vec<&String> = header
                .iter()
                .filter(|h| !ETT_COLUMNS.contains(&h.as_str()))
                .collect();
            if !missing.is_empty() || !extra.is_empty() {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    msg: format!("ETT file missing {missing:?}, unexpected {extra:?}"),
                });
            }
            if header[0] != "date" {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    msg: "ETT file must start with the `date` column".into(),
                });
            }
            ETT_TARGET.to_string()
        }
        CsvSchema::Generic { target } => {
            if !header[1..].contains(target) {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    msg: format!("missing target column `{target}`"),
                });
            }
            target.clone()
        }
    };

    let names = header[1..].to_vec();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let line = r as u64 + 2;
        let rec = rec.map_err(|e| csv_err(line, "", e.to_string()))?;
        if rec.len() != header.len() {
            return Err(csv_err(
                line,
                "",
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| csv_err(line, &header[0], format!("unparseable timestamp `{}`", &rec[0])))?;
        if let Some(&prev) = timestamps.last() {
            if !(ts > prev) {
                return Err(csv_err(
                    line,
                    &header[0],
                    format!("timestamp `{}` does not increase", &rec[0]),
                ));
            }
        }
        let mut row = Vec::with_capacity(names.len());
        for (c, cell) in rec.iter().enumerate().skip(1) {
            let v: f64 = cell.parse().map_err(|_| {
                csv_err(line, &header[c], format!("non-numeric cell `{cell}`"))
            })?;
            if !v.is_finite() {
                return Err(csv_err(line, &header[c], format!("non-finite cell `{cell}`")));
            }
            row.push(v);
        }
        timestamps.push(ts);
        values.push(row);
    }
    RawSeries::new(names, timestamps, values, target)
}

/// Writes `series` as CSV: a `t` column with the raw timestamp keys, then
/// one column per variable.
pub fn write_csv(series: &RawSeries, out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(std::iter::once("t").chain(series.names.iter().map(String::as_str)))
        .map_err(io)?;
    for (t, row) in series.timestamps.iter().zip(&series.values) {
        w.write_record(std::iter::once(t.to_string()).chain(row.iter().map(f64::to_string)))
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const ETT3: &str = "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n\
        2016-07-01 00:00:00,5.827,2.009,1.599,0.462,4.203,1.340,30.531\n\
        2016-07-01 01:00:00,5.693,2.076,1.492,0.426,4.142,1.371,27.787\n\
        2016-07-01 02:00:00,5.157,1.741,1.279,0.355,3.777,1.218,27.787\n";

    fn read(text: &str, schema: &CsvSchema) -> Result<RawSeries> {
        read_csv(text.as_bytes(), Path::new("mem.csv"), schema)
    }

    #[test]
    fn ett_fixture_parses() {
        let s = read(ETT3, &CsvSchema::Ett).unwrap();
        assert_eq!(s.n_vars(), 7);
        assert_eq!(s.len(), 3);
        assert_eq!(s.target, "OT");
        assert_eq!(s.target_index(), 6);
        assert_eq!(s.values[1][0], 5.693);
        assert_eq!(s.timestamps[1] - s.timestamps[0], 3600.0);
    }

    #[test]
    fn nan_cell_is_named() {
        let bad = ETT3.replace("1.492", "NaN");
        let err = read(&bad, &CsvSchema::Ett).unwrap_err();
        match err {
            Error::Csv { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "MUFL");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_monotone_timestamps_rejected() {
        let bad = ETT3.replace("2016-07-01 02:00:00", "2016-07-01 00:30:00");
        let err = read(&bad, &CsvSchema::Ett).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 4, .. }), "{err}");
    }

    #[test]
    fn missing_ett_column_rejected() {
        let bad = ETT3.replace(",OT", ",XX");
        assert!(matches!(read(&bad, &CsvSchema::Ett), Err(Error::Schema { .. })));
    }

    #[test]
    fn generic_two_columns() {
        let s = read(
            "t,v\n0,1.5\n1,2.5\n2,0.5\n",
            &CsvSchema::Generic { target: "v".into() },
        )
        .unwrap();
        assert_eq!(s.n_vars(), 1);
        assert_eq!(s.target, "v");
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn written_csv_reads_back() {
        let s = read(ETT3, &CsvSchema::Ett).unwrap();
        let mut buf = Vec::new();
        write_csv(&s, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), Path::new("mem.csv"), &CsvSchema::Generic { target: "OT".into() }).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn generic_missing_target() {
        let r = read("t,v\n0,1\n", &CsvSchema::Generic { target: "w".into() });
        assert!(matches!(r, Err(Error::Schema { .. })));
    }
}
