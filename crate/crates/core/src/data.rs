//! CSV ingestion, chronological splits, sliding windows and a synthetic
//! generator with known cross-variable lags.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const TIMESTAMP_HEADERS: [&str; 4] = ["date", "time", "timestamp", "datetime"];

/// `T×D` observations with variable names and optional timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateSeries {
    pub names: Vec<String>,
    pub values: Tensor,
    pub timestamps: Option<Vec<String>>,
}

impl MultivariateSeries {
    pub fn new(names: Vec<String>, values: Tensor, timestamps: Option<Vec<String>>) -> Result<Self> {
        if values.shape().len() != 2 || values.cols() != names.len() {
            return Err(Error::dim("series", values.shape(), &[names.len()]));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != values.rows() {
                return Err(Error::dim("series timestamps", &[ts.len()], &[values.rows()]));
            }
        }
        if !values.all_finite() {
            return Err(Error::Numeric("series contains non-finite values".into()));
        }
        Ok(MultivariateSeries { names, values, timestamps })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_vars(&self) -> usize {
        self.values.cols()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.values.at(t, j)).collect()
    }

    /// Rows `[range.start, range.end)` as a new series.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::Contract(format!("row range {range:?} outside 0..{}", self.len())));
        }
        let d = self.n_vars();
        let data = self.values.data()[range.start * d..range.end * d].to_vec();
        Ok(MultivariateSeries {
            names: self.names.clone(),
            values: Tensor::new(&[range.len(), d], data)?,
            timestamps: self.timestamps.as_ref().map(|ts| ts[range].to_vec()),
        })
    }
}

/// Reads a headed CSV. The first column is treated as a timestamp when its
/// header is a date-like name or its first value is not numeric.
pub fn load_csv(path: &Path) -> Result<MultivariateSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Empty(format!("{} has no header", path.display())));
    }
    let records = reader.records().collect::<std::result::Result<Vec<_>, _>>()?;
    if records.is_empty() {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    }
    let has_ts = TIMESTAMP_HEADERS.contains(&headers[0].to_ascii_lowercase().as_str())
        || records[0].get(0).is_some_and(|c| c.trim().parse::<f64>().is_err());
    let first = usize::from(has_ts);
    if headers.len() <= first {
        return Err(Error::Empty(format!("{} has no numeric columns", path.display())));
    }
    let d = headers.len() - first;
    let mut values = Vec::with_capacity(records.len() * d);
    let mut timestamps = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        let line = r + 2;
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                row: line,
                col: rec.len() + 1,
                msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        if has_ts {
            timestamps.push(rec[0].to_string());
        }
        for c in first..headers.len() {
            let cell = rec[c].trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: line,
                col: c + 1,
                msg: format!("cannot parse '{cell}' as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    col: c + 1,
                    msg: format!("non-finite value '{cell}'"),
                });
            }
            values.push(v);
        }
    }
    MultivariateSeries::new(
        headers[first..].to_vec(),
        Tensor::new(&[records.len(), d], values)?,
        has_ts.then_some(timestamps),
    )
}

/// Writes the series in the format [`load_csv`] reads, values in shortest
/// round-trip form.
pub fn write_csv(series: &MultivariateSeries, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = Vec::with_capacity(series.n_vars() + 1);
    if series.timestamps.is_some() {
        header.push("date".to_string());
    }
    header.extend(series.names.iter().cloned());
    w.write_record(&header)?;
    for t in 0..series.len() {
        let mut row = Vec::with_capacity(header.len());
        if let Some(ts) = &series.timestamps {
            row.push(ts[t].clone());
        }
        row.extend(series.values.row(t).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Row ranges of the three splits. `val` and `test` start `lookback` rows
/// before their first target so the first window's history ends exactly at
/// the preceding boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Fixed borders (end of train, end of val, end of test) for the hourly and
/// 15-minute electricity transformer datasets.
fn named_borders(name: &str) -> Option<[usize; 3]> {
    match name.to_ascii_lowercase().as_str() {
        "etth1" | "etth2" => Some([8736, 11712, 14688]),
        "ettm1" | "ettm2" => Some([34656, 46272, 57888]),
        _ => None,
    }
}

impl SplitSpec {
    /// Borders for a named dataset, or a 7:1:2 split when the name is
    /// unknown or absent.
    pub fn for_dataset(name: Option<&str>, total_rows: usize, lookback: usize) -> Result<Self> {
        match name.and_then(named_borders) {
            Some([a, b, c]) => {
                if total_rows < c {
                    return Err(Error::Contract(format!(
                        "dataset {} needs {c} rows, found {total_rows}",
                        name.unwrap_or_default()
                    )));
                }
                Self::from_borders(a, b, c, lookback)
            }
            None => Self::ratio(total_rows, lookback),
        }
    }

    /// 70% train, 20% test, remainder validation.
    pub fn ratio(total_rows: usize, lookback: usize) -> Result<Self> {
        let train = total_rows * 7 / 10;
        let test = total_rows / 5;
        let val = total_rows - train - test;
        Self::from_borders(train, train + val, total_rows, lookback)
    }

    fn from_borders(a: usize, b: usize, c: usize, lookback: usize) -> Result<Self> {
        if a < lookback || a >= b || b >= c {
            return Err(Error::Contract(format!("borders {a}/{b}/{c} too short for lookback {lookback}")));
        }
        Ok(SplitSpec {
            train: 0..a,
            val: a - lookback..b,
            test: b - lookback..c,
        })
    }

    /// Errors unless every split yields at least one window.
    pub fn check(&self, lookback: usize, horizon: usize) -> Result<()> {
        for (name, r) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if r.len() < lookback + horizon {
                return Err(Error::Contract(format!(
                    "{name} split has {} rows, fewer than lookback + horizon = {}",
                    r.len(),
                    lookback + horizon
                )));
            }
        }
        Ok(())
    }
}

/// Dataset name from a file path: the stem, e.g. `ETTh1` for `data/ETTh1.csv`.
pub fn dataset_name(path: &Path) -> Option<String> {
    path.file_stem().map(|s| s.to_string_lossy().into_owned())
}

/// Train, validation and test views of `series`.
pub fn chronological_split(
    series: &MultivariateSeries,
    spec: &SplitSpec,
) -> Result<(MultivariateSeries, MultivariateSeries, MultivariateSeries)> {
    Ok((
        series.slice_rows(spec.train.clone())?,
        series.slice_rows(spec.val.clone())?,
        series.slice_rows(spec.test.clone())?,
    ))
}

/// Per-variable affine standardisation fitted on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(series: &MultivariateSeries) -> Self {
        let (t, d) = (series.len(), series.n_vars());
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for row in series.values.data().chunks(d) {
            for j in 0..d {
                mean[j] += row[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        for row in series.values.data().chunks(d) {
            for j in 0..d {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| (v / t as f64).sqrt())
            .map(|s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Standardizer { mean, std }
    }

    pub fn transform(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        self.map(series, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        self.map(series, |v, m, s| v * s + m)
    }

    fn map(&self, series: &MultivariateSeries, f: impl Fn(f64, f64, f64) -> f64) -> Result<MultivariateSeries> {
        let d = series.n_vars();
        if d != self.mean.len() {
            return Err(Error::dim("standardizer", &[d], &[self.mean.len()]));
        }
        let data = series
            .values
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| f(v, self.mean[k % d], self.std[k % d]))
            .collect();
        MultivariateSeries::new(
            series.names.clone(),
            Tensor::new(series.values.shape(), data)?,
            series.timestamps.clone(),
        )
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub x_his: Tensor,
    pub x_future: Tensor,
    pub start: usize,
}

/// `T − L − H + 1`, or an error when no window fits.
pub fn window_count(rows: usize, lookback: usize, horizon: usize) -> Result<usize> {
    (rows + 1)
        .checked_sub(lookback + horizon)
        .filter(|&c| c > 0)
        .ok_or_else(|| Error::Contract(format!("{rows} rows cannot hold a window of {lookback} + {horizon}")))
}

/// Sliding windows starting at `0, stride, 2·stride, …`.
pub fn make_windows(series: &MultivariateSeries, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<WindowSample>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config("lookback, horizon and stride must be positive".into()));
    }
    let count = window_count(series.len(), lookback, horizon)?;
    let d = series.n_vars();
    let data = series.values.data();
    (0..count)
        .step_by(stride)
        .map(|k| {
            Ok(WindowSample {
                x_his: Tensor::new(&[lookback, d], data[k * d..(k + lookback) * d].to_vec())?,
                x_future: Tensor::new(&[horizon, d], data[(k + lookback) * d..(k + lookback + horizon) * d].to_vec())?,
                start: k,
            })
        })
        .collect()
}

/// `target(t) += gain · source(t − delay ± jitter)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagEdge {
    pub source: usize,
    pub target: usize,
    pub delay: usize,
    pub gain: f64,
    #[serde(default)]
    pub jitter: usize,
}

/// Ground truth for [`synth_lagged`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagSpec {
    pub edges: Vec<LagEdge>,
    pub noise_std: f64,
}

impl LagSpec {
    /// Parses `src>dst:delay[:gain[:jitter]]` items separated by commas.
    pub fn parse_edges(text: &str, noise_std: f64) -> Result<Self> {
        let mut edges = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let bad = || Error::Config(format!("bad edge '{item}', expected src>dst:delay[:gain[:jitter]]"));
            let (pair, rest) = item.split_once(':').ok_or_else(bad)?;
            let (s, t) = pair.split_once('>').ok_or_else(bad)?;
            let mut fields = rest.split(':');
            let delay = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let gain = fields.next().map(str::parse).transpose().map_err(|_| bad())?.unwrap_or(1.0);
            let jitter = fields.next().map(str::parse).transpose().map_err(|_| bad())?.unwrap_or(0);
            edges.push(LagEdge {
                source: s.trim().parse().map_err(|_| bad())?,
                target: t.trim().parse().map_err(|_| bad())?,
                delay,
                gain,
                jitter,
            });
        }
        Ok(LagSpec { edges, noise_std })
    }

    fn validate(&self, n_vars: usize) -> Result<Vec<usize>> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise std {} must be finite and non-negative", self.noise_std)));
        }
        for e in &self.edges {
            if e.source >= n_vars || e.target >= n_vars {
                return Err(Error::Config(format!("edge {}>{} outside {n_vars} variables", e.source, e.target)));
            }
            if e.jitter > e.delay {
                return Err(Error::Config(format!("jitter {} exceeds delay {}", e.jitter, e.delay)));
            }
            if !e.gain.is_finite() {
                return Err(Error::Config("edge gain must be finite".into()));
            }
        }
        zero_lag_order(n_vars, &self.edges)
    }
}

/// Topological order under the edges whose delay can reach zero; errors on a
/// cycle.
fn zero_lag_order(n_vars: usize, edges: &[LagEdge]) -> Result<Vec<usize>> {
    let instant: Vec<&LagEdge> = edges.iter().filter(|e| e.delay == e.jitter).collect();
    let mut indegree = vec![0usize; n_vars];
    for e in &instant {
        indegree[e.target] += 1;
    }
    let mut ready: Vec<usize> = (0..n_vars).filter(|&v| indegree[v] == 0).collect();
    let mut order = Vec::with_capacity(n_vars);
    while let Some(v) = ready.pop() {
        order.push(v);
        for e in instant.iter().filter(|e| e.source == v) {
            indegree[e.target] -= 1;
            if indegree[e.target] == 0 {
                ready.push(e.target);
            }
        }
    }
    if order.len() < n_vars {
        return Err(Error::Config("zero-lag edges form a cycle".into()));
    }
    Ok(order)
}

/// Parameters of the root processes in [`synth_lagged`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceProcess {
    pub phi: f64,
    pub innovation_std: f64,
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

/// Sidecar written next to a synthetic CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub n_vars: usize,
    pub rows: usize,
    pub seed: u64,
    pub burn_in: usize,
    pub lag_spec: LagSpec,
    pub sources: Vec<Option<SourceProcess>>,
}

/// Variables without incoming edges are AR(1) plus a sinusoid; every other
/// variable is the gain-weighted sum of its lagged parents plus Gaussian
/// noise. A burn-in keeps every lag inside generated history.
pub fn synth_lagged(n_vars: usize, rows: usize, spec: &LagSpec, seed: u64) -> Result<(MultivariateSeries, SynthMetadata)> {
    if n_vars == 0 || rows == 0 {
        return Err(Error::Config("synthetic series needs at least one variable and one row".into()));
    }
    let order = spec.validate(n_vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let has_parent: Vec<bool> = (0..n_vars).map(|v| spec.edges.iter().any(|e| e.target == v)).collect();
    let sources: Vec<Option<SourceProcess>> = has_parent
        .iter()
        .map(|&p| {
            (!p).then(|| SourceProcess {
                phi: 0.95,
                innovation_std: 0.3,
                amplitude: 1.0,
                period: rng.random_range(16.0..64.0),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            })
        })
        .collect();
    let max_delay = spec.edges.iter().map(|e| e.delay + e.jitter).max().unwrap_or(0);
    let burn_in = 200 + max_delay * n_vars;
    let total = rows + burn_in;
    let std_normal = Normal::new(0.0, 1.0).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut ar = vec![0.0; n_vars];
    let mut x = vec![0.0; total * n_vars];
    for t in 0..total {
        for &v in &order {
            let value = match &sources[v] {
                Some(s) => {
                    ar[v] = s.phi * ar[v] + s.innovation_std * std_normal.sample(&mut rng);
                    ar[v] + s.amplitude * (std::f64::consts::TAU * t as f64 / s.period + s.phase).sin()
                }
                None => {
                    let mut acc = 0.0;
                    for e in spec.edges.iter().filter(|e| e.target == v) {
                        let shift = if e.jitter > 0 {
                            rng.random_range(e.delay - e.jitter..=e.delay + e.jitter)
                        } else {
                            e.delay
                        };
                        if let Some(src_t) = t.checked_sub(shift) {
                            acc += e.gain * x[src_t * n_vars + e.source];
                        }
                    }
                    if spec.noise_std > 0.0 {
                        acc += spec.noise_std * std_normal.sample(&mut rng);
                    }
                    acc
                }
            };
            x[t * n_vars + v] = value;
        }
    }
    let values = Tensor::new(&[rows, n_vars], x[burn_in * n_vars..].to_vec())?;
    let names = (0..n_vars).map(|v| format!("x{v}")).collect();
    let series = MultivariateSeries::new(names, values, None)?;
    let meta = SynthMetadata {
        n_vars,
        rows,
        seed,
        burn_in,
        lag_spec: spec.clone(),
        sources,
    };
    Ok((series, meta))
}

/// Sidecar path for a synthetic CSV: `name.csv` → `name.meta.json`.
pub fn metadata_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Writes the CSV and its JSON sidecar; returns both paths.
pub fn write_synthetic(series: &MultivariateSeries, meta: &SynthMetadata, csv_path: &Path) -> Result<(PathBuf, PathBuf)> {
    write_csv(series, csv_path)?;
    let meta_path = metadata_path(csv_path);
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok((csv_path.to_path_buf(), meta_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn series(rows: usize, d: usize) -> MultivariateSeries {
        let values = Tensor::new(&[rows, d], (0..rows * d).map(|v| v as f64).collect()).unwrap();
        MultivariateSeries::new((0..d).map(|j| format!("v{j}")).collect(), values, None).unwrap()
    }

    #[test]
    fn loads_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "a,b\n1,2\n3,4\n5,6.5\n").unwrap();
        let s = load_csv(&p).unwrap();
        assert_eq!(s.values.shape(), &[3, 2]);
        assert_eq!(s.values.at(2, 1), 6.5);
        assert!(s.timestamps.is_none());
    }

    #[test]
    fn date_column_is_excluded() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "date,HUFL,OT\n2016-07-01 00:00:00,1,2\n2016-07-01 01:00:00,3,4\n").unwrap();
        let s = load_csv(&p).unwrap();
        assert_eq!(s.names, vec!["HUFL", "OT"]);
        assert_eq!(s.timestamps.as_ref().unwrap()[1], "2016-07-01 01:00:00");
    }

    #[test]
    fn bad_cell_reports_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "a,b\n1,2\n3,x\n").unwrap();
        match load_csv(&p) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (3, 2)),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "a,b\n1,\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Parse { row: 2, col: 2, .. })));
        fs::write(&p, "a,b\n1,NaN\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Empty(_))));
        fs::write(&p, "a,b\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Empty(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values = Tensor::new(&[20, 3], (0..60).map(|_| rng.random::<f64>() * 1e3 - 1e-7).collect()).unwrap();
        let s = MultivariateSeries::new(
            vec!["a".into(), "b".into(), "c".into()],
            values,
            Some((0..20).map(|t| format!("t{t}")).collect()),
        )
        .unwrap();
        write_csv(&s, &p).unwrap();
        assert_eq!(load_csv(&p).unwrap(), s);
    }

    #[test]
    fn window_counts_and_contents() {
        let s = series(200, 2);
        let w = make_windows(&s, 96, 96, 1).unwrap();
        assert_eq!(w.len(), 9);
        for (k, sample) in w.iter().enumerate() {
            assert_eq!(sample.x_his.at(0, 1), (k * 2 + 1) as f64);
            assert_eq!(sample.x_future.at(0, 0), ((k + 96) * 2) as f64);
            assert_eq!(sample.x_future.at(95, 1), ((k + 191) * 2 + 1) as f64);
        }
        assert!(make_windows(&s, 150, 60, 1).is_err());
    }

    #[test]
    fn stride_equal_to_lookback_gives_disjoint_histories() {
        let s = series(400, 1);
        let w = make_windows(&s, 50, 10, 50).unwrap();
        for pair in w.windows(2) {
            assert_eq!(pair[1].start, pair[0].start + 50);
        }
    }

    #[test]
    fn ratio_split_rows() {
        let spec = SplitSpec::ratio(1000, 96).unwrap();
        assert_eq!(spec.train, 0..700);
        assert_eq!(spec.val.end - spec.val.start - 96, 100);
        assert_eq!(spec.test.end - spec.test.start - 96, 200);
        assert_eq!(spec.val.start + 96, spec.train.end);
    }

    #[test]
    fn named_split_window_counts() {
        let spec = SplitSpec::for_dataset(Some("ETTh1"), 17420, 96).unwrap();
        let counts: Vec<usize> = [&spec.train, &spec.val, &spec.test]
            .iter()
            .map(|r| window_count(r.len(), 96, 96).unwrap())
            .collect();
        assert_eq!(counts, vec![8545, 2881, 2881]);
        let spec = SplitSpec::for_dataset(Some("ETTm2"), 69680, 96).unwrap();
        assert_eq!(window_count(spec.train.len(), 96, 96).unwrap(), 34465);
        assert_eq!(window_count(spec.test.len(), 96, 96).unwrap(), 11521);
        assert!(SplitSpec::for_dataset(Some("ETTh1"), 1000, 96).is_err());
    }

    #[test]
    fn first_validation_history_ends_at_train_boundary() {
        let s = series(1000, 1);
        let spec = SplitSpec::ratio(1000, 96).unwrap();
        let (_, val, _) = chronological_split(&s, &spec).unwrap();
        let w = make_windows(&val, 96, 10, 1).unwrap();
        assert_eq!(w[0].x_his.at(95, 0), (spec.train.end - 1) as f64);
        assert_eq!(w[0].x_future.at(0, 0), spec.train.end as f64);
    }

    #[test]
    fn standardizer_round_trip() {
        let s = series(50, 3);
        let z = Standardizer::fit(&s);
        let t = z.transform(&s).unwrap();
        let m: f64 = t.column(1).iter().sum::<f64>() / 50.0;
        assert!(m.abs() < 1e-12);
        assert!(z.inverse(&t).unwrap().values.max_abs_diff(&s.values) < 1e-9);
    }

    #[test]
    fn noiseless_single_edge_is_exact_shift() {
        let spec = LagSpec {
            edges: vec![LagEdge {
                source: 0,
                target: 1,
                delay: 16,
                gain: 1.0,
                jitter: 0,
            }],
            noise_std: 0.0,
        };
        let (s, meta) = synth_lagged(2, 300, &spec, 7).unwrap();
        for t in 16..300 {
            assert_eq!(s.values.at(t, 1), s.values.at(t - 16, 0));
        }
        assert!(meta.sources[0].is_some() && meta.sources[1].is_none());
        let again = synth_lagged(2, 300, &spec, 7).unwrap().0;
        assert_eq!(again, s);
    }

    #[test]
    fn cyclic_zero_lag_is_rejected() {
        let spec = LagSpec::parse_edges("0>1:0,1>0:0", 0.0).unwrap();
        assert!(matches!(synth_lagged(2, 10, &spec, 1), Err(Error::Config(_))));
        let ok = LagSpec::parse_edges("0>1:0,1>0:3", 0.0).unwrap();
        assert!(synth_lagged(2, 10, &ok, 1).is_ok());
    }

    #[test]
    fn edge_parsing() {
        let spec = LagSpec::parse_edges("0>2:16, 1>3:24:0.5:2", 0.1).unwrap();
        assert_eq!(spec.edges.len(), 2);
        assert_eq!(spec.edges[1].gain, 0.5);
        assert_eq!(spec.edges[1].jitter, 2);
        assert!(LagSpec::parse_edges("0-2:16", 0.0).is_err());
    }

    #[test]
    fn synthetic_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let spec = LagSpec::parse_edges("0>1:8", 0.05).unwrap();
        let (s, meta) = synth_lagged(2, 100, &spec, 1).unwrap();
        let (c, m) = write_synthetic(&s, &meta, &dir.path().join("syn.csv")).unwrap();
        assert!(c.exists());
        assert!(m.ends_with("syn.meta.json"));
        let back: SynthMetadata = serde_json::from_str(&fs::read_to_string(m).unwrap()).unwrap();
        assert_eq!(back, meta);
    }
}
