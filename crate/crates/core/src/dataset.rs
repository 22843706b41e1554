//! Multimodal time-series datasets: ingestion, normalization, windowing and
//! a seeded synthetic generator.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower/upper clip applied to test data after scaling.
pub const TEST_CLIP: (f64, f64) = (-1.0, 2.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// `N` aligned univariate series over `T` timestamps, each tagged with a
/// modality id in `1..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    names: Vec<String>,
    /// `N × T`
    values: Array2<f64>,
    modality: Vec<usize>,
    labels: Option<Vec<u8>>,
    split: Split,
}

impl TimeSeriesDataset {
    pub fn new(
        names: Vec<String>,
        values: Array2<f64>,
        modality: Vec<usize>,
        labels: Option<Vec<u8>>,
        split: Split,
    ) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(Error::Data("dataset needs at least one series".into()));
        }
        if values.nrows() != n || modality.len() != n {
            return Err(Error::Shape(format!(
                "{} names, {} value rows, {} modality ids",
                n,
                values.nrows(),
                modality.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Data(format!("duplicate series name `{name}`")));
            }
        }
        check_modalities(&modality)?;
        if let Some((idx, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (i, t) = (idx / values.ncols(), idx % values.ncols());
            return Err(Error::Data(format!(
                "non-finite value {v} in series `{}` at t={t}",
                names[i]
            )));
        }
        if let Some(l) = &labels {
            if l.len() != values.ncols() {
                return Err(Error::Shape(format!(
                    "{} labels for {} timestamps",
                    l.len(),
                    values.ncols()
                )));
            }
            if l.iter().any(|&x| x > 1) {
                return Err(Error::Data("labels must be 0 or 1".into()));
            }
        }
        Ok(TimeSeriesDataset {
            names,
            values,
            modality,
            labels,
            split,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn modality(&self) -> &[usize] {
        &self.modality
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn n_series(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_modalities(&self) -> usize {
        self.modality.iter().copied().max().unwrap_or(0)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn with_labels(self, labels: Option<Vec<u8>>) -> Result<Self> {
        let split = if labels.is_some() { Split::Test } else { self.split };
        TimeSeriesDataset::new(self.names, self.values, self.modality, labels, split)
    }

    /// Timestamps `range` as a new dataset (labels sliced alongside).
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start >= range.end {
            return Err(Error::Data(format!("slice {range:?} outside 0..{}", self.len())));
        }
        let values = self.values.slice(s![.., range.clone()]).to_owned();
        let labels = self.labels.as_ref().map(|l| l[range].to_vec());
        TimeSeriesDataset::new(self.names.clone(), values, self.modality.clone(), labels, self.split)
    }

    /// Reorders series to follow `names`. Fails unless both name sets agree.
    pub fn align_to(&self, names: &[String], modality: &[usize]) -> Result<Self> {
        if names.len() != self.n_series() {
            return Err(Error::Data(format!(
                "dataset has {} series, model expects {}",
                self.n_series(),
                names.len()
            )));
        }
        let index: HashMap<&str, usize> = self.names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut order = Vec::with_capacity(names.len());
        for (k, name) in names.iter().enumerate() {
            let &i = index
                .get(name.as_str())
                .ok_or_else(|| Error::Data(format!("series `{name}` missing from dataset")))?;
            if self.modality[i] != modality[k] {
                return Err(Error::Data(format!(
                    "series `{name}` has modality {} but model expects {}",
                    self.modality[i], modality[k]
                )));
            }
            order.push(i);
        }
        let values = self.values.select(Axis(0), &order);
        TimeSeriesDataset::new(
            names.to_vec(),
            values,
            modality.to_vec(),
            self.labels.clone(),
            self.split,
        )
    }
}

fn check_modalities(modality: &[usize]) -> Result<()> {
    let m = modality.iter().copied().max().unwrap_or(0);
    if modality.contains(&0) {
        return Err(Error::Data("modality ids start at 1".into()));
    }
    if m > modality.len() {
        return Err(Error::Data(format!("{m} modalities for {} series", modality.len())));
    }
    let present: HashSet<usize> = modality.iter().copied().collect();
    if let Some(missing) = (1..=m).find(|id| !present.contains(id)) {
        return Err(Error::Data(format!(
            "modality id {missing} is unused; ids must cover 1..={m}"
        )));
    }
    Ok(())
}

/// Loads a dataset from a CSV (header = series names, one row per
/// timestamp), a JSON modality map, and an optional labels CSV.
pub fn load_dataset(
    data_path: impl AsRef<Path>,
    modality_path: impl AsRef<Path>,
    labels_path: Option<&Path>,
) -> Result<TimeSeriesDataset> {
    let modality_map = read_modalities(modality_path.as_ref())?;
    load_dataset_with_modalities(data_path, &modality_map, labels_path)
}

/// [`load_dataset`] with the modality map already in hand, e.g. taken from
/// a trained model.
pub fn load_dataset_with_modalities(
    data_path: impl AsRef<Path>,
    modality_map: &BTreeMap<String, usize>,
    labels_path: Option<&Path>,
) -> Result<TimeSeriesDataset> {
    let data_path = data_path.as_ref();
    let (names, values) = read_values_csv(data_path)?;
    let name_set: HashSet<&str> = names.iter().map(String::as_str).collect();
    if let Some(unknown) = modality_map.keys().find(|k| !name_set.contains(k.as_str())) {
        return Err(Error::Data(format!("modality map names unknown series `{unknown}`")));
    }
    let modality = names
        .iter()
        .map(|n| {
            modality_map
                .get(n)
                .copied()
                .ok_or_else(|| Error::Data(format!("modality map is missing series `{n}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let t = values.ncols();
    let labels = labels_path.map(|p| read_labels(p, t)).transpose()?;
    let split = if labels.is_some() { Split::Test } else { Split::Train };
    TimeSeriesDataset::new(names, values, modality, labels, split)
}

fn read_values_csv(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let file_label = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if names.is_empty() || names.iter().any(|n| n.is_empty()) {
        return Err(Error::Data(format!("{file_label}: header must name every column")));
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (row_idx, record) in reader.records().enumerate() {
        // 1-based file line of this row, counting the header
        let row = row_idx + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != names.len() {
            return Err(Error::Cell {
                file: file_label.clone(),
                row,
                column: "*".into(),
                message: format!("expected {} cells, found {}", names.len(), record.len()),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            let cell_err = |message: String| Error::Cell {
                file: file_label.clone(),
                row,
                column: names[col].clone(),
                message,
            };
            if cell.is_empty() {
                return Err(cell_err("missing value".into()));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| cell_err(format!("non-numeric value `{cell}`")))?;
            if !v.is_finite() {
                return Err(cell_err(format!("non-finite value `{cell}`")));
            }
            columns[col].push(v);
        }
    }
    let t = columns[0].len();
    if t == 0 {
        return Err(Error::Data(format!("{file_label}: no data rows")));
    }
    let values = Array2::from_shape_fn((names.len(), t), |(i, j)| columns[i][j]);
    Ok((names, values))
}

fn read_modalities(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn read_labels(path: &Path, t: usize) -> Result<Vec<u8>> {
    #[derive(Deserialize)]
    struct Row {
        timestamp_index: usize,
        label: u8,
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut labels = vec![0u8; t];
    let mut seen = vec![false; t];
    for (k, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = k + 2;
        if row.timestamp_index >= t || row.label > 1 {
            return Err(Error::Cell {
                file: path.display().to_string(),
                row: line,
                column: "timestamp_index,label".into(),
                message: format!("index must be < {t} and label 0/1"),
            });
        }
        if std::mem::replace(&mut seen[row.timestamp_index], true) {
            return Err(Error::Data(format!(
                "{}: duplicate timestamp {}",
                path.display(),
                row.timestamp_index
            )));
        }
        labels[row.timestamp_index] = row.label;
    }
    Ok(labels)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Writes the values table (header = names, one row per timestamp).
/// `header` lines are written first as `#` comments.
pub fn write_values_csv(ds: &TimeSeriesDataset, path: &Path, header: &[String]) -> Result<()> {
    let mut file = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for line in header {
        writeln!(file, "# {line}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(ds.names()).map_err(|e| csv_error(path, e))?;
    for t in 0..ds.len() {
        let row: Vec<String> = ds.values.column(t).iter().map(|v| format!("{v}")).collect();
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_modalities(ds: &TimeSeriesDataset, path: &Path) -> Result<()> {
    let map: BTreeMap<&str, usize> = ds
        .names
        .iter()
        .map(String::as_str)
        .zip(ds.modality.iter().copied())
        .collect();
    let text = serde_json::to_string_pretty(&map).expect("map serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_labels(labels: &[u8], path: &Path, header: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for line in header {
        writeln!(w, "# {line}").map_err(io)?;
    }
    writeln!(w, "timestamp_index,label").map_err(io)?;
    for (t, l) in labels.iter().enumerate() {
        writeln!(w, "{t},{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Per-series min-max statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    /// `max - min`, or 1 for constant series.
    pub scale: Vec<f64>,
}

impl NormStats {
    pub fn fit(ds: &TimeSeriesDataset) -> Self {
        let mut min = Vec::with_capacity(ds.n_series());
        let mut scale = Vec::with_capacity(ds.n_series());
        for (i, row) in ds.values.axis_iter(Axis(0)).enumerate() {
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            if range > 0.0 {
                scale.push(range);
            } else {
                warn!("series `{}` is constant in training data; scaling by 1", ds.names[i]);
                scale.push(1.0);
            }
            min.push(lo);
        }
        NormStats { min, scale }
    }

    /// Series whose training range was degenerate.
    pub fn constant_series(&self, ds: &TimeSeriesDataset) -> Vec<String> {
        ds.values
            .axis_iter(Axis(0))
            .enumerate()
            .filter(|(i, row)| row.iter().all(|&v| v == self.min[*i]))
            .map(|(i, _)| ds.names[i].clone())
            .collect()
    }

    pub fn apply(&self, ds: &TimeSeriesDataset, clip: Option<(f64, f64)>) -> Result<TimeSeriesDataset> {
        if ds.n_series() != self.min.len() {
            return Err(Error::Shape(format!(
                "normalizer fitted on {} series, dataset has {}",
                self.min.len(),
                ds.n_series()
            )));
        }
        let mut values = ds.values.clone();
        for (i, mut row) in values.axis_iter_mut(Axis(0)).enumerate() {
            let (lo, sc) = (self.min[i], self.scale[i]);
            row.mapv_inplace(|v| {
                let z = (v - lo) / sc;
                match clip {
                    Some((a, b)) => z.clamp(a, b),
                    None => z,
                }
            });
        }
        TimeSeriesDataset::new(
            ds.names.clone(),
            values,
            ds.modality.clone(),
            ds.labels.clone(),
            ds.split,
        )
    }

    pub fn denormalize(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        let mut values = ds.values.clone();
        for (i, mut row) in values.axis_iter_mut(Axis(0)).enumerate() {
            let (lo, sc) = (self.min[i], self.scale[i]);
            row.mapv_inplace(|z| z * sc + lo);
        }
        TimeSeriesDataset::new(
            ds.names.clone(),
            values,
            ds.modality.clone(),
            ds.labels.clone(),
            ds.split,
        )
    }
}

/// Min-max scaling fitted on `train`; `test` is scaled with the same
/// statistics and clipped to [`TEST_CLIP`].
pub fn normalize(
    train: &TimeSeriesDataset,
    test: &TimeSeriesDataset,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset, NormStats)> {
    if train.names != test.names || train.modality != test.modality {
        return Err(Error::Data("train and test series names/modalities differ".into()));
    }
    let stats = NormStats::fit(train);
    let train_n = stats.apply(train, None)?;
    let test_n = stats.apply(test, Some(TEST_CLIP))?;
    Ok((train_n, test_n, stats))
}

/// Splits off the last `fraction` of timestamps as a validation tail.
pub fn split_validation(ds: &TimeSeriesDataset, fraction: f64) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    let t = ds.len();
    let tail = ((t as f64) * fraction).ceil() as usize;
    if tail == 0 || tail >= t {
        return Err(Error::Data(format!(
            "validation fraction {fraction} leaves no data on one side of {t} timestamps"
        )));
    }
    Ok((ds.slice(0..t - tail)?, ds.slice(t - tail..t)?))
}

/// One sliding-window view of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// `N × w`, columns `end - w .. end`.
    pub window: Array2<f64>,
    /// Observation right after the window, when one exists.
    pub next_value: Option<Array1<f64>>,
    /// One past the index of the last column; equivalently the 1-based
    /// timestamp of the window's final observation.
    pub end: usize,
}

/// Exclusive end indices of all windows: `w, w + stride, …, ≤ T`.
pub fn window_ends(len: usize, w: usize, stride: usize) -> Result<Vec<usize>> {
    if w < 2 {
        return Err(Error::Config(format!("window length must be at least 2, got {w}")));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    if w > len {
        return Err(Error::Data(format!("window length {w} exceeds series length {len}")));
    }
    Ok((w..=len).step_by(stride).collect())
}

pub fn make_windows(ds: &TimeSeriesDataset, w: usize, stride: usize) -> Result<Vec<WindowBatch>> {
    let ends = window_ends(ds.len(), w, stride)?;
    Ok(ends
        .into_iter()
        .map(|end| window_at(ds.values.view(), w, end))
        .collect())
}

pub(crate) fn window_at(values: ArrayView2<f64>, w: usize, end: usize) -> WindowBatch {
    let window = values.slice(s![.., end - w..end]).to_owned();
    let next_value = (end < values.ncols()).then(|| values.column(end).to_owned());
    WindowBatch {
        window,
        next_value,
        end,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Short additive spike on one series.
    Spike,
    /// One series frozen at its value at the interval start.
    Stuck,
    /// One series mirrors its modality's driver instead of following it.
    Decorrelation,
}

/// Ground-truth record of one injected anomaly (test timeline, `start..end`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyInterval {
    pub kind: AnomalyKind,
    pub series: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_series: usize,
    pub n_modalities: usize,
    pub train_len: usize,
    pub test_len: usize,
    pub anomaly_fraction: f64,
    pub seed: u64,
    /// Seed of the anomaly schedule; defaults to one derived from `seed`.
    /// The clean signal depends on `seed` alone.
    #[serde(default)]
    pub anomaly_seed: Option<u64>,
    #[serde(default = "all_kinds")]
    pub kinds: Vec<AnomalyKind>,
    /// Anomaly-free lead-in at the start of the test split.
    #[serde(default = "default_lead_in")]
    pub lead_in: usize,
}

fn all_kinds() -> Vec<AnomalyKind> {
    vec![AnomalyKind::Spike, AnomalyKind::Stuck, AnomalyKind::Decorrelation]
}

fn default_lead_in() -> usize {
    64
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_series: 10,
            n_modalities: 3,
            train_len: 4000,
            test_len: 2000,
            anomaly_fraction: 0.05,
            seed: 7,
            anomaly_seed: None,
            kinds: all_kinds(),
            lead_in: default_lead_in(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: TimeSeriesDataset,
    pub test: TimeSeriesDataset,
    pub anomalies: Vec<AnomalyInterval>,
}

/// Convenience form: train and test both of length `length`.
pub fn synthesize(
    n_series: usize,
    n_modalities: usize,
    length: usize,
    anomaly_fraction: f64,
    seed: u64,
) -> Result<SyntheticData> {
    synthesize_with(&SynthSpec {
        n_series,
        n_modalities,
        train_len: length,
        test_len: length,
        anomaly_fraction,
        seed,
        ..SynthSpec::default()
    })
}

struct Driver {
    shape: usize,
    period: f64,
    phase: f64,
    slow_period: f64,
    slow_phase: f64,
    slow_amp: f64,
    trend: f64,
}

impl Driver {
    fn at(&self, t: f64, total: f64) -> f64 {
        let x = 2.0 * std::f64::consts::PI * t / self.period + self.phase;
        let base = match self.shape {
            0 => x.sin(),
            1 => x.sin() + 0.35 * (2.0 * x).sin() + 0.15 * (3.0 * x).sin(),
            _ => (2.5 * x.sin()).tanh(),
        };
        let slow = self.slow_amp * (2.0 * std::f64::consts::PI * t / self.slow_period + self.slow_phase).sin();
        base + slow + self.trend * t / total
    }
}

/// Generates a seeded multimodal dataset. Series sharing a modality follow a
/// common latent driver with correlated noise; the test split carries
/// labeled anomalies of the requested kinds.
pub fn synthesize_with(spec: &SynthSpec) -> Result<SyntheticData> {
    let n = spec.n_series;
    let m = spec.n_modalities;
    if n == 0 || m == 0 || m > n {
        return Err(Error::Config(format!("need 1 <= modalities ({m}) <= series ({n})")));
    }
    if !(0.0..=0.3).contains(&spec.anomaly_fraction) {
        return Err(Error::Config(format!(
            "anomaly_fraction {} outside [0, 0.3]",
            spec.anomaly_fraction
        )));
    }
    if spec.train_len < 2 || spec.test_len < 2 {
        return Err(Error::Config("train_len and test_len must be at least 2".into()));
    }
    if spec.anomaly_fraction > 0.0 && spec.kinds.is_empty() {
        return Err(Error::Config("anomaly kinds list is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let drivers: Vec<Driver> = (0..m)
        .map(|k| Driver {
            shape: k % 3,
            period: rng.random_range(40.0..110.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            slow_period: rng.random_range(300.0..700.0),
            slow_phase: rng.random_range(0.0..std::f64::consts::TAU),
            slow_amp: rng.random_range(0.15..0.35),
            trend: rng.random_range(-0.1..0.1),
        })
        .collect();
    let modality: Vec<usize> = (0..n).map(|i| i * m / n + 1).collect();
    let gains: Vec<f64> = (0..n).map(|_| rng.random_range(0.7..1.3)).collect();
    let offsets: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let lags: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();

    let total = spec.train_len + spec.test_len;
    let total_f = total as f64;
    let (noise_scale, rho, ar): (f64, f64, f64) = (0.05, 0.6, 0.8);
    let mut shared = vec![0.0; m];
    let mut values = Array2::<f64>::zeros((n, total));
    for t in 0..total {
        for s in shared.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *s = ar * *s + (1.0 - ar * ar).sqrt() * e;
        }
        for i in 0..n {
            let k = modality[i] - 1;
            let e: f64 = StandardNormal.sample(&mut rng);
            let noise = noise_scale * (rho * shared[k] + (1.0 - rho * rho).sqrt() * e);
            let tt = t as f64 - lags[i];
            values[[i, t]] = gains[i] * drivers[k].at(tt, total_f) + offsets[i] + noise;
        }
    }

    let names: Vec<String> = (0..n).map(|i| format!("m{}_s{}", modality[i], i)).collect();
    let train_vals = values.slice(s![.., ..spec.train_len]).to_owned();
    let mut test_vals = values.slice(s![.., spec.train_len..]).to_owned();

    let anomaly_seed = spec.anomaly_seed.unwrap_or(spec.seed ^ 0x5DEE_CE66_D1CE_4E5B);
    let mut arng = ChaCha8Rng::seed_from_u64(anomaly_seed);
    let anomalies = schedule_anomalies(spec, n, &mut arng);
    let series_std: Vec<f64> = train_vals.axis_iter(Axis(0)).map(|r| r.std(0.0).max(1e-6)).collect();
    let mut labels = vec![0u8; spec.test_len];
    for a in &anomalies {
        let i = a.series;
        let k = modality[i] - 1;
        match a.kind {
            AnomalyKind::Spike => {
                let sign = if arng.random_bool(0.5) { 1.0 } else { -1.0 };
                let mag = arng.random_range(4.0..7.0) * series_std[i];
                for t in a.start..a.end {
                    test_vals[[i, t]] += sign * mag;
                }
            }
            AnomalyKind::Stuck => {
                let held = test_vals[[i, a.start]];
                for t in a.start..a.end {
                    test_vals[[i, t]] = held;
                }
            }
            AnomalyKind::Decorrelation => {
                // mirror the driver about its own level so the range is kept
                // while the trajectory runs against the rest of the modality
                for t in a.start..a.end {
                    let tt = (spec.train_len + t) as f64 - lags[i];
                    let d = drivers[k].at(tt, total_f);
                    let clean = gains[i] * d + offsets[i];
                    let noise = test_vals[[i, t]] - clean;
                    test_vals[[i, t]] = -gains[i] * d + offsets[i] + noise;
                }
            }
        }
        for l in &mut labels[a.start..a.end] {
            *l = 1;
        }
    }

    let train = TimeSeriesDataset::new(names.clone(), train_vals, modality.clone(), None, Split::Train)?;
    let test = TimeSeriesDataset::new(names, test_vals, modality, Some(labels), Split::Test)?;
    Ok(SyntheticData { train, test, anomalies })
}

fn schedule_anomalies(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<AnomalyInterval> {
    let len = spec.test_len;
    let target = (spec.anomaly_fraction * len as f64).round() as usize;
    let gap = 24;
    let lo = spec.lead_in.min(len / 2);
    let mut placed: Vec<AnomalyInterval> = Vec::new();
    let mut labeled = 0usize;
    let mut attempts = 0;
    while labeled < target && attempts < 10_000 {
        attempts += 1;
        let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
        let want = match kind {
            AnomalyKind::Spike => rng.random_range(1..=3),
            AnomalyKind::Stuck => rng.random_range(20..=60),
            AnomalyKind::Decorrelation => rng.random_range(30..=80),
        };
        let length = want.min(target - labeled);
        if lo + length >= len {
            continue;
        }
        let start = rng.random_range(lo..len - length);
        let end = start + length;
        let clash = placed.iter().any(|p| start < p.end + gap && p.start < end + gap);
        if clash {
            continue;
        }
        let series = rng.random_range(0..n);
        placed.push(AnomalyInterval {
            kind,
            series,
            start,
            end,
        });
        labeled += length;
    }
    placed.sort_by_key(|a| a.start);
    placed
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small(values: Array2<f64>) -> TimeSeriesDataset {
        let n = values.nrows();
        let names = (0..n).map(|i| format!("s{i}")).collect();
        TimeSeriesDataset::new(names, values, vec![1; n], None, Split::Train).unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_three_series_with_two_modalities() {
        let dir = tempfile::tempdir().unwrap();
        let data = write(dir.path(), "d.csv", "a,b,c\n1,2,3\n4,5,6\n");
        let modal = write(dir.path(), "m.json", r#"{"a":1,"b":1,"c":2}"#);
        let ds = load_dataset(&data, &modal, None).unwrap();
        assert_eq!(ds.n_series(), 3);
        assert_eq!(ds.n_modalities(), 2);
        assert_eq!(ds.names(), ["a", "b", "c"]);
        assert_eq!(ds.values()[[2, 1]], 6.0);
        assert_eq!(ds.split(), Split::Train);
    }

    #[test]
    fn nan_cell_is_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let data = write(dir.path(), "d.csv", "a,b\n1,2\n3,NaN\n");
        let modal = write(dir.path(), "m.json", r#"{"a":1,"b":1}"#);
        let err = load_dataset(&data, &modal, None).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("`b`"), "{err}");
    }

    #[test]
    fn non_numeric_and_missing_cells_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let modal = write(dir.path(), "m.json", r#"{"a":1,"b":1}"#);
        let data = write(dir.path(), "d.csv", "a,b\n1,x\n");
        let err = load_dataset(&data, &modal, None).unwrap_err().to_string();
        assert!(err.contains("non-numeric") && err.contains("row 2"), "{err}");
        let data = write(dir.path(), "e.csv", "a,b\n1,\n");
        let err = load_dataset(&data, &modal, None).unwrap_err().to_string();
        assert!(err.contains("missing value"), "{err}");
    }

    #[test]
    fn modality_map_must_match_series() {
        let dir = tempfile::tempdir().unwrap();
        let data = write(dir.path(), "d.csv", "a,b\n1,2\n");
        let extra = write(dir.path(), "m1.json", r#"{"a":1,"b":1,"z":2}"#);
        assert!(load_dataset(&data, &extra, None)
            .unwrap_err()
            .to_string()
            .contains("unknown series `z`"));
        let missing = write(dir.path(), "m2.json", r#"{"a":1}"#);
        assert!(load_dataset(&data, &missing, None)
            .unwrap_err()
            .to_string()
            .contains("missing series `b`"));
        let gap = write(dir.path(), "m3.json", r#"{"a":1,"b":3}"#);
        assert!(load_dataset(&data, &gap, None).is_err());
    }

    #[test]
    fn labels_file_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let data = write(dir.path(), "d.csv", "a\n1\n2\n3\n");
        let modal = write(dir.path(), "m.json", r#"{"a":1}"#);
        let labels = write(dir.path(), "l.csv", "timestamp_index,label\n0,0\n1,1\n2,0\n");
        let ds = load_dataset(&data, &modal, Some(&labels)).unwrap();
        assert_eq!(ds.labels().unwrap(), [0, 1, 0]);
        assert_eq!(ds.split(), Split::Test);
        let bad = write(dir.path(), "l2.csv", "timestamp_index,label\n5,1\n");
        assert!(load_dataset(&data, &modal, Some(&bad)).is_err());
    }

    #[test]
    fn wide_layout_loads() {
        let dir = tempfile::tempdir().unwrap();
        let n = 123;
        let header: Vec<String> = (0..n).map(|i| format!("SENSOR_{i:03}")).collect();
        let row: Vec<String> = (0..n).map(|i| format!("{}", i as f64 * 0.5)).collect();
        let body = format!("{}\n{}\n{}\n", header.join(","), row.join(","), row.join(","));
        let data = write(dir.path(), "wadi.csv", &body);
        let map: BTreeMap<String, usize> = header.iter().enumerate().map(|(i, h)| (h.clone(), i % 8 + 1)).collect();
        let modal = write(dir.path(), "m.json", &serde_json::to_string(&map).unwrap());
        let ds = load_dataset(&data, &modal, None).unwrap();
        assert_eq!(ds.n_series(), 123);
        assert_eq!(ds.n_modalities(), 8);
    }

    #[test]
    fn min_max_examples() {
        let train = small(array![[0.0, 5.0, 10.0], [3.0, 3.0, 3.0]]);
        let test = small(array![[25.0, -20.0, 5.0], [3.0, 4.0, 2.0]]);
        let (tr, te, stats) = normalize(&train, &test).unwrap();
        assert_eq!(tr.values().row(0).to_vec(), vec![0.0, 0.5, 1.0]);
        assert_eq!(tr.values().row(1).to_vec(), vec![0.0, 0.0, 0.0]);
        assert_eq!(stats.scale[1], 1.0);
        assert_eq!(te.values()[[0, 0]], 2.0);
        assert_eq!(te.values()[[0, 1]], -1.0);
        assert_eq!(te.values()[[0, 2]], 0.5);
        assert_eq!(stats.constant_series(&train), vec!["s1".to_string()]);
    }

    #[test]
    fn window_counts() {
        let ds = small(Array2::zeros((2, 100)));
        assert_eq!(make_windows(&ds, 32, 1).unwrap().len(), 69);
        let ds32 = small(Array2::zeros((1, 32)));
        let w = make_windows(&ds32, 32, 1).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].next_value.is_none());
        let ds10 = small(Array2::from_shape_fn((1, 10), |(_, t)| t as f64));
        let w = make_windows(&ds10, 4, 3).unwrap();
        assert_eq!(w.iter().map(|b| b.end).collect::<Vec<_>>(), vec![4, 7, 10]);
        assert_eq!(w[0].window.row(0).to_vec(), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(w[0].next_value.as_ref().unwrap()[0], 4.0);
        assert!(make_windows(&ds10, 11, 1).is_err());
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = synthesize(6, 2, 500, 0.05, 11).unwrap();
        let b = synthesize(6, 2, 500, 0.05, 11).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.anomalies, b.anomalies);
        let c = synthesize(6, 2, 500, 0.05, 12).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn zero_fraction_has_no_labels() {
        let d = synthesize(4, 2, 400, 0.0, 1).unwrap();
        assert!(d.test.labels().unwrap().iter().all(|&l| l == 0));
        assert!(d.anomalies.is_empty());
    }

    #[test]
    fn label_fraction_tracks_request() {
        let d = synthesize(10, 3, 10_000, 0.05, 3).unwrap();
        let count = d.test.labels().unwrap().iter().filter(|&&l| l == 1).count();
        let frac = count as f64 / 10_000.0;
        assert!((0.04..=0.06).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn labels_mark_exactly_perturbed_timestamps() {
        let spec = SynthSpec {
            n_series: 6,
            n_modalities: 3,
            train_len: 300,
            test_len: 1500,
            anomaly_fraction: 0.1,
            seed: 5,
            ..SynthSpec::default()
        };
        let dirty = synthesize_with(&spec).unwrap();
        let clean = synthesize_with(&SynthSpec {
            anomaly_fraction: 0.0,
            ..spec
        })
        .unwrap();
        let diff = dirty.test.values() - clean.test.values();
        let labels = dirty.test.labels().unwrap();
        for (t, &label) in labels.iter().enumerate() {
            let changed = diff.column(t).iter().any(|&d| d != 0.0);
            if label == 0 {
                assert!(!changed, "unlabeled t={t} perturbed");
            }
        }
        for a in &dirty.anomalies {
            let touched = (a.start..a.end).filter(|&t| diff[[a.series, t]] != 0.0).count();
            // a stuck segment leaves its first sample untouched by construction
            assert!(touched + 1 >= a.end - a.start, "{a:?}");
        }
    }

    #[test]
    fn align_reorders_columns() {
        let ds = TimeSeriesDataset::new(
            vec!["x".into(), "y".into()],
            array![[1.0, 2.0], [3.0, 4.0]],
            vec![1, 2],
            None,
            Split::Test,
        )
        .unwrap();
        let a = ds.align_to(&["y".into(), "x".into()], &[2, 1]).unwrap();
        assert_eq!(a.values().row(0).to_vec(), vec![3.0, 4.0]);
        assert!(ds.align_to(&["y".into(), "z".into()], &[2, 1]).is_err());
        assert!(ds.align_to(&["y".into(), "x".into()], &[1, 1]).is_err());
    }
}
