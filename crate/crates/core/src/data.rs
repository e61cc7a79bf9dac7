//! Traffic datasets: bundle files, a synthetic generator, chronological
//! splits, sliding windows and z-score normalisation.
//!
//! A bundle is a directory holding
//!
//! ```text
//! series.csv      timestamp,node_0,...,node_{N-1}   (empty cell = null)
//! distances.csv   N rows of N comma-separated distances
//! metadata.txt    key: value lines (name, frequency_minutes, units)
//! ```
//!
//! Nulls stay `None` internally. Model inputs replace them with 0 after
//! normalisation and targets carry an explicit mask.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::landmarks::NodeGeometry;
use crate::tensor::Tensor;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";
pub const SERIES_FILE: &str = "series.csv";
pub const DISTANCES_FILE: &str = "distances.csv";
pub const METADATA_FILE: &str = "metadata.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Metadata {
    pub name: String,
    pub frequency_minutes: u32,
    pub units: String,
}

/// `L×N` measurements with their calendar flags. Flags are 1-based:
/// day-of-week 1 (Monday) ..= 7, time-of-day 1 ..= steps per day.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficFlow {
    timestamps: Vec<NaiveDateTime>,
    values: Vec<Option<f64>>,
    nodes: usize,
    day_of_week: Vec<usize>,
    time_of_day: Vec<usize>,
}

impl TrafficFlow {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        values: Vec<Option<f64>>,
        nodes: usize,
        frequency_minutes: u32,
    ) -> Result<Self> {
        if timestamps.is_empty() || nodes == 0 {
            return Err(Error::Data("series has no rows or no nodes".into()));
        }
        if values.len() != timestamps.len() * nodes {
            return Err(Error::Data(format!(
                "{} values for {} steps × {nodes} nodes",
                values.len(),
                timestamps.len()
            )));
        }
        if frequency_minutes == 0 || 1440 % frequency_minutes != 0 {
            return Err(Error::Data(format!(
                "frequency of {frequency_minutes} minutes does not divide a day"
            )));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("series contains a non-finite value".into()));
        }
        let day_of_week = timestamps
            .iter()
            .map(|t| t.weekday().number_from_monday() as usize)
            .collect();
        let time_of_day = timestamps
            .iter()
            .map(|t| (t.hour() * 60 + t.minute()) as usize / frequency_minutes as usize + 1)
            .collect();
        Ok(Self {
            timestamps,
            values,
            nodes,
            day_of_week,
            time_of_day,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn value(&self, step: usize, node: usize) -> Option<f64> {
        self.values[step * self.nodes + node]
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn day_of_week(&self) -> &[usize] {
        &self.day_of_week
    }

    pub fn time_of_day(&self) -> &[usize] {
        &self.time_of_day
    }

    pub fn null_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub flow: TrafficFlow,
    pub geometry: NodeGeometry,
    pub metadata: Metadata,
}

impl DatasetBundle {
    pub fn new(flow: TrafficFlow, geometry: NodeGeometry, metadata: Metadata) -> Result<Self> {
        if flow.nodes() != geometry.n_nodes() {
            return Err(Error::Data(format!(
                "series has {} nodes but the distance matrix has {}",
                flow.nodes(),
                geometry.n_nodes()
            )));
        }
        Ok(Self {
            flow,
            geometry,
            metadata,
        })
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn parse_metadata(path: &Path) -> Result<Metadata> {
    let text = read(path)?;
    let (mut name, mut freq, mut units) = (None, None, None);
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| parse_err(path, i + 1, "expected `key: value`"))?;
        let value = value.trim().to_string();
        match key.trim() {
            "name" => name = Some(value),
            "units" => units = Some(value),
            "frequency_minutes" => {
                freq = Some(
                    value
                        .parse::<u32>()
                        .map_err(|e| parse_err(path, i + 1, format!("frequency_minutes: {e}")))?,
                )
            }
            other => return Err(parse_err(path, i + 1, format!("unknown key `{other}`"))),
        }
    }
    let missing = |k: &str| Error::Data(format!("{}: missing key `{k}`", path.display()));
    Ok(Metadata {
        name: name.ok_or_else(|| missing("name"))?,
        frequency_minutes: freq.ok_or_else(|| missing("frequency_minutes"))?,
        units: units.ok_or_else(|| missing("units"))?,
    })
}

fn parse_series(path: &Path) -> Result<(Vec<NaiveDateTime>, Vec<Option<f64>>, usize)> {
    let text = read(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty series file", path.display())))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.first() != Some(&"timestamp") || columns.len() < 2 {
        return Err(parse_err(path, 1, "header must be `timestamp,node_0,...`"));
    }
    for (k, c) in columns[1..].iter().enumerate() {
        if *c != format!("node_{k}") {
            return Err(parse_err(path, 1, format!("column {} should be node_{k}, found `{c}`", k + 1)));
        }
    }
    let nodes = columns.len() - 1;
    let (mut stamps, mut values) = (Vec::new(), Vec::new());
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != nodes + 1 {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected {} fields, found {}", nodes + 1, fields.len()),
            ));
        }
        let stamp = NaiveDateTime::parse_from_str(fields[0].trim(), TIMESTAMP_FORMAT)
            .map_err(|e| parse_err(path, i + 1, format!("timestamp `{}`: {e}", fields[0])))?;
        if let Some(prev) = stamps.last() {
            if stamp <= *prev {
                return Err(parse_err(path, i + 1, "timestamps must increase"));
            }
        }
        stamps.push(stamp);
        for cell in &fields[1..] {
            let cell = cell.trim();
            if cell.is_empty() {
                values.push(None);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|e| parse_err(path, i + 1, format!("value `{cell}`: {e}")))?;
                if !v.is_finite() {
                    return Err(parse_err(path, i + 1, format!("non-finite value `{cell}`")));
                }
                values.push(Some(v));
            }
        }
    }
    if stamps.is_empty() {
        return Err(Error::Data(format!("{}: series has no data rows", path.display())));
    }
    Ok((stamps, values, nodes))
}

fn parse_distances(path: &Path) -> Result<(usize, Vec<f64>)> {
    let text = read(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(path, i + 1, format!("distance `{}`: {e}", c.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((i + 1, row));
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::Data(format!("{}: empty distance matrix", path.display())));
    }
    let mut flat = Vec::with_capacity(n * n);
    for (line, row) in rows {
        if row.len() != n {
            return Err(parse_err(path, line, format!("expected {n} columns, found {}", row.len())));
        }
        flat.extend(row);
    }
    Ok((n, flat))
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let metadata = parse_metadata(&dir.join(METADATA_FILE))?;
    let (stamps, values, nodes) = parse_series(&dir.join(SERIES_FILE))?;
    let (n, distances) = parse_distances(&dir.join(DISTANCES_FILE))?;
    if n != nodes {
        return Err(Error::Data(format!(
            "series has {nodes} nodes but the distance matrix has {n}"
        )));
    }
    let flow = TrafficFlow::new(stamps, values, nodes, metadata.frequency_minutes)?;
    DatasetBundle::new(flow, NodeGeometry::new(n, distances)?, metadata)
}

pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let flow = &bundle.flow;
    let n = flow.nodes();

    let mut series = String::from("timestamp");
    for k in 0..n {
        write!(series, ",node_{k}").unwrap();
    }
    series.push('\n');
    for (t, stamp) in flow.timestamps().iter().enumerate() {
        series.push_str(&stamp.format(TIMESTAMP_FORMAT).to_string());
        for k in 0..n {
            series.push(',');
            if let Some(v) = flow.value(t, k) {
                write!(series, "{v}").unwrap();
            }
        }
        series.push('\n');
    }
    fs::write(dir.join(SERIES_FILE), series)?;

    let mut distances = String::new();
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| bundle.geometry.distance(i, j).to_string()).collect();
        distances.push_str(&row.join(","));
        distances.push('\n');
    }
    fs::write(dir.join(DISTANCES_FILE), distances)?;

    let m = &bundle.metadata;
    fs::write(
        dir.join(METADATA_FILE),
        format!(
            "name: {}\nfrequency_minutes: {}\nunits: {}\n",
            m.name, m.frequency_minutes, m.units
        ),
    )?;
    Ok(())
}

/// Centres of the two planted node groups.
pub const SYNTHETIC_GROUP_CENTRES: [(f64, f64); 2] = [(0.0, 0.0), (40.0, 0.0)];

/// Desk-scale stand-in for a real sensor network: nodes in two spatially
/// separated groups (even nodes near the first centre, odd nodes near the
/// second), each with a noisy daily sinusoid whose phase follows its
/// position. About 1% of readings are null.
pub fn generate_synthetic(nodes: usize, length: usize, seed: u64) -> Result<DatasetBundle> {
    if nodes < 2 || length < 48 {
        return Err(Error::Data(format!(
            "synthetic data needs at least 2 nodes and 48 steps, got {nodes} and {length}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<(f64, f64)> = (0..nodes)
        .map(|k| {
            let (cx, cy) = SYNTHETIC_GROUP_CENTRES[k % 2];
            (cx + rng.random_range(-3.0..3.0), cy + rng.random_range(-3.0..3.0))
        })
        .collect();
    let noise = Normal::new(0.0, 1.0).unwrap();
    let start = NaiveDate::from_ymd_opt(2012, 3, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let timestamps: Vec<NaiveDateTime> = (0..length)
        .map(|t| start + Duration::minutes(5 * t as i64))
        .collect();
    let mut values = Vec::with_capacity(length * nodes);
    for t in 0..length {
        let angle = std::f64::consts::TAU * (t % 288) as f64 / 288.0;
        for &(x, y) in &coords {
            let phase = (x + y) / 20.0;
            let level = 55.0 - x / 8.0;
            let v = level + 10.0 * (angle + phase).sin() + noise.sample(&mut rng);
            values.push(if rng.random::<f64>() < 0.01 { None } else { Some(v) });
        }
    }
    let flow = TrafficFlow::new(timestamps, values, nodes, 5)?;
    let metadata = Metadata {
        name: format!("synthetic-{nodes}x{length}-seed{seed}"),
        frequency_minutes: 5,
        units: "mph".into(),
    };
    DatasetBundle::new(flow, NodeGeometry::from_coordinates(&coords), metadata)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(r.is_finite() && *r > 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {parts:?} must be positive and sum to 1"
            )));
        }
        Ok(())
    }

    /// Chronological boundaries `[0, b1, b2, len]` rounded to the nearest step.
    pub fn boundaries(&self, len: usize) -> [usize; 4] {
        let b1 = (self.train * len as f64).round() as usize;
        let b2 = ((self.train + self.val) * len as f64).round() as usize;
        [0, b1.min(len), b2.min(len), len]
    }
}

/// Window start indices inside one chronological split. Window `s` reads
/// inputs from steps `s..s+T` and targets from `s+T..s+T+T'`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub range: Range<usize>,
    pub starts: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

/// Stride-1 windows within `range`.
pub fn windows_in(range: Range<usize>, input_steps: usize, output_steps: usize) -> Result<WindowSet> {
    let span = input_steps + output_steps;
    if range.len() < span {
        return Err(Error::Data(format!(
            "split {range:?} has {} steps, fewer than one window of {span}",
            range.len()
        )));
    }
    let starts = (range.start..=range.end - span).collect();
    Ok(WindowSet { range, starts })
}

pub fn make_windows(
    flow: &TrafficFlow,
    input_steps: usize,
    output_steps: usize,
    ratios: SplitRatios,
) -> Result<Splits> {
    ratios.validate()?;
    let [a, b, c, d] = ratios.boundaries(flow.len());
    Ok(Splits {
        train: windows_in(a..b, input_steps, output_steps)?,
        val: windows_in(b..c, input_steps, output_steps)?,
        test: windows_in(c..d, input_steps, output_steps)?,
    })
}

/// Per-node z-score statistics fitted on non-null training readings.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(flow: &TrafficFlow, steps: Range<usize>) -> Result<Self> {
        let n = flow.nodes();
        let mut mean = Vec::with_capacity(n);
        let mut std = Vec::with_capacity(n);
        for k in 0..n {
            let xs: Vec<f64> = steps.clone().filter_map(|t| flow.value(t, k)).collect();
            if xs.is_empty() {
                return Err(Error::Data(format!("series node_{k} has no readings in the training split")));
            }
            let mu = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64;
            if var <= 0.0 {
                return Err(Error::Data(format!(
                    "series node_{k} is constant ({mu}) over the training split"
                )));
            }
            mean.push(mu);
            std.push(var.sqrt());
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, value: f64, node: usize) -> f64 {
        (value - self.mean[node]) / self.std[node]
    }

    pub fn denormalize(&self, value: f64, node: usize) -> f64 {
        value * self.std[node] + self.mean[node]
    }

    /// Applies [`Self::normalize`] to a tensor whose second-to-last
    /// dimension indexes nodes (`[.., N, 1]`).
    pub fn normalize_tensor(&self, t: &Tensor) -> Tensor {
        let n = self.mean.len();
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = self.normalize(*v, i % n);
        }
        out
    }

    pub fn denormalize_tensor(&self, t: &Tensor) -> Tensor {
        let n = self.mean.len();
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = self.denormalize(*v, i % n);
        }
        out
    }
}

/// A batch of windows: normalised inputs `[B,T,N,3]` (value, day-of-week,
/// time-of-day), targets `[B,T',N,1]` in original units and a mask that is
/// false at null targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub mask: Vec<bool>,
}

impl ForecastBatch {
    pub fn build(
        flow: &TrafficFlow,
        norm: &Normalizer,
        starts: &[usize],
        input_steps: usize,
        output_steps: usize,
    ) -> Result<Self> {
        let n = flow.nodes();
        let b = starts.len();
        if b == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        if norm.mean.len() != n {
            return Err(Error::Data(format!(
                "normalizer fitted on {} nodes, flow has {n}",
                norm.mean.len()
            )));
        }
        let mut inputs = Vec::with_capacity(b * input_steps * n * 3);
        let mut targets = Vec::with_capacity(b * output_steps * n);
        let mut mask = Vec::with_capacity(b * output_steps * n);
        for &s in starts {
            if s + input_steps + output_steps > flow.len() {
                return Err(Error::Data(format!("window at {s} runs past the series end")));
            }
            for t in s..s + input_steps {
                for k in 0..n {
                    let v = flow.value(t, k).map_or(0.0, |v| norm.normalize(v, k));
                    inputs.extend([v, flow.day_of_week()[t] as f64, flow.time_of_day()[t] as f64]);
                }
            }
            for t in s + input_steps..s + input_steps + output_steps {
                for k in 0..n {
                    let v = flow.value(t, k);
                    targets.push(v.unwrap_or(0.0));
                    mask.push(v.is_some());
                }
            }
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Data("every target in the batch is null".into()));
        }
        Ok(Self {
            inputs: Tensor::new(&[b, input_steps, n, 3], inputs)?,
            targets: Tensor::new(&[b, output_steps, n, 1], targets)?,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn masked_fraction(&self) -> f64 {
        self.mask.iter().filter(|m| !**m).count() as f64 / self.mask.len() as f64
    }

    /// Input window `i` as `[T,N,3]`.
    pub fn input(&self, i: usize) -> Tensor {
        let s = &self.inputs.shape()[1..];
        let per = s.iter().product::<usize>();
        Tensor::new(s, self.inputs.data()[i * per..(i + 1) * per].to_vec()).unwrap()
    }

    /// Target window `i` as `[T',N,1]` and its mask.
    pub fn target(&self, i: usize) -> (Tensor, &[bool]) {
        let s = &self.targets.shape()[1..];
        let per = s.iter().product::<usize>();
        let t = Tensor::new(s, self.targets.data()[i * per..(i + 1) * per].to_vec()).unwrap();
        (t, &self.mask[i * per..(i + 1) * per])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_count_single_split() {
        let w = windows_in(0..30, 12, 12).unwrap();
        assert_eq!(w.len(), 7);
        assert!(windows_in(0..23, 12, 12).is_err());
    }

    #[test]
    fn default_ratio_boundaries() {
        assert_eq!(SplitRatios::default().boundaries(100), [0, 70, 80, 100]);
    }

    #[test]
    fn ratios_validated() {
        let bad = SplitRatios {
            train: 0.7,
            val: 0.2,
            test: 0.2,
        };
        assert!(bad.validate().is_err());
        let neg = SplitRatios {
            train: 1.1,
            val: -0.1,
            test: 0.0,
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = generate_synthetic(4, 100, 7).unwrap();
        assert_eq!(a, generate_synthetic(4, 100, 7).unwrap());
        assert_ne!(a.flow, generate_synthetic(4, 100, 8).unwrap().flow);
        assert!(generate_synthetic(1, 100, 7).is_err());
        assert!(generate_synthetic(4, 47, 7).is_err());
    }

    #[test]
    fn time_flags_cycle() {
        let b = generate_synthetic(2, 600, 0).unwrap();
        let tod = b.flow.time_of_day();
        for (t, &f) in tod.iter().enumerate() {
            assert_eq!(f, t % 288 + 1);
        }
        // 2012-03-01 was a Thursday.
        assert_eq!(b.flow.day_of_week()[0], 4);
        assert_eq!(b.flow.day_of_week()[288], 5);
    }

    #[test]
    fn constant_series_named() {
        let stamps = (0..4)
            .map(|t| {
                NaiveDate::from_ymd_opt(2020, 1, 1)
                    .unwrap()
                    .and_hms_opt(0, 5 * t, 0)
                    .unwrap()
            })
            .collect();
        let values = (0..8).map(|i| Some(if i % 2 == 0 { 3.0 } else { i as f64 })).collect();
        let flow = TrafficFlow::new(stamps, values, 2, 5).unwrap();
        let e = Normalizer::fit(&flow, 0..4).unwrap_err().to_string();
        assert!(e.contains("node_0"), "{e}");
    }

    #[test]
    fn normalize_round_trip() {
        let b = generate_synthetic(3, 100, 1).unwrap();
        let norm = Normalizer::fit(&b.flow, 0..70).unwrap();
        for k in 0..3 {
            for x in [-5.0, 0.0, 12.5, 80.0] {
                assert!((norm.denormalize(norm.normalize(x, k), k) - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_null_batch_rejected() {
        let stamps: Vec<_> = (0..4)
            .map(|t| {
                NaiveDate::from_ymd_opt(2020, 1, 1)
                    .unwrap()
                    .and_hms_opt(0, 5 * t, 0)
                    .unwrap()
            })
            .collect();
        let values = vec![Some(1.0), Some(2.0), None, None];
        let flow = TrafficFlow::new(stamps, values, 1, 5).unwrap();
        let norm = Normalizer {
            mean: vec![0.0],
            std: vec![1.0],
        };
        assert!(ForecastBatch::build(&flow, &norm, &[0], 2, 2).is_err());
        let ok = ForecastBatch::build(&flow, &norm, &[0], 1, 2).unwrap();
        assert_eq!(ok.mask, vec![true, false]);
        assert_eq!(ok.masked_fraction(), 0.5);
    }
}
