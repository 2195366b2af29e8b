//! Synthetic decision datasets and ingestion of load series.
//!
//! Every generator is a pure function of its spec and seed; the generator
//! algorithm name is stored with each dataset.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike, Weekday};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::random;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Shuffles `0..n` with `seed` and cuts it by the given fractions.
    pub fn random(n: usize, val: f64, test: f64, seed: u64) -> Result<Self> {
        if !(val >= 0.0 && test >= 0.0 && val + test < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "split fractions must be ≥ 0 and sum below 1, got val={val} test={test}"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut random::substream(seed, 0x5151));
        let n_test = (test * n as f64).round() as usize;
        let n_val = (val * n as f64).round() as usize;
        let mut test_idx = idx[..n_test].to_vec();
        let mut val_idx = idx[n_test..n_test + n_val].to_vec();
        let mut train = idx[n_test + n_val..].to_vec();
        test_idx.sort_unstable();
        val_idx.sort_unstable();
        train.sort_unstable();
        Ok(Splits {
            train,
            val: val_idx,
            test: test_idx,
        })
    }

    /// Contiguous split: the last `test` fraction is held out, the `val`
    /// fraction before it validates.
    pub fn chronological(n: usize, val: f64, test: f64) -> Result<Self> {
        if !(val >= 0.0 && test >= 0.0 && val + test < 1.0) {
            return Err(Error::InvalidParameter("invalid split fractions".into()));
        }
        let n_test = (test * n as f64).round() as usize;
        let n_val = (val * n as f64).round() as usize;
        let cut = n - n_test - n_val;
        Ok(Splits {
            train: (0..cut).collect(),
            val: (cut..cut + n_val).collect(),
            test: (cut + n_val..n).collect(),
        })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || seen[i] {
                return Err(Error::InvalidParameter(format!("split index {i} is out of range or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidParameter("splits do not cover every row".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { val: 0.1, test: 0.2 }
    }
}

/// Feature transforms derived from a load series window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    /// `sin` and `cos` of the day of year at the window start.
    SinusoidalYearly,
    WeekendOnehot,
    /// Fixed-date holidays: Jan 1, Jul 4, Dec 25.
    HolidayOnehot,
    /// Window temperatures in tens of degrees.
    Temp,
    TempSquared,
    TempCubed,
    /// Loads of the preceding window; windows without one are dropped.
    LaggedLoad,
}

impl Transform {
    pub const ALL: [Transform; 7] = [
        Transform::SinusoidalYearly,
        Transform::WeekendOnehot,
        Transform::HolidayOnehot,
        Transform::Temp,
        Transform::TempSquared,
        Transform::TempCubed,
        Transform::LaggedLoad,
    ];

    fn needs_temp(self) -> bool {
        matches!(self, Transform::Temp | Transform::TempSquared | Transform::TempCubed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeriesOptions {
    pub horizon: usize,
    pub stride: usize,
    pub transforms: Vec<Transform>,
    /// Accept timestamps more than one step apart; gaps are recorded in the
    /// dataset notes instead of failing.
    pub allow_gaps: bool,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        SeriesOptions {
            horizon: 24,
            stride: 24,
            transforms: Transform::ALL.to_vec(),
            allow_gaps: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElectricitySpec {
    pub days: usize,
    pub start: String,
    pub base: f64,
    pub daily: f64,
    pub weekly: f64,
    /// Load added per squared ten degrees away from 18°.
    pub temp_effect: f64,
    pub noise: f64,
}

impl Default for ElectricitySpec {
    fn default() -> Self {
        ElectricitySpec {
            days: 120,
            start: "2020-01-01T00:00:00".into(),
            base: 2.0,
            daily: 0.6,
            weekly: 0.15,
            temp_effect: 0.4,
            noise: 0.05,
        }
    }
}

/// Generator recipe stored alongside each dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeneratorSpec {
    Newsvendor {
        samples: usize,
        features: usize,
        products: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    CrossFulfill {
        samples: usize,
        features: usize,
        clients: usize,
    },
    /// One-hot realized demands over a discrete support, drawn from
    /// `softmax(Bx)`.
    QuadraticNewsvendor {
        samples: usize,
        features: usize,
        support: usize,
    },
    /// Positive vertex costs on a square grid from a random network.
    GridCosts {
        samples: usize,
        features: usize,
        grid: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
    /// Featureless `u` uniform on `[lo, hi]^dim`.
    Uniform {
        samples: usize,
        dim: usize,
        lo: f64,
        hi: f64,
    },
    Electricity {
        #[serde(default)]
        series: ElectricitySpec,
        #[serde(default)]
        options: SeriesOptions,
    },
    Series {
        path: PathBuf,
        #[serde(default)]
        options: SeriesOptions,
    },
}

fn default_hidden() -> usize {
    32
}

fn default_scale() -> f64 {
    1.0
}

/// Features `X` (`N × p`), uncertainty `U` (`N × d`) and their splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionDataset {
    pub x: Matrix,
    pub u: Matrix,
    pub splits: Splits,
    pub spec: GeneratorSpec,
    pub seed: u64,
    pub algorithm: String,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    spec: GeneratorSpec,
    seed: u64,
    algorithm: String,
    features: usize,
    uncertainty: usize,
    splits: Splits,
    #[serde(default)]
    notes: Vec<String>,
}

impl DecisionDataset {
    pub fn len(&self) -> usize {
        self.u.rows
    }

    pub fn is_empty(&self) -> bool {
        self.u.rows == 0
    }

    pub fn features(&self) -> usize {
        self.x.cols
    }

    pub fn dim(&self) -> usize {
        self.u.cols
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        self.x.row(i)
    }

    pub fn u_row(&self, i: usize) -> &[f64] {
        self.u.row(i)
    }

    pub fn rows_of(&self, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            idx.iter().map(|&i| self.x.row(i).to_vec()).collect(),
            idx.iter().map(|&i| self.u.row(i).to_vec()).collect(),
        )
    }

    pub fn train(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        self.rows_of(&self.splits.train)
    }

    pub fn val(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        self.rows_of(&self.splits.val)
    }

    pub fn test(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        self.rows_of(&self.splits.test)
    }

    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        splits.validate(self.len())?;
        self.splits = splits;
        Ok(self)
    }

    /// Writes `stem.csv` (`x_0..x_{p−1},u_0..u_{d−1}`) and `stem.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut wr = csv::Writer::from_path(stem.with_extension("csv"))?;
        let mut header: Vec<String> = (0..self.x.cols).map(|i| format!("x_{i}")).collect();
        header.extend((0..self.u.cols).map(|i| format!("u_{i}")));
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let row: Vec<String> = self
                .x
                .row(i)
                .iter()
                .chain(self.u.row(i))
                .map(|v| v.to_string())
                .collect();
            wr.write_record(&row)?;
        }
        wr.flush()?;
        let side = Sidecar {
            spec: self.spec.clone(),
            seed: self.seed,
            algorithm: self.algorithm.clone(),
            features: self.x.cols,
            uncertainty: self.u.cols,
            splits: self.splits.clone(),
            notes: self.notes.clone(),
        };
        let mut f = File::create(stem.with_extension("json"))?;
        serde_json::to_writer_pretty(&mut f, &side)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let json_path = stem.with_extension("json");
        let side: Sidecar = serde_json::from_reader(BufReader::new(File::open(&json_path)?))?;
        let csv_path = stem.with_extension("csv");
        let mut rd = csv::Reader::from_path(&csv_path)?;
        let width = side.features + side.uncertainty;
        let mut x = Vec::new();
        let mut u = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() != width {
                return Err(Error::Parse {
                    path: csv_path.display().to_string(),
                    line,
                    message: format!("expected {width} fields, found {}", rec.len()),
                });
            }
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    path: csv_path.display().to_string(),
                    line,
                    message: format!("field {j} is not a number: {field:?}"),
                })?;
                if j < side.features {
                    x.push(v);
                } else {
                    u.push(v);
                }
            }
        }
        let n = u.len() / side.uncertainty.max(1);
        let ds = DecisionDataset {
            x: Matrix::from_vec(n, side.features, x)?,
            u: Matrix::from_vec(n, side.uncertainty, u)?,
            splits: side.splits,
            spec: side.spec,
            seed: side.seed,
            algorithm: side.algorithm,
            notes: side.notes,
        };
        ds.splits.validate(ds.len())?;
        Ok(ds)
    }
}

fn dataset(x: Matrix, u: Matrix, spec: GeneratorSpec, seed: u64, split: SplitSpec) -> Result<DecisionDataset> {
    let splits = Splits::random(u.rows, split.val, split.test, seed)?;
    Ok(DecisionDataset {
        x,
        u,
        splits,
        spec,
        seed,
        algorithm: random::ALGORITHM.into(),
        notes: Vec::new(),
    })
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::InvalidParameter(format!("{name} must be ≥ 1")));
    }
    Ok(())
}

/// Random two-layer network `relu(W₂ relu(W₁x + b₁) + b₂)`.
struct RandomNet {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

impl RandomNet {
    fn new(r: &mut random::Rng, p: usize, hidden: usize, out: usize) -> Result<Self> {
        let s1 = 1.0 / (p as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Ok(RandomNet {
            w1: Matrix::from_vec(hidden, p, random::normals(r, hidden * p, s1))?,
            b1: random::normals(r, hidden, 0.5),
            w2: Matrix::from_vec(out, hidden, random::normals(r, out * hidden, s2))?,
            b2: (0..out).map(|_| r.gen_range(0.5..1.5)).collect(),
        })
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.w1.matvec(x);
        h.iter_mut().zip(&self.b1).for_each(|(v, b)| *v = (*v + b).max(0.0));
        let mut o = self.w2.matvec(&h);
        o.iter_mut().zip(&self.b2).for_each(|(v, b)| *v = (*v + b).max(0.0));
        o
    }
}

/// Gaussian features with per-feature means uniform in `[−1, 1]` and unit
/// covariance.
fn gaussian_features(r: &mut random::Rng, n: usize, p: usize) -> Matrix {
    let mean: Vec<f64> = (0..p).map(|_| r.gen_range(-1.0..=1.0)).collect();
    let data = (0..n * p).map(|k| mean[k % p] + random::normal(r)).collect();
    Matrix { rows: n, cols: p, data }
}

/// Newsvendor demands from a fixed random ReLU network of Gaussian features.
pub fn gen_newsvendor(samples: usize, features: usize, products: usize, seed: u64) -> Result<DecisionDataset> {
    generate(
        &GeneratorSpec::Newsvendor {
            samples,
            features,
            products,
            hidden: default_hidden(),
            scale: default_scale(),
        },
        seed,
        SplitSpec::default(),
    )
}

/// Cross-fulfillment demands `d_j = (qᵀx)_j²` with standard normal `x`.
pub fn gen_crossfulfill(samples: usize, features: usize, clients: usize, seed: u64) -> Result<DecisionDataset> {
    generate(
        &GeneratorSpec::CrossFulfill {
            samples,
            features,
            clients,
        },
        seed,
        SplitSpec::default(),
    )
}

/// `M + 1` unit cost vectors `(cos(mπ/2M), sin(mπ/2M))`, `m = 0..=M`.
pub fn gen_circle_costs(m: usize) -> Result<Vec<Vec<f64>>> {
    positive("circle sample count", m)?;
    Ok((0..=m)
        .map(|k| {
            let a = k as f64 * std::f64::consts::FRAC_PI_2 / m as f64;
            vec![a.cos(), a.sin()]
        })
        .collect())
}

/// Demand matrix `q` of the cross-fulfillment generator for `seed`.
pub fn crossfulfill_map(features: usize, clients: usize, seed: u64) -> Result<Matrix> {
    let mut r = random::substream(seed, 1);
    Matrix::from_vec(
        features,
        clients,
        random::normals(&mut r, features * clients, 1.0 / (features as f64).sqrt()),
    )
}

pub fn crossfulfill_demand(q: &Matrix, x: &[f64]) -> Vec<f64> {
    q.matvec_t(x).into_iter().map(|v| v * v).collect()
}

pub fn generate(spec: &GeneratorSpec, seed: u64, split: SplitSpec) -> Result<DecisionDataset> {
    match spec {
        GeneratorSpec::Newsvendor {
            samples,
            features,
            products,
            hidden,
            scale,
        } => {
            positive("sample count", *samples)?;
            positive("feature count", *features)?;
            positive("product count", *products)?;
            positive("hidden width", *hidden)?;
            let mut r = random::substream(seed, 1);
            let net = RandomNet::new(&mut r, *features, *hidden, *products)?;
            let x = gaussian_features(&mut random::substream(seed, 2), *samples, *features);
            let mut u = Vec::with_capacity(samples * products);
            for i in 0..*samples {
                u.extend(net.eval(x.row(i)).into_iter().map(|v| scale * v));
            }
            dataset(x, Matrix::from_vec(*samples, *products, u)?, spec.clone(), seed, split)
        }
        GeneratorSpec::CrossFulfill {
            samples,
            features,
            clients,
        } => {
            positive("sample count", *samples)?;
            positive("feature count", *features)?;
            positive("client count", *clients)?;
            let q = crossfulfill_map(*features, *clients, seed)?;
            let mut r = random::substream(seed, 2);
            let x = Matrix::from_vec(*samples, *features, random::normals(&mut r, samples * features, 1.0))?;
            let mut u = Vec::with_capacity(samples * clients);
            for i in 0..*samples {
                u.extend(crossfulfill_demand(&q, x.row(i)));
            }
            dataset(x, Matrix::from_vec(*samples, *clients, u)?, spec.clone(), seed, split)
        }
        GeneratorSpec::QuadraticNewsvendor {
            samples,
            features,
            support,
        } => {
            positive("sample count", *samples)?;
            positive("feature count", *features)?;
            positive("support size", *support)?;
            let mut r = random::substream(seed, 1);
            let b = Matrix::from_vec(*support, *features, random::normals(&mut r, support * features, 1.5))?;
            let mut r = random::substream(seed, 2);
            let x = Matrix::from_vec(*samples, *features, random::normals(&mut r, samples * features, 1.0))?;
            let mut u = vec![0.0; samples * support];
            for i in 0..*samples {
                let logits = b.matvec(x.row(i));
                let mx = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
                let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
                let total: f64 = e.iter().sum();
                let draw: f64 = r.gen::<f64>() * total;
                let mut acc = 0.0;
                let mut k = support - 1;
                for (j, v) in e.iter().enumerate() {
                    acc += v;
                    if draw < acc {
                        k = j;
                        break;
                    }
                }
                u[i * support + k] = 1.0;
            }
            dataset(x, Matrix::from_vec(*samples, *support, u)?, spec.clone(), seed, split)
        }
        GeneratorSpec::GridCosts {
            samples,
            features,
            grid,
            hidden,
        } => {
            positive("sample count", *samples)?;
            positive("feature count", *features)?;
            positive("grid side", *grid)?;
            let nv = grid * grid;
            let mut r = random::substream(seed, 1);
            let net = RandomNet::new(&mut r, *features, *hidden, nv)?;
            let x = gaussian_features(&mut random::substream(seed, 2), *samples, *features);
            let mut u = Vec::with_capacity(samples * nv);
            for i in 0..*samples {
                u.extend(net.eval(x.row(i)).into_iter().map(|v| 0.1 + v));
            }
            dataset(x, Matrix::from_vec(*samples, nv, u)?, spec.clone(), seed, split)
        }
        GeneratorSpec::Uniform { samples, dim, lo, hi } => {
            positive("sample count", *samples)?;
            positive("dimension", *dim)?;
            if !(lo < hi) {
                return Err(Error::InvalidParameter("uniform range needs lo < hi".into()));
            }
            let mut r = random::substream(seed, 2);
            let u = (0..samples * dim).map(|_| r.gen_range(*lo..*hi)).collect();
            dataset(
                Matrix::zeros(*samples, 0),
                Matrix::from_vec(*samples, *dim, u)?,
                spec.clone(),
                seed,
                split,
            )
        }
        GeneratorSpec::Electricity { series, options } => {
            let s = gen_electricity_series(series, seed)?;
            let mut ds = windows(&s, options, spec.clone(), seed, Path::new("<generated>"))?;
            ds.splits = Splits::chronological(ds.len(), split.val, split.test)?;
            Ok(ds)
        }
        GeneratorSpec::Series { path, options } => {
            let s = read_series_csv(path)?;
            let mut ds = windows(&s, options, spec.clone(), seed, path)?;
            ds.splits = Splits::chronological(ds.len(), split.val, split.test)?;
            Ok(ds)
        }
    }
}

/// Hourly load series with optional temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub timestamps: Vec<NaiveDateTime>,
    pub load: Vec<f64>,
    pub temp: Option<Vec<f64>>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.load.len()
    }

    pub fn is_empty(&self) -> bool {
        self.load.is_empty()
    }

    /// CSV with header `timestamp,load[,temp]`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wr = csv::Writer::from_path(path)?;
        if self.temp.is_some() {
            wr.write_record(["timestamp", "load", "temp"])?;
        } else {
            wr.write_record(["timestamp", "load"])?;
        }
        for i in 0..self.len() {
            let ts = self.timestamps[i].format(TIMESTAMP_FORMAT).to_string();
            match &self.temp {
                Some(t) => wr.write_record([ts, self.load[i].to_string(), t[i].to_string()])?,
                None => wr.write_record([ts, self.load[i].to_string()])?,
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Daily sinusoid with a weekly modulation, a temperature response and
/// Gaussian noise.
pub fn gen_electricity_series(spec: &ElectricitySpec, seed: u64) -> Result<Series> {
    positive("day count", spec.days)?;
    let start = NaiveDateTime::parse_from_str(&spec.start, TIMESTAMP_FORMAT)
        .map_err(|e| Error::InvalidParameter(format!("start timestamp {:?}: {e}", spec.start)))?;
    let mut r = random::substream(seed, 3);
    let hours = spec.days * 24;
    let tau = std::f64::consts::TAU;
    let mut timestamps = Vec::with_capacity(hours);
    let mut load = Vec::with_capacity(hours);
    let mut temp = Vec::with_capacity(hours);
    for t in 0..hours {
        let ts = start + Duration::hours(t as i64);
        let doy = ts.ordinal0() as f64;
        let hour = ts.hour() as f64;
        let tc = 15.0 - 10.0 * (tau * (doy + 10.0) / 365.0).cos() - 4.0 * (tau * (hour - 3.0) / 24.0).cos()
            + 1.5 * random::normal(&mut r);
        let daily = -spec.daily * (tau * (hour - 2.0) / 24.0).cos();
        let weekly = if matches!(ts.weekday(), Weekday::Sat | Weekday::Sun) {
            -spec.weekly
        } else {
            spec.weekly * 0.4
        };
        let dev = (tc - 18.0) / 10.0;
        let l = spec.base + daily + weekly + spec.temp_effect * dev * dev + spec.noise * random::normal(&mut r);
        timestamps.push(ts);
        load.push(l.max(0.0));
        temp.push(tc);
    }
    Ok(Series {
        timestamps,
        load,
        temp: Some(temp),
    })
}

/// Reads a `timestamp,load[,temp]` CSV; line numbers in errors are 1-based
/// and count the header.
pub fn read_series_csv(path: &Path) -> Result<Series> {
    let f = File::open(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message: format!("cannot open series file: {e}"),
    })?;
    let mut lines = BufReader::new(f).lines();
    let perr = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let header = lines.next().ok_or_else(|| perr(1, "empty file".into()))??;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_temp = match cols.as_slice() {
        ["timestamp", "load"] => false,
        ["timestamp", "load", "temp"] => true,
        _ => return Err(perr(1, format!("expected header timestamp,load[,temp], found {header:?}"))),
    };
    let mut s = Series {
        timestamps: Vec::new(),
        load: Vec::new(),
        temp: has_temp.then(Vec::new),
    };
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != cols.len() {
            return Err(perr(line_no, format!("expected {} fields, found {}", cols.len(), f.len())));
        }
        let ts = NaiveDateTime::parse_from_str(f[0], TIMESTAMP_FORMAT)
            .map_err(|e| perr(line_no, format!("bad timestamp {:?}: {e}", f[0])))?;
        let num = |k: usize| -> Result<f64> {
            f[k].parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(line_no, format!("field {k} is not a finite number: {:?}", f[k])))
        };
        if let Some(prev) = s.timestamps.last() {
            if ts <= *prev {
                return Err(perr(line_no, "timestamps must increase".into()));
            }
        }
        s.timestamps.push(ts);
        s.load.push(num(1)?);
        if let Some(t) = s.temp.as_mut() {
            t.push(num(2)?);
        }
    }
    Ok(s)
}

fn is_holiday(d: NaiveDate) -> bool {
    matches!((d.month(), d.day()), (1, 1) | (7, 4) | (12, 25))
}

/// Cuts a series into windows of `horizon` loads and derives features.
fn windows(s: &Series, opt: &SeriesOptions, spec: GeneratorSpec, seed: u64, path: &Path) -> Result<DecisionDataset> {
    positive("horizon", opt.horizon)?;
    positive("stride", opt.stride)?;
    let h = opt.horizon;
    let mut notes = Vec::new();
    if s.len() >= 2 {
        let step = s.timestamps[1] - s.timestamps[0];
        for i in 1..s.len() {
            if s.timestamps[i] - s.timestamps[i - 1] > step {
                let line = i + 2;
                if !opt.allow_gaps {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        line,
                        message: format!("gap of more than one step before {}", s.timestamps[i]),
                    });
                }
                notes.push(format!("gap before line {line}"));
            }
        }
    }
    if opt.transforms.iter().any(|t| t.needs_temp()) && s.temp.is_none() {
        return Err(Error::Config("temperature transforms need a temp column".into()));
    }
    let lagged = opt.transforms.contains(&Transform::LaggedLoad);
    let first = if lagged { h } else { 0 };
    if s.len() < first + h {
        return Err(Error::InvalidParameter(format!(
            "series of {} rows is shorter than one window of {h}",
            s.len()
        )));
    }
    let mut xs = Vec::new();
    let mut us = Vec::new();
    let mut n = 0;
    let mut start = first;
    while start + h <= s.len() {
        let ts = s.timestamps[start];
        for t in &opt.transforms {
            match t {
                Transform::SinusoidalYearly => {
                    let a = std::f64::consts::TAU * ts.ordinal0() as f64 / 365.0;
                    xs.push(a.sin());
                    xs.push(a.cos());
                }
                Transform::WeekendOnehot => {
                    xs.push(f64::from(u8::from(matches!(ts.weekday(), Weekday::Sat | Weekday::Sun))));
                }
                Transform::HolidayOnehot => xs.push(f64::from(u8::from(is_holiday(ts.date())))),
                Transform::Temp | Transform::TempSquared | Transform::TempCubed => {
                    let k = match t {
                        Transform::Temp => 1,
                        Transform::TempSquared => 2,
                        _ => 3,
                    };
                    let temp = s.temp.as_ref().expect("checked above");
                    xs.extend(temp[start..start + h].iter().map(|v| (v / 10.0).powi(k)));
                }
                Transform::LaggedLoad => xs.extend_from_slice(&s.load[start - h..start]),
            }
        }
        us.extend_from_slice(&s.load[start..start + h]);
        n += 1;
        start += opt.stride;
    }
    let p = xs.len() / n;
    Ok(DecisionDataset {
        x: Matrix::from_vec(n, p, xs)?,
        u: Matrix::from_vec(n, h, us)?,
        splits: Splits::chronological(n, 0.0, 0.0)?,
        spec,
        seed,
        algorithm: random::ALGORITHM.into(),
        notes,
    })
}

/// Windows of a `timestamp,load[,temp]` CSV as a dataset with a
/// chronological 70/10/20 split.
pub fn load_series_csv(path: &Path, options: &SeriesOptions) -> Result<DecisionDataset> {
    generate(
        &GeneratorSpec::Series {
            path: path.to_path_buf(),
            options: options.clone(),
        },
        0,
        SplitSpec::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newsvendor_is_deterministic_and_nonnegative() {
        let a = gen_newsvendor(50, 4, 6, 11).unwrap();
        let b = gen_newsvendor(50, 4, 6, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.u.data.iter().all(|v| *v >= 0.0));
        assert_ne!(a, gen_newsvendor(50, 4, 6, 12).unwrap());
        assert_eq!(a.algorithm, random::ALGORITHM);
        a.splits.validate(50).unwrap();
        let big = gen_newsvendor(500, 5, 50, 0).unwrap();
        assert_eq!((big.len(), big.dim()), (500, 50));
    }

    #[test]
    fn crossfulfill_is_even_and_vanishes_at_zero() {
        let q = crossfulfill_map(4, 3, 5).unwrap();
        assert_eq!(crossfulfill_demand(&q, &[0.0; 4]), vec![0.0; 3]);
        let x = [0.3, -1.2, 0.5, 2.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(crossfulfill_demand(&q, &x), crossfulfill_demand(&q, &neg));
        let d = gen_crossfulfill(30, 4, 3, 5).unwrap();
        assert_eq!(d, gen_crossfulfill(30, 4, 3, 5).unwrap());
        assert!(d.u.data.iter().all(|v| *v >= 0.0));
        for i in 0..30 {
            assert_eq!(d.u_row(i), crossfulfill_demand(&q, d.x_row(i)).as_slice());
        }
    }

    #[test]
    fn circle_costs_span_the_quadrant() {
        let c = gen_circle_costs(40).unwrap();
        assert_eq!(c.len(), 41);
        assert_eq!(c[0], vec![1.0, 0.0]);
        assert!((c[40][0]).abs() < 1e-15 && c[40][1] == 1.0);
        assert!(c.iter().all(|v| ((v[0] * v[0] + v[1] * v[1]).sqrt() - 1.0).abs() < 1e-12));
        assert!(c.iter().all(|v| v[0] >= -1e-15 && v[1] >= 0.0));
        assert!(gen_circle_costs(0).is_err());
    }

    #[test]
    fn quadratic_newsvendor_rows_are_one_hot() {
        let d = generate(
            &GeneratorSpec::QuadraticNewsvendor {
                samples: 40,
                features: 3,
                support: 5,
            },
            2,
            SplitSpec::default(),
        )
        .unwrap();
        for i in 0..40 {
            assert_eq!(d.u_row(i).iter().sum::<f64>(), 1.0);
            assert!(d.u_row(i).iter().all(|v| *v == 0.0 || *v == 1.0));
        }
    }

    fn constant_series(rows: usize, path: &Path) {
        let start = NaiveDateTime::parse_from_str("2021-03-01T00:00:00", TIMESTAMP_FORMAT).unwrap();
        Series {
            timestamps: (0..rows).map(|t| start + Duration::hours(t as i64)).collect(),
            load: vec![1.25; rows],
            temp: None,
        }
        .write_csv(path)
        .unwrap();
    }

    #[test]
    fn series_windows_follow_stride() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("load.csv");
        constant_series(48, &path);
        let opts = |stride| SeriesOptions {
            horizon: 24,
            stride,
            transforms: vec![Transform::WeekendOnehot],
            allow_gaps: false,
        };
        let one = load_series_csv(&path, &opts(1)).unwrap();
        assert_eq!(one.len(), 25);
        assert!(one.u.data.iter().all(|v| *v == 1.25));
        let day = load_series_csv(&path, &opts(24)).unwrap();
        assert_eq!(day.len(), 2);
    }

    #[test]
    fn series_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "timestamp,load\n2021-01-01T00:00:00,1\n2021-01-01T01:00:00,oops\n",
        )
        .unwrap();
        match read_series_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(
            &path,
            "timestamp,load\n2021-01-01T00:00:00,1\n2021-01-01T01:00:00,1\n2021-01-01T05:00:00,1\n",
        )
        .unwrap();
        let opts = SeriesOptions {
            horizon: 1,
            stride: 1,
            transforms: vec![],
            allow_gaps: false,
        };
        match load_series_csv(&path, &opts) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let ok = load_series_csv(&path, &SeriesOptions { allow_gaps: true, ..opts }).unwrap();
        assert_eq!(ok.notes.len(), 1);
    }

    #[test]
    fn generated_series_round_trips_through_csv() {
        let spec = ElectricitySpec {
            days: 10,
            ..ElectricitySpec::default()
        };
        let s = gen_electricity_series(&spec, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        s.write_csv(&path).unwrap();
        let back = read_series_csv(&path).unwrap();
        assert_eq!(s, back);
        let opts = SeriesOptions::default();
        let direct = generate(
            &GeneratorSpec::Electricity {
                series: spec,
                options: opts.clone(),
            },
            4,
            SplitSpec::default(),
        )
        .unwrap();
        let loaded = load_series_csv(&path, &opts).unwrap();
        assert_eq!(direct.x, loaded.x);
        assert_eq!(direct.u, loaded.u);
        assert_eq!(direct.len(), 9);
        assert_eq!(direct.features(), 2 + 1 + 1 + 3 * 24 + 24);
    }

    #[test]
    fn dataset_round_trips_through_csv_and_sidecar() {
        let d = gen_newsvendor(20, 3, 4, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("nv");
        d.save(&stem).unwrap();
        let back = DecisionDataset::load(&stem).unwrap();
        assert_eq!(d, back);
        let header = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
        assert!(header.starts_with("x_0,x_1,x_2,u_0,u_1,u_2,u_3\n"));
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let s = Splits::random(97, 0.1, 0.2, 3).unwrap();
        s.validate(97).unwrap();
        assert_eq!(s.test.len(), 19);
        assert_eq!(s.val.len(), 10);
        assert!(Splits::random(10, 0.5, 0.5, 0).is_err());
    }
}
