//! Benchmark series: the time-varying Lorenz system, a second-order RLC
//! circuit with an unstable equilibrium, and monthly sunspot counts.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const LORENZ_STEP: f64 = 0.01;
pub const LORENZ_START: [f64; 3] = [0.0, 1.0, 0.0];
pub const RLC_STEP: f64 = 0.008;
pub const RLC_START: [f64; 2] = [0.0, 0.30];
/// Rows needed for the sunspot train/test protocol.
pub const SUNSPOT_MIN_ROWS: usize = 2280;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Rk4,
    /// First-order, for sensitivity checks only.
    Euler,
}

/// Time-varying Lorenz field with sigma = 10 and slowly modulated r, b.
pub fn lorenz_rhs(t: f64, z: &[f64]) -> Vec<f64> {
    let sigma = 10.0;
    let b = (4.0 + 3.0 * (1.0 + (0.1 * t).sin())) / 3.0;
    let r = 25.0 + 3.0 * (1.0 + (0.001 * t).exp2().cos());
    vec![
        sigma * (z[1] - z[0]),
        -z[0] * z[2] + r * z[0] - z[1],
        z[0] * z[1] - b * z[2],
    ]
}

/// Capacitor current/voltage with omega(t) = 5cos(0.05t) and negative
/// damping -1/2, so the origin is unstable.
pub fn rlc_rhs(t: f64, x: &[f64]) -> Vec<f64> {
    let omega = 5.0 * (0.05 * t).cos();
    let delta = -0.5;
    vec![x[1], -omega * omega * x[0] - 2.0 * delta * x[1]]
}

fn axpy(y: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    y.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

/// One fixed step of size `h` from time `t`.
pub fn step<F>(f: &F, t: f64, y: &[f64], h: f64, integrator: Integrator) -> Vec<f64>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    match integrator {
        Integrator::Euler => axpy(y, h, &f(t, y)),
        Integrator::Rk4 => {
            let k1 = f(t, y);
            let k2 = f(t + 0.5 * h, &axpy(y, 0.5 * h, &k1));
            let k3 = f(t + 0.5 * h, &axpy(y, 0.5 * h, &k2));
            let k4 = f(t + h, &axpy(y, h, &k3));
            y.iter()
                .enumerate()
                .map(|(i, yi)| yi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect()
        }
    }
}

/// Samples `n_samples` states at t = n*h, the first being `start`.
pub fn integrate<F>(f: F, start: &[f64], n_samples: usize, h: f64, integrator: Integrator) -> Result<Vec<DVector<f64>>>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    if n_samples == 0 {
        return Err(Error::usage("n_samples must be at least 1"));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::usage(format!("step must be positive, got {h}")));
    }
    let mut out = Vec::with_capacity(n_samples);
    let mut y = start.to_vec();
    out.push(DVector::from_column_slice(&y));
    for n in 1..n_samples {
        // t from the index, not accumulated, so long runs do not drift.
        y = step(&f, (n - 1) as f64 * h, &y, h, integrator);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("integration diverged at sample {n}")));
        }
        out.push(DVector::from_column_slice(&y));
    }
    Ok(out)
}

pub fn gen_lorenz(n_samples: usize, h: f64, start: [f64; 3], integrator: Integrator) -> Result<Vec<DVector<f64>>> {
    integrate(lorenz_rhs, &start, n_samples, h, integrator)
}

pub fn gen_rlc(n_samples: usize, h: f64, start: [f64; 2], integrator: Integrator) -> Result<Vec<DVector<f64>>> {
    integrate(rlc_rhs, &start, n_samples, h, integrator)
}

/// Reads monthly sunspot numbers.
///
/// Accepts `date,value` rows (date as `YYYY-MM`, `YYYY-MM-DD` or a decimal
/// year, optional header) and the semicolon-separated SILSO layout
/// `year;month;decimal_year;value;...`. Dates must strictly increase and
/// values must be non-negative.
pub fn load_sunspot(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Ingestion(format!(
            "{}: {e}; expected at least {SUNSPOT_MIN_ROWS} monthly rows",
            path.display()
        ))
    })?;
    parse_sunspot(&text, &path.display().to_string())
}

/// [`load_sunspot`] on text already in memory; `origin` labels messages.
pub fn parse_sunspot(text: &str, origin: &str) -> Result<Vec<f64>> {
    let expect = || format!("expected at least {SUNSPOT_MIN_ROWS} monthly rows in {origin}");
    let silso = text.lines().next().is_some_and(|l| l.contains(';'));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .delimiter(if silso { b';' } else { b',' })
        .from_reader(text.as_bytes());

    let mut values = Vec::new();
    let mut last_date: Option<f64> = None;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = row + 1;
        let parsed = if silso {
            match (rec.get(0), rec.get(1), rec.get(3)) {
                (Some(y), Some(m), Some(v)) => parse_year_month(y, m).zip(v.parse::<f64>().ok()),
                _ => None,
            }
        } else {
            match (rec.get(0), rec.get(1)) {
                (Some(d), Some(v)) => parse_date(d).zip(v.parse::<f64>().ok()),
                _ => None,
            }
        };
        let Some((date, value)) = parsed else {
            if row == 0 {
                continue; // header
            }
            return Err(Error::Ingestion(format!("{origin}:{line}: unparseable row")));
        };
        if last_date.is_some_and(|d| date <= d) {
            return Err(Error::Ingestion(format!("{origin}:{line}: dates are not strictly increasing")));
        }
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::Ingestion(format!("{origin}:{line}: invalid sunspot value {value}")));
        }
        last_date = Some(date);
        values.push(value);
    }
    if values.len() < SUNSPOT_MIN_ROWS {
        return Err(Error::Ingestion(format!("{}; found {}", expect(), values.len())));
    }
    Ok(values)
}

fn parse_year_month(y: &str, m: &str) -> Option<f64> {
    let y: i32 = y.parse().ok()?;
    let m: u32 = m.parse().ok()?;
    (1..=12).contains(&m).then(|| y as f64 + (m as f64 - 1.0) / 12.0)
}

fn parse_date(d: &str) -> Option<f64> {
    let mut parts = d.split('-');
    match (parts.next(), parts.next()) {
        (Some(y), Some(m)) => {
            let base = parse_year_month(y, m)?;
            match parts.next() {
                None => Some(base),
                Some(day) => {
                    let day: u32 = day.parse().ok()?;
                    (1..=31).contains(&day).then(|| base + (day as f64 - 1.0) / 372.0)
                }
            }
        }
        (Some(y), None) => y.parse::<f64>().ok().filter(|v| v.is_finite()),
        _ => None,
    }
}

/// Causal trailing mean over `window` samples; the first `window - 1`
/// outputs average what is available.
pub fn trailing_mean(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedPair {
    pub x: DVector<f64>,
    pub y: f64,
    /// Index of the newest sample used in `x`.
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputSpec {
    /// The full state at n.
    State,
    /// `lags` most recent values of one component, newest first.
    Lags { component: usize, lags: usize },
}

/// Pairs `(x built from samples <= n, y = target component at n + horizon)`.
/// Origins without enough history or lookahead are dropped.
pub fn make_supervised(
    series: &[DVector<f64>],
    input: InputSpec,
    target: usize,
    horizon: usize,
) -> Result<Vec<SupervisedPair>> {
    let dim = series.first().map_or(0, |s| s.len());
    if dim == 0 || series.iter().any(|s| s.len() != dim) {
        return Err(Error::usage("series must be non-empty with a fixed state dimension"));
    }
    if target >= dim {
        return Err(Error::usage(format!("target component {target} out of range for dimension {dim}")));
    }
    let history = match input {
        InputSpec::State => 1,
        InputSpec::Lags { component, lags } => {
            if component >= dim || lags == 0 {
                return Err(Error::usage("lag input needs a valid component and at least one lag"));
            }
            lags
        }
    };
    let len = series.len();
    if len < history + horizon {
        return Ok(Vec::new());
    }
    Ok((history - 1..len - horizon)
        .map(|n| {
            let x = match input {
                InputSpec::State => series[n].clone(),
                InputSpec::Lags { component, lags } => DVector::from_fn(lags, |k, _| series[n - k][component]),
            };
            SupervisedPair { x, y: series[n + horizon][target], n }
        })
        .collect())
}

/// Train/validation/test spans over the supervised stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn lorenz() -> Self {
        Splits { train: 0..3000, validation: 2500..3000, test: 3000..8000 }
    }

    pub fn rlc() -> Self {
        Splits { train: 0..500, validation: 300..500, test: 500..2500 }
    }

    pub fn sunspot() -> Self {
        Splits { train: 0..500, validation: 300..500, test: 500..2280 }
    }

    pub fn check(&self, len: usize) -> Result<()> {
        let ok = !self.train.is_empty()
            && !self.test.is_empty()
            && !self.validation.is_empty()
            && self.validation.start >= self.train.start
            && self.validation.end <= self.train.end
            && self.train.end <= self.test.start
            && self.test.end <= len;
        if ok {
            Ok(())
        } else {
            Err(Error::usage(format!("splits {self:?} do not fit a stream of {len} pairs")))
        }
    }
}

/// Writes `n,<names...>` rows.
pub fn write_series<W: Write>(writer: W, names: &[&str], series: &[DVector<f64>], delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    let mut header = vec!["n"];
    header.extend_from_slice(names);
    w.write_record(&header)?;
    for (n, s) in series.iter().enumerate() {
        if s.len() != names.len() {
            return Err(Error::usage("series dimension does not match column names"));
        }
        let mut row = vec![n.to_string()];
        row.extend(s.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
