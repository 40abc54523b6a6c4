use std::io::{Read, Write};

use serde::Serialize;

use super::{ConformalError, Method};
use crate::numfmt::{self, csv_num};

/// Symmetric interval `center ± half_width`; `half_width = +∞` is the
/// whole real line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionInterval {
    pub series_id: String,
    pub step: usize,
    pub center: f64,
    pub half_width: f64,
    pub alpha: f64,
}

impl PredictionInterval {
    pub fn lower(&self) -> f64 {
        self.center - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.center + self.half_width
    }

    pub fn width(&self) -> f64 {
        2.0 * self.half_width
    }

    pub fn is_unbounded(&self) -> bool {
        self.half_width.is_infinite()
    }

    pub fn contains(&self, y: f64) -> bool {
        self.is_unbounded() || (self.lower() <= y && y <= self.upper())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { half_width: self.half_width * factor, ..self.clone() }
    }
}

/// Intervals of one method for every test series (rows) and step (columns).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalSet {
    pub method: Method,
    pub alpha: f64,
    pub intervals: Vec<Vec<PredictionInterval>>,
}

impl IntervalSet {
    pub fn n_series(&self) -> usize {
        self.intervals.len()
    }

    pub fn horizon(&self) -> usize {
        self.intervals.first().map_or(0, Vec::len)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PredictionInterval> {
        self.intervals.iter().flatten()
    }

    /// Copy with every half-width multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            intervals: self.intervals.iter().map(|row| row.iter().map(|iv| iv.scaled(factor)).collect()).collect(),
            ..self.clone()
        }
    }
}

pub const INTERVAL_HEADER: [&str; 7] = ["series_id", "t", "method", "alpha", "y_hat", "lower", "upper"];

/// Writes `series_id,t,method,alpha,y_hat,lower,upper` rows at six
/// significant digits; unbounded ends are written as `-inf` / `inf`.
pub fn write_intervals<W: Write>(sets: &[IntervalSet], writer: W) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(INTERVAL_HEADER)?;
    for set in sets {
        for iv in set.iter() {
            wtr.write_record([
                iv.series_id.clone(),
                iv.step.to_string(),
                set.method.to_string(),
                csv_num(iv.alpha),
                csv_num(iv.center),
                csv_num(iv.lower()),
                csv_num(iv.upper()),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Parses an interval CSV back into one set per method (first-appearance
/// order). Rows of a series must be contiguous and in step order.
pub fn read_intervals<R: Read>(reader: R) -> Result<Vec<IntervalSet>, ConformalError> {
    let bad = |m: String| ConformalError::ShapeMismatch(m);
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().ne(INTERVAL_HEADER) {
        return Err(bad(format!("unexpected interval header {headers:?}")));
    }
    let mut sets: Vec<IntervalSet> = Vec::new();
    for record in rdr.records() {
        let r = record.map_err(|e| bad(e.to_string()))?;
        let num = |k: usize| numfmt::parse_num(&r[k]).ok_or_else(|| bad(format!("bad number `{}`", &r[k])));
        let method: Method = r[2].parse().map_err(bad)?;
        let step: usize = r[1].parse().map_err(|_| bad(format!("bad step `{}`", &r[1])))?;
        let (alpha, center, lower, upper) = (num(3)?, num(4)?, num(5)?, num(6)?);
        let half_width = if lower.is_infinite() || upper.is_infinite() { f64::INFINITY } else { 0.5 * (upper - lower) };
        let iv = PredictionInterval { series_id: r[0].to_string(), step, center, half_width, alpha };
        let set = match sets.iter_mut().position(|s| s.method == method) {
            Some(k) => &mut sets[k],
            None => {
                sets.push(IntervalSet { method, alpha, intervals: Vec::new() });
                sets.last_mut().expect("just pushed")
            }
        };
        match set.intervals.last_mut() {
            Some(row) if row[0].series_id == iv.series_id => row.push(iv),
            _ => set.intervals.push(vec![iv]),
        }
    }
    Ok(sets)
}
