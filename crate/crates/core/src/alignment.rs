//! Pairing low-light and normal-light captures of the same trajectory by the
//! interval between trajectory start and first frame.

use std::collections::HashSet;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Exhaustive search bound; 8! assignments.
pub const MAX_EXHAUSTIVE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lighting {
    Low,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureInterval {
    pub sequence_id: String,
    pub lighting: Lighting,
    pub interval_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub low: String,
    pub normal: String,
    pub abs_error_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<Pair>,
    pub total_error_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub max_ms: f64,
    pub mean_ms: f64,
    pub threshold_ms: f64,
    pub fraction_below: f64,
}

fn check_side(list: &[CaptureInterval], side: &str) -> Result<()> {
    ensure!(
        !list.is_empty(),
        InvalidArgument,
        "no {side}-light intervals"
    );
    ensure!(
        list.len() <= MAX_EXHAUSTIVE,
        InvalidArgument,
        "{} {side}-light intervals exceed the exhaustive-search limit of {MAX_EXHAUSTIVE}",
        list.len()
    );
    let mut ids = HashSet::new();
    for c in list {
        ensure!(
            c.interval_ms.is_finite() && c.interval_ms >= 0.0,
            InvalidArgument,
            "interval of `{}` must be finite and non-negative",
            c.sequence_id
        );
        ensure!(
            ids.insert(&c.sequence_id),
            InvalidArgument,
            "duplicate sequence id `{}`",
            c.sequence_id
        );
    }
    Ok(())
}

/// Relative tolerance under which two totals count as tied.
const TIE_TOL: f64 = 1e-9;

fn less(a: f64, b: f64) -> Option<bool> {
    let tol = TIE_TOL * b.abs().max(1.0);
    if a < b - tol {
        Some(true)
    } else if a > b + tol {
        Some(false)
    } else {
        None
    }
}

/// Searches injective maps from `0..k` into `0..n` in lexicographic order.
/// The winner minimizes the summed cost; ties fall to the smaller summed
/// squared cost, then to the earliest map.
fn best_injection(k: usize, n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    struct Search<'a> {
        k: usize,
        n: usize,
        cost: &'a dyn Fn(usize, usize) -> f64,
        used: Vec<bool>,
        cur: Vec<usize>,
        best: (f64, f64, Vec<usize>),
    }
    impl Search<'_> {
        fn run(&mut self, i: usize, sum: f64, sq: f64) {
            if i == self.k {
                let better = self.best.0.is_infinite()
                    || less(sum, self.best.0)
                        .unwrap_or_else(|| less(sq, self.best.1) == Some(true));
                if better {
                    self.best = (sum, sq, self.cur.clone());
                }
                return;
            }
            for j in 0..self.n {
                if !self.used[j] {
                    let c = (self.cost)(i, j);
                    self.used[j] = true;
                    self.cur.push(j);
                    self.run(i + 1, sum + c, sq + c * c);
                    self.cur.pop();
                    self.used[j] = false;
                }
            }
        }
    }
    let mut s = Search {
        k,
        n,
        cost: &cost,
        used: vec![false; n],
        cur: Vec::with_capacity(k),
        best: (f64::INFINITY, f64::INFINITY, Vec::new()),
    };
    s.run(0, 0.0, 0.0);
    s.best.2
}

/// Minimum-total-error one-to-one matching over `min(n_low, n_normal)` pairs.
///
/// Among equal totals the matching with the smaller squared error wins,
/// which keeps the result independent of which list is called "low"; any
/// remaining tie goes to the lexicographically smallest index assignment of
/// the shorter list. Pairs are ordered by the index of the low-light entry.
pub fn match_sequences(low: &[CaptureInterval], normal: &[CaptureInterval]) -> Result<Matching> {
    check_side(low, "low")?;
    check_side(normal, "normal")?;
    let err = |i: usize, j: usize| (low[i].interval_ms - normal[j].interval_ms).abs();
    let mut idx: Vec<(usize, usize)> = if low.len() <= normal.len() {
        best_injection(low.len(), normal.len(), err)
            .into_iter()
            .enumerate()
            .collect()
    } else {
        best_injection(normal.len(), low.len(), |j, i| err(i, j))
            .into_iter()
            .enumerate()
            .map(|(j, i)| (i, j))
            .collect()
    };
    idx.sort_unstable();
    let pairs: Vec<Pair> = idx
        .into_iter()
        .map(|(i, j)| Pair {
            low: low[i].sequence_id.clone(),
            normal: normal[j].sequence_id.clone(),
            abs_error_ms: err(i, j),
        })
        .collect();
    let total_error_ms = pairs.iter().map(|p| p.abs_error_ms).sum();
    Ok(Matching {
        pairs,
        total_error_ms,
    })
}

pub fn alignment_error_stats(m: &Matching, threshold_ms: f64) -> Result<AlignmentStats> {
    ensure!(
        !m.pairs.is_empty(),
        InvalidArgument,
        "matching has no pairs"
    );
    let n = m.pairs.len() as f64;
    let errs = m.pairs.iter().map(|p| p.abs_error_ms);
    Ok(AlignmentStats {
        max_ms: errs.clone().fold(f64::NEG_INFINITY, f64::max),
        mean_ms: errs.clone().sum::<f64>() / n,
        threshold_ms,
        fraction_below: errs.filter(|&e| e < threshold_ms).count() as f64 / n,
    })
}

/// Parses `sequence_id,lighting,interval_ms` rows (header required) into
/// the low-light and normal-light lists.
pub fn read_intervals_csv<R: Read>(
    reader: R,
) -> Result<(Vec<CaptureInterval>, Vec<CaptureInterval>)> {
    let fail = |reason: String| Error::format("interval CSV", reason);
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| fail(e.to_string()))?.clone();
    ensure!(
        headers.iter().collect::<Vec<_>>() == ["sequence_id", "lighting", "interval_ms"],
        InvalidArgument,
        "expected header `sequence_id,lighting,interval_ms`"
    );
    let (mut low, mut normal) = (Vec::new(), Vec::new());
    for (line, rec) in rdr.deserialize::<CaptureInterval>().enumerate() {
        let rec = rec.map_err(|e| fail(format!("row {}: {e}", line + 1)))?;
        match rec.lighting {
            Lighting::Low => low.push(rec),
            Lighting::Normal => normal.push(rec),
        }
    }
    Ok((low, normal))
}
