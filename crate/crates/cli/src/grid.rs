//! Hyperparameter search over an explicit grid or log-uniform random draws.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::CliError;

/// Names accepted in grid specifications, with the config entry they set.
pub const PARAMETERS: [&str; 7] = ["ltm.lambda1", "ltm.lambda2", "ltm.eta", "stm.lambda1", "stm.lambda2", "stm.tau2", "stm.eta"];

#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    /// Cartesian product of the listed values.
    Explicit(BTreeMap<String, Vec<f64>>),
    /// `count` points drawn log-uniformly from each [low, high].
    Random { ranges: BTreeMap<String, (f64, f64)>, count: usize, seed: u64 },
}

pub type Point = BTreeMap<String, f64>;

fn check_name(name: &str) -> Result<(), CliError> {
    if PARAMETERS.contains(&name) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("unknown grid parameter {name:?}; expected one of {}", PARAMETERS.join(", "))))
    }
}

fn number(s: &str) -> Result<f64, CliError> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| CliError::Usage(format!("bad grid value {s:?}")))
}

impl GridSpec {
    /// Parses `name=v1,v2,...` entries.
    pub fn explicit(entries: &[String]) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        for e in entries {
            let (name, values) = e.split_once('=').ok_or_else(|| CliError::Usage(format!("grid entry {e:?} is not name=v1,v2,...")))?;
            check_name(name.trim())?;
            let values = values.split(',').map(number).collect::<Result<Vec<_>, _>>()?;
            if values.is_empty() {
                return Err(CliError::Usage(format!("grid entry {e:?} has no values")));
            }
            map.insert(name.trim().to_string(), values);
        }
        if map.is_empty() {
            return Err(CliError::Usage("empty grid".into()));
        }
        Ok(GridSpec::Explicit(map))
    }

    /// Parses `name=low:high` entries for log-uniform sampling.
    pub fn random(entries: &[String], count: usize, seed: u64) -> Result<Self, CliError> {
        let mut ranges = BTreeMap::new();
        for e in entries {
            let (name, range) = e.split_once('=').ok_or_else(|| CliError::Usage(format!("range {e:?} is not name=low:high")))?;
            check_name(name.trim())?;
            let (lo, hi) = range.split_once(':').ok_or_else(|| CliError::Usage(format!("range {e:?} is not name=low:high")))?;
            let (lo, hi) = (number(lo)?, number(hi)?);
            if !(lo > 0.0 && hi >= lo) {
                return Err(CliError::Usage(format!("range {e:?} must satisfy 0 < low <= high")));
            }
            ranges.insert(name.trim().to_string(), (lo, hi));
        }
        if ranges.is_empty() || count == 0 {
            return Err(CliError::Usage("random search needs at least one range and one point".into()));
        }
        Ok(GridSpec::Random { ranges, count, seed })
    }

    pub fn points(&self) -> Vec<Point> {
        match self {
            GridSpec::Explicit(map) => {
                let mut points = vec![Point::new()];
                for (name, values) in map {
                    points = points
                        .into_iter()
                        .flat_map(|p| {
                            values.iter().map(move |v| {
                                let mut q = p.clone();
                                q.insert(name.clone(), *v);
                                q
                            })
                        })
                        .collect();
                }
                points
            }
            GridSpec::Random { ranges, count, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..*count)
                    .map(|_| {
                        ranges
                            .iter()
                            .map(|(name, &(lo, hi))| {
                                let v = if lo == hi { lo } else { (rng.gen_range(lo.ln()..hi.ln())).exp() };
                                (name.clone(), v)
                            })
                            .collect()
                    })
                    .collect()
            }
        }
    }
}

/// Writes a point's values into a copy of `base`.
pub fn apply(base: &RunConfig, point: &Point) -> RunConfig {
    let mut c = base.clone();
    for (name, &v) in point {
        match name.as_str() {
            "ltm.lambda1" => c.ltm.regularization.lambda1 = Some(v),
            "ltm.lambda2" => c.ltm.regularization.lambda2 = Some(v),
            "ltm.eta" => c.ltm.optimizer.eta = Some(v),
            "stm.lambda1" => c.stm.regularization.lambda1 = Some(v),
            "stm.lambda2" => c.stm.regularization.lambda2 = Some(v),
            "stm.tau2" => c.stm.regularization.tau2 = Some(v),
            "stm.eta" => c.stm.optimizer.eta = Some(v),
            other => unreachable!("parameter {other} was validated on parse"),
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub points: Vec<Point>,
    /// Objective per point; failed evaluations are recorded as +∞.
    pub scores: Vec<f64>,
    pub best: usize,
}

/// Evaluates `objective` on every point in parallel and returns the trace
/// with the index of the smallest score (the first one on ties).
pub fn grid_search<F>(points: Vec<Point>, objective: F) -> Trace
where
    F: Fn(&Point) -> f64 + Sync,
{
    assert!(!points.is_empty(), "grid search needs at least one point");
    let scores: Vec<f64> = points
        .par_iter()
        .map(|p| {
            let s = objective(p);
            if s.is_nan() {
                f64::INFINITY
            } else {
                s
            }
        })
        .collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    Trace { points, scores, best }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_grid_returns_its_point() {
        let g = GridSpec::explicit(&["ltm.lambda1=2".into()]).unwrap();
        let t = grid_search(g.points(), |_| 1.0);
        assert_eq!(t.points.len(), 1);
        assert_eq!(t.points[t.best]["ltm.lambda1"], 2.0);
    }

    #[test]
    fn cartesian_product_size() {
        let g = GridSpec::explicit(&["ltm.lambda1=1,2,3".into(), "ltm.lambda2=0,1".into()]).unwrap();
        assert_eq!(g.points().len(), 6);
    }

    #[test]
    fn finds_known_minimum() {
        let g = GridSpec::explicit(&["ltm.lambda1=0.1,0.3,1,3,10".into(), "ltm.eta=0.5,1,2".into()]).unwrap();
        let t = grid_search(g.points(), |p| (p["ltm.lambda1"].ln() - 3f64.ln()).powi(2) + (p["ltm.eta"] - 0.5).abs());
        assert_eq!(t.points[t.best]["ltm.lambda1"], 3.0);
        assert_eq!(t.points[t.best]["ltm.eta"], 0.5);
    }

    #[test]
    fn random_points_are_seeded_and_in_range() {
        let g = GridSpec::random(&["stm.lambda1=0.001:1".into()], 20, 4).unwrap();
        let a = g.points();
        assert_eq!(a, g.points());
        assert!(a.iter().all(|p| (0.001..=1.0).contains(&p["stm.lambda1"])));
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(GridSpec::explicit(&["lambda9=1".into()]).is_err());
        assert!(GridSpec::explicit(&["ltm.lambda1=".into()]).is_err());
        assert!(GridSpec::random(&["ltm.lambda1=0:1".into()], 3, 0).is_err());
    }
}
