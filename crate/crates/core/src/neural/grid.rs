//! Exhaustive hyperparameter search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub width: Vec<usize>,
    pub depth: Vec<usize>,
}

impl Default for GridSpace {
    fn default() -> Self {
        Self {
            lr: vec![1e-2, 5e-3, 1e-3],
            weight_decay: vec![1e-5, 1e-4, 1e-3],
            width: vec![50, 250, 500],
            depth: vec![1, 2, 5],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub weight_decay: f64,
    pub width: usize,
    pub depth: usize,
}

impl GridSpace {
    pub fn single(p: GridPoint) -> Self {
        Self {
            lr: vec![p.lr],
            weight_decay: vec![p.weight_decay],
            width: vec![p.width],
            depth: vec![p.depth],
        }
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &lr in &self.lr {
            for &weight_decay in &self.weight_decay {
                for &width in &self.width {
                    for &depth in &self.depth {
                        out.push(GridPoint {
                            lr,
                            weight_decay,
                            width,
                            depth,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub best: GridPoint,
    /// Every point with its mean validation MSE, in enumeration order.
    pub scores: Vec<(GridPoint, f64)>,
}

/// Scores every point by its mean validation MSE over `reps` calls of
/// `evaluate(point, rep)` and returns the lowest; exact ties go to the
/// smaller width, then the smaller depth. Points whose evaluation fails
/// score `+∞` and are never selected unless all fail.
pub fn grid_search<F>(space: &GridSpace, reps: usize, evaluate: F) -> Result<GridResult>
where
    F: Fn(&GridPoint, usize) -> Result<f64> + Sync,
{
    let points = space.points();
    if points.is_empty() || reps == 0 {
        return Err(Error::Config("grid search needs a non-empty space and at least one repetition".into()));
    }
    let scores: Vec<(GridPoint, f64)> = points
        .par_iter()
        .map(|p| {
            let mut total = 0.0;
            for r in 0..reps {
                match evaluate(p, r) {
                    Ok(v) if v.is_finite() => total += v,
                    _ => return (*p, f64::INFINITY),
                }
            }
            (*p, total / reps as f64)
        })
        .collect();
    let best = scores
        .iter()
        .min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(a.0.width.cmp(&b.0.width))
                .then(a.0.depth.cmp(&b.0.depth))
        })
        .map(|s| s.0)
        .expect("non-empty");
    if scores.iter().all(|s| s.1.is_infinite()) {
        return Err(Error::Divergence {
            epoch: 0,
            detail: "every grid point failed".into(),
        });
    }
    Ok(GridResult { best, scores })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_space_has_eighty_one_points() {
        let s = GridSpace::default();
        assert_eq!(s.points().len(), 81);
        assert_eq!(s.lr, vec![1e-2, 5e-3, 1e-3]);
    }

    #[test]
    fn single_point_space() {
        let p = GridPoint { lr: 0.1, weight_decay: 0.0, width: 3, depth: 1 };
        let r = grid_search(&GridSpace::single(p), 2, |_, _| Ok(1.0)).unwrap();
        assert_eq!(r.best, p);
    }

    #[test]
    fn dominating_point_wins_and_ties_prefer_small_models() {
        let space = GridSpace::default();
        for seed in 0..3u64 {
            let r = grid_search(&space, 3, |p, rep| {
                let noise = ((seed + rep as u64) % 5) as f64 * 1e-3;
                Ok(if p.lr == 5e-3 && p.weight_decay == 1e-4 && p.width == 250 && p.depth == 2 { 0.1 } else { 1.0 + noise })
            })
            .unwrap();
            assert_eq!((r.best.width, r.best.depth, r.best.lr), (250, 2, 5e-3));
        }
        let r = grid_search(&space, 1, |_, _| Ok(0.5)).unwrap();
        assert_eq!((r.best.width, r.best.depth), (50, 1));
    }

    #[test]
    fn failures_are_skipped() {
        let space = GridSpace { lr: vec![1.0, 2.0], ..GridSpace::single(GridPoint { lr: 0.0, weight_decay: 0.0, width: 1, depth: 1 }) };
        let r = grid_search(&space, 1, |p, _| if p.lr == 1.0 { Err(Error::Config("x".into())) } else { Ok(3.0) }).unwrap();
        assert_eq!(r.best.lr, 2.0);
        assert!(grid_search(&space, 1, |_, _| Ok(f64::NAN)).is_err());
    }
}
