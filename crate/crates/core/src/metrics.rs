//! Front quality measures and cross-run front merging.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::nsga2::{dominates, Objectives};
use crate::objectives::Genome;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("point ({f1}, {f2}) lies outside the reference box ({ref1}, {ref2})")]
    OutsideReference { f1: f64, f2: f64, ref1: f64, ref2: f64 },
}

/// Worst corner of the objective box.
pub const REFERENCE: Objectives = Objectives { f1: 1.0, f2: 0.0 };

fn inside(p: &Objectives, r: Objectives) -> bool {
    p.f1 <= r.f1 && p.f2 >= r.f2
}

/// Area dominated by `points` inside the box bounded by `reference`
/// (`f1` minimised, `f2` maximised). Dominated and boundary points add nothing.
pub fn hypervolume(points: &[Objectives], reference: Objectives) -> Result<f64, MetricsError> {
    if let Some(p) = points.iter().find(|p| !inside(p, reference)) {
        return Err(MetricsError::OutsideReference {
            f1: p.f1,
            f2: p.f2,
            ref1: reference.f1,
            ref2: reference.f2,
        });
    }
    Ok(sweep(points.to_vec(), reference))
}

/// Like [`hypervolume`] but silently ignores points outside the box.
pub fn hypervolume_within(points: &[Objectives], reference: Objectives) -> f64 {
    sweep(points.iter().copied().filter(|p| inside(p, reference)).collect(), reference)
}

fn sweep(mut pts: Vec<Objectives>, reference: Objectives) -> f64 {
    pts.sort_by(|a, b| a.f1.partial_cmp(&b.f1).unwrap_or(Ordering::Equal));
    let mut area = 0.0;
    let mut top = reference.f2;
    for (i, p) in pts.iter().enumerate() {
        top = top.max(p.f2);
        let right = pts.get(i + 1).map_or(reference.f1, |q| q.f1);
        area += (right - p.f1) * (top - reference.f2);
    }
    area
}

/// Indices of the points not dominated by any other, ascending.
pub fn nondominated_indices(points: &[Objectives]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    // f1 ascending, then f2 descending: a point can only be dominated by an earlier one
    order.sort_by(|&a, &b| {
        points[a]
            .f1
            .partial_cmp(&points[b].f1)
            .unwrap_or(Ordering::Equal)
            .then(points[b].f2.partial_cmp(&points[a].f2).unwrap_or(Ordering::Equal))
    });
    let mut keep = Vec::new();
    let mut best: Option<Objectives> = None;
    for i in order {
        let p = points[i];
        match best {
            Some(b) if dominates(&b, &p) => {}
            _ => {
                keep.push(i);
                if best.map_or(true, |b| p.f2 > b.f2 || (p.f2 == b.f2 && p.f1 < b.f1)) {
                    best = Some(p);
                }
            }
        }
    }
    keep.sort_unstable();
    keep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub run_id: usize,
    pub generation: usize,
    pub f1: f64,
    pub f2: f64,
    pub genome: Genome,
}

impl ParetoPoint {
    pub fn objectives(&self) -> Objectives {
        Objectives::new(self.f1, self.f2)
    }
}

/// Orders by `f1` ascending, then `f2` descending, then run and genome.
pub fn front_order(a: &ParetoPoint, b: &ParetoPoint) -> Ordering {
    a.f1.partial_cmp(&b.f1)
        .unwrap_or(Ordering::Equal)
        .then(b.f2.partial_cmp(&a.f2).unwrap_or(Ordering::Equal))
        .then(a.run_id.cmp(&b.run_id))
        .then_with(|| a.genome.to_genes().cmp(&b.genome.to_genes()))
}

/// Non-dominated filter over the union of every run's front, sorted by [`front_order`].
pub fn merge_pseudo_optimal(runs: &[Vec<ParetoPoint>]) -> Vec<ParetoPoint> {
    let all: Vec<&ParetoPoint> = runs.iter().flatten().collect();
    let objs: Vec<Objectives> = all.iter().map(|p| p.objectives()).collect();
    let mut merged: Vec<ParetoPoint> = nondominated_indices(&objs)
        .into_iter()
        .map(|i| all[i].clone())
        .collect();
    merged.sort_by(front_order);
    merged
}

/// Index of the point farthest from the segment joining the lowest-`f1` and
/// highest-`f1` points; ties go to the lower index. `None` for an empty front.
pub fn elbow_index(points: &[Objectives]) -> Option<usize> {
    let cmp = |a: &&Objectives, b: &&Objectives| a.f1.partial_cmp(&b.f1).unwrap_or(Ordering::Equal);
    let lo = *points.iter().min_by(cmp)?;
    let hi = *points.iter().max_by(cmp)?;
    let (dx, dy) = (hi.f1 - lo.f1, hi.f2 - lo.f2);
    let len = dx.hypot(dy);
    let dist = |p: &Objectives| {
        if len == 0.0 {
            (p.f1 - lo.f1).hypot(p.f2 - lo.f2)
        } else {
            (dx * (p.f2 - lo.f2) - dy * (p.f1 - lo.f1)).abs() / len
        }
    };
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if dist(p) > dist(&points[best]) {
            best = i;
        }
    }
    Some(best)
}

/// First quartile, median and third quartile with linear interpolation between
/// order statistics. `None` for empty input.
pub fn quartiles(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let q = |p: f64| {
        let h = p * (v.len() - 1) as f64;
        let i = h.floor() as usize;
        let frac = h - i as f64;
        if i + 1 < v.len() {
            v[i] + frac * (v[i + 1] - v[i])
        } else {
            v[i]
        }
    };
    Some((q(0.25), q(0.5), q(0.75)))
}
