//! Inverse-distance weighting from scattered points onto a regular grid.

use std::cmp::Ordering;

use crate::error::{data_err, dim_err, Result};
use crate::numerics::Tensor;

/// Neighbours used per grid node.
pub const NEIGHBOURS: usize = 4;
/// Distances at or below this snap a node onto a data point.
const COINCIDENT: f64 = 1e-12;

/// Square grid over `[−half_width, half_width]²`.
///
/// Node `(i, j)` sits at `x = −r + 2r·j/(cols−1)`, `y = r − 2r·i/(rows−1)`,
/// so row 0 is the top edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub half_width: f64,
}

impl GridSpec {
    /// Grid whose half-width is the largest point radius padded by 5%.
    pub fn covering(points: &[(f64, f64)], rows: usize, cols: usize) -> Self {
        let r = points.iter().map(|(x, y)| x.hypot(*y)).fold(0.0, f64::max);
        let r = if r > 0.0 { r * 1.05 } else { 1.0 };
        Self { rows, cols, half_width: r }
    }

    pub fn node(&self, i: usize, j: usize) -> (f64, f64) {
        let axis = |k: usize, n: usize| {
            if n == 1 {
                0.0
            } else {
                -self.half_width + 2.0 * self.half_width * k as f64 / (n - 1) as f64
            }
        };
        (axis(j, self.cols), -axis(i, self.rows))
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn coord_cmp(a: &(f64, f64), b: &(f64, f64)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1))
}

/// Counter-clockwise hull without collinear vertices.
fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(coord_cmp);
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_hull(hull: &[(f64, f64)], q: (f64, f64), tol: f64) -> bool {
    (0..hull.len()).all(|k| {
        let a = hull[k];
        let b = hull[(k + 1) % hull.len()];
        let edge = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        cross(a, b, q) >= -tol * edge
    })
}

/// Precomputed neighbour weights for a fixed point layout and grid. Reusable
/// across any number of value sets.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationPlan {
    grid: GridSpec,
    n_points: usize,
    /// Per node: `(point index, normalised weight)`.
    nodes: Vec<Vec<(usize, f64)>>,
}

impl InterpolationPlan {
    /// Needs at least three non-collinear points with distinct coordinates.
    ///
    /// Neighbours are ranked by distance with coordinate tie-breaks, so the
    /// plan does not depend on the order in which points are given.
    pub fn new(points: &[(f64, f64)], grid: GridSpec) -> Result<Self> {
        if grid.rows == 0 || grid.cols == 0 {
            return Err(dim_err!("grid must be non-empty"));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(data_err!("interpolation points must be finite"));
        }
        let mut sorted = points.to_vec();
        sorted.sort_by(coord_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(data_err!("interpolation points must have distinct coordinates"));
        }
        let hull = convex_hull(points);
        if hull.len() < 3 {
            return Err(data_err!("interpolation needs at least 3 non-collinear points"));
        }
        let scale = grid.half_width.max(1e-300);
        let mut nodes = Vec::with_capacity(grid.rows * grid.cols);
        let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(points.len());
        for i in 0..grid.rows {
            for j in 0..grid.cols {
                let q = grid.node(i, j);
                ranked.clear();
                ranked.extend(points.iter().enumerate().map(|(k, p)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2), k)));
                ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| coord_cmp(&points[a.1], &points[b.1])));
                let (d0, nearest) = ranked[0];
                if d0.sqrt() <= COINCIDENT || !inside_hull(&hull, q, 1e-12 * scale) {
                    nodes.push(vec![(nearest, 1.0)]);
                    continue;
                }
                let take = &ranked[..NEIGHBOURS.min(ranked.len())];
                let total: f64 = take.iter().map(|(d2, _)| 1.0 / d2).sum();
                nodes.push(take.iter().map(|&(d2, k)| (k, (1.0 / d2) / total)).collect());
            }
        }
        Ok(Self { grid, n_points: points.len(), nodes })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    /// Grid image `[rows, cols]` for `values[k]` at point `k`.
    pub fn apply(&self, values: &[f64]) -> Result<Tensor> {
        let mut out = vec![0.0; self.nodes.len()];
        self.apply_into(values, &mut out)?;
        Ok(Tensor::from_raw(vec![self.grid.rows, self.grid.cols], out))
    }

    pub fn apply_into(&self, values: &[f64], out: &mut [f64]) -> Result<()> {
        if values.len() != self.n_points {
            return Err(dim_err!("plan has {} points, got {} values", self.n_points, values.len()));
        }
        if out.len() != self.nodes.len() {
            return Err(dim_err!("output buffer holds {} cells, grid has {}", out.len(), self.nodes.len()));
        }
        for (cell, node) in out.iter_mut().zip(&self.nodes) {
            *cell = node.iter().map(|&(k, w)| w * values[k]).sum();
        }
        Ok(())
    }
}

/// One-shot interpolation of `(x, y, value)` points. Points repeated with the
/// same value are merged; repeated with different values they are an error.
pub fn interpolate_to_grid(points: &[(f64, f64, f64)], grid: GridSpec) -> Result<Tensor> {
    let mut sorted: Vec<(f64, f64, f64)> = points.to_vec();
    sorted.sort_by(|a, b| coord_cmp(&(a.0, a.1), &(b.0, b.1)));
    let mut unique: Vec<(f64, f64, f64)> = Vec::with_capacity(sorted.len());
    for p in sorted {
        match unique.last() {
            Some(last) if (last.0, last.1) == (p.0, p.1) => {
                if last.2 != p.2 {
                    return Err(data_err!("point ({}, {}) has conflicting values {} and {}", p.0, p.1, last.2, p.2));
                }
            }
            _ => unique.push(p),
        }
    }
    let coords: Vec<(f64, f64)> = unique.iter().map(|p| (p.0, p.1)).collect();
    let values: Vec<f64> = unique.iter().map(|p| p.2).collect();
    InterpolationPlan::new(&coords, grid)?.apply(&values)
}
