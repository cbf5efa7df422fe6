//! Uniform cell grid over the state box. Values live at cell centers and are
//! read back by multilinear interpolation between neighbouring centers.

use serde::{Deserialize, Serialize};

use crate::problem::StateBox;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub state_box: StateBox,
    pub cells_per_axis: Vec<usize>,
}

/// Interpolation weights over at most `2^d` cell centers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stencil {
    pub cells: Vec<u32>,
    pub weights: Vec<f64>,
    /// The query point was outside the box and got clamped.
    pub clamped: bool,
}

impl Stencil {
    pub fn apply(&self, values: &[f64]) -> f64 {
        self.cells
            .iter()
            .zip(&self.weights)
            .map(|(&c, &w)| w * values[c as usize])
            .sum()
    }
}

impl GridSpec {
    pub fn new(state_box: StateBox, cells_per_axis: Vec<usize>) -> Result<Self> {
        if cells_per_axis.len() != state_box.dim() {
            return Err(Error::InvalidArgument(format!(
                "grid has {} axes, box has {}",
                cells_per_axis.len(),
                state_box.dim()
            )));
        }
        if cells_per_axis.iter().any(|&n| n < 2) {
            return Err(Error::InvalidArgument("need at least 2 cells per axis".into()));
        }
        Ok(GridSpec {
            state_box,
            cells_per_axis,
        })
    }

    pub fn dim(&self) -> usize {
        self.cells_per_axis.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells_per_axis.iter().product()
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.state_box.width(axis) / self.cells_per_axis[axis] as f64
    }

    pub fn max_width(&self) -> f64 {
        (0..self.dim()).map(|a| self.width(a)).fold(0.0, f64::max)
    }

    /// Row-major flattening with axis 0 fastest.
    pub fn flat(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for (a, &i) in multi.iter().enumerate() {
            idx += i * stride;
            stride *= self.cells_per_axis[a];
        }
        idx
    }

    pub fn multi(&self, mut flat: usize) -> Vec<usize> {
        self.cells_per_axis
            .iter()
            .map(|&n| {
                let i = flat % n;
                flat /= n;
                i
            })
            .collect()
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.center_into(flat, &mut out);
        out
    }

    pub fn center_into(&self, mut flat: usize, out: &mut [f64]) {
        for (a, o) in out.iter_mut().enumerate() {
            let n = self.cells_per_axis[a];
            let i = flat % n;
            flat /= n;
            *o = self.state_box.lo[a] + (i as f64 + 0.5) * self.width(a);
        }
    }

    /// Cell containing `y`, or `None` outside the box. Points on the upper
    /// face belong to the last cell.
    pub fn cell_of(&self, y: &[f64]) -> Option<usize> {
        if !self.state_box.contains(y) {
            return None;
        }
        let mut flat = 0;
        let mut stride = 1;
        for (a, &v) in y.iter().enumerate() {
            let n = self.cells_per_axis[a];
            let r = ((v - self.state_box.lo[a]) / self.width(a)).floor();
            let i = (r.max(0.0) as usize).min(n - 1);
            flat += i * stride;
            stride *= n;
        }
        Some(flat)
    }

    /// Multilinear interpolation stencil over cell centers; queries beyond
    /// the outermost centers are clamped to them.
    pub fn stencil(&self, y: &[f64]) -> Stencil {
        let d = self.dim();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        let clamped = !self.state_box.contains(y);
        for a in 0..d {
            let n = self.cells_per_axis[a];
            let p = ((y[a] - self.state_box.lo[a]) / self.width(a) - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (p.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = p - i0 as f64;
        }
        let corners = 1usize << d;
        let mut cells = Vec::with_capacity(corners);
        let mut weights = Vec::with_capacity(corners);
        let mut idx = vec![0usize; d];
        for mask in 0..corners {
            let mut w = 1.0;
            for a in 0..d {
                let up = (mask >> a) & 1 == 1;
                idx[a] = base[a] + up as usize;
                w *= if up { frac[a] } else { 1.0 - frac[a] };
            }
            if w > 0.0 {
                cells.push(self.flat(&idx) as u32);
                weights.push(w);
            }
        }
        Stencil {
            cells,
            weights,
            clamped,
        }
    }

    pub fn interpolate(&self, values: &[f64], y: &[f64]) -> f64 {
        self.stencil(y).apply(values)
    }

    /// Flat indices of the axis neighbours `(c, c + e_a)`.
    pub fn forward_neighbours(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for c in 0..self.n_cells() {
            let m = self.multi(c);
            let mut stride = 1;
            for a in 0..self.dim() {
                if m[a] + 1 < self.cells_per_axis[a] {
                    out.push((c, c + stride, a));
                }
                stride *= self.cells_per_axis[a];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid2() -> GridSpec {
        GridSpec::new(StateBox::new(vec![0.0, -1.0], vec![2.0, 1.0]), vec![4, 5]).unwrap()
    }

    #[test]
    fn centers_inside_and_indexing_round_trips() {
        let g = grid2();
        for c in 0..g.n_cells() {
            let x = g.center(c);
            assert!(g.state_box.contains(&x));
            assert_eq!(g.cell_of(&x), Some(c));
            assert_eq!(g.flat(&g.multi(c)), c);
        }
        assert_eq!(g.cell_of(&[2.0, 1.0]), Some(g.n_cells() - 1));
        assert_eq!(g.cell_of(&[2.1, 0.0]), None);
    }

    #[test]
    fn rejects_degenerate_grid() {
        assert!(GridSpec::new(StateBox::cube(1, 0.0, 1.0), vec![1]).is_err());
    }

    proptest! {
        #[test]
        fn interpolation_reproduces_affine_functions(x in 0.0f64..2.0, y in -1.0f64..1.0) {
            let g = grid2();
            let f = |p: &[f64]| 0.3 + 2.0 * p[0] - 0.7 * p[1];
            let vals: Vec<f64> = (0..g.n_cells()).map(|c| f(&g.center(c))).collect();
            // inside the hull of centers interpolation is exact for affine data
            let q = [x.clamp(0.25, 1.75), y.clamp(-0.8, 0.8)];
            prop_assert!((g.interpolate(&vals, &q) - f(&q)).abs() < 1e-12);
            let s = g.stencil(&[x, y]);
            prop_assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.weights.iter().all(|&w| w >= 0.0));
        }
    }
}
