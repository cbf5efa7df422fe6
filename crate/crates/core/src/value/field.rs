//! Backward dynamic programming for `V_t` on a cell-centered grid.
//!
//! `values[k][c]` approximates the least total cost over `k` control steps
//! from the center of cell `c`. One step holds a codebook control for `step`
//! time units: the foot point and running cost come from the same RK4
//! integrator used for rollouts, and the continuation value is read back by
//! clamped multilinear interpolation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::grid::GridSpec;
use crate::integrate::{steps_for, BoxPolicy, PiecewiseConstantControl, Stepper};
use crate::par;
use crate::problem::ControlProblem;
use crate::{Error, Result};

/// Foot points escaping the box above this fraction mark the field as
/// boundary-contaminated.
pub const CONTAMINATION_THRESHOLD: f64 = 0.05;

/// Keep at most this many stored floats before thinning stored layers.
const STORAGE_BUDGET: usize = 40_000_000;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValueOptions {
    /// Store every `store_every`-th layer (the last layer is always stored).
    /// Chosen from the storage budget when `None`.
    pub store_every: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub k: usize,
    pub min: f64,
    pub max: f64,
    /// Range of `values[k] - values[k - 1]` over cells (zero for `k = 0`).
    pub increment_min: f64,
    pub increment_max: f64,
}

/// One-step transitions from every cell center under every control.
pub(crate) struct Transitions {
    corners: usize,
    n_u: usize,
    cells: Vec<u32>,
    weights: Vec<f64>,
    costs: Vec<f64>,
    escaped: usize,
}

impl Transitions {
    pub(crate) fn build(problem: &ControlProblem, grid: &GridSpec, step: f64) -> Self {
        let d = grid.dim();
        let corners = 1usize << d;
        let n_u = problem.codebook.len();
        let per_cell = par::map_range(grid.n_cells(), |c| {
            let mut stepper = Stepper::new(problem, step);
            let mut out = Vec::with_capacity(n_u);
            let x = grid.center(c);
            for u in 0..n_u {
                let mut y = x.clone();
                let (cost, ok) = match stepper.advance(&mut y, u, BoxPolicy::Ignore, 0.0) {
                    Ok(cost) => (cost, problem.state_box.contains(&y)),
                    Err(_) => {
                        // blow-up inside one step: hold the center
                        y.copy_from_slice(&x);
                        (problem.running_cost(&x, u) * step, false)
                    }
                };
                let st = grid.stencil(&y);
                let mut cells = vec![c as u32; corners];
                let mut weights = vec![0.0; corners];
                cells[..st.cells.len()].copy_from_slice(&st.cells);
                weights[..st.weights.len()].copy_from_slice(&st.weights);
                out.push((cells, weights, cost, ok));
            }
            out
        });
        let n = grid.n_cells() * n_u;
        let mut t = Transitions {
            corners,
            n_u,
            cells: Vec::with_capacity(n * corners),
            weights: Vec::with_capacity(n * corners),
            costs: Vec::with_capacity(n),
            escaped: 0,
        };
        for cell in per_cell {
            for (cells, weights, cost, ok) in cell {
                t.cells.extend(cells);
                t.weights.extend(weights);
                t.costs.push(cost);
                t.escaped += (!ok) as usize;
            }
        }
        t
    }

    #[inline]
    fn bellman(&self, c: usize, prev: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        for u in 0..self.n_u {
            let row = c * self.n_u + u;
            let base = row * self.corners;
            let mut v = self.costs[row];
            for j in base..base + self.corners {
                v += self.weights[j] * prev[self.cells[j] as usize];
            }
            if v < best {
                best = v;
            }
        }
        best
    }
}

impl Transitions {
    /// `min_u interp(prev, foot(c, u))`: one step of free repositioning.
    #[inline]
    pub(crate) fn reposition(&self, c: usize, prev: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        for u in 0..self.n_u {
            let base = (c * self.n_u + u) * self.corners;
            let mut v = 0.0;
            for j in base..base + self.corners {
                v += self.weights[j] * prev[self.cells[j] as usize];
            }
            if v < best {
                best = v;
            }
        }
        best
    }
}

/// Grid-sampled finite-horizon values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueField {
    pub grid: GridSpec,
    pub step: f64,
    pub horizon_steps: usize,
    pub store_every: usize,
    stored_k: Vec<usize>,
    layers: Vec<Vec<f64>>,
    pub summaries: Vec<LayerSummary>,
    pub escaped_fraction: f64,
    pub contaminated: bool,
}

/// `V_t` for `t = step, 2 step, ..., T` by backward recursion.
pub fn value_backward(problem: &ControlProblem, grid: &GridSpec, t: f64, step: f64) -> Result<ValueField> {
    value_backward_with(problem, grid, t, step, &ValueOptions::default())
}

pub fn value_backward_with(
    problem: &ControlProblem,
    grid: &GridSpec,
    t: f64,
    step: f64,
    opts: &ValueOptions,
) -> Result<ValueField> {
    if problem.cost_bounds != (0.0, 1.0) {
        return Err(Error::InvalidArgument(
            "value recursion expects a normalized cost (bounds (0, 1))".into(),
        ));
    }
    if grid.state_box != problem.state_box {
        return Err(Error::InvalidArgument("grid box differs from the problem box".into()));
    }
    if !(step > 0.0) || !(t > 0.0) {
        return Err(Error::InvalidArgument("need T > 0 and step > 0".into()));
    }
    let r = t / step;
    if (r - r.round()).abs() > 1e-9 * r.max(1.0) {
        return Err(Error::InvalidArgument(format!("T = {t} is not a multiple of step {step}")));
    }
    let k_max = r.round() as usize;
    let n = grid.n_cells();
    let store_every = match opts.store_every {
        Some(s) if s >= 1 => s,
        Some(_) => return Err(Error::InvalidArgument("store_every must be >= 1".into())),
        None => auto_stride(k_max, n),
    };

    let trans = Transitions::build(problem, grid, step);
    let escaped_fraction = trans.escaped as f64 / (n * trans.n_u) as f64;

    let mut prev = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut stored_k = vec![0];
    let mut layers = vec![prev.clone()];
    let mut summaries = vec![LayerSummary {
        k: 0,
        min: 0.0,
        max: 0.0,
        increment_min: 0.0,
        increment_max: 0.0,
    }];
    for k in 1..=k_max {
        par::fill(&mut next, |c| trans.bellman(c, &prev));
        let mut s = LayerSummary {
            k,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            increment_min: f64::INFINITY,
            increment_max: f64::NEG_INFINITY,
        };
        for (a, b) in next.iter().zip(&prev) {
            s.min = s.min.min(*a);
            s.max = s.max.max(*a);
            s.increment_min = s.increment_min.min(a - b);
            s.increment_max = s.increment_max.max(a - b);
        }
        summaries.push(s);
        std::mem::swap(&mut prev, &mut next);
        if k % store_every == 0 || k == k_max {
            stored_k.push(k);
            layers.push(prev.clone());
        }
    }

    Ok(ValueField {
        grid: grid.clone(),
        step,
        horizon_steps: k_max,
        store_every,
        stored_k,
        layers,
        summaries,
        escaped_fraction,
        contaminated: escaped_fraction > CONTAMINATION_THRESHOLD,
    })
}

fn auto_stride(k_max: usize, n_cells: usize) -> usize {
    let need = (k_max + 1) * n_cells;
    if need <= STORAGE_BUDGET {
        return 1;
    }
    let min = need.div_ceil(STORAGE_BUDGET);
    // round up to 1, 2, 5 x 10^j so that round horizons stay stored
    let mut scale = 1;
    loop {
        for m in [1, 2, 5] {
            if m * scale >= min {
                return m * scale;
            }
        }
        scale *= 10;
    }
}

impl ValueField {
    pub fn horizon(&self) -> f64 {
        self.horizon_steps as f64 * self.step
    }

    /// Stored horizons `t = k * step`, increasing (including `t = 0`).
    pub fn stored_horizons(&self) -> Vec<f64> {
        self.stored_k.iter().map(|&k| k as f64 * self.step).collect()
    }

    pub fn stored_steps(&self) -> &[usize] {
        &self.stored_k
    }

    fn position(&self, k: usize) -> Option<usize> {
        self.stored_k.binary_search(&k).ok()
    }

    /// Layer index for horizon `t`, which must be a stored multiple of the step.
    pub fn layer_of(&self, t: f64) -> Result<usize> {
        let k = steps_for(t, self.step);
        if (k as f64 * self.step - t).abs() > 1e-9 * t.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon {t} is not a multiple of the step {}",
                self.step
            )));
        }
        if k > self.horizon_steps {
            return Err(Error::HorizonTooLong {
                requested: t,
                available: self.horizon(),
            });
        }
        if self.position(k).is_none() {
            return Err(Error::InvalidArgument(format!(
                "horizon {t} was not stored (every {} steps)",
                self.store_every
            )));
        }
        Ok(k)
    }

    /// Total values `values[k]` for a stored layer.
    pub fn totals(&self, k: usize) -> Option<&[f64]> {
        self.position(k).map(|i| self.layers[i].as_slice())
    }

    /// Largest stored layer at or below `k`.
    pub(crate) fn totals_at_or_below(&self, k: usize) -> (usize, &[f64]) {
        let i = match self.stored_k.binary_search(&k) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        (self.stored_k[i], &self.layers[i])
    }

    /// `V(t, y)`: interpolated total cost divided by `t`.
    pub fn value_at(&self, t: f64, y: &[f64]) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::InvalidArgument("value horizon must be positive".into()));
        }
        let k = self.layer_of(t)?;
        let tk = k as f64 * self.step;
        Ok(self.grid.interpolate(self.totals(k).unwrap(), y) / tk)
    }

    /// Average value `values[k] / t` at every cell of a stored layer.
    pub fn averages(&self, k: usize) -> Option<Vec<f64>> {
        let t = k as f64 * self.step;
        self.totals(k).map(|v| v.iter().map(|x| x / t).collect())
    }

    /// Robust Lipschitz estimate of the average value fields over stored
    /// horizons `t >= 1`: the largest per-layer 90th percentile of neighbour
    /// difference quotients.
    pub fn lipschitz_estimate(&self) -> f64 {
        let nb = self.grid.forward_neighbours();
        let mut best = 0.0f64;
        for (i, &k) in self.stored_k.iter().enumerate() {
            let t = k as f64 * self.step;
            if t < 1.0 - 1e-12 {
                continue;
            }
            let v = &self.layers[i];
            let mut q: Vec<f64> = nb
                .iter()
                .map(|&(a, b, ax)| (v[a] - v[b]).abs() / t / self.grid.width(ax))
                .collect();
            if q.is_empty() {
                continue;
            }
            let pos = ((q.len() - 1) as f64 * 0.9).round() as usize;
            let (_, p90, _) = q.select_nth_unstable_by(pos, f64::total_cmp);
            best = best.max(*p90);
        }
        best
    }

    /// Control that at each step minimizes running cost plus the stored
    /// continuation value (nearest stored layer at or below the remaining
    /// horizon).
    pub fn greedy_control(&self, problem: &ControlProblem, y_start: &[f64], t: f64) -> Result<PiecewiseConstantControl> {
        let k = steps_for(t, self.step);
        if k > self.horizon_steps {
            return Err(Error::HorizonTooLong {
                requested: t,
                available: self.horizon(),
            });
        }
        let mut stepper = Stepper::new(problem, self.step);
        let mut y = y_start.to_vec();
        let mut word = Vec::with_capacity(k);
        let mut trial = vec![0.0; y.len()];
        for j in 0..k {
            let (_, cont) = self.totals_at_or_below(k - j - 1);
            let mut best = (f64::INFINITY, 0usize);
            for u in 0..problem.codebook.len() {
                trial.copy_from_slice(&y);
                let Ok(c) = stepper.advance(&mut trial, u, BoxPolicy::Ignore, 0.0) else {
                    continue;
                };
                let v = c + self.grid.interpolate(cont, &trial);
                if v < best.0 {
                    best = (v, u);
                }
            }
            word.push(best.1);
            stepper.advance(&mut y, best.1, BoxPolicy::Ignore, 0.0)?;
        }
        Ok(PiecewiseConstantControl::new(self.step, word))
    }

    /// Columns: t, cell, c_1..c_d, total, average.
    pub fn write_csv<W: Write>(&self, w: W, horizons: &[f64]) -> Result<()> {
        let d = self.grid.dim();
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string(), "cell".to_string()];
        header.extend((1..=d).map(|i| format!("c_{i}")));
        header.push("total".into());
        header.push("average".into());
        wr.write_record(&header)?;
        for &t in horizons {
            let k = self.layer_of(t)?;
            let tk = k as f64 * self.step;
            let v = self.totals(k).unwrap();
            for (c, &val) in v.iter().enumerate() {
                let mut row = vec![tk.to_string(), c.to_string()];
                row.extend(self.grid.center(c).iter().map(|x| x.to_string()));
                row.push(val.to_string());
                row.push(if tk > 0.0 { (val / tk).to_string() } else { String::new() });
                wr.write_record(&row)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::examples::builtin;
    use crate::integrate::{average_cost, rollout_with};
    use crate::problem::{normalize_cost, Cost};

    #[test]
    fn zero_cost_gives_zero_value() {
        let mut p = builtin("ex4").unwrap().problem;
        p.cost = Cost::Constant { value: 0.0 };
        let g = GridSpec::new(p.state_box.clone(), vec![10, 10]).unwrap();
        let f = value_backward(&p, &g, 2.0, 0.1).unwrap();
        for t in [0.1, 1.0, 2.0] {
            assert_eq!(f.value_at(t, &[0.3, 0.7]).unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_cost_value_is_constant() {
        let mut p = builtin("ex3").unwrap().problem;
        p.cost = Cost::Constant { value: 0.4 };
        let g = GridSpec::new(p.state_box.clone(), vec![40]).unwrap();
        let f = value_backward(&p, &g, 3.0, 0.1).unwrap();
        for t in [0.5, 1.0, 3.0] {
            assert!((f.value_at(t, &[0.2]).unwrap() - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_invariants_hold() {
        let p = builtin("ex5").unwrap().problem;
        let g = GridSpec::new(p.state_box.clone(), vec![48, 20]).unwrap();
        let f = value_backward(&p, &g, 10.0, 0.1).unwrap();
        for s in &f.summaries[1..] {
            let t = s.k as f64 * f.step;
            assert!(s.min >= -1e-12 && s.max <= t + 1e-9);
            assert!(s.increment_min >= -1e-12 && s.increment_max <= f.step + 1e-12, "{s:?}");
        }
        assert!(f.escaped_fraction > 0.0);
    }

    #[test]
    fn affine_rotation_value_is_exact_time_average() {
        // Interpolation reproduces affine data and the rotation keeps the unit
        // circle inside the hull of centers, so the recursion is exact there.
        let (p, _) = normalize_cost(&builtin("ex1").unwrap().problem).unwrap();
        let g = GridSpec::new(p.state_box.clone(), vec![40, 40]).unwrap();
        let f = value_backward(&p, &g, 5.0, 0.05).unwrap();
        let ctrl = PiecewiseConstantControl::constant(0.05, 0, 100);
        let tr = rollout_with(&p, &ctrl, &p.y0, 5.0, BoxPolicy::Enforce).unwrap();
        let v = f.value_at(1.0, &p.y0).unwrap();
        let oracle = average_cost(&tr, 0.0, 1.0).unwrap();
        assert!((v - oracle).abs() < 1e-9, "{v} vs {oracle}");
        // clamping at the box corners is not affine; the error creeps inward
        // one cell per step and grows with t
        for t in [2.5, 5.0] {
            let v = f.value_at(t, &p.y0).unwrap();
            let oracle = average_cost(&tr, 0.0, t).unwrap();
            assert!((v - oracle).abs() < 5e-4 * t, "{t}: {v} vs {oracle}");
        }
    }

    #[test]
    fn greedy_control_realizes_value_on_contraction() {
        let p = builtin("ex3").unwrap().problem.with_y0(vec![1.0]);
        let g = GridSpec::new(p.state_box.clone(), vec![200]).unwrap();
        let f = value_backward(&p, &g, 4.0, 0.1).unwrap();
        let c = f.greedy_control(&p, &[1.0], 4.0).unwrap();
        let tr = rollout_with(&p, &c, &[1.0], 4.0, BoxPolicy::Enforce).unwrap();
        let realized = average_cost(&tr, 0.0, 4.0).unwrap();
        let v = f.value_at(4.0, &[1.0]).unwrap();
        // steering to 0 with u = -1 then holding: closed form near 0.17
        assert!(realized >= v - 0.01 && realized <= v + 0.02, "{realized} vs {v}");
    }

    #[test]
    fn thinned_storage_keeps_round_horizons() {
        assert_eq!(auto_stride(100, 10), 1);
        assert_eq!(auto_stride(10_000, 10_000), 5);
        let mut p = builtin("ex3").unwrap().problem;
        p.cost = Cost::Constant { value: 0.2 };
        let g = GridSpec::new(p.state_box.clone(), vec![10]).unwrap();
        let f = value_backward_with(&p, &g, 1.0, 0.1, &ValueOptions { store_every: Some(4) }).unwrap();
        assert!(f.value_at(0.8, &[0.0]).is_ok());
        assert!(f.value_at(1.0, &[0.0]).is_ok());
        assert!(f.value_at(0.5, &[0.0]).is_err());
    }

    #[test]
    fn rejects_unnormalized_problem() {
        let p = builtin("ex1").unwrap().problem;
        let g = GridSpec::new(p.state_box.clone(), vec![10, 10]).unwrap();
        assert!(value_backward(&p, &g, 1.0, 0.1).is_err());
    }
}
