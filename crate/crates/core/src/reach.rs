//! Grid approximation of the reachable sets `G^m(z)` (reached by time `m`)
//! and of the exact-time slices (reached at time `m`).
//!
//! Every occupied cell carries a few representative states that were
//! actually reached. Layers advance by one integrator step per codebook
//! control from each representative. Among all states landing in a cell the
//! survivors are the one nearest the cell center and the extremes along each
//! axis, so slow motion inside a cell is not lost to a stationary state.
//! Ties go to the lowest source, then the lowest control.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::grid::GridSpec;
use crate::integrate::{BoxPolicy, Stepper};
use crate::par;
use crate::problem::{norm, ControlProblem};
use crate::{Error, Result};

const UNREACHED: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Escape {
    pub layer: usize,
    pub cell: u32,
    pub control: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachSet {
    pub grid: GridSpec,
    pub step: f64,
    pub start: Vec<f64>,
    /// Sorted cell indices occupied at exactly `k * step`.
    pub layers: Vec<Vec<u32>>,
    /// Cell of each representative of layer `k`, sorted (cells may repeat).
    pub layer_points: Vec<Vec<u32>>,
    /// Representative states of layer `k`, flattened (`dim` per point).
    pub layer_states: Vec<Vec<f64>>,
    /// Layer in which each cell was first reached (`u32::MAX` if never).
    first_layer: Vec<u32>,
    /// First representative of each reached cell, flattened.
    first_state: Vec<f64>,
    pub escaped: Vec<Escape>,
    /// Some cell is wider than one step at the fastest sampled speed.
    pub tunneling_warning: bool,
}

impl ReachSet {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_time(&self, k: usize) -> f64 {
        k as f64 * self.step
    }

    /// Layer index for time `m`, if `m` is a layer time.
    pub fn layer_index(&self, m: f64) -> Result<usize> {
        let r = m / self.step;
        let k = r.round();
        if (r - k).abs() > 1e-9 * r.abs().max(1.0) || k < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "m = {m} is not a multiple of the reach step {}",
                self.step
            )));
        }
        let k = k as usize;
        if k >= self.layers.len() {
            return Err(Error::HorizonTooLong {
                requested: m,
                available: self.layer_time(self.layers.len() - 1),
            });
        }
        Ok(k)
    }

    /// Number of representatives in layer `k`.
    pub fn n_points(&self, k: usize) -> usize {
        self.layer_points[k].len()
    }

    pub fn layer_state(&self, k: usize, i: usize) -> &[f64] {
        let d = self.grid.dim();
        &self.layer_states[k][i * d..(i + 1) * d]
    }

    pub fn first_layer_of(&self, cell: u32) -> Option<usize> {
        match self.first_layer[cell as usize] {
            UNREACHED => None,
            k => Some(k as usize),
        }
    }

    /// Cells reached at or before layer `k`, sorted.
    pub fn cumulative_upto(&self, k: usize) -> Vec<u32> {
        (0..self.first_layer.len() as u32)
            .filter(|&c| self.first_layer[c as usize] as usize <= k && self.first_layer[c as usize] != UNREACHED)
            .collect()
    }

    /// Cells reached at any computed layer, sorted.
    pub fn cumulative(&self) -> Vec<u32> {
        self.cumulative_upto(self.layers.len() - 1)
    }

    pub fn first_state(&self, cell: u32) -> Option<&[f64]> {
        self.first_layer_of(cell)?;
        let d = self.grid.dim();
        let c = cell as usize;
        Some(&self.first_state[c * d..(c + 1) * d])
    }

    /// Up to `max` reached states spread evenly over the cumulative set (in
    /// cell order); the start state always comes first.
    pub fn representatives(&self, max: usize) -> Vec<Vec<f64>> {
        let cum = self.cumulative();
        let mut out = vec![self.start.clone()];
        if max <= 1 || cum.is_empty() {
            return out;
        }
        let want = (max - 1).min(cum.len());
        let start_cell = self.grid.cell_of(&self.start);
        for i in 0..want {
            let pos = if want == 1 { 0 } else { i * (cum.len() - 1) / (want - 1) };
            let c = cum[pos];
            if Some(c as usize) == start_cell {
                continue;
            }
            out.push(self.first_state(c).unwrap().to_vec());
        }
        out
    }

    /// Columns: layer, cell, i_1..i_d, c_1..c_d.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.grid.dim();
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["layer".to_string(), "cell".to_string()];
        header.extend((1..=d).map(|i| format!("i_{i}")));
        header.extend((1..=d).map(|i| format!("c_{i}")));
        wr.write_record(&header)?;
        for (k, layer) in self.layers.iter().enumerate() {
            for &c in layer {
                let mut row = vec![k.to_string(), c.to_string()];
                row.extend(self.grid.multi(c as usize).iter().map(|i| i.to_string()));
                row.extend(self.grid.center(c as usize).iter().map(|v| v.to_string()));
                wr.write_record(&row)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

struct Candidate {
    dest: u32,
    dist: f64,
    src: u32,
    control: usize,
    state: Vec<f64>,
}

/// Indices (into `group`) of the survivors of one destination cell, in
/// increasing order. `group` is sorted by distance to the center, then
/// source, then control.
fn survivors(group: &[Candidate], d: usize) -> Vec<usize> {
    let mut keep = vec![0];
    for a in 0..d {
        let mut lo = 0;
        let mut hi = 0;
        for (i, c) in group.iter().enumerate() {
            if c.state[a] < group[lo].state[a] {
                lo = i;
            }
            if c.state[a] > group[hi].state[a] {
                hi = i;
            }
        }
        keep.push(lo);
        keep.push(hi);
    }
    keep.sort_unstable();
    keep.dedup();
    keep
}

/// Reach layers from the problem's `y0` up to time `m`.
pub fn propagate_reach(problem: &ControlProblem, grid: &GridSpec, m: f64, step: f64) -> Result<ReachSet> {
    propagate_reach_from(problem, grid, &problem.y0, m, step)
}

/// Reach layers from an arbitrary start state.
pub fn propagate_reach_from(
    problem: &ControlProblem,
    grid: &GridSpec,
    start: &[f64],
    m: f64,
    step: f64,
) -> Result<ReachSet> {
    if !(step > 0.0) || !(m >= 0.0) {
        return Err(Error::InvalidArgument("need step > 0 and m >= 0".into()));
    }
    let r = m / step;
    if (r - r.round()).abs() > 1e-12 * r.max(1.0) {
        return Err(Error::InvalidArgument(format!("step {step} does not divide m = {m}")));
    }
    if grid.state_box != problem.state_box {
        return Err(Error::InvalidArgument("grid box differs from the problem box".into()));
    }
    let k_max = r.round() as usize;
    let d = problem.dim;
    let start_cell = grid
        .cell_of(start)
        .ok_or_else(|| Error::InvalidArgument(format!("start state {start:?} outside the box")))?
        as u32;

    let n_cells = grid.n_cells();
    let mut first_layer = vec![UNREACHED; n_cells];
    let mut first_state = vec![0.0; n_cells * d];
    first_layer[start_cell as usize] = 0;
    first_state[start_cell as usize * d..(start_cell as usize + 1) * d].copy_from_slice(start);

    let mut layers = vec![vec![start_cell]];
    let mut layer_points = vec![vec![start_cell]];
    let mut layer_states = vec![start.to_vec()];
    let mut escaped = Vec::new();
    let n_u = problem.codebook.len();
    let inv_w: Vec<f64> = (0..d).map(|a| 1.0 / grid.width(a)).collect();

    for k in 0..k_max {
        let cur = &layer_points[k];
        let cur_states = &layer_states[k];
        let expansions: Vec<(Vec<Candidate>, Vec<Escape>)> = par::map_range(cur.len(), |i| {
            let mut stepper = Stepper::new(problem, step);
            let src = cur[i];
            let y_src = &cur_states[i * d..(i + 1) * d];
            let mut cands = Vec::with_capacity(n_u);
            let mut esc = Vec::new();
            let mut center = vec![0.0; d];
            for j in 0..n_u {
                let mut y = y_src.to_vec();
                let ok = stepper.advance(&mut y, j, BoxPolicy::Enforce, 0.0).is_ok();
                match grid.cell_of(&y).filter(|_| ok) {
                    Some(dest) => {
                        grid.center_into(dest, &mut center);
                        let dist = (0..d)
                            .map(|a| ((y[a] - center[a]) * inv_w[a]).powi(2))
                            .sum::<f64>();
                        cands.push(Candidate {
                            dest: dest as u32,
                            dist,
                            src,
                            control: j,
                            state: y,
                        });
                    }
                    None => esc.push(Escape {
                        layer: k,
                        cell: src,
                        control: j,
                    }),
                }
            }
            (cands, esc)
        });
        let mut cands = Vec::new();
        for (c, e) in expansions {
            cands.extend(c);
            escaped.extend(e);
        }
        cands.sort_by(|a, b| {
            a.dest
                .cmp(&b.dest)
                .then(a.dist.total_cmp(&b.dist))
                .then(a.src.cmp(&b.src))
                .then(a.control.cmp(&b.control))
        });
        let mut next = Vec::new();
        let mut next_points = Vec::new();
        let mut next_states = Vec::new();
        let mut start_i = 0;
        while start_i < cands.len() {
            let dest = cands[start_i].dest;
            let mut end = start_i;
            while end < cands.len() && cands[end].dest == dest {
                end += 1;
            }
            let group = &cands[start_i..end];
            let ci = dest as usize;
            if first_layer[ci] == UNREACHED {
                first_layer[ci] = (k + 1) as u32;
                first_state[ci * d..(ci + 1) * d].copy_from_slice(&group[0].state);
            }
            next.push(dest);
            for i in survivors(group, d) {
                next_points.push(dest);
                next_states.extend_from_slice(&group[i].state);
            }
            start_i = end;
        }
        if next.is_empty() {
            return Err(Error::EmptyLayer { layer: k + 1 });
        }
        layers.push(next);
        layer_points.push(next_points);
        layer_states.push(next_states);
    }

    let vmax = max_center_speed(problem, grid);
    let tunneling_warning = (0..d).any(|a| grid.width(a) > step * vmax);

    Ok(ReachSet {
        grid: grid.clone(),
        step,
        start: start.to_vec(),
        layers,
        layer_points,
        layer_states,
        first_layer,
        first_state,
        escaped,
        tunneling_warning,
    })
}

fn max_center_speed(problem: &ControlProblem, grid: &GridSpec) -> f64 {
    let speeds = par::map_range(grid.n_cells(), |c| {
        let x = grid.center(c);
        (0..problem.codebook.len())
            .map(|j| norm(&problem.velocity(&x, j)))
            .fold(0.0, f64::max)
    });
    speeds.into_iter().fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationEntry {
    pub epsilon: f64,
    /// Smallest layer time whose cumulative set is `epsilon`-dense in the
    /// final cumulative set.
    pub m0: f64,
    pub saturated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationReport {
    pub m_max: f64,
    /// A level counts as saturated when `m0 <= fraction * m_max`.
    pub fraction: f64,
    pub entries: Vec<SaturationEntry>,
}

impl ReachSet {
    /// For each `epsilon`, the smallest layer time `m0` such that every cell
    /// of the final cumulative set lies within `delta <= epsilon` of a cell
    /// center reached by `m0`.
    pub fn saturation<F>(&self, epsilons: &[f64], delta: F, fraction: f64) -> SaturationReport
    where
        F: Fn(&[f64], &[f64]) -> f64 + Sync + Send,
    {
        let cum = self.cumulative();
        let mut by_layer: Vec<(u32, u32)> = cum.iter().map(|&c| (self.first_layer[c as usize], c)).collect();
        by_layer.sort();
        let centers: Vec<Vec<f64>> = by_layer.iter().map(|&(_, c)| self.grid.center(c as usize)).collect();
        // per target: first layer at which the running minimum drops below each epsilon
        let per_target: Vec<Vec<u32>> = par::map_range(by_layer.len(), |t| {
            let target = &centers[t];
            let mut hit = vec![UNREACHED; epsilons.len()];
            let mut best = f64::INFINITY;
            for (s, &(layer, _)) in by_layer.iter().enumerate() {
                let v = delta(target, &centers[s]);
                if v < best {
                    best = v;
                    for (e, &eps) in epsilons.iter().enumerate() {
                        if hit[e] == UNREACHED && best <= eps {
                            hit[e] = layer;
                        }
                    }
                }
            }
            hit
        });
        let k_max = self.layers.len() - 1;
        let m_max = self.layer_time(k_max);
        let entries = epsilons
            .iter()
            .enumerate()
            .map(|(e, &eps)| {
                let k0 = per_target
                    .iter()
                    .map(|h| if h[e] == UNREACHED { k_max as u32 } else { h[e] })
                    .max()
                    .unwrap_or(0);
                let m0 = self.layer_time(k0 as usize);
                SaturationEntry {
                    epsilon: eps,
                    m0,
                    saturated: m0 <= fraction * m_max + 1e-12,
                }
            })
            .collect();
        SaturationReport {
            m_max,
            fraction,
            entries,
        }
    }
}

/// Squared Euclidean distance, the default `delta` for saturation.
pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Computes reach up to `m_max` and its saturation levels.
pub fn reach_saturation<F>(
    problem: &ControlProblem,
    grid: &GridSpec,
    step: f64,
    m_max: f64,
    epsilons: &[f64],
    delta: F,
) -> Result<SaturationReport>
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync + Send,
{
    if !(m_max > 0.0) {
        return Err(Error::InvalidArgument("m_max must be positive".into()));
    }
    let reach = propagate_reach(problem, grid, m_max, step)?;
    Ok(reach.saturation(epsilons, delta, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::examples::builtin;
    use crate::problem::{ControlPoint, Dynamics};

    fn ex3_two_point() -> ControlProblem {
        let mut p = builtin("ex3").unwrap().problem;
        p.codebook = vec![ControlPoint(vec![-1.0]), ControlPoint(vec![1.0])];
        p
    }

    #[test]
    fn zero_time_reach_is_start_cell() {
        let p = builtin("ex4").unwrap().problem;
        let g = GridSpec::new(p.state_box.clone(), vec![20, 20]).unwrap();
        let r = propagate_reach(&p, &g, 0.0, 0.1).unwrap();
        assert_eq!(r.cumulative(), vec![g.cell_of(&p.y0).unwrap() as u32]);
    }

    #[test]
    fn saturating_pair_stays_in_unit_square() {
        let p = builtin("ex4").unwrap().problem;
        let g = GridSpec::new(p.state_box.clone(), vec![20, 20]).unwrap();
        let r = propagate_reach(&p, &g, 5.0, 0.1).unwrap();
        assert!(r.escaped.is_empty());
        for k in 0..r.n_layers() {
            for i in 0..r.n_points(k) {
                let y = r.layer_state(k, i);
                assert!(y[1] <= y[0] + 1e-12 && y[0] <= 1.0);
            }
        }
    }

    #[test]
    fn contraction_reach_interval_matches_closed_form() {
        // Extremal controls are constant +-1: y(5) = +-(1 - e^-5).
        let p = ex3_two_point();
        let g = GridSpec::new(p.state_box.clone(), vec![400], ).unwrap();
        let r = propagate_reach(&p, &g, 5.0, 0.05).unwrap();
        let cum = r.cumulative();
        let edge = 1.0 - (-5.0f64).exp();
        let w = g.width(0);
        let lo = g.center(cum[0] as usize)[0];
        let hi = g.center(*cum.last().unwrap() as usize)[0];
        assert!((lo + edge).abs() <= w && (hi - edge).abs() <= w, "{lo} {hi}");
        // contiguous
        assert_eq!(cum.len() as u32, cum.last().unwrap() - cum[0] + 1);
    }

    #[test]
    fn cumulative_is_monotone_and_deterministic() {
        let p = builtin("ex5").unwrap().problem;
        let g = GridSpec::new(p.state_box.clone(), vec![60, 30]).unwrap();
        let short = propagate_reach(&p, &g, 2.0, 0.1).unwrap();
        let long = propagate_reach(&p, &g, 4.0, 0.1).unwrap();
        let ls = long.cumulative();
        for c in short.cumulative() {
            assert!(ls.binary_search(&c).is_ok());
        }
        let one = par::with_threads(1, || propagate_reach(&p, &g, 4.0, 0.1).unwrap());
        assert_eq!(one, long);
    }

    #[test]
    fn refinement_stays_within_one_coarse_cell() {
        let p = ex3_two_point();
        let coarse = GridSpec::new(p.state_box.clone(), vec![100]).unwrap();
        let fine = GridSpec::new(p.state_box.clone(), vec![200]).unwrap();
        let rc = propagate_reach(&p, &coarse, 3.0, 0.05).unwrap();
        let rf = propagate_reach(&p, &fine, 3.0, 0.05).unwrap();
        let fine_centers: Vec<f64> = rf.cumulative().iter().map(|&c| fine.center(c as usize)[0]).collect();
        for c in rc.cumulative() {
            let x = coarse.center(c as usize)[0];
            let d = fine_centers.iter().map(|f| (f - x).abs()).fold(f64::INFINITY, f64::min);
            assert!(d <= coarse.width(0) + 1e-12);
        }
    }

    #[test]
    fn saturation_of_static_system_is_immediate() {
        let mut p = builtin("ex3").unwrap().problem;
        p.dynamics = Dynamics::Zero;
        let g = GridSpec::new(p.state_box.clone(), vec![50]).unwrap();
        let rep = reach_saturation(&p, &g, 0.1, 2.0, &[0.1, 1e-6], squared_euclidean).unwrap();
        for e in &rep.entries {
            assert_eq!(e.m0, 0.0);
            assert!(e.saturated);
        }
    }

    #[test]
    fn contraction_saturates_near_five() {
        // Closed form: the reach interval edge is 1 - e^-m, so density 0.01 in
        // Euclidean distance is reached once e^-m0 <= 0.01, m0 ~ 4.6.
        let p = ex3_two_point();
        let g = GridSpec::new(p.state_box.clone(), vec![400]).unwrap();
        let rep = reach_saturation(&p, &g, 0.05, 20.0, &[0.01], |a: &[f64], b: &[f64]| (a[0] - b[0]).abs()).unwrap();
        let e = &rep.entries[0];
        let oracle = -(0.01f64).ln();
        assert!((e.m0 - oracle).abs() < 1.0, "{}", e.m0);
        assert!(e.saturated);
    }

    #[test]
    fn double_integrator_never_saturates() {
        let p = builtin("ex5").unwrap().problem;
        let g = GridSpec::new(p.state_box.clone(), vec![60, 30]).unwrap();
        let rep = reach_saturation(&p, &g, 0.1, 6.0, &[0.05], squared_euclidean).unwrap();
        assert!(!rep.entries[0].saturated, "{:?}", rep);
    }

    #[test]
    fn csv_has_center_columns() {
        let p = ex3_two_point();
        let g = GridSpec::new(p.state_box.clone(), vec![40]).unwrap();
        let r = propagate_reach(&p, &g, 0.2, 0.1).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("layer,cell,i_1,c_1\n"));
    }
}
