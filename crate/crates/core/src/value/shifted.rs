//! `V_{m,t}` on the whole grid by free repositioning.
//!
//! `R_0 = V(t, .)` and `R_j(x) = min_u R_{j-1}(foot(x, u))`, read back by the
//! same interpolation as the value recursion. Then `R_k(z)` is the least
//! `V(t, .)` over the states reachable from `z` at exactly time `k step`.

use serde::{Deserialize, Serialize};

use crate::grid::GridSpec;
use crate::integrate::steps_for;
use crate::par;
use crate::problem::ControlProblem;
use crate::value::field::{Transitions, ValueField};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftedValues {
    pub grid: GridSpec,
    pub step: f64,
    pub m_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    /// `fields[i][j][c] = V_{m_i, t_j}` at the center of cell `c`.
    fields: Vec<Vec<Vec<f64>>>,
}

/// Builds `V_{m,t}` for every `m` in `m_grid` and `t` in `t_grid` (each `t`
/// must be a stored horizon of `field`, each `m` a multiple of its step).
pub fn shifted_values(
    problem: &ControlProblem,
    field: &ValueField,
    m_grid: &[f64],
    t_grid: &[f64],
) -> Result<ShiftedValues> {
    let step = field.step;
    let mut m_steps = Vec::with_capacity(m_grid.len());
    for &m in m_grid {
        if !(m >= 0.0) {
            return Err(Error::InvalidArgument(format!("shift {m} is negative")));
        }
        let k = steps_for(m, step);
        if ((k as f64) * step - m).abs() > 1e-9 * m.max(1.0) {
            return Err(Error::InvalidArgument(format!("shift {m} is not a multiple of step {step}")));
        }
        m_steps.push(k);
    }
    let layers = t_grid
        .iter()
        .map(|&t| field.layer_of(t))
        .collect::<Result<Vec<usize>>>()?;
    let k_max = m_steps.iter().copied().max().unwrap_or(0);
    let trans = if k_max > 0 {
        Some(Transitions::build(problem, &field.grid, step))
    } else {
        None
    };
    let n = field.grid.n_cells();

    let mut fields = vec![vec![Vec::new(); t_grid.len()]; m_grid.len()];
    for (j, &kt) in layers.iter().enumerate() {
        let mut prev = field.averages(kt).unwrap();
        let mut next = vec![0.0; n];
        for k in 0..=k_max {
            if k > 0 {
                let tr = trans.as_ref().unwrap();
                par::fill(&mut next, |c| tr.reposition(c, &prev));
                std::mem::swap(&mut prev, &mut next);
            }
            for (i, &km) in m_steps.iter().enumerate() {
                if km == k {
                    fields[i][j] = prev.clone();
                }
            }
        }
    }
    Ok(ShiftedValues {
        grid: field.grid.clone(),
        step,
        m_grid: m_grid.to_vec(),
        t_grid: t_grid.to_vec(),
        fields,
    })
}

impl ShiftedValues {
    pub fn field(&self, i: usize, j: usize) -> &[f64] {
        &self.fields[i][j]
    }

    /// `table[i][j] = V_{m_i, t_j}(z)`.
    pub fn table_at(&self, z: &[f64]) -> Vec<Vec<f64>> {
        self.fields
            .iter()
            .map(|row| row.iter().map(|f| self.grid.interpolate(f, z)).collect())
            .collect()
    }

    /// `max_t min_m V_{m,t}(z)`.
    pub fn v_star_at(&self, z: &[f64]) -> f64 {
        let t = self.table_at(z);
        (0..self.t_grid.len())
            .map(|j| t.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}
