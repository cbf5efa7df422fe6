//! Fixed-step RK4 integration of `y' = g(y, u)` under piecewise-constant
//! codebook controls, with trapezoidal accumulation of the running cost.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::problem::ControlProblem;
use crate::{Error, Result};

/// A codebook control held constant on each interval of length `step`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PiecewiseConstantControl {
    pub step: StepLen,
    pub indices: Vec<usize>,
}

/// Step length stored as raw bits so controls can be hashed and compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "f64", into = "f64")]
pub struct StepLen(u64);

impl From<f64> for StepLen {
    fn from(v: f64) -> Self {
        StepLen(v.to_bits())
    }
}

impl From<StepLen> for f64 {
    fn from(s: StepLen) -> f64 {
        f64::from_bits(s.0)
    }
}

impl PiecewiseConstantControl {
    pub fn new(step: f64, indices: Vec<usize>) -> Self {
        PiecewiseConstantControl {
            step: step.into(),
            indices,
        }
    }

    pub fn constant(step: f64, index: usize, len: usize) -> Self {
        Self::new(step, vec![index; len])
    }

    pub fn step(&self) -> f64 {
        self.step.into()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.step() * self.indices.len() as f64
    }

    pub fn validate(&self, problem: &ControlProblem) -> Result<()> {
        if !(self.step() > 0.0) {
            return Err(Error::InvalidArgument("control step must be positive".into()));
        }
        if self.indices.is_empty() {
            return Err(Error::InvalidArgument("control has no steps".into()));
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= problem.codebook.len()) {
            return Err(Error::InvalidArgument(format!(
                "control index {bad} outside codebook of size {}",
                problem.codebook.len()
            )));
        }
        Ok(())
    }

    /// `self` followed by `other`; both must share the step.
    pub fn concat(&self, other: &PiecewiseConstantControl) -> Result<Self> {
        if self.step != other.step {
            return Err(Error::InvalidArgument("cannot concatenate controls with different steps".into()));
        }
        let mut indices = self.indices.clone();
        indices.extend_from_slice(&other.indices);
        Ok(PiecewiseConstantControl {
            step: self.step,
            indices,
        })
    }

    /// Extends the control to at least `len` steps by cycling `block`.
    pub fn extend_cyclic(&self, block: &[usize], len: usize) -> Self {
        let mut indices = self.indices.clone();
        if !block.is_empty() {
            let mut k = 0;
            while indices.len() < len {
                indices.push(block[k % block.len()]);
                k += 1;
            }
        }
        PiecewiseConstantControl {
            step: self.step,
            indices,
        }
    }
}

/// What to do when a state leaves the problem box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxPolicy {
    Enforce,
    Ignore,
}

/// Largest RK4 sub-step for a declared Lipschitz constant.
pub fn max_substep(problem: &ControlProblem) -> f64 {
    0.01 / (1.0 + problem.lipschitz_l)
}

/// Integrates one control interval with RK4 sub-steps. Reused by rollouts,
/// reach propagation, value recursion and beam search so that all of them see
/// identical flows.
pub(crate) struct Stepper<'a> {
    problem: &'a ControlProblem,
    substeps: usize,
    h: f64,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(problem: &'a ControlProblem, step: f64) -> Self {
        let substeps = (step / max_substep(problem) - 1e-9).ceil().max(1.0) as usize;
        Self::with_substeps(problem, step, substeps)
    }

    pub(crate) fn with_substeps(problem: &'a ControlProblem, step: f64, substeps: usize) -> Self {
        let d = problem.dim;
        Stepper {
            problem,
            substeps,
            h: step / substeps as f64,
            k1: vec![0.0; d],
            k2: vec![0.0; d],
            k3: vec![0.0; d],
            k4: vec![0.0; d],
            tmp: vec![0.0; d],
        }
    }

    /// Advances `y` in place over one control interval starting at time `t0`
    /// and returns the integrated running cost.
    pub(crate) fn advance(&mut self, y: &mut [f64], u: usize, policy: BoxPolicy, t0: f64) -> Result<f64> {
        let p = self.problem;
        let uc = p.control(u);
        let h = self.h;
        let mut cost = 0.0;
        let mut c_prev = p.cost.eval(y, uc);
        for s in 0..self.substeps {
            p.dynamics.eval_into(y, uc, &mut self.k1);
            for i in 0..y.len() {
                self.tmp[i] = y[i] + 0.5 * h * self.k1[i];
            }
            p.dynamics.eval_into(&self.tmp, uc, &mut self.k2);
            for i in 0..y.len() {
                self.tmp[i] = y[i] + 0.5 * h * self.k2[i];
            }
            p.dynamics.eval_into(&self.tmp, uc, &mut self.k3);
            for i in 0..y.len() {
                self.tmp[i] = y[i] + h * self.k3[i];
            }
            p.dynamics.eval_into(&self.tmp, uc, &mut self.k4);
            for i in 0..y.len() {
                y[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
            }
            let t = t0 + (s + 1) as f64 * h;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp { time: t });
            }
            if policy == BoxPolicy::Enforce && !p.state_box.contains(y) {
                return Err(Error::EscapedBox {
                    time: t,
                    state: y.to_vec(),
                });
            }
            let c = p.cost.eval(y, uc);
            cost += 0.5 * h * (c_prev + c);
            c_prev = c;
        }
        Ok(cost)
    }
}

/// An integrated state path on the control grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub step: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub control_index_per_step: Vec<usize>,
    pub cumulative_cost: Vec<f64>,
}

impl Trajectory {
    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    /// Columns: time, y_1..y_d, control_index, cumulative_cost. The control
    /// index column is empty on the terminal row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.states[0].len();
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["time".to_string()];
        header.extend((1..=d).map(|i| format!("y_{i}")));
        header.push("control_index".into());
        header.push("cumulative_cost".into());
        wr.write_record(&header)?;
        for k in 0..self.times.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.states[k].iter().map(|v| v.to_string()));
            row.push(
                self.control_index_per_step
                    .get(k)
                    .map(|c| c.to_string())
                    .unwrap_or_default(),
            );
            row.push(self.cumulative_cost[k].to_string());
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Number of control steps covering `t`: exact multiples (within 1e-9) are
/// rounded, anything else is rounded up.
pub fn steps_for(t: f64, step: f64) -> usize {
    let r = t / step;
    let n = r.round();
    if (r - n).abs() <= 1e-9 * r.abs().max(1.0) {
        n as usize
    } else {
        r.ceil() as usize
    }
}

/// Integrates the problem from `y_start` under `control` up to time `t`,
/// failing if the state leaves the box.
pub fn rollout(
    problem: &ControlProblem,
    control: &PiecewiseConstantControl,
    y_start: &[f64],
    t: f64,
) -> Result<Trajectory> {
    rollout_with(problem, control, y_start, t, BoxPolicy::Enforce)
}

pub fn rollout_with(
    problem: &ControlProblem,
    control: &PiecewiseConstantControl,
    y_start: &[f64],
    t: f64,
    policy: BoxPolicy,
) -> Result<Trajectory> {
    control.validate(problem)?;
    if !(t > 0.0) {
        return Err(Error::InvalidArgument("rollout horizon must be positive".into()));
    }
    if y_start.len() != problem.dim {
        return Err(Error::InvalidArgument("start state has the wrong dimension".into()));
    }
    if policy == BoxPolicy::Enforce && !problem.state_box.contains(y_start) {
        return Err(Error::EscapedBox {
            time: 0.0,
            state: y_start.to_vec(),
        });
    }
    let step = control.step();
    let n = steps_for(t, step);
    if n > control.len() {
        return Err(Error::HorizonTooLong {
            requested: t,
            available: control.duration(),
        });
    }
    let mut stepper = Stepper::new(problem, step);
    let mut y = y_start.to_vec();
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut cum = Vec::with_capacity(n + 1);
    times.push(0.0);
    states.push(y.clone());
    cum.push(0.0);
    let mut acc = 0.0;
    for k in 0..n {
        let t0 = k as f64 * step;
        acc += stepper.advance(&mut y, control.indices[k], policy, t0)?;
        times.push((k + 1) as f64 * step);
        states.push(y.clone());
        cum.push(acc);
    }
    Ok(Trajectory {
        step,
        times,
        states,
        control_index_per_step: control.indices[..n].to_vec(),
        cumulative_cost: cum,
    })
}

/// `gamma_{m,t}`: average running cost on `[m, m + t]`. Both ends snap to the
/// nearest grid time; the divisor is the snapped window length.
pub fn average_cost(traj: &Trajectory, m: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) || !(m >= 0.0) {
        return Err(Error::InvalidArgument("need m >= 0 and t > 0".into()));
    }
    let i = (m / traj.step).round() as usize;
    let j = (((m + t) / traj.step).round() as usize).max(i + 1);
    if j >= traj.times.len() {
        return Err(Error::HorizonTooLong {
            requested: m + t,
            available: traj.final_time(),
        });
    }
    Ok((traj.cumulative_cost[j] - traj.cumulative_cost[i]) / (traj.times[j] - traj.times[i]))
}

/// Time grid indices `k` with `k * step` in `[1, n]` (at least the index of
/// `n` itself).
pub(crate) fn sup_window_indices(step: f64, n: f64) -> (usize, usize) {
    let lo = steps_for(1.0, step).max(1);
    let hi = (n / step + 1e-9).floor().max(1.0) as usize;
    if lo > hi {
        (hi, hi)
    } else {
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::examples::builtin;
    use crate::problem::{Cost, Dynamics, StateBox, ControlPoint};

    #[test]
    fn rotation_quarter_turn() {
        let p = builtin("ex1").unwrap().problem;
        let dt = 1e-3;
        let t = std::f64::consts::FRAC_PI_2;
        let n = (t / dt).ceil() as usize;
        let c = PiecewiseConstantControl::constant(dt, 0, n);
        // integrate exactly to pi/2 using a control step that divides it
        let dt2 = t / n as f64;
        let c2 = PiecewiseConstantControl::constant(dt2, 0, n);
        let tr = rollout(&p, &c2, &[1.0, 0.0], t).unwrap();
        let yf = tr.final_state();
        assert!((yf[0]).abs() < 1e-6 && (yf[1] - 1.0).abs() < 1e-6, "{yf:?}");
        let tr = rollout(&p, &c, &[1.0, 0.0], n as f64 * dt).unwrap();
        let drift = tr
            .states
            .iter()
            .map(|y| (crate::problem::norm(y) - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-6);
    }

    #[test]
    fn saturating_pair_matches_closed_form() {
        let p = builtin("ex4").unwrap().problem;
        let eps_idx = p
            .codebook
            .iter()
            .position(|u| (u.0[0] - 0.1).abs() < 1e-12)
            .unwrap();
        let eps = 0.1;
        let c = PiecewiseConstantControl::constant(0.05, eps_idx, 400);
        let tr = rollout(&p, &c, &[0.0, 0.0], 20.0).unwrap();
        for (t, y) in tr.times.iter().zip(&tr.states) {
            let y1 = 1.0 - (-eps * t).exp();
            assert!((y[0] - y1).abs() < 1e-9);
            assert!((y[1] - eps * y1).abs() < 1e-9);
            assert!(y[1] <= y[0] + 1e-15);
        }
    }

    #[test]
    fn double_integrator_speed_profile() {
        let p = builtin("ex5").unwrap().problem;
        let idx = 1; // 0.25
        let eps = p.codebook[idx].0[0];
        let c = PiecewiseConstantControl::constant(0.05, idx, 100);
        let tr = rollout(&p, &c, &[0.0, 0.0], 5.0).unwrap();
        for y in &tr.states {
            assert!((y[1] - (2.0 * eps * y[0]).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_cost_average() {
        let p = ControlProblem {
            name: "c".into(),
            dim: 1,
            dynamics: Dynamics::AffineContraction,
            cost: Cost::Constant { value: 0.3 },
            codebook: vec![ControlPoint(vec![0.0]), ControlPoint(vec![1.0])],
            y0: vec![0.0],
            lipschitz_l: 1.0,
            growth_a: 1.0,
            cost_bounds: (0.0, 1.0),
            state_box: StateBox::cube(1, -2.0, 2.0),
        };
        let c = PiecewiseConstantControl::new(0.1, (0..50).map(|k| k % 2).collect());
        let tr = rollout(&p, &c, &[0.0], 5.0).unwrap();
        for (m, t) in [(0.0, 1.0), (0.5, 2.0), (1.3, 3.7)] {
            assert!((average_cost(&tr, m, t).unwrap() - 0.3).abs() < 1e-12);
        }
        assert_eq!(
            average_cost(&tr, 0.0, 4.0).unwrap(),
            average_cost(&tr, 0.0, 4.0).unwrap()
        );
        assert!(matches!(
            average_cost(&tr, 3.0, 3.0),
            Err(Error::HorizonTooLong { .. })
        ));
    }

    #[test]
    fn escape_is_an_error() {
        let p = builtin("ex5").unwrap().problem;
        let c = PiecewiseConstantControl::constant(0.05, 4, 400);
        match rollout(&p, &c, &[0.0, 0.0], 20.0) {
            Err(Error::EscapedBox { time, state }) => {
                assert!(time > 0.0 && !p.state_box.contains(&state));
            }
            other => panic!("expected escape, got {other:?}"),
        }
        assert!(rollout_with(&p, &c, &[0.0, 0.0], 20.0, BoxPolicy::Ignore).is_ok());
    }

    #[test]
    fn csv_columns() {
        let p = builtin("ex4").unwrap().problem;
        let c = PiecewiseConstantControl::constant(0.5, 2, 4);
        let tr = rollout(&p, &c, &[0.0, 0.0], 2.0).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), "time,y_1,y_2,control_index,cumulative_cost");
        assert_eq!(s.lines().count(), 6);
        assert!(s.lines().last().unwrap().contains(",,"));
    }

    #[test]
    fn step_halving_order_on_contraction() {
        // y' = -y + u from 1.5 with u = -1: y(1) = -1 + 2.5 / e
        let p = builtin("ex3").unwrap().problem;
        let exact = -1.0 + 2.5 * (-1.0f64).exp();
        let errs: Vec<f64> = [2, 4, 8, 16]
            .into_iter()
            .map(|n| {
                let mut st = Stepper::with_substeps(&p, 1.0, n);
                let mut y = vec![1.5];
                st.advance(&mut y, 0, BoxPolicy::Enforce, 0.0).unwrap();
                (y[0] - exact).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 3.5, "{errs:?}");
        }
    }

    #[test]
    fn sup_window_bounds() {
        assert_eq!(sup_window_indices(0.5, 2.0), (2, 4));
        assert_eq!(sup_window_indices(0.05, 1.0), (20, 20));
        assert_eq!(sup_window_indices(2.0, 4.0), (1, 2));
    }
}
