//! Control problem data model: dynamics `g`, running cost `h`, the finite
//! control codebook standing in for `U`, and the state box.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A point of the control set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ControlPoint(pub Vec<f64>);

impl ControlPoint {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ControlPoint {
    fn from(v: Vec<f64>) -> Self {
        ControlPoint(v)
    }
}

/// Axis-aligned state bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl StateBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        StateBox { lo, hi }
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        StateBox {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    /// Membership with a relative slack of `1e-9` of each axis width.
    pub fn contains(&self, y: &[f64]) -> bool {
        y.iter().enumerate().all(|(a, &v)| {
            let slack = 1e-9 * self.width(a);
            v >= self.lo[a] - slack && v <= self.hi[a] + slack
        })
    }

    pub fn clamp(&self, y: &mut [f64]) {
        for (a, v) in y.iter_mut().enumerate() {
            *v = v.clamp(self.lo[a], self.hi[a]);
        }
    }
}

/// `coeff * prod(y_i^state_powers[i]) * prod(u_j^control_powers[j])`.
/// Missing trailing powers are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coeff: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub state_powers: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub control_powers: Vec<u32>,
}

impl Monomial {
    pub fn new(coeff: f64, state_powers: Vec<u32>, control_powers: Vec<u32>) -> Self {
        Monomial {
            coeff,
            state_powers,
            control_powers,
        }
    }

    fn eval(&self, y: &[f64], u: &[f64]) -> f64 {
        let mut acc = self.coeff;
        for (v, &p) in y.iter().zip(&self.state_powers) {
            if p != 0 {
                acc *= v.powi(p as i32);
            }
        }
        for (v, &p) in u.iter().zip(&self.control_powers) {
            if p != 0 {
                acc *= v.powi(p as i32);
            }
        }
        acc
    }

    fn uses_control(&self) -> bool {
        self.control_powers.iter().any(|&p| p != 0)
    }
}

/// The vector field `g(y, u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dynamics {
    /// `g = 0`.
    Zero,
    /// Planar rotation `g = i y`, no control dependence.
    Rotation,
    /// Planar rotation at controlled speed, `g = i y u_0`.
    ScaledRotation,
    /// `g = -y + u`, control dimension equal to the state dimension.
    AffineContraction,
    /// `g = (u (1 - y_1), u^2 (1 - y_1))`.
    SaturatingPair,
    /// `g = (y_2, u)`.
    DoubleIntegrator,
    /// One polynomial per state component.
    Polynomial { components: Vec<Vec<Monomial>> },
}

impl Dynamics {
    #[inline]
    pub fn eval_into(&self, y: &[f64], u: &[f64], out: &mut [f64]) {
        match self {
            Dynamics::Zero => out.fill(0.0),
            Dynamics::Rotation => {
                out[0] = -y[1];
                out[1] = y[0];
            }
            Dynamics::ScaledRotation => {
                out[0] = -y[1] * u[0];
                out[1] = y[0] * u[0];
            }
            Dynamics::AffineContraction => {
                for i in 0..out.len() {
                    out[i] = -y[i] + u[i];
                }
            }
            Dynamics::SaturatingPair => {
                let s = 1.0 - y[0];
                out[0] = u[0] * s;
                out[1] = u[0] * u[0] * s;
            }
            Dynamics::DoubleIntegrator => {
                out[0] = y[1];
                out[1] = u[0];
            }
            Dynamics::Polynomial { components } => {
                for (o, comp) in out.iter_mut().zip(components) {
                    *o = comp.iter().map(|m| m.eval(y, u)).sum();
                }
            }
        }
    }

    pub fn eval(&self, y: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        self.eval_into(y, u, &mut out);
        out
    }

    /// State dimension the builtin requires, if fixed.
    fn required_dim(&self) -> Option<usize> {
        match self {
            Dynamics::Rotation
            | Dynamics::ScaledRotation
            | Dynamics::SaturatingPair
            | Dynamics::DoubleIntegrator => Some(2),
            _ => None,
        }
    }

    fn required_control_dim(&self, dim: usize) -> Option<usize> {
        match self {
            Dynamics::ScaledRotation | Dynamics::SaturatingPair | Dynamics::DoubleIntegrator => {
                Some(1)
            }
            Dynamics::AffineContraction => Some(dim),
            _ => None,
        }
    }
}

/// The running cost `h(y, u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Cost {
    Constant {
        value: f64,
    },
    Polynomial {
        terms: Vec<Monomial>,
    },
    /// `inside` when `y[axis]` lies in `[lo, hi]`, `outside` otherwise.
    Band {
        axis: usize,
        lo: f64,
        hi: f64,
        inside: f64,
        outside: f64,
    },
    /// `min(|y|, cap)` with the Euclidean norm.
    ClippedNorm {
        cap: f64,
    },
    /// `(base - offset) * scale`.
    Affine {
        base: Box<Cost>,
        offset: f64,
        scale: f64,
    },
}

impl Cost {
    #[inline]
    pub fn eval(&self, y: &[f64], u: &[f64]) -> f64 {
        match self {
            Cost::Constant { value } => *value,
            Cost::Polynomial { terms } => terms.iter().map(|m| m.eval(y, u)).sum(),
            Cost::Band {
                axis,
                lo,
                hi,
                inside,
                outside,
            } => {
                let v = y[*axis];
                if v >= *lo && v <= *hi {
                    *inside
                } else {
                    *outside
                }
            }
            Cost::ClippedNorm { cap } => {
                let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                n.min(*cap)
            }
            Cost::Affine {
                base,
                offset,
                scale,
            } => (base.eval(y, u) - offset) * scale,
        }
    }

    /// True when `h` does not depend on the control.
    pub fn state_only(&self) -> bool {
        match self {
            Cost::Polynomial { terms } => !terms.iter().any(Monomial::uses_control),
            Cost::Affine { base, .. } => base.state_only(),
            _ => true,
        }
    }

    /// False for costs with jumps in the state (uniform continuity fails).
    pub fn is_continuous(&self) -> bool {
        match self {
            Cost::Band { inside, outside, .. } => inside == outside,
            Cost::Affine { base, .. } => base.is_continuous(),
            _ => true,
        }
    }
}

/// The full problem data `(g, h, U, y0)` plus declared constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlProblem {
    pub name: String,
    pub dim: usize,
    pub dynamics: Dynamics,
    pub cost: Cost,
    pub codebook: Vec<ControlPoint>,
    pub y0: Vec<f64>,
    pub lipschitz_l: f64,
    pub growth_a: f64,
    pub cost_bounds: (f64, f64),
    #[serde(rename = "box")]
    pub state_box: StateBox,
}

impl ControlProblem {
    /// Structural validation: dimensions, codebook, initial state.
    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidProblem(msg));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if let Some(d) = self.dynamics.required_dim() {
            if d != self.dim {
                return bad(format!("dynamics require dim = {d}, got {}", self.dim));
            }
        }
        if let Dynamics::Polynomial { components } = &self.dynamics {
            if components.len() != self.dim {
                return bad(format!(
                    "polynomial dynamics has {} components for dim {}",
                    components.len(),
                    self.dim
                ));
            }
        }
        if self.state_box.lo.len() != self.dim || self.state_box.hi.len() != self.dim {
            return bad("box bounds must have length dim".into());
        }
        for a in 0..self.dim {
            if !(self.state_box.lo[a] < self.state_box.hi[a]) {
                return bad(format!("box axis {a} is empty"));
            }
        }
        if self.y0.len() != self.dim || self.y0.iter().any(|v| !v.is_finite()) {
            return bad("y0 must be a finite vector of length dim".into());
        }
        if !self.state_box.contains(&self.y0) {
            return bad(format!("y0 {:?} lies outside the box", self.y0));
        }
        if self.codebook.is_empty() {
            return bad("codebook is empty".into());
        }
        let udim = self.codebook[0].0.len();
        if let Some(d) = self.dynamics.required_control_dim(self.dim) {
            if d != udim {
                return bad(format!("dynamics require control dimension {d}, got {udim}"));
            }
        }
        for (i, p) in self.codebook.iter().enumerate() {
            if p.0.len() != udim {
                return bad(format!("codebook point {i} has inconsistent dimension"));
            }
            if p.0.iter().any(|v| !v.is_finite()) {
                return bad(format!("codebook point {i} is not finite"));
            }
            if self.codebook[..i].iter().any(|q| q == p) {
                return bad(format!("codebook point {i} is a duplicate"));
            }
        }
        if !(self.lipschitz_l >= 0.0) || !(self.growth_a > 0.0) {
            return bad("need lipschitz_l >= 0 and growth_a > 0".into());
        }
        if let Cost::Band { axis, .. } = &self.cost {
            if *axis >= self.dim {
                return bad("band cost axis out of range".into());
            }
        }
        Ok(())
    }

    pub fn control_dim(&self) -> usize {
        self.codebook[0].0.len()
    }

    pub fn control(&self, idx: usize) -> &[f64] {
        &self.codebook[idx].0
    }

    pub fn velocity(&self, y: &[f64], u_idx: usize) -> Vec<f64> {
        self.dynamics.eval(y, self.control(u_idx))
    }

    pub fn running_cost(&self, y: &[f64], u_idx: usize) -> f64 {
        self.cost.eval(y, self.control(u_idx))
    }

    pub fn with_y0(mut self, y0: Vec<f64>) -> Self {
        self.y0 = y0;
        self
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let p: ControlProblem = serde_json::from_str(s)?;
        p.check()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json_str(&s)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Deterministic lattice of states covering the box (at most ~4096 points).
    pub(crate) fn lattice(&self) -> Vec<Vec<f64>> {
        let per_axis: usize = match self.dim {
            1 => 257,
            2 => 65,
            3 => 17,
            _ => 5,
        };
        let total = per_axis.pow(self.dim as u32);
        (0..total)
            .map(|mut k| {
                (0..self.dim)
                    .map(|a| {
                        let i = k % per_axis;
                        k /= per_axis;
                        let s = i as f64 / (per_axis - 1) as f64;
                        self.state_box.lo[a] + s * self.state_box.width(a)
                    })
                    .collect()
            })
            .collect()
    }
}

/// The affine map between raw and normalized cost units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostMap {
    pub offset: f64,
    pub scale: f64,
}

impl CostMap {
    /// Raw cost from a normalized one.
    pub fn denormalize(&self, v: f64) -> f64 {
        if self.scale == 0.0 {
            self.offset
        } else {
            v / self.scale + self.offset
        }
    }
}

/// Rescales `h` to `[0, 1]` using the declared bounds, after checking them on
/// a deterministic lattice of states and every codebook control.
pub fn normalize_cost(problem: &ControlProblem) -> Result<(ControlProblem, CostMap)> {
    let (lo, hi) = problem.cost_bounds;
    if !(lo <= hi) {
        return Err(Error::InvalidProblem(format!(
            "cost bounds ({lo}, {hi}) are reversed"
        )));
    }
    let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
    for y in problem.lattice().iter().chain(std::iter::once(&problem.y0)) {
        for u in &problem.codebook {
            let v = problem.cost.eval(y, &u.0);
            if !(v >= lo - slack && v <= hi + slack) {
                return Err(Error::CostBoundViolated {
                    value: v,
                    lo,
                    hi,
                    state: y.clone(),
                    control: u.0.clone(),
                });
            }
        }
    }
    let mut out = problem.clone();
    let map;
    if lo == hi {
        out.cost = Cost::Constant { value: 0.0 };
        map = CostMap {
            offset: lo,
            scale: 0.0,
        };
    } else if lo == 0.0 && hi == 1.0 {
        map = CostMap {
            offset: 0.0,
            scale: 1.0,
        };
    } else {
        let scale = 1.0 / (hi - lo);
        out.cost = Cost::Affine {
            base: Box::new(problem.cost.clone()),
            offset: lo,
            scale,
        };
        map = CostMap { offset: lo, scale };
    }
    out.cost_bounds = (0.0, 1.0);
    Ok((out, map))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioCheck {
    pub declared: f64,
    pub max_observed: f64,
    pub passed: bool,
    /// `(y, y', control index)` for the Lipschitz check, `(y, y, control index)`
    /// for the growth check.
    pub witness: Option<(Vec<f64>, Vec<f64>, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub seed: u64,
    pub lipschitz: RatioCheck,
    pub growth: RatioCheck,
    pub cost_min: f64,
    pub cost_max: f64,
    pub cost_in_unit_interval: bool,
    /// The cost has jumps in the state, so uniform continuity in `y` fails.
    pub cost_discontinuous: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.lipschitz.passed && self.growth.passed
    }
}

/// Samples state pairs in the box (half global, half near-diagonal) and
/// reports the worst Lipschitz and linear-growth ratios against the declared
/// constants. Deterministic in `seed`.
pub fn validate_hypotheses(
    problem: &ControlProblem,
    samples: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be >= 1".into()));
    }
    let d = problem.dim;
    let bx = &problem.state_box;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d)
            .map(|a| bx.lo[a] + rng.random::<f64>() * bx.width(a))
            .collect()
    };

    let mut lip = RatioCheck {
        declared: problem.lipschitz_l,
        max_observed: 0.0,
        passed: true,
        witness: None,
    };
    let mut growth = RatioCheck {
        declared: problem.growth_a,
        max_observed: 0.0,
        passed: true,
        witness: None,
    };
    let mut cmin = f64::INFINITY;
    let mut cmax = f64::NEG_INFINITY;
    let mut g1 = vec![0.0; d];
    let mut g2 = vec![0.0; d];

    for s in 0..samples {
        let y = draw(&mut rng);
        let mut y2 = if s % 2 == 0 {
            draw(&mut rng)
        } else {
            y.iter()
                .enumerate()
                .map(|(a, v)| v + (rng.random::<f64>() - 0.5) * 2e-3 * bx.width(a))
                .collect()
        };
        bx.clamp(&mut y2);
        let dist = norm_diff(&y, &y2);
        for (j, u) in problem.codebook.iter().enumerate() {
            problem.dynamics.eval_into(&y, &u.0, &mut g1);
            problem.dynamics.eval_into(&y2, &u.0, &mut g2);
            if dist > 0.0 {
                let r = norm_diff(&g1, &g2) / dist;
                if r > lip.max_observed {
                    lip.max_observed = r;
                    lip.witness = Some((y.clone(), y2.clone(), j));
                }
            }
            let gr = norm(&g1) / (1.0 + norm(&y));
            if gr > growth.max_observed {
                growth.max_observed = gr;
                growth.witness = Some((y.clone(), y.clone(), j));
            }
            let c = problem.cost.eval(&y, &u.0);
            cmin = cmin.min(c);
            cmax = cmax.max(c);
        }
    }
    lip.passed = lip.max_observed <= lip.declared * (1.0 + 1e-9) + 1e-12;
    growth.passed = growth.max_observed <= growth.declared * (1.0 + 1e-9) + 1e-12;
    Ok(ValidationReport {
        samples,
        seed,
        lipschitz: lip,
        growth,
        cost_min: cmin,
        cost_max: cmax,
        cost_in_unit_interval: cmin >= -1e-12 && cmax <= 1.0 + 1e-12,
        cost_discontinuous: !problem.cost.is_continuous(),
    })
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_problem(cost: Cost, bounds: (f64, f64)) -> ControlProblem {
        ControlProblem {
            name: "t".into(),
            dim: 1,
            dynamics: Dynamics::Zero,
            cost,
            codebook: vec![ControlPoint(vec![0.0])],
            y0: vec![0.5],
            lipschitz_l: 0.0,
            growth_a: 1.0,
            cost_bounds: bounds,
            state_box: StateBox::cube(1, 0.0, 1.0),
        }
    }

    #[test]
    fn constant_cost_normalizes_to_zero() {
        let p = scalar_problem(Cost::Constant { value: 5.0 }, (5.0, 5.0));
        let (n, map) = normalize_cost(&p).unwrap();
        assert_eq!(n.cost.eval(&[0.3], &[0.0]), 0.0);
        assert_eq!(map.denormalize(0.0), 5.0);
    }

    #[test]
    fn affine_rescale() {
        let p = scalar_problem(
            Cost::Polynomial {
                terms: vec![Monomial::new(2.0, vec![1], vec![])],
            },
            (0.0, 2.0),
        );
        let (n, _) = normalize_cost(&p).unwrap();
        for y in [0.0, 0.25, 0.8, 1.0] {
            assert!((n.cost.eval(&[y], &[0.0]) - y).abs() < 1e-15);
        }
        assert_eq!(n.cost_bounds, (0.0, 1.0));
    }

    #[test]
    fn normalization_is_idempotent() {
        let p = scalar_problem(
            Cost::Polynomial {
                terms: vec![Monomial::new(2.0, vec![1], vec![])],
            },
            (0.0, 2.0),
        );
        let (once, _) = normalize_cost(&p).unwrap();
        let (twice, _) = normalize_cost(&once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn bound_violation_reports_witness() {
        let p = scalar_problem(
            Cost::Polynomial {
                terms: vec![Monomial::new(3.0, vec![1], vec![])],
            },
            (0.0, 2.0),
        );
        match normalize_cost(&p) {
            Err(Error::CostBoundViolated { value, state, .. }) => {
                assert!(value > 2.0);
                assert!((3.0 * state[0] - value).abs() < 1e-12);
            }
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn structural_checks() {
        let mut p = scalar_problem(Cost::Constant { value: 0.0 }, (0.0, 0.0));
        assert!(p.check().is_ok());
        p.codebook.push(ControlPoint(vec![0.0]));
        assert!(p.check().is_err(), "duplicate codebook point");
        p.codebook.pop();
        p.y0 = vec![2.0];
        assert!(p.check().is_err(), "y0 outside box");
    }

    #[test]
    fn quadratic_field_fails_declared_lipschitz() {
        // g(y) = y^2 on [0, 2]: slope 2y peaks at 4.
        let p = ControlProblem {
            name: "sq".into(),
            dim: 1,
            dynamics: Dynamics::Polynomial {
                components: vec![vec![Monomial::new(1.0, vec![2], vec![])]],
            },
            cost: Cost::Constant { value: 0.0 },
            codebook: vec![ControlPoint(vec![0.0])],
            y0: vec![0.0],
            lipschitz_l: 1.0,
            growth_a: 4.0,
            cost_bounds: (0.0, 0.0),
            state_box: StateBox::cube(1, 0.0, 2.0),
        };
        // Dense scan of the difference quotient (y + y') as the oracle.
        let mut oracle = 0.0f64;
        for i in 0..400 {
            for j in 0..i {
                let (a, b) = (2.0 * i as f64 / 399.0, 2.0 * j as f64 / 399.0);
                oracle = oracle.max((a * a - b * b).abs() / (a - b));
            }
        }
        assert!((oracle - 4.0).abs() < 0.01);
        let r = validate_hypotheses(&p, 2000, 7).unwrap();
        assert!(!r.lipschitz.passed);
        assert!(r.lipschitz.max_observed <= oracle + 0.01);
        assert!(r.lipschitz.max_observed > 3.8, "{}", r.lipschitz.max_observed);
        let (y, y2, _) = r.lipschitz.witness.clone().unwrap();
        let ratio = (y[0] * y[0] - y2[0] * y2[0]).abs() / (y[0] - y2[0]).abs();
        assert!((ratio - r.lipschitz.max_observed).abs() < 1e-9);
    }

    #[test]
    fn validation_is_deterministic() {
        let p = scalar_problem(Cost::Constant { value: 0.0 }, (0.0, 0.0));
        assert_eq!(
            validate_hypotheses(&p, 50, 3).unwrap(),
            validate_hypotheses(&p, 50, 3).unwrap()
        );
    }

    #[test]
    fn unknown_keys_rejected() {
        let p = scalar_problem(Cost::Constant { value: 0.0 }, (0.0, 0.0));
        let mut v: serde_json::Value = serde_json::to_value(&p).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(ControlProblem::from_json_str(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::to_value(&p).unwrap();
        v["cost"]["bogus"] = serde_json::json!(1);
        assert!(ControlProblem::from_json_str(&v.to_string()).is_err());
    }
}
