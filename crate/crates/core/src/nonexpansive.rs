//! Sampled checks of the nonexpansivity conditions and greedy shadow
//! controls.
//!
//! The scalar condition asks, for states `y1, y2`, that
//! `max_u min_v <y1 - y2, g(y1, u) - g(y2, v)> <= 0`. The `Delta` condition
//! asks for some `v` with `D Delta(y1, y2)(g(y1, u), g(y2, v)) <= 0` and
//! `h(y2, v) - h(y1, u) <= alpha(Delta(y1, y2))`, where the directional
//! derivative is replaced by forward difference quotients.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::integrate::{average_cost, rollout_with, BoxPolicy, PiecewiseConstantControl, Stepper};
use crate::par;
use crate::problem::ControlProblem;
use crate::reach::ReachSet;
use crate::{Error, Result};

pub const DEFAULT_TAUS: [f64; 3] = [1e-2, 1e-3, 1e-4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaKind {
    SquaredEuclidean,
    Euclidean,
    L1,
    Zero,
}

impl DeltaKind {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DeltaKind::SquaredEuclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            DeltaKind::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            DeltaKind::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            DeltaKind::Zero => 0.0,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "squared_euclidean" | "sq" => Ok(DeltaKind::SquaredEuclidean),
            "euclidean" | "l2" => Ok(DeltaKind::Euclidean),
            "l1" => Ok(DeltaKind::L1),
            "zero" => Ok(DeltaKind::Zero),
            _ => Err(Error::InvalidArgument(format!(
                "unknown metric `{name}` (squared_euclidean, euclidean, l1, zero)"
            ))),
        }
    }
}

/// Nondecreasing modulus `alpha` with `alpha(0) = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Modulus {
    Zero,
    Linear { slope: f64 },
    Sqrt { scale: f64 },
    /// Step function: `alpha(s)` is the value at the first knot `>= s`
    /// (the last value beyond the last knot).
    Table { knots: Vec<f64>, values: Vec<f64> },
}

impl Modulus {
    pub fn eval(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        match self {
            Modulus::Zero => 0.0,
            Modulus::Linear { slope } => slope * s,
            Modulus::Sqrt { scale } => scale * s.sqrt(),
            Modulus::Table { knots, values } => {
                let i = knots.partition_point(|&k| k < s);
                values[i.min(values.len() - 1)]
            }
        }
    }

    /// Step-function majorant of `sup |h(x, u) - h(y, u)|` over pairs with
    /// `Delta(x, y) <= s`: the larger of the sampled gaps and the envelope
    /// `L phi(s)` (`L` the largest sampled cost gradient in the norm dual to
    /// `Delta`, `phi = sqrt` for the squared distance), capped by the cost
    /// range. Knots are log-spaced up to the largest `Delta` over the box.
    pub fn sampled(problem: &ControlProblem, kind: DeltaKind, samples: usize, seed: u64) -> Self {
        if kind == DeltaKind::Zero {
            return Modulus::Zero;
        }
        let bx = &problem.state_box;
        let d = problem.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut obs = Vec::with_capacity(samples);
        let mut lip: f64 = 0.0;
        for s in 0..samples {
            let x: Vec<f64> = (0..d).map(|a| bx.lo[a] + rng.random::<f64>() * bx.width(a)).collect();
            let u = (s / 2) % problem.codebook.len();
            let grad = cost_gradient(problem, &x, u);
            let l2 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            lip = lip.max(match kind {
                DeltaKind::L1 => grad.iter().fold(0.0, |m, g| m.max(g.abs())),
                _ => l2,
            });
            // mix global and increasingly local pairs
            let scale = 0.5f64.powi((s % 12) as i32);
            let mut y: Vec<f64> = if s % 2 == 0 {
                x.iter()
                    .enumerate()
                    .map(|(a, v)| v + (rng.random::<f64>() - 0.5) * 2.0 * scale * bx.width(a))
                    .collect()
            } else {
                // along the cost gradient, where the gap per unit distance peaks
                let r = rng.random::<f64>() * scale * bx.width(0);
                x.iter()
                    .zip(&grad)
                    .map(|(v, g)| if l2 > 0.0 { v + r * g / l2 } else { *v })
                    .collect()
            };
            bx.clamp(&mut y);
            let gap = (0..problem.codebook.len())
                .map(|u| (problem.running_cost(&x, u) - problem.running_cost(&y, u)).abs())
                .fold(0.0, f64::max);
            obs.push((kind.eval(&x, &y), gap));
        }
        let s_max = kind.eval(&bx.lo, &bx.hi).max(1e-300);
        let range = problem.cost_bounds.1 - problem.cost_bounds.0;
        let n_knots = 40;
        let knots: Vec<f64> = (0..n_knots)
            .map(|i| s_max * 10f64.powf(-8.0 * (n_knots - 1 - i) as f64 / (n_knots - 1) as f64))
            .collect();
        let mut values = vec![0.0; n_knots];
        for (s, gap) in obs {
            let i = knots.partition_point(|&k| k < s).min(n_knots - 1);
            values[i] = f64::max(values[i], gap);
        }
        for i in 0..n_knots {
            if i > 0 {
                values[i] = values[i].max(values[i - 1]);
            }
            let phi = if kind == DeltaKind::SquaredEuclidean { knots[i].sqrt() } else { knots[i] };
            values[i] = values[i].max(lip * phi).min(range);
        }
        Modulus::Table { knots, values }
    }
}

/// Central-difference gradient of `h(., u)` at `x`.
fn cost_gradient(problem: &ControlProblem, x: &[f64], u: usize) -> Vec<f64> {
    let mut a = x.to_vec();
    let mut b = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * problem.state_box.width(i);
            a[i] = x[i] + h;
            b[i] = x[i] - h;
            let g = (problem.running_cost(&a, u) - problem.running_cost(&b, u)) / (2.0 * h);
            a[i] = x[i];
            b[i] = x[i];
            g
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaMetric {
    pub name: String,
    pub kind: DeltaKind,
    pub modulus: Modulus,
}

impl DeltaMetric {
    pub fn new(kind: DeltaKind, modulus: Modulus) -> Self {
        let name = match kind {
            DeltaKind::SquaredEuclidean => "squared_euclidean",
            DeltaKind::Euclidean => "euclidean",
            DeltaKind::L1 => "l1",
            DeltaKind::Zero => "zero",
        };
        DeltaMetric {
            name: name.into(),
            kind,
            modulus,
        }
    }

    /// Metric `kind` with a modulus sampled from the problem's cost.
    pub fn for_problem(problem: &ControlProblem, kind: DeltaKind, seed: u64) -> Self {
        DeltaMetric::new(kind, Modulus::sampled(problem, kind, 4000, seed))
    }

    pub fn delta(&self, a: &[f64], b: &[f64]) -> f64 {
        self.kind.eval(a, b)
    }

    /// Diagonal, symmetry and modulus checks on sampled points.
    pub fn check_invariants(&self, problem: &ControlProblem, samples: usize, seed: u64) -> Result<()> {
        let bx = &problem.state_box;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut last = (0.0, 0.0);
        let mut ss: Vec<f64> = Vec::with_capacity(samples);
        for _ in 0..samples {
            let x: Vec<f64> = (0..problem.dim).map(|a| bx.lo[a] + rng.random::<f64>() * bx.width(a)).collect();
            let y: Vec<f64> = (0..problem.dim).map(|a| bx.lo[a] + rng.random::<f64>() * bx.width(a)).collect();
            if self.delta(&x, &x) != 0.0 {
                return Err(Error::InvalidArgument(format!("{}: Delta(y, y) != 0 at {x:?}", self.name)));
            }
            let (a, b) = (self.delta(&x, &y), self.delta(&y, &x));
            if a != b || a < 0.0 {
                return Err(Error::InvalidArgument(format!("{}: not symmetric or negative at {x:?}, {y:?}", self.name)));
            }
            ss.push(a);
        }
        if self.modulus.eval(0.0) != 0.0 {
            return Err(Error::InvalidArgument(format!("{}: modulus(0) != 0", self.name)));
        }
        ss.sort_by(f64::total_cmp);
        for s in ss {
            let m = self.modulus.eval(s);
            if s >= last.0 && m < last.1 {
                return Err(Error::InvalidArgument(format!("{}: modulus decreases at {s}", self.name)));
            }
            last = (s, m);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dini {
    /// Least quotient over the step list.
    pub value: f64,
    pub quotients: Vec<(f64, f64)>,
}

/// Forward-difference proxy for the directional derivative of `Delta` at
/// `(y1, y2)` along `(g1, g2)`.
pub fn dini_forward(metric: &DeltaMetric, y1: &[f64], y2: &[f64], g1: &[f64], g2: &[f64], taus: &[f64]) -> Result<Dini> {
    if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0)) || taus.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::InvalidArgument("step list must be positive and decreasing".into()));
    }
    let base = metric.delta(y1, y2);
    let mut a = y1.to_vec();
    let mut b = y2.to_vec();
    let mut quotients = Vec::with_capacity(taus.len());
    let mut value = f64::INFINITY;
    for &tau in taus {
        for i in 0..a.len() {
            a[i] = y1[i] + tau * g1[i];
            b[i] = y2[i] + tau * g2[i];
        }
        let q = (metric.delta(&a, &b) - base) / tau;
        if !q.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite Delta quotient at step {tau}")));
        }
        value = value.min(q);
        quotients.push((tau, q));
    }
    Ok(Dini { value, quotients })
}

/// Where the state pairs come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSampling {
    /// All distinct pairs among up to this many reached cell centers.
    pub max_centers: usize,
    /// Plus this many uniform pairs in the box.
    pub random_pairs: usize,
    pub seed: u64,
}

impl Default for PairSampling {
    fn default() -> Self {
        PairSampling {
            max_centers: 200,
            random_pairs: 100,
            seed: 0,
        }
    }
}

pub type StatePair = (Vec<f64>, Vec<f64>);

/// Seeded pair list; reach centers first (evenly spaced over the cumulative
/// cells), then random pairs.
pub fn sample_pairs(problem: &ControlProblem, reach: Option<&ReachSet>, cfg: &PairSampling) -> Vec<StatePair> {
    let mut out = Vec::new();
    if let Some(r) = reach {
        let cum = r.cumulative();
        let k = cfg.max_centers.min(cum.len());
        let centers: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let pos = if k == 1 { 0 } else { i * (cum.len() - 1) / (k - 1) };
                r.grid.center(cum[pos] as usize)
            })
            .collect();
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                out.push((centers[i].clone(), centers[j].clone()));
            }
        }
    }
    let bx = &problem.state_box;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.random_pairs {
        let mut draw = || -> Vec<f64> {
            (0..problem.dim)
                .map(|a| bx.lo[a] + rng.random::<f64>() * bx.width(a))
                .collect()
        };
        let a = draw();
        let b = draw();
        out.push((a, b));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Scalar,
    Delta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub u: usize,
    /// Best `v` for this `u`.
    pub v: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonexpansionReport {
    pub condition: Condition,
    pub metric: Option<DeltaMetric>,
    /// Worst value (scalar) or worst residual (`Delta`) over all tuples.
    pub max_violation: f64,
    pub witness: Option<Witness>,
    pub samples: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn inner_gap(problem: &ControlProblem, y1: &[f64], y2: &[f64], u: usize, v: usize) -> f64 {
    let g1 = problem.velocity(y1, u);
    let g2 = problem.velocity(y2, v);
    (0..y1.len()).map(|i| (y1[i] - y2[i]) * (g1[i] - g2[i])).sum()
}

/// `(u, v, value)` attaining `max_u min_v <y1 - y2, g(y1, u) - g(y2, v)>`.
/// Ties resolve to the smallest indices.
fn scalar_value(problem: &ControlProblem, y1: &[f64], y2: &[f64]) -> (usize, usize, f64) {
    let n = problem.codebook.len();
    let mut best = (0, 0, f64::NEG_INFINITY);
    for u in 0..n {
        let mut inner = (0, f64::INFINITY);
        for v in 0..n {
            let x = inner_gap(problem, y1, y2, u, v);
            if x < inner.1 {
                inner = (v, x);
            }
        }
        if inner.1 > best.2 {
            best = (u, inner.0, inner.1);
        }
    }
    best
}

fn reduce(condition: Condition, metric: Option<DeltaMetric>, tol: f64, samples: usize, found: Vec<Witness>) -> NonexpansionReport {
    let mut witness: Option<Witness> = None;
    for w in found {
        if witness.as_ref().is_none_or(|b| w.value > b.value) {
            witness = Some(w);
        }
    }
    let max_violation = witness.as_ref().map_or(f64::NEG_INFINITY, |w| w.value);
    NonexpansionReport {
        condition,
        metric,
        max_violation,
        witness,
        samples,
        tolerance: tol,
        passed: max_violation <= tol,
    }
}

/// Worst `max_u min_v <y1 - y2, g(y1, u) - g(y2, v)>` over the pairs.
pub fn check_scalar(problem: &ControlProblem, pairs: &[StatePair], tol: f64) -> NonexpansionReport {
    let found = par::map_slice(pairs, |(y1, y2)| {
        let (u, v, value) = scalar_value(problem, y1, y2);
        Witness {
            y1: y1.clone(),
            y2: y2.clone(),
            u,
            v,
            value,
        }
    });
    reduce(Condition::Scalar, None, tol, pairs.len(), found)
}

/// Residual of one `(y1, y2, u)` tuple: least over `v` of the larger of the
/// Dini proxy and the cost excess over the modulus.
fn delta_residual(problem: &ControlProblem, metric: &DeltaMetric, y1: &[f64], y2: &[f64], u: usize) -> Result<(usize, f64)> {
    let g1 = problem.velocity(y1, u);
    let h1 = problem.running_cost(y1, u);
    let bound = metric.modulus.eval(metric.delta(y1, y2));
    let mut best = (0, f64::INFINITY);
    for v in 0..problem.codebook.len() {
        let g2 = problem.velocity(y2, v);
        let dini = dini_forward(metric, y1, y2, &g1, &g2, &DEFAULT_TAUS)?.value;
        let excess = problem.running_cost(y2, v) - h1 - bound;
        let r = dini.max(excess);
        if r < best.1 {
            best = (v, r);
        }
    }
    Ok(best)
}

/// Worst `Delta` residual over pairs and `u`; passes when every tuple has a
/// `v` with residual `<= tol`.
pub fn check_delta(problem: &ControlProblem, metric: &DeltaMetric, pairs: &[StatePair], tol: f64) -> Result<NonexpansionReport> {
    let n_u = problem.codebook.len();
    let found = par::map_slice(pairs, |(y1, y2)| -> Result<Witness> {
        let mut worst: Option<Witness> = None;
        for u in 0..n_u {
            let (v, value) = delta_residual(problem, metric, y1, y2, u)?;
            if worst.as_ref().is_none_or(|w| value > w.value) {
                worst = Some(Witness {
                    y1: y1.clone(),
                    y2: y2.clone(),
                    u,
                    v,
                    value,
                });
            }
        }
        Ok(worst.unwrap())
    });
    let found = found.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(reduce(Condition::Delta, Some(metric.clone()), tol, pairs.len() * n_u, found))
}

impl NonexpansionReport {
    /// Recomputes the witness value from scratch.
    pub fn reevaluate(&self, problem: &ControlProblem) -> Result<Option<f64>> {
        let Some(w) = &self.witness else { return Ok(None) };
        Ok(Some(match self.condition {
            Condition::Scalar => scalar_value(problem, &w.y1, &w.y2).2,
            Condition::Delta => {
                let m = self.metric.as_ref().ok_or_else(|| Error::InvalidArgument("missing metric".into()))?;
                delta_residual(problem, m, &w.y1, &w.y2, w.u)?.1
            }
        }))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "condition: {:?}{}\nsamples: {}\ntolerance: {:e}\nmax violation: {:.6e}\nverdict: {}\n",
            self.condition,
            self.metric.as_ref().map(|m| format!(" ({})", m.name)).unwrap_or_default(),
            self.samples,
            self.tolerance,
            self.max_violation,
            if self.passed { "pass" } else { "refuted" },
        );
        if let Some(w) = &self.witness {
            s += &format!("witness: y1 = {:?}, y2 = {:?}, u = {}, v = {}, value = {:.6e}\n", w.y1, w.y2, w.u, w.v, w.value);
        }
        s
    }

    /// Witness as one CSV row: condition, y1_*, y2_*, u, v, value.
    pub fn write_witness_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let Some(wit) = &self.witness else {
            wr.flush()?;
            return Ok(());
        };
        let d = wit.y1.len();
        let mut header = vec!["condition".to_string()];
        header.extend((0..d).map(|i| format!("y1_{i}")));
        header.extend((0..d).map(|i| format!("y2_{i}")));
        header.extend(["u".into(), "v".into(), "value".into()]);
        wr.write_record(&header)?;
        let mut row = vec![format!("{:?}", self.condition).to_lowercase()];
        row.extend(wit.y1.iter().map(|x| x.to_string()));
        row.extend(wit.y2.iter().map(|x| x.to_string()));
        row.extend([wit.u.to_string(), wit.v.to_string(), wit.value.to_string()]);
        wr.write_record(&row)?;
        wr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowResult {
    pub v: PiecewiseConstantControl,
    /// `(t, Delta(y(t, u, y1), y(t, v, y2)))` on the control grid.
    pub trace: Vec<(f64, f64)>,
    /// Largest `h(y2(t), v) - h(y1(t), u) - alpha(Delta(t))` over steps.
    pub worst_cost_excess: f64,
    pub first_exceedance: Option<f64>,
    pub success: bool,
    /// `max_t |gamma_t(y1, u) - gamma_t(y2, v)|` over grid times `t > 0`.
    pub gamma_gap: f64,
    /// `alpha(Delta(y1, y2) + tol) + tol`.
    pub gamma_bound: f64,
}

/// Greedy shadow: at each step pick the `v` minimizing `Delta` of the next
/// states, then the cost gap `h(., v) - h(., u)`, then the index.
pub fn shadow_control(
    problem: &ControlProblem,
    metric: &DeltaMetric,
    y1: &[f64],
    y2: &[f64],
    u: &PiecewiseConstantControl,
    t: f64,
    tol: f64,
) -> Result<ShadowResult> {
    if u.duration() + 1e-9 < t {
        return Err(Error::HorizonTooLong {
            requested: t,
            available: u.duration(),
        });
    }
    let step = u.step();
    let k_max = crate::integrate::steps_for(t, step);
    let mut st = Stepper::new(problem, step);
    let mut a = y1.to_vec();
    let mut b = y2.to_vec();
    let d0 = metric.delta(&a, &b);
    let mut trace = vec![(0.0, d0)];
    let mut chosen = Vec::with_capacity(k_max);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut first = None;
    let mut na = a.clone();
    let mut nb = b.clone();
    for k in 0..k_max {
        let t0 = k as f64 * step;
        let ui = u.indices[k];
        let hu = problem.running_cost(&a, ui);
        na.copy_from_slice(&a);
        st.advance(&mut na, ui, BoxPolicy::Ignore, t0)?;
        let mut best: Option<(f64, f64, usize, Vec<f64>)> = None;
        for v in 0..problem.codebook.len() {
            nb.copy_from_slice(&b);
            st.advance(&mut nb, v, BoxPolicy::Ignore, t0)?;
            let key = (metric.delta(&na, &nb), problem.running_cost(&b, v) - hu);
            let better = match &best {
                None => true,
                Some(bst) => key.0 < bst.0 || (key.0 == bst.0 && key.1 < bst.1),
            };
            if better {
                best = Some((key.0, key.1, v, nb.clone()));
            }
        }
        let (dn, gap, v, state) = best.unwrap();
        worst_excess = worst_excess.max(gap - metric.modulus.eval(metric.delta(&a, &b)));
        chosen.push(v);
        a.copy_from_slice(&na);
        b = state;
        let tk = (k + 1) as f64 * step;
        trace.push((tk, dn));
        if first.is_none() && dn > d0 + tol {
            first = Some(tk);
        }
    }
    let v = PiecewiseConstantControl::new(step, chosen);
    let ta = rollout_with(problem, u, y1, t, BoxPolicy::Ignore)?;
    let tb = rollout_with(problem, &v, y2, t, BoxPolicy::Ignore)?;
    let mut gamma_gap: f64 = 0.0;
    for k in 1..=k_max {
        let tk = k as f64 * step;
        gamma_gap = gamma_gap.max((average_cost(&ta, 0.0, tk)? - average_cost(&tb, 0.0, tk)?).abs());
    }
    Ok(ShadowResult {
        v,
        trace,
        worst_cost_excess: worst_excess,
        first_exceedance: first,
        success: first.is_none() && worst_excess <= tol,
        gamma_gap,
        gamma_bound: metric.modulus.eval(d0 + tol) + tol,
    })
}
