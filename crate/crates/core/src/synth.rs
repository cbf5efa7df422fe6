//! Uniform controls by stage concatenation.
//!
//! Stage `i` starts at `z_i`, waits `m_i` and runs `n_i` more time units with
//! `nu_{m_i, n_i}(z_i, u) <= V*(z_i) + alpha / 2^(i+1)` and
//! `V*(z_{i+1}) <= V*(z_i) + alpha / 2^i`. Concatenating the stages gives
//! `gamma_T <= v* + 2 alpha + m_1 / T` along the whole run.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::integrate::{average_cost, rollout, rollout_with, steps_for, BoxPolicy, PiecewiseConstantControl};
use crate::par;
use crate::problem::ControlProblem;
use crate::value::field::ValueField;
use crate::value::search::{nu_sup_average, w_min_sup, SearchBudget};
use crate::value::shifted::{shifted_values, ShiftedValues};
use crate::value::tables::{tau_disc, w_table};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Shifts searched for `M` and for each stage.
    pub m_grid: Vec<f64>,
    /// Horizons of `V_{m,t}` and `W_{m,n}`.
    pub t_grid: Vec<f64>,
    pub budget: SearchBudget,
    /// Reached states (start state included) over which budgets must hold.
    pub representatives: usize,
    pub max_stages: usize,
    /// `gamma_T` is tabulated on `[lo, hi]`.
    pub gamma_range: (f64, f64),
    pub gamma_points: usize,
    /// Slack on every acceptance inequality; `tau_disc` of the field when
    /// `None`.
    pub slack: Option<f64>,
    /// Seeded candidates for the long-run report on failure.
    pub long_run_candidates: usize,
    pub long_run_horizon: f64,
}

impl SynthConfig {
    pub fn new(m_grid: Vec<f64>, t_grid: Vec<f64>, budget: SearchBudget) -> Self {
        SynthConfig {
            m_grid,
            t_grid,
            budget,
            representatives: 4,
            max_stages: 6,
            gamma_range: (10.0, 500.0),
            gamma_points: 40,
            slack: None,
            long_run_candidates: 20,
            long_run_horizon: 200.0,
        }
    }
}

/// Everything the stage construction reads: the value field, `V_{m,t}` on
/// the whole grid (hence `V*` anywhere in the box) and the slack.
pub struct SynthTables<'a> {
    pub problem: &'a ControlProblem,
    pub field: &'a ValueField,
    pub shifted: ShiftedValues,
    pub tau_disc: f64,
    pub slack: f64,
    pub cfg: SynthConfig,
}

impl<'a> SynthTables<'a> {
    pub fn new(problem: &'a ControlProblem, field: &'a ValueField, cfg: SynthConfig) -> Result<Self> {
        if cfg.m_grid.is_empty() || cfg.t_grid.is_empty() {
            return Err(Error::InvalidArgument("empty m_grid or t_grid".into()));
        }
        if cfg.t_grid[0] < 1.0 - 1e-12 {
            return Err(Error::InvalidArgument("t_grid entries must be >= 1".into()));
        }
        if cfg.max_stages == 0 || cfg.representatives == 0 {
            return Err(Error::InvalidArgument("need max_stages >= 1 and representatives >= 1".into()));
        }
        let shifted = shifted_values(problem, field, &cfg.m_grid, &cfg.t_grid)?;
        let tau = tau_disc(field);
        Ok(SynthTables {
            problem,
            field,
            shifted,
            tau_disc: tau,
            slack: cfg.slack.unwrap_or(tau),
            cfg,
        })
    }

    /// `V*(z)` read from the grid tables (clamped to the box).
    pub fn v_star(&self, z: &[f64]) -> f64 {
        self.shifted.v_star_at(z)
    }

    fn step(&self) -> f64 {
        self.field.step
    }
}

/// `W` and `V` summaries at the reached states of one stage start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepTables {
    pub reps: Vec<Vec<f64>>,
    pub v_star: Vec<f64>,
    /// `w_sup[r][i] = max_n W_{m_i, n}(rep r)`; infinite when no candidate
    /// stays in the box.
    pub w_sup: Vec<Vec<f64>>,
    /// `v_inf[r][j] = min_m V_{m, t_j}(rep r)`.
    pub v_inf: Vec<Vec<f64>>,
}

/// `z` followed by states reached from `z` by seeded random run-length
/// words at random times up to the largest shift (draws that leave the box
/// are retried).
pub fn sample_reached(problem: &ControlProblem, z: &[f64], count: usize, m_max: f64, step: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut reps = vec![z.to_vec()];
    let k_max = steps_for(m_max, step);
    if k_max == 0 {
        return reps;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tries = 0;
    while reps.len() < count && tries < 50 * count {
        tries += 1;
        let k = rng.random_range(1..=k_max);
        let mut w = Vec::with_capacity(k);
        while w.len() < k {
            let u = rng.random_range(0..problem.codebook.len());
            let run = rng.random_range(1..=20usize);
            w.extend(std::iter::repeat_n(u, run.min(k - w.len())));
        }
        let c = PiecewiseConstantControl::new(step, w);
        if let Ok(tr) = rollout(problem, &c, z, k as f64 * step) {
            reps.push(tr.final_state().to_vec());
        }
    }
    reps
}

/// Reached states from `z` with their `W` and `V` summaries.
pub fn rep_tables(t: &SynthTables, z: &[f64], budget: &SearchBudget) -> Result<RepTables> {
    let cfg = &t.cfg;
    let m_max = *cfg.m_grid.last().unwrap();
    let reps = sample_reached(t.problem, z, cfg.representatives, m_max, t.step(), budget.seed);
    let v_star = reps.iter().map(|r| t.v_star(r)).collect();
    let v_inf = reps
        .iter()
        .map(|r| {
            let tab = t.shifted.table_at(r);
            (0..cfg.t_grid.len())
                .map(|j| tab.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
                .collect()
        })
        .collect();
    let mut w_sup = Vec::with_capacity(reps.len());
    for r in &reps {
        let (w, _) = w_table(t.problem, t.field, r, &cfg.m_grid, &cfg.t_grid, budget)?;
        w_sup.push(w.iter().map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect());
    }
    Ok(RepTables {
        reps,
        v_star,
        w_sup,
        v_inf,
    })
}

impl RepTables {
    /// Representatives with some in-box continuation; budgets are required
    /// at these only.
    pub fn usable(&self) -> Vec<usize> {
        (0..self.reps.len())
            .filter(|&r| self.w_sup[r].iter().any(|w| w.is_finite()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Budgets {
    Found {
        m: f64,
        k: f64,
    },
    /// `residual` is the least excess over all candidate budgets.
    ShiftNotFound {
        residual: f64,
    },
    HorizonNotFound {
        residual: f64,
    },
}

/// `M`: least shift budget with `max_n W_{m,n}(z) <= V*(z) + eps` for some
/// `m <= M` at every representative. `K`: least horizon with
/// `min_m V_{m,n}(z) >= V*(z) - eps` for every `n >= K` at every
/// representative.
pub fn find_budgets(m_grid: &[f64], t_grid: &[f64], reps: &RepTables, epsilon: f64) -> Budgets {
    let usable = reps.usable();
    if usable.is_empty() {
        return Budgets::ShiftNotFound { residual: f64::INFINITY };
    }
    let mut m_budget = None;
    let mut m_residual = f64::INFINITY;
    for i in 0..m_grid.len() {
        // worst representative of its best shift up to m_i
        let worst = usable
            .iter()
            .map(|&r| {
                let best = reps.w_sup[r][..=i].iter().copied().fold(f64::INFINITY, f64::min);
                best - reps.v_star[r] - epsilon
            })
            .fold(f64::NEG_INFINITY, f64::max);
        m_residual = m_residual.min(worst);
        if worst <= 0.0 {
            m_budget = Some(m_grid[i]);
            break;
        }
    }
    let Some(m) = m_budget else {
        return Budgets::ShiftNotFound { residual: m_residual };
    };
    let mut k_budget = None;
    let mut k_residual = f64::INFINITY;
    for j in 0..t_grid.len() {
        let worst = usable
            .iter()
            .flat_map(|&r| (j..t_grid.len()).map(move |jj| (r, jj)))
            .map(|(r, jj)| reps.v_star[r] - epsilon - reps.v_inf[r][jj])
            .fold(f64::NEG_INFINITY, f64::max);
        k_residual = k_residual.min(worst);
        if worst <= 0.0 {
            k_budget = Some(t_grid[j]);
            break;
        }
    }
    match k_budget {
        Some(k) => Budgets::Found { m, k },
        None => Budgets::HorizonNotFound { residual: k_residual },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthStage {
    pub index: usize,
    pub epsilon: f64,
    pub m: f64,
    pub n: f64,
    pub z: Vec<f64>,
    pub z_next: Vec<f64>,
    pub vstar_z: f64,
    pub nu_achieved: f64,
    pub vstar_at_next: f64,
    /// `(M_i, K_i, M_{i+1})`.
    pub budgets: (f64, f64, f64),
    /// Length `m + n`.
    pub control: PiecewiseConstantControl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub index: usize,
    pub reason: String,
    /// Least excess over the acceptance bounds among the candidates tried.
    pub residual: f64,
    /// Best candidate seen (shift, horizon, control), if any.
    pub best: Option<(f64, f64, PiecewiseConstantControl)>,
}

fn snap_up(x: f64, step: f64) -> f64 {
    (x / step - 1e-9).ceil().max(1.0) * step
}

struct Candidate {
    m: f64,
    control: PiecewiseConstantControl,
    nu: f64,
    vnext: f64,
    z_next: Vec<f64>,
    excess: f64,
}

/// Searches `m <= M_i` and beam controls over horizons `n_i` and `2 n_i`
/// for an acceptable stage; preference goes to smaller `m`, then the
/// lexicographically smaller word.
pub fn stage_search(
    t: &SynthTables,
    z: &[f64],
    alpha: f64,
    index: usize,
    reps: &RepTables,
    budget: &SearchBudget,
) -> std::result::Result<SynthStage, StageFailure> {
    let cfg = &t.cfg;
    let step = t.step();
    let eps = alpha / 2f64.powi(index as i32);
    let fail = |reason: String, residual: f64, best| StageFailure {
        index,
        reason,
        residual,
        best,
    };
    let (m_i, k_i) = match find_budgets(&cfg.m_grid, &cfg.t_grid, reps, eps) {
        Budgets::Found { m, k } => (m, k),
        Budgets::ShiftNotFound { residual } => {
            return Err(fail(format!("no shift budget M for eps = {eps}"), residual, None))
        }
        Budgets::HorizonNotFound { residual } => {
            return Err(fail(format!("no horizon budget K for eps = {eps}"), residual, None))
        }
    };
    let m_next = match find_budgets(&cfg.m_grid, &cfg.t_grid, reps, eps / 2.0) {
        Budgets::Found { m, .. } => m,
        Budgets::ShiftNotFound { residual } | Budgets::HorizonNotFound { residual } => {
            return Err(fail(format!("no budgets for eps = {}", eps / 2.0), residual, None))
        }
    };
    let n = snap_up(k_i.max(m_next / alpha), step);
    let vstar_z = t.v_star(z);
    let nu_bound = vstar_z + eps / 2.0 + t.slack;
    let next_bound = vstar_z + eps + t.slack;

    let jobs: Vec<(f64, f64)> = cfg
        .m_grid
        .iter()
        .filter(|&&m| m <= m_i + 1e-12)
        .flat_map(|&m| [(m, n), (m, 2.0 * n)])
        .collect();
    let found = par::map_slice(&jobs, |&(m, horizon)| -> Option<Candidate> {
        let w = w_min_sup(t.problem, z, m, horizon, step, budget, Some(t.field), &[]).ok()?;
        let len = steps_for(m + n, step);
        let control = PiecewiseConstantControl::new(step, w.control.indices[..len].to_vec());
        let nu = nu_sup_average(t.problem, z, &control, m, n).ok()?.value;
        let tr = rollout(t.problem, &control, z, len as f64 * step).ok()?;
        let z_next = tr.final_state().to_vec();
        let vnext = t.v_star(&z_next);
        let excess = (nu - nu_bound).max(vnext - next_bound);
        Some(Candidate {
            m,
            control,
            nu,
            vnext,
            z_next,
            excess,
        })
    });
    let mut cands: Vec<Candidate> = found.into_iter().flatten().collect();
    if cands.is_empty() {
        return Err(fail("no candidate control stayed in the box".into(), f64::INFINITY, None));
    }
    cands.sort_by(|a, b| {
        a.m.total_cmp(&b.m)
            .then_with(|| a.control.indices.cmp(&b.control.indices))
    });
    if let Some(c) = cands.iter().find(|c| c.excess <= 0.0) {
        return Ok(SynthStage {
            index,
            epsilon: eps,
            m: c.m,
            n,
            z: z.to_vec(),
            z_next: c.z_next.clone(),
            vstar_z,
            nu_achieved: c.nu,
            vstar_at_next: c.vnext,
            budgets: (m_i, k_i, m_next),
            control: c.control.clone(),
        });
    }
    let best = cands.iter().min_by(|a, b| a.excess.total_cmp(&b.excess)).unwrap();
    Err(fail(
        format!(
            "no stage within bounds: best nu = {:.4} (bound {:.4}), V* at end = {:.4} (bound {:.4})",
            best.nu, nu_bound, best.vnext, next_bound
        ),
        best.excess,
        Some((best.m, n, best.control.clone())),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnosis {
    /// Residuals do not shrink with a larger search budget while `V_T`
    /// stays above `V* + alpha`.
    Structural,
    /// Residuals shrink with the budget, or `V_T` is close to `V*`.
    BudgetTooSmall,
    /// Stages were accepted but a tabulated `gamma_T` exceeds the bound.
    BoundViolated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Success,
    Failed {
        stage: usize,
        reason: String,
        diagnosis: Diagnosis,
        /// Residual at the base budget and at the doubled budget.
        residuals: (f64, f64),
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub t: f64,
    pub gamma: f64,
    pub bound: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRunReport {
    pub horizon: f64,
    /// `gamma_T` of each seeded candidate, extended cyclically to the
    /// horizon (rolled out past the box).
    pub gammas: Vec<f64>,
    pub min_gamma: f64,
    /// `V_T(z)` at the largest field horizon against `V*(z) + alpha`.
    pub v_horizon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCertificate {
    pub alpha: f64,
    pub z: Vec<f64>,
    pub v_star: f64,
    pub tau_disc: f64,
    pub slack: f64,
    pub stages: Vec<SynthStage>,
    /// Stage controls concatenated, then the last stage block repeated up
    /// to the largest tabulated horizon.
    pub control: PiecewiseConstantControl,
    pub gamma_table: Vec<GammaRow>,
    pub verdict: Verdict,
    /// `V*(z_{i+1}) <= v* + alpha (1 - 2^-i) + i slack` for every stage.
    pub drift_ok: bool,
    /// `m_j <= alpha n_{j-1}` for every stage `j >= 2`.
    pub shift_ok: bool,
    /// Largest distance between stage end states and the replayed run.
    pub boundary_error: f64,
    pub long_run: Option<LongRunReport>,
}

impl SynthCertificate {
    pub fn succeeded(&self) -> bool {
        self.verdict == Verdict::Success
    }

    /// Columns `T, gamma, bound`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["T", "gamma", "bound"])?;
        for r in &self.gamma_table {
            wr.write_record([r.t.to_string(), r.gamma.to_string(), r.bound.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn doubled(b: &SearchBudget) -> SearchBudget {
    SearchBudget {
        beam_width: b.beam_width * 2,
        restarts: b.restarts * 2,
        seed: b.seed,
    }
}

/// Stage search for `i = 1..=max_stages`, then the `gamma_T` table of the
/// concatenated control. On failure the stage is rerun with a doubled
/// budget to tell a structural failure from a resource limit, and seeded
/// candidates are reported over a long horizon.
pub fn synthesize(t: &SynthTables, z: &[f64], alpha: f64) -> Result<SynthCertificate> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be positive".into()));
    }
    let cfg = &t.cfg;
    let step = t.step();
    let v_star = t.v_star(z);
    let mut stages: Vec<SynthStage> = Vec::new();
    let mut verdict = Verdict::Success;
    let mut long_run = None;
    let mut zi = z.to_vec();
    for i in 1..=cfg.max_stages {
        let reps = rep_tables(t, &zi, &cfg.budget)?;
        match stage_search(t, &zi, alpha, i, &reps, &cfg.budget) {
            Ok(s) => {
                zi = s.z_next.clone();
                stages.push(s);
            }
            Err(f) => {
                let big = doubled(&cfg.budget);
                let reps2 = rep_tables(t, &zi, &big)?;
                let r2 = match stage_search(t, &zi, alpha, i, &reps2, &big) {
                    Ok(_) => f64::NEG_INFINITY,
                    Err(f2) => f2.residual,
                };
                let v_t = t.field.value_at(t.field.horizon(), &zi)?;
                let plateau = r2 > 0.0 && r2 >= 0.9 * f.residual;
                let diagnosis = if plateau && v_t > t.v_star(&zi) + alpha {
                    Diagnosis::Structural
                } else {
                    Diagnosis::BudgetTooSmall
                };
                long_run = Some(long_run_report(t, &zi, v_t)?);
                verdict = Verdict::Failed {
                    stage: i,
                    reason: f.reason,
                    diagnosis,
                    residuals: (f.residual, r2),
                };
                break;
            }
        }
    }

    let mut words: Vec<usize> = Vec::new();
    for s in &stages {
        words.extend(&s.control.indices);
    }
    let (lo, hi) = cfg.gamma_range;
    let mut gamma_table = Vec::new();
    let mut boundary_error: f64 = 0.0;
    let control = if let Some(last) = stages.last() {
        let block = last.control.indices.clone();
        let total = steps_for(hi.max(words.len() as f64 * step), step);
        let control = PiecewiseConstantControl::new(step, words).extend_cyclic(&block, total);
        let tr = rollout(t.problem, &control, z, total as f64 * step)?;
        let mut ts = log_grid(lo, hi, cfg.gamma_points);
        let mut acc = 0.0;
        for s in &stages {
            ts.push(acc + s.m);
            acc += s.m + s.n;
            ts.push(acc);
            let k = steps_for(acc, step);
            boundary_error = boundary_error.max(crate::problem::norm_diff(&tr.states[k], &s.z_next));
        }
        ts.retain(|&x| x >= lo - 1e-9 && x <= hi + 1e-9);
        ts.iter_mut().for_each(|x| *x = steps_for(*x, step) as f64 * step);
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let m1 = stages[0].m;
        for &tt in &ts {
            let gamma = average_cost(&tr, 0.0, tt)?;
            let bound = v_star + 2.0 * alpha + m1 / tt;
            gamma_table.push(GammaRow {
                t: tt,
                gamma,
                bound,
                ok: gamma <= bound + t.slack,
            });
        }
        control
    } else {
        PiecewiseConstantControl::new(step, vec![])
    };
    if verdict == Verdict::Success {
        if let Some(r) = gamma_table.iter().find(|r| !r.ok) {
            verdict = Verdict::Failed {
                stage: 0,
                reason: format!("gamma_T = {:.4} exceeds {:.4} at T = {}", r.gamma, r.bound + t.slack, r.t),
                diagnosis: Diagnosis::BoundViolated,
                residuals: (r.gamma - r.bound - t.slack, f64::NAN),
            };
        }
    }
    let drift_ok = stages
        .iter()
        .all(|s| s.vstar_at_next <= v_star + alpha * (1.0 - 0.5f64.powi(s.index as i32)) + s.index as f64 * t.slack);
    let shift_ok = stages.windows(2).all(|w| w[1].m <= alpha * w[0].n + 1e-9);
    Ok(SynthCertificate {
        alpha,
        z: z.to_vec(),
        v_star,
        tau_disc: t.tau_disc,
        slack: t.slack,
        stages,
        control,
        gamma_table,
        verdict,
        drift_ok,
        shift_ok,
        boundary_error,
        long_run,
    })
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || hi <= lo {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Seeded `W` witnesses (shift cycling through `m_grid`, the largest
/// horizon of `t_grid`) extended cyclically to the long-run horizon.
fn long_run_report(t: &SynthTables, z: &[f64], v_horizon: f64) -> Result<LongRunReport> {
    let cfg = &t.cfg;
    let step = t.step();
    let n = *cfg.t_grid.last().unwrap();
    let horizon = cfg.long_run_horizon;
    let total = steps_for(horizon, step);
    let seeds: Vec<u64> = (0..cfg.long_run_candidates as u64).collect();
    let gammas = par::map_slice(&seeds, |&s| -> Result<f64> {
        let b = SearchBudget {
            seed: cfg.budget.seed.wrapping_add(1000 + s),
            ..cfg.budget.clone()
        };
        let m = cfg.m_grid[s as usize % cfg.m_grid.len()];
        let w = w_min_sup(t.problem, z, m, n, step, &b, Some(t.field), &[])?;
        let block = w.control.indices.clone();
        let c = w.control.extend_cyclic(&block, total);
        let tr = rollout_with(t.problem, &c, z, total as f64 * step, BoxPolicy::Ignore)?;
        average_cost(&tr, 0.0, total as f64 * step)
    });
    let gammas = gammas.into_iter().collect::<Result<Vec<f64>>>()?;
    let min_gamma = gammas.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(LongRunReport {
        horizon,
        gammas,
        min_gamma,
        v_horizon,
    })
}
