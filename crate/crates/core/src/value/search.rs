//! Sup-average costs `nu_{m,n}(z, u) = sup_{t in [1, n]} gamma_{m,t}(z, u)` and
//! a beam search for `W_{m,n}(z) = inf_u nu_{m,n}(z, u)` over codebook words.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::integrate::{rollout, sup_window_indices, BoxPolicy, PiecewiseConstantControl, Stepper};
use crate::par;
use crate::problem::ControlProblem;
use crate::value::field::ValueField;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchBudget {
    pub beam_width: usize,
    /// Random words tried besides the beam.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            beam_width: 16,
            restarts: 4,
            seed: 0,
        }
    }
}

/// A sup over the time grid, with the bound on its distance to the sup over
/// the continuum `[1, n]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupAverage {
    pub value: f64,
    /// Window length attaining the maximum.
    pub at_t: f64,
    pub grid_error: f64,
}

/// Grid indices `(m_steps, lo, hi)` of a window `[m, m + t]`, `t in [1, n]`.
fn window(step: f64, m: f64, n: f64) -> Result<(usize, usize, usize)> {
    if !(n >= 1.0 - 1e-12) || !(m >= 0.0) {
        return Err(Error::InvalidArgument("need m >= 0 and n >= 1".into()));
    }
    let r = m / step;
    if (r - r.round()).abs() > 1e-9 * r.max(1.0) {
        return Err(Error::InvalidArgument(format!("m = {m} is not a multiple of step {step}")));
    }
    let (lo, hi) = sup_window_indices(step, n);
    Ok((r.round() as usize, lo, hi))
}

/// Max of `(cum[m + j] - cum[m]) / (j step)` over `j in lo..=hi`.
fn sup_of(cum: &[f64], step: f64, m: usize, lo: usize, hi: usize) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, lo);
    for j in lo..=hi {
        let g = (cum[m + j] - cum[m]) / (j as f64 * step);
        if g > best.0 {
            best = (g, j);
        }
    }
    best
}

/// `nu_{m,n}(z, u)` as the max of `gamma_{m,t}` over grid times `t in [1, n]`.
pub fn nu_sup_average(
    problem: &ControlProblem,
    z: &[f64],
    control: &PiecewiseConstantControl,
    m: f64,
    n: f64,
) -> Result<SupAverage> {
    let step = control.step();
    let (ms, lo, hi) = window(step, m, n)?;
    let tr = rollout(problem, control, z, (ms + hi) as f64 * step)?;
    let (value, j) = sup_of(&tr.cumulative_cost, step, ms, lo, hi);
    Ok(SupAverage {
        value,
        at_t: j as f64 * step,
        grid_error: 2.0 * step,
    })
}

/// Evaluates `nu_{m,n}` for every `(m, n)` pair from one rollout of
/// `control`; pairs beyond the control length or past a box exit are `None`.
pub(crate) fn nu_table(
    problem: &ControlProblem,
    z: &[f64],
    control: &PiecewiseConstantControl,
    m_grid: &[f64],
    n_grid: &[f64],
) -> Vec<Vec<Option<f64>>> {
    let step = control.step();
    let mut stepper = Stepper::new(problem, step);
    let mut y = z.to_vec();
    let mut cum = Vec::with_capacity(control.len() + 1);
    cum.push(0.0);
    let mut acc = 0.0;
    for (k, &u) in control.indices.iter().enumerate() {
        match stepper.advance(&mut y, u, BoxPolicy::Enforce, k as f64 * step) {
            Ok(c) => {
                acc += c;
                cum.push(acc);
            }
            Err(_) => break,
        }
    }
    m_grid
        .iter()
        .map(|&m| {
            n_grid
                .iter()
                .map(|&n| {
                    let (ms, lo, hi) = window(step, m, n).ok()?;
                    (ms + hi < cum.len()).then(|| sup_of(&cum, step, ms, lo, hi).0)
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WSearch {
    /// `nu_{m,n}` of the witness: an upper bound on `W_{m,n}`.
    pub value: f64,
    pub control: PiecewiseConstantControl,
    pub grid_error: f64,
    /// Always true: the search is not exhaustive unless the beam holds every word.
    pub upper_bound: bool,
    pub candidates_evaluated: usize,
}

#[derive(Clone, Copy)]
struct Node {
    parent: u32,
    control: u16,
}

#[derive(Clone)]
struct Entry {
    node: u32,
    y: Vec<f64>,
    cum: f64,
    sup: f64,
    key: f64,
}

const ROOT: u32 = u32::MAX;

fn word_of(arena: &[Node], mut node: u32, len: usize) -> Vec<usize> {
    let mut word = vec![0; len];
    let mut i = len;
    while node != ROOT {
        i -= 1;
        word[i] = arena[node as usize].control as usize;
        node = arena[node as usize].parent;
    }
    word
}

/// Approximate minimizer of `nu_{m,n}(z, .)` over words on the `step` grid.
///
/// Candidates: a beam search (one grid cell per survivor once the beam
/// overflows; ranking by the running sup and, when `field` is given, a value
/// estimate of the remaining window), every constant control, the greedy
/// control of `field`, seeded random words, and `extra` words supplied by
/// the caller. Every candidate is scored by an exact rollout; the smallest
/// `nu` wins, ties going to the lexicographically smaller word.
#[allow(clippy::too_many_arguments)]
pub fn w_min_sup(
    problem: &ControlProblem,
    z: &[f64],
    m: f64,
    n: f64,
    step: f64,
    budget: &SearchBudget,
    field: Option<&ValueField>,
    extra: &[PiecewiseConstantControl],
) -> Result<WSearch> {
    if budget.beam_width == 0 {
        return Err(Error::InvalidArgument("beam width must be >= 1".into()));
    }
    if problem.codebook.len() > u16::MAX as usize {
        return Err(Error::InvalidArgument("codebook too large for search".into()));
    }
    let (ms, lo, hi) = window(step, m, n)?;
    let len = ms + hi;
    let mut words: Vec<Vec<usize>> = Vec::new();

    if let Some(w) = beam(problem, z, step, ms, lo, hi, budget.beam_width, field) {
        words.push(w);
    }
    for u in 0..problem.codebook.len() {
        words.push(vec![u; len]);
    }
    if let Some(f) = field {
        let t = (len as f64 * step).min(f.horizon());
        if let Ok(g) = f.greedy_control(problem, z, t) {
            let block = g.indices.clone();
            words.push(g.extend_cyclic(&block, len).indices[..len].to_vec());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed ^ (len as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    for _ in 0..budget.restarts {
        let mut w = Vec::with_capacity(len);
        while w.len() < len {
            let u = rng.random_range(0..problem.codebook.len());
            let run = rng.random_range(1..=20usize);
            w.extend(std::iter::repeat_n(u, run.min(len - w.len())));
        }
        words.push(w);
    }
    for e in extra {
        if e.step() == step && !e.is_empty() {
            let block = e.indices.clone();
            words.push(e.extend_cyclic(&block, len).indices[..len].to_vec());
        }
    }

    let scored = par::map_slice(&words, |w| {
        let c = PiecewiseConstantControl::new(step, w.clone());
        nu_sup_average(problem, z, &c, m, n).ok().map(|s| s.value)
    });
    let mut best: Option<(f64, &Vec<usize>)> = None;
    for (w, s) in words.iter().zip(&scored) {
        if let Some(v) = *s {
            let better = match best {
                None => true,
                Some((bv, bw)) => v < bv || (v == bv && w < bw),
            };
            if better {
                best = Some((v, w));
            }
        }
    }
    let (value, w) = best.ok_or(Error::NoValidRollout)?;
    Ok(WSearch {
        value,
        control: PiecewiseConstantControl::new(step, w.clone()),
        grid_error: 2.0 * step,
        upper_bound: true,
        candidates_evaluated: words.len(),
    })
}

#[allow(clippy::too_many_arguments)]
fn beam(
    problem: &ControlProblem,
    z: &[f64],
    step: f64,
    ms: usize,
    lo: usize,
    hi: usize,
    width: usize,
    field: Option<&ValueField>,
) -> Option<Vec<usize>> {
    let len = ms + hi;
    let n_u = problem.codebook.len();
    let window_len = hi as f64 * step;
    let estimate = |y: &[f64], remaining: usize| -> f64 {
        match field {
            Some(f) => {
                let (k, v) = f.totals_at_or_below(remaining);
                if k == 0 {
                    0.0
                } else {
                    f.grid.interpolate(v, y) * remaining as f64 / k as f64
                }
            }
            None => 0.0,
        }
    };
    let mut arena: Vec<Node> = Vec::new();
    let mut beam = vec![Entry {
        node: ROOT,
        y: z.to_vec(),
        cum: 0.0,
        sup: 0.0,
        key: 0.0,
    }];
    for depth in 0..len {
        let in_window = depth >= ms;
        let w = depth + 1 - ms.min(depth + 1);
        let remaining = len - depth - 1;
        let expanded: Vec<Vec<(usize, Entry)>> = par::map_range(beam.len(), |i| {
            let e = &beam[i];
            let mut stepper = Stepper::new(problem, step);
            let mut out = Vec::with_capacity(n_u);
            for u in 0..n_u {
                let mut y = e.y.clone();
                let Ok(c) = stepper.advance(&mut y, u, BoxPolicy::Enforce, 0.0) else {
                    continue;
                };
                let (cum, sup, key) = if in_window {
                    let cum = e.cum + c;
                    let sup = if w >= lo { e.sup.max(cum / (w as f64 * step)) } else { e.sup };
                    let projected = (cum + estimate(&y, remaining)) / window_len;
                    (cum, sup, sup.max(projected))
                } else {
                    let k = hi.min(field.map_or(0, |f| f.horizon_steps));
                    let key = if k == 0 { 0.0 } else { estimate(&y, k) / (k as f64 * step) };
                    (0.0, 0.0, key)
                };
                out.push((
                    u,
                    Entry {
                        node: e.node,
                        y,
                        cum,
                        sup,
                        key,
                    },
                ));
            }
            out
        });
        // (parent rank, control) is a fixed total order for tie-breaking
        let mut cands: Vec<(usize, usize, Entry)> = expanded
            .into_iter()
            .enumerate()
            .flat_map(|(rank, v)| v.into_iter().map(move |(u, e)| (rank, u, e)))
            .collect();
        if cands.is_empty() {
            return None;
        }
        cands.sort_by(|a, b| a.2.key.total_cmp(&b.2.key).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let keep: Vec<(usize, usize, Entry)> = if cands.len() <= width {
            cands
        } else {
            select_diverse(cands, width, field)
        };
        beam = keep
            .into_iter()
            .map(|(_, u, mut e)| {
                arena.push(Node {
                    parent: e.node,
                    control: u as u16,
                });
                e.node = (arena.len() - 1) as u32;
                e
            })
            .collect();
    }
    let best = beam
        .iter()
        .min_by(|a, b| a.sup.total_cmp(&b.sup))
        .expect("beam is nonempty");
    Some(word_of(&arena, best.node, len))
}

/// Keeps at most one candidate per grid cell in rank order, then tops up
/// with the best of the rest.
fn select_diverse(
    cands: Vec<(usize, usize, Entry)>,
    width: usize,
    field: Option<&ValueField>,
) -> Vec<(usize, usize, Entry)> {
    let Some(f) = field else {
        return cands.into_iter().take(width).collect();
    };
    let mut seen = std::collections::HashSet::new();
    let mut keep = Vec::with_capacity(width);
    let mut rest = Vec::new();
    for c in cands {
        if keep.len() >= width {
            break;
        }
        let cell = f.grid.cell_of(&c.2.y);
        if seen.insert(cell) {
            keep.push(c);
        } else {
            rest.push(c);
        }
    }
    let missing = width - keep.len();
    keep.extend(rest.into_iter().take(missing));
    keep.sort_by(|a, b| a.2.key.total_cmp(&b.2.key).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    keep
}
