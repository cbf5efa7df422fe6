//! Subcommand pipelines. Every run writes `config.json` (the effective
//! configuration) and `manifest.json` next to its artifacts.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use limval_core::examples::ExampleSpec;
use limval_core::grid::GridSpec;
use limval_core::integrate::{steps_for, PiecewiseConstantControl};
use limval_core::nonexpansive::{
    check_delta, check_scalar, sample_pairs, shadow_control, DeltaKind, DeltaMetric, NonexpansionReport, PairSampling,
};
use limval_core::par;
use limval_core::problem::{normalize_cost, validate_hypotheses, ControlProblem, CostMap};
use limval_core::reach::propagate_reach;
use limval_core::synth::{synthesize, SynthConfig, SynthTables, Verdict};
use limval_core::value::{
    aux_tables, limit_diagnostics, tau_disc, value_backward, AuxConfig, AuxValueTables, SearchBudget, ValueField,
};
use serde::Serialize;

use crate::config::{Loaded, RunConfig};

pub enum Outcome {
    Ok,
    /// A mathematical refutation (hypothesis fails, no uniform control).
    Refuted,
}

struct Ctx {
    cfg: RunConfig,
    spec: Option<ExampleSpec>,
    raw: ControlProblem,
    problem: ControlProblem,
    map: CostMap,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    command: &'a str,
    config: &'a RunConfig,
    cost_map: CostMap,
    outputs: &'a [String],
    exit_code: u8,
    wall_time_s: f64,
}

impl Ctx {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.cfg.out.join(name)
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("cannot create {}", p.display()))?))
    }

    fn write(&mut self, name: &str, content: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, content).with_context(|| format!("cannot write {}", p.display()))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let s = serde_json::to_string_pretty(value)?;
        self.write(name, &s)
    }

    fn grid(&self) -> Result<GridSpec> {
        Ok(GridSpec::new(self.problem.state_box.clone(), self.cfg.cells_per_axis.clone())?)
    }

    fn field(&self, horizon: f64) -> Result<ValueField> {
        Ok(value_backward(&self.problem, &self.grid()?, horizon, self.cfg.step)?)
    }

    /// Horizon covering both the configured one and every `t` in the grid.
    fn table_horizon(&self) -> f64 {
        self.cfg.t_grid.iter().copied().fold(self.cfg.horizon, f64::max)
    }

    fn budget(&self) -> SearchBudget {
        SearchBudget {
            beam_width: self.cfg.beam_width,
            restarts: self.cfg.restarts,
            seed: self.cfg.seed,
        }
    }

    fn state(&self, given: &Option<Vec<f64>>, what: &str) -> Result<Vec<f64>> {
        let z = given.clone().unwrap_or_else(|| self.problem.y0.clone());
        if z.len() != self.problem.dim {
            bail!("{what} has {} coordinates, the problem has dimension {}", z.len(), self.problem.dim);
        }
        Ok(z)
    }

    fn aux(&self, field: &ValueField, z: &[f64], compute_w: bool) -> Result<AuxValueTables> {
        let cfg = AuxConfig {
            m_grid: self.cfg.m_grid.clone(),
            t_grid: self.cfg.t_grid.clone(),
            n_grid: self.cfg.aux.n_grid.clone(),
            compute_w,
            budget: self.budget(),
        };
        Ok(aux_tables(&self.problem, field, z, &cfg)?)
    }

    fn metric(&self, name: &Option<String>) -> Result<DeltaMetric> {
        let name = match name {
            Some(n) => n.clone(),
            None => self
                .spec
                .as_ref()
                .and_then(|s| s.hypothesis_flags.delta_nonexpansive.clone())
                .unwrap_or_else(|| "squared_euclidean".into()),
        };
        let kind = DeltaKind::parse(&name)?;
        Ok(DeltaMetric::for_problem(&self.problem, kind, self.cfg.seed))
    }
}

pub fn run(command: &str, loaded: Loaded) -> Result<Outcome> {
    let started = Instant::now();
    let Loaded { config, spec, problem } = loaded;
    if let Some(n) = config.threads {
        par::set_threads(n)?;
    }
    std::fs::create_dir_all(&config.out).with_context(|| format!("cannot create {}", config.out.display()))?;
    let (normalized, map) = normalize_cost(&problem)?;
    let mut ctx = Ctx {
        cfg: config,
        spec,
        raw: problem,
        problem: normalized,
        map,
        outputs: vec![],
    };
    let echo = ctx.cfg.clone();
    ctx.json("config.json", &echo)?;

    let outcome = match command {
        "validate" => validate(&mut ctx)?,
        "value" => value(&mut ctx)?,
        "aux" => aux(&mut ctx)?,
        "vstar" => vstar(&mut ctx)?,
        "check" => check(&mut ctx)?,
        "shadow" => shadow(&mut ctx)?,
        "synth" => synth(&mut ctx)?,
        "report" => report(&mut ctx)?,
        "export-example" => export(&mut ctx)?,
        other => bail!("unknown command {other}"),
    };

    let outputs = ctx.outputs.clone();
    let manifest = Manifest {
        tool: "limval",
        version: env!("CARGO_PKG_VERSION"),
        core_version: limval_core::VERSION,
        command,
        config: &ctx.cfg,
        cost_map: ctx.map,
        outputs: &outputs,
        exit_code: match outcome {
            Outcome::Ok => 0,
            Outcome::Refuted => 2,
        },
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let s = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(ctx.cfg.out.join("manifest.json"), s)?;
    Ok(outcome)
}

fn validate(ctx: &mut Ctx) -> Result<Outcome> {
    let r = validate_hypotheses(&ctx.raw, ctx.cfg.validate.samples, ctx.cfg.seed)?;
    println!(
        "lipschitz: declared {} observed {:.4} {}",
        r.lipschitz.declared,
        r.lipschitz.max_observed,
        if r.lipschitz.passed { "ok" } else { "VIOLATED" }
    );
    println!(
        "growth:    declared {} observed {:.4} {}",
        r.growth.declared,
        r.growth.max_observed,
        if r.growth.passed { "ok" } else { "VIOLATED" }
    );
    println!("cost range [{:.4}, {:.4}]{}", r.cost_min, r.cost_max, if r.cost_discontinuous { ", discontinuous in y" } else { "" });
    ctx.json("validation.json", &r)?;
    Ok(if r.passed() { Outcome::Ok } else { Outcome::Refuted })
}

fn value(ctx: &mut Ctx) -> Result<Outcome> {
    let at = ctx.state(&ctx.cfg.value.at, "--at")?;
    let f = ctx.field(ctx.cfg.horizon)?;
    let mut w = csv::Writer::from_writer(ctx.create("values.csv")?);
    w.write_record(["t", "value", "value_raw"])?;
    let mut lo = f64::INFINITY;
    for t in f.stored_horizons().into_iter().filter(|&t| t > 0.0) {
        let v = f.value_at(t, &at)?;
        lo = lo.min(v);
        w.write_record([t.to_string(), v.to_string(), ctx.map.denormalize(v).to_string()])?;
    }
    w.flush()?;
    if ctx.cfg.value.full {
        f.write_csv(ctx.create("field.csv")?, &[f.horizon()])?;
    }
    let tau = tau_disc(&f);
    ctx.json(
        "value_summary.json",
        &serde_json::json!({
            "at": at,
            "horizon": f.horizon(),
            "value": f.value_at(f.horizon(), &at)?,
            "min_value": lo,
            "tau_disc": tau,
            "lipschitz_estimate": f.lipschitz_estimate(),
            "escaped_fraction": f.escaped_fraction,
            "contaminated": f.contaminated,
        }),
    )?;
    println!("V_{}({:?}) = {:.6}  (min over stored t: {lo:.6}, tau_disc {tau:.4})", f.horizon(), at, f.value_at(f.horizon(), &at)?);
    if f.contaminated {
        println!("warning: {:.1}% of foot points left the box", 100.0 * f.escaped_fraction);
    }
    Ok(Outcome::Ok)
}

fn aux(ctx: &mut Ctx) -> Result<Outcome> {
    let z = ctx.state(&ctx.cfg.aux.z, "--z")?;
    let f = ctx.field(ctx.table_horizon())?;
    let t = ctx.aux(&f, &z, ctx.cfg.aux.compute_w)?;
    let rep = limit_diagnostics(&t, &f);
    t.write_csv(ctx.create("aux.csv")?)?;
    ctx.json("aux.json", &t)?;
    ctx.json("diagnostics.json", &rep)?;
    let text = rep.to_text();
    ctx.write("diagnostics.txt", &text)?;
    println!("V* = {:.6} in [{:.6}, {:.6}]", t.v_star.value, t.v_star.lo, t.v_star.hi);
    print!("{text}");
    Ok(Outcome::Ok)
}

fn vstar(ctx: &mut Ctx) -> Result<Outcome> {
    let z = ctx.state(&ctx.cfg.aux.z, "--z")?;
    let f = ctx.field(ctx.table_horizon())?;
    let t = ctx.aux(&f, &z, ctx.cfg.aux.compute_w)?;
    ctx.json(
        "vstar.json",
        &serde_json::json!({
            "z": z,
            "v_star": t.v_star.value,
            "lo": t.v_star.lo,
            "hi": t.v_star.hi,
            "hi_from_w": t.v_star.hi_from_w,
            "v_plus": t.vplus,
            "v_minus": t.vminus,
            "tau_disc": t.tau_disc,
        }),
    )?;
    println!(
        "V*({z:?}) = {:.6} (bracket [{:.6}, {:.6}]{}), V+ = {:.6}, V- = {:.6}, tau_disc = {:.4}",
        t.v_star.value,
        t.v_star.lo,
        t.v_star.hi,
        if t.v_star.hi_from_w { " from W" } else { " by tau_disc" },
        t.vplus,
        t.vminus,
        t.tau_disc
    );
    Ok(Outcome::Ok)
}

fn pairs_for(ctx: &Ctx) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let c = &ctx.cfg.check;
    let reach = if c.reach_m > 0.0 && c.max_centers > 0 {
        Some(propagate_reach(&ctx.problem, &ctx.grid()?, c.reach_m, ctx.cfg.step)?)
    } else {
        None
    };
    Ok(sample_pairs(
        &ctx.problem,
        reach.as_ref(),
        &PairSampling {
            max_centers: c.max_centers,
            random_pairs: c.random_pairs,
            seed: ctx.cfg.seed,
        },
    ))
}

fn write_check(ctx: &mut Ctx, r: &NonexpansionReport) -> Result<()> {
    ctx.json("check.json", r)?;
    let text = r.to_text();
    ctx.write("check.txt", &text)?;
    if r.witness.is_some() {
        r.write_witness_csv(ctx.create("witness.csv")?)?;
    }
    print!("{text}");
    Ok(())
}

fn check(ctx: &mut Ctx) -> Result<Outcome> {
    let pairs = pairs_for(ctx)?;
    let tol = ctx.cfg.check.tolerance;
    let r = match ctx.cfg.check.condition.as_str() {
        "scalar" => check_scalar(&ctx.problem, &pairs, tol),
        "delta" => {
            let m = ctx.metric(&ctx.cfg.check.metric)?;
            check_delta(&ctx.problem, &m, &pairs, tol)?
        }
        other => bail!("unknown condition `{other}` (expected scalar or delta)"),
    };
    write_check(ctx, &r)?;
    Ok(if r.passed { Outcome::Ok } else { Outcome::Refuted })
}

fn shadow(ctx: &mut Ctx) -> Result<Outcome> {
    let o = ctx.cfg.shadow.clone();
    let y1 = ctx.state(&o.y1, "--y1")?;
    let y2 = ctx.state(&Some(o.y2.clone().ok_or_else(|| anyhow!("shadow needs --y2"))?), "--y2")?;
    if o.control >= ctx.problem.codebook.len() {
        bail!("control index {} outside the codebook of size {}", o.control, ctx.problem.codebook.len());
    }
    let m = ctx.metric(&o.metric)?;
    let u = PiecewiseConstantControl::constant(ctx.cfg.step, o.control, steps_for(o.t, ctx.cfg.step));
    let r = shadow_control(&ctx.problem, &m, &y1, &y2, &u, o.t, o.tolerance)?;
    ctx.json("shadow.json", &r)?;
    let mut w = csv::Writer::from_writer(ctx.create("shadow_trace.csv")?);
    w.write_record(["t", "delta"])?;
    for (t, d) in &r.trace {
        w.write_record([t.to_string(), d.to_string()])?;
    }
    w.flush()?;
    println!(
        "shadow {}: worst cost excess {:.3e}, gamma gap {:.4e} (bound {:.4e})",
        if r.success { "holds" } else { "fails" },
        r.worst_cost_excess,
        r.gamma_gap,
        r.gamma_bound
    );
    Ok(if r.success { Outcome::Ok } else { Outcome::Refuted })
}

fn synth(ctx: &mut Ctx) -> Result<Outcome> {
    let z = ctx.state(&ctx.cfg.synth.z, "--z")?;
    let f = ctx.field(ctx.table_horizon())?;
    let mut sc = SynthConfig::new(ctx.cfg.m_grid.clone(), ctx.cfg.t_grid.clone(), ctx.budget());
    sc.slack = ctx.cfg.synth.slack;
    let tables = SynthTables::new(&ctx.problem, &f, sc)?;
    let cert = synthesize(&tables, &z, ctx.cfg.synth.alpha)?;
    ctx.write("certificate.json", &cert.to_json()?)?;
    cert.write_csv(ctx.create("gamma.csv")?)?;
    match &cert.verdict {
        Verdict::Success => println!(
            "uniform control found: {} stages, v* = {:.4}, tau_disc = {:.4}",
            cert.stages.len(),
            cert.v_star,
            cert.tau_disc
        ),
        Verdict::Failed {
            stage,
            reason,
            diagnosis,
            residuals,
        } => {
            println!("no uniform control: stage {stage}: {reason}");
            println!("diagnosis: {diagnosis:?} (residuals {:.4} -> {:.4} with doubled budget)", residuals.0, residuals.1);
            if let Some(l) = &cert.long_run {
                println!("long run: min gamma_{} over {} candidates = {:.4}", l.horizon, l.gammas.len(), l.min_gamma);
            }
        }
    }
    Ok(if cert.succeeded() { Outcome::Ok } else { Outcome::Refuted })
}

#[derive(Serialize)]
struct ReferenceRow {
    quantity: String,
    reference: f64,
    tolerance: f64,
    computed: Option<f64>,
    ok: Option<bool>,
}

#[derive(Serialize)]
struct FlagRow {
    flag: String,
    declared: bool,
    observed: bool,
}

fn report(ctx: &mut Ctx) -> Result<Outcome> {
    let y0 = ctx.problem.y0.clone();
    let f = ctx.field(ctx.table_horizon())?;
    let t = ctx.aux(&f, &y0, false)?;
    let big_t = f.horizon();
    let min_vt = t.vt_series.iter().filter(|(s, _)| *s >= 1.0).map(|p| p.1).fold(f64::INFINITY, f64::min);
    let raw = |v: f64| ctx.map.denormalize(v);

    let mut refs = Vec::new();
    let mut flags = Vec::new();
    if let Some(spec) = &ctx.spec {
        for r in &spec.reference_values {
            let computed = match r.quantity.as_str() {
                "limit_value" => Some(raw(f.value_at(big_t, &y0)?)),
                "limit_value_at_0.5_0.25" => Some(raw(f.value_at(big_t, &[0.5, 0.25])?)),
                "v_star" => Some(raw(t.v_star.value)),
                "finite_horizon_lower_bound" => Some(raw(min_vt)),
                _ => None,
            };
            let ok = computed.map(|c| {
                if r.quantity == "finite_horizon_lower_bound" {
                    c >= r.value - r.tolerance
                } else {
                    (c - r.value).abs() <= r.tolerance
                }
            });
            refs.push(ReferenceRow {
                quantity: r.quantity.clone(),
                reference: r.value,
                tolerance: r.tolerance,
                computed,
                ok,
            });
        }
        let hf = &spec.hypothesis_flags;
        let v = validate_hypotheses(&ctx.raw, ctx.cfg.validate.samples, ctx.cfg.seed)?;
        flags.push(FlagRow {
            flag: "growth_lipschitz".into(),
            declared: hf.growth_lipschitz,
            observed: v.passed(),
        });
        flags.push(FlagRow {
            flag: "cost_continuous".into(),
            declared: hf.cost_continuous,
            observed: !v.cost_discontinuous,
        });
        let pairs = pairs_for(ctx)?;
        let s = check_scalar(&ctx.problem, &pairs, 1e-9);
        flags.push(FlagRow {
            flag: "scalar_nonexpansive".into(),
            declared: hf.scalar_nonexpansive,
            observed: s.passed,
        });
    }

    let mut text = String::new();
    let _ = writeln!(text, "problem: {}", ctx.raw.name);
    let _ = writeln!(text, "grid {:?}, step {}, horizon {big_t}, tau_disc {:.4}", ctx.cfg.cells_per_axis, ctx.cfg.step, t.tau_disc);
    let _ = writeln!(text, "V_T(y0) = {:.4}, min_(t >= 1) V_t(y0) = {:.4}, V* = {:.4}, V- = {:.4}, V+ = {:.4}",
        raw(f.value_at(big_t, &y0)?), raw(min_vt), raw(t.v_star.value), raw(t.vminus), raw(t.vplus));
    for r in &refs {
        let _ = writeln!(
            text,
            "{:<28} reference {:.4} +- {:.3}  computed {}  {}",
            r.quantity,
            r.reference,
            r.tolerance,
            r.computed.map(|c| format!("{c:.4}")).unwrap_or_else(|| "-".into()),
            match r.ok {
                Some(true) => "ok",
                Some(false) => "MISMATCH",
                None => "",
            }
        );
    }
    for fl in &flags {
        let _ = writeln!(
            text,
            "flag {:<24} declared {:<5} observed {:<5} {}",
            fl.flag,
            fl.declared,
            fl.observed,
            if fl.declared == fl.observed { "ok" } else { "MISMATCH" }
        );
    }
    ctx.write("report.txt", &text)?;
    ctx.json(
        "report.json",
        &serde_json::json!({
            "references": refs,
            "flags": flags,
            "vt_series": t.vt_series,
            "v_star": t.v_star,
            "tau_disc": t.tau_disc,
        }),
    )?;
    print!("{text}");
    Ok(Outcome::Ok)
}

fn export(ctx: &mut Ctx) -> Result<Outcome> {
    let name = ctx.raw.name.clone();
    let problem = ctx.raw.to_json_string()?;
    ctx.write(&format!("{name}.json"), &problem)?;
    if let Some(spec) = ctx.spec.clone() {
        ctx.json(&format!("{name}_spec.json"), &spec)?;
    }
    println!("wrote {}", ctx.cfg.out.join(format!("{name}.json")).display());
    Ok(Outcome::Ok)
}
