//! Effective run configuration: recommended defaults, overlaid by a JSON
//! config file, overlaid by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use limval_core::examples::{builtin, ExampleSpec, Recommended};
use limval_core::problem::ControlProblem;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemSource {
    Example(String),
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidateOpts {
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueOpts {
    /// State at which `V_t` is tabulated; `y0` when absent.
    pub at: Option<Vec<f64>>,
    /// Also write the whole grid at the final horizon.
    pub full: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxOpts {
    pub z: Option<Vec<f64>>,
    pub compute_w: bool,
    /// Horizons of `W_{m,n}`; `t_grid` when empty.
    pub n_grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOpts {
    /// `scalar` or `delta`.
    pub condition: String,
    /// Delta kind: squared_euclidean, euclidean, l1 or zero; the example's
    /// certified metric when absent.
    pub metric: Option<String>,
    pub random_pairs: usize,
    pub max_centers: usize,
    /// Reach horizon for the center pairs; no centers when zero.
    pub reach_m: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowOpts {
    pub y1: Option<Vec<f64>>,
    pub y2: Option<Vec<f64>>,
    /// Constant control index followed by the first state.
    pub control: usize,
    pub t: f64,
    pub metric: Option<String>,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOpts {
    pub alpha: f64,
    pub z: Option<Vec<f64>>,
    /// Acceptance slack; `tau_disc` when absent.
    pub slack: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: ProblemSource,
    pub cells_per_axis: Vec<usize>,
    pub step: f64,
    pub horizon: f64,
    pub m_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub beam_width: usize,
    pub restarts: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub validate: ValidateOpts,
    pub value: ValueOpts,
    pub aux: AuxOpts,
    pub check: CheckOpts,
    pub shadow: ShadowOpts,
    pub synth: SynthOpts,
}

/// Defaults for a problem file without recommendations.
fn generic_recommended(p: &ControlProblem) -> Recommended {
    Recommended {
        cells_per_axis: vec![if p.dim == 1 { 200 } else { 40 }; p.dim],
        step: 0.05,
        horizon: 20.0,
        m_grid: vec![0.0, 1.0, 2.0, 5.0],
        t_grid: vec![1.0, 2.0, 5.0, 10.0, 20.0],
        beam_width: 16,
        restarts: 4,
    }
}

impl RunConfig {
    fn defaults(source: ProblemSource, rec: &Recommended) -> Self {
        RunConfig {
            problem: source,
            cells_per_axis: rec.cells_per_axis.clone(),
            step: rec.step,
            horizon: rec.horizon,
            m_grid: rec.m_grid.clone(),
            t_grid: rec.t_grid.clone(),
            beam_width: rec.beam_width,
            restarts: rec.restarts,
            seed: 0,
            threads: None,
            out: PathBuf::from("limval-out"),
            validate: ValidateOpts { samples: 4000 },
            value: ValueOpts { at: None, full: false },
            aux: AuxOpts {
                z: None,
                compute_w: true,
                n_grid: vec![],
            },
            check: CheckOpts {
                condition: "scalar".into(),
                metric: None,
                random_pairs: 100,
                max_centers: 200,
                reach_m: 2.0,
                tolerance: 1e-9,
            },
            shadow: ShadowOpts {
                y1: None,
                y2: None,
                control: 0,
                t: 10.0,
                metric: None,
                tolerance: 1e-6,
            },
            synth: SynthOpts {
                alpha: 0.1,
                z: None,
                slack: None,
            },
        }
    }
}

/// Recursively replaces entries of `base` by those of `over`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub struct Loaded {
    pub config: RunConfig,
    pub spec: Option<ExampleSpec>,
    pub problem: ControlProblem,
}

/// Resolves the problem source and the defaults, then applies the config
/// file. Flag overrides are applied by the caller on `config`.
pub fn load(
    example: Option<&str>,
    problem: Option<&Path>,
    config_file: Option<&Path>,
) -> Result<Loaded> {
    let file: Option<Value> = match config_file {
        Some(path) => {
            let s = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            Some(serde_json::from_str(&s).with_context(|| format!("malformed config {}", path.display()))?)
        }
        None => None,
    };
    let source = match (example, problem) {
        (Some(_), Some(_)) => bail!("give either --example or --problem, not both"),
        (Some(name), None) => ProblemSource::Example(name.to_string()),
        (None, Some(path)) => ProblemSource::Path(path.to_path_buf()),
        (None, None) => match file.as_ref().and_then(|f| f.get("problem")) {
            Some(v) => serde_json::from_value(v.clone()).context("config field `problem` must be {\"example\": name} or {\"path\": file}")?,
            None => bail!("no problem given: pass --example <ex1..ex5>, --problem <file.json> or a config with a `problem` field"),
        },
    };
    let (spec, problem) = match &source {
        ProblemSource::Example(name) => {
            let spec = builtin(name).with_context(|| format!("known examples: {}", limval_core::examples::NAMES.join(", ")))?;
            let p = spec.problem.clone();
            (Some(spec), p)
        }
        ProblemSource::Path(path) => {
            let p = ControlProblem::load(path).with_context(|| format!("cannot load problem {}", path.display()))?;
            (None, p)
        }
    };
    let rec = spec.as_ref().map(|s| s.recommended.clone()).unwrap_or_else(|| generic_recommended(&problem));
    let mut value = serde_json::to_value(RunConfig::defaults(source.clone(), &rec))?;
    if let Some(mut f) = file {
        if let Value::Object(o) = &mut f {
            o.remove("problem");
        }
        merge(&mut value, f);
    }
    let mut config: RunConfig = serde_json::from_value(value).context("config does not match the run configuration schema")?;
    config.problem = source;
    Ok(Loaded { config, spec, problem })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults_and_keeps_the_rest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"step": 0.1, "synth": {"alpha": 0.2}}"#).unwrap();
        let l = load(Some("ex3"), None, Some(&path)).unwrap();
        assert_eq!(l.config.step, 0.1);
        assert_eq!(l.config.synth.alpha, 0.2);
        assert_eq!(l.config.synth.slack, None);
        assert_eq!(l.config.cells_per_axis, vec![200]);
    }

    #[test]
    fn problem_comes_from_the_file_when_no_flag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"problem": {"example": "ex4"}}"#).unwrap();
        let l = load(None, None, Some(&path)).unwrap();
        assert_eq!(l.config.problem, ProblemSource::Example("ex4".into()));
        assert!(load(None, None, None).is_err());
        assert!(load(Some("ex9"), None, None).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let l = load(Some("ex5"), None, None).unwrap();
        let s = serde_json::to_string(&l.config).unwrap();
        let back: RunConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, l.config);
    }
}
