//! Built-in worked examples with reference values and recommended
//! discretizations.

use serde::{Deserialize, Serialize};

use crate::problem::{ControlPoint, ControlProblem, Cost, Dynamics, Monomial, StateBox};
use crate::{Error, Result};

pub const NAMES: [&str; 5] = ["ex1", "ex2", "ex3", "ex4", "ex5"];

/// Where a reference number comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Stated for this example in the literature.
    Stated,
    /// Follows in closed form from the shipped data.
    Analytic,
    /// Recorded from an earlier run of this toolkit (regression value).
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValue {
    pub quantity: String,
    pub value: f64,
    pub origin: Origin,
    pub tolerance: f64,
}

/// Default discretization for the example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommended {
    pub cells_per_axis: Vec<usize>,
    pub step: f64,
    pub horizon: f64,
    pub m_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub beam_width: usize,
    pub restarts: usize,
}

/// Which standing hypotheses hold for the example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisFlags {
    /// Lipschitz and linear-growth bounds on `g` with the declared constants.
    pub growth_lipschitz: bool,
    /// Inner-product nonexpansivity.
    pub scalar_nonexpansive: bool,
    /// Distance-like nonexpansivity, with the metric that certifies it.
    pub delta_nonexpansive: Option<String>,
    pub cost_continuous: bool,
    pub uniform_value: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleSpec {
    pub name: String,
    pub description: String,
    pub problem: ControlProblem,
    pub reference_values: Vec<ReferenceValue>,
    pub recommended: Recommended,
    pub hypothesis_flags: HypothesisFlags,
}

impl ExampleSpec {
    pub fn reference(&self, quantity: &str) -> Option<&ReferenceValue> {
        self.reference_values.iter().find(|r| r.quantity == quantity)
    }
}

fn reference(quantity: &str, value: f64, origin: Origin, tolerance: f64) -> ReferenceValue {
    ReferenceValue {
        quantity: quantity.into(),
        value,
        origin,
        tolerance,
    }
}

fn points(values: &[f64]) -> Vec<ControlPoint> {
    values.iter().map(|&v| ControlPoint(vec![v])).collect()
}

/// `h(y) = (1 + y_x) / 2` on the box `[-1.25, 1.25]^2`.
fn half_shifted_x() -> Cost {
    Cost::Polynomial {
        terms: vec![
            Monomial::new(0.5, vec![], vec![]),
            Monomial::new(0.5, vec![1], vec![]),
        ],
    }
}

pub fn builtin(name: &str) -> Result<ExampleSpec> {
    match name {
        "ex1" => Ok(ex1()),
        "ex2" => Ok(ex2()),
        "ex3" => Ok(ex3_with_dim(1)),
        "ex4" => Ok(ex4()),
        "ex5" => Ok(ex5()),
        other => Err(Error::UnknownExample(other.into())),
    }
}

fn ex1() -> ExampleSpec {
    ExampleSpec {
        name: "ex1".into(),
        description: "rotation g(y) = iy with no control freedom; the limit value is the circle average of h".into(),
        problem: ControlProblem {
            name: "ex1".into(),
            dim: 2,
            dynamics: Dynamics::Rotation,
            cost: half_shifted_x(),
            codebook: points(&[0.0]),
            y0: vec![1.0, 0.0],
            lipschitz_l: 1.0,
            growth_a: 1.0,
            cost_bounds: (-0.125, 1.125),
            state_box: StateBox::cube(2, -1.25, 1.25),
        },
        reference_values: vec![reference("limit_value", 0.5, Origin::Analytic, 0.02)],
        recommended: Recommended {
            cells_per_axis: vec![100, 100],
            step: 0.01,
            horizon: 100.0,
            m_grid: vec![0.0, 1.0, 2.0, 4.0],
            t_grid: vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0],
            beam_width: 4,
            restarts: 0,
        },
        hypothesis_flags: HypothesisFlags {
            growth_lipschitz: true,
            scalar_nonexpansive: true,
            delta_nonexpansive: Some("squared_euclidean".into()),
            cost_continuous: true,
            uniform_value: true,
        },
    }
}

fn ex2() -> ExampleSpec {
    ExampleSpec {
        name: "ex2".into(),
        description: "rotation at controlled speed g(y, u) = iyu, u sampled from [0, 1]".into(),
        problem: ControlProblem {
            name: "ex2".into(),
            dim: 2,
            dynamics: Dynamics::ScaledRotation,
            cost: half_shifted_x(),
            codebook: points(&[0.0, 0.25, 0.5, 0.75, 1.0]),
            y0: vec![1.0, 0.0],
            lipschitz_l: 1.0,
            growth_a: 1.0,
            cost_bounds: (-0.125, 1.125),
            state_box: StateBox::cube(2, -1.25, 1.25),
        },
        reference_values: vec![],
        recommended: Recommended {
            cells_per_axis: vec![80, 80],
            step: 0.05,
            horizon: 50.0,
            m_grid: vec![0.0, 1.0, 2.0, 5.0, 10.0],
            t_grid: vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0],
            beam_width: 16,
            restarts: 4,
        },
        hypothesis_flags: HypothesisFlags {
            growth_lipschitz: true,
            scalar_nonexpansive: true,
            delta_nonexpansive: Some("squared_euclidean".into()),
            cost_continuous: true,
            uniform_value: true,
        },
    }
}

/// The contraction `g(y, u) = -y + u` in dimension `dim`, controls at the
/// vertices of `[-1, 1]^dim` plus the origin, `h(y) = min(|y|, 1)`.
pub fn ex3_with_dim(dim: usize) -> ExampleSpec {
    assert!(dim >= 1);
    let mut codebook = Vec::with_capacity((1 << dim) + 1);
    for mask in 0..(1usize << dim) {
        codebook.push(ControlPoint(
            (0..dim).map(|a| if (mask >> a) & 1 == 1 { 1.0 } else { -1.0 }).collect(),
        ));
    }
    codebook.insert(codebook.len() / 2, ControlPoint(vec![0.0; dim]));
    ExampleSpec {
        name: "ex3".into(),
        description: "contraction g(y, u) = -y + u with h(y) = min(|y|, 1)".into(),
        problem: ControlProblem {
            name: "ex3".into(),
            dim,
            dynamics: Dynamics::AffineContraction,
            cost: Cost::ClippedNorm { cap: 1.0 },
            codebook,
            y0: vec![0.0; dim],
            lipschitz_l: 1.0,
            growth_a: (dim as f64).sqrt().max(1.0),
            cost_bounds: (0.0, 1.0),
            state_box: StateBox::cube(dim, -2.0, 2.0),
        },
        reference_values: vec![
            reference("v_star", 0.0, Origin::Analytic, 0.02),
            reference("limit_value", 0.0, Origin::Analytic, 0.02),
        ],
        recommended: Recommended {
            cells_per_axis: vec![200; dim],
            step: 0.1,
            horizon: 64.0,
            m_grid: vec![0.0, 1.0, 2.0, 4.0, 8.0],
            t_grid: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            beam_width: 16,
            restarts: 4,
        },
        hypothesis_flags: HypothesisFlags {
            growth_lipschitz: true,
            scalar_nonexpansive: true,
            delta_nonexpansive: Some("squared_euclidean".into()),
            cost_continuous: true,
            uniform_value: true,
        },
    }
}

fn ex4() -> ExampleSpec {
    ExampleSpec {
        name: "ex4".into(),
        description: "g(y, u) = (u(1 - y1), u^2(1 - y1)), h(y) = 1 - y1(1 - y2); limit value y2".into(),
        problem: ControlProblem {
            name: "ex4".into(),
            dim: 2,
            dynamics: Dynamics::SaturatingPair,
            cost: Cost::Polynomial {
                terms: vec![
                    Monomial::new(1.0, vec![], vec![]),
                    Monomial::new(-1.0, vec![1], vec![]),
                    Monomial::new(1.0, vec![1, 1], vec![]),
                ],
            },
            codebook: points(&[0.0, 0.025, 0.05, 0.075, 0.1, 0.15, 0.25, 0.5, 1.0]),
            y0: vec![0.0, 0.0],
            lipschitz_l: 1.5,
            growth_a: 1.5,
            cost_bounds: (0.0, 1.0),
            state_box: StateBox::cube(2, 0.0, 1.0),
        },
        reference_values: vec![
            reference("limit_value", 0.0, Origin::Stated, 0.05),
            reference("limit_value_at_0.5_0.25", 0.25, Origin::Stated, 0.05),
            reference("v_star", 0.0, Origin::Stated, 0.05),
        ],
        recommended: Recommended {
            cells_per_axis: vec![80, 80],
            step: 0.05,
            horizon: 200.0,
            m_grid: vec![0.0, 5.0, 10.0, 20.0, 40.0],
            t_grid: vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0],
            beam_width: 16,
            restarts: 4,
        },
        hypothesis_flags: HypothesisFlags {
            growth_lipschitz: true,
            scalar_nonexpansive: false,
            delta_nonexpansive: Some("l1".into()),
            cost_continuous: true,
            uniform_value: true,
        },
    }
}

fn ex5() -> ExampleSpec {
    ExampleSpec {
        name: "ex5".into(),
        description: "double integrator g(y, u) = (y2, u), cost 0 on the band y1 in [1, 2] and 1 elsewhere; no uniform value".into(),
        problem: ControlProblem {
            name: "ex5".into(),
            dim: 2,
            dynamics: Dynamics::DoubleIntegrator,
            cost: Cost::Band {
                axis: 0,
                lo: 1.0,
                hi: 2.0,
                inside: 0.0,
                outside: 1.0,
            },
            codebook: points(&[0.0, 0.25, 0.5, 0.75, 1.0]),
            y0: vec![0.0, 0.0],
            lipschitz_l: 1.0,
            growth_a: 1.0,
            cost_bounds: (0.0, 1.0),
            state_box: StateBox::new(vec![0.0, 0.0], vec![12.0, 5.0]),
        },
        reference_values: vec![
            reference("finite_horizon_lower_bound", 0.5, Origin::Stated, 0.05),
            reference("limit_value", 0.5, Origin::Stated, 0.07),
            reference("v_star", 0.0, Origin::Stated, 0.07),
        ],
        recommended: Recommended {
            cells_per_axis: vec![120, 60],
            step: 0.05,
            horizon: 100.0,
            m_grid: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 40.0],
            t_grid: vec![1.0, 2.0, 5.0, 10.0, 20.0],
            beam_width: 16,
            restarts: 4,
        },
        hypothesis_flags: HypothesisFlags {
            growth_lipschitz: true,
            scalar_nonexpansive: false,
            delta_nonexpansive: None,
            cost_continuous: false,
            uniform_value: false,
        },
    }
}
