//! The reduced optimal control problem `c ↦ J(S(c), c)`.

use crate::cost::{evaluate_cost, reduced_gradient, CostSpec};
use crate::sensitivity::{solve_adjoint, AdjTrajectory};
use crate::state::{solve_state, ControlField, Model, StateSnapshot, StateTrajectory};
use crate::Result;

/// Model, initial data and cost: everything but the controls.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProblem {
    pub model: Model,
    pub initial: StateSnapshot,
    pub cost: CostSpec,
}

/// Cost, gradient and the trajectories they were computed from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cost: f64,
    /// Plain gradient (`τ·|cell|` weights included).
    pub gradient: ControlField,
    pub trajectory: StateTrajectory,
    pub adjoint: AdjTrajectory,
}

impl ControlProblem {
    pub fn new(model: Model, initial: StateSnapshot, cost: CostSpec) -> Result<Self> {
        initial.check_domain(&model.domain)?;
        cost.validate(&model.domain, model.time.steps)?;
        Ok(ControlProblem { model, initial, cost })
    }

    pub fn steps(&self) -> usize {
        self.model.time.steps
    }

    /// `τ·|cell|`, the weight of one control entry.
    pub fn entry_weight(&self) -> f64 {
        self.model.tau() * self.model.domain.cell_volume()
    }

    pub fn solve(&self, controls: &ControlField) -> Result<StateTrajectory> {
        solve_state(&self.model, controls, &self.initial)
    }

    pub fn reduced_cost(&self, controls: &ControlField) -> Result<f64> {
        evaluate_cost(&self.solve(controls)?, controls, &self.cost)
    }

    pub fn cost_and_gradient(&self, controls: &ControlField) -> Result<Evaluation> {
        let trajectory = self.solve(controls)?;
        let cost = evaluate_cost(&trajectory, controls, &self.cost)?;
        let adjoint = solve_adjoint(&trajectory, &self.cost)?;
        let gradient = reduced_gradient(&trajectory, &adjoint, controls, &self.cost)?;
        Ok(Evaluation { cost, gradient, trajectory, adjoint })
    }
}
