//! Projected gradient descent over a box of admissible controls.
//!
//! Gradients arrive in plain form (entry weights `τ·|cell|` included). Steps
//! are taken along the density gradient `g/(τ·|cell|)`, which is the `L²(Q)`
//! Riesz representative, so step lengths do not depend on the grid.

use alloc::string::String;
use alloc::vec::Vec;

use crate::grid::Field;
use crate::problem::{ControlProblem, Evaluation};
use crate::sensitivity::AdjTrajectory;
use crate::state::{ControlField, StateTrajectory};
use crate::{Error, Result};

/// Pointwise bounds `u_lo ≤ u ≤ u_hi`, `w_lo ≤ w ≤ w_hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBox {
    pub lower: ControlField,
    pub upper: ControlField,
}

impl ControlBox {
    pub fn new(lower: ControlField, upper: ControlField) -> Result<Self> {
        if lower.steps() != upper.steps() {
            return Err(Error::ShapeMismatch(String::from("box bounds cover different step counts")));
        }
        let pairs = |a: &[Field], b: &[Field]| {
            a.iter().zip(b).all(|(x, y)| x.values().iter().zip(y.values()).all(|(l, h)| l <= h))
        };
        if lower.u.iter().any(|f| f.min() < 0.0) {
            return Err(Error::InvalidParameter { name: "u_lo", reason: String::from("must be nonnegative") });
        }
        if !pairs(&lower.u, &upper.u) {
            return Err(Error::InvalidParameter { name: "u_lo", reason: String::from("must not exceed u_hi") });
        }
        if !pairs(&lower.w, &upper.w) {
            return Err(Error::InvalidParameter { name: "w_lo", reason: String::from("must not exceed w_hi") });
        }
        Ok(ControlBox { lower, upper })
    }

    pub fn uniform(
        domain: &crate::grid::Domain,
        steps: usize,
        (u_lo, u_hi): (f64, f64),
        (w_lo, w_hi): (f64, f64),
    ) -> Result<Self> {
        Self::new(ControlField::constant(domain, steps, u_lo, w_lo), ControlField::constant(domain, steps, u_hi, w_hi))
    }

    pub fn midpoint(&self) -> ControlField {
        self.lower.axpy(1.0, &self.upper).scale(0.5)
    }

    /// `max |bound| + 1`, the radius of a ball containing the box. Informational.
    pub fn radius(&self) -> f64 {
        self.lower.max_abs().max(self.upper.max_abs()) + 1.0
    }
}

fn clamp_fields(x: &[Field], lo: &[Field], hi: &[Field]) -> Vec<Field> {
    x.iter().zip(lo).zip(hi).map(|((f, l), h)| f.zip_map(l, f64::max).zip_map(h, f64::min)).collect()
}

/// Pointwise clamp onto the box; the `L²` projection.
pub fn project_box(controls: &ControlField, bounds: &ControlBox) -> Result<ControlField> {
    let domain = *bounds.lower.u.first().map_or(controls.u[0].domain(), Field::domain);
    controls.check_shape(&domain, bounds.lower.steps())?;
    Ok(ControlField {
        u: clamp_fields(&controls.u, &bounds.lower.u, &bounds.upper.u),
        w: clamp_fields(&controls.w, &bounds.lower.w, &bounds.upper.w),
    })
}

/// `‖c − P(c − s·∇J)‖ / s` in the weighted `L²(Q)` norm, with `∇J` the density
/// gradient recovered from the plain one.
pub fn stationarity_measure(
    controls: &ControlField,
    gradient: &ControlField,
    bounds: &ControlBox,
    probe_step: f64,
    tau: f64,
) -> Result<f64> {
    let weight = tau * controls.u[0].domain().cell_volume();
    let trial = project_box(&controls.axpy(-probe_step / weight, gradient), bounds)?;
    Ok(controls.axpy(-1.0, &trial).weighted_norm(tau) / probe_step)
}

fn weighted_norm(fields: &[Field], tau: f64) -> f64 {
    let vol = fields.first().map_or(1.0, |f| f.domain().cell_volume());
    libm::sqrt(fields.iter().map(|f| crate::grid::dot(f.values(), f.values())).sum::<f64>() * tau * vol)
}

/// Weighted norms of `u − clamp(h(φ)q/γ₅)` and `w − clamp(−r/γ₆)`, with
/// `(φ, q, r)` taken at the levels paired with each control step.
pub fn clamp_characterization_residual(
    controls: &ControlField,
    adj: &AdjTrajectory,
    traj: &StateTrajectory,
    gammas: &[f64; 6],
    bounds: &ControlBox,
) -> Result<(f64, f64)> {
    let (g5, g6) = (gammas[4], gammas[5]);
    if g5 == 0.0 {
        return Err(Error::ZeroWeightRequested("gamma5"));
    }
    if g6 == 0.0 {
        return Err(Error::ZeroWeightRequested("gamma6"));
    }
    if adj.state_fingerprint() != traj.fingerprint() || controls != traj.controls() {
        return Err(Error::MismatchedTrajectory);
    }
    let h = traj.model().h;
    let mut du = Vec::with_capacity(controls.steps());
    let mut dw = Vec::with_capacity(controls.steps());
    for k in 0..controls.steps() {
        let lvl = &adj.levels[k];
        let phi = &traj.snapshot(k + 1).phi;
        let target_u = phi.zip_map(&lvl.q, |p, q| h.eval(p, 0) * q / g5);
        let target_w = lvl.r.map(|r| -r / g6);
        let cu = target_u.zip_map(&bounds.lower.u[k], f64::max).zip_map(&bounds.upper.u[k], f64::min);
        let cw = target_w.zip_map(&bounds.lower.w[k], f64::max).zip_map(&bounds.upper.w[k], f64::min);
        du.push(controls.u[k].zip_map(&cu, |a, b| a - b));
        dw.push(controls.w[k].zip_map(&cw, |a, b| a - b));
    }
    let tau = traj.model().tau();
    Ok((weighted_norm(&du, tau), weighted_norm(&dw, tau)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    Fixed,
    /// First Barzilai–Borwein quotient as the trial step, Armijo on top.
    BarzilaiBorwein,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub armijo_c1: f64,
    pub backtrack_factor: f64,
    pub initial_step: f64,
    pub stationarity_tol: f64,
    pub step_rule: StepRule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iters: 200,
            armijo_c1: 1e-4,
            backtrack_factor: 0.5,
            initial_step: 1.0,
            stationarity_tol: 1e-6,
            step_rule: StepRule::BarzilaiBorwein,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: &str| Err(Error::InvalidParameter { name, reason: String::from(reason) });
        if !(self.armijo_c1 > 0.0 && self.armijo_c1 < 0.5) {
            return bad("armijo_c1", "must lie in (0, 0.5)");
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return bad("backtrack_factor", "must lie in (0, 1)");
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return bad("initial_step", "must be positive");
        }
        if !(self.stationarity_tol > 0.0) {
            return bad("tol", "must be positive");
        }
        Ok(())
    }
}

/// One row of the iterate history. Iteration 0 is the starting point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateRecord {
    pub iter: usize,
    pub cost: f64,
    pub stationarity: f64,
    /// Accepted step length (0 for the starting point).
    pub step: f64,
    pub armijo_rejections: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Stationary,
    MaxIterations,
    /// Backtracking went below `1e−14` without satisfying Armijo; the report
    /// holds the last accepted iterate.
    LineSearchStall,
}

#[derive(Debug, Clone)]
pub struct OptimizationReport {
    pub history: Vec<IterateRecord>,
    pub termination: Termination,
    pub controls: ControlField,
    /// Evaluation at the final controls.
    pub last: Evaluation,
    pub stationarity: f64,
}

impl OptimizationReport {
    pub fn final_cost(&self) -> f64 {
        self.last.cost
    }

    pub fn trajectory_fingerprint(&self) -> u64 {
        self.last.trajectory.fingerprint()
    }
}

const MIN_STEP: f64 = 1e-14;

/// Projected gradient with Armijo backtracking along the projection arc.
///
/// Starts from `initial` (projected) or the box midpoint.
pub fn optimize(
    problem: &ControlProblem,
    bounds: &ControlBox,
    config: &OptimizerConfig,
    initial: Option<&ControlField>,
) -> Result<OptimizationReport> {
    config.validate()?;
    let tau = problem.model.tau();
    let weight = problem.entry_weight();
    let wrap = |iteration: usize| move |e: Error| Error::ForwardSolve { iteration, source: alloc::boxed::Box::new(e) };

    let start = match initial {
        Some(c) => project_box(c, bounds)?,
        None => bounds.midpoint(),
    };
    let mut eval = problem.cost_and_gradient(&start).map_err(wrap(0))?;
    let mut controls = start;
    let mut stat = stationarity_measure(&controls, &eval.gradient, bounds, 1.0, tau)?;
    let mut history =
        alloc::vec![IterateRecord { iter: 0, cost: eval.cost, stationarity: stat, step: 0.0, armijo_rejections: 0 }];
    let mut termination = Termination::MaxIterations;
    let mut prev: Option<(ControlField, ControlField)> = None;

    for iter in 1..=config.max_iters {
        if stat <= config.stationarity_tol {
            termination = Termination::Stationary;
            break;
        }
        let mut step = match (config.step_rule, &prev) {
            (StepRule::BarzilaiBorwein, Some((c_old, g_old))) => {
                let dc = controls.axpy(-1.0, c_old);
                let dg = eval.gradient.axpy(-1.0, g_old);
                // ⟨dc, dc⟩_w / ⟨dc, dg/w⟩_w in density units
                let num = dc.plain_dot(&dc) * weight;
                let den = dc.plain_dot(&dg);
                if den > 0.0 && (num / den).is_finite() {
                    (num / den).clamp(1e-10, 1e10)
                } else {
                    config.initial_step
                }
            }
            _ => config.initial_step,
        };
        let mut rejections = 0;
        let accepted = loop {
            let trial = project_box(&controls.axpy(-step / weight, &eval.gradient), bounds)?;
            let decrease = eval.gradient.plain_dot(&controls.axpy(-1.0, &trial));
            if decrease <= 0.0 {
                // the projected step no longer moves: stationary to roundoff
                break None;
            }
            let cand = problem.cost_and_gradient(&trial).map_err(wrap(iter))?;
            if cand.cost <= eval.cost - config.armijo_c1 * decrease && cand.cost < eval.cost {
                break Some((trial, cand));
            }
            rejections += 1;
            step *= config.backtrack_factor;
            if step < MIN_STEP {
                termination = Termination::LineSearchStall;
                break None;
            }
        };
        let Some((trial, cand)) = accepted else {
            if termination != Termination::LineSearchStall {
                termination = Termination::Stationary;
            }
            break;
        };
        prev = Some((core::mem::replace(&mut controls, trial), core::mem::replace(&mut eval, cand).gradient));
        stat = stationarity_measure(&controls, &eval.gradient, bounds, 1.0, tau)?;
        history.push(IterateRecord { iter, cost: eval.cost, stationarity: stat, step, armijo_rejections: rejections });
    }
    if termination == Termination::MaxIterations && stat <= config.stationarity_tol {
        termination = Termination::Stationary;
    }
    Ok(OptimizationReport { history, termination, controls, last: eval, stationarity: stat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostSpec;
    use crate::grid::build_domain;
    use crate::potentials::PotentialSpec;
    use crate::presets::FieldPreset;
    use crate::state::{Model, ModelParams, SolverOptions, StateSnapshot, TimeGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_box() -> (ControlBox, crate::grid::Domain) {
        let d = build_domain(1, &[1.0], &[2]).unwrap();
        (ControlBox::uniform(&d, 1, (0.0, 1.0), (-1.0, 1.0)).unwrap(), d)
    }

    #[test]
    fn projection_clamps_and_is_idempotent() {
        let d = build_domain(1, &[1.0], &[4]).unwrap();
        let b = ControlBox::uniform(&d, 2, (0.0, 1.0), (-1.0, 1.0)).unwrap();
        let c = ControlField::constant(&d, 2, 2.0, -3.0);
        let p = project_box(&c, &b).unwrap();
        assert!(p.u.iter().all(|f| f.values().iter().all(|&v| v == 1.0)));
        assert!(p.w.iter().all(|f| f.values().iter().all(|&v| v == -1.0)));
        assert_eq!(project_box(&p, &b).unwrap(), p);
    }

    #[test]
    fn projection_is_nonexpansive() {
        let d = build_domain(1, &[1.0], &[6]).unwrap();
        let b = ControlBox::uniform(&d, 3, (0.0, 1.0), (-1.0, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rand = |rng: &mut ChaCha8Rng| {
            let mut c = ControlField::zeros(&d, 3);
            for f in c.u.iter_mut().chain(c.w.iter_mut()) {
                f.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
            }
            c
        };
        for _ in 0..100 {
            let (x, y) = (rand(&mut rng), rand(&mut rng));
            let px = project_box(&x, &b).unwrap();
            let py = project_box(&y, &b).unwrap();
            assert!(px.axpy(-1.0, &py).weighted_norm(0.1) <= x.axpy(-1.0, &y).weighted_norm(0.1) + 1e-15);
        }
    }

    #[test]
    fn box_validation() {
        let d = build_domain(1, &[1.0], &[4]).unwrap();
        assert!(ControlBox::uniform(&d, 2, (-0.5, 1.0), (-1.0, 1.0)).is_err());
        assert!(ControlBox::uniform(&d, 2, (0.5, 0.2), (-1.0, 1.0)).is_err());
        assert!(ControlBox::uniform(&d, 2, (0.0, 1.0), (1.0, -1.0)).is_err());
        assert_eq!(ControlBox::uniform(&d, 2, (0.0, 1.0), (-1.0, 1.0)).unwrap().radius(), 2.0);
    }

    #[test]
    fn stationarity_of_hand_built_instance() {
        let (b, d) = small_box();
        let tau = 1.0;
        let w = tau * d.cell_volume();
        let c = ControlField::constant(&d, 1, 0.5, 0.0);
        // density gradient 0.2 in u, zero in w
        let g = ControlField::constant(&d, 1, 0.2 * w, 0.0);
        let m = stationarity_measure(&c, &g, &b, 1.0, tau).unwrap();
        assert!((m - 0.2 * libm::sqrt(d.volume())).abs() < 1e-15);
        assert_eq!(stationarity_measure(&c, &ControlField::zeros(&d, 1), &b, 1.0, tau).unwrap(), 0.0);
        // at the lower bound a positive gradient is absorbed by the projection
        let c0 = ControlField::constant(&d, 1, 0.0, 0.0);
        assert_eq!(stationarity_measure(&c0, &g, &b, 1.0, tau).unwrap(), 0.0);
    }

    fn tracking_problem(gammas: [f64; 6]) -> ControlProblem {
        let d = build_domain(1, &[1.0], &[16]).unwrap();
        let model =
            Model::new(d, ModelParams::default(), PotentialSpec::LOG_DEFAULT, TimeGrid::new(0.5, 10).unwrap(), SolverOptions::default())
                .unwrap();
        let init = StateSnapshot {
            mu: Field::zeros(&d),
            phi: FieldPreset::Cosine { amplitude: 0.9, offset: 0.0 }.to_field(&d),
            sigma: Field::constant(&d, 1.0),
        };
        ControlProblem::new(model, init, CostSpec::tracking(&d, 10, gammas, 0.0, 0.0)).unwrap()
    }

    #[test]
    fn pure_control_problem_lands_on_the_projected_origin() {
        let prob = tracking_problem([0.0, 0.0, 0.0, 0.0, 1e-2, 1e-2]);
        let b = ControlBox::uniform(&prob.model.domain, 10, (0.0, 1.0), (-1.0, 1.0)).unwrap();
        let rep = optimize(&prob, &b, &OptimizerConfig { stationarity_tol: 1e-10, ..Default::default() }, None).unwrap();
        assert_eq!(rep.termination, Termination::Stationary);
        assert!(rep.history.len() <= 4);
        assert!(rep.controls.max_abs() <= 1e-10);
        let (ru, rw) =
            clamp_characterization_residual(&rep.controls, &rep.last.adjoint, &rep.last.trajectory, &prob.cost.gammas, &b)
                .unwrap();
        assert!(ru <= 1e-10 && rw <= 1e-10);
    }

    #[test]
    fn descent_is_monotone_and_feasible() {
        let prob = tracking_problem([0.0, 1.0, 0.0, 1.0, 1e-2, 1e-2]);
        let b = ControlBox::uniform(&prob.model.domain, 10, (0.0, 1.0), (-1.0, 1.0)).unwrap();
        let cfg = OptimizerConfig { max_iters: 15, step_rule: StepRule::Fixed, ..Default::default() };
        let rep = optimize(&prob, &b, &cfg, None).unwrap();
        for w in rep.history.windows(2) {
            assert!(w[1].cost <= w[0].cost);
        }
        assert_eq!(project_box(&rep.controls, &b).unwrap(), rep.controls);
        assert!(rep.history.last().unwrap().stationarity < rep.history[0].stationarity);
    }

    #[test]
    fn clamp_residual_requires_weights_and_sees_nonstationary_points() {
        let prob = tracking_problem([0.0, 1.0, 0.0, 1.0, 1e-2, 1e-2]);
        let b = ControlBox::uniform(&prob.model.domain, 10, (0.0, 1.0), (-1.0, 1.0)).unwrap();
        let e = prob.cost_and_gradient(&b.midpoint()).unwrap();
        let (ru, rw) = clamp_characterization_residual(&b.midpoint(), &e.adjoint, &e.trajectory, &prob.cost.gammas, &b).unwrap();
        assert!(ru > 0.0 && rw >= 0.0);
        let mut g = prob.cost.gammas;
        g[5] = 0.0;
        assert_eq!(
            clamp_characterization_residual(&b.midpoint(), &e.adjoint, &e.trajectory, &g, &b).unwrap_err(),
            Error::ZeroWeightRequested("gamma6")
        );
    }
}
