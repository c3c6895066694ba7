//! Independent probes of the solver stack: finite-difference gradients,
//! Fréchet and tangent remainders, Lipschitz ratios, separation, discrete
//! mass balance, a hand-discretized continuous adjoint, and self-convergence.
//!
//! None of the oracles here touch the adjoint path they check, except where
//! a comparison against it is the point of the probe.

use alloc::vec;
use alloc::vec::Vec;

use crate::banded::BandedMatrix;
use crate::cost::source_of_states;
use crate::grid::{dot, integrate, Domain, Field};
use crate::potentials::{potential_eval, PotentialSpec};
use crate::problem::ControlProblem;
use crate::sensitivity::{solve_linearized, Direction};
use crate::state::{ControlField, Model, StateSnapshot, StateTrajectory};
use crate::{Error, Result};

/// Default central-difference step, scaled by the control magnitude.
pub fn default_fd_step(controls: &ControlField) -> f64 {
    1e-5 * (1.0 + controls.max_abs())
}

/// `(J(c + s·d) − J(c − s·d)) / 2s` from two forward solves.
pub fn fd_gradient(problem: &ControlProblem, controls: &ControlField, direction: &Direction, fd_step: f64) -> Result<f64> {
    let plus = problem.reduced_cost(&controls.axpy(fd_step, direction))?;
    let minus = problem.reduced_cost(&controls.axpy(-fd_step, direction))?;
    Ok((plus - minus) / (2.0 * fd_step))
}

/// One gradient-check sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSample {
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares `⟨∇J, d⟩` against [`fd_gradient`] for each direction.
pub fn gradient_check(
    problem: &ControlProblem,
    controls: &ControlField,
    directions: &[Direction],
    fd_step: f64,
) -> Result<Vec<GradientSample>> {
    let eval = problem.cost_and_gradient(controls)?;
    directions
        .iter()
        .map(|d| {
            let analytic = eval.gradient.plain_dot(d);
            let finite_difference = fd_gradient(problem, controls, d, fd_step)?;
            Ok(GradientSample { analytic, finite_difference, relative_error: relative_error(analytic, finite_difference) })
        })
        .collect()
}

/// Control perturbation with entries uniform in `[−1, 1]`.
pub fn random_direction(domain: &Domain, steps: usize, seed: u64) -> Direction {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut d = ControlField::zeros(domain, steps);
    for f in d.u.iter_mut().chain(d.w.iter_mut()) {
        f.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    d
}

fn l2_sq(f: &Field) -> f64 {
    dot(f.values(), f.values()) * f.domain().cell_volume()
}

fn h1_sq(model: &Model, f: &Field) -> f64 {
    let lf = model.laplacian.apply(f);
    l2_sq(f) - dot(f.values(), lf.values()) * f.domain().cell_volume()
}

/// Discrete norm of a trajectory in the space where the control-to-state map
/// is differentiable: `C⁰(H) ∩ L²(V)` for `μ` and `σ`, `H¹(H) ∩ L^∞(V)` for `φ`.
///
/// `levels` holds levels `0..=N` of a state difference.
pub fn trajectory_norm(model: &Model, levels: &[StateSnapshot]) -> f64 {
    let tau = model.tau();
    let sup_l2 = |get: fn(&StateSnapshot) -> &Field| levels.iter().map(|s| libm::sqrt(l2_sq(get(s)))).fold(0.0, f64::max);
    let int_h1 = |get: fn(&StateSnapshot) -> &Field| libm::sqrt(levels[1..].iter().map(|s| tau * h1_sq(model, get(s))).sum());
    let mu = sup_l2(|s| &s.mu) + int_h1(|s| &s.mu);
    let sigma = sup_l2(|s| &s.sigma) + int_h1(|s| &s.sigma);
    let mut h1h = 0.0;
    for w in levels.windows(2) {
        let rate = w[1].phi.zip_map(&w[0].phi, |a, b| (a - b) / tau);
        h1h += tau * (l2_sq(&rate) + l2_sq(&w[1].phi));
    }
    let sup_v = levels.iter().map(|s| libm::sqrt(h1_sq(model, &s.phi))).fold(0.0, f64::max);
    mu + libm::sqrt(h1h) + sup_v + sigma
}

fn combine(a: &[StateSnapshot], b: &[StateSnapshot], c: Option<(&[StateSnapshot], f64)>, sb: f64) -> Vec<StateSnapshot> {
    let comb = |x: &Field, y: &Field, z: Option<(&Field, f64)>| {
        let mut out = x.zip_map(y, |p, q| p + sb * q);
        if let Some((z, s)) = z {
            out = out.zip_map(z, |p, q| p + s * q);
        }
        out
    };
    (0..a.len())
        .map(|n| {
            let cz = c.map(|(l, s)| (&l[n], s));
            StateSnapshot {
                mu: comb(&a[n].mu, &b[n].mu, cz.map(|(l, s)| (&l.mu, s))),
                phi: comb(&a[n].phi, &b[n].phi, cz.map(|(l, s)| (&l.phi, s))),
                sigma: comb(&a[n].sigma, &b[n].sigma, cz.map(|(l, s)| (&l.sigma, s))),
            }
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| libm::log(*v)).collect();
    let ly: Vec<f64> = y.iter().map(|v| libm::log(*v)).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Remainder sizes against the perturbation size, with their fitted order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderProbe {
    pub lambdas: Vec<f64>,
    pub values: Vec<f64>,
    /// Log-log slope; NaN when any value is zero.
    pub slope: f64,
    /// Whether the values decrease strictly with `λ`.
    pub monotone: bool,
}

impl OrderProbe {
    fn new(lambdas: &[f64], values: Vec<f64>) -> Self {
        let monotone = values.windows(2).zip(lambdas.windows(2)).all(|(v, l)| (l[1] < l[0]) == (v[1] < v[0]));
        let slope = if values.iter().all(|&v| v > 0.0) { loglog_slope(lambdas, &values) } else { f64::NAN };
        OrderProbe { lambdas: lambdas.to_vec(), values, slope, monotone }
    }
}

/// `ρ(λ) = ‖S(c + λd) − S(c) − λ·DS(c)d‖`, expected `O(λ²)`.
pub fn frechet_order_probe(
    problem: &ControlProblem,
    controls: &ControlField,
    direction: &Direction,
    lambdas: &[f64],
) -> Result<OrderProbe> {
    let base = problem.solve(controls)?;
    let lin = solve_linearized(&base, direction)?;
    let mut values = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        let pert = problem.solve(&controls.axpy(lam, direction))?;
        let rem = combine(pert.snapshots(), base.snapshots(), Some((&lin.levels, -lam)), -1.0);
        values.push(trajectory_norm(&problem.model, &rem));
    }
    Ok(OrderProbe::new(lambdas, values))
}

/// `‖(S(c + λd) − S(c))/λ − DS(c)d‖`, expected `O(λ)`.
pub fn tangent_consistency_probe(
    problem: &ControlProblem,
    controls: &ControlField,
    direction: &Direction,
    lambdas: &[f64],
) -> Result<OrderProbe> {
    let base = problem.solve(controls)?;
    let lin = solve_linearized(&base, direction)?;
    let mut values = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        let pert = problem.solve(&controls.axpy(lam, direction))?;
        let quotient: Vec<StateSnapshot> = combine(pert.snapshots(), base.snapshots(), None, -1.0)
            .into_iter()
            .map(|s| StateSnapshot { mu: s.mu.map(|v| v / lam), phi: s.phi.map(|v| v / lam), sigma: s.sigma.map(|v| v / lam) })
            .collect();
        let err = combine(&quotient, &lin.levels, None, -1.0);
        values.push(trajectory_norm(&problem.model, &err));
    }
    Ok(OrderProbe::new(lambdas, values))
}

/// `‖S(c₁) − S(c₂)‖ / ‖c₁ − c₂‖` for each pair, trajectory norm over the
/// weighted `L²(Q)` control norm.
pub fn lipschitz_probe(problem: &ControlProblem, pairs: &[(ControlField, ControlField)]) -> Result<Vec<f64>> {
    let tau = problem.model.tau();
    pairs
        .iter()
        .map(|(a, b)| {
            let dc = a.axpy(-1.0, b).weighted_norm(tau);
            if dc == 0.0 {
                return Err(Error::IdenticalPair);
            }
            let (sa, sb) = (problem.solve(a)?, problem.solve(b)?);
            let diff = combine(sa.snapshots(), sb.snapshots(), None, -1.0);
            Ok(trajectory_norm(&problem.model, &diff) / dc)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationReport {
    pub min_phi: f64,
    pub max_phi: f64,
    /// `min φ − r₋`; infinite when the potential has no barrier.
    pub margin_low: f64,
    /// `r₊ − max φ`.
    pub margin_high: f64,
    /// False for the regular potential, where separation is not defined.
    pub applicable: bool,
}

pub fn separation_report(traj: &StateTrajectory) -> SeparationReport {
    separation_of(traj.snapshots(), &traj.model().potential)
}

pub fn separation_of(levels: &[StateSnapshot], potential: &PotentialSpec) -> SeparationReport {
    let min_phi = levels.iter().map(|s| s.phi.min()).fold(f64::INFINITY, f64::min);
    let max_phi = levels.iter().map(|s| s.phi.max()).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = potential.effective_domain();
    SeparationReport { min_phi, max_phi, margin_low: min_phi - lo, margin_high: hi - max_phi, applicable: potential.is_singular() }
}

/// Per-step residuals of the two integrated balance laws, with the scale
/// (`1 + Σ ∫|term|`) each is measured against. Entry `n − 1` is step `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MassReport {
    pub sigma: Vec<f64>,
    pub sigma_scale: Vec<f64>,
    pub combined: Vec<f64>,
    pub combined_scale: Vec<f64>,
}

impl MassReport {
    /// Largest `residual / scale` over both series.
    pub fn max_relative(&self) -> f64 {
        let rel = |r: &[f64], s: &[f64]| r.iter().zip(s).map(|(a, b)| a / b).fold(0.0, f64::max);
        rel(&self.sigma, &self.sigma_scale).max(rel(&self.combined, &self.combined_scale))
    }
}

pub fn mass_identity_residuals(traj: &StateTrajectory) -> MassReport {
    mass_identity_of(traj.model(), traj.controls(), traj.snapshots())
}

fn abs_integral(f: &Field) -> f64 {
    f.values().iter().map(|v| v.abs()).sum::<f64>() * f.domain().cell_volume()
}

/// Mass balance of an arbitrary level sequence under `model` and `controls`.
pub fn mass_identity_of(model: &Model, controls: &ControlField, levels: &[StateSnapshot]) -> MassReport {
    let p = &model.params;
    let tau = model.tau();
    let h = model.h;
    let lap = |f: &Field| model.laplacian.apply(f);
    let mut rep = MassReport { sigma: vec![], sigma_scale: vec![], combined: vec![], combined_scale: vec![] };
    for (k, w) in levels.windows(2).enumerate() {
        let (old, new) = (&w[0], &w[1]);
        let hn = new.phi.map(|v| h.eval(v, 0));

        let rate = new.sigma.zip_map(&old.sigma, |a, b| (a - b) / tau);
        let supply = new.sigma.map(|s| p.b * (p.sigma_s - s));
        let uptake = new.sigma.zip_map(&hn, |s, hv| p.d * s * hv);
        let diffusion = lap(&new.sigma).zip_map(&lap(&new.phi), |ls, lp| ls - p.chi * lp);
        let terms = [&rate, &supply, &uptake, &diffusion, &controls.w[k]];
        rep.sigma.push((integrate(&rate) - integrate(&supply) + integrate(&uptake) - integrate(&controls.w[k])).abs());
        rep.sigma_scale.push(1.0 + terms.iter().map(|f| abs_integral(f)).sum::<f64>());

        let rate = Field::from_values(
            &model.domain,
            (0..model.domain.len())
                .map(|i| {
                    (p.alpha * (new.mu.values()[i] - old.mu.values()[i]) + new.phi.values()[i] - old.phi.values()[i]) / tau
                })
                .collect(),
        )
        .expect("finite rates");
        let source = Field::from_values(
            &model.domain,
            (0..model.domain.len())
                .map(|i| (p.p * new.sigma.values()[i] - p.a - controls.u[k].values()[i]) * hn.values()[i])
                .collect(),
        )
        .expect("finite sources");
        rep.combined.push((integrate(&rate) - integrate(&source)).abs());
        rep.combined_scale.push(1.0 + abs_integral(&rate) + abs_integral(&source) + abs_integral(&lap(&new.mu)));
    }
    rep
}

/// Gradient of the reduced cost from a direct backward-Euler discretization
/// of the continuous adjoint system, in density form (`−h q + γ₅u`, `r + γ₆w`).
pub fn continuous_adjoint_gradient(problem: &ControlProblem, traj: &StateTrajectory) -> Result<ControlField> {
    let model = &problem.model;
    let prm = model.params;
    let d = model.domain;
    let n = d.len();
    let steps = traj.steps();
    let tau = model.tau();
    let src = source_of_states(traj.snapshots(), &problem.cost, tau)?;
    let g = &problem.cost.gammas;
    let hfun = model.h;
    let kl = 3 * model.laplacian.bandwidth() + 2;

    // final conditions
    let last = traj.terminal();
    let mut q = vec![0.0; n];
    let mut p: Vec<f64> = last.phi.values().iter().zip(problem.cost.phi_omega.values()).map(|(a, b)| g[0] * (a - b) / prm.beta).collect();
    let mut r: Vec<f64> = last.sigma.values().iter().zip(problem.cost.sigma_omega.values()).map(|(a, b)| g[2] * (a - b)).collect();
    let mut levels = vec![(Vec::new(), Vec::new(), Vec::new()); steps + 1];
    levels[steps] = (q.clone(), p.clone(), r.clone());

    for m in (1..steps).rev() {
        let st = traj.snapshot(m);
        let u = &traj.controls().u[m - 1];
        let mut a = BandedMatrix::zeros(3 * n, kl, kl);
        let mut rhs = vec![0.0; 3 * n];
        for i in 0..n {
            let (phi, sig) = (st.phi.values()[i], st.sigma.values()[i]);
            let (hv, hp) = (hfun.eval(phi, 0), hfun.eval(phi, 1));
            let f2 = potential_eval(&model.potential, phi, 2)?;
            let (iq, ip, ir) = (3 * i, 3 * i + 1, 3 * i + 2);
            // −α∂ₜq − Δq − p = 0
            a.add(iq, iq, prm.alpha / tau);
            a.add(iq, ip, -1.0);
            // −∂ₜq − β∂ₜp − Δp + χΔr + F″p − (Pσ − A − u)h′q + Dσh′r = γ₂(φ − φ_Q)
            a.add(ip, iq, 1.0 / tau - (prm.p * sig - prm.a - u.values()[i]) * hp);
            a.add(ip, ip, prm.beta / tau + f2);
            a.add(ip, ir, prm.d * sig * hp);
            // −∂ₜr − Δr + Br + Dh r − χp − Ph q = γ₄(σ − σ_Q)
            a.add(ir, ir, 1.0 / tau + prm.b + prm.d * hv);
            a.add(ir, ip, -prm.chi);
            a.add(ir, iq, -prm.p * hv);
            for (j, lij) in model.laplacian.row(i) {
                a.add(iq, 3 * j, -lij);
                a.add(ip, 3 * j + 1, -lij);
                a.add(ip, 3 * j + 2, prm.chi * lij);
                a.add(ir, 3 * j + 2, -lij);
            }
            rhs[iq] = prm.alpha * q[i] / tau;
            rhs[ip] = (q[i] + prm.beta * p[i]) / tau + src.phi[m - 1].values()[i] / tau;
            rhs[ir] = r[i] / tau + src.sigma[m - 1].values()[i] / tau;
        }
        a.factor()?.solve_in_place(&mut rhs);
        q = rhs.iter().step_by(3).copied().collect();
        p = rhs.iter().skip(1).step_by(3).copied().collect();
        r = rhs.iter().skip(2).step_by(3).copied().collect();
        levels[m] = (q.clone(), p.clone(), r.clone());
    }

    let ctl = traj.controls();
    let mut grad = ControlField::zeros(&d, steps);
    for k in 0..steps {
        let (q, _, r) = &levels[k + 1];
        let phi = traj.snapshot(k + 1).phi.values();
        for i in 0..n {
            grad.u[k].values_mut()[i] = -hfun.eval(phi[i], 0) * q[i] + g[4] * ctl.u[k].values()[i];
            grad.w[k].values_mut()[i] = r[i] + g[5] * ctl.w[k].values()[i];
        }
    }
    Ok(grad)
}

/// Weighted `L²(Q)` distance between the continuous-adjoint gradient and the
/// exact discrete gradient (both as densities).
pub fn adjoint_gradient_deviation(problem: &ControlProblem, controls: &ControlField) -> Result<f64> {
    let eval = problem.cost_and_gradient(controls)?;
    let cont = continuous_adjoint_gradient(problem, &eval.trajectory)?;
    let disc = eval.gradient.scale(1.0 / problem.entry_weight());
    Ok(disc.axpy(-1.0, &cont).weighted_norm(problem.model.tau()))
}

/// A quantity measured along a refinement sequence, with the observed order
/// between consecutive entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementStudy {
    pub resolutions: Vec<usize>,
    pub values: Vec<f64>,
    pub orders: Vec<f64>,
}

impl RefinementStudy {
    fn new(resolutions: Vec<usize>, values: Vec<f64>) -> Self {
        let orders = values
            .windows(2)
            .zip(resolutions.windows(2))
            .map(|(v, r)| libm::log(v[0] / v[1]) / libm::log(r[1] as f64 / r[0] as f64))
            .collect();
        RefinementStudy { resolutions, values, orders }
    }

    pub fn min_order(&self) -> f64 {
        self.orders.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Gradient deviation under time refinement. `build(steps)` returns the
/// problem and controls at that resolution.
pub fn continuous_adjoint_crosscheck<F>(build: F, steps: &[usize]) -> Result<RefinementStudy>
where
    F: Fn(usize) -> Result<(ControlProblem, ControlField)>,
{
    let values = steps
        .iter()
        .map(|&s| {
            let (prob, c) = build(s)?;
            adjoint_gradient_deviation(&prob, &c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RefinementStudy::new(steps.to_vec(), values))
}

fn terminal_distance(a: &StateSnapshot, b: &StateSnapshot) -> f64 {
    libm::sqrt(l2_sq(&a.mu.zip_map(&b.mu, |x, y| x - y)) + l2_sq(&a.phi.zip_map(&b.phi, |x, y| x - y)) + l2_sq(&a.sigma.zip_map(&b.sigma, |x, y| x - y)))
}

/// Time self-convergence: terminal-state differences between `N`, `2N`,
/// `4N` steps. `build(steps)` returns the problem and controls.
pub fn time_self_convergence<F>(build: F, base_steps: usize) -> Result<RefinementStudy>
where
    F: Fn(usize) -> Result<(ControlProblem, ControlField)>,
{
    let runs = [1, 2, 4]
        .iter()
        .map(|m| {
            let (prob, c) = build(m * base_steps)?;
            Ok(prob.solve(&c)?.terminal().clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let values = vec![terminal_distance(&runs[0], &runs[1]), terminal_distance(&runs[1], &runs[2])];
    Ok(RefinementStudy::new(vec![base_steps, 2 * base_steps], values))
}

/// Cell-average restriction onto the grid with half as many cells per axis.
pub fn restrict(fine: &Field, coarse: &Domain) -> Result<Field> {
    let fd = fine.domain();
    if fd.dim() != coarse.dim() || fd.cells().iter().zip(coarse.cells()).any(|(f, c)| *f != 2 * c) {
        return Err(Error::DomainMismatch);
    }
    let (fnx, cnx) = (fd.cells()[0], coarse.cells()[0]);
    let at = |x: usize, y: usize| fine.values()[y * fnx + x];
    let values = (0..coarse.len())
        .map(|i| {
            let (ix, iy) = (i % cnx, i / cnx);
            if coarse.dim() == 1 {
                0.5 * (at(2 * ix, 0) + at(2 * ix + 1, 0))
            } else {
                0.25 * (at(2 * ix, 2 * iy) + at(2 * ix + 1, 2 * iy) + at(2 * ix, 2 * iy + 1) + at(2 * ix + 1, 2 * iy + 1))
            }
        })
        .collect();
    Field::from_values(coarse, values)
}

fn restrict_snapshot(s: &StateSnapshot, coarse: &Domain) -> Result<StateSnapshot> {
    Ok(StateSnapshot { mu: restrict(&s.mu, coarse)?, phi: restrict(&s.phi, coarse)?, sigma: restrict(&s.sigma, coarse)? })
}

/// Space self-convergence: terminal states on `n`, `2n`, `4n` cells per
/// axis, compared on the coarsest grid after cell-average restriction.
/// `build(cells)` returns the problem and controls.
pub fn space_self_convergence<F>(build: F, base_cells: usize) -> Result<RefinementStudy>
where
    F: Fn(usize) -> Result<(ControlProblem, ControlField)>,
{
    let mut terminals = Vec::new();
    let mut domains = Vec::new();
    for m in [1, 2, 4] {
        let (prob, c) = build(m * base_cells)?;
        domains.push(prob.model.domain);
        terminals.push(prob.solve(&c)?.terminal().clone());
    }
    let mid = restrict_snapshot(&terminals[1], &domains[0])?;
    let fine = restrict_snapshot(&restrict_snapshot(&terminals[2], &domains[1])?, &domains[0])?;
    let values = vec![terminal_distance(&terminals[0], &mid), terminal_distance(&mid, &fine)];
    Ok(RefinementStudy::new(vec![base_cells, 2 * base_cells], values))
}
