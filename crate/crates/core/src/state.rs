//! Fully implicit (backward Euler) solver for the coupled state system.
//!
//! Unknowns are interleaved per cell as `(μ, φ, σ)`, so the Newton Jacobian
//! is banded with half-bandwidth `3·b + 2` where `b` is the Laplacian's
//! bandwidth. Each step is solved to a relative residual of `newton_tol`,
//! after which the Jacobian at the converged state is factored and kept:
//! the tangent and adjoint steppers in [`crate::sensitivity`] reuse it.

use alloc::borrow::Cow;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::banded::{BandedLu, BandedMatrix};
use crate::grid::{assemble_neumann_laplacian, integrate, Domain, Field, SparseOperator};
use crate::potentials::{potential_eval, PotentialSpec, ProliferationH};
use crate::{Error, Result};

/// Physical coefficients of the state system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    /// Relaxation of `μ`.
    pub alpha: f64,
    /// Viscous relaxation of `φ`.
    pub beta: f64,
    /// Chemotaxis coefficient.
    pub chi: f64,
    /// Proliferation rate.
    pub p: f64,
    /// Apoptosis rate.
    pub a: f64,
    /// Nutrient supply rate.
    pub b: f64,
    /// Nutrient consumption rate.
    pub d: f64,
    /// Nutrient level of the pre-existing vasculature.
    pub sigma_s: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [("alpha", self.alpha), ("beta", self.beta), ("chi", self.chi)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter { name, reason: format!("must be positive, got {v}") });
            }
        }
        let nonneg = [("P", self.p), ("A", self.a), ("B", self.b), ("D", self.d), ("sigma_s", self.sigma_s)];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter { name, reason: format!("must be nonnegative, got {v}") });
            }
        }
        Ok(())
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams { alpha: 1.0, beta: 1.0, chi: 0.5, p: 1.0, a: 0.5, b: 1.0, d: 1.0, sigma_s: 1.0 }
    }
}

/// Uniform partition of `[0, T]` into `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_final: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, steps: usize) -> Result<Self> {
        if !(t_final > 0.0) || !t_final.is_finite() {
            return Err(Error::InvalidParameter { name: "T", reason: format!("must be positive, got {t_final}") });
        }
        if steps == 0 {
            return Err(Error::InvalidParameter { name: "steps", reason: String::from("need at least one step") });
        }
        Ok(TimeGrid { t_final, steps })
    }

    pub fn tau(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn level_time(&self, n: usize) -> f64 {
        n as f64 * self.tau()
    }
}

/// Newton controls for the per-step nonlinear solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    pub max_halvings: usize,
    /// Newton iterates must keep `φ` this far inside a singular potential's domain.
    pub separation_margin: f64,
    /// Keep each step's factored Jacobian; otherwise rebuild on demand.
    pub store_factorizations: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            newton_tol: 1e-12,
            max_newton_iters: 25,
            max_halvings: 6,
            separation_margin: 1e-10,
            store_factorizations: true,
        }
    }
}

/// `(μ, φ, σ)` at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    pub mu: Field,
    pub phi: Field,
    pub sigma: Field,
}

impl StateSnapshot {
    pub fn zeros(domain: &Domain) -> Self {
        StateSnapshot { mu: Field::zeros(domain), phi: Field::zeros(domain), sigma: Field::zeros(domain) }
    }

    pub fn domain(&self) -> &Domain {
        self.mu.domain()
    }

    pub fn check_domain(&self, domain: &Domain) -> Result<()> {
        if self.mu.domain() != domain || self.phi.domain() != domain || self.sigma.domain() != domain {
            return Err(Error::DomainMismatch);
        }
        Ok(())
    }

    /// Interleaved `[μ₀, φ₀, σ₀, μ₁, …]`.
    pub fn to_interleaved(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.mu.len());
        for i in 0..self.mu.len() {
            out.extend_from_slice(&[self.mu.values()[i], self.phi.values()[i], self.sigma.values()[i]]);
        }
        out
    }

    pub fn from_interleaved(domain: &Domain, y: &[f64]) -> Self {
        let pick = |k: usize| {
            let mut f = Field::zeros(domain);
            for (i, v) in f.values_mut().iter_mut().enumerate() {
                *v = y[3 * i + k];
            }
            f
        };
        StateSnapshot { mu: pick(0), phi: pick(1), sigma: pick(2) }
    }
}

/// Distributed controls, piecewise constant in time: entry `n` acts on the
/// step from level `n` to level `n + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField {
    pub u: Vec<Field>,
    pub w: Vec<Field>,
}

impl ControlField {
    pub fn constant(domain: &Domain, steps: usize, u: f64, w: f64) -> Self {
        ControlField { u: vec![Field::constant(domain, u); steps], w: vec![Field::constant(domain, w); steps] }
    }

    pub fn zeros(domain: &Domain, steps: usize) -> Self {
        Self::constant(domain, steps, 0.0, 0.0)
    }

    pub fn steps(&self) -> usize {
        self.u.len()
    }

    pub fn check_shape(&self, domain: &Domain, steps: usize) -> Result<()> {
        if self.u.len() != steps || self.w.len() != steps {
            return Err(Error::ShapeMismatch(format!(
                "controls cover {}/{} steps, time grid has {steps}",
                self.u.len(),
                self.w.len()
            )));
        }
        if self.u.iter().chain(&self.w).any(|f| f.domain() != domain) {
            return Err(Error::DomainMismatch);
        }
        if self.u.iter().chain(&self.w).any(|f| f.values().iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidParameter { name: "controls", reason: String::from("non-finite entry") });
        }
        Ok(())
    }

    /// `self + s·other`.
    pub fn axpy(&self, s: f64, other: &ControlField) -> ControlField {
        let comb = |a: &[Field], b: &[Field]| -> Vec<Field> {
            a.iter().zip(b).map(|(x, y)| x.zip_map(y, |p, q| p + s * q)).collect()
        };
        ControlField { u: comb(&self.u, &other.u), w: comb(&self.w, &other.w) }
    }

    pub fn scale(&self, s: f64) -> ControlField {
        ControlField {
            u: self.u.iter().map(|f| f.map(|v| s * v)).collect(),
            w: self.w.iter().map(|f| f.map(|v| s * v)).collect(),
        }
    }

    /// Unweighted sum `Σ a·b` over all entries.
    pub fn plain_dot(&self, other: &ControlField) -> f64 {
        let d = |a: &[Field], b: &[Field]| -> f64 {
            a.iter().zip(b).map(|(x, y)| crate::grid::dot(x.values(), y.values())).sum()
        };
        d(&self.u, &other.u) + d(&self.w, &other.w)
    }

    /// Discrete `L²(Q)` norm with weights `τ·|cell|`.
    pub fn weighted_norm(&self, tau: f64) -> f64 {
        let vol = self.u.first().map_or(1.0, |f| f.domain().cell_volume());
        libm::sqrt(self.plain_dot(self) * tau * vol)
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().chain(&self.w).fold(0.0, |m, f| m.max(f.max_abs()))
    }
}

/// Everything a step needs besides the states and controls.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub domain: Domain,
    pub laplacian: SparseOperator,
    pub params: ModelParams,
    pub potential: PotentialSpec,
    pub h: ProliferationH,
    pub time: TimeGrid,
    pub options: SolverOptions,
}

impl Model {
    pub fn new(
        domain: Domain,
        params: ModelParams,
        potential: PotentialSpec,
        time: TimeGrid,
        options: SolverOptions,
    ) -> Result<Self> {
        params.validate()?;
        potential.validate()?;
        let time = TimeGrid::new(time.t_final, time.steps)?;
        if !(options.newton_tol > 0.0) {
            return Err(Error::InvalidParameter { name: "newton_tol", reason: String::from("must be positive") });
        }
        Ok(Model {
            laplacian: assemble_neumann_laplacian(&domain),
            domain,
            params,
            potential,
            h: ProliferationH,
            time,
            options,
        })
    }

    pub fn tau(&self) -> f64 {
        self.time.tau()
    }

    fn half_band(&self) -> usize {
        3 * self.laplacian.bandwidth() + 2
    }

    fn laplacian_norm(&self) -> f64 {
        (0..self.laplacian.rows())
            .map(|i| self.laplacian.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Magnitude of the linear terms in the residual, used as the roundoff floor.
    fn residual_scale(&self, y: &[f64]) -> f64 {
        let p = &self.params;
        let ymax = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        1.0 + ymax * ((1.0 + p.alpha + p.beta) / self.tau() + (1.0 + p.chi) * self.laplacian_norm())
    }

    fn check_separation(&self, phi: &[f64], step: usize) -> Result<()> {
        let (lo, hi) = self.potential.effective_domain();
        if !self.potential.is_singular() {
            return Ok(());
        }
        let m = self.options.separation_margin;
        if let Some((cell, &v)) = phi.iter().enumerate().find(|(_, &v)| !(v > lo + m && v < hi - m)) {
            return Err(Error::SeparationViolation { step, cell, value: v });
        }
        Ok(())
    }

    /// Interleaved residual `R(next; prev, u, w)`.
    pub(crate) fn residual_interleaved(&self, prev: &[f64], next: &[f64], u: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let n = self.domain.len();
        let tau = self.tau();
        let p = &self.params;
        let (mut lmu, mut lphi, mut lsig) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let comp = |y: &[f64], k: usize| -> Vec<f64> { (0..n).map(|i| y[3 * i + k]).collect() };
        self.laplacian.apply_into(&comp(next, 0), &mut lmu);
        self.laplacian.apply_into(&comp(next, 1), &mut lphi);
        self.laplacian.apply_into(&comp(next, 2), &mut lsig);
        let mut r = vec![0.0; 3 * n];
        for i in 0..n {
            let (mu0, phi0, sig0) = (prev[3 * i], prev[3 * i + 1], prev[3 * i + 2]);
            let (mu, phi, sig) = (next[3 * i], next[3 * i + 1], next[3 * i + 2]);
            let hv = self.h.eval(phi, 0);
            let fp = potential_eval(&self.potential, phi, 1)?;
            r[3 * i] = p.alpha * (mu - mu0) / tau + (phi - phi0) / tau - lmu[i] - (p.p * sig - p.a - u[i]) * hv;
            r[3 * i + 1] = p.beta * (phi - phi0) / tau - lphi[i] + fp - p.chi * sig - mu;
            r[3 * i + 2] = (sig - sig0) / tau - lsig[i] + p.chi * lphi[i] - p.b * (p.sigma_s - sig)
                + p.d * sig * hv
                - w[i];
        }
        Ok(r)
    }

    /// Jacobian of the residual with respect to the new level.
    pub(crate) fn jacobian(&self, next: &[f64], u: &[f64]) -> Result<BandedMatrix> {
        let n = self.domain.len();
        let tau = self.tau();
        let p = &self.params;
        let kb = self.half_band();
        let mut jac = BandedMatrix::zeros(3 * n, kb, kb);
        for i in 0..n {
            for (j, v) in self.laplacian.row(i) {
                jac.add(3 * i, 3 * j, -v);
                jac.add(3 * i + 1, 3 * j + 1, -v);
                jac.add(3 * i + 2, 3 * j + 1, p.chi * v);
                jac.add(3 * i + 2, 3 * j + 2, -v);
            }
            let (phi, sig) = (next[3 * i + 1], next[3 * i + 2]);
            let (hv, hp, _) = self.h.eval_all(phi);
            let fpp = potential_eval(&self.potential, phi, 2)?;
            jac.add(3 * i, 3 * i, p.alpha / tau);
            jac.add(3 * i, 3 * i + 1, 1.0 / tau - (p.p * sig - p.a - u[i]) * hp);
            jac.add(3 * i, 3 * i + 2, -p.p * hv);
            jac.add(3 * i + 1, 3 * i, -1.0);
            jac.add(3 * i + 1, 3 * i + 1, p.beta / tau + fpp);
            jac.add(3 * i + 1, 3 * i + 2, -p.chi);
            jac.add(3 * i + 2, 3 * i + 1, p.d * sig * hp);
            jac.add(3 * i + 2, 3 * i + 2, 1.0 / tau + p.b + p.d * hv);
        }
        Ok(jac)
    }

    /// `(∂R/∂Y_prev)·x = −(A/τ)·x` where `A` is the time-derivative mass
    /// pattern; returns `(A/τ)·x`.
    pub(crate) fn mass_apply(&self, x: &[f64], out: &mut [f64]) {
        let tau = self.tau();
        for i in 0..self.domain.len() {
            out[3 * i] = (self.params.alpha * x[3 * i] + x[3 * i + 1]) / tau;
            out[3 * i + 1] = self.params.beta * x[3 * i + 1] / tau;
            out[3 * i + 2] = x[3 * i + 2] / tau;
        }
    }

    /// `(A/τ)ᵀ·x`.
    pub(crate) fn mass_apply_transpose(&self, x: &[f64], out: &mut [f64]) {
        let tau = self.tau();
        for i in 0..self.domain.len() {
            out[3 * i] = self.params.alpha * x[3 * i] / tau;
            out[3 * i + 1] = (x[3 * i] + self.params.beta * x[3 * i + 1]) / tau;
            out[3 * i + 2] = x[3 * i + 2] / tau;
        }
    }
}

/// Convergence data of one accepted step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub iterations: usize,
    /// `‖R‖∞` before the first Newton update.
    pub initial_residual: f64,
    /// `‖R‖∞` at the accepted state.
    pub residual: f64,
    /// Threshold the residual was tested against.
    pub threshold: f64,
}

/// Output of [`step_state`]: statistics plus the factored Jacobian at the new state.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub stats: StepStats,
    pub jacobian: BandedLu,
}

/// Per-level diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Monitor {
    pub min_phi: f64,
    pub max_phi: f64,
    /// `∫ (αμ + φ)`.
    pub mass_mu_phi: f64,
    /// `∫ σ`.
    pub mass_sigma: f64,
}

impl Monitor {
    fn of(s: &StateSnapshot, alpha: f64) -> Self {
        Monitor {
            min_phi: s.phi.min(),
            max_phi: s.phi.max(),
            mass_mu_phi: alpha * integrate(&s.mu) + integrate(&s.phi),
            mass_sigma: integrate(&s.sigma),
        }
    }
}

/// Three discrete residual fields `(R_μ, R_φ, R_σ)`.
pub fn state_residual(
    model: &Model,
    prev: &StateSnapshot,
    next: &StateSnapshot,
    u: &Field,
    w: &Field,
) -> Result<[Field; 3]> {
    for f in [&prev.mu, &prev.phi, &prev.sigma, &next.mu, &next.phi, &next.sigma, u, w] {
        if f.domain() != &model.domain {
            return Err(Error::DomainMismatch);
        }
    }
    let r = model.residual_interleaved(&prev.to_interleaved(), &next.to_interleaved(), u.values(), w.values())?;
    let s = StateSnapshot::from_interleaved(&model.domain, &r);
    Ok([s.mu, s.phi, s.sigma])
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// One backward-Euler step from `prev` under the step controls `(u, w)`.
/// `step` is the index of the new level (used in error reports).
pub fn step_state(model: &Model, prev: &StateSnapshot, u: &Field, w: &Field, step: usize) -> Result<(StateSnapshot, StepRecord)> {
    prev.check_domain(&model.domain)?;
    let y0 = prev.to_interleaved();
    let (y, stats) = newton_step(model, &y0, u.values(), w.values(), step)?;
    let jacobian = model.jacobian(&y, u.values())?.factor()?;
    Ok((StateSnapshot::from_interleaved(&model.domain, &y), StepRecord { stats, jacobian }))
}

fn newton_step(model: &Model, prev: &[f64], u: &[f64], w: &[f64], step: usize) -> Result<(Vec<f64>, StepStats)> {
    let opts = &model.options;
    let mut y = prev.to_vec();
    let mut r = model.residual_interleaved(prev, &y, u, w)?;
    let mut rnorm = inf_norm(&r);
    let initial_residual = rnorm;
    let floor = 16.0 * f64::EPSILON * model.residual_scale(prev);
    let threshold = (opts.newton_tol * initial_residual).max(floor);
    let n = model.domain.len();
    for it in 1..=opts.max_newton_iters {
        let lu = model.jacobian(&y, u)?.factor()?;
        let mut delta: Vec<f64> = r.iter().map(|v| -v).collect();
        lu.solve_in_place(&mut delta);

        let mut t = 1.0;
        let mut accepted: Option<(Vec<f64>, Vec<f64>, f64)> = None;
        let mut last_violation: Option<Error> = None;
        let mut fallback: Option<(Vec<f64>, Vec<f64>, f64)> = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = y.iter().zip(&delta).map(|(a, d)| a + t * d).collect();
            let phi: Vec<f64> = (0..n).map(|i| trial[3 * i + 1]).collect();
            match model.check_separation(&phi, step) {
                Err(e) => last_violation = Some(e),
                Ok(()) => {
                    let rt = model.residual_interleaved(prev, &trial, u, w)?;
                    let nt = inf_norm(&rt);
                    if nt < rnorm || nt <= threshold {
                        accepted = Some((trial, rt, nt));
                        break;
                    }
                    fallback = Some((trial, rt, nt));
                }
            }
            t *= 0.5;
        }
        let (ny, nr, nn) = match accepted.or(fallback) {
            Some(v) => v,
            None => return Err(last_violation.unwrap_or(Error::NewtonDivergence { step, iterations: it, residual: rnorm })),
        };
        y = ny;
        r = nr;
        rnorm = nn;
        if rnorm <= threshold {
            return Ok((y, StepStats { iterations: it, initial_residual, residual: rnorm, threshold }));
        }
    }
    Err(Error::NewtonDivergence { step, iterations: opts.max_newton_iters, residual: rnorm })
}

/// A solved forward trajectory with everything needed for sensitivities.
#[derive(Debug, Clone)]
pub struct StateTrajectory {
    model: Model,
    controls: ControlField,
    snapshots: Vec<StateSnapshot>,
    factors: Option<Vec<BandedLu>>,
    stats: Vec<StepStats>,
    monitors: Vec<Monitor>,
    fingerprint: u64,
}

impl StateTrajectory {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn controls(&self) -> &ControlField {
        &self.controls
    }

    /// Levels `0..=N`.
    pub fn snapshots(&self) -> &[StateSnapshot] {
        &self.snapshots
    }

    pub fn snapshot(&self, level: usize) -> &StateSnapshot {
        &self.snapshots[level]
    }

    pub fn terminal(&self) -> &StateSnapshot {
        self.snapshots.last().expect("trajectory has level 0")
    }

    /// Newton statistics for steps `1..=N` (entry `n − 1` is step `n`).
    pub fn step_stats(&self) -> &[StepStats] {
        &self.stats
    }

    /// Diagnostics for levels `0..=N`.
    pub fn monitors(&self) -> &[Monitor] {
        &self.monitors
    }

    /// Hash of states and controls; identifies the trajectory an adjoint belongs to.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn steps(&self) -> usize {
        self.snapshots.len() - 1
    }

    /// Factored Jacobian of step `level` (`1..=N`), rebuilt if not stored.
    pub fn jacobian(&self, level: usize) -> Result<Cow<'_, BandedLu>> {
        if let Some(f) = &self.factors {
            return Ok(Cow::Borrowed(&f[level - 1]));
        }
        let y = self.snapshots[level].to_interleaved();
        let lu = self.model.jacobian(&y, self.controls.u[level - 1].values())?.factor()?;
        Ok(Cow::Owned(lu))
    }
}

fn fingerprint(snapshots: &[StateSnapshot], controls: &ControlField) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for s in snapshots {
        for f in [&s.mu, &s.phi, &s.sigma] {
            f.values().iter().for_each(|&v| feed(v));
        }
    }
    for f in controls.u.iter().chain(&controls.w) {
        f.values().iter().for_each(|&v| feed(v));
    }
    h
}

/// Marches the state system over the whole time grid.
pub fn solve_state(model: &Model, controls: &ControlField, initial: &StateSnapshot) -> Result<StateTrajectory> {
    initial.check_domain(&model.domain)?;
    controls.check_shape(&model.domain, model.time.steps)?;
    model.check_separation(initial.phi.values(), 0)?;
    let steps = model.time.steps;
    let mut snapshots = Vec::with_capacity(steps + 1);
    let mut factors = Vec::new();
    let mut stats = Vec::with_capacity(steps);
    let mut monitors = Vec::with_capacity(steps + 1);
    snapshots.push(initial.clone());
    monitors.push(Monitor::of(initial, model.params.alpha));
    for n in 0..steps {
        let (next, rec) = step_state(model, &snapshots[n], &controls.u[n], &controls.w[n], n + 1)?;
        monitors.push(Monitor::of(&next, model.params.alpha));
        stats.push(rec.stats);
        if model.options.store_factorizations {
            factors.push(rec.jacobian);
        }
        snapshots.push(next);
    }
    let fingerprint = fingerprint(&snapshots, controls);
    Ok(StateTrajectory {
        model: model.clone(),
        controls: controls.clone(),
        snapshots,
        factors: model.options.store_factorizations.then_some(factors),
        stats,
        monitors,
        fingerprint,
    })
}
