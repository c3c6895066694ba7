//! Tracking cost, its partial derivatives with respect to the state, and the
//! reduced gradient.
//!
//! Time integrals use the right-endpoint rule over levels `1..=N`, matching
//! the backward-Euler evaluation of the state and of the step controls.
//! Gradients are returned with the `τ·|cell|` weights included, so that the
//! directional derivative is the plain sum `Σ g·d`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::grid::{Domain, Field};
use crate::sensitivity::AdjTrajectory;
use crate::state::{ControlField, StateSnapshot, StateTrajectory};
use crate::{Error, Result};

/// Weights `γ₁…γ₆` and targets of the tracking functional.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub gammas: [f64; 6],
    /// Distributed targets for levels `1..=N` (entry `n − 1` is level `n`).
    pub phi_q: Vec<Field>,
    pub sigma_q: Vec<Field>,
    pub phi_omega: Field,
    pub sigma_omega: Field,
}

impl CostSpec {
    /// Spatially and temporally constant targets: `φ_Q = φ_Ω = phi_target`,
    /// `σ_Q = σ_Ω = sigma_target`.
    pub fn tracking(domain: &Domain, steps: usize, gammas: [f64; 6], phi_target: f64, sigma_target: f64) -> Self {
        CostSpec {
            gammas,
            phi_q: vec![Field::constant(domain, phi_target); steps],
            sigma_q: vec![Field::constant(domain, sigma_target); steps],
            phi_omega: Field::constant(domain, phi_target),
            sigma_omega: Field::constant(domain, sigma_target),
        }
    }

    pub fn validate(&self, domain: &Domain, steps: usize) -> Result<()> {
        if self.gammas.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return Err(Error::InvalidParameter { name: "gamma", reason: String::from("weights must be nonnegative") });
        }
        if self.gammas.iter().all(|&g| g == 0.0) {
            return Err(Error::InvalidParameter { name: "gamma", reason: String::from("weights must not all vanish") });
        }
        if self.phi_q.len() != steps || self.sigma_q.len() != steps {
            return Err(Error::ShapeMismatch(format!("distributed targets must cover {steps} levels")));
        }
        let all = self.phi_q.iter().chain(&self.sigma_q).chain([&self.phi_omega, &self.sigma_omega]);
        for f in all {
            if f.domain() != domain {
                return Err(Error::DomainMismatch);
            }
        }
        Ok(())
    }
}

fn sq_dist(a: &Field, b: &Field) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() * a.domain().cell_volume()
}

fn sq_norm(a: &Field) -> f64 {
    a.values().iter().map(|x| x * x).sum::<f64>() * a.domain().cell_volume()
}

/// Cost of an arbitrary sequence of states on levels `0..=N` (level 0 is unused).
pub fn cost_of_states(states: &[StateSnapshot], controls: &ControlField, spec: &CostSpec, tau: f64) -> Result<f64> {
    let steps = states.len().checked_sub(1).ok_or_else(|| Error::ShapeMismatch(String::from("empty trajectory")))?;
    let domain = *states[0].domain();
    spec.validate(&domain, steps)?;
    controls.check_shape(&domain, steps)?;
    let g = &spec.gammas;
    let last = &states[steps];
    let mut j = 0.5 * g[0] * sq_dist(&last.phi, &spec.phi_omega) + 0.5 * g[2] * sq_dist(&last.sigma, &spec.sigma_omega);
    for n in 1..=steps {
        j += 0.5 * tau * g[1] * sq_dist(&states[n].phi, &spec.phi_q[n - 1]);
        j += 0.5 * tau * g[3] * sq_dist(&states[n].sigma, &spec.sigma_q[n - 1]);
        j += 0.5 * tau * g[4] * sq_norm(&controls.u[n - 1]);
        j += 0.5 * tau * g[5] * sq_norm(&controls.w[n - 1]);
    }
    Ok(j)
}

pub fn evaluate_cost(traj: &StateTrajectory, controls: &ControlField, spec: &CostSpec) -> Result<f64> {
    cost_of_states(traj.snapshots(), controls, spec, traj.model().tau())
}

/// Derivatives of the discrete cost with respect to the state, as densities
/// (divide-by-`|cell|` form of the plain partial derivatives).
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSource {
    /// `γ₂ τ (φⁿ − φ_Qⁿ)` for levels `1..=N`.
    pub phi: Vec<Field>,
    /// `γ₄ τ (σⁿ − σ_Qⁿ)` for levels `1..=N`.
    pub sigma: Vec<Field>,
    /// `γ₁ (φᴺ − φ_Ω)`.
    pub terminal_phi: Field,
    /// `γ₃ (σᴺ − σ_Ω)`.
    pub terminal_sigma: Field,
}

impl AdjointSource {
    /// Plain interleaved derivative at `level`, running part only.
    pub(crate) fn running_plain(&self, level: usize, cell_volume: f64) -> Vec<f64> {
        let (phi, sig) = (self.phi[level - 1].values(), self.sigma[level - 1].values());
        let mut out = vec![0.0; 3 * phi.len()];
        for i in 0..phi.len() {
            out[3 * i + 1] = cell_volume * phi[i];
            out[3 * i + 2] = cell_volume * sig[i];
        }
        out
    }

    /// Total density derivative at `level`, terminal part included at `N`.
    pub fn total(&self, level: usize) -> (Field, Field) {
        let (mut phi, mut sig) = (self.phi[level - 1].clone(), self.sigma[level - 1].clone());
        if level == self.phi.len() {
            phi = phi.zip_map(&self.terminal_phi, |a, b| a + b);
            sig = sig.zip_map(&self.terminal_sigma, |a, b| a + b);
        }
        (phi, sig)
    }
}

pub fn adjoint_source(traj: &StateTrajectory, spec: &CostSpec) -> Result<AdjointSource> {
    source_of_states(traj.snapshots(), spec, traj.model().tau())
}

pub(crate) fn source_of_states(states: &[StateSnapshot], spec: &CostSpec, tau: f64) -> Result<AdjointSource> {
    let steps = states.len() - 1;
    spec.validate(states[0].domain(), steps)?;
    let g = &spec.gammas;
    let diff = |a: &Field, b: &Field, s: f64| a.zip_map(b, |x, y| s * (x - y));
    Ok(AdjointSource {
        phi: (1..=steps).map(|n| diff(&states[n].phi, &spec.phi_q[n - 1], g[1] * tau)).collect(),
        sigma: (1..=steps).map(|n| diff(&states[n].sigma, &spec.sigma_q[n - 1], g[3] * tau)).collect(),
        terminal_phi: diff(&states[steps].phi, &spec.phi_omega, g[0]),
        terminal_sigma: diff(&states[steps].sigma, &spec.sigma_omega, g[2]),
    })
}

/// Gradient of the discrete reduced cost with respect to the step controls:
/// `τ|cell|·(−h(φ)q + γ₅u)` and `τ|cell|·(r + γ₆w)`, with `(q, r)` taken at
/// the adjoint level paired with each step.
pub fn reduced_gradient(
    traj: &StateTrajectory,
    adj: &AdjTrajectory,
    controls: &ControlField,
    spec: &CostSpec,
) -> Result<ControlField> {
    if adj.state_fingerprint() != traj.fingerprint() || controls != traj.controls() {
        return Err(Error::MismatchedTrajectory);
    }
    let model = traj.model();
    let weight = model.tau() * model.domain.cell_volume();
    let (g5, g6) = (spec.gammas[4], spec.gammas[5]);
    let mut grad = ControlField::zeros(&model.domain, traj.steps());
    for k in 0..traj.steps() {
        let phi = traj.snapshot(k + 1).phi.values();
        let lvl = &adj.levels[k];
        let (u, w) = (controls.u[k].values(), controls.w[k].values());
        for i in 0..phi.len() {
            grad.u[k].values_mut()[i] = weight * (-model.h.eval(phi[i], 0) * lvl.q.values()[i] + g5 * u[i]);
            grad.w[k].values_mut()[i] = weight * (lvl.r.values()[i] + g6 * w[i]);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_domain;
    use crate::potentials::PotentialSpec;
    use crate::presets::FieldPreset;
    use crate::sensitivity::solve_adjoint;
    use crate::state::{solve_state, Model, ModelParams, SolverOptions, TimeGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_when_on_target() {
        let d = build_domain(1, &[1.0], &[8]).unwrap();
        let states = vec![StateSnapshot::zeros(&d); 5];
        let spec = CostSpec::tracking(&d, 4, [1.0; 6], 0.0, 0.0);
        assert_eq!(cost_of_states(&states, &ControlField::zeros(&d, 4), &spec, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn pure_control_cost() {
        let d = build_domain(1, &[1.0], &[8]).unwrap();
        let states = vec![StateSnapshot::zeros(&d); 11];
        let spec = CostSpec::tracking(&d, 10, [0.0, 0.0, 0.0, 0.0, 2.0, 0.0], 0.0, 0.0);
        let j = cost_of_states(&states, &ControlField::constant(&d, 10, 1.0, 5.0), &spec, 0.1).unwrap();
        assert!((j - 1.0).abs() < 1e-14);
    }

    #[test]
    fn weights_are_validated() {
        let d = build_domain(1, &[1.0], &[4]).unwrap();
        let spec = CostSpec::tracking(&d, 2, [0.0; 6], 0.0, 0.0);
        assert!(spec.validate(&d, 2).is_err());
        let spec = CostSpec::tracking(&d, 2, [1.0, -1.0, 0.0, 0.0, 0.0, 0.0], 0.0, 0.0);
        assert!(spec.validate(&d, 2).is_err());
        let spec = CostSpec::tracking(&d, 2, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0.0, 0.0);
        assert!(matches!(spec.validate(&d, 3), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn sources_vanish_for_zero_weights_or_exact_tracking() {
        let d = build_domain(1, &[1.0], &[6]).unwrap();
        let states = vec![StateSnapshot { phi: Field::constant(&d, 0.3), ..StateSnapshot::zeros(&d) }; 4];
        let spec = CostSpec::tracking(&d, 3, [0.0, 1.0, 0.0, 0.0, 1.0, 0.0], 0.3, 0.0);
        let src = source_of_states(&states, &spec, 0.1).unwrap();
        for f in src.phi.iter().chain(&src.sigma).chain([&src.terminal_phi, &src.terminal_sigma]) {
            assert!(f.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sources_are_the_state_derivative_of_the_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = build_domain(2, &[1.0, 1.0], &[4, 5]).unwrap();
        let steps = 6;
        let tau = 0.05;
        let rand_field = |rng: &mut ChaCha8Rng| Field::from_fn(&d, |_| rng.gen_range(-1.0..1.0));
        let states: Vec<StateSnapshot> = (0..=steps)
            .map(|_| StateSnapshot { mu: rand_field(&mut rng), phi: rand_field(&mut rng), sigma: rand_field(&mut rng) })
            .collect();
        let mut spec = CostSpec::tracking(&d, steps, [0.7, 1.3, 0.4, 2.1, 0.5, 0.9], 0.1, 0.6);
        spec.phi_q = (0..steps).map(|_| rand_field(&mut rng)).collect();
        let controls = ControlField::constant(&d, steps, 0.2, -0.1);
        let src = source_of_states(&states, &spec, tau).unwrap();
        let pert: Vec<StateSnapshot> = (0..=steps)
            .map(|_| StateSnapshot { mu: rand_field(&mut rng), phi: rand_field(&mut rng), sigma: rand_field(&mut rng) })
            .collect();
        let shifted = |s: f64| -> Vec<StateSnapshot> {
            states
                .iter()
                .zip(&pert)
                .map(|(a, b)| StateSnapshot {
                    mu: a.mu.zip_map(&b.mu, |x, y| x + s * y),
                    phi: a.phi.zip_map(&b.phi, |x, y| x + s * y),
                    sigma: a.sigma.zip_map(&b.sigma, |x, y| x + s * y),
                })
                .collect()
        };
        let eps = 1e-5;
        let fd = (cost_of_states(&shifted(eps), &controls, &spec, tau).unwrap()
            - cost_of_states(&shifted(-eps), &controls, &spec, tau).unwrap())
            / (2.0 * eps);
        let mut analytic = 0.0;
        for n in 1..=steps {
            let (sp, ss) = src.total(n);
            analytic += crate::grid::inner_product(&sp, &pert[n].phi).unwrap()
                + crate::grid::inner_product(&ss, &pert[n].sigma).unwrap();
        }
        assert!((fd - analytic).abs() <= 1e-8 * analytic.abs().max(1.0), "{fd} vs {analytic}");
    }

    #[test]
    fn pure_control_gradient_and_mismatch() {
        let d = build_domain(1, &[1.0], &[8]).unwrap();
        let m = Model::new(d, ModelParams::default(), PotentialSpec::Regular, TimeGrid::new(1.0, 5).unwrap(), SolverOptions::default())
            .unwrap();
        let init = StateSnapshot {
            mu: Field::zeros(&d),
            phi: FieldPreset::Cosine { amplitude: 0.5, offset: 0.0 }.to_field(&d),
            sigma: Field::constant(&d, 1.0),
        };
        let c = ControlField::constant(&d, 5, 0.3, -0.2);
        let traj = solve_state(&m, &c, &init).unwrap();
        let spec = CostSpec::tracking(&d, 5, [0.0, 0.0, 0.0, 0.0, 2.0, 3.0], 0.0, 0.0);
        let adj = solve_adjoint(&traj, &spec).unwrap();
        let g = reduced_gradient(&traj, &adj, &c, &spec).unwrap();
        let w = m.tau() * d.cell_volume();
        for k in 0..5 {
            assert!(g.u[k].values().iter().all(|&v| v == w * 2.0 * 0.3));
            assert!(g.w[k].values().iter().all(|&v| v == w * 3.0 * -0.2));
        }
        let other = solve_state(&m, &ControlField::constant(&d, 5, 0.1, 0.0), &init).unwrap();
        assert_eq!(
            reduced_gradient(&other, &adj, other.controls(), &spec).unwrap_err(),
            Error::MismatchedTrajectory
        );
    }
}
