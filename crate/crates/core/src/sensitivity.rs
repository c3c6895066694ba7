//! Tangent and adjoint steppers built from the stored forward Jacobians.
//!
//! Writing one forward step as `R(Yₙ, Yₙ₋₁, cₙ) = 0` with `Jₙ = ∂R/∂Yₙ`,
//! `∂R/∂Yₙ₋₁ = −M` and `Sₙ = −∂R/∂cₙ`, the tangent stepper is
//!
//! ```text
//! Jₙ δₙ = M δₙ₋₁ + Sₙ dₙ,          δ₀ = 0
//! ```
//!
//! and the adjoint stepper is its exact transpose,
//!
//! ```text
//! Jₙᵀ Λₙ = Gₙ + Mᵀ Λₙ₊₁,           Λ_{N+1} = 0
//! ```
//!
//! so that `Σ ⟨Gₙ, δₙ⟩ = Σ ⟨Sₙᵀ Λₙ, dₙ⟩` holds to roundoff. All vectors here
//! are plain (unweighted) interleaved `(μ, φ, σ)` arrays.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::{adjoint_source, CostSpec};
use crate::grid::{dot, Field};
use crate::state::{ControlField, StateSnapshot, StateTrajectory};
use crate::{Error, Result};

/// A control perturbation `(k, l)`, laid out like the controls.
pub type Direction = ControlField;

/// Solution `(η, ξ, ζ)` of the linearized system, stored in the
/// `(mu, phi, sigma)` slots of each snapshot. Level 0 is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LinTrajectory {
    pub levels: Vec<StateSnapshot>,
}

impl LinTrajectory {
    pub fn eta(&self, level: usize) -> &Field {
        &self.levels[level].mu
    }

    pub fn xi(&self, level: usize) -> &Field {
        &self.levels[level].phi
    }

    pub fn zeta(&self, level: usize) -> &Field {
        &self.levels[level].sigma
    }
}

/// Adjoint fields at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjSnapshot {
    pub p: Field,
    pub q: Field,
    pub r: Field,
}

/// Adjoint state on levels `0..=N`.
///
/// Level `N` carries the final conditions `q = 0`, `βp = γ₁(φ − φ_Ω)`,
/// `r = γ₃(σ − σ_Ω)`; level `m < N` carries the multiplier of the forward
/// step from `m` to `m + 1`, rescaled by `1/(τ·|cell|)` to a density.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjTrajectory {
    pub levels: Vec<AdjSnapshot>,
    state_fingerprint: u64,
}

impl AdjTrajectory {
    pub fn state_fingerprint(&self) -> u64 {
        self.state_fingerprint
    }
}

fn check_direction(traj: &StateTrajectory, dir: &Direction) -> Result<()> {
    dir.check_shape(&traj.model().domain, traj.steps())
}

/// Injects a control perturbation of step `n` (`1..=N`) into the residual rows.
fn control_injection(traj: &StateTrajectory, level: usize, k: &[f64], l: &[f64], out: &mut [f64]) {
    let h = traj.model().h;
    let phi = traj.snapshot(level).phi.values();
    for i in 0..phi.len() {
        out[3 * i] -= h.eval(phi[i], 0) * k[i];
        out[3 * i + 2] += l[i];
    }
}

/// Tangent trajectory `DS(c)·(k, l)`.
pub fn solve_linearized(traj: &StateTrajectory, dir: &Direction) -> Result<LinTrajectory> {
    check_direction(traj, dir)?;
    let model = traj.model();
    let n = model.domain.len();
    let mut prev = vec![0.0; 3 * n];
    let mut levels = Vec::with_capacity(traj.steps() + 1);
    levels.push(StateSnapshot::zeros(&model.domain));
    for level in 1..=traj.steps() {
        let mut rhs = vec![0.0; 3 * n];
        model.mass_apply(&prev, &mut rhs);
        control_injection(traj, level, dir.u[level - 1].values(), dir.w[level - 1].values(), &mut rhs);
        traj.jacobian(level)?.solve_in_place(&mut rhs);
        levels.push(StateSnapshot::from_interleaved(&model.domain, &rhs));
        prev = rhs;
    }
    Ok(LinTrajectory { levels })
}

/// Backward sweep for multipliers `Λ₁..Λ_N` given plain sources `G₁..G_N`
/// (`sources[n − 1]` belongs to level `n`) and a seed `Λ_{N+1}`.
pub fn adjoint_multipliers(traj: &StateTrajectory, sources: &[Vec<f64>], seed: Option<&[f64]>) -> Result<Vec<Vec<f64>>> {
    let model = traj.model();
    let size = 3 * model.domain.len();
    if sources.len() != traj.steps() || sources.iter().any(|s| s.len() != size) {
        return Err(Error::ShapeMismatch(alloc::format!(
            "adjoint sources must cover {} levels of {size} unknowns",
            traj.steps()
        )));
    }
    let mut out = vec![Vec::new(); traj.steps()];
    let mut next = seed.map_or_else(|| vec![0.0; size], <[f64]>::to_vec);
    let mut coupling = vec![0.0; size];
    for level in (1..=traj.steps()).rev() {
        model.mass_apply_transpose(&next, &mut coupling);
        let mut rhs: Vec<f64> = sources[level - 1].iter().zip(&coupling).map(|(g, c)| g + c).collect();
        traj.jacobian(level)?.solve_transpose_in_place(&mut rhs);
        out[level - 1] = rhs.clone();
        next = rhs;
    }
    Ok(out)
}

/// `Sₙᵀ Λₙ` for every step: the control gradient of a functional whose
/// multipliers are `multipliers`.
pub fn multipliers_to_control_gradient(traj: &StateTrajectory, multipliers: &[Vec<f64>]) -> ControlField {
    let domain = traj.model().domain;
    let h = traj.model().h;
    let mut g = ControlField::zeros(&domain, traj.steps());
    for (k, lam) in multipliers.iter().enumerate() {
        let phi = traj.snapshot(k + 1).phi.values();
        for (i, gu) in g.u[k].values_mut().iter_mut().enumerate() {
            *gu = -h.eval(phi[i], 0) * lam[3 * i];
        }
        for (i, gw) in g.w[k].values_mut().iter_mut().enumerate() {
            *gw = lam[3 * i + 2];
        }
    }
    g
}

/// Adjoint state of the tracking cost.
pub fn solve_adjoint(traj: &StateTrajectory, cost: &CostSpec) -> Result<AdjTrajectory> {
    let model = traj.model();
    let domain = model.domain;
    let src = adjoint_source(traj, cost)?;
    let weight = model.tau() * domain.cell_volume();
    let vol = domain.cell_volume();

    // final conditions as densities, then as the virtual multiplier Λ_{N+1}
    let terminal = AdjSnapshot {
        q: Field::zeros(&domain),
        p: src.terminal_phi.map(|v| v / model.params.beta),
        r: src.terminal_sigma.clone(),
    };
    let seed = interleave_adjoint(&terminal).iter().map(|v| v * weight).collect::<Vec<_>>();
    let running: Vec<Vec<f64>> = (1..=traj.steps()).map(|n| src.running_plain(n, vol)).collect();
    let lam = adjoint_multipliers(traj, &running, Some(&seed))?;

    let mut levels: Vec<AdjSnapshot> = lam
        .iter()
        .map(|l| {
            let s = StateSnapshot::from_interleaved(&domain, l);
            AdjSnapshot {
                q: s.mu.map(|v| v / weight),
                p: s.phi.map(|v| v / weight),
                r: s.sigma.map(|v| v / weight),
            }
        })
        .collect();
    levels.push(terminal);
    Ok(AdjTrajectory { levels, state_fingerprint: traj.fingerprint() })
}

/// Interleaves an adjoint snapshot in residual-row order `(q, p, r)`.
pub(crate) fn interleave_adjoint(a: &AdjSnapshot) -> Vec<f64> {
    StateSnapshot { mu: a.q.clone(), phi: a.p.clone(), sigma: a.r.clone() }.to_interleaved()
}

/// Relative transpose-consistency gap `|⟨g, δ⟩ − ⟨Sᵀ Λ(g), d⟩| / max(|·|)`
/// for random per-level sources `g` drawn from `seed`.
pub fn duality_gap(traj: &StateTrajectory, dir: &Direction, seed: u64) -> Result<f64> {
    let lin = solve_linearized(traj, dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 3 * traj.model().domain.len();
    let sources: Vec<Vec<f64>> =
        (0..traj.steps()).map(|_| (0..size).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    duality_gap_with_sources(traj, dir, &lin, &sources)
}

pub(crate) fn duality_gap_with_sources(
    traj: &StateTrajectory,
    dir: &Direction,
    lin: &LinTrajectory,
    sources: &[Vec<f64>],
) -> Result<f64> {
    let forward: f64 = sources.iter().enumerate().map(|(k, g)| dot(g, &lin.levels[k + 1].to_interleaved())).sum();
    let lam = adjoint_multipliers(traj, sources, None)?;
    let backward = multipliers_to_control_gradient(traj, &lam).plain_dot(dir);
    let scale = forward.abs().max(backward.abs());
    Ok(if scale == 0.0 { 0.0 } else { (forward - backward).abs() / scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_domain;
    use crate::potentials::PotentialSpec;
    use crate::presets::FieldPreset;
    use crate::state::{solve_state, Model, ModelParams, SolverOptions, TimeGrid};

    pub(crate) fn sample_trajectory(potential: PotentialSpec) -> StateTrajectory {
        let d = build_domain(1, &[1.0], &[16]).unwrap();
        let m = Model::new(d, ModelParams::default(), potential, TimeGrid::new(0.5, 10).unwrap(), SolverOptions::default())
            .unwrap();
        let init = StateSnapshot {
            mu: Field::zeros(&d),
            phi: FieldPreset::Cosine { amplitude: 0.8, offset: 0.0 }.to_field(&d),
            sigma: Field::constant(&d, 0.8),
        };
        let c = ControlField::constant(&d, 10, 0.4, 0.1);
        solve_state(&m, &c, &init).unwrap()
    }

    fn random_direction(traj: &StateTrajectory, seed: u64) -> Direction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = traj.model().domain;
        let mut c = ControlField::zeros(&d, traj.steps());
        for f in c.u.iter_mut().chain(c.w.iter_mut()) {
            f.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        c
    }

    #[test]
    fn zero_direction_gives_zero_tangent_and_gap() {
        let traj = sample_trajectory(PotentialSpec::Regular);
        let zero = ControlField::zeros(&traj.model().domain, traj.steps());
        let lin = solve_linearized(&traj, &zero).unwrap();
        assert!(lin.levels.iter().all(|s| s.to_interleaved().iter().all(|&v| v == 0.0)));
        assert_eq!(duality_gap(&traj, &zero, 1).unwrap(), 0.0);
    }

    #[test]
    fn tangent_is_linear() {
        let traj = sample_trajectory(PotentialSpec::LOG_DEFAULT);
        let d = random_direction(&traj, 4);
        let a = solve_linearized(&traj, &d).unwrap();
        let b = solve_linearized(&traj, &d.scale(2.0)).unwrap();
        for (x, y) in a.levels.iter().zip(&b.levels) {
            for (p, q) in x.to_interleaved().iter().zip(y.to_interleaved()) {
                assert!((2.0 * p - q).abs() <= 1e-12 * (1.0 + q.abs()));
            }
        }
        let e = random_direction(&traj, 5);
        let c = solve_linearized(&traj, &d.axpy(1.0, &e)).unwrap();
        let e_lin = solve_linearized(&traj, &e).unwrap();
        for k in 0..c.levels.len() {
            let sum: Vec<f64> = a.levels[k]
                .to_interleaved()
                .iter()
                .zip(e_lin.levels[k].to_interleaved())
                .map(|(p, q)| p + q)
                .collect();
            for (p, q) in sum.iter().zip(c.levels[k].to_interleaved()) {
                assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
            }
        }
    }

    #[test]
    fn duality_holds_and_is_scale_invariant() {
        for pot in [PotentialSpec::Regular, PotentialSpec::LOG_DEFAULT] {
            let traj = sample_trajectory(pot);
            for seed in 0..3 {
                let d = random_direction(&traj, 100 + seed);
                let gap = duality_gap(&traj, &d, seed).unwrap();
                assert!(gap <= 1e-10, "{pot:?}: gap {gap}");
            }
        }
        let traj = sample_trajectory(PotentialSpec::Regular);
        let d = random_direction(&traj, 9);
        let lin = solve_linearized(&traj, &d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let size = 3 * traj.model().domain.len();
        let g: Vec<Vec<f64>> = (0..traj.steps()).map(|_| (0..size).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let g10: Vec<Vec<f64>> = g.iter().map(|v| v.iter().map(|x| 10.0 * x).collect()).collect();
        let a = duality_gap_with_sources(&traj, &d, &lin, &g).unwrap();
        let b = duality_gap_with_sources(&traj, &d, &lin, &g10).unwrap();
        // both gaps are pure roundoff; the relative gap must not pick up the scale
        assert!(a <= 1e-12 && b <= 1e-12, "{a:e} {b:e}");
        assert!((a - b).abs() <= 1e-13, "{a:e} {b:e}");
    }

    #[test]
    fn zero_weights_give_zero_adjoint() {
        let traj = sample_trajectory(PotentialSpec::Regular);
        let d = traj.model().domain;
        let mut cost = CostSpec::tracking(&d, traj.steps(), [0.0, 0.0, 0.0, 0.0, 1.0, 1.0], 0.0, 0.0);
        cost.phi_omega = Field::constant(&d, -1.0);
        let adj = solve_adjoint(&traj, &cost).unwrap();
        for s in &adj.levels {
            for f in [&s.p, &s.q, &s.r] {
                assert!(f.values().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn terminal_level_matches_final_conditions() {
        let traj = sample_trajectory(PotentialSpec::LOG_DEFAULT);
        let d = traj.model().domain;
        let cost = CostSpec::tracking(&d, traj.steps(), [2.0, 0.0, 0.0, 0.0, 0.0, 0.0], -0.5, 0.0);
        let adj = solve_adjoint(&traj, &cost).unwrap();
        let last = adj.levels.last().unwrap();
        let beta = traj.model().params.beta;
        for (i, &p) in last.p.values().iter().enumerate() {
            let phi = traj.terminal().phi.values()[i];
            assert_eq!(p, 2.0 * (phi + 0.5) / beta);
        }
        assert!(last.q.values().iter().all(|&v| v == 0.0));
        assert!(last.r.values().iter().all(|&v| v == 0.0));
    }
}
