//! Double-well potentials `F = F₁ + F₂`, the Yosida regularization of the
//! convex logarithmic part, and the proliferation function `h`.

use crate::{Error, Result};

/// Which double-well potential drives the phase separation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PotentialSpec {
    /// `F(r) = ¼(r² − 1)²`.
    Regular,
    /// `F(r) = (1+r)ln(1+r) + (1−r)ln(1−r) − k r²`, `k > 1`, on `(−1, 1)`.
    Logarithmic { k: f64 },
    /// Logarithmic potential with its convex part replaced by the
    /// Moreau–Yosida envelope of parameter `eps`.
    YosidaLogarithmic { k: f64, eps: f64 },
}

impl PotentialSpec {
    /// Logarithmic potential with the default quench parameter `k = 2`.
    pub const LOG_DEFAULT: PotentialSpec = PotentialSpec::Logarithmic { k: 2.0 };

    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: &str| {
            Err(Error::InvalidParameter { name, reason: alloc::string::String::from(reason) })
        };
        match *self {
            PotentialSpec::Regular => Ok(()),
            PotentialSpec::Logarithmic { k } if !(k > 1.0) => bad("k", "must exceed 1"),
            PotentialSpec::YosidaLogarithmic { k, .. } if !(k > 1.0) => bad("k", "must exceed 1"),
            PotentialSpec::YosidaLogarithmic { eps, .. } if !(eps > 0.0 && eps < 1.0) => {
                bad("eps", "must lie in (0, 1)")
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PotentialSpec::Regular => "regular",
            PotentialSpec::Logarithmic { .. } => "logarithmic",
            PotentialSpec::YosidaLogarithmic { .. } => "yosida_logarithmic",
        }
    }

    /// `(r₋, r₊)`: where `F′` is finite.
    pub fn effective_domain(&self) -> (f64, f64) {
        match self {
            PotentialSpec::Logarithmic { .. } => (-1.0, 1.0),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn is_singular(&self) -> bool {
        matches!(self, PotentialSpec::Logarithmic { .. })
    }
}

/// `F⁽ᵒʳᵈᵉʳ⁾(r)` for `order ∈ 0..=3`.
pub fn potential_eval(spec: &PotentialSpec, r: f64, order: u8) -> Result<f64> {
    match *spec {
        PotentialSpec::Regular => Ok(match order {
            0 => 0.25 * (r * r - 1.0) * (r * r - 1.0),
            1 => r * r * r - r,
            2 => 3.0 * r * r - 1.0,
            3 => 6.0 * r,
            _ => return Err(Error::UnsupportedDerivative { order, variant: spec.name() }),
        }),
        PotentialSpec::Logarithmic { k } => {
            let interior = r > -1.0 && r < 1.0;
            if order == 0 && (-1.0..=1.0).contains(&r) {
                return Ok(log_convex(r) - k * r * r);
            }
            if !interior || r.is_nan() {
                return Err(Error::DomainViolation { value: r });
            }
            Ok(match order {
                1 => 2.0 * libm::atanh(r) - 2.0 * k * r,
                2 => 2.0 / (1.0 - r * r) - 2.0 * k,
                3 => 4.0 * r / ((1.0 - r * r) * (1.0 - r * r)),
                _ => return Err(Error::UnsupportedDerivative { order, variant: spec.name() }),
            })
        }
        PotentialSpec::YosidaLogarithmic { k, eps } => {
            let z = yosida_dual(r, eps);
            Ok(match order {
                0 => {
                    let s = libm::tanh(z);
                    (r - s) * (r - s) / (2.0 * eps) + 2.0 * s * z - 2.0 * ln_cosh(z) - k * r * r
                }
                1 => 2.0 * z - 2.0 * k * r,
                2 => 2.0 / (sech2(z) + 2.0 * eps) - 2.0 * k,
                _ => return Err(Error::UnsupportedDerivative { order, variant: spec.name() }),
            })
        }
    }
}

/// Convex part `(1+r)ln(1+r) + (1−r)ln(1−r)` on `[−1, 1]`, with `0·ln 0 = 0`.
fn log_convex(r: f64) -> f64 {
    let xlogx = |x: f64| if x == 0.0 { 0.0 } else { x * libm::log(x) };
    xlogx(1.0 + r) + xlogx(1.0 - r)
}

fn ln_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + libm::log1p(libm::exp(-2.0 * a)) - core::f64::consts::LN_2
}

fn sech2(z: f64) -> f64 {
    let c = libm::cosh(z);
    1.0 / (c * c)
}

/// Solves `tanh(z) + 2ε z = r` for `z`.
///
/// Writing the resolvent as `s = tanh(z)` turns `s + ε·F₁′(s) = r` into a
/// scalar equation on all of ℝ, with the bracket
/// `z ∈ [(r − 1)/(2ε), (r + 1)/(2ε)]`. Then `F₁,ε′(r) = 2z` exactly.
fn yosida_dual(r: f64, eps: f64) -> f64 {
    let g = |z: f64| libm::tanh(z) + 2.0 * eps * z - r;
    let mut lo = (r - 1.0) / (2.0 * eps);
    let mut hi = (r + 1.0) / (2.0 * eps);
    let tol = 1e-14 * r.abs().max(1.0);
    let mut z = r / (1.0 + 2.0 * eps);
    z = z.clamp(lo, hi);
    for _ in 0..200 {
        let gz = g(z);
        if gz.abs() <= tol {
            return z;
        }
        if gz > 0.0 {
            hi = z;
        } else {
            lo = z;
        }
        let step = gz / (sech2(z) + 2.0 * eps);
        let next = z - step;
        z = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if hi - lo <= f64::EPSILON * z.abs().max(1.0) {
            return z;
        }
    }
    z
}

/// Resolvent `s* = (I + ε F₁′)⁻¹(r)` of the convex logarithmic part.
pub fn yosida_resolvent(r: f64, eps: f64) -> f64 {
    libm::tanh(yosida_dual(r, eps))
}

/// Yosida approximation `F₁,ε′(r) = (r − s*)/ε`, Lipschitz with constant `1/ε`.
pub fn yosida_prime(r: f64, eps: f64) -> f64 {
    2.0 * yosida_dual(r, eps)
}

/// Moreau envelope `F₁,ε(r) = (r − s*)²/(2ε) + F₁(s*)`.
pub fn yosida_envelope(r: f64, eps: f64) -> f64 {
    let z = yosida_dual(r, eps);
    let s = libm::tanh(z);
    (r - s) * (r - s) / (2.0 * eps) + 2.0 * s * z - 2.0 * ln_cosh(z)
}

/// Quintic smoothstep proliferation function: `h = 0` for `r ≤ −1`, `h = 1`
/// for `r ≥ 1`, globally C² and positive on `(−1, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProliferationH;

impl ProliferationH {
    pub const SUP: f64 = 1.0;
    /// `sup |h′|`, attained at `r = 0`.
    pub const SUP_DERIVATIVE: f64 = 15.0 / 16.0;

    pub fn eval(&self, r: f64, order: u8) -> f64 {
        let s = ((r + 1.0) * 0.5).clamp(0.0, 1.0);
        match order {
            0 => s * s * s * (10.0 + s * (-15.0 + 6.0 * s)),
            1 => 15.0 * s * s * (1.0 - s) * (1.0 - s),
            2 => 15.0 * s * (1.0 - s) * (1.0 - 2.0 * s),
            _ => panic!("h derivatives are provided up to order 2"),
        }
    }

    /// `(h, h′, h″)` at once.
    pub fn eval_all(&self, r: f64) -> (f64, f64, f64) {
        (self.eval(r, 0), self.eval(r, 1), self.eval(r, 2))
    }
}

/// Free-function form of [`ProliferationH::eval`].
pub fn h_eval(h: &ProliferationH, r: f64, order: u8) -> f64 {
    h.eval(r, order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LOG2: PotentialSpec = PotentialSpec::Logarithmic { k: 2.0 };

    #[test]
    fn closed_form_values() {
        assert_eq!(potential_eval(&PotentialSpec::Regular, 0.0, 0).unwrap(), 0.25);
        assert_eq!(potential_eval(&LOG2, 0.0, 1).unwrap(), 0.0);
        // ln 3 − 2
        let v = potential_eval(&LOG2, 0.5, 1).unwrap();
        assert_relative_eq!(v, -0.901_387_711_331_890_2, max_relative = 1e-14);
        let cd = (potential_eval(&LOG2, 0.5 + 1e-6, 0).unwrap()
            - potential_eval(&LOG2, 0.5 - 1e-6, 0).unwrap())
            / 2e-6;
        assert_relative_eq!(cd, v, max_relative = 1e-8);
    }

    #[test]
    fn singular_domain_is_enforced() {
        assert_eq!(potential_eval(&LOG2, 1.0, 1), Err(Error::DomainViolation { value: 1.0 }));
        assert!(potential_eval(&LOG2, -1.2, 0).is_err());
        assert_relative_eq!(potential_eval(&LOG2, 1.0, 0).unwrap(), 2.0 * core::f64::consts::LN_2 - 2.0);
        let y = PotentialSpec::YosidaLogarithmic { k: 2.0, eps: 0.1 };
        assert!(potential_eval(&y, 3.0, 1).unwrap().is_finite());
        assert!(matches!(potential_eval(&y, 0.2, 3), Err(Error::UnsupportedDerivative { .. })));
    }

    #[test]
    fn derivatives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let specs = [
            PotentialSpec::Regular,
            LOG2,
            PotentialSpec::YosidaLogarithmic { k: 2.0, eps: 0.1 },
        ];
        for spec in specs {
            let max_order = if matches!(spec, PotentialSpec::YosidaLogarithmic { .. }) { 2 } else { 3 };
            for _ in 0..50 {
                let r: f64 = rng.gen_range(-0.95..0.95);
                for m in 1..=max_order {
                    let d = 1e-5;
                    let fd = (potential_eval(&spec, r + d, m - 1).unwrap()
                        - potential_eval(&spec, r - d, m - 1).unwrap())
                        / (2.0 * d);
                    let exact = potential_eval(&spec, r, m).unwrap();
                    let rel = (fd - exact).abs() / exact.abs().max(1.0);
                    assert!(rel <= 1e-6, "{spec:?} r={r} order={m}: {fd} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn log_convex_part_is_convex() {
        for i in -99..=99 {
            let r = i as f64 / 100.0;
            let f1pp = potential_eval(&LOG2, r, 2).unwrap() + 4.0;
            assert!(f1pp > 0.0);
        }
    }

    fn bisection_resolvent(r: f64, eps: f64) -> f64 {
        let g = |s: f64| s + eps * libm::log((1.0 + s) / (1.0 - s)) - r;
        let (mut lo, mut hi) = (-1.0 + 1e-300, 1.0 - 1e-16);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn resolvent_matches_bisection_oracle() {
        assert_eq!(yosida_resolvent(0.0, 0.3), 0.0);
        let s = yosida_resolvent(0.5, 0.1);
        assert!(s > 0.0 && s < 0.5);
        assert_relative_eq!(s, bisection_resolvent(0.5, 0.1), max_relative = 1e-13);
        let resid = s + 0.1 * libm::log((1.0 + s) / (1.0 - s)) - 0.5;
        assert!(resid.abs() <= 1e-14);
        for &(r, eps) in &[(-0.7, 0.05), (0.95, 0.2), (1.5, 0.1), (-2.0, 0.3)] {
            assert_relative_eq!(yosida_resolvent(r, eps), bisection_resolvent(r, eps), max_relative = 1e-12);
        }
    }

    #[test]
    fn yosida_prime_bounds() {
        assert_eq!(yosida_prime(0.0, 0.4), 0.0);
        let v = yosida_prime(0.9, 0.1);
        assert!(v > 0.0 && v < libm::log(19.0), "{v}");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let r: f64 = rng.gen_range(-0.99..0.99);
            let e1: f64 = rng.gen_range(0.01..0.5);
            let e2 = e1 * rng.gen_range(1.01..1.9);
            let f1p = 2.0 * libm::atanh(r);
            assert!(yosida_prime(r, e1).abs() <= f1p.abs() + 1e-12);
            assert!(yosida_prime(r, e2).abs() <= yosida_prime(r, e1).abs() + 1e-12);
            let env = yosida_envelope(r, e1);
            assert!(env >= -1e-14 && env <= log_convex(r) + 1e-12, "r={r}: {env}");
        }
    }

    #[test]
    fn resolvent_is_monotone_and_contractive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let a: f64 = rng.gen_range(-3.0..3.0);
            let b: f64 = rng.gen_range(-3.0..3.0);
            let eps = rng.gen_range(0.01..0.9);
            let (sa, sb) = (yosida_resolvent(a, eps), yosida_resolvent(b, eps));
            assert!((sa - sb).abs() <= (a - b).abs() + 1e-15);
            if a < b {
                assert!(sa <= sb);
            }
        }
    }

    #[test]
    fn proliferation_h_properties() {
        let h = ProliferationH;
        assert_eq!(h.eval(-1.0, 0), 0.0);
        assert_eq!(h.eval(1.0, 0), 1.0);
        assert_eq!(h.eval(0.0, 0), 0.5);
        for r in [-1.0, 1.0] {
            assert_eq!(h.eval(r, 1), 0.0);
            assert_eq!(h.eval(r, 2), 0.0);
        }
        assert_eq!(h.eval(0.0, 1), ProliferationH::SUP_DERIVATIVE);
        for i in -300..=300 {
            let r = i as f64 / 100.0;
            let v = h.eval(r, 0);
            assert!((0.0..=1.0).contains(&v));
            if r > -1.0 {
                assert!(v > 0.0);
            }
            assert!(h.eval(r, 1).abs() <= ProliferationH::SUP_DERIVATIVE);
            let d = 1e-6;
            let fd1 = (h.eval(r + d, 0) - h.eval(r - d, 0)) / (2.0 * d);
            let fd2 = (h.eval(r + d, 1) - h.eval(r - d, 1)) / (2.0 * d);
            assert!((fd1 - h.eval(r, 1)).abs() < 1e-8);
            assert!((fd2 - h.eval(r, 2)).abs() < 1e-5);
        }
    }
}
