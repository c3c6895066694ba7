//! Named initial-data and target profiles.

use crate::grid::{Domain, Field};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldPreset {
    Constant(f64),
    /// `a·cos(πx/L₀)·cos(πy/L₁) + b` (the `y` factor is dropped in 1-D).
    Cosine { amplitude: f64, offset: f64 },
    /// `a·exp(−|x − center|²/(2w²)) + b`, centered in the domain.
    Gaussian { amplitude: f64, width: f64, offset: f64 },
}

impl FieldPreset {
    pub fn to_field(&self, domain: &Domain) -> Field {
        let pi = core::f64::consts::PI;
        let lengths = [domain.lengths()[0], *domain.lengths().get(1).unwrap_or(&1.0)];
        let dim = domain.dim();
        match *self {
            FieldPreset::Constant(c) => Field::constant(domain, c),
            FieldPreset::Cosine { amplitude, offset } => Field::from_fn(domain, |x| {
                let mut v = libm::cos(pi * x[0] / lengths[0]);
                if dim == 2 {
                    v *= libm::cos(pi * x[1] / lengths[1]);
                }
                amplitude * v + offset
            }),
            FieldPreset::Gaussian { amplitude, width, offset } => Field::from_fn(domain, |x| {
                let mut r2 = (x[0] - 0.5 * lengths[0]) * (x[0] - 0.5 * lengths[0]);
                if dim == 2 {
                    r2 += (x[1] - 0.5 * lengths[1]) * (x[1] - 0.5 * lengths[1]);
                }
                amplitude * libm::exp(-r2 / (2.0 * width * width)) + offset
            }),
        }
    }
}
