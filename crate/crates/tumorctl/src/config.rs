//! INI run configuration.
//!
//! Values are layered as defaults < file < `--override`, kept as text until
//! the whole table is known, then parsed and validated in one pass. The
//! effective table can be rendered back to INI for the run log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use ini::Ini;
use thiserror::Error;
use tumorctl_core::cost::CostSpec;
use tumorctl_core::grid::{build_domain, Domain};
use tumorctl_core::optimizer::{ControlBox, OptimizerConfig, StepRule};
use tumorctl_core::potentials::PotentialSpec;
use tumorctl_core::presets::FieldPreset;
use tumorctl_core::problem::ControlProblem;
use tumorctl_core::state::{Model, ModelParams, SolverOptions, StateSnapshot, TimeGrid};

/// Every accepted key with its default. Section `""` is the top level.
const SCHEMA: &[(&str, &str, &str)] = &[
    ("", "seed", "0"),
    ("domain", "dim", "1"),
    ("domain", "lengths", "1.0"),
    ("domain", "cells", "64"),
    ("time", "T", "1.0"),
    ("time", "steps", "50"),
    ("model", "alpha", "1"),
    ("model", "beta", "1"),
    ("model", "chi", "0.5"),
    ("model", "P", "1"),
    ("model", "A", "0.5"),
    ("model", "B", "1"),
    ("model", "D", "1"),
    ("model", "sigma_s", "1"),
    ("potential", "variant", "logarithmic"),
    ("potential", "k", "2"),
    ("potential", "eps", "0.01"),
    ("h", "variant", "quintic"),
    ("init", "mu0", "constant 0"),
    ("init", "phi0", "cosine 0.9 0"),
    ("init", "sigma0", "constant 1"),
    ("cost", "gamma1", "0"),
    ("cost", "gamma2", "1"),
    ("cost", "gamma3", "0"),
    ("cost", "gamma4", "1"),
    ("cost", "gamma5", "0.01"),
    ("cost", "gamma6", "0.01"),
    ("cost", "phi_q", "constant -0.5"),
    ("cost", "sigma_q", "constant 0"),
    ("cost", "phi_omega", "constant -1"),
    ("cost", "sigma_omega", "constant 0"),
    ("box", "u_lo", "0"),
    ("box", "u_hi", "1"),
    ("box", "w_lo", "-1"),
    ("box", "w_hi", "1"),
    ("optimizer", "max_iters", "200"),
    ("optimizer", "tol", "1e-6"),
    ("optimizer", "step_rule", "barzilai_borwein"),
    ("optimizer", "armijo_c1", "1e-4"),
    ("optimizer", "backtrack", "0.5"),
    ("optimizer", "initial_step", "1"),
    ("solver", "newton_tol", "1e-12"),
    ("solver", "max_newton_iters", "25"),
    ("solver", "store_factorizations", "true"),
    ("output", "directory", "tumorctl-out"),
    ("output", "snapshot_every", "10"),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown section [{section}]")]
    UnknownSection { line: usize, section: String },
    #[error("{}unknown key {key}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    UnknownKey { line: Option<usize>, key: String },
    #[error("{}{key} = {value:?}: expected {expected}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    InvalidValue { line: Option<usize>, key: String, value: String, expected: &'static str },
    #[error("{key}: {message}")]
    Validation { key: String, message: String },
    #[error("override {0:?} is not of the form section.key=value")]
    BadOverride(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File(usize),
    Override,
}

/// The raw key-value table after layering.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, (String, Source)>,
}

fn full_key(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

fn in_schema(key: &str) -> bool {
    SCHEMA.iter().any(|(s, k, _)| full_key(s, k) == key)
}

fn strip_comment(line: &str) -> &str {
    line.split([';', '#']).next().unwrap_or("").trim()
}

/// Line (1-based) of `key` inside `section` in the source text, if present.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = strip_comment(raw);
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
        } else if current == section && line.split('=').next().map(str::trim) == Some(key) {
            return Some(i + 1);
        }
    }
    None
}

fn locate_section(text: &str, section: &str) -> usize {
    text.lines().position(|l| strip_comment(l).trim_start_matches('[').trim_end_matches(']').trim() == section).map_or(0, |i| i + 1)
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: SCHEMA.iter().map(|(s, k, v)| (full_key(s, k), (v.to_string(), Source::Default))).collect(),
        }
    }
}

impl Settings {
    /// Defaults overlaid with the contents of an INI document.
    pub fn from_ini(text: &str) -> Result<Self, ConfigError> {
        // rust-ini reads an unclosed header up to EOF; report it where it starts
        let unclosed = |l: &str| {
            let l = strip_comment(l);
            l.starts_with('[') && !l.ends_with(']')
        };
        if let Some(i) = text.lines().position(unclosed) {
            return Err(ConfigError::Parse { line: i + 1, message: "section header is missing ']'".to_string() });
        }
        let doc = Ini::load_from_str(text).map_err(|e| ConfigError::Parse { line: e.line, message: e.msg.to_string() })?;
        let mut out = Settings::default();
        for (section, props) in doc.iter() {
            let section = section.unwrap_or("");
            if !section.is_empty() && !SCHEMA.iter().any(|(s, _, _)| *s == section) {
                return Err(ConfigError::UnknownSection { line: locate_section(text, section), section: section.to_string() });
            }
            for (key, value) in props.iter() {
                let fk = full_key(section, key);
                let line = locate(text, section, key);
                if !in_schema(&fk) {
                    return Err(ConfigError::UnknownKey { line, key: fk });
                }
                out.values.insert(fk, (value.trim().to_string(), Source::File(line.unwrap_or(0))));
            }
        }
        Ok(out)
    }

    /// Applies `section.key=value` (or `seed=value`).
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (key, value) = spec.split_once('=').ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
        let key = key.trim();
        if !in_schema(key) {
            return Err(ConfigError::UnknownKey { line: None, key: key.to_string() });
        }
        self.values.insert(key.to_string(), (value.trim().to_string(), Source::Override));
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[key].0
    }

    pub fn source(&self, key: &str) -> Source {
        self.values[key].1
    }

    /// The effective table as INI text, with non-default sources noted.
    pub fn render(&self) -> String {
        let mut out = String::from("# effective configuration\n");
        let mut last = None;
        for (section, key, _) in SCHEMA {
            if last != Some(section) {
                if !section.is_empty() {
                    let _ = write!(out, "\n[{section}]\n");
                }
                last = Some(section);
            }
            let fk = full_key(section, key);
            match self.source(&fk) {
                Source::Default => {}
                Source::File(line) => {
                    let _ = writeln!(out, "# from file line {line}");
                }
                Source::Override => out.push_str("# from --override\n"),
            }
            let _ = writeln!(out, "{key} = {}", self.get(&fk));
        }
        out
    }

    fn line_of(&self, key: &str) -> Option<usize> {
        match self.source(key) {
            Source::File(l) if l > 0 => Some(l),
            _ => None,
        }
    }

    fn invalid(&self, key: &str, expected: &'static str) -> ConfigError {
        ConfigError::InvalidValue { line: self.line_of(key), key: key.to_string(), value: self.get(key).to_string(), expected }
    }

    fn f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.get(key).parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| self.invalid(key, "a finite number"))
    }

    fn usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.get(key).parse().map_err(|_| self.invalid(key, "a nonnegative integer"))
    }

    fn bool(&self, key: &str) -> Result<bool, ConfigError> {
        self.get(key).parse().map_err(|_| self.invalid(key, "true or false"))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError> {
        self.get(key)
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|_| self.invalid(key, "a list of numbers")))
            .collect()
    }

    fn preset(&self, key: &str) -> Result<FieldPreset, ConfigError> {
        parse_preset(self.get(key)).ok_or_else(|| self.invalid(key, "constant C | cosine AMP OFFSET | gaussian AMP WIDTH OFFSET"))
    }
}

/// `constant c`, `cosine a b`, or `gaussian a w b`.
pub fn parse_preset(text: &str) -> Option<FieldPreset> {
    let mut parts = text.split_whitespace();
    let name = parts.next()?;
    let nums: Vec<f64> = parts.map(str::parse).collect::<Result<_, _>>().ok()?;
    if nums.iter().any(|v| !v.is_finite()) {
        return None;
    }
    match (name, nums.as_slice()) {
        ("constant", [c]) => Some(FieldPreset::Constant(*c)),
        ("cosine", [a, b]) => Some(FieldPreset::Cosine { amplitude: *a, offset: *b }),
        ("gaussian", [a, w, b]) if *w > 0.0 => Some(FieldPreset::Gaussian { amplitude: *a, width: *w, offset: *b }),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub mu0: FieldPreset,
    pub phi0: FieldPreset,
    pub sigma0: FieldPreset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostConfig {
    pub gammas: [f64; 6],
    pub phi_q: FieldPreset,
    pub sigma_q: FieldPreset,
    pub phi_omega: FieldPreset,
    pub sigma_omega: FieldPreset,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxConfig {
    pub u_lo: f64,
    pub u_hi: f64,
    pub w_lo: f64,
    pub w_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub snapshot_every: usize,
}

/// A fully parsed and validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub domain: Domain,
    pub time: TimeGrid,
    pub params: ModelParams,
    pub potential: PotentialSpec,
    pub init: InitConfig,
    pub cost: CostConfig,
    pub bounds: BoxConfig,
    pub optimizer: OptimizerConfig,
    pub solver: SolverOptions,
    pub output: OutputConfig,
    pub settings: Settings,
}

fn violation(key: &str, message: &str) -> ConfigError {
    ConfigError::Validation { key: key.to_string(), message: message.to_string() }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_settings(Settings::from_ini(text)?)
    }

    pub fn from_settings(s: Settings) -> Result<Self, ConfigError> {
        let seed = s.get("seed").parse().map_err(|_| s.invalid("seed", "a nonnegative integer"))?;

        let dim = s.usize("domain.dim")?;
        if dim != 1 && dim != 2 {
            return Err(violation("domain.dim", "must be 1 or 2"));
        }
        let lengths: Vec<f64> = s.list("domain.lengths")?;
        let cells: Vec<usize> = s.list("domain.cells")?;
        if lengths.len() != dim || cells.len() != dim {
            return Err(violation("domain", "lengths and cells need one entry per axis"));
        }
        if lengths.iter().any(|l| *l <= 0.0) {
            return Err(violation("domain.lengths", "must be positive"));
        }
        if cells.iter().any(|c| *c < 2) {
            return Err(violation("domain.cells", "need at least 2 cells per axis"));
        }
        let domain = build_domain(dim, &lengths, &cells).map_err(|e| violation("domain", &e.to_string()))?;

        let t_final = s.f64("time.T")?;
        if t_final <= 0.0 {
            return Err(violation("time.T", "final time must be positive"));
        }
        let steps = s.usize("time.steps")?;
        if steps == 0 {
            return Err(violation("time.steps", "need at least one step"));
        }
        let time = TimeGrid::new(t_final, steps).map_err(|e| violation("time", &e.to_string()))?;

        let params = ModelParams {
            alpha: s.f64("model.alpha")?,
            beta: s.f64("model.beta")?,
            chi: s.f64("model.chi")?,
            p: s.f64("model.P")?,
            a: s.f64("model.A")?,
            b: s.f64("model.B")?,
            d: s.f64("model.D")?,
            sigma_s: s.f64("model.sigma_s")?,
        };
        for (key, v) in [("model.alpha", params.alpha), ("model.beta", params.beta), ("model.chi", params.chi)] {
            if v <= 0.0 {
                return Err(violation(key, "must be positive (alpha, beta and chi are positive model constants)"));
            }
        }
        for (key, v) in [("model.P", params.p), ("model.A", params.a), ("model.B", params.b), ("model.D", params.d), ("model.sigma_s", params.sigma_s)] {
            if v < 0.0 {
                return Err(violation(key, "must be nonnegative (P, A, B, D and sigma_s are nonnegative rates)"));
            }
        }

        let potential = match s.get("potential.variant") {
            "regular" => PotentialSpec::Regular,
            "logarithmic" => PotentialSpec::Logarithmic { k: s.f64("potential.k")? },
            "yosida" => PotentialSpec::YosidaLogarithmic { k: s.f64("potential.k")?, eps: s.f64("potential.eps")? },
            _ => return Err(s.invalid("potential.variant", "regular | logarithmic | yosida")),
        };
        potential.validate().map_err(|e| violation("potential", &e.to_string()))?;
        if s.get("h.variant") != "quintic" {
            return Err(s.invalid("h.variant", "quintic"));
        }

        let init = InitConfig { mu0: s.preset("init.mu0")?, phi0: s.preset("init.phi0")?, sigma0: s.preset("init.sigma0")? };

        let mut gammas = [0.0; 6];
        for (i, g) in gammas.iter_mut().enumerate() {
            let key = format!("cost.gamma{}", i + 1);
            *g = s.f64(&key)?;
            if *g < 0.0 {
                return Err(violation(&key, "cost weights must be nonnegative"));
            }
        }
        if gammas.iter().all(|&g| g == 0.0) {
            return Err(violation("cost", "cost weights must not all vanish"));
        }
        let cost = CostConfig {
            gammas,
            phi_q: s.preset("cost.phi_q")?,
            sigma_q: s.preset("cost.sigma_q")?,
            phi_omega: s.preset("cost.phi_omega")?,
            sigma_omega: s.preset("cost.sigma_omega")?,
        };

        let bounds = BoxConfig { u_lo: s.f64("box.u_lo")?, u_hi: s.f64("box.u_hi")?, w_lo: s.f64("box.w_lo")?, w_hi: s.f64("box.w_hi")? };
        if bounds.u_lo < 0.0 {
            return Err(violation("box.u_lo", "must be nonnegative (the control u must be nonnegative)"));
        }
        if bounds.u_lo > bounds.u_hi {
            return Err(violation("box.u_lo", "must not exceed box.u_hi"));
        }
        if bounds.w_lo > bounds.w_hi {
            return Err(violation("box.w_lo", "must not exceed box.w_hi"));
        }

        let optimizer = OptimizerConfig {
            max_iters: s.usize("optimizer.max_iters")?,
            armijo_c1: s.f64("optimizer.armijo_c1")?,
            backtrack_factor: s.f64("optimizer.backtrack")?,
            initial_step: s.f64("optimizer.initial_step")?,
            stationarity_tol: s.f64("optimizer.tol")?,
            step_rule: match s.get("optimizer.step_rule") {
                "fixed" => StepRule::Fixed,
                "barzilai_borwein" | "bb" => StepRule::BarzilaiBorwein,
                _ => return Err(s.invalid("optimizer.step_rule", "fixed | barzilai_borwein")),
            },
        };
        optimizer.validate().map_err(|e| violation("optimizer", &e.to_string()))?;

        let solver = SolverOptions {
            newton_tol: s.f64("solver.newton_tol")?,
            max_newton_iters: s.usize("solver.max_newton_iters")?,
            store_factorizations: s.bool("solver.store_factorizations")?,
            ..SolverOptions::default()
        };
        if solver.newton_tol <= 0.0 {
            return Err(violation("solver.newton_tol", "must be positive"));
        }
        if solver.max_newton_iters == 0 {
            return Err(violation("solver.max_newton_iters", "must be at least 1"));
        }

        let output = OutputConfig { directory: PathBuf::from(s.get("output.directory")), snapshot_every: s.usize("output.snapshot_every")? };
        if output.snapshot_every == 0 {
            return Err(violation("output.snapshot_every", "must be at least 1"));
        }

        Ok(RunConfig { seed, domain, time, params, potential, init, cost, bounds, optimizer, solver, output, settings: s })
    }

    pub fn model(&self) -> tumorctl_core::Result<Model> {
        Model::new(self.domain, self.params, self.potential, self.time, self.solver)
    }

    pub fn initial_state(&self) -> StateSnapshot {
        StateSnapshot {
            mu: self.init.mu0.to_field(&self.domain),
            phi: self.init.phi0.to_field(&self.domain),
            sigma: self.init.sigma0.to_field(&self.domain),
        }
    }

    pub fn cost_spec(&self) -> CostSpec {
        let steps = self.time.steps;
        CostSpec {
            gammas: self.cost.gammas,
            phi_q: vec![self.cost.phi_q.to_field(&self.domain); steps],
            sigma_q: vec![self.cost.sigma_q.to_field(&self.domain); steps],
            phi_omega: self.cost.phi_omega.to_field(&self.domain),
            sigma_omega: self.cost.sigma_omega.to_field(&self.domain),
        }
    }

    pub fn control_box(&self) -> tumorctl_core::Result<ControlBox> {
        let b = &self.bounds;
        ControlBox::uniform(&self.domain, self.time.steps, (b.u_lo, b.u_hi), (b.w_lo, b.w_hi))
    }

    pub fn problem(&self) -> tumorctl_core::Result<ControlProblem> {
        ControlProblem::new(self.model()?, self.initial_state(), self.cost_spec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_the_benchmark_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.domain.cells(), &[64]);
        assert_eq!(c.time.steps, 50);
        assert_eq!(c.potential, PotentialSpec::Logarithmic { k: 2.0 });
        assert_eq!(c.init.phi0, FieldPreset::Cosine { amplitude: 0.9, offset: 0.0 });
        assert_eq!(c.cost.gammas, [0.0, 1.0, 0.0, 1.0, 1e-2, 1e-2]);
        assert_eq!(c.output.snapshot_every, 10);
    }

    #[test]
    fn file_values_and_overrides_layer() {
        let text = "seed = 7\n[model]\nalpha = 2\n# comment\n[time]\nsteps = 10\n";
        let mut s = Settings::from_ini(text).unwrap();
        assert_eq!(s.source("model.alpha"), Source::File(3));
        s.apply_override("model.alpha=3").unwrap();
        let c = RunConfig::from_settings(s).unwrap();
        assert_eq!((c.seed, c.params.alpha, c.time.steps), (7, 3.0, 10));
        let echoed = RunConfig::parse(&c.settings.render()).unwrap();
        assert_eq!(echoed.params, c.params);
        assert_eq!(echoed.time, c.time);
    }

    #[test]
    fn errors_name_the_problem() {
        match RunConfig::parse("[model]\nalpha = 1\nbogus = 2\n").unwrap_err() {
            ConfigError::UnknownKey { line, key } => assert_eq!((line, key.as_str()), (Some(3), "model.bogus")),
            e => panic!("{e}"),
        }
        assert!(matches!(RunConfig::parse("[nope]\nx = 1\n").unwrap_err(), ConfigError::UnknownSection { line: 1, .. }));
        assert!(matches!(RunConfig::parse("[model\nalpha = 1\n").unwrap_err(), ConfigError::Parse { line: 1, .. }));
        let e = RunConfig::parse("[time]\n\nsteps = many\n").unwrap_err();
        assert_eq!(e.to_string(), "line 3: time.steps = \"many\": expected a nonnegative integer");
        let e = RunConfig::parse("[box]\nu_lo = -0.5\n").unwrap_err();
        assert!(e.to_string().starts_with("box.u_lo: must be nonnegative"), "{e}");
        let e = RunConfig::parse("[model]\nalpha = 0\n").unwrap_err();
        assert!(e.to_string().starts_with("model.alpha: must be positive"), "{e}");
        assert!(Settings::default().apply_override("nokey").is_err());
    }

    #[test]
    fn inline_comments_are_allowed() {
        let text = "; benchmark\n[time] ; coarse\nsteps = 10 ; fast\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.time.steps, 10);
        assert_eq!(c.settings.source("time.steps"), Source::File(3));
    }

    #[test]
    fn presets_parse() {
        assert_eq!(parse_preset("constant -1"), Some(FieldPreset::Constant(-1.0)));
        assert_eq!(parse_preset("gaussian 1 0.1 0"), Some(FieldPreset::Gaussian { amplitude: 1.0, width: 0.1, offset: 0.0 }));
        assert_eq!(parse_preset("gaussian 1 0 0"), None);
        assert_eq!(parse_preset("cosine 1"), None);
        assert_eq!(parse_preset("square 1"), None);
    }
}
