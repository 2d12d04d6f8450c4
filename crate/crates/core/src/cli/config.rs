//! Scenario configuration files.
//!
//! A config is a TOML document with the sections `scenario`, `system`,
//! `likelihood`, `prior`, `flow` and `output`. Parsing failures and semantic
//! validation failures both carry the offending field path and, when known,
//! the line number.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Spanned;

use crate::dirac::ParticleSet;
use crate::distance::DistanceParams;
use crate::filter::{gaussian_prior, Dynamics, LikelihoodTemplate, Method, Scenario, SystemModel, SystemNoise};
use crate::flow::{Corrector, FlowConfig, FlowVariant, Integrator, ReferenceReset};
use crate::homotopy::{MeasurementFn, Schedule};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: `{}`: {}", self.field, self.message),
            None => write!(f, "`{}`: {}", self.field, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

type Matrix = Spanned<Vec<Vec<f64>>>;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub scenario: ScenarioSection,
    pub system: SystemSection,
    pub likelihood: LikelihoodSection,
    pub prior: PriorSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Number of particles `L`.
    pub particles: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    Identity,
    Linear,
    RandomWalk,
    #[serde(rename = "coordinated-turn-2d")]
    CoordinatedTurn2D,
    CubicDrift,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub model: SystemKind,
    pub dim: usize,
    pub matrix: Option<Matrix>,
    pub turn_rate: Option<f64>,
    pub dt: Option<f64>,
    #[serde(default)]
    pub inputs: Vec<Spanned<Vec<f64>>>,
    #[serde(default)]
    pub noise: NoiseSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    #[default]
    None,
    Gaussian,
    Deterministic,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub kind: NoiseKind,
    pub cov: Option<Matrix>,
    /// Weighted noise particles as CSV, relative to the config file.
    pub path: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionKind {
    Identity,
    Linear,
    Range,
    RangeBearing,
    Cubic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Power,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodSection {
    pub function: FunctionKind,
    pub matrix: Option<Matrix>,
    pub noise_cov: Matrix,
    #[serde(default)]
    pub schedule: ScheduleKind,
    pub exponent: Option<f64>,
    #[serde(default)]
    pub measurements: Vec<Spanned<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    Gaussian,
    Csv,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub kind: PriorKind,
    pub mean: Option<Spanned<Vec<f64>>>,
    pub cov: Option<Matrix>,
    /// Size of the seeded draw that is reduced to `scenario.particles`.
    pub draws: Option<usize>,
    pub path: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegratorKind {
    #[default]
    Rk4,
    AdaptiveHeun,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub variant: FlowVariant,
    pub integrator: IntegratorKind,
    pub steps: usize,
    pub tolerance: f64,
    pub max_steps: usize,
    pub damping: f64,
    pub k1: f64,
    pub corrector_iters: usize,
    pub corrector_tolerance: f64,
    pub reset: ResetKind,
    pub reset_every: usize,
    pub min_ess_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetKind {
    OnDemand,
    Every,
    Continuous,
}

impl Default for FlowSection {
    fn default() -> Self {
        let d = FlowConfig::default();
        FlowSection {
            variant: d.variant,
            integrator: IntegratorKind::Rk4,
            steps: 64,
            tolerance: 1e-6,
            max_steps: 10_000,
            damping: d.damping,
            k1: d.params.k1(),
            corrector_iters: d.corrector.max_iters,
            corrector_tolerance: d.corrector.tolerance,
            reset: ResetKind::OnDemand,
            reset_every: 8,
            min_ess_fraction: d.min_ess_fraction,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<String>,
    pub trace: bool,
    pub methods: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: None,
            trace: false,
            methods: vec![Method::FlowRecursive.name().to_string()],
        }
    }
}

/// A parsed and validated config together with everything it refers to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: Config,
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub hash: String,
    pub base_dir: PathBuf,
}

struct Ctx<'a> {
    text: &'a str,
}

impl Ctx<'_> {
    fn line_of(&self, offset: usize) -> usize {
        self.text[..offset.min(self.text.len())].matches('\n').count() + 1
    }

    fn err<T>(&self, field: &str, span: Option<std::ops::Range<usize>>, message: impl Into<String>) -> Result<T, ConfigError> {
        Err(ConfigError {
            field: field.to_string(),
            line: span.map(|s| self.line_of(s.start)),
            message: message.into(),
        })
    }

    fn matrix(&self, field: &str, m: &Matrix, rows: Option<usize>, cols: Option<usize>) -> Result<DMatrix<f64>, ConfigError> {
        let data = m.get_ref();
        let r = data.len();
        let c = data.first().map(Vec::len).unwrap_or(0);
        if r == 0 || c == 0 || data.iter().any(|row| row.len() != c) {
            return self.err(field, Some(m.span()), "expected a non-empty rectangular matrix");
        }
        if rows.is_some_and(|want| want != r) || cols.is_some_and(|want| want != c) {
            return self.err(
                field,
                Some(m.span()),
                format!(
                    "expected shape {}x{}, got {r}x{c}",
                    rows.map_or("?".to_string(), |v| v.to_string()),
                    cols.map_or("?".to_string(), |v| v.to_string())
                ),
            );
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return self.err(field, Some(m.span()), "entries must be finite");
        }
        Ok(DMatrix::from_row_iterator(r, c, data.iter().flatten().copied()))
    }
}

/// Reads, validates and resolves a config file.
pub fn load(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError {
        field: path.display().to_string(),
        line: None,
        message: e.to_string(),
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse(&text, &base)
}

/// Parses config text; relative paths resolve against `base_dir`.
pub fn parse(text: &str, base_dir: &Path) -> Result<LoadedConfig, ConfigError> {
    let config: Config = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        ConfigError {
            field: field_from_toml_error(e.message()),
            line,
            message: e.message().trim().to_string(),
        }
    })?;
    let ctx = Ctx { text };
    let n = config.system.dim;
    if n == 0 {
        return ctx.err("system.dim", None, "must be at least 1");
    }
    let particles = config.scenario.particles;
    if particles == 0 {
        return ctx.err("scenario.particles", None, "must be at least 1");
    }

    let dynamics = match config.system.model {
        SystemKind::Identity => Dynamics::Identity,
        SystemKind::RandomWalk => Dynamics::RandomWalk,
        SystemKind::Linear => {
            let Some(m) = &config.system.matrix else {
                return ctx.err("system.matrix", None, "required for the linear model");
            };
            Dynamics::Linear(ctx.matrix("system.matrix", m, Some(n), Some(n))?)
        }
        SystemKind::CoordinatedTurn2D => {
            if n != 4 {
                return ctx.err("system.dim", None, "coordinated-turn-2d needs dim = 4");
            }
            Dynamics::CoordinatedTurn2D {
                turn_rate: config.system.turn_rate.unwrap_or(0.0),
                dt: config.system.dt.unwrap_or(1.0),
            }
        }
        SystemKind::CubicDrift => Dynamics::CubicDrift { dt: config.system.dt.unwrap_or(0.1) },
    };
    for (k, u) in config.system.inputs.iter().enumerate() {
        if !u.get_ref().is_empty() && u.get_ref().len() != n {
            return ctx.err(
                &format!("system.inputs[{k}]"),
                Some(u.span()),
                format!("expected dimension {n}, got {}", u.get_ref().len()),
            );
        }
    }
    let noise = match config.system.noise.kind {
        NoiseKind::None => SystemNoise::None,
        NoiseKind::Gaussian => {
            let Some(cov) = &config.system.noise.cov else {
                return ctx.err("system.noise.cov", None, "required for gaussian noise");
            };
            let cov = ctx.matrix("system.noise.cov", cov, Some(n), Some(n))?;
            SystemNoise::gaussian(cov).or_else(|e| ctx.err("system.noise.cov", config.system.noise.cov.as_ref().map(|c| c.span()), e.to_string()))?
        }
        NoiseKind::Deterministic => {
            let Some(p) = &config.system.noise.path else {
                return ctx.err("system.noise.path", None, "required for deterministic noise");
            };
            let set = read_set(&ctx, "system.noise.path", &base_dir.join(p))?;
            if set.dim() != n {
                return ctx.err("system.noise.path", None, format!("noise particles have dimension {}, expected {n}", set.dim()));
            }
            SystemNoise::Deterministic(set)
        }
    };

    let lik = &config.likelihood;
    let function = match lik.function {
        FunctionKind::Identity => MeasurementFn::Identity,
        FunctionKind::Range => MeasurementFn::RangeToOrigin,
        FunctionKind::RangeBearing => MeasurementFn::RangeBearing,
        FunctionKind::Cubic => MeasurementFn::Cubic,
        FunctionKind::Linear => {
            let Some(m) = &lik.matrix else {
                return ctx.err("likelihood.matrix", None, "required for the linear function");
            };
            MeasurementFn::Linear(ctx.matrix("likelihood.matrix", m, None, Some(n))?)
        }
    };
    let p = function
        .output_dim(n)
        .or_else(|e| ctx.err("likelihood.function", None, e.to_string()))?;
    let noise_cov = ctx.matrix("likelihood.noise_cov", &lik.noise_cov, Some(p), Some(p))?;
    let schedule = match lik.schedule {
        ScheduleKind::Linear => Schedule::Linear,
        ScheduleKind::Power => Schedule::Power(lik.exponent.unwrap_or(2.0)),
    };
    if let Err(e) = schedule.validate() {
        return ctx.err("likelihood.exponent", None, e.to_string());
    }
    let mut measurements = Vec::with_capacity(lik.measurements.len());
    for (k, y) in lik.measurements.iter().enumerate() {
        if y.get_ref().len() != p {
            return ctx.err(
                &format!("likelihood.measurements[{k}]"),
                Some(y.span()),
                format!("expected dimension {p}, got {}", y.get_ref().len()),
            );
        }
        measurements.push(y.get_ref().clone());
    }
    let template = LikelihoodTemplate { function, noise_cov, schedule };
    if let Err(e) = template.instantiate(&vec![0.0; p]) {
        return ctx.err("likelihood.noise_cov", Some(lik.noise_cov.span()), e.to_string());
    }

    let fs = &config.flow;
    let params = DistanceParams::new(fs.k1).or_else(|e| ctx.err("flow.k1", None, e.to_string()))?;
    let flow = FlowConfig {
        variant: fs.variant,
        integrator: match fs.integrator {
            IntegratorKind::Rk4 => Integrator::FixedRk4 { steps: fs.steps },
            IntegratorKind::AdaptiveHeun => Integrator::AdaptiveHeun { tolerance: fs.tolerance, max_steps: fs.max_steps },
        },
        damping: fs.damping,
        params,
        trace: config.output.trace,
        corrector: Corrector { max_iters: fs.corrector_iters, tolerance: fs.corrector_tolerance },
        reset: match fs.reset {
            ResetKind::OnDemand => ReferenceReset::OnDemand,
            ResetKind::Every => ReferenceReset::Every(fs.reset_every),
            ResetKind::Continuous => ReferenceReset::Continuous,
        },
        min_ess_fraction: fs.min_ess_fraction,
        particles: None,
    };
    if let Err(e) = flow.validate() {
        return ctx.err("flow", None, e.to_string());
    }

    let seed = config.scenario.seed;
    let prior = match config.prior.kind {
        PriorKind::Gaussian => {
            let Some(mean) = &config.prior.mean else {
                return ctx.err("prior.mean", None, "required for a gaussian prior");
            };
            if mean.get_ref().len() != n {
                return ctx.err("prior.mean", Some(mean.span()), format!("expected dimension {n}, got {}", mean.get_ref().len()));
            }
            let Some(cov) = &config.prior.cov else {
                return ctx.err("prior.cov", None, "required for a gaussian prior");
            };
            let cov_m = ctx.matrix("prior.cov", cov, Some(n), Some(n))?;
            let draws = config.prior.draws.unwrap_or(10 * particles);
            if draws < particles {
                return ctx.err("prior.draws", None, "must be at least scenario.particles");
            }
            gaussian_prior(mean.get_ref(), &cov_m, particles, draws, &params, seed)
                .or_else(|e| ctx.err("prior.cov", Some(cov.span()), e.to_string()))?
        }
        PriorKind::Csv => {
            let Some(path) = &config.prior.path else {
                return ctx.err("prior.path", None, "required for a csv prior");
            };
            let set = read_set(&ctx, "prior.path", &base_dir.join(path))?;
            if set.dim() != n {
                return ctx.err("prior.path", None, format!("prior has dimension {}, expected {n}", set.dim()));
            }
            if set.len() != particles {
                return ctx.err("prior.path", None, format!("prior has {} particles, scenario.particles is {particles}", set.len()));
            }
            set
        }
    };

    let mut methods = Vec::new();
    for (k, name) in config.output.methods.iter().enumerate() {
        match Method::parse(name) {
            Some(m) if !methods.contains(&m) => methods.push(m),
            Some(_) => {}
            None => {
                return ctx.err(
                    &format!("output.methods[{k}]"),
                    None,
                    format!("unknown method {name:?}; expected one of flow-recursive, flow-iterative, reweight, sir"),
                )
            }
        }
    }

    let scenario = Scenario {
        system: SystemModel::new(dynamics, noise),
        likelihood: template,
        prior,
        measurements,
        inputs: config.system.inputs.iter().map(|u| u.get_ref().clone()).collect(),
        flow,
        seed,
    };
    let hash = config_hash(&config, &scenario);
    Ok(LoadedConfig {
        config,
        scenario,
        methods,
        hash,
        base_dir: base_dir.to_path_buf(),
    })
}

fn read_set(ctx: &Ctx<'_>, field: &str, path: &Path) -> Result<ParticleSet, ConfigError> {
    let file = fs::File::open(path).or_else(|e| ctx.err(field, None, format!("{}: {e}", path.display())))?;
    ParticleSet::read_csv(file).or_else(|e| ctx.err(field, None, format!("{}: {e}", path.display())))
}

fn field_from_toml_error(message: &str) -> String {
    for marker in ["missing field `", "unknown field `"] {
        if let Some(rest) = message.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    "config".to_string()
}

/// SHA-256 over a canonical rendering of the semantic content: key order,
/// whitespace, comments, the output directory and the names of referenced
/// files do not matter, their contents do.
pub fn config_hash(config: &Config, scenario: &Scenario) -> String {
    let mut value = serde_json::to_value(config).expect("config serializes");
    if let Some(out) = value.get_mut("output").and_then(|v| v.as_object_mut()) {
        out.remove("dir");
    }
    let set_text = |set: &ParticleSet| {
        let mut buf = Vec::new();
        set.write_csv(&mut buf).expect("in-memory write");
        serde_json::Value::String(String::from_utf8(buf).expect("utf8 csv"))
    };
    if config.prior.kind == PriorKind::Csv {
        value["prior"]["path"] = set_text(&scenario.prior);
    }
    if let SystemNoise::Deterministic(noise) = &scenario.system.noise {
        value["system"]["noise"]["path"] = set_text(noise);
    }
    let canonical = serde_json::to_string(&value).expect("json renders");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[scenario]
particles = 10
seed = 3

[system]
model = "identity"
dim = 1

[likelihood]
function = "identity"
noise_cov = [[1.0]]

[prior]
kind = "gaussian"
mean = [0.0]
cov = [[1.0]]
draws = 50
"#;

    #[test]
    fn minimal_parses() {
        let c = parse(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(c.scenario.prior.len(), 10);
        assert!(c.scenario.measurements.is_empty());
        assert_eq!(c.methods, vec![Method::FlowRecursive]);
        assert_eq!(c.hash.len(), 64);
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = parse(MINIMAL, Path::new(".")).unwrap().hash;
        let spaced = MINIMAL.replace("particles = 10", "# comment\nparticles    =   10");
        assert_eq!(parse(&spaced, Path::new(".")).unwrap().hash, a);
        let changed = MINIMAL.replace("seed = 3", "seed = 4");
        assert_ne!(parse(&changed, Path::new(".")).unwrap().hash, a);
    }

    #[test]
    fn measurement_dimension_is_reported() {
        let text = MINIMAL.replace(
            "noise_cov = [[1.0]]\n",
            "noise_cov = [[1.0]]\nmeasurements = [[1.0], [1.0, 2.0]]\n",
        );
        let e = parse(&text, Path::new(".")).unwrap_err();
        assert_eq!(e.field, "likelihood.measurements[1]");
        assert_eq!(e.line, Some(13));
    }

    #[test]
    fn unknown_field_is_reported() {
        let text = MINIMAL.replace("dim = 1", "dim = 1\nbogus = 2");
        let e = parse(&text, Path::new(".")).unwrap_err();
        assert_eq!(e.field, "bogus");
        assert!(e.line.is_some());
    }

    #[test]
    fn reset_policy_is_mapped() {
        let c = parse(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(c.scenario.flow.reset, ReferenceReset::OnDemand);
        let every = format!("{MINIMAL}\n[flow]\nreset = \"every\"\nreset_every = 4\n");
        assert_eq!(parse(&every, Path::new(".")).unwrap().scenario.flow.reset, ReferenceReset::Every(4));
        let zero = every.replace("reset_every = 4", "reset_every = 0");
        assert_eq!(parse(&zero, Path::new(".")).unwrap_err().field, "flow");
    }
}
