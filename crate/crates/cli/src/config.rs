//! Run configuration files: strict JSON, one experiment kind per file.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use oraclebench_core::experiments::active::ALConfig;
use oraclebench_core::experiments::scaling::ScalingGrid;
use oraclebench_core::experiments::shift::{ShiftConfig, ShiftProtocol};
use oraclebench_core::experiments::softlabels::SoftLabelConfig;
use oraclebench_core::experiments::worlds;
use oraclebench_core::oracle::{ClassPrior, FlowConfig, FlowTrainConfig, GaussianOracle, Oracle};
use oraclebench_core::validate::ValidateConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    TrainOracle,
    Validate,
    Scaling,
    Shift,
    Active,
    Softlabels,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::TrainOracle => "train-oracle",
            Kind::Validate => "validate",
            Kind::Scaling => "scaling",
            Kind::Shift => "shift",
            Kind::Active => "active",
            Kind::Softlabels => "softlabels",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum World {
    Scaling,
    SoftLabel,
    Shift,
    TwoRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    pub prior: ClassPrior,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

/// Where the oracle comes from: a built-in world, a saved oracle file, or an
/// inline diagonal-Gaussian spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSource {
    World(World),
    Path(PathBuf),
    Gaussian(GaussianSpec),
}

impl OracleSource {
    pub fn load(&self) -> Result<Oracle, CliError> {
        let setup = |e: oraclebench_core::Error| CliError::runtime("setup", e.to_string());
        match self {
            OracleSource::World(w) => match w {
                World::Scaling => worlds::scaling_world(),
                World::SoftLabel => worlds::soft_label_world(),
                World::Shift => worlds::shift_world(),
                World::TwoRegion => worlds::two_region_world(worlds::TWO_REGION_NOISE),
            }
            .map_err(setup),
            OracleSource::Path(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::runtime("setup", format!("{}: {e}", p.display())))?;
                Oracle::from_json(&text).map_err(setup)
            }
            OracleSource::Gaussian(g) => GaussianOracle::diagonal(g.prior.clone(), g.means.clone(), g.vars.clone())
                .map(Oracle::Gaussian)
                .map_err(setup),
        }
    }

    fn resolve(&mut self, base: &Path) {
        if let OracleSource::Path(p) = self {
            *p = base.join(&*p);
        }
    }

    fn paths(&self) -> Vec<(&'static str, &Path)> {
        match self {
            OracleSource::Path(p) => vec![("oracle.path", p.as_path())],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOracleParams {
    /// Samples per class drawn from the source oracle, unless `data_csv` is given.
    #[serde(default)]
    pub n_per_class: usize,
    /// CSV with feature columns followed by an integer label column.
    #[serde(default)]
    pub data_csv: Option<PathBuf>,
    #[serde(default)]
    pub flow: FlowConfig,
    pub train: FlowTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RealData {
    Csv(PathBuf),
    Sample { oracle: OracleSource, n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateParams {
    pub real: RealData,
    pub checks: ValidateConfig,
    #[serde(default = "hist_bins")]
    pub histogram_bins: usize,
}

fn hist_bins() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftParams {
    pub protocol: ShiftProtocol,
    pub configs: Vec<ShiftConfig>,
    #[serde(default)]
    pub matched: Vec<MatchedNoise>,
}

/// Input noise on the oracle prior, with σ solved so that its distribution
/// KL equals that of the named entry in `configs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchedNoise {
    pub name: String,
    pub match_kl_of: String,
    /// Defaults to the matched entry's size.
    #[serde(default)]
    pub n_train: Option<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig<P> {
    pub kind: Kind,
    pub oracle: OracleSource,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub jobs: Option<usize>,
    pub params: P,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    TrainOracle(TrainOracleParams),
    Validate(ValidateParams),
    Scaling(ScalingGrid),
    Shift(ShiftParams),
    Active(ALConfig),
    Softlabels(SoftLabelConfig),
}

/// A parsed, validated configuration plus its raw bytes (for hashing).
#[derive(Debug, Clone)]
pub struct Loaded {
    pub path: PathBuf,
    pub raw: Vec<u8>,
    pub config: RunConfig<Params>,
}

#[derive(Deserialize)]
struct KindOnly {
    kind: Kind,
}

fn parse_as<P: DeserializeOwned>(path: &Path, text: &str) -> Result<RunConfig<P>, CliError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let cfg: RunConfig<P> = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        CliError::Config {
            file: path.display().to_string(),
            line: inner.line(),
            column: inner.column(),
            field: (field != ".").then_some(field),
            message: inner.to_string(),
        }
    })?;
    de.end().map_err(|e| CliError::config_at(path, &e, None))?;
    Ok(cfg)
}

fn convert<P>(c: RunConfig<P>, f: impl FnOnce(P) -> Params) -> RunConfig<Params> {
    RunConfig {
        kind: c.kind,
        oracle: c.oracle,
        seeds: c.seeds,
        out: c.out,
        jobs: c.jobs,
        params: f(c.params),
    }
}

/// Read and validate a config for subcommand `expected`.
pub fn load(path: &Path, expected: Kind) -> Result<Loaded, CliError> {
    let raw = std::fs::read(path).map_err(|e| CliError::Config {
        file: path.display().to_string(),
        line: 0,
        column: 0,
        field: None,
        message: e.to_string(),
    })?;
    let text = String::from_utf8(raw.clone()).map_err(|e| CliError::Config {
        file: path.display().to_string(),
        line: 0,
        column: 0,
        field: None,
        message: format!("not UTF-8: {e}"),
    })?;
    let kind = serde_json::from_str::<KindOnly>(&text)
        .map_err(|e| CliError::config_at(path, &e, Some("kind")))?
        .kind;
    if kind != expected {
        return Err(CliError::config_field(
            path,
            "kind",
            format!(
                "config is for '{}' but the subcommand is '{}'",
                kind.name(),
                expected.name()
            ),
        ));
    }
    let mut config = match kind {
        Kind::TrainOracle => convert(parse_as(path, &text)?, Params::TrainOracle),
        Kind::Validate => convert(parse_as(path, &text)?, Params::Validate),
        Kind::Scaling => convert(parse_as(path, &text)?, Params::Scaling),
        Kind::Shift => convert(parse_as(path, &text)?, Params::Shift),
        Kind::Active => convert(parse_as(path, &text)?, Params::Active),
        Kind::Softlabels => convert(parse_as(path, &text)?, Params::Softlabels),
    };
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    resolve_paths(&mut config, &base);
    check(&config, path)?;
    Ok(Loaded {
        path: path.to_path_buf(),
        raw,
        config,
    })
}

fn resolve_paths(c: &mut RunConfig<Params>, base: &Path) {
    c.oracle.resolve(base);
    if let Some(o) = &mut c.out {
        *o = base.join(&*o);
    }
    match &mut c.params {
        Params::TrainOracle(p) => {
            if let Some(d) = &mut p.data_csv {
                *d = base.join(&*d);
            }
        }
        Params::Validate(p) => match &mut p.real {
            RealData::Csv(d) => *d = base.join(&*d),
            RealData::Sample { oracle, .. } => oracle.resolve(base),
        },
        _ => {}
    }
}

fn check(c: &RunConfig<Params>, path: &Path) -> Result<(), CliError> {
    if c.seeds.is_empty() {
        return Err(CliError::config_field(
            path,
            "seeds",
            "at least one seed is required".into(),
        ));
    }
    if c.jobs == Some(0) {
        return Err(CliError::config_field(path, "jobs", "must be at least 1".into()));
    }
    let mut paths = c.oracle.paths();
    match &c.params {
        Params::TrainOracle(p) => {
            if let Some(d) = &p.data_csv {
                paths.push(("params.data_csv", d.as_path()));
            } else if p.n_per_class == 0 {
                return Err(CliError::config_field(
                    path,
                    "params.n_per_class",
                    "set n_per_class or data_csv".into(),
                ));
            }
        }
        Params::Shift(p) => {
            for (i, m) in p.matched.iter().enumerate() {
                if !p.configs.iter().any(|c| c.name == m.match_kl_of) {
                    return Err(CliError::config_field(
                        path,
                        &format!("params.matched[{i}].match_kl_of"),
                        format!("no config named {:?}", m.match_kl_of),
                    ));
                }
            }
        }
        Params::Validate(p) => match &p.real {
            RealData::Csv(d) => paths.push(("params.real.csv", d.as_path())),
            RealData::Sample { oracle, .. } => paths.extend(
                oracle
                    .paths()
                    .into_iter()
                    .map(|(_, p)| ("params.real.sample.oracle.path", p)),
            ),
        },
        _ => {}
    }
    for (field, p) in paths {
        if !p.exists() {
            return Err(CliError::config_field(
                path,
                field,
                format!("{} does not exist", p.display()),
            ));
        }
    }
    Ok(())
}
