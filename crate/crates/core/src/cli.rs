//! Experiment orchestration: versioned JSON configs, seeding, replica
//! scheduling with checkpoints, the constants cache, atomic result files
//! and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::chenstein::{self, ChenSteinInput};
use crate::error::{Error, Result};
use crate::excursion::{self, AnnulusSpec, ExitChainOptions};
use crate::gff::{self, GffSpec, HighPointAccumulator, HighPointSpec};
use crate::hitting::{self, ConstantsParams, GreenConstants};
use crate::lattice::{LatticeConfig, Point, PointSet};
use crate::oracle::JointTable;
use crate::rng;
use crate::stats::{self, Statistic};
use crate::uncovered::{
    self, BernoulliFieldSpec, BernoulliProb, FmEstimate, RunOptions, SurrogateInputs, SurrogateParams,
};
use crate::walk::WalkState;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    WalkUncovered,
    Surrogate,
    ExcursionDiagnostics,
    HittingConstants,
    ChenStein,
    Gff,
    Discriminate,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::WalkUncovered => "walk-uncovered",
            Self::Surrogate => "surrogate",
            Self::ExcursionDiagnostics => "excursion-diagnostics",
            Self::HittingConstants => "hitting-constants",
            Self::ChenStein => "chen-stein",
            Self::Gff => "gff",
            Self::Discriminate => "discriminate",
        }
    }

    fn needs_alpha(&self) -> bool {
        matches!(self, Self::WalkUncovered | Self::Surrogate | Self::Gff | Self::Discriminate)
    }

    fn needs_constants(&self) -> bool {
        !matches!(self, Self::ChenStein | Self::ExcursionDiagnostics)
    }
}

/// Random set compared against its matched Bernoulli field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetSource {
    Uncovered,
    Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub d: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    /// Pooled excursions for the `f`, `m`, `T` estimates.
    #[serde(default = "default_excursions")]
    pub excursions: u64,
    /// Independent walks the pooled excursions are split over.
    #[serde(default = "default_fm_replicas")]
    pub fm_replicas: usize,
    /// Walk step cap as a multiple of the horizon.
    #[serde(default = "default_step_cap_factor")]
    pub step_cap_factor: u64,
    /// Samples per replica (hitting, gff) or walks for constants.
    #[serde(default = "default_samples")]
    pub samples: u64,
    /// Largest index set for chen-stein instances.
    #[serde(default = "default_max_k")]
    pub max_k: usize,
    /// Field samples written to the gff snapshot.
    #[serde(default)]
    pub snapshot_samples: usize,
}

fn default_excursions() -> u64 {
    2_000_000
}
fn default_fm_replicas() -> usize {
    8
}
fn default_step_cap_factor() -> u64 {
    20
}
fn default_samples() -> u64 {
    10_000
}
fn default_max_k() -> usize {
    12
}
fn default_epsilon() -> f64 {
    0.05
}
fn default_psi() -> f64 {
    0.05
}
fn default_eta() -> f64 {
    0.2
}
fn default_margin() -> f64 {
    0.25
}
fn default_replicas() -> u64 {
    10
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            excursions: default_excursions(),
            fm_replicas: default_fm_replicas(),
            step_cap_factor: default_step_cap_factor(),
            samples: default_samples(),
            max_k: default_max_k(),
            snapshot_samples: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub lattice: LatticeSpec,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_psi")]
    pub psi: f64,
    /// Pair-split scale: pairs closer than `n^ζ` are "close".
    #[serde(default)]
    pub zeta: Option<f64>,
    /// Replaces `γ = 2α − 1 − ε` (surrogate radii) or the default ball
    /// exponent 1/2 (gff).
    #[serde(default)]
    pub gamma_override: Option<f64>,
    /// Explicit `[r, R]`.
    #[serde(default)]
    pub radii: Option<[f64; 2]>,
    #[serde(default = "default_replicas")]
    pub replicas: u64,
    #[serde(default)]
    pub seed: u64,
    /// Concentration window half-width.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Also run the `U(αt*)` vs `Ū` coupling check (surrogate).
    #[serde(default)]
    pub coupling: bool,
    #[serde(default)]
    pub source: Option<SetSource>,
    /// High points are taken in `[margin·n, (1−margin)·n]^d` (gff).
    #[serde(default = "default_margin")]
    pub interior_margin: f64,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Constants cache file; computed and saved there when missing.
    #[serde(default)]
    pub constants: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind, d: usize, n: usize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            experiment,
            lattice: LatticeSpec { d, n },
            alpha: None,
            epsilon: default_epsilon(),
            psi: default_psi(),
            zeta: None,
            gamma_override: None,
            radii: None,
            replicas: default_replicas(),
            seed: 0,
            eta: default_eta(),
            coupling: false,
            source: None,
            interior_margin: default_margin(),
            budgets: Budgets::default(),
            output_dir: None,
            constants: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn alpha(&self) -> Result<f64> {
        self.alpha
            .ok_or_else(|| Error::Config(format!("{} needs alpha", self.experiment.name())))
    }

    /// `γ` used by the experiment (before radii overrides).
    pub fn gamma(&self) -> Option<f64> {
        match self.experiment {
            ExperimentKind::Gff => Some(self.gamma_override.unwrap_or(0.5)),
            _ => self
                .gamma_override
                .or_else(|| self.alpha.map(|a| 2.0 * a - 1.0 - self.epsilon)),
        }
    }

    fn torus(&self) -> Result<LatticeConfig> {
        LatticeConfig::torus(self.lattice.d, self.lattice.n)
    }

    /// Surrogate radii: explicit, or `(n^{γ(1−ε)}, n^γ)`.
    pub fn surrogate_radii(&self) -> Result<(f64, f64)> {
        if let Some([r, big_r]) = self.radii {
            return Ok((r, big_r));
        }
        let gamma = self.gamma().ok_or_else(|| Error::Config("radii or alpha required".into()))?;
        let n = self.lattice.n as f64;
        Ok((n.powf(gamma * (1.0 - self.epsilon)), n.powf(gamma)))
    }

    /// Checks every precondition that can be checked before launch.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let kind = self.experiment;
        match kind {
            ExperimentKind::Gff => LatticeConfig::boxed(self.lattice.d, self.lattice.n)?,
            _ => self.torus()?,
        };
        if kind.needs_alpha() {
            let a = self.alpha()?;
            if !(a > 0.0 && a < 1.0) {
                return bad(format!("alpha = {a} must lie in (0,1)"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon = {} must lie in (0,1)", self.epsilon));
        }
        if !(self.psi > 0.0) {
            return bad(format!("psi = {} must be positive", self.psi));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("eta = {} must lie in (0,1)", self.eta));
        }
        if let Some(g) = self.gamma_override {
            if !(g > 0.0 && g < 1.0) {
                return bad(format!("gamma_override = {g} must lie in (0,1)"));
            }
        }
        if let Some(z) = self.zeta {
            let g = self.gamma().unwrap_or(0.0);
            let hi = g * (1.0 - self.epsilon);
            if !(z > 0.0 && z < hi) {
                return bad(format!("zeta = {z} must satisfy 0 < zeta < gamma(1-epsilon) = {hi}"));
            }
        }
        if let Some([r, big_r]) = self.radii {
            if !(r > 0.0 && big_r > r) {
                return bad(format!("radii [{r}, {big_r}] must satisfy 0 < r < R"));
            }
        }
        if self.budgets.fm_replicas < 2 {
            return bad("budgets.fm_replicas must be at least 2".into());
        }
        if self.budgets.step_cap_factor == 0 {
            return bad("budgets.step_cap_factor must be positive".into());
        }
        if !(self.budgets.max_k >= 1 && self.budgets.max_k <= chenstein::MAX_TINY) {
            return bad(format!("budgets.max_k must lie in 1..={}", chenstein::MAX_TINY));
        }
        if !(self.interior_margin > 0.0 && self.interior_margin < 0.5) {
            return bad(format!("interior_margin = {} must lie in (0,1/2)", self.interior_margin));
        }
        match kind {
            ExperimentKind::Surrogate | ExperimentKind::WalkUncovered | ExperimentKind::Discriminate => {
                let (r, big_r) = self.surrogate_radii()?;
                excursion::check_radii(&self.torus()?, r, big_r)?;
            }
            ExperimentKind::ExcursionDiagnostics => {
                let [r, big_r] = self
                    .radii
                    .ok_or_else(|| Error::Config("excursion-diagnostics needs radii".into()))?;
                excursion::check_radii(&self.torus()?, r, big_r)?;
            }
            _ => {}
        }
        if kind == ExperimentKind::Discriminate && self.replicas > 0 && self.replicas < 30 {
            return bad("discriminate needs at least 30 replicas".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the config with the output directory removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let text = serde_json::to_string(&c).expect("config serialises");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// One named parameter of a record and where its value came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub name: String,
    pub value: Option<f64>,
    pub provenance: String,
}

fn param(name: &str, value: Option<f64>, provenance: &str) -> ParamRow {
    ParamRow {
        name: name.into(),
        value,
        provenance: if value.is_some() { provenance.into() } else { "not applicable".into() },
    }
}

/// Names every record lists, in order.
pub const PARAMETER_NAMES: [&str; 12] = ["alpha", "gamma", "epsilon", "psi", "zeta", "delta", "r", "R", "m_hat", "T_hat", "t_star", "A"];

fn parameter_table(cfg: &ExperimentConfig, params: Option<&SurrogateParams>, gamma: Option<f64>, radii: Option<(f64, f64)>) -> Vec<ParamRow> {
    let from_params = |f: fn(&SurrogateParams) -> f64| params.map(f);
    let gamma_prov = if cfg.gamma_override.is_some() { "config" } else { "derived" };
    let radii_prov = if cfg.radii.is_some() { "config" } else { "derived" };
    vec![
        param("alpha", cfg.alpha, "config"),
        param("gamma", params.map(|p| p.gamma).or(gamma), gamma_prov),
        param("epsilon", Some(cfg.epsilon), "config"),
        param("psi", Some(cfg.psi), "config"),
        param("zeta", cfg.zeta, "config"),
        param("delta", from_params(|p| p.delta), "derived"),
        param("r", params.map(|p| p.r).or(radii.map(|r| r.0)), radii_prov),
        param("R", params.map(|p| p.big_r).or(radii.map(|r| r.1)), radii_prov),
        param("m_hat", from_params(|p| p.m), "estimated"),
        param("T_hat", from_params(|p| p.t), "estimated"),
        param("t_star", from_params(|p| p.t_star), "derived"),
        param("A", from_params(|p| p.budget as f64), "derived"),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub schema_version: u32,
    pub code_version: String,
    pub generator: String,
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub constants: Option<GreenConstants>,
    pub parameters: Vec<ParamRow>,
    pub replicas: Vec<Value>,
    pub summary: Value,
    pub wall_clock_seconds: f64,
    pub steps: u64,
}

impl ExperimentRecord {
    /// The deterministic part of the record: everything but timing and
    /// the per-replica payloads.
    pub fn summary_file(&self) -> Value {
        json!({
            "schema_version": self.schema_version,
            "code_version": self.code_version,
            "generator": self.generator,
            "experiment": self.experiment,
            "config_hash": self.config_hash,
            "parameters": self.parameters,
            "summary": self.summary,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Worker count: the available cores, capped by `COVERLAB_THREADS`.
pub fn worker_threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var("COVERLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .map_or(avail, |v| v.min(avail))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Checkpoint {
    config_hash: String,
    stages: BTreeMap<String, Value>,
}

/// Stage runner with resumable checkpoints. Replica stages are computed in
/// parallel chunks and merged in replica order.
struct Runner {
    path: PathBuf,
    ckpt: Checkpoint,
    pool: rayon::ThreadPool,
}

impl Runner {
    fn new(out: &Path, config_hash: &str) -> Result<Self> {
        let path = out.join("checkpoint.json");
        let ckpt = fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str::<Checkpoint>(&t).ok())
            .filter(|c| c.config_hash == config_hash)
            .unwrap_or_else(|| Checkpoint {
                config_hash: config_hash.into(),
                stages: BTreeMap::new(),
            });
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(worker_threads())
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self { path, ckpt, pool })
    }

    fn save(&self) -> Result<()> {
        atomic_write(&self.path, serde_json::to_string(&self.ckpt)?.as_bytes())
    }

    fn stage<T: Serialize + DeserializeOwned>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        if let Some(v) = self.ckpt.stages.get(name) {
            if let Ok(t) = serde_json::from_value(v.clone()) {
                return Ok(t);
            }
        }
        let t = f()?;
        self.ckpt.stages.insert(name.into(), serde_json::to_value(&t)?);
        self.save()?;
        Ok(t)
    }

    fn replicas<T, F>(&mut self, name: &str, count: u64, f: F) -> Result<Vec<T>>
    where
        T: Serialize + DeserializeOwned + Send,
        F: Fn(u64) -> Result<T> + Sync,
    {
        let key = |rep: u64| format!("{name}/{rep:06}");
        let mut missing: Vec<u64> = (0..count)
            .filter(|&rep| {
                self.ckpt
                    .stages
                    .get(&key(rep))
                    .is_none_or(|v| serde_json::from_value::<T>(v.clone()).is_err())
            })
            .collect();
        let chunk = self.pool.current_num_threads().max(1);
        while !missing.is_empty() {
            let take: Vec<u64> = missing.drain(..chunk.min(missing.len())).collect();
            let results: Vec<Result<T>> = self.pool.install(|| take.par_iter().map(|&rep| f(rep)).collect());
            for (rep, res) in take.into_iter().zip(results) {
                self.ckpt.stages.insert(key(rep), serde_json::to_value(res?)?);
            }
            self.save()?;
        }
        (0..count)
            .map(|rep| Ok(serde_json::from_value(self.ckpt.stages[&key(rep)].clone())?))
            .collect()
    }

    fn finish(self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Loads the constants cache at `path`, computing and saving it if absent.
pub fn load_or_compute_constants(d: usize, path: &Path) -> Result<GreenConstants> {
    if path.exists() {
        let c = GreenConstants::load(path)?;
        if c.d != d {
            return Err(Error::Config(format!(
                "constants cache {} is for d = {}, not {d}",
                path.display(),
                c.d
            )));
        }
        return Ok(c);
    }
    let c = hitting::estimate_constants(d, &ConstantsParams::default())?;
    c.save(path)?;
    Ok(c)
}

/// Seeds for the independent parts of one experiment.
fn part_seed(seed: u64, part: u64) -> u64 {
    rng::stream_seed(seed, 0xc0ff_ee00 + part)
}

struct Outcome {
    parameters: Vec<ParamRow>,
    replicas: Vec<Value>,
    summary: Value,
    steps: u64,
}

fn to_values<T: Serialize>(rows: &[T]) -> Result<Vec<Value>> {
    rows.iter().map(|r| Ok(serde_json::to_value(r)?)).collect()
}

/// Runs the experiment, writing `record.json` and `summary.json` under `out`.
pub fn run(config: &ExperimentConfig, out: &Path) -> Result<ExperimentRecord> {
    config.validate()?;
    let started = Instant::now();
    fs::create_dir_all(out)?;
    let hash = config.hash();
    let mut runner = Runner::new(out, &hash)?;
    let constants = if config.experiment.needs_constants() {
        let path = config
            .constants
            .clone()
            .unwrap_or_else(|| out.join(format!("constants_d{}.json", config.lattice.d)));
        Some(load_or_compute_constants(config.lattice.d, &path)?)
    } else {
        None
    };
    let c = constants.as_ref();
    let outcome = match config.experiment {
        ExperimentKind::Surrogate => run_surrogate(config, c.unwrap(), &mut runner)?,
        ExperimentKind::WalkUncovered => run_walk_uncovered(config, c.unwrap(), &mut runner)?,
        ExperimentKind::Discriminate => run_discriminate(config, c.unwrap(), &mut runner)?,
        ExperimentKind::ExcursionDiagnostics => run_excursion_diagnostics(config, &mut runner)?,
        ExperimentKind::HittingConstants => run_hitting(config, c.unwrap(), &mut runner)?,
        ExperimentKind::ChenStein => run_chen_stein(config, &mut runner)?,
        ExperimentKind::Gff => run_gff(config, c.unwrap(), &mut runner, out)?,
    };
    let record = ExperimentRecord {
        schema_version: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").into(),
        generator: rng::GENERATOR.into(),
        experiment: config.experiment,
        config: config.clone(),
        config_hash: hash,
        constants,
        parameters: outcome.parameters,
        replicas: outcome.replicas,
        summary: outcome.summary,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        steps: outcome.steps,
    };
    atomic_write(&out.join("record.json"), serde_json::to_string_pretty(&record)?.as_bytes())?;
    atomic_write(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&record.summary_file())?.as_bytes(),
    )?;
    runner.finish();
    Ok(record)
}

fn estimate_params(config: &ExperimentConfig, constants: &GreenConstants) -> Result<(LatticeConfig, FmEstimate, SurrogateParams)> {
    let cfg = config.torus()?;
    let (r, big_r) = config.surrogate_radii()?;
    let fm = uncovered::estimate_f_and_m(
        &cfg,
        r,
        big_r,
        config.budgets.excursions,
        part_seed(config.seed, 1),
        config.budgets.fm_replicas,
    )?;
    let explicit = config.radii.is_some() || config.gamma_override.is_some();
    let inputs = SurrogateInputs {
        alpha: config.alpha()?,
        epsilon: config.epsilon,
        psi: config.psi,
        radii: explicit.then_some((r, big_r)),
    };
    let params = uncovered::compute_params(&cfg, &inputs, constants, fm.t_hat, fm.m_hat)?;
    Ok((cfg, fm, params))
}

fn run_surrogate(config: &ExperimentConfig, constants: &GreenConstants, runner: &mut Runner) -> Result<Outcome> {
    let (cfg, fm, params) = estimate_params(config, constants)?;
    let seed = part_seed(config.seed, 2);
    let rows = runner.replicas("moments", config.replicas, |rep| {
        uncovered::moments_replica(&cfg, &params, &fm, seed, rep, config.eta)
    })?;
    let moments = uncovered::summarize_moments(&params, &fm, config.eta, &rows);
    let mut replicas = to_values(&rows)?;
    let mut summary = json!({
        "fm": fm.summary(),
        "params": params,
        "moments": moments,
    });
    let mut steps = params.horizon() * config.replicas;
    if config.coupling {
        let cap = config.budgets.step_cap_factor * params.horizon().max(1);
        let cseed = part_seed(config.seed, 3);
        let crow = runner.replicas("coupling", config.replicas, |rep| {
            uncovered::coupling_replica(&cfg, &params, cseed, rep, cap)
        })?;
        replicas.extend(to_values(&crow)?);
        summary["coupling"] = serde_json::to_value(uncovered::summarize_coupling(params.horizon(), crow))?;
        steps += params.horizon() * config.replicas;
    }
    if let (Some(z), true) = (config.zeta, config.replicas > 0) {
        let dist = (cfg.n() as f64).powf(z).round().max(1.0) as i64;
        let y = cfg.index(&Point::new(
            std::iter::once(dist).chain(std::iter::repeat_n(0, cfg.d() - 1)).collect(),
        ));
        let pm = uncovered::pair_moment(&cfg, &params, 0, y, config.replicas, part_seed(config.seed, 4), constants.p_d)?;
        summary["pair_moment"] = serde_json::to_value(pm)?;
    }
    Ok(Outcome {
        parameters: parameter_table(config, Some(&params), None, None),
        replicas,
        summary,
        steps,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SetRow {
    replica: u64,
    size: u64,
    adjacent_pairs: u64,
}

fn uncovered_set(cfg: &LatticeConfig, horizon: u64, seed: u64, rep: u64) -> Result<PointSet> {
    let mut walk = WalkState::start_stationary(cfg, seed, rep)?;
    Ok(walk.run_and_track(horizon, false).uncovered())
}

fn surrogate_set(cfg: &LatticeConfig, params: &SurrogateParams, seed: u64, rep: u64, cap: u64) -> Result<PointSet> {
    let sites: Vec<usize> = (0..cfg.volume()).collect();
    let set = uncovered::build_surrogate(
        cfg,
        params,
        &sites,
        seed,
        rep,
        RunOptions {
            step_cap: cap,
            snapshot_at: None,
            ftable: None,
        },
    )?;
    let idx = set
        .q
        .iter()
        .enumerate()
        .filter(|(_, q)| **q == Some(true))
        .map(|(i, _)| sites[i])
        .collect();
    Ok(PointSet::sparse(cfg.volume(), idx))
}

fn set_row(cfg: &LatticeConfig, s: &PointSet, replica: u64) -> SetRow {
    SetRow {
        replica,
        size: s.len() as u64,
        adjacent_pairs: stats::adjacent_pairs(s, cfg),
    }
}

fn run_walk_uncovered(config: &ExperimentConfig, constants: &GreenConstants, runner: &mut Runner) -> Result<Outcome> {
    let (cfg, fm, params) = estimate_params(config, constants)?;
    let horizon = params.horizon();
    let seed = part_seed(config.seed, 5);
    let rows = runner.replicas("uncovered", config.replicas, |rep| {
        Ok(set_row(&cfg, &uncovered_set(&cfg, horizon, seed, rep)?, rep))
    })?;
    let sizes: Vec<f64> = rows.iter().map(|r| r.size as f64).collect();
    let pairs: Vec<f64> = rows.iter().map(|r| r.adjacent_pairs as f64).collect();
    let (ms, ses) = stats::mean_se(&sizes);
    let (mp, sep) = stats::mean_se(&pairs);
    let vol = cfg.volume() as f64;
    let summary = json!({
        "fm": fm.summary(),
        "params": params,
        "horizon": horizon,
        "mean_uncovered": ms,
        "mean_uncovered_se": ses,
        "uncovered_fraction": ms / vol,
        "surrogate_prediction": (-fm.m_hat * params.budget as f64).exp(),
        "mean_adjacent_pairs": mp,
        "mean_adjacent_pairs_se": sep,
    });
    Ok(Outcome {
        parameters: parameter_table(config, Some(&params), None, None),
        replicas: to_values(&rows)?,
        summary,
        steps: horizon * config.replicas,
    })
}

fn run_discriminate(config: &ExperimentConfig, constants: &GreenConstants, runner: &mut Runner) -> Result<Outcome> {
    let (cfg, fm, params) = estimate_params(config, constants)?;
    let source = config.source.unwrap_or(SetSource::Uncovered);
    let horizon = params.horizon();
    let cap = config.budgets.step_cap_factor * horizon.max(1);
    let seed = part_seed(config.seed, 6);
    let rows = runner.replicas("sets", config.replicas, |rep| {
        let s = match source {
            SetSource::Uncovered => uncovered_set(&cfg, horizon, seed, rep)?,
            SetSource::Surrogate => surrogate_set(&cfg, &params, seed, rep, cap)?,
        };
        Ok(set_row(&cfg, &s, rep))
    })?;
    let vol = cfg.volume();
    let sizes: Vec<f64> = rows.iter().map(|r| r.size as f64).collect();
    // Matched marginal: p is the measured mean density, not an asymptotic rate.
    let p = if rows.is_empty() { 0.0 } else { stats::mean(&sizes) / vol as f64 };
    let bern = BernoulliFieldSpec::new(vol, BernoulliProb::Constant(p))?;
    let bseed = part_seed(config.seed, 7);
    let brows = runner.replicas("bernoulli", config.replicas, |rep| Ok(set_row(&cfg, &bern.sample(bseed, rep), rep)))?;
    let panel = [Statistic::AdjacentPairs, Statistic::Size];
    let mut tests = serde_json::Map::new();
    let mut tv_lower = 0.0f64;
    if config.replicas >= 30 {
        for st in panel {
            let pick = |r: &SetRow| match st {
                Statistic::AdjacentPairs => r.adjacent_pairs as f64,
                Statistic::Size => r.size as f64,
            };
            let a: Vec<f64> = rows.iter().map(pick).collect();
            let b: Vec<f64> = brows.iter().map(pick).collect();
            let rep = stats::discriminate_values(st, &a, &b)?;
            tv_lower = tv_lower.max(rep.tv_lower_bound);
            let mut v = serde_json::to_value(&rep)?;
            v["bonferroni_p"] = json!((rep.rank_test.p_value * panel.len() as f64).min(1.0));
            tests.insert(
                match st {
                    Statistic::AdjacentPairs => "adjacent_pairs".into(),
                    Statistic::Size => "size".into(),
                },
                v,
            );
        }
    }
    let summary = json!({
        "source": source,
        "fm": fm.summary(),
        "params": params,
        "matched_p": p,
        "tests": tests,
        "tv_lower_bound": tv_lower,
        "tv_note": stats::TV_PROXY_NOTE,
    });
    let mut replicas = to_values(&rows)?;
    replicas.extend(to_values(&brows)?);
    Ok(Outcome {
        parameters: parameter_table(config, Some(&params), None, None),
        replicas,
        summary,
        steps: horizon * config.replicas,
    })
}

fn run_excursion_diagnostics(config: &ExperimentConfig, runner: &mut Runner) -> Result<Outcome> {
    let cfg = config.torus()?;
    let [r, big_r] = config.radii.expect("validated");
    let a = AnnulusSpec::new(&cfg, Point::origin(cfg.d()), r, big_r)?;
    let n_exc = config.budgets.excursions;
    let seed = part_seed(config.seed, 8);
    let chain = runner.stage("exit-chain", || {
        let e = excursion::exit_chain(&cfg, &a, n_exc, seed, ExitChainOptions::default())?;
        Ok(json!({
            "support": e.support.len(),
            "samples": e.samples,
            "burn_in": e.burn_in,
            "wide_ci": e.wide_ci,
            "mixing_profile": e.mixing_profile,
            "pi_tilde_min": e.pi_tilde.iter().copied().fold(f64::INFINITY, f64::min),
            "pi_tilde_max": e.pi_tilde.iter().copied().fold(0.0, f64::max),
        }))
    })?;
    let (t_hat, t_se) = runner.stage("t-hat", || excursion::estimate_t(&cfg, &a, n_exc, seed))?;
    let t = (50.0 * t_hat).round() as u64;
    let conc = excursion::concentration_check(&cfg, &a, t, &[0.1, 0.2, 0.3, 0.5], t_hat, config.replicas, part_seed(config.seed, 9))?;
    let summary = json!({
        "exit_chain": chain,
        "t_hat": t_hat,
        "t_se": t_se,
        "concentration": conc,
    });
    let mut parameters = parameter_table(config, None, None, Some((r, big_r)));
    if let Some(row) = parameters.iter_mut().find(|p| p.name == "T_hat") {
        *row = param("T_hat", Some(t_hat), "estimated");
    }
    Ok(Outcome {
        parameters,
        replicas: Vec::new(),
        summary,
        steps: t * config.replicas,
    })
}

fn run_hitting(config: &ExperimentConfig, constants: &GreenConstants, runner: &mut Runner) -> Result<Outcome> {
    let [r, big_r] = config.radii.unwrap_or([6.0, 60.0]);
    let samples = config.budgets.samples * config.replicas;
    let seed = part_seed(config.seed, 10);
    let d = config.lattice.d;
    let report = runner.stage("conditional-hit", || {
        if samples == 0 {
            return Ok(Value::Null);
        }
        Ok(serde_json::to_value(hitting::conditional_hit_prob(d, r, big_r, samples, seed, Some(constants))?)?)
    })?;
    let (identity, identity_se) = constants.identity_check();
    let summary = json!({
        "constants": constants,
        "identity": identity,
        "identity_se": identity_se,
        "conditional_hit": report,
    });
    Ok(Outcome {
        parameters: parameter_table(config, None, None, Some((r, big_r))),
        replicas: Vec::new(),
        summary,
        steps: 0,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChenSteinRow {
    instance: u64,
    k: usize,
    exact_tv: f64,
    tv_bound: f64,
    b1: f64,
    b2: f64,
    b3: f64,
    violation: bool,
    independent_b2: f64,
    independent_b3: f64,
}

/// One random tiny instance: the dependent process and its independent
/// counterpart with singleton neighbourhoods.
pub fn chen_stein_instance(seed: u64, instance: u64, max_k: usize) -> Result<(ChenSteinInput, f64, ChenSteinInput)> {
    let mut rng = rng::substream(seed, instance, 0xc5);
    let k = rng.gen_range(2.min(max_k)..=max_k);
    let spec = chenstein::random_positive_process(k, &mut rng)?;
    let nb = chenstein::random_neighborhoods(k, &mut rng);
    let input = spec.exact_input(nb);
    let bern = BernoulliFieldSpec::new(k, BernoulliProb::PerSite(input.marginals.clone()))?;
    let tv = chenstein::exact_tv(&spec, &bern)?;
    let table = JointTable::independent(&input.marginals);
    let indep = chenstein::TinyProcessSpec::new(table.k, table.weights)?;
    let indep_input = indep.exact_input((0..k).map(|t| vec![t]).collect());
    Ok((input, tv, indep_input))
}

fn run_chen_stein(config: &ExperimentConfig, runner: &mut Runner) -> Result<Outcome> {
    let seed = part_seed(config.seed, 11);
    let max_k = config.budgets.max_k;
    let rows = runner.replicas("instances", config.replicas, |i| {
        let (input, tv, indep) = chen_stein_instance(seed, i, max_k)?;
        let b = chenstein::bounds(&input)?;
        let bi = chenstein::bounds(&indep)?;
        Ok(ChenSteinRow {
            instance: i,
            k: input.marginals.len(),
            exact_tv: tv,
            tv_bound: b.tv_bound,
            b1: b.b1,
            b2: b.b2,
            b3: b.b3,
            violation: tv > b.tv_bound + 1e-12,
            independent_b2: bi.b2,
            independent_b3: bi.b3,
        })
    })?;
    let summary = json!({
        "instances": rows.len(),
        "violations": rows.iter().filter(|r| r.violation).count(),
        "max_tv_over_bound": rows.iter().map(|r| r.exact_tv / r.tv_bound.max(f64::MIN_POSITIVE)).fold(0.0, f64::max),
        "independent_max_b2": rows.iter().map(|r| r.independent_b2.abs()).fold(0.0, f64::max),
        "independent_max_b3": rows.iter().map(|r| r.independent_b3.abs()).fold(0.0, f64::max),
    });
    Ok(Outcome {
        parameters: parameter_table(config, None, None, None),
        replicas: to_values(&rows)?,
        summary,
        steps: 0,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GffBatch {
    replica: u64,
    samples: u64,
    hits: Vec<u64>,
    pairs: Vec<(usize, usize, u64)>,
}

fn run_gff(config: &ExperimentConfig, constants: &GreenConstants, runner: &mut Runner, out: &Path) -> Result<Outcome> {
    let (d, n) = (config.lattice.d, config.lattice.n);
    let spec = GffSpec::new(d, n)?;
    let alpha = config.alpha()?;
    let hps = HighPointSpec::new(alpha, config.interior_margin, n, constants)?;
    let gamma = config.gamma().expect("gff gamma");
    let radius = (n as f64).powf(gamma);
    let per = config.budgets.samples;
    let seed = part_seed(config.seed, 12);
    if config.replicas > 0 {
        spec.factorization()?;
    }
    let batches = runner.replicas("batches", config.replicas, |rep| {
        let mut acc = HighPointAccumulator::new(&spec, &hps, radius);
        gff::sample_each(&spec, seed, (rep * per) as usize, per as usize, |f| acc.add(&f))?;
        Ok(GffBatch {
            replica: rep,
            samples: acc.samples(),
            hits: acc.hits().to_vec(),
            pairs: acc.pair_counts(),
        })
    })?;
    let mut acc = HighPointAccumulator::new(&spec, &hps, radius);
    for b in &batches {
        acc.absorb(&b.hits, &b.pairs, b.samples)?;
    }
    let center = spec.center();
    let dec = gff::markov_decompose(&spec, &center, radius)?;
    let mut summary = json!({
        "threshold": hps.threshold,
        "g0": constants.g0,
        "interior_margin": hps.interior_margin,
        "sites": acc.points().len(),
        "samples": acc.samples(),
        "ball_radius": radius,
        "decomposition": {
            "center": center,
            "v_phi2": dec.v_phi2,
            "v_h2": dec.v_h2,
            "v_xi2": dec.v_xi2,
            "identity_residual": dec.identity_residual,
            "harmonic_sum": dec.harmonic.iter().sum::<f64>(),
            "boundary_sites": dec.boundary.len(),
        },
    });
    if acc.samples() > 0 {
        let cmp = acc.finish(&spec)?;
        let check = gff::marginal_check(acc.hits(), &cmp.exact_marginals, acc.samples(), 0.01);
        let bounds = chenstein::bounds(&cmp.input)?;
        summary["marginals"] = serde_json::to_value(check)?;
        summary["chen_stein"] = serde_json::to_value(bounds)?;
    }
    let snap = config.budgets.snapshot_samples;
    if snap > 0 && config.replicas > 0 {
        let fields = gff::sample_field(&spec, seed, snap)?;
        gff::write_snapshot(&out.join("field.bin"), &spec, &fields, seed)?;
        let sets: Vec<PointSet> = fields.iter().map(|f| gff::high_points(&spec, f, &hps)).collect();
        gff::write_high_points_csv(&out.join("high_points.csv"), spec.config(), &sets)?;
    }
    Ok(Outcome {
        parameters: parameter_table(config, None, Some(gamma), None),
        replicas: to_values(&batches)?,
        summary,
        steps: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    Summary,
    Long,
    All,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "summary" => Ok(Self::Summary),
            "long" => Ok(Self::Long),
            "all" => Ok(Self::All),
            other => Err(Error::Usage(format!("unknown report format '{other}' (csv, summary, long, all)"))),
        }
    }
}

/// Scalar leaves of a JSON value as `(dotted.path, text)`.
pub fn flatten(v: &Value) -> Vec<(String, String)> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<(String, String)>) {
        let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
        match v {
            Value::Object(m) => m.iter().for_each(|(k, x)| walk(x, &join(k), out)),
            Value::Array(a) => a.iter().enumerate().for_each(|(i, x)| walk(x, &join(&i.to_string()), out)),
            Value::Null => out.push((prefix.into(), String::new())),
            Value::String(s) => out.push((prefix.into(), s.clone())),
            other => out.push((prefix.into(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    walk(v, "", &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub replica: usize,
    pub metric: String,
    pub value: String,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    atomic_write(path, &bytes)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Input(format!("{}: {e}", path.display()))))
        .collect()
}

/// Human-readable summary text.
pub fn summary_text(record: &ExperimentRecord) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment: {}", record.experiment.name());
    let _ = writeln!(s, "config hash: {}", record.config_hash);
    let _ = writeln!(s, "seed: {}  replicas: {}", record.config.seed, record.config.replicas);
    let _ = writeln!(s, "generator: {}", record.generator);
    let _ = writeln!(s, "code version: {}", record.code_version);
    let _ = writeln!(s, "\nparameters:");
    for p in &record.parameters {
        let v = p.value.map_or("-".to_string(), |v| format!("{v}"));
        let _ = writeln!(s, "  {:<8} {:>24}  ({})", p.name, v, p.provenance);
    }
    if let Some(c) = &record.constants {
        let _ = writeln!(s, "\nconstants: G0 = {}, p_d = {}, c_d = {}, C_d = {}", c.g0, c.p_d, c.c_d, c.big_c);
    }
    if let Some(tv) = record.summary.get("tv_lower_bound") {
        let _ = writeln!(s, "\nTV lower bound (statistic-level proxy): {tv}");
        let _ = writeln!(s, "  {}", stats::TV_PROXY_NOTE);
    }
    let _ = writeln!(s, "\nsummary:");
    for (k, v) in flatten(&record.summary) {
        let _ = writeln!(s, "  {k} = {v}");
    }
    let _ = writeln!(s, "\nwall clock: {:.3} s, steps: {}", record.wall_clock_seconds, record.steps);
    s
}

/// Emits report files into `dir`; returns their paths.
pub fn report(record: &ExperimentRecord, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let all = format == ReportFormat::All;
    if all || format == ReportFormat::Csv {
        let p = dir.join("parameters.csv");
        write_csv(&p, &record.parameters)?;
        written.push(p);
        let rows: Vec<SummaryRow> = flatten(&record.summary)
            .into_iter()
            .map(|(key, value)| SummaryRow { key, value })
            .collect();
        let p = dir.join("summary.csv");
        write_csv(&p, &rows)?;
        written.push(p);
    }
    if all || format == ReportFormat::Summary {
        let p = dir.join("summary.txt");
        atomic_write(&p, summary_text(record).as_bytes())?;
        written.push(p);
    }
    if all || format == ReportFormat::Long {
        let rows: Vec<LongRow> = record
            .replicas
            .iter()
            .enumerate()
            .flat_map(|(i, v)| {
                flatten(v).into_iter().map(move |(metric, value)| LongRow {
                    replica: i,
                    metric,
                    value,
                })
            })
            .collect();
        let p = dir.join("long.csv");
        write_csv(&p, &rows)?;
        written.push(p);
    }
    Ok(written)
}

/// Desk-scale presets, keyed by file stem.
pub fn presets() -> Vec<(String, ExperimentConfig)> {
    let mut out = Vec::new();
    let alphas = [0.55, 0.7, 0.875, 0.95];
    for n in [16usize, 32, 64] {
        // Largest radii that embed in the torus (2R < n/2).
        let radii = match n {
            16 => [1.5, 3.5],
            32 => [3.0, 7.5],
            _ => [3.0, 15.5],
        };
        for alpha in alphas {
            let mut c = ExperimentConfig::new(ExperimentKind::Surrogate, 3, n);
            c.alpha = Some(alpha);
            c.radii = Some(radii);
            c.seed = 1;
            out.push((format!("surrogate-n{n}-a{alpha}"), c));
        }
    }
    for (alpha, source) in [(0.55, SetSource::Uncovered), (0.95, SetSource::Surrogate)] {
        let mut c = ExperimentConfig::new(ExperimentKind::Discriminate, 3, 32);
        c.alpha = Some(alpha);
        c.radii = Some([3.0, 7.5]);
        c.replicas = 100;
        c.source = Some(source);
        c.seed = 1;
        out.push((format!("discriminate-n32-a{alpha}"), c));
    }
    for alpha in [0.7, 0.9] {
        let mut c = ExperimentConfig::new(ExperimentKind::Gff, 3, 16);
        c.alpha = Some(alpha);
        c.replicas = 20;
        c.budgets.samples = 10_000;
        c.seed = 1;
        out.push((format!("gff-n16-a{alpha}"), c));
    }
    let mut c = ExperimentConfig::new(ExperimentKind::ChenStein, 3, 16);
    c.replicas = 100;
    c.seed = 1;
    out.push(("chen-stein".into(), c));
    let mut c = ExperimentConfig::new(ExperimentKind::HittingConstants, 3, 16);
    c.radii = Some([6.0, 60.0]);
    c.replicas = 20;
    c.seed = 1;
    out.push(("hitting-constants".into(), c));
    let mut c = ExperimentConfig::new(ExperimentKind::ExcursionDiagnostics, 3, 32);
    c.radii = Some([3.0, 7.5]);
    c.budgets.excursions = 200_000;
    c.seed = 1;
    out.push(("excursion-diagnostics-n32".into(), c));
    out
}

/// Process exit code for an error: 2 for configuration problems, 3 for
/// resource or numerical failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Usage(_)
        | Error::Parameter(_)
        | Error::Input(_)
        | Error::Geometry(_)
        | Error::Domain(_)
        | Error::Json(_) => 2,
        Error::Io(_) | Error::Size(_) | Error::Budget(_) | Error::Numerical(_) | Error::Diagnostics(_) => 3,
    }
}
