//! Configuration files, record persistence, manifests and the command
//! implementations behind the `qnd` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimator::{
    block_superposition, drive_refinement, non_identifiability_guard, run_campaign, CampaignConfig,
    CampaignResult, Next, OutcomeKind, RefinementState, ReplayRecord, Simulator, Source,
    DEFAULT_TAU_HI, DEFAULT_TAU_LO,
};
use crate::griddesign::{
    bank_for, design, evaluate, verify_design, DesignAudit, GridDesign, GridRequest, Objective,
};
use crate::model::{e_lc, gamma_table, sha256_hex, validate_qnd, ModelSpec, QndModel};
use crate::rates::{augmented_mismatch, mismatch_report, Tensor5};
use crate::reduced::{simulate_reduced, FilterParams, SimplexVector};
use crate::sme::{simulate, MeasurementRecord, SimConfig};
use crate::target::ParamTarget;
use crate::{Error, Result};

/// Environment variable overriding the default output directory.
pub const OUTPUT_DIR_ENV: &str = "QND_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "qnd-out";

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_INSUFFICIENT: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Infeasible { .. } => EXIT_INFEASIBLE,
        Error::Config(_)
        | Error::Structure(_)
        | Error::HashMismatch { .. }
        | Error::NonIdentifiable { .. } => EXIT_CONFIG,
        _ => EXIT_OTHER,
    }
}

/// `--out`, then the environment variable, then the default.
pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUTPUT_DIR),
    }
}

/// Round-trip float formatting with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// `sqrt_eta_gamma`, `zeta_iota`, `mu` or `nu`.
    pub target: String,
    /// Diffusive channel, one-based.
    #[serde(default)]
    pub channel: Option<usize>,
    /// Counting detector and source, one-based.
    #[serde(default)]
    pub detector: Option<usize>,
    #[serde(default)]
    pub source: Option<usize>,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub abar: f64,
    pub bbar: f64,
    #[serde(default)]
    pub objective: Objective,
    /// Explicit cell parameters; skips the search when `a` is given.
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub b: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl GridSection {
    pub fn target(&self) -> Result<ParamTarget> {
        let one = |v: Option<usize>, what: &str| -> Result<usize> {
            match v {
                Some(i) if i >= 1 => Ok(i - 1),
                Some(_) => Err(Error::Config(format!("{what} indices are one-based"))),
                None => Ok(0),
            }
        };
        match self.target.as_str() {
            "mu" => Ok(ParamTarget::Mu),
            "nu" => Ok(ParamTarget::Nu),
            "sqrt_eta_gamma" => Ok(ParamTarget::DiffusiveStrength {
                channel: one(self.channel, "channel")?,
            }),
            "zeta_iota" => {
                let detector = one(self.detector, "detector")?;
                let source = match self.source {
                    None => detector,
                    s => one(s, "source")?,
                };
                Ok(ParamTarget::JumpStrength { detector, source })
            }
            other => Err(Error::Config(format!(
                "unknown target {other:?}; expected sqrt_eta_gamma, zeta_iota, mu or nu"
            ))),
        }
    }

    pub fn request(&self) -> GridRequest {
        GridRequest {
            lambda_lo: self.lambda_lo,
            lambda_hi: self.lambda_hi,
            abar: self.abar,
            bbar: self.bbar,
            objective: self.objective,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSection {
    /// True value of the target; the model's own value when omitted.
    #[serde(default)]
    pub truth_lambda: Option<f64>,
    /// Initial block weights of the simulated truth; uniform when omitted.
    #[serde(default)]
    pub q0: Option<Vec<f64>>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub trajectories: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub tau_hi: Option<f64>,
    #[serde(default)]
    pub tau_lo: Option<f64>,
    #[serde(default)]
    pub simulator: Option<Simulator>,
    #[serde(default)]
    pub samples: Option<usize>,
    /// Maximum number of campaign rounds in the refinement loop.
    #[serde(default)]
    pub max_rounds: Option<usize>,
}

/// Run configuration with `[model]`, `[grid]` and `[campaign]` sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub campaign: Option<CampaignSection>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn grid(&self) -> Result<&GridSection> {
        self.grid
            .as_ref()
            .ok_or_else(|| Error::Config("missing [grid] section".into()))
    }

    pub fn campaign(&self) -> CampaignSection {
        self.campaign.clone().unwrap_or_default()
    }
}

/// A parsed configuration file and the hash of its bytes.
pub struct LoadedConfig {
    pub config: RunConfig,
    pub model: QndModel,
    pub config_hash: String,
    pub model_hash: String,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let config = RunConfig::parse(&text)?;
    let model = config.model.to_model()?;
    Ok(LoadedConfig {
        config_hash: sha256_hex(text.as_bytes()),
        model_hash: ModelSpec::from_model(&model).content_hash(),
        config,
        model,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub model_hash: String,
    pub code_version: String,
    pub seeds: Vec<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub files: Vec<FileEntry>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Tracks files written into an output directory.
struct Outputs {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, bytes)?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(p)
    }

    fn finish(
        mut self,
        command: &str,
        loaded: &LoadedConfig,
        seeds: Vec<u64>,
        started: u64,
    ) -> Result<RunManifest> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let m = RunManifest {
            command: command.into(),
            config_hash: loaded.config_hash.clone(),
            model_hash: loaded.model_hash.clone(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seeds,
            started_unix: started,
            finished_unix: now_unix(),
            files: self.files,
        };
        let json = serde_json::to_string_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(self.dir.join("manifest.json"), json)?;
        Ok(m)
    }
}

/// Record file: a `#` header line with the metadata, a column header, then
/// one row per step.
pub fn record_to_csv(record: &MeasurementRecord, model_hash: &str, stream: u64) -> String {
    let mut s = String::with_capacity(
        record.steps * (24 * record.n_diffusive + 4 * record.n_jump + 8) + 200,
    );
    let _ = writeln!(
        s,
        "# dt={} seed={} stream={} model={} n_diffusive={} n_jump={} steps={}",
        fmt_f64(record.dt),
        record.seed,
        stream,
        model_hash,
        record.n_diffusive,
        record.n_jump,
        record.steps
    );
    s.push_str("step");
    for k in 0..record.n_diffusive {
        let _ = write!(s, ",dY_{}", k + 1);
    }
    for k in 0..record.n_jump {
        let _ = write!(s, ",dN_{}", k + 1);
    }
    s.push('\n');
    for i in 0..record.steps {
        let _ = write!(s, "{i}");
        for y in record.dy_row(i) {
            s.push(',');
            s.push_str(&fmt_f64(*y));
        }
        for n in record.dn_row(i) {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
    }
    s
}

pub fn record_from_csv(text: &str) -> Result<ReplayRecord> {
    let bad = |m: &str| Error::Config(format!("malformed record file: {m}"));
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| bad("missing metadata line"))?;
    let mut dt = None;
    let mut seed = None;
    let mut model = None;
    let mut nd = None;
    let mut nj = None;
    let mut steps = None;
    for kv in header.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(kv))?;
        match k {
            "dt" => dt = v.parse::<f64>().ok(),
            "seed" => seed = v.parse::<u64>().ok(),
            "model" => model = Some(v.to_string()),
            "n_diffusive" => nd = v.parse::<usize>().ok(),
            "n_jump" => nj = v.parse::<usize>().ok(),
            "steps" => steps = v.parse::<usize>().ok(),
            _ => {}
        }
    }
    let (dt, seed, model, nd, nj, steps) = match (dt, seed, model, nd, nj, steps) {
        (Some(a), Some(b), Some(c), Some(d), Some(e), Some(f)) => (a, b, c, d, e, f),
        _ => return Err(bad("incomplete metadata")),
    };
    lines.next().ok_or_else(|| bad("missing column header"))?;
    let mut record = MeasurementRecord::new(dt, nd, nj, seed);
    let mut dy = vec![0.0; nd];
    let mut dn = vec![0u32; nj];
    for (i, line) in lines.enumerate() {
        let mut cols = line.split(',');
        let step: usize = cols
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad("step column"))?;
        if step != i {
            return Err(bad("steps out of order"));
        }
        for y in dy.iter_mut() {
            *y = cols
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad("dY column"))?;
        }
        for n in dn.iter_mut() {
            *n = cols
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad("dN column"))?;
        }
        record.push(&dy, &dn);
    }
    if record.steps != steps {
        return Err(bad("row count differs from the metadata"));
    }
    Ok(ReplayRecord {
        model_hash: model,
        record,
    })
}

fn path_csv(times: &[f64], path: &[Vec<f64>], prefix: &str) -> String {
    let mut s = String::from("t");
    let width = path.first().map_or(0, |r| r.len());
    for j in 0..width {
        let _ = write!(s, ",{prefix}_{}", j + 1);
    }
    s.push('\n');
    for (t, row) in times.iter().zip(path) {
        s.push_str(&fmt_f64(*t));
        for v in row {
            s.push(',');
            s.push_str(&fmt_f64(*v));
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct SimulateOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    pub trajectories: usize,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    pub jobs: usize,
    pub simulator: Simulator,
    /// Number of evenly spaced block-weight samples per trajectory.
    pub checkpoints: usize,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Simulates trajectories of the configured model and writes records, block
/// weight paths and a manifest.
pub fn simulate_cmd(opts: &SimulateOptions) -> Result<RunManifest> {
    let started = now_unix();
    let loaded = load_config(&opts.config)?;
    let model = &loaded.model;
    let report = validate_qnd(model)?;
    if !report.is_empty() {
        let v: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::Config(format!(
            "model violates the QND assumptions: {}",
            v.join("; ")
        )));
    }
    let q0 = loaded
        .config
        .campaign()
        .q0
        .unwrap_or_else(|| vec![1.0; model.n_blocks()]);
    let q0 = SimplexVector::new(q0)?;
    if opts.checkpoints < 2 {
        return Err(Error::Config("at least two checkpoints are needed".into()));
    }
    let base = SimConfig::new(opts.horizon, opts.dt, opts.seed);
    let steps = base.steps()?;
    crate::sme::intensity_guard(model, opts.dt)?;
    let cps: Vec<f64> = (0..opts.checkpoints)
        .map(|i| ((i * steps) / (opts.checkpoints - 1)) as f64 * opts.dt)
        .collect();
    let rho0 = block_superposition(model, &q0.q);
    let files = pool(opts.jobs)?.install(|| {
        (0..opts.trajectories)
            .into_par_iter()
            .map(|id| -> Result<(String, String)> {
                let cfg = base.clone().stream(id as u64).checkpoints(cps.clone());
                let (record, times, qp) = match opts.simulator {
                    Simulator::Full => {
                        let t = simulate(model, &rho0, &cfg)?;
                        (t.record, t.checkpoint_times, t.q_path)
                    }
                    Simulator::Reduced => {
                        let t = simulate_reduced(model, &q0, &cfg)?;
                        (t.record, t.checkpoint_times, t.q_path)
                    }
                };
                Ok((
                    record_to_csv(&record, &loaded.model_hash, id as u64),
                    path_csv(&times, &qp, "q"),
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut out = Outputs::new(&opts.out)?;
    for (id, (rec, qp)) in files.iter().enumerate() {
        out.write(&format!("records/record_{id:05}.csv"), rec.as_bytes())?;
        out.write(&format!("qpaths/q_{id:05}.csv"), qp.as_bytes())?;
    }
    out.finish("simulate", &loaded, vec![opts.seed], started)
}

/// Reads every `record_*.csv` in a directory, in name order.
pub fn read_records(dir: &Path) -> Result<Vec<ReplayRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("record_") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no record files in {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| record_from_csv(&fs::read_to_string(p)?))
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct EstimateOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    /// Replay records from this directory instead of simulating.
    pub records: Option<PathBuf>,
    pub jobs: usize,
    pub trajectories: Option<usize>,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    pub seed: Option<u64>,
    pub simulator: Option<Simulator>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EstimateStatus {
    Final { bracket: (f64, f64), reason: String },
    InsufficientData { reason: String },
}

/// One-based outcome as written to files.
#[derive(Serialize)]
struct OutcomeOut {
    kind: &'static str,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    candidates: Vec<usize>,
}

fn outcome_out(o: OutcomeKind) -> OutcomeOut {
    match o {
        OutcomeKind::SingleConvergence { n } => OutcomeOut {
            kind: "single_convergence",
            candidates: vec![n + 1],
        },
        OutcomeKind::Oscillatory { n, m } => OutcomeOut {
            kind: "oscillatory",
            candidates: vec![n + 1, m + 1],
        },
        OutcomeKind::InsufficientData => OutcomeOut {
            kind: "insufficient_data",
            candidates: vec![],
        },
    }
}

#[derive(Serialize)]
struct TrajectoryLine<'a> {
    round: usize,
    id: usize,
    seed: u64,
    outcome: OutcomeOut,
    pi_final: &'a [f64],
    reference: usize,
    slopes: &'a [f64],
    clamped: bool,
}

#[derive(Serialize)]
struct RoundOut<'a> {
    round: usize,
    grid: &'a GridDesign,
    horizon: f64,
    dt: f64,
    tau_hi: f64,
    tau_lo: f64,
    seed: u64,
    outcome_counts: Vec<(OutcomeOut, usize)>,
    modal: OutcomeOut,
    warnings: &'a [String],
}

#[derive(Serialize)]
struct EstimateOut<'a> {
    target: String,
    result: &'a EstimateStatus,
    rounds: Vec<RoundOut<'a>>,
}

fn jsonl(round: usize, r: &CampaignResult) -> Result<String> {
    let mut s = String::new();
    for t in &r.trajectories {
        let line = TrajectoryLine {
            round,
            id: t.id,
            seed: t.seed,
            outcome: outcome_out(t.outcome),
            pi_final: &t.pi_final,
            reference: t.reference + 1,
            slopes: &t.slopes,
            clamped: t.clamped,
        };
        s.push_str(&serde_json::to_string(&line).map_err(|e| Error::Config(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

fn summary_rows(round: usize, r: &CampaignResult, s: &mut String) {
    for n in 0..r.lambdas.len() {
        let single = r.frequency(OutcomeKind::SingleConvergence { n });
        let pred = r
            .stats
            .predicted_rates
            .as_ref()
            .map_or(String::new(), |p| fmt_f64(p[n]));
        let slope = r
            .stats
            .mean_slopes
            .as_ref()
            .map_or(String::new(), |p| fmt_f64(p[n]));
        let _ = writeln!(
            s,
            "{round},{},{},{},{},{},{},{}",
            n + 1,
            fmt_f64(r.lambdas[n]),
            fmt_f64(r.stats.pi_mean[n]),
            fmt_f64(r.stats.pi_var[n]),
            fmt_f64(single),
            pred,
            slope
        );
    }
}

fn build_grid(model: &QndModel, target: &ParamTarget, g: &GridSection) -> Result<GridDesign> {
    let req = g.request();
    match g.a {
        Some(a) => {
            let grid = evaluate(
                model,
                target,
                &req,
                a,
                g.b.unwrap_or(f64::NAN),
                g.epsilon.unwrap_or(1.0),
            )?;
            if let Some(f) = grid.report.binding() {
                return Err(Error::Infeasible {
                    binding: format!("{} (margin {:e})", f.name, f.margin),
                });
            }
            Ok(grid)
        }
        None => design(model, target, &req),
    }
}

/// Runs the estimation loop and writes `results.jsonl`, `summary.csv`,
/// `estimate.json` and a manifest.
pub fn estimate_cmd(opts: &EstimateOptions) -> Result<(EstimateStatus, RunManifest)> {
    let started = now_unix();
    let loaded = load_config(&opts.config)?;
    let model = &loaded.model;
    let gs = loaded.config.grid()?;
    let target = gs.target()?;
    non_identifiability_guard(model, &target)?;
    let camp = loaded.config.campaign();
    let grid = build_grid(model, &target, gs)?;
    let source = match &opts.records {
        Some(dir) => Source::Replay {
            records: read_records(dir)?,
        },
        None => Source::Simulate {
            truth_lambda: match camp.truth_lambda {
                Some(l) => l,
                None => target.lambda_of(model)?,
            },
            q0: camp
                .q0
                .clone()
                .unwrap_or_else(|| vec![1.0; model.n_blocks()]),
        },
    };
    let mut cfg = CampaignConfig::new(model.clone(), target.clone(), grid, source);
    cfg.horizon = opts.horizon.or(camp.horizon);
    cfg.dt = opts.dt.or(camp.dt).unwrap_or(cfg.dt);
    if let Source::Replay { records } = &cfg.source {
        cfg.dt = records[0].record.dt;
    }
    cfg.trajectories = opts
        .trajectories
        .or(camp.trajectories)
        .unwrap_or(cfg.trajectories);
    cfg.seed = opts.seed.or(camp.seed).unwrap_or(cfg.seed);
    cfg.tau_hi = camp.tau_hi.unwrap_or(DEFAULT_TAU_HI);
    cfg.tau_lo = camp.tau_lo.unwrap_or(DEFAULT_TAU_LO);
    cfg.simulator = opts.simulator.or(camp.simulator).unwrap_or_default();
    cfg.samples = camp.samples.unwrap_or(cfg.samples);
    cfg.jobs = opts.jobs.max(1);
    let max_rounds = camp.max_rounds.unwrap_or(8).max(1);

    let mut state = RefinementState::default();
    let mut rounds: Vec<(CampaignConfig, CampaignResult)> = Vec::new();
    let status = loop {
        let result = run_campaign(&cfg)?;
        let next = drive_refinement(&cfg, &result, &mut state)?;
        rounds.push((cfg.clone(), result));
        match next {
            Next::Final { bracket, reason } => break EstimateStatus::Final { bracket, reason },
            Next::InsufficientData { reason } => break EstimateStatus::InsufficientData { reason },
            Next::Continue(c) => {
                if rounds.len() >= max_rounds {
                    break EstimateStatus::InsufficientData {
                        reason: format!("no decision within {max_rounds} rounds"),
                    };
                }
                cfg = *c;
            }
        }
    };

    let mut out = Outputs::new(&opts.out)?;
    let mut lines = String::new();
    let mut summary = String::from("round,candidate,lambda_hat,pi_mean,pi_var,single_convergence_freq,predicted_rate,mean_slope\n");
    for (i, (_, r)) in rounds.iter().enumerate() {
        lines.push_str(&jsonl(i + 1, r)?);
        summary_rows(i + 1, r, &mut summary);
    }
    out.write("results.jsonl", lines.as_bytes())?;
    out.write("summary.csv", summary.as_bytes())?;
    let doc = EstimateOut {
        target: target.name(),
        result: &status,
        rounds: rounds
            .iter()
            .enumerate()
            .map(|(i, (c, r))| RoundOut {
                round: i + 1,
                grid: &c.grid,
                horizon: r.horizon,
                dt: r.dt,
                tau_hi: r.tau_hi,
                tau_lo: r.tau_lo,
                seed: c.seed,
                outcome_counts: r
                    .stats
                    .outcome_counts
                    .iter()
                    .map(|(k, n)| (outcome_out(*k), *n))
                    .collect(),
                modal: outcome_out(r.stats.modal),
                warnings: &r.warnings,
            })
            .collect(),
    };
    out.write(
        "estimate.json",
        serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::Config(e.to_string()))?
            .as_bytes(),
    )?;
    let seeds = rounds.iter().map(|(c, _)| c.seed).collect();
    let manifest = out.finish("estimate", &loaded, seeds, started)?;
    Ok((status, manifest))
}

#[derive(Serialize)]
struct GridOut<'a> {
    target: String,
    grid: &'a GridDesign,
    audit: &'a DesignAudit,
}

fn grid_text(grid: &GridDesign, audit: &DesignAudit) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "regime {:?}: a = {}, b = {}, eps = {}, {} candidates",
        grid.regime, grid.a, grid.b, grid.epsilon, grid.n_count
    );
    for (n, l) in grid.lambdas.iter().enumerate() {
        let (lo, hi) = grid.cell(n);
        let _ = writeln!(
            s,
            "  candidate {}: lambda_hat = {}, cell [{}, {}]",
            n + 1,
            fmt_f64(*l),
            fmt_f64(lo),
            fmt_f64(hi)
        );
    }
    for c in &grid.report.checks {
        let _ = writeln!(
            s,
            "  {:<28} {} margin {:e}",
            c.name,
            if c.passed { "ok  " } else { "FAIL" },
            c.margin
        );
    }
    let _ = writeln!(
        s,
        "audit: {} kappa points, min margin {:e}, {} violations",
        audit.points_checked,
        audit.min_margin,
        audit.violations.len()
    );
    s
}

/// Designs and audits the configured grid; writes `grid.json`.
pub fn grid_cmd(config: &Path, out_dir: &Path) -> Result<(String, RunManifest)> {
    let started = now_unix();
    let loaded = load_config(config)?;
    let gs = loaded.config.grid()?;
    let target = gs.target()?;
    non_identifiability_guard(&loaded.model, &target)?;
    let grid = build_grid(&loaded.model, &target, gs)?;
    let audit = verify_design(&loaded.model, &target, &grid)?;
    let mut out = Outputs::new(out_dir)?;
    let doc = GridOut {
        target: target.name(),
        grid: &grid,
        audit: &audit,
    };
    out.write(
        "grid.json",
        serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::Config(e.to_string()))?
            .as_bytes(),
    )?;
    let text = grid_text(&grid, &audit);
    Ok((text, out.finish("grid", &loaded, vec![], started)?))
}

fn tensor_rows(t: &Tensor5) -> Vec<Vec<f64>> {
    // Rows (m, i), columns (n, j), channel sums.
    let mut rows = Vec::new();
    for m in 0..t.candidates {
        for i in 0..t.blocks {
            let mut row = Vec::new();
            for n in 0..t.candidates {
                for j in 0..t.blocks {
                    row.push(t.channel_sum(m, i, n, j));
                }
            }
            rows.push(row);
        }
    }
    rows
}

#[derive(Serialize)]
struct RatesOut {
    e_lc: f64,
    gamma: Vec<Vec<f64>>,
    /// `[k][i][j]` for the calibrated filter.
    phi: Vec<Vec<Vec<f64>>>,
    psi: Vec<Vec<Vec<f64>>>,
    condition1: Vec<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bank: Option<BankRates>,
}

#[derive(Serialize)]
struct BankRates {
    target: String,
    truth_lambda: f64,
    grid: GridDesign,
    audit: DesignAudit,
    /// Channel-summed `Φ̄` with rows `(m, i)` and columns `(n, j)`.
    phi_bar: Vec<Vec<f64>>,
    psi_bar: Vec<Vec<f64>>,
}

/// Writes `rates.json` with the separation constant, rate tables and, when a
/// grid is configured, the augmented tables and the grid condition report.
pub fn rates_cmd(config: &Path, out_dir: &Path) -> Result<(String, RunManifest)> {
    let started = now_unix();
    let loaded = load_config(config)?;
    let model = &loaded.model;
    let elc = e_lc(model);
    let rep = mismatch_report(model, &FilterParams::calibrated(model)?)?;
    let mut text = format!("E_lc = {}\n", fmt_f64(elc));
    let bank = match &loaded.config.grid {
        None => None,
        Some(gs) => {
            let target = gs.target()?;
            non_identifiability_guard(model, &target)?;
            let grid = build_grid(model, &target, gs)?;
            let audit = verify_design(model, &target, &grid)?;
            let truth_lambda = match loaded.config.campaign().truth_lambda {
                Some(l) => l,
                None => target.lambda_of(model)?,
            };
            let truth = target.with_lambda(model, truth_lambda)?;
            let params = bank_for(model, &target, &grid.lambdas)?;
            let (phi, psi) = augmented_mismatch(&truth, &params)?;
            text.push_str(&grid_text(&grid, &audit));
            Some(BankRates {
                target: target.name(),
                truth_lambda,
                phi_bar: tensor_rows(&phi),
                psi_bar: tensor_rows(&psi),
                grid,
                audit,
            })
        }
    };
    let doc = RatesOut {
        e_lc: elc,
        gamma: gamma_table(model).values,
        phi: rep.phi,
        psi: rep.psi,
        condition1: rep.condition1_ok,
        bank,
    };
    let mut out = Outputs::new(out_dir)?;
    out.write(
        "rates.json",
        serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::Config(e.to_string()))?
            .as_bytes(),
    )?;
    Ok((text, out.finish("rates", &loaded, vec![], started)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUBIT: &str = r#"
[model]
block_dims = [1, 1]
[[model.diffusive]]
l = [[1.0, 0.0], [-1.0, 0.0]]
gamma = 1.0
eta = 0.5
[[model.jump]]
c = [[1.0, 0.0], [2.0, 0.0]]
iota = 1.0
theta = 0.3

[grid]
target = "sqrt_eta_gamma"
channel = 1
lambda_lo = 0.5
lambda_hi = 2.0
abar = 0.5
bbar = 1.5
"#;

    #[test]
    fn config_parses_and_rejects_unknown_keys() {
        let c = RunConfig::parse(QUBIT).unwrap();
        assert_eq!(
            c.grid().unwrap().target().unwrap(),
            ParamTarget::DiffusiveStrength { channel: 0 }
        );
        let bad = format!("{QUBIT}\nextra = 1\n");
        assert!(matches!(RunConfig::parse(&bad), Err(Error::Config(_))));
        let bad = QUBIT.replace("eta = 0.5", "eta = 0.5\nspeed = 2");
        assert!(RunConfig::parse(&bad).is_err());
    }

    #[test]
    fn record_csv_round_trip() {
        let mut r = MeasurementRecord::new(1e-3, 1, 2, 9);
        r.push(&[0.1234567890123456789], &[0, 1]);
        r.push(&[-3.0e-17], &[1, 0]);
        let text = record_to_csv(&r, "abc", 4);
        assert!(text.starts_with("# dt=1.0000000000000000e-3 seed=9 stream=4 model=abc"));
        assert!(text.contains("step,dY_1,dN_1,dN_2\n"));
        let back = record_from_csv(&text).unwrap();
        assert_eq!(back.model_hash, "abc");
        assert_eq!(back.record, r);
    }

    #[test]
    fn out_dir_precedence() {
        assert_eq!(resolve_out_dir(Some(Path::new("x"))), PathBuf::from("x"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(
            exit_code(&Error::Infeasible {
                binding: String::new()
            }),
            EXIT_INFEASIBLE
        );
        assert_eq!(exit_code(&Error::Config(String::new())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Domain(String::new())), EXIT_OTHER);
    }
}
