//! Filter-bank estimation campaigns: run the bank on records, classify the
//! final candidate weights and decide how to refine the bracket.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::griddesign::{bank_for, redesign_avoiding, refine, GridDesign, GridRequest};
use crate::linalg::{c, pure_state, CMat};
use crate::model::{ModelSpec, QndModel};
use crate::rates::{augmented_mismatch, predicted_pi_rate};
use crate::reduced::{
    pi_log_ratio_slope, run_bank, simulate_reduced, AugmentedReducedState, FilterBank,
    FilterParams, SimplexVector,
};
use crate::sme::{simulate, MeasurementRecord, SimConfig};
use crate::stats::{mean, variance};
use crate::target::{ParamTarget, Regime};
use crate::{Error, Result};

pub const DEFAULT_TAU_HI: f64 = 0.99;
pub const DEFAULT_TAU_LO: f64 = 0.05;
/// Horizon multiple of the slowest predicted selection time.
pub const HORIZON_FACTOR: f64 = 10.0;
/// Below this multiple a warning is recorded.
pub const HORIZON_WARN_FACTOR: f64 = 5.0;
pub const MAX_REFINEMENTS: usize = 2;
pub const MAX_DOUBLINGS: usize = 3;

const THRESHOLD_SLACK: f64 = 1e-12;

/// Outcome of one record. Indices are zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeKind {
    SingleConvergence { n: usize },
    Oscillatory { n: usize, m: usize },
    InsufficientData,
}

impl std::fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OutcomeKind::SingleConvergence { n } => write!(f, "single_convergence({})", n + 1),
            OutcomeKind::Oscillatory { n, m } => write!(f, "oscillatory({},{})", n + 1, m + 1),
            OutcomeKind::InsufficientData => write!(f, "insufficient_data"),
        }
    }
}

/// Classifies final candidate weights.
///
/// One weight at or above `tau_hi` is a single convergence. Exactly two
/// adjacent weights at or above `tau_lo` whose sum reaches `tau_hi` is an
/// oscillation. Everything else is insufficient data.
pub fn classify(pi: &[f64], tau_hi: f64, tau_lo: f64) -> OutcomeKind {
    if let Some(n) = pi.iter().position(|&p| p >= tau_hi - THRESHOLD_SLACK) {
        return OutcomeKind::SingleConvergence { n };
    }
    let live: Vec<usize> = (0..pi.len())
        .filter(|&n| pi[n] >= tau_lo - THRESHOLD_SLACK)
        .collect();
    if let [n, m] = live[..] {
        if m == n + 1 && pi[n] + pi[m] >= tau_hi - THRESHOLD_SLACK {
            return OutcomeKind::Oscillatory { n, m };
        }
    }
    OutcomeKind::InsufficientData
}

/// A record together with the hash of the model that produced it.
#[derive(Clone, Debug)]
pub struct ReplayRecord {
    pub model_hash: String,
    pub record: MeasurementRecord,
}

#[derive(Clone, Debug)]
pub enum Source {
    /// Simulate records with the target moved to `truth_lambda`, starting from block weights `q0`.
    Simulate {
        truth_lambda: f64,
        q0: Vec<f64>,
    },
    Replay {
        records: Vec<ReplayRecord>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Simulator {
    /// Block-weight dynamics only; exact in law for the records.
    #[default]
    Reduced,
    /// Density-matrix SME started from `Σ_j √q0_j |first state of block j⟩`.
    Full,
}

#[derive(Clone, Debug)]
pub struct CampaignConfig {
    /// Calibrated model; the target parameter is overwritten per candidate.
    pub model: QndModel,
    pub target: ParamTarget,
    pub grid: GridDesign,
    pub source: Source,
    /// `None` applies the default horizon rule.
    pub horizon: Option<f64>,
    pub dt: f64,
    pub trajectories: usize,
    pub seed: u64,
    pub tau_hi: f64,
    pub tau_lo: f64,
    pub simulator: Simulator,
    /// Number of `π` samples along each path, for slope fits.
    pub samples: usize,
    /// Filter initial block weights; uniform when `None`.
    pub qhat0: Option<Vec<f64>>,
    pub jobs: usize,
}

impl CampaignConfig {
    pub fn new(model: QndModel, target: ParamTarget, grid: GridDesign, source: Source) -> Self {
        CampaignConfig {
            model,
            target,
            grid,
            source,
            horizon: None,
            dt: 1e-3,
            trajectories: 200,
            seed: 0,
            tau_hi: DEFAULT_TAU_HI,
            tau_lo: DEFAULT_TAU_LO,
            simulator: Simulator::Reduced,
            samples: 200,
            qhat0: None,
            jobs: 1,
        }
    }

    pub fn model_hash(&self) -> String {
        ModelSpec::from_model(&self.model).content_hash()
    }

    fn check(&self) -> Result<()> {
        non_identifiability_guard(&self.model, &self.target)?;
        let regime = self.target.regime(&self.model)?;
        if regime != self.grid.regime {
            return Err(Error::Config(format!(
                "grid regime {:?} does not match target regime {:?}",
                self.grid.regime, regime
            )));
        }
        if !(self.tau_hi > 1.0 - self.tau_lo && self.tau_hi <= 1.0 && self.tau_lo > 0.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy τ_hi > 1 − τ_lo, got {} and {}",
                self.tau_hi, self.tau_lo
            )));
        }
        if !(self.dt > 0.0) || self.samples < 2 || self.jobs == 0 {
            return Err(Error::Config(
                "dt must be positive, samples at least 2 and jobs at least 1".into(),
            ));
        }
        if let Source::Simulate { truth_lambda, q0 } = &self.source {
            if !(*truth_lambda > 0.0) {
                return Err(Error::Config("truth λ must be positive".into()));
            }
            if q0.len() != self.model.n_blocks() {
                return Err(Error::Config(
                    "q0 length differs from the number of blocks".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Slowest predicted selection rate over all ordered pairs with the truth at
/// each candidate (`κ = 1`); `None` for a one-candidate grid.
pub fn worst_predicted_rate(
    model: &QndModel,
    target: &ParamTarget,
    grid: &GridDesign,
) -> Result<Option<f64>> {
    let bank = bank_for(model, target, &grid.lambdas)?;
    let mut worst: Option<f64> = None;
    for (ns, &l) in grid.lambdas.iter().enumerate() {
        let truth = target.with_lambda(model, l)?;
        let (phi, psi) = augmented_mismatch(&truth, &bank)?;
        for n in (0..grid.n_count).filter(|&n| n != ns) {
            let r = predicted_pi_rate(&phi, &psi, n, ns).abs();
            worst = Some(worst.map_or(r, |w: f64| w.min(r)));
        }
    }
    Ok(worst)
}

/// Rounds `t` up to a whole number of steps.
fn on_grid(t: f64, dt: f64) -> f64 {
    let n = (t / dt - 1e-9).ceil().max(1.0);
    n * dt
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryResult {
    pub id: usize,
    pub seed: u64,
    pub outcome: OutcomeKind,
    pub pi_final: Vec<f64>,
    /// Candidate the slopes are measured against (the final argmax).
    pub reference: usize,
    /// Fitted slope of `log(π_n/π_reference)` over the final half of the horizon.
    pub slopes: Vec<f64>,
    /// Block the simulated truth collapsed to; unknown for replayed records.
    pub limit_block: Option<usize>,
    /// Some filter weight hit the underflow floor.
    pub clamped: bool,
}

/// Sign pattern of the cross-rate at a multi-channel gap, zero-based blocks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapDiagnostics {
    pub gap: usize,
    pub s_minus: Vec<usize>,
    pub s_zero: Vec<usize>,
    pub s_plus: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleStats {
    /// `(outcome, count)` sorted by outcome.
    pub outcome_counts: Vec<(OutcomeKind, usize)>,
    pub modal: OutcomeKind,
    pub pi_mean: Vec<f64>,
    /// Population variance.
    pub pi_var: Vec<f64>,
    /// Mean fitted slope versus the truth's cell, when known.
    pub mean_slopes: Option<Vec<f64>>,
    /// Predicted `log(π_n/π_{n*})` rates for the truth's cell, when known.
    pub predicted_rates: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CampaignResult {
    pub model_hash: String,
    pub regime: Regime,
    pub lambdas: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub tau_hi: f64,
    pub tau_lo: f64,
    pub truth_lambda: Option<f64>,
    pub trajectories: Vec<TrajectoryResult>,
    pub stats: EnsembleStats,
    pub gap: Option<GapDiagnostics>,
    pub warnings: Vec<String>,
}

impl CampaignResult {
    pub fn frequency(&self, kind: OutcomeKind) -> f64 {
        let c = self
            .stats
            .outcome_counts
            .iter()
            .find(|(k, _)| *k == kind)
            .map_or(0, |(_, c)| *c);
        c as f64 / self.trajectories.len().max(1) as f64
    }
}

/// Initial density matrix with amplitude `√q0_j` on the first state of block `j`.
pub fn block_superposition(model: &QndModel, q0: &[f64]) -> CMat {
    let mut psi = vec![c(0.0, 0.0); model.blocks.total_dim()];
    for (j, &q) in q0.iter().enumerate() {
        psi[model.blocks.offset(j)] = c(q.max(0.0).sqrt(), 0.0);
    }
    pure_state(&psi)
}

/// Runs the bank on every record of the campaign and classifies the results.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignResult> {
    cfg.check()?;
    let model_hash = cfg.model_hash();
    let params: Vec<FilterParams> = bank_for(&cfg.model, &cfg.target, &cfg.grid.lambdas)?;
    let bank = FilterBank::new(&cfg.model, &params)?;
    let mut warnings = Vec::new();
    let worst = worst_predicted_rate(&cfg.model, &cfg.target, &cfg.grid)?;

    let horizon = match (&cfg.source, cfg.horizon) {
        (Source::Replay { records }, _) => {
            let first = records
                .first()
                .ok_or_else(|| Error::Config("no records to replay".into()))?;
            for r in records {
                if r.model_hash != model_hash {
                    return Err(Error::HashMismatch {
                        record: r.model_hash.clone(),
                        model: model_hash,
                    });
                }
                if r.record.dt != first.record.dt || r.record.steps != first.record.steps {
                    return Err(Error::Config(
                        "replayed records differ in dt or length".into(),
                    ));
                }
            }
            first.record.horizon()
        }
        (_, Some(t)) => on_grid(t, cfg.dt),
        (_, None) => match worst {
            Some(w) if w > 0.0 => on_grid(HORIZON_FACTOR / w, cfg.dt),
            _ => {
                return Err(Error::Config(
                    "horizon must be given when the grid predicts no selection rate".into(),
                ))
            }
        },
    };
    if let Some(w) = worst {
        if horizon < HORIZON_WARN_FACTOR / w {
            warnings.push(format!(
                "horizon {horizon} is below {HORIZON_WARN_FACTOR}/|worst rate| = {}",
                HORIZON_WARN_FACTOR / w
            ));
        }
    }

    let n_traj = match &cfg.source {
        Source::Replay { records } => records.len(),
        Source::Simulate { .. } => cfg.trajectories,
    };
    let (truth, truth_lambda, q0) = match &cfg.source {
        Source::Simulate { truth_lambda, q0 } => {
            // Keep the calibrated model bit-for-bit when the truth is its own value.
            let truth = if *truth_lambda == cfg.target.lambda_of(&cfg.model)? {
                cfg.model.clone()
            } else {
                cfg.target.with_lambda(&cfg.model, *truth_lambda)?
            };
            (
                Some(truth),
                Some(*truth_lambda),
                Some(SimplexVector::new(q0.clone())?),
            )
        }
        Source::Replay { .. } => (None, None, None),
    };
    let qhat0 = match &cfg.qhat0 {
        Some(q) => q.clone(),
        None => vec![1.0; cfg.model.n_blocks()],
    };
    let ncand = cfg.grid.n_count;
    let pi0 = vec![1.0; ncand];

    let one = |id: usize| -> Result<TrajectoryResult> {
        let (record, limit_block) = match &cfg.source {
            Source::Replay { records } => (records[id].record.clone(), None),
            Source::Simulate { .. } => {
                let sc = SimConfig::new(horizon, cfg.dt, cfg.seed).stream(id as u64);
                let truth = truth.as_ref().expect("simulation truth");
                let q0 = q0.as_ref().expect("simulation q0");
                match cfg.simulator {
                    Simulator::Reduced => {
                        let t = simulate_reduced(truth, q0, &sc)?;
                        (t.record, t.limit_block)
                    }
                    Simulator::Full => {
                        let t = simulate(truth, &block_superposition(truth, &q0.q), &sc)?;
                        (t.record, t.limit_block)
                    }
                }
            }
        };
        let steps = record.steps;
        let sample_steps: Vec<usize> = (0..cfg.samples)
            .map(|i| (i * steps) / (cfg.samples - 1))
            .collect();
        let times: Vec<f64> = sample_steps.iter().map(|&s| s as f64 * record.dt).collect();
        let mut state = AugmentedReducedState::factorized(&pi0, &qhat0)?;
        let path = run_bank(&bank, &mut state, &record, &sample_steps)?;
        let pi_final = state.pi.clone();
        let reference = argmax(&pi_final);
        let mut slopes = Vec::with_capacity(ncand);
        for n in 0..ncand {
            let s = pi_log_ratio_slope(&times, &path, n, reference)?;
            slopes.push(s.slope);
        }
        Ok(TrajectoryResult {
            id,
            seed: record.seed,
            outcome: classify(&pi_final, cfg.tau_hi, cfg.tau_lo),
            pi_final,
            reference,
            slopes,
            limit_block,
            clamped: state.clamped,
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut trajectories = pool.install(|| {
        (0..n_traj)
            .into_par_iter()
            .map(one)
            .collect::<Result<Vec<_>>>()
    })?;
    trajectories.sort_by_key(|t| t.id);

    let truth_cell = truth_lambda.and_then(|l| match cfg.grid.locate(l) {
        crate::griddesign::Location::Interior(n) => Some(n),
        _ => None,
    });
    let stats = ensemble_stats(&trajectories, ncand, truth_cell, truth.as_ref(), &params)?;
    let gap = match (truth_lambda, truth.as_ref()) {
        (Some(l), Some(t)) => gap_diagnostics(&cfg.grid, l, t, &params)?,
        _ => None,
    };
    Ok(CampaignResult {
        model_hash,
        regime: cfg.grid.regime,
        lambdas: cfg.grid.lambdas.clone(),
        horizon,
        dt: cfg.dt,
        tau_hi: cfg.tau_hi,
        tau_lo: cfg.tau_lo,
        truth_lambda,
        trajectories,
        stats,
        gap,
        warnings,
    })
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

fn ensemble_stats(
    trajectories: &[TrajectoryResult],
    ncand: usize,
    truth_cell: Option<usize>,
    truth: Option<&QndModel>,
    params: &[FilterParams],
) -> Result<EnsembleStats> {
    let mut counts: Vec<(OutcomeKind, usize)> = Vec::new();
    for t in trajectories {
        match counts.iter_mut().find(|(k, _)| *k == t.outcome) {
            Some((_, c)) => *c += 1,
            None => counts.push((t.outcome, 1)),
        }
    }
    counts.sort_by_key(|(k, _)| *k);
    let modal = counts
        .iter()
        .max_by(|x, y| x.1.cmp(&y.1).then(y.0.cmp(&x.0)))
        .map_or(OutcomeKind::InsufficientData, |(k, _)| *k);
    let col = |n: usize| -> Vec<f64> { trajectories.iter().map(|t| t.pi_final[n]).collect() };
    let pi_mean = (0..ncand).map(|n| mean(&col(n))).collect();
    let pi_var = (0..ncand).map(|n| variance(&col(n))).collect();
    let (mean_slopes, predicted_rates) = match (truth_cell, truth) {
        (Some(ns), Some(truth)) => {
            let (phi, psi) = augmented_mismatch(truth, params)?;
            let pred = (0..ncand)
                .map(|n| {
                    if n == ns {
                        0.0
                    } else {
                        predicted_pi_rate(&phi, &psi, n, ns)
                    }
                })
                .collect();
            let here: Vec<&TrajectoryResult> =
                trajectories.iter().filter(|t| t.reference == ns).collect();
            let ms = if here.is_empty() {
                None
            } else {
                Some(
                    (0..ncand)
                        .map(|n| mean(&here.iter().map(|t| t.slopes[n]).collect::<Vec<_>>()))
                        .collect(),
                )
            };
            (ms, Some(pred))
        }
        _ => (None, None),
    };
    Ok(EnsembleStats {
        outcome_counts: counts,
        modal,
        pi_mean,
        pi_var,
        mean_slopes,
        predicted_rates,
    })
}

/// Sign pattern of `Σ_k Ψ̄_{n+1,j,n,j}` when the truth lies in the gap after candidate `n`.
pub fn gap_diagnostics(
    grid: &GridDesign,
    truth_lambda: f64,
    truth: &QndModel,
    params: &[FilterParams],
) -> Result<Option<GapDiagnostics>> {
    let crate::griddesign::Location::Gap(n) = grid.locate(truth_lambda) else {
        return Ok(None);
    };
    let (_, psi) = augmented_mismatch(truth, params)?;
    let mut d = GapDiagnostics {
        gap: n,
        s_minus: Vec::new(),
        s_zero: Vec::new(),
        s_plus: Vec::new(),
    };
    for j in 0..truth.n_blocks() {
        let v = psi.channel_sum(n + 1, j, n, j);
        if v.abs() <= 1e-12 {
            d.s_zero.push(j);
        } else if v < 0.0 {
            d.s_minus.push(j);
        } else {
            d.s_plus.push(j);
        }
    }
    Ok(Some(d))
}

/// Bookkeeping carried across refinement rounds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefinementState {
    pub oscillations: usize,
    pub doublings: usize,
    pub round: usize,
}

#[derive(Clone, Debug)]
pub enum Next {
    /// Estimation finished with an admissible interval for `λ`.
    Final {
        bracket: (f64, f64),
        reason: String,
    },
    Continue(Box<CampaignConfig>),
    /// Terminal: the data cannot resolve the parameter.
    InsufficientData {
        reason: String,
    },
}

fn fresh_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(round as u64 + 1))
}

/// Decides the next step from the modal outcome of a campaign.
pub fn drive_refinement(
    cfg: &CampaignConfig,
    result: &CampaignResult,
    state: &mut RefinementState,
) -> Result<Next> {
    state.round += 1;
    let grid = &cfg.grid;
    match result.stats.modal {
        OutcomeKind::SingleConvergence { n } => Ok(Next::Final {
            bracket: grid.final_bracket(n),
            reason: format!("single convergence to candidate {}", n + 1),
        }),
        OutcomeKind::Oscillatory { n, m } => {
            state.oscillations += 1;
            if state.oscillations > MAX_REFINEMENTS {
                return Ok(Next::InsufficientData {
                    reason: format!("oscillation persisted across {MAX_REFINEMENTS} refinements"),
                });
            }
            let (lo, hi) = refine(grid, (n, m))?;
            let req = &grid.request;
            if hi / lo <= req.bbar / req.abar {
                return Ok(Next::Final {
                    bracket: (lo, hi),
                    reason: "refined bracket reached the accuracy floor".into(),
                });
            }
            let boundary = if grid.regime == Regime::JumpMulti {
                grid.b * grid.lambdas[n] * grid.epsilon.sqrt()
            } else {
                grid.b * grid.lambdas[n]
            };
            let new_req = GridRequest {
                lambda_lo: lo,
                lambda_hi: hi,
                ..req.clone()
            };
            let new_grid = redesign_avoiding(&cfg.model, &cfg.target, &new_req, boundary)?;
            let mut next = cfg.clone();
            next.grid = new_grid;
            next.seed = fresh_seed(cfg.seed, state.round);
            Ok(Next::Continue(Box::new(next)))
        }
        OutcomeKind::InsufficientData => {
            state.oscillations = 0;
            if matches!(cfg.source, Source::Replay { .. }) {
                return Ok(Next::InsufficientData {
                    reason: "replayed records are too short to separate the candidates".into(),
                });
            }
            if state.doublings >= MAX_DOUBLINGS {
                return Ok(Next::InsufficientData {
                    reason: format!("no decision after {MAX_DOUBLINGS} horizon doublings"),
                });
            }
            state.doublings += 1;
            let mut next = cfg.clone();
            next.horizon = Some(2.0 * result.horizon);
            next.seed = fresh_seed(cfg.seed, state.round);
            Ok(Next::Continue(Box::new(next)))
        }
    }
}

/// Evidence that Hamiltonian and unmonitored-noise parameters cannot be
/// selected: two candidate filters differing only in such a parameter have
/// identical mismatch entries, so every `m ≠ n` rate vanishes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroRateCertificate {
    /// `max |Σ_k Φ̄_{m,i,n,i}|` over `m ≠ n`.
    pub max_phi: f64,
    /// `max |Σ_k Ψ̄_{m,i,n,i}|` over `m ≠ n`.
    pub max_psi: f64,
    /// Predicted selection rate of candidate 2 against candidate 1.
    pub rate: f64,
}

pub fn zero_rate_certificate(model: &QndModel) -> Result<ZeroRateCertificate> {
    let p = FilterParams::calibrated(model)?;
    let bank = vec![p.clone(), p];
    let (phi, psi) = augmented_mismatch(model, &bank)?;
    let mut cert = ZeroRateCertificate {
        max_phi: 0.0,
        max_psi: 0.0,
        rate: predicted_pi_rate(&phi, &psi, 1, 0),
    };
    for (m, n) in [(0, 1), (1, 0)] {
        for i in 0..model.n_blocks() {
            cert.max_phi = cert.max_phi.max(phi.channel_sum(m, i, n, i).abs());
            cert.max_psi = cert.max_psi.max(psi.channel_sum(m, i, n, i).abs());
        }
    }
    Ok(cert)
}

/// Rejects targets that no QND record can identify.
pub fn non_identifiability_guard(model: &QndModel, target: &ParamTarget) -> Result<()> {
    match target {
        ParamTarget::Mu | ParamTarget::Nu => {
            let cert = zero_rate_certificate(model)?;
            Err(Error::NonIdentifiable {
                param: target.name(),
                explanation: format!(
                    "the parameter does not enter the block-weight dynamics; candidate filters differing in it give \
                     max|Φ̄_(m,i,n,i)| = {:e}, max|Ψ̄_(m,i,n,i)| = {:e} for m ≠ n and selection rate {:e}",
                    cert.max_phi, cert.max_psi, cert.rate
                ),
            })
        }
        _ => target.check(model),
    }
}
