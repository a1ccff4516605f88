//! Reduced block-weight dynamics.
//!
//! Every update multiplies the weights by a frozen-coefficient stochastic
//! exponential evaluated in log space, then renormalises. Zero weights stay
//! zero; weights that underflow are clamped to [`UNDERFLOW_FLOOR`] and the
//! state is flagged.

use crate::model::{gamma_entries, gamma_table, QndModel};
use crate::rng::TrajectoryRng;
use crate::sme::{intensity_guard, limit_block_of, MeasurementRecord, SimConfig};
use crate::stats::ols_slope;
use crate::{Error, Result};

pub const UNDERFLOW_FLOOR: f64 = 1e-300;

/// Probability vector on the block simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexVector {
    pub q: Vec<f64>,
    /// Set once any coordinate has been clamped to the underflow floor.
    pub clamped: bool,
}

impl SimplexVector {
    /// Normalises nonnegative weights.
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Domain(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let s: f64 = q.iter().sum();
        if s <= 0.0 {
            return Err(Error::Domain("weights sum to zero".into()));
        }
        Ok(SimplexVector {
            q: q.iter().map(|x| x / s).collect(),
            clamped: false,
        })
    }

    pub fn uniform(n: usize) -> Self {
        SimplexVector {
            q: vec![1.0 / n as f64; n],
            clamped: false,
        }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// Parameters assumed by an estimated filter.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterParams {
    pub eta_hat: Vec<f64>,
    pub gamma_hat: Vec<f64>,
    pub iota_hat: Vec<f64>,
    pub theta_hat: Vec<f64>,
    pub zeta_hat: Vec<Vec<f64>>,
    /// `Γ̂_{k,j}`.
    pub gamma_hat_table: Vec<Vec<f64>>,
}

impl FilterParams {
    /// Builds the parameter set, requiring `Γ̂_{k,j} > 0` everywhere.
    pub fn new(
        model: &QndModel,
        eta_hat: Vec<f64>,
        gamma_hat: Vec<f64>,
        iota_hat: Vec<f64>,
        theta_hat: Vec<f64>,
        zeta_hat: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let nd = model.n_diffusive();
        let nj = model.n_jump();
        if eta_hat.len() != nd || gamma_hat.len() != nd {
            return Err(Error::Structure(
                "estimated diffusive parameters have the wrong length".into(),
            ));
        }
        if iota_hat.len() != nj
            || theta_hat.len() != nj
            || zeta_hat.len() != nj
            || zeta_hat.iter().any(|r| r.len() != nj)
        {
            return Err(Error::Structure(
                "estimated counting parameters have the wrong shape".into(),
            ));
        }
        if eta_hat.iter().chain(&gamma_hat).any(|&x| !(x >= 0.0)) {
            return Err(Error::Domain("estimated η̂, γ̂ must be nonnegative".into()));
        }
        let table = gamma_entries(&theta_hat, &zeta_hat, &iota_hat, &model.c, model.n_blocks());
        for (k, row) in table.iter().enumerate() {
            for (j, &g) in row.iter().enumerate() {
                if !(g > 0.0) || !g.is_finite() {
                    return Err(Error::Domain(format!(
                        "estimated rate Γ̂_{{{},{}}} = {g} must be strictly positive",
                        k + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(FilterParams {
            eta_hat,
            gamma_hat,
            iota_hat,
            theta_hat,
            zeta_hat,
            gamma_hat_table: table,
        })
    }

    /// The perfectly calibrated filter.
    pub fn calibrated(model: &QndModel) -> Result<Self> {
        Self::new(
            model,
            model.eta.clone(),
            model.gamma.clone(),
            model.iota.clone(),
            model.theta.clone(),
            model.zeta.clone(),
        )
    }

    /// `√(η̂_kγ̂_k)`.
    pub fn sqrt_eta_gamma(&self, k: usize) -> f64 {
        (self.eta_hat[k] * self.gamma_hat[k]).sqrt()
    }
}

/// Flattened coefficients of one or more stacked filters.
///
/// Entry `e = n·𝐣 + j` carries drift `√(η̂_{k,n}γ̂_{k,n}) Re l_{k,j}` and rate `Γ̂_{k,n,j}`.
#[derive(Clone, Debug)]
pub struct FilterBank {
    n_candidates: usize,
    n_blocks: usize,
    nd: usize,
    nj: usize,
    /// `nd × len`.
    drift: Vec<f64>,
    /// `nj × len`.
    rate: Vec<f64>,
    log_rate: Vec<f64>,
}

impl FilterBank {
    pub fn new(model: &QndModel, bank: &[FilterParams]) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::Config("filter bank is empty".into()));
        }
        let nb = model.n_blocks();
        let nd = model.n_diffusive();
        let nj = model.n_jump();
        let len = bank.len() * nb;
        let mut drift = vec![0.0; nd * len];
        let mut rate = vec![0.0; nj * len];
        for (n, p) in bank.iter().enumerate() {
            if p.eta_hat.len() != nd || p.gamma_hat_table.len() != nj {
                return Err(Error::Structure(format!(
                    "bank entry {} does not match the model",
                    n + 1
                )));
            }
            for j in 0..nb {
                let e = n * nb + j;
                for k in 0..nd {
                    drift[k * len + e] = p.sqrt_eta_gamma(k) * model.l[k][j].re;
                }
                for k in 0..nj {
                    rate[k * len + e] = p.gamma_hat_table[k][j];
                }
            }
        }
        let log_rate = rate.iter().map(|r| r.ln()).collect();
        Ok(FilterBank {
            n_candidates: bank.len(),
            n_blocks: nb,
            nd,
            nj,
            drift,
            rate,
            log_rate,
        })
    }

    /// The true reduced dynamics, viewed as a one-candidate bank with the
    /// model's own coefficients (rates may vanish here).
    pub fn truth(model: &QndModel) -> Self {
        let nb = model.n_blocks();
        let nd = model.n_diffusive();
        let nj = model.n_jump();
        let gt = gamma_table(model);
        let mut drift = vec![0.0; nd * nb];
        let mut rate = vec![0.0; nj * nb];
        for j in 0..nb {
            for k in 0..nd {
                drift[k * nb + j] = model.sqrt_eta_gamma(k) * model.l[k][j].re;
            }
            for k in 0..nj {
                rate[k * nb + j] = gt.get(k, j);
            }
        }
        let log_rate = rate.iter().map(|r| r.ln()).collect();
        FilterBank {
            n_candidates: 1,
            n_blocks: nb,
            nd,
            nj,
            drift,
            rate,
            log_rate,
        }
    }

    pub fn n_candidates(&self) -> usize {
        self.n_candidates
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    fn len(&self) -> usize {
        self.n_candidates * self.n_blocks
    }

    /// Bank-wide mean drift `Σ_e drift_{k,e} q_e` for each diffusive channel.
    pub fn mean_drift(&self, q: &[f64], k: usize) -> f64 {
        let len = self.len();
        self.drift[k * len..(k + 1) * len]
            .iter()
            .zip(q)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Bank-wide mean rate `Σ_e Γ̂_{k,e} q_e`.
    pub fn mean_rate(&self, q: &[f64], k: usize) -> f64 {
        let len = self.len();
        self.rate[k * len..(k + 1) * len]
            .iter()
            .zip(q)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Advances flattened weights by one record step.
    pub fn advance(
        &self,
        q: &mut [f64],
        clamped: &mut bool,
        dy: &[f64],
        flags: &[u32],
        dt: f64,
    ) -> Result<()> {
        let len = self.len();
        debug_assert_eq!(q.len(), len);
        let lbar: Vec<f64> = (0..self.nd).map(|k| self.mean_drift(q, k)).collect();
        let cbar: Vec<f64> = (0..self.nj).map(|k| self.mean_rate(q, k)).collect();
        for k in 0..self.nj {
            if flags[k] > 0 && !(cbar[k] > 0.0) {
                return Err(Error::DegenerateIntensity { channel: k + 1 });
            }
        }
        let mut top = f64::NEG_INFINITY;
        for e in 0..len {
            if q[e] == 0.0 {
                q[e] = f64::NEG_INFINITY;
                continue;
            }
            let mut x = q[e].ln();
            for k in 0..self.nd {
                let a = self.drift[k * len + e] - lbar[k];
                x += 2.0 * a * (dy[k] - 2.0 * lbar[k] * dt) - 2.0 * a * a * dt;
            }
            for k in 0..self.nj {
                let r = self.rate[k * len + e];
                if flags[k] > 0 {
                    x += flags[k] as f64 * (self.log_rate[k * len + e] - cbar[k].ln());
                }
                x -= (r - cbar[k]) * dt;
            }
            q[e] = x;
            if x > top {
                top = x;
            }
        }
        if !top.is_finite() {
            return Err(Error::Integrator {
                step: 0,
                reason: "all filter weights vanished".into(),
            });
        }
        let mut s = 0.0;
        for x in q.iter_mut() {
            *x = if *x == f64::NEG_INFINITY {
                0.0
            } else {
                (*x - top).exp()
            };
            s += *x;
        }
        for x in q.iter_mut() {
            if *x == 0.0 {
                continue;
            }
            *x /= s;
            if *x < UNDERFLOW_FLOOR {
                *x = UNDERFLOW_FLOOR;
                *clamped = true;
            }
        }
        Ok(())
    }
}

fn check_len(q: &SimplexVector, n: usize) -> Result<()> {
    if q.len() != n {
        return Err(Error::Structure(format!(
            "state has {} weights, expected {n}",
            q.len()
        )));
    }
    Ok(())
}

/// One step of the true block-weight dynamics driven by Wiener increments.
pub fn true_reduced_step(
    model: &QndModel,
    q: &SimplexVector,
    dw: &[f64],
    flags: &[u32],
    dt: f64,
) -> Result<SimplexVector> {
    check_len(q, model.n_blocks())?;
    let bank = FilterBank::truth(model);
    let dy: Vec<f64> = dw
        .iter()
        .enumerate()
        .map(|(k, w)| w + 2.0 * bank.mean_drift(&q.q, k) * dt)
        .collect();
    let mut out = q.clone();
    bank.advance(&mut out.q, &mut out.clamped, &dy, flags, dt)?;
    Ok(out)
}

/// One step of an estimated reduced filter driven by the record.
pub fn filter_reduced_step(
    model: &QndModel,
    params: &FilterParams,
    qhat: &SimplexVector,
    dy: &[f64],
    flags: &[u32],
    dt: f64,
) -> Result<SimplexVector> {
    check_len(qhat, model.n_blocks())?;
    let bank = FilterBank::new(model, std::slice::from_ref(params))?;
    let mut out = qhat.clone();
    bank.advance(&mut out.q, &mut out.clamped, dy, flags, dt)?;
    Ok(out)
}

/// Joint weights `q̂_{n,j}` of a filter bank.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedReducedState {
    /// Row-major `𝐧 × 𝐣`.
    pub qhat: Vec<f64>,
    pub n_candidates: usize,
    pub n_blocks: usize,
    pub pi: Vec<f64>,
    pub clamped: bool,
}

impl AugmentedReducedState {
    /// Factorised initial state `q̂_{n,j} = π_n q̂⁰_j`.
    pub fn factorized(pi0: &[f64], q0: &[f64]) -> Result<Self> {
        let pi = SimplexVector::new(pi0.to_vec())?;
        let q = SimplexVector::new(q0.to_vec())?;
        let mut qhat = Vec::with_capacity(pi.len() * q.len());
        for p in &pi.q {
            qhat.extend(q.q.iter().map(|x| p * x));
        }
        let mut s = AugmentedReducedState {
            qhat,
            n_candidates: pi.len(),
            n_blocks: q.len(),
            pi: Vec::new(),
            clamped: false,
        };
        s.refresh_pi();
        Ok(s)
    }

    /// Uniform prior over candidates and blocks.
    pub fn uniform(n_candidates: usize, n_blocks: usize) -> Self {
        Self::factorized(&vec![1.0; n_candidates], &vec![1.0; n_blocks])
            .expect("uniform weights are valid")
    }

    pub fn refresh_pi(&mut self) {
        self.pi = self
            .qhat
            .chunks(self.n_blocks)
            .map(|r| r.iter().sum())
            .collect();
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.qhat[n * self.n_blocks..(n + 1) * self.n_blocks]
    }
}

/// One step of the augmented filter bank.
pub fn augmented_filter_step(
    model: &QndModel,
    bank: &[FilterParams],
    state: &AugmentedReducedState,
    dy: &[f64],
    flags: &[u32],
    dt: f64,
) -> Result<AugmentedReducedState> {
    if state.n_candidates != bank.len() || state.n_blocks != model.n_blocks() {
        return Err(Error::Structure(
            "augmented state does not match the bank".into(),
        ));
    }
    let fb = FilterBank::new(model, bank)?;
    let mut out = state.clone();
    fb.advance(&mut out.qhat, &mut out.clamped, dy, flags, dt)?;
    out.refresh_pi();
    Ok(out)
}

/// Runs a bank over a whole record, sampling `π` at the given step indices.
pub fn run_bank(
    bank: &FilterBank,
    state: &mut AugmentedReducedState,
    record: &MeasurementRecord,
    sample_steps: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut path = Vec::with_capacity(sample_steps.len());
    let mut next = 0;
    for i in 0..=record.steps {
        while next < sample_steps.len() && sample_steps[next] == i {
            state.refresh_pi();
            path.push(state.pi.clone());
            next += 1;
        }
        if i == record.steps {
            break;
        }
        bank.advance(
            &mut state.qhat,
            &mut state.clamped,
            record.dy_row(i),
            record.dn_row(i),
            record.dt,
        )
        .map_err(|e| match e {
            Error::Integrator { reason, .. } => Error::Integrator { step: i, reason },
            other => other,
        })?;
    }
    state.refresh_pi();
    Ok(path)
}

/// Output of [`simulate_reduced`].
#[derive(Clone, Debug)]
pub struct ReducedTrajectory {
    pub record: MeasurementRecord,
    pub checkpoint_times: Vec<f64>,
    pub q_path: Vec<Vec<f64>>,
    pub limit_block: Option<usize>,
    pub clamped: bool,
}

/// Simulates the true block weights and the record they generate.
///
/// The random draws per step follow the same order as the full simulator, so
/// for block-supported initial states both produce the same record.
pub fn simulate_reduced(
    model: &QndModel,
    q0: &SimplexVector,
    cfg: &SimConfig,
) -> Result<ReducedTrajectory> {
    check_len(q0, model.n_blocks())?;
    let steps = cfg.steps()?;
    intensity_guard(model, cfg.dt)?;
    let cps = cfg.checkpoint_steps(steps)?;
    let bank = FilterBank::truth(model);
    let nd = model.n_diffusive();
    let nj = model.n_jump();
    let mut rng = TrajectoryRng::new(cfg.seed, cfg.stream);
    let sqdt = cfg.dt.sqrt();
    let mut record = MeasurementRecord::new(cfg.dt, nd, nj, cfg.seed);
    record.dy.reserve(steps * nd);
    record.dn.reserve(steps * nj);
    let mut q = q0.clone();
    let mut q_path = Vec::with_capacity(cps.len());
    let mut next = 0;
    let mut dy = vec![0.0; nd];
    let mut flags = vec![0u32; nj];
    for i in 0..=steps {
        while next < cps.len() && cps[next] == i {
            q_path.push(q.q.clone());
            next += 1;
        }
        if i == steps {
            break;
        }
        for (k, y) in dy.iter_mut().enumerate() {
            *y = sqdt * rng.normal() + 2.0 * bank.mean_drift(&q.q, k) * cfg.dt;
        }
        for (k, f) in flags.iter_mut().enumerate() {
            let t = bank.mean_rate(&q.q, k);
            *f = u32::from(rng.uniform() < (t * cfg.dt).min(1.0));
        }
        record.push(&dy, &flags);
        bank.advance(&mut q.q, &mut q.clamped, &dy, &flags, cfg.dt)?;
    }
    Ok(ReducedTrajectory {
        record,
        checkpoint_times: cps.iter().map(|&s| s as f64 * cfg.dt).collect(),
        q_path,
        limit_block: limit_block_of(&q.q),
        clamped: q.clamped,
    })
}

/// Least-squares slope of a log-ratio over the final half of the path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlopeEstimate {
    pub slope: f64,
    /// Some weight in the window was at or below the underflow floor.
    pub clamped: bool,
}

/// Slope of `log(π_n/π_{n*})` over the final half of the horizon.
pub fn pi_log_ratio_slope(
    times: &[f64],
    pi_path: &[Vec<f64>],
    n: usize,
    nstar: usize,
) -> Result<SlopeEstimate> {
    if times.len() != pi_path.len() || times.len() < 2 {
        return Err(Error::Domain("need at least two aligned samples".into()));
    }
    let t0 = times[0];
    let t1 = times[times.len() - 1];
    let mid = t0 + 0.5 * (t1 - t0);
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    let mut clamped = false;
    for (t, p) in times.iter().zip(pi_path) {
        if *t < mid {
            continue;
        }
        let a = p[n];
        let b = p[nstar];
        if a <= UNDERFLOW_FLOOR || b <= UNDERFLOW_FLOOR {
            clamped = true;
        }
        ts.push(*t);
        ys.push(a.max(UNDERFLOW_FLOOR).ln() - b.max(UNDERFLOW_FLOOR).ln());
    }
    if ts.len() < 2 {
        return Err(Error::Domain(
            "final half of the path holds fewer than two samples".into(),
        ));
    }
    Ok(SlopeEstimate {
        slope: ols_slope(&ts, &ys),
        clamped,
    })
}

/// Change-of-measure expectation `Σ value · q_j(T)/q_j(0) / M`.
pub fn reweighted_mean(samples: &[(f64, f64, f64)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("no samples".into()));
    }
    let mut s = 0.0;
    for &(v, qt, q0) in samples {
        if !(q0 > 0.0) {
            return Err(Error::Domain("initial weight must be positive".into()));
        }
        s += v * qt / q0;
    }
    Ok(s / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qubit() -> QndModel {
        QndModel::new(vec![1, 1])
            .unwrap()
            .with_diffusive(&[1.0, -1.0], 1.0, 0.5)
            .with_jump(&[1.0, 2.0], 1.0, 0.3)
    }

    #[test]
    fn vertex_is_absorbing() {
        let m = qubit();
        let q = SimplexVector::new(vec![1.0, 0.0]).unwrap();
        let out = true_reduced_step(&m, &q, &[0.7], &[1], 1e-3).unwrap();
        assert_eq!(out.q, vec![1.0, 0.0]);
        let p = FilterParams::calibrated(&m).unwrap();
        let out = filter_reduced_step(&m, &p, &q, &[-3.0], &[1], 1e-3).unwrap();
        assert_eq!(out.q, vec![1.0, 0.0]);
    }

    #[test]
    fn symmetric_model_stays_centred() {
        let m = QndModel::new(vec![1, 1])
            .unwrap()
            .with_diffusive(&[1.0, -1.0], 1.0, 0.5)
            .with_jump(&[1.5, 1.5], 1.0, 0.3);
        let q = SimplexVector::uniform(2);
        let out = true_reduced_step(&m, &q, &[0.0], &[0], 1e-3).unwrap();
        assert!((out.q[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_innovation_leaves_filter_unchanged() {
        let m = QndModel::new(vec![1, 1])
            .unwrap()
            .with_diffusive(&[1.0, -1.0], 1.0, 0.5)
            .with_jump(&[1.0, 1.0], 1.0, 0.3);
        let p = FilterParams::calibrated(&m).unwrap();
        let q = SimplexVector::new(vec![0.3, 0.7]).unwrap();
        let lhat = 0.5f64.sqrt() * (0.3 - 0.7);
        let dt = 1e-3;
        let out = filter_reduced_step(&m, &p, &q, &[2.0 * lhat * dt], &[0], dt).unwrap();
        // The residual is the −2â²dt curvature term, which is O(dt).
        let a0 = 0.5f64.sqrt() - lhat;
        let a1 = -(0.5f64.sqrt()) - lhat;
        let w0 = 0.3 * (-2.0 * a0 * a0 * dt).exp();
        let w1 = 0.7 * (-2.0 * a1 * a1 * dt).exp();
        assert!((out.q[0] - w0 / (w0 + w1)).abs() < 1e-15);
    }

    #[test]
    fn single_candidate_bank_matches_filter() {
        let m = qubit();
        let p = FilterParams::calibrated(&m).unwrap();
        let q = SimplexVector::new(vec![0.3, 0.7]).unwrap();
        let a = filter_reduced_step(&m, &p, &q, &[0.05], &[1], 1e-3).unwrap();
        let s = AugmentedReducedState::factorized(&[1.0], &[0.3, 0.7]).unwrap();
        let b = augmented_filter_step(&m, &[p], &s, &[0.05], &[1], 1e-3).unwrap();
        assert_eq!(a.q, b.qhat);
    }

    #[test]
    fn identical_candidates_keep_prior() {
        let m = qubit();
        let p = FilterParams::calibrated(&m).unwrap();
        let bank = vec![p.clone(), p.clone(), p];
        let mut s = AugmentedReducedState::factorized(&[0.2, 0.5, 0.3], &[0.4, 0.6]).unwrap();
        for i in 0..200 {
            let dy = [0.03 * ((i % 7) as f64 - 3.0)];
            s = augmented_filter_step(&m, &bank, &s, &dy, &[(i % 11 == 0) as u32], 1e-3).unwrap();
        }
        for (p, want) in s.pi.iter().zip([0.2, 0.5, 0.3]) {
            assert!((p - want).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_intensity_errors() {
        let m = QndModel::new(vec![1, 1])
            .unwrap()
            .with_jump(&[0.0, 1.0], 1.0, 0.0);
        let q = SimplexVector::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            true_reduced_step(&m, &q, &[], &[1], 1e-3),
            Err(Error::DegenerateIntensity { channel: 1 })
        ));
    }

    #[test]
    fn nonpositive_rate_rejected_by_params() {
        let m = QndModel::new(vec![1, 1])
            .unwrap()
            .with_jump(&[0.0, 1.0], 1.0, 0.0);
        assert!(matches!(
            FilterParams::calibrated(&m),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn slope_of_synthetic_paths() {
        let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let flat: Vec<Vec<f64>> = times.iter().map(|_| vec![0.2, 0.8]).collect();
        assert!(pi_log_ratio_slope(&times, &flat, 0, 1).unwrap().slope.abs() < 1e-12);
        let decay: Vec<Vec<f64>> = times
            .iter()
            .map(|t| {
                let r = (-3.0 * t).exp();
                vec![r / (1.0 + r), 1.0 / (1.0 + r)]
            })
            .collect();
        assert!((pi_log_ratio_slope(&times, &decay, 0, 1).unwrap().slope + 3.0).abs() < 1e-9);
    }

    #[test]
    fn reweighting_at_time_zero_is_plain_mean() {
        let s = [(1.0, 0.3, 0.3), (2.0, 0.7, 0.7), (4.0, 0.1, 0.1)];
        assert!((reweighted_mean(&s).unwrap() - 7.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reduced_simulation_is_deterministic_and_on_simplex() {
        let m = qubit();
        let cfg = SimConfig::new(1.0, 1e-3, 3)
            .stream(5)
            .checkpoints((0..=10).map(|i| i as f64 * 0.1).collect());
        let a = simulate_reduced(&m, &SimplexVector::new(vec![0.3, 0.7]).unwrap(), &cfg).unwrap();
        let b = simulate_reduced(&m, &SimplexVector::new(vec![0.3, 0.7]).unwrap(), &cfg).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.q_path.len(), 11);
        for q in &a.q_path {
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
