//! Full density-matrix jump–diffusion SME.
//!
//! Measurement and counting operators are scalar on blocks, hence diagonal in
//! the block basis; their superoperators act entrywise. The Hamiltonian and the
//! unmonitored noise operators are applied as dense matrices.

use crate::linalg::{clip_negative, hermitize, trace, CMat, C64};
use crate::model::{gamma_table, QndModel};
use crate::rng::TrajectoryRng;
use crate::{Error, Result};

/// Below this total intensity a counting channel is treated as inactive.
pub const INTENSITY_FLOOR: f64 = 1e-14;
/// Largest admissible `dt · max Γ`.
pub const THINNING_GUARD: f64 = 0.1;
/// A block weight above `1 − LIMIT_MARGIN` at the final time defines the limit block.
pub const LIMIT_MARGIN: f64 = 1e-6;

/// Precomputed operator data for one model.
#[derive(Clone, Debug)]
pub struct Sme {
    dim: usize,
    h: CMat,
    has_h: bool,
    /// Diagonals of `L_k`.
    l_diag: Vec<Vec<C64>>,
    /// Diagonals of `C_k`.
    c_diag: Vec<Vec<C64>>,
    noise: Vec<(CMat, CMat)>,
    gamma: Vec<f64>,
    sqrt_eta_gamma: Vec<f64>,
    iota: Vec<f64>,
    theta: Vec<f64>,
    zeta: Vec<Vec<f64>>,
}

fn expand(model: &QndModel, coeffs: &[C64]) -> Vec<C64> {
    let mut out = Vec::with_capacity(model.blocks.total_dim());
    for (j, &d) in model.blocks.dims().iter().enumerate() {
        out.extend(std::iter::repeat_n(coeffs[j], d));
    }
    out
}

/// `(𝒥_k(ρ), 𝒯_k(ρ), 𝒬_k(ρ))`, with `𝒬` absent when the intensity is below the floor.
#[derive(Clone, Debug)]
pub struct JumpMaps {
    pub j: CMat,
    pub t: f64,
    pub q: Option<CMat>,
}

impl Sme {
    pub fn new(model: &QndModel) -> Result<Self> {
        model.check_structure()?;
        let h = model.hamiltonian();
        let has_h = h.iter().any(|z| *z != C64::new(0.0, 0.0));
        let noise = (0..model.n_noise())
            .map(|k| {
                let a = model.noise_operator(k);
                let ad = a.adjoint();
                let ada = &ad * &a;
                (a, ada)
            })
            .collect();
        Ok(Sme {
            dim: model.blocks.total_dim(),
            h,
            has_h,
            l_diag: model.l.iter().map(|row| expand(model, row)).collect(),
            c_diag: model.c.iter().map(|row| expand(model, row)).collect(),
            noise,
            gamma: model.gamma.clone(),
            sqrt_eta_gamma: (0..model.n_diffusive())
                .map(|k| model.sqrt_eta_gamma(k))
                .collect(),
            iota: model.iota.clone(),
            theta: model.theta.clone(),
            zeta: model.zeta.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_diffusive(&self) -> usize {
        self.l_diag.len()
    }

    pub fn n_jump(&self) -> usize {
        self.c_diag.len()
    }

    /// Entrywise dissipator of a diagonal operator with weight `w`.
    fn add_diag_dissipator(out: &mut CMat, rho: &CMat, d: &[C64], w: f64) {
        if w == 0.0 {
            return;
        }
        let n = rho.nrows();
        for s in 0..n {
            for r in 0..n {
                let f = d[r] * d[s].conj() - 0.5 * (d[r].norm_sqr() + d[s].norm_sqr());
                out[(r, s)] += rho[(r, s)] * f * w;
            }
        }
    }

    /// `ℒ(ρ)`.
    pub fn lindblad_drift(&self, rho: &CMat) -> CMat {
        let mut out = CMat::zeros(self.dim, self.dim);
        if self.has_h {
            let hr = &self.h * rho;
            let rh = rho * &self.h;
            out += (hr - rh) * C64::new(0.0, -1.0);
        }
        for (k, d) in self.l_diag.iter().enumerate() {
            Self::add_diag_dissipator(&mut out, rho, d, self.gamma[k]);
        }
        for (k, d) in self.c_diag.iter().enumerate() {
            Self::add_diag_dissipator(&mut out, rho, d, self.iota[k]);
        }
        for (a, ada) in &self.noise {
            let arad = a * rho * a.adjoint();
            let anti = ada * rho + rho * ada;
            out += arad - anti * C64::new(0.5, 0.0);
        }
        out
    }

    /// `√(η_kγ_k) Tr((L_k + L_k†)ρ)`.
    pub fn record_drift(&self, k: usize, rho: &CMat) -> f64 {
        let d = &self.l_diag[k];
        self.sqrt_eta_gamma[k]
            * (0..self.dim)
                .map(|r| 2.0 * d[r].re * rho[(r, r)].re)
                .sum::<f64>()
    }

    /// `𝒢_k(ρ)`.
    pub fn diffusive_term(&self, k: usize, rho: &CMat) -> CMat {
        let s = self.sqrt_eta_gamma[k];
        let d = &self.l_diag[k];
        if s == 0.0 {
            return CMat::zeros(self.dim, self.dim);
        }
        let tr: f64 = (0..self.dim).map(|r| 2.0 * d[r].re * rho[(r, r)].re).sum();
        CMat::from_fn(self.dim, self.dim, |r, c| {
            rho[(r, c)] * (d[r] + d[c].conj() - tr) * s
        })
    }

    /// `𝒥_k(ρ)`, `𝒯_k(ρ)` and `𝒬_k(ρ)`.
    pub fn jump_maps(&self, k: usize, rho: &CMat) -> JumpMaps {
        let n = self.dim;
        let mut j = rho * C64::new(self.theta[k], 0.0);
        for (kb, d) in self.c_diag.iter().enumerate() {
            let w = self.zeta[k][kb] * self.iota[kb];
            if w == 0.0 {
                continue;
            }
            for c in 0..n {
                for r in 0..n {
                    j[(r, c)] += rho[(r, c)] * d[r] * d[c].conj() * w;
                }
            }
        }
        let t = trace(&j).re;
        let q = if t > INTENSITY_FLOOR {
            Some(&j / C64::new(t, 0.0) - rho)
        } else {
            None
        };
        JumpMaps { j, t, q }
    }

    /// One Euler–Maruyama step followed by projection onto density matrices.
    pub fn step(&self, rho: &CMat, dw: &[f64], flags: &[u32], dt: f64) -> Result<CMat> {
        let mut next = rho + self.lindblad_drift(rho) * C64::new(dt, 0.0);
        for (k, &w) in dw.iter().enumerate() {
            if w != 0.0 {
                next += self.diffusive_term(k, rho) * C64::new(w, 0.0);
            }
        }
        for (k, &f) in flags.iter().enumerate() {
            let m = self.jump_maps(k, rho);
            if let Some(q) = m.q {
                next += q * C64::new(f as f64 - m.t * dt, 0.0);
            }
        }
        project(next)
    }
}

/// Hermitise, clip negative eigenvalues and renormalise the trace.
pub fn project(m: CMat) -> Result<CMat> {
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Integrator {
            step: 0,
            reason: "non-finite state".into(),
        });
    }
    let (p, _) = clip_negative(hermitize(&m));
    let tr = trace(&p).re;
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(Error::Integrator {
            step: 0,
            reason: format!("trace {tr} after projection"),
        });
    }
    Ok(p / C64::new(tr, 0.0))
}

pub fn lindblad_drift(model: &QndModel, rho: &CMat) -> Result<CMat> {
    Ok(Sme::new(model)?.lindblad_drift(rho))
}

pub fn diffusive_term(model: &QndModel, k: usize, rho: &CMat) -> Result<CMat> {
    Ok(Sme::new(model)?.diffusive_term(k, rho))
}

pub fn jump_maps(model: &QndModel, k: usize, rho: &CMat) -> Result<JumpMaps> {
    Ok(Sme::new(model)?.jump_maps(k, rho))
}

pub fn step(model: &QndModel, rho: &CMat, dw: &[f64], flags: &[u32], dt: f64) -> Result<CMat> {
    Sme::new(model)?.step(rho, dw, flags, dt)
}

/// Checks a density matrix against tolerance `tol`: Hermitian, unit trace, PSD.
pub fn is_density_matrix(rho: &CMat, tol: f64) -> bool {
    crate::linalg::hermiticity_defect(rho) <= tol
        && (trace(rho).re - 1.0).abs() <= tol
        && trace(rho).im.abs() <= tol
        && crate::linalg::min_eigenvalue(rho) >= -tol
}

/// Per-step diffusive increments and jump counts.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementRecord {
    pub dt: f64,
    pub steps: usize,
    pub n_diffusive: usize,
    pub n_jump: usize,
    /// Row-major `steps × n_diffusive`.
    pub dy: Vec<f64>,
    /// Row-major `steps × n_jump`.
    pub dn: Vec<u32>,
    pub seed: u64,
}

impl MeasurementRecord {
    pub fn new(dt: f64, n_diffusive: usize, n_jump: usize, seed: u64) -> Self {
        MeasurementRecord {
            dt,
            steps: 0,
            n_diffusive,
            n_jump,
            dy: Vec::new(),
            dn: Vec::new(),
            seed,
        }
    }

    pub fn push(&mut self, dy: &[f64], dn: &[u32]) {
        self.dy.extend_from_slice(dy);
        self.dn.extend_from_slice(dn);
        self.steps += 1;
    }

    pub fn dy_row(&self, i: usize) -> &[f64] {
        &self.dy[i * self.n_diffusive..(i + 1) * self.n_diffusive]
    }

    pub fn dn_row(&self, i: usize) -> &[u32] {
        &self.dn[i * self.n_jump..(i + 1) * self.n_jump]
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryOutput {
    pub record: MeasurementRecord,
    pub checkpoint_times: Vec<f64>,
    pub rho_path: Option<Vec<CMat>>,
    pub q_path: Vec<Vec<f64>>,
    /// Zero-based index of the block whose weight exceeds `1 − 1e-6` at the final time.
    pub limit_block: Option<usize>,
}

/// Time grid and seeding for one trajectory.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    /// Trajectory index selecting the random stream.
    pub stream: u64,
    pub checkpoints: Vec<f64>,
    pub keep_rho: bool,
}

impl SimConfig {
    pub fn new(horizon: f64, dt: f64, seed: u64) -> Self {
        SimConfig {
            horizon,
            dt,
            seed,
            stream: 0,
            checkpoints: vec![0.0, horizon],
            keep_rho: false,
        }
    }

    pub fn stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn checkpoints(mut self, times: Vec<f64>) -> Self {
        self.checkpoints = times;
        self
    }

    pub fn keep_rho(mut self, keep: bool) -> Self {
        self.keep_rho = keep;
        self
    }

    /// Number of steps, requiring the horizon to be an integer multiple of `dt`.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite())
            || !(self.horizon >= 0.0 && self.horizon.is_finite())
        {
            return Err(Error::Config(format!(
                "invalid horizon {} / dt {}",
                self.horizon, self.dt
            )));
        }
        let n = (self.horizon / self.dt).round();
        if (n * self.dt - self.horizon).abs() > 1e-9 * self.horizon.max(self.dt) {
            return Err(Error::Config(format!(
                "horizon {} is not a multiple of dt {}",
                self.horizon, self.dt
            )));
        }
        Ok(n as usize)
    }

    /// Checkpoint step indices, sorted and deduplicated.
    pub fn checkpoint_steps(&self, steps: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.checkpoints.len());
        for &t in &self.checkpoints {
            if !(t >= 0.0) || t > self.horizon + 1e-12 {
                return Err(Error::Config(format!(
                    "checkpoint {t} outside [0, {}]",
                    self.horizon
                )));
            }
            out.push(((t / self.dt).round() as usize).min(steps));
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

/// Rejects step sizes for which per-step thinning is inaccurate.
pub fn intensity_guard(model: &QndModel, dt: f64) -> Result<()> {
    let gt = gamma_table(model);
    let sup = gt.values.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    if dt * sup > THINNING_GUARD {
        return Err(Error::Config(format!(
            "dt·max Γ = {} exceeds {THINNING_GUARD}; reduce dt below {}",
            dt * sup,
            THINNING_GUARD / sup
        )));
    }
    Ok(())
}

pub(crate) fn limit_block_of(q: &[f64]) -> Option<usize> {
    q.iter().position(|&x| x > 1.0 - LIMIT_MARGIN)
}

/// Simulates one trajectory of the full SME.
///
/// Each step draws the `N_D` Gaussian increments first, then one uniform per
/// counting channel; a jump occurs when the uniform falls below `𝒯_k dt`.
pub fn simulate(model: &QndModel, rho0: &CMat, cfg: &SimConfig) -> Result<TrajectoryOutput> {
    let steps = cfg.steps()?;
    intensity_guard(model, cfg.dt)?;
    let sme = Sme::new(model)?;
    if rho0.nrows() != sme.dim() || rho0.ncols() != sme.dim() {
        return Err(Error::Structure(format!(
            "initial state must be {0}x{0}",
            sme.dim()
        )));
    }
    let cps = cfg.checkpoint_steps(steps)?;
    let mut rng = TrajectoryRng::new(cfg.seed, cfg.stream);
    let nd = sme.n_diffusive();
    let nj = sme.n_jump();
    let sqdt = cfg.dt.sqrt();
    let mut record = MeasurementRecord::new(cfg.dt, nd, nj, cfg.seed);
    record.dy.reserve(steps * nd);
    record.dn.reserve(steps * nj);
    let mut rho = rho0.clone();
    let mut q_path = Vec::with_capacity(cps.len());
    let mut rho_path = cfg.keep_rho.then(Vec::new);
    let mut next_cp = 0;
    let mut dw = vec![0.0; nd];
    let mut dy = vec![0.0; nd];
    let mut flags = vec![0u32; nj];
    for i in 0..=steps {
        while next_cp < cps.len() && cps[next_cp] == i {
            q_path.push(model.blocks.block_weights(&rho));
            if let Some(p) = rho_path.as_mut() {
                p.push(rho.clone());
            }
            next_cp += 1;
        }
        if i == steps {
            break;
        }
        for k in 0..nd {
            dw[k] = sqdt * rng.normal();
            dy[k] = dw[k] + sme.record_drift(k, &rho) * cfg.dt;
        }
        for (k, f) in flags.iter_mut().enumerate() {
            let t = sme.jump_maps(k, &rho).t;
            let u = rng.uniform();
            *f = u32::from(u < (t * cfg.dt).min(1.0));
        }
        record.push(&dy, &flags);
        rho = sme.step(&rho, &dw, &flags, cfg.dt).map_err(|e| match e {
            Error::Integrator { reason, .. } => Error::Integrator { step: i, reason },
            other => other,
        })?;
    }
    let q_final = model.blocks.block_weights(&rho);
    Ok(TrajectoryOutput {
        record,
        checkpoint_times: cps.iter().map(|&s| s as f64 * cfg.dt).collect(),
        rho_path,
        q_path,
        limit_block: limit_block_of(&q_final),
    })
}

/// A scalar function on states with its first and second directional derivatives.
pub trait TestFunction {
    fn value(&self, rho: &CMat) -> f64;
    /// `DV(ρ)[X]`.
    fn derivative(&self, rho: &CMat, x: &CMat) -> f64;
    /// `D²V(ρ)[X, X]`.
    fn second_derivative(&self, rho: &CMat, x: &CMat) -> f64;
}

/// `𝒜V(ρ)`: drift pairing, second-order diffusive forms and jump compensators.
pub fn generator_apply(model: &QndModel, v: &dyn TestFunction, rho: &CMat) -> Result<f64> {
    let sme = Sme::new(model)?;
    let mut out = v.derivative(rho, &sme.lindblad_drift(rho));
    for k in 0..sme.n_diffusive() {
        let g = sme.diffusive_term(k, rho);
        out += 0.5 * v.second_derivative(rho, &g);
    }
    let v0 = v.value(rho);
    for k in 0..sme.n_jump() {
        let m = sme.jump_maps(k, rho);
        if let Some(q) = m.q {
            let post = &m.j / C64::new(m.t, 0.0);
            out += (v.value(&post) - v0 - v.derivative(rho, &q)) * m.t;
        }
    }
    Ok(out)
}

/// A function of the block weights `q_j = Tr(Π_j ρ)` only.
pub trait BlockFunction {
    fn f(&self, q: &[f64]) -> f64;
    fn grad(&self, q: &[f64]) -> Vec<f64>;
    fn hess(&self, q: &[f64]) -> Vec<Vec<f64>>;
}

/// Lifts a [`BlockFunction`] to a [`TestFunction`] for a given block structure.
pub struct OnBlocks<'a, F> {
    pub blocks: &'a crate::model::BlockStructure,
    pub f: F,
}

impl<F: BlockFunction> TestFunction for OnBlocks<'_, F> {
    fn value(&self, rho: &CMat) -> f64 {
        self.f.f(&self.blocks.block_weights(rho))
    }

    fn derivative(&self, rho: &CMat, x: &CMat) -> f64 {
        let g = self.f.grad(&self.blocks.block_weights(rho));
        let dx = self.blocks.block_weights(x);
        g.iter().zip(&dx).map(|(a, b)| a * b).sum()
    }

    fn second_derivative(&self, rho: &CMat, x: &CMat) -> f64 {
        let h = self.f.hess(&self.blocks.block_weights(rho));
        let dx = self.blocks.block_weights(x);
        let mut s = 0.0;
        for i in 0..dx.len() {
            for j in 0..dx.len() {
                s += h[i][j] * dx[i] * dx[j];
            }
        }
        s
    }
}

/// `V = q_j`.
pub struct BlockWeight(pub usize);

impl BlockFunction for BlockWeight {
    fn f(&self, q: &[f64]) -> f64 {
        q[self.0]
    }

    fn grad(&self, q: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; q.len()];
        g[self.0] = 1.0;
        g
    }

    fn hess(&self, q: &[f64]) -> Vec<Vec<f64>> {
        vec![vec![0.0; q.len()]; q.len()]
    }
}

/// `V = Σ_{i≠j} √(q_i q_j)`.
pub struct PairLyapunov;

impl BlockFunction for PairLyapunov {
    fn f(&self, q: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..q.len() {
            for j in 0..q.len() {
                if i != j {
                    s += (q[i] * q[j]).sqrt();
                }
            }
        }
        s
    }

    fn grad(&self, q: &[f64]) -> Vec<f64> {
        (0..q.len())
            .map(|a| {
                (0..q.len())
                    .filter(|&j| j != a)
                    .map(|j| (q[j] / q[a]).sqrt())
                    .sum::<f64>()
            })
            .collect()
    }

    fn hess(&self, q: &[f64]) -> Vec<Vec<f64>> {
        let n = q.len();
        let mut h = vec![vec![0.0; n]; n];
        for a in 0..n {
            for b in 0..n {
                h[a][b] = if a == b {
                    -0.5 * (0..n).filter(|&j| j != a).map(|j| q[j].sqrt()).sum::<f64>()
                        / q[a].powf(1.5)
                } else {
                    0.5 / (q[a] * q[b]).sqrt()
                };
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, max_abs, pure_state};

    fn qubit() -> QndModel {
        QndModel::new(vec![1, 1])
            .unwrap()
            .with_diffusive(&[1.0, -1.0], 1.0, 0.5)
            .with_jump(&[1.0, 2.0], 1.0, 0.3)
    }

    fn plus() -> CMat {
        pure_state(&[c(1.0, 0.0), c(1.0, 0.0)])
    }

    #[test]
    fn drift_is_zero_without_dynamics() {
        let m = QndModel::new(vec![1, 1]).unwrap();
        assert_eq!(lindblad_drift(&m, &plus()).unwrap(), CMat::zeros(2, 2));
    }

    #[test]
    fn drift_is_traceless() {
        let d = lindblad_drift(&qubit(), &plus()).unwrap();
        assert!(trace(&d).norm() < 1e-12);
    }

    #[test]
    fn hamiltonian_commutator() {
        let h0 = CMat::from_element(1, 1, c(1.0, 0.0));
        let h1 = CMat::from_element(1, 1, c(-1.0, 0.0));
        let m = QndModel::new(vec![1, 1])
            .unwrap()
            .with_hamiltonian(vec![h0, h1]);
        let rho = plus();
        let d = lindblad_drift(&m, &rho).unwrap();
        // −i[H, ρ] for H = diag(1, −1): entry (0,1) is −2i ρ_01.
        assert!((d[(0, 1)] - c(0.0, -2.0) * rho[(0, 1)]).norm() < 1e-15);
        assert!((d[(1, 0)] - c(0.0, 2.0) * rho[(1, 0)]).norm() < 1e-15);
        assert!((d[(0, 1)].norm() - 2.0 * rho[(0, 1)].norm()).abs() < 1e-15);
        assert!(d[(0, 0)].norm() < 1e-15);
    }

    #[test]
    fn drift_preserves_block_support() {
        let m = QndModel::new(vec![2, 1])
            .unwrap()
            .with_diffusive(&[1.0, -1.0], 1.0, 0.5)
            .with_jump(&[1.0, 2.0], 1.0, 0.3)
            .with_noise(vec![
                CMat::from_fn(2, 2, |r, s| c((r + s) as f64, 0.3)),
                CMat::from_element(1, 1, c(0.5, 0.0)),
            ]);
        let rho = m.blocks.projector(0) / c(2.0, 0.0);
        let d = lindblad_drift(&m, &rho).unwrap();
        for r in 0..3 {
            for s in 0..3 {
                if r == 2 || s == 2 {
                    assert!(d[(r, s)].norm() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn diffusive_term_values() {
        let m = qubit();
        let rho = CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![c(0.5, 0.0), c(0.5, 0.0)]));
        let g = diffusive_term(&m, 0, &rho).unwrap();
        assert!((g[(0, 0)].re - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((g[(1, 1)].re + 0.5f64.sqrt()).abs() < 1e-15);
        let p1 = m.blocks.projector(0);
        assert!(max_abs(&diffusive_term(&m, 0, &p1).unwrap()) < 1e-15);
        let mut z = m.clone();
        z.eta[0] = 0.0;
        assert_eq!(diffusive_term(&z, 0, &plus()).unwrap(), CMat::zeros(2, 2));
    }

    #[test]
    fn jump_map_cases() {
        let shot = QndModel::new(vec![1, 1])
            .unwrap()
            .with_jump(&[1.0, 2.0], 0.0, 0.7);
        let m = jump_maps(&shot, 0, &plus()).unwrap();
        assert!((m.t - 0.7).abs() < 1e-15);
        assert!(max_abs(m.q.as_ref().unwrap()) < 1e-15);

        let q = qubit();
        let gt = gamma_table(&q);
        for j in 0..2 {
            let t = jump_maps(&q, 0, &q.blocks.projector(j)).unwrap().t;
            assert!((t - gt.get(0, j)).abs() < 1e-14);
        }

        let dead = QndModel::new(vec![1, 1])
            .unwrap()
            .with_jump(&[1.0, 2.0], 0.0, 0.0);
        let m = jump_maps(&dead, 0, &plus()).unwrap();
        assert_eq!(m.t, 0.0);
        assert!(m.q.is_none());
    }

    #[test]
    fn jump_step_applies_c_rho_c() {
        let m = QndModel::new(vec![1, 1])
            .unwrap()
            .with_jump(&[1.0, 2.0], 1.0, 0.0);
        let rho = CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![c(0.6, 0.0), c(0.4, 0.0)]));
        // Limit dt → 0 isolates the jump: C ρ C† / Tr = diag(0.6, 1.6) / 2.2.
        let out = step(&m, &rho, &[], &[1], 1e-14).unwrap();
        assert!((out[(0, 0)].re - 0.6 / 2.2).abs() < 1e-12);
        assert!((out[(1, 1)].re - 1.6 / 2.2).abs() < 1e-12);
    }

    #[test]
    fn block_states_are_invariant() {
        let m = qubit();
        let rho = m.blocks.projector(1);
        let out = step(&m, &rho, &[0.37], &[1], 1e-3).unwrap();
        assert!(max_abs(&(out - &rho)) < 1e-12);
    }

    #[test]
    fn deterministic_step_matches_drift() {
        let m = qubit();
        let rho = pure_state(&[c(0.6, 0.0), c(0.3, 0.5)]) * c(0.7, 0.0)
            + CMat::identity(2, 2) * c(0.15, 0.0);
        let l = lindblad_drift(&m, &rho).unwrap();
        // Removing the compensator from the jump-free step leaves the drift.
        let mut errs = Vec::new();
        for &dt in &[1e-3, 5e-4] {
            let out = step(&m, &rho, &[0.0], &[0], dt).unwrap();
            let sme = Sme::new(&m).unwrap();
            let mut comp = CMat::zeros(2, 2);
            let jm = sme.jump_maps(0, &rho);
            comp -= jm.q.unwrap() * c(jm.t * dt, 0.0);
            let want = &rho + &l * c(dt, 0.0) + comp;
            errs.push(max_abs(&(out - want)));
        }
        assert!(errs[0] < 1e-12 && errs[1] < 1e-12, "{errs:?}");
    }

    #[test]
    fn simulate_is_deterministic() {
        let m = qubit();
        let cfg = SimConfig::new(0.5, 1e-3, 9).stream(2);
        let a = simulate(&m, &plus(), &cfg).unwrap();
        let b = simulate(&m, &plus(), &cfg).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.record.steps, 500);
    }

    #[test]
    fn idle_model_stays_put() {
        let m = QndModel::new(vec![1, 1])
            .unwrap()
            .with_diffusive(&[1.0, -1.0], 0.0, 0.0)
            .with_jump(&[1.0, 2.0], 0.0, 0.0);
        let rho0 = plus();
        let cfg = SimConfig::new(0.1, 1e-3, 1).keep_rho(true);
        let out = simulate(&m, &rho0, &cfg).unwrap();
        assert!(out.record.dn.iter().all(|&x| x == 0));
        for r in out.rho_path.unwrap() {
            assert!(max_abs(&(r - &rho0)) < 1e-12);
        }
    }

    #[test]
    fn guard_rejects_large_dt() {
        let cfg = SimConfig::new(1.0, 0.05, 1);
        assert!(matches!(
            simulate(&qubit(), &plus(), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn generator_constant_and_martingale() {
        struct Const;
        impl TestFunction for Const {
            fn value(&self, _: &CMat) -> f64 {
                3.0
            }
            fn derivative(&self, _: &CMat, _: &CMat) -> f64 {
                0.0
            }
            fn second_derivative(&self, _: &CMat, _: &CMat) -> f64 {
                0.0
            }
        }
        let m = qubit();
        let rho = pure_state(&[c(0.6, 0.0), c(0.3, 0.5)]);
        assert_eq!(generator_apply(&m, &Const, &rho).unwrap(), 0.0);
        for j in 0..2 {
            let v = OnBlocks {
                blocks: &m.blocks,
                f: BlockWeight(j),
            };
            assert!(generator_apply(&m, &v, &rho).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn generator_lyapunov_value() {
        let m = qubit();
        let v = OnBlocks {
            blocks: &m.blocks,
            f: PairLyapunov,
        };
        let g = generator_apply(&m, &v, &plus()).unwrap();
        assert!((g + 1.43568).abs() < 1e-4, "{g}");
    }
}
