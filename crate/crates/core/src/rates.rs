//! Mismatch functionals, stability conditions and predicted rates.

use serde::Serialize;

use crate::model::{gamma_table, QndModel};
use crate::reduced::FilterParams;
use crate::{Error, Result};

/// `[k][i][j]`.
pub type Tensor3 = Vec<Vec<Vec<f64>>>;

/// Dense `[k][m][i][n][j]` tensor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Tensor5 {
    pub channels: usize,
    pub candidates: usize,
    pub blocks: usize,
    pub data: Vec<f64>,
}

impl Tensor5 {
    pub fn zeros(channels: usize, candidates: usize, blocks: usize) -> Self {
        Tensor5 {
            channels,
            candidates,
            blocks,
            data: vec![0.0; channels * (candidates * blocks).pow(2)],
        }
    }

    fn idx(&self, k: usize, m: usize, i: usize, n: usize, j: usize) -> usize {
        let nb = self.blocks;
        let side = self.candidates * nb;
        ((k * side + m * nb + i) * side + n * nb) + j
    }

    pub fn get(&self, k: usize, m: usize, i: usize, n: usize, j: usize) -> f64 {
        self.data[self.idx(k, m, i, n, j)]
    }

    pub fn set(&mut self, k: usize, m: usize, i: usize, n: usize, j: usize, v: f64) {
        let e = self.idx(k, m, i, n, j);
        self.data[e] = v;
    }

    /// `Σ_k T^k_{m,i,n,j}`.
    pub fn channel_sum(&self, m: usize, i: usize, n: usize, j: usize) -> f64 {
        (0..self.channels).map(|k| self.get(k, m, i, n, j)).sum()
    }
}

/// `Ψ`-type functional `log(x/y)(y − g) − y(1 − x/y + log(x/y))` for estimated
/// rates `x`, `y` and true rate `g`.
pub fn psi_form(x: f64, y: f64, g: f64) -> f64 {
    let h = x / y;
    let lh = h.ln();
    lh * (y - g) - y * (1.0 - h + lh)
}

/// `Φ`-type functional `2[(A − B)² + 2(A − B)(B − C)]`.
pub fn phi_form(a: f64, b: f64, c: f64) -> f64 {
    let d = a - b;
    2.0 * (d * d + 2.0 * d * (b - c))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MismatchReport {
    pub phi: Tensor3,
    pub psi: Tensor3,
    /// `[i][j]`; diagonal entries are `true`.
    pub condition1_ok: Vec<Vec<bool>>,
}

fn check_rates(table: &[Vec<f64>]) -> Result<()> {
    for (k, row) in table.iter().enumerate() {
        for (j, &g) in row.iter().enumerate() {
            if !(g > 0.0) {
                return Err(Error::Domain(format!(
                    "Γ̂_{{{},{}}} = {g} is not positive",
                    k + 1,
                    j + 1
                )));
            }
        }
    }
    Ok(())
}

/// `Φ^k_{i,j}` and `Ψ^k_{i,j}` of a single estimated filter against the truth.
pub fn mismatch_functionals(model: &QndModel, params: &FilterParams) -> Result<(Tensor3, Tensor3)> {
    check_rates(&params.gamma_hat_table)?;
    let nb = model.n_blocks();
    let truth = gamma_table(model);
    let phi = (0..model.n_diffusive())
        .map(|k| {
            let sh = params.sqrt_eta_gamma(k);
            let s = model.sqrt_eta_gamma(k);
            (0..nb)
                .map(|i| {
                    (0..nb)
                        .map(|j| {
                            let li = model.l[k][i].re;
                            let lj = model.l[k][j].re;
                            phi_form(sh * li, sh * lj, s * lj)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let psi = (0..model.n_jump())
        .map(|k| {
            let gh = &params.gamma_hat_table[k];
            (0..nb)
                .map(|i| {
                    (0..nb)
                        .map(|j| psi_form(gh[i], gh[j], truth.get(k, j)))
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok((phi, psi))
}

/// `Σ_k Φ^k_{i,j} + Σ_k Ψ^k_{i,j} > 0` for every `i ≠ j`.
pub fn check_condition1(phi: &Tensor3, psi: &Tensor3, n_blocks: usize) -> Vec<Vec<bool>> {
    (0..n_blocks)
        .map(|i| {
            (0..n_blocks)
                .map(|j| {
                    i == j || {
                        let s: f64 = phi.iter().map(|t| t[i][j]).sum::<f64>()
                            + psi.iter().map(|t| t[i][j]).sum::<f64>();
                        s > 0.0
                    }
                })
                .collect()
        })
        .collect()
}

pub fn mismatch_report(model: &QndModel, params: &FilterParams) -> Result<MismatchReport> {
    let (phi, psi) = mismatch_functionals(model, params)?;
    let ok = check_condition1(&phi, &psi, model.n_blocks());
    Ok(MismatchReport {
        phi,
        psi,
        condition1_ok: ok,
    })
}

/// `Φ̄^k_{m,i,n,j}` and `Ψ̄^k_{m,i,n,j}` of a filter bank against the truth.
pub fn augmented_mismatch(model: &QndModel, bank: &[FilterParams]) -> Result<(Tensor5, Tensor5)> {
    for p in bank {
        check_rates(&p.gamma_hat_table)?;
    }
    let nb = model.n_blocks();
    let nn = bank.len();
    let truth = gamma_table(model);
    let mut phi = Tensor5::zeros(model.n_diffusive(), nn, nb);
    let mut psi = Tensor5::zeros(model.n_jump(), nn, nb);
    for k in 0..model.n_diffusive() {
        let s = model.sqrt_eta_gamma(k);
        for m in 0..nn {
            let sm = bank[m].sqrt_eta_gamma(k);
            for i in 0..nb {
                let a = sm * model.l[k][i].re;
                for n in 0..nn {
                    let sn = bank[n].sqrt_eta_gamma(k);
                    for j in 0..nb {
                        let lj = model.l[k][j].re;
                        phi.set(k, m, i, n, j, phi_form(a, sn * lj, s * lj));
                    }
                }
            }
        }
    }
    for k in 0..model.n_jump() {
        for m in 0..nn {
            for i in 0..nb {
                let x = bank[m].gamma_hat_table[k][i];
                for n in 0..nn {
                    for j in 0..nb {
                        let y = bank[n].gamma_hat_table[k][j];
                        psi.set(k, m, i, n, j, psi_form(x, y, truth.get(k, j)));
                    }
                }
            }
        }
    }
    Ok((phi, psi))
}

/// Smallest `Σ_kΦ̄ + Σ_kΨ̄` over `(m,i) ≠ (n*,j)` with its location `(m, i, j)`.
pub fn condition2_margin(
    phi: &Tensor5,
    psi: &Tensor5,
    nstar: usize,
) -> (f64, Option<(usize, usize, usize)>) {
    let nn = phi.candidates.max(psi.candidates);
    let nb = phi.blocks.max(psi.blocks);
    let mut best = f64::INFINITY;
    let mut at = None;
    for j in 0..nb {
        for m in 0..nn {
            for i in 0..nb {
                if m == nstar && i == j {
                    continue;
                }
                let s = phi.channel_sum(m, i, nstar, j) + psi.channel_sum(m, i, nstar, j);
                if s < best || at.is_none() {
                    best = s;
                    at = Some((m, i, j));
                }
            }
        }
    }
    (best, at)
}

/// Exact sign test of the augmented tolerance condition for a given `n*`.
pub fn check_condition2(phi: &Tensor5, psi: &Tensor5, nstar: usize) -> bool {
    condition2_margin(phi, psi, nstar).0 > 0.0
}

/// `max_{i,j} (−Σ_kΦ̄^k_{n,i,n*,j} − Σ_kΨ̄^k_{n,i,n*,j})`.
pub fn predicted_pi_rate(phi: &Tensor5, psi: &Tensor5, n: usize, nstar: usize) -> f64 {
    let nb = phi.blocks.max(psi.blocks);
    let mut best = f64::NEG_INFINITY;
    for i in 0..nb {
        for j in 0..nb {
            let v = -phi.channel_sum(n, i, nstar, j) - psi.channel_sum(n, i, nstar, j);
            best = best.max(v);
        }
    }
    best
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
    fn calibrated_values() {
        let m = qubit();
        let p = FilterParams::calibrated(&m).unwrap();
        let (phi, psi) = mismatch_functionals(&m, &p).unwrap();
        assert!((phi[0][0][1] - 4.0).abs() < 1e-12);
        let want = -1.3 * (1.0 - 4.3 / 1.3 + (4.3f64 / 1.3).ln());
        assert!((psi[0][1][0] - want).abs() < 1e-12);
        assert!((psi[0][1][0] - 1.44487).abs() < 1e-4);
        assert!(check_condition1(&phi, &psi, 2).iter().flatten().all(|&b| b));
    }

    #[test]
    fn equal_rates_give_zero_psi() {
        assert_eq!(psi_form(2.5, 2.5, 2.5), 0.0);
    }

    #[test]
    fn phi_is_not_symmetric() {
        let m = QndModel::new(vec![1, 1])
            .unwrap()
            .with_diffusive(&[2.0, -1.0], 1.0, 0.5);
        let mut p = FilterParams::calibrated(&m).unwrap();
        p.gamma_hat = vec![1.7];
        let (phi, _) = mismatch_functionals(&m, &p).unwrap();
        assert!((phi[0][0][1] - phi[0][1][0]).abs() > 1e-3);
    }

    #[test]
    fn duplicate_truth_fails_condition2() {
        let m = qubit();
        let p = FilterParams::calibrated(&m).unwrap();
        let (phi, psi) = augmented_mismatch(&m, &[p.clone(), p]).unwrap();
        assert_eq!(phi.get(0, 1, 0, 0, 0), 0.0);
        assert_eq!(psi.get(0, 1, 0, 0, 0), 0.0);
        assert!(!check_condition2(&phi, &psi, 0));
    }

    #[test]
    fn rate_of_constant_tensors() {
        let z = Tensor5::zeros(1, 2, 2);
        assert_eq!(predicted_pi_rate(&z, &z, 1, 0), 0.0);
        let mut one = Tensor5::zeros(1, 1, 1);
        one.set(0, 0, 0, 0, 0, 4.0);
        let zero = Tensor5::zeros(0, 1, 1);
        assert_eq!(predicted_pi_rate(&one, &zero, 0, 0), -4.0);
    }

    #[test]
    fn domain_error_on_nonpositive_rate() {
        let m = qubit();
        let mut p = FilterParams::calibrated(&m).unwrap();
        p.gamma_hat_table[0][0] = 0.0;
        assert!(matches!(
            mismatch_functionals(&m, &p),
            Err(Error::Domain(_))
        ));
    }
}
