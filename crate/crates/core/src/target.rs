//! The scalar parameter being estimated and how candidate values map into
//! filter parameters.

use serde::{Deserialize, Serialize};

use crate::model::QndModel;
use crate::reduced::FilterParams;
use crate::{Error, Result};

/// Estimation regime, which fixes the grid construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Diffusive,
    JumpSingle,
    JumpMulti,
}

/// Indices are zero-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParamTarget {
    /// A Hamiltonian parameter; never identifiable from QND records.
    Mu,
    /// An unmonitored-noise parameter; never identifiable from QND records.
    Nu,
    /// `λ = √(η_kγ_k)` for diffusive channel `k`; the truth is moved through `γ_k`.
    DiffusiveStrength { channel: usize },
    /// `λ = ζ_{k,k̄} ι_k̄` for detector `k` and source `k̄`; moved through `ζ_{k,k̄}`.
    JumpStrength { detector: usize, source: usize },
}

impl ParamTarget {
    /// Short name used in files and messages.
    pub fn name(&self) -> String {
        match self {
            ParamTarget::Mu => "mu".into(),
            ParamTarget::Nu => "nu".into(),
            ParamTarget::DiffusiveStrength { channel } => {
                format!("sqrt_eta_gamma[{}]", channel + 1)
            }
            ParamTarget::JumpStrength { detector, source } => {
                format!("zeta_iota[{},{}]", detector + 1, source + 1)
            }
        }
    }

    /// Checks that the target refers to existing channels and can be moved.
    pub fn check(&self, model: &QndModel) -> Result<()> {
        match *self {
            ParamTarget::Mu | ParamTarget::Nu => Err(Error::NonIdentifiable {
                param: self.name(),
                explanation: "Hamiltonian and unmonitored-noise parameters do not enter the block-weight dynamics".into(),
            }),
            ParamTarget::DiffusiveStrength { channel } => {
                if channel >= model.n_diffusive() {
                    return Err(Error::Config(format!("no diffusive channel {}", channel + 1)));
                }
                if !(model.eta[channel] > 0.0) {
                    return Err(Error::Config(format!("η_{} must be positive to estimate √(ηγ)", channel + 1)));
                }
                Ok(())
            }
            ParamTarget::JumpStrength { detector, source } => {
                if detector >= model.n_jump() || source >= model.n_jump() {
                    return Err(Error::Config(format!("no counting pair ({}, {})", detector + 1, source + 1)));
                }
                if !(model.iota[source] > 0.0) {
                    return Err(Error::Config(format!("ι_{} must be positive to estimate ζι", source + 1)));
                }
                Ok(())
            }
        }
    }

    pub fn regime(&self, model: &QndModel) -> Result<Regime> {
        self.check(model)?;
        Ok(match *self {
            ParamTarget::DiffusiveStrength { .. } => Regime::Diffusive,
            ParamTarget::JumpStrength { detector, .. } => {
                if model.n_jump() == 1 && model.theta[detector] == 0.0 {
                    Regime::JumpSingle
                } else {
                    Regime::JumpMulti
                }
            }
            ParamTarget::Mu | ParamTarget::Nu => unreachable!("rejected by check"),
        })
    }

    /// Current value of `λ` in the model.
    pub fn lambda_of(&self, model: &QndModel) -> Result<f64> {
        self.check(model)?;
        Ok(match *self {
            ParamTarget::DiffusiveStrength { channel } => model.sqrt_eta_gamma(channel),
            ParamTarget::JumpStrength { detector, source } => {
                model.zeta[detector][source] * model.iota[source]
            }
            ParamTarget::Mu | ParamTarget::Nu => unreachable!(),
        })
    }

    /// The model with `λ` replaced.
    pub fn with_lambda(&self, model: &QndModel, lambda: f64) -> Result<QndModel> {
        self.check(model)?;
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Domain(format!("λ = {lambda} must be positive")));
        }
        let mut m = model.clone();
        match *self {
            ParamTarget::DiffusiveStrength { channel } => {
                m.gamma[channel] = lambda * lambda / m.eta[channel]
            }
            ParamTarget::JumpStrength { detector, source } => {
                m.zeta[detector][source] = lambda / m.iota[source]
            }
            ParamTarget::Mu | ParamTarget::Nu => unreachable!(),
        }
        Ok(m)
    }

    /// Filter parameters for candidate `λ̂`, all other parameters calibrated.
    pub fn filter_params(&self, model: &QndModel, lambda_hat: f64) -> Result<FilterParams> {
        FilterParams::calibrated(&self.with_lambda(model, lambda_hat)?)
    }

    /// Per-block coefficients of `λ` in the target quantity: `Re l_{k,j}` for a
    /// diffusive target, `|c_{k̄,j}|²` for a counting target.
    pub fn weights(&self, model: &QndModel) -> Result<Vec<f64>> {
        self.check(model)?;
        Ok(match *self {
            ParamTarget::DiffusiveStrength { channel } => {
                model.l[channel].iter().map(|z| z.re).collect()
            }
            ParamTarget::JumpStrength { source, .. } => {
                model.c[source].iter().map(|z| z.norm_sqr()).collect()
            }
            ParamTarget::Mu | ParamTarget::Nu => unreachable!(),
        })
    }

    /// Known offset `Υ_j = θ_k + Σ_{k̄'≠k̄} ζ_{k,k̄'} ι_k̄' |c_{k̄',j}|²` of a counting target.
    pub fn offsets(&self, model: &QndModel) -> Result<Vec<f64>> {
        self.check(model)?;
        match *self {
            ParamTarget::JumpStrength { detector, source } => Ok((0..model.n_blocks())
                .map(|j| {
                    model.theta[detector]
                        + (0..model.n_jump())
                            .filter(|&kb| kb != source)
                            .map(|kb| {
                                model.zeta[detector][kb]
                                    * model.iota[kb]
                                    * model.c[kb][j].norm_sqr()
                            })
                            .sum::<f64>()
                })
                .collect()),
            _ => Ok(vec![0.0; model.n_blocks()]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gamma_table;

    fn two_channel() -> QndModel {
        QndModel::new(vec![1, 1])
            .unwrap()
            .with_jump(&[1.0, 2.0], 1.0, 0.2)
            .with_jump(&[1.0, 1.5], 1.0, 0.3)
            .with_zeta(vec![vec![0.8, 0.1], vec![0.1, 0.7]])
    }

    #[test]
    fn regimes() {
        let d = QndModel::new(vec![1, 1])
            .unwrap()
            .with_diffusive(&[1.0, -1.0], 1.0, 0.5);
        assert_eq!(
            ParamTarget::DiffusiveStrength { channel: 0 }
                .regime(&d)
                .unwrap(),
            Regime::Diffusive
        );
        let s = QndModel::new(vec![1, 1])
            .unwrap()
            .with_jump(&[1.0, 2.0], 1.0, 0.0);
        assert_eq!(
            ParamTarget::JumpStrength {
                detector: 0,
                source: 0
            }
            .regime(&s)
            .unwrap(),
            Regime::JumpSingle
        );
        assert_eq!(
            ParamTarget::JumpStrength {
                detector: 0,
                source: 1
            }
            .regime(&two_channel())
            .unwrap(),
            Regime::JumpMulti
        );
        assert!(matches!(
            ParamTarget::Mu.regime(&d),
            Err(Error::NonIdentifiable { .. })
        ));
    }

    #[test]
    fn with_lambda_round_trips() {
        let m = two_channel();
        let t = ParamTarget::JumpStrength {
            detector: 0,
            source: 1,
        };
        let m2 = t.with_lambda(&m, 0.37).unwrap();
        assert!((t.lambda_of(&m2).unwrap() - 0.37).abs() < 1e-15);
        let w = t.weights(&m).unwrap();
        let u = t.offsets(&m).unwrap();
        let g = gamma_table(&m2);
        for j in 0..2 {
            assert!((g.get(0, j) - (0.37 * w[j] + u[j])).abs() < 1e-14);
        }
    }
}
