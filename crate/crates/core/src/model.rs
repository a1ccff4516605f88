//! QND system model: block structure, operators, parameters and derived
//! coefficients.
//!
//! Measurement operators are stored by their block coefficients, `L_k = Σ_j
//! l_{k,j} Π_j` and `C_k = Σ_j c_{k,j} Π_j`; full matrices are synthesised on
//! demand. The Hamiltonian and the unmonitored noise operators are stored block
//! by block.

use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::linalg::{block_diag, hermiticity_defect, CMat, C64};
use crate::{Error, Result};

/// Absolute tolerance for checks on user-supplied model data.
pub const MODEL_TOL: f64 = 1e-12;

/// Decomposition `H = H_1 ⊕ … ⊕ H_𝐣`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockStructure {
    block_dims: Vec<usize>,
    offsets: Vec<usize>,
    total_dim: usize,
}

impl BlockStructure {
    pub fn new(block_dims: Vec<usize>) -> Result<Self> {
        if block_dims.len() < 2 {
            return Err(Error::Structure(format!(
                "need at least two blocks, got {}",
                block_dims.len()
            )));
        }
        if let Some(j) = block_dims.iter().position(|&d| d == 0) {
            return Err(Error::Structure(format!("block {} has dimension 0", j + 1)));
        }
        let mut offsets = Vec::with_capacity(block_dims.len());
        let mut acc = 0;
        for &d in &block_dims {
            offsets.push(acc);
            acc += d;
        }
        Ok(BlockStructure {
            block_dims,
            offsets,
            total_dim: acc,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.block_dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.block_dims
    }

    pub fn dim(&self, j: usize) -> usize {
        self.block_dims[j]
    }

    pub fn offset(&self, j: usize) -> usize {
        self.offsets[j]
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Orthogonal projector `Π_j` onto block `j` (zero-based).
    pub fn projector(&self, j: usize) -> CMat {
        let mut p = CMat::zeros(self.total_dim, self.total_dim);
        for r in self.offsets[j]..self.offsets[j] + self.block_dims[j] {
            p[(r, r)] = C64::new(1.0, 0.0);
        }
        p
    }

    /// Diagonal operator `Σ_j x_j Π_j`.
    pub fn scalar_on_blocks(&self, x: &[C64]) -> CMat {
        let mut diag = Vec::with_capacity(self.total_dim);
        for (j, &d) in self.block_dims.iter().enumerate() {
            diag.extend(std::iter::repeat_n(x[j], d));
        }
        CMat::from_diagonal(&DVector::from_vec(diag))
    }

    /// Block weights `Tr(Π_j ρ)`.
    pub fn block_weights(&self, rho: &CMat) -> Vec<f64> {
        (0..self.n_blocks())
            .map(|j| {
                (self.offsets[j]..self.offsets[j] + self.block_dims[j])
                    .map(|r| rho[(r, r)].re)
                    .sum()
            })
            .collect()
    }
}

/// A QND model with its true physical parameters.
///
/// Channel indices are zero-based in code; diagnostics print them one-based.
#[derive(Clone, Debug)]
pub struct QndModel {
    pub blocks: BlockStructure,
    /// `H_j`, one Hermitian matrix per block.
    pub h_blocks: Vec<CMat>,
    /// `l[k][j]`, diffusive channels.
    pub l: Vec<Vec<C64>>,
    /// `c[k][j]`, counting channels.
    pub c: Vec<Vec<C64>>,
    /// `a_blocks[k][j]`, unmonitored noise operators.
    pub a_blocks: Vec<Vec<CMat>>,
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
    pub iota: Vec<f64>,
    pub theta: Vec<f64>,
    /// `zeta[k][kbar]`: probability that a photon of channel `kbar` is registered by detector `k`.
    pub zeta: Vec<Vec<f64>>,
}

impl QndModel {
    /// Model with zero Hamiltonian and no channels.
    pub fn new(block_dims: Vec<usize>) -> Result<Self> {
        let blocks = BlockStructure::new(block_dims)?;
        let h_blocks = blocks.dims().iter().map(|&d| CMat::zeros(d, d)).collect();
        Ok(QndModel {
            blocks,
            h_blocks,
            l: Vec::new(),
            c: Vec::new(),
            a_blocks: Vec::new(),
            gamma: Vec::new(),
            eta: Vec::new(),
            iota: Vec::new(),
            theta: Vec::new(),
            zeta: Vec::new(),
        })
    }

    pub fn with_hamiltonian(mut self, h_blocks: Vec<CMat>) -> Self {
        self.h_blocks = h_blocks;
        self
    }

    /// Adds a diffusive channel with real block coefficients.
    pub fn with_diffusive(mut self, l: &[f64], gamma: f64, eta: f64) -> Self {
        self.l.push(l.iter().map(|&x| C64::new(x, 0.0)).collect());
        self.gamma.push(gamma);
        self.eta.push(eta);
        self
    }

    pub fn with_diffusive_complex(mut self, l: Vec<C64>, gamma: f64, eta: f64) -> Self {
        self.l.push(l);
        self.gamma.push(gamma);
        self.eta.push(eta);
        self
    }

    /// Adds a counting channel with real block coefficients. The cross-talk
    /// matrix grows by an identity row and column.
    pub fn with_jump(self, c: &[f64], iota: f64, theta: f64) -> Self {
        self.with_jump_complex(c.iter().map(|&x| C64::new(x, 0.0)).collect(), iota, theta)
    }

    pub fn with_jump_complex(mut self, c: Vec<C64>, iota: f64, theta: f64) -> Self {
        self.c.push(c);
        self.iota.push(iota);
        self.theta.push(theta);
        let n = self.c.len();
        for row in self.zeta.iter_mut() {
            row.push(0.0);
        }
        let mut row = vec![0.0; n];
        row[n - 1] = 1.0;
        self.zeta.push(row);
        self
    }

    pub fn with_zeta(mut self, zeta: Vec<Vec<f64>>) -> Self {
        self.zeta = zeta;
        self
    }

    pub fn with_noise(mut self, blocks: Vec<CMat>) -> Self {
        self.a_blocks.push(blocks);
        self
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.n_blocks()
    }

    pub fn n_diffusive(&self) -> usize {
        self.l.len()
    }

    pub fn n_jump(&self) -> usize {
        self.c.len()
    }

    pub fn n_noise(&self) -> usize {
        self.a_blocks.len()
    }

    /// `√(η_k γ_k)`.
    pub fn sqrt_eta_gamma(&self, k: usize) -> f64 {
        (self.eta[k] * self.gamma[k]).sqrt()
    }

    pub fn hamiltonian(&self) -> CMat {
        block_diag(&self.h_blocks)
    }

    pub fn l_operator(&self, k: usize) -> CMat {
        self.blocks.scalar_on_blocks(&self.l[k])
    }

    pub fn c_operator(&self, k: usize) -> CMat {
        self.blocks.scalar_on_blocks(&self.c[k])
    }

    pub fn noise_operator(&self, k: usize) -> CMat {
        block_diag(&self.a_blocks[k])
    }

    /// Shape checks; failures here are structural errors rather than
    /// assumption violations.
    pub fn check_structure(&self) -> Result<()> {
        let nb = self.n_blocks();
        let dims = self.blocks.dims();
        let err = |m: String| Err(Error::Structure(m));
        if self.h_blocks.len() != nb {
            return err(format!(
                "{} Hamiltonian blocks for {} blocks",
                self.h_blocks.len(),
                nb
            ));
        }
        for (j, h) in self.h_blocks.iter().enumerate() {
            if h.nrows() != dims[j] || h.ncols() != dims[j] {
                return err(format!(
                    "Hamiltonian block {} is {}x{}, expected {}x{}",
                    j + 1,
                    h.nrows(),
                    h.ncols(),
                    dims[j],
                    dims[j]
                ));
            }
        }
        if self.gamma.len() != self.l.len() || self.eta.len() != self.l.len() {
            return err("gamma/eta lengths differ from the number of diffusive channels".into());
        }
        for (k, row) in self.l.iter().enumerate() {
            if row.len() != nb {
                return err(format!(
                    "diffusive channel {} has {} coefficients, expected {}",
                    k + 1,
                    row.len(),
                    nb
                ));
            }
        }
        let nj = self.c.len();
        if self.iota.len() != nj || self.theta.len() != nj {
            return err("iota/theta lengths differ from the number of counting channels".into());
        }
        for (k, row) in self.c.iter().enumerate() {
            if row.len() != nb {
                return err(format!(
                    "counting channel {} has {} coefficients, expected {}",
                    k + 1,
                    row.len(),
                    nb
                ));
            }
        }
        if self.zeta.len() != nj || self.zeta.iter().any(|r| r.len() != nj) {
            return err(format!("cross-talk matrix must be {nj}x{nj}"));
        }
        for (k, blocks) in self.a_blocks.iter().enumerate() {
            if blocks.len() != nb {
                return err(format!(
                    "noise operator {} has {} blocks, expected {}",
                    k + 1,
                    blocks.len(),
                    nb
                ));
            }
            for (j, a) in blocks.iter().enumerate() {
                if a.nrows() != dims[j] || a.ncols() != dims[j] {
                    return err(format!(
                        "noise operator {} block {} has wrong shape",
                        k + 1,
                        j + 1
                    ));
                }
            }
        }
        let finite = self
            .h_blocks
            .iter()
            .flat_map(|m| m.iter())
            .all(|z| z.re.is_finite() && z.im.is_finite())
            && self
                .l
                .iter()
                .flatten()
                .chain(self.c.iter().flatten())
                .all(|z| z.re.is_finite() && z.im.is_finite())
            && self
                .a_blocks
                .iter()
                .flatten()
                .flat_map(|m| m.iter())
                .all(|z| z.re.is_finite() && z.im.is_finite())
            && self
                .gamma
                .iter()
                .chain(&self.eta)
                .chain(&self.iota)
                .chain(&self.theta)
                .chain(self.zeta.iter().flatten())
                .all(|x| x.is_finite());
        if !finite {
            return err("non-finite model entry".into());
        }
        Ok(())
    }

    /// Whether the cross-talk matrix is exactly diagonal.
    pub fn zeta_is_diagonal(&self) -> bool {
        self.zeta
            .iter()
            .enumerate()
            .all(|(k, row)| row.iter().enumerate().all(|(kb, &z)| k == kb || z == 0.0))
    }
}

/// A single violated invariant or distinguishability clause.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NonHermitianBlock {
        block: usize,
        defect: f64,
    },
    ParameterRange {
        name: String,
        value: f64,
    },
    CrossTalkColumnSum {
        column: usize,
        sum: f64,
    },
    /// Every diffusive channel has equal real parts on the pair.
    DiffusiveIndistinguishable {
        i: usize,
        j: usize,
    },
    /// Ordering fails: `|c_{k,i}| > |c_{k,j}|` does not hold for `i > j`.
    JumpNotOrdered {
        k: usize,
        i: usize,
        j: usize,
    },
    /// Diagonal cross-talk only: every counting channel has equal moduli on the pair.
    JumpIndistinguishable {
        i: usize,
        j: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonHermitianBlock { block, defect } => {
                write!(f, "H_{} is not Hermitian (defect {:e})", block + 1, defect)
            }
            Violation::ParameterRange { name, value } => write!(f, "{name} = {value} out of range"),
            Violation::CrossTalkColumnSum { column, sum } => {
                write!(f, "cross-talk column {} sums to {} > 1", column + 1, sum)
            }
            Violation::DiffusiveIndistinguishable { i, j } => {
                write!(
                    f,
                    "diffusive: blocks ({}, {}) share Re l on every diffusive channel",
                    i + 1,
                    j + 1
                )
            }
            Violation::JumpNotOrdered { k, i, j } => write!(
                f,
                "counting order: |c_{{{},{}}}| must exceed |c_{{{},{}}}|",
                k + 1,
                i + 1,
                k + 1,
                j + 1
            ),
            Violation::JumpIndistinguishable { i, j } => {
                write!(
                    f,
                    "counting: blocks ({}, {}) share |c| on every counting channel",
                    i + 1,
                    j + 1
                )
            }
        }
    }
}

/// Outcome of [`validate_qnd`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// `(k, j)` entries with `Γ_{k,j} = 0`; such models cannot drive a filter.
    pub filter_ineligible: Vec<(usize, usize)>,
    /// Whether the relaxed jump clause was applied (diagonal cross-talk).
    pub relaxed_jump_clause: bool,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    /// Pairs `(i, j)`, `i < j`, separated by neither the diffusive nor the
    /// counting clause.
    pub fn indistinguishable_pairs(&self, model: &QndModel) -> Vec<(usize, usize)> {
        let nb = model.n_blocks();
        let mut out = Vec::new();
        for i in 0..nb {
            for j in i + 1..nb {
                let diff = self
                    .violations
                    .iter()
                    .any(|v| matches!(v, Violation::DiffusiveIndistinguishable { i: a, j: b } if *a == i && *b == j));
                let jump = if self.relaxed_jump_clause {
                    self.violations
                        .iter()
                        .any(|v| matches!(v, Violation::JumpIndistinguishable { i: a, j: b } if *a == i && *b == j))
                } else {
                    model.n_jump() == 0
                        || self
                            .violations
                            .iter()
                            .any(|v| matches!(v, Violation::JumpNotOrdered { i: a, j: b, .. } if *a == j && *b == i))
                };
                if diff && jump {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Checks block structure, Hermiticity and parameter ranges, plus the
/// block distinguishability clauses.
pub fn validate_qnd(model: &QndModel) -> Result<ValidationReport> {
    model.check_structure()?;
    let mut report = ValidationReport::default();
    let v = &mut report.violations;

    for (j, h) in model.h_blocks.iter().enumerate() {
        let d = hermiticity_defect(h);
        if d > MODEL_TOL {
            v.push(Violation::NonHermitianBlock {
                block: j,
                defect: d,
            });
        }
    }
    let mut range = |name: String, value: f64, ok: bool| {
        if !ok {
            v.push(Violation::ParameterRange { name, value });
        }
    };
    for k in 0..model.n_diffusive() {
        range(
            format!("gamma_{}", k + 1),
            model.gamma[k],
            model.gamma[k] >= 0.0,
        );
        range(
            format!("eta_{}", k + 1),
            model.eta[k],
            (0.0..=1.0).contains(&model.eta[k]),
        );
    }
    for k in 0..model.n_jump() {
        range(
            format!("iota_{}", k + 1),
            model.iota[k],
            model.iota[k] >= 0.0,
        );
        range(
            format!("theta_{}", k + 1),
            model.theta[k],
            model.theta[k] >= 0.0,
        );
        for kb in 0..model.n_jump() {
            let z = model.zeta[k][kb];
            range(format!("zeta_{}{}", k + 1, kb + 1), z, z >= 0.0);
        }
    }
    for kb in 0..model.n_jump() {
        let s: f64 = (0..model.n_jump()).map(|k| model.zeta[k][kb]).sum();
        if s > 1.0 + MODEL_TOL {
            v.push(Violation::CrossTalkColumnSum { column: kb, sum: s });
        }
    }

    let nb = model.n_blocks();
    for i in 0..nb {
        for j in i + 1..nb {
            let separated = model.l.iter().any(|row| row[i].re != row[j].re);
            if !separated {
                v.push(Violation::DiffusiveIndistinguishable { i, j });
            }
        }
    }
    report.relaxed_jump_clause = model.zeta_is_diagonal();
    if model.n_jump() > 0 {
        if report.relaxed_jump_clause {
            for i in 0..nb {
                for j in i + 1..nb {
                    if model.c.iter().all(|row| row[i].norm() == row[j].norm()) {
                        report
                            .violations
                            .push(Violation::JumpIndistinguishable { i, j });
                    }
                }
            }
        } else {
            for k in 0..model.n_jump() {
                for i in 0..nb {
                    for j in 0..i {
                        if model.c[k][i].norm() <= model.c[k][j].norm() {
                            report
                                .violations
                                .push(Violation::JumpNotOrdered { k, i, j });
                        }
                    }
                }
            }
        }
    }

    let gt = gamma_table(model);
    for k in 0..model.n_jump() {
        for j in 0..nb {
            if gt.get(k, j) <= 0.0 {
                report.filter_ineligible.push((k, j));
            }
        }
    }
    Ok(report)
}

/// `Γ_{k,j} = θ_k + Σ_k̄ ζ_{k,k̄} ι_k̄ |c_{k̄,j}|²`.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaTable {
    pub values: Vec<Vec<f64>>,
}

impl GammaTable {
    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.values[k][j]
    }
}

pub fn gamma_entries(
    theta: &[f64],
    zeta: &[Vec<f64>],
    iota: &[f64],
    c: &[Vec<C64>],
    n_blocks: usize,
) -> Vec<Vec<f64>> {
    let nj = theta.len();
    (0..nj)
        .map(|k| {
            (0..n_blocks)
                .map(|j| {
                    theta[k]
                        + (0..nj)
                            .map(|kb| zeta[k][kb] * iota[kb] * c[kb][j].norm_sqr())
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

pub fn gamma_table(model: &QndModel) -> GammaTable {
    GammaTable {
        values: gamma_entries(
            &model.theta,
            &model.zeta,
            &model.iota,
            &model.c,
            model.n_blocks(),
        ),
    }
}

/// `E_{l,c} = min_{i≠j} Σ_k η_kγ_k (Re l_{k,i} − Re l_{k,j})² + Σ_k (√Γ_{k,i} − √Γ_{k,j})²`.
pub fn e_lc(model: &QndModel) -> f64 {
    let gt = gamma_table(model);
    let nb = model.n_blocks();
    let mut best = f64::INFINITY;
    for i in 0..nb {
        for j in i + 1..nb {
            let mut s = 0.0;
            for k in 0..model.n_diffusive() {
                let d = model.l[k][i].re - model.l[k][j].re;
                s += model.eta[k] * model.gamma[k] * d * d;
            }
            for k in 0..model.n_jump() {
                let d = gt.get(k, i).sqrt() - gt.get(k, j).sqrt();
                s += d * d;
            }
            best = best.min(s);
        }
    }
    best
}

/// Complex number as `[re, im]`.
pub type CxSpec = [f64; 2];
/// Square matrix as rows of `[re, im]` entries.
pub type MatSpec = Vec<Vec<CxSpec>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusiveSpec {
    pub l: Vec<CxSpec>,
    pub gamma: f64,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpSpec {
    pub c: Vec<CxSpec>,
    pub iota: f64,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub blocks: Vec<MatSpec>,
}

/// File representation of a [`QndModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub block_dims: Vec<usize>,
    /// One matrix per block; omitted means `H = 0`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hamiltonian: Vec<MatSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diffusive: Vec<DiffusiveSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub jump: Vec<JumpSpec>,
    /// Cross-talk matrix; omitted means identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise: Vec<NoiseSpec>,
}

fn cx(z: &CxSpec) -> C64 {
    C64::new(z[0], z[1])
}

fn mat(m: &MatSpec) -> Result<CMat> {
    let n = m.len();
    if m.iter().any(|r| r.len() != n) {
        return Err(Error::Structure(
            "matrix rows must all have the same length as the row count".into(),
        ));
    }
    Ok(CMat::from_fn(n, n, |r, c| cx(&m[r][c])))
}

fn mat_spec(m: &CMat) -> MatSpec {
    (0..m.nrows())
        .map(|r| {
            (0..m.ncols())
                .map(|c| [m[(r, c)].re, m[(r, c)].im])
                .collect()
        })
        .collect()
}

impl ModelSpec {
    pub fn to_model(&self) -> Result<QndModel> {
        let mut m = QndModel::new(self.block_dims.clone())?;
        if !self.hamiltonian.is_empty() {
            m.h_blocks = self.hamiltonian.iter().map(mat).collect::<Result<_>>()?;
        }
        for d in &self.diffusive {
            m = m.with_diffusive_complex(d.l.iter().map(cx).collect(), d.gamma, d.eta);
        }
        for j in &self.jump {
            m = m.with_jump_complex(j.c.iter().map(cx).collect(), j.iota, j.theta);
        }
        if let Some(z) = &self.zeta {
            m.zeta = z.clone();
        }
        for n in &self.noise {
            m.a_blocks
                .push(n.blocks.iter().map(mat).collect::<Result<_>>()?);
        }
        m.check_structure()?;
        Ok(m)
    }

    pub fn from_model(m: &QndModel) -> Self {
        let zero_h = m
            .h_blocks
            .iter()
            .all(|h| h.iter().all(|z| *z == C64::new(0.0, 0.0)));
        let identity_zeta = m.zeta.iter().enumerate().all(|(k, row)| {
            row.iter()
                .enumerate()
                .all(|(kb, &z)| z == if k == kb { 1.0 } else { 0.0 })
        });
        ModelSpec {
            block_dims: m.blocks.dims().to_vec(),
            hamiltonian: if zero_h {
                Vec::new()
            } else {
                m.h_blocks.iter().map(mat_spec).collect()
            },
            diffusive: (0..m.n_diffusive())
                .map(|k| DiffusiveSpec {
                    l: m.l[k].iter().map(|z| [z.re, z.im]).collect(),
                    gamma: m.gamma[k],
                    eta: m.eta[k],
                })
                .collect(),
            jump: (0..m.n_jump())
                .map(|k| JumpSpec {
                    c: m.c[k].iter().map(|z| [z.re, z.im]).collect(),
                    iota: m.iota[k],
                    theta: m.theta[k],
                })
                .collect(),
            zeta: if identity_zeta {
                None
            } else {
                Some(m.zeta.clone())
            },
            noise: m
                .a_blocks
                .iter()
                .map(|b| NoiseSpec {
                    blocks: b.iter().map(mat_spec).collect(),
                })
                .collect(),
        }
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("model spec serialises");
        sha256_hex(json.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
