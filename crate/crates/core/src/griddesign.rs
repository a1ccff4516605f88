//! Estimator grids `λ̂_1 < … < λ̂_𝐧` with certified cell parameters `(a, b, ε)`.
//!
//! Designs come from a deterministic coarse-to-fine scan: step `1e-2`, then two
//! refinements by a factor of ten within one step of the incumbent. The default
//! objective maximises the cell ratio `b/a`.

use serde::{Deserialize, Serialize};

use crate::model::QndModel;
use crate::rates::{augmented_mismatch, condition2_margin, predicted_pi_rate};
use crate::reduced::FilterParams;
use crate::target::ParamTarget;
pub use crate::target::Regime;
use crate::{Error, Result};

/// Near-degenerate ratios within this band of 1 are rejected.
pub const EXCLUSION_BAND: f64 = 1e-9;

/// Upper end of the admissible auxiliary parameter, `(√13 − 1)/2`.
pub fn epsilon_max() -> f64 {
    (13f64.sqrt() - 1.0) / 2.0
}

/// Principal branch of the Lambert W function by Halley iteration.
///
/// Starting points: the branch-point series `−1 + p − p²/3 + 11p³/72` with
/// `p = √(2(ex + 1))` for `x < −0.32`, `log1p(x)` up to `x = 3`, and
/// `log x − log log x` beyond.
pub fn lambert_w0(x: f64) -> Result<f64> {
    let branch = -(-1.0f64).exp();
    if !(x >= branch - 1e-15) || x.is_nan() {
        return Err(Error::Domain(format!("W0 undefined at {x} < -1/e")));
    }
    if x <= branch {
        return Ok(-1.0);
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let mut w = if x < -0.32 {
        let p = (2.0 * (std::f64::consts::E * x + 1.0)).max(0.0).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else if x <= 3.0 {
        x.ln_1p()
    } else {
        let l = x.ln();
        l - l.ln()
    };
    for _ in 0..100 {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        if wp1 == 0.0 {
            break;
        }
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        let dw = f / denom;
        let next = w - dw;
        if !next.is_finite() {
            break;
        }
        let done = (next - w).abs() <= 4.0 * f64::EPSILON * next.abs().max(1e-300);
        w = next.max(-1.0);
        if done {
            break;
        }
    }
    Ok(w)
}

/// Upper cell factor `b(a) = −1/W0(−e^{−1/a}/a)` solving `a − b + ab log(b/a) = 0`.
pub fn jump_b_of_a(a: f64) -> Result<f64> {
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::Domain(format!("a = {a} must lie in (0, 1)")));
    }
    let w = lambert_w0(-(-1.0 / a).exp() / a)?;
    Ok(-1.0 / w)
}

pub fn jump_residual(a: f64, b: f64) -> f64 {
    a - b + a * b * (b / a).ln()
}

/// `ψ_d(κ) = 1 − (b/a)^d + κ d log(b/a)`.
pub fn psi_d(a: f64, b: f64, d: i32, kappa: f64) -> f64 {
    let r = b / a;
    1.0 - r.powi(d) + kappa * d as f64 * r.ln()
}

/// Diffusive upper cell factor `b = a/(2a − 1)`.
pub fn diffusive_b_of_a(a: f64) -> f64 {
    a / (2.0 * a - 1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Widest cells, hence fewest filters.
    #[default]
    CellRatio,
    /// Fastest worst-case predicted selection rate with the truth at a candidate.
    WorstRate,
}

/// Prior bracket and accuracy requirement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRequest {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub abar: f64,
    pub bbar: f64,
    #[serde(default)]
    pub objective: Objective,
}

impl GridRequest {
    pub fn new(lambda_lo: f64, lambda_hi: f64, abar: f64, bbar: f64) -> Self {
        GridRequest {
            lambda_lo,
            lambda_hi,
            abar,
            bbar,
            objective: Objective::CellRatio,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.lambda_lo > 0.0 && self.lambda_hi >= self.lambda_lo && self.lambda_hi.is_finite())
        {
            return Err(Error::Config(format!(
                "invalid bracket [{}, {}]",
                self.lambda_lo, self.lambda_hi
            )));
        }
        if !(self.abar > 0.0 && self.abar < 1.0 && self.bbar > 1.0 && self.bbar.is_finite()) {
            return Err(Error::Config(format!(
                "accuracy bracket must satisfy 0 < ā < 1 < b̄, got [{}, {}]",
                self.abar, self.bbar
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    pub passed: bool,
    /// Positive when satisfied; the size of the slack.
    pub margin: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub checks: Vec<ConditionCheck>,
}

impl ConditionReport {
    fn push(&mut self, name: &str, margin: f64) {
        self.checks.push(ConditionCheck {
            name: name.into(),
            passed: margin > 0.0,
            margin,
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// First failing check.
    pub fn binding(&self) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| !c.passed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDesign {
    pub regime: Regime,
    pub a: f64,
    pub b: f64,
    pub epsilon: f64,
    pub lambdas: Vec<f64>,
    pub n_count: usize,
    pub request: GridRequest,
    pub report: ConditionReport,
}

/// Where a value sits relative to the grid cells (indices zero-based).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Location {
    /// Strictly inside cell `n` (closed cell for the multi-channel regime).
    Interior(usize),
    /// Exactly at the shared boundary `bλ̂_n` of cells `n` and `n + 1`.
    Boundary(usize),
    /// In the gap `(bλ̂_n, εbλ̂_n)`.
    Gap(usize),
    Outside,
}

impl GridDesign {
    /// Closed cell `[aλ̂_n, bλ̂_n]`.
    pub fn cell(&self, n: usize) -> (f64, f64) {
        (self.a * self.lambdas[n], self.b * self.lambdas[n])
    }

    /// Ratio between consecutive candidates.
    pub fn step_ratio(&self) -> f64 {
        self.epsilon * self.b / self.a
    }

    pub fn locate(&self, lambda: f64) -> Location {
        let tol = 1e-12 * lambda.abs();
        for n in 0..self.n_count {
            let (lo, hi) = self.cell(n);
            let closed = self.regime == Regime::JumpMulti;
            if (lambda - hi).abs() <= tol && !closed {
                return if n + 1 < self.n_count {
                    Location::Boundary(n)
                } else {
                    Location::Interior(n)
                };
            }
            if (lambda - lo).abs() <= tol && !closed {
                return Location::Interior(n);
            }
            if (closed && lambda >= lo - tol && lambda <= hi + tol) || (lambda > lo && lambda < hi)
            {
                return Location::Interior(n);
            }
            if self.regime == Regime::JumpMulti
                && n + 1 < self.n_count
                && lambda > hi
                && lambda < self.epsilon * hi
            {
                return Location::Gap(n);
            }
        }
        Location::Outside
    }

    /// Bracket concluded when candidate `n` wins: `[aλ̂_n, bλ̂_n]`, or
    /// `(aλ̂_n/ε, εbλ̂_n)` for the multi-channel regime.
    pub fn final_bracket(&self, n: usize) -> (f64, f64) {
        let (lo, hi) = self.cell(n);
        if self.regime == Regime::JumpMulti {
            (lo / self.epsilon, hi * self.epsilon)
        } else {
            (lo, hi)
        }
    }
}

/// `𝐧 = ⌈log(λ̄/λ̲)/log r⌉`, at least one.
pub fn candidate_count(lambda_lo: f64, lambda_hi: f64, ratio: f64) -> usize {
    let x = (lambda_hi / lambda_lo).ln() / ratio.ln();
    ((x - 1e-12).ceil().max(1.0)) as usize
}

/// `λ̂_n = r^{n−1} λ̲ / a`.
pub fn candidate_lambdas(lambda_lo: f64, lambda_hi: f64, a: f64, ratio: f64) -> Vec<f64> {
    let n = candidate_count(lambda_lo, lambda_hi, ratio);
    (0..n)
        .map(|i| ratio.powi(i as i32) * lambda_lo / a)
        .collect()
}

#[derive(Clone, Debug)]
enum Problem {
    Diffusive { re_l: Vec<f64> },
    JumpSingle { w: Vec<f64> },
    JumpMulti { w: Vec<f64>, ups: Vec<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    a: f64,
    b: f64,
    eps: f64,
}

impl Problem {
    fn regime(&self) -> Regime {
        match self {
            Problem::Diffusive { .. } => Regime::Diffusive,
            Problem::JumpSingle { .. } => Regime::JumpSingle,
            Problem::JumpMulti { .. } => Regime::JumpMulti,
        }
    }

    fn blocks(&self) -> usize {
        match self {
            Problem::Diffusive { re_l } => re_l.len(),
            Problem::JumpSingle { w } | Problem::JumpMulti { w, .. } => w.len(),
        }
    }

    /// Full condition report for a candidate. With `fast`, returns at the first failure.
    fn report(&self, req: &GridRequest, c: Candidate, fast: bool) -> (ConditionReport, Vec<f64>) {
        let mut r = ConditionReport::default();
        let ratio = c.eps * c.b / c.a;
        macro_rules! check {
            ($name:expr, $margin:expr) => {{
                r.push($name, $margin);
                if fast && !r.checks.last().unwrap().passed {
                    return (r, Vec::new());
                }
            }};
        }
        check!("a < 1", 1.0 - c.a);
        check!("b > 1", c.b - 1.0);
        match self {
            Problem::JumpMulti { .. } => {
                check!(
                    "accuracy a/eps >= abar",
                    c.a / c.eps - req.abar + f64::MIN_POSITIVE
                );
                check!(
                    "accuracy eps*b <= bbar",
                    req.bbar - c.eps * c.b + f64::MIN_POSITIVE
                );
                check!("eps > 1", c.eps - 1.0);
                check!("eps < (sqrt(13)-1)/2", epsilon_max() - c.eps);
            }
            _ => {
                check!("accuracy a >= abar", c.a - req.abar + f64::MIN_POSITIVE);
                check!("accuracy b <= bbar", req.bbar - c.b + f64::MIN_POSITIVE);
            }
        }
        let lambdas = candidate_lambdas(req.lambda_lo, req.lambda_hi, c.a, ratio);
        let nn = lambdas.len() as i32;
        let nb = self.blocks();
        match self {
            Problem::Diffusive { re_l } => {
                check!("a > 1/2", c.a - 0.5);
                check!("b = a/(2a-1)", 1e-12 - (c.b - diffusive_b_of_a(c.a)).abs());
                let q = 2.0 * c.a - 1.0;
                let mut sep = f64::INFINITY;
                let mut min_above = f64::INFINITY;
                let mut max_below = f64::NEG_INFINITY;
                for d in -(nn - 1)..nn {
                    for i in 0..nb {
                        for j in 0..nb {
                            if d == 0 && i == j {
                                continue;
                            }
                            // f^{m,i}_{n,j} with n − m = d
                            let f = re_l[i] / re_l[j] * q.powi(d);
                            sep = sep.min((f - 1.0).abs());
                            if i != j {
                                if f > 1.0 {
                                    min_above = min_above.min(f);
                                } else if f > 0.0 && f < 1.0 {
                                    max_below = max_below.max(f);
                                }
                            }
                        }
                    }
                }
                check!("f != 1", sep - EXCLUSION_BAND);
                let fbar = c.b - 0.5 * (1.0 + min_above);
                check!("f_bar < 0", -fbar);
                let funder = c.a - 0.5 * (1.0 + max_below);
                check!("f_under > 0", funder);
            }
            Problem::JumpSingle { w } => {
                check!(
                    "a - b + ab log(b/a) = 0",
                    1e-12 - jump_residual(c.a, c.b).abs()
                );
                let r0 = c.b / c.a;
                let mut sep = f64::INFINITY;
                let mut min_above = f64::INFINITY;
                let mut max_below = f64::NEG_INFINITY;
                for d in -(nn - 1)..nn {
                    for i in 0..nb {
                        for j in 0..nb {
                            if d == 0 && i == j {
                                continue;
                            }
                            // g^{m,i}_{n,j} with m − n = d
                            let g = w[i] / w[j] * r0.powi(d);
                            sep = sep.min((g - 1.0).abs());
                            if i != j && g != 1.0 {
                                let v = (g - 1.0) / g.ln();
                                if g > 1.0 {
                                    min_above = min_above.min(v);
                                } else {
                                    max_below = max_below.max(v);
                                }
                            }
                        }
                    }
                }
                check!("g != 1", sep - EXCLUSION_BAND);
                check!("g_bar > 0", min_above - c.b);
                check!("g_under > 0", c.a - max_below);
            }
            Problem::JumpMulti { w, ups } => {
                let r = ratio;
                let mut m1 = f64::NEG_INFINITY;
                let mut m2 = f64::NEG_INFINITY;
                let mut m3 = f64::NEG_INFINITY;
                for lam in &lambdas {
                    for j in 0..nb {
                        let u = ups[j] / (lam * w[j]);
                        m1 = m1.max(1.0 - r + (c.b + u) * ((r + u) / (1.0 + u)).ln());
                        m2 = m2.max(1.0 - 1.0 / r + (c.a + u) * ((1.0 / r + u) / (1.0 + u)).ln());
                        m3 = m3
                            .max(1.0 - r * r + (c.eps * c.b + u) * ((r * r + u) / (1.0 + u)).ln());
                    }
                }
                check!("M1 < 0", -m1);
                check!("M2 < 0", -m2);
                check!("M3 < 0", -m3);
                let mut sep = f64::INFINITY;
                let mut min_above = f64::INFINITY;
                let mut max_below = f64::NEG_INFINITY;
                for (m, lm) in lambdas.iter().enumerate() {
                    for (n, ln_) in lambdas.iter().enumerate() {
                        for i in 0..nb {
                            for j in 0..nb {
                                if m == n && i == j {
                                    continue;
                                }
                                let den = ln_ * w[j] + ups[j];
                                let h = (lm * w[i] + ups[i]) / den;
                                sep = sep.min((h - 1.0).abs());
                                if i != j && h != 1.0 {
                                    let v = ((h - 1.0) / h.ln() * den - ups[j]) / (ln_ * w[j]);
                                    if h > 1.0 {
                                        min_above = min_above.min(v);
                                    } else {
                                        max_below = max_below.max(v);
                                    }
                                }
                            }
                        }
                    }
                }
                check!("h != 1", sep - EXCLUSION_BAND);
                check!("h_bar > 0", min_above - c.b);
                check!("h_under > 0", c.a - max_below);
            }
        }
        (r, lambdas)
    }
}

fn problem_for(model: &QndModel, target: &ParamTarget) -> Result<Problem> {
    let regime = target.regime(model)?;
    let w = target.weights(model)?;
    match regime {
        Regime::Diffusive => {
            for (j, &x) in w.iter().enumerate() {
                if x == 0.0 {
                    return Err(Error::Infeasible {
                        binding: format!(
                            "Re l_{} = 0: candidate filters cannot be separated on block {}",
                            j + 1,
                            j + 1
                        ),
                    });
                }
                if w[..j].contains(&x) {
                    return Err(Error::Infeasible {
                        binding: format!("Re l is repeated on block {}", j + 1),
                    });
                }
            }
            Ok(Problem::Diffusive { re_l: w })
        }
        Regime::JumpSingle | Regime::JumpMulti => {
            for (j, &x) in w.iter().enumerate() {
                if !(x > 0.0) {
                    return Err(Error::Infeasible {
                        binding: format!(
                            "|c_{}| = 0: candidate filters cannot be separated on block {}",
                            j + 1,
                            j + 1
                        ),
                    });
                }
                if w[..j].contains(&x) {
                    return Err(Error::Infeasible {
                        binding: format!("|c| is repeated on block {}", j + 1),
                    });
                }
            }
            if regime == Regime::JumpSingle {
                Ok(Problem::JumpSingle { w })
            } else {
                Ok(Problem::JumpMulti {
                    w,
                    ups: target.offsets(model)?,
                })
            }
        }
    }
}

fn hundredths(lo: f64, hi: f64) -> impl Iterator<Item = f64> {
    let k0 = (lo * 100.0).ceil().max(1.0) as i64;
    let k1 = (hi * 100.0).floor() as i64;
    (k0..=k1).map(|k| k as f64 / 100.0)
}

impl Problem {
    fn candidate(&self, a: f64, b: f64, eps: f64) -> Option<Candidate> {
        match self {
            Problem::Diffusive { .. } => (a > 0.5 && a < 1.0).then(|| Candidate {
                a,
                b: diffusive_b_of_a(a),
                eps: 1.0,
            }),
            Problem::JumpSingle { .. } => {
                if a > 0.0 && a < 1.0 {
                    Some(Candidate {
                        a,
                        b: jump_b_of_a(a).ok()?,
                        eps: 1.0,
                    })
                } else {
                    None
                }
            }
            Problem::JumpMulti { .. } => Some(Candidate { a, b, eps }),
        }
    }

    fn coarse(&self, req: &GridRequest) -> Vec<Candidate> {
        match self {
            Problem::JumpMulti { .. } => {
                let mut out = Vec::new();
                for ke in 1..=30 {
                    let eps = 1.0 + ke as f64 / 100.0;
                    for a in hundredths(req.abar * eps, 0.99) {
                        for b in hundredths(1.01, req.bbar / eps) {
                            out.push(Candidate { a, b, eps });
                        }
                    }
                }
                out
            }
            _ => hundredths(req.abar, 0.99)
                .filter_map(|a| self.candidate(a, 0.0, 1.0))
                .collect(),
        }
    }

    fn neighbourhood(&self, c: Candidate, step: f64) -> Vec<Candidate> {
        let grid = |x: f64| -> Vec<f64> {
            let scale = 1.0 / step;
            let centre = (x * scale).round();
            (-10..=10).map(|i| (centre + i as f64) / scale).collect()
        };
        match self {
            Problem::JumpMulti { .. } => {
                let mut out = Vec::new();
                for &eps in &grid(c.eps) {
                    for &a in &grid(c.a) {
                        for &b in &grid(c.b) {
                            out.push(Candidate { a, b, eps });
                        }
                    }
                }
                out
            }
            _ => grid(c.a)
                .into_iter()
                .filter_map(|a| self.candidate(a, 0.0, 1.0))
                .collect(),
        }
    }
}

/// Lexicographic key: cell ratio, then the smaller auxiliary gap.
fn ratio_key(c: &Candidate) -> (f64, f64) {
    (c.b / c.a, -c.eps)
}

fn sort_by_ratio(cands: &mut [Candidate]) {
    cands.sort_by(|x, y| {
        let (a1, a2) = ratio_key(x);
        let (b1, b2) = ratio_key(y);
        b1.total_cmp(&a1)
            .then(b2.total_cmp(&a2))
            .then(x.a.total_cmp(&y.a))
    });
}

struct Scan<'a> {
    problem: &'a Problem,
    req: &'a GridRequest,
    model: &'a QndModel,
    target: &'a ParamTarget,
}

impl Scan<'_> {
    fn feasible(&self, c: Candidate) -> bool {
        self.problem.report(self.req, c, true).0.all_passed()
    }

    /// Best candidate by the cell-ratio objective among `cands`.
    fn best_ratio(&self, mut cands: Vec<Candidate>) -> Option<Candidate> {
        sort_by_ratio(&mut cands);
        cands.into_iter().find(|&c| self.feasible(c))
    }

    fn best_by<F: Fn(&Candidate) -> f64>(
        &self,
        cands: Vec<Candidate>,
        score: F,
    ) -> Option<Candidate> {
        let mut best: Option<(f64, Candidate)> = None;
        for c in cands {
            if !self.feasible(c) {
                continue;
            }
            let s = score(&c);
            if best.as_ref().is_none_or(|(bs, _)| s > *bs) {
                best = Some((s, c));
            }
        }
        best.map(|(_, c)| c)
    }

    fn rate_score(&self, c: &Candidate) -> f64 {
        let (_, lambdas) = self.problem.report(self.req, *c, false);
        worst_rate_at_candidates(self.model, self.target, &lambdas)
            .map(|r| -r)
            .unwrap_or(f64::NEG_INFINITY)
    }

    fn pick(&self, cands: Vec<Candidate>) -> Option<Candidate> {
        match self.req.objective {
            Objective::CellRatio => self.best_ratio(cands),
            Objective::WorstRate => self.best_by(cands, |c| self.rate_score(c)),
        }
    }

    fn run(&self) -> Result<Candidate> {
        let coarse = self.problem.coarse(self.req);
        let Some(mut best) = self.pick(coarse.clone()) else {
            return Err(self.infeasible(&coarse));
        };
        for step in [1e-3, 1e-4] {
            if let Some(c) = self.pick(self.problem.neighbourhood(best, step)) {
                best = c;
            }
        }
        Ok(best)
    }

    fn infeasible(&self, coarse: &[Candidate]) -> Error {
        // Report the candidate closest to a = b = 1, where the conditions are loosest.
        let near = coarse.iter().min_by(|x, y| {
            let dx = (1.0 - x.a) + (x.b - 1.0) + (x.eps - 1.0);
            let dy = (1.0 - y.a) + (y.b - 1.0) + (y.eps - 1.0);
            dx.total_cmp(&dy)
        });
        let binding = match near {
            None => format!(
                "accuracy bracket [{}, {}] admits no candidate cell factors in the {:?} regime",
                self.req.abar,
                self.req.bbar,
                self.problem.regime()
            ),
            Some(c) => {
                let (rep, _) = self.problem.report(self.req, *c, false);
                let fail = rep
                    .binding()
                    .map(|f| format!("{} (margin {:e})", f.name, f.margin))
                    .unwrap_or_default();
                format!(
                    "no feasible cell; nearest candidate a={}, b={:.6}, eps={} fails {}",
                    c.a, c.b, c.eps, fail
                )
            }
        };
        Error::Infeasible { binding }
    }
}

fn finish(problem: &Problem, req: &GridRequest, c: Candidate) -> GridDesign {
    let (report, lambdas) = problem.report(req, c, false);
    GridDesign {
        regime: problem.regime(),
        a: c.a,
        b: c.b,
        epsilon: c.eps,
        n_count: lambdas.len(),
        lambdas,
        request: req.clone(),
        report,
    }
}

/// Designs a grid for `target` in the regime it implies.
pub fn design(model: &QndModel, target: &ParamTarget, req: &GridRequest) -> Result<GridDesign> {
    req.check()?;
    let problem = problem_for(model, target)?;
    let scan = Scan {
        problem: &problem,
        req,
        model,
        target,
    };
    let c = scan.run()?;
    Ok(finish(&problem, req, c))
}

pub fn design_diffusive(model: &QndModel, channel: usize, req: &GridRequest) -> Result<GridDesign> {
    design(model, &ParamTarget::DiffusiveStrength { channel }, req)
}

pub fn design_jump_single(model: &QndModel, req: &GridRequest) -> Result<GridDesign> {
    let t = ParamTarget::JumpStrength {
        detector: 0,
        source: 0,
    };
    if t.regime(model)? != Regime::JumpSingle {
        return Err(Error::Config(
            "single-channel design needs one counting channel without shot noise".into(),
        ));
    }
    design(model, &t, req)
}

pub fn design_jump_multi(
    model: &QndModel,
    detector: usize,
    source: usize,
    req: &GridRequest,
) -> Result<GridDesign> {
    let t = ParamTarget::JumpStrength { detector, source };
    if t.regime(model)? != Regime::JumpMulti {
        return Err(Error::Config(
            "multi-channel design needs shot noise or several counting channels".into(),
        ));
    }
    design(model, &t, req)
}

/// Condition report for explicitly chosen `(a, b, ε)`; `b` is ignored in the
/// regimes where it is a function of `a`.
pub fn evaluate(
    model: &QndModel,
    target: &ParamTarget,
    req: &GridRequest,
    a: f64,
    b: f64,
    epsilon: f64,
) -> Result<GridDesign> {
    req.check()?;
    let problem = problem_for(model, target)?;
    let c = problem
        .candidate(a, b, epsilon)
        .ok_or_else(|| Error::Infeasible {
            binding: format!("a = {a} outside the admissible range"),
        })?;
    Ok(finish(&problem, req, c))
}

/// Redesign for an oscillation around `avoid`: among feasible coarse
/// candidates, prefer those placing `avoid` at least a quarter cell (in log
/// scale) from every cell edge, then the usual objective.
pub fn redesign_avoiding(
    model: &QndModel,
    target: &ParamTarget,
    req: &GridRequest,
    avoid: f64,
) -> Result<GridDesign> {
    req.check()?;
    let problem = problem_for(model, target)?;
    let scan = Scan {
        problem: &problem,
        req,
        model,
        target,
    };
    let mut coarse = problem.coarse(req);
    sort_by_ratio(&mut coarse);
    let mut fallback: Option<(f64, Candidate)> = None;
    for c in coarse.iter().copied() {
        if !scan.feasible(c) {
            continue;
        }
        let g = finish(&problem, req, c);
        let d = edge_distance(&g, avoid);
        if d >= 0.25 {
            return Ok(g);
        }
        if fallback.as_ref().is_none_or(|(bd, _)| d > *bd) {
            fallback = Some((d, c));
        }
    }
    match fallback {
        Some((_, c)) => Ok(finish(&problem, req, c)),
        None => Err(scan.infeasible(&coarse)),
    }
}

/// Log-scale distance from `x` to the nearest cell edge, in units of the cell width.
fn edge_distance(g: &GridDesign, x: f64) -> f64 {
    let width = (g.b / g.a).ln();
    let mut best = f64::INFINITY;
    for n in 0..g.n_count {
        let (lo, hi) = g.cell(n);
        best = best
            .min((x / lo).ln().abs() / width)
            .min((x / hi).ln().abs() / width);
    }
    best
}

/// Admissible interval after an oscillation between candidates `n*` and `n* + 1`.
pub fn refine(grid: &GridDesign, pair: (usize, usize)) -> Result<(f64, f64)> {
    let (n, m) = pair;
    if m != n + 1 || m >= grid.n_count {
        return Err(Error::Domain(format!(
            "pair ({}, {}) is not adjacent within the grid",
            n + 1,
            m + 1
        )));
    }
    let (lo, hi) = if grid.regime == Regime::JumpMulti {
        (
            grid.a * grid.lambdas[n] / grid.epsilon,
            grid.epsilon * grid.b * grid.lambdas[m],
        )
    } else {
        (grid.a * grid.lambdas[n], grid.b * grid.lambdas[m])
    };
    Ok((
        lo.max(grid.request.lambda_lo),
        hi.min(grid.request.lambda_hi),
    ))
}

/// Bank of filter parameters for the grid candidates.
pub fn bank_for(
    model: &QndModel,
    target: &ParamTarget,
    lambdas: &[f64],
) -> Result<Vec<FilterParams>> {
    lambdas
        .iter()
        .map(|&l| target.filter_params(model, l))
        .collect()
}

/// Worst (closest to zero) predicted selection rate with the truth placed at
/// each candidate in turn.
pub fn worst_rate_at_candidates(
    model: &QndModel,
    target: &ParamTarget,
    lambdas: &[f64],
) -> Result<f64> {
    let bank = bank_for(model, target, lambdas)?;
    let mut worst = f64::NEG_INFINITY;
    for (ns, &l) in lambdas.iter().enumerate() {
        let truth = target.with_lambda(model, l)?;
        let (phi, psi) = augmented_mismatch(&truth, &bank)?;
        for n in 0..lambdas.len() {
            if n != ns {
                worst = worst.max(predicted_pi_rate(&phi, &psi, n, ns));
            }
        }
    }
    if lambdas.len() < 2 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(worst)
}

/// A sampled point where the augmented tolerance condition fails.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditViolation {
    pub nstar: usize,
    pub kappa: f64,
    pub margin: f64,
    /// `(m, i, j)` of the smallest sum.
    pub at: Option<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DesignAudit {
    pub points_checked: usize,
    pub min_margin: f64,
    pub violations: Vec<AuditViolation>,
}

/// `κ` samples per cell: 101 interior points of the open cell, or 101 points
/// spanning the closed cell in the multi-channel regime.
pub fn kappa_samples(grid: &GridDesign) -> Vec<f64> {
    if grid.regime == Regime::JumpMulti {
        (0..=100)
            .map(|i| grid.a + (grid.b - grid.a) * i as f64 / 100.0)
            .collect()
    } else {
        (1..=101)
            .map(|i| grid.a + (grid.b - grid.a) * i as f64 / 102.0)
            .collect()
    }
}

/// Re-verifies the augmented tolerance condition for every `n*` and every
/// sampled `κ` by exact sign tests on the full mismatch tensors.
pub fn verify_design(
    model: &QndModel,
    target: &ParamTarget,
    grid: &GridDesign,
) -> Result<DesignAudit> {
    let bank = bank_for(model, target, &grid.lambdas)?;
    let mut audit = DesignAudit {
        points_checked: 0,
        min_margin: f64::INFINITY,
        violations: Vec::new(),
    };
    for (ns, &l) in grid.lambdas.iter().enumerate() {
        for kappa in kappa_samples(grid) {
            let truth = target.with_lambda(model, kappa * l)?;
            let (phi, psi) = augmented_mismatch(&truth, &bank)?;
            let (margin, at) = condition2_margin(&phi, &psi, ns);
            audit.points_checked += 1;
            audit.min_margin = audit.min_margin.min(margin);
            if !(margin > 0.0) {
                audit.violations.push(AuditViolation {
                    nstar: ns,
                    kappa,
                    margin,
                    at,
                });
            }
        }
    }
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambert_special_values() {
        assert_eq!(lambert_w0(0.0).unwrap(), 0.0);
        assert!((lambert_w0(std::f64::consts::E).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(lambert_w0(-(-1.0f64).exp()).unwrap(), -1.0);
        assert!(lambert_w0(-0.5).is_err());
    }

    #[test]
    fn lambert_residuals() {
        for i in 0..2000 {
            let t = i as f64 / 2000.0;
            for x in [
                10f64.powf(-12.0 + 22.0 * t),
                -(-1.0f64).exp() * 10f64.powf(-12.0 * t),
            ] {
                let w = lambert_w0(x).unwrap();
                let r = (w * w.exp() - x).abs() / x.abs();
                assert!(r <= 1e-13, "x={x} w={w} r={r}");
                assert!(w >= -1.0);
            }
        }
    }

    #[test]
    fn jump_b_values() {
        let b = jump_b_of_a(0.8).unwrap();
        assert!((b - 1.2727).abs() < 1e-4, "{b}");
        assert!(jump_residual(0.8, b).abs() <= 1e-12);
        assert!(psi_d(0.8, b, 1, b).abs() < 1e-12);
        assert!(psi_d(0.8, b, -1, 0.8).abs() < 1e-12);
        assert!((jump_b_of_a(0.9999).unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn diffusive_identities() {
        for a in [0.55, 0.75, 0.9] {
            let b = diffusive_b_of_a(a);
            assert!((b / a + 1.0 - 2.0 * b).abs() < 1e-12);
            assert!((a / b + 1.0 - 2.0 * a).abs() < 1e-12);
        }
        assert_eq!(diffusive_b_of_a(0.75), 1.5);
    }

    #[test]
    fn candidate_grid_formula() {
        assert_eq!(candidate_count(0.5, 2.0, 2.0), 2);
        let l = candidate_lambdas(0.5, 2.0, 0.75, 2.0);
        assert!((l[0] - 2.0 / 3.0).abs() < 1e-15 && (l[1] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn canonical_diffusive_design() {
        let m = QndModel::new(vec![1, 1])
            .unwrap()
            .with_diffusive(&[1.0, -1.0], 1.0, 0.5)
            .with_jump(&[1.0, 2.0], 1.0, 0.3);
        let g = design_diffusive(&m, 0, &GridRequest::new(0.5, 2.0, 0.5, 1.5)).unwrap();
        assert_eq!((g.a, g.b), (0.75, 1.5));
        assert_eq!(g.n_count, 2);
        assert!(g.report.all_passed());
        assert_eq!(refine(&g, (0, 1)).unwrap(), (0.5, 2.0));
        assert_eq!(g.final_bracket(1), (1.0, 2.0));
    }

    #[test]
    fn infeasible_bracket_names_binding_constraint() {
        let m = QndModel::new(vec![1, 1])
            .unwrap()
            .with_diffusive(&[1.0, -1.0], 1.0, 0.5);
        let e = design_diffusive(&m, 0, &GridRequest::new(0.5, 2.0, 0.995, 1.001)).unwrap_err();
        assert!(matches!(e, Error::Infeasible { .. }), "{e}");
    }
}
