//! The linearized repair QP and an operator-splitting (ADMM) solver for it.
//!
//! With `ΔW = U B` and `β = vec(B)` (row-major over the `r x d_in` matrix
//! `B`), each repair-layer update is the solution of
//!
//! ```text
//! min   ρ/2 ‖β‖² + λ Σ ξ_i
//! s.t.  ⟨a_i, β⟩ + ξ_i ≥ γ_s − gap_i      repair rows
//!       ⟨p_p, β⟩       ≥ γ_h − gap_p      remain rows
//!       ξ_i ≥ 0                            slack rows
//! ```
//!
//! where `a_i` and `p_p` are first-order gap coefficients. The solver handles
//! the standard form `min ½xᵀPx + qᵀx  s.t.  l ≤ Ax ≤ u` with diagonal `P`.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_inf, Cholesky, DenseMatrix, Lu};
use crate::model::{activation_derivative, competitor_of, logit_gap, HeadModel, Sample};

/// Hyperparameters of one repair run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairHyper {
    pub rank: usize,
    pub gamma_s: f64,
    pub gamma_h: f64,
    pub lambda: f64,
    pub rho: f64,
    pub max_iters: usize,
}

impl Default for RepairHyper {
    fn default() -> Self {
        RepairHyper {
            rank: 2,
            gamma_s: 1.0,
            gamma_h: 0.3,
            lambda: 50.0,
            rho: 2.0,
            max_iters: 300,
        }
    }
}

impl RepairHyper {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma_s", self.gamma_s),
            ("gamma_h", self.gamma_h),
            ("lambda", self.lambda),
            ("rho", self.rho),
        ];
        for (name, x) in positive {
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive and finite")));
            }
        }
        if self.rank == 0 {
            return Err(Error::invalid("rank must be at least 1"));
        }
        Ok(())
    }
}

/// Which constraint family a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowGroup {
    Repair,
    Remain,
    SlackNonneg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// Number of leading variables that form β; the rest are slacks.
    pub n_beta: usize,
    /// Diagonal of `P`, non-negative.
    pub p_diag: Vec<f64>,
    pub q: Vec<f64>,
    pub a: DenseMatrix,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
    pub groups: Vec<RowGroup>,
}

impl QpProblem {
    pub fn new(
        n_beta: usize,
        p_diag: Vec<f64>,
        q: Vec<f64>,
        a: DenseMatrix,
        l: Vec<f64>,
        u: Vec<f64>,
        groups: Vec<RowGroup>,
    ) -> Result<Self> {
        let n = p_diag.len();
        let m = a.rows();
        if q.len() != n || a.cols() != n || n_beta > n {
            return Err(Error::invalid("QP variable dimensions disagree"));
        }
        if l.len() != m || u.len() != m || groups.len() != m {
            return Err(Error::invalid("QP constraint dimensions disagree"));
        }
        if p_diag.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("P must be a non-negative finite diagonal"));
        }
        if l.iter().zip(&u).any(|(lo, hi)| lo > hi || lo.is_nan() || hi.is_nan()) {
            return Err(Error::invalid("bounds must satisfy l <= u"));
        }
        Ok(QpProblem {
            n_beta,
            p_diag,
            q,
            a,
            l,
            u,
            groups,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.p_diag.len()
    }

    pub fn n_rows(&self) -> usize {
        self.a.rows()
    }

    /// Contiguous range of rows tagged `group` (rows are assembled in group
    /// order, so each group is one block).
    pub fn rows_of(&self, group: RowGroup) -> Range<usize> {
        let start = self.groups.iter().position(|&g| g == group);
        match start {
            None => 0..0,
            Some(s) => {
                let len = self.groups[s..].iter().take_while(|&&g| g == group).count();
                s..s + len
            }
        }
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.p_diag)
            .zip(&self.q)
            .map(|((xi, p), q)| 0.5 * p * xi * xi + q * xi)
            .sum()
    }
}

/// Linear gap coefficients for a sample against its own label:
/// `vec([Uᵀ J(v) (w_y − w_ĉ)] vᵀ)`, row-major over the `r x d_in` result.
pub fn gap_coefficients(m: &HeadModel, u: &DenseMatrix, sample: &Sample) -> Result<Vec<f64>> {
    sample.validate(m)?;
    if u.rows() != m.d_out() {
        return Err(Error::invalid(format!(
            "basis has {} rows, repair layer has {} outputs",
            u.rows(),
            m.d_out()
        )));
    }
    let fwd = m.forward(&sample.v)?;
    let y = sample.label;
    let rival = competitor_of(&fwd.logits, y);
    let jac = activation_derivative(m.activation(), &fwd.pre);
    let wc = m.head_weight();
    let g: Vec<f64> = (0..m.d_out())
        .map(|o| jac[o] * (wc[(y, o)] - wc[(rival, o)]))
        .collect();
    let coef = u.tr_mul_vec(&g);
    let d_in = m.d_in();
    let mut out = vec![0.0; coef.len() * d_in];
    for (j, &c) in coef.iter().enumerate() {
        for (i, &vi) in sample.v.iter().enumerate() {
            out[j * d_in + i] = c * vi;
        }
    }
    Ok(out)
}

/// `a_i` for a repair sample (label = target class).
pub fn repair_coefficients(m: &HeadModel, u: &DenseMatrix, sample: &Sample) -> Result<Vec<f64>> {
    gap_coefficients(m, u, sample)
}

/// `p_p` for a remain sample (label = recorded prediction).
pub fn remain_coefficients(m: &HeadModel, u: &DenseMatrix, sample: &Sample) -> Result<Vec<f64>> {
    gap_coefficients(m, u, sample)
}

/// A soft (slacked) row: a sample and the margin its gap must reach.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SoftRow<'a> {
    pub sample: &'a Sample,
    pub margin: f64,
}

/// Builds the repair QP linearized at the model's current weight.
pub fn assemble(
    m: &HeadModel,
    u: &DenseMatrix,
    repair: &[Sample],
    remain: &[Sample],
    hyper: &RepairHyper,
) -> Result<QpProblem> {
    let soft: Vec<SoftRow<'_>> = repair
        .iter()
        .map(|sample| SoftRow {
            sample,
            margin: hyper.gamma_s,
        })
        .collect();
    assemble_rows(m, u, &soft, remain, hyper.gamma_h, hyper)
}

/// Assembles with per-row margins for the slacked rows and `remain_margin`
/// for the hard rows. `hyper` supplies `ρ` and `λ`.
pub(crate) fn assemble_rows(
    m: &HeadModel,
    u: &DenseMatrix,
    soft: &[SoftRow<'_>],
    remain: &[Sample],
    remain_margin: f64,
    hyper: &RepairHyper,
) -> Result<QpProblem> {
    hyper.validate()?;
    let n_beta = u.cols() * m.d_in();
    let n_s = soft.len();
    let n_p = remain.len();
    let n = n_beta + n_s;
    let rows = 2 * n_s + n_p;

    let row_data = |s: &Sample| -> Result<(Vec<f64>, f64)> {
        let coef = gap_coefficients(m, u, s)?;
        let gap = logit_gap(&m.logits(&s.v)?, s.label);
        Ok((coef, gap))
    };
    let soft_rows: Vec<(Vec<f64>, f64)> = soft
        .par_iter()
        .map(|r| row_data(r.sample))
        .collect::<Result<_>>()?;
    let remain_rows: Vec<(Vec<f64>, f64)> =
        remain.par_iter().map(row_data).collect::<Result<_>>()?;

    let mut a = DenseMatrix::zeros(rows, n);
    let mut l = Vec::with_capacity(rows);
    let mut groups = Vec::with_capacity(rows);
    for (i, ((coef, gap), row)) in soft_rows.iter().zip(soft).enumerate() {
        let dst = a.row_mut(i);
        dst[..n_beta].copy_from_slice(coef);
        dst[n_beta + i] = 1.0;
        l.push(row.margin - gap);
        groups.push(RowGroup::Repair);
    }
    for (p, (coef, gap)) in remain_rows.iter().enumerate() {
        a.row_mut(n_s + p)[..n_beta].copy_from_slice(coef);
        l.push(remain_margin - gap);
        groups.push(RowGroup::Remain);
    }
    for i in 0..n_s {
        a.row_mut(n_s + n_p + i)[n_beta + i] = 1.0;
        l.push(0.0);
        groups.push(RowGroup::SlackNonneg);
    }

    let mut p_diag = vec![hyper.rho; n_beta];
    p_diag.resize(n, 0.0);
    let mut q = vec![0.0; n_beta];
    q.resize(n, hyper.lambda);
    QpProblem::new(n_beta, p_diag, q, a, l, vec![f64::INFINITY; rows], groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Solved,
    MaxIter,
    PrimalInfeasible,
    DualInfeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub beta: Vec<f64>,
    pub xi: Vec<f64>,
    /// One multiplier per row. Positive values belong to active lower bounds,
    /// negative values to active upper bounds.
    pub duals: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
    pub polished: bool,
}

impl QpSolution {
    pub fn x(&self) -> Vec<f64> {
        let mut x = self.beta.clone();
        x.extend_from_slice(&self.xi);
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    /// Proximal regularization on x.
    pub sigma: f64,
    /// Over-relaxation factor.
    pub alpha: f64,
    pub rho: f64,
    /// Iterations between penalty rescaling attempts; 0 disables it.
    pub adaptive_rho_interval: usize,
    pub eps_infeasible: f64,
    pub polish: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iter: 50_000,
            sigma: 1e-6,
            alpha: 1.6,
            rho: 0.1,
            adaptive_rho_interval: 50,
            eps_infeasible: 1e-8,
            polish: true,
        }
    }
}

/// Starting iterate for [`solve_from`]. `y` uses the solver's internal sign
/// (negative on active lower bounds).
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
}

/// Solves with the given tolerances and iteration cap, other settings default.
pub fn solve(p: &QpProblem, eps_abs: f64, eps_rel: f64, max_solver_iters: usize) -> QpSolution {
    let settings = SolverSettings {
        eps_abs,
        eps_rel,
        max_iter: max_solver_iters,
        ..Default::default()
    };
    solve_from(p, &settings, None)
}

pub fn solve_with(p: &QpProblem, settings: &SolverSettings) -> QpSolution {
    solve_from(p, settings, None)
}

struct Admm<'a> {
    p: &'a QpProblem,
    settings: &'a SolverSettings,
    rho: f64,
    chol: Cholesky,
}

impl<'a> Admm<'a> {
    fn new(p: &'a QpProblem, settings: &'a SolverSettings) -> Self {
        let rho = settings.rho;
        let chol = Self::factor(p, settings.sigma, rho);
        Admm {
            p,
            settings,
            rho,
            chol,
        }
    }

    /// `P + σI + ρAᵀA`, positive definite because σ > 0.
    fn factor(p: &QpProblem, sigma: f64, rho: f64) -> Cholesky {
        let n = p.n_vars();
        let mut k = DenseMatrix::zeros(n, n);
        for r in 0..p.n_rows() {
            let row = p.a.row(r);
            let nz: Vec<usize> = (0..n).filter(|&j| row[j] != 0.0).collect();
            for &i in &nz {
                let ri = rho * row[i];
                for &j in &nz {
                    k[(i, j)] += ri * row[j];
                }
            }
        }
        for i in 0..n {
            k[(i, i)] += p.p_diag[i] + sigma;
        }
        Cholesky::factor(&k).expect("σ-regularized ADMM matrix is positive definite")
    }

    fn set_rho(&mut self, rho: f64) {
        self.rho = rho;
        self.chol = Self::factor(self.p, self.settings.sigma, rho);
    }
}

fn project(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

/// ADMM from an optional warm start.
pub fn solve_from(p: &QpProblem, settings: &SolverSettings, warm: Option<&WarmStart>) -> QpSolution {
    let n = p.n_vars();
    let m = p.n_rows();
    let (mut x, mut z, mut y) = match warm {
        Some(w) if w.x.len() == n && w.z.len() == m && w.y.len() == m => {
            (w.x.clone(), w.z.clone(), w.y.clone())
        }
        _ => (vec![0.0; n], vec![0.0; m], vec![0.0; m]),
    };
    let mut admm = Admm::new(p, settings);
    let alpha = settings.alpha;
    let sigma = settings.sigma;

    let mut status = QpStatus::MaxIter;
    let mut iterations = 0;
    let mut rp = f64::INFINITY;
    let mut rd = f64::INFINITY;
    let mut last_rho_step_up: Option<bool> = None;
    let mut rho_updates = 0;

    for iter in 1..=settings.max_iter {
        iterations = iter;
        let rho = admm.rho;
        // x̃ from the regularized KKT system.
        let rhs_dual: Vec<f64> = z.iter().zip(&y).map(|(zi, yi)| rho * zi - yi).collect();
        let mut xt = p.a.tr_mul_vec(&rhs_dual);
        for i in 0..n {
            xt[i] += sigma * x[i] - p.q[i];
        }
        admm.chol.solve_in_place(&mut xt);
        let zt = p.a.mul_vec(&xt);

        let x_prev = std::mem::take(&mut x);
        let y_prev = y.clone();
        x = xt
            .iter()
            .zip(&x_prev)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        for i in 0..m {
            let zhat = alpha * zt[i] + (1.0 - alpha) * z[i];
            let znew = project(zhat + y[i] / rho, p.l[i], p.u[i]);
            y[i] += rho * (zhat - znew);
            z[i] = znew;
        }

        let ax = p.a.mul_vec(&x);
        let aty = p.a.tr_mul_vec(&y);
        let px: Vec<f64> = x.iter().zip(&p.p_diag).map(|(a, b)| a * b).collect();
        rp = ax
            .iter()
            .zip(&z)
            .fold(0.0, |acc, (a, b)| f64::max(acc, (a - b).abs()));
        rd = (0..n).fold(0.0, |acc, i| f64::max(acc, (px[i] + p.q[i] + aty[i]).abs()));

        let prim_scale = norm_inf(&ax).max(norm_inf(&z));
        let dual_scale = norm_inf(&px).max(norm_inf(&aty)).max(norm_inf(&p.q));
        let eps_p = settings.eps_abs + settings.eps_rel * prim_scale;
        let eps_d = settings.eps_abs + settings.eps_rel * dual_scale;
        if rp <= eps_p && rd <= eps_d && rp <= settings.eps_abs && rd <= settings.eps_abs {
            status = QpStatus::Solved;
            break;
        }

        let dy: Vec<f64> = y.iter().zip(&y_prev).map(|(a, b)| a - b).collect();
        if primal_infeasible(p, &dy, settings.eps_infeasible) {
            status = QpStatus::PrimalInfeasible;
            break;
        }
        let dx: Vec<f64> = x.iter().zip(&x_prev).map(|(a, b)| a - b).collect();
        if dual_infeasible(p, &dx, settings.eps_infeasible) {
            status = QpStatus::DualInfeasible;
            break;
        }

        if settings.adaptive_rho_interval > 0 && iter % settings.adaptive_rho_interval == 0 {
            let ratio = (rp / prim_scale.max(1e-30)) / (rd / dual_scale.max(1e-30)).max(1e-30);
            let mut candidate = (rho * ratio.sqrt())
                .clamp(rho / RHO_MAX_STEP, rho * RHO_MAX_STEP)
                .clamp(1e-6, 1e6);
            if rho_updates < RHO_MAX_UPDATES && (candidate > 5.0 * rho || candidate < 0.2 * rho) {
                // A reversal means the last step overshot; split the difference
                // in log space so ρ settles instead of alternating. ADMM with a
                // fixed ρ always converges, hence the cap on updates.
                let up = candidate > rho;
                if last_rho_step_up.is_some_and(|prev| prev != up) {
                    candidate = (rho * candidate).sqrt();
                }
                last_rho_step_up = Some(up);
                rho_updates += 1;
                admm.set_rho(candidate);
            }
        }
    }

    let mut polished = false;
    if status == QpStatus::Solved && settings.polish {
        if let Some((xp, yp, prp, prd)) = polish(p, &z, &y, settings.eps_abs) {
            if prp <= rp.max(settings.eps_abs) && prd <= rd.max(settings.eps_abs) {
                x = xp;
                y = yp;
                rp = prp;
                rd = prd;
                polished = true;
            }
        }
    }

    let (beta, xi) = if matches!(status, QpStatus::PrimalInfeasible | QpStatus::DualInfeasible) {
        (vec![f64::NAN; p.n_beta], vec![f64::NAN; n - p.n_beta])
    } else {
        (x[..p.n_beta].to_vec(), x[p.n_beta..].to_vec())
    };
    let objective = if beta.iter().all(|b| b.is_finite()) {
        p.objective(&x)
    } else {
        f64::NAN
    };
    QpSolution {
        beta,
        xi,
        duals: y.iter().map(|v| -v).collect(),
        status,
        iterations,
        primal_residual: rp,
        dual_residual: rd,
        objective,
        polished,
    }
}

fn primal_infeasible(p: &QpProblem, dy: &[f64], eps: f64) -> bool {
    let norm = norm_inf(dy);
    if norm <= 1e-30 {
        return false;
    }
    let tol = eps * norm;
    if norm_inf(&p.a.tr_mul_vec(dy)) > tol {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        let d = dy[i];
        if d > 0.0 {
            if p.u[i].is_infinite() {
                if d > tol {
                    return false;
                }
            } else {
                support += p.u[i] * d;
            }
        } else if d < 0.0 {
            if p.l[i].is_infinite() {
                if -d > tol {
                    return false;
                }
            } else {
                support += p.l[i] * d;
            }
        }
    }
    support < -tol
}

fn dual_infeasible(p: &QpProblem, dx: &[f64], eps: f64) -> bool {
    let norm = norm_inf(dx);
    if norm <= 1e-30 {
        return false;
    }
    let tol = eps * norm;
    let pdx = dx.iter().zip(&p.p_diag).fold(0.0, |acc, (d, pi)| f64::max(acc, (d * pi).abs()));
    if pdx > tol || dot(&p.q, dx) > -tol {
        return false;
    }
    let adx = p.a.mul_vec(dx);
    adx.iter().enumerate().all(|(i, &v)| {
        let lo_ok = p.l[i].is_infinite() || v >= -tol;
        let hi_ok = p.u[i].is_infinite() || v <= tol;
        lo_ok && hi_ok
    })
}

/// Solves the equality-constrained QP on the guessed active set and returns
/// `(x, y, primal residual, dual residual)` if the multipliers have the right
/// signs.
const POLISH_ROUNDS: usize = 8;
const RHO_MAX_STEP: f64 = 10.0;
const RHO_MAX_UPDATES: usize = 20;

/// Active-set refinement of an ADMM solution. The initial guess comes from
/// the signs of `z − l + y` and `u − z − y`; rows whose multipliers come out
/// with the wrong sign are dropped and violated rows are added, for a few
/// rounds, since degenerate problems often guess too many rows active.
fn polish(
    p: &QpProblem,
    z: &[f64],
    y: &[f64],
    eps: f64,
) -> Option<(Vec<f64>, Vec<f64>, f64, f64)> {
    let n = p.n_vars();
    let m = p.n_rows();
    // (row, is_lower)
    let mut active: Vec<(usize, bool)> = Vec::new();
    for i in 0..m {
        if p.l[i].is_finite() && z[i] - p.l[i] < -y[i] {
            active.push((i, true));
        } else if p.u[i].is_finite() && p.u[i] - z[i] < y[i] {
            active.push((i, false));
        }
    }
    for _ in 0..POLISH_ROUNDS {
        let (x, mult) = solve_active(p, &active)?;
        // Internal sign: lower-bound multipliers are ≤ 0, upper ≥ 0.
        let keep: Vec<bool> = active
            .iter()
            .zip(&mult)
            .map(|(&(_, lower), &v)| !((lower && v > eps) || (!lower && v < -eps)))
            .collect();
        let ax = p.a.mul_vec(&x);
        let mut is_active = vec![false; m];
        active.iter().for_each(|&(row, _)| is_active[row] = true);
        let violated: Vec<(usize, bool)> = (0..m)
            .filter(|&i| !is_active[i])
            .filter_map(|i| {
                if p.l[i] - ax[i] > eps {
                    Some((i, true))
                } else if ax[i] - p.u[i] > eps {
                    Some((i, false))
                } else {
                    None
                }
            })
            .collect();
        if keep.iter().all(|&k| k) && violated.is_empty() {
            let mut yp = vec![0.0; m];
            for (&(row, _), &v) in active.iter().zip(&mult) {
                yp[row] = v;
            }
            let rp = (0..m).fold(0.0, |acc, i| {
                let viol = (p.l[i] - ax[i]).max(ax[i] - p.u[i]).max(0.0);
                f64::max(acc, viol)
            });
            let aty = p.a.tr_mul_vec(&yp);
            let rd = (0..n).fold(0.0, |acc, i| {
                f64::max(acc, (p.p_diag[i] * x[i] + p.q[i] + aty[i]).abs())
            });
            return Some((x, yp, rp, rd));
        }
        active = active
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&a, _)| a)
            .chain(violated)
            .collect();
    }
    None
}

/// Solves the equality-constrained QP with the given rows held at their
/// bounds, through a regularized KKT system with iterative refinement.
fn solve_active(p: &QpProblem, active: &[(usize, bool)]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = p.n_vars();
    let k = active.len();
    let dim = n + k;
    const DELTA: f64 = 1e-9;
    let mut kkt = DenseMatrix::zeros(dim, dim);
    let mut exact = DenseMatrix::zeros(dim, dim);
    for i in 0..n {
        exact[(i, i)] = p.p_diag[i];
        kkt[(i, i)] = p.p_diag[i] + DELTA;
    }
    for (r, &(row, _)) in active.iter().enumerate() {
        for j in 0..n {
            let v = p.a[(row, j)];
            if v != 0.0 {
                kkt[(n + r, j)] = v;
                kkt[(j, n + r)] = v;
                exact[(n + r, j)] = v;
                exact[(j, n + r)] = v;
            }
        }
        kkt[(n + r, n + r)] = -DELTA;
    }
    let mut rhs: Vec<f64> = p.q.iter().map(|q| -q).collect();
    rhs.extend(
        active
            .iter()
            .map(|&(row, lower)| if lower { p.l[row] } else { p.u[row] }),
    );

    let lu = Lu::factor(&kkt).ok()?;
    let mut sol = lu.solve(&rhs);
    for _ in 0..10 {
        let ks = exact.mul_vec(&sol);
        let res: Vec<f64> = rhs.iter().zip(&ks).map(|(a, b)| a - b).collect();
        if norm_inf(&res) < 1e-13 {
            break;
        }
        let corr = lu.solve(&res);
        sol.iter_mut().zip(&corr).for_each(|(s, c)| *s += c);
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mult = sol.split_off(n);
    Some((sol, mult))
}

/// Independent optimality check of a solution, recomputed from scratch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `‖Px + q − Aᵀy‖_∞`
    pub stationarity: f64,
    /// Largest bound violation of `Ax`.
    pub primal: f64,
    /// Largest `|y_i| · slack_i` over the bound each multiplier belongs to.
    pub complementarity: f64,
    /// Largest multiplier of the wrong sign for its bound.
    pub dual_sign: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.complementarity)
            .max(self.dual_sign)
    }
}

pub fn kkt_residuals(p: &QpProblem, s: &QpSolution) -> KktResiduals {
    let x = s.x();
    let ax = p.a.mul_vec(&x);
    let aty = p.a.tr_mul_vec(&s.duals);
    let stationarity = (0..p.n_vars()).fold(0.0, |acc, i| {
        f64::max(acc, (p.p_diag[i] * x[i] + p.q[i] - aty[i]).abs())
    });
    let mut primal = 0.0f64;
    let mut complementarity = 0.0f64;
    let mut dual_sign = 0.0f64;
    for i in 0..p.n_rows() {
        primal = primal.max((p.l[i] - ax[i]).max(ax[i] - p.u[i]).max(0.0));
        let yi = s.duals[i];
        if yi > 0.0 {
            if p.l[i].is_finite() {
                complementarity = complementarity.max((yi * (ax[i] - p.l[i])).abs());
            } else {
                dual_sign = dual_sign.max(yi);
            }
        } else if yi < 0.0 {
            if p.u[i].is_finite() {
                complementarity = complementarity.max((yi * (p.u[i] - ax[i])).abs());
            } else {
                dual_sign = dual_sign.max(-yi);
            }
        }
    }
    KktResiduals {
        stationarity,
        primal,
        complementarity,
        dual_sign,
    }
}
