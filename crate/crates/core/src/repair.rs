//! The iterative rank-r repair loop.
//!
//! Each iteration linearizes every gap around the current weight, solves the
//! QP for a step inside the span of the top-r left singular vectors, applies
//! it, and re-evaluates all gaps exactly. The loop stops once every repair
//! sample has an exact gap of at least `γ_s`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, spectral_norm, truncated_svd, DenseMatrix};
use crate::model::{HeadModel, Sample};
use crate::qp::{
    assemble_rows, kkt_residuals, solve_with, KktResiduals, QpStatus, RepairHyper, RowGroup,
    SoftRow, SolverSettings,
};

/// One outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub min_repair_gap: f64,
    pub mean_repair_gap: f64,
    /// `None` when the remain set is empty.
    pub min_remain_gap: Option<f64>,
    pub delta_w_frobenius: f64,
    pub weight_spectral_norm: f64,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    pub qp_objective: f64,
    pub repair_meeting_gamma_s: usize,
    /// Largest shortfall of a linearized remain row, `max(0, l_p − ⟨p_p, β⟩)`.
    /// NaN (written as null) when the QP had no solution, as is `qp_objective`.
    pub remain_linear_violation: f64,
    /// `None` unless the QP was solved.
    pub kkt: Option<KktResiduals>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairTrace {
    pub hyper: RepairHyper,
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    pub total_iterations: usize,
    /// Remain ids whose exact gap ended below `γ_h`.
    pub remain_below_gamma_h: Vec<String>,
    /// Remain ids moved into slacked rows (only with promotion enabled).
    pub promoted: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RepairOutcome {
    pub model: HeadModel,
    pub trace: RepairTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairOptions {
    /// Added to `γ_s` and `γ_h` in the QP bounds (never in the exact checks).
    /// Without it the iterates can approach a margin from below forever,
    /// with each QP seeing its constraint as met to within solver tolerance.
    pub target_offset: f64,
    /// After convergence, move remain samples whose exact gap is below `γ_h`
    /// into slacked rows with margin `γ_h` and keep iterating.
    pub promote_remain_violations: bool,
    pub solver: SolverSettings,
}

impl Default for RepairOptions {
    fn default() -> Self {
        RepairOptions {
            target_offset: 1e-4,
            promote_remain_violations: false,
            solver: SolverSettings::default(),
        }
    }
}

pub fn repair(
    m: &HeadModel,
    repair_set: &[Sample],
    remain_set: &[Sample],
    hyper: &RepairHyper,
) -> Result<RepairOutcome> {
    repair_with(m, repair_set, remain_set, hyper, &RepairOptions::default())
}

fn exact_gaps(m: &HeadModel, samples: &[Sample]) -> Result<Vec<f64>> {
    samples.par_iter().map(|s| m.gap(&s.v, s.label)).collect()
}

pub fn repair_with(
    m: &HeadModel,
    repair_set: &[Sample],
    remain_set: &[Sample],
    hyper: &RepairHyper,
    opts: &RepairOptions,
) -> Result<RepairOutcome> {
    hyper.validate()?;
    if !(opts.target_offset >= 0.0) || !opts.target_offset.is_finite() {
        return Err(Error::invalid("target_offset must be non-negative"));
    }
    let tau = opts.target_offset;
    if repair_set.is_empty() {
        return Err(Error::invalid("repair set is empty"));
    }
    let max_rank = m.d_out().min(m.d_in());
    if hyper.rank > max_rank {
        return Err(Error::invalid(format!(
            "rank {} exceeds min(d_out, d_in) = {max_rank}",
            hyper.rank
        )));
    }
    for s in repair_set.iter().chain(remain_set) {
        s.validate(m)?;
    }
    for s in remain_set {
        let pred = m.predict(&s.v)?;
        if pred != s.label {
            return Err(Error::invalid(format!(
                "remain sample `{}` is labeled {} but the model predicts {pred}",
                s.id, s.label
            )));
        }
    }

    let mut model = m.clone();
    let mut trace = RepairTrace {
        hyper: hyper.clone(),
        records: Vec::new(),
        converged: false,
        total_iterations: 0,
        remain_below_gamma_h: Vec::new(),
        promoted: Vec::new(),
    };
    // Promoted remain samples, by index into `remain_set`.
    let mut promoted = vec![false; remain_set.len()];

    for t in 1..=hyper.max_iters {
        let hard: Vec<Sample> = remain_set
            .iter()
            .zip(&promoted)
            .filter(|(_, &p)| !p)
            .map(|(s, _)| s.clone())
            .collect();
        let mut soft: Vec<SoftRow<'_>> = repair_set
            .iter()
            .map(|sample| SoftRow {
                sample,
                margin: hyper.gamma_s + tau,
            })
            .collect();
        soft.extend(
            remain_set
                .iter()
                .zip(&promoted)
                .filter(|(_, &p)| p)
                .map(|(sample, _)| SoftRow {
                    sample,
                    margin: hyper.gamma_h + tau,
                }),
        );

        let svd = truncated_svd(model.weight(), hyper.rank)?;
        let qp = assemble_rows(&model, &svd.u, &soft, &hard, hyper.gamma_h + tau, hyper)?;
        let sol = solve_with(&qp, &opts.solver);
        match sol.status {
            QpStatus::PrimalInfeasible => {
                let repair_gaps = exact_gaps(&model, repair_set)?;
                let remain_gaps = exact_gaps(&model, remain_set)?;
                trace.records.push(IterationRecord {
                    iteration: t,
                    min_repair_gap: repair_gaps.iter().copied().fold(f64::INFINITY, f64::min),
                    mean_repair_gap: repair_gaps.iter().sum::<f64>() / repair_gaps.len() as f64,
                    min_remain_gap: remain_gaps.iter().copied().reduce(f64::min),
                    delta_w_frobenius: 0.0,
                    weight_spectral_norm: spectral_norm(model.weight()),
                    qp_status: sol.status,
                    qp_iterations: sol.iterations,
                    qp_objective: f64::NAN,
                    repair_meeting_gamma_s: repair_gaps.iter().filter(|&&g| g >= hyper.gamma_s).count(),
                    remain_linear_violation: f64::NAN,
                    kkt: None,
                });
                trace.total_iterations = trace.records.len();
                trace.remain_below_gamma_h = below(remain_set, &remain_gaps, hyper.gamma_h);
                return Err(Error::InfeasibleRepair {
                    iteration: t,
                    trace: Box::new(trace),
                });
            }
            QpStatus::DualInfeasible => {
                return Err(Error::NumericFailure {
                    step: t,
                    message: "repair QP reported as unbounded".into(),
                });
            }
            QpStatus::Solved | QpStatus::MaxIter => {}
        }
        let kkt = (sol.status == QpStatus::Solved).then(|| kkt_residuals(&qp, &sol));
        let remain_linear_violation = qp
            .rows_of(RowGroup::Remain)
            .map(|row| (qp.l[row] - dot(&qp.a.row(row)[..qp.n_beta], &sol.beta)).max(0.0))
            .fold(0.0, f64::max);

        let b = DenseMatrix::new(hyper.rank, model.d_in(), sol.beta.clone())?;
        let delta = svd.u.matmul(&b)?;
        let w_next = model.weight().add(&delta)?;
        if !w_next.is_finite() {
            return Err(Error::NumericFailure {
                step: t,
                message: "repair-layer weight became non-finite".into(),
            });
        }
        model = model.with_weight(w_next)?;

        let repair_gaps = exact_gaps(&model, repair_set)?;
        let remain_gaps = exact_gaps(&model, remain_set)?;
        let meeting = repair_gaps.iter().filter(|&&g| g >= hyper.gamma_s).count();
        let hard_gaps = remain_gaps.iter().zip(&promoted).filter(|(_, &p)| !p).map(|(g, _)| *g);
        trace.records.push(IterationRecord {
            iteration: t,
            min_repair_gap: repair_gaps.iter().copied().fold(f64::INFINITY, f64::min),
            mean_repair_gap: repair_gaps.iter().sum::<f64>() / repair_gaps.len() as f64,
            min_remain_gap: hard_gaps.reduce(f64::min),
            delta_w_frobenius: delta.frobenius_norm(),
            weight_spectral_norm: spectral_norm(model.weight()),
            qp_status: sol.status,
            qp_iterations: sol.iterations,
            qp_objective: sol.objective,
            repair_meeting_gamma_s: meeting,
            remain_linear_violation,
            kkt,
        });

        let promoted_ok = remain_gaps
            .iter()
            .zip(&promoted)
            .all(|(&g, &p)| !p || g >= hyper.gamma_h);
        if meeting == repair_set.len() && promoted_ok {
            let newly: Vec<usize> = (0..remain_set.len())
                .filter(|&i| !promoted[i] && remain_gaps[i] < hyper.gamma_h)
                .collect();
            if opts.promote_remain_violations && !newly.is_empty() {
                for i in newly {
                    promoted[i] = true;
                    trace.promoted.push(remain_set[i].id.clone());
                }
                continue;
            }
            trace.converged = true;
            break;
        }
    }

    trace.total_iterations = trace.records.len();
    if trace.converged {
        let final_gaps = exact_gaps(&model, repair_set)?;
        if let Some((s, g)) = repair_set
            .iter()
            .zip(&final_gaps)
            .find(|(_, &g)| g < hyper.gamma_s)
        {
            return Err(Error::InternalInvariant(format!(
                "repair sample `{}` has gap {g} below gamma_s after convergence",
                s.id
            )));
        }
    }
    let remain_gaps = exact_gaps(&model, remain_set)?;
    trace.remain_below_gamma_h = below(remain_set, &remain_gaps, hyper.gamma_h);
    Ok(RepairOutcome { model, trace })
}

fn below(samples: &[Sample], gaps: &[f64], margin: f64) -> Vec<String> {
    samples
        .iter()
        .zip(gaps)
        .filter(|(_, &g)| g < margin)
        .map(|(s, _)| s.id.clone())
        .collect()
}
