//! Margin certificates, Lipschitz radii, Monte Carlo stress tests and
//! proximity bands.
//!
//! With `L = ‖W‖₂ ‖W_c‖₂` (every supported activation is 1-Lipschitz), each
//! logit moves by at most `L‖δ‖` under an embedding perturbation `δ`, so a
//! gap can shrink by at most `2L‖δ‖`. A sample with gap `g > 0` therefore
//! keeps its label within radius `ε* = g / 2L`.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256StarStar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, spectral_norm};
use crate::model::{HeadModel, Sample};
use crate::qp::RepairHyper;
use crate::repair::RepairTrace;

/// Multipliers of `ε*` probed by [`stress_test`] unless told otherwise.
pub const DEFAULT_MULTIPLIERS: [f64; 15] = [
    1.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 90.0, 150.0, 250.0, 400.0, 600.0, 700.0,
];

pub fn lipschitz_bound(m: &HeadModel) -> f64 {
    m.activation().lipschitz() * spectral_norm(m.weight()) * spectral_norm(m.head_weight())
}

/// `gap / 2L`. Negative gaps give negative radii, which mean "no certificate".
pub fn robustness_radius(gap: f64, l: f64) -> Result<f64> {
    if !(l > 0.0) {
        return Err(Error::invalid(format!("Lipschitz bound must be positive, got {l}")));
    }
    Ok(gap / (2.0 * l))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairCertificate {
    pub id: String,
    pub label: usize,
    pub gap: f64,
    pub epsilon_star: f64,
    pub meets_gamma_s: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainCertificate {
    pub id: String,
    pub label: usize,
    pub gap: f64,
    pub meets_gamma_h: bool,
    pub prediction_retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSummary {
    pub n_repair: usize,
    pub repair_meeting_gamma_s: usize,
    pub gap_min: f64,
    pub gap_mean: f64,
    pub gap_max: f64,
    pub epsilon_min: f64,
    pub epsilon_median: f64,
    pub epsilon_mean: f64,
    pub epsilon_max: f64,
    /// `γ_s / 2L`, the radius every certified sample is guaranteed.
    pub epsilon_floor: f64,
    pub n_remain: usize,
    pub remain_meeting_gamma_h: usize,
    pub remain_retained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub lipschitz: f64,
    pub weight_spectral_norm: f64,
    pub head_spectral_norm: f64,
    pub gamma_s: f64,
    pub gamma_h: f64,
    pub repair: Vec<RepairCertificate>,
    pub remain: Vec<RemainCertificate>,
    pub summary: CertificateSummary,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Issues certificates for a converged repair. `m` must be the repaired model.
pub fn certify(
    m: &HeadModel,
    repair_set: &[Sample],
    remain_set: &[Sample],
    hyper: &RepairHyper,
    trace: &RepairTrace,
) -> Result<CertificateReport> {
    if !trace.converged {
        return Err(Error::Refused(
            "repair did not converge; certificates require every repair gap to reach gamma_s"
                .into(),
        ));
    }
    if repair_set.is_empty() {
        return Err(Error::invalid("repair set is empty"));
    }
    let w_norm = spectral_norm(m.weight());
    let wc_norm = spectral_norm(m.head_weight());
    let l = m.activation().lipschitz() * w_norm * wc_norm;

    let repair: Vec<RepairCertificate> = repair_set
        .par_iter()
        .map(|s| {
            let gap = m.gap(&s.v, s.label)?;
            Ok(RepairCertificate {
                id: s.id.clone(),
                label: s.label,
                gap,
                epsilon_star: robustness_radius(gap, l)?,
                meets_gamma_s: gap >= hyper.gamma_s,
            })
        })
        .collect::<Result<_>>()?;
    if let Some(bad) = repair.iter().find(|c| !c.meets_gamma_s) {
        return Err(Error::InternalInvariant(format!(
            "converged repair left sample `{}` with gap {} below gamma_s {}",
            bad.id, bad.gap, hyper.gamma_s
        )));
    }
    let remain: Vec<RemainCertificate> = remain_set
        .par_iter()
        .map(|s| {
            let gap = m.gap(&s.v, s.label)?;
            Ok(RemainCertificate {
                id: s.id.clone(),
                label: s.label,
                gap,
                meets_gamma_h: gap >= hyper.gamma_h,
                prediction_retained: m.predict(&s.v)? == s.label,
            })
        })
        .collect::<Result<_>>()?;

    let gaps: Vec<f64> = repair.iter().map(|c| c.gap).collect();
    let eps: Vec<f64> = repair.iter().map(|c| c.epsilon_star).collect();
    let summary = CertificateSummary {
        n_repair: repair.len(),
        repair_meeting_gamma_s: repair.iter().filter(|c| c.meets_gamma_s).count(),
        gap_min: gaps.iter().copied().fold(f64::INFINITY, f64::min),
        gap_mean: mean(&gaps),
        gap_max: gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        epsilon_min: eps.iter().copied().fold(f64::INFINITY, f64::min),
        epsilon_median: median(&eps),
        epsilon_mean: mean(&eps),
        epsilon_max: eps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        epsilon_floor: robustness_radius(hyper.gamma_s, l)?,
        n_remain: remain.len(),
        remain_meeting_gamma_h: remain.iter().filter(|c| c.meets_gamma_h).count(),
        remain_retained: remain.iter().filter(|c| c.prediction_retained).count(),
    };
    Ok(CertificateReport {
        lipschitz: l,
        weight_spectral_norm: w_norm,
        head_spectral_norm: wc_norm,
        gamma_s: hyper.gamma_s,
        gamma_h: hyper.gamma_h,
        repair,
        remain,
        summary,
    })
}

/// RNG stream for sample `index`, independent of scheduling.
pub fn sample_rng(seed: u64, index: usize) -> Xoshiro256StarStar {
    let mix = (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    Xoshiro256StarStar::seed_from_u64(seed ^ mix)
}

/// A point drawn uniformly from the `d`-ball of the given radius.
pub fn uniform_in_ball<R: Rng>(rng: &mut R, d: usize, radius: f64) -> Vec<f64> {
    loop {
        let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm2(&dir);
        if n > 0.0 {
            let u: f64 = rng.random();
            let r = radius * u.powf(1.0 / d as f64);
            return dir.into_iter().map(|x| x * r / n).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressSample {
    pub id: String,
    pub epsilon_star: f64,
    /// Smallest probed multiplier at which some draw changed the prediction.
    pub first_flip_multiplier: Option<f64>,
    /// Minimum of `gap(v+δ) − gap(v)/2` over draws with `‖δ‖ ≤ ε*`.
    pub min_half_gap_margin: Option<f64>,
    pub draws_within_radius: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressReport {
    pub multipliers: Vec<f64>,
    pub n_mc: usize,
    pub seed: u64,
    pub samples: Vec<StressSample>,
    /// Entry `k` counts samples whose first flip happened at or below
    /// `multipliers[k]`.
    pub cumulative_flips: Vec<usize>,
    pub min_first_flip: Option<f64>,
    pub median_first_flip: Option<f64>,
}

/// Expanding-radius Monte Carlo probe of every certified repair sample.
/// `repair_set` must list the samples of `report.repair` in the same order.
pub fn stress_test(
    m: &HeadModel,
    repair_set: &[Sample],
    report: &CertificateReport,
    multipliers: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<StressReport> {
    if multipliers.is_empty() {
        return Err(Error::invalid("multiplier grid is empty"));
    }
    if multipliers.windows(2).any(|w| !(w[0] < w[1])) || multipliers.iter().any(|k| !(*k > 0.0)) {
        return Err(Error::invalid("multipliers must be positive and strictly ascending"));
    }
    check_alignment(repair_set, report)?;
    let d = m.d_in();

    let samples: Vec<StressSample> = repair_set
        .par_iter()
        .zip(&report.repair)
        .enumerate()
        .map(|(idx, (s, c))| {
            let mut out = StressSample {
                id: s.id.clone(),
                epsilon_star: c.epsilon_star,
                first_flip_multiplier: None,
                min_half_gap_margin: None,
                draws_within_radius: 0,
            };
            if !(c.epsilon_star > 0.0) {
                return Ok(out);
            }
            let gap0 = m.gap(&s.v, s.label)?;
            let mut rng = sample_rng(seed, idx);
            let mut point = vec![0.0; d];
            for &k in multipliers {
                let mut flipped = false;
                for _ in 0..n_mc {
                    let delta = uniform_in_ball(&mut rng, d, k * c.epsilon_star);
                    for i in 0..d {
                        point[i] = s.v[i] + delta[i];
                    }
                    let logits = m.logits(&point)?;
                    if crate::model::argmax(&logits) != s.label {
                        flipped = true;
                    }
                    if norm2(&delta) <= c.epsilon_star {
                        let margin = crate::model::logit_gap(&logits, s.label) - gap0 / 2.0;
                        out.min_half_gap_margin =
                            Some(out.min_half_gap_margin.map_or(margin, |x| x.min(margin)));
                        out.draws_within_radius += 1;
                    }
                }
                if flipped {
                    out.first_flip_multiplier = Some(k);
                    break;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let cumulative_flips = multipliers
        .iter()
        .map(|&k| {
            samples
                .iter()
                .filter(|s| s.first_flip_multiplier.is_some_and(|f| f <= k))
                .count()
        })
        .collect();
    let flips: Vec<f64> = samples.iter().filter_map(|s| s.first_flip_multiplier).collect();
    Ok(StressReport {
        multipliers: multipliers.to_vec(),
        n_mc,
        seed,
        cumulative_flips,
        min_first_flip: flips.iter().copied().reduce(f64::min),
        median_first_flip: (!flips.is_empty()).then(|| median(&flips)),
        samples,
    })
}

fn check_alignment(repair_set: &[Sample], report: &CertificateReport) -> Result<()> {
    if repair_set.len() != report.repair.len()
        || repair_set.iter().zip(&report.repair).any(|(s, c)| s.id != c.id)
    {
        return Err(Error::invalid(
            "repair samples do not match the certificate report entries",
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityBand {
    /// Exclusive lower edge; `None` for the first band (which includes 0).
    pub lower: Option<f64>,
    /// Inclusive upper edge; `None` for the last band.
    pub upper: Option<f64>,
    pub count: usize,
    pub correct: usize,
    /// `None` for an empty band.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximitySample {
    pub id: String,
    pub ratio: f64,
    pub band: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityReport {
    pub band_edges: Vec<f64>,
    pub bands: Vec<ProximityBand>,
    pub samples: Vec<ProximitySample>,
    pub total: usize,
    pub total_correct: usize,
    pub overall_accuracy: Option<f64>,
}

/// Band index for a ratio: `≤ e₀` is band 0, `(e_{i−1}, e_i]` is band `i`,
/// anything above the last edge is the final band.
pub fn band_index(edges: &[f64], ratio: f64) -> usize {
    edges.iter().position(|&e| ratio <= e).unwrap_or(edges.len())
}

/// Groups eval samples by distance to the nearest repaired embedding, in
/// units of that embedding's certified radius, and tabulates accuracy.
pub fn proximity_bands(
    m: &HeadModel,
    eval_set: &[Sample],
    repaired_set: &[Sample],
    report: &CertificateReport,
    band_edges: &[f64],
) -> Result<ProximityReport> {
    if band_edges.is_empty() {
        return Err(Error::invalid("band edges are empty"));
    }
    if band_edges.windows(2).any(|w| !(w[0] < w[1])) || band_edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::invalid("band edges must be finite and strictly ascending"));
    }
    if eval_set.is_empty() || repaired_set.is_empty() {
        return Err(Error::invalid("eval and repaired sets must be non-empty"));
    }
    check_alignment(repaired_set, report)?;
    if report.repair.iter().any(|c| !(c.epsilon_star > 0.0)) {
        return Err(Error::invalid("every repaired sample needs a positive radius"));
    }

    let samples: Vec<ProximitySample> = eval_set
        .par_iter()
        .map(|e| {
            let ratio = repaired_set
                .iter()
                .zip(&report.repair)
                .map(|(r, c)| {
                    let diff: Vec<f64> = e.v.iter().zip(&r.v).map(|(a, b)| a - b).collect();
                    norm2(&diff) / c.epsilon_star
                })
                .fold(f64::INFINITY, f64::min);
            Ok(ProximitySample {
                id: e.id.clone(),
                ratio,
                band: band_index(band_edges, ratio),
                correct: m.predict(&e.v)? == e.label,
            })
        })
        .collect::<Result<_>>()?;

    let mut bands: Vec<ProximityBand> = (0..=band_edges.len())
        .map(|i| ProximityBand {
            lower: i.checked_sub(1).map(|j| band_edges[j]),
            upper: band_edges.get(i).copied(),
            count: 0,
            correct: 0,
            accuracy: None,
        })
        .collect();
    for s in &samples {
        bands[s.band].count += 1;
        bands[s.band].correct += usize::from(s.correct);
    }
    for b in &mut bands {
        b.accuracy = (b.count > 0).then(|| b.correct as f64 / b.count as f64);
    }
    let total_correct = samples.iter().filter(|s| s.correct).count();
    Ok(ProximityReport {
        band_edges: band_edges.to_vec(),
        bands,
        total: samples.len(),
        total_correct,
        overall_accuracy: Some(total_correct as f64 / samples.len() as f64),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use crate::model::ActivationKind;

    fn diag_model(w: f64, wc: f64) -> HeadModel {
        HeadModel::new(
            DenseMatrix::from_diag(&[w, w]),
            vec![0.0; 2],
            DenseMatrix::from_diag(&[wc, wc]),
            vec![0.0; 2],
            ActivationKind::Relu,
        )
        .unwrap()
    }

    #[test]
    fn lipschitz_of_identity_and_diagonal() {
        assert_eq!(lipschitz_bound(&diag_model(1.0, 1.0)), 1.0);
        assert!((lipschitz_bound(&diag_model(2.0, 3.0)) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn radius_arithmetic() {
        assert_eq!(robustness_radius(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(robustness_radius(1.0, 6.0).unwrap(), 1.0 / 12.0);
        assert!(robustness_radius(-1.0, 2.0).unwrap() < 0.0);
        assert!(robustness_radius(1.0, 0.0).is_err());
    }

    #[test]
    fn band_edges_are_upper_inclusive() {
        let edges = [1.0, 5.0];
        assert_eq!(band_index(&edges, 0.0), 0);
        assert_eq!(band_index(&edges, 1.0), 0);
        assert_eq!(band_index(&edges, 1.5), 1);
        assert_eq!(band_index(&edges, 5.0), 1);
        assert_eq!(band_index(&edges, 7.0), 2);
    }

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = sample_rng(5, 0);
        for _ in 0..1000 {
            let p = uniform_in_ball(&mut rng, 3, 0.5);
            assert!(norm2(&p) <= 0.5 + 1e-15);
        }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
