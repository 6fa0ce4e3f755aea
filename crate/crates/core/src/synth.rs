//! Seeded generator of small repair problems.
//!
//! Class clusters are Gaussian blobs in embedding space. A head model is fit
//! to clean cluster points by plain gradient descent. Repair samples are
//! clean points walked down the gap gradient, within a bounded distance, until
//! the fitted model gets them wrong, a stand-in for adversarial embeddings.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsn::{cross_entropy_gradients, descend};
use crate::linalg::{norm2, DenseMatrix};
use crate::model::{competitor_of, ActivationKind, HeadModel, Sample};

const MAX_ATTEMPTS: u64 = 100;
const TRAIN_PER_CLASS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub d_in: usize,
    pub d_out: usize,
    pub classes: usize,
    pub activation: ActivationKind,
    pub n_repair: usize,
    pub n_remain: usize,
    pub n_eval: usize,
    /// Clean samples with true labels for GSN-FT, disjoint from the rest.
    pub n_aux: usize,
    /// Norm of each class center; cluster noise has unit variance per axis.
    pub cluster_separation: f64,
    /// Largest ℓ2 distance a perturbed point may move from its clean origin.
    pub perturbation: f64,
    /// Perturbed points stop once their gap falls below `−u · attack_depth`
    /// with `u` drawn uniformly from `[0.05, 1]`.
    pub attack_depth: f64,
    /// Magnitude of the post-fit bias shift; 0 disables it.
    pub saturation_bias: f64,
    /// Full-batch gradient steps used to fit the head.
    pub fit_steps: usize,
    pub fit_learning_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            d_in: 16,
            d_out: 16,
            classes: 2,
            activation: ActivationKind::Tanh,
            n_repair: 5,
            n_remain: 20,
            n_eval: 50,
            n_aux: 8,
            cluster_separation: 3.0,
            perturbation: 3.0,
            attack_depth: 1.0,
            saturation_bias: 0.0,
            fit_steps: 150,
            fit_learning_rate: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_repair == 0 {
            return Err(Error::invalid("n_repair must be at least 1"));
        }
        if self.d_in < 2 || self.d_out < 2 {
            return Err(Error::invalid("d_in and d_out must be at least 2"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        if !(self.cluster_separation > 0.0) || !self.cluster_separation.is_finite() {
            return Err(Error::invalid("cluster_separation must be positive"));
        }
        if !(self.perturbation > 0.0) || !self.perturbation.is_finite() {
            return Err(Error::invalid("perturbation must be positive"));
        }
        if !(self.attack_depth > 0.0) || !self.attack_depth.is_finite() {
            return Err(Error::invalid("attack_depth must be positive"));
        }
        if !(self.fit_learning_rate > 0.0) || !self.fit_learning_rate.is_finite() {
            return Err(Error::invalid("fit_learning_rate must be positive"));
        }
        if !(self.saturation_bias >= 0.0) || !self.saturation_bias.is_finite() {
            return Err(Error::invalid("saturation_bias must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthProblem {
    pub model: HeadModel,
    pub repair: Vec<Sample>,
    pub remain: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub aux: Vec<Sample>,
}

struct Clusters {
    centers: Vec<Vec<f64>>,
}

impl Clusters {
    fn new(rng: &mut Xoshiro256StarStar, cfg: &SynthConfig) -> Self {
        let centers = (0..cfg.classes)
            .map(|_| {
                let dir = gaussian(rng, cfg.d_in);
                let n = norm2(&dir).max(1e-12);
                dir.iter().map(|x| x * cfg.cluster_separation / n).collect()
            })
            .collect();
        Clusters { centers }
    }

    fn clean(&self, rng: &mut Xoshiro256StarStar, class: usize) -> Vec<f64> {
        let noise = gaussian(rng, self.centers[class].len());
        self.centers[class].iter().zip(noise).map(|(c, e)| c + e).collect()
    }
}

const ATTACK_STEPS: usize = 60;

/// `∇_v gap(v, y) = Wᵀ J(v) (w_y − w_ĉ)`.
fn gap_input_gradient(m: &HeadModel, v: &[f64], y: usize) -> Result<Vec<f64>> {
    let fwd = m.forward(v)?;
    let rival = competitor_of(&fwd.logits, y);
    let wc = m.head_weight();
    let g: Vec<f64> = (0..m.d_out())
        .map(|o| m.activation().derivative(fwd.pre[o]) * (wc[(y, o)] - wc[(rival, o)]))
        .collect();
    Ok(m.weight().tr_mul_vec(&g))
}

/// Walks `x` down the normalized gap gradient in steps of `radius / 60`
/// until the gap drops below `target`. Returns the final point and whether
/// the target was reached inside the ball of `radius`.
fn attack(m: &HeadModel, x: &[f64], y: usize, radius: f64, target: f64) -> Result<(Vec<f64>, bool)> {
    let step = radius / ATTACK_STEPS as f64;
    let mut v = x.to_vec();
    for _ in 0..ATTACK_STEPS {
        if m.gap(&v, y)? < target {
            return Ok((v, true));
        }
        let g = gap_input_gradient(m, &v, y)?;
        let n = norm2(&g);
        if n == 0.0 {
            return Ok((v, false));
        }
        v.iter_mut().zip(&g).for_each(|(vi, gi)| *vi -= step * gi / n);
    }
    let reached = m.gap(&v, y)? < target;
    Ok((v, reached))
}

fn gaussian(rng: &mut Xoshiro256StarStar, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn gaussian_matrix(rng: &mut Xoshiro256StarStar, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DenseMatrix::new(rows, cols, data).expect("shape matches data length")
}

fn fit(rng: &mut Xoshiro256StarStar, cfg: &SynthConfig, clusters: &Clusters) -> Result<HeadModel> {
    let w = gaussian_matrix(rng, cfg.d_out, cfg.d_in, 1.0 / (cfg.d_in as f64).sqrt());
    let wc = gaussian_matrix(rng, cfg.classes, cfg.d_out, 1.0 / (cfg.d_out as f64).sqrt());
    let mut m = HeadModel::new(
        w,
        vec![0.0; cfg.d_out],
        wc,
        vec![0.0; cfg.classes],
        cfg.activation,
    )?;
    let train: Vec<Sample> = (0..TRAIN_PER_CLASS * cfg.classes)
        .map(|i| {
            let class = i % cfg.classes;
            Sample::new(format!("train-{i}"), clusters.clean(rng, class), class)
        })
        .collect();
    for step in 0..cfg.fit_steps {
        let (loss, g) = cross_entropy_gradients(&m, &train)?;
        if !loss.is_finite() {
            return Err(Error::NumericFailure {
                step,
                message: "non-finite loss while fitting the synthetic head".into(),
            });
        }
        m = descend(&m, &g, cfg.fit_learning_rate)?;
    }
    if cfg.saturation_bias > 0.0 {
        // Push each unit further the way it already leans on the training data.
        let mut lean = vec![0.0; cfg.d_out];
        for s in &train {
            let z = m.forward(&s.v)?.pre;
            lean.iter_mut().zip(&z).for_each(|(l, zi)| *l += zi);
        }
        let shifted: Vec<f64> = m
            .bias()
            .iter()
            .zip(&lean)
            .map(|(b, l)| if *l >= 0.0 { b + cfg.saturation_bias } else { b - cfg.saturation_bias })
            .collect();
        m = HeadModel::new(
            m.weight().clone(),
            shifted,
            m.head_weight().clone(),
            m.head_bias().to_vec(),
            m.activation(),
        )?;
    }
    Ok(m)
}

/// Draws until `n` accepted samples or the candidate budget runs out.
fn draw_until(
    n: usize,
    budget: usize,
    mut candidate: impl FnMut(usize) -> Result<Option<Sample>>,
) -> Result<Option<Vec<Sample>>> {
    let mut out = Vec::with_capacity(n);
    for attempt in 0..budget {
        if out.len() == n {
            break;
        }
        if let Some(s) = candidate(attempt)? {
            out.push(s);
        }
    }
    Ok((out.len() == n).then_some(out))
}

fn attempt(cfg: &SynthConfig, sub_seed: u64) -> Result<Option<SynthProblem>> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(sub_seed);
    let clusters = Clusters::new(&mut rng, cfg);
    let model = fit(&mut rng, cfg, &clusters)?;
    let classes = cfg.classes;

    let mut k = 0usize;
    let Some(repair) = draw_until(cfg.n_repair, 200 * cfg.n_repair + 200, |_| {
        let class = rng.random_range(0..classes);
        let x = clusters.clean(&mut rng, class);
        let target = -cfg.attack_depth * rng.random_range(0.05..=1.0);
        let (v, reached) = attack(&model, &x, class, cfg.perturbation, target)?;
        if reached {
            k += 1;
            Ok(Some(Sample::new(format!("repair-{}", k - 1), v, class)))
        } else {
            Ok(None)
        }
    })?
    else {
        return Ok(None);
    };

    let mut k = 0usize;
    let Some(remain) = draw_until(cfg.n_remain, 50 * cfg.n_remain + 200, |i| {
        let class = i % classes;
        let v = clusters.clean(&mut rng, class);
        let pred = model.predict(&v)?;
        if pred == class && model.gap(&v, pred)? > 0.0 {
            k += 1;
            Ok(Some(Sample::new(format!("remain-{}", k - 1), v, pred)))
        } else {
            Ok(None)
        }
    })?
    else {
        return Ok(None);
    };

    let eval = (0..cfg.n_eval)
        .map(|i| {
            let class = rng.random_range(0..classes);
            let v = if i < cfg.n_eval.div_ceil(2) {
                clusters.clean(&mut rng, class)
            } else {
                let x = clusters.clean(&mut rng, class);
                let target = -cfg.attack_depth * rng.random_range(0.05..=1.0);
                attack(&model, &x, class, cfg.perturbation, target)?.0
            };
            Ok(Sample::new(format!("eval-{i}"), v, class))
        })
        .collect::<Result<_>>()?;
    let aux = (0..cfg.n_aux)
        .map(|i| {
            let class = i % classes;
            Sample::new(format!("aux-{i}"), clusters.clean(&mut rng, class), class)
        })
        .collect();
    Ok(Some(SynthProblem {
        model,
        repair,
        remain,
        eval,
        aux,
    }))
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthProblem> {
    cfg.validate()?;
    for a in 0..MAX_ATTEMPTS {
        let sub_seed = cfg.seed.wrapping_add(a.wrapping_mul(0xD1B5_4A32_D192_ED03));
        if let Some(p) = attempt(cfg, sub_seed)? {
            return Ok(p);
        }
    }
    Err(Error::GenerationFailure(format!(
        "could not draw {} misclassified and {} correctly classified samples in {MAX_ATTEMPTS} \
         attempts; try a larger perturbation",
        cfg.n_repair, cfg.n_remain
    )))
}
