use std::collections::HashSet;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use qprepair::bundle::{self, DType};
use qprepair::cert::{self, CertificateReport};
use qprepair::gsn::{self, GsnFtConfig};
use qprepair::qp::{RepairHyper, SolverSettings};
use qprepair::repair::{RepairOptions, RepairTrace};
use qprepair::{ActivationKind, Error, HeadModel, Sample, SynthConfig, TensorBundle};

use crate::failure::Failure;
use crate::{Command, Globals};

pub const PROBLEM_DIR: &str = "problem";
pub const AUX_DIR: &str = "aux";
pub const TUNED_DIR: &str = "tuned";
pub const REPAIRED_DIR: &str = "repaired";
pub const TRACE_FILE: &str = "repair_trace.json";
pub const CERT_FILE: &str = "certificate.json";

fn or_default(p: &Option<PathBuf>, g: &Globals, default: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| g.out.join(default))
}

fn load_bundle(path: &Path) -> Result<TensorBundle, Failure> {
    bundle::load(path).map_err(Failure::input)
}

fn load_model(b: &TensorBundle) -> Result<HeadModel, Failure> {
    b.head_model().map_err(Failure::input)
}

fn load_set(b: &TensorBundle, name: &str) -> Result<Vec<Sample>, Failure> {
    b.samples(name).map_err(Failure::input)
}

/// Remain set, or an empty set if the bundle has none.
fn load_optional_set(b: &TensorBundle, name: &str) -> Result<Vec<Sample>, Failure> {
    if b.has_set(name) {
        load_set(b, name)
    } else {
        Ok(Vec::new())
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    print!("{}", bundle::report_json(value)?);
    Ok(())
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub d_in: usize,
    #[arg(long, default_value_t = 16)]
    pub d_out: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = ActivationKind::Tanh)]
    pub activation: ActivationKind,
    #[arg(long, default_value_t = 5)]
    pub n_repair: usize,
    #[arg(long, default_value_t = 20)]
    pub n_remain: usize,
    #[arg(long, default_value_t = 50)]
    pub n_eval: usize,
    #[arg(long, default_value_t = 8)]
    pub n_aux: usize,
    #[arg(long, default_value_t = 3.0)]
    pub cluster_separation: f64,
    /// Largest distance a perturbed point moves from its clean origin.
    #[arg(long, default_value_t = 3.0)]
    pub perturbation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub attack_depth: f64,
    #[arg(long, default_value_t = 0.0)]
    pub saturation_bias: f64,
    #[arg(long, default_value_t = 150)]
    pub fit_steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub fit_learning_rate: f64,
    /// Storage type of the written tensors.
    #[arg(long, value_enum, default_value_t = DTypeArg::F64)]
    pub dtype: DTypeArg,
}

impl SynthArgs {
    fn config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            d_in: self.d_in,
            d_out: self.d_out,
            classes: self.classes,
            activation: self.activation,
            n_repair: self.n_repair,
            n_remain: self.n_remain,
            n_eval: self.n_eval,
            n_aux: self.n_aux,
            cluster_separation: self.cluster_separation,
            perturbation: self.perturbation,
            attack_depth: self.attack_depth,
            saturation_bias: self.saturation_bias,
            fit_steps: self.fit_steps,
            fit_learning_rate: self.fit_learning_rate,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GsnArgs {
    /// Bundle to read [default: <out>/problem].
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Sample set to evaluate.
    #[arg(long, default_value = "repair")]
    pub set: String,
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct GsnFtArgs {
    /// Bundle to fine-tune [default: <out>/problem].
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Bundle holding the `aux` set [default: <out>/aux].
    #[arg(long)]
    pub aux: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 8)]
    pub aux_size: usize,
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
}

impl GsnFtArgs {
    fn config(&self, seed: u64) -> GsnFtConfig {
        GsnFtConfig {
            max_steps: self.steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            aux_size: self.aux_size,
            rank: self.rank,
            seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    #[arg(long, default_value_t = 1.0)]
    pub gamma_s: f64,
    #[arg(long, default_value_t = 0.3)]
    pub gamma_h: f64,
    #[arg(long, default_value_t = 50.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 2.0)]
    pub rho: f64,
    /// Outer iteration cap.
    #[arg(long, default_value_t = 300)]
    pub max_iters: usize,
    /// Amount added to both margins inside the QP bounds.
    #[arg(long, default_value_t = 1e-4)]
    pub target_offset: f64,
    /// Move remain samples that end below gamma_h into slacked rows and keep going.
    #[arg(long)]
    pub promote_remain_violations: bool,
    #[arg(long, default_value_t = 1e-6)]
    pub eps_abs: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub eps_rel: f64,
    #[arg(long, default_value_t = 50_000)]
    pub max_solver_iters: usize,
}

impl HyperArgs {
    fn hyper(&self) -> RepairHyper {
        RepairHyper {
            rank: self.rank,
            gamma_s: self.gamma_s,
            gamma_h: self.gamma_h,
            lambda: self.lambda,
            rho: self.rho,
            max_iters: self.max_iters,
        }
    }

    fn options(&self) -> RepairOptions {
        RepairOptions {
            target_offset: self.target_offset,
            promote_remain_violations: self.promote_remain_violations,
            solver: SolverSettings {
                eps_abs: self.eps_abs,
                eps_rel: self.eps_rel,
                max_iter: self.max_solver_iters,
                ..SolverSettings::default()
            },
        }
    }

    fn validate(&self) -> Result<(), Failure> {
        self.hyper().validate().map_err(Failure::input)?;
        let positive = [("eps-abs", self.eps_abs), ("eps-rel", self.eps_rel)];
        if positive.iter().any(|(_, x)| !(*x > 0.0)) || !(self.target_offset >= 0.0) {
            return Err(Failure::invalid(
                "eps-abs and eps-rel must be positive, target-offset non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Args, Serialize)]
pub struct RepairArgs {
    /// Bundle to repair [default: <out>/tuned].
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct CertifyArgs {
    /// Repaired bundle [default: <out>/repaired].
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Repair trace [default: <out>/repair_trace.json].
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct StressArgs {
    /// Repaired bundle [default: <out>/repaired].
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Certificate report [default: <out>/certificate.json].
    #[arg(long)]
    pub certificate: Option<PathBuf>,
    /// Ascending multipliers of each sample's certified radius.
    #[arg(long, value_delimiter = ',', default_values_t = cert::DEFAULT_MULTIPLIERS)]
    pub multipliers: Vec<f64>,
    /// Draws per sample and multiplier.
    #[arg(long, default_value_t = 1000)]
    pub n_mc: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ProximityArgs {
    /// Repaired bundle [default: <out>/repaired].
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Certificate report [default: <out>/certificate.json].
    #[arg(long)]
    pub certificate: Option<PathBuf>,
    /// Set whose accuracy is tabulated.
    #[arg(long, default_value = "eval")]
    pub set: String,
    /// Ascending band edges, in multiples of the nearest radius.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 5.0, 20.0, 100.0, 1000.0])]
    pub edges: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// Bundle to repair [default: <out>/tuned].
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Ranks to try.
    #[arg(long, value_delimiter = ',', group = "axis")]
    pub ranks: Option<Vec<usize>>,
    /// Repair-set prefixes to try.
    #[arg(long, value_delimiter = ',', group = "axis")]
    pub repair_sizes: Option<Vec<usize>>,
    /// Remain-set prefixes to try.
    #[arg(long, value_delimiter = ',', group = "axis")]
    pub remain_sizes: Option<Vec<usize>>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

fn ascending(values: &[f64], what: &str) -> Result<(), Failure> {
    if values.is_empty()
        || values.iter().any(|v| !v.is_finite())
        || values.windows(2).any(|w| !(w[0] < w[1]))
    {
        return Err(Failure::invalid(format!(
            "{what} must be a non-empty, strictly ascending list of finite numbers"
        )));
    }
    Ok(())
}

/// Flag checks that need no input files.
pub fn validate(cmd: &Command) -> Result<(), Failure> {
    match cmd {
        Command::Synth(a) => a.config(0).validate().map_err(Failure::input),
        Command::Gsn(a) if a.rank == 0 => Err(Failure::invalid("rank must be at least 1")),
        Command::Gsn(_) => Ok(()),
        Command::GsnFt(a) => a.config(0).validate().map_err(Failure::input),
        Command::Repair(a) => a.hyper.validate(),
        Command::Certify(_) => Ok(()),
        Command::Stress(a) => {
            ascending(&a.multipliers, "multipliers")?;
            if a.multipliers[0] <= 0.0 || a.n_mc == 0 {
                return Err(Failure::invalid("multipliers and n-mc must be positive"));
            }
            Ok(())
        }
        Command::Proximity(a) => ascending(&a.edges, "edges"),
        Command::Sweep(a) => {
            a.hyper.validate()?;
            match (&a.ranks, &a.repair_sizes, &a.remain_sizes) {
                (Some(v), None, None) | (None, Some(v), None) | (None, None, Some(v)) if !v.is_empty() => {
                    Ok(())
                }
                _ => Err(Failure::invalid(
                    "give exactly one non-empty axis: --ranks, --repair-sizes or --remain-sizes",
                )),
            }
        }
    }
}

pub fn synth(a: &SynthArgs, g: &Globals) -> Result<(), Failure> {
    let p = qprepair::generate(&a.config(g.seed))?;
    let dtype = DType::from(a.dtype);
    let d = p.model.d_in();
    let mut b = TensorBundle::with_model(&p.model, dtype);
    b.put_samples("repair", &p.repair, d, dtype);
    b.put_samples("remain", &p.remain, d, dtype);
    b.put_samples("eval", &p.eval, d, dtype);
    bundle::save(&b, &g.out.join(PROBLEM_DIR))?;
    let mut aux = TensorBundle::empty();
    aux.put_samples("aux", &p.aux, d, dtype);
    bundle::save(&aux, &g.out.join(AUX_DIR))?;
    Ok(())
}

#[derive(Serialize)]
struct KappaEntry {
    id: String,
    label: usize,
    kappa: f64,
}

#[derive(Serialize)]
struct GsnReport {
    set: String,
    rank: usize,
    samples: Vec<KappaEntry>,
    mean_kappa: Option<f64>,
}

pub fn gsn(a: &GsnArgs, g: &Globals) -> Result<(), Failure> {
    let b = load_bundle(&or_default(&a.bundle, g, PROBLEM_DIR))?;
    let m = load_model(&b)?;
    let samples = load_set(&b, &a.set)?;
    let kappas = gsn::sample_kappas(&m, &samples, a.rank).map_err(Failure::input)?;
    let report = GsnReport {
        set: a.set.clone(),
        rank: a.rank,
        mean_kappa: (!kappas.is_empty()).then(|| kappas.iter().sum::<f64>() / kappas.len() as f64),
        samples: samples
            .iter()
            .zip(&kappas)
            .map(|(s, &kappa)| KappaEntry {
                id: s.id.clone(),
                label: s.label,
                kappa,
            })
            .collect(),
    };
    qprepair::write_report(&report, &g.out.join("gsn.json"))?;
    print_json(&report)
}

pub fn gsn_ft(a: &GsnFtArgs, g: &Globals) -> Result<(), Failure> {
    let mut b = load_bundle(&or_default(&a.bundle, g, PROBLEM_DIR))?;
    let aux_bundle = load_bundle(&or_default(&a.aux, g, AUX_DIR))?;
    let m = load_model(&b)?;
    let aux = load_set(&aux_bundle, "aux")?;
    let taken: HashSet<&str> = b.sets.iter().flat_map(|s| s.ids.iter().map(|x| x.as_str())).collect();
    if let Some(clash) = aux.iter().find(|s| taken.contains(s.id.as_str())) {
        return Err(Failure::invalid(format!(
            "aux sample `{}` also appears in the main bundle",
            clash.id
        )));
    }
    let (tuned, trace) = gsn::gsn_ft(&m, &aux, &a.config(g.seed))?;

    let mut remain = load_optional_set(&b, "remain")?;
    for s in &mut remain {
        s.label = tuned.predict(&s.v)?;
    }
    b.set_model(&tuned, DType::F64);
    if let Some(meta) = b.sets.iter_mut().find(|s| s.name == "remain") {
        meta.labels = remain.iter().map(|s| s.label).collect();
    }
    bundle::save(&b, &g.out.join(TUNED_DIR))?;
    qprepair::write_report(&trace, &g.out.join("gsn_ft_trace.json"))?;
    Ok(())
}

pub fn repair(a: &RepairArgs, g: &Globals) -> Result<(), Failure> {
    let mut b = load_bundle(&or_default(&a.bundle, g, TUNED_DIR))?;
    let m = load_model(&b)?;
    let repair_set = load_set(&b, "repair")?;
    let remain = load_optional_set(&b, "remain")?;
    let trace_path = g.out.join(TRACE_FILE);
    match qprepair::repair_with(&m, &repair_set, &remain, &a.hyper.hyper(), &a.hyper.options()) {
        Ok(out) => {
            b.set_model(&out.model, DType::F64);
            bundle::save(&b, &g.out.join(REPAIRED_DIR))?;
            qprepair::write_report(&out.trace, &trace_path)?;
            if out.trace.converged {
                Ok(())
            } else {
                Err(Failure::not_converged(format!(
                    "repair did not converge in {} iterations",
                    out.trace.total_iterations
                )))
            }
        }
        Err(Error::InfeasibleRepair { iteration, trace }) => {
            qprepair::write_report(&trace, &trace_path)?;
            Err(Failure::new(
                "qp-infeasible",
                3,
                format!("repair QP primal-infeasible at iteration {iteration}"),
            ))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn certify(a: &CertifyArgs, g: &Globals) -> Result<(), Failure> {
    let b = load_bundle(&or_default(&a.bundle, g, REPAIRED_DIR))?;
    let trace: RepairTrace =
        bundle::read_report(&or_default(&a.trace, g, TRACE_FILE)).map_err(Failure::input)?;
    let m = load_model(&b)?;
    let repair_set = load_set(&b, "repair")?;
    let remain = load_optional_set(&b, "remain")?;
    let report = cert::certify(&m, &repair_set, &remain, &trace.hyper, &trace)?;
    qprepair::write_report(&report, &g.out.join(CERT_FILE))?;
    Ok(())
}

fn load_certificate(path: &Option<PathBuf>, g: &Globals) -> Result<CertificateReport, Failure> {
    bundle::read_report(&or_default(path, g, CERT_FILE)).map_err(Failure::input)
}

pub fn stress(a: &StressArgs, g: &Globals) -> Result<(), Failure> {
    let b = load_bundle(&or_default(&a.bundle, g, REPAIRED_DIR))?;
    let report = load_certificate(&a.certificate, g)?;
    let m = load_model(&b)?;
    let repair_set = load_set(&b, "repair")?;
    let stress = cert::stress_test(&m, &repair_set, &report, &a.multipliers, a.n_mc, g.seed)
        .map_err(Failure::input)?;
    qprepair::write_report(&stress, &g.out.join("stress.json"))?;
    Ok(())
}

pub fn proximity(a: &ProximityArgs, g: &Globals) -> Result<(), Failure> {
    let b = load_bundle(&or_default(&a.bundle, g, REPAIRED_DIR))?;
    let report = load_certificate(&a.certificate, g)?;
    let m = load_model(&b)?;
    let eval = load_set(&b, &a.set)?;
    let repair_set = load_set(&b, "repair")?;
    let prox =
        cert::proximity_bands(&m, &eval, &repair_set, &report, &a.edges).map_err(Failure::input)?;
    qprepair::write_report(&prox, &g.out.join("proximity.json"))?;
    Ok(())
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SweepStatus {
    Converged,
    NotConverged,
    Infeasible,
    InvalidArgument,
    NumericFailure,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    value: usize,
    status: SweepStatus,
    iterations: usize,
    n_repair: usize,
    n_remain: usize,
    min_repair_gap: Option<f64>,
    mean_repair_gap: Option<f64>,
    remain_retained: Option<usize>,
    remain_meeting_gamma_h: Option<usize>,
    mean_epsilon_star: Option<f64>,
    message: Option<String>,
}

#[derive(Debug, Serialize)]
struct SweepReport {
    axis: &'static str,
    hyper: RepairHyper,
    rows: Vec<SweepRow>,
}

pub fn sweep(a: &SweepArgs, g: &Globals) -> Result<(), Failure> {
    let b = load_bundle(&or_default(&a.bundle, g, TUNED_DIR))?;
    let m = load_model(&b)?;
    let repair_all = load_set(&b, "repair")?;
    let remain_all = load_optional_set(&b, "remain")?;
    let (axis, values) = match (&a.ranks, &a.repair_sizes, &a.remain_sizes) {
        (Some(v), _, _) => ("rank", v),
        (_, Some(v), _) => ("repair-size", v),
        (_, _, Some(v)) => ("remain-size", v),
        _ => return Err(Failure::invalid("no sweep axis given")),
    };
    let base = a.hyper.hyper();
    let opts = a.hyper.options();
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut hyper = base.clone();
        let (mut fix, mut keep) = (repair_all.as_slice(), remain_all.as_slice());
        match axis {
            "rank" => hyper.rank = value,
            "repair-size" => fix = &repair_all[..value.min(repair_all.len())],
            _ => keep = &remain_all[..value.min(remain_all.len())],
        }
        let mut row = SweepRow {
            value,
            status: SweepStatus::Converged,
            iterations: 0,
            n_repair: fix.len(),
            n_remain: keep.len(),
            min_repair_gap: None,
            mean_repair_gap: None,
            remain_retained: None,
            remain_meeting_gamma_h: None,
            mean_epsilon_star: None,
            message: None,
        };
        match qprepair::repair_with(&m, fix, keep, &hyper, &opts) {
            Ok(out) => {
                row.iterations = out.trace.total_iterations;
                if let Some(last) = out.trace.records.last() {
                    row.min_repair_gap = Some(last.min_repair_gap);
                    row.mean_repair_gap = Some(last.mean_repair_gap);
                }
                let mut retained = 0;
                for s in keep {
                    retained += usize::from(out.model.predict(&s.v)? == s.label);
                }
                row.remain_retained = Some(retained);
                row.remain_meeting_gamma_h = Some(keep.len() - out.trace.remain_below_gamma_h.len());
                if out.trace.converged {
                    let report = cert::certify(&out.model, fix, keep, &hyper, &out.trace)?;
                    row.mean_epsilon_star = Some(report.summary.epsilon_mean);
                } else {
                    row.status = SweepStatus::NotConverged;
                }
            }
            Err(Error::InfeasibleRepair { iteration, trace }) => {
                row.status = SweepStatus::Infeasible;
                row.iterations = trace.total_iterations;
                row.message = Some(format!("QP primal-infeasible at iteration {iteration}"));
            }
            Err(e @ Error::InvalidArgument(_)) => {
                row.status = SweepStatus::InvalidArgument;
                row.message = Some(e.to_string());
            }
            Err(e @ Error::NumericFailure { .. }) => {
                row.status = SweepStatus::NumericFailure;
                row.message = Some(e.to_string());
            }
            Err(e) => return Err(e.into()),
        }
        rows.push(row);
    }
    let report = SweepReport {
        axis,
        hyper: base,
        rows,
    };
    qprepair::write_report(&report, &g.out.join("sweep.json"))?;
    print_json(&report)
}
