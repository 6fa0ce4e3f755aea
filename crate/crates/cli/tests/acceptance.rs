//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use qprepair::cert::{sample_rng, uniform_in_ball};
use qprepair::gsn::{cross_entropy_gradients, cross_entropy_loss, mean_kappa};
use qprepair::model::argmax;
use qprepair::qp::{gap_coefficients, solve_with, QpProblem, RowGroup, SolverSettings};
use qprepair::{
    assemble, certify, gap_sensitivity_norm, generate, gsn_ft, lipschitz_bound,
    repair, save, stress_test, truncated_svd, ActivationKind, CertificateReport, DType,
    DenseMatrix, GsnFtConfig, HeadModel, QpStatus, RepairHyper, RepairOutcome, Sample,
    SynthConfig, SynthProblem, TensorBundle,
};

const BIN: &str = env!("CARGO_BIN_EXE_qprepair");

struct Case {
    label: String,
    problem: SynthProblem,
    outcome: RepairOutcome,
    cert: Option<CertificateReport>,
}

struct Suite {
    cases: Vec<Case>,
    hyper: RepairHyper,
    seconds: f64,
    errors: Vec<String>,
}

fn suite_config(i: usize) -> SynthConfig {
    let d = [8, 16, 32][i % 3];
    SynthConfig {
        seed: 1 + i as u64,
        d_in: d,
        d_out: d,
        classes: [2, 3][(i / 3) % 2],
        activation: [ActivationKind::Relu, ActivationKind::Tanh][(i / 6) % 2],
        ..Default::default()
    }
}

fn build_suite() -> Suite {
    let hyper = RepairHyper::default();
    let start = Instant::now();
    let mut cases = Vec::new();
    let mut errors = Vec::new();
    for i in 0..20 {
        let cfg = suite_config(i);
        let label = format!("seed {} d {} C {} {}", cfg.seed, cfg.d_in, cfg.classes, cfg.activation);
        let problem = match generate(&cfg) {
            Ok(p) => p,
            Err(e) => {
                errors.push(format!("{label}: generate: {e}"));
                continue;
            }
        };
        let outcome = match repair(&problem.model, &problem.repair, &problem.remain, &hyper) {
            Ok(o) => o,
            Err(e) => {
                errors.push(format!("{label}: repair: {e}"));
                continue;
            }
        };
        let cert = certify(&outcome.model, &problem.repair, &problem.remain, &hyper, &outcome.trace).ok();
        cases.push(Case {
            label,
            problem,
            outcome,
            cert,
        });
    }
    Suite {
        cases,
        hyper,
        seconds: start.elapsed().as_secs_f64(),
        errors,
    }
}

type Check = Result<String, String>;

fn all_cases_present(s: &Suite) -> Result<(), String> {
    if s.errors.is_empty() && s.cases.len() == 20 {
        Ok(())
    } else {
        Err(s.errors.join("; "))
    }
}

fn convergence(s: &Suite) -> Check {
    all_cases_present(s)?;
    let mut worst = f64::INFINITY;
    let mut iters = Vec::new();
    for c in &s.cases {
        if !c.outcome.trace.converged {
            return Err(format!("{}: not converged", c.label));
        }
        for x in &c.problem.repair {
            let g = c.outcome.model.gap(&x.v, x.label).unwrap();
            worst = worst.min(g);
            if g < s.hyper.gamma_s - 1e-9 {
                return Err(format!("{}: {} has gap {g}", c.label, x.id));
            }
        }
        iters.push(c.outcome.trace.total_iterations);
    }
    if s.seconds >= 60.0 {
        return Err(format!("suite took {:.1} s", s.seconds));
    }
    Ok(format!(
        "20/20 converged, min repair gap {worst:.6}, iterations {}..{}, {:.1} s",
        iters.iter().min().unwrap(),
        iters.iter().max().unwrap(),
        s.seconds
    ))
}

fn remain_preservation(s: &Suite) -> Check {
    all_cases_present(s)?;
    let (mut solved, mut other, mut worst_linear) = (0, 0, 0.0f64);
    let (mut total, mut above, mut kept) = (0, 0, 0);
    for c in &s.cases {
        for r in &c.outcome.trace.records {
            if r.qp_status == QpStatus::Solved {
                solved += 1;
                worst_linear = worst_linear.max(r.remain_linear_violation);
            } else {
                other += 1;
            }
        }
        for x in &c.problem.remain {
            total += 1;
            let g = c.outcome.model.gap(&x.v, x.label).unwrap();
            above += usize::from(g >= s.hyper.gamma_h);
            kept += usize::from(c.outcome.model.predict(&x.v).unwrap() == x.label);
        }
    }
    let detail = format!(
        "{solved} solved QPs ({other} not solved), max remain-row violation {worst_linear:.2e}, \
         {above}/{total} remain at gamma_h, {kept}/{total} retained"
    );
    if worst_linear <= 1e-6 && above as f64 >= 0.95 * total as f64 && kept == total {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn stress_at_certified_radius(s: &Suite) -> Check {
    all_cases_present(s)?;
    let (mut samples, mut flips, mut worst_margin, mut draws) = (0, 0, f64::INFINITY, 0);
    for (i, c) in s.cases.iter().enumerate() {
        let cert = c.cert.as_ref().ok_or(format!("{}: no certificate", c.label))?;
        let report = stress_test(&c.outcome.model, &c.problem.repair, cert, &[1.0], 1000, 7 + i as u64)
            .map_err(|e| e.to_string())?;
        samples += report.samples.len();
        flips += report.cumulative_flips[0];
        for x in &report.samples {
            draws += x.draws_within_radius;
            worst_margin = worst_margin.min(x.min_half_gap_margin.unwrap_or(f64::NEG_INFINITY));
        }
    }
    let detail = format!(
        "{samples} samples, {draws} draws, {flips} flips, min gap(v+d) - gap(v)/2 = {worst_margin:.3e}"
    );
    if flips == 0 && worst_margin >= -1e-9 && draws == samples * 1000 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ternary(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) <= f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    0.5 * (lo + hi)
}

/// Minimizer of `ρ/2 ‖β‖² + λ max(0, l₁ − a·β)` over `p·β ≥ l₂`, by nested
/// searches along and across the constraint normal.
fn hinge_oracle(a: [f64; 2], l1: f64, p: [f64; 2], l2: f64, rho: f64, lambda: f64) -> ([f64; 2], f64) {
    let f = |b: [f64; 2]| 0.5 * rho * (b[0] * b[0] + b[1] * b[1]) + lambda * (l1 - a[0] * b[0] - a[1] * b[1]).max(0.0);
    let np = (p[0] * p[0] + p[1] * p[1]).sqrt();
    let n = [p[0] / np, p[1] / np];
    let point = |s: f64, t: f64| [s * n[0] - t * n[1], s * n[1] + t * n[0]];
    let inner = |s: f64| ternary(|t| f(point(s, t)), -1e4, 1e4);
    let s0 = l2 / np;
    let s = ternary(|s| f(point(s, inner(s))), s0, s0 + 1e4);
    let b = point(s, inner(s));
    (b, f(b))
}

fn qp_oracles(s: &Suite) -> Check {
    all_cases_present(s)?;
    let settings = SolverSettings::default();
    let scalar = QpProblem::new(
        1,
        vec![2.0, 0.0],
        vec![0.0, 50.0],
        DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap(),
        vec![1.0, 0.0],
        vec![f64::INFINITY; 2],
        vec![RowGroup::Repair, RowGroup::SlackNonneg],
    )
    .unwrap();
    let sol = solve_with(&scalar, &settings);
    let scalar_err = (sol.beta[0] - 1.0).abs().max(sol.xi[0].abs()).max((sol.objective - 1.0).abs());
    if sol.status != QpStatus::Solved || scalar_err > 1e-6 {
        return Err(format!("scalar hinge off by {scalar_err:.2e} ({:?})", sol.status));
    }

    let mut state = 0x2545F4914F6CDD1Du64;
    let mut uniform = |lo: f64, hi: f64| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        lo + (hi - lo) * (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut worst_oracle = 0.0f64;
    for k in 0..50 {
        let a = [uniform(-2.0, 2.0), uniform(-2.0, 2.0)];
        let p = [uniform(-2.0, 2.0), uniform(-2.0, 2.0)];
        let (l1, l2) = (uniform(-1.0, 3.0), uniform(-1.5, 0.5));
        let (rho, lambda) = (uniform(0.5, 4.0), [0.2, 1.0, 50.0][k % 3]);
        let qp = QpProblem::new(
            2,
            vec![rho, rho, 0.0],
            vec![0.0, 0.0, lambda],
            DenseMatrix::from_rows(&[vec![a[0], a[1], 1.0], vec![p[0], p[1], 0.0], vec![0.0, 0.0, 1.0]]).unwrap(),
            vec![l1, l2, 0.0],
            vec![f64::INFINITY; 3],
            vec![RowGroup::Repair, RowGroup::Remain, RowGroup::SlackNonneg],
        )
        .unwrap();
        let sol = solve_with(&qp, &settings);
        let (beta, obj) = hinge_oracle(a, l1, p, l2, rho, lambda);
        let err = (sol.beta[0] - beta[0])
            .abs()
            .max((sol.beta[1] - beta[1]).abs())
            .max((sol.objective - obj).abs());
        worst_oracle = worst_oracle.max(err);
        if sol.status != QpStatus::Solved || err > 1e-4 {
            return Err(format!("2-variable instance {k} off by {err:.2e} ({:?})", sol.status));
        }
    }

    let (mut n, mut worst_kkt) = (0, 0.0f64);
    for c in &s.cases {
        for r in &c.outcome.trace.records {
            if let Some(k) = r.kkt {
                n += 1;
                worst_kkt = worst_kkt.max(k.max());
            }
        }
    }
    let detail = format!(
        "scalar hinge err {scalar_err:.1e}, 50 two-variable instances max err {worst_oracle:.1e}, \
         max KKT residual {worst_kkt:.2e} over {n} suite QPs"
    );
    if worst_kkt <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn stepped(m: &HeadModel, u: &DenseMatrix, beta: &[f64], t: f64) -> HeadModel {
    let b = DenseMatrix::new(u.cols(), m.d_in(), beta.iter().map(|x| x * t).collect()).unwrap();
    m.with_weight(m.weight().add(&u.matmul(&b).unwrap()).unwrap()).unwrap()
}

fn linearization_error(m: &HeadModel, u: &DenseMatrix, beta: &[f64], x: &Sample, t: f64) -> f64 {
    let a = gap_coefficients(m, u, x).unwrap();
    let linear: f64 = a.iter().zip(beta).map(|(p, q)| p * q).sum::<f64>() * t;
    let moved = stepped(m, u, beta, t).gap(&x.v, x.label).unwrap();
    (moved - m.gap(&x.v, x.label).unwrap() - linear).abs()
}

fn sign_pattern(m: &HeadModel, v: &[f64]) -> Vec<bool> {
    m.forward(v).unwrap().pre.iter().map(|&z| z > 0.0).collect()
}

fn linearization_order(s: &Suite) -> Check {
    all_cases_present(s)?;
    let (mut lo, mut hi, mut n_tanh) = (f64::INFINITY, 0.0f64, 0);
    let (mut worst_relu, mut n_relu) = (0.0f64, 0);
    for c in &s.cases {
        let m = &c.problem.model;
        let u = truncated_svd(m.weight(), s.hyper.rank).unwrap().u;
        let qp = assemble(m, &u, &c.problem.repair, &c.problem.remain, &s.hyper).unwrap();
        let sol = solve_with(&qp, &SolverSettings::default());
        let norm = sol.beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        // The QP direction, at a step small enough that third-order terms are negligible.
        let beta: Vec<f64> = sol.beta.iter().map(|b| b * 1e-3 / norm).collect();
        for x in &c.problem.repair {
            let rival = |mm: &HeadModel| {
                let mut s = mm.logits(&x.v).unwrap();
                s[x.label] = f64::NEG_INFINITY;
                argmax(&s)
            };
            match m.activation() {
                ActivationKind::Tanh => {
                    if rival(&stepped(m, &u, &beta, 1.0)) != rival(m) {
                        continue;
                    }
                    let ratio = linearization_error(m, &u, &beta, x, 1.0) / linearization_error(m, &u, &beta, x, 0.5);
                    lo = lo.min(ratio);
                    hi = hi.max(ratio);
                    n_tanh += 1;
                }
                _ => {
                    // Shrink until neither the sign pattern nor the rival moves.
                    let mut t = 1.0;
                    while t > 1e-12
                        && (sign_pattern(&stepped(m, &u, &beta, t), &x.v) != sign_pattern(m, &x.v)
                            || rival(&stepped(m, &u, &beta, t)) != rival(m))
                    {
                        t *= 0.5;
                    }
                    worst_relu = worst_relu.max(linearization_error(m, &u, &beta, x, t));
                    n_relu += 1;
                }
            }
        }
    }
    let detail = format!(
        "tanh error ratio under halving in [{lo:.3}, {hi:.3}] over {n_tanh} samples; \
         relu max error {worst_relu:.1e} over {n_relu} samples"
    );
    if n_tanh > 0 && lo >= 3.0 && hi <= 5.0 && worst_relu <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rebuild(m: &HeadModel, tensor: usize, idx: usize, delta: f64) -> HeadModel {
    let mut parts = [
        m.weight().as_slice().to_vec(),
        m.bias().to_vec(),
        m.head_weight().as_slice().to_vec(),
        m.head_bias().to_vec(),
    ];
    parts[tensor][idx] += delta;
    let [w, b, wc, bc] = parts;
    HeadModel::new(
        DenseMatrix::new(m.d_out(), m.d_in(), w).unwrap(),
        b,
        DenseMatrix::new(m.classes(), m.d_out(), wc).unwrap(),
        bc,
        m.activation(),
    )
    .unwrap()
}

fn gsn_properties(_: &Suite) -> Check {
    let mut detail = String::new();
    let dead = HeadModel::new(
        DenseMatrix::identity(2),
        vec![-5.0; 2],
        DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap(),
        vec![0.0; 2],
        ActivationKind::Relu,
    )
    .unwrap();
    let k_dead = gap_sensitivity_norm(&dead, &[1.0, 1.0], 0, 2).unwrap();
    if k_dead != 0.0 {
        return Err(format!("dead relu kappa {k_dead}"));
    }

    let hand = HeadModel::new(
        DenseMatrix::identity(2),
        vec![0.0; 2],
        DenseMatrix::identity(2),
        vec![0.0; 2],
        ActivationKind::Tanh,
    )
    .unwrap();
    let k_hand = gap_sensitivity_norm(&hand, &[0.0, 0.0], 0, 1).unwrap();
    if (k_hand - 1.0).abs() > 1e-15 {
        return Err(format!("hand case kappa {k_hand}"));
    }

    let p = generate(&SynthConfig { seed: 33, ..Default::default() }).unwrap();
    let mut worst_scale = 0.0f64;
    for x in p.repair.iter().chain(&p.remain) {
        let k = gap_sensitivity_norm(&p.model, &x.v, x.label, 2).unwrap();
        for alpha in [0.5, 2.0, 8.0, 0.3, 3.7] {
            let scaled = HeadModel::new(
                p.model.weight().clone(),
                p.model.bias().to_vec(),
                p.model.head_weight().scale(alpha),
                p.model.head_bias().to_vec(),
                p.model.activation(),
            )
            .unwrap();
            let ks = gap_sensitivity_norm(&scaled, &x.v, x.label, 2).unwrap();
            let rel = (ks - alpha * k).abs() / (alpha * k).max(1e-300);
            worst_scale = worst_scale.max(rel);
        }
    }
    if worst_scale > 1e-12 {
        return Err(format!("kappa scaling relative error {worst_scale:.1e}"));
    }

    let sat = generate(&SynthConfig {
        seed: 33,
        saturation_bias: 5.0,
        ..Default::default()
    })
    .unwrap();
    let everything: Vec<Sample> = [&sat.repair, &sat.remain, &sat.eval, &sat.aux]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
    let k_sat = mean_kappa(&sat.model, &everything, 2).unwrap();
    if k_sat >= 0.1 {
        return Err(format!("saturated model mean kappa {k_sat}"));
    }
    let (_, trace) = gsn_ft(&sat.model, &sat.aux, &GsnFtConfig::default()).unwrap();
    let (k0, ksel) = (trace.steps[0].kappa, trace.selected().kappa);
    if ksel < k0 {
        return Err(format!("selected kappa {ksel} below step-0 {k0}"));
    }

    let (_, g) = cross_entropy_gradients(&sat.model, &sat.aux).unwrap();
    let analytic = [g.w.as_slice(), &g.b, g.wc.as_slice(), &g.bc];
    let mut worst_fd = 0.0f64;
    let h = 1e-6;
    for (t, grad) in analytic.iter().enumerate() {
        let scale = grad.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-3);
        for (i, &gi) in grad.iter().enumerate() {
            let plus = cross_entropy_loss(&rebuild(&sat.model, t, i, h), &sat.aux).unwrap();
            let minus = cross_entropy_loss(&rebuild(&sat.model, t, i, -h), &sat.aux).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            worst_fd = worst_fd.max((fd - gi).abs() / gi.abs().max(scale * 1e-2));
        }
    }
    let _ = write!(
        detail,
        "dead relu 0, hand case {k_hand}, scaling rel err {worst_scale:.1e}, saturated mean kappa {k_sat:.4}, \
         gsn-ft step {} kappa {ksel:.4} >= step-0 {k0:.4}, gradient rel err {worst_fd:.1e}",
        trace.selected_step
    );
    if worst_fd <= 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lipschitz_soundness(s: &Suite) -> Check {
    all_cases_present(s)?;
    let radii = [1e-4, 1e-2, 0.3, 1.0, 5.0];
    let (mut pairs, mut violations, mut tightest) = (0usize, 0usize, 0.0f64);
    for (ci, c) in s.cases.iter().enumerate() {
        let m = &c.outcome.model;
        let l = lipschitz_bound(m);
        let bases: Vec<&Sample> = c.problem.repair.iter().chain(&c.problem.remain).chain(&c.problem.eval).collect();
        let mut rng = sample_rng(1234, ci);
        let d = m.d_in();
        for k in 0..100_000 {
            let base = bases[k % bases.len()];
            let jitter = uniform_in_ball(&mut rng, d, 2.0);
            let v: Vec<f64> = base.v.iter().zip(&jitter).map(|(a, b)| a + b).collect();
            let delta = uniform_in_ball(&mut rng, d, radii[k % radii.len()]);
            let moved: Vec<f64> = v.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let change = (m.gap(&moved, base.label).unwrap() - m.gap(&v, base.label).unwrap()).abs();
            let bound = l * delta.iter().map(|x| x * x).sum::<f64>().sqrt();
            if change > bound {
                violations += 1;
            }
            if bound > 0.0 {
                tightest = tightest.max(change / bound);
            }
            pairs += 1;
        }
    }
    let mut exact = 0;
    for c in &s.cases {
        let cert = c.cert.as_ref().ok_or(format!("{}: no certificate", c.label))?;
        let l = cert.lipschitz;
        for e in &cert.repair {
            if e.epsilon_star != e.gap / (2.0 * l) {
                return Err(format!("{}: {} radius is not gap/2L", c.label, e.id));
            }
        }
        let floor = s.hyper.gamma_s / (2.0 * l);
        if cert.summary.epsilon_floor != floor || cert.summary.epsilon_min < floor {
            return Err(format!("{}: min radius {} below gamma_s/2L {floor}", c.label, cert.summary.epsilon_min));
        }
        exact += 1;
    }
    let detail = format!(
        "{pairs} pairs over 20 models, {violations} violations, largest |dgap|/(L|d|) {tightest:.3}; \
         radius = gap/2L and min radius >= gamma_s/2L on {exact} certified sets"
    );
    if violations == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_cli(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn schema_errors(name: &str, file: &Path) -> Vec<String> {
    let schema_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/schemas").join(format!("{name}.schema.json"));
    let schema: serde_json::Value = serde_json::from_slice(&fs::read(schema_path).unwrap()).unwrap();
    let instance: serde_json::Value = serde_json::from_slice(&fs::read(file).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    validator.iter_errors(&instance).map(|e| format!("{name}: {e}")).collect()
}

const PIPELINE: [&[&str]; 6] = [
    &["--seed", "33", "synth"],
    &["--seed", "33", "gsn-ft"],
    &["--seed", "33", "repair"],
    &["--seed", "33", "certify"],
    &["--seed", "33", "stress"],
    &["--seed", "33", "proximity"],
];

fn determinism_and_format(_: &Suite) -> Check {
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for dir in &runs {
        for args in PIPELINE {
            let out = run_cli(dir.path(), args);
            if !out.status.success() {
                return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
            }
        }
    }
    let a = read_tree(runs[0].path());
    let b = read_tree(runs[1].path());
    if a != b {
        let differing: Vec<String> = a
            .iter()
            .zip(&b)
            .filter(|(x, y)| x != y)
            .map(|(x, _)| x.0.display().to_string())
            .collect();
        return Err(format!("runs differ: {differing:?}"));
    }

    let out = runs[0].path().join("out");
    let mut errors = Vec::new();
    for (name, file) in [
        ("gsn_ft_trace", "gsn_ft_trace.json"),
        ("repair_trace", "repair_trace.json"),
        ("certificate", "certificate.json"),
        ("stress", "stress.json"),
        ("proximity", "proximity.json"),
        ("manifest", "problem/manifest.json"),
        ("manifest", "repaired/manifest.json"),
    ] {
        errors.extend(schema_errors(name, &out.join(file)));
    }
    if !errors.is_empty() {
        return Err(errors.join("; "));
    }

    let mut bundles = 0;
    for name in ["problem", "aux", "tuned", "repaired"] {
        let dir = out.join(name);
        let loaded = qprepair::load(&dir).map_err(|e| e.to_string())?;
        let copy = tempfile::tempdir().unwrap();
        save(&loaded, copy.path()).map_err(|e| e.to_string())?;
        if read_tree(&dir) != read_tree(copy.path()) {
            return Err(format!("{name} bundle did not round-trip byte-identically"));
        }
        bundles += 1;
    }
    Ok(format!(
        "two runs of the pipeline wrote {} identical files; 7 reports schema-valid; {bundles} bundles round-trip bit-exactly",
        a.len()
    ))
}

fn infeasibility(_: &Suite) -> Check {
    let b_c1 = 1.01f64.tanh() - 0.505f64.tanh();
    let m = HeadModel::new(
        DenseMatrix::from_rows(&[vec![1.0], vec![0.5]]).unwrap(),
        vec![0.0, 0.0],
        DenseMatrix::identity(2),
        vec![0.0, b_c1],
        ActivationKind::Tanh,
    )
    .unwrap();
    let (p1, p0) = (m.predict(&[1.0]).unwrap(), m.predict(&[1.02]).unwrap());
    if (p1, p0) != (1, 0) {
        return Err(format!("constructed model predicts {p1} and {p0}"));
    }
    let dir = tempfile::tempdir().unwrap();
    let mut b = TensorBundle::with_model(&m, DType::F64);
    b.put_samples("repair", &[Sample::new("r0", vec![3.0], 0)], 1, DType::F64);
    b.put_samples(
        "remain",
        &[Sample::new("p0", vec![1.0], 1), Sample::new("p1", vec![1.02], 0)],
        1,
        DType::F64,
    );
    save(&b, &dir.path().join("pair")).unwrap();
    let out = run_cli(dir.path(), &["repair", "--bundle", "pair", "--rank", "1"]);
    let code = out.status.code();
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line: serde_json::Value = serde_json::from_str(stderr.trim()).map_err(|e| format!("stderr {stderr:?}: {e}"))?;
    let trace: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("out/repair_trace.json")).map_err(|e| e.to_string())?).unwrap();
    let last = trace["records"].as_array().and_then(|r| r.last()).cloned().unwrap_or_default();
    let status = last["qp_status"].as_str().unwrap_or("missing").to_string();
    let detail = format!("exit {code:?}, error {}, last QP status {status}", line["error"]);
    if code == Some(3) && line["code"] == 3 && status == "primal-infeasible" {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let suite = build_suite();
    let checks: [(&str, fn(&Suite) -> Check); 9] = [
        ("repair convergence (20 problems)", convergence),
        ("remain preservation", remain_preservation),
        ("certified-radius stress test", stress_at_certified_radius),
        ("QP oracle equivalence", qp_oracles),
        ("linearization order", linearization_order),
        ("GSN properties", gsn_properties),
        ("Lipschitz soundness", lipschitz_soundness),
        ("determinism and format", determinism_and_format),
        ("infeasibility surfacing", infeasibility),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check(&suite) {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
