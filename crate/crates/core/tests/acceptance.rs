//! End-to-end acceptance checks, one line per criterion.
//!
//! Criteria 2–6 and 9 need MNIST (`$LOCERR_MNIST_DIR`, else `data/mnist` at
//! the workspace root). Trained replicates are cached under the cargo target
//! tmp dir, so only the first run pays for training.

mod common;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::{gradient_check, permute_similar, random_symmetric, spectrum_rel_diff};
use locerr::attacks::AttackKind;
use locerr::data::{MnistDir, DATA_DIR_ENV, FETCH_SCRIPT};
use locerr::harness::{
    accuracy_alpha_fits, replicate_cache_key, run_attack_sweep, run_clean_analysis, run_training, AggregateRow, Analysis,
    Condition, Datasets, ExperimentConfig, TrainingOutcome,
};
use locerr::manifold::{
    fit_power_law, participation_dimensionality, theoretical_dimensionality, zeta_dimensionality, DimensionalityMode,
};
use locerr::numerics::{sym_eigvals, Rng};

const REPLICATES: usize = 5;
const DEPTH: usize = 8;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Report {
    verdicts: Vec<(usize, Verdict)>,
}

impl Report {
    fn record(&mut self, id: usize, name: &str, ok: bool, detail: impl Display, started: Instant) {
        let tag = if ok { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} [{name}]: {tag} — {detail} ({:.1} s)",
            started.elapsed().as_secs_f64()
        );
        self.verdicts.push((id, if ok { Verdict::Pass } else { Verdict::Fail }));
    }

    fn skip(&mut self, id: usize, name: &str, why: &str) {
        println!("criterion {id:>2} [{name}]: SKIP — {why}");
        self.verdicts.push((id, Verdict::Skip));
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> MnistDir {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(d) => MnistDir(PathBuf::from(d)),
        None => MnistDir(workspace_root().join("data/mnist")),
    }
}

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("locerr-cache")
}

fn criterion_1(report: &mut Report) {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..50u64 {
        let c = gradient_check(1000 + seed);
        worst = worst.max(c.worst());
        checked += c.layers_checked;
    }
    let fast = t.elapsed().as_secs_f64() < 10.0;
    report.record(
        1,
        "gradient correctness",
        worst < 1e-5 && checked > 0 && fast,
        format!("50 nets, {checked} layers checked, worst relative error {worst:.2e} (< 1e-5), runtime < 10 s: {fast}"),
        t,
    );
}

fn criterion_7(report: &mut Report) {
    let t = Instant::now();
    let n = 200;
    let alphas: Vec<f64> = (10..=40).map(|i| i as f64 * 0.05).collect();
    let mut sum_err = 0.0f64;
    let mut worst_integral = (0.0f64, 0.0);
    for &alpha in &alphas {
        let spectrum: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-alpha)).collect();
        let measured = participation_dimensionality(&spectrum).unwrap();
        let exact = theoretical_dimensionality(alpha, n, DimensionalityMode::ExactSum).unwrap();
        sum_err = sum_err.max((measured - exact).abs() / exact);
        let integral = theoretical_dimensionality(alpha, n, DimensionalityMode::Integral).unwrap();
        let rel = (integral - exact).abs() / exact;
        if rel > worst_integral.0 {
            worst_integral = (rel, alpha);
        }
    }
    let zeta = zeta_dimensionality(2.0).unwrap();
    let mut jump = 0.0f64;
    for s in [0.5, 1.0] {
        for mode in [DimensionalityMode::ExactSum, DimensionalityMode::Integral] {
            let lo = theoretical_dimensionality(s - 1e-7, n, mode).unwrap();
            let hi = theoretical_dimensionality(s + 1e-7, n, mode).unwrap();
            let at = theoretical_dimensionality(s, n, mode).unwrap();
            jump = jump.max((lo - hi).abs() / at).max((lo - at).abs() / at);
        }
    }
    let checks = [
        sum_err < 1e-9,
        worst_integral.0 < 0.15,
        (zeta - 2.5).abs() < 1e-9,
        jump < 1e-5,
        t.elapsed().as_secs_f64() < 5.0,
    ];
    report.record(
        7,
        "dimensionality theory",
        checks.iter().all(|&c| c),
        format!(
            "spectrum vs exact sum {sum_err:.1e} (< 1e-9); integral vs exact worst {:.1}% at α = {} (< 15%: {}); \
             ζ-limit D(2) = {zeta} ; continuity jump {jump:.1e} (< 1e-5)",
            100.0 * worst_integral.0,
            worst_integral.1,
            checks[1],
        ),
        t,
    );
}

fn criterion_8(report: &mut Report) {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_r2 = 0.0f64;
    for alpha in [0.5, 1.0, 1.5, 2.0, 3.0] {
        let spectrum: Vec<f64> = (1..=200).map(|k| 3.7 * (k as f64).powf(-alpha)).collect();
        let fit = fit_power_law(&spectrum, 10).unwrap();
        worst = worst.max((fit.alpha - alpha).abs());
        worst_r2 = worst_r2.max((1.0 - fit.r_squared).abs());
    }
    report.record(
        8,
        "power-law fit oracle",
        worst < 1e-10 && worst_r2 < 1e-12,
        format!("worst |α - α₀| = {worst:.1e} (< 1e-10), worst |1 - R²| = {worst_r2:.1e}"),
        t,
    );
}

fn criterion_10(report: &mut Report) {
    let t = Instant::now();
    let mut rng = Rng::new(10);
    let mut trace_err = 0.0f64;
    let mut perm_err = 0.0f64;
    for _ in 0..100 {
        let s = random_symmetric(&mut rng, 50);
        let eig = sym_eigvals(&s).unwrap();
        let scale = eig.iter().map(|v| v.abs()).sum::<f64>().max(s.trace().abs());
        trace_err = trace_err.max((s.trace() - eig.iter().sum::<f64>()).abs() / scale);
        let mut perm: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut perm);
        perm_err = perm_err.max(spectrum_rel_diff(&eig, &sym_eigvals(&permute_similar(&s, &perm)).unwrap()));
    }
    report.record(
        10,
        "eigensolver oracle",
        trace_err < 1e-9 && perm_err < 1e-9,
        format!("100 matrices 50×50: trace error {trace_err:.1e}, permutation error {perm_err:.1e} (both < 1e-9)"),
        t,
    );
}

fn experiment_config() -> ExperimentConfig {
    ExperimentConfig {
        replicates: REPLICATES,
        ..ExperimentConfig::default()
    }
}

fn criterion_2(report: &mut Report, cfg: &ExperimentConfig, trained: &TrainingOutcome, cached: bool, t: Instant) {
    let acc = &trained.final_accuracy()[0];
    let best = acc.iter().copied().fold(f64::MIN, f64::max);
    let beats_first = acc[1..].iter().all(|&a| a > acc[0]);
    let timing = if cached { "training reused from cache".to_string() } else { "trained in this run".to_string() };
    report.record(
        2,
        "training reproduction",
        best >= 0.95 && beats_first,
        format!(
            "replicate 0, {}×{} net, {} epochs: final accuracy by layer {} — best {best:.4} (≥ 0.95), layers 2..8 > layer 1: {beats_first}; {timing}",
            cfg.net.depth(),
            cfg.net.widths[0],
            cfg.train.epochs,
            fmt_list(acc, 4),
        ),
        t,
    );
}

fn fmt_list(v: &[f64], digits: usize) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.digits$}")).collect();
    format!("[{}]", items.join(", "))
}

fn means(rows: &[&AggregateRow], f: impl Fn(&AggregateRow) -> Option<f64>) -> Vec<f64> {
    rows.iter().map(|r| f(r).unwrap_or(f64::NAN)).collect()
}

fn inversions(v: &[f64], increasing: bool) -> usize {
    v.windows(2)
        .filter(|w| if increasing { w[1] < w[0] } else { w[1] > w[0] })
        .count()
}

fn criterion_3_4(report: &mut Report, clean: &Analysis, t: Instant) {
    let rows: Vec<&AggregateRow> = (1..=DEPTH)
        .map(|l| clean.row(Condition::Clean, l, 0.0).expect("clean row per layer"))
        .collect();
    let alpha = means(&rows, |r| r.alpha.map(|a| a.mean));
    let inv = inversions(&alpha, true);
    let rise = alpha[DEPTH - 1] - alpha[0];
    report.record(
        3,
        "exponent-depth trend",
        alpha[0] < 1.0 && rise >= 0.3 && inv <= 1,
        format!(
            "{REPLICATES} replicates, mean α by layer {}: α₁ < 1: {}; α₈ - α₁ = {rise:.3} (≥ 0.3); inversions {inv} (≤ 1)",
            fmt_list(&alpha, 3),
            alpha[0] < 1.0
        ),
        t,
    );
    let top10 = means(&rows, |r| r.top10_fraction.map(|a| a.mean));
    let deep_min = top10[2..].iter().copied().fold(f64::MAX, f64::min);
    report.record(
        4,
        "explained variance",
        deep_min > 0.90,
        format!("mean top-10 fraction by layer {}; minimum over layers ≥ 3 = {deep_min:.4} (> 0.90)", fmt_list(&top10, 4)),
        t,
    );
}

fn sweep_rows(sweep: &Analysis, kind: AttackKind, layer: usize) -> Vec<&AggregateRow> {
    sweep
        .rows
        .iter()
        .filter(|r| r.condition == Condition::Attack(kind) && r.layer == layer)
        .collect()
}

fn criterion_5(report: &mut Report, sweep: &Analysis, t: Instant) {
    let mut worst_inv = 0;
    for l in 1..=DEPTH {
        let acc = means(&sweep_rows(sweep, AttackKind::Gaussian, l), |r| Some(r.accuracy.mean));
        worst_inv = worst_inv.max(inversions(&acc, false));
    }
    let fits = accuracy_alpha_fits(&sweep.rows);
    let r2: Vec<f64> = (1..=3)
        .map(|l| {
            fits.iter()
                .find(|f| f.condition == Condition::Attack(AttackKind::Gaussian) && f.layer == l)
                .map_or(f64::NAN, |f| f.r_squared)
        })
        .collect();
    let r2_ok = r2.iter().all(|&r| r > 0.95);
    let at = |l| sweep.row(Condition::Attack(AttackKind::Gaussian), l, 2.0).map_or(f64::NAN, |r| r.accuracy.mean);
    let (first, last) = (at(1), at(DEPTH));
    report.record(
        5,
        "Gaussian sweep",
        worst_inv <= 2 && r2_ok && last > first,
        format!(
            "(a) most inversions of accuracy in ε over layers = {worst_inv} (≤ 2); (b) accuracy-vs-α R² for layers 1–3 {} (> 0.95); \
             (c) ε = 2: layer 8 {last:.4} vs layer 1 {first:.4}",
            fmt_list(&r2, 4)
        ),
        t,
    );
}

fn criterion_6(report: &mut Report, sweep: &Analysis, t: Instant) {
    let mut below = true;
    let mut worst_gap = f64::MIN;
    for eps in [0.5, 1.0] {
        for l in 1..=DEPTH {
            let f = sweep.row(Condition::Attack(AttackKind::Fgsm), l, eps).map_or(f64::NAN, |r| r.accuracy.mean);
            let g = sweep.row(Condition::Attack(AttackKind::Gaussian), l, eps).map_or(f64::NAN, |r| r.accuracy.mean);
            below &= f <= g;
            worst_gap = worst_gap.max(f - g);
        }
    }
    let mut peaks = Vec::new();
    for l in 4..=DEPTH {
        let rows = sweep_rows(sweep, AttackKind::Fgsm, l);
        let stats: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| r.alpha.map_or((f64::NAN, f64::NAN), |a| (a.mean, a.stderr)))
            .collect();
        let (Some(&(a0, s0)), Some(&(a1, s1))) = (stats.first(), stats.last()) else { continue };
        let interior = &stats[1..stats.len().saturating_sub(1)];
        let peak = interior.iter().enumerate().find(|(_, &(a, s))| {
            a - a0 > (s * s + s0 * s0).sqrt() && a - a1 > (s * s + s1 * s1).sqrt()
        });
        if let Some((i, &(a, _))) = peak {
            peaks.push(format!("layer {l} at ε = {} (α = {a:.3} vs endpoints {a0:.3}, {a1:.3})", rows[i + 1].epsilon));
        }
    }
    report.record(
        6,
        "FGSM sweep",
        below && !peaks.is_empty(),
        format!(
            "FGSM ≤ Gaussian at ε ∈ {{0.5, 1.0}} on every layer: {below} (largest FGSM - Gaussian {worst_gap:+.4}); \
             interior α maxima at l ≥ 4: {}",
            if peaks.is_empty() { "none".to_string() } else { peaks.join("; ") }
        ),
        t,
    );
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(Result::ok)
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|e| e == "csv"))
                .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
                .collect()
        })
        .unwrap_or_default();
    out.sort();
    out
}

fn criterion_9(report: &mut Report, mnist: &MnistDir) {
    let t = Instant::now();
    let tmp = tempfile::tempdir().expect("tempdir");
    let run = |name: &str| -> Result<Vec<(String, Vec<u8>)>, String> {
        let out_dir = tmp.path().join(name);
        let out = Command::new(env!("CARGO_BIN_EXE_locerr"))
            .args(["reproduce-fig", "3", "--replicates", "1", "--deterministic", "--quiet"])
            .arg("--data-dir")
            .arg(&mnist.0)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).into_owned());
        }
        Ok(csv_bytes(&out_dir))
    };
    match (run("first"), run("second")) {
        (Ok(a), Ok(b)) => {
            let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
            let identical = !a.is_empty() && a == b;
            report.record(
                9,
                "determinism",
                identical,
                format!("two runs of `reproduce-fig 3 --replicates 1 --deterministic`: {} byte-identical: {identical}", names.join(", ")),
                t,
            );
        }
        (Err(e), _) | (_, Err(e)) => report.record(9, "determinism", false, format!("run failed: {e}"), t),
    }
}

fn main() {
    let mut report = Report { verdicts: Vec::new() };
    criterion_1(&mut report);
    criterion_7(&mut report);
    criterion_8(&mut report);
    criterion_10(&mut report);

    let mnist = mnist_dir();
    if !mnist.exists() {
        let why = format!("MNIST not found in {} (run {FETCH_SCRIPT} or set {DATA_DIR_ENV})", mnist.0.display());
        for (id, name) in [
            (2, "training reproduction"),
            (3, "exponent-depth trend"),
            (4, "explained variance"),
            (5, "Gaussian sweep"),
            (6, "FGSM sweep"),
            (9, "determinism"),
        ] {
            report.skip(id, name, &why);
        }
    } else {
        let data = Datasets::load(&mnist).expect("MNIST loads");
        let cfg = experiment_config();
        let cache = cache_dir();
        let cached =
            (0..cfg.replicates).all(|r| cache.join(format!("{}.leck", replicate_cache_key(&cfg, &data, r))).is_file());
        let t = Instant::now();
        match run_training(&cfg, &data, Some(&cache)) {
            Err(e) => {
                for (id, name) in [
                    (2, "training reproduction"),
                    (3, "exponent-depth trend"),
                    (4, "explained variance"),
                    (5, "Gaussian sweep"),
                    (6, "FGSM sweep"),
                ] {
                    report.record(id, name, false, format!("training failed: {e}"), t);
                }
            }
            Ok(trained) => {
                criterion_2(&mut report, &cfg, &trained, cached, t);
                let t = Instant::now();
                let clean = run_clean_analysis(&cfg, &trained.ensemble, &data.test).expect("clean analysis");
                criterion_3_4(&mut report, &clean, t);
                let t = Instant::now();
                let sweep = run_attack_sweep(&cfg, &trained.ensemble, &data.test).expect("attack sweep");
                criterion_5(&mut report, &sweep, t);
                criterion_6(&mut report, &sweep, Instant::now());
            }
        }
        criterion_9(&mut report, &mnist);
    }

    report.verdicts.sort_by_key(|(id, _)| *id);
    let count = |want: fn(&Verdict) -> bool| report.verdicts.iter().filter(|(_, v)| want(v)).count();
    let (pass, fail, skip) = (
        count(|v| matches!(v, Verdict::Pass)),
        count(|v| matches!(v, Verdict::Fail)),
        count(|v| matches!(v, Verdict::Skip)),
    );
    println!("acceptance: {pass} passed, {fail} failed, {skip} skipped");
    if fail + skip > 0 {
        std::process::exit(1);
    }
}
