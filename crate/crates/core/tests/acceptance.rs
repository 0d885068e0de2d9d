//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs as a plain binary (`harness = false`), so
//! `cargo test --test acceptance` prints the table directly.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use evidentia::bae;
use evidentia::cli;
use evidentia::diffcore::Array;
use evidentia::model::{self, Checkpoint, Image, Sample, Split, SyntheticSpec};
use evidentia::nig::{self, NigParams, NigPrior, RegularizerMode};
use evidentia::par::Exec;
use evidentia::seed;
use evidentia::trust::{self, CostParams, EvalRecord};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// User + system CPU seconds of this process, all threads included.
fn cpu_seconds() -> Option<f64> {
    let stat = fs::read_to_string("/proc/self/stat").ok()?;
    // fields after the parenthesised command name start at field 3 (state)
    let rest = &stat[stat.rfind(')')? + 2..];
    let f: Vec<&str> = rest.split_whitespace().collect();
    let ticks: f64 = f.get(11)?.parse::<f64>().ok()? + f.get(12)?.parse::<f64>().ok()?;
    Some(ticks / 100.0)
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

// ---------------------------------------------------------------- 1 – 5

fn nll_quadrature() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut points = 0;
    for g in [-1.0, 0.0, 2.0] {
        for nu in [0.1, 1.0, 10.0] {
            for a in [1.5, 2.0, 5.0] {
                for b in [0.5, 1.0, 4.0] {
                    let p = NigParams::new(g, nu, a, b).map_err(|e| e.to_string())?;
                    for y in [-2.0, 0.0, 1.5, 3.0, 6.0] {
                        let v = nig::nll(&p, y).map_err(|e| e.to_string())?;
                        worst = worst.max((v + log_marginal_quadrature(g, nu, a, b, y)).abs());
                        points += 1;
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(points == 405, format!("{points} grid points"))?;
    ensure(worst <= 1e-5, format!("max |NLL + ln marginal| = {worst:.2e}"))?;
    ensure(secs < 10.0, format!("took {secs:.1} s"))?;
    Ok(format!("405 points, max deviation {worst:.2e}, {secs:.1} s"))
}

fn random_params(rng: &mut impl Rng) -> NigParams {
    NigParams::new(
        rng.random_range(-2.0..4.0),
        10f64.powf(rng.random_range(-1.0..1.0)),
        rng.random_range(1.5..8.0),
        10f64.powf(rng.random_range(-0.7..0.7)),
    )
    .unwrap()
}

fn kl_checks() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(2002);
    let mut self_kl = 0.0f64;
    for _ in 0..100 {
        let p = random_params(&mut rng);
        self_kl = self_kl.max(nig::kl_nig(&p, &NigPrior::from(p)).unwrap().abs());
    }
    let (mut worst_z, mut worst_ig) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let a = random_params(&mut rng);
        let b = random_params(&mut rng);
        let closed = nig::kl_nig(&a, &NigPrior::from(b)).unwrap();
        let (mean, se) = nig_monte_carlo(&mut rng, 1_000_000, (a.gamma, a.nu, a.alpha, a.beta), |mu, s2| {
            nig_logpdf(mu, s2, a.gamma, a.nu, a.alpha, a.beta) - nig_logpdf(mu, s2, b.gamma, b.nu, b.alpha, b.beta)
        });
        worst_z = worst_z.max((closed - mean).abs() / se);
        let ig = nig::kl_invgamma(a.alpha, a.beta, b.alpha, b.beta).unwrap();
        worst_ig = worst_ig.max((ig - kl_invgamma_quadrature(a.alpha, a.beta, b.alpha, b.beta)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(self_kl <= 1e-12, format!("KL(p, p) up to {self_kl:.2e}"))?;
    ensure(worst_z <= 3.0, format!("closed form {worst_z:.2} MC standard errors away"))?;
    ensure(worst_ig <= 1e-6, format!("inverse-gamma KL off quadrature by {worst_ig:.2e}"))?;
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "KL(p,p) ≤ {self_kl:.1e}, worst MC z {worst_z:.2} over 50 pairs, inverse-gamma {worst_ig:.1e}, {secs:.1} s"
    ))
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    for mode in [RegularizerMode::Kl, RegularizerMode::Evidence] {
        let s = model_gradcheck(mode, 50, 2003);
        ensure(s.worst <= 1e-4, format!("{mode:?}: relative error {:.2e} at {}", s.worst, s.worst_at))?;
        parts.push(format!("{mode:?} {} coords worst {:.1e}", s.checked, s.worst));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("{}, {secs:.1} s", parts.join("; ")))
}

fn random_map(rng: &mut impl Rng, b: usize, c: usize, h: usize, w: usize) -> bae::FeatureMap {
    let data = (0..b * c * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
    bae::FeatureMap::new(Array::new(vec![b, c, h, w], data).unwrap()).unwrap()
}

fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-4.0..4.0)).collect()
}

fn bae_invariants() -> Outcome {
    let mut rng = seed::rng(2004);
    let mut mass = 0.0f64;
    let (mut identical_ok, mut swap_ok) = (true, true);
    for _ in 0..1000 {
        let (b, c, h, w) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(2..9), rng.random_range(2..9));
        let f = random_map(&mut rng, b, c, h, w);
        let (wm, wl) = (random_vec(&mut rng, c), random_vec(&mut rng, c));
        let att = bae::attention_maps(&f, &wm, &wl).unwrap();
        for map in [&att.alpha_m, &att.alpha_lat] {
            for item in map.data().chunks(h * w) {
                mass = mass.max((item.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let (zm, zl, fa) = bae::pool_and_asym(&f, &att).unwrap();

        let same = bae::attention_maps(&f, &wm, &wm).unwrap();
        let (sm, sl, sa) = bae::pool_and_asym(&f, &same).unwrap();
        identical_ok &= sm == sl && sa.data().iter().all(|&v| v == 0.0);

        let swapped = bae::attention_maps(&f, &wl, &wm).unwrap();
        let (wm2, wl2, fa2) = bae::pool_and_asym(&f, &swapped).unwrap();
        swap_ok &= zm == wl2 && zl == wm2 && fa == fa2;
    }
    ensure(mass <= 1e-6, format!("attention mass off by {mass:.2e}"))?;
    ensure(identical_ok, "identical branches produced nonzero asymmetry")?;
    ensure(swap_ok, "swapping branch weights did not swap descriptors exactly")?;
    Ok(format!("1000 inputs, mass error {mass:.1e}, zero asymmetry and exact swap"))
}

fn metric_oracles() -> Outcome {
    let mut rng = seed::rng(2005);
    let (mut worst, mut mw_worst) = (0.0f64, 0.0f64);
    for set in 0..100 {
        let n = rng.random_range(2..300);
        let records = random_records_two_class(&mut rng, n);
        let y: Vec<usize> = records.iter().map(|r| r.y_true).collect();
        let p: Vec<usize> = records.iter().map(|r| r.grade_pred).collect();
        let roc = trust::roc(&records).map_err(|e| e.to_string())?;
        for d in [
            trust::qwk(&y, &p).unwrap() - qwk_brute(&y, &p),
            roc.auc - auc_pairs(&records),
            trust::pr_curve(&records).unwrap().ap - ap_brute(&records),
            trust::reliability(&records, 10).unwrap().ece - ece_brute(&records, 10),
        ] {
            worst = worst.max(d.abs());
        }
        ensure(trust::confusion_matrix(&records).unwrap().counts == confusion_brute(&records), format!("confusion differs on set {set}"))?;
        ensure(trust::error_distribution(&records) == error_hist_brute(&records), format!("error histogram differs on set {set}"))?;

        let pos: Vec<f64> = records.iter().filter(|r| r.positive()).map(|r| r.prob_oa).collect();
        let neg: Vec<f64> = records.iter().filter(|r| !r.positive()).map(|r| r.prob_oa).collect();
        let mw = trust::mann_whitney_greater(&pos, &neg).unwrap();
        mw_worst = mw_worst.max((roc.auc - mw.u / (pos.len() * neg.len()) as f64).abs());
    }
    ensure(worst <= 1e-10, format!("scalar metric off its oracle by {worst:.2e}"))?;
    ensure(mw_worst <= 1e-12, format!("AUC off the Mann–Whitney ratio by {mw_worst:.2e}"))?;
    Ok(format!("100 sets, worst scalar deviation {worst:.1e}, AUC vs U ratio {mw_worst:.1e}, counts exact"))
}

// ---------------------------------------------------------------- 6 – 12

/// One default end-to-end run through the CLI.
struct Pipeline {
    root: PathBuf,
    train_cpu: f64,
    ckpt: Checkpoint,
    test: Vec<Sample>,
    records: Vec<EvalRecord>,
    snapshot: BTreeMap<PathBuf, Vec<u8>>,
}

const STAGES: [&str; 6] = ["data", "run", "rep", "ood", "referral", "sweep"];

/// Every invocation carries `--force`, so a rerun uses identical flags.
fn cli_commands(root: &Path) -> Vec<Vec<String>> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let ckpt = root.join("run").join(cli::CHECKPOINT_FILE).to_string_lossy().into_owned();
    let mut cmds: Vec<Vec<String>> = vec![
        vec!["gen".into(), "--out".into(), p("data")],
        vec!["train".into(), "--data".into(), p("data"), "--out".into(), p("run")],
        vec!["report".into(), "--data".into(), p("data"), "--ckpt".into(), ckpt.clone(), "--out".into(), p("rep")],
        vec!["ood".into(), "--data".into(), p("data"), "--ckpt".into(), ckpt.clone(), "--out".into(), p("ood")],
        vec!["sweep".into(), "referral".into(), "--data".into(), p("data"), "--ckpt".into(), ckpt, "--out".into(), p("referral")],
        // short training keeps the λ_KL sweep's rerun cheap
        vec!["sweep".into(), "lambda-kl".into(), "--data".into(), p("data"), "--out".into(), p("sweep"), "--epochs".into(), "2".into()],
    ];
    cmds.iter_mut().for_each(|c| c.push("--force".into()));
    cmds
}

fn run_cli(args: &[String]) -> Result<(), String> {
    let argv = std::iter::once("evidentia".to_string()).chain(args.iter().cloned());
    match cli::run(argv) {
        0 => Ok(()),
        code => Err(format!("`evidentia {}` exited with {code}", args.join(" "))),
    }
}

fn pipeline(root: &Path) -> Result<Pipeline, String> {
    let cmds = cli_commands(root);
    run_cli(&cmds[0])?;
    let before = cpu_seconds();
    let wall = Instant::now();
    run_cli(&cmds[1])?;
    let train_cpu = match (before, cpu_seconds()) {
        (Some(a), Some(b)) => b - a,
        _ => wall.elapsed().as_secs_f64(),
    };
    for c in &cmds[2..] {
        run_cli(c)?;
    }
    let mut snap = BTreeMap::new();
    for stage in STAGES {
        for (k, v) in snapshot(&root.join(stage)) {
            snap.insert(Path::new(stage).join(k), v);
        }
    }

    let ckpt = Checkpoint::load(&root.join("run").join(cli::CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
    let (_, test) = model::read_split(&root.join("data").join(Split::Test.name())).map_err(|e| e.to_string())?;
    let images: Vec<&Image> = test.iter().map(|s| &s.image).collect();
    let preds = ckpt.predict(&images, Exec::default()).map_err(|e| e.to_string())?;
    let records = test
        .iter()
        .zip(&preds)
        .map(|(s, p)| EvalRecord::from_prediction(s.grade, p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    Ok(Pipeline { root: root.to_path_buf(), train_cpu, ckpt, test, records, snapshot: snap })
}

fn learning(p: &Pipeline) -> Outcome {
    let m = trust::ordinal_metrics(&p.records).map_err(|e| e.to_string())?;
    let y: Vec<usize> = p.records.iter().map(|r| r.y_true).collect();
    let g: Vec<usize> = p.records.iter().map(|r| r.grade_pred).collect();
    let kappa = trust::qwk(&y, &g).map_err(|e| e.to_string())?;
    let spec = SyntheticSpec::default();
    ensure(
        (spec.n_train, spec.n_val, spec.n_test, p.ckpt.train.epochs) == (2000, 500, 500, 60),
        "defaults are not 2000/500/500 samples with 60 epochs",
    )?;
    ensure(p.test.len() == 500, format!("test split has {} samples", p.test.len()))?;
    let summary = format!("test QWK {kappa:.4}, accuracy {:.4}, training {:.1} CPU-s", m.accuracy, p.train_cpu);
    ensure(kappa >= 0.7 && m.accuracy >= 0.6 && p.train_cpu <= 300.0, summary.clone())?;
    Ok(summary)
}

fn error_proxy(p: &Pipeline) -> Outcome {
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.root.join("data/test/meta.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(meta["spec"]["flip_prob"] == 0.1, format!("test flip_prob {}", meta["spec"]["flip_prob"]))?;
    let sep = trust::uncertainty_separation(&p.records).map_err(|e| e.to_string())?;
    let s = format!(
        "p = {:.2e} ({} misclassified, median epistemic {:.4} vs {:.4})",
        sep.test.p_value, sep.n_incorrect, sep.median_incorrect, sep.median_correct
    );
    ensure(sep.test.p_value < 0.01, s.clone())?;
    Ok(s)
}

fn selective_prediction(p: &Pipeline) -> Outcome {
    let acc0 = trust::retained_accuracy(&p.records, 0.0).map_err(|e| e.to_string())?;
    let acc3 = trust::retained_accuracy(&p.records, 0.3).map_err(|e| e.to_string())?;
    ensure(acc3 >= acc0 + 0.03, format!("accuracy {acc0:.4} → {acc3:.4} at r = 0.3"))?;

    // oracle uncertainty: every error outranks every correct case
    let oracle: Vec<EvalRecord> = p
        .records
        .iter()
        .map(|r| EvalRecord { epistemic: if r.correct() { 0.1 } else { 1.0 }, ..*r })
        .collect();
    let errors = oracle.iter().filter(|r| !r.correct()).count();
    let rate = errors as f64 / oracle.len() as f64;
    let at_rate = trust::retained_accuracy(&oracle, rate).map_err(|e| e.to_string())?;
    ensure(at_rate == 1.0, format!("oracle curve at r = {rate} is {at_rate}"))?;
    Ok(format!("accuracy {acc0:.4} → {acc3:.4} at r = 0.3; oracle reaches 1.0 at r = {rate}"))
}

fn ood_flagging(p: &Pipeline) -> Outcome {
    let text = fs::read_to_string(p.root.join("ood/ood.csv")).map_err(|e| e.to_string())?;
    let row = text
        .lines()
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|r| r[0] == "rotation" && r[1] == "90")
        .ok_or("no rotation 90 row")?;
    let num = |i: usize| row[i].parse::<f64>().map_err(|e| e.to_string());
    let (mean, clean, pv) = (num(3)?, num(5)?, num(7)?);
    let s = format!("mean epistemic {mean:.4} vs clean {clean:.4}, p = {pv:.2e}");
    ensure(mean > clean && pv < 0.01, s.clone())?;
    Ok(s)
}

fn cost_dip(p: &Pipeline) -> Outcome {
    let grid = trust::default_referral_grid();
    let c = trust::cost_profile(&p.records, &CostParams::default(), &grid).map_err(|e| e.to_string())?;
    let (first, last) = (c.y[0], *c.y.last().unwrap());
    let (i, min) = c.y.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let s = format!("cost {first:.4} at r = 0, minimum {min:.4} at r = {}, {last:.4} at r = 1", grid[i]);
    ensure(min < first && min < last, s.clone())?;
    Ok(s)
}

fn dca_sanity(p: &Pipeline) -> Outcome {
    let d = trust::net_benefit(&p.records, &trust::default_thresholds()).map_err(|e| e.to_string())?;
    ensure(d.treat_none.y.iter().all(|&v| v == 0.0), "treat-none is not identically zero")?;
    let mut margin = f64::INFINITY;
    for ((t, m), a) in d.model.x.iter().zip(&d.model.y).zip(&d.treat_all.y) {
        if (0.2..=0.5).contains(t) {
            margin = margin.min(m - a.max(0.0));
        }
    }
    ensure(margin >= 0.0, format!("model net benefit falls {:.4} below max(treat-all, 0)", -margin))?;
    Ok(format!("treat-none ≡ 0; smallest margin over [0.2, 0.5] {margin:.4}"))
}

fn reproducibility(p: &Pipeline) -> Outcome {
    for c in cli_commands(&p.root) {
        run_cli(&c)?;
    }
    let mut again = BTreeMap::new();
    for stage in STAGES {
        for (k, v) in snapshot(&p.root.join(stage)) {
            again.insert(Path::new(stage).join(k), v);
        }
    }
    let differing: Vec<String> = p
        .snapshot
        .keys()
        .chain(again.keys())
        .filter(|k| p.snapshot.get(*k) != again.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    ensure(differing.is_empty(), format!("differs: {}", differing.join(", ")))?;
    Ok(format!("{} artifacts from {} commands byte-identical on rerun", again.len(), STAGES.len()))
}

/// Predicted grades on the clean test split against the generator's label
/// distribution, estimated from a large independent draw.
fn grade_distribution(p: &Pipeline) -> Outcome {
    let big = SyntheticSpec { n_train: 0, n_val: 0, n_test: 50_000, seed: 99, ..Default::default() };
    let labels = big.generate_split(Split::Test, Exec::default()).map_err(|e| e.to_string())?;
    let mut freq = [0.0; 5];
    labels.iter().for_each(|s| freq[s.grade] += 1.0 / labels.len() as f64);
    let mut counts = [0.0; 5];
    p.records.iter().for_each(|r| counts[r.grade_pred] += 1.0);
    let n = p.records.len() as f64;
    let chi2: f64 = counts.iter().zip(&freq).map(|(o, f)| (o - n * f).powi(2) / (n * f)).sum();
    let pv = chi2_sf(chi2, 4.0);
    let s = format!("predicted {counts:?}, χ² {chi2:.2}, p = {pv:.4}");
    ensure(pv >= 0.01, s.clone())?;
    Ok(s)
}

// ----------------------------------------------------------------

fn report(label: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {label}: {detail} [{secs:.1} s]");
    outcome.is_ok()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // cargo passes harness flags such as --list; only run on a plain invocation
    if args.iter().any(|a| a == "--list") {
        return;
    }

    let mut ok = true;
    ok &= report("criterion 1 (NLL vs quadrature)", nll_quadrature);
    ok &= report("criterion 2 (KL correctness)", kl_checks);
    ok &= report("criterion 3 (gradient integrity)", gradient_integrity);
    ok &= report("criterion 4 (BAE invariants)", bae_invariants);
    ok &= report("criterion 5 (metric oracles)", metric_oracles);

    let dir = tempfile::tempdir().expect("tempdir");
    let start = Instant::now();
    let pipe = catch_unwind(AssertUnwindSafe(|| pipeline(dir.path()))).unwrap_or_else(|_| Err("pipeline panicked".into()));
    println!("default pipeline (gen, train, report, ood, sweeps) took {:.1} s", start.elapsed().as_secs_f64());
    let checks: [(&str, fn(&Pipeline) -> Outcome); 7] = [
        ("criterion 6 (desk-scale learning)", learning),
        ("criterion 7 (uncertainty as error proxy)", error_proxy),
        ("criterion 8 (selective prediction)", selective_prediction),
        ("criterion 9 (OOD flagging)", ood_flagging),
        ("criterion 10 (cost-profile dip)", cost_dip),
        ("criterion 11 (decision curve)", dca_sanity),
        ("criterion 12 (reproducibility)", reproducibility),
    ];
    for (label, check) in checks {
        ok &= match &pipe {
            Ok(p) => report(label, || check(p)),
            Err(e) => report(label, || Err(format!("pipeline failed: {e}"))),
        };
    }
    if let Ok(p) = &pipe {
        ok &= report("supplementary (predicted grade distribution)", || grade_distribution(p));
    }

    if !ok {
        std::process::exit(1);
    }
}
