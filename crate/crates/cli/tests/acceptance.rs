//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use sefoss_core::config::{Mode, RunConfig};
use sefoss_core::energy::{auroc, calibrate_thresholds, free_energy, free_energy_score, EnergyConfig};
use sefoss_core::losses::{
    energy_inlier_mask, energy_outlier_mask, energy_reg_loss, free_energy_var, pseudo_label_loss,
    self_supervised_loss, supervised_loss, LossWeights,
};
use sefoss_core::rng;
use sefoss_core::selftest::{instance, Instance};
use sefoss_core::tape::Tape;
use sefoss_core::tensor::{log_sum_exp, Tensor};
use sefoss_core::trainer::{lr_schedule, record_losses, run_experiment, PseudoLabelRule, StepPlan};

/// Stream tag for the randomized checks in this file.
const TAG: u64 = 0xACCE;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn sefoss(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_sefoss"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let out = sefoss(&["gradcheck", "--trials", "100"])?;
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure(out.status.success(), || format!("gradcheck exited with {:?}\n{stdout}", out.status.code()))?;
    let mut worst = 0.0f64;
    for term in ["l_l", "l_s", "l_p", "l_e", "l_w", "total"] {
        let line = stdout
            .lines()
            .find(|l| l.split_whitespace().next() == Some(term))
            .ok_or(format!("no line for {term}"))?;
        let err: f64 = line
            .split_whitespace()
            .find_map(|w| w.strip_prefix("worst_rel_err="))
            .and_then(|v| v.parse().ok())
            .ok_or(format!("unparsable line {line:?}"))?;
        ensure(err < 1e-4, || format!("{term} worst relative error {err:e}"))?;
        worst = worst.max(err);
    }
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!("worst rel err {worst:.2e} over 100 seeds, {secs:.1}s"))
}

fn only(w_p: f64, w_s: f64, w_e: f64) -> LossWeights {
    LossWeights { w_p, w_s, w_e, w_w: 0.0 }
}

fn param_grad(inst: &Instance, plan: &StepPlan, target: Option<&Tensor>) -> Result<Vec<f64>, String> {
    let mut tape = Tape::new();
    let vars = inst.params.register(&mut tape).map_err(|e| e.to_string())?;
    let (root, _) = record_losses(&mut tape, &vars, &inst.batch, plan, target).map_err(|e| e.to_string())?;
    let mut g = tape.backward(root).map_err(|e| e.to_string())?;
    vars.flat_grad(&mut g).map_err(|e| e.to_string())
}

/// `l_l + l_p` with the weak-view logits computed outside the tape.
fn pseudo_label_oracle(inst: &Instance, tau_id: f64) -> sefoss_core::Result<Vec<f64>> {
    let weak_logits = inst.params.predict(&inst.batch.unlabeled_weak)?;
    let mut tape = Tape::new();
    let vars = inst.params.register(&mut tape)?;
    let xs = tape.constant(inst.batch.unlabeled_strong.clone())?;
    let v = vars.forward_features(&mut tape, xs)?;
    let q = vars.forward_logits(&mut tape, v)?;
    let (lp, _) = pseudo_label_loss(&mut tape, &weak_logits, q, tau_id, 1.0)?;
    let xl = tape.constant(inst.batch.labeled_x.clone())?;
    let fl = vars.forward_features(&mut tape, xl)?;
    let o = vars.forward_logits(&mut tape, fl)?;
    let ll = supervised_loss(&mut tape, o, &inst.batch.labeled_onehot)?;
    let root = tape.add(ll, lp)?;
    let mut g = tape.backward(root)?;
    vars.flat_grad(&mut g)
}

/// Gradients of `l_s`, `l_p` and `l_e` with respect to the weak and strong input views.
fn input_grads(inst: &Instance, tau_id: f64, tau_ood: f64, m_ood: f64) -> sefoss_core::Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut out = Vec::new();
    for which in 0..3 {
        let mut tape = Tape::new();
        let vars = inst.params.register(&mut tape)?;
        let xw = tape.param(inst.batch.unlabeled_weak.clone())?;
        let xs = tape.param(inst.batch.unlabeled_strong.clone())?;
        let z = vars.forward_features(&mut tape, xw)?;
        let v = vars.forward_features(&mut tape, xs)?;
        let w = vars.forward_logits(&mut tape, z)?;
        let q = vars.forward_logits(&mut tape, v)?;
        let root = match which {
            0 => {
                let hv = vars.project(&mut tape, v)?;
                let zd = tape.detach(z)?;
                self_supervised_loss(&mut tape, hv, zd)?
            }
            1 => {
                let wv = tape.value(w).clone();
                pseudo_label_loss(&mut tape, &wv, q, tau_id, 1.0)?.0
            }
            _ => energy_reg_loss(&mut tape, w, tau_ood, m_ood, 1.0)?.0,
        };
        let mut g = tape.backward(root)?;
        let n = inst.batch.unlabeled_weak.data().len();
        let mut take = |x| g.take(x).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; n]);
        let gw = take(xw);
        let gs = take(xs);
        out.push((gw, gs));
    }
    Ok(out)
}

fn stop_gradient_contracts() -> Outcome {
    let mut worst = 0.0f64;
    let mut hinge_active = 0;
    for seed in 0..100 {
        let inst = instance(seed).map_err(|e| e.to_string())?;
        let PseudoLabelRule::Energy { tau_id } = inst.plan.pseudo else {
            return Err("instance without an energy pseudo-label rule".into());
        };
        let (tau_ood, m_ood) = inst.plan.hinge.ok_or("instance without a hinge")?;
        let plan = |w| StepPlan { weights: w, ..inst.plan };

        let detached = param_grad(&inst, &plan(only(0.0, 1.0, 0.0)), None)?;
        let constant = param_grad(&inst, &plan(only(0.0, 1.0, 0.0)), Some(&inst.target))?;
        let d_s = max_abs_diff(&detached, &constant);
        ensure(d_s < 1e-12, || format!("seed {seed}: l_s differs from constant target by {d_s:e}"))?;

        let full = param_grad(&inst, &plan(only(1.0, 0.0, 0.0)), None)?;
        let oracle = pseudo_label_oracle(&inst, tau_id).map_err(|e| e.to_string())?;
        let d_p = max_abs_diff(&full, &oracle);
        ensure(d_p < 1e-12, || format!("seed {seed}: l_p differs from constant weak logits by {d_p:e}"))?;
        worst = worst.max(d_s).max(d_p);

        let grads = input_grads(&inst, tau_id, tau_ood, m_ood).map_err(|e| e.to_string())?;
        let zero = |v: &[f64]| v.iter().all(|&g| g == 0.0);
        ensure(zero(&grads[0].0) && zero(&grads[1].0), || {
            format!("seed {seed}: weak view receives gradient from l_s or l_p")
        })?;
        ensure(zero(&grads[2].1), || format!("seed {seed}: strong view receives gradient from l_e"))?;
        hinge_active += usize::from(!zero(&grads[2].0));
    }
    // The zero strong-view gradient means nothing if the hinge never reaches the inputs.
    ensure(hinge_active > 50, || format!("l_e reaches the weak view on only {hinge_active} instances"))?;
    Ok(format!(
        "max oracle diff {worst:.1e} over 100 instances, strong-view l_e gradient zero ({hinge_active} with weak-view gradient)"
    ))
}

fn energy_identities() -> Outcome {
    let mut rng = rng::stream(0, TAG, 3);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let c = rng.random_range(1..=12);
        let row: Vec<f64> = (0..c).map(|_| rng.random_range(-20.0..20.0)).collect();
        let shift = rng.random_range(-20.0..20.0);
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let d = (free_energy(&shifted, 1.0) - (free_energy(&row, 1.0) - shift)).abs();
        worst = worst.max(d);

        // The general inverse-temperature form at beta = 1 against the plain negative log-sum-exp.
        let beta = 1.0f64;
        let scaled: Vec<f64> = row.iter().map(|v| beta * v).collect();
        let general = -log_sum_exp(&scaled) / beta;
        let plain = -log_sum_exp(&row);
        ensure((general - plain).abs() < 1e-12, || format!("beta=1 forms differ on {row:?}"))?;
        ensure((free_energy(&row, 1.0) - plain).abs() < 1e-12, || format!("free_energy differs on {row:?}"))?;
    }
    ensure(worst < 1e-12, || format!("shift covariance error {worst:e}"))?;

    for c in 1..=20 {
        let s = free_energy_score(&Tensor::zeros(1, c), 1.0)[0];
        ensure((s + (c as f64).ln()).abs() < 1e-12, || format!("uniform logits C={c} give {s}"))?;
    }

    // The differentiable version used inside the losses agrees as well.
    let logits = Tensor::new(3, 4, (0..12).map(|i| (i as f64 * 0.7).sin() * 5.0).collect()).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone()).map_err(|e| e.to_string())?;
    let s = free_energy_var(&mut tape, l, 1.0).map_err(|e| e.to_string())?;
    let d = max_abs_diff(tape.value(s).data(), &free_energy_score(&logits, 1.0));
    ensure(d < 1e-12, || format!("tape free energy differs by {d:e}"))?;
    Ok(format!("10^4 rows, shift error {worst:.1e}"))
}

fn brute_force_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice = 0u128;
    for &o in ood {
        for &i in id {
            twice += if o > i {
                2
            } else if o == i {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * id.len() as u128 * ood.len() as u128) as f64
}

fn auroc_oracle() -> Outcome {
    let mut rng = rng::stream(0, TAG, 4);
    let mut tied = 0;
    for trial in 0..1000 {
        let n = rng.random_range(2..=200);
        let n_id = rng.random_range(1..n);
        let tie_heavy = trial % 2 == 1;
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            if tie_heavy {
                rng.random_range(0..5) as f64
            } else {
                rng.random_range(-3.0..3.0)
            }
        };
        let id: Vec<f64> = (0..n_id).map(|_| draw(&mut rng)).collect();
        let ood: Vec<f64> = (0..n - n_id).map(|_| draw(&mut rng)).collect();
        let fast = auroc(&id, &ood).map_err(|e| e.to_string())?;
        let slow = brute_force_auroc(&id, &ood);
        ensure(fast == slow, || format!("trial {trial}: rank {fast} vs pairs {slow}"))?;
        tied += usize::from(tie_heavy);
    }
    Ok(format!("1000 instances ({tied} tie-heavy) exactly equal"))
}

fn threshold_calibration() -> Outcome {
    let cfg = EnergyConfig::default();
    let hand = [-10.0, -8.0, -6.0, -4.0, -2.0];
    let t = calibrate_thresholds(&hand, &cfg).map_err(|e| e.to_string())?;
    let got = [t.tau_id, t.tau_ood, t.m_ood];
    let want = [-6.8, -0.8, 1.6];
    // The scales have no exact binary form, so agreement is to rounding error.
    ensure(max_abs_diff(&got, &want) < 1e-12, || format!("hand case gives {got:?}"))?;

    let mut rng = rng::stream(0, TAG, 5);
    let mut shuffled = hand.to_vec();
    for i in 0..100 {
        shuffled.shuffle(&mut rng);
        let s = calibrate_thresholds(&shuffled, &cfg).map_err(|e| e.to_string())?;
        ensure(s == t, || format!("shuffle {i} {shuffled:?} gives {s:?}"))?;
    }

    let flat = calibrate_thresholds(&[-3.25; 7], &cfg).map_err(|e| e.to_string())?;
    ensure([flat.tau_id, flat.tau_ood, flat.m_ood] == [-3.25; 3], || format!("equal scores give {flat:?}"))?;
    Ok(format!("{want:?} to {:.0e}, 100 shuffles, degenerate case", max_abs_diff(&got, &want)))
}

fn schedule_values() -> Outcome {
    let cfg = RunConfig::default();
    for k in 0..cfg.k_pre {
        ensure(lr_schedule(k, &cfg) == 0.03, || format!("eta({k}) = {}", lr_schedule(k, &cfg)))?;
    }
    ensure(lr_schedule(cfg.k_pre, &cfg) == cfg.eta0, || "eta(K_p) != eta0".into())?;
    let end = lr_schedule(cfg.k_total, &cfg);
    let want = cfg.eta0 * (7.0 / 8.0 * PI / 2.0).cos();
    ensure((end - want).abs() < 1e-12, || format!("eta(K) = {end}, expected {want}"))?;
    ensure((end - 0.0058527).abs() < 5e-8, || format!("eta(K) = {end}"))?;

    let scaled = RunConfig { eta0: 0.06, ..cfg };
    let ratio = lr_schedule(scaled.k_total, &scaled) / end;
    ensure((ratio - 2.0).abs() < 1e-12, || format!("eta0 scaling ratio {ratio}"))?;
    Ok(format!("eta(K) = {end:.7}"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sets = ["K=1500", "K_p=500", "eval_every=250"];
    let train = |name: &str, extra: &[&str]| -> Result<std::path::PathBuf, String> {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--out", path(&out), "--set"];
        args.extend_from_slice(&sets);
        args.extend_from_slice(extra);
        let o = sefoss(&args)?;
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
        Ok(out)
    };
    let a = train("a", &["--checkpoint-every", "700"])?;
    let b = train("b", &[])?;
    ensure(read(&a.join("metrics.csv"))? == read(&b.join("metrics.csv"))?, || {
        "metrics.csv differs between identical runs".into()
    })?;

    let mid = a.join("checkpoint_700.bin");
    let r = train("resumed", &["--resume", path(&mid)])?;
    ensure(read(&r.join("metrics.csv"))? == read(&a.join("metrics.csv"))?, || {
        "resumed metrics.csv differs".into()
    })?;
    ensure(read(&r.join("checkpoint.bin"))? == read(&a.join("checkpoint.bin"))?, || {
        "resumed final checkpoint differs".into()
    })?;
    Ok("repeat run and resume from step 700 of 1500 byte-identical".into())
}

fn run(cfg: &RunConfig) -> Result<sefoss_core::trainer::RunArtifacts, String> {
    run_experiment(cfg, None).map_err(|e| e.to_string())
}

/// Final evaluations of the default runs, shared by criteria 8 and 9.
struct Reference {
    sefoss: sefoss_core::trainer::EvalResult,
    fixmatch: sefoss_core::trainer::EvalResult,
    supervised: sefoss_core::trainer::EvalResult,
    secs: f64,
}

fn reference_runs() -> Result<Reference, String> {
    let start = Instant::now();
    let with_mode = |mode| RunConfig { mode, ..RunConfig::default() };
    let sefoss = run(&with_mode(Mode::Sefoss))?.final_eval;
    let fixmatch = run(&with_mode(Mode::FixmatchBaseline))?.final_eval;
    let supervised = run(&with_mode(Mode::Supervised))?.final_eval;
    Ok(Reference {
        sefoss,
        fixmatch,
        supervised,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn method_reproduction(r: &Result<Reference, String>) -> Outcome {
    let r = r.as_ref().map_err(Clone::clone)?;
    let detail = format!(
        "sefoss auroc {:.4} acc {:.4}, fixmatch auroc {:.4}, supervised acc {:.4}, {:.0}s",
        r.sefoss.auroc_energy, r.sefoss.acc_id, r.fixmatch.auroc_energy, r.supervised.acc_id, r.secs
    );
    ensure(r.sefoss.auroc_energy >= 0.90, || format!("(a) fails: {detail}"))?;
    ensure(r.sefoss.auroc_energy - r.fixmatch.auroc_energy >= 0.05, || format!("(b) fails: {detail}"))?;
    ensure(r.sefoss.acc_id >= r.supervised.acc_id, || format!("(c) fails: {detail}"))?;
    ensure(r.secs < 600.0, || format!("runtime fails: {detail}"))?;
    Ok(detail)
}

fn ablation_direction(r: &Result<Reference, String>) -> Outcome {
    let r = r.as_ref().map_err(Clone::clone)?;
    let cfg = RunConfig {
        use_lp: false,
        use_le: false,
        ..RunConfig::default()
    };
    let ls_only = run(&cfg)?.final_eval.auroc_energy;
    let full = r.sefoss.auroc_energy;
    let detail = format!("full {full:.4}, l_s only {ls_only:.4}");
    ensure(full >= ls_only, || detail.clone())?;
    Ok(detail)
}

fn pretraining_scores() -> Outcome {
    let base = RunConfig::default();
    let cfg = RunConfig {
        k_total: base.k_pre,
        ..base
    };
    let artifacts = run(&cfg)?;
    let last = artifacts.metrics.last().ok_or("no evaluation rows")?;
    let (e, c) = (last.eval.auroc_energy, last.eval.auroc_confidence);
    let detail = format!("K = K_p = {}: energy {e:.4}, confidence {c:.4}", cfg.k_total);
    ensure(e >= c - 0.02, || detail.clone())?;
    Ok(detail)
}

fn mask_monotonicity() -> Outcome {
    let mut rng = rng::stream(0, TAG, 11);
    for batch in 0..20 {
        let (n, c) = (64, 4);
        let data = (0..n * c).map(|_| rng.random_range(-6.0..6.0)).collect();
        let logits = Tensor::new(n, c, data).map_err(|e| e.to_string())?;
        let scores = free_energy_score(&logits, 1.0);
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min) - 0.5;
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 0.5;
        // Ascending grid of 50 thresholds spanning every score.
        let grid: Vec<f64> = (0..50).map(|i| lo + (hi - lo) * i as f64 / 49.0).collect();
        let count = |m: Vec<bool>| m.into_iter().filter(|&b| b).count();
        let inliers: Vec<usize> = grid.iter().rev().map(|&t| count(energy_inlier_mask(&logits, t, 1.0))).collect();
        let outliers: Vec<usize> = grid.iter().map(|&t| count(energy_outlier_mask(&logits, t, 1.0))).collect();
        ensure(inliers.windows(2).all(|w| w[1] <= w[0]), || format!("batch {batch}: inliers {inliers:?}"))?;
        ensure(outliers.windows(2).all(|w| w[1] <= w[0]), || format!("batch {batch}: outliers {outliers:?}"))?;
        ensure(inliers[0] == n && inliers[49] == 0 && outliers[0] == n && outliers[49] == 0, || {
            format!("batch {batch}: grid does not span the scores")
        })?;
    }
    Ok("20 batches, 50-point grids".into())
}

fn main() {
    let reference = reference_runs();
    let criteria: [(&str, Box<dyn Fn() -> Outcome + '_>); 11] = [
        ("gradient correctness", Box::new(gradient_correctness)),
        ("stop-gradient contracts", Box::new(stop_gradient_contracts)),
        ("energy-score identities", Box::new(energy_identities)),
        ("AUROC oracle equivalence", Box::new(auroc_oracle)),
        ("threshold calibration oracle", Box::new(threshold_calibration)),
        ("schedule values", Box::new(schedule_values)),
        ("determinism", Box::new(determinism)),
        ("qualitative method reproduction", Box::new(|| method_reproduction(&reference))),
        ("ablation direction", Box::new(|| ablation_direction(&reference))),
        ("pretraining energy vs confidence", Box::new(pretraining_scores)),
        ("mask-count monotonicity", Box::new(mask_monotonicity)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
