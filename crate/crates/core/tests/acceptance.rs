//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.
//!
//! Criteria 6-10 share one pinned smoke run (configs/smoke_pretrain.toml then
//! configs/smoke_faa.toml). Its checkpoints, datasets and reports are kept
//! under the cargo target tmp dir for inspection with the CLI.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use onestep_sr::datagen::{generate_dataset, write_dataset, Dataset, DegradationConfig, SceneConfig};
use onestep_sr::discriminator::relativistic_prob;
use onestep_sr::generator::Stage;
use onestep_sr::losses::{adv_d_loss, adv_g_loss, faa_weight, LossWeights};
use onestep_sr::metrics::{
    bilinear_baseline, fidelity_sweep, levenshtein, ned, noise_study, NoiseStudyConfig, PromptMode, SweepConfig,
};
use onestep_sr::numerics::{Rng, Tape, Tensor};
use onestep_sr::scheduler::{
    control_t, fit_shift, interpolate, one_step_update, sum_squared_error, timestep_to_t, velocity_target,
    FidelityWeight, NoiseSchedule, ANCHORS,
};
use onestep_sr::trainer::{load_checkpoint, save_checkpoint, write_loss_csv, Checkpoint, TrainConfig, Trainer};

type Outcome = Result<String, String>;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, n: usize, name: &str, start: Instant, outcome: Outcome) {
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                self.failures += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
}

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn scheduler_anchors() -> Outcome {
    let shift = fit_shift(&ANCHORS).map_err(err)?;
    let mut worst = 0.0f64;
    for (tau, t) in ANCHORS {
        worst = worst.max((timestep_to_t(tau, shift).map_err(err)? - t).abs());
    }
    let sse = sum_squared_error(&ANCHORS, shift);
    let msg = format!("shift {shift:.4}, worst anchor error {worst:.4}, SSE {sse:.2e}");
    check(worst <= 0.01 && sse < 3e-4, msg.clone(), msg)
}

fn one_step_algebra() -> Outcome {
    let t_p = NoiseSchedule::fitted(750).map_err(err)?.t_p();
    let mut rng = Rng::new(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x0 = Tensor::<f32>::randn(&[16, 48], 1.0, &mut rng);
        let eps = Tensor::<f32>::randn(&[16, 48], 1.0, &mut rng);
        let x = interpolate(&x0, &eps, t_p).map_err(err)?;
        let back = one_step_update(&x, &velocity_target(&x0, &eps).map_err(err)?, t_p).map_err(err)?;
        for (a, b) in back.data().iter().zip(x0.data()) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    check(worst <= 1e-6, format!("max error {worst:.2e} over 100 tensors"), format!("max error {worst:.2e}"))
}

fn control_mapping() -> Outcome {
    let t_p = NoiseSchedule::fitted(750).map_err(err)?.t_p();
    let one = FidelityWeight::new(1.0).map_err(err)?;
    let zero = FidelityWeight::new(0.0).map_err(err)?;
    let (c1, c0) = (control_t(one, t_p).map_err(err)?, control_t(zero, t_p).map_err(err)?);
    let w = LossWeights::default();
    let (w1, w0) = (faa_weight(one, w.lambda_min, w.lambda_max), faa_weight(zero, w.lambda_min, w.lambda_max));
    let msg = format!("t_c(1)={c1}, t_c(0)={c0} (t_p={t_p:.4}), w(1)={w1}, w(0)={w0}");
    check(c1 == 0.0 && c0 == t_p && w1 == 0.02 && w0 == 0.1, msg.clone(), msg)
}

fn relativistic_identities() -> Outcome {
    let mut worst_sum = 0.0f64;
    let mut worst_chance = 0.0f64;
    let mut swaps_exact = true;
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let a = Tensor::<f64>::randn(&[64], 2.0, &mut rng);
        let b = Tensor::<f64>::randn(&[64], 2.0, &mut rng);
        let tape = Tape::new();
        let (va, vb) = (tape.constant(&a), tape.constant(&b));
        for s in [va, vb] {
            let g = adv_g_loss(s, s).map_err(err)?.value().item();
            let d = adv_d_loss(s, s).map_err(err)?.value().item();
            worst_chance = worst_chance
                .max((g - std::f64::consts::LN_2).abs())
                .max((d - std::f64::consts::LN_2).abs());
        }
        let d = adv_d_loss(va, vb).map_err(err)?.value().item();
        let g = adv_g_loss(vb, va).map_err(err)?.value().item();
        swaps_exact &= d == g;
        let r = relativistic_prob(&a, &b).map_err(err)?;
        let rs = relativistic_prob(&b, &a).map_err(err)?;
        for (x, y) in r.data().iter().zip(rs.data()) {
            worst_sum = worst_sum.max((x + y - 1.0).abs());
        }
    }
    let msg = format!("|L - ln2| <= {worst_chance:.1e}, role swap exact: {swaps_exact}, |R(a,b)+R(b,a)-1| <= {worst_sum:.1e}");
    check(worst_chance < 1e-6 && swaps_exact && worst_sum < 1e-6, msg.clone(), msg)
}

fn gradient_oracle() -> Outcome {
    let mut worst = (0.0f64, "");
    let cases: Vec<_> = common::ops().into_iter().chain(common::losses()).collect();
    for case in &cases {
        let e = common::worst_error(case).map_err(|e| format!("{}: {e}", case.name))?;
        if e > worst.0 {
            worst = (e, case.name);
        }
    }
    let msg = format!(
        "{} ops and losses x {} seeds, worst relative error {:.2e} ({})",
        cases.len(),
        common::SEEDS,
        worst.0,
        worst.1
    );
    check(worst.0 < common::TOL, msg.clone(), msg)
}

fn ned_oracle() -> Outcome {
    fn oracle(a: &[u8], b: &[u8]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + c);
            }
        }
        d[a.len()][b.len()]
    }
    let mut rng = Rng::new(77);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let s = |rng: &mut Rng| -> Vec<u8> {
            let n = rng.below(15);
            (0..n).map(|_| b'a' + rng.below(6) as u8).collect()
        };
        let (a, b) = (s(&mut rng), s(&mut rng));
        if levenshtein(&a, &b) != oracle(&a, &b) {
            mismatches += 1;
        }
    }
    let v = ned(b"abc", b"abd");
    let msg = format!("{mismatches} mismatches in 1000 pairs, NED(abc, abd) = {v:.4}");
    check(mismatches == 0 && format!("{v:.4}") == "0.6667", msg.clone(), msg)
}

fn tiny(stage: Stage, iterations: usize) -> TrainConfig {
    TrainConfig {
        stage,
        iterations,
        batch_size: 2,
        grad_accum: 2,
        g_lr: 1e-3,
        d_lr: 1e-3,
        layers: 2,
        dim: 16,
        heads: 2,
        patch: 4,
        lora_rank: 2,
        lora_alpha: 2.0,
        t_embed_dim: 8,
        d_layers: 1,
        d_dim: 16,
        d_heads: 2,
        seed: 5,
        init_seed: 6,
        ..TrainConfig::default()
    }
}

fn max_param_gap(a: &Checkpoint<f64>, b: &Checkpoint<f64>) -> f64 {
    let stores = [(&a.gen.params, &b.gen.params), (&a.disc.params, &b.disc.params)];
    let mut worst = 0.0f64;
    for (x, y) in stores {
        for (name, t) in x.iter() {
            let u = y.get(name).expect("same parameter set");
            for (p, q) in t.data().iter().zip(u.data()) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    worst
}

fn history_gap(a: &[onestep_sr::trainer::LossRecord], b: &[onestep_sr::trainer::LossRecord]) -> f64 {
    let fields = |r: &onestep_sr::trainer::LossRecord| [r.flow, r.mse, r.perc, r.adv_g, r.adv_d, r.reg];
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| fields(x).into_iter().zip(fields(y)))
        .map(|(p, q)| match (p, q) {
            (Some(p), Some(q)) => (p - q).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

fn determinism(dir: &Path) -> Outcome {
    let data = generate_dataset(9, 6, &SceneConfig::default(), &DegradationConfig::default()).map_err(err)?;
    let items = &data.items;
    let mut notes = Vec::new();
    let mut ok = true;

    // identical reruns, both stages, 64-bit
    let run_pre = || -> Result<Trainer<f64>, String> {
        let mut t = Trainer::<f64>::new_pretrain(tiny(Stage::Pretrain, 10)).map_err(err)?;
        t.run(items, |_| {}).map_err(err)?;
        Ok(t)
    };
    let (p1, p2) = (run_pre()?, run_pre()?);
    let same_pre = p1.state.history == p2.state.history;
    let stage1 = p1.checkpoint().map_err(err)?;
    let run_faa = |iters: usize| -> Result<Trainer<f64>, String> {
        let mut t = Trainer::new_faa(tiny(Stage::Faa, iters), stage1.clone()).map_err(err)?;
        t.run(items, |_| {}).map_err(err)?;
        Ok(t)
    };
    let (f1, f2) = (run_faa(10)?, run_faa(10)?);
    let same_faa = f1.state.history == f2.state.history;
    ok &= same_pre && same_faa;
    notes.push(format!("reruns identical: pretrain {same_pre}, faa {same_faa}"));

    // save at 5, load, resume to 10
    for (label, full) in [("pretrain", &p1), ("faa", &f1)] {
        let mut half = match full.state.stage {
            Stage::Pretrain => Trainer::<f64>::new_pretrain(tiny(Stage::Pretrain, 5)).map_err(err)?,
            Stage::Faa => Trainer::new_faa(tiny(Stage::Faa, 5), stage1.clone()).map_err(err)?,
        };
        half.run(items, |_| {}).map_err(err)?;
        let ck_dir = dir.join(format!("resume_{label}"));
        save_checkpoint(&half.checkpoint().map_err(err)?, &ck_dir).map_err(err)?;
        let mut ck = load_checkpoint::<f64>(&ck_dir).map_err(err)?;
        ck.config.iterations = 10;
        let mut resumed = Trainer::resume(ck).map_err(err)?;
        resumed.run(items, |_| {}).map_err(err)?;
        let gap = max_param_gap(&resumed.checkpoint().map_err(err)?, &full.checkpoint().map_err(err)?);
        let hgap = history_gap(&resumed.state.history, &full.state.history);
        let same_len = resumed.state.history.len() == full.state.history.len();
        ok &= gap <= 1e-6 && hgap <= 1e-6 && same_len;
        notes.push(format!("{label} resume: param gap {gap:.1e}, loss gap {hgap:.1e}"));
    }
    let msg = notes.join("; ");
    check(ok, msg.clone(), msg)
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

struct Smoke {
    stage1: Checkpoint<f32>,
    stage1_dir: PathBuf,
    faa: Trainer<f32>,
    audit_200: Vec<String>,
    audit_end: Vec<String>,
    held: Dataset,
    minutes: f64,
}

fn smoke(dir: &Path) -> Result<Smoke, String> {
    let start = Instant::now();
    let scene = SceneConfig::default();
    let deg = DegradationConfig::default();
    let train = generate_dataset(0, 64, &scene, &deg).map_err(err)?;
    let held = generate_dataset(1, 16, &scene, &deg).map_err(err)?;
    write_dataset(&train, &dir.join("train")).map_err(err)?;
    write_dataset(&held, &dir.join("held")).map_err(err)?;

    let pre_cfg = TrainConfig::load(&config_path("smoke_pretrain.toml")).map_err(err)?;
    let faa_cfg = TrainConfig::load(&config_path("smoke_faa.toml")).map_err(err)?;
    let mut pre = Trainer::<f32>::new_pretrain(pre_cfg).map_err(err)?;
    pre.run(&train.items, |r| {
        if r.iteration % 1000 == 0 {
            eprintln!("  stage 1 iter {:>5} flow {:.4}", r.iteration, r.flow.unwrap_or(f64::NAN));
        }
    })
    .map_err(err)?;
    let stage1_dir = dir.join("stage1");
    save_checkpoint(&pre.checkpoint().map_err(err)?, &stage1_dir).map_err(err)?;
    write_loss_csv(&pre.state.history, &dir.join("stage1_loss.csv")).map_err(err)?;
    let stage1 = load_checkpoint::<f32>(&stage1_dir).map_err(err)?;

    let mut faa = Trainer::new_faa(faa_cfg, stage1.clone()).map_err(err)?;
    let mut audit_200 = Vec::new();
    let mut log = |r: &onestep_sr::trainer::LossRecord| {
        if r.iteration % 250 == 0 {
            eprintln!(
                "  stage 2 iter {:>5} mse {:.5} adv_g {:.4} adv_d {:.4} reg {:.2e}",
                r.iteration,
                r.mse.unwrap_or(f64::NAN),
                r.adv_g.unwrap_or(f64::NAN),
                r.adv_d.unwrap_or(f64::NAN),
                r.reg.unwrap_or(f64::NAN)
            );
        }
    };
    for _ in 0..200 {
        let r = faa.step(&train.items).map_err(err)?;
        log(&r);
    }
    let drifted = |t: &Trainer<f32>| -> Vec<String> {
        stage1
            .gen
            .frozen_parameters()
            .into_iter()
            .filter(|n| stage1.gen.params.get(n).ok().map(|x| x.data()) != t.gen.params.get(n).ok().map(|x| x.data()))
            .collect()
    };
    audit_200.extend(drifted(&faa));
    faa.run(&train.items, &mut log).map_err(err)?;
    let audit_end = drifted(&faa);
    save_checkpoint(&faa.checkpoint().map_err(err)?, &dir.join("stage2")).map_err(err)?;
    write_loss_csv(&faa.state.history, &dir.join("stage2_loss.csv")).map_err(err)?;
    Ok(Smoke {
        stage1,
        stage1_dir,
        faa,
        audit_200,
        audit_end,
        held,
        minutes: start.elapsed().as_secs_f64() / 60.0,
    })
}

fn frozen_audit(s: &Smoke) -> Outcome {
    let n = s.stage1.gen.frozen_parameters().len();
    let msg = format!(
        "{n} frozen tensors; drifted after 200 steps: {}, after {} steps: {} (reference {})",
        s.audit_200.len(),
        s.faa.state.iteration,
        s.audit_end.len(),
        s.stage1_dir.display()
    );
    check(s.audit_200.is_empty() && s.audit_end.is_empty(), msg.clone(), msg)
}

fn loss_calibration(s: &Smoke) -> Outcome {
    let h = &s.faa.state.history;
    let tail: Vec<f64> = h[h.len().saturating_sub(100)..].iter().filter_map(|r| r.adv_d).collect();
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let msg = format!("trailing-{} mean L_adv^D = {mean:.4} (ln 2 = 0.6931)", tail.len());
    check(tail.len() == 100 && mean < 0.6931, msg.clone(), msg)
}

fn end_to_end(s: &Smoke, dir: &Path) -> Outcome {
    let lattice = s.held.manifest.scene_config.lattice();
    let cfg = SweepConfig {
        f: vec![1.0],
        prompt: PromptMode::Both,
        seed: 0,
    };
    let mut rep = fidelity_sweep(&s.faa.gen, &s.faa.schedule, &s.held.items, &lattice, &cfg).map_err(err)?;
    rep.extend(bilinear_baseline(&s.held.items, &lattice).map_err(err)?);
    rep.write(dir, "acceptance_eval").map_err(err)?;
    let get = |study: &str, f: Option<f64>, prompt: bool| rep.find(study, f, None, None, prompt).ok_or("missing group");
    let base = get("bilinear", None, false)?;
    let without = get("sweep", Some(1.0), false)?;
    let with = get("sweep", Some(1.0), true)?;
    let gain = without.psnr - base.psnr;
    let msg = format!(
        "{:.1} min; held-out PSNR {:.3} dB vs bilinear {:.3} dB (gain {gain:+.3}, with prompt {:.3}); NED with {:.4} vs without {:.4}",
        s.minutes, without.psnr, base.psnr, with.psnr, with.ned, without.ned
    );
    check(
        gain >= 1.0 && with.psnr - base.psnr >= 1.0 && with.ned >= without.ned && s.minutes < 60.0,
        msg.clone(),
        msg,
    )
}

fn controllability(s: &Smoke, dir: &Path) -> Outcome {
    let lattice = s.held.manifest.scene_config.lattice();
    let cfg = SweepConfig {
        f: vec![1.0, 0.5, 0.0],
        prompt: PromptMode::Without,
        seed: 0,
    };
    let rep = fidelity_sweep(&s.faa.gen, &s.faa.schedule, &s.held.items, &lattice, &cfg).map_err(err)?;
    rep.write(dir, "acceptance_sweep").map_err(err)?;
    let aggs: Vec<_> = cfg
        .f
        .iter()
        .map(|&f| rep.find("sweep", Some(f), None, None, false).ok_or("missing group"))
        .collect::<Result<_, _>>()?;
    let mse: Vec<f64> = aggs.iter().map(|a| a.mse_to_lq.unwrap_or(f64::NAN)).collect();
    let psnr: Vec<f64> = aggs.iter().map(|a| a.psnr).collect();
    let monotone = mse[0] <= mse[1] && mse[1] <= mse[2];
    let best = psnr[0] >= psnr[1] && psnr[0] >= psnr[2];
    let msg = format!("f=1,0.5,0: MSE-to-LQ {mse:.5?}, PSNR {psnr:.3?}");
    check(monotone && best, msg.clone(), msg)
}

fn noise_levels(s: &Smoke, dir: &Path) -> Outcome {
    let scenes = generate_dataset(2, 32, &SceneConfig::default(), &DegradationConfig::default()).map_err(err)?;
    let lattice = scenes.manifest.scene_config.lattice();
    let cfg = NoiseStudyConfig {
        t_s: vec![0.90, 0.29],
        n_steps: 10,
        prompt: PromptMode::Both,
        seed: 0,
    };
    let rep = noise_study(&s.stage1.gen, &s.faa.schedule, &scenes.items, &lattice, &cfg).map_err(err)?;
    rep.write(dir, "acceptance_noise").map_err(err)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for variant in ["gt", "lq"] {
        for prompt in [false, true] {
            let hi = rep.find("noise", None, Some(0.90), Some(variant), prompt).ok_or("missing group")?;
            let lo = rep.find("noise", None, Some(0.29), Some(variant), prompt).ok_or("missing group")?;
            ok &= lo.psnr > hi.psnr;
            parts.push(format!(
                "{variant}{}: {:.2} > {:.2}",
                if prompt { "+prompt" } else { "" },
                lo.psnr,
                hi.psnr
            ));
        }
    }
    let msg = format!("32 scenes, PSNR at t_s=0.29 vs 0.90: {}", parts.join(", "));
    check(ok, msg.clone(), msg)
}

fn main() {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("artifact dir");
    let mut r = Report { failures: 0 };

    let t = Instant::now();
    r.line(1, "scheduler anchors", t, scheduler_anchors());
    let t = Instant::now();
    r.line(2, "one-step algebra", t, one_step_algebra());
    let t = Instant::now();
    r.line(3, "control mapping", t, control_mapping());
    let t = Instant::now();
    r.line(4, "relativistic identities", t, relativistic_identities());
    let t = Instant::now();
    r.line(5, "gradient oracle", t, gradient_oracle());

    let t = Instant::now();
    match smoke(&dir) {
        Ok(s) => {
            r.line(6, "frozen-prior audit", t, frozen_audit(&s));
            let t = Instant::now();
            r.line(7, "loss-curve calibration", t, loss_calibration(&s));
            let t = Instant::now();
            r.line(8, "end-to-end smoke", t, end_to_end(&s, &dir));
            let t = Instant::now();
            r.line(9, "controllability trend", t, controllability(&s, &dir));
            let t = Instant::now();
            r.line(10, "noise study", t, noise_levels(&s, &dir));
        }
        Err(e) => {
            for (n, name) in [
                (6, "frozen-prior audit"),
                (7, "loss-curve calibration"),
                (8, "end-to-end smoke"),
                (9, "controllability trend"),
                (10, "noise study"),
            ] {
                r.line(n, name, t, Err(format!("smoke run failed: {e}")));
            }
        }
    }

    let t = Instant::now();
    r.line(11, "NED oracle", t, ned_oracle());
    let t = Instant::now();
    r.line(12, "determinism and persistence", t, determinism(&dir));

    println!("artifacts: {}", dir.display());
    if r.failures > 0 {
        println!("{} criteria failed", r.failures);
        std::process::exit(1);
    }
    println!("all 12 criteria passed");
}
