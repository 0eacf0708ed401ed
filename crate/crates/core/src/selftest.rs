//! Fast invariant checks behind the `selftest` command.

use crate::codec::{decode, encode, Image};
use crate::datagen::{generate_items, render_scene, toy_ocr, DegradationConfig, SceneConfig};
use crate::error::Result;
use crate::losses::{adv_d_loss, adv_g_loss, faa_weight, relativistic, LossWeights};
use crate::metrics::{levenshtein, ned};
use crate::numerics::{finite_diff_check, Rng, Tape, Tensor};
use crate::scheduler::{
    control_t, fit_shift, interpolate, one_step_update, sum_squared_error, timestep_to_t, velocity_target,
    FidelityWeight, NoiseSchedule, ANCHORS,
};

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> std::result::Result<(), String>,
}

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn s<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn anchors() -> std::result::Result<(), String> {
    let shift = s(fit_shift(&ANCHORS))?;
    for (tau, t) in ANCHORS {
        let got = s(timestep_to_t(tau, shift))?;
        ensure((got - t).abs() <= 0.01, format!("tau {tau}: {got} vs {t}"))?;
    }
    let sse = sum_squared_error(&ANCHORS, shift);
    ensure(sse < 3e-4, format!("fit residual {sse}"))
}

fn one_step() -> std::result::Result<(), String> {
    let t_p = s(NoiseSchedule::fitted(750))?.t_p();
    let mut rng = Rng::new(11);
    for _ in 0..20 {
        let x0 = Tensor::<f64>::randn(&[4, 12], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[4, 12], 1.0, &mut rng);
        let x = s(interpolate(&x0, &eps, t_p))?;
        let back = s(one_step_update(&x, &s(velocity_target(&x0, &eps))?, t_p))?;
        let err = back.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(err < 1e-6, format!("round trip error {err}"))?;
    }
    Ok(())
}

fn endpoints() -> std::result::Result<(), String> {
    let t_p = s(NoiseSchedule::fitted(750))?.t_p();
    let one = s(FidelityWeight::new(1.0))?;
    let zero = s(FidelityWeight::new(0.0))?;
    ensure(s(control_t(one, t_p))? == 0.0 && s(control_t(zero, t_p))? == t_p, "control_t endpoints")?;
    let w = LossWeights::default();
    ensure(
        faa_weight(one, w.lambda_min, w.lambda_max) == 0.02 && faa_weight(zero, w.lambda_min, w.lambda_max) == 0.1,
        "faa_weight endpoints",
    )
}

fn relativistic_identities() -> std::result::Result<(), String> {
    let tape = Tape::<f64>::new();
    let mut rng = Rng::new(5);
    let a = tape.constant(&Tensor::randn(&[16], 1.0, &mut rng));
    let b = tape.constant(&Tensor::randn(&[16], 1.0, &mut rng));
    let eq = s(adv_g_loss(a, a))?.value().item();
    ensure((eq - std::f64::consts::LN_2).abs() < 1e-6, format!("equal scores give {eq}"))?;
    let d = s(adv_d_loss(a, b))?.value().item();
    let g = s(adv_g_loss(b, a))?.value().item();
    ensure(d == g, format!("role swap {d} vs {g}"))?;
    let sum = s(s(relativistic(a, b))?.add(s(relativistic(b, a))?))?.value();
    ensure(sum.data().iter().all(|v| (v - 1.0).abs() < 1e-6), "R(a,b) + R(b,a) != 1")
}

fn gradients() -> std::result::Result<(), String> {
    let mut rng = Rng::new(3);
    let x = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
    let err = s(finite_diff_check(
        |t, v| {
            let w = t.constant(&w);
            Ok(v.matmul(w)?.layer_norm(1e-6).softmax().gelu().square().mean())
        },
        &x,
        1e-5,
    ))?;
    ensure(err < 1e-4, format!("relative error {err}"))
}

fn edit_distance() -> std::result::Result<(), String> {
    ensure(levenshtein(b"kitten", b"sitting") == 3, "kitten/sitting")?;
    let v = ned(b"abc", b"abd");
    ensure((v - 0.6667).abs() < 1e-4, format!("abc/abd gives {v}"))?;
    ensure(ned::<u8>(b"", b"") == 1.0 && ned(b"", b"abc") == 0.0, "empty cases")
}

fn codec_and_ocr() -> std::result::Result<(), String> {
    let cfg = SceneConfig::default();
    for seed in 0..10 {
        let scene = s(render_scene(seed, &cfg))?;
        let back: Image = s(decode(&s(encode::<f64>(&scene.image, 4))?, 4))?;
        ensure(back == scene.image, "codec round trip")?;
        ensure(toy_ocr(&scene.image, &cfg.lattice()) == scene.caption, format!("ocr misread seed {seed}"))?;
    }
    Ok(())
}

fn frozen_prior() -> std::result::Result<(), String> {
    use crate::generator::Stage;
    use crate::trainer::{TrainConfig, Trainer};
    let cfg = TrainConfig {
        iterations: 2,
        batch_size: 2,
        grad_accum: 1,
        layers: 2,
        dim: 16,
        heads: 2,
        patch: 4,
        d_layers: 1,
        d_dim: 16,
        d_heads: 2,
        g_lr: 1e-2,
        d_lr: 1e-2,
        ..TrainConfig::default()
    };
    let items = s(generate_items(1, 0, 4, &SceneConfig::default(), &DegradationConfig::default()))?;
    let mut pre = s(Trainer::<f32>::new_pretrain(cfg.clone()))?;
    s(pre.run(&items, |_| {}))?;
    let ck = s(pre.checkpoint())?;
    let before = ck.gen.clone();
    let mut faa = s(Trainer::new_faa(TrainConfig { stage: Stage::Faa, ..cfg }, ck))?;
    s(faa.run(&items, |_| {}))?;
    let drift: Vec<_> = before
        .frozen_parameters()
        .into_iter()
        .filter(|n| before.params.get(n).ok().map(|t| t.data()) != faa.gen.params.get(n).ok().map(|t| t.data()))
        .collect();
    ensure(drift.is_empty(), format!("drifted: {drift:?}"))
}

pub const CHECKS: &[Check] = &[
    Check { name: "scheduler anchors", run: anchors },
    Check { name: "one-step algebra", run: one_step },
    Check { name: "fidelity endpoints", run: endpoints },
    Check { name: "relativistic identities", run: relativistic_identities },
    Check { name: "finite-difference gradients", run: gradients },
    Check { name: "edit distance", run: edit_distance },
    Check { name: "codec and toy OCR", run: codec_and_ocr },
    Check { name: "frozen prior", run: frozen_prior },
];

/// Runs every check, printing one line each; returns the number of failures.
pub fn run_all(mut out: impl std::io::Write) -> usize {
    let mut failed = 0;
    for c in CHECKS {
        match (c.run)() {
            Ok(()) => {
                let _ = writeln!(out, "ok    {}", c.name);
            }
            Err(e) => {
                failed += 1;
                let _ = writeln!(out, "FAIL  {}: {e}", c.name);
            }
        }
    }
    failed
}
