//! One-step restoration at several fidelity weights, scored against the
//! ground truth and the bilinear baseline, plus the noise-level study on the
//! prior. Pass a stage-2 checkpoint directory to use a trained model;
//! otherwise a freshly initialized tiny generator is used, which only shows
//! the mechanics.

use onestep_sr::datagen::{generate_dataset, DegradationConfig, SceneConfig};
use onestep_sr::generator::{Generator, GeneratorConfig};
use onestep_sr::metrics::{bilinear_baseline, fidelity_sweep, noise_study, NoiseStudyConfig, PromptMode, SweepConfig};
use onestep_sr::scheduler::NoiseSchedule;
use onestep_sr::trainer::load_checkpoint;

fn main() -> onestep_sr::Result<()> {
    let gen = match std::env::args().nth(1) {
        Some(dir) => load_checkpoint::<f32>(dir.as_ref())?.gen,
        None => Generator::init(
            GeneratorConfig {
                layers: 2,
                dim: 32,
                patch: 4,
                ..GeneratorConfig::default()
            },
            0,
        )?,
    };
    let schedule = NoiseSchedule::fitted(750)?;
    let held = generate_dataset(1, 8, &SceneConfig::default(), &DegradationConfig::default())?;
    let lattice = held.manifest.scene_config.lattice();

    let mut report = fidelity_sweep(
        &gen,
        &schedule,
        &held.items,
        &lattice,
        &SweepConfig {
            f: vec![1.0, 0.5, 0.0],
            prompt: PromptMode::Both,
            seed: 0,
        },
    )?;
    report.extend(bilinear_baseline(&held.items, &lattice)?);
    report.extend(noise_study(
        &gen,
        &schedule,
        &held.items,
        &lattice,
        &NoiseStudyConfig {
            t_s: vec![0.9, 0.29],
            n_steps: 10,
            prompt: PromptMode::Without,
            seed: 0,
        },
    )?);
    for a in report.aggregates() {
        println!(
            "{:<9} f={:<5} t_s={:<5} {:<4} prompt={:<5} psnr {:>6.2}  ssim {:.3}  ned {:.3}",
            a.study,
            a.f.map_or("-".into(), |f| f.to_string()),
            a.t_s.map_or("-".into(), |t| t.to_string()),
            a.variant.clone().unwrap_or_default(),
            a.prompt,
            a.psnr,
            a.ssim,
            a.ned
        );
    }
    Ok(())
}
