//! The noise-level study on a pretrained generator and the fidelity-weight
//! sweep on a finetuned one, plus the bilinear baseline.

use serde::{Deserialize, Serialize};

use super::quality::{mse, ned, psnr, ssim};
use super::report::{MetricReport, MetricRow};
use crate::codec::{decode, encode, upsample_bilinear, Image};
use crate::datagen::{toy_ocr, vocab, DatasetItem, Lattice, PromptTemplate, FACTOR};
use crate::error::{contract, Result};
use crate::generator::{restore, Generator};
use crate::numerics::{Real, Rng, Tensor};
use crate::scheduler::{euler_denoise_from, interpolate, FidelityWeight, GridSpacing, NoiseSchedule};

/// Which caption conditions to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    With,
    Without,
    #[default]
    Both,
}

impl PromptMode {
    pub fn settings(self) -> &'static [bool] {
        match self {
            PromptMode::With => &[true],
            PromptMode::Without => &[false],
            PromptMode::Both => &[true, false],
        }
    }
}

/// Caption tokens used at evaluation time: terse template, or all padding.
pub fn eval_caption(item: &DatasetItem, with_prompt: bool, max_len: usize) -> Result<Vec<usize>> {
    if with_prompt {
        vocab::encode(&item.scene.caption, PromptTemplate::Terse, max_len)
    } else {
        Ok(vocab::empty(max_len))
    }
}

fn text_score(img: &Image, item: &DatasetItem, lattice: &Lattice) -> f64 {
    ned(&toy_ocr(img, lattice), &item.scene.caption)
}

/// Per-item noise seed shared by every setting so comparisons are paired.
fn item_rng(seed: u64, index: usize, label: u64) -> Rng {
    Rng::new(seed).derive(&[index as u64, label])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseStudyConfig {
    pub t_s: Vec<f64>,
    pub n_steps: usize,
    pub prompt: PromptMode,
    pub seed: u64,
}

/// Noises each clean input (GT, or the upsampled LQ) to `t_s`, denoises it
/// with the pretrained velocity in `n_steps` Euler steps, and scores the
/// result against that same clean input.
pub fn noise_study<T: Real>(
    gen: &Generator<T>,
    schedule: &NoiseSchedule,
    items: &[DatasetItem],
    lattice: &Lattice,
    cfg: &NoiseStudyConfig,
) -> Result<MetricReport> {
    let mut report = MetricReport::new(serde_json::to_value(cfg)?);
    let patch = gen.config.patch;
    for &t_s in &cfg.t_s {
        if !(0.0..=1.0).contains(&t_s) {
            contract!("t_s {t_s} outside [0, 1]");
        }
        for (i, item) in items.iter().enumerate() {
            let up = upsample_bilinear(&item.lq, FACTOR);
            for (label, variant, clean) in [(0u64, "gt", &item.scene.image), (1, "lq", &up)] {
                let x0 = encode::<T>(clean, patch)?;
                let eps = Tensor::randn(x0.tokens.shape(), 1.0, &mut item_rng(cfg.seed, i, label));
                let x_ts = interpolate(&x0.tokens, &eps, t_s)?;
                for &with in cfg.prompt.settings() {
                    let caption = eval_caption(item, with, gen.config.max_caption_len)?;
                    let out = euler_denoise_from(
                        |x, t| {
                            let lat = x0.with_tokens(x.clone())?;
                            Ok(gen.forward_pretrain(&lat, t, &caption)?.tokens)
                        },
                        &x_ts,
                        t_s,
                        cfg.n_steps,
                        schedule,
                        GridSpacing::Timestep,
                    )?;
                    let img = decode(&x0.with_tokens(out)?, patch)?;
                    report.rows.push(MetricRow {
                        id: item.id.clone(),
                        study: "noise".into(),
                        f: None,
                        t_s: Some(t_s),
                        variant: Some(variant.into()),
                        prompt: with,
                        psnr: psnr(&img, clean)?,
                        ssim: ssim(&img, clean)?,
                        ned: text_score(&img, item, lattice),
                        mse_to_lq: None,
                    });
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub f: Vec<f64>,
    pub prompt: PromptMode,
    pub seed: u64,
}

/// One-step restoration of every item at each fidelity weight.
pub fn fidelity_sweep<T: Real>(
    gen: &Generator<T>,
    schedule: &NoiseSchedule,
    items: &[DatasetItem],
    lattice: &Lattice,
    cfg: &SweepConfig,
) -> Result<MetricReport> {
    let weights = cfg
        .f
        .iter()
        .map(|&f| FidelityWeight::new(f))
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricReport::new(serde_json::to_value(cfg)?);
    for fw in weights {
        for (i, item) in items.iter().enumerate() {
            let up = upsample_bilinear(&item.lq, FACTOR);
            let seed = item_rng(cfg.seed, i, 2).key();
            for &with in cfg.prompt.settings() {
                let caption = eval_caption(item, with, gen.config.max_caption_len)?;
                let img = restore(gen, schedule, &item.lq, FACTOR, fw, &caption, seed)?;
                report.rows.push(MetricRow {
                    id: item.id.clone(),
                    study: "sweep".into(),
                    f: Some(fw.value()),
                    t_s: None,
                    variant: None,
                    prompt: with,
                    psnr: psnr(&img, &item.scene.image)?,
                    ssim: ssim(&img, &item.scene.image)?,
                    ned: text_score(&img, item, lattice),
                    mse_to_lq: Some(mse(&img, &up)?),
                });
            }
        }
    }
    Ok(report)
}

/// Scores the bilinear x4 upsampling of each LQ input against GT.
pub fn bilinear_baseline(items: &[DatasetItem], lattice: &Lattice) -> Result<MetricReport> {
    let mut report = MetricReport::new(serde_json::json!({ "baseline": "bilinear", "factor": FACTOR }));
    for item in items {
        let up = upsample_bilinear(&item.lq, FACTOR);
        report.rows.push(MetricRow {
            id: item.id.clone(),
            study: "bilinear".into(),
            f: None,
            t_s: None,
            variant: None,
            prompt: false,
            psnr: psnr(&up, &item.scene.image)?,
            ssim: ssim(&up, &item.scene.image)?,
            ned: text_score(&up, item, lattice),
            mse_to_lq: Some(0.0),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_items, DegradationConfig, SceneConfig};
    use crate::generator::GeneratorConfig;

    fn setup() -> (Generator<f64>, NoiseSchedule, Vec<DatasetItem>, Lattice) {
        let cfg = GeneratorConfig {
            layers: 2,
            dim: 16,
            heads: 2,
            patch: 4,
            ..GeneratorConfig::default()
        };
        let scene = SceneConfig::default();
        let items = generate_items(3, 0, 2, &scene, &DegradationConfig::default()).unwrap();
        (
            Generator::init(cfg, 5).unwrap(),
            NoiseSchedule::fitted(750).unwrap(),
            items,
            scene.lattice(),
        )
    }

    #[test]
    fn zero_noise_returns_inputs() {
        let (gen, sched, items, lat) = setup();
        let cfg = NoiseStudyConfig {
            t_s: vec![0.0],
            n_steps: 3,
            prompt: PromptMode::Without,
            seed: 1,
        };
        let rep = noise_study(&gen, &sched, &items, &lat, &cfg).unwrap();
        assert_eq!(rep.rows.len(), 4);
        assert!(rep.rows.iter().all(|r| r.psnr == 99.0));
        assert!(rep.rows.iter().filter(|r| r.variant.as_deref() == Some("gt")).all(|r| r.ned == 1.0));
    }

    #[test]
    fn sweep_rows_and_range_check() {
        let (gen, sched, items, lat) = setup();
        let cfg = SweepConfig {
            f: vec![1.0, 0.0],
            prompt: PromptMode::Both,
            seed: 1,
        };
        let rep = fidelity_sweep(&gen, &sched, &items, &lat, &cfg).unwrap();
        assert_eq!(rep.rows.len(), 8);
        for r in &rep.rows {
            assert!((0.0..=1.0).contains(&r.ned) && (-1.0..=1.0).contains(&r.ssim) && r.psnr >= 0.0);
        }
        let bad = SweepConfig { f: vec![1.5], ..cfg };
        assert!(fidelity_sweep(&gen, &sched, &items, &lat, &bad).is_err());
    }

    #[test]
    fn baseline_scores_bilinear() {
        let (_, _, items, lat) = setup();
        let rep = bilinear_baseline(&items, &lat).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert!(rep.rows[0].psnr > 10.0);
    }
}
