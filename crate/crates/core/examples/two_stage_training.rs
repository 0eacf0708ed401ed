//! A tiny two-stage run: flow-matching pretraining of the prior, then
//! adapter finetuning with the discriminator. Saves both checkpoints and
//! shows that a resumed run continues bit-exactly.
//!
//!     cargo run --example two_stage_training -- /tmp/tiny

use onestep_sr::datagen::{generate_dataset, DegradationConfig, SceneConfig};
use onestep_sr::generator::Stage;
use onestep_sr::trainer::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};

fn config(stage: Stage, iterations: usize) -> TrainConfig {
    TrainConfig {
        stage,
        iterations,
        batch_size: 4,
        grad_accum: 1,
        g_lr: 1e-3,
        d_lr: 1e-4,
        layers: 2,
        dim: 32,
        heads: 2,
        patch: 4,
        lora_rank: 4,
        lora_alpha: 4.0,
        t_embed_dim: 16,
        d_layers: 1,
        d_dim: 32,
        d_heads: 2,
        ..TrainConfig::default()
    }
}

fn main() -> onestep_sr::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("two_stage_training"));
    let data = generate_dataset(0, 16, &SceneConfig::default(), &DegradationConfig::default())?;

    let mut pre = Trainer::<f32>::new_pretrain(config(Stage::Pretrain, 60))?;
    pre.run(&data.items, |r| {
        if r.iteration % 20 == 0 {
            println!("stage 1  iter {:>3}  flow {:.4}", r.iteration, r.flow.unwrap_or(f64::NAN));
        }
    })?;
    save_checkpoint(&pre.checkpoint()?, &out.join("stage1"))?;
    let stage1 = load_checkpoint::<f32>(&out.join("stage1"))?;

    let mut faa = Trainer::new_faa(config(Stage::Faa, 20), stage1.clone())?;
    faa.run(&data.items, |r| {
        if r.iteration % 5 == 0 {
            println!(
                "stage 2  iter {:>3}  mse {:.4}  adv_g {:.4}  adv_d {:.4}",
                r.iteration,
                r.mse.unwrap_or(f64::NAN),
                r.adv_g.unwrap_or(f64::NAN),
                r.adv_d.unwrap_or(f64::NAN)
            );
        }
    })?;
    save_checkpoint(&faa.checkpoint()?, &out.join("stage2"))?;

    // 20 more steps straight through, versus save/load/resume.
    let mut resumed = Trainer::resume({
        let mut ck = load_checkpoint::<f32>(&out.join("stage2"))?;
        ck.config.iterations = 40;
        ck
    })?;
    resumed.run(&data.items, |_| {})?;
    let mut straight = Trainer::new_faa(config(Stage::Faa, 40), stage1)?;
    straight.run(&data.items, |_| {})?;
    println!(
        "resumed run matches uninterrupted run: {}",
        resumed.state.history == straight.state.history && resumed.gen.params == straight.gen.params
    );
    println!("checkpoints in {}", out.display());
    Ok(())
}
