//! Stage-1 flow-matching pretraining, stage-2 fidelity-aware adversarial
//! training, and checkpoints.

mod checkpoint;
mod config;

pub use checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use config::TrainConfig;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{encode, upsample_bilinear, Image, LatentGrid};
use crate::datagen::{vocab, DatasetItem, PromptTemplate};
use crate::discriminator::Discriminator;
use crate::error::{contract, Error, Result};
use crate::generator::{is_frozen, Generator, Stage};
use crate::losses::{
    adv_d_loss, adv_g_loss, feature_distance, flow_matching_loss, r1_penalty, r1_perturbation, total_d_loss,
    total_g_loss,
};
use crate::nn::ParamStore;
use crate::numerics::{rmsprop_step, Grads, Real, RmsPropConfig, RmsPropState, Rng, Tape, Tensor, Var};
use crate::scheduler::{control_t, interpolate, velocity_target, FidelityWeight, NoiseSchedule, NUM_TIMESTEPS};

/// Per-iteration means over the items of one optimizer step. Terms that do
/// not apply to the stage are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub flow: Option<f64>,
    pub mse: Option<f64>,
    pub perc: Option<f64>,
    pub adv_g: Option<f64>,
    pub adv_d: Option<f64>,
    pub reg: Option<f64>,
}

impl LossRecord {
    fn empty(iteration: u64) -> Self {
        Self {
            iteration,
            flow: None,
            mse: None,
            perc: None,
            adv_g: None,
            adv_d: None,
            reg: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub stage: Stage,
    /// Completed optimizer steps.
    pub iteration: u64,
    pub g_opt: IndexMap<String, RmsPropState<T>>,
    pub d_opt: IndexMap<String, RmsPropState<T>>,
    pub seed: u64,
    pub history: Vec<LossRecord>,
    /// Digest of the frozen generator parameters when stage 2 began.
    pub frozen_digest: Option<String>,
}

/// Everything a training run mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub state: TrainState<T>,
}

// purposes of derived random streams
const BATCH: u64 = 1;
const ITEM: u64 = 2;
const CONTROL_RESET: u64 = 3;

fn opt_states<T: Real>(store: &ParamStore<T>, names: &[String], cfg: RmsPropConfig) -> Result<IndexMap<String, RmsPropState<T>>> {
    names
        .iter()
        .map(|n| Ok((n.clone(), RmsPropState::new(store.get(n)?.shape(), cfg))))
        .collect()
}

/// SHA-256 over the names, shapes and bytes of every frozen generator tensor.
pub fn frozen_digest<T: Real>(gen: &Generator<T>) -> String {
    let mut h = Sha256::new();
    for (name, t) in gen.params.iter().filter(|(n, _)| is_frozen(n)) {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.size_of());
        for v in t.data() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-item randomness drawn up front so the step is a pure function of
/// `(seed, iteration, slot)`.
struct ItemDraw {
    template: PromptTemplate,
    keep_caption: bool,
    rng: Rng,
}

fn item_draw(cfg: &TrainConfig, seed: u64, iteration: u64, slot: usize) -> ItemDraw {
    let mut rng = Rng::new(seed).derive(&[ITEM, iteration, slot as u64]);
    let template = if rng.bernoulli(0.5) {
        PromptTemplate::Verbose
    } else {
        PromptTemplate::Terse
    };
    let keep_caption = rng.bernoulli(cfg.prompt_keep);
    ItemDraw {
        template,
        keep_caption,
        rng,
    }
}

/// Fidelity weight of item `slot` at `iteration`.
pub fn sample_fidelity(cfg: &TrainConfig, seed: u64, iteration: u64, slot: usize) -> FidelityWeight {
    let mut rng = Rng::new(seed).derive(&[ITEM, iteration, slot as u64, 0xF]);
    FidelityWeight::new(rng.uniform_in(cfg.f_low, cfg.f_high).clamp(0.0, 1.0)).expect("range validated")
}

/// Indices of the items used at `iteration`: a fresh shuffle, cycled if the
/// dataset is smaller than a step.
pub fn select_batch(cfg: &TrainConfig, seed: u64, iteration: u64, n_items: usize) -> Vec<usize> {
    let mut rng = Rng::new(seed).derive(&[BATCH, iteration]);
    let mut idx: Vec<usize> = (0..n_items).collect();
    for i in (1..n_items).rev() {
        idx.swap(i, rng.below(i + 1));
    }
    (0..cfg.items_per_step()).map(|k| idx[k % n_items]).collect()
}

pub fn caption_tokens(item: &DatasetItem, template: PromptTemplate, max_len: usize) -> Result<Vec<usize>> {
    vocab::encode(&item.scene.caption, template, max_len)
}

/// Latent of the bilinearly upsampled low-quality input.
pub fn lq_latent<T: Real>(lq: &Image, gt_size: (usize, usize), patch: usize) -> Result<LatentGrid<T>> {
    let factor = gt_size.0 / lq.height();
    if factor * lq.height() != gt_size.0 || factor * lq.width() != gt_size.1 {
        contract!("LQ {}x{} is not an integer fraction of {:?}", lq.height(), lq.width(), gt_size);
    }
    encode(&upsample_bilinear(lq, factor), patch)
}

struct GradAccum<T> {
    sums: IndexMap<String, Tensor<T>>,
}

impl<T: Real> GradAccum<T> {
    fn new() -> Self {
        Self {
            sums: IndexMap::new(),
        }
    }

    fn add(&mut self, grads: &Grads<T>, vars: &[(String, Var<'_, T>)]) -> Result<()> {
        for (name, v) in vars {
            let g = grads.wrt(*v);
            match self.sums.get_mut(name) {
                Some(s) => *s = s.add(&g)?,
                None => {
                    self.sums.insert(name.clone(), g);
                }
            }
        }
        Ok(())
    }

    fn apply(
        self,
        store: &mut ParamStore<T>,
        opt: &mut IndexMap<String, RmsPropState<T>>,
        lr: f64,
        items: usize,
    ) -> Result<()> {
        let inv = 1.0 / items as f64;
        for (name, state) in opt.iter_mut() {
            let g = match self.sums.get(name) {
                Some(s) => s.scale(inv),
                None => Tensor::zeros(state.square_avg.shape()),
            };
            rmsprop_step(store.get_mut(name)?, &g, state, lr)?;
        }
        Ok(())
    }
}

fn non_finite(what: &str, seed: u64, iteration: u64, slot: usize) -> Error {
    Error::NonFinite {
        op: what.into(),
        detail: format!("loss is not finite at iteration {iteration}, slot {slot} (seed {seed})"),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// One stage-1 step: per item draw a timestep and noise, regress the
/// velocity `eps - x0` on the text + prior network, average gradients over
/// `batch_size * grad_accum` items and apply RMSprop to every parameter.
pub fn pretrain_step<T: Real>(
    gen: &mut Generator<T>,
    items: &[&DatasetItem],
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<LossRecord> {
    if state.stage != Stage::Pretrain {
        contract!("pretrain_step called in stage {:?}", state.stage);
    }
    let patch = gen.config.patch;
    let max_len = gen.config.max_caption_len;
    let trainable: Vec<String> = state.g_opt.keys().cloned().collect();
    let mut acc = GradAccum::new();
    let mut losses = Vec::with_capacity(items.len());
    for (slot, item) in items.iter().enumerate() {
        let mut d = item_draw(cfg, state.seed, state.iteration, slot);
        let x0 = encode::<T>(&item.scene.image, patch)?;
        let tau = d.rng.below(NUM_TIMESTEPS);
        let t = schedule.t_at(tau);
        let eps = Tensor::randn(x0.tokens.shape(), 1.0, &mut d.rng);
        let x_t = interpolate(&x0.tokens, &eps, t)?;
        let target = velocity_target(&x0.tokens, &eps)?;
        let caption = if d.keep_caption {
            caption_tokens(item, d.template, max_len)?
        } else {
            vocab::empty(max_len)
        };

        let tape = Tape::new();
        let b = gen.bind(&tape, Some(Stage::Pretrain));
        let v = gen.velocity_on(&b, &tape, tape.constant(&x_t), None, t, &caption, (x0.grid_h, x0.grid_w), None)?;
        let loss = flow_matching_loss(v, tape.constant(&target))?;
        let lv = loss.value().item().as_f64();
        if !lv.is_finite() {
            return Err(non_finite("flow matching", state.seed, state.iteration, slot));
        }
        let grads = tape.backward(loss)?;
        let vars: Vec<(String, Var<'_, T>)> = trainable.iter().map(|n| Ok((n.clone(), b.get(n)?))).collect::<Result<_>>()?;
        acc.add(&grads, &vars)?;
        losses.push(lv);
    }
    acc.apply(&mut gen.params, &mut state.g_opt, cfg.g_lr, items.len())?;
    let mut rec = LossRecord::empty(state.iteration);
    rec.flow = Some(mean(&losses));
    state.iteration += 1;
    state.history.push(rec.clone());
    Ok(rec)
}

/// One stage-2 step. Per item: draw `f`, noise the upsampled LQ latent to
/// `t_p` (prior stream) and `(1 - f) t_p` (control stream) with independent
/// noise, predict `x_pred = x_tp - t_p v`, and compute the generator
/// objective (reconstruction + perceptual + weighted adversarial) and the
/// discriminator objective (adversarial on the detached prediction + R1).
/// Both networks are updated from the same items, generator first; the
/// frozen generator parameters are audited afterwards.
pub fn faa_train_step<T: Real>(
    gen: &mut Generator<T>,
    disc: &mut Discriminator<T>,
    items: &[&DatasetItem],
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<LossRecord> {
    if state.stage != Stage::Faa {
        contract!("faa_train_step called in stage {:?}", state.stage);
    }
    let patch = gen.config.patch;
    let max_len = gen.config.max_caption_len;
    let w = cfg.loss_weights();
    let t_p = schedule.t_p();
    let g_names: Vec<String> = state.g_opt.keys().cloned().collect();
    let d_names: Vec<String> = state.d_opt.keys().cloned().collect();
    let mut g_acc = GradAccum::new();
    let mut d_acc = GradAccum::new();
    let (mut l_mse, mut l_perc, mut l_advg, mut l_advd, mut l_reg) = (vec![], vec![], vec![], vec![], vec![]);

    for (slot, item) in items.iter().enumerate() {
        let mut d = item_draw(cfg, state.seed, state.iteration, slot);
        let f = sample_fidelity(cfg, state.seed, state.iteration, slot);
        let gt_size = (item.scene.image.height(), item.scene.image.width());
        let x_gt = encode::<T>(&item.scene.image, patch)?;
        let x_lq = lq_latent::<T>(&item.lq, gt_size, patch)?;
        let grid = (x_gt.grid_h, x_gt.grid_w);
        let eps_p = Tensor::randn(x_lq.tokens.shape(), 1.0, &mut d.rng);
        let x_tp = interpolate(&x_lq.tokens, &eps_p, t_p)?;
        let t_c = control_t(f, t_p)?;
        let x_tc = if t_c == 0.0 {
            x_lq.tokens.clone()
        } else {
            let eps_c = Tensor::randn(x_lq.tokens.shape(), 1.0, &mut d.rng);
            interpolate(&x_lq.tokens, &eps_c, t_c)?
        };
        let full_caption = caption_tokens(item, d.template, max_len)?;
        let g_caption = if d.keep_caption {
            full_caption.clone()
        } else {
            vocab::empty(max_len)
        };
        let delta = r1_perturbation(&x_gt.tokens, w.r1_variance, &mut d.rng);

        let tape = Tape::new();
        let gb = gen.bind(&tape, Some(Stage::Faa));
        let db = disc.bind(&tape, true);
        let xtp = tape.constant(&x_tp);
        let v = gen.velocity_on(&gb, &tape, xtp, Some((tape.constant(&x_tc), t_c)), t_p, &g_caption, grid, None)?;
        let x_pred = xtp.sub(v.scale(t_p))?;
        let gt = tape.constant(&x_gt.tokens);

        let mse = x_pred.mse(gt)?;
        let perc = feature_distance(&gen.features_on(&gb, &tape, x_pred, grid)?, &gen.features_on(&gb, &tape, gt, grid)?)?;
        let rec = mse.add(perc.scale(w.lambda1))?;
        let score = |x| disc.score_on(&db, &tape, x, grid, cfg.disc_t, &full_caption);
        let s_real = score(gt)?;
        let s_fake = score(x_pred)?;
        let adv_g = adv_g_loss(s_real, s_fake)?;
        let g_loss = total_g_loss(rec, adv_g, f, &w)?;

        let s_fake_d = score(x_pred.detach())?;
        let adv_d = adv_d_loss(s_real, s_fake_d)?;
        let s_pert = score(gt.add(tape.constant(&delta))?)?;
        let reg = r1_penalty(s_real, s_pert)?;
        let d_loss = total_d_loss(adv_d, reg, w.lambda2)?;

        let vals = [mse, perc, adv_g, adv_d, reg].map(|x| x.value().item().as_f64());
        if vals.iter().any(|x| !x.is_finite()) {
            return Err(non_finite("stage-2 objective", state.seed, state.iteration, slot));
        }
        let gvars: Vec<(String, Var<'_, T>)> = g_names.iter().map(|n| Ok((n.clone(), gb.get(n)?))).collect::<Result<_>>()?;
        let dvars: Vec<(String, Var<'_, T>)> = d_names.iter().map(|n| Ok((n.clone(), db.get(n)?))).collect::<Result<_>>()?;
        g_acc.add(&tape.backward(g_loss)?, &gvars)?;
        d_acc.add(&tape.backward(d_loss)?, &dvars)?;
        l_mse.push(vals[0]);
        l_perc.push(vals[1]);
        l_advg.push(vals[2]);
        l_advd.push(vals[3]);
        l_reg.push(vals[4]);
    }
    g_acc.apply(&mut gen.params, &mut state.g_opt, cfg.g_lr, items.len())?;
    d_acc.apply(&mut disc.params, &mut state.d_opt, cfg.d_lr, items.len())?;

    if let Some(expected) = &state.frozen_digest {
        let now = frozen_digest(gen);
        if &now != expected {
            return Err(Error::FrozenDrift(format!(
                "frozen generator parameters changed at iteration {} ({} != {})",
                state.iteration, now, expected
            )));
        }
    }
    let rec = LossRecord {
        iteration: state.iteration,
        flow: None,
        mse: Some(mean(&l_mse)),
        perc: Some(mean(&l_perc)),
        adv_g: Some(mean(&l_advg)),
        adv_d: Some(mean(&l_advd)),
        reg: Some(mean(&l_reg)),
    };
    state.iteration += 1;
    state.history.push(rec.clone());
    Ok(rec)
}

impl<T: Real> Trainer<T> {
    /// Fresh stage-1 run.
    pub fn new_pretrain(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.stage != Stage::Pretrain {
            return Err(Error::Config("new_pretrain needs stage = \"pretrain\"".into()));
        }
        let gen = Generator::init(config.generator(), config.init_seed)?;
        let disc = Discriminator::init(config.discriminator(), Rng::new(config.init_seed).split(1).key())?;
        let opt = RmsPropConfig {
            alpha: config.rmsprop_alpha,
            eps: config.rmsprop_eps,
        };
        let state = TrainState {
            stage: Stage::Pretrain,
            iteration: 0,
            g_opt: opt_states(&gen.params, &gen.trainable_parameters(Stage::Pretrain), opt)?,
            d_opt: IndexMap::new(),
            seed: config.seed,
            history: Vec::new(),
            frozen_digest: None,
        };
        Ok(Self {
            schedule: NoiseSchedule::fitted(config.prior_timestep)?,
            config,
            gen,
            disc,
            state,
        })
    }

    /// Stage-2 run starting from a stage-1 checkpoint. The checkpoint's
    /// generator is used as-is; its control stream already mirrors the prior.
    pub fn new_faa(config: TrainConfig, stage1: Checkpoint<T>) -> Result<Self> {
        config.validate()?;
        if config.stage != Stage::Faa {
            return Err(Error::Config("new_faa needs stage = \"faa\"".into()));
        }
        if stage1.state.stage != Stage::Pretrain {
            return Err(Error::Checkpoint("stage-2 training must start from a stage-1 checkpoint".into()));
        }
        if stage1.config.architecture_digest() != config.architecture_digest() {
            return Err(Error::Checkpoint("stage-1 checkpoint architecture differs from config".into()));
        }
        let opt = RmsPropConfig {
            alpha: config.rmsprop_alpha,
            eps: config.rmsprop_eps,
        };
        let gen = stage1.gen;
        let disc = stage1.disc;
        let state = TrainState {
            stage: Stage::Faa,
            iteration: 0,
            g_opt: opt_states(&gen.params, &gen.trainable_parameters(Stage::Faa), opt)?,
            d_opt: opt_states(&disc.params, &disc.parameter_names(), opt)?,
            seed: config.seed,
            history: Vec::new(),
            frozen_digest: Some(frozen_digest(&gen)),
        };
        Ok(Self {
            schedule: NoiseSchedule::fitted(config.prior_timestep)?,
            config,
            gen,
            disc,
            state,
        })
    }

    /// One optimizer step over the batch selected for the current iteration.
    pub fn step(&mut self, data: &[DatasetItem]) -> Result<LossRecord> {
        if data.is_empty() {
            contract!("training needs at least one item");
        }
        let idx = select_batch(&self.config, self.state.seed, self.state.iteration, data.len());
        let items: Vec<&DatasetItem> = idx.iter().map(|&i| &data[i]).collect();
        match self.state.stage {
            Stage::Pretrain => pretrain_step(&mut self.gen, &items, &mut self.state, &self.config, &self.schedule),
            Stage::Faa => faa_train_step(&mut self.gen, &mut self.disc, &items, &mut self.state, &self.config, &self.schedule),
        }
    }

    /// Steps until `config.iterations` are done, calling `log` after each.
    pub fn run(&mut self, data: &[DatasetItem], mut log: impl FnMut(&LossRecord)) -> Result<()> {
        while (self.state.iteration as usize) < self.config.iterations {
            let rec = self.step(data)?;
            log(&rec);
        }
        Ok(())
    }

    /// Generator as saved after stage 1: the control stream is re-copied
    /// from the trained prior and its LoRA pairs re-drawn (`B = 0`).
    pub fn stage1_generator(&self) -> Result<Generator<T>> {
        let mut g = self.gen.clone();
        g.reset_control(Rng::new(self.config.init_seed).split(CONTROL_RESET).key())?;
        Ok(g)
    }
}

/// Writes the loss history as CSV (`iteration,flow,mse,perc,adv_g,adv_d,reg`).
pub fn write_loss_csv(history: &[LossRecord], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
