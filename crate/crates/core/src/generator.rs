//! Multi-stream diffusion transformer.
//!
//! Streams `text`, `prior` and `control` keep separate projections and MLPs
//! but attend jointly over the concatenation of their tokens. Each visual
//! stream is conditioned on its own timestep through adaptive layer norm;
//! the text stream uses the prior timestep. The velocity head reads the
//! prior-stream tokens. Stage 1 runs text + prior only.

use serde::{Deserialize, Serialize};

use crate::codec::{decode, encode, token_dim, upsample_bilinear, Image, LatentGrid};
use crate::datagen::vocab;
use crate::error::{contract, Result};
use crate::nn::{attention, grid_positions, pad_bias, timestep_features, Bound, ParamStore, Rope, LN_EPS};
use crate::numerics::{Real, Rng, Tape, Tensor, Var};
use crate::scheduler::{control_t, interpolate, one_step_update, FidelityWeight, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub t_embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 64,
            heads: 4,
            patch: 2,
            vocab_size: vocab::SIZE,
            max_caption_len: vocab::max_len(16),
            lora_rank: 8,
            lora_alpha: 8.0,
            t_embed_dim: 32,
            mlp_ratio: 2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.patch == 0 {
            contract!("layers, dim, heads and patch must be positive");
        }
        if self.dim % self.heads != 0 || (self.dim / self.heads) % 4 != 0 {
            contract!("dim {} must split into {} heads of a multiple of 4", self.dim, self.heads);
        }
        if self.dim % 4 != 0 || self.t_embed_dim % 2 != 0 || self.t_embed_dim == 0 {
            contract!("dim must be a multiple of 4 and t_embed_dim even");
        }
        if self.lora_rank == 0 {
            contract!("LoRA rank must be at least 1");
        }
        if self.vocab_size == 0 || self.max_caption_len == 0 || self.mlp_ratio == 0 {
            contract!("vocab, caption length and mlp ratio must be positive");
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        token_dim(self.patch)
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Faa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stream {
    Text,
    Prior,
    Control,
}

impl Stream {
    fn name(self) -> &'static str {
        match self {
            Stream::Text => "text",
            Stream::Prior => "prior",
            Stream::Control => "control",
        }
    }
}

pub fn is_lora(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Frozen in stage 2: everything except the LoRA pairs.
pub fn is_frozen(name: &str) -> bool {
    !is_lora(name)
}

/// Per-layer linear names of a stream; the last layer of a non-prior stream
/// only contributes keys and values.
fn stream_linears(cfg: &GeneratorConfig, s: Stream, layer: usize) -> Vec<(&'static str, usize, usize)> {
    let d = cfg.dim;
    // Only the prior stream issues queries at the last layer.
    if s != Stream::Prior && layer + 1 == cfg.layers {
        return vec![("mod", d, 6 * d), ("k", d, d), ("v", d, d)];
    }
    vec![
        ("mod", d, 6 * d),
        ("q", d, d),
        ("k", d, d),
        ("v", d, d),
        ("o", d, d),
        ("mlp1", d, cfg.mlp_ratio * d),
        ("mlp2", cfg.mlp_ratio * d, d),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
}

/// Hidden states and keys/values recorded during a forward pass.
pub type Trace<T> = Vec<(String, Tensor<T>)>;

struct StreamIn<'t, T> {
    stream: Stream,
    h: Var<'t, T>,
    t: f64,
}

impl<T: Real> Generator<T> {
    /// Deterministic initialization; the control stream starts as a copy of
    /// the prior stream and every LoRA `B` is zero.
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut p = ParamStore::new();
        let (d, te, td) = (config.dim, config.t_embed_dim, config.token_dim());
        let lin_std = |inp: usize| 1.0 / (inp as f64).sqrt();
        p.linear("t_embed.l1", te, d, lin_std(te), &mut rng);
        p.linear("t_embed.l2", d, d, lin_std(d), &mut rng);
        p.insert("text.embed", Tensor::randn(&[config.vocab_size, d], 0.5, &mut rng));
        p.insert("text.pos", Tensor::randn(&[config.max_caption_len, d], 0.5, &mut rng));
        p.linear("prior.in", td, d, lin_std(td), &mut rng);
        for layer in 0..config.layers {
            for s in [Stream::Text, Stream::Prior] {
                for (lin, i, o) in stream_linears(&config, s, layer) {
                    let std = if lin == "mod" { 0.02 } else { lin_std(i) };
                    p.linear(&format!("layer{layer}.{}.{lin}", s.name()), i, o, std, &mut rng);
                }
            }
        }
        p.linear("final.prior.mod", d, 2 * d, 0.02, &mut rng);
        p.linear("head", d, td, 0.02, &mut rng);
        let mut g = Self { config, params: p };
        g.reset_control(rng.next_u64())?;
        Ok(g)
    }

    fn control_linears(&self) -> Vec<(String, usize, usize)> {
        let mut v = vec![("control.in".to_string(), self.config.token_dim(), self.config.dim)];
        for layer in 0..self.config.layers {
            for (lin, i, o) in stream_linears(&self.config, Stream::Control, layer) {
                v.push((format!("layer{layer}.control.{lin}"), i, o));
            }
        }
        v
    }

    /// Copies prior-stream weights into the control stream and re-draws the
    /// LoRA pairs (`A` random, `B` zero).
    pub fn reset_control(&mut self, seed: u64) -> Result<()> {
        let mut rng = Rng::new(seed);
        let r = self.config.lora_rank;
        for (name, i, o) in self.control_linears() {
            let src = name.replacen("control", "prior", 1);
            for suffix in ["w", "b"] {
                let t = self.params.get(&format!("{src}.{suffix}"))?.clone();
                self.params.insert(format!("{name}.{suffix}"), t);
            }
            self.params.insert(
                format!("{name}.lora_a"),
                Tensor::randn(&[i, r], 1.0 / (i as f64).sqrt(), &mut rng),
            );
            self.params.insert(format!("{name}.lora_b"), Tensor::zeros(&[r, o]));
        }
        Ok(())
    }

    /// Parameter names updated in `stage`, in store order.
    pub fn trainable_parameters(&self, stage: Stage) -> Vec<String> {
        self.params
            .names()
            .filter(|n| stage == Stage::Pretrain || is_lora(n))
            .cloned()
            .collect()
    }

    pub fn frozen_parameters(&self) -> Vec<String> {
        self.params.names().filter(|n| is_frozen(n)).cloned().collect()
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, stage: Option<Stage>) -> Bound<'t, T> {
        match stage {
            None => Bound::new(tape, &self.params, |_| false),
            Some(Stage::Pretrain) => Bound::new(tape, &self.params, |_| true),
            Some(Stage::Faa) => Bound::new(tape, &self.params, is_lora),
        }
    }

    fn check_caption(&self, caption: &[usize]) -> Result<()> {
        if caption.len() != self.config.max_caption_len {
            contract!(
                "caption has {} tokens, expected {} (pad to length)",
                caption.len(),
                self.config.max_caption_len
            );
        }
        if let Some(&t) = caption.iter().find(|&&t| t >= self.config.vocab_size) {
            contract!("token {} outside vocabulary of {}", t, self.config.vocab_size);
        }
        Ok(())
    }

    fn check_grid(&self, x: &LatentGrid<T>) -> Result<()> {
        if x.dim() != self.config.token_dim() {
            contract!(
                "latent token dim {} does not match patch {}",
                x.dim(),
                self.config.patch
            );
        }
        Ok(())
    }

    fn t_embed<'t>(&self, b: &Bound<'t, T>, tape: &'t Tape<T>, t: f64) -> Result<Var<'t, T>> {
        let f = tape
            .constant(&timestep_features(t, self.config.t_embed_dim))
            .reshape(&[1, self.config.t_embed_dim])?;
        let h = b.linear("t_embed.l1", f, None)?.silu();
        Ok(b.linear("t_embed.l2", h, None)?.silu())
    }

    fn embed_visual<'t>(
        &self,
        b: &Bound<'t, T>,
        tape: &'t Tape<T>,
        s: Stream,
        tokens: Var<'t, T>,
        grid: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let lora = (s == Stream::Control).then(|| self.config.lora_scale());
        let pos = tape.constant(&grid_positions(grid.0, grid.1, self.config.dim));
        b.linear(&format!("{}.in", s.name()), tokens, lora)?.add(pos)
    }

    fn embed_text<'t>(&self, b: &Bound<'t, T>, tape: &'t Tape<T>, caption: &[usize]) -> Result<Var<'t, T>> {
        tape.embedding(b.get("text.embed")?, caption)?.add(b.get("text.pos")?)
    }

    /// Runs `layers` transformer blocks and returns the final hidden states
    /// per stream.
    fn blocks<'t>(
        &self,
        b: &Bound<'t, T>,
        tape: &'t Tape<T>,
        mut streams: Vec<StreamIn<'t, T>>,
        key_bias: Option<Var<'t, T>>,
        rope: &Rope<T>,
        layers: usize,
        mut trace: Option<&mut Trace<T>>,
    ) -> Result<Vec<Var<'t, T>>> {
        let d = self.config.dim;
        let full_depth = layers == self.config.layers;
        let mut conds = Vec::new();
        for s in &streams {
            conds.push(self.t_embed(b, tape, s.t)?);
        }
        for layer in 0..layers {
            let last = full_depth && layer + 1 == self.config.layers;
            let mut qs = Vec::new();
            let mut ks = Vec::new();
            let mut vs = Vec::new();
            let mut mods = Vec::new();
            for (s, cond) in streams.iter().zip(&conds) {
                let lora = (s.stream == Stream::Control).then(|| self.config.lora_scale());
                let pre = format!("layer{layer}.{}", s.stream.name());
                let m = b.linear(&format!("{pre}.mod"), *cond, lora)?.reshape(&[6 * d])?;
                let chunk = |i: usize| m.narrow(0, i * d, d);
                let a = s
                    .h
                    .layer_norm(LN_EPS)
                    .mul(chunk(1)?.add_scalar(1.0))?
                    .add(chunk(0)?)?;
                let k = b.linear(&format!("{pre}.k"), a, lora)?;
                let v = b.linear(&format!("{pre}.v"), a, lora)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.push((format!("{pre}.k"), k.value()));
                    tr.push((format!("{pre}.v"), v.value()));
                }
                let visual = s.stream != Stream::Text;
                if !last || s.stream == Stream::Prior {
                    let q = b.linear(&format!("{pre}.q"), a, lora)?;
                    qs.push(if visual { rope.apply(tape, q)? } else { q });
                }
                ks.push(if visual { rope.apply(tape, k)? } else { k });
                vs.push(v);
                mods.push(m);
            }
            let q = tape.concat(&qs, 0)?;
            let k = tape.concat(&ks, 0)?;
            let v = tape.concat(&vs, 0)?;
            let attn = attention(q, k, v, self.config.heads, key_bias)?;

            let mut offset = 0;
            let mut next = Vec::new();
            for (s, m) in streams.into_iter().zip(mods) {
                let n = s.h.shape()[0];
                if last && s.stream != Stream::Prior {
                    continue;
                }
                let lora = (s.stream == Stream::Control).then(|| self.config.lora_scale());
                let pre = format!("layer{layer}.{}", s.stream.name());
                let chunk = |i: usize| m.narrow(0, i * d, d);
                let o = b.linear(&format!("{pre}.o"), attn.narrow(0, offset, n)?, lora)?;
                offset += n;
                let h = s.h.add(o.mul(chunk(2)?.add_scalar(1.0))?)?;
                let a = h
                    .layer_norm(LN_EPS)
                    .mul(chunk(4)?.add_scalar(1.0))?
                    .add(chunk(3)?)?;
                let f = b.linear(&format!("{pre}.mlp1"), a, lora)?.gelu();
                let f = b.linear(&format!("{pre}.mlp2"), f, lora)?;
                let h = h.add(f.mul(chunk(5)?.add_scalar(1.0))?)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.push((format!("{pre}.out"), h.value()));
                }
                next.push(StreamIn {
                    stream: s.stream,
                    h,
                    t: s.t,
                });
            }
            streams = next;
        }
        Ok(streams.into_iter().map(|s| s.h).collect())
    }

    fn head<'t>(&self, b: &Bound<'t, T>, tape: &'t Tape<T>, h: Var<'t, T>, t_p: f64) -> Result<Var<'t, T>> {
        let d = self.config.dim;
        let cond = self.t_embed(b, tape, t_p)?;
        let m = b.linear("final.prior.mod", cond, None)?.reshape(&[2 * d])?;
        let a = h
            .layer_norm(LN_EPS)
            .mul(m.narrow(0, d, d)?.add_scalar(1.0))?
            .add(m.narrow(0, 0, d)?)?;
        b.linear("head", a, None)
    }

    /// Velocity tokens for prior tokens `x_tp` (and control tokens `x_tc`
    /// when present) on an existing tape.
    #[allow(clippy::too_many_arguments)]
    pub fn velocity_on<'t>(
        &self,
        b: &Bound<'t, T>,
        tape: &'t Tape<T>,
        x_tp: Var<'t, T>,
        control: Option<(Var<'t, T>, f64)>,
        t_p: f64,
        caption: &[usize],
        grid: (usize, usize),
        trace: Option<&mut Trace<T>>,
    ) -> Result<Var<'t, T>> {
        self.check_caption(caption)?;
        let mut streams = vec![
            StreamIn {
                stream: Stream::Text,
                h: self.embed_text(b, tape, caption)?,
                t: t_p,
            },
            StreamIn {
                stream: Stream::Prior,
                h: self.embed_visual(b, tape, Stream::Prior, x_tp, grid)?,
                t: t_p,
            },
        ];
        let n_vis = grid.0 * grid.1;
        let mut bias = pad_bias::<T>(caption, vocab::PAD).to_vec();
        bias.resize(caption.len() + n_vis, T::zero());
        if let Some((x_tc, t_c)) = control {
            streams.push(StreamIn {
                stream: Stream::Control,
                h: self.embed_visual(b, tape, Stream::Control, x_tc, grid)?,
                t: t_c,
            });
            bias.resize(caption.len() + 2 * n_vis, T::zero());
        }
        let bias = tape.constant(&Tensor::new(&[bias.len()], bias)?);
        let rope = Rope::new(grid.0, grid.1, self.config.dim, self.config.heads)?;
        let hs = self.blocks(b, tape, streams, Some(bias), &rope, self.config.layers, trace)?;
        self.head(b, tape, hs[0], t_p)
    }

    /// Hidden states of the prior stream after its first two blocks at
    /// `t = 0` with no caption; the frozen perceptual feature space.
    pub fn features_on<'t>(
        &self,
        b: &Bound<'t, T>,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        grid: (usize, usize),
    ) -> Result<Vec<Var<'t, T>>> {
        let rope = Rope::new(grid.0, grid.1, self.config.dim, self.config.heads)?;
        let mut h = self.embed_visual(b, tape, Stream::Prior, x, grid)?;
        let mut feats = Vec::new();
        for layer in 0..self.config.layers.min(2) {
            let out = self.prior_block(b, tape, h, &rope, layer)?;
            feats.push(out);
            h = out;
        }
        Ok(feats)
    }

    /// Block `layer` of the prior stream alone, conditioned on `t = 0`.
    fn prior_block<'t>(
        &self,
        b: &Bound<'t, T>,
        tape: &'t Tape<T>,
        h: Var<'t, T>,
        rope: &Rope<T>,
        layer: usize,
    ) -> Result<Var<'t, T>> {
        let d = self.config.dim;
        let cond = self.t_embed(b, tape, 0.0)?;
        let pre = format!("layer{layer}.prior");
        let m = b.linear(&format!("{pre}.mod"), cond, None)?.reshape(&[6 * d])?;
        let chunk = |i: usize| m.narrow(0, i * d, d);
        let a = h.layer_norm(LN_EPS).mul(chunk(1)?.add_scalar(1.0))?.add(chunk(0)?)?;
        let q = rope.apply(tape, b.linear(&format!("{pre}.q"), a, None)?)?;
        let k = rope.apply(tape, b.linear(&format!("{pre}.k"), a, None)?)?;
        let v = b.linear(&format!("{pre}.v"), a, None)?;
        let o = b.linear(&format!("{pre}.o"), attention(q, k, v, self.config.heads, None)?, None)?;
        let h = h.add(o.mul(chunk(2)?.add_scalar(1.0))?)?;
        let a = h.layer_norm(LN_EPS).mul(chunk(4)?.add_scalar(1.0))?.add(chunk(3)?)?;
        let f = b.linear(&format!("{pre}.mlp1"), a, None)?.gelu();
        let f = b.linear(&format!("{pre}.mlp2"), f, None)?;
        h.add(f.mul(chunk(5)?.add_scalar(1.0))?)
    }

    /// One three-stream pass returning the velocity at the prior tokens.
    pub fn forward_velocity(
        &self,
        x_tp: &LatentGrid<T>,
        x_tc: &LatentGrid<T>,
        t_p: f64,
        t_c: f64,
        caption: &[usize],
    ) -> Result<LatentGrid<T>> {
        self.check_grid(x_tp)?;
        if x_tp.grid_h != x_tc.grid_h || x_tp.grid_w != x_tc.grid_w || x_tp.dim() != x_tc.dim() {
            contract!("prior and control grids differ in shape");
        }
        let tape = Tape::new();
        let b = self.bind(&tape, None);
        let v = self.velocity_on(
            &b,
            &tape,
            tape.constant(&x_tp.tokens),
            Some((tape.constant(&x_tc.tokens), t_c)),
            t_p,
            caption,
            (x_tp.grid_h, x_tp.grid_w),
            None,
        )?;
        x_tp.with_tokens(v.value())
    }

    /// Stage-1 network: text and prior streams only.
    pub fn forward_pretrain(&self, x_t: &LatentGrid<T>, t: f64, caption: &[usize]) -> Result<LatentGrid<T>> {
        self.check_grid(x_t)?;
        let tape = Tape::new();
        let b = self.bind(&tape, None);
        let v = self.velocity_on(
            &b,
            &tape,
            tape.constant(&x_t.tokens),
            None,
            t,
            caption,
            (x_t.grid_h, x_t.grid_w),
            None,
        )?;
        x_t.with_tokens(v.value())
    }

    /// Keys, values and block outputs of a three-stream pass.
    pub fn trace_velocity(
        &self,
        x_tp: &LatentGrid<T>,
        x_tc: &LatentGrid<T>,
        t_p: f64,
        t_c: f64,
        caption: &[usize],
    ) -> Result<Trace<T>> {
        let tape = Tape::new();
        let b = self.bind(&tape, None);
        let mut trace = Vec::new();
        self.velocity_on(
            &b,
            &tape,
            tape.constant(&x_tp.tokens),
            Some((tape.constant(&x_tc.tokens), t_c)),
            t_p,
            caption,
            (x_tp.grid_h, x_tp.grid_w),
            Some(&mut trace),
        )?;
        Ok(trace)
    }
}

/// One-step restoration of a low-quality image at fidelity `f`.
///
/// The LQ image is upsampled by `factor` and encoded; the prior stream sees
/// it noised to `t_p`, the control stream noised to `(1 - f) t_p`, and the
/// prediction is `x_tp - t_p v`.
pub fn restore<T: Real>(
    gen: &Generator<T>,
    schedule: &NoiseSchedule,
    lq: &Image,
    factor: usize,
    f: FidelityWeight,
    caption: &[usize],
    seed: u64,
) -> Result<Image> {
    let x_lq = encode::<T>(&upsample_bilinear(lq, factor), gen.config.patch)?;
    let rng = Rng::new(seed);
    let t_p = schedule.t_p();
    let eps_p = Tensor::randn(x_lq.tokens.shape(), 1.0, &mut rng.split(0));
    let x_tp = x_lq.with_tokens(interpolate(&x_lq.tokens, &eps_p, t_p)?)?;
    let t_c = control_t(f, t_p)?;
    let x_tc = if t_c == 0.0 {
        x_lq.clone()
    } else {
        let eps_c = Tensor::randn(x_lq.tokens.shape(), 1.0, &mut rng.split(1));
        x_lq.with_tokens(interpolate(&x_lq.tokens, &eps_c, t_c)?)?
    };
    let v = gen.forward_velocity(&x_tp, &x_tc, t_p, t_c, caption)?;
    let x0 = x_tp.with_tokens(one_step_update(&x_tp.tokens, &v.tokens, t_p)?)?;
    decode(&x0, gen.config.patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::PromptTemplate;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            layers: 2,
            dim: 16,
            heads: 2,
            lora_rank: 2,
            lora_alpha: 2.0,
            t_embed_dim: 8,
            max_caption_len: 6,
            ..GeneratorConfig::default()
        }
    }

    fn grid(seed: u64) -> LatentGrid<f64> {
        let mut rng = Rng::new(seed);
        LatentGrid::new(2, 3, Tensor::randn(&[6, 12], 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_control_copies_prior() {
        let a = Generator::<f64>::init(small(), 3).unwrap();
        assert_eq!(a, Generator::<f64>::init(small(), 3).unwrap());
        for (name, t) in a.params.iter() {
            if name.contains("control") && !is_lora(name) {
                let src = a.params.get(&name.replacen("control", "prior", 1)).unwrap();
                assert!(t.bit_eq(src), "{name}");
            }
            if name.ends_with(".lora_b") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn output_shape_and_pad_masking() {
        let g = Generator::<f64>::init(small(), 1).unwrap();
        let cap = vocab::encode(&[3, 4], PromptTemplate::Terse, 6).unwrap();
        let v = g.forward_velocity(&grid(1), &grid(2), 0.4, 0.2, &cap).unwrap();
        assert_eq!(v.tokens.shape(), &[6, 12]);
        let v2 = g.forward_pretrain(&grid(1), 0.4, &cap).unwrap();
        assert_eq!(v2.tokens.shape(), &[6, 12]);
        assert!(g.forward_pretrain(&grid(1), 0.4, &cap[..5]).is_err());
    }

    #[test]
    fn faa_trainables_are_lora_only() {
        let g = Generator::<f64>::init(small(), 1).unwrap();
        let faa = g.trainable_parameters(Stage::Faa);
        assert!(faa.iter().all(|n| is_lora(n)));
        assert!(faa.iter().all(|n| !g.frozen_parameters().contains(n)));
        assert_eq!(g.trainable_parameters(Stage::Pretrain).len(), g.params.len());
    }
}
