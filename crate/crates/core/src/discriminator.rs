//! Caption- and timestep-conditioned patch discriminator.
//!
//! A two-block transformer trunk (self-attention, cross-attention to the
//! caption, MLP) over latent tokens, followed by two 3x3 convolutions that
//! map token features to one unbounded score per latent patch.

use serde::{Deserialize, Serialize};

use crate::codec::{token_dim, LatentGrid};
use crate::datagen::vocab;
use crate::error::{contract, Result};
use crate::nn::{attention, grid_positions, pad_bias, timestep_features, Bound, ParamStore, LN_EPS};
use crate::numerics::{Real, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
    pub t_embed_dim: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 64,
            heads: 4,
            patch: 2,
            vocab_size: vocab::SIZE,
            max_caption_len: vocab::max_len(16),
            t_embed_dim: 32,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim % self.heads != 0 || self.dim % 4 != 0 || self.dim < 2 {
            contract!("invalid discriminator width/heads {}/{}", self.dim, self.heads);
        }
        if self.patch == 0 || self.t_embed_dim % 2 != 0 || self.max_caption_len == 0 {
            contract!("invalid discriminator patch or embedding sizes");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn init(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut p = ParamStore::new();
        let (d, te, td) = (config.dim, config.t_embed_dim, token_dim(config.patch));
        let std = |i: usize| 1.0 / (i as f64).sqrt();
        p.linear("d.in", td, d, std(td), &mut rng);
        p.linear("d.t_embed", te, d, std(te), &mut rng);
        p.insert("d.text.embed", Tensor::randn(&[config.vocab_size, d], 0.5, &mut rng));
        p.insert("d.text.pos", Tensor::randn(&[config.max_caption_len, d], 0.02, &mut rng));
        p.insert("d.text.null", Tensor::randn(&[1, d], 0.5, &mut rng));
        for l in 0..config.layers {
            for lin in ["q", "k", "v", "o", "xq", "xk", "xv", "xo"] {
                p.linear(&format!("d.layer{l}.{lin}"), d, d, std(d), &mut rng);
            }
            p.linear(&format!("d.layer{l}.mlp1"), d, 2 * d, std(d), &mut rng);
            p.linear(&format!("d.layer{l}.mlp2"), 2 * d, d, std(2 * d), &mut rng);
        }
        let h = d / 2;
        p.insert("d.conv1.w", Tensor::randn(&[h, d, 3, 3], std(9 * d), &mut rng));
        p.insert("d.conv1.b", Tensor::zeros(&[h]));
        p.insert("d.conv2.w", Tensor::randn(&[1, h, 3, 3], std(9 * h), &mut rng));
        p.insert("d.conv2.b", Tensor::zeros(&[1]));
        Ok(Self { config, params: p })
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.params.names().cloned().collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        Bound::new(tape, &self.params, |_| trainable)
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Score grid `[gh * gw]` for latent tokens `x` on an existing tape.
    pub fn score_on<'t>(
        &self,
        b: &Bound<'t, T>,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        grid: (usize, usize),
        t: f64,
        caption: &[usize],
    ) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        if caption.len() != cfg.max_caption_len {
            contract!("caption has {} tokens, expected {}", caption.len(), cfg.max_caption_len);
        }
        if x.shape() != [grid.0 * grid.1, token_dim(cfg.patch)] {
            contract!("discriminator input {:?} does not match grid {:?}", x.shape(), grid);
        }
        let d = cfg.dim;
        let tf = tape
            .constant(&timestep_features(t, cfg.t_embed_dim))
            .reshape(&[1, cfg.t_embed_dim])?;
        let temb = b.linear("d.t_embed", tf, None)?.silu().reshape(&[d])?;
        let pos = tape.constant(&grid_positions(grid.0, grid.1, d));
        let mut h = b.linear("d.in", x, None)?.add(pos)?.add(temb)?;

        let text = tape
            .embedding(b.get("d.text.embed")?, caption)?
            .add(b.get("d.text.pos")?)?;
        let ctx = tape.concat(&[b.get("d.text.null")?, text], 0)?;
        let mut bias = vec![T::zero()];
        bias.extend(pad_bias::<T>(caption, vocab::PAD).to_vec());
        let bias = tape.constant(&Tensor::new(&[bias.len()], bias)?);

        for l in 0..cfg.layers {
            let p = |s: &str| format!("d.layer{l}.{s}");
            let a = h.layer_norm(LN_EPS);
            let sa = attention(
                b.linear(&p("q"), a, None)?,
                b.linear(&p("k"), a, None)?,
                b.linear(&p("v"), a, None)?,
                cfg.heads,
                None,
            )?;
            h = h.add(b.linear(&p("o"), sa, None)?)?;
            let a = h.layer_norm(LN_EPS);
            let ca = attention(
                b.linear(&p("xq"), a, None)?,
                b.linear(&p("xk"), ctx, None)?,
                b.linear(&p("xv"), ctx, None)?,
                cfg.heads,
                Some(bias),
            )?;
            h = h.add(b.linear(&p("xo"), ca, None)?)?;
            let a = h.layer_norm(LN_EPS);
            let f = b.linear(&p("mlp1"), a, None)?.gelu();
            h = h.add(b.linear(&p("mlp2"), f, None)?)?;
        }
        let img = h.transpose()?.reshape(&[d, grid.0, grid.1])?;
        let c1 = img.conv2d(b.get("d.conv1.w")?, b.get("d.conv1.b")?)?.silu();
        let c2 = c1.conv2d(b.get("d.conv2.w")?, b.get("d.conv2.b")?)?;
        c2.reshape(&[grid.0 * grid.1])
    }

    /// Unbounded score per latent patch, laid out as the input grid.
    pub fn score_patches(&self, x: &LatentGrid<T>, t: f64, caption: &[usize]) -> Result<Tensor<T>> {
        if !x.tokens.all_finite() {
            contract!("discriminator input is not finite");
        }
        let tape = Tape::new();
        let b = self.bind(&tape, false);
        let s = self.score_on(&b, &tape, tape.constant(&x.tokens), (x.grid_h, x.grid_w), t, caption)?;
        s.value().reshape(&[x.grid_h, x.grid_w])
    }
}

/// Elementwise `sigmoid(a - b)`. Negative differences use `1 - sigmoid(|z|)`,
/// which is exact for `sigmoid(|z|) >= 0.5`, so swapping the arguments gives
/// the complement bit-exactly.
pub fn relativistic_prob<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| {
        let z = x - y;
        let p = T::one() / (T::one() + (-z.abs()).exp());
        if z >= T::zero() {
            p
        } else {
            T::one() - p
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DiscriminatorConfig {
        DiscriminatorConfig {
            dim: 8,
            heads: 2,
            max_caption_len: 4,
            t_embed_dim: 4,
            ..DiscriminatorConfig::default()
        }
    }

    #[test]
    fn score_grid_matches_latent_grid() {
        let d = Discriminator::<f64>::init(small(), 1).unwrap();
        let mut rng = Rng::new(2);
        let x = LatentGrid::new(3, 5, Tensor::randn(&[15, 12], 1.0, &mut rng)).unwrap();
        let s = d.score_patches(&x, 0.0, &[5, 6, 0, 0]).unwrap();
        assert_eq!(s.shape(), &[3, 5]);
        assert!(s.bit_eq(&d.score_patches(&x, 0.0, &[5, 6, 0, 0]).unwrap()));
        // all-pad caption still scores finitely through the null key
        assert!(d.score_patches(&x, 0.0, &[0; 4]).unwrap().all_finite());
    }

    #[test]
    fn relativistic_values() {
        let a = Tensor::<f64>::from_f64(&[2], &[2.0, 0.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap();
        let r = relativistic_prob(&a, &b).unwrap();
        assert!((r.data()[0] - 0.8808).abs() < 1e-4);
        assert_eq!(r.data()[1], 0.5);
        let rb = relativistic_prob(&b, &a).unwrap();
        assert!(r.add(&rb).unwrap().data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}
