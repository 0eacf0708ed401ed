//! Named parameter storage and the layer primitives shared by the generator
//! and the discriminator.

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{contract, Error, Result};
use crate::numerics::{Real, Rng, Tape, Tensor, Var};

/// Additive attention bias for masked keys.
pub const MASK_BIAS: f64 = -1e9;
pub const LN_EPS: f64 = 1e-6;

/// Ordered map of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            map: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Names whose tensors differ bitwise from `other` (or are missing there).
    pub fn bit_diff(&self, other: &ParamStore<T>) -> Vec<String> {
        self.map
            .iter()
            .filter(|(k, v)| other.map.get(*k).is_none_or(|o| !o.bit_eq(v)))
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn linear(&mut self, name: &str, inp: usize, out: usize, std: f64, rng: &mut Rng) {
        self.insert(format!("{name}.w"), Tensor::randn(&[inp, out], std, rng));
        self.insert(format!("{name}.b"), Tensor::zeros(&[out]));
    }
}

/// Parameters placed on a tape, looked up by name.
pub struct Bound<'t, T> {
    vars: HashMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Every tensor becomes a leaf; gradients are tracked where `trainable` holds.
    pub fn new(tape: &'t Tape<T>, store: &ParamStore<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = store
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v, trainable(k))))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, T>)> {
        self.vars.iter()
    }

    /// `x W + b`, plus `scale (x A) B` when `name.lora_a` is bound and `lora` is set.
    pub fn linear(&self, name: &str, x: Var<'t, T>, lora: Option<f64>) -> Result<Var<'t, T>> {
        let y = x
            .matmul(self.get(&format!("{name}.w"))?)?
            .add(self.get(&format!("{name}.b"))?)?;
        match lora {
            Some(scale) if self.has(&format!("{name}.lora_a")) => {
                let a = self.get(&format!("{name}.lora_a"))?;
                let b = self.get(&format!("{name}.lora_b"))?;
                y.add(x.matmul(a)?.matmul(b)?.scale(scale))
            }
            _ => Ok(y),
        }
    }
}

/// Sinusoidal features of a scalar, `[dim]`.
pub fn timestep_features<T: Real>(t: f64, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = T::from_f64_lossy(arg.sin());
        out[half + i] = T::from_f64_lossy(arg.cos());
    }
    Tensor::from_parts(vec![dim], out)
}

/// Fixed 2-D sinusoidal positions, `[gh * gw, dim]`; half the channels encode the row.
pub fn grid_positions<T: Real>(gh: usize, gw: usize, dim: usize) -> Tensor<T> {
    let quarter = dim / 4;
    let mut out = vec![T::zero(); gh * gw * dim];
    for y in 0..gh {
        for x in 0..gw {
            let row = &mut out[(y * gw + x) * dim..(y * gw + x + 1) * dim];
            for i in 0..quarter {
                let freq = (-(100f64).ln() * i as f64 / quarter as f64).exp();
                row[i] = T::from_f64_lossy((y as f64 * freq).sin());
                row[quarter + i] = T::from_f64_lossy((y as f64 * freq).cos());
                row[2 * quarter + i] = T::from_f64_lossy((x as f64 * freq).sin());
                row[3 * quarter + i] = T::from_f64_lossy((x as f64 * freq).cos());
            }
        }
    }
    Tensor::from_parts(vec![gh * gw, dim], out)
}

/// 2-D rotary position tables for visual tokens on a `gh x gw` grid. Each
/// head's channel pairs are split in half: the first half rotate with the row
/// index, the second with the column index.
#[derive(Debug, Clone)]
pub struct Rope<T> {
    cos: Tensor<T>,
    sin: Tensor<T>,
    /// Pair swap `(a, b) -> (-b, a)` as a right-multiplied matrix.
    swap: Tensor<T>,
}

impl<T: Real> Rope<T> {
    pub fn new(gh: usize, gw: usize, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 || (dim / heads) % 4 != 0 {
            contract!("rotary positions need a head dim divisible by 4 (dim {dim}, heads {heads})");
        }
        let dh = dim / heads;
        let per_axis = dh / 4;
        let n = gh * gw;
        let mut cos = vec![T::one(); n * dim];
        let mut sin = vec![T::zero(); n * dim];
        for y in 0..gh {
            for x in 0..gw {
                let row = (y * gw + x) * dim;
                for h in 0..heads {
                    for pair in 0..dh / 2 {
                        let (pos, m) = if pair < per_axis { (y, pair) } else { (x, pair - per_axis) };
                        let angle = pos as f64 * (-(100f64).ln() * m as f64 / per_axis as f64).exp();
                        for c in [row + h * dh + 2 * pair, row + h * dh + 2 * pair + 1] {
                            cos[c] = T::from_f64_lossy(angle.cos());
                            sin[c] = T::from_f64_lossy(angle.sin());
                        }
                    }
                }
            }
        }
        let mut swap = vec![T::zero(); dim * dim];
        for k in 0..dim / 2 {
            swap[(2 * k + 1) * dim + 2 * k] = T::from_f64_lossy(-1.0);
            swap[2 * k * dim + 2 * k + 1] = T::one();
        }
        Ok(Self {
            cos: Tensor::from_parts(vec![n, dim], cos),
            sin: Tensor::from_parts(vec![n, dim], sin),
            swap: Tensor::from_parts(vec![dim, dim], swap),
        })
    }

    /// Rotates query or key rows `[n, dim]`.
    pub fn apply<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let swapped = x.matmul(tape.constant(&self.swap))?;
        x.mul(tape.constant(&self.cos))?.add(swapped.mul(tape.constant(&self.sin))?)
    }
}

/// Multi-head attention of `q` over `k`/`v` (all `[n, d]`), with an optional
/// additive key bias `[n_k]`.
pub fn attention<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
    key_bias: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    if d % heads != 0 {
        contract!("dim {} not divisible by {} heads", d, heads);
    }
    let dh = d / heads;
    let split = |x: Var<'t, T>, n: usize| x.reshape(&[n, heads, dh])?.permute(&[1, 0, 2]);
    let (qh, kh, vh) = (split(q, nq)?, split(k, nk)?, split(v, nk)?);
    let mut scores = qh.matmul_t(kh)?.scale(1.0 / (dh as f64).sqrt());
    if let Some(b) = key_bias {
        scores = scores.add(b)?;
    }
    scores
        .softmax()
        .matmul(vh)?
        .permute(&[1, 0, 2])?
        .reshape(&[nq, d])
}

/// Additive key bias masking `pad` positions.
pub fn pad_bias<T: Real>(tokens: &[usize], pad: usize) -> Tensor<T> {
    let v = tokens
        .iter()
        .map(|&t| T::from_f64_lossy(if t == pad { MASK_BIAS } else { 0.0 }))
        .collect();
    Tensor::from_parts(vec![tokens.len()], v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rope_scores_depend_on_offset_only() {
        let (gh, gw, d) = (4, 5, 16);
        let rope = Rope::<f64>::new(gh, gw, d, 2).unwrap();
        let mut rng = Rng::new(4);
        let q = Tensor::<f64>::randn(&[1, d], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[1, d], 1.0, &mut rng);
        let tape = Tape::new();
        let tile = |x: &Tensor<f64>| Tensor::from_parts(vec![gh * gw, d], x.data().repeat(gh * gw));
        let rq = rope.apply(&tape, tape.constant(&tile(&q))).unwrap().value();
        let rk = rope.apply(&tape, tape.constant(&tile(&k))).unwrap().value();
        let dot = |a: &Tensor<f64>, i: usize, b: &Tensor<f64>, j: usize| -> f64 {
            (0..d).map(|c| a.data()[i * d + c] * b.data()[j * d + c]).sum()
        };
        let plain: f64 = (0..d).map(|c| q.data()[c] * k.data()[c]).sum();
        let at = |y: usize, x: usize| y * gw + x;
        for i in 0..gh * gw {
            assert!((dot(&rq, i, &rk, i) - plain).abs() < 1e-12);
            assert!((dot(&rq, i, &rq, i) - dot(&q, 0, &q, 0)).abs() < 1e-12);
        }
        // same offset, different absolute positions
        let a = dot(&rq, at(0, 0), &rk, at(1, 2));
        let b = dot(&rq, at(2, 1), &rk, at(3, 3));
        assert!((a - b).abs() < 1e-12);
        assert!((a - plain).abs() > 1e-6);
    }

    #[test]
    fn masked_keys_are_ignored() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(1);
        let q = tape.constant(&Tensor::randn(&[3, 4], 1.0, &mut rng));
        let k = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let bias = tape.constant(&pad_bias(&[1, 0, 2, 0, 3], 0));
        let full = attention(q, tape.constant(&k), tape.constant(&v), 2, Some(bias)).unwrap();
        let keep = |t: &Tensor<f64>| {
            let rows: Vec<f64> = [0, 2, 4]
                .iter()
                .flat_map(|&r| t.data()[r * 4..r * 4 + 4].to_vec())
                .collect();
            tape.constant(&Tensor::new(&[3, 4], rows).unwrap())
        };
        let sub = attention(q, keep(&k), keep(&v), 2, None).unwrap();
        assert!(full.value().max_abs_diff(&sub.value()) < 1e-12);
    }

    #[test]
    fn positions_are_distinct() {
        let p = grid_positions::<f64>(4, 4, 16);
        for a in 0..16 {
            for b in a + 1..16 {
                let d: f64 = (0..16)
                    .map(|i| (p.data()[a * 16 + i] - p.data()[b * 16 + i]).powi(2))
                    .sum();
                assert!(d > 1e-3);
            }
        }
    }
}
