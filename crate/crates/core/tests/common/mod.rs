//! Finite-difference cases shared by the gradient tests and the acceptance run.

use onestep_sr::losses::{
    adv_d_loss, adv_g_loss, feature_distance, flow_matching_loss, r1_reg, rec_loss, total_d_loss, total_g_loss,
    LossWeights,
};
use onestep_sr::nn::attention;
use onestep_sr::numerics::{finite_diff_check_many, Rng, Tape, Tensor, Var};
use onestep_sr::scheduler::FidelityWeight;
use onestep_sr::Result;

pub const SEEDS: u64 = 20;
pub const TOL: f64 = 1e-4;
pub const H: f64 = 1e-5;

pub type Make = fn(&mut Rng) -> Vec<Tensor<f64>>;
pub type Body = for<'a> fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>>;

pub struct Case {
    pub name: &'static str,
    pub make: Make,
    pub body: Body,
}

pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

/// Projects a non-scalar output onto fixed random weights.
pub fn project<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = randn(&out.shape(), &mut Rng::new(seed ^ 0xABCD));
    Ok(out.mul(out.tape().constant(&w))?.sum())
}

fn higher_ranked<F>(f: F) -> F
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>>,
{
    f
}

/// Worst relative error of a case over all seeds.
pub fn worst_error(case: &Case) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let points = (case.make)(&mut Rng::new(seed));
        let body = case.body;
        let f = higher_ranked(move |t, v| project(body(t, v)?, 7));
        worst = worst.max(finite_diff_check_many(f, &points, H, None)?);
    }
    Ok(worst)
}

macro_rules! case {
    ($name:literal, |$r:ident| $make:expr, |$t:ident, $v:ident| $body:expr) => {
        Case {
            name: $name,
            make: |$r| $make,
            body: |$t, $v| {
                let _ = $t;
                $body
            },
        }
    };
}

pub fn ops() -> Vec<Case> {
    vec![
        case!("add (broadcast)", |r| vec![randn(&[3, 4], r), randn(&[4], r)], |t, v| v[0].add(v[1])),
        case!("sub (broadcast)", |r| vec![randn(&[2, 3, 4], r), randn(&[3, 4], r)], |t, v| v[0].sub(v[1])),
        case!("mul (broadcast)", |r| vec![randn(&[3, 4], r), randn(&[4], r)], |t, v| v[0].mul(v[1])),
        case!("scale/neg/add_scalar", |r| vec![randn(&[5], r)], |t, v| Ok(v[0]
            .scale(-1.7)
            .neg()
            .add_scalar(0.3))),
        case!("matmul", |r| vec![randn(&[3, 5], r), randn(&[5, 2], r)], |t, v| v[0].matmul(v[1])),
        case!("matmul (batched)", |r| vec![randn(&[2, 3, 4], r), randn(&[2, 4, 3], r)], |t, v| v[0]
            .matmul(v[1])),
        case!("matmul_t", |r| vec![randn(&[2, 3, 4], r), randn(&[2, 5, 4], r)], |t, v| v[0].matmul_t(v[1])),
        case!("conv2d", |r| vec![randn(&[3, 4, 5], r), randn(&[2, 3, 3, 3], r), randn(&[2], r)], |t, v| v[0]
            .conv2d(v[1], v[2])),
        case!("layer_norm", |r| vec![randn(&[3, 6], r)], |t, v| Ok(v[0].layer_norm(1e-6))),
        case!("softmax", |r| vec![randn(&[2, 3, 5], r)], |t, v| Ok(v[0].softmax())),
        case!("sigmoid", |r| vec![randn(&[7], r)], |t, v| Ok(v[0].sigmoid())),
        case!("silu", |r| vec![randn(&[7], r)], |t, v| Ok(v[0].silu())),
        case!("gelu", |r| vec![randn(&[7], r)], |t, v| Ok(v[0].gelu())),
        case!("log_clamped", |r| vec![positive(&[6], r)], |t, v| Ok(v[0].log_clamped(1e-7))),
        case!("exp", |r| vec![randn(&[6], r)], |t, v| Ok(v[0].exp())),
        case!("powf", |r| vec![positive(&[6], r)], |t, v| Ok(v[0].powf(1.5))),
        case!("square", |r| vec![randn(&[6], r)], |t, v| Ok(v[0].square())),
        case!("sum/mean", |r| vec![randn(&[3, 4], r)], |t, v| v[0].sum().add(v[0].mean().scale(3.0))),
        case!("mse", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], |t, v| v[0].mse(v[1])),
        case!("reshape/permute", |r| vec![randn(&[2, 3, 4], r)], |t, v| v[0]
            .reshape(&[6, 4])?
            .reshape(&[2, 3, 4])?
            .permute(&[2, 0, 1])),
        case!("transpose", |r| vec![randn(&[3, 5], r)], |t, v| v[0].transpose()),
        case!("narrow", |r| vec![randn(&[4, 6], r)], |t, v| v[0].narrow(1, 2, 3)),
        case!("concat", |r| vec![randn(&[2, 3], r), randn(&[4, 3], r)], |t, v| t.concat(&[v[0], v[1]], 0)),
        case!("embedding", |r| vec![randn(&[5, 3], r)], |t, v| t.embedding(v[0], &[4, 0, 4, 2])),
        case!("attention (key bias)", |r| vec![
            randn(&[3, 4], r),
            randn(&[5, 4], r),
            randn(&[5, 4], r),
            randn(&[5], r)
        ], |t, v| attention(v[0], v[1], v[2], 2, Some(v[3]))),
    ]
}

pub fn losses() -> Vec<Case> {
    vec![
        case!("flow matching", |r| vec![randn(&[4, 3], r), randn(&[4, 3], r)], |t, v| flow_matching_loss(
            v[0], v[1]
        )),
        case!("feature distance", |r| vec![
            randn(&[3, 2], r),
            randn(&[4], r),
            randn(&[3, 2], r),
            randn(&[4], r)
        ], |t, v| feature_distance(&[v[0], v[1]], &[v[2], v[3]])),
        case!("reconstruction", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], |t, v| rec_loss(
            v[0],
            v[1],
            0.7,
            |x| Ok(vec![x.gelu(), x.square()])
        )),
        case!("adversarial (G)", |r| vec![randn(&[6], r), randn(&[6], r)], |t, v| adv_g_loss(v[0], v[1])),
        case!("adversarial (D)", |r| vec![randn(&[6], r), randn(&[6], r)], |t, v| adv_d_loss(v[0], v[1])),
        case!("R1 perturbation", |r| vec![randn(&[4, 3], r), randn(&[3], r)], |t, v| {
            let delta = Tensor::randn(&[4, 3], 0.07, &mut Rng::new(3));
            let w = v[1];
            r1_reg(move |x| Ok(x.mul(w)?.gelu()), v[0], &delta)
        }),
        case!("total G", |r| vec![randn(&[1], r), randn(&[1], r)], |t, v| total_g_loss(
            v[0].sum(),
            v[1].sum(),
            FidelityWeight::new(0.3).unwrap(),
            &LossWeights::default()
        )),
        case!("total D", |r| vec![randn(&[1], r), randn(&[1], r)], |t, v| total_d_loss(
            v[0].sum(),
            v[1].sum(),
            5.0
        )),
    ]
}
