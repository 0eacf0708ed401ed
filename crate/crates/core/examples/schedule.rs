//! The shifted noise schedule, the prior and control timesteps, and the
//! one-step update that inverts the linear interpolation.

use onestep_sr::numerics::{Rng, Tensor};
use onestep_sr::scheduler::{
    control_t, fit_shift, interpolate, one_step_update, velocity_target, FidelityWeight, GridSpacing, NoiseSchedule,
    ANCHORS,
};

fn main() -> onestep_sr::Result<()> {
    let shift = fit_shift(&ANCHORS)?;
    let s = NoiseSchedule::fitted(750)?;
    println!("shift {shift:.4}");
    for (tau, t) in ANCHORS {
        println!("  tau {tau:>4}  t {:.4}  (anchor {t})", s.t_at(tau));
    }
    let t_p = s.t_p();
    println!("t_p {t_p:.4}");
    for f in [1.0, 0.75, 0.5, 0.25, 0.0] {
        println!("  f {f:.2} -> t_c {:.4}", control_t(FidelityWeight::new(f)?, t_p)?);
    }

    let grid = s.grid(0.9, 10, GridSpacing::Timestep);
    println!("10-step grid from 0.9: {:.3?}", grid);

    let mut rng = Rng::new(3);
    let x0 = Tensor::<f32>::randn(&[4, 8], 1.0, &mut rng);
    let eps = Tensor::<f32>::randn(&[4, 8], 1.0, &mut rng);
    let x = interpolate(&x0, &eps, t_p)?;
    let back = one_step_update(&x, &velocity_target(&x0, &eps)?, t_p)?;
    let err = back.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("one-step reconstruction error with the true velocity: {err:.2e}");
    Ok(())
}
