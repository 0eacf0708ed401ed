//! Reverse-mode gradients on the tape, checked against central differences.

use onestep_sr::numerics::{finite_diff_check, Rng, Tape, Tensor};

fn main() -> onestep_sr::Result<()> {
    let mut rng = Rng::new(11);
    let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);

    let tape = Tape::new();
    let (vx, vw) = (tape.param(&x), tape.param(&w));
    let loss = vx.matmul(vw)?.gelu().softmax().square().sum();
    let grads = tape.backward(loss)?;
    println!("loss {:.6}", loss.value().item());
    println!("dL/dw {:?}", grads.wrt(vw).data());

    let err = finite_diff_check(
        |tape, v| {
            let w = tape.constant(&w);
            Ok(v.matmul(w)?.gelu().softmax().square().sum())
        },
        &x,
        1e-5,
    )?;
    println!("worst relative error vs finite differences: {err:.2e}");

    // Detached branches carry no gradient.
    let tape = Tape::<f64>::new();
    let v = tape.param(&Tensor::from_f64(&[2], &[1.0, 2.0])?);
    let y = v.square().detach().mul(v)?.sum();
    println!("d/dv sum(stop(v^2) * v) = {:?}", tape.backward(y)?.wrt(v).data());
    Ok(())
}
