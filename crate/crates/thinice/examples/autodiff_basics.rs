//! Tensor core tour: build a tiny computation on the tape, run backward,
//! and cross-check the gradient against central finite differences.
//!
//! Run with: cargo run --example autodiff_basics

use thinice::tensor::{finite_diff_gradient, Tape, Tensor};

fn main() -> thinice::Result<()> {
    // f(W) = CE(relu(x W + b) V, y) on a 2-4-3 stack
    let x = Tensor::normal(&[2, 2], 0.5, 0.3, 1)?;
    let w = Tensor::normal(&[2, 4], 0.0, 0.7, 2)?;
    let b = Tensor::zeros(&[4])?;
    let v = Tensor::normal(&[4, 3], 0.0, 0.7, 3)?;
    let labels = [2usize, 0];

    let run = |w_probe: &Tensor| -> thinice::Result<f64> {
        let mut tape = Tape::new();
        let ix = tape.leaf(&x, false);
        let iw = tape.leaf(w_probe, false);
        let ib = tape.leaf(&b, false);
        let iv = tape.leaf(&v, false);
        let h = tape.matmul(ix, iw)?;
        let h = tape.add_bias(h, ib)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, iv)?;
        let l = tape.softmax_cross_entropy(o, &labels)?;
        tape.scalar(l)
    };

    let mut tape = Tape::new();
    let ix = tape.leaf(&x, false);
    let iw = tape.leaf(&w, true);
    let ib = tape.leaf(&b, false);
    let iv = tape.leaf(&v, false);
    let h = tape.matmul(ix, iw)?;
    let h = tape.add_bias(h, ib)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, iv)?;
    let loss_id = tape.softmax_cross_entropy(o, &labels)?;
    let loss = tape.scalar(loss_id)?;
    tape.backward(loss_id)?;
    let grad = tape.grad(iw)?;

    println!("loss            = {loss:.6}");
    println!("dloss/dW (tape) = {:?}", &grad.data()[..4]);

    let fd = finite_diff_gradient(run, &w, 1e-3)?;
    println!("dloss/dW (fd)   = {:?}", &fd.data()[..4]);

    let max_abs_diff = grad
        .data()
        .iter()
        .zip(fd.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("max |tape - fd| = {max_abs_diff:.2e}");
    Ok(())
}
