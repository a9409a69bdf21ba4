//! Compares reverse-mode gradients with central differences, first for a
//! small expression, then for the whole reduced network.

use fcdx_tensor::gradcheck::{check_inputs, max_rel_err};
use fcdx_tensor::{Stream, Tensor};

fn main() -> fcdx::Result<()> {
    let mut s = Stream::from_seed(2);
    let x = Tensor::from_fn(&[4, 3], |_| s.normal());
    let w = Tensor::from_fn(&[3, 5], |_| s.normal());

    // sum(softmax(x·w) ⊙ sigmoid(x·w))
    let probes = check_inputs(
        &[x, w],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let p = t.softmax(y, 1)?;
            let g = t.sigmoid(y);
            let z = t.mul(p, g)?;
            Ok(t.sum(z))
        },
        10,
        1e-5,
        &mut s,
    )?;
    for p in &probes {
        println!("input {} [{:>2}] analytic {:+.8} numeric {:+.8}", p.tensor, p.element, p.analytic, p.numeric);
    }
    println!("expression: worst relative error {:.2e}", max_rel_err(&probes));

    let worst = fcdx::selftest::model_gradient(3, 12)?;
    println!("full network: worst relative error {worst:.2e}");
    Ok(())
}
