//! Reverse-mode differentiation of a small expression, checked against
//! central differences.

use gwanomaly::autodiff::{finite_diff_check, DiffArray, Tape};

fn main() -> gwanomaly::Result<()> {
    // f(x) = sum(relu(x) * x) + mean(exp(x))
    let f = |tape: &mut Tape<f64>, x| {
        let r = tape.relu(x)?;
        let p = tape.mul(r, x)?;
        let s = tape.sum(p)?;
        let e = tape.exp(x)?;
        let m = tape.mean(e)?;
        tape.add(s, m)
    };

    let x = DiffArray::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 1.5, -0.25, 0.75])?;
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let y = f(&mut tape, leaf)?;
    tape.backward(y)?;

    println!("f(x)     = {:.6}", tape.value(y).item()?);
    println!("df/dx    = {:?}", tape.grad(leaf).unwrap());
    println!("tape has {} nodes", tape.node_count());

    let err = finite_diff_check(f, &x, 1e-6)?;
    println!("max relative error vs central differences: {err:.2e}");
    Ok(())
}
