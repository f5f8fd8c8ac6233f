//! NAdam on a badly scaled quadratic, with the plateau scheduler and early
//! stopping driven by the loss.

use gwanomaly::optim::{EarlyStopper, NAdam, PlateauScheduler, StopDecision};

fn main() -> gwanomaly::Result<()> {
    let scales = [1.0, 10.0, 100.0];
    let mut w = vec![3.0f64, -2.0, 1.0];
    let mut opt = NAdam::<f64>::new(0.1);
    let mut sched = PlateauScheduler::new(0.1, 0.1, 5);
    let mut stopper = EarlyStopper::new(10);

    for epoch in 1..=500 {
        let loss: f64 = w.iter().zip(scales).map(|(x, s)| s * x * x).sum();
        let grad: Vec<f64> = w.iter().zip(scales).map(|(x, s)| 2.0 * s * x).collect();
        opt.step(&mut [("w", &mut w[..], &grad[..])])?;
        opt.lr = sched.epoch_end(loss);
        if epoch % 50 == 0 {
            println!("epoch {epoch:>3} loss {loss:.3e} lr {:.0e}", sched.lr());
        }
        if stopper.check(epoch, loss, || w.clone()) == StopDecision::Stop {
            println!("stopped at epoch {epoch}; best loss {:.3e} at epoch {:?}", stopper.best(), stopper.best_epoch());
            break;
        }
    }
    println!("best weights {:?}", stopper.snapshot().unwrap());
    Ok(())
}
