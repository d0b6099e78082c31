//! A two-layer perceptron on the tape, its gradients, and a finite-difference check.
use lyricfusion::tensor::ops::{activation, cross_entropy_loss, linear, Activation};
use lyricfusion::tensor::{check_gradients, GradCheckOptions, ParamStore, Tape, Tensor};

fn main() -> anyhow::Result<()> {
    let mut store = ParamStore::<f64>::new();
    let mut k = 0.0f64;
    let mut next = |n: usize| {
        Tensor::from_fn(&[n], |_| {
            k += 0.37;
            k.sin() * 0.5
        })
    };
    let x = store.add("x", next(12).reshape(&[4, 3])?, false)?;
    let w1 = store.add("w1", next(15).reshape(&[3, 5])?, true)?;
    let b1 = store.add("b1", next(5), true)?;
    let w2 = store.add("w2", next(10).reshape(&[5, 2])?, true)?;
    let labels = [0usize, 1, 1, 0];

    let tape = Tape::new();
    let p = store.bind(&tape);
    let h = activation(&linear(p.get(x), p.get(w1), Some(p.get(b1)))?, Activation::Gelu);
    let loss = cross_entropy_loss(&linear(&h, p.get(w2), None)?, &labels, usize::MAX)?;
    let grads = tape.backward(&loss)?;
    println!("loss {:.6}", loss.value().item());
    println!("dL/dw2 {:?}", grads.wrt(p.get(w2)).map(|g| g.into_data()));
    drop(p);

    let report = check_gradients(
        &store,
        |_, p| {
            let h = activation(&linear(p.get(x), p.get(w1), Some(p.get(b1)))?, Activation::Gelu);
            cross_entropy_loss(&linear(&h, p.get(w2), None)?, &labels, usize::MAX)
        },
        &GradCheckOptions::default(),
    )?;
    println!(
        "checked {} coordinates, max relative error {:.2e}",
        report.probes, report.max_rel_error
    );
    Ok(())
}
