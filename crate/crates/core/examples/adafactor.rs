//! AdaFactor on a realizable least-squares problem. The second moment of the 64x32
//! weight is kept as 64 + 32 numbers instead of 2048.
use lyricfusion::tensor::{ParamStore, Tape, Tensor};
use lyricfusion::train::{AdaFactor, Moments};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f64>::from_fn(&[128, 64], |_| rng.gen_range(-1.0..1.0));
    let w_true = Tensor::<f64>::from_fn(&[64, 32], |_| rng.gen_range(-0.5..0.5));
    let target = {
        let tape = Tape::<f64>::inference();
        tape.constant(x.clone()).matmul(&tape.constant(w_true), false)?.value().clone()
    };
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros(&[64, 32]), true)?;
    let mut opt = AdaFactor::new();
    for step in 1..=300 {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let diff = tape.constant(x.clone()).matmul(p.get(w), false)?.add(&tape.constant(target.map(|v| -v)))?;
        let loss = diff.mul(&diff)?.sum().scale(1.0 / 128.0);
        let grads = p.gradients(&tape.backward(&loss)?);
        if step % 50 == 1 || step == 300 {
            println!("step {step:>3}: loss {:.4}", loss.value().item());
        }
        drop(p);
        let lr = if step <= 150 { 1e-2 } else { 1e-3 };
        opt.step(&mut store, &grads, lr)?;
    }
    if let Some(Moments::Factored { rows, cols }) = opt.moments(w.index()) {
        println!("factored second moment: {} row + {} column accumulators", rows.len(), cols.len());
    }
    Ok(())
}
