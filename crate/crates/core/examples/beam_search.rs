//! Greedy and beam decoding over a hand-written next-token distribution.
//! Greedy takes the locally best first token; beam search finds the better
//! sequence behind a weaker start.
use lyricfusion::model::decode::{beam, greedy};
use lyricfusion::text::EOS;

const A: u32 = 10;
const B: u32 = 11;
const C: u32 = 12;

fn next(prefix: &[u32]) -> lyricfusion::Result<Vec<f64>> {
    let mut p = vec![1e-6; 16];
    match prefix[1..] {
        [] => {
            p[A as usize] = 0.55;
            p[B as usize] = 0.45;
        }
        [A] => {
            p[C as usize] = 0.35;
            p[EOS as usize] = 0.3;
            p[B as usize] = 0.35;
        }
        [B] => p[C as usize] = 0.99,
        _ => p[EOS as usize] = 0.99,
    }
    Ok(p.into_iter().map(f64::ln).collect())
}

fn main() -> anyhow::Result<()> {
    println!("greedy     {:?}", greedy(next, 8)?);
    for k in [1, 2, 4] {
        println!("beam k={k}   {:?}", beam(next, k, 8)?);
    }
    Ok(())
}
