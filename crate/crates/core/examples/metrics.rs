//! ROUGE-1/2/L and METEOR for candidate/reference pairs, plus MRR.
use lyricfusion::metrics::{meteor_lite, mrr, random_mrr, MetricReport};

fn main() -> anyhow::Result<()> {
    let refs = [
        "the song is about a man running away from his past",
        "a quiet song about the rain and an old house",
    ];
    let cands = [
        "this song is about a man who runs from his past",
        "the house is old and the rain is quiet",
    ];
    let report = MetricReport::evaluate(&cands, &refs)?;
    print!("{}", report.table());

    let m = meteor_lite(cands[0], refs[0]);
    println!(
        "METEOR detail: {} matches in {} chunks, F_mean {:.4}, penalty {:.4}",
        m.matches, m.chunks, m.f_mean, m.penalty
    );
    println!("MRR of ranks [1, 2, 4]: {:.4}", mrr(&[1, 2, 4], 10)?);
    println!("random ranking over 800 songs: {:.4}", random_mrr(800));
    Ok(())
}
