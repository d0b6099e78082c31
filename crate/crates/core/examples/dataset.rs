//! Length and vote filtering, subset sizes and a leakage-free split on a
//! synthetic corpus.
use lyricfusion::data::synthetic::{generate, SyntheticOptions};
use lyricfusion::data::{corpus_stats, filter_length, filter_votes, split_dataset, SongRecord, VoteMode};

fn main() -> anyhow::Result<()> {
    let songs = generate(&SyntheticOptions {
        songs: 40,
        ..SyntheticOptions::default()
    });
    let records: Vec<SongRecord> = songs.into_iter().map(|s| s.record).collect();
    let kept = filter_length(&records);
    let stats = corpus_stats(&kept);
    println!(
        "{} songs, {} interpretations, {:.1} words on average",
        stats.songs, stats.interpretations, stats.mean_words
    );
    println!("subsets {:?}", stats.subsets);
    for mode in [VoteMode::Full, VoteMode::NonNeg, VoteMode::Positive, VoteMode::Random { n: 20, seed: 1 }] {
        let sub = filter_votes(&kept, mode)?;
        let n: usize = sub.iter().map(|r| r.interpretations.len()).sum();
        println!("{:>10}: {n} interpretations from {} songs", mode.to_string(), sub.len());
    }
    let test_ids: Vec<String> = kept.iter().step_by(5).map(|r| r.song_id.clone()).collect();
    let split = split_dataset(&kept, 0.1, &test_ids, 0)?;
    split.check_disjoint()?;
    println!(
        "split: {} train / {} valid / {} test items, no test song elsewhere",
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    Ok(())
}
