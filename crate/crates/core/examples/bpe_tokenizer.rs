//! Train a byte-level BPE vocabulary, then encode and decode with it.
use lyricfusion::text::{Vocabulary, TokenBatch};

const CORPUS: &[&str] = &[
    "i remember rain in the morning",
    "all the rain we had",
    "this song is about leaving home and the rain that follows",
    "the singer remembers the morning train",
];

fn main() -> anyhow::Result<()> {
    let vocab = Vocabulary::build(CORPUS.iter().copied(), 300)?;
    println!("{} tokens, {} merges", vocab.len(), vocab.merges().len());

    let text = "remember the rain, naïve café";
    let ids = vocab.tokenize(text);
    let pieces: Vec<String> = ids
        .iter()
        .map(|&id| {
            let bytes = vocab.token_bytes(id).unwrap_or_default();
            // a multi-byte character may be split across byte-level tokens
            String::from_utf8(bytes.to_vec()).unwrap_or_else(|_| format!("{bytes:x?}"))
        })
        .collect();
    println!("{text:?} -> {ids:?}");
    println!("pieces {pieces:?}");
    assert_eq!(vocab.decode(&ids)?, text);

    let batch = TokenBatch::encode(&vocab, &["the rain", "all the morning trains"], 16)?;
    println!("padded batch {}x{}", batch.batch_size(), batch.seq_len());
    for b in 0..batch.batch_size() {
        println!("  {:?}", batch.row(b));
    }
    Ok(())
}
