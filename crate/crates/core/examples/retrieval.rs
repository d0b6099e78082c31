//! Index interpretations, query with sentences from references, report MRR.
use lyricfusion::retrieval::{evaluate_retrieval, make_queries, random_embedding_mrr, EmbeddingIndex, TfIdfEmbedder};

fn main() -> anyhow::Result<()> {
    let docs: Vec<(String, String)> = [
        ("s1", "a song about the sea and a sailor who never comes home"),
        ("s2", "heartbreak in a small town, told through the diner at night"),
        ("s3", "a protest song against the war and the men who start it"),
        ("s4", "the singer misses their mother and the kitchen of their childhood"),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    let refs: Vec<(String, String)> = [
        ("s1", "The sailor is lost at sea. He never comes back home to her."),
        ("s2", "It is about a breakup in a small town. The diner is where they met."),
        ("s3", "A clear protest against war. It blames the men who start wars."),
        ("s4", "Missing a mother who has died. The kitchen stands for childhood."),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();

    let texts: Vec<&str> = docs.iter().map(|(_, t)| t.as_str()).collect();
    let embedder = TfIdfEmbedder::fit(&texts);
    let index = EmbeddingIndex::build(&docs, &embedder)?;
    let queries = make_queries(&refs, 1);
    let report = evaluate_retrieval(&queries, &index, &embedder)?;
    for r in &report.ranks {
        println!("rank {}  {:?}", r.rank, r.query);
    }
    println!("MRR {:.3} over {} songs", report.mrr, report.database_size);
    println!("random embeddings, same size: {:.3}", random_embedding_mrr(4, 32, 200, 4, 0)?);
    Ok(())
}
