//! Embeds a few texts through a running embedding service.
//!
//! ```text
//! cargo run --example embed_client -- http://127.0.0.1:8080 768
//! ```

use centroid_cache::embed::{fetch_embeddings, EmbedClient, EmbedClientConfig};
use centroid_cache::vector::cosine_similarity;

fn main() -> centroid_cache::Result<()> {
    let mut args = std::env::args().skip(1);
    let url = args.next().unwrap_or_else(|| "http://127.0.0.1:8080".into());
    let dim = args.next().and_then(|d| d.parse().ok()).unwrap_or(768);
    let client = EmbedClient::new(EmbedClientConfig { url, dim, ..Default::default() })?;

    let texts: Vec<String> = [
        "How do I reset my password?",
        "I forgot my password, how can I change it?",
        "What is the capital of France?",
    ]
    .map(String::from)
    .to_vec();
    let vectors = match fetch_embeddings(&client, &texts) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("embedding service unavailable at {}: {e}", client.config().url);
            std::process::exit(1);
        }
    };
    for (i, a) in texts.iter().enumerate() {
        for (j, b) in texts.iter().enumerate().skip(i + 1) {
            let sim = cosine_similarity(&vectors[i], &vectors[j])?.value();
            println!("{sim:.3}  {a:?} vs {b:?}");
        }
    }
    Ok(())
}
