//! Composes a latent semantic tree over a sentence and prints the bracketing
//! with per-constituent attention weights.
//!
//!     cargo run --example build_tree [-- "your sentence here"]

use tce::config::RunConfig;
use tce::graph::Graph;
use tce::params::ParamStore;
use tce::query::{self, bracketed, TreeMode};
use tce::vocab::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> tce::Result<()> {
    let sentence = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "a baby plays with a fatty cat".to_string());
    let tokens = Vocabulary::tokenize(&sentence);
    let vocab = Vocabulary::from_tokens(tokens.iter().cloned().collect::<std::collections::BTreeSet<_>>())?;
    let ids = vocab.encode(&sentence)?;

    let cfg = RunConfig { d_w: 16, d_t: 16, d_ta: 8, seed: 11, ..RunConfig::desk() };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    query::init_params(&mut store, &cfg, vocab.len(), &mut rng)?;

    let mut graph = Graph::new();
    let encoded = query::encode_query(&mut graph, &store, &cfg, &ids, &mut TreeMode::Eval)?;

    println!("sentence: {sentence}");
    println!("tree:     {}", bracketed(&encoded.tree, &tokens));
    println!();
    println!("merge order (selected adjacent pair per layer): {:?}", encoded.tree.merges);
    let weights: Vec<String> =
        encoded.tree.node_weights.iter().map(|w| format!("{w:.3}")).collect();
    println!("constituent attention weights: [{}]", weights.join(", "));
    println!(
        "query embedding: {} dims, first values {:?}",
        graph.value(encoded.embedding).numel(),
        &graph.value(encoded.embedding).data()[..4.min(graph.value(encoded.embedding).numel())]
    );
    Ok(())
}
