//! Extract noun-phrase chunks from an utterance and align them with a
//! candidate's chunks via minimum-cost bipartite matching.
//!
//! Run with: `cargo run --example chunk_matching`

use projlang::chunker::{extract_chunks, ChunkLexicon};
use projlang::embedding::ReferenceProvider;
use projlang::grammar::{parse_grammar, tokenize};
use projlang::matching::chunk_match_cost;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let src = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/fixtures/doors.grammar"
    ))?;
    let grammar = parse_grammar(&src)?;
    // det/adj/noun vocabulary seeded straight from the grammar's
    // noun-phrase subtrees
    let lexicon = ChunkLexicon::from_grammar(&grammar)?;

    let utterance = tokenize("pick up the red ball and go through the yellow door");
    let chunks = extract_chunks(&utterance, &lexicon);
    println!("chunks of the utterance:");
    for c in &chunks {
        println!("  {:?} at {:?}", c.tokens.join(" "), c.span);
    }

    let provider = ReferenceProvider::new(64, 0);
    for candidate in [
        "go through the yellow door and pick up the red ball",
        "go through the red door and pick up the yellow ball",
    ] {
        let cand_chunks = extract_chunks(&tokenize(candidate), &lexicon);
        let (cost, matching) = chunk_match_cost(&chunks, &cand_chunks, &provider)?;
        println!(
            "matching cost vs {candidate:52} = {cost:.4} ({} pairs)",
            matching.pairs.len()
        );
    }
    Ok(())
}
