//! Break embedding-distance ties with the combined distance: plain
//! cosine distance plus an alpha-weighted chunk-matching cost.
//!
//! Run with: `cargo run --example rescoring`

use projlang::chunker::ChunkLexicon;
use projlang::embedding::ReferenceProvider;
use projlang::grammar::{parse_grammar, tokenize};
use projlang::projection::rescore_delta_prime;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let src = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/fixtures/doors.grammar"
    ))?;
    let grammar = parse_grammar(&src)?;
    let synth = grammar.enumerate(None)?;
    let lexicon = ChunkLexicon::from_grammar(&grammar)?;
    let provider = ReferenceProvider::new(64, 0);

    // both candidates below contain exactly the same words, so a
    // bag-of-words embedding cannot tell them apart; chunk matching can
    let query = tokenize("pick up the red ball and go through the yellow door");
    for alpha in [0.0, 0.1] {
        let scored = rescore_delta_prime(&query, &synth, &provider, alpha, &lexicon, &grammar)?;
        println!("alpha = {alpha}:");
        for (sentence, score) in scored.iter().take(3) {
            println!("  {score:.4}  {}", sentence.text_joined());
        }
    }
    Ok(())
}
