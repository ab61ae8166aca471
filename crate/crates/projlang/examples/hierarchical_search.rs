//! Search the grammar's derivation space with a beam instead of scoring
//! every synthetic sentence: partial derivations are linearized with a
//! mask token, scored against the input, and only the best few expanded.
//!
//! Run with: `cargo run --example hierarchical_search`

use projlang::embedding::ReferenceProvider;
use projlang::grammar::{parse_grammar, tokenize};
use projlang::projection::{project_hier, Mode, ProjectionConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let src = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/fixtures/stress.grammar"
    ))?;
    let grammar = parse_grammar(&src)?;
    let provider = ReferenceProvider::new(64, 0);

    let config = ProjectionConfig {
        mode: Mode::Hier,
        beam_width: 5,
        ..ProjectionConfig::default()
    };
    let query = tokenize("go to the red ball then go to the blue door");
    let result = project_hier(&query, &grammar, &provider, &config, None)?;

    println!("chosen:   {}", result.chosen.text_joined());
    println!("program:  {}", result.chosen.program);
    println!("distance: {:.4}", result.distance);
    println!(
        "cost:     {} embeddings over {} beam steps (the grammar derives tens of thousands of sentences)",
        result.diagnostics.embed_calls,
        result.diagnostics.beam_steps.unwrap_or(0)
    );
    Ok(())
}
