//! Build a SimHash index over a synthetic set, save and reload it, and
//! answer queries by probing a Hamming ball around the query fingerprint.
//!
//! Run with: `cargo run --example lsh_index`

use projlang::embedding::ReferenceProvider;
use projlang::grammar::{parse_grammar, tokenize};
use projlang::lsh::LshIndex;
use projlang::projection::project_lsh;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let src = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/fixtures/doors.grammar"
    ))?;
    let synth = parse_grammar(&src)?.enumerate(None)?;
    let provider = ReferenceProvider::new(64, 0);

    let index = LshIndex::build(&synth, &provider, 16, 1)?;
    println!(
        "indexed {} sentences into {} buckets",
        index.len(),
        index.bucket_count()
    );

    let path = std::env::temp_dir().join("doors.index");
    index.save(&path)?;
    let index = LshIndex::load(&path)?;
    println!("round-tripped index through {}", path.display());

    let query = tokenize("pick up the yellow ball");
    for radius in [0, 2, 4] {
        let result = project_lsh(&query, &index, &provider, radius)?;
        println!(
            "radius {radius}: {} (distance {:.4}, scored {} candidates)",
            result.chosen.program, result.distance, result.diagnostics.candidates_scored
        );
    }
    Ok(())
}
