//! Enumerate a grammar into labeled (utterance, program) pairs and write
//! them as a dataset file.
//!
//! Run with: `cargo run --example generate_data`

use projlang::grammar::{parse_grammar, write_dataset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let src = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/fixtures/doors.grammar"
    ))?;
    let grammar = parse_grammar(&src)?;
    let sentences = grammar.enumerate(None)?;

    println!("enumerated {} sentences, for example:", sentences.len());
    for s in sentences.iter().take(5) {
        println!("  {:40} => {}", s.text_joined(), s.program);
    }

    let out = std::env::temp_dir().join("doors_synth.jsonl");
    write_dataset(std::fs::File::create(&out)?, &sentences)?;
    println!("wrote dataset to {}", out.display());
    Ok(())
}
