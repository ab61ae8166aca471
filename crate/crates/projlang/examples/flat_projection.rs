//! Interpret a natural utterance by projecting it onto its nearest
//! synthetic paraphrase with an exhaustive scan of the synthetic set.
//!
//! Run with: `cargo run --example flat_projection`

use projlang::embedding::{load_synonym_lexicon, ReferenceProvider};
use projlang::grammar::{parse_grammar, tokenize};
use projlang::projection::project_flat;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = env!("CARGO_MANIFEST_DIR");
    let grammar = parse_grammar(&std::fs::read_to_string(format!(
        "{root}/fixtures/g1.grammar"
    ))?)?;
    let synth = grammar.enumerate(None)?;

    // the synonym lexicon is what lets out-of-grammar words land on the
    // right paraphrase: "stroll" embeds identically to "go"
    let lexicon = load_synonym_lexicon(format!("{root}/fixtures/synonyms.lex").as_ref())?;
    let provider = ReferenceProvider::new(64, 0).with_lexicon(lexicon);

    for utterance in [
        "go to the red ball",
        "stroll to the crimson sphere",
        "fetch the golden doorway",
    ] {
        let result = project_flat(&tokenize(utterance), &synth, &provider)?;
        println!(
            "{utterance:32} -> {:24} {} (distance {:.4})",
            result.chosen.text_joined(),
            result.chosen.program,
            result.distance
        );
    }
    Ok(())
}
