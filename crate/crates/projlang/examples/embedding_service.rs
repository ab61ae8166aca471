//! Serve embeddings over TCP from one thread and project against that
//! service from another, as a stand-in for an external embedding model.
//!
//! Run with: `cargo run --example embedding_service`

use std::net::TcpListener;

use projlang::embedding::{serve_embeddings, ReferenceProvider, ServiceProvider};
use projlang::grammar::{parse_grammar, tokenize};
use projlang::projection::project_flat;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    std::thread::spawn(move || {
        let provider = ReferenceProvider::new(64, 0);
        serve_embeddings(listener, &provider).ok();
    });
    println!("embedding service listening on {addr}");

    let src = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/fixtures/g1.grammar"
    ))?;
    let synth = parse_grammar(&src)?.enumerate(None)?;

    let provider = ServiceProvider::connect(&addr.to_string())?;
    let result = project_flat(&tokenize("go to the yellow door"), &synth, &provider)?;
    println!(
        "service returned dim {}; chosen program: {}",
        projlang::embedding::EmbeddingProvider::dim(&provider),
        result.chosen.program
    );
    Ok(())
}
