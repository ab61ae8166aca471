//! Interpret natural language by projecting it onto the output of a
//! synthetic grammar.
//!
//! The pipeline: an expert-written context-free grammar with semantic
//! attachments generates labeled (utterance, program) pairs; arbitrary
//! input sentences are then mapped to their nearest synthetic
//! paraphrase in sentence-embedding space and answered with that
//! paraphrase's program. Search over the synthetic set can be
//! exhaustive, restricted to SimHash buckets, or run as a beam search
//! over partial grammar derivations, with optional bipartite
//! chunk-matching rescoring.
//!
//! Start with the runnable programs under `examples/`, one per major
//! capability:
//!
//! - `generate_data` — grammar parsing and dataset enumeration
//! - `flat_projection` — exhaustive embedding-space projection
//! - `lsh_index` — SimHash fingerprints and multi-probe queries
//! - `hierarchical_search` — beam search over partial derivations
//! - `chunk_matching` — noun chunks and Hungarian assignment
//! - `rescoring` — the alpha-weighted combined distance
//! - `embedding_service` — the line-protocol embedding service

pub mod chunker;
pub mod embedding;
pub mod grammar;
pub mod lsh;
pub mod matching;
pub mod projection;

pub use chunker::{extract_chunks, synth_chunks, Chunk, ChunkLexicon};
pub use embedding::{
    cosine_distance, EmbeddingProvider, EmbeddingVector, FileProvider, ReferenceProvider,
    ServiceProvider,
};
pub use grammar::{parse_grammar, tokenize, Derivation, Grammar, Rule, SyntheticSentence};
pub use lsh::LshIndex;
pub use matching::{chunk_match_cost, hungarian, CostMatrix, Matching};
pub use projection::{
    interpret, project_flat, project_hier, project_lsh, rescore_delta_prime, Artifacts, Mode,
    ProjectionConfig, ProjectionResult,
};
