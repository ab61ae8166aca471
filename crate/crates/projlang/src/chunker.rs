//! Noun chunk extraction.
//!
//! Natural inputs are chunked with a lexicon-driven pattern
//! (determiner? adjective* noun+, longest match, left to right);
//! synthetic sentences are chunked structurally from the np-flagged
//! subtrees of their derivations.

use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

use crate::grammar::{Grammar, GrammarError, SyntheticSentence};

#[derive(Debug, Error)]
pub enum ChunkError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChunkLexicon {
    pub determiners: BTreeSet<String>,
    pub adjectives: BTreeSet<String>,
    pub nouns: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub tokens: Vec<String>,
    /// Half-open (start, end) token indices in the source sentence.
    pub span: (usize, usize),
}

impl Chunk {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

impl ChunkLexicon {
    /// Parse a lexicon file with `[det]`, `[adj]`, `[noun]` sections,
    /// one word per line.
    pub fn load(path: &Path) -> Result<ChunkLexicon, ChunkError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ChunkLexicon, ChunkError> {
        let mut lex = ChunkLexicon::default();
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[det]" => section = Some("det"),
                "[adj]" => section = Some("adj"),
                "[noun]" => section = Some("noun"),
                word if word.starts_with('[') => {
                    return Err(ChunkError::Malformed {
                        line: i + 1,
                        msg: format!("unknown section {word}"),
                    })
                }
                word => {
                    let set = match section {
                        Some("det") => &mut lex.determiners,
                        Some("adj") => &mut lex.adjectives,
                        Some("noun") => &mut lex.nouns,
                        _ => {
                            return Err(ChunkError::Malformed {
                                line: i + 1,
                                msg: "word before any section header".into(),
                            })
                        }
                    };
                    set.insert(word.to_lowercase());
                }
            }
        }
        Ok(lex)
    }

    /// Seed a lexicon from the grammar's np-subtree vocabulary: for
    /// each complete yield of an np-flagged nonterminal, the final
    /// token is a noun and the preceding tokens are adjectives.
    /// Determiners default to a/an/the.
    pub fn from_grammar(g: &Grammar) -> Result<ChunkLexicon, ChunkError> {
        let mut lex = ChunkLexicon::default();
        for det in ["a", "an", "the"] {
            lex.determiners.insert(det.to_string());
        }
        let bound = if g.is_cyclic() { Some(8) } else { None };
        for nt in g.np_nonterminals() {
            for s in g.enumerate_from(nt, bound)? {
                if let Some((noun, adjs)) = s.text.split_last() {
                    lex.nouns.insert(noun.clone());
                    for adj in adjs {
                        lex.adjectives.insert(adj.clone());
                    }
                }
            }
        }
        Ok(lex)
    }

    /// Union with another lexicon (user extensions on top of the
    /// grammar-seeded sets).
    pub fn merge(mut self, other: &ChunkLexicon) -> ChunkLexicon {
        self.determiners.extend(other.determiners.iter().cloned());
        self.adjectives.extend(other.adjectives.iter().cloned());
        self.nouns.extend(other.nouns.iter().cloned());
        self
    }

    fn is_det(&self, t: &str) -> bool {
        self.determiners.contains(t)
    }

    fn is_adj(&self, t: &str) -> bool {
        self.adjectives.contains(t)
    }

    fn is_noun(&self, t: &str) -> bool {
        self.nouns.contains(t)
    }
}

/// Maximal non-overlapping matches of determiner? adjective* noun+,
/// scanned left to right with longest match at each start.
pub fn extract_chunks(tokens: &[String], lexicon: &ChunkLexicon) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let end = longest_match(tokens, i, lexicon);
        if end > i {
            chunks.push(Chunk {
                tokens: tokens[i..end].to_vec(),
                span: (i, end),
            });
            i = end;
        } else {
            i += 1;
        }
    }
    chunks
}

fn longest_match(tokens: &[String], start: usize, lex: &ChunkLexicon) -> usize {
    let mut best = start;
    for det in [0usize, 1] {
        if det == 1 && !(start < tokens.len() && lex.is_det(&tokens[start])) {
            continue;
        }
        let after_det = start + det;
        // a word can be both adjective and noun, so try every
        // adjective-run length rather than consuming greedily
        let mut adj_end = after_det;
        loop {
            let mut noun_end = adj_end;
            while noun_end < tokens.len() && lex.is_noun(&tokens[noun_end]) {
                noun_end += 1;
            }
            if noun_end > adj_end && noun_end > best {
                best = noun_end;
            }
            if adj_end < tokens.len() && lex.is_adj(&tokens[adj_end]) {
                adj_end += 1;
            } else {
                break;
            }
        }
    }
    best
}

/// Yields of the maximal np-flagged subtrees of a synthetic sentence's
/// derivation, in sentence order.
pub fn synth_chunks(s: &SyntheticSentence, g: &Grammar) -> Vec<Chunk> {
    s.derivation
        .np_subtree_spans(g)
        .into_iter()
        .map(|(tokens, span)| Chunk { tokens, span })
        .collect()
}
