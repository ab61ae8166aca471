//! Projection of natural utterances onto synthetic paraphrases.
//!
//! Three search strategies share one contract: `project_flat` scores
//! every synthetic sentence, `project_lsh` restricts scoring to nearby
//! fingerprint buckets, and `project_hier` runs beam search over
//! partial derivations, scoring masked linearizations. Candidates can
//! be rescored with an alpha-weighted chunk matching cost, and
//! `interpret` maps the chosen sentence to its program.

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Serialize;
use thiserror::Error;

use crate::chunker::{extract_chunks, synth_chunks, Chunk, ChunkError, ChunkLexicon};
use crate::embedding::{
    cosine_distance, EmbedError, EmbeddingProvider, EmbeddingVector, DEFAULT_MASK_TOKEN,
};
use crate::grammar::{Derivation, Grammar, GrammarError, SyntheticSentence};
use crate::lsh::{LshError, LshIndex};
use crate::matching::{chunk_match_cost, MatchError};

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("empty utterance")]
    EmptyUtterance,
    #[error("empty synthetic sentence set")]
    EmptySynthSet,
    #[error("no derivation matches chunk count ({chunks} chunks, {pruned} hypotheses pruned)")]
    ChunkCountMismatch { chunks: usize, pruned: usize },
    #[error("beam search produced no complete sentence")]
    NoCompletion,
    #[error("mode {0} requires {1}")]
    MissingArtifact(&'static str, &'static str),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Lsh(#[from] LshError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Flat,
    Lsh,
    Hier,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Flat => write!(f, "flat"),
            Mode::Lsh => write!(f, "lsh"),
            Mode::Hier => write!(f, "hier"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionConfig {
    pub mode: Mode,
    pub beam_width: usize,
    pub alpha: f64,
    pub lsh_radius: u32,
    pub np_pruning: bool,
    /// Expand np-flagged nonterminals by chunk alignment instead of
    /// per-rule beam scoring.
    pub chunk_align: bool,
    pub rescore_with_matching: bool,
    pub max_depth: Option<usize>,
    pub mask_token: String,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            mode: Mode::Flat,
            beam_width: 5,
            alpha: 0.0,
            lsh_radius: 2,
            np_pruning: false,
            chunk_align: false,
            rescore_with_matching: false,
            max_depth: None,
            mask_token: DEFAULT_MASK_TOKEN.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    pub embed_calls: usize,
    pub candidates_scored: usize,
    pub pruned_hypotheses: usize,
    /// Radius actually used after any automatic escalation (lsh mode).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius_used: Option<u32>,
    /// Beam iterations executed (hier mode).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beam_steps: Option<usize>,
    /// Largest number of candidates scored in any single beam step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_step_candidates: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoredCandidate {
    pub text: String,
    pub program: String,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub chosen: SyntheticSentence,
    pub distance: f64,
    /// Remaining candidates sorted ascending by distance, capped.
    pub runner_ups: Vec<ScoredCandidate>,
    pub diagnostics: Diagnostics,
}

const RUNNER_UP_CAP: usize = 10;

/// Provider wrapper counting embed calls for diagnostics.
pub struct CountingProvider<'a> {
    inner: &'a dyn EmbeddingProvider,
    calls: AtomicUsize,
}

impl<'a> CountingProvider<'a> {
    pub fn new(inner: &'a dyn EmbeddingProvider) -> Self {
        CountingProvider {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl EmbeddingProvider for CountingProvider<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, tokens: &[String]) -> Result<EmbeddingVector, EmbedError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.embed(tokens)
    }
}

fn pick_min(scored: Vec<(f64, SyntheticSentence)>) -> (SyntheticSentence, f64, Vec<ScoredCandidate>) {
    let mut scored: Vec<(f64, SyntheticSentence)> = scored;
    scored.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| a.1.text_joined().cmp(&b.1.text_joined()))
    });
    let mut it = scored.into_iter();
    let (distance, chosen) = it.next().expect("non-empty candidate set");
    let runner_ups = it
        .take(RUNNER_UP_CAP)
        .map(|(d, s)| ScoredCandidate {
            text: s.text_joined(),
            program: s.program,
            distance: d,
        })
        .collect();
    (chosen, distance, runner_ups)
}

/// Exhaustive projection: argmin of cosine distance over every
/// synthetic sentence, ties broken by lexicographically smallest text.
pub fn project_flat(
    x: &[String],
    synth: &[SyntheticSentence],
    provider: &dyn EmbeddingProvider,
) -> Result<ProjectionResult, ProjectError> {
    if x.is_empty() {
        return Err(ProjectError::EmptyUtterance);
    }
    if synth.is_empty() {
        return Err(ProjectError::EmptySynthSet);
    }
    let counting = CountingProvider::new(provider);
    let xv = counting.embed(x)?;
    let mut scored = Vec::with_capacity(synth.len());
    for s in synth {
        let sv = counting.embed(&s.text)?;
        scored.push((cosine_distance(&xv, &sv)?, s.clone()));
    }
    let candidates_scored = scored.len();
    let (chosen, distance, runner_ups) = pick_min(scored);
    Ok(ProjectionResult {
        chosen,
        distance,
        runner_ups,
        diagnostics: Diagnostics {
            embed_calls: counting.calls(),
            candidates_scored,
            ..Diagnostics::default()
        },
    })
}

/// LSH-restricted projection. Empty candidate sets escalate the radius
/// by one until some bucket is hit; the radius actually used lands in
/// diagnostics.
pub fn project_lsh(
    x: &[String],
    index: &LshIndex,
    provider: &dyn EmbeddingProvider,
    radius: u32,
) -> Result<ProjectionResult, ProjectError> {
    if x.is_empty() {
        return Err(ProjectError::EmptyUtterance);
    }
    let counting = CountingProvider::new(provider);
    let xv = counting.embed(x)?;
    let fp = index.fingerprint(&xv)?;
    let mut radius_used = radius;
    let mut ids = index.query_fingerprint(fp, radius_used);
    while ids.is_empty() && radius_used < index.bits() {
        radius_used += 1;
        ids = index.query_fingerprint(fp, radius_used);
    }
    let mut scored = Vec::with_capacity(ids.len());
    for id in &ids {
        let entry = &index.entries()[*id];
        let d = cosine_distance(&xv, &entry.vector)?;
        scored.push((
            d,
            SyntheticSentence {
                text: entry.text.split_whitespace().map(str::to_string).collect(),
                program: entry.program.clone(),
                derivation: Derivation::start("_indexed"),
            },
        ));
    }
    let candidates_scored = scored.len();
    let (chosen, distance, runner_ups) = pick_min(scored);
    Ok(ProjectionResult {
        chosen,
        distance,
        runner_ups,
        diagnostics: Diagnostics {
            embed_calls: counting.calls(),
            candidates_scored,
            radius_used: Some(radius_used),
            ..Diagnostics::default()
        },
    })
}

struct Hypothesis {
    derivation: Derivation,
    score: f64,
    chunks_consumed: u64, // bitmask over input chunks
}

/// Per-grammar cache of complete yields derivable from each np-flagged
/// nonterminal, with their derivations and embeddings.
struct NpYieldCache {
    by_nt: BTreeMap<String, Vec<(String, Derivation, EmbeddingVector)>>,
}

impl NpYieldCache {
    fn build(
        g: &Grammar,
        provider: &dyn EmbeddingProvider,
        max_depth: Option<usize>,
    ) -> Result<NpYieldCache, ProjectError> {
        let mut by_nt = BTreeMap::new();
        for nt in g.np_nonterminals() {
            let mut yields = Vec::new();
            for s in g.enumerate_from(nt, max_depth)? {
                let v = provider.embed(&s.text)?;
                yields.push((s.text_joined(), s.derivation, v));
            }
            by_nt.insert(nt.clone(), yields);
        }
        Ok(NpYieldCache { by_nt })
    }
}

/// Hierarchical beam search over partial derivations.
///
/// Each step expands the leftmost frontier nonterminal of every beam
/// hypothesis; partial derivations are scored by cosine distance
/// between the input and their masked linearization. Np-flagged sites
/// can instead be committed wholesale to the best-matching noun chunk.
/// Completed sentences are re-ranked at the end (optionally with the
/// matching-cost rescoring).
pub fn project_hier(
    x: &[String],
    g: &Grammar,
    provider: &dyn EmbeddingProvider,
    config: &ProjectionConfig,
    lexicon: Option<&ChunkLexicon>,
) -> Result<ProjectionResult, ProjectError> {
    if x.is_empty() {
        return Err(ProjectError::EmptyUtterance);
    }
    if g.is_cyclic() && config.max_depth.is_none() {
        return Err(ProjectError::Grammar(GrammarError::CyclicNeedsDepth));
    }
    let k = config.beam_width.max(1);
    let counting = CountingProvider::new(provider);
    let xv = counting.embed(x)?;

    let need_chunks = config.np_pruning || config.chunk_align;
    let owned_lexicon;
    let x_chunks: Vec<Chunk> = if need_chunks {
        let lex = match lexicon {
            Some(l) => l,
            None => {
                owned_lexicon = ChunkLexicon::from_grammar(g)?;
                &owned_lexicon
            }
        };
        extract_chunks(x, lex)
    } else {
        Vec::new()
    };
    let x_chunk_vecs: Vec<EmbeddingVector> = x_chunks
        .iter()
        .map(|c| counting.embed(&c.tokens))
        .collect::<Result<_, _>>()?;

    let np_cache = if config.chunk_align && !g.np_nonterminals().is_empty() {
        Some(NpYieldCache::build(g, &counting, config.max_depth)?)
    } else {
        None
    };

    let mut diagnostics = Diagnostics::default();
    let mut beam = vec![Hypothesis {
        derivation: Derivation::start(g.start_symbol()),
        score: 1.0, // bare start linearizes to a lone mask (zero vector)
        chunks_consumed: 0,
    }];
    let mut completed: Vec<(f64, Derivation)> = Vec::new();
    let mut completed_keys: HashSet<String> = HashSet::new();
    let mut steps = 0usize;
    let mut max_step_candidates = 0usize;
    let mut first_expansion_done = false;

    while !beam.is_empty() {
        steps += 1;
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in beam.drain(..) {
            let frontier = hyp.derivation.frontier();
            if frontier.is_empty() {
                let text = hyp.derivation.linearize(g, &config.mask_token).join(" ");
                if completed_keys.insert(text) {
                    completed.push((hyp.score, hyp.derivation));
                }
                continue;
            }
            let site_nt = &frontier[0];
            let aligned = if config.chunk_align && g.is_np(site_nt) {
                align_np_site(
                    &hyp,
                    site_nt,
                    np_cache.as_ref().expect("np cache built"),
                    &x_chunk_vecs,
                )?
            } else {
                None
            };
            match aligned {
                Some((chunk_idx, sub)) => {
                    let new_deriv = hyp.derivation.graft(0, &sub)?;
                    candidates.push(Hypothesis {
                        derivation: new_deriv,
                        score: f64::NAN, // rescored below
                        chunks_consumed: hyp.chunks_consumed | (1 << chunk_idx),
                    });
                }
                None => {
                    let mut exps = hyp.derivation.expansions(g, 0)?;
                    if let Some(bound) = config.max_depth {
                        exps.retain(|d| d.depth() <= bound);
                    }
                    for d in exps {
                        candidates.push(Hypothesis {
                            derivation: d,
                            score: f64::NAN,
                            chunks_consumed: hyp.chunks_consumed,
                        });
                    }
                }
            }
        }

        if config.np_pruning && !first_expansion_done {
            let want = x_chunks.len();
            let before = candidates.len();
            candidates.retain(|h| h.derivation.np_group_count(g) == want);
            diagnostics.pruned_hypotheses += before - candidates.len();
            if candidates.is_empty() {
                return Err(ProjectError::ChunkCountMismatch {
                    chunks: want,
                    pruned: diagnostics.pruned_hypotheses,
                });
            }
        }
        first_expansion_done = true;

        // score and dedup by structural key
        let mut seen: HashSet<String> = HashSet::new();
        let mut scored: Vec<(String, Hypothesis)> = Vec::new();
        for mut hyp in candidates {
            let key = hyp.derivation.template_key(g);
            if !seen.insert(key.clone()) {
                continue;
            }
            let lin = hyp.derivation.linearize(g, &config.mask_token);
            let lv = counting.embed(&lin)?;
            hyp.score = cosine_distance(&xv, &lv)?;
            diagnostics.candidates_scored += 1;
            scored.push((key, hyp));
        }
        max_step_candidates = max_step_candidates.max(scored.len());
        scored.sort_by(|a, b| a.1.score.total_cmp(&b.1.score).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        beam = scored.into_iter().map(|(_, h)| h).collect();
    }

    if completed.is_empty() {
        return Err(ProjectError::NoCompletion);
    }

    let mut finals: Vec<(f64, SyntheticSentence)> = Vec::with_capacity(completed.len());
    for (score, derivation) in completed {
        let text = derivation.linearize(g, &config.mask_token);
        let program = derivation.semantics(g)?;
        let s = SyntheticSentence {
            text,
            program,
            derivation,
        };
        let d = if config.rescore_with_matching && config.alpha != 0.0 {
            let s_chunks = synth_chunks(&s, g);
            let (cost, _) = chunk_match_cost(&x_chunks, &s_chunks, &counting)?;
            score + config.alpha * cost
        } else {
            score
        };
        finals.push((d, s));
    }
    let (chosen, distance, runner_ups) = pick_min(finals);
    diagnostics.embed_calls = counting.calls();
    diagnostics.beam_steps = Some(steps);
    diagnostics.max_step_candidates = Some(max_step_candidates);
    Ok(ProjectionResult {
        chosen,
        distance,
        runner_ups,
        diagnostics,
    })
}

/// Greedy chunk alignment for an np-flagged frontier site: pick the
/// unconsumed input chunk closest to any complete yield of the
/// nonterminal, then commit the single best-matching yield subtree.
/// Returns None when no chunk is left to consume.
fn align_np_site(
    hyp: &Hypothesis,
    nt: &str,
    cache: &NpYieldCache,
    x_chunk_vecs: &[EmbeddingVector],
) -> Result<Option<(usize, Derivation)>, ProjectError> {
    let yields = match cache.by_nt.get(nt) {
        Some(y) if !y.is_empty() => y,
        _ => return Ok(None),
    };
    let mut best: Option<(f64, usize, &str, &Derivation)> = None;
    for (ci, cv) in x_chunk_vecs.iter().enumerate() {
        if hyp.chunks_consumed & (1 << ci) != 0 {
            continue;
        }
        for (text, deriv, yv) in yields {
            let d = cosine_distance(cv, yv)?;
            let better = match &best {
                None => true,
                Some((bd, bci, btext, _)) => {
                    d < *bd - 1e-12
                        || ((d - *bd).abs() <= 1e-12
                            && (ci < *bci || (ci == *bci && text.as_str() < *btext)))
                }
            };
            if better {
                best = Some((d, ci, text, deriv));
            }
        }
    }
    Ok(best.map(|(_, ci, _, deriv)| (ci, deriv.clone())))
}

/// Score candidates with the combined distance
/// delta' = delta + alpha * chunk matching cost, sorted ascending.
pub fn rescore_delta_prime(
    x: &[String],
    candidates: &[SyntheticSentence],
    provider: &dyn EmbeddingProvider,
    alpha: f64,
    lexicon: &ChunkLexicon,
    g: &Grammar,
) -> Result<Vec<(SyntheticSentence, f64)>, ProjectError> {
    if x.is_empty() {
        return Err(ProjectError::EmptyUtterance);
    }
    if candidates.is_empty() {
        return Err(ProjectError::EmptySynthSet);
    }
    let xv = provider.embed(x)?;
    let x_chunks = extract_chunks(x, lexicon);
    let mut scored = Vec::with_capacity(candidates.len());
    for s in candidates {
        let sv = provider.embed(&s.text)?;
        let mut score = cosine_distance(&xv, &sv)?;
        if alpha != 0.0 {
            let s_chunks = synth_chunks(s, g);
            let (cost, _) = chunk_match_cost(&x_chunks, &s_chunks, provider)?;
            score += alpha * cost;
        }
        scored.push((s.clone(), score));
    }
    scored.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then_with(|| a.0.text_joined().cmp(&b.0.text_joined()))
    });
    Ok(scored)
}

/// Everything a projection mode may need.
pub struct Artifacts<'a> {
    pub grammar: Option<&'a Grammar>,
    pub synth: Option<&'a [SyntheticSentence]>,
    pub index: Option<&'a LshIndex>,
    pub lexicon: Option<&'a ChunkLexicon>,
}

/// End-to-end interpretation: project, then read the program off the
/// chosen synthetic sentence.
pub fn interpret(
    x: &[String],
    artifacts: &Artifacts,
    provider: &dyn EmbeddingProvider,
    config: &ProjectionConfig,
) -> Result<(String, ProjectionResult), ProjectError> {
    if x.is_empty() {
        return Err(ProjectError::EmptyUtterance);
    }
    let result = match config.mode {
        Mode::Flat => {
            let synth = artifacts
                .synth
                .ok_or(ProjectError::MissingArtifact("flat", "synthetic sentences"))?;
            let base = project_flat(x, synth, provider)?;
            if config.rescore_with_matching && config.alpha != 0.0 {
                let g = artifacts
                    .grammar
                    .ok_or(ProjectError::MissingArtifact("rescoring", "grammar"))?;
                rescore_candidates(x, synth, provider, config, g, artifacts.lexicon, base)?
            } else {
                base
            }
        }
        Mode::Lsh => {
            let index = artifacts
                .index
                .ok_or(ProjectError::MissingArtifact("lsh", "an index"))?;
            project_lsh(x, index, provider, config.lsh_radius)?
        }
        Mode::Hier => {
            let g = artifacts
                .grammar
                .ok_or(ProjectError::MissingArtifact("hier", "a grammar"))?;
            project_hier(x, g, provider, config, artifacts.lexicon)?
        }
    };
    Ok((result.chosen.program.clone(), result))
}

fn rescore_candidates(
    x: &[String],
    synth: &[SyntheticSentence],
    provider: &dyn EmbeddingProvider,
    config: &ProjectionConfig,
    g: &Grammar,
    lexicon: Option<&ChunkLexicon>,
    base: ProjectionResult,
) -> Result<ProjectionResult, ProjectError> {
    let owned;
    let lex = match lexicon {
        Some(l) => l,
        None => {
            owned = ChunkLexicon::from_grammar(g)?;
            &owned
        }
    };
    let scored = rescore_delta_prime(x, synth, provider, config.alpha, lex, g)?;
    let mut it = scored.into_iter();
    let (chosen, distance) = it.next().expect("candidates nonempty");
    let runner_ups = it
        .take(RUNNER_UP_CAP)
        .map(|(s, d)| ScoredCandidate {
            text: s.text_joined(),
            program: s.program,
            distance: d,
        })
        .collect();
    Ok(ProjectionResult {
        chosen,
        distance,
        runner_ups,
        diagnostics: base.diagnostics,
    })
}
