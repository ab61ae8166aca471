//! Command-line pipeline: generate synthetic data, build an LSH index,
//! project queries, and score predictions.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use projlang::chunker::ChunkLexicon;
use projlang::embedding::{
    load_synonym_lexicon, EmbeddingProvider, FileProvider, ReferenceProvider, ServiceProvider,
};
use projlang::grammar::{
    parse_grammar, read_dataset, tokenize, write_dataset, Grammar,
    SyntheticSentence,
};
use projlang::lsh::LshIndex;
use projlang::projection::{interpret, Artifacts, Diagnostics, Mode, ProjectionConfig};

#[derive(Parser)]
#[command(name = "projlang", about = "Synthetic-grammar projection pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate a grammar into a synthetic dataset file.
    Generate {
        #[arg(long)]
        grammar: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_depth: Option<usize>,
    },
    /// Build an LSH index over a synthetic dataset.
    Index {
        /// Synthetic dataset file (from `generate`).
        synth: PathBuf,
        #[command(flatten)]
        embeddings: EmbeddingArgs,
        /// Fingerprint length in bits.
        #[arg(long, default_value_t = 16)]
        bits: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project input utterances (one per line) onto the synthetic set.
    Project {
        /// Input file, or '-' for stdin.
        input: PathBuf,
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[command(flatten)]
        embeddings: EmbeddingArgs,
        #[arg(long, value_parser = parse_mode, default_value = "flat")]
        mode: Mode,
        /// Beam width for hierarchical search.
        #[arg(long, default_value_t = 5)]
        beam: usize,
        /// Weight of the chunk-matching cost in the combined distance.
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        /// Multi-probe Hamming radius for lsh mode.
        #[arg(long, default_value_t = 2)]
        radius: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Chunker lexicon file extending the grammar-seeded lexicon.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Output file (default stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_depth: Option<usize>,
        /// Discard hypotheses whose noun-phrase group count mismatches
        /// the input's chunk count (hier mode).
        #[arg(long, default_value_t = false)]
        np_pruning: bool,
        /// Disable chunk-aligned expansion of noun-phrase nonterminals
        /// (hier mode).
        #[arg(long, default_value_t = false)]
        no_chunk_align: bool,
    },
    /// Exact-match program accuracy of predictions against gold.
    Eval { pred: PathBuf, gold: PathBuf },
}

#[derive(Args)]
struct EmbeddingArgs {
    /// Provider spec: `reference:dim=64[,seed=S][,lexicon=PATH][,mask=TOK]`,
    /// `file:PATH`, or `service:HOST:PORT`.
    #[arg(long, default_value = "reference:dim=64")]
    embeddings: String,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "flat" => Ok(Mode::Flat),
        "lsh" => Ok(Mode::Lsh),
        "hier" => Ok(Mode::Hier),
        other => Err(format!("unknown mode '{other}' (expected flat|lsh|hier)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

type AnyError = Box<dyn std::error::Error>;

fn run(cli: Cli) -> Result<(), AnyError> {
    match cli.command {
        Command::Generate {
            grammar,
            out,
            max_depth,
        } => cmd_generate(&grammar, &out, max_depth),
        Command::Index {
            synth,
            embeddings,
            bits,
            seed,
            out,
        } => cmd_index(&synth, &embeddings.embeddings, bits, seed, &out),
        Command::Project {
            input,
            grammar,
            index,
            embeddings,
            mode,
            beam,
            alpha,
            radius,
            seed,
            lexicon,
            out,
            max_depth,
            np_pruning,
            no_chunk_align,
        } => cmd_project(ProjectArgs {
            input,
            grammar,
            index,
            embeddings: embeddings.embeddings,
            mode,
            beam,
            alpha,
            radius,
            seed,
            lexicon,
            out,
            max_depth,
            np_pruning,
            chunk_align: !no_chunk_align,
        }),
        Command::Eval { pred, gold } => cmd_eval(&pred, &gold),
    }
}

fn load_grammar(path: &Path) -> Result<Grammar, AnyError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("reading grammar {}: {e}", path.display()))?;
    Ok(parse_grammar(&text)?)
}

fn cmd_generate(grammar: &Path, out: &Path, max_depth: Option<usize>) -> Result<(), AnyError> {
    let g = load_grammar(grammar)?;
    let sentences = g.enumerate(max_depth)?;
    let f = BufWriter::new(File::create(out)?);
    write_dataset(f, &sentences)?;
    println!("generated {} sentences", sentences.len());
    Ok(())
}

fn make_provider(spec: &str, default_seed: u64) -> Result<Box<dyn EmbeddingProvider>, AnyError> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "reference" => {
            let mut params: HashMap<&str, &str> = HashMap::new();
            for part in rest.split(',').filter(|p| !p.is_empty()) {
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| format!("bad reference parameter '{part}'"))?;
                params.insert(k, v);
            }
            let dim: usize = params.get("dim").unwrap_or(&"64").parse()?;
            let seed: u64 = match params.get("seed") {
                Some(s) => s.parse()?,
                None => default_seed,
            };
            let mut provider = ReferenceProvider::new(dim, seed);
            if let Some(path) = params.get("lexicon") {
                provider = provider.with_lexicon(load_synonym_lexicon(Path::new(path))?);
            }
            if let Some(mask) = params.get("mask") {
                provider = provider.with_mask_token(mask);
            }
            Ok(Box::new(provider))
        }
        "file" => Ok(Box::new(FileProvider::load(Path::new(rest))?)),
        "service" => {
            let endpoint = std::env::var("PROJLANG_EMBED_ENDPOINT").unwrap_or_else(|_| rest.to_string());
            Ok(Box::new(ServiceProvider::connect(&endpoint)?))
        }
        other => Err(format!("unknown embedding provider kind '{other}'").into()),
    }
}

fn cmd_index(
    synth: &Path,
    embeddings: &str,
    bits: u32,
    seed: u64,
    out: &Path,
) -> Result<(), AnyError> {
    let records = read_dataset(BufReader::new(File::open(synth)?))?;
    let provider = make_provider(embeddings, seed)?;
    let items: Result<Vec<(String, String, _)>, AnyError> = records
        .iter()
        .map(|r| {
            let tokens: Vec<String> = r.text.split_whitespace().map(str::to_string).collect();
            let v = provider.embed(&tokens)?;
            Ok((r.text.clone(), r.program.clone(), v))
        })
        .collect();
    let index = LshIndex::from_embedded(items?, bits, seed, provider.dim())?;
    index.save(out)?;
    println!(
        "indexed {} entries into {} buckets ({} bits)",
        index.len(),
        index.bucket_count(),
        bits
    );
    Ok(())
}

struct ProjectArgs {
    input: PathBuf,
    grammar: Option<PathBuf>,
    index: Option<PathBuf>,
    embeddings: String,
    mode: Mode,
    beam: usize,
    alpha: f64,
    radius: u32,
    seed: u64,
    lexicon: Option<PathBuf>,
    out: Option<PathBuf>,
    max_depth: Option<usize>,
    np_pruning: bool,
    chunk_align: bool,
}

#[derive(Serialize)]
struct OutputRecord<'a> {
    input: &'a str,
    chosen_text: String,
    program: String,
    distance: f64,
    mode: Mode,
    alpha: f64,
    diagnostics: &'a Diagnostics,
}

fn cmd_project(args: ProjectArgs) -> Result<(), AnyError> {
    let provider = make_provider(&args.embeddings, args.seed)?;

    let grammar = match &args.grammar {
        Some(p) => Some(load_grammar(p)?),
        None => None,
    };
    let index = match &args.index {
        Some(p) => Some(LshIndex::load(p)?),
        None => None,
    };
    match args.mode {
        Mode::Flat | Mode::Hier if grammar.is_none() => {
            return Err(format!("--mode {} requires --grammar", args.mode).into());
        }
        Mode::Lsh if index.is_none() => {
            return Err("--mode lsh requires --index".into());
        }
        _ => {}
    }
    let synth: Option<Vec<SyntheticSentence>> = match args.mode {
        Mode::Flat => Some(grammar.as_ref().unwrap().enumerate(args.max_depth)?),
        _ => None,
    };
    let lexicon = match (&args.lexicon, &grammar) {
        (Some(path), Some(g)) => Some(ChunkLexicon::from_grammar(g)?.merge(&ChunkLexicon::load(path)?)),
        (Some(path), None) => Some(ChunkLexicon::load(path)?),
        (None, _) => None,
    };

    let config = ProjectionConfig {
        mode: args.mode,
        beam_width: args.beam,
        alpha: args.alpha,
        lsh_radius: args.radius,
        np_pruning: args.np_pruning,
        chunk_align: args.chunk_align,
        rescore_with_matching: args.alpha != 0.0,
        max_depth: args.max_depth,
        ..ProjectionConfig::default()
    };
    let artifacts = Artifacts {
        grammar: grammar.as_ref(),
        synth: synth.as_deref(),
        index: index.as_ref(),
        lexicon: lexicon.as_ref(),
    };

    let input_text = if args.input == Path::new("-") {
        let mut buf = String::new();
        std::io::stdin().read_to_string(&mut buf)?;
        buf
    } else {
        std::fs::read_to_string(&args.input)?
    };

    let mut writer: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };

    for line in input_text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tokens = tokenize(line);
        let (program, result) = interpret(&tokens, &artifacts, provider.as_ref(), &config)?;
        let record = OutputRecord {
            input: line,
            chosen_text: result.chosen.text_joined(),
            program,
            distance: result.distance,
            mode: args.mode,
            alpha: args.alpha,
            diagnostics: &result.diagnostics,
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Pull the program out of a prediction/gold line: a JSON record's
/// "program" field, or the raw line for plain-text files. Dataset
/// version headers are skipped.
fn programs_from_file(path: &Path) -> Result<Vec<String>, AnyError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(line) {
            Ok(Value::Object(map)) => {
                if let Some(Value::String(p)) = map.get("program") {
                    out.push(p.clone());
                } else if map.contains_key("version") {
                    continue;
                } else {
                    return Err(format!("{}: record without a program field", path.display()).into());
                }
            }
            _ => out.push(line.to_string()),
        }
    }
    Ok(out)
}

fn cmd_eval(pred: &Path, gold: &Path) -> Result<(), AnyError> {
    let pred = programs_from_file(pred)?;
    let gold = programs_from_file(gold)?;
    if pred.len() != gold.len() {
        return Err(format!(
            "prediction/gold length mismatch: {} vs {}",
            pred.len(),
            gold.len()
        )
        .into());
    }
    if pred.is_empty() {
        return Err("no records to evaluate".into());
    }
    let correct = pred.iter().zip(&gold).filter(|(p, g)| p == g).count();
    let accuracy = correct as f64 / pred.len() as f64;
    println!("accuracy {:.4} ({}/{})", accuracy, correct, pred.len());
    Ok(())
}
