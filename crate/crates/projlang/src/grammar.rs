//! Context-free grammars with semantic attachments.
//!
//! A grammar acts as a synthetic data generator: every complete derivation
//! yields both an utterance (a token sequence) and a program (the
//! instantiated semantic template). The grammar file format is line
//! oriented; see [`parse_grammar`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("line {line}, col {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("no rules")]
    NoRules,
    #[error("line {line}: undefined nonterminal {nt}")]
    UndefinedNonterminal { nt: String, line: usize },
    #[error("line {line}: placeholder ${index} exceeds nonterminal count {count}")]
    PlaceholderOutOfRange { index: usize, count: usize, line: usize },
    #[error("line {line}: duplicate start symbol declaration")]
    DuplicateStart { line: usize },
    #[error("cyclic grammar requires max_depth")]
    CyclicNeedsDepth,
    #[error("ambiguous grammar: {}", format_conflicts(.conflicts))]
    Ambiguous { conflicts: Vec<(String, Vec<String>)> },
    #[error("site {site} out of range (frontier size {len})")]
    SiteOutOfRange { site: usize, len: usize },
    #[error("incomplete derivation")]
    IncompleteDerivation,
    #[error("malformed derivation encoding: {0}")]
    BadDerivation(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn format_conflicts(conflicts: &[(String, Vec<String>)]) -> String {
    conflicts
        .iter()
        .map(|(text, progs)| format!("\"{}\" derives {}", text, progs.join(" and ")))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Lowercase, split on whitespace, and split punctuation characters into
/// standalone tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() || ch == '_' {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RhsItem {
    Terminal(String),
    Nonterminal(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SemSeg {
    Lit(String),
    /// Zero-based index of a child nonterminal on the rhs.
    Child(usize),
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub lhs: String,
    pub rhs: Vec<RhsItem>,
    pub semantics: Vec<SemSeg>,
    pub line: usize,
}

impl Rule {
    pub fn rhs_nonterminals(&self) -> impl Iterator<Item = &str> {
        self.rhs.iter().filter_map(|item| match item {
            RhsItem::Nonterminal(nt) => Some(nt.as_str()),
            RhsItem::Terminal(_) => None,
        })
    }

    pub fn nonterminal_count(&self) -> usize {
        self.rhs_nonterminals().count()
    }
}

#[derive(Debug, Clone)]
pub struct Grammar {
    start_symbol: String,
    rules: Vec<Rule>,
    nonterminals: BTreeSet<String>,
    np_nonterminals: BTreeSet<String>,
    rules_by_lhs: HashMap<String, Vec<usize>>,
}

/// Parse the line-oriented grammar format.
///
/// One rule per line: `$lhs -> rhs tokens and $nonterminals : semantics`.
/// Lines starting with `#` are comments; blank lines are ignored.
/// Directives: `@start $name` picks the start symbol (default `$root`),
/// `@np $name` flags a nonterminal as noun-phrase-valued.
pub fn parse_grammar(source: &str) -> Result<Grammar, GrammarError> {
    let mut rules: Vec<Rule> = Vec::new();
    let mut start: Option<(String, usize)> = None;
    let mut np_flags: Vec<(String, usize)> = Vec::new();

    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("@start") {
            let name = parse_nt_name(rest.trim(), line_no)?;
            if start.is_some() {
                return Err(GrammarError::DuplicateStart { line: line_no });
            }
            start = Some((name, line_no));
            continue;
        }
        if let Some(rest) = line.strip_prefix("@np") {
            let name = parse_nt_name(rest.trim(), line_no)?;
            np_flags.push((name, line_no));
            continue;
        }
        rules.push(parse_rule(line, line_no)?);
    }

    if rules.is_empty() {
        return Err(GrammarError::NoRules);
    }

    let mut nonterminals: BTreeSet<String> = BTreeSet::new();
    for rule in &rules {
        nonterminals.insert(rule.lhs.clone());
        for nt in rule.rhs_nonterminals() {
            nonterminals.insert(nt.to_string());
        }
    }

    let mut rules_by_lhs: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, rule) in rules.iter().enumerate() {
        rules_by_lhs.entry(rule.lhs.clone()).or_default().push(i);
    }

    // every nonterminal on a rhs needs at least one rule
    for rule in &rules {
        for nt in rule.rhs_nonterminals() {
            if !rules_by_lhs.contains_key(nt) {
                return Err(GrammarError::UndefinedNonterminal {
                    nt: format!("${nt}"),
                    line: rule.line,
                });
            }
        }
    }

    let start_symbol = match start {
        Some((name, line)) => {
            if !rules_by_lhs.contains_key(&name) {
                return Err(GrammarError::UndefinedNonterminal {
                    nt: format!("${name}"),
                    line,
                });
            }
            name
        }
        None => {
            let default = "root".to_string();
            if !rules_by_lhs.contains_key(&default) {
                return Err(GrammarError::UndefinedNonterminal {
                    nt: "$root".to_string(),
                    line: 0,
                });
            }
            default
        }
    };

    let mut np_nonterminals = BTreeSet::new();
    for (name, line) in np_flags {
        if !nonterminals.contains(&name) {
            return Err(GrammarError::UndefinedNonterminal {
                nt: format!("${name}"),
                line,
            });
        }
        np_nonterminals.insert(name);
    }

    Ok(Grammar {
        start_symbol,
        rules,
        nonterminals,
        np_nonterminals,
        rules_by_lhs,
    })
}

fn parse_nt_name(word: &str, line: usize) -> Result<String, GrammarError> {
    let stripped = word.strip_prefix('$').ok_or_else(|| GrammarError::Syntax {
        line,
        col: 1,
        msg: format!("expected nonterminal starting with '$', got '{word}'"),
    })?;
    if stripped.is_empty()
        || !stripped
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_')
    {
        return Err(GrammarError::Syntax {
            line,
            col: 1,
            msg: format!("invalid nonterminal name '{word}'"),
        });
    }
    Ok(stripped.to_string())
}

fn parse_rule(line: &str, line_no: usize) -> Result<Rule, GrammarError> {
    let arrow = line.find("->").ok_or_else(|| GrammarError::Syntax {
        line: line_no,
        col: 1,
        msg: "missing '->'".to_string(),
    })?;
    let lhs = parse_nt_name(line[..arrow].trim(), line_no)?;
    let rest = &line[arrow + 2..];
    let colon = rest.find(" : ").ok_or_else(|| GrammarError::Syntax {
        line: line_no,
        col: arrow + 3,
        msg: "missing ' : ' before semantics template".to_string(),
    })?;
    let rhs_text = rest[..colon].trim();
    let sem_text = rest[colon + 3..].trim();

    if rhs_text.is_empty() {
        return Err(GrammarError::Syntax {
            line: line_no,
            col: arrow + 3,
            msg: "empty right-hand side".to_string(),
        });
    }

    let mut rhs = Vec::new();
    for word in rhs_text.split_whitespace() {
        if word.starts_with('$') {
            rhs.push(RhsItem::Nonterminal(parse_nt_name(word, line_no)?));
        } else {
            for tok in tokenize(word) {
                rhs.push(RhsItem::Terminal(tok));
            }
        }
    }

    let semantics = parse_semantics(sem_text);
    let nt_count = rhs
        .iter()
        .filter(|i| matches!(i, RhsItem::Nonterminal(_)))
        .count();
    for seg in &semantics {
        if let SemSeg::Child(i) = seg {
            if *i >= nt_count {
                return Err(GrammarError::PlaceholderOutOfRange {
                    index: i + 1,
                    count: nt_count,
                    line: line_no,
                });
            }
        }
    }

    Ok(Rule {
        lhs,
        rhs,
        semantics,
        line: line_no,
    })
}

fn parse_semantics(text: &str) -> Vec<SemSeg> {
    let mut segs = Vec::new();
    let mut lit = String::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'$' {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j > i + 1 {
                if !lit.is_empty() {
                    segs.push(SemSeg::Lit(std::mem::take(&mut lit)));
                }
                let idx: usize = text[i + 1..j].parse().unwrap();
                // $0 is treated as a literal; placeholders are 1-based
                if idx == 0 {
                    lit.push_str(&text[i..j]);
                } else {
                    segs.push(SemSeg::Child(idx - 1));
                }
                i = j;
                continue;
            }
        }
        let ch = text[i..].chars().next().unwrap();
        lit.push(ch);
        i += ch.len_utf8();
    }
    if !lit.is_empty() {
        segs.push(SemSeg::Lit(lit));
    }
    segs
}

impl Grammar {
    pub fn start_symbol(&self) -> &str {
        &self.start_symbol
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn nonterminals(&self) -> &BTreeSet<String> {
        &self.nonterminals
    }

    pub fn np_nonterminals(&self) -> &BTreeSet<String> {
        &self.np_nonterminals
    }

    pub fn is_np(&self, nt: &str) -> bool {
        self.np_nonterminals.contains(nt)
    }

    /// Indices of rules whose lhs is `nt`, in source order.
    pub fn rules_for(&self, nt: &str) -> &[usize] {
        self.rules_by_lhs
            .get(nt)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    /// True if some nonterminal can derive itself.
    pub fn is_cyclic(&self) -> bool {
        // DFS with colors over the nonterminal reachability graph
        let mut state: HashMap<&str, u8> = HashMap::new();
        fn visit<'a>(g: &'a Grammar, nt: &'a str, state: &mut HashMap<&'a str, u8>) -> bool {
            match state.get(nt) {
                Some(1) => return true,
                Some(2) => return false,
                _ => {}
            }
            state.insert(nt, 1);
            for &ri in g.rules_for(nt) {
                for next in g.rules[ri].rhs_nonterminals() {
                    if visit(g, next, state) {
                        return true;
                    }
                }
            }
            state.insert(nt, 2);
            false
        }
        let nts: Vec<&str> = self.nonterminals.iter().map(|s| s.as_str()).collect();
        nts.iter().any(|nt| visit(self, nt, &mut state))
    }

    /// Enumerate all complete derivations from the start symbol in
    /// deterministic depth-first, rule order. Duplicate (text, program)
    /// pairs are dropped; duplicate texts with conflicting programs are
    /// an error.
    pub fn enumerate(&self, max_depth: Option<usize>) -> Result<Vec<SyntheticSentence>, GrammarError> {
        self.enumerate_from(&self.start_symbol, max_depth)
    }

    /// Like [`Grammar::enumerate`] but starting from an arbitrary
    /// nonterminal.
    pub fn enumerate_from(
        &self,
        nt: &str,
        max_depth: Option<usize>,
    ) -> Result<Vec<SyntheticSentence>, GrammarError> {
        if max_depth.is_none() && self.is_cyclic() {
            return Err(GrammarError::CyclicNeedsDepth);
        }
        let mut out: Vec<SyntheticSentence> = Vec::new();
        let mut seen: HashMap<String, String> = HashMap::new();
        let mut conflicts: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();

        let mut stack = vec![Derivation::start(nt)];
        // explicit stack in LIFO order; push expansions reversed to keep
        // rule-order-first output
        while let Some(d) = stack.pop() {
            if d.is_complete() {
                let text = d.linearize(self, "").join(" ");
                let program = d.semantics(self)?;
                match seen.get(&text) {
                    Some(prev) if *prev == program => continue,
                    Some(prev) => {
                        let entry = conflicts.entry(text.clone()).or_default();
                        entry.insert(prev.clone());
                        entry.insert(program.clone());
                        continue;
                    }
                    None => {
                        seen.insert(text.clone(), program.clone());
                        out.push(SyntheticSentence {
                            text: d.linearize(self, ""),
                            program,
                            derivation: d,
                        });
                    }
                }
                continue;
            }
            let mut next = d.expansions(self, 0)?;
            if let Some(bound) = max_depth {
                next.retain(|cand| cand.depth() <= bound);
            }
            for cand in next.into_iter().rev() {
                stack.push(cand);
            }
        }

        if !conflicts.is_empty() {
            let conflicts = conflicts
                .into_iter()
                .map(|(t, ps)| (t, ps.into_iter().collect()))
                .collect();
            return Err(GrammarError::Ambiguous { conflicts });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Node {
    Open(String),
    Applied { rule: usize, children: Vec<Node> },
}

/// A (possibly partial) derivation tree. Immutable; expansion produces a
/// new derivation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Derivation {
    root: Node,
}

/// One element of a derivation's yield.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum YieldItem {
    Terminal(String),
    /// An unexpanded frontier nonterminal.
    Frontier(String),
}

impl Derivation {
    /// A bare unexpanded nonterminal.
    pub fn start(nt: &str) -> Derivation {
        Derivation {
            root: Node::Open(nt.to_string()),
        }
    }

    pub fn is_complete(&self) -> bool {
        fn complete(n: &Node) -> bool {
            match n {
                Node::Open(_) => false,
                Node::Applied { children, .. } => children.iter().all(complete),
            }
        }
        complete(&self.root)
    }

    /// Frontier nonterminal names in left-to-right yield order.
    pub fn frontier(&self) -> Vec<String> {
        fn walk(n: &Node, out: &mut Vec<String>) {
            match n {
                Node::Open(nt) => out.push(nt.clone()),
                Node::Applied { children, .. } => children.iter().for_each(|c| walk(c, out)),
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    /// Apply rule `rule_idx` at frontier position `site`.
    pub fn expand(
        &self,
        g: &Grammar,
        site: usize,
        rule_idx: usize,
    ) -> Result<Derivation, GrammarError> {
        let frontier = self.frontier();
        if site >= frontier.len() {
            return Err(GrammarError::SiteOutOfRange {
                site,
                len: frontier.len(),
            });
        }
        let rule = &g.rules()[rule_idx];
        assert_eq!(rule.lhs, frontier[site], "rule lhs must match site nonterminal");
        let children: Vec<Node> = rule
            .rhs_nonterminals()
            .map(|nt| Node::Open(nt.to_string()))
            .collect();
        let mut counter = 0usize;
        let root = replace_open(&self.root, site, &mut counter, rule_idx, &children);
        Ok(Derivation { root })
    }

    /// Replace the frontier nonterminal at `site` with the whole subtree
    /// of `sub` (whose root nonterminal must match).
    pub fn graft(&self, site: usize, sub: &Derivation) -> Result<Derivation, GrammarError> {
        let frontier = self.frontier();
        if site >= frontier.len() {
            return Err(GrammarError::SiteOutOfRange {
                site,
                len: frontier.len(),
            });
        }
        let mut counter = 0usize;
        let root = graft_open(&self.root, site, &mut counter, &sub.root);
        Ok(Derivation { root })
    }

    /// All single-step expansions at `site`, one per matching rule.
    pub fn expansions(&self, g: &Grammar, site: usize) -> Result<Vec<Derivation>, GrammarError> {
        let frontier = self.frontier();
        if site >= frontier.len() {
            return Err(GrammarError::SiteOutOfRange {
                site,
                len: frontier.len(),
            });
        }
        g.rules_for(&frontier[site])
            .iter()
            .map(|&ri| self.expand(g, site, ri))
            .collect()
    }

    pub fn yield_items(&self, g: &Grammar) -> Vec<YieldItem> {
        fn walk(n: &Node, g: &Grammar, out: &mut Vec<YieldItem>) {
            match n {
                Node::Open(nt) => out.push(YieldItem::Frontier(nt.clone())),
                Node::Applied { rule, children } => {
                    let mut child = children.iter();
                    for item in &g.rules()[*rule].rhs {
                        match item {
                            RhsItem::Terminal(tok) => out.push(YieldItem::Terminal(tok.clone())),
                            RhsItem::Nonterminal(_) => walk(child.next().unwrap(), g, out),
                        }
                    }
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, g, &mut out);
        out
    }

    /// Yield with every frontier nonterminal rendered as `mask_token`.
    pub fn linearize(&self, g: &Grammar, mask_token: &str) -> Vec<String> {
        self.yield_items(g)
            .into_iter()
            .map(|item| match item {
                YieldItem::Terminal(t) => t,
                YieldItem::Frontier(_) => mask_token.to_string(),
            })
            .collect()
    }

    /// Yield where frontier positions show their nonterminal name. Used
    /// as a structural identity key for hypotheses.
    pub fn template_key(&self, g: &Grammar) -> String {
        self.yield_items(g)
            .iter()
            .map(|item| match item {
                YieldItem::Terminal(t) => t.clone(),
                YieldItem::Frontier(nt) => format!("${nt}"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Bottom-up template instantiation; errors on incomplete derivations.
    pub fn semantics(&self, g: &Grammar) -> Result<String, GrammarError> {
        fn eval(n: &Node, g: &Grammar) -> Result<String, GrammarError> {
            match n {
                Node::Open(_) => Err(GrammarError::IncompleteDerivation),
                Node::Applied { rule, children } => {
                    let programs: Vec<String> = children
                        .iter()
                        .map(|c| eval(c, g))
                        .collect::<Result<_, _>>()?;
                    let mut out = String::new();
                    for seg in &g.rules()[*rule].semantics {
                        match seg {
                            SemSeg::Lit(s) => out.push_str(s),
                            SemSeg::Child(i) => out.push_str(&programs[*i]),
                        }
                    }
                    Ok(out)
                }
            }
        }
        eval(&self.root, g)
    }

    /// Longest root-to-leaf rule chain.
    pub fn depth(&self) -> usize {
        fn d(n: &Node) -> usize {
            match n {
                Node::Open(_) => 0,
                Node::Applied { children, .. } => {
                    1 + children.iter().map(d).max().unwrap_or(0)
                }
            }
        }
        d(&self.root)
    }

    /// Number of maximal runs of adjacent np-flagged frontier positions
    /// in the yield.
    pub fn np_group_count(&self, g: &Grammar) -> usize {
        let mut groups = 0;
        let mut in_group = false;
        for item in self.yield_items(g) {
            match item {
                YieldItem::Frontier(nt) if g.is_np(&nt) => {
                    if !in_group {
                        groups += 1;
                        in_group = true;
                    }
                }
                _ => in_group = false,
            }
        }
        groups
    }

    /// Yields and token spans of the maximal np-flagged subtrees, in
    /// sentence order. Only valid on complete derivations.
    pub fn np_subtree_spans(&self, g: &Grammar) -> Vec<(Vec<String>, (usize, usize))> {
        fn walk(
            n: &Node,
            g: &Grammar,
            pos: &mut usize,
            out: &mut Vec<(Vec<String>, (usize, usize))>,
        ) {
            match n {
                Node::Open(_) => *pos += 1,
                Node::Applied { rule, children } => {
                    let rule = &g.rules()[*rule];
                    if g.is_np(&rule.lhs) {
                        let start = *pos;
                        let toks = subtree_yield(n, g);
                        *pos += toks.len();
                        out.push((toks, (start, *pos)));
                        return;
                    }
                    let mut child = children.iter();
                    for item in &rule.rhs {
                        match item {
                            RhsItem::Terminal(_) => *pos += 1,
                            RhsItem::Nonterminal(_) => walk(child.next().unwrap(), g, pos, out),
                        }
                    }
                }
            }
        }
        fn subtree_yield(n: &Node, g: &Grammar) -> Vec<String> {
            match n {
                Node::Open(nt) => vec![format!("${nt}")],
                Node::Applied { rule, children } => {
                    let mut out = Vec::new();
                    let mut child = children.iter();
                    for item in &g.rules()[*rule].rhs {
                        match item {
                            RhsItem::Terminal(t) => out.push(t.clone()),
                            RhsItem::Nonterminal(_) => {
                                out.extend(subtree_yield(child.next().unwrap(), g))
                            }
                        }
                    }
                    out
                }
            }
        }
        let mut out = Vec::new();
        let mut pos = 0usize;
        walk(&self.root, g, &mut pos, &mut out);
        out
    }

    /// Encode a complete derivation as nested rule indices, e.g.
    /// `(0 (2 (4)))`.
    pub fn rule_indices(&self) -> Result<String, GrammarError> {
        fn enc(n: &Node, out: &mut String) -> Result<(), GrammarError> {
            match n {
                Node::Open(_) => Err(GrammarError::IncompleteDerivation),
                Node::Applied { rule, children } => {
                    out.push('(');
                    out.push_str(&rule.to_string());
                    for c in children {
                        out.push(' ');
                        enc(c, out)?;
                    }
                    out.push(')');
                    Ok(())
                }
            }
        }
        let mut s = String::new();
        enc(&self.root, &mut s)?;
        Ok(s)
    }

    /// Decode the nested-rule-index encoding against a grammar.
    pub fn from_rule_indices(encoded: &str, g: &Grammar) -> Result<Derivation, GrammarError> {
        let toks = lex_indices(encoded)?;
        let mut pos = 0usize;
        let root = parse_node(&toks, &mut pos, g, None)?;
        if pos != toks.len() {
            return Err(GrammarError::BadDerivation(format!(
                "trailing input in '{encoded}'"
            )));
        }
        Ok(Derivation { root })
    }
}

#[derive(Debug, PartialEq)]
enum IdxTok {
    Open,
    Close,
    Num(usize),
}

fn lex_indices(s: &str) -> Result<Vec<IdxTok>, GrammarError> {
    let mut toks = Vec::new();
    let mut num = String::new();
    for ch in s.chars() {
        match ch {
            '(' | ')' | ' ' => {
                if !num.is_empty() {
                    toks.push(IdxTok::Num(num.parse().map_err(|_| {
                        GrammarError::BadDerivation(format!("bad index '{num}'"))
                    })?));
                    num.clear();
                }
                match ch {
                    '(' => toks.push(IdxTok::Open),
                    ')' => toks.push(IdxTok::Close),
                    _ => {}
                }
            }
            c if c.is_ascii_digit() => num.push(c),
            c => {
                return Err(GrammarError::BadDerivation(format!(
                    "unexpected character '{c}'"
                )))
            }
        }
    }
    if !num.is_empty() {
        return Err(GrammarError::BadDerivation("unterminated index".into()));
    }
    Ok(toks)
}

fn parse_node(
    toks: &[IdxTok],
    pos: &mut usize,
    g: &Grammar,
    expect_lhs: Option<&str>,
) -> Result<Node, GrammarError> {
    if toks.get(*pos) != Some(&IdxTok::Open) {
        return Err(GrammarError::BadDerivation("expected '('".into()));
    }
    *pos += 1;
    let rule_idx = match toks.get(*pos) {
        Some(IdxTok::Num(n)) => *n,
        _ => return Err(GrammarError::BadDerivation("expected rule index".into())),
    };
    *pos += 1;
    let rule = g
        .rules()
        .get(rule_idx)
        .ok_or_else(|| GrammarError::BadDerivation(format!("rule index {rule_idx} out of range")))?;
    if let Some(lhs) = expect_lhs {
        if rule.lhs != lhs {
            return Err(GrammarError::BadDerivation(format!(
                "rule {rule_idx} has lhs ${} where ${lhs} was expected",
                rule.lhs
            )));
        }
    }
    let mut children = Vec::new();
    for nt in rule.rhs_nonterminals().map(str::to_string).collect::<Vec<_>>() {
        children.push(parse_node(toks, pos, g, Some(&nt))?);
    }
    if toks.get(*pos) != Some(&IdxTok::Close) {
        return Err(GrammarError::BadDerivation("expected ')'".into()));
    }
    *pos += 1;
    Ok(Node::Applied {
        rule: rule_idx,
        children,
    })
}

fn replace_open(
    n: &Node,
    site: usize,
    counter: &mut usize,
    rule_idx: usize,
    new_children: &[Node],
) -> Node {
    match n {
        Node::Open(nt) => {
            let here = *counter;
            *counter += 1;
            if here == site {
                Node::Applied {
                    rule: rule_idx,
                    children: new_children.to_vec(),
                }
            } else {
                Node::Open(nt.clone())
            }
        }
        Node::Applied { rule, children } => Node::Applied {
            rule: *rule,
            children: children
                .iter()
                .map(|c| replace_open(c, site, counter, rule_idx, new_children))
                .collect(),
        },
    }
}

fn graft_open(n: &Node, site: usize, counter: &mut usize, sub: &Node) -> Node {
    match n {
        Node::Open(nt) => {
            let here = *counter;
            *counter += 1;
            if here == site {
                sub.clone()
            } else {
                Node::Open(nt.clone())
            }
        }
        Node::Applied { rule, children } => Node::Applied {
            rule: *rule,
            children: children
                .iter()
                .map(|c| graft_open(c, site, counter, sub))
                .collect(),
        },
    }
}

/// A complete derivation together with its utterance and program.
#[derive(Debug, Clone)]
pub struct SyntheticSentence {
    pub text: Vec<String>,
    pub program: String,
    pub derivation: Derivation,
}

impl SyntheticSentence {
    pub fn text_joined(&self) -> String {
        self.text.join(" ")
    }
}

impl fmt::Display for SyntheticSentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}", self.text_joined(), self.program)
    }
}

/// One line of the synthetic dataset file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetRecord {
    pub text: String,
    pub program: String,
    pub derivation: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
}

pub fn sentence_to_record(s: &SyntheticSentence) -> Result<DatasetRecord, GrammarError> {
    Ok(DatasetRecord {
        text: s.text_joined(),
        program: s.program.clone(),
        derivation: s.derivation.rule_indices()?,
    })
}

pub fn record_to_sentence(r: &DatasetRecord, g: &Grammar) -> Result<SyntheticSentence, GrammarError> {
    let derivation = Derivation::from_rule_indices(&r.derivation, g)?;
    Ok(SyntheticSentence {
        text: r.text.split_whitespace().map(str::to_string).collect(),
        program: r.program.clone(),
        derivation,
    })
}

/// Write the line-delimited dataset with its `version: 1` header record.
pub fn write_dataset<W: io::Write>(
    mut w: W,
    sentences: &[SyntheticSentence],
) -> Result<(), GrammarError> {
    serde_json::to_writer(&mut w, &DatasetHeader { version: 1 })
        .map_err(|e| GrammarError::Dataset(e.to_string()))?;
    w.write_all(b"\n")?;
    for s in sentences {
        let rec = sentence_to_record(s)?;
        serde_json::to_writer(&mut w, &rec).map_err(|e| GrammarError::Dataset(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: io::BufRead>(r: R) -> Result<Vec<DatasetRecord>, GrammarError> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| GrammarError::Dataset("empty dataset file".into()))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| GrammarError::Dataset(format!("bad header: {e}")))?;
    if header.version != 1 {
        return Err(GrammarError::Dataset(format!(
            "unsupported dataset version {}",
            header.version
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| GrammarError::Dataset(format!("record {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Count of complete derivations reachable from `nt`, skipping any
/// duplicate-text handling. Used only as a brute-force cross-check in
/// tests; kept separate from `enumerate`'s derivation machinery.
pub fn derivation_count(g: &Grammar, nt: &str) -> u64 {
    fn count(g: &Grammar, nt: &str, memo: &mut HashMap<String, u64>) -> u64 {
        if let Some(&c) = memo.get(nt) {
            return c;
        }
        // mark in-progress to keep cyclic inputs from spinning forever
        memo.insert(nt.to_string(), 0);
        let mut total = 0u64;
        for &ri in g.rules_for(nt) {
            let mut prod = 1u64;
            for child in g.rules()[ri].rhs_nonterminals() {
                prod = prod.saturating_mul(count(g, child, memo));
            }
            total = total.saturating_add(prod);
        }
        memo.insert(nt.to_string(), total);
        total
    }
    let mut memo = HashMap::new();
    count(g, nt, &mut memo)
}

pub const G1: &str = "\
$root -> go to the $obj : (go-to $1)
$root -> pick up the $obj : (pick-up $1)
$obj -> $color ball : (ball $1)
$obj -> $color door : (door $1)
$color -> red : red
$color -> yellow : yellow
@np $obj
";

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn g1() -> Grammar {
        parse_grammar(G1).unwrap()
    }

    #[test]
    fn parses_g1() {
        let g = g1();
        assert_eq!(g.rules().len(), 6);
        let nts: Vec<&str> = g.nonterminals().iter().map(|s| s.as_str()).collect();
        assert_eq!(nts, vec!["color", "obj", "root"]);
        assert_eq!(g.start_symbol(), "root");
        assert!(g.is_np("obj"));
        assert!(!g.is_np("color"));
    }

    #[test]
    fn empty_source_is_no_rules() {
        assert!(matches!(parse_grammar(""), Err(GrammarError::NoRules)));
        assert!(matches!(
            parse_grammar("# just a comment\n\n"),
            Err(GrammarError::NoRules)
        ));
    }

    #[test]
    fn placeholder_out_of_range() {
        let err = parse_grammar("$root -> go : (go $1)").unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("placeholder $1 exceeds nonterminal count 0"),
            "got: {msg}"
        );
    }

    #[test]
    fn undefined_nonterminal_rejected() {
        let err = parse_grammar("$root -> go to $place : (go $1)").unwrap_err();
        assert!(matches!(err, GrammarError::UndefinedNonterminal { .. }));
    }

    #[test]
    fn duplicate_start_rejected() {
        let src = "@start $root\n@start $root\n$root -> go : go";
        assert!(matches!(
            parse_grammar(src),
            Err(GrammarError::DuplicateStart { line: 2 })
        ));
    }

    #[test]
    fn enumerate_g1() {
        let g = g1();
        let sents = g.enumerate(None).unwrap();
        assert_eq!(sents.len(), 8);
        let found = sents
            .iter()
            .find(|s| s.text_joined() == "go to the red ball")
            .expect("missing sentence");
        assert_eq!(found.program, "(go-to (ball red))");
        // bijection
        let texts: HashSet<_> = sents.iter().map(|s| s.text_joined()).collect();
        let programs: HashSet<_> = sents.iter().map(|s| s.program.clone()).collect();
        assert_eq!(texts.len(), 8);
        assert_eq!(programs.len(), 8);
    }

    #[test]
    fn enumerate_is_deterministic() {
        let g = g1();
        let a: Vec<String> = g.enumerate(None).unwrap().iter().map(|s| s.text_joined()).collect();
        let b: Vec<String> = g.enumerate(None).unwrap().iter().map(|s| s.text_joined()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn ambiguity_is_an_error() {
        let src = format!("{G1}$root -> go to the red ball : (noop)\n");
        let g = parse_grammar(&src).unwrap();
        let err = g.enumerate(None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("go to the red ball"), "got: {msg}");
        assert!(msg.contains("(noop)"), "got: {msg}");
    }

    #[test]
    fn exact_duplicates_are_deduplicated() {
        let src = format!("{G1}$root -> go to the $obj : (go-to $1)\n");
        let g = parse_grammar(&src).unwrap();
        assert_eq!(g.enumerate(None).unwrap().len(), 8);
    }

    #[test]
    fn cyclic_requires_depth() {
        let src = "$root -> again $root : (again $1)\n$root -> stop : stop";
        let g = parse_grammar(src).unwrap();
        assert!(g.is_cyclic());
        assert!(matches!(
            g.enumerate(None),
            Err(GrammarError::CyclicNeedsDepth)
        ));
        let sents = g.enumerate(Some(3)).unwrap();
        assert_eq!(sents.len(), 3); // stop, again stop, again again stop
    }

    #[test]
    fn expansions_at_root() {
        let g = g1();
        let d = Derivation::start("root");
        let exps = d.expansions(&g, 0).unwrap();
        assert_eq!(exps.len(), 2);
        assert_eq!(exps[0].linearize(&g, "[MASK]"), vec!["go", "to", "the", "[MASK]"]);
    }

    #[test]
    fn expansions_complete_color() {
        let g = g1();
        let d = Derivation::start("color");
        let exps = d.expansions(&g, 0).unwrap();
        assert_eq!(exps.len(), 2);
        assert!(exps.iter().all(|e| e.is_complete()));
    }

    #[test]
    fn expansion_on_complete_errors() {
        let g = g1();
        let d = g.enumerate(None).unwrap()[0].derivation.clone();
        assert!(matches!(
            d.expansions(&g, 0),
            Err(GrammarError::SiteOutOfRange { .. })
        ));
    }

    #[test]
    fn frontier_arithmetic() {
        let g = g1();
        let d = Derivation::start("root");
        for e in d.expansions(&g, 0).unwrap() {
            assert_eq!(e.frontier().len(), d.frontier().len() - 1 + 1);
        }
    }

    #[test]
    fn linearize_bare_root() {
        let g = g1();
        let d = Derivation::start("root");
        assert_eq!(d.linearize(&g, "[MASK]"), vec!["[MASK]"]);
    }

    #[test]
    fn linearize_complete_has_no_mask() {
        let g = g1();
        for s in g.enumerate(None).unwrap() {
            assert!(!s.derivation.linearize(&g, "[MASK]").iter().any(|t| t == "[MASK]"));
        }
    }

    #[test]
    fn semantics_examples() {
        let g = g1();
        let sents = g.enumerate(None).unwrap();
        let pick = sents
            .iter()
            .find(|s| s.text_joined() == "pick up the red door")
            .unwrap();
        assert_eq!(pick.derivation.semantics(&g).unwrap(), "(pick-up (door red))");
        let go = sents
            .iter()
            .find(|s| s.text_joined() == "go to the yellow ball")
            .unwrap();
        assert_eq!(go.derivation.semantics(&g).unwrap(), "(go-to (ball yellow))");
    }

    #[test]
    fn semantics_on_partial_errors() {
        let g = g1();
        let d = Derivation::start("root").expand(&g, 0, 0).unwrap();
        assert!(matches!(
            d.semantics(&g),
            Err(GrammarError::IncompleteDerivation)
        ));
    }

    #[test]
    fn semantics_round_trips_for_all_sentences() {
        let g = g1();
        for s in g.enumerate(None).unwrap() {
            assert_eq!(s.derivation.semantics(&g).unwrap(), s.program);
        }
    }

    #[test]
    fn np_group_count_examples() {
        let src = "\
$root -> put the $item next to $item : (put $1 $2)
$item -> ball : ball
@np $item
";
        let g = parse_grammar(src).unwrap();
        let d = Derivation::start("root").expand(&g, 0, 0).unwrap();
        assert_eq!(d.np_group_count(&g), 2);

        let g1 = g1();
        let d = Derivation::start("root").expand(&g1, 0, 0).unwrap();
        assert_eq!(d.np_group_count(&g1), 1);

        let src = "$root -> go $dir : (go $1)\n$dir -> left : left";
        let g = parse_grammar(src).unwrap();
        let d = Derivation::start("root").expand(&g, 0, 0).unwrap();
        assert_eq!(d.np_group_count(&g), 0);
    }

    #[test]
    fn adjacent_np_sites_form_one_group() {
        let src = "\
$root -> move $item $item here : (move $1 $2)
$item -> ball : ball
@np $item
";
        let g = parse_grammar(src).unwrap();
        let d = Derivation::start("root").expand(&g, 0, 0).unwrap();
        assert_eq!(d.np_group_count(&g), 1);
    }

    #[test]
    fn rule_indices_round_trip() {
        let g = g1();
        for s in g.enumerate(None).unwrap() {
            let enc = s.derivation.rule_indices().unwrap();
            let back = Derivation::from_rule_indices(&enc, &g).unwrap();
            assert_eq!(back, s.derivation);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let g = g1();
        let sents = g.enumerate(None).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &sents).unwrap();
        let recs = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(recs.len(), 8);
        for (rec, s) in recs.iter().zip(&sents) {
            let back = record_to_sentence(rec, &g).unwrap();
            assert_eq!(back.text, s.text);
            assert_eq!(back.program, s.program);
            assert_eq!(back.derivation, s.derivation);
        }
    }

    #[test]
    fn dataset_bad_version_rejected() {
        let data = b"{\"version\":99}\n";
        let err = read_dataset(&data[..]).unwrap_err();
        assert!(err.to_string().contains("version 99"));
    }

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(
            tokenize("Go to the Red ball, now!"),
            vec!["go", "to", "the", "red", "ball", ",", "now", "!"]
        );
    }

    #[test]
    fn brute_force_count_matches_enumerate() {
        let g = g1();
        assert_eq!(derivation_count(&g, "root"), 8);
        assert_eq!(g.enumerate(None).unwrap().len() as u64, derivation_count(&g, "root"));
    }
}
