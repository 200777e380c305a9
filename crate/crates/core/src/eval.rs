//! Parsing of ranked LLM output and ranking metrics.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Item, ItemId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("unparseable response: no numbered recommendation lines")]
    Unparseable,
}

/// How a recommendation line was matched to a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchTier {
    Exact,
    Normalized,
    Containment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedLine {
    pub text: String,
    pub item: Option<ItemId>,
    pub tier: Option<MatchTier>,
    /// Matched a candidate that an earlier line already matched.
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRanking {
    pub lines: Vec<ParsedLine>,
}

/// Which positions count as ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankBasis {
    /// Position among all emitted recommendation lines.
    #[default]
    EmittedLines,
    /// Position among lines that first-matched a candidate.
    CandidatesOnly,
}

/// Denominator of the candidate inclusion ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CirDenominator {
    #[default]
    EmittedLines,
    CandidateCount,
}

impl ParsedRanking {
    pub fn n_output_lines(&self) -> usize {
        self.lines.len()
    }

    /// Lines that matched a candidate for the first time.
    pub fn n_matched(&self) -> usize {
        self.lines
            .iter()
            .filter(|l| l.item.is_some() && !l.duplicate)
            .count()
    }

    pub fn n_unmatched(&self) -> usize {
        self.lines.iter().filter(|l| l.item.is_none()).count()
    }

    /// 1-based rank of each matched candidate's first occurrence.
    pub fn matched_ranks(&self, basis: RankBasis) -> HashMap<&ItemId, usize> {
        let mut ranks = HashMap::new();
        let mut candidate_pos = 0;
        for (i, line) in self.lines.iter().enumerate() {
            if let (Some(item), false) = (&line.item, line.duplicate) {
                candidate_pos += 1;
                let rank = match basis {
                    RankBasis::EmittedLines => i + 1,
                    RankBasis::CandidatesOnly => candidate_pos,
                };
                ranks.insert(item, rank);
            }
        }
        ranks
    }

    pub fn rank_of(&self, item: &ItemId, basis: RankBasis) -> Option<usize> {
        self.matched_ranks(basis).get(item).copied()
    }
}

fn line_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"^\s*\d+[\.\)]\s*(.+)$").expect("valid regex"))
}

/// Strips list decoration an LLM may wrap around a title.
fn clean(raw: &str) -> &str {
    let mut s = raw.trim();
    loop {
        let before = s;
        for (open, close) in [("**", "**"), ("[", "]"), ("\"", "\""), ("'", "'"), ("`", "`")] {
            if s.len() >= open.len() + close.len() && s.starts_with(open) && s.ends_with(close) {
                s = s[open.len()..s.len() - close.len()].trim();
            }
        }
        if s == before {
            return s;
        }
    }
}

/// Lowercase, punctuation removed, whitespace collapsed.
pub fn normalize_title(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn containment_tokens(s: &str) -> Vec<String> {
    let normalized = normalize_title(s);
    let mut tokens: Vec<String> = normalized.split(' ').filter(|t| !t.is_empty()).map(str::to_owned).collect();
    if tokens.len() > 1 && matches!(tokens[0].as_str(), "the" | "a" | "an") {
        tokens.remove(0);
    }
    tokens
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

struct CandidateIndex<'a> {
    items: &'a [Item],
    exact: HashMap<&'a str, usize>,
    normalized: HashMap<String, usize>,
    tokens: Vec<Vec<String>>,
}

impl<'a> CandidateIndex<'a> {
    fn new(items: &'a [Item]) -> Self {
        let mut exact = HashMap::new();
        let mut normalized = HashMap::new();
        for (i, item) in items.iter().enumerate() {
            exact.entry(item.title.as_str()).or_insert(i);
            normalized.entry(normalize_title(&item.title)).or_insert(i);
        }
        Self {
            items,
            exact,
            normalized,
            tokens: items.iter().map(|i| containment_tokens(&i.title)).collect(),
        }
    }

    fn find(&self, text: &str) -> Option<(usize, MatchTier)> {
        let cleaned = clean(text);
        if let Some(&i) = self.exact.get(cleaned).or_else(|| self.exact.get(text.trim())) {
            return Some((i, MatchTier::Exact));
        }
        if let Some(&i) = self.normalized.get(&normalize_title(cleaned)) {
            return Some((i, MatchTier::Normalized));
        }
        let line = containment_tokens(cleaned);
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(i, cand)| {
                if contains_run(&line, cand) {
                    Some((i, cand.len()))
                } else if contains_run(cand, &line) {
                    Some((i, line.len()))
                } else {
                    None
                }
            })
            // longest shared run wins; earliest candidate on ties
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| (i, MatchTier::Containment))
    }
}

/// Extracts numbered lines from `text` and matches each against `candidates`
/// by exact title, then normalized title, then token containment.
pub fn parse_ranked_list(text: &str, candidates: &[Item]) -> Result<ParsedRanking, EvalError> {
    let index = CandidateIndex::new(candidates);
    let mut seen = std::collections::HashSet::new();
    let lines: Vec<ParsedLine> = text
        .lines()
        .filter_map(|line| line_pattern().captures(line))
        .map(|caps| {
            let body = caps[1].trim().to_owned();
            let matched = index.find(&body);
            let item = matched.map(|(i, _)| index.items[i].id.clone());
            let duplicate = item.as_ref().is_some_and(|id| !seen.insert(id.clone()));
            ParsedLine {
                text: body,
                item,
                tier: matched.map(|(_, t)| t),
                duplicate,
            }
        })
        .collect();
    if lines.is_empty() {
        return Err(EvalError::Unparseable);
    }
    Ok(ParsedRanking { lines })
}

/// Single-relevant-item NDCG: `1 / log2(rank + 1)` when the truth is ranked
/// within `n`, else 0.
pub fn ndcg_at(parsed: &ParsedRanking, truth: &ItemId, n: usize, basis: RankBasis) -> f64 {
    ndcg_from_rank(parsed.rank_of(truth, basis), n)
}

pub fn ndcg_from_rank(rank: Option<usize>, n: usize) -> f64 {
    match rank {
        Some(r) if r >= 1 && r <= n => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// Share of output lines that introduced a new candidate. A zero denominator gives 0.
pub fn cir(parsed: &ParsedRanking, denominator: CirDenominator, m: usize) -> f64 {
    let den = match denominator {
        CirDenominator::EmittedLines => parsed.n_output_lines(),
        CirDenominator::CandidateCount => m,
    };
    if den == 0 {
        0.0
    } else {
        (parsed.n_matched() as f64 / den as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub ndcg: BTreeMap<usize, f64>,
    pub cir: f64,
    pub truth_rank: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringOptions {
    pub rank_basis: RankBasis,
    pub cir_denominator: CirDenominator,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            rank_basis: RankBasis::EmittedLines,
            cir_denominator: CirDenominator::EmittedLines,
        }
    }
}

pub const DEFAULT_CUTOFFS: [usize; 3] = [5, 10, 20];

/// Metrics for one response; an unparseable response is a total miss.
pub fn score(
    parsed: Option<&ParsedRanking>,
    truth: &ItemId,
    m: usize,
    cutoffs: &[usize],
    options: ScoringOptions,
) -> MetricSet {
    let Some(parsed) = parsed else {
        return MetricSet {
            ndcg: cutoffs.iter().map(|&n| (n, 0.0)).collect(),
            cir: 0.0,
            truth_rank: None,
        };
    };
    let truth_rank = parsed.rank_of(truth, options.rank_basis);
    MetricSet {
        ndcg: cutoffs.iter().map(|&n| (n, ndcg_from_rank(truth_rank, n))).collect(),
        cir: cir(parsed, options.cir_denominator, m),
        truth_rank,
    }
}

/// Element-wise mean of several metric sets (e.g. all instances of one repeat).
pub fn mean_metrics(sets: &[MetricSet]) -> Option<MetricSet> {
    let first = sets.first()?;
    let n = sets.len() as f64;
    Some(MetricSet {
        ndcg: first
            .ndcg
            .keys()
            .map(|k| (*k, sets.iter().map(|s| s.ndcg.get(k).copied().unwrap_or(0.0)).sum::<f64>() / n))
            .collect(),
        cir: sets.iter().map(|s| s.cir).sum::<f64>() / n,
        truth_rank: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub ndcg: BTreeMap<usize, MeanStd>,
    pub cir: MeanStd,
}

/// Mean and sample standard deviation of each metric across runs.
pub fn aggregate_runs(per_run: &[MetricSet]) -> RunSummary {
    let keys: Vec<usize> = per_run
        .first()
        .map(|m| m.ndcg.keys().copied().collect())
        .unwrap_or_default();
    RunSummary {
        runs: per_run.len(),
        ndcg: keys
            .into_iter()
            .map(|k| {
                let values: Vec<f64> = per_run.iter().map(|m| m.ndcg.get(&k).copied().unwrap_or(0.0)).collect();
                (k, MeanStd::of(&values))
            })
            .collect(),
        cir: MeanStd::of(&per_run.iter().map(|m| m.cir).collect::<Vec<_>>()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(titles: &[&str]) -> Vec<Item> {
        titles
            .iter()
            .enumerate()
            .map(|(i, t)| Item {
                id: ItemId(format!("i{i}")),
                title: (*t).to_owned(),
            })
            .collect()
    }

    #[test]
    fn exact_matches() {
        let c = items(&["Airplane!", "Cop Land"]);
        let p = parse_ranked_list("1. Airplane!\n2. Cop Land", &c).unwrap();
        let ranks = p.matched_ranks(RankBasis::EmittedLines);
        assert_eq!(ranks[&ItemId::from("i0")], 1);
        assert_eq!(ranks[&ItemId::from("i1")], 2);
        assert!(p.lines.iter().all(|l| l.tier == Some(MatchTier::Exact)));
    }

    #[test]
    fn normalized_match() {
        let c = items(&["Airplane!", "Cop Land"]);
        let p = parse_ranked_list("1. Cop Land\n2. x\n3. airplane !", &c).unwrap();
        assert_eq!(p.lines[2].item, Some(ItemId::from("i0")));
        assert_eq!(p.lines[2].tier, Some(MatchTier::Normalized));
        assert_eq!(p.rank_of(&"i0".into(), RankBasis::EmittedLines), Some(3));
        assert_eq!(p.rank_of(&"i0".into(), RankBasis::CandidatesOnly), Some(2));
    }

    #[test]
    fn containment_match_with_year_and_article() {
        let c = items(&["The Shining", "Star Wars: Episode IV - A New Hope", "Star Wars"]);
        let p = parse_ranked_list("1) Shining (1980)\n2. **Star Wars: Episode IV - A New Hope (1977)**", &c).unwrap();
        assert_eq!(p.lines[0].item, Some(ItemId::from("i0")));
        assert_eq!(p.lines[0].tier, Some(MatchTier::Containment));
        assert_eq!(p.lines[1].item, Some(ItemId::from("i1")));
    }

    #[test]
    fn containment_is_token_based() {
        let c = items(&["M", "Up"]);
        let p = parse_ranked_list("1. Nonexistent Feature Presentation No. 1\n2. Upside Down", &c).unwrap();
        assert_eq!(p.n_matched(), 0);
    }

    #[test]
    fn duplicates_keep_first_rank() {
        let c = items(&["A", "B"]);
        let p = parse_ranked_list("1. B\n2. A\n3. B", &c).unwrap();
        assert_eq!(p.rank_of(&"i1".into(), RankBasis::EmittedLines), Some(1));
        assert!(p.lines[2].duplicate);
        assert_eq!(p.n_matched(), 2);
        assert_eq!(cir(&p, CirDenominator::EmittedLines, 2), 2.0 / 3.0);
    }

    #[test]
    fn unparseable_text() {
        assert_eq!(
            parse_ranked_list("I think the user would like Cop Land.", &items(&["Cop Land"])),
            Err(EvalError::Unparseable)
        );
        let miss = score(None, &"i0".into(), 20, &DEFAULT_CUTOFFS, ScoringOptions::default());
        assert!(miss.ndcg.values().all(|v| *v == 0.0));
        assert_eq!(miss.cir, 0.0);
    }

    #[test]
    fn ndcg_closed_forms() {
        assert_eq!(ndcg_from_rank(Some(1), 10), 1.0);
        assert_eq!(ndcg_from_rank(Some(3), 10), 0.5);
        assert_eq!(ndcg_from_rank(Some(11), 10), 0.0);
        assert_eq!(ndcg_from_rank(None, 10), 0.0);
    }

    #[test]
    fn cir_counts() {
        let titles: Vec<String> = (0..20).map(|i| format!("Film {i}")).collect();
        let refs: Vec<&str> = titles.iter().map(String::as_str).collect();
        let c = items(&refs);
        let all: String = titles.iter().enumerate().map(|(i, t)| format!("{}. {t}\n", i + 1)).collect();
        assert_eq!(cir(&parse_ranked_list(&all, &c).unwrap(), CirDenominator::EmittedLines, 20), 1.0);

        let mut partial: Vec<String> = titles[..18].iter().enumerate().map(|(i, t)| format!("{}. {t}", i + 1)).collect();
        partial.push("19. Ghost Movie".into());
        partial.push("20. Another Ghost".into());
        let p = parse_ranked_list(&partial.join("\n"), &c).unwrap();
        assert!((cir(&p, CirDenominator::EmittedLines, 20) - 0.9).abs() < 1e-15);
        assert!((cir(&p, CirDenominator::CandidateCount, 20) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn aggregate_identical_and_split_runs() {
        let one = MetricSet {
            ndcg: BTreeMap::from([(10, 1.0)]),
            cir: 1.0,
            truth_rank: Some(1),
        };
        let zero = MetricSet {
            ndcg: BTreeMap::from([(10, 0.0)]),
            cir: 0.0,
            truth_rank: None,
        };
        let same = aggregate_runs(&vec![one.clone(); 9]);
        assert_eq!(same.ndcg[&10], MeanStd { mean: 1.0, std: 0.0 });
        let mixed = aggregate_runs(&[one, zero]);
        assert_eq!(mixed.ndcg[&10].mean, 0.5);
        assert!((mixed.ndcg[&10].std - 0.5f64.sqrt()).abs() < 1e-15);
    }
}
