//! Demonstration construction.
//!
//! A standard demonstration is built from one training user. An aggregated
//! demonstration merges K similar training users into a single example:
//!
//! * history: the members' items interleaved by recency, most similar member
//!   first within each round, capped at `max_h` items;
//! * candidates: every member's next item plus random fillers up to `m`;
//! * ranking: member next items in similarity order, then the fillers in
//!   random order.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_candidate_set, CorpusError, ItemId, UserId, UserSequence};
use crate::retrieval::{select_demonstrations, RankedDemonstrations, RetrievalError, SimilarityScorer};

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("demonstration member has an empty history")]
    EmptyHistory,
    #[error("aggregation needs at least one member")]
    NoMembers,
    #[error("all member histories are empty")]
    AllHistoriesEmpty,
    #[error("max_h must be at least 1")]
    ZeroHistoryCap,
    #[error("{truths} member truths do not fit in {m} candidates")]
    TooManyTruths { truths: usize, m: usize },
    #[error("member truth {0} is not among the candidates")]
    TruthMissing(ItemId),
    #[error("no negative item available for a contrast-pair demonstration")]
    NoNegative,
}

pub type Result<T> = std::result::Result<T, DemoError>;

/// Output form of a demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskTemplate {
    /// T1: the answer is the next item.
    #[serde(rename = "t1", alias = "next-item")]
    NextItem,
    /// T2: the answer names the next item as positive and a random item as negative.
    #[serde(rename = "t2", alias = "contrast-pair")]
    ContrastPair,
    /// T3: the answer ranks all candidates with the next item first.
    #[serde(rename = "t3", alias = "ranked-items")]
    RankedItems,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoLabel {
    Next(ItemId),
    Pair { positive: ItemId, negative: ItemId },
    Ranking(Vec<ItemId>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub history: Vec<ItemId>,
    pub candidates: Option<Vec<ItemId>>,
    pub label: DemoLabel,
    pub template: TaskTemplate,
}

/// Builds a T1/T2/T3 demonstration from one training entry.
///
/// T3 always carries candidates; T1 and T2 carry them only when
/// `with_candidates` is set. The T2 negative is a non-truth candidate when
/// candidates are shown, otherwise any pool item outside the history.
pub fn build_standard_demo<R: Rng + ?Sized>(
    member: &UserSequence,
    template: TaskTemplate,
    m: usize,
    with_candidates: bool,
    item_pool: &[ItemId],
    rng: &mut R,
) -> Result<Demonstration> {
    if member.history.is_empty() {
        return Err(DemoError::EmptyHistory);
    }
    let exclude: HashSet<&ItemId> = member.history.iter().collect();
    let candidates = if template == TaskTemplate::RankedItems || with_candidates {
        Some(build_candidate_set(&member.next, item_pool, m, &exclude, rng)?)
    } else {
        None
    };
    let label = match template {
        TaskTemplate::NextItem => DemoLabel::Next(member.next.clone()),
        TaskTemplate::ContrastPair => {
            let negatives: Vec<&ItemId> = match &candidates {
                Some(c) => c.iter().filter(|i| **i != member.next).collect(),
                None => item_pool
                    .iter()
                    .filter(|i| **i != member.next && !exclude.contains(i))
                    .collect(),
            };
            let negative = negatives.choose(rng).ok_or(DemoError::NoNegative)?;
            DemoLabel::Pair {
                positive: member.next.clone(),
                negative: (*negative).clone(),
            }
        }
        TaskTemplate::RankedItems => {
            let c = candidates.as_ref().expect("T3 always has candidates");
            let mut rest: Vec<ItemId> = c.iter().filter(|i| **i != member.next).cloned().collect();
            rest.shuffle(rng);
            let mut ranking = Vec::with_capacity(c.len());
            ranking.push(member.next.clone());
            ranking.extend(rest);
            DemoLabel::Ranking(ranking)
        }
    };
    Ok(Demonstration {
        history: member.history.clone(),
        candidates,
        label,
        template,
    })
}

/// Presentation order of an aggregated history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryOrder {
    /// Collected list reversed: reads oldest first and ends with the most
    /// recent item of the most similar member.
    #[default]
    Reversed,
    /// Collection order: most recent item of the most similar member first.
    Insertion,
}

/// Round-robin merge of member histories by recency.
///
/// Round `r` takes the `r`-th most recent item of each member, members in
/// similarity order; exhausted members are skipped. Collection stops at
/// `max_h` items or when every history is used up.
pub fn aggregate_history(members: &[&UserSequence], max_h: usize, order: HistoryOrder) -> Result<Vec<ItemId>> {
    if members.is_empty() {
        return Err(DemoError::NoMembers);
    }
    if max_h == 0 {
        return Err(DemoError::ZeroHistoryCap);
    }
    let longest = members.iter().map(|m| m.history.len()).max().unwrap_or(0);
    if longest == 0 {
        return Err(DemoError::AllHistoriesEmpty);
    }
    let mut merged = Vec::with_capacity(max_h.min(members.iter().map(|m| m.history.len()).sum()));
    'rounds: for depth in 0..longest {
        for member in members {
            let h = &member.history;
            if depth < h.len() {
                merged.push(h[h.len() - 1 - depth].clone());
                if merged.len() == max_h {
                    break 'rounds;
                }
            }
        }
    }
    if order == HistoryOrder::Reversed {
        merged.reverse();
    }
    Ok(merged)
}

/// Members' next items in similarity order, keeping the first occurrence when
/// two members share the same next item.
pub fn member_truths(members: &[&UserSequence]) -> Vec<ItemId> {
    let mut seen = HashSet::new();
    members
        .iter()
        .filter(|m| seen.insert(&m.next))
        .map(|m| m.next.clone())
        .collect()
}

/// All `truths` plus `m - truths.len()` random fillers drawn from `item_pool`
/// outside `truths` and `history`, shuffled.
pub fn aggregate_candidates<R: Rng + ?Sized>(
    truths: &[ItemId],
    history: &[ItemId],
    item_pool: &[ItemId],
    m: usize,
    rng: &mut R,
) -> Result<Vec<ItemId>> {
    if truths.len() > m {
        return Err(DemoError::TooManyTruths {
            truths: truths.len(),
            m,
        });
    }
    let blocked: HashSet<&ItemId> = truths.iter().chain(history).collect();
    let eligible: Vec<&ItemId> = item_pool.iter().filter(|i| !blocked.contains(i)).collect();
    let need = m - truths.len();
    if eligible.len() < need {
        return Err(CorpusError::InsufficientPool {
            needed: need,
            available: eligible.len(),
        }
        .into());
    }
    let mut candidates: Vec<ItemId> = truths.to_vec();
    candidates.extend(
        rand::seq::index::sample(rng, eligible.len(), need)
            .into_iter()
            .map(|i| eligible[i].clone()),
    );
    candidates.shuffle(rng);
    Ok(candidates)
}

/// Ranking with `truths` at positions 1..=K in order, remaining candidates
/// shuffled after them.
pub fn aggregate_ranking<R: Rng + ?Sized>(truths: &[ItemId], candidates: &[ItemId], rng: &mut R) -> Result<Vec<ItemId>> {
    if let Some(missing) = truths.iter().find(|t| !candidates.contains(t)) {
        return Err(DemoError::TruthMissing(missing.clone()));
    }
    let top: HashSet<&ItemId> = truths.iter().collect();
    let mut rest: Vec<ItemId> = candidates.iter().filter(|c| !top.contains(c)).cloned().collect();
    rest.shuffle(rng);
    let mut ranking = truths.to_vec();
    ranking.extend(rest);
    Ok(ranking)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedDemonstration {
    /// Member users and their similarity scores, most similar first.
    pub members: Vec<(UserId, f64)>,
    pub history: Vec<ItemId>,
    pub candidates: Vec<ItemId>,
    pub ranking: Vec<ItemId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationSettings {
    pub max_h: usize,
    pub m: usize,
    #[serde(default)]
    pub history_order: HistoryOrder,
}

impl Default for AggregationSettings {
    fn default() -> Self {
        Self {
            max_h: 50,
            m: 20,
            history_order: HistoryOrder::Reversed,
        }
    }
}

/// Aggregates already-ranked members into one demonstration.
pub fn aggregate_demo<R: Rng + ?Sized>(
    ranked: &RankedDemonstrations<'_>,
    settings: AggregationSettings,
    item_pool: &[ItemId],
    rng: &mut R,
) -> Result<AggregatedDemonstration> {
    let members = ranked.sequences();
    let history = aggregate_history(&members, settings.max_h, settings.history_order)?;
    let truths = member_truths(&members);
    let candidates = aggregate_candidates(&truths, &history, item_pool, settings.m, rng)?;
    let ranking = aggregate_ranking(&truths, &candidates, rng)?;
    Ok(AggregatedDemonstration {
        members: ranked.summary(),
        history,
        candidates,
        ranking,
    })
}

/// Selects the `k` most similar training users and aggregates them.
#[allow(clippy::too_many_arguments)]
pub fn build_aggregated_demo<'a, R: Rng + ?Sized>(
    user: &UserId,
    history: &[ItemId],
    pool: impl IntoIterator<Item = &'a UserSequence>,
    k: usize,
    scorer: &dyn SimilarityScorer,
    settings: AggregationSettings,
    item_pool: &[ItemId],
    rng: &mut R,
) -> Result<AggregatedDemonstration> {
    let ranked = select_demonstrations(user, history, pool, k, scorer)?;
    aggregate_demo(&ranked, settings, item_pool, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::OverlapScorer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(v: &[&str]) -> Vec<ItemId> {
        v.iter().map(|s| ItemId::from(*s)).collect()
    }

    fn member(user: &str, history: &[&str], next: &str) -> UserSequence {
        UserSequence {
            user: user.into(),
            history: ids(history),
            next: next.into(),
        }
    }

    fn pool(n: usize) -> Vec<ItemId> {
        (0..n).map(|i| ItemId(format!("p{i}"))).collect()
    }

    #[test]
    fn round_robin_two_members() {
        let a = member("a", &["a1", "a2", "a3"], "ya");
        let b = member("b", &["b1", "b2"], "yb");
        let raw = aggregate_history(&[&a, &b], 50, HistoryOrder::Insertion).unwrap();
        assert_eq!(raw, ids(&["a3", "b2", "a2", "b1", "a1"]));
        let shown = aggregate_history(&[&a, &b], 50, HistoryOrder::Reversed).unwrap();
        assert_eq!(shown, ids(&["a1", "b1", "a2", "b2", "a3"]));
    }

    #[test]
    fn cap_applies_mid_round() {
        let a = member("a", &["a1", "a2", "a3"], "ya");
        let b = member("b", &["b1", "b2"], "yb");
        let h = aggregate_history(&[&a, &b], 2, HistoryOrder::Insertion).unwrap();
        assert_eq!(h, ids(&["a3", "b2"]));
        let h = aggregate_history(&[&a, &b], 3, HistoryOrder::Insertion).unwrap();
        assert_eq!(h, ids(&["a3", "b2", "a2"]));
    }

    #[test]
    fn single_member_keeps_recent_chronology() {
        let hist: Vec<String> = (0..80).map(|i| format!("h{i}")).collect();
        let refs: Vec<&str> = hist.iter().map(String::as_str).collect();
        let a = member("a", &refs, "y");
        let h = aggregate_history(&[&a], 50, HistoryOrder::Reversed).unwrap();
        assert_eq!(h, a.history[30..].to_vec());
    }

    #[test]
    fn history_errors() {
        let empty = member("e", &[], "y");
        assert!(matches!(
            aggregate_history(&[&empty], 5, HistoryOrder::Reversed),
            Err(DemoError::AllHistoriesEmpty)
        ));
        assert!(matches!(aggregate_history(&[], 5, HistoryOrder::Reversed), Err(DemoError::NoMembers)));
    }

    #[test]
    fn candidates_hold_truths_and_fillers() {
        let truths = ids(&["t1", "t2", "t3"]);
        let items = pool(100);
        let hist = ids(&["p0", "p1"]);
        let c = aggregate_candidates(&truths, &hist, &items, 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(c.len(), 20);
        assert!(truths.iter().all(|t| c.contains(t)));
        assert!(!c.contains(&ItemId::from("p0")));
        let again = aggregate_candidates(&truths, &hist, &items, 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(c, again);

        let exact = aggregate_candidates(&truths, &[], &items, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut sorted = exact.clone();
        sorted.sort();
        assert_eq!(sorted, truths);

        assert!(matches!(
            aggregate_candidates(&truths, &[], &items, 2, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(DemoError::TooManyTruths { truths: 3, m: 2 })
        ));
    }

    #[test]
    fn ranking_puts_truths_first() {
        let truths = ids(&["t1", "t2"]);
        let c = ids(&["x", "t2", "y", "t1", "z"]);
        let a = aggregate_ranking(&truths, &c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = aggregate_ranking(&truths, &c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(&a[..2], &truths[..]);
        assert_eq!(&b[..2], &truths[..]);
        let one = aggregate_ranking(&ids(&["t"]), &ids(&["t"]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(one, ids(&["t"]));
        assert!(matches!(
            aggregate_ranking(&ids(&["q"]), &c, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(DemoError::TruthMissing(_))
        ));
    }

    #[test]
    fn shared_truths_are_deduplicated() {
        let a = member("a", &["x"], "same");
        let b = member("b", &["y"], "same");
        let c = member("c", &["z"], "other");
        assert_eq!(member_truths(&[&a, &b, &c]), ids(&["same", "other"]));
    }

    #[test]
    fn standard_t3_demo() {
        let m = member("u", &["p0", "p1", "p2"], "p50");
        let items = pool(100);
        let d = build_standard_demo(&m, TaskTemplate::RankedItems, 20, false, &items, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let DemoLabel::Ranking(r) = &d.label else { panic!() };
        assert_eq!(r.len(), 20);
        assert_eq!(r[0], m.next);
        let mut a = r.clone();
        let mut b = d.candidates.clone().unwrap();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn standard_t1_t2_demos() {
        let m = member("u", &["p0"], "p5");
        let items = pool(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t1 = build_standard_demo(&m, TaskTemplate::NextItem, 5, false, &items, &mut rng).unwrap();
        assert_eq!(t1.label, DemoLabel::Next("p5".into()));
        assert!(t1.candidates.is_none());

        let t2 = build_standard_demo(&m, TaskTemplate::ContrastPair, 5, true, &items, &mut rng).unwrap();
        let DemoLabel::Pair { positive, negative } = &t2.label else { panic!() };
        assert_eq!(positive.as_str(), "p5");
        assert_ne!(negative, positive);
        assert!(t2.candidates.as_ref().unwrap().contains(negative));

        let lonely = ids(&["p5"]);
        assert!(matches!(
            build_standard_demo(&m, TaskTemplate::ContrastPair, 5, false, &lonely, &mut rng),
            Err(DemoError::NoNegative)
        ));
    }

    #[test]
    fn build_aggregated_end_to_end() {
        let train: Vec<UserSequence> = (0..10)
            .map(|u| {
                let hist: Vec<String> = (0..(5 + u)).map(|i| format!("p{}", i + u)).collect();
                let refs: Vec<&str> = hist.iter().map(String::as_str).collect();
                member(&format!("u{u}"), &refs, &format!("p{}", 60 + u))
            })
            .collect();
        let query = ids(&["p3", "p4", "p5", "p6", "p7"]);
        let settings = AggregationSettings::default();
        let agg = build_aggregated_demo(
            &"test".into(),
            &query,
            &train,
            3,
            &OverlapScorer,
            settings,
            &pool(100),
            &mut ChaCha8Rng::seed_from_u64(8),
        )
        .unwrap();
        assert_eq!(agg.members.len(), 3);
        assert_eq!(agg.candidates.len(), 20);
        let by_user = |u: &UserId| train.iter().find(|t| &t.user == u).unwrap();
        for (i, (u, _)) in agg.members.iter().enumerate() {
            assert_eq!(agg.ranking[i], by_user(u).next);
        }
    }
}
