use std::collections::{HashMap, HashSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seqrec::corpus::{filter_log, Catalog, InteractionLog, Item, ItemId, UserId, UserSequence};
use seqrec::demo::{aggregate_candidates, aggregate_history, aggregate_ranking, member_truths, HistoryOrder};
use seqrec::eval::{cir, ndcg_from_rank, parse_ranked_list, CirDenominator, RankBasis};
use seqrec::prompts::{indexed_title_list, parse_indexed_title_list};
use seqrec::retrieval::{cosine_similarity, EmbeddingVector};

fn item(i: usize) -> ItemId {
    ItemId(format!("i{i}"))
}

fn members_strategy() -> impl Strategy<Value = Vec<UserSequence>> {
    prop::collection::vec((prop::collection::vec(0usize..120, 0..70), 120usize..160), 1..8).prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(u, (hist, next))| UserSequence {
                user: UserId(format!("u{u}")),
                history: hist.into_iter().map(item).collect(),
                next: item(next),
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn history_length_is_capped_sum(members in members_strategy(), max_h in 1usize..80) {
        let refs: Vec<&UserSequence> = members.iter().collect();
        let total: usize = members.iter().map(|m| m.history.len()).sum();
        match aggregate_history(&refs, max_h, HistoryOrder::Reversed) {
            Ok(h) => prop_assert_eq!(h.len(), total.min(max_h)),
            Err(_) => prop_assert_eq!(total, 0),
        }
    }

    #[test]
    fn reversed_is_insertion_flipped(members in members_strategy(), max_h in 1usize..80) {
        let refs: Vec<&UserSequence> = members.iter().collect();
        prop_assume!(members.iter().any(|m| !m.history.is_empty()));
        let mut a = aggregate_history(&refs, max_h, HistoryOrder::Insertion).unwrap();
        a.reverse();
        prop_assert_eq!(a, aggregate_history(&refs, max_h, HistoryOrder::Reversed).unwrap());
    }

    #[test]
    fn ranking_permutes_candidates_with_truths_first(members in members_strategy(), seed: u64, m in 8usize..25) {
        let refs: Vec<&UserSequence> = members.iter().collect();
        prop_assume!(members.iter().any(|x| !x.history.is_empty()));
        let pool: Vec<ItemId> = (0..160).map(item).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = aggregate_history(&refs, 50, HistoryOrder::Reversed).unwrap();
        let truths = member_truths(&refs);
        prop_assume!(truths.len() <= m);
        let c = aggregate_candidates(&truths, &h, &pool, m, &mut rng).unwrap();
        let r = aggregate_ranking(&truths, &c, &mut rng).unwrap();
        prop_assert_eq!(c.len(), m);
        prop_assert_eq!(&r[..truths.len()], &truths[..]);
        let mut sorted_r = r.clone();
        let mut sorted_c = c.clone();
        sorted_r.sort();
        sorted_c.sort();
        prop_assert_eq!(sorted_r, sorted_c);
        let hist: HashSet<&ItemId> = h.iter().collect();
        prop_assert!(c.iter().all(|x| truths.contains(x) || !hist.contains(x)));
    }

    #[test]
    fn filtering_is_idempotent(rows in prop::collection::vec((0u8..25, 0u8..30, 0i64..50), 1..400), k in 1usize..6) {
        let catalog: Catalog = (0..30).map(|i| Item { id: ItemId(format!("m{i}")), title: format!("T{i}") }).collect();
        let log = InteractionLog::from_records(
            rows.iter().map(|(u, i, t)| (UserId(format!("u{u}")), ItemId(format!("m{i}")), *t)),
            catalog,
        ).unwrap();
        if let Ok(once) = filter_log(&log, k) {
            let twice = filter_log(&once, k).unwrap();
            prop_assert_eq!(once.n_interactions(), twice.n_interactions());
            prop_assert_eq!(once.n_users(), twice.n_users());
            for (u, seq) in once.users() {
                prop_assert!(seq.len() >= k);
                prop_assert_eq!(twice.sequence(u).unwrap(), seq);
            }
        }
    }

    #[test]
    fn ndcg_is_bounded_and_monotone(r in 1usize..60, n in 1usize..60) {
        let v = ndcg_from_rank(Some(r), n);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!(ndcg_from_rank(Some(r + 1), n) <= v);
        prop_assert!(ndcg_from_rank(Some(r), n + 1) >= v);
    }

    #[test]
    fn parser_recovers_rendered_ranking(perm in Just((0..20).collect::<Vec<usize>>()).prop_shuffle()) {
        let cands: Vec<Item> = (0..20)
            .map(|i| Item { id: item(i), title: format!("The {} Affair ({})", ["Long", "Short", "Blue", "Red"][i % 4], 1960 + i) })
            .collect();
        let text: String = perm.iter().enumerate().map(|(pos, &i)| format!("{}. {}\n", pos + 1, cands[i].title)).collect();
        let parsed = parse_ranked_list(&text, &cands).unwrap();
        for (pos, &i) in perm.iter().enumerate() {
            prop_assert_eq!(parsed.rank_of(&item(i), RankBasis::EmittedLines), Some(pos + 1));
        }
        prop_assert_eq!(cir(&parsed, CirDenominator::EmittedLines, 20), 1.0);
    }

    #[test]
    fn title_lists_round_trip(titles in prop::collection::vec("[A-Za-z0-9 ,:'\"!?\\\\-]{1,30}", 0..12)) {
        let text = indexed_title_list(&titles);
        let back = parse_indexed_title_list(&text).unwrap();
        prop_assert_eq!(back, titles);
    }

    #[test]
    fn cosine_is_symmetric_and_bounded(a in prop::collection::vec(-5.0f64..5.0, 8), b in prop::collection::vec(-5.0f64..5.0, 8)) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let u = EmbeddingVector::new("m", a).unwrap();
        let v = EmbeddingVector::new("m", b).unwrap();
        let s = cosine_similarity(&u, &v).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(s, cosine_similarity(&v, &u).unwrap());
        prop_assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_truths_stay_unique(nexts in prop::collection::vec(0usize..4, 1..8)) {
        let members: Vec<UserSequence> = nexts.iter().enumerate().map(|(u, n)| UserSequence {
            user: UserId(format!("u{u}")), history: vec![item(100 + u)], next: item(*n) }).collect();
        let refs: Vec<&UserSequence> = members.iter().collect();
        let truths = member_truths(&refs);
        let distinct: HashMap<&ItemId, ()> = truths.iter().map(|t| (t, ())).collect();
        prop_assert_eq!(distinct.len(), truths.len());
        prop_assert_eq!(&truths[0], &members[0].next);
    }
}
