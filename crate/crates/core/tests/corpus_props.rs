mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use reltab_core::corpus::{
    apply_mask, largest_remainder, mask_tokens, materialize_join_sentences, sample_negatives, split_grouped, NegativeSampler, Token,
};
use reltab_core::rng::seeded;
use reltab_core::schema::ColumnId;
use reltab_core::vocab::{MASK, UNK};

fn tokens() -> impl Strategy<Value = Vec<Token>> {
    prop::collection::vec((0u32..12, 0u32..5), 1..10)
        .prop_map(|v| v.into_iter().enumerate().map(|(i, (id, _))| Token::new(id, ColumnId(i as u32))).collect())
}

proptest! {
    #[test]
    fn mask_changes_exactly_one_cell(toks in tokens(), seed in any::<u64>()) {
        let maskable = |c: ColumnId| c.0 % 3 != 1;
        let eligible = toks.iter().any(|t| t.id != UNK && t.id != MASK && maskable(t.column));
        let res = mask_tokens(&toks, maskable, &mut seeded(seed));
        prop_assert_eq!(res.is_ok(), eligible);
        if let Ok((out, pos, target)) = res {
            prop_assert_eq!(target, toks[pos]);
            prop_assert_eq!(out[pos], Token::mask(target.column));
            prop_assert!(maskable(target.column));
            let changed = out.iter().zip(&toks).filter(|(a, b)| a != b).count();
            prop_assert_eq!(changed, 1);
        }
    }

    #[test]
    fn negative_draws_avoid_the_key(keys in prop::collection::vec(0u32..6, 2..40), seed in any::<u64>()) {
        let distinct: BTreeSet<u32> = keys.iter().copied().collect();
        prop_assume!(distinct.len() >= 2);
        let sampler = NegativeSampler::new(&keys).unwrap();
        let mut rng = seeded(seed);
        for &exclude in &distinct {
            for _ in 0..20 {
                let j = sampler.draw(exclude, &mut rng);
                prop_assert!(j < keys.len());
                prop_assert_ne!(keys[j], exclude);
            }
        }
    }

    #[test]
    fn largest_remainder_sums(n in 0usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let b = b * (1.0 - a);
        let ratios = [a, b, 1.0 - a - b];
        let counts = largest_remainder(n, ratios);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (c, r) in counts.iter().zip(ratios) {
            prop_assert!((*c as f64 - r * n as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn grouped_split_partitions_rows(keys in prop::collection::vec(prop::option::weighted(0.9, 0u32..8), 0..120), seed in any::<u64>()) {
        let ratios = [0.7, 0.15, 0.15];
        let split = split_grouped(&keys, ratios, &mut seeded(seed)).unwrap();
        let (train, valid, test) = (split.train(), split.valid(), split.test());
        let mut all: Vec<usize> = train.iter().chain(&valid).chain(&test).copied().collect();
        all.sort_unstable();
        let expected: Vec<usize> = keys.iter().enumerate().filter(|(_, k)| k.is_some()).map(|(i, _)| i).collect();
        prop_assert_eq!(all, expected);
        for (key, g) in &split.groups {
            let n = g.train.len() + g.valid.len() + g.test.len();
            prop_assert!(g.train.iter().chain(&g.valid).chain(&g.test).all(|&i| keys[i] == Some(*key)));
            if n >= 3 {
                for (part, r) in [(&g.train, 0.7), (&g.valid, 0.15), (&g.test, 0.15)] {
                    prop_assert!((part.len() as f64 - r * n as f64).abs() <= 1.0);
                }
            }
        }
        prop_assert_eq!(split, split_grouped(&keys, ratios, &mut seeded(seed)).unwrap());
    }
}

#[test]
fn masking_restores_the_row() {
    let shop = common::shop(3, 20, 60);
    let mut rng = seeded(5);
    for s in shop.db.tables.iter().flatten() {
        let Ok(m) = apply_mask(s, |_| true, &mut rng) else { continue };
        assert_eq!(&m.restore(), s);
        assert_eq!(m.base.tokens.iter().filter(|t| t.id == MASK).count(), 1);
    }
}

#[test]
fn join_pairs_agree_on_the_key() {
    let shop = common::shop(11, 30, 120);
    let fk = &shop.schema.foreign_keys[0];
    let (from, to) = shop.schema.fk_columns(fk).unwrap();
    let pairs = materialize_join_sentences(&shop.schema, fk, &shop.db.tables[0], &shop.db.tables[1]);
    // Brute force: every order row with a known customer joins exactly once.
    let expected = shop.db.tables[1].iter().filter(|s| s.token_of(from).unwrap().id != UNK).count();
    assert_eq!(pairs.len(), expected);
    for p in &pairs {
        assert!(p.positive);
        assert_eq!(p.first.token_of(to).unwrap().id, p.second.token_of(from).unwrap().id);
    }

    let with_neg = sample_negatives(&pairs, &shop.db.tables[1], from, 3, &mut seeded(2)).unwrap();
    assert_eq!(with_neg.len(), pairs.len() * 4);
    for chunk in with_neg.chunks(4) {
        let pos = &chunk[0];
        assert!(pos.positive);
        for neg in &chunk[1..] {
            assert!(!neg.positive);
            assert_eq!(neg.first, pos.first);
            assert_ne!(neg.second.token_of(from).unwrap().id, pos.first.token_of(to).unwrap().id);
            assert_ne!(neg.join_key.1, pos.join_key.1);
        }
    }
}

#[test]
fn negatives_depend_only_on_seed() {
    let shop = common::shop(1, 15, 50);
    let fk = &shop.schema.foreign_keys[0];
    let (from, _) = shop.schema.fk_columns(fk).unwrap();
    let pairs = materialize_join_sentences(&shop.schema, fk, &shop.db.tables[0], &shop.db.tables[1]);
    let run = |seed| sample_negatives(&pairs, &shop.db.tables[1], from, 2, &mut seeded(seed)).unwrap();
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}
