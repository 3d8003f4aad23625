mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use posa::autograd::Graph;
use posa::metrics::{panoptic_quality, pq_oracle};
use posa::rng::Rng;
use posa::synthdata::generate_sample;
use posa::tensor::Tensor;
use posa::trainer::batch_indices;
use posa::types::{byte_to_unit, unit_to_byte, validate_panoptic_map};
use posa::{losses, Config, LossTerm};

fn rects(size: usize) -> impl Strategy<Value = Vec<(usize, usize, usize, usize, usize)>> {
    prop::collection::vec((0..size, 0..size, 0..size, 0..size, 0..common::CATEGORIES), 0..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pq_fields_are_bounded_and_match_oracle(gt in rects(8), pred in rects(8)) {
        let gt = common::map_from_rects(8, &gt);
        let pred = common::map_from_rects(8, &pred);
        let fast = panoptic_quality(&pred, &gt).unwrap();
        prop_assert_eq!(&fast, &pq_oracle(&pred, &gt).unwrap());
        for v in [fast.PQ, fast.SQ, fast.RQ, fast.PQ_th, fast.PQ_st] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn pq_of_a_map_with_itself_is_one(r in rects(8)) {
        let m = common::map_from_rects(8, &r);
        prop_assert_eq!(panoptic_quality(&m, &m).unwrap().PQ, 1.0);
    }

    #[test]
    fn generated_maps_satisfy_invariants(seed in any::<u64>(), index in 0usize..1000) {
        let cfg = Config::toy();
        let s = generate_sample(&cfg, seed, index);
        prop_assert!(validate_panoptic_map(&s.panoptic, &cfg).is_empty());
        prop_assert_eq!(&s, &generate_sample(&cfg, seed, index));
        prop_assert!(s.a.data().iter().chain(s.b.data()).all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn byte_levels_round_trip(b in any::<u8>()) {
        prop_assert_eq!(unit_to_byte(byte_to_unit(b)), b);
    }

    #[test]
    fn hinge_terms_are_nonnegative_for_the_discriminator(p_img in -5.0f64..5.0, p_obj in -5.0f64..5.0, real in any::<bool>(), lambda in 0.0f64..3.0) {
        let g = Graph::<f64>::new();
        let s = |v| g.constant(Tensor::scalar(v));
        prop_assert!(losses::hinge_d(s(p_img), s(p_obj), real, lambda).item() >= 0.0);
        let gen = losses::hinge_g(s(p_img), s(p_obj), lambda).item();
        prop_assert!((gen + p_img + lambda * p_obj).abs() < 1e-12);
    }

    #[test]
    fn every_epoch_is_a_permutation(seed in any::<u64>(), n in 1usize..40, batch in 1usize..8) {
        let per_epoch = n.div_ceil(batch) as u64 + 2;
        let mut seen = Vec::new();
        for it in 1..=per_epoch * 2 {
            let b = batch_indices(seed, n, batch, it);
            prop_assert_eq!(b.len(), batch);
            prop_assert!(b.iter().all(|&i| i < n));
            seen.extend(b);
        }
        let first: BTreeSet<_> = seen[..n].iter().copied().collect();
        prop_assert_eq!(first.len(), n);
        prop_assert_eq!(batch_indices(seed, n, batch, 3), batch_indices(seed, n, batch, 3));
    }

    #[test]
    fn config_text_round_trips(l in prop::array::uniform5(0.0f64..10.0), lr in 1e-6f64..1.0, seed in 0..=i64::MAX as u64, off in any::<bool>()) {
        let mut cfg = Config::toy();
        [cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda4, cfg.lambda5] = l;
        cfg.lr_G = lr;
        cfg.seed = seed;
        cfg.set_disabled(LossTerm::Kl, off);
        let back = Config::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn total_is_linear_in_each_enabled_part(parts in prop::array::uniform5(-10.0f64..10.0), k in 0usize..5, bump in -3.0f64..3.0) {
        let cfg = Config::desk();
        let a = losses::total_loss(parts, &cfg).total;
        let mut moved = parts;
        moved[k] += bump;
        let b = losses::total_loss(moved, &cfg).total;
        prop_assert!((b - a - cfg.weight(LossTerm::ALL[k]) * bump).abs() < 1e-9);
    }

    #[test]
    fn rng_streams_are_reproducible(seed in any::<u64>(), stream in any::<u64>()) {
        let mut x = Rng::new(seed, stream);
        let mut y = Rng::new(seed, stream);
        for _ in 0..8 {
            prop_assert_eq!(x.next_u64(), y.next_u64());
        }
        let mut r = Rng::from_state(x.state());
        prop_assert_eq!(r.next_u64(), x.next_u64());
    }
}
