//! Invariants checked over randomly generated inputs.

mod support;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use support::*;
use tempseg::conv_lstm::Embedding;
use tempseg::conv_lstm::{clip_weights, encode_sequence, step, ConvLstmParams, RecurrentState};
use tempseg::engine::{poly_lr, Schedule};
use tempseg::flowwarp::{
    decode_flo, encode_flo, occlusion_mask, warp_backward, warp_labels_nearest, FlowField,
    OcclusionMask,
};
use tempseg::losses::{anti_collapse_vjp, mf_loss, pf_loss, pixel_distill, temporal_loss};
use tempseg::metrics::{confusion_and_miou, temporal_consistency, LabelMap};
use tempseg::similarity::{
    at_operator, pool_to_grid, self_similarity, FeatureGrid, PoolSize, SimilarityMap,
};
use tempseg::tensor::Grid;

fn dims() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 2usize..9, 2usize..9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_flow_warp_is_identity((seed, h, w) in dims()) {
        let src = random_grid(&mut rng(seed), 3, h, w);
        let out = warp_backward(&src, &FlowField::zeros(h, w)).unwrap();
        prop_assert_eq!(out.data(), src.data());
    }

    #[test]
    fn integer_flow_shifts_interior((seed, h, w) in dims(), dx in -2i32..=2, dy in -2i32..=2) {
        let src = random_grid(&mut rng(seed), 1, h, w);
        let out = warp_backward(&src, &FlowField::constant(h, w, dx as f64, dy as f64)).unwrap();
        for y in 0..h as i32 {
            for x in 0..w as i32 {
                let (sx, sy) = (x + dx, y + dy);
                if sx >= 0 && sy >= 0 && sx < w as i32 && sy < h as i32 {
                    prop_assert_eq!(out.at(0, y as usize, x as usize), src.at(0, sy as usize, sx as usize));
                }
            }
        }
    }

    #[test]
    fn warp_stays_within_source_range((seed, h, w) in dims()) {
        let mut r = rng(seed);
        let src = random_grid(&mut r, 2, h, w);
        let out = warp_backward(&src, &random_flow(&mut r, h, w, 4.0)).unwrap();
        let lo = src.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = src.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.data().iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }

    #[test]
    fn label_warp_only_emits_source_ids((seed, h, w) in dims()) {
        let mut r = rng(seed);
        let labels = random_labels(&mut r, h, w, 3);
        let out = warp_labels_nearest(&labels, &random_flow(&mut r, h, w, 3.0)).unwrap();
        prop_assert!(out.ids().iter().all(|id| labels.ids().contains(id)));
    }

    #[test]
    fn occlusion_mask_is_in_unit_interval((seed, h, w) in dims()) {
        let mut r = rng(seed);
        let a = random_grid(&mut r, 3, h, w);
        let b = random_grid(&mut r, 3, h, w);
        let m = occlusion_mask(&a, &b).unwrap();
        prop_assert!(m.values().iter().all(|v| *v > 0.0 && *v <= 1.0));
        let same = occlusion_mask(&a, &a).unwrap();
        prop_assert!(same.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn flo_round_trip_is_exact((seed, h, w) in dims()) {
        let flow = random_flow(&mut rng(seed), h, w, 5.0);
        let back = decode_flo(&encode_flo(&flow), std::path::Path::new("mem")).unwrap();
        let f32s = |v: &[f64]| v.iter().map(|x| *x as f32).collect::<Vec<_>>();
        prop_assert_eq!(f32s(back.dx()), f32s(flow.dx()));
        prop_assert_eq!(f32s(back.dy()), f32s(flow.dy()));
    }

    #[test]
    fn similarity_is_bounded_and_symmetric(seed in any::<u64>(), n in 1usize..10, c in 1usize..6) {
        let x = random_features(&mut rng(seed), n, c);
        let s = self_similarity(&x);
        for i in 0..n {
            prop_assert!((s.at(i, i) - 1.0).abs() <= 1e-12);
            for j in 0..n {
                prop_assert!(s.at(i, j).abs() <= 1.0 + 1e-12);
                prop_assert_eq!(s.at(i, j), s.at(j, i));
            }
        }
    }

    #[test]
    fn similarity_ignores_positive_row_scale(seed in any::<u64>(), n in 1usize..8, c in 1usize..5) {
        let mut r = rng(seed);
        let x1 = random_features(&mut r, n, c);
        let x2 = random_features(&mut r, n + 1, c);
        let mut scaled = x1.clone();
        for i in 0..n {
            let s = r.gen_range(0.1..10.0);
            scaled.values_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= s);
        }
        let a = at_operator(&x1, &x2).unwrap();
        let b = at_operator(&scaled, &x2).unwrap();
        for (u, v) in a.values().iter().zip(b.values()) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_rows_give_zero_similarity(seed in any::<u64>(), n in 2usize..8) {
        let mut x = random_features(&mut rng(seed), n, 3);
        x.values_mut()[..3].iter_mut().for_each(|v| *v = 0.0);
        let s = self_similarity(&x);
        prop_assert!((0..n).all(|j| s.at(0, j) == 0.0 && s.at(j, 0) == 0.0));
    }

    #[test]
    fn pooling_preserves_constants(h in 2usize..12, w in 2usize..12, ph in 1usize..5, pw in 1usize..5, v in -3.0f64..3.0) {
        prop_assume!(ph <= h && pw <= w);
        let g = pool_to_grid(&Grid::filled(2, h, w, v), PoolSize { height: ph, width: pw }).unwrap();
        prop_assert_eq!(g.rows(), ph * pw);
        prop_assert!(g.values().iter().all(|x| (x - v).abs() <= 1e-12));
    }

    #[test]
    fn miou_is_invariant_to_class_relabelling((seed, h, w) in dims()) {
        let mut r = rng(seed);
        let k = 4;
        let preds: Vec<LabelMap> = (0..2).map(|_| random_labels(&mut r, h, w, k)).collect();
        let gts: Vec<LabelMap> = (0..2).map(|_| random_labels(&mut r, h, w, k)).collect();
        let mut perm: Vec<u8> = (0..k).collect();
        perm.shuffle(&mut r);
        let base = confusion_and_miou(&preds, &gts, k as usize).unwrap();
        let p2: Vec<_> = preds.iter().map(|m| m.relabel(&perm)).collect();
        let g2: Vec<_> = gts.iter().map(|m| m.relabel(&perm)).collect();
        let moved = confusion_and_miou(&p2, &g2, k as usize).unwrap();
        prop_assert!((base.miou - moved.miou).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&base.miou));
        prop_assert_eq!(base.pixel_accuracy, moved.pixel_accuracy);
    }

    #[test]
    fn tc_is_a_fraction_and_one_for_static_predictions((seed, h, w) in dims(), len in 2usize..5) {
        let mut r = rng(seed);
        let preds: Vec<LabelMap> = (0..len).map(|_| random_labels(&mut r, h, w, 3)).collect();
        let flows: Vec<FlowField> = (0..len - 1).map(|_| random_flow(&mut r, h, w, 2.0)).collect();
        let tc = temporal_consistency(&preds, &flows, 3).unwrap();
        prop_assert!((0.0..=1.0).contains(&tc.mean));
        let still = vec![preds[0].clone(); len];
        let zero = vec![FlowField::zeros(h, w); len - 1];
        prop_assert_eq!(temporal_consistency(&still, &zero, 3).unwrap().mean, 1.0);
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_on_agreement((seed, h, w) in dims()) {
        let mut r = rng(seed);
        let qa = random_probs(&mut r, 3, h, w);
        let qb = random_probs(&mut r, 3, h, w);
        let flow = random_flow(&mut r, h, w, 2.0);
        let mask = OcclusionMask::uniform(h, w, 0.7).unwrap();
        let pool = PoolSize { height: 2, width: 2 };
        prop_assert!(temporal_loss(&qa, &qb, &flow, &mask).unwrap() >= 0.0);
        prop_assert!(pixel_distill(&qa, &qb).unwrap() >= -1e-12);
        prop_assert!(pixel_distill(&qa, &qa).unwrap().abs() <= 1e-12);
        prop_assert!(pf_loss(&qa, &qb, &qb, &qa, pool).unwrap() >= 0.0);
        prop_assert_eq!(pf_loss(&qa, &qb, &qa, &qb, pool).unwrap(), 0.0);
        let e = Embedding((0..4).map(|_| r.gen_range(-1.0..1.0)).collect());
        prop_assert_eq!(mf_loss(&e, &e).unwrap(), 0.0);
    }

    #[test]
    fn anti_collapse_vanishes_beyond_margin(seed in any::<u64>(), d in 1usize..8, margin in 0.01f64..1.0) {
        let mut r = rng(seed);
        let e = Embedding((0..d).map(|_| r.gen_range(-1.0..1.0)).collect());
        let (v, g) = anti_collapse_vjp(&e, margin);
        prop_assert!(v >= 0.0);
        if e.norm() > margin {
            prop_assert_eq!(v, 0.0);
            prop_assert!(g.iter().all(|x| *x == 0.0));
        }
        let (v0, g0) = anti_collapse_vjp(&Embedding(vec![0.0; d]), margin);
        prop_assert_eq!(v0, margin);
        prop_assert!(g0.iter().all(|x| *x < 0.0));
    }

    #[test]
    fn lstm_hidden_state_is_bounded((seed, h, w) in dims(), hc in 1usize..4) {
        let mut r = rng(seed);
        let p = ConvLstmParams::random(hc, 3, 2.0, &mut r).unwrap();
        let state = RecurrentState { memory: random_grid(&mut r, hc, h, w), hidden: random_grid(&mut r, hc, h, w) };
        let next = step(&p, &state, &random_grid(&mut r, 1, h, w)).unwrap();
        prop_assert!(next.hidden.data().iter().all(|v| v.abs() < 1.0));
        let maps = vec![SimilarityMap::new(h, w, (0..h * w).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap(); 3];
        prop_assert_eq!(encode_sequence(&p, &maps).unwrap().len(), hc);
        let zero = ConvLstmParams::zeros(hc, 3).unwrap();
        prop_assert!(encode_sequence(&zero, &maps).unwrap().0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn clipping_bounds_every_weight(seed in any::<u64>(), bound in 0.01f64..1.0) {
        let p = ConvLstmParams::random(2, 3, 3.0, &mut rng(seed)).unwrap();
        let c = clip_weights(&p, -bound, bound).unwrap();
        prop_assert!(c.iter().all(|v| v.abs() <= bound));
        prop_assert!(p.iter().zip(c.iter()).all(|(a, b)| a.abs() > bound || a == b));
    }

    #[test]
    fn poly_lr_decays_monotonically(base in 1e-4f64..1.0, power in 0.1f64..3.0, max in 1usize..500) {
        let s = Schedule { base_lr: base, power, max_iterations: max };
        let mut prev = f64::INFINITY;
        for i in 0..=max {
            let lr = poly_lr(i, &s).unwrap();
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
        prop_assert!(poly_lr(max + 1, &s).is_err());
    }

    #[test]
    fn chained_flow_matches_sequential_warps(seed in any::<u64>(), a in -2i32..=2, b in -2i32..=2) {
        let (h, w) = (8, 8);
        let src = random_grid(&mut rng(seed), 1, h, w);
        let f1 = FlowField::constant(h, w, a as f64, 0.0);
        let f2 = FlowField::constant(h, w, b as f64, 0.0);
        let chained = f1.then(&f2).unwrap();
        let direct = warp_backward(&src, &chained).unwrap();
        let margin = (a.abs() + b.abs()) as usize;
        let twice = warp_backward(&warp_backward(&src, &f2).unwrap(), &f1).unwrap();
        for y in 0..h {
            for x in margin..w.saturating_sub(margin) {
                prop_assert_eq!(direct.at(0, y, x), twice.at(0, y, x));
            }
        }
    }
}

#[test]
fn feature_grid_rejects_bad_shapes() {
    assert!(FeatureGrid::new(2, 3, vec![0.0; 5]).is_err());
    assert!(SimilarityMap::new(2, 2, vec![0.0; 3]).is_err());
}
