use std::collections::{BTreeMap, BTreeSet, HashSet};

use proptest::prelude::*;
use svco::autodiff::{log_sigmoid, Tape, Tensor};
use svco::model::{checkpoint, log_prob, ImageCondition, InitScale, ModelDims, ModelParams};
use svco::mvc::augment::{contrast_tokens, words, CaptionPair, RetryPolicy};
use svco::mvc::filter::{run_filter, FilterConfig, KeepReason};
use svco::mvc::{augment_all, cosine, store, TemplateRewriter};
use svco::objectives::{
    attend_loss, dpo_loss, mdpo_loss, reject_loss, svco_loss, vco_loss, viscon_loss, Betas,
    LogProbBundle,
};
use svco::probe::{avg_improvement, perplexity, visual_dependency, ProbeReport, ProbeSample};
use svco::synth::{gen_pair, Codebook, ContrastType, GenOptions};

fn logp() -> impl Strategy<Value = f64> {
    -40.0f64..0.0
}

fn bundle() -> impl Strategy<Value = LogProbBundle> {
    (logp(), logp(), logp(), logp(), logp(), logp()).prop_map(|(a, b, c, d, e, f)| LogProbBundle {
        pol_iw: a,
        pol_il: b,
        pol_noimg: c,
        ref_iw: d,
        ref_il: e,
        ref_noimg: f,
    })
}

fn betas() -> impl Strategy<Value = Betas> {
    (0.01f64..2.0, 0.01f64..2.0, 0.01f64..2.0).prop_map(|(beta, beta1, beta2)| Betas { beta, beta1, beta2 })
}

fn contrast() -> impl Strategy<Value = ContrastType> {
    prop::sample::select(ContrastType::ALL.to_vec())
}

fn all_losses(w: &LogProbBundle, l: &LogProbBundle, b: &Betas) -> [f64; 8] {
    [
        dpo_loss(w, l, b),
        viscon_loss(w, b),
        attend_loss(w, b),
        reject_loss(w, b),
        vco_loss(w, b),
        svco_loss(w, l, b),
        mdpo_loss(w, l, b),
        attend_loss(l, b),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn svco_exchange_symmetry(w in bundle(), l in bundle(), b in betas()) {
        let direct = svco_loss(&w, &l, &b);
        let exchanged = svco_loss(&l.flip(), &w.flip(), &b);
        prop_assert_eq!(direct.to_bits(), exchanged.to_bits());
    }

    #[test]
    fn log_sigmoid_is_finite(x in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
        let y = log_sigmoid(x);
        prop_assert!(y.is_finite() && y <= 0.0, "log_sigmoid({x}) = {y}");
    }
}

proptest! {
    #[test]
    fn identical_models_give_ln2(v in prop::array::uniform3(logp()), u in prop::array::uniform3(logp()), b in betas()) {
        let same = |x: [f64; 3]| LogProbBundle {
            pol_iw: x[0], pol_il: x[1], pol_noimg: x[2],
            ref_iw: x[0], ref_il: x[1], ref_noimg: x[2],
        };
        let (w, l) = (same(v), same(u));
        let ln2 = std::f64::consts::LN_2;
        for (got, want) in all_losses(&w, &l, &b).into_iter().zip([ln2, ln2, ln2, ln2, 2.0 * ln2, 4.0 * ln2, 2.0 * ln2, ln2]) {
            prop_assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn common_shift_leaves_losses_unchanged(
        w in bundle(), l in bundle(), b in betas(), c in -5.0f64..5.0, slot in 0usize..3,
    ) {
        let shift = |x: &LogProbBundle| {
            let mut y = *x;
            match slot {
                0 => { y.pol_iw += c; y.ref_iw += c; }
                1 => { y.pol_il += c; y.ref_il += c; }
                _ => { y.pol_noimg += c; y.ref_noimg += c; }
            }
            y
        };
        let before = all_losses(&w, &l, &b);
        let after = all_losses(&shift(&w), &shift(&l), &b);
        for (x, y) in before.into_iter().zip(after) {
            prop_assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn losses_positive_and_decreasing_in_margin(w in bundle(), b in betas(), step in 0.01f64..3.0) {
        let mut up = w;
        up.pol_iw += step;
        for f in [attend_loss, reject_loss, viscon_loss, vco_loss] {
            let (x, y) = (f(&w, &b), f(&up, &b));
            prop_assert!(x > 0.0 && y > 0.0);
            prop_assert!(y < x || (x - y).abs() < 1e-300, "{x} -> {y}");
        }
    }

    #[test]
    fn taped_runs_are_bit_identical(data in prop::collection::vec(-3.0f64..3.0, 12)) {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![3, 4], data.clone()).unwrap());
            let t = tape.tanh(x);
            let s = tape.log_softmax(t, 1).unwrap();
            let loss = tape.sum(s);
            let g = tape.backward(loss).unwrap().wrt(x);
            (tape.value(loss).item().to_bits(), g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn generated_pairs_are_minimal(seed in any::<u64>(), index in 0u64..1000, ct in contrast(), shortcut in any::<bool>()) {
        let opts = GenOptions { shortcut, ..GenOptions::default() };
        let p = gen_pair(seed, index, ct, &opts);
        prop_assert!(p.validate().is_ok());
        let sw = Codebook::decode(&p.img_w).unwrap();
        let sl = Codebook::decode(&p.img_l).unwrap();
        prop_assert_eq!(sw.differing(&sl), vec![ct]);
        prop_assert_eq!(p, gen_pair(seed, index, ct, &opts));
    }

    #[test]
    fn filter_is_order_invariant(
        seed in any::<u64>(),
        cats in prop::collection::vec(contrast(), 1..80),
        perm_seed in any::<u64>(),
        tau_clip in 0.5f64..0.95,
        tau_dino in 0.15f64..0.85,
    ) {
        let labels: Vec<(String, ContrastType)> =
            cats.iter().enumerate().map(|(i, c)| (format!("r{i:04}"), *c)).collect();
        let records = store::synthetic_records(&labels, 8, 6, seed);
        let cfg = FilterConfig { tau_clip, tau_dino, seed, ..FilterConfig::default() };
        let a = run_filter(&records, &cfg).unwrap();

        let mut shuffled = records.clone();
        let mut s = perm_seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let b = run_filter(&shuffled, &cfg).unwrap();
        prop_assert_eq!(&a.kept, &b.kept);
        prop_assert_eq!(&a.report, &b.report);

        for k in a.kept.iter().filter(|k| k.reason == KeepReason::Passed) {
            let r = records.iter().find(|r| r.pair_id == k.pair_id).unwrap();
            prop_assert!(cosine(&r.clip_a, &r.clip_b).unwrap() > tau_clip);
            prop_assert!(cosine(&r.dino_a, &r.dino_b).unwrap() < tau_dino);
        }
    }

    #[test]
    fn store_roundtrip(seed in any::<u64>(), cats in prop::collection::vec(contrast(), 0..20), clip in 1usize..16, dino in 1usize..16) {
        let labels: Vec<(String, ContrastType)> =
            cats.iter().enumerate().map(|(i, c)| (format!("id-{i}"), *c)).collect();
        let records = store::synthetic_records(&labels, clip.max(2), dino.max(2), seed);
        let bytes = store::encode(&records).unwrap();
        prop_assert_eq!(store::decode(&bytes).unwrap(), records);
    }

    #[test]
    fn checkpoint_roundtrip(seed in any::<u64>(), width in 1usize..8, hidden in 1usize..3) {
        let dims = ModelDims { width, hidden_layers: hidden, ..ModelDims::default() };
        let p = ModelParams::init(dims, InitScale::default(), seed).unwrap();
        let bytes = checkpoint::encode(&p);
        prop_assert_eq!(checkpoint::decode(&bytes).unwrap(), p.clone());
        prop_assert_eq!(checkpoint::encode(&checkpoint::decode(&bytes).unwrap()), bytes);
    }

    #[test]
    fn augmentation_keeps_contrast(seed in any::<u64>(), n in 1usize..12) {
        let pairs: Vec<CaptionPair> = (0..n)
            .map(|i| {
                let ct = ContrastType::ALL[i % 4];
                let (caption_w, caption_l) = gen_pair(seed, i as u64, ct, &GenOptions::default()).captions();
                CaptionPair { pair_id: format!("p{i:03}"), caption_w, caption_l }
            })
            .collect();
        let (recs, report) = augment_all(&pairs, &TemplateRewriter, RetryPolicy::default()).unwrap();
        prop_assert_eq!(report.total, n);
        for r in &recs {
            prop_assert!(r.response_w != r.response_l);
            let (only_w, only_l) = contrast_tokens(&r.caption_w, &r.caption_l);
            let ww: HashSet<String> = words(&r.response_w).into_iter().collect();
            let wl: HashSet<String> = words(&r.response_l).into_iter().collect();
            prop_assert!(only_w.iter().all(|t| ww.contains(t)), "{r:?}");
            prop_assert!(only_l.iter().all(|t| wl.contains(t)), "{r:?}");
        }
    }

    #[test]
    fn perplexity_tracks_log_prob(seed in any::<u64>(), a in prop::collection::vec(1usize..64, 3), b in prop::collection::vec(1usize..64, 3)) {
        let dims = ModelDims { width: 8, ..ModelDims::default() };
        let p = ModelParams::init(dims, InitScale::default(), seed).unwrap();
        let cond = ImageCondition::NoImage;
        let (la, lb) = (log_prob(&p, &cond, &[], &a).unwrap().total, log_prob(&p, &cond, &[], &b).unwrap().total);
        let (pa, pb) = (perplexity(&p, &cond, &[], &a).unwrap(), perplexity(&p, &cond, &[], &b).unwrap());
        prop_assert!(pa >= 1.0 && pb >= 1.0);
        if la > lb { prop_assert!(pa < pb); }
        if la < lb { prop_assert!(pa > pb); }
    }

    #[test]
    fn improvement_identities(vals in prop::collection::vec(0.1f64..100.0, 1..8), lower in prop::collection::vec(any::<bool>(), 8), scale in 0.5f64..2.0) {
        let base: BTreeMap<String, f64> = vals.iter().enumerate().map(|(i, v)| (format!("m{i}"), *v)).collect();
        let lb: BTreeSet<String> = base.keys().zip(&lower).filter(|(_, l)| **l).map(|(k, _)| k.clone()).collect();
        prop_assert_eq!(avg_improvement(&base, &base, &lb).unwrap(), 0.0);
        // Uniform scaling: the sign flips when base and tuned are exchanged.
        let tuned: BTreeMap<String, f64> = base.iter().map(|(k, v)| (k.clone(), v * scale)).collect();
        let fwd = avg_improvement(&base, &tuned, &lb).unwrap();
        let back = avg_improvement(&tuned, &base, &lb).unwrap();
        prop_assert!(fwd * back <= 1e-20, "{fwd} {back}");
    }

    #[test]
    fn dependency_identities(x in 1e-6f64..1e6) {
        prop_assert_eq!(visual_dependency(x, x).unwrap(), 0.0);
        prop_assert_eq!(visual_dependency(x, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn histogram_ignores_order(
        raw in prop::collection::vec((1u8..6, 1u8..6, 1u8..6), 0..60),
        perm_seed in any::<u64>(),
    ) {
        let samples: Vec<ProbeSample> = raw
            .iter()
            .map(|&(a, b, c)| ProbeSample { ppl_match: a as f64, ppl_mismatch: b as f64, ppl_noimage: c as f64 })
            .collect();
        let mut shuffled = samples.clone();
        let mut s = perm_seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = ProbeReport::from_samples(samples);
        let b = ProbeReport::from_samples(shuffled);
        prop_assert_eq!(&a.histogram, &b.histogram);
        prop_assert_eq!(a.histogram.values().sum::<usize>(), a.n);
        prop_assert_eq!(a.frac_match_lt_mismatch.to_bits(), b.frac_match_lt_mismatch.to_bits());
    }

    #[test]
    fn log_prob_is_order_sensitive(seed in any::<u64>(), y in prop::collection::vec(1usize..64, 2..8)) {
        let rev: Vec<usize> = y.iter().rev().copied().collect();
        prop_assume!(rev != y);
        let p = ModelParams::init(ModelDims::default(), InitScale::default(), seed).unwrap();
        let cond = ImageCondition::NoImage;
        let a = log_prob(&p, &cond, &[], &y).unwrap().total;
        let b = log_prob(&p, &cond, &[], &rev).unwrap().total;
        prop_assert_ne!(a, b);
    }
}
