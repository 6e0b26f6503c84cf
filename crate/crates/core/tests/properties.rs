mod common;

use lex_core::evalkit::{evaluate_model, mask_counts, mask_metrics};
use lex_core::gradest::{pathwise_st_grad, rebar_grad, reinforce_grad, Quadratic};
use lex_core::imputers::{fit_imputer, ImputerSpec};
use lex_core::lexmodel::RunConfig;
use lex_core::maskdist::{self, MaskMode};
use lex_core::rng::seeded;
use lex_core::synthgen::{gen_replicate, gen_synthetic, parse_csv, to_csv, Dataset, Split, SynthName, X10Sign};
use proptest::prelude::*;

fn mask(d: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=1, d)
}

fn pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1usize..16).prop_flat_map(|d| (mask(d), mask(d)))
}

proptest! {
    #[test]
    fn count_identities((z, zs) in pair()) {
        let c = mask_counts(&z, &zs).unwrap();
        prop_assert_eq!(c.selected, c.true_pos + c.false_pos);
        prop_assert_eq!(c.relevant + c.irrelevant, z.len());
        prop_assert!(c.true_pos <= c.relevant && c.false_pos <= c.irrelevant);
        let (tpr, fpr, fdr) = mask_metrics(&z, &zs).unwrap();
        for v in [tpr, fpr, fdr] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn fdr_links_to_fpr((z, zs) in pair()) {
        let c = mask_counts(&z, &zs).unwrap();
        let (_, fpr, fdr) = mask_metrics(&z, &zs).unwrap();
        if c.selected > 0 && c.irrelevant > 0 {
            let want = fpr * c.irrelevant as f64 / c.selected as f64;
            prop_assert!((fdr - want).abs() < 1e-12);
        }
        if c.selected == 0 {
            prop_assert_eq!(fdr, 0.0);
        }
    }

    #[test]
    fn subset_masks_split_k((zs, seed, k) in (mask(11), any::<u64>(), 1usize..11)) {
        prop_assume!(zs.iter().any(|&v| v == 1));
        let mut rng = seeded(seed);
        let logits: Vec<f64> = (0..11).map(|_| rand::Rng::random_range(&mut rng, -3.0..3.0)).collect();
        let s = maskdist::subset_sample(&logits, k, 0.5, &mut rng).unwrap();
        prop_assert_eq!(s.hard.iter().filter(|&&v| v == 1).count(), k);
        let rel_sum: f64 = s.relaxed.iter().sum();
        prop_assert!(rel_sum <= k as f64 + 1e-9);
        prop_assert!(s.relaxed.iter().all(|v| (0.0..=1.0).contains(v)));
        let (tpr, _, fdr) = mask_metrics(&s.hard, &zs).unwrap();
        let relevant = zs.iter().filter(|&&v| v == 1).count() as f64;
        prop_assert!((tpr * relevant + fdr * k as f64 - k as f64).abs() < 1e-9);
    }

    #[test]
    fn length_mismatch_is_rejected(a in mask(4), b in mask(5)) {
        prop_assert!(mask_metrics(&a, &b).is_err());
    }

    #[test]
    fn estimators_stay_finite_when_saturated(
        seed in any::<u64>(),
        mags in prop::collection::vec(50.0f64..500.0, 6),
        signs in prop::collection::vec(any::<bool>(), 6),
        subset in any::<bool>(),
    ) {
        let logits: Vec<f64> = mags.iter().zip(&signs).map(|(m, s)| if *s { *m } else { -*m }).collect();
        let mode = if subset { MaskMode::Subset { k: 2 } } else { MaskMode::Bernoulli };
        let mut rng = seeded(seed);
        let obj = Quadratic::random(6, &mut rng);
        let samples: Vec<_> = (0..4).map(|_| maskdist::sample(mode, &logits, 0.5, &mut rng).unwrap()).collect();
        let grads = [
            reinforce_grad(&obj, mode, &logits, &samples, 0.3).unwrap(),
            pathwise_st_grad(&obj, mode, &logits, &samples, 0.5).unwrap(),
            rebar_grad(&obj, mode, &logits, &samples, 0.5, 1.0, 0.3, false).unwrap(),
            rebar_grad(&obj, mode, &logits, &samples, 0.5, 0.5, 0.3, true).unwrap(),
        ];
        for g in grads {
            prop_assert!(g.iter().all(|v| v.is_finite()), "{:?}", g);
        }
    }
}

fn small_train(seed: u64) -> Dataset {
    gen_replicate(SynthName::S3, 300, 10, seed, X10Sign::Negative).train
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn imputers_preserve_observed_values(seed in any::<u64>(), z in mask(11), which in 0usize..6) {
        let ds = small_train(seed % 1000);
        let specs = [
            ImputerSpec::Constant { c: -2.0 },
            ImputerSpec::GaussianStd,
            ImputerSpec::Marginal,
            ImputerSpec::Gmm { components: 2, dequantize: false },
            ImputerSpec::GmmDataset { components: 2, dequantize: false },
            ImputerSpec::KmeansDataset { components: 3 },
        ];
        let spec = &specs[which];
        let imp = if spec.needs_fit() {
            fit_imputer(spec, &ds.subset(Split::Train).x, &ds.subset(Split::Val).x, 11, seed).unwrap().0
        } else {
            spec.unfitted().unwrap()
        };
        let mut rng = seeded(seed);
        for i in 0..5 {
            let x = ds.row(i);
            let out = imp.impute(x, &z, &mut rng).unwrap();
            for j in 0..11 {
                prop_assert!(out[j].is_finite());
                if z[j] == 1 {
                    prop_assert_eq!(out[j].to_bits(), x[j].to_bits());
                }
            }
        }
    }

    #[test]
    fn csv_round_trip(seed in any::<u64>(), n in 1usize..30) {
        let ds = gen_synthetic(SynthName::S2, n, seed, Split::Test, X10Sign::Positive);
        let back = parse_csv(&to_csv(&ds), std::path::Path::new("mem.csv")).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn config_round_trip(preset in prop::sample::select(lex_core::lexmodel::config::PRESETS.to_vec()), seed in any::<u64>(), epochs in 1usize..500) {
        let mut cfg = RunConfig::preset(preset).unwrap();
        cfg.train.seed = seed;
        cfg.train.epochs = epochs;
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn evaluation_ignores_row_order(seed in any::<u64>(), rot in 1usize..40) {
        let test = gen_synthetic(SynthName::S3, 40, seed, Split::Test, X10Sign::Negative);
        let mut cfg = common::oracle_config();
        cfg.model.selector_hidden = vec![4];
        let mode = cfg.selection.mask_mode(11).unwrap();
        let model = lex_core::lexmodel::LexModel::<f32>::init(
            &cfg.model, 11, 2, mode, 0.5, lex_core::imputers::Imputer::GaussianStd, &mut seeded(seed),
        ).unwrap();
        let mut shuffled = Dataset::empty(test.name, test.seed, 11);
        for i in 0..40 {
            let j = (i + rot) % 40;
            shuffled.push(test.row(j), test.y[j], test.mask(j), test.split[j]);
        }
        let a = evaluate_model(&model, &test, 7, &mut seeded(5)).unwrap();
        let b = evaluate_model(&model, &shuffled, 7, &mut seeded(5)).unwrap();
        for (u, v) in [(a.tpr, b.tpr), (a.fpr, b.fpr), (a.fdr, b.fdr), (a.accuracy, b.accuracy), (a.accuracy_per_mask, b.accuracy_per_mask)] {
            prop_assert!((u - v).abs() < 1e-12, "{} vs {}", u, v);
        }
    }
}
