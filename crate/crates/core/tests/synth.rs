use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use skillnet::config::ExperimentConfig;
use skillnet::data::Label;
use skillnet::synth::{
    generate_corpus, generate_task_dataset, oracle, pack_pair, pack_single, DatasetSizes,
    LanguageSpec, TaskGen, Vocabulary, CLS, NUM_FILLER, PAD, SEP,
};
use skillnet::TaskType;

fn gen<'a>(lang: &'a LanguageSpec, family: TaskType, classes: usize, seed: u64) -> TaskGen<'a> {
    TaskGen {
        task_id: "t",
        family,
        language: lang,
        num_classes: classes,
        sizes: DatasetSizes {
            train: 600,
            dev: 200,
        },
        seq_len: 24,
        seed,
    }
}

/// With one topic the filler words are i.i.d. draws from the Zipf profile.
#[test]
fn corpus_unigrams_pass_chi_square() {
    for (seed, exponent) in [(3u64, 1.1), (4, 0.8), (5, 1.4)] {
        let mut lang = LanguageSpec::new("en", 0, seed);
        lang.num_topics = 1;
        lang.zipf_exponent = exponent;
        let corpus = generate_corpus(&lang, 400, 9).unwrap();
        let mut counts = vec![0usize; NUM_FILLER];
        for id in corpus.documents.iter().flatten().flatten() {
            counts[id - lang.filler(0)] += 1;
        }
        let n: usize = counts.iter().sum();
        let expected = lang.unigram_profile();
        let stat: f64 = counts
            .iter()
            .zip(&expected)
            .map(|(&o, &p)| {
                let e = p * n as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        let p_value = 1.0 - ChiSquared::new((NUM_FILLER - 1) as f64).unwrap().cdf(stat);
        assert!(
            p_value > 0.01,
            "exponent {exponent}: χ² = {stat:.1}, p = {p_value:.4}"
        );
    }
}

#[test]
fn profile_is_a_distribution_and_topics_average_out() {
    let mut lang = LanguageSpec::new("de", 2, 1);
    for topics in [1, 2, 4, 8] {
        lang.num_topics = topics;
        let p = lang.unigram_profile();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x > 0.0));
    }
    lang.num_topics = NUM_FILLER;
    for x in lang.unigram_profile() {
        assert!((x - 1.0 / NUM_FILLER as f64).abs() < 1e-12);
    }
}

#[test]
fn generation_is_deterministic() {
    let cfg = ExperimentConfig::desk();
    let lang = &cfg.language_specs()[1];
    assert_eq!(
        generate_corpus(lang, 50, 4).unwrap(),
        generate_corpus(lang, 50, 4).unwrap()
    );
    assert_ne!(
        generate_corpus(lang, 50, 4).unwrap(),
        generate_corpus(lang, 50, 5).unwrap()
    );
    for (family, c) in [
        (TaskType::Classification, 3),
        (TaskType::PairClassification, 3),
        (TaskType::TokenClassification, 9),
        (TaskType::SpanExtraction, 24),
    ] {
        let a = generate_task_dataset(&gen(lang, family, c, 2)).unwrap();
        let b = generate_task_dataset(&gen(lang, family, c, 2)).unwrap();
        assert_eq!(a, b);
    }
    let task = &cfg.tasks[4];
    assert_eq!(
        cfg.generate(task, 4).unwrap(),
        cfg.generate(task, 4).unwrap()
    );
}

#[test]
fn every_token_stays_in_its_language_block() {
    let cfg = ExperimentConfig::desk();
    let vocab = cfg.vocabulary().unwrap();
    for lang in vocab.languages() {
        let corpus = generate_corpus(lang, 40, 1).unwrap();
        assert!(corpus
            .documents
            .iter()
            .flatten()
            .flatten()
            .all(|&id| lang.contains(id)));
        for (family, c) in [
            (TaskType::Classification, 15),
            (TaskType::PairClassification, 2),
            (TaskType::TokenClassification, 7),
            (TaskType::SpanExtraction, 24),
        ] {
            let ds = generate_task_dataset(&gen(lang, family, c, 1)).unwrap();
            for ex in ds.train.iter().chain(&ds.dev) {
                let real = &ex.token_ids[..ex.real_len()];
                assert!(real
                    .iter()
                    .all(|&id| id == CLS || id == SEP || lang.contains(id)));
                assert!(ex.token_ids[ex.real_len()..].iter().all(|&id| id == PAD));
            }
        }
    }
}

#[test]
fn class_labels_are_balanced() {
    let lang = LanguageSpec::new("en", 0, 3);
    for (family, c) in [
        (TaskType::Classification, 2),
        (TaskType::Classification, 15),
        (TaskType::PairClassification, 3),
    ] {
        let ds = generate_task_dataset(&gen(&lang, family, c, 8)).unwrap();
        let mut counts = vec![0usize; c];
        for ex in &ds.train {
            let Label::Class(k) = ex.label else {
                panic!("class label expected")
            };
            counts[k] += 1;
        }
        let uniform = ds.train.len() as f64 / c as f64;
        for n in counts {
            assert!(
                (n as f64 - uniform).abs() <= 0.05 * uniform,
                "{family}: {n} vs {uniform}"
            );
        }
    }
}

#[test]
fn train_and_dev_never_share_an_input() {
    let lang = LanguageSpec::new("zh", 1, 4);
    for (family, c) in [
        (TaskType::Classification, 2),
        (TaskType::PairClassification, 2),
        (TaskType::TokenClassification, 3),
        (TaskType::SpanExtraction, 24),
    ] {
        let ds = generate_task_dataset(&gen(&lang, family, c, 6)).unwrap();
        let train: HashSet<&Vec<usize>> = ds.train.iter().map(|e| &e.token_ids).collect();
        assert!(
            ds.dev.iter().all(|e| !train.contains(&e.token_ids)),
            "{family}"
        );
    }
}

#[test]
fn oracle_reads_labels_back() {
    let lang = LanguageSpec::new("es", 3, 5);
    for (family, c) in [
        (TaskType::Classification, 6),
        (TaskType::PairClassification, 3),
        (TaskType::TokenClassification, 9),
        (TaskType::SpanExtraction, 24),
    ] {
        let ds = generate_task_dataset(&gen(&lang, family, c, 3)).unwrap();
        for ex in &ds.dev {
            assert_eq!(
                oracle::decode(&lang, family, c, ex).as_ref(),
                Some(&ex.label)
            );
        }
    }
}

#[test]
fn text_round_trip_over_a_thousand_sentences() {
    let cfg = ExperimentConfig::desk();
    let vocab: Vocabulary = cfg.vocabulary().unwrap();
    let mut checked = 0;
    for lang in vocab.languages() {
        let corpus = generate_corpus(lang, 80, 2).unwrap();
        for sentence in corpus.documents.iter().flatten() {
            let text = vocab.detokenize(sentence).unwrap();
            assert_eq!(&vocab.tokenize(&text).unwrap(), sentence);
            checked += 1;
        }
    }
    assert!(checked >= 1000, "only {checked} sentences");
    let specials = [CLS, SEP, PAD, 3];
    assert_eq!(
        vocab
            .tokenize(&vocab.detokenize(&specials).unwrap())
            .unwrap(),
        specials
    );
    assert!(vocab.tokenize("en_128").is_err());
    assert!(vocab.tokenize("xx_1").is_err());
    assert!(vocab.detokenize(&[vocab.size()]).is_err());
}

proptest! {
    #[test]
    fn single_packing_keeps_a_prefix(len in 0usize..40, seq_len in 2usize..30) {
        let ids: Vec<usize> = (100..100 + len).collect();
        let p = pack_single(&ids, seq_len).unwrap();
        let keep = len.min(seq_len - 2);
        prop_assert_eq!(p.token_ids.len(), seq_len);
        prop_assert_eq!(p.token_ids[0], CLS);
        prop_assert_eq!(&p.token_ids[1..=keep], &ids[..keep]);
        prop_assert_eq!(p.token_ids[keep + 1], SEP);
        prop_assert_eq!(p.attention_mask.iter().filter(|&&m| m == 1).count(), keep + 2);
        prop_assert!(p.segment_ids.iter().all(|&s| s == 0));
    }

    #[test]
    fn pair_packing_trims_the_longer_side(la in 0usize..30, lb in 0usize..30, seq_len in 5usize..32, seed in 0u64..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<usize> = (0..la).map(|_| rng.gen_range(10..100)).collect();
        let b: Vec<usize> = (0..lb).map(|_| rng.gen_range(10..100)).collect();
        let p = pack_pair(&a, &b, seq_len).unwrap();
        prop_assert_eq!(p.token_ids.len(), seq_len);
        let real = p.attention_mask.iter().filter(|&&m| m == 1).count();
        let seps: Vec<usize> = (0..real).filter(|&i| p.token_ids[i] == SEP).collect();
        prop_assert_eq!(seps.len(), 2);
        let (ka, kb) = (seps[0] - 1, seps[1] - seps[0] - 1);
        prop_assert!(ka + kb + 3 <= seq_len);
        prop_assert_eq!(&p.token_ids[1..=ka], &a[..ka]);
        prop_assert_eq!(&p.token_ids[seps[0] + 1..seps[1]], &b[..kb]);
        if la + lb + 3 <= seq_len {
            prop_assert_eq!((ka, kb), (la, lb));
        } else {
            prop_assert_eq!(ka + kb + 3, seq_len);
            // Either the shorter side survives whole or both end up level.
            let short_intact = if la <= lb { ka == la } else { kb == lb };
            prop_assert!(short_intact || ka.abs_diff(kb) <= 1);
        }
        prop_assert!(p.segment_ids[..=seps[0]].iter().all(|&s| s == 0));
        prop_assert!(p.segment_ids[seps[0] + 1..=seps[1]].iter().all(|&s| s == 1));
    }
}
