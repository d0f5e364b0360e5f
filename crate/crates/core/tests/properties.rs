use memvoice::corpus::{concat_self_pairs, concat_speaker_change, generate_corpus, CorpusConfig, Split};
use memvoice::ctc::{ctc_loss, ctc_loss_bruteforce, min_frames, posterior_sum};
use memvoice::eval::{edit_distance, EditCounts};
use memvoice::memory::{read_vector, read_weights, similarities, weights_from_similarities, ReadHeadConfig, Similarity, SpeakerMemory};
use memvoice::model::joint_loss;
use memvoice::nn::{recurrent_layer, softmax, Direction, GatedCell, Graph, ParamStore, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ctc_instance() -> impl Strategy<Value = (Tensor, Vec<usize>)> {
    (2usize..=4, 1usize..=3)
        .prop_flat_map(|(v, u)| (Just(v), vec(1..v, u)))
        .prop_flat_map(|(v, labels)| {
            let lo = min_frames(&labels);
            (Just(v), Just(labels), lo..=6usize.max(lo))
        })
        .prop_flat_map(|(v, labels, t)| (vec(-3.0f64..3.0, t * v), Just(labels), Just((t, v))))
        .prop_map(|(data, labels, (t, v))| (Tensor::from_vec(t, v, data).unwrap(), labels))
}

fn memory_and_query() -> impl Strategy<Value = (SpeakerMemory, Vec<f64>)> {
    (1usize..=6, 1usize..=5).prop_flat_map(|(d, n)| {
        (vec(vec(-2.0f64..2.0, d), n), vec(-2.0f64..2.0, d)).prop_map(move |(cols, q)| {
            let ids = (0..n).map(|i| format!("s{i}")).collect();
            (SpeakerMemory::new(ids, &cols).unwrap(), q)
        })
    })
}

fn similarity() -> impl Strategy<Value = Similarity> {
    prop_oneof![Just(Similarity::Cosine), Just(Similarity::ScaledDot)]
}

/// Every alignment of `a` against `b`, as (S, D, I) counts.
fn all_alignments(a: &[u8], b: &[u8], out: &mut Vec<EditCounts>, acc: EditCounts) {
    if a.is_empty() && b.is_empty() {
        out.push(acc);
        return;
    }
    if !a.is_empty() && !b.is_empty() {
        let mut next = acc;
        if a[0] != b[0] {
            next.substitutions += 1;
        }
        all_alignments(&a[1..], &b[1..], out, next);
    }
    if !a.is_empty() {
        let mut next = acc;
        next.deletions += 1;
        all_alignments(&a[1..], b, out, next);
    }
    if !b.is_empty() {
        let mut next = acc;
        next.insertions += 1;
        all_alignments(a, &b[1..], out, next);
    }
}

fn exhaustive_edit(a: &[u8], b: &[u8]) -> EditCounts {
    let mut all = Vec::new();
    all_alignments(a, b, &mut all, EditCounts::default());
    all.into_iter()
        .min_by_key(|c| (c.total(), std::cmp::Reverse(c.substitutions), std::cmp::Reverse(c.deletions)))
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_normalises_and_ignores_shifts(z in vec(-30.0f64..30.0, 1..8), c in -50.0f64..50.0) {
        let p = softmax(&z).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn recurrence_is_causal(seed in any::<u64>(), frames in 2usize..6, at in 0usize..6, delta in 0.1f64..2.0) {
        let at = at % frames;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cell = GatedCell::new(&mut store, "c", 2, 3, &mut rng);
        let base = Tensor::from_vec(frames, 2, (0..frames * 2).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut moved = base.clone();
        moved.set(at, 0, moved.get(at, 0) + delta);
        for dir in [Direction::Forward, Direction::Backward] {
            let run = |x: &Tensor| {
                let mut g = Graph::new();
                let bound = cell.bind(&mut g, &store);
                let xv = g.constant(x.clone());
                let out = recurrent_layer(&mut g, xv, &bound, dir).unwrap();
                g.value(out).clone()
            };
            let (a, b) = (run(&base), run(&moved));
            for t in 0..frames {
                let untouched = match dir {
                    Direction::Forward => t < at,
                    Direction::Backward => t > at,
                };
                if untouched {
                    let same = a.row(t).iter().zip(b.row(t)).all(|(x, y)| x.to_bits() == y.to_bits());
                    prop_assert!(same, "{dir:?} frame {t} changed after perturbing {at}");
                }
            }
        }
    }

    #[test]
    fn read_weights_are_a_distribution((memory, q) in memory_and_query(), sim in similarity(), gamma in 0.0f64..10.0) {
        let w = read_weights(&q, &memory, &ReadHeadConfig { similarity: sim, gamma }).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn read_vector_stays_in_the_hull((memory, q) in memory_and_query(), sim in similarity(), gamma in 0.0f64..10.0) {
        let w = read_weights(&q, &memory, &ReadHeadConfig { similarity: sim, gamma }).unwrap();
        let r = read_vector(&w, &memory).unwrap();
        for (d, rd) in r.iter().enumerate() {
            let vals: Vec<f64> = (0..memory.len()).map(|n| memory.column(n)[d]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo - 1e-12 <= *rd && *rd <= hi + 1e-12);
        }
    }

    #[test]
    fn weights_ignore_similarity_shifts(sims in vec(-5.0f64..5.0, 1..7), shift in -20.0f64..20.0, gamma in 0.0f64..5.0) {
        let a = weights_from_similarities(&sims, gamma).unwrap();
        let moved: Vec<f64> = sims.iter().map(|s| s + shift).collect();
        let b = weights_from_similarities(&moved, gamma).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_weights_ignore_query_scale((memory, q) in memory_and_query(), k in 0.01f64..100.0, gamma in 0.0f64..5.0) {
        prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
        let config = ReadHeadConfig { similarity: Similarity::Cosine, gamma };
        let a = read_weights(&q, &memory, &config).unwrap();
        let scaled: Vec<f64> = q.iter().map(|x| x * k).collect();
        let b = read_weights(&scaled, &memory, &config).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn raising_one_similarity_raises_its_weight(sims in vec(-3.0f64..3.0, 2..6), pick in 0usize..6, bump in 0.01f64..2.0, gamma in 0.1f64..5.0) {
        let i = pick % sims.len();
        let before = weights_from_similarities(&sims, gamma).unwrap();
        let mut raised = sims.clone();
        raised[i] += bump;
        let after = weights_from_similarities(&raised, gamma).unwrap();
        prop_assert!(after[i] > before[i]);
    }

    #[test]
    fn similarities_match_their_definitions((memory, q) in memory_and_query()) {
        let dot = similarities(&q, &memory, &ReadHeadConfig { similarity: Similarity::ScaledDot, gamma: 1.0 }).unwrap();
        for (n, s) in dot.iter().enumerate() {
            let m = memory.column(n);
            let expect = q.iter().zip(&m).map(|(a, b)| a * b).sum::<f64>() / (q.len() as f64).sqrt();
            prop_assert!((s - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn ctc_matches_brute_force((logits, labels) in ctc_instance()) {
        let fast = ctc_loss(&logits, &labels).unwrap().loss;
        let slow = ctc_loss_bruteforce(&logits, &labels).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-9, "{fast} vs {slow}");
    }

    #[test]
    fn ctc_posterior_sum_is_frame_invariant((logits, labels) in ctc_instance()) {
        let out = ctc_loss(&logits, &labels).unwrap();
        let first = posterior_sum(&out.lattice, 1).unwrap();
        for t in 1..=logits.rows() {
            let v = posterior_sum(&out.lattice, t).unwrap();
            prop_assert!(((v - first) / first).abs() <= 1e-10);
        }
    }

    #[test]
    fn ctc_gradient_rows_sum_to_zero((logits, labels) in ctc_instance()) {
        let out = ctc_loss(&logits, &labels).unwrap();
        for t in 0..out.grad.rows() {
            prop_assert!(out.grad.row(t).iter().sum::<f64>().abs() <= 1e-10);
        }
    }

    #[test]
    fn joint_loss_is_linear_in_lambda(ctc in 0.0f64..50.0, att in 0.0f64..50.0, lambda in 0.0f64..=1.0) {
        let j = joint_loss(ctc, att, lambda).unwrap();
        prop_assert!((j - (lambda * (ctc - att) + att)).abs() <= 1e-15 * (1.0 + ctc.max(att)) * 4.0);
    }

    #[test]
    fn edit_distance_matches_exhaustive_alignment(a in vec(0u8..3, 0..=6), b in vec(0u8..3, 0..=6)) {
        prop_assert_eq!(edit_distance(&a, &b), exhaustive_edit(&a, &b));
    }

    #[test]
    fn edit_distance_identity_and_symmetry(a in vec(0u8..4, 0..10), b in vec(0u8..4, 0..10)) {
        prop_assert_eq!(edit_distance(&a, &a), EditCounts::default());
        let ab = edit_distance(&a, &b);
        let ba = edit_distance(&b, &a);
        prop_assert_eq!(ab.total(), ba.total());
        prop_assert_eq!(ab.substitutions + ab.deletions + ab.insertions, ba.substitutions + ba.insertions + ba.deletions);
    }

    #[test]
    fn edit_distance_triangle(a in vec(0u8..4, 0..8), b in vec(0u8..4, 0..8), c in vec(0u8..4, 0..8)) {
        let ac = edit_distance(&a, &c).total();
        prop_assert!(ac <= edit_distance(&a, &b).total() + edit_distance(&b, &c).total());
    }
}

fn small_corpus_config() -> impl Strategy<Value = CorpusConfig> {
    (4usize..=8, 1usize..=3, any::<u64>())
        .prop_flat_map(|(speakers, utts, seed)| {
            let held = (2usize..speakers).prop_flat_map(|h| (1..h).prop_map(move |dev| (dev, h - dev)));
            (Just((speakers, utts, seed)), held)
        })
        .prop_map(|((speakers, utts, seed), (dev, test))| CorpusConfig {
            num_speakers: speakers,
            utts_per_speaker: utts,
            seed,
            dev_speakers: dev,
            test_speakers: test,
            max_labels: 4,
            ..CorpusConfig::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn splits_are_speaker_disjoint_and_generation_is_pure(config in small_corpus_config()) {
        let corpus = generate_corpus(&config).unwrap();
        let train = corpus.roster(Split::Train);
        for split in [Split::Dev, Split::Test] {
            for s in corpus.roster(split) {
                prop_assert!(!train.contains(&s));
            }
        }
        prop_assert!(corpus.roster(Split::Dev).iter().all(|s| !corpus.roster(Split::Test).contains(s)));
        prop_assert_eq!(generate_corpus(&config).unwrap(), corpus);
    }

    #[test]
    fn pairing_preserves_frames_and_labels(config in small_corpus_config(), seed in any::<u64>()) {
        let corpus = generate_corpus(&config).unwrap();
        let set = &corpus.test;
        let change = match concat_speaker_change(set, seed) {
            Ok(c) => c,
            // one test speaker cannot be paired with anyone
            Err(_) => return Ok(()),
        };
        let dropped = change.dropped.as_ref().and_then(|id| set.iter().find(|u| &u.id == id));
        let frames: usize = set.iter().map(|u| u.frames()).sum::<usize>() - dropped.map_or(0, |u| u.frames());
        let labels: usize = set.iter().map(|u| u.labels.len()).sum::<usize>() - dropped.map_or(0, |u| u.labels.len());
        prop_assert_eq!(change.utterances.iter().map(|u| u.frames()).sum::<usize>(), frames);
        prop_assert_eq!(change.utterances.iter().map(|u| u.labels.len()).sum::<usize>(), labels);
        for (u, (a, b)) in change.utterances.iter().zip(&change.pairs) {
            let sa = &set.iter().find(|x| &x.id == a).unwrap().speaker_id;
            let sb = &set.iter().find(|x| &x.id == b).unwrap().speaker_id;
            prop_assert_ne!(sa, sb);
            prop_assert_eq!(&u.speaker_id, &format!("{sa}+{sb}"));
        }
        let selfp = concat_self_pairs(set).unwrap();
        prop_assert_eq!(selfp.utterances.len(), set.len());
    }
}
