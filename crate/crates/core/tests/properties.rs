use ins_core::eval::roc_auc;
use ins_core::iwscl::{iwscl_loss, EmbeddingQueue};
use ins_core::nn::dot;
use ins_core::pplg::{LabelUpdate, PrototypeBank, PseudoLabelStore};
use proptest::prelude::*;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d)
        .prop_filter("non-degenerate", |v| dot(v, v) > 1e-6)
        .prop_map(unit)
}

fn naive_loss(anchor: &[f64], family: &[Vec<f64>], non_family: &[Vec<f64>], tau: f64) -> f64 {
    let denom: f64 = non_family.iter().map(|k| (dot(anchor, k) / tau).exp()).sum();
    -family
        .iter()
        .map(|k| ((dot(anchor, k) / tau).exp() / denom).ln())
        .sum::<f64>()
        / family.len() as f64
}

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let (mut p, mut n) = (0usize, 0usize);
    for (i, &li) in labels.iter().enumerate() {
        if li == 1 {
            p += 1;
        } else {
            n += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj == 0 {
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / (p as f64 * n as f64)
}

/// Scores drawn from a small set of values so ties are common, plus at least
/// one label of each class.
fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=200)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(prop_oneof![(0u8..8).prop_map(|k| k as f64 / 8.0), -5.0f64..5.0], n),
                prop::collection::vec(0u8..2, n),
            )
        })
        .prop_map(|(s, mut l)| {
            l[0] = 0;
            l[1] = 1;
            (s, l)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn stable_contrastive_matches_naive(
        d in 2usize..6,
        n_fam in 1usize..5,
        n_non in 1usize..5,
        tau in 0.05f64..2.0,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let anchor = draw();
        let family: Vec<Vec<f64>> = (0..n_fam).map(|_| draw()).collect();
        let non_family: Vec<Vec<f64>> = (0..n_non).map(|_| draw()).collect();
        let f: Vec<&[f64]> = family.iter().map(Vec::as_slice).collect();
        let nf: Vec<&[f64]> = non_family.iter().map(Vec::as_slice).collect();
        let got = iwscl_loss(&anchor, &f, &nf, tau, false).unwrap().unwrap().loss;
        let want = naive_loss(&anchor, &family, &non_family, tau);
        prop_assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }

    #[test]
    fn contrastive_is_permutation_invariant(
        pool in prop::collection::vec(unit_vec(3), 2..10),
        anchor in unit_vec(3),
        split in 1usize..9,
        rot in 0usize..10,
    ) {
        let split = split.min(pool.len() - 1);
        let (fam, non) = pool.split_at(split);
        let f: Vec<&[f64]> = fam.iter().map(Vec::as_slice).collect();
        let nf: Vec<&[f64]> = non.iter().map(Vec::as_slice).collect();
        let mut f2 = f.clone();
        let mut nf2 = nf.clone();
        let r = rot % f2.len();
        f2.rotate_left(r);
        nf2.reverse();
        let a = iwscl_loss(&anchor, &f, &nf, 0.2, false).unwrap().unwrap().loss;
        let b = iwscl_loss(&anchor, &f2, &nf2, 0.2, false).unwrap().unwrap().loss;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn extra_non_family_member_raises_loss(
        fam in prop::collection::vec(unit_vec(3), 1..5),
        non in prop::collection::vec(unit_vec(3), 1..5),
        anchor in unit_vec(3),
    ) {
        let f: Vec<&[f64]> = fam.iter().map(Vec::as_slice).collect();
        let nf: Vec<&[f64]> = non.iter().map(Vec::as_slice).collect();
        let mut more = nf.clone();
        more.push(nf[0]);
        let a = iwscl_loss(&anchor, &f, &nf, 0.5, false).unwrap().unwrap().loss;
        let b = iwscl_loss(&anchor, &f, &more, 0.5, false).unwrap().unwrap().loss;
        prop_assert!(b > a);
    }

    #[test]
    fn auc_matches_concordant_pairs((scores, labels) in scored_labels()) {
        let got = roc_auc(&scores, &labels).unwrap().auc;
        prop_assert_eq!(got, brute_auc(&scores, &labels));
    }

    #[test]
    fn auc_flips_with_labels((scores, labels) in scored_labels()) {
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let a = roc_auc(&scores, &labels).unwrap().auc;
        let b = roc_auc(&scores, &flipped).unwrap().auc;
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_transforms((scores, labels) in scored_labels()) {
        let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
        let a = roc_auc(&scores, &labels).unwrap().auc;
        let b = roc_auc(&squashed, &labels).unwrap().auc;
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn queue_never_exceeds_capacity_and_keeps_newest(
        cap in 1usize..20,
        pushes in prop::collection::vec((unit_vec(3), 0u8..2, any::<bool>()), 0..60),
    ) {
        let mut q = EmbeddingQueue::new(cap, 3).unwrap();
        for (k, l, neg) in &pushes {
            q.enqueue(k, *l, *neg).unwrap();
            prop_assert!(q.len() <= cap);
        }
        prop_assert_eq!(q.len(), pushes.len().min(cap));
        let tail = &pushes[pushes.len() - q.len()..];
        for (e, (k, _, _)) in q.iter().zip(tail) {
            prop_assert_eq!(e.embedding, k.as_slice());
        }
    }

    #[test]
    fn negative_bag_keys_are_stored_as_label_zero(
        pushes in prop::collection::vec((unit_vec(4), 0u8..2, any::<bool>()), 1..40),
    ) {
        let mut q = EmbeddingQueue::new(64, 4).unwrap();
        for (k, l, neg) in &pushes {
            q.enqueue(k, *l, *neg).unwrap();
        }
        for (e, (_, l, neg)) in q.iter().zip(&pushes) {
            prop_assert_eq!(e.is_true_negative, *neg);
            prop_assert_eq!(e.label, if *neg { 0 } else { *l });
        }
    }

    #[test]
    fn prototypes_stay_unit_norm(
        beta in 0.0f64..0.999,
        updates in prop::collection::vec((unit_vec(5), 0u8..2, any::<bool>()), 1..40),
    ) {
        let mut bank = PrototypeBank::new(5, beta).unwrap();
        for (q, c, neg) in &updates {
            bank.update(q, *c, *neg).unwrap();
            for r in 0..2 {
                if bank.is_initialized(r) {
                    let mu = bank.prototype(r);
                    prop_assert!((dot(mu, mu).sqrt() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pseudo_labels_stay_on_simplex(
        alpha in 0.0f64..=1.0,
        mu0 in unit_vec(4),
        mu1 in unit_vec(4),
        qs in prop::collection::vec(unit_vec(4), 1..40),
    ) {
        let mut bank = PrototypeBank::new(4, 0.9).unwrap();
        bank.set_prototype(0, &mu0).unwrap();
        bank.set_prototype(1, &mu1).unwrap();
        let mut store = PseudoLabelStore::new(&[1], alpha).unwrap();
        for q in &qs {
            store.generate_pseudo_label(0, q, &bank).unwrap();
            let s = store.get(0);
            prop_assert!(s[0] >= 0.0 && s[1] >= 0.0);
            prop_assert!((s[0] + s[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_labels_converge_geometrically(
        alpha in 0.0f64..1.0,
        s1 in 0.0f64..=1.0,
        q in unit_vec(4),
        steps in 1usize..30,
    ) {
        // q is its own positive prototype and the negative one points away.
        let mut bank = PrototypeBank::new(4, 0.9).unwrap();
        bank.set_prototype(1, &q).unwrap();
        bank.set_prototype(0, &q.iter().map(|x| -x).collect::<Vec<_>>()).unwrap();
        let mut store = PseudoLabelStore::new(&[1], alpha).unwrap();
        store.set(0, [1.0 - s1, s1]).unwrap();
        let mut gap = 1.0 - s1;
        for _ in 0..steps {
            prop_assert_eq!(store.generate_pseudo_label(0, &q, &bank).unwrap(), LabelUpdate::Updated(store.get(0)));
            let next = 1.0 - store.get(0)[1];
            prop_assert!((next - alpha * gap).abs() <= 1e-9);
            gap = next;
        }
    }
}
