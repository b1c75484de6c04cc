//! Property tests over the spec-level invariants.

use consilium_core::aggregation::{cluster_answers, embed_answer, HashedBagEncoder};
use consilium_core::knowledge::{knn, Doc, DomainKB, MultimodalQuery};
use consilium_core::math::cosine;
use consilium_core::metacog::{js_divergence, perturb};
use consilium_core::policy::{FeatureVector, ToyPolicy};
use consilium_core::routing::gate;
use proptest::prelude::*;

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6..1.0f64, n).prop_map(|raw| {
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / total).collect()
    })
}

proptest! {
    #[test]
    fn gate_is_a_distribution_with_stable_argmax(
        scores in prop::collection::vec(-50.0..50.0f64, 1..8),
        tau in 0.1..10.0f64,
        shift in -100.0..100.0f64,
    ) {
        let dist = gate(&scores, tau).unwrap();
        let total: f64 = dist.probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(dist.probs.iter().all(|&p| p > 0.0));

        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        prop_assert_eq!(gate(&shifted, tau).unwrap().argmax(), dist.argmax());
        prop_assert_eq!(gate(&scores, 1.0).unwrap().argmax(), dist.argmax());
    }

    #[test]
    fn js_divergence_invariants(p in simplex(5), q in simplex(5)) {
        let a = js_divergence(&p, &q).unwrap();
        let b = js_divergence(&q, &p).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= 0.0);
        prop_assert!(a <= std::f64::consts::LN_2 + 1e-12);
        prop_assert!((js_divergence(&p, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn knn_equals_full_sort_oracle(
        vectors in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 4), 1..40),
        query in prop::collection::vec(-1.0..1.0f64, 4),
        k in 1usize..10,
    ) {
        prop_assume!(vectors.iter().all(|v| v.iter().any(|&x| x != 0.0)));
        prop_assume!(query.iter().any(|&x| x != 0.0));
        let docs: Vec<Doc> = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| Doc {
                doc_id: format!("d{i:03}"),
                text: String::new(),
                vector: FeatureVector::new(v.clone()).unwrap(),
            })
            .collect();
        let kb = DomainKB::new(0, 4, docs).unwrap();
        let q = MultimodalQuery {
            image: FeatureVector::zeros(1),
            question: FeatureVector::zeros(1),
            embedding: FeatureVector::new(query.clone()).unwrap(),
        };
        let got = knn(&kb, &q, k).unwrap();

        let mut oracle: Vec<(String, f64)> = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("d{i:03}"), cosine(&query, v)))
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        oracle.truncate(k.min(vectors.len()));
        prop_assert_eq!(got.hits.len(), oracle.len());
        for (hit, (id, sim)) in got.hits.iter().zip(&oracle) {
            prop_assert_eq!(&hit.doc_id, id);
            prop_assert_eq!(hit.similarity, *sim);
        }
    }

    #[test]
    fn perturbation_is_affine_and_bounded(
        (h, mu) in (1usize..6).prop_flat_map(|n| (
            prop::collection::vec(-3.0..3.0f64, n),
            prop::collection::vec(-3.0..3.0f64, n),
        )),
        eps in 0.0..1.0f64,
    ) {
        let hv = FeatureVector::new(h.clone()).unwrap();
        let mv = FeatureVector::new(mu.clone()).unwrap();
        let out = perturb(&hv, &mv, eps).unwrap();
        for ((o, a), b) in out.values().iter().zip(&h).zip(&mu) {
            prop_assert!((o - ((1.0 - eps) * a + eps * b)).abs() < 1e-12);
            prop_assert!(*o >= a.min(*b) - 1e-12 && *o <= a.max(*b) + 1e-12);
        }
    }

    #[test]
    fn clustering_partitions_the_input(
        texts in prop::collection::vec(0usize..6, 1..10),
        radius in 0.05..0.9f64,
    ) {
        let phrases = [
            "effusion present left", "normal clear scan", "nodule apex right",
            "fracture rib lateral", "consolidation lower lobe", "cardiomegaly borderline",
        ];
        let encoder = HashedBagEncoder::default();
        let embeddings: Vec<_> = texts
            .iter()
            .enumerate()
            .map(|(site, &t)| embed_answer(&encoder, phrases[t], site, 0.5).unwrap())
            .collect();
        let clusters = cluster_answers(&embeddings, radius, 2).unwrap();
        let mut seen: Vec<usize> = clusters.iter().flatten().copied().collect();
        seen.sort_unstable();
        let expected: Vec<usize> = (0..texts.len()).collect();
        prop_assert_eq!(seen, expected, "every site in exactly one cluster");
    }

    #[test]
    fn policy_log_probs_normalize(
        weights in prop::collection::vec(-2.0..2.0f64, 3),
        features in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 3), 2..5),
    ) {
        let candidates: Vec<String> = (0..features.len()).map(|i| format!("a{i}")).collect();
        let policy = ToyPolicy::new(weights, candidates).unwrap();
        let feats: Vec<FeatureVector> = features
            .into_iter()
            .map(|f| FeatureVector::new(f).unwrap())
            .collect();
        let total: f64 = policy.log_probs(&feats).unwrap().iter().map(|lp| lp.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}
