use std::path::PathBuf;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use rev_core::corpus::Setting;
use rev_core::metrics::{
    corpus_rev, cvi, las, prepare_pairs, rq, vacuous_pairs, ProxyOutcome,
};
use rev_core::scorer::{train_on_contexts, FamilyConfig, FeatureMap, LabelScorer};
use rev_core::synth::{render_dataset, sample_synthetic, SyntheticBaselines, SyntheticConfig};

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

fn table() -> impl Strategy<Value = SyntheticConfig> {
    (1usize..4, 1usize..4, 2usize..4).prop_flat_map(|(b, r, y)| {
        prop::collection::vec(1u32..20, b * r * y).prop_map(move |w| {
            let total: u32 = w.iter().sum();
            SyntheticConfig::from_fn("random", (b, r, y), |i, j, k| {
                f64::from(w[(i * r + j) * y + k]) / f64::from(total)
            })
            .unwrap()
        })
    })
}

fn family() -> impl Strategy<Value = FamilyConfig> {
    let features = prop_oneof![
        Just(FeatureMap::TokenSet),
        Just(FeatureMap::Exact),
        Just(FeatureMap::ConditionOnly),
        (1u64..5).prop_map(|buckets| FeatureMap::Hashed { buckets }),
        Just(FeatureMap::Constant),
    ];
    prop_oneof![
        (features, 0.1f64..3.0).prop_map(|(features, alpha)| FamilyConfig::Tabular { features, alpha }),
        Just(FamilyConfig::BagOfFeaturesLinear(rev_core::scorer::LinearConfig {
            hash_bits: 10,
            epochs: 2,
            ..Default::default()
        })),
    ]
}

fn trained(cfg: &SyntheticConfig, fam: &FamilyConfig, seed: u64) -> impl LabelScorer {
    let triples = sample_synthetic(cfg, 200, seed).unwrap();
    let (set, pairs) = render_dataset(cfg, &triples, "t", Setting::Gold);
    let prepared = prepare_pairs(&set, &pairs, &SyntheticBaselines).unwrap();
    let samples: Vec<_> = prepared
        .iter()
        .flat_map(|p| [(p.context(true).unwrap(), p.label.clone()), (p.context(false).unwrap(), p.label.clone())])
        .collect();
    train_on_contexts(&samples, fam, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn cvi_equals_corpus_rev(cfg in table(), fam in family(), seed in 0u64..1000, n in 1usize..120) {
        let scorer = trained(&cfg, &fam, seed);
        let triples = sample_synthetic(&cfg, n, seed + 1).unwrap();
        let (set, pairs) = render_dataset(&cfg, &triples, "e", Setting::Gold);
        let (agg, _) = corpus_rev(&scorer, &set, &pairs, &SyntheticBaselines).unwrap();
        let prepared = prepare_pairs(&set, &pairs, &SyntheticBaselines).unwrap();
        let c = cvi(&scorer, &prepared).unwrap();
        prop_assert!((c - agg.value).abs() <= 1e-12, "cvi {} rev {}", c, agg.value);
    }

    #[test]
    fn corpus_rev_ignores_pair_order(cfg in table(), seed in 0u64..1000, n in 2usize..80) {
        let fam = FamilyConfig::Tabular { features: FeatureMap::Exact, alpha: 1.0 };
        let scorer = trained(&cfg, &fam, seed);
        let triples = sample_synthetic(&cfg, n, seed + 7).unwrap();
        let (set, mut pairs) = render_dataset(&cfg, &triples, "e", Setting::Gold);
        let (a, _) = corpus_rev(&scorer, &set, &pairs, &SyntheticBaselines).unwrap();
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (b, _) = corpus_rev(&scorer, &set, &pairs, &SyntheticBaselines).unwrap();
        prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn vacuous_pairs_score_exactly_zero(cfg in table(), seed in 0u64..1000) {
        let fam = FamilyConfig::Tabular { features: FeatureMap::TokenSet, alpha: 1.0 };
        let scorer = trained(&cfg, &fam, seed);
        let triples = sample_synthetic(&cfg, 40, seed + 3).unwrap();
        let (set, _) = render_dataset(&cfg, &triples, "e", Setting::Gold);
        let pairs = vacuous_pairs(&set, &SyntheticBaselines).unwrap();
        let (agg, recs) = corpus_rev(&scorer, &set, &pairs, &SyntheticBaselines).unwrap();
        prop_assert_eq!(agg.value, 0.0);
        prop_assert!(recs.iter().all(|r| r.rev == 0.0));
    }
}

#[derive(Deserialize)]
struct Case {
    records: Vec<ProxyOutcome>,
    value: f64,
    #[serde(default)]
    leaked: Option<f64>,
    #[serde(default)]
    nonleaked: Option<f64>,
    #[serde(default)]
    n_leaked: Option<usize>,
    #[serde(default)]
    n_nonleaked: Option<usize>,
}

#[derive(Deserialize)]
struct ProxyFixture {
    las: Case,
    rq: Case,
    las_zero: Case,
}

#[test]
fn las_and_rq_fixtures() {
    let f: ProxyFixture =
        serde_json::from_str(&std::fs::read_to_string(fixture("proxy/las_rq.json")).unwrap()).unwrap();
    assert_eq!(f.las.records.len(), 20);
    assert_eq!(f.rq.records.len(), 20);

    let l = las(&f.las.records).unwrap();
    assert_eq!(l.value, f.las.value);
    assert_eq!(l.value, 17.0 / 99.0);
    let bd = l.breakdown.unwrap();
    assert_eq!(bd["leaked"], f.las.leaked.unwrap());
    assert_eq!(bd["nonleaked"], f.las.nonleaked.unwrap());
    assert_eq!(bd["n_leaked"] as usize, f.las.n_leaked.unwrap());
    assert_eq!(bd["n_nonleaked"] as usize, f.las.n_nonleaked.unwrap());

    let r = rq(&f.rq.records).unwrap();
    assert_eq!(r.value, f.rq.value);
    assert_eq!(r.value, 1.0 / 20.0);

    assert_eq!(las(&f.las_zero.records).unwrap().value, f.las_zero.value);
    let unequal = &f.las.records;
    assert_ne!(las(unequal).unwrap().value, rq(unequal).unwrap().value);
}
