use autonli::corpus::WhitespaceCounter;
use autonli::dataset::pairs_to_triples;
use autonli::evaluator::{evaluate_sts, NamedSts};
use autonli::gateway::{BackendConfig, DefaultReply, DispatchPolicy, MockBackend};
use autonli::generation::{generate, GenerationPlan};
use autonli::promptkit::{ExtractionPolicy, TemplateSet};
use autonli::quality::{agreement_ratio, classify_dataset, OracleClassifier};
use autonli::synthetic::{echo_reply, BagOfWordsEmbedder, SyntheticWorld};
use autonli::trainer::train;
use autonli::{FewShotStrategy, PremiseSentence, ProjectionModel, TrainConfig};

#[test]
fn synthetic_world_end_to_end() {
    let world = SyntheticWorld::new(11);
    let premises: Vec<PremiseSentence> = world
        .premises(800, "train")
        .iter()
        .enumerate()
        .filter_map(|(i, t)| PremiseSentence::new(i as u64, t, &WhitespaceCounter))
        .collect();
    let pool = world.fewshot_pool(20);
    let backend = MockBackend::new(vec![]).with_default(DefaultReply::Generated(echo_reply()));
    let plan = GenerationPlan {
        strategy: FewShotStrategy::FIVE_SHOT_X4,
        seed: 1,
        extraction: ExtractionPolicy::Drop,
        timestamp: "1970-01-01T00:00:00Z".into(),
    };
    let out = generate(
        &premises,
        &pool,
        &TemplateSet::default(),
        &backend,
        &BackendConfig::default(),
        &plan,
    )
    .unwrap();
    assert_eq!(out.merged.len(), 1600);
    assert_eq!(out.stats.extraction_failures, 0);

    let verdicts = classify_dataset(&out.merged, &OracleClassifier::heuristic(), &DispatchPolicy::default());
    let agreement = agreement_ratio(&out.merged, &verdicts).unwrap();
    assert_eq!(agreement.entailment_ratio, Some(1.0));
    assert_eq!(agreement.contradiction_ratio, Some(1.0));

    let join = pairs_to_triples(&out.merged);
    assert_eq!(join.triples.len(), 800);
    assert_eq!(join.dropped, 0);

    let embedder = BagOfWordsEmbedder::new(32, 5);
    let dev = world.sts(300, "dev");
    let test = NamedSts {
        name: "toy".into(),
        examples: world.sts(300, "test"),
    };
    let config = TrainConfig {
        batch_size: 64,
        learning_rate: 0.05,
        max_epochs: 10,
        seed: 2,
        ..TrainConfig::default()
    };
    let outcome = train(&join.triples, &dev, &embedder, &config).unwrap();
    let before = evaluate_sts(&ProjectionModel::identity(32), &embedder, std::slice::from_ref(&test)).unwrap();
    let after = evaluate_sts(&outcome.best_model, &embedder, std::slice::from_ref(&test)).unwrap();
    let (before, after) = (before.average.unwrap(), after.average.unwrap());
    assert!(after > before + 0.3, "before {before:.4}, after {after:.4}");
}
