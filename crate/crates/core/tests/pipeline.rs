use memvoice::config::RunConfig;
use memvoice::corpus::{generate_corpus, load_corpus, save_corpus, CorpusConfig, MANIFEST_FILE};
use memvoice::eval::{evaluate, export_metrics, layer_sweep, read_metrics, speaker_change_eval, EvalModel, MetricsFormat};
use memvoice::memory::{load_memory, save_memory};
use memvoice::model::{AsrModel, Variant};
use memvoice::trainer::{multi_seed_select, AdaptationSource, Checkpoint, TrainerConfig};
use memvoice::Error;

fn tiny_run_config() -> RunConfig {
    let mut rc = RunConfig::default();
    rc.corpus = CorpusConfig {
        utts_per_speaker: 4,
        max_labels: 3,
        ..CorpusConfig::default()
    };
    rc.encoder.hidden_size = 6;
    rc.decoder.hidden_size = 6;
    rc.trainer = TrainerConfig {
        epochs: 2,
        seeds: vec![1, 2],
        ..TrainerConfig::default()
    };
    rc
}

#[test]
fn generate_save_train_checkpoint_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let rc = tiny_run_config();
    rc.validate().unwrap();
    let corpus = generate_corpus(&rc.corpus).unwrap();
    save_corpus(&corpus, &dir.path().join("corpus")).unwrap();
    assert!(dir.path().join("corpus").join(MANIFEST_FILE).exists());
    let corpus = load_corpus(&dir.path().join("corpus")).unwrap();
    let memory = corpus.build_memory().unwrap();
    save_memory(&memory, &dir.path().join("memory.txt")).unwrap();
    let memory = load_memory(&dir.path().join("memory.txt")).unwrap();
    assert_eq!(memory.len(), corpus.roster(memvoice::corpus::Split::Train).len());

    let mut trained = Vec::new();
    for variant in [Variant::Memory, Variant::ExternalSpeaker] {
        let config = rc.model_config(variant);
        let source = AdaptationSource::new(variant, &corpus, Some(memory.clone())).unwrap();
        let selection = multi_seed_select(|s| AsrModel::new(config.clone(), s), &corpus, &source, &rc.trainer).unwrap();
        assert_eq!(selection.runs.len(), 2);
        let best = selection.best_run();
        assert!(selection.runs.iter().all(|r| r.final_dev_ter() >= best.final_dev_ter()));

        let ckpt = Checkpoint::from_run(best, variant, &rc.trainer);
        let path = dir.path().join(format!("{variant}.json"));
        ckpt.save(&path).unwrap();
        let model = Checkpoint::load(&path).unwrap().to_model().unwrap();
        let a = evaluate(&best.model, &corpus.dev, &source, 1).unwrap();
        let b = evaluate(&model, &corpus.dev, &source, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ter(), best.final_dev_ter());
        trained.push((model, source, best.seed));
    }

    let models: Vec<EvalModel<'_>> = trained
        .iter()
        .map(|(model, source, seed)| EvalModel { model, source, seed: *seed })
        .collect();
    let report = speaker_change_eval(&models, &corpus.test, 3, false, 1).unwrap();
    assert_eq!(report.records.len(), 4);
    assert_eq!(report.deltas.len(), 2);
    for (variant, delta) in &report.deltas {
        let single = report.records.iter().find(|r| r.variant == *variant && r.split == "test").unwrap();
        let joined = report.records.iter().find(|r| r.variant == *variant && r.split == "test-change").unwrap();
        assert!((joined.ter - single.ter - delta).abs() < 1e-15);
    }
    let control = speaker_change_eval(&models, &corpus.test, 3, true, 1).unwrap();
    assert!(control.records.iter().all(|r| r.experiment == "self-pair"));

    let path = dir.path().join("metrics.jsonl");
    export_metrics(&report.records, &path, MetricsFormat::Jsonl).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 4);
    assert_eq!(read_metrics(&path, MetricsFormat::Jsonl).unwrap().len(), 4);
}

#[test]
fn speaker_change_needs_both_model_kinds() {
    let rc = tiny_run_config();
    let corpus = generate_corpus(&rc.corpus).unwrap();
    let memory = corpus.build_memory().unwrap();
    let model = AsrModel::new(rc.model_config(Variant::Memory), 1).unwrap();
    let source = AdaptationSource::new(Variant::Memory, &corpus, Some(memory)).unwrap();
    let only = [EvalModel {
        model: &model,
        source: &source,
        seed: 1,
    }];
    assert!(matches!(
        speaker_change_eval(&only, &corpus.test, 1, false, 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn sweep_baseline_rows_and_layer_bounds() {
    let mut rc = tiny_run_config();
    rc.trainer.epochs = 1;
    rc.trainer.seeds = vec![1];
    let corpus = generate_corpus(&rc.corpus).unwrap();
    let memory = corpus.build_memory().unwrap();
    let template = rc.model_config(Variant::Memory);
    let records = layer_sweep(&corpus, &memory, &[0, 3], &[Variant::Memory], &template, &rc.trainer, |_| Ok(())).unwrap();
    assert_eq!(records.len(), 6);
    let baseline: Vec<_> = records.iter().filter(|r| r.variant == Variant::None).collect();
    assert_eq!(baseline.len(), 2);
    assert!(baseline.iter().all(|r| r.layer.is_none()));

    let err = layer_sweep(&corpus, &memory, &[4], &[Variant::Memory], &template, &rc.trainer, |_| Ok(()));
    assert!(matches!(err, Err(Error::Config(_))));
    let err = layer_sweep(&corpus, &memory, &[1], &[Variant::None], &template, &rc.trainer, |_| Ok(()));
    assert!(matches!(err, Err(Error::Config(_))));
}
