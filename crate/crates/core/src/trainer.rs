//! Joint-objective training, multi-seed selection and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split, Utterance, UtteranceEmbedder};
use crate::encoder::AdaptInput;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::memory::{SpeakerMemory, Similarity};
use crate::model::{check_lambda, AsrModel, ModelConfig, Variant};
use crate::nn::{check_gradient, GradCheckReport, NamedTensor, ParamStore, Tensor, DEFAULT_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    DevCer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub grad_clip: f64,
    pub optimizer: Optimizer,
    pub selection_metric: SelectionMetric,
    /// Beam width used when scoring dev utterances.
    pub beam: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lambda: 0.2,
            learning_rate: 0.003,
            epochs: 40,
            batch_size: 8,
            seeds: vec![1, 2, 3, 4],
            grad_clip: 5.0,
            optimizer: Optimizer::Adam,
            selection_metric: SelectionMetric::DevCer,
            beam: 1,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("grad_clip must be positive, got {}", self.grad_clip)));
        }
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        Ok(())
    }
}

/// Speaker signal for each utterance, fixed by the model variant.
#[derive(Clone, Debug)]
pub struct AdaptationSource {
    variant: Variant,
    memory: Option<SpeakerMemory>,
    speakers: BTreeMap<String, Vec<f64>>,
    embedder: UtteranceEmbedder,
    per_utterance: bool,
}

impl AdaptationSource {
    /// `memory` is required for the memory variant and ignored otherwise.
    pub fn new(variant: Variant, corpus: &Corpus, memory: Option<SpeakerMemory>) -> Result<Self> {
        let memory = match variant {
            Variant::Memory => Some(memory.ok_or_else(|| Error::Config("memory variant needs a speaker memory".into()))?),
            _ => None,
        };
        let speakers = match variant {
            Variant::ExternalSpeaker => corpus.speaker_embeddings()?,
            _ => BTreeMap::new(),
        };
        Ok(AdaptationSource {
            variant,
            memory,
            speakers,
            embedder: corpus.embedder.clone(),
            per_utterance: variant == Variant::ExternalUtterance,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn memory(&self) -> Option<&SpeakerMemory> {
        self.memory.as_ref()
    }

    /// Same source, but fixed embeddings are recomputed from each utterance's
    /// own features. Used for concatenated evaluation utterances.
    pub fn from_utterance_features(&self) -> Self {
        AdaptationSource {
            per_utterance: matches!(self.variant, Variant::ExternalSpeaker | Variant::ExternalUtterance),
            ..self.clone()
        }
    }

    fn embedding(&self, utt: &Utterance) -> Result<Vec<f64>> {
        if self.per_utterance {
            return self.embedder.embed(&utt.features);
        }
        self.speakers
            .get(&utt.speaker_id)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("no embedding for speaker {}", utt.speaker_id)))
    }

    /// Runs `f` with the speaker input for `utt`.
    pub fn with_input<T>(&self, utt: &Utterance, f: impl FnOnce(AdaptInput<'_>) -> Result<T>) -> Result<T> {
        match self.variant {
            Variant::None => f(AdaptInput::None),
            Variant::Memory => f(AdaptInput::Memory(self.memory.as_ref().expect("checked at construction"))),
            Variant::ExternalSpeaker | Variant::ExternalUtterance => {
                let e = self.embedding(utt)?;
                f(AdaptInput::External(&e))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_ter: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn final_dev_ter(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.dev_ter)
    }
}

/// Position of the batch-order generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: History,
    pub rng: RngState,
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl AdamState {
    fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn apply(&mut self, store: &mut ParamStore, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data().to_vec();
            for (i, (w, g)) in p.tensor.data_mut().iter_mut().zip(grad).enumerate() {
                m[i] = B1 * m[i] + (1.0 - B1) * g;
                v[i] = B2 * v[i] + (1.0 - B2) * g * g;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
        }
    }
}

fn sgd_step(store: &mut ParamStore, lr: f64) {
    for p in store.iter_mut() {
        let grad = p.grad.data().to_vec();
        for (w, g) in p.tensor.data_mut().iter_mut().zip(grad) {
            *w -= lr * g;
        }
    }
}

/// Fixed-size batches over the length-sorted training set.
pub fn make_batches(utts: &[Utterance], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by(|&a, &b| utts[a].frames().cmp(&utts[b].frames()).then_with(|| utts[a].id.cmp(&utts[b].id)));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn batch_failure(epoch: usize, batch: usize, ids: &[usize], utts: &[Utterance], message: String) -> Error {
    Error::Divergence {
        epoch,
        batch,
        utterances: ids.iter().map(|&i| utts[i].id.clone()).collect(),
        message,
    }
}

/// Trains `model` in place. Deterministic given `seed`.
pub fn train(
    model: &mut AsrModel,
    corpus: &Corpus,
    source: &AdaptationSource,
    config: &TrainerConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.train.is_empty() || corpus.dev.is_empty() {
        return Err(Error::Invalid("training needs non-empty train and dev splits".into()));
    }
    let utts = &corpus.train;
    let batches = make_batches(utts, config.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = (config.optimizer == Optimizer::Adam).then(|| AdamState::new(model.params()));
    let mut history = History::default();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &b in &order {
            let ids = &batches[b];
            model.params_mut().zero_grad();
            let scale = 1.0 / ids.len() as f64;
            for &i in ids {
                let utt = &utts[i];
                let parts = source
                    .with_input(utt, |input| {
                        model.accumulate_gradients(&utt.features, &utt.labels, input, config.lambda, scale)
                    })
                    .map_err(|e| match e {
                        Error::NonFinite(_) => batch_failure(epoch, b, ids, utts, e.to_string()),
                        other => other,
                    })?;
                if !parts.joint.is_finite() {
                    return Err(batch_failure(epoch, b, ids, utts, format!("loss is {}", parts.joint)));
                }
                total += parts.joint;
            }
            let norm = model.params().grad_norm();
            if !norm.is_finite() {
                return Err(batch_failure(epoch, b, ids, utts, format!("gradient norm is {norm}")));
            }
            if norm > config.grad_clip {
                model.params_mut().scale_grads(config.grad_clip / norm);
            }
            match &mut adam {
                Some(state) => state.apply(model.params_mut(), config.learning_rate),
                None => sgd_step(model.params_mut(), config.learning_rate),
            }
        }
        let dev = evaluate(model, &corpus.dev, source, config.beam)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / utts.len() as f64,
            dev_ter: dev.ter(),
        });
    }
    Ok(TrainOutcome {
        history,
        rng: RngState::capture(seed, &rng),
    })
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub seed: u64,
    pub model: AsrModel,
    pub outcome: TrainOutcome,
}

impl TrainedRun {
    pub fn final_dev_ter(&self) -> f64 {
        self.outcome.history.final_dev_ter().unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Debug)]
pub struct Selection {
    /// One run per seed, in configuration order.
    pub runs: Vec<TrainedRun>,
    pub best: usize,
}

impl Selection {
    pub fn best_run(&self) -> &TrainedRun {
        &self.runs[self.best]
    }

    pub fn into_best(mut self) -> TrainedRun {
        self.runs.swap_remove(self.best)
    }
}

/// Worker count: `MEMVOICE_THREADS` if set, else available parallelism.
pub fn worker_count() -> usize {
    std::env::var("MEMVOICE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Index of the lowest final dev error; ties go to the lowest seed.
pub fn select_best(runs: &[(u64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(seed, ter)) in runs.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (bs, bt) = runs[b];
                if ter < bt || (ter == bt && seed < bs) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Trains one model per seed (concurrently, up to [`worker_count`]) and
/// keeps the one with the lowest final dev error.
pub fn multi_seed_select<F>(factory: F, corpus: &Corpus, source: &AdaptationSource, config: &TrainerConfig) -> Result<Selection>
where
    F: Fn(u64) -> Result<AsrModel> + Sync,
{
    config.validate()?;
    let seeds = &config.seeds;
    let workers = worker_count().min(seeds.len()).max(1);
    let mut results: Vec<Option<Result<TrainedRun>>> = (0..seeds.len()).map(|_| None).collect();
    let run_one = |seed: u64| -> Result<TrainedRun> {
        let mut model = factory(seed)?;
        let outcome = train(&mut model, corpus, source, config, seed)?;
        Ok(TrainedRun { seed, model, outcome })
    };
    for chunk in (0..seeds.len()).collect::<Vec<_>>().chunks(workers) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| (i, scope.spawn(move || run_one(seeds[i]))))
                .collect();
            for (i, h) in handles {
                results[i] = Some(h.join().unwrap_or_else(|_| Err(Error::Invalid("training thread panicked".into()))));
            }
        });
    }
    let runs = results
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<(u64, f64)> = runs.iter().map(|r| (r.seed, r.final_dev_ter())).collect();
    let best = select_best(&scores).expect("at least one seed");
    Ok(Selection { runs, best })
}

// ---------------------------------------------------------------------------

const CHECKPOINT_FORMAT: &str = "memvoice-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub seed: u64,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub history: History,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_run(run: &TrainedRun, variant: Variant, trainer: &TrainerConfig) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            variant,
            seed: run.seed,
            model: run.model.config().clone(),
            trainer: trainer.clone(),
            epoch: run.outcome.history.epochs.len(),
            rng: run.outcome.rng,
            history: run.outcome.history.clone(),
            params: run.model.params().to_named(),
        }
    }

    /// Rebuilds the model with the stored weights.
    pub fn to_model(&self) -> Result<AsrModel> {
        let mut model = AsrModel::new(self.model.clone(), self.seed)?;
        model.params_mut().load_named(&self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Invalid(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub similarity: Similarity,
    pub seed: u64,
    pub eps: f64,
    /// Parameter whose analytic gradient is negated before comparison.
    pub flip_sign_of: Option<String>,
}

impl GradCheckOptions {
    pub fn new(similarity: Similarity, seed: u64) -> Self {
        GradCheckOptions {
            similarity,
            seed,
            eps: DEFAULT_EPS,
            flip_sign_of: None,
        }
    }
}

/// Smallest adapted model: 2 frames, 3-dim speaker vectors, 2 memory slots,
/// 2 encoder layers with the read after the first.
pub fn gradcheck_model_config(similarity: Similarity) -> ModelConfig {
    use crate::decoder::DecoderConfig;
    use crate::encoder::{Adaptation, EncoderConfig};
    use crate::memory::ReadHeadConfig;
    ModelConfig {
        encoder: EncoderConfig {
            num_layers: 2,
            insertion_layer: 1,
            hidden_size: 3,
            post_concat_size: None,
            feature_dim: 3,
            embedding_dim: 3,
            adaptation: Adaptation::Memory,
        },
        read_head: ReadHeadConfig { similarity, gamma: 1.5 },
        decoder: DecoderConfig {
            hidden_size: 3,
            embed_size: 2,
            attention_dim: 3,
            location_channels: 2,
            location_width: 3,
        },
        vocab_size: 5,
    }
}

/// Central-difference check of the joint loss over every parameter of the
/// minimal adapted model.
pub fn gradcheck_report(options: &GradCheckOptions) -> Result<GradCheckReport> {
    use rand_distr::{Distribution, Normal};
    let config = gradcheck_model_config(options.similarity);
    let mut model = AsrModel::new(config, options.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x5eed);
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let mut sample = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
    let features = Tensor::from_vec(2, 3, sample(6))?;
    let memory = SpeakerMemory::new(vec!["a".into(), "b".into()], &[sample(3), sample(3)])?;
    let labels = [3usize, 4];
    let flip = match &options.flip_sign_of {
        Some(name) => Some(
            model
                .params()
                .find(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?,
        ),
        None => None,
    };
    let mut store = std::mem::take(model.params_mut());
    check_gradient(&mut store, options.eps, |store| {
        std::mem::swap(model.params_mut(), store);
        let result = model.accumulate_gradients(&features, &labels, AdaptInput::Memory(&memory), 0.5, 1.0);
        std::mem::swap(model.params_mut(), store);
        if let Some(id) = flip {
            for g in store.get_mut(id).grad.data_mut() {
                *g = -*g;
            }
        }
        Ok(result?.joint)
    })
}

/// Dev error after reloading a run's weights, for checkpoint checks.
pub fn dev_error(model: &AsrModel, corpus: &Corpus, source: &AdaptationSource, beam: usize) -> Result<EvalResult> {
    evaluate(model, corpus.split(Split::Dev), source, beam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::decoder::DecoderConfig;
    use crate::encoder::{Adaptation, EncoderConfig};
    use crate::memory::ReadHeadConfig;

    fn tiny_corpus() -> Corpus {
        generate_corpus(&CorpusConfig {
            num_speakers: 4,
            utts_per_speaker: 3,
            dev_speakers: 1,
            test_speakers: 1,
            max_labels: 3,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    fn tiny_model(corpus: &Corpus, adaptation: Adaptation, seed: u64) -> AsrModel {
        AsrModel::new(
            ModelConfig {
                encoder: EncoderConfig {
                    num_layers: 2,
                    insertion_layer: 1,
                    hidden_size: 6,
                    post_concat_size: None,
                    feature_dim: corpus.config.feature_dim,
                    embedding_dim: corpus.config.embedding_dim,
                    adaptation,
                },
                read_head: ReadHeadConfig::default(),
                decoder: DecoderConfig {
                    hidden_size: 6,
                    embed_size: 4,
                    attention_dim: 6,
                    ..DecoderConfig::default()
                },
                vocab_size: corpus.vocab.size(),
            },
            seed,
        )
        .unwrap()
    }

    fn quick(epochs: usize) -> TrainerConfig {
        TrainerConfig {
            epochs,
            batch_size: 2,
            seeds: vec![1],
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let corpus = tiny_corpus();
        let source = AdaptationSource::new(Variant::None, &corpus, None).unwrap();
        let mut model = tiny_model(&corpus, Adaptation::None, 3);
        let before = model.params().to_named();
        let cfg = TrainerConfig {
            learning_rate: 0.0,
            ..quick(2)
        };
        train(&mut model, &corpus, &source, &cfg, 3).unwrap();
        assert_eq!(model.params().to_named(), before);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = tiny_corpus();
        let memory = corpus.build_memory().unwrap();
        let source = AdaptationSource::new(Variant::Memory, &corpus, Some(memory)).unwrap();
        let run = || {
            let mut model = tiny_model(&corpus, Adaptation::Memory, 5);
            let out = train(&mut model, &corpus, &source, &quick(2), 5).unwrap();
            (model.params().to_named(), out)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batches_cover_every_utterance_once() {
        let corpus = tiny_corpus();
        let batches = make_batches(&corpus.train, 4);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..corpus.train.len()).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() <= 4));
    }

    #[test]
    fn single_utterance_overfit() {
        let mut corpus = tiny_corpus();
        corpus.train.truncate(1);
        let source = AdaptationSource::new(Variant::None, &corpus, None).unwrap();
        let mut model = tiny_model(&corpus, Adaptation::None, 7);
        let cfg = TrainerConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 0.02,
            ..quick(300)
        };
        let utt = corpus.train[0].clone();
        corpus.dev = vec![utt.clone()];
        train(&mut model, &corpus, &source, &cfg, 7).unwrap();
        let loss = model.loss(&utt.features, &utt.labels, AdaptInput::None, cfg.lambda).unwrap();
        assert!(loss.joint < 0.1, "joint loss {}", loss.joint);
    }

    #[test]
    fn selection_prefers_lowest_error_then_lowest_seed() {
        assert_eq!(select_best(&[(5, 0.3)]), Some(0));
        assert_eq!(select_best(&[(4, 0.3), (2, 0.1), (1, 0.2)]), Some(1));
        assert_eq!(select_best(&[(4, 0.1), (2, 0.1), (3, 0.1)]), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn divergence_is_reported_with_batch() {
        let corpus = tiny_corpus();
        let source = AdaptationSource::new(Variant::None, &corpus, None).unwrap();
        let cfg = TrainerConfig {
            seeds: vec![1, 2],
            ..quick(1)
        };
        let err = multi_seed_select(
            |seed| {
                let mut model = tiny_model(&corpus, Adaptation::None, seed);
                if seed == 2 {
                    let id = model.params().find("ctc.w").unwrap();
                    model.params_mut().get_mut(id).tensor.data_mut()[0] = f64::NAN;
                }
                Ok(model)
            },
            &corpus,
            &source,
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1, .. }), "{err}");
    }

    #[test]
    fn memory_variant_needs_memory() {
        let corpus = tiny_corpus();
        assert!(AdaptationSource::new(Variant::Memory, &corpus, None).is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let corpus = tiny_corpus();
        let source = AdaptationSource::new(Variant::ExternalSpeaker, &corpus, None).unwrap();
        let cfg = quick(1);
        let sel = multi_seed_select(|s| Ok(tiny_model(&corpus, Adaptation::External, s)), &corpus, &source, &cfg).unwrap();
        let run = sel.best_run();
        let ckpt = Checkpoint::from_run(run, Variant::ExternalSpeaker, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let model = back.to_model().unwrap();
        let utt = &corpus.dev[0];
        let a = source
            .with_input(utt, |i| run.model.encode(&utt.features, i))
            .unwrap();
        let b = source.with_input(utt, |i| model.encode(&utt.features, i)).unwrap();
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(
            dev_error(&model, &corpus, &source, 1).unwrap().ter(),
            run.final_dev_ter()
        );
    }

    #[test]
    fn gradcheck_passes_and_catches_sign_flip() {
        for sim in [Similarity::Cosine, Similarity::ScaledDot] {
            let report = gradcheck_report(&GradCheckOptions::new(sim, 11)).unwrap();
            assert!(report.max_relative_error() <= 1e-4, "{sim:?}: {:?}", report.params);
        }
        let mut opts = GradCheckOptions::new(Similarity::ScaledDot, 11);
        opts.flip_sign_of = Some("adapt.read.query.w".into());
        assert!(gradcheck_report(&opts).unwrap().max_relative_error() > 1e-4);
    }
}
