//! Synthetic speaker-conditioned corpus.
//!
//! Each vocabulary symbol has a prototype feature vector. An utterance is a
//! random label sequence whose frames repeat each prototype
//! `frames_per_label` times; the speaker's transform `scale * x + bias` and
//! Gaussian noise are applied per frame. Speaker transforms are driven by a
//! low-dimensional latent factor, so speakers vary along a few shared
//! directions. Speaker and utterance embeddings are projected feature
//! statistics; the speaker memory holds one embedding per training speaker.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{format_float, SpeakerMemory};
use crate::nn::Tensor;
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Where dev and test speakers are placed in the speaker latent space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeldOutSpeakers {
    /// Drawn from the same box as training speakers.
    Independent,
    /// Speakers evenly spaced in angle on a ring of the first two latent
    /// factors; held-out speakers sit between training speakers.
    Interleaved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    /// Number of label symbols, excluding blank, end-of-sentence and unknown.
    pub vocab_size: usize,
    pub frames_per_label: usize,
    pub noise_std: f64,
    /// Standard deviation of the symbol prototype entries.
    pub prototype_scale: f64,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    pub dev_speakers: usize,
    pub test_speakers: usize,
    /// Dimension of the latent factor behind speaker transforms.
    pub speaker_factors: usize,
    pub held_out: HeldOutSpeakers,
    /// Ring radius of held-out speakers relative to training speakers.
    pub held_out_radius: f64,
    /// Length of the bias shift produced by a unit latent direction.
    pub bias_scale: f64,
    /// Standard deviation of the log-scale loadings.
    pub log_scale_std: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_speakers: 8,
            utts_per_speaker: 40,
            vocab_size: 6,
            frames_per_label: 3,
            noise_std: 0.1,
            prototype_scale: 1.0,
            feature_dim: 4,
            embedding_dim: 8,
            min_labels: 2,
            max_labels: 6,
            dev_speakers: 2,
            test_speakers: 2,
            speaker_factors: 2,
            held_out: HeldOutSpeakers::Interleaved,
            held_out_radius: 0.8,
            bias_scale: 4.0,
            log_scale_std: 0.6,
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.vocab_size > 26 {
            return fail(format!("vocab_size must be at most 26, got {}", self.vocab_size));
        }
        if self.num_speakers < 4 {
            return fail(format!("num_speakers must be at least 4, got {}", self.num_speakers));
        }
        if self.dev_speakers == 0 || self.test_speakers == 0 || self.dev_speakers + self.test_speakers >= self.num_speakers {
            return fail(format!(
                "{} dev + {} test speakers leave no training speakers out of {}",
                self.dev_speakers, self.test_speakers, self.num_speakers
            ));
        }
        if self.utts_per_speaker == 0 || self.frames_per_label == 0 {
            return fail("utts_per_speaker and frames_per_label must be positive".into());
        }
        if self.min_labels == 0 || self.min_labels > self.max_labels {
            return fail(format!("label length range {}..={} is empty", self.min_labels, self.max_labels));
        }
        if self.held_out == HeldOutSpeakers::Interleaved && self.speaker_factors < 2 {
            return fail("interleaved speakers need at least two speaker factors".into());
        }
        if self.feature_dim == 0 || self.embedding_dim == 0 {
            return fail("feature_dim and embedding_dim must be positive".into());
        }
        if !(self.held_out_radius > 0.0) {
            return fail(format!("held_out_radius must be positive, got {}", self.held_out_radius));
        }
        if !(self.noise_std >= 0.0 && self.bias_scale >= 0.0 && self.log_scale_std >= 0.0) {
            return fail("noise and speaker spreads must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub id: String,
    pub split: Split,
    /// Additive feature shift.
    pub bias: Vec<f64>,
    /// Multiplicative feature scale, each entry in `[0.5, 2]`.
    pub scale: Vec<f64>,
    /// Seed of this speaker's utterance stream.
    pub seed: u64,
}

impl SyntheticSpeaker {
    pub fn identity(id: &str, split: Split, dim: usize) -> Self {
        SyntheticSpeaker {
            id: id.to_string(),
            split,
            bias: vec![0.0; dim],
            scale: vec![1.0; dim],
            seed: 0,
        }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.scale.iter().zip(&self.bias))
            .map(|(v, (s, b))| s * v + b)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    /// `T x F`.
    pub features: Tensor,
    /// Token indices (no blank or end-of-sentence).
    pub labels: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

/// Fixed linear map from `[mean; std]` feature statistics to embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEmbedder {
    /// `2F x D`, row-major.
    pub matrix: Vec<f64>,
    pub feature_dim: usize,
    pub embedding_dim: usize,
}

impl UtteranceEmbedder {
    pub fn new(feature_dim: usize, embedding_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / ((2 * feature_dim) as f64).sqrt()).expect("valid std");
        UtteranceEmbedder {
            matrix: (0..2 * feature_dim * embedding_dim).map(|_| normal.sample(&mut rng)).collect(),
            feature_dim,
            embedding_dim,
        }
    }

    /// Per-dimension mean and (population) standard deviation, concatenated.
    pub fn statistics(features: &Tensor) -> Vec<f64> {
        let (frames, dim) = (features.rows() as f64, features.cols());
        let mut mean = vec![0.0; dim];
        for r in 0..features.rows() {
            for (m, v) in mean.iter_mut().zip(features.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= frames);
        let mut var = vec![0.0; dim];
        for r in 0..features.rows() {
            for ((s, v), m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let mut stats = mean;
        stats.extend(var.into_iter().map(|s| (s / frames).sqrt()));
        stats
    }

    pub fn embed(&self, features: &Tensor) -> Result<Vec<f64>> {
        if features.cols() != self.feature_dim || features.rows() == 0 {
            return Err(Error::dims("utterance_embedding", features.shape(), &[1, self.feature_dim]));
        }
        let stats = Self::statistics(features);
        let d = self.embedding_dim;
        let mut out = vec![0.0; d];
        for (i, s) in stats.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += s * self.matrix[i * d + j];
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocab,
    /// One prototype feature vector per symbol.
    pub prototypes: Vec<Vec<f64>>,
    pub speakers: Vec<SyntheticSpeaker>,
    pub embedder: UtteranceEmbedder,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.random()
}

fn random_labels<R: Rng>(rng: &mut R, vocab: &Vocab, min: usize, max: usize) -> Vec<usize> {
    let len = rng.random_range(min..=max);
    let mut labels = Vec::with_capacity(len);
    while labels.len() < len {
        let sym = vocab.symbol_token(rng.random_range(0..vocab.num_symbols()));
        if labels.last() != Some(&sym) {
            labels.push(sym);
        }
    }
    labels
}

/// Feature frames for `labels` spoken by `speaker`.
pub fn render_features<R: Rng>(
    labels: &[usize],
    prototypes: &[Vec<f64>],
    vocab: &Vocab,
    speaker: &SyntheticSpeaker,
    frames_per_label: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let dim = prototypes[0].len();
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(labels.len() * frames_per_label * dim);
    for &l in labels {
        let proto = &prototypes[l - vocab.symbol_token(0)];
        let clean = speaker.transform(proto);
        for _ in 0..frames_per_label {
            data.extend(clean.iter().map(|v| {
                if noise_std > 0.0 {
                    v + noise.sample(rng)
                } else {
                    *v
                }
            }));
        }
    }
    Tensor::from_vec(labels.len() * frames_per_label, dim, data)
}

/// `rows x cols` matrix (row-major) with orthogonal columns of length `length`.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng, length: f64) -> Vec<f64> {
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| unit.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    (0..rows * cols).map(|i| length * basis[i % cols][i / cols]).collect()
}

fn make_speakers(config: &CorpusConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SyntheticSpeaker>> {
    let (f, k) = (config.feature_dim, config.speaker_factors);
    let scale_load = Normal::new(0.0, config.log_scale_std).map_err(|e| Error::Config(e.to_string()))?;
    let bias_basis = orthonormal_columns(f, k, rng, config.bias_scale);
    let scale_basis: Vec<f64> = (0..f * k).map(|_| scale_load.sample(rng)).collect();

    let n = config.num_speakers;
    let held = config.dev_speakers + config.test_speakers;
    let mut split_of = vec![Split::Train; n];
    let latents: Vec<Vec<f64>> = match config.held_out {
        HeldOutSpeakers::Independent => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            for (rank, &i) in order[..held].iter().enumerate() {
                split_of[i] = if rank < config.dev_speakers { Split::Dev } else { Split::Test };
            }
            (0..n).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        }
        HeldOutSpeakers::Interleaved => {
            // held-out positions spread evenly around the ring, alternating dev and test
            let (mut dev_left, mut test_left) = (config.dev_speakers, config.test_speakers);
            for j in 0..held {
                let pos = ((j as f64 + 0.5) * n as f64 / held as f64).floor() as usize;
                let dev = test_left == 0 || (j % 2 == 0 && dev_left > 0);
                if dev {
                    dev_left -= 1;
                } else {
                    test_left -= 1;
                }
                split_of[pos] = if dev { Split::Dev } else { Split::Test };
            }
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (0..n)
                .map(|p| {
                    let angle = phase + std::f64::consts::TAU * p as f64 / n as f64;
                    let mut radius = rng.random_range(0.7..1.0);
                    if split_of[p] != Split::Train {
                        radius *= config.held_out_radius;
                    }
                    let mut z = vec![radius * angle.cos(), radius * angle.sin()];
                    z.extend((2..k).map(|_| rng.random_range(-1.0..1.0)));
                    z
                })
                .collect()
        }
    };

    Ok((0..config.num_speakers)
        .map(|i| {
            let z = &latents[i];
            let combine = |basis: &[f64], d: usize| -> f64 { (0..k).map(|j| basis[d * k + j] * z[j]).sum() };
            SyntheticSpeaker {
                id: format!("spk{i:02}"),
                split: split_of[i],
                bias: (0..f).map(|d| combine(&bias_basis, d)).collect(),
                scale: (0..f).map(|d| combine(&scale_basis, d).exp().clamp(0.5, 2.0)).collect(),
                seed: rng.random(),
            }
        })
        .collect())
}

/// Generates a corpus; a pure function of `config` (including its seed).
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let vocab = Vocab::letters(config.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Normal::new(0.0, config.prototype_scale).map_err(|e| Error::Config(e.to_string()))?;
    let prototypes: Vec<Vec<f64>> = (0..config.vocab_size)
        .map(|_| (0..config.feature_dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let speakers = make_speakers(config, &mut rng)?;
    let embedder = UtteranceEmbedder::new(config.feature_dim, config.embedding_dim, derive_seed(config.seed, 1));
    generate_utterances(config.clone(), vocab, prototypes, speakers, embedder)
}

/// Renders utterances for an explicit speaker roster.
pub fn generate_utterances(
    config: CorpusConfig,
    vocab: Vocab,
    prototypes: Vec<Vec<f64>>,
    speakers: Vec<SyntheticSpeaker>,
    embedder: UtteranceEmbedder,
) -> Result<Corpus> {
    let mut corpus = Corpus {
        config,
        vocab,
        prototypes,
        speakers,
        embedder,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    let cfg = &corpus.config;
    let mut utts: Vec<(Split, Utterance)> = Vec::new();
    for spk in &corpus.speakers {
        let mut rng = ChaCha8Rng::seed_from_u64(spk.seed);
        for k in 0..cfg.utts_per_speaker {
            let labels = random_labels(&mut rng, &corpus.vocab, cfg.min_labels, cfg.max_labels);
            let features = render_features(
                &labels,
                &corpus.prototypes,
                &corpus.vocab,
                spk,
                cfg.frames_per_label,
                cfg.noise_std,
                &mut rng,
            )?;
            utts.push((
                spk.split,
                Utterance {
                    id: format!("{}_{k:03}", spk.id),
                    speaker_id: spk.id.clone(),
                    features,
                    labels,
                },
            ));
        }
    }
    for (split, utt) in utts {
        corpus.split_mut(split).push(utt);
    }
    Ok(corpus)
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Utterance> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// Sorted speaker ids of one split.
    pub fn roster(&self, split: Split) -> Vec<String> {
        let set: BTreeSet<String> = self
            .speakers
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.id.clone())
            .collect();
        set.into_iter().collect()
    }

    pub fn utterance_embedding(&self, utt: &Utterance) -> Result<Vec<f64>> {
        self.embedder.embed(&utt.features)
    }

    /// Mean utterance embedding over every utterance of `speaker_id`.
    pub fn extract_speaker_embedding(&self, speaker_id: &str) -> Result<Vec<f64>> {
        let mut sum: Option<Vec<f64>> = None;
        let mut count = 0usize;
        for utt in self.utterances().filter(|u| u.speaker_id == speaker_id) {
            let e = self.utterance_embedding(utt)?;
            match &mut sum {
                Some(s) => s.iter_mut().zip(&e).for_each(|(a, b)| *a += b),
                None => sum = Some(e),
            }
            count += 1;
        }
        let sum = sum.ok_or_else(|| Error::Invalid(format!("unknown speaker {speaker_id}")))?;
        Ok(sum.into_iter().map(|v| v / count as f64).collect())
    }

    /// Embeddings of every speaker, keyed by id.
    pub fn speaker_embeddings(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.speakers
            .iter()
            .map(|s| Ok((s.id.clone(), self.extract_speaker_embedding(&s.id)?)))
            .collect()
    }

    /// One memory column per training speaker, in sorted id order.
    pub fn build_memory(&self) -> Result<SpeakerMemory> {
        let ids = self.roster(Split::Train);
        if ids.is_empty() {
            return Err(Error::Invalid("corpus has no training speakers".into()));
        }
        let cols = ids
            .iter()
            .map(|id| self.extract_speaker_embedding(id))
            .collect::<Result<Vec<_>>>()?;
        SpeakerMemory::new(ids, &cols)
    }
}

/// Joins two utterances along time.
pub fn concatenate(a: &Utterance, b: &Utterance) -> Result<Utterance> {
    let mut labels = a.labels.clone();
    labels.extend_from_slice(&b.labels);
    Ok(Utterance {
        id: format!("{}+{}", a.id, b.id),
        speaker_id: format!("{}+{}", a.speaker_id, b.speaker_id),
        features: Tensor::vstack(&[&a.features, &b.features])?,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerChangeSet {
    pub utterances: Vec<Utterance>,
    /// Source utterance ids of each pair.
    pub pairs: Vec<(String, String)>,
    /// Leftover utterance when the input count is odd.
    pub dropped: Option<String>,
}

/// Random perfect pairing of utterances from different speakers, each used
/// exactly once, concatenated pairwise.
pub fn concat_speaker_change(testset: &[Utterance], seed: u64) -> Result<SpeakerChangeSet> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in testset.iter().enumerate() {
        groups.entry(u.speaker_id.as_str()).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::Invalid("speaker-change pairing needs at least two speakers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = groups.into_values().collect();
    for p in &mut pools {
        p.shuffle(&mut rng);
    }
    let total: usize = pools.iter().map(Vec::len).sum();
    let mut dropped = None;
    if total % 2 == 1 {
        let largest = largest_pool(&pools);
        dropped = pools[largest].pop().map(|i| testset[i].id.clone());
    }
    let remaining: usize = pools.iter().map(Vec::len).sum();
    let max = pools.iter().map(Vec::len).max().unwrap_or(0);
    if 2 * max > remaining {
        return Err(Error::Invalid(format!(
            "cannot pair {remaining} utterances across speakers: one speaker holds {max}"
        )));
    }
    let mut pairs_idx = Vec::with_capacity(remaining / 2);
    while pools.iter().any(|p| !p.is_empty()) {
        let first_pool = largest_pool(&pools);
        let a = pools[first_pool].pop().expect("non-empty");
        let partners: Vec<(usize, usize)> = pools
            .iter()
            .enumerate()
            .filter(|(p, _)| *p != first_pool)
            .flat_map(|(p, items)| (0..items.len()).map(move |k| (p, k)))
            .collect();
        let (p, k) = partners[rng.random_range(0..partners.len())];
        let b = pools[p].swap_remove(k);
        pairs_idx.push((a, b));
    }
    let mut utterances = Vec::with_capacity(pairs_idx.len());
    let mut pairs = Vec::with_capacity(pairs_idx.len());
    for (a, b) in pairs_idx {
        utterances.push(concatenate(&testset[a], &testset[b])?);
        pairs.push((testset[a].id.clone(), testset[b].id.clone()));
    }
    Ok(SpeakerChangeSet {
        utterances,
        pairs,
        dropped,
    })
}

/// Control condition: every utterance concatenated with itself.
pub fn concat_self_pairs(testset: &[Utterance]) -> Result<SpeakerChangeSet> {
    let mut utterances = Vec::with_capacity(testset.len());
    let mut pairs = Vec::with_capacity(testset.len());
    for u in testset {
        utterances.push(concatenate(u, u)?);
        pairs.push((u.id.clone(), u.id.clone()));
    }
    Ok(SpeakerChangeSet {
        utterances,
        pairs,
        dropped: None,
    })
}

fn largest_pool(pools: &[Vec<usize>]) -> usize {
    let mut best = 0;
    for (i, p) in pools.iter().enumerate() {
        if p.len() > pools[best].len() {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// On-disk layout: manifest.json plus one feature file per utterance.

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MEMORY_FILE: &str = "memory.txt";
const MANIFEST_FORMAT: &str = "memvoice-corpus";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker: String,
    pub split: Split,
    pub labels: String,
    pub features: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: CorpusConfig,
    pub symbols: Vec<char>,
    pub prototypes: Vec<Vec<f64>>,
    pub speakers: Vec<SyntheticSpeaker>,
    pub embedder: UtteranceEmbedder,
    pub utterances: Vec<ManifestEntry>,
}

pub fn features_to_text(features: &Tensor) -> String {
    let mut out = format!("{} {}\n", features.rows(), features.cols());
    for r in 0..features.rows() {
        let row: Vec<String> = features.row(r).iter().map(|v| format_float(*v)).collect();
        writeln!(out, "{}", row.join(" ")).unwrap();
    }
    out
}

pub fn features_from_text(text: &str, path: &Path) -> Result<Tensor> {
    let perr = |line: usize, field: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        field,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| perr(1, 1, "missing `T F` header".into()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 2 {
        return Err(perr(1, 1, "header must be `T F`".into()));
    }
    let frames: usize = head[0].parse().map_err(|e| perr(1, 1, format!("bad T: {e}")))?;
    let dim: usize = head[1].parse().map_err(|e| perr(1, 2, format!("bad F: {e}")))?;
    let mut data = Vec::with_capacity(frames * dim);
    let mut rows = 0;
    for (idx, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != dim {
            return Err(perr(idx + 1, fields.len().min(dim) + 1, format!("expected {dim} values")));
        }
        for (f, s) in fields.iter().enumerate() {
            data.push(s.parse::<f64>().map_err(|e| perr(idx + 1, f + 1, format!("bad value {s:?}: {e}")))?);
        }
        rows += 1;
    }
    if rows != frames {
        return Err(perr(1, 1, format!("header declares {frames} frames, file has {rows}")));
    }
    Tensor::from_vec(frames, dim, data)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json` and `features/<id>.txt` under `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut entries = Vec::new();
    for split in [Split::Train, Split::Dev, Split::Test] {
        for utt in corpus.split(split) {
            let rel = format!("features/{}.txt", utt.id);
            write_file(&dir.join(&rel), &features_to_text(&utt.features))?;
            let text: String = corpus.vocab.decode(&utt.labels);
            entries.push(ManifestEntry {
                id: utt.id.clone(),
                speaker: utt.speaker_id.clone(),
                split,
                labels: text,
                features: rel,
            });
        }
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        config: corpus.config.clone(),
        symbols: corpus.vocab.symbols().to_vec(),
        prototypes: corpus.prototypes.clone(),
        speakers: corpus.speakers.clone(),
        embedder: corpus.embedder.clone(),
        utterances: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    write_file(&path, &json)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::Invalid(format!(
            "{}: unsupported manifest {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    let vocab = Vocab::from_symbols(manifest.symbols)?;
    let mut corpus = Corpus {
        config: manifest.config,
        vocab,
        prototypes: manifest.prototypes,
        speakers: manifest.speakers,
        embedder: manifest.embedder,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    let mut seen = BTreeSet::new();
    for e in manifest.utterances {
        if !seen.insert(e.id.clone()) {
            return Err(Error::Invalid(format!("duplicate utterance id {}", e.id)));
        }
        let fpath = dir.join(&e.features);
        let ftext = std::fs::read_to_string(&fpath).map_err(|err| Error::io(&fpath, err))?;
        let features = features_from_text(&ftext, &fpath)?;
        let labels = corpus.vocab.encode(&e.labels);
        corpus.split_mut(e.split).push(Utterance {
            id: e.id,
            speaker_id: e.speaker,
            features,
            labels,
        });
    }
    Ok(corpus)
}
