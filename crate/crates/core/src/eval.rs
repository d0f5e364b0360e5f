//! Token error rates and the experiment protocols built on them.

use std::cmp::Ordering;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{concat_self_pairs, concat_speaker_change, Corpus, Utterance};
use crate::error::{Error, Result};
use crate::model::{AsrModel, ModelConfig, Variant};
use crate::trainer::{multi_seed_select, AdaptationSource, Selection, TrainerConfig};
use crate::memory::SpeakerMemory;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Lower is better: fewest edits, then most substitutions, then most deletions.
    fn rank(&self) -> (usize, std::cmp::Reverse<usize>, std::cmp::Reverse<usize>) {
        (
            self.total(),
            std::cmp::Reverse(self.substitutions),
            std::cmp::Reverse(self.deletions),
        )
    }

    fn plus(self, s: usize, d: usize, i: usize) -> Self {
        EditCounts {
            substitutions: self.substitutions + s,
            deletions: self.deletions + d,
            insertions: self.insertions + i,
        }
    }
}

impl std::ops::AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        *self = self.plus(o.substitutions, o.deletions, o.insertions);
    }
}

/// Minimal edit counts turning `reference` into `hypothesis`.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let m = hypothesis.len();
    let mut prev: Vec<EditCounts> = (0..=m).map(|j| EditCounts::default().plus(0, 0, j)).collect();
    let mut cur = vec![EditCounts::default(); m + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = EditCounts::default().plus(0, i + 1, 0);
        for (j, h) in hypothesis.iter().enumerate() {
            let diag = prev[j].plus(usize::from(r != h), 0, 0);
            let del = prev[j + 1].plus(0, 1, 0);
            let ins = cur[j].plus(0, 0, 1);
            let mut best = diag;
            for c in [del, ins] {
                if c.rank() < best.rank() {
                    best = c;
                }
            }
            cur[j + 1] = best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalResult {
    pub counts: EditCounts,
    pub ref_len: usize,
}

impl EvalResult {
    pub fn ter(&self) -> f64 {
        token_error_rate(self.counts, self.ref_len)
    }
}

pub fn token_error_rate(counts: EditCounts, ref_len: usize) -> f64 {
    if ref_len == 0 {
        if counts.total() == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        counts.total() as f64 / ref_len as f64
    }
}

/// Longest hypothesis the decoder may produce for a `frames`-long input.
pub fn max_decode_len(frames: usize) -> usize {
    frames + 1
}

/// Decodes every utterance and accumulates edit counts.
pub fn evaluate(model: &AsrModel, utts: &[Utterance], source: &AdaptationSource, beam: usize) -> Result<EvalResult> {
    let mut result = EvalResult::default();
    for utt in utts {
        let hyp = source.with_input(utt, |input| {
            model.transcribe(&utt.features, input, beam, max_decode_len(utt.frames()))
        })?;
        result.counts += edit_distance(&utt.labels, hyp.transcript());
        result.ref_len += utt.labels.len();
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    pub variant: Variant,
    /// Insertion layer; absent for the unadapted baseline.
    pub layer: Option<usize>,
    pub seed: u64,
    pub split: String,
    pub ter: f64,
    #[serde(rename = "S")]
    pub substitutions: usize,
    #[serde(rename = "D")]
    pub deletions: usize,
    #[serde(rename = "I")]
    pub insertions: usize,
    pub ref_len: usize,
}

impl MetricsRecord {
    pub fn new(experiment: &str, variant: Variant, layer: Option<usize>, seed: u64, split: &str, result: EvalResult) -> Self {
        MetricsRecord {
            experiment: experiment.into(),
            variant,
            layer,
            seed,
            split: split.into(),
            ter: result.ter(),
            substitutions: result.counts.substitutions,
            deletions: result.counts.deletions,
            insertions: result.counts.insertions,
            ref_len: result.ref_len,
        }
    }

    fn key_cmp(&self, o: &Self) -> Ordering {
        (&self.experiment, self.variant, self.layer, self.seed, &self.split)
            .cmp(&(&o.experiment, o.variant, o.layer, o.seed, &o.split))
    }
}

pub fn sort_records(records: &mut [MetricsRecord]) {
    records.sort_by(MetricsRecord::key_cmp);
}

// ---------------------------------------------------------------------------

/// Models for one sweep cell are built from this template with the cell's
/// adaptation and insertion layer filled in.
pub fn cell_config(template: &ModelConfig, variant: Variant, layer: Option<usize>) -> ModelConfig {
    let mut config = template.clone();
    config.encoder.adaptation = variant.adaptation();
    if let Some(l) = layer {
        config.encoder.insertion_layer = l;
    }
    config
}

/// One trained cell of a sweep.
pub struct SweepGroup {
    pub variant: Variant,
    pub layer: Option<usize>,
    pub selection: Selection,
    pub records: Vec<MetricsRecord>,
}

/// Trains and scores the unadapted baseline plus every `(layer, variant)`
/// pair. `on_group` sees each group as soon as it is finished.
pub fn layer_sweep(
    corpus: &Corpus,
    memory: &SpeakerMemory,
    layers: &[usize],
    variants: &[Variant],
    template: &ModelConfig,
    trainer: &TrainerConfig,
    mut on_group: impl FnMut(&SweepGroup) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    trainer.validate()?;
    for &l in layers {
        if l > template.encoder.num_layers {
            return Err(Error::Config(format!(
                "layer {l} exceeds encoder depth {}",
                template.encoder.num_layers
            )));
        }
    }
    if variants.contains(&Variant::None) {
        return Err(Error::Config("the unadapted baseline is always included; do not list it as a variant".into()));
    }
    let mut cells = vec![(Variant::None, None)];
    for &l in layers {
        for &v in variants {
            cells.push((v, Some(l)));
        }
    }
    let mut all = Vec::new();
    for (variant, layer) in cells {
        let config = cell_config(template, variant, layer);
        config.validate()?;
        let source = AdaptationSource::new(variant, corpus, Some(memory.clone()))?;
        let selection = multi_seed_select(|seed| AsrModel::new(config.clone(), seed), corpus, &source, trainer)?;
        let best = selection.best_run();
        let mut records = Vec::new();
        for (split, utts) in [("dev", &corpus.dev), ("test", &corpus.test)] {
            let result = evaluate(&best.model, utts, &source, trainer.beam)?;
            records.push(MetricsRecord::new("layer-sweep", variant, layer, best.seed, split, result));
        }
        let group = SweepGroup {
            variant,
            layer,
            selection,
            records,
        };
        on_group(&group)?;
        all.extend(group.records);
    }
    Ok(all)
}

/// A trained model under evaluation.
pub struct EvalModel<'a> {
    pub model: &'a AsrModel,
    pub source: &'a AdaptationSource,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerChangeReport {
    pub records: Vec<MetricsRecord>,
    /// `error(concatenated) - error(single)` per model, in input order.
    pub deltas: Vec<(Variant, f64)>,
    pub dropped: Option<String>,
}

/// Scores each model on `testset` and on its pairwise concatenation. With
/// `control` set, each utterance is paired with itself instead of with
/// another speaker. Fixed embeddings of concatenated utterances are
/// recomputed from the concatenated features.
pub fn speaker_change_eval(models: &[EvalModel<'_>], testset: &[Utterance], seed: u64, control: bool, beam: usize) -> Result<SpeakerChangeReport> {
    let has = |f: fn(Variant) -> bool| models.iter().any(|m| f(m.source.variant()));
    if !has(|v| v == Variant::Memory) || !has(|v| matches!(v, Variant::ExternalSpeaker | Variant::ExternalUtterance)) {
        return Err(Error::Config("speaker-change evaluation needs a memory model and a fixed-embedding model".into()));
    }
    let changed = if control {
        concat_self_pairs(testset)?
    } else {
        concat_speaker_change(testset, seed)?
    };
    let (experiment, changed_split) = if control {
        ("self-pair", "test-self")
    } else {
        ("speaker-change", "test-change")
    };
    let mut records = Vec::new();
    let mut deltas = Vec::new();
    for m in models {
        let variant = m.source.variant();
        let layer = Some(m.model.config().encoder.insertion_layer);
        let single = evaluate(m.model, testset, m.source, beam)?;
        let concat_source = m.source.from_utterance_features();
        let joined = evaluate(m.model, &changed.utterances, &concat_source, beam)?;
        deltas.push((variant, joined.ter() - single.ter()));
        records.push(MetricsRecord::new(experiment, variant, layer, m.seed, "test", single));
        records.push(MetricsRecord::new(experiment, variant, layer, m.seed, changed_split, joined));
    }
    Ok(SpeakerChangeReport {
        records,
        deltas,
        dropped: changed.dropped,
    })
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricsFormat {
    Csv,
    Jsonl,
}

impl MetricsFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MetricsFormat::Csv => "csv",
            MetricsFormat::Jsonl => "jsonl",
        }
    }
}

pub const CSV_HEADER: &str = "experiment,variant,layer,seed,split,ter,S,D,I,ref_len";

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Invalid(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `records` sorted by key.
pub fn export_metrics(records: &[MetricsRecord], path: &Path, format: MetricsFormat) -> Result<()> {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    match format {
        MetricsFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(path)
                .map_err(|e| csv_error(path, e))?;
            w.write_record(CSV_HEADER.split(',')).map_err(|e| csv_error(path, e))?;
            for r in &sorted {
                w.serialize(r).map_err(|e| csv_error(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
        MetricsFormat::Jsonl => {
            let mut out = Vec::new();
            for r in &sorted {
                serde_json::to_writer(&mut out, r).map_err(|e| Error::json(path, e))?;
                out.push(b'\n');
            }
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            f.write_all(&out).map_err(|e| Error::io(path, e))
        }
    }
}

pub fn read_metrics(path: &Path, format: MetricsFormat) -> Result<Vec<MetricsRecord>> {
    match format {
        MetricsFormat::Csv => {
            let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
            let header: Vec<String> = r
                .headers()
                .map_err(|e| csv_error(path, e))?
                .iter()
                .map(str::to_string)
                .collect();
            if header.join(",") != CSV_HEADER {
                return Err(Error::Invalid(format!("{}: unexpected header {}", path.display(), header.join(","))));
            }
            r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
        }
        MetricsFormat::Jsonl => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(s: usize, d: usize, i: usize) -> EditCounts {
        EditCounts {
            substitutions: s,
            deletions: d,
            insertions: i,
        }
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(b"abc", b"abc"), counts(0, 0, 0));
        assert_eq!(edit_distance(b"abc", b"axc"), counts(1, 0, 0));
        assert_eq!(edit_distance(b"abc", b""), counts(0, 3, 0));
        assert_eq!(edit_distance(b"", b"ab"), counts(0, 0, 2));
        assert_eq!(edit_distance(b"abc", b"ac"), counts(0, 1, 0));
        // "ab" -> "ba": two substitutions beat a deletion plus an insertion
        assert_eq!(edit_distance(b"ab", b"ba"), counts(2, 0, 0));
    }

    #[test]
    fn error_rate_matches_counts() {
        let r = EvalResult {
            counts: counts(1, 2, 1),
            ref_len: 8,
        };
        assert_eq!(r.ter(), 0.5);
        assert_eq!(token_error_rate(counts(0, 0, 0), 0), 0.0);
    }

    fn record(experiment: &str, layer: Option<usize>, ter: f64) -> MetricsRecord {
        MetricsRecord {
            experiment: experiment.into(),
            variant: Variant::Memory,
            layer,
            seed: 3,
            split: "dev".into(),
            ter,
            substitutions: 1,
            deletions: 0,
            insertions: 2,
            ref_len: 7,
        }
    }

    #[test]
    fn metrics_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = vec![record("b", Some(2), 3.0 / 7.0), record("a", None, 0.1 + 0.2)];
        for fmt in [MetricsFormat::Csv, MetricsFormat::Jsonl] {
            let path = dir.path().join(format!("m.{}", fmt.extension()));
            export_metrics(&records, &path, fmt).unwrap();
            let back = read_metrics(&path, fmt).unwrap();
            sort_records(&mut records);
            assert_eq!(back, records);
            for (a, b) in back.iter().zip(&records) {
                assert_eq!(a.ter.to_bits(), b.ter.to_bits());
            }
        }
        let jsonl = std::fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
        assert_eq!(jsonl.lines().count(), 2);
    }

    #[test]
    fn empty_csv_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        export_metrics(&[], &path, MetricsFormat::Csv).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{CSV_HEADER}\n"));
        assert!(read_metrics(&path, MetricsFormat::Csv).unwrap().is_empty());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = export_metrics(&[], Path::new("/nonexistent/dir/m.csv"), MetricsFormat::Csv).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }
}
