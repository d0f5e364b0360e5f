use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use memvoice::config::RunConfig;
use memvoice::corpus::{generate_corpus, load_corpus, save_corpus, Corpus, Split, MANIFEST_FILE, MEMORY_FILE};
use memvoice::eval::{export_metrics, layer_sweep, read_metrics, speaker_change_eval, EvalModel, MetricsFormat, MetricsRecord};
use memvoice::memory::{load_memory, save_memory, Similarity, SpeakerMemory};
use memvoice::model::{AsrModel, Variant};
use memvoice::trainer::{gradcheck_report, multi_seed_select, AdaptationSource, Checkpoint, GradCheckOptions};

/// Largest relative gradient error the gradcheck gate accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
    Gate(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Gate(_) => 3,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Validation(e) | Failure::Runtime(e) | Failure::Gate(e) => e,
        }
    }
}

impl From<memvoice::Error> for Failure {
    fn from(e: memvoice::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn invalid(msg: impl std::fmt::Display) -> Failure {
    Failure::Validation(anyhow!("{msg}"))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(anyhow!("{}: {e}", path.display()))
}

type CmdResult = Result<(), Failure>;

pub struct Context {
    pub config: RunConfig,
    pub seed: Option<u64>,
}

impl Context {
    /// Reads and validates the configuration, applying `--seed`.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, Failure> {
        let mut config = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(invalid(format!("config file not found: {}", p.display())));
                }
                RunConfig::load(p)?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            config.corpus.seed = s;
            config.pairing_seed = s;
            let n = config.trainer.seeds.len() as u64;
            config.trainer.seeds = (0..n).map(|i| s.wrapping_add(i)).collect();
        }
        config.validate()?;
        Ok(Context { config, seed })
    }
}

fn is_non_empty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut it| it.next().is_some()).unwrap_or(false)
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn create_parent(path: &Path) -> CmdResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub fn gen_data(ctx: &Context, out: Option<PathBuf>, force: bool) -> CmdResult {
    let paths = &ctx.config.paths;
    let memory_path = out.as_ref().map_or_else(|| paths.memory_file.clone(), |d| d.join(MEMORY_FILE));
    let dir = out.unwrap_or_else(|| paths.corpus_dir.clone());
    if is_non_empty_dir(&dir) && !force {
        return Err(invalid(format!(
            "{} exists and is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    let corpus = generate_corpus(&ctx.config.corpus)?;
    let memory = corpus.build_memory()?;

    let features = dir.join("features");
    if force && features.is_dir() {
        fs::remove_dir_all(&features).map_err(|e| io_failure(&features, e))?;
    }
    save_corpus(&corpus, &dir)?;
    create_parent(&memory_path)?;
    save_memory(&memory, &memory_path)?;

    println!("corpus written to {}", dir.display());
    println!("memory written to {} ({} speakers, dim {})", memory_path.display(), memory.len(), memory.dim());
    println!("speakers: {}", corpus.speakers.len());
    for split in [Split::Train, Split::Dev, Split::Test] {
        println!(
            "  {:<5} {} speakers, {} utterances: {}",
            split.name(),
            corpus.roster(split).len(),
            corpus.split(split).len(),
            corpus.roster(split).join(" ")
        );
    }
    Ok(())
}

fn require(path: &Path, what: &str) -> CmdResult {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{what} not found: {}", path.display())))
    }
}

fn parse_variant(s: &str) -> Result<Variant, Failure> {
    s.parse::<Variant>().map_err(Failure::from)
}

/// Loads the corpus and, when `need_memory` is set, the memory file.
fn load_inputs(config: &RunConfig, need_memory: bool) -> Result<(Corpus, Option<SpeakerMemory>), Failure> {
    let dir = &config.paths.corpus_dir;
    require(&dir.join(MANIFEST_FILE), "corpus manifest")?;
    let memory = if need_memory {
        require(&config.paths.memory_file, "memory file")?;
        Some(load_memory(&config.paths.memory_file)?)
    } else {
        None
    };
    let corpus = load_corpus(dir)?;
    if let Some(m) = &memory {
        if m.dim() != corpus.config.embedding_dim {
            return Err(invalid(format!(
                "memory vectors have {} dims but the corpus embeds speakers in {}",
                m.dim(),
                corpus.config.embedding_dim
            )));
        }
    }
    Ok((corpus, memory))
}

/// Run configuration whose corpus section matches the corpus on disk.
fn with_corpus(config: &RunConfig, corpus: &Corpus) -> RunConfig {
    let mut c = config.clone();
    if c.corpus != corpus.config {
        eprintln!("note: using the corpus settings stored in the manifest");
        c.corpus = corpus.config.clone();
    }
    c
}

pub fn train(ctx: &Context, variant: Option<&str>, out: Option<PathBuf>) -> CmdResult {
    let variant = match variant {
        Some(v) => parse_variant(v)?,
        None => ctx.config.variant(),
    };
    let (corpus, memory) = load_inputs(&ctx.config, variant == Variant::Memory)?;
    let config = with_corpus(&ctx.config, &corpus);
    let model_config = config.model_config(variant);
    model_config.validate()?;
    let source = AdaptationSource::new(variant, &corpus, memory)?;

    let dir = out.unwrap_or_else(|| config.paths.checkpoint_dir.clone());
    create_dir(&dir)?;
    let selection = multi_seed_select(|seed| AsrModel::new(model_config.clone(), seed), &corpus, &source, &config.trainer)?;
    for run in &selection.runs {
        println!("{variant} seed {}: final dev TER {:.4}", run.seed, run.final_dev_ter());
    }
    let best = selection.best_run();
    let ckpt_path = dir.join(format!("{variant}.json"));
    Checkpoint::from_run(best, variant, &config.trainer).save(&ckpt_path)?;

    let history = serde_json::json!({
        "variant": variant,
        "best_seed": best.seed,
        "runs": selection.runs.iter().map(|r| serde_json::json!({
            "seed": r.seed,
            "history": r.outcome.history,
        })).collect::<Vec<_>>(),
    });
    let history_path = dir.join(format!("{variant}.history.json"));
    let text = serde_json::to_string_pretty(&history).map_err(|e| Failure::Runtime(e.into()))?;
    fs::write(&history_path, text).map_err(|e| io_failure(&history_path, e))?;
    println!("best seed {} (dev TER {:.4}) saved to {}", best.seed, best.final_dev_ter(), ckpt_path.display());
    Ok(())
}

fn parse_list<T>(text: &str, what: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, Failure> {
    let items: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(invalid(format!("empty {what} list")));
    }
    items
        .into_iter()
        .map(|s| parse(s).ok_or_else(|| invalid(format!("bad {what} {s:?}"))))
        .collect()
}

fn write_metrics(records: &[MetricsRecord], dir: &Path, stem: &str) -> CmdResult {
    for format in [MetricsFormat::Csv, MetricsFormat::Jsonl] {
        export_metrics(records, &dir.join(format!("{stem}.{}", format.extension())), format)?;
    }
    Ok(())
}

pub fn sweep(ctx: &Context, layers: Option<&str>, variants: &str, out: Option<PathBuf>) -> CmdResult {
    let depth = ctx.config.encoder.num_layers;
    let layers = match layers {
        Some(text) => parse_list(text, "layer", |s| s.parse::<usize>().ok())?,
        None => (0..=depth).collect(),
    };
    if let Some(l) = layers.iter().find(|l| **l > depth) {
        return Err(invalid(format!("layer {l} exceeds encoder depth {depth}")));
    }
    let variants = parse_list(variants, "variant", |s| s.parse::<Variant>().ok())?;
    if variants.contains(&Variant::None) {
        return Err(invalid("the unadapted baseline is always included; do not list none"));
    }
    let (corpus, memory) = load_inputs(&ctx.config, variants.contains(&Variant::Memory))?;
    let memory = match memory {
        Some(m) => m,
        None => corpus.build_memory()?,
    };
    let config = with_corpus(&ctx.config, &corpus);
    let template = config.model_config(Variant::Memory);
    template.validate()?;

    let dir = out.unwrap_or_else(|| config.paths.metrics_out.clone());
    create_dir(&dir)?;
    let mut partial: Vec<MetricsRecord> = Vec::new();
    let result = layer_sweep(&corpus, &memory, &layers, &variants, &template, &config.trainer, |group| {
        let layer = group.layer.map_or_else(|| "-".to_string(), |l| l.to_string());
        for r in &group.records {
            println!("{:<18} layer {layer:<2} seed {} {:<4} TER {:.4}", r.variant.name(), r.seed, r.split, r.ter);
        }
        partial.extend(group.records.iter().cloned());
        write_metrics(&partial, &dir, "layer-sweep").map_err(|f| memvoice::Error::Invalid(format!("{:#}", f.error())))
    });
    result?;
    println!("metrics written to {}", dir.display());
    Ok(())
}

fn is_fixed_embedding(v: Variant) -> bool {
    matches!(v, Variant::ExternalSpeaker | Variant::ExternalUtterance)
}

pub fn spkchange(ctx: &Context, checkpoints: &[PathBuf], control: bool, out: Option<PathBuf>) -> CmdResult {
    if checkpoints.len() != 2 {
        return Err(invalid(format!("expected two checkpoints, got {}", checkpoints.len())));
    }
    for p in checkpoints {
        require(p, "checkpoint")?;
    }
    let ckpts = checkpoints
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<memvoice::Result<Vec<_>>>()?;
    let variants: Vec<Variant> = ckpts.iter().map(|c| c.variant).collect();
    let has_memory = variants.contains(&Variant::Memory);
    if !has_memory || !variants.iter().any(|v| is_fixed_embedding(*v)) {
        return Err(invalid(format!(
            "variant mismatch: need one memory and one fixed-embedding checkpoint, got {} and {}",
            variants[0], variants[1]
        )));
    }
    let (corpus, memory) = load_inputs(&ctx.config, true)?;
    let mut models = Vec::new();
    for (c, path) in ckpts.iter().zip(checkpoints) {
        if c.model.encoder.feature_dim != corpus.config.feature_dim {
            return Err(invalid(format!(
                "{} expects {}-dim features but the corpus has {}",
                path.display(),
                c.model.encoder.feature_dim,
                corpus.config.feature_dim
            )));
        }
        let source = AdaptationSource::new(c.variant, &corpus, memory.clone())?;
        models.push((c.to_model()?, source, c.seed));
    }
    let views: Vec<EvalModel<'_>> = models
        .iter()
        .map(|(model, source, seed)| EvalModel { model, source, seed: *seed })
        .collect();
    let report = speaker_change_eval(&views, &corpus.test, ctx.config.pairing_seed, control, ctx.config.trainer.beam)?;

    let dir = out.unwrap_or_else(|| ctx.config.paths.metrics_out.clone());
    create_dir(&dir)?;
    let stem = if control { "self-pair" } else { "speaker-change" };
    write_metrics(&report.records, &dir, stem)?;
    for r in &report.records {
        println!("{:<18} {:<11} TER {:.4}", r.variant.name(), r.split, r.ter);
    }
    for (variant, delta) in &report.deltas {
        println!("delta {:<18} {delta:+.4}", variant.name());
    }
    if let Some(id) = &report.dropped {
        println!("dropped unpaired utterance {id}");
    }
    println!("metrics written to {}", dir.display());
    Ok(())
}

pub fn gradcheck(ctx: &Context, similarity: &str, flip_sign: Option<String>) -> CmdResult {
    let sims = match similarity {
        "both" => vec![Similarity::ScaledDot, Similarity::Cosine],
        "cosine" => vec![Similarity::Cosine],
        "scaled-dot" => vec![Similarity::ScaledDot],
        other => return Err(invalid(format!("unknown similarity {other:?}"))),
    };
    let mut worst: f64 = 0.0;
    for sim in sims {
        let mut options = GradCheckOptions::new(sim, ctx.seed.unwrap_or(1));
        options.flip_sign_of = flip_sign.clone();
        let report = gradcheck_report(&options)?;
        println!("similarity {sim:?}, eps {:e}", options.eps);
        for p in &report.params {
            let verdict = if p.max_relative_error <= GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
            println!("  {:<32} {:>4} values  max rel {:.3e}  {verdict}", p.name, p.entries, p.max_relative_error);
        }
        worst = worst.max(report.max_relative_error());
    }
    println!("max relative error {worst:.3e}");
    if worst <= GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Gate(anyhow!(
            "gradient check failed: max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        )))
    }
}

fn format_of(path: &Path) -> Result<MetricsFormat, Failure> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => Ok(MetricsFormat::Csv),
        Some("jsonl") => Ok(MetricsFormat::Jsonl),
        _ => Err(invalid(format!("{}: expected a .csv or .jsonl file", path.display()))),
    }
}

pub fn export(input: &Path, out: &Path) -> CmdResult {
    let (from, to) = (format_of(input)?, format_of(out)?);
    require(input, "metrics file")?;
    let records = read_metrics(input, from)?;
    create_parent(out)?;
    export_metrics(&records, out, to)?;
    println!("{} records written to {}", records.len(), out.display());
    Ok(())
}
