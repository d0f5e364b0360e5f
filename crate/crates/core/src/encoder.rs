//! Split encoder with speaker adaptation between its two halves.
//!
//! Layers `1..=l` form the first half. Each of its output frames `h_t` is
//! extended with a speaker vector (the memory read `r_t`, or a fixed external
//! embedding), passed through a linear projection and fed to layers
//! `l+1..=L`. With `l = 0` the speaker vector is appended to the input
//! features directly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{ReadHead, ReadHeadConfig, SpeakerMemory};
use crate::nn::{bidirectional, GatedCell, Graph, Linear, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adaptation {
    None,
    Memory,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub insertion_layer: usize,
    /// Hidden units per direction.
    pub hidden_size: usize,
    /// Output size of the post-concatenation projection; defaults to the
    /// width of the first half's output so the second half sees the same
    /// input size as in an unsplit encoder.
    pub post_concat_size: Option<usize>,
    pub feature_dim: usize,
    /// Dimension of speaker vectors (memory columns or external embeddings).
    pub embedding_dim: usize,
    pub adaptation: Adaptation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 3,
            insertion_layer: 2,
            hidden_size: 12,
            post_concat_size: None,
            feature_dim: 8,
            embedding_dim: 8,
            adaptation: Adaptation::Memory,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.insertion_layer > self.num_layers {
            return Err(Error::Config(format!(
                "insertion layer {} exceeds encoder depth {}",
                self.insertion_layer, self.num_layers
            )));
        }
        if self.hidden_size == 0 || self.feature_dim == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.post_concat_size == Some(0) {
            return Err(Error::Config("post-concat size must be positive".into()));
        }
        Ok(())
    }

    /// Width of the first half's output frames.
    pub fn first_half_dim(&self) -> usize {
        if self.insertion_layer == 0 {
            self.feature_dim
        } else {
            self.hidden_size
        }
    }

    pub fn projected_dim(&self) -> usize {
        self.post_concat_size.unwrap_or_else(|| self.first_half_dim())
    }

    /// Width of the encoder's final output frames.
    pub fn output_dim(&self) -> usize {
        if self.adaptation != Adaptation::None && self.insertion_layer == self.num_layers {
            self.projected_dim()
        } else {
            self.hidden_size
        }
    }
}

/// One bidirectional recurrent layer followed by a linear projection back to
/// `hidden_size`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub forward: GatedCell,
    pub backward: GatedCell,
    pub projection: Linear,
}

impl EncoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        EncoderLayer {
            forward: GatedCell::new(store, &format!("{name}.fwd"), in_dim, hidden, rng),
            backward: GatedCell::new(store, &format!("{name}.bwd"), in_dim, hidden, rng),
            projection: Linear::new(store, &format!("{name}.proj"), 2 * hidden, hidden, rng),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let f = self.forward.bind(g, store);
        let b = self.backward.bind(g, store);
        let both = bidirectional(g, x, &f, &b)?;
        self.projection.bind(g, store).apply(g, both)
    }

    fn num_values(&self) -> usize {
        self.forward.num_values() + self.backward.num_values() + self.projection.num_values()
    }
}

/// Speaker information supplied to the encoder for one utterance.
#[derive(Clone, Copy, Debug)]
pub enum AdaptInput<'a> {
    None,
    Memory(&'a SpeakerMemory),
    External(&'a [f64]),
}

/// Encoder output on a graph.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSequence {
    /// `T x output_dim` hidden frames.
    pub hidden: Var,
    /// `T x N` read weights, present for memory adaptation.
    pub per_frame_weights: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
    pub read_head: Option<ReadHead>,
    pub post_concat: Option<Linear>,
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: EncoderConfig,
        read_config: ReadHeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let adapted = config.adaptation != Adaptation::None;
        let mut layers = Vec::with_capacity(config.num_layers);
        let mut read_head = None;
        let mut post_concat = None;
        let mut in_dim = config.feature_dim;
        for i in 0..=config.num_layers {
            if adapted && i == config.insertion_layer {
                if config.adaptation == Adaptation::Memory {
                    read_head = Some(ReadHead::new(
                        store,
                        "adapt.read",
                        in_dim,
                        config.embedding_dim,
                        read_config,
                        rng,
                    )?);
                }
                let proj = Linear::new(
                    store,
                    "adapt.post",
                    in_dim + config.embedding_dim,
                    config.projected_dim(),
                    rng,
                );
                in_dim = proj.out_dim;
                post_concat = Some(proj);
            }
            if i < config.num_layers {
                layers.push(EncoderLayer::new(store, &format!("enc.{i}"), in_dim, config.hidden_size, rng));
                in_dim = config.hidden_size;
            }
        }
        Ok(Encoder {
            config,
            layers,
            read_head,
            post_concat,
        })
    }

    pub fn num_values(&self) -> usize {
        self.layers.iter().map(EncoderLayer::num_values).sum::<usize>()
            + self.read_head.as_ref().map_or(0, |h| h.query.num_values())
            + self.post_concat.as_ref().map_or(0, Linear::num_values)
    }

    pub fn check_input(&self, input: &AdaptInput<'_>) -> Result<()> {
        let d = self.config.embedding_dim;
        match (self.config.adaptation, input) {
            (Adaptation::None, AdaptInput::None) => Ok(()),
            (Adaptation::Memory, AdaptInput::Memory(m)) if m.dim() == d => Ok(()),
            (Adaptation::Memory, AdaptInput::Memory(m)) => Err(Error::Config(format!(
                "memory vectors have {} dims, encoder expects {d}",
                m.dim()
            ))),
            (Adaptation::External, AdaptInput::External(e)) if e.len() == d => Ok(()),
            (Adaptation::External, AdaptInput::External(e)) => Err(Error::Config(format!(
                "external embedding has {} dims, encoder expects {d}",
                e.len()
            ))),
            (kind, _) => Err(Error::Config(format!(
                "encoder built for {kind:?} adaptation received a different speaker input"
            ))),
        }
    }

    /// Runs the encoder on `features (T x F)`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, features: Var, input: AdaptInput<'_>) -> Result<EncodedSequence> {
        self.check_input(&input)?;
        let dims = g.value(features).shape().to_vec();
        if dims.len() != 2 || dims[1] != self.config.feature_dim || dims[0] == 0 {
            return Err(Error::dims("encode", &dims, &[0, self.config.feature_dim]));
        }
        let frames = dims[0];
        let split = match input {
            AdaptInput::None => self.layers.len(),
            _ => self.config.insertion_layer,
        };
        let mut x = features;
        for layer in &self.layers[..split] {
            x = layer.apply(g, store, x)?;
        }
        let mut per_frame_weights = None;
        let speaker = match input {
            AdaptInput::None => None,
            AdaptInput::Memory(memory) => {
                let head = self.read_head.as_ref().expect("memory encoder has a read head");
                let read = head.read_rows(g, store, x, memory)?;
                per_frame_weights = Some(read.weights);
                Some(read.read)
            }
            AdaptInput::External(embedding) => {
                let rows = Tensor::from_vec(
                    frames,
                    embedding.len(),
                    embedding.iter().copied().cycle().take(frames * embedding.len()).collect(),
                )?;
                Some(g.constant(rows))
            }
        };
        if let Some(r) = speaker {
            let post = self.post_concat.as_ref().expect("adapted encoder has a post projection");
            let joined = g.concat_cols(x, r)?;
            x = post.bind(g, store).apply(g, joined)?;
            for layer in &self.layers[split..] {
                x = layer.apply(g, store, x)?;
            }
        }
        Ok(EncodedSequence {
            hidden: x,
            per_frame_weights,
        })
    }

    /// Memory-adapted path: per-frame read from `memory` after the first half.
    pub fn encode_adapted(&self, g: &mut Graph, store: &ParamStore, features: Var, memory: &SpeakerMemory) -> Result<EncodedSequence> {
        self.encode(g, store, features, AdaptInput::Memory(memory))
    }

    /// Unadapted path: the plain stack of layers.
    pub fn encode_baseline(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<EncodedSequence> {
        self.encode(g, store, features, AdaptInput::None)
    }

    /// Fixed-embedding path: `embedding` is appended at every frame.
    pub fn encode_external(&self, g: &mut Graph, store: &ParamStore, features: Var, embedding: &[f64]) -> Result<EncodedSequence> {
        self.encode(g, store, features, AdaptInput::External(embedding))
    }
}
