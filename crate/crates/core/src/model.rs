//! Full recogniser: adaptive encoder, CTC head and attention decoder.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{collapse, ctc_loss_node};
use crate::decoder::{Decoder, DecoderConfig, Hypothesis};
use crate::encoder::{AdaptInput, Adaptation, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::memory::ReadHeadConfig;
use crate::nn::{Graph, Linear, ParamStore, Tensor, Var};
use crate::vocab::EOS;

/// Which speaker signal a model is trained and evaluated with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// No adaptation.
    None,
    /// Frame-level read from the training-speaker memory.
    Memory,
    /// Oracle per-speaker embedding repeated at every frame.
    ExternalSpeaker,
    /// Per-utterance embedding repeated at every frame.
    ExternalUtterance,
}

impl Variant {
    pub fn adaptation(self) -> Adaptation {
        match self {
            Variant::None => Adaptation::None,
            Variant::Memory => Adaptation::Memory,
            Variant::ExternalSpeaker | Variant::ExternalUtterance => Adaptation::External,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Memory => "memory",
            Variant::ExternalSpeaker => "external-speaker",
            Variant::ExternalUtterance => "external-utterance",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Variant::None),
            "memory" => Ok(Variant::Memory),
            "external" | "external-speaker" => Ok(Variant::ExternalSpeaker),
            "external-utterance" => Ok(Variant::ExternalUtterance),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub read_head: ReadHeadConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    /// Output units including blank, end-of-sentence and unknown.
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.read_head.validate()?;
        self.decoder.validate()?;
        if self.vocab_size <= EOS + 1 {
            return Err(Error::Config(format!("vocabulary of {} units is too small", self.vocab_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ctc: f64,
    pub attention: f64,
    pub joint: f64,
}

/// `lambda * ctc + (1 - lambda) * attention`.
pub fn joint_loss(ctc: f64, attention: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * ctc + (1.0 - lambda) * attention)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AsrModel {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    ctc_head: Linear,
    decoder: Decoder,
}

impl AsrModel {
    /// Builds a model with weights drawn from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, config.encoder.clone(), config.read_head, &mut rng)?;
        let enc_dim = config.encoder.output_dim();
        let ctc_head = Linear::new(&mut params, "ctc", enc_dim, config.vocab_size, &mut rng);
        let decoder = Decoder::new(&mut params, config.decoder.clone(), config.vocab_size, EOS, enc_dim, &mut rng)?;
        Ok(AsrModel {
            config,
            params,
            encoder,
            ctc_head,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn num_values(&self) -> usize {
        self.params.num_values()
    }

    /// Records the joint loss of one utterance on `g`.
    pub fn forward_loss(
        &self,
        g: &mut Graph,
        features: &Tensor,
        labels: &[usize],
        input: AdaptInput<'_>,
        lambda: f64,
    ) -> Result<(Var, LossBreakdown)> {
        check_lambda(lambda)?;
        let x = g.constant(features.clone());
        let enc = self.encoder.encode(g, &self.params, x, input)?;
        let logits = self.ctc_head.bind(g, &self.params).apply(g, enc.hidden)?;
        let ctc = ctc_loss_node(g, logits, labels)?;
        let bound = self.decoder.bind(g, &self.params, enc.hidden)?;
        let mut targets = labels.to_vec();
        targets.push(EOS);
        let att = bound.attention_loss(g, &targets)?;
        let a = g.scale(ctc, lambda)?;
        let b = g.scale(att, 1.0 - lambda)?;
        let joint = g.add(a, b)?;
        let parts = LossBreakdown {
            ctc: g.value(ctc).item(),
            attention: g.value(att).item(),
            joint: g.value(joint).item(),
        };
        Ok((joint, parts))
    }

    /// Joint loss without gradients.
    pub fn loss(&self, features: &Tensor, labels: &[usize], input: AdaptInput<'_>, lambda: f64) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        Ok(self.forward_loss(&mut g, features, labels, input, lambda)?.1)
    }

    /// Joint loss, adding `scale * d(loss)/d(params)` into the accumulators.
    pub fn accumulate_gradients(
        &mut self,
        features: &Tensor,
        labels: &[usize],
        input: AdaptInput<'_>,
        lambda: f64,
        scale: f64,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let (joint, parts) = self.forward_loss(&mut g, features, labels, input, lambda)?;
        let root = if scale == 1.0 { joint } else { g.scale(joint, scale)? };
        let grads = g.backward(root)?;
        g.accumulate(&grads, &mut self.params);
        Ok(parts)
    }

    /// Encoder output and, for memory models, the per-frame read weights.
    pub fn encode(&self, features: &Tensor, input: AdaptInput<'_>) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let enc = self.encoder.encode(&mut g, &self.params, x, input)?;
        Ok((
            g.value(enc.hidden).clone(),
            enc.per_frame_weights.map(|w| g.value(w).clone()),
        ))
    }

    /// Best path of the CTC head with repeats and blanks removed.
    pub fn ctc_greedy(&self, features: &Tensor, input: AdaptInput<'_>) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let enc = self.encoder.encode(&mut g, &self.params, x, input)?;
        let logits = self.ctc_head.bind(&mut g, &self.params).apply(&mut g, enc.hidden)?;
        let scores = g.value(logits);
        let path: Vec<usize> = (0..scores.rows())
            .map(|r| {
                let row = scores.row(r);
                (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect();
        Ok(collapse(&path))
    }

    /// Decodes one utterance; `beam == 1` is greedy.
    pub fn transcribe(&self, features: &Tensor, input: AdaptInput<'_>, beam: usize, max_len: usize) -> Result<Hypothesis> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let enc = self.encoder.encode(&mut g, &self.params, x, input)?;
        let bound = self.decoder.bind(&mut g, &self.params, enc.hidden)?;
        if beam == 1 {
            bound.greedy_decode(&mut g, max_len)
        } else {
            bound.beam_decode(&mut g, beam, max_len)
        }
    }
}
