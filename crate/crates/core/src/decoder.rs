//! Attention decoder with location-aware additive attention.
//!
//! Each step attends over the encoder frames using the previous decoder state
//! and convolutional features of the previous attention weights, updates a
//! gated recurrent cell on `[embed(prev token); context]` and predicts the
//! next token from `[state; context]`. The end-of-sentence token doubles as
//! the start symbol.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::log_softmax;
use crate::nn::{BoundCell, BoundLinear, GatedCell, Graph, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub hidden_size: usize,
    pub embed_size: usize,
    pub attention_dim: usize,
    pub location_channels: usize,
    pub location_width: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden_size: 32,
            embed_size: 16,
            attention_dim: 32,
            location_channels: 4,
            location_width: 9,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if [
            self.hidden_size,
            self.embed_size,
            self.attention_dim,
            self.location_channels,
            self.location_width,
        ]
        .contains(&0)
        {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.location_width % 2 == 0 {
            return Err(Error::Config("location filter width must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Attention {
    w_enc: ParamId,
    w_dec: ParamId,
    w_loc: ParamId,
    filter: ParamId,
    score: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub vocab_size: usize,
    pub eos: usize,
    pub enc_dim: usize,
    embed: ParamId,
    attention: Attention,
    cell: GatedCell,
    output: Linear,
}

/// Decoder parameters bound to a graph together with the projected encoder
/// frames of one utterance.
#[derive(Clone, Copy, Debug)]
pub struct BoundDecoder {
    enc: Var,
    enc_proj: Var,
    frames: usize,
    embed: Var,
    w_dec: Var,
    w_loc: Var,
    filter: Var,
    score: Var,
    bias: Var,
    cell: BoundCell,
    output: BoundLinear,
    vocab_size: usize,
    eos: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub hidden: Var,
    pub prev_token: usize,
    /// `1 x T` attention weights of the previous step.
    pub prev_weights: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens; ends with end-of-sentence when `terminated`.
    pub tokens: Vec<usize>,
    pub score: f64,
    pub terminated: bool,
}

impl Hypothesis {
    /// Tokens without the trailing end-of-sentence.
    pub fn transcript(&self) -> &[usize] {
        if self.terminated {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

impl Decoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: DecoderConfig,
        vocab_size: usize,
        eos: usize,
        enc_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if eos >= vocab_size {
            return Err(Error::Config(format!("eos index {eos} outside vocabulary of {vocab_size}")));
        }
        let a = config.attention_dim;
        let attention = Attention {
            w_enc: store.add_uniform("dec.att.w_enc", enc_dim, a, rng),
            w_dec: store.add_uniform("dec.att.w_dec", config.hidden_size, a, rng),
            w_loc: store.add_uniform("dec.att.w_loc", config.location_channels, a, rng),
            filter: store.add_uniform("dec.att.filter", config.location_channels, config.location_width, rng),
            score: store.add_uniform("dec.att.score", a, 1, rng),
            bias: store.add_zeros("dec.att.b", 1, a),
        };
        let embed = store.add_uniform("dec.embed", vocab_size, config.embed_size, rng);
        let cell = GatedCell::new(store, "dec.cell", config.embed_size + enc_dim, config.hidden_size, rng);
        let output = Linear::new(store, "dec.out", config.hidden_size + enc_dim, vocab_size, rng);
        Ok(Decoder {
            config,
            vocab_size,
            eos,
            enc_dim,
            embed,
            attention,
            cell,
            output,
        })
    }

    pub fn num_values(&self) -> usize {
        let c = &self.config;
        let a = c.attention_dim;
        self.enc_dim * a
            + c.hidden_size * a
            + c.location_channels * a
            + c.location_channels * c.location_width
            + a
            + a
            + self.vocab_size * c.embed_size
            + self.cell.num_values()
            + self.output.num_values()
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore, enc: Var) -> Result<BoundDecoder> {
        let shape = g.value(enc).shape().to_vec();
        if shape[1] != self.enc_dim || shape[0] == 0 {
            return Err(Error::dims("decoder", &shape, &[0, self.enc_dim]));
        }
        let w_enc = g.param(store, self.attention.w_enc);
        let enc_proj = g.matmul(enc, w_enc)?;
        Ok(BoundDecoder {
            enc,
            enc_proj,
            frames: shape[0],
            embed: g.param(store, self.embed),
            w_dec: g.param(store, self.attention.w_dec),
            w_loc: g.param(store, self.attention.w_loc),
            filter: g.param(store, self.attention.filter),
            score: g.param(store, self.attention.score),
            bias: g.param(store, self.attention.bias),
            cell: self.cell.bind(g, store),
            output: self.output.bind(g, store),
            vocab_size: self.vocab_size,
            eos: self.eos,
        })
    }
}

impl BoundDecoder {
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Zero hidden state, start symbol, uniform previous attention.
    pub fn initial_state(&self, g: &mut Graph) -> DecoderState {
        let hidden = self.cell.zero_state(g);
        let prev_weights = g.constant(Tensor::filled(1, self.frames, 1.0 / self.frames as f64));
        DecoderState {
            hidden,
            prev_token: self.eos,
            prev_weights,
        }
    }

    /// Attention context (`1 x enc_dim`) and weights (`1 x T`).
    pub fn attend(&self, g: &mut Graph, state: &DecoderState) -> Result<(Var, Var)> {
        let loc = g.location_conv(state.prev_weights, self.filter)?;
        let loc_proj = g.matmul(loc, self.w_loc)?;
        let dec_proj = g.matmul(state.hidden, self.w_dec)?;
        let dec_row = g.add(dec_proj, self.bias)?;
        let combined = g.add(self.enc_proj, loc_proj)?;
        let pre = g.add_row(combined, dec_row)?;
        let act = g.tanh(pre)?;
        let scores = g.matmul(act, self.score)?;
        let scores_row = g.transpose(scores)?;
        let weights = g.softmax_rows(scores_row)?;
        let context = g.matmul(weights, self.enc)?;
        Ok((context, weights))
    }

    /// Cell update and output logits (`1 x V`) given an attention context.
    /// The returned state still carries `prev_token` of the input state; the
    /// caller sets the token it commits to.
    pub fn decode_step(&self, g: &mut Graph, state: &DecoderState, context: Var, weights: Var) -> Result<(Var, DecoderState)> {
        if state.prev_token >= self.vocab_size {
            return Err(Error::Invalid(format!(
                "token {} outside vocabulary of {}",
                state.prev_token, self.vocab_size
            )));
        }
        let emb = g.row(self.embed, state.prev_token)?;
        let input = g.concat_cols(emb, context)?;
        let hidden = self.cell.step(g, input, state.hidden)?;
        let out_in = g.concat_cols(hidden, context)?;
        let logits = self.output.apply(g, out_in)?;
        Ok((
            logits,
            DecoderState {
                hidden,
                prev_token: state.prev_token,
                prev_weights: weights,
            },
        ))
    }

    /// Attend then step; returns logits and the next state.
    pub fn step(&self, g: &mut Graph, state: &DecoderState) -> Result<(Var, DecoderState)> {
        let (context, weights) = self.attend(g, state)?;
        self.decode_step(g, state, context, weights)
    }

    /// Teacher-forced `-sum_u ln P(y_u | x, y_<u)`; `targets` must end with
    /// end-of-sentence.
    pub fn attention_loss(&self, g: &mut Graph, targets: &[usize]) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Invalid("attention targets must be non-empty".into()));
        }
        if targets.last() != Some(&self.eos) {
            return Err(Error::Invalid("attention targets must end with end-of-sentence".into()));
        }
        let mut state = self.initial_state(g);
        let mut rows = Vec::with_capacity(targets.len());
        for &y in targets {
            let (logits, mut next) = self.step(g, &state)?;
            rows.push(logits);
            next.prev_token = y;
            state = next;
        }
        let stacked = g.stack_rows(&rows)?;
        g.cross_entropy_rows(stacked, targets)
    }

    fn log_probs(&self, g: &Graph, logits: Var) -> Vec<f64> {
        log_softmax(g.value(logits).data())
    }

    /// Arg-max decoding until end-of-sentence or `max_len` tokens.
    pub fn greedy_decode(&self, g: &mut Graph, max_len: usize) -> Result<Hypothesis> {
        let mut state = self.initial_state(g);
        let mut hyp = Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            terminated: false,
        };
        for _ in 0..max_len {
            let (logits, mut next) = self.step(g, &state)?;
            let lp = self.log_probs(g, logits);
            let best = argmax(&lp);
            hyp.tokens.push(best);
            hyp.score += lp[best];
            if best == self.eos {
                hyp.terminated = true;
                break;
            }
            next.prev_token = best;
            state = next;
        }
        Ok(hyp)
    }

    /// Beam search over attention scores. Candidates are hypotheses ending in
    /// end-of-sentence within `max_len` tokens, or unterminated ones of exactly
    /// `max_len` tokens. The greedy hypothesis is always among the candidates,
    /// so the result never scores below it.
    pub fn beam_decode(&self, g: &mut Graph, beam: usize, max_len: usize) -> Result<Hypothesis> {
        if beam == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        let greedy = self.greedy_decode(g, max_len)?;
        if beam == 1 {
            return Ok(greedy);
        }
        let mut alive = vec![(
            Hypothesis {
                tokens: Vec::new(),
                score: 0.0,
                terminated: false,
            },
            self.initial_state(g),
        )];
        let mut finished: Vec<Hypothesis> = Vec::new();
        for step in 1..=max_len {
            let mut expansions: Vec<(f64, usize, usize)> = Vec::new();
            let mut next_states = Vec::with_capacity(alive.len());
            for (i, (hyp, state)) in alive.iter().enumerate() {
                let (logits, next) = self.step(g, state)?;
                let lp = self.log_probs(g, logits);
                for (tok, l) in lp.iter().enumerate() {
                    expansions.push((hyp.score + l, i, tok));
                }
                next_states.push(next);
            }
            // stable: ties keep (hypothesis, token) order, matching greedy's first-max rule
            expansions.sort_by(|a, b| b.0.total_cmp(&a.0));
            expansions.truncate(beam);
            let mut next_alive = Vec::with_capacity(beam);
            for (score, i, tok) in expansions {
                let mut tokens = alive[i].0.tokens.clone();
                tokens.push(tok);
                let terminated = tok == self.eos;
                let hyp = Hypothesis {
                    tokens,
                    score,
                    terminated,
                };
                if terminated || step == max_len {
                    finished.push(hyp);
                } else {
                    let mut st = next_states[i];
                    st.prev_token = tok;
                    next_alive.push((hyp, st));
                }
            }
            alive = next_alive;
            if alive.is_empty() {
                break;
            }
        }
        let mut best = greedy;
        for hyp in finished {
            if hyp.score > best.score {
                best = hyp;
            }
        }
        Ok(best)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
