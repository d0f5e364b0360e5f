//! Frozen speaker-embedding memory and its attention read head.
//!
//! The memory is a `D x N` matrix whose column `n` is the embedding of
//! training speaker `n`. A query `q` is compared against every column, the
//! similarities are sharpened by `gamma` and normalised with a softmax, and the
//! read vector is the resulting convex combination of columns.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, Graph, Linear, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerMemory {
    matrix: Tensor,
    speaker_ids: Vec<String>,
}

impl SpeakerMemory {
    /// Builds a memory from one embedding per speaker.
    pub fn new(speaker_ids: Vec<String>, columns: &[Vec<f64>]) -> Result<Self> {
        if speaker_ids.is_empty() {
            return Err(Error::Invalid("speaker memory needs at least one speaker".into()));
        }
        if speaker_ids.len() != columns.len() {
            return Err(Error::dims("speaker_memory", &[speaker_ids.len()], &[columns.len()]));
        }
        let dim = columns[0].len();
        if dim == 0 {
            return Err(Error::Invalid("speaker embeddings must be non-empty".into()));
        }
        let mut seen = HashSet::new();
        for (id, col) in speaker_ids.iter().zip(columns) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Invalid(format!("duplicate speaker id {id}")));
            }
            if col.len() != dim {
                return Err(Error::dims("speaker_memory", &[dim], &[col.len()]));
            }
            if col.iter().all(|v| *v == 0.0) {
                return Err(Error::Degenerate(format!("all-zero embedding for speaker {id}")));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("speaker embedding"));
            }
        }
        let n = columns.len();
        let mut matrix = Tensor::zeros(dim, n);
        for (j, col) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                matrix.set(i, j, *v);
            }
        }
        Ok(SpeakerMemory { matrix, speaker_ids })
    }

    /// Embedding dimension `D`.
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// Number of stored speakers `N`.
    pub fn len(&self) -> usize {
        self.matrix.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn speaker_ids(&self) -> &[String] {
        &self.speaker_ids
    }

    pub fn column(&self, n: usize) -> Vec<f64> {
        (0..self.dim()).map(|i| self.matrix.get(i, n)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.dim(), self.len());
        for (n, id) in self.speaker_ids.iter().enumerate() {
            out.push_str(id);
            for v in self.column(n) {
                write!(out, " {}", format_float(v)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, field: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            field,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| perr(1, 1, "missing `D N` header".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() != 2 {
            return Err(perr(1, head.len().min(2) + 1, "header must be `D N`".into()));
        }
        let dim: usize = head[0].parse().map_err(|e| perr(1, 1, format!("bad D: {e}")))?;
        let n: usize = head[1].parse().map_err(|e| perr(1, 2, format!("bad N: {e}")))?;
        if n == 0 {
            return Err(perr(1, 2, "memory must hold at least one speaker".into()));
        }
        let mut ids = Vec::with_capacity(n);
        let mut columns = Vec::with_capacity(n);
        for (idx, line) in lines {
            let lineno = idx + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != dim + 1 {
                return Err(perr(
                    lineno,
                    fields.len().min(dim + 1) + 1,
                    format!("expected speaker id and {dim} values, found {} fields", fields.len()),
                ));
            }
            if ids.iter().any(|id: &String| id == fields[0]) {
                return Err(perr(lineno, 1, format!("duplicate speaker id {}", fields[0])));
            }
            ids.push(fields[0].to_string());
            let col = fields[1..]
                .iter()
                .enumerate()
                .map(|(f, s)| s.parse::<f64>().map_err(|e| perr(lineno, f + 2, format!("bad value {s:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            columns.push(col);
        }
        if ids.len() != n {
            return Err(perr(1, 2, format!("header declares {n} speakers, file has {}", ids.len())));
        }
        SpeakerMemory::new(ids, &columns)
    }
}

/// Decimal representation with 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn save_memory(memory: &SpeakerMemory, path: &Path) -> Result<()> {
    std::fs::write(path, memory.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_memory(path: &Path) -> Result<SpeakerMemory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SpeakerMemory::from_text(&text, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    Cosine,
    ScaledDot,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReadHeadConfig {
    pub similarity: Similarity,
    pub gamma: f64,
}

impl Default for ReadHeadConfig {
    fn default() -> Self {
        ReadHeadConfig {
            similarity: Similarity::ScaledDot,
            gamma: 1.0,
        }
    }
}

impl ReadHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadResult {
    pub weights: Vec<f64>,
    pub read_vector: Vec<f64>,
}

pub fn cosine_similarity(q: &[f64], m: &[f64]) -> Result<f64> {
    if q.len() != m.len() {
        return Err(Error::dims("cosine_similarity", &[q.len()], &[m.len()]));
    }
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mn = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if qn == 0.0 || mn == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    let dot: f64 = q.iter().zip(m).map(|(a, b)| a * b).sum();
    Ok(dot / (qn * mn))
}

pub fn scaled_dot(q: &[f64], m: &[f64]) -> Result<f64> {
    if q.len() != m.len() || q.is_empty() {
        return Err(Error::dims("scaled_dot", &[q.len()], &[m.len()]));
    }
    let dot: f64 = q.iter().zip(m).map(|(a, b)| a * b).sum();
    Ok(dot / (q.len() as f64).sqrt())
}

pub fn similarities(q: &[f64], memory: &SpeakerMemory, config: &ReadHeadConfig) -> Result<Vec<f64>> {
    (0..memory.len())
        .map(|n| {
            let col = memory.column(n);
            match config.similarity {
                Similarity::Cosine => cosine_similarity(q, &col),
                Similarity::ScaledDot => scaled_dot(q, &col),
            }
        })
        .collect()
}

/// Softmax of `gamma * K(q, M_n)` over the memory items.
pub fn read_weights(q: &[f64], memory: &SpeakerMemory, config: &ReadHeadConfig) -> Result<Vec<f64>> {
    let sims = similarities(q, memory, config)?;
    weights_from_similarities(&sims, config.gamma)
}

pub fn weights_from_similarities(sims: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let sharpened: Vec<f64> = sims.iter().map(|k| gamma * k).collect();
    softmax(&sharpened)
}

/// `M w`: the weighted sum of memory columns.
pub fn read_vector(weights: &[f64], memory: &SpeakerMemory) -> Result<Vec<f64>> {
    if weights.len() != memory.len() {
        return Err(Error::dims("read_vector", &[weights.len()], &[memory.len()]));
    }
    let m = memory.matrix();
    Ok((0..memory.dim())
        .map(|i| weights.iter().enumerate().map(|(n, w)| w * m.get(i, n)).sum())
        .collect())
}

/// Read head: a linear query projection followed by an attention read.
#[derive(Clone, Debug)]
pub struct ReadHead {
    pub query: Linear,
    pub config: ReadHeadConfig,
}

/// Per-frame read weights (`T x N`) and read vectors (`T x D`) on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GraphRead {
    pub weights: Var,
    pub read: Var,
}

impl ReadHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        memory_dim: usize,
        config: ReadHeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        Ok(ReadHead {
            query: Linear::new(store, &format!("{name}.query"), in_dim, memory_dim, rng),
            config,
        })
    }

    pub fn memory_dim(&self) -> usize {
        self.query.out_dim
    }

    /// Reads for every row of `h (T x in)`; each row is an independent query.
    pub fn read_rows(&self, g: &mut Graph, store: &ParamStore, h: Var, memory: &SpeakerMemory) -> Result<GraphRead> {
        if memory.dim() != self.memory_dim() {
            return Err(Error::Config(format!(
                "query projection outputs {} dims but memory vectors have {}",
                self.memory_dim(),
                memory.dim()
            )));
        }
        let q = self.query.bind(g, store).apply(g, h)?;
        let sims = match self.config.similarity {
            Similarity::Cosine => g.cosine_rows(q, memory.matrix())?,
            Similarity::ScaledDot => {
                let m = g.constant(memory.matrix().clone());
                let dots = g.matmul(q, m)?;
                g.scale(dots, 1.0 / (memory.dim() as f64).sqrt())?
            }
        };
        let sharpened = g.scale(sims, self.config.gamma)?;
        let weights = g.softmax_rows(sharpened)?;
        let mt = g.constant(memory.matrix().transpose());
        let read = g.matmul(weights, mt)?;
        Ok(GraphRead { weights, read })
    }

    /// Single-query read.
    pub fn read(&self, store: &ParamStore, h: &[f64], memory: &SpeakerMemory) -> Result<ReadResult> {
        let mut g = Graph::new();
        let hv = g.constant(Tensor::row_vector(h.to_vec()));
        let out = self.read_rows(&mut g, store, hv, memory)?;
        Ok(ReadResult {
            weights: g.value(out.weights).data().to_vec(),
            read_vector: g.value(out.read).data().to_vec(),
        })
    }
}
