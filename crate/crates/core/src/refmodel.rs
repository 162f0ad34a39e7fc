//! A small differentiable next-token model used to exercise attribution.
//!
//! The model pools the last `window` input embeddings with one learned
//! weight per position (index 0 is the most recent token) and feeds the
//! pooled vector through a linear softmax head:
//!
//! ```text
//! h      = sum_k w[dist(k)] * E[x_k]
//! logits = h . O + bias
//! p      = softmax(logits)
//! ```
//!
//! Everything is `f64`, and gradients are derived by hand so they can be
//! checked against finite differences.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::Severity;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("training example {0} has no unmasked token with a non-empty context")]
    NoTarget(usize),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const LABEL_MINOR: &str = "<minor>";
pub const LABEL_SEVERE: &str = "<severe>";
const SPECIALS: [&str; 5] = [BOS, EOS, UNK, LABEL_MINOR, LABEL_SEVERE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Word,
    Subword,
}

/// A token with its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits text into alphanumeric runs and single punctuation characters.
fn pre_tokenize(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut run: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            run.get_or_insert(i);
            continue;
        }
        if let Some(s) = run.take() {
            out.push((s, i));
        }
        if !ch.is_whitespace() {
            out.push((i, i + ch.len_utf8()));
        }
    }
    if let Some(s) = run {
        out.push((s, text.len()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub mode: TokenizerMode,
    /// Token strings by id; the first five are the special tokens.
    pub tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    pub fn from_tokens(mode: TokenizerMode, tokens: Vec<String>) -> Result<Self, ModelError> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(ModelError::Checkpoint(
                "vocabulary must start with the special tokens".into(),
            ));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self {
            mode,
            tokens,
            index,
        })
    }

    /// Builds a vocabulary from a corpus. Pieces seen fewer than `min_count`
    /// times are dropped; in subword mode every character seen stays
    /// available as a word-initial and a `##` continuation piece.
    pub fn fit<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        mode: TokenizerMode,
        min_count: usize,
    ) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars: BTreeMap<String, ()> = BTreeMap::new();
        for text in texts {
            for (s, e) in pre_tokenize(text) {
                let piece = &text[s..e];
                *counts.entry(piece.to_string()).or_default() += 1;
                if mode == TokenizerMode::Subword {
                    for (k, ch) in piece.chars().enumerate() {
                        let p = if k == 0 {
                            ch.to_string()
                        } else {
                            format!("##{ch}")
                        };
                        chars.insert(p, ());
                    }
                }
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for (t, _) in kept {
            if seen.insert(t.clone()) {
                tokens.push(t);
            }
        }
        for (c, _) in chars {
            if seen.insert(c.clone()) {
                tokens.push(c);
            }
        }
        Self::from_tokens(mode, tokens).expect("specials first")
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    fn special(&self, token: &str) -> u32 {
        self.index[token]
    }

    pub fn bos(&self) -> u32 {
        self.special(BOS)
    }

    pub fn eos(&self) -> u32 {
        self.special(EOS)
    }

    pub fn unk(&self) -> u32 {
        self.special(UNK)
    }

    /// Label token followed by end-of-sequence.
    pub fn label_tokens(&self, label: Severity) -> Vec<u32> {
        let t = match label {
            Severity::NoApparentOrMinor => LABEL_MINOR,
            Severity::SeriousOrFatal => LABEL_SEVERE,
        };
        vec![self.special(t), self.eos()]
    }

    pub fn encode(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        for (s, e) in pre_tokenize(text) {
            let piece = &text[s..e];
            match self.mode {
                TokenizerMode::Word => out.push(Token {
                    id: self.id(piece).unwrap_or_else(|| self.unk()),
                    text: piece.to_string(),
                    start: s,
                    end: e,
                }),
                TokenizerMode::Subword => self.split_word(piece, s, &mut out),
            }
        }
        out
    }

    pub fn encode_ids(&self, text: &str) -> Vec<u32> {
        self.encode(text).into_iter().map(|t| t.id).collect()
    }

    /// Greedy longest-match split into vocabulary pieces, UNK per unknown char.
    fn split_word(&self, word: &str, offset: usize, out: &mut Vec<Token>) {
        if let Some(id) = self.id(word) {
            out.push(Token {
                id,
                text: word.to_string(),
                start: offset,
                end: offset + word.len(),
            });
            return;
        }
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let mut i = 0;
        while i + 1 < bounds.len() {
            let start = bounds[i];
            let mut matched = None;
            for j in (i + 1..bounds.len()).rev() {
                let sub = &word[start..bounds[j]];
                let key = if start == 0 {
                    sub.to_string()
                } else {
                    format!("##{sub}")
                };
                if let Some(id) = self.id(&key) {
                    matched = Some((j, id));
                    break;
                }
            }
            let (j, id) = matched.unwrap_or((i + 1, self.unk()));
            out.push(Token {
                id,
                text: word[start..bounds[j]].to_string(),
                start: offset + start,
                end: offset + bounds[j],
            });
            i = j;
        }
    }

    /// Joins tokens with single spaces; `##` pieces attach to the previous one.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let t = self.tokens.get(id as usize).map_or(UNK, |s| s.as_str());
            match t.strip_prefix("##") {
                Some(rest) if self.mode == TokenizerMode::Subword => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(t);
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        crate::io::write_atomic(path, &json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let raw: Tokenizer = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Self::from_tokens(raw.mode, raw.tokens)
    }
}

/// Which scalar of the output distribution is differentiated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Post-softmax probability of the target.
    #[default]
    Prob,
    /// Pre-softmax logit of the target.
    Logit,
}

/// Capabilities attribution needs from a model.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    /// Probability of `target` following `context`.
    fn prob(&self, context: &[u32], target: u32) -> f64;
    /// Objective value (probability or logit) of `target` after `context`.
    fn objective(&self, context: &[u32], target: u32, objective: Objective) -> f64;
    fn embedding(&self, token: u32) -> &[f64];
    /// Gradient of the objective with respect to the embedding occupying
    /// each context position; zero for positions the model cannot see.
    fn grad_wrt_embeddings(
        &self,
        context: &[u32],
        target: u32,
        objective: Objective,
    ) -> Vec<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub dim: usize,
    pub window: usize,
    pub vocab_size: usize,
}

impl ModelShape {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            dim: 32,
            window: 16,
            vocab_size,
        }
    }
}

const CHECKPOINT_FORMAT: &str = "crashlens-tinylm";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyLM {
    pub dim: usize,
    pub window: usize,
    pub vocab_size: usize,
    /// `vocab_size x dim`, row-major.
    pub embeddings: Vec<f64>,
    /// One weight per window position; index 0 is the most recent token.
    pub position_weights: Vec<f64>,
    /// `dim x vocab_size`, row-major.
    pub output: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: TinyLM,
}

/// Cached forward pass over one context.
struct Forward {
    /// (context index, distance from the end) for each visible token.
    slots: Vec<(usize, usize)>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl TinyLM {
    /// Embeddings and output weights ~ U(-0.05, 0.05); position weights
    /// start at `1 / window`; bias starts at zero.
    pub fn new(shape: &ModelShape, seed: u64) -> Self {
        Self::with_init_scale(shape, seed, 0.05)
    }

    pub fn with_init_scale(shape: &ModelShape, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
        };
        let embeddings = draw(shape.vocab_size * shape.dim);
        let output = draw(shape.dim * shape.vocab_size);
        Self {
            dim: shape.dim,
            window: shape.window,
            vocab_size: shape.vocab_size,
            embeddings,
            position_weights: vec![1.0 / shape.window as f64; shape.window],
            output,
            bias: vec![0.0; shape.vocab_size],
        }
    }

    pub fn param_count(&self) -> usize {
        self.embeddings.len() + self.position_weights.len() + self.output.len() + self.bias.len()
    }

    pub fn all_finite(&self) -> bool {
        self.embeddings
            .iter()
            .chain(&self.position_weights)
            .chain(&self.output)
            .chain(&self.bias)
            .all(|x| x.is_finite())
    }

    fn row(&self, token: u32) -> &[f64] {
        let t = token as usize;
        &self.embeddings[t * self.dim..(t + 1) * self.dim]
    }

    /// Visible context positions with their distance from the end.
    fn visible(&self, len: usize) -> Vec<(usize, usize)> {
        let start = len.saturating_sub(self.window);
        (start..len).map(|k| (k, len - 1 - k)).collect()
    }

    fn head(&self, hidden: &[f64]) -> Vec<f64> {
        let v = self.vocab_size;
        let mut logits = self.bias.clone();
        for (k, &h) in hidden.iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            let row = &self.output[k * v..(k + 1) * v];
            for (z, &o) in logits.iter_mut().zip(row) {
                *z += h * o;
            }
        }
        logits
    }

    fn forward(&self, context: &[u32]) -> Forward {
        let slots = self.visible(context.len());
        let mut hidden = vec![0.0; self.dim];
        for &(k, d) in &slots {
            let w = self.position_weights[d];
            for (h, &e) in hidden.iter_mut().zip(self.row(context[k])) {
                *h += w * e;
            }
        }
        let logits = self.head(&hidden);
        let probs = softmax(&logits);
        Forward {
            slots,
            hidden,
            logits,
            probs,
        }
    }

    /// Full next-token distribution after `context`.
    pub fn distribution(&self, context: &[u32]) -> Vec<f64> {
        self.forward(context).probs
    }

    /// Forward pass from explicit per-position embedding vectors, one per
    /// context position. Used to check gradients by finite differences.
    pub fn objective_from_slots(&self, slots: &[Vec<f64>], target: u32, objective: Objective) -> f64 {
        let mut hidden = vec![0.0; self.dim];
        for (k, d) in self.visible(slots.len()) {
            let w = self.position_weights[d];
            for (h, &e) in hidden.iter_mut().zip(&slots[k]) {
                *h += w * e;
            }
        }
        let logits = self.head(&hidden);
        match objective {
            Objective::Logit => logits[target as usize],
            Objective::Prob => softmax(&logits)[target as usize],
        }
    }

    /// Gradient of the objective with respect to the pooled hidden vector.
    fn hidden_grad(&self, f: &Forward, target: u32, objective: Objective) -> Vec<f64> {
        let v = self.vocab_size;
        let t = target as usize;
        (0..self.dim)
            .map(|k| {
                let row = &self.output[k * v..(k + 1) * v];
                match objective {
                    Objective::Logit => row[t],
                    Objective::Prob => {
                        let expected: f64 = row.iter().zip(&f.probs).map(|(o, p)| o * p).sum();
                        f.probs[t] * (row[t] - expected)
                    }
                }
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        let json = serde_json::to_vec(&ck).map_err(std::io::Error::other)?;
        crate::io::write_atomic(path, &json)?;
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ModelError> {
        let ck: Checkpoint =
            serde_json::from_slice(bytes).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let m = ck.model;
        let ok = m.embeddings.len() == m.vocab_size * m.dim
            && m.output.len() == m.dim * m.vocab_size
            && m.bias.len() == m.vocab_size
            && m.position_weights.len() == m.window;
        if !ok {
            return Err(ModelError::Checkpoint("parameter shapes disagree".into()));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read(path)?)
    }
}

impl NextTokenModel for TinyLM {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn prob(&self, context: &[u32], target: u32) -> f64 {
        self.forward(context).probs[target as usize]
    }

    fn objective(&self, context: &[u32], target: u32, objective: Objective) -> f64 {
        let f = self.forward(context);
        match objective {
            Objective::Prob => f.probs[target as usize],
            Objective::Logit => f.logits[target as usize],
        }
    }

    fn embedding(&self, token: u32) -> &[f64] {
        self.row(token)
    }

    fn grad_wrt_embeddings(
        &self,
        context: &[u32],
        target: u32,
        objective: Objective,
    ) -> Vec<Vec<f64>> {
        let f = self.forward(context);
        let dh = self.hidden_grad(&f, target, objective);
        let mut out = vec![vec![0.0; self.dim]; context.len()];
        for &(k, d) in &f.slots {
            let w = self.position_weights[d];
            out[k] = dh.iter().map(|g| w * g).collect();
        }
        out
    }
}

/// A token sequence with a per-token loss mask (true = contributes to loss).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl TrainingExample {
    /// `prompt` tokens masked out, `response` tokens trained on.
    pub fn prompt_response(prompt: &[u32], response: &[u32]) -> Self {
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(response);
        let mut loss_mask = vec![false; prompt.len()];
        loss_mask.extend(std::iter::repeat(true).take(response.len()));
        Self { tokens, loss_mask }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the penalty on squared differences between adjacent
    /// position weights. Keeps the pooling smooth in distance so deleting
    /// a token and zeroing it have similar effects.
    pub position_smoothing: f64,
    /// Model shape used by [`fit_reference`].
    pub dim: usize,
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 200,
            seed: 7,
            position_smoothing: 10.0,
            dim: 32,
            window: 16,
        }
    }
}

/// Adds `lambda * sum_d (w[d+1] - w[d])^2` to the loss and gradient.
fn smoothness_penalty(weights: &[f64], grad: &mut [f64], lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let mut penalty = 0.0;
    for d in 0..weights.len().saturating_sub(1) {
        let diff = weights[d + 1] - weights[d];
        penalty += diff * diff;
        grad[d + 1] += 2.0 * lambda * diff;
        grad[d] -= 2.0 * lambda * diff;
    }
    lambda * penalty
}

struct Grads {
    embeddings: Vec<f64>,
    position_weights: Vec<f64>,
    output: Vec<f64>,
    bias: Vec<f64>,
}

impl Grads {
    fn zeros(m: &TinyLM) -> Self {
        Self {
            embeddings: vec![0.0; m.embeddings.len()],
            position_weights: vec![0.0; m.position_weights.len()],
            output: vec![0.0; m.output.len()],
            bias: vec![0.0; m.bias.len()],
        }
    }
}

/// Mean masked negative log-likelihood and its gradient over the batch.
fn loss_and_grads(m: &TinyLM, examples: &[TrainingExample]) -> (f64, Grads, usize) {
    let mut g = Grads::zeros(m);
    let mut loss = 0.0;
    let mut count = 0usize;
    let v = m.vocab_size;
    for ex in examples {
        for j in 1..ex.tokens.len() {
            if !ex.loss_mask[j] {
                continue;
            }
            let context = &ex.tokens[..j];
            let target = ex.tokens[j] as usize;
            let f = m.forward(context);
            loss -= f.probs[target].max(f64::MIN_POSITIVE).ln();
            count += 1;
            // d(-log p_t)/dz = p - onehot(t)
            let mut dz = f.probs.clone();
            dz[target] -= 1.0;
            for (b, d) in g.bias.iter_mut().zip(&dz) {
                *b += d;
            }
            let mut dh = vec![0.0; m.dim];
            for k in 0..m.dim {
                let orow = &m.output[k * v..(k + 1) * v];
                let grow = &mut g.output[k * v..(k + 1) * v];
                let hk = f.hidden[k];
                let mut acc = 0.0;
                for ((go, &o), &d) in grow.iter_mut().zip(orow).zip(&dz) {
                    *go += hk * d;
                    acc += o * d;
                }
                dh[k] = acc;
            }
            for &(k, d) in &f.slots {
                let tok = context[k] as usize;
                let w = m.position_weights[d];
                let erow = &m.embeddings[tok * m.dim..(tok + 1) * m.dim];
                let grow = &mut g.embeddings[tok * m.dim..(tok + 1) * m.dim];
                let mut dot = 0.0;
                for ((ge, &e), &gh) in grow.iter_mut().zip(erow).zip(&dh) {
                    *ge += w * gh;
                    dot += e * gh;
                }
                g.position_weights[d] += dot;
            }
        }
    }
    if count > 0 {
        let scale = 1.0 / count as f64;
        loss *= scale;
        for x in g
            .embeddings
            .iter_mut()
            .chain(&mut g.position_weights)
            .chain(&mut g.output)
            .chain(&mut g.bias)
        {
            *x *= scale;
        }
    }
    (loss, g, count)
}

/// Mean masked negative log-likelihood of `examples` under `model`.
pub fn masked_nll(model: &TinyLM, examples: &[TrainingExample]) -> f64 {
    loss_and_grads(model, examples).0
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step<'a>(
        &mut self,
        lr: f64,
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = &'a f64>,
    ) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, &g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss before each epoch's update, plus the final loss.
    pub losses: Vec<f64>,
}

/// Maximizes the masked log-likelihood with full-batch Adam.
///
/// Masked positions contribute neither loss nor gradient. The update order is
/// fixed, so results depend only on the initial parameters.
pub fn train(
    mut model: TinyLM,
    examples: &[TrainingExample],
    config: &TrainConfig,
) -> Result<(TinyLM, TrainReport), ModelError> {
    for ex in examples {
        for &t in &ex.tokens {
            if t as usize >= model.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id: t,
                    size: model.vocab_size,
                });
            }
        }
    }
    let mut adam = Adam::new(model.param_count());
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let (mut loss, mut g, count) = loss_and_grads(&model, examples);
        if count > 0 {
            loss += smoothness_penalty(&model.position_weights, &mut g.position_weights, config.position_smoothing);
        }
        if !loss.is_finite() {
            return Err(ModelError::Diverged { epoch, loss });
        }
        losses.push(loss);
        if count == 0 {
            continue;
        }
        let TinyLM {
            embeddings,
            position_weights,
            output,
            bias,
            ..
        } = &mut model;
        let params = embeddings
            .iter_mut()
            .chain(position_weights.iter_mut())
            .chain(output.iter_mut())
            .chain(bias.iter_mut());
        let grads = g
            .embeddings
            .iter()
            .chain(&g.position_weights)
            .chain(&g.output)
            .chain(&g.bias);
        adam.step(config.lr, params, grads);
        if !model.all_finite() {
            return Err(ModelError::Diverged {
                epoch,
                loss: f64::NAN,
            });
        }
    }
    let mut scratch = vec![0.0; model.window];
    let final_loss = masked_nll(&model, examples)
        + smoothness_penalty(&model.position_weights, &mut scratch, config.position_smoothing);
    if !final_loss.is_finite() {
        return Err(ModelError::Diverged {
            epoch: config.epochs,
            loss: final_loss,
        });
    }
    losses.push(final_loss);
    Ok((model, TrainReport { losses }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: Severity,
    /// Total log-probability of each label sequence, indexed by `Severity::index`.
    pub log_probs: [f64; 2],
    pub tie: bool,
}

/// Log-probability of `continuation` appended to `prompt`.
pub fn sequence_log_prob(model: &impl NextTokenModel, prompt: &[u32], continuation: &[u32]) -> f64 {
    let mut ctx = prompt.to_vec();
    let mut total = 0.0;
    for &t in continuation {
        total += model.prob(&ctx, t).ln();
        ctx.push(t);
    }
    total
}

/// Prompt tokens for a narrative: BOS followed by the encoded text.
pub fn prompt_ids(tokenizer: &Tokenizer, narrative: &str) -> Vec<u32> {
    let mut ids = vec![tokenizer.bos()];
    ids.extend(tokenizer.encode_ids(narrative));
    ids
}

/// Greedy decoding restricted to the two label sequences; exact ties go to
/// `NoApparentOrMinor` with `tie` set.
pub fn classify(model: &impl NextTokenModel, tokenizer: &Tokenizer, narrative: &str) -> Classification {
    let prompt = prompt_ids(tokenizer, narrative);
    let log_probs = Severity::ALL.map(|s| sequence_log_prob(model, &prompt, &tokenizer.label_tokens(s)));
    let tie = log_probs[0] == log_probs[1];
    let label = if log_probs[1] > log_probs[0] {
        Severity::SeriousOrFatal
    } else {
        Severity::NoApparentOrMinor
    };
    Classification {
        label,
        log_probs,
        tie,
    }
}

/// Builds a word vocabulary over `labelled` narratives and trains a fresh
/// model to emit each narrative's label sequence.
pub fn fit_reference(
    labelled: &[(String, Severity)],
    mode: TokenizerMode,
    config: &TrainConfig,
) -> Result<(Tokenizer, TinyLM, TrainReport), ModelError> {
    let tokenizer = Tokenizer::fit(labelled.iter().map(|(t, _)| t.as_str()), mode, 1);
    let examples: Vec<TrainingExample> = labelled
        .iter()
        .map(|(t, l)| TrainingExample::prompt_response(&prompt_ids(&tokenizer, t), &tokenizer.label_tokens(*l)))
        .collect();
    let shape = ModelShape {
        dim: config.dim,
        window: config.window,
        vocab_size: tokenizer.vocab_size(),
    };
    let model = TinyLM::new(&shape, config.seed);
    let (model, report) = train(model, &examples, config)?;
    Ok((tokenizer, model, report))
}
