//! Token attribution: exact occlusion, its first-order Taylor
//! approximation, per-column integer normalization, and word-level
//! aggregation over a narrative.

use serde::{Deserialize, Serialize};

use crate::refmodel::{classify, prompt_ids, NextTokenModel, Objective, Tokenizer};
use crate::schema::Severity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Occlusion,
    Taylor,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "occlusion" => Ok(Method::Occlusion),
            "taylor" => Ok(Method::Taylor),
            other => Err(format!("unknown attribution method {other:?}")),
        }
    }
}

/// How a token is removed from the context when occluding it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Occluder {
    /// Delete the token; the sequence gets one shorter.
    #[default]
    Delete,
    /// Replace the token with the given id, keeping positions fixed.
    Substitute(u32),
}

/// Importance of each input row for each output column.
///
/// Rows cover the prompt followed by the response, so row `prompt_len + k`
/// is response token `k`. Entry `(n, m)` is zero whenever row `n` is not
/// part of the context that predicts output `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    pub method: Method,
    pub prompt_len: usize,
    pub inputs: Vec<u32>,
    pub outputs: Vec<u32>,
    /// `values[n][m]`
    pub values: Vec<Vec<f64>>,
}

impl ImportanceMatrix {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.outputs.len()
    }

    pub fn column(&self, m: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[m]).collect()
    }

    /// Number of rows visible when predicting output `m`.
    pub fn context_len(&self, m: usize) -> usize {
        self.prompt_len + m
    }
}

fn empty_matrix(method: Method, prompt: &[u32], response: &[u32]) -> ImportanceMatrix {
    let mut inputs = prompt.to_vec();
    inputs.extend_from_slice(response);
    ImportanceMatrix {
        method,
        prompt_len: prompt.len(),
        values: vec![vec![0.0; response.len()]; inputs.len()],
        inputs,
        outputs: response.to_vec(),
    }
}

/// `I[n][m] = p(y_m | Z_m) - p(y_m | Z_m without x_n)`.
pub fn occlusion_importance(
    model: &impl NextTokenModel,
    prompt: &[u32],
    response: &[u32],
    occluder: Occluder,
) -> ImportanceMatrix {
    let mut out = empty_matrix(Method::Occlusion, prompt, response);
    for (m, &y) in response.iter().enumerate() {
        let ctx = &out.inputs[..prompt.len() + m];
        let base = model.prob(ctx, y);
        let mut scratch = Vec::with_capacity(ctx.len());
        for n in 0..ctx.len() {
            scratch.clear();
            match occluder {
                Occluder::Delete => {
                    scratch.extend_from_slice(&ctx[..n]);
                    scratch.extend_from_slice(&ctx[n + 1..]);
                }
                Occluder::Substitute(id) => {
                    scratch.extend_from_slice(ctx);
                    scratch[n] = id;
                }
            }
            out.values[n][m] = base - model.prob(&scratch, y);
        }
    }
    out
}

/// `I[n][m] = <d f(y_m | Z_m) / d E[x_n], E[x_n]>`, one gradient pass per output.
pub fn taylor_importance(
    model: &impl NextTokenModel,
    prompt: &[u32],
    response: &[u32],
    objective: Objective,
) -> ImportanceMatrix {
    let mut out = empty_matrix(Method::Taylor, prompt, response);
    for (m, &y) in response.iter().enumerate() {
        let ctx = &out.inputs[..prompt.len() + m];
        let grads = model.grad_wrt_embeddings(ctx, y, objective);
        for (n, g) in grads.iter().enumerate() {
            let e = model.embedding(ctx[n]);
            out.values[n][m] = g.iter().zip(e).map(|(a, b)| a * b).sum();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationConfig {
    pub scale: u32,
    pub threshold: u32,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self {
            scale: 100,
            threshold: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub scale: u32,
    pub threshold: u32,
    /// `scores[n][m]`
    pub scores: Vec<Vec<u32>>,
}

impl ScoreMatrix {
    /// Highest score of row `n` across all outputs.
    pub fn row_max(&self, n: usize) -> u32 {
        self.scores[n].iter().copied().max().unwrap_or(0)
    }

    /// Nonzero entries as `(row, col, score)`, row-major.
    pub fn sparse(&self) -> Vec<(usize, usize, u32)> {
        let mut out = Vec::new();
        for (n, row) in self.scores.iter().enumerate() {
            for (m, &s) in row.iter().enumerate() {
                if s > 0 {
                    out.push((n, m, s));
                }
            }
        }
        out
    }
}

/// Per output column: `ceil(L * I / max_col)` when that exceeds `b`, else 0.
///
/// Columns whose maximum is not positive are all zero. The ceiling is capped
/// at `L` so floating-point rounding near the maximum cannot overshoot.
pub fn normalize_scores(matrix: &ImportanceMatrix, cfg: &NormalizationConfig) -> ScoreMatrix {
    let rows = matrix.rows();
    let cols = matrix.cols();
    let l = cfg.scale as f64;
    let mut scores = vec![vec![0u32; cols]; rows];
    for m in 0..cols {
        let max = matrix
            .values
            .iter()
            .map(|r| r[m])
            .fold(f64::NEG_INFINITY, f64::max);
        if !(max > 0.0) {
            continue;
        }
        for n in 0..rows {
            let c = (l * matrix.values[n][m] / max).ceil().min(l);
            if c > cfg.threshold as f64 {
                scores[n][m] = c as u32;
            }
        }
    }
    ScoreMatrix {
        scale: cfg.scale,
        threshold: cfg.threshold,
        scores,
    }
}

/// Maps integer scores onto the display range: `S / L * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplayConfig {
    pub scale: f64,
}

impl Default for DisplayConfig {
    fn default() -> Self {
        Self { scale: 5.0 }
    }
}

impl DisplayConfig {
    pub fn display(&self, score: u32, l: u32) -> f64 {
        score as f64 * self.scale / l as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordAttribution {
    pub word: String,
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub contributing_token_ids: Vec<u32>,
}

/// Whitespace-delimited words of `text` as byte spans.
pub fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s, i));
            }
        } else {
            start.get_or_insert(i);
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

/// Rolls token scores up to whitespace-delimited words.
///
/// `token_spans[i]` is the byte span of the token in row `row_offset + i`.
/// A word scores the maximum over its tokens and over all outputs.
pub fn aggregate_to_words(
    scores: &ScoreMatrix,
    token_spans: &[(u32, usize, usize)],
    row_offset: usize,
    narrative: &str,
    display: &DisplayConfig,
) -> Vec<WordAttribution> {
    let mut out = Vec::new();
    let mut t = 0;
    for (start, end) in word_spans(narrative) {
        while t < token_spans.len() && token_spans[t].2 <= start {
            t += 1;
        }
        let mut best = 0u32;
        let mut ids = Vec::new();
        let mut k = t;
        while k < token_spans.len() && token_spans[k].1 < end {
            let (id, _, _) = token_spans[k];
            ids.push(id);
            if let Some(row) = scores.scores.get(row_offset + k) {
                best = best.max(row.iter().copied().max().unwrap_or(0));
            }
            k += 1;
        }
        out.push(WordAttribution {
            word: narrative[start..end].to_string(),
            start,
            end,
            score: display.display(best, scores.scale),
            contributing_token_ids: ids,
        });
    }
    out
}

/// Appends `[x.xx]` to each listed word; everything else is copied verbatim.
pub fn annotate_narrative(narrative: &str, words: &[WordAttribution]) -> String {
    let mut sorted: Vec<&WordAttribution> = words.iter().collect();
    sorted.sort_by_key(|w| w.start);
    let mut out = String::with_capacity(narrative.len() + words.len() * 7);
    let mut pos = 0;
    for w in sorted {
        if w.end < pos || w.end > narrative.len() {
            continue;
        }
        out.push_str(&narrative[pos..w.end]);
        out.push_str(&format!("[{:.2}]", w.score));
        pos = w.end;
    }
    out.push_str(&narrative[pos..]);
    out
}

/// Words with a positive score, highest first; ties keep narrative order.
pub fn high_attribution(words: &[WordAttribution]) -> Vec<WordAttribution> {
    let mut out: Vec<WordAttribution> = words.iter().filter(|w| w.score > 0.0).cloned().collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.cmp(&b.start)));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenOut {
    pub id: u32,
    pub text: String,
    /// Byte span in the narrative; absent for special tokens.
    pub span: Option<(usize, usize)>,
}

/// Exported attribution for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub caseno: String,
    pub method: Method,
    #[serde(rename = "L")]
    pub scale: u32,
    pub b: u32,
    pub predicted: Severity,
    pub tokens: Vec<TokenOut>,
    pub outputs: Vec<TokenOut>,
    /// Nonzero entries as `[row, col, score]`.
    pub score_matrix: Vec<(usize, usize, u32)>,
    pub words: Vec<WordAttribution>,
    pub annotated: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub normalization: NormalizationConfig,
    pub display: DisplayConfig,
    pub objective: Objective,
    pub occluder: Occluder,
}

/// Explains the model's own label prediction for `narrative`.
pub fn attribute_narrative(
    model: &impl NextTokenModel,
    tokenizer: &Tokenizer,
    caseno: &str,
    narrative: &str,
    method: Method,
    cfg: &AttributionConfig,
) -> AttributionReport {
    let predicted = classify(model, tokenizer, narrative).label;
    let prompt = prompt_ids(tokenizer, narrative);
    let response = tokenizer.label_tokens(predicted);
    let matrix = match method {
        Method::Occlusion => occlusion_importance(model, &prompt, &response, cfg.occluder),
        Method::Taylor => taylor_importance(model, &prompt, &response, cfg.objective),
    };
    let scores = normalize_scores(&matrix, &cfg.normalization);
    let encoded = tokenizer.encode(narrative);
    let spans: Vec<(u32, usize, usize)> = encoded.iter().map(|t| (t.id, t.start, t.end)).collect();
    let words = aggregate_to_words(&scores, &spans, 1, narrative, &cfg.display);
    let special = |id: u32| TokenOut {
        id,
        text: tokenizer.tokens[id as usize].clone(),
        span: None,
    };
    let mut tokens = vec![special(tokenizer.bos())];
    tokens.extend(encoded.iter().map(|t| TokenOut {
        id: t.id,
        text: t.text.clone(),
        span: Some((t.start, t.end)),
    }));
    tokens.extend(response.iter().map(|&id| special(id)));
    AttributionReport {
        caseno: caseno.to_string(),
        method,
        scale: cfg.normalization.scale,
        b: cfg.normalization.threshold,
        predicted,
        tokens,
        outputs: response.iter().map(|&id| special(id)).collect(),
        score_matrix: scores.sparse(),
        annotated: annotate_narrative(narrative, &words),
        words,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(cols: Vec<Vec<f64>>) -> ImportanceMatrix {
        let rows = cols[0].len();
        ImportanceMatrix {
            method: Method::Taylor,
            prompt_len: rows,
            inputs: vec![0; rows],
            outputs: vec![0; cols.len()],
            values: (0..rows).map(|n| cols.iter().map(|c| c[n]).collect()).collect(),
        }
    }

    fn col(s: &ScoreMatrix, m: usize) -> Vec<u32> {
        s.scores.iter().map(|r| r[m]).collect()
    }

    #[test]
    fn normalization_examples() {
        let cfg = NormalizationConfig::default();
        let s = normalize_scores(&matrix(vec![vec![0.5, 0.25, 0.004]]), &cfg);
        assert_eq!(col(&s, 0), vec![100, 50, 0]);
        let s = normalize_scores(&matrix(vec![vec![-0.2, 0.4]]), &cfg);
        assert_eq!(col(&s, 0), vec![0, 100]);
        let s = normalize_scores(&matrix(vec![vec![-0.2, -0.4], vec![0.0, 0.0]]), &cfg);
        assert!(s.scores.iter().flatten().all(|&x| x == 0));
    }

    #[test]
    fn argmax_hits_scale_exactly() {
        let cfg = NormalizationConfig::default();
        for v in [0.1, 0.3, 1e-300, 7.123456789, 0.7] {
            let s = normalize_scores(&matrix(vec![vec![v, v / 3.0, v]]), &cfg);
            assert_eq!(col(&s, 0), vec![100, 34, 100]);
        }
    }

    #[test]
    fn word_aggregation_takes_max_over_pieces() {
        let text = "a hit-and-run incident.";
        let spans = vec![(1, 0, 1), (2, 2, 5), (3, 5, 6), (4, 6, 9), (3, 9, 10), (5, 10, 13), (6, 14, 22), (7, 22, 23)];
        let mut scores = ScoreMatrix {
            scale: 100,
            threshold: 1,
            scores: vec![vec![0, 0]; 9],
        };
        scores.scores[3] = vec![10, 2];
        scores.scores[5] = vec![5, 74];
        scores.scores[8] = vec![40, 0];
        let words = aggregate_to_words(&scores, &spans, 1, text, &DisplayConfig::default());
        let got: Vec<_> = words.iter().map(|w| (w.word.as_str(), w.score)).collect();
        assert_eq!(got, vec![("a", 0.0), ("hit-and-run", 3.7), ("incident.", 2.0)]);
        assert_eq!(words[1].contributing_token_ids, vec![2, 3, 4, 3, 5]);
        assert_eq!(annotate_narrative(text, &words), "a[0.00] hit-and-run[3.70] incident.[2.00]");
        assert_eq!(annotate_narrative(text, &[]), text);
    }

    #[test]
    fn annotation_matches_display_format() {
        let text = "On June 29, 2022,";
        let scores = [1.92, 1.96, 2.66, 4.28];
        let words: Vec<_> = word_spans(text)
            .into_iter()
            .zip(scores)
            .map(|((s, e), score)| WordAttribution {
                word: text[s..e].into(),
                start: s,
                end: e,
                score,
                contributing_token_ids: vec![],
            })
            .collect();
        assert_eq!(annotate_narrative(text, &words), "On[1.92] June[1.96] 29,[2.66] 2022,[4.28]");
        let top = high_attribution(&words);
        assert_eq!(top[0].word, "2022,");
    }
}
