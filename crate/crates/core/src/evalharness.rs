//! Prompting baselines, label parsing, classification metrics and the
//! loss-masked fine-tuning dataset.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{complete_with_retry, ChatClient, ChatRequest, RetryPolicy};
use crate::narrator::NarrativePair;
use crate::schema::Severity;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("few-shot prompting needs one exemplar per label")]
    MissingExemplars,
    #[error("no parsed predictions to score")]
    NoParsedPredictions,
    #[error("{predictions} predictions but {golds} gold labels")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("unknown strategy {0:?} (expected zs, zs-cot or fs)")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    ZeroShot,
    ZeroShotCot,
    FewShot,
}

impl FromStr for StrategyKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zs" => Ok(StrategyKind::ZeroShot),
            "zs-cot" => Ok(StrategyKind::ZeroShotCot),
            "fs" => Ok(StrategyKind::FewShot),
            other => Err(EvalError::UnknownStrategy(other.into())),
        }
    }
}

/// One narrative per label for few-shot prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplars {
    pub minor: String,
    pub severe: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptStrategy {
    pub kind: StrategyKind,
    pub exemplars: Option<Exemplars>,
}

impl PromptStrategy {
    pub fn zero_shot() -> Self {
        Self {
            kind: StrategyKind::ZeroShot,
            exemplars: None,
        }
    }

    pub fn zero_shot_cot() -> Self {
        Self {
            kind: StrategyKind::ZeroShotCot,
            exemplars: None,
        }
    }

    pub fn few_shot(exemplars: Exemplars) -> Self {
        Self {
            kind: StrategyKind::FewShot,
            exemplars: Some(exemplars),
        }
    }
}

pub const SYSTEM_PROMPT: &str = "You are a professional road safety engineer.";

const GIVEN: &str = "You are given a detailed description for a traffic crash.";
const ZS_TASK: &str = "Please classify the severity of the crash into one of two categories: 'No apparent or minor injury', 'Serious injury or fatal accident'.";
const COT_TASK: &str = "Please analyze this traffic crash with careful reasoning first, and then classify the severity of the crash into one of the two categories: 'No apparent or minor injury', 'Serious injury or fatal accident'.";
const FS_INTRO: &str = "Here are two examples of traffic crashes and their severity classification:";
const FS_TASK: &str = "Please classify the severity of the crash into one of two categories: 'No apparent or minor injury', 'Serious injury or fatal'.";
const ONLY_ONE: &str = "You can only output one of the classification result in your answer.";
const ONLY_ONE_END: &str = "You can only output one of the classification result at the end of your answer.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    /// System and user text as one block, separated by a blank line.
    pub fn render(&self) -> String {
        format!("{}\n\n{}", self.system, self.user)
    }
}

/// Paragraphs are joined by blank lines; the narrative comes last.
pub fn build_prompt(strategy: &PromptStrategy, narrative: &str) -> Result<Prompt, EvalError> {
    let parts: Vec<&str> = match strategy.kind {
        StrategyKind::ZeroShot => vec![GIVEN, ZS_TASK, ONLY_ONE, narrative],
        StrategyKind::ZeroShotCot => vec![GIVEN, COT_TASK, ONLY_ONE_END, narrative],
        StrategyKind::FewShot => {
            let ex = strategy.exemplars.as_ref().ok_or(EvalError::MissingExemplars)?;
            if ex.minor.trim().is_empty() || ex.severe.trim().is_empty() {
                return Err(EvalError::MissingExemplars);
            }
            vec![
                FS_INTRO,
                &ex.minor,
                Severity::NoApparentOrMinor.label(),
                &ex.severe,
                Severity::SeriousOrFatal.label(),
                GIVEN,
                FS_TASK,
                ONLY_ONE,
                narrative,
            ]
        }
    };
    Ok(Prompt {
        system: SYSTEM_PROMPT.into(),
        user: parts.join("\n\n"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Exact,
    Fuzzy,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub caseno: String,
    pub raw_output: String,
    pub label: Option<Severity>,
    pub parse_status: ParseStatus,
}

/// Lowercases and turns every non-alphanumeric run into one space.
fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    out.push(' ');
    let mut space = true;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            out.extend(ch.to_lowercase());
            space = false;
        } else if !space {
            out.push(' ');
            space = true;
        }
    }
    if !space {
        out.push(' ');
    }
    out
}

/// Positions of every whole-word occurrence of each phrase, tagged by label.
fn occurrences(norm: &str, phrases: &[(&str, Severity)]) -> Vec<(usize, Severity)> {
    let mut hits = Vec::new();
    for (phrase, label) in phrases {
        let needle = format!(" {phrase} ");
        let mut from = 0;
        while let Some(i) = norm[from..].find(&needle) {
            hits.push((from + i, *label));
            from += i + 1;
        }
    }
    hits.sort();
    hits
}

const EXACT: &[(&str, Severity)] = &[
    ("no apparent or minor injury", Severity::NoApparentOrMinor),
    ("serious injury or fatal", Severity::SeriousOrFatal),
];

const FUZZY: &[(&str, Severity)] = &[
    ("no apparent", Severity::NoApparentOrMinor),
    ("minor", Severity::NoApparentOrMinor),
    ("serious", Severity::SeriousOrFatal),
    ("fatal", Severity::SeriousOrFatal),
    ("severe", Severity::SeriousOrFatal),
];

/// Finds a label in free text. Chain-of-thought answers take the last
/// mention, others the first. Exact label strings beat keywords.
pub fn parse_label(raw: &str, kind: StrategyKind) -> (Option<Severity>, ParseStatus) {
    let norm = normalize(raw);
    let pick = |hits: Vec<(usize, Severity)>| match kind {
        StrategyKind::ZeroShotCot => hits.last().map(|h| h.1),
        _ => hits.first().map(|h| h.1),
    };
    if let Some(l) = pick(occurrences(&norm, EXACT)) {
        return (Some(l), ParseStatus::Exact);
    }
    if let Some(l) = pick(occurrences(&norm, FUZZY)) {
        return (Some(l), ParseStatus::Fuzzy);
    }
    (None, ParseStatus::Failed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_precision: f64,
    /// `confusion[gold][predicted]` over parsed predictions.
    pub confusion: [[u64; 2]; 2],
    /// Unparseable outputs by gold class.
    pub failed_by_gold: [u64; 2],
    pub n_failed_parses: u64,
    pub per_class: [ClassMetrics; 2],
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics from counts. A failed parse is a miss for its gold class and a
/// false positive for neither class.
pub fn metrics_from_confusion(confusion: [[u64; 2]; 2], failed_by_gold: [u64; 2]) -> MetricsReport {
    let total: u64 = confusion.iter().flatten().sum::<u64>() + failed_by_gold.iter().sum::<u64>();
    let per_class = [0usize, 1].map(|c| {
        let o = 1 - c;
        let tp = confusion[c][c];
        let fp = confusion[o][c];
        let fneg = confusion[c][o] + failed_by_gold[c];
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics {
            precision,
            recall,
            f1,
            support: tp + fneg,
        }
    });
    MetricsReport {
        macro_f1: (per_class[0].f1 + per_class[1].f1) / 2.0,
        accuracy: ratio(confusion[0][0] + confusion[1][1], total),
        macro_recall: (per_class[0].recall + per_class[1].recall) / 2.0,
        macro_precision: (per_class[0].precision + per_class[1].precision) / 2.0,
        confusion,
        failed_by_gold,
        n_failed_parses: failed_by_gold.iter().sum(),
        per_class,
    }
}

pub fn compute_metrics(predictions: &[Prediction], golds: &[Severity]) -> Result<MetricsReport, EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    let mut confusion = [[0u64; 2]; 2];
    let mut failed = [0u64; 2];
    for (p, g) in predictions.iter().zip(golds) {
        match p.label {
            Some(l) => confusion[g.index()][l.index()] += 1,
            None => failed[g.index()] += 1,
        }
    }
    if confusion.iter().flatten().sum::<u64>() == 0 {
        return Err(EvalError::NoParsedPredictions);
    }
    Ok(metrics_from_confusion(confusion, failed))
}

/// One table row: name, macro-F1, accuracy, macro-recall, macro-precision.
pub fn format_metrics_row(name: &str, m: &MetricsReport) -> String {
    format!(
        "{name} & {:.4} & {:.4} & {:.4} & {:.4}",
        m.macro_f1, m.accuracy, m.macro_recall, m.macro_precision
    )
}

/// A case to classify.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub caseno: String,
    pub narrative: String,
    pub gold: Severity,
}

/// Prompts `client` for every case (up to `jobs` at once) and parses the
/// answers. Transport failures become failed parses with the error text
/// as raw output.
pub fn run_eval(
    cases: &[EvalCase],
    strategy: &PromptStrategy,
    client: &dyn ChatClient,
    model: &str,
    retry: &RetryPolicy,
    jobs: usize,
) -> Result<Vec<Prediction>, EvalError> {
    let prompts = cases
        .iter()
        .map(|c| build_prompt(strategy, &c.narrative))
        .collect::<Result<Vec<_>, _>>()?;
    let work: Vec<(&EvalCase, Prompt)> = cases.iter().zip(prompts).collect();
    Ok(crate::par::par_map(&work, jobs, |(case, prompt)| {
        let request = ChatRequest {
            system: prompt.system.clone(),
            user: prompt.user.clone(),
            temperature: 0.0,
            model: model.to_string(),
            record_id: Some(case.caseno.clone()),
            payload: Some(case.narrative.clone()),
        };
        let raw = match complete_with_retry(client, &request, retry) {
            Ok(text) => text,
            Err(e) => format!("error: {e}"),
        };
        let (label, parse_status) = parse_label(&raw, strategy.kind);
        Prediction {
            caseno: case.caseno.clone(),
            raw_output: raw,
            label,
            parse_status,
        }
    }))
}

pub const SFT_QUESTION: &str = "Based on the description above, what is the most severe injury outcome of this crash?";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub caseno: String,
    pub system: String,
    pub user: String,
    pub response: String,
    /// Character (not byte) offset in `text` where the response begins.
    pub mask_boundary: usize,
    pub text: String,
}

impl SftRecord {
    /// The prompt part of `text`: system and user with blank-line separators.
    pub fn prompt_rendering(system: &str, user: &str) -> String {
        format!("{system}\n\n{user}\n\n")
    }
}

/// Uses only the descriptive section as input; the response is the label.
pub fn build_sft_dataset(pairs: &[NarrativePair], system: &str) -> Vec<SftRecord> {
    pairs
        .iter()
        .map(|p| {
            let user = format!("{}\n\n{}", p.descriptive, SFT_QUESTION);
            let prompt = SftRecord::prompt_rendering(system, &user);
            let response = p.label.label().to_string();
            SftRecord {
                caseno: p.caseno.clone(),
                system: system.to_string(),
                mask_boundary: prompt.chars().count(),
                text: format!("{prompt}{response}"),
                user,
                response,
            }
        })
        .collect()
}

/// Problems with one record: label text inside the user field, or a mask
/// boundary that does not split `text` into prompt and response.
pub fn sft_record_problems(r: &SftRecord) -> Vec<String> {
    let mut out = Vec::new();
    let user = r.user.to_lowercase();
    for s in Severity::ALL {
        if user.contains(&s.label().to_lowercase()) {
            out.push(format!("user text contains label {:?}", s.label()));
        }
    }
    let expected = SftRecord::prompt_rendering(&r.system, &r.user);
    let head: String = r.text.chars().take(r.mask_boundary).collect();
    let tail: String = r.text.chars().skip(r.mask_boundary).collect();
    if head != expected || tail != r.response {
        out.push("mask boundary does not separate prompt from response".into());
    }
    out
}
