//! Narrative rewriting through a chat model, with mechanical checks that
//! the rewrite kept the facts.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::chat::{ChatClient, ChatError, ChatRequest, RetryPolicy, StubClient};
use crate::chat::complete_with_retry;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("narrative is empty")]
    EmptyNarrative,
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error(transparent)]
    Chat(#[from] ChatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConstraintKind {
    NumbersPreserved,
    DatesTimesPreserved,
    ProperNounsPreserved,
    NoNullMarkers,
    ChronologyPreserved,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 5] = [
        ConstraintKind::NumbersPreserved,
        ConstraintKind::DatesTimesPreserved,
        ConstraintKind::ProperNounsPreserved,
        ConstraintKind::NoNullMarkers,
        ConstraintKind::ChronologyPreserved,
    ];

    /// Guideline line sent to the model for this constraint.
    pub fn guideline(self) -> &'static str {
        match self {
            ConstraintKind::NumbersPreserved => {
                "Keep every number exactly as given (ages, years, speeds, widths, traffic volumes, mileposts, coordinates)."
            }
            ConstraintKind::DatesTimesPreserved => "Keep the date and time of the crash.",
            ConstraintKind::ProperNounsPreserved => {
                "Keep all names of places, routes, and vehicle makes and models."
            }
            ConstraintKind::NoNullMarkers => {
                "Do not add placeholders such as unknown or N/A; leave out anything not stated."
            }
            ConstraintKind::ChronologyPreserved => "Keep events in their original order.",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum PreservationConstraint {
    NumbersPreserved,
    DatesTimesPreserved,
    ProperNounsPreserved,
    NoNullMarkers { markers: Vec<String> },
    ChronologyPreserved,
}

impl PreservationConstraint {
    pub fn kind(&self) -> ConstraintKind {
        match self {
            PreservationConstraint::NumbersPreserved => ConstraintKind::NumbersPreserved,
            PreservationConstraint::DatesTimesPreserved => ConstraintKind::DatesTimesPreserved,
            PreservationConstraint::ProperNounsPreserved => ConstraintKind::ProperNounsPreserved,
            PreservationConstraint::NoNullMarkers { .. } => ConstraintKind::NoNullMarkers,
            PreservationConstraint::ChronologyPreserved => ConstraintKind::ChronologyPreserved,
        }
    }

    /// All five constraints, using `markers` for the null-marker check.
    pub fn all(markers: &[String]) -> Vec<PreservationConstraint> {
        vec![
            PreservationConstraint::NumbersPreserved,
            PreservationConstraint::DatesTimesPreserved,
            PreservationConstraint::ProperNounsPreserved,
            PreservationConstraint::NoNullMarkers {
                markers: markers.to_vec(),
            },
            PreservationConstraint::ChronologyPreserved,
        ]
    }
}

/// Reconstructed editor prompt; the published guideline text is paraphrased
/// in the source, not quoted, so this is our own wording.
pub const DEFAULT_SYSTEM_PROMPT: &str = "You are a professional editor specializing in rewriting traffic accident reports. Rewrite the report you are given so it reads as one coherent, natural narrative. Do not add, remove, or change any fact.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub system_prompt: String,
    pub temperature: f64,
    pub constraints: Vec<PreservationConstraint>,
    pub batch_size: usize,
    pub model_name: String,
    pub endpoint: Option<String>,
    pub retry: RetryPolicy,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        let markers = crate::narrator::Lexicon::default().null_markers;
        Self {
            system_prompt: DEFAULT_SYSTEM_PROMPT.into(),
            temperature: 0.1,
            constraints: PreservationConstraint::all(&markers),
            batch_size: 8,
            model_name: "llama3-8b".into(),
            endpoint: None,
            retry: RetryPolicy::default(),
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(AugmentError::Config(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.constraints.is_empty() {
            return Err(AugmentError::Config("no preservation constraints".into()));
        }
        if self.batch_size == 0 {
            return Err(AugmentError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// The user message: guidelines followed by the narrative.
    pub fn user_message(&self, narrative: &str) -> String {
        let mut out = String::from("Follow these rules:\n");
        for c in &self.constraints {
            out.push_str("- ");
            out.push_str(c.kind().guideline());
            out.push('\n');
        }
        out.push_str("\nReport:\n");
        out.push_str(narrative);
        out
    }
}

/// Sends one narrative for rewriting and returns the completion.
pub fn augment(
    narrative: &str,
    client: &dyn ChatClient,
    cfg: &AugmentationConfig,
) -> Result<String, AugmentError> {
    augment_record(None, narrative, client, cfg)
}

fn augment_record(
    record_id: Option<&str>,
    narrative: &str,
    client: &dyn ChatClient,
    cfg: &AugmentationConfig,
) -> Result<String, AugmentError> {
    if narrative.trim().is_empty() {
        return Err(AugmentError::EmptyNarrative);
    }
    cfg.validate()?;
    let request = ChatRequest {
        system: cfg.system_prompt.clone(),
        user: cfg.user_message(narrative),
        temperature: cfg.temperature,
        model: cfg.model_name.clone(),
        record_id: record_id.map(str::to_string),
        payload: Some(narrative.to_string()),
    };
    Ok(complete_with_retry(client, &request, &cfg.retry)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResult {
    pub constraint: ConstraintKind,
    pub passed: bool,
    pub offending: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub results: Vec<ConstraintResult>,
}

impl ConstraintReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn get(&self, kind: ConstraintKind) -> Option<&ConstraintResult> {
        self.results.iter().find(|r| r.constraint == kind)
    }

    pub fn failed(&self) -> Vec<ConstraintKind> {
        self.results.iter().filter(|r| !r.passed).map(|r| r.constraint).collect()
    }
}

const MONTHS: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];

fn date_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?x)
            \b(?P<month>January|February|March|April|May|June|July|August|September|October|November|December)
              \s+(?P<day>\d{1,2})(?:st|nd|rd|th)?,?\s+(?P<year>\d{4})\b
            | \b(?P<iy>\d{4})-(?P<im>\d{2})-(?P<id>\d{2})\b
            | \b(?P<um>\d{1,2})/(?P<ud>\d{1,2})/(?P<uy>\d{4})\b",
        )
        .expect("date regex")
    })
}

fn time_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(?P<h>\d{1,2}):(?P<m>\d{2})(?::\d{2})?(?:\s*(?P<ap>[ap])\.?\s?m\b\.?)?")
            .expect("time regex")
    })
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?").expect("number regex"))
}

fn proper_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b[A-Z][A-Za-z\-]*(?:[ ]+[A-Z][A-Za-z0-9\-]*)+").expect("proper-noun regex"))
}

/// A date or time expression with its canonical form and byte range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeExpr {
    pub canonical: String,
    pub surface: String,
    pub start: usize,
    pub end: usize,
}

/// Dates canonicalize to `YYYY-MM-DD`; times to 24-hour `HH:MM`, so
/// "8:00 PM", "8:00 p.m.", "20:00" and "20:00:00" compare equal.
pub fn time_expressions(text: &str) -> Vec<TimeExpr> {
    let mut out = Vec::new();
    for c in date_re().captures_iter(text) {
        let m = c.get(0).expect("match");
        let (y, mo, d) = if let Some(month) = c.name("month") {
            let mo = MONTHS.iter().position(|x| *x == month.as_str()).expect("month") + 1;
            (c["year"].to_string(), mo as u32, c["day"].parse::<u32>().unwrap_or(0))
        } else if let Some(iy) = c.name("iy") {
            (iy.as_str().to_string(), c["im"].parse().unwrap_or(0), c["id"].parse().unwrap_or(0))
        } else {
            (c["uy"].to_string(), c["um"].parse().unwrap_or(0), c["ud"].parse().unwrap_or(0))
        };
        out.push(TimeExpr {
            canonical: format!("{y}-{mo:02}-{d:02}"),
            surface: m.as_str().to_string(),
            start: m.start(),
            end: m.end(),
        });
    }
    for c in time_re().captures_iter(text) {
        let m = c.get(0).expect("match");
        if out.iter().any(|e| m.start() < e.end && e.start < m.end()) {
            continue;
        }
        let mut h: u32 = c["h"].parse().unwrap_or(0);
        let min: u32 = c["m"].parse().unwrap_or(0);
        if let Some(ap) = c.name("ap") {
            let pm = ap.as_str().eq_ignore_ascii_case("p");
            h %= 12;
            if pm {
                h += 12;
            }
        }
        out.push(TimeExpr {
            canonical: format!("{h:02}:{min:02}"),
            surface: m.as_str().trim_end().to_string(),
            start: m.start(),
            end: m.end(),
        });
    }
    out.sort_by_key(|e| e.start);
    out
}

fn canonical_number(raw: &str) -> String {
    let mut s: String = raw.chars().filter(|c| *c != ',').collect();
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    let trimmed = s.trim_start_matches('0');
    if trimmed.is_empty() || trimmed.starts_with('.') {
        format!("0{trimmed}")
    } else {
        trimmed.to_string()
    }
}

/// Numeric literals outside date/time expressions, canonicalized
/// (thousands separators removed, trailing decimal zeros dropped, signs ignored).
pub fn numeric_literals(text: &str) -> Vec<(String, String)> {
    let exprs = time_expressions(text);
    number_re()
        .find_iter(text)
        .filter(|m| !exprs.iter().any(|e| m.start() < e.end && e.start < m.end()))
        .map(|m| (canonical_number(m.as_str()), m.as_str().to_string()))
        .collect()
}

const LEADING_FUNCTION_WORDS: &[&str] = &[
    "On", "The", "It", "A", "An", "In", "At", "This", "Its", "Unit", "There", "Both", "Neither",
];

/// Runs of two or more capitalized words, minus sentence-initial function
/// words and month names.
pub fn proper_noun_entities(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for m in proper_re().find_iter(text) {
        let mut words: Vec<&str> = m.as_str().split_whitespace().collect();
        while let Some(first) = words.first() {
            if LEADING_FUNCTION_WORDS.contains(first) || MONTHS.contains(first) {
                words.remove(0);
            } else {
                break;
            }
        }
        while let Some(last) = words.last() {
            if MONTHS.contains(last) {
                words.pop();
            } else {
                break;
            }
        }
        if words.len() >= 2 {
            out.push(words.join(" "));
        }
    }
    out
}

fn multiset(items: impl IntoIterator<Item = String>) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for i in items {
        *m.entry(i).or_insert(0) += 1;
    }
    m
}

fn null_marker_hits(text: &str, markers: &[String]) -> Vec<String> {
    let markers: Vec<String> = markers
        .iter()
        .map(|m| m.trim().to_lowercase())
        .filter(|m| !m.is_empty())
        .collect();
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '/'))
        .filter(|w| markers.contains(&w.to_lowercase()))
        .map(str::to_string)
        .collect()
}

fn first_occurrences(seq: &[String]) -> Vec<String> {
    let mut seen = Vec::new();
    for s in seq {
        if !seen.contains(s) {
            seen.push(s.clone());
        }
    }
    seen
}

/// Checks `augmented` against `original` for each constraint.
pub fn verify_preservation(
    original: &str,
    augmented: &str,
    constraints: &[PreservationConstraint],
) -> ConstraintReport {
    let results = constraints
        .iter()
        .map(|c| {
            let offending: Vec<String> = match c {
                PreservationConstraint::NumbersPreserved => {
                    let orig = numeric_literals(original);
                    let have = multiset(numeric_literals(augmented).into_iter().map(|x| x.0));
                    let mut need: BTreeMap<String, (usize, String)> = BTreeMap::new();
                    for (canon, surface) in orig {
                        need.entry(canon).or_insert((0, surface)).0 += 1;
                    }
                    need.into_iter()
                        .filter(|(k, (n, _))| have.get(k).copied().unwrap_or(0) < *n)
                        .map(|(_, (_, surface))| surface)
                        .collect()
                }
                PreservationConstraint::DatesTimesPreserved => {
                    let have: Vec<String> =
                        time_expressions(augmented).into_iter().map(|e| e.canonical).collect();
                    time_expressions(original)
                        .into_iter()
                        .filter(|e| !have.contains(&e.canonical))
                        .map(|e| e.surface)
                        .collect()
                }
                PreservationConstraint::ProperNounsPreserved => {
                    let mut missing: Vec<String> = proper_noun_entities(original)
                        .into_iter()
                        .filter(|p| !augmented.contains(p.as_str()))
                        .collect();
                    missing.dedup();
                    missing
                }
                PreservationConstraint::NoNullMarkers { markers } => {
                    null_marker_hits(augmented, markers)
                }
                PreservationConstraint::ChronologyPreserved => {
                    // dates and clock times are ordered separately, so
                    // "20:00 on 2022-06-29" does not count as a reordering
                    let mut bad = Vec::new();
                    for clock in [false, true] {
                        let pick = |text: &str| -> Vec<String> {
                            time_expressions(text)
                                .into_iter()
                                .map(|e| e.canonical)
                                .filter(|c| c.contains(':') == clock)
                                .collect()
                        };
                        let orig = pick(original);
                        let a: Vec<String> = first_occurrences(&pick(augmented))
                            .into_iter()
                            .filter(|x| orig.contains(x))
                            .collect();
                        let o: Vec<String> = first_occurrences(&orig)
                            .into_iter()
                            .filter(|x| a.contains(x))
                            .collect();
                        if a != o {
                            bad.extend(a);
                        }
                    }
                    bad
                }
            };
            ConstraintResult {
                constraint: c.kind(),
                passed: offending.is_empty(),
                offending,
            }
        })
        .collect();
    ConstraintReport { results }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentStatus {
    Accepted,
    /// Verification failed; the original text was kept.
    RejectedFallback,
    /// The request failed; the original text was kept.
    ErrorFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    pub record_id: String,
    pub text: String,
    pub status: AugmentStatus,
    pub report: Option<ConstraintReport>,
    pub error: Option<String>,
}

impl AugmentedRecord {
    pub fn flagged(&self) -> bool {
        self.status != AugmentStatus::Accepted
    }
}

/// Rewrites every `(record_id, narrative)` with up to `jobs` concurrent
/// requests. Any record that fails verification or errors keeps its
/// original text byte-for-byte and is flagged. Output order matches input.
pub fn augment_batch(
    records: &[(String, String)],
    client: &dyn ChatClient,
    cfg: &AugmentationConfig,
    jobs: usize,
) -> Result<Vec<AugmentedRecord>, AugmentError> {
    cfg.validate()?;
    Ok(crate::par::par_map(records, jobs, |(id, original)| {
        match augment_record(Some(id), original, client, cfg) {
            Ok(text) => {
                let report = verify_preservation(original, &text, &cfg.constraints);
                let (text, status) = if report.passed() {
                    (text, AugmentStatus::Accepted)
                } else {
                    (original.clone(), AugmentStatus::RejectedFallback)
                };
                AugmentedRecord {
                    record_id: id.clone(),
                    text,
                    status,
                    report: Some(report),
                    error: None,
                }
            }
            Err(e) => AugmentedRecord {
                record_id: id.clone(),
                text: original.clone(),
                status: AugmentStatus::ErrorFallback,
                report: None,
                error: Some(e.to_string()),
            },
        }
    }))
}
