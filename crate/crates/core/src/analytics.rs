//! Factor summaries per aspect, top-factor extraction, semantic grouping,
//! cross-aspect co-occurrence and the Sankey/heatmap exports.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::WordAttribution;
use crate::chat::{complete_with_retry, ChatClient, ChatError, ChatRequest, RetryPolicy};

pub const DEFAULT_CATEGORIES: &str = include_str!("../data/categories.toml");
pub const DEFAULT_GROUPING: &str = include_str!("../data/grouping.toml");

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("invalid category lexicon: {0}")]
    Lexicon(String),
    #[error("invalid grouping rules: {0}")]
    Grouping(String),
    #[error("invalid sankey document: {0}")]
    Sankey(String),
    #[error("unknown aspect {0:?}")]
    UnknownAspect(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    Environmental,
    VehicleOccupant,
    Behavioral,
    Infrastructure,
    Unusual,
}

impl Aspect {
    pub const ALL: [Aspect; 5] = [
        Aspect::Environmental,
        Aspect::VehicleOccupant,
        Aspect::Behavioral,
        Aspect::Infrastructure,
        Aspect::Unusual,
    ];

    /// Aspects that feed top-factor extraction and the co-occurrence graph.
    pub const RANKED: [Aspect; 4] = [
        Aspect::Environmental,
        Aspect::Behavioral,
        Aspect::VehicleOccupant,
        Aspect::Infrastructure,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Aspect::Environmental => "environmental",
            Aspect::VehicleOccupant => "vehicle_occupant",
            Aspect::Behavioral => "behavioral",
            Aspect::Infrastructure => "infrastructure",
            Aspect::Unusual => "unusual",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Aspect::Environmental => "Environmental",
            Aspect::VehicleOccupant => "Vehicle/Occupant",
            Aspect::Behavioral => "Behavioral",
            Aspect::Infrastructure => "Infrastructure",
            Aspect::Unusual => "Unusual",
        }
    }

    pub fn color(self) -> &'static str {
        match self {
            Aspect::Environmental => "#2a9d8f",
            Aspect::VehicleOccupant => "#e9a03b",
            Aspect::Behavioral => "#d1495b",
            Aspect::Infrastructure => "#3d5a80",
            Aspect::Unusual => "#8d99ae",
        }
    }
}

impl FromStr for Aspect {
    type Err = AnalyticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Aspect::ALL
            .into_iter()
            .find(|a| a.key() == s)
            .ok_or_else(|| AnalyticsError::UnknownAspect(s.into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTerm {
    pub term: String,
    pub score: f64,
    /// Byte offset of the term in the narrative, when known. Breaks ties.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CategorySummary {
    pub summary: String,
    pub terms: Vec<FactorTerm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummarySource {
    Model,
    Rules,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub caseno: String,
    pub source: SummarySource,
    pub categories: BTreeMap<Aspect, CategorySummary>,
}

fn term_order(a: &FactorTerm, b: &FactorTerm) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.position.unwrap_or(usize::MAX).cmp(&b.position.unwrap_or(usize::MAX)))
        .then_with(|| a.term.cmp(&b.term))
}

impl FactorSummary {
    /// Builds a summary with all five aspects, then drops non-positive
    /// scores, merges repeated terms and sorts each list.
    pub fn new(
        caseno: impl Into<String>,
        source: SummarySource,
        categories: impl IntoIterator<Item = (Aspect, CategorySummary)>,
    ) -> Self {
        let mut map: BTreeMap<Aspect, CategorySummary> =
            Aspect::ALL.into_iter().map(|a| (a, CategorySummary::default())).collect();
        map.extend(categories);
        for cat in map.values_mut() {
            let mut merged: Vec<FactorTerm> = Vec::new();
            for t in cat.terms.drain(..) {
                if !(t.score.is_finite() && t.score > 0.0) {
                    continue;
                }
                match merged.iter_mut().find(|m| m.term == t.term) {
                    Some(m) => {
                        m.score = m.score.max(t.score);
                        m.position = match (m.position, t.position) {
                            (Some(a), Some(b)) => Some(a.min(b)),
                            (a, b) => a.or(b),
                        };
                    }
                    None => merged.push(t),
                }
            }
            merged.sort_by(term_order);
            cat.terms = merged;
        }
        Self {
            caseno: caseno.into(),
            source,
            categories: map,
        }
    }

    pub fn category(&self, aspect: Aspect) -> &CategorySummary {
        &self.categories[&aspect]
    }
}

/// A word of an annotated narrative, located in the de-annotated text.
fn parse_annotated_chunk(chunk: &str) -> (String, f64) {
    static_regex_annotation()
        .captures(chunk)
        .and_then(|c| {
            let score = c[2].parse::<f64>().ok()?;
            Some((c[1].to_string(), score))
        })
        .unwrap_or_else(|| (chunk.to_string(), 0.0))
}

fn static_regex_annotation() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(.+)\[(-?\d+(?:\.\d+)?)\]$").expect("static regex"))
}

/// Splits `word[x.xx]` annotations off again. Returns the plain narrative
/// (words joined by single spaces) and one entry per word; unannotated
/// words score 0.
pub fn parse_annotated(annotated: &str) -> (String, Vec<WordAttribution>) {
    let mut plain = String::with_capacity(annotated.len());
    let mut words = Vec::new();
    for chunk in annotated.split_whitespace() {
        let (word, score) = parse_annotated_chunk(chunk);
        if !plain.is_empty() {
            plain.push(' ');
        }
        let start = plain.len();
        plain.push_str(&word);
        words.push(WordAttribution {
            end: plain.len(),
            word,
            start,
            score,
            contributing_token_ids: Vec::new(),
        });
    }
    (plain, words)
}

fn trim_punct(word: &str) -> &str {
    word.trim_matches(|c: char| !c.is_alphanumeric())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCategory {
    #[serde(default)]
    keywords: Vec<String>,
    #[serde(default)]
    patterns: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLexicon {
    unusual_threshold: f64,
    #[serde(default)]
    ignore: Vec<String>,
    environmental: RawCategory,
    vehicle_occupant: RawCategory,
    behavioral: RawCategory,
    infrastructure: RawCategory,
}

#[derive(Debug, Clone)]
struct CategoryMatcher {
    aspect: Aspect,
    keywords: HashSet<String>,
    patterns: Vec<Regex>,
}

/// Keyword and pattern lexicon for the offline categorizer.
#[derive(Debug, Clone)]
pub struct CategoryLexicon {
    pub unusual_threshold: f64,
    ignore: HashSet<String>,
    matchers: Vec<CategoryMatcher>,
}

impl CategoryLexicon {
    pub fn from_toml(text: &str) -> Result<Self, AnalyticsError> {
        let raw: RawLexicon = toml::from_str(text).map_err(|e| AnalyticsError::Lexicon(e.to_string()))?;
        if !raw.unusual_threshold.is_finite() || raw.unusual_threshold <= 0.0 {
            return Err(AnalyticsError::Lexicon("unusual_threshold must be positive".into()));
        }
        let mut matchers = Vec::new();
        for (aspect, cat) in [
            (Aspect::Environmental, raw.environmental),
            (Aspect::VehicleOccupant, raw.vehicle_occupant),
            (Aspect::Behavioral, raw.behavioral),
            (Aspect::Infrastructure, raw.infrastructure),
        ] {
            let patterns = cat
                .patterns
                .iter()
                .map(|p| Regex::new(p).map_err(|e| AnalyticsError::Lexicon(format!("{}: {e}", aspect.key()))))
                .collect::<Result<_, _>>()?;
            matchers.push(CategoryMatcher {
                aspect,
                keywords: cat.keywords.iter().map(|k| k.to_lowercase()).collect(),
                patterns,
            });
        }
        Ok(Self {
            unusual_threshold: raw.unusual_threshold,
            ignore: raw.ignore.iter().map(|w| w.to_lowercase()).collect(),
            matchers,
        })
    }

    /// The aspect a raw word belongs to, ignoring its score.
    pub fn classify(&self, raw_word: &str) -> Option<Aspect> {
        let norm = trim_punct(raw_word).to_lowercase();
        self.matchers
            .iter()
            .find(|m| m.patterns.iter().any(|p| p.is_match(raw_word)) || m.keywords.contains(&norm))
            .map(|m| m.aspect)
    }
}

impl Default for CategoryLexicon {
    fn default() -> Self {
        Self::from_toml(DEFAULT_CATEGORIES).expect("bundled category lexicon is valid")
    }
}

fn rule_summary(aspect: Aspect, terms: &[FactorTerm]) -> String {
    if terms.is_empty() {
        return format!("No {} terms received positive attribution.", aspect.label().to_lowercase());
    }
    let names: Vec<&str> = terms.iter().map(|t| t.term.as_str()).collect();
    format!("{} terms by attribution: {}.", aspect.label(), names.join(", "))
}

/// Offline categorizer: every positively scored word goes to the first
/// matching aspect; unmatched words reaching the unusual threshold go to
/// Unusual. Summaries are template sentences.
pub fn rule_based_factors(caseno: &str, words: &[WordAttribution], lexicon: &CategoryLexicon) -> FactorSummary {
    let mut buckets: BTreeMap<Aspect, Vec<FactorTerm>> = BTreeMap::new();
    for w in words {
        if !(w.score > 0.0) {
            continue;
        }
        let term = trim_punct(&w.word);
        if term.is_empty() {
            continue;
        }
        let aspect = match lexicon.classify(&w.word) {
            Some(a) => a,
            None if w.score >= lexicon.unusual_threshold && !lexicon.ignore.contains(&term.to_lowercase()) => {
                Aspect::Unusual
            }
            None => continue,
        };
        buckets.entry(aspect).or_default().push(FactorTerm {
            term: term.to_string(),
            score: w.score,
            position: Some(w.start),
        });
    }
    let mut summary = FactorSummary::new(
        caseno,
        SummarySource::Rules,
        buckets.into_iter().map(|(a, terms)| {
            (
                a,
                CategorySummary {
                    summary: String::new(),
                    terms,
                },
            )
        }),
    );
    for (a, cat) in summary.categories.iter_mut() {
        cat.summary = rule_summary(*a, &cat.terms);
    }
    summary
}

/// Prompt pair for the model-backed summarizer. `user_template` must
/// contain `{narrative}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorPrompt {
    pub system: String,
    pub user_template: String,
    pub repair_instruction: String,
}

impl Default for FactorPrompt {
    fn default() -> Self {
        Self {
            system: "You summarize crash reports for road safety analysts. Answer with JSON only.".into(),
            user_template: "Each word of the crash narrative below is followed by its attribution score in brackets. \
Sort the high-scoring words and phrases into five categories: environmental (weather, lighting, \
road surface, date, time and place), vehicle_occupant (vehicle types and ages, occupants, \
protection systems), behavioral (speed, impairment, maneuvers), infrastructure (road design, \
lanes, traffic control) and unusual (anything else whose score is unexpectedly high).\n\n\
Reply with one JSON object whose keys are exactly environmental, vehicle_occupant, behavioral, \
infrastructure and unusual. Each value is an object with a short \"summary\" string and a \
\"terms\" array of {\"term\": string, \"score\": number} entries, highest score first. Use an \
empty array for a category without terms.\n\nNarrative:\n{narrative}"
                .into(),
            repair_instruction: "Your previous reply could not be used ({error}). Reply again with only the JSON \
object described above, including all five keys."
                .into(),
        }
    }
}

impl FactorPrompt {
    pub fn render(&self, annotated: &str) -> String {
        self.user_template.replace("{narrative}", annotated)
    }
}

#[derive(Debug, Deserialize)]
struct WireTerm {
    term: String,
    score: f64,
}

#[derive(Debug, Deserialize)]
struct WireCategory {
    #[serde(default)]
    summary: String,
    terms: Vec<WireTerm>,
}

#[derive(Debug, Deserialize)]
struct WireSummary {
    environmental: WireCategory,
    vehicle_occupant: WireCategory,
    behavioral: WireCategory,
    infrastructure: WireCategory,
    unusual: WireCategory,
}

/// Parses a completion into a summary. Accepts code fences or prose
/// around the outermost JSON object.
pub fn parse_factor_json(caseno: &str, completion: &str, plain_narrative: &str) -> Result<FactorSummary, String> {
    let start = completion.find('{').ok_or("no JSON object in reply")?;
    let end = completion.rfind('}').ok_or("no JSON object in reply")?;
    if end < start {
        return Err("no JSON object in reply".into());
    }
    let wire: WireSummary = serde_json::from_str(&completion[start..=end]).map_err(|e| e.to_string())?;
    let lower = plain_narrative.to_lowercase();
    let locate = |term: &str| plain_narrative.find(term).or_else(|| lower.find(&term.to_lowercase()));
    let convert = |c: WireCategory| CategorySummary {
        summary: c.summary,
        terms: c
            .terms
            .into_iter()
            .map(|t| FactorTerm {
                position: locate(&t.term),
                term: t.term,
                score: t.score,
            })
            .collect(),
    };
    Ok(FactorSummary::new(
        caseno,
        SummarySource::Model,
        [
            (Aspect::Environmental, convert(wire.environmental)),
            (Aspect::VehicleOccupant, convert(wire.vehicle_occupant)),
            (Aspect::Behavioral, convert(wire.behavioral)),
            (Aspect::Infrastructure, convert(wire.infrastructure)),
            (Aspect::Unusual, convert(wire.unusual)),
        ],
    ))
}

/// Asks `client` for a summary of one annotated narrative. An unusable
/// reply gets one repair request; if that also fails (or cannot be sent)
/// the rule-based summary is returned. Only a failed first request is an
/// error.
pub fn summarize_factors(
    caseno: &str,
    annotated: &str,
    client: &dyn ChatClient,
    prompt: &FactorPrompt,
    lexicon: &CategoryLexicon,
    model: &str,
    retry: &RetryPolicy,
) -> Result<FactorSummary, ChatError> {
    let (plain, words) = parse_annotated(annotated);
    if words.is_empty() {
        return Ok(rule_based_factors(caseno, &words, lexicon));
    }
    let user = prompt.render(annotated);
    let mut request = ChatRequest {
        system: prompt.system.clone(),
        user: user.clone(),
        temperature: 0.0,
        model: model.to_string(),
        record_id: Some(caseno.to_string()),
        payload: Some(annotated.to_string()),
    };
    let first = complete_with_retry(client, &request, retry)?;
    let error = match parse_factor_json(caseno, &first, &plain) {
        Ok(s) => return Ok(s),
        Err(e) => e,
    };
    request.user = format!(
        "{user}\n\nPrevious reply:\n{first}\n\n{}",
        prompt.repair_instruction.replace("{error}", &error)
    );
    if let Ok(second) = complete_with_retry(client, &request, retry) {
        if let Ok(s) = parse_factor_json(caseno, &second, &plain) {
            return Ok(s);
        }
    }
    Ok(rule_based_factors(caseno, &words, lexicon))
}

/// Highest-scoring `k` terms of each ranked aspect (Unusual excluded).
/// Ties go to the term appearing earlier in the narrative.
pub fn extract_top_factors(summary: &FactorSummary, k: usize) -> BTreeMap<Aspect, Vec<FactorTerm>> {
    Aspect::RANKED
        .into_iter()
        .map(|a| {
            let mut terms = summary.category(a).terms.clone();
            terms.sort_by(term_order);
            terms.truncate(k);
            (a, terms)
        })
        .collect()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    pattern: String,
    canonical: String,
    #[serde(default)]
    aspects: Option<Vec<Aspect>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRules {
    #[serde(default)]
    rule: Vec<RawRule>,
}

#[derive(Debug, Clone)]
pub struct GroupingRule {
    pub pattern: Regex,
    pub canonical: String,
    pub aspects: Option<Vec<Aspect>>,
}

/// Ordered canonicalization rules; the first match wins.
#[derive(Debug, Clone)]
pub struct GroupingRules {
    pub rules: Vec<GroupingRule>,
}

impl GroupingRules {
    pub fn from_toml(text: &str) -> Result<Self, AnalyticsError> {
        let raw: RawRules = toml::from_str(text).map_err(|e| AnalyticsError::Grouping(e.to_string()))?;
        let mut rules = Vec::with_capacity(raw.rule.len());
        for (i, r) in raw.rule.into_iter().enumerate() {
            let canonical = r.canonical.trim().to_string();
            if canonical.is_empty() {
                return Err(AnalyticsError::Grouping(format!("rule {} has an empty canonical name", i + 1)));
            }
            let pattern = RegexBuilder::new(&r.pattern)
                .case_insensitive(true)
                .build()
                .map_err(|e| AnalyticsError::Grouping(format!("rule {}: {e}", i + 1)))?;
            rules.push(GroupingRule {
                pattern,
                canonical,
                aspects: r.aspects,
            });
        }
        let out = Self { rules };
        out.check_fixed_points()?;
        Ok(out)
    }

    /// Every canonical name must map to itself under its rule's aspects,
    /// which makes grouping idempotent.
    fn check_fixed_points(&self) -> Result<(), AnalyticsError> {
        for r in &self.rules {
            let aspects = r.aspects.clone().unwrap_or_else(|| Aspect::ALL.to_vec());
            for a in aspects {
                let mapped = self.apply(a, &r.canonical);
                if mapped != r.canonical {
                    return Err(AnalyticsError::Grouping(format!(
                        "canonical {:?} ({}) maps to {:?}",
                        r.canonical,
                        a.key(),
                        mapped
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, aspect: Aspect, factor: &str) -> String {
        let probe = factor.trim();
        self.rules
            .iter()
            .find(|r| r.aspects.as_ref().is_none_or(|a| a.contains(&aspect)) && r.pattern.is_match(probe))
            .map(|r| r.canonical.clone())
            .unwrap_or_else(|| factor.to_string())
    }
}

impl Default for GroupingRules {
    fn default() -> Self {
        Self::from_toml(DEFAULT_GROUPING).expect("bundled grouping rules are valid")
    }
}

pub fn semantic_group(factors: &[(Aspect, String)], rules: &GroupingRules) -> Vec<(Aspect, String)> {
    factors.iter().map(|(a, f)| (*a, rules.apply(*a, f))).collect()
}

/// Top-k factors of every ranked aspect, grouped. Duplicates collapse.
pub fn case_factors(summary: &FactorSummary, k: usize, rules: &GroupingRules) -> Vec<(Aspect, String)> {
    let top: Vec<(Aspect, String)> = extract_top_factors(summary, k)
        .into_iter()
        .flat_map(|(a, terms)| terms.into_iter().map(move |t| (a, t.term)))
        .collect();
    let set: BTreeSet<(Aspect, String)> = semantic_group(&top, rules).into_iter().collect();
    set.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FactorKey {
    pub aspect: Aspect,
    pub factor: String,
}

impl FactorKey {
    pub fn id(&self) -> String {
        format!("{}/{}", self.aspect.key(), self.factor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub key: FactorKey,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphLink {
    pub source: FactorKey,
    pub target: FactorKey,
    pub count: u64,
}

/// Nodes and links sorted by key. Only factors with at least one link
/// appear as nodes.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CooccurrenceGraph {
    pub nodes: Vec<GraphNode>,
    pub links: Vec<GraphLink>,
}

/// Counts, once per case, every unordered pair of distinct factors from
/// different aspects. Node totals are sums of incident link counts.
pub fn cooccurrence(cases: &[Vec<(Aspect, String)>]) -> CooccurrenceGraph {
    let mut links: BTreeMap<(FactorKey, FactorKey), u64> = BTreeMap::new();
    for case in cases {
        let set: BTreeSet<FactorKey> = case
            .iter()
            .map(|(a, f)| FactorKey {
                aspect: *a,
                factor: f.clone(),
            })
            .collect();
        let keys: Vec<&FactorKey> = set.iter().collect();
        for (i, a) in keys.iter().enumerate() {
            for b in &keys[i + 1..] {
                if a.aspect != b.aspect {
                    *links.entry(((*a).clone(), (*b).clone())).or_default() += 1;
                }
            }
        }
    }
    graph_from_links(links)
}

fn graph_from_links(links: BTreeMap<(FactorKey, FactorKey), u64>) -> CooccurrenceGraph {
    let mut totals: BTreeMap<FactorKey, u64> = BTreeMap::new();
    for ((s, t), c) in &links {
        *totals.entry(s.clone()).or_default() += c;
        *totals.entry(t.clone()).or_default() += c;
    }
    CooccurrenceGraph {
        nodes: totals.into_iter().map(|(key, total)| GraphNode { key, total }).collect(),
        links: links
            .into_iter()
            .map(|((source, target), count)| GraphLink { source, target, count })
            .collect(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SankeyAspect {
    key: Aspect,
    label: String,
    color: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SankeyNode {
    id: String,
    aspect: Aspect,
    name: String,
    total: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SankeyLink {
    source: String,
    target: String,
    count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SankeyDoc {
    aspects: Vec<SankeyAspect>,
    nodes: Vec<SankeyNode>,
    links: Vec<SankeyLink>,
}

/// Self-contained Sankey JSON: aspect colours, nodes, links.
pub fn sankey_json(graph: &CooccurrenceGraph) -> String {
    let doc = SankeyDoc {
        aspects: Aspect::ALL
            .into_iter()
            .map(|a| SankeyAspect {
                key: a,
                label: a.label().into(),
                color: a.color().into(),
            })
            .collect(),
        nodes: graph
            .nodes
            .iter()
            .map(|n| SankeyNode {
                id: n.key.id(),
                aspect: n.key.aspect,
                name: n.key.factor.clone(),
                total: n.total,
            })
            .collect(),
        links: graph
            .links
            .iter()
            .map(|l| SankeyLink {
                source: l.source.id(),
                target: l.target.id(),
                count: l.count,
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("sankey document serializes");
    s.push('\n');
    s
}

/// Checks a Sankey JSON document and rebuilds the graph it describes.
pub fn validate_sankey(json: &str) -> Result<CooccurrenceGraph, AnalyticsError> {
    let bad = |m: String| AnalyticsError::Sankey(m);
    let doc: SankeyDoc = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
    for a in &doc.aspects {
        if a.color != a.key.color() || a.label != a.key.label() {
            return Err(bad(format!("aspect {} has a wrong label or colour", a.key.key())));
        }
    }
    let declared: HashSet<Aspect> = doc.aspects.iter().map(|a| a.key).collect();
    let mut nodes: BTreeMap<String, (FactorKey, u64)> = BTreeMap::new();
    for n in &doc.nodes {
        let key = FactorKey {
            aspect: n.aspect,
            factor: n.name.clone(),
        };
        if key.id() != n.id {
            return Err(bad(format!("node id {:?} does not match its aspect and name", n.id)));
        }
        if !declared.contains(&n.aspect) {
            return Err(bad(format!("node {:?} uses an undeclared aspect", n.id)));
        }
        if nodes.insert(n.id.clone(), (key, n.total)).is_some() {
            return Err(bad(format!("duplicate node {:?}", n.id)));
        }
    }
    let mut links: BTreeMap<(FactorKey, FactorKey), u64> = BTreeMap::new();
    for l in &doc.links {
        let s = nodes.get(&l.source).ok_or_else(|| bad(format!("unknown link source {:?}", l.source)))?;
        let t = nodes.get(&l.target).ok_or_else(|| bad(format!("unknown link target {:?}", l.target)))?;
        if l.count == 0 {
            return Err(bad(format!("link {} -> {} has count 0", l.source, l.target)));
        }
        if s.0.aspect == t.0.aspect {
            return Err(bad(format!("link {} -> {} stays within one aspect", l.source, l.target)));
        }
        let pair = if s.0 < t.0 { (s.0.clone(), t.0.clone()) } else { (t.0.clone(), s.0.clone()) };
        if links.insert(pair, l.count).is_some() {
            return Err(bad(format!("duplicate link {} -> {}", l.source, l.target)));
        }
    }
    let graph = graph_from_links(links);
    let rebuilt: BTreeMap<String, u64> = graph.nodes.iter().map(|n| (n.key.id(), n.total)).collect();
    let given: BTreeMap<String, u64> = nodes.iter().map(|(id, (_, t))| (id.clone(), *t)).collect();
    if rebuilt != given {
        return Err(bad("node totals do not equal the sums of incident link counts".into()));
    }
    Ok(graph)
}

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Standalone HTML page with a static SVG rendering of the graph. One
/// column per aspect that has nodes; node height and link width scale
/// with counts.
pub fn sankey_html(graph: &CooccurrenceGraph, title: &str) -> String {
    const WIDTH: f64 = 1000.0;
    const HEIGHT: f64 = 600.0;
    const MARGIN: f64 = 40.0;
    const NODE_W: f64 = 14.0;
    const GAP: f64 = 8.0;

    let columns: Vec<Aspect> = Aspect::ALL
        .into_iter()
        .filter(|a| graph.nodes.iter().any(|n| n.key.aspect == *a))
        .collect();
    let usable = HEIGHT - 2.0 * MARGIN;
    let scale = columns
        .iter()
        .map(|a| {
            let col: Vec<&GraphNode> = graph.nodes.iter().filter(|n| n.key.aspect == *a).collect();
            let total: u64 = col.iter().map(|n| n.total).sum();
            (usable - GAP * (col.len() as f64 - 1.0)).max(usable * 0.2) / total.max(1) as f64
        })
        .fold(f64::INFINITY, f64::min);
    let scale = if scale.is_finite() { scale } else { 1.0 };
    let col_x = |a: Aspect| {
        let i = columns.iter().position(|c| *c == a).unwrap_or(0) as f64;
        let span = (columns.len().max(2) - 1) as f64;
        MARGIN + 120.0 + i * (WIDTH - 2.0 * MARGIN - 240.0 - NODE_W) / span
    };

    let mut pos: BTreeMap<&FactorKey, (f64, f64)> = BTreeMap::new();
    for a in &columns {
        let mut y = MARGIN;
        for n in graph.nodes.iter().filter(|n| n.key.aspect == *a) {
            pos.insert(&n.key, (col_x(*a), y));
            y += n.total as f64 * scale + GAP;
        }
    }

    let mut svg = String::new();
    let mut out_off: BTreeMap<&FactorKey, f64> = BTreeMap::new();
    let mut in_off: BTreeMap<&FactorKey, f64> = BTreeMap::new();
    for l in &graph.links {
        let (Some(&(sx, sy)), Some(&(tx, ty))) = (pos.get(&l.source), pos.get(&l.target)) else {
            continue;
        };
        let w = l.count as f64 * scale;
        let so = out_off.entry(&l.source).or_insert(0.0);
        let y0 = sy + *so + w / 2.0;
        *so += w;
        let to = in_off.entry(&l.target).or_insert(0.0);
        let y1 = ty + *to + w / 2.0;
        *to += w;
        let x0 = sx + NODE_W;
        let x1 = tx;
        let xm = (x0 + x1) / 2.0;
        let _ = writeln!(
            svg,
            "<path d=\"M{x0:.1},{y0:.1} C{xm:.1},{y0:.1} {xm:.1},{y1:.1} {x1:.1},{y1:.1}\" fill=\"none\" stroke=\"{}\" stroke-opacity=\"0.35\" stroke-width=\"{:.1}\"><title>{} &#8594; {}: {}</title></path>",
            l.source.aspect.color(),
            w.max(1.0),
            escape_html(&l.source.factor),
            escape_html(&l.target.factor),
            l.count
        );
    }
    for n in &graph.nodes {
        let (x, y) = pos[&n.key];
        let h = (n.total as f64 * scale).max(1.0);
        let _ = writeln!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{NODE_W:.1}\" height=\"{h:.1}\" fill=\"{}\"><title>{}: {}</title></rect>",
            n.key.aspect.color(),
            escape_html(&n.key.factor),
            n.total
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" dominant-baseline=\"middle\">{}</text>",
            x - 4.0,
            y + h / 2.0,
            escape_html(&n.key.factor)
        );
    }
    for a in &columns {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-weight=\"bold\" fill=\"{}\">{}</text>",
            col_x(*a) + NODE_W / 2.0,
            MARGIN - 16.0,
            a.color(),
            a.label()
        );
    }
    let title = escape_html(title);
    format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{title}</title>\n\
<style>body{{font-family:sans-serif;margin:1.5em}}svg text{{font-size:12px}}</style>\n</head>\n<body>\n\
<h1>{title}</h1>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
{svg}</svg>\n</body>\n</html>\n"
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapConfig {
    /// Display scores at or above this render red; lower positive scores green.
    pub threshold_hi: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self { threshold_hi: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatClass {
    High,
    Moderate,
    None,
}

pub fn heat_class(score: f64, cfg: &HeatmapConfig) -> HeatClass {
    if score >= cfg.threshold_hi {
        HeatClass::High
    } else if score > 0.0 {
        HeatClass::Moderate
    } else {
        HeatClass::None
    }
}

/// Standalone HTML for one annotated narrative with binary red/green
/// colouring; zero-score words stay unstyled.
pub fn heatmap_html(caseno: &str, annotated: &str, cfg: &HeatmapConfig) -> String {
    let (_, words) = parse_annotated(annotated);
    let mut body = String::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            body.push(' ');
        }
        let word = escape_html(&w.word);
        match heat_class(w.score, cfg) {
            HeatClass::High => {
                let _ = write!(body, "<span class=\"hi\">{word}<sup>{:.2}</sup></span>", w.score);
            }
            HeatClass::Moderate => {
                let _ = write!(body, "<span class=\"lo\">{word}<sup>{:.2}</sup></span>", w.score);
            }
            HeatClass::None => {
                let _ = write!(body, "{word}<sup>{:.2}</sup>", w.score);
            }
        }
    }
    let caseno = escape_html(caseno);
    format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>Attribution {caseno}</title>\n\
<style>body{{font-family:serif;max-width:50em;margin:2em auto;line-height:1.7}}\
sup{{color:#888;font-size:0.6em;margin-left:1px}}\
.hi{{color:#c1121f;font-weight:bold}}.lo{{color:#2b9348}}</style>\n</head>\n<body>\n\
<h1>Case {caseno}</h1>\n<p class=\"legend\">red: score &#8805; {:.2}; green: 0 &lt; score &lt; {:.2}</p>\n\
<p>{body}</p>\n</body>\n</html>\n",
        cfg.threshold_hi, cfg.threshold_hi
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::{FnClient, StubClient};
    use std::sync::atomic::{AtomicU32, Ordering};

    fn word(w: &str, start: usize, score: f64) -> WordAttribution {
        WordAttribution {
            word: w.into(),
            start,
            end: start + w.len(),
            score,
            contributing_token_ids: vec![],
        }
    }

    fn quick() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 1,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    #[test]
    fn rule_categorizer_examples() {
        let lex = CategoryLexicon::default();
        let words = [
            word("dusk", 0, 2.28),
            word("intoxication.", 10, 2.68),
            word("milepost", 30, 3.5),
            word("the", 40, 4.0),
            word("2005", 50, 3.68),
            word("2022,", 60, 4.28),
            word("097ARi", 70, 1.68),
            word("sunny", 80, 0.0),
        ];
        let s = rule_based_factors("C1", &words, &lex);
        let terms = |a| -> Vec<&str> { s.category(a).terms.iter().map(|t| t.term.as_str()).collect() };
        assert_eq!(terms(Aspect::Environmental), vec!["2022", "dusk"]);
        assert_eq!(terms(Aspect::Behavioral), vec!["intoxication"]);
        assert_eq!(terms(Aspect::Unusual), vec!["milepost"]);
        assert_eq!(terms(Aspect::VehicleOccupant), vec!["2005"]);
        assert_eq!(terms(Aspect::Infrastructure), vec!["097ARi"]);
        assert_eq!(s.source, SummarySource::Rules);
    }

    #[test]
    fn missing_key_repairs_then_falls_back() {
        let calls = AtomicU32::new(0);
        let client = FnClient(|_: &ChatRequest| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(r#"{"environmental":{"summary":"","terms":[]},"vehicle_occupant":{"terms":[]},"behavioral":{"terms":[]},"infrastructure":{"terms":[]}}"#.to_string())
        });
        let s = summarize_factors(
            "C1",
            "under dusk[2.28] conditions.[2.00]",
            &client,
            &FactorPrompt::default(),
            &CategoryLexicon::default(),
            "m",
            &quick(),
        )
        .unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert_eq!(s.source, SummarySource::Rules);
        assert_eq!(s.category(Aspect::Environmental).terms[0].term, "dusk");
    }

    #[test]
    fn repair_reply_is_used() {
        let calls = AtomicU32::new(0);
        let client = FnClient(|req: &ChatRequest| {
            if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                Ok("sorry".into())
            } else {
                assert!(req.user.contains("Previous reply:\nsorry"));
                Ok(r#"```json
{"environmental":{"summary":"s","terms":[{"term":"dusk","score":2.28}]},"vehicle_occupant":{"terms":[]},"behavioral":{"terms":[]},"infrastructure":{"terms":[]},"unusual":{"terms":[]}}
```"#
                    .into())
            }
        });
        let s = summarize_factors("C1", "dusk[2.28]", &client, &FactorPrompt::default(), &CategoryLexicon::default(), "m", &quick()).unwrap();
        assert_eq!(s.source, SummarySource::Model);
        assert_eq!(s.category(Aspect::Environmental).terms[0].position, Some(0));
    }

    #[test]
    fn empty_narrative_has_five_empty_categories() {
        let s = summarize_factors("C1", "  ", &StubClient::Echo, &FactorPrompt::default(), &CategoryLexicon::default(), "m", &quick()).unwrap();
        assert_eq!(s.categories.len(), 5);
        assert!(s.categories.values().all(|c| c.terms.is_empty()));
    }

    #[test]
    fn top_k_tie_prefers_earlier_term() {
        let terms = (0..7)
            .map(|i| FactorTerm {
                term: format!("t{i}"),
                score: if i < 4 { 5.0 - i as f64 } else { 1.0 },
                position: Some(100 - i),
            })
            .collect();
        let s = FactorSummary::new(
            "C",
            SummarySource::Rules,
            [(Aspect::Environmental, CategorySummary { summary: String::new(), terms })],
        );
        let top = extract_top_factors(&s, 5);
        let names: Vec<&str> = top[&Aspect::Environmental].iter().map(|t| t.term.as_str()).collect();
        assert_eq!(names, vec!["t0", "t1", "t2", "t3", "t6"]);
        assert!(!top.contains_key(&Aspect::Unusual));
    }

    #[test]
    fn grouping_examples() {
        let g = GroupingRules::default();
        assert_eq!(g.apply(Aspect::Environmental, "8:00 PM"), "time of day");
        assert_eq!(g.apply(Aspect::Environmental, "1:00 PM"), "time of day");
        assert_eq!(g.apply(Aspect::Environmental, "time of day"), "time of day");
        assert_eq!(g.apply(Aspect::Infrastructure, "AADT 4,800"), "traffic volume");
        assert_eq!(g.apply(Aspect::VehicleOccupant, "1995"), "vehicle age");
        assert_eq!(g.apply(Aspect::Environmental, "2022"), "date");
        assert_eq!(g.apply(Aspect::Unusual, "milepost 22.4"), "milepost 22.4");
    }

    #[test]
    fn non_idempotent_rules_rejected() {
        let text = "[[rule]]\npattern = 'a'\ncanonical = 'x'\n[[rule]]\npattern = 'x'\ncanonical = 'y'\n";
        assert!(matches!(GroupingRules::from_toml(text), Err(AnalyticsError::Grouping(_))));
        assert!(GroupingRules::from_toml("[[rule]]\npattern = '('\ncanonical = 'x'\n").is_err());
    }

    #[test]
    fn cooccurrence_basics() {
        let one = vec![(Aspect::Environmental, "A".to_string()), (Aspect::Behavioral, "B".to_string())];
        let g = cooccurrence(&[one.clone()]);
        assert_eq!(g.links.len(), 1);
        assert_eq!(g.links[0].count, 1);
        assert_eq!(cooccurrence(&[one.clone(), one]).links[0].count, 2);
        let same = vec![(Aspect::Environmental, "A".to_string()), (Aspect::Environmental, "C".to_string())];
        assert_eq!(cooccurrence(&[same]), CooccurrenceGraph::default());
    }

    #[test]
    fn sankey_round_trip_and_empty() {
        let g = cooccurrence(&[vec![(Aspect::Environmental, "dusk".into()), (Aspect::Behavioral, "speed".into())]]);
        let json = sankey_json(&g);
        assert_eq!(validate_sankey(&json).unwrap(), g);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["nodes"].as_array().unwrap().len(), 2);
        assert_eq!(v["links"].as_array().unwrap().len(), 1);
        let empty = sankey_json(&CooccurrenceGraph::default());
        assert_eq!(validate_sankey(&empty).unwrap(), CooccurrenceGraph::default());
        assert!(sankey_html(&CooccurrenceGraph::default(), "x").contains("<svg"));
        let tampered = json.replace("\"total\": 1", "\"total\": 2");
        assert!(validate_sankey(&tampered).is_err());
    }

    #[test]
    fn heatmap_colours() {
        let html = heatmap_html("C1", "On[1.92] 2022,[4.28] under dusk[2.28] conditions a[0.00]", &HeatmapConfig::default());
        assert!(html.contains("<span class=\"hi\">2022,<sup>4.28</sup></span>"));
        assert!(html.contains("<span class=\"lo\">dusk<sup>2.28</sup></span>"));
        assert!(html.contains(" a<sup>0.00</sup>"));
        assert!(html.contains(" conditions<sup>0.00</sup>"));
    }
}
