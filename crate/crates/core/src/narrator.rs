//! Tabular-to-text: lexicon normalization followed by slot-filling templates.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{CrashCase, Locale, Severity};

pub const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.toml");
pub const DEFAULT_TEMPLATES: &str = include_str!("../data/templates.toml");

#[derive(Debug, Error)]
pub enum NarrateError {
    #[error("required slot {slot} has no value in case {caseno}")]
    MissingRequiredSlot { slot: String, caseno: String },
    #[error("template {index}: {message}")]
    Template { index: usize, message: String },
    #[error("invalid data file: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteType {
    pub contains: String,
    pub phrase: String,
}

/// Per-field code-to-phrase maps plus the null-marker set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lexicon {
    pub null_markers: Vec<String>,
    #[serde(default)]
    pub route_types: Vec<RouteType>,
    #[serde(default = "default_route_type")]
    pub default_route_type: String,
    #[serde(default)]
    pub fields: BTreeMap<String, BTreeMap<String, String>>,
}

fn default_route_type() -> String {
    "State Route".into()
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::from_toml(DEFAULT_LEXICON).expect("bundled lexicon parses")
    }
}

impl Lexicon {
    pub fn from_toml(text: &str) -> Result<Self, NarrateError> {
        toml::from_str(text).map_err(|e| NarrateError::Data(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, NarrateError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn is_null(&self, value: &str) -> bool {
        let v = value.trim();
        self.null_markers.iter().any(|m| m.trim().eq_ignore_ascii_case(v))
    }

    fn route_phrase(&self, route_id: &str) -> String {
        let kind = self
            .route_types
            .iter()
            .find(|r| route_id.contains(&r.contains))
            .map_or(self.default_route_type.as_str(), |r| r.phrase.as_str());
        format!("{kind} {route_id}")
    }
}

pub type Fields = BTreeMap<String, String>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizedUnit {
    pub vehicle: Fields,
    pub persons: Vec<Fields>,
}

/// A case with every value already rendered as a phrase and nulls removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCase {
    pub caseno: String,
    pub label: Severity,
    /// Crash-level and road-segment fields.
    pub crash: Fields,
    pub units: Vec<NormalizedUnit>,
    pub warnings: Vec<String>,
}

impl NormalizedCase {
    /// Every (scope path, phrase) pair, for coverage checks.
    pub fn all_phrases(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> =
            self.crash.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (i, u) in self.units.iter().enumerate() {
            out.extend(u.vehicle.iter().map(|(k, v)| (format!("units[{i}].{k}"), v.clone())));
            for (j, p) in u.persons.iter().enumerate() {
                out.extend(
                    p.iter()
                        .map(|(k, v)| (format!("units[{i}].persons[{j}].{k}"), v.clone())),
                );
            }
        }
        out
    }
}

fn number_word(n: u32) -> String {
    const WORDS: [&str; 9] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
    ];
    WORDS
        .get(n as usize)
        .map_or_else(|| n.to_string(), |w| w.to_string())
}

fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn severity_phrase(s: Severity) -> &'static str {
    match s {
        Severity::NoApparentOrMinor => "no apparent or minor injury",
        Severity::SeriousOrFatal => "a serious or fatal injury",
    }
}

/// Collects fields for one record, applying lexicon maps, null removal and
/// per-record de-duplication of extra attributes.
struct Normalizer<'a> {
    lexicon: &'a Lexicon,
    warnings: Vec<String>,
}

impl Normalizer<'_> {
    fn coded(&mut self, fields: &mut Fields, name: &str, raw: &str) {
        if self.lexicon.is_null(raw) {
            return;
        }
        let raw = raw.trim();
        let phrase = match self.lexicon.fields.get(name) {
            Some(map) => match map.get(raw) {
                Some(p) => p.clone(),
                None => {
                    self.warnings
                        .push(format!("{name}: unmapped code {raw:?} rendered verbatim"));
                    raw.to_string()
                }
            },
            None => raw.to_string(),
        };
        if !self.lexicon.is_null(&phrase) {
            fields.insert(name.to_string(), phrase);
        }
    }

    fn plain(&mut self, fields: &mut Fields, name: &str, value: String) {
        if !self.lexicon.is_null(&value) {
            fields.insert(name.to_string(), value);
        }
    }

    fn extras(&mut self, fields: &mut Fields, extra: &BTreeMap<String, String>) {
        let mut seen: HashSet<String> = fields.values().cloned().collect();
        for (header, raw) in extra {
            let name = format!("extra.{header}");
            let mut tmp = Fields::new();
            self.coded(&mut tmp, &name, raw);
            if let Some(phrase) = tmp.remove(&name) {
                if seen.insert(phrase.clone()) {
                    fields.insert(name, phrase);
                }
            }
        }
    }
}

pub fn normalize(case: &CrashCase, lexicon: &Lexicon) -> NormalizedCase {
    let mut n = Normalizer {
        lexicon,
        warnings: Vec::new(),
    };
    let c = &case.crash;
    let mut crash = Fields::new();
    crash.insert("date".into(), c.occurred_at.format("%B %-d, %Y").to_string());
    crash.insert("day_of_week".into(), c.occurred_at.format("%A").to_string());
    crash.insert("time".into(), c.occurred_at.format("%-I:%M %p").to_string());
    n.plain(&mut crash, "county", c.county.trim().to_string());
    if !lexicon.is_null(&c.route_id) {
        crash.insert("route".into(), lexicon.route_phrase(c.route_id.trim()));
    }
    crash.insert("milepost".into(), format!("{}", c.milepost));
    n.coded(&mut crash, "weather", &c.weather);
    n.coded(&mut crash, "lighting", &c.lighting);
    n.coded(&mut crash, "surface_condition", &c.surface_condition);
    if let Some(lat) = c.latitude {
        crash.insert("latitude".into(), format!("{lat}"));
    }
    if let Some(lon) = c.longitude {
        crash.insert("longitude".into(), format!("{lon}"));
    }
    crash.insert(
        "hit_and_run".into(),
        if c.hit_and_run {
            "was a hit-and-run incident"
        } else {
            "was not a hit-and-run incident"
        }
        .into(),
    );
    let count = case.units.len();
    crash.insert(
        "vehicle_count".into(),
        match count {
            0 => "no recorded vehicles".to_string(),
            1 => "1 vehicle".to_string(),
            k => format!("{k} vehicles"),
        },
    );
    crash.insert("severity".into(), severity_phrase(c.severity).into());
    if let Some(s) = &case.segment {
        crash.insert(
            "locale".into(),
            match s.locale {
                Locale::Rural => "rural",
                Locale::Urban => "urban",
            }
            .into(),
        );
        crash.insert("lane_count".into(), format!("{}-lane", number_word(s.lane_count)));
        crash.insert("lane_width".into(), format!("{}", s.lane_width));
        crash.insert("left_shoulder_width".into(), format!("{}", s.left_shoulder_width));
        crash.insert("right_shoulder_width".into(), format!("{}", s.right_shoulder_width));
        crash.insert("speed_limit".into(), s.speed_limit.to_string());
        n.coded(&mut crash, "surface_type", &s.surface_type);
        crash.insert("aadt".into(), thousands(s.aadt));
    }
    n.extras(&mut crash, &c.extra);

    let mut units: Vec<_> = case.units.iter().collect();
    units.sort_by_key(|u| u.vehicle.unit_id);
    let units = units
        .into_iter()
        .map(|u| {
            let v = &u.vehicle;
            let mut vehicle = Fields::new();
            vehicle.insert("unit_id".into(), v.unit_id.to_string());
            n.plain(&mut vehicle, "make", v.make.trim().to_string());
            n.plain(&mut vehicle, "model", v.model.trim().to_string());
            if let Some(y) = v.model_year {
                vehicle.insert("model_year".into(), y.to_string());
            }
            n.coded(&mut vehicle, "maneuver", &v.maneuver);
            n.extras(&mut vehicle, &v.extra);
            let persons = u
                .persons
                .iter()
                .map(|p| {
                    let mut f = Fields::new();
                    f.insert("unit_id".into(), p.unit_id.to_string());
                    f.insert("role".into(), p.role.as_str().into());
                    if let Some(a) = p.age {
                        f.insert("age".into(), a.to_string());
                    }
                    n.coded(&mut f, "sex", &p.sex);
                    n.coded(&mut f, "restraint", &p.restraint);
                    n.coded(&mut f, "airbag", &p.airbag);
                    n.coded(&mut f, "sobriety", &p.sobriety);
                    f
                })
                .collect();
            NormalizedUnit { vehicle, persons }
        })
        .collect();

    NormalizedCase {
        caseno: c.caseno.clone(),
        label: c.severity,
        crash,
        units,
        warnings: n.warnings,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Crash,
    Vehicle,
    Person,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Descriptive,
    Outcome,
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Part {
    Text(String),
    Required(String),
    Group(Vec<Piece>),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct RawSentence {
    scope: Scope,
    section: Section,
    text: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTemplates {
    sentence: Vec<RawSentence>,
}

/// One sentence template: ordered text, required slots and optional groups.
#[derive(Debug, Clone, PartialEq)]
pub struct NarrativeTemplate {
    pub scope: Scope,
    pub section: Section,
    pub source: String,
    parts: Vec<Part>,
}

const CRASH_SLOTS: &[&str] = &[
    "date",
    "day_of_week",
    "time",
    "county",
    "route",
    "milepost",
    "weather",
    "lighting",
    "surface_condition",
    "latitude",
    "longitude",
    "hit_and_run",
    "vehicle_count",
    "severity",
    "locale",
    "lane_count",
    "lane_width",
    "left_shoulder_width",
    "right_shoulder_width",
    "speed_limit",
    "surface_type",
    "aadt",
    "extras",
];
const VEHICLE_SLOTS: &[&str] = &["unit_id", "make", "model", "model_year", "maneuver", "extras"];
const PERSON_SLOTS: &[&str] = &[
    "unit_id",
    "role",
    "age",
    "sex",
    "restraint",
    "airbag",
    "sobriety",
];

fn slot_valid(scope: Scope, slot: &str) -> bool {
    match scope {
        Scope::Crash => CRASH_SLOTS.contains(&slot) || slot.starts_with("extra."),
        Scope::Vehicle => VEHICLE_SLOTS.contains(&slot) || slot.starts_with("extra."),
        Scope::Person => PERSON_SLOTS.contains(&slot),
    }
}

fn parse_pieces(text: &str, index: usize) -> Result<Vec<Piece>, NarrateError> {
    let err = |message: String| NarrateError::Template { index, message };
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            out.push(Piece::Text(rest[..open].to_string()));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| err(format!("unclosed slot in {text:?}")))?;
        let name = rest[open + 1..open + close].trim();
        if name.is_empty() {
            return Err(err("empty slot name".into()));
        }
        out.push(Piece::Slot(name.to_string()));
        rest = &rest[open + close + 1..];
    }
    if rest.contains('}') {
        return Err(err(format!("stray '}}' in {text:?}")));
    }
    if !rest.is_empty() {
        out.push(Piece::Text(rest.to_string()));
    }
    Ok(out)
}

impl NarrativeTemplate {
    pub fn parse(
        scope: Scope,
        section: Section,
        text: &str,
        index: usize,
    ) -> Result<Self, NarrateError> {
        let err = |message: String| NarrateError::Template { index, message };
        let mut parts = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            match rest.find('[') {
                Some(open) => {
                    for p in parse_pieces(&rest[..open], index)? {
                        parts.push(match p {
                            Piece::Text(t) => Part::Text(t),
                            Piece::Slot(s) => Part::Required(s),
                        });
                    }
                    let close = rest[open..]
                        .find(']')
                        .ok_or_else(|| err(format!("unclosed group in {text:?}")))?;
                    let inner = &rest[open + 1..open + close];
                    if inner.contains('[') {
                        return Err(err("nested groups are not supported".into()));
                    }
                    parts.push(Part::Group(parse_pieces(inner, index)?));
                    rest = &rest[open + close + 1..];
                }
                None => {
                    if rest.contains(']') {
                        return Err(err(format!("stray ']' in {text:?}")));
                    }
                    for p in parse_pieces(rest, index)? {
                        parts.push(match p {
                            Piece::Text(t) => Part::Text(t),
                            Piece::Slot(s) => Part::Required(s),
                        });
                    }
                    rest = "";
                }
            }
        }
        let template = Self {
            scope,
            section,
            source: text.to_string(),
            parts,
        };
        for slot in template.slots() {
            if !slot_valid(scope, slot) {
                return Err(err(format!("slot {slot:?} is not a {scope:?}-scope field")));
            }
        }
        Ok(template)
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().flat_map(|p| -> Vec<&str> {
            match p {
                Part::Required(s) => vec![s.as_str()],
                Part::Group(g) => g
                    .iter()
                    .filter_map(|x| match x {
                        Piece::Slot(s) => Some(s.as_str()),
                        Piece::Text(_) => None,
                    })
                    .collect(),
                Part::Text(_) => vec![],
            }
        })
    }

    fn fill(&self, fields: &Fields, extras: &str, caseno: &str) -> Result<Option<String>, NarrateError> {
        let lookup = |slot: &str| -> Option<String> {
            if slot == "extras" {
                (!extras.is_empty()).then(|| extras.to_string())
            } else {
                fields.get(slot).cloned()
            }
        };
        let mut out = String::new();
        let mut has_required = false;
        let mut any_group = false;
        for part in &self.parts {
            match part {
                Part::Text(t) => out.push_str(t),
                Part::Required(slot) => {
                    has_required = true;
                    let v = lookup(slot).ok_or_else(|| NarrateError::MissingRequiredSlot {
                        slot: slot.clone(),
                        caseno: caseno.to_string(),
                    })?;
                    out.push_str(&v);
                }
                Part::Group(pieces) => {
                    let mut group = String::new();
                    let mut complete = true;
                    for p in pieces {
                        match p {
                            Piece::Text(t) => group.push_str(t),
                            Piece::Slot(s) => match lookup(s) {
                                Some(v) => group.push_str(&v),
                                None => {
                                    complete = false;
                                    break;
                                }
                            },
                        }
                    }
                    if complete {
                        any_group = true;
                        out.push_str(&group);
                    }
                }
            }
        }
        if !has_required && !any_group {
            return Ok(None);
        }
        Ok(Some(out.trim().to_string()))
    }
}

/// Parses and validates a templates file.
pub fn load_templates_str(text: &str) -> Result<Vec<NarrativeTemplate>, NarrateError> {
    let raw: RawTemplates = toml::from_str(text).map_err(|e| NarrateError::Data(e.to_string()))?;
    raw.sentence
        .iter()
        .enumerate()
        .map(|(i, s)| NarrativeTemplate::parse(s.scope, s.section, &s.text, i))
        .collect()
}

pub fn load_templates(path: &Path) -> Result<Vec<NarrativeTemplate>, NarrateError> {
    load_templates_str(&std::fs::read_to_string(path)?)
}

pub fn default_templates() -> Vec<NarrativeTemplate> {
    load_templates_str(DEFAULT_TEMPLATES).expect("bundled templates parse")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarrativePair {
    pub caseno: String,
    pub descriptive: String,
    pub outcome: String,
    pub label: Severity,
}

fn extras_phrase(fields: &Fields, referenced: &BTreeSet<&str>) -> String {
    fields
        .iter()
        .filter(|(k, _)| k.starts_with("extra.") && !referenced.contains(k.as_str()))
        .map(|(_, v)| v.as_str())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Fills the templates in order, keeping descriptive and outcome text apart.
pub fn render(
    case: &NormalizedCase,
    templates: &[NarrativeTemplate],
) -> Result<NarrativePair, NarrateError> {
    let referenced: BTreeSet<&str> = templates.iter().flat_map(|t| t.slots()).collect();
    let crash_extras = extras_phrase(&case.crash, &referenced);
    let mut descriptive = Vec::new();
    let mut outcome = Vec::new();

    let mut i = 0;
    while i < templates.len() {
        let scope = templates[i].scope;
        let mut j = i;
        while j < templates.len() && templates[j].scope == scope {
            j += 1;
        }
        let block = &templates[i..j];
        let mut emit = |t: &NarrativeTemplate, fields: &Fields, extras: &str| {
            if let Some(s) = t.fill(fields, extras, &case.caseno)? {
                match t.section {
                    Section::Descriptive => descriptive.push(s),
                    Section::Outcome => outcome.push(s),
                }
            }
            Ok::<(), NarrateError>(())
        };
        match scope {
            Scope::Crash => {
                for t in block {
                    emit(t, &case.crash, &crash_extras)?;
                }
            }
            Scope::Vehicle => {
                for unit in &case.units {
                    let extras = extras_phrase(&unit.vehicle, &referenced);
                    for t in block {
                        emit(t, &unit.vehicle, &extras)?;
                    }
                }
            }
            Scope::Person => {
                for person in case.units.iter().flat_map(|u| &u.persons) {
                    for t in block {
                        emit(t, person, "")?;
                    }
                }
            }
        }
        i = j;
    }
    Ok(NarrativePair {
        caseno: case.caseno.clone(),
        descriptive: descriptive.join(" "),
        outcome: outcome.join(" "),
        label: case.label,
    })
}

/// Normalizes and renders in one step.
pub fn narrate(
    case: &CrashCase,
    lexicon: &Lexicon,
    templates: &[NarrativeTemplate],
) -> Result<(NarrativePair, Vec<String>), NarrateError> {
    let normalized = normalize(case, lexicon);
    let pair = render(&normalized, templates)?;
    Ok((pair, normalized.warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::*;
    use chrono::NaiveDate;

    pub(crate) fn fig_case() -> CrashCase {
        CrashCase {
            crash: CrashRecord {
                caseno: "E1".into(),
                occurred_at: NaiveDate::from_ymd_opt(2022, 6, 29)
                    .unwrap()
                    .and_hms_opt(20, 0, 0)
                    .unwrap(),
                county: "Chelan".into(),
                route_id: "097ARi".into(),
                milepost: 22.4,
                weather: "1".into(),
                lighting: "3".into(),
                surface_condition: "1".into(),
                latitude: Some(47.9512),
                longitude: Some(-120.0123),
                hit_and_run: false,
                severity: Severity::NoApparentOrMinor,
                extra: BTreeMap::new(),
            },
            segment: Some(RoadSegment {
                route_id: "097ARi".into(),
                from_measure: 20.0,
                to_measure: 25.0,
                lane_count: 2,
                lane_width: 24.0,
                left_shoulder_width: 0.0,
                right_shoulder_width: 7.0,
                speed_limit: 60,
                surface_type: "BST".into(),
                aadt: 4800,
                locale: Locale::Rural,
            }),
            units: vec![],
        }
    }

    #[test]
    fn opening_sentence_matches_published_example() {
        let (pair, warnings) =
            narrate(&fig_case(), &Lexicon::default(), &default_templates()).unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");
        assert!(
            pair.descriptive.starts_with(
                "On June 29, 2022, at 8:00 PM, a traffic accident occurred on Alternate Route 097ARi in Chelan, Washington."
            ),
            "{}",
            pair.descriptive
        );
        assert!(pair.descriptive.contains("under dusk conditions"));
        assert!(pair.descriptive.contains("47.9512"));
        assert!(pair.descriptive.contains("AADT of 4,800"));
        assert!(pair.descriptive.contains("rural two-lane road"));
    }

    #[test]
    fn null_weather_is_dropped() {
        let mut case = fig_case();
        case.crash.weather = "nan".into();
        let n = normalize(&case, &Lexicon::default());
        assert!(!n.crash.contains_key("weather"));
        let pair = render(&n, &default_templates()).unwrap();
        assert!(!pair.descriptive.split_whitespace().any(|w| w == "nan"));
        assert!(!pair.descriptive.contains("weather was"));
    }

    #[test]
    fn code_mapped_to_null_marker_is_dropped() {
        let mut case = fig_case();
        case.crash.weather = "9".into();
        let n = normalize(&case, &Lexicon::default());
        assert!(!n.crash.contains_key("weather"));
    }

    #[test]
    fn duplicate_extra_values_collapse() {
        let mut case = fig_case();
        case.crash.extra.insert("SURFACE_COND_2".into(), "dry".into());
        case.crash.extra.insert("SURFACE_COND_3".into(), "dry".into());
        let n = normalize(&case, &Lexicon::default());
        // "dry" is already the surface_condition phrase
        assert!(n.crash.keys().all(|k| !k.starts_with("extra.SURFACE")));

        let mut case = fig_case();
        case.crash.extra.insert("A".into(), "wet shoulder".into());
        case.crash.extra.insert("B".into(), "wet shoulder".into());
        let n = normalize(&case, &Lexicon::default());
        let extras: Vec<_> = n.crash.keys().filter(|k| k.starts_with("extra.")).collect();
        assert_eq!(extras, vec!["extra.A"]);
    }

    #[test]
    fn unmapped_code_renders_verbatim_with_warning() {
        let mut case = fig_case();
        case.crash.lighting = "42".into();
        let n = normalize(&case, &Lexicon::default());
        assert_eq!(n.crash["lighting"], "42");
        assert_eq!(n.warnings.len(), 1);
    }

    #[test]
    fn zero_vehicles_render_no_vehicle_sentences() {
        let (pair, _) = narrate(&fig_case(), &Lexicon::default(), &default_templates()).unwrap();
        assert!(!pair.descriptive.contains("Unit "));
        assert!(pair.descriptive.contains("involved no recorded vehicles."));
        assert!(!pair.descriptive.contains("  "));
        assert!(!pair.descriptive.contains(" ,"));
        assert!(!pair.descriptive.contains(" ."));
    }

    #[test]
    fn missing_required_slot_errors() {
        let t = vec![
            NarrativeTemplate::parse(Scope::Crash, Section::Descriptive, "In {county}.", 0)
                .unwrap(),
        ];
        let mut case = fig_case();
        case.crash.county = "Unknown".into();
        let n = normalize(&case, &Lexicon::default());
        match render(&n, &t) {
            Err(NarrateError::MissingRequiredSlot { slot, caseno }) => {
                assert_eq!(slot, "county");
                assert_eq!(caseno, "E1");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn template_validation_rejects_unknown_slots() {
        assert!(NarrativeTemplate::parse(Scope::Person, Section::Descriptive, "{make}", 0).is_err());
        assert!(NarrativeTemplate::parse(Scope::Crash, Section::Descriptive, "[{date}", 0).is_err());
        assert!(NarrativeTemplate::parse(Scope::Crash, Section::Descriptive, "{date", 0).is_err());
        assert!(
            NarrativeTemplate::parse(Scope::Crash, Section::Descriptive, "[a [b]]", 0).is_err()
        );
    }

    #[test]
    fn severity_phrase_only_in_outcome() {
        let (pair, _) = narrate(&fig_case(), &Lexicon::default(), &default_templates()).unwrap();
        assert!(pair.outcome.contains("no apparent or minor injury"));
        assert!(!pair.descriptive.to_lowercase().contains("injury"));
    }

    #[test]
    fn number_helpers() {
        assert_eq!(thousands(4800), "4,800");
        assert_eq!(thousands(1_234_567), "1,234,567");
        assert_eq!(thousands(12), "12");
        assert_eq!(number_word(2), "two");
        assert_eq!(number_word(12), "12");
    }
}
