//! Relational crash tables and their integration into nested cases.
//!
//! Four tables are ingested (crash, road segment, vehicle, person), typed,
//! validated, and joined into one [`CrashCase`] per crash row: the crash links
//! to at most one road segment by milepost, vehicles hang off the crash by
//! `caseno`, persons hang off their vehicle by `(caseno, unit_id)`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDateTime;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("cannot open {path}: {source}")]
    MissingFile {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{table} table is missing column {column}")]
    MissingColumn { table: Table, column: String },
    #[error("duplicate key {0} in crash table")]
    DuplicateKey(String),
    #[error("malformed CSV in {table} table: {message}")]
    Csv { table: Table, message: String },
    #[error("downsampling needs {needed} majority cases but only {available} exist")]
    InsufficientMajority { needed: usize, available: usize },
    #[error("target ratio must be positive and finite, got {0}")]
    InvalidRatio(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binary injury-severity label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Severity {
    NoApparentOrMinor,
    SeriousOrFatal,
}

impl Severity {
    pub const ALL: [Severity; 2] = [Severity::NoApparentOrMinor, Severity::SeriousOrFatal];

    /// Label string used in prompts, responses and the SFT dataset.
    pub fn label(self) -> &'static str {
        match self {
            Severity::NoApparentOrMinor => "No apparent or minor injury",
            Severity::SeriousOrFatal => "Serious injury or fatal",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Severity::NoApparentOrMinor => 0,
            Severity::SeriousOrFatal => 1,
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Severity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase();
        match norm.as_str() {
            "noapparentorminor" | "no apparent or minor injury" | "minor" | "0" => {
                Ok(Severity::NoApparentOrMinor)
            }
            "seriousorfatal" | "serious injury or fatal" | "serious injury or fatal accident"
            | "severe" | "1" => Ok(Severity::SeriousOrFatal),
            _ => Err(format!("unrecognized severity {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Locale {
    Rural,
    Urban,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonRole {
    Driver,
    Passenger,
    Pedestrian,
}

impl PersonRole {
    pub fn as_str(self) -> &'static str {
        match self {
            PersonRole::Driver => "driver",
            PersonRole::Passenger => "passenger",
            PersonRole::Pedestrian => "pedestrian",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub caseno: String,
    pub occurred_at: NaiveDateTime,
    pub county: String,
    pub route_id: String,
    pub milepost: f64,
    pub weather: String,
    pub lighting: String,
    pub surface_condition: String,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    pub hit_and_run: bool,
    pub severity: Severity,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub route_id: String,
    pub from_measure: f64,
    pub to_measure: f64,
    pub lane_count: u32,
    pub lane_width: f64,
    pub left_shoulder_width: f64,
    pub right_shoulder_width: f64,
    pub speed_limit: u32,
    pub surface_type: String,
    pub aadt: u64,
    pub locale: Locale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub caseno: String,
    pub unit_id: u32,
    pub make: String,
    pub model: String,
    pub model_year: Option<i32>,
    pub maneuver: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub caseno: String,
    pub unit_id: u32,
    pub role: PersonRole,
    pub age: Option<u32>,
    pub sex: String,
    pub restraint: String,
    pub airbag: String,
    pub sobriety: String,
}

/// One vehicle and the persons attached to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub vehicle: VehicleRecord,
    pub persons: Vec<PersonRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashCase {
    pub crash: CrashRecord,
    pub segment: Option<RoadSegment>,
    pub units: Vec<Unit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Table {
    Crash,
    Segment,
    Vehicle,
    Person,
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Table::Crash => "crash",
            Table::Segment => "segment",
            Table::Vehicle => "vehicle",
            Table::Person => "person",
        })
    }
}

/// A CSV row that failed type coercion or validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub table: Table,
    /// 1-based data row number (the header is row 0).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableSet {
    pub crashes: Vec<CrashRecord>,
    pub segments: Vec<RoadSegment>,
    pub vehicles: Vec<VehicleRecord>,
    pub persons: Vec<PersonRecord>,
    pub rejects: Vec<Reject>,
}

/// Maps record fields to CSV header names, one map per table.
///
/// Columns present in the CSV but not mapped end up in the record's `extra`
/// map (crash and vehicle tables) keyed by their header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub crash: BTreeMap<String, String>,
    pub segment: BTreeMap<String, String>,
    pub vehicle: BTreeMap<String, String>,
    pub person: BTreeMap<String, String>,
}

const CRASH_FIELDS: &[(&str, &str)] = &[
    ("caseno", "CASENO"),
    ("occurred_at", "DATE_TIME"),
    ("county", "COUNTY"),
    ("route_id", "ROUTE_ID"),
    ("milepost", "MILEPOST"),
    ("weather", "WEATHER"),
    ("lighting", "LIGHTING"),
    ("surface_condition", "SURFACE_COND"),
    ("latitude", "LATITUDE"),
    ("longitude", "LONGITUDE"),
    ("hit_and_run", "HIT_AND_RUN"),
    ("severity", "SEVERITY"),
];
const SEGMENT_FIELDS: &[(&str, &str)] = &[
    ("route_id", "ROUTE_ID"),
    ("from_measure", "FROM_MEASURE"),
    ("to_measure", "TO_MEASURE"),
    ("lane_count", "LANE_CNT"),
    ("lane_width", "LANE_WIDTH"),
    ("left_shoulder_width", "LEFT_SHOULDER_WIDTH"),
    ("right_shoulder_width", "RIGHT_SHOULDER_WIDTH"),
    ("speed_limit", "SPEED_LIMIT"),
    ("surface_type", "SURFACE_TYPE"),
    ("aadt", "AADT"),
    ("locale", "LOCALE"),
];
const VEHICLE_FIELDS: &[(&str, &str)] = &[
    ("caseno", "CASENO"),
    ("unit_id", "UNIT_ID"),
    ("make", "MAKE"),
    ("model", "MODEL"),
    ("model_year", "MODEL_YEAR"),
    ("maneuver", "MANEUVER"),
];
const PERSON_FIELDS: &[(&str, &str)] = &[
    ("caseno", "CASENO"),
    ("unit_id", "UNIT_ID"),
    ("role", "ROLE"),
    ("age", "AGE"),
    ("sex", "SEX"),
    ("restraint", "RESTRAINT"),
    ("airbag", "AIRBAG"),
    ("sobriety", "SOBRIETY"),
];

fn defaults(fields: &[(&str, &str)]) -> BTreeMap<String, String> {
    fields
        .iter()
        .map(|(f, h)| (f.to_string(), h.to_string()))
        .collect()
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            crash: defaults(CRASH_FIELDS),
            segment: defaults(SEGMENT_FIELDS),
            vehicle: defaults(VEHICLE_FIELDS),
            person: defaults(PERSON_FIELDS),
        }
    }
}

impl ColumnMap {
    /// Fills fields the user did not override with default headers.
    pub fn with_defaults(mut self) -> Self {
        for (map, fields) in [
            (&mut self.crash, CRASH_FIELDS),
            (&mut self.segment, SEGMENT_FIELDS),
            (&mut self.vehicle, VEHICLE_FIELDS),
            (&mut self.person, PERSON_FIELDS),
        ] {
            for (f, h) in fields {
                map.entry(f.to_string()).or_insert_with(|| h.to_string());
            }
        }
        self
    }

    /// Field names that are not among the known record fields.
    pub fn unknown_fields(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, map, fields) in [
            ("crash", &self.crash, CRASH_FIELDS),
            ("segment", &self.segment, SEGMENT_FIELDS),
            ("vehicle", &self.vehicle, VEHICLE_FIELDS),
            ("person", &self.person, PERSON_FIELDS),
        ] {
            for key in map.keys() {
                if !fields.iter().any(|(f, _)| f == key) {
                    out.push(format!("columns.{name}.{key}"));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    /// Inclusive upper bound for vehicle model years.
    pub max_model_year: i32,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            max_model_year: current_year() + 1,
        }
    }
}

fn current_year() -> i32 {
    #[cfg(not(target_arch = "wasm32"))]
    {
        use chrono::Datelike;
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0);
        chrono::DateTime::from_timestamp(secs, 0)
            .map(|t| t.year())
            .unwrap_or(2026)
    }
    #[cfg(target_arch = "wasm32")]
    {
        2026
    }
}

/// Column positions resolved against a header row.
struct Columns<'a> {
    table: Table,
    index: HashMap<&'a str, usize>,
    extras: Vec<(usize, String)>,
}

impl<'a> Columns<'a> {
    fn resolve(
        table: Table,
        headers: &csv::StringRecord,
        map: &'a BTreeMap<String, String>,
        keys: &[&str],
    ) -> Result<Self, SchemaError> {
        let header_pos: HashMap<&str, usize> =
            headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
        let mut index = HashMap::new();
        let mut missing = Vec::new();
        for (field, header) in map {
            match header_pos.get(header.as_str()) {
                Some(&i) => {
                    index.insert(field.as_str(), i);
                }
                None => missing.push((field.as_str(), header.clone())),
            }
        }
        // Key columns first so the error names the most important one.
        missing.sort_by_key(|(f, _)| !keys.contains(f));
        if let Some((_, header)) = missing.into_iter().next() {
            return Err(SchemaError::MissingColumn {
                table,
                column: header,
            });
        }
        let mapped: HashSet<usize> = index.values().copied().collect();
        let extras = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !mapped.contains(i))
            .map(|(i, h)| (i, h.trim().to_string()))
            .collect();
        Ok(Self {
            table,
            index,
            extras,
        })
    }

    fn raw<'r>(&self, row: &'r csv::StringRecord, field: &str) -> &'r str {
        self.index
            .get(field)
            .and_then(|&i| row.get(i))
            .unwrap_or("")
            .trim()
    }

    fn text(&self, row: &csv::StringRecord, field: &str) -> String {
        self.raw(row, field).to_string()
    }

    fn parse<T: FromStr>(&self, row: &csv::StringRecord, field: &str) -> Result<T, String> {
        let raw = self.raw(row, field);
        raw.parse::<T>()
            .map_err(|_| format!("{field}: cannot parse {raw:?}"))
    }

    fn parse_opt<T: FromStr>(
        &self,
        row: &csv::StringRecord,
        field: &str,
    ) -> Result<Option<T>, String> {
        let raw = self.raw(row, field);
        if raw.is_empty() {
            return Ok(None);
        }
        raw.parse::<T>()
            .map(Some)
            .map_err(|_| format!("{field}: cannot parse {raw:?}"))
    }

    fn extra(&self, row: &csv::StringRecord) -> BTreeMap<String, String> {
        self.extras
            .iter()
            .filter_map(|(i, h)| row.get(*i).map(|v| (h.clone(), v.trim().to_string())))
            .collect()
    }
}

fn parse_timestamp(raw: &str) -> Result<NaiveDateTime, String> {
    const FORMATS: &[&str] = &[
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
        "%m/%d/%Y %H:%M",
        "%m/%d/%Y %I:%M %p",
    ];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
        .ok_or_else(|| format!("occurred_at: cannot parse {raw:?}"))
}

fn parse_bool(raw: &str) -> Result<bool, String> {
    match raw.to_ascii_lowercase().as_str() {
        "y" | "yes" | "true" | "1" => Ok(true),
        "n" | "no" | "false" | "0" | "" => Ok(false),
        _ => Err(format!("hit_and_run: cannot parse {raw:?}")),
    }
}

fn reader_for<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(source)
}

fn csv_err(table: Table, e: csv::Error) -> SchemaError {
    SchemaError::Csv {
        table,
        message: e.to_string(),
    }
}

/// Reads every row of a table, collecting rows whose parser fails into `rejects`.
fn read_rows<R: Read, T>(
    table: Table,
    source: R,
    map: &BTreeMap<String, String>,
    keys: &[&str],
    rejects: &mut Vec<Reject>,
    mut parse: impl FnMut(&Columns<'_>, &csv::StringRecord) -> Result<T, String>,
) -> Result<Vec<T>, SchemaError> {
    let mut rdr = reader_for(source);
    let headers = rdr.headers().map_err(|e| csv_err(table, e))?.clone();
    let cols = Columns::resolve(table, &headers, map, keys)?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| csv_err(table, e))?;
        match parse(&cols, &row) {
            Ok(rec) => out.push(rec),
            Err(reason) => rejects.push(Reject {
                table: cols.table,
                row: i + 1,
                reason,
            }),
        }
    }
    Ok(out)
}

fn parse_crash(c: &Columns<'_>, row: &csv::StringRecord) -> Result<CrashRecord, String> {
    let caseno = c.text(row, "caseno");
    if caseno.is_empty() {
        return Err("caseno: empty".into());
    }
    let milepost: f64 = c.parse(row, "milepost")?;
    if !(milepost >= 0.0) || !milepost.is_finite() {
        return Err(format!("milepost: {milepost} is negative or not finite"));
    }
    let severity = c
        .raw(row, "severity")
        .parse::<Severity>()
        .map_err(|e| format!("severity: {e}"))?;
    Ok(CrashRecord {
        caseno,
        occurred_at: parse_timestamp(c.raw(row, "occurred_at"))?,
        county: c.text(row, "county"),
        route_id: c.text(row, "route_id"),
        milepost,
        weather: c.text(row, "weather"),
        lighting: c.text(row, "lighting"),
        surface_condition: c.text(row, "surface_condition"),
        latitude: c.parse_opt(row, "latitude")?,
        longitude: c.parse_opt(row, "longitude")?,
        hit_and_run: parse_bool(c.raw(row, "hit_and_run"))?,
        severity,
        extra: c.extra(row),
    })
}

fn parse_segment(c: &Columns<'_>, row: &csv::StringRecord) -> Result<RoadSegment, String> {
    let from_measure: f64 = c.parse(row, "from_measure")?;
    let to_measure: f64 = c.parse(row, "to_measure")?;
    if !(from_measure < to_measure) {
        return Err(format!(
            "from_measure {from_measure} is not below to_measure {to_measure}"
        ));
    }
    let lane_count: u32 = c.parse(row, "lane_count")?;
    if lane_count < 1 {
        return Err("lane_count: must be at least 1".into());
    }
    let locale = match c.raw(row, "locale").to_ascii_lowercase().as_str() {
        "rural" | "r" => Locale::Rural,
        "urban" | "u" => Locale::Urban,
        other => return Err(format!("locale: cannot parse {other:?}")),
    };
    Ok(RoadSegment {
        route_id: c.text(row, "route_id"),
        from_measure,
        to_measure,
        lane_count,
        lane_width: c.parse(row, "lane_width")?,
        left_shoulder_width: c.parse(row, "left_shoulder_width")?,
        right_shoulder_width: c.parse(row, "right_shoulder_width")?,
        speed_limit: c.parse(row, "speed_limit")?,
        surface_type: c.text(row, "surface_type"),
        aadt: c.parse(row, "aadt")?,
        locale,
    })
}

fn parse_vehicle(
    c: &Columns<'_>,
    row: &csv::StringRecord,
    max_year: i32,
) -> Result<VehicleRecord, String> {
    let model_year: Option<i32> = c.parse_opt(row, "model_year")?;
    if let Some(y) = model_year {
        if !(1900..=max_year).contains(&y) {
            return Err(format!("model_year: {y} outside [1900, {max_year}]"));
        }
    }
    Ok(VehicleRecord {
        caseno: c.text(row, "caseno"),
        unit_id: c.parse(row, "unit_id")?,
        make: c.text(row, "make"),
        model: c.text(row, "model"),
        model_year,
        maneuver: c.text(row, "maneuver"),
        extra: c.extra(row),
    })
}

fn parse_person(c: &Columns<'_>, row: &csv::StringRecord) -> Result<PersonRecord, String> {
    let role = match c.raw(row, "role").to_ascii_lowercase().as_str() {
        "driver" | "d" => PersonRole::Driver,
        "passenger" | "p" => PersonRole::Passenger,
        "pedestrian" | "ped" => PersonRole::Pedestrian,
        other => return Err(format!("role: cannot parse {other:?}")),
    };
    let age: Option<u32> = c.parse_opt(row, "age")?;
    if let Some(a) = age {
        if a > 120 {
            return Err(format!("age: {a} outside [0, 120]"));
        }
    }
    Ok(PersonRecord {
        caseno: c.text(row, "caseno"),
        unit_id: c.parse(row, "unit_id")?,
        role,
        age,
        sex: c.text(row, "sex"),
        restraint: c.text(row, "restraint"),
        airbag: c.text(row, "airbag"),
        sobriety: c.text(row, "sobriety"),
    })
}

/// Paths to the four input tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TablePaths {
    pub crash: PathBuf,
    pub segment: PathBuf,
    pub vehicle: PathBuf,
    pub person: PathBuf,
}

impl TablePaths {
    /// `crash.csv`, `segment.csv`, `vehicle.csv`, `person.csv` under `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            crash: dir.join("crash.csv"),
            segment: dir.join("segment.csv"),
            vehicle: dir.join("vehicle.csv"),
            person: dir.join("person.csv"),
        }
    }
}

fn open(path: &Path) -> Result<File, SchemaError> {
    File::open(path).map_err(|source| SchemaError::MissingFile {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_tables(
    paths: &TablePaths,
    columns: &ColumnMap,
    opts: &LoadOptions,
) -> Result<TableSet, SchemaError> {
    let crash = open(&paths.crash)?;
    let segment = open(&paths.segment)?;
    let vehicle = open(&paths.vehicle)?;
    let person = open(&paths.person)?;
    load_tables_from_readers(crash, segment, vehicle, person, columns, opts)
}

/// Same as [`load_tables`] over arbitrary readers (used for embedded corpora).
pub fn load_tables_from_readers<A: Read, B: Read, C: Read, D: Read>(
    crash: A,
    segment: B,
    vehicle: C,
    person: D,
    columns: &ColumnMap,
    opts: &LoadOptions,
) -> Result<TableSet, SchemaError> {
    let mut rejects = Vec::new();
    let crashes = read_rows(
        Table::Crash,
        crash,
        &columns.crash,
        &["caseno"],
        &mut rejects,
        parse_crash,
    )?;
    let mut seen = HashSet::new();
    for c in &crashes {
        if !seen.insert(c.caseno.as_str()) {
            return Err(SchemaError::DuplicateKey(c.caseno.clone()));
        }
    }
    let segments = read_rows(
        Table::Segment,
        segment,
        &columns.segment,
        &["route_id", "from_measure", "to_measure"],
        &mut rejects,
        parse_segment,
    )?;
    let max_year = opts.max_model_year;
    let mut vehicles = read_rows(
        Table::Vehicle,
        vehicle,
        &columns.vehicle,
        &["caseno", "unit_id"],
        &mut rejects,
        |c, r| parse_vehicle(c, r, max_year),
    )?;
    let mut seen_units = HashSet::new();
    vehicles.retain(|v| {
        let fresh = seen_units.insert((v.caseno.clone(), v.unit_id));
        if !fresh {
            rejects.push(Reject {
                table: Table::Vehicle,
                row: 0,
                reason: format!("duplicate unit ({}, {})", v.caseno, v.unit_id),
            });
        }
        fresh
    });
    let persons = read_rows(
        Table::Person,
        person,
        &columns.person,
        &["caseno", "unit_id"],
        &mut rejects,
        parse_person,
    )?;
    Ok(TableSet {
        crashes,
        segments,
        vehicles,
        persons,
        rejects,
    })
}

/// Result of matching one crash against the segment table.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMatch {
    pub segment: Option<RoadSegment>,
    /// Number of segments whose interval contains the milepost.
    pub candidates: usize,
}

impl SegmentMatch {
    pub fn is_ambiguous(&self) -> bool {
        self.candidates > 1
    }
}

/// Segments grouped by route and ordered by `from_measure`.
#[derive(Debug, Clone, Default)]
pub struct SegmentIndex {
    by_route: HashMap<String, Vec<RoadSegment>>,
}

impl SegmentIndex {
    pub fn new(segments: &[RoadSegment]) -> Self {
        let mut by_route: HashMap<String, Vec<RoadSegment>> = HashMap::new();
        for s in segments {
            by_route.entry(s.route_id.clone()).or_default().push(s.clone());
        }
        for list in by_route.values_mut() {
            list.sort_by(|a, b| a.from_measure.total_cmp(&b.from_measure));
        }
        Self { by_route }
    }

    /// Half-open lookup: `from_measure <= milepost < to_measure`.
    pub fn link(&self, crash: &CrashRecord) -> SegmentMatch {
        let Some(list) = self.by_route.get(&crash.route_id) else {
            return SegmentMatch {
                segment: None,
                candidates: 0,
            };
        };
        let mut hits = list
            .iter()
            .filter(|s| s.from_measure <= crash.milepost && crash.milepost < s.to_measure);
        let first = hits.next().cloned();
        let candidates = first.as_ref().map_or(0, |_| 1 + hits.count());
        SegmentMatch {
            segment: first,
            candidates,
        }
    }
}

pub fn link_segment(crash: &CrashRecord, segments: &[RoadSegment]) -> SegmentMatch {
    SegmentIndex::new(segments).link(crash)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OrphanReport {
    pub vehicles: Vec<VehicleRecord>,
    pub persons: Vec<PersonRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Integration {
    pub cases: Vec<CrashCase>,
    pub orphans: OrphanReport,
    pub warnings: Vec<String>,
}

/// Joins the four tables into one case per crash row, in crash-table order.
///
/// Units are ordered by `unit_id`; persons keep table order within a unit.
pub fn integrate(tables: &TableSet) -> Integration {
    let index = SegmentIndex::new(&tables.segments);
    let crash_keys: HashSet<&str> = tables.crashes.iter().map(|c| c.caseno.as_str()).collect();

    let mut orphans = OrphanReport::default();
    let mut units_by_case: HashMap<&str, Vec<Unit>> = HashMap::new();
    for v in &tables.vehicles {
        if crash_keys.contains(v.caseno.as_str()) {
            units_by_case.entry(v.caseno.as_str()).or_default().push(Unit {
                vehicle: v.clone(),
                persons: Vec::new(),
            });
        } else {
            orphans.vehicles.push(v.clone());
        }
    }
    for units in units_by_case.values_mut() {
        units.sort_by_key(|u| u.vehicle.unit_id);
    }
    for p in &tables.persons {
        let slot = units_by_case
            .get_mut(p.caseno.as_str())
            .and_then(|units| units.iter_mut().find(|u| u.vehicle.unit_id == p.unit_id));
        match slot {
            Some(unit) => unit.persons.push(p.clone()),
            None => orphans.persons.push(p.clone()),
        }
    }

    let mut warnings = Vec::new();
    let cases = tables
        .crashes
        .iter()
        .map(|crash| {
            let m = index.link(crash);
            if m.is_ambiguous() {
                warnings.push(format!(
                    "case {}: milepost {} matches {} segments on route {}; using the one starting at {}",
                    crash.caseno,
                    crash.milepost,
                    m.candidates,
                    crash.route_id,
                    m.segment.as_ref().map_or(f64::NAN, |s| s.from_measure),
                ));
            }
            CrashCase {
                crash: crash.clone(),
                segment: m.segment,
                units: units_by_case.remove(crash.caseno.as_str()).unwrap_or_default(),
            }
        })
        .collect();
    Integration {
        cases,
        orphans,
        warnings,
    }
}

/// Keeps every minority-class case and a seeded uniform sample of
/// `round(target_ratio * minority)` majority cases, preserving input order.
pub fn stratified_downsample(
    cases: &[CrashCase],
    target_ratio: f64,
    seed: u64,
) -> Result<Vec<CrashCase>, SchemaError> {
    if !(target_ratio > 0.0) || !target_ratio.is_finite() {
        return Err(SchemaError::InvalidRatio(target_ratio));
    }
    let count = |s: Severity| cases.iter().filter(|c| c.crash.severity == s).count();
    let (minor, severe) = (count(Severity::NoApparentOrMinor), count(Severity::SeriousOrFatal));
    let majority = if minor > severe {
        Severity::NoApparentOrMinor
    } else {
        Severity::SeriousOrFatal
    };
    let (n_major, n_minor) = if minor > severe {
        (minor, severe)
    } else {
        (severe, minor)
    };
    let needed = (target_ratio * n_minor as f64).round() as usize;
    if needed > n_major {
        return Err(SchemaError::InsufficientMajority {
            needed,
            available: n_major,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = vec![false; n_major];
    for i in sample(&mut rng, n_major, needed) {
        picked[i] = true;
    }
    let mut major_pos = 0usize;
    let mut out = Vec::with_capacity(n_minor + needed);
    for case in cases {
        if case.crash.severity == majority {
            if picked[major_pos] {
                out.push(case.clone());
            }
            major_pos += 1;
        } else {
            out.push(case.clone());
        }
    }
    Ok(out)
}

/// Writes one JSON object per line. Keys follow struct declaration order.
pub fn write_cases<W: Write>(cases: &[CrashCase], mut out: W) -> Result<(), SchemaError> {
    for case in cases {
        serde_json::to_writer(&mut out, case).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn serialize_cases(cases: &[CrashCase], path: impl AsRef<Path>) -> Result<(), SchemaError> {
    let mut buf = Vec::new();
    write_cases(cases, &mut buf)?;
    crate::io::write_atomic(path.as_ref(), &buf)?;
    Ok(())
}

pub fn read_cases<R: Read>(source: R) -> Result<Vec<CrashCase>, SchemaError> {
    crate::io::read_jsonl(BufReader::new(source)).map_err(|e| match e {
        crate::io::JsonlError::Io(e) => SchemaError::Io(e),
        crate::io::JsonlError::Parse { line, message } => SchemaError::Parse { line, message },
    })
}

pub fn deserialize_cases(path: impl AsRef<Path>) -> Result<Vec<CrashCase>, SchemaError> {
    read_cases(open(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn crash(caseno: &str, route: &str, milepost: f64, severity: Severity) -> CrashRecord {
        CrashRecord {
            caseno: caseno.into(),
            occurred_at: NaiveDate::from_ymd_opt(2022, 6, 29)
                .unwrap()
                .and_hms_opt(20, 0, 0)
                .unwrap(),
            county: "Chelan".into(),
            route_id: route.into(),
            milepost,
            weather: "1".into(),
            lighting: "3".into(),
            surface_condition: "1".into(),
            latitude: Some(47.9512),
            longitude: Some(-120.0123),
            hit_and_run: false,
            severity,
            extra: BTreeMap::new(),
        }
    }

    fn segment(route: &str, from: f64, to: f64) -> RoadSegment {
        RoadSegment {
            route_id: route.into(),
            from_measure: from,
            to_measure: to,
            lane_count: 2,
            lane_width: 12.0,
            left_shoulder_width: 0.0,
            right_shoulder_width: 7.0,
            speed_limit: 60,
            surface_type: "BST".into(),
            aadt: 4800,
            locale: Locale::Rural,
        }
    }

    #[test]
    fn links_milepost_inside_segment() {
        let c = crash("A1", "097ARi", 22.4, Severity::NoApparentOrMinor);
        let segs = vec![segment("097ARi", 20.0, 25.0), segment("097ARi", 25.0, 30.0)];
        let m = link_segment(&c, &segs);
        assert_eq!(m.segment.as_ref().unwrap().from_measure, 20.0);
        assert!(!m.is_ambiguous());
    }

    #[test]
    fn half_open_boundaries() {
        let segs = vec![segment("R", 20.0, 25.0)];
        let at_from = crash("A", "R", 20.0, Severity::NoApparentOrMinor);
        let at_to = crash("B", "R", 25.0, Severity::NoApparentOrMinor);
        assert!(link_segment(&at_from, &segs).segment.is_some());
        assert!(link_segment(&at_to, &segs).segment.is_none());
    }

    #[test]
    fn overlapping_segments_pick_smallest_start() {
        let c = crash("A1", "097ARi", 22.4, Severity::NoApparentOrMinor);
        let segs = vec![segment("097ARi", 22.0, 30.0), segment("097ARi", 20.0, 25.0)];
        // brute-force scan: both contain the milepost
        let brute = segs
            .iter()
            .filter(|s| s.from_measure <= 22.4 && 22.4 < s.to_measure)
            .count();
        assert_eq!(brute, 2);
        let m = link_segment(&c, &segs);
        assert_eq!(m.candidates, 2);
        assert_eq!(m.segment.unwrap().from_measure, 20.0);
    }

    #[test]
    fn other_route_does_not_match() {
        let c = crash("A1", "542i", 22.4, Severity::NoApparentOrMinor);
        assert!(link_segment(&c, &[segment("097ARi", 20.0, 25.0)]).segment.is_none());
    }

    fn minimal_case(caseno: &str, severity: Severity) -> CrashCase {
        CrashCase {
            crash: crash(caseno, "R", 1.0, severity),
            segment: None,
            units: vec![],
        }
    }

    #[test]
    fn downsample_ratio_one_is_noop() {
        let mut cases = Vec::new();
        for i in 0..20 {
            let s = if i % 2 == 0 {
                Severity::NoApparentOrMinor
            } else {
                Severity::SeriousOrFatal
            };
            cases.push(minimal_case(&format!("C{i}"), s));
        }
        let out = stratified_downsample(&cases, 1.0, 3).unwrap();
        assert_eq!(out, cases);
    }

    #[test]
    fn downsample_insufficient_majority() {
        let cases: Vec<_> = (0..6)
            .map(|i| {
                let s = if i < 4 {
                    Severity::NoApparentOrMinor
                } else {
                    Severity::SeriousOrFatal
                };
                minimal_case(&format!("C{i}"), s)
            })
            .collect();
        let err = stratified_downsample(&cases, 3.0, 1).unwrap_err();
        assert!(matches!(
            err,
            SchemaError::InsufficientMajority {
                needed: 6,
                available: 4
            }
        ));
        assert!(matches!(
            stratified_downsample(&cases, 0.0, 1),
            Err(SchemaError::InvalidRatio(_))
        ));
    }

    #[test]
    fn downsample_is_seeded_and_order_preserving() {
        let cases: Vec<_> = (0..100)
            .map(|i| {
                let s = if i % 10 == 0 {
                    Severity::SeriousOrFatal
                } else {
                    Severity::NoApparentOrMinor
                };
                minimal_case(&format!("C{i:03}"), s)
            })
            .collect();
        let a = stratified_downsample(&cases, 2.0, 11).unwrap();
        let b = stratified_downsample(&cases, 2.0, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        let ids: Vec<_> = a.iter().map(|c| c.crash.caseno.clone()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn severity_parses_common_spellings() {
        assert_eq!("severe".parse::<Severity>().unwrap(), Severity::SeriousOrFatal);
        assert_eq!(
            "No apparent or minor injury".parse::<Severity>().unwrap(),
            Severity::NoApparentOrMinor
        );
        assert!("moderate".parse::<Severity>().is_err());
    }

    #[test]
    fn jsonl_truncated_line_reports_line_number() {
        let cases = vec![
            minimal_case("A", Severity::NoApparentOrMinor),
            minimal_case("B", Severity::SeriousOrFatal),
        ];
        let mut buf = Vec::new();
        write_cases(&cases, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = &text[..text.len() - 10];
        match read_cases(cut.as_bytes()) {
            Err(SchemaError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert_eq!(read_cases(text.as_bytes()).unwrap(), cases);
        assert!(read_cases(&b""[..]).unwrap().is_empty());
    }
}
