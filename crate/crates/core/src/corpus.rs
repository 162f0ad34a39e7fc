//! Deterministic synthetic crash tables.
//!
//! The generator produces the four CSV tables with the default column
//! layout. Severity follows a noisy logistic rule over motorcycle
//! involvement, restraint use, sobriety, speed limit, lighting and
//! collision type, so a small model has something real to learn. Case 1
//! reproduces the published example crash; case 2 is a severe motorcycle
//! rear-end crash.
//!
//! The bundled 50-case corpus under `data/corpus/` is `generate(50, 7)`;
//! regenerate it with `cargo run --example gen_corpus`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::schema::{load_tables_from_readers, ColumnMap, LoadOptions, SchemaError, TableSet};

pub const BUNDLED_CRASH_CSV: &str = include_str!("../data/corpus/crash.csv");
pub const BUNDLED_SEGMENT_CSV: &str = include_str!("../data/corpus/segment.csv");
pub const BUNDLED_VEHICLE_CSV: &str = include_str!("../data/corpus/vehicle.csv");
pub const BUNDLED_PERSON_CSV: &str = include_str!("../data/corpus/person.csv");

pub const BUNDLED_CASES: usize = 50;
pub const BUNDLED_SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusCsv {
    pub crash: String,
    pub segment: String,
    pub vehicle: String,
    pub person: String,
}

impl CorpusCsv {
    pub fn bundled() -> Self {
        Self {
            crash: BUNDLED_CRASH_CSV.into(),
            segment: BUNDLED_SEGMENT_CSV.into(),
            vehicle: BUNDLED_VEHICLE_CSV.into(),
            person: BUNDLED_PERSON_CSV.into(),
        }
    }

    pub fn load(&self) -> Result<TableSet, SchemaError> {
        load_tables_from_readers(
            self.crash.as_bytes(),
            self.segment.as_bytes(),
            self.vehicle.as_bytes(),
            self.person.as_bytes(),
            &ColumnMap::default(),
            &LoadOptions::default(),
        )
    }

    /// Writes `crash.csv`, `segment.csv`, `vehicle.csv` and `person.csv`.
    pub fn write_dir(&self, dir: &std::path::Path) -> std::io::Result<()> {
        for (name, body) in [
            ("crash.csv", &self.crash),
            ("segment.csv", &self.segment),
            ("vehicle.csv", &self.vehicle),
            ("person.csv", &self.person),
        ] {
            crate::io::write_atomic(&dir.join(name), body.as_bytes())?;
        }
        Ok(())
    }
}

struct Route {
    id: &'static str,
    county: &'static str,
    length: f64,
    lat: f64,
    lon: f64,
}

const ROUTES: &[Route] = &[
    Route { id: "097ARi", county: "Chelan", length: 40.0, lat: 47.9, lon: -120.0 },
    Route { id: "542i", county: "Whatcom", length: 58.0, lat: 48.8, lon: -122.1 },
    Route { id: "002i", county: "Snohomish", length: 64.0, lat: 47.8, lon: -121.6 },
    Route { id: "020SPi", county: "Skagit", length: 12.0, lat: 48.5, lon: -122.6 },
    Route { id: "012i", county: "Yakima", length: 70.0, lat: 46.6, lon: -120.7 },
    Route { id: "395i", county: "Franklin", length: 45.0, lat: 46.4, lon: -119.0 },
    Route { id: "005COi", county: "King", length: 9.0, lat: 47.6, lon: -122.3 },
];

const VEHICLES: &[(&str, &str, &str)] = &[
    ("Toyota", "Camry", "1"),
    ("Honda", "Civic", "1"),
    ("Ford", "F-150", "2"),
    ("Chevrolet", "Silverado", "2"),
    ("Subaru", "Outback", "4"),
    ("Jeep", "Cherokee", "4"),
    ("Harley-Davidson", "Sportster", "3"),
    ("Kawasaki", "Ninja", "3"),
    ("Freightliner", "Cascadia", "5"),
];

const CRASH_HEADER: &[&str] = &[
    "CASENO", "DATE_TIME", "COUNTY", "ROUTE_ID", "MILEPOST", "WEATHER", "LIGHTING",
    "SURFACE_COND", "LATITUDE", "LONGITUDE", "HIT_AND_RUN", "SEVERITY", "JUNCTION",
    "TRAFFIC_CONTROL", "COLLISION_TYPE",
];
const SEGMENT_HEADER: &[&str] = &[
    "ROUTE_ID", "FROM_MEASURE", "TO_MEASURE", "LANE_CNT", "LANE_WIDTH",
    "LEFT_SHOULDER_WIDTH", "RIGHT_SHOULDER_WIDTH", "SPEED_LIMIT", "SURFACE_TYPE", "AADT",
    "LOCALE",
];
const VEHICLE_HEADER: &[&str] = &[
    "CASENO", "UNIT_ID", "MAKE", "MODEL", "MODEL_YEAR", "MANEUVER", "VEH_TYPE",
];
const PERSON_HEADER: &[&str] = &[
    "CASENO", "UNIT_ID", "ROLE", "AGE", "SEX", "RESTRAINT", "AIRBAG", "SOBRIETY",
];

struct Seg {
    route: usize,
    from: f64,
    to: f64,
    speed: u32,
    row: Vec<String>,
}

fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

fn s(v: impl ToString) -> String {
    v.to_string()
}

fn segments(rng: &mut ChaCha8Rng) -> Vec<Seg> {
    let mut out = Vec::new();
    for (r, route) in ROUTES.iter().enumerate() {
        let mut from = 0.0f64;
        while from < route.length {
            let len = (rng.gen_range(2..=12) as f64).min(route.length - from);
            let to = from + len;
            let urban = route.county == "King" || rng.gen_bool(0.2);
            let lanes: u32 = if urban { *[2, 4].choose(rng).unwrap() } else { 2 };
            let speed: u32 = if urban { *[35, 40, 45].choose(rng).unwrap() } else { *[50, 55, 60].choose(rng).unwrap() };
            let surface = *["BST", "ACP", "PCCP"].choose(rng).unwrap();
            let aadt: u64 = rng.gen_range(8..=250) * 100;
            out.push(Seg {
                route: r,
                from,
                to,
                speed,
                row: vec![
                    s(route.id),
                    format!("{from:.1}"),
                    format!("{to:.1}"),
                    s(lanes),
                    s(rng.gen_range(10..=14) * 2),
                    s(rng.gen_range(0..=4)),
                    s(rng.gen_range(2..=10)),
                    s(speed),
                    s(surface),
                    s(aadt),
                    s(if urban { "urban" } else { "rural" }),
                ],
            });
            from = to;
        }
    }
    out
}

/// The published example crash on a matching rural segment.
fn example_one(segs: &mut [Seg]) -> (Vec<String>, Vec<Vec<String>>, Vec<Vec<String>>) {
    let seg = segs
        .iter_mut()
        .find(|s| s.route == 0 && s.from <= 22.4 && 22.4 < s.to)
        .expect("route 0 covers milepost 22.4");
    seg.speed = 60;
    seg.row = vec![
        s("097ARi"),
        format!("{:.1}", seg.from),
        format!("{:.1}", seg.to),
        s(2),
        s(24),
        s(0),
        s(7),
        s(60),
        s("BST"),
        s(4800),
        s("rural"),
    ];
    let crash = [
        "C0001", "2022-06-29 20:00:00", "Chelan", "097ARi", "22.4", "1", "3", "1", "47.9512",
        "-120.0123", "N", "minor", "0", "0", "3",
    ]
    .map(s)
    .to_vec();
    let vehicles = vec![
        ["C0001", "1", "Toyota", "Camry", "2005", "4", "1"].map(s).to_vec(),
        ["C0001", "2", "Ford", "Ranger", "1995", "1", "2"].map(s).to_vec(),
    ];
    let persons = vec![
        ["C0001", "1", "driver", "35", "M", "1", "1", "1"].map(s).to_vec(),
        ["C0001", "2", "driver", "36", "F", "1", "1", "1"].map(s).to_vec(),
    ];
    (crash, vehicles, persons)
}

fn example_two(segs: &[Seg]) -> (Vec<String>, Vec<Vec<String>>, Vec<Vec<String>>) {
    let seg = segs.iter().find(|s| s.route == 1 && s.from <= 20.0 && 20.0 < s.to).unwrap();
    let mp = format!("{:.1}", (seg.from + seg.to) / 2.0);
    let crash = [
        "C0002", "2021-08-14 13:00:00", "Whatcom", "542i", &mp, "2", "1", "1", "48.8231",
        "-122.0874", "N", "severe", "0", "0", "1",
    ]
    .map(s)
    .to_vec();
    let vehicles = vec![
        ["C0002", "1", "Subaru", "Outback", "2001", "5", "4"].map(s).to_vec(),
        ["C0002", "2", "Harley-Davidson", "Sportster", "2008", "1", "3"].map(s).to_vec(),
    ];
    let mut persons = vec![["C0002", "1", "driver", "43", "F", "1", "1", "1"].map(s).to_vec()];
    for age in ["12", "15", "41", "9"] {
        persons.push(["C0002", "1", "passenger", age, "M", "1", "1", ""].map(s).to_vec());
    }
    persons.push(["C0002", "2", "driver", "51", "M", "3", "4", "1"].map(s).to_vec());
    (crash, vehicles, persons)
}

/// Picks an optional categorical code, occasionally replaced by a null marker.
fn code(rng: &mut ChaCha8Rng, choices: &[&str]) -> String {
    if rng.gen_bool(0.06) {
        return s(*["unknown", "", "N/A", "9"].choose(rng).unwrap());
    }
    s(*choices.choose(rng).unwrap())
}

pub fn generate(n_cases: usize, seed: u64) -> CorpusCsv {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut segs = segments(&mut rng);
    let mut crashes = Vec::new();
    let mut vehicles = Vec::new();
    let mut persons = Vec::new();
    let fixed = [example_one(&mut segs), example_two(&segs)];
    for (c, v, p) in fixed.into_iter().take(n_cases) {
        crashes.push(c);
        vehicles.extend(v);
        persons.extend(p);
    }
    for i in crashes.len()..n_cases {
        let caseno = format!("C{:04}", i + 1);
        let seg = &segs[rng.gen_range(0..segs.len())];
        let route = &ROUTES[seg.route];
        // a few crashes sit exactly on a segment start
        let milepost = if rng.gen_bool(0.1) {
            seg.from
        } else {
            let lo = (seg.from * 10.0).round() as i64;
            let hi = (seg.to * 10.0).round() as i64;
            rng.gen_range(lo..hi) as f64 / 10.0
        };
        let date = chrono::NaiveDate::from_ymd_opt(2019 + rng.gen_range(0..5), rng.gen_range(1..=12), rng.gen_range(1..=28))
            .expect("valid date");
        let hour = rng.gen_range(0..24);
        let minute = *[0, 15, 30, 45].choose(&mut rng).unwrap();
        let dark = !(6..19).contains(&hour);
        let lighting = if dark {
            s(*["4", "5"].choose(&mut rng).unwrap())
        } else if hour == 6 || hour == 19 {
            s(*["2", "3"].choose(&mut rng).unwrap())
        } else {
            s("1")
        };
        let weather = code(&mut rng, &["1", "1", "2", "3", "4", "5"]);
        let surface = code(&mut rng, &["1", "1", "2", "3", "4"]);
        let collision = code(&mut rng, &["1", "2", "3", "4", "5"]);
        let n_veh = if collision == "4" { 1 } else { rng.gen_range(1..=3) };

        let mut motorcycle = false;
        let mut unrestrained = false;
        let mut drinking = false;
        let mut vrows = Vec::new();
        let mut prows = Vec::new();
        for unit in 1..=n_veh {
            let (make, model, vtype) = *VEHICLES.choose(&mut rng).unwrap();
            motorcycle |= vtype == "3";
            let year = if rng.gen_bool(0.05) { String::new() } else { s(rng.gen_range(1990..=2023)) };
            vrows.push(vec![
                caseno.clone(),
                s(unit),
                s(make),
                s(model),
                year,
                code(&mut rng, &["1", "1", "2", "3", "4", "5", "6", "7"]),
                s(vtype),
            ]);
            let occupants = if vtype == "3" { 1 } else { rng.gen_range(1..=3) };
            for k in 0..occupants {
                let restraint = if vtype == "3" {
                    s(*["3", "3", "2"].choose(&mut rng).unwrap())
                } else {
                    code(&mut rng, &["1", "1", "1", "1", "2", "4"])
                };
                unrestrained |= restraint == "2";
                let sobriety = if k == 0 { code(&mut rng, &["1", "1", "1", "1", "2", "3"]) } else { String::new() };
                drinking |= sobriety == "2" || sobriety == "3";
                let age = if rng.gen_bool(0.05) { String::new() } else { s(if k == 0 { rng.gen_range(16..=85) } else { rng.gen_range(2..=80) }) };
                prows.push(vec![
                    caseno.clone(),
                    s(unit),
                    s(if k == 0 { "driver" } else { "passenger" }),
                    age,
                    code(&mut rng, &["M", "F"]),
                    restraint,
                    s(*["1", "1", "2", "3", "4"].choose(&mut rng).unwrap()),
                    sobriety,
                ]);
            }
        }
        let score = -3.4
            + 2.4 * motorcycle as u8 as f64
            + 1.4 * unrestrained as u8 as f64
            + 1.6 * drinking as u8 as f64
            + 0.04 * (seg.speed as f64 - 45.0)
            + 0.7 * dark as u8 as f64
            + 1.0 * (collision == "2") as u8 as f64;
        let p = 1.0 / (1.0 + (-score).exp());
        let severe = rng.gen_bool(p);
        let lat = route.lat + rng.gen_range(-0.2..0.2);
        let lon = route.lon + rng.gen_range(-0.2..0.2);
        let (lat, lon) = if rng.gen_bool(0.05) { (String::new(), String::new()) } else { (format!("{lat:.4}"), format!("{lon:.4}")) };
        crashes.push(vec![
            caseno,
            format!("{} {:02}:{:02}:00", date.format("%Y-%m-%d"), hour, minute),
            s(route.county),
            s(route.id),
            format!("{milepost:.1}"),
            weather,
            lighting,
            surface,
            lat,
            lon,
            s(if rng.gen_bool(0.08) { "Y" } else { "N" }),
            s(if severe { "severe" } else { "minor" }),
            code(&mut rng, &["0", "0", "1", "2"]),
            code(&mut rng, &["0", "0", "1", "2", "3"]),
            collision,
        ]);
        vehicles.extend(vrows);
        persons.extend(prows);
    }
    let seg_rows: Vec<Vec<String>> = segs.into_iter().map(|s| s.row).collect();
    CorpusCsv {
        crash: csv_string(CRASH_HEADER, &crashes),
        segment: csv_string(SEGMENT_HEADER, &seg_rows),
        vehicle: csv_string(VEHICLE_HEADER, &vehicles),
        person: csv_string(PERSON_HEADER, &persons),
    }
}
