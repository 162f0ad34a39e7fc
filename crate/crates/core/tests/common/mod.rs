//! Shared fixtures and oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::NaiveDate;
use crashlens::schema::*;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn crash(caseno: &str, route: &str, milepost: f64, severity: Severity) -> CrashRecord {
    CrashRecord {
        caseno: caseno.into(),
        occurred_at: NaiveDate::from_ymd_opt(2021, 3, 14).unwrap().and_hms_opt(7, 45, 0).unwrap(),
        county: "King".into(),
        route_id: route.into(),
        milepost,
        weather: "1".into(),
        lighting: "1".into(),
        surface_condition: "1".into(),
        latitude: None,
        longitude: None,
        hit_and_run: false,
        severity,
        extra: BTreeMap::new(),
    }
}

pub fn segment(route: &str, from: f64, to: f64) -> RoadSegment {
    RoadSegment {
        route_id: route.into(),
        from_measure: from,
        to_measure: to,
        lane_count: 2,
        lane_width: 12.0,
        left_shoulder_width: 2.0,
        right_shoulder_width: 4.0,
        speed_limit: 50,
        surface_type: "asphalt".into(),
        aadt: 12000,
        locale: Locale::Rural,
    }
}

pub fn vehicle(caseno: &str, unit_id: u32) -> VehicleRecord {
    VehicleRecord {
        caseno: caseno.into(),
        unit_id,
        make: "Ford".into(),
        model: "F150".into(),
        model_year: Some(2010),
        maneuver: "1".into(),
        extra: BTreeMap::new(),
    }
}

pub fn person(caseno: &str, unit_id: u32, age: u32) -> PersonRecord {
    PersonRecord {
        caseno: caseno.into(),
        unit_id,
        role: PersonRole::Driver,
        age: Some(age),
        sex: "F".into(),
        restraint: "1".into(),
        airbag: "1".into(),
        sobriety: "1".into(),
    }
}

/// Random four-table set: shared routes, mileposts on a half-mile grid so
/// they land on segment boundaries, overlapping segments, orphan rows.
pub fn random_tables(rng: &mut impl Rng) -> TableSet {
    let routes = ["005", "090", "097ARi"];
    let n_crash = rng.gen_range(0..15);
    let grid = |rng: &mut dyn rand::RngCore| rng.gen_range(0..40) as f64 * 0.5;
    let crashes: Vec<CrashRecord> = (0..n_crash)
        .map(|i| {
            let sev = if rng.gen_bool(0.3) {
                Severity::SeriousOrFatal
            } else {
                Severity::NoApparentOrMinor
            };
            crash(&format!("C{i}"), routes.choose(rng).unwrap(), grid(rng), sev)
        })
        .collect();
    let segments: Vec<RoadSegment> = (0..rng.gen_range(0..10))
        .map(|_| {
            let from = grid(rng);
            let len = rng.gen_range(1..12) as f64 * 0.5;
            let mut s = segment(routes.choose(rng).unwrap(), from, from + len);
            s.aadt = rng.gen_range(100..50000);
            s
        })
        .collect();
    let key = |rng: &mut dyn rand::RngCore| {
        if n_crash > 0 && rng.gen_bool(0.85) {
            format!("C{}", rng.gen_range(0..n_crash))
        } else {
            format!("X{}", rng.gen_range(0..3))
        }
    };
    let vehicles: Vec<VehicleRecord> = (0..rng.gen_range(0..25))
        .map(|_| {
            let mut v = vehicle(&key(rng), rng.gen_range(1..5));
            v.model_year = Some(rng.gen_range(1990..2024));
            v
        })
        .collect();
    let persons: Vec<PersonRecord> = (0..rng.gen_range(0..40))
        .map(|_| person(&key(rng), rng.gen_range(1..6), rng.gen_range(1..90)))
        .collect();
    TableSet {
        crashes,
        segments,
        vehicles,
        persons,
        rejects: Vec::new(),
    }
}

/// Nested-loop join: scan every table for every crash.
pub fn join_oracle(t: &TableSet) -> (Vec<CrashCase>, OrphanReport, usize) {
    let is_crash = |k: &str| t.crashes.iter().any(|c| c.caseno == k);
    let mut ambiguous = 0;
    let mut cases = Vec::new();
    for c in &t.crashes {
        let mut best: Option<&RoadSegment> = None;
        let mut hits = 0;
        for s in &t.segments {
            if s.route_id == c.route_id && s.from_measure <= c.milepost && c.milepost < s.to_measure {
                hits += 1;
                if best.is_none_or(|b| s.from_measure < b.from_measure) {
                    best = Some(s);
                }
            }
        }
        if hits > 1 {
            ambiguous += 1;
        }
        let mut ids: Vec<u32> = t.vehicles.iter().filter(|v| v.caseno == c.caseno).map(|v| v.unit_id).collect();
        ids.sort();
        ids.dedup();
        let mut units = Vec::new();
        for id in ids {
            let mut first = true;
            for v in &t.vehicles {
                if v.caseno == c.caseno && v.unit_id == id {
                    let persons = if first {
                        t.persons
                            .iter()
                            .filter(|p| p.caseno == c.caseno && p.unit_id == id)
                            .cloned()
                            .collect()
                    } else {
                        Vec::new()
                    };
                    first = false;
                    units.push(Unit {
                        vehicle: v.clone(),
                        persons,
                    });
                }
            }
        }
        cases.push(CrashCase {
            crash: c.clone(),
            segment: best.cloned(),
            units,
        });
    }
    let orphans = OrphanReport {
        vehicles: t.vehicles.iter().filter(|v| !is_crash(&v.caseno)).cloned().collect(),
        persons: t
            .persons
            .iter()
            .filter(|p| {
                !(is_crash(&p.caseno) && t.vehicles.iter().any(|v| v.caseno == p.caseno && v.unit_id == p.unit_id))
            })
            .cloned()
            .collect(),
    };
    (cases, orphans, ambiguous)
}

/// Spearman rank correlation with average ranks for ties. NaN when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Column rule by search rather than `ceil`: the smallest integer `k`
/// with `k >= L * v / max`, dropped when not above `b`, capped at `L`.
pub fn normalize_oracle(values: &[Vec<f64>], scale: u32, threshold: u32) -> Vec<Vec<u32>> {
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    let mut out = vec![vec![0u32; cols]; rows];
    for m in 0..cols {
        let mut max = f64::NEG_INFINITY;
        for row in values {
            if row[m] > max {
                max = row[m];
            }
        }
        if max <= 0.0 {
            continue;
        }
        for n in 0..rows {
            let r = scale as f64 * values[n][m] / max;
            let mut k = threshold + 1;
            if r <= threshold as f64 {
                continue;
            }
            while k < scale && (k as f64) < r {
                k += 1;
            }
            out[n][m] = k.min(scale);
        }
    }
    out
}

/// Random factor sets over a small vocabulary so pairs repeat. Cases may
/// list the same factor twice.
pub fn random_factor_sets(rng: &mut impl Rng) -> Vec<Vec<(crashlens::analytics::Aspect, String)>> {
    use crashlens::analytics::Aspect;
    (0..rng.gen_range(0..30))
        .map(|_| {
            (0..rng.gen_range(0..8))
                .map(|_| {
                    let a = *Aspect::ALL.choose(rng).unwrap();
                    (a, format!("f{}", rng.gen_range(0..4)))
                })
                .collect()
        })
        .collect()
}

/// Pair counting over raw lists with string keys and per-case pair sets.
pub fn cooccurrence_oracle(
    cases: &[Vec<(crashlens::analytics::Aspect, String)>],
) -> (BTreeMap<(String, String), u64>, BTreeMap<String, u64>) {
    use std::collections::HashSet;
    let mut links: BTreeMap<(String, String), u64> = BTreeMap::new();
    for case in cases {
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for (a, fa) in case {
            for (b, fb) in case {
                if a == b {
                    continue;
                }
                let x = (*a, fa.clone());
                let y = (*b, fb.clone());
                let (lo, hi) = if x < y { (x, y) } else { (y, x) };
                let key = (
                    format!("{}/{}", lo.0.key(), lo.1),
                    format!("{}/{}", hi.0.key(), hi.1),
                );
                if seen.insert(key.clone()) {
                    *links.entry(key).or_default() += 1;
                }
            }
        }
    }
    let mut totals: BTreeMap<String, u64> = BTreeMap::new();
    for ((s, t), c) in &links {
        *totals.entry(s.clone()).or_default() += c;
        *totals.entry(t.clone()).or_default() += c;
    }
    (links, totals)
}
