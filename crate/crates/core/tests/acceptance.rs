//! Acceptance checks. Runs without the libtest harness so every criterion
//! prints a PASS or FAIL line even when all of them pass.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use crashlens::analytics::{cooccurrence, sankey_json, validate_sankey};
use crashlens::attribution::{
    normalize_scores, occlusion_importance, taylor_importance, ImportanceMatrix, Method, NormalizationConfig, Occluder,
};
use crashlens::augment::{augment_batch, AugmentStatus, AugmentationConfig};
use crashlens::chat::{ChatError, ChatRequest, FnClient};
use crashlens::config::PipelineConfig;
use crashlens::corpus::CorpusCsv;
use crashlens::evalharness::{
    build_prompt, build_sft_dataset, compute_metrics, metrics_from_confusion, Exemplars, ParseStatus, Prediction,
    PromptStrategy, SftRecord, SYSTEM_PROMPT,
};
use crashlens::narrator::{default_templates, narrate, normalize, render, Lexicon, NarrativePair};
use crashlens::refmodel::{fit_reference, ModelShape, NextTokenModel, Objective, TinyLM, TokenizerMode};
use crashlens::schema::{integrate, link_segment, stratified_downsample, CrashCase, Severity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bundled_pairs() -> Vec<NarrativePair> {
    let tables = CorpusCsv::bundled().load().expect("bundled corpus loads");
    let lexicon = Lexicon::default();
    let templates = default_templates();
    integrate(&tables)
        .cases
        .iter()
        .map(|c| narrate(c, &lexicon, &templates).expect("bundled case renders").0)
        .collect()
}

// objective recomputed from the public parameters, one slot per position
fn slot_objective(m: &TinyLM, slots: &[Vec<f64>], target: usize, objective: Objective) -> f64 {
    let v = m.vocab_size;
    let mut hidden = vec![0.0; m.dim];
    let start = slots.len().saturating_sub(m.window);
    for (k, slot) in slots.iter().enumerate().skip(start) {
        let w = m.position_weights[slots.len() - 1 - k];
        for j in 0..m.dim {
            hidden[j] += w * slot[j];
        }
    }
    let logits: Vec<f64> = (0..v)
        .map(|t| m.bias[t] + (0..m.dim).map(|j| hidden[j] * m.output[j * v + t]).sum::<f64>())
        .collect();
    match objective {
        Objective::Logit => logits[target],
        Objective::Prob => {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            (logits[target] - max).exp() / z
        }
    }
}

fn c1_gradient() -> Outcome {
    let t0 = Instant::now();
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for i in 0..100 {
        let shape = ModelShape {
            dim: rng.gen_range(2..10),
            window: rng.gen_range(1..10),
            vocab_size: rng.gen_range(4..24),
        };
        let mut m = TinyLM::with_init_scale(&shape, i, rng.gen_range(0.3..1.5));
        for w in m.position_weights.iter_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
        for b in m.bias.iter_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        let len = rng.gen_range(1..14);
        let ctx: Vec<u32> = (0..len).map(|_| rng.gen_range(0..shape.vocab_size as u32)).collect();
        let target = rng.gen_range(0..shape.vocab_size);
        for objective in [Objective::Prob, Objective::Logit] {
            let grads = m.grad_wrt_embeddings(&ctx, target as u32, objective);
            let base: Vec<Vec<f64>> = ctx.iter().map(|&t| m.embedding(t).to_vec()).collect();
            for k in 0..ctx.len() {
                for j in 0..shape.dim {
                    let mut plus = base.clone();
                    plus[k][j] += h;
                    let mut minus = base.clone();
                    minus[k][j] -= h;
                    let fd = (slot_objective(&m, &plus, target, objective) - slot_objective(&m, &minus, target, objective))
                        / (2.0 * h);
                    let g = grads[k][j];
                    let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
                    worst = worst.max(rel);
                    checked += 1;
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    ensure(worst <= 1e-5, || format!("max relative error {worst:.3e}"))?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("{checked} partials, max rel err {worst:.2e}, {elapsed:.2?}"))
}

fn c2_taylor_vs_occlusion() -> Outcome {
    let labelled: Vec<(String, Severity)> = bundled_pairs().into_iter().map(|p| (p.descriptive, p.label)).collect();
    let cfg = PipelineConfig::default().train.to_train_config(7);
    let (tok, model, _) = fit_reference(&labelled, TokenizerMode::Word, &cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cors = Vec::new();
    let mut skipped = 0;
    let first_word = 5u32;
    for _ in 0..50 {
        let len = rng.gen_range(12..=24);
        let mut prompt = vec![tok.bos()];
        prompt.extend((0..len).map(|_| rng.gen_range(first_word..tok.vocab_size() as u32)));
        let label = if rng.gen_bool(0.5) {
            Severity::SeriousOrFatal
        } else {
            Severity::NoApparentOrMinor
        };
        let response = tok.label_tokens(label);
        let occ = occlusion_importance(&model, &prompt, &response, Occluder::Delete);
        let tay = taylor_importance(&model, &prompt, &response, Objective::Prob);
        for c in 0..response.len() {
            let n = occ.context_len(c);
            let r = common::spearman(&occ.column(c)[..n], &tay.column(c)[..n]);
            if r.is_nan() {
                skipped += 1;
            } else {
                cors.push(r);
            }
        }
    }
    ensure(!cors.is_empty(), || "no defined correlations".into())?;
    cors.sort_by(f64::total_cmp);
    let q = |p: f64| cors[((cors.len() - 1) as f64 * p).round() as usize];
    let median = q(0.5);
    let dist = format!(
        "n={} (skipped {skipped}) min {:.3} q1 {:.3} median {:.3} q3 {:.3} max {:.3}",
        cors.len(),
        q(0.0),
        q(0.25),
        median,
        q(0.75),
        q(1.0)
    );
    println!("    spearman distribution: {dist}");
    ensure(median >= 0.7, || dist.clone())?;
    Ok(dist)
}

fn random_matrix(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let rows = rng.gen_range(1..30);
    let cols = rng.gen_range(1..6);
    let mut v: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| match rng.gen_range(0..10) {
                    0 => 0.0,
                    1 => rng.gen_range(-1e-9..1e-9),
                    _ => rng.gen_range(-1.0..1.0),
                })
                .collect()
        })
        .collect();
    for m in 0..cols {
        match rng.gen_range(0..5) {
            // all non-positive column
            0 => v.iter_mut().for_each(|r| r[m] = -r[m].abs()),
            // tied maxima
            1 if rows > 1 => {
                let top = v.iter().map(|r| r[m]).fold(f64::NEG_INFINITY, f64::max);
                v[rows - 1][m] = top;
            }
            _ => {}
        }
    }
    v
}

fn c3_normalization() -> Outcome {
    let defaults = NormalizationConfig::default();
    ensure(defaults.scale == 100 && defaults.threshold == 1, || format!("defaults {defaults:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut entries = 0;
    for i in 0..1000 {
        let values = random_matrix(&mut rng);
        let cfg = if i % 4 == 3 {
            NormalizationConfig {
                scale: rng.gen_range(1..300),
                threshold: rng.gen_range(0..10),
            }
        } else {
            defaults
        };
        let m = ImportanceMatrix {
            method: Method::Occlusion,
            prompt_len: values.len(),
            inputs: vec![0; values.len()],
            outputs: vec![0; values[0].len()],
            values: values.clone(),
        };
        let got = normalize_scores(&m, &cfg).scores;
        let want = common::normalize_oracle(&values, cfg.scale, cfg.threshold);
        entries += values.len() * values[0].len();
        if got != want {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} mismatching matrices"))?;
    Ok(format!("1000 matrices, {entries} entries, 0 mismatches"))
}

fn c4_schema() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..100 {
        let t = common::random_tables(&mut rng);
        let got = integrate(&t);
        let (cases, orphans, ambiguous) = common::join_oracle(&t);
        ensure(got.cases == cases, || format!("table set {i}: cases differ"))?;
        ensure(got.orphans == orphans, || format!("table set {i}: orphans differ"))?;
        ensure(got.warnings.len() == ambiguous, || format!("table set {i}: ambiguity warnings differ"))?;
    }
    let segs = vec![common::segment("R", 10.0, 20.0), common::segment("R", 20.0, 30.0)];
    let at = |mp: f64, segs: &[crashlens::schema::RoadSegment]| {
        link_segment(&common::crash("B", "R", mp, Severity::NoApparentOrMinor), segs)
            .segment
            .map(|s| s.from_measure)
    };
    ensure(at(10.0, &segs[..1]) == Some(10.0), || "no match at from_measure".into())?;
    ensure(at(20.0, &segs[..1]).is_none(), || "matched at to_measure".into())?;
    ensure(at(20.0, &segs) == Some(20.0), || "boundary went to the wrong segment".into())?;
    ensure(at(9.999, &segs).is_none() && at(29.999, &segs) == Some(20.0), || "interval edges".into())?;
    Ok("100 random table sets equal the nested-loop join; boundary fixtures hold".into())
}

fn c5_downsample() -> Outcome {
    let mut cases: Vec<CrashCase> = Vec::with_capacity(49_648 + 1_779);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut minor, mut severe) = (49_648, 1_779);
    let mut i = 0;
    while minor + severe > 0 {
        let pick_severe = rng.gen_range(0..minor + severe) < severe;
        let sev = if pick_severe {
            severe -= 1;
            Severity::SeriousOrFatal
        } else {
            minor -= 1;
            Severity::NoApparentOrMinor
        };
        cases.push(CrashCase {
            crash: common::crash(&format!("D{i}"), "R", 1.0, sev),
            segment: None,
            units: Vec::new(),
        });
        i += 1;
    }
    let ratio = 2654.0 / 1779.0;
    let a = stratified_downsample(&cases, ratio, 7).map_err(|e| e.to_string())?;
    let b = stratified_downsample(&cases, ratio, 7).map_err(|e| e.to_string())?;
    let c = stratified_downsample(&cases, ratio, 8).map_err(|e| e.to_string())?;
    let count = |v: &[CrashCase], s| v.iter().filter(|c| c.crash.severity == s).count();
    let (n_minor, n_severe) = (count(&a, Severity::NoApparentOrMinor), count(&a, Severity::SeriousOrFatal));
    ensure(n_minor == 2654 && n_severe == 1779, || format!("got {n_minor}/{n_severe}"))?;
    ensure(a == b, || "same seed gave different samples".into())?;
    ensure(a != c, || "different seeds gave the same sample".into())?;
    Ok(format!("{n_minor}/{n_severe}, deterministic under seed"))
}

fn c6_fact_coverage() -> Outcome {
    let tables = CorpusCsv::bundled().load().map_err(|e| e.to_string())?;
    let lexicon = Lexicon::default();
    let templates = default_templates();
    let markers: Vec<String> = lexicon
        .null_markers
        .iter()
        .map(|m| m.trim().to_lowercase())
        .filter(|m| !m.is_empty())
        .collect();
    let mut facts = 0;
    for case in &integrate(&tables).cases {
        let normalized = normalize(case, &lexicon);
        let pair = render(&normalized, &templates).map_err(|e| e.to_string())?;
        let text = format!("{}\n{}", pair.descriptive, pair.outcome);
        for (path, phrase) in normalized.all_phrases() {
            ensure(text.contains(&phrase), || {
                format!("case {}: {path} = {phrase:?} missing", pair.caseno)
            })?;
            facts += 1;
        }
        for word in text.split(|c: char| c.is_whitespace() || matches!(c, ',' | '.' | ';' | ':' | '(' | ')')) {
            let w = word.to_lowercase();
            ensure(!markers.contains(&w), || format!("case {}: null marker {word:?}", pair.caseno))?;
        }
    }
    Ok(format!("{facts} facts across 50 cases all rendered; no null markers"))
}

fn c7_augmentation() -> Outcome {
    let pairs = bundled_pairs();
    let date = Regex::new(
        r"(January|February|March|April|May|June|July|August|September|October|November|December) \d{1,2}, \d{4}",
    )
    .unwrap();
    let records: Vec<(String, String)> = pairs.iter().map(|p| (p.caseno.clone(), p.descriptive.clone())).collect();
    for (id, text) in &records {
        ensure(date.is_match(text), || format!("{id}: no date to drop"))?;
    }
    // thirds: drop the date, inject "unknown", pass through unchanged
    let client = FnClient(|req: &ChatRequest| -> Result<String, ChatError> {
        let text = req.payload.clone().unwrap_or_default();
        let n: usize = req.record_id.as_deref().unwrap_or("").bytes().map(usize::from).sum();
        Ok(match n % 3 {
            0 => date.replace(&text, "that day").into_owned(),
            1 => format!("{text} The other driver's condition was unknown."),
            _ => text,
        })
    });
    let out = augment_batch(&records, &client, &AugmentationConfig::default(), 4).map_err(|e| e.to_string())?;
    let mut failing = 0;
    let mut passing = 0;
    for ((id, original), rec) in records.iter().zip(&out) {
        let n: usize = id.bytes().map(usize::from).sum();
        if n % 3 == 2 {
            ensure(rec.status == AugmentStatus::Accepted, || format!("{id}: faithful rewrite rejected"))?;
            passing += 1;
        } else {
            ensure(rec.flagged(), || format!("{id}: adversarial rewrite not flagged"))?;
            ensure(rec.text.as_bytes() == original.as_bytes(), || format!("{id}: fallback differs from original"))?;
            failing += 1;
        }
    }
    ensure(failing > 0 && passing > 0, || "degenerate split".into())?;
    Ok(format!("{failing}/{failing} adversarial records fell back and were flagged; {passing} faithful accepted"))
}

fn c8_metrics() -> Outcome {
    // (confusion[gold][pred], failed_by_gold, macro_f1, accuracy, macro_recall, macro_precision)
    let f = |tp: f64, fp: f64, fneg: f64| 2.0 * tp / (2.0 * tp + fp + fneg);
    let fixtures: [([[u64; 2]; 2], [u64; 2], [f64; 4]); 5] = [
        (
            [[40, 10], [5, 45]],
            [0, 0],
            [
                (f(40.0, 5.0, 10.0) + f(45.0, 10.0, 5.0)) / 2.0,
                0.85,
                0.85,
                (40.0 / 45.0 + 45.0 / 55.0) / 2.0,
            ],
        ),
        ([[50, 0], [50, 0]], [0, 0], [1.0 / 3.0, 0.5, 0.5, 0.25]),
        ([[30, 0], [0, 20]], [0, 0], [1.0, 1.0, 1.0, 1.0]),
        (
            [[20, 5], [3, 12]],
            [4, 6],
            [
                (40.0 / 52.0 + 24.0 / 38.0) / 2.0,
                32.0 / 50.0,
                (20.0 / 29.0 + 12.0 / 21.0) / 2.0,
                (20.0 / 23.0 + 12.0 / 17.0) / 2.0,
            ],
        ),
        ([[90, 0], [10, 0]], [0, 0], [9.0 / 19.0, 0.9, 0.5, 0.45]),
    ];
    for (i, (confusion, failed, want)) in fixtures.iter().enumerate() {
        let m = metrics_from_confusion(*confusion, *failed);
        let got = [m.macro_f1, m.accuracy, m.macro_recall, m.macro_precision];
        for (g, w) in got.iter().zip(want) {
            ensure((g - w).abs() <= 1e-12, || format!("fixture {i}: got {got:?} want {want:?}"))?;
        }
    }
    // same degenerate case through the prediction path
    let golds: Vec<Severity> = (0..100)
        .map(|i| if i % 2 == 0 { Severity::SeriousOrFatal } else { Severity::NoApparentOrMinor })
        .collect();
    let preds: Vec<Prediction> = golds
        .iter()
        .enumerate()
        .map(|(i, _)| Prediction {
            caseno: i.to_string(),
            raw_output: "No apparent or minor injury".into(),
            label: Some(Severity::NoApparentOrMinor),
            parse_status: ParseStatus::Exact,
        })
        .collect();
    let m = compute_metrics(&preds, &golds).map_err(|e| e.to_string())?;
    ensure((m.macro_f1 - 1.0 / 3.0).abs() <= 1e-12, || format!("always-minor macro-F1 {}", m.macro_f1))?;
    Ok("5 fixtures within 1e-12; always-one-class macro-F1 = 1/3".into())
}

fn fixture(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/prompts").join(name);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn c9_prompts() -> Outcome {
    let narrative = "<<NARRATIVE>>";
    let fs = PromptStrategy::few_shot(Exemplars {
        minor: "<<MINOR EXAMPLE>>".into(),
        severe: "<<SEVERE EXAMPLE>>".into(),
    });
    let cases = [
        ("zs.txt", PromptStrategy::zero_shot()),
        ("zs_cot.txt", PromptStrategy::zero_shot_cot()),
        ("fs.txt", fs),
    ];
    for (file, strategy) in cases {
        let got = build_prompt(&strategy, narrative).map_err(|e| e.to_string())?;
        let want = fixture(file);
        ensure(got.render().as_bytes() == want.as_bytes(), || {
            format!("{file} differs:\n--- got\n{}\n--- want\n{want}", got.render())
        })?;
        ensure(got.system == SYSTEM_PROMPT, || format!("{file}: system role text"))?;
    }
    Ok("ZS, ZS-CoT and FS prompts match their golden files byte for byte".into())
}

fn c10_cooccurrence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut total_links = 0;
    for i in 0..200 {
        let sets = common::random_factor_sets(&mut rng);
        let g = cooccurrence(&sets);
        let (links, totals) = common::cooccurrence_oracle(&sets);
        let got_links: BTreeMap<(String, String), u64> =
            g.links.iter().map(|l| ((l.source.id(), l.target.id()), l.count)).collect();
        let got_nodes: BTreeMap<String, u64> = g.nodes.iter().map(|n| (n.key.id(), n.total)).collect();
        ensure(got_links == links && g.links.len() == links.len(), || format!("set {i}: links differ"))?;
        ensure(got_nodes == totals && g.nodes.len() == totals.len(), || format!("set {i}: nodes differ"))?;
        let back = validate_sankey(&sankey_json(&g)).map_err(|e| format!("set {i}: {e}"))?;
        ensure(back == g, || format!("set {i}: Sankey round trip changed the graph"))?;
        total_links += links.len();
    }
    Ok(format!("200 factor sets ({total_links} links) match brute force and round-trip"))
}

fn run_pipeline(dir: &Path) -> Result<(), String> {
    let exe = env!("CARGO_BIN_EXE_crashlens");
    let p = |s: &str| dir.join(s).display().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["ingest".into(), "--out".into(), p("cases.jsonl")],
        vec!["narrate".into(), "--cases".into(), p("cases.jsonl"), "--out".into(), p("narratives.jsonl")],
        vec!["train-ref".into(), "--narratives".into(), p("narratives.jsonl"), "--out-dir".into(), p("model")],
        vec![
            "attribute".into(), "--method".into(), "taylor".into(), "--narratives".into(), p("narratives.jsonl"),
            "--model-dir".into(), p("model"), "--out".into(), p("attr-taylor.jsonl"),
        ],
        vec![
            "attribute".into(), "--method".into(), "occlusion".into(), "--narratives".into(), p("narratives.jsonl"),
            "--model-dir".into(), p("model"), "--out".into(), p("attr-occlusion.jsonl"),
        ],
        vec!["analyze".into(), "--attributions".into(), p("attr-taylor.jsonl"), "--out-dir".into(), p("analysis")],
        vec![
            "export".into(), "sankey".into(), "--graph".into(), p("analysis/cooccurrence.json"), "--out-dir".into(),
            p("export"),
        ],
        vec!["export".into(), "heatmap".into(), "--attributions".into(), p("attr-taylor.jsonl"), "--out-dir".into(), p("export")],
    ];
    for args in steps {
        let out = Command::new(exe)
            .args(["--offline", "--seed", "7", "--jobs", "1"])
            .args(&args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn c11_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut times = Vec::new();
    for d in [a.path(), b.path()] {
        let t = Instant::now();
        run_pipeline(d)?;
        times.push(t.elapsed());
    }
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    ensure(fa == fb, || format!("file lists differ: {fa:?} vs {fb:?}"))?;
    for f in &fa {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        ensure(x == y, || format!("{} differs between runs", f.display()))?;
    }
    for t in &times {
        ensure(*t < Duration::from_secs(60), || format!("run took {t:?}"))?;
    }
    Ok(format!("{} files byte-identical; runs took {:.2?} and {:.2?}", fa.len(), times[0], times[1]))
}

fn c12_sft() -> Outcome {
    let records = build_sft_dataset(&bundled_pairs(), SYSTEM_PROMPT);
    ensure(records.len() == 50, || format!("{} records", records.len()))?;
    let labels: Vec<String> = Severity::ALL.iter().map(|s| s.label().to_lowercase()).collect();
    for r in &records {
        let user = r.user.to_lowercase();
        for l in &labels {
            ensure(!user.contains(l.as_str()), || format!("{}: user field leaks {l:?}", r.caseno))?;
        }
        let chars: Vec<char> = r.text.chars().collect();
        ensure(r.mask_boundary > 0 && r.mask_boundary < chars.len(), || format!("{}: boundary out of range", r.caseno))?;
        let head: String = chars[..r.mask_boundary].iter().collect();
        let tail: String = chars[r.mask_boundary..].iter().collect();
        ensure(head == format!("{}\n\n{}\n\n", r.system, r.user), || format!("{}: prompt side", r.caseno))?;
        ensure(head == SftRecord::prompt_rendering(&r.system, &r.user), || format!("{}: rendering", r.caseno))?;
        ensure(labels.contains(&tail.to_lowercase()), || format!("{}: response side {tail:?}", r.caseno))?;
        ensure(tail == r.response, || format!("{}: response field", r.caseno))?;
    }
    Ok("50 records, no label text in user fields, every boundary splits prompt from response".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient matches central differences", c1_gradient),
        ("taylor tracks occlusion (median spearman >= 0.7)", c2_taylor_vs_occlusion),
        ("score normalization equals brute force", c3_normalization),
        ("table join equals nested-loop oracle", c4_schema),
        ("stratified downsampling counts", c5_downsample),
        ("narrative fact coverage", c6_fact_coverage),
        ("augmentation fallback", c7_augmentation),
        ("metrics fixtures", c8_metrics),
        ("prompt goldens", c9_prompts),
        ("co-occurrence oracle and sankey round trip", c10_cooccurrence),
        ("end-to-end determinism", c11_determinism),
        ("SFT leakage and mask boundaries", c12_sft),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("AC{:02}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|s| id.contains(s.as_str()) || name.contains(s.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {id} {name}: {detail} [{:.2?}]", t.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail} [{:.2?}]", t.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
