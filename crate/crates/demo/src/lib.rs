//! Browser bindings for crashlens. Everything runs client-side on the
//! bundled corpus; nothing touches the network.
//!
//! The plain Rust API ([`Session`], [`normalize_json`]) is what the tests
//! exercise; the `#[wasm_bindgen]` wrappers only convert errors.

use crashlens::analytics::{
    case_factors, cooccurrence, heatmap_html, parse_annotated, rule_based_factors, sankey_html, CategoryLexicon,
    GroupingRules, HeatmapConfig,
};
use crashlens::attribution::{
    attribute_narrative, normalize_scores, AttributionConfig, ImportanceMatrix, Method, NormalizationConfig,
};
use crashlens::config::PipelineTrain;
use crashlens::corpus::CorpusCsv;
use crashlens::narrator::{default_templates, narrate, Lexicon};
use crashlens::refmodel::{classify, fit_reference, TinyLM, Tokenizer, TokenizerMode};
use crashlens::schema::{integrate, Severity};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// A reference model trained on the bundled corpus, plus its narratives.
#[wasm_bindgen]
pub struct Session {
    cases: Vec<(String, String, Severity)>,
    tokenizer: Tokenizer,
    model: TinyLM,
    train_accuracy: f64,
}

impl Session {
    pub fn train(epochs: usize, seed: u64) -> Result<Session, String> {
        let tables = CorpusCsv::bundled().load().map_err(|e| e.to_string())?;
        let integrated = integrate(&tables);
        let lexicon = Lexicon::default();
        let templates = default_templates();
        let mut cases = Vec::with_capacity(integrated.cases.len());
        for case in &integrated.cases {
            let (pair, _) = narrate(case, &lexicon, &templates).map_err(|e| e.to_string())?;
            cases.push((pair.caseno, pair.descriptive, pair.label));
        }
        let labelled: Vec<(String, Severity)> = cases.iter().map(|(_, n, l)| (n.clone(), *l)).collect();
        let train = PipelineTrain {
            epochs,
            ..PipelineTrain::default()
        };
        let (tokenizer, model, _) =
            fit_reference(&labelled, TokenizerMode::Word, &train.to_train_config(seed)).map_err(|e| e.to_string())?;
        let correct = labelled
            .iter()
            .filter(|(n, l)| classify(&model, &tokenizer, n).label == *l)
            .count();
        Ok(Session {
            train_accuracy: correct as f64 / labelled.len().max(1) as f64,
            cases,
            tokenizer,
            model,
        })
    }

    /// `[{caseno, narrative, label}]`
    pub fn cases_json(&self) -> String {
        let rows: Vec<_> = self
            .cases
            .iter()
            .map(|(c, n, l)| json!({"caseno": c, "narrative": n, "label": l}))
            .collect();
        serde_json::to_string(&rows).expect("plain json")
    }

    /// Heatmap page for `narrative`, coloured red at or above `threshold_hi`.
    pub fn heatmap(&self, narrative: &str, method: &str, threshold_hi: f64) -> Result<String, String> {
        if narrative.trim().is_empty() {
            return Err("narrative is empty".into());
        }
        let method: Method = method.parse()?;
        let report = attribute_narrative(
            &self.model,
            &self.tokenizer,
            "demo",
            narrative,
            method,
            &AttributionConfig::default(),
        );
        let page = heatmap_html(&format!("{} ({:?})", report.predicted, method), &report.annotated, &HeatmapConfig { threshold_hi });
        Ok(page)
    }

    /// Sankey page of cross-aspect factor co-occurrence over every bundled case.
    pub fn factor_graph(&self, top_k: usize) -> Result<String, String> {
        if top_k == 0 {
            return Err("top_k must be positive".into());
        }
        let lexicon = CategoryLexicon::default();
        let rules = GroupingRules::default();
        let cfg = AttributionConfig::default();
        let per_case: Vec<_> = self
            .cases
            .iter()
            .map(|(caseno, narrative, _)| {
                let report = attribute_narrative(&self.model, &self.tokenizer, caseno, narrative, Method::Taylor, &cfg);
                let (_, words) = parse_annotated(&report.annotated);
                case_factors(&rule_based_factors(caseno, &words, &lexicon), top_k, &rules)
            })
            .collect();
        Ok(sankey_html(&cooccurrence(&per_case), "Factor co-occurrence"))
    }
}

#[wasm_bindgen]
impl Session {
    #[wasm_bindgen(constructor)]
    pub fn new(epochs: usize) -> Result<Session, JsError> {
        Session::train(epochs, 7).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(getter, js_name = trainAccuracy)]
    pub fn train_accuracy(&self) -> f64 {
        self.train_accuracy
    }

    #[wasm_bindgen(js_name = cases)]
    pub fn js_cases(&self) -> String {
        self.cases_json()
    }

    #[wasm_bindgen(js_name = heatmap)]
    pub fn js_heatmap(&self, narrative: &str, method: &str, threshold_hi: f64) -> Result<String, JsError> {
        self.heatmap(narrative, method, threshold_hi).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = factorGraph)]
    pub fn js_factor_graph(&self, top_k: usize) -> Result<String, JsError> {
        self.factor_graph(top_k).map_err(|e| JsError::new(&e))
    }
}

/// Normalizes a raw importance matrix given as `[[row0col0, row0col1], ...]`
/// and returns the integer score matrix in the same layout.
pub fn normalize_json(matrix: &str, scale: u32, threshold: u32) -> Result<String, String> {
    let values: Vec<Vec<f64>> = serde_json::from_str(matrix).map_err(|e| format!("bad matrix: {e}"))?;
    let cols = values.first().map(Vec::len).unwrap_or(0);
    if values.is_empty() || cols == 0 {
        return Err("matrix is empty".into());
    }
    if values.iter().any(|r| r.len() != cols) {
        return Err("rows differ in length".into());
    }
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err("matrix has non-finite entries".into());
    }
    if scale == 0 {
        return Err("L must be positive".into());
    }
    let m = ImportanceMatrix {
        method: Method::Occlusion,
        prompt_len: values.len(),
        inputs: vec![0; values.len()],
        outputs: vec![0; cols],
        values,
    };
    let scores = normalize_scores(&m, &NormalizationConfig { scale, threshold });
    Ok(serde_json::to_string(&scores.scores).expect("plain json"))
}

#[wasm_bindgen(js_name = normalize)]
pub fn js_normalize(matrix: &str, scale: u32, threshold: u32) -> Result<String, JsError> {
    normalize_json(matrix, scale, threshold).map_err(|e| JsError::new(&e))
}
