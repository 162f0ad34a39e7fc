use crashlens_demo::{normalize_json, Session};

#[test]
fn normalize_matches_column_rule() {
    let out = normalize_json("[[0.4, 0.02], [0.1, 0.3], [-0.05, 0.0], [0.003, 0.15]]", 100, 1).unwrap();
    let scores: Vec<Vec<u32>> = serde_json::from_str(&out).unwrap();
    // col 0: max 0.4 -> 100, 25, 0, ceil(0.75)=1 (not above b)
    // col 1: max 0.3 -> ceil(6.67)=7, 100, 0, 50
    assert_eq!(scores, vec![vec![100, 7], vec![25, 100], vec![0, 0], vec![0, 50]]);
}

#[test]
fn normalize_rejects_bad_input() {
    assert!(normalize_json("[]", 100, 1).is_err());
    assert!(normalize_json("[[1.0], [1.0, 2.0]]", 100, 1).is_err());
    assert!(normalize_json("not json", 100, 1).is_err());
    assert!(normalize_json("[[1.0]]", 0, 1).is_err());
}

#[test]
fn session_operations() {
    let s = Session::train(60, 7).unwrap();
    let cases: Vec<serde_json::Value> = serde_json::from_str(&s.cases_json()).unwrap();
    assert_eq!(cases.len(), 50);
    let narrative = cases[0]["narrative"].as_str().unwrap();

    let page = s.heatmap(narrative, "taylor", 3.0).unwrap();
    assert!(page.starts_with("<!DOCTYPE html>"));
    assert!(page.contains("<sup>"));
    assert!(s.heatmap(narrative, "saliency", 3.0).is_err());
    assert!(s.heatmap("   ", "taylor", 3.0).is_err());

    let graph = s.factor_graph(5).unwrap();
    assert!(graph.contains("<svg"));
    assert!(s.factor_graph(0).is_err());
}
