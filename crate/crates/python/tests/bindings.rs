//! Binding entry points that do not need a running interpreter.

#[test]
fn graphs_and_tau() {
    let hops = pymisapp::session_graphs(vec![0, 1, 2, 3, 1]).unwrap();
    assert_eq!(hops[0], vec![(1, 2), (2, 3), (3, 1)]);
    assert_eq!(hops[1], vec![(1, 3), (2, 1), (3, 2)]);
    assert!(hops[2].is_empty());
    let tau = pymisapp::kendall_tau(vec![1.0, 2.0, 3.0], vec![1.0, 3.0, 2.0]).unwrap();
    assert!((tau - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn gradcheck_from_json() {
    let cfg = r#"{"dim": 8, "layers": 1, "heads": 2, "fusion_heads": 2, "dropout": 0.0, "num_apps": 12, "num_categories": 2}"#;
    let errors = pymisapp::gradcheck(Some(cfg), 0, 1e-5).unwrap();
    assert!(errors.iter().all(|(_, e)| *e < 1e-4));
    assert!(errors.iter().any(|(n, _)| n == "app_emb"));
}

#[test]
fn cli_passthrough_reports_usage_errors() {
    assert_eq!(pymisapp::run_cli(vec!["nonsense".into()]), 2);
}
