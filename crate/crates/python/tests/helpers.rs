use ordlab::ordering::StrategyTag;
use ordlab::trainer::{ExperimentConfig, HookSchedule, MemorySink, Trainer};
use ordlab_py::{error_class, report_json, rows_json, spectrum_json, ErrorClass};

#[test]
fn errors_map_to_python_exception_classes() {
    assert_eq!(error_class(&ordlab::Error::Input("x".into())), ErrorClass::Value);
    assert_eq!(error_class(&ordlab::Error::Config(vec![])), ErrorClass::Value);
    assert_eq!(error_class(&ordlab::Error::Degenerate("x".into())), ErrorClass::Runtime);
    let io = ordlab::Error::io("f", std::io::Error::other("boom"));
    assert_eq!(error_class(&io), ErrorClass::OS);
}

#[test]
fn spectrum_rejects_shape_mismatch_and_finds_peak() {
    assert!(spectrum_json(&[1.0; 5], 3, 2).is_err());
    let p = 31;
    let w: Vec<f64> = (0..p)
        .map(|a| (2.0 * std::f64::consts::PI * 4.0 * a as f64 / p as f64).sin())
        .collect();
    let v = spectrum_json(&w, p, 1).unwrap();
    assert_eq!(v["peak_frequency"], 4);
    assert_eq!(v["power"].as_array().unwrap().len(), p);
}

#[test]
fn epoch_rows_serialize_with_epoch_first() {
    let mut cfg = ExperimentConfig::desk(StrategyTag::Random, 0.1, 1, "unused");
    cfg.task.p = 11;
    cfg.task.train_size = 40;
    cfg.task.test_size = 81;
    cfg.model.p = 11;
    cfg.model.d_model = 8;
    cfg.model.n_heads = 2;
    cfg.model.d_ff = 16;
    cfg.hooks = HookSchedule::none();
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    let mut sink = MemorySink::default();
    let r = t.run_epoch(&mut sink).unwrap();
    let v = report_json(&r);
    assert_eq!(v["epoch"], 1);
    let rows = rows_json(&sink, "training_metrics");
    let first = rows[0].as_object().unwrap();
    assert_eq!(first.keys().next().unwrap(), "epoch");
    assert_eq!(first["loss"].as_f64().unwrap(), r.loss);
}
