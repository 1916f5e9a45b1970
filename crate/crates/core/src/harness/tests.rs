use std::sync::OnceLock;

use super::*;
use crate::net::evaluate;

fn tiny() -> FixtureConfig {
    FixtureConfig {
        classes: 3,
        height: 6,
        width: 6,
        channels: 3,
        source_samples: 90,
        target_samples: 60,
        epochs: 3,
        batch_size: 30,
        ..FixtureConfig::default()
    }
}

fn fixtures() -> &'static Fixtures {
    static F: OnceLock<Fixtures> = OnceLock::new();
    F.get_or_init(|| Fixtures::prepare(&tiny(), None).unwrap())
}

fn config(method: Method) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        name: method.name().into(),
        method,
        fixture: tiny(),
        stream: StreamSpec {
            batch_size: 16,
            corruptions: vec!["gaussian_noise:3:1".into()],
            ..StreamSpec::default()
        },
        prompt: PromptSpec {
            frame_width: 1,
            ..PromptSpec::default()
        },
        engine: EngineConfig::for_classes(3),
        ..ExperimentConfig::default()
    };
    c.zoo.queries_per_sample = 4;
    c.zoo.q = 3;
    c.tt_aug.views = 3;
    c
}

#[test]
fn config_round_trips_through_toml() {
    let c = config(Method::ZooRgf);
    let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
}

#[test]
fn partial_config_files_fill_defaults() {
    let c = ExperimentConfig::from_toml(
        r#"
        name = "x"
        method = "zoo_spsa_gc"
        [engine.filter]
        alpha = 0.7
        [stream]
        mode = "continual"
        corruptions = ["contrast:5:3", "pixelate:5:3"]
        "#,
    )
    .unwrap();
    assert_eq!(c.method, Method::ZooSpsaGc);
    assert_eq!(c.engine.filter.alpha, 0.7);
    assert_eq!(c.engine.filter.lambda, 50.0);
    assert_eq!(c.stream.batch_size, 64);
    assert_eq!(c.fixture, FixtureConfig::default());
    assert!(ExperimentConfig::from_toml("methd = \"beta\"").is_err());
    assert!(ExperimentConfig::from_toml("method = \"lame\"").is_err());
}

#[test]
fn hash_ignores_output_dir_only() {
    let a = config(Method::Beta);
    let b = ExperimentConfig {
        output_dir: "elsewhere".into(),
        ..a.clone()
    };
    assert_eq!(a.hash(), b.hash());
    let mut c = a.clone();
    c.engine.filter.alpha = 0.5;
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn method_fields_are_checked_up_front() {
    let mut c = config(Method::ZooRgf);
    c.zoo.q = 2;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    // the same zoo settings do not matter to a BETA run
    c.method = Method::Beta;
    assert!(c.validate().is_ok());
    c.engine.filter.alpha = 1.5;
    assert!(c.validate().is_err());

    let mut t = config(Method::TtAug);
    t.tt_aug.views = 0;
    assert!(t.validate().is_err());
    let mut s = config(Method::Source);
    s.stream.corruptions = vec!["fog:5:1".into()];
    assert!(s.validate().is_err());
    s.stream.corruptions.clear();
    s.stream.mode = StreamKind::Continual;
    assert!(s.validate().is_err());
    let mut n = config(Method::Source);
    n.name = "a/b".into();
    assert!(n.validate().is_err());
}

#[test]
fn method_names_parse() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
        assert_eq!(format!("{m}"), m.name());
    }
}

#[test]
fn source_matches_direct_evaluation() {
    let f = fixtures();
    let c = config(Method::Source);
    let r = run_with(&c, f).unwrap();
    let spec: CorruptionSpec = c.stream.corruptions[0].parse().unwrap();
    let set = f.target.corrupted(&spec).unwrap();
    let direct = evaluate(&f.blackbox, &set.images, &set.labels).unwrap();
    assert_eq!(r.summary.samples, 60);
    assert_eq!(r.summary.accuracy, (direct * 60.0).round() / 60.0);
    assert_eq!(r.ledger.total_requests, 60);
    assert_eq!(r.summary.queries, 60);
}

#[test]
fn every_method_bills_its_multiplicity() {
    let f = fixtures();
    for m in Method::ALL {
        let c = config(m);
        let r = run_with(&c, f).unwrap();
        let per = m.queries_per_sample(&c);
        assert_eq!(r.ledger.total_requests, 60 * per, "{m}");
        assert_eq!(r.ledger.requests_for(m.name()), 60 * per, "{m}");
        assert_eq!(r.run.method, m.name());
        assert_eq!(r.summary.skipped_batches, 0, "{m}");
        assert_eq!(r.summary.cost, cost_of(60 * per, PRICE_PER_REQUEST));
    }
}

#[test]
fn ensembles_predict_from_the_mixture() {
    let f = fixtures();
    for m in [Method::AdaptEnsemble, Method::PromptEnsemble] {
        let r = run_with(&config(m), f).unwrap();
        assert_eq!(r.summary.accuracy, r.summary.accuracy_harmonized);
    }
    let r = run_with(&config(Method::Beta), f).unwrap();
    assert_eq!(r.summary.accuracy, r.summary.accuracy_blackbox);
    let e = config(Method::AdaptEnsemble).engine_config();
    assert!(!e.update_prompt && e.update_theta);
    let e = config(Method::PromptEnsemble).engine_config();
    assert_eq!(e.objective, Objective::SteeringOnly);
}

#[test]
fn reports_are_byte_reproducible() {
    let f = fixtures();
    for m in [Method::Beta, Method::ZooSpsaGc, Method::TtAug] {
        let a = run_with(&config(m), f).unwrap();
        let b = run_with(&config(m), f).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.to_csv(), b.to_csv());
    }
}

#[test]
fn reports_write_and_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_with(&config(Method::Beta), fixtures()).unwrap();
    let (json, csv) = r.write(dir.path()).unwrap();
    let back = ExperimentReport::from_json(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(back.summary, r.summary);
    assert_eq!(back.config_hash, r.config_hash);
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + r.run.batches.len());
    assert!(text.lines().skip(1).all(|l| l.starts_with(&r.config_hash[..16])));
    let table = summarize(&[back]);
    assert!(table.contains("beta"));
}

#[test]
fn query_cap_truncates() {
    let mut c = config(Method::Beta);
    c.max_queries = Some(40);
    let r = run_with(&c, fixtures()).unwrap();
    assert_eq!(r.summary.samples, 40);
    assert_eq!(r.ledger.total_requests, 40);
}

#[test]
fn budget_sweep_matches_full_run_prefix() {
    let f = fixtures();
    let c = config(Method::Beta);
    let full = run_with(&c, f).unwrap();
    let budgets = [0.0512, 0.1024, 0.1536];
    let (curve, _) = sweep(&c, f, SweepAxis::Budget, &budgets).unwrap();
    for p in &curve.points {
        let n = (p.value / PRICE_PER_REQUEST).round() as usize;
        assert_eq!(p.queries, n as u64);
        assert_eq!(p.samples, n);
        assert_eq!(p.accuracy, full.run.prefix_accuracy(n));
    }
    assert_eq!(curve.to_csv().lines().count(), 4);
}

#[test]
fn sweep_axes_are_checked() {
    let f = fixtures();
    assert!(sweep(&config(Method::Beta), f, SweepAxis::Alpha, &[]).is_err());
    assert!(sweep(&config(Method::Source), f, SweepAxis::Lambda, &[1.0]).is_err());
    assert!(sweep(&config(Method::AdaptEnsemble), f, SweepAxis::FrameWidth, &[2.0]).is_err());
    assert!(apply_axis(&config(Method::ZooSpsaGc), SweepAxis::FrameWidth, 1.5).is_err());
    assert!(apply_axis(&config(Method::Beta), SweepAxis::Alpha, 2.0).is_err());
    let w = apply_axis(&config(Method::ZooSpsaGc), SweepAxis::FrameWidth, 2.0).unwrap();
    assert_eq!(w.prompt.frame_width, 2);
    assert_eq!("frame_width".parse::<SweepAxis>().unwrap(), SweepAxis::FrameWidth);
}

#[test]
fn alpha_sweep_brackets_the_endpoints() {
    let f = fixtures();
    let (curve, reports) = sweep(&config(Method::Beta), f, SweepAxis::Alpha, &[0.0, 0.4, 1.0]).unwrap();
    assert_eq!(curve.points.len(), 3);
    assert!(reports.iter().all(|r| r.summary.samples == 60 && r.ledger.total_requests == 60));
    assert_ne!(curve.points[0].config_hash, curve.points[2].config_hash);
}

#[test]
fn stream_specs_build_the_right_shape() {
    let target = &fixtures().target;
    let mut s = StreamSpec {
        batch_size: 10,
        corruptions: vec!["contrast:5:1".into(), "pixelate:5:1".into()],
        ..StreamSpec::default()
    };
    let (st, book) = s.build(target).unwrap();
    assert_eq!(st.samples(), 120);
    assert_eq!(book.len(), 120);
    s.mode = StreamKind::Continual;
    let (st, _) = s.build(target).unwrap();
    let names: Vec<_> = st.segments().iter().map(|g| g.name.as_str()).collect();
    assert_eq!(names, ["contrast", "pixelate"]);
    s.mode = StreamKind::LabelImbalance;
    s.samples = Some(30);
    let (st, _) = s.build(target).unwrap();
    assert_eq!(st.samples(), 60);
    s.corruptions.clear();
    s.mode = StreamKind::Iid;
    assert_eq!(s.build(target).unwrap().0.samples(), 30);
}

#[test]
fn fixtures_cache_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = FixtureConfig {
        epochs: 1,
        ..tiny()
    };
    let a = Fixtures::prepare(&cfg, Some(dir.path())).unwrap();
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
    let b = Fixtures::prepare(&cfg, Some(dir.path())).unwrap();
    assert_eq!(a.blackbox.digest(), b.blackbox.digest());
    assert_eq!(a.steering.digest(), b.steering.digest());
    assert_eq!(a.target, b.target);
    assert_ne!(cfg.training_key(Role::BlackBox).unwrap(), cfg.training_key(Role::Steering).unwrap());

    let missing = FixtureConfig {
        blackbox_checkpoint: Some(dir.path().join("nope.json")),
        ..cfg.clone()
    };
    assert!(matches!(Fixtures::prepare(&missing, None), Err(Error::Checkpoint(_))));
    let wrong = FixtureConfig {
        classes: 4,
        blackbox_checkpoint: std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.to_string_lossy().contains("blackbox")),
        ..cfg
    };
    assert!(Fixtures::prepare(&wrong, None).is_err());
}

#[test]
fn gradient_analysis_endpoints() {
    let cfg = GradientAnalysisConfig {
        corruption: "contrast:5:1".into(),
        alphas: vec![0.5, 1.0],
        batches: 3,
        batch_size: 8,
        prompt: PromptSpec {
            frame_width: 1,
            ..PromptSpec::default()
        },
        ..GradientAnalysisConfig::default()
    };
    let g = analyze_gradients(fixtures(), &cfg).unwrap();
    assert_eq!(g.local_vs_black.len(), 3);
    // with the target's weight at zero the proxy gradient is the ideal one
    assert!((g.per_alpha[1].effectiveness - 1.0).abs() < 1e-9);
    assert!(g.local_vs_black.iter().all(|c| c.abs() <= 1.0));
    assert_eq!(g.to_csv().lines().count(), 3);
    let bad = GradientAnalysisConfig {
        batch_size: 1000,
        ..cfg
    };
    assert!(analyze_gradients(fixtures(), &bad).is_err());
}

#[test]
fn remote_service_that_is_down_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let mut c = config(Method::Source);
    c.service.addr = Some(addr.to_string());
    let e = run_with(&c, fixtures()).unwrap_err();
    assert_eq!(e.class(), crate::ErrorClass::Transport, "{e}");
}
