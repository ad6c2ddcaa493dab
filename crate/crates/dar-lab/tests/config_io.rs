use dar_lab::config::{parse_chunk, Config, ConfigError};
use dar_lab::router::{Pooling, QueryVariant, RouteMode};
use std::io::Write;

fn write_tmp(name: &str, body: &str) -> std::path::PathBuf {
    let path = std::env::temp_dir().join(name);
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(body.as_bytes()).unwrap();
    path
}

#[test]
fn defaults_resolve() {
    let settings = Config::default().settings().unwrap();
    assert_eq!(settings.model.n_blocks, 6);
    assert_eq!(settings.model.d, 64);
    assert_eq!(settings.route.mode, RouteMode::Standard);
    assert_eq!(settings.route.chunk, 2);
    assert_eq!(settings.train.steps, 2000);
    assert_eq!(settings.train.batch, 16);
    assert!((settings.train.lr - 1e-4).abs() < 1e-18);
    assert!((settings.train.null_drop - 0.1).abs() < 1e-18);
    assert_eq!(settings.data.seed, 42);
    assert_eq!(settings.sample.steps, 32);
    assert!((settings.probe.lambda - 1e-3).abs() < 1e-18);
    assert!(settings.sweep.is_empty());
}

#[test]
fn file_parse_with_comments_and_overrides() {
    let path = write_tmp(
        "dar_cfg_ok.cfg",
        "# comment line\n\
         train.steps = 50\n\
         \n\
         router.mode = dar   \n\
         router.query=dynamic\n",
    );
    let config = Config::from_file(&path).unwrap();
    let settings = config.settings().unwrap();
    assert_eq!(settings.train.steps, 50);
    assert_eq!(settings.route.mode, RouteMode::Dar);
    assert_eq!(settings.route.query, QueryVariant::Dynamic);
    // Untouched keys keep defaults.
    assert_eq!(settings.train.batch, 16);
}

#[test]
fn syntax_error_names_file_and_line() {
    let path = write_tmp("dar_cfg_syntax.cfg", "train.steps = 50\nnot a kv line\n");
    let err = Config::from_file(&path).unwrap_err();
    match err {
        ConfigError::Syntax { path: p, line, text } => {
            assert!(p.contains("dar_cfg_syntax.cfg"));
            assert_eq!(line, 2);
            assert_eq!(text, "not a kv line");
        }
        other => panic!("wrong error: {other}"),
    }
}

#[test]
fn unknown_key_rejected() {
    let mut config = Config::default();
    let err = config.set("train.rocket_boost", "9000").unwrap_err();
    assert!(matches!(err, ConfigError::UnknownKey(k) if k == "train.rocket_boost"));
}

#[test]
fn bad_value_names_key() {
    let mut config = Config::default();
    config.set("train.steps", "soon").unwrap();
    let err = config.settings().unwrap_err();
    match err {
        ConfigError::BadValue { key, value, .. } => {
            assert_eq!(key, "train.steps");
            assert_eq!(value, "soon");
        }
        other => panic!("wrong error: {other}"),
    }
}

#[test]
fn dense_chunk_sentinel() {
    assert_eq!(parse_chunk("dense"), Some(1));
    assert_eq!(parse_chunk("4"), Some(4));
    assert_eq!(parse_chunk("0"), None);
    assert_eq!(parse_chunk("fine"), None);

    let mut config = Config::default();
    config.set("router.chunk", "dense").unwrap();
    assert_eq!(config.settings().unwrap().route.chunk, 1);
}

#[test]
fn sweep_tokens() {
    let mut config = Config::default();
    config.set("router.chunk", "3").unwrap();
    config.set("router.pooling", "mean_pooled").unwrap();
    config
        .set("sweep.modes", "standard, unet_skip, dar-static, dar-explicit, dar-dynamic")
        .unwrap();
    let settings = config.settings().unwrap();
    assert_eq!(settings.sweep.len(), 5);
    let labels: Vec<&str> = settings.sweep.iter().map(|e| e.label.as_str()).collect();
    assert_eq!(labels, ["standard", "unet_skip", "dar-static", "dar-explicit", "dar-dynamic"]);
    assert_eq!(settings.sweep[0].route.mode, RouteMode::Standard);
    assert_eq!(settings.sweep[1].route.mode, RouteMode::UnetSkip);
    for entry in &settings.sweep[2..] {
        assert_eq!(entry.route.mode, RouteMode::Dar);
        // Variants inherit the base chunk/pooling axes.
        assert_eq!(entry.route.chunk, 3);
        assert_eq!(entry.route.pooling, Pooling::MeanPooled);
    }
    assert_eq!(settings.sweep[2].route.query, QueryVariant::Static);
    assert_eq!(settings.sweep[3].route.query, QueryVariant::ExplicitT);
    assert_eq!(settings.sweep[4].route.query, QueryVariant::Dynamic);

    let mut bad = Config::default();
    bad.set("sweep.modes", "dar-psychic").unwrap();
    assert!(bad.settings().is_err());
}

#[test]
fn manifest_echoes_resolved_values() {
    let mut config = Config::default();
    config.set("train.steps", "123").unwrap();
    let json = config.manifest_json();
    let parsed: std::collections::BTreeMap<String, String> = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed["train.steps"], "123");
    assert_eq!(parsed["model.d"], "64");
    assert_eq!(parsed.len(), 33);
}

#[test]
fn schema_echo_round_trip() {
    let mut config = Config::default();
    config.set("model.n_blocks", "3").unwrap();
    config.set("router.mode", "dar").unwrap();
    let echo = config.schema_echo();
    assert!(echo.keys().all(|k| k.starts_with("model.") || k.starts_with("router.")));

    let mut fresh = Config::default();
    fresh.adopt_schema(&echo).unwrap();
    let settings = fresh.settings().unwrap();
    assert_eq!(settings.model.n_blocks, 3);
    assert_eq!(settings.route.mode, RouteMode::Dar);
    // Non-schema keys stay at their defaults.
    assert_eq!(settings.train.steps, 2000);
}
