use reltab::config::{load_config_file, resolve_seed, resolve_train_config, TrainOverrides};
use reltab::Error;
use reltab_core::train::{TrainConfig, Variant};

fn write(dir: &std::path::Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn flags_beat_file_beats_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), r#"{"seed": 4, "batch_size": 7, "encoder": {"d_model": 16, "heads": 2}, "adam": {"lr": 0.01}}"#);
    let flags = TrainOverrides { batch_size: Some(9), seed: Some(11), ..Default::default() };
    let c = resolve_train_config(Some(&p), &flags).unwrap();
    assert_eq!(c.batch_size, 9);
    assert_eq!(c.seed, 11);
    assert_eq!(c.encoder.d_model, 16);
    assert_eq!(c.encoder.heads, 2);
    assert_eq!(c.adam.lr, 0.01);
    let d = TrainConfig::default();
    assert_eq!(c.encoder.layers, d.encoder.layers);
    assert_eq!(c.negatives, d.negatives);

    let c = resolve_train_config(Some(&p), &TrainOverrides::default()).unwrap();
    assert_eq!((c.seed, c.batch_size), (4, 7));
}

#[test]
fn file_seed_is_only_set_when_written() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(load_config_file(&write(dir.path(), r#"{"variant": "j"}"#)).unwrap().seed, None);
    let f = load_config_file(&write(dir.path(), r#"{"variant": "j", "seed": 0}"#)).unwrap();
    assert_eq!((f.seed, f.train.variant), (Some(0), Variant::J));
}

#[test]
fn seed_precedence() {
    assert_eq!(resolve_seed(Some(1), Some(2)).unwrap(), 1);
    assert_eq!(resolve_seed(None, Some(2)).unwrap(), 2);
}

#[test]
fn invalid_settings_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let flags = TrainOverrides { seed: Some(0), ..Default::default() };
    let bad = write(dir.path(), r#"{"encoder": {"d_model": 10, "heads": 3}}"#);
    assert!(resolve_train_config(Some(&bad), &flags).is_err());
    let typo = write(dir.path(), r#"{"batch_size": "many"}"#);
    assert!(matches!(resolve_train_config(Some(&typo), &flags), Err(Error::Parse { .. })));
    let zero = TrainOverrides { seed: Some(0), negatives: Some(0), ..Default::default() };
    assert!(resolve_train_config(None, &zero).is_err());
}
