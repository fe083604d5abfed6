use std::path::Path;

use reltab::csv_io::{read_table_csv, table_csv_bytes};
use reltab::dataset::Dataset;
use reltab::schema_io::{load_schema, parse_schema, schema_hash, schema_to_json};
use reltab::synthetic;
use reltab::Error;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn imdb_fixture_shape() {
    let s = load_schema(&fixture("imdb_schema.json")).unwrap();
    assert_eq!(s.tables.len(), 7);
    assert_eq!(s.num_columns(), 21);
    assert_eq!(s.join_compatible_pairs().len(), 6);
    assert!(s.is_connected());
}

#[test]
fn mimic_fixture_shape() {
    let s = load_schema(&fixture("mimic_schema.json")).unwrap();
    assert_eq!(s.tables.len(), 6);
    assert_eq!(s.join_compatible_pairs().len(), 12);
    assert!(s.is_connected());
}

#[test]
fn schema_text_round_trip_keeps_the_hash() {
    let s = load_schema(&fixture("imdb_schema.json")).unwrap();
    let again = parse_schema(&schema_to_json(&s), Path::new("mem")).unwrap();
    assert_eq!(again, s);
    assert_eq!(schema_hash(&again), schema_hash(&s));
    let mut other = s.clone();
    other.tables[0].columns.swap(1, 2);
    assert_ne!(schema_hash(&other), schema_hash(&s));
}

#[test]
fn broken_schemas_are_parse_errors() {
    for text in [
        "{",
        r#"{"tables": [{"name": "a", "columns": []}]}"#,
        r#"{"tables": [{"name": "a", "columns": [{"name": "x", "role": "primary_key"}]}],
            "foreign_keys": [{"from_table": "a", "from_column": "y", "to_table": "a", "to_column": "x"}]}"#,
    ] {
        assert!(parse_schema(text, Path::new("s.json")).is_err(), "{text}");
    }
}

#[test]
fn csv_header_order_is_free_and_empty_is_null() {
    let ds = synthetic::unique_join(0, 3);
    let text = "y,fk\ny1,k0\n,\"k,1\"\n\"say \"\"hi\"\"\",k2\n";
    let rows = read_table_csv(&ds.schema, "beta", text.as_bytes(), Path::new("beta.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].cells, vec![Some("k0".into()), Some("y1".into())]);
    assert_eq!(rows[1].cells, vec![Some("k,1".into()), None]);
    assert_eq!(rows[2].cell(1), Some("say \"hi\""));
    assert_eq!(rows[2].row_index, 2);
}

#[test]
fn csv_rejects_bad_headers_and_ragged_rows() {
    let ds = synthetic::unique_join(0, 3);
    for text in ["fk\nk0\n", "fk,y,z\nk0,y,z\n", "fk,fk\nk0,k0\n", "fk,y\nk0\n", "fk,y\nk0,y1,extra\n"] {
        let err = read_table_csv(&ds.schema, "beta", text.as_bytes(), Path::new("beta.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{text:?}: {err}");
        assert_eq!(err.exit_code(), 1);
    }
    assert!(read_table_csv(&ds.schema, "gamma", "a\n".as_bytes(), Path::new("g.csv")).is_err());
}

#[test]
fn written_tables_read_back() {
    let ds = synthetic::mini_imdb(1, synthetic::MiniImdbSize { directors: 5, movies: 30, actors: 20, max_cast: 2 });
    for (def, rows) in ds.schema.tables.iter().zip(&ds.tables) {
        let bytes = table_csv_bytes(def, rows);
        let back = read_table_csv(&ds.schema, &def.name, bytes.as_slice(), Path::new("x.csv")).unwrap();
        assert_eq!(&back, rows);
    }
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let loaded = Dataset::open(None, dir.path()).unwrap();
    assert_eq!(loaded.schema, ds.schema);
    assert_eq!(loaded.tables, ds.tables);
    assert!(loaded.validate().is_empty());
}

#[test]
fn missing_table_file_is_an_io_error() {
    let ds = synthetic::unique_join(0, 3);
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("beta.csv")).unwrap();
    assert!(matches!(Dataset::open(None, dir.path()), Err(Error::Io { .. })));
}

#[test]
fn synthetic_generators_are_seeded() {
    assert_eq!(synthetic::functional_dependency(3).tables, synthetic::functional_dependency(3).tables);
    assert_ne!(synthetic::functional_dependency(3).tables, synthetic::functional_dependency(4).tables);
    let fd = synthetic::functional_dependency(5);
    // c is a function of (a, b), and distinct pairs give distinct c.
    let mut f = std::collections::BTreeMap::new();
    let mut g = std::collections::BTreeMap::new();
    for r in &fd.tables[0] {
        let ab = (r.cell(0).unwrap(), r.cell(1).unwrap());
        assert_eq!(*f.entry(ab).or_insert(r.cell(2).unwrap()), r.cell(2).unwrap());
        assert_eq!(*g.entry(r.cell(2).unwrap()).or_insert(ab), ab);
    }
    let mini = synthetic::mini_imdb(0, Default::default());
    assert!(mini.num_rows() <= 20_000);
    assert!(mini.validate().is_empty());
}
