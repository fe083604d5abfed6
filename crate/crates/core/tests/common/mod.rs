#![allow(dead_code)]

use rand::Rng;
use reltab_core::corpus::EncodedDatabase;
use reltab_core::rng::seeded;
use reltab_core::schema::{ColumnDef, ColumnRole, ForeignKeyDef, TableDef};
use reltab_core::vocab::{build_vocabularies, RowRecord, VocabOptions, VocabularySet};
use reltab_core::DatabaseSchema;

pub fn shop_schema() -> DatabaseSchema {
    let table = |name: &str, cols: &[(&str, ColumnRole)]| TableDef {
        name: name.into(),
        columns: cols.iter().map(|(n, r)| ColumnDef::new(*n, *r)).collect(),
    };
    DatabaseSchema {
        tables: vec![
            table("customers", &[("id", ColumnRole::PrimaryKey), ("city", ColumnRole::Attribute), ("tier", ColumnRole::Attribute)]),
            table("orders", &[("customer", ColumnRole::ForeignKey), ("product", ColumnRole::Attribute), ("channel", ColumnRole::Attribute)]),
            table("returns", &[("customer", ColumnRole::ForeignKey), ("reason", ColumnRole::Attribute)]),
        ],
        foreign_keys: vec![
            ForeignKeyDef::new("orders", "customer", "customers", "id"),
            ForeignKeyDef::new("returns", "customer", "customers", "id"),
        ],
    }
}

fn rows(table: &str, cells: Vec<Vec<Option<String>>>) -> Vec<RowRecord> {
    cells.into_iter().enumerate().map(|(row_index, cells)| RowRecord { table: table.into(), cells, row_index }).collect()
}

/// Random shop data; about 5% of attribute cells are null.
pub fn shop_tables(seed: u64, customers: usize, orders: usize) -> Vec<Vec<RowRecord>> {
    let mut rng = seeded(seed);
    let cell = |rng: &mut rand_chacha::ChaCha8Rng, prefix: &str, n: usize| {
        if rng.random_bool(0.05) {
            None
        } else {
            Some(format!("{prefix}{}", rng.random_range(0..n)))
        }
    };
    let c = (0..customers).map(|i| vec![Some(format!("c{i}")), cell(&mut rng, "city", 6), cell(&mut rng, "tier", 3)]).collect();
    let o = (0..orders)
        .map(|_| vec![Some(format!("c{}", rng.random_range(0..customers))), cell(&mut rng, "p", 12), cell(&mut rng, "ch", 2)])
        .collect();
    let r = (0..orders / 4).map(|_| vec![Some(format!("c{}", rng.random_range(0..customers))), cell(&mut rng, "why", 4)]).collect();
    vec![rows("customers", c), rows("orders", o), rows("returns", r)]
}

pub struct Shop {
    pub schema: DatabaseSchema,
    pub tables: Vec<Vec<RowRecord>>,
    pub vocabs: VocabularySet,
    pub db: EncodedDatabase,
}

pub fn shop(seed: u64, customers: usize, orders: usize) -> Shop {
    let schema = shop_schema();
    let tables = shop_tables(seed, customers, orders);
    let vocabs = build_vocabularies(&schema, &tables, &VocabOptions::default()).unwrap();
    let db = EncodedDatabase::encode(&schema, &vocabs, &tables);
    Shop { schema, tables, vocabs, db }
}
