//! Seeded synthetic databases used by the test suites and the demo data.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use reltab_core::rng::seeded;
use reltab_core::schema::{ColumnDef, ColumnRole, DTypeHint, ForeignKeyDef, TableDef};
use reltab_core::vocab::RowRecord;
use reltab_core::DatabaseSchema;

use crate::dataset::Dataset;

fn table(name: &str, cols: &[(&str, ColumnRole)]) -> TableDef {
    TableDef { name: name.into(), columns: cols.iter().map(|(n, r)| ColumnDef::new(*n, *r)).collect() }
}

fn records(table: &str, rows: Vec<Vec<String>>) -> Vec<RowRecord> {
    rows.into_iter()
        .enumerate()
        .map(|(row_index, cells)| RowRecord { table: table.into(), cells: cells.into_iter().map(Some).collect(), row_index })
        .collect()
}

use ColumnRole::{Attribute, ForeignKey, PrimaryKey};

pub const FD_TABLE: &str = "fd";
pub const FD_TARGET: &str = "c";

/// One table `fd(a, b, c)`, 500 rows, `a` and `b` uniform over 10 values
/// each and `c` a seeded bijection of `(a, b)` onto 100 values.
pub fn functional_dependency(seed: u64) -> Dataset {
    let mut rng = seeded(seed);
    let mut f: Vec<usize> = (0..100).collect();
    f.shuffle(&mut rng);
    let rows = (0..500)
        .map(|_| {
            let (a, b) = (rng.random_range(0..10usize), rng.random_range(0..10usize));
            vec![format!("a{a}"), format!("b{b}"), format!("c{}", f[a * 10 + b])]
        })
        .collect();
    let schema = DatabaseSchema { tables: vec![table(FD_TABLE, &[("a", Attribute), ("b", Attribute), ("c", Attribute)])], foreign_keys: vec![] };
    Dataset { schema, tables: vec![records(FD_TABLE, rows)] }
}

/// `alpha(key, x)` and `beta(fk, y)` with `beta.fk -> alpha.key` one to
/// one over `n_keys` keys. `x` and `y` are uniform noise over 5 values, so
/// only the key tells which rows join. Beta rows are shuffled.
pub fn unique_join(seed: u64, n_keys: usize) -> Dataset {
    let mut rng = seeded(seed);
    let alpha = (0..n_keys).map(|i| vec![format!("k{i}"), format!("x{}", rng.random_range(0..5))]).collect();
    let mut order: Vec<usize> = (0..n_keys).collect();
    order.shuffle(&mut rng);
    let beta = order.iter().map(|i| vec![format!("k{i}"), format!("y{}", rng.random_range(0..5))]).collect();
    let schema = DatabaseSchema {
        tables: vec![table("alpha", &[("key", PrimaryKey), ("x", Attribute)]), table("beta", &[("fk", ForeignKey), ("y", Attribute)])],
        foreign_keys: vec![ForeignKeyDef::new("beta", "fk", "alpha", "key")],
    };
    Dataset { schema, tables: vec![records("alpha", alpha), records("beta", beta)] }
}

pub const GENRES: [&str; 20] = [
    "Action", "Adult", "Adventure", "Animation", "Comedy", "Crime", "Documentary", "Drama", "Family", "Fantasy",
    "Film-Noir", "Horror", "Music", "Musical", "Mystery", "Romance", "Sci-Fi", "Short", "Thriller", "War",
];

pub const IMDB_TARGET: (&str, &str) = ("movies_directors", "director_id");

/// Shape of [`mini_imdb`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiniImdbSize {
    pub directors: usize,
    pub movies: usize,
    pub actors: usize,
    /// Cast size is drawn from `1..=max_cast` per movie.
    pub max_cast: usize,
}

impl Default for MiniImdbSize {
    fn default() -> Self {
        Self { directors: 120, movies: 2000, actors: 1500, max_cast: 4 }
    }
}

/// Five movie tables: `movies`, `directors`, `actors`, `movies_directors`
/// and `roles`. Every director has a home genre and an active decade; their
/// movies mostly follow both, and actors keep working with the same few
/// directors, so the director of a movie is predictable from context.
pub fn mini_imdb(seed: u64, size: MiniImdbSize) -> Dataset {
    let mut rng = seeded(seed);
    let decades: Vec<u32> = (1930..=2000).step_by(10).collect();
    let directors: Vec<(usize, u32)> =
        (0..size.directors).map(|_| (rng.random_range(0..GENRES.len()), *decades.choose(&mut rng).expect("non-empty"))).collect();
    let director_rows = directors
        .iter()
        .enumerate()
        .map(|(i, (g, dec))| vec![format!("d{i}"), GENRES[*g].to_string(), format!("{dec}s")])
        .collect();

    let first = ["Anna", "Ben", "Carla", "Dev", "Elif", "Femi", "Greta", "Hiro", "Ines", "Jon", "Kai", "Lena", "Mads", "Nia", "Omar", "Pia"];
    let last = ["Adams", "Berg", "Costa", "Dahl", "Evans", "Fox", "Gray", "Holm", "Ito", "Jung", "Khan", "Lund", "Moss", "Nagy", "Ortiz", "Park", "Quinn", "Ruiz", "Sato", "Toth"];
    let mut actor_rows = Vec::with_capacity(size.actors);
    let mut crew: Vec<Vec<usize>> = vec![Vec::new(); size.directors];
    for i in 0..size.actors {
        actor_rows.push(vec![
            format!("a{i}"),
            first.choose(&mut rng).expect("non-empty").to_string(),
            last.choose(&mut rng).expect("non-empty").to_string(),
            if rng.random_bool(0.5) { "F" } else { "M" }.to_string(),
        ]);
        crew[rng.random_range(0..size.directors)].push(i);
    }

    let roles_pool = ["Lead", "Villain", "Sidekick", "Narrator", "Detective", "Doctor", "Soldier", "Teacher", "Stranger", "Mother", "Father", "Child"];
    let (mut movie_rows, mut md_rows, mut role_rows) = (Vec::new(), Vec::new(), Vec::new());
    for m in 0..size.movies {
        let d = rng.random_range(0..size.directors);
        let (g, dec) = directors[d];
        let genre = if rng.random_bool(0.8) { g } else { rng.random_range(0..GENRES.len()) };
        let year = dec + rng.random_range(0..10);
        let rank = (g % 9 + rng.random_range(0..3)).min(8) + 1;
        movie_rows.push(vec![format!("m{m}"), format!("Movie {m}"), year.to_string(), rank.to_string(), GENRES[genre].to_string()]);
        md_rows.push(vec![format!("m{m}"), format!("d{d}")]);
        for _ in 0..rng.random_range(1..=size.max_cast) {
            let a = match crew[d].choose(&mut rng) {
                Some(&a) if rng.random_bool(0.7) => a,
                _ => rng.random_range(0..size.actors),
            };
            role_rows.push(vec![format!("a{a}"), format!("m{m}"), roles_pool.choose(&mut rng).expect("non-empty").to_string()]);
        }
    }

    let mut movies = table("movies", &[("movie_id", PrimaryKey), ("movie_name", Attribute), ("movie_year", Attribute), ("movie_rank", Attribute), ("movie_genre", Attribute)]);
    movies.columns[2].dtype_hint = DTypeHint::Numeric;
    movies.columns[3].dtype_hint = DTypeHint::Numeric;
    let schema = DatabaseSchema {
        tables: vec![
            movies,
            table("directors", &[("director_id", PrimaryKey), ("director_genre", Attribute), ("director_decade", Attribute)]),
            table("actors", &[("actor_id", PrimaryKey), ("actor_first_name", Attribute), ("actor_last_name", Attribute), ("actor_gender", Attribute)]),
            table("movies_directors", &[("movie_id", ForeignKey), ("director_id", ForeignKey)]),
            table("roles", &[("actor_id", ForeignKey), ("movie_id", ForeignKey), ("role", Attribute)]),
        ],
        foreign_keys: vec![
            ForeignKeyDef::new("movies_directors", "director_id", "directors", "director_id"),
            ForeignKeyDef::new("movies_directors", "movie_id", "movies", "movie_id"),
            ForeignKeyDef::new("roles", "actor_id", "actors", "actor_id"),
            ForeignKeyDef::new("roles", "movie_id", "movies", "movie_id"),
        ],
    };
    Dataset {
        schema,
        tables: vec![
            records("movies", movie_rows),
            records("directors", director_rows),
            records("actors", actor_rows),
            records("movies_directors", md_rows),
            records("roles", role_rows),
        ],
    }
}
