#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sain::data::{EntityFeatures, FeatureTables, Interaction};
use sain::model::{HeadParams, ModelShape};
use sain::tensor::Matrix;

/// Directory holding the prepared MovieLens-100k files.
pub fn ml100k_dir() -> PathBuf {
    match std::env::var_os("SAIN_ML100K_DIR") {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k"),
    }
}

/// Small rating dataset on disk: `users` users rating `per_user` distinct
/// items each, two user fields and two item fields (one open, multi-valued).
/// Returns the path of a run manifest for `model`.
pub fn write_synthetic(dir: &Path, model: &str, users: usize, items: usize, per_user: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratings = String::new();
    let mut ts = 1_000_000i64;
    for u in 0..users {
        let start = rng.gen_range(0..items);
        for j in 0..per_user {
            let i = (start + j * 7) % items;
            let r = rng.gen_range(1..=5);
            ts += rng.gen_range(1..100);
            let _ = writeln!(ratings, "u{u}\ti{i}\t{r}\t{ts}");
        }
    }
    std::fs::write(dir.join("ratings.tsv"), ratings).unwrap();
    let mut gender = String::new();
    let mut occ = String::new();
    for u in 0..users {
        let _ = writeln!(gender, "u{u}\t{}", ["M", "F"][rng.gen_range(0..2)]);
        let _ = writeln!(occ, "u{u}\t{}", ["artist", "doctor", "engineer", "student"][rng.gen_range(0..4)]);
    }
    let mut genre = String::new();
    let mut tags = String::new();
    let genres = ["action", "comedy", "drama", "horror", "romance"];
    for i in 0..items {
        let a = genres[rng.gen_range(0..5)];
        let b = genres[rng.gen_range(0..5)];
        let _ = writeln!(genre, "i{i}\t{a}|{b}");
        if i % 3 != 0 {
            let _ = writeln!(tags, "i{i}\tt{}|t{}", rng.gen_range(0..6), rng.gen_range(0..6));
        }
    }
    std::fs::write(dir.join("user_gender.tsv"), gender).unwrap();
    std::fs::write(dir.join("user_occupation.tsv"), occ).unwrap();
    std::fs::write(dir.join("item_genre.tsv"), genre).unwrap();
    std::fs::write(dir.join("item_tags.tsv"), tags).unwrap();
    std::fs::write(
        dir.join("dataset.toml"),
        r#"ratings = "ratings.tsv"
min_ratings = 5
tag_top_t = 4

[[features]]
field = "gender"
owner = "user"
path = "user_gender.tsv"

[[features]]
field = "occupation"
owner = "user"
path = "user_occupation.tsv"

[[features]]
field = "genre"
owner = "item"
path = "item_genre.tsv"

[[features]]
field = "tags"
owner = "item"
path = "item_tags.tsv"
kind = "open"
"#,
    )
    .unwrap();
    let manifest = dir.join(format!("run_{model}.toml"));
    std::fs::write(
        &manifest,
        format!(
            r#"dataset = "dataset.toml"
model = "{model}"
output_dir = "out_{model}"

[model_config]
dim = 8
top_k = 3

[train]
seed = 11
max_epochs = 3
batch_size = 32
"#
        ),
    )
    .unwrap();
    manifest
}

/// In-memory feature tables with one category index per slot.
pub fn random_features(
    rng: &mut ChaCha8Rng,
    users: usize,
    items: usize,
    user_sizes: &[usize],
    item_sizes: &[usize],
) -> FeatureTables {
    let side = |rng: &mut ChaCha8Rng, n: usize, sizes: &[usize]| -> Vec<EntityFeatures> {
        (0..n)
            .map(|entity| EntityFeatures {
                entity,
                slots: sizes.iter().map(|&s| vec![rng.gen_range(0..s)]).collect(),
            })
            .collect()
    };
    FeatureTables {
        users: side(rng, users, user_sizes),
        items: side(rng, items, item_sizes),
    }
}

pub fn shape_for(user_sizes: &[usize], item_sizes: &[usize], users: usize, items: usize) -> ModelShape {
    let names: Vec<String> = (0..user_sizes.len())
        .map(|f| format!("u{f}"))
        .chain((0..item_sizes.len()).map(|f| format!("i{f}")))
        .collect();
    ModelShape {
        field_names: names,
        field_sizes: user_sizes.iter().chain(item_sizes).copied().collect(),
        num_user_fields: user_sizes.len(),
        num_users: users,
        num_items: items,
    }
}

/// 100 unique (user, item) pairs with random integer ratings.
pub fn memorization_set(seed: u64, users: usize, items: usize) -> Vec<Interaction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < 100 {
        let (u, i) = (rng.gen_range(0..users), rng.gen_range(0..items));
        if seen.insert((u, i)) {
            out.push(Interaction {
                user: u,
                item: i,
                rating: rng.gen_range(1..=5) as f64,
                timestamp: None,
            });
        }
    }
    out
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Unfiltered scaled dot-product attention for one head, written
/// independently of the library: `softmax(QKᵀ/√d') V` with
/// `Q = X W_Qᵀ` etc.
pub fn reference_attention(x: &Matrix, head: &HeadParams) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let l = x.rows();
    let project = |w: &Matrix| -> Vec<Vec<f64>> {
        (0..l)
            .map(|i| {
                (0..w.rows())
                    .map(|r| (0..x.cols()).map(|c| w.get(r, c) * x.get(i, c)).sum())
                    .collect()
            })
            .collect()
    };
    let q = project(&head.query);
    let k = project(&head.key);
    let v = project(&head.value);
    let dh = head.query.rows() as f64;
    let mut weights = Vec::with_capacity(l);
    let mut out = Vec::with_capacity(l);
    for i in 0..l {
        let logits: Vec<f64> = (0..l)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / dh.sqrt())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let w: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let o: Vec<f64> = (0..v[0].len())
            .map(|c| (0..l).map(|j| w[j] * v[j][c]).sum())
            .collect();
        weights.push(w);
        out.push(o);
    }
    (weights, out)
}
