//! Rating and feature ingestion, vocabularies, preprocessing and splits.
//!
//! Ratings files are `user<TAB>item<TAB>rating[<TAB>timestamp]`; feature files
//! are `entity<TAB>tok1|tok2|...`. Users with fewer than `min_ratings`
//! interactions are dropped once, before any split is taken.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const UNKNOWN_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: rating {value} outside [1, 5]")]
    RatingOutOfRange { line: usize, value: f64 },
    #[error("dataset too small to split")]
    TooSmall,
    #[error("unknown owner tag {0:?} (expected \"user\" or \"item\")")]
    UnknownOwner(String),
    #[error("unknown field kind {0:?} (expected \"open\" or \"closed\")")]
    UnknownKind(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("field {field:?} has no unknown category but entity {entity:?} has no value")]
    MissingUnknown { field: String, entity: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Token → dense index map in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct IdVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for IdVocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<IdVocab> for Vec<String> {
    fn from(v: IdVocab) -> Self {
        v.tokens
    }
}

impl IdVocab {
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingsData {
    pub interactions: Vec<Interaction>,
    pub users: IdVocab,
    pub items: IdVocab,
    /// Users removed by the minimum-ratings filter.
    pub removed_users: usize,
}

impl RatingsData {
    pub fn sparsity(&self) -> f64 {
        sparsity(self.interactions.len(), self.users.len(), self.items.len())
    }
}

/// `1 - ratings / (users * items)`
pub fn sparsity(ratings: usize, users: usize, items: usize) -> f64 {
    1.0 - ratings as f64 / (users as f64 * items as f64)
}

pub fn load_ratings(path: &Path, min_ratings: usize) -> Result<RatingsData, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse_ratings(BufReader::new(file), min_ratings).map_err(|e| match e {
        DataError::Io { source, .. } => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

struct RawRating {
    user: String,
    item: String,
    rating: f64,
    timestamp: Option<i64>,
}

pub fn parse_ratings<R: BufRead>(reader: R, min_ratings: usize) -> Result<RatingsData, DataError> {
    let mut raw = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|source| DataError::Io {
            path: PathBuf::new(),
            source,
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 || cols.len() > 4 {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("expected 3 or 4 tab-separated columns, found {}", cols.len()),
            });
        }
        let (user, item) = (cols[0].trim(), cols[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(DataError::Parse {
                line: line_no,
                msg: "empty user or item id".into(),
            });
        }
        let rating: f64 = cols[2].trim().parse().map_err(|_| DataError::Parse {
            line: line_no,
            msg: format!("bad rating {:?}", cols[2]),
        })?;
        if !(1.0..=5.0).contains(&rating) {
            return Err(DataError::RatingOutOfRange {
                line: line_no,
                value: rating,
            });
        }
        let timestamp = match cols.get(3).map(|s| s.trim()) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<i64>().map_err(|_| DataError::Parse {
                line: line_no,
                msg: format!("bad timestamp {s:?}"),
            })?),
        };
        raw.push(RawRating {
            user: user.to_string(),
            item: item.to_string(),
            rating,
            timestamp,
        });
    }

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in &raw {
        *counts.entry(r.user.as_str()).or_default() += 1;
    }
    let removed_users = counts.values().filter(|&&c| c < min_ratings).count();

    let mut users = IdVocab::default();
    let mut items = IdVocab::default();
    let mut interactions = Vec::with_capacity(raw.len());
    for r in &raw {
        if counts[r.user.as_str()] < min_ratings {
            continue;
        }
        interactions.push(Interaction {
            user: users.insert(&r.user),
            item: items.insert(&r.item),
            rating: r.rating,
            timestamp: r.timestamp,
        });
    }
    Ok(RatingsData {
        interactions,
        users,
        items,
        removed_users,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub seed: u64,
}

fn split_sizes(n: usize) -> (usize, usize) {
    let train = (n as f64 * 0.8).round() as usize;
    let val = (n as f64 * 0.1).round() as usize;
    (train, val.min(n - train))
}

fn cut(ordered: Vec<Interaction>, seed: u64) -> DatasetSplit {
    let (n_train, n_val) = split_sizes(ordered.len());
    let mut it = ordered.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let validation = it.by_ref().take(n_val).collect();
    DatasetSplit {
        train,
        validation,
        test: it.collect(),
        seed,
    }
}

/// Seeded random 8:1:1 split.
pub fn split_dataset(interactions: &[Interaction], seed: u64) -> Result<DatasetSplit, DataError> {
    if interactions.len() < 10 {
        return Err(DataError::TooSmall);
    }
    let mut order: Vec<usize> = (0..interactions.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(cut(order.into_iter().map(|i| interactions[i]).collect(), seed))
}

/// 8:1:1 split in timestamp order (oldest to train). Missing timestamps sort first.
pub fn split_by_time(interactions: &[Interaction], seed: u64) -> Result<DatasetSplit, DataError> {
    if interactions.len() < 10 {
        return Err(DataError::TooSmall);
    }
    let mut ordered = interactions.to_vec();
    ordered.sort_by_key(|i| i.timestamp);
    Ok(cut(ordered, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Owner {
    User,
    Item,
}

impl std::str::FromStr for Owner {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "user" => Ok(Owner::User),
            "item" => Ok(Owner::Item),
            other => Err(DataError::UnknownOwner(other.to_string())),
        }
    }
}

/// Closed fields are indexed exhaustively; open fields (tag sets) keep only
/// the most frequent tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Closed,
    Open,
}

impl std::str::FromStr for FieldKind {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "closed" => Ok(FieldKind::Closed),
            "open" => Ok(FieldKind::Open),
            other => Err(DataError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldVocab {
    pub name: String,
    pub owner: Owner,
    pub kind: FieldKind,
    pub tokens: IdVocab,
    /// Index of the reserved unknown category, when the field has one.
    pub unknown: Option<usize>,
}

impl FieldVocab {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        match self.unknown {
            Some(u) if token == UNKNOWN_TOKEN => Some(u),
            _ => self.tokens.get(token),
        }
    }
}

/// Per-field vocabularies, user fields first then item fields, each side in
/// manifest order. That order is the feature-sequence order everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVocab {
    pub fields: Vec<FieldVocab>,
}

impl FeatureVocab {
    pub fn user_fields(&self) -> impl Iterator<Item = &FieldVocab> {
        self.fields.iter().filter(|f| f.owner == Owner::User)
    }

    pub fn item_fields(&self) -> impl Iterator<Item = &FieldVocab> {
        self.fields.iter().filter(|f| f.owner == Owner::Item)
    }

    pub fn num_user_fields(&self) -> usize {
        self.user_fields().count()
    }

    pub fn num_item_fields(&self) -> usize {
        self.item_fields().count()
    }

    pub fn field_names(&self) -> Vec<String> {
        self.fields.iter().map(|f| f.name.clone()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.fields.iter().map(FieldVocab::size).collect()
    }
}

/// Raw values of one feature field: entity token → token list, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawField {
    pub name: String,
    pub owner: Owner,
    pub kind: FieldKind,
    pub values: BTreeMap<String, Vec<String>>,
}

pub fn parse_feature_lines<R: BufRead>(reader: R) -> Result<BTreeMap<String, Vec<String>>, DataError> {
    let mut values: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: PathBuf::new(),
            source,
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (entity, rest) = line.split_once('\t').unwrap_or((line, ""));
        let entity = entity.trim();
        if entity.is_empty() {
            return Err(DataError::Parse {
                line: n + 1,
                msg: "empty entity id".into(),
            });
        }
        let slot = values.entry(entity.to_string()).or_default();
        for tok in rest.split('|').map(str::trim).filter(|t| !t.is_empty()) {
            if !slot.iter().any(|t| t == tok) {
                slot.push(tok.to_string());
            }
        }
    }
    Ok(values)
}

/// One feature file declaration from the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSource {
    pub field: String,
    pub owner: String,
    pub path: PathBuf,
    #[serde(default = "default_kind")]
    pub kind: String,
}

fn default_kind() -> String {
    "closed".into()
}

pub fn read_feature_sources(sources: &[FeatureSource], base: &Path) -> Result<Vec<RawField>, DataError> {
    sources
        .iter()
        .map(|src| {
            let owner: Owner = src.owner.parse()?;
            let kind: FieldKind = src.kind.parse()?;
            let path = base.join(&src.path);
            let file = fs::File::open(&path).map_err(io_err(&path))?;
            let values = parse_feature_lines(BufReader::new(file))?;
            Ok(RawField {
                name: src.field.clone(),
                owner,
                kind,
                values,
            })
        })
        .collect()
}

/// Build per-field vocabularies over the filtered entity population.
///
/// Closed fields index every observed token in lexicographic order. Open
/// fields keep the `tag_top_t` most frequent tokens (frequency = number of
/// population entities carrying the token, ties lexicographic) and always
/// reserve an unknown category. A closed field gets an unknown category only
/// when some population entity has no value for it.
pub fn build_feature_vocab(
    raw: &[RawField],
    tag_top_t: usize,
    users: &IdVocab,
    items: &IdVocab,
) -> FeatureVocab {
    let ordered = raw
        .iter()
        .filter(|f| f.owner == Owner::User)
        .chain(raw.iter().filter(|f| f.owner == Owner::Item));
    let fields = ordered
        .map(|field| {
            let population = match field.owner {
                Owner::User => users,
                Owner::Item => items,
            };
            let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
            let mut has_gap = false;
            for entity in population.tokens() {
                match field.values.get(entity) {
                    Some(toks) if !toks.is_empty() => {
                        for t in toks {
                            *freq.entry(t.as_str()).or_default() += 1;
                        }
                    }
                    _ => has_gap = true,
                }
            }
            let mut tokens = IdVocab::default();
            let unknown = match field.kind {
                FieldKind::Closed => {
                    for t in freq.keys() {
                        tokens.insert(t);
                    }
                    has_gap.then(|| tokens.insert(UNKNOWN_TOKEN))
                }
                FieldKind::Open => {
                    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
                    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
                    for (t, _) in ranked.into_iter().take(tag_top_t) {
                        tokens.insert(t);
                    }
                    Some(tokens.insert(UNKNOWN_TOKEN))
                }
            };
            FieldVocab {
                name: field.name.clone(),
                owner: field.owner,
                kind: field.kind,
                tokens,
                unknown,
            }
        })
        .collect();
    FeatureVocab { fields }
}

/// One slot per owned field; each slot holds one or more category indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityFeatures {
    pub entity: usize,
    pub slots: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTables {
    pub users: Vec<EntityFeatures>,
    pub items: Vec<EntityFeatures>,
}

fn encode_side(
    raw: &[RawField],
    vocab: &FeatureVocab,
    owner: Owner,
    population: &IdVocab,
) -> Result<Vec<EntityFeatures>, DataError> {
    let fields: Vec<&FieldVocab> = vocab.fields.iter().filter(|f| f.owner == owner).collect();
    let raw_of = |name: &str| raw.iter().find(|r| r.owner == owner && r.name == name);
    population
        .tokens()
        .iter()
        .enumerate()
        .map(|(entity, token)| {
            let slots = fields
                .iter()
                .map(|fv| {
                    let mut idx: Vec<usize> = raw_of(&fv.name)
                        .and_then(|r| r.values.get(token))
                        .map(|toks| toks.iter().filter_map(|t| fv.tokens.get(t)).collect())
                        .unwrap_or_default();
                    idx.sort_unstable();
                    idx.dedup();
                    if idx.is_empty() {
                        let unk = fv.unknown.ok_or_else(|| DataError::MissingUnknown {
                            field: fv.name.clone(),
                            entity: token.clone(),
                        })?;
                        idx.push(unk);
                    }
                    Ok(idx)
                })
                .collect::<Result<_, DataError>>()?;
            Ok(EntityFeatures { entity, slots })
        })
        .collect()
}

/// Encode every user and item of the population under `vocab`. Entities
/// absent from a feature file, or whose tokens were all truncated, get the
/// field's unknown category.
pub fn encode_entity_features(
    raw: &[RawField],
    vocab: &FeatureVocab,
    users: &IdVocab,
    items: &IdVocab,
) -> Result<FeatureTables, DataError> {
    Ok(FeatureTables {
        users: encode_side(raw, vocab, Owner::User, users)?,
        items: encode_side(raw, vocab, Owner::Item, items)?,
    })
}

/// Dataset manifest: ratings path, filter settings and feature files. Paths
/// are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub ratings: PathBuf,
    #[serde(default = "default_min_ratings")]
    pub min_ratings: usize,
    #[serde(default = "default_tag_top_t")]
    pub tag_top_t: usize,
    #[serde(default)]
    pub features: Vec<FeatureSource>,
}

fn default_min_ratings() -> usize {
    5
}

fn default_tag_top_t() -> usize {
    50
}

impl DatasetManifest {
    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        toml::from_str(text).map_err(|e| DataError::Manifest(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let mut text = String::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(io_err(path))?;
        Self::from_toml(&text)
    }
}

/// Everything the models need from one dataset manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ratings: RatingsData,
    pub vocab: FeatureVocab,
    pub features: FeatureTables,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self, DataError> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(&manifest, base)
    }

    pub fn from_manifest(manifest: &DatasetManifest, base: &Path) -> Result<Self, DataError> {
        let ratings = load_ratings(&base.join(&manifest.ratings), manifest.min_ratings)?;
        let raw = read_feature_sources(&manifest.features, base)?;
        Self::from_parts(ratings, &raw, manifest.tag_top_t)
    }

    pub fn from_parts(ratings: RatingsData, raw: &[RawField], tag_top_t: usize) -> Result<Self, DataError> {
        let vocab = build_feature_vocab(raw, tag_top_t, &ratings.users, &ratings.items);
        let features = encode_entity_features(raw, &vocab, &ratings.users, &ratings.items)?;
        Ok(Self {
            ratings,
            vocab,
            features,
        })
    }

    /// SHA-256 over vocabularies, encodings and interactions. Used to detect
    /// drift between a checkpoint and the data it is evaluated against.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let meta = serde_json::to_vec(&(
            &self.ratings.users,
            &self.ratings.items,
            &self.vocab,
            &self.features,
        ))
        .expect("vocabularies serialize");
        h.update(&meta);
        for i in &self.ratings.interactions {
            h.update((i.user as u64).to_le_bytes());
            h.update((i.item as u64).to_le_bytes());
            h.update(i.rating.to_le_bytes());
            h.update(i.timestamp.unwrap_or(i64::MIN).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Ids of entities with at least one interaction in `set`.
pub fn entities_in(set: &[Interaction]) -> (HashSet<usize>, HashSet<usize>) {
    (
        set.iter().map(|i| i.user).collect(),
        set.iter().map(|i| i.item).collect(),
    )
}
