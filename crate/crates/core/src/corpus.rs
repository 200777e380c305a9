//! Interaction data: loading, k-core filtering, leave-one-out splitting and
//! candidate-set construction.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("no interactions")]
    NoInteractions,
    #[error("interactions reference unknown item ids: {}", .0.join(", "))]
    UnknownItems(Vec<String>),
    #[error("duplicate item id {0} in catalog")]
    DuplicateItem(String),
    #[error("filtering removed all data")]
    EmptyAfterFilter,
    #[error("min_count must be at least 1")]
    InvalidThreshold,
    #[error("candidate set needs {needed} non-truth items but only {available} are available")]
    InsufficientPool { needed: usize, available: usize },
    #[error("candidate set size must be at least 2, got {0}")]
    CandidateSizeTooSmall(usize),
    #[error("requested {requested} evaluation instances but only {available} exist")]
    NotEnoughInstances { requested: usize, available: usize },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

macro_rules! string_id {
    ($ty:ident) => {
        impl $ty {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
        impl From<&str> for $ty {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
        impl From<String> for $ty {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}
string_id!(ItemId);
string_id!(UserId);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    pub title: String,
}

/// Item catalog ordered by id, so iteration is deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    items: BTreeMap<ItemId, Item>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, item: Item) -> Result<()> {
        if self.items.contains_key(&item.id) {
            return Err(CorpusError::DuplicateItem(item.id.0));
        }
        self.items.insert(item.id.clone(), item);
        Ok(())
    }

    pub fn get(&self, id: &ItemId) -> Option<&Item> {
        self.items.get(id)
    }

    pub fn title(&self, id: &ItemId) -> Option<&str> {
        self.items.get(id).map(|i| i.title.as_str())
    }

    pub fn contains(&self, id: &ItemId) -> bool {
        self.items.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ItemId> {
        self.items.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Item> {
        self.items.values()
    }

    fn retain(&mut self, keep: impl Fn(&ItemId) -> bool) {
        self.items.retain(|id, _| keep(id));
    }
}

impl FromIterator<Item> for Catalog {
    /// Later duplicates overwrite earlier ones; use [`Catalog::insert`] to reject them.
    fn from_iter<T: IntoIterator<Item = Item>>(iter: T) -> Self {
        Self {
            items: iter.into_iter().map(|i| (i.id.clone(), i)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub item: ItemId,
    pub timestamp: i64,
}

/// Users' chronologically ordered interactions plus the item catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionLog {
    users: BTreeMap<UserId, Vec<Interaction>>,
    catalog: Catalog,
    raw_count: usize,
}

impl InteractionLog {
    /// Builds a log from raw `(user, item, timestamp)` tuples in input order.
    ///
    /// Each user's interactions are stably sorted by timestamp, so ties keep
    /// their input order.
    pub fn from_records<I>(records: I, catalog: Catalog) -> Result<Self>
    where
        I: IntoIterator<Item = (UserId, ItemId, i64)>,
    {
        let mut users: BTreeMap<UserId, Vec<Interaction>> = BTreeMap::new();
        let mut unknown = BTreeSet::new();
        let mut raw_count = 0;
        for (user, item, timestamp) in records {
            raw_count += 1;
            if !catalog.contains(&item) {
                unknown.insert(item.0.clone());
            }
            users
                .entry(user)
                .or_default()
                .push(Interaction { item, timestamp });
        }
        if raw_count == 0 {
            return Err(CorpusError::NoInteractions);
        }
        if !unknown.is_empty() {
            return Err(CorpusError::UnknownItems(unknown.into_iter().collect()));
        }
        for seq in users.values_mut() {
            seq.sort_by_key(|i| i.timestamp);
        }
        Ok(Self {
            users,
            catalog,
            raw_count,
        })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn users(&self) -> impl Iterator<Item = (&UserId, &[Interaction])> {
        self.users.iter().map(|(u, s)| (u, s.as_slice()))
    }

    pub fn sequence(&self, user: &UserId) -> Option<&[Interaction]> {
        self.users.get(user).map(Vec::as_slice)
    }

    /// Item ids of one user, oldest first.
    pub fn item_sequence(&self, user: &UserId) -> Option<Vec<ItemId>> {
        self.sequence(user)
            .map(|s| s.iter().map(|i| i.item.clone()).collect())
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    /// Number of records read from the source before any filtering.
    pub fn raw_count(&self) -> usize {
        self.raw_count
    }

    /// Distinct items that occur in at least one interaction.
    pub fn interacted_items(&self) -> BTreeSet<&ItemId> {
        self.users
            .values()
            .flat_map(|s| s.iter().map(|i| &i.item))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// `UserID::MovieID::Rating::Timestamp` plus `MovieID::Title::Genres`.
    #[serde(alias = "ml-1m")]
    Movielens1m,
    /// `user\titem\ttimestamp` plus `item\ttitle`.
    GenericTsv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSource {
    #[serde(default = "default_dataset_name")]
    pub name: String,
    pub format: DatasetFormat,
    pub interactions: PathBuf,
    pub items: PathBuf,
}

fn default_dataset_name() -> String {
    "dataset".to_owned()
}

pub fn load_interactions(source: &DatasetSource) -> Result<InteractionLog> {
    let items_text = read_text(&source.items)?;
    let inter_text = read_text(&source.interactions)?;
    let (catalog, records) = match source.format {
        DatasetFormat::Movielens1m => (
            parse_movielens_items(&items_text, &source.items)?,
            parse_movielens_ratings(&inter_text, &source.interactions)?,
        ),
        DatasetFormat::GenericTsv => (
            parse_tsv_items(&items_text, &source.items)?,
            parse_tsv_interactions(&inter_text, &source.interactions)?,
        ),
    };
    let log = InteractionLog::from_records(records, catalog)?;
    log::info!(
        "loaded {} raw interactions for {} users from {}",
        log.raw_count(),
        log.n_users(),
        source.interactions.display()
    );
    Ok(log)
}

/// Reads a file as UTF-8, falling back to Latin-1 (MovieLens ships Latin-1 titles).
fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })?;
    Ok(match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => e.into_bytes().iter().map(|&b| b as char).collect(),
    })
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> CorpusError {
    CorpusError::Malformed {
        path: path.to_owned(),
        line,
        reason: reason.into(),
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_timestamp(raw: &str, path: &Path, line: usize) -> Result<i64> {
    raw.trim()
        .parse()
        .map_err(|_| malformed(path, line, format!("bad timestamp {raw:?}")))
}

fn parse_movielens_ratings(text: &str, path: &Path) -> Result<Vec<(UserId, ItemId, i64)>> {
    data_lines(text)
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split("::").collect();
            if fields.len() != 4 {
                return Err(malformed(
                    path,
                    n,
                    format!("expected 4 '::'-separated fields, got {}", fields.len()),
                ));
            }
            Ok((
                UserId::from(fields[0].trim()),
                ItemId::from(fields[1].trim()),
                parse_timestamp(fields[3], path, n)?,
            ))
        })
        .collect()
}

fn parse_movielens_items(text: &str, path: &Path) -> Result<Catalog> {
    let mut catalog = Catalog::new();
    for (n, line) in data_lines(text) {
        let fields: Vec<&str> = line.splitn(3, "::").collect();
        if fields.len() < 2 {
            return Err(malformed(path, n, "expected MovieID::Title::Genres"));
        }
        let title = movielens_display_title(fields[1]);
        if title.is_empty() {
            return Err(malformed(path, n, "empty title"));
        }
        catalog.insert(Item {
            id: ItemId::from(fields[0].trim()),
            title,
        })?;
    }
    Ok(catalog)
}

fn parse_tsv_interactions(text: &str, path: &Path) -> Result<Vec<(UserId, ItemId, i64)>> {
    data_lines(text)
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(malformed(
                    path,
                    n,
                    format!("expected user<TAB>item<TAB>timestamp, got {} fields", fields.len()),
                ));
            }
            Ok((
                UserId::from(fields[0].trim()),
                ItemId::from(fields[1].trim()),
                parse_timestamp(fields[2], path, n)?,
            ))
        })
        .collect()
}

fn parse_tsv_items(text: &str, path: &Path) -> Result<Catalog> {
    let mut catalog = Catalog::new();
    for (n, line) in data_lines(text) {
        let Some((id, title)) = line.split_once('\t') else {
            return Err(malformed(path, n, "expected item<TAB>title"));
        };
        let title = title.trim();
        if title.is_empty() {
            return Err(malformed(path, n, "empty title"));
        }
        catalog.insert(Item {
            id: ItemId::from(id.trim()),
            title: title.to_owned(),
        })?;
    }
    Ok(catalog)
}

/// Turns a raw MovieLens title such as `"Shining, The (1980)"` into the
/// display form `"The Shining"`: the release year is dropped and a trailing
/// English article is moved to the front.
pub fn movielens_display_title(raw: &str) -> String {
    let mut title = raw.trim();
    if let Some(open) = title.rfind(" (") {
        let tail = &title[open + 2..];
        if tail.len() == 5 && tail.ends_with(')') && tail[..4].bytes().all(|b| b.is_ascii_digit()) {
            title = &title[..open];
        }
    }
    for article in ["The", "A", "An"] {
        if let Some(stem) = title.strip_suffix(&format!(", {article}")) {
            return format!("{article} {stem}");
        }
    }
    title.to_owned()
}

/// Separate user and item thresholds for k-core filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub min_user: usize,
    pub min_item: usize,
}

/// Removes duplicate (user, item) interactions (keeping the earliest) and then
/// iteratively drops users and items with fewer than `min_count` interactions
/// until nothing changes.
pub fn filter_log(log: &InteractionLog, min_count: usize) -> Result<InteractionLog> {
    filter_log_with(
        log,
        FilterThresholds {
            min_user: min_count,
            min_item: min_count,
        },
    )
}

pub fn filter_log_with(log: &InteractionLog, thresholds: FilterThresholds) -> Result<InteractionLog> {
    if thresholds.min_user == 0 || thresholds.min_item == 0 {
        return Err(CorpusError::InvalidThreshold);
    }
    let mut users: BTreeMap<UserId, Vec<Interaction>> = log
        .users
        .iter()
        .map(|(u, seq)| {
            let mut seen = HashSet::new();
            let deduped = seq
                .iter()
                .filter(|i| seen.insert(&i.item))
                .cloned()
                .collect();
            (u.clone(), deduped)
        })
        .collect();

    loop {
        let before: usize = users.values().map(Vec::len).sum::<usize>() + users.len();
        users.retain(|_, seq| seq.len() >= thresholds.min_user);
        let mut item_counts: HashMap<&ItemId, usize> = HashMap::new();
        for seq in users.values() {
            for i in seq {
                *item_counts.entry(&i.item).or_default() += 1;
            }
        }
        let weak: HashSet<ItemId> = item_counts
            .into_iter()
            .filter(|&(_, c)| c < thresholds.min_item)
            .map(|(id, _)| id.clone())
            .collect();
        for seq in users.values_mut() {
            seq.retain(|i| !weak.contains(&i.item));
        }
        users.retain(|_, seq| seq.len() >= thresholds.min_user);
        let after: usize = users.values().map(Vec::len).sum::<usize>() + users.len();
        if after == before {
            break;
        }
    }

    if users.is_empty() {
        return Err(CorpusError::EmptyAfterFilter);
    }
    let live: HashSet<ItemId> = users
        .values()
        .flat_map(|s| s.iter().map(|i| i.item.clone()))
        .collect();
    let mut catalog = log.catalog.clone();
    catalog.retain(|id| live.contains(id));
    Ok(InteractionLog {
        users,
        catalog,
        raw_count: log.raw_count,
    })
}

/// A user's history together with the item that followed it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: UserId,
    /// Oldest first; never contains `next` as its final element.
    pub history: Vec<ItemId>,
    pub next: ItemId,
}

#[derive(Debug, Clone, Default)]
pub struct Split {
    /// History = everything but the last item; target = the last item.
    pub test: Vec<UserSequence>,
    /// History = everything but the last two items; target = the second-to-last.
    pub train: Vec<UserSequence>,
    pub skipped: usize,
}

impl Split {
    /// The training pool with the given user's own entry removed.
    pub fn pool_excluding<'a>(&'a self, user: &'a UserId) -> impl Iterator<Item = &'a UserSequence> {
        self.train.iter().filter(move |t| &t.user != user)
    }
}

pub fn leave_one_out_split(log: &InteractionLog) -> Split {
    let mut split = Split::default();
    for (user, seq) in &log.users {
        if seq.len() < 3 {
            split.skipped += 1;
            continue;
        }
        let items: Vec<ItemId> = seq.iter().map(|i| i.item.clone()).collect();
        let n = items.len();
        split.test.push(UserSequence {
            user: user.clone(),
            history: items[..n - 1].to_vec(),
            next: items[n - 1].clone(),
        });
        split.train.push(UserSequence {
            user: user.clone(),
            history: items[..n - 2].to_vec(),
            next: items[n - 2].clone(),
        });
    }
    if split.skipped > 0 {
        log::warn!("skipped {} users with fewer than 3 interactions", split.skipped);
    }
    split
}

/// One test instance: history, the candidates shown to the model, and the truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub user: UserId,
    pub history: Vec<ItemId>,
    pub candidates: Vec<ItemId>,
    pub truth: ItemId,
}

/// Samples `m - 1` distinct items from `pool` (skipping `truth` and `exclude`)
/// and inserts `truth` at a uniformly random position.
pub fn build_candidate_set<R: Rng + ?Sized>(
    truth: &ItemId,
    pool: &[ItemId],
    m: usize,
    exclude: &HashSet<&ItemId>,
    rng: &mut R,
) -> Result<Vec<ItemId>> {
    if m < 2 {
        return Err(CorpusError::CandidateSizeTooSmall(m));
    }
    let eligible: Vec<&ItemId> = pool
        .iter()
        .filter(|id| *id != truth && !exclude.contains(id))
        .collect();
    if eligible.len() < m - 1 {
        return Err(CorpusError::InsufficientPool {
            needed: m - 1,
            available: eligible.len(),
        });
    }
    let mut candidates: Vec<ItemId> = rand::seq::index::sample(rng, eligible.len(), m - 1)
        .into_iter()
        .map(|i| eligible[i].clone())
        .collect();
    let pos = rng.gen_range(0..=candidates.len());
    candidates.insert(pos, truth.clone());
    Ok(candidates)
}

/// Uniform sample of `n` instances without replacement, in random order.
pub fn sample_eval_users<T: Clone, R: Rng + ?Sized>(test: &[T], n: usize, rng: &mut R) -> Result<Vec<T>> {
    if n > test.len() {
        return Err(CorpusError::NotEnoughInstances {
            requested: n,
            available: test.len(),
        });
    }
    let mut pool = test.to_vec();
    let (chosen, _) = pool.partial_shuffle(rng, n);
    Ok(chosen.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub avg_items_per_user: f64,
    pub avg_users_per_item: f64,
}

pub fn dataset_stats(log: &InteractionLog) -> DatasetStats {
    let n_users = log.n_users();
    let n_items = log.interacted_items().len();
    let n_interactions = log.n_interactions();
    DatasetStats {
        n_users,
        n_items,
        n_interactions,
        avg_items_per_user: ratio(n_interactions, n_users),
        avg_users_per_item: ratio(n_interactions, n_items),
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
