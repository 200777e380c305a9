//! Configured experiments: data preparation, per-instance evaluation,
//! persistence, grid search over K, and reporting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_candidate_set, dataset_stats, filter_log, leave_one_out_split, load_interactions, sample_eval_users,
    Catalog, CorpusError, DatasetSource, DatasetStats, EvalInstance, InteractionLog, Item, ItemId, Split, UserId,
    UserSequence,
};
use crate::demo::{aggregate_demo, build_standard_demo, AggregationSettings, DemoError, HistoryOrder, TaskTemplate};
use crate::eval::{mean_metrics, parse_ranked_list, score, MetricSet, RunSummary, ScoringOptions, DEFAULT_CUTOFFS};
use crate::http::RetryPolicy;
use crate::llm::{
    complete, ChatBackend, CompletionParams, CompletionRecord, HttpChatBackend, LlmError, MockBackend, MockOutput,
    ReplayBackend, ResponseCache,
};
use crate::prompts::{assemble_prompt, InstructionVariant, PromptBundle, PromptDemo, PromptError, TemplateRegistry};
use crate::retrieval::{
    select_demonstrations, EmbeddingCache, EmbeddingProvider, EmbeddingScorer, HttpEmbedder, MockEmbedder,
    OverlapScorer, RandomScorer, RankedDemonstrations, RetrievalError, SimilarityMethod, SimilarityScorer,
};
use crate::seed::{derive_seed, rng_for, sha256_hex};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, RunError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ZeroShot,
    OneShotFixed,
    OneShotNearest,
    /// The test user's own earlier interactions as the demonstration.
    OneShotHis,
    /// Aggregated demonstration from K similar users.
    Syn,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero-shot",
            Method::OneShotFixed => "one-shot-fixed",
            Method::OneShotNearest => "one-shot-nearest",
            Method::OneShotHis => "one-shot-his",
            Method::Syn => "syn",
        }
    }

    fn uses_retrieval(self) -> bool {
        matches!(self, Method::OneShotNearest | Method::Syn)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockPolicy {
    /// The instance's truth scores 1, everything else 0.
    #[default]
    TruthFirst,
    /// Candidates come back in presentation order.
    PresentedOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    Mock {
        #[serde(default)]
        policy: MockPolicy,
        #[serde(default)]
        output: MockOutput,
    },
    Http {
        base_url: String,
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default)]
        retry: RetryPolicy,
    },
    Replay {
        records: PathBuf,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock {
            policy: MockPolicy::TruthFirst,
            output: MockOutput::default(),
        }
    }
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbeddingProviderConfig {
    Mock {
        #[serde(default = "default_mock_dim")]
        dim: usize,
    },
    Http {
        url: String,
        model: String,
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

fn default_mock_dim() -> usize {
    64
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        EmbeddingProviderConfig::Mock { dim: default_mock_dim() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    #[serde(default)]
    pub provider: EmbeddingProviderConfig,
    /// JSONL vector cache; in memory when absent.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    64
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: EmbeddingProviderConfig::default(),
            cache: None,
            batch_size: default_batch(),
        }
    }
}

impl EmbeddingConfig {
    pub fn provider(&self, master_seed: u64) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(match &self.provider {
            EmbeddingProviderConfig::Mock { dim } => {
                Box::new(MockEmbedder::new(*dim, derive_seed(master_seed, &["mock-embedder"])))
            }
            EmbeddingProviderConfig::Http {
                url,
                model,
                api_key_env,
                retry,
            } => Box::new(HttpEmbedder::new(
                url.clone(),
                model.clone(),
                std::env::var(api_key_env).ok(),
                std::time::Duration::from_secs(60),
                *retry,
            )?),
        })
    }

    pub fn open_cache(&self) -> Result<EmbeddingCache> {
        Ok(match &self.cache {
            Some(path) => EmbeddingCache::open(path)?,
            None => EmbeddingCache::in_memory(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    #[serde(default = "default_eval_users")]
    pub n_eval_users: usize,
    pub method: Method,
    #[serde(default)]
    pub variant: InstructionVariant,
    /// Output form of standard demonstrations; aggregated ones are always ranked lists.
    #[serde(default = "default_template")]
    pub template: TaskTemplate,
    #[serde(default)]
    pub with_candidates: bool,
    #[serde(default = "default_k")]
    pub k_members: usize,
    #[serde(default = "default_max_h")]
    pub max_h: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_one")]
    pub n_aggregated_demos: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_selection")]
    pub selection: SimilarityMethod,
    #[serde(default)]
    pub history_order: HistoryOrder,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: CompletionParams,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// JSONL of `{user, candidates, truth?}` used instead of sampled candidates.
    #[serde(default)]
    pub candidates_file: Option<PathBuf>,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub scoring: ScoringOptions,
    #[serde(default)]
    pub response_cache: Option<PathBuf>,
    #[serde(default)]
    pub write_table: bool,
}

fn default_min_count() -> usize {
    5
}
fn default_eval_users() -> usize {
    200
}
fn default_template() -> TaskTemplate {
    TaskTemplate::RankedItems
}
fn default_k() -> usize {
    3
}
fn default_max_h() -> usize {
    50
}
fn default_m() -> usize {
    20
}
fn default_one() -> usize {
    1
}
fn default_repeats() -> usize {
    9
}
fn default_selection() -> SimilarityMethod {
    SimilarityMethod::Embedding
}
fn default_concurrency() -> usize {
    4
}

/// Fields that do not change what an experiment computes.
const UNHASHED: [&str; 5] = ["backend", "concurrency", "response_cache", "write_table", "embedding"];

impl ExperimentConfig {
    pub fn new(dataset: DatasetSource, method: Method) -> Self {
        serde_json::from_value(serde_json::json!({
            "dataset": dataset,
            "method": method,
        }))
        .expect("defaults deserialize")
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| RunError::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(RunError::Config(m.to_owned()));
        if self.repeats == 0 {
            return fail("repeats must be at least 1");
        }
        if self.n_eval_users == 0 {
            return fail("n_eval_users must be at least 1");
        }
        if self.m < 2 {
            return fail("m must be at least 2");
        }
        if self.max_h == 0 {
            return fail("max_h must be at least 1");
        }
        if self.concurrency == 0 {
            return fail("concurrency must be at least 1");
        }
        if !(1..=4).contains(&self.n_aggregated_demos) {
            return fail("n_aggregated_demos must be in 1..=4");
        }
        if self.method == Method::Syn && self.k_members == 0 {
            return fail("syn requires k_members >= 1");
        }
        if self.method == Method::Syn && self.k_members > self.m {
            return fail("k_members cannot exceed m");
        }
        Ok(())
    }

    /// Hash of every field that affects prompts, completions or scoring.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            for key in UNHASHED {
                map.remove(key);
            }
            if self.selection == SimilarityMethod::Embedding && self.method.uses_retrieval() {
                map.insert(
                    "embedding_provider".into(),
                    serde_json::to_value(&self.embedding.provider).expect("serializes"),
                );
            }
        }
        sha256_hex(value.to_string())[..16].to_owned()
    }

    pub fn method_label(&self) -> String {
        match self.method {
            Method::Syn if self.n_aggregated_demos > 1 => {
                format!("syn-k{}-d{}", self.k_members, self.n_aggregated_demos)
            }
            Method::Syn => format!("syn-k{}", self.k_members),
            m => m.as_str().to_owned(),
        }
    }

    pub fn registry(&self) -> Result<TemplateRegistry> {
        Ok(match &self.templates_dir {
            Some(dir) => TemplateRegistry::from_dir(dir)?,
            None => TemplateRegistry::default(),
        })
    }
}

/// Filtered interactions with their split and candidate item pool.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub log: InteractionLog,
    pub split: Split,
    pub item_pool: Vec<ItemId>,
    pub stats: DatasetStats,
}

impl PreparedData {
    pub fn from_log(log: InteractionLog) -> Self {
        let split = leave_one_out_split(&log);
        let item_pool = log.catalog().ids().cloned().collect();
        let stats = dataset_stats(&log);
        Self {
            log,
            split,
            item_pool,
            stats,
        }
    }

    pub fn catalog(&self) -> &Catalog {
        self.log.catalog()
    }
}

pub fn prepare_data(source: &DatasetSource, min_count: usize) -> Result<PreparedData> {
    let raw = load_interactions(source)?;
    Ok(PreparedData::from_log(filter_log(&raw, min_count)?))
}

#[derive(Debug, Deserialize)]
struct CandidateEntry {
    user: UserId,
    candidates: Vec<ItemId>,
    #[serde(default)]
    truth: Option<ItemId>,
}

fn load_candidate_file(path: &Path, data: &PreparedData, limit: usize) -> Result<Vec<EvalInstance>> {
    let file = File::open(path).map_err(io_err(path))?;
    let tests: HashMap<&UserId, &UserSequence> = data.split.test.iter().map(|t| (&t.user, t)).collect();
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| RunError::Parse {
            path: path.to_owned(),
            message: format!("line {}: {message}", n + 1),
        };
        let entry: CandidateEntry = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let test = tests
            .get(&entry.user)
            .ok_or_else(|| bad(format!("user {} not in the filtered test split", entry.user)))?;
        if entry.truth.as_ref().is_some_and(|t| *t != test.next) {
            return Err(bad(format!("truth for {} disagrees with the split", entry.user)));
        }
        if !entry.candidates.contains(&test.next) {
            return Err(bad(format!("candidates for {} omit the truth", entry.user)));
        }
        if let Some(unknown) = entry.candidates.iter().find(|c| !data.catalog().contains(c)) {
            return Err(bad(format!("unknown candidate {unknown}")));
        }
        out.push(EvalInstance {
            user: entry.user,
            history: test.history.clone(),
            candidates: entry.candidates,
            truth: test.next.clone(),
        });
        if out.len() == limit {
            break;
        }
    }
    Ok(out)
}

/// Test instances in evaluation order: sampled users with seeded candidate
/// sets, or the entries of `candidates_file`.
pub fn build_instances(config: &ExperimentConfig, data: &PreparedData) -> Result<Vec<EvalInstance>> {
    if let Some(path) = &config.candidates_file {
        return load_candidate_file(path, data, config.n_eval_users);
    }
    let chosen = sample_eval_users(&data.split.test, config.n_eval_users, &mut rng_for(config.seed, &["eval-users"]))?;
    chosen
        .into_iter()
        .map(|t| {
            let exclude: HashSet<&ItemId> = t.history.iter().collect();
            let mut rng = rng_for(config.seed, &["candidates", t.user.as_str()]);
            let candidates = build_candidate_set(&t.next, &data.item_pool, config.m, &exclude, &mut rng)?;
            Ok(EvalInstance {
                user: t.user,
                history: t.history,
                candidates,
                truth: t.next,
            })
        })
        .collect()
}

/// Training entry used by one-shot-fixed: a seeded pick from the user-sorted
/// pool, moving to the next entry when it is the test user's own.
pub fn fixed_demo_member<'a>(train: &'a [UserSequence], seed: u64, test_user: &UserId) -> Option<&'a UserSequence> {
    if train.is_empty() {
        return None;
    }
    let mut sorted: Vec<&UserSequence> = train.iter().collect();
    sorted.sort_by(|a, b| a.user.cmp(&b.user));
    let mut idx = (derive_seed(seed, &["fixed-demo"]) % sorted.len() as u64) as usize;
    if &sorted[idx].user == test_user {
        if sorted.len() == 1 {
            return None;
        }
        idx = (idx + 1) % sorted.len();
    }
    Some(sorted[idx])
}

/// Pool users behind a set of demonstrations, with their similarity scores.
pub type DemoMembers = Vec<(UserId, f64)>;

/// Demonstrations for one instance and repeat, plus the pool users they came from.
pub fn build_demonstrations(
    config: &ExperimentConfig,
    data: &PreparedData,
    scorer: &dyn SimilarityScorer,
    instance: &EvalInstance,
    repeat: usize,
) -> Result<(Vec<PromptDemo>, DemoMembers)> {
    let repeat_tag = repeat.to_string();
    let mut rng = rng_for(config.seed, &["demo", instance.user.as_str(), &repeat_tag]);
    let standard = |member: &UserSequence, rng: &mut rand_chacha::ChaCha8Rng| -> Result<PromptDemo> {
        Ok(PromptDemo::Standard(build_standard_demo(
            member,
            config.template,
            config.m,
            config.with_candidates,
            &data.item_pool,
            rng,
        )?))
    };
    match config.method {
        Method::ZeroShot => Ok((Vec::new(), Vec::new())),
        Method::OneShotFixed => {
            let member = fixed_demo_member(&data.split.train, config.seed, &instance.user)
                .ok_or(RetrievalError::EmptyPool)?;
            let mut fixed_rng = rng_for(config.seed, &["fixed-demo", &repeat_tag]);
            Ok((vec![standard(member, &mut fixed_rng)?], vec![(member.user.clone(), 0.0)]))
        }
        Method::OneShotHis => {
            let own = data
                .split
                .train
                .iter()
                .find(|t| t.user == instance.user)
                .ok_or(DemoError::EmptyHistory)?;
            Ok((vec![standard(own, &mut rng)?], vec![(own.user.clone(), 1.0)]))
        }
        Method::OneShotNearest => {
            let ranked = select_demonstrations(&instance.user, &instance.history, &data.split.train, 1, scorer)?;
            let member = ranked.neighbors[0].sequence;
            Ok((vec![standard(member, &mut rng)?], ranked.summary()))
        }
        Method::Syn => {
            let k = config.k_members;
            let ranked = select_demonstrations(
                &instance.user,
                &instance.history,
                &data.split.train,
                k * config.n_aggregated_demos,
                scorer,
            )?;
            let settings = AggregationSettings {
                max_h: config.max_h,
                m: config.m,
                history_order: config.history_order,
            };
            let demos = ranked
                .neighbors
                .chunks(k)
                .map(|block| {
                    let block = RankedDemonstrations {
                        neighbors: block.to_vec(),
                    };
                    Ok(PromptDemo::Aggregated(aggregate_demo(&block, settings, &data.item_pool, &mut rng)?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((demos, ranked.summary()))
        }
    }
}

/// What a backend factory sees for one evaluation.
pub struct InstanceView<'a> {
    pub config: &'a ExperimentConfig,
    pub instance: &'a EvalInstance,
    pub repeat: usize,
    pub catalog: &'a Catalog,
}

/// Supplies the chat backend for each evaluation.
pub trait BackendSource: Send + Sync {
    fn backend_for(&self, view: &InstanceView<'_>) -> Result<Arc<dyn ChatBackend>>;
}

impl<F> BackendSource for F
where
    F: Fn(&InstanceView<'_>) -> Result<Arc<dyn ChatBackend>> + Send + Sync,
{
    fn backend_for(&self, view: &InstanceView<'_>) -> Result<Arc<dyn ChatBackend>> {
        self(view)
    }
}

/// Backends built from a [`BackendConfig`].
pub enum ConfiguredBackend {
    Shared(Arc<dyn ChatBackend>),
    Mock { policy: MockPolicy, output: MockOutput },
}

impl ConfiguredBackend {
    pub fn from_config(config: &BackendConfig, params: &CompletionParams) -> Result<Self> {
        Ok(match config {
            BackendConfig::Mock { policy, output } => ConfiguredBackend::Mock {
                policy: *policy,
                output: output.clone(),
            },
            BackendConfig::Http {
                base_url,
                api_key_env,
                retry,
            } => {
                let key = std::env::var(api_key_env).ok();
                if key.is_none() {
                    log::warn!("{api_key_env} is not set; sending requests without an API key");
                }
                ConfiguredBackend::Shared(Arc::new(HttpChatBackend::new(base_url, key, params.timeout, *retry)?))
            }
            BackendConfig::Replay { records } => {
                let (records, _) = load_records(records)?;
                ConfiguredBackend::Shared(Arc::new(ReplayBackend::new(
                    records.into_iter().filter_map(|r| r.completion),
                )))
            }
        })
    }
}

impl BackendSource for ConfiguredBackend {
    fn backend_for(&self, view: &InstanceView<'_>) -> Result<Arc<dyn ChatBackend>> {
        Ok(match self {
            ConfiguredBackend::Shared(b) => Arc::clone(b),
            ConfiguredBackend::Mock { policy, output } => match policy {
                MockPolicy::TruthFirst => {
                    let title = view
                        .catalog
                        .title(&view.instance.truth)
                        .ok_or_else(|| PromptError::UnknownItem(view.instance.truth.clone()))?;
                    Arc::new(MockBackend::truth_first(title, output.clone()))
                }
                MockPolicy::PresentedOrder => Arc::new(MockBackend {
                    oracle: HashMap::new(),
                    output: output.clone(),
                }),
            },
        })
    }
}

/// Everything persisted about one (instance, repeat) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub dataset: String,
    pub method: String,
    /// Position of the instance in evaluation order.
    pub instance: usize,
    pub user: UserId,
    pub repeat: usize,
    pub demo_users: Vec<(UserId, f64)>,
    pub prompt: Option<PromptBundle>,
    /// Test candidates in presentation order.
    pub candidates: Vec<Item>,
    pub truth: ItemId,
    pub completion: Option<CompletionRecord>,
    pub parsed: Option<crate::eval::ParsedRanking>,
    pub metrics: Option<MetricSet>,
    pub scoring: ScoringOptions,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        self.metrics.is_none()
    }

    /// Metrics recomputed from the stored response.
    pub fn rescore(&self) -> Option<MetricSet> {
        let completion = self.completion.as_ref()?;
        let parsed = parse_ranked_list(&completion.response, &self.candidates).ok();
        Some(score(
            parsed.as_ref(),
            &self.truth,
            self.candidates.len(),
            &DEFAULT_CUTOFFS,
            self.scoring,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub dataset: String,
    pub method: String,
    pub n_instances: usize,
    pub repeats: usize,
    pub n_records: usize,
    pub failures: usize,
    pub metrics: RunSummary,
    /// Mean metrics of each repeat, in repeat order.
    pub per_repeat: Vec<MetricSet>,
    pub mean_prompt_tokens: f64,
}

/// Summary over records of one configuration; failed records are excluded
/// and repeats are averaged before taking mean and std.
pub fn summarize<'a>(records: impl IntoIterator<Item = (&'a RunRecord, Option<MetricSet>)>) -> Option<Summary> {
    let mut by_repeat: BTreeMap<usize, Vec<MetricSet>> = BTreeMap::new();
    let mut instances = HashSet::new();
    let (mut n_records, mut failures, mut tokens, mut prompts) = (0, 0, 0usize, 0usize);
    let mut first: Option<&RunRecord> = None;
    for (record, metrics) in records {
        first.get_or_insert(record);
        n_records += 1;
        instances.insert(record.user.clone());
        if let Some(p) = &record.prompt {
            tokens += p.token_estimate;
            prompts += 1;
        }
        match metrics {
            Some(m) => by_repeat.entry(record.repeat).or_default().push(m),
            None => failures += 1,
        }
    }
    let first = first?;
    let per_repeat: Vec<MetricSet> = by_repeat.values().filter_map(|v| mean_metrics(v)).collect();
    Some(Summary {
        config_hash: first.config_hash.clone(),
        dataset: first.dataset.clone(),
        method: first.method.clone(),
        n_instances: instances.len(),
        repeats: by_repeat.len(),
        n_records,
        failures,
        metrics: crate::eval::aggregate_runs(&per_repeat),
        per_repeat,
        mean_prompt_tokens: if prompts == 0 { 0.0 } else { tokens as f64 / prompts as f64 },
    })
}

struct RunContext<'a> {
    config: &'a ExperimentConfig,
    data: &'a PreparedData,
    registry: &'a TemplateRegistry,
    scorer: &'a dyn SimilarityScorer,
    backends: &'a dyn BackendSource,
    cache: Option<&'a ResponseCache>,
    config_hash: &'a str,
    label: &'a str,
}

fn evaluate(ctx: &RunContext<'_>, index: usize, instance: &EvalInstance, repeat: usize) -> RunRecord {
    let catalog = ctx.data.catalog();
    let mut record = RunRecord {
        config_hash: ctx.config_hash.to_owned(),
        dataset: ctx.config.dataset.name.clone(),
        method: ctx.label.to_owned(),
        instance: index,
        user: instance.user.clone(),
        repeat,
        demo_users: Vec::new(),
        prompt: None,
        candidates: Vec::new(),
        truth: instance.truth.clone(),
        completion: None,
        parsed: None,
        metrics: None,
        scoring: ctx.config.scoring,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let (demos, members) = build_demonstrations(ctx.config, ctx.data, ctx.scorer, instance, repeat)?;
        record.demo_users = members;
        let shuffle = derive_seed(ctx.config.seed, &["shuffle", instance.user.as_str(), &repeat.to_string()]);
        let bundle = assemble_prompt(ctx.registry, &demos, instance, ctx.config.variant, Some(shuffle), catalog)?;
        record.candidates = bundle
            .presented_candidates
            .iter()
            .map(|id| catalog.get(id).cloned().ok_or_else(|| PromptError::UnknownItem(id.clone())))
            .collect::<std::result::Result<_, _>>()?;
        record.prompt = Some(bundle);
        let bundle = record.prompt.as_ref().expect("just set");
        let view = InstanceView {
            config: ctx.config,
            instance,
            repeat,
            catalog,
        };
        let backend = ctx.backends.backend_for(&view)?;
        let completion = complete(bundle, &ctx.config.params, backend.as_ref(), ctx.cache)?;
        let parsed = parse_ranked_list(&completion.response, &record.candidates).ok();
        record.metrics = Some(score(
            parsed.as_ref(),
            &instance.truth,
            record.candidates.len(),
            &DEFAULT_CUTOFFS,
            ctx.config.scoring,
        ));
        record.parsed = parsed;
        record.completion = Some(completion);
        Ok(())
    })();
    if let Err(e) = outcome {
        log::warn!("instance {} repeat {repeat} failed: {e}", instance.user);
        record.error = Some(e.to_string());
        record.metrics = None;
    }
    record
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(&row).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("summary serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Loads data and backends from `config` and runs it into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Summary> {
    config.validate()?;
    let data = prepare_data(&config.dataset, config.min_count)?;
    let backends = ConfiguredBackend::from_config(&config.backend, &config.params)?;
    run_prepared(config, &data, &backends, out_dir)
}

/// Evaluates every sampled instance for every repeat and writes
/// `records.jsonl`, `completions.jsonl`, `summary.json` and optionally
/// `table.csv` into `out_dir`.
pub fn run_prepared(
    config: &ExperimentConfig,
    data: &PreparedData,
    backends: &dyn BackendSource,
    out_dir: &Path,
) -> Result<Summary> {
    config.validate()?;
    let registry = config.registry()?;
    let instances = build_instances(config, data)?;
    let response_cache = config.response_cache.as_deref().map(ResponseCache::open).transpose()?;

    let needs_embeddings = config.method.uses_retrieval() && config.selection == SimilarityMethod::Embedding;
    let provider = needs_embeddings.then(|| config.embedding.provider(config.seed)).transpose()?;
    let vector_cache = needs_embeddings.then(|| config.embedding.open_cache()).transpose()?;
    let scorer: Box<dyn SimilarityScorer + '_> = match (config.selection, &provider, &vector_cache) {
        (SimilarityMethod::Embedding, Some(p), Some(c)) => {
            let s = EmbeddingScorer::new(p.as_ref(), c, data.catalog());
            s.warm(&data.split.train, config.embedding.batch_size, config.concurrency)?;
            Box::new(s)
        }
        (SimilarityMethod::Random { seed }, _, _) => Box::new(RandomScorer { seed }),
        _ => Box::new(OverlapScorer),
    };

    let config_hash = config.hash();
    let label = config.method_label();
    let ctx = RunContext {
        config,
        data,
        registry: &registry,
        scorer: scorer.as_ref(),
        backends,
        cache: response_cache.as_ref(),
        config_hash: &config_hash,
        label: &label,
    };
    let jobs: Vec<(usize, usize)> = (0..instances.len())
        .flat_map(|i| (0..config.repeats).map(move |r| (i, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency)
        .build()
        .map_err(|e| RunError::Config(e.to_string()))?;
    let mut records: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, r)| evaluate(&ctx, i, &instances[i], r))
            .collect()
    });
    records.sort_by_key(|r| (r.instance, r.repeat));

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_jsonl(&out_dir.join("records.jsonl"), &records)?;
    write_jsonl(
        &out_dir.join("completions.jsonl"),
        records.iter().filter_map(|r| r.completion.as_ref()),
    )?;
    let summary = summarize(records.iter().map(|r| (r, r.metrics.clone())))
        .ok_or_else(|| RunError::Config("no instances to evaluate".into()))?;
    if summary.failures > 0 {
        log::warn!("{} of {} evaluations failed", summary.failures, summary.n_records);
    }
    write_json(&out_dir.join("summary.json"), &summary)?;
    if config.write_table {
        let path = out_dir.join("table.csv");
        fs::write(&path, table_csv(std::slice::from_ref(&summary))).map_err(io_err(&path))?;
    }
    Ok(summary)
}

/// Re-runs `config` answering every prompt from the completions stored in `records`.
pub fn replay(config: &ExperimentConfig, records: &Path, out_dir: &Path) -> Result<Summary> {
    let mut replay_config = config.clone();
    replay_config.backend = BackendConfig::Replay {
        records: records.to_owned(),
    };
    replay_config.response_cache = None;
    run_experiment(&replay_config, out_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub k: usize,
    pub best: bool,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub best_k: usize,
    pub rows: Vec<GridRow>,
}

/// One run per K into `out_dir/k{K}`; the best K maximizes mean NDCG@10,
/// smaller K winning ties.
pub fn grid_search_k(config: &ExperimentConfig, k_values: &[usize], out_dir: &Path) -> Result<GridReport> {
    config.validate()?;
    let data = prepare_data(&config.dataset, config.min_count)?;
    let backends = ConfiguredBackend::from_config(&config.backend, &config.params)?;
    grid_search_k_with(config, k_values, &data, &backends, out_dir)
}

pub fn grid_search_k_with(
    config: &ExperimentConfig,
    k_values: &[usize],
    data: &PreparedData,
    backends: &dyn BackendSource,
    out_dir: &Path,
) -> Result<GridReport> {
    if k_values.is_empty() {
        return Err(RunError::Config("k_values must not be empty".into()));
    }
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let mut c = config.clone();
        c.k_members = k;
        let summary = run_prepared(&c, data, backends, &out_dir.join(format!("k{k}")))?;
        rows.push(GridRow { k, best: false, summary });
    }
    let ndcg10 = |row: &GridRow| row.summary.metrics.ndcg.get(&10).map_or(0.0, |m| m.mean);
    let best = rows
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| ndcg10(a).total_cmp(&ndcg10(b)).then(b.k.cmp(&a.k)))
        .map(|(i, _)| i)
        .expect("non-empty");
    rows[best].best = true;
    let report = GridReport {
        best_k: rows[best].k,
        rows,
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_json(&out_dir.join("grid.json"), &report)?;
    Ok(report)
}

/// Reads a records file, skipping lines that fail to parse. Returns the
/// records and the number of skipped lines.
pub fn load_records(path: &Path) -> Result<(Vec<RunRecord>, usize)> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("{}:{}: skipping corrupt record: {e}", path.display(), n + 1);
                skipped += 1;
            }
        }
    }
    Ok((records, skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<Summary>,
    pub skipped_lines: usize,
}

/// One row per (dataset, method, config) with metrics recomputed from the
/// stored responses.
pub fn report(records_path: &Path) -> Result<Report> {
    let (records, skipped_lines) = load_records(records_path)?;
    let mut groups: BTreeMap<(String, String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in &records {
        groups
            .entry((r.dataset.clone(), r.method.clone(), r.config_hash.clone()))
            .or_default()
            .push(r);
    }
    let rows = groups
        .into_values()
        .filter_map(|group| summarize(group.into_iter().map(|r| (r, r.rescore()))))
        .collect();
    Ok(Report { rows, skipped_lines })
}

fn cutoffs(rows: &[Summary]) -> Vec<usize> {
    rows.first()
        .map(|s| s.metrics.ndcg.keys().copied().collect())
        .unwrap_or_else(|| DEFAULT_CUTOFFS.to_vec())
}

pub fn table_csv(rows: &[Summary]) -> String {
    let ks = cutoffs(rows);
    let mut out = String::from("dataset,method,config_hash,runs,records,failures");
    for k in &ks {
        let _ = write!(out, ",ndcg@{k},ndcg@{k}_std");
    }
    out.push_str(",cir,cir_std\n");
    for s in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            s.dataset, s.method, s.config_hash, s.metrics.runs, s.n_records, s.failures
        );
        for k in &ks {
            let m = s.metrics.ndcg.get(k).copied().unwrap_or(crate::eval::MeanStd { mean: 0.0, std: 0.0 });
            let _ = write!(out, ",{:.6},{:.6}", m.mean, m.std);
        }
        let _ = writeln!(out, ",{:.6},{:.6}", s.metrics.cir.mean, s.metrics.cir.std);
    }
    out
}

pub fn table_text(rows: &[Summary]) -> String {
    let ks = cutoffs(rows);
    let mut header = vec!["dataset".to_owned(), "method".to_owned()];
    header.extend(ks.iter().map(|k| format!("NDCG@{k}")));
    header.extend(["CIR".to_owned(), "failed".to_owned()]);
    let mut table = vec![header];
    for s in rows {
        let mut row = vec![s.dataset.clone(), s.method.clone()];
        for k in &ks {
            let m = s.metrics.ndcg.get(k).map_or((0.0, 0.0), |m| (m.mean, m.std));
            row.push(format!("{:.4}±{:.4}", m.0, m.1));
        }
        row.push(format!("{:.4}", s.metrics.cir.mean));
        row.push(format!("{}/{}", s.failures, s.n_records));
        table.push(row);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}
