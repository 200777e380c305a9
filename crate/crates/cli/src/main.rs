use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use seqrec::corpus::{dataset_stats, filter_log, load_interactions, DatasetFormat, DatasetSource};
use seqrec::retrieval::{embed_many, sequence_text};
use seqrec::runner::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "seqrec", version, about = "In-context learning experiments for sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, filter and write a dataset as tab-separated files.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print dataset statistics as JSON.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        /// Report the log before filtering.
        #[arg(long)]
        raw: bool,
    },
    /// Embed every training and test history into the configured vector cache.
    EmbedCache {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run one experiment.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment per number of aggregated members.
    GridK {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
        k: Vec<usize>,
    },
    /// Recompute a results table from stored records.
    Report {
        records: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Re-run an experiment answering prompts from stored records.
    Replay {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_parser = parse_format, default_value = "ml-1m")]
    format: DatasetFormat,
    #[arg(long)]
    interactions: PathBuf,
    #[arg(long)]
    items: PathBuf,
    #[arg(long, default_value = "dataset")]
    name: String,
    #[arg(long, default_value_t = 5)]
    min_count: usize,
}

impl DataArgs {
    fn source(&self) -> DatasetSource {
        DatasetSource {
            name: self.name.clone(),
            format: self.format,
            interactions: self.interactions.clone(),
            items: self.items.clone(),
        }
    }
}

fn parse_format(s: &str) -> Result<DatasetFormat, String> {
    serde_json::from_value(Value::String(s.to_owned())).map_err(|_| format!("unknown format {s:?}"))
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set k_members=4` or `--set backend.base_url="http://..."`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    n_eval_users: Option<usize>,
    #[arg(long)]
    concurrency: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(&self.config).with_context(|| format!("reading {}", self.config.display()))?;
        let mut value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", self.config.display()))?;
        let mut sets: Vec<(String, Value)> = Vec::new();
        for raw in &self.overrides {
            let (path, v) = raw.split_once('=').with_context(|| format!("expected PATH=VALUE, got {raw:?}"))?;
            sets.push((path.to_owned(), serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()))));
        }
        let flags = [
            ("seed", self.seed.map(Value::from)),
            ("method", self.method.clone().map(Value::from)),
            ("repeats", self.repeats.map(Value::from)),
            ("n_eval_users", self.n_eval_users.map(Value::from)),
            ("concurrency", self.concurrency.map(Value::from)),
        ];
        sets.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_owned(), v))));
        for (path, v) in sets {
            set_path(&mut value, &path, v)?;
        }
        let config: ExperimentConfig = serde_json::from_value(value).context("invalid experiment config")?;
        config.validate()?;
        Ok(config)
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        let Some(map) = node.as_object_mut() else {
            bail!("cannot set {path}: {part} is not inside an object");
        };
        if parts.peek().is_none() {
            map.insert(part.to_owned(), value);
            return Ok(());
        }
        node = map.entry(part).or_insert_with(|| Value::Object(Default::default()));
    }
    bail!("empty override path")
}

fn write_tsv(path: &Path, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for row in rows {
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

fn ingest(data: &DataArgs, out: &Path) -> Result<()> {
    let raw = load_interactions(&data.source())?;
    let log = filter_log(&raw, data.min_count)?;
    fs::create_dir_all(out)?;
    write_tsv(
        &out.join("items.tsv"),
        log.catalog().iter().map(|i| format!("{}\t{}", i.id, i.title)),
    )?;
    write_tsv(
        &out.join("interactions.tsv"),
        log.users()
            .flat_map(|(u, seq)| seq.iter().map(move |i| format!("{u}\t{}\t{}", i.item, i.timestamp))),
    )?;
    let stats = dataset_stats(&log);
    fs::write(out.join("stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn embed_cache(config: &ExperimentConfig) -> Result<()> {
    if config.embedding.cache.is_none() {
        bail!("embedding.cache must name a file to warm");
    }
    let data = runner::prepare_data(&config.dataset, config.min_count)?;
    let provider = config.embedding.provider(config.seed)?;
    let cache = config.embedding.open_cache()?;
    let texts = data
        .split
        .train
        .iter()
        .chain(&data.split.test)
        .map(|s| sequence_text(&s.history, data.catalog()))
        .collect::<Result<Vec<_>, _>>()?;
    let before = cache.len();
    embed_many(&texts, provider.as_ref(), &cache, config.embedding.batch_size, config.concurrency)?;
    log::info!("cache holds {} vectors ({} new)", cache.len(), cache.len() - before);
    println!("{}", cache.len());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest { data, out } => ingest(&data, &out)?,
        Command::Stats { data, raw } => {
            let log = load_interactions(&data.source())?;
            let log = if raw { log } else { filter_log(&log, data.min_count)? };
            println!("{}", serde_json::to_string_pretty(&dataset_stats(&log))?);
        }
        Command::EmbedCache { config } => embed_cache(&config.load()?)?,
        Command::Run { config, out } => {
            let summary = runner::run_experiment(&config.load()?, &out)?;
            print!("{}", runner::table_text(std::slice::from_ref(&summary)));
        }
        Command::GridK { config, out, k } => {
            let grid = runner::grid_search_k(&config.load()?, &k, &out)?;
            for row in &grid.rows {
                let ndcg10 = row.summary.metrics.ndcg.get(&10).map_or(0.0, |m| m.mean);
                println!("k={:<2} NDCG@10={ndcg10:.4}{}", row.k, if row.best { "  (best)" } else { "" });
            }
        }
        Command::Report { records, csv } => {
            if records.is_empty() {
                bail!("no records files given");
            }
            let mut rows = Vec::new();
            for path in &records {
                let report = runner::report(path)?;
                if report.skipped_lines > 0 {
                    log::warn!("{}: skipped {} corrupt lines", path.display(), report.skipped_lines);
                }
                rows.extend(report.rows);
            }
            print!("{}", runner::table_text(&rows));
            if let Some(csv) = csv {
                fs::write(&csv, runner::table_csv(&rows)).with_context(|| format!("writing {}", csv.display()))?;
            }
        }
        Command::Replay { config, records, out } => {
            let summary = runner::replay(&config.load()?, &records, &out)?;
            print!("{}", runner::table_text(std::slice::from_ref(&summary)));
        }
    }
    Ok(())
}
