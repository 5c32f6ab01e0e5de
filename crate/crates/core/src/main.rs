use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gognn::checkpoint::{self, CheckpointError, TrainingMeta};
use gognn::chem::{parse_smiles_with_id, read_molecule_table, MoleculeGraph};
use gognn::config::{parse_pairs, ConfigError, TrainConfig};
use gognn::data::synth::{synth_generate, RuleTable};
use gognn::data::{
    load_cci, load_ddi, split, write_dataset, DataError, Dataset, Split, Strictness, Task,
};
use gognn::interaction::{read_side_effect_vectors, resolve_relations, Link};
use gognn::model::GoGNNModel;
use gognn::train::{evaluate, predict, train_with, EvalReport, History, Part, TrainError};

#[derive(Parser)]
#[command(
    name = "gognn",
    version,
    about = "Graph-of-graphs interaction prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with planted functional groups.
    Synth(SynthArgs),
    /// Train a model and save a checkpoint.
    Train(TrainArgs),
    /// Score a split part of a dataset with a saved model.
    Evaluate(EvaluateArgs),
    /// Interaction probabilities for listed pairs or triplets.
    Predict(PredictArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "cci")]
    task: Task,
    #[arg(long, default_value_t = 60)]
    molecules: usize,
    #[arg(long, default_value_t = 3)]
    groups: usize,
    /// `diagonal` (each group with itself), `full` (every pair), or an
    /// explicit list such as `0-0,1-2`.
    #[arg(long, default_value = "diagonal")]
    rules: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding molecules.tsv and links.tsv or triples.tsv.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Molecule table (`id<TAB>smiles`).
    #[arg(long = "molecules")]
    molecule_table: Option<PathBuf>,
    /// Scored chemical links (CCI).
    #[arg(long)]
    links: Option<PathBuf>,
    /// Drug triples (DDI).
    #[arg(long)]
    triples: Option<PathBuf>,
    /// Minimum CCI confidence score.
    #[arg(long, default_value_t = 900)]
    threshold: u32,
    /// Skip and count bad rows instead of failing.
    #[arg(long)]
    lenient: bool,
}

/// Every configuration key as a `--key value` override.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long = "hidden_dim", alias = "hidden-dim")]
    hidden_dim: Option<String>,
    #[arg(long = "repr_dim", alias = "repr-dim")]
    repr_dim: Option<String>,
    #[arg(long = "pooling_ratio", alias = "pooling-ratio")]
    pooling_ratio: Option<String>,
    #[arg(long = "learning_rate", alias = "learning-rate")]
    learning_rate: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long = "batch_edges", alias = "batch-edges")]
    batch_edges: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long = "gcn_layers", alias = "gcn-layers")]
    gcn_layers: Option<String>,
    #[arg(long = "gat_heads", alias = "gat-heads")]
    gat_heads: Option<String>,
    #[arg(long = "interaction_layers", alias = "interaction-layers")]
    interaction_layers: Option<String>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long = "negative_sampling", alias = "negative-sampling")]
    negative_sampling: Option<String>,
    #[arg(long = "filtered_negatives", alias = "filtered-negatives")]
    filtered_negatives: Option<String>,
    #[arg(long = "side_effect_dim", alias = "side-effect-dim")]
    side_effect_dim: Option<String>,
    #[arg(long)]
    relations: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, &String)> {
        let all = [
            ("task", &self.task),
            ("hidden_dim", &self.hidden_dim),
            ("repr_dim", &self.repr_dim),
            ("pooling_ratio", &self.pooling_ratio),
            ("learning_rate", &self.learning_rate),
            ("epochs", &self.epochs),
            ("batch_edges", &self.batch_edges),
            ("seed", &self.seed),
            ("ablation", &self.ablation),
            ("gcn_layers", &self.gcn_layers),
            ("gat_heads", &self.gat_heads),
            ("interaction_layers", &self.interaction_layers),
            ("split", &self.split),
            ("patience", &self.patience),
            ("negative_sampling", &self.negative_sampling),
            ("filtered_negatives", &self.filtered_negatives),
            ("side_effect_dim", &self.side_effect_dim),
            ("relations", &self.relations),
        ];
        all.into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k, v)))
            .collect()
    }

    /// File pairs, then flag overrides. The task may be left to the data.
    fn resolve(&self, inferred: Option<Task>) -> Result<TrainConfig, Failure> {
        let mut pairs = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
                parse_pairs(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in self.overrides() {
            pairs.insert(k.to_string(), v.clone());
        }
        if let (false, Some(t)) = (pairs.contains_key("task"), inferred) {
            pairs.insert("task".into(), t.to_string());
        }
        Ok(TrainConfig::from_pairs(&pairs)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Where to save the trained model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write the training history as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// DDI only: initial side-effect vectors, one `relation<TAB>v1 v2 ...`
    /// per line. Relations are matched by name, then by index.
    #[arg(long)]
    side_effect_vectors: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// train, valid or test.
    #[arg(long, default_value = "test")]
    part: Part,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Query rows: `id_a<TAB>id_b` (CCI) or `id_a<TAB>id_b<TAB>relation` (DDI).
    #[arg(long)]
    queries: PathBuf,
    /// Extra `id<TAB>smiles` molecules that queries may reference.
    #[arg(long = "new-molecules")]
    new_molecules: Option<PathBuf>,
    /// Output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Divergence(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Divergence(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Divergence(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Data(format!("checkpoint: {e}"))
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => Failure::Divergence(e.to_string()),
            TrainError::Config(c) => Failure::Usage(c.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

fn io_failure(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

impl DataArgs {
    /// Task implied by the files given, if any.
    fn inferred_task(&self) -> Option<Task> {
        match (&self.links, &self.triples, &self.data) {
            (Some(_), None, _) => Some(Task::Cci),
            (None, Some(_), _) => Some(Task::Ddi),
            (None, None, Some(dir)) => {
                match (
                    dir.join("links.tsv").exists(),
                    dir.join("triples.tsv").exists(),
                ) {
                    (true, false) => Some(Task::Cci),
                    (false, true) => Some(Task::Ddi),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    fn load(&self, task: Task) -> Result<Dataset, Failure> {
        let from_dir = |name: &str| self.data.as_ref().map(|d| d.join(name));
        let mols = self
            .molecule_table
            .clone()
            .or_else(|| from_dir("molecules.tsv"))
            .ok_or_else(|| Failure::Usage("pass --data or --molecules".into()))?;
        let mode = if self.lenient {
            Strictness::Lenient
        } else {
            Strictness::Strict
        };
        let ds = match task {
            Task::Cci => {
                let links = self
                    .links
                    .clone()
                    .or_else(|| from_dir("links.tsv"))
                    .ok_or_else(|| Failure::Usage("pass --data or --links".into()))?;
                load_cci(&links, &mols, self.threshold, mode)?
            }
            Task::Ddi => {
                let triples = self
                    .triples
                    .clone()
                    .or_else(|| from_dir("triples.tsv"))
                    .ok_or_else(|| Failure::Usage("pass --data or --triples".into()))?;
                load_ddi(&triples, &mols, mode)?
            }
        };
        let r = &ds.report;
        log::info!(
            "loaded {} molecules, {} links ({} rows, {} skipped, {} unparseable molecules)",
            r.molecules,
            r.edges,
            r.rows,
            r.skipped(),
            r.unparseable_molecules
        );
        Ok(ds)
    }
}

fn make_split(config: &TrainConfig, ds: &Dataset) -> Result<Split, Failure> {
    Ok(split(ds.links.len(), &config.split, config.seed)?)
}

fn print_report(part: Part, r: &EvalReport, json: bool) {
    if json {
        let mut v = serde_json::to_value(r).expect("report serializes");
        v["event"] = json!("eval");
        v["part"] = json!(part);
        println!("{v}");
    } else {
        println!(
            "{:<6} {:>8.4} {:>8.4} {:>10} {:>10}",
            format!("{part:?}").to_lowercase(),
            r.auc,
            r.ap,
            r.positives,
            r.negatives
        );
    }
}

fn parse_rule_pairs(text: &str, groups: usize) -> Result<Vec<(usize, usize)>, Failure> {
    let bad = || Failure::Usage(format!("unknown rule table `{text}`"));
    text.split(',')
        .map(|p| {
            let (a, b) = p.trim().split_once('-').ok_or_else(bad)?;
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a >= groups || b >= groups {
                return Err(Failure::Usage(format!(
                    "rule pair {a}-{b} names a group outside 0..{groups}"
                )));
            }
            Ok((a, b))
        })
        .collect()
}

fn run_synth(a: SynthArgs) -> Result<(), Failure> {
    if !(2..=8).contains(&a.groups) {
        return Err(Failure::Usage("--groups must lie in 2..=8".into()));
    }
    let rules = match a.rules.as_str() {
        "diagonal" => RuleTable::diagonal(a.groups),
        "full" => RuleTable::full(a.groups),
        other => RuleTable::from_pairs(&parse_rule_pairs(other, a.groups)?),
    };
    let s = synth_generate(a.molecules, a.groups, &rules, a.task, a.seed);
    write_dataset(&a.out, &s.dataset)?;
    if a.json {
        println!(
            "{}",
            json!({"event": "synth", "task": a.task, "molecules": s.dataset.molecules.len(),
                   "links": s.dataset.links.len(), "relations": s.dataset.relations.len()})
        );
    } else {
        println!(
            "wrote {} molecules and {} links to {}",
            s.dataset.molecules.len(),
            s.dataset.links.len(),
            a.out.display()
        );
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<(), Failure> {
    let config = a.config.resolve(a.data.inferred_task())?;
    let ds = a.data.load(config.task)?;
    let sp = make_split(&config, &ds)?;
    let vectors = match &a.side_effect_vectors {
        Some(path) => {
            let file = File::open(path).map_err(io_failure(path))?;
            let raw = read_side_effect_vectors(BufReader::new(file))
                .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
            let resolved = resolve_relations(raw, &ds.relations)
                .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
            Some((path.clone(), resolved))
        }
        None => None,
    };
    let (model, history) = train_with(&config, &ds, &sp, |model| {
        let Some((path, vectors)) = &vectors else {
            return Ok(());
        };
        let table = model.side_effects.as_ref().ok_or_else(|| {
            TrainError::Data(
                "--side-effect-vectors needs a DDI model with a side-effect table".into(),
            )
        })?;
        table
            .apply_override(&mut model.store, vectors)
            .map_err(|e| TrainError::Data(format!("{}: {e}", path.display())))
    })?;
    print_history(&history, a.json);
    if let Some(path) = &a.out {
        let text = serde_json::to_string_pretty(&history).expect("history serializes");
        std::fs::write(path, text).map_err(io_failure(path))?;
    }
    if let Some(path) = &a.checkpoint {
        let meta = TrainingMeta {
            epoch: history.best_epoch as u32,
            best_valid_auc: history.best_valid_auc,
            seed: model.config.seed,
        };
        checkpoint::save(&model, &meta, path)?;
    }
    if !a.json {
        println!(
            "{:<6} {:>8} {:>8} {:>10} {:>10}",
            "part", "auc", "ap", "positives", "negatives"
        );
    }
    for (part, idx) in [
        (Part::Train, &sp.train),
        (Part::Valid, &sp.valid),
        (Part::Test, &sp.test),
    ] {
        if !idx.is_empty() {
            print_report(part, &evaluate(&model, &ds, &sp, part)?, a.json);
        }
    }
    Ok(())
}

fn print_history(h: &History, json: bool) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    if !json {
        println!(
            "{:>5} {:>12} {:>9} {:>10}",
            "epoch", "train_loss", "valid_auc", "valid_loss"
        );
    }
    for e in &h.epochs {
        if json {
            let mut v = serde_json::to_value(e).expect("record serializes");
            v["event"] = json!("epoch");
            println!("{v}");
        } else {
            println!(
                "{:>5} {:>12.6} {:>9} {:>10}",
                e.epoch,
                e.train_loss,
                fmt(e.valid_auc),
                fmt(e.valid_loss)
            );
        }
    }
    if json {
        println!(
            "{}",
            json!({"event": "summary", "best_epoch": h.best_epoch, "best_valid_auc": h.best_valid_auc,
                   "stopped_early": h.stopped_early, "held_out_edge_reads": h.held_out_edge_reads})
        );
    } else {
        println!(
            "best epoch {} (valid auc {}), held-out edge reads {}",
            h.best_epoch,
            fmt(h.best_valid_auc),
            h.held_out_edge_reads
        );
    }
}

fn load_for(data: &DataArgs, ckpt: &Path) -> Result<(GoGNNModel, Dataset, Split), Failure> {
    let (model, _) = checkpoint::load(ckpt)?;
    let ds = data.load(model.config.task)?;
    if ds.relation_count() != model.config.relations {
        return Err(Failure::Data(format!(
            "dataset has {} relations, model was trained with {}",
            ds.relation_count(),
            model.config.relations
        )));
    }
    let sp = make_split(&model.config, &ds)?;
    Ok((model, ds, sp))
}

fn run_evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let (model, ds, sp) = load_for(&a.data, &a.checkpoint)?;
    let r = evaluate(&model, &ds, &sp, a.part)?;
    if !a.json {
        println!(
            "{:<6} {:>8} {:>8} {:>10} {:>10}",
            "part", "auc", "ap", "positives", "negatives"
        );
    }
    print_report(a.part, &r, a.json);
    Ok(())
}

fn run_predict(a: PredictArgs) -> Result<(), Failure> {
    let (model, ds, sp) = load_for(&a.data, &a.checkpoint)?;
    let mut index: HashMap<String, usize> = ds
        .molecules
        .iter()
        .enumerate()
        .map(|(k, m)| (m.id().to_string(), k))
        .collect();
    let mut extra: Vec<MoleculeGraph> = Vec::new();
    let mut bad_smiles: HashMap<String, String> = HashMap::new();
    if let Some(path) = &a.new_molecules {
        let f = File::open(path).map_err(io_failure(path))?;
        let rows = read_molecule_table(BufReader::new(f))
            .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        for row in rows {
            if index.contains_key(&row.id) {
                continue;
            }
            match parse_smiles_with_id(&row.id, &row.smiles) {
                Ok(g) => {
                    index.insert(row.id, ds.molecules.len() + extra.len());
                    extra.push(g);
                }
                Err(e) => {
                    bad_smiles.insert(row.id, format!("line {}: {e}", row.line));
                }
            }
        }
    }
    let relations: HashMap<&str, usize> = ds
        .relations
        .iter()
        .enumerate()
        .map(|(k, r)| (r.as_str(), k))
        .collect();

    let text = std::fs::read_to_string(&a.queries).map_err(io_failure(&a.queries))?;
    let mut rows: Vec<(Vec<String>, Result<Link, String>)> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<String> = line.split('\t').map(str::to_string).collect();
        let want = if model.config.task == Task::Ddi { 3 } else { 2 };
        let lookup = |id: &str| -> Result<usize, String> {
            index
                .get(id)
                .copied()
                .ok_or_else(|| match bad_smiles.get(id) {
                    Some(e) => format!("molecule `{id}` has unparseable SMILES ({e})"),
                    None => format!("unknown molecule `{id}`"),
                })
        };
        let parsed = if cols.len() != want {
            Err(format!(
                "line {}: expected {want} tab-separated columns",
                k + 1
            ))
        } else {
            (|| {
                let i = lookup(&cols[0])?;
                let j = lookup(&cols[1])?;
                let rel = match want {
                    3 => Some(
                        *relations
                            .get(cols[2].as_str())
                            .ok_or_else(|| format!("unknown relation `{}`", cols[2]))?,
                    ),
                    _ => None,
                };
                Ok(Link { i, j, rel })
            })()
        };
        rows.push((cols, parsed));
    }
    let queries: Vec<Link> = rows
        .iter()
        .filter_map(|(_, r)| r.as_ref().ok().copied())
        .collect();
    let probs = predict(&model, &ds, &sp, &extra, &queries)?;

    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_failure(p))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    let mut next = probs.into_iter();
    let mut failed = 0usize;
    for (cols, parsed) in rows {
        let line = match parsed {
            Ok(_) => {
                let p = next.next().expect("one probability per query");
                if a.json {
                    json!({"query": cols, "probability": p}).to_string()
                } else {
                    format!("{}\t{p:.6}", cols.join("\t"))
                }
            }
            Err(e) => {
                failed += 1;
                if a.json {
                    json!({"query": cols, "error": e}).to_string()
                } else {
                    format!("{}\terror: {e}", cols.join("\t"))
                }
            }
        };
        writeln!(out, "{line}").map_err(|e| Failure::Data(e.to_string()))?;
    }
    out.flush().map_err(|e| Failure::Data(e.to_string()))?;
    if failed > 0 {
        log::warn!("{failed} query rows could not be scored");
    }
    Ok(())
}

fn main() -> ExitCode {
    gognn::heap::retain_freed_memory();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Predict(a) => run_predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
