use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use tagcc::anchors::{
    self, AnchorCache, AnchorError, AnchorFileHeader, AnchorSet, ChatClient, PromptTemplates, TEMPLATE_VERSION,
};
use tagcc::data::{load_dataset, load_schema, DataError, EncodedDataset, RawTable, Schema};
use tagcc::embed::{self, EmbedError, EmbeddingClient, EmbeddingMatrix};
use tagcc::losses::LossError;
use tagcc::metrics::{score_all, MetricError, Scores};
use tagcc::model::{ModelError, ModelParams};
use tagcc::train::{self, AblationMode, ClusterResult, TrainConfig, TrainError, TrainInputs, TrainOutput};

use crate::manifest::RunManifest;
use crate::{config, Cli, CliError, CliResult, Command, DataArgs};

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::other(e),
            _ => CliError::validation(e),
        }
    }
}

impl From<AnchorError> for CliError {
    fn from(e: AnchorError) -> Self {
        match e {
            AnchorError::Transport(_) | AnchorError::EmptyResponse | AnchorError::Io { .. } => CliError::other(e),
            _ => CliError::validation(e),
        }
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Transport(_) | EmbedError::Io { .. } => CliError::other(e),
            _ => CliError::validation(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::numerical(e),
            TrainError::Config(_)
            | TrainError::TooFewRows { .. }
            | TrainError::Misaligned(_)
            | TrainError::MissingModality { .. } => CliError::validation(e),
            TrainError::Model(ModelError::Tensor(_))
            | TrainError::Loss(LossError::Tensor(_) | LossError::NotNormalized { .. }) => CliError::numerical(e),
            _ => CliError::other(e),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. } => CliError::other(e),
            _ => CliError::validation(e),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::validation(e)
    }
}

fn io<T>(r: anyhow::Result<T>) -> CliResult<T> {
    r.map_err(CliError::other)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let config = config::load(cli.config.as_deref(), cli.seed)?;
    io(fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display())))?;
    match &cli.command {
        Command::Anchor {
            data,
            fallback,
            cache,
            templates,
            concurrency,
        } => cmd_anchor(cli, data, *fallback, cache.as_deref(), templates.as_deref(), *concurrency),
        Command::Embed {
            anchors,
            batch_size,
            concurrency,
        } => cmd_embed(cli, anchors, *batch_size, *concurrency),
        Command::Train {
            data,
            embeddings,
            anchors,
            mode,
            t_warm,
            epochs,
            repeat,
        } => {
            let mut config = config;
            if let Some(m) = mode {
                config.ablation_mode = (*m).into();
            }
            if let Some(t) = t_warm {
                config.t_warm = *t;
            }
            if let Some(e) = epochs {
                config.epochs_total = *e;
            }
            cmd_train(cli, &config, data, embeddings.as_deref(), anchors.as_deref(), *repeat)
        }
        Command::Baseline { data, repeat } => cmd_baseline(cli, &config, data, *repeat),
        Command::Eval {
            assignments,
            truth,
            runs,
            repeat,
        } => cmd_eval(cli, assignments.as_deref(), truth.as_deref(), runs.as_deref(), *repeat),
        Command::Export { data, checkpoint } => cmd_export(cli, data, checkpoint),
        Command::Perturb {
            data,
            embeddings,
            anchors,
            epsilons,
            seeds,
        } => cmd_perturb(cli, &config, data, embeddings, anchors.as_deref(), epsilons, *seeds),
    }
}

struct Loaded {
    schema: Schema,
    table: RawTable,
    dataset: EncodedDataset,
}

fn load(data: &DataArgs) -> CliResult<Loaded> {
    let schema = load_schema(&data.schema)?;
    let (table, dataset) = load_dataset(&data.data, &schema)?;
    if table.is_empty() {
        return Err(CliError::validation(anyhow!("{} has no complete rows", data.data.display())));
    }
    Ok(Loaded { schema, table, dataset })
}

fn record_inputs(manifest: &mut RunManifest, paths: &[&Path]) -> CliResult<()> {
    for p in paths {
        io(manifest.input(p))?;
    }
    Ok(())
}

fn cmd_anchor(
    cli: &Cli,
    data: &DataArgs,
    fallback: bool,
    cache: Option<&Path>,
    templates: Option<&Path>,
    concurrency: usize,
) -> CliResult<()> {
    let loaded = load(data)?;
    let mut manifest = RunManifest::new("anchor");
    manifest.schema_fingerprint = Some(loaded.schema.fingerprint());
    record_inputs(&mut manifest, &[&data.data, &data.schema])?;

    let (anchors, protocol) = if fallback {
        (anchors::fallback_anchors(&loaded.table, &loaded.schema), None)
    } else {
        let mut client = ChatClient::from_env()
            .map_err(|name| CliError::validation(anyhow!("chat endpoint not configured: {name} is unset (or pass --fallback)")))?;
        client.concurrency = concurrency.max(1);
        let templates = match templates {
            Some(dir) => PromptTemplates::from_dir(dir, TEMPLATE_VERSION)?,
            None => PromptTemplates::default(),
        };
        let cache_path = cache.map(Path::to_path_buf).unwrap_or_else(|| cli.out.join("anchor_cache.jsonl"));
        let cache = AnchorCache::open(&cache_path)?;
        let protocol = anchors::synthesize_protocol(&loaded.schema, &templates, &client, &cache)?;
        let result = anchors::generate_anchors(&loaded.table, &loaded.schema, &protocol, &templates, &client, &cache);
        cache.flush()?;
        io(manifest.artifact(&cache_path))?;
        (result?, Some(protocol))
    };

    let set = AnchorSet {
        header: AnchorFileHeader {
            schema_fingerprint: loaded.schema.fingerprint(),
            n: anchors.len(),
            protocol,
        },
        anchors,
    };
    let path = cli.out.join("anchors.jsonl");
    set.save(&path)?;
    manifest.anchor_source = Some(set.source_tag());
    io(manifest.artifact(&path))?;
    io(manifest.write(&cli.out))?;
    println!("wrote {} anchors to {}", set.anchors.len(), path.display());
    Ok(())
}

fn cmd_embed(cli: &Cli, anchors_path: &Path, batch_size: usize, concurrency: usize) -> CliResult<()> {
    let set = AnchorSet::load(anchors_path)?;
    let mut client = EmbeddingClient::from_env()
        .map_err(|name| CliError::validation(anyhow!("embedding endpoint not configured: {name} is unset")))?;
    client.batch_size = batch_size.max(1);
    client.concurrency = concurrency.max(1);
    let matrix = embed::embed_texts(&set.anchors, &client)?;
    let path = cli.out.join("embeddings.jsonl");
    matrix.save(&path, Some(set.text_fingerprint()))?;

    let mut manifest = RunManifest::new("embed");
    manifest.schema_fingerprint = Some(set.header.schema_fingerprint.clone());
    manifest.anchor_source = Some(set.source_tag());
    manifest.embedding_provider = Some(matrix.provider_id.clone());
    record_inputs(&mut manifest, &[anchors_path])?;
    io(manifest.artifact(&path))?;
    io(manifest.write(&cli.out))?;
    println!("wrote {} × {} embeddings to {}", matrix.n(), matrix.dim, path.display());
    Ok(())
}

/// Embeddings restricted to the dataset rows, checked against the anchor file when one is given.
fn load_embeddings(
    path: &Path,
    anchors: Option<&Path>,
    loaded: &Loaded,
) -> CliResult<(EmbeddingMatrix, Option<String>)> {
    let (matrix, source) = match anchors {
        Some(a) => {
            let set = AnchorSet::load(a)?;
            (embed::load_precomputed(path, &set.anchors)?, Some(set.source_tag()))
        }
        None => (embed::read_embedding_file(path)?.1, None),
    };
    Ok((matrix.select(&loaded.dataset.row_ids)?, source))
}

fn write_assignments(path: &Path, row_ids: &[usize], assignments: &[usize]) -> CliResult<()> {
    let mut text = String::from("row_id,cluster\n");
    for (r, a) in row_ids.iter().zip(assignments) {
        text.push_str(&format!("{r},{a}\n"));
    }
    io(fs::write(path, text).with_context(|| format!("writing {}", path.display())))
}

fn write_truth(path: &Path, dataset: &EncodedDataset) -> CliResult<bool> {
    let Some(labels) = &dataset.labels else {
        return Ok(false);
    };
    let names = &dataset.label_names;
    let mut text = String::from("row_id,label\n");
    for (r, &l) in dataset.row_ids.iter().zip(labels) {
        text.push_str(&format!("{r},{}\n", names[l]));
    }
    io(fs::write(path, text).with_context(|| format!("writing {}", path.display())))?;
    Ok(true)
}

fn run_dirs(out: &Path, seed: u64, repeat: Option<usize>) -> Vec<(u64, PathBuf)> {
    match repeat {
        None => vec![(seed, out.to_path_buf())],
        Some(r) => (0..r as u64).map(|i| (seed + i, out.join(format!("seed-{}", seed + i)))).collect(),
    }
}

fn scores_of(dataset: &EncodedDataset, result: &ClusterResult) -> CliResult<Option<Scores>> {
    match &dataset.labels {
        Some(truth) => Ok(Some(score_all(&result.assignments, truth)?)),
        None => Ok(None),
    }
}

fn cmd_train(
    cli: &Cli,
    config: &TrainConfig,
    data: &DataArgs,
    embeddings: Option<&Path>,
    anchors: Option<&Path>,
    repeat: Option<usize>,
) -> CliResult<()> {
    config.validate()?;
    let loaded = load(data)?;
    let mode = config.ablation_mode;
    let (matrix, source) = match (embeddings, mode.uses_text()) {
        (Some(p), true) => {
            let (m, s) = load_embeddings(p, anchors, &loaded)?;
            (Some(m), s)
        }
        (None, true) => {
            return Err(CliError::validation(anyhow!("--mode {} needs --embeddings", mode.name())));
        }
        (_, false) => (None, None),
    };
    let inputs = TrainInputs {
        dataset: &loaded.dataset,
        embeddings: matrix.as_ref(),
    };

    let mut all_scores = Vec::new();
    for (seed, dir) in run_dirs(&cli.out, config.seed, repeat) {
        io(fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())))?;
        let config = TrainConfig { seed, ..config.clone() };
        let output = train::train(&inputs, &loaded.schema, &config)?;
        let scores = write_run(&dir, &config, data, embeddings, anchors, &loaded, &matrix, source.clone(), &output)?;
        match scores {
            Some(s) => println!(
                "seed {seed} mode {}: ACC {:.4} NMI {:.4} ARI {:.4}",
                mode.name(),
                s.acc,
                s.nmi,
                s.ari
            ),
            None => println!("seed {seed} mode {}: trained ({} rows)", mode.name(), loaded.dataset.n),
        }
        all_scores.extend(scores);
    }
    if repeat.is_some() && !all_scores.is_empty() {
        let report = Report::from_scores(&all_scores);
        report.print();
        io(report.write(&cli.out.join("metrics.json")))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn write_run(
    dir: &Path,
    config: &TrainConfig,
    data: &DataArgs,
    embeddings: Option<&Path>,
    anchors: Option<&Path>,
    loaded: &Loaded,
    matrix: &Option<EmbeddingMatrix>,
    source: Option<String>,
    output: &TrainOutput,
) -> CliResult<Option<Scores>> {
    let mut manifest = RunManifest::new("train");
    manifest.config = Some(config.clone());
    manifest.seed = Some(config.seed);
    manifest.schema_fingerprint = Some(loaded.schema.fingerprint());
    manifest.anchor_source = source;
    manifest.embedding_provider = matrix.as_ref().map(|m| m.provider_id.clone());
    record_inputs(&mut manifest, &[&data.data, &data.schema])?;
    for p in embeddings.into_iter().chain(anchors).filter(|_| config.ablation_mode.uses_text()) {
        io(manifest.input(p))?;
    }

    let checkpoint = dir.join("checkpoint.json");
    output.params.save(&checkpoint)?;
    let log = dir.join("train_log.jsonl");
    output.log.save(&log)?;
    let assignments = dir.join("assignments.csv");
    write_assignments(&assignments, &loaded.dataset.row_ids, &output.result.assignments)?;
    for p in [&checkpoint, &log, &assignments] {
        io(manifest.artifact(p))?;
    }
    let truth = dir.join("truth.csv");
    if write_truth(&truth, &loaded.dataset)? {
        io(manifest.artifact(&truth))?;
    }
    manifest.metrics = scores_of(&loaded.dataset, &output.result)?;
    io(manifest.write(dir))?;
    Ok(manifest.metrics)
}

fn cmd_baseline(cli: &Cli, config: &TrainConfig, data: &DataArgs, repeat: Option<usize>) -> CliResult<()> {
    let loaded = load(data)?;
    let mut all_scores = Vec::new();
    for (seed, dir) in run_dirs(&cli.out, config.seed, repeat) {
        io(fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())))?;
        let result = train::run_kmeans_baseline(&loaded.dataset, loaded.schema.k_star, seed)?;
        let mut manifest = RunManifest::new("baseline");
        manifest.seed = Some(seed);
        manifest.schema_fingerprint = Some(loaded.schema.fingerprint());
        record_inputs(&mut manifest, &[&data.data, &data.schema])?;
        let assignments = dir.join("assignments.csv");
        write_assignments(&assignments, &loaded.dataset.row_ids, &result.assignments)?;
        io(manifest.artifact(&assignments))?;
        let truth = dir.join("truth.csv");
        if write_truth(&truth, &loaded.dataset)? {
            io(manifest.artifact(&truth))?;
        }
        manifest.metrics = scores_of(&loaded.dataset, &result)?;
        io(manifest.write(&dir))?;
        if let Some(s) = manifest.metrics {
            println!("seed {seed} k-means: ACC {:.4} NMI {:.4} ARI {:.4}", s.acc, s.nmi, s.ari);
            all_scores.push(s);
        }
    }
    if repeat.is_some() && !all_scores.is_empty() {
        let report = Report::from_scores(&all_scores);
        report.print();
        io(report.write(&cli.out.join("metrics.json")))?;
    }
    Ok(())
}

/// Reads a two-column CSV with a header, returning row ids and the second column.
fn read_pairs(path: &Path) -> CliResult<(Vec<usize>, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::validation)?;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record
            .with_context(|| format!("{} line {}", path.display(), i + 2))
            .map_err(CliError::validation)?;
        if record.len() != 2 {
            return Err(CliError::validation(anyhow!("{} line {}: expected 2 columns", path.display(), i + 2)));
        }
        let id = record[0]
            .parse()
            .with_context(|| format!("{} line {}: bad row id", path.display(), i + 2))
            .map_err(CliError::validation)?;
        ids.push(id);
        values.push(record[1].to_string());
    }
    Ok((ids, values))
}

/// Dense indices in first-seen order.
fn index_labels(values: &[String]) -> Vec<usize> {
    let mut seen: Vec<&str> = Vec::new();
    values
        .iter()
        .map(|v| match seen.iter().position(|s| *s == v) {
            Some(i) => i,
            None => {
                seen.push(v);
                seen.len() - 1
            }
        })
        .collect()
}

fn score_files(assignments: &Path, truth: &Path) -> CliResult<Scores> {
    let (pred_ids, pred) = read_pairs(assignments)?;
    let (truth_ids, labels) = read_pairs(truth)?;
    if pred.len() != labels.len() {
        return Err(CliError::validation(anyhow!(
            "{} has {} rows but {} has {}",
            assignments.display(),
            pred.len(),
            truth.display(),
            labels.len()
        )));
    }
    if pred_ids != truth_ids {
        return Err(CliError::validation(anyhow!("row ids of assignments and truth differ")));
    }
    if pred.is_empty() {
        return Err(CliError::validation(anyhow!("no rows to score")));
    }
    Ok(score_all(&index_labels(&pred), &index_labels(&labels))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
struct Summary {
    mean: f64,
    std: f64,
}

impl Summary {
    /// Mean and sample standard deviation (zero for a single value).
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct Report {
    runs: Vec<Scores>,
    acc: Summary,
    nmi: Summary,
    ari: Summary,
}

impl Report {
    fn from_scores(runs: &[Scores]) -> Self {
        let pick = |f: fn(&Scores) -> f64| Summary::of(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            runs: runs.to_vec(),
            acc: pick(|s| s.acc),
            nmi: pick(|s| s.nmi),
            ari: pick(|s| s.ari),
        }
    }

    fn print(&self) {
        println!("runs: {}", self.runs.len());
        for (name, s) in [("ACC", self.acc), ("NMI", self.nmi), ("ARI", self.ari)] {
            println!("{name} {:.4} ± {:.4}", s.mean, s.std);
        }
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

fn cmd_eval(
    cli: &Cli,
    assignments: Option<&Path>,
    truth: Option<&Path>,
    runs: Option<&Path>,
    repeat: Option<usize>,
) -> CliResult<()> {
    let mut manifest = RunManifest::new("eval");
    let scores = match (assignments, truth, runs) {
        (Some(a), Some(t), None) => {
            record_inputs(&mut manifest, &[a, t])?;
            vec![score_files(a, t)?]
        }
        (None, _, Some(dir)) => {
            let mut found: Vec<(u64, PathBuf)> = io(fs::read_dir(dir).with_context(|| format!("listing {}", dir.display())))?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let name = e.file_name().to_string_lossy().into_owned();
                    let seed = name.strip_prefix("seed-")?.parse().ok()?;
                    Some((seed, e.path()))
                })
                .collect();
            found.sort();
            let wanted = repeat.unwrap_or(found.len());
            if found.len() < wanted || wanted == 0 {
                return Err(CliError::validation(anyhow!(
                    "{} holds {} seed runs, {} requested",
                    dir.display(),
                    found.len(),
                    wanted
                )));
            }
            let mut scores = Vec::new();
            for (_, run) in found.into_iter().take(wanted) {
                let (a, t) = (run.join("assignments.csv"), run.join("truth.csv"));
                record_inputs(&mut manifest, &[&a, &t])?;
                scores.push(score_files(&a, &t)?);
            }
            scores
        }
        _ => return Err(CliError::validation(anyhow!("pass --assignments with --truth, or --runs"))),
    };
    let report = Report::from_scores(&scores);
    report.print();
    let path = cli.out.join("metrics.json");
    io(report.write(&path))?;
    if scores.len() == 1 {
        manifest.metrics = Some(scores[0]);
    }
    io(manifest.artifact(&path))?;
    io(manifest.write(&cli.out))?;
    Ok(())
}

#[derive(Serialize)]
struct ExportHeader<'a> {
    d: usize,
    schema_fingerprint: &'a str,
    n: usize,
}

#[derive(Serialize)]
struct ExportRecord<'a> {
    row_id: usize,
    label: Option<&'a str>,
    vector: &'a [f64],
}

fn cmd_export(cli: &Cli, data: &DataArgs, checkpoint: &Path) -> CliResult<()> {
    let loaded = load(data)?;
    let params = ModelParams::load(checkpoint)?;
    let fp = loaded.schema.fingerprint();
    if params.schema_fingerprint != fp {
        return Err(CliError::validation(anyhow!(
            "checkpoint was trained on schema {}, data uses {}",
            params.schema_fingerprint,
            fp
        )));
    }
    let inputs = TrainInputs {
        dataset: &loaded.dataset,
        embeddings: None,
    };
    let tab = TrainConfig {
        ablation_mode: AblationMode::Full,
        ..TrainConfig::default()
    };
    let z = train::represent(&params, &inputs, &tab)?;

    let mut text = serde_json::to_string(&ExportHeader {
        d: z.cols(),
        schema_fingerprint: &fp,
        n: z.rows(),
    })
    .expect("header serializes");
    text.push('\n');
    for (i, row) in z.iter_rows().enumerate() {
        let label = loaded.dataset.labels.as_ref().map(|l| loaded.dataset.label_names[l[i]].as_str());
        let record = ExportRecord {
            row_id: loaded.dataset.row_ids[i],
            label,
            vector: row,
        };
        text.push_str(&serde_json::to_string(&record).expect("record serializes"));
        text.push('\n');
    }
    let path = cli.out.join("export.jsonl");
    io(fs::write(&path, text).with_context(|| format!("writing {}", path.display())))?;

    let mut manifest = RunManifest::new("export");
    manifest.schema_fingerprint = Some(fp);
    record_inputs(&mut manifest, &[&data.data, &data.schema, checkpoint])?;
    io(manifest.artifact(&path))?;
    io(manifest.write(&cli.out))?;
    println!("wrote {} × {} representations to {}", z.rows(), z.cols(), path.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PerturbRow {
    pub epsilon: f64,
    pub seed: u64,
    pub acc: f64,
    pub delta_acc: f64,
}

fn cmd_perturb(
    cli: &Cli,
    config: &TrainConfig,
    data: &DataArgs,
    embeddings: &Path,
    anchors: Option<&Path>,
    epsilons: &[f64],
    seeds: usize,
) -> CliResult<()> {
    config.validate()?;
    if !config.ablation_mode.uses_text() {
        return Err(CliError::validation(anyhow!("perturbation needs a mode that reads anchors")));
    }
    if let Some(e) = epsilons.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(CliError::validation(anyhow!("epsilon {e} outside [0, 1]")));
    }
    let loaded = load(data)?;
    let truth = loaded
        .dataset
        .labels
        .clone()
        .ok_or_else(|| CliError::validation(anyhow!("perturbation needs truth labels in the schema target")))?;
    let (matrix, source) = load_embeddings(embeddings, anchors, &loaded)?;
    let n = loaded.dataset.n;

    let accuracy = |m: &EmbeddingMatrix, seed: u64| -> CliResult<f64> {
        let inputs = TrainInputs {
            dataset: &loaded.dataset,
            embeddings: Some(m),
        };
        let cfg = TrainConfig { seed, ..config.clone() };
        let out = train::train(&inputs, &loaded.schema, &cfg)?;
        Ok(score_all(&out.result.assignments, &truth)?.acc)
    };

    let mut rows = Vec::new();
    for seed in (0..seeds as u64).map(|i| config.seed + i) {
        let base = accuracy(&matrix, seed)?;
        for &epsilon in epsilons {
            let perm = anchors::swap_permutation(n, epsilon, seed)?;
            let acc = if perm.iter().enumerate().all(|(i, &p)| i == p) {
                base
            } else {
                accuracy(&matrix.permuted(&perm), seed)?
            };
            let row = PerturbRow {
                epsilon,
                seed,
                acc,
                delta_acc: base - acc,
            };
            println!("epsilon {:.2} seed {seed}: ACC {:.4} ΔACC {:+.4}", epsilon, acc, row.delta_acc);
            rows.push(row);
        }
    }

    let path = cli.out.join("perturb.csv");
    let mut text = String::from("epsilon,seed,acc,delta_acc\n");
    for r in &rows {
        text.push_str(&format!("{},{},{},{}\n", r.epsilon, r.seed, r.acc, r.delta_acc));
    }
    io(fs::write(&path, text).with_context(|| format!("writing {}", path.display())))?;

    let mut manifest = RunManifest::new("perturb");
    manifest.config = Some(config.clone());
    manifest.seed = Some(config.seed);
    manifest.schema_fingerprint = Some(loaded.schema.fingerprint());
    manifest.anchor_source = source;
    manifest.embedding_provider = Some(matrix.provider_id.clone());
    record_inputs(&mut manifest, &[&data.data, &data.schema, embeddings])?;
    if let Some(a) = anchors {
        io(manifest.input(a))?;
    }
    io(manifest.artifact(&path))?;
    io(manifest.write(&cli.out))?;
    Ok(())
}
