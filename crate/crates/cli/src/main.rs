use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use jointex::corpus::{
    load_cme_jsonl, load_cose, load_esnli, load_samples, write_jsonl, CoseVersion, GeneratorFormat, SplitStats,
};
use jointex::decoding::explain;
use jointex::evalsuite::{accuracy, corpus_bleu, simulatability, EvalCounts, ProbeConfig};
use jointex::netcore::{load_checkpoint, BundleMeta};
use jointex::synthetic::CopyKeyConfig;
use jointex::trainer::{build_vocabs, fit, predict, FitOptions};
use jointex::{
    ClassifierMode, DecodeConfig, EvalReport, McqaSample, ModelBundle, ModelConfig, Sample, TaskKind, TrainConfig,
};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const DATA_DIR_ENV: &str = "JOINTEX_DATA_DIR";

#[derive(Parser)]
#[command(name = "jointex", version, about = "Train and evaluate joint classifier/explainer models")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "jointex-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Dataset {
    Cme,
    Esnli,
    #[value(name = "cose-v1.0")]
    #[serde(rename = "cose-v1.0")]
    CoseV10,
    #[value(name = "cose-v1.11")]
    #[serde(rename = "cose-v1.11")]
    CoseV111,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Metric {
    Accuracy,
    Bleu,
    #[value(name = "accuracy_ye")]
    AccuracyYe,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Mcqa,
    Nli,
}

#[derive(clap::Args, Debug, Clone, Default, Serialize)]
struct DecodeArgs {
    #[arg(long)]
    beams: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    rep_penalty: Option<f64>,
    #[arg(long)]
    num_return: Option<usize>,
    #[arg(long)]
    length_alpha: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Normalizes a dataset into JSONL splits with a stats block.
    Prepare {
        #[arg(long, value_enum)]
        dataset: Dataset,
        /// Directory holding the raw files; defaults to $JOINTEX_DATA_DIR.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_dev: usize,
        #[arg(long, default_value_t = 4)]
        num_options: usize,
        #[arg(long, default_value_t = 64)]
        vocab_size: usize,
        #[arg(long, default_value_t = 1.0)]
        decisive_fraction: f64,
        #[arg(long, default_value_t = 1.0)]
        explained_fraction: f64,
        #[arg(long)]
        with_context: bool,
    },
    /// Trains a model from the run configuration.
    Train,
    /// Writes explanations and classifier predictions as JSON lines.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Computes the requested metrics and prints an evaluation report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output of `generate`.
        #[arg(long)]
        explanations: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "accuracy")]
        metrics: Vec<Metric>,
        /// Task of `--data` when no checkpoint is given.
        #[arg(long, value_enum, default_value = "mcqa")]
        task: TaskArg,
        /// MCQA samples with evidence for training simulatability probes.
        #[arg(long)]
        probe_train: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        num_probes: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataConfig {
    train: PathBuf,
    dev: PathBuf,
    #[serde(default = "default_task")]
    task: TaskKind,
    #[serde(default = "default_mode")]
    classifier_mode: ClassifierMode,
    #[serde(default = "default_max_vocab")]
    max_vocab: usize,
}

fn default_task() -> TaskKind {
    TaskKind::Mcqa
}

fn default_mode() -> ClassifierMode {
    ClassifierMode::QaOnly
}

fn default_max_vocab() -> usize {
    32_000
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    data: Option<DataConfig>,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    decode: DecodeConfig,
    #[serde(default)]
    probe: ProbeConfig,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
    version: String,
    started_at: u64,
    finished_at: Option<u64>,
}

impl RunManifest {
    fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let path = Self::path(out_dir);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    fn finish(mut self, out_dir: &Path) -> Result<()> {
        self.finished_at = Some(now());
        self.write(out_dir)
    }
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Relative paths are looked up under $JOINTEX_DATA_DIR when it is set and
/// the path does not exist as given.
fn resolve(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            return Path::new(&dir).join(path);
        }
    }
    path.to_path_buf()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| anyhow!("config {}: {}", path.display(), e.message()))
}

/// Every semantic problem of the configuration, so they can be reported in
/// one go.
fn config_problems(cfg: &RunConfig, need_data: bool) -> Vec<String> {
    let mut out = Vec::new();
    out.extend(cfg.model.problems().into_iter().map(|p| format!("model: {p}")));
    out.extend(cfg.train.problems().into_iter().map(|p| format!("train: {p}")));
    if let Err(e) = cfg.decode.validate() {
        out.push(format!("decode: {e}"));
    }
    match &cfg.data {
        Some(d) => {
            for (name, p) in [("data.train", &d.train), ("data.dev", &d.dev)] {
                if !resolve(p).is_file() {
                    out.push(format!("{name}: {} does not exist", p.display()));
                }
            }
            if d.task == TaskKind::Nli && d.classifier_mode != ClassifierMode::QaOnly {
                out.push("data.classifier_mode: NLI supports only qa_only".into());
            }
            if cfg.train.max_seq_len > cfg.model.max_positions {
                out.push(format!(
                    "train.max_seq_len {} exceeds model.max_positions {}",
                    cfg.train.max_seq_len, cfg.model.max_positions
                ));
            }
        }
        None if need_data => out.push("data: missing section (needs train and dev)".into()),
        None => {}
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(d) = &cfg.data {
        cfg.model.task = d.task;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let argv: Vec<String> = std::env::args().collect();
    let out_dir = cli.out_dir.clone();
    let manifest = |command: &str, config: Value, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>| RunManifest {
        command: command.into(),
        argv: argv.clone(),
        config,
        inputs,
        outputs,
        seed: cli.seed,
        version: jointex::VERSION.into(),
        started_at: now(),
        finished_at: None,
    };

    match cli.command {
        Command::Prepare {
            dataset,
            input,
            n_train,
            n_dev,
            num_options,
            vocab_size,
            decisive_fraction,
            explained_fraction,
            with_context,
        } => {
            let input = input.or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from));
            let task = CopyKeyConfig {
                num_options,
                vocab_size,
                decisive_fraction,
                explained_fraction,
                with_context,
                task_seed: cli.seed.unwrap_or(0),
                ..CopyKeyConfig::default()
            };
            let config = json!({ "dataset": dataset, "synthetic": task, "n_train": n_train, "n_dev": n_dev });
            let m = manifest("prepare", config, input.iter().cloned().collect(), vec![out_dir.clone()]);
            m.write(&out_dir)?;
            prepare(dataset, input.as_deref(), &task, n_train, n_dev, cli.seed.unwrap_or(0), &out_dir)?;
            m.finish(&out_dir)
        }
        Command::Train => {
            if cli.config.is_none() {
                bail!("train needs --config");
            }
            let problems = config_problems(&cfg, true);
            if !problems.is_empty() {
                bail!("invalid configuration:\n  {}", problems.join("\n  "));
            }
            let data = cfg.data.clone().expect("checked by config_problems");
            let m = manifest(
                "train",
                serde_json::to_value(&cfg)?,
                vec![resolve(&data.train), resolve(&data.dev)],
                vec![out_dir.join("best"), out_dir.join("metrics.jsonl")],
            );
            m.write(&out_dir)?;
            train(&cfg, &data, &out_dir)?;
            m.finish(&out_dir)
        }
        Command::Generate {
            checkpoint,
            data,
            decode,
        } => {
            let decode_cfg = apply_decode_flags(cfg.decode.clone(), &decode);
            decode_cfg.validate()?;
            let data = resolve(&data);
            let output = out_dir.join("explanations.jsonl");
            let m = manifest(
                "generate",
                json!({ "decode": decode_cfg }),
                vec![checkpoint.clone(), data.clone()],
                vec![output.clone()],
            );
            m.write(&out_dir)?;
            generate(&checkpoint, &data, &decode_cfg, &output)?;
            m.finish(&out_dir)
        }
        Command::Eval {
            data,
            checkpoint,
            explanations,
            metrics,
            task,
            probe_train,
            num_probes,
        } => {
            let data = resolve(&data);
            let output = out_dir.join("eval_report.json");
            let inputs = [Some(data.clone()), checkpoint.clone(), explanations.clone(), probe_train.clone()]
                .into_iter()
                .flatten()
                .collect();
            let m = manifest(
                "eval",
                json!({ "metrics": metrics, "probe": cfg.probe, "num_probes": num_probes }),
                inputs,
                vec![output.clone()],
            );
            m.write(&out_dir)?;
            let task = match task {
                TaskArg::Mcqa => TaskKind::Mcqa,
                TaskArg::Nli => TaskKind::Nli,
            };
            let report = evaluate(EvalInputs {
                data: &data,
                checkpoint: checkpoint.as_deref(),
                explanations: explanations.as_deref(),
                metrics: &metrics,
                task,
                probe_train: probe_train.as_deref(),
                num_probes,
                probe: &cfg.probe,
                seed: cli.seed.unwrap_or(0),
            })?;
            let text = serde_json::to_string_pretty(&report)?;
            fs::write(&output, text.clone() + "\n").with_context(|| format!("writing {}", output.display()))?;
            emit(&text);
            m.finish(&out_dir)
        }
    }
}

fn apply_decode_flags(mut cfg: DecodeConfig, flags: &DecodeArgs) -> DecodeConfig {
    if let Some(b) = flags.beams {
        cfg.beams = b;
    }
    if let Some(l) = flags.max_len {
        cfg.max_len = l;
    }
    if let Some(p) = flags.rep_penalty {
        cfg.repetition_penalty = p;
    }
    if let Some(n) = flags.num_return {
        cfg.num_return = n;
    }
    if let Some(a) = flags.length_alpha {
        cfg.length_normalization_alpha = a;
    }
    cfg
}

fn write_split(out_dir: &Path, name: &str, samples: &[Sample]) -> Result<SplitStats> {
    let path = out_dir.join(format!("{name}.jsonl"));
    match samples.first() {
        Some(Sample::Nli(_)) => {
            let rows: Vec<_> = samples
                .iter()
                .filter_map(|s| match s {
                    Sample::Nli(n) => Some(n),
                    Sample::Mcqa(_) => None,
                })
                .collect();
            write_jsonl(&path, &rows)?;
        }
        _ => {
            let rows: Vec<&McqaSample> = samples
                .iter()
                .filter_map(|s| match s {
                    Sample::Mcqa(m) => Some(m),
                    Sample::Nli(_) => None,
                })
                .collect();
            write_jsonl(&path, &rows)?;
        }
    }
    Ok(SplitStats::compute(name, samples))
}

fn prepare(
    dataset: Dataset,
    input: Option<&Path>,
    task: &CopyKeyConfig,
    n_train: usize,
    n_dev: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let need_input = || input.ok_or_else(|| anyhow!("--input (or ${DATA_DIR_ENV}) is required for {dataset:?}"));
    let mcqa = |v: Vec<McqaSample>| v.into_iter().map(Sample::Mcqa).collect::<Vec<_>>();
    let mut extra = json!({});
    let splits: Vec<(&str, Vec<Sample>)> = match dataset {
        Dataset::Synthetic => {
            let (train, dev) = task.splits(n_train, n_dev, seed)?;
            vec![("train", mcqa(train)), ("dev", mcqa(dev))]
        }
        Dataset::Cme => {
            let dir = need_input()?;
            ["train", "dev", "test"]
                .into_iter()
                .map(|s| Ok((s, mcqa(load_cme_jsonl(dir.join(format!("{s}.jsonl")))?))))
                .collect::<Result<_>>()?
        }
        Dataset::CoseV10 | Dataset::CoseV111 => {
            let dir = need_input()?;
            let version = if matches!(dataset, Dataset::CoseV10) {
                CoseVersion::V1_0
            } else {
                CoseVersion::V1_11
            };
            ["train", "dev"]
                .into_iter()
                .map(|s| Ok((s, mcqa(load_cose(dir.join(format!("{s}.jsonl")), version)?))))
                .collect::<Result<_>>()?
        }
        Dataset::Esnli => {
            let dir = need_input()?;
            let splits = load_esnli(
                &[dir.join("esnli_train_1.csv"), dir.join("esnli_train_2.csv")],
                dir.join("esnli_dev.csv"),
                dir.join("esnli_test.csv"),
            )?;
            extra = json!({ "train_raw": splits.train_raw, "train_filtered": splits.train.len() });
            let nli = |v: Vec<jointex::NliSample>| v.into_iter().map(Sample::Nli).collect::<Vec<_>>();
            vec![("train", nli(splits.train)), ("dev", nli(splits.dev)), ("test", nli(splits.test))]
        }
    };
    let mut stats = Vec::new();
    for (name, samples) in &splits {
        stats.push(write_split(out_dir, name, samples)?);
    }
    let block = json!({ "dataset": dataset, "splits": stats, "ingestion": extra });
    let path = out_dir.join("stats.json");
    fs::write(&path, serde_json::to_string_pretty(&block)? + "\n")?;
    emit(&serde_json::to_string_pretty(&block)?);
    Ok(())
}

fn train(cfg: &RunConfig, data: &DataConfig, out_dir: &Path) -> Result<()> {
    let train = load_samples(resolve(&data.train), data.task)?;
    let dev = load_samples(resolve(&data.dev), data.task)?;
    let meta = BundleMeta {
        classifier_mode: data.classifier_mode,
        generator_format: GeneratorFormat::detect(&train),
        max_seq_len: cfg.train.max_seq_len,
        ..BundleMeta::default()
    };
    let (cv, gv) = build_vocabs(&train, &meta, data.max_vocab)?;
    let mut model = cfg.model.clone();
    if let Some(first) = train.first() {
        model.num_labels = first.num_labels();
    }
    let bundle = ModelBundle::new(model, meta, cv, gv, cfg.train.seed)?;
    let out = fit(
        bundle,
        &train,
        &dev,
        &cfg.train,
        &FitOptions {
            out_dir: Some(out_dir.to_path_buf()),
        },
    )?;
    let summary = json!({
        "best_dev_accuracy": out.state.best.accuracy,
        "best_epoch": out.state.best.epoch,
        "steps": out.state.step,
        "checkpoint": out.state.best_checkpoint,
        "checkpoint_errors": out.state.checkpoint_errors,
    });
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    emit(&serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ExplanationRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    predicted_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    candidates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn generate(checkpoint: &Path, data: &Path, decode: &DecodeConfig, output: &Path) -> Result<()> {
    let (bundle, _) = load_checkpoint(checkpoint)?;
    let samples = load_samples(data, bundle.config.task)?;
    let mut records = Vec::with_capacity(samples.len());
    let mut failures = 0;
    for s in &samples {
        let predicted = predict(&bundle, std::slice::from_ref(s)).map(|p| p[0]);
        let decoded = explain(&bundle, s, decode);
        let mut rec = ExplanationRecord {
            id: s.id().to_string(),
            predicted_label: None,
            explanation: None,
            candidates: Vec::new(),
            error: None,
        };
        let mut errors = Vec::new();
        match predicted {
            Ok(p) => rec.predicted_label = Some(p),
            Err(e) => errors.push(format!("prediction: {e}")),
        }
        match decoded {
            Ok(hyps) => {
                rec.explanation = hyps.first().map(|h| h.text.clone());
                if decode.num_return > 1 {
                    rec.candidates = hyps.into_iter().map(|h| h.text).collect();
                }
            }
            Err(e) => errors.push(format!("decoding: {e}")),
        }
        if !errors.is_empty() {
            failures += 1;
            rec.error = Some(errors.join("; "));
        }
        records.push(rec);
    }
    write_jsonl(output, &records)?;
    eprintln!(
        "wrote {} records to {} ({failures} with errors)",
        records.len(),
        output.display()
    );
    Ok(())
}

fn read_explanations(path: &Path) -> Result<Vec<ExplanationRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

struct EvalInputs<'a> {
    data: &'a Path,
    checkpoint: Option<&'a Path>,
    explanations: Option<&'a Path>,
    metrics: &'a [Metric],
    task: TaskKind,
    probe_train: Option<&'a Path>,
    num_probes: usize,
    probe: &'a ProbeConfig,
    seed: u64,
}

fn evaluate(inp: EvalInputs) -> Result<EvalReport> {
    let bundle = inp.checkpoint.map(load_checkpoint).transpose()?.map(|(b, _)| b);
    let task = bundle.as_ref().map_or(inp.task, |b| b.config.task);
    let samples = load_samples(inp.data, task)?;
    let records = inp.explanations.map(read_explanations).transpose()?;
    // Explanation records aligned with the samples by id.
    let aligned = |metric: &str| -> Result<Vec<&ExplanationRecord>> {
        let records = records
            .as_ref()
            .ok_or_else(|| anyhow!("metric {metric} needs --explanations"))?;
        let by_id: std::collections::HashMap<&str, &ExplanationRecord> =
            records.iter().map(|r| (r.id.as_str(), r)).collect();
        samples
            .iter()
            .map(|s| {
                by_id
                    .get(s.id())
                    .copied()
                    .ok_or_else(|| anyhow!("metric {metric}: no explanation record for sample {}", s.id()))
            })
            .collect()
    };

    let mut report = EvalReport {
        counts: EvalCounts {
            samples: samples.len(),
            ..EvalCounts::default()
        },
        ..EvalReport::default()
    };
    let golds: Vec<usize> = samples.iter().map(Sample::label).collect();

    if inp.metrics.contains(&Metric::Accuracy) {
        let preds = match &bundle {
            Some(b) => predict(b, &samples)?,
            None => aligned("accuracy")?
                .iter()
                .map(|r| {
                    r.predicted_label
                        .ok_or_else(|| anyhow!("metric accuracy: record {} has no predicted_label", r.id))
                })
                .collect::<Result<_>>()?,
        };
        report.accuracy = Some(accuracy(&preds, &golds)?);
        report.counts.correct = Some(preds.iter().zip(&golds).filter(|(p, g)| p == g).count());
    }

    if inp.metrics.contains(&Metric::Bleu) {
        let recs = aligned("bleu")?;
        let mut cands = Vec::new();
        let mut refs = Vec::new();
        for (s, r) in samples.iter().zip(&recs) {
            let references = s.references();
            if references.is_empty() {
                continue;
            }
            cands.push(r.explanation.clone().unwrap_or_default());
            refs.push(references);
        }
        if cands.is_empty() {
            bail!("metric bleu: no sample in {} has a reference explanation", inp.data.display());
        }
        report.counts.bleu_candidates = Some(cands.len());
        report.bleu = Some(corpus_bleu(&cands, &refs)?);
    }

    if inp.metrics.contains(&Metric::AccuracyYe) {
        let recs = aligned("accuracy_ye")?;
        let probe_path = inp
            .probe_train
            .ok_or_else(|| anyhow!("metric accuracy_ye needs --probe-train"))?;
        let probe_train: Vec<McqaSample> = load_cme_jsonl(resolve(probe_path))?;
        let mut eval = Vec::new();
        for (s, r) in samples.iter().zip(&recs) {
            let Sample::Mcqa(m) = s else {
                bail!("metric accuracy_ye is defined for multiple-choice data only");
            };
            if let Some(e) = &r.explanation {
                eval.push((m.clone(), e.clone()));
            }
        }
        let sim = simulatability(&probe_train, &eval, inp.probe, inp.num_probes, inp.seed)?;
        report.counts.simulatability_samples = Some(eval.len());
        report.accuracy_ye = Some(sim.accuracy_ye);
        report.probes = sim.probes;
    }
    Ok(report)
}
