use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use mrc_core::allreduce::{scalability_report, DataParallel};
use mrc_core::corpus::{group_instances, parse_dataset, to_binary_instances, write_unified, BinaryInstance, CorpusStats, Format};
use mrc_core::decode::{
    question_accuracy, ratio_to_f64, read_scores, write_predictions, write_scores, EnsembleMethod, GroupScores, Selections,
};
use mrc_core::exec::Execution;
use mrc_core::hpo::{hyperband_schedule, random_search_schedule, read_history, run_search, Controller};
use mrc_core::synth::{keyword_task, SynthConfig, SynthStyle};
use mrc_core::tokenizer::{build_vocab, Truncation, Vocab};
use mrc_core::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use mrc_core::trainer::{
    evaluate, predict, score_groups, train, train_with, transfer_pipeline, write_trace, EncodedCorpus, Model, TraceRecord, Variant,
};
use mrc_core::{Error, Result};
use num_rational::Ratio;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "mrc", version, about = "Reading comprehension training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a source dataset to unified binary instances.
    Convert {
        #[arg(long)]
        format: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a data-statistics report.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "unified")]
        format: String,
    },
    /// Train a model; `--stage-a` files enable two-stage transfer.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Auxiliary corpora mixed with the training set for stage A.
        #[arg(long = "stage-a")]
        stage_a: Vec<PathBuf>,
        #[arg(long, default_value = "unified")]
        format: String,
    },
    /// Score a corpus with a checkpoint and report question accuracy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "unified")]
        format: String,
        /// Options selected per question; defaults to the gold count.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value = "head")]
        truncation: String,
        /// Directory for scores.jsonl and predictions.tsv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Hyper-parameter search over train settings.
    Hpo {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Continue a search from the run directory's history.
        #[arg(long)]
        resume: bool,
    },
    /// Data-parallel equivalence check and scalability report.
    AllreduceSim {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        train: PathBuf,
    },
    /// Merge score files from several runs.
    Ensemble {
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "mean")]
        method: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Unified instances carrying the gold labels.
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Generate a synthetic keyword-matching corpus.
    Synth {
        #[arg(long, default_value_t = 100)]
        questions: usize,
        #[arg(long, default_value = "exam")]
        style: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "syn")]
        prefix: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long)]
    run_dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_instances(path: &Path, format: &str) -> Result<Vec<BinaryInstance>> {
    let format: Format = format.parse()?;
    let file = File::open(path).map_err(io_err(path))?;
    Ok(parse_dataset(BufReader::new(file), format)?.into_binary())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn load_config(run: &RunArgs) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(path) = &run.config {
        c.apply_text(&fs::read_to_string(path).map_err(io_err(path))?)?;
    }
    for s in &run.set {
        c.set_assignment(s)?;
    }
    Ok(c)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// A fresh run directory holding the effective configuration.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn create(path: &Path, config: &RunConfig, resume: bool) -> Result<Self> {
        let exists = path.exists();
        if exists && !resume && fs::read_dir(path).map_err(io_err(path))?.next().is_some() {
            return Err(Error::Usage(format!("run directory {} already exists and is not empty", path.display())));
        }
        fs::create_dir_all(path).map_err(io_err(path))?;
        let dir = RunDir { path: path.to_path_buf() };
        let cfg_path = dir.file("config.txt");
        let rendered = config.render();
        if resume && cfg_path.exists() {
            let previous = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
            if previous != rendered {
                return Err(Error::Usage("resumed run has a different effective config".into()));
            }
        } else {
            fs::write(&cfg_path, rendered).map_err(io_err(&cfg_path))?;
        }
        dir.log(&format!("started {}", unix_now()))?;
        Ok(dir)
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Timestamps go only to `run.log`, never into result artifacts.
    fn log(&self, line: &str) -> Result<()> {
        let path = self.file("run.log");
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        writeln!(f, "{line}").map_err(io_err(&path))
    }
}

fn build_run_vocab(config: &RunConfig, corpora: &[&[BinaryInstance]]) -> Result<Vocab> {
    let (min_freq, max_size) = config.vocab_limits()?;
    let all: Vec<BinaryInstance> = corpora.iter().flat_map(|c| c.iter().cloned()).collect();
    build_vocab(&all, min_freq, max_size)
}

fn selections(preds: Vec<(String, BTreeSet<usize>)>) -> Selections {
    preds.into_iter().collect()
}

fn gold_of(instances: &[BinaryInstance]) -> Selections {
    group_instances(instances)
        .iter()
        .map(|g| (g.group_id.to_string(), g.gold().into_iter().collect()))
        .collect()
}

/// Scores `data`, writes scores.jsonl and predictions.tsv into `dir`, and
/// returns `(accuracy, correct, total)`.
/// `(accuracy, correct, total)` from a reduced ratio over `total` questions.
fn counts(acc: &Ratio<u64>, total: usize) -> (f64, u64, u64) {
    let total = total as u64;
    (ratio_to_f64(acc), (acc * total).to_integer(), total)
}

fn score_and_write(model: &Model, data: &EncodedCorpus, n: Option<usize>, dir: Option<&Path>) -> Result<(f64, u64, u64)> {
    let scores = score_groups(model, data, n)?;
    let preds = predict(&scores)?;
    if let Some(dir) = dir {
        write_with(&dir.join("scores.jsonl"), |w| write_scores(w, &scores))?;
        write_with(&dir.join("predictions.tsv"), |w| write_predictions(w, &preds))?;
    }
    let gold = data.gold();
    let acc = question_accuracy(&selections(preds), &gold)?;
    Ok(counts(&acc, gold.len()))
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Convert { format, input, out } => {
            let inst = read_instances(&input, &format)?;
            write_with(&out, |w| write_unified(w, &inst))?;
            Ok(format!("wrote {} instances to {}", inst.len(), out.display()))
        }
        Command::Stats { input, format } => {
            let fmt: Format = format.parse()?;
            let file = File::open(&input).map_err(io_err(&input))?;
            let parsed = parse_dataset(BufReader::new(file), fmt)?;
            Ok(CorpusStats::from_parsed(&parsed).to_string())
        }
        Command::Train { run, train: train_path, dev, stage_a, format } => cmd_train(&run, &train_path, dev.as_deref(), &stage_a, &format),
        Command::Eval {
            checkpoint,
            input,
            format,
            n,
            truncation,
            out_dir,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let trunc: Truncation = truncation.parse()?;
            let inst = read_instances(&input, &format)?;
            let data = EncodedCorpus::encode(&inst, &model.vocab, model.max_len(), trunc)?;
            if let Some(d) = &out_dir {
                fs::create_dir_all(d).map_err(io_err(d))?;
            }
            let (acc, correct, total) = score_and_write(&model, &data, n, out_dir.as_deref())?;
            Ok(format!("accuracy={acc:.6} correct={correct} total={total}"))
        }
        Command::Hpo { run, train, dev, resume } => cmd_hpo(&run, &train, &dev, resume),
        Command::AllreduceSim { run, train } => cmd_allreduce(&run, &train),
        Command::Ensemble {
            inputs,
            method,
            out,
            predictions,
            gold,
        } => {
            let method: EnsembleMethod = method.parse()?;
            let mut files = Vec::with_capacity(inputs.len());
            for p in &inputs {
                let f = File::open(p).map_err(io_err(p))?;
                files.push(read_scores(BufReader::new(f))?);
            }
            let merged = mrc_core::decode::ensemble_files(&files, method)?;
            let scores: Vec<GroupScores> = merged.iter().map(|(g, _)| g.clone()).collect();
            let preds: Vec<(String, BTreeSet<usize>)> = merged.into_iter().map(|(g, s)| (g.group_id, s)).collect();
            if let Some(p) = &out {
                write_with(p, |w| write_scores(w, &scores))?;
            }
            if let Some(p) = &predictions {
                write_with(p, |w| write_predictions(w, &preds))?;
            }
            match gold {
                Some(g) => {
                    let gold = gold_of(&read_instances(&g, "unified")?);
                    let acc = question_accuracy(&selections(preds), &gold)?;
                    let (a, correct, total) = counts(&acc, gold.len());
                    Ok(format!("accuracy={a:.6} correct={correct} total={total}"))
                }
                None => Ok(format!("merged {} groups from {} runs", scores.len(), inputs.len())),
            }
        }
        Command::Synth {
            questions,
            style,
            seed,
            prefix,
            out,
        } => {
            let style: SynthStyle = style.parse()?;
            let cfg = SynthConfig {
                questions,
                style,
                seed,
                id_prefix: prefix,
                ..SynthConfig::default()
            };
            let inst: Vec<BinaryInstance> = keyword_task(&cfg)?.iter().flat_map(to_binary_instances).collect();
            write_with(&out, |w| write_unified(w, &inst))?;
            Ok(format!("wrote {} instances to {}", inst.len(), out.display()))
        }
    }
}

fn last_accuracy(trace: &[TraceRecord]) -> String {
    trace
        .iter()
        .rev()
        .find_map(|r| r.dev_accuracy)
        .map_or_else(|| "none".into(), |a| format!("{a:.6}"))
}

fn cmd_train(run: &RunArgs, train_path: &Path, dev: Option<&Path>, stage_a: &[PathBuf], format: &str) -> Result<String> {
    let config = load_config(run)?;
    let enc = config.encoder()?;
    let tc = config.train()?;
    let target = read_instances(train_path, format)?;
    let dev_i = dev.map(|d| read_instances(d, format)).transpose()?;
    let aux: Vec<Vec<BinaryInstance>> = stage_a.iter().map(|p| read_instances(p, format)).collect::<Result<_>>()?;
    let mut sources: Vec<&[BinaryInstance]> = vec![&target];
    sources.extend(aux.iter().map(Vec::as_slice));
    let vocab = build_run_vocab(&config, &sources)?;
    let dir = RunDir::create(&run.run_dir, &config, false)?;

    let (model, steps, trace) = if aux.is_empty() {
        let mut model = Model::new(tc.variant, enc, vocab)?;
        let data = EncodedCorpus::encode(&target, &model.vocab, tc.max_len, tc.truncation)?;
        let dv = dev_i.as_ref().map(|d| EncodedCorpus::encode(d, &model.vocab, tc.max_len, tc.truncation)).transpose()?;
        let out = train(&tc, &mut model, &data, dv.as_ref())?;
        (model, out.steps_run, out.trace)
    } else {
        let ca = config.stage_a()?;
        let mut corpora = aux.clone();
        corpora.push(target.clone());
        let model = Model::new(Variant::Binary, enc, vocab)?;
        let out = transfer_pipeline(model, &corpora, &target, dev_i.as_deref(), &ca, &tc, Some(&dir.path))?;
        write_with(&dir.file("stage_a_trace.jsonl"), |w| write_trace(w, &out.stage_a.trace))?;
        (out.model, out.stage_b.steps_run, out.stage_b.trace)
    };
    write_with(&dir.file("trace.jsonl"), |w| write_trace(w, &trace))?;
    save_checkpoint(&model, &dir.file("model.ckpt"))?;
    let mut line = format!("steps={steps} variant={} dev_accuracy={}", model.variant(), last_accuracy(&trace));
    if let Some(d) = &dev_i {
        let data = EncodedCorpus::encode(d, &model.vocab, tc.max_len, tc.truncation)?;
        let (acc, correct, total) = score_and_write(&model, &data, None, Some(&dir.path))?;
        line = format!("steps={steps} variant={} dev_accuracy={acc:.6} correct={correct} total={total}", model.variant());
    }
    dir.log(&format!("finished {}", unix_now()))?;
    Ok(line)
}

fn cmd_hpo(run: &RunArgs, train_path: &Path, dev_path: &Path, resume: bool) -> Result<String> {
    let config = load_config(run)?;
    let enc = config.encoder()?;
    let tc = config.train()?;
    let space = config.search_space()?;
    let (max_budget, eta, random_trials, slots, seed) = config.hpo_numbers()?;
    let schedule = match config.hpo_method()?.as_str() {
        "hyperband" => hyperband_schedule(max_budget, eta)?,
        "random" => random_search_schedule(random_trials, max_budget),
        other => return Err(Error::Config(format!("hpo.method must be hyperband or random, got `{other}`"))),
    };
    let train_i = read_instances(train_path, "unified")?;
    let dev_i = read_instances(dev_path, "unified")?;
    let vocab = build_run_vocab(&config, &[&train_i])?;
    let data = EncodedCorpus::encode(&train_i, &vocab, tc.max_len, tc.truncation)?;
    let dev = EncodedCorpus::encode(&dev_i, &vocab, tc.max_len, tc.truncation)?;
    let dir = RunDir::create(&run.run_dir, &config, resume)?;

    let history_path = dir.file("history.jsonl");
    let previous = if resume && history_path.exists() {
        read_history(BufReader::new(File::open(&history_path).map_err(io_err(&history_path))?))?
    } else {
        Vec::new()
    };

    // warmup is capped at the trial budget
    let objective = |trial: &mrc_core::hpo::Config, budget: f64| -> Result<f64> {
        let mut c = config.with_trial(trial)?.train()?;
        let steps = budget.ceil().max(1.0) as u64;
        c.total_steps = steps;
        c.warmup_steps = c.warmup_steps.min(steps);
        c.eval_interval = steps;
        c.stop_at_accuracy = None;
        c.validate()?;
        let mut model = Model::new(c.variant, enc.clone(), vocab.clone())?;
        train(&c, &mut model, &data, None)?;
        evaluate(&model, &dev)
    };
    let mut sink = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&history_path)
            .map_err(io_err(&history_path))?,
    );
    let outcome = {
        let mut controller = Controller::new(slots, &objective)?.with_history(&previous).with_sink(&mut sink);
        run_search(&space, &schedule, seed, &mut controller)?
    };
    sink.flush().map_err(io_err(&history_path))?;
    write_with(&dir.file("ranking.jsonl"), |w| {
        for t in &outcome.ranking {
            serde_json::to_writer(&mut *w, t)?;
            writeln!(w)?;
        }
        Ok(())
    })?;
    dir.log(&format!("finished {} evaluations_run={}", unix_now(), outcome.evaluations_run))?;
    let best = outcome.ranking.first().ok_or_else(|| Error::Search("no trials were run".into()))?;
    Ok(format!(
        "best trial={} metric={} budget={} config={}",
        best.trial_id,
        best.metric.map_or_else(|| "none".into(), |m| format!("{m:.6}")),
        best.budget,
        serde_json::to_string(&best.config).unwrap_or_default()
    ))
}

fn cmd_allreduce(run: &RunArgs, train_path: &Path) -> Result<String> {
    let config = load_config(run)?;
    let enc = config.encoder()?;
    let tc = config.train()?;
    let workers = config.workers()?;
    let train_i = read_instances(train_path, "unified")?;
    let vocab = build_run_vocab(&config, &[&train_i])?;
    let model = Model::new(tc.variant, enc, vocab)?;
    let data = EncodedCorpus::encode(&train_i, &model.vocab, tc.max_len, tc.truncation)?;
    let dir = RunDir::create(&run.run_dir, &config, false)?;
    let n_params = model.store.num_scalars();

    // train.batch_size is per worker; k workers share a global batch of k times that
    let mut measured = Vec::new();
    let mut worst: f64 = 0.0;
    let mut equivalence = Vec::new();
    for &k in &workers {
        let mut cfg = tc.clone();
        cfg.batch_size = tc.batch_size * k;
        cfg.eval_interval = 1;
        let mut single = model.clone();
        let oracle: Vec<f64> = train_with(Execution::default(), &cfg, &mut single, &data, None)?.trace.iter().map(|r| r.loss).collect();
        let mut dp = DataParallel::new(&model, k, &cfg, Execution::default())?;
        let units = data.units(cfg.variant);
        let mut sampler = mrc_core::trainer::batching::EpochSampler::new(units.len(), cfg.seed)?;
        let mut compute = 0.0;
        let mut rel: f64 = 0.0;
        for expected in &oracle {
            let batch: Vec<_> = sampler.next_batch(cfg.batch_size).into_iter().map(|i| units[i]).collect();
            let loss = dp.step(&data, &batch)?;
            compute += dp.last_compute_seconds.iter().cloned().fold(0.0, f64::max);
            rel = rel.max((loss - expected).abs() / expected.abs().max(f64::MIN_POSITIVE));
        }
        if rel > 1e-7 {
            return Err(Error::Consistency(format!("{k} workers deviate from single-replica training by {rel:.3e} relative")));
        }
        worst = worst.max(rel);
        equivalence.push(serde_json::json!({"k": k, "steps": oracle.len(), "max_rel_loss_diff": rel}));
        measured.push((k, compute / oracle.len().max(1) as f64));
    }
    let base = measured.iter().find(|(k, _)| *k == 1).map_or(measured[0].1, |m| m.1);
    let cost = config.cost_model(base)?;
    let report = scalability_report(&cost, n_params, &measured);
    write_with(&dir.file("equivalence.jsonl"), |w| {
        for e in &equivalence {
            serde_json::to_writer(&mut *w, e)?;
            writeln!(w)?;
        }
        Ok(())
    })?;
    write_with(&dir.file("scalability.jsonl"), |w| {
        for r in &report {
            serde_json::to_writer(&mut *w, r)?;
            writeln!(w)?;
        }
        Ok(())
    })?;
    dir.log(&format!("finished {}", unix_now()))?;
    Ok(format!("equivalent workers={workers:?} max_rel_loss_diff={worst:.3e} params={n_params}"))
}
