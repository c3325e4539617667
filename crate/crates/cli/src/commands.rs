//! Subcommand implementations. Each writes only under its `--out`
//! directory and finishes by writing the run manifest there.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ftm_core::bench::{add_reductions, bench_inference, format_bench_table, time_exponents, write_bench_csv, BenchRow};
use ftm_core::metrics::{
    det_curve, early_mitigation_curve, far_at_frr, format_records, labelled, preset_frr, report_at,
    write_det_csv, write_mitigation_csv, write_records_csv, MetricRecord,
};
use ftm_core::summary::write_trajectories_csv;
use ftm_core::synth::{generate, read_corpus, write_corpus, CorpusSpec, Split, Utterance};
use ftm_core::train::{write_holdout_csv, write_log_csv, TrainOutcome};
use ftm_core::{init_params, Bound, FtmError, Invocation, ModelConfig, ParamStore, Result, SummaryKind};
use serde::{Deserialize, Serialize};

use crate::config::{check_model_fits_corpus, parse_train_sets, resolve, RunConfig};
use crate::manifest::{prepare_out_dir, RunManifest, RUN_MANIFEST};
use crate::pipeline;

pub const CORPUS_SPEC_FILE: &str = "corpus.toml";
pub const PRETRAINED_FILE: &str = "pretrain.ftmc";
pub const MODEL_FILE: &str = "model.ftmc";

#[derive(Debug, Parser)]
#[command(name = "ftm", version, about = "Streaming false-trigger mitigation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData(GenDataArgs),
    /// Pre-train the phonetic encoder and fine-tune one summary head.
    Train(TrainArgs),
    /// Score a corpus split and report EER and FAR at the operating point.
    Eval(EvalArgs),
    /// Measure inference peak memory and latency per kind and length.
    Bench(BenchArgs),
    /// Export per-utterance decision trajectories.
    Traj(TrajArgs),
    /// Train and evaluate every (train sets, summary kind) pair.
    Matrix(MatrixArgs),
}

/// Options shared by every command that reads the layered config.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML config with [corpus], [model] and [train] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        resolve(self.config.as_deref(), std::env::vars(), &self.sets)
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; must be empty unless --force is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Corpus directory written by gen-data.
    #[arg(long, required_unless_present = "manifest")]
    pub corpus: Option<PathBuf>,
    /// Summary head: stcn, slstm, save or a2a.
    #[arg(long)]
    pub kind: Option<SummaryKind>,
    /// `vt`, `tb` or `vt+tb`.
    #[arg(long)]
    pub train_sets: Option<String>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reuse a pre-trained checkpoint instead of pre-training.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Rerun exactly the run recorded in this manifest.
    #[arg(long, conflicts_with_all = ["config", "sets", "corpus", "kind", "train_sets", "seed", "pretrained"])]
    pub manifest: Option<PathBuf>,
    /// Output directory; must be empty unless --force is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory. Nothing is deleted.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Training output directory, or a checkpoint file together with --config.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Operating point preset for every eval set; by default each
    /// invocation uses its own preset.
    #[arg(long)]
    pub op: Option<Invocation>,
    /// Corpus split to score: train or eval.
    #[arg(long, default_value = "eval")]
    pub split: Split,
    /// Label recorded in the train_sets column.
    #[arg(long)]
    pub train_tag: Option<String>,
    /// Output directory; must be empty unless --force is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory. Nothing is deleted.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Training output directory whose weights to use; random weights
    /// otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_values = ["stcn", "slstm", "save", "a2a"])]
    pub kinds: Vec<SummaryKind>,
    /// Input lengths in model frames.
    #[arg(long, value_delimiter = ',', default_values = ["134"])]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory; must be empty unless --force is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory. Nothing is deleted.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrajArgs {
    /// Training output directory or a model.ftmc file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Corpus split to score: train or eval.
    #[arg(long, default_value = "eval")]
    pub split: Split,
    /// Output directory; must be empty unless --force is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory. Nothing is deleted.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct MatrixArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_values = ["stcn", "slstm", "save", "a2a"])]
    pub kinds: Vec<SummaryKind>,
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Output directory; must be empty unless --force is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory. Nothing is deleted.
    #[arg(long)]
    pub force: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a).map(drop),
        Command::Train(a) => train(&a).map(drop),
        Command::Eval(a) => eval(&a).map(drop),
        Command::Bench(a) => bench(&a).map(drop),
        Command::Traj(a) => traj(&a).map(drop),
        Command::Matrix(a) => matrix(&a).map(drop),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Reads a corpus directory and the spec it was generated from.
pub fn load_corpus(dir: &Path) -> Result<(CorpusSpec, Vec<Utterance>)> {
    let path = dir.join(CORPUS_SPEC_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| FtmError::Data(format!("{}: {e}", path.display())))?;
    let spec: CorpusSpec = toml::from_str(&text).map_err(|e| FtmError::Data(format!("{}: {e}", path.display())))?;
    let corpus = read_corpus(dir, spec.phone_alphabet)?;
    Ok((spec, corpus))
}

pub fn gen_data(a: &GenDataArgs) -> Result<RunManifest> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(seed) = a.seed {
        cfg.corpus.seed = seed;
    }
    cfg.validate()?;
    prepare_out_dir(&a.out, a.force)?;
    let corpus = generate(&cfg.corpus)?;
    write_corpus(&a.out, &corpus)?;
    let spec = toml::to_string(&cfg.corpus).map_err(|e| FtmError::Config(e.to_string()))?;
    std::fs::write(a.out.join(CORPUS_SPEC_FILE), spec)?;
    let seed = cfg.corpus.seed;
    let m = RunManifest::new("gen-data", cfg, seed)
        .option("utterances", corpus.len())
        .finish(&a.out)?;
    println!("wrote {} utterances to {} (hash {})", corpus.len(), a.out.display(), m.output_hash);
    Ok(m)
}

fn save_outcome(out: &Path, prefix: &str, file: &str, o: &TrainOutcome) -> Result<()> {
    o.params.save(&out.join(file))?;
    write_log_csv(create(&out.join(format!("{prefix}_log.csv")))?, &o.log)?;
    write_holdout_csv(create(&out.join(format!("{prefix}_holdout.csv")))?, &o.holdout)?;
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<RunManifest> {
    let (cfg, corpus_dir, pretrained) = match &a.manifest {
        Some(path) => {
            let m = RunManifest::load(path)?;
            if m.command != "train" {
                return Err(FtmError::Config(format!("{} records a {} run", path.display(), m.command)));
            }
            m.check_inputs()?;
            let corpus = m.inputs.get("corpus").cloned().ok_or_else(|| FtmError::Data("manifest lacks the corpus input".into()))?;
            (m.config, corpus, m.inputs.get("pretrained").cloned())
        }
        None => {
            let mut cfg = a.cfg.resolve()?;
            if let Some(kind) = a.kind {
                cfg.model.summary_kind = kind;
            }
            if let Some(sets) = &a.train_sets {
                cfg.train.train_sets = parse_train_sets(sets)?;
            }
            if let Some(seed) = a.seed {
                cfg.train.seed = seed;
            }
            let corpus = a.corpus.clone().expect("clap requires --corpus without --manifest");
            (cfg, corpus, a.pretrained.clone())
        }
    };
    let (spec, corpus) = load_corpus(&corpus_dir)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    check_model_fits_corpus(&cfg.model, &spec)?;
    // The corpus on disk is authoritative; record its spec in the snapshot.
    let cfg = RunConfig { corpus: spec.clone(), ..cfg };
    prepare_out_dir(&a.out, a.force)?;

    let pre = match &pretrained {
        Some(path) => ParamStore::<f32>::load(path)?,
        None => {
            log::info!("pre-training for {} steps", cfg.train.pretrain_steps);
            let o = pipeline::pretrain(&cfg.model, &cfg.train, &spec, &corpus)?;
            save_outcome(&a.out, "pretrain", PRETRAINED_FILE, &o)?;
            o.params
        }
    };
    log::info!("fine-tuning {} on {} for {} steps", cfg.model.summary_kind, cfg.train.train_tag(), cfg.train.finetune_steps);
    let o = pipeline::finetune(&cfg.model, &cfg.train, &spec, &corpus, &pre)?;
    save_outcome(&a.out, "train", MODEL_FILE, &o)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml()?)?;

    let seed = cfg.train.seed;
    let kind = cfg.model.summary_kind;
    let tag = cfg.train.train_tag();
    let mut m = RunManifest::new("train", cfg, seed)
        .option("kind", kind)
        .option("train_sets", tag)
        .option("best_step", o.best_step)
        .input("corpus", &corpus_dir)?;
    if let Some(p) = &pretrained {
        m = m.input("pretrained", p)?;
    }
    let m = m.finish(&a.out)?;
    println!("checkpoint {} (best step {})", a.out.join(MODEL_FILE).display(), o.best_step);
    Ok(m)
}

/// Model config, weights and train tag of a checkpoint: a training
/// directory with its manifest, or a file interpreted with the config layers.
pub fn load_checkpoint(path: &Path, cfg: &ConfigArgs) -> Result<(ModelConfig, ParamStore<f32>, String)> {
    let (model, file, tag) = if path.is_dir() {
        let m = RunManifest::load(&path.join(RUN_MANIFEST))?;
        let tag = m.config.train.train_tag();
        (m.config.model, path.join(MODEL_FILE), tag)
    } else {
        let c = cfg.resolve()?;
        let tag = c.train.train_tag();
        (c.model, path.to_path_buf(), tag)
    };
    model.validate()?;
    let params = ParamStore::<f32>::load(&file)?;
    ftm_core::model::check_compatible(&model, &params)?;
    Ok((model, params, tag))
}

pub fn eval(a: &EvalArgs) -> Result<Vec<MetricRecord>> {
    let (model, params, tag) = load_checkpoint(&a.checkpoint, &a.cfg)?;
    let tag = a.train_tag.clone().unwrap_or(tag);
    let (spec, corpus) = load_corpus(&a.corpus)?;
    check_model_fits_corpus(&model, &spec)?;
    prepare_out_dir(&a.out, a.force)?;
    let kind = model.summary_kind;
    let results = a.out.join("results");
    let mut records = Vec::new();
    for inv in Invocation::ALL {
        if !corpus.iter().any(|u| u.split == a.split && u.invocation == inv) {
            continue;
        }
        let scored = pipeline::score_split(&model, &params, &spec, &corpus, a.split, inv)?;
        let frr = preset_frr(a.op.unwrap_or(inv));
        let lab = labelled(&scored);
        let op = far_at_frr(&lab, frr)?;
        if let Some(w) = &op.warning {
            log::warn!("{inv}: {w}");
        }
        records.extend(report_at(&scored, inv, &tag, kind, frr)?);
        write_det_csv(create(&results.join(format!("det_{inv}.csv")))?, &det_curve(&lab)?)?;
        if kind.is_streaming() {
            let undirected: Vec<_> = scored.iter().filter(|s| !s.directed).cloned().collect();
            if !undirected.is_empty() {
                let curve = early_mitigation_curve(&undirected, op.threshold, spec.frame_period_ms())?;
                write_mitigation_csv(create(&results.join(format!("early_mitigation_{inv}.csv")))?, &curve)?;
            }
        }
    }
    if records.is_empty() {
        return Err(FtmError::Data(format!("no {} utterances in {}", a.split.name(), a.corpus.display())));
    }
    write_records_csv(create(&results.join("metrics.csv"))?, &records)?;
    print!("{}", format_records(&records));
    let cfg = RunConfig {
        corpus: spec,
        model,
        ..RunConfig::default()
    };
    let seed = cfg.corpus.seed;
    let mut m = RunManifest::new("eval", cfg, seed)
        .option("split", a.split.name())
        .option("train_tag", tag)
        .input("checkpoint", &a.checkpoint)?
        .input("corpus", &a.corpus)?;
    if let Some(op) = a.op {
        m = m.option("op", op);
    }
    m.finish(&a.out)?;
    Ok(records)
}

pub fn traj(a: &TrajArgs) -> Result<usize> {
    let (model, params, _) = load_checkpoint(&a.checkpoint, &a.cfg)?;
    if !model.summary_kind.is_streaming() {
        return Err(FtmError::Config(format!("{} emits no decision trajectory", model.summary_kind)));
    }
    let (spec, corpus) = load_corpus(&a.corpus)?;
    check_model_fits_corpus(&model, &spec)?;
    prepare_out_dir(&a.out, a.force)?;
    let mut scored = Vec::new();
    for inv in Invocation::ALL {
        if corpus.iter().any(|u| u.split == a.split && u.invocation == inv) {
            scored.extend(pipeline::score_split(&model, &params, &spec, &corpus, a.split, inv)?);
        }
    }
    write_trajectories_csv(
        create(&a.out.join("results").join("trajectories.csv"))?,
        scored.iter().map(|s| (s.id.as_str(), &s.trajectory)),
        spec.frame_period_ms(),
    )?;
    let cfg = RunConfig {
        corpus: spec,
        model,
        ..RunConfig::default()
    };
    let seed = cfg.corpus.seed;
    RunManifest::new("traj", cfg, seed)
        .option("split", a.split.name())
        .input("checkpoint", &a.checkpoint)?
        .input("corpus", &a.corpus)?
        .finish(&a.out)?;
    println!("{} trajectories", scored.len());
    Ok(scored.len())
}

pub fn bench(a: &BenchArgs) -> Result<Vec<BenchRow>> {
    let (base, trained) = match &a.checkpoint {
        Some(path) => {
            let (model, params, _) = load_checkpoint(path, &a.cfg)?;
            (model, Some(params))
        }
        None => (a.cfg.resolve()?.model, None),
    };
    if a.kinds.is_empty() || a.lengths.is_empty() {
        return Err(FtmError::Config("bench needs at least one kind and one length".into()));
    }
    prepare_out_dir(&a.out, a.force)?;
    let mut rows = Vec::new();
    for &kind in &a.kinds {
        let cfg = base.clone().with_kind(kind);
        let mut params = init_params::<f32>(&cfg, a.seed)?;
        if let Some(t) = &trained {
            for prefix in ["enc.", "phone.", kind.head_prefix()] {
                params.copy_prefix_from(t, prefix);
            }
        }
        let bound = Bound::new(&params, false);
        for &t in &a.lengths {
            log::info!("bench {kind} T={t}");
            rows.push(bench_inference(&cfg, &bound, kind, t, a.repeats, a.seed)?);
        }
    }
    add_reductions(&mut rows);
    write_bench_csv(create(&a.out.join("results").join("bench.csv"))?, &rows)?;
    print!("{}", format_bench_table(&rows));
    for (kind, slope) in time_exponents(&rows) {
        println!("{kind}: latency ~ T^{slope:.2}");
    }
    let cfg = RunConfig {
        model: base,
        ..RunConfig::default()
    };
    let join = |v: Vec<String>| v.join(",");
    let mut m = RunManifest::new("bench", cfg, a.seed)
        .option("kinds", join(a.kinds.iter().map(|k| k.to_string()).collect()))
        .option("lengths", join(a.lengths.iter().map(|t| t.to_string()).collect()))
        .option("repeats", a.repeats);
    if let Some(p) = &a.checkpoint {
        m = m.input("checkpoint", p)?;
    }
    m.finish(&a.out)?;
    Ok(rows)
}

/// One cell of the accuracy matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub train_sets: String,
    pub kind: SummaryKind,
    pub eval: Invocation,
    pub eer: f64,
    pub frr_target: f64,
    pub far_at_frr: f64,
    pub achieved_frr: f64,
    pub threshold: f64,
}

pub fn matrix(a: &MatrixArgs) -> Result<Vec<MatrixRow>> {
    let cfg = a.cfg.resolve()?;
    let (spec, corpus) = load_corpus(&a.corpus)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    check_model_fits_corpus(&cfg.model, &spec)?;
    let cfg = RunConfig { corpus: spec.clone(), ..cfg };
    if a.kinds.is_empty() {
        return Err(FtmError::Config("matrix needs at least one kind".into()));
    }
    prepare_out_dir(&a.out, a.force)?;
    std::fs::create_dir_all(a.out.join("models"))?;
    let pre = match &a.pretrained {
        Some(p) => ParamStore::<f32>::load(p)?,
        None => {
            let o = pipeline::pretrain(&cfg.model, &cfg.train, &spec, &corpus)?;
            save_outcome(&a.out.join("models"), "pretrain", PRETRAINED_FILE, &o)?;
            o.params
        }
    };
    let mut rows = Vec::new();
    for sets in pipeline::matrix_train_sets() {
        let tc = ftm_core::TrainConfig {
            train_sets: sets.clone(),
            ..cfg.train.clone()
        };
        let tag = tc.train_tag();
        for &kind in &a.kinds {
            let model = cfg.model.clone().with_kind(kind);
            log::info!("matrix: {kind} on {tag}");
            let o = pipeline::finetune(&model, &tc, &spec, &corpus, &pre)?;
            let name = format!("{}-{}", tag.replace('+', "_"), kind.name());
            save_outcome(&a.out.join("models"), &name, &format!("{name}.ftmc"), &o)?;
            for inv in Invocation::ALL {
                let scored = pipeline::score_split(&model, &o.params, &spec, &corpus, Split::Eval, inv)?;
                let lab = labelled(&scored);
                let frr_target = preset_frr(inv);
                let op = far_at_frr(&lab, frr_target)?;
                rows.push(MatrixRow {
                    train_sets: tag.clone(),
                    kind,
                    eval: inv,
                    eer: ftm_core::eer(&lab)?,
                    frr_target,
                    far_at_frr: op.far,
                    achieved_frr: op.frr,
                    threshold: op.threshold,
                });
            }
        }
    }
    let mut w = csv::Writer::from_writer(create(&a.out.join("results").join("matrix.csv"))?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    println!("{:<8} {:<6} {:<5} {:>8} {:>10}", "train", "kind", "eval", "eer", "far@frr");
    for r in &rows {
        println!("{:<8} {:<6} {:<5} {:>8.4} {:>10.4}", r.train_sets, r.kind.name(), r.eval.name(), r.eer, r.far_at_frr);
    }
    let seed = cfg.train.seed;
    let mut m = RunManifest::new("matrix", cfg, seed).input("corpus", &a.corpus)?;
    if let Some(p) = &a.pretrained {
        m = m.input("pretrained", p)?;
    }
    m.finish(&a.out)?;
    Ok(rows)
}
