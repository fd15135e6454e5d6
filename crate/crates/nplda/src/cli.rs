//! Command-line surface: synthesize data, sample trials, estimate the
//! generative baseline, train discriminative back-ends, score, evaluate
//! and calibrate. Every command is deterministic given its flags and
//! seed, and every command that writes files drops a JSON manifest next
//! to its primary output.

use crate::baselines::{dplda_init_from_plda, DpldaModel};
use crate::error::Error;
use crate::io::{
    load_embeddings, load_scores, load_trials, trial_targets, write_embeddings, write_scores,
    write_trials, EmbeddingSet, ScoreSet, Trial,
};
use crate::losses::SoftCostConfig;
use crate::metrics::{
    actual_c_primary, affine_calibrate, apply_affine, eer, min_c_norm, min_c_primary, BETA1, BETA2,
};
use crate::model_io::{load_model, save_model, Model};
use crate::neural::{forward_batch, init_from_generative, init_random};
use crate::pipeline::{DpldaPipeline, GbPipeline, GenerativePipeline};
use crate::plda::{derive_pq, estimate_plda, random_population, sample_structured, score_pair, PopulationShifts};
use crate::preprocess::Preprocessor;
use crate::trainer::{
    sample_training_trials, train, validate, LossKind, RegScores, TrainConfig, TrainableModel,
};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "nplda",
    version,
    about = "Speaker-verification back-end toolkit: PLDA, pairwise discriminative scoring, metrics and calibration"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding set from a random population model
    Synth(SynthArgs),
    /// Sample labeled trials matched by gender and source
    SampleTrials(SampleTrialsArgs),
    /// Estimate centering + LDA + PLDA from labeled embeddings
    EstimatePlda(EstimateArgs),
    /// Train a discriminative back-end
    Train(TrainArgs),
    /// Score a trial list with a saved model
    Score(ScoreArgs),
    /// Report EER and detection costs for a score file
    Eval(EvalArgs),
    /// Fit and apply an affine score calibration
    Calibrate(CalibrateArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Number of speakers
    #[arg(long)]
    speakers: usize,
    /// Sessions per speaker
    #[arg(long)]
    sessions: usize,
    /// Embedding dimension
    #[arg(long)]
    dim: usize,
    /// Speaker-subspace rank of the population model
    #[arg(long)]
    rank: usize,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the population model itself; defaults to --seed so one
    /// population can be sampled repeatedly with different --seed values
    #[arg(long)]
    population_seed: Option<u64>,
    /// Scale factor on the residual covariance, for train/eval mismatch
    #[arg(long, default_value_t = 1.0)]
    residual_scale: f64,
    /// Magnitude of a per-gender population mean offset
    #[arg(long, default_value_t = 0.0)]
    gender_offset: f64,
    /// Magnitude of a per-source session offset
    #[arg(long, default_value_t = 0.0)]
    source_offset: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SampleTrialsArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Number of same-speaker trials
    #[arg(long)]
    targets: usize,
    /// Number of cross-speaker trials (matched by gender and source)
    #[arg(long)]
    nontargets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EstimateArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// LDA output dimension; defaults to embedding-dim / 3
    #[arg(long)]
    lda_dim: Option<usize>,
    /// PLDA speaker-subspace rank; defaults to lda-dim / 2
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
enum BackendArg {
    Nplda,
    Dplda,
    Gb,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
enum InitArg {
    Generative,
    Random,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long, value_enum)]
    backend: BackendArg,
    #[arg(long, value_enum, default_value = "generative")]
    init: InitArg,
    /// bce | bce-reg | soft-cprimary | soft-bce
    #[arg(long, default_value = "soft-cprimary")]
    loss: String,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    val_trials: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Generative pipeline model (required for --init generative, for
    /// the dplda/gb preprocessing, and for bce-reg reference scores)
    #[arg(long)]
    plda_model: Option<PathBuf>,
    /// Layer width for --backend nplda --init random; defaults to dim/3
    #[arg(long)]
    lda_dim: Option<usize>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 4096)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Sigmoid sharpness of the soft detection cost
    #[arg(long, default_value_t = 20.0)]
    alpha: f64,
    /// Weight of the score-regression regularizer (bce-reg)
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// BCE weight in the mixed soft-bce objective
    #[arg(long, default_value_t = 0.1)]
    bce_weight: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write a model checkpoint here every epoch
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Labeled trial list aligned with the score file
    #[arg(long)]
    trials: PathBuf,
    /// Emit the report as TSV instead of aligned text
    #[arg(long)]
    tsv: bool,
    /// Also write the report to a file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct CalibrateArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Labeled trial list aligned with the score file
    #[arg(long)]
    trials: PathBuf,
    /// Where the calibrated scores go
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

fn write_manifest(
    primary_out: &Path,
    command: &str,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let path = primary_out.with_extension(format!(
        "{}manifest.json",
        primary_out
            .extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing manifest {}", path.display()))?;
    Ok(())
}

fn load_labeled(scores_path: &Path, trials_path: &Path) -> Result<ScoreSet> {
    let scores = load_scores(scores_path)?;
    let trials = load_trials(trials_path)?;
    Ok(scores.with_labels_from(&trials)?)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let population_seed = a.population_seed.unwrap_or(a.seed);
    let mut population = random_population(a.dim, a.rank, population_seed)?;
    if a.residual_scale <= 0.0 {
        bail!("--residual-scale must be positive");
    }
    population.sigma *= a.residual_scale;
    // shift directions come from the population seed so sets sampled
    // from one population share them
    let shifts = PopulationShifts::random(a.dim, a.gender_offset, a.source_offset, population_seed);
    let set = sample_structured(&population, a.speakers, a.sessions, &shifts, a.seed)?;
    write_embeddings(&a.out, &set)?;
    write_manifest(
        &a.out,
        "synth",
        Some(a.seed),
        serde_json::to_value(a)?,
        &[],
        &[&a.out],
    )?;
    println!(
        "wrote {} embeddings of dimension {} to {}",
        set.len(),
        set.dim(),
        a.out.display()
    );
    Ok(())
}

fn cmd_sample_trials(a: &SampleTrialsArgs) -> Result<()> {
    let set = load_embeddings(&a.embeddings)?;
    let trials = sample_training_trials(&set, a.targets, a.nontargets, a.seed)?;
    write_trials(&a.out, &trials)?;
    write_manifest(
        &a.out,
        "sample-trials",
        Some(a.seed),
        serde_json::to_value(a)?,
        &[&a.embeddings],
        &[&a.out],
    )?;
    println!(
        "wrote {} trials ({} target, {} nontarget) to {}",
        trials.len(),
        a.targets,
        a.nontargets,
        a.out.display()
    );
    Ok(())
}

fn cmd_estimate(a: &EstimateArgs) -> Result<()> {
    let set = load_embeddings(&a.embeddings)?;
    let lda_dim = a.lda_dim.unwrap_or((set.dim() / 3).max(1));
    let rank = a.rank.unwrap_or((lda_dim / 2).max(1));
    let preproc = Preprocessor::estimate(&set, lda_dim)?;
    let processed = preproc.apply_set(&set)?;
    let plda = estimate_plda(&processed, rank)?;
    let model = Model::GenerativePipeline(GenerativePipeline { preproc, plda });
    save_model(&a.out, &model)?;
    write_manifest(
        &a.out,
        "estimate-plda",
        None,
        serde_json::to_value(a)?,
        &[&a.embeddings],
        &[&a.out],
    )?;
    println!(
        "estimated generative pipeline (D={} d={lda_dim} r={rank}) -> {}",
        set.dim(),
        a.out.display()
    );
    Ok(())
}

fn load_generative_pipeline(path: &Path) -> Result<GenerativePipeline> {
    match load_model(path)? {
        Model::GenerativePipeline(p) => Ok(p),
        other => bail!(
            "{} holds a {} model, expected a generative pipeline",
            path.display(),
            other.kind()
        ),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let set = load_embeddings(&a.embeddings)?;
    let trials = load_trials(&a.trials)?;
    let val_trials = load_trials(&a.val_trials)?;
    let loss = LossKind::parse(&a.loss)?;

    let pipeline = a
        .plda_model
        .as_ref()
        .map(|p| load_generative_pipeline(p))
        .transpose()?;
    let needs_pipeline = a.init == InitArg::Generative
        || a.backend != BackendArg::Nplda
        || loss == LossKind::BceReg;
    if needs_pipeline && pipeline.is_none() {
        bail!("this configuration needs --plda-model (generative pipeline file)");
    }

    let cfg = TrainConfig {
        batch_size: a.batch_size,
        lr: a.lr,
        momentum: a.momentum,
        max_epochs: a.epochs,
        seed: a.seed,
        loss,
        soft: SoftCostConfig {
            alpha: a.alpha,
            lambda_reg: a.lambda,
            ..SoftCostConfig::default()
        },
        bce_mix_weight: a.bce_weight,
        min_lr: 1e-6,
        checkpoint_dir: a.checkpoint_dir.clone(),
    };

    let reg = if loss == LossKind::BceReg {
        let p = pipeline.as_ref().expect("checked above");
        Some(RegScores {
            train: p.score_trials(&trials, &set)?.scores().to_vec(),
            val: p.score_trials(&val_trials, &set)?.scores().to_vec(),
        })
    } else {
        None
    };

    // pairwise Gaussian: closed-form estimation, no gradient loop
    if a.backend == BackendArg::Gb {
        let p = pipeline.expect("checked above");
        let processed = p.preproc.apply_set(&set)?;
        let gb = crate::baselines::gb_estimate(&trials, &processed)?;
        let model = Model::PairwiseGb(GbPipeline {
            preproc: p.preproc,
            model: gb,
        });
        save_model(&a.out, &model)?;
        let val_scores = match &model {
            Model::PairwiseGb(gp) => gp.score_trials(&val_trials, &set)?,
            _ => unreachable!(),
        };
        let (minc, _, _) = min_c_primary(&val_scores)?;
        crate::trainer::TrainHistory::default().write_tsv(&history_path(&a.out))?;
        train_manifest(a)?;
        println!("estimated pairwise gaussian back-end -> {}", a.out.display());
        println!("validation min_c_primary {minc:.5}");
        return Ok(());
    }

    let init_model = match (a.backend, a.init) {
        (BackendArg::Nplda, InitArg::Generative) => {
            let p = pipeline.as_ref().expect("checked above");
            TrainableModel::Neural(init_from_generative(&p.preproc.mean, &p.preproc.lda, &p.plda)?)
        }
        (BackendArg::Nplda, InitArg::Random) => {
            let d = a.lda_dim.unwrap_or((set.dim() / 3).max(1));
            TrainableModel::Neural(init_random(set.dim(), d, a.seed)?)
        }
        (BackendArg::Dplda, InitArg::Generative) => {
            let p = pipeline.as_ref().expect("checked above");
            let pq = derive_pq(&p.plda)?;
            TrainableModel::Dplda(DpldaPipeline {
                preproc: p.preproc.clone(),
                center: p.plda.mu.clone(),
                model: dplda_init_from_plda(&pq),
            })
        }
        (BackendArg::Dplda, InitArg::Random) => {
            let p = pipeline.as_ref().expect("checked above");
            TrainableModel::Dplda(DpldaPipeline {
                preproc: p.preproc.clone(),
                center: p.plda.mu.clone(),
                model: DpldaModel::zeros(p.preproc.out_dim()),
            })
        }
        (BackendArg::Gb, _) => unreachable!("handled above"),
    };

    let (trained, history) = train(init_model, &trials, &set, &val_trials, &cfg, reg.as_ref())?;
    let model = match &trained {
        TrainableModel::Neural(p) => Model::NeuralPlda(p.clone()),
        TrainableModel::Dplda(p) => Model::Dplda(p.clone()),
    };
    save_model(&a.out, &model)?;
    history.write_tsv(&history_path(&a.out))?;
    train_manifest(a)?;

    let (val_loss, val_minc) = validate(&trained, &val_trials, &set, &cfg, reg.as_ref().map(|r| r.val.as_slice()))?;
    println!(
        "trained {} for {} epochs -> {}",
        a.loss,
        history.epochs.len(),
        a.out.display()
    );
    println!("validation loss {val_loss:.6}, min_c_primary {val_minc:.5}");
    Ok(())
}

fn history_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".history.tsv");
    PathBuf::from(s)
}

fn train_manifest(a: &TrainArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&a.trials, &a.val_trials, &a.embeddings];
    if let Some(p) = &a.plda_model {
        inputs.push(p);
    }
    let hist = history_path(&a.out);
    write_manifest(
        &a.out,
        "train",
        Some(a.seed),
        serde_json::to_value(a)?,
        &inputs,
        &[&a.out, &hist],
    )
}

/// Score a trial list with any saved model kind.
pub fn score_with_model(
    model: &Model,
    trials: &[Trial],
    set: &EmbeddingSet,
) -> crate::error::Result<ScoreSet> {
    match model {
        Model::NeuralPlda(p) => forward_batch(p, trials, set),
        Model::GenerativePipeline(p) => p.score_trials(trials, set),
        Model::Dplda(p) => p.score_trials(trials, set),
        Model::PairwiseGb(p) => p.score_trials(trials, set),
        Model::Generative(m) => {
            // bare model: embeddings must already live in the processed space
            if set.dim() != m.dim() {
                return Err(Error::Dimension(format!(
                    "bare generative model of dimension {} against embeddings of dimension {}",
                    m.dim(),
                    set.dim()
                )));
            }
            let pq = derive_pq(m)?;
            let resolved = set.resolve_trials(trials)?;
            let scores = resolved
                .iter()
                .map(|&(e, t)| {
                    score_pair(
                        &pq,
                        &(&set.entries()[e].vector - &m.mu),
                        &(&set.entries()[t].vector - &m.mu),
                    )
                })
                .collect::<crate::error::Result<Vec<_>>>()?;
            ScoreSet::new(trials.to_vec(), scores)
        }
    }
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let set = load_embeddings(&a.embeddings)?;
    let trials = load_trials(&a.trials)?;
    let scores = score_with_model(&model, &trials, &set)?;
    write_scores(&a.out, &scores)?;
    write_manifest(
        &a.out,
        "score",
        None,
        serde_json::to_value(a)?,
        &[&a.model, &a.trials, &a.embeddings],
        &[&a.out],
    )?;
    println!(
        "scored {} trials with {} model -> {}",
        scores.len(),
        model.kind(),
        a.out.display()
    );
    Ok(())
}

struct EvalReport {
    trials: usize,
    targets: usize,
    nontargets: usize,
    eer_pct: f64,
    min_c_primary: f64,
    theta1: f64,
    theta2: f64,
    actual_c_primary: f64,
    min_c_norm_b1: f64,
    min_c_norm_b2: f64,
}

fn eval_report(s: &ScoreSet) -> Result<EvalReport> {
    let targets = trial_targets(s.trials())?;
    let n_t = targets.iter().filter(|&&t| t).count();
    let (minc, theta1, theta2) = min_c_primary(s)?;
    let (c1, _) = min_c_norm(s, BETA1)?;
    let (c2, _) = min_c_norm(s, BETA2)?;
    Ok(EvalReport {
        trials: s.len(),
        targets: n_t,
        nontargets: s.len() - n_t,
        eer_pct: 100.0 * eer(s)?,
        min_c_primary: minc,
        theta1,
        theta2,
        actual_c_primary: actual_c_primary(s)?,
        min_c_norm_b1: c1,
        min_c_norm_b2: c2,
    })
}

impl EvalReport {
    fn to_text(&self) -> String {
        format!(
            "trials            {}\n\
             targets           {}\n\
             nontargets        {}\n\
             eer_pct           {:.4}\n\
             min_c_primary     {:.5}\n\
             actual_c_primary  {:.5}\n\
             min_c_norm_b99    {:.5}  @ theta {:.5}\n\
             min_c_norm_b199   {:.5}  @ theta {:.5}\n",
            self.trials,
            self.targets,
            self.nontargets,
            self.eer_pct,
            self.min_c_primary,
            self.actual_c_primary,
            self.min_c_norm_b1,
            self.theta1,
            self.min_c_norm_b2,
            self.theta2,
        )
    }

    fn to_tsv(&self) -> String {
        format!(
            "trials\ttargets\tnontargets\teer_pct\tmin_c_primary\tactual_c_primary\tmin_c_norm_b99\ttheta1\tmin_c_norm_b199\ttheta2\n\
             {}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            self.trials,
            self.targets,
            self.nontargets,
            self.eer_pct,
            self.min_c_primary,
            self.actual_c_primary,
            self.min_c_norm_b1,
            self.theta1,
            self.min_c_norm_b2,
            self.theta2,
        )
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let labeled = load_labeled(&a.scores, &a.trials)?;
    let report = eval_report(&labeled)?;
    let text = if a.tsv { report.to_tsv() } else { report.to_text() };
    print!("{text}");
    if let Some(out) = &a.out {
        std::fs::write(out, &text).with_context(|| format!("writing report {}", out.display()))?;
        write_manifest(
            out,
            "eval",
            None,
            serde_json::to_value(a)?,
            &[&a.scores, &a.trials],
            &[out],
        )?;
    }
    Ok(())
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let labeled = load_labeled(&a.scores, &a.trials)?;
    let (scale, offset) = affine_calibrate(&labeled)?;
    let calibrated = apply_affine(&labeled, scale, offset)?;
    write_scores(&a.out, &calibrated)?;
    let mut config = serde_json::to_value(a)?;
    config["fitted_a"] = serde_json::json!(scale);
    config["fitted_b"] = serde_json::json!(offset);
    write_manifest(
        &a.out,
        "calibrate",
        None,
        config,
        &[&a.scores, &a.trials],
        &[&a.out],
    )?;
    println!("calibration s -> {scale:.6} * s + {offset:.6} applied to {}", a.out.display());
    Ok(())
}

pub fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::SampleTrials(a) => cmd_sample_trials(a),
        Command::EstimatePlda(a) => cmd_estimate(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    }
}
