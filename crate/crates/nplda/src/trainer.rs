//! Minibatch training for the discriminative back-ends: trial sampling
//! matched by gender and source, stratified batches, plain gradient
//! descent with momentum, and the halve-on-two-consecutive-validation-
//! increases learning-rate schedule.

use crate::baselines::dplda_expand;
use crate::error::{Error, Result};
use crate::io::{trial_targets, EmbeddingSet, Gender, Label, ScoreSet, Trial};
use crate::losses::{bce_loss, bce_regularized, soft_cprimary, soft_plus_bce, SoftCostConfig};
use crate::metrics::min_c_primary;
use crate::model_io::{save_model, Model};
use crate::neural::{backward, default_thresholds, forward_cached_from_pairs, NeuralPldaParams};
use crate::pipeline::DpldaPipeline;
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Objective selection for [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    BceReg,
    SoftCprimary,
    SoftPlusBce,
}

impl LossKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "bce" => Ok(LossKind::Bce),
            "bce-reg" => Ok(LossKind::BceReg),
            "soft-cprimary" => Ok(LossKind::SoftCprimary),
            "soft-bce" => Ok(LossKind::SoftPlusBce),
            other => Err(Error::Domain(format!(
                "unknown loss {other:?} (expected bce, bce-reg, soft-cprimary or soft-bce)"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LossKind::Bce => "bce",
            LossKind::BceReg => "bce-reg",
            LossKind::SoftCprimary => "soft-cprimary",
            LossKind::SoftPlusBce => "soft-bce",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub soft: SoftCostConfig,
    /// Weight of the BCE term in the mixed objective.
    pub bce_mix_weight: f64,
    /// Training stops once the halving schedule drives the rate below this.
    pub min_lr: f64,
    /// When set, a model checkpoint is written here every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4096,
            lr: 1e-3,
            momentum: 0.9,
            max_epochs: 30,
            seed: 0,
            loss: LossKind::SoftCprimary,
            soft: SoftCostConfig::default(),
            bce_mix_weight: 0.1,
            min_lr: 1e-6,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Domain("batch size must be at least 2".into()));
        }
        if self.lr <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Domain("need lr > 0 and momentum in [0, 1)".into()));
        }
        self.soft.validate()
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate in effect during this epoch.
    pub lr: f64,
    pub val_min_c_primary: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_loss\tlr\tval_min_c_primary\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.epoch, e.train_loss, e.val_loss, e.lr, e.val_min_c_primary
            ));
        }
        out
    }

    pub fn write_tsv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Learning-rate schedule: halve after two consecutive validation-loss
/// increases, then start counting afresh.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    lr: f64,
    prev: Option<f64>,
    rises: usize,
    pub halvings: usize,
}

impl LrSchedule {
    pub fn new(lr0: f64) -> Self {
        LrSchedule {
            lr: lr0,
            prev: None,
            rises: 0,
            halvings: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn observe(&mut self, val_loss: f64) {
        if let Some(prev) = self.prev {
            if val_loss > prev {
                self.rises += 1;
                if self.rises == 2 {
                    self.lr *= 0.5;
                    self.halvings += 1;
                    self.rises = 0;
                }
            } else {
                self.rises = 0;
            }
        }
        self.prev = Some(val_loss);
    }
}

/// Draw labeled training trials: targets within speaker, non-targets
/// across speakers constrained to equal gender and source. Sampling is
/// with replacement and never pairs an embedding with itself.
pub fn sample_training_trials(
    set: &EmbeddingSet,
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (pos, e) in set.entries().iter().enumerate() {
        let spk = e
            .speaker_id
            .as_deref()
            .ok_or_else(|| Error::Domain(format!("embedding {:?} has no speaker label", e.id)))?;
        by_speaker.entry(spk).or_default().push(pos);
    }
    if by_speaker.len() < 2 {
        return Err(Error::Domain("trial sampling needs at least 2 speakers".into()));
    }

    let multi_session: Vec<&Vec<usize>> =
        by_speaker.values().filter(|v| v.len() >= 2).collect();
    if n_target > 0 && multi_session.is_empty() {
        return Err(Error::Domain(
            "cannot sample target trials: no speaker has two or more embeddings".into(),
        ));
    }

    type BucketKey = (Option<Gender>, Option<String>);
    let mut buckets: BTreeMap<BucketKey, Vec<usize>> = BTreeMap::new();
    for (pos, e) in set.entries().iter().enumerate() {
        buckets
            .entry((e.gender, e.source.clone()))
            .or_default()
            .push(pos);
    }
    let speaker_of = |pos: usize| set.entries()[pos].speaker_id.as_deref().unwrap();
    let eligible: Vec<&Vec<usize>> = buckets
        .values()
        .filter(|positions| {
            positions
                .iter()
                .any(|&p| speaker_of(p) != speaker_of(positions[0]))
        })
        .collect();
    if n_nontarget > 0 && eligible.is_empty() {
        return Err(Error::Domain(
            "cannot sample non-target trials: no gender/source bucket spans two speakers".into(),
        ));
    }
    // cumulative sizes for size-weighted bucket choice
    let bucket_total: usize = eligible.iter().map(|b| b.len()).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_target + n_nontarget);

    for _ in 0..n_target {
        let positions = multi_session[rng.gen_range(0..multi_session.len())];
        let i = rng.gen_range(0..positions.len());
        let mut j = rng.gen_range(0..positions.len());
        let mut tries = 0;
        while j == i && tries < 1000 {
            j = rng.gen_range(0..positions.len());
            tries += 1;
        }
        if j == i {
            j = (i + 1) % positions.len();
        }
        trials.push(Trial::new(
            set.entries()[positions[i]].id.clone(),
            set.entries()[positions[j]].id.clone(),
            Some(Label::Target),
        ));
    }

    for _ in 0..n_nontarget {
        // pick an embedding uniformly over eligible buckets, then a
        // cross-speaker partner from the same bucket
        let mut pick = rng.gen_range(0..bucket_total);
        let mut bucket = eligible[0];
        for b in &eligible {
            if pick < b.len() {
                bucket = b;
                break;
            }
            pick -= b.len();
        }
        let first = bucket[pick];
        let mut second = bucket[rng.gen_range(0..bucket.len())];
        let mut tries = 0;
        while speaker_of(second) == speaker_of(first) && tries < 1000 {
            second = bucket[rng.gen_range(0..bucket.len())];
            tries += 1;
        }
        if speaker_of(second) == speaker_of(first) {
            second = *bucket
                .iter()
                .find(|&&p| speaker_of(p) != speaker_of(first))
                .expect("eligible bucket spans two speakers");
        }
        trials.push(Trial::new(
            set.entries()[first].id.clone(),
            set.entries()[second].id.clone(),
            Some(Label::Nontarget),
        ));
    }

    Ok(trials)
}

/// The models the minibatch trainer can optimize.
#[derive(Debug, Clone)]
pub enum TrainableModel {
    Neural(NeuralPldaParams),
    Dplda(DpldaPipeline),
}

/// Reference scores for the regression-regularized objective, aligned
/// with the training and validation trial lists.
#[derive(Debug, Clone)]
pub struct RegScores {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
}

fn eval_loss(
    cfg: &TrainConfig,
    scores: &[f64],
    targets: &[bool],
    theta: [f64; 2],
    reg: Option<&[f64]>,
) -> Result<(f64, Vec<f64>, [f64; 2])> {
    match cfg.loss {
        LossKind::Bce => {
            let (loss, grad) = bce_loss(scores, targets)?;
            Ok((loss, grad, [0.0, 0.0]))
        }
        LossKind::BceReg => {
            let reg = reg.ok_or_else(|| {
                Error::Domain("bce-reg needs reference scores from the generative baseline".into())
            })?;
            let (loss, grad) = bce_regularized(scores, targets, reg, cfg.soft.lambda_reg)?;
            Ok((loss, grad, [0.0, 0.0]))
        }
        LossKind::SoftCprimary => soft_cprimary(scores, targets, theta, &cfg.soft),
        LossKind::SoftPlusBce => {
            soft_plus_bce(scores, targets, theta, &cfg.soft, cfg.bce_mix_weight)
        }
    }
}

/// Internal per-backend state: flat parameter access plus batch scoring
/// and gradients over resolved trial pairs.
enum State {
    Neural(NeuralPldaParams),
    Dplda {
        pipeline: DpldaPipeline,
        theta: [f64; 2],
        /// Preprocessed vectors, aligned with set positions. The
        /// preprocessor is frozen during training, so this is computed
        /// once.
        processed: Vec<DVector<f64>>,
    },
}

impl State {
    fn build(model: TrainableModel, set: &EmbeddingSet) -> Result<Self> {
        match model {
            TrainableModel::Neural(p) => {
                p.validate()?;
                if set.dim() != p.input_dim() {
                    return Err(Error::Dimension(format!(
                        "network expects input {}, embeddings have {}",
                        p.input_dim(),
                        set.dim()
                    )));
                }
                Ok(State::Neural(p))
            }
            TrainableModel::Dplda(pipeline) => {
                let processed = set
                    .entries()
                    .iter()
                    .map(|e| Ok(pipeline.preproc.apply(&e.vector)? - &pipeline.center))
                    .collect::<Result<Vec<_>>>()?;
                let d = pipeline.preproc.out_dim();
                if pipeline.model.embedding_dim()? != d {
                    return Err(Error::Dimension(
                        "dplda weight length disagrees with preprocessor output".into(),
                    ));
                }
                Ok(State::Dplda {
                    pipeline,
                    theta: default_thresholds(),
                    processed,
                })
            }
        }
    }

    fn theta(&self) -> [f64; 2] {
        match self {
            State::Neural(p) => p.theta,
            State::Dplda { theta, .. } => *theta,
        }
    }

    fn flat(&self) -> Vec<f64> {
        match self {
            State::Neural(p) => p.to_flat(),
            State::Dplda {
                pipeline, theta, ..
            } => {
                let mut out: Vec<f64> = pipeline.model.w.iter().cloned().collect();
                out.extend_from_slice(theta);
                out
            }
        }
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        match self {
            State::Neural(p) => p.set_from_flat(flat),
            State::Dplda {
                pipeline, theta, ..
            } => {
                let n = pipeline.model.w.len();
                if flat.len() != n + 2 {
                    return Err(Error::Dimension("flat length mismatch for dplda".into()));
                }
                for (i, v) in flat[..n].iter().enumerate() {
                    pipeline.model.w[i] = *v;
                }
                *theta = [flat[n], flat[n + 1]];
                Ok(())
            }
        }
    }

    fn scores(&self, set: &EmbeddingSet, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        match self {
            State::Neural(p) => Ok(forward_cached_from_pairs(p, set, pairs)?.0),
            State::Dplda {
                pipeline,
                processed,
                ..
            } => pairs
                .iter()
                .map(|&(e, t)| {
                    let phi = dplda_expand(&processed[e], &processed[t])?;
                    Ok(pipeline.model.w.dot(&phi))
                })
                .collect(),
        }
    }

    /// Batch gradient in flat layout, with the loss's threshold
    /// gradients merged into the trailing slots.
    fn grad_flat(
        &self,
        set: &EmbeddingSet,
        pairs: &[(usize, usize)],
        dscore: &[f64],
        dtheta: [f64; 2],
    ) -> Result<Vec<f64>> {
        match self {
            State::Neural(p) => {
                let (_, cache) = forward_cached_from_pairs(p, set, pairs)?;
                let mut grads = backward(p, &cache, dscore)?;
                grads.theta = dtheta;
                Ok(grads.to_flat())
            }
            State::Dplda {
                pipeline,
                processed,
                ..
            } => {
                let mut gw = DVector::zeros(pipeline.model.w.len());
                for (&(e, t), &g) in pairs.iter().zip(dscore) {
                    if g == 0.0 {
                        continue;
                    }
                    gw += dplda_expand(&processed[e], &processed[t])? * g;
                }
                let mut out: Vec<f64> = gw.iter().cloned().collect();
                out.extend_from_slice(&dtheta);
                Ok(out)
            }
        }
    }

    fn into_model(self) -> TrainableModel {
        match self {
            State::Neural(p) => TrainableModel::Neural(p),
            State::Dplda { pipeline, .. } => TrainableModel::Dplda(pipeline),
        }
    }

    fn to_persistable(&self) -> Model {
        match self {
            State::Neural(p) => Model::NeuralPlda(p.clone()),
            State::Dplda { pipeline, .. } => Model::Dplda(pipeline.clone()),
        }
    }
}

/// Split shuffled per-class indices into `n_batches` near-equal chunks
/// and merge them so every batch holds both classes.
fn stratified_batches(
    rng: &mut ChaCha8Rng,
    targets_idx: &[usize],
    nontargets_idx: &[usize],
    n_batches: usize,
) -> Result<Vec<Vec<usize>>> {
    let chunk = |idx: &[usize], rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        let mut shuffled = idx.to_vec();
        shuffled.shuffle(rng);
        let base = shuffled.len() / n_batches;
        let rem = shuffled.len() % n_batches;
        let mut out = Vec::with_capacity(n_batches);
        let mut at = 0;
        for b in 0..n_batches {
            let take = base + usize::from(b < rem);
            out.push(shuffled[at..at + take].to_vec());
            at += take;
        }
        out
    };
    for attempt in 0..2 {
        let t_chunks = chunk(targets_idx, rng);
        let nt_chunks = chunk(nontargets_idx, rng);
        let ok = t_chunks
            .iter()
            .zip(&nt_chunks)
            .all(|(t, nt)| !t.is_empty() && !nt.is_empty());
        if ok {
            let mut batches = Vec::with_capacity(n_batches);
            for (mut t, nt) in t_chunks.into_iter().zip(nt_chunks) {
                t.extend(nt);
                t.shuffle(rng);
                batches.push(t);
            }
            return Ok(batches);
        }
        if attempt == 1 {
            break;
        }
    }
    Err(Error::Domain(format!(
        "cannot form {n_batches} batches with both classes: {} targets, {} non-targets",
        targets_idx.len(),
        nontargets_idx.len()
    )))
}

/// Evaluate the configured loss and the minimum primary cost on a
/// labeled trial list; no parameter mutation.
pub fn validate(
    model: &TrainableModel,
    val_trials: &[Trial],
    set: &EmbeddingSet,
    cfg: &TrainConfig,
    reg_val: Option<&[f64]>,
) -> Result<(f64, f64)> {
    if val_trials.is_empty() {
        return Err(Error::Domain("validation trial list is empty".into()));
    }
    let state = State::build(model.clone(), set)?;
    let pairs = set.resolve_trials(val_trials)?;
    let targets = trial_targets(val_trials)?;
    let scores = state.scores(set, &pairs)?;
    let (loss, _, _) = eval_loss(cfg, &scores, &targets, state.theta(), reg_val)?;
    let score_set = ScoreSet::new(val_trials.to_vec(), scores)?;
    let (minc, _, _) = min_c_primary(&score_set)?;
    Ok((loss, minc))
}

/// Minibatch gradient descent with momentum over the configured loss,
/// with once-per-epoch validation driving the halving schedule. Stops at
/// `max_epochs` or when the learning rate falls below `min_lr`.
/// Deterministic for a fixed (config, seed, data).
pub fn train(
    model: TrainableModel,
    trials: &[Trial],
    set: &EmbeddingSet,
    val_trials: &[Trial],
    cfg: &TrainConfig,
    reg: Option<&RegScores>,
) -> Result<(TrainableModel, TrainHistory)> {
    cfg.validate()?;
    let mut history = TrainHistory::default();
    if cfg.max_epochs == 0 {
        return Ok((model, history));
    }
    if val_trials.is_empty() {
        return Err(Error::Domain("training requires a validation trial list".into()));
    }
    if let Some(r) = reg {
        if r.train.len() != trials.len() || r.val.len() != val_trials.len() {
            return Err(Error::Dimension(format!(
                "regression scores misaligned: {}/{} vs {}/{} trials",
                r.train.len(),
                r.val.len(),
                trials.len(),
                val_trials.len()
            )));
        }
    }

    let mut state = State::build(model, set)?;
    let pairs = set.resolve_trials(trials)?;
    let val_pairs = set.resolve_trials(val_trials)?;
    let targets = trial_targets(trials)?;
    let val_targets = trial_targets(val_trials)?;

    let targets_idx: Vec<usize> = (0..trials.len()).filter(|&i| targets[i]).collect();
    let nontargets_idx: Vec<usize> = (0..trials.len()).filter(|&i| !targets[i]).collect();
    if targets_idx.is_empty() || nontargets_idx.is_empty() {
        return Err(Error::Domain("training trials must contain both classes".into()));
    }
    let n_batches = trials.len().div_ceil(cfg.batch_size).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut schedule = LrSchedule::new(cfg.lr);
    let mut flat = state.flat();
    let mut velocity = vec![0.0; flat.len()];

    for epoch in 0..cfg.max_epochs {
        if schedule.lr() < cfg.min_lr {
            break;
        }
        let lr = schedule.lr();
        let batches = stratified_batches(&mut rng, &targets_idx, &nontargets_idx, n_batches)?;

        let mut loss_sum = 0.0;
        for (batch_no, batch) in batches.iter().enumerate() {
            let batch_pairs: Vec<(usize, usize)> = batch.iter().map(|&i| pairs[i]).collect();
            let batch_targets: Vec<bool> = batch.iter().map(|&i| targets[i]).collect();
            let batch_reg: Option<Vec<f64>> =
                reg.map(|r| batch.iter().map(|&i| r.train[i]).collect());

            let scores = state.scores(set, &batch_pairs)?;
            let (loss, dscore, dtheta) = eval_loss(
                cfg,
                &scores,
                &batch_targets,
                state.theta(),
                batch_reg.as_deref(),
            )?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at epoch {epoch}, batch {batch_no}"
                )));
            }
            loss_sum += loss * batch.len() as f64;

            let grad = state.grad_flat(set, &batch_pairs, &dscore, dtheta)?;
            for ((x, v), g) in flat.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *x -= lr * *v;
            }
            state.set_flat(&flat)?;
            // set_flat re-symmetrizes P and Q; read back so the flat
            // view matches the parameters exactly
            flat = state.flat();
        }
        let train_loss = loss_sum / trials.len() as f64;

        let val_scores = state.scores(set, &val_pairs)?;
        let val_reg: Option<&[f64]> = reg.map(|r| r.val.as_slice());
        let (val_loss, _, _) =
            eval_loss(cfg, &val_scores, &val_targets, state.theta(), val_reg)?;
        let val_set = ScoreSet::new(val_trials.to_vec(), val_scores)?;
        let (val_minc, _, _) = min_c_primary(&val_set)?;

        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            val_min_c_primary: val_minc,
        });
        schedule.observe(val_loss);

        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("epoch_{epoch:03}.model"));
            save_model(&path, &state.to_persistable())?;
        }
    }

    Ok((state.into_model(), history))
}
