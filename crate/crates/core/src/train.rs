//! Deterministic trainer: frozen reference snapshot, seeded batch order,
//! plain SGD, periodic checkpoints with held-out evaluation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::model::checkpoint::{self, CheckpointError};
use crate::model::{
    condition_triple, log_prob_on_tape, InitScale, ModelDims, ModelError, ModelParams, ParamVars,
    Which,
};
use crate::objectives::{batch_mean, Betas, BundleVars, Objective, ObjectiveError};
use crate::probe::{self, avg_improvement, Battery, ProbeError};
use crate::synth::{ContrastPair, Corpus};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("corpus pair {index}: {message}")]
    Corpus { index: usize, message: String },
    #[error("non-finite loss or gradient at step {step}; batch dump: {dump}")]
    NonFinite { step: usize, dump: String },
    #[error("run record line {line}: {message}")]
    RunLog { line: usize, message: String },
    #[error("{0}")]
    Select(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// What `select_checkpoint` maximises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    AvgImprovement,
    PairAccuracy,
    /// Lowest held-out loss.
    HoldoutLoss,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [
        Criterion::AvgImprovement,
        Criterion::PairAccuracy,
        Criterion::HoldoutLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::AvgImprovement => "avg_improvement",
            Criterion::PairAccuracy => "pair_accuracy",
            Criterion::HoldoutLoss => "holdout_loss",
        }
    }

    fn score(self, r: &StepRecord) -> Option<f64> {
        match self {
            Criterion::AvgImprovement => r.avg_improvement,
            Criterion::PairAccuracy => r.pair_accuracy,
            Criterion::HoldoutLoss => r.holdout_loss.map(|l| -l),
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Criterion::ALL.iter().map(|c| c.name()).collect();
                format!("unknown criterion `{s}`; valid: {}", valid.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub betas: Betas,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_interval: usize,
    pub holdout_fraction: f64,
    pub width: usize,
    pub hidden_layers: usize,
    pub criterion: Criterion,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Svco,
            betas: Betas::default(),
            learning_rate: 1e-2,
            epochs: 2,
            batch_size: 32,
            seed: 0,
            checkpoint_interval: 31,
            holdout_fraction: 0.02,
            width: 32,
            hidden_layers: 1,
            criterion: Criterion::AvgImprovement,
        }
    }
}

pub const CONFIG_KEYS: [&str; 13] = [
    "objective",
    "beta",
    "beta1",
    "beta2",
    "learning_rate",
    "epochs",
    "batch_size",
    "seed",
    "checkpoint_interval",
    "holdout_fraction",
    "width",
    "hidden_layers",
    "criterion",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse `{value}`"))
}

impl TrainConfig {
    /// Sets one field from its textual form; keys match the CLI flag names
    /// with `_` in place of `-`.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "objective" => self.objective = value.parse()?,
            "beta" => self.betas.beta = num(key, value)?,
            "beta1" => self.betas.beta1 = num(key, value)?,
            "beta2" => self.betas.beta2 = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = num(key, value)?,
            "holdout_fraction" => self.holdout_fraction = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "hidden_layers" => self.hidden_layers = num(key, value)?,
            "criterion" => self.criterion = value.parse()?,
            _ => {
                return Err(format!(
                    "unknown key `{key}`; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                ))
            }
        }
        Ok(())
    }

    /// Applies a flat `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| TrainError::Config {
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            self.set(&k.trim().replace('-', "_"), v.trim()).map_err(err)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "objective = {}\nbeta = {}\nbeta1 = {}\nbeta2 = {}\nlearning_rate = {}\nepochs = {}\n\
batch_size = {}\nseed = {}\ncheckpoint_interval = {}\nholdout_fraction = {}\nwidth = {}\n\
hidden_layers = {}\ncriterion = {}\n",
            self.objective,
            self.betas.beta,
            self.betas.beta1,
            self.betas.beta2,
            self.learning_rate,
            self.epochs,
            self.batch_size,
            self.seed,
            self.checkpoint_interval,
            self.holdout_fraction,
            self.width,
            self.hidden_layers,
            self.criterion.name()
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.betas.validate()?;
        let bad = |m: &str| Err(TrainError::Invalid(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_interval == 0 {
            return bad("epochs, batch_size and checkpoint_interval must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must be in [0, 1)");
        }
        self.dims().validate()?;
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            width: self.width,
            hidden_layers: self.hidden_layers,
            ..ModelDims::default()
        }
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 0-based batch index; the record describes the batch before its update.
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    /// Whether the parameters after this step were evaluated and snapshotted.
    pub is_checkpoint: bool,
    pub holdout_loss: Option<f64>,
    pub pair_accuracy: Option<f64>,
    pub avg_improvement: Option<f64>,
    /// File name relative to the run directory, when one was written.
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<StepRecord>,
}

impl RunRecord {
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut steps: Vec<StepRecord> = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| TrainError::RunLog {
                line: i + 1,
                message,
            };
            let rec: StepRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            if let Some(prev) = steps.last() {
                if rec.step <= prev.step {
                    return Err(err(format!("step {} does not follow {}", rec.step, prev.step)));
                }
            }
            steps.push(rec);
        }
        Ok(Self { steps })
    }

    pub fn checkpoints(&self) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(|s| s.is_checkpoint)
    }
}

/// Best checkpoint under `criterion`; ties go to the earliest step.
pub fn select_checkpoint(run: &RunRecord, criterion: Criterion) -> Result<&StepRecord> {
    let mut best: Option<(&StepRecord, f64)> = None;
    let mut any = false;
    for rec in run.checkpoints() {
        any = true;
        let Some(score) = criterion.score(rec) else {
            continue;
        };
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((rec, score));
        }
    }
    match best {
        Some((rec, _)) => Ok(rec),
        None if any => Err(TrainError::Select(format!(
            "no checkpoint carries a {} value; the run had no held-out pairs",
            criterion.name()
        ))),
        None => Err(TrainError::Select("run has no checkpoints".into())),
    }
}

/// Deterministic train / holdout split of pair indices.
pub fn split_indices(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let k = ((holdout_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut holdout = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    holdout.sort_unstable();
    train.sort_unstable();
    (train, holdout)
}

/// Index order for one epoch.
pub fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Which of the `(i_w, i_l, none)` slots the objective reads, for `y_w` and `y_l`.
fn slots(objective: Objective) -> [[bool; 3]; 2] {
    match objective {
        Objective::Svco => [[true; 3], [true; 3]],
        Objective::Vco => [[true; 3], [false; 3]],
        Objective::Dpo => [[true, false, false], [true, false, false]],
        Objective::Viscon => [[true, true, false], [false; 3]],
        Objective::Mdpo => [[true, true, false], [true, false, false]],
        Objective::Sft2 => [[true, false, false], [false, true, false]],
    }
}

/// Reference log-likelihoods, `[y_w, y_l] × [i_w, i_l, none]`.
pub type RefCache = [[f64; 3]; 2];

pub fn reference_cache(reference: &ModelParams, pair: &ContrastPair) -> Result<RefCache> {
    Ok([
        condition_triple(reference, pair, Which::W)?,
        condition_triple(reference, pair, Which::L)?,
    ])
}

fn pair_terms(
    tape: &mut Tape,
    vars: &ParamVars,
    pair: &ContrastPair,
    refs: &RefCache,
    cfg: &TrainConfig,
) -> Result<Vec<Var>> {
    let need = slots(cfg.objective);
    let conds = pair.conditions();
    let mut bundles = Vec::with_capacity(2);
    for (side, which) in [Which::W, Which::L].into_iter().enumerate() {
        let y = pair.response(which);
        let mut slot = Vec::with_capacity(3);
        for k in 0..3 {
            slot.push(if need[side][k] {
                let pol = log_prob_on_tape(tape, vars, &conds[k], &pair.query, y)?.0;
                (pol, tape.constant(Tensor::scalar(refs[side][k])))
            } else {
                // Unread slot: a constant placeholder keeps the bundle shape.
                let zero = tape.constant(Tensor::scalar(0.0));
                (zero, zero)
            });
        }
        bundles.push(BundleVars {
            pol_iw: slot[0].0,
            pol_il: slot[1].0,
            pol_noimg: slot[2].0,
            ref_iw: slot[0].1,
            ref_il: slot[1].1,
            ref_noimg: slot[2].1,
        });
    }
    Ok(cfg
        .objective
        .pair_terms(tape, &bundles[0], &bundles[1], &cfg.betas, None)?)
}

/// Mean objective over `indices`, as a graph on a fresh tape.
fn batch_graph(
    params: &ModelParams,
    trainable: bool,
    pairs: &[ContrastPair],
    refs: &[RefCache],
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<(Tape, ParamVars, Var)> {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape, trainable);
    let mut terms = Vec::new();
    for &i in indices {
        terms.extend(pair_terms(&mut tape, &vars, &pairs[i], &refs[i], cfg)?);
    }
    let loss = batch_mean(&mut tape, &terms)?;
    Ok((tape, vars, loss))
}

/// Objective value over `indices` without building gradients.
pub fn mean_loss(
    params: &ModelParams,
    pairs: &[ContrastPair],
    refs: &[RefCache],
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let (tape, _, loss) = batch_graph(params, false, pairs, refs, indices, cfg)?;
    Ok(tape.value(loss).item())
}

/// Loss and per-tensor gradients for one batch, canonical tensor order.
pub fn loss_and_grad(
    params: &ModelParams,
    pairs: &[ContrastPair],
    refs: &[RefCache],
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let (tape, vars, loss) = batch_graph(params, true, pairs, refs, indices, cfg)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).item();
    Ok((value, vars.vars().into_iter().map(|v| grads.wrt(v)).collect()))
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: usize,
    epoch: usize,
    loss: f64,
    pair_indices: &'a [usize],
    pairs: Vec<&'a ContrastPair>,
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run: RunRecord,
    pub params: ModelParams,
    pub reference: ModelParams,
    pub holdout: Vec<usize>,
    /// Evaluation battery of the initial model on the holdout pairs.
    pub base_battery: Option<Battery>,
}

fn holdout_corpus(corpus: &Corpus, holdout: &[usize]) -> Corpus {
    Corpus {
        pairs: holdout.iter().map(|&i| corpus.pairs[i].clone()).collect(),
    }
}

pub fn checkpoint_name(updates: usize) -> String {
    format!("step-{updates:06}.ckpt")
}

pub const RUN_LOG: &str = "run.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

/// Trains from a seeded initialisation. With `out_dir`, writes the run log,
/// the effective config, periodic checkpoints and `final.ckpt` there.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let init = ModelParams::init(cfg.dims(), InitScale::default(), cfg.seed)?;
    train_from(cfg, corpus, init, out_dir)
}

pub fn train_from(
    cfg: &TrainConfig,
    corpus: &Corpus,
    init: ModelParams,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::Invalid("corpus is empty".into()));
    }
    for (index, p) in corpus.pairs.iter().enumerate() {
        p.validate()
            .map_err(|message| TrainError::Corpus { index, message })?;
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    }

    let reference = init.clone();
    let mut params = init;
    let pairs = &corpus.pairs;
    let refs = pairs
        .iter()
        .map(|p| reference_cache(&reference, p))
        .collect::<Result<Vec<_>>>()?;
    let (train_idx, holdout) = split_indices(pairs.len(), cfg.holdout_fraction, cfg.seed);
    let held = holdout_corpus(corpus, &holdout);
    let base_battery = if holdout.is_empty() {
        None
    } else {
        Some(probe::eval_battery(&reference, &held)?)
    };

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut run = RunRecord::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&train_idx, cfg.seed, epoch);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = loss_and_grad(&params, pairs, &refs, batch, cfg)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                let dump = NanDump {
                    step,
                    epoch,
                    loss,
                    pair_indices: batch,
                    pairs: batch.iter().map(|&i| &pairs[i]).collect(),
                };
                let text = serde_json::to_string(&dump).expect("serializable dump");
                let dump = match out_dir {
                    Some(dir) => {
                        let path = dir.join(format!("nan-dump-step-{step:06}.json"));
                        std::fs::write(&path, &text)?;
                        path.display().to_string()
                    }
                    None => text,
                };
                return Err(TrainError::NonFinite { step, dump });
            }
            for (t, g) in params.tensors_mut().into_iter().zip(&grads) {
                for (x, d) in t.data_mut().iter_mut().zip(g.data()) {
                    *x -= cfg.learning_rate * d;
                }
            }

            let updates = step + 1;
            let mut rec = StepRecord {
                step,
                epoch,
                train_loss: loss,
                is_checkpoint: false,
                holdout_loss: None,
                pair_accuracy: None,
                avg_improvement: None,
                checkpoint: None,
            };
            if updates.is_multiple_of(cfg.checkpoint_interval) || updates == total_steps {
                rec.is_checkpoint = true;
                if let Some(base) = &base_battery {
                    let now = probe::eval_battery(&params, &held)?;
                    rec.holdout_loss = Some(mean_loss(&params, pairs, &refs, &holdout, cfg)?);
                    rec.pair_accuracy = now.metrics.get("pair_accuracy").copied();
                    rec.avg_improvement =
                        Some(avg_improvement(&base.metrics, &now.metrics, &base.lower_better)?);
                }
                if let Some(dir) = out_dir {
                    let name = checkpoint_name(updates);
                    checkpoint::save(&params, dir.join(&name))?;
                    rec.checkpoint = Some(name);
                }
            }
            log::debug!("step {step} epoch {epoch} loss {loss}");
            run.steps.push(rec);
            step += 1;
        }
    }

    if let Some(dir) = out_dir {
        checkpoint::save(&params, dir.join(FINAL_CHECKPOINT))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(RUN_LOG))?);
        run.write_jsonl(&mut f)?;
        f.flush()?;
    }
    Ok(TrainOutcome {
        run,
        params,
        reference,
        holdout,
        base_battery,
    })
}

/// Path of the selected checkpoint inside `run_dir`.
pub fn select_checkpoint_path(run_dir: &Path, criterion: Criterion) -> Result<PathBuf> {
    let f = std::fs::File::open(run_dir.join(RUN_LOG))?;
    let run = RunRecord::read_jsonl(std::io::BufReader::new(f))?;
    let rec = select_checkpoint(&run, criterion)?;
    let name = rec.checkpoint.as_ref().ok_or_else(|| {
        TrainError::Select(format!("step {} was not written to disk", rec.step))
    })?;
    Ok(run_dir.join(name))
}

/// Per-objective mean loss summary keyed by name, for reports.
pub fn loss_summary(run: &RunRecord) -> BTreeMap<String, f64> {
    let n = run.steps.len().max(1) as f64;
    BTreeMap::from([
        (
            "first_train_loss".to_string(),
            run.steps.first().map_or(f64::NAN, |s| s.train_loss),
        ),
        (
            "last_train_loss".to_string(),
            run.steps.last().map_or(f64::NAN, |s| s.train_loss),
        ),
        (
            "mean_train_loss".to_string(),
            run.steps.iter().map(|s| s.train_loss).sum::<f64>() / n,
        ),
    ])
}
