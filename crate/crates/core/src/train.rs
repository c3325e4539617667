//! Training: CTC-only phonetic pre-training, then joint discriminative
//! fine-tuning of one summary head with the phonetic branch kept as an
//! auxiliary task.
//!
//! Every utterance gets its own graph; a step accumulates the gradients of
//! `batch_size` utterances, averages them, clips the global norm and applies
//! Adam. Sampling, dropout masks and the holdout split all derive from the
//! configured seed, so a run is a pure function of (config, corpus).

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{global_norm, grad_clip_by_global_norm, no_grad, ops, Tensor, Var};
use crate::checkpoint::ParamStore;
use crate::config::{ModelConfig, SummaryKind};
use crate::encoder::{features_to_tensor, AttnMode, Encoder};
use crate::error::{FtmError, Result};
use crate::losses::{ctc_loss, frame_xe, multitask_loss, PhoneLabels};
use crate::model::{init_params, Bound, Ctx};
use crate::summary::head_logits;
use crate::synth::{derive_seed, segment_payload, Invocation, Split, Utterance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip_norm: f64,
    pub dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Utterances per optimizer step.
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub lambda_ctc: f64,
    pub train_sets: Vec<Invocation>,
    /// Fraction of the training pool held out for validation.
    pub holdout_fraction: f64,
    /// Held-out utterances scored at each validation.
    pub holdout_max: usize,
    /// Steps between validations; the best validated parameters are kept.
    pub eval_every: usize,
    /// Add keyword-stripped VT payloads as directed TB examples when VT data
    /// is selected.
    pub payload_augmentation: bool,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            clip_norm: 20.0,
            dropout: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            pretrain_steps: 2000,
            finetune_steps: 3000,
            lambda_ctc: 1.0,
            train_sets: vec![Invocation::Vt, Invocation::Tb],
            holdout_fraction: 0.1,
            holdout_max: 48,
            eval_every: 250,
            payload_augmentation: true,
            freeze_encoder: false,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FtmError::Config(m));
        for (name, v) in [
            ("lr", self.lr),
            ("clip_norm", self.clip_norm),
            ("eps", self.eps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("dropout", self.dropout)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad(format!("holdout_fraction must lie in (0, 1), got {}", self.holdout_fraction));
        }
        if !(self.lambda_ctc.is_finite() && self.lambda_ctc >= 0.0) {
            return bad(format!("lambda_ctc must be non-negative, got {}", self.lambda_ctc));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.holdout_max == 0 {
            return bad("batch_size, eval_every and holdout_max must be positive".into());
        }
        if self.train_sets.is_empty() {
            return bad("train_sets selects no invocation type".into());
        }
        Ok(())
    }

    /// Short tag naming the selected training sets, e.g. `vt+tb`.
    pub fn train_tag(&self) -> String {
        let mut sets = self.train_sets.clone();
        sets.sort();
        sets.dedup();
        sets.iter().map(|i| i.name()).collect::<Vec<_>>().join("+")
    }
}

/// A training example in model-input form.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub x: Tensor<f32>,
    pub label: usize,
    pub phones: PhoneLabels,
}

impl Example {
    pub fn from_utterance(u: &Utterance, context: usize, subsample: usize) -> Result<Self> {
        Ok(Example {
            id: u.id.clone(),
            x: features_to_tensor(&u.model_input(context, subsample)?)?,
            label: u.label(),
            phones: u.phones.clone(),
        })
    }
}

/// Training-split utterances of the selected invocation types, plus
/// payloads of VT-directed utterances when augmentation applies. Payloads
/// shorter than `min_raw_frames` are skipped.
pub fn training_pool<'a>(
    corpus: &'a [Utterance],
    sets: &[Invocation],
    payloads: bool,
    min_raw_frames: usize,
) -> Result<Vec<std::borrow::Cow<'a, Utterance>>> {
    let mut pool: Vec<std::borrow::Cow<'a, Utterance>> = corpus
        .iter()
        .filter(|u| u.split == Split::Train && sets.contains(&u.invocation))
        .map(std::borrow::Cow::Borrowed)
        .collect();
    if payloads && sets.contains(&Invocation::Vt) {
        for u in corpus
            .iter()
            .filter(|u| u.split == Split::Train && u.invocation == Invocation::Vt && u.directed)
        {
            let p = segment_payload(u)?;
            if p.duration_frames() >= min_raw_frames {
                pool.push(std::borrow::Cow::Owned(p));
            }
        }
    }
    if pool.is_empty() {
        return Err(FtmError::Data("training selection is empty".into()));
    }
    Ok(pool)
}

/// Deterministic split of `n` items into (train, holdout) index lists.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x401d, 0)));
    let n_hold = ((n as f64 * fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
    let hold = idx.split_off(n - n_hold);
    (idx, hold)
}

/// Adam moments and step counter, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(FtmError::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(FtmError::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let p = params.get_mut(name).expect("checked above");
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi as f64;
            let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
            let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
            *mi = mn as f32;
            *vi = vn as f32;
            let upd = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
            *w = (*w as f64 - upd) as f32;
        }
    }
    Ok(())
}

/// One row of the per-step training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub xe: f64,
    pub ctc: f64,
    pub total: f64,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// Held-out loss at a validation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRow {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest held-out loss.
    pub params: ParamStore<f32>,
    pub best_step: usize,
    pub log: Vec<LogRow>,
    pub holdout: Vec<HoldoutRow>,
}

pub fn write_log_csv<W: Write>(w: W, log: &[LogRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in log {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_holdout_csv<W: Write>(w: W, rows: &[HoldoutRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

/// What a training phase optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// CTC on the phonetic head only.
    Phonetic,
    /// Frame XE of a summary head plus λ·CTC.
    Joint(SummaryKind),
}

/// Per-utterance losses: (xe, ctc) with ctc normalised by frame count.
fn utterance_losses(
    cfg: &ModelConfig,
    p: &Bound<f32>,
    ex: &Example,
    objective: Objective,
    ctx: &mut Ctx,
) -> Result<(Option<Var<f32>>, Var<f32>)> {
    let x = Var::constant(ex.x.clone());
    let mode = match objective {
        Objective::Joint(SummaryKind::A2aLstm) => AttnMode::Full,
        _ => AttnMode::Masked,
    };
    let z = Encoder::new(cfg, p).forward(&x, mode, ctx)?;
    let t = ex.x.rows();
    let phone_logits = ops::linear(&z, p.get("phone.w")?, p.get("phone.b")?)?;
    let ctc = ctc_loss(&ops::log_softmax(&phone_logits)?, &ex.phones)
        .map_err(|e| e.context(&ex.id))?;
    let ctc = ops::scale(&ctc, 1.0 / t as f32);
    let xe = match objective {
        Objective::Phonetic => None,
        Objective::Joint(kind) => Some(frame_xe(&head_logits(kind, cfg, p, &z, ctx)?, ex.label, None)?),
    };
    Ok((xe, ctc))
}

fn objective_total(objective: Objective, lambda_ctc: f64, xe: f64, ctc: f64) -> f64 {
    match objective {
        Objective::Phonetic => ctc,
        Objective::Joint(_) => xe + lambda_ctc * ctc,
    }
}

/// Mean (xe, ctc) over `examples` in evaluation mode; xe is 0 for the
/// phonetic objective.
pub fn mean_losses(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    examples: &[Example],
    objective: Objective,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(FtmError::Empty("no examples to score".into()));
    }
    let p = Bound::new(params, false);
    let (mut xe_sum, mut ctc_sum) = (0.0, 0.0);
    no_grad(|| -> Result<()> {
        for ex in examples {
            let (xe, ctc) = utterance_losses(cfg, &p, ex, objective, &mut Ctx::eval())?;
            xe_sum += xe.map_or(0.0, |v| v.item() as f64);
            ctc_sum += ctc.item() as f64;
        }
        Ok(())
    })?;
    let n = examples.len() as f64;
    Ok((xe_sum / n, ctc_sum / n))
}

/// Batch-averaged gradients with mean losses.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub grads: BTreeMap<String, Tensor<f32>>,
    pub xe: f64,
    pub ctc: f64,
}

/// Gradients of the batch-mean loss with respect to every parameter whose
/// name starts with one of `trainable` (all parameters when empty). Dropout
/// is active, seeded per utterance from `seed`.
pub fn batch_gradients(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    batch: &[&Example],
    objective: Objective,
    lambda_ctc: f64,
    trainable: &[&str],
    seed: u64,
) -> Result<BatchGrads> {
    if batch.is_empty() {
        return Err(FtmError::Empty("empty batch".into()));
    }
    let is_trainable = |name: &str| trainable.is_empty() || trainable.iter().any(|p| name.starts_with(p));
    let p = Bound::from_vars(
        params
            .iter()
            .map(|(k, v)| (k.to_string(), Var::leaf(v.clone(), is_trainable(k)))),
    );
    let (mut xe_sum, mut ctc_sum) = (0.0, 0.0);
    let scale = 1.0 / batch.len() as f32;
    for (b, ex) in batch.iter().enumerate() {
        let mut ctx = Ctx::train(derive_seed(seed, 0xd70, b as u64));
        let (xe, ctc) = utterance_losses(cfg, &p, ex, objective, &mut ctx)?;
        let loss = match &xe {
            Some(xe) => multitask_loss(xe, &ctc, lambda_ctc)?,
            None => ctc.clone(),
        };
        if !loss.item().is_finite() {
            return Err(FtmError::NonFinite(format!("loss on {}", ex.id)));
        }
        xe_sum += xe.map_or(0.0, |v| v.item() as f64);
        ctc_sum += ctc.item() as f64;
        ops::scale(&loss, scale).backward()?;
    }
    let n = batch.len() as f64;
    Ok(BatchGrads {
        grads: p.grads().into_iter().collect(),
        xe: xe_sum / n,
        ctc: ctc_sum / n,
    })
}

struct Trainer<'a> {
    cfg: &'a ModelConfig,
    tc: &'a TrainConfig,
    objective: Objective,
    /// Prefixes of the parameters that receive updates.
    trainable: Vec<&'static str>,
}

impl Trainer<'_> {
    fn total(&self, xe: f64, ctc: f64) -> f64 {
        objective_total(self.objective, self.tc.lambda_ctc, xe, ctc)
    }

    fn holdout_loss(&self, params: &ParamStore<f32>, hold: &[Example]) -> Result<f64> {
        let (xe, ctc) = mean_losses(self.cfg, params, hold, self.objective)?;
        Ok(self.total(xe, ctc))
    }

    fn run(&self, mut params: ParamStore<f32>, train: &[Example], hold: &[Example], steps: usize, stream: u64) -> Result<TrainOutcome> {
        let tc = self.tc;
        let mut adam = AdamState::default();
        let mut log = Vec::with_capacity(steps);
        let mut holdout = vec![HoldoutRow { step: 0, loss: self.holdout_loss(&params, hold)? }];
        let mut best = (holdout[0].loss, 0, params.clone());
        let mut order: Vec<usize> = Vec::new();
        let mut epoch = 0u64;
        for step in 1..=steps {
            let mut batch = Vec::with_capacity(tc.batch_size);
            for _ in 0..tc.batch_size {
                if order.is_empty() {
                    order = (0..train.len()).collect();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, stream, epoch)));
                    order.reverse();
                    epoch += 1;
                }
                batch.push(&train[order.pop().expect("refilled")]);
            }
            let seed = derive_seed(tc.seed, stream + 1, step as u64);
            let bg = batch_gradients(self.cfg, &params, &batch, self.objective, tc.lambda_ctc, &self.trainable, seed)
                .map_err(|e| match e {
                    FtmError::NonFinite(m) => FtmError::NonFinite(format!("{m} at step {step}")),
                    other => other,
                })?;
            let names: Vec<String> = bg.grads.keys().cloned().collect();
            let mut gv: Vec<Tensor<f32>> = bg.grads.into_values().collect();
            if let Some((name, _)) = names.iter().zip(&gv).find(|(_, g)| !g.all_finite()) {
                return Err(FtmError::NonFinite(format!("gradient of {name} at step {step}")));
            }
            grad_clip_by_global_norm(&mut gv, tc.clip_norm);
            let grad_norm = global_norm(&gv);
            let grads: BTreeMap<String, Tensor<f32>> = names.into_iter().zip(gv).collect();
            adam_step(&mut params, &grads, &mut adam, tc.lr, (tc.beta1, tc.beta2), tc.eps)?;
            log.push(LogRow {
                step,
                xe: bg.xe,
                ctc: bg.ctc,
                total: self.total(bg.xe, bg.ctc),
                grad_norm,
                lr: tc.lr,
            });
            if step % tc.eval_every == 0 || step == steps {
                let loss = self.holdout_loss(&params, hold)?;
                holdout.push(HoldoutRow { step, loss });
                if loss < best.0 {
                    best = (loss, step, params.clone());
                }
            }
        }
        Ok(TrainOutcome {
            params: best.2,
            best_step: best.1,
            log,
            holdout,
        })
    }
}

fn split_examples(pool: Vec<Example>, tc: &TrainConfig) -> (Vec<Example>, Vec<Example>) {
    let (tr, ho) = holdout_split(pool.len(), tc.holdout_fraction, tc.seed);
    let mut slots: Vec<Option<Example>> = pool.into_iter().map(Some).collect();
    let train = tr.iter().map(|&i| slots[i].take().expect("disjoint")).collect();
    let hold = ho
        .iter()
        .take(tc.holdout_max)
        .map(|&i| slots[i].take().expect("disjoint"))
        .collect();
    (train, hold)
}

/// Trains the encoder and phonetic head with CTC only. `examples` is the
/// whole pool; a holdout slice is carved off for validation.
pub fn pretrain_phonetic(cfg: &ModelConfig, tc: &TrainConfig, examples: Vec<Example>) -> Result<TrainOutcome> {
    tc.validate()?;
    if examples.is_empty() {
        return Err(FtmError::Data("pre-training pool is empty".into()));
    }
    let cfg = ModelConfig { dropout: tc.dropout, ..cfg.clone() };
    let mut params = init_params::<f32>(&cfg, derive_seed(tc.seed, 0x1417, 0))?;
    for prefix in ["stcn.", "lstm.", "save."] {
        let names: Vec<String> = params.names().filter(|n| n.starts_with(prefix)).map(str::to_string).collect();
        for n in names {
            params.remove(&n);
        }
    }
    let (train, hold) = split_examples(examples, tc);
    Trainer {
        cfg: &cfg,
        tc,
        objective: Objective::Phonetic,
        trainable: vec!["enc.", "phone."],
    }
    .run(params, &train, &hold, tc.pretrain_steps, 0x9e7)
}

/// Joint XE + λ·CTC training of the `cfg.summary_kind` head, starting from
/// the encoder and phonetic head in `init`.
pub fn train_discriminative(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    examples: Vec<Example>,
    init: &ParamStore<f32>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if examples.is_empty() {
        return Err(FtmError::Data("training selection is empty".into()));
    }
    crate::model::check_compatible(cfg, init)?;
    let cfg = ModelConfig { dropout: tc.dropout, ..cfg.clone() };
    let kind = cfg.summary_kind;
    let mut params = init_params::<f32>(&cfg, derive_seed(tc.seed, 0xd15c, kind as u64))?;
    params.copy_prefix_from(init, "enc.");
    params.copy_prefix_from(init, "phone.");
    let head = kind.head_prefix();
    let trainable = if tc.freeze_encoder {
        vec![head]
    } else {
        vec!["enc.", "phone.", head]
    };
    let (train, hold) = split_examples(examples, tc);
    Trainer {
        cfg: &cfg,
        tc,
        objective: Objective::Joint(kind),
        trainable,
    }
    .run(params, &train, &hold, tc.finetune_steps, 0xf17e + kind as u64 * 16)
}
