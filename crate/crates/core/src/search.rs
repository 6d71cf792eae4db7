//! The search procedure: penalised training, importance tracking, dead-block
//! removal while training, and batch-norm recalibration.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{Augment, Batches, Preprocess, Subset};
use crate::error::{Error, Result};
use crate::flops::FlopsLedger;
use crate::supernet::{KernelCounts, SearchableBlock, Supernet};
use crate::tensor::{optimizer_step, BatchNormState, BnMode, SgdConfig, Tape, Tensor, Var};

/// How the L1 weight of each atomic block is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    /// Weight proportional to the block's MACs.
    Flops,
    /// The same weight for every block.
    Uniform,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L1Update {
    /// Soft-threshold the penalised parameters after each SGD step by
    /// `lr·λ·cᵢ`; unimportant blocks reach exactly zero.
    #[default]
    Proximal,
    /// Back-propagate the penalty subgradient with the task loss.
    Subgradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Target L1 coefficient λ.
    pub lambda: f64,
    /// Epochs over which λ ramps linearly from 0.
    pub warmup_epochs: f64,
    /// EMA decay of |γ|, applied every optimizer step.
    pub beta: f64,
    /// A block is dead when both |γ| and its EMA are below this.
    pub dead_threshold: f64,
    /// Shrink threshold Δ as a fraction of the initial network MACs; used
    /// unless `delta` is set.
    pub delta_fraction: f64,
    /// Shrink threshold Δ in MACs.
    pub delta: Option<u64>,
    pub penalty: Penalty,
    /// How the L1 term enters the optimizer step.
    pub l1_update: L1Update,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Training samples forwarded to re-estimate batch-norm statistics.
    pub bn_recalib_samples: usize,
    pub flip: bool,
    pub pad_crop: usize,
    /// Held-out samples when no separate validation set is given.
    pub val_count: usize,
    /// Use only the first samples of the training split.
    pub max_train_samples: Option<usize>,
    pub eval_batch_size: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lambda: 18.0,
            warmup_epochs: 5.0,
            beta: 0.998,
            dead_threshold: 1e-3,
            delta_fraction: 0.05,
            delta: None,
            penalty: Penalty::Flops,
            l1_update: L1Update::Proximal,
            epochs: 40,
            batch_size: 128,
            lr: 0.05,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 5e-5,
            seed: 0,
            bn_recalib_samples: 8192,
            flip: true,
            pad_crop: 0,
            val_count: 5000,
            max_train_samples: None,
            eval_batch_size: 500,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if !(self.dead_threshold > 0.0) {
            return bad("dead_threshold must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a non-negative number");
        }
        if !(self.warmup_epochs >= 0.0) || self.warmup_epochs > self.epochs as f64 {
            return bad("warmup_epochs must lie in [0, epochs]");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("epochs and batch sizes must be positive");
        }
        if self.bn_recalib_samples == 0 {
            return bad("bn_recalib_samples must be positive");
        }
        if !(self.lr > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr {
            return bad("learning rates must satisfy 0 ≤ lr_min ≤ lr, lr > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative");
        }
        if self.delta.is_none() && !(self.delta_fraction >= 0.0) {
            return bad("delta_fraction must be non-negative");
        }
        Ok(())
    }

    /// Δ in MACs for a network whose initial cost is `initial_flops`.
    pub fn delta_macs(&self, initial_flops: u64) -> u64 {
        self.delta
            .unwrap_or_else(|| (self.delta_fraction * initial_flops as f64).round() as u64)
    }

    pub fn augment(&self) -> Augment {
        Augment {
            flip: self.flip,
            pad_crop: self.pad_crop,
        }
    }
}

/// `λ(e) = λ_target·min(1, e / warmup)`; `e` may be fractional.
pub fn lambda_schedule(epoch: f64, cfg: &SearchConfig) -> f64 {
    if cfg.warmup_epochs <= 0.0 {
        return cfg.lambda;
    }
    cfg.lambda * (epoch.max(0.0) / cfg.warmup_epochs).min(1.0)
}

/// Cosine decay from `lr` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, cfg: &SearchConfig) -> f64 {
    let t = step as f64 / total.max(1) as f64;
    cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + (PI * t.min(1.0)).cos())
}

/// Per-atomic-block L1 weights, indexed like [`Supernet::atoms`].
pub fn penalty_weights(ledger: &FlopsLedger, penalty: Penalty) -> Result<Vec<f64>> {
    match penalty {
        Penalty::Flops => ledger.normalized_costs(),
        Penalty::Uniform => {
            let n = ledger.per_atomic.len();
            if n == 0 {
                return Err(Error::Consistency("empty FLOPs ledger".into()));
            }
            Ok(vec![1.0 / n as f64; n])
        }
    }
}

fn block_weights(block: &SearchableBlock, coefs: &[f64], lambda: f64) -> Result<Vec<f32>> {
    block
        .atom_indices()
        .iter()
        .map(|&a| {
            coefs
                .get(a)
                .map(|&c| (lambda * c) as f32)
                .ok_or_else(|| Error::Consistency(format!("no penalty weight for atomic block {a}")))
        })
        .collect()
}

/// `E + λ·Σᵢ cᵢ·(|γᵢ| + |offsetᵢ|)` over alive atomic blocks.
///
/// Returns the total and the penalty term's value. With `λ = 0` the task
/// loss is returned unchanged.
pub fn regularized_loss(tape: &mut Tape, task: Var, net: &Supernet, coefs: &[f64], lambda: f64) -> Result<(Var, f64)> {
    if lambda == 0.0 {
        return Ok((task, 0.0));
    }
    let mut total = task;
    let mut penalty = 0.0;
    for block in net.blocks() {
        if block.width() == 0 {
            continue;
        }
        let weights = block_weights(block, coefs, lambda)?;
        for id in [block.gamma_id(), block.beta_id()] {
            let p = tape.param(net.params(), id);
            let term = tape.weighted_abs_sum(p, &weights)?;
            penalty += tape.value(term)?.item() as f64;
            total = tape.add(total, term)?;
        }
    }
    Ok((total, penalty))
}

/// Value of `λ·Σᵢ cᵢ·(|γᵢ| + |offsetᵢ|)` without recording it on a tape.
pub fn penalty_value(net: &Supernet, coefs: &[f64], lambda: f64) -> Result<f64> {
    let mut penalty = 0.0;
    for block in net.blocks() {
        let weights = block_weights(block, coefs, lambda)?;
        for id in [block.gamma_id(), block.beta_id()] {
            let v = net.params().get(id).value.data();
            penalty += v.iter().zip(&weights).map(|(x, w)| (x.abs() * w) as f64).sum::<f64>();
        }
    }
    Ok(penalty)
}

/// Proximal step of the L1 term: `x ← sign(x)·max(|x| − lr·λ·cᵢ, 0)` for every
/// BN scale and offset of atomic block `i`.
pub fn l1_proximal_step(net: &mut Supernet, coefs: &[f64], lambda: f64, lr: f64) -> Result<()> {
    let mut updates = Vec::new();
    for block in net.blocks() {
        let weights = block_weights(block, coefs, lambda * lr)?;
        updates.push((block.gamma_id(), weights.clone()));
        updates.push((block.beta_id(), weights));
    }
    for (id, weights) in updates {
        for (x, t) in net.params_mut().get_mut(id).value.data_mut().iter_mut().zip(weights) {
            *x = x.signum() * (x.abs() - t).max(0.0);
        }
    }
    Ok(())
}

/// Per-atomic-block `|γ|` snapshot and its moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceState {
    pub beta: f64,
    pub dead_threshold: f64,
    /// Indexed by atom; `None` once removed.
    entries: Vec<Option<Importance>>,
    block_of: Vec<usize>,
    block_skip: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Importance {
    pub alpha: f64,
    pub ema: f64,
}

impl ImportanceState {
    /// EMA starts at the current `|γ|` of every alive block.
    pub fn new(net: &Supernet, beta: f64, dead_threshold: f64) -> Self {
        let mut entries = vec![None; net.atoms().len()];
        for (a, g) in net.alive_importances() {
            let g = g as f64;
            entries[a] = Some(Importance { alpha: g, ema: g });
        }
        ImportanceState {
            beta,
            dead_threshold,
            entries,
            block_of: net.atoms().iter().map(|d| d.block_index).collect(),
            block_skip: net.blocks().iter().map(|b| b.spec.has_skip).collect(),
        }
    }

    pub fn get(&self, atom: usize) -> Option<Importance> {
        self.entries.get(atom).copied().flatten()
    }

    /// Overwrites one entry; for tests and forced scenarios.
    pub fn set(&mut self, atom: usize, alpha: f64, ema: f64) -> Result<()> {
        match self.entries.get_mut(atom) {
            Some(Some(e)) => {
                *e = Importance { alpha, ema };
                Ok(())
            }
            _ => Err(Error::Index(format!("atomic block {atom} is not tracked"))),
        }
    }

    pub fn alive(&self) -> impl Iterator<Item = (usize, Importance)> + '_ {
        self.entries.iter().enumerate().filter_map(|(a, e)| e.map(|e| (a, e)))
    }

    pub fn alive_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    /// `ema ← β·ema + (1 − β)·|α|` for every tracked block. `current` must
    /// list exactly the tracked blocks.
    pub fn update_ema(&mut self, current: &[(usize, f32)]) -> Result<()> {
        if current.len() != self.alive_count() {
            return Err(Error::Consistency(format!(
                "{} importance values for {} tracked blocks",
                current.len(),
                self.alive_count()
            )));
        }
        for &(a, _) in current {
            if self.get(a).is_none() {
                return Err(Error::Consistency(format!("atomic block {a} is not tracked")));
            }
        }
        let b = self.beta;
        for &(a, v) in current {
            let e = self.entries[a].as_mut().expect("checked above");
            let v = (v as f64).abs();
            e.alpha = v;
            e.ema = b * e.ema + (1.0 - b) * v;
        }
        Ok(())
    }

    /// Blocks whose `|α|` and EMA are both below the threshold. In a block
    /// without a skip connection whose every block is dead, the one with the
    /// largest `|α|` is spared.
    pub fn detect_dead(&self) -> Vec<usize> {
        let th = self.dead_threshold;
        let mut per_block: Vec<(usize, usize)> = vec![(0, 0); self.block_skip.len()];
        let mut dead = Vec::new();
        for (a, e) in self.alive() {
            let b = self.block_of[a];
            per_block[b].0 += 1;
            if e.alpha < th && e.ema < th {
                per_block[b].1 += 1;
                dead.push(a);
            }
        }
        let mut spared = Vec::new();
        for (b, &(alive, n_dead)) in per_block.iter().enumerate() {
            if alive > 0 && alive == n_dead && !self.block_skip[b] {
                let keep = self
                    .alive()
                    .filter(|(a, _)| self.block_of[*a] == b)
                    .fold(None::<(usize, f64)>, |best, (a, e)| match best {
                        Some((_, v)) if v >= e.alpha => best,
                        _ => Some((a, e.alpha)),
                    })
                    .map(|(a, _)| a);
                spared.extend(keep);
            }
        }
        dead.retain(|a| !spared.contains(a));
        dead
    }

    pub fn remove(&mut self, ids: &[usize]) {
        for &a in ids {
            if let Some(e) = self.entries.get_mut(a) {
                *e = None;
            }
        }
    }
}

/// One removal of dead blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkEvent {
    pub epoch: usize,
    pub removed_ids: Vec<usize>,
    pub flops_before: u64,
    pub flops_after: u64,
    /// Validation accuracy right after the removal and recalibration.
    pub accuracy_probe: Option<f64>,
    /// Largest relative change of probe logits caused by the removal.
    pub probe_rel_change: Option<f64>,
}

/// Removes the dead blocks if their total cost reaches `delta`.
pub fn maybe_shrink(
    net: &mut Supernet,
    ledger: &FlopsLedger,
    state: &mut ImportanceState,
    delta: u64,
    epoch: usize,
) -> Result<Option<ShrinkEvent>> {
    let dead = state.detect_dead();
    let dead_cost: u64 = dead.iter().map(|&a| ledger.cost(a)).sum();
    if dead.is_empty() || dead_cost < delta {
        return Ok(None);
    }
    let flops_before = ledger.network_flops(net);
    let removed = net.remove_atomic_blocks(&dead)?;
    state.remove(&removed);
    let flops_after = ledger.network_flops(net);
    let removed_cost: u64 = removed.iter().map(|&a| ledger.cost(a)).sum();
    if flops_after != flops_before - removed_cost {
        return Err(Error::Consistency(format!(
            "FLOPs went from {flops_before} to {flops_after} after removing {removed_cost}"
        )));
    }
    Ok(Some(ShrinkEvent {
        epoch,
        removed_ids: removed,
        flops_before,
        flops_after,
        accuracy_probe: None,
        probe_rel_change: None,
    }))
}

/// Replaces every batch-norm's running statistics with the exact mean and
/// biased variance of its input over the first `sample_count` samples of
/// `batches`. Parameters are untouched. Returns the number of samples used.
pub fn recalibrate_bn(net: &mut Supernet, batches: impl IntoIterator<Item = Tensor>, sample_count: usize) -> Result<usize> {
    if sample_count == 0 {
        return Err(Error::EmptyStream("recalibration needs at least one sample".into()));
    }
    net.bn_states_mut().for_each(|s| s.begin_recalibration());
    let mut used = 0;
    for x in batches {
        if used >= sample_count {
            break;
        }
        let take = x.n().min(sample_count - used);
        let x = if take < x.n() {
            x.select(0, &(0..take).collect::<Vec<_>>())
        } else {
            x
        };
        net.predict(x, BnMode::Recalibrate)?;
        used += take;
    }
    let mut complete = used > 0;
    for s in net.bn_states_mut() {
        complete &= s.finish_recalibration();
    }
    if !complete {
        return Err(Error::EmptyStream("no samples reached the batch-norm layers".into()));
    }
    Ok(used)
}

/// Top-1 accuracy with running batch-norm statistics.
pub fn validate(net: &mut Supernet, batches: impl IntoIterator<Item = (Tensor, Vec<usize>)>) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for (x, labels) in batches {
        let logits = net.predict(x, BnMode::Eval)?;
        correct += count_correct(&logits, &labels);
        total += labels.len();
    }
    if total == 0 {
        return Err(Error::EmptyStream("validation set is empty".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Arg-max per row of `[N, K, 1, 1]` logits, lowest index on ties.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let k = logits.c();
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    predictions(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Training and validation data with the preprocessing fitted on training.
#[derive(Clone, Debug)]
pub struct SearchData {
    pub train: Subset,
    pub val: Subset,
    pub pre: Preprocess,
}

/// Metrics of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub penalty: f64,
    pub val_acc: f64,
    /// Accuracy after this epoch's removal but with the running statistics
    /// accumulated during training, i.e. before recalibration (final epoch
    /// only).
    pub val_acc_before_recalibration: Option<f64>,
    pub flops: u64,
    pub alive_total: usize,
    pub kernel_counts: Vec<KernelCounts>,
    /// Forward MACs spent on training samples so far.
    pub train_macs: u128,
    pub shrink: Option<ShrinkEvent>,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub net: Supernet,
    pub ledger: FlopsLedger,
    pub initial_flops: u64,
    pub records: Vec<EpochRecord>,
    pub events: Vec<ShrinkEvent>,
    /// Batch-norm statistics of the final network as accumulated during
    /// training, before the last recalibration.
    pub momentum_bn: Vec<BatchNormState>,
}

impl SearchOutcome {
    pub fn final_record(&self) -> &EpochRecord {
        self.records.last().expect("at least one epoch")
    }
}

/// Validation mini-batches in order, without augmentation.
pub fn eval_batches<'a>(subset: &'a Subset, cfg: &SearchConfig, pre: &'a Preprocess) -> Result<impl Iterator<Item = (Tensor, Vec<usize>)> + 'a> {
    Ok(Batches::new(subset, cfg.eval_batch_size, false, 0, 0, pre, Augment::NONE)?.map(|b| (b.images, b.labels)))
}

/// Stream used to re-estimate batch-norm statistics after `epoch`: a seeded
/// shuffle of the training split, without augmentation.
pub fn recalibration_batches<'a>(data: &'a SearchData, cfg: &SearchConfig, epoch: usize) -> Result<impl Iterator<Item = Tensor> + 'a> {
    let seed = cfg.seed ^ 0x7ec4_11b0;
    Ok(Batches::new(&data.train, cfg.eval_batch_size, true, seed, epoch as u64, &data.pre, Augment::NONE)?.map(|b| b.images))
}

fn max_rel_change(before: &Tensor, after: &Tensor) -> f64 {
    let diff = before
        .data()
        .iter()
        .zip(after.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    diff as f64 / (before.max_abs() as f64).max(1e-12)
}

/// Trains `net` on the penalised objective, tracks importances every step,
/// and at the end of every epoch removes dead blocks (when their cost reaches
/// Δ), re-estimates batch-norm statistics and validates. The returned network
/// is the final architecture with its trained weights.
pub fn search_loop(
    mut net: Supernet,
    data: &SearchData,
    cfg: &SearchConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::EmptyStream("training and validation splits must be non-empty".into()));
    }
    let ledger = FlopsLedger::new(&net);
    let coefs = penalty_weights(&ledger, cfg.penalty)?;
    let initial_flops = ledger.network_flops(&net);
    let delta = cfg.delta_macs(initial_flops);
    let mut state = ImportanceState::new(&net, cfg.beta, cfg.dead_threshold);
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let probe = Batches::new(&data.val, cfg.eval_batch_size.min(256), false, 0, 0, &data.pre, Augment::NONE)?
        .next()
        .map(|b| b.images)
        .expect("validation split is non-empty");

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut events = Vec::new();
    let mut train_macs: u128 = 0;
    let mut step = 0usize;
    let mut momentum_bn = Vec::new();
    for epoch in 0..cfg.epochs {
        let flops_now = ledger.network_flops(&net) as u128;
        let (mut loss_sum, mut pen_sum, mut seen) = (0.0f64, 0.0f64, 0usize);
        let (mut lambda, mut lr) = (0.0, cfg.lr);
        let batches = Batches::new(&data.train, cfg.batch_size, true, cfg.seed, epoch as u64, &data.pre, cfg.augment())?;
        for (i, batch) in batches.enumerate() {
            lambda = lambda_schedule(epoch as f64 + i as f64 / steps_per_epoch as f64, cfg);
            lr = cosine_lr(step, total_steps, cfg);
            let n = batch.labels.len();
            let mut tape = Tape::new();
            let logits = net.forward(&mut tape, batch.images, BnMode::Train)?;
            let task = tape.softmax_cross_entropy(logits, &batch.labels)?;
            let task_value = tape.value(task)?.item() as f64;
            let (loss, penalty) = match cfg.l1_update {
                L1Update::Subgradient => regularized_loss(&mut tape, task, &net, &coefs, lambda)?,
                L1Update::Proximal => (task, penalty_value(&net, &coefs, lambda)?),
            };
            if !task_value.is_finite() || !penalty.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: i,
                    detail: format!("task loss {task_value}, penalty {penalty}"),
                });
            }
            tape.backward(loss, net.params_mut())?;
            let sgd = SgdConfig {
                lr: lr as f32,
                momentum: cfg.momentum as f32,
                weight_decay: cfg.weight_decay as f32,
            };
            optimizer_step(net.params_mut().iter_mut(), sgd);
            if cfg.l1_update == L1Update::Proximal && lambda > 0.0 {
                l1_proximal_step(&mut net, &coefs, lambda, lr)?;
            }
            state.update_ema(&net.alive_importances())?;
            loss_sum += task_value * n as f64;
            pen_sum += penalty * n as f64;
            seen += n;
            train_macs += flops_now * n as u128;
            step += 1;
        }

        let probe_before = net.predict(probe.clone(), BnMode::Eval)?;
        let mut shrink = maybe_shrink(&mut net, &ledger, &mut state, delta, epoch)?;
        if let Some(ev) = shrink.as_mut() {
            let probe_after = net.predict(probe.clone(), BnMode::Eval)?;
            ev.probe_rel_change = Some(max_rel_change(&probe_before, &probe_after));
        }
        let val_acc_before_recalibration = if epoch + 1 == cfg.epochs {
            momentum_bn = net.bn_states().cloned().collect();
            Some(validate(&mut net, eval_batches(&data.val, cfg, &data.pre)?)?)
        } else {
            None
        };
        recalibrate_bn(&mut net, recalibration_batches(data, cfg, epoch)?, cfg.bn_recalib_samples)?;
        let val_acc = validate(&mut net, eval_batches(&data.val, cfg, &data.pre)?)?;
        if let Some(ev) = shrink.as_mut() {
            ev.accuracy_probe = Some(val_acc);
            events.push(ev.clone());
        }

        let record = EpochRecord {
            epoch,
            lambda,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            penalty: pen_sum / seen.max(1) as f64,
            val_acc,
            val_acc_before_recalibration,
            flops: ledger.network_flops(&net),
            alive_total: net.alive_count(),
            kernel_counts: net.kernel_counts(),
            train_macs,
            shrink,
        };
        observer(&record);
        records.push(record);
    }
    Ok(SearchOutcome {
        net,
        ledger,
        initial_flops,
        records,
        events,
        momentum_bn,
    })
}

/// Plain training of a fixed network (no penalty, no removal) with the same
/// schedule; batch-norm statistics are re-estimated before each validation.
pub fn train_fixed(
    net: Supernet,
    data: &SearchData,
    cfg: &SearchConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<SearchOutcome> {
    let cfg = SearchConfig {
        lambda: 0.0,
        warmup_epochs: 0.0,
        delta: Some(u64::MAX),
        ..cfg.clone()
    };
    net.check_consistency()?;
    let outcome = search_loop(net, data, &cfg, observer)?;
    debug_assert!(outcome.events.is_empty());
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_ramp() {
        let cfg = SearchConfig {
            lambda: 2.0,
            warmup_epochs: 4.0,
            ..SearchConfig::default()
        };
        assert_eq!(lambda_schedule(0.0, &cfg), 0.0);
        assert_eq!(lambda_schedule(2.0, &cfg), 1.0);
        assert_eq!(lambda_schedule(4.0, &cfg), 2.0);
        assert_eq!(lambda_schedule(9.0, &cfg), 2.0);
    }

    #[test]
    fn cosine_endpoints() {
        let cfg = SearchConfig {
            lr: 0.2,
            lr_min: 0.0,
            ..SearchConfig::default()
        };
        assert_eq!(cosine_lr(0, 10, &cfg), 0.2);
        assert!((cosine_lr(5, 10, &cfg) - 0.1).abs() < 1e-12);
        assert!(cosine_lr(10, 10, &cfg).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        for bad in [
            SearchConfig { beta: 1.0, ..SearchConfig::default() },
            SearchConfig { dead_threshold: 0.0, ..SearchConfig::default() },
            SearchConfig { warmup_epochs: 50.0, ..SearchConfig::default() },
            SearchConfig { batch_size: 0, ..SearchConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::from_vec([2, 3, 1, 1], vec![1.0, 1.0, 0.0, -1.0, 0.0, 2.0]).unwrap();
        assert_eq!(predictions(&t), vec![0, 2]);
    }
}
