//! Mini-batch training of the fusion module and heads, checkpoints, logs.
//!
//! Every random choice is a pure function of the configured seed and the
//! global step: epoch `e` is shuffled by ChaCha8 seeded with `seed` on stream
//! `e`, and two-view augmentation noise for step `s` uses stream `2^32 + s`.
//! A checkpoint therefore only needs the seed and the step to resume.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::model::{hash64, Model, ModelConfig};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::objectives::{
    cross_entropy_node, infonce_node, infonce_two_view_node, mask_targets, text_loss_node, total_loss, LossBreakdown,
    LossComponents, LossWeights, DICE_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Parameter(format!("unknown optimizer {s:?} (sgd, adam)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Global gradient-norm cap; 0 disables it.
    pub max_grad_norm: f64,
    /// Contrastive positives from an augmented second view instead of self-pairs.
    pub two_view: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            max_grad_norm: 0.0,
            two_view: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Parameter(format!(
                "learning_rate must be finite and ≥ 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Parameter("adam betas must lie in [0, 1) and eps be > 0".into()));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(Error::Parameter(format!("max_grad_norm must be ≥ 0, got {}", self.max_grad_norm)));
        }
        self.weights.validate()
    }

    pub fn canonical(&self) -> String {
        let w = &self.weights;
        format!(
            "epochs={}\nbatch_size={}\nlearning_rate={}\ntrain_seed={}\nlambda_c={}\nlambda_bce={}\nlambda_dice={}\ntau={}\noptimizer={}\nbeta1={}\nbeta2={}\nadam_eps={}\ncheckpoint_every={}\nmax_grad_norm={}\ntwo_view={}\n",
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.seed,
            w.lambda_c,
            w.lambda_bce,
            w.lambda_dice,
            w.tau,
            self.optimizer.as_str(),
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.checkpoint_every,
            self.max_grad_norm,
            self.two_view
        )
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Adam moments (empty for SGD), one tensor per trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, model: &Model) -> Self {
        let zeros = || -> Vec<Tensor> {
            match kind {
                OptimizerKind::Sgd => Vec::new(),
                OptimizerKind::Adam => model.named_params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            }
        };
        Self {
            kind,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn apply(&mut self, model: &mut Model, grads: &[Tensor], cfg: &TrainConfig) {
        self.t += 1;
        let lr = cfg.learning_rate;
        let params = model.named_params_mut();
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, p), g) in params.into_iter().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (cfg.beta1, cfg.beta2);
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for (i, ((_, p), g)) in params.into_iter().zip(grads).enumerate() {
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for (j, (x, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = b1 * m[j] + (1.0 - b1) * d;
                        v[j] = b2 * v[j] + (1.0 - b2) * d * d;
                        *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
                    }
                }
            }
        }
    }
}

/// Loss terms of one batch on the tape.
#[derive(Clone, Copy, Debug)]
pub struct BatchLossNodes {
    pub total: NodeId,
    pub l_t: NodeId,
    pub l_cls: NodeId,
    pub l_bce: NodeId,
    pub l_dice: NodeId,
    pub l_cl: NodeId,
}

fn mean_of(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let all = g.concat(terms, &[terms.len()])?;
    Ok(g.mean(all))
}

/// Horizontal flip plus uniform noise of half-width 0.02.
pub fn augment(image: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (h, w, c) = image.dims3()?;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(y * w + x) * c + ch] = src[(y * w + (w - 1 - x)) * c + ch] + rng.gen_range(-0.02..0.02);
            }
        }
    }
    Tensor::new(&[h, w, c], out)
}

fn augment_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1u64 << 32) + step);
    rng
}

/// Records the batch objective. `views` holds the augmented second views
/// when two-view contrastive training is on.
pub fn batch_loss_node(
    g: &mut Graph,
    model: &Model,
    nodes: &crate::model::ModelNodes,
    batch: &[Sample],
    views: Option<&[Tensor]>,
    w: &LossWeights,
) -> Result<BatchLossNodes> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut t_terms = Vec::new();
    let mut cls_terms = Vec::new();
    let mut bce_terms = Vec::new();
    let mut dice_terms = Vec::new();
    let mut z = Vec::new();
    for s in batch {
        let out = model.forward_node(g, nodes, &s.image)?;
        if s.mask.len() != g.value(out.heads.mask_logits).len() {
            return Err(Error::dim(format!("{}: mask size differs from image", s.id)));
        }
        t_terms.push(text_loss_node(g, out.heads.slot_logits, &s.explanation)?);
        cls_terms.push(cross_entropy_node(g, out.heads.det_logits, s.label.index())?);
        let target = mask_targets(&s.mask);
        bce_terms.push(g.bce_logits(out.heads.mask_logits, target.clone())?);
        dice_terms.push(g.dice_logits(out.heads.mask_logits, target, DICE_EPS)?);
        z.push(out.embedding);
    }
    let n = batch.len();
    let d = g.value(z[0]).len();
    let zs = g.concat(&z, &[n, d])?;
    let l_cl = match views {
        None => infonce_node(g, zs, w.tau)?,
        Some(views) => {
            if views.len() != n {
                return Err(Error::Data(format!("{} views for {n} samples", views.len())));
            }
            let zb = views
                .iter()
                .map(|v| model.embed_node(g, nodes, v))
                .collect::<Result<Vec<_>>>()?;
            let zb = g.concat(&zb, &[n, d])?;
            infonce_two_view_node(g, zs, zb, w.tau)?
        }
    };
    let l_t = mean_of(g, &t_terms)?;
    let l_cls = mean_of(g, &cls_terms)?;
    let l_bce = mean_of(g, &bce_terms)?;
    let l_dice = mean_of(g, &dice_terms)?;

    let pred = g.add(l_t, l_cls)?;
    let bce = g.scale(l_bce, w.lambda_bce);
    let dice = g.scale(l_dice, w.lambda_dice);
    let mask = g.add(bce, dice)?;
    let pred = g.add(pred, mask)?;
    let cl = g.scale(l_cl, w.lambda_c);
    let total = g.add(pred, cl)?;
    Ok(BatchLossNodes {
        total,
        l_t,
        l_cls,
        l_bce,
        l_dice,
        l_cl,
    })
}

/// Breakdown, and the gradient of every trainable tensor in model order.
pub fn batch_gradients(
    model: &Model,
    batch: &[Sample],
    views: Option<&[Tensor]>,
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut g = Graph::new();
    let nodes = model.bind(&mut g, true);
    let l = batch_loss_node(&mut g, model, &nodes, batch, views, w)?;
    let breakdown = total_loss(
        &LossComponents {
            l_t: g.scalar(l.l_t),
            l_cls: g.scalar(l.l_cls),
            l_bce: g.scalar(l.l_bce),
            l_dice: g.scalar(l.l_dice),
            l_cl: g.scalar(l.l_cl),
        },
        w,
    );
    if !breakdown.is_finite() {
        return Ok((breakdown, Vec::new()));
    }
    let grads = g.backward(l.total)?;
    let out = nodes
        .ids()
        .into_iter()
        .map(|id| grads.get(id).cloned().expect("trainable node has a gradient"))
        .collect();
    Ok((breakdown, out))
}

/// One optimiser step. Returns the breakdown measured before the update.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &[Sample],
    cfg: &TrainConfig,
    step: u64,
) -> Result<LossBreakdown> {
    if let Some(s) = batch.iter().find(|s| s.image.shape() != batch[0].image.shape()) {
        return Err(Error::dim(format!("{} differs in shape from the rest of the batch", s.id)));
    }
    let views = if cfg.two_view {
        let mut rng = augment_rng(cfg.seed, step);
        Some(batch.iter().map(|s| augment(&s.image, &mut rng)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let (breakdown, mut grads) = batch_gradients(model, batch, views.as_deref(), &cfg.weights)?;
    if !breakdown.is_finite() {
        return Err(Error::Divergence {
            step,
            breakdown: Box::new(breakdown),
        });
    }
    if cfg.max_grad_norm > 0.0 {
        let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if norm > cfg.max_grad_norm {
            let s = cfg.max_grad_norm / norm;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    opt.apply(model, &grads, cfg);
    Ok(breakdown)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    /// 1-based index of the optimiser step.
    pub step: u64,
    pub loss: LossBreakdown,
}

pub const CSV_HEADER: &str = "step,l_total,l_pred,l_cl,l_t,l_cls,l_bce,l_dice";

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(
            f,
            "{},{},{},{},{},{},{},{}",
            self.step, l.l_total, l.l_pred, l.l_cl, l.l_t, l.l_cls, l.l_bce, l.l_dice
        )
    }
}

/// Training state: model, optimiser and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    /// Optimiser steps taken so far.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(config.optimizer, &model);
        Ok(Self {
            model,
            config,
            optimizer,
            step: 0,
        })
    }

    /// Resumes from a checkpoint. The optimiser kind must match.
    pub fn resume(checkpoint: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if checkpoint.optimizer.kind != config.optimizer {
            return Err(Error::Version(format!(
                "checkpoint optimiser {} differs from configured {}",
                checkpoint.optimizer.kind.as_str(),
                config.optimizer.as_str()
            )));
        }
        if checkpoint.rng_seed != config.seed {
            return Err(Error::Version(format!(
                "checkpoint seed {} differs from configured {}",
                checkpoint.rng_seed, config.seed
            )));
        }
        Ok(Self {
            model: checkpoint.to_model()?,
            config,
            optimizer: checkpoint.optimizer.clone(),
            step: checkpoint.step,
        })
    }

    /// Sample order of epoch `epoch` (0-based).
    pub fn epoch_order(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        (self.config.epochs * self.config.steps_per_epoch(n)) as u64
    }

    /// Runs until `stop_at` steps have been taken in total (or the schedule
    /// ends), calling `on_step` after each step.
    pub fn run(
        &mut self,
        samples: &[Sample],
        stop_at: Option<u64>,
        mut on_step: impl FnMut(&Trainer, &LogRow) -> Result<()>,
    ) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let n = samples.len();
        let spe = self.config.steps_per_epoch(n) as u64;
        let end = stop_at.map_or(self.total_steps(n), |s| s.min(self.total_steps(n)));
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while self.step < end {
            let epoch = self.step / spe;
            let k = (self.step % spe) as usize;
            let order = self.epoch_order(epoch, n);
            let b = self.config.batch_size;
            batch.clear();
            batch.extend(order[k * b..((k + 1) * b).min(n)].iter().map(|&i| samples[i].clone()));
            let loss = train_step(&mut self.model, &mut self.optimizer, &batch, &self.config, self.step + 1)?;
            self.step += 1;
            on_step(self, &LogRow { step: self.step, loss })?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config.clone(),
            train_config_text: self.config.canonical(),
            step: self.step,
            rng_seed: self.config.seed,
            params: self
                .model
                .named_params()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            optimizer: self.optimizer.clone(),
        }
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<LogRow>,
    /// Checkpoint files written, in order.
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    /// Mean `l_total` of every epoch, in order.
    pub fn epoch_means(&self, steps_per_epoch: usize) -> Vec<f64> {
        self.log
            .chunks(steps_per_epoch)
            .map(|c| c.iter().map(|r| r.loss.l_total).sum::<f64>() / c.len() as f64)
            .collect()
    }
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

/// Trains from scratch. With `out_dir`, writes the CSV log as it goes,
/// periodic checkpoints `step-<n>.ckpt` and `final.ckpt`. On divergence the
/// error is returned and earlier checkpoints stay on disk.
pub fn train(
    samples: &[Sample],
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let trainer = Trainer::new(Model::new(model_config)?, config)?;
    continue_training(trainer, samples, out_dir)
}

/// Runs `trainer` to the end of its schedule; see [`train`].
pub fn continue_training(mut trainer: Trainer, samples: &[Sample], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let fresh = trainer.step == 0 || !path.exists();
            let mut file = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(file, "{CSV_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((file, path))
        }
        None => None,
    };
    let every = trainer.config.checkpoint_every;
    trainer.run(samples, None, |t, row| {
        log.push(*row);
        if let Some((file, path)) = csv.as_mut() {
            writeln!(file, "{row}").map_err(|e| Error::io(&*path, e))?;
        }
        if let (Some(dir), true) = (out_dir, every > 0 && row.step % every == 0) {
            let p = dir.join(format!("step-{}.ckpt", row.step));
            t.checkpoint().save(&p)?;
            checkpoints.push(p);
        }
        Ok(())
    })?;
    if let Some(dir) = out_dir {
        let p = dir.join(FINAL_CHECKPOINT);
        trainer.checkpoint().save(&p)?;
        checkpoints.push(p);
    }
    Ok(TrainOutcome {
        trainer,
        log,
        checkpoints,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TMPSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trainable parameters, optimiser state and schedule position. The frozen
/// encoder is not stored; it is re-derived from the model seed.
///
/// Binary layout, little-endian throughout:
///
/// ```text
/// magic "TMPSCKPT" | version u32 | config_hash u64 | step u64 | rng_seed u64
/// model config  : u32 length + UTF-8 `key=value` lines
/// train config  : u32 length + UTF-8 `key=value` lines
/// optimizer     : u8 kind (0 sgd, 1 adam) | t u64
/// block count   : u32
/// block         : u16 name length | name | u8 rank | u32 dims… | f64 values…
/// ```
///
/// Parameter blocks come first in model order, then `adam.m.<name>` and
/// `adam.v.<name>` blocks for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config_text: String,
    pub step: u64,
    pub rng_seed: u64,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: OptimizerState,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                what: "checkpoint".into(),
                offset: self.pos,
                msg: format!("truncated: need {n} more bytes"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Parse {
            what: "checkpoint".into(),
            offset: at,
            msg: "text block is not UTF-8".into(),
        })
    }

    fn block(&mut self) -> Result<(String, Tensor)> {
        let at = self.pos;
        let n = self.u16()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Parse {
            what: "checkpoint".into(),
            offset: at,
            msg: "block name is not UTF-8".into(),
        })?;
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = self.take(len.checked_mul(8).ok_or_else(|| Error::Data("block too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Parse {
            what: "checkpoint".into(),
            offset: at,
            msg: format!("block {name}: {e}"),
        })?;
        Ok((name, t))
    }
}

fn put_block(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Checkpoint {
    pub fn config_hash(&self) -> u64 {
        self.model_config.hash()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend(self.config_hash().to_le_bytes());
        out.extend(self.step.to_le_bytes());
        out.extend(self.rng_seed.to_le_bytes());
        put_text(&mut out, &self.model_config.canonical());
        put_text(&mut out, &self.train_config_text);
        out.push(match self.optimizer.kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => 1,
        });
        out.extend(self.optimizer.t.to_le_bytes());
        let n = self.params.len() * if self.optimizer.kind == OptimizerKind::Adam { 3 } else { 1 };
        out.extend((n as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_block(&mut out, name, t);
        }
        for (prefix, moments) in [("adam.m.", &self.optimizer.m), ("adam.v.", &self.optimizer.v)] {
            for ((name, _), t) in self.params.iter().zip(moments) {
                put_block(&mut out, &format!("{prefix}{name}"), t);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(Error::Parse {
                what: "checkpoint".into(),
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let hash = r.u64()?;
        let step = r.u64()?;
        let rng_seed = r.u64()?;
        let model_text = r.text()?;
        let model_config = ModelConfig::from_canonical(&model_text)?;
        if model_config.hash() != hash || hash64(model_text.as_bytes()) != hash {
            return Err(Error::Version(format!(
                "checkpoint config hash {hash:016x} does not match its stored model config"
            )));
        }
        let train_config_text = r.text()?;
        let kind = match r.u8()? {
            0 => OptimizerKind::Sgd,
            1 => OptimizerKind::Adam,
            k => return Err(Error::Data(format!("unknown optimiser tag {k}"))),
        };
        let t = r.u64()?;
        let n = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            blocks.push(r.block()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                what: "checkpoint".into(),
                offset: r.pos,
                msg: "trailing bytes".into(),
            });
        }
        if kind == OptimizerKind::Adam && n % 3 != 0 {
            return Err(Error::Data(format!("{n} blocks cannot hold Adam state")));
        }
        let k = if kind == OptimizerKind::Adam { n / 3 } else { n };
        let v = blocks.split_off(2 * k.min(n));
        let m = blocks.split_off(k);
        let params = blocks;
        let strip = |moments: Vec<(String, Tensor)>, prefix: &str| -> Result<Vec<Tensor>> {
            moments
                .into_iter()
                .zip(&params)
                .map(|((name, t), (p, pt))| {
                    if name != format!("{prefix}{p}") || t.shape() != pt.shape() {
                        Err(Error::Data(format!("optimiser block {name} does not match parameter {p}")))
                    } else {
                        Ok(t)
                    }
                })
                .collect()
        };
        let (m, v) = if kind == OptimizerKind::Adam {
            (strip(m, "adam.m.")?, strip(v, "adam.v.")?)
        } else {
            (Vec::new(), Vec::new())
        };
        let ck = Self {
            model_config,
            train_config_text,
            step,
            rng_seed,
            params,
            optimizer: OptimizerState { kind, t, m, v },
        };
        ck.to_model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Rebuilds the model: frozen encoder from the seed, the rest from the
    /// stored blocks, matched by name and shape.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model_config.clone())?;
        let names: Vec<&str> = model.named_params().iter().map(|(n, _)| *n).collect();
        let stored: Vec<&str> = self.params.iter().map(|(n, _)| n.as_str()).collect();
        if names != stored {
            return Err(Error::Version(format!(
                "checkpoint parameters {stored:?} do not match the model's {names:?}"
            )));
        }
        let values: Vec<Tensor> = self.params.iter().map(|(_, t)| t.clone()).collect();
        model.set_params(&values).map_err(|e| Error::Version(e.to_string()))?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{DatagenConfig, Generator, Manipulation};
    use crate::faf::FafDims;
    use crate::heads::{BackboneDims, Cue, Explanation, Region, Verdict};
    use crate::numerics::compare_gradients;

    pub(crate) fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            faf: FafDims {
                patch: 4,
                channels: 3,
                d_k: 8,
                d_v: 8,
                d_h: 8,
                d_embed: 8,
            },
            backbone: BackboneDims {
                cell: 8,
                channels: 3,
                c_b: 8,
                d_b: 8,
                c_s: 4,
                c_u: 8,
            },
            seed: 1,
            use_faf: true,
        }
    }

    fn tiny_samples(n: usize) -> Vec<Sample> {
        let g = Generator::default();
        (0..n as u64)
            .map(|i| {
                let kind = [Manipulation::None, Manipulation::CopyMove, Manipulation::Splicing][i as usize % 3];
                g.generate(kind, i, 32, 1.0).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let samples = tiny_samples(3);
        let mut model = Model::new(tiny_model_config()).unwrap();
        let before = model.clone();
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let cfg = TrainConfig {
                learning_rate: 0.0,
                optimizer: kind,
                ..TrainConfig::default()
            };
            let mut opt = OptimizerState::new(kind, &model);
            let l = train_step(&mut model, &mut opt, &samples, &cfg, 1).unwrap();
            assert!(l.is_finite() && l.l_total > 0.0);
            assert_eq!(model, before);
        }
    }

    #[test]
    fn batch_breakdown_identities() {
        let model = Model::new(tiny_model_config()).unwrap();
        let w = LossWeights::default();
        let (b, grads) = batch_gradients(&model, &tiny_samples(4), None, &w).unwrap();
        assert_eq!(grads.len(), model.named_params().len());
        assert!((b.l_total - (b.l_pred + w.lambda_c * b.l_cl)).abs() <= 1e-12);
        assert!((b.l_pred - (b.l_t + b.l_cls + b.l_mask)).abs() <= 1e-12);
    }

    #[test]
    fn mixed_shapes_rejected() {
        let mut s = tiny_samples(2);
        s[1] = Generator::default().authentic(3, 64, 64).unwrap();
        let mut model = Model::new(tiny_model_config()).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Adam, &model);
        let r = train_step(&mut model, &mut opt, &s, &TrainConfig::default(), 1);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let s = tiny_samples(2);
        let mut model = Model::new(tiny_model_config()).unwrap();
        model.backbone.phi_bias.data_mut()[0] = f64::NAN;
        let mut opt = OptimizerState::new(OptimizerKind::Adam, &model);
        match train_step(&mut model, &mut opt, &s, &TrainConfig::default(), 7) {
            Err(Error::Divergence { step, breakdown }) => {
                assert_eq!(step, 7);
                assert!(!breakdown.is_finite());
            }
            other => panic!("{other:?}"),
        }
    }

    fn micro_config() -> ModelConfig {
        ModelConfig {
        image_size: 8,
        faf: FafDims {
            patch: 2,
            channels: 3,
            d_k: 3,
            d_v: 3,
            d_h: 4,
            d_embed: 3,
        },
        backbone: BackboneDims {
            cell: 4,
            channels: 3,
            c_b: 3,
            d_b: 3,
            c_s: 2,
            c_u: 3,
        },
        seed: 5,
        use_faf: true,
    }
    }

    /// Two random 8×8 images: one authentic, one with a tampered square.
    fn micro_batch(seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..2u64)
            .map(|i| {
                let mut s = Generator::default().authentic(i, 32, 32).unwrap();
                s.image = Tensor::from_fn(&[8, 8, 3], |_| rng.gen_range(0.0..1.0));
                s.mask = vec![false; 64];
                if i == 1 {
                    for y in 0..4 {
                        for x in 0..4 {
                            s.mask[y * 8 + x] = true;
                        }
                    }
                    s.label = Verdict::Tampered;
                    s.explanation = Explanation::new(Verdict::Tampered, Region::NorthWest, Cue::BoundaryDiscontinuity).unwrap();
                }
                s
            })
            .collect()
    }

    fn steps(model: &mut Model, batch: &[Sample], cfg: &TrainConfig, n: u64) -> Vec<f64> {
        let mut opt = OptimizerState::new(cfg.optimizer, model);
        (1..=n).map(|t| train_step(model, &mut opt, batch, cfg, t).unwrap().l_total).collect()
    }

    #[test]
    fn sgd_lowers_loss_on_fixed_batch() {
        let batch = micro_batch(11);
        let mut model = Model::new(micro_config()).unwrap();
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let l = steps(&mut model, &batch, &cfg, 51);
        assert!(l[50] < l[0], "{} -> {}", l[0], l[50]);
    }

    #[test]
    fn overfits_single_batch() {
        let batch = tiny_samples(4);
        let mut model = Model::new(tiny_model_config()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut opt = OptimizerState::new(cfg.optimizer, &model);
        let mut best = f64::INFINITY;
        for t in 1..=500 {
            let l = train_step(&mut model, &mut opt, &batch, &cfg, t).unwrap();
            best = best.min(l.l_total);
        }
        assert!(best < 0.05, "best {best}");
    }

    #[test]
    fn two_view_gradients_match_finite_differences() {
        let cfg = micro_config();
        let mut model = Model::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<Sample> = (0..2)
            .map(|i| {
                let mut s = Generator::default().authentic(i, 32, 32).unwrap();
                s.image = Tensor::from_fn(&[8, 8, 3], |_| rng.gen_range(0.0..1.0));
                s.mask = vec![false; 64];
                s
            })
            .collect();
        let views: Vec<Tensor> = samples.iter().map(|s| augment(&s.image, &mut rng).unwrap()).collect();
        let w = LossWeights::default();
        let (_, analytic) = batch_gradients(&model, &samples, Some(&views), &w).unwrap();
        let params: Vec<Tensor> = model.named_params().iter().map(|(_, t)| (*t).clone()).collect();
        let report = compare_gradients(&params, &analytic, 1e-5, 1e-3, |p| {
            model.set_params(p)?;
            Ok(batch_gradients(&model, &samples, Some(&views), &w)?.0.l_total)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let samples = tiny_samples(3);
        let mut t = Trainer::new(Model::new(tiny_model_config()).unwrap(), TrainConfig::default()).unwrap();
        t.run(&samples, Some(2), |_, _| Ok(())).unwrap();
        let ck = t.checkpoint();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.to_model().unwrap(), t.model);

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Version(_))));
        let mut bad = bytes.clone();
        bad[12] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Version(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(Error::Parse { .. })));
    }

    #[test]
    fn checkpoint_excludes_frozen_encoder() {
        let t = Trainer::new(Model::new(tiny_model_config()).unwrap(), TrainConfig::default()).unwrap();
        assert!(t.checkpoint().params.iter().all(|(n, _)| !n.starts_with("frozen.")));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let samples = tiny_samples(5);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            two_view: true,
            ..TrainConfig::default()
        };
        let mut full = Trainer::new(Model::new(tiny_model_config()).unwrap(), cfg).unwrap();
        let mut full_log = Vec::new();
        full.run(&samples, None, |_, r| Ok(full_log.push(*r))).unwrap();
        assert_eq!(full_log.len(), 6);

        let mut first = Trainer::new(Model::new(tiny_model_config()).unwrap(), cfg).unwrap();
        let mut log = Vec::new();
        first.run(&samples, Some(4), |_, r| Ok(log.push(*r))).unwrap();
        let ck = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
        let mut second = Trainer::resume(&ck, cfg).unwrap();
        second.run(&samples, None, |_, r| Ok(log.push(*r))).unwrap();
        assert_eq!(log, full_log);
        assert_eq!(second.checkpoint().to_bytes(), full.checkpoint().to_bytes());
    }

    #[test]
    fn train_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples(5);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            checkpoint_every: 4,
            ..TrainConfig::default()
        };
        let out = train(&samples, tiny_model_config(), cfg, Some(dir.path())).unwrap();
        let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert_eq!(out.checkpoints.len(), 2);
        let last = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(last.step, 6);
        let mid = Checkpoint::load(&dir.path().join("step-4.ckpt")).unwrap();
        assert_eq!(mid.step, 4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..TrainConfig::default() }.validate().is_err());
        let d = DatagenConfig::default();
        assert_eq!(TrainConfig::default().steps_per_epoch(d.n_train), 50);
    }
}
