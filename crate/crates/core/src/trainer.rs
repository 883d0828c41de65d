//! Mini-batch training loop with Adam, global-norm clipping and per-sample
//! teacher forcing.
//!
//! Randomness is split from the config seed: stream 0 initializes weights,
//! stream `1 + e` shuffles epoch `e`, and its child `b` drives dropout and
//! teacher forcing in batch `b`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spt_autograd::{clip_grad_norm, Adam, AdamConfig, Graph, Rng, Var};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{Result, SptError};
use crate::features::PreparedSample;
use crate::material::Dataset;
use crate::model::{Mode, ModelConfig, Seq2Seq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub teacher_forcing_ratio: f64,
    pub seed: u64,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub paper_exact: bool,
    pub gaf_enabled: bool,
    pub loss: LossKind,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            teacher_forcing_ratio: 0.5,
            seed: 0,
            hidden_size: 128,
            num_layers: 5,
            num_heads: 4,
            dropout: 0.1,
            paper_exact: false,
            gaf_enabled: true,
            loss: LossKind::Mse,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SptError::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.eps.is_nan() || self.eps <= 0.0 {
            return bad(format!("lr and eps must be positive (got {}, {})", self.lr, self.eps));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1) (got {}, {})", self.beta1, self.beta2));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing_ratio) {
            return bad(format!(
                "teacher_forcing_ratio must lie in [0, 1], got {}",
                self.teacher_forcing_ratio
            ));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return bad(format!("clip_norm must be non-negative, got {}", self.clip_norm));
        }
        // Remaining architecture checks live with the model.
        self.model_config(2, 1).validate()
    }

    pub fn model_config(&self, l_in: usize, l_out: usize) -> ModelConfig {
        ModelConfig {
            l_in,
            l_out,
            hidden_size: self.hidden_size,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            dropout: self.dropout,
            paper_exact: self.paper_exact,
            gaf_enabled: self.gaf_enabled,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Criterion accumulated step by step, then averaged over the steps.
pub fn loss(pred: &[f64], target: &[f64], kind: LossKind) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(SptError::LengthMismatch {
            expected: target.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(SptError::InvalidArgument("empty sequence".into()));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        total += match kind {
            LossKind::Mse => d * d,
            LossKind::Mae => d.abs(),
        };
    }
    Ok(total / pred.len() as f64)
}

/// Graph version of [`loss`] averaged over every entry of a batch.
pub fn loss_var(g: &mut Graph, pred: Var, target: Var, kind: LossKind) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let e = match kind {
        LossKind::Mse => g.square(d),
        LossKind::Mae => g.abs(d),
    };
    Ok(g.mean(e))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Seq2Seq,
    /// Sample-weighted mean batch loss per epoch.
    pub history: Vec<f64>,
    pub checkpoint: Checkpoint,
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(ds, cfg, |_, _| {})
}

/// Like [`train`], calling `on_epoch(epoch, mean_loss)` after each epoch.
pub fn train_with(ds: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(usize, f64)) -> Result<TrainOutput> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(SptError::InvalidArgument("training set is empty".into()));
    }
    let model_cfg = cfg.model_config(ds.grid.l_in, ds.grid.l_out);
    let root = Rng::new(cfg.seed);
    let mut model = Seq2Seq::new(model_cfg, &mut root.split(0))?;
    let samples = ds
        .samples
        .iter()
        .map(|p| PreparedSample::new(p, &ds.norm_stats, cfg.gaf_enabled))
        .collect::<Result<Vec<_>>>()?;

    let mut adam = Adam::new(cfg.adam(), model.params().tensors());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_rng = root.split(1 + epoch as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        epoch_rng.clone().shuffle(&mut order);

        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &samples[i]).collect();
            let mut rng = epoch_rng.split(b as u64);
            let value = train_step(&mut model, &mut adam, cfg, &batch, &mut rng).map_err(|e| match e {
                SptError::NonFiniteLoss { detail, .. } => SptError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b,
                    detail,
                },
                other => other,
            })?;
            total += value * batch.len() as f64;
        }
        let mean = total / samples.len() as f64;
        history.push(mean);
        on_epoch(epoch + 1, mean);
    }

    model.params_mut().round_to_f32();
    let meta = CheckpointMeta::new(
        cfg.clone(),
        &model,
        ds,
        cfg.epochs,
        *history.last().expect("epochs >= 1"),
    );
    let checkpoint = Checkpoint::from_model(meta, &model)?;
    Ok(TrainOutput {
        model,
        history,
        checkpoint,
    })
}

/// Forward, backward, clip, Adam update and grad reset for one batch.
/// Returns the batch loss before the update.
pub fn train_step(
    model: &mut Seq2Seq,
    adam: &mut Adam,
    cfg: &TrainConfig,
    batch: &[&PreparedSample],
    rng: &mut Rng,
) -> Result<f64> {
    let l_out = model.config().l_out;
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let fwd = model.forward(
        &mut g,
        &p,
        batch,
        Mode::Training {
            rng,
            teacher_forcing_ratio: cfg.teacher_forcing_ratio,
        },
    )?;
    let target: Vec<f64> = batch.iter().flat_map(|s| s.target.iter().copied()).collect();
    let target = g.constant(&[batch.len(), l_out], target)?;
    let loss = loss_var(&mut g, fwd.predictions, target, cfg.loss)?;
    let value = g.value(loss)[0];
    if !value.is_finite() {
        return Err(SptError::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            detail: diagnose(model, value),
        });
    }
    g.backward(loss)?;
    let params = model.params_mut();
    params.accumulate(&g, &p)?;
    if cfg.clip_norm > 0.0 {
        clip_grad_norm(params.tensors_mut(), cfg.clip_norm);
    }
    adam.step(params.tensors_mut())?;
    params.zero_grad();
    Ok(value)
}

fn diagnose(model: &Seq2Seq, value: f64) -> String {
    let params = model.params();
    let worst = params
        .names()
        .iter()
        .zip(params.tensors())
        .map(|(name, t)| {
            let bad = t.data().iter().filter(|v| !v.is_finite()).count();
            let peak = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (name, bad, peak)
        })
        .max_by(|a, b| a.1.cmp(&b.1).then(a.2.total_cmp(&b.2)))
        .expect("model has parameters");
    format!(
        "loss = {value}; parameter `{}` has {} non-finite values, max |value| {:e}",
        worst.0, worst.1, worst.2
    )
}

/// `epoch,mean_loss` with epochs counted from 1.
pub fn write_loss_history(history: &[f64], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,mean_loss\n");
    for (e, l) in history.iter().enumerate() {
        out.push_str(&format!("{},{}\n", e + 1, l));
    }
    let mut f = std::fs::File::create(path).map_err(|e| SptError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| SptError::io(path, e))
}
