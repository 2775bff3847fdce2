//! Deterministic training loop: Adam with decoupled weight decay, linear
//! warmup + cosine decay, global gradient-norm clipping, epoch-derived
//! shuffles. Identical seed and config give bit-identical trajectories.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::SegmentAnnotation;
use crate::model::RaSeformer;
use crate::params::ParamStore;
use crate::synth::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Clips per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Linear warmup over this many epochs, then cosine decay to zero.
    pub warmup_epochs: usize,
    /// Decoupled weight decay; normalization gains and biases are exempt.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub seed: u64,
    /// Evaluate on the test split every N epochs (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_epochs: 2,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::Config("rates must be nonnegative, grad_clip positive".into()));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam first/second moments, aligned with the parameter store order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let m = store
            .entries()
            .map(|(_, e)| vec![0.0; e.tensor.len()])
            .collect::<Vec<_>>();
        AdamState {
            step: 0,
            m: m.clone(),
            v: m,
        }
    }
}

/// One clip of training data.
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub clip_id: String,
    pub features: Tensor<f32>,
    pub annotations: Vec<SegmentAnnotation>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub lr: f64,
    pub map: Option<f64>,
}

/// Linear warmup to `base`, then cosine decay to zero.
pub fn lr_at(step: usize, warmup_steps: usize, total_steps: usize, base: f64) -> f64 {
    if step < warmup_steps {
        return base * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = (total_steps.saturating_sub(warmup_steps)).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// direction is preserved. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }
    norm
}

struct StepStats {
    total: f64,
    cls: f64,
    reg: f64,
}

/// Gradients for one batch, reduced in batch order; plus mean loss pieces.
fn batch_gradients(
    model: &RaSeformer<f32>,
    batch: &[&TrainClip],
    delta_base_s: f64,
    parallel: bool,
) -> Result<(Vec<Vec<f32>>, StepStats)> {
    let per_clip = |clip: &TrainClip| -> Result<(Vec<Option<Tensor<f32>>>, f64, f64, f64)> {
        let mask = vec![true; clip.features.shape()[0]];
        let (fwd, loss) =
            model.loss_for_clip(&clip.features, &mask, &clip.annotations, delta_base_s)?;
        let total = fwd.graph.value(loss.total).item() as f64;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                clip_id: clip.clip_id.clone(),
            });
        }
        let mut grads = fwd.graph.backward(loss.total)?;
        let per_param: Vec<Option<Tensor<f32>>> = fwd
            .bound
            .vars()
            .iter()
            .map(|&v| grads.take(v))
            .collect();
        Ok((per_param, total, loss.cls, loss.reg))
    };

    let results: Vec<_> = if parallel {
        batch.par_iter().map(|c| per_clip(c)).collect()
    } else {
        batch.iter().map(|c| per_clip(c)).collect()
    };

    let mut acc: Vec<Vec<f32>> = model
        .store
        .entries()
        .map(|(_, e)| vec![0.0; e.tensor.len()])
        .collect();
    let scale = 1.0 / batch.len() as f32;
    let mut stats = StepStats {
        total: 0.0,
        cls: 0.0,
        reg: 0.0,
    };
    for r in results {
        let (per_param, total, cls, reg) = r?;
        stats.total += total / batch.len() as f64;
        stats.cls += cls / batch.len() as f64;
        stats.reg += reg / batch.len() as f64;
        for (slot, g) in acc.iter_mut().zip(per_param) {
            if let Some(g) = g {
                for (a, &b) in slot.iter_mut().zip(g.data()) {
                    *a += b * scale;
                }
            }
        }
    }
    Ok((acc, stats))
}

fn adam_step(
    store: &mut ParamStore<f32>,
    adam: &mut AdamState,
    grads: &[Vec<f32>],
    cfg: &TrainConfig,
    lr: f64,
) {
    adam.step += 1;
    let t = adam.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let eps = cfg.epsilon as f32;
    let lr32 = lr as f32;
    let wd = (cfg.weight_decay * lr) as f32;
    for (i, (_, entry)) in store.entries_mut().enumerate() {
        let m = &mut adam.m[i];
        let v = &mut adam.v[i];
        let decay = entry.decay;
        for (j, p) in entry.tensor.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mh = m[j] / bc1 as f32;
            let vh = v[j] / bc2 as f32;
            let mut upd = lr32 * mh / (vh.sqrt() + eps);
            if decay {
                upd += wd * *p;
            }
            *p -= upd;
        }
    }
}

/// Runs epochs `start_epoch..cfg.epochs`. The eval hook runs after any
/// epoch selected by `eval_every` and after the final epoch when nonzero.
#[allow(clippy::too_many_arguments)]
pub fn train_loop<F>(
    model: &mut RaSeformer<f32>,
    adam: &mut AdamState,
    clips: &[TrainClip],
    cfg: &TrainConfig,
    delta_base_s: f64,
    start_epoch: usize,
    threads: usize,
    mut eval_hook: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(usize, &RaSeformer<f32>) -> Result<Option<f64>>,
{
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::Data("no training clips".into()));
    }
    let steps_per_epoch = clips.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let parallel = threads > 1;

    let mut logs = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }

        let mut epoch_total = 0.0;
        let mut epoch_cls = 0.0;
        let mut epoch_reg = 0.0;
        let mut last_lr = 0.0;
        for (bi, batch_ids) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainClip> = batch_ids.iter().map(|&i| &clips[i]).collect();
            let (mut grads, stats) = batch_gradients(model, &batch, delta_base_s, parallel)?;
            clip_grad_norm(&mut grads, cfg.grad_clip);
            let step = epoch * steps_per_epoch + bi;
            last_lr = lr_at(step, warmup_steps, total_steps, cfg.learning_rate);
            adam_step(&mut model.store, adam, &grads, cfg, last_lr);
            let w = batch.len() as f64 / clips.len() as f64;
            epoch_total += stats.total * w;
            epoch_cls += stats.cls * w;
            epoch_reg += stats.reg * w;
        }

        let run_eval = cfg.eval_every > 0
            && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
        let map = if run_eval {
            eval_hook(epoch, model)?
        } else {
            None
        };
        logs.push(EpochLog {
            epoch,
            loss_total: epoch_total,
            loss_cls: epoch_cls,
            loss_reg: epoch_reg,
            lr: last_lr,
            map,
        });
    }
    Ok(logs)
}

/// Sanity oracle: keep taking optimizer steps on one clip at a constant
/// learning rate until the loss target or the step budget is hit. Returns
/// (final loss, steps taken).
pub fn overfit_probe(
    model: &mut RaSeformer<f32>,
    clip: &TrainClip,
    max_steps: usize,
    target_loss: f64,
    cfg: &TrainConfig,
) -> Result<(f64, usize)> {
    let mut adam = AdamState::new(&model.store);
    let delta = 4.0 / 30.0;
    let mut last = f64::INFINITY;
    for step in 0..max_steps {
        let (mut grads, stats) = batch_gradients(model, &[clip], delta, false)?;
        last = stats.total;
        if last < target_loss {
            return Ok((last, step));
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        adam_step(&mut model.store, &mut adam, &grads, cfg, cfg.learning_rate);
    }
    Ok((last, max_steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionConfig, Variant};
    use crate::encoder::EncoderConfig;
    use crate::heads::HeadConfig;
    use rand::SeedableRng;

    fn tiny_model(seed: u64) -> RaSeformer<f32> {
        let enc = EncoderConfig {
            d_in: 4,
            d_model: 8,
            levels: 2,
            blocks_per_level: 1,
            stem_blocks: 1,
            ffn_expansion: 2,
            attention: AttentionConfig {
                d_model: 8,
                heads: 2,
                window: 5,
                keep_ratio: 0.5,
                variant: Variant::PerHeadTopK,
                qkv_conv_width: 3,
            },
        };
        let heads = HeadConfig {
            num_classes: 2,
            head_conv_layers: 1,
            regression_ranges: HeadConfig::default_ranges(2),
        };
        RaSeformer::init(enc, heads, seed).unwrap()
    }

    fn tiny_clip(seed: u64) -> TrainClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrainClip {
            clip_id: format!("clip{seed}"),
            features: Tensor::randn(&[16, 4], 1.0, &mut rng),
            annotations: vec![SegmentAnnotation {
                label: 1,
                start_s: 0.4,
                end_s: 1.4,
            }],
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut model = tiny_model(0);
        let before: Vec<Vec<f32>> = model
            .store
            .entries()
            .map(|(_, e)| e.tensor.data().to_vec())
            .collect();
        let mut adam = AdamState::new(&model.store);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 1,
            learning_rate: 0.0,
            ..Default::default()
        };
        let clips = vec![tiny_clip(1), tiny_clip(2)];
        train_loop(&mut model, &mut adam, &clips, &cfg, 4.0 / 30.0, 0, 1, |_, _| Ok(None))
            .unwrap();
        for ((_, e), b) in model.store.entries().zip(&before) {
            assert_eq!(e.tensor.data(), b.as_slice(), "{} moved at lr 0", e.name);
        }
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        for seed in 0..5u64 {
            let mut model = tiny_model(seed);
            let clip = tiny_clip(100 + seed);
            let mut adam = AdamState::new(&model.store);
            let cfg = TrainConfig::default();
            let mut losses = Vec::new();
            for _ in 0..10 {
                let (mut grads, stats) =
                    batch_gradients(&model, &[&clip], 4.0 / 30.0, false).unwrap();
                losses.push(stats.total);
                clip_grad_norm(&mut grads, cfg.grad_clip);
                adam_step(&mut model.store, &mut adam, &grads, &cfg, cfg.learning_rate);
            }
            for w in losses.windows(2) {
                assert!(
                    w[1] < w[0],
                    "seed {seed}: loss went {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn clipping_preserves_gradient_direction() {
        let mut grads = vec![vec![3.0f32, 4.0], vec![12.0]];
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert!((norm - 13.0).abs() < 1e-6);
        // direction: components stay proportional to (3, 4, 12) / 13
        assert!((grads[0][0] / grads[0][1] - 0.75).abs() < 1e-6);
        assert!((grads[1][0] / grads[0][1] - 3.0).abs() < 1e-6);
        let new_norm = (grads[0][0].powi(2) + grads[0][1].powi(2) + grads[1][0].powi(2)).sqrt();
        assert!((new_norm - 1.0).abs() < 1e-6);

        let mut small = vec![vec![0.1f32, 0.2]];
        let copy = small.clone();
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, copy, "norms under the ceiling must pass through");
    }

    #[test]
    fn warmup_then_cosine_schedule() {
        let base = 1e-3;
        assert!(lr_at(0, 10, 100, base) < base * 0.11);
        assert!((lr_at(9, 10, 100, base) - base).abs() < 1e-12);
        assert!((lr_at(10, 10, 100, base) - base).abs() < 1e-5);
        assert!(lr_at(99, 10, 100, base) < base * 0.01);
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let run = || {
            let mut model = tiny_model(3);
            let mut adam = AdamState::new(&model.store);
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 2,
                ..Default::default()
            };
            let clips = vec![tiny_clip(1), tiny_clip(2), tiny_clip(3)];
            train_loop(&mut model, &mut adam, &clips, &cfg, 4.0 / 30.0, 0, 1, |_, _| Ok(None))
                .unwrap();
            model
                .store
                .entries()
                .flat_map(|(_, e)| e.tensor.data().to_vec())
                .collect::<Vec<f32>>()
        };
        assert_eq!(run(), run());
    }
}
