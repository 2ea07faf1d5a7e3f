//! Loss, optimizer, learning-rate schedule, the training loop, and
//! checkpoint persistence.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointError, TranslationSystem, BPE_FILE, VOCAB_FILE};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::RunConfig;
use crate::memory::gated_encoder_output;
use crate::model::{q32, BoundModel, ModelParameters, ParamStore};
use crate::tensor::{Tape, Var};
use crate::text::{make_batches, mix_seed, Batch, DocumentCorpus, BOS};
use crate::transformer::{decode_logits, Dropout, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGrad { param: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// The inverse-square-root schedule with linear warmup; both branches cross
/// exactly at step = warmup.
pub fn noam_lr(step: usize, model_dim: usize, warmup: usize) -> f64 {
    assert!(step >= 1, "schedule steps are 1-based");
    let step = step as f64;
    let warmup = warmup.max(1) as f64;
    (model_dim as f64).powf(-0.5) * (step.powf(-0.5)).min(step * warmup.powf(-1.5))
}

/// Per-token KL from the label-smoothed target distribution (1 - eps on the
/// gold id, eps/(V-1) elsewhere) to the predicted softmax, averaged over
/// non-PAD tokens. `pad_mask` is `true` at PAD positions.
pub fn label_smoothed_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    targets: &[u32],
    smoothing: f64,
    pad_mask: Option<&[bool]>,
) -> Result<Var, ModelError> {
    let include: Vec<bool> = match pad_mask {
        Some(m) => m.iter().map(|&pad| !pad).collect(),
        None => vec![true; targets.len()],
    };
    let count = include.iter().filter(|&&x| x).count().max(1);
    let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let sum = tape.label_smoothed_ce_sum(logits, &ids, smoothing, &include)?;
    Ok(tape.scale(sum, 1.0 / count as f64))
}

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.98, eps = 1e-9).
/// Moments and parameters are quantized to the f32 lattice after every
/// update so checkpoints serialize losslessly.
pub struct OptimizerState {
    pub step: usize,
    pub warmup_steps: usize,
    pub model_dim: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParameters, warmup_steps: usize) -> Self {
        OptimizerState {
            step: 0,
            warmup_steps,
            model_dim: params.config.transformer.model_dim,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            first_moment: params.store.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.store.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Apply one bias-corrected update in place and clear the gradients.
    pub fn adam_step(&mut self, store: &mut ParamStore, lr: f64) -> Result<(), TrainError> {
        for (idx, param) in store.iter_mut().enumerate() {
            for &g in &param.grad {
                if !g.is_finite() {
                    return Err(TrainError::NonFiniteGrad {
                        param: param.name.clone(),
                    });
                }
            }
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            let t = (self.step + 1) as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            for i in 0..param.value.len() {
                let g = param.grad[i];
                m[i] = q32(self.beta1 * m[i] + (1.0 - self.beta1) * g);
                v[i] = q32(self.beta2 * v[i] + (1.0 - self.beta2) * g * g);
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.value[i] = q32(param.value[i] - lr * m_hat / (v_hat.sqrt() + self.eps));
                param.grad[i] = 0.0;
            }
        }
        self.step += 1;
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        noam_lr(step, self.model_dim, self.warmup_steps)
    }
}

/// Sum of the label-smoothed KL over one sentence (teacher forcing), plus
/// the token count. The decoder input is BOS followed by the target without
/// its final EOS; the prediction targets are the full target sequence.
#[allow(clippy::too_many_arguments)]
pub fn sentence_loss_sum(
    tape: &mut Tape,
    bound: &BoundModel,
    source: &[u32],
    contexts: &[Vec<u32>],
    target: &[u32],
    smoothing: f64,
    cfg: &crate::transformer::TransformerConfig,
    dropout: &mut Dropout,
) -> Result<(Var, usize), ModelError> {
    let memory = gated_encoder_output(
        tape,
        source,
        contexts,
        &bound.encoder,
        bound.memory.as_ref(),
        cfg,
        dropout,
    )?;
    let mut prefix = Vec::with_capacity(target.len());
    prefix.push(BOS);
    prefix.extend_from_slice(&target[..target.len() - 1]);
    let logits = decode_logits(tape, &prefix, &memory, &bound.decoder, cfg, dropout)?;
    let ids: Vec<usize> = target.iter().map(|&t| t as usize).collect();
    let include = vec![true; ids.len()];
    let sum = tape.label_smoothed_ce_sum(logits, &ids, smoothing, &include)?;
    Ok((sum, ids.len()))
}

/// Training state: model, optimizer, and the dropout RNG stream.
pub struct Trainer {
    pub config: RunConfig,
    pub model: ModelParameters,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: RunConfig, vocab_size: usize) -> Result<Self, ModelError> {
        let model = ModelParameters::init(config.model_config(vocab_size), config.seed)?;
        let optimizer = OptimizerState::new(&model, config.warmup_steps);
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x7261_6e64, 0));
        Ok(Trainer {
            config,
            model,
            optimizer,
            rng,
        })
    }

    pub fn step(&self) -> usize {
        self.optimizer.step
    }

    /// One forward/backward/update over a batch; returns the batch loss
    /// (token-averaged) measured before the update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64, TrainError> {
        let cfg = self.config.transformer_config();
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, self.config.gate_override);
        let mut dropout = Dropout {
            p: self.config.dropout,
            rng: Some(&mut self.rng),
        };

        let mut sums: Vec<Var> = Vec::with_capacity(batch.items);
        let mut total_tokens = 0usize;
        for item in 0..batch.items {
            let contexts: Vec<Vec<u32>> = (0..batch.m)
                .map(|j| batch.context(item, j).to_vec())
                .collect();
            let (sum, count) = sentence_loss_sum(
                &mut tape,
                &bound,
                batch.source(item),
                &contexts,
                batch.target(item),
                self.config.label_smoothing,
                &cfg,
                &mut dropout,
            )?;
            sums.push(sum);
            total_tokens += count;
        }
        let mut total = sums[0];
        for &s in &sums[1..] {
            total = tape.add(total, s).map_err(ModelError::from)?;
        }
        let loss = tape.scale(total, 1.0 / total_tokens.max(1) as f64);
        let loss_value = tape.data(loss)[0];
        if !loss_value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.optimizer.step + 1,
            });
        }

        tape.backward(loss).map_err(ModelError::from)?;
        self.model.store.zero_grads();
        self.model.store.absorb_grads(&tape, &bound.bound);
        if self.config.grad_clip > 0.0 {
            clip_global_norm(&mut self.model.store, self.config.grad_clip);
        }
        let lr = self.optimizer.lr_at(self.optimizer.step + 1);
        self.optimizer.adam_step(&mut self.model.store, lr)?;
        Ok(loss_value)
    }

    /// Deterministic batch stream for one epoch.
    pub fn epoch_batches(&self, corpus: &DocumentCorpus, epoch: usize) -> Vec<Batch> {
        make_batches(
            corpus,
            self.config.context_mode,
            self.config.memory_size,
            self.config.batch_tokens,
            mix_seed(self.config.seed, 0x6570_6f63, epoch as u64),
        )
    }

    /// Run (or resume) the loop until `train_steps`, reporting each step to
    /// `on_step(step, loss, lr)` and checkpointing through `on_checkpoint`.
    pub fn run<F, C>(
        &mut self,
        corpus: &DocumentCorpus,
        mut on_step: F,
        mut on_checkpoint: C,
    ) -> Result<(), TrainError>
    where
        F: FnMut(usize, f64, f64),
        C: FnMut(&Trainer) -> Result<(), TrainError>,
    {
        let resume_target = self.optimizer.step;
        let every = self.config.checkpoint_every.max(1);
        let mut seen = 0usize;
        let mut epoch = 0usize;
        while self.optimizer.step < self.config.train_steps {
            let batches = self.epoch_batches(corpus, epoch);
            assert!(!batches.is_empty(), "corpus produced no batches");
            for batch in &batches {
                if self.optimizer.step >= self.config.train_steps {
                    break;
                }
                // fast-forward through batches consumed before a resume
                if seen < resume_target {
                    seen += 1;
                    continue;
                }
                let lr = self.optimizer.lr_at(self.optimizer.step + 1);
                let loss = self.train_step(batch)?;
                seen += 1;
                on_step(self.optimizer.step, loss, lr);
                if self.optimizer.step.is_multiple_of(every)
                    || self.optimizer.step == self.config.train_steps
                {
                    on_checkpoint(self)?;
                }
            }
            epoch += 1;
        }
        Ok(())
    }
}

fn clip_global_norm(store: &mut ParamStore, max_norm: f64) {
    let mut total = 0.0;
    for p in store.iter() {
        for &g in &p.grad {
            total += g * g;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in store.iter_mut() {
            for g in &mut p.grad {
                *g *= scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MergeStrategy;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;
    use crate::transformer::TransformerConfig;

    #[test]
    fn noam_peaks_at_warmup() {
        let d = 512;
        let warmup = 4000;
        let at_warmup = noam_lr(warmup, d, warmup);
        let expected = (d as f64).powf(-0.5) * (warmup as f64).powf(-0.5);
        assert!((at_warmup - expected).abs() < 1e-15);
        // both branches agree at the crossing
        let rising = (warmup as f64) * (warmup as f64).powf(-1.5);
        let falling = (warmup as f64).powf(-0.5);
        assert!((rising - falling).abs() < 1e-15);
    }

    #[test]
    fn noam_first_step_matches_formula() {
        let lr = noam_lr(1, 512, 4000);
        let expected = 512f64.powf(-0.5) * 4000f64.powf(-1.5);
        assert!((lr - expected).abs() < 1e-18);
    }

    #[test]
    fn noam_monotone_up_then_down() {
        let d = 64;
        let warmup = 100;
        for step in 1..warmup {
            assert!(noam_lr(step, d, warmup) <= noam_lr(step + 1, d, warmup));
        }
        for step in warmup..3 * warmup {
            assert!(noam_lr(step, d, warmup) >= noam_lr(step + 1, d, warmup));
        }
    }

    #[test]
    fn smoothed_loss_hand_case() {
        // one token, V = 4, smoothing 0.1, hand-computed KL
        let logits_row = [0.2, -0.1, 0.7, 0.0];
        let gold = 2usize;
        let eps = 0.1f64;
        let v = 4.0f64;
        let max = 0.7f64;
        let denom: f64 = logits_row.iter().map(|x| (x - max).exp()).sum();
        let log_q: Vec<f64> = logits_row.iter().map(|x| x - max - denom.ln()).collect();
        let p_gold = 1.0 - eps;
        let p_off = eps / (v - 1.0);
        let mut expected = p_gold * p_gold.ln() + eps * p_off.ln();
        for (i, lq) in log_q.iter().enumerate() {
            let p = if i == gold { p_gold } else { p_off };
            expected -= p * lq;
        }

        let mut tape = Tape::new();
        let logits = tape.input(Tensor::matrix(1, 4, logits_row.to_vec()));
        let loss = label_smoothed_cross_entropy(&mut tape, logits, &[2], eps, None).unwrap();
        assert!((tape.data(loss)[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn smoothed_loss_all_mass_on_gold_tends_to_zero() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::matrix(1, 3, vec![50.0, 0.0, 0.0]));
        let loss = label_smoothed_cross_entropy(&mut tape, logits, &[0], 0.0, None).unwrap();
        assert!(tape.data(loss)[0].abs() < 1e-9);
    }

    #[test]
    fn pad_positions_are_excluded_from_the_average() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::matrix(2, 3, vec![0.0; 6]));
        let masked =
            label_smoothed_cross_entropy(&mut tape, logits, &[1, 0], 0.0, Some(&[false, true]))
                .unwrap();
        assert!((tape.data(masked)[0] - 3f64.ln()).abs() < 1e-12);
    }

    fn tiny_model() -> ModelParameters {
        ModelParameters::init(
            ModelConfig {
                transformer: TransformerConfig {
                    num_layers: 1,
                    model_dim: 8,
                    num_heads: 2,
                    ffn_dim: 16,
                    dropout_p: 0.0,
                    max_positions: 32,
                },
                vocab_size: 10,
                memory_size: 0,
                merge: MergeStrategy::Average,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut model = tiny_model();
        let mut opt = OptimizerState::new(&model, 10);
        let before: Vec<Vec<f64>> = model.store.iter().map(|p| p.value.clone()).collect();
        opt.adam_step(&mut model.store, 0.01).unwrap();
        for (p, b) in model.store.iter().zip(&before) {
            assert_eq!(&p.value, b);
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_constant_gradient_descends() {
        let mut model = tiny_model();
        let mut opt = OptimizerState::new(&model, 10);
        let idx = model.store.find("out_proj.b").unwrap();
        let start = model.store.get(idx).value[0];
        for _ in 0..20 {
            model.store.get_mut(idx).grad[0] = 1.0;
            opt.adam_step(&mut model.store, 0.01).unwrap();
        }
        assert!(model.store.get(idx).value[0] < start);
    }

    #[test]
    fn adam_matches_hand_stepped_oracle() {
        let mut model = ModelParameters::init(
            ModelConfig {
                transformer: TransformerConfig {
                    num_layers: 1,
                    model_dim: 2,
                    num_heads: 1,
                    ffn_dim: 2,
                    dropout_p: 0.0,
                    max_positions: 8,
                },
                vocab_size: 5,
                memory_size: 0,
                merge: MergeStrategy::Average,
            },
            1,
        )
        .unwrap();
        let mut opt = OptimizerState::new(&model, 10);
        let idx = model.store.find("out_proj.b").unwrap();
        let grads = [0.3, -0.2, 0.05];
        let lr = 0.1;

        // oracle on the f32 lattice
        let mut theta = model.store.get(idx).value[0];
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            m = q32(0.9 * m + 0.1 * g);
            v = q32(0.98 * v + 0.02 * g * g);
            let m_hat = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let v_hat = v / (1.0 - 0.98f64.powi(t as i32 + 1));
            theta = q32(theta - lr * m_hat / (v_hat.sqrt() + 1e-9));
        }

        for &g in &grads {
            model.store.get_mut(idx).grad[0] = g;
            opt.adam_step(&mut model.store, lr).unwrap();
        }
        assert!((model.store.get(idx).value[0] - theta).abs() < 1e-9);
    }

    #[test]
    fn source_pass_through_starves_the_memory_network_of_gradient() {
        let model = ModelParameters::init(
            ModelConfig {
                transformer: TransformerConfig {
                    num_layers: 1,
                    model_dim: 8,
                    num_heads: 2,
                    ffn_dim: 16,
                    dropout_p: 0.0,
                    max_positions: 32,
                },
                vocab_size: 10,
                memory_size: 2,
                merge: MergeStrategy::Average,
            },
            13,
        )
        .unwrap();
        let cfg = model.config.transformer.clone();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Some(1.0));
        let mut dropout = crate::transformer::Dropout::disabled();
        let (sum, _) = sentence_loss_sum(
            &mut tape,
            &bound,
            &[4, 5, 2],
            &[vec![6, 2], vec![7, 8, 2]],
            &[5, 4, 2],
            0.1,
            &cfg,
            &mut dropout,
        )
        .unwrap();
        tape.backward(sum).unwrap();
        let mut store = model.store.clone();
        store.zero_grads();
        store.absorb_grads(&tape, &bound.bound);
        let memory_names = model.memory_param_names();
        assert!(!memory_names.is_empty());
        for p in store.iter() {
            if memory_names.contains(&p.name) {
                assert!(
                    p.grad.iter().all(|&g| g == 0.0),
                    "memory parameter {} received gradient",
                    p.name
                );
            }
        }
        // the shared parameters did receive gradient
        let idx = store.find("out_proj.b").unwrap();
        assert!(store.get(idx).grad.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn adam_rejects_non_finite_gradients_naming_the_parameter() {
        let mut model = tiny_model();
        let mut opt = OptimizerState::new(&model, 10);
        let idx = model.store.find("src_embed").unwrap();
        model.store.get_mut(idx).grad[0] = f64::NAN;
        let err = opt.adam_step(&mut model.store, 0.01).unwrap_err();
        assert!(err.to_string().contains("src_embed"));
    }
}
