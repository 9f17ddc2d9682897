//! Teacher-forced training: AdamW with decoupled weight decay, linear
//! warmup into cosine decay, epoch-seeded language-mixed batching, global
//! gradient-norm clipping, and periodic validation with best-checkpoint
//! selection.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::corpus::{CorpusSplit, WordEntry};
use crate::eval::{self, EvalError, EvalSubset};
use crate::model::{Model, ModelConfig, ModelError};
use crate::tensor::{Tape, TensorError};
use crate::vocab::{self, VocabPair, PAD_ID};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("optimizer shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step}: {what}")]
    NonFiniteLoss { step: u64, what: String },
    #[error("no training entries in the split")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimization hyperparameters. The defaults are the full-scale recipe;
/// `toy` is the desk-scale counterpart exercised by the test suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub val_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 100_000,
            warmup_steps: 10_000,
            peak_lr: 3e-4,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            val_every: 1_000,
            seed: 42,
        }
    }
}

impl TrainConfig {
    /// Desk-scale recipe: minutes on a laptop CPU instead of a GPU run.
    pub fn toy() -> Self {
        TrainConfig {
            total_steps: 2_000,
            warmup_steps: 200,
            peak_lr: 1e-3,
            batch_size: 32,
            val_every: 500,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if self.total_steps == 0 {
            return bad("total_steps must be positive");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be positive");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be below total_steps");
        }
        if self.peak_lr <= 0.0 || self.peak_lr.is_nan() {
            return bad("peak_lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if self.eps <= 0.0 || self.eps.is_nan() {
            return bad("eps must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be nonnegative");
        }
        if self.grad_clip_norm <= 0.0 || self.grad_clip_norm.is_nan() {
            return bad("grad_clip_norm must be positive");
        }
        if self.val_every == 0 {
            return bad("val_every must be positive");
        }
        Ok(())
    }
}

/// Linear ramp 0 -> peak over [0, warmup], then cosine decay to exactly 0
/// at total_steps. Computed in f64; continuous at the junction.
pub fn lr_at_step(step: u64, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if step > cfg.total_steps {
        return Err(TrainError::StepOutOfRange { step, total: cfg.total_steps });
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let progress =
        (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First/second moment buffers aligned with the model's tensor list, plus
/// the number of optimizer steps taken.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl OptimizerState {
    pub fn for_model(model: &Model<f32>) -> Self {
        let sizes: Vec<usize> = (0..model.n_tensors())
            .map(|i| model.tensor_data(i).len())
            .collect();
        Self::zeros(&sizes)
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        OptimizerState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update over grouped parameter slices. Decoupled weight decay
/// shrinks parameters first; the bias-corrected moment update follows, all
/// element arithmetic in f64. With lr = 0 both terms vanish and parameters
/// are left bit-unchanged.
pub fn adamw_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} param groups, {} grad groups, {} moment groups",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.len() != grads[i].len() || p.len() != state.m[i].len() {
            return Err(TrainError::ShapeMismatch(format!(
                "group {i}: {} params, {} grads, {} moments",
                p.len(),
                grads[i].len(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = lr * cfg.weight_decay;
    for ((p, g), (m, v)) in
        params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for j in 0..p.len() {
            let grad = g[j] as f64;
            let mut x = p[j] as f64;
            x -= decay * x;
            let m_new = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * grad;
            let v_new = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * grad * grad;
            m[j] = m_new as f32;
            v[j] = v_new as f32;
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            x -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            p[j] = x as f32;
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm, computed in f64.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> Result<f64, TrainError> {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g {
            sq += x as f64 * x as f64;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: 0, what: format!("gradient norm {norm}") });
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x = (*x as f64 * scale) as f32;
            }
        }
    }
    Ok(norm)
}

/// One rectangular padded batch. Row i of every field describes example i;
/// `src_lens`/`tgt_lens` give the unpadded lengths (tgt_lens counts
/// decoder-input positions, equal to label positions).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub src: Vec<Vec<u32>>,
    pub dec_in: Vec<Vec<u32>>,
    pub labels: Vec<Vec<u32>>,
    pub label_mask: Vec<Vec<bool>>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Shuffle all entries with a stream seeded by (seed, epoch) and cut the
/// pool into padded batches; the final batch may be short. Languages mix in
/// proportion to their corpus share.
pub fn make_batches(
    entries: &[WordEntry],
    vocab: &VocabPair,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Batch> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| pad_batch(chunk.iter().map(|&i| &entries[i]), vocab))
        .collect()
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ (epoch.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn pad_batch<'e>(examples: impl Iterator<Item = &'e WordEntry>, vocab: &VocabPair) -> Batch {
    let mut src_rows = Vec::new();
    let mut tgt_rows = Vec::new();
    for e in examples {
        src_rows.push(vocab::encode_source(&e.word, e.lang, vocab));
        tgt_rows.push(vocab::encode_target(&e.phonemes, vocab));
    }
    let src_lens: Vec<usize> = src_rows.iter().map(Vec::len).collect();
    // Teacher forcing: input drops the final token, labels drop the first.
    let tgt_lens: Vec<usize> = tgt_rows.iter().map(|t| t.len() - 1).collect();
    let src_max = src_lens.iter().copied().max().unwrap_or(0);
    let tgt_max = tgt_lens.iter().copied().max().unwrap_or(0);
    let mut batch = Batch {
        src: Vec::with_capacity(src_rows.len()),
        dec_in: Vec::with_capacity(src_rows.len()),
        labels: Vec::with_capacity(src_rows.len()),
        label_mask: Vec::with_capacity(src_rows.len()),
        src_lens,
        tgt_lens,
    };
    for (i, tgt) in tgt_rows.iter().enumerate() {
        let mut src = src_rows[i].clone();
        src.resize(src_max, PAD_ID);
        let n = batch.tgt_lens[i];
        let mut dec_in = tgt[..n].to_vec();
        let mut labels = tgt[1..].to_vec();
        let mut mask = vec![true; n];
        dec_in.resize(tgt_max, PAD_ID);
        labels.resize(tgt_max, PAD_ID);
        mask.resize(tgt_max, false);
        batch.src.push(src);
        batch.dec_in.push(dec_in);
        batch.labels.push(labels);
        batch.label_mask.push(mask);
    }
    batch
}

/// What one optimization step reported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    /// Pre-clip global gradient norm; 0 when the batch was fully padded.
    pub grad_norm: f64,
    pub n_label_tokens: usize,
}

/// One teacher-forced optimization step. Padding is stripped before the
/// graph is built, so padded positions contribute exactly zero gradient; a
/// batch with no real label tokens is a no-op with loss 0.
pub fn train_step(
    model: &mut Model<f32>,
    batch: &Batch,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats, TrainError> {
    let lr = lr_at_step(step, cfg)?;
    let strip_lang = !model.config().use_lang_id;
    let mut src = Vec::with_capacity(batch.len());
    let mut dec_in = Vec::with_capacity(batch.len());
    let mut labels: Vec<u32> = Vec::new();
    for i in 0..batch.len() {
        if batch.tgt_lens[i] == 0 {
            continue;
        }
        let s = batch.src[i][..batch.src_lens[i]].to_vec();
        src.push(if strip_lang { vocab::strip_lang_token(&s) } else { s });
        dec_in.push(batch.dec_in[i][..batch.tgt_lens[i]].to_vec());
        labels.extend_from_slice(&batch.labels[i][..batch.tgt_lens[i]]);
    }
    if src.is_empty() {
        return Ok(StepStats { loss: 0.0, lr, grad_norm: 0.0, n_label_tokens: 0 });
    }

    let mut tape: Tape<'_, f32> = Tape::new();
    let bound = model.bind(&mut tape);
    let (logits, _) = model.forward_graph(&mut tape, &bound, &src, &dec_in, Some(rng))?;
    let mask = vec![true; labels.len()];
    let loss_id = tape.cross_entropy_masked(logits, &labels, &mask)?;
    let loss = tape.scalar_value(loss_id) as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step, what: format!("loss {loss}") });
    }
    tape.backward(loss_id)?;
    let mut grads: Vec<Vec<f32>> = bound
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            tape.grad(id)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; model.tensor_data(i).len()])
        })
        .collect();
    drop(tape);

    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm)
        .map_err(|_| TrainError::NonFiniteLoss { step, what: "gradient norm".into() })?;
    let mut params: Vec<&mut [f32]> = model.tensors_mut().collect();
    let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
    adamw_step(&mut params, &grad_refs, opt, lr, cfg)?;
    Ok(StepStats { loss, lr, grad_norm, n_label_tokens: labels.len() })
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps_run: u64,
    pub final_train_loss: f64,
    /// Step and mean validation PER of the checkpoint that was kept; None
    /// when the split has no validation data.
    pub best: Option<(u64, f64)>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Optional language rebalancing for batch sampling: the training pool is
/// resampled so language l's share is proportional to n_l^(1/temperature).
/// Temperature 1 reproduces the plain proportional pool.
pub fn rebalance_pool(
    entries: Vec<WordEntry>,
    temperature: f64,
    seed: u64,
) -> Result<Vec<WordEntry>, TrainError> {
    if temperature <= 0.0 || temperature.is_nan() {
        return Err(TrainError::InvalidConfig(format!(
            "language temperature must be positive, got {temperature}"
        )));
    }
    if temperature == 1.0 || entries.is_empty() {
        return Ok(entries);
    }
    let mut by_lang: Vec<Vec<WordEntry>> = vec![Vec::new(); 6];
    for e in entries {
        by_lang[e.lang.index()].push(e);
    }
    let total: usize = by_lang.iter().map(Vec::len).sum();
    let weights: Vec<f64> =
        by_lang.iter().map(|v| (v.len() as f64).powf(1.0 / temperature)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, u64::MAX >> 1));
    let mut pool = Vec::with_capacity(total);
    for (lang_entries, w) in by_lang.into_iter().zip(&weights) {
        if lang_entries.is_empty() {
            continue;
        }
        let want = ((w / wsum) * total as f64).round() as usize;
        // Cycle the shuffled language list until its quota is met.
        let mut order: Vec<usize> = (0..lang_entries.len()).collect();
        order.shuffle(&mut rng);
        for k in 0..want {
            pool.push(lang_entries[order[k % order.len()]].clone());
        }
    }
    Ok(pool)
}

/// Train for `cfg.total_steps` steps, validating every `val_every` steps
/// and keeping the checkpoint with the best mean validation PER. Writes
/// `metrics.jsonl` (one record per step) and `best.ckpt` under `out_dir`.
/// Identical configs and seeds reproduce the metrics log exactly.
pub fn run_training(
    split: &CorpusSplit,
    vocab: &VocabPair,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    run_config: Option<serde_json::Value>,
    lang_temperature: Option<f64>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    let entries = rebalance_pool(split.train_all(), lang_temperature.unwrap_or(1.0), cfg.seed)?;
    if entries.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let has_val = split.val.iter().any(|v| !v.is_empty());
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let checkpoint_path = out_dir.join("best.ckpt");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let vocab_digest = vocab.digest();

    let mut model = Model::<f32>::init(model_cfg, cfg.seed)?;
    let mut opt = OptimizerState::for_model(&model);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5DEE_CE66_D309_3F1D);

    let mut step: u64 = 0;
    let mut epoch: u64 = 0;
    let mut best: Option<(u64, f64)> = None;
    let mut final_train_loss;
    'epochs: loop {
        let batches = make_batches(&entries, vocab, cfg.batch_size, cfg.seed, epoch);
        for batch in &batches {
            let stats = train_step(&mut model, batch, &mut opt, cfg, step, &mut dropout_rng)?;
            step += 1;
            final_train_loss = stats.loss;
            let mut record = json!({
                "step": step,
                "train_loss": stats.loss,
                "lr": stats.lr,
                "grad_norm": stats.grad_norm,
            });
            let at_val = step.is_multiple_of(cfg.val_every) || step == cfg.total_steps;
            if at_val && has_val {
                let report =
                    eval::evaluate(&model, &vocab_digest, vocab, split, EvalSubset::Val)?;
                let per_lang: serde_json::Map<String, serde_json::Value> = report
                    .rows
                    .iter()
                    .map(|r| (r.lang.code().to_string(), json!(r.per_pct)))
                    .collect();
                let is_best = best.is_none_or(|(_, b)| report.mean_per_pct < b);
                if is_best {
                    best = Some((step, report.mean_per_pct));
                    model.save_checkpoint(&vocab_digest, run_config.clone(), &checkpoint_path)?;
                }
                let obj = record.as_object_mut().expect("record is an object");
                obj.insert("val_per".into(), serde_json::Value::Object(per_lang));
                obj.insert("mean_val_per".into(), json!(report.mean_per_pct));
                obj.insert("new_best".into(), json!(is_best));
            }
            writeln!(metrics, "{record}")?;
            if step == cfg.total_steps {
                break 'epochs;
            }
        }
        epoch += 1;
    }
    metrics.flush()?;
    if best.is_none() {
        // No validation data: the final model is the released artifact.
        model.save_checkpoint(&vocab_digest, run_config, &checkpoint_path)?;
    }
    Ok(TrainReport {
        steps_run: step,
        final_train_loss,
        best,
        checkpoint_path,
        metrics_path,
    })
}
