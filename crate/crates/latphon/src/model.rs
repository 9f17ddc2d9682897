//! The grapheme-to-phoneme network: source and target embeddings, rotary
//! position encoding, a pre-layernorm encoder-decoder Transformer stack,
//! an untied output projection, parameter accounting, and bit-exact
//! checkpoint I/O.
//!
//! A [`Model`] is a flat, name-addressed store of rank-2 tensors in a fixed
//! canonical order. Forward passes bind every tensor onto a [`Tape`] as a
//! borrowed leaf, so graphs are rebuilt per call without copying weights.
//! Batches are ragged: each example contributes exactly its real rows, so
//! padding never enters the graph.

use std::collections::HashMap;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{rope_rotate, Tape, TensorError, TensorId};

/// First four bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LATP";
/// Bumped only on incompatible layout changes.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Additive pre-softmax penalty that zeroes masked attention weights: the
/// f32 exp of (score - 1e9) underflows to exactly 0.0 for any real score.
const MASK_PENALTY: f64 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("head dimension {0} is odd; rotary encoding rotates dimension pairs")]
    OddHeadDim(usize),
    #[error("sequence of {len} tokens exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Architecture hyperparameters. Vocabulary sizes count content symbols
/// only; the embedding tables add rows for the specials and, on the source
/// side, the language-ID tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ffn: usize,
    pub grapheme_vocab_size: usize,
    pub phoneme_vocab_size: usize,
    pub n_langs: usize,
    pub dropout: f64,
    pub rope_theta: f64,
    pub max_len: usize,
    /// When false, the language-ID rows are dropped from the source
    /// embedding and inputs must not carry the prepended language token.
    pub use_lang_id: bool,
}

impl ModelConfig {
    /// The published architecture with the released run's vocabulary sizes.
    pub fn reference() -> Self {
        ModelConfig {
            d_model: 256,
            n_heads: 8,
            n_enc_layers: 4,
            n_dec_layers: 4,
            d_ffn: 1024,
            grapheme_vocab_size: 70,
            phoneme_vocab_size: 109,
            n_langs: 6,
            dropout: 0.1,
            rope_theta: 10_000.0,
            max_len: 64,
            use_lang_id: true,
        }
    }

    /// Small config for fast smoke training; same shape family.
    pub fn toy(grapheme_vocab_size: usize, phoneme_vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ffn: 256,
            grapheme_vocab_size,
            phoneme_vocab_size,
            n_langs: 6,
            dropout: 0.0,
            rope_theta: 10_000.0,
            max_len: 64,
            use_lang_id: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Source embedding rows: content graphemes, specials, language tokens.
    pub fn src_rows(&self) -> usize {
        self.grapheme_vocab_size
            + crate::vocab::N_SPECIALS
            + if self.use_lang_id { self.n_langs } else { 0 }
    }

    /// Target embedding and logit rows: content phonemes plus specials.
    pub fn tgt_rows(&self) -> usize {
        self.phoneme_vocab_size + crate::vocab::N_SPECIALS
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("grapheme_vocab_size", self.grapheme_vocab_size),
            ("phoneme_vocab_size", self.phoneme_vocab_size),
            ("n_langs", self.n_langs),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(ModelError::InvalidConfig(format!(
                "head dimension {} must be even for rotary pairing",
                self.head_dim()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.rope_theta <= 0.0 {
            return Err(ModelError::InvalidConfig("rope_theta must be positive".into()));
        }
        Ok(())
    }
}

enum Init {
    /// Uniform in ±1/sqrt(fan_in).
    Uniform(usize),
    Zero,
    One,
}

/// Canonical tensor list: names, shapes, and init rule, in storage order.
fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.d_model;
    let f = cfg.d_ffn;
    let mut out: Vec<(String, usize, usize, Init)> = Vec::new();
    let mut t = |name: String, rows: usize, cols: usize, init: Init| {
        out.push((name, rows, cols, init));
    };
    t("src_emb".into(), cfg.src_rows(), d, Init::Uniform(d));
    t("tgt_emb".into(), cfg.tgt_rows(), d, Init::Uniform(d));
    let attn = |t: &mut dyn FnMut(String, usize, usize, Init), prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            t(format!("{prefix}.{w}"), d, d, Init::Uniform(d));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            t(format!("{prefix}.{b}"), 1, d, Init::Zero);
        }
    };
    let ln = |t: &mut dyn FnMut(String, usize, usize, Init), prefix: &str| {
        t(format!("{prefix}.g"), 1, d, Init::One);
        t(format!("{prefix}.b"), 1, d, Init::Zero);
    };
    let ffn = |t: &mut dyn FnMut(String, usize, usize, Init), prefix: &str| {
        t(format!("{prefix}.w1"), d, f, Init::Uniform(d));
        t(format!("{prefix}.b1"), 1, f, Init::Zero);
        t(format!("{prefix}.w2"), f, d, Init::Uniform(f));
        t(format!("{prefix}.b2"), 1, d, Init::Zero);
    };
    for i in 0..cfg.n_enc_layers {
        ln(&mut t, &format!("enc{i}.ln1"));
        attn(&mut t, &format!("enc{i}.attn"));
        ln(&mut t, &format!("enc{i}.ln2"));
        ffn(&mut t, &format!("enc{i}.ffn"));
    }
    for i in 0..cfg.n_dec_layers {
        ln(&mut t, &format!("dec{i}.ln1"));
        attn(&mut t, &format!("dec{i}.self"));
        ln(&mut t, &format!("dec{i}.ln2"));
        attn(&mut t, &format!("dec{i}.cross"));
        ln(&mut t, &format!("dec{i}.ln3"));
        ffn(&mut t, &format!("dec{i}.ffn"));
    }
    if cfg.n_enc_layers > 0 {
        ln(&mut t, "enc_final");
    }
    if cfg.n_dec_layers > 0 {
        ln(&mut t, "dec_final");
    }
    t("out_proj.w".into(), d, cfg.tgt_rows(), Init::Uniform(d));
    t("out_proj.b".into(), 1, cfg.tgt_rows(), Init::Zero);
    out
}

/// Parameter totals with the language-ID embedding rows isolated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub source_embedding: usize,
    pub language_id: usize,
    pub target_embedding: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub final_norms: usize,
    pub output_projection: usize,
    pub total: usize,
}

/// The network's parameters plus the config that shaped them.
#[derive(Clone)]
pub struct Model<F> {
    cfg: ModelConfig,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    data: Vec<Vec<F>>,
    index: HashMap<String, usize>,
}

/// Tape handles for every model tensor, aligned with storage order.
pub struct BoundParams {
    ids: Vec<TensorId>,
}

impl BoundParams {
    pub fn id(&self, tensor_idx: usize) -> TensorId {
        self.ids[tensor_idx]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl<F: Scalar> Model<F> {
    /// Fresh model with scaled-uniform weights, zero biases, unit layernorm
    /// gains. Deterministic in (cfg, seed): draws happen in f64 in tensor
    /// storage order from one ChaCha8 stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let specs = tensor_specs(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut shapes = Vec::with_capacity(specs.len());
        let mut data = Vec::with_capacity(specs.len());
        for (name, rows, cols, init) in specs {
            let n = rows * cols;
            let buf: Vec<F> = match init {
                Init::Uniform(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| F::from_f64_c((rng.random::<f64>() * 2.0 - 1.0) * bound))
                        .collect()
                }
                Init::Zero => vec![F::zero(); n],
                Init::One => vec![F::one(); n],
            };
            names.push(name);
            shapes.push((rows, cols));
            data.push(buf);
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Model { cfg: cfg.clone(), names, shapes, data, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_tensors(&self) -> usize {
        self.data.len()
    }

    pub fn tensor_name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor_shape(&self, i: usize) -> (usize, usize) {
        self.shapes[i]
    }

    pub fn tensor_data(&self, i: usize) -> &[F] {
        &self.data[i]
    }

    pub fn tensor_data_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i]
    }

    /// All tensors as mutable slices in canonical order; the optimizer
    /// updates every parameter in one pass.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [F]> {
        self.data.iter_mut().map(Vec::as_mut_slice)
    }

    /// Total parameter count by brute-force summation over stored tensors.
    pub fn count_params(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let d = self.cfg.d_model;
        let lang = if self.cfg.use_lang_id { self.cfg.n_langs * d } else { 0 };
        let mut b = ParamBreakdown {
            source_embedding: 0,
            language_id: lang,
            target_embedding: 0,
            encoder: 0,
            decoder: 0,
            final_norms: 0,
            output_projection: 0,
            total: 0,
        };
        for (name, buf) in self.names.iter().zip(&self.data) {
            let n = buf.len();
            b.total += n;
            if name == "src_emb" {
                b.source_embedding += n - lang;
            } else if name == "tgt_emb" {
                b.target_embedding += n;
            } else if name.starts_with("enc_final") || name.starts_with("dec_final") {
                b.final_norms += n;
            } else if name.starts_with("enc") {
                b.encoder += n;
            } else if name.starts_with("dec") {
                b.decoder += n;
            } else if name.starts_with("out_proj") {
                b.output_projection += n;
            }
        }
        b
    }

    /// Register every tensor on the tape as a borrowed leaf.
    pub fn bind<'m>(&'m self, tape: &mut Tape<'m, F>) -> BoundParams {
        let ids = self
            .data
            .iter()
            .zip(&self.shapes)
            .map(|(buf, &(r, c))| tape.leaf_view(buf, r, c))
            .collect();
        BoundParams { ids }
    }

    fn tensor_idx(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown tensor {name}"))
    }

    /// Logits for one (source, decoder-input) pair, row-major
    /// [tgt_ids.len(), tgt_rows]. Inference mode: no dropout.
    pub fn forward(&self, src_ids: &[u32], tgt_ids: &[u32]) -> Result<Vec<F>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (logits, _) = self.forward_graph(
            &mut tape,
            &bound,
            &[src_ids.to_vec()],
            &[tgt_ids.to_vec()],
            None,
        )?;
        Ok(tape.data(logits).to_vec())
    }

    /// Build the full differentiable graph for a ragged batch. Returns the
    /// concatenated logits node plus each example's (row offset, length).
    /// Dropout of `cfg.dropout` applies only when an RNG is supplied.
    pub fn forward_graph<'m>(
        &'m self,
        tape: &mut Tape<'m, F>,
        bound: &BoundParams,
        src: &[Vec<u32>],
        dec_in: &[Vec<u32>],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(TensorId, Vec<(usize, usize)>), ModelError> {
        assert_eq!(src.len(), dec_in.len(), "one decoder input per source");
        let mut g = GraphBuilder::new(self, bound, rng);
        let (memory, mem_segs) = g.encode(tape, src)?;
        g.decode(tape, memory, &mem_segs, dec_in)
    }

    /// Encoder output for one source sequence, row-major [len, d_model].
    /// Cached by the decoding loop so the encoder runs once per word.
    pub fn encode_source(&self, src_ids: &[u32]) -> Result<Vec<F>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut g = GraphBuilder::new(self, &bound, None);
        let (memory, _) = g.encode(&mut tape, &[src_ids.to_vec()])?;
        Ok(tape.data(memory).to_vec())
    }

    /// Decoder logits [dec_in.len(), tgt_rows] against a precomputed
    /// encoder memory.
    pub fn decode_with_memory(
        &self,
        memory: &[F],
        dec_in: &[u32],
    ) -> Result<Vec<F>, ModelError> {
        let d = self.cfg.d_model;
        if memory.is_empty() || !memory.len().is_multiple_of(d) {
            return Err(ModelError::InvalidConfig(format!(
                "encoder memory of {} values is not a multiple of d_model {d}",
                memory.len()
            )));
        }
        let src_len = memory.len() / d;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mem = tape.leaf(memory.to_vec(), src_len, d);
        let mut g = GraphBuilder::new(self, &bound, None);
        let (logits, _) =
            g.decode(&mut tape, mem, &[(0, src_len)], &[dec_in.to_vec()])?;
        Ok(tape.data(logits).to_vec())
    }
}

/// Closed-form parameter count for a config; tested against brute force.
pub fn count_params_closed_form(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let f = cfg.d_ffn;
    let attn = 4 * d * d + 4 * d;
    let ln = 2 * d;
    let ffn = d * f + f + f * d + d;
    let enc_layer = attn + 2 * ln + ffn;
    let dec_layer = 2 * attn + 3 * ln + ffn;
    let finals = if cfg.n_enc_layers > 0 { ln } else { 0 }
        + if cfg.n_dec_layers > 0 { ln } else { 0 };
    cfg.src_rows() * d
        + cfg.tgt_rows() * d
        + cfg.n_enc_layers * enc_layer
        + cfg.n_dec_layers * dec_layer
        + finals
        + d * cfg.tgt_rows()
        + cfg.tgt_rows()
}

/// Rotate dimension pairs of a head-major [n_heads, seq_len, head_dim]
/// buffer: the pair (2i, 2i+1) at position p turns by p·theta^(−2i/head_dim).
/// Position 0 is the identity; every pair keeps its L2 norm.
pub fn apply_rope<F: Scalar>(
    x: &[F],
    n_heads: usize,
    seq_len: usize,
    head_dim: usize,
    positions: &[usize],
    theta: f64,
) -> Result<Vec<F>, ModelError> {
    if !head_dim.is_multiple_of(2) {
        return Err(ModelError::OddHeadDim(head_dim));
    }
    assert_eq!(x.len(), n_heads * seq_len * head_dim, "buffer does not match shape");
    assert_eq!(positions.len(), seq_len, "one position per sequence step");
    let tiled: Vec<usize> = (0..n_heads).flat_map(|_| positions.iter().copied()).collect();
    let mut out = x.to_vec();
    rope_rotate(&mut out, n_heads * seq_len, head_dim, &tiled, theta, false);
    Ok(out)
}

/// Per-call state for building one forward graph.
struct GraphBuilder<'m, 'x, F: Scalar> {
    model: &'m Model<F>,
    bound: &'x BoundParams,
    rng: Option<&'x mut ChaCha8Rng>,
    masks: HashMap<usize, TensorId>,
}

impl<'m, 'x, F: Scalar> GraphBuilder<'m, 'x, F> {
    fn new(
        model: &'m Model<F>,
        bound: &'x BoundParams,
        rng: Option<&'x mut ChaCha8Rng>,
    ) -> Self {
        GraphBuilder { model, bound, rng, masks: HashMap::new() }
    }

    fn p(&self, name: &str) -> TensorId {
        self.bound.id(self.model.tensor_idx(name))
    }

    fn drop_out(&mut self, tape: &mut Tape<'m, F>, x: TensorId) -> TensorId {
        let p = self.model.cfg.dropout;
        match (&mut self.rng, p > 0.0) {
            (Some(rng), true) => tape.dropout(x, p, rng),
            _ => x,
        }
    }

    /// Strictly lower-triangular-permitting additive mask for causal
    /// self-attention, cached per length.
    fn causal_mask(&mut self, tape: &mut Tape<'m, F>, n: usize) -> TensorId {
        if let Some(&id) = self.masks.get(&n) {
            return id;
        }
        let penalty = F::from_f64_c(MASK_PENALTY);
        let mut m = vec![F::zero(); n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                m[i * n + j] = penalty;
            }
        }
        let id = tape.leaf(m, n, n);
        self.masks.insert(n, id);
        id
    }

    fn layernorm(&mut self, tape: &mut Tape<'m, F>, x: TensorId, prefix: &str) -> TensorId {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        tape.layernorm(x, g, b)
    }

    /// Multi-head attention over ragged segments. Queries come from
    /// `q_in` rows grouped by `q_segs`; keys and values from `kv_in` rows
    /// grouped by `kv_segs`. Rotary encoding applies to queries and keys
    /// with their own within-segment positions.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        tape: &mut Tape<'m, F>,
        q_in: TensorId,
        q_segs: &[(usize, usize)],
        kv_in: TensorId,
        kv_segs: &[(usize, usize)],
        causal: bool,
        prefix: &str,
    ) -> Result<TensorId, ModelError> {
        let cfg = &self.model.cfg;
        let (nh, hd, theta) = (cfg.n_heads, cfg.head_dim(), cfg.rope_theta);
        let mut q = tape.matmul(q_in, self.p(&format!("{prefix}.wq")))?;
        q = tape.add_row(q, self.p(&format!("{prefix}.bq")));
        q = tape.scale(q, F::from_f64_c(1.0 / (hd as f64).sqrt()));
        let mut k = tape.matmul(kv_in, self.p(&format!("{prefix}.wk")))?;
        k = tape.add_row(k, self.p(&format!("{prefix}.bk")));
        let mut v = tape.matmul(kv_in, self.p(&format!("{prefix}.wv")))?;
        v = tape.add_row(v, self.p(&format!("{prefix}.bv")));
        let q_heads: Vec<TensorId> = (0..nh).map(|h| tape.slice_cols(q, h * hd, hd)).collect();
        let k_heads: Vec<TensorId> = (0..nh).map(|h| tape.slice_cols(k, h * hd, hd)).collect();
        let v_heads: Vec<TensorId> = (0..nh).map(|h| tape.slice_cols(v, h * hd, hd)).collect();
        let mut per_example = Vec::with_capacity(q_segs.len());
        for (e, &(q_off, q_len)) in q_segs.iter().enumerate() {
            let (kv_off, kv_len) = kv_segs[e];
            let q_pos: Vec<usize> = (0..q_len).collect();
            let kv_pos: Vec<usize> = (0..kv_len).collect();
            let mut head_ctx = Vec::with_capacity(nh);
            for h in 0..nh {
                let qe = tape.slice_rows(q_heads[h], q_off, q_len);
                let qe = tape.rope(qe, &q_pos, theta);
                let ke = tape.slice_rows(k_heads[h], kv_off, kv_len);
                let ke = tape.rope(ke, &kv_pos, theta);
                let mut scores = tape.matmul_bt(qe, ke)?;
                if causal {
                    debug_assert_eq!(q_len, kv_len);
                    let mask = self.causal_mask(tape, q_len);
                    scores = tape.add(scores, mask);
                }
                let weights = tape.softmax_rows(scores);
                let ve = tape.slice_rows(v_heads[h], kv_off, kv_len);
                head_ctx.push(tape.matmul(weights, ve)?);
            }
            per_example.push(tape.concat_cols(&head_ctx));
        }
        let ctx = tape.concat_rows(&per_example);
        let mut out = tape.matmul(ctx, self.p(&format!("{prefix}.wo")))?;
        out = tape.add_row(out, self.p(&format!("{prefix}.bo")));
        Ok(self.drop_out(tape, out))
    }

    fn ffn(
        &mut self,
        tape: &mut Tape<'m, F>,
        x: TensorId,
        prefix: &str,
    ) -> Result<TensorId, ModelError> {
        let mut h = tape.matmul(x, self.p(&format!("{prefix}.w1")))?;
        h = tape.add_row(h, self.p(&format!("{prefix}.b1")));
        h = tape.gelu(h);
        let mut out = tape.matmul(h, self.p(&format!("{prefix}.w2")))?;
        out = tape.add_row(out, self.p(&format!("{prefix}.b2")));
        Ok(self.drop_out(tape, out))
    }

    /// Concatenate id sequences into one embedded block, returning segment
    /// (offset, len) per sequence.
    fn embed_ragged(
        &mut self,
        tape: &mut Tape<'m, F>,
        table: TensorId,
        seqs: &[Vec<u32>],
    ) -> Result<(TensorId, Vec<(usize, usize)>), ModelError> {
        let max = self.model.cfg.max_len;
        let mut ids = Vec::new();
        let mut segs = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.len() > max {
                return Err(ModelError::SequenceTooLong { len: s.len(), max });
            }
            segs.push((ids.len(), s.len()));
            ids.extend_from_slice(s);
        }
        Ok((tape.embed(table, &ids), segs))
    }

    fn encode(
        &mut self,
        tape: &mut Tape<'m, F>,
        src: &[Vec<u32>],
    ) -> Result<(TensorId, Vec<(usize, usize)>), ModelError> {
        let src_emb = self.p("src_emb");
        let (mut x, segs) = self.embed_ragged(tape, src_emb, src)?;
        x = self.drop_out(tape, x);
        for i in 0..self.model.cfg.n_enc_layers {
            let ln1 = self.layernorm(tape, x, &format!("enc{i}.ln1"));
            let a = self.attention(tape, ln1, &segs, ln1, &segs, false, &format!("enc{i}.attn"))?;
            x = tape.add(x, a);
            let ln2 = self.layernorm(tape, x, &format!("enc{i}.ln2"));
            let f = self.ffn(tape, ln2, &format!("enc{i}.ffn"))?;
            x = tape.add(x, f);
        }
        if self.model.cfg.n_enc_layers > 0 {
            x = self.layernorm(tape, x, "enc_final");
        }
        Ok((x, segs))
    }

    fn decode(
        &mut self,
        tape: &mut Tape<'m, F>,
        memory: TensorId,
        mem_segs: &[(usize, usize)],
        dec_in: &[Vec<u32>],
    ) -> Result<(TensorId, Vec<(usize, usize)>), ModelError> {
        assert_eq!(mem_segs.len(), dec_in.len(), "one memory segment per example");
        let tgt_emb = self.p("tgt_emb");
        let (mut x, segs) = self.embed_ragged(tape, tgt_emb, dec_in)?;
        x = self.drop_out(tape, x);
        for i in 0..self.model.cfg.n_dec_layers {
            let ln1 = self.layernorm(tape, x, &format!("dec{i}.ln1"));
            let a = self.attention(tape, ln1, &segs, ln1, &segs, true, &format!("dec{i}.self"))?;
            x = tape.add(x, a);
            let ln2 = self.layernorm(tape, x, &format!("dec{i}.ln2"));
            let c =
                self.attention(tape, ln2, &segs, memory, mem_segs, false, &format!("dec{i}.cross"))?;
            x = tape.add(x, c);
            let ln3 = self.layernorm(tape, x, &format!("dec{i}.ln3"));
            let f = self.ffn(tape, ln3, &format!("dec{i}.ffn"))?;
            x = tape.add(x, f);
        }
        if self.model.cfg.n_dec_layers > 0 {
            x = self.layernorm(tape, x, "dec_final");
        }
        let mut logits = tape.matmul(x, self.p("out_proj.w"))?;
        logits = tape.add_row(logits, self.p("out_proj.b"));
        Ok((logits, segs))
    }
}

/// Shape entry in the checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// JSON header stored inside every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    /// Hex SHA-256 of the vocabulary file the model was trained with.
    pub vocab_sha256: String,
    pub tensors: Vec<TensorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

impl Model<f32> {
    /// Write `magic, version, manifest length, manifest JSON, fp32 LE
    /// tensor data in manifest order`. The write lands via a temp file
    /// rename so a crash never leaves a half-written checkpoint.
    pub fn save_checkpoint(
        &self,
        vocab_sha256: &str,
        run_config: Option<serde_json::Value>,
        path: &Path,
    ) -> Result<(), ModelError> {
        let manifest = CheckpointManifest {
            config: self.cfg.clone(),
            vocab_sha256: vocab_sha256.to_string(),
            tensors: self
                .names
                .iter()
                .zip(&self.shapes)
                .map(|(n, &(r, c))| TensorSpec { name: n.clone(), rows: r, cols: c })
                .collect(),
            run_config,
        };
        let mjson = serde_json::to_vec(&manifest)
            .map_err(|e| ModelError::CorruptCheckpoint(format!("manifest encode: {e}")))?;
        let mut buf =
            Vec::with_capacity(12 + mjson.len() + 4 * self.count_params());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
        buf.extend_from_slice(&mjson);
        for tensor in &self.data {
            for &v in tensor {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::config::write_atomic(path, &buf)?;
        Ok(())
    }

    /// Parse and validate a checkpoint written by [`Model::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointManifest), ModelError> {
        let bytes = std::fs::read(path)?;
        let corrupt = |msg: &str| ModelError::CorruptCheckpoint(msg.to_string());
        if bytes.len() < 12 {
            return Err(corrupt("shorter than the fixed header"));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::CorruptCheckpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + mlen {
            return Err(corrupt("truncated manifest"));
        }
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[12..12 + mlen])
            .map_err(|e| ModelError::CorruptCheckpoint(format!("manifest parse: {e}")))?;
        manifest.config.validate()?;
        let expected: Vec<TensorSpec> = tensor_specs(&manifest.config)
            .into_iter()
            .map(|(name, rows, cols, _)| TensorSpec { name, rows, cols })
            .collect();
        if manifest.tensors != expected {
            return Err(corrupt("tensor list does not match the declared config"));
        }
        let mut offset = 12 + mlen;
        let mut names = Vec::with_capacity(expected.len());
        let mut shapes = Vec::with_capacity(expected.len());
        let mut data = Vec::with_capacity(expected.len());
        for spec in &manifest.tensors {
            let n = spec.rows * spec.cols;
            let end = offset + 4 * n;
            if bytes.len() < end {
                return Err(corrupt("truncated tensor data"));
            }
            let buf: Vec<f32> = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset = end;
            names.push(spec.name.clone());
            shapes.push((spec.rows, spec.cols));
            data.push(buf);
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok((
            Model { cfg: manifest.config.clone(), names, shapes, data, index },
            manifest,
        ))
    }
}
