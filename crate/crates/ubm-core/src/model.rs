//! The classification model: a small text encoder shared across tasks,
//! per-task classifier heads, and per-factor adversarial heads behind a
//! gradient-reversal layer.
//!
//! The default encoder is embedding lookup → mean pooling → a two-layer tanh
//! MLP producing a representation `z`. An optional single-head self-attention
//! layer (with sinusoidal position encodings, so it is actually order aware)
//! can be inserted before pooling.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{CoreError, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Mixes a tag into a base seed so that every consumer of randomness gets its
/// own deterministic stream (FNV-1a over the tag bytes).
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ base.wrapping_mul(0x100000001b3);
    for byte in tag.as_bytes() {
        h ^= *byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    MeanPoolMlp,
    SingleHeadAttention,
}

impl core::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EncoderKind::MeanPoolMlp => f.write_str("mean-pool-mlp"),
            EncoderKind::SingleHeadAttention => f.write_str("single-head-attention"),
        }
    }
}

impl core::str::FromStr for EncoderKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-pool-mlp" => Ok(EncoderKind::MeanPoolMlp),
            "single-head-attention" => Ok(EncoderKind::SingleHeadAttention),
            other => Err(CoreError::config(format!("unknown encoder kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub repr_dim: usize,
    pub kind: EncoderKind,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            embed_dim: 32,
            hidden_dim: 64,
            repr_dim: 32,
            kind: EncoderKind::MeanPoolMlp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(CoreError::config("vocab_size must be at least 2 (pad + unk)"));
        }
        if self.embed_dim < 1 || self.hidden_dim < 1 || self.repr_dim < 1 {
            return Err(CoreError::config("encoder dimensions must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub linear: LinearHead,
    /// Label ids counted as harmful when collapsing to a harm probability.
    pub harmful: Vec<usize>,
}

impl TaskHead {
    pub fn classes(&self) -> usize {
        self.linear.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

/// All trainable state: embedding table, encoder weights, task heads and
/// adversarial heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub embedding: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub attention: Option<AttentionParams>,
    pub heads: BTreeMap<String, TaskHead>,
    pub adv_heads: BTreeMap<String, LinearHead>,
}

fn xavier(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let values: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    Tensor::new(vec![fan_in, fan_out], values).expect("xavier shape is consistent")
}

/// Initializes encoder and embedding weights Xavier-uniform, biases zero.
/// Heads are registered separately per task.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "init"));
    let embedding = xavier(&mut rng, config.vocab_size, config.embed_dim);
    let w1 = xavier(&mut rng, config.embed_dim, config.hidden_dim);
    let w2 = xavier(&mut rng, config.hidden_dim, config.repr_dim);
    let attention = match config.kind {
        EncoderKind::MeanPoolMlp => None,
        EncoderKind::SingleHeadAttention => Some(AttentionParams {
            wq: xavier(&mut rng, config.embed_dim, config.embed_dim),
            wk: xavier(&mut rng, config.embed_dim, config.embed_dim),
            wv: xavier(&mut rng, config.embed_dim, config.embed_dim),
        }),
    };
    Ok(ModelParams {
        config: *config,
        embedding,
        w1,
        b1: Tensor::zeros(vec![1, config.hidden_dim]),
        w2,
        b2: Tensor::zeros(vec![1, config.repr_dim]),
        attention,
        heads: BTreeMap::new(),
        adv_heads: BTreeMap::new(),
    })
}

impl ModelParams {
    /// Registers a classifier head for `task_id` with `classes` outputs.
    pub fn add_task_head(
        &mut self,
        task_id: &str,
        classes: usize,
        harmful: &[usize],
        seed: u64,
    ) -> Result<()> {
        if classes < 2 {
            return Err(CoreError::config(format!(
                "task {task_id} needs at least 2 classes, got {classes}"
            )));
        }
        if harmful.is_empty() {
            return Err(CoreError::config(format!("task {task_id} has an empty harmful set")));
        }
        let mut harmful = harmful.to_vec();
        harmful.sort_unstable();
        harmful.dedup();
        if harmful.len() >= classes || harmful.iter().any(|h| *h >= classes) {
            return Err(CoreError::config(format!(
                "task {task_id}: harmful set must be a proper subset of 0..{classes}"
            )));
        }
        if self.heads.contains_key(task_id) {
            return Err(CoreError::usage(format!("task head {task_id} already registered")));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, task_id));
        let weight = xavier(&mut rng, self.config.repr_dim, classes);
        self.heads.insert(
            task_id.to_string(),
            TaskHead {
                linear: LinearHead {
                    weight,
                    bias: Tensor::zeros(vec![1, classes]),
                },
                harmful,
            },
        );
        Ok(())
    }

    /// Registers a binary adversarial head for a bias factor.
    pub fn add_adv_head(&mut self, factor_id: &str, seed: u64) -> Result<()> {
        if self.adv_heads.contains_key(factor_id) {
            return Err(CoreError::usage(format!(
                "adversarial head {factor_id} already registered"
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, factor_id));
        let weight = xavier(&mut rng, self.config.repr_dim, 2);
        self.adv_heads.insert(
            factor_id.to_string(),
            LinearHead {
                weight,
                bias: Tensor::zeros(vec![1, 2]),
            },
        );
        Ok(())
    }

    /// Re-draws the named head's weights; nothing else is touched.
    pub fn reinit_head(&mut self, task_id: &str, seed: u64) -> Result<()> {
        let repr_dim = self.config.repr_dim;
        let head = self
            .heads
            .get_mut(task_id)
            .ok_or_else(|| CoreError::usage(format!("unknown task head {task_id}")))?;
        let classes = head.classes();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, task_id));
        head.linear.weight = xavier(&mut rng, repr_dim, classes);
        head.linear.bias = Tensor::zeros(vec![1, classes]);
        Ok(())
    }

    pub fn task_head(&self, task_id: &str) -> Result<&TaskHead> {
        self.heads
            .get(task_id)
            .ok_or_else(|| CoreError::usage(format!("unknown task head {task_id}")))
    }

    /// Every tensor with a stable name, encoder parameters first.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embedding".to_string(), &self.embedding),
            ("w1".to_string(), &self.w1),
            ("b1".to_string(), &self.b1),
            ("w2".to_string(), &self.w2),
            ("b2".to_string(), &self.b2),
        ];
        if let Some(attn) = &self.attention {
            out.push(("attn.wq".to_string(), &attn.wq));
            out.push(("attn.wk".to_string(), &attn.wk));
            out.push(("attn.wv".to_string(), &attn.wv));
        }
        for (id, head) in &self.heads {
            out.push((format!("head.{id}.weight"), &head.linear.weight));
            out.push((format!("head.{id}.bias"), &head.linear.bias));
        }
        for (id, head) in &self.adv_heads {
            out.push((format!("adv.{id}.weight"), &head.weight));
            out.push((format!("adv.{id}.bias"), &head.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embedding".to_string(), &mut self.embedding),
            ("w1".to_string(), &mut self.w1),
            ("b1".to_string(), &mut self.b1),
            ("w2".to_string(), &mut self.w2),
            ("b2".to_string(), &mut self.b2),
        ];
        if let Some(attn) = &mut self.attention {
            out.push(("attn.wq".to_string(), &mut attn.wq));
            out.push(("attn.wk".to_string(), &mut attn.wk));
            out.push(("attn.wv".to_string(), &mut attn.wv));
        }
        for (id, head) in &mut self.heads {
            out.push((format!("head.{id}.weight"), &mut head.linear.weight));
            out.push((format!("head.{id}.bias"), &mut head.linear.bias));
        }
        for (id, head) in &mut self.adv_heads {
            out.push((format!("adv.{id}.weight"), &mut head.weight));
            out.push((format!("adv.{id}.bias"), &mut head.bias));
        }
        out
    }

    /// Encoder (non-head) tensors in `named_tensors` order.
    pub fn encoder_tensors(&self) -> Vec<(String, &Tensor)> {
        self.named_tensors()
            .into_iter()
            .filter(|(name, _)| is_encoder_param(name))
            .collect()
    }

    /// Checks every tensor against the dimensions implied by `config`.
    pub fn validate_shapes(&self) -> Result<()> {
        let c = &self.config;
        let expect = |name: &str, tensor: &Tensor, shape: &[usize]| -> Result<()> {
            if tensor.shape() != shape {
                return Err(CoreError::Data(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            Ok(())
        };
        expect("embedding", &self.embedding, &[c.vocab_size, c.embed_dim])?;
        expect("w1", &self.w1, &[c.embed_dim, c.hidden_dim])?;
        expect("b1", &self.b1, &[1, c.hidden_dim])?;
        expect("w2", &self.w2, &[c.hidden_dim, c.repr_dim])?;
        expect("b2", &self.b2, &[1, c.repr_dim])?;
        match (&self.attention, c.kind) {
            (Some(attn), EncoderKind::SingleHeadAttention) => {
                expect("attn.wq", &attn.wq, &[c.embed_dim, c.embed_dim])?;
                expect("attn.wk", &attn.wk, &[c.embed_dim, c.embed_dim])?;
                expect("attn.wv", &attn.wv, &[c.embed_dim, c.embed_dim])?;
            }
            (None, EncoderKind::MeanPoolMlp) => {}
            _ => {
                return Err(CoreError::Data(
                    "attention parameters inconsistent with encoder kind".to_string(),
                ))
            }
        }
        for (id, head) in &self.heads {
            let classes = head.classes();
            expect(&format!("head.{id}.weight"), &head.linear.weight, &[c.repr_dim, classes])?;
            expect(&format!("head.{id}.bias"), &head.linear.bias, &[1, classes])?;
            if head.harmful.is_empty() || head.harmful.iter().any(|h| *h >= classes) {
                return Err(CoreError::Data(format!("head {id} has an invalid harmful set")));
            }
        }
        for (id, head) in &self.adv_heads {
            expect(&format!("adv.{id}.weight"), &head.weight, &[c.repr_dim, 2])?;
            expect(&format!("adv.{id}.bias"), &head.bias, &[1, 2])?;
        }
        Ok(())
    }
}

pub fn is_encoder_param(name: &str) -> bool {
    !name.starts_with("head.") && !name.starts_with("adv.")
}

/// Which parameters receive gradients when the model is bound to a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    HeadsOnly,
    None,
}

/// A model whose parameters have been registered as leaves on a tape.
pub struct BoundModel {
    config: EncoderConfig,
    vars: BTreeMap<String, VarId>,
    head_meta: BTreeMap<String, (usize, Vec<usize>)>,
}

impl ModelParams {
    /// Copies every parameter onto `tape` as a leaf. Gradients flow only to
    /// the parameter groups selected by `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> BoundModel {
        let mut vars = BTreeMap::new();
        for (name, tensor) in self.named_tensors() {
            let rg = match trainable {
                Trainable::All => true,
                Trainable::HeadsOnly => !is_encoder_param(&name),
                Trainable::None => false,
            };
            let id = tape.leaf(tensor.clone().with_requires_grad(rg));
            vars.insert(name, id);
        }
        let head_meta = self
            .heads
            .iter()
            .map(|(id, head)| (id.clone(), (head.classes(), head.harmful.clone())))
            .collect();
        BoundModel {
            config: self.config,
            vars,
            head_meta,
        }
    }
}

impl BoundModel {
    pub fn var(&self, name: &str) -> Result<VarId> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::usage(format!("no bound parameter named {name}")))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn harmful_set(&self, task_id: &str) -> Result<&[usize]> {
        self.head_meta
            .get(task_id)
            .map(|(_, h)| h.as_slice())
            .ok_or_else(|| CoreError::usage(format!("unknown task head {task_id}")))
    }

    /// Clones the accumulated gradient of every bound parameter that has one.
    pub fn collect_grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.vars {
            if let Some(g) = tape.grad(*id) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }

    /// Squared L2 norm of the gradient over encoder parameters only, treating
    /// the per-tensor gradients as one flattened vector.
    pub fn encoder_grad_sq_norm(&self, tape: &Tape) -> f64 {
        let mut total = 0.0;
        for (name, id) in &self.vars {
            if !is_encoder_param(name) {
                continue;
            }
            if let Some(g) = tape.grad(*id) {
                total += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        total
    }
}

fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut values = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / libm::pow(10000.0, 2.0 * pair / dim as f64);
            values[pos * dim + i] = if i % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            };
        }
    }
    Tensor::new(vec![len, dim], values).expect("consistent shape")
}

/// Encodes a token sequence into the representation `z` (`[1, repr_dim]`).
pub fn encode(tape: &mut Tape, bound: &BoundModel, token_ids: &[u32]) -> Result<VarId> {
    if token_ids.is_empty() {
        return Err(CoreError::usage("encode called with an empty token sequence"));
    }
    let vocab = bound.config.vocab_size;
    let mut indices = Vec::with_capacity(token_ids.len());
    for id in token_ids {
        let idx = *id as usize;
        if idx >= vocab {
            return Err(CoreError::data(format!(
                "token id {idx} out of range for vocab of size {vocab}"
            )));
        }
        indices.push(idx);
    }
    let table = bound.var("embedding")?;

    let row = match bound.config.kind {
        EncoderKind::MeanPoolMlp => {
            // Pool over unique token types weighted by count / length. This is
            // the plain mean, but bitwise invariant to token order, and exact
            // for all-identical sequences (weight is then exactly 1.0).
            let mut unique = indices.clone();
            unique.sort_unstable();
            unique.dedup();
            let mut weights = vec![0.0f64; unique.len()];
            for idx in &indices {
                let pos = unique.binary_search(idx).expect("token is in its own unique set");
                weights[pos] += 1.0;
            }
            let inv_len = indices.len() as f64;
            for w in weights.iter_mut() {
                *w /= inv_len;
            }
            let emb = tape.gather(table, &unique)?;
            let wrow = tape.constant(Tensor::new(vec![1, unique.len()], weights)?);
            tape.matmul(wrow, emb)?
        }
        EncoderKind::SingleHeadAttention => {
            let mut x = tape.gather(table, &indices)?;
            let pos = tape.constant(sinusoidal_positions(indices.len(), bound.config.embed_dim));
            x = tape.add(x, pos)?;
            let q = tape.matmul(x, bound.var("attn.wq")?)?;
            let k = tape.matmul(x, bound.var("attn.wk")?)?;
            let v = tape.matmul(x, bound.var("attn.wv")?)?;
            let kt = tape.transpose(k)?;
            let raw = tape.matmul(q, kt)?;
            let scaled = tape.scale(raw, 1.0 / libm::sqrt(bound.config.embed_dim as f64))?;
            let attn = tape.softmax_rows(scaled)?;
            x = tape.matmul(attn, v)?;
            let pooled = tape.mean_axis(x, 0)?;
            tape.reshape(pooled, vec![1, bound.config.embed_dim])?
        }
    };
    let pre = tape.matmul(row, bound.var("w1")?)?;
    let pre_b = tape.add(pre, bound.var("b1")?)?;
    let hidden = tape.tanh(pre_b)?;
    let out = tape.matmul(hidden, bound.var("w2")?)?;
    tape.add(out, bound.var("b2")?)
}

/// Applies the task head to a representation: `logits = z · W + b` (`[1, c]`).
pub fn classify(tape: &mut Tape, bound: &BoundModel, z: VarId, task_id: &str) -> Result<VarId> {
    let w = bound.var(&format!("head.{task_id}.weight"))?;
    let b = bound.var(&format!("head.{task_id}.bias"))?;
    let out = tape.matmul(z, w)?;
    tape.add(out, b)
}

/// Total softmax probability of the task's harmful labels. Scalar in `[0,1]`.
pub fn harm_score_node(tape: &mut Tape, bound: &BoundModel, logits: VarId, task_id: &str) -> Result<VarId> {
    let harmful = bound.harmful_set(task_id)?;
    if harmful.is_empty() {
        return Err(CoreError::config(format!("task {task_id} has an empty harmful set")));
    }
    let classes = tape.value(logits).shape()[1];
    let mut mask = vec![0.0; classes];
    for h in harmful {
        mask[*h] = 1.0;
    }
    let probs = tape.softmax_rows(logits)?;
    let mask = tape.constant(Tensor::new(vec![1, classes], mask)?);
    let masked = tape.mul(probs, mask)?;
    tape.sum(masked)
}

/// Encode + classify + collapse to the harm probability, on one tape.
pub fn harm_score_graph(tape: &mut Tape, bound: &BoundModel, token_ids: &[u32], task_id: &str) -> Result<VarId> {
    let z = encode(tape, bound, token_ids)?;
    let logits = classify(tape, bound, z, task_id)?;
    harm_score_node(tape, bound, logits, task_id)
}

/// Adversarial head applied through gradient reversal: `h_adv(rev(z))`.
pub fn adv_logits(
    tape: &mut Tape,
    bound: &BoundModel,
    z: VarId,
    factor_id: &str,
    lambda: f64,
) -> Result<VarId> {
    let rev = tape.grad_reverse(z, lambda)?;
    let w = bound.var(&format!("adv.{factor_id}.weight"))?;
    let b = bound.var(&format!("adv.{factor_id}.bias"))?;
    let out = tape.matmul(rev, w)?;
    tape.add(out, b)
}

/// Forward-only logits for one example.
pub fn logits_value(params: &ModelParams, token_ids: &[u32], task_id: &str) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, Trainable::None);
    let z = encode(&mut tape, &bound, token_ids)?;
    let logits = classify(&mut tape, &bound, z, task_id)?;
    Ok(tape.value(logits).values().to_vec())
}

/// Forward-only harm probability for one example.
pub fn harm_score(params: &ModelParams, token_ids: &[u32], task_id: &str) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, Trainable::None);
    let node = harm_score_graph(&mut tape, &bound, token_ids, task_id)?;
    Ok(tape.value(node).item())
}

/// Argmax prediction; ties resolve to the smallest label.
pub fn predict_argmax(params: &ModelParams, token_ids: &[u32], task_id: &str) -> Result<usize> {
    let logits = logits_value(params, token_ids, task_id)?;
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            embed_dim: 6,
            hidden_dim: 8,
            repr_dim: 5,
            kind: EncoderKind::MeanPoolMlp,
        }
    }

    fn small_model() -> ModelParams {
        let mut params = init_params(&small_config(), 11).unwrap();
        params.add_task_head("t", 2, &[1], 12).unwrap();
        params
    }

    fn encode_value(params: &ModelParams, ids: &[u32]) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, Trainable::None);
        let z = encode(&mut tape, &bound, ids).unwrap();
        tape.value(z).values().to_vec()
    }

    #[test]
    fn identical_tokens_pool_like_a_single_token() {
        let params = small_model();
        assert_eq!(encode_value(&params, &[7]), encode_value(&params, &[7, 7, 7, 7]));
    }

    #[test]
    fn mean_pool_encoding_is_permutation_invariant() {
        let params = small_model();
        assert_eq!(
            encode_value(&params, &[3, 9, 14, 2]),
            encode_value(&params, &[14, 2, 3, 9])
        );
    }

    #[test]
    fn attention_encoding_is_order_sensitive() {
        let mut config = small_config();
        config.kind = EncoderKind::SingleHeadAttention;
        let params = init_params(&config, 11).unwrap();
        let a = encode_value(&params, &[3, 9, 14, 2]);
        let b = encode_value(&params, &[14, 2, 3, 9]);
        assert_ne!(a, b);
    }

    #[test]
    fn empty_input_is_a_usage_error() {
        let params = small_model();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, Trainable::None);
        assert!(matches!(
            encode(&mut tape, &bound, &[]),
            Err(CoreError::Usage(_))
        ));
    }

    #[test]
    fn out_of_range_token_is_a_data_error() {
        let params = small_model();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, Trainable::None);
        assert!(matches!(
            encode(&mut tape, &bound, &[3, 99]),
            Err(CoreError::Data(_))
        ));
    }

    #[test]
    fn zero_head_gives_uniform_softmax_and_zero_z_gives_bias() {
        let mut params = small_model();
        let head = params.heads.get_mut("t").unwrap();
        head.linear.weight = Tensor::zeros(vec![5, 2]);
        head.linear.bias = Tensor::zeros(vec![1, 2]);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, Trainable::None);
        let z = tape.constant(Tensor::new(vec![1, 5], vec![0.3, -0.4, 1.0, 0.0, 2.0]).unwrap());
        let logits = classify(&mut tape, &bound, z, "t").unwrap();
        assert_eq!(tape.value(logits).values(), &[0.0, 0.0]);
        let probs = tape.softmax_rows(logits).unwrap();
        assert_eq!(tape.value(probs).values(), &[0.5, 0.5]);

        // z = 0 → logits equal the bias
        let head = params.heads.get_mut("t").unwrap();
        head.linear.bias = Tensor::new(vec![1, 2], vec![0.7, -0.2]).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, Trainable::None);
        let z0 = tape.constant(Tensor::zeros(vec![1, 5]));
        let logits = classify(&mut tape, &bound, z0, "t").unwrap();
        assert_eq!(tape.value(logits).values(), &[0.7, -0.2]);
    }

    #[test]
    fn harm_score_matches_complement_identity() {
        let mut params = init_params(&small_config(), 3).unwrap();
        params.add_task_head("multi", 4, &[1, 2, 3], 4).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..50 {
            let ids: Vec<u32> = (0..6).map(|_| rng.random_range(0..20u32)).collect();
            let score = harm_score(&params, &ids, "multi").unwrap();
            let logits = logits_value(&params, &ids, "multi").unwrap();
            let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let exp: Vec<f64> = logits.iter().map(|v| libm::exp(v - max)).collect();
            let total: f64 = exp.iter().sum();
            let p_normal = exp[0] / total;
            assert!((score - (1.0 - p_normal)).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&score));
        }
    }

    #[test]
    fn uniform_softmax_harm_score_for_four_way_task() {
        let mut params = init_params(&small_config(), 3).unwrap();
        params.add_task_head("multi", 4, &[1, 2, 3], 4).unwrap();
        let head = params.heads.get_mut("multi").unwrap();
        head.linear.weight = Tensor::zeros(vec![5, 4]);
        head.linear.bias = Tensor::zeros(vec![1, 4]);
        let score = harm_score(&params, &[1, 2, 3], "multi").unwrap();
        assert!((score - 0.75).abs() < 1e-15);
    }

    #[test]
    fn binary_zero_logits_score_half() {
        let mut params = small_model();
        let head = params.heads.get_mut("t").unwrap();
        head.linear.weight = Tensor::zeros(vec![5, 2]);
        head.linear.bias = Tensor::zeros(vec![1, 2]);
        assert_eq!(harm_score(&params, &[2, 3], "t").unwrap(), 0.5);
    }

    #[test]
    fn same_seed_gives_bit_identical_params() {
        let a = init_params(&small_config(), 42).unwrap();
        let b = init_params(&small_config(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reinit_head_touches_only_the_named_head() {
        let mut params = small_model();
        params.add_task_head("u", 3, &[2], 13).unwrap();
        let before = params.clone();
        params.reinit_head("t", 77).unwrap();
        assert_eq!(params.embedding, before.embedding);
        assert_eq!(params.w1, before.w1);
        assert_eq!(params.heads["u"], before.heads["u"]);
        assert_ne!(params.heads["t"].linear.weight, before.heads["t"].linear.weight);
    }

    #[test]
    fn two_head_seeds_differ() {
        let mut a = small_model();
        let mut b = small_model();
        a.reinit_head("t", 1).unwrap();
        b.reinit_head("t", 2).unwrap();
        assert_ne!(a.heads["t"].linear.weight, b.heads["t"].linear.weight);
    }

    #[test]
    fn unknown_task_is_a_usage_error() {
        let params = small_model();
        assert!(matches!(
            logits_value(&params, &[1, 2], "nope"),
            Err(CoreError::Usage(_))
        ));
    }

    #[test]
    fn freeze_binding_blocks_encoder_gradients() {
        let params = small_model();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, Trainable::HeadsOnly);
        let node = harm_score_graph(&mut tape, &bound, &[4, 5, 6], "t").unwrap();
        tape.backward(node).unwrap();
        let grads = bound.collect_grads(&tape);
        assert!(grads.contains_key("head.t.weight"));
        assert!(!grads.contains_key("embedding"));
        assert!(!grads.contains_key("w1"));
    }
}
