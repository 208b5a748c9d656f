//! Tiny decoder-only transformer with adapter attachment points.
//!
//! Pre-norm blocks, learned absolute position embeddings, GELU MLP, no
//! linear biases. Every named projection (attention q/k/v/o, MLP in/out)
//! can be registered as an adapter slot; an attached module contributes an
//! additive delta to that projection's output during the forward pass.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::cast::CastLayer;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::losses::cross_entropy_mean;
use crate::optim::{adam_step, AdamState};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::util::{seeded_rng, RunningDigest};

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::param(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::param(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Digest of the architectural fields (seed included); used as
    /// provenance in mapping artifacts.
    pub fn digest(&self) -> String {
        let mut d = RunningDigest::new();
        for v in [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_seq_len,
        ] {
            d.update(&(v as u64).to_le_bytes());
        }
        d.update(&self.seed.to_le_bytes());
        d.finish()
    }
}

/// The named linear projections that can host adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Projection {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpIn,
    MlpOut,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::AttnQ,
        Projection::AttnK,
        Projection::AttnV,
        Projection::AttnO,
        Projection::MlpIn,
        Projection::MlpOut,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Projection::AttnQ => "attn_q",
            Projection::AttnK => "attn_k",
            Projection::AttnV => "attn_v",
            Projection::AttnO => "attn_o",
            Projection::MlpIn => "mlp_in",
            Projection::MlpOut => "mlp_out",
        }
    }

    /// (d_in, d_out) of this projection under the given config.
    pub fn dims(&self, config: &ModelConfig) -> (usize, usize) {
        match self {
            Projection::MlpIn => (config.d_model, config.d_ff),
            Projection::MlpOut => (config.d_ff, config.d_model),
            _ => (config.d_model, config.d_model),
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Projection::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::param(format!("unknown projection {s:?}")))
    }
}

/// (layer, projection) address of an adapter slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SlotKey {
    pub layer: usize,
    pub proj: Projection,
}

impl fmt::Display for SlotKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.proj)
    }
}

/// A module attached to a slot; contributes an additive output delta.
pub enum Attachment {
    Lora(LoraAdapter),
    Cast(CastLayer),
}

impl Attachment {
    pub fn in_dim(&self) -> usize {
        match self {
            Attachment::Lora(a) => a.d_in(),
            Attachment::Cast(c) => c.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Attachment::Lora(a) => a.d_out(),
            Attachment::Cast(c) => c.out_dim(),
        }
    }

    fn delta(&mut self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Attachment::Lora(a) => a.delta_on_tape(tape, x),
            Attachment::Cast(c) => c.forward(tape, x),
        }
    }
}

/// A batch of token ids, shape [batch, seq].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<u32>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::shape(format!(
                "token batch {batch}x{seq} needs {} ids, got {}",
                batch * seq,
                ids.len()
            )));
        }
        Ok(TokenBatch { batch, seq, ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn get(&self, b: usize, s: usize) -> u32 {
        self.ids[b * self.seq + s]
    }

    pub fn set(&mut self, b: usize, s: usize, id: u32) {
        self.ids[b * self.seq + s] = id;
    }

    /// Little-endian byte serialization for corpus checksums.
    pub fn digest_into(&self, digest: &mut RunningDigest) {
        for id in &self.ids {
            digest.update(&id.to_le_bytes());
        }
    }
}

/// Node handles produced by a forward pass.
///
/// `logits` has shape [batch, seq, vocab]; `final_hidden` is the
/// post-final-norm, pre-head activation with shape [batch, seq, d_model].
pub struct ForwardOutput {
    pub logits: NodeId,
    pub final_hidden: NodeId,
    pub batch: usize,
    pub seq: usize,
}

impl ForwardOutput {
    /// Logits flattened to [batch*seq, vocab].
    pub fn logits_2d(&self, tape: &mut Tape) -> Result<NodeId> {
        let v = *tape.shape(self.logits).last().unwrap();
        tape.reshape(self.logits, vec![self.batch * self.seq, v])
    }

    /// Final hidden states flattened to [batch*seq, d_model].
    pub fn hidden_2d(&self, tape: &mut Tape) -> Result<NodeId> {
        let d = *tape.shape(self.final_hidden).last().unwrap();
        tape.reshape(self.final_hidden, vec![self.batch * self.seq, d])
    }
}

pub struct TransformerModel {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    slots: BTreeMap<SlotKey, Option<Attachment>>,
}

/// Deterministic initialization from `config.seed`: the same config yields
/// bit-identical parameters.
pub fn init_model(config: &ModelConfig) -> Result<TransformerModel> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed);
    let std = 0.02;
    let mut params = BTreeMap::new();
    let d = config.d_model;

    let mut put = |params: &mut BTreeMap<String, Tensor>, name: String, t: Tensor| {
        params.insert(name, t);
    };

    put(
        &mut params,
        "embed.tok".into(),
        Tensor::randn(vec![config.vocab_size, d], std, &mut rng),
    );
    put(
        &mut params,
        "embed.pos".into(),
        Tensor::randn(vec![config.max_seq_len, d], std, &mut rng),
    );
    for layer in 0..config.n_layers {
        for (proj, shape) in [
            (Projection::AttnQ, vec![d, d]),
            (Projection::AttnK, vec![d, d]),
            (Projection::AttnV, vec![d, d]),
            (Projection::AttnO, vec![d, d]),
            (Projection::MlpIn, vec![d, config.d_ff]),
            (Projection::MlpOut, vec![config.d_ff, d]),
        ] {
            put(
                &mut params,
                format!("layer{layer}.{proj}.w"),
                Tensor::randn(shape, std, &mut rng),
            );
        }
        for ln in ["ln1", "ln2"] {
            let mut gamma = Tensor::zeros(vec![d]);
            gamma.data_mut().fill(1.0);
            put(&mut params, format!("layer{layer}.{ln}.gamma"), gamma);
            put(
                &mut params,
                format!("layer{layer}.{ln}.beta"),
                Tensor::zeros(vec![d]),
            );
        }
    }
    let mut gamma = Tensor::zeros(vec![d]);
    gamma.data_mut().fill(1.0);
    put(&mut params, "final_norm.gamma".into(), gamma);
    put(&mut params, "final_norm.beta".into(), Tensor::zeros(vec![d]));
    put(
        &mut params,
        "head.w".into(),
        Tensor::randn(vec![d, config.vocab_size], std, &mut rng),
    );

    Ok(TransformerModel {
        config: config.clone(),
        params,
        slots: BTreeMap::new(),
    })
}

impl TransformerModel {
    /// Marks all base parameters trainable or frozen-for-training. Slot
    /// attachments manage their own trainability.
    pub fn set_trainable(&mut self, trainable: bool) {
        for t in self.params.values_mut() {
            t.set_requires_grad(trainable);
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn params_iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    /// Replaces a parameter's values (shape must match); used by loaders.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let current = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::param(format!("unknown parameter {name:?}")))?;
        if current.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                current.shape(),
                value.shape()
            )));
        }
        *current = value;
        Ok(())
    }

    /// Checksum over all base parameters (names and values).
    pub fn checksum(&self) -> String {
        let mut d = RunningDigest::new();
        for (name, t) in &self.params {
            d.update(name.as_bytes());
            d.update(t.checksum().as_bytes());
        }
        d.finish()
    }

    // ── adapter slots ───────────────────────────────────────────────────

    /// Makes a (layer, projection) available for attachment.
    pub fn register_adapter_slot(&mut self, layer: usize, proj: Projection) -> Result<SlotKey> {
        if layer >= self.config.n_layers {
            return Err(Error::param(format!(
                "layer {layer} out of range for {} layers",
                self.config.n_layers
            )));
        }
        let key = SlotKey { layer, proj };
        if self.slots.contains_key(&key) {
            return Err(Error::contract(format!("slot {key} already registered")));
        }
        self.slots.insert(key, None);
        Ok(key)
    }

    pub fn registered_slots(&self) -> Vec<SlotKey> {
        self.slots.keys().copied().collect()
    }

    /// Dimensions (d_in, d_out) of a slot's base projection.
    pub fn slot_dims(&self, key: SlotKey) -> (usize, usize) {
        key.proj.dims(&self.config)
    }

    pub fn attach(&mut self, key: SlotKey, attachment: Attachment) -> Result<()> {
        let (d_in, d_out) = self.slot_dims(key);
        let slot = self
            .slots
            .get_mut(&key)
            .ok_or_else(|| Error::param(format!("slot {key} is not registered")))?;
        if slot.is_some() {
            return Err(Error::contract(format!("slot {key} already holds an attachment")));
        }
        if attachment.in_dim() != d_in || attachment.out_dim() != d_out {
            return Err(Error::shape(format!(
                "attachment dims {}x{} do not match slot {key} dims {d_in}x{d_out}",
                attachment.in_dim(),
                attachment.out_dim()
            )));
        }
        *slot = Some(attachment);
        Ok(())
    }

    pub fn detach(&mut self, key: SlotKey) -> Option<Attachment> {
        self.slots.get_mut(&key).and_then(|s| s.take())
    }

    pub fn attachment(&self, key: SlotKey) -> Option<&Attachment> {
        self.slots.get(&key).and_then(|s| s.as_ref())
    }

    pub fn attachment_mut(&mut self, key: SlotKey) -> Option<&mut Attachment> {
        self.slots.get_mut(&key).and_then(|s| s.as_mut())
    }

    pub fn attached_slots(&self) -> Vec<SlotKey> {
        self.slots
            .iter()
            .filter(|(_, v)| v.is_some())
            .map(|(k, _)| *k)
            .collect()
    }

    // ── forward ─────────────────────────────────────────────────────────

    fn bind(&mut self, tape: &mut Tape, name: &str) -> NodeId {
        let t = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter {name:?} must exist"));
        tape.leaf(t)
    }

    /// Applies the named projection plus any attached delta.
    fn project(&mut self, tape: &mut Tape, x: NodeId, layer: usize, proj: Projection) -> Result<NodeId> {
        let w = self.bind(tape, &format!("layer{layer}.{proj}.w"));
        let base = tape.matmul(x, w)?;
        let key = SlotKey { layer, proj };
        if let Some(slot) = self.slots.get_mut(&key) {
            if let Some(att) = slot.as_mut() {
                let delta = att.delta(tape, x)?;
                return tape.add(base, delta);
            }
        }
        Ok(base)
    }

    fn norm(&mut self, tape: &mut Tape, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.bind(tape, &format!("{prefix}.gamma"));
        let beta = self.bind(tape, &format!("{prefix}.beta"));
        tape.layer_norm(x, gamma, beta, 1e-5)
    }

    /// Causal forward pass. Bind each model to a tape at most once when
    /// gradients matter: parameters are re-registered as leaves per call.
    pub fn forward(&mut self, tape: &mut Tape, tokens: &TokenBatch) -> Result<ForwardOutput> {
        let cfg = self.config.clone();
        if tokens.seq > cfg.max_seq_len {
            return Err(Error::input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.seq, cfg.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.ids().iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::input(format!(
                "token id {bad} out of range for vocabulary size {}",
                cfg.vocab_size
            )));
        }
        let (b, s, d) = (tokens.batch, tokens.seq, cfg.d_model);
        let rows = b * s;

        let tok_table = self.bind(tape, "embed.tok");
        let mut x = tape.embedding(tok_table, tokens.ids())?;

        let pos_table = self.bind(tape, "embed.pos");
        let pos_rows: Vec<usize> = (0..s).collect();
        let pos = tape.gather_rows(pos_table, &pos_rows)?;
        let pos = tape.reshape(pos, vec![1, s, d])?;
        let pos = tape.broadcast_to(pos, vec![b, s, d])?;
        let pos = tape.reshape(pos, vec![rows, d])?;
        x = tape.add(x, pos)?;

        let (h, dh) = (cfg.n_heads, cfg.head_dim());
        let mask = causal_mask(s);
        let mask_id = tape.constant(&mask);

        for layer in 0..cfg.n_layers {
            // attention block
            let normed = self.norm(tape, x, &format!("layer{layer}.ln1"))?;
            let q = self.project(tape, normed, layer, Projection::AttnQ)?;
            let k = self.project(tape, normed, layer, Projection::AttnK)?;
            let v = self.project(tape, normed, layer, Projection::AttnV)?;

            let split = |tape: &mut Tape, t: NodeId| -> Result<NodeId> {
                let t = tape.reshape(t, vec![b, s, h, dh])?;
                let t = tape.permute(t, &[0, 2, 1, 3])?;
                tape.reshape(t, vec![b * h, s, dh])
            };
            let q3 = split(tape, q)?;
            let v3 = split(tape, v)?;
            let k4 = tape.reshape(k, vec![b, s, h, dh])?;
            let k4 = tape.permute(k4, &[0, 2, 3, 1])?;
            let k3t = tape.reshape(k4, vec![b * h, dh, s])?;

            let scores = tape.bmm(q3, k3t)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let mask_b = tape.broadcast_to(mask_id, vec![b * h, s, s])?;
            let scores = tape.add(scores, mask_b)?;
            let attn = tape.softmax_temp(scores, 1.0)?;
            let ctx = tape.bmm(attn, v3)?;
            let ctx = tape.reshape(ctx, vec![b, h, s, dh])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, vec![rows, d])?;
            let attn_out = self.project(tape, ctx, layer, Projection::AttnO)?;
            x = tape.add(x, attn_out)?;

            // MLP block
            let normed = self.norm(tape, x, &format!("layer{layer}.ln2"))?;
            let up = self.project(tape, normed, layer, Projection::MlpIn)?;
            let act = tape.gelu(up)?;
            let down = self.project(tape, act, layer, Projection::MlpOut)?;
            x = tape.add(x, down)?;
        }

        let hidden = self.norm(tape, x, "final_norm")?;
        let head = self.bind(tape, "head.w");
        let logits = tape.matmul(hidden, head)?;

        let logits = tape.reshape(logits, vec![b, s, cfg.vocab_size])?;
        let hidden = tape.reshape(hidden, vec![b, s, d])?;
        Ok(ForwardOutput {
            logits,
            final_hidden: hidden,
            batch: b,
            seq: s,
        })
    }

    /// Pulls gradients from the tape into every trainable base parameter.
    pub fn sync_grads(&mut self, tape: &Tape) -> Result<()> {
        for t in self.params.values_mut() {
            if t.requires_grad {
                tape.sync_grad(t)?;
            }
        }
        Ok(())
    }

    /// Ordered trainable base parameters, for the optimizer.
    pub fn trainable_params(&mut self) -> Vec<&mut Tensor> {
        self.params
            .values_mut()
            .filter(|t| t.requires_grad)
            .collect()
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }
}

/// Additive causal mask [1, s, s]: zero on and below the diagonal, a large
/// negative value above so masked scores underflow to exactly zero after
/// softmax.
fn causal_mask(s: usize) -> Tensor {
    let mut data = vec![0.0; s * s];
    for i in 0..s {
        for j in (i + 1)..s {
            data[i * s + j] = -1e9;
        }
    }
    Tensor::from_vec(vec![1, s, s], data).expect("mask values are finite")
}

/// One next-token cross-entropy step; returns the loss before the update.
pub fn pretrain_step(
    model: &mut TransformerModel,
    batch: &TokenBatch,
    optimizer: &mut AdamState,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch)?;
    let loss = next_token_loss(&mut tape, &out, batch)?;
    let loss_value = tape.scalar(loss)?;
    tape.backward(loss)?;
    model.sync_grads(&tape)?;
    let mut params = model.trainable_params();
    adam_step(&mut params, optimizer)?;
    Ok(loss_value)
}

/// Mean cross-entropy of positions 0..seq-1 predicting tokens 1..seq.
pub fn next_token_loss(tape: &mut Tape, out: &ForwardOutput, batch: &TokenBatch) -> Result<NodeId> {
    if batch.seq < 2 {
        return Err(Error::input(
            "next-token loss needs sequences of at least 2 tokens",
        ));
    }
    let logits = out.logits_2d(tape)?;
    let mut rows = Vec::with_capacity(batch.batch * (batch.seq - 1));
    let mut targets = Vec::with_capacity(rows.capacity());
    for b in 0..batch.batch {
        for s in 0..batch.seq - 1 {
            rows.push(b * batch.seq + s);
            targets.push(batch.get(b, s + 1));
        }
    }
    let picked = tape.gather_rows(logits, &rows)?;
    cross_entropy_mean(tape, picked, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 32,
            max_seq_len: 12,
            seed: 7,
        }
    }

    fn random_batch(cfg: &ModelConfig, batch: usize, seq: usize, seed: u64) -> TokenBatch {
        let mut rng = seeded_rng(seed);
        let ids = (0..batch * seq)
            .map(|_| rng.gen_range(0..cfg.vocab_size as u32))
            .collect();
        TokenBatch::new(batch, seq, ids).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let cfg = small_config();
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());

        let mut bad = cfg.clone();
        bad.d_model = 30;
        bad.n_heads = 4;
        assert!(matches!(init_model(&bad), Err(Error::Param(_))));

        let mut zero = cfg;
        zero.n_layers = 0;
        assert!(init_model(&zero).is_err());
    }

    #[test]
    fn head_dim_arithmetic() {
        let cfg = ModelConfig {
            vocab_size: 8,
            d_model: 32,
            n_layers: 1,
            n_heads: 4,
            d_ff: 64,
            max_seq_len: 8,
            seed: 0,
        };
        assert_eq!(cfg.head_dim(), 8);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config();
        let mut model = init_model(&cfg).unwrap();
        let batch = random_batch(&cfg, 2, 6, 3);
        let run = |model: &mut TransformerModel| {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch).unwrap();
            tape.value(out.logits).to_vec()
        };
        assert_eq!(run(&mut model), run(&mut model));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cfg = small_config();
        let mut model = init_model(&cfg).unwrap();
        let mut tape = Tape::new();
        let long = random_batch(&cfg, 1, cfg.max_seq_len + 1, 1);
        assert!(matches!(
            model.forward(&mut tape, &long),
            Err(Error::Input(_))
        ));
        let bad = TokenBatch::new(1, 2, vec![0, cfg.vocab_size as u32]).unwrap();
        assert!(matches!(
            model.forward(&mut tape, &bad),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn causality_perturbation_oracle() {
        let cfg = small_config();
        let mut model = init_model(&cfg).unwrap();
        let mut rng = seeded_rng(42);
        for trial in 0..5 {
            let batch = random_batch(&cfg, 1, 8, 100 + trial);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch).unwrap();
            let base = tape.value(out.logits).to_vec();

            let t = rng.gen_range(1..8usize);
            let mut perturbed = batch.clone();
            perturbed.set(0, t, (perturbed.get(0, t) + 1) % cfg.vocab_size as u32);
            let mut tape2 = Tape::new();
            let out2 = model.forward(&mut tape2, &perturbed).unwrap();
            let changed = tape2.value(out2.logits);

            let v = cfg.vocab_size;
            // positions before t are bit-identical; position t differs
            assert_eq!(&base[..t * v], &changed[..t * v]);
            assert_ne!(&base[t * v..(t + 1) * v], &changed[t * v..(t + 1) * v]);
        }
    }

    #[test]
    fn slot_registration_contract() {
        let cfg = small_config();
        let mut model = init_model(&cfg).unwrap();
        let key = model.register_adapter_slot(0, Projection::AttnQ).unwrap();
        assert_eq!(key.to_string(), "layer0.attn_q");
        assert!(matches!(
            model.register_adapter_slot(0, Projection::AttnQ),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            model.register_adapter_slot(cfg.n_layers, Projection::AttnQ),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn init_loss_near_ln_vocab() {
        let cfg = small_config();
        let mut model = init_model(&cfg).unwrap();
        let batch = random_batch(&cfg, 4, 8, 5);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch).unwrap();
        let loss = next_token_loss(&mut tape, &out, &batch).unwrap();
        let v = tape.scalar(loss).unwrap();
        let expect = (cfg.vocab_size as f64).ln();
        assert!(
            (v - expect).abs() / expect < 0.15,
            "init loss {v} not within 15% of ln(vocab) = {expect}"
        );
    }

    #[test]
    fn pretrain_lr_zero_keeps_params() {
        let cfg = small_config();
        let mut model = init_model(&cfg).unwrap();
        model.set_trainable(true);
        let before = model.checksum();
        let mut opt = AdamState::new(0.0).unwrap();
        let batch = random_batch(&cfg, 2, 6, 9);
        pretrain_step(&mut model, &batch, &mut opt).unwrap();
        assert_eq!(model.checksum(), before);
    }

    #[test]
    fn pretrain_reduces_loss_on_repetitive_corpus() {
        let cfg = ModelConfig {
            vocab_size: 8,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 8,
            seed: 11,
        };
        let mut model = init_model(&cfg).unwrap();
        model.set_trainable(true);
        let mut opt = AdamState::new(3e-3).unwrap();
        // repeating token cycle: fully predictable
        let ids: Vec<u32> = (0..4 * 8).map(|i| (i % 8) as u32).collect();
        let batch = TokenBatch::new(4, 8, ids).unwrap();
        let first = pretrain_step(&mut model, &batch, &mut opt).unwrap();
        let mut last = first;
        for _ in 1..200 {
            last = pretrain_step(&mut model, &batch, &mut opt).unwrap();
        }
        assert!(
            last < first,
            "loss did not decrease: first {first}, last {last}"
        );
        assert!(last < 0.5 * first, "expected substantial progress, got {first} -> {last}");
    }

    #[test]
    fn pretrain_gradients_match_finite_differences() {
        // spot check random parameter elements on a 2-layer, d_model=8 model
        let cfg = ModelConfig {
            vocab_size: 6,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 6,
            seed: 13,
        };
        let mut model = init_model(&cfg).unwrap();
        model.set_trainable(true);
        let batch = random_batch(&cfg, 2, 5, 21);

        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch).unwrap();
        let loss = next_token_loss(&mut tape, &out, &batch).unwrap();
        tape.backward(loss).unwrap();
        model.sync_grads(&tape).unwrap();

        let names: Vec<String> = model.param_names().cloned().collect();
        let mut rng = seeded_rng(99);
        let h = 1e-5;
        for check in 0..20 {
            let name = &names[rng.gen_range(0..names.len())];
            let len = model.param(name).unwrap().numel();
            let idx = rng.gen_range(0..len);
            let analytic = model.param(name).unwrap().grad.as_ref().unwrap()[idx];

            let eval = |model: &mut TransformerModel| -> f64 {
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, &batch).unwrap();
                let loss = next_token_loss(&mut tape, &out, &batch).unwrap();
                tape.scalar(loss).unwrap()
            };
            let original = model.param(name).unwrap().data()[idx];
            model.param_mut(name).unwrap().data_mut()[idx] = original + h;
            let plus = eval(&mut model);
            model.param_mut(name).unwrap().data_mut()[idx] = original - h;
            let minus = eval(&mut model);
            model.param_mut(name).unwrap().data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let tol = 1e-3 * analytic.abs().max(numeric.abs()) + 1e-7;
            assert!(
                (analytic - numeric).abs() <= tol,
                "check {check}: param {name}[{idx}] analytic {analytic:.6e} vs numeric {numeric:.6e}"
            );
        }
    }
}
