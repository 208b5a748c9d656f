//! Standard LoRA adapters: the frozen behavioral kernel.
//!
//! An adapter contributes `(lora_alpha / rank) * B(A(x))` to its host
//! projection's output. A is initialized small-uniform, B zero, so a fresh
//! adapter is an exact no-op. Freezing pins the matrices (checksummed) and
//! rejects further training.

use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamState};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::transformer::{Projection, SlotKey, TokenBatch, TransformerModel};
use crate::util::{seeded_rng, RunningDigest};

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    a_matrix: Tensor,
    b_matrix: Tensor,
    rank: usize,
    lora_alpha: f64,
    frozen: bool,
}

impl LoraAdapter {
    /// Fresh adapter: A ~ uniform(-1/sqrt(d_in), 1/sqrt(d_in)), B = 0.
    pub fn new(d_in: usize, d_out: usize, rank: usize, lora_alpha: f64, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let limit = 1.0 / (d_in as f64).sqrt();
        let a = Tensor::rand_uniform(vec![rank, d_in], limit, &mut rng);
        let b = Tensor::zeros(vec![d_out, rank]);
        LoraAdapter::from_matrices(a, b, rank, lora_alpha)
    }

    /// Builds an adapter from existing matrices, validating the invariants.
    pub fn from_matrices(a_matrix: Tensor, b_matrix: Tensor, rank: usize, lora_alpha: f64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::param("rank must be positive"));
        }
        if lora_alpha <= 0.0 || !lora_alpha.is_finite() {
            return Err(Error::param(format!(
                "lora_alpha must be positive, got {lora_alpha}"
            )));
        }
        let (ar, d_in) = match a_matrix.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape(format!("a_matrix must be 2D, got {s:?}"))),
        };
        let (d_out, br) = match b_matrix.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape(format!("b_matrix must be 2D, got {s:?}"))),
        };
        if ar != rank || br != rank {
            return Err(Error::shape(format!(
                "declared rank {rank} inconsistent with stored shapes {:?} and {:?}",
                a_matrix.shape(),
                b_matrix.shape()
            )));
        }
        if rank > d_in.min(d_out) {
            return Err(Error::param(format!(
                "rank {rank} exceeds min(d_in, d_out) = {}",
                d_in.min(d_out)
            )));
        }
        Ok(LoraAdapter {
            a_matrix,
            b_matrix,
            rank,
            lora_alpha,
            frozen: false,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn lora_alpha(&self) -> f64 {
        self.lora_alpha
    }

    pub fn d_in(&self) -> usize {
        self.a_matrix.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b_matrix.shape()[0]
    }

    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn a_matrix(&self) -> &Tensor {
        &self.a_matrix
    }

    pub fn b_matrix(&self) -> &Tensor {
        &self.b_matrix
    }

    /// Direct (test/loader) access. Rejected once frozen.
    pub fn matrices_mut(&mut self) -> Result<(&mut Tensor, &mut Tensor)> {
        if self.frozen {
            return Err(Error::contract(
                "adapter is frozen; its matrices are immutable",
            ));
        }
        Ok((&mut self.a_matrix, &mut self.b_matrix))
    }

    /// Pins the kernel: marks matrices non-trainable forever. Idempotent.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.a_matrix.set_requires_grad(false);
        self.b_matrix.set_requires_grad(false);
        self.a_matrix.clear_grad();
        self.b_matrix.clear_grad();
    }

    /// Checksum of (A, B, rank, alpha); stable across clones and freezing.
    pub fn checksum(&self) -> String {
        let mut d = RunningDigest::new();
        d.update(self.a_matrix.checksum().as_bytes());
        d.update(self.b_matrix.checksum().as_bytes());
        d.update(&(self.rank as u64).to_le_bytes());
        d.update(&self.lora_alpha.to_le_bytes());
        d.finish()
    }

    /// The behavioral delta on a tape: `scaling * (x A^T) B^T` for row-major
    /// activations x of shape [rows, d_in]. Frozen kernels enter the tape as
    /// guarded constants; unfrozen matrices are bound as (potentially
    /// trainable) leaves.
    pub fn delta_on_tape(&mut self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let width = *tape.shape(x).last().unwrap_or(&0);
        if tape.shape(x).len() != 2 || width != self.d_in() {
            return Err(Error::shape(format!(
                "lora_delta input shape {:?} does not match d_in {}",
                tape.shape(x),
                self.d_in()
            )));
        }
        let (a, b) = if self.frozen {
            (tape.frozen(&self.a_matrix), tape.frozen(&self.b_matrix))
        } else {
            (tape.leaf(&mut self.a_matrix), tape.leaf(&mut self.b_matrix))
        };
        let at = tape.transpose2d(a)?;
        let bt = tape.transpose2d(b)?;
        let xa = tape.matmul(x, at)?;
        let xb = tape.matmul(xa, bt)?;
        tape.scale(xb, self.scaling())
    }

    /// The behavioral delta as a plain value (no gradient tracking).
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        let mut adapter = self.clone();
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let out = adapter.delta_on_tape(&mut tape, xid)?;
        Ok(tape.tensor(out))
    }

    pub fn set_trainable(&mut self, trainable: bool) -> Result<()> {
        if self.frozen && trainable {
            return Err(Error::contract("cannot mark a frozen adapter trainable"));
        }
        self.a_matrix.set_requires_grad(trainable);
        self.b_matrix.set_requires_grad(trainable);
        Ok(())
    }
}

/// Convenience wrapper matching the operation surface: temporary clone for
/// a single untracked delta evaluation.
pub fn lora_delta(adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    adapter.delta(x)
}

pub fn freeze_adapter(adapter: &mut LoraAdapter) {
    adapter.freeze();
}

/// An adapter addressed to a (layer, projection) slot of a host model.
#[derive(Debug, Clone)]
pub struct LoraAttachment {
    pub layer: usize,
    pub projection: Projection,
    pub adapter: LoraAdapter,
}

impl LoraAttachment {
    pub fn slot(&self) -> SlotKey {
        SlotKey {
            layer: self.layer,
            proj: self.projection,
        }
    }
}

/// Creates fresh adapters for the given projections on every layer of the
/// host model, registering slots as needed and attaching them.
pub fn attach_fresh_adapters(
    model: &mut TransformerModel,
    projections: &[Projection],
    rank: usize,
    lora_alpha: f64,
    seed: u64,
) -> Result<Vec<SlotKey>> {
    let mut keys = Vec::new();
    for layer in 0..model.config.n_layers {
        for (i, &proj) in projections.iter().enumerate() {
            let key = model.register_adapter_slot(layer, proj)?;
            let (d_in, d_out) = model.slot_dims(key);
            let adapter_seed = crate::util::splitmix64(
                seed ^ ((layer as u64) << 32) ^ (i as u64 + 1),
            );
            let adapter = LoraAdapter::new(d_in, d_out, rank, lora_alpha, adapter_seed)?;
            model.attach(key, crate::transformer::Attachment::Lora(adapter))?;
            keys.push(key);
        }
    }
    Ok(keys)
}

/// Attaches existing adapters at their recorded slots (registering them).
pub fn attach_adapters(model: &mut TransformerModel, attachments: Vec<LoraAttachment>) -> Result<Vec<SlotKey>> {
    let mut keys = Vec::new();
    for att in attachments {
        let key = att.slot();
        if !model.registered_slots().contains(&key) {
            model.register_adapter_slot(att.layer, att.projection)?;
        }
        model.attach(key, crate::transformer::Attachment::Lora(att.adapter))?;
        keys.push(key);
    }
    Ok(keys)
}

/// Detaches LoRA adapters from the given slots, returning them with their
/// addresses.
pub fn detach_adapters(model: &mut TransformerModel, keys: &[SlotKey]) -> Result<Vec<LoraAttachment>> {
    let mut out = Vec::new();
    for &key in keys {
        match model.detach(key) {
            Some(crate::transformer::Attachment::Lora(adapter)) => out.push(LoraAttachment {
                layer: key.layer,
                projection: key.proj,
                adapter,
            }),
            Some(other) => {
                // put it back; the slot did not hold a LoRA
                model.attach(key, other)?;
                return Err(Error::contract(format!(
                    "slot {key} does not hold a LoRA adapter"
                )));
            }
            None => {
                return Err(Error::contract(format!("slot {key} holds no attachment")));
            }
        }
    }
    Ok(out)
}

/// One supervised batch: full token sequences plus the (row, target) pairs
/// that carry the training signal.
#[derive(Debug, Clone)]
pub struct SupervisedBatch {
    pub tokens: TokenBatch,
    /// Flat row indices (b * seq + s) whose next-token prediction is scored.
    pub rows: Vec<usize>,
    pub targets: Vec<u32>,
}

/// Anything that can stream supervised batches (the downstream task does).
pub trait SupervisedSource {
    fn next_batch(&mut self) -> Result<SupervisedBatch>;
}

/// Trains the LoRA adapters attached at `keys` on supervised batches.
///
/// The base model must be marked non-trainable and none of the adapters
/// frozen; only adapter matrices change. Returns the per-step loss trace.
pub fn train_lora(
    model: &mut TransformerModel,
    keys: &[SlotKey],
    source: &mut dyn SupervisedSource,
    steps: usize,
    optimizer: &mut AdamState,
) -> Result<Vec<f64>> {
    for (_, t) in model.params_iter() {
        if t.requires_grad {
            return Err(Error::contract(
                "base model parameters must be marked non-trainable before train_lora",
            ));
        }
    }
    for &key in keys {
        match model.attachment_mut(key) {
            Some(crate::transformer::Attachment::Lora(a)) => {
                if a.is_frozen() {
                    return Err(Error::contract(format!(
                        "adapter at {key} is frozen and cannot be trained"
                    )));
                }
                a.set_trainable(true)?;
            }
            _ => {
                return Err(Error::contract(format!(
                    "slot {key} does not hold a LoRA adapter"
                )))
            }
        }
    }

    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch = source.next_batch()?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch.tokens)?;
        let logits = out.logits_2d(&mut tape)?;
        let picked = tape.gather_rows(logits, &batch.rows)?;
        let loss = crate::losses::cross_entropy_mean(&mut tape, picked, &batch.targets)?;
        trace.push(tape.scalar(loss)?);
        tape.backward(loss)?;

        let mut params: Vec<&mut Tensor> = Vec::new();
        for &key in keys {
            if let Some(crate::transformer::Attachment::Lora(a)) = model.attachment_mut(key) {
                let (am, bm) = a.matrices_mut()?;
                tape.sync_grad(am)?;
                tape.sync_grad(bm)?;
                params.push(am);
                params.push(bm);
            }
        }
        adam_step(&mut params, optimizer)?;
    }
    Ok(trace)
}

/// Serialize-then-deserialize through the adapter file format.
pub fn adapter_roundtrip(adapter: &LoraAdapter, path: &Path) -> Result<LoraAdapter> {
    let att = LoraAttachment {
        layer: 0,
        projection: Projection::AttnQ,
        adapter: adapter.clone(),
    };
    crate::artifacts::save_adapters(path, std::slice::from_ref(&att))?;
    let mut loaded = crate::artifacts::load_adapters(path)?;
    if loaded.len() != 1 {
        return Err(Error::Format(crate::error::FormatError::Invalid(format!(
            "expected a single adapter, found {}",
            loaded.len()
        ))));
    }
    Ok(loaded.remove(0).adapter)
}
