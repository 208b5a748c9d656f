//! Distillation and training losses, composed from tape primitives.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Mean over rows of KL(softmax(z_S/T) || softmax(z_T/T)).
///
/// The teacher side `z_s` is detached: its softened distribution enters the
/// graph as a constant, so gradient flows only through the student logits
/// `z_t`. No T^2 multiplier is applied; see [`kl_t2_multiplier`] for the
/// opt-in classic variant.
pub fn kl_divergence_loss(tape: &mut Tape, z_s: NodeId, z_t: NodeId, temperature: f64) -> Result<NodeId> {
    if temperature <= 0.0 {
        return Err(Error::param(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if tape.shape(z_s) != tape.shape(z_t) {
        return Err(Error::shape(format!(
            "kl_divergence_loss operand shapes differ: {:?} vs {:?}",
            tape.shape(z_s),
            tape.shape(z_t)
        )));
    }
    if tape.shape(z_s).is_empty() {
        return Err(Error::shape("kl_divergence_loss needs at least one axis"));
    }
    // Teacher distribution as constants. Computing log-probabilities with
    // the same row kernel the student uses makes KL(z, z) exactly zero.
    let teacher = tape.tensor(z_s);
    let p = tape.softmax_temp_detached(&teacher, temperature)?;
    let log_p = tape.log_softmax_temp_detached(&teacher, temperature)?;

    let log_q = tape.log_softmax_temp(z_t, temperature)?;
    let diff = tape.sub(log_p, log_q)?;
    let contrib = tape.mul(p, diff)?;
    let per_row = tape.sum_last(contrib)?;
    tape.mean_all(per_row)
}

/// Opt-in T^2 scaling of a KL loss node (classic distillation keeps gradient
/// magnitudes comparable across temperatures; off by default).
pub fn kl_t2_multiplier(tape: &mut Tape, kl: NodeId, temperature: f64) -> Result<NodeId> {
    tape.scale(kl, temperature * temperature)
}

/// Mean squared error over all elements; zero iff the inputs are equal.
pub fn mse_loss(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(format!(
            "mse_loss operand shapes differ: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

/// Mean next-token cross-entropy for 2D logits ([rows, vocab]) against one
/// target id per row.
pub fn cross_entropy_mean(tape: &mut Tape, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
    let log_p = tape.log_softmax_temp(logits, 1.0)?;
    let picked = tape.pick_per_row(log_p, targets)?;
    let mean = tape.mean_all(picked)?;
    tape.scale(mean, -1.0)
}

impl Tape {
    /// The softened teacher distribution as a constant node.
    fn softmax_temp_detached(&mut self, t: &Tensor, temperature: f64) -> Result<NodeId> {
        let c = self.constant(t);
        self.softmax_temp(c, temperature)
    }

    fn log_softmax_temp_detached(&mut self, t: &Tensor, temperature: f64) -> Result<NodeId> {
        let c = self.constant(t);
        self.log_softmax_temp(c, temperature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_of(f: impl FnOnce(&mut Tape) -> Result<NodeId>) -> f64 {
        let mut tape = Tape::new();
        let id = f(&mut tape).unwrap();
        tape.scalar(id).unwrap()
    }

    #[test]
    fn kl_zero_for_identical_logits() {
        let z = Tensor::from_vec(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.5]).unwrap();
        let v = scalar_of(|tape| {
            let a = tape.constant(&z);
            let b = tape.constant(&z);
            kl_divergence_loss(tape, a, b, 1.7)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn kl_closed_form_two_logit_case() {
        // z_S=[1,0], z_T=[0,1], T=1 -> tanh(0.5)
        let zs = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let zt = Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let v = scalar_of(|tape| {
            let a = tape.constant(&zs);
            let b = tape.constant(&zt);
            kl_divergence_loss(tape, a, b, 1.0)
        });
        assert!((v - 0.5_f64.tanh()).abs() < 1e-12, "got {v}");
        assert!((v - 0.462117).abs() < 1e-6);

        // same pair at T=2 -> 0.5 * tanh(0.25)
        let v = scalar_of(|tape| {
            let a = tape.constant(&zs);
            let b = tape.constant(&zt);
            kl_divergence_loss(tape, a, b, 2.0)
        });
        assert!((v - 0.5 * 0.25_f64.tanh()).abs() < 1e-12, "got {v}");
        assert!((v - 0.122459).abs() < 1e-6);
    }

    #[test]
    fn kl_direct_summation_oracle() {
        // independent oracle: explicit sum p_i * (ln p_i - ln q_i)
        let zs_raw = [0.4, -1.2, 0.7, 2.0];
        let zt_raw = [1.0, 0.0, -0.5, 0.25];
        let t = 1.5;
        let soft = |z: &[f64]| {
            let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / t));
            let e: Vec<f64> = z.iter().map(|&v| (v / t - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let p = soft(&zs_raw);
        let q = soft(&zt_raw);
        let expect: f64 = p
            .iter()
            .zip(&q)
            .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
            .sum();

        let zs = Tensor::from_vec(vec![1, 4], zs_raw.to_vec()).unwrap();
        let zt = Tensor::from_vec(vec![1, 4], zt_raw.to_vec()).unwrap();
        let v = scalar_of(|tape| {
            let a = tape.constant(&zs);
            let b = tape.constant(&zt);
            kl_divergence_loss(tape, a, b, t)
        });
        assert!((v - expect).abs() < 1e-12, "got {v}, oracle {expect}");
    }

    #[test]
    fn kl_rejects_shape_mismatch_and_bad_temperature() {
        let a = Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![1, 3], vec![0.0, 1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let aid = tape.constant(&a);
        let bid = tape.constant(&b);
        assert!(matches!(
            kl_divergence_loss(&mut tape, aid, bid, 1.0),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            kl_divergence_loss(&mut tape, aid, aid, 0.0),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn kl_teacher_receives_no_gradient() {
        let mut zs = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let mut zt = Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap();
        zs.set_requires_grad(true);
        zt.set_requires_grad(true);
        let mut tape = Tape::new();
        let a = tape.leaf(&mut zs);
        let b = tape.leaf(&mut zt);
        let kl = kl_divergence_loss(&mut tape, a, b, 1.0).unwrap();
        tape.backward(kl).unwrap();
        tape.sync_grad(&mut zs).unwrap();
        tape.sync_grad(&mut zt).unwrap();
        // teacher leaf is trainable but detached inside the loss
        assert_eq!(zs.grad.as_deref().unwrap(), &[0.0, 0.0]);
        assert!(zt.grad.as_deref().unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn mse_examples() {
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        let v = scalar_of(|tape| {
            let aid = tape.constant(&a);
            let bid = tape.constant(&b);
            mse_loss(tape, aid, bid)
        });
        assert_eq!(v, 2.5);

        // identical inputs -> exactly zero
        let v = scalar_of(|tape| {
            let aid = tape.constant(&a);
            let bid = tape.constant(&a);
            mse_loss(tape, aid, bid)
        });
        assert_eq!(v, 0.0);

        // scalar case: h_S=[c], h=[c+delta] -> delta^2
        let c = 3.25;
        let delta = 0.5;
        let x = Tensor::from_vec(vec![1], vec![c]).unwrap();
        let y = Tensor::from_vec(vec![1], vec![c + delta]).unwrap();
        let v = scalar_of(|tape| {
            let aid = tape.constant(&x);
            let bid = tape.constant(&y);
            mse_loss(tape, aid, bid)
        });
        assert!((v - delta * delta).abs() < 1e-15);

        let bad = Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap();
        let mut tape = Tape::new();
        let aid = tape.constant(&a);
        let bid = tape.constant(&bad);
        assert!(matches!(mse_loss(&mut tape, aid, bid), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_vocab() {
        let logits = Tensor::zeros(vec![4, 7]);
        let v = scalar_of(|tape| {
            let l = tape.constant(&logits);
            cross_entropy_mean(tape, l, &[0, 3, 5, 6])
        });
        assert!((v - 7.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn t2_multiplier_scales_kl() {
        let zs = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let zt = Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(&zs);
        let b = tape.constant(&zt);
        let kl = kl_divergence_loss(&mut tape, a, b, 2.0).unwrap();
        let scaled = kl_t2_multiplier(&mut tape, kl, 2.0).unwrap();
        assert!((tape.scalar(scaled).unwrap() - 4.0 * tape.scalar(kl).unwrap()).abs() < 1e-15);
    }
}
