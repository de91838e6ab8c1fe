//! KL divergence and cross-entropy, both as graph builders and as plain
//! evaluations over probability tables. Probabilities are floored at
//! [`PROB_FLOOR`] before every logarithm.

use ferd_autograd::{Graph, Tensor, Var};

use crate::error::{FerdError, Result};

pub const PROB_FLOOR: f64 = 1e-12;

/// Batch mean of `KL(p_i || q_i)` for row-probability tensors on the graph.
pub fn kl_rows(g: &mut Graph, p: Var, q: Var) -> Var {
    let rows = g.shape(p)[0] as f64;
    let pc = g.clamp_min(p, PROB_FLOOR);
    let qc = g.clamp_min(q, PROB_FLOOR);
    let lp = g.ln(pc);
    let lq = g.ln(qc);
    let d = g.sub(lp, lq);
    let t = g.mul(p, d);
    let s = g.sum(t);
    g.scale(s, 1.0 / rows)
}

/// Batch mean of `KL(U || q_i)` with `U` uniform over the classes.
pub fn kl_uniform_rows(g: &mut Graph, q: Var) -> Var {
    let shape = g.shape(q).to_vec();
    let u = g.constant(Tensor::full(&shape, 1.0 / shape[1] as f64));
    kl_rows(g, u, q)
}

/// Mean cross-entropy of logits against hard labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let lp = g.log_softmax(logits);
    g.nll(lp, labels)
}

/// Validate a `(B, C)` table of probability rows (non-negative, summing to
/// one within `1e-6`).
pub fn check_prob_rows(p: &Tensor, what: &str) -> Result<()> {
    if p.ndim() != 2 || p.dim(0) == 0 || p.dim(1) == 0 {
        return Err(FerdError::Input(format!("{what} must be a non-empty (B, C) table, got {:?}", p.shape())));
    }
    for i in 0..p.dim(0) {
        let row = p.row(i);
        let s: f64 = row.iter().sum();
        if row.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(FerdError::Input(format!("{what} row {i} is not a probability vector (sum {s})")));
        }
    }
    Ok(())
}

/// Batch mean of `KL(p_i || q_i)` for plain probability tables.
pub fn kl_mean(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(FerdError::Input(format!("KL operands differ in shape: {:?} vs {:?}", p.shape(), q.shape())));
    }
    check_prob_rows(p, "p")?;
    check_prob_rows(q, "q")?;
    let mut g = Graph::new();
    let (pv, qv) = (g.constant(p.clone()), g.constant(q.clone()));
    let k = kl_rows(&mut g, pv, qv);
    Ok(g.value(k).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_forms() {
        let p = Tensor::from_vec(&[1, 2], vec![0.5, 0.5]).unwrap();
        let q = Tensor::from_vec(&[1, 2], vec![0.8, 0.2]).unwrap();
        let v = kl_mean(&p, &q).unwrap();
        let expected = 0.5 * (0.5f64 / 0.8).ln() + 0.5 * (0.5f64 / 0.2).ln();
        assert!((v - expected).abs() < 1e-15);
        assert_eq!(kl_mean(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let p = Tensor::from_vec(&[1, 2], vec![0.5, 0.6]).unwrap();
        assert!(kl_mean(&p, &p).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_c() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 7]));
        let ce = cross_entropy(&mut g, z, &[0, 3, 6]);
        assert!((g.value(ce).item() - 7f64.ln()).abs() < 1e-15);
    }
}
