//! The co-learning objective and its primitives.
//!
//! Each network `i` minimizes, per sample,
//!
//! ```text
//! L_i = KL(q || p_i) + sum_{j != i} beta_ij * KL(p_j || p_i)
//! ```
//!
//! where `q` is the target distribution and the peer predictions `p_j` are
//! treated as constants within a step (each network optimizes only its own
//! parameters against the frozen prediction set). Negative `beta` rewards
//! disagreement with the peers; `beta = 0` reduces to plain cross-entropy.
//!
//! All divergences are in nats. Probabilities are clipped to
//! `[PROB_CLIP, 1]` before any logarithm, which bounds a single KL term by
//! about 27.6 nats and keeps saturated softmax outputs finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Lower clip applied to probabilities before logs.
pub const PROB_CLIP: f64 = 1e-12;

/// A probability vector over class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution<E>(Vec<E>);

impl<E: Element> Distribution<E> {
    /// Validates non-negativity and normalization (sum within 1e-6 of 1).
    pub fn new(probs: Vec<E>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Shape("empty distribution".into()));
        }
        let mut sum = 0.0f64;
        for &p in &probs {
            let v = p.to_f64();
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Contract(format!(
                    "distribution entry {v} is negative or non-finite"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "distribution sums to {sum}, expected 1 within 1e-6"
            )));
        }
        Ok(Distribution(probs))
    }

    /// One-hot distribution on `class`.
    pub fn one_hot(classes: usize, class: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::Shape(format!(
                "one-hot class {class} out of range for {classes} classes"
            )));
        }
        let mut v = vec![E::zero(); classes];
        v[class] = E::one();
        Ok(Distribution(v))
    }

    /// Uniform distribution over `classes` labels.
    pub fn uniform(classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Shape("uniform distribution over zero classes".into()));
        }
        Ok(Distribution(vec![
            E::from_f64(1.0 / classes as f64);
            classes
        ]))
    }

    pub fn probs(&self) -> &[E] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax_lowest(&self.0)
    }
}

/// Lowest-index argmax; the tie rule used everywhere accuracy is computed.
pub fn argmax_lowest<E: Element>(xs: &[E]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[inline]
fn ln_clipped<E: Element>(x: E) -> E {
    x.max(E::from_f64(PROB_CLIP)).ln()
}

fn check_same_len<E: Element>(p: &Distribution<E>, r: &Distribution<E>, op: &str) -> Result<()> {
    if p.len() != r.len() {
        return Err(Error::Shape(format!(
            "{op}: dimension mismatch {} vs {}",
            p.len(),
            r.len()
        )));
    }
    Ok(())
}

/// `KL(one_hot(label) || p) = -ln p[label]`, clipped.
pub(crate) fn nll_row<E: Element>(p: &[E], label: usize) -> E {
    -ln_clipped(p[label])
}

pub(crate) fn kl_row<E: Element>(p: &[E], r: &[E]) -> E {
    let mut acc = E::zero();
    for (&pv, &rv) in p.iter().zip(r) {
        // 0 * ln(clip) is exactly 0, so zero entries contribute nothing.
        acc += pv * (ln_clipped(pv) - ln_clipped(rv));
    }
    acc
}

pub(crate) fn entropy_row<E: Element>(p: &[E]) -> E {
    let mut acc = E::zero();
    for &pv in p {
        acc -= pv * ln_clipped(pv);
    }
    acc
}

pub(crate) fn js_row<E: Element>(p: &[E], r: &[E]) -> E {
    let half = E::from_f64(0.5);
    let mut acc = E::zero();
    // KL(p||m) + KL(r||m) with m = (p + r) / 2, expanded so no midpoint
    // buffer is allocated.
    for (&pv, &rv) in p.iter().zip(r) {
        let m = half * (pv + rv);
        let lm = ln_clipped(m);
        acc += pv * (ln_clipped(pv) - lm) + rv * (ln_clipped(rv) - lm);
    }
    half * acc
}

/// `D_KL(p || r)` in nats; non-negative, zero iff `p == r` up to clipping.
pub fn kl_divergence<E: Element>(p: &Distribution<E>, r: &Distribution<E>) -> Result<E> {
    check_same_len(p, r, "kl_divergence")?;
    Ok(kl_row(p.probs(), r.probs()))
}

/// Jensen-Shannon divergence in nats; symmetric and bounded by `ln 2`.
pub fn js_divergence<E: Element>(p: &Distribution<E>, r: &Distribution<E>) -> Result<E> {
    check_same_len(p, r, "js_divergence")?;
    Ok(js_row(p.probs(), r.probs()))
}

/// Shannon entropy in nats, with `0 ln 0 := 0`; bounded by `ln(classes)`.
pub fn entropy<E: Element>(p: &Distribution<E>) -> E {
    entropy_row(p.probs())
}

/// Pairwise coupling coefficients `beta_ij` of an ensemble of `n` networks.
/// The diagonal is always zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingMatrix {
    n: usize,
    beta: Vec<f64>,
}

impl CouplingMatrix {
    /// Uniform all-to-all coupling `beta_ij = beta_bar / n` off-diagonal,
    /// the normalized parameterization under which optimal ensembles sit
    /// near `beta_bar ~ -1` independent of size.
    pub fn uniform(beta_bar: f64, n: usize) -> Self {
        let b = beta_bar / n as f64;
        let mut beta = vec![b; n * n];
        for i in 0..n {
            beta[i * n + i] = 0.0;
        }
        CouplingMatrix { n, beta }
    }

    /// All couplings zero: independent training.
    pub fn zeros(n: usize) -> Self {
        CouplingMatrix {
            n,
            beta: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut beta = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape(format!(
                    "coupling row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Config(format!("coupling ({i},{j}) is not finite")));
                }
                if i == j && v != 0.0 {
                    return Err(Error::Config(format!(
                        "coupling diagonal ({i},{i}) must be exactly 0, got {v}"
                    )));
                }
                beta.push(v);
            }
        }
        Ok(CouplingMatrix { n, beta })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.beta[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.beta[i * self.n..(i + 1) * self.n]
    }

    /// Largest possible per-sample loss magnitude multiplier,
    /// `1 + sum_j |beta_ij|`, maximized over rows.
    pub fn loss_bound_factor(&self) -> f64 {
        (0..self.n)
            .map(|i| 1.0 + self.row(i).iter().map(|b| b.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

fn check_coupled_args<E: Element>(
    i: usize,
    preds: &[Distribution<E>],
    target: &Distribution<E>,
    coupling: &CouplingMatrix,
) -> Result<()> {
    if i >= preds.len() {
        return Err(Error::Contract(format!(
            "network index {i} out of range for {} predictions",
            preds.len()
        )));
    }
    if coupling.n() != preds.len() {
        return Err(Error::Shape(format!(
            "coupling matrix is {0}x{0} but there are {1} predictions",
            coupling.n(),
            preds.len()
        )));
    }
    let classes = target.len();
    for (j, p) in preds.iter().enumerate() {
        if p.len() != classes {
            return Err(Error::Shape(format!(
                "prediction {j} has {} classes, target has {classes}",
                p.len()
            )));
        }
    }
    Ok(())
}

pub(crate) fn coupled_loss_row<E: Element>(
    i: usize,
    preds: &[&[E]],
    target: &[E],
    coupling: &CouplingMatrix,
) -> E {
    let p_i = preds[i];
    let mut loss = kl_row(target, p_i);
    for (j, &beta) in coupling.row(i).iter().enumerate() {
        if j != i && beta != 0.0 {
            loss += E::from_f64(beta) * kl_row(preds[j], p_i);
        }
    }
    loss
}

pub(crate) fn reduced_loss_row<E: Element>(
    i: usize,
    preds: &[&[E]],
    target: &[E],
    coupling: &CouplingMatrix,
) -> E {
    let p_i = preds[i];
    // -sum_y q ln p_i  - sum_j beta_ij ( sum_y p_j ln p_i + H[p_j] )
    let mut loss = E::zero();
    for (&q, &pi) in target.iter().zip(p_i) {
        loss -= q * ln_clipped(pi);
    }
    for (j, &beta) in coupling.row(i).iter().enumerate() {
        if j != i && beta != 0.0 {
            let mut cross = E::zero();
            for (&pj, &pi) in preds[j].iter().zip(p_i) {
                cross -= pj * ln_clipped(pi);
            }
            loss += E::from_f64(beta) * (cross - entropy_row(preds[j]));
        }
    }
    loss
}

pub(crate) fn coupled_grad_row<E: Element>(
    i: usize,
    preds: &[&[E]],
    target: &[E],
    coupling: &CouplingMatrix,
    out: &mut [E],
) {
    let p_i = preds[i];
    let row = coupling.row(i);
    let mut scale = 1.0f64;
    for (j, &beta) in row.iter().enumerate() {
        if j != i {
            scale += beta;
        }
    }
    let scale = E::from_f64(scale);
    for ((o, &pi), &q) in out.iter_mut().zip(p_i).zip(target) {
        *o = scale * pi - q;
    }
    for (j, &beta) in row.iter().enumerate() {
        if j != i && beta != 0.0 {
            let b = E::from_f64(beta);
            for (o, &pj) in out.iter_mut().zip(preds[j]) {
                *o -= b * pj;
            }
        }
    }
}

/// Per-sample co-learning loss of network `i` against the frozen prediction
/// set: `KL(q || p_i) + sum_{j != i} beta_ij KL(p_j || p_i)`.
pub fn coupled_loss<E: Element>(
    i: usize,
    preds: &[Distribution<E>],
    target: &Distribution<E>,
    coupling: &CouplingMatrix,
) -> Result<E> {
    check_coupled_args(i, preds, target, coupling)?;
    let rows: Vec<&[E]> = preds.iter().map(|p| p.probs()).collect();
    Ok(coupled_loss_row(i, &rows, target.probs(), coupling))
}

/// The reduced objective: drops the target-entropy constant, so
/// `reduced_loss - coupled_loss == entropy(target)` identically (zero for
/// one-hot targets) and both forms share the same gradient.
pub fn reduced_loss<E: Element>(
    i: usize,
    preds: &[Distribution<E>],
    target: &Distribution<E>,
    coupling: &CouplingMatrix,
) -> Result<E> {
    check_coupled_args(i, preds, target, coupling)?;
    let rows: Vec<&[E]> = preds.iter().map(|p| p.probs()).collect();
    Ok(reduced_loss_row(i, &rows, target.probs(), coupling))
}

/// Analytic gradient of [`coupled_loss`] with respect to network `i`'s
/// logits (predictions obtained via softmax; peers constant):
/// `(1 + sum_j beta_ij) p_i - q - sum_j beta_ij p_j`.
pub fn coupled_grad_logits<E: Element>(
    i: usize,
    preds: &[Distribution<E>],
    target: &Distribution<E>,
    coupling: &CouplingMatrix,
) -> Result<Vec<E>> {
    check_coupled_args(i, preds, target, coupling)?;
    let rows: Vec<&[E]> = preds.iter().map(|p| p.probs()).collect();
    let mut out = vec![E::zero(); target.len()];
    coupled_grad_row(i, &rows, target.probs(), coupling, &mut out);
    Ok(out)
}

/// Batched form of [`coupled_grad_logits`] used by the trainer: `preds` holds
/// each network's `(B, C)` probability matrix, `targets` is `(B, C)`. The
/// result is the mean-over-batch gradient, i.e. scaled by `1/B` to match
/// minibatch-averaged losses.
pub fn coupled_grad_logits_batch<E: Element>(
    i: usize,
    preds: &[Tensor<E>],
    targets: &Tensor<E>,
    coupling: &CouplingMatrix,
) -> Result<Tensor<E>> {
    if i >= preds.len() || coupling.n() != preds.len() {
        return Err(Error::Shape(format!(
            "network index {i} / coupling size {} vs {} predictions",
            coupling.n(),
            preds.len()
        )));
    }
    let shape = targets.shape().to_vec();
    for (j, p) in preds.iter().enumerate() {
        if p.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "prediction matrix {j} has shape {:?}, targets {shape:?}",
                p.shape()
            )));
        }
    }
    let (b, c) = (shape[0], shape[1]);
    let inv_b = E::from_f64(1.0 / b as f64);
    let mut grad = Tensor::zeros(&[b, c]);
    let mut rows: Vec<&[E]> = Vec::with_capacity(preds.len());
    for s in 0..b {
        rows.clear();
        rows.extend(preds.iter().map(|p| p.row(s)));
        coupled_grad_row(i, &rows, targets.row(s), coupling, grad.row_mut(s));
        for v in grad.row_mut(s) {
            *v *= inv_b;
        }
    }
    Ok(grad)
}

/// Mean coupled loss of network `i` over a batch of frozen predictions.
pub fn coupled_loss_batch_mean<E: Element>(
    i: usize,
    preds: &[Tensor<E>],
    targets: &Tensor<E>,
    coupling: &CouplingMatrix,
) -> E {
    let b = targets.shape()[0];
    let mut rows: Vec<&[E]> = Vec::with_capacity(preds.len());
    let mut acc = E::zero();
    for s in 0..b {
        rows.clear();
        rows.extend(preds.iter().map(|p| p.row(s)));
        acc += coupled_loss_row(i, &rows, targets.row(s), coupling);
    }
    acc / E::from_f64(b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> Distribution<f64> {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn kl_frozen_values() {
        let p = dist(&[0.5, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);

        // One-hot q against p: KL = -ln p(k).
        let q = dist(&[0.0, 1.0]);
        let r = dist(&[0.25, 0.75]);
        let kl = kl_divergence(&q, &r).unwrap();
        assert!((kl - (-(0.75f64).ln())).abs() < 1e-15);

        // Direct-summation value: 0.5 ln 2 + 0.5 ln(2/3).
        let kl2 = kl_divergence(&dist(&[0.5, 0.5]), &dist(&[0.25, 0.75])).unwrap();
        let expect = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((kl2 - expect).abs() < 1e-15);
        assert!((kl2 - 0.14384).abs() < 5e-6);
    }

    #[test]
    fn js_saturates_at_ln2_on_disjoint_support() {
        let a = dist(&[1.0, 0.0]);
        let b = dist(&[0.0, 1.0]);
        let js = js_divergence(&a, &b).unwrap();
        assert!((js - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(js_divergence(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn entropy_frozen_values() {
        let one_hot = dist(&[0.0, 1.0, 0.0]);
        assert_eq!(entropy(&one_hot), 0.0);
        let uniform = Distribution::<f64>::uniform(10).unwrap();
        assert!((entropy(&uniform) - 10.0f64.ln()).abs() < 1e-12);
        let mixed = dist(&[0.5, 0.25, 0.25]);
        let expect = 0.5 * 2.0f64.ln() + 0.5 * 4.0f64.ln();
        assert!((entropy(&mixed) - expect).abs() < 1e-15);
        assert!((entropy(&mixed) - 1.03972).abs() < 5e-6);
    }

    #[test]
    fn coupled_loss_reduces_to_cross_entropy_at_beta_zero() {
        let preds = vec![dist(&[0.7, 0.2, 0.1]), dist(&[0.1, 0.8, 0.1])];
        let target = dist(&[0.0, 1.0, 0.0]);
        let coupling = CouplingMatrix::zeros(2);
        let loss = coupled_loss(1, &preds, &target, &coupling).unwrap();
        assert!((loss - (-(0.8f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn coupling_terms_vanish_for_identical_peers() {
        let p = dist(&[0.3, 0.3, 0.4]);
        let preds = vec![p.clone(), p.clone(), p.clone()];
        let target = dist(&[1.0, 0.0, 0.0]);
        let coupling = CouplingMatrix::uniform(-1.0, 3);
        let loss = coupled_loss(0, &preds, &target, &coupling).unwrap();
        let expect = kl_divergence(&target, &p).unwrap();
        assert!((loss - expect).abs() < 1e-12);

        let grad = coupled_grad_logits(0, &preds, &target, &coupling).unwrap();
        for (g, (&pi, &q)) in grad.iter().zip(p.probs().iter().zip(target.probs())) {
            assert!((g - (pi - q)).abs() < 1e-12);
        }
    }

    #[test]
    fn coupled_loss_matches_term_by_term_evaluation() {
        // N = 3, beta_bar = -1: literal sum of the definition.
        let preds = vec![
            dist(&[0.6, 0.3, 0.1]),
            dist(&[0.2, 0.5, 0.3]),
            dist(&[0.1, 0.1, 0.8]),
        ];
        let target = dist(&[0.0, 0.0, 1.0]);
        let coupling = CouplingMatrix::uniform(-1.0, 3);
        let i = 1;
        let direct = kl_divergence(&target, &preds[1]).unwrap()
            + coupling.get(1, 0) * kl_divergence(&preds[0], &preds[1]).unwrap()
            + coupling.get(1, 2) * kl_divergence(&preds[2], &preds[1]).unwrap();
        let loss = coupled_loss(i, &preds, &target, &coupling).unwrap();
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn reduced_loss_differs_by_target_entropy_exactly() {
        let preds = vec![dist(&[0.6, 0.3, 0.1]), dist(&[0.2, 0.5, 0.3])];
        let coupling = CouplingMatrix::uniform(-0.8, 2);

        // One-hot target: the two forms coincide.
        let one_hot = dist(&[1.0, 0.0, 0.0]);
        let c = coupled_loss(0, &preds, &one_hot, &coupling).unwrap();
        let r = reduced_loss(0, &preds, &one_hot, &coupling).unwrap();
        assert!((c - r).abs() < 1e-12);

        // Soft target: reduced - coupled = H[q].
        let soft = dist(&[0.5, 0.3, 0.2]);
        let c = coupled_loss(0, &preds, &soft, &coupling).unwrap();
        let r = reduced_loss(0, &preds, &soft, &coupling).unwrap();
        let h = entropy(&soft);
        assert!(
            ((r - c) - h).abs() < 1e-12,
            "reduced-coupled = {} vs H[q] = {h}",
            r - c
        );
    }

    #[test]
    fn grad_at_beta_zero_is_softmax_cross_entropy_grad() {
        let preds = vec![dist(&[0.7, 0.2, 0.1]), dist(&[0.1, 0.8, 0.1])];
        let target = dist(&[0.0, 1.0, 0.0]);
        let coupling = CouplingMatrix::zeros(2);
        let grad = coupled_grad_logits(0, &preds, &target, &coupling).unwrap();
        for (g, (&pi, &q)) in grad.iter().zip(preds[0].probs().iter().zip(target.probs())) {
            assert_eq!(*g, pi - q);
        }
    }

    #[test]
    fn more_negative_coupling_rewards_divergence_from_peers() {
        // With beta < 0, increasing KL(p_j || p_i) while the q-term is fixed
        // strictly decreases the loss.
        let target = dist(&[1.0, 0.0]);
        let coupling = CouplingMatrix::uniform(-1.0, 2);
        let p_i = dist(&[0.6, 0.4]);
        let near = vec![p_i.clone(), dist(&[0.55, 0.45])];
        let far = vec![p_i.clone(), dist(&[0.05, 0.95])];
        let l_near = coupled_loss(0, &near, &target, &coupling).unwrap();
        let l_far = coupled_loss(0, &far, &target, &coupling).unwrap();
        assert!(
            l_far < l_near,
            "loss should drop as the peer diverges: near {l_near}, far {l_far}"
        );
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let preds = vec![dist(&[0.5, 0.5]), dist(&[0.5, 0.5])];
        let target = dist(&[1.0, 0.0]);
        assert!(coupled_loss(5, &preds, &target, &CouplingMatrix::zeros(2)).is_err());
        assert!(coupled_loss(0, &preds, &target, &CouplingMatrix::zeros(3)).is_err());
        let bad_target = dist(&[1.0, 0.0, 0.0]);
        assert!(coupled_loss(0, &preds, &bad_target, &CouplingMatrix::zeros(2)).is_err());
    }

    #[test]
    fn uniform_coupling_matrix_shape() {
        let m = CouplingMatrix::uniform(-1.0, 4);
        for i in 0..4 {
            assert_eq!(m.get(i, i), 0.0);
            for j in 0..4 {
                if i != j {
                    assert_eq!(m.get(i, j), -0.25);
                    assert_eq!(m.get(i, j), m.get(j, i));
                }
            }
        }
        assert!((m.loss_bound_factor() - 1.75).abs() < 1e-15);
    }
}
