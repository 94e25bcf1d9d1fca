//! Ensembles of networks plus the prediction-combination rules.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{argmax_lowest, CouplingMatrix, Distribution};
use crate::nn::{forward, softmax_rows, xavier_init, Arch, NetworkParams};
use crate::tensor::{Element, Tensor};

/// One member network: its architecture and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network<E> {
    pub arch: Arch,
    pub params: NetworkParams<E>,
}

/// N networks co-learning under a coupling matrix. All members must share a
/// class count; the coupling matrix must be N x N.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<E> {
    pub networks: Vec<Network<E>>,
    pub coupling: CouplingMatrix,
    /// Initialization seed of each member, kept for checkpoints and logs.
    pub seeds: Vec<u64>,
}

impl<E: Element> Ensemble<E> {
    /// Builds N Xavier-initialized copies of `arch`, one per seed.
    pub fn init(arch: &Arch, coupling: CouplingMatrix, seeds: &[u64]) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::Config("ensemble needs at least one network".into()));
        }
        if coupling.n() != seeds.len() {
            return Err(Error::Shape(format!(
                "coupling matrix is {0}x{0} but {1} seeds were given",
                coupling.n(),
                seeds.len()
            )));
        }
        let networks = seeds
            .iter()
            .map(|&s| {
                Ok(Network {
                    arch: arch.clone(),
                    params: xavier_init(arch, s)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ensemble {
            networks,
            coupling,
            seeds: seeds.to_vec(),
        })
    }

    pub fn from_parts(
        networks: Vec<Network<E>>,
        coupling: CouplingMatrix,
        seeds: Vec<u64>,
    ) -> Result<Self> {
        if networks.is_empty() {
            return Err(Error::Config("ensemble needs at least one network".into()));
        }
        if coupling.n() != networks.len() || seeds.len() != networks.len() {
            return Err(Error::Shape(format!(
                "ensemble parts disagree: {} networks, {} seeds, coupling {}x{}",
                networks.len(),
                seeds.len(),
                coupling.n(),
                coupling.n()
            )));
        }
        let classes = networks[0].arch.classes();
        if networks.iter().any(|n| n.arch.classes() != classes) {
            return Err(Error::Config(
                "all ensemble members must share the same class count".into(),
            ));
        }
        Ok(Ensemble {
            networks,
            coupling,
            seeds,
        })
    }

    pub fn len(&self) -> usize {
        self.networks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.networks.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.networks[0].arch.classes()
    }

    /// Combined hash of all member parameters; lets tests assert that
    /// analytics never mutate an ensemble.
    pub fn param_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for net in &self.networks {
            h ^= net.params.param_hash();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// How member predictions are merged into the ensemble prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    Arithmetic,
    Geometric,
    Majority,
}

impl Combiner {
    pub const ALL: [Combiner; 3] = [Combiner::Arithmetic, Combiner::Geometric, Combiner::Majority];

    pub fn name(&self) -> &'static str {
        match self {
            Combiner::Arithmetic => "arithmetic",
            Combiner::Geometric => "geometric",
            Combiner::Majority => "majority",
        }
    }
}

fn check_combiner_input<E: Element>(preds: &[Distribution<E>]) -> Result<usize> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Contract("cannot combine an empty prediction list".into()))?;
    let classes = first.len();
    if preds.iter().any(|p| p.len() != classes) {
        return Err(Error::Shape(
            "combiner inputs must share a class count".into(),
        ));
    }
    Ok(classes)
}

pub(crate) fn combine_arithmetic_rows<E: Element>(rows: &[&[E]], out: &mut [E]) {
    let inv_n = E::from_f64(1.0 / rows.len() as f64);
    out.fill(E::zero());
    for row in rows {
        for (o, &p) in out.iter_mut().zip(*row) {
            *o += p;
        }
    }
    for o in out.iter_mut() {
        *o *= inv_n;
    }
}

pub(crate) fn combine_geometric_rows<E: Element>(rows: &[&[E]], out: &mut [E]) {
    let clip = E::from_f64(crate::loss::PROB_CLIP);
    let inv_n = E::from_f64(1.0 / rows.len() as f64);
    // Geometric mean via mean-log, normalized.
    for (y, o) in out.iter_mut().enumerate() {
        let mut acc = E::zero();
        for row in rows {
            acc += row[y].max(clip).ln();
        }
        *o = (acc * inv_n).exp();
    }
    let z: E = out.iter().copied().sum();
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Ensemble output as the arithmetic mean of member outputs.
pub fn combine_arithmetic<E: Element>(preds: &[Distribution<E>]) -> Result<Distribution<E>> {
    let classes = check_combiner_input(preds)?;
    let rows: Vec<&[E]> = preds.iter().map(|p| p.probs()).collect();
    let mut out = vec![E::zero(); classes];
    combine_arithmetic_rows(&rows, &mut out);
    Distribution::new(out)
}

/// Ensemble output proportional to the geometric mean of member outputs
/// (entries clipped before the logs; renormalized by `Z`).
pub fn combine_geometric<E: Element>(preds: &[Distribution<E>]) -> Result<Distribution<E>> {
    let classes = check_combiner_input(preds)?;
    let rows: Vec<&[E]> = preds.iter().map(|p| p.probs()).collect();
    let mut out = vec![E::zero(); classes];
    combine_geometric_rows(&rows, &mut out);
    Distribution::new(out)
}

/// Majority vote: each member votes its argmax. Vote ties break first by the
/// higher summed probability among tied classes, then by the lower class
/// index. Returns the winner and the per-class vote counts.
pub fn combine_majority<E: Element>(preds: &[Distribution<E>]) -> Result<(usize, Vec<u32>)> {
    let classes = check_combiner_input(preds)?;
    let rows: Vec<&[E]> = preds.iter().map(|p| p.probs()).collect();
    let mut votes = vec![0u32; classes];
    for row in &rows {
        votes[argmax_lowest(row)] += 1;
    }
    Ok((majority_winner_rows(&rows, &votes), votes))
}

pub(crate) fn majority_winner_rows<E: Element>(rows: &[&[E]], votes: &[u32]) -> usize {
    let top = *votes.iter().max().expect("non-empty vote vector");
    let mut winner = usize::MAX;
    let mut best_mass = f64::NEG_INFINITY;
    for (class, &v) in votes.iter().enumerate() {
        if v == top {
            let mass: f64 = rows.iter().map(|r| r[class].to_f64()).sum();
            if mass > best_mass {
                best_mass = mass;
                winner = class;
            }
        }
    }
    winner
}

/// A predictor's answer for one sample: a full distribution or a bare label.
pub enum Prediction<E> {
    Dist(Distribution<E>),
    Class(usize),
}

/// Fraction of samples whose predicted label (argmax, ties to the lowest
/// index) matches the truth. With a uniform predictor on balanced data this
/// equals the class-0 frequency, by the tie rule.
pub fn accuracy<E: Element, F>(dataset: &Dataset<E>, mut predict: F) -> f64
where
    F: FnMut(&[E]) -> Prediction<E>,
{
    let n = dataset.len();
    let mut correct = 0usize;
    for s in 0..n {
        let label = match predict(dataset.input(s)) {
            Prediction::Dist(d) => d.argmax(),
            Prediction::Class(c) => c,
        };
        if label == dataset.label(s) {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

/// Streams every sample's per-network probability rows to a visitor, chunked
/// for throughput. The visitor sees `(sample_index, rows)` with one row per
/// network, in network order. Deterministic sequential reduction.
pub fn for_each_sample_predictions<E: Element, F>(
    networks: &[Network<E>],
    dataset: &Dataset<E>,
    chunk: usize,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, &[&[E]]),
{
    let n = dataset.len();
    let mut start = 0usize;
    let mut probs: Vec<Tensor<E>> = Vec::new();
    while start < n {
        let end = (start + chunk).min(n);
        let batch = dataset.gather_inputs(start..end);
        probs.clear();
        for net in networks {
            let (logits, _) = forward(&net.arch, &net.params, &batch)?;
            probs.push(softmax_rows(&logits));
        }
        let mut rows: Vec<&[E]> = Vec::with_capacity(networks.len());
        for s in 0..end - start {
            rows.clear();
            rows.extend(probs.iter().map(|p| p.row(s)));
            visit(start + s, &rows);
        }
        start = end;
    }
    Ok(())
}

/// Test accuracy of one network over a dataset.
pub fn network_accuracy<E: Element>(net: &Network<E>, dataset: &Dataset<E>, chunk: usize) -> Result<f64> {
    let mut correct = 0usize;
    for_each_sample_predictions(std::slice::from_ref(net), dataset, chunk, |s, rows| {
        if argmax_lowest(rows[0]) == dataset.label(s) {
            correct += 1;
        }
    })?;
    Ok(correct as f64 / dataset.len() as f64)
}

/// Ensemble accuracy under a combiner.
pub fn ensemble_accuracy<E: Element>(
    ensemble: &Ensemble<E>,
    dataset: &Dataset<E>,
    combiner: Combiner,
    chunk: usize,
) -> Result<f64> {
    let classes = ensemble.classes();
    let mut correct = 0usize;
    let mut buf = vec![E::zero(); classes];
    let mut votes = vec![0u32; classes];
    for_each_sample_predictions(&ensemble.networks, dataset, chunk, |s, rows| {
        let label = match combiner {
            Combiner::Arithmetic => {
                combine_arithmetic_rows(rows, &mut buf);
                argmax_lowest(&buf)
            }
            Combiner::Geometric => {
                combine_geometric_rows(rows, &mut buf);
                argmax_lowest(&buf)
            }
            Combiner::Majority => {
                votes.fill(0);
                for row in rows {
                    votes[argmax_lowest(row)] += 1;
                }
                majority_winner_rows(rows, &votes)
            }
        };
        if label == dataset.label(s) {
            correct += 1;
        }
    })?;
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> Distribution<f64> {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn arithmetic_mean_frozen_values() {
        let p = dist(&[0.2, 0.8]);
        let out = combine_arithmetic(&[p.clone(), p.clone()]).unwrap();
        assert_eq!(out.probs(), p.probs());

        let out = combine_arithmetic(&[dist(&[1.0, 0.0]), dist(&[0.0, 1.0])]).unwrap();
        assert_eq!(out.probs(), &[0.5, 0.5]);

        let a = dist(&[0.6, 0.3, 0.1]);
        let b = dist(&[0.2, 0.5, 0.3]);
        let c = dist(&[0.1, 0.1, 0.8]);
        let out = combine_arithmetic(&[a.clone(), b.clone(), c.clone()]).unwrap();
        for y in 0..3 {
            let mean = (a.probs()[y] + b.probs()[y] + c.probs()[y]) / 3.0;
            assert!((out.probs()[y] - mean).abs() < 1e-15);
        }
        let sum: f64 = out.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn geometric_mean_frozen_values() {
        let p = dist(&[0.7, 0.3]);
        let out = combine_geometric(&[p.clone(), p.clone()]).unwrap();
        for (a, b) in out.probs().iter().zip(p.probs()) {
            assert!((a - b).abs() < 1e-12);
        }

        let out = combine_geometric(&[dist(&[0.8, 0.2]), dist(&[0.2, 0.8])]).unwrap();
        assert!((out.probs()[0] - 0.5).abs() < 1e-12);

        // sqrt(0.9*0.5), sqrt(0.1*0.5) normalized -> (0.75, 0.25).
        let out = combine_geometric(&[dist(&[0.9, 0.1]), dist(&[0.5, 0.5])]).unwrap();
        let g0 = (0.9f64 * 0.5).sqrt();
        let g1 = (0.1f64 * 0.5).sqrt();
        assert!((out.probs()[0] - g0 / (g0 + g1)).abs() < 1e-12);
        assert!((out.probs()[0] - 0.750).abs() < 1e-3);
        assert!((out.probs()[1] - 0.250).abs() < 1e-3);
    }

    #[test]
    fn majority_vote_and_tie_rule() {
        let (winner, votes) = combine_majority(&[
            dist(&[0.9, 0.1]),
            dist(&[0.6, 0.4]),
            dist(&[0.2, 0.8]),
        ])
        .unwrap();
        assert_eq!(winner, 0);
        assert_eq!(votes, vec![2, 1]);

        // N=2 tie: summed probabilities (1.1, 0.9) pick class 0.
        let (winner, votes) =
            combine_majority(&[dist(&[0.9, 0.1]), dist(&[0.2, 0.8])]).unwrap();
        assert_eq!(votes, vec![1, 1]);
        assert_eq!(winner, 0);

        // Tie on votes and summed mass: lowest class index wins.
        let (winner, _) = combine_majority(&[dist(&[0.6, 0.4]), dist(&[0.4, 0.6])]).unwrap();
        assert_eq!(winner, 0);
    }

    #[test]
    fn combiners_reject_empty_input() {
        let empty: Vec<Distribution<f64>> = Vec::new();
        assert!(combine_arithmetic(&empty).is_err());
        assert!(combine_geometric(&empty).is_err());
        assert!(combine_majority(&empty).is_err());
    }

    #[test]
    fn identical_members_agree_across_combiners() {
        let p = dist(&[0.2, 0.5, 0.3]);
        let preds = vec![p.clone(), p.clone(), p.clone()];
        let a = combine_arithmetic(&preds).unwrap().argmax();
        let g = combine_geometric(&preds).unwrap().argmax();
        let (m, _) = combine_majority(&preds).unwrap();
        assert_eq!(a, 1);
        assert_eq!(g, 1);
        assert_eq!(m, 1);
    }
}
