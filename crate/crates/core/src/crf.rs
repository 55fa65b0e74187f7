//! Linear-chain CRF over utterance labels.
//!
//! Scores live in log space. A labeling `y` of an `R`-utterance
//! conversation scores
//!
//! ```text
//! start[y_1] + Σ_j unary[j][y_j] + Σ_{j≥2} trans[y_{j-1}][y_j]
//! ```
//!
//! and its probability is `exp(score - logZ)`. The tape functions build
//! batched, differentiable versions of the score and of `logZ`; [`Chain`]
//! holds plain tensors for decoding and for the test oracles
//! (forward-backward marginals and exhaustive enumeration).

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{logsumexp, Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Affine map from a feature row to `K` label scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnaryProjection {
    /// `in_dim × K`
    pub weight: ParamId,
    /// `1 × K`
    pub bias: ParamId,
}

impl UnaryProjection {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(UnaryProjection {
            weight: store.add(&format!("{prefix}.weight"), &[in_dim, labels], Init::Glorot, true, rng)?,
            bias: store.add(&format!("{prefix}.bias"), &[1, labels], Init::Zeros, false, rng)?,
        })
    }

    pub fn in_dim<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.weight).rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrfParams {
    pub unary: UnaryProjection,
    /// `K × K`, `trans[a][b]` scores label `a` followed by label `b`.
    pub trans: ParamId,
    /// `1 × K`, scores the first label.
    pub start: ParamId,
}

impl CrfParams {
    /// Projection is Glorot-initialized; transition and start scores start at zero.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let unary = UnaryProjection::new(store, &format!("{prefix}.unary"), in_dim, labels, rng)?;
        Ok(CrfParams {
            unary,
            trans: store.add(&format!("{prefix}.trans"), &[labels, labels], Init::Zeros, false, rng)?,
            start: store.add(&format!("{prefix}.start"), &[1, labels], Init::Zeros, false, rng)?,
        })
    }
}

/// Row `j` of the result holds `x_j · W + b` for every step's feature rows.
pub fn unary_scores<T: Scalar>(tape: &mut Tape<'_, T>, proj: &UnaryProjection, xs: &[Var]) -> Result<Vec<Var>> {
    if xs.is_empty() {
        return Err(Error::invalid("unary scores of an empty sequence"));
    }
    let (w, b) = (tape.param(proj.weight), tape.param(proj.bias));
    xs.iter()
        .map(|&x| {
            let z = tape.matmul(x, w)?;
            tape.add_row(z, b)
        })
        .collect()
}

fn check_labels(unaries: &[Var], labels: &[Vec<usize>], rows: usize, k: usize) -> Result<()> {
    if labels.len() != unaries.len() {
        return Err(Error::invalid(format!(
            "{} label steps for {} unary steps",
            labels.len(),
            unaries.len()
        )));
    }
    for step in labels {
        if step.len() != rows {
            return Err(Error::invalid("label batch width differs from unary rows"));
        }
        if let Some(&bad) = step.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} labels")));
        }
    }
    Ok(())
}

/// Gold-path scores for a batch, `B × 1`.
///
/// `unaries[j]` is the `B × K` score matrix of step `j`, `labels[j][b]` the
/// gold label of conversation `b` at step `j`.
pub fn score_sequence<T: Scalar>(
    tape: &mut Tape<'_, T>,
    unaries: &[Var],
    labels: &[Vec<usize>],
    trans: Var,
    start: Var,
) -> Result<Var> {
    let (rows, k) = tape.shape(*unaries.first().ok_or_else(|| Error::invalid("empty chain"))?);
    check_labels(unaries, labels, rows, k)?;
    let at = |j: usize| -> Vec<(usize, usize)> { labels[j].iter().enumerate().map(|(b, &y)| (b, y)).collect() };
    let u0 = tape.pick(unaries[0], &at(0))?;
    let s0 = tape.pick(start, &labels[0].iter().map(|&y| (0, y)).collect::<Vec<_>>())?;
    let mut acc = tape.add(u0, s0)?;
    for j in 1..unaries.len() {
        let pairs: Vec<(usize, usize)> = labels[j - 1].iter().zip(&labels[j]).map(|(&a, &b)| (a, b)).collect();
        let t = tape.pick(trans, &pairs)?;
        acc = tape.add(acc, t)?;
        let u = tape.pick(unaries[j], &at(j))?;
        acc = tape.add(acc, u)?;
    }
    Ok(acc)
}

/// Log-partition per conversation, `B × 1`, by the forward recursion
/// `α_1 = start + U_1`, `α_j[b] = logsumexp_a(α_{j-1}[a] + trans[a][b]) + U_j[b]`.
pub fn log_partition<T: Scalar>(tape: &mut Tape<'_, T>, unaries: &[Var], trans: Var, start: Var) -> Result<Var> {
    let first = *unaries.first().ok_or_else(|| Error::invalid("empty chain"))?;
    let mut alpha = tape.add_row(first, start)?;
    for &u in &unaries[1..] {
        let moved = tape.log_matmul(alpha, trans)?;
        alpha = tape.add(moved, u)?;
    }
    Ok(tape.logsumexp_rows(alpha))
}

/// Negative log-likelihood per conversation, `B × 1`.
pub fn nll<T: Scalar>(
    tape: &mut Tape<'_, T>,
    unaries: &[Var],
    labels: &[Vec<usize>],
    trans: Var,
    start: Var,
) -> Result<Var> {
    let log_z = log_partition(tape, unaries, trans, start)?;
    let gold = score_sequence(tape, unaries, labels, trans, start)?;
    tape.sub(log_z, gold)
}

/// One conversation's potentials as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain<T> {
    /// `R × K`
    pub unary: Tensor<T>,
    /// `K × K`
    pub trans: Tensor<T>,
    /// `K` entries
    pub start: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Marginals<T> {
    /// `R × K`, row `j` is `P(y_j = k)`.
    pub node: Tensor<T>,
    /// `R-1` tensors of `K × K`, entry `[a][b]` is `P(y_j = a, y_{j+1} = b)`.
    pub edge: Vec<Tensor<T>>,
    pub log_z: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BruteForce<T> {
    pub log_z: T,
    pub best: Vec<usize>,
    pub best_score: T,
    /// Every labeling with its probability, first position varying fastest.
    pub distribution: Vec<(Vec<usize>, T)>,
}

/// Largest `K^R` [`Chain::brute_force`] will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;

impl<T: Scalar> Chain<T> {
    pub fn new(unary: Tensor<T>, trans: Tensor<T>, start: Vec<T>) -> Result<Self> {
        let unary = unary.as_matrix();
        let trans = trans.as_matrix();
        let k = unary.cols();
        if unary.rows() == 0 || k == 0 {
            return Err(Error::invalid("chain needs at least one step and one label"));
        }
        if trans.rows() != k || trans.cols() != k || start.len() != k {
            return Err(Error::shape("chain", unary.shape(), trans.shape()));
        }
        Ok(Chain { unary, trans, start })
    }

    /// Reads the learned transition/start scores out of `store`.
    pub fn from_params(unary: Tensor<T>, params: &CrfParams, store: &ParamStore<T>) -> Result<Self> {
        Self::new(
            unary,
            store.value(params.trans).clone(),
            store.value(params.start).data().to_vec(),
        )
    }

    pub fn len(&self) -> usize {
        self.unary.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.unary.cols()
    }

    pub fn score(&self, labels: &[usize]) -> Result<T> {
        let k = self.num_labels();
        if labels.len() != self.len() {
            return Err(Error::invalid("label sequence length differs from chain length"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} labels")));
        }
        let mut s = self.unary.at(0, labels[0]) + self.start[labels[0]];
        for j in 1..labels.len() {
            s = s + self.trans.at(labels[j - 1], labels[j]);
            s = s + self.unary.at(j, labels[j]);
        }
        Ok(s)
    }

    /// `logZ` through the differentiable forward recursion.
    pub fn log_partition(&self) -> Result<T> {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let unaries: Vec<Var> = (0..self.len())
            .map(|j| tape.constant(Tensor::vector(self.unary.row(j).to_vec())))
            .collect();
        let trans = tape.constant(self.trans.clone());
        let start = tape.constant(Tensor::vector(self.start.clone()));
        let z = log_partition(&mut tape, &unaries, trans, start)?;
        Ok(tape.value(z).item())
    }

    pub fn nll(&self, labels: &[usize]) -> Result<T> {
        Ok(self.log_partition()? - self.score(labels)?)
    }

    /// Highest-scoring labeling and its score.
    ///
    /// Ties go to the lower label index, deciding from the last position
    /// backwards: the path ends in the lowest optimal final label, then takes
    /// the lowest optimal predecessor, and so on.
    pub fn viterbi(&self) -> (Vec<usize>, T) {
        let (r, k) = (self.len(), self.num_labels());
        let mut delta: Vec<T> = (0..k).map(|b| self.start[b] + self.unary.at(0, b)).collect();
        let mut back = vec![vec![0usize; k]; r];
        for j in 1..r {
            let mut next = vec![T::zero(); k];
            for b in 0..k {
                let mut arg = 0;
                let mut best = delta[0] + self.trans.at(0, b);
                for a in 1..k {
                    let v = delta[a] + self.trans.at(a, b);
                    if v > best {
                        best = v;
                        arg = a;
                    }
                }
                back[j][b] = arg;
                next[b] = best + self.unary.at(j, b);
            }
            delta = next;
        }
        let mut last = 0;
        for b in 1..k {
            if delta[b] > delta[last] {
                last = b;
            }
        }
        let score = delta[last];
        let mut path = vec![last; r];
        for j in (1..r).rev() {
            path[j - 1] = back[j][path[j]];
        }
        (path, score)
    }

    /// Node and edge marginals by the forward-backward recursions.
    pub fn marginals(&self) -> Marginals<T> {
        let (r, k) = (self.len(), self.num_labels());
        let lse = |xs: &[T]| logsumexp(xs).expect("k >= 1");
        let mut alpha = vec![vec![T::zero(); k]; r];
        for b in 0..k {
            alpha[0][b] = self.start[b] + self.unary.at(0, b);
        }
        let mut buf = vec![T::zero(); k];
        for j in 1..r {
            for b in 0..k {
                for a in 0..k {
                    buf[a] = alpha[j - 1][a] + self.trans.at(a, b);
                }
                alpha[j][b] = lse(&buf) + self.unary.at(j, b);
            }
        }
        let mut beta = vec![vec![T::zero(); k]; r];
        for j in (0..r.saturating_sub(1)).rev() {
            for a in 0..k {
                for b in 0..k {
                    buf[b] = self.trans.at(a, b) + self.unary.at(j + 1, b) + beta[j + 1][b];
                }
                beta[j][a] = lse(&buf);
            }
        }
        let log_z = lse(&alpha[r - 1]);
        let mut node = Tensor::zeros(&[r, k]);
        for j in 0..r {
            for b in 0..k {
                node.set(j, b, (alpha[j][b] + beta[j][b] - log_z).exp());
            }
        }
        let edge = (0..r.saturating_sub(1))
            .map(|j| {
                let mut e = Tensor::zeros(&[k, k]);
                for a in 0..k {
                    for b in 0..k {
                        let v = alpha[j][a] + self.trans.at(a, b) + self.unary.at(j + 1, b) + beta[j + 1][b] - log_z;
                        e.set(a, b, v.exp());
                    }
                }
                e
            })
            .collect();
        Marginals { node, edge, log_z }
    }

    /// Exhaustive enumeration of all `K^R` labelings.
    pub fn brute_force(&self) -> Result<BruteForce<T>> {
        let (r, k) = (self.len(), self.num_labels());
        let total = (0..r).try_fold(1usize, |acc, _| acc.checked_mul(k).filter(|&n| n <= BRUTE_FORCE_LIMIT));
        let total = total.ok_or_else(|| Error::invalid(format!("{k}^{r} labelings exceed the enumeration limit")))?;
        let mut seqs = Vec::with_capacity(total);
        let mut scores = Vec::with_capacity(total);
        let mut y = vec![0usize; r];
        let mut best = 0;
        for n in 0..total {
            let s = self.score(&y)?;
            if s > scores.get(best).copied().unwrap_or(T::neg_infinity()) {
                best = n;
            }
            scores.push(s);
            seqs.push(y.clone());
            // odometer, position 0 fastest
            for slot in y.iter_mut() {
                *slot += 1;
                if *slot < k {
                    break;
                }
                *slot = 0;
            }
        }
        let log_z = logsumexp(&scores)?;
        let best_score = scores[best];
        let best_seq = seqs[best].clone();
        let distribution = seqs
            .into_iter()
            .zip(scores)
            .map(|(s, v)| (s, (v - log_z).exp()))
            .collect();
        Ok(BruteForce {
            log_z,
            best: best_seq,
            best_score,
            distribution,
        })
    }
}
