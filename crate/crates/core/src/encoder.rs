//! Word- and conversation-level bidirectional LSTM encoders.
//!
//! Everything here works on batches: a step is an `N × dim` matrix holding
//! one row per sequence. Variable-length sequences are right-padded and
//! carried with a per-step mask; at a masked step the recurrent state is
//! left untouched, so a padded row ends in exactly the state it would reach
//! if run alone.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::corpus::{Padded, PAD};
use crate::error::{Error, Result};
use crate::numcore::{Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Forward-pass mode. Dropout masks are drawn from the training rng.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`. Identity in
/// eval mode or at rate 0.
pub fn dropout<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    let rng = match mode {
        Mode::Train(rng) if rate > 0.0 => rng,
        _ => return Ok(x),
    };
    let (r, c) = tape.shape(x);
    let keep = T::of(1.0 / (1.0 - rate));
    let data = (0..r * c)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mask = tape.constant(Tensor::matrix(r, c, data)?);
    tape.mul(x, mask)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Last,
    Mean,
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Last => "last",
            Pooling::Mean => "mean",
        })
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Pooling::Last),
            "mean" => Ok(Pooling::Mean),
            _ => Err(Error::Config(format!("unknown pooling {s:?} (expected last or mean)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierEncoderConfig {
    pub hidden_size: usize,
    pub pooling: Pooling,
    pub dropout: f64,
    pub num_layers: usize,
    /// Also apply dropout to word embeddings.
    pub embedding_dropout: bool,
}

impl Default for HierEncoderConfig {
    fn default() -> Self {
        HierEncoderConfig {
            hidden_size: 300,
            pooling: Pooling::Last,
            dropout: 0.2,
            num_layers: 1,
            embedding_dropout: true,
        }
    }
}

impl HierEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_layers == 0 {
            return Err(Error::Config("hidden_size and num_layers must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// `|V| × d` lookup table whose PAD row is zero and never updated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: ParamId,
}

impl EmbeddingTable {
    /// Glorot-initialized table.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab_size: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let matrix = store.add(name, &[vocab_size, dim], Init::Glorot, true, rng)?;
        store.get_mut(matrix).value.row_mut(PAD).fill(T::zero());
        Ok(EmbeddingTable { matrix })
    }

    /// Table holding `values`, e.g. pretrained vectors. The PAD row is zeroed.
    pub fn from_matrix<T: Scalar>(store: &mut ParamStore<T>, name: &str, mut values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() <= PAD {
            return Err(Error::invalid("embedding matrix must be |V| × d with a PAD row"));
        }
        values.row_mut(PAD).fill(T::zero());
        let matrix = store.insert(crate::numcore::Parameter::new(name, values, true))?;
        Ok(EmbeddingTable { matrix })
    }

    pub fn dim<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.matrix).cols()
    }

    pub fn vocab_size<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.matrix).rows()
    }

    /// Rows for `ids`, `ids.len() × d`. Out-of-range ids are rejected.
    pub fn lookup<T: Scalar>(&self, tape: &mut Tape<'_, T>, ids: &[usize]) -> Result<Var> {
        let m = tape.param(self.matrix);
        tape.gather_rows(m, ids, Some(PAD))
    }
}

/// One LSTM direction. Gate blocks are ordered `[input, forget, output, candidate]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmCell {
    /// `in_dim × 4H`
    pub w: ParamId,
    /// `H × 4H`
    pub u: ParamId,
    /// `1 × 4H`
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

/// Initial forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

impl LstmCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(&format!("{prefix}.w"), &[in_dim, 4 * hidden], Init::Glorot, true, rng)?;
        let u = store.add(&format!("{prefix}.u"), &[hidden, 4 * hidden], Init::Glorot, true, rng)?;
        let b = store.add(&format!("{prefix}.b"), &[1, 4 * hidden], Init::Zeros, false, rng)?;
        store.get_mut(b).value.data_mut()[hidden..2 * hidden].fill(T::of(FORGET_BIAS));
        Ok(LstmCell {
            w,
            u,
            b,
            in_dim,
            hidden,
        })
    }
}

/// `(h, c)` after one step from `(h_prev, c_prev)` on input rows `x`:
///
/// ```text
/// i = σ(xWᵢ + hUᵢ + bᵢ)   f = σ(xW_f + hU_f + b_f)   o = σ(xW_o + hU_o + b_o)
/// g = tanh(xW_g + hU_g + b_g)   c = f⊙c_prev + i⊙g   h = o⊙tanh(c)
/// ```
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cell: &LstmCell,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let hd = cell.hidden;
    let (n, in_dim) = tape.shape(x);
    if in_dim != cell.in_dim || tape.shape(h_prev) != (n, hd) || tape.shape(c_prev) != (n, hd) {
        return Err(Error::shape("lstm_step", &[n, in_dim], &[cell.in_dim, hd]));
    }
    let (w, u, b) = (tape.param(cell.w), tape.param(cell.u), tape.param(cell.b));
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h_prev, u)?;
    let z = tape.add(xw, hu)?;
    let z = tape.add_row(z, b)?;
    let gate = |tape: &mut Tape<'_, T>, k: usize| tape.slice_cols(z, k * hd, hd);
    let (zi, zf, zo, zg) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
    let (i, f, o, g) = (tape.sigmoid(zi), tape.sigmoid(zf), tape.sigmoid(zo), tape.tanh(zg));
    let kept = tape.mul(f, c_prev)?;
    let fresh = tape.mul(i, g)?;
    let c = tape.add(kept, fresh)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Independent forward and backward cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl BiLstm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(BiLstm {
            fwd: LstmCell::new(store, &format!("{prefix}.fwd"), in_dim, hidden, rng)?,
            bwd: LstmCell::new(store, &format!("{prefix}.bwd"), in_dim, hidden, rng)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }
}

/// Stack of `layers` bidirectional layers, the first reading `in_dim` inputs.
pub fn bilstm_stack<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    layers: usize,
    rng: &mut R,
) -> Result<Vec<BiLstm>> {
    (0..layers)
        .map(|l| {
            let d = if l == 0 { in_dim } else { 2 * hidden };
            BiLstm::new(store, &format!("{prefix}.l{l}"), d, hidden, rng)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct BiLstmOutput {
    /// Per step, `[h_fwd(t) ; h_bwd(t)]`, `N × 2H`. Rows past a sequence's end
    /// hold zeros in both halves' unused slots and are never read.
    pub steps: Vec<Var>,
    /// Forward state after each row's last real step, `N × H`.
    pub fwd_last: Var,
    /// Backward state after reading each row's first step, `N × H`.
    pub bwd_last: Var,
}

fn check_mask(mask: Option<&[Vec<bool>]>, steps: usize, rows: usize) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != steps || m.iter().any(|r| r.len() != rows) {
            return Err(Error::invalid("mask does not match input steps"));
        }
        if m[0].iter().any(|&x| !x) {
            return Err(Error::invalid("every sequence needs at least one step"));
        }
    }
    Ok(())
}

fn run_direction<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cell: &LstmCell,
    inputs: &[Var],
    mask: Option<&[Vec<bool>]>,
    order: impl Iterator<Item = usize>,
    out: &mut [Option<Var>],
) -> Result<Var> {
    let n = tape.shape(inputs[0]).0;
    let zero = tape.zeros(n, cell.hidden);
    let (mut h, mut c) = (zero, zero);
    for t in order {
        let (nh, nc) = lstm_step(tape, cell, inputs[t], h, c)?;
        match mask {
            Some(m) => {
                h = tape.blend(&m[t], nh, h)?;
                c = tape.blend(&m[t], nc, c)?;
            }
            None => (h, c) = (nh, nc),
        }
        out[t] = Some(h);
    }
    Ok(h)
}

/// Runs both directions over `inputs` (one `N × in_dim` matrix per step).
/// Zero initial state; `mask[t][n]` marks real steps.
pub fn bilstm_run<T: Scalar>(
    tape: &mut Tape<'_, T>,
    bi: &BiLstm,
    inputs: &[Var],
    mask: Option<&[Vec<bool>]>,
) -> Result<BiLstmOutput> {
    if inputs.is_empty() {
        return Err(Error::invalid("bilstm over an empty sequence"));
    }
    check_mask(mask, inputs.len(), tape.shape(inputs[0]).0)?;
    let len = inputs.len();
    let mut fwd = vec![None; len];
    let mut bwd = vec![None; len];
    let fwd_last = run_direction(tape, &bi.fwd, inputs, mask, 0..len, &mut fwd)?;
    let bwd_last = run_direction(tape, &bi.bwd, inputs, mask, (0..len).rev(), &mut bwd)?;
    let steps = fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, b)| tape.concat(&[f.expect("filled"), b.expect("filled")], 1))
        .collect::<Result<_>>()?;
    Ok(BiLstmOutput {
        steps,
        fwd_last,
        bwd_last,
    })
}

/// Stacked layers; each layer reads the previous layer's step outputs.
pub fn bilstm_stack_run<T: Scalar>(
    tape: &mut Tape<'_, T>,
    layers: &[BiLstm],
    inputs: &[Var],
    mask: Option<&[Vec<bool>]>,
) -> Result<BiLstmOutput> {
    let (first, rest) = layers.split_first().ok_or_else(|| Error::invalid("no encoder layers"))?;
    let mut out = bilstm_run(tape, first, inputs, mask)?;
    for layer in rest {
        let next = out.steps.clone();
        out = bilstm_run(tape, layer, &next, mask)?;
    }
    Ok(out)
}

/// `Σ_t mask_t ⊙ xs[t]`, summing real steps only.
fn masked_sum<T: Scalar>(tape: &mut Tape<'_, T>, xs: &[Var], mask: Option<&[Vec<bool>]>) -> Result<Var> {
    let mut acc = xs[0];
    for (t, &x) in xs.iter().enumerate().skip(1) {
        let s = tape.add(acc, x)?;
        acc = match mask {
            Some(m) => tape.blend(&m[t], s, acc)?,
            None => s,
        };
    }
    Ok(acc)
}

fn lengths_of(mask: Option<&[Vec<bool>]>, steps: usize, rows: usize) -> Vec<usize> {
    match mask {
        Some(m) => (0..rows).map(|n| m.iter().filter(|s| s[n]).count()).collect(),
        None => vec![steps; rows],
    }
}

/// Elementwise mean over the real steps of `xs`.
pub fn masked_mean<T: Scalar>(tape: &mut Tape<'_, T>, xs: &[Var], mask: Option<&[Vec<bool>]>) -> Result<Var> {
    if xs.is_empty() {
        return Err(Error::invalid("mean over an empty sequence"));
    }
    let rows = tape.shape(xs[0]).0;
    check_mask(mask, xs.len(), rows)?;
    let sum = masked_sum(tape, xs, mask)?;
    let inv: Vec<T> = lengths_of(mask, xs.len(), rows)
        .into_iter()
        .map(|l| T::one() / T::of(l as f64))
        .collect();
    let inv = tape.constant(Tensor::matrix(rows, 1, inv)?);
    tape.mul_col(sum, inv)
}

/// `last`: each direction's final state, `[fwd_last ; bwd_last]`.
/// `mean`: mean of the step outputs over real steps.
pub fn pool<T: Scalar>(
    tape: &mut Tape<'_, T>,
    out: &BiLstmOutput,
    mode: Pooling,
    mask: Option<&[Vec<bool>]>,
) -> Result<Var> {
    match mode {
        Pooling::Last => tape.concat(&[out.fwd_last, out.bwd_last], 1),
        Pooling::Mean => masked_mean(tape, &out.steps, mask),
    }
}

/// Embedded steps of a padded batch, one `N × d` matrix per step, with
/// dropout when `rate > 0` in training mode.
pub fn embed_padded<T: Scalar>(
    tape: &mut Tape<'_, T>,
    table: &EmbeddingTable,
    padded: &Padded,
    rate: f64,
    mode: &mut Mode<'_>,
) -> Result<Vec<Var>> {
    if padded.max_len() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    padded
        .steps
        .iter()
        .map(|ids| {
            let e = table.lookup(tape, ids)?;
            dropout(tape, e, rate, mode)
        })
        .collect()
}

/// Embeddings of one token sequence, one `1 × d` row per token.
pub fn embed_utterance<T: Scalar>(
    tape: &mut Tape<'_, T>,
    table: &EmbeddingTable,
    tokens: &[usize],
    rate: f64,
    mode: &mut Mode<'_>,
) -> Result<Vec<Var>> {
    let padded = Padded::new(&[tokens])?;
    embed_padded(tape, table, &padded, rate, mode)
}

/// Utterance vectors `v` for every row of a padded batch, `N × 2H`.
pub fn encode_utterances<T: Scalar>(
    tape: &mut Tape<'_, T>,
    table: &EmbeddingTable,
    layers: &[BiLstm],
    padded: &Padded,
    cfg: &HierEncoderConfig,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let rate = if cfg.embedding_dropout { cfg.dropout } else { 0.0 };
    let es = embed_padded(tape, table, padded, rate, mode)?;
    let out = bilstm_stack_run(tape, layers, &es, Some(&padded.mask))?;
    let v = pool(tape, &out, cfg.pooling, Some(&padded.mask))?;
    dropout(tape, v, cfg.dropout, mode)
}

/// Utterance vector of a single token sequence, `1 × 2H`.
pub fn encode_utterance<T: Scalar>(
    tape: &mut Tape<'_, T>,
    table: &EmbeddingTable,
    layers: &[BiLstm],
    tokens: &[usize],
    cfg: &HierEncoderConfig,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    encode_utterances(tape, table, layers, &Padded::new(&[tokens])?, cfg, mode)
}

/// Mean word embedding of every row of a padded batch, `N × d`.
pub fn mean_embeddings<T: Scalar>(
    tape: &mut Tape<'_, T>,
    table: &EmbeddingTable,
    padded: &Padded,
    cfg: &HierEncoderConfig,
    mode: &mut Mode<'_>,
) -> Result<Vec<Var>> {
    let rate = if cfg.embedding_dropout { cfg.dropout } else { 0.0 };
    let es = embed_padded(tape, table, padded, rate, mode)?;
    Ok(vec![masked_mean(tape, &es, Some(&padded.mask))?])
}

/// Contextual vectors `g_j` from utterance vectors `vs[j]` (`B × in_dim`
/// each, one row per conversation).
pub fn encode_conversation<T: Scalar>(
    tape: &mut Tape<'_, T>,
    layers: &[BiLstm],
    vs: &[Var],
    cfg: &HierEncoderConfig,
    mode: &mut Mode<'_>,
) -> Result<Vec<Var>> {
    if vs.is_empty() {
        return Err(Error::invalid("empty conversation"));
    }
    let out = bilstm_stack_run(tape, layers, vs, None)?;
    out.steps.into_iter().map(|g| dropout(tape, g, cfg.dropout, mode)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, sigmoid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn row(tape: &mut Tape<'_, f64>, xs: &[f64]) -> Var {
        tape.constant(Tensor::vector(xs.to_vec()))
    }

    fn cfg(h: usize) -> HierEncoderConfig {
        HierEncoderConfig {
            hidden_size: h,
            ..HierEncoderConfig::default()
        }
    }

    #[test]
    fn embedding_pad_and_unk() {
        let mut store = ParamStore::<f64>::new();
        let table = EmbeddingTable::new(&mut store, "emb", 5, 3, &mut rng()).unwrap();
        let mut tape = Tape::new(&store);
        let unk = embed_utterance(&mut tape, &table, &[1], 0.0, &mut Mode::Eval).unwrap();
        assert_eq!(tape.value(unk[0]).data(), store.value(table.matrix).row(1));
        let pad = embed_utterance(&mut tape, &table, &[PAD], 0.0, &mut Mode::Eval).unwrap();
        assert!(tape.value(pad[0]).data().iter().all(|&x| x == 0.0));
        assert!(embed_utterance(&mut tape, &table, &[5], 0.0, &mut Mode::Eval).is_err());
        assert!(embed_utterance(&mut tape, &table, &[], 0.0, &mut Mode::Eval).is_err());
    }

    #[test]
    fn pad_row_gets_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let table = EmbeddingTable::new(&mut store, "emb", 4, 2, &mut rng()).unwrap();
        let mut tape = Tape::new(&store);
        let e = table.lookup(&mut tape, &[PAD, 2, PAD]).unwrap();
        let loss = tape.sum(e);
        let g = tape.backward(loss).unwrap();
        let gm = g.get(table.matrix).unwrap();
        assert_eq!(gm.row(PAD), &[0.0, 0.0]);
        assert_eq!(gm.row(2), &[1.0, 1.0]);
    }

    #[test]
    fn zero_dropout_in_train_matches_eval() {
        let mut store = ParamStore::<f64>::new();
        let table = EmbeddingTable::new(&mut store, "emb", 6, 4, &mut rng()).unwrap();
        let mut tape = Tape::new(&store);
        let mut r = rng();
        let a = embed_utterance(&mut tape, &table, &[2, 3, 4], 0.0, &mut Mode::Train(&mut r)).unwrap();
        let b = embed_utterance(&mut tape, &table, &[2, 3, 4], 0.0, &mut Mode::Eval).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(tape.value(*x), tape.value(*y));
        }
    }

    #[test]
    fn dropout_is_inverted() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::filled(&[200, 50], 1.0));
        let mut r = rng();
        let y = dropout(&mut tape, x, 0.2, &mut Mode::Train(&mut r)).unwrap();
        let v = tape.value(y);
        assert!(v.data().iter().all(|&e| e == 0.0 || (e - 1.25).abs() < 1e-15));
        let mean = v.sum() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
        let z = dropout(&mut tape, x, 0.2, &mut Mode::Eval).unwrap();
        assert_eq!(z, x);
    }

    fn zero_cell(store: &mut ParamStore<f64>, in_dim: usize, h: usize) -> LstmCell {
        let cell = LstmCell::new(store, "cell", in_dim, h, &mut rng()).unwrap();
        for id in [cell.w, cell.u, cell.b] {
            store.get_mut(id).value.fill(0.0);
        }
        cell
    }

    #[test]
    fn zero_cell_gives_zero_state() {
        let mut store = ParamStore::<f64>::new();
        let cell = zero_cell(&mut store, 2, 3);
        let mut tape = Tape::new(&store);
        let x = tape.zeros(1, 2);
        let z = tape.zeros(1, 3);
        let (h, c) = lstm_step(&mut tape, &cell, x, z, z).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0; 3]);
        assert_eq!(tape.value(c).data(), &[0.0; 3]);
    }

    #[test]
    fn saturated_forget_gate_adds_to_memory() {
        let mut store = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut store, "cell", 2, 2, &mut rng()).unwrap();
        store.get_mut(cell.b).value.data_mut()[2..4].fill(20.0);
        let (x, h0, c0) = ([0.3, -0.7], [0.1, 0.4], [0.5, -1.5]);
        let mut tape = Tape::new(&store);
        let (xv, hv, cv) = (row(&mut tape, &x), row(&mut tape, &h0), row(&mut tape, &c0));
        let (_, c) = lstm_step(&mut tape, &cell, xv, hv, cv).unwrap();

        // analytic i⊙g̃ with f → 1
        let (w, u, b) = (store.value(cell.w), store.value(cell.u), store.value(cell.b));
        let z = |k: usize| -> f64 {
            b.data()[k] + (0..2).map(|p| x[p] * w.at(p, k) + h0[p] * u.at(p, k)).sum::<f64>()
        };
        for q in 0..2 {
            let expect = c0[q] + sigmoid(z(q)) * z(6 + q).tanh();
            assert!((tape.value(c).data()[q] - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn lstm_step_gradient() {
        let mut store = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut store, "cell", 2, 3, &mut rng()).unwrap();
        store.get_mut(cell.b).value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.1 * i as f64 - 0.5);
        let report = grad_check(
            |tape| {
                let x = tape.constant(Tensor::from_f64_rows(&[&[0.4, -0.9], &[1.1, 0.2]])?);
                let h = tape.constant(Tensor::from_f64_rows(&[&[0.1, -0.2, 0.3], &[0.0, 0.5, -0.4]])?);
                let c = tape.constant(Tensor::from_f64_rows(&[&[0.7, 0.1, -0.3], &[-1.0, 0.2, 0.9]])?);
                let (h, _) = lstm_step(tape, &cell, x, h, c)?;
                Ok(tape.sum(h))
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn gates_and_states_are_bounded() {
        let mut store = ParamStore::<f64>::new();
        let bi = BiLstm::new(&mut store, "bi", 3, 4, &mut rng()).unwrap();
        let mut tape = Tape::new(&store);
        let mut r = rng();
        let xs: Vec<Var> = (0..6)
            .map(|_| {
                let d: Vec<f64> = (0..3).map(|_| r.gen_range(-5.0..5.0)).collect();
                row(&mut tape, &d)
            })
            .collect();
        let out = bilstm_run(&mut tape, &bi, &xs, None).unwrap();
        for s in &out.steps {
            assert!(tape.value(*s).data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn output_length_and_width() {
        let mut store = ParamStore::<f64>::new();
        let bi = BiLstm::new(&mut store, "bi", 2, 3, &mut rng()).unwrap();
        for len in 1..=10 {
            let mut tape = Tape::new(&store);
            let xs: Vec<Var> = (0..len).map(|t| row(&mut tape, &[t as f64 * 0.1, 1.0])).collect();
            let out = bilstm_run(&mut tape, &bi, &xs, None).unwrap();
            assert_eq!(out.steps.len(), len);
            assert_eq!(tape.shape(out.steps[0]), (1, 6));
        }
        let mut tape = Tape::new(&store);
        assert!(bilstm_run(&mut tape, &bi, &[], None).is_err());
    }

    #[test]
    fn single_step_both_directions_see_same_input() {
        let mut store = ParamStore::<f64>::new();
        let bi = BiLstm::new(&mut store, "bi", 2, 3, &mut rng()).unwrap();
        let mut tape = Tape::new(&store);
        let x = row(&mut tape, &[0.5, -0.5]);
        let out = bilstm_run(&mut tape, &bi, &[x], None).unwrap();
        let z = tape.zeros(1, 3);
        let (hf, _) = lstm_step(&mut tape, &bi.fwd, x, z, z).unwrap();
        let (hb, _) = lstm_step(&mut tape, &bi.bwd, x, z, z).unwrap();
        let expect: Vec<f64> = tape.value(hf).data().iter().chain(tape.value(hb).data()).copied().collect();
        assert_eq!(tape.value(out.steps[0]).data(), &expect[..]);
        let last = pool(&mut tape, &out, Pooling::Last, None).unwrap();
        let mean = pool(&mut tape, &out, Pooling::Mean, None).unwrap();
        assert_eq!(tape.value(last), tape.value(out.steps[0]));
        assert_eq!(tape.value(mean), tape.value(out.steps[0]));
    }

    #[test]
    fn palindrome_with_tied_directions_mirrors() {
        let mut store = ParamStore::<f64>::new();
        let bi = BiLstm::new(&mut store, "bi", 2, 3, &mut rng()).unwrap();
        for (f, b) in [(bi.fwd.w, bi.bwd.w), (bi.fwd.u, bi.bwd.u), (bi.fwd.b, bi.bwd.b)] {
            let v = store.value(f).clone();
            store.get_mut(b).value = v;
        }
        let seq = [[0.2, 0.9], [-0.4, 0.1], [1.0, -1.0], [-0.4, 0.1], [0.2, 0.9]];
        let mut tape = Tape::new(&store);
        let xs: Vec<Var> = seq.iter().map(|x| row(&mut tape, x)).collect();
        let out = bilstm_run(&mut tape, &bi, &xs, None).unwrap();
        let n = seq.len();
        for t in 0..n {
            let a = tape.value(out.steps[t]).data();
            let b = tape.value(out.steps[n - 1 - t]).data();
            assert_eq!(&a[..3], &b[3..]);
            assert_eq!(&a[3..], &b[..3]);
        }
    }

    #[test]
    fn mean_pooling_known_value() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let a = row(&mut tape, &[1.0, 1.0]);
        let b = row(&mut tape, &[3.0, 3.0]);
        let m = masked_mean(&mut tape, &[a, b], None).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 2.0]);
    }

    #[test]
    fn last_pooling_picks_direction_ends() {
        let mut store = ParamStore::<f64>::new();
        let bi = BiLstm::new(&mut store, "bi", 2, 3, &mut rng()).unwrap();
        let mut tape = Tape::new(&store);
        let xs: Vec<Var> = (0..5).map(|t| row(&mut tape, &[t as f64 * 0.3 - 0.6, 0.5])).collect();
        let out = bilstm_run(&mut tape, &bi, &xs, None).unwrap();
        let last = pool(&mut tape, &out, Pooling::Last, None).unwrap();
        let v = tape.value(last).data();
        assert_eq!(&v[..3], &tape.value(out.steps[4]).data()[..3]);
        assert_eq!(&v[3..], &tape.value(out.steps[0]).data()[3..]);
    }

    #[test]
    fn padding_does_not_change_utterance_vector() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let table = EmbeddingTable::new(&mut store, "emb", 10, 4, &mut r).unwrap();
        for pooling in [Pooling::Last, Pooling::Mean] {
            let c = HierEncoderConfig { pooling, ..cfg(3) };
            let layers = bilstm_stack(&mut store, &format!("w{pooling:?}"), 4, 3, 2, &mut r).unwrap();
            let short: &[usize] = &[3, 7, 2];
            let long: &[usize] = &[4, 5, 6, 8, 9, 2, 2];
            let mut tape = Tape::new(&store);
            let alone = encode_utterance(&mut tape, &table, &layers, short, &c, &mut Mode::Eval).unwrap();
            let padded = Padded::new(&[long, short]).unwrap();
            let both = encode_utterances(&mut tape, &table, &layers, &padded, &c, &mut Mode::Eval).unwrap();
            assert_eq!(tape.value(alone).data(), tape.value(both).row(1));
            // explicit PAD tokens, masked out
            let mut manual = padded.clone();
            manual.steps.iter_mut().for_each(|s| s.truncate(2));
            manual.mask.iter_mut().for_each(|s| s.truncate(2));
            manual.lengths.truncate(2);
            let again = encode_utterances(&mut tape, &table, &layers, &manual, &c, &mut Mode::Eval).unwrap();
            assert_eq!(tape.value(again).row(1), tape.value(alone).data());
        }
    }

    #[test]
    fn default_utterance_vector_width() {
        let c = HierEncoderConfig::default();
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let table = EmbeddingTable::new(&mut store, "emb", 4, 5, &mut r).unwrap();
        let layers = bilstm_stack(&mut store, "w", 5, c.hidden_size, c.num_layers, &mut r).unwrap();
        let mut tape = Tape::new(&store);
        let v = encode_utterance(&mut tape, &table, &layers, &[2, 3], &c, &mut Mode::Eval).unwrap();
        assert_eq!(tape.shape(v), (1, 600));
    }

    #[test]
    fn conversation_context_propagates() {
        let mut store = ParamStore::<f64>::new();
        let layers = bilstm_stack(&mut store, "c", 2, 3, 1, &mut rng()).unwrap();
        let c = cfg(3);
        let run = |first: f64| -> Vec<f64> {
            let mut tape = Tape::new(&store);
            let vs: Vec<Var> = [[first, 0.1], [0.3, -0.2], [0.0, 0.5], [0.4, 0.4]]
                .iter()
                .map(|x| row(&mut tape, x))
                .collect();
            let gs = encode_conversation(&mut tape, &layers, &vs, &c, &mut Mode::Eval).unwrap();
            assert_eq!(gs.len(), 4);
            tape.value(gs[3]).data().to_vec()
        };
        assert_eq!(run(0.2), run(0.2));
        assert_ne!(run(0.2), run(-0.9));
        let mut tape = Tape::new(&store);
        assert!(encode_conversation(&mut tape, &layers, &[], &c, &mut Mode::Eval).is_err());
    }

    #[test]
    fn two_level_gradient() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let c = HierEncoderConfig { dropout: 0.0, ..cfg(4) };
        let table = EmbeddingTable::new(&mut store, "emb", 8, 3, &mut r).unwrap();
        let word = bilstm_stack(&mut store, "w", 3, 4, 1, &mut r).unwrap();
        let conv = bilstm_stack(&mut store, "c", 8, 4, 1, &mut r).unwrap();
        let utts: [&[usize]; 3] = [&[2, 3, 4], &[5], &[6, 7]];
        let padded = Padded::new(&utts).unwrap();
        let report = grad_check(
            |tape| {
                let v = encode_utterances(tape, &table, &word, &padded, &c, &mut Mode::Eval)?;
                let vs = (0..3).map(|j| tape.slice_rows(v, j, 1)).collect::<Result<Vec<_>>>()?;
                let gs = encode_conversation(tape, &conv, &vs, &c, &mut Mode::Eval)?;
                let all = tape.concat(&gs, 0)?;
                let sq = tape.mul(all, all)?;
                Ok(tape.sum(sq))
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
