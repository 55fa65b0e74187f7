//! Optional additions to the hierarchy: intra-attention over previous
//! utterances and a parallel POS-tag encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Padded;
use crate::encoder::{bilstm_stack, bilstm_stack_run, dropout, pool, BiLstm, EmbeddingTable, HierEncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub enabled: bool,
    /// Number of previous utterances attended to.
    pub window: usize,
    /// Divide scores by `sqrt(dim)`.
    pub scaled: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            enabled: false,
            window: 3,
            scaled: false,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.window == 0 {
            return Err(Error::Config("attention.window must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    /// `[g_j ; c_j]` per step.
    pub outputs: Vec<Var>,
    /// Per step, `B × |W_j|` weights over the window in increasing order of
    /// `m`; `None` for the first step.
    pub weights: Vec<Option<Var>>,
}

/// Context `c_j = Σ_m a_{j,m} g_m` over `m ∈ [j - window, j)`, with
/// `a_{j,·} = softmax(g_j · g_m)`. `c_0` is zero.
pub fn intra_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    gs: &[Var],
    window: usize,
    scaled: bool,
) -> Result<Attention> {
    if window == 0 {
        return Err(Error::invalid("attention window must be at least 1"));
    }
    let (b, dim) = tape.shape(*gs.first().ok_or_else(|| Error::invalid("attention over no steps"))?);
    let mut outputs = Vec::with_capacity(gs.len());
    let mut weights = Vec::with_capacity(gs.len());
    for (j, &g) in gs.iter().enumerate() {
        let prev = &gs[j.saturating_sub(window)..j];
        let (ctx, w) = if prev.is_empty() {
            (tape.zeros(b, dim), None)
        } else {
            let scores = prev
                .iter()
                .map(|&m| {
                    let p = tape.mul(g, m)?;
                    Ok(tape.sum_rows(p))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut s = tape.concat(&scores, 1)?;
            if scaled {
                s = tape.scale(s, T::one() / T::of(dim as f64).sqrt());
            }
            let lse = tape.logsumexp_rows(s);
            let shifted = tape.sub_col(s, lse)?;
            let a = tape.exp(shifted);
            let mut ctx = None;
            for (k, &m) in prev.iter().enumerate() {
                let ak = tape.slice_cols(a, k, 1)?;
                let term = tape.mul_col(m, ak)?;
                ctx = Some(match ctx {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            (ctx.expect("non-empty window"), Some(a))
        };
        outputs.push(tape.concat(&[g, ctx], 1)?);
        weights.push(w);
    }
    Ok(Attention { outputs, weights })
}

/// Where the POS vector joins the main path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPoint {
    /// Concatenated to `v_j` before the conversation encoder.
    PreConversation,
    /// Concatenated to `g_j` (and the attention context) before the classifier.
    #[default]
    PreClassifier,
}

impl std::fmt::Display for FusionPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionPoint::PreConversation => "pre_conversation",
            FusionPoint::PreClassifier => "pre_classifier",
        })
    }
}

impl std::str::FromStr for FusionPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_conversation" => Ok(FusionPoint::PreConversation),
            "pre_classifier" => Ok(FusionPoint::PreClassifier),
            _ => Err(Error::Config(format!(
                "unknown fusion point {s:?} (expected pre_conversation or pre_classifier)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosConfig {
    pub enabled: bool,
    /// Tag embedding width.
    pub dim: usize,
    pub fusion_point: FusionPoint,
}

impl Default for PosConfig {
    fn default() -> Self {
        PosConfig {
            enabled: false,
            dim: 32,
            fusion_point: FusionPoint::PreClassifier,
        }
    }
}

impl PosConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.dim == 0 {
            return Err(Error::Config("pos.dim must be positive".into()));
        }
        Ok(())
    }
}

/// Tag embeddings followed by a word-level bidirectional encoder of their own.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEncoder {
    pub embed: EmbeddingTable,
    pub layers: Vec<BiLstm>,
}

impl PosEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        tags: usize,
        dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(PosEncoder {
            embed: EmbeddingTable::new(store, &format!("{prefix}.embed"), tags, dim, rng)?,
            layers: bilstm_stack(store, &format!("{prefix}.enc"), dim, hidden, num_layers, rng)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, BiLstm::out_dim)
    }
}

/// Pooled tag-sequence vectors `p` for every row of a padded batch.
pub fn encode_pos<T: Scalar>(
    tape: &mut Tape<'_, T>,
    enc: &PosEncoder,
    tags: &Padded,
    cfg: &HierEncoderConfig,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let rate = if cfg.embedding_dropout { cfg.dropout } else { 0.0 };
    let es = crate::encoder::embed_padded(tape, &enc.embed, tags, rate, mode)?;
    let out = bilstm_stack_run(tape, &enc.layers, &es, Some(&tags.mask))?;
    let p = pool(tape, &out, cfg.pooling, Some(&tags.mask))?;
    dropout(tape, p, cfg.dropout, mode)
}

/// `[g ; c ; p]`, skipping absent parts.
pub fn fuse<T: Scalar>(tape: &mut Tape<'_, T>, g: Var, context: Option<Var>, pos: Option<Var>) -> Result<Var> {
    let parts: Vec<Var> = std::iter::once(g).chain(context).chain(pos).collect();
    tape.concat(&parts, 1)
}

/// Attention weights of one conversation from plain vectors, by direct
/// softmax over the window. `weights[j]` is empty for `j = 0`.
pub fn attention_weights<T: Scalar>(gs: &[Vec<T>], window: usize, scaled: bool) -> Vec<Vec<T>> {
    gs.iter()
        .enumerate()
        .map(|(j, g)| {
            let lo = j.saturating_sub(window);
            let scale = if scaled { T::one() / T::of(g.len() as f64).sqrt() } else { T::one() };
            let s: Vec<T> = gs[lo..j]
                .iter()
                .map(|m| g.iter().zip(m).map(|(&a, &b)| a * b).sum::<T>() * scale)
                .collect();
            let mx = s.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = s.iter().map(|&x| (x - mx).exp()).collect();
            let z: T = e.iter().copied().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

/// Convenience for tests and tools: rows of `gs` as one-row tape constants.
pub fn constants<T: Scalar>(tape: &mut Tape<'_, T>, gs: &[Vec<T>]) -> Vec<Var> {
    gs.iter().map(|g| tape.constant(Tensor::vector(g.clone()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_gs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect()
    }

    #[test]
    fn first_step_context_is_zero() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let gs = constants(&mut tape, &[vec![0.3, -0.2]]);
        let att = intra_attention(&mut tape, &gs, 3, false).unwrap();
        assert!(att.weights[0].is_none());
        assert_eq!(tape.value(att.outputs[0]).data(), &[0.3, -0.2, 0.0, 0.0]);
    }

    #[test]
    fn single_predecessor_has_weight_one() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let g = vec![vec![0.3, -0.2, 0.9], vec![5.0, 1.0, -2.0]];
        let gs = constants(&mut tape, &g);
        let att = intra_attention(&mut tape, &gs, 4, false).unwrap();
        assert_eq!(tape.value(att.weights[1].unwrap()).data(), &[1.0]);
        assert_eq!(&tape.value(att.outputs[1]).data()[3..], &g[0][..]);
    }

    #[test]
    fn weights_match_direct_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(window, scaled) in &[(1, false), (3, false), (5, true), (10, false)] {
            let g = random_gs(&mut rng, 8, 5);
            let store = ParamStore::<f64>::new();
            let mut tape = Tape::new(&store);
            let gs = constants(&mut tape, &g);
            let att = intra_attention(&mut tape, &gs, window, scaled).unwrap();
            let oracle = attention_weights(&g, window, scaled);
            for j in 1..g.len() {
                let w = tape.value(att.weights[j].unwrap()).data();
                assert_eq!(w.len(), j.min(window));
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (a, b) in w.iter().zip(&oracle[j]) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn window_saturation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_gs(&mut rng, 6, 4);
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let gs = constants(&mut tape, &g);
        let a = intra_attention(&mut tape, &gs, 5, false).unwrap();
        let b = intra_attention(&mut tape, &gs, 1000, false).unwrap();
        for (x, y) in a.outputs.iter().zip(&b.outputs) {
            assert_eq!(tape.value(*x), tape.value(*y));
        }
    }

    #[test]
    fn fuse_orders_parts() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let v = constants(&mut tape, &[vec![1.0], vec![2.0, 3.0], vec![4.0]]);
        let id = fuse(&mut tape, v[0], None, None).unwrap();
        assert_eq!(id, v[0]);
        let all = fuse(&mut tape, v[0], Some(v[1]), Some(v[2])).unwrap();
        assert_eq!(tape.value(all).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pos_branch() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = PosEncoder::new(&mut store, "pos", 7, 4, 3, 1, &mut rng).unwrap();
        let cfg = HierEncoderConfig {
            hidden_size: 3,
            dropout: 0.0,
            ..HierEncoderConfig::default()
        };
        let tags: [&[usize]; 3] = [&[2, 3, 4], &[5], &[2, 3, 4]];
        let padded = Padded::new(&tags).unwrap();
        {
            let mut tape = Tape::new(&store);
            let p = encode_pos(&mut tape, &enc, &padded, &cfg, &mut Mode::Eval).unwrap();
            let v = tape.value(p);
            assert_eq!(v.cols(), 6);
            assert_eq!(v.row(0), v.row(2));
        }
        let report = grad_check(
            |tape| {
                let p = encode_pos(tape, &enc, &padded, &cfg, &mut Mode::Eval)?;
                let sq = tape.mul(p, p)?;
                Ok(tape.sum(sq))
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn attention_gradient() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let id = store.add("g", &[4, 3], crate::numcore::Init::Uniform(-1.0, 1.0), true, &mut rng).unwrap();
        let report = grad_check(
            |tape| {
                let m = tape.param(id);
                let gs = (0..4).map(|j| tape.slice_rows(m, j, 1)).collect::<Result<Vec<_>>>()?;
                let att = intra_attention(tape, &gs, 2, true)?;
                let all = tape.concat(&att.outputs, 0)?;
                let sq = tape.mul(all, all)?;
                Ok(tape.sum(sq))
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
