//! The tagger: an ablation variant of the hierarchy topped by a softmax or
//! CRF classifier, together with its vocabularies and parameters.
//!
//! | variant    | utterance representation                   |
//! |------------|--------------------------------------------|
//! | `WE`       | mean word embedding                        |
//! | `WE_UL`    | pooled word-level Bi-LSTM                  |
//! | `WE_UL_CL` | word-level then conversation-level Bi-LSTM |
//!
//! The attention and POS extensions attach to `WE_UL_CL` only.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode, make_batches, Batch, Corpus, EncodedConversation, LabelMap, Vocab};
use crate::crf::{self, Chain, CrfParams, UnaryProjection};
use crate::encoder::{
    bilstm_stack, encode_conversation, encode_utterances, mean_embeddings, BiLstm, EmbeddingTable, HierEncoderConfig,
    Mode,
};
use crate::error::{Error, Result};
use crate::extensions::{encode_pos, fuse, intra_attention, AttentionConfig, FusionPoint, PosConfig, PosEncoder};
use crate::fsutil::write_atomic;
use crate::numcore::{grad_check, read_params, write_params, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "WE")]
    We,
    #[serde(rename = "WE_UL")]
    WeUl,
    #[default]
    #[serde(rename = "WE_UL_CL")]
    WeUlCl,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::We, Variant::WeUl, Variant::WeUlCl];

    pub fn name(self) -> &'static str {
        match self {
            Variant::We => "WE",
            Variant::WeUl => "WE_UL",
            Variant::WeUlCl => "WE_UL_CL",
        }
    }

    /// Table row label, e.g. `WE+UL+CL`.
    pub fn display(self) -> &'static str {
        match self {
            Variant::We => "WE",
            Variant::WeUl => "WE+UL",
            Variant::WeUlCl => "WE+UL+CL",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s) || v.display().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected WE, WE_UL or WE_UL_CL)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Classifier {
    /// Independent per-utterance softmax.
    #[serde(rename = "LR")]
    Lr,
    #[default]
    #[serde(rename = "CRF")]
    Crf,
}

impl Classifier {
    pub const ALL: [Classifier; 2] = [Classifier::Lr, Classifier::Crf];

    pub fn name(self) -> &'static str {
        match self {
            Classifier::Lr => "LR",
            Classifier::Crf => "CRF",
        }
    }
}

impl std::fmt::Display for Classifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Classifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Classifier::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown classifier {s:?} (expected LR or CRF)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub classifier: Classifier,
    pub embedding_dim: usize,
    pub encoder: HierEncoderConfig,
    pub attention: AttentionConfig,
    pub pos: PosConfig,
    /// Apply weight decay to CRF transition and start scores as well.
    pub decay_transitions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::WeUlCl,
            classifier: Classifier::Crf,
            embedding_dim: 300,
            encoder: HierEncoderConfig::default(),
            attention: AttentionConfig::default(),
            pos: PosConfig::default(),
            decay_transitions: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.attention.validate()?;
        self.pos.validate()?;
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if (self.attention.enabled || self.pos.enabled) && self.variant != Variant::WeUlCl {
            return Err(Error::Config(format!(
                "attention and POS extensions need variant WE_UL_CL, not {}",
                self.variant.name()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Head {
    Softmax(UnaryProjection),
    Crf(CrfParams),
}

impl Head {
    pub fn projection(&self) -> &UnaryProjection {
        match self {
            Head::Softmax(p) => p,
            Head::Crf(c) => &c.unary,
        }
    }
}

/// Parameter handles of one model, independent of their values.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub num_labels: usize,
    pub embed: EmbeddingTable,
    /// Word-level layers; empty for `WE`.
    pub utterance: Vec<BiLstm>,
    /// Conversation-level layers; empty unless `WE_UL_CL`.
    pub conversation: Vec<BiLstm>,
    pub pos: Option<PosEncoder>,
    pub head: Head,
}

impl Network {
    fn build<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: ModelConfig,
        vocab_size: usize,
        num_labels: usize,
        pos_tags: Option<usize>,
        pretrained: Option<Tensor<T>>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if num_labels == 0 {
            return Err(Error::Config("no labels".into()));
        }
        let d = config.embedding_dim;
        let enc = &config.encoder;
        let h = enc.hidden_size;
        let embed = match pretrained {
            Some(m) => {
                if m.shape() != [vocab_size, d] {
                    return Err(Error::Config(format!(
                        "pretrained embeddings are {:?}, expected [{vocab_size}, {d}]",
                        m.shape()
                    )));
                }
                EmbeddingTable::from_matrix(store, "embed", m)?
            }
            None => EmbeddingTable::new(store, "embed", vocab_size, d, rng)?,
        };
        let utterance = match config.variant {
            Variant::We => Vec::new(),
            _ => bilstm_stack(store, "utterance", d, h, enc.num_layers, rng)?,
        };
        let pos = if config.pos.enabled {
            let tags = pos_tags.ok_or_else(|| Error::Config("POS extension enabled without a tag vocabulary".into()))?;
            Some(PosEncoder::new(store, "pos", tags, config.pos.dim, h, enc.num_layers, rng)?)
        } else {
            None
        };
        let pos_dim = pos.as_ref().map_or(0, PosEncoder::out_dim);
        let mut feat = if config.variant == Variant::We { d } else { 2 * h };
        let conversation = if config.variant == Variant::WeUlCl {
            let pre = if config.pos.fusion_point == FusionPoint::PreConversation { pos_dim } else { 0 };
            let layers = bilstm_stack(store, "conversation", feat + pre, h, enc.num_layers, rng)?;
            feat = 2 * h;
            layers
        } else {
            Vec::new()
        };
        if config.attention.enabled {
            feat *= 2;
        }
        if config.pos.fusion_point == FusionPoint::PreClassifier {
            feat += pos_dim;
        }
        let head = match config.classifier {
            Classifier::Lr => Head::Softmax(UnaryProjection::new(store, "classifier", feat, num_labels, rng)?),
            Classifier::Crf => {
                let c = CrfParams::new(store, "crf", feat, num_labels, rng)?;
                store.get_mut(c.trans).decay = config.decay_transitions;
                store.get_mut(c.start).decay = config.decay_transitions;
                Head::Crf(c)
            }
        };
        Ok(Network {
            config,
            num_labels,
            embed,
            utterance,
            conversation,
            pos,
            head,
        })
    }

    /// Classifier input per conversation step, `B × feature_dim` each.
    pub fn features<T: Scalar>(&self, tape: &mut Tape<'_, T>, batch: &Batch, mode: &mut Mode<'_>) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let enc = &cfg.encoder;
        let (b, r) = (batch.size(), batch.num_utterances);
        let v = match cfg.variant {
            Variant::We => mean_embeddings(tape, &self.embed, &batch.tokens, enc, mode)?[0],
            _ => encode_utterances(tape, &self.embed, &self.utterance, &batch.tokens, enc, mode)?,
        };
        let p = match &self.pos {
            Some(pe) => {
                let tags = batch
                    .pos
                    .as_ref()
                    .ok_or_else(|| Error::Data("POS extension enabled but the batch has no tags".into()))?;
                Some(encode_pos(tape, pe, tags, enc, mode)?)
            }
            None => None,
        };
        let block = |tape: &mut Tape<'_, T>, x: Var| -> Result<Vec<Var>> {
            (0..r).map(|j| tape.slice_rows(x, j * b, b)).collect()
        };
        let mut vs = block(tape, v)?;
        let ps = p.map(|p| block(tape, p)).transpose()?;
        if cfg.variant != Variant::WeUlCl {
            return Ok(vs);
        }
        if let (Some(ps), FusionPoint::PreConversation) = (&ps, cfg.pos.fusion_point) {
            for (v, &p) in vs.iter_mut().zip(ps) {
                *v = tape.concat(&[*v, p], 1)?;
            }
        }
        let gs = encode_conversation(tape, &self.conversation, &vs, enc, mode)?;
        let ctx = if cfg.attention.enabled {
            let att = intra_attention(tape, &gs, cfg.attention.window, cfg.attention.scaled)?;
            let dim = tape.shape(gs[0]).1;
            att.outputs
                .into_iter()
                .map(|o| tape.slice_cols(o, dim, dim).map(Some))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![None; r]
        };
        let post = match (&ps, cfg.pos.fusion_point) {
            (Some(ps), FusionPoint::PreClassifier) => ps.iter().copied().map(Some).collect(),
            _ => vec![None; r],
        };
        (0..r).map(|j| fuse(tape, gs[j], ctx[j], post[j])).collect()
    }

    /// Label scores per step, `B × K` each.
    pub fn scores<T: Scalar>(&self, tape: &mut Tape<'_, T>, batch: &Batch, mode: &mut Mode<'_>) -> Result<Vec<Var>> {
        let xs = self.features(tape, batch, mode)?;
        crf::unary_scores(tape, self.head.projection(), &xs)
    }

    /// Summed negative log-likelihood of the batch divided by its utterance count.
    pub fn loss<T: Scalar>(&self, tape: &mut Tape<'_, T>, batch: &Batch, mode: &mut Mode<'_>) -> Result<Var> {
        let total = self.nll_sum(tape, batch, mode)?;
        let n = (batch.size() * batch.num_utterances) as f64;
        Ok(tape.scale(total, T::one() / T::of(n)))
    }

    /// Negative log-likelihood summed over the conversations of the batch.
    pub fn nll_sum<T: Scalar>(&self, tape: &mut Tape<'_, T>, batch: &Batch, mode: &mut Mode<'_>) -> Result<Var> {
        let scores = self.scores(tape, batch, mode)?;
        Ok(match &self.head {
            Head::Crf(c) => {
                let (trans, start) = (tape.param(c.trans), tape.param(c.start));
                let per_conv = crf::nll(tape, &scores, &batch.labels, trans, start)?;
                tape.sum(per_conv)
            }
            Head::Softmax(_) => {
                let mut acc: Option<Var> = None;
                for (z, gold) in scores.iter().zip(&batch.labels) {
                    let lse = tape.logsumexp_rows(*z);
                    let at: Vec<(usize, usize)> = gold.iter().copied().enumerate().collect();
                    let picked = tape.pick(*z, &at)?;
                    let nll = tape.sub(lse, picked)?;
                    let s = tape.sum(nll);
                    acc = Some(match acc {
                        None => s,
                        Some(a) => tape.add(a, s)?,
                    });
                }
                acc.expect("non-empty batch")
            }
        })
    }

    /// Best labeling of each batch member: Viterbi for the CRF, per-row
    /// argmax (lowest index on ties) for softmax.
    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, scores: &[Tensor<T>]) -> Result<Vec<Vec<usize>>> {
        let b = scores.first().map_or(0, Tensor::rows);
        (0..b)
            .map(|m| {
                let unary = Tensor::from_rows(&scores.iter().map(|s| s.row(m).to_vec()).collect::<Vec<_>>())?;
                Ok(match &self.head {
                    Head::Crf(c) => Chain::from_params(unary, c, store)?.viterbi().0,
                    Head::Softmax(_) => (0..unary.rows()).map(|j| argmax(unary.row(j))).collect(),
                })
            })
            .collect()
    }
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// A trained or trainable dialogue-act tagger.
#[derive(Clone, Debug)]
pub struct Tagger<T> {
    pub net: Network,
    pub params: ParamStore<T>,
    pub vocab: Vocab,
    pub labels: LabelMap,
    pub pos_vocab: Option<Vocab>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    config: ModelConfig,
    labels: LabelMap,
    vocab_hash: String,
    vocab: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pos_vocab: Option<Vec<String>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.txt";

/// Conversations per batch when predicting.
const PREDICT_BATCH: usize = 64;

impl<T: Scalar> Tagger<T> {
    /// Fresh model. `pretrained`, if given, must be `|V| × embedding_dim`.
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        vocab: Vocab,
        labels: LabelMap,
        pos_vocab: Option<Vocab>,
        pretrained: Option<Tensor<T>>,
        rng: &mut R,
    ) -> Result<Self> {
        if config.pos.enabled && pos_vocab.is_none() {
            return Err(Error::Config("POS extension enabled without a tag vocabulary".into()));
        }
        let pos_vocab = if config.pos.enabled { pos_vocab } else { None };
        let mut params = ParamStore::new();
        let net = Network::build(
            &mut params,
            config,
            vocab.len(),
            labels.len(),
            pos_vocab.as_ref().map(Vocab::len),
            pretrained,
            rng,
        )?;
        Ok(Tagger {
            net,
            params,
            vocab,
            labels,
            pos_vocab,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Maps a corpus onto this model's vocabularies and label set.
    pub fn encode(&self, corpus: &Corpus) -> Result<Vec<EncodedConversation>> {
        encode(corpus, &self.vocab, &self.labels, self.pos_vocab.as_ref())
    }

    pub fn loss(&self, tape: &mut Tape<'_, T>, batch: &Batch, mode: &mut Mode<'_>) -> Result<Var> {
        self.net.loss(tape, batch, mode)
    }

    /// Predicted label indices for each member of `batch`.
    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<Vec<usize>>> {
        let mut tape = Tape::new(&self.params);
        let scores = self.net.scores(&mut tape, batch, &mut Mode::Eval)?;
        let values: Vec<Tensor<T>> = scores.iter().map(|&s| tape.value(s).clone()).collect();
        self.net.decode(&self.params, &values)
    }

    /// Predictions for every conversation, in input order. Batches are
    /// decoded in parallel.
    pub fn predict(&self, convs: &[EncodedConversation]) -> Result<Vec<Vec<usize>>> {
        let batches = make_batches::<ChaCha8Rng>(convs, PREDICT_BATCH, None)?;
        let decoded = batches
            .par_iter()
            .map(|b| self.predict_batch(b))
            .collect::<Result<Vec<_>>>()?;
        let mut out = vec![Vec::new(); convs.len()];
        for (b, preds) in batches.iter().zip(decoded) {
            for (&m, p) in b.members.iter().zip(preds) {
                out[m] = p;
            }
        }
        Ok(out)
    }

    /// Finite-difference check of the training loss on `batch`, dropout off.
    pub fn grad_check(&mut self, batch: &Batch, eps: f64) -> Result<GradCheckReport> {
        let net = &self.net;
        grad_check(|tape| net.loss(tape, batch, &mut Mode::Eval), &mut self.params, eps)
    }

    /// Writes `manifest.json` and `params.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format: 1,
            config: self.net.config,
            labels: self.labels.clone(),
            vocab_hash: self.vocab.hash(),
            vocab: self.vocab.tokens().to_vec(),
            pos_vocab: self.pos_vocab.as_ref().map(|v| v.tokens().to_vec()),
        };
        write_atomic(dir.join(PARAMS_FILE), |w| write_params(&self.params, w))?;
        write_atomic(dir.join(MANIFEST_FILE), |w| {
            serde_json::to_writer_pretty(&mut *w, &manifest)?;
            writeln!(w)?;
            Ok(())
        })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_reader(BufReader::new(crate::fsutil::open(dir.join(MANIFEST_FILE))?))?;
        if manifest.format != 1 {
            return Err(Error::Data(format!("unsupported checkpoint format {}", manifest.format)));
        }
        let vocab = Vocab::from_tokens(manifest.vocab);
        if vocab.hash() != manifest.vocab_hash {
            log::warn!("checkpoint vocabulary hash differs from its manifest; tokens may map differently");
        }
        let pos_vocab = manifest.pos_vocab.map(Vocab::from_tokens);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tagger = Tagger::new(manifest.config, vocab, manifest.labels, pos_vocab, None, &mut rng)?;
        let path = dir.join(PARAMS_FILE);
        let stored: ParamStore<T> =
            read_params(BufReader::new(crate::fsutil::open(&path)?), &path.display().to_string())?;
        tagger.params.copy_values_from(&stored)?;
        Ok(tagger)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthScheme, SynthSizes};

    fn small_config(variant: Variant, classifier: Classifier) -> ModelConfig {
        ModelConfig {
            variant,
            classifier,
            embedding_dim: 5,
            encoder: HierEncoderConfig {
                hidden_size: 3,
                dropout: 0.0,
                ..HierEncoderConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn fixture() -> (Corpus, Vocab, Vocab) {
        let sizes = SynthSizes {
            conversations: 20,
            ..SynthSizes::default()
        };
        let c = synth_corpus(SynthScheme::Mixed, sizes, 3).unwrap();
        let v = Vocab::build(&c, 1);
        let p = Vocab::build_pos(&c);
        (c, v, p)
    }

    fn tagger(config: ModelConfig) -> (Tagger<f64>, Vec<EncodedConversation>) {
        let (c, v, p) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tagger::new(config, v, c.labels.clone(), Some(p), None, &mut rng).unwrap();
        let enc = t.encode(&c).unwrap();
        (t, enc)
    }

    #[test]
    fn we_lr_parameter_set() {
        let (t, _) = tagger(small_config(Variant::We, Classifier::Lr));
        let names: Vec<&str> = t.params.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["embed", "classifier.weight", "classifier.bias"]);
        assert_eq!(t.params.value(t.net.head.projection().weight).shape(), &[5, t.labels.len()]);
    }

    #[test]
    fn full_model_has_both_levels_and_crf() {
        let (t, _) = tagger(small_config(Variant::WeUlCl, Classifier::Crf));
        assert_eq!(t.net.utterance.len(), 1);
        assert_eq!(t.net.conversation.len(), 1);
        assert!(matches!(t.net.head, Head::Crf(_)));
        assert!(t.params.find("crf.trans").is_some());
    }

    #[test]
    fn extensions_need_full_hierarchy() {
        let mut cfg = small_config(Variant::WeUl, Classifier::Lr);
        cfg.attention.enabled = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn feature_widths() {
        for (att, pos, fp, want) in [
            (false, false, FusionPoint::PreClassifier, 6),
            (true, false, FusionPoint::PreClassifier, 12),
            (true, true, FusionPoint::PreClassifier, 18),
            (true, true, FusionPoint::PreConversation, 12),
        ] {
            let mut cfg = small_config(Variant::WeUlCl, Classifier::Crf);
            cfg.attention.enabled = att;
            cfg.pos.enabled = pos;
            cfg.pos.dim = 4;
            cfg.pos.fusion_point = fp;
            let (t, _) = tagger(cfg);
            assert_eq!(t.net.head.projection().in_dim(&t.params), want);
        }
    }

    #[test]
    fn all_variants_run() {
        for v in Variant::ALL {
            for c in Classifier::ALL {
                let (t, enc) = tagger(small_config(v, c));
                let batches = make_batches::<ChaCha8Rng>(&enc, 8, None).unwrap();
                let mut tape = Tape::new(&t.params);
                let loss = t.loss(&mut tape, &batches[0], &mut Mode::Eval).unwrap();
                assert!(tape.value(loss).item().is_finite());
                let g = tape.backward(loss).unwrap();
                assert!(g.get(t.net.head.projection().weight).is_some());
                let preds = t.predict(&enc).unwrap();
                assert!(preds.iter().zip(&enc).all(|(p, e)| p.len() == e.len()));
            }
        }
    }

    #[test]
    fn zero_head_crf_loss_is_log_k() {
        let (mut t, enc) = tagger(small_config(Variant::WeUlCl, Classifier::Crf));
        let w = t.net.head.projection().weight;
        t.params.get_mut(w).value.fill(0.0);
        let batches = make_batches::<ChaCha8Rng>(&enc, 64, None).unwrap();
        let mut tape = Tape::new(&t.params);
        let loss = t.loss(&mut tape, &batches[0], &mut Mode::Eval).unwrap();
        let k = t.labels.len() as f64;
        assert!((tape.value(loss).item() - k.ln()).abs() < 1e-12);
    }

    #[test]
    fn batched_and_single_predictions_agree() {
        let mut cfg = small_config(Variant::WeUlCl, Classifier::Crf);
        cfg.attention.enabled = true;
        cfg.pos.enabled = true;
        let (t, enc) = tagger(cfg);
        let all = t.predict(&enc).unwrap();
        for (i, e) in enc.iter().enumerate() {
            let alone = t.predict(std::slice::from_ref(e)).unwrap();
            assert_eq!(alone[0], all[i]);
        }
    }

    #[test]
    fn full_gradient_with_extensions() {
        let mut cfg = small_config(Variant::WeUlCl, Classifier::Crf);
        cfg.attention.enabled = true;
        cfg.pos.enabled = true;
        cfg.pos.dim = 3;
        let (mut t, enc) = tagger(cfg);
        let first = enc.iter().position(|e| e.len() == 3).unwrap();
        let batch = Batch::new(&enc, vec![first]).unwrap();
        let report = t.grad_check(&batch, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-4, "{:?}", report.failures(1e-4));
    }

    #[test]
    fn save_load_round_trip() {
        let mut cfg = small_config(Variant::WeUlCl, Classifier::Crf);
        cfg.pos.enabled = true;
        let (t, enc) = tagger(cfg);
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        let back = Tagger::<f64>::load(dir.path()).unwrap();
        assert_eq!(back.vocab, t.vocab);
        assert_eq!(back.labels, t.labels);
        assert_eq!(back.net, t.net);
        for (a, b) in back.params.iter().zip(t.params.iter()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(back.predict(&enc).unwrap(), t.predict(&enc).unwrap());
    }
}
