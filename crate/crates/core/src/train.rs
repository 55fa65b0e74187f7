//! Training loop, optimizer, learning-rate schedule, early stopping,
//! metrics and the six-cell ablation.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_pretrained, make_batches, Corpus, EncodedConversation, LabelMap, Vocab};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{Classifier, ModelConfig, Tagger, Variant};
use crate::numcore::{ParamId, ParamStore, Tape, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    /// Epochs between halvings of the learning rate.
    pub lr_halving_period: usize,
    pub weight_decay: f64,
    pub max_batch: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub rho: f64,
    pub eps: f64,
    pub min_count: usize,
    /// Divide each batch loss by its utterance count.
    pub normalize_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            learning_rate: 1.0,
            lr_halving_period: 5,
            weight_decay: 1e-4,
            max_batch: 64,
            early_stop_patience: 5,
            max_epochs: 50,
            seed: 1,
            clip_norm: 5.0,
            rho: 0.95,
            eps: 1e-6,
            min_count: 1,
            normalize_loss: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.lr_halving_period == 0 || self.max_batch == 0 || self.max_epochs == 0 {
            return bad("lr_halving_period, max_batch and max_epochs must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("weight_decay and clip_norm must be non-negative");
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) {
            return bad("rho must lie in [0, 1) and eps be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.learning_rate, self.lr_halving_period)
    }
}

/// `initial · 0.5^⌊epoch / period⌋`, epochs counted from 0.
pub fn lr_at(epoch: usize, initial: f64, period: usize) -> f64 {
    initial * 0.5f64.powi((epoch / period.max(1)) as i32)
}

/// Adadelta with L2 weight decay folded into the gradient:
///
/// ```text
/// g ← grad + wd·x        E[g²] ← ρE[g²] + (1-ρ)g²
/// Δ = -√(E[Δ²]+ε) / √(E[g²]+ε) · g
/// E[Δ²] ← ρE[Δ²] + (1-ρ)Δ²     x ← x + lr·Δ
/// ```
///
/// Decay applies only to parameters flagged for it.
#[derive(Clone, Debug)]
pub struct Adadelta<T> {
    pub rho: f64,
    pub eps: f64,
    sq_grad: Vec<Tensor<T>>,
    sq_delta: Vec<Tensor<T>>,
}

impl<T: Scalar> Adadelta<T> {
    pub fn new(store: &ParamStore<T>, rho: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adadelta {
            rho,
            eps,
            sq_grad: zeros(),
            sq_delta: zeros(),
        }
    }

    /// `E[g²]` of one parameter.
    pub fn sq_grad(&self, id: ParamId) -> &Tensor<T> {
        &self.sq_grad[id.index()]
    }

    /// `E[Δ²]` of one parameter.
    pub fn sq_delta(&self, id: ParamId) -> &Tensor<T> {
        &self.sq_delta[id.index()]
    }

    /// Updates every parameter from its stored gradient. Nothing changes if
    /// any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, weight_decay: f64) -> Result<()> {
        if store.len() != self.sq_grad.len() {
            return Err(Error::invalid("optimizer state does not match the parameter store"));
        }
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
        let (rho, eps, lr) = (T::of(self.rho), T::of(self.eps), T::of(lr));
        let one = T::one();
        for ((p, eg), ed) in store.iter_mut().zip(&mut self.sq_grad).zip(&mut self.sq_delta) {
            let wd = T::of(if p.decay { weight_decay } else { 0.0 });
            let value = p.value.data_mut();
            let grad = p.grad.data();
            for i in 0..value.len() {
                let g = grad[i] + wd * value[i];
                let eg_i = &mut eg.data_mut()[i];
                *eg_i = rho * *eg_i + (one - rho) * g * g;
                let ed_i = &mut ed.data_mut()[i];
                let delta = -((*ed_i + eps).sqrt() / (*eg_i + eps).sqrt()) * g;
                *ed_i = rho * *ed_i + (one - rho) * delta * delta;
                value[i] += lr * delta;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm().as_f64();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Waiting,
    Stop,
}

/// Stops once `patience` consecutive epochs fail to beat the best score.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    waiting: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            waiting: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> Progress {
        match self.best {
            Some((_, b)) if score <= b => {
                self.waiting += 1;
                if self.waiting >= self.patience {
                    Progress::Stop
                } else {
                    Progress::Waiting
                }
            }
            _ => {
                self.best = Some((epoch, score));
                self.waiting = 0;
                Progress::Improved
            }
        }
    }

    /// `(epoch, score)` of the best observation.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean loss per utterance over the epoch.
    pub train_loss: f64,
    pub valid_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub const HEADER: &'static str = "epoch\ttrain_loss\tvalid_acc\tlr";

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.records {
            s += &format!("{}\t{}\t{}\t{}\n", r.epoch, r.train_loss, r.valid_acc, r.lr);
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, |w| Ok(w.write_all(self.to_tsv().as_bytes())?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
    /// A non-finite loss or gradient; the best parameters so far were kept.
    Diverged,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: History,
    /// 1-based epoch of the kept parameters; 0 if none finished.
    pub best_epoch: usize,
    pub best_valid_acc: f64,
    pub stop: StopReason,
}

/// Vocabularies, label set and a freshly initialized model for `train`.
///
/// Labels come from `labels` when given, else in order of first appearance
/// in `train`. `embeddings` names a pretrained vector file of width
/// `embedding_dim`.
pub fn build_model<T: Scalar>(
    cfg: &TrainConfig,
    train: &Corpus,
    labels: Option<LabelMap>,
    embeddings: Option<&Path>,
) -> Result<Tagger<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let vocab = Vocab::build(train, cfg.min_count);
    let labels = labels.unwrap_or_else(|| train.labels.clone());
    let pos_vocab = if cfg.model.pos.enabled {
        if !train.has_pos() {
            return Err(Error::Data("POS extension enabled but the training corpus lacks POS tags".into()));
        }
        Some(Vocab::build_pos(train))
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pretrained = match embeddings {
        Some(path) => {
            let pre = load_pretrained::<T, _>(path, &vocab, cfg.model.embedding_dim, &mut rng)?;
            log::info!("pretrained embeddings cover {:.1}% of the vocabulary", 100.0 * pre.coverage);
            Some(pre.matrix)
        }
        None => None,
    };
    Tagger::new(cfg.model, vocab, labels, pos_vocab, pretrained, &mut rng)
}

/// Trains in place and leaves the parameters of the best validation epoch
/// in `tagger`.
pub fn train<T: Scalar>(
    tagger: &mut Tagger<T>,
    train: &[EncodedConversation],
    valid: &[EncodedConversation],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = Adadelta::new(&tagger.params, cfg.rho, cfg.eps);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = tagger.params.clone();
    let mut history = History::default();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let batches = make_batches(train, cfg.max_batch, Some(&mut rng))?;
        let (mut total, mut count) = (0.0, 0usize);
        for batch in &batches {
            let n = batch.size() * batch.num_utterances;
            let (value, grads) = {
                let mut tape = Tape::new(&tagger.params);
                let mut mode = Mode::Train(&mut rng);
                let loss = if cfg.normalize_loss {
                    tagger.net.loss(&mut tape, batch, &mut mode)?
                } else {
                    tagger.net.nll_sum(&mut tape, batch, &mut mode)?
                };
                let value = tape.value(loss).item().as_f64();
                if !value.is_finite() {
                    log::warn!("epoch {}: non-finite loss, keeping the best parameters", epoch + 1);
                    stop = StopReason::Diverged;
                    break 'epochs;
                }
                (value, tape.backward(loss)?)
            };
            tagger.params.zero_grad();
            tagger.params.accumulate(&grads);
            clip_grad_norm(&mut tagger.params, cfg.clip_norm);
            if let Err(e) = opt.step(&mut tagger.params, lr, cfg.weight_decay) {
                log::warn!("epoch {}: {e}, keeping the best parameters", epoch + 1);
                stop = StopReason::Diverged;
                break 'epochs;
            }
            total += if cfg.normalize_loss { value * n as f64 } else { value };
            count += n;
        }
        let valid_acc = evaluate(tagger, valid)?.metrics.accuracy();
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: total / count as f64,
            valid_acc,
            lr,
        };
        log::info!(
            "epoch {} loss {:.4} valid_acc {:.4} lr {}",
            record.epoch,
            record.train_loss,
            record.valid_acc,
            record.lr
        );
        history.records.push(record);
        match stopper.observe(epoch + 1, valid_acc) {
            Progress::Improved => best = tagger.params.clone(),
            Progress::Waiting => {}
            Progress::Stop => {
                stop = StopReason::Patience;
                break;
            }
        }
    }
    tagger.params.copy_values_from(&best)?;
    let (best_epoch, best_valid_acc) = stopper.best().unwrap_or((0, 0.0));
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_valid_acc,
        stop,
    })
}

/// Confusion counts, `confusion[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Metrics {
    pub labels: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(labels: &LabelMap, gold: &[Vec<usize>], pred: &[Vec<usize>]) -> Result<Self> {
        let k = labels.len();
        let mut confusion = vec![vec![0; k]; k];
        if gold.len() != pred.len() {
            return Err(Error::invalid("gold and predicted conversation counts differ"));
        }
        for (g, p) in gold.iter().zip(pred) {
            if g.len() != p.len() {
                return Err(Error::invalid("gold and predicted utterance counts differ"));
            }
            for (&a, &b) in g.iter().zip(p) {
                if a >= k || b >= k {
                    return Err(Error::invalid(format!("label index out of range for {k} labels")));
                }
                confusion[a][b] += 1;
            }
        }
        Ok(Metrics {
            labels: labels.names().to_vec(),
            confusion,
        })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }

    /// Fraction of utterances labeled correctly; 0 for an empty set.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }

    /// Gold utterances per class.
    pub fn class_counts(&self) -> Vec<usize> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    /// Rows scaled to percentages; empty rows stay zero.
    pub fn row_percentages(&self) -> Vec<Vec<f64>> {
        self.confusion
            .iter()
            .map(|r| {
                let n: usize = r.iter().sum();
                r.iter()
                    .map(|&c| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }

    /// Header row of label names; each line starts with the true label.
    /// Cells hold counts, or row percentages when `percent`.
    pub fn to_csv(&self, percent: bool) -> String {
        let mut s = format!("true\\predicted,{}\n", self.labels.join(","));
        let pct = self.row_percentages();
        for (i, name) in self.labels.iter().enumerate() {
            let cells: Vec<String> = if percent {
                pct[i].iter().map(|p| format!("{p:.2}")).collect()
            } else {
                self.confusion[i].iter().map(usize::to_string).collect()
            };
            s += &format!("{name},{}\n", cells.join(","));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// Predicted label indices per conversation, in input order.
    pub predictions: Vec<Vec<usize>>,
}

pub fn evaluate<T: Scalar>(tagger: &Tagger<T>, convs: &[EncodedConversation]) -> Result<Evaluation> {
    let predictions = tagger.predict(convs)?;
    let gold: Vec<Vec<usize>> = convs.iter().map(|c| c.labels.clone()).collect();
    let metrics = Metrics::from_predictions(&tagger.labels, &gold, &predictions)?;
    Ok(Evaluation { metrics, predictions })
}

/// One `conversation_id<TAB>utterance_index<TAB>gold_label<TAB>predicted_label`
/// line per utterance, utterances indexed from 0.
pub fn predictions_tsv(convs: &[EncodedConversation], predictions: &[Vec<usize>], labels: &LabelMap) -> String {
    let mut s = String::new();
    for (c, p) in convs.iter().zip(predictions) {
        for (j, (&g, &y)) in c.labels.iter().zip(p).enumerate() {
            s += &format!("{}\t{j}\t{}\t{}\n", c.id, labels.name(g), labels.name(y));
        }
    }
    s
}

/// Test accuracy of every variant × classifier cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub cells: Vec<(Variant, Classifier, f64)>,
}

impl AblationTable {
    pub fn get(&self, v: Variant, c: Classifier) -> Option<f64> {
        self.cells.iter().find(|x| x.0 == v && x.1 == c).map(|x| x.2)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10}{:>8}{:>8}", "Model", "LR", "CRF")?;
        for v in Variant::ALL {
            write!(f, "{:<10}", v.display())?;
            for c in Classifier::ALL {
                match self.get(v, c) {
                    Some(a) => write!(f, "{:>8.1}", 100.0 * a)?,
                    None => write!(f, "{:>8}", "-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Trains and tests all six cells with a shared seed. Extensions are
/// switched off.
pub fn ablate<T: Scalar>(
    cfg: &TrainConfig,
    train_set: &Corpus,
    valid: &Corpus,
    test: &Corpus,
    labels: Option<LabelMap>,
    embeddings: Option<&Path>,
) -> Result<AblationTable> {
    let mut cells = Vec::new();
    for v in Variant::ALL {
        for c in Classifier::ALL {
            let mut cell = *cfg;
            cell.model.variant = v;
            cell.model.classifier = c;
            cell.model.attention.enabled = false;
            cell.model.pos.enabled = false;
            let mut tagger = build_model::<T>(&cell, train_set, labels.clone(), embeddings)?;
            let (tr, va, te) = (tagger.encode(train_set)?, tagger.encode(valid)?, tagger.encode(test)?);
            train(&mut tagger, &tr, &va, &cell)?;
            let acc = evaluate(&tagger, &te)?.metrics.accuracy();
            log::info!("{} + {}: test accuracy {:.4}", v.display(), c.name(), acc);
            cells.push((v, c, acc));
        }
    }
    Ok(AblationTable { cells })
}
