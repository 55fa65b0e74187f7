use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::vocab::PAD;
use super::EncodedConversation;
use crate::error::{Error, Result};

/// Index sequences right-padded to a common length, stored time-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Padded {
    /// `steps[t][n]` is token `t` of sequence `n`, or PAD past its end.
    pub steps: Vec<Vec<usize>>,
    /// `mask[t][n]` is true where `steps[t][n]` is a real token.
    pub mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
}

impl Padded {
    pub fn new(seqs: &[&[usize]]) -> Result<Self> {
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid("cannot pad an empty sequence"));
        }
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let steps = (0..max_len)
            .map(|t| seqs.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect())
            .collect();
        let mask = (0..max_len).map(|t| seqs.iter().map(|s| t < s.len()).collect()).collect();
        Ok(Padded {
            steps,
            mask,
            lengths: seqs.iter().map(|s| s.len()).collect(),
        })
    }

    pub fn max_len(&self) -> usize {
        self.steps.len()
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }
}

/// Conversations of equal length processed together.
///
/// Utterance rows are laid out step-major: row `j * B + b` is utterance `j`
/// of member `b`, so each conversation step is a contiguous block of `B` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Indices into the encoded corpus.
    pub members: Vec<usize>,
    pub num_utterances: usize,
    pub tokens: Padded,
    pub pos: Option<Padded>,
    /// `labels[j][b]`
    pub labels: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(convs: &[EncodedConversation], members: Vec<usize>) -> Result<Self> {
        let first = *members.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let r = convs[first].len();
        if members.iter().any(|&m| convs[m].len() != r) {
            return Err(Error::invalid("batch members differ in utterance count"));
        }
        let rows = |get: &dyn Fn(&EncodedConversation, usize) -> &[usize]| -> Vec<&[usize]> {
            (0..r)
                .flat_map(|j| members.iter().map(move |&m| (m, j)))
                .map(|(m, j)| get(&convs[m], j))
                .collect()
        };
        let tokens = Padded::new(&rows(&|c, j| &c.tokens[j]))?;
        let pos = if members.iter().all(|&m| convs[m].pos.is_some()) {
            Some(Padded::new(&rows(&|c, j| &c.pos.as_ref().expect("checked")[j]))?)
        } else {
            None
        };
        let labels = (0..r).map(|j| members.iter().map(|&m| convs[m].labels[j]).collect()).collect();
        Ok(Batch {
            members,
            num_utterances: r,
            tokens,
            pos,
            labels,
        })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Groups conversations by utterance count into batches of at most
/// `max_batch`. With an rng, members are shuffled within each group and
/// the batch order is shuffled; without one, corpus order is kept and
/// groups come in increasing length.
pub fn make_batches<R: Rng + ?Sized>(
    convs: &[EncodedConversation],
    max_batch: usize,
    rng: Option<&mut R>,
) -> Result<Vec<Batch>> {
    if max_batch == 0 {
        return Err(Error::invalid("max_batch must be positive"));
    }
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in convs.iter().enumerate() {
        buckets.entry(c.len()).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut rng = rng;
    for (_, mut members) in buckets {
        if let Some(rng) = rng.as_deref_mut() {
            members.shuffle(rng);
        }
        groups.extend(members.chunks(max_batch).map(<[usize]>::to_vec));
    }
    if let Some(rng) = rng {
        groups.shuffle(rng);
    }
    groups.into_iter().map(|m| Batch::new(convs, m)).collect()
}
