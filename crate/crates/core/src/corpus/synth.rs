//! Synthetic dialogue corpora with controlled label signals.
//!
//! Each utterance is a run of filler words plus, depending on the scheme,
//! cue words tied to its label:
//!
//! * `lexical_labels`: labels are i.i.d. uniform and every utterance carries
//!   a keyword naming its label. The label is a function of the words.
//! * `markov_labels`: labels follow a near-deterministic cycle
//!   (`a → a+1` with probability 0.9). An utterance carries its own keyword
//!   with probability 0.6 and, independently, a keyword of a random other
//!   label with probability 0.6. Most of the recoverable signal is in the
//!   label sequence.
//! * `mixed`: labels follow a softer cycle (0.7). Label `2t + o` is cued by
//!   topic word `t` plus two marker words whose order encodes `o`, so a bag of
//!   words sees the topic but not the order. Some utterances carry no cue.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Conversation, Corpus, Split, Utterance};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthScheme {
    MarkovLabels,
    LexicalLabels,
    Mixed,
}

impl std::fmt::Display for SynthScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthScheme::MarkovLabels => "markov_labels",
            SynthScheme::LexicalLabels => "lexical_labels",
            SynthScheme::Mixed => "mixed",
        })
    }
}

impl std::str::FromStr for SynthScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov_labels" => Ok(SynthScheme::MarkovLabels),
            "lexical_labels" => Ok(SynthScheme::LexicalLabels),
            "mixed" => Ok(SynthScheme::Mixed),
            _ => Err(Error::invalid(format!("unknown synth scheme {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSizes {
    pub conversations: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    /// Filler words per utterance, before cue words are added.
    pub min_fillers: usize,
    pub max_fillers: usize,
    pub labels: usize,
    pub filler_vocab: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        SynthSizes {
            conversations: 100,
            min_utterances: 3,
            max_utterances: 8,
            min_fillers: 2,
            max_fillers: 5,
            labels: 4,
            filler_vocab: 30,
        }
    }
}

const MARKOV_CYCLE: f64 = 0.9;
const MIXED_CYCLE: f64 = 0.7;
const MARKOV_CUE: f64 = 0.6;
/// Chance of an extra keyword naming some other label, so a keyword alone
/// is only weak evidence.
const MARKOV_DISTRACTOR: f64 = 0.6;
const MIXED_CUE: f64 = 0.75;

/// Label transition matrix the generator samples from (`[from][to]`).
pub fn transition_matrix(scheme: SynthScheme, k: usize) -> Vec<Vec<f64>> {
    let cycle = match scheme {
        SynthScheme::LexicalLabels => return vec![vec![1.0 / k as f64; k]; k],
        SynthScheme::MarkovLabels => MARKOV_CYCLE,
        SynthScheme::Mixed => MIXED_CYCLE,
    };
    if k == 1 {
        return vec![vec![1.0]];
    }
    let rest = (1.0 - cycle) / (k - 1) as f64;
    (0..k)
        .map(|a| (0..k).map(|b| if b == (a + 1) % k { cycle } else { rest }).collect())
        .collect()
}

pub fn label_name(i: usize) -> String {
    format!("da{i}")
}

/// The keyword that names label `i` in `lexical_labels` and `markov_labels`.
pub fn keyword(i: usize) -> String {
    format!("kw{i}")
}

fn sample(weights: &[f64], rng: &mut impl Rng) -> usize {
    let mut u = rng.gen::<f64>();
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Deterministic in `seed`. Every token gets a POS-like tag so the POS
/// extension can run on synthetic data.
pub fn synth_corpus(scheme: SynthScheme, sizes: SynthSizes, seed: u64) -> Result<Corpus> {
    let s = sizes;
    if s.conversations == 0
        || s.min_utterances == 0
        || s.min_utterances > s.max_utterances
        || s.min_fillers > s.max_fillers
        || s.labels == 0
        || s.filler_vocab == 0
    {
        return Err(Error::invalid(format!("invalid synth sizes {s:?}")));
    }
    if scheme == SynthScheme::Mixed && s.labels % 2 != 0 {
        return Err(Error::invalid("mixed scheme needs an even label count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trans = transition_matrix(scheme, s.labels);
    let conversations = (0..s.conversations)
        .map(|ci| {
            let r = rng.gen_range(s.min_utterances..=s.max_utterances);
            let mut y = rng.gen_range(0..s.labels);
            let utterances = (0..r)
                .map(|j| {
                    if j > 0 {
                        y = sample(&trans[y], &mut rng);
                    }
                    utterance(scheme, &s, y, &mut rng)
                })
                .collect();
            Conversation {
                id: format!("{}-{ci:05}", scheme_tag(scheme)),
                utterances,
            }
        })
        .collect();
    Corpus::new(conversations, Split::Train)
}

fn scheme_tag(scheme: SynthScheme) -> &'static str {
    match scheme {
        SynthScheme::MarkovLabels => "markov",
        SynthScheme::LexicalLabels => "lexical",
        SynthScheme::Mixed => "mixed",
    }
}

fn utterance(scheme: SynthScheme, s: &SynthSizes, y: usize, rng: &mut ChaCha8Rng) -> Utterance {
    let n = rng.gen_range(s.min_fillers..=s.max_fillers);
    let mut words: Vec<(String, &'static str)> = (0..n)
        .map(|_| {
            let w = rng.gen_range(0..s.filler_vocab);
            (format!("w{w}"), ["NN", "DT", "JJ", "RB"][w % 4])
        })
        .collect();
    let insert = |words: &mut Vec<(String, &'static str)>, w: String, tag: &'static str, rng: &mut ChaCha8Rng| {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, (w, tag));
    };
    match scheme {
        SynthScheme::LexicalLabels => insert(&mut words, keyword(y), "VB", rng),
        SynthScheme::MarkovLabels => {
            if rng.gen_bool(MARKOV_CUE) {
                insert(&mut words, keyword(y), "VB", rng);
            }
            if s.labels > 1 && rng.gen_bool(MARKOV_DISTRACTOR) {
                let other = (y + rng.gen_range(1..s.labels)) % s.labels;
                insert(&mut words, keyword(other), "VB", rng);
            }
        }
        SynthScheme::Mixed => {
            if rng.gen_bool(MIXED_CUE) {
                let (topic, order) = (y / 2, y % 2);
                let mut markers = ["mx", "my"];
                if order == 1 {
                    markers.reverse();
                }
                // two ordered positions in the final sequence
                let total = words.len() + 2;
                let i = rng.gen_range(0..total - 1);
                let j = rng.gen_range(i + 1..total);
                words.insert(i, (markers[0].to_string(), "IN"));
                words.insert(j, (markers[1].to_string(), "IN"));
                insert(&mut words, format!("topic{topic}"), "VB", rng);
            }
        }
    }
    if words.is_empty() {
        words.push((format!("w{}", rng.gen_range(0..s.filler_vocab)), "NN"));
    }
    let (tokens, pos): (Vec<String>, Vec<String>) = words.into_iter().map(|(w, t)| (w, t.to_string())).unzip();
    Utterance {
        tokens,
        label: label_name(y),
        pos: Some(pos),
    }
}
