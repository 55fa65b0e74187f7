//! Conversations, their on-disk format, and everything needed to turn them
//! into padded index batches.
//!
//! A corpus file holds one JSON record per line:
//!
//! ```text
//! {"id": "c1", "utterances": [{"tokens": ["hi", "there"], "label": "greet", "pos": ["UH", "RB"]}]}
//! ```
//!
//! `pos` is optional but must match `tokens` in length when present.

mod batch;
mod embeddings;
mod synth;
mod vocab;

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, Batch, Padded};
pub use embeddings::{load_pretrained, Pretrained, OOV_INIT_RANGE};
pub use synth::{synth_corpus, transition_matrix, SynthScheme, SynthSizes};
pub use vocab::{Vocab, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.utterances.is_empty() {
            return Err(format!("conversation {:?} has no utterances", self.id));
        }
        for (j, u) in self.utterances.iter().enumerate() {
            if u.tokens.is_empty() {
                return Err(format!("conversation {:?} utterance {j} has no tokens", self.id));
            }
            if let Some(pos) = &u.pos {
                if pos.len() != u.tokens.len() {
                    return Err(format!(
                        "conversation {:?} utterance {j}: {} pos tags for {} tokens",
                        self.id,
                        pos.len(),
                        u.tokens.len()
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Ordered label set; index order is the order of insertion.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelMap {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelMap {
    fn from(labels: Vec<String>) -> Self {
        let mut m = LabelMap::default();
        for l in labels {
            m.insert(&l);
        }
        m
    }
}

impl From<LabelMap> for Vec<String> {
    fn from(m: LabelMap) -> Self {
        m.labels
    }
}

impl LabelMap {
    /// Explicit label order; duplicates are rejected.
    pub fn from_labels(labels: &[&str]) -> Result<Self> {
        let mut m = LabelMap::default();
        for l in labels {
            if m.get(l).is_some() {
                return Err(Error::invalid(format!("duplicate label {l:?}")));
            }
            m.insert(l);
        }
        Ok(m)
    }

    /// Labels in order of first appearance.
    pub fn first_appearance(conversations: &[Conversation]) -> Self {
        let mut m = LabelMap::default();
        for c in conversations {
            for u in &c.utterances {
                m.insert(&u.label);
            }
        }
        m
    }

    /// One label per line; blank lines ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m = LabelMap::default();
        for (i, line) in BufReader::new(crate::fsutil::open(path)?).lines().enumerate() {
            let line = line?;
            let l = line.trim();
            if l.is_empty() {
                continue;
            }
            if m.get(l).is_some() {
                return Err(Error::parse(path, i + 1, format!("duplicate label {l:?}")));
            }
            m.insert(l);
        }
        if m.is_empty() {
            return Err(Error::parse(path, 1, "label map is empty"));
        }
        Ok(m)
    }

    fn insert(&mut self, label: &str) -> usize {
        if let Some(&i) = self.index.get(label) {
            return i;
        }
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), self.labels.len() - 1);
        self.labels.len() - 1
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn names(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub conversations: Vec<Conversation>,
    /// Labels seen in this corpus, by first appearance.
    pub labels: LabelMap,
    pub split: Split,
}

impl Corpus {
    pub fn new(conversations: Vec<Conversation>, split: Split) -> Result<Self> {
        for c in &conversations {
            c.validate().map_err(Error::Data)?;
        }
        let labels = LabelMap::first_appearance(&conversations);
        Ok(Corpus {
            conversations,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    pub fn num_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    pub fn has_pos(&self) -> bool {
        self.conversations
            .iter()
            .all(|c| c.utterances.iter().all(|u| u.pos.is_some()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, |w| {
            for c in &self.conversations {
                serde_json::to_writer(&mut *w, c)?;
                writeln!(w)?;
            }
            Ok(())
        })
    }
}

/// Reads a corpus file, validating every record.
pub fn load_corpus(path: impl AsRef<Path>, split: Split) -> Result<Corpus> {
    let path = path.as_ref();
    let reader = BufReader::new(crate::fsutil::open(path)?);
    let mut conversations = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        conv.validate().map_err(|msg| Error::parse(path, i + 1, msg))?;
        conversations.push(conv);
    }
    Corpus::new(conversations, split)
}


/// Lower-cases, strips `!` and `,`, and splits on whitespace. An utterance
/// left with no tokens becomes the single token [`UNK_TOKEN`].
pub fn preprocess(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|&c| c != '!' && c != ',')
        .collect();
    let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        vec![UNK_TOKEN.to_string()]
    } else {
        tokens
    }
}

/// A conversation mapped to indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedConversation {
    pub id: String,
    pub tokens: Vec<Vec<usize>>,
    pub pos: Option<Vec<Vec<usize>>>,
    pub labels: Vec<usize>,
}

impl EncodedConversation {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Maps tokens (unknowns to UNK) and labels (unknowns rejected). When
/// `pos_vocab` is given every utterance must carry POS tags.
pub fn encode(
    corpus: &Corpus,
    vocab: &Vocab,
    labels: &LabelMap,
    pos_vocab: Option<&Vocab>,
) -> Result<Vec<EncodedConversation>> {
    corpus
        .conversations
        .iter()
        .map(|c| {
            let mut enc = EncodedConversation {
                id: c.id.clone(),
                tokens: Vec::with_capacity(c.len()),
                pos: pos_vocab.map(|_| Vec::with_capacity(c.len())),
                labels: Vec::with_capacity(c.len()),
            };
            for (j, u) in c.utterances.iter().enumerate() {
                let y = labels.get(&u.label).ok_or_else(|| {
                    Error::Data(format!("conversation {:?} utterance {j}: unknown label {:?}", c.id, u.label))
                })?;
                enc.labels.push(y);
                enc.tokens.push(u.tokens.iter().map(|t| vocab.get(t)).collect());
                if let (Some(pv), Some(out)) = (pos_vocab, enc.pos.as_mut()) {
                    let tags = u.pos.as_ref().ok_or_else(|| {
                        Error::Data(format!("conversation {:?} utterance {j} has no POS tags", c.id))
                    })?;
                    out.push(tags.iter().map(|t| pv.get(t)).collect());
                }
            }
            Ok(enc)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn preprocess_examples() {
        assert_eq!(preprocess("Hi, How are you?"), vec!["hi", "how", "are", "you?"]);
        assert_eq!(preprocess(""), vec![UNK_TOKEN]);
        assert_eq!(preprocess("YEAH!"), vec!["yeah"]);
        assert_eq!(preprocess(" ,! "), vec![UNK_TOKEN]);
    }

    proptest! {
        #[test]
        fn preprocess_is_idempotent(s in "[a-zA-Z0-9 ,!?.'ÄÖÜéß\t-]{0,40}") {
            let once = preprocess(&s);
            prop_assert_eq!(preprocess(&once.join(" ")), once);
        }
    }

    fn fixture() -> String {
        [
            r#"{"id": "a", "utterances": [{"tokens": ["hi"], "label": "greet"}, {"tokens": ["how", "are", "you"], "label": "q"}]}"#,
            "",
            r#"{"id": "b", "utterances": [{"tokens": ["fine"], "label": "ans", "pos": ["JJ"]}]}"#,
        ]
        .join("\n")
    }

    #[test]
    fn load_fixture_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, fixture()).unwrap();
        let c = load_corpus(&p, Split::Train).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.num_utterances(), 3);
        assert_eq!(c.labels.names(), &["greet", "q", "ans"]);
        let p2 = dir.path().join("c2.jsonl");
        c.save(&p2).unwrap();
        assert_eq!(load_corpus(&p2, Split::Train).unwrap(), c);
    }

    #[test]
    fn load_errors_carry_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let bad_pos = r#"{"id": "conv7", "utterances": [{"tokens": ["a", "b"], "label": "x", "pos": ["DT"]}]}"#;
        std::fs::write(&p, format!("{}\n{bad_pos}\n", fixture().lines().next().unwrap())).unwrap();
        let err = load_corpus(&p, Split::Train).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("conv7"), "{err}");

        std::fs::write(&p, r#"{"id": "e", "utterances": []}"#).unwrap();
        let err = load_corpus(&p, Split::Train).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");

        std::fs::write(&p, r#"{"id": "e", "utterances": [], "speaker": 3}"#).unwrap();
        let err = load_corpus(&p, Split::Train).unwrap_err().to_string();
        assert!(err.contains("unknown field"), "{err}");
    }

    #[test]
    fn label_map_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.txt");
        std::fs::write(&p, "sd\nb\n\nqy\n").unwrap();
        let m = LabelMap::load(&p).unwrap();
        assert_eq!(m.get("qy"), Some(2));
        std::fs::write(&p, "sd\nsd\n").unwrap();
        assert!(LabelMap::load(&p).is_err());
    }

    #[test]
    fn encode_maps_oov_to_unk_and_rejects_unknown_labels() {
        let c = Corpus::new(
            vec![Conversation {
                id: "x".into(),
                utterances: vec![Utterance {
                    tokens: vec!["seen".into(), "unseen".into()],
                    label: "a".into(),
                    pos: None,
                }],
            }],
            Split::Test,
        )
        .unwrap();
        let vocab = Vocab::from_tokens(vec!["seen".into()]);
        let labels = LabelMap::from_labels(&["b", "a"]).unwrap();
        let enc = encode(&c, &vocab, &labels, None).unwrap();
        assert_eq!(enc[0].tokens[0], vec![2, UNK]);
        assert_eq!(enc[0].labels, vec![1]);
        let only_b = LabelMap::from_labels(&["b"]).unwrap();
        assert!(matches!(encode(&c, &vocab, &only_b, None), Err(Error::Data(_))));
        assert!(matches!(encode(&c, &vocab, &labels, Some(&vocab)), Err(Error::Data(_))));
    }
}
