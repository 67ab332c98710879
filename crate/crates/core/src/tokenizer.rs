//! Word-level vocabulary and `[CLS] P [SEP] Q [SEP] A [SEP]` encoding.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::corpus::BinaryInstance;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercases, splits on whitespace and strips punctuation at token edges.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Rebuilds a vocabulary from its tokens in id order.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Input("vocabulary must start with the reserved tokens".into()));
        }
        let v = Vocab::from_tokens(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::Input("duplicate token in vocabulary".into()));
        }
        Ok(v)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Id of an already-normalised token, `UNK` if absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn ids(&self, text: &str) -> Vec<usize> {
        normalize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Writes `token<TAB>id` lines, reserved ids first.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| bad("expected token<TAB>id"))?;
            let id: usize = id.parse().map_err(|_| bad("id is not an integer"))?;
            if id != tokens.len() {
                return Err(bad("ids must be dense and ascending"));
            }
            if id < RESERVED.len() && tok != RESERVED[id] {
                return Err(bad("reserved ids must come first"));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() {
            return Err(Error::Parse {
                line: tokens.len() + 1,
                message: "vocabulary is missing reserved tokens".into(),
            });
        }
        let v = Vocab::from_tokens(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::Parse {
                line: 0,
                message: "duplicate token in vocabulary".into(),
            });
        }
        Ok(v)
    }
}

/// Counts tokens over passages, questions and answers of every instance.
///
/// Tokens rarer than `min_freq` are dropped; the rest are ranked by
/// frequency (ties broken lexicographically) and cut to `max_size` total
/// entries including the four reserved ones.
pub fn build_vocab(corpus: &[BinaryInstance], min_freq: usize, max_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Usage("cannot build a vocabulary from an empty corpus".into()));
    }
    if max_size <= RESERVED.len() {
        return Err(Error::Usage(format!("max_size must exceed {}", RESERVED.len())));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for inst in corpus {
        for text in [&inst.passage, &inst.question, &inst.answer] {
            for tok in normalize(text) {
                *freq.entry(tok).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED.len());
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Ok(Vocab::from_tokens(tokens))
}

/// Which end of the passage survives truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truncation {
    /// Keep the start of the passage, dropping tokens from its end.
    #[default]
    Head,
    /// Keep the end of the passage.
    Tail,
}

impl FromStr for Truncation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Truncation::Head),
            "tail" => Ok(Truncation::Tail),
            _ => Err(Error::Config(format!("truncation must be head or tail, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub true_length: usize,
    pub cls_position: usize,
}

pub fn encode_triplet(passage: &str, question: &str, answer: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    encode_triplet_with(passage, question, answer, vocab, max_len, Truncation::Head)
}

/// Encodes one (passage, question, answer) triplet into `max_len` ids.
///
/// Passage tokens are dropped first, then question tokens from the end.
/// The answer and the four special tokens are never truncated.
pub fn encode_triplet_with(
    passage: &str,
    question: &str,
    answer: &str,
    vocab: &Vocab,
    max_len: usize,
    truncation: Truncation,
) -> Result<TokenSequence> {
    let p = vocab.ids(passage);
    let q = vocab.ids(question);
    let a = vocab.ids(answer);
    let fixed = a.len() + RESERVED.len();
    if fixed > max_len {
        return Err(Error::Encode(format!(
            "sequence budget exhausted: answer needs {fixed} of {max_len} positions"
        )));
    }
    let budget = max_len - fixed;
    let q_keep = q.len().min(budget);
    let p_keep = p.len().min(budget - q_keep);
    let p_slice = match truncation {
        Truncation::Head => &p[..p_keep],
        Truncation::Tail => &p[p.len() - p_keep..],
    };

    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend_from_slice(p_slice);
    ids.push(SEP);
    ids.extend_from_slice(&q[..q_keep]);
    ids.push(SEP);
    ids.extend_from_slice(&a);
    ids.push(SEP);
    let true_length = ids.len();
    ids.resize(max_len, PAD);
    let attention_mask = (0..max_len).map(|i| u8::from(i < true_length)).collect();
    Ok(TokenSequence {
        ids,
        attention_mask,
        true_length,
        cls_position: 0,
    })
}

pub fn encode_instance(inst: &BinaryInstance, vocab: &Vocab, max_len: usize, truncation: Truncation) -> Result<TokenSequence> {
    encode_triplet_with(&inst.passage, &inst.question, &inst.answer, vocab, max_len, truncation)
}
