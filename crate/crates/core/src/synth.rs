//! Synthetic keyword questions: the correct option is the only option whose
//! keyword occurs in the passage.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{MCExample, MCQuestion, Source};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SynthStyle {
    /// Plain prose passage, exam-style question.
    #[default]
    Exam,
    /// Two-speaker dialogue passage, different question wording.
    Dialogue,
}

impl std::str::FromStr for SynthStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exam" => Ok(SynthStyle::Exam),
            "dialogue" => Ok(SynthStyle::Dialogue),
            _ => Err(Error::Usage(format!("synth style must be exam or dialogue, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub questions: usize,
    pub options: usize,
    pub questions_per_passage: usize,
    pub filler_words: usize,
    pub keyword_pool: usize,
    pub filler_pool: usize,
    pub style: SynthStyle,
    pub seed: u64,
    /// Prefix for passage ids, so several generated corpora can be mixed.
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            questions: 100,
            options: 4,
            questions_per_passage: 1,
            filler_words: 3,
            keyword_pool: 60,
            filler_pool: 30,
            style: SynthStyle::Exam,
            seed: 0,
            id_prefix: "syn".into(),
        }
    }
}

pub fn keyword(i: usize) -> String {
    format!("key{i}")
}

fn filler(i: usize) -> String {
    format!("fill{i}")
}

/// Generates `cfg.questions` questions grouped into passages of
/// `cfg.questions_per_passage` questions each (the last passage may hold
/// fewer). Each question has its own keyword in the passage; distractors
/// are keywords absent from it.
pub fn keyword_task(cfg: &SynthConfig) -> Result<Vec<MCExample>> {
    let qpp = cfg.questions_per_passage;
    if cfg.options < 2 || qpp == 0 || cfg.filler_pool == 0 {
        return Err(Error::Usage("need at least 2 options, 1 question per passage and 1 filler word".into()));
    }
    if cfg.keyword_pool < qpp + cfg.options - 1 {
        return Err(Error::Usage(format!(
            "keyword pool {} too small for {qpp} questions per passage with {} options",
            cfg.keyword_pool, cfg.options
        )));
    }
    let source = match cfg.style {
        SynthStyle::Exam => Source::Race,
        SynthStyle::Dialogue => Source::Dream,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool: Vec<usize> = (0..cfg.keyword_pool).collect();
    let mut out = Vec::new();
    let mut remaining = cfg.questions;
    while remaining > 0 {
        let nq = remaining.min(qpp);
        remaining -= nq;
        let chosen: Vec<usize> = pool.choose_multiple(&mut rng, nq).copied().collect();

        let mut words: Vec<String> = (0..cfg.filler_words).map(|_| filler(rng.gen_range(0..cfg.filler_pool))).collect();
        for &k in &chosen {
            let at = rng.gen_range(0..=words.len());
            words.insert(at, keyword(k));
        }
        let passage = match cfg.style {
            SynthStyle::Exam => format!("{} .", words.join(" ")),
            SynthStyle::Dialogue => {
                let half = words.len() / 2;
                format!("man: {} . woman: {} .", words[..half].join(" "), words[half..].join(" "))
            }
        };

        let absent: Vec<usize> = pool.iter().copied().filter(|k| !chosen.contains(k)).collect();
        let questions = chosen
            .iter()
            .map(|&k| {
                let mut options: Vec<String> = absent.choose_multiple(&mut rng, cfg.options - 1).map(|&d| keyword(d)).collect();
                let gold_index = rng.gen_range(0..cfg.options);
                options.insert(gold_index, keyword(k));
                let question = match cfg.style {
                    SynthStyle::Exam => "which word appears in the passage ?",
                    SynthStyle::Dialogue => "what did the speakers mention ?",
                };
                MCQuestion {
                    question: question.into(),
                    options,
                    gold_index,
                }
            })
            .collect();
        out.push(MCExample {
            passage_id: format!("{}-{}", cfg.id_prefix, out.len()),
            passage,
            questions,
            source,
        });
    }
    Ok(out)
}
