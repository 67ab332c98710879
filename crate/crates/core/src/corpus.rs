//! Dataset parsing, normalisation and the multi-choice to binary rebuild.
//!
//! Every source format is line-delimited JSON, one record per line:
//!
//! | format      | record                                                                  |
//! |-------------|-------------------------------------------------------------------------|
//! | `race`      | `{id, article, questions: [{question, options: [..], answer: "A".."Z"}]}` |
//! | `dream`     | `{id, dialogue: [turns], questions: [{question, choice: [..], answer}]}`  |
//! | `arc`       | `{id, question, choices: [{text, label}], answerKey, para?}`              |
//! | `squad2pos` | `{context, question, answer_text}`                                        |
//! | `crawl`     | `{passage, question, options: [..], gold}`                                |
//! | `unified`   | `{group_id, option_index, passage, question, answer, label, source}`      |
//!
//! Only `unified` round-trips. The source formats are one-way: dialogue turns
//! are joined with newlines, ARC items without a `para` use the question stem
//! as their passage, and SQuAD records produce a single positive instance.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Race,
    Dream,
    Arc,
    Squad2pos,
    Crawl,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Race => "race",
            Source::Dream => "dream",
            Source::Arc => "arc",
            Source::Squad2pos => "squad2pos",
            Source::Crawl => "crawl",
        }
    }
}

/// Input file format tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Source(Source),
    Unified,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "race" => Format::Source(Source::Race),
            "dream" => Format::Source(Source::Dream),
            "arc" => Format::Source(Source::Arc),
            "squad2pos" => Format::Source(Source::Squad2pos),
            "crawl" => Format::Source(Source::Crawl),
            "unified" => Format::Unified,
            other => {
                return Err(Error::Usage(format!(
                    "unknown format `{other}` (expected race, dream, arc, squad2pos, crawl or unified)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MCQuestion {
    pub question: String,
    pub options: Vec<String>,
    pub gold_index: usize,
}

/// A passage with its questions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MCExample {
    pub passage_id: String,
    pub passage: String,
    pub questions: Vec<MCQuestion>,
    pub source: Source,
}

impl MCExample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.passage.trim().is_empty() {
            return Err("empty passage".into());
        }
        if self.questions.is_empty() {
            return Err("passage has no questions".into());
        }
        for q in &self.questions {
            if q.options.len() < 2 {
                return Err(format!("question `{}` has fewer than 2 options", q.question));
            }
            if q.gold_index >= q.options.len() {
                return Err("gold index out of range".into());
            }
        }
        Ok(())
    }
}

/// One (passage, question, candidate, label) unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryInstance {
    pub group_id: String,
    pub option_index: usize,
    pub passage: String,
    pub question: String,
    pub answer: String,
    pub label: u8,
    pub source: Source,
}

impl BinaryInstance {
    /// The passage part of the group id (everything before the last `#`).
    pub fn passage_key(&self) -> &str {
        self.group_id
            .rsplit_once('#')
            .map_or(self.group_id.as_str(), |(p, _)| p)
    }
}

pub fn group_id(passage_id: &str, question_ordinal: usize) -> String {
    format!("{passage_id}#{question_ordinal}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parsed {
    MultiChoice(Vec<MCExample>),
    Binary(Vec<BinaryInstance>),
}

impl Parsed {
    /// Flattens to binary instances, rebuilding multi-choice records.
    pub fn into_binary(self) -> Vec<BinaryInstance> {
        match self {
            Parsed::MultiChoice(exs) => exs.iter().flat_map(to_binary_instances).collect(),
            Parsed::Binary(b) => b,
        }
    }
}

#[derive(Deserialize)]
struct RaceRecord {
    id: String,
    article: String,
    questions: Vec<RaceQuestion>,
}

#[derive(Deserialize)]
struct RaceQuestion {
    question: String,
    options: Vec<String>,
    answer: String,
}

#[derive(Deserialize)]
struct DreamRecord {
    id: String,
    dialogue: Vec<String>,
    questions: Vec<DreamQuestion>,
}

#[derive(Deserialize)]
struct DreamQuestion {
    question: String,
    choice: Vec<String>,
    answer: String,
}

#[derive(Deserialize)]
struct ArcRecord {
    id: String,
    question: String,
    choices: Vec<ArcChoice>,
    #[serde(rename = "answerKey")]
    answer_key: String,
    #[serde(default)]
    para: Option<String>,
}

#[derive(Deserialize)]
struct ArcChoice {
    text: String,
    label: String,
}

#[derive(Deserialize)]
struct SquadRecord {
    context: String,
    question: String,
    answer_text: String,
}

#[derive(Deserialize)]
struct CrawlRecord {
    passage: String,
    question: String,
    options: Vec<String>,
    gold: usize,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn decode<T: DeserializeOwned>(line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| parse_err(line_no, e.to_string()))
}

fn letter_index(line: usize, answer: &str, n: usize) -> Result<usize> {
    let mut chars = answer.trim().chars();
    let idx = match (chars.next(), chars.next()) {
        (Some(c @ 'A'..='Z'), None) => c as usize - 'A' as usize,
        _ => return Err(parse_err(line, format!("answer `{answer}` is not a letter A-Z"))),
    };
    if idx >= n {
        return Err(parse_err(line, "gold index out of range"));
    }
    Ok(idx)
}

fn checked(line: usize, ex: MCExample) -> Result<MCExample> {
    ex.validate().map_err(|m| parse_err(line, m))?;
    Ok(ex)
}

fn parse_record(line_no: usize, line: &str, format: Format) -> Result<Record> {
    let src = match format {
        Format::Unified => {
            let inst: BinaryInstance = decode(line_no, line)?;
            if inst.label > 1 {
                return Err(parse_err(line_no, format!("label {} not in {{0,1}}", inst.label)));
            }
            return Ok(Record::Binary(inst));
        }
        Format::Source(s) => s,
    };
    let ex = match src {
        Source::Race => {
            let r: RaceRecord = decode(line_no, line)?;
            let questions = r
                .questions
                .into_iter()
                .map(|q| {
                    let gold_index = letter_index(line_no, &q.answer, q.options.len())?;
                    Ok(MCQuestion {
                        question: q.question,
                        options: q.options,
                        gold_index,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            MCExample {
                passage_id: r.id,
                passage: r.article,
                questions,
                source: Source::Race,
            }
        }
        Source::Dream => {
            let r: DreamRecord = decode(line_no, line)?;
            let questions = r
                .questions
                .into_iter()
                .map(|q| {
                    let gold_index = q.choice.iter().position(|c| *c == q.answer).ok_or_else(|| {
                        parse_err(line_no, format!("answer `{}` is not among the choices", q.answer))
                    })?;
                    Ok(MCQuestion {
                        question: q.question,
                        options: q.choice,
                        gold_index,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            MCExample {
                passage_id: r.id,
                passage: r.dialogue.join("\n"),
                questions,
                source: Source::Dream,
            }
        }
        Source::Arc => {
            let r: ArcRecord = decode(line_no, line)?;
            let gold_index = r
                .choices
                .iter()
                .position(|c| c.label == r.answer_key)
                .ok_or_else(|| parse_err(line_no, format!("answerKey `{}` matches no choice label", r.answer_key)))?;
            let passage = r.para.filter(|p| !p.trim().is_empty()).unwrap_or_else(|| r.question.clone());
            MCExample {
                passage_id: r.id,
                passage,
                questions: vec![MCQuestion {
                    question: r.question,
                    options: r.choices.into_iter().map(|c| c.text).collect(),
                    gold_index,
                }],
                source: Source::Arc,
            }
        }
        Source::Crawl => {
            let r: CrawlRecord = decode(line_no, line)?;
            if r.gold >= r.options.len() {
                return Err(parse_err(line_no, "gold index out of range"));
            }
            MCExample {
                passage_id: format!("crawl-{line_no}"),
                passage: r.passage,
                questions: vec![MCQuestion {
                    question: r.question,
                    options: r.options,
                    gold_index: r.gold,
                }],
                source: Source::Crawl,
            }
        }
        Source::Squad2pos => {
            let r: SquadRecord = decode(line_no, line)?;
            if r.context.trim().is_empty() {
                return Err(parse_err(line_no, "empty context"));
            }
            return Ok(Record::Binary(BinaryInstance {
                group_id: group_id(&format!("squad2pos-{line_no}"), 0),
                option_index: 0,
                passage: r.context,
                question: r.question,
                answer: r.answer_text,
                label: 1,
                source: Source::Squad2pos,
            }));
        }
    };
    Ok(Record::MultiChoice(checked(line_no, ex)?))
}

enum Record {
    MultiChoice(MCExample),
    Binary(BinaryInstance),
}

/// Parses a line-delimited stream. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_dataset<R: BufRead>(reader: R, format: Format) -> Result<Parsed> {
    let mut mc = Vec::new();
    let mut bin = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| parse_err(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(line_no, &line, format)? {
            Record::MultiChoice(ex) => mc.push(ex),
            Record::Binary(b) => bin.push(b),
        }
    }
    Ok(match format {
        Format::Unified | Format::Source(Source::Squad2pos) => Parsed::Binary(bin),
        _ => Parsed::MultiChoice(mc),
    })
}

pub fn parse_str(text: &str, format: Format) -> Result<Parsed> {
    parse_dataset(text.as_bytes(), format)
}

/// One instance per (question, option), labelled 1 on the gold option.
pub fn to_binary_instances(ex: &MCExample) -> Vec<BinaryInstance> {
    let mut out = Vec::new();
    for (qi, q) in ex.questions.iter().enumerate() {
        let gid = group_id(&ex.passage_id, qi);
        for (oi, opt) in q.options.iter().enumerate() {
            out.push(BinaryInstance {
                group_id: gid.clone(),
                option_index: oi,
                passage: ex.passage.clone(),
                question: q.question.clone(),
                answer: opt.clone(),
                label: u8::from(oi == q.gold_index),
                source: ex.source,
            });
        }
    }
    out
}

pub fn write_unified<W: Write>(mut w: W, instances: &[BinaryInstance]) -> std::io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Concatenates and shuffles; the permutation depends only on `seed`.
pub fn mix_corpora(corpora: &[Vec<BinaryInstance>], seed: u64) -> Result<Vec<BinaryInstance>> {
    if corpora.is_empty() {
        return Err(Error::Usage("mix_corpora needs at least one corpus".into()));
    }
    let mut all: Vec<BinaryInstance> = corpora.iter().flatten().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    Ok(all)
}

/// Instances of one question, ordered by option index.
#[derive(Debug, Clone, PartialEq)]
pub struct Group<'a> {
    pub group_id: &'a str,
    pub members: Vec<&'a BinaryInstance>,
}

impl Group<'_> {
    pub fn gold(&self) -> Vec<usize> {
        self.members
            .iter()
            .filter(|m| m.label == 1)
            .map(|m| m.option_index)
            .collect()
    }
}

/// Groups instances by `group_id` in order of first appearance.
pub fn group_instances(instances: &[BinaryInstance]) -> Vec<Group<'_>> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Group<'_>> = Vec::new();
    for inst in instances {
        let slot = *index.entry(inst.group_id.as_str()).or_insert_with(|| {
            groups.push(Group {
                group_id: &inst.group_id,
                members: Vec::new(),
            });
            groups.len() - 1
        });
        groups[slot].members.push(inst);
    }
    for g in &mut groups {
        g.members.sort_by_key(|m| m.option_index);
    }
    groups
}

/// Whitespace token count.
pub fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Dataset summary in the style of a data-statistics table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStats {
    pub n_articles: u64,
    pub n_questions: u64,
    pub answers_per_question: Ratio<u64>,
    pub avg_answer_len: Ratio<u64>,
    pub avg_passage_len: Ratio<u64>,
    pub n_binary_instances: u64,
}

fn ratio(num: u64, den: u64) -> Ratio<u64> {
    if den == 0 {
        Ratio::from_integer(0)
    } else {
        Ratio::new(num, den)
    }
}

/// Renders a non-negative rational rounded half-up to one decimal.
pub fn one_decimal(r: &Ratio<u64>) -> String {
    let (n, d) = (*r.numer() as u128, *r.denom() as u128);
    let tenths = (n * 20 + d) / (2 * d);
    format!("{}.{}", tenths / 10, tenths % 10)
}

impl CorpusStats {
    pub fn from_examples(examples: &[MCExample]) -> Self {
        let n_articles = examples.len() as u64;
        let mut n_questions = 0;
        let mut n_options = 0;
        let mut answer_words = 0;
        let mut passage_words = 0;
        for ex in examples {
            passage_words += word_count(&ex.passage);
            for q in &ex.questions {
                n_questions += 1;
                n_options += q.options.len() as u64;
                answer_words += q.options.iter().map(|o| word_count(o)).sum::<u64>();
            }
        }
        CorpusStats {
            n_articles,
            n_questions,
            answers_per_question: ratio(n_options, n_questions),
            avg_answer_len: ratio(answer_words, n_options),
            avg_passage_len: ratio(passage_words, n_articles),
            n_binary_instances: n_options,
        }
    }

    pub fn from_instances(instances: &[BinaryInstance]) -> Self {
        let mut passages: HashMap<&str, u64> = HashMap::new();
        let mut groups: HashMap<&str, ()> = HashMap::new();
        let mut answer_words = 0;
        for inst in instances {
            passages
                .entry(inst.passage_key())
                .or_insert_with(|| word_count(&inst.passage));
            groups.insert(&inst.group_id, ());
            answer_words += word_count(&inst.answer);
        }
        let n = instances.len() as u64;
        let n_articles = passages.len() as u64;
        let n_questions = groups.len() as u64;
        CorpusStats {
            n_articles,
            n_questions,
            answers_per_question: ratio(n, n_questions),
            avg_answer_len: ratio(answer_words, n),
            avg_passage_len: ratio(passages.values().sum(), n_articles),
            n_binary_instances: n,
        }
    }

    pub fn from_parsed(parsed: &Parsed) -> Self {
        match parsed {
            Parsed::MultiChoice(e) => Self::from_examples(e),
            Parsed::Binary(b) => Self::from_instances(b),
        }
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "source documents\t{}", self.n_articles)?;
        writeln!(f, "total questions\t{}", self.n_questions)?;
        writeln!(f, "answers per question\t{}", one_decimal(&self.answers_per_question))?;
        writeln!(f, "average answer length\t{}", one_decimal(&self.avg_answer_len))?;
        writeln!(f, "avg. passage length\t{}", one_decimal(&self.avg_passage_len))?;
        write!(f, "binary training samples\t{}", self.n_binary_instances)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const RACE_TWO_QUESTIONS: &str = r#"{"id":"r1","article":"Tom went to the market. He bought apples.","questions":[{"question":"Where did Tom go?","options":["school","market","park","home"],"answer":"B"},{"question":"What did he buy?","options":["apples","pears","bread","milk"],"answer":"A"}]}"#;

    fn mc(n_questions: usize, n_options: usize) -> MCExample {
        MCExample {
            passage_id: "p".into(),
            passage: "some passage text".into(),
            questions: (0..n_questions)
                .map(|i| MCQuestion {
                    question: format!("q{i}"),
                    options: (0..n_options).map(|o| format!("opt {o}")).collect(),
                    gold_index: i % n_options,
                })
                .collect(),
            source: Source::Race,
        }
    }

    #[test]
    fn race_record_yields_two_questions_of_four() {
        let Parsed::MultiChoice(exs) = parse_str(RACE_TWO_QUESTIONS, "race".parse().unwrap()).unwrap()
        else {
            panic!("race parses to multi-choice")
        };
        assert_eq!(exs.len(), 1);
        assert_eq!(exs[0].questions.len(), 2);
        assert!(exs[0].questions.iter().all(|q| q.options.len() == 4));
        assert_eq!(exs[0].questions[0].gold_index, 1);
    }

    #[test]
    fn squad_record_is_a_single_positive() {
        let line = r#"{"context":"The sky is blue.","question":"What colour is the sky?","answer_text":"blue"}"#;
        let Parsed::Binary(b) = parse_str(line, "squad2pos".parse().unwrap()).unwrap() else {
            panic!()
        };
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].label, 1);
        assert_eq!(b[0].answer, "blue");
    }

    #[test]
    fn out_of_range_letter_is_a_parse_error() {
        let line = r#"{"id":"x","article":"a b","questions":[{"question":"q","options":["1","2","3","4"],"answer":"E"}]}"#;
        let err = parse_str(&format!("\n{line}"), "race".parse().unwrap()).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("gold index out of range"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_field_names_line_and_field() {
        let line = r#"{"id":"x","questions":[]}"#;
        let err = parse_str(line, "race".parse().unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1") && msg.contains("article"), "{msg}");
    }

    #[test]
    fn unknown_format_is_usage_error() {
        assert!(matches!("squad".parse::<Format>(), Err(Error::Usage(_))));
    }

    #[test]
    fn dream_answer_must_match_a_choice() {
        let ok = r#"{"id":"d1","dialogue":["M: Hi.","W: Hello, want tea?"],"questions":[{"question":"What is offered?","choice":["tea","coffee","water"],"answer":"tea"}]}"#;
        let Parsed::MultiChoice(e) = parse_str(ok, "dream".parse().unwrap()).unwrap() else { panic!() };
        assert_eq!(e[0].passage, "M: Hi.\nW: Hello, want tea?");
        let bin = to_binary_instances(&e[0]);
        assert_eq!(bin.len(), 3);
        assert_eq!(bin.iter().filter(|b| b.label == 1).count(), 1);

        let bad = ok.replace(r#""answer":"tea""#, r#""answer":"juice""#);
        assert!(matches!(parse_str(&bad, "dream".parse().unwrap()), Err(Error::Parse { .. })));
    }

    #[test]
    fn arc_uses_answer_key_and_falls_back_to_stem() {
        let line = r#"{"id":"a1","question":"Which is a mammal?","choices":[{"text":"shark","label":"A"},{"text":"whale","label":"B"},{"text":"trout","label":"C"}],"answerKey":"B"}"#;
        let Parsed::MultiChoice(e) = parse_str(line, "arc".parse().unwrap()).unwrap() else { panic!() };
        assert_eq!(e[0].questions[0].gold_index, 1);
        assert_eq!(e[0].passage, "Which is a mammal?");
    }

    #[test]
    fn crawl_record() {
        let line = r#"{"passage":"p text","question":"q?","options":["a","b"],"gold":1}"#;
        let Parsed::MultiChoice(e) = parse_str(line, "crawl".parse().unwrap()).unwrap() else { panic!() };
        assert_eq!(e[0].passage_id, "crawl-1");
        let bad = line.replace("\"gold\":1", "\"gold\":2");
        assert!(parse_str(&bad, "crawl".parse().unwrap()).is_err());
    }

    #[test]
    fn binary_rebuild_labels_gold_option() {
        let mut ex = mc(1, 4);
        ex.questions[0].gold_index = 2;
        let b = to_binary_instances(&ex);
        let labels: Vec<u8> = b.iter().map(|i| i.label).collect();
        assert_eq!(labels, vec![0, 0, 1, 0]);
        assert!(b.iter().all(|i| i.group_id == "p#0"));
    }

    #[test]
    fn ten_questions_enumerate_to_forty_instances() {
        let ex = mc(10, 4);
        let b = to_binary_instances(&ex);
        // brute-force count over the fixture
        let mut expected = 0;
        let mut positives = 0;
        for q in &ex.questions {
            for oi in 0..q.options.len() {
                expected += 1;
                if oi == q.gold_index {
                    positives += 1;
                }
            }
        }
        assert_eq!(b.len(), expected);
        assert_eq!(expected, 40);
        assert_eq!(b.iter().filter(|i| i.label == 1).count(), positives);
        let groups = group_instances(&b);
        assert_eq!(groups.len(), 10);
        for g in groups {
            let idx: Vec<usize> = g.members.iter().map(|m| m.option_index).collect();
            assert_eq!(idx, vec![0, 1, 2, 3]);
        }
    }

    fn tiny(n: usize, tag: &str) -> Vec<BinaryInstance> {
        (0..n)
            .map(|i| BinaryInstance {
                group_id: group_id(tag, i),
                option_index: 0,
                passage: format!("{tag} passage"),
                question: "q".into(),
                answer: format!("a{i}"),
                label: 1,
                source: Source::Crawl,
            })
            .collect()
    }

    #[test]
    fn mixing_is_a_seeded_permutation() {
        let corpora = vec![tiny(3, "x"), tiny(5, "y")];
        let a = mix_corpora(&corpora, 7).unwrap();
        let b = mix_corpora(&corpora, 7).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_by(|l, r| l.group_id.cmp(&r.group_id));
        let mut union: Vec<_> = corpora.concat();
        union.sort_by(|l, r| l.group_id.cmp(&r.group_id));
        assert_eq!(sorted, union);
        // two fixed seeds colliding on 8 elements has probability 1/8!
        let c = mix_corpora(&corpora, 8).unwrap();
        assert_ne!(a, c);
        assert!(matches!(mix_corpora(&[], 1), Err(Error::Usage(_))));
    }

    #[test]
    fn stats_of_empty_and_fixture() {
        let empty = CorpusStats::from_examples(&[]);
        assert_eq!(empty.n_articles, 0);
        assert_eq!(empty.n_binary_instances, 0);
        assert_eq!(one_decimal(&empty.avg_passage_len), "0.0");
        assert_eq!(CorpusStats::from_instances(&[]), empty);

        let mut a = mc(2, 4);
        a.passage_id = "a".into();
        let mut b = mc(1, 4);
        b.passage_id = "b".into();
        let s = CorpusStats::from_examples(&[a.clone(), b.clone()]);
        assert_eq!((s.n_articles, s.n_questions, s.n_binary_instances), (2, 3, 12));
        assert_eq!(one_decimal(&s.answers_per_question), "4.0");
        assert_eq!(one_decimal(&s.avg_answer_len), "2.0");
        assert_eq!(one_decimal(&s.avg_passage_len), "3.0");

        let inst: Vec<_> = [a, b].iter().flat_map(to_binary_instances).collect();
        assert_eq!(CorpusStats::from_instances(&inst), s);
    }

    #[test]
    fn one_decimal_rounds_half_up() {
        assert_eq!(one_decimal(&Ratio::new(53, 10)), "5.3");
        assert_eq!(one_decimal(&Ratio::new(1, 20)), "0.1");
        assert_eq!(one_decimal(&Ratio::new(3219, 10)), "321.9");
        assert_eq!(one_decimal(&Ratio::new(2, 3)), "0.7");
    }

    fn arb_instance() -> impl Strategy<Value = BinaryInstance> {
        (
            "[a-z]{1,6}#[0-9]",
            0usize..5,
            "[ -~]{0,20}",
            "[ -~]{0,10}",
            "[ -~\\n\"\\\\]{0,10}",
            0u8..2,
            prop::sample::select(vec![Source::Race, Source::Dream, Source::Arc, Source::Squad2pos, Source::Crawl]),
        )
            .prop_map(|(group_id, option_index, passage, question, answer, label, source)| BinaryInstance {
                group_id,
                option_index,
                passage,
                question,
                answer,
                label,
                source,
            })
    }

    proptest! {
        #[test]
        fn unified_round_trip(xs in prop::collection::vec(arb_instance(), 0..8)) {
            let mut buf = Vec::new();
            write_unified(&mut buf, &xs).unwrap();
            let parsed = parse_dataset(&buf[..], Format::Unified).unwrap();
            prop_assert_eq!(parsed, Parsed::Binary(xs));
        }

        #[test]
        fn mixing_preserves_the_multiset(
            a in prop::collection::vec(arb_instance(), 0..10),
            b in prop::collection::vec(arb_instance(), 0..10),
            seed in any::<u64>(),
        ) {
            let mixed = mix_corpora(&[a.clone(), b.clone()], seed).unwrap();
            let key = |x: &BinaryInstance| serde_json::to_string(x).unwrap();
            let mut got: Vec<String> = mixed.iter().map(key).collect();
            let mut want: Vec<String> = a.iter().chain(&b).map(key).collect();
            got.sort();
            want.sort();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn rebuild_counts(n_q in 1usize..6, n_o in 2usize..6) {
            let ex = mc(n_q, n_o);
            let b = to_binary_instances(&ex);
            prop_assert_eq!(b.len(), n_q * n_o);
            prop_assert_eq!(b.iter().filter(|i| i.label == 1).count(), n_q);
        }

        #[test]
        fn squad_never_emits_negatives(ctx in "[a-z ]{1,30}[a-z]", q in "[a-z ?]{0,20}", a in "[a-z]{0,10}") {
            let line = serde_json::json!({"context": ctx, "question": q, "answer_text": a}).to_string();
            let text = format!("{line}\n{line}\n");
            let parsed = parse_str(&text, Format::Source(Source::Squad2pos)).unwrap();
            let b = parsed.into_binary();
            prop_assert_eq!(b.len(), 2);
            prop_assert!(b.iter().all(|i| i.label == 1));
        }
    }
}
