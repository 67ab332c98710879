//! Top-n answer selection, question accuracy and score ensembles.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-option scores of one question group, ordered by option index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub group_id: String,
    pub scores: Vec<(usize, f64)>,
    pub n_select: usize,
}

impl GroupScores {
    /// Builds a group from scores listed in option order `0..n`.
    pub fn from_dense(group_id: impl Into<String>, scores: &[f64], n_select: usize) -> Result<Self> {
        let gs = GroupScores {
            group_id: group_id.into(),
            scores: scores.iter().copied().enumerate().collect(),
            n_select,
        };
        gs.validate()?;
        Ok(gs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Input(format!(
                "group {}: option indices must be unique and increasing",
                self.group_id
            )));
        }
        if let Some((i, g)) = self.scores.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Numeric(format!("group {}: option {i} has score {g}", self.group_id)));
        }
        if self.n_select == 0 || self.n_select > self.scores.len() {
            return Err(Error::Usage(format!(
                "group {}: n_select {} outside 1..={}",
                self.group_id,
                self.n_select,
                self.scores.len()
            )));
        }
        Ok(())
    }

    pub fn option_indices(&self) -> Vec<usize> {
        self.scores.iter().map(|&(i, _)| i).collect()
    }
}

/// The `n_select` highest-scoring options; exact ties go to the lower index.
pub fn select_top_n(gs: &GroupScores) -> Result<BTreeSet<usize>> {
    gs.validate()?;
    let mut order: Vec<&(usize, f64)> = gs.scores.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(order.iter().take(gs.n_select).map(|&&(i, _)| i).collect())
}

pub type Selections = BTreeMap<String, BTreeSet<usize>>;

/// Fraction of groups whose predicted set equals the gold set exactly.
pub fn question_accuracy(predictions: &Selections, gold: &Selections) -> Result<Ratio<u64>> {
    let missing_pred: Vec<&str> = gold.keys().filter(|k| !predictions.contains_key(*k)).map(String::as_str).collect();
    let missing_gold: Vec<&str> = predictions.keys().filter(|k| !gold.contains_key(*k)).map(String::as_str).collect();
    if !missing_pred.is_empty() || !missing_gold.is_empty() {
        return Err(Error::Evaluation(format!(
            "group keys differ; no prediction for [{}]; no gold for [{}]",
            missing_pred.join(", "),
            missing_gold.join(", ")
        )));
    }
    if gold.is_empty() {
        return Err(Error::Evaluation("no groups to score".into()));
    }
    let correct = gold.iter().filter(|(k, g)| predictions[*k] == **g).count() as u64;
    Ok(Ratio::new(correct, gold.len() as u64))
}

pub fn ratio_to_f64(r: &Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn check_same_options(runs: &[GroupScores]) -> Result<()> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Usage("ensemble needs at least one run".into()))?;
    let options = first.option_indices();
    for r in &runs[1..] {
        if r.group_id != first.group_id || r.option_indices() != options || r.n_select != first.n_select {
            return Err(Error::Usage(format!(
                "ensemble runs disagree on group {} (options {:?} vs {:?})",
                first.group_id,
                options,
                r.option_indices()
            )));
        }
    }
    Ok(())
}

/// Per-option arithmetic mean of the scores across runs, accumulated as a
/// running mean so that identical runs reproduce their scores exactly.
pub fn ensemble_scores(runs: &[GroupScores]) -> Result<GroupScores> {
    check_same_options(runs)?;
    let first = &runs[0];
    let scores = (0..first.scores.len())
        .map(|j| {
            let mean = runs
                .iter()
                .enumerate()
                .fold(0.0, |m, (r, run)| m + (run.scores[j].1 - m) / (r + 1) as f64);
            (first.scores[j].0, mean)
        })
        .collect();
    Ok(GroupScores {
        group_id: first.group_id.clone(),
        scores,
        n_select: first.n_select,
    })
}

/// Majority vote over each run's top-n selection. Each selected option gets
/// one vote per run; the `n_select` most-voted options win, ties toward the
/// lower index.
pub fn ensemble_vote(runs: &[GroupScores]) -> Result<BTreeSet<usize>> {
    check_same_options(runs)?;
    let first = &runs[0];
    let mut votes: BTreeMap<usize, f64> = first.scores.iter().map(|&(i, _)| (i, 0.0)).collect();
    for r in runs {
        for i in select_top_n(r)? {
            *votes.get_mut(&i).expect("same option set") += 1.0;
        }
    }
    select_top_n(&GroupScores {
        group_id: first.group_id.clone(),
        scores: votes.into_iter().collect(),
        n_select: first.n_select,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnsembleMethod {
    #[default]
    Mean,
    Vote,
}

impl std::str::FromStr for EnsembleMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(EnsembleMethod::Mean),
            "vote" => Ok(EnsembleMethod::Vote),
            _ => Err(Error::Usage(format!("ensemble method must be mean or vote, got `{s}`"))),
        }
    }
}

/// Combines several score files group by group. Every file must list the
/// same groups; the output keeps the group order of the first file.
pub fn ensemble_files(files: &[Vec<GroupScores>], method: EnsembleMethod) -> Result<Vec<(GroupScores, BTreeSet<usize>)>> {
    let first = files.first().ok_or_else(|| Error::Usage("ensemble needs at least one score file".into()))?;
    let indexed: Vec<BTreeMap<&str, &GroupScores>> = files
        .iter()
        .map(|f| f.iter().map(|g| (g.group_id.as_str(), g)).collect())
        .collect();
    first
        .iter()
        .map(|g| {
            let runs = indexed
                .iter()
                .enumerate()
                .map(|(fi, idx)| {
                    idx.get(g.group_id.as_str())
                        .map(|&r| r.clone())
                        .ok_or_else(|| Error::Usage(format!("score file {fi} has no group {}", g.group_id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let merged = ensemble_scores(&runs)?;
            let pick = match method {
                EnsembleMethod::Mean => select_top_n(&merged)?,
                EnsembleMethod::Vote => ensemble_vote(&runs)?,
            };
            Ok((merged, pick))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ScoreLine {
    group_id: String,
    scores: Vec<f64>,
    n_select: usize,
}

/// One JSON object per line: `{group_id, scores, n_select}` with scores in
/// option order.
pub fn write_scores<W: Write>(mut w: W, groups: &[GroupScores]) -> std::io::Result<()> {
    for g in groups {
        let line = ScoreLine {
            group_id: g.group_id.clone(),
            scores: g.scores.iter().map(|&(_, s)| s).collect(),
            n_select: g.n_select,
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_scores<R: BufRead>(r: R) -> Result<Vec<GroupScores>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ScoreLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(GroupScores::from_dense(s.group_id, &s.scores, s.n_select)?);
    }
    Ok(out)
}

/// `group_id<TAB>i,j,...` per line.
pub fn write_predictions<W: Write>(mut w: W, preds: &[(String, BTreeSet<usize>)]) -> std::io::Result<()> {
    for (g, set) in preds {
        let idx: Vec<String> = set.iter().map(usize::to_string).collect();
        writeln!(w, "{g}\t{}", idx.join(","))?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Selections> {
    let mut out = Selections::new();
    for (n, line) in r.lines().enumerate() {
        let parse_err = |message: String| Error::Parse { line: n + 1, message };
        let line = line.map_err(|e| parse_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let (g, rest) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected group_id<TAB>indices".into()))?;
        let set = rest
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|e| parse_err(format!("bad index `{t}`: {e}"))))
            .collect::<Result<BTreeSet<_>>>()?;
        out.insert(g.to_string(), set);
    }
    Ok(out)
}
