//! Hyper-parameter search: random sampling, successive halving and
//! Hyperband, driven by a controller that owns all trial state and a
//! bounded pool of worker slots that run objectives.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::exec::{with_slots, Execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Dimension {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    Choice { values: Vec<Value> },
}

/// Named dimensions, sampled in name order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct SearchSpace {
    pub dims: BTreeMap<String, Dimension>,
}

pub type Config = BTreeMap<String, Value>;

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, d) in &self.dims {
            let ok = match d {
                Dimension::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
                Dimension::LogUniform { lo, hi } => lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo < hi,
                Dimension::Choice { values } => !values.is_empty(),
            };
            if !ok {
                return Err(Error::Config(format!("search dimension `{name}` is invalid: {d:?}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let space: SearchSpace = serde_json::from_str(text).map_err(|e| Error::Config(format!("search space: {e}")))?;
        space.validate()?;
        Ok(space)
    }

    /// Learning rate, warmup and batch size.
    pub fn default_training() -> Self {
        let mut dims = BTreeMap::new();
        dims.insert("learning_rate".into(), Dimension::LogUniform { lo: 1e-4, hi: 3e-2 });
        dims.insert(
            "warmup_steps".into(),
            Dimension::Choice {
                values: vec![0.into(), 50.into(), 100.into()],
            },
        );
        dims.insert(
            "batch_size".into(),
            Dimension::Choice {
                values: vec![16.into(), 32.into(), 64.into()],
            },
        );
        SearchSpace { dims }
    }
}

fn number(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

/// Deterministic in `(seed, index)`: stream `index` of a ChaCha8 generator
/// seeded with `seed`.
pub fn sample_config(space: &SearchSpace, seed: u64, index: u64) -> Config {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    space
        .dims
        .iter()
        .map(|(name, d)| {
            let v = match d {
                Dimension::Uniform { lo, hi } => number(lo + (hi - lo) * rng.gen::<f64>()),
                Dimension::LogUniform { lo, hi } => {
                    let (a, b) = (lo.ln(), hi.ln());
                    number((a + (b - a) * rng.gen::<f64>()).exp())
                }
                Dimension::Choice { values } => values[rng.gen_range(0..values.len())].clone(),
            };
            (name.clone(), v)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: u64,
    pub config: Config,
    /// Training steps of the latest evaluation; may be fractional when the
    /// maximum budget is not a power of `eta`.
    pub budget: f64,
    pub metric: Option<f64>,
    pub status: Status,
}

impl Trial {
    pub fn new(trial_id: u64, config: Config) -> Self {
        Trial {
            trial_id,
            config,
            budget: 0.0,
            metric: None,
            status: Status::Pending,
        }
    }
}

/// One Hyperband bracket: `(n_trials, budget)` per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: u32,
    pub rounds: Vec<(usize, f64)>,
}

impl Bracket {
    pub fn total_budget(&self) -> f64 {
        self.rounds.iter().map(|&(n, r)| n as f64 * r).sum()
    }
}

fn pow(eta: u64, e: u32) -> u64 {
    eta.checked_pow(e).expect("eta^s fits in u64")
}

/// Brackets `s = s_max, ..., 0` with `s_max = floor(log_eta R)`. Bracket
/// `s` starts `n = ceil((s_max+1)/(s+1) * eta^s)` trials at budget
/// `R * eta^-s`; round `i` keeps `floor(n * eta^-i)` trials at
/// `R * eta^(i-s)`.
pub fn hyperband_schedule(max_budget: f64, eta: u32) -> Result<Vec<Bracket>> {
    if !(max_budget >= 1.0) || !max_budget.is_finite() || eta < 2 {
        return Err(Error::Usage(format!("hyperband needs R >= 1 and eta >= 2, got R={max_budget}, eta={eta}")));
    }
    let eta = eta as u64;
    let mut s_max = 0u32;
    while (pow(eta, s_max + 1) as f64) <= max_budget {
        s_max += 1;
    }
    Ok((0..=s_max)
        .rev()
        .map(|s| {
            let n = ((s_max as u64 + 1) * pow(eta, s)).div_ceil(s as u64 + 1);
            let rounds = (0..=s)
                .map(|i| {
                    let n_i = (n / pow(eta, i)) as usize;
                    let r_i = max_budget * pow(eta, i) as f64 / pow(eta, s) as f64;
                    (n_i, r_i)
                })
                .collect();
            Bracket { s, rounds }
        })
        .collect())
}

/// A single-round schedule: `n` random configurations at full budget.
pub fn random_search_schedule(n: usize, budget: f64) -> Vec<Bracket> {
    vec![Bracket {
        s: 0,
        rounds: vec![(n, budget)],
    }]
}

/// One evaluation as persisted in the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub trial_id: u64,
    pub config: Config,
    pub budget: f64,
    pub metric: Option<f64>,
    pub status: Status,
}

pub fn read_history<R: BufRead>(r: R) -> Result<Vec<HistoryRecord>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let err = |message: String| Error::Parse { line: n + 1, message };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

pub fn write_history_record<W: Write>(mut w: W, rec: &HistoryRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, rec)?;
    writeln!(w)
}

type Objective<'a> = dyn Fn(&Config, f64) -> Result<f64> + Sync + 'a;

/// The controller: single writer of trial state and history.
pub struct Controller<'a> {
    slots: usize,
    objective: &'a Objective<'a>,
    cache: HashMap<(u64, u64), HistoryRecord>,
    sink: Option<&'a mut dyn Write>,
    /// Every evaluation in the order it was merged.
    pub history: Vec<HistoryRecord>,
    pub evaluations_run: usize,
}

impl<'a> Controller<'a> {
    pub fn new(slots: usize, objective: &'a Objective<'a>) -> Result<Self> {
        if slots == 0 {
            return Err(Error::Usage("slots must be at least 1".into()));
        }
        Ok(Controller {
            slots,
            objective,
            cache: HashMap::new(),
            sink: None,
            history: Vec::new(),
            evaluations_run: 0,
        })
    }

    /// Evaluations found in `records` are reused instead of re-running the
    /// objective.
    pub fn with_history(mut self, records: &[HistoryRecord]) -> Self {
        for r in records {
            self.cache.insert((r.trial_id, r.budget.to_bits()), r.clone());
        }
        self
    }

    /// New evaluations are appended to `sink` as they are merged.
    pub fn with_sink(mut self, sink: &'a mut dyn Write) -> Self {
        self.sink = Some(sink);
        self
    }

    /// Evaluates `trials` at `budget`, up to `slots` at a time, and merges
    /// results in trial_id order.
    fn evaluate(&mut self, trials: &mut [Trial], budget: f64) -> Result<()> {
        trials.sort_by_key(|t| t.trial_id);
        for t in trials.iter_mut() {
            t.status = Status::Running;
        }
        let cache = &self.cache;
        let objective = self.objective;
        let fresh: Vec<bool> = trials
            .iter()
            .map(|t| !cache.contains_key(&(t.trial_id, budget.to_bits())))
            .collect();
        let results: Vec<Option<f64>> = with_slots(self.slots, || {
            Execution::Parallel.map(trials, |t| match cache.get(&(t.trial_id, budget.to_bits())) {
                Some(rec) => rec.metric,
                None => objective(&t.config, budget).ok().filter(|m| m.is_finite()),
            })
        });
        for ((t, metric), fresh) in trials.iter_mut().zip(results).zip(fresh) {
            t.budget = budget;
            t.metric = metric;
            t.status = if metric.is_some() { Status::Done } else { Status::Failed };
            let rec = HistoryRecord {
                trial_id: t.trial_id,
                config: t.config.clone(),
                budget,
                metric,
                status: t.status,
            };
            if fresh {
                self.evaluations_run += 1;
                if let Some(sink) = self.sink.as_mut() {
                    write_history_record(&mut **sink, &rec).map_err(|e| Error::Search(format!("writing history: {e}")))?;
                }
            }
            self.history.push(rec);
        }
        Ok(())
    }

    /// Runs the given rounds: evaluate survivors at each round's budget,
    /// then keep the best `keep[i]` (ties to the lower trial_id). Failed
    /// trials drop out; a round where every trial fails is an error.
    /// Returns all trials in their final state.
    pub fn run_rounds(&mut self, trials: Vec<Trial>, rounds: &[(usize, f64)]) -> Result<Vec<Trial>> {
        let mut finished: Vec<Trial> = Vec::new();
        let mut alive = trials;
        for (i, &(_, budget)) in rounds.iter().enumerate() {
            self.evaluate(&mut alive, budget)?;
            let (mut ok, failed): (Vec<Trial>, Vec<Trial>) = alive.into_iter().partition(|t| t.status == Status::Done);
            finished.extend(failed);
            if ok.is_empty() {
                return Err(Error::Search(format!("every trial failed in the round at budget {budget}")));
            }
            rank(&mut ok);
            let keep = rounds.get(i + 1).map_or(ok.len(), |&(n, _)| n.max(1));
            let losers = ok.split_off(keep.min(ok.len()));
            finished.extend(losers);
            alive = ok;
        }
        finished.extend(alive);
        finished.sort_by_key(|t| t.trial_id);
        Ok(finished)
    }

    /// Successive halving: rounds at `min_budget * eta^i`, keeping
    /// `ceil(n / eta)` each time until one trial survives.
    pub fn successive_halving(&mut self, trials: Vec<Trial>, eta: u32, min_budget: f64) -> Result<Trial> {
        if trials.is_empty() {
            return Err(Error::Usage("successive halving needs at least one trial".into()));
        }
        if eta < 2 {
            return Err(Error::Usage("eta must be at least 2".into()));
        }
        let mut alive = trials;
        let mut budget = min_budget;
        loop {
            self.evaluate(&mut alive, budget)?;
            alive.retain(|t| t.status == Status::Done);
            if alive.is_empty() {
                return Err(Error::Search(format!("every trial failed in the round at budget {budget}")));
            }
            rank(&mut alive);
            alive.truncate(alive.len().div_ceil(eta as usize));
            if alive.len() == 1 {
                return Ok(alive.remove(0));
            }
            budget *= eta as f64;
        }
    }
}

/// Metric descending, then trial_id ascending; trials without a metric last.
pub fn rank(trials: &mut [Trial]) {
    trials.sort_by(|a, b| match (a.metric, b.metric) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.trial_id.cmp(&b.trial_id)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.trial_id.cmp(&b.trial_id),
    });
}

/// Standalone successive halving over `trials`.
pub fn successive_halving<F>(trials: Vec<Trial>, eta: u32, min_budget: f64, objective: F) -> Result<(Trial, Vec<HistoryRecord>)>
where
    F: Fn(&Config, f64) -> Result<f64> + Sync,
{
    let mut c = Controller::new(1, &objective)?;
    let best = c.successive_halving(trials, eta, min_budget)?;
    Ok((best, c.history))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Every trial in its final state, best first.
    pub ranking: Vec<Trial>,
    pub history: Vec<HistoryRecord>,
    pub evaluations_run: usize,
}

/// Runs every bracket of `schedule` in order. Trial ids are assigned
/// consecutively across brackets and each configuration is
/// `sample_config(space, seed, trial_id)`.
pub fn run_search(
    space: &SearchSpace,
    schedule: &[Bracket],
    seed: u64,
    controller: &mut Controller<'_>,
) -> Result<SearchOutcome> {
    space.validate()?;
    let mut next_id = 0u64;
    let mut all = Vec::new();
    for bracket in schedule {
        let Some(&(n, _)) = bracket.rounds.first() else { continue };
        let trials: Vec<Trial> = (0..n as u64)
            .map(|k| {
                let id = next_id + k;
                Trial::new(id, sample_config(space, seed, id))
            })
            .collect();
        next_id += n as u64;
        all.extend(controller.run_rounds(trials, &bracket.rounds)?);
    }
    rank(&mut all);
    Ok(SearchOutcome {
        ranking: all,
        history: controller.history.clone(),
        evaluations_run: controller.evaluations_run,
    })
}

/// Rebuilds the ranking from a history file alone; any evaluation missing
/// from the history is a search error.
pub fn replay(space: &SearchSpace, schedule: &[Bracket], seed: u64, history: &[HistoryRecord]) -> Result<SearchOutcome> {
    let missing = |_: &Config, budget: f64| -> Result<f64> { Err(Error::Search(format!("no recorded evaluation at budget {budget}"))) };
    let mut c = Controller::new(1, &missing)?.with_history(history);
    let out = run_search(space, schedule, seed, &mut c)?;
    if out.evaluations_run > 0 {
        return Err(Error::Search(format!("history is missing {} evaluations", out.evaluations_run)));
    }
    Ok(out)
}
