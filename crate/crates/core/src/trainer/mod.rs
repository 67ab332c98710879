//! Training loop for both model variants, transfer schedule and checkpoints.

pub mod batching;
pub mod checkpoint;
pub mod optim;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore, Tape};
use crate::corpus::{group_instances, mix_corpora, BinaryInstance};
use crate::decode::{question_accuracy, ratio_to_f64, select_top_n, GroupScores, Selections};
use crate::encoder::{Dropout, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::heads::{BinaryHead, MultiChoiceHead};
use crate::tokenizer::{encode_instance, TokenSequence, Truncation, Vocab};

pub use batching::{EpochSampler, SamplerState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{learning_rate, Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MultiChoice,
    Binary,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi_choice" => Ok(Variant::MultiChoice),
            "binary" => Ok(Variant::Binary),
            _ => Err(Error::Config(format!("variant must be multi_choice or binary, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::MultiChoice => "multi_choice",
            Variant::Binary => "binary",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Instances per step for the binary variant, questions for multi-choice.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_len: usize,
    pub eval_interval: u64,
    /// Loss weight of positive instances in the binary variant.
    pub pos_weight: f64,
    pub max_grad_norm: Option<f64>,
    pub truncation: Truncation,
    /// Stop early once dev accuracy reaches this value at an evaluation.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Binary,
            learning_rate: 1e-3,
            warmup_steps: 0,
            total_steps: 100,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            max_len: 32,
            eval_interval: 100,
            pos_weight: 1.0,
            max_grad_norm: None,
            truncation: Truncation::Head,
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch_size and eval_interval must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0,1) and eps must be positive".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.pos_weight > 0.0) {
            return bad("weight_decay must be >= 0 and pos_weight > 0".into());
        }
        if matches!(self.max_grad_norm, Some(n) if !(n > 0.0)) {
            return bad("max_grad_norm must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    MultiChoice(MultiChoiceHead),
    Binary(BinaryHead),
}

impl Head {
    pub fn variant(&self) -> Variant {
        match self {
            Head::MultiChoice(_) => Variant::MultiChoice,
            Head::Binary(_) => Variant::Binary,
        }
    }

    fn init(variant: Variant, hidden: usize, seed: u64, store: &mut ParamStore) -> Head {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        match variant {
            Variant::MultiChoice => Head::MultiChoice(MultiChoiceHead::init(hidden, store, &mut rng)),
            Variant::Binary => Head::Binary(BinaryHead::init(hidden, store, &mut rng)),
        }
    }

    pub fn bind(variant: Variant, store: &ParamStore) -> Result<Head> {
        Ok(match variant {
            Variant::MultiChoice => Head::MultiChoice(MultiChoiceHead::bind(store)?),
            Variant::Binary => Head::Binary(BinaryHead::bind(store)?),
        })
    }
}

/// How far training has advanced; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Progress {
    pub step: u64,
    pub sampler: Option<SamplerState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub head: Head,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub progress: Progress,
}

impl Model {
    /// Fresh model. `config.vocab_size` is overridden by the vocabulary size.
    pub fn new(variant: Variant, mut config: EncoderConfig, vocab: Vocab) -> Result<Self> {
        config.vocab_size = vocab.size();
        let mut store = ParamStore::new();
        let encoder = Encoder::init(config, &mut store)?;
        let head = Head::init(variant, encoder.config.hidden_dim, encoder.config.seed, &mut store);
        Ok(Model {
            encoder,
            head,
            store,
            vocab,
            progress: Progress::default(),
        })
    }

    pub fn variant(&self) -> Variant {
        self.head.variant()
    }

    /// Keeps the encoder and replaces the head with a freshly initialised
    /// one of `variant`. A no-op when the variant already matches.
    pub fn with_variant(self, variant: Variant) -> Result<Self> {
        if variant == self.variant() {
            return Ok(self);
        }
        let mut store = ParamStore::new();
        for p in self.store.iter().filter(|p| !p.name.starts_with("head.")) {
            store.add(p.name.clone(), p.value.clone());
        }
        let encoder = Encoder::bind(self.encoder.config.clone(), &store)?;
        let head = Head::init(variant, encoder.config.hidden_dim, encoder.config.seed, &mut store);
        Ok(Model {
            encoder,
            head,
            store,
            vocab: self.vocab,
            progress: self.progress,
        })
    }

    pub fn max_len(&self) -> usize {
        self.encoder.config.max_len
    }
}

/// All options of one question, tokenised.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGroup {
    pub group_id: String,
    pub passage_key: String,
    pub option_indices: Vec<usize>,
    pub labels: Vec<u8>,
    pub seqs: Vec<TokenSequence>,
}

impl EncodedGroup {
    pub fn gold(&self) -> BTreeSet<usize> {
        self.option_indices
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == 1)
            .map(|(&i, _)| i)
            .collect()
    }

    fn multi_choice_gold(&self) -> Result<usize> {
        let pos: Vec<usize> = (0..self.labels.len()).filter(|&j| self.labels[j] == 1).collect();
        if self.seqs.len() < 2 || pos.len() != 1 {
            return Err(Error::Input(format!(
                "multi-choice training needs at least 2 options and exactly one correct option; group {} has {} options, {} correct",
                self.group_id,
                self.seqs.len(),
                pos.len()
            )));
        }
        Ok(pos[0])
    }
}

/// One training unit: a single instance (binary) or a whole question
/// (multi-choice).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Instance { group: usize, option: usize },
    Question { group: usize },
}

impl Unit {
    pub fn group(self) -> usize {
        match self {
            Unit::Instance { group, .. } | Unit::Question { group } => group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncodedCorpus {
    pub groups: Vec<EncodedGroup>,
}

impl EncodedCorpus {
    pub fn encode(instances: &[BinaryInstance], vocab: &Vocab, max_len: usize, truncation: Truncation) -> Result<Self> {
        let groups = group_instances(instances);
        let encoded = Execution::default().map(&groups, |g| -> Result<EncodedGroup> {
            Ok(EncodedGroup {
                group_id: g.group_id.to_string(),
                passage_key: g.members[0].passage_key().to_string(),
                option_indices: g.members.iter().map(|m| m.option_index).collect(),
                labels: g.members.iter().map(|m| m.label).collect(),
                seqs: g
                    .members
                    .iter()
                    .map(|m| encode_instance(m, vocab, max_len, truncation))
                    .collect::<Result<_>>()?,
            })
        });
        Ok(EncodedCorpus {
            groups: encoded.into_iter().collect::<Result<_>>()?,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn units(&self, variant: Variant) -> Vec<Unit> {
        match variant {
            Variant::Binary => self
                .groups
                .iter()
                .enumerate()
                .flat_map(|(g, grp)| (0..grp.seqs.len()).map(move |option| Unit::Instance { group: g, option }))
                .collect(),
            Variant::MultiChoice => (0..self.groups.len()).map(|group| Unit::Question { group }).collect(),
        }
    }

    pub fn gold(&self) -> Selections {
        self.groups.iter().map(|g| (g.group_id.clone(), g.gold())).collect()
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Dropout seed for the unit at `position` of the batch at `step`.
pub fn unit_seed(seed: u64, step: u64, position: u64) -> u64 {
    mix64(seed ^ mix64(step ^ mix64(position)))
}

/// Builds `scale * loss(unit)` on `tape`.
fn unit_loss(model: &Model, config: &TrainConfig, data: &EncodedCorpus, unit: Unit, tape: &mut Tape<'_>, dropout: Option<&mut Dropout>, scale: f64) -> Result<crate::autodiff::Var> {
    let loss = match (unit, &model.head) {
        (Unit::Instance { group, option }, Head::Binary(head)) => {
            let grp = &data.groups[group];
            let label = grp.labels[option];
            let weight = if label == 1 { config.pos_weight } else { 1.0 };
            let t = model.encoder.encode_sequence(tape, &grp.seqs[option], dropout)?;
            head.loss_on(tape, t, &[label as usize], &[weight])?
        }
        (Unit::Question { group }, Head::MultiChoice(head)) => {
            let grp = &data.groups[group];
            let gold = grp.multi_choice_gold()?;
            let refs: Vec<&TokenSequence> = grp.seqs.iter().collect();
            let t = model.encoder.encode_batch_on(tape, &refs, dropout)?;
            head.loss_on(tape, t, gold)?
        }
        _ => return Err(Error::Usage(format!("unit {unit:?} does not match a {} head", model.variant()))),
    };
    tape.scale(loss, scale)
}

/// Sum over `units` of `scale * loss` and its gradient. Units are processed
/// independently (possibly in parallel) and summed left to right; `offset`
/// is the batch position of `units[0]`, which seeds dropout.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    model: &Model,
    config: &TrainConfig,
    data: &EncodedCorpus,
    units: &[Unit],
    step: u64,
    offset: usize,
    scale: f64,
    exec: Execution,
) -> Result<(f64, Gradients)> {
    let rate = model.encoder.config.dropout_rate;
    let per_unit = exec.map_range(units.len(), |i| -> Result<(f64, Gradients)> {
        let mut tape = Tape::new(&model.store);
        let mut dropout = (rate > 0.0).then(|| Dropout::new(rate, unit_seed(config.seed, step, (offset + i) as u64)));
        let loss = unit_loss(model, config, data, units[i], &mut tape, dropout.as_mut(), scale)?;
        let value = tape.value(loss).item().expect("scalar loss");
        let (grads, _) = tape.backward(loss)?;
        Ok((value, grads))
    });
    let mut total = 0.0;
    let mut grads = Gradients::empty(model.store.len());
    for r in per_unit {
        let (l, g) = r?;
        total += l;
        grads.merge(&g);
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub loss: f64,
    pub dev_accuracy: Option<f64>,
}

pub fn write_trace<W: Write>(mut w: W, trace: &[TraceRecord]) -> std::io::Result<()> {
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRecord>,
    pub steps_run: u64,
}

impl TrainOutcome {
    pub fn best_dev_accuracy(&self) -> Option<f64> {
        self.trace.iter().filter_map(|r| r.dev_accuracy).reduce(f64::max)
    }

    pub fn final_dev_accuracy(&self) -> Option<f64> {
        self.trace.iter().rev().find_map(|r| r.dev_accuracy)
    }
}

pub fn train(config: &TrainConfig, model: &mut Model, train: &EncodedCorpus, dev: Option<&EncodedCorpus>) -> Result<TrainOutcome> {
    train_with(Execution::default(), config, model, train, dev)
}

/// Runs `config.total_steps` Adam updates on `model`.
pub fn train_with(exec: Execution, config: &TrainConfig, model: &mut Model, train: &EncodedCorpus, dev: Option<&EncodedCorpus>) -> Result<TrainOutcome> {
    config.validate()?;
    if config.variant != model.variant() {
        return Err(Error::Usage(format!(
            "config variant {} does not match the model's {} head",
            config.variant,
            model.variant()
        )));
    }
    if config.max_len != model.max_len() {
        return Err(Error::Config(format!(
            "train max_len {} differs from encoder max_len {}",
            config.max_len,
            model.max_len()
        )));
    }
    if train.is_empty() {
        return Err(Error::Usage("training corpus is empty".into()));
    }
    if config.variant == Variant::MultiChoice {
        for g in &train.groups {
            g.multi_choice_gold()?;
        }
    }
    let units = train.units(config.variant);
    let mut sampler = EpochSampler::new(units.len(), config.seed)?;
    let mut adam = Adam::new(config.adam(), &model.store);
    let mut trace = Vec::new();
    let scale = 1.0 / config.batch_size as f64;
    let mut steps_run = 0;

    for step in 0..config.total_steps {
        let batch: Vec<Unit> = sampler.next_batch(config.batch_size).into_iter().map(|i| units[i]).collect();
        let diverged = |loss: f64| Error::Diverged {
            step: step as usize,
            loss,
            batch: batch.iter().map(|u| train.groups[u.group()].group_id.clone()).collect(),
        };
        let (loss, mut grads) = match batch_gradients(model, config, train, &batch, step, 0, scale, exec) {
            Err(Error::Numeric(_)) => return Err(diverged(f64::NAN)),
            other => other?,
        };
        if !loss.is_finite() {
            return Err(diverged(loss));
        }
        if let Some(max) = config.max_grad_norm {
            optim::clip_global_norm(&mut grads, max);
        }
        let lr = learning_rate(config.learning_rate, config.warmup_steps, config.total_steps, step);
        adam.step(&mut model.store, &grads, lr);
        steps_run = step + 1;
        model.progress = Progress {
            step: model.progress.step + 1,
            sampler: Some(sampler.state()),
        };

        if steps_run % config.eval_interval == 0 || steps_run == config.total_steps {
            let dev_accuracy = match dev {
                Some(d) => Some(evaluate_with(exec, model, d)?),
                None => None,
            };
            trace.push(TraceRecord {
                step: steps_run,
                loss,
                dev_accuracy,
            });
            if let (Some(target), Some(acc)) = (config.stop_at_accuracy, dev_accuracy) {
                if acc >= target {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome { trace, steps_run })
}

/// Per-option scores for every group: `g` for the binary head, option
/// probabilities for the multi-choice head. `n_select` defaults to the
/// number of correct options in each group.
pub fn score_groups(model: &Model, data: &EncodedCorpus, n_select: Option<usize>) -> Result<Vec<GroupScores>> {
    score_groups_with(Execution::default(), model, data, n_select)
}

pub fn score_groups_with(exec: Execution, model: &Model, data: &EncodedCorpus, n_select: Option<usize>) -> Result<Vec<GroupScores>> {
    exec.map(&data.groups, |g| -> Result<GroupScores> {
        let refs: Vec<&TokenSequence> = g.seqs.iter().collect();
        let t = model.encoder.encode_batch(&model.store, &refs)?;
        let scores = match &model.head {
            Head::Binary(h) => h.scores(&model.store, &t)?,
            Head::MultiChoice(h) => h.probs(&model.store, &t)?,
        };
        let gs = GroupScores {
            group_id: g.group_id.clone(),
            scores: g.option_indices.iter().copied().zip(scores).collect(),
            n_select: n_select.unwrap_or_else(|| g.gold().len().max(1)),
        };
        gs.validate()?;
        Ok(gs)
    })
    .into_iter()
    .collect()
}

pub fn predict(groups: &[GroupScores]) -> Result<Vec<(String, BTreeSet<usize>)>> {
    groups.iter().map(|g| Ok((g.group_id.clone(), select_top_n(g)?))).collect()
}

/// Question accuracy under top-n decoding, grouped by `group_id`.
pub fn evaluate(model: &Model, data: &EncodedCorpus) -> Result<f64> {
    evaluate_with(Execution::default(), model, data)
}

pub fn evaluate_with(exec: Execution, model: &Model, data: &EncodedCorpus) -> Result<f64> {
    let scores = score_groups_with(exec, model, data, None)?;
    let pred: Selections = predict(&scores)?.into_iter().collect();
    Ok(ratio_to_f64(&question_accuracy(&pred, &data.gold())?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    pub model: Model,
    pub stage_a: TrainOutcome,
    pub stage_b: TrainOutcome,
}

pub const STAGE_A_CHECKPOINT: &str = "stage_a.ckpt";
pub const STAGE_B_CHECKPOINT: &str = "stage_b.ckpt";

/// Stage A trains the binary model on the shuffled union of
/// `stage_a_corpora`; stage B continues from those weights on `target`
/// alone. Both checkpoints are written to `checkpoint_dir` when given.
#[allow(clippy::too_many_arguments)]
pub fn transfer_pipeline(
    model: Model,
    stage_a_corpora: &[Vec<BinaryInstance>],
    target: &[BinaryInstance],
    dev: Option<&[BinaryInstance]>,
    config_a: &TrainConfig,
    config_b: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TransferOutcome> {
    if config_a.variant != Variant::Binary {
        return Err(Error::Usage("stage A must train the binary variant".into()));
    }
    if stage_a_corpora.iter().all(Vec::is_empty) || target.is_empty() {
        return Err(Error::Usage("transfer needs non-empty stage A and target corpora".into()));
    }
    let encode = |inst: &[BinaryInstance], cfg: &TrainConfig, vocab: &Vocab| EncodedCorpus::encode(inst, vocab, cfg.max_len, cfg.truncation);

    let mut model = model.with_variant(Variant::Binary)?;
    let mixed = mix_corpora(stage_a_corpora, config_a.seed)?;
    let data_a = encode(&mixed, config_a, &model.vocab)?;
    let dev_a = dev.map(|d| encode(d, config_a, &model.vocab)).transpose()?;
    let stage_a = train(config_a, &mut model, &data_a, dev_a.as_ref())?;
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&model, &dir.join(STAGE_A_CHECKPOINT))?;
    }

    let mut model = model.with_variant(config_b.variant)?;
    let data_b = encode(target, config_b, &model.vocab)?;
    let dev_b = dev.map(|d| encode(d, config_b, &model.vocab)).transpose()?;
    let stage_b = train(config_b, &mut model, &data_b, dev_b.as_ref())?;
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&model, &dir.join(STAGE_B_CHECKPOINT))?;
    }
    Ok(TransferOutcome { model, stage_a, stage_b })
}
