//! A small pre-norm transformer encoder producing the `[CLS]` representation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tokenizer::TokenSequence;

/// Fill value for masked attention scores. Large enough that `exp` underflows
/// to exactly zero, so padded keys receive exactly zero weight.
const MASKED_SCORE: f64 = -1e30;
const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            _ => Err(Error::Config(format!("activation must be relu or gelu, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            hidden_dim: 16,
            ffn_dim: 32,
            max_len: 32,
            vocab_size: 1000,
            dropout_rate: 0.0,
            seed: 0,
            activation: Activation::Relu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0,1)", self.dropout_rate)));
        }
        if self.max_len < 4 || self.vocab_size < 4 || self.ffn_dim == 0 {
            return Err(Error::Config("max_len and vocab_size must be at least 4, ffn_dim positive".into()));
        }
        Ok(())
    }

    /// Number of scalar parameters `init` registers.
    pub fn param_count(&self) -> usize {
        let (h, f) = (self.hidden_dim, self.ffn_dim);
        let per_layer = 2 * h + (4 * h * h + 3 * h) + 2 * h + (h * f + f) + (f * h + h);
        self.vocab_size * h + self.max_len * h + self.n_layers * per_layer + 2 * h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    /// No key bias: it adds the same constant to every score in a row.
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
}

/// Inverted dropout driven by its own generator.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let n = tape.value(x).len();
        let factors = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.mul_const(x, factors)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

impl Encoder {
    /// Registers freshly initialised parameters in `store`.
    ///
    /// Weight matrices and embeddings are drawn from `Normal(0, 0.02^2)` with a
    /// ChaCha8 generator seeded by `config.seed`, in registration order.
    /// Biases start at zero, layer-norm gains at one.
    pub fn init(config: EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (h, f) = (config.hidden_dim, config.ffn_dim);
        let token_embedding = store.add("encoder.token_embedding", normal_tensor(&mut rng, &[config.vocab_size, h], INIT_STD));
        let position_embedding = store.add("encoder.position_embedding", normal_tensor(&mut rng, &[config.max_len, h], INIT_STD));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let name = |s: &str| format!("encoder.layer{l}.{s}");
            let mut w = |store: &mut ParamStore, s: &str, shape: &[usize]| store.add(name(s), normal_tensor(&mut rng, shape, INIT_STD));
            let ln1_gain = store.add(name("ln1.gain"), Tensor::full(&[h], 1.0));
            let ln1_bias = store.add(name("ln1.bias"), Tensor::zeros(&[h]));
            let wq = w(store, "attn.wq", &[h, h]);
            let bq = store.add(name("attn.bq"), Tensor::zeros(&[h]));
            let wk = w(store, "attn.wk", &[h, h]);
            let wv = w(store, "attn.wv", &[h, h]);
            let bv = store.add(name("attn.bv"), Tensor::zeros(&[h]));
            let wo = w(store, "attn.wo", &[h, h]);
            let bo = store.add(name("attn.bo"), Tensor::zeros(&[h]));
            let ln2_gain = store.add(name("ln2.gain"), Tensor::full(&[h], 1.0));
            let ln2_bias = store.add(name("ln2.bias"), Tensor::zeros(&[h]));
            let w1 = w(store, "ffn.w1", &[h, f]);
            let b1 = store.add(name("ffn.b1"), Tensor::zeros(&[f]));
            let w2 = w(store, "ffn.w2", &[f, h]);
            let b2 = store.add(name("ffn.b2"), Tensor::zeros(&[h]));
            layers.push(LayerParams {
                ln1_gain,
                ln1_bias,
                wq,
                bq,
                wk,
                wv,
                bv,
                wo,
                bo,
                ln2_gain,
                ln2_bias,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let final_gain = store.add("encoder.final_ln.gain", Tensor::full(&[h], 1.0));
        let final_bias = store.add("encoder.final_ln.bias", Tensor::zeros(&[h]));
        Ok(Encoder {
            config,
            params: EncoderParams {
                token_embedding,
                position_embedding,
                layers,
                final_gain,
                final_bias,
            },
        })
    }

    /// Rebinds an encoder to parameters already present in `store` (after a
    /// checkpoint load), looking them up by name.
    pub fn bind(config: EncoderConfig, store: &ParamStore) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let template = Encoder::init(config.clone(), &mut scratch)?;
        let lookup = |id: ParamId| -> Result<ParamId> {
            let p = scratch.get(id);
            let found = store
                .find(&p.name)
                .ok_or_else(|| Error::Load(format!("missing parameter {}", p.name)))?;
            if store.get(found).value.shape() != p.value.shape() {
                return Err(Error::Load(format!("parameter {} has the wrong shape", p.name)));
            }
            Ok(found)
        };
        let t = &template.params;
        let layers = t
            .layers
            .iter()
            .map(|l| {
                Ok(LayerParams {
                    ln1_gain: lookup(l.ln1_gain)?,
                    ln1_bias: lookup(l.ln1_bias)?,
                    wq: lookup(l.wq)?,
                    bq: lookup(l.bq)?,
                    wk: lookup(l.wk)?,
                    wv: lookup(l.wv)?,
                    bv: lookup(l.bv)?,
                    wo: lookup(l.wo)?,
                    bo: lookup(l.bo)?,
                    ln2_gain: lookup(l.ln2_gain)?,
                    ln2_bias: lookup(l.ln2_bias)?,
                    w1: lookup(l.w1)?,
                    b1: lookup(l.b1)?,
                    w2: lookup(l.w2)?,
                    b2: lookup(l.b2)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder {
            config,
            params: EncoderParams {
                token_embedding: lookup(t.token_embedding)?,
                position_embedding: lookup(t.position_embedding)?,
                layers,
                final_gain: lookup(t.final_gain)?,
                final_bias: lookup(t.final_bias)?,
            },
        })
    }

    fn linear(tape: &mut Tape<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = tape.param(w);
        let bv = tape.param(b);
        let y = tape.matmul(x, wv)?;
        tape.add(y, bv)
    }

    fn layer_norm(tape: &mut Tape<'_>, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
        let g = tape.param(gain);
        let b = tape.param(bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Runs one sequence through the encoder and returns its `1 x h` `[CLS]` row.
    pub fn encode_sequence(&self, tape: &mut Tape<'_>, seq: &TokenSequence, dropout: Option<&mut Dropout>) -> Result<Var> {
        self.encode_inner(tape, seq, dropout, true)
    }

    fn encode_inner(&self, tape: &mut Tape<'_>, seq: &TokenSequence, mut dropout: Option<&mut Dropout>, trim: bool) -> Result<Var> {
        let cfg = &self.config;
        let len = cfg.max_len;
        if seq.ids.len() != len || seq.attention_mask.len() != len {
            return Err(Error::Input(format!(
                "sequence length {} does not match max_len {len}",
                seq.ids.len()
            )));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::Input(format!("token id {bad} >= vocab_size {}", cfg.vocab_size)));
        }
        // Trailing padding contributes exact zeros to every real position, so
        // a prefix mask lets us drop those positions with a bitwise-identical
        // result. Any other mask goes through the masked path.
        let real = seq.attention_mask.iter().take_while(|&&m| m == 1).count();
        let prefix = trim && seq.attention_mask[real..].iter().all(|&m| m == 0) && real > seq.cls_position;
        let len = if prefix { real } else { len };

        let p = &self.params;
        let tok = tape.param(p.token_embedding);
        let pos = tape.param(p.position_embedding);
        let te = tape.embedding_gather(tok, &seq.ids[..len])?;
        let positions: Vec<usize> = (0..len).collect();
        let pe = tape.embedding_gather(pos, &positions)?;
        let mut x = tape.add(te, pe)?;

        let masked = !prefix && seq.attention_mask.contains(&0);
        let keep: Vec<bool> = (0..len * len).map(|i| seq.attention_mask[i % len] == 1).collect();
        let dh = cfg.hidden_dim / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        for layer in &p.layers {
            let a = Self::layer_norm(tape, x, layer.ln1_gain, layer.ln1_bias)?;
            let q = Self::linear(tape, a, layer.wq, layer.bq)?;
            let wk = tape.param(layer.wk);
            let k = tape.matmul(a, wk)?;
            let v = Self::linear(tape, a, layer.wv, layer.bv)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let s = tape.matmul(qh, kt)?;
                let s = tape.scale(s, scale)?;
                let s = if masked { tape.mask_fill(s, keep.clone(), MASKED_SCORE)? } else { s };
                let w = tape.softmax(s)?;
                heads.push(tape.matmul(w, vh)?);
            }
            let ctx = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let mut o = Self::linear(tape, ctx, layer.wo, layer.bo)?;
            if let Some(d) = dropout.as_deref_mut() {
                o = d.apply(tape, o)?;
            }
            x = tape.add(x, o)?;

            let f = Self::layer_norm(tape, x, layer.ln2_gain, layer.ln2_bias)?;
            let f = Self::linear(tape, f, layer.w1, layer.b1)?;
            let f = match cfg.activation {
                Activation::Relu => tape.relu(f)?,
                Activation::Gelu => tape.gelu(f)?,
            };
            let mut f = Self::linear(tape, f, layer.w2, layer.b2)?;
            if let Some(d) = dropout.as_deref_mut() {
                f = d.apply(tape, f)?;
            }
            x = tape.add(x, f)?;
        }
        let x = Self::layer_norm(tape, x, p.final_gain, p.final_bias)?;
        tape.select_rows(x, &[seq.cls_position])
    }

    /// Encodes a batch on the tape, returning `batch x h`. Sequences never
    /// attend across each other.
    pub fn encode_batch_on(&self, tape: &mut Tape<'_>, seqs: &[&TokenSequence], mut dropout: Option<&mut Dropout>) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let rows = seqs
            .iter()
            .map(|s| self.encode_sequence(tape, s, dropout.as_deref_mut()))
            .collect::<Result<Vec<_>>>()?;
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            tape.concat_rows(&rows)
        }
    }

    /// Inference-only batch encoding.
    pub fn encode_batch(&self, store: &ParamStore, seqs: &[&TokenSequence]) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let out = self.encode_batch_on(&mut tape, seqs, None)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_params;
    use crate::tokenizer::{CLS, PAD, SEP};

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            hidden_dim: 8,
            ffn_dim: 16,
            max_len: 16,
            vocab_size: 10,
            dropout_rate: 0.0,
            seed: 42,
            activation: Activation::Relu,
        }
    }

    fn seq(body: &[usize], max_len: usize) -> TokenSequence {
        let mut ids = vec![CLS];
        ids.extend_from_slice(body);
        ids.push(SEP);
        let true_length = ids.len();
        ids.resize(max_len, PAD);
        TokenSequence {
            attention_mask: (0..max_len).map(|i| u8::from(i < true_length)).collect(),
            ids,
            true_length,
            cls_position: 0,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let (mut a, mut b) = (ParamStore::new(), ParamStore::new());
        Encoder::init(tiny_config(), &mut a).unwrap();
        Encoder::init(tiny_config(), &mut b).unwrap();
        assert_eq!(a.flat_values(), b.flat_values());
        let mut c = ParamStore::new();
        Encoder::init(EncoderConfig { seed: 43, ..tiny_config() }, &mut c).unwrap();
        assert_ne!(a.flat_values(), c.flat_values());
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // h=8, f=16, V=10, L=16, one layer:
        // embeddings 10*8 + 16*8 = 208
        // layer: ln1 16 + q,k,v,o weights 4*64 + q,v,o biases 3*8 = 280
        //        + ln2 16 + w1 128+16 + w2 128+8 -> 592
        // final ln 16
        let mut store = ParamStore::new();
        Encoder::init(tiny_config(), &mut store).unwrap();
        assert_eq!(store.num_scalars(), 816);
        assert_eq!(tiny_config().param_count(), 816);
    }

    #[test]
    fn init_statistics() {
        let mut store = ParamStore::new();
        let enc = Encoder::init(EncoderConfig { vocab_size: 2000, ..tiny_config() }, &mut store).unwrap();
        let emb = store.get(enc.params.token_embedding).value.data();
        let mean = emb.iter().sum::<f64>() / emb.len() as f64;
        let std = (emb.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / emb.len() as f64).sqrt();
        assert!(mean.abs() < 0.002 && (std - 0.02).abs() < 0.001, "{mean} {std}");
        let l = &enc.params.layers[0];
        assert!(store.get(l.bq).value.data().iter().all(|&v| v == 0.0));
        assert!(store.get(l.ln1_gain).value.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut store = ParamStore::new();
        let err = Encoder::init(EncoderConfig { hidden_dim: 7, ..tiny_config() }, &mut store).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn identical_sequences_identical_rows() {
        let mut store = ParamStore::new();
        let enc = Encoder::init(tiny_config(), &mut store).unwrap();
        let s = seq(&[4, 5, SEP, 6], 16);
        let out = enc.encode_batch(&store, &[&s, &s]).unwrap();
        assert_eq!(out.shape(), &[2, 8]);
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn padding_is_inert() {
        let mut store = ParamStore::new();
        let enc = Encoder::init(tiny_config(), &mut store).unwrap();
        let s = seq(&[4, 5, SEP, 6], 16);
        let base = enc.encode_batch(&store, &[&s]).unwrap();
        let mut changed = s.clone();
        changed.ids[12] = 9;
        changed.ids[15] = 7;
        assert_eq!(enc.encode_batch(&store, &[&changed]).unwrap(), base);
        // perturbing the PAD embedding row changes nothing either
        let mut other = store.clone();
        let tok = other.get_mut(enc.params.token_embedding);
        for v in &mut tok.value.data_mut()[PAD * 8..PAD * 8 + 8] {
            *v += 0.37;
        }
        let base_bits: Vec<u64> = base.data().iter().map(|v| v.to_bits()).collect();
        let got: Vec<u64> = enc.encode_batch(&other, &[&s]).unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, base_bits);
    }

    #[test]
    fn trimmed_padding_matches_masked_path() {
        let mut store = ParamStore::new();
        let enc = Encoder::init(tiny_config(), &mut store).unwrap();
        let s = seq(&[4, 5, SEP, 6, 7], 16);
        let run = |trim: bool| {
            let mut tape = Tape::new(&store);
            let v = enc.encode_inner(&mut tape, &s, None, trim).unwrap();
            tape.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn batch_permutation_permutes_rows() {
        let mut store = ParamStore::new();
        let enc = Encoder::init(tiny_config(), &mut store).unwrap();
        let a = seq(&[4, 5], 16);
        let b = seq(&[6, SEP, 7, 8, 9], 16);
        let c = seq(&[9], 16);
        let fwd = enc.encode_batch(&store, &[&a, &b, &c]).unwrap();
        let rev = enc.encode_batch(&store, &[&c, &a, &b]).unwrap();
        assert_eq!(fwd.row(0), rev.row(1));
        assert_eq!(fwd.row(1), rev.row(2));
        assert_eq!(fwd.row(2), rev.row(0));
    }

    #[test]
    fn out_of_range_id_is_input_error() {
        let mut store = ParamStore::new();
        let enc = Encoder::init(tiny_config(), &mut store).unwrap();
        let s = seq(&[10], 16);
        assert!(matches!(enc.encode_batch(&store, &[&s]), Err(Error::Input(_))));
    }

    #[test]
    fn gradient_check_through_encoder() {
        let cfg = EncoderConfig { max_len: 8, ..tiny_config() };
        let mut store = ParamStore::new();
        let enc = Encoder::init(cfg, &mut store).unwrap();
        // move away from the tiny init so gradients are well above roundoff
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in store.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = normal_tensor(&mut rng, &shape, 0.5);
        }
        let head = store.add("head", normal_tensor(&mut rng, &[8, 2], 0.5));
        let batch = [seq(&[4, 5, SEP, 6], 8), seq(&[7, SEP, 8], 8)];
        let loss_fn = |tape: &mut Tape<'_>| {
            let refs: Vec<&TokenSequence> = batch.iter().collect();
            let t = enc.encode_batch_on(tape, &refs, None)?;
            let w = tape.param(head);
            let s = tape.matmul(t, w)?;
            let ls = tape.log_softmax(s)?;
            let picked = tape.pick(ls, &[1, 0])?;
            let total = tape.sum(picked)?;
            tape.scale(total, -1.0)
        };
        let coords: Vec<(ParamId, usize)> = (0..store.len())
            .flat_map(|i| {
                let n = store.get(ParamId(i)).value.len();
                (0..n).step_by(7).map(move |j| (ParamId(i), j))
            })
            .collect();
        let r = grad_check_params(&store, &coords, 1e-5, loss_fn).unwrap();
        assert!(r.checked > 50, "{r:?}");
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
