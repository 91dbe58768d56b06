//! Minimal decoder-only transformer.
//!
//! Each layer is post-norm: `h = LayerNorm(h + Attention(h))` followed by
//! `h = LayerNorm(h + FFN(h))`. Linear weights are stored `[d_out × d_in]`
//! and applied to column vectors, so a linear site computes `W·x`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peft::{self, BaseVar, PeftSet, PeftVars};
use crate::quantize::QuantizedMatrix;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer;

const EMBED_STD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FfnVariant {
    /// `GeLU(W₂·GeLU(W₁x + b₁)) + b₂`
    #[default]
    Paper,
    /// `W₂·GeLU(W₁x + b₁) + b₂`
    Standard,
}

impl FromStr for FfnVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(FfnVariant::Paper),
            "standard" => Ok(FfnVariant::Standard),
            other => Err(Error::Config(format!("unknown ffn variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub ffn_variant: FfnVariant,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TransformerConfig {
    /// Two layers, width 64, four heads, byte vocabulary.
    pub fn desk() -> Self {
        TransformerConfig {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_seq_len: 64,
            ffn_variant: FfnVariant::Paper,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// `(d_in, d_out)` of a linear site.
    pub fn linear_dims(&self, site: LinearSite) -> (usize, usize) {
        match site {
            LinearSite::Q | LinearSite::K | LinearSite::V | LinearSite::O => {
                (self.d_model, self.d_model)
            }
            LinearSite::Ffn1 => (self.d_model, self.d_ff),
            LinearSite::Ffn2 => (self.d_ff, self.d_model),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearSite {
    Q,
    K,
    V,
    O,
    Ffn1,
    Ffn2,
}

impl LinearSite {
    pub const ALL: [LinearSite; 6] = [
        LinearSite::Q,
        LinearSite::K,
        LinearSite::V,
        LinearSite::O,
        LinearSite::Ffn1,
        LinearSite::Ffn2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LinearSite::Q => "q",
            LinearSite::K => "k",
            LinearSite::V => "v",
            LinearSite::O => "o",
            LinearSite::Ffn1 => "ffn1",
            LinearSite::Ffn2 => "ffn2",
        }
    }
}

impl FromStr for LinearSite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LinearSite::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown linear site {s:?}")))
    }
}

/// What lives at a site: a linear projection, an adapter slot after a
/// sublayer, or a layer's attention prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SiteKind {
    Linear(LinearSite),
    AfterAttention,
    AfterFfn,
    Prefix,
}

/// Stable address of an attachment point: layer index plus site name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn linear(layer: usize, site: LinearSite) -> Self {
        SiteId {
            layer,
            kind: SiteKind::Linear(site),
        }
    }

    /// Name of the base weight tensor at a linear site.
    pub fn weight_name(&self) -> Option<String> {
        matches!(self.kind, SiteKind::Linear(_)).then(|| format!("{self}.weight"))
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            SiteKind::Linear(s) => s.name(),
            SiteKind::AfterAttention => "after_attn",
            SiteKind::AfterFfn => "after_ffn",
            SiteKind::Prefix => "prefix",
        };
        write!(f, "layers.{}.{}", self.layer, name)
    }
}

impl FromStr for SiteId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed site id {s:?}"));
        let rest = s.strip_prefix("layers.").ok_or_else(bad)?;
        let (layer, name) = rest.split_once('.').ok_or_else(bad)?;
        let layer = layer.parse().map_err(|_| bad())?;
        let kind = match name {
            "after_attn" => SiteKind::AfterAttention,
            "after_ffn" => SiteKind::AfterFfn,
            "prefix" => SiteKind::Prefix,
            other => SiteKind::Linear(other.parse().map_err(|_| bad())?),
        };
        Ok(SiteId { layer, kind })
    }
}

impl Serialize for SiteId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SiteId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A stored parameter: dense `f32` or frozen 4-bit.
#[derive(Clone, Debug, PartialEq)]
pub enum Weight {
    F32(Tensor<f32>),
    Q4(Arc<QuantizedMatrix>),
}

impl Weight {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            Weight::F32(t) => t.shape().to_vec(),
            Weight::Q4(q) => vec![q.shape().0, q.shape().1],
        }
    }

    pub fn numel(&self) -> usize {
        match self {
            Weight::F32(t) => t.len(),
            Weight::Q4(q) => q.len(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            Weight::F32(t) => t.clone(),
            Weight::Q4(q) => q.dequantize(),
        }
    }

    /// Storage bytes: the tensor encoding for `f32`, packed codes plus
    /// scales for 4-bit.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Weight::F32(t) => t.to_bytes(),
            Weight::Q4(q) => q.to_bytes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: TransformerConfig,
    params: BTreeMap<String, Weight>,
}

/// Names of every parameter tensor a config implies, with shapes.
pub fn parameter_layout(config: &TransformerConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), vec![config.vocab_size, d]),
        ("pos_emb".to_string(), vec![config.max_seq_len, d]),
        ("lm_head.weight".to_string(), vec![config.vocab_size, d]),
    ];
    for layer in 0..config.n_layers {
        for site in LinearSite::ALL {
            let (d_in, d_out) = config.linear_dims(site);
            out.push((
                SiteId::linear(layer, site).weight_name().unwrap(),
                vec![d_out, d_in],
            ));
        }
        out.push((format!("layers.{layer}.ffn1.bias"), vec![config.d_ff]));
        out.push((format!("layers.{layer}.ffn2.bias"), vec![d]));
        for ln in ["ln1", "ln2"] {
            out.push((format!("layers.{layer}.{ln}.gamma"), vec![d]));
            out.push((format!("layers.{layer}.{ln}.beta"), vec![d]));
        }
    }
    out.sort();
    out
}

impl TransformerModel {
    /// Seeded random initialization.
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in parameter_layout(&config) {
            let mut rng = rng::substream(seed, &name);
            let t = if name.ends_with(".gamma") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".beta") || name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name.ends_with("_emb") {
                Tensor::randn(&shape, EMBED_STD, &mut rng)
            } else {
                let fan_in = shape[1] as f64;
                Tensor::randn(&shape, fan_in.powf(-0.5), &mut rng)
            };
            params.insert(name, Weight::F32(t));
        }
        Ok(TransformerModel { config, params })
    }

    /// Assembles a model from named weights, checking every expected tensor
    /// is present with the right shape.
    pub fn from_params(
        config: TransformerConfig,
        params: BTreeMap<String, Weight>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            let w = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if &w.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    w.shape()
                )));
            }
        }
        Ok(TransformerModel { config, params })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Weight> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Weight> {
        self.params.get(name)
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Weight> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Weight::numel).sum()
    }

    pub fn is_quantized(&self) -> bool {
        self.params.values().any(|w| matches!(w, Weight::Q4(_)))
    }

    /// Quantizes every 2-D projection matrix; embeddings, norms and biases
    /// stay `f32`.
    pub fn quantized(&self, block_size: usize) -> Result<Self> {
        if self.is_quantized() {
            return Err(Error::Usage("model is already quantized".into()));
        }
        let mut params = BTreeMap::new();
        for (name, w) in &self.params {
            let w = match w {
                Weight::F32(t) if name.ends_with(".weight") => {
                    Weight::Q4(Arc::new(QuantizedMatrix::quantize(t, block_size)?))
                }
                other => other.clone(),
            };
            params.insert(name.clone(), w);
        }
        Ok(TransformerModel {
            config: self.config.clone(),
            params,
        })
    }

    /// Replaces every 4-bit tensor with its dequantized `f32` values.
    pub fn dequantized(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|(n, w)| (n.clone(), Weight::F32(w.to_f32())))
            .collect();
        TransformerModel {
            config: self.config.clone(),
            params,
        }
    }

    /// CRC-64 over every parameter's name and stored bytes.
    pub fn checksum(&self) -> u64 {
        let crc = crc::Crc::<u64>::new(&crc::CRC_64_XZ);
        let mut digest = crc.digest();
        for (name, w) in &self.params {
            digest.update(name.as_bytes());
            digest.update(&w.to_bytes());
        }
        digest.finalize()
    }

    /// Records every base parameter on the tape. Dense tensors become
    /// trainable leaves when `trainable` is set.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        let vars = self
            .params
            .iter()
            .map(|(name, w)| {
                let v = match w {
                    Weight::F32(t) => BaseVar::Dense(tape.leaf(t.cast(), trainable)),
                    Weight::Q4(q) => BaseVar::Quantized(Arc::clone(q)),
                };
                (name.clone(), v)
            })
            .collect();
        ModelVars { vars }
    }

    /// Logits `[seq_len × vocab]` for a token sequence.
    pub fn logits(&self, tokens: &[usize], peft: Option<&PeftSet>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars = self.bind(&mut tape, false);
        let pv = peft.map(|p| p.bind(&mut tape, false));
        let out = forward(&mut tape, &self.config, &vars, pv.as_ref(), tokens)?;
        Ok(tape.value(out).clone())
    }

    /// Greedy decoding until EOS, `max_new` tokens, or the context limit.
    pub fn generate(
        &self,
        prompt: &[usize],
        max_new: usize,
        peft: Option<&PeftSet>,
    ) -> Result<Vec<usize>> {
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if tokens.len() >= self.config.max_seq_len {
                break;
            }
            let logits = self.logits(&tokens, peft)?;
            let (rows, vocab) = logits.dims2()?;
            let last = &logits.data()[(rows - 1) * vocab..];
            let next = argmax(last);
            if next == tokenizer::EOS {
                break;
            }
            tokens.push(next);
            out.push(next);
        }
        Ok(out)
    }

    /// Sum of log-probabilities of `continuation` following `context`,
    /// together with the number of continuation tokens scored.
    pub fn continuation_log_likelihood(
        &self,
        context: &[usize],
        continuation: &[usize],
        peft: Option<&PeftSet>,
    ) -> Result<(f64, usize)> {
        if context.is_empty() {
            return Err(Error::Usage(
                "log-likelihood needs a non-empty context".into(),
            ));
        }
        let mut tokens = context.to_vec();
        tokens.extend_from_slice(continuation);
        let limit = self.config.max_seq_len;
        if tokens.len() > limit {
            let drop = tokens.len() - limit;
            if drop >= context.len() {
                return Err(Error::Usage(
                    "continuation longer than the context window".into(),
                ));
            }
            tokens.drain(..drop);
        }
        let logits = self.logits(&tokens, peft)?;
        let (_, vocab) = logits.dims2()?;
        let start = tokens.len() - continuation.len();
        let mut total = 0f64;
        for (pos, &token) in tokens.iter().enumerate().skip(start) {
            let row = &logits.data()[(pos - 1) * vocab..pos * vocab];
            total += log_softmax_at(row, token);
        }
        Ok((total, continuation.len()))
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_at(row: &[f32], idx: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    row[idx] as f64 - max - z.ln()
}

/// Base parameters recorded on a tape.
pub struct ModelVars {
    vars: BTreeMap<String, BaseVar>,
}

impl ModelVars {
    pub fn get(&self, name: &str) -> Result<&BaseVar> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Usage(format!("no parameter named {name}")))
    }

    fn dense(&self, name: &str) -> Result<Var> {
        match self.get(name)? {
            BaseVar::Dense(v) => Ok(*v),
            BaseVar::Quantized(_) => Err(Error::Usage(format!("{name} must be f32"))),
        }
    }

    /// Trainable (dense) leaves in parameter-name order.
    pub fn dense_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().filter_map(|(n, v)| match v {
            BaseVar::Dense(var) => Some((n.as_str(), *var)),
            BaseVar::Quantized(_) => None,
        })
    }
}

/// Masking applied inside [`attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    None,
    /// Query `i` sees the first `prefix_len` keys plus keys up to
    /// `prefix_len + i`.
    Causal {
        prefix_len: usize,
    },
}

/// `softmax(Q·Kᵀ/√d_k)·V` with rows as positions.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: AttentionMask,
) -> Result<Var> {
    let (_, d_k) = tape.value(q).dims2()?;
    let (s_k, d_k2) = tape.value(k).dims2()?;
    if d_k != d_k2 {
        return Err(Error::shape("attention", tape.shape(q), tape.shape(k)));
    }
    let (s_v, _) = tape.value(v).dims2()?;
    if s_v != s_k {
        return Err(Error::shape("attention", tape.shape(k), tape.shape(v)));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, T::from_f64(1.0 / (d_k as f64).sqrt()));
    let masked = match mask {
        AttentionMask::None => scaled,
        AttentionMask::Causal { prefix_len } => tape.causal_mask(scaled, prefix_len)?,
    };
    let weights = tape.softmax(masked, 1)?;
    tape.matmul(weights, v)
}

/// Feed-forward parameters for one layer.
pub struct FfnVars<'a> {
    pub w1: &'a BaseVar,
    pub b1: Var,
    pub w2: &'a BaseVar,
    pub b2: Var,
}

/// Position-wise feed-forward block on rows `x [s × d]`.
pub fn ffn<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &FfnVars<'_>,
    variant: FfnVariant,
    lora1: Option<&peft::LoraVars>,
    lora2: Option<&peft::LoraVars>,
) -> Result<Var> {
    let h = linear_rows(tape, x, params.w1, lora1)?;
    let h = tape.add_bias(h, params.b1)?;
    let h = tape.gelu(h);
    let out = linear_rows(tape, h, params.w2, lora2)?;
    match variant {
        FfnVariant::Paper => {
            let out = tape.gelu(out);
            tape.add_bias(out, params.b2)
        }
        FfnVariant::Standard => tape.add_bias(out, params.b2),
    }
}

/// Applies a `[d_out × d_in]` linear site to row vectors `x [s × d_in]`.
fn linear_rows<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &BaseVar,
    lora: Option<&peft::LoraVars>,
) -> Result<Var> {
    let xt = tape.transpose(x)?;
    let yt = peft::lora_forward(tape, w, lora, xt)?;
    tape.transpose(yt)
}

/// Full forward pass: token ids to logits `[seq_len × vocab]`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    config: &TransformerConfig,
    vars: &ModelVars,
    peft: Option<&PeftVars>,
    tokens: &[usize],
) -> Result<Var> {
    let s = tokens.len();
    if s == 0 {
        return Err(Error::Usage("empty token sequence".into()));
    }
    if s > config.max_seq_len {
        return Err(Error::Usage(format!(
            "sequence length {s} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Usage(format!(
            "token id {bad} out of range for vocab {}",
            config.vocab_size
        )));
    }
    let positions: Vec<usize> = (0..s).collect();
    let tok = tape.gather_rows(vars.dense("tok_emb")?, tokens)?;
    let pos = tape.gather_rows(vars.dense("pos_emb")?, &positions)?;
    let mut h = tape.add(tok, pos)?;

    let d_k = config.d_k();
    for layer in 0..config.n_layers {
        let lora = |site| peft.and_then(|p| p.lora(SiteId::linear(layer, site)));
        let w = |site: LinearSite| vars.get(&SiteId::linear(layer, site).weight_name().unwrap());

        let q = linear_rows(tape, h, w(LinearSite::Q)?, lora(LinearSite::Q))?;
        let k = linear_rows(tape, h, w(LinearSite::K)?, lora(LinearSite::K))?;
        let v = linear_rows(tape, h, w(LinearSite::V)?, lora(LinearSite::V))?;
        let prefix = peft.and_then(|p| p.prefix(layer));

        let mut heads = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let qh = tape.slice_cols(q, head * d_k, d_k)?;
            let kh = tape.slice_cols(k, head * d_k, d_k)?;
            let vh = tape.slice_cols(v, head * d_k, d_k)?;
            let out = match prefix {
                Some(pre) => {
                    let pk = tape.slice_cols(pre.pk, head * d_k, d_k)?;
                    let pv = tape.slice_cols(pre.pv, head * d_k, d_k)?;
                    peft::prefix_attend(tape, pk, pv, qh, kh, vh, true)?
                }
                None => attention(tape, qh, kh, vh, AttentionMask::Causal { prefix_len: 0 })?,
            };
            heads.push(out);
        }
        let merged = tape.concat_cols(&heads)?;
        let mut attn = linear_rows(tape, merged, w(LinearSite::O)?, lora(LinearSite::O))?;
        if let Some(ad) = peft.and_then(|p| {
            p.adapter(SiteId {
                layer,
                kind: SiteKind::AfterAttention,
            })
        }) {
            attn = peft::adapter_forward(tape, attn, ad.down, ad.up)?;
        }
        let res = tape.add(h, attn)?;
        h = tape.layer_norm(
            res,
            vars.dense(&format!("layers.{layer}.ln1.gamma"))?,
            vars.dense(&format!("layers.{layer}.ln1.beta"))?,
        )?;

        let ffn_vars = FfnVars {
            w1: w(LinearSite::Ffn1)?,
            b1: vars.dense(&format!("layers.{layer}.ffn1.bias"))?,
            w2: w(LinearSite::Ffn2)?,
            b2: vars.dense(&format!("layers.{layer}.ffn2.bias"))?,
        };
        let mut f = ffn(
            tape,
            h,
            &ffn_vars,
            config.ffn_variant,
            lora(LinearSite::Ffn1),
            lora(LinearSite::Ffn2),
        )?;
        if let Some(ad) = peft.and_then(|p| {
            p.adapter(SiteId {
                layer,
                kind: SiteKind::AfterFfn,
            })
        }) {
            f = peft::adapter_forward(tape, f, ad.down, ad.up)?;
        }
        let res = tape.add(h, f)?;
        h = tape.layer_norm(
            res,
            vars.dense(&format!("layers.{layer}.ln2.gamma"))?,
            vars.dense(&format!("layers.{layer}.ln2.beta"))?,
        )?;
    }
    linear_rows(tape, h, vars.get("lm_head.weight")?, None)
}

/// Mean masked cross-entropy of next-token `targets`.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<Var> {
    tape.cross_entropy(logits, targets, mask)
}
