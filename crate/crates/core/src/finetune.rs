//! Instruction-dataset ingestion and the supervised tuning loops.
//!
//! [`finetune`] trains adapter parameters only; the base model is borrowed
//! immutably and its checksum is recorded before and after as evidence.
//! [`pretrain`] updates every dense base parameter and exists to build
//! small base models to tune.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{self, LinearSite, TransformerModel};
use crate::peft::{BaseMode, Method, PeftConfig, PeftSet};
use crate::rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{self, BOS, EOS};

/// Global gradient-norm clip.
pub const GRAD_CLIP_NORM: f32 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    pub output: String,
}

impl InstructionExample {
    pub fn new(
        instruction: impl Into<String>,
        input: impl Into<String>,
        output: impl Into<String>,
    ) -> Self {
        InstructionExample {
            instruction: instruction.into(),
            input: input.into(),
            output: output.into(),
        }
    }
}

fn record_from_value(v: &Value, location: &str) -> Result<InstructionExample> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::parse(location, "record is not a JSON object"))?;
    let field = |key: &str| -> Result<String> {
        match obj.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(Error::parse(
                location,
                format!("key {key:?} is not a string"),
            )),
            None => Err(Error::parse(location, format!("missing key {key:?}"))),
        }
    };
    let ex = InstructionExample {
        instruction: field("instruction")?,
        input: field("input")?,
        output: field("output")?,
    };
    if ex.instruction.is_empty() || ex.output.is_empty() {
        return Err(Error::parse(
            location,
            "instruction and output must be non-empty",
        ));
    }
    Ok(ex)
}

/// Parses an Alpaca-style dataset: a JSON array or JSON-lines of objects
/// with `instruction`, `input` and `output` string keys.
pub fn parse_instruction_dataset(text: &str) -> Result<Vec<InstructionExample>> {
    let trimmed = text.trim_start_matches('\u{feff}').trim();
    if trimmed.is_empty() {
        return Err(Error::Usage("instruction dataset is empty".into()));
    }
    let out: Vec<InstructionExample> = if trimmed.starts_with('[') {
        let values: Vec<Value> = serde_json::from_str(trimmed)
            .map_err(|e| Error::parse(format!("line {}", e.line()), e.to_string()))?;
        values
            .iter()
            .enumerate()
            .map(|(i, v)| record_from_value(v, &format!("record {i}")))
            .collect::<Result<_>>()?
    } else {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let loc = format!("line {}", i + 1);
            let v: Value =
                serde_json::from_str(line).map_err(|e| Error::parse(&loc, e.to_string()))?;
            out.push(record_from_value(&v, &loc)?);
        }
        out
    };
    if out.is_empty() {
        return Err(Error::Usage("instruction dataset has no records".into()));
    }
    Ok(out)
}

pub fn load_instruction_dataset(path: &Path) -> Result<Vec<InstructionExample>> {
    parse_instruction_dataset(&std::fs::read_to_string(path)?)
}

/// Token sequence of one training example with its loss mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormattedExample {
    pub tokens: Vec<usize>,
    /// Set on response tokens (output and the trailing EOS).
    pub loss_mask: Vec<bool>,
    /// The response was cut to fit `max_seq_len`.
    pub truncated: bool,
}

/// The prompt text up to and including the response header.
pub fn prompt_text(instruction: &str, input: &str) -> String {
    if input.is_empty() {
        format!("### Instruction:\n{instruction}\n### Response:\n")
    } else {
        format!("### Instruction:\n{instruction}\n### Input:\n{input}\n### Response:\n")
    }
}

/// BOS followed by the prompt tokens; the context for generation.
pub fn prompt_tokens(instruction: &str, input: &str) -> Vec<usize> {
    let mut tokens = vec![BOS];
    tokens.extend(tokenizer::encode(&prompt_text(instruction, input)));
    tokens
}

/// BOS, prompt, response, EOS. The `### Input:` block is omitted when the
/// input is empty. Responses that do not fit are truncated from the end.
pub fn format_prompt(ex: &InstructionExample, max_seq_len: usize) -> Result<FormattedExample> {
    let mut tokens = prompt_tokens(&ex.instruction, &ex.input);
    let prompt_len = tokens.len();
    if prompt_len >= max_seq_len {
        return Err(Error::Usage(format!(
            "prompt of {prompt_len} tokens leaves no room for a response within {max_seq_len}"
        )));
    }
    tokens.extend(tokenizer::encode(&ex.output));
    tokens.push(EOS);
    let truncated = tokens.len() > max_seq_len;
    tokens.truncate(max_seq_len);
    let mut loss_mask = vec![false; prompt_len];
    loss_mask.resize(tokens.len(), true);
    Ok(FormattedExample {
        tokens,
        loss_mask,
        truncated,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f32) -> f32 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// LoRA rank, adapter bottleneck, or prefix length.
    pub rank: usize,
    #[serde(default = "one")]
    pub scale: f32,
    #[serde(default = "qkv")]
    pub lora_sites: Vec<LinearSite>,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub base_mode: BaseMode,
}

fn one() -> f32 {
    1.0
}

fn qkv() -> Vec<LinearSite> {
    vec![LinearSite::Q, LinearSite::K, LinearSite::V]
}

impl TrainConfig {
    pub fn lora(rank: usize) -> Self {
        TrainConfig {
            method: Method::Lora,
            rank,
            scale: 1.0,
            lora_sites: qkv(),
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 1,
            max_seq_len: 64,
            seed: 0,
            base_mode: BaseMode::Float32,
        }
    }

    pub fn peft_config(&self) -> PeftConfig {
        PeftConfig {
            method: self.method,
            rank: self.rank,
            scale: self.scale,
            lora_sites: self.lora_sites.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.batch_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(
                "rank, batch_size and max_seq_len must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epoch_losses: Vec<f32>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub wall_clock_seconds: f64,
    pub base_checksum_before: u64,
    pub base_checksum_after: u64,
    pub truncated_examples: usize,
    pub steps: usize,
}

/// Next-token loss of one formatted example on a tape: inputs are
/// `tokens[..n-1]`, targets `tokens[1..]`.
fn example_loss(
    tape: &mut Tape<f32>,
    model: &TransformerModel,
    vars: &model::ModelVars,
    peft: Option<&crate::peft::PeftVars>,
    ex: &FormattedExample,
) -> Result<Var> {
    let n = ex.tokens.len();
    if n < 2 {
        return Err(Error::Usage("example needs at least two tokens".into()));
    }
    let logits = model::forward(tape, model.config(), vars, peft, &ex.tokens[..n - 1])?;
    model::cross_entropy(tape, logits, &ex.tokens[1..], &ex.loss_mask[1..])
}

/// Mean masked loss of `batch` under `model` + `peft`, without updating.
pub fn batch_loss(
    model: &TransformerModel,
    peft: Option<&PeftSet>,
    batch: &[FormattedExample],
) -> Result<f32> {
    let mut total = 0.0;
    for ex in batch {
        let mut tape = Tape::<f32>::new();
        let vars = model.bind(&mut tape, false);
        let pv = peft.map(|p| p.bind(&mut tape, false));
        let loss = example_loss(&mut tape, model, &vars, pv.as_ref(), ex)?;
        total += tape.value(loss).data()[0];
    }
    Ok(total / batch.len() as f32)
}

/// Sum of per-example losses scaled by `1/len` so gradients are batch means.
fn batch_objective(
    tape: &mut Tape<f32>,
    model: &TransformerModel,
    vars: &model::ModelVars,
    peft: Option<&crate::peft::PeftVars>,
    batch: &[&FormattedExample],
) -> Result<(Var, f32)> {
    let mut acc: Option<Var> = None;
    let mut raw = 0.0;
    for ex in batch {
        let l = example_loss(tape, model, vars, peft, ex)?;
        raw += tape.value(l).data()[0];
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    let total = acc.ok_or_else(|| Error::Usage("empty batch".into()))?;
    Ok((tape.scale(total, 1.0 / batch.len() as f32), raw))
}

fn collect_grads(grads: &mut Gradients<f32>, vars: &[Var]) -> Vec<Tensor<f32>> {
    vars.iter()
        .map(|&v| grads.take(v).expect("trainable leaf has a gradient"))
        .collect()
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Numeric(_))
}

/// Trains freshly initialized adapters on `dataset` with masked
/// cross-entropy and Adam. Only adapter tensors are updated.
pub fn finetune(
    model: &TransformerModel,
    config: &TrainConfig,
    dataset: &[InstructionExample],
) -> Result<(PeftSet, FinetuneReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("cannot fine-tune on an empty dataset".into()));
    }
    let quantized = model.is_quantized();
    if quantized != (config.base_mode == BaseMode::Quantized4) {
        return Err(Error::Config(format!(
            "base_mode {:?} does not match a {} base model",
            config.base_mode,
            if quantized { "4-bit" } else { "f32" }
        )));
    }
    let start = Instant::now();
    let checksum_before = model.checksum();
    let max_len = config.max_seq_len.min(model.config().max_seq_len + 1);
    let examples = dataset
        .iter()
        .map(|ex| format_prompt(ex, max_len))
        .collect::<Result<Vec<_>>>()?;

    let mut peft = PeftSet::init(
        model.config(),
        &config.peft_config(),
        config.base_mode,
        config.seed,
    )?;
    peft.check_compatible(model)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = rng::substream(config.seed, "finetune.shuffle");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&FormattedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut tape = Tape::<f32>::new();
            let vars = model.bind(&mut tape, false);
            let pv = peft.bind(&mut tape, true);
            let diverged = || Error::Diverged {
                epoch,
                step: steps,
                last_good: Box::new(peft.clone()),
            };
            let (objective, raw) = match batch_objective(&mut tape, model, &vars, Some(&pv), &batch)
            {
                Ok(v) => v,
                Err(e) if is_divergence(&e) => return Err(diverged()),
                Err(e) => return Err(e),
            };
            if !raw.is_finite() {
                return Err(diverged());
            }
            let mut grads = tape.backward(objective)?;
            let mut g = collect_grads(&mut grads, pv.vars());
            if !g.iter().all(Tensor::all_finite) {
                return Err(diverged());
            }
            clip_global_norm(&mut g, GRAD_CLIP_NORM);
            adam.step(&mut peft.tensors_mut(), &g);
            epoch_total += raw as f64;
            steps += 1;
        }
        epoch_losses.push((epoch_total / examples.len() as f64) as f32);
    }

    let report = FinetuneReport {
        epoch_losses,
        trainable_params: peft.num_params(),
        total_params: model.num_params() + peft.num_params(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        base_checksum_before: checksum_before,
        base_checksum_after: model.checksum(),
        truncated_examples: examples.iter().filter(|e| e.truncated).count(),
        steps,
    };
    Ok((peft, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

/// Full-parameter training of every dense weight. Returns per-epoch mean
/// losses.
pub fn pretrain(
    model: &mut TransformerModel,
    examples: &[FormattedExample],
    config: &PretrainConfig,
) -> Result<Vec<f32>> {
    if model.is_quantized() {
        return Err(Error::Usage("cannot pretrain a 4-bit model".into()));
    }
    if examples.is_empty() || config.batch_size == 0 {
        return Err(Error::Usage(
            "pretraining needs examples and a positive batch size".into(),
        ));
    }
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = rng::substream(config.seed, "pretrain.shuffle");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&FormattedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut tape = Tape::<f32>::new();
            let vars = model.bind(&mut tape, true);
            let (objective, raw) = batch_objective(&mut tape, model, &vars, None, &batch)?;
            if !raw.is_finite() {
                return Err(Error::Numeric("pretraining loss is not finite".into()));
            }
            let leaves: Vec<Var> = vars.dense_vars().map(|(_, v)| v).collect();
            let mut grads = tape.backward(objective)?;
            let mut g = collect_grads(&mut grads, &leaves);
            clip_global_norm(&mut g, GRAD_CLIP_NORM);
            let mut params: Vec<&mut Tensor<f32>> = model
                .params_mut()
                .values_mut()
                .filter_map(|w| match w {
                    crate::model::Weight::F32(t) => Some(t),
                    crate::model::Weight::Q4(_) => None,
                })
                .collect();
            adam.step(&mut params, &g);
            total += raw as f64;
        }
        losses.push((total / examples.len() as f64) as f32);
    }
    Ok(losses)
}
