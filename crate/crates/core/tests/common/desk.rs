//! Desk-scale forgetting experiment on two synthetic instruction tasks.
//!
//! Task A echoes a short lowercase word in uppercase (instruction `up`),
//! scored with normalized accuracy. Task B adds two digits (instruction
//! `add`), scored numerically. The base model is pretrained on every Task B
//! sum and only a handful of Task A examples, so Task A is weak and Task B
//! is strong before LoRA fine-tuning on Task A alone.

use peftkit::evalkit::tasks::{CompletionItem, NumericItem};
use peftkit::evalkit::{evaluate_pair, EvalConfig, MetricReport, Predictor, Scorer, TaskSet};
use peftkit::finetune::{
    self, format_prompt, prompt_text, FinetuneReport, InstructionExample, PretrainConfig,
    TrainConfig,
};
use peftkit::model::{TransformerConfig, TransformerModel};
use peftkit::peft::{BaseMode, PeftSet};
use peftkit::rng;
use rand::Rng;

pub const SEED: u64 = 0;
pub const PRETRAIN_TASK_A: usize = 60;
pub const PRETRAIN_TASK_B_COPIES: usize = 10;
pub const PRETRAIN_EPOCHS: usize = 8;
pub const FINETUNE_EXAMPLES: usize = 2_000;
pub const EVAL_TASK_A: usize = 100;
pub const MAX_NEW_TOKENS: usize = 8;

fn word(r: &mut impl Rng) -> String {
    let n = r.random_range(3..=4);
    (0..n)
        .map(|_| (b'a' + r.random_range(0..26u8)) as char)
        .collect()
}

pub fn task_a(n: usize, label: &str) -> Vec<InstructionExample> {
    let mut r = rng::substream(SEED, label);
    (0..n)
        .map(|_| {
            let w = word(&mut r);
            InstructionExample::new("up", w.clone(), w.to_uppercase())
        })
        .collect()
}

pub fn task_b() -> Vec<InstructionExample> {
    (0..10)
        .flat_map(|a| {
            (0..10).map(move |b| {
                InstructionExample::new("add", format!("{a}+{b}"), format!("{}", a + b))
            })
        })
        .collect()
}

pub fn eval_task_a() -> TaskSet {
    TaskSet::Completion(
        task_a(EVAL_TASK_A, "desk.eval.a")
            .into_iter()
            .map(|e| CompletionItem {
                context: prompt_text(&e.instruction, &e.input),
                prediction: None,
                truth: e.output,
            })
            .collect(),
    )
}

pub fn eval_task_b() -> TaskSet {
    TaskSet::Numeric(
        task_b()
            .into_iter()
            .map(|e| NumericItem {
                question: prompt_text(&e.instruction, &e.input),
                prediction_text: None,
                truth: e.output.parse().expect("sum is a number"),
            })
            .collect(),
    )
}

/// Desk model pretrained on both tasks, Task A deliberately scarce.
pub fn pretrained_base() -> TransformerModel {
    let cfg = TransformerConfig::desk();
    let mut model = TransformerModel::init(cfg.clone(), SEED).expect("desk config is valid");
    let mut data = Vec::new();
    for _ in 0..PRETRAIN_TASK_B_COPIES {
        data.extend(task_b());
    }
    data.extend(task_a(PRETRAIN_TASK_A, "desk.pretrain.a"));
    let formatted: Vec<_> = data
        .iter()
        .map(|e| format_prompt(e, cfg.max_seq_len + 1).expect("examples fit"))
        .collect();
    let pc = PretrainConfig {
        learning_rate: 2e-3,
        batch_size: 16,
        epochs: PRETRAIN_EPOCHS,
        seed: SEED,
    };
    finetune::pretrain(&mut model, &formatted, &pc).expect("pretraining runs");
    model
}

pub fn lora_config(base_mode: BaseMode) -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-3,
        epochs: 1,
        seed: SEED,
        base_mode,
        ..TrainConfig::lora(8)
    }
}

pub struct Outcome {
    pub peft: PeftSet,
    pub train: FinetuneReport,
    pub task_a: MetricReport,
    pub task_b: MetricReport,
}

/// LoRA fine-tunes `base` on Task A only and evaluates both tasks before and
/// after.
pub fn run(base: &TransformerModel, base_mode: BaseMode) -> Outcome {
    let data = task_a(FINETUNE_EXAMPLES, "desk.finetune.a");
    let (peft, train) =
        finetune::finetune(base, &lora_config(base_mode), &data).expect("fine-tuning runs");
    let before = Scorer {
        max_new_tokens: MAX_NEW_TOKENS,
        ..Scorer::new(base, None)
    };
    let after = Scorer {
        max_new_tokens: MAX_NEW_TOKENS,
        ..Scorer::new(base, Some(&peft))
    };
    let cfg = EvalConfig::default();
    let task_a = evaluate_pair(
        &Predictor::Model(before),
        &Predictor::Model(after),
        &eval_task_a(),
        &cfg,
    )
    .expect("task A evaluates");
    let task_b = evaluate_pair(
        &Predictor::Model(before),
        &Predictor::Model(after),
        &eval_task_b(),
        &cfg,
    )
    .expect("task B evaluates");
    Outcome {
        peft,
        train,
        task_a,
        task_b,
    }
}
