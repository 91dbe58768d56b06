use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use peftkit::checkpoint::{self, BLOB_FILE, MANIFEST_FILE};
use peftkit::evalkit::{self, EvalConfig, MetricReport, Predictor, Scorer, TaskSet};
use peftkit::finetune::{self, FinetuneReport, TrainConfig};
use peftkit::model::{TransformerConfig, TransformerModel, Weight};
use peftkit::peft::{self, BaseMode, PeftSet};
use peftkit::quantize::SizeModel;
use peftkit::Error;

use crate::args::{EvalArgs, FinetuneArgs, InitArgs, MergeArgs, QuantizeArgs, ReportArgs};
use crate::run_manifest::RunManifest;

/// Refuses to overwrite an existing checkpoint unless forced.
fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !force {
            return Err(Error::Usage(format!(
                "{} already exists (pass --force to replace it)",
                out.display()
            ))
            .into());
        }
        for file in [MANIFEST_FILE, BLOB_FILE] {
            let p = out.join(file);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
    }
    Ok(())
}

fn load_model(dir: &Path) -> Result<TransformerModel> {
    checkpoint::load_model(dir).with_context(|| format!("loading model {}", dir.display()))
}

fn load_adapters(dir: &Path, model: &TransformerModel) -> Result<PeftSet> {
    let (set, cfg) = checkpoint::load_adapters(dir)
        .with_context(|| format!("loading adapters {}", dir.display()))?;
    if &cfg != model.config() {
        return Err(Error::Config(format!(
            "adapters in {} were built for a different model config",
            dir.display()
        ))
        .into());
    }
    set.check_compatible(model)?;
    Ok(set)
}

pub struct Outcome {
    pub manifest_path: PathBuf,
    pub manifest: RunManifest,
}

pub fn init(a: &InitArgs, seed: u64) -> Result<Outcome> {
    let mut run = RunManifest::start("init", seed);
    let config = TransformerConfig {
        vocab_size: a.vocab_size,
        d_model: a.d_model,
        n_heads: a.n_heads,
        n_layers: a.n_layers,
        d_ff: a.d_ff,
        max_seq_len: a.max_seq_len,
        ffn_variant: a.ffn_variant,
    };
    config.validate()?;
    prepare_out(&a.out, a.force)?;
    let model = TransformerModel::init(config.clone(), seed)?;
    checkpoint::save_model(&a.out, &model)?;
    println!(
        "initialized {} parameters in {} tensors -> {}",
        model.num_params(),
        model.params().len(),
        a.out.display()
    );
    run.config = json!({ "model": config, "out": a.out, "force": a.force });
    Ok(Outcome {
        manifest_path: a.out.join("run.json"),
        manifest: run,
    })
}

pub fn quantize(a: &QuantizeArgs, seed: u64) -> Result<Outcome> {
    let mut run = RunManifest::start("quantize", seed);
    if a.bits != 4 {
        return Err(Error::Usage(format!(
            "unsupported bit width {} (only 4-bit quantization is available)",
            a.bits
        ))
        .into());
    }
    if a.block == 0 {
        return Err(Error::Config("block size must be positive".into()).into());
    }
    run.add_input(&a.input)?;
    let model = load_model(&a.input)?;
    if model.is_quantized() {
        return Err(Error::Usage(format!("{} is already quantized", a.input.display())).into());
    }
    prepare_out(&a.out, a.force)?;
    let q = model.quantized(a.block)?;
    checkpoint::save_model(&a.out, &q)?;

    let mut q_weights = 0u64;
    let mut other = 0u64;
    let mut after = 0u64;
    for w in q.params().values() {
        let n = w.numel() as u64;
        match w {
            Weight::Q4(m) => {
                q_weights += n;
                after += SizeModel::q4(n, m.block_size() as u64).total_bytes();
            }
            Weight::F32(_) => {
                other += n;
                after += SizeModel::f32(n).total_bytes();
            }
        }
    }
    let before = SizeModel::f32(q_weights + other).total_bytes();
    let pure_before = SizeModel::f32(q_weights).total_bytes();
    let pure_after = peftkit::quantize::model_size_bytes(4, q_weights, 0);
    println!(
        "quantized {q_weights} weights to 4 bits (block {}); {other} values kept at 32 bits",
        a.block
    );
    println!("size before: {before} bytes");
    println!("size after:  {after} bytes (codes + per-block scales)");
    println!(
        "weight-only ratio: {:.2}x ({pure_before} -> {pure_after} bytes, overhead excluded)",
        pure_before as f64 / pure_after.max(1) as f64
    );
    run.config =
        json!({ "in": a.input, "out": a.out, "bits": a.bits, "block": a.block, "force": a.force });
    Ok(Outcome {
        manifest_path: a.out.join("run.json"),
        manifest: run,
    })
}

pub fn finetune(a: &FinetuneArgs, seed: u64) -> Result<Outcome> {
    let mut run = RunManifest::start("finetune", seed);
    run.add_input(&a.base)?;
    run.add_input(&a.dataset)?;
    let model = load_model(&a.base)?;
    let dataset = finetune::load_instruction_dataset(&a.dataset)
        .with_context(|| format!("reading dataset {}", a.dataset.display()))?;
    let config = TrainConfig {
        method: a.method,
        rank: a.rank,
        scale: a.scale,
        lora_sites: a.sites.clone(),
        learning_rate: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        max_seq_len: a.max_seq_len,
        seed,
        base_mode: if model.is_quantized() {
            BaseMode::Quantized4
        } else {
            BaseMode::Float32
        },
    };
    config.validate()?;
    prepare_out(&a.out, a.force)?;
    run.config = json!({ "train": config, "base": a.base, "dataset": a.dataset, "out": a.out });
    let manifest_path = a.out.join("run.json");

    let (set, report) = match finetune::finetune(&model, &config, &dataset) {
        Ok(v) => v,
        Err(Error::Diverged {
            epoch,
            step,
            last_good,
        }) => {
            checkpoint::save_adapters(&a.out, &last_good, model.config())?;
            run.finish(&manifest_path)?;
            return Err(Error::Numeric(format!(
                "training diverged at epoch {epoch}, step {step}; last good adapters saved to {}",
                a.out.display()
            ))
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    checkpoint::save_adapters(&a.out, &set, model.config())?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| a.out.join("report.json"));
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(&report_path, text)?;
    println!(
        "trained {} {} adapters ({} of {} parameters trainable) over {} steps",
        set.len(),
        set.method(),
        report.trainable_params,
        report.total_params,
        report.steps
    );
    if let Some(loss) = report.epoch_losses.last() {
        println!("final epoch loss: {loss:.4}");
    }
    println!(
        "adapters -> {}, report -> {}",
        a.out.display(),
        report_path.display()
    );
    Ok(Outcome {
        manifest_path,
        manifest: run,
    })
}

pub fn merge(a: &MergeArgs, seed: u64) -> Result<Outcome> {
    let mut run = RunManifest::start("merge", seed);
    run.add_input(&a.base)?;
    run.add_input(&a.adapters)?;
    let model = load_model(&a.base)?;
    let set = load_adapters(&a.adapters, &model)?;
    let merged = peft::merge(&model, &set)?;
    prepare_out(&a.out, a.force)?;
    checkpoint::save_model(&a.out, &merged)?;
    println!(
        "merged {} LoRA sites into {} tensors -> {}",
        set.len(),
        merged.params().len(),
        a.out.display()
    );
    run.config = json!({ "base": a.base, "adapters": a.adapters, "out": a.out, "force": a.force });
    Ok(Outcome {
        manifest_path: a.out.join("run.json"),
        manifest: run,
    })
}

struct Side {
    model: Option<TransformerModel>,
    peft: Option<PeftSet>,
    recorded: Option<TaskSet>,
}

impl Side {
    fn predictor(&self, max_new_tokens: usize) -> Predictor<'_> {
        match (&self.recorded, &self.model) {
            (Some(task), _) => Predictor::Recorded(task),
            (None, Some(model)) => Predictor::Model(Scorer {
                max_new_tokens,
                ..Scorer::new(model, self.peft.as_ref())
            }),
            (None, None) => unreachable!("sides are built with a source"),
        }
    }
}

fn model_side(run: &mut RunManifest, model: &Path, adapters: Option<&Path>) -> Result<Side> {
    run.add_input(model)?;
    let m = load_model(model)?;
    let peft = match adapters {
        Some(dir) => {
            run.add_input(dir)?;
            Some(load_adapters(dir, &m)?)
        }
        None => None,
    };
    Ok(Side {
        model: Some(m),
        peft,
        recorded: None,
    })
}

fn recorded_side(run: &mut RunManifest, path: &Path, kind: evalkit::TaskKind) -> Result<Side> {
    run.add_input(path)?;
    let task = evalkit::load_task_file(path, kind)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(Side {
        model: None,
        peft: None,
        recorded: Some(task),
    })
}

pub fn eval(a: &EvalArgs, seed: u64) -> Result<Outcome> {
    let mut run = RunManifest::start("eval", seed);
    let config = EvalConfig {
        epsilon: a.epsilon,
        z: a.z,
        ci_override: a.ci_base.zip(a.ci_ft),
    };
    config.validate()?;
    run.add_input(&a.task)?;
    let task = evalkit::load_task_file(&a.task, a.kind)
        .with_context(|| format!("reading {}", a.task.display()))?;

    let base = match (&a.base_predictions, &a.base) {
        (Some(p), _) => recorded_side(&mut run, p, a.kind)?,
        (None, Some(m)) => model_side(&mut run, m, a.base_adapters.as_deref())?,
        (None, None) => bail!(Error::Usage(
            "the base side needs --base or --base-predictions".into()
        )),
    };
    let ft = match (&a.ft_predictions, a.ft.as_ref().or(a.base.as_ref())) {
        (Some(p), _) => recorded_side(&mut run, p, a.kind)?,
        (None, Some(m)) if a.ft.is_some() || a.ft_adapters.is_some() => {
            model_side(&mut run, m, a.ft_adapters.as_deref())?
        }
        _ => bail!(Error::Usage(
            "the fine-tuned side needs --ft, --ft-adapters or --ft-predictions".into()
        )),
    };
    let report = evalkit::evaluate_pair(
        &base.predictor(a.max_new_tokens),
        &ft.predictor(a.max_new_tokens),
        &task,
        &config,
    )?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    print!("{}", evalkit::render_table(&report));
    let manifest_path = match &a.out {
        Some(out) => {
            fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
            with_suffix(out, ".run.json")
        }
        None => {
            print!("{text}");
            PathBuf::from("peftkit-eval.run.json")
        }
    };
    run.config = json!({
        "task": a.task,
        "kind": a.kind,
        "base": a.base,
        "base_adapters": a.base_adapters,
        "base_predictions": a.base_predictions,
        "ft": a.ft,
        "ft_adapters": a.ft_adapters,
        "ft_predictions": a.ft_predictions,
        "eval": config,
        "max_new_tokens": a.max_new_tokens,
        "out": a.out,
    });
    Ok(Outcome {
        manifest_path,
        manifest: run,
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn report(a: &ReportArgs, seed: u64) -> Result<Outcome> {
    let mut run = RunManifest::start("report", seed);
    run.add_input(&a.input)?;
    let text =
        fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let value: Value = serde_json::from_str(&text).map_err(Error::from)?;
    if value.get("delta_a").is_some() {
        let r: MetricReport = serde_json::from_value(value).map_err(Error::from)?;
        print!("{}", evalkit::render_table(&r));
    } else if value.get("epoch_losses").is_some() {
        let r: FinetuneReport = serde_json::from_value(value).map_err(Error::from)?;
        print!("{}", render_finetune(&r));
    } else {
        return Err(Error::parse(
            a.input.display().to_string(),
            "neither a metric report nor a fine-tuning report",
        )
        .into());
    }
    run.config = json!({ "input": a.input });
    Ok(Outcome {
        manifest_path: with_suffix(&a.input, ".report.run.json"),
        manifest: run,
    })
}

fn render_finetune(r: &FinetuneReport) -> String {
    let mut out = String::new();
    let pct = 100.0 * r.trainable_params as f64 / r.total_params.max(1) as f64;
    out += &format!(
        "trainable parameters: {} of {} ({pct:.2}%)\n",
        r.trainable_params, r.total_params
    );
    out += &format!("optimizer steps: {}\n", r.steps);
    for (i, l) in r.epoch_losses.iter().enumerate() {
        out += &format!("epoch {}: loss {l:.4}\n", i + 1);
    }
    out += &format!("truncated examples: {}\n", r.truncated_examples);
    out += &format!("wall clock: {:.1} s\n", r.wall_clock_seconds);
    let unchanged = if r.base_checksum_before == r.base_checksum_after {
        "unchanged"
    } else {
        "CHANGED"
    };
    out += &format!(
        "base checksum: {:016x} ({unchanged})\n",
        r.base_checksum_after
    );
    out
}
