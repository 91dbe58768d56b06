//! Base-versus-fine-tuned comparison and its rendering.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

use super::metrics::{
    accuracy_norm, choice_accuracy, completion_correct, delta_ability, flex_correct,
    forgetting_rate, indicators, knowledge_loss, numeric_accuracies, paired_t_test, wald_ci,
    ChoiceRecord, CompletionRecord, NumericRecord,
};
use super::scoring::Scorer;
use super::tasks::{TaskKind, TaskSet};

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_Z: f64 = 1.96;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub epsilon: f64,
    pub z: f64,
    /// Externally supplied `(CI_base, CI_FT)` half-widths used for ΔK in
    /// place of the Wald intervals.
    #[serde(default)]
    pub ci_override: Option<(f64, f64)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            epsilon: DEFAULT_EPSILON,
            z: DEFAULT_Z,
            ci_override: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 || self.z.is_nan() || self.z <= 0.0 {
            return Err(Error::Config("epsilon and z must be positive".into()));
        }
        if let Some((a, b)) = self.ci_override {
            if !(a >= 0.0 && b >= 0.0) {
                return Err(Error::Config(
                    "confidence half-widths must be non-negative".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Predictions resolved against truths, one kind per set.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalRecords {
    Completion(Vec<CompletionRecord>),
    Numeric(Vec<NumericRecord>),
    Choice(Vec<ChoiceRecord>),
}

impl EvalRecords {
    pub fn len(&self) -> usize {
        match self {
            EvalRecords::Completion(v) => v.len(),
            EvalRecords::Numeric(v) => v.len(),
            EvalRecords::Choice(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-record correctness under the kind's primary metric (flexible
    /// match for numeric tasks).
    pub fn correct(&self, epsilon: f64) -> Vec<bool> {
        match self {
            EvalRecords::Completion(v) => v.iter().map(completion_correct).collect(),
            EvalRecords::Numeric(v) => v.iter().map(|r| flex_correct(r, epsilon)).collect(),
            EvalRecords::Choice(v) => v.iter().map(|r| r.prediction == r.truth).collect(),
        }
    }
}

/// Where one side of a comparison gets its answers.
pub enum Predictor<'a> {
    Model(Scorer<'a>),
    /// Predictions stored in a task file with the same records.
    Recorded(&'a TaskSet),
}

fn missing(i: usize) -> Error {
    Error::Usage(format!("record {} carries no prediction", i + 1))
}

fn mismatch(i: usize) -> Error {
    Error::Usage(format!(
        "prediction file differs from the task at record {}",
        i + 1
    ))
}

/// Answers every record of `task` with `predictor`, in record order.
pub fn resolve(task: &TaskSet, predictor: &Predictor<'_>) -> Result<EvalRecords> {
    match predictor {
        Predictor::Model(s) => resolve_with_model(task, s),
        Predictor::Recorded(file) => resolve_recorded(task, file),
    }
}

fn resolve_with_model(task: &TaskSet, s: &Scorer<'_>) -> Result<EvalRecords> {
    Ok(match task {
        TaskSet::Completion(items) => EvalRecords::Completion(
            items
                .iter()
                .map(|it| {
                    Ok(CompletionRecord {
                        prediction: s.complete(&it.context)?,
                        truth: it.truth.clone(),
                    })
                })
                .collect::<Result<_>>()?,
        ),
        TaskSet::Numeric(items) => EvalRecords::Numeric(
            items
                .iter()
                .map(|it| {
                    Ok(NumericRecord {
                        prediction: s.answer_number(&it.question)?,
                        truth: it.truth,
                    })
                })
                .collect::<Result<_>>()?,
        ),
        TaskSet::Choice(items) => EvalRecords::Choice(
            items
                .iter()
                .map(|it| {
                    Ok(ChoiceRecord {
                        prediction: s.choose(&it.question, &it.choices)?,
                        truth: it.truth_index,
                    })
                })
                .collect::<Result<_>>()?,
        ),
    })
}

fn resolve_recorded(task: &TaskSet, file: &TaskSet) -> Result<EvalRecords> {
    if task.kind() != file.kind() {
        return Err(Error::Usage(format!(
            "prediction file is {} but the task is {}",
            file.kind(),
            task.kind()
        )));
    }
    if task.len() != file.len() {
        return Err(Error::Usage(format!(
            "prediction file has {} records, the task has {}",
            file.len(),
            task.len()
        )));
    }
    Ok(match (task, file) {
        (TaskSet::Completion(t), TaskSet::Completion(f)) => EvalRecords::Completion(
            t.iter()
                .zip(f)
                .enumerate()
                .map(|(i, (a, b))| {
                    if a.context != b.context || a.truth != b.truth {
                        return Err(mismatch(i));
                    }
                    Ok(CompletionRecord {
                        prediction: b.prediction.clone().ok_or_else(|| missing(i))?,
                        truth: a.truth.clone(),
                    })
                })
                .collect::<Result<_>>()?,
        ),
        (TaskSet::Numeric(t), TaskSet::Numeric(f)) => EvalRecords::Numeric(
            t.iter()
                .zip(f)
                .enumerate()
                .map(|(i, (a, b))| {
                    if a.question != b.question || a.truth != b.truth {
                        return Err(mismatch(i));
                    }
                    let text = b.prediction_text.as_deref().ok_or_else(|| missing(i))?;
                    Ok(NumericRecord {
                        prediction: super::metrics::extract_number(text),
                        truth: a.truth,
                    })
                })
                .collect::<Result<_>>()?,
        ),
        (TaskSet::Choice(t), TaskSet::Choice(f)) => EvalRecords::Choice(
            t.iter()
                .zip(f)
                .enumerate()
                .map(|(i, (a, b))| {
                    if a.question != b.question
                        || a.choices != b.choices
                        || a.truth_index != b.truth_index
                    {
                        return Err(mismatch(i));
                    }
                    Ok(ChoiceRecord {
                        prediction: b.prediction_index.ok_or_else(|| missing(i))?,
                        truth: a.truth_index,
                    })
                })
                .collect::<Result<_>>()?,
        ),
        _ => unreachable!("kinds checked above"),
    })
}

/// Every metric for one base/fine-tuned pair. Accuracies, deltas and CI
/// half-widths are percentages; per-kind accuracies not applicable to the
/// task are absent. ΔA, FR, ΔK, the CIs and the t-test all refer to the
/// kind's primary accuracy (A_norm, A_flex or A).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kind: TaskKind,
    pub n: usize,
    #[serde(with = "pct_opt", default)]
    pub a_norm_base: Option<f64>,
    #[serde(with = "pct_opt", default)]
    pub a_norm_ft: Option<f64>,
    #[serde(with = "pct_opt", default)]
    pub a_strict_base: Option<f64>,
    #[serde(with = "pct_opt", default)]
    pub a_strict_ft: Option<f64>,
    #[serde(with = "pct_opt", default)]
    pub a_flex_base: Option<f64>,
    #[serde(with = "pct_opt", default)]
    pub a_flex_ft: Option<f64>,
    #[serde(with = "pct_opt", default)]
    pub a_base: Option<f64>,
    #[serde(with = "pct_opt", default)]
    pub a_ft: Option<f64>,
    #[serde(with = "pct")]
    pub delta_a: f64,
    /// Absent when the base accuracy is zero.
    #[serde(with = "pct_opt", default)]
    pub forgetting_rate: Option<f64>,
    #[serde(with = "pct")]
    pub ci_base: f64,
    #[serde(with = "pct")]
    pub ci_ft: f64,
    #[serde(with = "pct")]
    pub delta_k: f64,
    #[serde(with = "pct")]
    pub delta_k_half_width: f64,
    #[serde(with = "extended")]
    pub t: f64,
    pub p: f64,
}

impl MetricReport {
    pub fn primary_base(&self) -> f64 {
        self.a_norm_base
            .or(self.a_flex_base)
            .or(self.a_base)
            .unwrap_or(0.0)
    }

    pub fn primary_ft(&self) -> f64 {
        self.a_norm_ft
            .or(self.a_flex_ft)
            .or(self.a_ft)
            .unwrap_or(0.0)
    }
}

pub(crate) fn round2(x: f64) -> f64 {
    if x.is_finite() {
        (x * 100.0).round() / 100.0
    } else {
        x
    }
}

mod pct {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(round2(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        f64::deserialize(d)
    }
}

mod pct_opt {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_some(&round2(*x)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Option<f64>, D::Error> {
        Option::<f64>::deserialize(d)
    }
}

/// Finite values as numbers, infinities as the strings `"inf"`/`"-inf"`.
mod extended {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad number {t:?}"))),
        }
    }
}

/// Assembles the report from resolved records of both sides.
pub fn compare(base: &EvalRecords, ft: &EvalRecords, config: &EvalConfig) -> Result<MetricReport> {
    config.validate()?;
    if base.len() != ft.len() {
        return Err(Error::Usage(
            "both sides must answer the same records".into(),
        ));
    }
    let n = base.len();
    let mut report = MetricReport {
        kind: TaskKind::Completion,
        n,
        a_norm_base: None,
        a_norm_ft: None,
        a_strict_base: None,
        a_strict_ft: None,
        a_flex_base: None,
        a_flex_ft: None,
        a_base: None,
        a_ft: None,
        delta_a: 0.0,
        forgetting_rate: None,
        ci_base: 0.0,
        ci_ft: 0.0,
        delta_k: 0.0,
        delta_k_half_width: 0.0,
        t: 0.0,
        p: 1.0,
    };
    match (base, ft) {
        (EvalRecords::Completion(b), EvalRecords::Completion(f)) => {
            report.kind = TaskKind::Completion;
            report.a_norm_base = Some(accuracy_norm(b)?);
            report.a_norm_ft = Some(accuracy_norm(f)?);
        }
        (EvalRecords::Numeric(b), EvalRecords::Numeric(f)) => {
            report.kind = TaskKind::Numeric;
            let (sb, fb) = numeric_accuracies(b, config.epsilon)?;
            let (sf, ff) = numeric_accuracies(f, config.epsilon)?;
            report.a_strict_base = Some(sb);
            report.a_flex_base = Some(fb);
            report.a_strict_ft = Some(sf);
            report.a_flex_ft = Some(ff);
        }
        (EvalRecords::Choice(b), EvalRecords::Choice(f)) => {
            report.kind = TaskKind::Choice;
            report.a_base = Some(choice_accuracy(b)?);
            report.a_ft = Some(choice_accuracy(f)?);
        }
        _ => return Err(Error::Usage("both sides must be the same task kind".into())),
    }
    let (a_base, a_ft) = (report.primary_base(), report.primary_ft());
    report.delta_a = delta_ability(a_ft, a_base);
    report.forgetting_rate = forgetting_rate(a_ft, a_base).ok();
    let (ci_base, ci_ft) = match config.ci_override {
        Some(ci) => ci,
        None => (
            wald_ci(a_base / 100.0, n, config.z)?,
            wald_ci(a_ft / 100.0, n, config.z)?,
        ),
    };
    report.ci_base = ci_base;
    report.ci_ft = ci_ft;
    (report.delta_k, report.delta_k_half_width) = knowledge_loss(a_base, a_ft, ci_base, ci_ft)?;
    if n >= 2 {
        let tt = paired_t_test(
            &indicators(base.correct(config.epsilon)),
            &indicators(ft.correct(config.epsilon)),
        )?;
        report.t = tt.t;
        report.p = tt.p;
    }
    Ok(report)
}

/// Runs both predictors over the same task records and compares them.
pub fn evaluate_pair(
    base: &Predictor<'_>,
    ft: &Predictor<'_>,
    task: &TaskSet,
    config: &EvalConfig,
) -> Result<MetricReport> {
    config.validate()?;
    let b = resolve(task, base)?;
    let f = resolve(task, ft)?;
    compare(&b, &f, config)
}

fn with_ci(a: f64, ci: f64) -> String {
    format!("{a:.2}% ± {ci:.2}%")
}

fn plain(a: Option<f64>) -> String {
    a.map_or_else(|| "-".to_string(), |v| format!("{v:.2}%"))
}

/// Fixed-width text table: one row per accuracy with base and fine-tuned
/// columns, then the derived comparison rows.
pub fn render_table(r: &MetricReport) -> String {
    let mut rows: Vec<[String; 3]> = Vec::new();
    let task = r.kind.name();
    match r.kind {
        TaskKind::Completion => {
            rows.push([
                "Normalized Accuracy (A_norm)".into(),
                with_ci(r.primary_base(), r.ci_base),
                with_ci(r.primary_ft(), r.ci_ft),
            ]);
        }
        TaskKind::Numeric => {
            rows.push([
                "Flexible Accuracy (A_flex)".into(),
                with_ci(r.primary_base(), r.ci_base),
                with_ci(r.primary_ft(), r.ci_ft),
            ]);
            rows.push([
                "Strict Accuracy (A_strict)".into(),
                plain(r.a_strict_base),
                plain(r.a_strict_ft),
            ]);
        }
        TaskKind::Choice => {
            rows.push([
                "Accuracy (A)".into(),
                with_ci(r.primary_base(), r.ci_base),
                with_ci(r.primary_ft(), r.ci_ft),
            ]);
        }
    }
    rows.push([
        "Ability Augmentation (ΔA)".into(),
        String::new(),
        format!("{:+.2}%", r.delta_a),
    ]);
    rows.push([
        "Forgetting Rate (FR)".into(),
        String::new(),
        plain(r.forgetting_rate),
    ]);
    rows.push([
        "Knowledge Loss (ΔK)".into(),
        String::new(),
        with_ci(r.delta_k, r.delta_k_half_width),
    ]);
    rows.push([
        "Paired t-test".into(),
        String::new(),
        format!("t = {:.3}, p = {:.4}", r.t, r.p),
    ]);

    let w0 = rows
        .iter()
        .map(|r| r[0].chars().count())
        .max()
        .unwrap_or(0)
        .max(6);
    let w1 = rows
        .iter()
        .map(|r| r[1].chars().count())
        .max()
        .unwrap_or(0)
        .max(4);
    let mut out = format!("task: {task}  n = {}\n", r.n);
    let line = |a: &str, b: &str, c: &str| {
        format!(
            "{a}{}  {b}{}  {c}\n",
            " ".repeat(w0 - a.chars().count()),
            " ".repeat(w1 - b.chars().count())
        )
    };
    out += &line("Metric", "Base", "Fine-tuned");
    for [a, b, c] in &rows {
        out += &line(a, b, c);
    }
    out
}
