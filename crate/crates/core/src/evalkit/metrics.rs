//! Capability-retention metrics and the statistics behind their error bars.
//! Accuracies are percentages in `[0, 100]`.

use std::sync::OnceLock;

use regex::Regex;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// `lowercase(remove_punctuation(s))`: drops the 32 ASCII punctuation
/// characters, lowercases ASCII letters, and collapses whitespace runs to
/// single spaces with no leading or trailing space. Non-ASCII characters
/// pass through unchanged.
pub fn normalize_text(s: &str) -> String {
    let stripped: String = s
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .map(|c| c.to_ascii_lowercase())
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletionRecord {
    pub prediction: String,
    pub truth: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NumericRecord {
    /// Extracted answer; `None` when the output held no number.
    pub prediction: Option<f64>,
    pub truth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChoiceRecord {
    pub prediction: usize,
    pub truth: usize,
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

fn require_records(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::Usage("accuracy of an empty record set".into()))
    } else {
        Ok(())
    }
}

pub fn completion_correct(r: &CompletionRecord) -> bool {
    normalize_text(&r.prediction) == normalize_text(&r.truth)
}

/// Share of records whose normalized prediction equals the normalized truth.
pub fn accuracy_norm(records: &[CompletionRecord]) -> Result<f64> {
    require_records(records.len())?;
    let hits = records.iter().filter(|r| completion_correct(r)).count();
    Ok(percent(hits, records.len()))
}

/// `A_FT - A_base`.
pub fn delta_ability(a_ft_norm: f64, a_base_norm: f64) -> f64 {
    a_ft_norm - a_base_norm
}

fn number_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"-?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|-?\.\d+").expect("valid pattern")
    })
}

/// The last decimal numeral in `text`, with thousands separators removed.
/// A leading `-` counts as a sign unless it directly follows a letter or
/// digit (so `"5-3"` yields `3`).
pub fn extract_number(text: &str) -> Option<f64> {
    let m = number_pattern().find_iter(text).last()?;
    let mut s = m.as_str();
    if s.starts_with('-') {
        let glued = text[..m.start()]
            .chars()
            .next_back()
            .is_some_and(|c| c.is_alphanumeric());
        if glued {
            s = &s[1..];
        }
    }
    s.replace(',', "").parse().ok()
}

pub fn strict_correct(r: &NumericRecord) -> bool {
    r.prediction == Some(r.truth)
}

pub fn flex_correct(r: &NumericRecord, epsilon: f64) -> bool {
    r.prediction.is_some_and(|p| (p - r.truth).abs() < epsilon)
}

/// `(A_strict, A_flex)`: exact equality of extracted values, and agreement
/// within `epsilon`. Missing predictions are wrong under both.
pub fn numeric_accuracies(records: &[NumericRecord], epsilon: f64) -> Result<(f64, f64)> {
    require_records(records.len())?;
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let strict = records.iter().filter(|r| strict_correct(r)).count();
    let flex = records.iter().filter(|r| flex_correct(r, epsilon)).count();
    Ok((percent(strict, records.len()), percent(flex, records.len())))
}

/// `(1 - A_FT/A_base) × 100`. Negative when fine-tuning improved the score.
pub fn forgetting_rate(a_ft_flex: f64, a_base_flex: f64) -> Result<f64> {
    if a_base_flex == 0.0 {
        return Err(Error::Numeric(
            "forgetting rate is undefined for a base accuracy of zero".into(),
        ));
    }
    Ok((1.0 - a_ft_flex / a_base_flex) * 100.0)
}

pub fn choice_accuracy(records: &[ChoiceRecord]) -> Result<f64> {
    require_records(records.len())?;
    let hits = records.iter().filter(|r| r.prediction == r.truth).count();
    Ok(percent(hits, records.len()))
}

/// Wald interval half-width in percentage points: `z·√(p̂(1-p̂)/n) × 100`.
pub fn wald_ci(p_hat: f64, n: usize, z: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_hat) || n == 0 {
        return Err(Error::Usage(format!(
            "wald interval needs 0 <= p <= 1 and n >= 1, got p={p_hat}, n={n}"
        )));
    }
    Ok(z * (p_hat * (1.0 - p_hat) / n as f64).sqrt() * 100.0)
}

/// `(A_base - A_FT, √(CI_base² + CI_FT²))`.
pub fn knowledge_loss(a_base: f64, a_ft: f64, ci_base: f64, ci_ft: f64) -> Result<(f64, f64)> {
    if ci_base < 0.0 || ci_ft < 0.0 {
        return Err(Error::Usage(
            "confidence half-widths must be non-negative".into(),
        ));
    }
    Ok((a_base - a_ft, ci_base.hypot(ci_ft)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: usize,
}

/// Paired t-test on `d_i = base_i - ft_i` with `n - 1` degrees of freedom.
/// All-zero differences give `t = 0, p = 1`; constant non-zero differences
/// give an infinite `t` and `p = 0`.
pub fn paired_t_test(base: &[f64], ft: &[f64]) -> Result<TTest> {
    if base.len() != ft.len() {
        return Err(Error::Usage(format!(
            "paired t-test needs equal lengths, got {} and {}",
            base.len(),
            ft.len()
        )));
    }
    let n = base.len();
    if n < 2 {
        return Err(Error::Usage(
            "paired t-test needs at least two pairs".into(),
        ));
    }
    let d: Vec<f64> = base.iter().zip(ft).map(|(b, f)| b - f).collect();
    let df = n - 1;
    if d.iter().all(|&x| x == 0.0) {
        return Ok(TTest { t: 0.0, p: 1.0, df });
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / df as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(TTest {
            t: mean.signum() * f64::INFINITY,
            p: 0.0,
            df,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}

/// 0/1 indicator vector as floats, for [`paired_t_test`].
pub fn indicators(hits: impl IntoIterator<Item = bool>) -> Vec<f64> {
    hits.into_iter()
        .map(|h| if h { 1.0 } else { 0.0 })
        .collect()
}
