//! Straight-line reference implementations of the evaluation metrics,
//! written without the library's helpers, plus random record generators
//! whose expected values are known by construction.

use peftkit::evalkit::{ChoiceRecord, CompletionRecord, NumericRecord};
use rand::Rng;

const PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

pub fn normalize(s: &str) -> String {
    let mut out = String::new();
    let mut pending_space = false;
    for c in s.chars() {
        if PUNCTUATION.contains(c) {
            continue;
        }
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.push(if c.is_ascii_uppercase() {
            (c as u8 + 32) as char
        } else {
            c
        });
    }
    out
}

fn pct(count: usize, n: usize) -> f64 {
    100.0 * count as f64 / n as f64
}

pub fn accuracy_norm(rs: &[CompletionRecord]) -> f64 {
    let mut count = 0;
    for r in rs {
        if normalize(&r.prediction) == normalize(&r.truth) {
            count += 1;
        }
    }
    pct(count, rs.len())
}

pub fn numeric(rs: &[NumericRecord], eps: f64) -> (f64, f64) {
    let (mut strict, mut flex) = (0, 0);
    for r in rs {
        if let Some(p) = r.prediction {
            if p == r.truth {
                strict += 1;
            }
            if (p - r.truth).abs() < eps {
                flex += 1;
            }
        }
    }
    (pct(strict, rs.len()), pct(flex, rs.len()))
}

pub fn choice(rs: &[ChoiceRecord]) -> f64 {
    pct(
        rs.iter().filter(|r| r.prediction == r.truth).count(),
        rs.len(),
    )
}

pub fn wald(p: f64, n: usize, z: f64) -> f64 {
    100.0 * z * (p * (1.0 - p) / n as f64).sqrt()
}

/// `Γ((ν+1)/2) / Γ(ν/2)` for integer `ν ≥ 1`, from `r(1) = 1/√π` and
/// `r(ν)·r(ν+1) = ν/2`.
fn gamma_ratio(nu: usize) -> f64 {
    let mut r = 1.0 / std::f64::consts::PI.sqrt();
    for k in 1..nu {
        r = (k as f64 / 2.0) / r;
    }
    r
}

fn t_density(x: f64, nu: usize) -> f64 {
    let v = nu as f64;
    gamma_ratio(nu) / (v * std::f64::consts::PI).sqrt() * (1.0 + x * x / v).powf(-(v + 1.0) / 2.0)
}

/// Two-sided tail `2·(1/2 - ∫₀^|t| f)`, composite Simpson on `[0, |t|]`.
pub fn two_sided_p(t: f64, nu: usize) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let b = t.abs();
    let intervals = 40_000;
    let h = b / intervals as f64;
    let mut s = t_density(0.0, nu) + t_density(b, nu);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * t_density(i as f64 * h, nu);
    }
    let central = s * h / 3.0;
    (1.0 - 2.0 * central).max(0.0)
}

/// `(t, p)` of the paired test on `base - ft`.
pub fn paired_t(base: &[f64], ft: &[f64]) -> (f64, f64) {
    let n = base.len();
    let d: Vec<f64> = (0..n).map(|i| base[i] - ft[i]).collect();
    if d.iter().all(|&x| x == 0.0) {
        return (0.0, 1.0);
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let mut ss = 0.0;
    for x in &d {
        ss += (x - mean).powi(2);
    }
    let sd = (ss / (n - 1) as f64).sqrt();
    if sd == 0.0 {
        return (
            if mean > 0.0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            },
            0.0,
        );
    }
    let t = mean * (n as f64).sqrt() / sd;
    (t, two_sided_p(t, n - 1))
}

const WORDS: [&str; 6] = ["cat", "dog", "Rust", "hello world", "x", "a-b"];

fn decorate(r: &mut impl Rng, w: &str) -> String {
    let mut s: String = w
        .chars()
        .map(|c| {
            if r.random_bool(0.5) {
                c.to_ascii_uppercase()
            } else {
                c
            }
        })
        .collect();
    if r.random_bool(0.3) {
        s.push_str(["!", ".", "?", ",", "..."][r.random_range(0..5)]);
    }
    if r.random_bool(0.2) {
        s = format!("  {s}\t");
    }
    s
}

pub fn completion_records(r: &mut impl Rng, n: usize) -> Vec<CompletionRecord> {
    (0..n)
        .map(|_| {
            let truth = WORDS[r.random_range(0..WORDS.len())];
            let pred = if r.random_bool(0.5) {
                truth
            } else {
                WORDS[r.random_range(0..WORDS.len())]
            };
            CompletionRecord {
                prediction: decorate(r, pred),
                truth: truth.to_string(),
            }
        })
        .collect()
}

/// Text around a known number in one of several written forms, and the
/// number it should yield.
pub fn numeric_text(r: &mut impl Rng) -> (String, Option<f64>) {
    let value: f64 = match r.random_range(0..4) {
        0 => r.random_range(-99..100) as f64,
        1 => r.random_range(0..100_000) as f64,
        2 => r.random_range(-5000..5000) as f64 / 100.0,
        _ => r.random_range(0..10) as f64,
    };
    let written = if value.fract() == 0.0 && value.abs() >= 1000.0 && r.random_bool(0.5) {
        let digits = format!("{}", value.abs() as u64);
        let mut grouped = String::new();
        for (i, c) in digits.chars().enumerate() {
            if i > 0 && (digits.len() - i) % 3 == 0 {
                grouped.push(',');
            }
            grouped.push(c);
        }
        if value < 0.0 {
            format!("-{grouped}")
        } else {
            grouped
        }
    } else {
        format!("{value}")
    };
    match r.random_range(0..5) {
        0 => ("no answer".to_string(), None),
        1 => (format!("The answer is {written}."), Some(value)),
        2 => (format!("3 steps give {written}"), Some(value)),
        3 => (written.to_string(), Some(value)),
        _ => (format!("we had 12 and now {written} remain"), Some(value)),
    }
}

pub fn numeric_records(r: &mut impl Rng, n: usize) -> Vec<(String, NumericRecord)> {
    (0..n)
        .map(|_| {
            let (text, value) = numeric_text(r);
            let truth = match (value, r.random_range(0..3)) {
                (Some(v), 0) => v,
                (Some(v), 1) => v + [0.005, -0.004, 0.02, 1.0][r.random_range(0..4)],
                _ => r.random_range(-10..10) as f64,
            };
            (
                text,
                NumericRecord {
                    prediction: value,
                    truth,
                },
            )
        })
        .collect()
}

pub fn choice_records(r: &mut impl Rng, n: usize) -> Vec<ChoiceRecord> {
    (0..n)
        .map(|_| ChoiceRecord {
            prediction: r.random_range(0..4),
            truth: r.random_range(0..4),
        })
        .collect()
}

/// Values within `tol`, or both infinite with one sign.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    if a.is_infinite() || b.is_infinite() {
        return a == b;
    }
    (a - b).abs() <= tol
}

/// Checks every metric on `sets` random record-set pairs against the
/// reference implementations. Returns the number of comparisons made, or
/// the first disagreement.
pub fn run(sets: usize, seed: u64) -> Result<usize, String> {
    use peftkit::evalkit::{self as ek, compare, EvalConfig, EvalRecords};

    let mut r = peftkit::rng::substream(seed, "metric-oracle");
    let cfg = EvalConfig::default();
    let mut checks = 0usize;
    let mut expect = |ok: bool, what: String| -> Result<(), String> {
        checks += 1;
        if ok {
            Ok(())
        } else {
            Err(what)
        }
    };
    for set in 0..sets {
        let n = r.random_range(1..=50);
        let (base, ft, a_base, a_ft, hits_base, hits_ft) = match set % 3 {
            0 => {
                let b = completion_records(&mut r, n);
                let f = completion_records(&mut r, n);
                for rec in b.iter().chain(&f) {
                    let lib = ek::normalize_text(&rec.prediction);
                    expect(
                        lib == normalize(&rec.prediction),
                        format!("normalize {:?}", rec.prediction),
                    )?;
                }
                let (ab, af) = (accuracy_norm(&b), accuracy_norm(&f));
                expect(
                    ek::accuracy_norm(&b).unwrap() == ab,
                    format!("set {set}: accuracy_norm"),
                )?;
                let hb: Vec<bool> = b
                    .iter()
                    .map(|x| normalize(&x.prediction) == normalize(&x.truth))
                    .collect();
                let hf: Vec<bool> = f
                    .iter()
                    .map(|x| normalize(&x.prediction) == normalize(&x.truth))
                    .collect();
                (
                    EvalRecords::Completion(b),
                    EvalRecords::Completion(f),
                    ab,
                    af,
                    hb,
                    hf,
                )
            }
            1 => {
                let b = numeric_records(&mut r, n);
                let f = numeric_records(&mut r, n);
                for (text, rec) in b.iter().chain(&f) {
                    expect(
                        ek::extract_number(text) == rec.prediction,
                        format!("extract {text:?}"),
                    )?;
                }
                let b: Vec<NumericRecord> = b.into_iter().map(|x| x.1).collect();
                let f: Vec<NumericRecord> = f.into_iter().map(|x| x.1).collect();
                let (sb, fb) = numeric(&b, cfg.epsilon);
                let (_, ff) = numeric(&f, cfg.epsilon);
                expect(
                    ek::numeric_accuracies(&b, cfg.epsilon).unwrap() == (sb, fb),
                    format!("set {set}: numeric"),
                )?;
                let flex = |x: &NumericRecord| {
                    x.prediction
                        .is_some_and(|p| (p - x.truth).abs() < cfg.epsilon)
                };
                let hb: Vec<bool> = b.iter().map(flex).collect();
                let hf: Vec<bool> = f.iter().map(flex).collect();
                (
                    EvalRecords::Numeric(b),
                    EvalRecords::Numeric(f),
                    fb,
                    ff,
                    hb,
                    hf,
                )
            }
            _ => {
                let b = choice_records(&mut r, n);
                let f = choice_records(&mut r, n);
                let (ab, af) = (choice(&b), choice(&f));
                expect(
                    ek::choice_accuracy(&b).unwrap() == ab,
                    format!("set {set}: choice"),
                )?;
                let hb: Vec<bool> = b.iter().map(|x| x.prediction == x.truth).collect();
                let hf: Vec<bool> = f.iter().map(|x| x.prediction == x.truth).collect();
                (
                    EvalRecords::Choice(b),
                    EvalRecords::Choice(f),
                    ab,
                    af,
                    hb,
                    hf,
                )
            }
        };

        let ci_b = wald(a_base / 100.0, n, cfg.z);
        let ci_f = wald(a_ft / 100.0, n, cfg.z);
        expect(
            close(ek::wald_ci(a_base / 100.0, n, cfg.z).unwrap(), ci_b, 1e-9),
            format!("set {set}: wald"),
        )?;
        expect(
            ek::delta_ability(a_ft, a_base) == a_ft - a_base,
            format!("set {set}: delta"),
        )?;
        let fr = (a_base != 0.0).then(|| (1.0 - a_ft / a_base) * 100.0);
        let fr_lib = ek::forgetting_rate(a_ft, a_base).ok();
        expect(
            match (fr, fr_lib) {
                (Some(x), Some(y)) => close(x, y, 1e-9),
                (None, None) => true,
                _ => false,
            },
            format!("set {set}: forgetting rate"),
        )?;
        let (dk, w) = ek::knowledge_loss(a_base, a_ft, ci_b, ci_f).unwrap();
        expect(
            close(dk, a_base - a_ft, 1e-9) && close(w, (ci_b * ci_b + ci_f * ci_f).sqrt(), 1e-9),
            format!("set {set}: knowledge loss"),
        )?;

        let report = compare(&base, &ft, &cfg).unwrap();
        expect(report.n == n, format!("set {set}: n"))?;
        expect(
            report.primary_base() == a_base && report.primary_ft() == a_ft,
            format!("set {set}: report accuracies"),
        )?;
        expect(
            close(report.ci_base, ci_b, 1e-9) && close(report.ci_ft, ci_f, 1e-9),
            format!("set {set}: report CIs"),
        )?;
        expect(
            close(report.delta_k_half_width, w, 1e-9),
            format!("set {set}: report ΔK width"),
        )?;

        if n >= 2 {
            let to_f = |h: &[bool]| {
                h.iter()
                    .map(|&x| if x { 1.0 } else { 0.0 })
                    .collect::<Vec<f64>>()
            };
            let (t, p) = paired_t(&to_f(&hits_base), &to_f(&hits_ft));
            let lib = ek::paired_t_test(&to_f(&hits_base), &to_f(&hits_ft)).unwrap();
            expect(
                close(lib.t, t, 1e-9) && close(lib.p, p, 1e-9),
                format!(
                    "set {set}: t-test lib ({}, {}) vs oracle ({t}, {p})",
                    lib.t, lib.p
                ),
            )?;
            expect(
                close(report.t, t, 1e-9) && close(report.p, p, 1e-9),
                format!("set {set}: report t-test"),
            )?;
        }
    }
    Ok(checks)
}
