//! Central-difference gradient checking over the autodiff tape.
//!
//! Each case builds a function of its inputs on a tape. The checked scalar is
//! `sum(y ⊙ R)` for a fixed random `R`, so every output element contributes
//! with a distinct weight. Reference derivatives are fourth-order central
//! differences with step `h`, evaluated in `f64`:
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`. The three-point stencil
//! at the same `h` carries `h² f⁽³⁾/6` truncation error, too coarse near the
//! zeros of the GeLU derivative for a 1e-6 relative bound; it is reported
//! alongside.

use peftkit::tensor::Scalar;
use peftkit::{rng, Result, Tape, Tensor, Var};

pub const STEP: f64 = 1e-3;

pub type Build<T> = fn(&mut Tape<T>, &[Var]) -> Result<Var>;

pub struct CaseReport {
    pub name: &'static str,
    /// Worst relative error of the `f32` tape against the reference.
    pub f32_error: f64,
    /// Worst relative error of the `f64` tape against the reference.
    pub f64_error: f64,
    /// Worst relative error of the `f64` tape against the three-point
    /// stencil, for reference only.
    pub f64_error_three_point: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const FLOOR: f64 = 1e-2;

fn projected<T: Scalar>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut r = rng::substream(17, "gradcheck.projection");
    let weights = Tensor::<f64>::uniform(&shape, -1.0, 1.0, &mut r).cast::<T>();
    let w = tape.constant(weights);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn loss_value(inputs: &[Tensor<f64>], build: Build<f64>) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = build(&mut tape, &vars).expect("case builds");
    let l = projected(&mut tape, y).expect("projection");
    tape.value(l).data()[0]
}

fn analytic<T: Scalar>(
    inputs: &[Tensor<f64>],
    trainable: &[bool],
    build: Build<T>,
) -> Vec<Option<Tensor<T>>> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(trainable)
        .map(|(t, &rg)| tape.leaf(t.cast::<T>(), rg))
        .collect();
    let y = build(&mut tape, &vars).expect("case builds");
    let l = projected(&mut tape, y).expect("projection");
    let grads = tape.backward(l).expect("backward");
    vars.iter().map(|&v| grads.get(v)).collect()
}

/// Checks every element of every trainable input.
pub fn check(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    trainable: &[bool],
    f32_build: Build<f32>,
    f64_build: Build<f64>,
) -> CaseReport {
    let a32 = analytic(&inputs, trainable, f32_build);
    let a64 = analytic(&inputs, trainable, f64_build);
    let mut report = CaseReport {
        name,
        f32_error: 0.0,
        f64_error: 0.0,
        f64_error_three_point: 0.0,
        checked: 0,
    };
    for (i, input) in inputs.iter().enumerate() {
        if !trainable[i] {
            continue;
        }
        let g32 = a32[i].as_ref().expect("trainable input has a gradient");
        let g64 = a64[i].as_ref().expect("trainable input has a gradient");
        for j in 0..input.len() {
            let at = |offset: f64| {
                let mut shifted = inputs.clone();
                shifted[i].data_mut()[j] += offset;
                loss_value(&shifted, f64_build)
            };
            let (p1, m1, p2, m2) = (at(STEP), at(-STEP), at(2.0 * STEP), at(-2.0 * STEP));
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * STEP);
            let three_point = (p1 - m1) / (2.0 * STEP);
            report.f64_error_three_point =
                report
                    .f64_error_three_point
                    .max(relative_error(g64.data()[j], three_point, FLOOR));
            report.f32_error =
                report
                    .f32_error
                    .max(relative_error(g32.data()[j] as f64, numeric, FLOOR));
            report.f64_error = report
                .f64_error
                .max(relative_error(g64.data()[j], numeric, FLOOR));
            report.checked += 1;
        }
    }
    report
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng::seeded(seed))
}

macro_rules! case {
    ($name:expr, [$($input:expr),* $(,)?], $trainable:expr, |$tape:ident, $v:ident| $body:expr) => {{
        fn build<T: Scalar>($tape: &mut Tape<T>, $v: &[Var]) -> Result<Var> {
            $body
        }
        check($name, vec![$($input),*], $trainable, build::<f32>, build::<f64>)
    }};
}

/// Every tape primitive and the three adapter forwards on inputs no larger
/// than 8×8.
pub fn all_cases() -> Vec<CaseReport> {
    use peftkit::model::{attention, AttentionMask};
    use peftkit::peft::{adapter_forward, lora_forward, prefix_attend, BaseVar, LoraVars};
    use peftkit::quantize::QuantizedMatrix;
    use std::sync::Arc;

    let tt = [true, true];
    vec![
        case!(
            "matmul",
            [randn(&[5, 7], 1), randn(&[7, 4], 2)],
            &tt,
            |t, v| t.matmul(v[0], v[1])
        ),
        case!("qmatmul", [randn(&[6, 3], 3)], &[true], |t, v| {
            let w = Tensor::<f32>::randn(&[4, 6], 1.0, &mut rng::seeded(4));
            let q = Arc::new(QuantizedMatrix::quantize(&w, 8)?);
            t.qmatmul(&q, v[0])
        }),
        case!("transpose", [randn(&[3, 5], 5)], &[true], |t, v| t
            .transpose(v[0])),
        case!(
            "add",
            [randn(&[4, 4], 6), randn(&[4, 4], 7)],
            &tt,
            |t, v| t.add(v[0], v[1])
        ),
        case!(
            "add_bias",
            [randn(&[5, 3], 8), randn(&[3], 9)],
            &tt,
            |t, v| t.add_bias(v[0], v[1])
        ),
        case!(
            "mul",
            [randn(&[3, 6], 10), randn(&[3, 6], 11)],
            &tt,
            |t, v| t.mul(v[0], v[1])
        ),
        case!("scale", [randn(&[4, 2], 12)], &[true], |t, v| Ok(
            t.scale(v[0], T::from_f64(-1.7))
        )),
        case!(
            "gelu",
            [randn(&[6, 6], 13).map(|x| 2.0 * x)],
            &[true],
            |t, v| Ok(t.gelu(v[0]))
        ),
        case!("softmax_rows", [randn(&[4, 7], 14)], &[true], |t, v| t
            .softmax(v[0], 1)),
        case!("softmax_cols", [randn(&[5, 3], 15)], &[true], |t, v| t
            .softmax(v[0], 0)),
        case!(
            "layer_norm",
            [randn(&[4, 8], 16), randn(&[8], 17), randn(&[8], 18)],
            &[true, true, true],
            |t, v| t.layer_norm(v[0], v[1], v[2])
        ),
        case!("sum", [randn(&[3, 3], 19)], &[true], |t, v| Ok(t.sum(v[0]))),
        case!("causal_mask", [randn(&[4, 6], 20)], &[true], |t, v| {
            let m = t.causal_mask(v[0], 2)?;
            t.softmax(m, 1)
        }),
        case!("slice_cols", [randn(&[3, 8], 21)], &[true], |t, v| t
            .slice_cols(v[0], 2, 4)),
        case!(
            "concat_cols",
            [randn(&[3, 2], 22), randn(&[3, 5], 23)],
            &tt,
            |t, v| t.concat_cols(&[v[0], v[1]])
        ),
        case!(
            "concat_rows",
            [randn(&[2, 4], 24), randn(&[3, 4], 25)],
            &tt,
            |t, v| t.concat_rows(&[v[0], v[1]])
        ),
        case!("gather_rows", [randn(&[6, 4], 26)], &[true], |t, v| t
            .gather_rows(v[0], &[3, 0, 3, 5])),
        case!("cross_entropy", [randn(&[5, 7], 27)], &[true], |t, v| {
            t.cross_entropy(v[0], &[1, 6, 0, 2, 2], &[true, false, true, true, true])
        }),
        case!(
            "attention",
            [randn(&[4, 6], 28), randn(&[4, 6], 29), randn(&[4, 6], 30)],
            &[true, true, true],
            |t, v| attention(t, v[0], v[1], v[2], AttentionMask::Causal { prefix_len: 0 })
        ),
        case!(
            "lora_forward",
            [
                randn(&[6, 5], 31),
                randn(&[6, 2], 32),
                randn(&[2, 5], 33),
                randn(&[5, 3], 34)
            ],
            &[false, true, true, true],
            |t, v| {
                let lora = LoraVars {
                    a: v[1],
                    b: v[2],
                    scale: 0.5,
                };
                lora_forward(t, &BaseVar::Dense(v[0]), Some(&lora), v[3])
            }
        ),
        case!(
            "lora_forward_q4",
            [randn(&[6, 2], 35), randn(&[2, 5], 36), randn(&[5, 3], 37)],
            &[true, true, true],
            |t, v| {
                let w = Tensor::<f32>::randn(&[6, 5], 1.0, &mut rng::seeded(38));
                let q = Arc::new(QuantizedMatrix::quantize(&w, 16)?);
                let lora = LoraVars {
                    a: v[0],
                    b: v[1],
                    scale: 1.0,
                };
                lora_forward(t, &BaseVar::Quantized(q), Some(&lora), v[2])
            }
        ),
        case!(
            "adapter_forward",
            [randn(&[4, 6], 39), randn(&[6, 2], 40), randn(&[2, 6], 41)],
            &[true, true, true],
            |t, v| adapter_forward(t, v[0], v[1], v[2])
        ),
        case!(
            "prefix_attend",
            [
                randn(&[2, 4], 42),
                randn(&[2, 4], 43),
                randn(&[3, 4], 44),
                randn(&[3, 4], 45),
                randn(&[3, 4], 46)
            ],
            &[true, true, true, true, true],
            |t, v| prefix_attend(t, v[0], v[1], v[2], v[3], v[4], true)
        ),
    ]
}
