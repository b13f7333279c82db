//! Central finite-difference checking of reverse-mode gradients.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::remap::IndexMap;
use crate::tape::{Conv2dSpec, PadMode, ReduceOp, Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for [`rel_error`]; below this magnitude the measure
/// degrades gracefully to an absolute error scaled by `1 / REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-2;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradProbe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradProbe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Check every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let probes: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_gradients_at(inputs, &probes, step, f)
}

/// Check the listed element indices of each input (`probes[i]` for input `i`).
pub fn check_gradients_at<F>(
    inputs: &[Tensor],
    probes: &[Vec<usize>],
    step: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (input, indices) in probes.iter().enumerate() {
        for &index in indices {
            let orig = work[input].data()[index];
            work[input].data_mut()[index] = orig + step;
            let plus = eval(&work)?;
            work[input].data_mut()[index] = orig - step;
            let minus = eval(&work)?;
            work[input].data_mut()[index] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[input].data()[index];
            report.probes.push(GradProbe {
                input,
                index,
                analytic: a,
                numeric,
                rel_err: rel_error(a, numeric),
            });
        }
    }
    Ok(report)
}

/// Worst relative error of one primitive over all probed elements.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
}

type Case = (
    String,
    Vec<Tensor>,
    Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
);

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

// Contract to a scalar with fixed non-uniform weights so every output
// element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(uniform(tape.shape(v), seed, -1.0, 1.0));
    let p = tape.mul(v, w)?;
    tape.sum_all(p)
}

fn cases() -> Vec<Case> {
    let r = |shape: &[usize], seed: u64| uniform(shape, seed, -1.0, 1.0);
    let pos = |shape: &[usize], seed: u64| uniform(shape, seed, 0.5, 2.0);
    let mut c: Vec<Case> = Vec::new();
    let mut add =
        |name: &str, inputs: Vec<Tensor>, f: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>| {
            c.push((name.to_string(), inputs, f));
        };
    add(
        "add",
        vec![r(&[3, 4], 1), r(&[3, 4], 2)],
        Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 3)
        }),
    );
    add(
        "sub",
        vec![r(&[3, 4], 4), r(&[1], 5)],
        Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, 6)
        }),
    );
    add(
        "mul",
        vec![r(&[3, 4], 7), r(&[3, 4], 8)],
        Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 9)
        }),
    );
    add(
        "div",
        vec![r(&[3, 4], 10), pos(&[3, 4], 11)],
        Box::new(|t, v| {
            let y = t.div(v[0], v[1])?;
            weighted_sum(t, y, 12)
        }),
    );
    add(
        "scalar ops",
        vec![r(&[5], 13)],
        Box::new(|t, v| {
            let a = t.mul(v[0], 0.7)?;
            let b = t.add(a, 1.5)?;
            let c = t.div(b, 3.0)?;
            weighted_sum(t, c, 14)
        }),
    );
    add(
        "exp",
        vec![r(&[3, 4], 15)],
        Box::new(|t, v| {
            let y = t.exp(v[0])?;
            weighted_sum(t, y, 16)
        }),
    );
    add(
        "log",
        vec![pos(&[3, 4], 17)],
        Box::new(|t, v| {
            let y = t.log(v[0])?;
            weighted_sum(t, y, 18)
        }),
    );
    add(
        "abs",
        vec![r(&[3, 4], 19)],
        Box::new(|t, v| {
            let y = t.abs(v[0])?;
            weighted_sum(t, y, 20)
        }),
    );
    add(
        "relu",
        vec![r(&[3, 4], 21)],
        Box::new(|t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, 22)
        }),
    );
    add(
        "clamp",
        vec![r(&[3, 4], 23)],
        Box::new(|t, v| {
            let y = t.clamp(v[0], -0.5, 0.5)?;
            weighted_sum(t, y, 24)
        }),
    );
    add(
        "sigmoid",
        vec![r(&[3, 4], 25)],
        Box::new(|t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y, 26)
        }),
    );
    add(
        "matmul",
        vec![r(&[4, 5], 27), r(&[5, 3], 28)],
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 29)
        }),
    );
    add(
        "bmm",
        vec![r(&[2, 3, 4], 30), r(&[2, 4, 2], 31)],
        Box::new(|t, v| {
            let y = t.bmm(v[0], v[1])?;
            weighted_sum(t, y, 32)
        }),
    );
    for (name, size, k, stride, pad, mode, seed) in [
        ("conv2d 3x3 zero", 6, 3, 1, 1, PadMode::Zero, 33),
        ("conv2d 3x3 reflect", 6, 3, 1, 1, PadMode::Reflect, 34),
        ("conv2d 3x3 stride 2", 6, 3, 2, 1, PadMode::Zero, 35),
        ("conv2d 1x1", 5, 1, 1, 0, PadMode::Zero, 36),
        ("conv2d 3x3 large plane", 10, 3, 1, 1, PadMode::Zero, 37),
        ("conv2d 5x5 stride 4", 17, 5, 4, 2, PadMode::Zero, 38),
    ] {
        let spec = Conv2dSpec { stride, pad, mode };
        add(
            name,
            vec![
                r(&[2, size, size], seed),
                r(&[3, 2, k, k], seed + 100),
                r(&[3], seed + 200),
            ],
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
                weighted_sum(t, y, seed + 300)
            }),
        );
    }
    for axis in 0..3 {
        add(
            &format!("softmax axis {axis}"),
            vec![r(&[2, 3, 4], 40 + axis as u64)],
            Box::new(move |t, v| {
                let y = t.softmax(v[0], axis)?;
                weighted_sum(t, y, 43)
            }),
        );
        add(
            &format!("log_softmax axis {axis}"),
            vec![r(&[2, 3, 4], 44 + axis as u64)],
            Box::new(move |t, v| {
                let y = t.log_softmax(v[0], axis)?;
                weighted_sum(t, y, 47)
            }),
        );
    }
    for (kind, kname) in [
        (ReduceOp::Sum, "sum"),
        (ReduceOp::Mean, "mean"),
        (ReduceOp::Max, "max"),
    ] {
        for axis in [None, Some(0), Some(2)] {
            add(
                &format!("reduce {kname} {axis:?}"),
                vec![r(&[3, 4, 2], 50)],
                Box::new(move |t, v| {
                    let y = t.reduce(kind, v[0], axis)?;
                    weighted_sum(t, y, 51)
                }),
            );
        }
    }
    add(
        "concat",
        vec![r(&[2, 3, 5], 52), r(&[2, 2, 5], 53)],
        Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weighted_sum(t, y, 54)
        }),
    );
    add(
        "permute",
        vec![r(&[2, 3, 4], 55)],
        Box::new(|t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            weighted_sum(t, y, 56)
        }),
    );
    add(
        "transpose",
        vec![r(&[3, 4], 57)],
        Box::new(|t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, 58)
        }),
    );
    add(
        "narrow",
        vec![r(&[4, 5], 59)],
        Box::new(|t, v| {
            let y = t.narrow(v[0], 1, 1, 3)?;
            weighted_sum(t, y, 60)
        }),
    );
    add(
        "reshape",
        vec![r(&[3, 4], 61)],
        Box::new(|t, v| {
            let y = t.reshape(v[0], &[2, 6])?;
            weighted_sum(t, y, 62)
        }),
    );
    add(
        "add_broadcast",
        vec![r(&[3, 4, 2], 63), r(&[4], 64)],
        Box::new(|t, v| {
            let y = t.add_broadcast(v[0], v[1], 1)?;
            weighted_sum(t, y, 65)
        }),
    );
    add(
        "resize_bilinear",
        vec![r(&[2, 3, 4], 66)],
        Box::new(|t, v| {
            let y = t.resize_bilinear(v[0], 5, 7)?;
            weighted_sum(t, y, 67)
        }),
    );
    add(
        "remap weighted",
        vec![r(&[6], 68)],
        Box::new(|t, v| {
            let taps = vec![
                vec![(0, 0.5), (3, 0.25)],
                vec![],
                vec![(5, -1.0), (5, 2.0), (1, 0.1)],
            ];
            let map = IndexMap::weighted(6, &[3], taps)?;
            let y = t.remap(v[0], Rc::new(map))?;
            weighted_sum(t, y, 69)
        }),
    );
    c
}

/// Finite-difference check of every primitive on small random inputs,
/// probing every element.
pub fn op_suite(step: f64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (name, inputs, f) in cases() {
        let report = check_gradients(&inputs, step, |t, v| f(t, v))?;
        out.push(OpCheck {
            name,
            probes: report.probes.len(),
            max_rel_err: report.max_rel_err(),
        });
    }
    Ok(out)
}
