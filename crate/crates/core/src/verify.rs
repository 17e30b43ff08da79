//! Self-verification: finite-difference checks for every differentiable op
//! and an independent double-loop EM reference.

use std::time::{Duration, Instant};

use crate::emau::{self, kaiming_init_bases, Bases};
use crate::error::Result;
use crate::models::{Binding, Mode, Model, ModelConfig, SolarNetConfig};
use crate::tensor::{
    finite_difference_check_faulty, BatchNormMode, Fill, OpKind, Padding, RunningStats, Tape,
    Tensor, UpsampleMode, Var,
};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
pub const EM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Max relative error for gradient checks, max abs diff for the EM checks.
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub elapsed: Duration,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed())
    }

    /// One line per check.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<6} {:<24} err {:.3e} (tol {:.0e})\n",
                if c.passed() { "ok" } else { "FAIL" },
                c.name,
                c.error,
                c.tolerance
            ));
        }
        out.push_str(&format!(
            "{} checks, {} failed, {:.1} s\n",
            self.checks.len(),
            self.failures().count(),
            self.elapsed.as_secs_f64()
        ));
        out
    }
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: OpFn,
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::create(shape, Fill::Uniform { lo: -1.0, hi: 1.0 }, seed).expect("valid shape")
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    Tensor::create(shape, Fill::Uniform { lo: 0.5, hi: 2.0 }, seed).expect("valid shape")
}

/// Σ y ⊙ R for a fixed random R, so every output coordinate matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(rand(tape.value(y).shape(), seed));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs,
        f: Box::new(move |tape, v| {
            let y = f(tape, v)?;
            if tape.value(y).numel() == 1 {
                let s = tape.sum(y)?;
                tape.scale(s, 1.3)
            } else {
                project(tape, y, 99)
            }
        }),
    }
}

fn op_cases() -> Vec<Case> {
    vec![
        case("add", vec![rand(&[3, 4], 1), rand(&[3, 4], 2)], |t, v| {
            t.add(v[0], v[1])
        }),
        case("mul", vec![rand(&[3, 4], 3), rand(&[3, 4], 4)], |t, v| {
            t.mul(v[0], v[1])
        }),
        case("scale", vec![rand(&[5], 5)], |t, v| t.scale(v[0], -2.5)),
        case("sum", vec![rand(&[2, 3], 6)], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        }),
        case("reshape", vec![rand(&[2, 6], 7)], |t, v| {
            t.reshape(v[0], &[3, 4])
        }),
        case("transpose", vec![rand(&[3, 5], 8)], |t, v| {
            t.transpose(v[0])
        }),
        case(
            "matmul",
            vec![rand(&[3, 4], 9), rand(&[4, 2], 10)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        case(
            "matmul_tn",
            vec![rand(&[4, 3], 60), rand(&[4, 2], 61)],
            |t, v| t.matmul_t(v[0], true, v[1], false),
        ),
        case(
            "matmul_nt",
            vec![rand(&[3, 4], 62), rand(&[2, 4], 63)],
            |t, v| t.matmul_t(v[0], false, v[1], true),
        ),
        case(
            "matmul_tt",
            vec![rand(&[4, 3], 64), rand(&[2, 4], 65)],
            |t, v| t.matmul_t(v[0], true, v[1], true),
        ),
        case(
            "conv2d",
            vec![
                rand(&[2, 3, 6, 6], 11),
                rand(&[4, 3, 3, 3], 12),
                rand(&[4], 13),
            ],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same),
        ),
        case(
            "conv2d_stride2",
            vec![rand(&[1, 2, 7, 7], 14), rand(&[3, 2, 3, 3], 15)],
            |t, v| t.conv2d(v[0], v[1], None, 2, Padding::Same),
        ),
        case(
            "conv2d_valid_1x1",
            vec![rand(&[2, 5, 5], 16), rand(&[2, 2, 1, 1], 17)],
            |t, v| t.conv2d(v[0], v[1], None, 1, Padding::Valid),
        ),
        case("maxpool2x", vec![rand(&[2, 2, 5, 4], 18)], |t, v| {
            t.maxpool2x(v[0])
        }),
        case("upsample_nearest", vec![rand(&[1, 2, 3, 3], 19)], |t, v| {
            t.upsample2x(v[0], UpsampleMode::Nearest)
        }),
        case(
            "upsample_bilinear",
            vec![rand(&[1, 2, 3, 4], 20)],
            |t, v| t.upsample2x(v[0], UpsampleMode::Bilinear),
        ),
        case(
            "batchnorm2d",
            vec![rand(&[3, 2, 3, 3], 21), positive(&[2], 22), rand(&[2], 23)],
            |t, v| {
                let mut stats = RunningStats::new(2);
                t.batchnorm2d(
                    v[0],
                    v[1],
                    v[2],
                    &mut stats,
                    BatchNormMode::Train,
                    0.1,
                    1e-5,
                )
            },
        ),
        case("relu", vec![rand(&[4, 5], 24)], |t, v| t.relu(v[0])),
        case("softmax_rows", vec![rand(&[3, 4], 25)], |t, v| {
            t.softmax_rows(v[0])
        }),
        case("cross_entropy", vec![rand(&[5, 3], 26)], |t, v| {
            t.cross_entropy(v[0], &[0, 2, 1, 1, 0], None)
        }),
        case("cross_entropy_weighted", vec![rand(&[4, 2], 27)], |t, v| {
            t.cross_entropy(v[0], &[0, 1, 1, 0], Some(&[0.7, 2.1]))
        }),
        case("global_avg_pool", vec![rand(&[2, 3, 3, 4], 28)], |t, v| {
            t.global_avg_pool(v[0])
        }),
        case(
            "add_row_bias",
            vec![rand(&[3, 4], 29), rand(&[4], 30)],
            |t, v| t.add_row_bias(v[0], v[1]),
        ),
        case("pixels_to_rows", vec![rand(&[2, 3, 2, 2], 31)], |t, v| {
            t.pixels_to_rows(v[0])
        }),
        case("rows_to_pixels", vec![rand(&[8, 3], 32)], |t, v| {
            t.rows_to_pixels(v[0], &[2, 3, 2, 2])
        }),
        case("slice_rows", vec![rand(&[5, 3], 33)], |t, v| {
            t.slice_rows(v[0], 1, 3)
        }),
        case(
            "concat_rows",
            vec![rand(&[2, 3], 34), rand(&[3, 3], 35)],
            |t, v| t.concat_rows(&[v[0], v[1]]),
        ),
        case(
            "concat_channels",
            vec![rand(&[1, 2, 3, 3], 36), rand(&[1, 1, 3, 3], 37)],
            |t, v| t.concat_channels(v[0], v[1]),
        ),
        case("row_normalize", vec![rand(&[3, 4], 38)], |t, v| {
            t.row_normalize(v[0])
        }),
        case("col_sums", vec![rand(&[4, 3], 39)], |t, v| t.col_sums(v[0])),
        case(
            "div_rows",
            vec![rand(&[3, 4], 40), positive(&[3], 41)],
            |t, v| t.div_rows(v[0], v[1]),
        ),
    ]
}

fn composite_cases() -> Vec<Case> {
    vec![
        // conv → relu → pool → matmul
        case(
            "composite_conv_pool_mm",
            vec![
                rand(&[1, 2, 6, 6], 50),
                rand(&[3, 2, 3, 3], 51),
                rand(&[27, 2], 52),
            ],
            |t, v| {
                let c = t.conv2d(v[0], v[1], None, 1, Padding::Same)?;
                let r = t.relu(c)?;
                let p = t.maxpool2x(r)?;
                let flat = t.reshape(p, &[1, 27])?;
                let logits = t.matmul(flat, v[2])?;
                t.cross_entropy(logits, &[1], None)
            },
        ),
        case(
            "em_iterations",
            vec![rand(&[12, 4], 53), rand(&[3, 4], 54)],
            |t, v| {
                let mu0 = t.row_normalize(v[1])?;
                let (z, mu) = emau::run_em_var(t, v[0], mu0, 3, true)?;
                emau::reconstruct_var(t, z, mu)
            },
        ),
    ]
}

/// Full tiny SolarNet loss (both heads) with respect to every parameter.
fn solarnet_tiny_check(fault: Option<OpKind>) -> Result<CheckResult> {
    let mut model = Model::new(ModelConfig::SolarNet(SolarNetConfig::tiny()))?;
    let images = rand(&[2, 3, 8, 8], 60);
    let inputs = model.store().values();
    let report = finite_difference_check_faulty(&inputs, 1e-6, Some(6), fault, |tape, vars| {
        let binding = Binding::from_vars(vars.to_vec());
        let x = tape.constant(images.clone());
        let out = model.forward(tape, &binding, x, Mode::Train)?;
        let rows = tape.pixels_to_rows(out.seg_logits)?;
        let targets: Vec<usize> = (0..128).map(|i| (i * 7 + i / 3) % 2).collect();
        let seg = tape.cross_entropy(rows, &targets, None)?;
        let cls = out.cls_logits.expect("cls head");
        let lc = tape.cross_entropy(cls, &[0, 1], None)?;
        let a = tape.scale(lc, 0.5)?;
        let b = tape.scale(seg, 0.5)?;
        tape.add(a, b)
    })?;
    Ok(CheckResult {
        name: "solarnet_tiny_loss".into(),
        error: report.max_rel_err,
        tolerance: COMPOSITE_TOLERANCE,
    })
}

fn run_case(c: &Case, step: f64, tolerance: f64, fault: Option<OpKind>) -> Result<CheckResult> {
    let report = finite_difference_check_faulty(&c.inputs, step, None, fault, &c.f)?;
    Ok(CheckResult {
        name: c.name.into(),
        error: report.max_rel_err,
        tolerance,
    })
}

/// Per-op and composite gradient checks. `fault` sign-flips the backward
/// of one op kind in the analytic pass.
pub fn gradient_suite(fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for c in op_cases() {
        out.push(run_case(&c, 1e-5, OP_TOLERANCE, fault)?);
    }
    for c in composite_cases() {
        out.push(run_case(&c, 1e-5, COMPOSITE_TOLERANCE, fault)?);
    }
    out.push(solarnet_tiny_check(fault)?);
    Ok(out)
}

/// Plain-loop EM: T rounds of (M-step, optional ℓ2 row normalization,
/// E-step) from the E-step of `mu0`. Inputs are row-major N×C and K×C.
pub fn em_reference(
    x: &[f64],
    n: usize,
    c: usize,
    mu0: &[f64],
    k: usize,
    t: usize,
    normalize: bool,
) -> (Vec<f64>, Vec<f64>) {
    let e_step = |mu: &[f64]| {
        let mut z = vec![0.0; n * k];
        for i in 0..n {
            let mut logits = vec![0.0; k];
            for j in 0..k {
                for d in 0..c {
                    logits[j] += x[i * c + d] * mu[j * c + d];
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..k {
                z[i * k + j] = (logits[j] - m).exp();
                total += z[i * k + j];
            }
            for j in 0..k {
                z[i * k + j] /= total;
            }
        }
        z
    };
    let mut mu = mu0.to_vec();
    let mut z = e_step(&mu);
    for _ in 0..t {
        for j in 0..k {
            let mut mass = 0.0;
            let mut acc = vec![0.0; c];
            for i in 0..n {
                let w = z[i * k + j];
                mass += w;
                for d in 0..c {
                    acc[d] += w * x[i * c + d];
                }
            }
            let mut row: Vec<f64> = acc.iter().map(|a| a / mass).collect();
            if normalize {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= norm);
            }
            mu[j * c..(j + 1) * c].copy_from_slice(&row);
        }
        z = e_step(&mu);
    }
    (z, mu)
}

/// Max abs difference between `run_em` and [`em_reference`] on random
/// N×C features.
pub fn em_oracle_diff(n: usize, c: usize, k: usize, t: usize, seed: u64) -> Result<f64> {
    let x = rand(&[n, c], seed);
    let mu0 = kaiming_init_bases(k, c, seed + 1)?;
    let (z, mu) = emau::run_em(&x, &mu0, t, true)?;
    let (rz, rmu) = em_reference(x.data(), n, c, mu0.tensor().data(), k, t, true);
    let dz = z
        .tensor()
        .data()
        .iter()
        .zip(&rz)
        .map(|(a, b)| (a - b).abs());
    let dm = mu
        .tensor()
        .data()
        .iter()
        .zip(&rmu)
        .map(|(a, b)| (a - b).abs());
    Ok(dz.chain(dm).fold(0.0, f64::max))
}

/// Worst |row sum − 1| of `e_step` over `cases` random inputs.
pub fn e_step_row_sum_error(cases: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..cases as u64 {
        let s = seed + 2 * i;
        let n = 1 + (s as usize * 7) % 40;
        let c = 1 + (s as usize * 3) % 9;
        let k = 1 + (s as usize * 5) % 8;
        let x = Tensor::create(&[n, c], Fill::Uniform { lo: -4.0, hi: 4.0 }, s)?;
        let bases = Bases::new(rand(&[k, c], s + 1))?;
        let z = emau::e_step(&x, &bases)?;
        for row in z.tensor().data().chunks(k) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

/// The whole suite as run by the `gradcheck` command.
pub fn run_suite(fault: Option<OpKind>) -> Result<VerifyReport> {
    let start = Instant::now();
    let mut checks = gradient_suite(fault)?;
    checks.push(CheckResult {
        name: "em_oracle_32x8_k4_t5".into(),
        error: em_oracle_diff(32, 8, 4, 5, 7)?,
        tolerance: EM_TOLERANCE,
    });
    checks.push(CheckResult {
        name: "e_step_row_sums".into(),
        error: e_step_row_sum_error(100, 11)?,
        tolerance: EM_TOLERANCE,
    });
    Ok(VerifyReport {
        checks,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_clean() {
        let report = run_suite(None).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert!(report.elapsed.as_secs() <= 60);
    }

    #[test]
    fn conv_fault_is_caught_and_named() {
        let checks = gradient_suite(Some(OpKind::Conv2d)).unwrap();
        let failed: Vec<&str> = checks
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.name.as_str())
            .collect();
        assert!(failed.contains(&"conv2d"), "{failed:?}");
        assert!(!failed.contains(&"softmax_rows"));
    }

    #[test]
    fn reference_matches_hand_e_step() {
        // x = [[1,0],[0,1]], μ = I → z = softmax of [[1,0],[0,1]]
        let (z, _) = em_reference(
            &[1.0, 0.0, 0.0, 1.0],
            2,
            2,
            &[1.0, 0.0, 0.0, 1.0],
            2,
            0,
            true,
        );
        let e = 1.0f64.exp();
        let hi = e / (e + 1.0);
        for (a, b) in z.iter().zip([hi, 1.0 - hi, 1.0 - hi, hi]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
