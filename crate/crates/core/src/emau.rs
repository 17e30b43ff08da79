//! Expectation-Maximization Attention Unit.
//!
//! A feature map `X` [N×C] is softly clustered around K bases `μ` [K×C]:
//!
//! * E-step: `z[n,k] = exp(x_n·μ_k) / Σ_j exp(x_n·μ_j)`, i.e. `softmax_rows(X μᵀ)`.
//! * M-step: `μ_k = Σ_n z[n,k] x_n / Σ_m z[m,k]`.
//!
//! After T rounds the map is replaced by its low-rank reconstruction `Z μ`,
//! which costs O(NK) per round instead of the O(N²) of full self-attention.
//! The bases themselves never receive a gradient; between batches they move
//! by an exponential moving average of the per-image `μ_T`.

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::{Fill, Padding, Tape, Tensor, Var};

/// Cluster centers, K×C.
#[derive(Debug, Clone, PartialEq)]
pub struct Bases {
    mu: Tensor,
}

impl Bases {
    pub fn new(mu: Tensor) -> Result<Self> {
        if mu.rank() != 2 {
            return Err(Error::shape(
                "bases",
                format!("expected K×C, got {:?}", mu.shape()),
            ));
        }
        Ok(Self { mu })
    }

    pub fn k(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn c(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mu
    }

    pub fn into_tensor(self) -> Tensor {
        self.mu
    }

    /// Mean of several same-shape bases (used for the batch-level `μ_T`).
    pub fn mean(all: &[Bases]) -> Result<Bases> {
        let first = all
            .first()
            .ok_or_else(|| Error::shape("bases_mean", "no bases to average"))?;
        let mut acc = Tensor::zeros(first.mu.shape());
        for b in all {
            if b.mu.shape() != first.mu.shape() {
                return Err(Error::shape("bases_mean", "bases shapes differ"));
            }
            for (a, v) in acc.data_mut().iter_mut().zip(b.mu.data()) {
                *a += v;
            }
        }
        let n = all.len() as f64;
        acc.data_mut().iter_mut().for_each(|v| *v /= n);
        Bases::new(acc)
    }
}

/// Row-stochastic soft assignments, N×K.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    z: Tensor,
}

impl Responsibilities {
    pub fn new(z: Tensor) -> Result<Self> {
        if z.rank() != 2 {
            return Err(Error::shape("responsibilities", "expected N×K"));
        }
        Ok(Self { z })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmauConfig {
    /// Number of bases.
    pub k: usize,
    /// EM rounds per forward pass.
    pub t: usize,
    /// Moving-average momentum for the base update.
    pub alpha: f64,
    /// ℓ2-normalize bases after every M-step and after the moving average.
    pub normalize_bases: bool,
    pub seed: u64,
}

impl Default for EmauConfig {
    fn default() -> Self {
        Self {
            k: 64,
            t: 10,
            alpha: 0.9,
            normalize_bases: true,
            seed: 0,
        }
    }
}

impl EmauConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("em_k must be at least 1".into()));
        }
        if self.t == 0 {
            return Err(Error::Config("em_t must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// [C×H×W] -> [N×C] with N = H·W; row `n` is pixel (n / W, n % W).
pub fn flatten_spatial(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let rows = tape.pixels_to_rows(v)?;
    Ok(tape.value(rows).clone())
}

/// Inverse of [`flatten_spatial`].
pub fn unflatten_spatial(x: &Tensor, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let img = tape.rows_to_pixels(v, &[c, h, w])?;
    Ok(tape.value(img).clone())
}

/// Normal(0, sqrt(2/C)) bases, row-normalized.
pub fn kaiming_init_bases(k: usize, c: usize, seed: u64) -> Result<Bases> {
    let mu = Tensor::create(&[k, c], Fill::Kaiming { fan_in: c }, seed)?;
    normalize_bases(&Bases::new(mu)?)
}

pub fn normalize_bases(bases: &Bases) -> Result<Bases> {
    let mut mu = bases.mu.clone();
    let c = bases.c();
    for (i, row) in mu.data_mut().chunks_mut(c).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateBase(i));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Bases::new(mu)
}

/// `μ₀ ← normalize(α·μ₀ + (1−α)·μ_T)`. With α = 1 the bases are returned
/// untouched (bit-identical).
pub fn update_bases_moving_average(
    bases: &Bases,
    mu_t: &Bases,
    alpha: f64,
    normalize: bool,
) -> Result<Bases> {
    if bases.mu.shape() != mu_t.mu.shape() {
        return Err(Error::shape(
            "update_bases_moving_average",
            "bases shapes differ",
        ));
    }
    if alpha == 1.0 {
        return Ok(bases.clone());
    }
    let data = bases
        .mu
        .data()
        .iter()
        .zip(mu_t.mu.data())
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    let blended = Bases::new(Tensor::new(bases.mu.shape().to_vec(), data)?)?;
    if normalize {
        normalize_bases(&blended)
    } else {
        Ok(blended)
    }
}

/// E-step on the tape: `softmax_rows(x · μᵀ)`.
pub fn e_step_var(tape: &mut Tape, x: Var, mu: Var) -> Result<Var> {
    let (xc, mc) = (tape.value(x).shape()[1], tape.value(mu).shape()[1]);
    if xc != mc {
        return Err(Error::shape(
            "e_step",
            format!("features have {xc} channels, bases {mc}"),
        ));
    }
    let logits = tape.matmul_t(x, false, mu, true)?;
    tape.softmax_rows(logits)
}

/// M-step on the tape: responsibility-weighted mean of the rows of `x`.
pub fn m_step_var(tape: &mut Tape, z: Var, x: Var) -> Result<Var> {
    if tape.value(z).shape()[0] != tape.value(x).shape()[0] {
        return Err(Error::shape("m_step", "z and x row counts differ"));
    }
    let mass = tape.col_sums(z)?;
    if let Some(k) = tape.value(mass).data().iter().position(|&m| m == 0.0) {
        return Err(Error::DegenerateCluster(k));
    }
    let weighted = tape.matmul_t(z, true, x, false)?;
    tape.div_rows(weighted, mass)
}

/// T rounds of (M-step, normalize, E-step) starting from `e_step(μ₀)`.
/// The returned `z` is the E-step of the returned `μ`.
pub fn run_em_var(
    tape: &mut Tape,
    x: Var,
    mu0: Var,
    t: usize,
    normalize: bool,
) -> Result<(Var, Var)> {
    if t == 0 {
        return Err(Error::Config("EM needs at least one iteration".into()));
    }
    let mut z = e_step_var(tape, x, mu0)?;
    let mut mu = mu0;
    for _ in 0..t {
        mu = m_step_var(tape, z, x)?;
        if normalize {
            mu = tape.row_normalize(mu)?;
        }
        z = e_step_var(tape, x, mu)?;
    }
    Ok((z, mu))
}

pub fn reconstruct_var(tape: &mut Tape, z: Var, mu: Var) -> Result<Var> {
    tape.matmul(z, mu)
}

fn eval_on_tape<T>(f: impl FnOnce(&mut Tape) -> Result<T>) -> Result<T> {
    let mut tape = Tape::new();
    f(&mut tape)
}

pub fn e_step(x: &Tensor, bases: &Bases) -> Result<Responsibilities> {
    eval_on_tape(|tape| {
        let xv = tape.constant(x.clone());
        let mu = tape.constant(bases.mu.clone());
        let z = e_step_var(tape, xv, mu)?;
        Responsibilities::new(tape.value(z).clone())
    })
}

/// Unnormalized M-step.
pub fn m_step(z: &Responsibilities, x: &Tensor) -> Result<Bases> {
    eval_on_tape(|tape| {
        let zv = tape.constant(z.z.clone());
        let xv = tape.constant(x.clone());
        let mu = m_step_var(tape, zv, xv)?;
        Bases::new(tape.value(mu).clone())
    })
}

pub fn run_em(
    x: &Tensor,
    mu0: &Bases,
    t: usize,
    normalize: bool,
) -> Result<(Responsibilities, Bases)> {
    eval_on_tape(|tape| {
        let xv = tape.constant(x.clone());
        let mu = tape.constant(mu0.mu.clone());
        let (z, mu) = run_em_var(tape, xv, mu, t, normalize)?;
        Ok((
            Responsibilities::new(tape.value(z).clone())?,
            Bases::new(tape.value(mu).clone())?,
        ))
    })
}

/// Low-rank reconstruction `X̂ = Z μ`.
pub fn reconstruct(z: &Responsibilities, bases: &Bases) -> Result<Tensor> {
    eval_on_tape(|tape| {
        let zv = tape.constant(z.z.clone());
        let mu = tape.constant(bases.mu.clone());
        let xh = reconstruct_var(tape, zv, mu)?;
        Ok(tape.value(xh).clone())
    })
}

/// Trainable parameters of the residual block around the EM iterations.
#[derive(Debug, Clone, Copy)]
pub struct EmauVars {
    /// 1×1 conv C→C applied before EM.
    pub conv_in_weight: Var,
    pub conv_in_bias: Var,
    /// 1×1 conv C→C applied to the reconstruction (no bias).
    pub conv_out_weight: Var,
}

pub struct EmauOutput {
    pub y: Var,
    /// Batch mean of the per-image final bases.
    pub mu_t: Bases,
}

/// Residual EMA block on [B×C×H×W] (or [C×H×W]):
/// `y = x + conv_out(unflatten(Z_T μ_T))` where EM runs per image on
/// `flatten(conv_in(x))`, starting from `bases` (a constant on the tape).
pub fn emau_forward_var(
    tape: &mut Tape,
    x: Var,
    bases: &Bases,
    cfg: &EmauConfig,
    params: EmauVars,
) -> Result<EmauOutput> {
    let shape = tape.value(x).shape().to_vec();
    let (batch, c, h, w) = match *shape.as_slice() {
        [c, h, w] => (1, c, h, w),
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::shape("emau_forward", format!("bad input {shape:?}"))),
    };
    if c != bases.c() {
        return Err(Error::shape(
            "emau_forward",
            format!("{c} channels but bases have {}", bases.c()),
        ));
    }
    let n = h * w;
    if bases.k() > n {
        warn!("EMAU with K = {} bases on only N = {n} pixels", bases.k());
    }
    let inner = tape.conv2d(
        x,
        params.conv_in_weight,
        Some(params.conv_in_bias),
        1,
        Padding::Same,
    )?;
    let rows = tape.pixels_to_rows(inner)?;
    let mu0 = tape.constant(bases.mu.clone());
    let mut recon = Vec::with_capacity(batch);
    let mut finals = Vec::with_capacity(batch);
    for b in 0..batch {
        let xb = if batch == 1 {
            rows
        } else {
            tape.slice_rows(rows, b * n, n)?
        };
        let (z, mu) = run_em_var(tape, xb, mu0, cfg.t, cfg.normalize_bases)?;
        finals.push(Bases::new(tape.value(mu).clone())?);
        recon.push(reconstruct_var(tape, z, mu)?);
    }
    let stacked = if batch == 1 {
        recon[0]
    } else {
        tape.concat_rows(&recon)?
    };
    let img = tape.rows_to_pixels(stacked, &shape)?;
    let out = tape.conv2d(img, params.conv_out_weight, None, 1, Padding::Same)?;
    let y = tape.add(x, out)?;
    Ok(EmauOutput {
        y,
        mu_t: Bases::mean(&finals)?,
    })
}

/// Weights of the two 1×1 convs as plain tensors.
#[derive(Debug, Clone)]
pub struct EmauParams {
    pub conv_in_weight: Tensor,
    pub conv_in_bias: Tensor,
    pub conv_out_weight: Tensor,
}

impl EmauParams {
    pub fn init(c: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            conv_in_weight: Tensor::create(&[c, c, 1, 1], Fill::Kaiming { fan_in: c }, seed)?,
            conv_in_bias: Tensor::zeros(&[c]),
            conv_out_weight: Tensor::create(
                &[c, c, 1, 1],
                Fill::Kaiming { fan_in: c },
                seed.wrapping_add(1),
            )?,
        })
    }
}

/// Value-level EMAU forward on [C×H×W]; returns (y, μ_T).
pub fn emau_forward(
    x: &Tensor,
    bases: &Bases,
    cfg: &EmauConfig,
    params: &EmauParams,
) -> Result<(Tensor, Bases)> {
    eval_on_tape(|tape| {
        let xv = tape.constant(x.clone());
        let vars = EmauVars {
            conv_in_weight: tape.constant(params.conv_in_weight.clone()),
            conv_in_bias: tape.constant(params.conv_in_bias.clone()),
            conv_out_weight: tape.constant(params.conv_out_weight.clone()),
        };
        let out = emau_forward_var(tape, xv, bases, cfg, vars)?;
        Ok((tape.value(out.y).clone(), out.mu_t))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::create(shape, Fill::Uniform { lo: -1.0, hi: 1.0 }, seed).unwrap()
    }

    fn row_sums(z: &Tensor) -> Vec<f64> {
        let k = z.shape()[1];
        z.data().chunks(k).map(|r| r.iter().sum()).collect()
    }

    #[test]
    fn flatten_round_trips() {
        let one = t(&[1, 1, 1], &[3.5]);
        assert_eq!(flatten_spatial(&one).unwrap().data(), &[3.5]);
        for (c, h, w, seed) in [(2, 2, 3, 1), (4, 5, 7, 2)] {
            let x = random(&[c, h, w], seed);
            let f = flatten_spatial(&x).unwrap();
            assert_eq!(f.shape(), &[h * w, c]);
            assert_eq!(f.at(&[w + 1, c - 1]), x.at(&[c - 1, 1, 1]));
            assert_eq!(unflatten_spatial(&f, c, h, w).unwrap(), x);
        }
    }

    #[test]
    fn kaiming_bases_unit_rows_and_seeded() {
        let b = kaiming_init_bases(5, 7, 11).unwrap();
        for row in b.tensor().data().chunks(7) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(b, kaiming_init_bases(5, 7, 11).unwrap());
        let seeds: Vec<Bases> = (0..20)
            .map(|s| kaiming_init_bases(5, 7, s).unwrap())
            .collect();
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j], "seeds {i} and {j} collide");
            }
        }
    }

    #[test]
    fn e_step_single_base_and_symmetry() {
        let x = random(&[6, 3], 1);
        let one = Bases::new(random(&[1, 3], 2)).unwrap();
        assert!(e_step(&x, &one)
            .unwrap()
            .tensor()
            .data()
            .iter()
            .all(|&v| v == 1.0));

        let same_x = Tensor::full(&[4, 3], 0.3);
        let same_mu = Bases::new(Tensor::full(&[5, 3], 0.7)).unwrap();
        let z = e_step(&same_x, &same_mu).unwrap();
        assert!(z.tensor().data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn e_step_hand_values() {
        let x = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let mu = Bases::new(x.clone()).unwrap();
        let z = e_step(&x, &mu).unwrap();
        let e = std::f64::consts::E;
        let hi = e / (e + 1.0);
        let lo = 1.0 / (e + 1.0);
        let expect = [hi, lo, lo, hi];
        for (a, b) in z.tensor().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((hi - 0.7311).abs() < 1e-4 && (lo - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn e_step_channel_mismatch() {
        let x = random(&[3, 2], 1);
        let mu = Bases::new(random(&[2, 3], 2)).unwrap();
        assert!(matches!(e_step(&x, &mu), Err(Error::Shape { .. })));
    }

    #[test]
    fn m_step_degenerate_cases() {
        let x = random(&[5, 3], 4);
        let mean: Vec<f64> = (0..3)
            .map(|c| (0..5).map(|n| x.at(&[n, c])).sum::<f64>() / 5.0)
            .collect();

        let uniform = Responsibilities::new(Tensor::full(&[5, 2], 0.5)).unwrap();
        let mu = m_step(&uniform, &x).unwrap();
        for k in 0..2 {
            for (c, m) in mean.iter().enumerate() {
                assert!((mu.tensor().at(&[k, c]) - m).abs() < 1e-14);
            }
        }

        let mut onehot = Tensor::zeros(&[5, 2]);
        for n in 0..5 {
            onehot.data_mut()[n * 2] = 1.0;
        }
        let z = Responsibilities::new(onehot).unwrap();
        assert!(matches!(m_step(&z, &x), Err(Error::DegenerateCluster(1))));
        let z1 = Responsibilities::new(Tensor::full(&[5, 1], 1.0)).unwrap();
        let mu = m_step(&z1, &x).unwrap();
        for (c, m) in mean.iter().enumerate() {
            assert!((mu.tensor().at(&[0, c]) - m).abs() < 1e-14);
        }
    }

    #[test]
    fn m_step_matches_loop_oracle() {
        let x = random(&[6, 3], 5);
        let raw = Tensor::create(&[6, 4], Fill::Uniform { lo: 0.01, hi: 1.0 }, 6).unwrap();
        let mut z = raw.clone();
        for row in z.data_mut().chunks_mut(4) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let mu = m_step(&Responsibilities::new(z.clone()).unwrap(), &x).unwrap();
        for k in 0..4 {
            let mass: f64 = (0..6).map(|n| z.at(&[n, k])).sum();
            for c in 0..3 {
                let mut acc = 0.0;
                for n in 0..6 {
                    acc += z.at(&[n, k]) * x.at(&[n, c]);
                }
                assert!((mu.tensor().at(&[k, c]) - acc / mass).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn run_em_single_round_unrolls() {
        let x = random(&[8, 3], 7);
        let mu0 = kaiming_init_bases(3, 3, 8).unwrap();
        let (z, mu) = run_em(&x, &mu0, 1, true).unwrap();
        let z0 = e_step(&x, &mu0).unwrap();
        let m1 = normalize_bases(&m_step(&z0, &x).unwrap()).unwrap();
        let z1 = e_step(&x, &m1).unwrap();
        assert_eq!(mu, m1);
        assert_eq!(z, z1);
        assert!(run_em(&x, &mu0, 0, true).is_err());
    }

    fn two_cluster_data() -> (Tensor, Vec<usize>) {
        // 20 points at 40·e0 and 20 at 40·e1; exp(-40) makes z numerically one-hot
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let cluster = i % 2;
            let mut p = [0.0, 0.0, 0.0];
            p[cluster] = 40.0;
            data.extend_from_slice(&p);
            labels.push(cluster);
        }
        (t(&[40, 3], &data), labels)
    }

    #[test]
    fn run_em_recovers_separable_clusters() {
        let (x, labels) = two_cluster_data();
        let mu0 = Bases::new(t(&[2, 3], &[0.9, 0.3, 0.1, 0.2, 0.95, 0.1])).unwrap();
        let mu0 = normalize_bases(&mu0).unwrap();
        let (z, mu) = run_em(&x, &mu0, 10, true).unwrap();
        let expect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        for (k, row) in expect.iter().enumerate() {
            for (c, e) in row.iter().enumerate() {
                assert!((mu.tensor().at(&[k, c]) - e).abs() < 1e-6);
            }
        }
        for (n, &label) in labels.iter().enumerate() {
            let row = &z.tensor().data()[n * 2..n * 2 + 2];
            let arg = if row[0] >= row[1] { 0 } else { 1 };
            assert_eq!(arg, label);
        }
        // fixed point
        let (_, again) = run_em(&x, &mu, 10, true).unwrap();
        assert!(again.tensor().max_abs_diff(mu.tensor()) <= 1e-6);
    }

    #[test]
    fn reconstruct_rank_one_and_identity() {
        let mu = Bases::new(t(&[1, 3], &[0.2, -0.4, 0.9])).unwrap();
        let z = Responsibilities::new(Tensor::full(&[5, 1], 1.0)).unwrap();
        let xh = reconstruct(&z, &mu).unwrap();
        for row in xh.data().chunks(3) {
            assert_eq!(row, mu.tensor().data());
        }
        let mu = Bases::new(random(&[3, 4], 9)).unwrap();
        let eye = Responsibilities::new(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]))
            .unwrap();
        assert_eq!(&reconstruct(&eye, &mu).unwrap(), mu.tensor());
    }

    #[test]
    fn normalize_hand_values() {
        let b = Bases::new(t(&[2, 2], &[3.0, 4.0, 0.6, 0.8])).unwrap();
        let n = normalize_bases(&b).unwrap();
        assert!((n.tensor().data()[0] - 0.6).abs() < 1e-15);
        assert!((n.tensor().data()[1] - 0.8).abs() < 1e-15);
        let twice = normalize_bases(&n).unwrap();
        assert!(twice.tensor().max_abs_diff(n.tensor()) <= 1e-15);
        let zero = Bases::new(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(matches!(
            normalize_bases(&zero),
            Err(Error::DegenerateBase(1))
        ));
    }

    #[test]
    fn moving_average_identities() {
        let b0 = kaiming_init_bases(3, 4, 1).unwrap();
        let mt = Bases::new(random(&[3, 4], 2)).unwrap();
        let same = update_bases_moving_average(&b0, &mt, 1.0, true).unwrap();
        let bits = |b: &Bases| {
            b.tensor()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&same), bits(&b0));

        let replaced = update_bases_moving_average(&b0, &mt, 0.0, true).unwrap();
        let expect = normalize_bases(&mt).unwrap();
        assert!(replaced.tensor().max_abs_diff(expect.tensor()) <= 1e-12);
    }

    #[test]
    fn moving_average_hand_arithmetic() {
        let b0 = Bases::new(t(&[1, 2], &[1.0, 0.0])).unwrap();
        let mt = Bases::new(t(&[1, 2], &[0.0, 1.0])).unwrap();
        let b = update_bases_moving_average(&b0, &mt, 0.9, true).unwrap();
        // (0.9, 0.1) / sqrt(0.82)
        let n = 0.82f64.sqrt();
        assert!((b.tensor().data()[0] - 0.9 / n).abs() <= 1e-12);
        assert!((b.tensor().data()[1] - 0.1 / n).abs() <= 1e-12);
        let raw = update_bases_moving_average(&b0, &mt, 0.9, false).unwrap();
        assert!((raw.tensor().data()[0] - 0.9).abs() <= 1e-12);
        assert!((raw.tensor().data()[1] - 0.1).abs() <= 1e-12);
    }

    #[test]
    fn emau_zero_out_weights_is_identity() {
        let x = random(&[4, 3, 5], 3);
        let bases = kaiming_init_bases(3, 4, 4).unwrap();
        let mut params = EmauParams::init(4, 5).unwrap();
        params.conv_out_weight = Tensor::zeros(&[4, 4, 1, 1]);
        let cfg = EmauConfig {
            k: 3,
            t: 3,
            ..EmauConfig::default()
        };
        let (y, mu_t) = emau_forward(&x, &bases, &cfg, &params).unwrap();
        assert_eq!(y, x);
        assert_eq!(mu_t.tensor().shape(), &[3, 4]);
    }

    #[test]
    fn emau_output_shape_matches_input() {
        let bases = kaiming_init_bases(2, 3, 4).unwrap();
        let params = EmauParams::init(3, 1).unwrap();
        let cfg = EmauConfig {
            k: 2,
            t: 2,
            ..EmauConfig::default()
        };
        for (h, w) in [(1, 1), (2, 7), (6, 3)] {
            let x = random(&[3, h, w], (h * 10 + w) as u64);
            let (y, _) = emau_forward(&x, &bases, &cfg, &params).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn emau_bases_get_no_gradient() {
        let x = random(&[2, 3, 3, 3], 3);
        let bases = kaiming_init_bases(2, 3, 4).unwrap();
        let p = EmauParams::init(3, 1).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let vars = EmauVars {
            conv_in_weight: tape.leaf(p.conv_in_weight.clone()),
            conv_in_bias: tape.leaf(p.conv_in_bias.clone()),
            conv_out_weight: tape.leaf(p.conv_out_weight.clone()),
        };
        let cfg = EmauConfig {
            k: 2,
            t: 2,
            ..EmauConfig::default()
        };
        let out = emau_forward_var(&mut tape, xv, &bases, &cfg, vars).unwrap();
        // the only leaves on the tape that require grad are x and the convs
        let s = tape.sum(out.y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(xv).is_some());
        assert!(g
            .get(vars.conv_in_weight)
            .unwrap()
            .data()
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn responsibilities_rows_sum_to_one() {
        for seed in 0..10 {
            let x = random(&[12, 5], seed);
            let mu = kaiming_init_bases(4, 5, seed + 100).unwrap();
            let z = e_step(&x, &mu).unwrap();
            for s in row_sums(z.tensor()) {
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}
