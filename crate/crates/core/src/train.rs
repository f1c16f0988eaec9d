//! Toy denoising training: procedural data, Gaussian noise, L1 loss, Adam
//! with cosine decay, fixed-vs-random top-k schedules, and PSNR evaluation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::attention::Backend;
use crate::error::{KgtError, Result};
use crate::model::{forward_vars, Net};
use crate::numerics::{Tensor, Var};

/// Training-time rule for drawing the per-step neighbor count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TopkSchedule {
    Fixed(usize),
    Random(Vec<usize>),
}

impl Default for TopkSchedule {
    fn default() -> Self {
        // desk-scale stand-in for the large-window value sets
        TopkSchedule::Random(vec![4, 8, 16, 32])
    }
}

impl TopkSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            TopkSchedule::Fixed(k) if *k >= 1 => Ok(()),
            TopkSchedule::Fixed(_) => Err(KgtError::Config("schedule k must be >= 1".into())),
            TopkSchedule::Random(set) => {
                if set.is_empty() {
                    Err(KgtError::Config("random schedule set must be non-empty".into()))
                } else if set.iter().any(|&k| k < 1) {
                    Err(KgtError::Config("every schedule k must be >= 1".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn max_k(&self) -> usize {
        match self {
            TopkSchedule::Fixed(k) => *k,
            TopkSchedule::Random(set) => set.iter().copied().max().unwrap_or(1),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let parse_k = |x: &str| -> Result<usize> {
            x.trim()
                .parse()
                .map_err(|_| KgtError::Config(format!("bad k value '{x}' in schedule")))
        };
        let sched = if let Some(k) = t.strip_prefix("fixed:") {
            TopkSchedule::Fixed(parse_k(k)?)
        } else if let Some(set) = t.strip_prefix("random:") {
            TopkSchedule::Random(set.split(',').map(parse_k).collect::<Result<Vec<_>>>()?)
        } else if t == "random" {
            TopkSchedule::default()
        } else {
            return Err(KgtError::Config(format!(
                "bad schedule '{s}' (expected fixed:<k> or random:<k,k,...>)"
            )));
        };
        sched.validate()?;
        Ok(sched)
    }
}

impl std::fmt::Display for TopkSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopkSchedule::Fixed(k) => write!(f, "fixed:{k}"),
            TopkSchedule::Random(set) => {
                write!(f, "random:")?;
                for (i, k) in set.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{k}")?;
                }
                Ok(())
            }
        }
    }
}

/// Draw this step's k.
pub fn sample_k(schedule: &TopkSchedule, rng: &mut impl Rng) -> usize {
    match schedule {
        TopkSchedule::Fixed(k) => *k,
        TopkSchedule::Random(set) => set[rng.gen_range(0..set.len())],
    }
}

/// Full training recipe.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub patch: usize,
    /// Noise standard deviation on the 0-255 scale.
    pub sigma: f64,
    pub lr: f64,
    pub seed: u64,
    pub schedule: TopkSchedule,
    pub backend: Backend,
    /// Emit a PSNR column every this many steps.
    pub eval_every: usize,
    pub eval_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            patch: 64,
            sigma: 25.0,
            lr: 2e-4,
            seed: 0,
            schedule: TopkSchedule::default(),
            backend: Backend::Gather,
            eval_every: 200,
            eval_count: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.steps < 1 {
            problems.push("steps must be >= 1".to_string());
        }
        if self.batch < 1 {
            problems.push("batch must be >= 1".to_string());
        }
        if self.patch < 8 {
            problems.push("patch must be >= 8".to_string());
        }
        if self.sigma < 0.0 {
            problems.push("sigma must be >= 0".to_string());
        }
        if self.lr < 0.0 {
            problems.push("lr must be >= 0".to_string());
        }
        if self.eval_every < 1 {
            problems.push("eval_every must be >= 1".to_string());
        }
        if let Err(e) = self.schedule.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(KgtError::Config(problems.join("; ")))
        }
    }
}

/// Independent deterministic RNG stream keyed by (seed, purpose, index).
pub(crate) fn stream_seed(seed: u64, tag: &str, idx: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    h = h.wrapping_add(idx.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Deterministic synthetic patch in [0,1]: a smooth gradient base, a few
/// oriented sinusoid gratings, and piecewise-constant convex polygons —
/// flats, textures, and edges in one family.
pub fn synth_patch(seed: u64, size: usize) -> Result<Tensor<f32>> {
    if size < 8 {
        return Err(KgtError::Config(format!("patch size must be >= 8, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "patch", 0));
    let n = size as f32;

    let grad_amp = rng.gen_range(0.05f32..0.20);
    let grad_theta = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let (gc, gs) = (grad_theta.cos(), grad_theta.sin());

    let n_gratings = rng.gen_range(1..=3);
    let gratings: Vec<(f32, f32, f32, f32, f32)> = (0..n_gratings)
        .map(|_| {
            let amp = rng.gen_range(0.04f32..0.12);
            let freq = rng.gen_range(1.0f32..6.0);
            let theta = rng.gen_range(0.0f32..std::f32::consts::TAU);
            let phase = rng.gen_range(0.0f32..std::f32::consts::TAU);
            (amp, freq, theta.cos(), theta.sin(), phase)
        })
        .collect();

    // regular m-gons as half-plane intersections, painted as constants
    let n_polys = rng.gen_range(1..=3);
    struct Poly {
        cx: f32,
        cy: f32,
        r: f32,
        sides: usize,
        phi: f32,
        value: f32,
    }
    let polys: Vec<Poly> = (0..n_polys)
        .map(|_| Poly {
            cx: rng.gen_range(-0.8f32..0.8),
            cy: rng.gen_range(-0.8f32..0.8),
            r: rng.gen_range(0.15f32..0.45),
            sides: rng.gen_range(3..=6),
            phi: rng.gen_range(0.0f32..std::f32::consts::TAU),
            value: rng.gen_range(0.15f32..0.85),
        })
        .collect();

    let mut data = vec![0.0f32; size * size];
    for y in 0..size {
        let v = 2.0 * (y as f32 + 0.5) / n - 1.0;
        for x in 0..size {
            let u = 2.0 * (x as f32 + 0.5) / n - 1.0;
            let mut val = 0.5 + grad_amp * (u * gc + v * gs);
            for &(amp, freq, tc, ts, phase) in &gratings {
                val += amp
                    * (std::f32::consts::PI * freq * (u * tc + v * ts) + phase).sin();
            }
            for p in &polys {
                let (du, dv) = (u - p.cx, v - p.cy);
                let inside = (0..p.sides).all(|j| {
                    let a = p.phi + std::f32::consts::TAU * j as f32 / p.sides as f32;
                    du * a.cos() + dv * a.sin() <= p.r
                });
                if inside {
                    val = p.value;
                }
            }
            data[y * size + x] = val.clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[1, size, size], data)
}

/// Additive Gaussian noise, `x + (sigma/255) * g`, deliberately unclamped so
/// the noise stays zero-mean.
pub fn add_noise(x: &Tensor<f32>, sigma: f64, seed: u64) -> Tensor<f32> {
    if sigma == 0.0 {
        return x.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "noise", 0));
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let s = (sigma / 255.0) as f32;
    let data = x
        .data()
        .iter()
        .map(|&v| v + s * normal.sample(&mut rng) as f32)
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Mean absolute difference (evaluation-side; the differentiable variant is
/// `Var::l1_loss`).
pub fn l1_loss(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f32> {
    if pred.shape() != target.shape() {
        return Err(KgtError::Dim {
            context: "l1_loss",
            detail: format!("{:?} vs {:?}", pred.shape(), target.shape()),
        });
    }
    let n = pred.numel() as f32;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum::<f32>()
        / n)
}

/// `10 log10(1 / MSE)` on the [0,1] scale; the prediction is clamped to
/// [0,1] first and the value is capped at 99 dB below MSE 1e-10.
pub fn psnr(pred: &Tensor<f32>, target: &Tensor<f32>) -> f64 {
    debug_assert_eq!(pred.shape(), target.shape());
    let n = pred.numel() as f64;
    let mse: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p.clamp(0.0, 1.0) - t) as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        99.0
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Adam state (beta1 0.9, beta2 0.999, eps 1e-8) over the network's
/// parameter list in enumeration order.
pub struct Adam {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(net: &Net<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = net
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update from the gradients currently stored on the parameters.
    pub fn step(&mut self, net: &mut Net<f32>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        let (b1, b2) = (Self::BETA1 as f32, Self::BETA2 as f32);
        for (idx, p) in net.params_mut().into_iter().enumerate() {
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let g = p.grad.data();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            }
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                value[i] -= (lr * mhat / (vhat.sqrt() + Self::EPS)) as f32;
            }
        }
    }
}

/// One optimization step over a batch of (noisy, clean) pairs: forward with
/// this step's `k`, L1 loss, backward, Adam update. Returns the pre-update
/// batch loss. Per-item graphs run in parallel; gradients reduce in item
/// order so the result is bitwise deterministic.
pub fn train_step(
    net: &mut Net<f32>,
    batch: &[(Tensor<f32>, Tensor<f32>)],
    opt: &mut Adam,
    lr: f64,
    k: usize,
    backend: Backend,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(KgtError::Config("empty batch".into()));
    }
    let net_ref: &Net<f32> = net;
    let results: Vec<(f32, Vec<Tensor<f32>>)> = batch
        .par_iter()
        .map(|(noisy, clean)| -> Result<(f32, Vec<Tensor<f32>>)> {
            let vars = net_ref.trace();
            let out = forward_vars(&vars, &Var::constant(noisy.clone()), k, backend)?;
            let loss = out.l1_loss(clean)?;
            loss.backward()?;
            Ok((loss.value().data()[0], vars.collect_grads()))
        })
        .collect::<Result<Vec<_>>>()?;

    let scale = 1.0 / batch.len() as f32;
    let mut loss = 0.0f32;
    for p in net.params_mut() {
        p.zero_grad();
    }
    for (item_loss, grads) in &results {
        loss += item_loss * scale;
        for (p, g) in net.params_mut().into_iter().zip(grads) {
            p.accumulate_grad(&g.scale_by(scale));
        }
    }
    if !loss.is_finite() {
        return Err(KgtError::NonFinite {
            context: "training loss",
        });
    }
    opt.step(net, lr);
    Ok(loss)
}

/// Cosine decay from `lr` down to `lr/10` across the run.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let lr_end = lr * 0.1;
    let t = step as f64 / (total - 1) as f64;
    lr_end + 0.5 * (lr - lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Held-out evaluation pairs (clean, noisy) on a seed stream disjoint from
/// training data.
pub fn eval_pairs(cfg: &TrainConfig) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    (0..cfg.eval_count)
        .map(|j| {
            let clean = synth_patch(stream_seed(cfg.seed, "eval-clean", j as u64), cfg.patch)?;
            let noisy = add_noise(&clean, cfg.sigma, stream_seed(cfg.seed, "eval-noise", j as u64));
            Ok((clean, noisy))
        })
        .collect()
}

/// Mean PSNR of the model's outputs over held-out pairs.
pub fn eval_psnr(
    net: &Net<f32>,
    pairs: &[(Tensor<f32>, Tensor<f32>)],
    k: usize,
    backend: Backend,
) -> Result<f64> {
    let mut acc = 0.0;
    for (clean, noisy) in pairs {
        let out = net.forward(noisy, k, backend)?;
        acc += psnr(&out, clean);
    }
    Ok(acc / pairs.len() as f64)
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub final_loss: f32,
    /// (step, psnr) at each evaluation point.
    pub evals: Vec<(usize, f64)>,
    /// Mean PSNR of the raw noisy inputs over the held-out set.
    pub noisy_psnr: f64,
}

/// Full training loop. Writes a CSV log (`step,k,loss,lr,psnr_val`, psnr
/// blank except on eval steps) to `log`.
pub fn run_training(
    net: &mut Net<f32>,
    cfg: &TrainConfig,
    log: &mut impl Write,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut opt = Adam::new(net);
    let mut sched_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "schedule", 0));
    let held_out = eval_pairs(cfg)?;
    let noisy_psnr = held_out
        .iter()
        .map(|(clean, noisy)| psnr(noisy, clean))
        .sum::<f64>()
        / held_out.len().max(1) as f64;

    writeln!(log, "step,k,loss,lr,psnr_val")?;
    let mut evals = Vec::new();
    let mut final_loss = f32::NAN;
    for step in 0..cfg.steps {
        let k = sample_k(&cfg.schedule, &mut sched_rng);
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        let batch: Vec<(Tensor<f32>, Tensor<f32>)> = (0..cfg.batch)
            .into_par_iter()
            .map(|i| -> Result<(Tensor<f32>, Tensor<f32>)> {
                let idx = (step * cfg.batch + i) as u64;
                let clean = synth_patch(stream_seed(cfg.seed, "train-clean", idx), cfg.patch)?;
                let noisy = add_noise(&clean, cfg.sigma, stream_seed(cfg.seed, "train-noise", idx));
                Ok((noisy, clean))
            })
            .collect::<Result<Vec<_>>>()?;

        let loss = train_step(net, &batch, &mut opt, lr, k, cfg.backend).map_err(|e| match e {
            KgtError::NonFinite { .. } => KgtError::Diverged { step },
            other => other,
        })?;
        final_loss = loss;

        let eval_now = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps;
        if eval_now {
            let p = eval_psnr(net, &held_out, k, cfg.backend)?;
            evals.push((step + 1, p));
            writeln!(log, "{},{},{:.6},{:.6e},{:.3}", step + 1, k, loss, lr, p)?;
        } else {
            writeln!(log, "{},{},{:.6},{:.6e},", step + 1, k, loss, lr)?;
        }
    }
    Ok(TrainReport {
        final_loss,
        evals,
        noisy_psnr,
    })
}
