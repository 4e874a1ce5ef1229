//! Acceptance checks, one line per criterion. Exits non-zero if any gating
//! check fails; directional checks are reported only.

use std::cell::Cell;
use std::fs;
use std::time::{Duration, Instant};

use candle_core::{Tensor, Var};
use dad4ts_core::conditioner::{Condition, COND_DIM};
use dad4ts_core::data::{
    all_windows, split_normalize, split_sizes, window_batches, SplitKind, TimeSeriesDataset, WindowBatch,
};
use dad4ts_core::forecast::{self, Forecaster, LinearForecaster, TrainConfig};
use dad4ts_core::geometry::{decode_sample, encode_batch, Paired, SignPolicy};
use dad4ts_core::metrics::{self, improvement_stats, Mode};
use dad4ts_core::nn::{self, InitKind, Optimizer, ParamSet};
use dad4ts_core::pipeline::dvrlg::{val_half_losses, warmup_baseline_loss};
use dad4ts_core::pipeline::run::SampleDump;
use dad4ts_core::pipeline::{run_experiment, ExperimentConfig, RunOptions};
use dad4ts_core::rectflow::{
    self, cfg_generate, combine_guidance, integrate, SamplerConfig, VelocityConfig, VelocityField, VelocityModel,
};
use dad4ts_core::selector::{
    draw_mask, log_prob_tensor, quality, selector_loss, selector_update, RewardState, SelectorConfig, Selector,
};
use dad4ts_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Check {
    id: &'static str,
    pass: bool,
    gating: bool,
    detail: String,
}

impl Check {
    fn gate(id: &'static str, pass: bool, detail: String) -> Self {
        Self { id, pass, gating: true, detail }
    }

    fn report(id: &'static str, pass: bool, detail: String) -> Self {
        Self { id, pass, gating: false, detail }
    }
}

fn timed(id: &'static str, limit: Duration, start: Instant) -> Check {
    let took = start.elapsed();
    Check::gate(id, took < limit, format!("{:.2}s (limit {}s)", took.as_secs_f64(), limit.as_secs()))
}

/// Magnitude below which gradients are compared on an absolute scale;
/// central differences of exactly-zero gradients carry ~1e-11 round-off.
const GRAD_FLOOR: f64 = 1e-6;

fn max_rel_gap(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR))
        .fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every scalar in `vars`.
fn finite_differences(vars: &[Var], h: f64, f: &dyn Fn() -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    for var in vars {
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let shape = var.as_tensor().shape().clone();
        let set = |v: Vec<f64>| var.set(&Tensor::from_vec(v, shape.clone(), &nn::device()).unwrap()).unwrap();
        for j in 0..base.len() {
            let mut up = base.clone();
            up[j] += h;
            set(up);
            let fp = f();
            let mut down = base.clone();
            down[j] -= h;
            set(down);
            let fm = f();
            out.push((fp - fm) / (2.0 * h));
        }
        set(base);
    }
    out
}

fn gradients(loss: &Tensor, vars: &[Var]) -> Vec<f64> {
    let grads = loss.backward().unwrap();
    vars.iter()
        .flat_map(|v| match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; v.as_tensor().elem_count()],
        })
        .collect()
}

// ---------------------------------------------------------------- 1

const EMPLOYEES_BASE: [f64; 8] = [1.32, 1.38, 1.30, 0.153, 0.144, 0.192, 0.184, 0.201];
const EMPLOYEES_GAUSS: [f64; 8] = [1.30, 1.42, 1.41, 0.161, 0.148, 0.207, 0.182, 0.209];
const EMPLOYEES_DELTA: [f64; 8] = [-1.52, 2.72, 8.67, 5.30, 2.85, 7.77, -1.09, 3.85];
const EMPLOYEES_AVG: f64 = 3.57;

fn criterion_1() -> Vec<Check> {
    let start = Instant::now();
    let stats = improvement_stats(&EMPLOYEES_BASE, &EMPLOYEES_GAUSS).unwrap();
    let avg_ok = (stats.imp_mean - EMPLOYEES_AVG).abs() <= 0.05;
    let misses: Vec<String> = stats
        .cells
        .iter()
        .zip(EMPLOYEES_DELTA)
        .enumerate()
        .filter(|(_, (got, want))| (*got - want).abs() > 0.05)
        .map(|(i, (got, want))| format!("#{i} {got:+.2} vs {want:+.2}"))
        .collect();
    // Each reference Δ% must be reachable from some pair of unrounded values
    // that round to the 3-significant-figure inputs.
    let half_ulp = |v: f64| 0.5 * 10f64.powi(v.abs().log10().floor() as i32 - 2);
    let consistent = (0..8).all(|i| {
        let (b, g) = (EMPLOYEES_BASE[i], EMPLOYEES_GAUSS[i]);
        let (hb, hg) = (half_ulp(b), half_ulp(g));
        let lo = 100.0 * ((g - hg) - (b + hb)) / (b + hb);
        let hi = 100.0 * ((g + hg) - (b - hb)) / (b - hb);
        let want = EMPLOYEES_DELTA[i];
        lo - 0.005 <= want && want <= hi + 0.005
    });
    vec![
        Check::gate("1a", avg_ok, format!("Avg {:+.3}% vs reference {EMPLOYEES_AVG:+.2}%", stats.imp_mean)),
        Check::gate(
            "1b",
            misses.is_empty(),
            if misses.is_empty() {
                "every per-cell Δ% within ±0.05pp".into()
            } else {
                format!(
                    "per-cell Δ% off by >0.05pp: {}; reference Δ% consistent with rounding of inputs: {consistent}",
                    misses.join(", ")
                )
            },
        ),
        timed("1c", Duration::from_secs(1), start),
    ]
}

// ---------------------------------------------------------------- 2

/// `v = a·x + b` per component, counting evaluations.
struct Affine {
    a: f64,
    b: f64,
    calls: Cell<usize>,
}

impl VelocityField for Affine {
    fn velocity(&self, x: &Tensor, _t: &Tensor, _c: &Tensor) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        Ok(((x * self.a)? + self.b)?)
    }
}

fn zero_cond(b: usize) -> Tensor {
    Tensor::zeros((b, COND_DIM), nn::DTYPE, &nn::device()).unwrap()
}

fn exp_error(steps: usize) -> f64 {
    let field = Affine { a: 1.0, b: 0.0, calls: Cell::new(0) };
    let x0 = nn::tensor2(vec![1.0; 4], 1, 4).unwrap();
    let x = integrate(&field, &x0, &zero_cond(1), steps, None).unwrap();
    (nn::rows(&x).unwrap()[0][0] - std::f64::consts::E).abs()
}

fn criterion_2() -> Vec<Check> {
    let start = Instant::now();
    let field = Affine { a: 0.0, b: 0.75, calls: Cell::new(0) };
    let x0 = nn::tensor2(vec![0.25, -1.0, 2.0, 0.0], 1, 4).unwrap();
    let x = nn::rows(&integrate(&field, &x0, &zero_cond(1), 20, None).unwrap()).unwrap()[0].clone();
    let const_err = x.iter().zip([1.0, -0.25, 2.75, 0.75]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let (e20, e40) = (exp_error(20), exp_error(40));
    let ratio = e20 / e40;

    let counts_ok = [1usize, 2, 5, 20, 40].iter().all(|&steps| {
        let f = Affine { a: 0.3, b: 0.1, calls: Cell::new(0) };
        integrate(&f, &x0, &zero_cond(1), steps, None).unwrap();
        f.calls.get() == 2 + (steps - 1)
    });
    vec![
        Check::gate("2a", const_err <= 1e-12, format!("constant field error {const_err:.1e}")),
        Check::gate("2b", e20 <= 5e-3, format!("|z_T - e| = {e20:.3e} at 20 steps")),
        Check::gate("2c", (3.5..=4.5).contains(&ratio), format!("error ratio 20/40 steps = {ratio:.3} ({e20:.3e}/{e40:.3e})")),
        Check::gate("2d", counts_ok, "evaluation count 2+(steps-1) for steps in {1,2,5,20,40}".into()),
        timed("2e", Duration::from_secs(1), start),
    ]
}

// ---------------------------------------------------------------- 3

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Windows `a_i·u + (k/a_i)·v`, whose centered Grams span {uuᵀ, vvᵀ}.
fn rank_two_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
    let u = random_vec(rng, d);
    let v = random_vec(rng, d);
    let k = rng.random_range(0.5..2.0);
    (0..b)
        .map(|_| {
            let a = rng.random_range(0.5..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            (0..d).map(|j| a * u[j] + (k / a) * v[j]).collect()
        })
        .collect()
}

fn criterion_3() -> Vec<Check> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut paired_err, mut paper_err) = (0.0f64, 0.0f64);
    for k in 0..100 {
        let windows = rank_two_batch(&mut rng, 4, 24);
        let batch = WindowBatch::from_windows(&windows, 21, 3, SplitKind::Train).unwrap();
        let (state, samples) = encode_batch(&batch, k).unwrap();
        for s in &samples {
            let w = batch.window(s.paired_window_index);
            let paired = Paired { window: w, signs: s.signs };
            let x = decode_sample(&s.m, &state, SignPolicy::Paired, Some(paired)).unwrap();
            let ax = decode_sample(&s.m, &state, SignPolicy::Unsigned, Some(paired)).unwrap();
            for j in 0..24 {
                paired_err = paired_err.max((x[j] - w[j]).abs());
                paper_err = paper_err.max((ax[j] - w[j].abs()).abs());
            }
        }
    }
    vec![
        Check::gate("3a", paired_err <= 1e-6, format!("paired policy max error {paired_err:.1e}")),
        Check::gate("3b", paper_err <= 1e-6, format!("paper policy max |window| error {paper_err:.1e}")),
        timed("3c", Duration::from_secs(10), start),
    ]
}

// ---------------------------------------------------------------- 4

/// Minimum absolute-difference cost over every monotone warping path.
fn dtw_exhaustive(y: &[f64], z: &[f64]) -> f64 {
    fn walk(y: &[f64], z: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + (y[i] - z[j]).abs();
        if i + 1 == y.len() && j + 1 == z.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < y.len() && j + 1 < z.len() {
            walk(y, z, i + 1, j + 1, acc, best);
        }
        if i + 1 < y.len() {
            walk(y, z, i + 1, j, acc, best);
        }
        if j + 1 < z.len() {
            walk(y, z, i, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(y, z, 0, 0, 0.0, &mut best);
    best
}

fn criterion_4() -> Vec<Check> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut exact, mut self_zero, mut symmetric) = (0, true, true);
    for _ in 0..200 {
        let n = rng.random_range(1..=5);
        let m = rng.random_range(1..=5);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let d = metrics::dtw(&y, &z).unwrap();
        if d == dtw_exhaustive(&y, &z) {
            exact += 1;
        }
        self_zero &= metrics::dtw(&y, &y).unwrap() == 0.0;
        symmetric &= d == metrics::dtw(&z, &y).unwrap();
    }
    vec![
        Check::gate("4a", exact == 200, format!("{exact}/200 pairs match path enumeration exactly")),
        Check::gate("4b", self_zero && symmetric, format!("dtw(Y,Y)=0: {self_zero}; symmetric: {symmetric}")),
        timed("4c", Duration::from_secs(10), start),
    ]
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Vec<Check> {
    let model = VelocityModel::new(VelocityConfig { hidden: 32, depth: 2, time_dim: 32, ..Default::default() }, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let windows = rank_two_batch(&mut rng, 4, 15);
    let batch = WindowBatch::from_windows(&windows, 12, 3, SplitKind::Train).unwrap();
    let (state, samples) = encode_batch(&batch, 0).unwrap();
    let paired = Paired { window: batch.window(0), signs: samples[0].signs };
    let c = Condition {
        vector: (0..COND_DIM).map(|i| ((i as f64) * 0.37).sin()).collect(),
        provider_id: "test".into(),
        is_null: false,
    };
    let cfg = SamplerConfig { guidance_weight: 0.0, ..Default::default() };
    let mut bitwise = true;
    for seed in 0..5 {
        let guided = cfg_generate(&model, &c, &state, &cfg, &mut ChaCha8Rng::seed_from_u64(seed), SignPolicy::Paired, Some(paired)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rectflow::draw_noise(1, &mut rng).unwrap();
        let cond = rectflow::condition_tensor(&[&c]).unwrap();
        let x = nn::rows(&integrate(&model, &x0, &cond, cfg.steps, None).unwrap()).unwrap()[0].clone();
        let plain = decode_sample(&[[x[0], x[1]], [x[2], x[3]]], &state, SignPolicy::Paired, Some(paired)).unwrap();
        bitwise &= guided.iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let ones = Tensor::ones((1, 4), nn::DTYPE, &nn::device()).unwrap();
    let halves = (&ones * 0.5).unwrap();
    let combined = nn::rows(&combine_guidance(&ones, &halves, 1.0).unwrap()).unwrap()[0].clone();
    let exact = combined.iter().all(|&v| v == 1.5);
    vec![
        Check::gate("5a", bitwise, "w=0 guided output equals conditional-only decode bitwise (5 seeds)".into()),
        Check::gate("5b", exact, format!("X_c=1, X_null=0.5, w=1 gives {:?}", combined)),
    ]
}

// ---------------------------------------------------------------- 6

fn seasonal_windows(rng: &mut ChaCha8Rng, n: usize, d: usize, noise: f64) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| {
            let phase = rng.random_range(0.0..12.0);
            let amp = rng.random_range(0.8..1.2);
            (0..d)
                .map(|t| amp * (std::f64::consts::TAU * (t as f64 + phase) / 12.0).sin() + noise * normal.sample(rng))
                .collect()
        })
        .collect()
}

fn criterion_6() -> Vec<Check> {
    let cfg = SelectorConfig { width: 8, heads: 2, layers: 1, ffn: 16, head_hidden: 8, ..Default::default() };
    let selector = Selector::new(cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let windows = seasonal_windows(&mut rng, 6, 15, 0.1);
    let batch = WindowBatch::from_windows(&windows, 12, 3, SplitKind::Generated).unwrap();
    let l_e = vec![0.3, 1.2, 0.05, 0.8, 2.0, 0.4];
    let mask = vec![true, false, true, true, false, false];
    let q = quality(0.7, &l_e);
    let vars = selector.params().vars();
    let loss_of = || {
        let probs = selector.probs_tensor(&batch, &l_e, None).unwrap();
        selector_loss(&log_prob_tensor(&probs, &mask).unwrap(), &q).unwrap()
    };
    let analytic = gradients(&loss_of(), &vars);
    let numeric = finite_differences(&vars, 1e-5, &|| nn::scalar(&loss_of()).unwrap());
    let gap = max_rel_gap(&analytic, &numeric);

    let probs = [0.0, 0.2, 0.5, 0.93, 1.0];
    let bits = [true, false, true, false, true];
    let t = Tensor::from_vec(probs.to_vec(), 5, &nn::device()).unwrap();
    let got = log_prob_tensor(&t, &bits).unwrap().to_vec1::<f64>().unwrap();
    let eps: f64 = 1e-8;
    let identity = probs.iter().zip(bits).zip(&got).all(|((&p, m), &g)| {
        let want = if m { (p + eps).ln() } else { (1.0 - p + eps).ln() };
        g.to_bits() == want.to_bits()
    });

    let c = 0.37;
    let mut reward = RewardState::new(c);
    for _ in 0..50 {
        // A zero validation loss and full selection give mean(r̃) = c/(1+ε).
        reward.compute_reward(&[0.0], 1.0).unwrap();
    }
    let target = c / (1.0 + eps);
    let ema_gap = (reward.ema - target).abs();
    let bound = 0.9f64.powi(50) * target.abs();
    vec![
        Check::gate("6a", gap <= 1e-4, format!(
                "selector gradient vs central differences: max rel gap {gap:.2e} over {} params (magnitude floor {GRAD_FLOOR:.0e})",
                analytic.len()
            )),
        Check::gate("6b", identity, "Bernoulli log-prob equals m·ln(p+ε)+(1-m)·ln(1-p+ε) bitwise".into()),
        Check::gate("6c", ema_gap <= bound, format!("|ema - c| = {ema_gap:.6e} <= 0.9^50·|c| = {bound:.6e}")),
    ]
}

// ---------------------------------------------------------------- 7

struct CorruptionRun {
    clean: f64,
    corrupted: f64,
    /// `L_base` minus the frozen forecaster's mean validation-half loss.
    base_gap: f64,
    positive_rewards: usize,
}

/// One seed of the corruption sanity study; probabilities are means over
/// held-out mixed batches.
fn corruption_run(seed: u64) -> CorruptionRun {
    let (l, h, b) = (12, 3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series: Vec<f64> = (0..240)
        .map(|t| (std::f64::consts::TAU * t as f64 / 12.0).sin() + 0.1 * rng.random_range(-1.0..1.0))
        .collect();
    let ds = TimeSeriesDataset::new("clean", series, "", Some(12)).unwrap();
    let split = split_normalize(&ds, l).unwrap();
    let train_batches = window_batches(&split.train, l, h, 4, SplitKind::Train).unwrap();
    let train = all_windows(&split.train, l, h, SplitKind::Train).unwrap();
    let val = all_windows(&split.val, l, h, SplitKind::Val).unwrap();
    let val_half = window_batches(split.val_half(), l, h, 4, SplitKind::ValHalf).unwrap();
    let data_std = {
        let n = split.train.len() as f64;
        let m = split.train.iter().sum::<f64>() / n;
        (split.train.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
    };

    let tc = TrainConfig { lr: 1e-2, weight_decay: 0.0, seed, ..Default::default() };
    let forecaster = LinearForecaster::new(l, h, seed).unwrap();
    let l_base = warmup_baseline_loss(&forecaster, &train_batches, &val_half, &tc, seed).unwrap();
    forecast::train_with_early_stopping(&forecaster, &train, &val, &tc).unwrap();
    let val_losses = val_half_losses(&forecaster, &val_half, None).unwrap();

    let normal = Normal::new(0.0, 10.0 * data_std).unwrap();
    let make_batch = |rng: &mut ChaCha8Rng| {
        let mut w = seasonal_windows(rng, b, l + h, 0.1);
        for row in w.iter_mut().skip(b / 2) {
            row.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
        WindowBatch::from_windows(&w, l, h, SplitKind::Generated).unwrap()
    };

    let selector = Selector::new(SelectorConfig::default(), seed).unwrap();
    let mut opt = Optimizer::adam(selector.params().vars(), selector.config().lr).unwrap();
    let mut reward = RewardState::new(l_base);
    let mut positive_rewards = 0;
    for _ in 0..200 {
        let batch = make_batch(&mut rng);
        let l_e = forecast::per_sample_mse(&forecaster, &batch).unwrap();
        let probs = selector.probs_tensor(&batch, &l_e, Some(&mut rng)).unwrap();
        let decision = draw_mask(&probs.to_vec1::<f64>().unwrap(), &mut rng);
        let r = reward.compute_reward(&val_losses, decision.mask_mean()).unwrap();
        positive_rewards += usize::from(r > 0.0);
        selector_update(&mut opt, &probs, &decision, r, &l_e).unwrap();
    }
    let (mut clean, mut corrupt) = (0.0, 0.0);
    let rounds = 20;
    for _ in 0..rounds {
        let batch = make_batch(&mut rng);
        let l_e = forecast::per_sample_mse(&forecaster, &batch).unwrap();
        let p = selector.score_samples(&batch, &l_e).unwrap();
        clean += p[..b / 2].iter().sum::<f64>();
        corrupt += p[b / 2..].iter().sum::<f64>();
    }
    let n = (rounds * b / 2) as f64;
    CorruptionRun {
        clean: clean / n,
        corrupted: corrupt / n,
        base_gap: l_base - val_losses.iter().sum::<f64>() / val_losses.len() as f64,
        positive_rewards,
    }
}

fn criterion_7() -> Vec<Check> {
    let start = Instant::now();
    let runs: Vec<CorruptionRun> = (0..10).map(corruption_run).collect();
    let wins = runs.iter().filter(|r| r.clean > r.corrupted).count();
    let summary: Vec<String> = runs.iter().map(|r| format!("{:.3}/{:.3}", r.clean, r.corrupted)).collect();
    let gaps: Vec<String> = runs.iter().map(|r| format!("{:+.3}", r.base_gap)).collect();
    let positive: Vec<String> = runs.iter().map(|r| r.positive_rewards.to_string()).collect();
    vec![
        Check::gate("7a", wins >= 8, format!("clean > corrupted in {wins}/10 seeds (clean/corrupted: {})", summary.join(" "))),
        Check::report(
            "7c",
            true,
            format!("L_base - L_val per seed: {}; updates with r > 0 of 200: {}", gaps.join(" "), positive.join(" ")),
        ),
        timed("7b", Duration::from_secs(300), start),
    ]
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Vec<Check> {
    let start = Instant::now();
    let seed = 2025;
    let model = VelocityModel::new(VelocityConfig::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows = rank_two_batch(&mut rng, 4, 15);
    let batch = WindowBatch::from_windows(&windows, 12, 3, SplitKind::Train).unwrap();
    let (_, samples) = encode_batch(&batch, 0).unwrap();
    let sample = &samples[0];
    let c = Condition {
        vector: (0..COND_DIM).map(|i| ((i as f64) * 0.11).cos() / (COND_DIM as f64).sqrt()).collect(),
        provider_id: "test".into(),
        is_null: false,
    };
    let rows = 64;
    let x1 = nn::tensor2(sample.flat().repeat(rows), rows, 4).unwrap();
    let cond = rectflow::condition_tensor(&vec![&c; rows]).unwrap();
    let eval = |model: &VelocityModel| {
        let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE7A1);
        let x1 = nn::tensor2(sample.flat().repeat(512), 512, 4).unwrap();
        let cond = rectflow::condition_tensor(&vec![&c; 512]).unwrap();
        nn::scalar(&rectflow::rf_loss_tensor(model, &x1, &cond, 0.0, &mut eval_rng).unwrap()).unwrap()
    };
    let initial = eval(&model);
    let mut opt = Optimizer::adamw(model.params().vars(), 3e-3, 0.1).unwrap().with_clip(Some(1.0));
    let mut hit = None;
    for step in 1..=500 {
        let loss = rectflow::rf_loss_tensor(&model, &x1, &cond, rectflow::DEFAULT_UNCOND_PROB, &mut rng).unwrap();
        let mut grads = loss.backward().unwrap();
        opt.step(&mut grads).unwrap();
        if step % 10 == 0 && eval(&model) < 0.1 * initial {
            hit = Some(step);
            break;
        }
    }
    let last = eval(&model);
    vec![
        Check::gate(
            "8a",
            hit.is_some(),
            match hit {
                Some(s) => format!("loss {last:.4} < 10% of initial {initial:.4} after {s} steps"),
                None => format!("loss {last:.4} vs initial {initial:.4} after 500 steps"),
            },
        ),
        timed("8b", Duration::from_secs(60), start),
    ]
}

// ---------------------------------------------------------------- 9

fn smoke_config(seed: u64, modes: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        r#"
name = "smoke"
seed = {seed}
input_len = 12
horizons = [3]
forecasters = ["linear"]
modes = [{modes}]
epochs = 3

[dataset]
name = "synthetic"
synthetic = {{ length = 300, period = 12, seed = {seed} }}
"#
    ))
    .unwrap()
}

fn all_finite(logs: &serde_json::Value) -> bool {
    match logs {
        serde_json::Value::Number(n) => n.as_f64().is_some_and(f64::is_finite),
        serde_json::Value::Array(a) => a.iter().all(all_finite),
        serde_json::Value::Object(o) => o.values().all(all_finite),
        _ => true,
    }
}

fn criterion_9() -> Vec<Check> {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(2025, "\"dad4ts\"");
    let opts = |force| RunOptions { base_dir: tmp.path().to_path_buf(), force };
    let first = run_experiment(&cfg, &opts(false));
    let took = start.elapsed();
    let run = tmp.path().join("runs/smoke");
    let cell = run.join("runs/linear_h3_dad4ts");
    let files = [
        run.join("config.toml"),
        run.join("results.csv"),
        run.join("results.json"),
        cell.join("epochs.json"),
        cell.join("manifest.json"),
        cell.join("samples.json"),
        cell.join("forecaster.safetensors"),
        cell.join("velocity.safetensors"),
        cell.join("gate.safetensors"),
        cell.join("selector.safetensors"),
    ];
    let missing: Vec<String> = files.iter().filter(|f| !f.is_file()).map(|f| f.display().to_string()).collect();
    let mut checks = vec![Check::gate("9a", first.is_ok(), match &first {
        Ok(_) => format!("run finished in {:.1}s", took.as_secs_f64()),
        Err(e) => format!("run failed after {:.1}s: {e}", took.as_secs_f64()),
    })];
    checks.push(Check::gate("9b", took < Duration::from_secs(600), format!("{:.1}s (limit 600s)", took.as_secs_f64())));
    checks.push(Check::gate("9c", missing.is_empty(), if missing.is_empty() { "all artifacts present".into() } else { format!("missing {missing:?}") }));
    let epochs = fs::read(cell.join("epochs.json")).unwrap_or_default();
    let logs: serde_json::Value = serde_json::from_slice(&epochs).unwrap_or(serde_json::Value::Null);
    let dump = SampleDump::read(&cell.join("samples.json"));
    let finite = all_finite(&logs)
        && !logs.is_null()
        && logs.as_array().is_some_and(|a| a.iter().all(|e| e.get("aborted").is_none()))
        && dump.as_ref().is_ok_and(|d| d.generated.iter().flatten().chain(&d.probs).all(|v| v.is_finite()));
    checks.push(Check::gate("9d", finite, "no NaN or divergence in epoch logs and sample dump".into()));
    let results = fs::read(run.join("results.json")).unwrap_or_default();
    let replay = run_experiment(&cfg, &opts(true)).is_ok()
        && fs::read(cell.join("epochs.json")).unwrap_or_default() == epochs
        && fs::read(run.join("results.json")).unwrap_or_default() == results;
    checks.push(Check::gate("9e", replay, "second run with the same seed reproduces every logged scalar byte for byte".into()));

    let mut wins = 0;
    let mut deltas = Vec::new();
    for seed in 0..8 {
        let dir = tempfile::tempdir().unwrap();
        let table = run_experiment(&smoke_config(seed, "\"baseline\", \"dad4ts\""), &RunOptions { base_dir: dir.path().to_path_buf(), force: false }).unwrap();
        let d = table.comparison(Mode::Dad4ts).unwrap().rmse.imp_mean;
        deltas.push(format!("{d:+.2}%"));
        wins += usize::from(d < 0.0);
    }
    let rate = 100.0 * wins as f64 / 8.0;
    checks.push(Check::report("9f", rate >= 50.0, format!("Imp.Rate {rate:.1}% over 8 seeds (RMSE Δ: {})", deltas.join(" "))));
    checks
}

// ---------------------------------------------------------------- 10

/// Forecaster whose constant output grows by one every training batch.
struct Worsening {
    params: ParamSet,
    bias: Var,
}

impl Forecaster for Worsening {
    fn name(&self) -> &str {
        "worsening"
    }
    fn input_len(&self) -> usize {
        2
    }
    fn horizon(&self) -> usize {
        1
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        let b = inputs.dim(0)?;
        Ok(self.bias.as_tensor().unsqueeze(0)?.broadcast_as((b, 1))?.contiguous()?)
    }
    fn train_batch(&self, _x: &Tensor, _y: &Tensor, _opt: &mut Optimizer) -> Result<f64> {
        self.bias.set(&(self.bias.as_tensor() + 1.0)?)?;
        Ok(0.0)
    }
}

fn criterion_10() -> Vec<Check> {
    let mut params = ParamSet::new();
    let bias = params.add("bias", &[1], InitKind::Zeros, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let model = Worsening { params, bias };
    let zeros = vec![vec![0.0; 3]; 4];
    let windows = WindowBatch::from_windows(&zeros, 2, 1, SplitKind::Train).unwrap();
    let hist = forecast::train_with_early_stopping(&model, &windows, &windows, &TrainConfig { batch_size: 4, ..Default::default() }).unwrap();

    let sizes = split_sizes(427);
    let values: Vec<f64> = (0..427).map(|i| (i as f64 * 0.3).sin() + i as f64 * 0.01).collect();
    let split = split_normalize(&TimeSeriesDataset::new("employees", values, "monthly", Some(3)).unwrap(), 12).unwrap();
    let tail = &split.train[split.train.len() - 12..];
    vec![
        Check::gate("10a", hist.epochs_run() == 11, format!("early stopping ran {} epochs (best {})", hist.epochs_run(), hist.best_epoch)),
        Check::gate("10b", sizes == (256, 85, 86), format!("split sizes for N=427: {sizes:?}")),
        Check::gate("10c", &split.val[..12] == tail && split.val.len() == 85 + 12, "val windows start with the trailing 12 train points".into()),
    ]
}

fn main() {
    let criteria: [(&str, fn() -> Vec<Check>); 10] = [
        ("aggregation arithmetic", criterion_1),
        ("sampler correctness", criterion_2),
        ("geometric codec", criterion_3),
        ("dtw oracle", criterion_4),
        ("guidance identity", criterion_5),
        ("policy gradient", criterion_6),
        ("selector corruption sanity", criterion_7),
        ("rectified-flow training", criterion_8),
        ("end-to-end smoke", criterion_9),
        ("protocol conformance", criterion_10),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = Vec::new();
    for (n, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != n + 1) {
            continue;
        }
        let checks = run();
        let gating_ok = checks.iter().filter(|c| c.gating).all(|c| c.pass);
        println!("criterion {:>2} {:<28} {}", n + 1, name, if gating_ok { "PASS" } else { "FAIL" });
        for c in &checks {
            let status = match (c.gating, c.pass) {
                (true, true) => "pass",
                (true, false) => "FAIL",
                (false, true) => "report: met",
                (false, false) => "report: not met",
            };
            println!("    {:<4} {:<16} {}", c.id, status, c.detail);
        }
        if !gating_ok {
            failed.push(n + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
