//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the summary always prints:
//! `cargo test -p umtam --test acceptance`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use umtam::analysis::{excess_loss, log_spectra, memory_report, uniform_priors};
use umtam::checkpoint::{decode_checkpoint, decode_state, encode_checkpoint, encode_state, WriteOptions};
use umtam::merge::{elect_signs, merge, Ablation, Mask, MergeSpec, TaskCheckpoint};
use umtam::optimizer::{init_state, train_step, train_step_traced, LrSchedule, OptimizerConfig};
use umtam::tasks::{
    gradient_noise, mlp_loss_grad, optimal_merge_oracle, planted_grad, quad_loss_grad, MlpTask,
    PlantedLowRankTask, QuadraticTask,
};
use umtam::tensor::{effective_rank, energy_ratio, stable_rank};
use umtam::{Error, Matrix, SvdFactors};

type Check = std::result::Result<String, String>;

fn ok_or(cond: bool, detail: String) -> Check {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e(err: Error) -> String {
    err.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(g: &mut ChaCha8Rng, m: usize, n: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(m, n, |_, _| g.random_range(lo..hi)).unwrap()
}

fn lr(eta0: f64) -> LrSchedule {
    LrSchedule::Constant { eta0 }
}

// ---------------------------------------------------------------------------
// 1. Momentum identity

fn identity_run(
    cfg: &OptimizerConfig,
    w0: &Matrix,
    mut grad: impl FnMut(&Matrix, u64) -> Matrix,
) -> Result<(f64, usize, usize), String> {
    let mut state = init_state(w0, cfg, 5).map_err(e)?;
    let (mut worst, mut checked, mut rank_changes) = (0.0f64, 0, 0);
    for t in 1..=500 {
        let g = grad(state.weights(), t);
        let (info, mixed) = train_step_traced(&mut state, &g, cfg).map_err(e)?;
        if info.rank_change.is_some() {
            rank_changes += 1;
        }
        if info.truncated {
            let recon = state.momentum().factors.reconstruct();
            let sum = recon.add(&state.momentum().error).map_err(e)?;
            worst = worst.max(sum.sub(&mixed).map_err(e)?.max_abs());
            checked += 1;
        }
    }
    Ok((worst, checked, rank_changes))
}

fn c1_momentum_identity() -> Check {
    let base = OptimizerConfig {
        rank: 3,
        rank_min: 1,
        rank_max: 8,
        rank_delta: 2,
        adapt_interval: 50,
        lr_schedule: lr(0.01),
        ..OptimizerConfig::default()
    };
    let quad = QuadraticTask::random(12, 10, (0.5, 2.0), 1).map_err(e)?;
    let planted = PlantedLowRankTask::random(12, 10, 3, 0.1, 2).map_err(e)?;
    let mlp = MlpTask::synthetic(vec![6, 3], 30, 3).map_err(e)?;

    let mut details = Vec::new();
    let mut worst_all = 0.0f64;
    let mut g = rng(11);
    let w0_q = random_matrix(&mut g, 12, 10, -0.5, 0.5);
    let w0_m = random_matrix(&mut g, 6, 3, -0.5, 0.5);
    for (label, interval) in [("svd every step", 1u64), ("svd every 4 steps", 4)] {
        let cfg = OptimizerConfig {
            svd_interval: interval,
            ..base.clone()
        };
        let runs = [
            ("quadratic", identity_run(&cfg, &w0_q, |w, _| quad_loss_grad(&quad, w).unwrap().1)?),
            ("planted", identity_run(&cfg, &w0_q, |w, t| planted_grad(&planted, w, t).unwrap())?),
            (
                "mlp",
                identity_run(&cfg, &w0_m, |w, _| {
                    mlp_loss_grad(&mlp, std::slice::from_ref(w)).unwrap().1.remove(0)
                })?,
            ),
        ];
        for (name, (worst, checked, changes)) in runs {
            worst_all = worst_all.max(worst);
            details.push(format!("{name}/{label}: {checked} checks, {changes} rank changes, max {worst:.1e}"));
        }
    }
    ok_or(worst_all <= 1e-12, format!("max |M̃ − (UΣVᵀ + E)| = {worst_all:.2e}; {}", details.join("; ")))
}

// ---------------------------------------------------------------------------
// 2. Error-feedback bound

fn c2_error_feedback_bound() -> Check {
    let s = 0.05;
    let gamma = 0.5;
    let bound = 1.5 * s / (1.0 - gamma);
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let task = PlantedLowRankTask::random(20, 16, 3, s, seed).map_err(e)?;
        let cfg = OptimizerConfig {
            gamma,
            lr_schedule: lr(0.01),
            ..OptimizerConfig::default().fixed_rank(3)
        };
        let w0 = Matrix::zeros(20, 16).map_err(e)?;
        let mut state = init_state(&w0, &cfg, seed).map_err(e)?;
        for t in 1..=200 {
            let g = planted_grad(&task, state.weights(), t).map_err(e)?;
            let info = train_step(&mut state, &g, &cfg).map_err(e)?;
            if t >= 50 {
                worst = worst.max(info.error_norm);
            }
        }
    }
    ok_or(
        worst <= bound,
        format!("max ‖E_t‖_F over t ∈ [50, 200], 5 seeds = {worst:.4e}; bound 1.5·s/(1−γ) = {bound:.4e}"),
    )
}

// ---------------------------------------------------------------------------
// 3. Lossless regime

/// The initial factors are `ε·I`, so the first residual is of order `ε`.
const LOSSLESS_EPSILON: f64 = 1e-12;

fn c3_lossless_regime() -> Check {
    let k = 4;
    let mut worst = 0.0f64;
    let mut per_rank = Vec::new();
    for r in [4usize, 6, 8, 12] {
        let mut worst_r = 0.0f64;
        for seed in 0..3 {
            let task = PlantedLowRankTask::random(16, 12, k, 0.0, 30 + seed).map_err(e)?;
            let cfg = OptimizerConfig {
                epsilon: LOSSLESS_EPSILON,
                lr_schedule: lr(0.01),
                ..OptimizerConfig::default().fixed_rank(r)
            };
            let w0 = Matrix::zeros(16, 12).map_err(e)?;
            let mut state = init_state(&w0, &cfg, seed).map_err(e)?;
            for t in 1..=300 {
                let g = planted_grad(&task, state.weights(), t).map_err(e)?;
                let info = train_step(&mut state, &g, &cfg).map_err(e)?;
                worst_r = worst_r.max(info.error_norm);
            }
        }
        per_rank.push(format!("r={r}: {worst_r:.1e}"));
        worst = worst.max(worst_r);
    }
    ok_or(
        worst <= 1e-9,
        format!("planted rank {k}, ε = {LOSSLESS_EPSILON:e}: max ‖E_t‖_F = {worst:.2e} ({})", per_rank.join(", ")),
    )
}

// ---------------------------------------------------------------------------
// 4. Rank invariance

fn c4_rank_invariance() -> Check {
    let task = PlantedLowRankTask::random(24, 20, 4, 0.0, 4).map_err(e)?;
    let w0 = Matrix::zeros(24, 20).map_err(e)?;
    let mut finals = Vec::new();
    for r in [4usize, 8, 16] {
        let cfg = OptimizerConfig {
            lr_schedule: lr(1e-4),
            ..OptimizerConfig::default().fixed_rank(r)
        };
        let mut state = init_state(&w0, &cfg, 9).map_err(e)?;
        for t in 1..=1000 {
            let g = planted_grad(&task, state.weights(), t).map_err(e)?;
            train_step(&mut state, &g, &cfg).map_err(e)?;
        }
        finals.push(task.loss(state.weights()).map_err(e)?);
    }
    let initial = task.loss(&w0).map_err(e)?;
    let max = finals.iter().copied().fold(f64::MIN, f64::max);
    let min = finals.iter().copied().fold(f64::MAX, f64::min);
    let spread = (max - min) / max.abs();
    ok_or(
        spread <= 1e-6,
        format!(
            "final losses (r=4, 8, 16) = {:.10e}, {:.10e}, {:.10e} (initial {initial:.4e}); relative spread {spread:.2e}",
            finals[0], finals[1], finals[2]
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Strong-convexity convergence

fn c5_run(task: &QuadraticTask, cfg: &OptimizerConfig, noise: f64, steps: u64) -> Result<(Vec<f64>, f64), String> {
    let (m, n) = task.shape();
    let w0 = Matrix::zeros(m, n).map_err(e)?;
    let mut state = init_state(&w0, cfg, 1).map_err(e)?;
    let mut losses = Vec::new();
    let mut plateau = Vec::new();
    for t in 1..=steps {
        let (loss, mut g) = quad_loss_grad(task, state.weights()).map_err(e)?;
        losses.push(loss);
        if noise > 0.0 {
            g = g.add(&gradient_noise(77, t, (m, n), noise).map_err(e)?).map_err(e)?;
        }
        train_step(&mut state, &g, cfg).map_err(e)?;
        if t > steps - steps / 4 {
            plateau.push(state.weights().sub(task.target()).map_err(e)?.frobenius_norm_sq());
        }
    }
    losses.push(task.loss(state.weights()).map_err(e)?);
    Ok((losses, plateau.iter().sum::<f64>() / plateau.len() as f64))
}

fn c5_strong_convexity() -> Check {
    // H ∈ [1, 2] gives μ = 1, L = 2, so the admissible range is η ≤ min(1/L, 2μ/L²) = 0.5.
    let task = QuadraticTask::random(12, 10, (1.0, 2.0), 5).map_err(e)?;
    let cfg = OptimizerConfig {
        lr_schedule: lr(2e-3),
        ..OptimizerConfig::default().fixed_rank(4)
    };
    let (losses, _) = c5_run(&task, &cfg, 0.0, 500)?;
    let violations = losses[10..]
        .windows(2)
        .filter(|w| w[1] > w[0])
        .count();
    let sigma = 2e-3;
    let (_, low) = c5_run(&task, &cfg, sigma, 3000)?;
    let (_, high) = c5_run(&task, &cfg, 10.0 * sigma, 3000)?;
    let ratio = high / low;
    ok_or(
        violations == 0 && ratio > 3.0,
        format!(
            "noise-free: {violations} increases after step 10, loss {:.3e} → {:.3e}; plateau ‖W−W*‖² at tail σ {low:.3e}, at 10σ {high:.3e}, ratio {ratio:.2}",
            losses[0],
            losses[losses.len() - 1]
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Merge oracle equivalence

fn exact_checkpoint(name: &str, task: &QuadraticTask, w0: &Matrix) -> TaskCheckpoint {
    let (m, n) = task.shape();
    TaskCheckpoint {
        name: name.into(),
        weights: task.target().clone(),
        init_weights: w0.clone(),
        saliency: task.hessian_diag().clone(),
        curvature: task.exact_curvature().expect("separable task"),
        momentum: SvdFactors {
            u: Matrix::zeros(m, 1).unwrap(),
            sigma: vec![0.0],
            v: Matrix::zeros(n, 1).unwrap(),
        },
        error: None,
        meta: BTreeMap::new(),
        extra: BTreeMap::new(),
    }
}

fn separable_random(g: &mut ChaCha8Rng, m: usize, n: usize, target: Matrix) -> QuadraticTask {
    let a: Vec<f64> = (0..m).map(|_| g.random_range(0.2..3.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| g.random_range(0.2..3.0)).collect();
    QuadraticTask::separable(target, a, b).unwrap()
}

fn c6_merge_oracle() -> Check {
    let spec = MergeSpec {
        sparsity_k: 100.0,
        lambda1: 0.0,
        lambda2: 1.0,
        ..MergeSpec::default()
    };
    let no_election = MergeSpec {
        ablation: Ablation {
            use_sign_election: false,
            ..Ablation::default()
        },
        ..spec.clone()
    };
    let mut g = rng(6);
    let (mut worst_random, mut worst_same_sign) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (m, n) = (g.random_range(1..6), g.random_range(1..6));
        let w0 = random_matrix(&mut g, m, n, -1.0, 1.0);

        let target1 = random_matrix(&mut g, m, n, -2.0, 2.0);
        let t1 = separable_random(&mut g, m, n, target1);
        let target2 = random_matrix(&mut g, m, n, -2.0, 2.0);
        let t2 = separable_random(&mut g, m, n, target2);
        let oracle = optimal_merge_oracle(&[t1.clone(), t2.clone()], &[0.5, 0.5]).map_err(e)?;
        let ck = [exact_checkpoint("a", &t1, &w0), exact_checkpoint("b", &t2, &w0)];
        let (merged, _) = merge(&ck, &no_election).map_err(e)?;
        worst_random = worst_random.max(merged.sub(&oracle).map_err(e)?.max_abs());

        // Same-sign deltas run the full pipeline including election.
        let signs = random_matrix(&mut g, m, n, -1.0, 1.0).map(f64::signum);
        let d1 = random_matrix(&mut g, m, n, 0.1, 2.0).hadamard(&signs).map_err(e)?;
        let d2 = random_matrix(&mut g, m, n, 0.1, 2.0).hadamard(&signs).map_err(e)?;
        let s1 = separable_random(&mut g, m, n, w0.add(&d1).map_err(e)?);
        let s2 = separable_random(&mut g, m, n, w0.add(&d2).map_err(e)?);
        let oracle = optimal_merge_oracle(&[s1.clone(), s2.clone()], &[0.5, 0.5]).map_err(e)?;
        let ck = [exact_checkpoint("a", &s1, &w0), exact_checkpoint("b", &s2, &w0)];
        let (merged, _) = merge(&ck, &spec).map_err(e)?;
        worst_same_sign = worst_same_sign.max(merged.sub(&oracle).map_err(e)?.max_abs());
    }

    let zero = Matrix::zeros(1, 2).map_err(e)?;
    let h1 = QuadraticTask::separable(Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(), vec![1.0], vec![1.0, 4.0])
        .map_err(e)?;
    let h2 = QuadraticTask::separable(Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(), vec![1.0], vec![4.0, 1.0])
        .map_err(e)?;
    let (hand, _) = merge(&[exact_checkpoint("h1", &h1, &zero), exact_checkpoint("h2", &h2, &zero)], &spec)
        .map_err(e)?;
    let hand_err = (hand[(0, 0)] - 0.2).abs().max((hand[(0, 1)] - 0.2).abs());
    ok_or(
        worst_random <= 1e-10 && worst_same_sign <= 1e-10 && hand_err <= 1e-10,
        format!(
            "50 random pairs (election off): max err {worst_random:.1e}; 50 same-sign pairs (full pipeline): {worst_same_sign:.1e}; hand case ({:.12}, {:.12})",
            hand[(0, 0)],
            hand[(0, 1)]
        ),
    )
}

// ---------------------------------------------------------------------------
// 7 and 14. Conflicting pairs with anisotropic curvature

const PAIR_M: usize = 8;
const PAIR_N: usize = 6;

struct ConflictPair {
    tasks: [QuadraticTask; 2],
    experts: [TaskCheckpoint; 2],
}

/// Task `a` is sharply curved on the first half of the rows and nearly
/// flat on the rest; task `b` mirrors it. On its own rows each task moves
/// a little; on the other task's rows it moves far in the opposite direction.
fn conflict_pair(seed: u64) -> Result<ConflictPair, String> {
    let mut g = rng(1000 + seed);
    let half = PAIR_M / 2;
    let w0 = random_matrix(&mut g, PAIR_M, PAIR_N, -0.1, 0.1);
    let signs = random_matrix(&mut g, PAIR_M, PAIR_N, -1.0, 1.0).map(f64::signum);
    let mut delta = [Matrix::zeros(PAIR_M, PAIR_N).unwrap(), Matrix::zeros(PAIR_M, PAIR_N).unwrap()];
    let mut tasks = Vec::new();
    for (k, d) in delta.iter_mut().enumerate() {
        for i in 0..PAIR_M {
            let own = (i < half) == (k == 0);
            for j in 0..PAIR_N {
                let s = signs[(i, j)];
                d[(i, j)] = if own {
                    s * g.random_range(0.2..0.5)
                } else {
                    -s * g.random_range(0.6..1.0)
                };
            }
        }
    }
    for (k, d) in delta.iter().enumerate() {
        let a: Vec<f64> = (0..PAIR_M)
            .map(|i| {
                if (i < half) == (k == 0) {
                    g.random_range(5.0..10.0)
                } else {
                    g.random_range(0.002..0.01)
                }
            })
            .collect();
        let b: Vec<f64> = (0..PAIR_N).map(|_| g.random_range(0.8..1.2)).collect();
        tasks.push(QuadraticTask::separable(w0.add(d).unwrap(), a, b).map_err(e)?);
    }
    let cfg = OptimizerConfig {
        lr_schedule: lr(0.02),
        ..OptimizerConfig::default().fixed_rank(4)
    };
    let mut experts = Vec::new();
    for (k, task) in tasks.iter().enumerate() {
        let mut state = init_state(&w0, &cfg, seed).map_err(e)?;
        for _ in 0..400 {
            let g = quad_loss_grad(task, state.weights()).map_err(e)?.1;
            train_step(&mut state, &g, &cfg).map_err(e)?;
        }
        experts.push(TaskCheckpoint::from_state(format!("task{k}"), &state, BTreeMap::new()));
    }
    let [ta, tb]: [QuadraticTask; 2] = tasks.try_into().unwrap();
    let [ea, eb]: [TaskCheckpoint; 2] = experts.try_into().unwrap();
    Ok(ConflictPair {
        tasks: [ta, tb],
        experts: [ea, eb],
    })
}

fn pair_excess(pair: &ConflictPair, spec: &MergeSpec) -> Result<f64, String> {
    let (merged, _) = merge(&pair.experts, spec).map_err(e)?;
    excess_loss(&pair.tasks, &merged, &uniform_priors(2)).map_err(e)
}

fn umtam_pair_spec() -> MergeSpec {
    MergeSpec {
        sparsity_k: 50.0,
        ..MergeSpec::default()
    }
}

fn c7_beats_linear() -> Check {
    let spec = umtam_pair_spec();
    let mut wins = 0;
    let (mut sum_u, mut sum_l) = (0.0, 0.0);
    for seed in 0..50 {
        let pair = conflict_pair(seed)?;
        let u = pair_excess(&pair, &spec)?;
        let l = pair_excess(&pair, &MergeSpec::linear())?;
        if !(u >= 0.0 && u.is_finite() && l.is_finite()) {
            return Err(format!("seed {seed}: excess losses {u}, {l} not finite and non-negative"));
        }
        sum_u += u;
        sum_l += l;
        if u < l {
            wins += 1;
        }
    }
    ok_or(
        wins >= 45,
        format!(
            "UMTAM wins {wins}/50; mean excess UMTAM {:.4e}, linear {:.4e}",
            sum_u / 50.0,
            sum_l / 50.0
        ),
    )
}

fn c14_ablations() -> Check {
    let full = umtam_pair_spec();
    let variant = |f: fn(&mut Ablation)| {
        let mut s = full.clone();
        f(&mut s.ablation);
        s
    };
    let specs = [
        ("no curvature pruning", variant(|a| a.use_curvature_pruning = false)),
        ("no sign election", variant(|a| a.use_sign_election = false)),
        ("no curvature aggregation", variant(|a| a.use_curvature_aggregation = false)),
    ];
    let mut full_sum = 0.0;
    let mut sums = [0.0; 3];
    for seed in 0..50 {
        let pair = conflict_pair(seed)?;
        full_sum += pair_excess(&pair, &full)?;
        for (s, (_, spec)) in sums.iter_mut().zip(&specs) {
            *s += pair_excess(&pair, spec)?;
        }
    }
    let full_mean = full_sum / 50.0;
    let means: Vec<f64> = sums.iter().map(|s| s / 50.0).collect();
    let detail = specs
        .iter()
        .zip(&means)
        .map(|((name, _), m)| format!("{name} {m:.4e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ok_or(
        means.iter().all(|&m| full_mean <= m),
        format!("mean excess: full {full_mean:.4e}; {detail}"),
    )
}

// ---------------------------------------------------------------------------
// 8. Curvature versus magnitude selection

fn c8_curvature_vs_magnitude() -> Check {
    let (m, n) = (4, 5);
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..20 {
        let mut g = rng(800 + seed);
        let w0 = random_matrix(&mut g, m, n, -0.2, 0.2);
        let mut delta = random_matrix(&mut g, m, n, -0.02, 0.02);
        // (0, 0): sharp curvature, modest move. (2, 3): flat, large move.
        delta[(0, 0)] = g.random_range(0.4..0.6);
        delta[(2, 3)] = g.random_range(1.5..2.5);
        let mut a: Vec<f64> = (0..m).map(|_| g.random_range(0.8..1.2)).collect();
        let mut b: Vec<f64> = (0..n).map(|_| g.random_range(0.8..1.2)).collect();
        a[0] = g.random_range(2.5..3.5);
        b[0] = g.random_range(2.5..3.5);
        a[2] = g.random_range(0.05..0.15);
        b[3] = g.random_range(0.05..0.15);
        let task = QuadraticTask::separable(w0.add(&delta).unwrap(), a, b).map_err(e)?;
        let cfg = OptimizerConfig {
            lr_schedule: lr(0.02),
            ..OptimizerConfig::default().fixed_rank(2)
        };
        let mut state = init_state(&w0, &cfg, seed).map_err(e)?;
        for _ in 0..400 {
            let grad = quad_loss_grad(&task, state.weights()).map_err(e)?.1;
            train_step(&mut state, &grad, &cfg).map_err(e)?;
        }
        let ckpt = TaskCheckpoint::from_state("t", &state, BTreeMap::new());
        let k = 100.0 / (m * n) as f64;
        let pruned_loss = |importance: &Matrix| -> Result<(f64, usize), String> {
            let mask = umtam::merge::importance_mask(importance, k).map_err(e)?;
            let d = umtam::merge::task_vector(&ckpt).map_err(e)?;
            let kept = Matrix::from_fn(m, n, |i, j| if mask.get(i, j) { d[(i, j)] } else { 0.0 }).unwrap();
            Ok((task.loss(&w0.add(&kept).unwrap()).map_err(e)?, mask.count()))
        };
        let (curv, kc) = pruned_loss(&umtam::merge::saliency_importance(&ckpt))?;
        let (mag, km) = pruned_loss(&umtam::merge::magnitude_importance(&ckpt).map_err(e)?)?;
        if kc != 1 || km != 1 {
            return Err(format!("seed {seed}: masks kept {kc} and {km} entries, expected one"));
        }
        if curv < mag {
            wins += 1;
        }
        if seed < 3 {
            detail.push(format!("seed {seed}: {curv:.3e} vs {mag:.3e}"));
        }
    }
    ok_or(
        wins == 20,
        format!("curvature-aware pruning strictly better in {wins}/20 ({})", detail.join(", ")),
    )
}

// ---------------------------------------------------------------------------
// 9. Sign election against brute force

fn brute_force_election(deltas: &[[i8; 4]; 3], masks: &[[bool; 4]; 3]) -> ([i8; 4], [[bool; 4]; 3]) {
    let mut signs = [0i8; 4];
    let mut out = *masks;
    for e in 0..4 {
        // Support for each candidate sign: total |Δ| of masked tasks that agree with it.
        let support = |s: i8| -> i32 {
            (0..3)
                .filter(|&t| masks[t][e] && deltas[t][e] == s)
                .map(|t| deltas[t][e].unsigned_abs() as i32)
                .sum()
        };
        let (plus, minus) = (support(1), support(-1));
        signs[e] = match plus.cmp(&minus) {
            std::cmp::Ordering::Greater => 1,
            std::cmp::Ordering::Less => -1,
            std::cmp::Ordering::Equal => 0,
        };
        if signs[e] != 0 {
            for t in 0..3 {
                if masks[t][e] && deltas[t][e] == -signs[e] {
                    out[t][e] = false;
                }
            }
        }
    }
    (signs, out)
}

fn c9_sign_election() -> Check {
    let ones = vec![Matrix::filled(1, 4, 1.0).unwrap(); 3];
    let mut checked = 0u64;
    let mut mismatches = 0u64;
    let total = 3u64.pow(12);
    for idx in 0..total {
        let mut code = idx;
        let mut deltas = [[0i8; 4]; 3];
        for row in deltas.iter_mut() {
            for v in row.iter_mut() {
                *v = (code % 3) as i8 - 1;
                code /= 3;
            }
        }
        // Cycle through all 2^12 mask patterns across the enumeration.
        let pattern = idx % 4096;
        let mut masks = [[false; 4]; 3];
        for (t, row) in masks.iter_mut().enumerate() {
            for (j, b) in row.iter_mut().enumerate() {
                *b = pattern >> (t * 4 + j) & 1 == 1;
            }
        }
        let dm: Vec<Matrix> = deltas
            .iter()
            .map(|d| Matrix::from_vec(1, 4, d.iter().map(|&x| x as f64).collect()).unwrap())
            .collect();
        let mm: Vec<Mask> = masks.iter().map(|m| Mask::new(1, 4, m.to_vec()).unwrap()).collect();
        let (signs, after) = elect_signs(&dm, &ones, &mm).map_err(e)?;
        let (want_signs, want_masks) = brute_force_election(&deltas, &masks);
        let got_signs: Vec<i8> = signs.as_slice().iter().map(|&s| s as i8).collect();
        let got_masks: Vec<Vec<bool>> = after.iter().map(|m| m.bits().to_vec()).collect();
        let want_masks: Vec<Vec<bool>> = want_masks.iter().map(|m| m.to_vec()).collect();
        if got_signs != want_signs || got_masks != want_masks {
            mismatches += 1;
        }
        checked += 1;
    }
    ok_or(
        mismatches == 0 && checked == total,
        format!("{checked} instances (all 3^12 deltas, mask patterns cycled), {mismatches} mismatches"),
    )
}

// ---------------------------------------------------------------------------
// 10. Spectral statistics against a dense SVD

fn reference_spectrum(a: &Matrix) -> Vec<f64> {
    let dm = DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice());
    let mut sv: Vec<f64> = dm.singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

fn c10_spectral_oracle() -> Check {
    let mut g = rng(10);
    let mut worst = 0.0f64;
    let mut records = 0;
    for trial in 0..100 {
        let (m, n) = (g.random_range(1..13), g.random_range(1..13));
        let a = random_matrix(&mut g, m, n, -1.0, 1.0);
        let sv = reference_spectrum(&a);
        let sq: Vec<f64> = sv.iter().map(|s| s * s).collect();
        let total: f64 = sq.iter().sum();
        let k = m.min(n) as f64;
        let ref_ratio = (total / sq[0]).clamp(1.0, k);
        worst = worst.max((stable_rank(&a).map_err(e)? - ref_ratio).abs());
        worst = worst.max((effective_rank(&a).map_err(e)? - ref_ratio).abs());
        for r in 1..=m.min(n) {
            let reference = sq[..r].iter().sum::<f64>() / total;
            worst = worst.max((energy_ratio(&a, r).map_err(e)? - reference).abs());
        }
        // The trajectory logger goes through the same kernels.
        if trial % 10 == 0 && m.min(n) >= 2 {
            let cfg = OptimizerConfig {
                rank: 1,
                rank_max: 1,
                ..OptimizerConfig::default()
            };
            let state = init_state(&Matrix::filled(m, n, 0.5).unwrap(), &cfg, trial).map_err(e)?;
            for rec in log_spectra(&state, &a, &[1, 2]).map_err(e)? {
                if rec.tag == umtam::analysis::MatrixTag::Gradient {
                    worst = worst.max((rec.stable_rank - ref_ratio).abs());
                    worst = worst.max((rec.energy_ratios[&2] - (sq[0] + sq[1]) / total).abs());
                    records += 1;
                }
            }
        }
    }
    ok_or(
        worst <= 1e-9,
        format!("100 matrices up to 12×12 plus {records} logged records: max deviation {worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 11. Memory report

fn c11_memory_report() -> Check {
    let r = memory_report(1000, 1000, 32, 8, 20.0).map_err(e)?;
    // mn + 32(m + n) + 1024 + 1.6 mn, with the m + n second-moment term on top.
    let expansion = 1_000_000 + 32 * 2000 + 1024 + 1_600_000;
    let expected_total = expansion + 2000;
    let ok = r.weight_params == 1_000_000
        && r.momentum_params == 65_024
        && r.second_moment_params == 2_000
        && r.saliency_params == 1_600_000
        && r.total_params == expected_total
        && r.weight_params + r.momentum_params + r.second_moment_params + r.saliency_params == r.total_params
        && r.error_buffer_params == 1_000_000
        && r.adam_baseline_params == 3_000_000;
    ok_or(
        ok,
        format!(
            "weights {} + momentum {} + second moments {} + saliency {} = {} (error buffer {} separate, Adam {})",
            r.weight_params,
            r.momentum_params,
            r.second_moment_params,
            r.saliency_params,
            r.total_params,
            r.error_buffer_params,
            r.adam_baseline_params
        ),
    )
}

// ---------------------------------------------------------------------------
// 12. Checkpoint round trip, fuzz and resume

fn c12_checkpoint_io() -> Check {
    let task = QuadraticTask::random(7, 5, (0.5, 2.0), 12).map_err(e)?;
    let cfg = OptimizerConfig {
        rank: 3,
        adapt_interval: 7,
        svd_interval: 2,
        lr_schedule: lr(0.01),
        ..OptimizerConfig::default()
    };
    let w0 = Matrix::from_fn(7, 5, |i, j| 0.1 * i as f64 - 0.07 * j as f64).unwrap();
    let mut state = init_state(&w0, &cfg, 12).map_err(e)?;
    for _ in 0..15 {
        let g = quad_loss_grad(&task, state.weights()).map_err(e)?.1;
        train_step(&mut state, &g, &cfg).map_err(e)?;
    }

    // Mid-training save and resume.
    let bytes = encode_state(&state, "resume", &BTreeMap::new()).map_err(e)?;
    let mut resumed = decode_state(&bytes).map_err(e)?.state;
    if resumed != state {
        return Err("decoded state differs from the saved one".into());
    }
    let mut original = state.clone();
    for _ in 0..10 {
        let g1 = quad_loss_grad(&task, original.weights()).map_err(e)?.1;
        train_step(&mut original, &g1, &cfg).map_err(e)?;
        let g2 = quad_loss_grad(&task, resumed.weights()).map_err(e)?.1;
        train_step(&mut resumed, &g2, &cfg).map_err(e)?;
    }
    if original != resumed {
        return Err("resumed run diverged from the uninterrupted run".into());
    }

    // Checkpoint round trip.
    let mut meta = BTreeMap::new();
    meta.insert("steps".to_string(), "15".to_string());
    let ckpt = TaskCheckpoint::from_state("fuzz", &state, meta);
    let encoded = encode_checkpoint(&ckpt, &WriteOptions::default()).map_err(e)?;
    let decoded = decode_checkpoint(&encoded).map_err(e)?;
    let bitwise = |a: &Matrix, b: &Matrix| {
        a.shape() == b.shape() && a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
    };
    if !(bitwise(&decoded.weights, &ckpt.weights)
        && bitwise(&decoded.init_weights, &ckpt.init_weights)
        && bitwise(&decoded.saliency, &ckpt.saliency)
        && bitwise(&decoded.momentum.u, &ckpt.momentum.u)
        && bitwise(&decoded.momentum.v, &ckpt.momentum.v)
        && decoded == ckpt)
    {
        return Err("checkpoint round trip is not bitwise identical".into());
    }

    // Fuzz with random byte mutations.
    let mut g = rng(1212);
    let (mut identical, mut named, mut other) = (0, 0, 0);
    let mut first_other = None;
    for trial in 0..3000 {
        let mut bytes = encoded.clone();
        let flips = 1 + trial % 3;
        for _ in 0..flips {
            let pos = g.random_range(0..bytes.len());
            bytes[pos] = g.random::<u8>();
        }
        if trial % 50 == 0 {
            let cut = g.random_range(0..bytes.len());
            bytes.truncate(cut);
        }
        match catch_unwind(AssertUnwindSafe(|| decode_checkpoint(&bytes))) {
            Ok(Ok(c)) if c == ckpt => identical += 1,
            Ok(Err(Error::Format(_))) => named += 1,
            Ok(Ok(_)) => {
                other += 1;
                first_other.get_or_insert_with(|| format!("trial {trial}: silently different checkpoint"));
            }
            Ok(Err(err)) => {
                other += 1;
                first_other.get_or_insert_with(|| format!("trial {trial}: unnamed error {err}"));
            }
            Err(_) => {
                other += 1;
                first_other.get_or_insert_with(|| format!("trial {trial}: panic"));
            }
        }
    }
    ok_or(
        other == 0,
        format!(
            "round trip bitwise; resume identical for 10 steps; fuzz 3000 mutations: {identical} identical, {named} named format errors, {other} bad{}",
            first_other.map(|s| format!(" ({s})")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// 13. MLP gradient check

fn c13_mlp_gradient() -> Check {
    let task = MlpTask::synthetic(vec![2, 4, 2], 16, 13).map_err(e)?;
    let weights = task.init_weights().map_err(e)?;
    let (_, grads) = mlp_loss_grad(&task, &weights).map_err(e)?;
    let mut g = rng(13);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let l = g.random_range(0..weights.len());
        let (r, c) = weights[l].shape();
        let (i, j) = (g.random_range(0..r), g.random_range(0..c));
        let mut plus = weights.clone();
        plus[l][(i, j)] += h;
        let mut minus = weights.clone();
        minus[l][(i, j)] -= h;
        let fd = (task.loss(&plus).map_err(e)? - task.loss(&minus).map_err(e)?) / (2.0 * h);
        let an = grads[l][(i, j)];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    ok_or(
        worst < 1e-4,
        format!("2-4-2 tanh net, 20 coordinates, h = 1e-5: max relative error {worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Check,
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let criteria = [
        Criterion { id: 1, name: "momentum identity", limit: secs(10), run: c1_momentum_identity },
        Criterion { id: 2, name: "error-feedback bound", limit: secs(10), run: c2_error_feedback_bound },
        Criterion { id: 3, name: "lossless low-rank regime", limit: None, run: c3_lossless_regime },
        Criterion { id: 4, name: "rank invariance", limit: secs(30), run: c4_rank_invariance },
        Criterion { id: 5, name: "strong-convexity convergence", limit: None, run: c5_strong_convexity },
        Criterion { id: 6, name: "merge oracle equivalence", limit: secs(5), run: c6_merge_oracle },
        Criterion { id: 7, name: "merge beats linear averaging", limit: None, run: c7_beats_linear },
        Criterion { id: 8, name: "curvature vs magnitude selection", limit: None, run: c8_curvature_vs_magnitude },
        Criterion { id: 9, name: "sign election brute force", limit: None, run: c9_sign_election },
        Criterion { id: 10, name: "spectral oracle", limit: None, run: c10_spectral_oracle },
        Criterion { id: 11, name: "memory report", limit: None, run: c11_memory_report },
        Criterion { id: 12, name: "checkpoint round trip, fuzz, resume", limit: None, run: c12_checkpoint_io },
        Criterion { id: 13, name: "MLP gradient check", limit: None, run: c13_mlp_gradient },
        Criterion { id: 14, name: "ablation sanity", limit: None, run: c14_ablations },
    ];
    let filter: Option<u32> = std::env::var("UMTAM_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    println!("acceptance criteria");
    for c in criteria.iter().filter(|c| filter.is_none_or(|f| f == c.id)) {
        let start = Instant::now();
        let result = catch_unwind(c.run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let over_time = c.limit.is_some_and(|l| elapsed > l);
        let (status, detail) = match (&result, over_time) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; exceeded the {:?} limit", c.limit.unwrap())),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} C{:<2} {} [{:.2}s]: {detail}", c.id, c.name, elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
