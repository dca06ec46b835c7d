//! Checks shared by the acceptance harness and the per-topic test files.
//! Each returns `Ok(summary)` on success and `Err(reason)` otherwise.
#![allow(dead_code)]

use std::cell::RefCell;

use ctcaps::capsule::{
    capsule_lengths, margin_loss, predict_votes, route, route_traced, weighted_loss, weighted_margin_loss,
    MarginLossParams,
};
use ctcaps::metrics::{cutoff_sweep, hanley_mcneil_ci, roc_curve, wilson_ci, DEFAULT_SWEEP};
use ctcaps::models::{CapsShape, ModelBundle, NetworkSpec, Stage};
use ctcaps::nn::{batch_norm_train, conv2d, max_pool2d, MaxPool2D, Mode, Padding};
use ctcaps::pipeline::{
    apply_cutoff, predict_patient, three_percent_rule, vote, Decision, DecisionRule, FractionBase, Label,
    PipelineConfig, ProbabilityMode, SelectionRule, SliceClassifier, SliceRecord, Volume,
};
use ctcaps::tensor::gradcheck::{finite_difference_grad, relative_error};
use ctcaps::tensor::{SeededRng, Tape, Tensor, Var};

pub type Check = Result<String, String>;

pub const GRAD_TOL: f64 = 1e-4;
pub const KINK_TOL: f64 = 1e-7;
pub const KINK_REFINES: usize = 5;
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_SEEDS: u64 = 20;
pub const EXACT_TOL: f64 = 1e-12;
pub const FORMULA_TOL: f64 = 1e-10;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn r<T>(x: ctcaps::Result<T>) -> Result<T, String> {
    x.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- gradients

/// Largest relative error, over every input, between tape gradients of the
/// scalar `f` and central differences.
pub fn grad_error<F>(inputs: &[Tensor], f: F) -> Result<f64, String>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> ctcaps::Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = r(f(&tape, &vars))?;
    let grads = r(tape.backward(out))?;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = r(finite_difference_grad(
            |p| {
                let t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, v)| t.constant(if k == i { p.clone() } else { v.clone() }))
                    .collect();
                f(&t, &vs).map(|v| v.item())
            },
            x,
            FD_STEP,
        ))?;
        worst = worst.max(relative_error(&grads.get_or_zeros(vars[i]), &numeric));
    }
    Ok(worst)
}

fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

/// Runs `case` for every seed and fails on the first error above tolerance.
fn over_seeds(name: &str, seeds: u64, mut case: impl FnMut(u64) -> Result<f64, String>) -> Check {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let e = case(seed).map_err(|e| format!("{name}, seed {seed}: {e}"))?;
        ensure(e < GRAD_TOL, || format!("{name}, seed {seed}: relative error {e:.3e}"))?;
        worst = worst.max(e);
    }
    Ok(format!("{name} {worst:.1e}"))
}

pub fn conv_gradients() -> Check {
    over_seeds("conv", GRAD_SEEDS, |seed| {
        let mut rng = SeededRng::new(seed);
        let (padding, stride) = [(Padding::Same, (1, 1)), (Padding::Same, (2, 2)), (Padding::Valid, (1, 1))]
            [seed as usize % 3];
        let x = randn(&[2, 2, 6, 5], &mut rng);
        let w = randn(&[3, 2, 3, 3], &mut rng);
        let b = randn(&[3], &mut rng);
        let probe = {
            let t = Tape::new();
            let y = r(conv2d(t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()), stride, padding))?;
            randn(&y.shape(), &mut rng)
        };
        grad_error(&[x, w, b], |t, v| conv2d(v[0], v[1], v[2], stride, padding)?.mul(t.constant(probe.clone()))?.sum())
    })
}

pub fn batchnorm_gradients() -> Check {
    over_seeds("batch norm", GRAD_SEEDS, |seed| {
        let mut rng = SeededRng::new(seed);
        let x = randn(&[3, 2, 3, 2], &mut rng);
        let gamma = randn(&[2], &mut rng);
        let beta = randn(&[2], &mut rng);
        let probe = randn(&[3, 2, 3, 2], &mut rng);
        grad_error(&[x, gamma, beta], |t, v| {
            batch_norm_train(v[0], v[1], v[2], 1e-5)?.0.mul(t.constant(probe.clone()))?.sum()
        })
    })
}

pub fn maxpool_gradients() -> Check {
    over_seeds("max pool", GRAD_SEEDS, |seed| {
        let mut rng = SeededRng::new(seed);
        let x = randn(&[2, 2, 4, 6], &mut rng);
        let probe = randn(&[2, 2, 2, 3], &mut rng);
        grad_error(&[x], |t, v| {
            max_pool2d(v[0], MaxPool2D::new((2, 2), (2, 2)))?.mul(t.constant(probe.clone()))?.sum()
        })
    })
}

pub fn routing_gradients() -> Check {
    let mut parts = Vec::new();
    for iters in 1..=3 {
        parts.push(over_seeds(&format!("capsule layer r={iters}"), GRAD_SEEDS, |seed| {
            let mut rng = SeededRng::new(seed);
            let u = randn(&[2, 3, 4], &mut rng).map(|x| 0.5 * x);
            let w = randn(&[3, 2, 4, 5], &mut rng).map(|x| 0.5 * x);
            let probe = randn(&[2, 2, 5], &mut rng);
            let probe_len = randn(&[2, 2], &mut rng);
            let a = grad_error(&[u.clone(), w.clone()], |t, v| {
                route(predict_votes(v[0], v[1])?, iters)?.mul(t.constant(probe.clone()))?.sum()
            })?;
            let b = grad_error(&[u, w], |t, v| {
                capsule_lengths(route(predict_votes(v[0], v[1])?, iters)?)?
                    .mul(t.constant(probe_len.clone()))?
                    .sum()
            })?;
            Ok(a.max(b))
        })?);
    }
    Ok(parts.join(", "))
}

/// Lengths in (0, 1) kept away from the hinge points.
fn hinge_safe_lengths(n: usize, p: &MarginLossParams, rng: &mut SeededRng) -> Tensor {
    let data = (0..2 * n)
        .map(|_| loop {
            let l = rng.uniform(0.01, 0.99);
            if (l - p.m_plus).abs() > 1e-3 && (l - p.m_minus).abs() > 1e-3 {
                break l;
            }
        })
        .collect();
    Tensor::new(&[n, 2], data).expect("shape")
}

fn onehot(positive: &[bool]) -> Tensor {
    let mut t = Tensor::zeros(&[positive.len(), 2]);
    for (i, &p) in positive.iter().enumerate() {
        t.data_mut()[2 * i + usize::from(!p)] = 1.0;
    }
    t
}

pub fn loss_gradients() -> Check {
    let p = MarginLossParams::default();
    let a = over_seeds("margin loss", GRAD_SEEDS, |seed| {
        let mut rng = SeededRng::new(seed);
        let lengths = hinge_safe_lengths(5, &p, &mut rng);
        let pos: Vec<bool> = (0..5).map(|_| rng.bernoulli(0.5)).collect();
        let t = onehot(&pos);
        grad_error(&[lengths], |_, v| margin_loss(v[0], &t, &p))
    })?;
    let b = over_seeds("weighted loss", GRAD_SEEDS, |seed| {
        let mut rng = SeededRng::new(seed);
        let lengths = hinge_safe_lengths(6, &p, &mut rng);
        let pos: Vec<bool> = (0..6).map(|_| rng.bernoulli(0.4)).collect();
        let t = onehot(&pos);
        let (np, nn) = (1 + rng.below(50), 1 + rng.below(50));
        grad_error(&[lengths], |_, v| weighted_margin_loss(v[0], &t, &pos, np, nn, &p))
    })?;
    Ok(format!("{a}, {b}"))
}

/// Small network with every layer kind of the given stage.
pub fn toy_spec(stage: Stage, seed: u64) -> NetworkSpec {
    NetworkSpec {
        input_size: (12, 12),
        conv_channels: vec![2, 3, 4, 4],
        kernel: (3, 3),
        primary_caps: CapsShape::new(1, 4),
        hidden_caps: match stage {
            Stage::One => vec![CapsShape::new(3, 4); 2],
            Stage::Two => vec![],
        },
        class_caps: CapsShape::new(2, 4),
        routing_iters: 3,
        bn_momentum: 0.99,
        bn_epsilon: 1e-5,
        init_seed: seed,
    }
}

/// Whole-network check in train mode: weighted margin loss of a batch of
/// three against the input and every parameter.
/// Central differences that shrink the step while the estimates at `h` and
/// `h/4` disagree, which happens only when a ReLU or max-pool kink lies
/// within `h`. Coordinates that never settle are returned as `None`.
fn kink_aware_fd(mut f: impl FnMut(&Tensor) -> ctcaps::Result<f64>, x: &Tensor) -> Result<Vec<Option<f64>>, String> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    let mut central = |probe: &mut Tensor, i: usize, h: f64| -> Result<f64, String> {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = r(f(probe))?;
        probe.data_mut()[i] = orig - h;
        let down = r(f(probe))?;
        probe.data_mut()[i] = orig;
        Ok((up - down) / (2.0 * h))
    };
    for i in 0..x.len() {
        let mut h = FD_STEP;
        let mut coarse = central(&mut probe, i, h)?;
        let mut settled = None;
        for _ in 0..KINK_REFINES {
            let fine = central(&mut probe, i, h / 4.0)?;
            if (coarse - fine).abs() <= KINK_TOL * coarse.abs().max(fine.abs()).max(1.0) {
                settled = Some(coarse);
                break;
            }
            h /= 4.0;
            coarse = fine;
        }
        out.push(settled);
    }
    Ok(out)
}

/// Full-network gradient check; returns the relative error over the
/// concatenated gradient and the number of coordinates skipped at kinks.
pub fn network_grad_error(stage: Stage, seed: u64) -> Result<(f64, usize, usize), String> {
    let model = r(ModelBundle::build(stage, &toy_spec(stage, seed)))?;
    let mut rng = SeededRng::new(1000 + seed);
    let x = Tensor::uniform(&[3, 1, 12, 12], 0.0, 1.0, &mut rng);
    let pos = [true, false, rng.bernoulli(0.5)];
    let t = onehot(&pos);
    let p = MarginLossParams::default();
    let loss_of = |m: &ModelBundle, tape_x: &dyn Fn(&Tape) -> Var| -> ctcaps::Result<f64> {
        let tape = Tape::new();
        let pass = m.forward(tape_x(&tape), Mode::Train, false)?;
        Ok(weighted_margin_loss(pass.lengths, &t, &pos, 7, 11, &p)?.item())
    };

    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pass = r(model.forward(xv, Mode::Train, true))?;
    let loss = r(weighted_margin_loss(pass.lengths, &t, &pos, 7, 11, &p))?;
    let grads = r(tape.backward(loss))?;

    let mut analytic = grads.get_or_zeros(xv).into_data();
    let mut numeric = kink_aware_fd(|probe| loss_of(&model, &|tp: &Tape| tp.constant(probe.clone())), &x)?;
    for (k, param) in model.parameters().iter().enumerate() {
        let n = kink_aware_fd(
            |probe| {
                let mut m = model.clone();
                m.parameters_mut()[k].value = probe.clone();
                loss_of(&m, &|tp: &Tape| tp.constant(x.clone()))
            },
            &param.value,
        )?;
        analytic.extend(grads.get_or_zeros(pass.params[k]).into_data());
        numeric.extend(n);
    }
    // one relative error over the concatenated gradient: biases feeding a
    // batch norm have an exactly zero gradient, where a per-tensor ratio
    // would only measure round-off
    let total = numeric.len();
    let (a, n): (Vec<f64>, Vec<f64>) =
        analytic.iter().zip(&numeric).filter_map(|(a, n)| n.map(|n| (*a, n))).unzip();
    let skipped = total - a.len();
    Ok((relative_error(&Tensor::from_vec(a), &Tensor::from_vec(n)), skipped, total))
}

fn network_over_seeds(name: &str, stage: Stage) -> Check {
    let mut worst = 0.0f64;
    let (mut skipped, mut total) = (0, 0);
    for seed in 0..GRAD_SEEDS {
        let (e, s, t) = network_grad_error(stage, seed).map_err(|e| format!("{name}, seed {seed}: {e}"))?;
        ensure(e < GRAD_TOL, || format!("{name}, seed {seed}: relative error {e:.3e}"))?;
        ensure(s * 100 <= t, || format!("{name}, seed {seed}: {s} of {t} coordinates unresolved at kinks"))?;
        worst = worst.max(e);
        skipped += s;
        total += t;
    }
    Ok(format!("{name} {worst:.1e} ({skipped}/{total} unresolved at kinks)"))
}

pub fn network_gradients() -> Check {
    let a = network_over_seeds("stage-1 net", Stage::One)?;
    let b = network_over_seeds("stage-2 net", Stage::Two)?;
    Ok(format!("{a}, {b}"))
}

pub fn gradient_integrity() -> Check {
    let parts = [
        conv_gradients()?,
        batchnorm_gradients()?,
        maxpool_gradients()?,
        routing_gradients()?,
        loss_gradients()?,
        network_gradients()?,
    ];
    Ok(format!("{} seeds each; worst: {}", GRAD_SEEDS, parts.join(", ")))
}

// ------------------------------------------------------------------ routing

fn oracle_squash(s: &[f64]) -> Vec<f64> {
    let sq: f64 = s.iter().map(|x| x * x).sum();
    let n = sq.sqrt();
    s.iter().map(|x| x * n / (1.0 + sq)).collect()
}

/// Routing by agreement written out with plain arrays for one sample:
/// `votes[i][j]` is the vote of input capsule i for output capsule j.
pub fn oracle_route(votes: &[Vec<Vec<f64>>], iters: usize) -> Vec<Vec<f64>> {
    let ni = votes.len();
    let nj = votes[0].len();
    let d = votes[0][0].len();
    let mut b = vec![vec![0.0; nj]; ni];
    let mut v = vec![vec![0.0; d]; nj];
    for it in 0..iters {
        let mut c = vec![vec![0.0; nj]; ni];
        for i in 0..ni {
            let m = b[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = b[i].iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..nj {
                c[i][j] = e[j] / z;
            }
        }
        for j in 0..nj {
            let mut s = vec![0.0; d];
            for i in 0..ni {
                for k in 0..d {
                    s[k] += c[i][j] * votes[i][j][k];
                }
            }
            v[j] = oracle_squash(&s);
        }
        if it + 1 < iters {
            for i in 0..ni {
                for j in 0..nj {
                    b[i][j] += (0..d).map(|k| v[j][k] * votes[i][j][k]).sum::<f64>();
                }
            }
        }
    }
    v
}

fn votes_tensor(votes: &[Vec<Vec<f64>>]) -> Tensor {
    let (ni, nj, d) = (votes.len(), votes[0].len(), votes[0][0].len());
    let flat = votes.iter().flatten().flatten().copied().collect();
    Tensor::new(&[1, ni, nj, d], flat).expect("shape")
}

fn route_values(votes: &Tensor, iters: usize) -> Result<Tensor, String> {
    let t = Tape::new();
    let v = r(route(t.constant(votes.clone()), iters))?;
    Ok((*v.value()).clone())
}

pub fn hand_set_votes() -> Vec<Vec<Vec<Vec<f64>>>> {
    vec![
        vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![0.5, 0.5], vec![-1.0, 0.25]]],
        vec![vec![vec![2.0, -1.0], vec![0.3, 0.3]], vec![vec![1.5, -0.5], vec![-0.2, 0.9]]],
        vec![vec![vec![0.1, 0.2], vec![3.0, 4.0]], vec![vec![-0.4, 0.0], vec![2.5, 3.5]]],
    ]
}

pub fn routing_invariants() -> Check {
    // straight-line oracle on hand-set I=2, J=2, d=2 instances
    let mut worst_oracle = 0.0f64;
    for votes in hand_set_votes() {
        for iters in 1..=3 {
            let got = route_values(&votes_tensor(&votes), iters)?;
            let want: Vec<f64> = oracle_route(&votes, iters).into_iter().flatten().collect();
            for (a, b) in got.data().iter().zip(&want) {
                worst_oracle = worst_oracle.max((a - b).abs());
            }
        }
    }
    ensure(worst_oracle <= EXACT_TOL, || format!("oracle mismatch {worst_oracle:.3e}"))?;

    // couplings sum to one and lengths stay below one on random instances
    let mut worst_sum = 0.0f64;
    let mut max_len = 0.0f64;
    let mut worst_r1 = 0.0f64;
    for seed in 0..1000u64 {
        let mut rng = SeededRng::new(seed);
        let (ni, nj, d) = (1 + rng.below(5), 1 + rng.below(4), 1 + rng.below(4));
        let scale = [0.1, 1.0, 10.0][rng.below(3)];
        let votes = randn(&[2, ni, nj, d], &mut rng).map(|x| scale * x);
        let iters = 1 + rng.below(3);
        let tape = Tape::new();
        let (v, states) = r(route_traced(tape.constant(votes.clone()), iters))?;
        ensure(states.len() == iters, || "one routing state per iteration".into())?;
        for st in &states {
            for row in st.c.data().chunks(nj) {
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let lengths = r(capsule_lengths(v))?;
        max_len = max_len.max(lengths.value().max());

        // r = 1 is the squash of the votes weighted by the uniform coupling
        // 1/J (the plain mean over inputs only when I = J)
        let v1 = route_values(&votes, 1)?;
        for n in 0..2 {
            for j in 0..nj {
                let mean: Vec<f64> = (0..d)
                    .map(|k| (0..ni).map(|i| votes.data()[((n * ni + i) * nj + j) * d + k]).sum::<f64>() / nj as f64)
                    .collect();
                for (k, want) in oracle_squash(&mean).into_iter().enumerate() {
                    worst_r1 = worst_r1.max((v1.data()[(n * nj + j) * d + k] - want).abs());
                }
            }
        }
    }
    ensure(worst_sum <= EXACT_TOL, || format!("coupling rows deviate from 1 by {worst_sum:.3e}"))?;
    ensure(max_len < 1.0, || format!("capsule length {max_len} not below 1"))?;
    ensure(worst_r1 <= EXACT_TOL, || format!("r=1 differs from squashed mean by {worst_r1:.3e}"))?;
    Ok(format!(
        "oracle {worst_oracle:.1e}, |Σc−1| {worst_sum:.1e}, max length {max_len:.6}, r=1 {worst_r1:.1e} (1000 random instances)"
    ))
}

// ------------------------------------------------------------------- losses

fn margin_value(lengths: [f64; 2], positive: bool) -> Result<f64, String> {
    let t = Tape::new();
    let l = t.constant(Tensor::new(&[1, 2], lengths.to_vec()).expect("shape"));
    Ok(r(margin_loss(l, &onehot(&[positive]), &MarginLossParams::default()))?.item())
}

pub fn loss_exactness() -> Check {
    let cases = [([0.95, 0.05], 0.0), ([0.0, 0.0], 0.81), ([0.5, 0.5], 0.24)];
    let mut worst = 0.0f64;
    for (lengths, want) in cases {
        let got = margin_value(lengths, true)?;
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= EXACT_TOL, || format!("margin loss {lengths:?}: {got} != {want}"))?;
    }
    let mut rng = SeededRng::new(3);
    for _ in 0..100 {
        let (lp, ln) = (rng.uniform(0.0, 5.0), rng.uniform(0.0, 5.0));
        let n = 1 + rng.below(1000);
        let got = r(weighted_loss(lp, ln, n, n))?;
        ensure(got == 0.5 * (lp + ln), || format!("balanced reduction: {got} != {}", 0.5 * (lp + ln)))?;
    }
    // batch form: equal class counts halve the plain per-batch sum
    let p = MarginLossParams::default();
    let lengths = hinge_safe_lengths(8, &p, &mut rng);
    let pos: Vec<bool> = (0..8).map(|i| i % 3 == 0).collect();
    let t = Tape::new();
    let w = r(weighted_margin_loss(t.constant(lengths.clone()), &onehot(&pos), &pos, 9, 9, &p))?.item();
    let m = r(margin_loss(t.constant(lengths), &onehot(&pos), &p))?.item();
    ensure((w - 0.5 * m).abs() <= EXACT_TOL, || format!("batch balanced reduction {w} vs {}", 0.5 * m))?;
    let imbalanced = r(weighted_loss(1.0, 1.0, 4962, 18447))?;
    ensure((imbalanced - 1.0).abs() <= EXACT_TOL, || format!("unit losses give {imbalanced}"))?;
    Ok(format!("hand cases within {worst:.1e}; balanced reduction exact"))
}

// ------------------------------------------------------------------ metrics

/// Probability that a random positive outscores a random negative, ties ½.
pub fn mann_whitney(scores: &[(f64, bool)]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for &(sp, yp) in scores {
        if !yp {
            continue;
        }
        for &(sn, yn) in scores {
            if yn {
                continue;
            }
            pairs += 1.0;
            wins += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

pub const Z95: f64 = 1.959_963_984_540_054;

pub fn wilson_oracle(k: usize, n: usize, z: f64) -> (f64, f64) {
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

pub fn hanley_mcneil_oracle(auc: f64, np: usize, nn: usize, z: f64) -> (f64, f64) {
    let q1 = auc / (2.0 - auc);
    let q2 = 2.0 * auc * auc / (1.0 + auc);
    let (np, nn) = (np as f64, nn as f64);
    let var = (auc * (1.0 - auc) + (np - 1.0) * (q1 - auc * auc) + (nn - 1.0) * (q2 - auc * auc)) / (np * nn);
    let se = var.max(0.0).sqrt();
    ((auc - z * se).max(0.0), (auc + z * se).min(1.0))
}

pub fn random_scores(rng: &mut SeededRng) -> Vec<(f64, bool)> {
    let n = 2 + rng.below(49);
    let tied = rng.bernoulli(0.5);
    let mut s: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let x = rng.uniform(0.0, 1.0);
            ((if tied { (x * 8.0).floor() / 8.0 } else { x }), rng.bernoulli(0.5))
        })
        .collect();
    // both classes present
    s[0].1 = true;
    s[1].1 = false;
    s
}

pub fn metrics_oracles() -> Check {
    let mut auc_err = 0.0f64;
    let mut ci_err = 0.0f64;
    for seed in 0..200u64 {
        let mut rng = SeededRng::new(seed);
        let scores = random_scores(&mut rng);
        let roc = r(roc_curve(&scores))?;
        auc_err = auc_err.max((roc.auc - mann_whitney(&scores)).abs());

        let sweep = r(cutoff_sweep(&scores, &DEFAULT_SWEEP))?;
        let mut cutoffs: Vec<f64> = (0..10).map(|_| rng.uniform(0.0, 1.0)).collect();
        cutoffs.sort_by(f64::total_cmp);
        let fine = r(cutoff_sweep(&scores, &cutoffs))?;
        for rows in [&sweep, &fine] {
            for w in rows.windows(2) {
                ensure(
                    w[1].sensitivity <= w[0].sensitivity && w[1].specificity >= w[0].specificity,
                    || format!("seed {seed}: sweep not monotone at cutoff {}", w[1].cutoff),
                )?;
            }
        }

        let n = 1 + rng.below(200);
        let k = rng.below(n + 1);
        let (lo, hi) = r(wilson_ci(k, n, 0.95))?;
        let (olo, ohi) = wilson_oracle(k, n, Z95);
        ci_err = ci_err.max((lo - olo).abs()).max((hi - ohi).abs());

        let (hlo, hhi) = r(hanley_mcneil_ci(roc.auc, roc.n_pos, roc.n_neg, 0.95))?;
        let (oh_lo, oh_hi) = hanley_mcneil_oracle(roc.auc, roc.n_pos, roc.n_neg, Z95);
        ci_err = ci_err.max((hlo - oh_lo).abs()).max((hhi - oh_hi).abs());
    }
    ensure(auc_err <= EXACT_TOL, || format!("AUC differs from Mann–Whitney by {auc_err:.3e}"))?;
    ensure(ci_err <= FORMULA_TOL, || format!("interval differs from formula by {ci_err:.3e}"))?;
    Ok(format!(
        "200 score sets: AUC vs Mann–Whitney {auc_err:.1e}, Wilson/Hanley–McNeil vs formula {ci_err:.1e}, sweeps monotone"
    ))
}

// ----------------------------------------------------------------- pipeline

/// Stage stub returning seeded random lengths.
pub struct RandomStub {
    pub size: (usize, usize),
    pub rng: RefCell<SeededRng>,
    /// Probability that a row favours the positive capsule.
    pub bias: f64,
}

impl SliceClassifier for RandomStub {
    fn input_size(&self) -> (usize, usize) {
        self.size
    }

    fn class_lengths(&self, slices: &Tensor) -> ctcaps::Result<Tensor> {
        let n = slices.shape()[0];
        let mut rng = self.rng.borrow_mut();
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let (hi, lo) = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0));
            let (hi, lo) = if hi >= lo { (hi, lo) } else { (lo, hi) };
            if rng.bernoulli(self.bias) {
                data.extend([hi, lo]);
            } else {
                data.extend([lo, hi]);
            }
        }
        Tensor::new(&[n, 2], data)
    }
}

fn random_volume(rng: &mut SeededRng, size: (usize, usize)) -> Volume {
    let n = 1 + rng.below(40);
    let mut slices: Vec<SliceRecord> = (0..n)
        .map(|index| {
            let lung = !rng.bernoulli(0.15);
            SliceRecord {
                index,
                pixels: Tensor::uniform(&[size.0, size.1], -1000.0, 400.0, rng),
                lung_mask: Some(Tensor::full(&[size.0, size.1], if lung { 1.0 } else { 0.0 })),
                infection_label: None,
            }
        })
        .collect();
    // at least one slice survives lung filtering
    slices[rng.below(n)].lung_mask = Some(Tensor::ones(&[size.0, size.1]));
    let label = [Label::Covid, Label::Cap, Label::Normal, Label::Unknown][rng.below(4)];
    Volume {
        patient_id: format!("p{}", rng.below(1000)),
        slices,
        label,
    }
}

fn check_verdict(seed: u64) -> Result<(), String> {
    let mut rng = SeededRng::new(seed);
    let size = (4, 4);
    let v = random_volume(&mut rng, size);
    let special = [0.0, 0.03, 0.5, 1.0];
    let pick = |rng: &mut SeededRng| {
        if rng.bernoulli(0.3) {
            special[rng.below(4)]
        } else {
            rng.uniform(0.0, 1.0)
        }
    };
    let cfg = PipelineConfig {
        cutoff: pick(&mut rng),
        infection_threshold: if rng.bernoulli(0.5) { 0.03 } else { rng.uniform(0.0, 0.3) },
        probability_mode: if rng.bernoulli(0.5) {
            ProbabilityMode::Raw
        } else {
            ProbabilityMode::Normalized
        },
        selection: if rng.bernoulli(0.8) {
            SelectionRule::Argmax
        } else {
            SelectionRule::Threshold(pick(&mut rng))
        },
        fraction_base: if rng.bernoulli(0.7) {
            FractionBase::Surviving
        } else {
            FractionBase::AllSlices
        },
    };
    let stub = |s: u64, bias: f64| RandomStub {
        size,
        rng: RefCell::new(SeededRng::new(s)),
        bias,
    };
    let m1 = stub(seed ^ 0xA5A5, rng.uniform(0.0, 0.6));
    let m2 = stub(seed ^ 0x5A5A, rng.uniform(0.0, 1.0));
    let verdict = r(predict_patient(&v, &m1, &m2, &cfg))?;

    ensure(verdict.is_consistent(), || format!("inconsistent verdict {verdict:?}"))?;
    let surviving = v
        .slices
        .iter()
        .filter(|s| s.lung_mask.as_ref().is_some_and(|m| m.sum() > 0.0))
        .count();
    ensure(verdict.slice_probs.len() == surviving, || "one record per surviving slice".into())?;
    let selected = verdict.slice_probs.iter().filter(|s| s.selected).count();
    let base = match cfg.fraction_base {
        FractionBase::Surviving => surviving,
        FractionBase::AllSlices => v.slices.len(),
    };
    ensure(verdict.infected_fraction == selected as f64 / base as f64, || "fraction bookkeeping".into())?;
    ensure(verdict.cutoff_used == cfg.cutoff && verdict.threshold_used == cfg.infection_threshold, || {
        "cutoff/threshold echo".into()
    })?;
    match verdict.decision_rule {
        DecisionRule::ThreePercentRule => {
            ensure(three_percent_rule(verdict.infected_fraction, cfg.infection_threshold), || {
                "short-circuit without the rule firing".into()
            })?;
            ensure(verdict.patient_prob == 0.0 && verdict.decision == Decision::NonCovid, || {
                "short-circuit must be non-COVID with probability 0".into()
            })?;
        }
        DecisionRule::Vote => {
            ensure(!three_percent_rule(verdict.infected_fraction, cfg.infection_threshold), || {
                "vote although the rule fires".into()
            })?;
            let probs: Vec<f64> = verdict.slice_probs.iter().filter_map(|s| s.p_covid).collect();
            ensure(probs.len() == selected, || "stage two scores exactly the selected slices".into())?;
            let want = if probs.is_empty() { 0.0 } else { r(vote(&probs))? };
            ensure(verdict.patient_prob == want, || "patient probability is the vote".into())?;
            ensure(verdict.decision == apply_cutoff(verdict.patient_prob, cfg.cutoff), || {
                "decision follows the cutoff".into()
            })?;
        }
    }
    ensure(verdict.slice_probs.iter().all(|s| s.p_covid.is_none() || s.selected), || {
        "only selected slices reach stage two".into()
    })
}

pub fn pipeline_unit_suite() -> Result<(), String> {
    ensure(three_percent_rule(0.02, 0.03), || "2 of 100 must short-circuit".into())?;
    ensure(!three_percent_rule(3.0 / 100.0, 0.03), || "3 of 100 must proceed".into())?;
    ensure(!three_percent_rule(0.07, 0.03), || "7 of 100 must proceed".into())?;
    ensure((r(vote(&[0.6, 0.8, 1.0]))? - 0.8).abs() < EXACT_TOL, || "mean of 0.6, 0.8, 1.0".into())?;
    ensure(r(vote(&[0.37]))? == 0.37, || "single-slice vote".into())?;
    ensure(vote(&[]).is_err(), || "empty vote must error".into())?;
    let p = [0.9, 0.1, 0.35, 0.77, 0.5, 0.123];
    let mut q = p;
    q.reverse();
    ensure(r(vote(&p))? == r(vote(&q))?, || "vote is permutation invariant".into())?;
    ensure(apply_cutoff(0.51, 0.5) == Decision::Covid, || "0.51 > 0.5".into())?;
    ensure(apply_cutoff(0.5, 0.5) == Decision::NonCovid, || "0.5 is not > 0.5".into())?;
    Ok(())
}

pub fn pipeline_rules(cases: u64) -> Check {
    pipeline_unit_suite()?;
    for seed in 0..cases {
        check_verdict(seed).map_err(|e| format!("case {seed}: {e}"))?;
    }
    Ok(format!("unit suite exact; {cases} stub-model verdicts consistent"))
}

// ------------------------------------------------------------------ grad-cam

/// Non-negativity of every map and zero gradient ⇒ zero map, over random toy
/// models, slices, layers, classes and both normalisers.
pub fn cam_universal(cases: u64) -> Check {
    use ctcaps::gradcam::{cam, explain_slice, grad_weights, CamNorm};
    let mut maps = 0;
    for seed in 0..cases {
        let mut rng = SeededRng::new(seed);
        let model = r(ModelBundle::build(Stage::One, &toy_spec(Stage::One, seed)))?;
        let (h, w) = model.spec.input_size;
        let slice = Tensor::uniform(&[h, w], 0.0, 1.0, &mut rng);
        let norm = if seed % 2 == 0 { CamNorm::Spatial } else { CamNorm::FeatureMaps };
        for layer in 1..=4 {
            for class in 0..2 {
                let e = r(explain_slice(&model, &slice, layer, class, norm))?;
                ensure(
                    e.cam.map.data().iter().chain(e.cam.upsampled.data()).all(|&v| v >= 0.0),
                    || format!("seed {seed} layer {layer} class {class}: negative CAM value"),
                )?;
                maps += 1;
            }
        }
        let k = 1 + rng.below(6);
        let (fh, fw) = (1 + rng.below(8), 1 + rng.below(8));
        let a = Tensor::uniform(&[k, fh, fw], -1.0, 1.0, &mut rng);
        let alpha = r(grad_weights(&Tensor::zeros(&[k, fh, fw]), norm))?;
        let c = r(cam(&alpha, &a, (h, w)))?;
        ensure(
            c.map.data().iter().chain(c.upsampled.data()).all(|&v| v == 0.0),
            || format!("seed {seed}: zero gradient gave a nonzero map"),
        )?;
    }
    Ok(format!("{maps} maps non-negative, {cases} zero-gradient maps exactly zero"))
}

// ---------------------------------------------------------------- end to end

pub fn cli(args: &[&str]) -> i32 {
    ctcaps::cli::run(std::iter::once("ctcaps").chain(args.iter().copied()))
}

/// Desk-scale run config rooted at `root`, written to `<root>/config.json`.
pub fn desk_config(root: &std::path::Path, learning_rate: f64) -> Result<(ctcaps::cli::RunConfig, String), String> {
    let mut cfg = ctcaps::cli::RunConfig::default();
    cfg.paths.data_dir = root.join("data");
    cfg.paths.output_dir = root.join("run");
    cfg.training.learning_rate = learning_rate;
    let path = root.join("config.json");
    let text = serde_json::to_vec_pretty(&cfg).map_err(|e| e.to_string())?;
    std::fs::write(&path, text).map_err(|e| e.to_string())?;
    Ok((cfg, path.to_string_lossy().into_owned()))
}

/// `synth` → `train --stage one` → `train --stage two` → `eval` through the
/// command-line entry point, with per-stage epoch counts.
pub fn full_run(config: &str, epochs: [usize; 2]) -> Result<(), String> {
    let (e1, e2) = (epochs[0].to_string(), epochs[1].to_string());
    for args in [
        vec!["--config", config, "synth"],
        vec!["--config", config, "train", "--stage", "one", "--epochs", &e1],
        vec!["--config", config, "train", "--stage", "two", "--epochs", &e2],
        vec!["--config", config, "eval"],
    ] {
        let code = cli(&args);
        ensure(code == 0, || format!("`{}` exited with {code}", args[2..].join(" ")))?;
    }
    Ok(())
}

pub fn read_metrics(cfg: &ctcaps::cli::RunConfig) -> Result<ctcaps::metrics::MetricsReport, String> {
    let path = cfg.paths.output_dir.join("metrics.json");
    let text = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&text).map_err(|e| e.to_string())
}

/// Infected stage-one test slices of a synthetic run with their generator
/// lesion masks, in split order.
pub fn infected_test_slices(
    cfg: &ctcaps::cli::RunConfig,
    limit: usize,
) -> Result<Vec<(Tensor, Tensor)>, String> {
    use ctcaps::data::{load_dataset, load_ground_truth, mask_from_pgm, split, Pgm};
    use ctcaps::pipeline::preprocess;
    let vols = r(load_dataset(cfg.paths.manifest(), cfg.hu_window))?;
    let truth = r(load_ground_truth(cfg.paths.data_dir.join("ground_truth.json")))?;
    let parts = r(split(&vols, &cfg.split))?;
    let size = cfg.stage1.input_size;
    let mut out = Vec::new();
    for &i in &parts.test {
        let gt = truth
            .patients
            .iter()
            .find(|p| p.patient_id == vols[i].patient_id)
            .ok_or_else(|| format!("{} missing from ground truth", vols[i].patient_id))?;
        for s in r(preprocess(&vols[i], size))?.slices {
            if s.infection_label != Some(true) || out.len() == limit {
                continue;
            }
            let mask = r(mask_from_pgm(&r(Pgm::read(cfg.paths.data_dir.join(&gt.lesion_masks[s.index])))?))?;
            ensure(mask.shape() == [size.0, size.1], || "lesion masks must match the input size".into())?;
            out.push((s.pixels, mask));
        }
    }
    ensure(out.len() == limit, || format!("only {} infected test slices", out.len()))?;
    Ok(out)
}

/// Mean fraction of upsampled CAM mass inside the lesion mask, per layer
/// 1–4, for `class`.
pub fn cam_lesion_mass(
    model: &ModelBundle,
    cases: &[(Tensor, Tensor)],
    class: usize,
    norm: ctcaps::gradcam::CamNorm,
) -> Result<[f64; 4], String> {
    let mut mass = [0.0; 4];
    for (layer, m) in (1..=4).zip(mass.iter_mut()) {
        for (pixels, lesion) in cases {
            let e = r(ctcaps::gradcam::explain_slice(model, pixels, layer, class, norm))?;
            let cam = e.cam.upsampled.data();
            let total: f64 = cam.iter().sum();
            let inside: f64 = cam.iter().zip(lesion.data()).map(|(c, l)| c * l).sum();
            *m += if total > 0.0 { inside / total } else { 0.0 };
        }
        *m /= cases.len() as f64;
    }
    Ok(mass)
}
