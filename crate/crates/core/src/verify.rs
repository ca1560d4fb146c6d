//! Runtime invariant checks behind the `verify` CLI: initialization
//! equivalence, round trips, gradient checks, EMA algebra, router algebra and
//! clustering balance. All verification math runs in f64.

use crate::archive::{archive_bytes, read_archive_bytes, Meta, TensorMap};
use crate::config::ModelDims;
use crate::error::Result;
use crate::linalg::{rel_err_rows, Matrix, Rng, Scalar};
use crate::model::{ClusterFeatures, Grads, PartitionStrategy, ToyNet};
use crate::mole::Router;
use crate::qr::{cross_entropy, qr_loss, KnowledgeBank, TaskLossTracker};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifyScope {
    All,
    Gradcheck,
    Equivalence,
    Ema,
}

impl VerifyScope {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(VerifyScope::All),
            "gradcheck" => Some(VerifyScope::Gradcheck),
            "equivalence" => Some(VerifyScope::Equivalence),
            "ema" => Some(VerifyScope::Ema),
            _ => None,
        }
    }
}

/// Total objective for a batch with the tracker weights and bank held fixed:
/// sum of per-task mean CE plus the QR term. Returns the loss and its logit
/// gradient; the single loss definition both gradcheck routes share.
pub fn multitask_loss<S: Scalar>(
    net: &ToyNet<S>,
    x: &Matrix<S>,
    labels: &[usize],
    task_ids: &[usize],
    n_tasks: usize,
    bank: &KnowledgeBank<S>,
    tracker: &TaskLossTracker,
) -> Result<(f64, Matrix<S>, crate::model::NetCache<S>)> {
    let (logits, cache) = net.forward_cached(x)?;
    let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for task in 0..n_tasks {
        let rows: Vec<usize> = (0..labels.len())
            .filter(|&r| task_ids[r] == task)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let mut sub = Matrix::zeros(rows.len(), logits.cols());
        for (i, &r) in rows.iter().enumerate() {
            sub.row_mut(i).copy_from_slice(logits.row(r));
        }
        let sub_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
        let (ce, grad) = cross_entropy(&sub, &sub_labels)?;
        loss += ce;
        for (i, &r) in rows.iter().enumerate() {
            for (dst, &g) in d_logits.row_mut(r).iter_mut().zip(grad.row(i)) {
                *dst += g;
            }
        }
    }
    let (qr_v, qr_g) = qr_loss(&logits, labels, task_ids, bank, tracker)?;
    loss += qr_v;
    d_logits.add_assign(&qr_g)?;
    Ok((loss, d_logits, cache))
}

/// Central finite differences against the analytic backward, per trainable
/// array. Returns `(name, relative_error)` with the error measured between
/// gradient vectors in the L2 norm.
pub fn gradcheck_net(
    net: &mut ToyNet<f64>,
    x: &Matrix<f64>,
    labels: &[usize],
    task_ids: &[usize],
    n_tasks: usize,
    bank: &KnowledgeBank<f64>,
    tracker: &TaskLossTracker,
    step: f64,
    fault_injection: f64,
) -> Result<Vec<(String, f64)>> {
    let analytic: Grads<f64> = {
        let (_, d_logits, cache) = multitask_loss(net, x, labels, task_ids, n_tasks, bank, tracker)?;
        net.backward(&cache, &d_logits)?
    };
    let mut layout: Vec<(String, usize)> = Vec::new();
    net.visit_trainable(&mut |name, slice| layout.push((name.to_string(), slice.len())));

    let mut results = Vec::with_capacity(layout.len());
    for (name, len) in layout {
        let a = analytic
            .get(&name)
            .unwrap_or_else(|| panic!("missing analytic gradient for `{name}`"));
        let mut fd = vec![0.0f64; len];
        for idx in 0..len {
            let set_to = |net: &mut ToyNet<f64>, value: f64| {
                net.visit_trainable_mut(&mut |n, slice| {
                    if n == name {
                        slice[idx] = value;
                    }
                });
            };
            let mut original = 0.0;
            net.visit_trainable(&mut |n, slice| {
                if n == name {
                    original = slice[idx];
                }
            });
            set_to(net, original + step);
            let (up, _, _) = multitask_loss(net, x, labels, task_ids, n_tasks, bank, tracker)?;
            set_to(net, original - step);
            let (down, _, _) = multitask_loss(net, x, labels, task_ids, n_tasks, bank, tracker)?;
            set_to(net, original);
            fd[idx] = (up - down) / (2.0 * step);
        }
        let mut a_norm = 0.0;
        let mut fd_norm = 0.0;
        let mut diff_norm = 0.0;
        for (i, &f) in fd.iter().enumerate() {
            let av = a[i] + fault_injection;
            a_norm += av * av;
            fd_norm += f * f;
            diff_norm += (av - f) * (av - f);
        }
        let scale = a_norm.sqrt().max(fd_norm.sqrt());
        let rel = if scale < 1e-12 {
            0.0
        } else {
            diff_norm.sqrt() / scale
        };
        results.push((name, rel));
    }
    Ok(results)
}

struct Fixture {
    dense: ToyNet<f64>,
    mole: ToyNet<f64>,
    x: Matrix<f64>,
    labels: Vec<usize>,
    task_ids: Vec<usize>,
    n_tasks: usize,
    bank: KnowledgeBank<f64>,
    tracker: TaskLossTracker,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let dims = ModelDims {
        d_in: 6,
        d: 8,
        h: 16,
        blocks: 2,
    };
    let n_class = 5;
    let mut rng = Rng::substream(seed, "init");
    let dense: ToyNet<f64> = ToyNet::init_dense(&dims, n_class, &mut rng);
    let mut mole = dense.moefy(
        4,
        1,
        5.0,
        PartitionStrategy::BalancedKmeans,
        ClusterFeatures::Stacked,
        15,
        seed,
    )?;
    // Move off the zero-LoRA point so every gradient path is live.
    let mut perturb = Rng::substream(seed, "perturb");
    mole.visit_trainable_mut(&mut |_, slice| {
        for v in slice {
            *v += perturb.normal() * 0.05;
        }
    });
    mole.set_alpha(0.7);

    let mut data_rng = Rng::substream(seed, "batch");
    let x: Matrix<f64> = data_rng.normal_matrix(8, 6, 1.0);
    let labels: Vec<usize> = (0..8).map(|_| data_rng.below(n_class)).collect();
    let task_ids: Vec<usize> = labels.iter().map(|&l| usize::from(l >= 3)).collect();
    let mut bank = KnowledgeBank::new(n_class, 0.9)?;
    for c in 0..n_class {
        let row: Vec<f64> = data_rng.normal_vec(n_class, 1.0);
        bank.update(c, &row)?;
    }
    let mut tracker = TaskLossTracker::new(2, 0.05, false, 0.9)?;
    tracker.observe(0, 0.8);
    tracker.observe(1, 1.3);
    Ok(Fixture {
        dense,
        mole,
        x,
        labels,
        task_ids,
        n_tasks: 2,
        bank,
        tracker,
    })
}

fn check(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn init_equivalence_f32() -> Result<CheckOutcome> {
    let dims = ModelDims {
        d_in: 8,
        d: 16,
        h: 32,
        blocks: 2,
    };
    let mut rng = Rng::substream(2024, "init");
    let dense: ToyNet<f32> = ToyNet::init_dense(&dims, 6, &mut rng);
    let mole = dense.moefy(
        4,
        2,
        5.0,
        PartitionStrategy::BalancedKmeans,
        ClusterFeatures::Stacked,
        15,
        7,
    )?;
    let x: Matrix<f32> = Rng::substream(2024, "probe").normal_matrix(100, 8, 1.0);
    let err = rel_err_rows(&dense.forward(&x)?, &mole.forward(&x)?);
    Ok(check(
        "init-equivalence-f32",
        err < 1e-5,
        format!("max row rel err {err:.3e} (tol 1e-5)"),
    ))
}

fn init_equivalence_f64(fx: &Fixture) -> Result<CheckOutcome> {
    let x: Matrix<f64> = Rng::substream(99, "probe").normal_matrix(100, 6, 1.0);
    let mut fresh = fx.dense.moefy(
        4,
        1,
        5.0,
        PartitionStrategy::BalancedKmeans,
        ClusterFeatures::Stacked,
        15,
        11,
    )?;
    fresh.set_alpha(0.4);
    let err = rel_err_rows(&fx.dense.forward(&x)?, &fresh.forward(&x)?);
    Ok(check(
        "init-equivalence-f64",
        err < 1e-12,
        format!("max row rel err {err:.3e} (tol 1e-12)"),
    ))
}

fn archive_roundtrip(fx: &Fixture) -> Result<CheckOutcome> {
    let tensors: TensorMap = fx.mole.to_tensors();
    let meta: Meta = fx.mole.meta();
    let bytes = archive_bytes(&tensors, &meta)?;
    let (t2, m2) = read_archive_bytes(&bytes)?;
    let identical = t2 == tensors && m2 == meta;
    let mut corrupted = bytes.clone();
    corrupted[3] ^= 0xFF;
    let rejects = read_archive_bytes(&corrupted).is_err();
    Ok(check(
        "archive-roundtrip",
        identical && rejects,
        format!("round trip identity: {identical}, corruption rejected: {rejects}"),
    ))
}

fn moefy_roundtrip(fx: &Fixture) -> Result<CheckOutcome> {
    let fresh = fx.dense.moefy(
        4,
        1,
        5.0,
        PartitionStrategy::BalancedKmeans,
        ClusterFeatures::Stacked,
        15,
        3,
    )?;
    let back = fresh.reparameterize()?;
    let bit_identical = back.blocks == fx.dense.blocks;
    Ok(check(
        "moefy-roundtrip",
        bit_identical,
        format!("zero-LoRA ordered reassembly bit-identical: {bit_identical}"),
    ))
}

fn reparam_equivalence(fx: &Fixture) -> Result<CheckOutcome> {
    let mut faded = fx.mole.clone();
    faded.set_alpha(0.0);
    let dense = faded.reparameterize()?;
    let x: Matrix<f64> = Rng::substream(5, "probe").normal_matrix(100, 6, 1.0);
    let delta = faded.forward(&x)?.max_abs_diff(&dense.forward(&x)?);
    Ok(check(
        "reparam-equivalence",
        delta < 1e-12,
        format!("max |delta logit| {delta:.3e} (tol 1e-12)"),
    ))
}

fn gradcheck(fx: &Fixture, fault: f64) -> Result<CheckOutcome> {
    let mut net = fx.mole.clone();
    let rels = gradcheck_net(
        &mut net,
        &fx.x,
        &fx.labels,
        &fx.task_ids,
        fx.n_tasks,
        &fx.bank,
        &fx.tracker,
        1e-5,
        fault,
    )?;
    let worst = rels
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one array");
    Ok(check(
        "gradcheck",
        worst.1 < 1e-4,
        format!("worst array `{}` rel err {:.3e} (tol 1e-4)", worst.0, worst.1),
    ))
}

fn ema_closed_form() -> Result<CheckOutcome> {
    let m = 0.9;
    let mut bank: KnowledgeBank<f64> = KnowledgeBank::new(2, m)?;
    let z0 = [0.7, -1.2];
    let z = [2.0, 0.3];
    bank.update(0, &z0)?;
    let mut worst = 0.0f64;
    for n in 1..=100 {
        bank.update(0, &z)?;
        let mn = m.powi(n);
        let row = bank.row(0).expect("initialized");
        for j in 0..2 {
            worst = worst.max((row[j] - (mn * z0[j] + (1.0 - mn) * z[j])).abs());
        }
    }
    Ok(check(
        "ema-closed-form",
        worst < 1e-12,
        format!("max deviation from m^n mixing law {worst:.3e} (tol 1e-12)"),
    ))
}

fn qr_zero_at_teacher() -> Result<CheckOutcome> {
    let mut bank: KnowledgeBank<f64> = KnowledgeBank::new(3, 0.9)?;
    let logits = Matrix::from_rows(&[&[0.4f64, -1.0, 0.9], &[1.5, 0.2, -0.3]])?;
    bank.update(0, logits.row(0))?;
    bank.update(2, logits.row(1))?;
    let mut tracker = TaskLossTracker::new(1, 0.05, false, 0.9)?;
    tracker.observe(0, 0.5);
    let (loss, _) = qr_loss(&logits, &[0, 2], &[0, 0], &bank, &tracker)?;
    Ok(check(
        "qr-zero-at-teacher",
        loss.abs() < 1e-9,
        format!("loss at student == teacher: {loss:.3e} (tol 1e-9)"),
    ))
}

/// The bank is a detached teacher: no entry of the gradient set refers to it
/// and an optimizer step leaves its bytes untouched.
fn bank_gradient_free(fx: &Fixture) -> Result<CheckOutcome> {
    let net = fx.mole.clone();
    let (_, d_logits, cache) = multitask_loss(
        &net,
        &fx.x,
        &fx.labels,
        &fx.task_ids,
        fx.n_tasks,
        &fx.bank,
        &fx.tracker,
    )?;
    let grads = net.backward(&cache, &d_logits)?;
    let no_bank_grads = grads.names().all(|n| !n.starts_with("qr."));
    let bank_before = fx.bank.clone();
    let mut stepped = net;
    let mut opt = crate::model::AdamW::new(&crate::config::OptimizerConfig {
        lr: 1e-2,
        betas: (0.9, 0.999),
        weight_decay: 0.01,
        epochs: 2,
        warmup_epochs: 1,
    });
    opt.begin_step();
    let mut err = Ok(());
    stepped.visit_trainable_mut(&mut |name, param| {
        if err.is_ok() {
            if let Some(g) = grads.get(name) {
                err = opt.update(1e-2, name, param, g);
            }
        }
    });
    err?;
    let untouched = bank_before == fx.bank;
    Ok(check(
        "bank-gradient-free",
        no_bank_grads && untouched,
        format!("bank absent from gradients: {no_bank_grads}, bytes unchanged: {untouched}"),
    ))
}

fn router_rowsum() -> Result<CheckOutcome> {
    let mut rng = Rng::substream(17, "router");
    let mut worst = 0.0f64;
    for &alpha in &[0.0, 0.3, 1.0] {
        let mut router: Router<f64> = Router::new(8, 4, 5.0)?;
        router.w_r = rng.normal_matrix(8, 4, 1.0);
        router.alpha = alpha;
        let xn: Matrix<f64> = rng.normal_matrix(512, 8, 2.0);
        let w = router.weights(&xn)?;
        for i in 0..w.rows() {
            worst = worst.max((w.row(i).iter().sum::<f64>() - 4.0).abs());
        }
    }
    Ok(check(
        "router-rowsum",
        worst < 1e-5,
        format!("max |row sum - K| {worst:.3e} (tol 1e-5)"),
    ))
}

fn router_faded_uniform() -> Result<CheckOutcome> {
    let mut rng = Rng::substream(19, "router");
    let mut router: Router<f64> = Router::new(8, 4, 5.0)?;
    router.w_r = rng.normal_matrix(8, 4, 1.5);
    router.alpha = 0.0;
    let xn: Matrix<f64> = rng.normal_matrix(64, 8, 1.0);
    let w = router.weights(&xn)?;
    let uniform = w.data().iter().all(|&v| v == 1.0);
    Ok(check(
        "router-faded-uniform",
        uniform,
        format!("alpha = 0 gives all-ones weights: {uniform}"),
    ))
}

fn cluster_balance() -> Result<CheckOutcome> {
    let m: Matrix<f64> = Rng::substream(23, "points").normal_matrix(9, 24, 1.0);
    let mut ok = true;
    for seed in 0..4 {
        for k in [2usize, 3, 4, 6] {
            let p = crate::moefy::partition_balanced_kmeans(&m, k, 15, seed)?;
            for cluster in 0..k {
                ok &= p.assignment.iter().filter(|&&a| a == cluster).count() == 24 / k;
            }
        }
    }
    Ok(check(
        "cluster-balance",
        ok,
        format!("exact H/K balance over seeds and K: {ok}"),
    ))
}

fn kmeans_monotone() -> Result<CheckOutcome> {
    let mut ok = true;
    let mut worst_rise = 0.0f64;
    for seed in 0..10 {
        let m: Matrix<f64> = Rng::substream(seed, "mono").normal_matrix(6, 20, 1.0);
        let cols: Vec<Vec<f64>> = (0..20)
            .map(|j| (0..6).map(|i| m.get(i, j)).collect())
            .collect();
        let mut rng = Rng::substream(seed, "trace");
        let run = crate::moefy::balanced_kmeans_run(&cols, 4, 20, &mut rng);
        for w in run.objective_history.windows(2) {
            if w[1] > w[0] + 1e-12 {
                ok = false;
                worst_rise = worst_rise.max(w[1] - w[0]);
            }
        }
    }
    Ok(check(
        "kmeans-monotone",
        ok,
        format!("objective non-increasing over 10 seeds (worst rise {worst_rise:.3e})"),
    ))
}

fn kmeans_exhaustive_optimum() -> Result<CheckOutcome> {
    let points = Matrix::from_rows(&[&[0.0f64, 0.1, 10.0, 10.1]])?;
    let part = crate::moefy::partition_balanced_kmeans(&points, 2, 20, 1)?;
    let same = part.assignment[0] == part.assignment[1]
        && part.assignment[2] == part.assignment[3]
        && part.assignment[0] != part.assignment[2];
    Ok(check(
        "kmeans-exhaustive-optimum",
        same,
        format!("4-point 1-D instance matches brute-force optimum: {same}"),
    ))
}

/// Runs the selected invariant suite. `inject_fault` perturbs the analytic
/// gradients before comparison, a negative control that must fail the
/// gradient check.
pub fn run_verify(scope: VerifyScope, inject_fault: bool) -> Result<Vec<CheckOutcome>> {
    let fx = fixture(41)?;
    let fault = if inject_fault { 1e-2 } else { 0.0 };
    let mut outcomes = Vec::new();
    let equivalence = matches!(scope, VerifyScope::All | VerifyScope::Equivalence);
    let grad = matches!(scope, VerifyScope::All | VerifyScope::Gradcheck);
    let ema = matches!(scope, VerifyScope::All | VerifyScope::Ema);
    if equivalence {
        outcomes.push(init_equivalence_f32()?);
        outcomes.push(init_equivalence_f64(&fx)?);
        outcomes.push(archive_roundtrip(&fx)?);
        outcomes.push(moefy_roundtrip(&fx)?);
        outcomes.push(reparam_equivalence(&fx)?);
    }
    if grad {
        outcomes.push(gradcheck(&fx, fault)?);
    }
    if ema {
        outcomes.push(ema_closed_form()?);
        outcomes.push(qr_zero_at_teacher()?);
        outcomes.push(bank_gradient_free(&fx)?);
    }
    if scope == VerifyScope::All {
        outcomes.push(router_rowsum()?);
        outcomes.push(router_faded_uniform()?);
        outcomes.push(cluster_balance()?);
        outcomes.push(kmeans_monotone()?);
        outcomes.push(kmeans_exhaustive_optimum()?);
    }
    Ok(outcomes)
}
