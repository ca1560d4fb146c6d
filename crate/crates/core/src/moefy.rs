//! Decomposition of a dense FFN into balanced clusters of similar hidden
//! channels.
//!
//! The up-projection columns, the up bias and the down-projection rows are
//! stacked into one `(2D+1) x H` matrix whose columns are clustered with a
//! balanced k-means; columns sharing a cluster become one expert. The
//! column-to-cluster assignment induces a permutation that is kept alongside
//! the experts so the dense layer can be reconstructed bit-exactly.

use crate::error::{Error, Result};
use crate::linalg::{gelu, Matrix, Rng, Scalar};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// A dense feed-forward block: up projection, bias, down projection, bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFFN<S: Scalar> {
    /// `D x H`.
    pub w_up: Matrix<S>,
    /// Length `H`.
    pub b_up: Vec<S>,
    /// `H x D`.
    pub w_down: Matrix<S>,
    /// Length `D`.
    pub b_down: Vec<S>,
}

impl<S: Scalar> DenseFFN<S> {
    pub fn d(&self) -> usize {
        self.w_up.rows()
    }

    pub fn h(&self) -> usize {
        self.w_up.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.d(), self.h());
        if self.b_up.len() != h || self.w_down.rows() != h || self.w_down.cols() != d
            || self.b_down.len() != d
        {
            return Err(Error::Dim(format!(
                "dense ffn shapes inconsistent: W_up {d}x{h}, b_up {}, W_down {}x{}, b_down {}",
                self.b_up.len(),
                self.w_down.rows(),
                self.w_down.cols(),
                self.b_down.len()
            )));
        }
        self.w_up.validate_finite("W_up")?;
        self.w_down.validate_finite("W_down")?;
        if !self.b_up.iter().all(|v| v.finite()) || !self.b_down.iter().all(|v| v.finite()) {
            return Err(Error::Numeric("non-finite ffn bias".into()));
        }
        Ok(())
    }

    /// FFN applied to an already-normalized input batch.
    pub fn forward(&self, xn: &Matrix<S>) -> Result<Matrix<S>> {
        let mut pre = xn.matmul(&self.w_up)?;
        pre.add_row_bias(&self.b_up)?;
        let act = pre.map(gelu);
        let mut out = act.matmul(&self.w_down)?;
        out.add_row_bias(&self.b_down)?;
        Ok(out)
    }
}

/// Column-to-cluster assignment and the permutation that groups columns
/// cluster by cluster. `permutation[new] = old`: position `new` of the
/// grouped layout holds original column `old`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertPartition {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub permutation: Vec<usize>,
    pub cluster_size: usize,
}

impl ExpertPartition {
    pub fn h(&self) -> usize {
        self.assignment.len()
    }

    /// `inverse[old] = new`; applying it after `permutation` is the identity.
    pub fn inverse_permutation(&self) -> Vec<usize> {
        let mut inv = vec![0usize; self.permutation.len()];
        for (new, &old) in self.permutation.iter().enumerate() {
            inv[old] = new;
        }
        inv
    }

    fn from_assignment(k: usize, assignment: Vec<usize>) -> Result<Self> {
        let h = assignment.len();
        if k == 0 || h % k != 0 {
            return Err(Error::Config(format!("K = {k} must divide H = {h}")));
        }
        let cluster_size = h / k;
        let mut permutation = Vec::with_capacity(h);
        for cluster in 0..k {
            for (col, &a) in assignment.iter().enumerate() {
                if a == cluster {
                    permutation.push(col);
                }
            }
        }
        if permutation.len() != h {
            return Err(Error::Config("assignment references unknown cluster".into()));
        }
        for cluster in 0..k {
            let members = assignment.iter().filter(|&&a| a == cluster).count();
            if members != cluster_size {
                return Err(Error::Config(format!(
                    "cluster {cluster} holds {members} columns, expected {cluster_size}"
                )));
            }
        }
        Ok(ExpertPartition {
            k,
            assignment,
            permutation,
            cluster_size,
        })
    }
}

/// One expert: a column slice of the up projection with its bias entries and
/// the matching rows of the down projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert<S: Scalar> {
    /// `D x (H/K)`.
    pub e_up: Matrix<S>,
    /// Length `H/K`.
    pub e_b: Vec<S>,
    /// `(H/K) x D`.
    pub e_down: Matrix<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSet<S: Scalar> {
    pub experts: Vec<Expert<S>>,
}

impl<S: Scalar> ExpertSet<S> {
    pub fn k(&self) -> usize {
        self.experts.len()
    }

    pub fn d(&self) -> usize {
        self.experts[0].e_up.rows()
    }

    pub fn cluster_size(&self) -> usize {
        self.experts[0].e_up.cols()
    }
}

/// Stacks `[W_up; b_up; W_down^T]` into a `(2D+1) x H` matrix: rows `0..D`
/// hold `W_up`, row `D` holds `b_up`, rows `D+1..2D+1` hold `W_down^T`.
pub fn stack_ffn<S: Scalar>(ffn: &DenseFFN<S>) -> Result<Matrix<S>> {
    ffn.validate()?;
    let (d, h) = (ffn.d(), ffn.h());
    Ok(Matrix::from_fn(2 * d + 1, h, |i, j| {
        if i < d {
            ffn.w_up.get(i, j)
        } else if i == d {
            ffn.b_up[j]
        } else {
            ffn.w_down.get(j, i - d - 1)
        }
    }))
}

/// Inverse of [`stack_ffn`] (the down bias is not part of the stack).
pub fn unstack_ffn<S: Scalar>(stacked: &Matrix<S>, b_down: Vec<S>) -> Result<DenseFFN<S>> {
    let rows = stacked.rows();
    if rows < 3 || rows % 2 == 0 {
        return Err(Error::Dim(format!(
            "stacked matrix must have 2D+1 rows, got {rows}"
        )));
    }
    let d = (rows - 1) / 2;
    let h = stacked.cols();
    let ffn = DenseFFN {
        w_up: Matrix::from_fn(d, h, |i, j| stacked.get(i, j)),
        b_up: (0..h).map(|j| stacked.get(d, j)).collect(),
        w_down: Matrix::from_fn(h, d, |i, j| stacked.get(d + 1 + j, i)),
        b_down,
    };
    ffn.validate()?;
    Ok(ffn)
}

/// Contiguous baseline split: cluster `i` owns columns
/// `[i*H/K, (i+1)*H/K)` and the permutation is the identity.
pub fn partition_contiguous(h: usize, k: usize) -> Result<ExpertPartition> {
    if k == 0 || h % k != 0 {
        return Err(Error::Config(format!("K = {k} must divide H = {h}")));
    }
    let cluster_size = h / k;
    let assignment = (0..h).map(|col| col / cluster_size).collect();
    ExpertPartition::from_assignment(k, assignment)
}

/// A single balanced k-means run with its per-iteration objective trace.
#[derive(Clone, Debug)]
pub struct KmeansRun {
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squared distances after each accepted iteration;
    /// non-increasing by construction.
    pub objective_history: Vec<f64>,
}

impl KmeansRun {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("at least one iteration")
    }
}

fn centroids_of(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, &v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (sum, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for v in sum.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    sums
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Within-cluster sum of squared distances about the cluster means.
fn objective_of(points: &[Vec<f64>], assignment: &[usize], k: usize) -> f64 {
    let centroids = centroids_of(points, assignment, k);
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

#[derive(PartialEq)]
struct RegretItem {
    regret: f64,
    point: usize,
    best: usize,
}

impl Eq for RegretItem {}

impl Ord for RegretItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap on regret; indices break ties deterministically.
        self.regret
            .total_cmp(&other.regret)
            .then_with(|| other.point.cmp(&self.point))
    }
}

impl PartialOrd for RegretItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Capacity-constrained assignment: points are assigned in order of
/// decreasing regret (gap between best and second-best open cluster), and a
/// cluster closes once it reaches `cap` members. Stale heap entries are
/// re-scored lazily, so each point is pushed at most K times.
fn balanced_assign(points: &[Vec<f64>], centroids: &[Vec<f64>], cap: usize) -> Vec<usize> {
    let k = centroids.len();
    let n = points.len();
    let dist: Vec<Vec<f64>> = points
        .iter()
        .map(|p| centroids.iter().map(|c| sq_dist(p, c)).collect())
        .collect();
    let mut remaining = vec![cap; k];
    let mut assignment = vec![usize::MAX; n];

    let score = |point: usize, remaining: &[usize]| -> Option<RegretItem> {
        let mut best: Option<(f64, usize)> = None;
        let mut second = f64::INFINITY;
        for c in 0..k {
            if remaining[c] == 0 {
                continue;
            }
            let d = dist[point][c];
            match best {
                None => best = Some((d, c)),
                Some((bd, _)) if d < bd => {
                    second = bd;
                    best = Some((d, c));
                }
                Some(_) => second = second.min(d),
            }
        }
        best.map(|(bd, bc)| RegretItem {
            regret: if second.is_finite() { second - bd } else { f64::INFINITY },
            point,
            best: bc,
        })
    };

    let mut heap: BinaryHeap<RegretItem> = (0..n)
        .map(|p| score(p, &remaining).expect("k >= 1"))
        .collect();
    while let Some(item) = heap.pop() {
        if assignment[item.point] != usize::MAX {
            continue;
        }
        if remaining[item.best] == 0 {
            // Stale entry: its preferred cluster closed since scoring.
            heap.push(score(item.point, &remaining).expect("capacity equals point count"));
            continue;
        }
        assignment[item.point] = item.best;
        remaining[item.best] -= 1;
    }
    assignment
}

fn kmeanspp_init(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.below(n)].clone());
    let mut min_dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = min_dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, &d) in min_dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.below(n)
        };
        centroids.push(points[next].clone());
        for (d, p) in min_dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centroids.last().expect("just pushed")));
        }
    }
    centroids
}

/// A single balanced k-means run from one initialization. An iteration that
/// would raise the objective is rejected and terminates the run, so the
/// recorded history is non-increasing.
pub fn balanced_kmeans_run(
    points: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    rng: &mut Rng,
) -> KmeansRun {
    let cap = points.len() / k;
    let centroids = kmeanspp_init(points, k, rng);
    let mut assignment = balanced_assign(points, &centroids, cap);
    let mut objective = objective_of(points, &assignment, k);
    let mut history = vec![objective];
    for _ in 1..max_iters {
        let centroids = centroids_of(points, &assignment, k);
        let candidate = balanced_assign(points, &centroids, cap);
        let cand_objective = objective_of(points, &candidate, k);
        if cand_objective >= objective - 1e-15 {
            break;
        }
        assignment = candidate;
        objective = cand_objective;
        history.push(objective);
    }
    KmeansRun {
        assignment,
        objective_history: history,
    }
}

const KMEANS_RESTARTS: usize = 8;

/// Balanced k-means over the columns of `points` (each column is one point).
/// Runs a handful of seeded restarts and keeps the best local optimum.
pub fn partition_balanced_kmeans<S: Scalar>(
    points: &Matrix<S>,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ExpertPartition> {
    let h = points.cols();
    if k == 0 || h % k != 0 {
        return Err(Error::Config(format!("K = {k} must divide H = {h}")));
    }
    if max_iters == 0 {
        return Err(Error::Config("max_iters must be >= 1".into()));
    }
    points.validate_finite("clustering input")?;
    let cols: Vec<Vec<f64>> = (0..h)
        .map(|j| (0..points.rows()).map(|i| points.get(i, j).to_f64()).collect())
        .collect();
    let mut best: Option<KmeansRun> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = Rng::substream(seed, &format!("kmeans/{restart}"));
        let run = balanced_kmeans_run(&cols, k, max_iters, &mut rng);
        if best.as_ref().map_or(true, |b| run.objective() < b.objective()) {
            best = Some(run);
        }
    }
    ExpertPartition::from_assignment(k, best.expect("at least one restart").assignment)
}

/// Gathers each cluster's columns into an expert, in permutation order.
pub fn extract_experts<S: Scalar>(
    ffn: &DenseFFN<S>,
    part: &ExpertPartition,
) -> Result<ExpertSet<S>> {
    ffn.validate()?;
    if part.h() != ffn.h() {
        return Err(Error::Dim(format!(
            "partition covers {} columns, ffn has {}",
            part.h(),
            ffn.h()
        )));
    }
    let (d, cs) = (ffn.d(), part.cluster_size);
    let mut experts = Vec::with_capacity(part.k);
    for cluster in 0..part.k {
        let members = &part.permutation[cluster * cs..(cluster + 1) * cs];
        experts.push(Expert {
            e_up: Matrix::from_fn(d, cs, |i, j| ffn.w_up.get(i, members[j])),
            e_b: members.iter().map(|&m| ffn.b_up[m]).collect(),
            e_down: Matrix::from_fn(cs, d, |i, j| ffn.w_down.get(members[i], j)),
        });
    }
    Ok(ExpertSet { experts })
}

/// Concatenates experts back into a dense FFN. With `restore_order` set the
/// inverse permutation is applied, which makes the result a drop-in
/// replacement in the original channel order; extraction followed by ordered
/// reassembly is the bit-level identity.
pub fn assemble_dense<S: Scalar>(
    set: &ExpertSet<S>,
    part: &ExpertPartition,
    b_down: Vec<S>,
    restore_order: bool,
) -> Result<DenseFFN<S>> {
    let (d, cs, k) = (set.d(), set.cluster_size(), set.k());
    if k != part.k || cs != part.cluster_size {
        return Err(Error::Dim("expert set does not match partition".into()));
    }
    let h = k * cs;
    // grouped layout column -> output column
    let dest: Vec<usize> = if restore_order {
        part.permutation.clone()
    } else {
        (0..h).collect()
    };
    let mut w_up = Matrix::zeros(d, h);
    let mut b_up = vec![S::ZERO; h];
    let mut w_down = Matrix::zeros(h, d);
    for (cluster, expert) in set.experts.iter().enumerate() {
        for j in 0..cs {
            let col = dest[cluster * cs + j];
            for i in 0..d {
                w_up.set(i, col, expert.e_up.get(i, j));
                w_down.set(col, i, expert.e_down.get(j, i));
            }
            b_up[col] = expert.e_b[j];
        }
    }
    let ffn = DenseFFN {
        w_up,
        b_up,
        w_down,
        b_down,
    };
    ffn.validate()?;
    Ok(ffn)
}

/// Exhaustive minimum of the balanced k-means objective for K = 2.
/// Test oracle for small H only.
pub fn brute_force_balanced_two(points: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = points.len();
    assert!(n % 2 == 0 && n <= 16, "oracle is exponential in H");
    let half = n / 2;
    let mut best: Option<(Vec<usize>, f64)> = None;
    // Fix point 0 in cluster 0 to skip mirrored partitions.
    for mask in 0u32..(1 << (n - 1)) {
        let mut assignment = vec![0usize; n];
        let mut ones = 0;
        for (bit, slot) in assignment.iter_mut().enumerate().skip(1) {
            if mask >> (bit - 1) & 1 == 1 {
                *slot = 1;
                ones += 1;
            }
        }
        if ones != half {
            continue;
        }
        let obj = objective_of(points, &assignment, 2);
        if best.as_ref().map_or(true, |(_, b)| obj < *b) {
            best = Some((assignment, obj));
        }
    }
    best.expect("at least one balanced split")
}
