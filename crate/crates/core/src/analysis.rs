//! Spectral low-rank measurement of experts and tunable-parameter accounting.
//!
//! The Ky Fan ratio at k is the fraction of a matrix's spectral energy
//! carried by its top-k singular values, `sqrt(sum_{i<=k} s_i^2) /
//! sqrt(sum_i s_i^2)`; higher means a rank-k approximation loses less.
//! Comparing the ratio of balanced-k-means experts against contiguous-split
//! experts quantifies how much the clustering improves expert low-rankness.

use crate::error::{Error, Result};
use crate::linalg::{svd_values, Matrix, Scalar};
use crate::model::PartitionStrategy;
use crate::moefy::{
    extract_experts, partition_balanced_kmeans, partition_contiguous, stack_ffn, unstack_ffn,
    DenseFFN,
};

/// Fraction of spectral energy in the top `k` singular values.
pub fn kyfan_ratio<S: Scalar>(m: &Matrix<S>, k: usize) -> Result<f64> {
    let min_dim = m.rows().min(m.cols());
    if k == 0 || k > min_dim {
        return Err(Error::Config(format!(
            "kyfan_ratio: k = {k} out of range [1, {min_dim}]"
        )));
    }
    let sigma = svd_values(m)?;
    let total: f64 = sigma.iter().map(|s| s.to_f64() * s.to_f64()).sum();
    if total == 0.0 {
        // zero matrix: all of nothing is in the top k
        return Ok(1.0);
    }
    let top: f64 = sigma[..k].iter().map(|s| s.to_f64() * s.to_f64()).sum();
    Ok((top / total).sqrt())
}

/// Spectral measurements of one expert's up projection.
#[derive(Clone, Debug)]
pub struct SpectralRow {
    pub expert: usize,
    pub singular_values: Vec<f64>,
    /// `(k, ratio)` at each requested k; non-decreasing in k.
    pub ratios: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct PartitionReport {
    pub strategy: PartitionStrategy,
    pub rows: Vec<SpectralRow>,
    /// Mean ratio over experts per requested k.
    pub mean_ratios: Vec<(usize, f64)>,
}

fn spectral_rows(
    matrices: &[Matrix<f64>],
    ks: &[usize],
    threads: usize,
) -> Result<Vec<SpectralRow>> {
    let spectra: Vec<Result<Vec<f64>>> = if threads <= 1 || matrices.len() <= 1 {
        matrices
            .iter()
            .map(|m| Ok(svd_values(m)?.to_vec()))
            .collect()
    } else {
        // Per-expert SVDs are independent; results are collected by index so
        // the report does not depend on scheduling.
        let workers = threads.min(matrices.len());
        let mut results: Vec<Result<Vec<f64>>> = (0..matrices.len()).map(|_| Ok(Vec::new())).collect();
        std::thread::scope(|scope| {
            for (chunk_idx, (chunk, out)) in matrices
                .chunks(matrices.len().div_ceil(workers))
                .zip(results.chunks_mut(matrices.len().div_ceil(workers)))
                .enumerate()
            {
                let _ = chunk_idx;
                scope.spawn(move || {
                    for (m, slot) in chunk.iter().zip(out.iter_mut()) {
                        *slot = svd_values(m);
                    }
                });
            }
        });
        results
    };
    let mut rows = Vec::with_capacity(matrices.len());
    for (expert, sigma) in spectra.into_iter().enumerate() {
        let sigma = sigma?;
        let total: f64 = sigma.iter().map(|s| s * s).sum();
        let ratios = ks
            .iter()
            .map(|&k| {
                if k == 0 || k > sigma.len() {
                    return Err(Error::Config(format!("kyfan_ratio: k = {k} out of range")));
                }
                let top: f64 = sigma[..k].iter().map(|s| s * s).sum();
                Ok((k, if total == 0.0 { 1.0 } else { (top / total).sqrt() }))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(SpectralRow {
            expert,
            singular_values: sigma,
            ratios,
        });
    }
    Ok(rows)
}

fn report_for(
    ffn: &DenseFFN<f64>,
    strategy: PartitionStrategy,
    k_clusters: usize,
    ks: &[usize],
    seed: u64,
    threads: usize,
) -> Result<PartitionReport> {
    let partition = match strategy {
        PartitionStrategy::Contiguous => partition_contiguous(ffn.h(), k_clusters)?,
        PartitionStrategy::BalancedKmeans => {
            partition_balanced_kmeans(&stack_ffn(ffn)?, k_clusters, 25, seed)?
        }
    };
    let set = extract_experts(ffn, &partition)?;
    let ups: Vec<Matrix<f64>> = set.experts.iter().map(|e| e.e_up.clone()).collect();
    let rows = spectral_rows(&ups, ks, threads)?;
    let mean_ratios = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mean =
                rows.iter().map(|r| r.ratios[i].1).sum::<f64>() / rows.len().max(1) as f64;
            (k, mean)
        })
        .collect();
    Ok(PartitionReport {
        strategy,
        rows,
        mean_ratios,
    })
}

/// Per-expert spectra for the balanced-k-means and contiguous partitions of
/// the same FFN, measured on the `E_up` blocks.
pub fn compare_partitions<S: Scalar>(
    ffn: &DenseFFN<S>,
    k_clusters: usize,
    ks: &[usize],
    seed: u64,
    threads: usize,
) -> Result<(PartitionReport, PartitionReport)> {
    if ffn.h() % k_clusters != 0 {
        return Err(Error::Config(format!(
            "K = {k_clusters} must divide H = {}",
            ffn.h()
        )));
    }
    let f64_ffn = DenseFFN {
        w_up: ffn.w_up.to_f64_matrix(),
        b_up: ffn.b_up.iter().map(|v| v.to_f64()).collect(),
        w_down: ffn.w_down.to_f64_matrix(),
        b_down: ffn.b_down.iter().map(|v| v.to_f64()).collect(),
    };
    Ok((
        report_for(
            &f64_ffn,
            PartitionStrategy::BalancedKmeans,
            k_clusters,
            ks,
            seed,
            threads,
        )?,
        report_for(
            &f64_ffn,
            PartitionStrategy::Contiguous,
            k_clusters,
            ks,
            seed,
            threads,
        )?,
    ))
}

/// Closed-form tunable-parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TunableCount {
    pub lora_per_layer: usize,
    pub router_per_layer: usize,
    pub per_layer: usize,
    pub head: usize,
    pub total: usize,
}

/// Per layer `2 K r (D + H/K) + D K`, plus the classification head.
pub fn count_tunables(
    d: usize,
    h: usize,
    k: usize,
    rank: usize,
    layers: usize,
    n_class: usize,
) -> Result<TunableCount> {
    if k == 0 || h % k != 0 {
        return Err(Error::Config(format!("K = {k} must divide H = {h}")));
    }
    if rank == 0 {
        return Err(Error::Config("rank must be >= 1".into()));
    }
    let lora_per_layer = 2 * k * rank * (d + h / k);
    let router_per_layer = d * k;
    let per_layer = lora_per_layer + router_per_layer;
    let head = d * n_class + n_class;
    Ok(TunableCount {
        lora_per_layer,
        router_per_layer,
        per_layer,
        head,
        total: per_layer * layers + head,
    })
}

/// Weight generator with recoverable structure: K bundles of `H/K`
/// near-duplicate stacked columns, shuffled across the layer. Balanced
/// clustering can recover the bundles; a contiguous split cannot.
pub fn planted_dense_ffn<S: Scalar>(
    d: usize,
    h: usize,
    k: usize,
    noise: f64,
    seed: u64,
) -> Result<DenseFFN<S>> {
    if k == 0 || h % k != 0 {
        return Err(Error::Config(format!("K = {k} must divide H = {h}")));
    }
    let mut rng = crate::linalg::Rng::substream(seed, "planted");
    let dim = 2 * d + 1;
    let bases: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| rng.normal()).collect())
        .collect();
    let mut order: Vec<usize> = (0..h).collect();
    rng.shuffle(&mut order);
    let mut stacked = Matrix::zeros(dim, h);
    let per = h / k;
    for (slot, &col) in order.iter().enumerate() {
        let bundle = slot / per;
        for row in 0..dim {
            stacked.set(
                row,
                col,
                S::from_f64(bases[bundle][row] + rng.normal() * noise),
            );
        }
    }
    let b_down = (0..d).map(|_| S::from_f64(rng.normal())).collect();
    unstack_ffn(&stacked, b_down)
}
