//! The trainable mixture-of-low-rank-experts layer.
//!
//! Frozen experts carry the pre-trained weights; learning happens in
//! per-expert low-rank factors (`E' = E + A B`) and a soft router whose
//! weights are temperature-scaled, scaled by K so they sum to K, and faded
//! toward the uniform value 1 late in training. At fade-out (`alpha = 0`)
//! the layer is exactly a dense FFN again and folds back into one by
//! concatenating the effective experts.

use crate::error::{Error, Result};
use crate::linalg::{
    gelu, gelu_grad, layer_norm_rows, layer_norm_rows_backward, softmax_rows, LayerNormCache,
    Matrix, Rng, Scalar,
};
use crate::moefy::{assemble_dense, DenseFFN, Expert, ExpertPartition, ExpertSet};

/// Layer-norm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-6;

/// Standard deviation for the Gaussian init of LoRA `A` factors. `B` starts
/// at zero so a fresh layer computes exactly the frozen function.
pub const LORA_INIT_STD: f64 = 0.02;

/// Per-expert low-rank adaptation factors.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors<S: Scalar> {
    /// `D x rank`, one per expert.
    pub a_up: Vec<Matrix<S>>,
    /// `rank x (H/K)`, one per expert.
    pub b_up: Vec<Matrix<S>>,
    /// `(H/K) x rank`, one per expert.
    pub a_down: Vec<Matrix<S>>,
    /// `rank x D`, one per expert.
    pub b_down: Vec<Matrix<S>>,
}

impl<S: Scalar> LoraFactors<S> {
    pub fn init(d: usize, cluster_size: usize, k: usize, rank: usize, rng: &mut Rng) -> Result<Self> {
        if rank == 0 || rank > d.min(cluster_size) {
            return Err(Error::Config(format!(
                "rank = {rank} must lie in [1, min(D, H/K) = {}]",
                d.min(cluster_size)
            )));
        }
        let mut f = LoraFactors {
            a_up: Vec::with_capacity(k),
            b_up: Vec::with_capacity(k),
            a_down: Vec::with_capacity(k),
            b_down: Vec::with_capacity(k),
        };
        for _ in 0..k {
            f.a_up.push(rng.normal_matrix(d, rank, LORA_INIT_STD));
            f.b_up.push(Matrix::zeros(rank, cluster_size));
            f.a_down.push(rng.normal_matrix(cluster_size, rank, LORA_INIT_STD));
            f.b_down.push(Matrix::zeros(rank, d));
        }
        Ok(f)
    }

    pub fn rank(&self) -> usize {
        self.a_up[0].cols()
    }
}

/// Sample-driven soft router with temperature and fading coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct Router<S: Scalar> {
    /// `D x K`; zero at init so routing starts uniform.
    pub w_r: Matrix<S>,
    pub tau: f64,
    pub alpha: f64,
}

impl<S: Scalar> Router<S> {
    pub fn new(d: usize, k: usize, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config("router tau must be > 0".into()));
        }
        Ok(Router {
            w_r: Matrix::zeros(d, k),
            tau,
            alpha: 1.0,
        })
    }

    pub fn k(&self) -> usize {
        self.w_r.cols()
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("router tau must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("router alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Expert weights for a batch of already-normalized activations:
    /// `omega = K * softmax(xn W_r / tau)`, then faded
    /// `omega <- alpha * omega + (1 - alpha)`. Every row sums to K.
    pub fn weights(&self, xn: &Matrix<S>) -> Result<Matrix<S>> {
        Ok(self.weights_cached(xn)?.0)
    }

    /// As [`Router::weights`], also returning the softmax for the backward pass.
    pub fn weights_cached(&self, xn: &Matrix<S>) -> Result<(Matrix<S>, Matrix<S>)> {
        self.validate()?;
        let k = S::from_f64(self.k() as f64);
        let inv_tau = S::from_f64(1.0 / self.tau);
        let mut logits = xn.matmul(&self.w_r)?;
        logits.scale(inv_tau);
        let softmax = softmax_rows(&logits);
        let alpha = S::from_f64(self.alpha);
        let shift = S::ONE - alpha;
        let omega = softmax.map(|s| alpha * (k * s) + shift);
        Ok((omega, softmax))
    }
}

/// Linear fade of the router's influence: 1 before `start_epoch`, 0 from
/// `end_epoch`, linear in between.
pub fn fading_alpha(epoch: f64, start_epoch: f64, end_epoch: f64) -> Result<f64> {
    if !(start_epoch < end_epoch) {
        return Err(Error::Config(
            "fading: start_epoch must be < end_epoch".into(),
        ));
    }
    Ok(if epoch < start_epoch {
        1.0
    } else if epoch >= end_epoch {
        0.0
    } else {
        (end_epoch - epoch) / (end_epoch - start_epoch)
    })
}

/// Frozen experts + trainable LoRA factors + trainable router.
#[derive(Clone, Debug, PartialEq)]
pub struct MoleLayer<S: Scalar> {
    pub experts: ExpertSet<S>,
    pub lora: LoraFactors<S>,
    pub router: Router<S>,
    /// Frozen down-projection bias (not part of any expert).
    pub b_down: Vec<S>,
    /// Frozen pre-FFN layer norm.
    pub ln_gamma: Vec<S>,
    pub ln_beta: Vec<S>,
    pub partition: ExpertPartition,
}

/// Intermediates kept by [`MoleLayer::forward_cached`] for the backward pass.
pub struct MoleCache<S: Scalar> {
    pub xn: Matrix<S>,
    pub ln: LayerNormCache<S>,
    pub softmax: Matrix<S>,
    pub omega: Matrix<S>,
    /// Per expert: pre-activation before router scaling, `xn U_i + E_b_i`.
    pub pre: Vec<Matrix<S>>,
    /// Per expert: router-scaled pre-activation (the GELU argument).
    pub scaled: Vec<Matrix<S>>,
    /// Per expert: GELU output.
    pub act: Vec<Matrix<S>>,
    /// Effective up projections `E_up + A_up B_up`.
    pub eff_up: Vec<Matrix<S>>,
    /// Effective down projections `E_down + A_down B_down`.
    pub eff_down: Vec<Matrix<S>>,
}

/// Gradients for the trainable arrays of one layer.
pub struct MoleGrads<S: Scalar> {
    pub a_up: Vec<Matrix<S>>,
    pub b_up: Vec<Matrix<S>>,
    pub a_down: Vec<Matrix<S>>,
    pub b_down: Vec<Matrix<S>>,
    pub w_r: Matrix<S>,
}

impl<S: Scalar> MoleLayer<S> {
    /// Builds a fresh layer from a dense FFN, its layer-norm parameters and a
    /// partition. The result computes exactly the same function as the dense
    /// source until the first optimizer step.
    pub fn from_dense(
        ffn: &DenseFFN<S>,
        ln_gamma: Vec<S>,
        ln_beta: Vec<S>,
        partition: &ExpertPartition,
        rank: usize,
        tau: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let experts = crate::moefy::extract_experts(ffn, partition)?;
        let lora = LoraFactors::init(ffn.d(), partition.cluster_size, partition.k, rank, rng)?;
        let router = Router::new(ffn.d(), partition.k, tau)?;
        Ok(MoleLayer {
            experts,
            lora,
            router,
            b_down: ffn.b_down.clone(),
            ln_gamma,
            ln_beta,
            partition: partition.clone(),
        })
    }

    pub fn d(&self) -> usize {
        self.experts.d()
    }

    pub fn k(&self) -> usize {
        self.experts.k()
    }

    pub fn cluster_size(&self) -> usize {
        self.experts.cluster_size()
    }

    pub fn rank(&self) -> usize {
        self.lora.rank()
    }

    /// Trainable scalars: LoRA factors plus the router matrix.
    pub fn num_trainable(&self) -> usize {
        let (d, cs, k, r) = (self.d(), self.cluster_size(), self.k(), self.rank());
        2 * k * r * (d + cs) + d * k
    }

    /// Effective expert projections with the low-rank delta folded in.
    pub fn effective_expert(&self, i: usize) -> Result<(Matrix<S>, Matrix<S>)> {
        let e = &self.experts.experts[i];
        let mut up = e.e_up.clone();
        up.add_assign(&self.lora.a_up[i].matmul(&self.lora.b_up[i])?)?;
        let mut down = e.e_down.clone();
        down.add_assign(&self.lora.a_down[i].matmul(&self.lora.b_down[i])?)?;
        Ok((up, down))
    }

    /// Router weights for raw (pre-normalization) activations.
    pub fn router_weights(&self, x: &Matrix<S>) -> Result<Matrix<S>> {
        let (xn, _) = layer_norm_rows(x, &self.ln_gamma, &self.ln_beta, S::from_f64(LN_EPS))?;
        self.router.weights(&xn)
    }

    pub fn forward(&self, x: &Matrix<S>) -> Result<Matrix<S>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Decomposed FFN forward:
    /// `out = sum_i GELU(omega_i * (LN(x) E_up_i' + E_b_i)) E_down_i' + b_down`.
    pub fn forward_cached(&self, x: &Matrix<S>) -> Result<(Matrix<S>, MoleCache<S>)> {
        let (xn, ln) = layer_norm_rows(x, &self.ln_gamma, &self.ln_beta, S::from_f64(LN_EPS))?;
        let (omega, softmax) = self.router.weights_cached(&xn)?;
        let n = x.rows();
        let k = self.k();
        let mut out = Matrix::zeros(n, self.d());
        let mut pre = Vec::with_capacity(k);
        let mut scaled = Vec::with_capacity(k);
        let mut act = Vec::with_capacity(k);
        let mut eff_up = Vec::with_capacity(k);
        let mut eff_down = Vec::with_capacity(k);
        for i in 0..k {
            let (up, down) = self.effective_expert(i)?;
            let mut p = xn.matmul(&up)?;
            p.add_row_bias(&self.experts.experts[i].e_b)?;
            let mut q = p.clone();
            for row in 0..n {
                let w = omega.get(row, i);
                for v in q.row_mut(row) {
                    *v *= w;
                }
            }
            let h = q.map(gelu);
            out.add_assign(&h.matmul(&down)?)?;
            pre.push(p);
            scaled.push(q);
            act.push(h);
            eff_up.push(up);
            eff_down.push(down);
        }
        out.add_row_bias(&self.b_down)?;
        if !out.all_finite() {
            return Err(Error::Numeric("non-finite activation in MoLE forward".into()));
        }
        Ok((
            out,
            MoleCache {
                xn,
                ln,
                softmax,
                omega,
                pre,
                scaled,
                act,
                eff_up,
                eff_down,
            },
        ))
    }

    /// Manual backward. Returns the trainable gradients and the gradient with
    /// respect to the layer input (pre-norm, excluding any residual path).
    pub fn backward(&self, cache: &MoleCache<S>, upstream: &Matrix<S>) -> Result<(MoleGrads<S>, Matrix<S>)> {
        let n = upstream.rows();
        let k = self.k();
        let mut d_xn = Matrix::zeros(n, self.d());
        let mut d_omega: Matrix<S> = Matrix::zeros(n, k);
        let mut grads = MoleGrads {
            a_up: Vec::with_capacity(k),
            b_up: Vec::with_capacity(k),
            a_down: Vec::with_capacity(k),
            b_down: Vec::with_capacity(k),
            w_r: Matrix::zeros(self.d(), k),
        };
        for i in 0..k {
            // down projection: out += act_i V_i
            let d_v = cache.act[i].tr_matmul(upstream)?;
            grads
                .a_down
                .push(d_v.matmul_tr(&self.lora.b_down[i])?);
            grads
                .b_down
                .push(self.lora.a_down[i].tr_matmul(&d_v)?);
            let d_act = upstream.matmul_tr(&cache.eff_down[i])?;
            // activation: act = gelu(scaled)
            let mut d_scaled = d_act;
            for (ds, &q) in d_scaled.data_mut().iter_mut().zip(cache.scaled[i].data()) {
                *ds *= gelu_grad(q);
            }
            // router scaling: scaled = omega_i (col) * pre
            for row in 0..n {
                let mut acc = S::ZERO;
                for (ds, &p) in d_scaled.row(row).iter().zip(cache.pre[i].row(row)) {
                    acc += *ds * p;
                }
                d_omega.set(row, i, acc);
            }
            let mut d_pre = d_scaled;
            for row in 0..n {
                let w = cache.omega.get(row, i);
                for v in d_pre.row_mut(row) {
                    *v *= w;
                }
            }
            // up projection: pre = xn U_i + b
            let d_u = cache.xn.tr_matmul(&d_pre)?;
            grads.a_up.push(d_u.matmul_tr(&self.lora.b_up[i])?);
            grads.b_up.push(self.lora.a_up[i].tr_matmul(&d_u)?);
            d_xn.add_assign(&d_pre.matmul_tr(&cache.eff_up[i])?)?;
        }
        // router: omega = alpha * K * softmax(xn W_r / tau) + (1 - alpha)
        let alpha_k = S::from_f64(self.router.alpha * k as f64);
        let inv_tau = S::from_f64(1.0 / self.router.tau);
        let mut d_logits = Matrix::zeros(n, k);
        for row in 0..n {
            let s = cache.softmax.row(row);
            let dw = d_omega.row(row);
            let mut dot = S::ZERO;
            for (&si, &dwi) in s.iter().zip(dw) {
                dot += si * dwi * alpha_k;
            }
            let out = d_logits.row_mut(row);
            for j in 0..k {
                out[j] = (s[j] * (dw[j] * alpha_k - dot)) * inv_tau;
            }
        }
        grads.w_r = cache.xn.tr_matmul(&d_logits)?;
        d_xn.add_assign(&d_logits.matmul_tr(&self.router.w_r)?)?;
        let (dx, _, _) = layer_norm_rows_backward(&cache.ln, &self.ln_gamma, &d_xn);
        Ok((grads, dx))
    }

    /// Folds the layer back into a dense FFN. With `restore_order` set, the
    /// inverse permutation is applied so the result is a drop-in replacement
    /// in the original channel order.
    pub fn reparameterize(&self, restore_order: bool) -> Result<DenseFFN<S>> {
        let mut experts = Vec::with_capacity(self.k());
        for i in 0..self.k() {
            let (up, down) = self.effective_expert(i)?;
            experts.push(Expert {
                e_up: up,
                e_b: self.experts.experts[i].e_b.clone(),
                e_down: down,
            });
        }
        assemble_dense(
            &ExpertSet { experts },
            &self.partition,
            self.b_down.clone(),
            restore_order,
        )
    }
}
