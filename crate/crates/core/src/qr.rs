//! Quality-retaining optimization: per-class EMA logit bank, cross-entropy
//! over the unified label space, and the distillation loss that weights each
//! task by the reciprocal of its current CE.
//!
//! Tasks with low loss (already converged) lean on the recorded knowledge,
//! tasks with high loss keep following the ground truth; nothing forces the
//! tasks onto a common schedule. The bank is a detached teacher: it is
//! updated only by EMA and never receives a gradient.

use crate::error::{Error, Result};
use crate::linalg::{softmax_rows, Matrix, Scalar};

/// Smoothing added to both KL arguments.
pub const KL_EPS: f64 = 1e-12;

/// Mean cross-entropy and its gradient `(softmax - onehot) / N`.
pub fn cross_entropy<S: Scalar>(logits: &Matrix<S>, labels: &[usize]) -> Result<(f64, Matrix<S>)> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::Dim(format!(
            "cross_entropy: {n} logit rows vs {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Config(format!(
            "cross_entropy: label {bad} out of range for {c} classes"
        )));
    }
    let mut grad = softmax_rows(logits);
    let inv_n = S::from_f64(1.0 / n as f64);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let p = grad.get(i, label).to_f64();
        loss -= p.max(f64::MIN_POSITIVE).ln();
        let row = grad.row_mut(i);
        row[label] -= S::ONE;
        for v in row {
            *v *= inv_n;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Per-class EMA logits recorded during optimization; the self-teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeBank<S: Scalar> {
    /// `N_class x N_class`; row `c` holds the EMA logits of class `c`.
    pub z: Matrix<S>,
    pub momentum: f64,
    pub initialized: Vec<bool>,
}

impl<S: Scalar> KnowledgeBank<S> {
    pub fn new(n_class: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config("bank momentum must lie in (0, 1)".into()));
        }
        Ok(KnowledgeBank {
            z: Matrix::zeros(n_class, n_class),
            momentum,
            initialized: vec![false; n_class],
        })
    }

    pub fn n_class(&self) -> usize {
        self.initialized.len()
    }

    /// `Z_label <- m * Z_label + (1 - m) * z`; the first write seeds the row
    /// with `z` directly. Batch callers must apply samples in batch order.
    pub fn update(&mut self, label: usize, logits: &[S]) -> Result<()> {
        if label >= self.n_class() {
            return Err(Error::Config(format!(
                "bank update: label {label} out of range"
            )));
        }
        if logits.len() != self.z.cols() {
            return Err(Error::Dim("bank update: logit width mismatch".into()));
        }
        let row = self.z.row_mut(label);
        if self.initialized[label] {
            let m = S::from_f64(self.momentum);
            let one_minus = S::ONE - m;
            for (r, &v) in row.iter_mut().zip(logits) {
                *r = m * *r + one_minus * v;
            }
        } else {
            row.copy_from_slice(logits);
            self.initialized[label] = true;
        }
        Ok(())
    }

    pub fn row(&self, label: usize) -> Option<&[S]> {
        if self.initialized[label] {
            Some(self.z.row(label))
        } else {
            None
        }
    }
}

/// Reciprocal-CE task weights for the distillation term.
#[derive(Clone, Debug)]
pub struct TaskLossTracker {
    clamp_floor: f64,
    use_ema: bool,
    momentum: f64,
    ema: Vec<Option<f64>>,
    current: Vec<Option<f64>>,
}

impl TaskLossTracker {
    pub fn new(n_tasks: usize, clamp_floor: f64, use_ema: bool, momentum: f64) -> Result<Self> {
        if !(clamp_floor > 0.0) {
            return Err(Error::Config("tracker clamp floor must be > 0".into()));
        }
        Ok(TaskLossTracker {
            clamp_floor,
            use_ema,
            momentum,
            ema: vec![None; n_tasks],
            current: vec![None; n_tasks],
        })
    }

    /// Records a task's batch-mean CE.
    pub fn observe(&mut self, task: usize, ce: f64) {
        self.current[task] = Some(ce);
        let ema = match self.ema[task] {
            Some(prev) => self.momentum * prev + (1.0 - self.momentum) * ce,
            None => ce,
        };
        self.ema[task] = Some(ema);
    }

    /// `w_t = 1 / max(L_CE_t, clamp)`. None until the task has been observed.
    pub fn weight(&self, task: usize) -> Option<f64> {
        let ce = if self.use_ema {
            self.ema[task]
        } else {
            self.current[task]
        }?;
        Some(1.0 / ce.max(self.clamp_floor))
    }
}

/// Distillation of the bank into the current logits, weighted per task:
/// `L_QR = sum_t w_t * sum_{s in task t} KL(softmax(z_s), softmax(Z_label_s))`.
///
/// Returns the loss and its gradient with respect to the logits. Bank rows
/// and the task weights are constants of the differentiation; samples whose
/// class row is not yet initialized contribute nothing.
pub fn qr_loss<S: Scalar>(
    logits: &Matrix<S>,
    labels: &[usize],
    task_ids: &[usize],
    bank: &KnowledgeBank<S>,
    tracker: &TaskLossTracker,
) -> Result<(f64, Matrix<S>)> {
    let n = logits.rows();
    if labels.len() != n || task_ids.len() != n {
        return Err(Error::Dim("qr_loss: batch length mismatch".into()));
    }
    if logits.cols() != bank.n_class() {
        return Err(Error::Dim("qr_loss: logit width vs bank size".into()));
    }
    let eps = S::from_f64(KL_EPS);
    let student = softmax_rows(logits);
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut loss = 0.0;
    for s in 0..n {
        let label = labels[s];
        if label >= bank.n_class() {
            return Err(Error::Config(format!(
                "qr_loss: label {label} out of range"
            )));
        }
        let Some(bank_row) = bank.row(label) else {
            continue;
        };
        let weight = tracker.weight(task_ids[s]).ok_or_else(|| {
            Error::Config(format!(
                "qr_loss: task {} has no recorded CE",
                task_ids[s]
            ))
        })?;
        let w = S::from_f64(weight);
        let mut teacher = bank_row.to_vec();
        crate::linalg::softmax_slice(&mut teacher);
        let p = student.row(s);
        // value = sum p_i u_i with u_i = ln((p_i+eps)/(q_i+eps));
        // d value / d p_i = u_i + p_i/(p_i+eps), pulled back through softmax.
        let mut value = S::ZERO;
        let mut v = vec![S::ZERO; p.len()];
        for i in 0..p.len() {
            let u = ((p[i] + eps) / (teacher[i] + eps)).ln();
            value += p[i] * u;
            v[i] = u + p[i] / (p[i] + eps);
        }
        let mut pv = S::ZERO;
        for i in 0..p.len() {
            pv += p[i] * v[i];
        }
        let grow = grad.row_mut(s);
        for i in 0..p.len() {
            grow[i] = w * (p[i] * (v[i] - pv));
        }
        loss += weight * value.to_f64();
    }
    Ok((loss, grad))
}

/// Overall objective: plain sum of the per-task CE losses plus the QR term.
pub fn total_loss(task_ce: &[f64], qr: f64) -> f64 {
    task_ce.iter().sum::<f64>() + qr
}
