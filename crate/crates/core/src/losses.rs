//! Training-signal components: cross-entropy, the tempered-KL spatial
//! distillation term, multi-kernel MMD marginal alignment, and the
//! entropy-weighted confusion penalty.
//!
//! Each builder appends a differentiable fragment to a [`Graph`] and returns
//! the scalar (or per-row) output node. Teacher logits enter as constants,
//! so no gradient ever reaches the teacher through the distillation term.

use crate::error::{Error, Result};
use crate::tensor::{math, Graph, NodeId, Real, Tensor};

/// Floor inside every `log`/ratio so the losses stay finite for extreme
/// logits.
pub const PROB_FLOOR: f64 = 1e-12;

/// Trade-off weights and temperatures for the student composite loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight on the spatial-distillation term.
    pub alpha: f64,
    /// Weight on the marginal-alignment (MK-MMD) term.
    pub beta: f64,
    /// Weight on the confusion term.
    pub gamma: f64,
    /// Distillation softening temperature.
    pub distill_temperature: f64,
    /// Confusion-loss softening temperature.
    pub confusion_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            distill_temperature: 2.0,
            confusion_temperature: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative: alpha={} beta={} gamma={}",
                self.alpha, self.beta, self.gamma
            )));
        }
        if !(self.distill_temperature > 0.0) || !(self.confusion_temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperatures must be positive: T={} tau={}",
                self.distill_temperature, self.confusion_temperature
            )));
        }
        Ok(())
    }
}

/// Convex combination of Gaussian kernels: concrete widths and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpec {
    bandwidths: Vec<f64>,
    weights: Vec<f64>,
}

impl KernelSpec {
    /// Multipliers applied to the median pairwise distance by
    /// [`KernelSpec::from_median`].
    pub const DEFAULT_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

    pub fn new(bandwidths: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "kernel spec needs matching non-empty lists, got {} bandwidths and {} weights",
                bandwidths.len(),
                weights.len()
            )));
        }
        if bandwidths.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::InvalidArgument(
                "kernel bandwidths must be positive".into(),
            ));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument(
                "kernel weights must be non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "kernel weights must sum to 1, got {total}"
            )));
        }
        Ok(KernelSpec {
            bandwidths,
            weights,
        })
    }

    pub fn single(sigma: f64) -> Result<Self> {
        KernelSpec::new(vec![sigma], vec![1.0])
    }

    /// The default bank: median distance times the standard multipliers,
    /// equal weights.
    pub fn from_median(median: f64) -> Self {
        let m = if median > 0.0 { median } else { 1.0 };
        let bandwidths = Self::DEFAULT_MULTIPLIERS.iter().map(|&k| k * m).collect();
        let w = 1.0 / Self::DEFAULT_MULTIPLIERS.len() as f64;
        KernelSpec {
            bandwidths,
            weights: vec![w; Self::DEFAULT_MULTIPLIERS.len()],
        }
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Median pairwise Euclidean distance over the rows of the given feature
/// matrices (all must share the feature dimension). Returns 0 when fewer
/// than two rows exist.
pub fn median_pairwise_distance<R: Real>(parts: &[&Tensor<R>]) -> f64 {
    let mut rows: Vec<&[R]> = Vec::new();
    for t in parts {
        let d = *t.shape().last().unwrap();
        for r in t.data().chunks(d) {
            rows.push(r);
        }
    }
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for (&a, &b) in rows[i].iter().zip(rows[j]) {
                let d = a.as_f64() - b.as_f64();
                s += d * d;
            }
            dists.push(s.sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mid = dists.len() / 2;
    if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    }
}

fn logits_dims<R: Real>(g: &Graph<R>, logits: NodeId, what: &str) -> Result<(usize, usize)> {
    match g.shape(logits) {
        &[n, c] => Ok((n, c)),
        s => Err(Error::InvalidArgument(format!(
            "{what}: expected a 2-D trials x classes tensor, got {s:?}"
        ))),
    }
}

/// Mean over trials of `-log softmax(logits)[i, label_i]`.
pub fn cross_entropy<R: Real>(
    g: &mut Graph<R>,
    logits: NodeId,
    labels: &[u16],
) -> Result<NodeId> {
    let (n, classes) = logits_dims(g, logits, "cross_entropy")?;
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy: {n} logit rows but {} labels",
            labels.len()
        )));
    }
    let mut onehot = Tensor::zeros(&[n, classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: label {l} out of range for {classes} classes"
            )));
        }
        onehot.data_mut()[i * classes + l as usize] = R::one();
    }
    let probs = g.softmax(logits);
    let mask = g.constant(onehot);
    let picked = g.mul(probs, mask)?;
    let per_trial = g.sum_axis(picked, 1, false)?;
    let floored = g.clamp_min(per_trial, PROB_FLOOR);
    let logs = g.log(floored);
    let mean = g.mean(logs);
    Ok(g.scalar_mul(mean, -1.0))
}

/// Softmax of `logits / temp`.
pub fn tempered_softmax<R: Real>(g: &mut Graph<R>, logits: NodeId, temp: f64) -> Result<NodeId> {
    if !(temp > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tempered_softmax: temperature must be positive, got {temp}"
        )));
    }
    let scaled = g.scalar_mul(logits, 1.0 / temp);
    Ok(g.softmax(scaled))
}

/// Eager tempered softmax on a plain tensor (teacher side, predictions).
pub fn tempered_softmax_tensor<R: Real>(logits: &Tensor<R>, temp: f64) -> Result<Tensor<R>> {
    if !(temp > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tempered_softmax: temperature must be positive, got {temp}"
        )));
    }
    let inv = R::of_f64(1.0 / temp);
    Ok(math::softmax_forward(&logits.map(|x| x * inv)))
}

/// Spatial distillation: `T² · mean_i KL(p̂_stu_i ‖ p̂_tch_i)` with both
/// sides softened at `temp`. Teacher logits are constants.
pub fn sd_loss<R: Real>(
    g: &mut Graph<R>,
    student_logits: NodeId,
    teacher_logits: &Tensor<R>,
    temp: f64,
) -> Result<NodeId> {
    let (n, classes) = logits_dims(g, student_logits, "sd_loss")?;
    if teacher_logits.shape() != [n, classes] {
        return Err(Error::InvalidArgument(format!(
            "sd_loss: student logits are {n}x{classes} but teacher logits have shape {:?}",
            teacher_logits.shape()
        )));
    }
    let p_teacher = tempered_softmax_tensor(teacher_logits, temp)?;
    let floor = R::of_f64(PROB_FLOOR);
    let log_p_teacher = p_teacher.map(|p| if p > floor { p.ln() } else { floor.ln() });
    let p_student = tempered_softmax(g, student_logits, temp)?;
    let floored = g.clamp_min(p_student, PROB_FLOOR);
    let log_p_student = g.log(floored);
    let log_pt = g.constant(log_p_teacher);
    let log_ratio = g.sub(log_p_student, log_pt)?;
    let terms = g.mul(p_student, log_ratio)?;
    let per_trial = g.sum_axis(terms, 1, false)?;
    let mean = g.mean(per_trial);
    Ok(g.scalar_mul(mean, temp * temp))
}

/// Squared MK-MMD between two feature batches (biased V-statistic):
/// `mean(K_ss) + mean(K_tt) - 2·mean(K_st)` under the weighted Gaussian
/// kernel bank `Σ βᵢ exp(-‖x-y‖² / (2σᵢ²))`.
pub fn mk_mmd<R: Real>(
    g: &mut Graph<R>,
    source: NodeId,
    target: NodeId,
    spec: &KernelSpec,
) -> Result<NodeId> {
    let (_, d_s) = logits_dims(g, source, "mk_mmd source")?;
    let (_, d_t) = logits_dims(g, target, "mk_mmd target")?;
    if d_s != d_t {
        return Err(Error::InvalidArgument(format!(
            "mk_mmd: feature dims differ, {d_s} vs {d_t}"
        )));
    }
    let k_ss = kernel_matrix(g, source, source, spec)?;
    let k_tt = kernel_matrix(g, target, target, spec)?;
    let k_st = kernel_matrix(g, source, target, spec)?;
    let m_ss = g.mean(k_ss);
    let m_tt = g.mean(k_tt);
    let m_st = g.mean(k_st);
    let within = g.add(m_ss, m_tt)?;
    let cross = g.scalar_mul(m_st, 2.0);
    g.sub(within, cross)
}

/// Weighted Gaussian kernel matrix between the rows of `a` and `b`.
fn kernel_matrix<R: Real>(
    g: &mut Graph<R>,
    a: NodeId,
    b: NodeId,
    spec: &KernelSpec,
) -> Result<NodeId> {
    // ‖x-y‖² = ‖x‖² + ‖y‖² - 2·x·y, with the squared norms broadcast
    let a_sq = {
        let m = g.mul(a, a)?;
        g.sum_axis(m, 1, true)?
    };
    let b_sq = {
        let m = g.mul(b, b)?;
        let s = g.sum_axis(m, 1, true)?;
        g.transpose(s)?
    };
    let bt = g.transpose(b)?;
    let cross = g.matmul(a, bt)?;
    let norms = g.add(a_sq, b_sq)?;
    let twice = g.scalar_mul(cross, 2.0);
    let d2 = g.sub(norms, twice)?;
    let mut total: Option<NodeId> = None;
    for (&sigma, &w) in spec.bandwidths().iter().zip(spec.weights()) {
        let scaled = g.scalar_mul(d2, -1.0 / (2.0 * sigma * sigma));
        let k = g.exp(scaled);
        let weighted = g.scalar_mul(k, w);
        total = Some(match total {
            None => weighted,
            Some(t) => g.add(t, weighted)?,
        });
    }
    Ok(total.expect("kernel spec is non-empty"))
}

/// Entropy-derived confidence weights `vᵢ = 1 + exp(Σⱼ qᵢⱼ log qᵢⱼ)`,
/// one per row; range (1, 2].
pub fn uncertainty_weights<R: Real>(g: &mut Graph<R>, probs: NodeId) -> Result<NodeId> {
    logits_dims(g, probs, "uncertainty_weights")?;
    let floored = g.clamp_min(probs, PROB_FLOOR);
    let logs = g.log(floored);
    let terms = g.mul(probs, logs)?;
    let neg_entropy = g.sum_axis(terms, 1, false)?;
    let e = g.exp(neg_entropy);
    Ok(g.scalar_add(e, 1.0))
}

/// Confusion loss over target logits: with `q̂ = tempered_softmax(logits,
/// temp)` and `v` the uncertainty weights, `l_jj' = Σᵢ q̂ᵢⱼ·vᵢ·q̂ᵢⱼ'` and
/// the loss is `(Σⱼⱼ' l_jj' - Σⱼ l_jj) / classes`. The inner sum over
/// trials is deliberately unnormalized.
pub fn confusion_loss<R: Real>(g: &mut Graph<R>, logits: NodeId, temp: f64) -> Result<NodeId> {
    let (n, classes) = logits_dims(g, logits, "confusion_loss")?;
    let q = tempered_softmax(g, logits, temp)?;
    let v = uncertainty_weights(g, q)?;
    let v_col = g.reshape(v, &[n, 1])?;
    let weighted = g.mul(q, v_col)?;
    let qt = g.transpose(q)?;
    let confusion = g.matmul(qt, weighted)?;
    let total = g.sum(confusion);
    let mut eye = Tensor::zeros(&[classes, classes]);
    for i in 0..classes {
        eye.data_mut()[i * classes + i] = R::one();
    }
    let eye = g.constant(eye);
    let diag = g.mul(confusion, eye)?;
    let trace = g.sum(diag);
    let off = g.sub(total, trace)?;
    Ok(g.scalar_mul(off, 1.0 / classes as f64))
}

/// Student composite for the unsupervised scenario:
/// `ce + α·sd + β·ma + γ·cl`.
pub fn student_loss_uda<R: Real>(
    g: &mut Graph<R>,
    ce: NodeId,
    sd: NodeId,
    ma: NodeId,
    cl: NodeId,
    weights: &LossWeights,
) -> Result<NodeId> {
    weights.validate()?;
    for (name, id) in [("ce", ce), ("sd", sd), ("ma", ma), ("cl", cl)] {
        if !g.shape(id).is_empty() {
            return Err(Error::InvalidArgument(format!(
                "student_loss: {name} term must be scalar, got shape {:?}",
                g.shape(id)
            )));
        }
    }
    let sd_w = g.scalar_mul(sd, weights.alpha);
    let ma_w = g.scalar_mul(ma, weights.beta);
    let cl_w = g.scalar_mul(cl, weights.gamma);
    let a = g.add(ce, sd_w)?;
    let b = g.add(a, ma_w)?;
    g.add(b, cl_w)
}

/// Student composite for the supervised scenario: the UDA composite plus an
/// unweighted labeled-target cross-entropy term.
pub fn student_loss_sda<R: Real>(
    g: &mut Graph<R>,
    ce_source: NodeId,
    ce_target: Option<NodeId>,
    sd: NodeId,
    ma: NodeId,
    cl: NodeId,
    weights: &LossWeights,
) -> Result<NodeId> {
    let ce_target = ce_target.ok_or_else(|| {
        Error::InvalidArgument(
            "student_loss_sda: the supervised scenario requires labeled target trials".into(),
        )
    })?;
    let base = student_loss_uda(g, ce_source, sd, ma, cl, weights)?;
    g.add(base, ce_target)
}
