//! Joint teacher/student optimization with three-stage alignment.
//!
//! Per batch the teacher takes a cross-entropy step on the aligned
//! full-channel source stream, then the student takes a step on the
//! composite loss: source cross-entropy, tempered KL against the
//! just-updated teacher's logits, MK-MMD between source and target
//! features, and the confusion penalty on target logits (plus a labeled
//! target cross-entropy term in the supervised scenario).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alignment::{
    align_for_inference, euclidean_align_session, mean_covariance, subset_channels,
    ReferenceMatrix, Session,
};
use crate::data::{batch_indices, Domain};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, auc, MetricKind};
use crate::losses::{
    self, cross_entropy, median_pairwise_distance, KernelSpec, LossWeights,
};
use crate::model::{build_network, ArchConfig, Mode, Network};
use crate::tensor::{Graph, Real, Tensor};
use crate::util::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Offline unsupervised adaptation: unlabeled target test trials are
    /// available during training and evaluated transductively.
    Uda,
    /// Online supervised adaptation: a small labeled calibration set is
    /// available; test trials stay unseen and use frozen alignment
    /// references.
    Sda,
}

/// How MK-MMD bandwidths are chosen each batch.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelPolicy {
    /// Median pairwise feature distance times the default multipliers,
    /// recomputed per batch as a gradient-free constant.
    MedianHeuristic,
    Fixed(KernelSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub scenario: Scenario,
    pub weights: LossWeights,
    pub kernel: KernelPolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Labeled target calibration count for the supervised scenario.
    pub n_labeled: usize,
    pub metric: MetricKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scenario: Scenario::Uda,
            weights: LossWeights::default(),
            kernel: KernelPolicy::MedianHeuristic,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            n_labeled: 32,
            metric: MetricKind::Accuracy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.scenario == Scenario::Sda && self.n_labeled == 0 {
            return Err(Error::InvalidArgument(
                "the supervised scenario needs n_labeled >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch loss components (all batch-averaged) and the evaluation
/// metric on the available target data.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub teacher_ce: f64,
    pub ce_source: f64,
    /// Labeled-target cross entropy; zero in the unsupervised scenario.
    pub ce_target: f64,
    pub sd: f64,
    pub ma: f64,
    pub cl: f64,
    pub student_total: f64,
    pub metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub metric_name: String,
}

/// One flattened stream of trials, index-aligned with its labels.
#[derive(Clone, Debug)]
pub struct Stream {
    pub inputs: Vec<Tensor<f32>>,
    pub labels: Vec<Option<u16>>,
}

impl Stream {
    fn new() -> Self {
        Stream {
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn push_session(&mut self, session: &Session) {
        for t in session.trials() {
            self.inputs.push(t.matrix().cast());
            self.labels.push(t.label());
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Step-1 outputs: aligned streams for the teacher, the student's source
/// side, the student's target side, and the evaluation set, plus the
/// frozen per-session target references.
pub struct PreparedData {
    pub teacher_source: Stream,
    pub student_source: Stream,
    pub student_target: Stream,
    pub target_eval: Stream,
    pub target_refs: Vec<ReferenceMatrix>,
    pub classes: usize,
    pub samples: usize,
    pub source_channels: usize,
    pub common_channels: usize,
    pub sampling_rate: u32,
}

/// Session-wise alignment for all streams. The student's source stream is
/// subset to the common channels *first*, then aligned; the teacher keeps
/// all source channels. Target handling depends on the scenario: the
/// unsupervised path aligns each target session over all its trials and
/// evaluates the same trials, the supervised path computes each session's
/// reference from its leading calibration trials only and freezes it for
/// the held-out remainder.
pub fn prepare_domains(
    config: &TrainConfig,
    source: &Domain,
    target: &Domain,
) -> Result<PreparedData> {
    let common = target.channel_names().to_vec();
    for name in &common {
        if !source.channel_names().contains(name) {
            return Err(Error::Data(format!(
                "target channel '{name}' does not exist in the source domain"
            )));
        }
    }
    if source.classes() != target.classes() {
        return Err(Error::Data(format!(
            "class counts differ: source {} vs target {}",
            source.classes(),
            target.classes()
        )));
    }
    let classes = source.classes() as usize;
    let samples = source
        .all_trials()
        .next()
        .map(|t| t.dims().1)
        .ok_or_else(|| Error::Data("source domain has no trials".into()))?;

    let mut teacher_source = Stream::new();
    let mut student_source = Stream::new();
    for session in source.sessions() {
        let full = euclidean_align_session(session)?;
        let com = euclidean_align_session(&subset_channels(session, &common)?)?;
        teacher_source.push_session(&full);
        student_source.push_session(&com);
    }
    if teacher_source.labels.iter().any(|l| l.is_none()) {
        return Err(Error::Data("every source trial must be labeled".into()));
    }

    let mut student_target = Stream::new();
    let mut target_eval = Stream::new();
    let mut target_refs = Vec::new();
    match config.scenario {
        Scenario::Uda => {
            for session in target.sessions() {
                target_refs.push(mean_covariance(session)?);
                let aligned = euclidean_align_session(session)?;
                student_target.push_session(&aligned);
                target_eval.push_session(&aligned);
            }
        }
        Scenario::Sda => {
            if config.n_labeled < classes {
                return Err(Error::InvalidArgument(format!(
                    "the supervised scenario needs n_labeled >= classes ({} < {classes})",
                    config.n_labeled
                )));
            }
            let n_sessions = target.sessions().len();
            if config.n_labeled < n_sessions {
                return Err(Error::InvalidArgument(format!(
                    "n_labeled={} cannot cover {n_sessions} target sessions",
                    config.n_labeled
                )));
            }
            // apportion the calibration budget over sessions, earlier
            // sessions taking the remainder
            let base = config.n_labeled / n_sessions;
            let extra = config.n_labeled % n_sessions;
            for (i, session) in target.sessions().iter().enumerate() {
                let want = base + usize::from(i < extra);
                let k = want.min(session.n_trials());
                if k == 0 {
                    return Err(Error::Data(format!(
                        "target session {i} has no trials for calibration"
                    )));
                }
                let calib_trials = session.trials()[..k].to_vec();
                if calib_trials.iter().any(|t| t.label().is_none()) {
                    return Err(Error::Data(format!(
                        "calibration trials of target session {i} must be labeled"
                    )));
                }
                let calib = Session::new(
                    calib_trials,
                    session.channel_names().to_vec(),
                    session.sampling_rate(),
                )?;
                let reference = mean_covariance(&calib)?;
                let aligned_calib = euclidean_align_session(&calib)?;
                student_target.push_session(&aligned_calib);
                for trial in &session.trials()[k..] {
                    let aligned = align_for_inference(&reference, trial)?;
                    target_eval.inputs.push(aligned.matrix().cast());
                    target_eval.labels.push(aligned.label());
                }
                target_refs.push(reference);
            }
            if target_eval.is_empty() {
                return Err(Error::Data(
                    "no held-out target trials remain after calibration".into(),
                ));
            }
        }
    }

    Ok(PreparedData {
        teacher_source,
        student_source,
        student_target,
        target_eval,
        target_refs,
        classes,
        samples,
        source_channels: source.channel_names().len(),
        common_channels: common.len(),
        sampling_rate: source.sessions()[0].sampling_rate(),
    })
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adaptive-moment state for one parameter set.
#[derive(Clone, Debug)]
pub struct AdamState<R> {
    m: BTreeMap<String, Tensor<R>>,
    v: BTreeMap<String, Tensor<R>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl<R: Real> AdamState<R> {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<R>, &Tensor<R>)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }
}

/// One bias-corrected adaptive-moment update over a named parameter set.
pub fn adam_step<R: Real>(
    params: &mut BTreeMap<String, Tensor<R>>,
    grads: &BTreeMap<String, Tensor<R>>,
    state: &mut AdamState<R>,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let b1 = R::of_f64(state.beta1);
    let b2 = R::of_f64(state.beta2);
    let one = R::one();
    let bc1 = R::of_f64(1.0 - state.beta1.powi(state.step as i32));
    let bc2 = R::of_f64(1.0 - state.beta2.powi(state.step as i32));
    let lr = R::of_f64(lr);
    let eps = R::of_f64(state.epsilon);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!("adam_step: no gradient for parameter '{name}'"))
        })?;
        if !g.all_finite() {
            return Err(Error::Numerical(format!(
                "adam_step: non-finite gradient for parameter '{name}'"
            )));
        }
        if g.shape() != p.shape() {
            return Err(Error::InvalidArgument(format!(
                "adam_step: gradient shape {:?} does not match parameter '{name}' {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for ((pv, mv), (vv, &gv)) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut().iter_mut().zip(g.data()))
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// the training loop
// ---------------------------------------------------------------------------

pub struct TrainOutput {
    pub student: Network<f32>,
    pub teacher: Network<f32>,
    pub history: TrainHistory,
    /// Frozen per-session target references (inference alignment).
    pub target_refs: Vec<ReferenceMatrix>,
    /// Aligned target evaluation stream (transductive pool in the
    /// unsupervised scenario, held-out trials in the supervised one).
    pub eval_stream: Stream,
}

/// Stack stream trials into one `n×C×T` batch (evaluation helper).
pub fn assemble_eval_batch(stream: &Stream, idx: &[usize]) -> (Tensor<f32>, Vec<Option<u16>>) {
    assemble_batch(stream, idx)
}

fn assemble_batch(stream: &Stream, idx: &[usize]) -> (Tensor<f32>, Vec<Option<u16>>) {
    let (c, t) = {
        let s = stream.inputs[idx[0]].shape();
        (s[0], s[1])
    };
    let mut data = Vec::with_capacity(idx.len() * c * t);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(stream.inputs[i].data());
        labels.push(stream.labels[i]);
    }
    (
        Tensor::new(vec![idx.len(), c, t], data).expect("consistent trial dims"),
        labels,
    )
}

fn unwrap_labels(labels: &[Option<u16>]) -> Result<Vec<u16>> {
    labels
        .iter()
        .map(|l| {
            l.ok_or_else(|| Error::Data("labeled stream contains an unlabeled trial".into()))
        })
        .collect()
}

/// Target indices for one epoch: reshuffled cycles of the target pool,
/// truncated to the number of source trials consumed this epoch.
fn cycled_target_order(n_target: usize, needed: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(needed);
    let mut round = 0u64;
    while out.len() < needed {
        let perm = batch_indices(n_target, n_target, mix_seed(&[seed, round]), false)
            .pop()
            .expect("non-empty pool");
        out.extend(perm);
        round += 1;
    }
    out.truncate(needed);
    out
}

fn resolve_kernel(policy: &KernelPolicy, feats: &[&Tensor<f32>]) -> KernelSpec {
    match policy {
        KernelPolicy::Fixed(spec) => spec.clone(),
        KernelPolicy::MedianHeuristic => {
            KernelSpec::from_median(median_pairwise_distance(feats))
        }
    }
}

/// Run the full pipeline: session-wise alignment, then per batch a teacher
/// step followed by a student step that uses the just-updated teacher's
/// eval-mode logits as distillation targets.
pub fn train_sdda(
    config: &TrainConfig,
    source: &Domain,
    target: &Domain,
) -> Result<TrainOutput> {
    config.validate()?;
    let prepared = prepare_domains(config, source, target)?;
    let arch = ArchConfig::for_sampling_rate(prepared.sampling_rate);
    let mut teacher: Network<f32> = build_network(
        prepared.source_channels,
        prepared.samples,
        prepared.classes,
        &arch,
        mix_seed(&[config.seed, 0x7C4]),
    )?;
    let mut student: Network<f32> = build_network(
        prepared.common_channels,
        prepared.samples,
        prepared.classes,
        &arch,
        mix_seed(&[config.seed, 0x57D]),
    )?;
    let mut teacher_opt = AdamState::new(config.adam_beta1, config.adam_beta2, config.adam_epsilon);
    let mut student_opt = AdamState::new(config.adam_beta1, config.adam_beta2, config.adam_epsilon);

    let n_source = prepared.teacher_source.len();
    let n_target = prepared.student_target.len();
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(config.epochs),
        metric_name: config.metric.name().to_string(),
    };

    for epoch in 0..config.epochs {
        let epoch_seed = mix_seed(&[config.seed, epoch as u64]);
        let source_batches = batch_indices(n_source, config.batch_size, mix_seed(&[epoch_seed, 1]), false);
        let consumed: usize = source_batches.iter().map(|b| b.len()).sum();
        let target_order = cycled_target_order(n_target, consumed, mix_seed(&[epoch_seed, 2]));
        let mut target_cursor = 0usize;

        let mut sums = [0.0f64; 7];
        for (step, batch) in source_batches.iter().enumerate() {
            let step_seed = mix_seed(&[epoch_seed, 3, step as u64]);
            let target_idx = &target_order[target_cursor..target_cursor + batch.len()];
            target_cursor += batch.len();

            let ctx = |what: &str| format!("{what} at epoch {epoch} batch {step}");

            // teacher step on the full-channel source batch
            let (teacher_batch, raw_labels) = assemble_batch(&prepared.teacher_source, batch);
            let labels = unwrap_labels(&raw_labels)?;
            let teacher_ce = {
                let mut g: Graph<f32> = Graph::new();
                let input = g.constant(teacher_batch.clone());
                let wired = teacher.wire(&mut g, input, Mode::Train, mix_seed(&[step_seed, 10]))?;
                let ce = cross_entropy(&mut g, wired.logits, &labels)?;
                let value = g.forward(ce, &teacher.bindings())?.scalar_value() as f64;
                if !value.is_finite() {
                    return Err(Error::Numerical(ctx("non-finite teacher loss")));
                }
                let grads = g.backward(ce)?;
                let stats: Vec<_> = wired
                    .bn_nodes
                    .iter()
                    .map(|(name, node, count)| {
                        let (mean, var) = g.bn_stats(*node).expect("train bn");
                        (name.clone(), mean.to_vec(), var.to_vec(), *count)
                    })
                    .collect();
                adam_step(
                    teacher.params_mut(),
                    &grads,
                    &mut teacher_opt,
                    config.learning_rate,
                )?;
                teacher.update_running_stats(&stats);
                value
            };

            // distillation targets from the just-updated teacher
            let teacher_logits = teacher.forward_logits_batchstats(&teacher_batch)?;

            // student step: source-common stream plus target stream
            let (student_batch, _) = assemble_batch(&prepared.student_source, batch);
            let (target_batch, target_raw_labels) =
                assemble_batch(&prepared.student_target, target_idx);
            debug_assert_eq!(student_batch.shape()[1], prepared.common_channels);
            debug_assert_eq!(target_batch.shape()[1], prepared.common_channels);

            let mut g: Graph<f32> = Graph::new();
            let src_in = g.constant(student_batch);
            let tgt_in = g.constant(target_batch);
            let wired_src = student.wire(&mut g, src_in, Mode::Train, mix_seed(&[step_seed, 20]))?;
            let wired_tgt = student.wire(&mut g, tgt_in, Mode::Train, mix_seed(&[step_seed, 21]))?;

            // first pass evaluates the feature nodes so the median
            // bandwidth heuristic can see this batch's features
            g.forward(wired_tgt.features, &student.bindings())?;
            let kernel = {
                let fs = g.value(wired_src.features).expect("forward ran");
                let ft = g.value(wired_tgt.features).expect("forward ran");
                resolve_kernel(&config.kernel, &[fs, ft])
            };

            let ce_src = cross_entropy(&mut g, wired_src.logits, &labels)?;
            let sd = losses::sd_loss(
                &mut g,
                wired_src.logits,
                &teacher_logits,
                config.weights.distill_temperature,
            )?;
            let ma = losses::mk_mmd(&mut g, wired_src.features, wired_tgt.features, &kernel)?;
            // The confusion term sums over trials; fold in a 1/batch factor
            // here so its gradient scale matches the batch-mean CE and SD
            // terms. Left at its raw trial-sum scale it overwhelms the
            // cross entropy and collapses every prediction to one class.
            let cl_sum = losses::confusion_loss(
                &mut g,
                wired_tgt.logits,
                config.weights.confusion_temperature,
            )?;
            let cl = g.scalar_mul(cl_sum, 1.0 / target_idx.len() as f64);
            let (total, ce_tgt) = match config.scenario {
                Scenario::Uda => (
                    losses::student_loss_uda(&mut g, ce_src, sd, ma, cl, &config.weights)?,
                    None,
                ),
                Scenario::Sda => {
                    let target_labels = unwrap_labels(&target_raw_labels)?;
                    let ce_t = cross_entropy(&mut g, wired_tgt.logits, &target_labels)?;
                    (
                        losses::student_loss_sda(
                            &mut g,
                            ce_src,
                            Some(ce_t),
                            sd,
                            ma,
                            cl,
                            &config.weights,
                        )?,
                        Some(ce_t),
                    )
                }
            };

            let total_value = g.forward(total, &student.bindings())?.scalar_value() as f64;
            if !total_value.is_finite() {
                return Err(Error::Numerical(ctx("non-finite student loss")));
            }
            let grads = g.backward(total)?;
            let mut stats = Vec::new();
            for (name, node, count) in wired_src.bn_nodes.iter().chain(&wired_tgt.bn_nodes) {
                let (mean, var) = g.bn_stats(*node).expect("train bn");
                stats.push((name.clone(), mean.to_vec(), var.to_vec(), *count));
            }
            adam_step(
                student.params_mut(),
                &grads,
                &mut student_opt,
                config.learning_rate,
            )?;
            student.update_running_stats(&stats);

            let value_of = |id| g.value(id).expect("forward ran").scalar_value() as f64;
            sums[0] += teacher_ce;
            sums[1] += value_of(ce_src);
            sums[2] += ce_tgt.map(&value_of).unwrap_or(0.0);
            sums[3] += value_of(sd);
            sums[4] += value_of(ma);
            sums[5] += value_of(cl);
            sums[6] += total_value;
        }

        let n_batches = source_batches.len() as f64;
        let metric = evaluate_metric(
            &student,
            match config.scenario {
                Scenario::Uda => &prepared.student_target,
                Scenario::Sda => &prepared.student_target,
            },
            config.metric,
        )?;
        history.epochs.push(EpochRecord {
            teacher_ce: sums[0] / n_batches,
            ce_source: sums[1] / n_batches,
            ce_target: sums[2] / n_batches,
            sd: sums[3] / n_batches,
            ma: sums[4] / n_batches,
            cl: sums[5] / n_batches,
            student_total: sums[6] / n_batches,
            metric,
        });
    }

    Ok(TrainOutput {
        student,
        teacher,
        history,
        target_refs: prepared.target_refs,
        eval_stream: prepared.target_eval,
    })
}

/// Eval-mode metric of a student over a labeled stream.
pub fn evaluate_metric(
    student: &Network<f32>,
    stream: &Stream,
    metric: MetricKind,
) -> Result<f64> {
    let idx: Vec<usize> = (0..stream.len()).collect();
    let (batch, raw_labels) = assemble_batch(stream, &idx);
    let labels = unwrap_labels(&raw_labels)?;
    let logits = student.forward_logits(&batch, Mode::Eval, 0)?;
    let probs = losses::tempered_softmax_tensor(&logits, 1.0)?;
    let predicted = argmax_rows(&probs);
    match metric {
        MetricKind::Accuracy => accuracy(&predicted, &labels),
        MetricKind::Auc => {
            let scores: Vec<f64> = (0..labels.len())
                .map(|i| probs.at2(i, 1).as_f64())
                .collect();
            let binary: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            auc(&scores, &binary)
        }
    }
}

fn argmax_rows(probs: &Tensor<f32>) -> Vec<u16> {
    let c = probs.shape()[1];
    probs
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u16
        })
        .collect()
}

// ---------------------------------------------------------------------------
// prediction
// ---------------------------------------------------------------------------

/// Inference-time alignment policy.
pub enum EaPolicy<'a> {
    /// Recompute the session reference over the given trials (matches the
    /// training-time alignment of the unsupervised scenario).
    Joint,
    /// Apply a frozen calibration reference (supervised scenario).
    Frozen(&'a ReferenceMatrix),
}

pub struct Prediction {
    pub labels: Vec<u16>,
    /// Softmax scores, one row per trial.
    pub scores: Tensor<f32>,
}

/// Align a session per the policy, run the student in eval mode, and
/// return argmax labels (ties break to the lowest class index) plus
/// softmax scores.
pub fn predict(
    student: &Network<f32>,
    session: &Session,
    policy: EaPolicy<'_>,
) -> Result<Prediction> {
    if session.n_channels() != student.channels() {
        return Err(Error::Data(format!(
            "session has {} channels but the student expects {}",
            session.n_channels(),
            student.channels()
        )));
    }
    let aligned: Vec<Tensor<f32>> = match policy {
        EaPolicy::Joint => euclidean_align_session(session)?
            .trials()
            .iter()
            .map(|t| t.matrix().cast())
            .collect(),
        EaPolicy::Frozen(reference) => session
            .trials()
            .iter()
            .map(|t| Ok(align_for_inference(reference, t)?.matrix().cast()))
            .collect::<Result<Vec<_>>>()?,
    };
    let stream = Stream {
        labels: vec![None; aligned.len()],
        inputs: aligned,
    };
    let idx: Vec<usize> = (0..stream.len()).collect();
    let (batch, _) = assemble_batch(&stream, &idx);
    let logits = student.forward_logits(&batch, Mode::Eval, 0)?;
    let scores = losses::tempered_softmax_tensor(&logits, 1.0)?;
    let labels = argmax_rows(&scores);
    Ok(Prediction { labels, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            source_channels: 4,
            common_channels: 2,
            samples: 64,
            trials_per_class: 4,
            sessions_per_domain: 1,
            sampling_rate: 32,
            ..SynthSpec::default()
        }
    }

    fn tiny_config(scenario: Scenario) -> TrainConfig {
        TrainConfig {
            scenario,
            epochs: 2,
            batch_size: 8,
            n_labeled: 4,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    // -- adam -----------------------------------------------------------------

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::<f64>::filled(&[3], 1.5));
        let grads = BTreeMap::from([("w".to_string(), Tensor::<f64>::zeros(&[3]))]);
        let mut state = AdamState::new(0.9, 0.999, 1e-8);
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state, 0.1).unwrap();
        }
        assert!(params["w"].data().iter().all(|&v| v == 1.5));
        let (m, v) = state.moments("w").unwrap();
        assert!(m.data().iter().all(|&x| x == 0.0));
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adam_constant_gradient_approaches_signed_lr_steps() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::<f64>::zeros(&[2]));
        let grads = BTreeMap::from([(
            "w".to_string(),
            Tensor::<f64>::new(vec![2], vec![3.0, -0.5]).unwrap(),
        )]);
        let mut state = AdamState::new(0.9, 0.999, 1e-8);
        let lr = 0.01;
        let mut prev = params["w"].clone();
        for step in 0..200 {
            adam_step(&mut params, &grads, &mut state, lr).unwrap();
            if step > 150 {
                let dx = params["w"].data()[0] - prev.data()[0];
                let dy = params["w"].data()[1] - prev.data()[1];
                assert!((dx - (-lr)).abs() < 1e-4, "step {step}: dx={dx}");
                assert!((dy - lr).abs() < 1e-4, "step {step}: dy={dy}");
            }
            prev = params["w"].clone();
        }
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut params = BTreeMap::new();
        params.insert(
            "x".to_string(),
            Tensor::<f64>::new(vec![2], vec![0.4, -0.3]).unwrap(),
        );
        let mut state = AdamState::new(0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let g = params["x"].map(|v| 2.0 * v);
            let grads = BTreeMap::from([("x".to_string(), g)]);
            adam_step(&mut params, &grads, &mut state, 1e-2).unwrap();
        }
        let norm: f64 = params["x"].data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "did not converge: {norm}");
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut params = BTreeMap::new();
        params.insert("bad".to_string(), Tensor::<f64>::zeros(&[1]));
        let grads = BTreeMap::from([(
            "bad".to_string(),
            Tensor::<f64>::new(vec![1], vec![f64::NAN]).unwrap(),
        )]);
        let mut state = AdamState::new(0.9, 0.999, 1e-8);
        let err = adam_step(&mut params, &grads, &mut state, 0.1).unwrap_err();
        assert!(err.to_string().contains("bad"), "got: {err}");
    }

    // -- preparation ------------------------------------------------------------

    #[test]
    fn prepare_subsets_before_aligning() {
        let (source, target) = synth_generate(&tiny_spec()).unwrap();
        let prepared =
            prepare_domains(&tiny_config(Scenario::Uda), &source, &target).unwrap();
        // manual subset-then-align for the first source session
        let common = target.channel_names().to_vec();
        let manual = euclidean_align_session(
            &subset_channels(&source.sessions()[0], &common).unwrap(),
        )
        .unwrap();
        for (a, b) in manual.trials().iter().zip(&prepared.student_source.inputs) {
            for (&x, y) in a.matrix().data().iter().zip(b.data()) {
                assert!((x - y.as_f64()).abs() < 1e-6);
            }
        }
        // and that is different from align-then-subset
        let other = subset_channels(
            &euclidean_align_session(&source.sessions()[0]).unwrap(),
            &common,
        )
        .unwrap();
        let mut max_diff = 0.0f64;
        for (a, b) in other.trials().iter().zip(&prepared.student_source.inputs) {
            for (&x, y) in a.matrix().data().iter().zip(b.data()) {
                max_diff = max_diff.max((x - y.as_f64()).abs());
            }
        }
        assert!(max_diff > 1e-4);
    }

    #[test]
    fn prepare_rejects_channel_violation() {
        let (source, _) = synth_generate(&tiny_spec()).unwrap();
        let other = SynthSpec {
            source_channels: 6,
            common_channels: 6,
            seed: 99,
            ..tiny_spec()
        };
        let (_, target6) = synth_generate(&other).unwrap();
        let err = match prepare_domains(&tiny_config(Scenario::Uda), &source, &target6) {
            Err(e) => e,
            Ok(_) => panic!("channel violation should be rejected"),
        };
        assert!(err.to_string().contains("CH5"), "got: {err}");
    }

    #[test]
    fn prepare_sda_splits_calibration_and_eval() {
        let (source, target) = synth_generate(&tiny_spec()).unwrap();
        let config = tiny_config(Scenario::Sda);
        let prepared = prepare_domains(&config, &source, &target).unwrap();
        assert_eq!(prepared.student_target.len(), config.n_labeled);
        assert_eq!(
            prepared.target_eval.len(),
            target.n_trials() - config.n_labeled
        );
        assert_eq!(prepared.target_refs.len(), target.sessions().len());
        // frozen-reference alignment of a held-out trial matches the stream
        let session = &target.sessions()[0];
        let held = &session.trials()[config.n_labeled..];
        let aligned =
            align_for_inference(&prepared.target_refs[0], &held[0]).unwrap();
        for (&x, y) in aligned
            .matrix()
            .data()
            .iter()
            .zip(prepared.target_eval.inputs[0].data())
        {
            assert!((x - y.as_f64()).abs() < 1e-6);
        }
    }

    #[test]
    fn sda_requires_enough_labeled_trials() {
        let (source, target) = synth_generate(&tiny_spec()).unwrap();
        let config = TrainConfig {
            n_labeled: 1, // fewer than classes
            ..tiny_config(Scenario::Sda)
        };
        assert!(prepare_domains(&config, &source, &target).is_err());
    }

    // -- training loop ------------------------------------------------------------

    #[test]
    fn training_is_seed_deterministic() {
        let (source, target) = synth_generate(&tiny_spec()).unwrap();
        let config = tiny_config(Scenario::Uda);
        let a = train_sdda(&config, &source, &target).unwrap();
        let b = train_sdda(&config, &source, &target).unwrap();
        assert_eq!(a.student.params(), b.student.params());
        assert_eq!(a.teacher.params(), b.teacher.params());
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn teacher_is_unaffected_by_student_weights() {
        let (source, target) = synth_generate(&tiny_spec()).unwrap();
        let base = tiny_config(Scenario::Uda);
        let with_sd = TrainConfig {
            weights: LossWeights {
                alpha: 1.0,
                beta: 1.0,
                gamma: 1.0,
                ..LossWeights::default()
            },
            ..base.clone()
        };
        let without = TrainConfig {
            weights: LossWeights {
                alpha: 0.0,
                beta: 0.0,
                gamma: 0.0,
                ..LossWeights::default()
            },
            ..base
        };
        let a = train_sdda(&with_sd, &source, &target).unwrap();
        let b = train_sdda(&without, &source, &target).unwrap();
        assert_eq!(a.teacher.params(), b.teacher.params());
        assert_ne!(a.student.params(), b.student.params());
    }

    #[test]
    fn teacher_gradients_vanish_when_its_ce_is_zeroed() {
        let (source, target) = synth_generate(&tiny_spec()).unwrap();
        let config = tiny_config(Scenario::Uda);
        let prepared = prepare_domains(&config, &source, &target).unwrap();
        let arch = ArchConfig::for_sampling_rate(prepared.sampling_rate);
        let teacher: Network<f32> =
            build_network(prepared.source_channels, prepared.samples, 2, &arch, 1).unwrap();
        let idx: Vec<usize> = (0..prepared.teacher_source.len()).collect();
        let (batch, raw) = assemble_batch(&prepared.teacher_source, &idx);
        let labels = unwrap_labels(&raw).unwrap();
        let mut g: Graph<f32> = Graph::new();
        let input = g.constant(batch);
        let wired = teacher.wire(&mut g, input, Mode::Train, 3).unwrap();
        let ce = cross_entropy(&mut g, wired.logits, &labels).unwrap();
        let zeroed = g.scalar_mul(ce, 0.0);
        g.forward(zeroed, &teacher.bindings()).unwrap();
        let grads = g.backward(zeroed).unwrap();
        for (name, grad) in grads {
            assert!(
                grad.data().iter().all(|&v| v == 0.0),
                "teacher grad for {name} is not exactly zero"
            );
        }
    }

    #[test]
    fn history_reports_unweighted_components_in_ce_ablation() {
        let (source, target) = synth_generate(&tiny_spec()).unwrap();
        let config = TrainConfig {
            weights: LossWeights {
                alpha: 0.0,
                beta: 0.0,
                gamma: 0.0,
                ..LossWeights::default()
            },
            ..tiny_config(Scenario::Uda)
        };
        let out = train_sdda(&config, &source, &target).unwrap();
        assert_eq!(out.history.epochs.len(), config.epochs);
        for rec in &out.history.epochs {
            assert!(rec.sd > 0.0, "distillation term should be reported");
            assert!(rec.cl > 0.0, "confusion term should be reported");
            assert!(rec.ma.is_finite());
            // with zero trade-off weights the total is the source CE alone
            assert_eq!(rec.student_total, rec.ce_source);
            assert!(rec.metric.is_finite());
        }
    }

    #[test]
    fn doubling_alpha_doubles_sd_contribution_on_frozen_batch() {
        let (source, target) = synth_generate(&tiny_spec()).unwrap();
        let config = tiny_config(Scenario::Uda);
        let prepared = prepare_domains(&config, &source, &target).unwrap();
        let arch = ArchConfig::for_sampling_rate(prepared.sampling_rate);
        let teacher: Network<f32> =
            build_network(prepared.source_channels, prepared.samples, 2, &arch, 1).unwrap();
        let student: Network<f32> =
            build_network(prepared.common_channels, prepared.samples, 2, &arch, 2).unwrap();
        let idx: Vec<usize> = (0..4).collect();
        let (tbatch, raw) = assemble_batch(&prepared.teacher_source, &idx);
        let labels = unwrap_labels(&raw).unwrap();
        let teacher_logits = teacher.forward_logits(&tbatch, Mode::Eval, 0).unwrap();
        let (sbatch, _) = assemble_batch(&prepared.student_source, &idx);
        let (gbatch, _) = assemble_batch(&prepared.student_target, &idx);

        let total_for = |alpha: f64| -> f64 {
            let weights = LossWeights {
                alpha,
                beta: 0.0,
                gamma: 0.0,
                ..LossWeights::default()
            };
            let mut g: Graph<f32> = Graph::new();
            let src = g.constant(sbatch.clone());
            let tgt = g.constant(gbatch.clone());
            let ws = student.wire(&mut g, src, Mode::Eval, 0).unwrap();
            let wt = student.wire(&mut g, tgt, Mode::Eval, 0).unwrap();
            let ce = cross_entropy(&mut g, ws.logits, &labels).unwrap();
            let sd = losses::sd_loss(&mut g, ws.logits, &teacher_logits, 2.0).unwrap();
            let ma =
                losses::mk_mmd(&mut g, ws.features, wt.features, &KernelSpec::single(1.0).unwrap())
                    .unwrap();
            let cl = losses::confusion_loss(&mut g, wt.logits, 2.0).unwrap();
            let total = losses::student_loss_uda(&mut g, ce, sd, ma, cl, &weights).unwrap();
            g.forward(total, &student.bindings()).unwrap().scalar_value() as f64
        };
        let base = total_for(0.0);
        let one = total_for(1.0);
        let two = total_for(2.0);
        let contribution_one = one - base;
        let contribution_two = two - base;
        assert!(
            (contribution_two - 2.0 * contribution_one).abs() < 1e-6 * contribution_one.abs().max(1.0),
            "sd contribution not linear: {contribution_one} vs {contribution_two}"
        );
    }

    #[test]
    fn sda_training_runs_and_evaluates_held_out() {
        let (source, target) = synth_generate(&tiny_spec()).unwrap();
        let config = tiny_config(Scenario::Sda);
        let out = train_sdda(&config, &source, &target).unwrap();
        assert_eq!(out.eval_stream.len(), target.n_trials() - config.n_labeled);
        assert_eq!(out.history.epochs.len(), config.epochs);
    }

    #[test]
    fn predict_matches_manual_forward_argmax() {
        let (source, target) = synth_generate(&tiny_spec()).unwrap();
        let config = tiny_config(Scenario::Uda);
        let out = train_sdda(&config, &source, &target).unwrap();
        let session = &target.sessions()[0];
        let pred = predict(&out.student, session, EaPolicy::Joint).unwrap();
        // oracle: align, forward, argmax by hand
        let aligned = euclidean_align_session(session).unwrap();
        let mut stream = Stream::new();
        stream.push_session(&aligned);
        let idx: Vec<usize> = (0..stream.len()).collect();
        let (batch, _) = assemble_batch(&stream, &idx);
        let logits = out.student.forward_logits(&batch, Mode::Eval, 0).unwrap();
        let c = logits.shape()[1];
        for (i, &label) in pred.labels.iter().enumerate() {
            let row = &logits.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            assert_eq!(label as usize, best, "trial {i}");
        }
        // determinism
        let again = predict(&out.student, session, EaPolicy::Joint).unwrap();
        assert_eq!(pred.labels, again.labels);
        assert_eq!(pred.scores, again.scores);
    }

    #[test]
    fn predict_ties_break_to_lowest_index() {
        let arch = ArchConfig {
            kernel_length: 16,
            separable_length: 8,
            ..ArchConfig::default()
        };
        let mut net: Network<f32> = build_network(2, 64, 3, &arch, 1).unwrap();
        *net.params_mut().get_mut("dense.w").unwrap() =
            Tensor::zeros(&[net.feature_dim(), 3]);
        *net.params_mut().get_mut("dense.b").unwrap() = Tensor::zeros(&[1, 3]);
        let trials = vec![crate::data::Trial::new(
            Tensor::<f64>::filled(&[2, 64], 0.3),
            None,
        )
        .unwrap()];
        let session = Session::new(
            trials,
            vec!["CH1".into(), "CH2".into()],
            128,
        )
        .unwrap();
        let pred = predict(&net, &session, EaPolicy::Joint).unwrap();
        assert_eq!(pred.labels, vec![0]);
        for &s in pred.scores.data() {
            assert!((s - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nan_parameters_abort_with_context() {
        let (source, target) = synth_generate(&tiny_spec()).unwrap();
        let mut config = tiny_config(Scenario::Uda);
        config.learning_rate = f64::NAN;
        let err = train_sdda(&config, &source, &target);
        assert!(err.is_err());
    }
}
