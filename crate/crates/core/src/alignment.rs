//! Session-wise Euclidean alignment and channel-subset extraction.
//!
//! Each session is whitened by the inverse square root of its mean trial
//! covariance, which drives the mean covariance of the aligned trials to
//! the identity. Channel subsetting selects rows by name; the training
//! pipeline always subsets *before* aligning the student stream.

use crate::data::Trial;
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{math, Tensor};

/// Relative ridge added to the mean covariance. Scales with the trace so
/// alignment is invariant to a global rescaling of the session.
pub const COV_EPSILON: f64 = 1e-6;

/// One recording session: trials sharing a channel layout and length.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    trials: Vec<Trial>,
    channel_names: Vec<String>,
    sampling_rate: u32,
}

impl Session {
    pub fn new(trials: Vec<Trial>, channel_names: Vec<String>, sampling_rate: u32) -> Result<Self> {
        for (i, name) in channel_names.iter().enumerate() {
            if channel_names[..i].contains(name) {
                return Err(Error::Data(format!("duplicate channel name '{name}'")));
            }
        }
        let c = channel_names.len();
        let mut samples = None;
        for (i, t) in trials.iter().enumerate() {
            let (tc, tt) = t.dims();
            if tc != c {
                return Err(Error::Data(format!(
                    "trial {i} has {tc} channels, session declares {c}"
                )));
            }
            match samples {
                None => samples = Some(tt),
                Some(s) if s != tt => {
                    return Err(Error::Data(format!(
                        "trial {i} has {tt} samples, previous trials have {s}"
                    )))
                }
                _ => {}
            }
        }
        Ok(Session {
            trials,
            channel_names,
            sampling_rate,
        })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn sampling_rate(&self) -> u32 {
        self.sampling_rate
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn n_trials(&self) -> usize {
        self.trials.len()
    }
}

/// Symmetric positive-definite session reference (regularized mean
/// covariance).
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceMatrix {
    dim: usize,
    matrix: Vec<f64>,
}

impl ReferenceMatrix {
    /// Wrap an explicit matrix; must be symmetric within 1e-10 relative.
    pub fn new(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::InvalidArgument(format!(
                "reference matrix buffer has {} entries for dim {dim}",
                matrix.len()
            )));
        }
        let scale = matrix
            .iter()
            .fold(0.0_f64, |m, &v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        for i in 0..dim {
            for j in (i + 1)..dim {
                if (matrix[i * dim + j] - matrix[j * dim + i]).abs() > 1e-10 * scale {
                    return Err(Error::Numerical(format!(
                        "reference matrix is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(ReferenceMatrix { dim, matrix })
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = 1.0;
        }
        ReferenceMatrix { dim, matrix: m }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
}

/// Regularized mean trial covariance `(1/n)·Σ XᵢXᵢᵀ + ε·(tr/C)·I` of a
/// session.
pub fn mean_covariance(session: &Session) -> Result<ReferenceMatrix> {
    let n = session.n_trials();
    if n == 0 {
        return Err(Error::Data(
            "mean_covariance: session has no trials".into(),
        ));
    }
    let c = session.n_channels();
    let mut acc = vec![0.0; c * c];
    for (i, trial) in session.trials.iter().enumerate() {
        if !trial.matrix().all_finite() {
            return Err(Error::Numerical(format!(
                "mean_covariance: trial {i} contains non-finite values"
            )));
        }
        let x = trial.matrix();
        let t = x.shape()[1];
        for r in 0..c {
            let row_r = &x.data()[r * t..(r + 1) * t];
            for s in r..c {
                let row_s = &x.data()[s * t..(s + 1) * t];
                let mut dot = 0.0;
                for (&a, &b) in row_r.iter().zip(row_s) {
                    dot += a * b;
                }
                acc[r * c + s] += dot;
            }
        }
    }
    // symmetrize (the upper triangle was accumulated) and average
    let inv_n = 1.0 / n as f64;
    let mut m = vec![0.0; c * c];
    for r in 0..c {
        for s in r..c {
            let v = acc[r * c + s] * inv_n;
            m[r * c + s] = v;
            m[s * c + r] = v;
        }
    }
    let trace: f64 = (0..c).map(|i| m[i * c + i]).sum();
    let ridge = COV_EPSILON * trace / c as f64;
    for i in 0..c {
        m[i * c + i] += ridge;
    }
    ReferenceMatrix::new(c, m)
}

/// Inverse symmetric square root of a reference matrix, as a C×C tensor.
pub fn inv_sqrt_sym(reference: &ReferenceMatrix) -> Result<Tensor<f64>> {
    let m = linalg::inv_sqrt_spd(reference.matrix(), reference.dim())?;
    Tensor::new(vec![reference.dim(), reference.dim()], m)
}

/// Whiten every trial of a session with the session's own reference.
pub fn euclidean_align_session(session: &Session) -> Result<Session> {
    let reference = mean_covariance(session)?;
    let m = inv_sqrt_sym(&reference)?;
    let trials = session
        .trials
        .iter()
        .map(|t| {
            let aligned = math::matmul(&m, t.matrix())?;
            Ok(Trial::new(aligned, t.label())?)
        })
        .collect::<Result<Vec<_>>>()?;
    Session::new(
        trials,
        session.channel_names.clone(),
        session.sampling_rate,
    )
}

/// Row-select a session down to `keep` (order defines the output rows).
pub fn subset_channels(session: &Session, keep: &[String]) -> Result<Session> {
    if keep.is_empty() {
        return Err(Error::InvalidArgument(
            "subset_channels: keep list is empty".into(),
        ));
    }
    let mut rows = Vec::with_capacity(keep.len());
    for name in keep {
        match session.channel_names.iter().position(|c| c == name) {
            Some(i) => rows.push(i),
            None => {
                return Err(Error::Data(format!(
                    "subset_channels: unknown channel name '{name}'"
                )))
            }
        }
    }
    let trials = session
        .trials
        .iter()
        .map(|t| {
            let x = t.matrix();
            let samples = x.shape()[1];
            let mut data = Vec::with_capacity(rows.len() * samples);
            for &r in &rows {
                data.extend_from_slice(&x.data()[r * samples..(r + 1) * samples]);
            }
            Trial::new(Tensor::new(vec![rows.len(), samples], data)?, t.label())
        })
        .collect::<Result<Vec<_>>>()?;
    Session::new(trials, keep.to_vec(), session.sampling_rate)
}

/// Apply a frozen reference to a single unseen trial: `R̄^{-1/2}·X`.
pub fn align_for_inference(reference: &ReferenceMatrix, trial: &Trial) -> Result<Trial> {
    let (c, _) = trial.dims();
    if c != reference.dim() {
        return Err(Error::Data(format!(
            "align_for_inference: reference is {}x{} but trial has {c} channels",
            reference.dim(),
            reference.dim()
        )));
    }
    let m = inv_sqrt_sym(reference)?;
    Trial::new(math::matmul(&m, trial.matrix())?, trial.label())
}
