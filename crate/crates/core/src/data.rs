//! Dataset containers, the binary dataset format, the synthetic two-domain
//! generator, and seeded batching.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::Session;
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;
use crate::util::mix_seed;

/// One trial: a channels×samples matrix with an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    matrix: Tensor<f64>,
    label: Option<u16>,
}

impl Trial {
    pub fn new(matrix: Tensor<f64>, label: Option<u16>) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::Data(format!(
                "trial matrix must be 2-D channels x samples, got shape {:?}",
                matrix.shape()
            )));
        }
        Ok(Trial { matrix, label })
    }

    pub fn matrix(&self) -> &Tensor<f64> {
        &self.matrix
    }

    pub fn label(&self) -> Option<u16> {
        self.label
    }

    /// (channels, samples)
    pub fn dims(&self) -> (usize, usize) {
        (self.matrix.shape()[0], self.matrix.shape()[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Source,
    Target,
}

/// Session-grouped dataset for one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    sessions: Vec<Session>,
    role: DomainRole,
    classes: u16,
}

impl Domain {
    pub fn new(sessions: Vec<Session>, role: DomainRole, classes: u16) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Data(format!(
                "domain needs at least 2 classes, got {classes}"
            )));
        }
        if sessions.is_empty() {
            return Err(Error::Data("domain has no sessions".into()));
        }
        let names = sessions[0].channel_names().to_vec();
        for (i, s) in sessions.iter().enumerate() {
            if s.channel_names() != names.as_slice() {
                return Err(Error::Data(format!(
                    "session {i} channel names differ from session 0"
                )));
            }
            for (j, t) in s.trials().iter().enumerate() {
                if let Some(l) = t.label() {
                    if l >= classes {
                        return Err(Error::Data(format!(
                            "session {i} trial {j} has label {l} >= classes {classes}"
                        )));
                    }
                }
            }
        }
        Ok(Domain {
            sessions,
            role,
            classes,
        })
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn role(&self) -> DomainRole {
        self.role
    }

    pub fn with_role(mut self, role: DomainRole) -> Self {
        self.role = role;
        self
    }

    pub fn classes(&self) -> u16 {
        self.classes
    }

    pub fn channel_names(&self) -> &[String] {
        self.sessions[0].channel_names()
    }

    pub fn n_trials(&self) -> usize {
        self.sessions.iter().map(|s| s.n_trials()).sum()
    }

    /// Trials of every session, in session order.
    pub fn all_trials(&self) -> impl Iterator<Item = &Trial> {
        self.sessions.iter().flat_map(|s| s.trials().iter())
    }
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

/// Parameters for the synthetic two-domain generator.
///
/// Per class, a fixed spatial pattern mixes a class-specific oscillation
/// into Gaussian noise. Sessions multiply their trials by a random SPD
/// jitter; the target domain keeps only the first `common_channels`
/// generative rows and applies an extra in-plane rotation of angle
/// `domain_shift` radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub source_channels: usize,
    pub common_channels: usize,
    pub samples: usize,
    pub classes: usize,
    /// Trials per class in each session (majority class when imbalanced).
    pub trials_per_class: usize,
    pub sessions_per_domain: usize,
    /// Signal-to-noise amplitude ratio; the noise scale is `1/snr`.
    pub snr: f64,
    /// Log-scale of the per-session SPD covariance jitter.
    pub session_jitter: f64,
    /// Rotation angle (radians) applied to target-domain trials.
    pub domain_shift: f64,
    /// Majority:minority trial count ratio (1 = balanced).
    pub class_imbalance: f64,
    pub sampling_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            source_channels: 8,
            common_channels: 3,
            samples: 256,
            classes: 2,
            trials_per_class: 16,
            sessions_per_domain: 2,
            snr: 1.0,
            session_jitter: 0.15,
            domain_shift: 0.7,
            class_imbalance: 1.0,
            sampling_rate: 128,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.common_channels == 0 || self.common_channels > self.source_channels {
            return Err(Error::InvalidArgument(format!(
                "common_channels must be in 1..=source_channels, got {} of {}",
                self.common_channels, self.source_channels
            )));
        }
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "classes must be in 2..=65535, got {}",
                self.classes
            )));
        }
        if !(self.snr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "snr must be positive, got {}",
                self.snr
            )));
        }
        if self.class_imbalance < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "class_imbalance must be >= 1, got {}",
                self.class_imbalance
            )));
        }
        if self.samples == 0 || self.trials_per_class == 0 || self.sessions_per_domain == 0 {
            return Err(Error::InvalidArgument(
                "samples, trials_per_class and sessions_per_domain must be positive".into(),
            ));
        }
        if self.session_jitter < 0.0 || self.domain_shift < 0.0 {
            return Err(Error::InvalidArgument(
                "session_jitter and domain_shift must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Trial count for `class` in one session (class 0 is the majority).
    fn class_count(&self, class: usize) -> usize {
        if class == 0 {
            self.trials_per_class
        } else {
            ((self.trials_per_class as f64 / self.class_imbalance).round() as usize).max(1)
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Random SPD matrix `exp(jitter·S)` with `S` symmetric Gaussian.
fn session_mix(rng: &mut ChaCha8Rng, c: usize, jitter: f64) -> Vec<f64> {
    let mut s = vec![0.0; c * c];
    let norm = 1.0 / (c as f64).sqrt();
    for i in 0..c {
        for j in 0..=i {
            let v = gauss(rng) * norm;
            s[i * c + j] = v;
            s[j * c + i] = v;
        }
    }
    let eig = linalg::sym_eigen(&s, c).expect("random symmetric matrix");
    let mut out = vec![0.0; c * c];
    for (k, vec_k) in eig.vectors.iter().enumerate() {
        let w = (jitter * eig.values[k]).exp();
        for r in 0..c {
            let vr = vec_k[r] * w;
            for col in 0..c {
                out[r * c + col] += vr * vec_k[col];
            }
        }
    }
    out
}

/// Rotation by `angle` in a random plane of R^c. Identity when c == 1.
fn plane_rotation(rng: &mut ChaCha8Rng, c: usize, angle: f64) -> Vec<f64> {
    let mut r = vec![0.0; c * c];
    for i in 0..c {
        r[i * c + i] = 1.0;
    }
    if c < 2 || angle == 0.0 {
        return r;
    }
    // orthonormal plane (u, v) by Gram-Schmidt on Gaussian draws
    let mut u: Vec<f64> = (0..c).map(|_| gauss(rng)).collect();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut u {
        *x /= nu;
    }
    let mut v: Vec<f64> = (0..c).map(|_| gauss(rng)).collect();
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    for (x, &ui) in v.iter_mut().zip(&u) {
        *x -= dot * ui;
    }
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= nv;
    }
    let (cos, sin) = (angle.cos(), angle.sin());
    for i in 0..c {
        for j in 0..c {
            r[i * c + j] += (cos - 1.0) * (u[i] * u[j] + v[i] * v[j])
                + sin * (u[i] * v[j] - v[i] * u[j]);
        }
    }
    r
}

struct ClassModel {
    /// Spatial pattern over all source channels, per class.
    patterns: Vec<Vec<f64>>,
    /// Oscillation frequency per class (Hz).
    freqs: Vec<f64>,
}

fn class_model(spec: &SynthSpec) -> ClassModel {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0xC1A5]));
    let cs = spec.source_channels;
    let ct = spec.common_channels;
    let mut patterns = Vec::with_capacity(spec.classes);
    for class in 0..spec.classes {
        // anchor on a common channel so the student path stays learnable,
        // with the bulk of the remaining energy on the extra channels the
        // teacher sees
        let mut w = vec![0.0; cs];
        w[class % ct] = 1.0;
        for (i, x) in w.iter_mut().enumerate() {
            let scale = if i < ct { 0.25 } else { 0.9 };
            *x += scale * gauss(&mut rng);
        }
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut w {
            *x /= n;
        }
        patterns.push(w);
    }
    let freqs = (0..spec.classes)
        .map(|c| 6.0 + 7.0 * c as f64 + rng.gen_range(-0.5..0.5))
        .collect();
    ClassModel { patterns, freqs }
}

/// Deterministically generate a (source, target) domain pair.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Domain, Domain)> {
    spec.validate()?;
    let model = class_model(spec);
    let source = synth_domain(spec, &model, DomainRole::Source)?;
    let target = synth_domain(spec, &model, DomainRole::Target)?;
    Ok((source, target))
}

fn synth_domain(spec: &SynthSpec, model: &ClassModel, role: DomainRole) -> Result<Domain> {
    let domain_tag = match role {
        DomainRole::Source => 1u64,
        DomainRole::Target => 2u64,
    };
    let c_out = match role {
        DomainRole::Source => spec.source_channels,
        DomainRole::Target => spec.common_channels,
    };
    let rotation = match role {
        DomainRole::Source => None,
        DomainRole::Target => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0x5217]));
            Some(plane_rotation(&mut rng, c_out, spec.domain_shift))
        }
    };
    let names: Vec<String> = (1..=c_out).map(|i| format!("CH{i}")).collect();
    let noise_scale = 1.0 / spec.snr;
    let t = spec.samples;
    let sr = spec.sampling_rate as f64;

    let mut sessions = Vec::with_capacity(spec.sessions_per_domain);
    for session_idx in 0..spec.sessions_per_domain {
        let mut srng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            spec.seed,
            domain_tag,
            session_idx as u64,
            0x5E55,
        ]));
        let mix = session_mix(&mut srng, c_out, spec.session_jitter);
        let mut trials = Vec::new();
        for class in 0..spec.classes {
            for trial_idx in 0..spec.class_count(class) {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                    spec.seed,
                    domain_tag,
                    session_idx as u64,
                    class as u64,
                    trial_idx as u64,
                ]));
                let phase = rng.gen_range(0.0..1.0) * sr;
                let amp = rng.gen_range(0.8..1.2);
                let freq = model.freqs[class];
                let wave: Vec<f64> = (0..t)
                    .map(|s| {
                        amp * (2.0 * std::f64::consts::PI * freq * (s as f64 + phase) / sr).sin()
                    })
                    .collect();
                // full-channel signal + noise, then keep the first c_out rows
                let pattern = &model.patterns[class];
                let mut x = vec![0.0; c_out * t];
                for r in 0..c_out {
                    let w = pattern[r];
                    let row = &mut x[r * t..(r + 1) * t];
                    for (o, &s) in row.iter_mut().zip(&wave) {
                        *o = w * s + noise_scale * gauss(&mut rng);
                    }
                }
                // session jitter, then the target-domain rotation
                let mut mixed = apply_sq(&mix, &x, c_out, t);
                if let Some(rot) = &rotation {
                    mixed = apply_sq(rot, &mixed, c_out, t);
                }
                // keep stored values exactly f32-representable so the binary
                // format round-trips bit-exactly
                for v in &mut mixed {
                    *v = *v as f32 as f64;
                }
                trials.push(Trial::new(
                    Tensor::new(vec![c_out, t], mixed)?,
                    Some(class as u16),
                )?);
            }
        }
        // interleave the classes so any prefix of the session (e.g. an
        // online calibration window) sees a label mix
        let order = batch_indices(
            trials.len(),
            trials.len(),
            mix_seed(&[spec.seed, domain_tag, session_idx as u64, 0x0DD5]),
            false,
        )
        .pop()
        .expect("session is non-empty");
        let trials: Vec<Trial> = order.into_iter().map(|i| trials[i].clone()).collect();
        sessions.push(Session::new(trials, names.clone(), spec.sampling_rate)?);
    }
    Domain::new(sessions, role, spec.classes as u16)
}

/// y = M·x for M: c×c and x: c×t.
fn apply_sq(m: &[f64], x: &[f64], c: usize, t: usize) -> Vec<f64> {
    let mut y = vec![0.0; c * t];
    for i in 0..c {
        for k in 0..c {
            let mik = m[i * c + k];
            let src = &x[k * t..(k + 1) * t];
            let dst = &mut y[i * t..(i + 1) * t];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += mik * v;
            }
        }
    }
    y
}

// ---------------------------------------------------------------------------
// binary dataset format
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"SDDA";
const FORMAT_VERSION: u16 = 1;

/// Serialize a domain.
///
/// Layout (all integers little-endian): magic `"SDDA"`, u16 version=1,
/// u16 classes, u32 n_sessions; per session: u32 n_trials, u16 channels,
/// u32 samples, u32 sampling-rate, then per channel a u16 length-prefixed
/// UTF-8 name; per trial: u8 has-label, u16 label, then channels·samples
/// f32 values, channel-major. The domain role is runtime metadata and is
/// not stored.
pub fn save_dataset(domain: &Domain, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&domain.classes.to_le_bytes());
    buf.extend_from_slice(&(domain.sessions.len() as u32).to_le_bytes());
    for session in &domain.sessions {
        buf.extend_from_slice(&(session.n_trials() as u32).to_le_bytes());
        buf.extend_from_slice(&(session.n_channels() as u16).to_le_bytes());
        let samples = session
            .trials()
            .first()
            .map(|t| t.dims().1)
            .unwrap_or(0) as u32;
        buf.extend_from_slice(&samples.to_le_bytes());
        buf.extend_from_slice(&session.sampling_rate().to_le_bytes());
        for name in session.channel_names() {
            let bytes = name.as_bytes();
            if bytes.len() > u16::MAX as usize {
                return Err(Error::Data(format!("channel name too long: {name}")));
            }
            buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(bytes);
        }
        for trial in session.trials() {
            buf.push(u8::from(trial.label().is_some()));
            buf.extend_from_slice(&trial.label().unwrap_or(0).to_le_bytes());
            for &v in trial.matrix().data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data(format!(
                "truncated dataset: needed {n} bytes for {what} at byte offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parse a dataset file; `role` is supplied by the caller because the format
/// stores no role byte.
pub fn load_dataset(path: &Path, role: DomainRole) -> Result<Domain> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader {
        buf: &bytes,
        pos: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Data(format!(
            "bad magic {magic:?} at byte offset 0, expected \"SDDA\""
        )));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported dataset version {version} at byte offset 4"
        )));
    }
    let classes = r.u16("classes")?;
    let n_sessions = r.u32("session count")?;
    let mut sessions = Vec::with_capacity(n_sessions as usize);
    for _ in 0..n_sessions {
        let n_trials = r.u32("trial count")?;
        let channels = r.u16("channel count")? as usize;
        let samples = r.u32("sample count")? as usize;
        let sampling_rate = r.u32("sampling rate")?;
        let mut names = Vec::with_capacity(channels);
        for _ in 0..channels {
            let len = r.u16("channel name length")? as usize;
            let at = r.pos;
            let raw = r.take(len, "channel name")?;
            let name = std::str::from_utf8(raw).map_err(|_| {
                Error::Data(format!("channel name is not UTF-8 at byte offset {at}"))
            })?;
            names.push(name.to_string());
        }
        let mut trials = Vec::with_capacity(n_trials as usize);
        for _ in 0..n_trials {
            let has_label = r.u8("label flag")?;
            let label = r.u16("label")?;
            let mut data = Vec::with_capacity(channels * samples);
            for _ in 0..channels * samples {
                data.push(r.f32("trial data")? as f64);
            }
            trials.push(Trial::new(
                Tensor::new(vec![channels, samples], data)?,
                (has_label != 0).then_some(label),
            )?);
        }
        sessions.push(Session::new(trials, names, sampling_rate)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "trailing bytes after dataset at byte offset {}",
            r.pos
        )));
    }
    Domain::new(sessions, role, classes)
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

/// Seeded shuffled batch index lists; every index appears exactly once
/// (minus the remainder when `drop_last` is set).
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, drop_last: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut out: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .map(|chunk| chunk.to_vec())
        .collect();
    if drop_last {
        out.retain(|b| b.len() == batch_size);
    }
    out
}

/// Batches of trial references in seeded shuffled order.
pub fn batch_iterator<'a>(
    trials: &'a [Trial],
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> impl Iterator<Item = Vec<&'a Trial>> {
    batch_indices(trials.len(), batch_size, seed, drop_last)
        .into_iter()
        .map(move |idx| idx.into_iter().map(|i| &trials[i]).collect())
}

// ---------------------------------------------------------------------------
// CSV import/export
// ---------------------------------------------------------------------------

/// Manifest for [`import_csv`]: channel names, classes, sampling rate, and
/// one entry per trial CSV file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvManifest {
    pub classes: u16,
    pub sampling_rate: u32,
    pub channels: Vec<String>,
    pub trials: Vec<CsvTrialEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvTrialEntry {
    pub file: String,
    pub session: u32,
    #[serde(default)]
    pub label: Option<u16>,
}

/// Build a domain from per-trial CSV files (rows = channels).
pub fn import_csv(dir: &Path, manifest: &CsvManifest, role: DomainRole) -> Result<Domain> {
    let c = manifest.channels.len();
    if c == 0 {
        return Err(Error::Data("manifest lists no channels".into()));
    }
    let mut session_ids: Vec<u32> = manifest.trials.iter().map(|t| t.session).collect();
    session_ids.sort_unstable();
    session_ids.dedup();
    let mut sessions = Vec::new();
    for sid in session_ids {
        let mut trials = Vec::new();
        let mut samples: Option<usize> = None;
        for entry in manifest.trials.iter().filter(|t| t.session == sid) {
            let path = dir.join(&entry.file);
            let mut text = String::new();
            fs::File::open(&path)
                .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?
                .read_to_string(&mut text)?;
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let row = line
                    .split(',')
                    .map(|tok| {
                        tok.trim().parse::<f64>().map_err(|_| {
                            Error::Data(format!(
                                "{}:{}: cannot parse '{}' as a number",
                                entry.file,
                                lineno + 1,
                                tok.trim()
                            ))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                rows.push(row);
            }
            if rows.len() != c {
                return Err(Error::Data(format!(
                    "{}: has {} channel rows, manifest declares {c}",
                    entry.file,
                    rows.len()
                )));
            }
            let t = rows[0].len();
            if rows.iter().any(|r| r.len() != t) {
                return Err(Error::Data(format!("{}: ragged row lengths", entry.file)));
            }
            match samples {
                None => samples = Some(t),
                Some(s) if s != t => {
                    return Err(Error::Data(format!(
                        "{}: has {t} samples, session {sid} started with {s}",
                        entry.file
                    )))
                }
                _ => {}
            }
            trials.push(Trial::new(Tensor::from_rows(&rows)?, entry.label)?);
        }
        sessions.push(Session::new(
            trials,
            manifest.channels.clone(),
            manifest.sampling_rate,
        )?);
    }
    Domain::new(sessions, role, manifest.classes)
}

/// Re-export a domain as CSV files plus a manifest (testing aid and escape
/// hatch for external tools).
pub fn export_csv(domain: &Domain, dir: &Path) -> Result<CsvManifest> {
    fs::create_dir_all(dir)?;
    let mut manifest = CsvManifest {
        classes: domain.classes(),
        sampling_rate: domain.sessions()[0].sampling_rate(),
        channels: domain.channel_names().to_vec(),
        trials: Vec::new(),
    };
    for (sid, session) in domain.sessions().iter().enumerate() {
        for (tid, trial) in session.trials().iter().enumerate() {
            let file = format!("s{sid}_t{tid}.csv");
            let mut out = fs::File::create(dir.join(&file))?;
            let (c, t) = trial.dims();
            for r in 0..c {
                let row: Vec<String> = (0..t)
                    .map(|s| format!("{}", trial.matrix().data()[r * t + s]))
                    .collect();
                writeln!(out, "{}", row.join(","))?;
            }
            manifest.trials.push(CsvTrialEntry {
                file,
                session: sid as u32,
                label: trial.label(),
            });
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn synth_is_seed_deterministic() {
        let spec = SynthSpec {
            trials_per_class: 3,
            samples: 32,
            ..SynthSpec::default()
        };
        let (s1, t1) = synth_generate(&spec).unwrap();
        let (s2, t2) = synth_generate(&spec).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        let other = SynthSpec { seed: 43, ..spec };
        let (s3, _) = synth_generate(&other).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn synth_target_names_are_prefix_of_source() {
        let spec = SynthSpec {
            trials_per_class: 2,
            samples: 16,
            ..SynthSpec::default()
        };
        let (source, target) = synth_generate(&spec).unwrap();
        assert_eq!(
            target.channel_names(),
            &source.channel_names()[..spec.common_channels]
        );
        assert_eq!(target.role(), DomainRole::Target);
    }

    #[test]
    fn synth_high_snr_trials_are_rank_one() {
        let spec = SynthSpec {
            snr: 1e9,
            trials_per_class: 2,
            samples: 64,
            session_jitter: 0.1,
            ..SynthSpec::default()
        };
        let (source, _) = synth_generate(&spec).unwrap();
        let trial = &source.sessions()[0].trials()[0];
        let (c, t) = trial.dims();
        // Gram matrix of a rank-1 trial has one dominant eigenvalue
        let x = trial.matrix();
        let mut gram = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                let mut dot = 0.0;
                for s in 0..t {
                    dot += x.data()[i * t + s] * x.data()[j * t + s];
                }
                gram[i * c + j] = dot;
            }
        }
        let eig = crate::linalg::sym_eigen(&gram, c).unwrap();
        let largest = eig.values[c - 1];
        let second = eig.values[c - 2].abs();
        assert!(second / largest < 1e-8, "second/largest {}", second / largest);
    }

    #[test]
    fn synth_imbalance_controls_counts() {
        let spec = SynthSpec {
            trials_per_class: 10,
            class_imbalance: 5.0,
            samples: 16,
            sessions_per_domain: 1,
            ..SynthSpec::default()
        };
        let (source, _) = synth_generate(&spec).unwrap();
        let mut counts = BTreeMap::new();
        for t in source.all_trials() {
            *counts.entry(t.label().unwrap()).or_insert(0usize) += 1;
        }
        assert_eq!(counts[&0], 10);
        assert_eq!(counts[&1], 2);
    }

    #[test]
    fn dataset_roundtrip_bit_exact() {
        let spec = SynthSpec {
            trials_per_class: 3,
            samples: 24,
            ..SynthSpec::default()
        };
        let (source, target) = synth_generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (name, domain) in [("s", &source), ("t", &target)] {
            let path = dir.path().join(format!("{name}.sdda"));
            save_dataset(domain, &path).unwrap();
            let loaded = load_dataset(&path, domain.role()).unwrap();
            assert_eq!(&loaded, domain);
        }
    }

    #[test]
    fn corrupted_magic_reports_offset_zero() {
        let spec = SynthSpec {
            trials_per_class: 1,
            samples: 8,
            sessions_per_domain: 1,
            ..SynthSpec::default()
        };
        let (source, _) = synth_generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.sdda");
        save_dataset(&source, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let err = load_dataset(&path, DomainRole::Source).unwrap_err();
        assert!(err.to_string().contains("magic"), "got: {err}");
    }

    #[test]
    fn truncated_file_reports_offset() {
        let spec = SynthSpec {
            trials_per_class: 1,
            samples: 8,
            sessions_per_domain: 1,
            ..SynthSpec::default()
        };
        let (source, _) = synth_generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.sdda");
        save_dataset(&source, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_dataset(&path, DomainRole::Source).unwrap_err();
        assert!(err.to_string().contains("byte offset"), "got: {err}");
    }

    #[test]
    fn batches_partition_the_index_set() {
        for (n, bs, drop_last) in [(10, 3, false), (10, 3, true), (4, 8, false), (6, 2, false)] {
            let batches = batch_indices(n, bs, 9, drop_last);
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            if drop_last {
                assert!(batches.iter().all(|b| b.len() == bs));
            } else {
                seen.sort_unstable();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
            }
            if bs >= n && !drop_last {
                assert_eq!(batches.len(), 1);
            }
        }
    }

    #[test]
    fn batches_are_seed_deterministic() {
        assert_eq!(batch_indices(20, 4, 7, false), batch_indices(20, 4, 7, false));
        assert_ne!(batch_indices(20, 4, 7, false), batch_indices(20, 4, 8, false));
    }

    #[test]
    fn csv_roundtrip_preserves_values() {
        let spec = SynthSpec {
            trials_per_class: 2,
            samples: 12,
            sessions_per_domain: 2,
            ..SynthSpec::default()
        };
        let (source, _) = synth_generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = export_csv(&source, dir.path()).unwrap();
        let back = import_csv(dir.path(), &manifest, DomainRole::Source).unwrap();
        assert_eq!(back.n_trials(), source.n_trials());
        for (a, b) in back.all_trials().zip(source.all_trials()) {
            assert_eq!(a.label(), b.label());
            for (&x, &y) in a.matrix().data().iter().zip(b.matrix().data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn csv_import_rejects_channel_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bad.csv"), "1.0,2.0\n3.0,4.0\n5.0,6.0\n").unwrap();
        let manifest = CsvManifest {
            classes: 2,
            sampling_rate: 128,
            channels: vec!["A".into(), "B".into()],
            trials: vec![CsvTrialEntry {
                file: "bad.csv".into(),
                session: 0,
                label: Some(0),
            }],
        };
        assert!(import_csv(dir.path(), &manifest, DomainRole::Source).is_err());
    }
}
