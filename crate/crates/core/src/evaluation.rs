//! Metrics, the experiment sweep, and the deterministic report.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{load_dataset, synth_generate, Domain, DomainRole};
use crate::error::{Error, Result};
use crate::report::{round9, JsonVal};
use crate::training::{train_sdda, EpochRecord, Scenario, TrainHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    Auc,
}

impl Default for MetricKind {
    fn default() -> Self {
        MetricKind::Accuracy
    }
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Auc => "auc",
        }
    }
}

/// Percentage of exact label matches.
pub fn accuracy(predicted: &[u16], truth: &[u16]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "accuracy: got {} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let correct = predicted
        .iter()
        .zip(truth)
        .filter(|(a, b)| a == b)
        .count();
    Ok(100.0 * correct as f64 / predicted.len() as f64)
}

/// Rank-based AUC (average ranks for ties): the probability that a random
/// positive outranks a random negative, with ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "auc: got {} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "auc: both classes must be present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("scores must not be NaN")
    });
    // average ranks over tied groups (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

// ---------------------------------------------------------------------------
// experiment sweep
// ---------------------------------------------------------------------------

/// Ablation variants toggling the three trade-off weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Ce,
    CeSd,
    CeMa,
    CeCl,
    CeMaCl,
    Sdda,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ce,
        Variant::CeSd,
        Variant::CeMa,
        Variant::CeCl,
        Variant::CeMaCl,
        Variant::Sdda,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Ce => "ce",
            Variant::CeSd => "ce_sd",
            Variant::CeMa => "ce_ma",
            Variant::CeCl => "ce_cl",
            Variant::CeMaCl => "ce_ma_cl",
            Variant::Sdda => "sdda",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant '{s}'; expected one of ce, ce_sd, ce_ma, ce_cl, ce_ma_cl, sdda"
                ))
            })
    }

    /// Multipliers over (alpha, beta, gamma).
    pub fn mask(&self) -> (f64, f64, f64) {
        match self {
            Variant::Ce => (0.0, 0.0, 0.0),
            Variant::CeSd => (1.0, 0.0, 0.0),
            Variant::CeMa => (0.0, 1.0, 0.0),
            Variant::CeCl => (0.0, 0.0, 1.0),
            Variant::CeMaCl => (0.0, 1.0, 1.0),
            Variant::Sdda => (1.0, 1.0, 1.0),
        }
    }
}

/// One (scenario, variant, seed) result.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub scenario: Scenario,
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub error: Option<String>,
    pub history: TrainHistory,
}

#[derive(Clone, Debug)]
pub struct Aggregate {
    pub scenario: Scenario,
    pub variant: Variant,
    pub n_seeds: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_auc: Option<f64>,
    pub std_auc: Option<f64>,
}

pub struct ExperimentReport {
    pub config: RunConfig,
    pub target_name: String,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
    /// Measured but never serialized into the canonical report, so
    /// identical runs stay byte-identical.
    pub wall_clock_seconds: f64,
}

fn scenario_name(s: Scenario) -> &'static str {
    match s {
        Scenario::Uda => "uda",
        Scenario::Sda => "sda",
    }
}

/// Evaluate one trained cell on its aligned evaluation stream.
fn cell_metrics(
    config: &crate::training::TrainConfig,
    source: &Domain,
    target: &Domain,
) -> Result<(Option<f64>, Option<f64>, TrainHistory)> {
    let out = train_sdda(config, source, target)?;
    let stream = &out.eval_stream;
    let truth: Vec<u16> = stream
        .labels
        .iter()
        .map(|l| l.ok_or_else(|| Error::Data("evaluation trial lacks a label".into())))
        .collect::<Result<Vec<u16>>>()?;
    let idx: Vec<usize> = (0..stream.len()).collect();
    let scores = {
        use crate::model::Mode;
        let (batch, _) = crate::training::assemble_eval_batch(stream, &idx);
        let logits = out.student.forward_logits(&batch, Mode::Eval, 0)?;
        crate::losses::tempered_softmax_tensor(&logits, 1.0)?
    };
    let classes = scores.shape()[1];
    let mut predicted = Vec::with_capacity(truth.len());
    for i in 0..truth.len() {
        let row: Vec<f64> = (0..classes)
            .map(|j| scores.at2(i, j) as f64)
            .collect();
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        predicted.push(best as u16);
    }
    let acc = accuracy(&predicted, &truth)?;
    let auc_value = if classes == 2 {
        let pos_scores: Vec<f64> = (0..truth.len()).map(|i| scores.at2(i, 1) as f64).collect();
        let binary: Vec<bool> = truth.iter().map(|&l| l == 1).collect();
        auc(&pos_scores, &binary).ok()
    } else {
        None
    };
    Ok((Some(acc), auc_value, out.history))
}

/// Run the full sweep: scenarios x variants x seeds, aggregate mean and
/// (sample) standard deviation per cell group, and write the canonical
/// report plus a timing sidecar under `out_dir`.
pub fn run_experiment(config: &RunConfig, out_dir: &Path) -> Result<ExperimentReport> {
    let started = Instant::now();
    config.validate()?;
    let (source, target, target_name) = resolve_datasets(config)?;

    let mut specs = Vec::new();
    for &scenario in &config.scenarios {
        for variant_name in &config.variants {
            let variant = Variant::parse(variant_name)?;
            for &seed in &config.seeds {
                specs.push((scenario, variant, seed));
            }
        }
    }

    let cells: Vec<CellResult> = specs
        .par_iter()
        .map(|&(scenario, variant, seed)| {
            let train_config = config.train_config(scenario, variant, seed);
            match cell_metrics(&train_config, &source, &target) {
                Ok((acc, auc_value, history)) => CellResult {
                    scenario,
                    variant,
                    seed,
                    accuracy: acc.map(round9),
                    auc: auc_value.map(round9),
                    error: None,
                    history,
                },
                Err(e) => CellResult {
                    scenario,
                    variant,
                    seed,
                    accuracy: None,
                    auc: None,
                    error: Some(e.to_string()),
                    history: TrainHistory::default(),
                },
            }
        })
        .collect();

    let mut aggregates = Vec::new();
    for &scenario in &config.scenarios {
        for variant_name in &config.variants {
            let variant = Variant::parse(variant_name)?;
            let group: Vec<&CellResult> = cells
                .iter()
                .filter(|c| {
                    c.scenario == scenario && c.variant == variant && c.error.is_none()
                })
                .collect();
            if group.is_empty() {
                continue;
            }
            let accs: Vec<f64> = group.iter().filter_map(|c| c.accuracy).collect();
            let aucs: Vec<f64> = group.iter().filter_map(|c| c.auc).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            let (mean_auc, std_auc) = if aucs.len() == group.len() && !aucs.is_empty() {
                let (m, s) = mean_std(&aucs);
                (Some(round9(m)), Some(round9(s)))
            } else {
                (None, None)
            };
            aggregates.push(Aggregate {
                scenario,
                variant,
                n_seeds: group.len(),
                mean_accuracy: round9(mean_acc),
                std_accuracy: round9(std_acc),
                mean_auc,
                std_auc,
            });
        }
    }

    let report = ExperimentReport {
        config: config.clone(),
        target_name,
        cells,
        aggregates,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.json"), report.to_canonical_json())?;
    fs::write(
        out_dir.join("timing.txt"),
        format!("wall_clock_seconds {:.3}\n", report.wall_clock_seconds),
    )?;
    Ok(report)
}

/// Parse a config file and run the sweep.
pub fn run_experiment_file(config_path: &Path, out_dir: &Path) -> Result<ExperimentReport> {
    let config = RunConfig::from_path(config_path)?;
    run_experiment(&config, out_dir)
}

fn resolve_datasets(config: &RunConfig) -> Result<(Domain, Domain, String)> {
    match (&config.synth, &config.data) {
        (Some(spec), None) => {
            let (source, target) = synth_generate(spec)?;
            Ok((source, target, "synthetic".to_string()))
        }
        (None, Some(paths)) => {
            let source = load_dataset(Path::new(&paths.source), DomainRole::Source)?;
            let target = load_dataset(Path::new(&paths.target), DomainRole::Target)?;
            let name = Path::new(&paths.target)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| paths.target.clone());
            Ok((source, target, name))
        }
        (Some(_), Some(_)) => Err(Error::Config(
            "config must set either [synth] or [data], not both".into(),
        )),
        (None, None) => Err(Error::Config(
            "config must set one of [synth] or [data]".into(),
        )),
    }
}

/// Mean and sample standard deviation (n-1 denominator; 0 when n = 1),
/// computed from values already rounded to the serialized precision.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Canonical JSON for a training history.
pub fn history_json(h: &TrainHistory) -> JsonVal {
    let field = |f: fn(&EpochRecord) -> f64| -> JsonVal {
        JsonVal::Arr(h.epochs.iter().map(|e| JsonVal::Num(f(e))).collect())
    };
    JsonVal::obj(vec![
        ("metric_name", JsonVal::Str(h.metric_name.clone())),
        ("teacher_ce", field(|e| e.teacher_ce)),
        ("ce_source", field(|e| e.ce_source)),
        ("ce_target", field(|e| e.ce_target)),
        ("sd", field(|e| e.sd)),
        ("ma", field(|e| e.ma)),
        ("cl", field(|e| e.cl)),
        ("student_total", field(|e| e.student_total)),
        ("metric", field(|e| e.metric)),
    ])
}

impl ExperimentReport {
    pub fn to_canonical_json(&self) -> String {
        let cells = JsonVal::Arr(
            self.cells
                .iter()
                .map(|c| {
                    JsonVal::obj(vec![
                        ("scenario", JsonVal::Str(scenario_name(c.scenario).into())),
                        ("variant", JsonVal::Str(c.variant.name().into())),
                        ("seed", JsonVal::UInt(c.seed)),
                        ("target", JsonVal::Str(self.target_name.clone())),
                        (
                            "accuracy",
                            c.accuracy.map(JsonVal::Num).unwrap_or(JsonVal::Null),
                        ),
                        ("auc", c.auc.map(JsonVal::Num).unwrap_or(JsonVal::Null)),
                        (
                            "error",
                            c.error
                                .clone()
                                .map(JsonVal::Str)
                                .unwrap_or(JsonVal::Null),
                        ),
                        ("history", history_json(&c.history)),
                    ])
                })
                .collect(),
        );
        let aggregates = JsonVal::Arr(
            self.aggregates
                .iter()
                .map(|a| {
                    JsonVal::obj(vec![
                        ("scenario", JsonVal::Str(scenario_name(a.scenario).into())),
                        ("variant", JsonVal::Str(a.variant.name().into())),
                        ("n_seeds", JsonVal::UInt(a.n_seeds as u64)),
                        ("mean_accuracy", JsonVal::Num(a.mean_accuracy)),
                        ("std_accuracy", JsonVal::Num(a.std_accuracy)),
                        (
                            "mean_auc",
                            a.mean_auc.map(JsonVal::Num).unwrap_or(JsonVal::Null),
                        ),
                        (
                            "std_auc",
                            a.std_auc.map(JsonVal::Num).unwrap_or(JsonVal::Null),
                        ),
                    ])
                })
                .collect(),
        );
        JsonVal::obj(vec![
            ("format_version", JsonVal::UInt(1)),
            ("config", self.config.to_json()),
            ("decisions", decision_flags()),
            ("target", JsonVal::Str(self.target_name.clone())),
            ("cells", cells),
            ("aggregates", aggregates),
        ])
        .to_string_canonical()
    }
}

/// Resolved modeling choices, recorded in every report.
fn decision_flags() -> JsonVal {
    JsonVal::obj(vec![
        ("kl_direction", JsonVal::Str("student_to_teacher".into())),
        ("teacher_side_tempered", JsonVal::Bool(true)),
        (
            "teacher_logits",
            JsonVal::Str("constant_eval_mode_after_teacher_step".into()),
        ),
        (
            "confusion_inputs",
            JsonVal::Str("softened_probabilities".into()),
        ),
        ("confusion_row_normalization", JsonVal::Bool(false)),
        (
            "confusion_batch_reduction",
            JsonVal::Str("mean_inside_composite".into()),
        ),
        ("ce_sd_batch_reduction", JsonVal::Str("mean".into())),
        ("probability_floor", JsonVal::Num(1e-12)),
        ("ea_ridge_epsilon", JsonVal::Num(1e-6)),
        (
            "sda_inference_alignment",
            JsonVal::Str("frozen_calibration_reference".into()),
        ),
        (
            "teacher_student_order",
            JsonVal::Str("teacher_first_alternating".into()),
        ),
        (
            "teacher_student_init",
            JsonVal::Str("independent_seeds".into()),
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_basic_cases() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 100.0);
        assert_eq!(accuracy(&[1, 1, 1], &[0, 0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 0, 1, 0]).unwrap(), 75.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_plus_error_rate_is_exactly_100() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(1..60);
            let predicted: Vec<u16> = (0..n).map(|_| rng.gen_range(0..3) as u16).collect();
            let truth: Vec<u16> = (0..n).map(|_| rng.gen_range(0..3) as u16).collect();
            let acc = accuracy(&predicted, &truth).unwrap();
            let errors = predicted
                .iter()
                .zip(&truth)
                .filter(|(a, b)| a != b)
                .count();
            let err_rate = 100.0 * errors as f64 / n as f64;
            assert_eq!(acc + err_rate, 100.0);
        }
    }

    #[test]
    fn auc_perfect_and_inverted() {
        let labels = [true, true, false, false];
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 0.0);
    }

    #[test]
    fn auc_tie_rule() {
        let v = auc(&[0.5, 0.5], &[true, false]).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn auc_rejects_single_class() {
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                total += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / total
    }

    #[test]
    fn auc_matches_all_pairs_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..200 {
            let n = rng.gen_range(2..=50);
            // coarse grid of score values forces plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 7.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            if labels.iter().all(|&l| l) {
                labels[0] = false;
            }
            if labels.iter().all(|&l| !l) {
                labels[0] = true;
            }
            let fast = auc(&scores, &labels).unwrap();
            let slow = brute_force_auc(&scores, &labels);
            assert!(
                (fast - slow).abs() < 1e-12,
                "case {case}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn variant_masks() {
        assert_eq!(Variant::Ce.mask(), (0.0, 0.0, 0.0));
        assert_eq!(Variant::Sdda.mask(), (1.0, 1.0, 1.0));
        assert_eq!(Variant::CeMaCl.mask(), (0.0, 1.0, 1.0));
        assert!(Variant::parse("nope").is_err());
        assert_eq!(Variant::parse("ce_sd").unwrap(), Variant::CeSd);
    }

    #[test]
    fn mean_std_recomputable() {
        let vals = [70.0, 72.5, 68.25];
        let (m, s) = mean_std(&vals);
        assert!((m - 70.25).abs() < 1e-12);
        let manual_var: f64 =
            vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 2.0;
        assert!((s - manual_var.sqrt()).abs() < 1e-12);
        let (m1, s1) = mean_std(&[5.0]);
        assert_eq!((m1, s1), (5.0, 0.0));
    }
}
