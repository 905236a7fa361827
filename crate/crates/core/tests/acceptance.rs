//! Acceptance suite. One test per criterion; each prints a single
//! `criterion N PASS/FAIL` line with its headline numbers.
//!
//! The heavy end-to-end criteria share one training sweep and serialize on
//! a mutex so wall-clock budgets are measured without cross-test
//! contention.

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdda_core::alignment::{euclidean_align_session, mean_covariance, Session};
use sdda_core::config::RunConfig;
use sdda_core::data::{load_dataset, save_dataset, synth_generate, SynthSpec, Trial};
use sdda_core::evaluation::{accuracy, auc, run_experiment, MetricKind, Variant};
use sdda_core::losses::{self, KernelSpec};
use sdda_core::model::{build_network, ArchConfig, Network};
use sdda_core::tensor::{Graph, NodeId, Tensor};
use sdda_core::training::{evaluate_metric, train_sdda, Scenario};

fn heavy_lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: u32, pass: bool, detail: &str) {
    println!(
        "criterion {criterion} {}  {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

// -- criterion 1: EA whitening ------------------------------------------------

#[test]
fn criterion_1_ea_whitening() {
    let _guard = heavy_lock();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xEA01);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    'outer: for &channels in &[3usize, 8, 22] {
        for &n_trials in &[1usize, 10, 100] {
            for _ in 0..12 {
                if count >= 100 {
                    break 'outer;
                }
                count += 1;
                let samples = 128;
                let session = random_session(&mut rng, channels, n_trials, samples);
                let aligned = euclidean_align_session(&session).unwrap();
                let reference = mean_covariance(&aligned).unwrap();
                let mut diff = reference.matrix().to_vec();
                for i in 0..channels {
                    diff[i * channels + i] -= 1.0;
                }
                let rel = frobenius(&diff) / (channels as f64).sqrt();
                worst = worst.max(rel);
            }
        }
    }
    // top up to exactly 100 sessions with mixed shapes
    while count < 100 {
        count += 1;
        let channels = [3, 8, 22][count % 3];
        let session = random_session(&mut rng, channels, 10, 128);
        let aligned = euclidean_align_session(&session).unwrap();
        let reference = mean_covariance(&aligned).unwrap();
        let mut diff = reference.matrix().to_vec();
        for i in 0..channels {
            diff[i * channels + i] -= 1.0;
        }
        worst = worst.max(frobenius(&diff) / (channels as f64).sqrt());
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        1,
        worst < 1e-5 && elapsed < 10.0,
        &format!("worst relative Frobenius {worst:.2e} over {count} sessions in {elapsed:.1}s"),
    );
}

fn random_session(rng: &mut ChaCha8Rng, channels: usize, n: usize, samples: usize) -> Session {
    // mild random mixing keeps the covariance away from identity while the
    // ridge (eps times condition number) stays inside the tolerance
    let mut mix = vec![0.0; channels * channels];
    for (i, v) in mix.iter_mut().enumerate() {
        *v = if i % (channels + 1) == 0 { 1.0 } else { 0.0 } + rng.gen_range(-0.2..0.2);
    }
    let trials = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..channels * samples)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let mut data = vec![0.0; channels * samples];
            for i in 0..channels {
                for k in 0..channels {
                    let m = mix[i * channels + k];
                    for s in 0..samples {
                        data[i * samples + s] += m * raw[k * samples + s];
                    }
                }
            }
            Trial::new(Tensor::new(vec![channels, samples], data).unwrap(), None).unwrap()
        })
        .collect();
    let names = (1..=channels).map(|i| format!("CH{i}")).collect();
    Session::new(trials, names, 128).unwrap()
}

fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// -- criterion 2: gradient integrity -------------------------------------------

#[test]
fn criterion_2_gradient_integrity() {
    let _guard = heavy_lock();
    let started = Instant::now();
    let suite = sdda_core::checks::gradient_check_suite().unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let worst = suite
        .items
        .iter()
        .map(|i| i.max_rel_error)
        .fold(0.0f64, f64::max);
    let failing: Vec<&str> = suite
        .items
        .iter()
        .filter(|i| !i.pass)
        .map(|i| i.name.as_str())
        .collect();
    report(
        2,
        suite.pass() && elapsed < 120.0,
        &format!(
            "{} checks, worst rel error {worst:.2e}, failing {failing:?}, {elapsed:.1}s",
            suite.items.len()
        ),
    );
}

// -- criterion 3: loss oracles ---------------------------------------------------

fn eval_fragment(build: impl FnOnce(&mut Graph<f64>) -> NodeId) -> Tensor<f64> {
    let mut g = Graph::new();
    let root = build(&mut g);
    g.forward(root, &BTreeMap::new()).unwrap()
}

fn softmax_rows(logits: &[Vec<f64>], temp: f64) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|row| {
            let e: Vec<f64> = row.iter().map(|&x| (x / temp).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|&x| x / s).collect()
        })
        .collect()
}

#[test]
fn criterion_3_loss_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x03AC);
    let floor = 1e-12f64;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(1..7);
        let c = rng.gen_range(2..5);
        let d = rng.gen_range(1..6);
        let temp = rng.gen_range(0.5..4.0);
        let logits: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| rng.gen_range(-6.0..6.0)).collect())
            .collect();
        let teacher: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| rng.gen_range(-6.0..6.0)).collect())
            .collect();
        let feats_a: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let m = rng.gen_range(1..7);
        let feats_b: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let spec = KernelSpec::from_median(rng.gen_range(0.3..2.0));

        // sd_loss against direct evaluation
        let got = eval_fragment(|g| {
            let s = g.constant(Tensor::from_rows(&logits).unwrap());
            losses::sd_loss(g, s, &Tensor::from_rows(&teacher).unwrap(), temp).unwrap()
        })
        .scalar_value();
        let ps = softmax_rows(&logits, temp);
        let pt = softmax_rows(&teacher, temp);
        let mut kl = 0.0;
        for (srow, trow) in ps.iter().zip(&pt) {
            for (&s, &t) in srow.iter().zip(trow) {
                kl += s * ((s.max(floor)).ln() - (t.max(floor)).ln());
            }
        }
        worst = worst.max((got - temp * temp * kl / n as f64).abs());

        // mk_mmd against the double loop
        let got = eval_fragment(|g| {
            let a = g.constant(Tensor::from_rows(&feats_a).unwrap());
            let b = g.constant(Tensor::from_rows(&feats_b).unwrap());
            losses::mk_mmd(g, a, b, &spec).unwrap()
        })
        .scalar_value();
        let kernel = |x: &[f64], y: &[f64]| -> f64 {
            let d2: f64 = x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum();
            spec.bandwidths()
                .iter()
                .zip(spec.weights())
                .map(|(&s, &w)| w * (-d2 / (2.0 * s * s)).exp())
                .sum()
        };
        let mean_k = |aa: &[Vec<f64>], bb: &[Vec<f64>]| -> f64 {
            aa.iter()
                .flat_map(|a| bb.iter().map(move |b| kernel(a, b)))
                .sum::<f64>()
                / (aa.len() * bb.len()) as f64
        };
        let want = mean_k(&feats_a, &feats_a) + mean_k(&feats_b, &feats_b)
            - 2.0 * mean_k(&feats_a, &feats_b);
        worst = worst.max((got - want).abs());

        // uncertainty weights against direct evaluation
        let probs = softmax_rows(&logits, 1.0);
        let got = eval_fragment(|g| {
            let p = g.constant(Tensor::from_rows(&probs).unwrap());
            losses::uncertainty_weights(g, p).unwrap()
        });
        for (i, row) in probs.iter().enumerate() {
            let want = 1.0
                + row
                    .iter()
                    .map(|&q| q * (q.max(floor)).ln())
                    .sum::<f64>()
                    .exp();
            worst = worst.max((got.data()[i] - want).abs());
        }

        // confusion loss against direct evaluation
        let got = eval_fragment(|g| {
            let l = g.constant(Tensor::from_rows(&logits).unwrap());
            losses::confusion_loss(g, l, temp).unwrap()
        })
        .scalar_value();
        let q = softmax_rows(&logits, temp);
        let v: Vec<f64> = q
            .iter()
            .map(|row| {
                1.0 + row
                    .iter()
                    .map(|&x| x * (x.max(floor)).ln())
                    .sum::<f64>()
                    .exp()
            })
            .collect();
        let mut total = 0.0;
        let mut trace = 0.0;
        for j in 0..c {
            for jp in 0..c {
                let l: f64 = (0..n).map(|i| q[i][j] * v[i] * q[i][jp]).sum();
                total += l;
                if j == jp {
                    trace += l;
                }
            }
        }
        let want = (total - trace) / c as f64;
        worst = worst.max((got - want).abs());
    }

    // the derived examples, reproduced exactly
    let mut exact: f64 = 0.0;
    let got = eval_fragment(|g| {
        let s = g.constant(Tensor::from_rows(&[vec![0.0]]).unwrap());
        let t = g.constant(Tensor::from_rows(&[vec![2.0]]).unwrap());
        losses::mk_mmd(g, s, t, &KernelSpec::single(1.0).unwrap()).unwrap()
    })
    .scalar_value();
    exact = exact.max((got - (2.0 - 2.0 * (-2.0f64).exp())).abs());

    let got = eval_fragment(|g| {
        let p = g.constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        losses::uncertainty_weights(g, p).unwrap()
    });
    exact = exact.max((got.data()[0] - 1.5).abs());

    let got = eval_fragment(|g| {
        let l = g.constant(Tensor::from_rows(&[vec![0.7, 0.7]]).unwrap());
        losses::confusion_loss(g, l, 2.0).unwrap()
    })
    .scalar_value();
    exact = exact.max((got - 0.375).abs());

    let stu = [vec![1.0, 0.0]];
    let tch = [vec![0.0, 1.0]];
    let got = eval_fragment(|g| {
        let s = g.constant(Tensor::from_rows(&stu).unwrap());
        losses::sd_loss(g, s, &Tensor::from_rows(&tch).unwrap(), 1.0).unwrap()
    })
    .scalar_value();
    let p = softmax_rows(&stu, 1.0);
    let q = softmax_rows(&tch, 1.0);
    let want: f64 = p[0]
        .iter()
        .zip(&q[0])
        .map(|(&a, &b)| a * (a.ln() - b.ln()))
        .sum();
    exact = exact.max((got - want).abs());

    report(
        3,
        worst < 1e-9 && exact < 1e-12,
        &format!("worst oracle gap {worst:.2e}, derived-example gap {exact:.2e}"),
    );
}

// -- criterion 4: AUC oracle -------------------------------------------------------

#[test]
fn criterion_4_auc_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x04AC);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(2..=50);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 9.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        if labels.iter().all(|&l| l) {
            labels[0] = false;
        }
        if labels.iter().all(|&l| !l) {
            labels[0] = true;
        }
        let fast = auc(&scores, &labels).unwrap();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        worst = worst.max((fast - wins / pairs).abs());
    }
    report(4, worst < 1e-12, &format!("worst gap {worst:.2e} over 200 instances"));
}

// -- criteria 5 and 6: the end-to-end synthetic sweep -------------------------------

struct Sweep {
    uda_means: BTreeMap<&'static str, f64>,
    sda_sdda_mean: f64,
    uda_elapsed: f64,
}

fn sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let config = RunConfig::default();
        let spec = config.synth.clone().expect("default config is synthetic");
        let (source, target) = synth_generate(&spec).unwrap();
        let seeds = [1u64, 2, 3, 4, 5];

        let started = Instant::now();
        let mut uda_means = BTreeMap::new();
        for variant in Variant::ALL {
            let mut total = 0.0;
            for &seed in &seeds {
                let tc = config.train_config(Scenario::Uda, variant, seed);
                let out = train_sdda(&tc, &source, &target).unwrap();
                total += evaluate_metric(&out.student, &out.eval_stream, MetricKind::Accuracy)
                    .unwrap();
            }
            uda_means.insert(variant.name(), total / seeds.len() as f64);
        }
        let uda_elapsed = started.elapsed().as_secs_f64();

        let mut sda_total = 0.0;
        for &seed in &seeds {
            let tc = config.train_config(Scenario::Sda, Variant::Sdda, seed);
            let out = train_sdda(&tc, &source, &target).unwrap();
            sda_total +=
                evaluate_metric(&out.student, &out.eval_stream, MetricKind::Accuracy).unwrap();
        }
        Sweep {
            uda_means,
            sda_sdda_mean: sda_total / seeds.len() as f64,
            uda_elapsed,
        }
    })
}

#[test]
fn criterion_5_synthetic_transfer_ordering() {
    let _guard = heavy_lock();
    let s = sweep();
    let ce = s.uda_means["ce"];
    let sdda = s.uda_means["sdda"];
    let mut ordering_ok = true;
    let mut detail = format!("ce {ce:.2}");
    for variant in ["ce_sd", "ce_ma", "ce_cl", "ce_ma_cl", "sdda"] {
        let mean = s.uda_means[variant];
        detail += &format!(", {variant} {mean:.2}");
        if mean < ce {
            ordering_ok = false;
        }
    }
    detail += &format!("; sdda margin {:.2}pp; sweep {:.0}s", sdda - ce, s.uda_elapsed);
    report(
        5,
        sdda >= ce + 5.0 && ordering_ok && s.uda_elapsed < 600.0,
        &detail,
    );
}

#[test]
fn criterion_6_sda_at_least_uda() {
    let _guard = heavy_lock();
    let s = sweep();
    let uda = s.uda_means["sdda"];
    let sda = s.sda_sdda_mean;
    report(
        6,
        sda >= uda,
        &format!("sda mean {sda:.2} vs uda mean {uda:.2}"),
    );
}

// -- criterion 7: determinism ----------------------------------------------------------

#[test]
fn criterion_7_byte_identical_reports() {
    let _guard = heavy_lock();
    let config = RunConfig::from_toml(
        r#"
        seeds = [3]
        variants = ["sdda"]
        scenarios = ["uda", "sda"]

        [synth]
        source_channels = 4
        common_channels = 2
        samples = 64
        trials_per_class = 6
        sessions_per_domain = 2
        sampling_rate = 32
        seed = 11

        [train]
        epochs = 3
        batch_size = 8
        n_labeled = 6
        "#,
    )
    .unwrap();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_experiment(&config, dir_a.path()).unwrap();
    run_experiment(&config, dir_b.path()).unwrap();
    let a = std::fs::read(dir_a.path().join("report.json")).unwrap();
    let b = std::fs::read(dir_b.path().join("report.json")).unwrap();
    report(
        7,
        a == b,
        &format!("report bytes {} vs {}", a.len(), b.len()),
    );
}

// -- criterion 8: format round-trips ------------------------------------------------------

#[test]
fn criterion_8_format_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x08F0);
    let mut ok = true;
    for i in 0..20 {
        // dataset
        let spec = SynthSpec {
            source_channels: rng.gen_range(2..6),
            common_channels: 2,
            samples: rng.gen_range(8..40),
            trials_per_class: rng.gen_range(1..4),
            sessions_per_domain: rng.gen_range(1..3),
            sampling_rate: 32,
            seed: rng.gen(),
            ..SynthSpec::default()
        };
        let (source, target) = synth_generate(&spec).unwrap();
        for (tag, domain) in [("s", &source), ("t", &target)] {
            let path = dir.path().join(format!("{tag}{i}.sdda"));
            save_dataset(domain, &path).unwrap();
            let loaded = load_dataset(&path, domain.role()).unwrap();
            ok &= &loaded == domain;
        }
        // checkpoint
        let arch = ArchConfig {
            kernel_length: rng.gen_range(3..17),
            separable_length: rng.gen_range(2..9),
            ..ArchConfig::default()
        };
        let net: Network<f32> =
            build_network(rng.gen_range(2..6), 64, rng.gen_range(2..4), &arch, rng.gen())
                .unwrap();
        let path = dir.path().join(format!("n{i}.ckpt"));
        net.save_checkpoint(&path).unwrap();
        let loaded = Network::<f32>::load_checkpoint(&path).unwrap();
        ok &= loaded.params() == net.params()
            && loaded.running() == net.running()
            && loaded.arch() == net.arch();
    }
    report(8, ok, "20 dataset and 20 checkpoint round-trips");
}
