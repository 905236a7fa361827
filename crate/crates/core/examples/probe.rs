// Scratch experiment probe (removed before release).

use std::time::Instant;

use sdda_core::config::RunConfig;
use sdda_core::data::{synth_generate, SynthSpec};
use sdda_core::evaluation::Variant;
use sdda_core::training::{train_sdda, Scenario};

fn arg(n: usize, default: f64) -> f64 {
    std::env::args()
        .nth(n)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let spec = SynthSpec {
        snr: arg(1, 1.0),
        domain_shift: arg(2, 0.7),
        trials_per_class: arg(3, 16.0) as usize,
        sampling_rate: arg(4, 128.0) as u32,
        session_jitter: arg(5, 0.15),
        ..SynthSpec::default()
    };
    println!(
        "snr={} shift={} tpc={} sr={} jitter={}",
        spec.snr, spec.domain_shift, spec.trials_per_class, spec.sampling_rate, spec.session_jitter
    );
    let mut config = RunConfig::default();
    config.synth = Some(spec.clone());
    let (source, target) = synth_generate(&spec).unwrap();

    let t0 = Instant::now();
    let mut ce_mean = 0.0;
    for variant in Variant::ALL {
        let mut accs = Vec::new();
        for seed in 1..=5u64 {
            let tc = config.train_config(Scenario::Uda, variant, seed);
            let out = train_sdda(&tc, &source, &target).unwrap();
            accs.push(out.history.epochs.last().unwrap().metric);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        if variant == Variant::Ce {
            ce_mean = mean;
        }
        println!(
            "UDA {:9} mean {:6.2} (vs ce {:+5.2})  {:?}",
            variant.name(),
            mean,
            mean - ce_mean,
            accs.iter().map(|a| (a * 10.0).round() / 10.0).collect::<Vec<_>>(),
        );
    }
    let mut accs = Vec::new();
    for seed in 1..=5u64 {
        let tc = config.train_config(Scenario::Sda, Variant::Sdda, seed);
        let out = train_sdda(&tc, &source, &target).unwrap();
        let acc = sdda_core::training::evaluate_metric(
            &out.student,
            &out.eval_stream,
            sdda_core::evaluation::MetricKind::Accuracy,
        )
        .unwrap();
        accs.push(acc);
    }
    println!(
        "SDA sdda held-out mean {:6.2} {:?}",
        accs.iter().sum::<f64>() / accs.len() as f64,
        accs.iter().map(|a| (a * 10.0).round() / 10.0).collect::<Vec<_>>()
    );
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
