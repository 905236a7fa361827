//! The gradient-check suite: every differentiable primitive at random
//! points, plus the full teacher and student loss composites through the
//! backbone networks. Runs in 64-bit precision.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{self, KernelSpec, LossWeights};
use crate::model::{build_network, ArchConfig, Mode};
use crate::tensor::{grad_check, Graph, NodeId, Padding, Tensor};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;
const POINTS: usize = 10;

#[derive(Clone, Debug)]
pub struct CheckItem {
    pub name: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub items: Vec<CheckItem>,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.items.iter().all(|i| i.pass)
    }
}

type Bindings = BTreeMap<String, Tensor<f64>>;

fn bind(pairs: Vec<(&str, Tensor<f64>)>) -> Bindings {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("static shape")
}

/// Values bounded away from zero (for kinked or singular primitives).
fn uniform_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let magnitude = rng.gen_range(margin..1.0 + margin);
            if rng.gen_bool(0.5) {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("static shape")
}

/// Contract a tensor node against fixed random weights, exposing the full
/// Jacobian structure instead of a uniform sum.
fn weighted_root(g: &mut Graph<f64>, out: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let shape = g.shape(out).to_vec();
    let weights = g.constant(uniform(rng, &shape, -1.0, 1.0));
    let prod = g.mul(out, weights).expect("same shape");
    g.sum(prod)
}

fn run_case(
    items: &mut Vec<CheckItem>,
    name: &str,
    mut build: impl FnMut(&mut ChaCha8Rng) -> Result<(Graph<f64>, NodeId, Bindings)>,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD0 ^ name.len() as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let (mut graph, root, bindings) = build(&mut rng)?;
        let report = grad_check(&mut graph, root, &bindings, STEP, TOL)?;
        for leaf in &report.leaves {
            worst = worst.max(leaf.max_rel_error);
        }
    }
    items.push(CheckItem {
        name: name.to_string(),
        max_rel_error: worst,
        pass: worst <= TOL,
    });
    Ok(())
}

/// Check every primitive at `POINTS` random points and the three loss
/// composites on 4-trial synthetic batches.
pub fn gradient_check_suite() -> Result<SuiteReport> {
    let mut items = Vec::new();

    run_case(&mut items, "add_broadcast", |rng| {
        let mut g = Graph::new();
        let a = g.leaf("a", &[3, 4])?;
        let b = g.leaf("b", &[1, 4])?;
        let out = g.add(a, b)?;
        let root = weighted_root(&mut g, out, rng);
        let bindings = bind(vec![
            ("a", uniform(rng, &[3, 4], -2.0, 2.0)),
            ("b", uniform(rng, &[1, 4], -2.0, 2.0)),
        ]);
        Ok((g, root, bindings))
    })?;

    run_case(&mut items, "sub_broadcast", |rng| {
        let mut g = Graph::new();
        let a = g.leaf("a", &[3, 4])?;
        let b = g.leaf("b", &[3, 1])?;
        let out = g.sub(a, b)?;
        let root = weighted_root(&mut g, out, rng);
        let bindings = bind(vec![
            ("a", uniform(rng, &[3, 4], -2.0, 2.0)),
            ("b", uniform(rng, &[3, 1], -2.0, 2.0)),
        ]);
        Ok((g, root, bindings))
    })?;

    run_case(&mut items, "mul_broadcast", |rng| {
        let mut g = Graph::new();
        let a = g.leaf("a", &[2, 3, 4])?;
        let b = g.leaf("b", &[3, 1])?;
        let out = g.mul(a, b)?;
        let root = weighted_root(&mut g, out, rng);
        let bindings = bind(vec![
            ("a", uniform(rng, &[2, 3, 4], -2.0, 2.0)),
            ("b", uniform(rng, &[3, 1], -2.0, 2.0)),
        ]);
        Ok((g, root, bindings))
    })?;

    run_case(&mut items, "scalar_mul_add", |rng| {
        let mut g = Graph::new();
        let a = g.leaf("a", &[5])?;
        let scaled = g.scalar_mul(a, -1.7);
        let shifted = g.scalar_add(scaled, 0.3);
        let root = weighted_root(&mut g, shifted, rng);
        let bindings = bind(vec![("a", uniform(rng, &[5], -2.0, 2.0))]);
        Ok((g, root, bindings))
    })?;

    run_case(&mut items, "clamp_min", |rng| {
        let mut g = Graph::new();
        let a = g.leaf("a", &[6])?;
        let out = g.clamp_min(a, 0.0);
        let root = weighted_root(&mut g, out, rng);
        // keep the sample away from the kink
        let bindings = bind(vec![("a", uniform_off_zero(rng, &[6], 0.05))]);
        Ok((g, root, bindings))
    })?;

    run_case(&mut items, "matmul", |rng| {
        let mut g = Graph::new();
        let a = g.leaf("a", &[3, 4])?;
        let b = g.leaf("b", &[4, 2])?;
        let out = g.matmul(a, b)?;
        let root = weighted_root(&mut g, out, rng);
        let bindings = bind(vec![
            ("a", uniform(rng, &[3, 4], -1.0, 1.0)),
            ("b", uniform(rng, &[4, 2], -1.0, 1.0)),
        ]);
        Ok((g, root, bindings))
    })?;

    for (name, padding) in [("conv2d_valid", Padding::Valid), ("conv2d_same", Padding::Same)] {
        run_case(&mut items, name, move |rng| {
            let mut g = Graph::new();
            let x = g.leaf("x", &[2, 2, 3, 8])?;
            let k = g.leaf("k", &[3, 2, 2, 3])?;
            let out = g.conv2d(x, k, padding)?;
            let root = weighted_root(&mut g, out, rng);
            let bindings = bind(vec![
                ("x", uniform(rng, &[2, 2, 3, 8], -1.0, 1.0)),
                ("k", uniform(rng, &[3, 2, 2, 3], -1.0, 1.0)),
            ]);
            Ok((g, root, bindings))
        })?;
    }

    for (name, padding) in [
        ("depthwise_valid", Padding::Valid),
        ("depthwise_same", Padding::Same),
    ] {
        run_case(&mut items, name, move |rng| {
            let mut g = Graph::new();
            let x = g.leaf("x", &[2, 3, 4, 6])?;
            let k = g.leaf("k", &[3, 2, 4, 1])?;
            let out = g.depthwise_conv2d(x, k, padding)?;
            let root = weighted_root(&mut g, out, rng);
            let bindings = bind(vec![
                ("x", uniform(rng, &[2, 3, 4, 6], -1.0, 1.0)),
                ("k", uniform(rng, &[3, 2, 4, 1], -1.0, 1.0)),
            ]);
            Ok((g, root, bindings))
        })?;
    }

    run_case(&mut items, "avg_pool", |rng| {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2, 2, 2, 8])?;
        let out = g.avg_pool(x, 2, 4)?;
        let root = weighted_root(&mut g, out, rng);
        let bindings = bind(vec![("x", uniform(rng, &[2, 2, 2, 8], -1.0, 1.0))]);
        Ok((g, root, bindings))
    })?;

    run_case(&mut items, "elu", |rng| {
        let mut g = Graph::new();
        let x = g.leaf("x", &[8])?;
        let out = g.elu(x);
        let root = weighted_root(&mut g, out, rng);
        let bindings = bind(vec![("x", uniform_off_zero(rng, &[8], 0.05))]);
        Ok((g, root, bindings))
    })?;

    run_case(&mut items, "batch_norm_train", |rng| {
        let mut g = Graph::new();
        let x = g.leaf("x", &[3, 2, 2, 4])?;
        let gamma = g.leaf("gamma", &[2])?;
        let beta = g.leaf("beta", &[2])?;
        let out = g.batch_norm_train(x, gamma, beta, 1e-5)?;
        let root = weighted_root(&mut g, out, rng);
        let bindings = bind(vec![
            ("x", uniform(rng, &[3, 2, 2, 4], -2.0, 2.0)),
            ("gamma", uniform(rng, &[2], 0.5, 1.5)),
            ("beta", uniform(rng, &[2], -0.5, 0.5)),
        ]);
        Ok((g, root, bindings))
    })?;

    run_case(&mut items, "batch_norm_eval", |rng| {
        let mut g = Graph::new();
        let x = g.leaf("x", &[3, 2, 2, 4])?;
        let gamma = g.leaf("gamma", &[2])?;
        let beta = g.leaf("beta", &[2])?;
        let mean = vec![0.2, -0.1];
        let var = vec![1.3, 0.8];
        let out = g.batch_norm_eval(x, gamma, beta, &mean, &var, 1e-5)?;
        let root = weighted_root(&mut g, out, rng);
        let bindings = bind(vec![
            ("x", uniform(rng, &[3, 2, 2, 4], -2.0, 2.0)),
            ("gamma", uniform(rng, &[2], 0.5, 1.5)),
            ("beta", uniform(rng, &[2], -0.5, 0.5)),
        ]);
        Ok((g, root, bindings))
    })?;

    run_case(&mut items, "dropout", |rng| {
        let mut g = Graph::new();
        let x = g.leaf("x", &[12])?;
        let out = g.dropout(x, 0.25, rng.gen())?;
        let root = weighted_root(&mut g, out, rng);
        let bindings = bind(vec![("x", uniform(rng, &[12], -2.0, 2.0))]);
        Ok((g, root, bindings))
    })?;

    run_case(&mut items, "softmax", |rng| {
        let mut g = Graph::new();
        let x = g.leaf("x", &[3, 4])?;
        let out = g.softmax(x);
        let root = weighted_root(&mut g, out, rng);
        let bindings = bind(vec![("x", uniform(rng, &[3, 4], -3.0, 3.0))]);
        Ok((g, root, bindings))
    })?;

    run_case(&mut items, "log", |rng| {
        let mut g = Graph::new();
        let x = g.leaf("x", &[6])?;
        let out = g.log(x);
        let root = weighted_root(&mut g, out, rng);
        let bindings = bind(vec![("x", uniform(rng, &[6], 0.2, 3.0))]);
        Ok((g, root, bindings))
    })?;

    run_case(&mut items, "exp", |rng| {
        let mut g = Graph::new();
        let x = g.leaf("x", &[6])?;
        let out = g.exp(x);
        let root = weighted_root(&mut g, out, rng);
        let bindings = bind(vec![("x", uniform(rng, &[6], -2.0, 2.0))]);
        Ok((g, root, bindings))
    })?;

    run_case(&mut items, "reductions", |rng| {
        let mut g = Graph::new();
        let x = g.leaf("x", &[3, 4])?;
        let s = g.sum(x);
        let m = g.mean(x);
        let ax = g.sum_axis(x, 1, true)?;
        let ax_root = weighted_root(&mut g, ax, rng);
        let sm = g.add(s, m)?;
        let root = g.add(sm, ax_root)?;
        let bindings = bind(vec![("x", uniform(rng, &[3, 4], -2.0, 2.0))]);
        Ok((g, root, bindings))
    })?;

    run_case(&mut items, "reshape_transpose_concat", |rng| {
        let mut g = Graph::new();
        let a = g.leaf("a", &[2, 6])?;
        let b = g.leaf("b", &[3, 4])?;
        let ar = g.reshape(a, &[3, 4])?;
        let bt = g.transpose(b)?;
        let btr = g.reshape(bt, &[3, 4])?;
        let cat = g.concat(&[ar, btr], 1)?;
        let root = weighted_root(&mut g, cat, rng);
        let bindings = bind(vec![
            ("a", uniform(rng, &[2, 6], -2.0, 2.0)),
            ("b", uniform(rng, &[3, 4], -2.0, 2.0)),
        ]);
        Ok((g, root, bindings))
    })?;

    composite_cases(&mut items)?;

    Ok(SuiteReport { items })
}

/// Tiny but structurally complete networks for the composite checks.
fn check_arch() -> ArchConfig {
    ArchConfig {
        temporal_filters: 4,
        depth_multiplier: 2,
        separable_filters: 8,
        kernel_length: 8,
        separable_length: 4,
        pool1: 4,
        pool2: 8,
        dropout: 0.25,
        bn_momentum: 0.1,
        bn_eps: 1e-5,
    }
}

fn composite_cases(items: &mut Vec<CheckItem>) -> Result<()> {
    const SAMPLES: usize = 32;
    const SOURCE_CHANNELS: usize = 4;
    const COMMON_CHANNELS: usize = 2;
    let weights = LossWeights::default();

    // teacher loss: cross entropy through the full-channel network
    run_case(items, "teacher_ce_composite", |rng| {
        let teacher = build_network::<f64>(SOURCE_CHANNELS, SAMPLES, 2, &check_arch(), rng.gen())?;
        let mut g = Graph::new();
        let batch = uniform(rng, &[4, SOURCE_CHANNELS, SAMPLES], -1.0, 1.0);
        let input = g.constant(batch);
        let wired = teacher.wire(&mut g, input, Mode::Train, rng.gen())?;
        let root = losses::cross_entropy(&mut g, wired.logits, &[0, 1, 1, 0])?;
        Ok((g, root, teacher.bindings()))
    })?;

    // student composites: distillation + marginal alignment + confusion
    for (name, supervised) in [
        ("student_uda_composite", false),
        ("student_sda_composite", true),
    ] {
        run_case(items, name, move |rng| {
            let teacher =
                build_network::<f64>(SOURCE_CHANNELS, SAMPLES, 2, &check_arch(), rng.gen())?;
            let student =
                build_network::<f64>(COMMON_CHANNELS, SAMPLES, 2, &check_arch(), rng.gen())?;
            let teacher_batch = uniform(rng, &[4, SOURCE_CHANNELS, SAMPLES], -1.0, 1.0);
            let teacher_logits = teacher.forward_logits(&teacher_batch, Mode::Eval, 0)?;
            let mut g = Graph::new();
            let src = g.constant(uniform(rng, &[4, COMMON_CHANNELS, SAMPLES], -1.0, 1.0));
            let tgt = g.constant(uniform(rng, &[4, COMMON_CHANNELS, SAMPLES], -1.0, 1.0));
            let ws = student.wire(&mut g, src, Mode::Train, rng.gen())?;
            let wt = student.wire(&mut g, tgt, Mode::Train, rng.gen())?;
            let ce = losses::cross_entropy(&mut g, ws.logits, &[0, 1, 1, 0])?;
            let sd = losses::sd_loss(
                &mut g,
                ws.logits,
                &teacher_logits,
                weights.distill_temperature,
            )?;
            let ma = losses::mk_mmd(
                &mut g,
                ws.features,
                wt.features,
                &KernelSpec::from_median(1.0),
            )?;
            let cl =
                losses::confusion_loss(&mut g, wt.logits, weights.confusion_temperature)?;
            let root = if supervised {
                let ce_t = losses::cross_entropy(&mut g, wt.logits, &[1, 0, 0, 1])?;
                losses::student_loss_sda(&mut g, ce, Some(ce_t), sd, ma, cl, &weights)?
            } else {
                losses::student_loss_uda(&mut g, ce, sd, ma, cl, &weights)?
            };
            Ok((g, root, student.bindings()))
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let report = gradient_check_suite().unwrap();
        for item in &report.items {
            assert!(
                item.pass,
                "{} failed with max rel error {:e}",
                item.name, item.max_rel_error
            );
        }
        assert!(report.items.len() >= 20);
    }
}
