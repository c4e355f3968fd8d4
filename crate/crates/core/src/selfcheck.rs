//! Randomised finite-difference check of every graph op and of the full
//! network-plus-loss composite.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::diffcore::{GradCheckReport, GradChecker, NodeId, Tensor};
use crate::error::Result;
use crate::losses::graph_total_loss;
use crate::network::{init_network, wire, NetworkConfig, StageSpec};
use crate::rng::{self, Rng};

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub cases: Vec<GradCheckCase>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.report.passed())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_error()).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.cases.iter().flat_map(|c| &c.report.tensors).map(|t| t.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.cases.iter().flat_map(|c| &c.report.tensors).map(|t| t.skipped).sum()
    }
}

fn uniform(shape: &[usize], scale: f64, r: &mut Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| scale * r.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

fn named(items: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn conv_case(checker: &GradChecker, r: &mut Rng) -> Result<GradCheckReport> {
    let stride = r.random_range(1..=2);
    let padding = r.random_range(0..=1);
    let params = named(vec![
        ("input", uniform(&[2, 2, 5, 6], 1.0, r)),
        ("kernels", uniform(&[3, 2, 3, 2], 1.0, r)),
        ("bias", uniform(&[3], 1.0, r)),
    ]);
    checker.check(&params, |g, p| {
        let y = g.conv2d(p[0], p[1], p[2], stride, padding)?;
        let s = g.sigmoid(y);
        Ok(g.sum(s))
    })
}

fn pointwise_case(checker: &GradChecker, r: &mut Rng) -> Result<GradCheckReport> {
    let params = named(vec![
        ("input", uniform(&[2, 3, 3, 3], 1.0, r)),
        ("kernels", uniform(&[4, 3, 1, 1], 1.0, r)),
        ("bias", uniform(&[4], 1.0, r)),
    ]);
    checker.check(&params, |g, p| {
        let y = g.conv2d(p[0], p[1], p[2], 1, 0)?;
        let s = g.sigmoid(y);
        Ok(g.sum(s))
    })
}

fn head_case(checker: &GradChecker, r: &mut Rng) -> Result<GradCheckReport> {
    let params = named(vec![
        ("input", uniform(&[2, 3, 4, 4], 1.0, r)),
        ("weights", uniform(&[3, 2], 1.0, r)),
        ("bias", uniform(&[2], 1.0, r)),
    ]);
    checker.check(&params, |g, p| {
        let a = g.relu(p[0]);
        let m = g.maxpool2d(a, 2, 2)?;
        let pooled = g.global_avg_pool(m)?;
        let f = g.fully_connected(pooled, p[1], p[2])?;
        let s = g.sigmoid(f);
        Ok(g.sum(s))
    })
}

fn loss_op_case(checker: &GradChecker, r: &mut Rng) -> Result<GradCheckReport> {
    let params = named(vec![("scores", uniform(&[3, 6], 3.0, r))]);
    checker.check(&params, |g, p| {
        let d = g.diff(p[0])?;
        let ls = g.log_sigmoid(d);
        let order = g.scale(ls, -1.0);
        let bends = g.diff(d)?;
        let sl = g.smooth_l1(bends);
        let flat = g.reshape(sl, vec![12])?;
        let (a, b) = (g.sum(order), g.sum(flat));
        g.add(a, b)
    })
}

/// Small network scoring a `g × m` group, reduced by the total ranking loss.
fn network_case(checker: &GradChecker, seed: u64, r: &mut Rng) -> Result<GradCheckReport> {
    let (g, m) = (2, 4);
    let config = NetworkConfig {
        input_size: [6, 6],
        stages: vec![StageSpec::new(3, 3, 1, 1, Some(2))],
        conv6_channels: 4,
        seed,
    };
    let init = init_network(&config)?;
    // Zero-initialised biases would leave dead units sitting exactly on the ReLU kink.
    let params: Vec<(String, Tensor)> = init
        .iter()
        .map(|(n, t)| {
            let t = if n.ends_with(".bias") { uniform(t.shape(), 0.1, r) } else { t.clone() };
            (n.to_string(), t)
        })
        .collect();
    let pixels = uniform(&[g * m, 1, 6, 6], 0.5, r).map(|v| v + 0.5);
    checker.check(&params, |graph, ids| {
        let lookup: BTreeMap<String, NodeId> = params.iter().map(|(n, _)| n.clone()).zip(ids.iter().copied()).collect();
        let input = graph.constant(pixels.clone());
        let (scores, _) = wire(graph, &config, &lookup, input, None)?;
        let table = graph.reshape(scores, vec![g, m])?;
        graph_total_loss(graph, table)
    })
}

pub const CASE_NAMES: [&str; 5] = ["conv2d", "pointwise-conv", "relu-pool-gap-fc", "loss-ops", "network+loss"];

/// Runs every case once per seed.
pub fn grad_check_suite(seeds: impl IntoIterator<Item = u64>, checker: GradChecker) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for seed in seeds {
        for (i, &name) in CASE_NAMES.iter().enumerate() {
            let mut r = rng::stream(seed, "gradcheck", i as u64);
            let report = match i {
                0 => conv_case(&checker, &mut r)?,
                1 => pointwise_case(&checker, &mut r)?,
                2 => head_case(&checker, &mut r)?,
                3 => loss_op_case(&checker, &mut r)?,
                _ => network_case(&checker, seed, &mut r)?,
            };
            cases.push(GradCheckCase { name, seed, report });
        }
    }
    Ok(SuiteReport {
        cases,
        tolerance: checker.tolerance,
    })
}
