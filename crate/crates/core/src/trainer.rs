//! SGD-with-momentum training over sampled groups.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor};
use crate::error::{Result, UbrError};
use crate::losses::{weighted_total_loss, LossReport, ScoreTable};
use crate::network::checkpoint::{network_config_text, params_from_checkpoint, parse_network_config};
use crate::network::{build_graph, init_network, read_checkpoint, write_checkpoint, ModelParams, NetworkConfig};
use crate::phantom::Dataset;
use crate::rng;
use crate::sampler::{sample_group, SamplerConfig};

/// Multiply the learning rate by `factor` every `period` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub factor: f64,
    pub period: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub lr_schedule: Option<LrSchedule>,
    pub momentum: f64,
    /// Weight of the distance term; 0 trains with the order loss alone.
    pub dist_weight: f64,
    /// Seeds the per-iteration sampling streams.
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_period: usize,
    /// Log progress every this many iterations (0 = never).
    pub log_period: usize,
    #[serde(skip)]
    pub sampler: SamplerConfig,
    #[serde(skip)]
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            learning_rate: 0.002,
            lr_schedule: None,
            momentum: 0.9,
            dist_weight: 1.0,
            seed: 0,
            checkpoint_period: 0,
            log_period: 100,
            sampler: SamplerConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(UbrError::InvalidConfig(format!("train: {msg}")));
        if self.iterations < 1 {
            return bad("iterations must be ≥ 1".into());
        }
        // lr 0 is allowed: it is the frozen-parameter control.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be a finite value ≥ 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.dist_weight >= 0.0 && self.dist_weight.is_finite()) {
            return bad(format!("dist_weight must be ≥ 0, got {}", self.dist_weight));
        }
        if let Some(s) = self.lr_schedule {
            if s.period == 0 || !(s.factor > 0.0) {
                return bad("lr_schedule needs period ≥ 1 and factor > 0".into());
            }
        }
        self.sampler.validate()?;
        self.network.validate()
    }

    /// Learning rate for 0-based iteration `t`.
    pub fn learning_rate_at(&self, t: usize) -> f64 {
        match self.lr_schedule {
            Some(s) => self.learning_rate * s.factor.powi((t / s.period) as i32),
            None => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub order: f64,
    pub dist: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
    pub wall_clock: Duration,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainLog {
    /// Median total loss over 1-based iterations `first..=last` present in
    /// the log.
    pub fn median_total(&self, first: usize, last: usize) -> Option<f64> {
        let mut v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| (first..=last).contains(&r.iteration))
            .map(|r| r.total)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# iteration order dist total\n");
        for r in &self.records {
            writeln!(out, "{} {} {} {}", r.iteration, r.order, r.dist, r.total).unwrap();
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| UbrError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| UbrError::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let bad = || UbrError::format(path, format!("line {}: expected `iteration order dist total`", lineno + 1));
            let f: Vec<&str> = line.split_ascii_whitespace().collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            records.push(IterationRecord {
                iteration: f[0].parse().map_err(|_| bad())?,
                order: num(f[1])?,
                dist: num(f[2])?,
                total: num(f[3])?,
            });
        }
        Ok(TrainLog {
            records,
            ..TrainLog::default()
        })
    }
}

/// `v ← momentum·v + grad; p ← p − lr·v`, tensor by tensor.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    learning_rate: f64,
    momentum: f64,
    velocity: &mut BTreeMap<String, Tensor>,
) -> Result<()> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let p = params.get(name).expect("listed");
        let shape_err = |t: &Tensor, what: &str| UbrError::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{what} for `{name}` must have shape {:?}", p.shape()),
        };
        let g = grads
            .get(name)
            .ok_or_else(|| UbrError::InvalidArgument(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(shape_err(g, "gradient"));
        }
        if let Some(v) = velocity.get(name) {
            if v.shape() != p.shape() {
                return Err(shape_err(v, "velocity"));
            }
        }
    }
    for name in &names {
        let g = &grads[name];
        let v = velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros_like(g));
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = momentum * *vi + gi;
        }
        let p = params.get_mut(name).expect("listed");
        for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
            *pi -= learning_rate * vi;
        }
    }
    Ok(())
}

/// Loss report and parameter gradients for one group of pixels.
pub fn loss_and_grads(
    params: &ModelParams,
    pixels: Tensor,
    g: usize,
    m: usize,
    dist_weight: f64,
) -> Result<(LossReport, BTreeMap<String, Tensor>)> {
    let mut graph = Graph::new();
    let input = graph.constant(pixels);
    let nodes = build_graph(&mut graph, params, input)?;
    let table = ScoreTable::new(g, m, graph.value(nodes.scores).data().to_vec())?;
    let report = weighted_total_loss(&table, dist_weight)?;
    if !report.total.is_finite() {
        return Ok((report, BTreeMap::new()));
    }
    graph.backward_with_grad(nodes.scores, Tensor::new(vec![g * m, 1], report.grad.clone())?)?;
    let grads = nodes
        .params
        .iter()
        .map(|(name, id)| {
            let grad = graph.grad(*id).cloned().unwrap_or_else(|| Tensor::zeros_like(graph.value(*id)));
            (name.clone(), grad)
        })
        .collect();
    Ok((report, grads))
}

/// Training state: parameters, optimizer velocity and the number of
/// completed iterations.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    params: ModelParams,
    velocity: BTreeMap<String, Tensor>,
    iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_network(&config.network)?;
        Ok(Trainer {
            config,
            params,
            velocity: BTreeMap::new(),
            iteration: 0,
        })
    }

    /// Restores a training checkpoint. The sampling setup, seed, loss weight
    /// and architecture must match; optimizer settings may change.
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let ckpt = read_checkpoint(path)?;
        let saved: SavedTraining = parse_training_table(&ckpt.config_text, path)?;
        let net = parse_network_config(&ckpt.config_text, path)?;
        let mut mismatches = Vec::new();
        let mut check = |what: &str, ours: String, theirs: String| {
            if ours != theirs {
                mismatches.push(format!("{what}: checkpoint has {theirs}, config has {ours}"));
            }
        };
        check("g", config.sampler.g.to_string(), saved.g.to_string());
        check("m", config.sampler.m.to_string(), saved.m.to_string());
        check("max_interval", format!("{:?}", config.sampler.max_interval), format!("{:?}", saved.max_interval));
        check("seed", config.seed.to_string(), saved.seed.to_string());
        check("dist_weight", config.dist_weight.to_string(), saved.dist_weight.to_string());
        let arch = |c: &NetworkConfig| format!("{:?}/{:?}/{}", c.input_size, c.stages, c.conv6_channels);
        check("network", arch(&config.network), arch(&net));
        if !mismatches.is_empty() {
            return Err(UbrError::CheckpointMismatch(mismatches.join("; ")));
        }
        if config.learning_rate != saved.learning_rate || config.lr_schedule != saved.lr_schedule {
            log::warn!(
                "resuming with learning rate {} ({:?}); checkpoint was trained with {} ({:?})",
                config.learning_rate,
                config.lr_schedule,
                saved.learning_rate,
                saved.lr_schedule
            );
        }
        if config.momentum != saved.momentum {
            log::warn!("resuming with momentum {}; checkpoint used {}", config.momentum, saved.momentum);
        }
        if saved.iteration > config.iterations {
            return Err(UbrError::CheckpointMismatch(format!(
                "checkpoint is at iteration {}, beyond the configured {}",
                saved.iteration, config.iterations
            )));
        }
        let params = params_from_checkpoint(&ckpt, path)?;
        let mut velocity = BTreeMap::new();
        for (name, t) in &ckpt.tensors {
            if let Some(p) = name.strip_prefix("velocity.") {
                let shape = params.get(p).map(Tensor::shape);
                if shape != Some(t.shape()) {
                    return Err(UbrError::format(path, format!("velocity tensor `{name}` does not match its parameter")));
                }
                velocity.insert(p.to_string(), t.clone());
            }
        }
        Ok(Trainer {
            config,
            params,
            velocity,
            iteration: saved.iteration,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One iteration: sample, forward, loss, backward, update.
    pub fn step(&mut self, dataset: &Dataset) -> Result<IterationRecord> {
        let t = self.iteration;
        let mut r = rng::stream(self.config.seed, "sampler", t as u64);
        let group = sample_group(dataset, &self.config.sampler, &mut r)?;
        let (g, m) = (self.config.sampler.g, self.config.sampler.m);
        let (report, grads) = loss_and_grads(&self.params, group.pixels, g, m, self.config.dist_weight)?;
        if !report.total.is_finite() {
            return Err(UbrError::Divergence {
                iteration: t + 1,
                loss: report.total,
            });
        }
        let lr = self.config.learning_rate_at(t);
        sgd_step(&mut self.params, &grads, lr, self.config.momentum, &mut self.velocity)?;
        self.iteration += 1;
        Ok(IterationRecord {
            iteration: self.iteration,
            order: report.order,
            dist: report.dist,
            total: report.total,
        })
    }

    /// Runs until `config.iterations` are complete. With `out_dir`, writes
    /// periodic checkpoints and `final.ubrc` there.
    pub fn run(&mut self, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainLog> {
        let start = Instant::now();
        let mut log = TrainLog::default();
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| UbrError::io(dir, e))?;
        }
        while self.iteration < self.config.iterations {
            let record = self.step(dataset)?;
            log.records.push(record);
            let it = record.iteration;
            if self.config.log_period > 0 && it % self.config.log_period == 0 {
                log::info!("iteration {it}: order {:.4} dist {:.4} total {:.4}", record.order, record.dist, record.total);
            }
            if let Some(dir) = out_dir {
                let period = self.config.checkpoint_period;
                if period > 0 && it % period == 0 && it < self.config.iterations {
                    self.save_checkpoint(&dir.join(format!("checkpoint-{it:06}.ubrc")))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            let path = dir.join("final.ubrc");
            self.save_checkpoint(&path)?;
            log.final_checkpoint = Some(path);
        }
        log.wall_clock = start.elapsed();
        Ok(log)
    }

    /// Network tensors plus `velocity.*` and a `[training]` table.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let saved = SavedTraining {
            iteration: self.iteration,
            seed: self.config.seed,
            g: self.config.sampler.g,
            m: self.config.sampler.m,
            max_interval: self.config.sampler.max_interval,
            learning_rate: self.config.learning_rate,
            lr_schedule: self.config.lr_schedule,
            momentum: self.config.momentum,
            dist_weight: self.config.dist_weight,
        };
        let mut doc = toml::Table::new();
        doc.insert("training".into(), toml::Value::try_from(&saved).expect("serialisable"));
        let text = format!("{}\n{}", network_config_text(self.params.config()), toml::to_string(&doc).expect("serialisable"));
        let velocity_names: Vec<(String, &Tensor)> = self.velocity.iter().map(|(n, t)| (format!("velocity.{n}"), t)).collect();
        let mut tensors: Vec<(&str, &Tensor)> = self.params.iter().collect();
        tensors.extend(velocity_names.iter().map(|(n, t)| (n.as_str(), *t)));
        write_checkpoint(path, &text, &tensors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedTraining {
    iteration: usize,
    seed: u64,
    g: usize,
    m: usize,
    max_interval: Option<usize>,
    learning_rate: f64,
    lr_schedule: Option<LrSchedule>,
    momentum: f64,
    dist_weight: f64,
}

fn parse_training_table(text: &str, path: &Path) -> Result<SavedTraining> {
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e| UbrError::format(path, format!("checkpoint config: {e}")))?;
    doc.remove("training")
        .ok_or_else(|| UbrError::CheckpointMismatch(format!("{} holds model weights only, not training state", path.display())))?
        .try_into()
        .map_err(|e| UbrError::format(path, format!("checkpoint [training]: {e}")))
}

/// Trains from scratch for `config.iterations`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    let mut trainer = Trainer::new(config.clone())?;
    let log = trainer.run(dataset, None)?;
    Ok((trainer.into_params(), log))
}

/// Continues a training checkpoint up to `config.iterations` in total.
pub fn resume(checkpoint: &Path, dataset: &Dataset, config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    let mut trainer = Trainer::resume(checkpoint, config.clone())?;
    let log = trainer.run(dataset, None)?;
    Ok((trainer.into_params(), log))
}
