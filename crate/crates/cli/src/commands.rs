use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use ubr_core::diffcore::GradChecker;
use ubr_core::evaluate::{
    self, accuracy, anomaly_reports, calibrate_thresholds, classify_slices, histogram, score_volume, volume_metrics,
    ScoreCurve,
};
use ubr_core::network::load_params;
use ubr_core::phantom::{band_of, generate_dataset, read_labels, read_latent_sidecar, Dataset, LABELS_FILE, LATENT_SIDECAR_FILE};
use ubr_core::selfcheck::{grad_check_suite, CASE_NAMES};
use ubr_core::trainer::Trainer;

use crate::config::{RunConfig, RESOLVED_CONFIG_FILE};
use crate::{
    CalibrateArgs, ClassifyArgs, DetectArgs, GenDataArgs, GradCheckArgs, MetricsArgs, ScoreArgs, TrainArgs, EXIT_DATA,
};

/// Resolved arguments of a single-output command, stored as `<out>.run.toml`.
#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    command: &'a str,
    args: &'a T,
}

fn record_run<T: Serialize>(out: &Path, command: &str, args: &T) -> Result<()> {
    let mut path = out.as_os_str().to_owned();
    path.push(".run.toml");
    let path = PathBuf::from(path);
    let text = toml::to_string(&RunRecord { command, args }).context("serialising the run record")?;
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
        }
        _ => Ok(()),
    }
}

fn score_all(model: &Path, data: &Path) -> Result<(Dataset, Vec<ScoreCurve>)> {
    let params = load_params(model)?;
    let dataset = Dataset::load(data)?;
    let curves = dataset
        .volumes()
        .iter()
        .map(|v| score_volume(&params, v))
        .collect::<ubr_core::Result<Vec<_>>>()?;
    Ok((dataset, curves))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.set_seed(a.seed.unwrap_or(cfg.seed));
    if let Some(n) = a.volumes {
        cfg.dataset.volumes = n;
    }
    if let Some(f) = a.anomaly_fraction {
        cfg.dataset.anomaly_fraction = f;
    }
    if let Some(k) = a.anomaly_kinds {
        cfg.dataset.anomaly_kinds = k;
    }
    if let Some(s) = a.image_size {
        cfg.phantom.image_size = [s, s];
    }
    if let Some(n) = a.min_slices {
        cfg.phantom.slices_range[0] = n;
    }
    if let Some(n) = a.max_slices {
        cfg.phantom.slices_range[1] = n;
    }
    if let Some(s) = a.noise_sigma {
        cfg.phantom.noise_sigma = s;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let d = &cfg.dataset;
    let entries = generate_dataset(&a.out, d.volumes, &cfg.phantom, d.anomaly_fraction, &d.anomaly_kinds, cfg.seed)?;
    cfg.write(&a.out.join(RESOLVED_CONFIG_FILE))?;
    let anomalous = entries.iter().filter(|e| e.anomaly.is_some()).count();
    println!("wrote {} volumes ({anomalous} anomalous) to {}", entries.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.set_seed(a.seed.unwrap_or(cfg.seed));
    let t = &mut cfg.train;
    t.iterations = a.iterations.unwrap_or(t.iterations);
    t.learning_rate = a.lr.unwrap_or(t.learning_rate);
    t.momentum = a.momentum.unwrap_or(t.momentum);
    t.dist_weight = a.dist_weight.unwrap_or(t.dist_weight);
    t.checkpoint_period = a.checkpoint_period.unwrap_or(t.checkpoint_period);
    cfg.sampler.g = a.g.unwrap_or(cfg.sampler.g);
    cfg.sampler.m = a.m.unwrap_or(cfg.sampler.m);
    if a.max_interval.is_some() {
        cfg.sampler.max_interval = a.max_interval;
    }

    let dataset = Dataset::load(&a.data)?;
    let Some(size) = dataset.image_size() else {
        bail!("dataset {} has no volumes", a.data.display());
    };
    if cfg.network.input_size != size {
        log::info!("network input size set to the dataset's {}×{}", size[0], size[1]);
        cfg.network.input_size = size;
    }

    let config = cfg.train_config();
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(path, config)?,
        None => Trainer::new(config)?,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    cfg.write(&a.out.join(RESOLVED_CONFIG_FILE))?;
    let log = trainer.run(&dataset, Some(&a.out))?;
    log.write(&a.out.join("train-log.tsv"))?;
    let last = log.records.last().map_or(f64::NAN, |r| r.total);
    println!(
        "trained to iteration {} in {:.1}s, final total loss {last:.4}; checkpoint {}",
        trainer.iteration(),
        log.wall_clock.as_secs_f64(),
        a.out.join("final.ubrc").display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn score(a: ScoreArgs) -> Result<ExitCode> {
    let (_, curves) = score_all(&a.model, &a.data)?;
    create_parent(&a.out)?;
    evaluate::write_score_curves(&a.out, &curves)?;
    record_run(&a.out, "score", &a)?;
    println!("scored {} volumes", curves.len());
    Ok(ExitCode::SUCCESS)
}

pub fn calibrate(a: CalibrateArgs) -> Result<ExitCode> {
    let params = load_params(&a.model)?;
    let dataset = Dataset::load(&a.data)?;
    let labels_path = a.labels.clone().unwrap_or_else(|| a.data.join(LABELS_FILE));
    let labels = read_labels(&labels_path)?;
    let (mut scores, mut truth) = (Vec::new(), Vec::new());
    for id in &a.volumes {
        let volume = dataset.get(id).ok_or_else(|| ubr_core::UbrError::UnknownVolume(id.clone()))?;
        let Some(l) = labels.get(id) else {
            bail!("{}: no labels for volume `{id}`", labels_path.display());
        };
        ensure!(
            l.len() == volume.len(),
            "{}: volume `{id}` has {} labels for {} slices",
            labels_path.display(),
            l.len(),
            volume.len()
        );
        scores.extend(score_volume(&params, volume)?.scores);
        truth.extend_from_slice(l);
    }
    let cal = calibrate_thresholds(&scores, &truth)?;
    create_parent(&a.out)?;
    evaluate::write_thresholds(&a.out, &cal.thresholds)?;
    record_run(&a.out, "calibrate", &a)?;
    println!(
        "t1 = {}, t2 = {}; calibration accuracy {:.4} over {} slices",
        cal.thresholds.t1,
        cal.thresholds.t2,
        cal.accuracy,
        scores.len()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn classify(a: ClassifyArgs) -> Result<ExitCode> {
    let thresholds = evaluate::read_thresholds(&a.thresholds)?;
    let (_, curves) = score_all(&a.model, &a.data)?;
    create_parent(&a.out)?;
    evaluate::write_classifications(&a.out, &curves, &thresholds)?;
    record_run(&a.out, "classify", &a)?;
    let n: usize = curves.iter().map(|c| c.scores.len()).sum();
    println!("classified {n} slices in {} volumes", curves.len());
    if let Some(path) = &a.labels {
        let labels = read_labels(path)?;
        let (mut predicted, mut truth) = (Vec::new(), Vec::new());
        for c in &curves {
            if let Some(l) = labels.get(&c.volume_id) {
                ensure!(l.len() == c.scores.len(), "{}: volume `{}` has {} labels for {} slices", path.display(), c.volume_id, l.len(), c.scores.len());
                predicted.extend(classify_slices(&c.scores, &thresholds));
                truth.extend_from_slice(l);
            }
        }
        ensure!(!truth.is_empty(), "{}: no labels for any scored volume", path.display());
        println!("accuracy {:.4} over {} labelled slices", accuracy(&predicted, &truth)?, truth.len());
    }
    Ok(ExitCode::SUCCESS)
}

pub fn detect_anomaly(a: DetectArgs) -> Result<ExitCode> {
    ensure!((-1.0..=1.0).contains(&a.r_threshold), "--r-threshold must lie in [-1, 1], got {}", a.r_threshold);
    let (_, curves) = score_all(&a.model, &a.data)?;
    let reports = anomaly_reports(&curves, a.r_threshold);
    create_parent(&a.out)?;
    evaluate::write_anomaly_reports(&a.out, &reports)?;
    record_run(&a.out, "detect-anomaly", &a)?;
    let flagged = reports.iter().filter(|r| r.flagged).count();
    println!("{flagged} of {} volumes flagged at r < {}", reports.len(), a.r_threshold);
    if a.fail_on_flag && flagged > 0 {
        return Ok(ExitCode::from(EXIT_DATA));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn grad_check(a: GradCheckArgs) -> Result<ExitCode> {
    ensure!(a.seeds > 0, "--seeds must be positive");
    ensure!(a.step > 0.0 && a.tolerance > 0.0, "--step and --tolerance must be positive");
    let report = grad_check_suite(a.seed..a.seed + a.seeds, GradChecker::new(a.step, a.tolerance))?;
    for name in CASE_NAMES {
        let cases: Vec<_> = report.cases.iter().filter(|c| c.name == name).collect();
        let worst = cases.iter().map(|c| c.report.max_rel_error()).fold(0.0, f64::max);
        let failed = cases.iter().filter(|c| !c.report.passed()).count();
        println!("{name:<18} max rel error {worst:.3e}  failed seeds {failed}/{}", cases.len());
    }
    println!(
        "{} elements checked, {} skipped at kinks; max rel error {:.3e} (tolerance {:e})",
        report.checked(),
        report.skipped(),
        report.max_rel_error(),
        a.tolerance
    );
    if report.passed() {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL");
        Ok(ExitCode::from(EXIT_DATA))
    }
}

pub fn metrics(a: MetricsArgs) -> Result<ExitCode> {
    let (mut dataset, curves) = score_all(&a.model, &a.data)?;
    let sidecar = a.sidecar.clone().unwrap_or_else(|| a.data.join(LATENT_SIDECAR_FILE));
    let latents: BTreeMap<String, Vec<f64>> = read_latent_sidecar(&sidecar)?;
    dataset.attach_latents(&latents).with_context(|| format!("attaching {}", sidecar.display()))?;
    let metrics = curves
        .iter()
        .zip(dataset.volumes())
        .map(|(c, v)| volume_metrics(c, v.latent.as_deref().expect("attached")))
        .collect::<ubr_core::Result<Vec<_>>>()?;
    create_parent(&a.out)?;
    evaluate::write_volume_metrics(&a.out, &metrics)?;
    if let Some(path) = &a.histogram {
        let scores: Vec<f64> = curves.iter().flat_map(|c| c.scores.iter().copied()).collect();
        let bands: Vec<u8> = dataset.volumes().iter().flat_map(|v| v.latent.as_ref().expect("attached").iter().map(|&z| band_of(z))).collect();
        create_parent(path)?;
        evaluate::write_histogram(path, &histogram(&scores, &bands, a.bin_width)?)?;
    }
    record_run(&a.out, "metrics", &a)?;
    let n = metrics.len() as f64;
    println!(
        "{} volumes: median r {:.4}, median Spearman {:.4}, mean pairwise accuracy {:.4}, mean R² {:.4}",
        metrics.len(),
        median(metrics.iter().map(|m| m.pearson_r).collect()),
        median(metrics.iter().map(|m| m.ordering.spearman).collect()),
        metrics.iter().map(|m| m.ordering.pairwise_accuracy).sum::<f64>() / n,
        metrics.iter().map(|m| m.ordering.r_squared).sum::<f64>() / n,
    );
    Ok(ExitCode::SUCCESS)
}
