//! Drives experiments and writes their artifacts: metrics.csv alongside
//! timings.csv (wall clock stays out of metrics.csv so reruns are
//! byte-identical), optional gradnorms.csv, checkpoints, and the resolved
//! config echo. Every file is written to a temp sibling and renamed so a
//! failure never leaves a partial artifact.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use fedzkt::data::make_partition;
use fedzkt::fed::{run_fedmd_baseline, run_fedzkt, FedRun, RoundMetrics};
use fedzkt::nn::checkpoint;

use crate::config::{load_datasets, load_public_dataset, Algorithm, ExperimentConfig};

/// Holds `<dir>/.lock` for the lifetime of an experiment; a second writer
/// fails fast instead of corrupting the artifacts.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "output directory {} is locked by another run (remove {} if it is stale)",
                    dir.display(),
                    path.display()
                )
            }
            Err(e) => Err(e).with_context(|| format!("creating lock {}", path.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes via a temp sibling plus rename; readers never see a torn file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} into place", tmp.display()))?;
    Ok(())
}

pub fn metrics_csv(metrics: &[RoundMetrics], devices: usize) -> String {
    let mut header = String::from("round,global_acc,avg_device_acc");
    for k in 0..devices {
        header.push_str(&format!(",dev_acc_{k}"));
    }
    header.push_str(",mean_loss_g,mean_loss_s,mean_loss_k");
    let mut out = header;
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{},{},{}",
            m.round,
            m.global_accuracy,
            m.average_device_accuracy()
        ));
        for acc in &m.device_accuracy {
            out.push_str(&format!(",{acc}"));
        }
        out.push_str(&format!(
            ",{},{},{}\n",
            m.mean_loss_g, m.mean_loss_s, m.mean_loss_k
        ));
    }
    out
}

pub fn timings_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from("round,wall_clock_seconds\n");
    for m in metrics {
        out.push_str(&format!("{},{}\n", m.round, m.wall_clock_seconds));
    }
    out
}

pub fn gradnorms_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from("round,kl,sl,l1\n");
    for m in metrics {
        if let Some(g) = &m.grad_norm_medians {
            out.push_str(&format!("{},{},{},{}\n", m.round, g.kl, g.sl, g.l1));
        }
    }
    out
}

fn write_checkpoints(dir: &Path, run: &FedRun) -> Result<()> {
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)
        .with_context(|| format!("creating {}", ckpt_dir.display()))?;
    let mut jobs = vec![
        ("global".to_string(), &run.server.global),
        ("generator".to_string(), &run.server.generator),
    ];
    for dev in &run.devices {
        jobs.push((format!("device-{}", dev.id), &dev.model));
    }
    for (name, net) in jobs {
        let manifest = ckpt_dir.join(format!("{name}.json"));
        let blob = ckpt_dir.join(format!("{name}.bin"));
        checkpoint::save(net, &manifest, &blob)
            .with_context(|| format!("checkpointing {name}"))?;
    }
    Ok(())
}

/// Runs the configured experiment and writes all artifacts under
/// `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    write_atomic(
        &cfg.output_dir.join("config.resolved.toml"),
        &cfg.to_resolved_toml()?,
    )?;

    let (train, test) = load_datasets(&cfg.dataset)?;
    let fed = &cfg.federation;
    let metrics = match cfg.algorithm {
        Algorithm::Fedzkt => {
            let run = run_fedzkt(fed, &train, &test)?;
            write_checkpoints(&cfg.output_dir, &run)?;
            if fed.log_gradient_norms {
                write_atomic(
                    &cfg.output_dir.join("gradnorms.csv"),
                    &gradnorms_csv(&run.metrics),
                )?;
            }
            run.metrics
        }
        Algorithm::Fedmd => {
            let public_cfg = cfg
                .public_dataset
                .as_ref()
                .expect("validated: fedmd has a public set");
            let public = load_public_dataset(public_cfg)?;
            run_fedmd_baseline(fed, &train, &test, &public)?
        }
    };

    write_atomic(
        &cfg.output_dir.join("metrics.csv"),
        &metrics_csv(&metrics, fed.device_count),
    )?;
    write_atomic(&cfg.output_dir.join("timings.csv"), &timings_csv(&metrics))?;

    if let Some(last) = metrics.last() {
        println!(
            "finished {} rounds: global_acc={:.4} avg_device_acc={:.4}",
            metrics.len(),
            last.global_accuracy,
            last.average_device_accuracy()
        );
    }
    Ok(())
}

/// Builds and writes the partition plan without training anything.
pub fn emit_partition(cfg: &ExperimentConfig) -> Result<()> {
    let (train, _) = load_datasets(&cfg.dataset)?;
    let fed = &cfg.federation;
    let plan = make_partition(&train, &fed.partition, fed.device_count, fed.seed)?;
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let path = cfg.output_dir.join("partition.json");
    write_atomic(&path, &serde_json::to_string_pretty(&plan)?)?;
    for (k, classes) in plan.distinct_classes_per_device(&train).iter().enumerate() {
        println!(
            "device {k}: {} samples over {classes} classes",
            plan.assignments[k].len()
        );
    }
    println!("plan written to {}", path.display());
    Ok(())
}

/// Long-format merge of one or more metrics.csv files: columns
/// experiment, round, series, value. Values are copied verbatim so the
/// output reprints the source decimals exactly.
pub fn emit_plot_data(metrics_dir: &Path, out_path: &Path) -> Result<()> {
    let mut sources: Vec<(String, PathBuf)> = Vec::new();
    let direct = metrics_dir.join("metrics.csv");
    if direct.is_file() {
        sources.push((dir_name(metrics_dir), direct));
    } else if metrics_dir.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(metrics_dir)
            .with_context(|| format!("reading {}", metrics_dir.display()))?
            .collect::<std::io::Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let candidate = entry.path().join("metrics.csv");
            if candidate.is_file() {
                sources.push((dir_name(&entry.path()), candidate));
            }
        }
    }
    if sources.is_empty() {
        bail!(
            "no metrics.csv found in {} or its direct subdirectories",
            metrics_dir.display()
        );
    }

    let mut out = String::from("experiment,round,series,value\n");
    for (experiment, path) in &sources {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .with_context(|| format!("{} is empty", path.display()))?;
        let columns: Vec<&str> = header.split(',').collect();
        if columns.first() != Some(&"round") {
            bail!("{} does not look like a metrics file", path.display());
        }
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                bail!(
                    "{}:{}: expected {} fields, found {}",
                    path.display(),
                    lineno + 2,
                    columns.len(),
                    fields.len()
                );
            }
            let round = fields[0];
            round.parse::<usize>().with_context(|| {
                format!("{}:{}: bad round index {round:?}", path.display(), lineno + 2)
            })?;
            for (series, value) in columns.iter().zip(&fields).skip(1) {
                value.parse::<f64>().with_context(|| {
                    format!(
                        "{}:{}: series {series} has non-numeric value {value:?}",
                        path.display(),
                        lineno + 2
                    )
                })?;
                out.push_str(&format!("{experiment},{round},{series},{value}\n"));
            }
        }
    }
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_atomic(out_path, &out)?;
    println!("plot data written to {}", out_path.display());
    Ok(())
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Runs the finite-difference suite and reports per-check errors.
pub fn run_gradcheck(seed: u64) -> Result<()> {
    const STEP: f64 = 1e-5;
    const SAMPLES: usize = 48;
    const TOLERANCE: f64 = 1e-4;
    let entries = fedzkt::gradcheck::standard_suite(STEP, SAMPLES, seed)?;
    let mut worst: f64 = 0.0;
    for entry in &entries {
        let s = &entry.summary;
        println!(
            "{:<44} checked {:>3}  max {:.3e}  mean {:.3e}",
            entry.name, s.checked, s.max_rel_error, s.mean_rel_error
        );
        worst = worst.max(s.max_rel_error);
    }
    if worst >= TOLERANCE {
        bail!("gradient check failed: max relative error {worst:.3e} >= {TOLERANCE:.0e}");
    }
    println!("all {} checks within {TOLERANCE:.0e}", entries.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedzkt::fed::GradNormMedians;

    fn sample_metrics() -> Vec<RoundMetrics> {
        vec![
            RoundMetrics {
                round: 0,
                device_accuracy: vec![0.5, 0.25],
                global_accuracy: 0.125,
                mean_loss_g: -0.75,
                mean_loss_s: 0.5,
                mean_loss_k: 0.0625,
                grad_norm_medians: Some(GradNormMedians {
                    kl: 0.001,
                    sl: 0.01,
                    l1: 0.1,
                }),
                wall_clock_seconds: 1.5,
            },
            RoundMetrics {
                round: 1,
                device_accuracy: vec![0.75, 0.25],
                global_accuracy: 0.5,
                mean_loss_g: -0.5,
                mean_loss_s: 0.25,
                mean_loss_k: 0.03125,
                grad_norm_medians: None,
                wall_clock_seconds: 1.25,
            },
        ]
    }

    #[test]
    fn metrics_csv_layout_is_stable() {
        let csv = metrics_csv(&sample_metrics(), 2);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "round,global_acc,avg_device_acc,dev_acc_0,dev_acc_1,mean_loss_g,mean_loss_s,mean_loss_k"
        );
        assert_eq!(lines.next().unwrap(), "0,0.125,0.375,0.5,0.25,-0.75,0.5,0.0625");
        assert_eq!(lines.next().unwrap(), "1,0.5,0.5,0.75,0.25,-0.5,0.25,0.03125");
        assert!(lines.next().is_none());
        assert!(!csv.contains("wall_clock"));
    }

    #[test]
    fn timings_and_gradnorms_layouts() {
        let metrics = sample_metrics();
        assert_eq!(
            timings_csv(&metrics),
            "round,wall_clock_seconds\n0,1.5\n1,1.25\n"
        );
        // Rounds without medians are skipped.
        assert_eq!(gradnorms_csv(&metrics), "round,kl,sl,l1\n0,0.001,0.01,0.1\n");
    }

    #[test]
    fn plot_data_round_trips_values_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let exp = dir.path().join("exp-a");
        fs::create_dir_all(&exp).unwrap();
        let csv = metrics_csv(&sample_metrics(), 2);
        fs::write(exp.join("metrics.csv"), &csv).unwrap();

        let out = dir.path().join("plot.csv");
        emit_plot_data(dir.path(), &out).unwrap();
        let plot = fs::read_to_string(&out).unwrap();
        let mut lines = plot.lines();
        assert_eq!(lines.next().unwrap(), "experiment,round,series,value");
        // 2 rounds x 7 series.
        assert_eq!(plot.lines().count(), 1 + 14);
        assert!(plot.contains("exp-a,0,global_acc,0.125"));
        assert!(plot.contains("exp-a,1,dev_acc_0,0.75"));
        assert!(plot.contains("exp-a,0,mean_loss_g,-0.75"));
    }

    #[test]
    fn plot_data_rejects_missing_and_corrupt_sources() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("plot.csv");
        let err = format!("{:#}", emit_plot_data(dir.path(), &out).unwrap_err());
        assert!(err.contains("no metrics.csv"), "{err}");

        let exp = dir.path().join("bad");
        fs::create_dir_all(&exp).unwrap();
        fs::write(exp.join("metrics.csv"), "round,x\n0,notanumber\n").unwrap();
        let err = format!("{:#}", emit_plot_data(dir.path(), &out).unwrap_err());
        assert!(err.contains("notanumber"), "{err}");
    }

    #[test]
    fn lock_blocks_second_writer() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        let err = format!("{:#}", DirLock::acquire(dir.path()).unwrap_err());
        assert!(err.contains("locked"), "{err}");
        drop(lock);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn atomic_write_leaves_no_temp_behind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_atomic(&path, "hello\n").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "hello\n");
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(leftovers.len(), 1);
    }
}
