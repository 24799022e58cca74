//! `fundus-seg`: fixtures, training, calibration, inference, evaluation and gradient checks.
//!
//! Exit status: 0 on success, 1 for usage, I/O, data or configuration errors, 2 for
//! numerical failures (training divergence, gradient-check breach).

#![allow(clippy::field_reassign_with_default, clippy::needless_range_loop)]

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fundus_seg::data::{load_manifest, load_ppm, save_pgm};
use fundus_seg::eval::{
    calibrate_dataset, centroid, curves_csv, default_grid, evaluate, predict_image, threshold_plane, upsample_nearest,
    Ensemble, ThresholdSet,
};
use fundus_seg::gradcheck::{run_suite, TOLERANCE};
use fundus_seg::train::train_with_observer;
use fundus_seg::{class, CLASS_NAMES, NUM_SCORED};

use config::{keys_help, RunConfig, CONFIG_FILE};

#[derive(Parser, Debug)]
#[command(name = "fundus-seg", version, about = "Lesion and optic-disk segmentation of fundus images")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic dataset with exact masks and a manifest.
    GenFixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value = "32x32", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train the per-class checkpoint ensemble.
    #[command(after_help = keys_help())]
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose per-class thresholds on the validation split.
    Calibrate {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curves: PathBuf,
    },
    /// Segment one image into per-class masks and locate the optic disk.
    Infer {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        thresholds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_boost: bool,
        #[arg(long, value_parser = parse_size)]
        full_res: Option<(usize, usize)>,
    },
    /// Report metrics and optic-disk localization on the test split.
    Eval {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        thresholds: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        loc: PathBuf,
    },
    /// Finite-difference check of every layer and the full network.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err(format!("size {s:?} has a zero side"));
    }
    Ok((w, h))
}

/// A failure that should exit with status 2.
#[derive(Debug)]
struct Numerical(String);

impl fmt::Display for Numerical {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenFixtures { out, count, size, seed } => {
            let m = fundus_seg::data::gen_fixtures(seed, count, size.0, size.1, &out)?;
            println!("wrote {} fixtures to {}", m.records.len(), out.display());
        }
        Cmd::Train { config, data, out } => {
            let mut cfg = RunConfig::load(&config)?;
            let manifest = load_manifest(&data)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_file(&out.join(CONFIG_FILE), cfg.to_text())?;
            cfg.train.out_dir = out.clone();
            let (ens, history) = train_with_observer(&cfg.train, &manifest, &mut |row| {
                eprintln!("epoch {:>4}  train {:.6}  val {:.6}", row.epoch, row.train_loss, row.val.total);
            })?;
            println!(
                "trained {} epochs; best total val loss {} at epoch {}; ensemble in {}",
                history.rows.len(),
                ens.total.val_loss,
                ens.total.epoch,
                out.display()
            );
        }
        Cmd::Calibrate { ensemble, data, out, curves } => {
            let cfg = RunConfig::for_ensemble(&ensemble)?;
            let ens = Ensemble::load(&ensemble)?;
            let manifest = load_manifest(&data)?;
            let cal = calibrate_dataset(&ens, &manifest, &cfg.train.prep, cfg.boost, &default_grid())?;
            write_file(&out, cal.thresholds.to_csv())?;
            write_file(&curves, curves_csv(&cal.curves))?;
            for (c, t) in cal.thresholds.0.iter().enumerate() {
                println!("{} {t:.4}", CLASS_NAMES[c]);
            }
        }
        Cmd::Infer { ensemble, image, thresholds, out, no_boost, full_res } => {
            let cfg = RunConfig::for_ensemble(&ensemble)?;
            let ens = Ensemble::load(&ensemble)?;
            let ts = ThresholdSet::load(&thresholds)?;
            let raw = load_ppm(&image)?;
            let mut probs = predict_image(&ens, &raw, &cfg.train.prep, cfg.boost && !no_boost)?;
            if let Some((w, h)) = full_res {
                probs = upsample_nearest(&probs, w, h)?;
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            let mut od = None;
            for c in 0..NUM_SCORED {
                let m = threshold_plane(probs.plane(c), probs.width, probs.height, ts.0[c]);
                save_pgm(&m.to_gray(), out.join(format!("{stem}_{}.pgm", CLASS_NAMES[c])))?;
                if c == class::OD {
                    od = centroid(&m);
                }
            }
            let (x, y) = od.map_or((String::new(), String::new()), |(x, y)| (x.to_string(), y.to_string()));
            write_file(&out.join("centroid.csv"), format!("image,x,y\n{stem},{x},{y}\n"))?;
            match od {
                Some((x, y)) => println!("optic disk centroid ({x:.2}, {y:.2})"),
                None => println!("no optic disk found"),
            }
        }
        Cmd::Eval { ensemble, data, thresholds, report, loc } => {
            let cfg = RunConfig::for_ensemble(&ensemble)?;
            let ens = Ensemble::load(&ensemble)?;
            let ts = ThresholdSet::load(&thresholds)?;
            let manifest = load_manifest(&data)?;
            let r = evaluate(&ens, &manifest, &ts, &cfg.train.prep, cfg.boost, cfg.loc_penalty)?;
            write_file(&report, r.report_csv())?;
            write_file(&loc, r.loc_csv())?;
            for row in &r.rows {
                println!(
                    "{:<4} SE {:.4}  PPV {:.4}  Jaccard {:.4}  AUC {:.4}",
                    CLASS_NAMES[row.class], row.metrics.sensitivity, row.metrics.ppv, row.jaccard, row.auc
                );
            }
            match r.mean_distance {
                Some(d) => println!("mean optic-disk distance {d:.3} px over {} images", r.loc.len()),
                None => println!("no optic-disk centres in the test split"),
            }
        }
        Cmd::Gradcheck { seed } => {
            let results = run_suite(seed)?;
            for r in &results {
                println!("{:<18} max rel err {:.3e}  ({} checked)", r.name, r.max_rel_err, r.checked);
            }
            let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                bail!(Numerical(format!("gradient check above {TOLERANCE:e}: {}", failed.join(", "))));
            }
            println!("all gradients within {TOLERANCE:e}");
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        c.downcast_ref::<Numerical>().is_some()
            || c.downcast_ref::<fundus_seg::Error>().is_some_and(|e| e.is_numerical())
    });
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("4288x2848"), Ok((4288, 2848)));
        assert_eq!(parse_size("32X16"), Ok((32, 16)));
        assert!(parse_size("32").is_err());
        assert!(parse_size("0x4").is_err());
        assert!(parse_size("ax4").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&anyhow::Error::new(fundus_seg::Error::Divergence { epoch: 3 })), 2);
        assert_eq!(exit_code(&anyhow::Error::new(Numerical("x".into()))), 2);
        assert_eq!(exit_code(&anyhow::Error::new(fundus_seg::Error::Config("x".into()))), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
