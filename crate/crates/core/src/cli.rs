//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{analyze_offsets, evaluate_recall, to_csv_string, DecileSummary};
use crate::geometry::generate_anchors;
use crate::training::head::{HeadVariant, ToyHead};
use crate::training::{eval_scenes, train};
use crate::verify::{grad_check, selftest, CheckResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

pub const HEAD_FILE: &str = "head.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Parser)]
#[command(
    name = "klrpn",
    version,
    about = "Train and inspect uncertainty-scored region proposal heads"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a head and write it with its history to DIR.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.variant` from the config.
        #[arg(long, value_parser = parse_variant)]
        variant: Option<HeadVariant>,
    },
    /// Print recall@k at IoU 0.5 and 0.7 on the held-out scenes as CSV.
    Evaluate {
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Offset error by objectness decile for a KL-RPN and a baseline head.
    AnalyzeOffsets {
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        baseline_head: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients and the closed-form KL with numerical oracles.
    GradCheck,
    /// NMS, geometry, assignment and stationary-point checks.
    Selftest,
}

fn parse_variant(s: &str) -> std::result::Result<HeadVariant, String> {
    match s {
        "kl_rpn" => Ok(HeadVariant::KlRpn),
        "baseline_rpn" => Ok(HeadVariant::BaselineRpn),
        other => Err(format!("unknown variant `{other}` (expected kl_rpn or baseline_rpn)")),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_VALIDATION,
    }
}

pub fn write_head(head: &ToyHead, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(head).map_err(|e| Error::Domain(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_head(path: &Path) -> Result<ToyHead> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let head: ToyHead = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    head.check()?;
    Ok(head)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn records_file(variant: HeadVariant) -> String {
    format!("records_{}.csv", variant.name())
}

pub fn cmd_train(config: &Path, out: &Path, variant: Option<HeadVariant>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(v) = variant {
        cfg.train.variant = v;
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (head, history) = train(&cfg)?;
    write_head(&head, &out.join(HEAD_FILE))?;
    history.write(&out.join(HISTORY_FILE))?;
    write_text(&out.join(RESOLVED_CONFIG_FILE), &cfg.to_toml_string()?)?;
    if let Some(r) = history.final_recall() {
        eprintln!(
            "trained {} for {} steps, recall@300@0.5 = {r:.4}",
            head.variant.name(),
            history.records.len()
        );
    }
    Ok(())
}

pub fn cmd_evaluate(head: &Path, config: &Path) -> Result<String> {
    let cfg = RunConfig::load(config)?;
    let head = read_head(head)?;
    check_feature_dim(&head, &cfg)?;
    let anchors = generate_anchors(&cfg.grid);
    let scenes = eval_scenes(&cfg, &anchors);
    evaluate_recall(&head, &anchors, &scenes, &cfg.proposal, &[300, 1000], &[0.5, 0.7])?.to_csv()
}

fn check_feature_dim(head: &ToyHead, cfg: &RunConfig) -> Result<()> {
    if head.feature_dim != cfg.scene.feature_dim {
        return Err(Error::config(
            "scene.feature_dim",
            format!(
                "head expects {} features, config produces {}",
                head.feature_dim, cfg.scene.feature_dim
            ),
        ));
    }
    Ok(())
}

pub fn cmd_analyze_offsets(head: &Path, baseline_head: &Path, config: &Path, out: &Path) -> Result<Vec<DecileSummary>> {
    let cfg = RunConfig::load(config)?;
    let kl = read_head(head)?;
    let baseline = read_head(baseline_head)?;
    for (h, want, flag) in [
        (&kl, HeadVariant::KlRpn, "--head"),
        (&baseline, HeadVariant::BaselineRpn, "--baseline-head"),
    ] {
        if h.variant != want {
            return Err(Error::config(flag, format!("expected a {} head", want.name())));
        }
        check_feature_dim(h, &cfg)?;
    }
    let report = analyze_offsets(&kl, &baseline, &cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (variant, analysis) in [
        (HeadVariant::KlRpn, &report.kl),
        (HeadVariant::BaselineRpn, &report.baseline),
    ] {
        write_text(&out.join(records_file(variant)), &to_csv_string(&analysis.records)?)?;
        if analysis.skipped_scenes > 0 {
            eprintln!(
                "warning: {}: skipped {} scene(s) without proposals overlapping a ground truth",
                variant.name(),
                analysis.skipped_scenes
            );
        }
    }
    write_text(&out.join(SUMMARY_FILE), &to_csv_string(&report.summary)?)?;
    Ok(report.summary)
}

fn print_report(results: &[CheckResult]) -> i32 {
    for r in results {
        println!("{r}");
    }
    if results.iter().all(CheckResult::passed) {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Train { config, out, variant } => cmd_train(&config, &out, variant).map(|_| EXIT_OK),
        Command::Evaluate { head, config } => cmd_evaluate(&head, &config).map(|csv| {
            print!("{csv}");
            EXIT_OK
        }),
        Command::AnalyzeOffsets {
            head,
            baseline_head,
            config,
            out,
        } => cmd_analyze_offsets(&head, &baseline_head, &config, &out).map(|summary| {
            for s in &summary {
                println!(
                    "{:<13} {} top={:.4} bottom={:.4} p={:.4}",
                    s.head,
                    s.coordinate.name(),
                    s.median_top,
                    s.median_bottom,
                    s.p_value
                );
            }
            EXIT_OK
        }),
        Command::GradCheck => grad_check().map(|r| print_report(&r)),
        Command::Selftest => Ok(print_report(&selftest())),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}
