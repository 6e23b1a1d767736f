//! `pixelcam report`: compares finished evaluation runs side by side.
//! Produces a comparison table (CSV and markdown), paired t-tests over the
//! shared per-image scores, and per-run histograms of the separability
//! index.

use crate::evaluate::EvalRecord;
use crate::manifest::{prepare_out_dir, tool_version, write_manifest, RunManifest};
use anyhow::{bail, Context, Result};
use pixelcam::metrics::{histogram_csv, j_histogram, paired_t_test, ttest_csv, TTest};
use std::fs;
use std::path::PathBuf;

#[derive(clap::Args)]
pub struct Args {
    /// Evaluation run directories, compared in the given order; the first
    /// is the reference for the delta column.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Output directory for the comparison.
    #[arg(long)]
    out: PathBuf,
    /// Bins for the separability-index histograms.
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

struct Run {
    name: String,
    record: EvalRecord,
}

fn load_runs(paths: &[PathBuf]) -> Result<Vec<Run>> {
    let mut runs = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let file = p.join("evaluation.json");
        let record: EvalRecord = serde_json::from_slice(
            &fs::read(&file).with_context(|| format!("reading {}", file.display()))?,
        )
        .with_context(|| format!("parsing {}", file.display()))?;
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("run{i}"));
        runs.push(Run { name, record });
    }
    Ok(runs)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn comparison_rows(runs: &[Run]) -> Vec<[String; 8]> {
    let reference = runs[0].record.metrics.pxap;
    runs.iter()
        .map(|r| {
            let m = &r.record.metrics;
            [
                r.name.clone(),
                r.record.map_source.clone(),
                format!("{:.6}", m.pxap),
                format!("{:+.6}", m.pxap - reference),
                format!("{:.6}", m.cl_acc),
                format!("{:.6}", r.record.threshold),
                format!("{:.6}", mean(&m.per_image_ap)),
                format!("{:.6}", mean(&m.per_image_j)),
            ]
        })
        .collect()
}

const COLUMNS: [&str; 8] = [
    "run",
    "map_source",
    "pxap",
    "delta_pxap",
    "cl_accuracy",
    "threshold",
    "mean_image_ap",
    "mean_image_j",
];

fn comparison_csv(rows: &[[String; 8]]) -> String {
    let mut s = COLUMNS.join(",");
    s.push('\n');
    for row in rows {
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn comparison_md(rows: &[[String; 8]]) -> String {
    let mut s = format!("| {} |\n", COLUMNS.join(" | "));
    s.push_str(&format!("|{}\n", " --- |".repeat(COLUMNS.len())));
    for row in rows {
        s.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    s
}

/// Paired tests between every run pair. All runs are already known to share
/// the same sample ids; a pair still drops out when the per-image vectors
/// disagree in length (different images were skipped).
fn t_test_rows(runs: &[Run]) -> Vec<(String, TTest)> {
    let mut rows = Vec::new();
    for i in 0..runs.len() {
        for j in (i + 1)..runs.len() {
            let (a, b) = (&runs[i], &runs[j]);
            let pairs = [
                ("ap", &a.record.metrics.per_image_ap, &b.record.metrics.per_image_ap),
                ("j", &a.record.metrics.per_image_j, &b.record.metrics.per_image_j),
            ];
            for (what, va, vb) in pairs {
                if va.len() != vb.len() || va.len() < 2 {
                    log::warn!(
                        "skipping the {} vs {} {what} test: {} vs {} values",
                        a.name,
                        b.name,
                        va.len(),
                        vb.len()
                    );
                    continue;
                }
                match paired_t_test(va, vb) {
                    Ok(tt) => rows.push((format!("{} vs {} ({what})", a.name, b.name), tt)),
                    Err(e) => log::warn!("{} vs {} {what} test failed: {e}", a.name, b.name),
                }
            }
        }
    }
    rows
}

pub fn run(args: Args) -> Result<()> {
    let runs = load_runs(&args.runs)?;
    for r in &runs[1..] {
        if r.record.sample_ids != runs[0].record.sample_ids
            || r.record.domain != runs[0].record.domain
        {
            bail!(
                "run {} was evaluated on different samples than {}; \
                 comparisons need a shared test split",
                r.name,
                runs[0].name
            );
        }
    }
    prepare_out_dir(&args.out, args.force)?;
    let mut outputs = Vec::new();

    let rows = comparison_rows(&runs);
    fs::write(args.out.join("comparison.csv"), comparison_csv(&rows))?;
    fs::write(args.out.join("comparison.md"), comparison_md(&rows))?;
    outputs.extend(["comparison.csv".to_string(), "comparison.md".to_string()]);

    fs::write(args.out.join("ttests.csv"), ttest_csv(&t_test_rows(&runs)))?;
    outputs.push("ttests.csv".into());

    for r in &runs {
        let hist = j_histogram(&r.record.metrics.per_image_j, args.bins)?;
        let name = format!("hist-j-{}.csv", r.name);
        fs::write(args.out.join(&name), histogram_csv(&hist))?;
        outputs.push(name);
    }

    write_manifest(
        &args.out,
        &RunManifest {
            command: "report".into(),
            config: serde_json::json!({ "bins": args.bins }),
            seed: 0,
            inputs: args.runs.iter().map(|p| p.display().to_string()).collect(),
            outputs,
            tool_version: tool_version(),
        },
    )
}
