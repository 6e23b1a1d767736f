//! `pixelcam generate`: writes a dataset (three splits, sidecars, split
//! manifests) from a JSON config, defaulting every field.

use crate::manifest::{prepare_out_dir, tool_version, write_manifest, RunManifest};
use anyhow::{Context, Result};
use pixelcam::storage::save_dataset;
use pixelcam::synth::{generate_dataset, GenConfig};
use std::fs;
use std::path::PathBuf;

#[derive(clap::Args)]
pub struct Args {
    /// Generation config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Print the effective config as JSON and exit without writing.
    #[arg(long)]
    print_config: bool,
}

pub fn run(args: Args) -> Result<()> {
    let mut config: GenConfig = match &args.config {
        Some(path) => serde_json::from_slice(
            &fs::read(path).with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("parsing {}", path.display()))?,
        None => GenConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(());
    }

    let out = args.out.context("--out is required")?;
    prepare_out_dir(&out, args.force)?;
    let data = generate_dataset(&config)?;
    save_dataset(&out, &data, &config)?;
    log::info!(
        "wrote {} train / {} val / {} test samples to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        out.display()
    );

    write_manifest(
        &out,
        &RunManifest {
            command: "generate".into(),
            config: serde_json::to_value(&config)?,
            seed: config.seed,
            inputs: Vec::new(),
            outputs: vec![
                "genconfig.json".into(),
                "train.json".into(),
                "val.json".into(),
                "test.json".into(),
                "train/".into(),
                "val/".into(),
                "test/".into(),
            ],
            tool_version: tool_version(),
        },
    )
}
