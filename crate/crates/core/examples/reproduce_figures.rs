//! Plot-ready data for the standard figures at a reduced scale.
//!
//! Builds the figure configs around a small base experiment, runs them and
//! writes one CSV per figure to `target/figures` (or the directory given as
//! the first argument). The full-size configs are available from
//! `reproduce::configs(fig, Scale::Paper)`.
//!
//! ```text
//! cargo run --release --example reproduce_figures -- [out_dir]
//! ```

use std::path::PathBuf;

use resnet_eft::config::ExperimentConfig;
use resnet_eft::io::write_csv;
use resnet_eft::reproduce::{configs_from, reproduce, Figure, FigureData};

fn main() -> resnet_eft::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "target/figures".into());
    std::fs::create_dir_all(&out).map_err(|source| resnet_eft::Error::Io {
        path: out.clone(),
        source,
    })?;
    let mut base = ExperimentConfig::desk_baseline();
    base.network.width = 32;
    base.ensemble.members = 4_000;

    for fig in [Figure::Fig1, Figure::Fig3, Figure::Fig4, Figure::Table2] {
        let data = reproduce(fig, &configs_from(fig, &base)?)?;
        let path = out.join(format!("{fig}.csv"));
        match &data {
            FigureData::Series(rows) => write_csv(&path, rows)?,
            FigureData::Table(rows) => write_csv(&path, rows)?,
        }
        println!("{fig}: {} rows -> {}", data.len(), path.display());
    }
    Ok(())
}
