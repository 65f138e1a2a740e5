//! Splitting an ensemble over member ranges and merging the pieces.
//!
//! Every member draws from its own counter-addressed random streams, so
//! disjoint ranges can run on different machines and their fixed-point sums
//! merge into exactly the sums of one full run. The merged run is written
//! to a run directory and read back the way `resnet-eft diagnose` does.
//!
//! ```text
//! cargo run --release --example sharded_runs
//! ```

use resnet_eft::config::{CheckpointSpec, ExperimentConfig};
use resnet_eft::ensemble::{run_ensemble, run_members};
use resnet_eft::io::{load_ensemble, RunDir};

fn main() -> resnet_eft::Result<()> {
    let mut cfg = ExperimentConfig::desk_baseline();
    cfg.network.width = 16;
    cfg.network.depth = 50;
    cfg.ensemble.members = 3_000;
    cfg.ensemble.checkpoints = CheckpointSpec::Count(5);
    let (net, opts) = (cfg.network()?, cfg.run_options()?);

    let shards = [0..1_000, 1_000..2_200, 2_200..3_000];
    let mut merged = run_members(&net, &opts, shards[0].clone(), true)?;
    for range in &shards[1..] {
        merged.merge(&run_members(&net, &opts, range.clone(), true)?)?;
    }
    let full = run_ensemble(&net, &opts)?;
    println!("merged {shards:?}: members {:?}", merged.member_range());
    println!("sums identical to a single run: {}", merged.sums() == full.sums());

    let dir = std::env::temp_dir().join("resnet-eft-sharded-example");
    let mut run = RunDir::create(&dir, "simulate", &cfg)?;
    run.write_ensemble(&merged)?;
    run.finish()?;
    let (manifest, loaded) = load_ensemble(&dir)?;
    let last = *loaded.checkpoints().layers().last().unwrap();
    println!(
        "reloaded from {}: seed {}, G_00 at layer {last} = {:.5}",
        dir.display(),
        manifest.master_seed,
        loaded.mean_g(last)?.value.get(0, 0)
    );
    Ok(())
}
