//! Identities that hold exactly at any width, checked on simulated members.
//!
//! - the exact `K1` source vanishes at initialization, while the tadpole
//!   model of it does not;
//! - the one-layer bridge between the kernel four-point function and the
//!   neuron four-point function, in heavy mode;
//! - the one-step kernel identity on individual re-simulated members.
//!
//! ```text
//! cargo run --release --example exact_identities
//! ```

use resnet_eft::config::{CheckpointSpec, ExperimentConfig};
use resnet_eft::diagnostics::{bridge_check, theory, u1_sources};
use resnet_eft::ensemble::{run_ensemble, simulate_member};

fn main() -> resnet_eft::Result<()> {
    let mut cfg = ExperimentConfig::desk_baseline();
    cfg.network.width = 16;
    cfg.network.depth = 20;
    cfg.network.inputs = 2;
    cfg.ensemble.members = 20_000;
    cfg.ensemble.heavy = true;
    cfg.ensemble.checkpoints = CheckpointSpec::Layers(vec![0, 1, 10, 11, 19, 20]);
    cfg.diagnostics.pair_components = vec![[0, 0, 0, 0], [0, 1, 0, 1], [0, 0, 1, 1]];
    let (net, opts) = (cfg.network()?, cfg.run_options()?);

    let ens = run_ensemble(&net, &opts)?;
    let th = theory(&cfg)?;
    let sol = &th.solution;
    let u1 = u1_sources(&ens, &sol.k0, &sol.v4, &sol.k1, &th.model, &cfg.diagnostics.kernel_components)?;
    for row in u1.rows.iter().filter(|r| r.layer == 0) {
        match row.std_error() {
            Some(se) => println!("{} {} = {:+.4} ± {:.4}", row.estimator, row.component, row.estimate, se),
            None => println!("{} {} = {:+.4}", row.estimator, row.component, row.estimate),
        }
    }

    let bridge = bridge_check(&ens, &cfg.diagnostics.pair_components)?;
    println!(
        "bridge residual: {} rows, max |z| = {:.2}",
        bridge.rows_for("bridge_exact").count(),
        bridge.max_abs_z("bridge_exact").unwrap_or(0.0)
    );

    let worst = (0..100)
        .map(|m| simulate_member(&net, &opts, m * 200).map(|(_, w)| w))
        .collect::<resnet_eft::Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    println!("one-step identity over 100 members: max relative violation {worst:.2e}");
    Ok(())
}
