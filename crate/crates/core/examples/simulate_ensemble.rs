//! Monte-Carlo ensemble of randomly initialized ResNets.
//!
//! Runs a small ensemble and prints the mean kernel `Ḡ`, the measured
//! `K1_mic = n (Ḡ - K0)` and the kernel covariance `V4` at each checkpoint,
//! each with its jackknife standard error.
//!
//! ```text
//! cargo run --release --example simulate_ensemble -- [members]
//! ```

use resnet_eft::config::{CheckpointSpec, ExperimentConfig};
use resnet_eft::diagnostics::theory;
use resnet_eft::ensemble::run_ensemble;
use resnet_eft::PairIndex;

fn main() -> resnet_eft::Result<()> {
    let members = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5_000);
    let mut cfg = ExperimentConfig::desk_baseline();
    cfg.network.width = 32;
    cfg.ensemble.members = members;
    cfg.ensemble.checkpoints = CheckpointSpec::Count(4);

    let net = cfg.network()?;
    let ens = run_ensemble(&net, &cfg.run_options()?)?;
    let k0 = theory(&cfg)?.solution.k0;
    let idx = PairIndex::new(net.points());
    let s00 = idx.offset(0, 0);

    println!("n = {}, M = {members}", cfg.network.width);
    println!("{:>4} {:>5} {:>18} {:>18} {:>18}", "ell", "t", "G_00", "K1_mic(01)", "V4(00,00)");
    for &l in ens.checkpoints().layers() {
        let g = ens.mean_g(l)?;
        let k1 = ens.k1_mic(l, k0.at_layer(l)?)?;
        let v4 = ens.v4_emp(l)?;
        println!(
            "{l:>4} {:>5.2} {:>10.5} ± {:<6.4} {:>10.4} ± {:<6.3} {:>10.3} ± {:<6.3}",
            net.time(l),
            g.value.get(0, 0),
            g.se.get(0, 0),
            k1.value.get(0, 1),
            k1.se.get(0, 1),
            v4.value.matrix()[(s00, s00)],
            v4.se[(s00, s00)]
        );
    }
    Ok(())
}
