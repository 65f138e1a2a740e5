//! End-to-end comparison of a simulated ensemble with the flows.
//!
//! Runs a reduced version of the desk baseline (tanh, n = 64, ε = 0.1,
//! T = 2), prints the Σ comparison table and evaluates the validation
//! criteria a single run can settle. With the reduced ensemble some
//! statistical criteria are expected to miss; pass `100000` for the full
//! desk-scale ensemble (a few minutes per core).
//!
//! ```text
//! cargo run --release --example diagnose_baseline -- [members]
//! ```

use resnet_eft::config::ExperimentConfig;
use resnet_eft::criteria;
use resnet_eft::diagnostics::{diagnose, theory};
use resnet_eft::ensemble::run_ensemble;
use resnet_eft::reproduce::table2_rows;

fn main() -> resnet_eft::Result<()> {
    let members = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let mut cfg = ExperimentConfig::desk_baseline();
    cfg.ensemble.members = members;
    cfg.ensemble.checkpoints = resnet_eft::config::CheckpointSpec::Count(40);
    cfg.diagnostics.checks.retain(|c| c.name() != "hierarchy");

    let ens = run_ensemble(&cfg.network()?, &cfg.run_options()?)?;
    let th = theory(&cfg)?;
    let results = diagnose(&cfg, &ens, &th);
    for (check, r) in &results {
        match r {
            Ok(rep) => println!("{:<16} {} rows", check.name(), rep.rows.len()),
            Err(e) => println!("{:<16} skipped: {e}", check.name()),
        }
    }

    if let Some((_, Ok(sigma))) = results.iter().find(|(c, _)| c.name() == "sigma_sources") {
        println!("\n{:>4} {:>18} {:>10} {:>18}", "t", "Sigma_mic", "Sigma(K0)", "rel. err");
        for row in table2_rows(sigma, cfg.network.eps) {
            println!(
                "{:>4} {:>9.4} ± {:<6.4} {:>10.4} {:>+9.4} ± {:<6.4}",
                row.t, row.sigma_mic, row.sigma_mic_se, row.sigma_k0, row.rel_err, row.rel_err_se
            );
        }
    }

    println!();
    for outcome in criteria::evaluate(&cfg, &ens, &th, &results) {
        println!("{outcome}");
    }
    Ok(())
}
