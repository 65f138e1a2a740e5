//! Width sweep of the finite-width deviation from the infinite-width kernel.
//!
//! Each point runs its own ensemble; the largest `|Ḡ - K0|` over all
//! checkpoints is fitted to a power law in `n`, which approaches `n⁻¹`
//! once the ensemble is large enough to resolve the deviation.
//!
//! ```text
//! cargo run --release --example width_sweep
//! ```

use resnet_eft::config::{Axis, Check, CheckpointSpec, ExperimentConfig};
use resnet_eft::diagnostics::{run_sweep, SweepSpec};

fn main() -> resnet_eft::Result<()> {
    let mut base = ExperimentConfig::desk_baseline();
    base.network.depth = 100;
    base.ensemble.members = 20_000;
    base.ensemble.checkpoints = CheckpointSpec::Count(10);
    base.diagnostics.checks = vec![Check::V4Relative];

    let spec = SweepSpec::new(Axis::Width, vec![4.0, 8.0, 16.0, 32.0], base)?;
    let result = run_sweep(&spec);
    println!("{:>4} {:>14} {:>22}", "n", "max |G - K0|", "V4 rel. err at end");
    for p in &result.points {
        match &p.outcome {
            Ok((_, s)) => {
                let v4 = s
                    .v4_rel_err_final
                    .map(|(v, se)| format!("{v:+.4} ± {se:.4}"))
                    .unwrap_or_else(|| "-".into());
                println!("{:>4} {:>14.5} {:>22}", p.value, s.max_g_deviation, v4);
            }
            Err(e) => println!("{:>4} failed: {e}", p.value),
        }
    }
    if let Some(fit) = result.fitted_exponent() {
        println!("fit: max |G - K0| ~ {:.3} n^{:.3}", fit.prefactor, fit.exponent);
    }
    Ok(())
}
