//! Infinite-width kernel `K0`, fluctuation covariance `V4` and the `1/n`
//! mean correction `K1` from the ladder recursion and the continuous flow.
//!
//! The ladder with step `ε²` matches the simulator layer by layer; the RK4
//! flow is its `ε → 0` limit, and the gap between them closes as `ε²`.
//!
//! ```text
//! cargo run --release --example kernel_flows
//! ```

use resnet_eft::flow::{flow_all, FlowModel, FlowTerms, IntegratorConfig};
use resnet_eft::gaussian::{omega, Drift};
use resnet_eft::{Activation, KernelMatrix, PairIndex, QuadratureRule};

fn main() -> resnet_eft::Result<()> {
    let model = FlowModel::new(1.0, Drift::new(Activation::Tanh, 2.0, 0.0, QuadratureRule::default()));
    let k = KernelMatrix::equicorrelated(4, 2.0, 0.3);
    let v0 = omega(&k);
    let zero = KernelMatrix::zeros(4);
    let idx = PairIndex::new(4);
    let s00 = idx.offset(0, 0);

    let ladder = flow_all(&k, &v0, &zero, &model, &IntegratorConfig::ladder(0.1, 2.0), FlowTerms::default())?;
    println!("{:>5} {:>10} {:>10} {:>12} {:>10}", "t", "K0_00", "K0_01", "V4(00,00)", "K1_01");
    for i in (0..ladder.k0.len()).step_by(25) {
        println!(
            "{:>5.2} {:>10.5} {:>10.5} {:>12.4} {:>10.5}",
            ladder.k0.time(i),
            ladder.k0.states()[i].get(0, 0),
            ladder.k0.states()[i].get(0, 1),
            ladder.v4.states()[i].matrix()[(s00, s00)],
            ladder.k1.states()[i].get(0, 1)
        );
    }

    // the variant without transport keeps only the Σ source
    let terms = FlowTerms {
        transport: false,
        ..FlowTerms::default()
    };
    let source_only = flow_all(&k, &v0, &zero, &model, &IntegratorConfig::ladder(0.1, 2.0), terms)?;
    println!(
        "V4(00,00) at t = 2: full {:.4}, source only {:.4}",
        ladder.v4.last().matrix()[(s00, s00)],
        source_only.v4.last().matrix()[(s00, s00)]
    );

    let t = 1.0;
    let rk4 = flow_all(&k, &v0, &zero, &model, &IntegratorConfig::continuous(0.05, t, 1), FlowTerms::default())?;
    println!("ladder - RK4 gap in K0 at t = {t}:");
    for eps in [0.2, 0.1, 0.05] {
        let s = flow_all(&k, &v0, &zero, &model, &IntegratorConfig::ladder(eps, t), FlowTerms::default())?;
        println!("  eps = {eps:<4}  {:.3e}", s.k0.last().sub(rk4.k0.last()).max_abs());
    }
    Ok(())
}
