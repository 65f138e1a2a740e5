//! Moment hierarchy of the layer law under Gaussian closure.
//!
//! For each order `(p, q)` the time derivative of the mixed moments along
//! `K0(t)` is compared with the right-hand side of the hierarchy, with every
//! moment replaced by its Gaussian value. The residual measures how well
//! the closed hierarchy is satisfied; it needs a high-order quadrature rule.
//!
//! ```text
//! cargo run --release --example moment_hierarchy
//! ```

use resnet_eft::diagnostics::{hierarchy_check_orders, hierarchy_residual};
use resnet_eft::flow::{flow_k0, FlowModel, IntegratorConfig};
use resnet_eft::gaussian::Drift;
use resnet_eft::{Activation, KernelMatrix, QuadratureRule};

fn main() -> resnet_eft::Result<()> {
    let model = FlowModel::new(1.0, Drift::new(Activation::Tanh, 2.0, 0.0, QuadratureRule::gauss_hermite(512)?));
    let k0 = flow_k0(&KernelMatrix::equicorrelated(2, 2.0, 0.3), &model, &IntegratorConfig::continuous(0.1, 2.0, 4))?;
    let orders = hierarchy_check_orders();
    let report = hierarchy_residual(&k0, &model, &orders, &[[0, 0], [0, 1]], 20)?;
    for (p, q) in orders {
        let name = format!("closure_residual_p{p}q{q}");
        let worst = report.rows_for(&name).map(|r| r.estimate.abs()).fold(0.0, f64::max);
        println!("order (p={p}, q={q}): max |residual| = {worst:.2e}");
    }
    Ok(())
}
