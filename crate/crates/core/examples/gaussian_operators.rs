//! Gaussian expectation operators at the baseline kernel.
//!
//! Evaluates the drift `Q(K)`, its susceptibility `χ_K`, the Hessian
//! contraction `D²Q[K]:Ω(K)` and the covariance source `Σ(K)` for tanh on
//! four equicorrelated inputs, and shows how the quadrature order moves
//! `Σ_{00,00}`.
//!
//! ```text
//! cargo run --release --example gaussian_operators
//! ```

use resnet_eft::gaussian::{self, Drift};
use resnet_eft::{Activation, KernelMatrix, PairIndex, QuadratureRule};

fn main() -> resnet_eft::Result<()> {
    let k = KernelMatrix::equicorrelated(4, 2.0, 0.3);
    let drift = Drift::new(Activation::Tanh, 2.0, 0.0, QuadratureRule::default());
    let idx = PairIndex::new(4);

    let q = drift.q(&k)?;
    println!("Q(K): diagonal {:.6}, off-diagonal {:.6}", q.get(0, 0), q.get(0, 1));

    let chi = drift.chi(&k)?;
    let eig = chi.matrix().clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    println!("chi: {}x{} on pair space, eigenvalues in [{lo:.4}, {hi:.4}]", idx.len(), idx.len());

    let tadpole = drift.d2q_contract(&k, &gaussian::omega(&k))?;
    println!(
        "D2Q:Omega(K): diagonal {:.6}, off-diagonal {:.6}",
        tadpole.get(0, 0),
        tadpole.get(0, 1)
    );

    let sigma = drift.sigma(&k)?;
    println!("Sigma_(00,00) = {:.6}", sigma.component(&idx, (0, 0), (0, 0)));
    for order in [16, 32, 64, 128] {
        let rule = QuadratureRule::gauss_hermite(order)?;
        let s = gaussian::sigma_source(&k, 2.0, 0.0, Activation::Tanh, &rule)?;
        println!("  {order:>3} nodes: {:.6}", s.component(&idx, (0, 0), (0, 0)));
    }
    Ok(())
}
