use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use resnet_eft::gaussian::{self, Drift};
use resnet_eft::quadrature::DEFAULT_ORDER;
use resnet_eft::{Activation, KernelMatrix, PairIndex, PairMatrix, QuadratureRule};

// Random correlation structure with variances drawn over the range the
// flows visit (K0 reaches ~4.4 on the diagonal at t = 2).
fn random_kernel(rng: &mut ChaCha8Rng, n: usize) -> KernelMatrix {
    let a = DMatrix::from_fn(n, n + 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut k = &a * a.transpose() / (n + 2) as f64;
    for i in 0..n {
        k[(i, i)] += 0.05;
    }
    let scale: Vec<f64> = (0..n)
        .map(|i| (rng.random_range(0.3..4.5) / k[(i, i)]).sqrt())
        .collect();
    let k = DMatrix::from_fn(n, n, |i, j| k[(i, j)] * scale[i] * scale[j]);
    KernelMatrix::new(k).unwrap()
}

fn pair_direction(index: &PairIndex, slot: usize) -> KernelMatrix {
    let mut v = nalgebra::DVector::zeros(index.len());
    v[slot] = 1.0;
    KernelMatrix::from_pair_vector(index, &v)
}

fn fd_chi(drift: &Drift, k: &KernelMatrix) -> DMatrix<f64> {
    let index = PairIndex::new(k.dim());
    let p = index.len();
    let mut out = DMatrix::zeros(p, p);
    for col in 0..p {
        let (c, d) = index.pair(col);
        let h = 1e-4 * k.get(c, d).abs().max(0.1 * k.get(c, c).max(k.get(d, d)));
        let dir = pair_direction(&index, col);
        let up = drift.q(&k.axpy(h, &dir)).unwrap();
        let dn = drift.q(&k.axpy(-h, &dir)).unwrap();
        let diff = up.sub(&dn).scaled(0.5 / h).to_pair_vector(&index);
        out.set_column(col, &diff);
    }
    out
}

// Second directional derivatives along the eigenvectors of V, Richardson
// extrapolated.
fn fd_d2q(drift: &Drift, k: &KernelMatrix, v: &PairMatrix) -> KernelMatrix {
    let index = PairIndex::new(k.dim());
    let eig = SymmetricEigen::new(v.matrix().clone());
    let base = drift.q(k).unwrap();
    let mut acc = KernelMatrix::zeros(k.dim());
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        let u = KernelMatrix::from_pair_vector(&index, &eig.eigenvectors.column(i).into_owned());
        let h = 1e-3 * k.max_abs() / u.max_abs();
        let second = |h: f64| {
            let up = drift.q(&k.axpy(h, &u)).unwrap();
            let dn = drift.q(&k.axpy(-h, &u)).unwrap();
            up.add(&dn).sub(&base.scaled(2.0)).scaled(1.0 / (h * h))
        };
        let rich = second(h / 2.0).scaled(4.0 / 3.0).sub(&second(h).scaled(1.0 / 3.0));
        acc = acc.axpy(lambda, &rich);
    }
    acc
}

#[test]
fn chi_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let quad = QuadratureRule::default();
    for act in [Activation::Tanh, Activation::Erf] {
        for trial in 0..20 {
            let n = 2 + trial % 4;
            let k = random_kernel(&mut rng, n);
            let drift = Drift::new(act, 1.7, 0.1, quad.clone());
            let chi = drift.chi(&k).unwrap();
            let fd = fd_chi(&drift, &k);
            let err = (chi.matrix() - &fd).amax() / fd.amax();
            assert!(err <= 1e-6, "{act} trial {trial}: relative error {err:e}");
        }
    }
}

#[test]
fn d2q_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let quad = QuadratureRule::default();
    for act in [Activation::Tanh, Activation::Erf] {
        for trial in 0..20 {
            let n = 2 + trial % 3;
            let k = random_kernel(&mut rng, n);
            let v = gaussian::omega(&k);
            let drift = Drift::new(act, 2.0, 0.0, quad.clone());
            let got = drift.d2q_contract(&k, &v).unwrap();
            let want = fd_d2q(&drift, &k, &v);
            let err = got.sub(&want).max_abs() / want.max_abs();
            assert!(err <= 1e-4, "{act} trial {trial}: relative error {err:e}");
        }
    }
}

#[test]
fn baseline_chi_and_d2q_match_finite_differences() {
    let k = KernelMatrix::equicorrelated(4, 2.0, 0.3);
    let drift = Drift::new(Activation::Tanh, 2.0, 0.0, QuadratureRule::default());
    let chi = drift.chi(&k).unwrap();
    let fd = fd_chi(&drift, &k);
    assert!((chi.matrix() - &fd).amax() / fd.amax() <= 1e-6);
    let v = gaussian::omega(&k);
    let got = drift.d2q_contract(&k, &v).unwrap();
    let want = fd_d2q(&drift, &k, &v);
    assert!(got.sub(&want).max_abs() / want.max_abs() <= 1e-4);
    assert!(got.max_abs() > 1e-3);
}

#[test]
fn general_moment_matches_monte_carlo() {
    let k = KernelMatrix::from_rows(&[vec![2.0, 0.6], vec![0.6, 2.0]]).unwrap();
    let quad = QuadratureRule::default();
    let got = gaussian::e2_general(&k, 2, 0, 0, 1, Activation::Tanh, &quad).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (sa, sb) = (2f64.sqrt(), 2f64.sqrt());
    let rho = 0.3f64;
    let perp = (1.0 - rho * rho).sqrt();
    let m = 10_000_000usize;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..m {
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let za = sa * x;
        let zb = sb * (rho * x + perp * y);
        let v = Activation::Tanh.derivatives(za)[2] * zb.tanh();
        s1 += v;
        s2 += v * v;
    }
    let mean = s1 / m as f64;
    let se = ((s2 / m as f64 - mean * mean) / (m as f64 - 1.0)).sqrt();
    assert!((got - mean).abs() <= 4.0 * se, "{got} vs {mean} ± {se}");
    assert!(got < 0.0);
}

#[test]
fn quadrature_has_converged_on_the_baseline_kernel() {
    let k = KernelMatrix::equicorrelated(4, 2.0, 0.3);
    let lo = QuadratureRule::gauss_hermite(DEFAULT_ORDER / 2).unwrap();
    let hi = QuadratureRule::gauss_hermite(DEFAULT_ORDER).unwrap();
    let a = gaussian::e2(&k, Activation::Tanh, &lo).unwrap();
    let b = gaussian::e2(&k, Activation::Tanh, &hi).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let rel = (a.get(i, j) - b.get(i, j)).abs() / b.get(i, j).abs();
            assert!(rel <= 1e-10, "({i},{j}): {rel:e}");
        }
    }
}

#[test]
fn thirty_two_node_rule_reproduces_the_reference_source_value() {
    // A 32-node rule is still ~3e-4 away from the converged value at this
    // kernel; it reproduces the pinned reference value 8.322.
    let k = KernelMatrix::equicorrelated(4, 2.0, 0.3);
    let idx = PairIndex::new(4);
    let coarse = QuadratureRule::gauss_hermite(32).unwrap();
    let s = gaussian::sigma_source(&k, 2.0, 0.0, Activation::Tanh, &coarse).unwrap();
    assert!((s.component(&idx, (0, 0), (0, 0)) - 8.322).abs() < 5e-4);
    let fine = gaussian::sigma_source(&k, 2.0, 0.0, Activation::Tanh, &QuadratureRule::default()).unwrap();
    assert!((fine.component(&idx, (0, 0), (0, 0)) - 8.3196).abs() < 1e-4);
}

#[test]
fn linear_closed_forms() {
    let quad = QuadratureRule::default();
    let k = KernelMatrix::from_rows(&[vec![2.0, 0.4, 0.1], vec![0.4, 1.0, -0.2], vec![0.1, -0.2, 0.5]]).unwrap();
    let q = gaussian::q_map(&k, 2.0, 0.0, Activation::Linear, &quad).unwrap();
    assert!(q.sub(&k.scaled(2.0)).max_abs() < 1e-12);
    let idx = PairIndex::new(3);
    let s = gaussian::sigma_source(&k, 2.0, 0.5, Activation::Linear, &quad).unwrap();
    let want = 4.0 * 2.0 * (0.5 + 2.0 * 2.0);
    assert!((s.component(&idx, (0, 0), (0, 0)) - want).abs() < 1e-12);
    let q0 = gaussian::q_map(&k, 0.0, 0.3, Activation::Tanh, &quad).unwrap();
    assert!(q0.sub(&KernelMatrix::new(DMatrix::from_element(3, 3, 0.3)).unwrap()).max_abs() < 1e-15);
}

fn psd_kernel() -> impl Strategy<Value = KernelMatrix> {
    (2usize..=6, any::<u64>()).prop_map(|(n, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_kernel(&mut rng, n)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn e2_is_symmetric_psd(k in psd_kernel()) {
        let quad = QuadratureRule::gauss_hermite(96).unwrap();
        for act in [Activation::Tanh, Activation::Erf] {
            let e = gaussian::e2(&k, act, &quad).unwrap();
            prop_assert!(e.min_eigenvalue() >= -1e-8);
        }
    }

    #[test]
    fn sigma_source_is_psd(k in psd_kernel()) {
        let quad = QuadratureRule::gauss_hermite(96).unwrap();
        let s = gaussian::sigma_source(&k, 2.0, 0.1, Activation::Tanh, &quad).unwrap();
        prop_assert!(s.asymmetry() == 0.0);
        prop_assert!(s.min_eigenvalue() >= -1e-8 * s.max_abs());
    }
}
