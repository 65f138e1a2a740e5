//! Gaussian expectations of activation products and their derivatives with
//! respect to the kernel.
//!
//! Every entry `Q_ab(K)` depends only on the 2x2 marginal of `K` on `{a,b}`.
//! One quadrature pass per pair fills a table of mixed derivative moments
//! `E[σ^(p)(z_a) σ^(q)(z_b)]`, from which `E2`, the susceptibility and the
//! Hessian contraction are read off via Price's theorem:
//!
//! * `∂E[f]/∂K_ab = E[∂_a ∂_b f]` for an off-diagonal parameter,
//! * `∂E[f]/∂K_aa = ½ E[∂_a² f]` for a diagonal one.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;

use crate::activation::{Activation, MAX_DERIVATIVE};
use crate::error::{Error, Result};
use crate::kernel::{pair_product, KernelMatrix, PairIndex, PairMatrix, TOL_PSD};
use crate::quadrature::QuadratureRule;

const ORDERS: usize = MAX_DERIVATIVE + 1;

static CORRELATION_CLAMPS: AtomicU64 = AtomicU64::new(0);
static ASYMMETRIC_CONTRACTIONS: AtomicU64 = AtomicU64::new(0);

/// Number of 2x2 marginals whose correlation was clamped to `rho_max` so far.
pub fn correlation_clamps() -> u64 {
    CORRELATION_CLAMPS.load(Ordering::Relaxed)
}

/// Number of Hessian contractions that received a non-symmetric pair operator.
pub fn asymmetric_contractions() -> u64 {
    ASYMMETRIC_CONTRACTIONS.load(Ordering::Relaxed)
}

/// `M[p][q] = E[σ^(p)(z_a) σ^(q)(z_b)]` for one 2x2 Gaussian marginal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentTable {
    m: [[f64; ORDERS]; ORDERS],
    diagonal: bool,
}

impl MomentTable {
    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.m[p][q]
    }

    /// Whether the table was built for a diagonal pair `a == b`.
    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    /// `∂E2_ab/∂K_B` for `B` in `(aa, bb, ab)` order; for a diagonal pair
    /// only the first slot is meaningful.
    fn gradient(&self) -> [f64; 3] {
        let m = &self.m;
        if self.diagonal {
            [m[1][1] + m[0][2], 0.0, 0.0]
        } else {
            [0.5 * m[2][0], 0.5 * m[0][2], m[1][1]]
        }
    }

    /// Hessian of `E2_ab` over the local parameters `(aa, bb, ab)`.
    fn hessian(&self) -> [[f64; 3]; 3] {
        let m = &self.m;
        if self.diagonal {
            let h = 0.5 * (m[0][4] + 4.0 * m[1][3] + 3.0 * m[2][2]);
            return [[h, 0.0, 0.0], [0.0; 3], [0.0; 3]];
        }
        let aa_aa = 0.25 * m[4][0];
        let bb_bb = 0.25 * m[0][4];
        let aa_bb = 0.25 * m[2][2];
        let aa_ab = 0.5 * m[3][1];
        let bb_ab = 0.5 * m[1][3];
        let ab_ab = m[2][2];
        [
            [aa_aa, aa_bb, aa_ab],
            [aa_bb, bb_bb, bb_ab],
            [aa_ab, bb_ab, ab_ab],
        ]
    }
}

/// Validate the marginal `(kaa, kbb, kab)` and return `(sa, sb, rho)` with
/// `z_a = sa x`, `z_b = sb (rho x + sqrt(1 - rho^2) y)`.
fn marginal(kaa: f64, kbb: f64, kab: f64, rho_max: f64) -> Result<(f64, f64, f64)> {
    let scale = (kaa.abs() + kbb.abs()).max(f64::MIN_POSITIVE);
    let tol = TOL_PSD * scale;
    if !(kaa.is_finite() && kbb.is_finite() && kab.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite marginal ({kaa}, {kbb}, {kab})"
        )));
    }
    if kaa < -tol || kbb < -tol || kab * kab > kaa * kbb + tol * scale {
        return Err(Error::Domain(format!(
            "2x2 marginal not PSD: K_aa = {kaa}, K_bb = {kbb}, K_ab = {kab}"
        )));
    }
    let (kaa, kbb) = (kaa.max(0.0), kbb.max(0.0));
    let (sa, sb) = (kaa.sqrt(), kbb.sqrt());
    if sa == 0.0 || sb == 0.0 {
        return Ok((sa, sb, 0.0));
    }
    let mut rho = kab / (sa * sb);
    if rho.abs() > rho_max {
        CORRELATION_CLAMPS.fetch_add(1, Ordering::Relaxed);
        rho = rho.signum() * rho_max;
    }
    Ok((sa, sb, rho))
}

// Product-weight pruning: for each x node only the contiguous run of y
// nodes with w_x w_y above the cut contributes.
fn table_2d<F>(quad: &QuadratureRule, sa: f64, sb: f64, rho: f64, perp: f64, derivs: F) -> [[f64; ORDERS]; ORDERS]
where
    F: Fn(f64) -> [f64; ORDERS],
{
    let nodes: Vec<(f64, f64)> = quad.active().collect();
    let cut = quad.prune_tol();
    let mut m = [[0.0; ORDERS]; ORDERS];
    for &(x, wx) in &nodes {
        let floor = cut / wx;
        let lo = nodes.iter().position(|&(_, w)| w > floor);
        let Some(lo) = lo else { continue };
        let hi = nodes.iter().rposition(|&(_, w)| w > floor).unwrap_or(lo);
        let da = derivs(sa * x);
        let shift = sb * rho * x;
        let scale = sb * perp;
        let mut inner = [0.0; ORDERS];
        for &(y, wy) in &nodes[lo..=hi] {
            let db = derivs(shift + scale * y);
            for q in 0..ORDERS {
                inner[q] += wy * db[q];
            }
        }
        for p in 0..ORDERS {
            let wp = wx * da[p];
            for q in 0..ORDERS {
                m[p][q] += wp * inner[q];
            }
        }
    }
    m
}

/// Fill the moment table for the marginal on `{a,b}` (`diagonal` when `a == b`).
pub fn moment_table(
    act: Activation,
    quad: &QuadratureRule,
    kaa: f64,
    kbb: f64,
    kab: f64,
    diagonal: bool,
) -> Result<MomentTable> {
    let mut m = [[0.0; ORDERS]; ORDERS];
    if diagonal {
        let (sa, _, _) = marginal(kaa, kaa, kaa, quad.rho_max())?;
        for (x, w) in quad.active() {
            let d = act.derivatives(sa * x);
            for p in 0..ORDERS {
                let wp = w * d[p];
                for q in 0..ORDERS {
                    m[p][q] += wp * d[q];
                }
            }
        }
        return Ok(MomentTable { m, diagonal });
    }
    let (sa, sb, rho) = marginal(kaa, kbb, kab, quad.rho_max())?;
    let perp = (1.0 - rho * rho).max(0.0).sqrt();
    m = match act {
        Activation::Tanh => table_2d(quad, sa, sb, rho, perp, |x| Activation::Tanh.derivatives(x)),
        Activation::Erf => table_2d(quad, sa, sb, rho, perp, |x| Activation::Erf.derivatives(x)),
        Activation::Linear => table_2d(quad, sa, sb, rho, perp, |x| Activation::Linear.derivatives(x)),
    };
    Ok(MomentTable { m, diagonal })
}

/// `E[σ(z_a) σ(z_b)]` under `N(0, K)`.
pub fn e2(k: &KernelMatrix, act: Activation, quad: &QuadratureRule) -> Result<KernelMatrix> {
    let n = k.dim();
    let mut out = DMatrix::zeros(n, n);
    for a in 0..n {
        let (sa, _, _) = marginal(k.get(a, a), k.get(a, a), k.get(a, a), quad.rho_max())?;
        out[(a, a)] = quad.expect(|x| {
            let s = act.value(sa * x);
            s * s
        });
        for b in a + 1..n {
            let (sa, sb, rho) = marginal(k.get(a, a), k.get(b, b), k.get(a, b), quad.rho_max())?;
            let perp = (1.0 - rho * rho).max(0.0).sqrt();
            let v = quad.expect_2d(|x, y| act.value(sa * x) * act.value(sb * (rho * x + perp * y)));
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    KernelMatrix::new(out)
}

/// `Q(K) = C_b + C_W E2(K)`.
pub fn q_map(
    k: &KernelMatrix,
    cw: f64,
    cb: f64,
    act: Activation,
    quad: &QuadratureRule,
) -> Result<KernelMatrix> {
    Ok(e2(k, act, quad)?.map(|v| cb + cw * v))
}

/// `E[σ^(p)(z_a) σ^(q)(z_b)]` under `N(0, K)`, for `p + q <= 4`.
pub fn e2_general(
    k: &KernelMatrix,
    p: usize,
    q: usize,
    a: usize,
    b: usize,
    act: Activation,
    quad: &QuadratureRule,
) -> Result<f64> {
    if p + q > MAX_DERIVATIVE {
        return Err(Error::UnsupportedOrder {
            p,
            q,
            max: MAX_DERIVATIVE,
        });
    }
    if a >= k.dim() || b >= k.dim() {
        return Err(Error::Shape(format!(
            "point index ({a},{b}) out of range for N = {}",
            k.dim()
        )));
    }
    let table = moment_table(act, quad, k.get(a, a), k.get(b, b), k.get(a, b), a == b)?;
    Ok(table.get(p, q))
}

/// `Ω(K)_{ab,cd} = K_ac K_bd + K_ad K_bc`, the covariance of `√n` times a
/// Gram matrix of `n` Gaussian vectors with covariance `K`.
pub fn omega(k: &KernelMatrix) -> PairMatrix {
    let index = PairIndex::new(k.dim());
    PairMatrix::new(k.dim(), pair_product(&index, k, k), true).expect("square by construction")
}

/// `K_ac Q_bd + K_ad Q_bc + K_bc Q_ad + K_bd Q_ac` assembled from a given `Q`.
pub fn sigma_from(k: &KernelMatrix, q: &KernelMatrix) -> Result<PairMatrix> {
    if k.dim() != q.dim() {
        return Err(Error::Shape(format!(
            "K is {}x{}, Q is {}x{}",
            k.dim(),
            k.dim(),
            q.dim(),
            q.dim()
        )));
    }
    let index = PairIndex::new(k.dim());
    let m = pair_product(&index, k, q) + pair_product(&index, q, k);
    // the two halves round differently; average with the transpose
    let m = (&m + m.transpose()) * 0.5;
    PairMatrix::new(k.dim(), m, true)
}

/// The covariance source `Σ(K)` with `Q = Q(K)`.
pub fn sigma_source(
    k: &KernelMatrix,
    cw: f64,
    cb: f64,
    act: Activation,
    quad: &QuadratureRule,
) -> Result<PairMatrix> {
    sigma_from(k, &q_map(k, cw, cb, act, quad)?)
}

/// The drift map `Q(K) = C_b + C_W E2(K)` for a fixed activation and rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Drift {
    pub act: Activation,
    pub cw: f64,
    pub cb: f64,
    pub quad: QuadratureRule,
}

impl Drift {
    pub fn new(act: Activation, cw: f64, cb: f64, quad: QuadratureRule) -> Self {
        Self { act, cw, cb, quad }
    }

    pub fn e2(&self, k: &KernelMatrix) -> Result<KernelMatrix> {
        e2(k, self.act, &self.quad)
    }

    pub fn q(&self, k: &KernelMatrix) -> Result<KernelMatrix> {
        q_map(k, self.cw, self.cb, self.act, &self.quad)
    }

    pub fn sigma(&self, k: &KernelMatrix) -> Result<PairMatrix> {
        sigma_source(k, self.cw, self.cb, self.act, &self.quad)
    }

    pub fn chi(&self, k: &KernelMatrix) -> Result<PairMatrix> {
        Ok(self.expand(k)?.chi)
    }

    pub fn d2q_contract(&self, k: &KernelMatrix, v: &PairMatrix) -> Result<KernelMatrix> {
        self.expand(k)?.d2q_contract(v)
    }

    /// All local quantities at `K` from one quadrature pass per pair.
    pub fn expand(&self, k: &KernelMatrix) -> Result<Expansion> {
        let n = k.dim();
        let index = PairIndex::new(n);
        let p = index.len();
        let mut tables = Vec::with_capacity(p);
        let mut e2 = DMatrix::zeros(n, n);
        let mut chi = DMatrix::zeros(p, p);
        for (row, (a, b)) in index.iter() {
            let t = moment_table(self.act, &self.quad, k.get(a, a), k.get(b, b), k.get(a, b), a == b)?;
            e2[(a, b)] = t.get(0, 0);
            e2[(b, a)] = t.get(0, 0);
            let g = t.gradient();
            for (slot, &col) in local_slots(&index, a, b).iter().enumerate() {
                if let Some(col) = col {
                    chi[(row, col)] = self.cw * g[slot];
                }
            }
            tables.push(t);
        }
        let e2 = KernelMatrix::new(e2)?;
        let q = e2.map(|v| self.cb + self.cw * v);
        Ok(Expansion {
            index,
            cw: self.cw,
            e2,
            q,
            chi: PairMatrix::new(n, chi, false)?,
            tables,
        })
    }
}

/// Pair offsets of the local parameters `(aa, bb, ab)` of pair `{a,b}`;
/// a diagonal pair only has the first.
fn local_slots(index: &PairIndex, a: usize, b: usize) -> [Option<usize>; 3] {
    if a == b {
        [Some(index.offset(a, a)), None, None]
    } else {
        [
            Some(index.offset(a, a)),
            Some(index.offset(b, b)),
            Some(index.offset(a, b)),
        ]
    }
}

/// `E2`, `Q`, `χ` and the per-pair moment tables at one kernel.
#[derive(Debug, Clone)]
pub struct Expansion {
    index: PairIndex,
    cw: f64,
    pub e2: KernelMatrix,
    pub q: KernelMatrix,
    /// `χ_{A,B} = ∂Q_A/∂K_B` in pair space.
    pub chi: PairMatrix,
    tables: Vec<MomentTable>,
}

impl Expansion {
    pub fn index(&self) -> &PairIndex {
        &self.index
    }

    /// Moment table of pair `{a,b}`.
    pub fn table(&self, a: usize, b: usize) -> &MomentTable {
        &self.tables[self.index.offset(a, b)]
    }

    /// `(D²Q[K]:V)_ab = Σ_{B,C} ∂²Q_ab/∂K_B∂K_C V_BC` over pair slots.
    pub fn d2q_contract(&self, v: &PairMatrix) -> Result<KernelMatrix> {
        if v.points() != self.index.points() {
            return Err(Error::Shape(format!(
                "pair operator over {} points, kernel over {}",
                v.points(),
                self.index.points()
            )));
        }
        let sym;
        let v = if v.asymmetry() > 1e-12 * v.max_abs().max(1.0) {
            ASYMMETRIC_CONTRACTIONS.fetch_add(1, Ordering::Relaxed);
            sym = v.symmetrized();
            &sym
        } else {
            v
        };
        let n = self.index.points();
        let mut out = DMatrix::zeros(n, n);
        for (row, (a, b)) in self.index.iter() {
            let h = self.tables[row].hessian();
            let slots = local_slots(&self.index, a, b);
            let mut acc = 0.0;
            for (i, si) in slots.iter().enumerate() {
                for (j, sj) in slots.iter().enumerate() {
                    if let (Some(si), Some(sj)) = (si, sj) {
                        acc += h[i][j] * v.get(*si, *sj);
                    }
                }
            }
            out[(a, b)] = self.cw * acc;
            out[(b, a)] = self.cw * acc;
        }
        KernelMatrix::new(out)
    }

    /// `Σ(K)` built from this expansion's `Q`.
    pub fn sigma(&self, k: &KernelMatrix) -> Result<PairMatrix> {
        sigma_from(k, &self.q)
    }
}

/// Susceptibility `χ_K` via Price's theorem.
pub fn chi(k: &KernelMatrix, cw: f64, act: Activation, quad: &QuadratureRule) -> Result<PairMatrix> {
    Drift::new(act, cw, 0.0, quad.clone()).chi(k)
}

/// Hessian of `Q` at `K` contracted with the pair operator `V`.
pub fn d2q_contract(
    k: &KernelMatrix,
    v: &PairMatrix,
    cw: f64,
    act: Activation,
    quad: &QuadratureRule,
) -> Result<KernelMatrix> {
    Drift::new(act, cw, 0.0, quad.clone()).d2q_contract(k, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn baseline() -> KernelMatrix {
        KernelMatrix::equicorrelated(4, 2.0, 0.3)
    }

    #[test]
    fn linear_activation_is_exact() {
        let quad = QuadratureRule::default();
        let k = baseline();
        let d = Drift::new(Activation::Linear, 2.0, 0.1, quad);
        let x = d.expand(&k).unwrap();
        assert!(x.e2.sub(&k).max_abs() < 1e-12);
        let id = PairMatrix::identity(4).scaled(2.0);
        assert!(x.chi.sub(&id).max_abs() < 1e-12);
        let v = omega(&k);
        assert!(x.d2q_contract(&v).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn tanh_reference_values() {
        let quad = QuadratureRule::default();
        let k = baseline();
        let e = e2(&k, Activation::Tanh, &quad).unwrap();
        // converged 1D value E[tanh(√2 x)^2]
        assert!((e.get(0, 0) - 0.519_975_745_66).abs() < 1e-9);
        let s = sigma_source(&k, 2.0, 0.0, Activation::Tanh, &quad).unwrap();
        let idx = PairIndex::new(4);
        let s00 = s.component(&idx, (0, 0), (0, 0));
        assert!((s00 - 16.0 * 0.519_975_745_66).abs() < 1e-8);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let quad = QuadratureRule::default();
        let e = e2(&KernelMatrix::zeros(3), Activation::Tanh, &quad).unwrap();
        assert_eq!(e.max_abs(), 0.0);
        let q = q_map(&KernelMatrix::zeros(2), 0.0, 0.3, Activation::Tanh, &quad).unwrap();
        assert!(q.sub(&KernelMatrix::new(DMatrix::from_element(2, 2, 0.3)).unwrap()).max_abs() < 1e-15);
    }

    #[test]
    fn general_reduces_to_e2() {
        let quad = QuadratureRule::default();
        let k = baseline();
        let e = e2(&k, Activation::Erf, &quad).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let g = e2_general(&k, 0, 0, a, b, Activation::Erf, &quad).unwrap();
                assert!((g - e.get(a, b)).abs() < 1e-12);
            }
        }
        let one = e2_general(&k, 1, 1, 0, 1, Activation::Linear, &quad).unwrap();
        assert!((one - 1.0).abs() < 1e-14);
        assert!(matches!(
            e2_general(&k, 3, 2, 0, 1, Activation::Tanh, &quad),
            Err(Error::UnsupportedOrder { .. })
        ));
    }

    #[test]
    fn chi_is_local() {
        let quad = QuadratureRule::gauss_hermite(64).unwrap();
        let k = baseline();
        let idx = PairIndex::new(4);
        let c = chi(&k, 2.0, Activation::Tanh, &quad).unwrap();
        for (r, (a, b)) in idx.iter() {
            for (col, (cc, d)) in idx.iter() {
                let inside = [cc, d].iter().all(|x| *x == a || *x == b);
                if !inside {
                    assert_eq!(c.get(r, col), 0.0);
                }
            }
        }
    }

    #[test]
    fn omega_matches_sigma_assembly() {
        let k = baseline();
        let idx = PairIndex::new(4);
        let o = omega(&k);
        assert!((o.component(&idx, (0, 0), (0, 0)) - 8.0).abs() < 1e-14);
        let id = omega(&KernelMatrix::identity(2));
        assert_eq!(id.component(&PairIndex::new(2), (0, 1), (0, 1)), 1.0);
        // Σ with Q replaced by K double counts the Wishart piece.
        let s = sigma_from(&k, &k).unwrap();
        assert!(s.sub(&o.scaled(2.0)).max_abs() < 1e-14);
    }

    #[test]
    fn non_psd_marginal_is_rejected() {
        let quad = QuadratureRule::gauss_hermite(32).unwrap();
        let k = KernelMatrix::from_rows(&[vec![1.0, 1.5], vec![1.5, 1.0]]).unwrap();
        assert!(matches!(e2(&k, Activation::Tanh, &quad), Err(Error::Domain(_))));
    }

    #[test]
    fn degenerate_correlation_is_clamped() {
        let quad = QuadratureRule::gauss_hermite(32).unwrap();
        let before = correlation_clamps();
        let k = KernelMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let e = e2(&k, Activation::Tanh, &quad).unwrap();
        assert!(correlation_clamps() > before);
        assert!((e.get(0, 1) - e.get(0, 0)).abs() < 1e-7);
    }
}
