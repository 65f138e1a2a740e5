//! Deterministic integration of the closed kernel hierarchy
//!
//! ```text
//! ∂_t K0      = Q(K0)
//! ∂_t V4      = χ V4 + V4 χᵀ + Σ(K0)
//! ∂_t K1_EFT  = χ[K1_EFT] + ½ D²Q[K0]:V4
//! ```
//!
//! either on the depth ladder `t = ε² ℓ` (the α-generalized discrete
//! recursions, matching the simulator layer by layer) or in continuous time
//! with RK4. Integral forms built on the response propagator provide an
//! independent route to the same trajectories.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::NetworkConfig;
use crate::error::{Error, Result};
use crate::gaussian::{omega, Drift, Expansion};
use crate::kernel::{KernelMatrix, PairIndex, PairMatrix, TOL_PSD};
use crate::quadrature::QuadratureRule;

/// Integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Discrete recursion with `Δt = ε²`, one step per layer.
    #[default]
    Ladder,
    /// RK4 on the ODEs with `substeps` steps per ladder interval.
    #[serde(alias = "rk4")]
    Continuous,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Ladder => "ladder",
            Mode::Continuous => "rk4",
        })
    }
}

fn default_substeps() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    #[serde(default)]
    pub mode: Mode,
    /// Ladder step `ε`; the grid is `t = ε² ℓ`.
    pub eps: f64,
    /// Final time; the depth is `round(t_final / ε²)`.
    pub t_final: f64,
    /// RK4 steps per ladder interval in continuous mode.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Keep the `ε⁴ Ω` term of the ladder V4 recursion.
    #[serde(default = "default_true")]
    pub wishart_term: bool,
}

impl IntegratorConfig {
    pub fn ladder(eps: f64, t_final: f64) -> Self {
        Self {
            mode: Mode::Ladder,
            eps,
            t_final,
            substeps: default_substeps(),
            wishart_term: true,
        }
    }

    pub fn continuous(eps: f64, t_final: f64, substeps: usize) -> Self {
        Self {
            mode: Mode::Continuous,
            eps,
            t_final,
            substeps,
            wishart_term: true,
        }
    }

    /// Ladder grid matching a simulator configuration.
    pub fn for_network(cfg: &NetworkConfig) -> Self {
        Self::ladder(cfg.eps, cfg.time(cfg.depth))
    }

    /// Number of ladder steps.
    pub fn depth(&self) -> usize {
        (self.t_final / (self.eps * self.eps)).round() as usize
    }

    /// States stored per ladder interval.
    pub fn per_layer(&self) -> usize {
        match self.mode {
            Mode::Ladder => 1,
            Mode::Continuous => self.substeps,
        }
    }

    /// Integration step.
    pub fn dt(&self) -> f64 {
        self.eps * self.eps / self.per_layer() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("integrator eps must be positive, got {}", self.eps)));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return Err(Error::Config(format!("t_final must be non-negative, got {}", self.t_final)));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which terms of the V4 / K1 flows are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowTerms {
    /// `χ` transport.
    pub transport: bool,
    /// `Σ(K0)` source of V4.
    pub source: bool,
    /// `½ D²Q:V4` source of K1.
    pub tadpole: bool,
}

impl Default for FlowTerms {
    fn default() -> Self {
        Self {
            transport: true,
            source: true,
            tadpole: true,
        }
    }
}

impl FlowTerms {
    /// `Σ`-only integration of V4 (no transport).
    pub fn source_only() -> Self {
        Self {
            transport: false,
            ..Self::default()
        }
    }

    /// Transport of the initial condition only.
    pub fn transport_only() -> Self {
        Self {
            source: false,
            tadpole: false,
            ..Self::default()
        }
    }
}

// Expansions memoized by the exact bit pattern of the kernel; the integral
// forms revisit the same RK4 stage kernels as the flows.
type ExpansionCache = Arc<Mutex<HashMap<Vec<u64>, Arc<Expansion>>>>;
const CACHE_LIMIT: usize = 16_384;

/// Activation, initialization variances, skip coefficient and quadrature.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub alpha: f64,
    pub drift: Drift,
    cache: ExpansionCache,
}

impl PartialEq for FlowModel {
    fn eq(&self, other: &Self) -> bool {
        self.alpha == other.alpha && self.drift == other.drift
    }
}

impl FlowModel {
    pub fn new(alpha: f64, drift: Drift) -> Self {
        Self {
            alpha,
            drift,
            cache: ExpansionCache::default(),
        }
    }

    /// `E2`, `Q`, `χ` and moment tables at `k`, memoized.
    pub fn expand(&self, k: &KernelMatrix) -> Result<Arc<Expansion>> {
        let key: Vec<u64> = k.matrix().iter().map(|v| v.to_bits()).collect();
        if let Some(ex) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(Arc::clone(ex));
        }
        let ex = Arc::new(self.drift.expand(k)?);
        let mut cache = self.cache.lock().expect("cache poisoned");
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, Arc::clone(&ex));
        Ok(ex)
    }

    pub fn from_network(cfg: &NetworkConfig, quad: QuadratureRule) -> Self {
        Self::new(cfg.alpha, Drift::new(cfg.act, cfg.cw, cfg.cb, quad))
    }

    fn check(&self, integ: &IntegratorConfig) -> Result<()> {
        integ.validate()?;
        if integ.mode == Mode::Continuous && self.alpha != 1.0 {
            return Err(Error::Config(format!(
                "continuous mode needs alpha = 1 (got {}); use the ladder",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// States on a uniform time grid starting at `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    mode: Mode,
    t0: f64,
    dt: f64,
    per_layer: usize,
    states: Vec<T>,
}

impl<T> Trajectory<T> {
    fn new(integ: &IntegratorConfig, t0: f64, states: Vec<T>) -> Self {
        Self {
            mode: integ.mode,
            t0,
            dt: integ.dt(),
            per_layer: integ.per_layer(),
            states,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Grid points per ladder interval.
    pub fn per_layer(&self) -> usize {
        self.per_layer
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + self.dt * i as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }

    pub fn states(&self) -> &[T] {
        &self.states
    }

    pub fn first(&self) -> &T {
        &self.states[0]
    }

    pub fn last(&self) -> &T {
        self.states.last().expect("trajectories are never empty")
    }

    /// Number of complete ladder steps covered.
    pub fn depth(&self) -> usize {
        (self.len() - 1) / self.per_layer
    }

    /// State at ladder layer `layer` (counted from `t = 0`).
    pub fn at_layer(&self, layer: usize) -> Result<&T> {
        let i = layer * self.per_layer;
        let offset = (self.t0 / self.dt).round() as usize;
        i.checked_sub(offset)
            .and_then(|i| self.states.get(i))
            .ok_or_else(|| Error::Data(format!("layer {layer} is outside the trajectory")))
    }

    /// Grid index of time `t`, if `t` lies on the grid.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let x = (t - self.t0) / self.dt;
        let i = x.round();
        if (x - i).abs() > 1e-6 || i < 0.0 || i as usize >= self.len() {
            return Err(Error::Data(format!("t = {t} is not on the trajectory grid")));
        }
        Ok(i as usize)
    }

    pub fn at_time(&self, t: f64) -> Result<&T> {
        Ok(&self.states[self.index_of(t)?])
    }

    /// Same grid as `other`.
    pub fn same_grid<U>(&self, other: &Trajectory<U>) -> bool {
        self.mode == other.mode
            && self.len() == other.len()
            && (self.dt - other.dt).abs() <= 1e-15 * self.dt
            && (self.t0 - other.t0).abs() <= 1e-12
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Trajectory<U> {
        Trajectory {
            mode: self.mode,
            t0: self.t0,
            dt: self.dt,
            per_layer: self.per_layer,
            states: self.states.iter().map(f).collect(),
        }
    }

    /// `(t, state)` at every ladder layer.
    pub fn layers(&self) -> impl Iterator<Item = (f64, &T)> + '_ {
        self.states
            .iter()
            .enumerate()
            .filter(move |(i, _)| i % self.per_layer == 0)
            .map(move |(i, s)| (self.time(i), s))
    }
}

/// K0, V4 and K1_EFT on a common grid.
#[derive(Debug, Clone)]
pub struct FlowSolution {
    pub k0: Trajectory<KernelMatrix>,
    pub v4: Trajectory<PairMatrix>,
    pub k1: Trajectory<KernelMatrix>,
}

fn flow_error(step: usize, t: f64, e: Error) -> Error {
    Error::Flow {
        step,
        t,
        detail: e.to_string(),
    }
}

fn check_k0(k: &KernelMatrix, step: usize, t: f64) -> Result<()> {
    k.check_psd(TOL_PSD).map_err(|e| flow_error(step, t, e))
}

fn check_v4(v: &PairMatrix, step: usize, t: f64) -> Result<()> {
    if !v.matrix().iter().all(|x| x.is_finite()) {
        return Err(flow_error(step, t, Error::Domain("V4 is not finite".into())));
    }
    v.check_psd(TOL_PSD).map_err(|e| flow_error(step, t, e))
}

fn chi_of(ex: &Expansion, terms: FlowTerms) -> DMatrix<f64> {
    if terms.transport {
        ex.chi.matrix().clone()
    } else {
        DMatrix::zeros(ex.chi.dim(), ex.chi.dim())
    }
}

fn pair_vec(k: &KernelMatrix, idx: &PairIndex) -> DVector<f64> {
    k.to_pair_vector(idx)
}

fn symmetric(points: usize, m: DMatrix<f64>) -> PairMatrix {
    PairMatrix::new(points, (&m + m.transpose()) * 0.5, true).expect("square")
}

/// One ladder step of the α-generalized recursions.
struct LadderStep {
    a: DMatrix<f64>,
    v_source: DMatrix<f64>,
    k1_source: DVector<f64>,
    k0_next: KernelMatrix,
}

fn ladder_step(
    model: &FlowModel,
    integ: &IntegratorConfig,
    terms: FlowTerms,
    k0: &KernelMatrix,
    v4: Option<&PairMatrix>,
) -> Result<LadderStep> {
    let ex = model.expand(k0)?;
    let idx = ex.index().clone();
    let (a2, e2) = (model.alpha * model.alpha, integ.eps * integ.eps);
    let p = idx.len();
    let a = DMatrix::identity(p, p) * a2 + chi_of(&ex, terms) * e2;
    let mut v_source = DMatrix::zeros(p, p);
    if terms.source {
        v_source += ex.sigma(k0)?.matrix() * (a2 * e2);
        if integ.wishart_term {
            v_source += omega(&ex.q).matrix() * (e2 * e2);
        }
    }
    let k1_source = match v4 {
        Some(v) if terms.tadpole => pair_vec(&ex.d2q_contract(v)?, &idx) * (0.5 * e2),
        _ => DVector::zeros(p),
    };
    let k0_next = k0.scaled(a2).axpy(e2, &ex.q);
    Ok(LadderStep {
        a,
        v_source,
        k1_source,
        k0_next,
    })
}

/// Right-hand side of the continuous flows at one state.
struct Rates {
    dk0: KernelMatrix,
    dv4: DMatrix<f64>,
    dk1: DVector<f64>,
}

fn rates(
    model: &FlowModel,
    terms: FlowTerms,
    k0: &KernelMatrix,
    v4: &DMatrix<f64>,
    k1: &DVector<f64>,
) -> Result<Rates> {
    let ex = model.expand(k0)?;
    let idx = ex.index();
    let chi = chi_of(&ex, terms);
    let mut dv4 = &chi * v4 + v4 * chi.transpose();
    if terms.source {
        dv4 += ex.sigma(k0)?.matrix();
    }
    let mut dk1 = &chi * k1;
    if terms.tadpole {
        let v = symmetric(k0.dim(), v4.clone());
        dk1 += pair_vec(&ex.d2q_contract(&v)?, idx) * 0.5;
    }
    Ok(Rates {
        dk0: ex.q.clone(),
        dv4,
        dk1,
    })
}

/// Integrate K0, V4 and K1_EFT together.
pub fn flow_all(
    k0_init: &KernelMatrix,
    v4_init: &PairMatrix,
    k1_init: &KernelMatrix,
    model: &FlowModel,
    integ: &IntegratorConfig,
    terms: FlowTerms,
) -> Result<FlowSolution> {
    model.check(integ)?;
    let n = k0_init.dim();
    if v4_init.points() != n || k1_init.dim() != n {
        return Err(Error::Shape("initial states disagree on the number of inputs".into()));
    }
    check_k0(k0_init, 0, 0.0)?;
    check_v4(v4_init, 0, 0.0)?;
    let idx = PairIndex::new(n);
    let steps = integ.depth() * integ.per_layer();
    let dt = integ.dt();
    let mut k0s = vec![k0_init.clone()];
    let mut v4s = vec![v4_init.clone()];
    let mut k1s = vec![k1_init.clone()];
    let mut k0 = k0_init.clone();
    let mut v4 = v4_init.matrix().clone();
    let mut k1 = pair_vec(k1_init, &idx);
    for step in 0..steps {
        let t = dt * (step + 1) as f64;
        match integ.mode {
            Mode::Ladder => {
                let v = symmetric(n, v4.clone());
                let s = ladder_step(model, integ, terms, &k0, Some(&v))
                    .map_err(|e| flow_error(step, t - dt, e))?;
                v4 = &s.a * &v4 * s.a.transpose() + &s.v_source;
                k1 = &s.a * &k1 + &s.k1_source;
                k0 = s.k0_next;
            }
            Mode::Continuous => {
                let f = |k: &KernelMatrix, v: &DMatrix<f64>, x: &DVector<f64>| {
                    rates(model, terms, k, v, x).map_err(|e| flow_error(step, t - dt, e))
                };
                let r1 = f(&k0, &v4, &k1)?;
                let r2 = f(&k0.axpy(dt / 2.0, &r1.dk0), &(&v4 + &r1.dv4 * (dt / 2.0)), &(&k1 + &r1.dk1 * (dt / 2.0)))?;
                let r3 = f(&k0.axpy(dt / 2.0, &r2.dk0), &(&v4 + &r2.dv4 * (dt / 2.0)), &(&k1 + &r2.dk1 * (dt / 2.0)))?;
                let r4 = f(&k0.axpy(dt, &r3.dk0), &(&v4 + &r3.dv4 * dt), &(&k1 + &r3.dk1 * dt))?;
                let w = dt / 6.0;
                k0 = k0
                    .axpy(w, &r1.dk0)
                    .axpy(2.0 * w, &r2.dk0)
                    .axpy(2.0 * w, &r3.dk0)
                    .axpy(w, &r4.dk0);
                v4 += (&r1.dv4 + (&r2.dv4 + &r3.dv4) * 2.0 + &r4.dv4) * w;
                k1 += (&r1.dk1 + (&r2.dk1 + &r3.dk1) * 2.0 + &r4.dk1) * w;
            }
        }
        check_k0(&k0, step + 1, t)?;
        let v = symmetric(n, v4.clone());
        check_v4(&v, step + 1, t)?;
        v4 = v.matrix().clone();
        k0s.push(k0.clone());
        v4s.push(v);
        k1s.push(KernelMatrix::from_pair_vector(&idx, &k1));
    }
    Ok(FlowSolution {
        k0: Trajectory::new(integ, 0.0, k0s),
        v4: Trajectory::new(integ, 0.0, v4s),
        k1: Trajectory::new(integ, 0.0, k1s),
    })
}

/// Background kernel trajectory.
pub fn flow_k0(k0_init: &KernelMatrix, model: &FlowModel, integ: &IntegratorConfig) -> Result<Trajectory<KernelMatrix>> {
    model.check(integ)?;
    check_k0(k0_init, 0, 0.0)?;
    let steps = integ.depth() * integ.per_layer();
    let dt = integ.dt();
    let a2 = model.alpha * model.alpha;
    let mut out = vec![k0_init.clone()];
    let mut k = k0_init.clone();
    for step in 0..steps {
        let t = dt * step as f64;
        let q = |k: &KernelMatrix| model.expand(k).map(|ex| ex.q.clone()).map_err(|e| flow_error(step, t, e));
        k = match integ.mode {
            Mode::Ladder => k.scaled(a2).axpy(dt, &q(&k)?),
            Mode::Continuous => {
                let r1 = q(&k)?;
                let r2 = q(&k.axpy(dt / 2.0, &r1))?;
                let r3 = q(&k.axpy(dt / 2.0, &r2))?;
                let r4 = q(&k.axpy(dt, &r3))?;
                let w = dt / 6.0;
                k.axpy(w, &r1).axpy(2.0 * w, &r2).axpy(2.0 * w, &r3).axpy(w, &r4)
            }
        };
        check_k0(&k, step + 1, t + dt)?;
        out.push(k.clone());
    }
    Ok(Trajectory::new(integ, 0.0, out))
}

fn check_grid<T>(traj: &Trajectory<T>, integ: &IntegratorConfig, what: &str) -> Result<()> {
    let expected = integ.depth() * integ.per_layer() + 1;
    if traj.mode != integ.mode || traj.len() != expected || (traj.dt - integ.dt()).abs() > 1e-15 * integ.dt() {
        return Err(Error::Config(format!(
            "{what} trajectory ({} {} states, dt {}) does not match the integrator grid ({} {} states, dt {})",
            traj.mode,
            traj.len(),
            traj.dt,
            integ.mode,
            expected,
            integ.dt()
        )));
    }
    Ok(())
}

/// Re-derive K0 with the coupled solver and confirm it reproduces `k0`.
fn coupled_from(
    k0: &Trajectory<KernelMatrix>,
    v4_init: &PairMatrix,
    k1_init: &KernelMatrix,
    model: &FlowModel,
    integ: &IntegratorConfig,
    terms: FlowTerms,
) -> Result<FlowSolution> {
    check_grid(k0, integ, "K0")?;
    let sol = flow_all(k0.first(), v4_init, k1_init, model, integ, terms)?;
    for (i, (a, b)) in sol.k0.states().iter().zip(k0.states()).enumerate() {
        if a.sub(b).max_abs() > 1e-12 * b.max_abs().max(1.0) {
            return Err(Error::Config(format!(
                "K0 trajectory disagrees with this model at step {i}; it was produced by a different configuration"
            )));
        }
    }
    Ok(sol)
}

/// Kernel-fluctuation covariance along a background trajectory.
pub fn flow_v4(
    v4_init: &PairMatrix,
    k0: &Trajectory<KernelMatrix>,
    model: &FlowModel,
    integ: &IntegratorConfig,
    terms: FlowTerms,
) -> Result<Trajectory<PairMatrix>> {
    model.check(integ)?;
    check_grid(k0, integ, "K0")?;
    let n = k0.first().dim();
    match integ.mode {
        Mode::Ladder => {
            check_v4(v4_init, 0, 0.0)?;
            let mut v = v4_init.matrix().clone();
            let mut out = vec![v4_init.clone()];
            for (step, k) in k0.states()[..k0.len() - 1].iter().enumerate() {
                let t = k0.time(step);
                let s = ladder_step(model, integ, FlowTerms { tadpole: false, ..terms }, k, None)
                    .map_err(|e| flow_error(step, t, e))?;
                let next = symmetric(n, &s.a * &v * s.a.transpose() + &s.v_source);
                check_v4(&next, step + 1, k0.time(step + 1))?;
                v = next.matrix().clone();
                out.push(next);
            }
            Ok(Trajectory::new(integ, 0.0, out))
        }
        Mode::Continuous => {
            let terms = FlowTerms { tadpole: false, ..terms };
            Ok(coupled_from(k0, v4_init, &KernelMatrix::zeros(n), model, integ, terms)?.v4)
        }
    }
}

/// Tadpole-sourced finite-width mean correction.
pub fn flow_k1_eft(
    k1_init: &KernelMatrix,
    k0: &Trajectory<KernelMatrix>,
    v4: &Trajectory<PairMatrix>,
    model: &FlowModel,
    integ: &IntegratorConfig,
    terms: FlowTerms,
) -> Result<Trajectory<KernelMatrix>> {
    model.check(integ)?;
    check_grid(k0, integ, "K0")?;
    check_grid(v4, integ, "V4")?;
    let n = k0.first().dim();
    let idx = PairIndex::new(n);
    match integ.mode {
        Mode::Ladder => {
            let mut k1 = pair_vec(k1_init, &idx);
            let mut out = vec![k1_init.clone()];
            for step in 0..k0.len() - 1 {
                let s = ladder_step(model, integ, terms, &k0.states()[step], Some(&v4.states()[step]))
                    .map_err(|e| flow_error(step, k0.time(step), e))?;
                k1 = &s.a * &k1 + &s.k1_source;
                out.push(KernelMatrix::from_pair_vector(&idx, &k1));
            }
            Ok(Trajectory::new(integ, 0.0, out))
        }
        Mode::Continuous => {
            // V4 enters at RK4 stage states, so it is re-integrated
            // alongside and checked against the supplied trajectory
            let sol = coupled_from(k0, v4.first(), k1_init, model, integ, terms)?;
            for (i, (a, b)) in sol.v4.states().iter().zip(v4.states()).enumerate() {
                if a.sub(b).max_abs() > 1e-10 * b.max_abs().max(1.0) {
                    return Err(Error::Config(format!(
                        "V4 trajectory disagrees with the flow of its initial value at step {i}"
                    )));
                }
            }
            Ok(sol.k1)
        }
    }
}

/// Exact-source values `U1_exact^ℓ` at a set of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSeries {
    pub layers: Vec<usize>,
    pub values: Vec<KernelMatrix>,
}

/// How missing ladder steps of a source series are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Every ladder step must be present.
    #[default]
    None,
    /// Piecewise linear between the given layers.
    Linear,
}

/// `K1^{ℓ+1} = α² K1^ℓ + ε² C_W U1_exact^ℓ`, starting from zero.
pub fn flow_k1_u1ex(
    u1: &SourceSeries,
    model: &FlowModel,
    integ: &IntegratorConfig,
    interpolation: Interpolation,
) -> Result<Trajectory<KernelMatrix>> {
    integ.validate()?;
    if integ.mode != Mode::Ladder {
        return Err(Error::Config("the exact-source recursion runs on the ladder only".into()));
    }
    if u1.layers.len() != u1.values.len() || u1.values.is_empty() {
        return Err(Error::Data("source series is empty or ragged".into()));
    }
    if u1.layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Data("source layers must be strictly increasing".into()));
    }
    let depth = integ.depth();
    let n = u1.values[0].dim();
    let at = |l: usize| -> Result<KernelMatrix> {
        match u1.layers.binary_search(&l) {
            Ok(i) => Ok(u1.values[i].clone()),
            Err(i) => match interpolation {
                Interpolation::Linear if i > 0 && i < u1.layers.len() => {
                    let (l0, l1) = (u1.layers[i - 1], u1.layers[i]);
                    let w = (l - l0) as f64 / (l1 - l0) as f64;
                    Ok(u1.values[i - 1].scaled(1.0 - w).axpy(w, &u1.values[i]))
                }
                _ => Err(Error::Data(format!("exact source missing at layer {l}"))),
            },
        }
    };
    let a2 = model.alpha * model.alpha;
    let c = integ.eps * integ.eps * model.drift.cw;
    let mut k1 = KernelMatrix::zeros(n);
    let mut out = vec![k1.clone()];
    for l in 0..depth {
        k1 = k1.scaled(a2).axpy(c, &at(l)?);
        out.push(k1.clone());
    }
    Ok(Trajectory::new(integ, 0.0, out))
}

/// Flow map `Φ(t) = R(t, s)` of `∂_t R = χ_{K0(t)} R` on the grid of `k0`
/// from grid time `s`; in ladder form `R^{ℓ+1} = A^ℓ R^ℓ`.
pub fn response_propagator(
    k0: &Trajectory<KernelMatrix>,
    s: f64,
    model: &FlowModel,
    integ: &IntegratorConfig,
) -> Result<Trajectory<PairMatrix>> {
    model.check(integ)?;
    check_grid(k0, integ, "K0")?;
    let start = k0.index_of(s)?;
    let maps = flow_maps(&k0.states()[start..], model, integ, FlowTerms::default(), start)?;
    let n = k0.first().dim();
    let states = maps
        .into_iter()
        .map(|m| PairMatrix::new(n, m, false).expect("square"))
        .collect();
    Ok(Trajectory {
        mode: k0.mode,
        t0: k0.time(start),
        dt: k0.dt,
        per_layer: k0.per_layer,
        states,
    })
}

/// `R(t, s)` for a single pair of grid times.
pub fn response(
    k0: &Trajectory<KernelMatrix>,
    t: f64,
    s: f64,
    model: &FlowModel,
    integ: &IntegratorConfig,
) -> Result<PairMatrix> {
    if t < s - 1e-12 {
        return Err(Error::Retarded { t, s });
    }
    let r = response_propagator(k0, s, model, integ)?;
    Ok(r.at_time(t)?.clone())
}

fn flow_maps(
    k0: &[KernelMatrix],
    model: &FlowModel,
    integ: &IntegratorConfig,
    terms: FlowTerms,
    offset: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let p = PairIndex::new(k0[0].dim()).len();
    let mut phi = DMatrix::identity(p, p);
    let mut out = vec![phi.clone()];
    let dt = integ.dt();
    for (i, k) in k0[..k0.len() - 1].iter().enumerate() {
        let step = offset + i;
        let t = dt * step as f64;
        phi = match integ.mode {
            Mode::Ladder => {
                let s = ladder_step(model, integ, terms, k, None).map_err(|e| flow_error(step, t, e))?;
                &s.a * &phi
            }
            Mode::Continuous => {
                // K0 and Φ advance together so χ is sampled at the RK4 stages
                let f = |k: &KernelMatrix| -> Result<(KernelMatrix, DMatrix<f64>)> {
                    let ex = model.expand(k).map_err(|e| flow_error(step, t, e))?;
                    Ok((ex.q.clone(), chi_of(&ex, terms)))
                };
                let (q1, c1) = f(k)?;
                let d1 = &c1 * &phi;
                let (q2, c2) = f(&k.axpy(dt / 2.0, &q1))?;
                let d2 = &c2 * (&phi + &d1 * (dt / 2.0));
                let (q3, c3) = f(&k.axpy(dt / 2.0, &q2))?;
                let d3 = &c3 * (&phi + &d2 * (dt / 2.0));
                let (_, c4) = f(&k.axpy(dt, &q3))?;
                let d4 = &c4 * (&phi + &d3 * dt);
                &phi + (d1 + (d2 + d3) * 2.0 + d4) * (dt / 6.0)
            }
        };
        out.push(phi.clone());
    }
    Ok(out)
}

fn invert(m: &DMatrix<f64>, step: usize, t: f64) -> Result<DMatrix<f64>> {
    m.clone().try_inverse().ok_or_else(|| Error::Flow {
        step,
        t,
        detail: "flow map is singular".into(),
    })
}

/// `V4(t) = R(t,0) V4(0) R(t,0)ᵀ + ∫₀ᵗ R(t,u) Σ(K0(u)) R(t,u)ᵀ du`.
///
/// On the ladder the integral is the exact discrete sum over steps; in
/// continuous mode it is trapezoidal on the grid of `k0`, using
/// `R(t,u) = Φ(t) Φ(u)⁻¹`.
pub fn v4_integral_form(
    k0: &Trajectory<KernelMatrix>,
    v4_init: &PairMatrix,
    model: &FlowModel,
    integ: &IntegratorConfig,
    terms: FlowTerms,
) -> Result<Trajectory<PairMatrix>> {
    model.check(integ)?;
    check_grid(k0, integ, "K0")?;
    check_v4(v4_init, 0, 0.0)?;
    let n = k0.first().dim();
    let maps = flow_maps(k0.states(), model, integ, terms, 0)?;
    let p = v4_init.dim();
    let mut acc = DMatrix::zeros(p, p);
    let mut out = vec![v4_init.clone()];
    match integ.mode {
        Mode::Ladder => {
            for step in 0..k0.len() - 1 {
                let t = k0.time(step + 1);
                let s = ladder_step(model, integ, FlowTerms { tadpole: false, ..terms }, &k0.states()[step], None)
                    .map_err(|e| flow_error(step, k0.time(step), e))?;
                let inv = invert(&maps[step + 1], step + 1, t)?;
                acc += &inv * &s.v_source * inv.transpose();
                let phi = &maps[step + 1];
                out.push(symmetric(n, phi * (v4_init.matrix() + &acc) * phi.transpose()));
            }
        }
        Mode::Continuous => {
            let integrand = |i: usize| -> Result<DMatrix<f64>> {
                let inv = invert(&maps[i], i, k0.time(i))?;
                let sigma = if terms.source {
                    let k = &k0.states()[i];
                    model
                        .expand(k)
                        .and_then(|ex| ex.sigma(k))
                        .map_err(|e| flow_error(i, k0.time(i), e))?
                        .into_matrix()
                } else {
                    DMatrix::zeros(p, p)
                };
                Ok(&inv * sigma * inv.transpose())
            };
            let h = k0.dt();
            let mut prev = integrand(0)?;
            for i in 1..k0.len() {
                let cur = integrand(i)?;
                acc += (&prev + &cur) * (h / 2.0);
                let phi = &maps[i];
                out.push(symmetric(n, phi * (v4_init.matrix() + &acc) * phi.transpose()));
                prev = cur;
            }
        }
    }
    Ok(Trajectory::new(integ, 0.0, out))
}

/// `K1(t) = R(t,0) K1(0) + ∫₀ᵗ R(t,s) ½ D²Q[K0(s)]:V4(s) ds`, with the same
/// quadrature conventions as [`v4_integral_form`].
pub fn k1_integral_form(
    k0: &Trajectory<KernelMatrix>,
    v4: &Trajectory<PairMatrix>,
    k1_init: &KernelMatrix,
    model: &FlowModel,
    integ: &IntegratorConfig,
    terms: FlowTerms,
) -> Result<Trajectory<KernelMatrix>> {
    model.check(integ)?;
    check_grid(k0, integ, "K0")?;
    check_grid(v4, integ, "V4")?;
    let n = k0.first().dim();
    let idx = PairIndex::new(n);
    let maps = flow_maps(k0.states(), model, integ, terms, 0)?;
    let k1_0 = pair_vec(k1_init, &idx);
    let mut acc = DVector::zeros(idx.len());
    let mut out = vec![k1_init.clone()];
    let tadpole = |i: usize| -> Result<DVector<f64>> {
        if !terms.tadpole {
            return Ok(DVector::zeros(idx.len()));
        }
        let d = model
            .expand(&k0.states()[i])
            .and_then(|ex| ex.d2q_contract(&v4.states()[i]))
            .map_err(|e| flow_error(i, k0.time(i), e))?;
        Ok(pair_vec(&d, &idx) * 0.5)
    };
    match integ.mode {
        Mode::Ladder => {
            let e2 = integ.eps * integ.eps;
            for step in 0..k0.len() - 1 {
                let inv = invert(&maps[step + 1], step + 1, k0.time(step + 1))?;
                acc += inv * tadpole(step)? * e2;
                out.push(KernelMatrix::from_pair_vector(&idx, &(&maps[step + 1] * (&k1_0 + &acc))));
            }
        }
        Mode::Continuous => {
            let h = k0.dt();
            let mut prev = tadpole(0)?;
            for i in 1..k0.len() {
                let inv_prev = invert(&maps[i - 1], i - 1, k0.time(i - 1))?;
                let inv = invert(&maps[i], i, k0.time(i))?;
                let cur = tadpole(i)?;
                acc += (inv_prev * &prev + &inv * &cur) * (h / 2.0);
                out.push(KernelMatrix::from_pair_vector(&idx, &(&maps[i] * (&k1_0 + &acc))));
                prev = cur;
            }
        }
    }
    Ok(Trajectory::new(integ, 0.0, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;

    fn linear_model(cw: f64) -> FlowModel {
        FlowModel::new(1.0, Drift::new(Activation::Linear, cw, 0.0, QuadratureRule::gauss_hermite(8).unwrap()))
    }

    #[test]
    fn linear_k0_is_exponential() {
        let k = KernelMatrix::equicorrelated(3, 1.5, 0.2);
        let model = linear_model(2.0);
        let rk = flow_k0(&k, &model, &IntegratorConfig::continuous(0.1, 1.0, 4)).unwrap();
        let want = k.scaled(2f64.exp());
        assert!(rk.last().sub(&want).max_abs() / want.max_abs() <= 1e-6);
        let lad = flow_k0(&k, &model, &IntegratorConfig::ladder(0.1, 1.0)).unwrap();
        let err = lad.last().sub(&want).max_abs() / want.max_abs();
        assert!(err <= 0.1 && err > 1e-3, "{err}");
    }

    #[test]
    fn zero_time_returns_the_initial_state() {
        let k = KernelMatrix::equicorrelated(2, 2.0, 0.3);
        let model = linear_model(2.0);
        let t = flow_k0(&k, &model, &IntegratorConfig::ladder(0.1, 0.0)).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.first(), &k);
    }

    #[test]
    fn continuous_mode_rejects_general_alpha() {
        let k = KernelMatrix::equicorrelated(2, 2.0, 0.3);
        let mut model = linear_model(2.0);
        model.alpha = 0.5;
        let err = flow_k0(&k, &model, &IntegratorConfig::continuous(0.1, 1.0, 2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn retarded_domain_is_enforced() {
        let k = KernelMatrix::equicorrelated(2, 2.0, 0.3);
        let model = linear_model(1.0);
        let integ = IntegratorConfig::ladder(0.1, 0.5);
        let k0 = flow_k0(&k, &model, &integ).unwrap();
        assert!(matches!(response(&k0, 0.1, 0.3, &model, &integ), Err(Error::Retarded { .. })));
    }

    #[test]
    fn exact_source_recursion_handles_gaps() {
        let model = linear_model(2.0);
        let integ = IntegratorConfig::ladder(0.5, 1.0);
        let series = SourceSeries {
            layers: vec![0, 3],
            values: vec![KernelMatrix::identity(2), KernelMatrix::identity(2).scaled(4.0)],
        };
        assert!(matches!(
            flow_k1_u1ex(&series, &model, &integ, Interpolation::None),
            Err(Error::Data(_))
        ));
        let k1 = flow_k1_u1ex(&series, &model, &integ, Interpolation::Linear).unwrap();
        // 0.25 * 2 * (1 + 2 + 3 + 4)
        assert!((k1.last().get(0, 0) - 5.0).abs() < 1e-12);
    }
}
