//! Exact Monte-Carlo simulation of the residual block
//! `φ^{ℓ+1} = α φ^ℓ + ε (W σ(φ^ℓ) + b)` over an ensemble of independent
//! networks, with streaming sufficient statistics.
//!
//! Given the layer, the increments `η_i = Σ_j W_ij σ(φ_j) + b_i` are i.i.d.
//! over neurons with law `N(0, Q̂)`, `Q̂ = C_b + C_W S`. The default sampler
//! draws them directly from that law (`n N` normals per layer); the explicit
//! sampler draws `W` and `b` and is kept as a reference.

use std::ops::Range;
use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accum::{Estimates, GroupRow, GroupedSums, Jackknife};
use crate::activation::{tanh_fast, Activation, MAX_DERIVATIVE};
use crate::error::{Error, Result};
use crate::kernel::{KernelMatrix, PairIndex, PairMatrix, TOL_PSD};
use crate::rng::{Role, SeedPolicy, Streams};

/// Network and initialization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Width `n`.
    pub width: usize,
    /// Number of layers `L`.
    pub depth: usize,
    /// Residual scale `ε`.
    pub eps: f64,
    /// Skip coefficient `α` (1 for the residual block, 0 for an MLP).
    pub alpha: f64,
    pub cw: f64,
    pub cb: f64,
    pub act: Activation,
    /// Initial kernel `K0⁰` over the `N` inputs.
    pub k0_init: KernelMatrix,
}

impl NetworkConfig {
    /// Desk-scale baseline: tanh, `C_W = 2`, `C_b = 0`, `N = 4`, `κ = 2`,
    /// `ρ = 0.3`, `n = 64`, `ε = 0.1`, `L = 200`.
    pub fn baseline() -> Self {
        Self {
            width: 64,
            depth: 200,
            eps: 0.1,
            alpha: 1.0,
            cw: 2.0,
            cb: 0.0,
            act: Activation::Tanh,
            k0_init: KernelMatrix::equicorrelated(4, 2.0, 0.3),
        }
    }

    pub fn points(&self) -> usize {
        self.k0_init.dim()
    }

    /// Depth time `t = ε² ℓ`.
    pub fn time(&self, layer: usize) -> f64 {
        self.eps * self.eps * layer as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("width must be at least 1".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !self.alpha.is_finite() || !self.cw.is_finite() || !self.cb.is_finite() {
            return Err(Error::Config("alpha, cw, cb must be finite".into()));
        }
        if self.cw < 0.0 || self.cb < 0.0 {
            return Err(Error::Config("cw and cb must be non-negative".into()));
        }
        if self.points() == 0 {
            return Err(Error::Config("k0_init must have at least one input".into()));
        }
        self.k0_init
            .check_psd(TOL_PSD)
            .map_err(|e| Error::Config(format!("k0_init: {e}")))
    }
}

/// How layer increments are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// `η_i ~ N(0, Q̂)` directly.
    #[default]
    Increments,
    /// Explicit `W ~ N(0, C_W/n)`, `b ~ N(0, C_b)`.
    Explicit,
}

/// Sorted set of depths at which pair-space statistics are tracked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Checkpoints(Vec<usize>);

impl TryFrom<Vec<usize>> for Checkpoints {
    type Error = Error;

    fn try_from(mut layers: Vec<usize>) -> Result<Self> {
        layers.sort_unstable();
        layers.dedup();
        if layers.is_empty() {
            return Err(Error::Config("at least one checkpoint is required".into()));
        }
        Ok(Self(layers))
    }
}

impl From<Checkpoints> for Vec<usize> {
    fn from(c: Checkpoints) -> Self {
        c.0
    }
}

impl Checkpoints {
    pub fn new(layers: Vec<usize>) -> Result<Self> {
        Self::try_from(layers)
    }

    /// `{0, 1}` plus `count` evenly spaced depths in `[0, depth]`, each
    /// followed by its successor so one-step differences are available.
    pub fn evenly_spaced(depth: usize, count: usize) -> Self {
        let mut layers = vec![0, 1.min(depth)];
        for k in 0..=count {
            let l = ((k as f64) * depth as f64 / count.max(1) as f64).round() as usize;
            layers.push(l);
            if l < depth {
                layers.push(l + 1);
            }
        }
        Self::try_from(layers).expect("non-empty")
    }

    /// Default grid with 40 evenly spaced depths.
    pub fn default_for(depth: usize) -> Self {
        Self::evenly_spaced(depth, 40)
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.binary_search(&layer).is_ok()
    }

    pub fn position(&self, layer: usize) -> Option<usize> {
        self.0.binary_search(&layer).ok()
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("non-empty")
    }
}

/// Ensemble run parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub members: u64,
    pub seeds: SeedPolicy,
    pub checkpoints: Checkpoints,
    /// Track cross-neuron four-point sums for `V4^(φ)`.
    pub heavy: bool,
    /// Track `S^(p,q)` for `p + q <= 4` at checkpoints.
    pub hierarchy: bool,
    /// Number of jackknife groups.
    pub groups: usize,
    pub sampler: Sampler,
}

impl RunOptions {
    pub fn new(members: u64, master_seed: u64, checkpoints: Checkpoints) -> Self {
        Self {
            members,
            seeds: SeedPolicy::new(master_seed),
            checkpoints,
            heavy: false,
            hierarchy: false,
            groups: DEFAULT_GROUPS,
            sampler: Sampler::Increments,
        }
    }
}

/// Default number of jackknife groups.
pub const DEFAULT_GROUPS: usize = 64;

/// `(p, q)` orders tracked for the observable hierarchy.
pub fn hierarchy_orders() -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for total in 0..=MAX_DERIVATIVE {
        for p in 0..=total {
            out.push((p, total - p));
        }
    }
    out
}

/// Offsets of every tracked scalar in a member record.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    points: usize,
    pairs: PairIndex,
    // symmetric storage of P x P pair matrices
    pair_pairs: PairIndex,
    depth: usize,
    checkpoints: Checkpoints,
    heavy: bool,
    hierarchy: bool,
    orders: Vec<(usize, usize)>,
    checkpoint_base: usize,
    checkpoint_stride: usize,
}

impl Layout {
    pub fn new(points: usize, depth: usize, opts: &RunOptions) -> Result<Self> {
        if opts.checkpoints.last() > depth {
            return Err(Error::Config(format!(
                "checkpoint {} beyond depth {depth}",
                opts.checkpoints.last()
            )));
        }
        let pairs = PairIndex::new(points);
        let p = pairs.len();
        let pair_pairs = PairIndex::new(p);
        let orders = if opts.hierarchy { hierarchy_orders() } else { Vec::new() };
        let sym = pair_pairs.len();
        let stride = 3 * sym + if opts.heavy { sym } else { 0 } + orders.len() * points * points;
        Ok(Self {
            points,
            pairs,
            pair_pairs,
            depth,
            checkpoints: opts.checkpoints.clone(),
            heavy: opts.heavy,
            hierarchy: opts.hierarchy,
            orders,
            checkpoint_base: (depth + 1) * 2 * p,
            checkpoint_stride: stride,
        })
    }

    pub fn width(&self) -> usize {
        self.checkpoint_base + self.checkpoints.layers().len() * self.checkpoint_stride
    }

    pub fn pairs(&self) -> &PairIndex {
        &self.pairs
    }

    fn p(&self) -> usize {
        self.pairs.len()
    }

    fn sym(&self) -> usize {
        self.pair_pairs.len()
    }

    fn g(&self, layer: usize) -> usize {
        layer * 2 * self.p()
    }

    fn s(&self, layer: usize) -> usize {
        layer * 2 * self.p() + self.p()
    }

    fn checkpoint(&self, k: usize) -> usize {
        self.checkpoint_base + k * self.checkpoint_stride
    }

    fn gg(&self, k: usize) -> usize {
        self.checkpoint(k)
    }

    fn x(&self, k: usize) -> usize {
        self.checkpoint(k) + self.sym()
    }

    fn y(&self, k: usize) -> usize {
        self.checkpoint(k) + 2 * self.sym()
    }

    fn c(&self, k: usize) -> usize {
        self.checkpoint(k) + 3 * self.sym()
    }

    fn hier(&self, k: usize) -> usize {
        self.checkpoint(k) + 3 * self.sym() + if self.heavy { self.sym() } else { 0 }
    }

    /// Layer a record slot belongs to, for diagnostics.
    fn layer_of(&self, slot: usize) -> usize {
        if slot < self.checkpoint_base {
            slot / (2 * self.p())
        } else {
            self.checkpoints.layers()[(slot - self.checkpoint_base) / self.checkpoint_stride]
        }
    }
}

/// Deterministic dot product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut acc = [0.0; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn apply_activation(act: Activation, src: &[f64], dst: &mut [f64]) {
    match act {
        Activation::Tanh => {
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = tanh_fast(x);
            }
        }
        Activation::Erf => {
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = libm::erf(x);
            }
        }
        Activation::Linear => dst.copy_from_slice(src),
    }
}

/// Lower Cholesky factor of a PSD matrix (row-major, `N x N`); pivots below
/// `tol * trace` are treated as exact zeros.
fn psd_cholesky(m: &[f64], n: usize, out: &mut [f64]) -> bool {
    let trace: f64 = (0..n).map(|i| m[i * n + i]).sum();
    let tol = 1e-13 * trace.abs().max(f64::MIN_POSITIVE);
    out.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..n {
        let mut d = m[j * n + j];
        for k in 0..j {
            d -= out[j * n + k] * out[j * n + k];
        }
        if d < -tol {
            return false;
        }
        if d <= tol {
            continue;
        }
        let ljj = d.sqrt();
        out[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= out[i * n + k] * out[j * n + k];
            }
            out[i * n + j] = s / ljj;
        }
    }
    true
}

/// Row-major factor `F` with `F F^T = m` from the symmetric eigensystem,
/// for nearly singular matrices where pivoted-out Cholesky loses accuracy.
fn psd_eigen_factor(m: &[f64], n: usize, out: &mut [f64]) -> bool {
    let mat = DMatrix::from_row_slice(n, n, m);
    let trace = mat.trace().abs().max(f64::MIN_POSITIVE);
    let eig = SymmetricEigen::new(mat);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * trace || !l.is_finite()) {
        return false;
    }
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = eig.eigenvectors[(i, j)] * eig.eigenvalues[j].max(0.0).sqrt();
        }
    }
    true
}

/// Square-root factor `F` with `F F^T = K`, via the symmetric eigensystem.
fn sqrt_factor(k: &KernelMatrix) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(k.matrix().clone());
    let mut f = eig.eigenvectors.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        for i in 0..f.nrows() {
            f[(i, j)] *= s;
        }
    }
    f
}

/// One member's evolving state and scratch space.
struct Member<'a> {
    cfg: &'a NetworkConfig,
    layout: &'a Layout,
    n: usize,
    big_n: usize,
    // structure-of-arrays: phi[a * n + i]
    phi: Vec<f64>,
    sig: Vec<f64>,
    eta: Vec<f64>,
    q_hat: Vec<f64>,
    chol: Vec<f64>,
    z: Vec<f64>,
    weights: Vec<f64>,
    products: Vec<f64>,
    derivs: Vec<[f64; MAX_DERIVATIVE + 1]>,
}

impl<'a> Member<'a> {
    fn new(cfg: &'a NetworkConfig, layout: &'a Layout) -> Self {
        let n = cfg.width;
        let big_n = cfg.points();
        let p = layout.p();
        Self {
            cfg,
            layout,
            n,
            big_n,
            phi: vec![0.0; n * big_n],
            sig: vec![0.0; n * big_n],
            eta: vec![0.0; n * big_n],
            q_hat: vec![0.0; big_n * big_n],
            chol: vec![0.0; big_n * big_n],
            z: vec![0.0; n * big_n],
            weights: Vec::new(),
            products: if layout.heavy { vec![0.0; p * n] } else { Vec::new() },
            derivs: if layout.hierarchy {
                vec![[0.0; MAX_DERIVATIVE + 1]; n * big_n]
            } else {
                Vec::new()
            },
        }
    }

    fn init(&mut self, factor: &DMatrix<f64>, rng: &mut ChaCha8Rng) {
        let (n, nn) = (self.n, self.big_n);
        for i in 0..n {
            for b in 0..nn {
                self.z[b] = rng.sample(StandardNormal);
            }
            for a in 0..nn {
                let mut v = 0.0;
                for b in 0..nn {
                    v += factor[(a, b)] * self.z[b];
                }
                self.phi[a * n + i] = v;
            }
        }
    }

    fn gram(&self, x: &[f64], a: usize, b: usize) -> f64 {
        let n = self.n;
        dot(&x[a * n..(a + 1) * n], &x[b * n..(b + 1) * n]) / n as f64
    }

    /// Record `G`, `S` (and checkpoint statistics) for the current layer and
    /// leave `σ(φ)` in `sig` and `Q̂` in `q_hat`.
    fn observe(&mut self, layer: usize, record: &mut [f64]) {
        let layout = self.layout;
        let (n, nn) = (self.n, self.big_n);
        apply_activation(self.cfg.act, &self.phi, &mut self.sig);
        let go = layout.g(layer);
        let so = layout.s(layer);
        for (k, (a, b)) in layout.pairs.iter() {
            record[go + k] = self.gram(&self.phi, a, b);
            record[so + k] = self.gram(&self.sig, a, b);
        }
        for (k, (a, b)) in layout.pairs.iter() {
            let q = self.cfg.cb + self.cfg.cw * record[so + k];
            self.q_hat[a * nn + b] = q;
            self.q_hat[b * nn + a] = q;
        }
        let Some(pos) = layout.checkpoints.position(layer) else {
            return;
        };
        let gv = record[go..go + layout.p()].to_vec();
        let g = |a: usize, b: usize| gv[layout.pairs.offset(a, b)];
        let q = |a: usize, b: usize| self.q_hat[a * nn + b];
        let (gg, xo, yo) = (layout.gg(pos), layout.x(pos), layout.y(pos));
        for (k, (ra, rb)) in layout.pair_pairs.iter() {
            let (a, b) = layout.pairs.pair(ra);
            let (c, d) = layout.pairs.pair(rb);
            record[gg + k] = g(a, b) * g(c, d);
            record[xo + k] =
                g(a, c) * q(b, d) + g(a, d) * q(b, c) + g(b, c) * q(a, d) + g(b, d) * q(a, c);
            record[yo + k] = q(a, c) * q(b, d) + q(a, d) * q(b, c);
        }
        if layout.heavy {
            for (k, (a, b)) in layout.pairs.iter() {
                for i in 0..n {
                    self.products[k * n + i] = self.phi[a * n + i] * self.phi[b * n + i];
                }
            }
            let co = layout.c(pos);
            let nf = n as f64;
            for (k, (ra, rb)) in layout.pair_pairs.iter() {
                let t = dot(&self.products[ra * n..(ra + 1) * n], &self.products[rb * n..(rb + 1) * n]);
                let ga = record[go + ra];
                let gb = record[go + rb];
                record[co + k] = if n > 1 { (t - nf * ga * gb) / (nf - 1.0) } else { 0.0 };
            }
        }
        if layout.hierarchy {
            for (d, &x) in self.derivs.iter_mut().zip(&self.phi) {
                *d = self.cfg.act.derivatives(x);
            }
            let ho = layout.hier(pos);
            for (o, &(pp, qq)) in layout.orders.iter().enumerate() {
                for a in 0..nn {
                    for b in 0..nn {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += self.derivs[a * n + i][pp] * self.derivs[b * n + i][qq];
                        }
                        record[ho + (o * nn + a) * nn + b] = acc / n as f64;
                    }
                }
            }
        }
    }

    /// Draw the layer increments into `eta`.
    fn increments(&mut self, sampler: Sampler, streams: &Streams, member: u64, layer: usize) -> Result<()> {
        let (n, nn) = (self.n, self.big_n);
        match sampler {
            Sampler::Increments => {
                if !psd_cholesky(&self.q_hat, nn, &mut self.chol) && !psd_eigen_factor(&self.q_hat, nn, &mut self.chol) {
                    return Err(Error::NonFinite {
                        member,
                        layer,
                        detail: "conditional covariance is not PSD".into(),
                    });
                }
                let mut rng = streams.open(member, layer, Role::Increments);
                // z holds N independent standard normal vectors over neurons
                for v in self.z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                for a in 0..nn {
                    let eta = &mut self.eta[a * n..(a + 1) * n];
                    eta.iter_mut().for_each(|v| *v = 0.0);
                    for b in 0..nn {
                        let l = self.chol[a * nn + b];
                        if l == 0.0 {
                            continue;
                        }
                        for (e, &z) in eta.iter_mut().zip(&self.z[b * n..(b + 1) * n]) {
                            *e += l * z;
                        }
                    }
                }
            }
            Sampler::Explicit => {
                let sw = (self.cfg.cw / n as f64).sqrt();
                let sb = self.cfg.cb.sqrt();
                let mut wr = streams.open(member, layer, Role::Weights);
                let mut br = streams.open(member, layer, Role::Biases);
                self.weights.resize(n, 0.0);
                for i in 0..n {
                    for w in self.weights.iter_mut() {
                        *w = sw * wr.sample::<f64, _>(StandardNormal);
                    }
                    let bias = sb * br.sample::<f64, _>(StandardNormal);
                    for a in 0..nn {
                        self.eta[a * n + i] = dot(&self.weights, &self.sig[a * n..(a + 1) * n]) + bias;
                    }
                }
            }
        }
        Ok(())
    }

    fn step(&mut self) {
        let (alpha, eps) = (self.cfg.alpha, self.cfg.eps);
        for (p, e) in self.phi.iter_mut().zip(&self.eta) {
            *p = alpha * *p + eps * e;
        }
    }

    /// Largest relative violation of `G' = α²G + αεH + ε²J` for this step,
    /// recomputed from the stored `φ` and `η`.
    fn update_identity_error(&self, before: &[f64]) -> f64 {
        let (n, nn) = (self.n, self.big_n);
        let (alpha, eps) = (self.cfg.alpha, self.cfg.eps);
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for a in 0..nn {
            for b in a..nn {
                let pa = &before[a * n..(a + 1) * n];
                let pb = &before[b * n..(b + 1) * n];
                let ea = &self.eta[a * n..(a + 1) * n];
                let eb = &self.eta[b * n..(b + 1) * n];
                let g = dot(pa, pb) / n as f64;
                let h = (dot(pa, eb) + dot(ea, pb)) / n as f64;
                let j = dot(ea, eb) / n as f64;
                let next = self.gram(&self.phi, a, b);
                worst = worst.max((next - (alpha * alpha * g + alpha * eps * h + eps * eps * j)).abs());
                scale = scale.max(next.abs());
            }
        }
        worst / scale.max(f64::MIN_POSITIVE)
    }
}

/// Precomputed, shareable pieces of a run.
struct Simulator<'a> {
    cfg: &'a NetworkConfig,
    opts: &'a RunOptions,
    layout: Layout,
    factor: DMatrix<f64>,
    streams: Streams,
}

impl<'a> Simulator<'a> {
    fn new(cfg: &'a NetworkConfig, opts: &'a RunOptions) -> Result<Self> {
        cfg.validate()?;
        if opts.groups < 2 {
            return Err(Error::Config("at least two jackknife groups are required".into()));
        }
        let layout = Layout::new(cfg.points(), cfg.depth, opts)?;
        Ok(Self {
            cfg,
            opts,
            layout,
            factor: sqrt_factor(&cfg.k0_init),
            streams: opts.seeds.streams(),
        })
    }

    fn check_layer(&self, record: &[f64], member: u64, layer: usize) -> Result<()> {
        let go = self.layout.g(layer);
        if record[go..go + 2 * self.layout.p()].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                member,
                layer,
                detail: "preactivations overflowed".into(),
            })
        }
    }

    fn run_member(&self, member: u64, record: &mut [f64], verify: Option<&mut f64>) -> Result<()> {
        let mut state = Member::new(self.cfg, &self.layout);
        let mut rng = self.streams.open(member, 0, Role::Init);
        state.init(&self.factor, &mut rng);
        let mut worst = 0.0f64;
        let verify_here = verify.is_some() || (cfg!(debug_assertions) && member % 4096 == 0);
        let mut before = Vec::new();
        for layer in 0..self.cfg.depth {
            state.observe(layer, record);
            self.check_layer(record, member, layer)?;
            state.increments(self.opts.sampler, &self.streams, member, layer)?;
            if verify_here {
                before.clone_from(&state.phi);
            }
            state.step();
            if verify_here {
                worst = worst.max(state.update_identity_error(&before));
            }
        }
        state.observe(self.cfg.depth, record);
        self.check_layer(record, member, self.cfg.depth)?;
        debug_assert!(worst <= 1e-12, "one-step kernel identity violated: {worst:e}");
        if let Some(v) = verify {
            *v = worst;
        }
        Ok(())
    }

    fn run_group(&self, group: usize, members: Range<u64>) -> Result<GroupRow> {
        let b = self.opts.groups as u64;
        let width = self.layout.width();
        let mut row = GroupRow::new(width);
        let mut record = vec![0.0; width];
        let mut m = members.start + (group as u64 + b - members.start % b) % b;
        while m < members.end {
            self.run_member(m, &mut record, None)?;
            row.add(&record).map_err(|slot| Error::NonFinite {
                member: m,
                layer: self.layout.layer_of(slot),
                detail: "statistic is non-finite or too large".into(),
            })?;
            m += b;
        }
        Ok(row)
    }
}

/// Ensemble statistics for one configuration.
#[derive(Debug, Clone)]
pub struct Ensemble {
    cfg: NetworkConfig,
    opts: RunOptions,
    layout: Layout,
    members: Range<u64>,
    sums: GroupedSums,
    jack: OnceLock<Jackknife>,
}

impl PartialEq for Ensemble {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.opts.checkpoints == other.opts.checkpoints && self.sums == other.sums
    }
}

/// Run members `0..opts.members` using the current rayon pool.
pub fn run_ensemble(cfg: &NetworkConfig, opts: &RunOptions) -> Result<Ensemble> {
    run_members(cfg, opts, 0..opts.members, true)
}

/// Single-threaded reference path; identical results to [`run_ensemble`].
pub fn run_ensemble_serial(cfg: &NetworkConfig, opts: &RunOptions) -> Result<Ensemble> {
    run_members(cfg, opts, 0..opts.members, false)
}

/// Run the members in `range` (global indices, so disjoint ranges merge
/// into the run over their union).
pub fn run_members(cfg: &NetworkConfig, opts: &RunOptions, range: Range<u64>, parallel: bool) -> Result<Ensemble> {
    if range.end <= range.start {
        return Err(Error::Config("member range is empty".into()));
    }
    let sim = Simulator::new(cfg, opts)?;
    let groups: Vec<usize> = (0..opts.groups).collect();
    let rows: Vec<Result<GroupRow>> = if parallel {
        groups.par_iter().map(|&g| sim.run_group(g, range.clone())).collect()
    } else {
        groups.iter().map(|&g| sim.run_group(g, range.clone())).collect()
    };
    let mut sums = GroupedSums::new(sim.layout.width(), opts.groups);
    let mut first_error: Option<Error> = None;
    let mut first_member = u64::MAX;
    for (g, row) in rows.into_iter().enumerate() {
        match row {
            Ok(row) => sums.add_row(g, &row)?,
            Err(e) => {
                let member = match &e {
                    Error::NonFinite { member, .. } => *member,
                    _ => 0,
                };
                if member < first_member {
                    first_member = member;
                    first_error = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    Ok(Ensemble {
        cfg: cfg.clone(),
        opts: opts.clone(),
        layout: sim.layout,
        members: range,
        sums,
        jack: OnceLock::new(),
    })
}

impl Ensemble {
    /// Rebuild an ensemble from saved sums over `members`.
    pub fn from_sums(cfg: &NetworkConfig, opts: &RunOptions, members: Range<u64>, sums: GroupedSums) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg.points(), cfg.depth, opts)?;
        if sums.width() != layout.width() || sums.groups() != opts.groups {
            return Err(Error::Data(format!(
                "saved sums are {}x{} but the configuration needs {}x{}",
                sums.width(),
                sums.groups(),
                layout.width(),
                opts.groups
            )));
        }
        if sums.count() != members.end.saturating_sub(members.start) {
            return Err(Error::Data(format!(
                "saved sums hold {} members, expected {}",
                sums.count(),
                members.end.saturating_sub(members.start)
            )));
        }
        let mut opts = opts.clone();
        opts.members = sums.count();
        Ok(Self {
            cfg: cfg.clone(),
            opts,
            layout,
            members,
            sums,
            jack: OnceLock::new(),
        })
    }
}

/// Simulate one member and return its record together with the worst
/// relative violation of the one-step kernel identity over all layers.
pub fn simulate_member(cfg: &NetworkConfig, opts: &RunOptions, member: u64) -> Result<(MemberRecord, f64)> {
    let sim = Simulator::new(cfg, opts)?;
    let mut values = vec![0.0; sim.layout.width()];
    let mut worst = 0.0;
    sim.run_member(member, &mut values, Some(&mut worst))?;
    Ok((
        MemberRecord {
            layout: sim.layout,
            values,
        },
        worst,
    ))
}

/// All tracked statistics of one member.
#[derive(Debug, Clone)]
pub struct MemberRecord {
    layout: Layout,
    values: Vec<f64>,
}

impl MemberRecord {
    pub fn g(&self, layer: usize) -> KernelMatrix {
        MeanView::new(&self.layout, &self.values).g(layer)
    }

    pub fn s(&self, layer: usize) -> KernelMatrix {
        MeanView::new(&self.layout, &self.values).s(layer)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Read access to a vector of (mean) statistics in record layout.
pub struct MeanView<'a> {
    layout: &'a Layout,
    m: &'a [f64],
}

impl<'a> MeanView<'a> {
    fn new(layout: &'a Layout, m: &'a [f64]) -> Self {
        Self { layout, m }
    }

    fn kernel(&self, offset: usize) -> KernelMatrix {
        let idx = &self.layout.pairs;
        let v = nalgebra::DVector::from_column_slice(&self.m[offset..offset + idx.len()]);
        KernelMatrix::from_pair_vector(idx, &v)
    }

    fn sym_pair(&self, offset: usize) -> DMatrix<f64> {
        let pp = &self.layout.pair_pairs;
        let p = self.layout.p();
        DMatrix::from_fn(p, p, |r, c| self.m[offset + pp.offset(r, c)])
    }

    fn pos(&self, layer: usize) -> usize {
        self.layout
            .checkpoints
            .position(layer)
            .unwrap_or_else(|| panic!("layer {layer} is not a checkpoint"))
    }

    /// Mean of `G^ℓ`.
    pub fn g(&self, layer: usize) -> KernelMatrix {
        self.kernel(self.layout.g(layer))
    }

    /// Mean of `S^ℓ`.
    pub fn s(&self, layer: usize) -> KernelMatrix {
        self.kernel(self.layout.s(layer))
    }

    /// Mean of `G_A G_B` at a checkpoint.
    pub fn gg(&self, layer: usize) -> DMatrix<f64> {
        self.sym_pair(self.layout.gg(self.pos(layer)))
    }

    /// Mean of the four-term source integrand at a checkpoint.
    pub fn x(&self, layer: usize) -> DMatrix<f64> {
        self.sym_pair(self.layout.x(self.pos(layer)))
    }

    /// Mean of `Ω(Q̂)` at a checkpoint.
    pub fn y(&self, layer: usize) -> DMatrix<f64> {
        self.sym_pair(self.layout.y(self.pos(layer)))
    }

    /// Mean within-member neuron covariance of `φ_a φ_b` products.
    pub fn c(&self, layer: usize) -> DMatrix<f64> {
        assert!(self.layout.heavy, "heavy statistics were not tracked");
        self.sym_pair(self.layout.c(self.pos(layer)))
    }

    /// Mean of `S^(p,q)_{ab} = σ^(p)(φ_a) σ^(q)(φ_b)` averaged over neurons.
    pub fn s_general(&self, layer: usize, p: usize, q: usize) -> Option<DMatrix<f64>> {
        let o = self.layout.orders.iter().position(|&o| o == (p, q))?;
        let n = self.layout.points;
        let base = self.layout.hier(self.pos(layer)) + o * n * n;
        Some(DMatrix::from_fn(n, n, |a, b| self.m[base + a * n + b]))
    }
}

/// Kernel-valued estimate with entrywise standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelEstimate {
    pub value: KernelMatrix,
    pub se: KernelMatrix,
}

/// Pair-operator estimate with entrywise standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEstimate {
    pub value: PairMatrix,
    pub se: DMatrix<f64>,
}

fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

impl Ensemble {
    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn options(&self) -> &RunOptions {
        &self.opts
    }

    pub fn checkpoints(&self) -> &Checkpoints {
        &self.opts.checkpoints
    }

    pub fn members(&self) -> u64 {
        self.sums.count()
    }

    pub fn member_range(&self) -> Range<u64> {
        self.members.clone()
    }

    pub fn pairs(&self) -> &PairIndex {
        &self.layout.pairs
    }

    pub fn is_heavy(&self) -> bool {
        self.layout.heavy
    }

    pub fn has_hierarchy(&self) -> bool {
        self.layout.hierarchy
    }

    /// Raw fixed-point sums, for exact comparisons.
    pub fn sums(&self) -> &GroupedSums {
        &self.sums
    }

    /// Fold another run of the same configuration over a disjoint member range.
    pub fn merge(&mut self, other: &Ensemble) -> Result<()> {
        if self.cfg != other.cfg || self.opts.checkpoints != other.opts.checkpoints || self.layout != other.layout {
            return Err(Error::Config("cannot merge runs of different configurations".into()));
        }
        if self.opts.seeds != other.opts.seeds {
            return Err(Error::Config("cannot merge runs with different master seeds".into()));
        }
        let adjacent = self.members.end == other.members.start || other.members.end == self.members.start;
        if !adjacent {
            return Err(Error::Config(format!(
                "member ranges {:?} and {:?} must be adjacent to merge",
                self.members, other.members
            )));
        }
        self.sums.merge(&other.sums)?;
        self.members = self.members.start.min(other.members.start)..self.members.end.max(other.members.end);
        self.opts.members = self.sums.count();
        self.jack = OnceLock::new();
        Ok(())
    }

    fn jackknife(&self) -> Result<&Jackknife> {
        if let Some(j) = self.jack.get() {
            return Ok(j);
        }
        let j = self.sums.jackknife()?;
        Ok(self.jack.get_or_init(|| j))
    }

    /// Jackknife estimate of any function of the tracked means.
    pub fn estimate<F>(&self, f: F) -> Result<Estimates>
    where
        F: Fn(&MeanView) -> Vec<f64>,
    {
        let layout = &self.layout;
        Ok(self.jackknife()?.estimate(|m| f(&MeanView::new(layout, m))))
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer > self.cfg.depth {
            return Err(Error::Config(format!("layer {layer} beyond depth {}", self.cfg.depth)));
        }
        Ok(())
    }

    fn check_checkpoint(&self, layer: usize) -> Result<()> {
        if !self.opts.checkpoints.contains(layer) {
            return Err(Error::Data(format!("layer {layer} is not a checkpoint")));
        }
        Ok(())
    }

    fn kernel_estimate<F>(&self, f: F) -> Result<KernelEstimate>
    where
        F: Fn(&MeanView) -> KernelMatrix,
    {
        let n = self.cfg.points();
        let est = self.estimate(|v| flatten(f(v).matrix()))?;
        Ok(KernelEstimate {
            value: KernelMatrix::new(DMatrix::from_vec(n, n, est.value))?,
            se: KernelMatrix::new(DMatrix::from_vec(n, n, est.se))?,
        })
    }

    fn pair_estimate<F>(&self, f: F) -> Result<PairEstimate>
    where
        F: Fn(&MeanView) -> DMatrix<f64>,
    {
        let p = self.layout.p();
        let est = self.estimate(|v| flatten(&f(v)))?;
        Ok(PairEstimate {
            value: PairMatrix::new(self.cfg.points(), DMatrix::from_vec(p, p, est.value), true)?,
            se: DMatrix::from_vec(p, p, est.se),
        })
    }

    /// `Ḡ^ℓ`.
    pub fn mean_g(&self, layer: usize) -> Result<KernelEstimate> {
        self.check_layer(layer)?;
        self.kernel_estimate(|v| v.g(layer))
    }

    /// `S̄^ℓ`.
    pub fn mean_s(&self, layer: usize) -> Result<KernelEstimate> {
        self.check_layer(layer)?;
        self.kernel_estimate(|v| v.s(layer))
    }

    /// `V4_emp = n (mean(G⊗G) - Ḡ⊗Ḡ)` on pair space.
    pub fn v4_emp(&self, layer: usize) -> Result<PairEstimate> {
        self.check_checkpoint(layer)?;
        let n = self.cfg.width as f64;
        let idx = self.layout.pairs.clone();
        self.pair_estimate(move |v| {
            let g = v.g(layer).to_pair_vector(&idx);
            (v.gg(layer) - &g * g.transpose()) * n
        })
    }

    /// `Σ_mic = E[G_ac Q̂_bd + G_ad Q̂_bc + G_bc Q̂_ad + G_bd Q̂_ac]`.
    pub fn sigma_mic(&self, layer: usize) -> Result<PairEstimate> {
        self.check_checkpoint(layer)?;
        self.pair_estimate(|v| v.x(layer))
    }

    /// `E[Ω(Q̂^ℓ)]`.
    pub fn omega_q_hat(&self, layer: usize) -> Result<PairEstimate> {
        self.check_checkpoint(layer)?;
        self.pair_estimate(|v| v.y(layer))
    }

    /// `K1_mic = n (Ḡ^ℓ - K0^ℓ)` for a given background.
    pub fn k1_mic(&self, layer: usize, k0: &KernelMatrix) -> Result<KernelEstimate> {
        self.check_layer(layer)?;
        let n = self.cfg.width as f64;
        self.kernel_estimate(|v| v.g(layer).sub(k0).scaled(n))
    }

    /// `U1_exact = n (S̄^ℓ - E2(K0^ℓ))` for a given `E2(K0^ℓ)`.
    pub fn u1_exact(&self, layer: usize, e2_k0: &KernelMatrix) -> Result<KernelEstimate> {
        self.check_layer(layer)?;
        let n = self.cfg.width as f64;
        self.kernel_estimate(|v| v.s(layer).sub(e2_k0).scaled(n))
    }

    fn require_heavy(&self) -> Result<()> {
        if !self.layout.heavy {
            return Err(Error::Unavailable(
                "V4^(φ)",
                "run without heavy mode; enable it to track cross-neuron four-point sums".into(),
            ));
        }
        Ok(())
    }

    /// `V4^(G) - V4^(φ)`, estimated per member as the neuron sample covariance
    /// of `φ_a φ_b` and `φ_c φ_d`.
    pub fn wishart_gap(&self, layer: usize) -> Result<PairEstimate> {
        self.require_heavy()?;
        self.check_checkpoint(layer)?;
        self.pair_estimate(|v| v.c(layer))
    }

    /// Preactivation connected four-point function across distinct neurons,
    /// scaled by `n`.
    pub fn empirical_v4_phi(&self, layer: usize) -> Result<PairEstimate> {
        self.require_heavy()?;
        self.check_checkpoint(layer)?;
        let n = self.cfg.width as f64;
        let idx = self.layout.pairs.clone();
        self.pair_estimate(move |v| {
            let g = v.g(layer).to_pair_vector(&idx);
            (v.gg(layer) - &g * g.transpose()) * n - v.c(layer)
        })
    }

    /// `S̄^(p,q)` at a checkpoint.
    pub fn mean_s_general(&self, layer: usize, p: usize, q: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if !self.layout.hierarchy {
            return Err(Error::Unavailable(
                "S^(p,q)",
                "run without hierarchy tracking".into(),
            ));
        }
        self.check_checkpoint(layer)?;
        if !self.layout.orders.contains(&(p, q)) {
            return Err(Error::UnsupportedOrder { p, q, max: MAX_DERIVATIVE });
        }
        let n = self.cfg.points();
        let est = self.estimate(|v| flatten(&v.s_general(layer, p, q).expect("tracked")))?;
        Ok((DMatrix::from_vec(n, n, est.value), DMatrix::from_vec(n, n, est.se)))
    }
}

/// Result of re-drawing one layer's randomness with the state frozen.
#[derive(Debug, Clone)]
pub struct DriftCheck {
    /// Mean of `(G^{ℓ+1} - α² G^ℓ) / ε²` over redraws.
    pub mean: KernelMatrix,
    pub se: KernelMatrix,
    /// `Q̂^ℓ` of the frozen state.
    pub q_hat: KernelMatrix,
}

/// Freeze member `member` at `layer` and re-draw that layer's randomness
/// `redraws` times from an independent seed.
pub fn conditional_drift(
    cfg: &NetworkConfig,
    opts: &RunOptions,
    member: u64,
    layer: usize,
    redraws: u64,
) -> Result<DriftCheck> {
    if layer >= cfg.depth {
        return Err(Error::Config(format!("layer {layer} must be below depth {}", cfg.depth)));
    }
    let mut opts = opts.clone();
    opts.checkpoints = Checkpoints::new(vec![0])?;
    opts.heavy = false;
    opts.hierarchy = false;
    let sim = Simulator::new(cfg, &opts)?;
    let mut record = vec![0.0; sim.layout.width()];
    let mut state = Member::new(cfg, &sim.layout);
    state.init(&sim.factor, &mut sim.streams.open(member, 0, Role::Init));
    for l in 0..layer {
        state.observe(l, &mut record);
        state.increments(opts.sampler, &sim.streams, member, l)?;
        state.step();
    }
    state.observe(layer, &mut record);
    let frozen = state.phi.clone();
    let nn = cfg.points();
    let g0 = MeanView::new(&sim.layout, &record).g(layer);
    let q_hat = KernelMatrix::new(DMatrix::from_row_slice(nn, nn, &state.q_hat))?;
    let redraw_streams = SeedPolicy::new(opts.seeds.master_seed ^ 0x5DEE_CE66_D1CE_5EED).streams();
    let a2 = cfg.alpha * cfg.alpha;
    let e2 = cfg.eps * cfg.eps;
    let pairs = PairIndex::new(nn);
    let mut sums = GroupedSums::new(pairs.len(), opts.groups);
    for r in 0..redraws {
        state.phi.copy_from_slice(&frozen);
        state.increments(opts.sampler, &redraw_streams, r, layer)?;
        state.step();
        let vals: Vec<f64> = pairs
            .iter()
            .map(|(_, (a, b))| (state.gram(&state.phi, a, b) - a2 * g0.get(a, b)) / e2)
            .collect();
        sums.add(r, &vals).map_err(|_| Error::NonFinite {
            member,
            layer,
            detail: "redraw overflowed".into(),
        })?;
    }
    let est = sums.jackknife()?.estimate(|m| m.to_vec());
    let to_kernel = |v: &[f64]| KernelMatrix::from_pair_vector(&pairs, &nalgebra::DVector::from_column_slice(v));
    Ok(DriftCheck {
        mean: to_kernel(&est.value),
        se: to_kernel(&est.se),
        q_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (NetworkConfig, RunOptions) {
        let mut cfg = NetworkConfig::baseline();
        cfg.width = 8;
        cfg.depth = 12;
        let opts = RunOptions::new(40, 3, Checkpoints::evenly_spaced(12, 3));
        (cfg, opts)
    }

    #[test]
    fn checkpoint_grid_has_successors() {
        let c = Checkpoints::evenly_spaced(200, 4);
        assert_eq!(c.layers(), &[0, 1, 50, 51, 100, 101, 150, 151, 200]);
    }

    #[test]
    fn serial_and_parallel_agree() {
        let (cfg, opts) = small();
        let a = run_ensemble(&cfg, &opts).unwrap();
        let b = run_ensemble_serial(&cfg, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn samplers_share_the_update_identity() {
        let (cfg, mut opts) = small();
        for sampler in [Sampler::Increments, Sampler::Explicit] {
            opts.sampler = sampler;
            let (_, worst) = simulate_member(&cfg, &opts, 5).unwrap();
            assert!(worst <= 1e-12, "{sampler:?}: {worst:e}");
        }
    }

    #[test]
    fn psd_cholesky_handles_rank_deficiency() {
        let m = [1.0, 1.0, 1.0, 1.0];
        let mut l = [0.0; 4];
        assert!(psd_cholesky(&m, 2, &mut l));
        assert_eq!(l, [1.0, 0.0, 1.0, 0.0]);
        assert!(!psd_cholesky(&[1.0, 2.0, 2.0, 1.0], 2, &mut l));
    }

    #[test]
    fn eigen_factor_reproduces_a_rank_one_matrix() {
        let v = [1.0, 1e-7, -2.0];
        let m: Vec<f64> = (0..9).map(|k| v[k / 3] * v[k % 3]).collect();
        let mut f = [0.0; 9];
        assert!(psd_eigen_factor(&m, 3, &mut f));
        for i in 0..3 {
            for j in 0..3 {
                let prod: f64 = (0..3).map(|k| f[i * 3 + k] * f[j * 3 + k]).sum();
                assert!((prod - m[i * 3 + j]).abs() < 1e-12);
            }
        }
        assert!(!psd_eigen_factor(&[1.0, 2.0, 2.0, 1.0], 2, &mut f[..4]));
    }

    #[test]
    fn narrower_than_the_input_set_runs() {
        let (mut cfg, opts) = small();
        cfg.width = 2;
        run_ensemble(&cfg, &opts).unwrap();
    }

    #[test]
    fn checkpoint_beyond_depth_is_rejected() {
        let (cfg, mut opts) = small();
        opts.checkpoints = Checkpoints::new(vec![0, 13]).unwrap();
        assert!(matches!(run_ensemble(&cfg, &opts), Err(Error::Config(_))));
    }

    #[test]
    fn overflow_is_reported_with_member_and_layer() {
        let (mut cfg, opts) = small();
        cfg.act = Activation::Linear;
        cfg.cw = 1e150;
        cfg.eps = 1.0;
        let err = run_ensemble(&cfg, &opts).unwrap_err();
        assert!(matches!(err, Error::NonFinite { member: 0, .. }), "{err}");
    }
}
