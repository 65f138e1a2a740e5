//! Pass/fail evaluation of the validation criteria on diagnostic reports.
//!
//! Each evaluator takes already computed reports, so the same logic serves
//! the `diagnose` summary and the acceptance tests. Criteria that need runs
//! a single experiment does not have (a second width, a second ε, thread
//! counts) come back as [`Status::NotEvaluated`] from [`evaluate`].

use std::fmt;

use serde::Serialize;

use crate::config::{Check, ExperimentConfig};
use crate::diagnostics::{k0_validity, Component, Deviation, ResidualReport, Theory, THEORY_REL_TOL};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};

/// Checkpoint times of the Σ comparison table.
pub const TABLE2_TIMES: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];
/// Relative tolerance on `Σ_mic / Σ(K0) - 1`.
pub const SIGMA_REL_TOL: f64 = 0.015;
/// `Σ(K0⁰)_{00,00}` for the baseline initialization and its tolerance.
pub const SIGMA_T0_REFERENCE: f64 = 8.322;
pub const SIGMA_T0_TOL: f64 = 0.002;
/// Window for `(V4_theory - V4_emp)/V4_emp` at `t = 2`.
pub const V4_WINDOW: (f64, f64) = (0.06, 0.16);
/// Largest gap between the `t = 2` V4 relative errors at two step sizes.
pub const V4_EPS_GAP: f64 = 0.04;
/// Window for the width ratio of the `Ḡ - K0` deviation (n = 32 over n = 64).
pub const WIDTH_RATIO_WINDOW: (f64, f64) = (1.6, 2.6);
/// Window for `K1_EFT / K1_mic` at `t = 2`, component `01`.
pub const K1_RATIO_WINDOW: (f64, f64) = (1.5, 4.0);
/// Number of standard errors for statistical agreement.
pub const Z_TOL: f64 = 4.0;
pub const FINAL_TIME: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    NotEvaluated,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::NotEvaluated => "NOT EVALUATED",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl Outcome {
    pub fn new(id: u8, status: Status, detail: impl Into<String>) -> Self {
        Self {
            id,
            name: name(id),
            status,
            detail: detail.into(),
        }
    }

    fn check(id: u8, ok: bool, detail: impl Into<String>) -> Self {
        Self::new(id, if ok { Status::Pass } else { Status::Fail }, detail)
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "criterion {} ({}): {} | {}", self.id, self.name, self.status, self.detail)
    }
}

pub fn name(id: u8) -> &'static str {
    match id {
        1 => "operator oracles",
        2 => "K0 validity",
        3 => "sigma source accuracy",
        4 => "V4 overestimation window",
        5 => "exact identities",
        6 => "K1 localization",
        7 => "internal consistency",
        8 => "determinism",
        _ => "unknown",
    }
}

/// Combine several partial outcomes of one criterion: any failure fails it,
/// otherwise it passes only if some part was evaluated and none was skipped.
pub fn combine(id: u8, parts: &[Outcome]) -> Outcome {
    let status = if parts.iter().any(|p| p.status == Status::Fail) {
        Status::Fail
    } else if !parts.is_empty() && parts.iter().all(|p| p.status == Status::Pass) {
        Status::Pass
    } else {
        Status::NotEvaluated
    };
    let detail = parts.iter().map(|p| p.detail.as_str()).collect::<Vec<_>>().join("; ");
    Outcome::new(id, status, detail)
}

/// Row of `estimator` at the checkpoint nearest `t` (within half a layer).
pub fn row_at<'a>(
    report: &'a ResidualReport,
    estimator: &str,
    t: f64,
    component: Component,
    eps: f64,
) -> Option<&'a crate::diagnostics::ReportRow> {
    report
        .rows
        .iter()
        .find(|r| r.estimator == estimator && r.component == component && (r.t - t).abs() <= 0.5 * eps * eps)
}

fn missing(what: &str, t: f64) -> Error {
    Error::Data(format!("no {what} row at t = {t}"))
}

/// Whether `(kappa, rho, tanh, C_W = 2, C_b = 0)` baseline initialization
/// applies, so the quoted `Σ(K0⁰)` value can be checked.
pub fn is_reference_initialization(cfg: &ExperimentConfig) -> bool {
    let n = &cfg.network;
    let Ok(net) = cfg.network() else { return false };
    n.activation == crate::Activation::Tanh
        && n.cw == 2.0
        && n.cb == 0.0
        && net.points() >= 2
        && (net.k0_init.get(0, 0) - 2.0).abs() < 1e-12
        && (net.k0_init.get(0, 1) - 0.6).abs() < 1e-12
}

/// `|Σ_mic / Σ(K0) - 1|` at the table times for component `00,00`, and
/// the quoted `t = 0` theory value when the initialization matches it.
pub fn sigma_accuracy(report: &ResidualReport, cfg: &ExperimentConfig) -> Result<Outcome> {
    let comp = Component::Pair(0, 0, 0, 0);
    let eps = cfg.network.eps;
    let t_max = eps * eps * cfg.network.depth as f64;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for &t in TABLE2_TIMES.iter().filter(|&&t| t <= t_max + 1e-12) {
        let mic = row_at(report, "sigma_mic", t, comp, eps).ok_or_else(|| missing("sigma_mic", t))?;
        let th = row_at(report, "sigma_k0", t, comp, eps).ok_or_else(|| missing("sigma_k0", t))?;
        let dev = (mic.estimate / th.estimate - 1.0).abs();
        worst = worst.max(dev);
        parts.push(format!("t={t}: {:.4}/{:.4}", mic.estimate, th.estimate));
    }
    let mut ok = worst <= SIGMA_REL_TOL;
    let mut detail = format!(
        "max |sigma_mic/sigma_k0 - 1| = {:.3}% (tol {}%) [{}]",
        100.0 * worst,
        100.0 * SIGMA_REL_TOL,
        parts.join(", ")
    );
    if is_reference_initialization(cfg) {
        let th0 = row_at(report, "sigma_k0", 0.0, comp, eps).ok_or_else(|| missing("sigma_k0", 0.0))?;
        let gap = (th0.estimate - SIGMA_T0_REFERENCE).abs();
        ok &= gap <= SIGMA_T0_TOL;
        detail.push_str(&format!(
            "; sigma_k0(t=0) = {:.4} vs {SIGMA_T0_REFERENCE} +- {SIGMA_T0_TOL}",
            th0.estimate
        ));
    }
    Ok(Outcome::check(3, ok, detail))
}

/// `max ‖Ḡ - K0‖∞ <= ‖K1_mic‖∞ / n + 4 SE`.
pub fn k0_bound(dev: &Deviation) -> Outcome {
    let bound = dev.k1_over_n + Z_TOL * dev.se;
    Outcome::check(
        2,
        dev.max_deviation <= bound,
        format!(
            "max |G - K0| = {:.3e} at layer {} vs |K1_mic|/n + 4SE = {:.3e}",
            dev.max_deviation, dev.layer, bound
        ),
    )
}

/// Ratio of the deviations at widths 32 and 64.
pub fn k0_width_scaling(dev_32: &Deviation, dev_64: &Deviation) -> Outcome {
    let ratio = dev_32.max_deviation / dev_64.max_deviation;
    let (lo, hi) = WIDTH_RATIO_WINDOW;
    Outcome::check(
        2,
        (lo..=hi).contains(&ratio),
        format!("deviation ratio n=32/n=64 = {ratio:.3} (window [{lo}, {hi}])"),
    )
}

/// `(V4_theory - V4_emp)/V4_emp` at `t = 2`, component `00,00`.
pub fn v4_final_rel_err(report: &ResidualReport, eps: f64) -> Result<(f64, f64)> {
    let r = row_at(report, "v4_rel_err", FINAL_TIME, Component::Pair(0, 0, 0, 0), eps)
        .ok_or_else(|| missing("v4_rel_err", FINAL_TIME))?;
    Ok((r.estimate, r.std_error().unwrap_or(0.0)))
}

pub fn v4_window(report: &ResidualReport, eps: f64) -> Result<Outcome> {
    let (v, se) = v4_final_rel_err(report, eps)?;
    let (lo, hi) = V4_WINDOW;
    Ok(Outcome::check(
        4,
        (lo..=hi).contains(&v),
        format!("V4 rel. err. at t=2 = {v:.4} +- {se:.4} (window [{lo}, {hi}])"),
    ))
}

pub fn v4_eps_stability(coarse: (f64, f64), fine: (f64, f64)) -> Outcome {
    let gap = (coarse.0 - fine.0).abs();
    Outcome::check(
        4,
        gap <= V4_EPS_GAP,
        format!(
            "t=2 rel. err. eps=0.10: {:.4}, eps=0.05: {:.4}, gap {gap:.4} (tol {V4_EPS_GAP})",
            coarse.0, fine.0
        ),
    )
}

/// `U1_exact⁰` within 4 SE of zero for every component.
pub fn u1_exact_vanishes(u1: &ResidualReport) -> Result<Outcome> {
    let rows: Vec<_> = u1.rows_for("u1_exact").filter(|r| r.layer == 0).collect();
    if rows.is_empty() {
        return Err(Error::Data("no layer-0 u1_exact rows".into()));
    }
    let ok = rows.iter().all(|r| r.estimate.abs() <= Z_TOL * r.std_error().unwrap_or(0.0));
    let worst = rows.iter().filter_map(|r| r.z()).map(f64::abs).fold(0.0, f64::max);
    let largest = rows.iter().map(|r| r.estimate.abs()).fold(0.0, f64::max);
    Ok(Outcome::check(5, ok, format!("U1_exact at layer 0: max |z| = {worst:.2}, max |value| = {largest:.3e}")))
}

/// Bridge identity residual within 4 SE at every adjacent checkpoint pair.
pub fn bridge_vanishes(bridge: &ResidualReport) -> Outcome {
    let n = bridge.rows_for("bridge_exact").count();
    let z = bridge.max_abs_z("bridge_exact").unwrap_or(0.0);
    Outcome::check(
        5,
        n > 0 && bridge.within("bridge_exact", Z_TOL),
        format!("bridge residual over {n} rows: max |z| = {z:.2}"),
    )
}

/// Largest relative violation of the one-step kernel identity.
pub fn debug_identity(worst: f64, members: usize) -> Outcome {
    Outcome::check(
        5,
        worst <= 1e-12,
        format!("one-step kernel identity on {members} members: max rel. violation {worst:.2e}"),
    )
}

/// K1 localization: the exact-source reference tracks `K1_mic`, `K1_EFT`
/// overshoots it at `t = 2`, and the layer-0 sources differ.
pub fn k1_localization(k1: &ResidualReport, u1: &ResidualReport, eps: f64) -> Result<Outcome> {
    let diff_ok = k1.within("u1ex_minus_mic", Z_TOL);
    let diff_z = k1.max_abs_z("u1ex_minus_mic").unwrap_or(0.0);
    let comp = Component::Kernel(0, 1);
    let mic = row_at(k1, "k1_mic", FINAL_TIME, comp, eps).ok_or_else(|| missing("k1_mic", FINAL_TIME))?;
    let eft = row_at(k1, "k1_eft", FINAL_TIME, comp, eps).ok_or_else(|| missing("k1_eft", FINAL_TIME))?;
    let ratio = eft.estimate / mic.estimate;
    let (lo, hi) = K1_RATIO_WINDOW;
    let ratio_ok = (lo..=hi).contains(&ratio);
    let model0: Vec<_> = u1.rows_for("u1_model").filter(|r| r.layer == 0).collect();
    let model_ok = model0
        .iter()
        .any(|r| r.estimate.abs() > (THEORY_REL_TOL * r.estimate.abs()).max(1e-12));
    let exact0 = u1_exact_vanishes(u1)?;
    Ok(Outcome::check(
        6,
        diff_ok && ratio_ok && model_ok && exact0.passed(),
        format!(
            "K1_u1ex - K1_mic max |z| = {diff_z:.2}; K1_EFT/K1_mic at t=2 (01) = {ratio:.3} (window [{lo}, {hi}]); \
             U1_model at layer 0 max |.| = {:.3e}; {}",
            model0.iter().map(|r| r.estimate.abs()).fold(0.0, f64::max),
            exact0.detail
        ),
    ))
}

fn not_evaluated(id: u8, why: &str) -> Outcome {
    Outcome::new(id, Status::NotEvaluated, why)
}

fn report_for<'a>(diag: &'a [(Check, Result<ResidualReport>)], check: Check) -> Option<&'a ResidualReport> {
    diag.iter().find(|(c, _)| *c == check).and_then(|(_, r)| r.as_ref().ok())
}

/// Criteria a single diagnosed run can settle; the rest are reported as not
/// evaluated with the reason.
pub fn evaluate(
    cfg: &ExperimentConfig,
    ens: &Ensemble,
    th: &Theory,
    diag: &[(Check, Result<ResidualReport>)],
) -> Vec<Outcome> {
    let eps = cfg.network.eps;
    let reaches_final = eps * eps * cfg.network.depth as f64 >= FINAL_TIME - 0.5 * eps * eps;
    let or_fail = |id: u8, r: Result<Outcome>| r.unwrap_or_else(|e| Outcome::new(id, Status::Fail, e.to_string()));
    let mut out = vec![not_evaluated(1, "covered by the operator test suite")];

    let c2 = match k0_validity(ens, &th.solution.k0, &[]) {
        Ok((_, dev)) => {
            let bound = k0_bound(&dev);
            let scaling = not_evaluated(2, "width scaling needs runs at n = 32 and n = 64");
            combine(2, &[bound, scaling])
        }
        Err(e) => Outcome::new(2, Status::Fail, e.to_string()),
    };
    out.push(c2);

    out.push(match report_for(diag, Check::SigmaSources) {
        Some(r) => or_fail(3, sigma_accuracy(r, cfg)),
        None => not_evaluated(3, "sigma_sources check not run"),
    });

    out.push(match report_for(diag, Check::V4Relative) {
        _ if !reaches_final => not_evaluated(4, "run ends before t = 2"),
        Some(r) => combine(
            4,
            &[
                or_fail(4, v4_window(r, eps)),
                not_evaluated(4, "step-size stability needs runs at eps = 0.10 and 0.05"),
            ],
        ),
        None => not_evaluated(4, "v4_relative check not run"),
    });

    let mut c5 = Vec::new();
    match report_for(diag, Check::U1Sources) {
        Some(r) => c5.push(or_fail(5, u1_exact_vanishes(r))),
        None => c5.push(not_evaluated(5, "u1_sources check not run")),
    }
    match report_for(diag, Check::Bridge) {
        Some(r) => c5.push(bridge_vanishes(r)),
        None => c5.push(not_evaluated(5, "bridge needs a heavy-mode run")),
    }
    c5.push(not_evaluated(5, "one-step identity is checked on re-simulated members"));
    out.push(combine(5, &c5));

    out.push(match (report_for(diag, Check::K1Localization), report_for(diag, Check::U1Sources)) {
        _ if !reaches_final => not_evaluated(6, "run ends before t = 2"),
        (Some(k1), Some(u1)) => or_fail(6, k1_localization(k1, u1, eps)),
        _ => not_evaluated(6, "needs the k1_localization and u1_sources checks"),
    });
    out.push(not_evaluated(7, "covered by the flow test suite"));
    out.push(not_evaluated(8, "needs repeated runs at several thread counts"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_outcomes_fail_on_any_failure() {
        let pass = Outcome::check(2, true, "a");
        let fail = Outcome::check(2, false, "b");
        let skip = not_evaluated(2, "c");
        assert_eq!(combine(2, &[pass.clone(), fail]).status, Status::Fail);
        assert_eq!(combine(2, &[pass.clone(), skip]).status, Status::NotEvaluated);
        assert_eq!(combine(2, &[pass]).status, Status::Pass);
    }

    #[test]
    fn width_scaling_window() {
        let dev = |d| Deviation {
            max_deviation: d,
            layer: 0,
            component: [0, 0],
            se: 0.0,
            k1_over_n: d,
        };
        assert!(k0_width_scaling(&dev(0.02), &dev(0.01)).passed());
        assert!(!k0_width_scaling(&dev(0.03), &dev(0.01)).passed());
    }
}
