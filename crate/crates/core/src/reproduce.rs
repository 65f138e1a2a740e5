//! Plot-ready data for the standard figures and the Σ comparison table.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::config::{CheckpointSpec, ExperimentConfig};
use crate::criteria::TABLE2_TIMES;
use crate::diagnostics::{
    compare_sigma_sources, ensemble_summary, k1_localization, theory, theory_series, u1_sources, v4_relative,
    Component, ResidualReport, Theory,
};
use crate::ensemble::{run_ensemble, Ensemble};
use crate::error::{Error, Result};
use crate::io::{series_records, SeriesRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Figure {
    /// K0 and V4 trajectories against the ensemble.
    Fig1,
    /// V4 relative error at three step sizes, n = 256.
    Fig2,
    /// K1 from the ensemble, the exact-source reference and the EFT flow.
    Fig3,
    /// Exact versus model U1 source.
    Fig4,
    /// Σ_mic against Σ(K0) at five times.
    Table2,
}

impl Figure {
    pub const ALL: [Figure; 5] = [Figure::Fig1, Figure::Fig2, Figure::Fig3, Figure::Fig4, Figure::Table2];

    pub fn id(self) -> &'static str {
        match self {
            Figure::Fig1 => "fig1",
            Figure::Fig2 => "fig2",
            Figure::Fig3 => "fig3",
            Figure::Fig4 => "fig4",
            Figure::Table2 => "table2",
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL
            .into_iter()
            .find(|f| f.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown figure {s:?}; expected one of fig1, fig2, fig3, fig4, table2")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Reduced ensemble and depth; minutes on a desktop.
    Desk,
    /// Full-size runs; configs are emitted rather than executed.
    Paper,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            _ => Err(Error::Config(format!("unknown scale {s:?}; expected desk or paper"))),
        }
    }
}

/// Step sizes of the step-size comparison.
pub const FIG2_EPS: [f64; 3] = [0.10, 0.07, 0.05];
pub const FIG2_WIDTH: usize = 256;
pub const FIG2_DESK_MEMBERS: u64 = 50_000;
pub const FULL_MEMBERS: u64 = 5_000_000;

pub const PAPER_SCALE_WARNING: &str = "full-size configs use M = 5e6 members and L = 800 layers; \
a baseline run takes about ten CPU-hours and an n = 256 step-size run several CPU-days. \
Configs were written but not run; \
start them with `resnet-eft simulate --config <file>`.";

/// Baseline experiment: tanh, C_W = 2, C_b = 0, four inputs with
/// `K_aa = 2`, `K_ab = 0.6`, n = 64, T = 2.
pub fn baseline(scale: Scale) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_baseline();
    if scale == Scale::Paper {
        cfg.network.eps = 0.05;
        cfg.network.depth = 800;
        cfg.ensemble.members = FULL_MEMBERS;
    }
    cfg.ensemble.checkpoints = CheckpointSpec::Count(40);
    cfg
}

/// Labelled configs a figure is computed from.
pub fn configs(fig: Figure, scale: Scale) -> Result<Vec<(String, ExperimentConfig)>> {
    if fig != Figure::Fig2 {
        return Ok(vec![("baseline".into(), baseline(scale))]);
    }
    // the step-size points share the desk grid of checkpoint times
    let mut wide = baseline(Scale::Desk);
    wide.network.width = FIG2_WIDTH;
    wide.ensemble.members = match scale {
        Scale::Desk => FIG2_DESK_MEMBERS,
        Scale::Paper => FULL_MEMBERS,
    };
    configs_from(fig, &wide)
}

/// Labelled configs of a figure built around a user-supplied experiment;
/// the step-size comparison varies `eps` at fixed checkpoint times.
pub fn configs_from(fig: Figure, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    if fig != Figure::Fig2 {
        return Ok(vec![("baseline".into(), base.clone())]);
    }
    FIG2_EPS
        .iter()
        .map(|&eps| Ok((format!("eps{eps:.2}"), base.with_eps(eps)?)))
        .collect()
}

/// One row of the Σ comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table2Row {
    pub t: f64,
    pub sigma_mic: f64,
    pub sigma_mic_se: f64,
    pub sigma_k0: f64,
    /// `(Σ(K0) - Σ_mic) / Σ_mic`.
    pub rel_err: f64,
    pub rel_err_se: f64,
}

/// Table rows at the standard times, component `00,00`.
pub fn table2_rows(report: &ResidualReport, eps: f64) -> Vec<Table2Row> {
    let comp = Component::Pair(0, 0, 0, 0);
    TABLE2_TIMES
        .iter()
        .filter_map(|&t| {
            let at = |e: &str| crate::criteria::row_at(report, e, t, comp, eps);
            let (mic, th, rel) = (at("sigma_mic")?, at("sigma_k0")?, at("sigma_rel_err")?);
            Some(Table2Row {
                t,
                sigma_mic: mic.estimate,
                sigma_mic_se: mic.std_error().unwrap_or(0.0),
                sigma_k0: th.estimate,
                rel_err: rel.estimate,
                rel_err_se: rel.std_error().unwrap_or(0.0),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum FigureData {
    Series(Vec<SeriesRecord>),
    Table(Vec<Table2Row>),
}

impl FigureData {
    pub fn len(&self) -> usize {
        match self {
            FigureData::Series(s) => s.len(),
            FigureData::Table(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Data of a single-run figure from a simulated ensemble and its flows.
pub fn single_run_figure(fig: Figure, cfg: &ExperimentConfig, ens: &Ensemble, th: &Theory) -> Result<FigureData> {
    let kc = &cfg.diagnostics.kernel_components;
    let pc = &cfg.diagnostics.pair_components;
    let sol = &th.solution;
    Ok(match fig {
        Figure::Fig1 => {
            let reports = [ensemble_summary(ens, kc, pc)?, theory_series(cfg, th)?];
            FigureData::Series(series_records(&reports, |e| match e {
                "k0_theory" => Some("K0_theory"),
                "g_emp" => Some("G_emp"),
                "v4_theory" => Some("V4_theory"),
                "v4_source_only" => Some("V4_source_only"),
                "v4_emp" => Some("V4_emp"),
                _ => None,
            }))
        }
        Figure::Fig3 => {
            let r = k1_localization(ens, &sol.k0, &sol.k1, &th.model, kc)?;
            FigureData::Series(series_records([&r], |e| match e {
                "k1_mic" => Some("K1_mic"),
                "k1_u1ex" => Some("K1_u1ex"),
                "k1_eft" => Some("K1_EFT"),
                _ => None,
            }))
        }
        Figure::Fig4 => {
            let r = u1_sources(ens, &sol.k0, &sol.v4, &sol.k1, &th.model, kc)?;
            FigureData::Series(series_records([&r], |e| match e {
                "u1_exact" => Some("U1_exact"),
                "u1_model" => Some("U1_model"),
                _ => None,
            }))
        }
        Figure::Table2 => {
            let r = compare_sigma_sources(ens, &sol.k0, &th.model, &[[0, 0, 0, 0]])?;
            FigureData::Table(table2_rows(&r, cfg.network.eps))
        }
        Figure::Fig2 => {
            return Err(Error::Config("fig2 combines several runs; use `reproduce`".into()));
        }
    })
}

/// `V4` relative-error series of one step-size point, labelled by `eps`.
pub fn fig2_series(label: &str, report: &ResidualReport) -> Vec<SeriesRecord> {
    let mut rows = series_records([report], |e| (e == "v4_rel_err").then_some("V4_rel_err"));
    for r in &mut rows {
        r.series = format!("V4_rel_err_{label}");
    }
    rows
}

/// Simulate, integrate and assemble a figure from its configs.
pub fn reproduce(fig: Figure, configs: &[(String, ExperimentConfig)]) -> Result<FigureData> {
    if fig == Figure::Fig2 {
        let mut rows = Vec::new();
        for (label, cfg) in configs {
            let ens = run_ensemble(&cfg.network()?, &cfg.run_options()?)?;
            let th = theory(cfg)?;
            let r = v4_relative(&ens, &th.solution.v4, &cfg.diagnostics.pair_components)?;
            rows.extend(fig2_series(label, &r));
        }
        return Ok(FigureData::Series(rows));
    }
    let (_, cfg) = configs
        .first()
        .ok_or_else(|| Error::Config(format!("{fig} needs one config")))?;
    let ens = run_ensemble(&cfg.network()?, &cfg.run_options()?)?;
    single_run_figure(fig, cfg, &ens, &theory(cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figure_ids_parse() {
        for f in Figure::ALL {
            assert_eq!(f.id().parse::<Figure>().unwrap(), f);
        }
        assert!(matches!("fig9".parse::<Figure>(), Err(Error::Config(_))));
    }

    #[test]
    fn step_size_points_keep_the_checkpoint_times() {
        let cfgs = configs(Figure::Fig2, Scale::Desk).unwrap();
        assert_eq!(cfgs.len(), 3);
        for (_, cfg) in &cfgs {
            let times = cfg.checkpoint_times().unwrap();
            let eps = cfg.network.eps;
            for t in TABLE2_TIMES {
                assert!(times.iter().any(|&s| (s - t).abs() <= 0.5 * eps * eps), "{t} at eps {eps}");
            }
            assert_eq!(cfg.network.width, FIG2_WIDTH);
        }
    }

    #[test]
    fn baseline_checkpoints_cover_the_table_times() {
        for scale in [Scale::Desk, Scale::Paper] {
            let cfg = baseline(scale);
            let times = cfg.checkpoint_times().unwrap();
            for t in TABLE2_TIMES {
                assert!(times.iter().any(|&s| (s - t).abs() < 1e-9), "{t}");
            }
        }
    }
}
