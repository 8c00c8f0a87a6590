//! Experiment configuration: JSON parsing, unit conversion, sweep axes.
//!
//! Scenario files carry physical units (dBm, km); everything handed to the
//! model layer is linear and noise-normalized. Defaults follow the reference
//! parameter set: 1 km disc, (10 m, 50 m) slope references, 8 dB shadowing,
//! -104 dBm noise, 23 dBm uplink power, 40 dBm total downlink budget,
//! SIC coefficient 0.05.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::clustering::Algorithm;
use crate::error::{Error, Result};
use crate::model::SystemConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaMode {
    Fixed,
    Optimized,
}

impl PaMode {
    pub fn name(&self) -> &'static str {
        match self {
            PaMode::Fixed => "fixed",
            PaMode::Optimized => "optimized",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Cf,
    Co,
}

impl SystemKind {
    pub fn name(&self) -> &'static str {
        match self {
            SystemKind::Cf => "cf",
            SystemKind::Co => "co",
        }
    }
}

/// Monte Carlo verification knobs for `cfnoma verify`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    #[serde(default = "default_mc_realizations")]
    pub num_realizations: usize,
    #[serde(default = "default_mc_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_mc_instances")]
    pub instances: usize,
}

fn default_mc_realizations() -> usize {
    10_000
}
fn default_mc_tolerance() -> f64 {
    0.03
}
fn default_mc_instances() -> usize {
    3
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            num_realizations: default_mc_realizations(),
            tolerance: default_mc_tolerance(),
            instances: default_mc_instances(),
        }
    }
}

/// Fully resolved experiment description; every optional input filled.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub num_aps: usize,
    pub num_ues: usize,
    pub num_antennas: usize,
    pub num_clusters: usize,
    pub pilot_len: usize,
    pub coherence_len: usize,
    pub radius_km: f64,
    pub shadow_std_db: f64,
    pub d0_km: f64,
    pub d1_km: f64,
    pub min_dist_km: f64,
    pub noise_dbm: f64,
    pub ue_power_dbm: f64,
    /// Sweep axis: total downlink budget across all APs, dBm.
    pub p_total_dbm: Vec<f64>,
    /// Sweep axis: SIC performance coefficient (applied to every UE).
    pub zeta: Vec<f64>,
    /// Sweep axis: joint (M, K) settings; empty means the scalar M/K above.
    pub mk_pairs: Vec<(usize, usize)>,
    /// Sweep axis: cluster counts; empty means the scalar L above.
    pub l_list: Vec<usize>,
    pub algorithms: Vec<Algorithm>,
    pub pa_mode: PaMode,
    pub systems: Vec<SystemKind>,
    pub num_topologies: usize,
    pub master_seed: u64,
    pub fractional_alpha: f64,
    pub ia_epsilon: f64,
    pub ia_max_outer: usize,
    pub mc: McSection,
}

/// Raw file form: scalar requirements plus optional overrides.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: Option<String>,
    num_aps: usize,
    num_ues: usize,
    num_antennas: usize,
    num_clusters: usize,
    pilot_len: Option<usize>,
    coherence_len: Option<usize>,
    radius_km: Option<f64>,
    shadow_std_db: Option<f64>,
    d0_km: Option<f64>,
    d1_km: Option<f64>,
    min_dist_km: Option<f64>,
    noise_dbm: Option<f64>,
    ue_power_dbm: Option<f64>,
    p_total_dbm: Option<Vec<f64>>,
    zeta: Option<Vec<f64>>,
    mk_pairs: Option<Vec<(usize, usize)>>,
    l_list: Option<Vec<usize>>,
    algorithms: Option<Vec<Algorithm>>,
    pa_mode: Option<PaMode>,
    systems: Option<Vec<SystemKind>>,
    num_topologies: Option<usize>,
    master_seed: Option<u64>,
    fractional_alpha: Option<f64>,
    ia_epsilon: Option<f64>,
    ia_max_outer: Option<usize>,
    mc: Option<McSection>,
}

/// Manifest written next to the results; enough to reproduce every row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub resolved_config: ScenarioConfig,
    pub code_version: String,
    /// Derived seed per (sweep point, topology) cell, row-major by sweep.
    pub seeds: Vec<Vec<u64>>,
    /// Wall-clock per sweep point, seconds. Informational only.
    pub timings_s: Vec<f64>,
}

/// Parse a scenario file (or a previously written manifest) and fill
/// defaults. Unknown keys and missing required keys are reported with the
/// offending name.
pub fn parse_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)?;
    let perr = |message: String| Error::Parse {
        path: path.display().to_string(),
        message,
    };
    // A manifest reruns its resolved configuration byte-for-byte.
    if let Ok(manifest) = serde_json::from_str::<RunManifest>(&text) {
        return validate(manifest.resolved_config).map_err(|e| perr(e.to_string()));
    }
    let raw: ScenarioFile = serde_json::from_str(&text).map_err(|e| perr(e.to_string()))?;
    let cfg = ScenarioConfig {
        name: raw.name.unwrap_or_else(|| "scenario".into()),
        num_aps: raw.num_aps,
        num_ues: raw.num_ues,
        num_antennas: raw.num_antennas,
        num_clusters: raw.num_clusters,
        pilot_len: raw.pilot_len.unwrap_or(raw.num_clusters),
        coherence_len: raw.coherence_len.unwrap_or(200),
        radius_km: raw.radius_km.unwrap_or(1.0),
        shadow_std_db: raw.shadow_std_db.unwrap_or(8.0),
        d0_km: raw.d0_km.unwrap_or(0.010),
        d1_km: raw.d1_km.unwrap_or(0.050),
        min_dist_km: raw.min_dist_km.unwrap_or(0.001),
        noise_dbm: raw.noise_dbm.unwrap_or(-104.0),
        ue_power_dbm: raw.ue_power_dbm.unwrap_or(23.0),
        p_total_dbm: raw.p_total_dbm.unwrap_or_else(|| vec![40.0]),
        zeta: raw.zeta.unwrap_or_else(|| vec![0.05]),
        mk_pairs: raw.mk_pairs.unwrap_or_default(),
        l_list: raw.l_list.unwrap_or_default(),
        algorithms: raw
            .algorithms
            .unwrap_or_else(|| vec![Algorithm::Improved]),
        pa_mode: raw.pa_mode.unwrap_or(PaMode::Fixed),
        systems: raw.systems.unwrap_or_else(|| vec![SystemKind::Cf]),
        num_topologies: raw.num_topologies.unwrap_or(50),
        master_seed: raw.master_seed.unwrap_or(0),
        fractional_alpha: raw.fractional_alpha.unwrap_or(1.0),
        ia_epsilon: raw.ia_epsilon.unwrap_or(1e-3),
        ia_max_outer: raw.ia_max_outer.unwrap_or(30),
        mc: raw.mc.unwrap_or_default(),
    };
    validate(cfg).map_err(|e| perr(e.to_string()))
}

fn validate(cfg: ScenarioConfig) -> Result<ScenarioConfig> {
    if cfg.p_total_dbm.is_empty() || cfg.zeta.is_empty() {
        return Err(Error::InvalidConfig("sweep lists must be non-empty".into()));
    }
    if cfg.zeta.iter().any(|z| !(0.0..=1.0).contains(z)) {
        return Err(Error::InvalidConfig("zeta values must lie in [0,1]".into()));
    }
    if !cfg.mk_pairs.is_empty() {
        let prod = cfg.mk_pairs[0].0 * cfg.mk_pairs[0].1;
        if cfg.mk_pairs.iter().any(|(m, k)| m * k != prod) {
            return Err(Error::InvalidConfig(
                "mk_pairs must share one M*K product".into(),
            ));
        }
        if cfg.mk_pairs.iter().any(|(m, k)| *m == 0 || *k == 0) {
            return Err(Error::InvalidConfig("mk_pairs entries must be positive".into()));
        }
    }
    if cfg.num_topologies == 0 {
        return Err(Error::InvalidConfig("need at least one topology".into()));
    }
    if cfg.ia_epsilon <= 0.0 {
        return Err(Error::InvalidConfig("ia_epsilon must be positive".into()));
    }
    Ok(cfg)
}

/// dBm power to linear, normalized by the configured noise floor.
pub fn dbm_to_linear_normalized(p_dbm: f64, noise_dbm: f64) -> f64 {
    10f64.powf((p_dbm - noise_dbm) / 10.0)
}

/// One resolved sweep point.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub index: usize,
    pub algorithm: Algorithm,
    pub system: SystemKind,
    pub num_aps: usize,
    pub num_antennas: usize,
    pub num_clusters: usize,
    pub zeta: f64,
    pub p_total_dbm: f64,
}

impl ScenarioConfig {
    /// Enumerate sweep points in a fixed order: algorithm, system, (M,K),
    /// L, zeta, power. The order defines the per-point indices used for
    /// seed derivation, so appending axis values never reshuffles seeds of
    /// existing points... as long as new values are appended last.
    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        let mks: Vec<(usize, usize)> = if self.mk_pairs.is_empty() {
            vec![(self.num_aps, self.num_antennas)]
        } else {
            self.mk_pairs.clone()
        };
        let ls: Vec<usize> = if self.l_list.is_empty() {
            vec![self.num_clusters]
        } else {
            self.l_list.clone()
        };
        let mut out = Vec::new();
        let mut index = 0;
        for &algorithm in &self.algorithms {
            for &system in &self.systems {
                for &(m, k) in &mks {
                    for &l in &ls {
                        for &zeta in &self.zeta {
                            for &p in &self.p_total_dbm {
                                out.push(SweepPoint {
                                    index,
                                    algorithm,
                                    system,
                                    num_aps: m,
                                    num_antennas: k,
                                    num_clusters: l,
                                    zeta,
                                    p_total_dbm: p,
                                });
                                index += 1;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Instantiate the model parameters for one sweep point.
    pub fn system_config(&self, point: &SweepPoint) -> Result<SystemConfig> {
        let n = self.num_ues;
        let p_total = dbm_to_linear_normalized(point.p_total_dbm, self.noise_dbm);
        let ue_power = dbm_to_linear_normalized(self.ue_power_dbm, self.noise_dbm);
        SystemConfig {
            num_aps: point.num_aps,
            num_ues: n,
            num_antennas: point.num_antennas,
            num_clusters: point.num_clusters,
            pilot_len: self.pilot_len.max(point.num_clusters),
            coherence_len: self.coherence_len,
            sic_coeff: vec![point.zeta; n],
            ul_pilot_power: vec![ue_power; n],
            dl_power_budget: vec![p_total / point.num_aps as f64; point.num_aps],
            radius_km: self.radius_km,
            shadow_std_db: self.shadow_std_db,
            ref_dist_km: (self.d0_km, self.d1_km),
            min_dist_km: self.min_dist_km,
        }
        .validated()
    }

    /// Collocated benchmark parameters: all antennas at a single site with
    /// the total budget.
    pub fn collocated_config(&self, point: &SweepPoint) -> Result<SystemConfig> {
        let base = self.system_config(point)?;
        let p_total: f64 = base.dl_power_budget.iter().sum();
        SystemConfig {
            num_aps: 1,
            num_antennas: point.num_aps * point.num_antennas,
            dl_power_budget: vec![p_total],
            ..base
        }
        .validated()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let f = write_tmp(
            r#"{"num_aps":32,"num_ues":10,"num_antennas":8,"num_clusters":5,"p_total_dbm":[40]}"#,
        );
        let cfg = parse_config(f.path()).unwrap();
        assert_eq!(cfg.pilot_len, 5);
        assert_eq!(cfg.coherence_len, 200);
        assert_eq!(cfg.noise_dbm, -104.0);
        assert_eq!(cfg.zeta, vec![0.05]);
        assert_eq!(cfg.d0_km, 0.010);
        assert_eq!(cfg.d1_km, 0.050);
        // 40 dBm at -104 dBm noise: 10^14.4 total, split over 32 APs.
        let point = &cfg.sweep_points()[0];
        let sys = cfg.system_config(point).unwrap();
        let expect = 10f64.powf(14.4) / 32.0;
        approx::assert_relative_eq!(sys.dl_power_budget[0], expect, max_relative = 1e-12);
        approx::assert_relative_eq!(
            sys.ul_pilot_power[0],
            10f64.powf(12.7),
            max_relative = 1e-12
        );
    }

    #[test]
    fn missing_required_key_is_named() {
        let f = write_tmp(r#"{"num_aps":32,"num_antennas":8,"num_clusters":5}"#);
        let err = parse_config(f.path()).unwrap_err().to_string();
        assert!(err.contains("num_ues"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let f = write_tmp(
            r#"{"num_aps":1,"num_ues":2,"num_antennas":8,"num_clusters":1,"num_apz":3}"#,
        );
        let err = parse_config(f.path()).unwrap_err().to_string();
        assert!(err.contains("num_apz"), "{err}");
    }

    #[test]
    fn inconsistent_mk_products_rejected() {
        let f = write_tmp(
            r#"{"num_aps":32,"num_ues":10,"num_antennas":8,"num_clusters":5,
                "mk_pairs":[[32,8],[16,8]]}"#,
        );
        assert!(parse_config(f.path()).is_err());
    }

    #[test]
    fn collocated_config_aggregates_antennas() {
        let f = write_tmp(
            r#"{"num_aps":4,"num_ues":6,"num_antennas":8,"num_clusters":3,"systems":["cf","co"]}"#,
        );
        let cfg = parse_config(f.path()).unwrap();
        let p = &cfg.sweep_points()[0];
        let co = cfg.collocated_config(p).unwrap();
        assert_eq!(co.num_aps, 1);
        assert_eq!(co.num_antennas, 32);
        let total_cf: f64 = cfg.system_config(p).unwrap().dl_power_budget.iter().sum();
        approx::assert_relative_eq!(co.dl_power_budget[0], total_cf, max_relative = 1e-12);
    }

    #[test]
    fn sweep_enumeration_covers_cross_product() {
        let f = write_tmp(
            r#"{"num_aps":8,"num_ues":6,"num_antennas":8,"num_clusters":3,
                "p_total_dbm":[30,40],"zeta":[0.0,0.05],
                "algorithms":["kmeans","improved"]}"#,
        );
        let cfg = parse_config(f.path()).unwrap();
        let points = cfg.sweep_points();
        assert_eq!(points.len(), 2 * 2 * 2);
        let indices: Vec<usize> = points.iter().map(|p| p.index).collect();
        assert_eq!(indices, (0..8).collect::<Vec<_>>());
    }
}
