//! Network geometry, large-scale fading, and channel-estimation statistics.
//!
//! Everything downstream (clustering features, closed-form rates, the power
//! optimizer, the Monte Carlo check) consumes the per-link coefficients
//! produced here: the large-scale gains `beta` and the estimation statistics
//! `gamma` / `upsilon` that arise from pilot-based MMSE estimation when
//! same-cluster users share a pilot sequence.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::clustering::Clustering;
use crate::error::{Error, Result};
use crate::seeds::{self, tags};

/// All scalar system parameters, in linear (noise-normalized) units.
#[derive(Debug, Clone)]
pub struct SystemConfig {
    /// Number of APs (`M`).
    pub num_aps: usize,
    /// Number of UEs (`N`).
    pub num_ues: usize,
    /// Antennas per AP (`K`).
    pub num_antennas: usize,
    /// Number of clusters (`L`).
    pub num_clusters: usize,
    /// Pilot length; defaults to the number of clusters.
    pub pilot_len: usize,
    /// Coherence interval length in symbols.
    pub coherence_len: usize,
    /// SIC performance coefficient per UE, in `[0, 1]`.
    pub sic_coeff: Vec<f64>,
    /// Uplink pilot power per UE, linear and noise-normalized.
    pub ul_pilot_power: Vec<f64>,
    /// Downlink power budget per AP, linear and noise-normalized.
    pub dl_power_budget: Vec<f64>,
    /// Deployment disc radius in km.
    pub radius_km: f64,
    /// Shadow-fading standard deviation in dB.
    pub shadow_std_db: f64,
    /// Path-loss reference distances `(d0, d1)` in km.
    pub ref_dist_km: (f64, f64),
    /// Minimum AP-UE distance in km; the path-loss model is unspecified
    /// below a metre scale, so distances are clamped here.
    pub min_dist_km: f64,
}

impl SystemConfig {
    /// A small all-defaults instance used by tests; powers are per Table-like
    /// reference values already converted to linear normalized units.
    pub fn validated(self) -> Result<Self> {
        let c = &self;
        if c.num_aps == 0 || c.num_ues == 0 || c.num_antennas == 0 || c.num_clusters == 0 {
            return Err(Error::InvalidConfig("counts must be positive".into()));
        }
        if c.num_antennas <= c.pilot_len {
            return Err(Error::InvalidConfig(format!(
                "need K > pilot length, got K={} tau_p={}",
                c.num_antennas, c.pilot_len
            )));
        }
        if c.pilot_len > c.coherence_len {
            return Err(Error::InvalidConfig(format!(
                "pilot length {} exceeds coherence interval {}",
                c.pilot_len, c.coherence_len
            )));
        }
        if c.sic_coeff.len() != c.num_ues || c.ul_pilot_power.len() != c.num_ues {
            return Err(Error::InvalidConfig(
                "per-UE parameter lengths must equal the UE count".into(),
            ));
        }
        if c.dl_power_budget.len() != c.num_aps {
            return Err(Error::InvalidConfig(
                "per-AP budget length must equal the AP count".into(),
            ));
        }
        if c.sic_coeff.iter().any(|z| !(0.0..=1.0).contains(z)) {
            return Err(Error::InvalidConfig("SIC coefficients must lie in [0,1]".into()));
        }
        if c.ul_pilot_power.iter().any(|p| *p <= 0.0) {
            return Err(Error::InvalidConfig("pilot powers must be positive".into()));
        }
        if c.dl_power_budget.iter().any(|p| *p < 0.0) {
            return Err(Error::InvalidConfig("power budgets must be nonnegative".into()));
        }
        if c.radius_km <= 0.0 || c.min_dist_km <= 0.0 {
            return Err(Error::InvalidConfig("distances must be positive".into()));
        }
        let (d0, d1) = c.ref_dist_km;
        if !(0.0 < d0 && d0 < d1) {
            return Err(Error::InvalidConfig("need 0 < d0 < d1".into()));
        }
        Ok(self)
    }

    pub fn prelog(&self) -> f64 {
        1.0 - self.pilot_len as f64 / self.coherence_len as f64
    }
}

/// AP and UE positions on the deployment disc.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub ap_positions: Vec<[f64; 2]>,
    pub ue_positions: Vec<[f64; 2]>,
    pub seed: u64,
}

/// Per-link large-scale coefficients and estimation statistics, all `M x N`.
#[derive(Debug, Clone)]
pub struct FadingMap {
    pub beta: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub upsilon: DMatrix<f64>,
}

/// Three-slope path loss in dB for a distance `d` in km.
///
/// The slope indicators switch strictly below the reference distances, so the
/// model is continuous from above at `d0` and `d1`.
pub fn path_loss(d: f64, d0: f64, d1: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::InvalidInput(format!("distance must be positive, got {d}")));
    }
    if !(0.0 < d0 && d0 < d1) {
        return Err(Error::InvalidInput(format!("need 0 < d0 < d1, got ({d0}, {d1})")));
    }
    let a0 = if d < d0 { 1.0 } else { 0.0 };
    let a1 = if d < d1 { 1.0 } else { 0.0 };
    Ok(-140.7 - 35.0 * d.log10()
        + 20.0 * a0 * (d / d0).log10()
        + 15.0 * a1 * (d / d1).log10())
}

/// Uniform sample on a disc of the given radius.
fn disc_point<R: Rng>(rng: &mut R, radius: f64) -> [f64; 2] {
    let u: f64 = rng.random();
    let v: f64 = rng.random();
    let r = radius * u.sqrt();
    let theta = 2.0 * std::f64::consts::PI * v;
    [r * theta.cos(), r * theta.sin()]
}

/// Draw AP and UE positions i.i.d. uniform on the deployment disc.
pub fn generate_topology(config: &SystemConfig, seed: u64) -> Topology {
    let mut rng = seeds::stream(seed, tags::TOPOLOGY);
    let ap_positions = (0..config.num_aps)
        .map(|_| disc_point(&mut rng, config.radius_km))
        .collect();
    let ue_positions = (0..config.num_ues)
        .map(|_| disc_point(&mut rng, config.radius_km))
        .collect();
    Topology {
        ap_positions,
        ue_positions,
        seed,
    }
}

/// Large-scale fading `beta[m][n] = 10^((PL(d_mn) + sigma_sh z)/10)` with
/// independent standard-normal shadowing per link.
pub fn large_scale_fading(
    topology: &Topology,
    config: &SystemConfig,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if topology.ap_positions.len() != config.num_aps
        || topology.ue_positions.len() != config.num_ues
    {
        return Err(Error::InvalidInput(
            "topology dimensions do not match the configuration".into(),
        ));
    }
    let (d0, d1) = config.ref_dist_km;
    let mut rng = seeds::stream(seed, tags::SHADOWING);
    let mut beta = DMatrix::zeros(config.num_aps, config.num_ues);
    for m in 0..config.num_aps {
        for n in 0..config.num_ues {
            let ap = topology.ap_positions[m];
            let ue = topology.ue_positions[n];
            let d = ((ap[0] - ue[0]).powi(2) + (ap[1] - ue[1]).powi(2))
                .sqrt()
                .max(config.min_dist_km);
            let pl = path_loss(d, d0, d1)?;
            let z: f64 = rng.sample(StandardNormal);
            beta[(m, n)] = 10f64.powf((pl + config.shadow_std_db * z) / 10.0);
        }
    }
    Ok(beta)
}

/// MMSE estimation statistics under intra-cluster pilot sharing.
///
/// Only UEs in the same cluster contaminate each other's estimates:
///
/// ```text
/// upsilon[m][n] = sqrt(rho_n) beta[m][n] / D_m,
/// gamma[m][n]   = tau_p rho_n beta[m][n]^2 / D_m,
/// D_m = tau_p * sum_{n' in cluster(n)} rho_n' beta[m][n'] + 1.
/// ```
pub fn estimation_stats(
    beta: &DMatrix<f64>,
    clustering: &Clustering,
    config: &SystemConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m_aps = beta.nrows();
    let n_ues = beta.ncols();
    clustering.check_partition(n_ues).map_err(Error::InvalidClustering)?;
    let tau_p = config.pilot_len as f64;
    let mut gamma = DMatrix::zeros(m_aps, n_ues);
    let mut upsilon = DMatrix::zeros(m_aps, n_ues);
    for members in &clustering.clusters {
        for m in 0..m_aps {
            let denom: f64 = members
                .iter()
                .map(|&n| config.ul_pilot_power[n] * beta[(m, n)])
                .sum::<f64>()
                * tau_p
                + 1.0;
            for &n in members {
                let rho = config.ul_pilot_power[n];
                let b = beta[(m, n)];
                upsilon[(m, n)] = rho.sqrt() * b / denom;
                gamma[(m, n)] = tau_p * rho * b * b / denom;
            }
        }
    }
    Ok((gamma, upsilon))
}

/// Assemble the full fading map for one topology draw.
pub fn fading_map(
    topology: &Topology,
    clustering: &Clustering,
    config: &SystemConfig,
    seed: u64,
) -> Result<FadingMap> {
    let beta = large_scale_fading(topology, config, seed)?;
    let (gamma, upsilon) = estimation_stats(&beta, clustering, config)?;
    Ok(FadingMap {
        beta,
        gamma,
        upsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::Clustering;
    use approx::assert_relative_eq;

    fn tiny_config(m: usize, n: usize) -> SystemConfig {
        SystemConfig {
            num_aps: m,
            num_ues: n,
            num_antennas: 8,
            num_clusters: 1,
            pilot_len: 1,
            coherence_len: 200,
            sic_coeff: vec![0.05; n],
            ul_pilot_power: vec![1.0; n],
            dl_power_budget: vec![1.0; m],
            radius_km: 1.0,
            shadow_std_db: 8.0,
            ref_dist_km: (0.01, 0.05),
            min_dist_km: 0.001,
        }
    }

    #[test]
    fn path_loss_reference_points() {
        // At 1 km both indicators vanish and the log term is zero.
        assert_relative_eq!(path_loss(1.0, 0.01, 0.05).unwrap(), -140.7, epsilon = 1e-12);
        // At d = d1 the inner indicator is off by the strict-inequality rule.
        assert_relative_eq!(
            path_loss(0.05, 0.01, 0.05).unwrap(),
            -95.164,
            epsilon = 1e-3
        );
        // Below d0 both slope corrections apply.
        assert_relative_eq!(
            path_loss(0.005, 0.01, 0.05).unwrap(),
            -81.185,
            epsilon = 1e-3
        );
    }

    #[test]
    fn path_loss_rejects_nonpositive_distance() {
        assert!(path_loss(0.0, 0.01, 0.05).is_err());
        assert!(path_loss(-1.0, 0.01, 0.05).is_err());
        assert!(path_loss(1.0, 0.05, 0.01).is_err());
    }

    #[test]
    fn path_loss_continuous_at_knees() {
        for dj in [0.01, 0.05] {
            let mut eps = 1e-4;
            let mut last_jump = f64::INFINITY;
            for _ in 0..6 {
                let lo = path_loss(dj - eps, 0.01, 0.05).unwrap();
                let hi = path_loss(dj + eps, 0.01, 0.05).unwrap();
                let jump = (lo - hi).abs();
                assert!(jump < last_jump + 1e-12);
                last_jump = jump;
                eps /= 10.0;
            }
            assert!(last_jump < 1e-6, "discontinuity at {dj}: {last_jump}");
        }
    }

    #[test]
    fn fading_without_shadowing_is_pure_path_loss() {
        let mut cfg = tiny_config(2, 3);
        cfg.shadow_std_db = 0.0;
        let topo = generate_topology(&cfg, 11);
        let beta = large_scale_fading(&topo, &cfg, 11).unwrap();
        for m in 0..2 {
            for n in 0..3 {
                let ap = topo.ap_positions[m];
                let ue = topo.ue_positions[n];
                let d = ((ap[0] - ue[0]).powi(2) + (ap[1] - ue[1]).powi(2))
                    .sqrt()
                    .max(cfg.min_dist_km);
                let expect = 10f64.powf(path_loss(d, 0.01, 0.05).unwrap() / 10.0);
                assert_relative_eq!(beta[(m, n)], expect, max_relative = 1e-12);
            }
        }
        // 1 km away with no shadowing: beta = 10^(-14.07).
        assert_relative_eq!(
            10f64.powf(path_loss(1.0, 0.01, 0.05).unwrap() / 10.0),
            10f64.powf(-14.07),
            max_relative = 1e-12
        );
    }

    #[test]
    fn topology_and_fading_are_deterministic() {
        let cfg = tiny_config(32, 10);
        let t1 = generate_topology(&cfg, 99);
        let t2 = generate_topology(&cfg, 99);
        assert_eq!(t1, t2);
        let b1 = large_scale_fading(&t1, &cfg, 99).unwrap();
        let b2 = large_scale_fading(&t2, &cfg, 99).unwrap();
        assert_eq!(b1, b2);
        for p in t1.ap_positions.iter().chain(&t1.ue_positions) {
            assert!((p[0].powi(2) + p[1].powi(2)).sqrt() <= cfg.radius_km + 1e-12);
        }
    }

    #[test]
    fn empty_ap_set_is_allowed() {
        let mut cfg = tiny_config(1, 1);
        cfg.num_aps = 0;
        cfg.dl_power_budget.clear();
        let topo = generate_topology(&cfg, 1);
        assert!(topo.ap_positions.is_empty());
    }

    #[test]
    fn estimation_stats_singleton_cluster() {
        // tau_p = 1, rho = 1, beta = 1 forces gamma = 1/(1+1).
        let cfg = tiny_config(1, 1);
        let beta = DMatrix::from_element(1, 1, 1.0);
        let clustering = Clustering::from_clusters(vec![vec![0]], 1).unwrap();
        let (gamma, upsilon) = estimation_stats(&beta, &clustering, &cfg).unwrap();
        assert_relative_eq!(gamma[(0, 0)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(upsilon[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn estimation_stats_shared_pilot() {
        // Two same-cluster UEs, beta = 1, rho = 1, tau_p = 2:
        // gamma = 2 / (2*(1+1) + 1) = 0.4 each.
        let mut cfg = tiny_config(1, 2);
        cfg.pilot_len = 2;
        let beta = DMatrix::from_element(1, 2, 1.0);
        let clustering = Clustering::from_clusters(vec![vec![0, 1]], 2).unwrap();
        let (gamma, _) = estimation_stats(&beta, &clustering, &cfg).unwrap();
        assert_relative_eq!(gamma[(0, 0)], 0.4, epsilon = 1e-15);
        assert_relative_eq!(gamma[(0, 1)], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn gamma_below_beta_and_estimates_collinear() {
        let mut cfg = tiny_config(4, 6);
        cfg.num_clusters = 2;
        cfg.pilot_len = 2;
        cfg.ul_pilot_power = (0..6).map(|i| 0.5 + 0.25 * i as f64).collect();
        let topo = generate_topology(&cfg, 5);
        let beta = large_scale_fading(&topo, &cfg, 5).unwrap();
        let clustering =
            Clustering::from_clusters(vec![vec![0, 2, 4], vec![1, 3, 5]], 6).unwrap();
        let (gamma, upsilon) = estimation_stats(&beta, &clustering, &cfg).unwrap();
        for m in 0..4 {
            for n in 0..6 {
                assert!(gamma[(m, n)] > 0.0);
                assert!(gamma[(m, n)] < beta[(m, n)]);
            }
        }
        // Same-cluster estimates are collinear:
        // upsilon_n sqrt(rho_n') beta_n' = upsilon_n' sqrt(rho_n) beta_n.
        for members in &clustering.clusters {
            for m in 0..4 {
                for i in 0..members.len() {
                    for j in (i + 1)..members.len() {
                        let (a, b) = (members[i], members[j]);
                        let lhs = upsilon[(m, a)]
                            * cfg.ul_pilot_power[b].sqrt()
                            * beta[(m, b)];
                        let rhs = upsilon[(m, b)]
                            * cfg.ul_pilot_power[a].sqrt()
                            * beta[(m, a)];
                        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn estimation_stats_rejects_missing_ue() {
        let clustering = Clustering::from_clusters(vec![vec![0]], 2);
        assert!(clustering.is_err());
    }
}
