//! Closed-form per-user and sum spectral efficiency under imperfect SIC.
//!
//! Clusters are assumed decode-ordered strongest-first (see
//! [`crate::clustering::order_within_cluster`]). Position `t` in a cluster is
//! decoded by every stronger-or-equal member `e <= t`; the reported rate
//! takes the minimum over those evaluations, which is the condition that
//! keeps SIC implementable. Cell-free and collocated variants share the same
//! interference structure; the collocated system is the cell-free system
//! with a single `MK`-antenna site and a total (rather than per-AP) power
//! constraint.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::clustering::Clustering;
use crate::error::{Error, Result};
use crate::model::SystemConfig;

/// Normalized downlink transmit powers.
#[derive(Debug, Clone)]
pub enum PowerAllocation {
    /// `rho[m][n]`: per-AP, per-UE.
    CellFree(DMatrix<f64>),
    /// `rho[n]`: per-UE at the single collocated site.
    Collocated(Vec<f64>),
}

impl PowerAllocation {
    pub fn as_cell_free(&self) -> Result<&DMatrix<f64>> {
        match self {
            PowerAllocation::CellFree(m) => Ok(m),
            _ => Err(Error::InvalidInput("expected cell-free power allocation".into())),
        }
    }

    pub fn as_collocated(&self) -> Result<&[f64]> {
        match self {
            PowerAllocation::Collocated(v) => Ok(v),
            _ => Err(Error::InvalidInput("expected collocated power allocation".into())),
        }
    }
}

/// SINR split into its power components; all nonnegative, and
/// `sinr = ds / (bu + ici + rici + ui + 1)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SinrBreakdown {
    /// Coherent beamforming (desired signal) power.
    pub ds: f64,
    /// Beamforming-gain uncertainty power.
    pub bu: f64,
    /// Intra-cluster interference remaining after SIC.
    pub ici: f64,
    /// Residual intra-cluster interference from imperfect SIC.
    pub rici: f64,
    /// Inter-cluster interference.
    pub ui: f64,
    pub sinr: f64,
}

/// SIC interference weight for an interferer against a decode target.
///
/// Interferers in other clusters, and same-cluster interferers at or above
/// the target in decode order, count fully; weaker same-cluster interferers
/// were already decoded and enter only through the target UE's residual SIC
/// coefficient.
pub fn eta_coeff(
    interferer_cluster: usize,
    interferer_pos: usize,
    target_cluster: usize,
    target_pos: usize,
    zeta_target: f64,
) -> f64 {
    if interferer_cluster != target_cluster || interferer_pos <= target_pos {
        1.0
    } else {
        zeta_target
    }
}

fn check_cf_dims(
    rho: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    config: &SystemConfig,
) -> Result<()> {
    if config.num_antennas <= config.pilot_len {
        return Err(Error::InvalidConfig(format!(
            "need K > tau_p, got K={} tau_p={}",
            config.num_antennas, config.pilot_len
        )));
    }
    if rho.shape() != gamma.shape() || gamma.shape() != beta.shape() {
        return Err(Error::InvalidInput("rho/gamma/beta shapes differ".into()));
    }
    Ok(())
}

/// Closed-form SINR for decoding the signal of cluster position `target_pos`
/// at the (stronger or equal) member `eval_pos`.
#[allow(clippy::too_many_arguments)]
pub fn sinr_cf(
    cluster: usize,
    target_pos: usize,
    eval_pos: usize,
    rho: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    clustering: &Clustering,
    config: &SystemConfig,
) -> Result<SinrBreakdown> {
    check_cf_dims(rho, gamma, beta, config)?;
    let members = clustering
        .clusters
        .get(cluster)
        .ok_or_else(|| Error::InvalidInput(format!("no cluster {cluster}")))?;
    if target_pos >= members.len() || eval_pos > target_pos {
        return Err(Error::InvalidInput(
            "need eval_pos <= target_pos < cluster size".into(),
        ));
    }
    let m_aps = rho.nrows();
    let kf = (config.num_antennas - config.pilot_len) as f64;
    let target = members[target_pos];
    let eval = members[eval_pos];
    let zeta = config.sic_coeff[target];

    let coherent = |ue: usize| -> f64 {
        let s: f64 = (0..m_aps)
            .map(|m| (rho[(m, ue)] * gamma[(m, eval)]).sqrt())
            .sum();
        kf * s * s
    };
    let scatter = |ue: usize| -> f64 {
        (0..m_aps)
            .map(|m| rho[(m, ue)] * (beta[(m, eval)] - gamma[(m, eval)]))
            .sum()
    };

    let ds = coherent(target);
    let bu = scatter(target);
    let mut ici = 0.0;
    let mut rici = 0.0;
    for (j, &ue) in members.iter().enumerate() {
        if j == target_pos {
            continue;
        }
        let term = coherent(ue) + scatter(ue);
        if j <= target_pos {
            ici += term;
        } else {
            rici += zeta * term;
        }
    }
    let mut ui = 0.0;
    for (l, other) in clustering.clusters.iter().enumerate() {
        if l == cluster {
            continue;
        }
        for &ue in other {
            ui += scatter(ue);
        }
    }
    let sinr = ds / (bu + ici + rici + ui + 1.0);
    Ok(SinrBreakdown {
        ds,
        bu,
        ici,
        rici,
        ui,
        sinr,
    })
}

/// Per-user spectral efficiency in bits/s/Hz: prelog times
/// `log2(1 + min over evaluators of the closed-form SINR)`.
pub fn user_se_cf(
    ue: usize,
    rho: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    clustering: &Clustering,
    config: &SystemConfig,
) -> Result<f64> {
    let (cluster, target_pos) = locate(ue, clustering)?;
    let mut min_sinr = f64::INFINITY;
    for eval_pos in 0..=target_pos {
        let s = sinr_cf(
            cluster, target_pos, eval_pos, rho, gamma, beta, clustering, config,
        )?;
        min_sinr = min_sinr.min(s.sinr);
    }
    Ok(config.prelog() * (1.0 + min_sinr).log2())
}

/// Sum spectral efficiency over all UEs.
pub fn sum_se_cf(
    rho: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    clustering: &Clustering,
    config: &SystemConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for ue in 0..gamma.ncols() {
        total += user_se_cf(ue, rho, gamma, beta, clustering, config)?;
    }
    Ok(total)
}

fn locate(ue: usize, clustering: &Clustering) -> Result<(usize, usize)> {
    for (l, members) in clustering.clusters.iter().enumerate() {
        if let Some(pos) = members.iter().position(|&u| u == ue) {
            return Ok((l, pos));
        }
    }
    Err(Error::InvalidClustering(format!("UE {ue} not clustered")))
}

// ---------------------------------------------------------------------------
// Collocated benchmark
// ---------------------------------------------------------------------------

/// Estimation quality for the collocated system: same pilot-contamination
/// structure with scalar per-UE gains.
pub fn gamma_co(
    beta_co: &[f64],
    clustering: &Clustering,
    config: &SystemConfig,
) -> Result<Vec<f64>> {
    clustering
        .check_partition(beta_co.len())
        .map_err(Error::InvalidClustering)?;
    let tau_p = config.pilot_len as f64;
    let mut out = vec![0.0; beta_co.len()];
    for members in &clustering.clusters {
        let denom: f64 = members
            .iter()
            .map(|&n| config.ul_pilot_power[n] * beta_co[n])
            .sum::<f64>()
            * tau_p
            + 1.0;
        for &n in members {
            out[n] = tau_p * config.ul_pilot_power[n] * beta_co[n] * beta_co[n] / denom;
        }
    }
    Ok(out)
}

/// Collocated SINR; `config.num_antennas` is the total antenna count at the
/// single site.
#[allow(clippy::too_many_arguments)]
pub fn sinr_co(
    cluster: usize,
    target_pos: usize,
    eval_pos: usize,
    rho: &[f64],
    gamma: &[f64],
    beta: &[f64],
    clustering: &Clustering,
    config: &SystemConfig,
) -> Result<SinrBreakdown> {
    if config.num_antennas <= config.pilot_len {
        return Err(Error::InvalidConfig(format!(
            "need K > tau_p, got K={} tau_p={}",
            config.num_antennas, config.pilot_len
        )));
    }
    let members = clustering
        .clusters
        .get(cluster)
        .ok_or_else(|| Error::InvalidInput(format!("no cluster {cluster}")))?;
    if target_pos >= members.len() || eval_pos > target_pos {
        return Err(Error::InvalidInput(
            "need eval_pos <= target_pos < cluster size".into(),
        ));
    }
    let kf = (config.num_antennas - config.pilot_len) as f64;
    let target = members[target_pos];
    let eval = members[eval_pos];
    let zeta = config.sic_coeff[target];

    let ds = kf * rho[target] * gamma[eval];
    let bu = rho[target] * (beta[eval] - gamma[eval]);
    let mut ici = 0.0;
    let mut rici = 0.0;
    for (j, &ue) in members.iter().enumerate() {
        if j == target_pos {
            continue;
        }
        let term = kf * rho[ue] * gamma[eval] + rho[ue] * (beta[eval] - gamma[eval]);
        if j <= target_pos {
            ici += term;
        } else {
            rici += zeta * term;
        }
    }
    let mut ui = 0.0;
    for (l, other) in clustering.clusters.iter().enumerate() {
        if l == cluster {
            continue;
        }
        for &ue in other {
            ui += rho[ue] * (beta[eval] - gamma[eval]);
        }
    }
    let sinr = ds / (bu + ici + rici + ui + 1.0);
    Ok(SinrBreakdown {
        ds,
        bu,
        ici,
        rici,
        ui,
        sinr,
    })
}

pub fn user_se_co(
    ue: usize,
    rho: &[f64],
    gamma: &[f64],
    beta: &[f64],
    clustering: &Clustering,
    config: &SystemConfig,
) -> Result<f64> {
    let (cluster, target_pos) = locate(ue, clustering)?;
    let mut min_sinr = f64::INFINITY;
    for eval_pos in 0..=target_pos {
        let s = sinr_co(
            cluster, target_pos, eval_pos, rho, gamma, beta, clustering, config,
        )?;
        min_sinr = min_sinr.min(s.sinr);
    }
    Ok(config.prelog() * (1.0 + min_sinr).log2())
}

pub fn sum_se_co(
    rho: &[f64],
    gamma: &[f64],
    beta: &[f64],
    clustering: &Clustering,
    config: &SystemConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for ue in 0..gamma.len() {
        total += user_se_co(ue, rho, gamma, beta, clustering, config)?;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Fixed power allocation
// ---------------------------------------------------------------------------

/// Fractional fixed power allocation.
///
/// Each AP splits its budget equally over clusters, then shares a cluster's
/// slice over members proportionally to `||virtual channel||^(-alpha)`, so
/// weaker UEs receive more power and the within-cluster SIC power ordering
/// holds for any `alpha >= 0`.
pub fn fixed_pa(
    gamma: &DMatrix<f64>,
    clustering: &Clustering,
    config: &SystemConfig,
    alpha: f64,
) -> Result<PowerAllocation> {
    let m_aps = gamma.nrows();
    let n_ues = gamma.ncols();
    clustering
        .check_partition(n_ues)
        .map_err(Error::InvalidClustering)?;
    let num_clusters = clustering.num_clusters() as f64;
    let mut rho = DMatrix::zeros(m_aps, n_ues);
    for members in &clustering.clusters {
        let weights: Vec<f64> = members
            .iter()
            .map(|&ue| gamma.column(ue).norm().powf(-alpha))
            .collect();
        let wsum: f64 = weights.iter().sum();
        for m in 0..m_aps {
            let share = config.dl_power_budget[m] / num_clusters;
            for (&ue, w) in members.iter().zip(&weights) {
                rho[(m, ue)] = share * w / wsum;
            }
        }
    }
    Ok(PowerAllocation::CellFree(rho))
}

/// Collocated fixed allocation against a single total budget.
pub fn fixed_pa_co(
    gamma: &[f64],
    clustering: &Clustering,
    total_budget: f64,
    alpha: f64,
) -> Result<PowerAllocation> {
    clustering
        .check_partition(gamma.len())
        .map_err(Error::InvalidClustering)?;
    let num_clusters = clustering.num_clusters() as f64;
    let mut rho = vec![0.0; gamma.len()];
    for members in &clustering.clusters {
        let weights: Vec<f64> = members.iter().map(|&ue| gamma[ue].powf(-alpha)).collect();
        let wsum: f64 = weights.iter().sum();
        let share = total_budget / num_clusters;
        for (&ue, w) in members.iter().zip(&weights) {
            rho[ue] = share * w / wsum;
        }
    }
    Ok(PowerAllocation::Collocated(rho))
}

/// One evaluated scenario row with the per-user rate detail, for the
/// per-user CSV artifact.
#[derive(Debug, Clone, Serialize)]
pub struct SeRecord {
    pub scenario: String,
    pub seed: u64,
    pub algorithm: String,
    pub p_max_dbm: f64,
    pub zeta: f64,
    pub k: usize,
    pub m: usize,
    pub sse: f64,
    /// Per-user SE list rendered as a JSON array string.
    pub per_user_se: String,
}

impl SeRecord {
    pub fn csv_header() -> &'static str {
        "scenario,seed,algorithm,p_max_dbm,zeta,K,M,sse,per_user_se"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.12},\"{}\"",
            self.scenario,
            self.seed,
            self.algorithm,
            self.p_max_dbm,
            self.zeta,
            self.k,
            self.m,
            self.sse,
            self.per_user_se
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::Clustering;
    use approx::assert_relative_eq;

    fn config(m: usize, n: usize, k: usize, tau_p: usize, tau_c: usize) -> SystemConfig {
        SystemConfig {
            num_aps: m,
            num_ues: n,
            num_antennas: k,
            num_clusters: 1,
            pilot_len: tau_p,
            coherence_len: tau_c,
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
    fn eta_branches() {
        assert_eq!(eta_coeff(0, 5, 1, 0, 0.05), 1.0); // other cluster
        assert_eq!(eta_coeff(1, 0, 1, 2, 0.05), 1.0); // stronger, same cluster
        assert_eq!(eta_coeff(1, 2, 1, 2, 0.05), 1.0); // equal position
        assert_eq!(eta_coeff(1, 3, 1, 2, 0.05), 0.05); // weaker, same cluster
    }

    #[test]
    fn single_ue_instance_matches_hand_evaluation() {
        // M=1, N=1, tau_p=1, K=2, rho=1, beta=1 -> gamma=0.5,
        // SINR = 0.5/(0.5 + 1) = 1/3, SE = 0.5 log2(4/3).
        let cfg = config(1, 1, 2, 1, 2);
        let clustering = Clustering::from_clusters(vec![vec![0]], 1).unwrap();
        let rho = DMatrix::from_element(1, 1, 1.0);
        let gamma = DMatrix::from_element(1, 1, 0.5);
        let beta = DMatrix::from_element(1, 1, 1.0);
        let s = sinr_cf(0, 0, 0, &rho, &gamma, &beta, &clustering, &cfg).unwrap();
        assert_relative_eq!(s.sinr, 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(s.ds, 0.5);
        assert_relative_eq!(s.bu, 0.5);
        assert_eq!((s.ici, s.rici, s.ui), (0.0, 0.0, 0.0));
        let se = user_se_cf(0, &rho, &gamma, &beta, &clustering, &cfg).unwrap();
        assert_relative_eq!(se, 0.5 * (4.0f64 / 3.0).log2(), epsilon = 1e-12);
        assert_relative_eq!(se, 0.2075, epsilon = 1e-4);
        // Sum over one UE equals the user SE.
        let sum = sum_se_cf(&rho, &gamma, &beta, &clustering, &cfg).unwrap();
        assert_relative_eq!(sum, se);
    }

    #[test]
    fn zero_power_means_zero_sinr_and_prelog_zero_kills_rate() {
        let cfg = config(2, 2, 4, 2, 4);
        let clustering = Clustering::from_clusters(vec![vec![0, 1]], 2).unwrap();
        let rho = DMatrix::zeros(2, 2);
        let gamma = DMatrix::from_element(2, 2, 0.3);
        let beta = DMatrix::from_element(2, 2, 1.0);
        let s = sinr_cf(0, 1, 0, &rho, &gamma, &beta, &clustering, &cfg).unwrap();
        assert_eq!(s.sinr, 0.0);
        let mut cfg2 = cfg.clone();
        cfg2.coherence_len = 2; // tau_p == tau_c
        let se = user_se_cf(0, &rho, &gamma, &beta, &clustering, &cfg2).unwrap();
        assert_eq!(se, 0.0);
    }

    #[test]
    fn k_at_most_tau_p_is_rejected() {
        let cfg = config(1, 1, 2, 2, 4);
        let clustering = Clustering::from_clusters(vec![vec![0]], 1).unwrap();
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!(sinr_cf(0, 0, 0, &one, &one, &one, &clustering, &cfg).is_err());
    }

    #[test]
    fn symmetric_clusters_contribute_equally() {
        let cfg = config(1, 2, 4, 2, 8);
        let clustering = Clustering::from_clusters(vec![vec![0], vec![1]], 2).unwrap();
        let rho = DMatrix::from_element(1, 2, 2.0);
        let gamma = DMatrix::from_element(1, 2, 0.4);
        let beta = DMatrix::from_element(1, 2, 1.0);
        let a = user_se_cf(0, &rho, &gamma, &beta, &clustering, &cfg).unwrap();
        let b = user_se_cf(1, &rho, &gamma, &beta, &clustering, &cfg).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-14);
        let sum = sum_se_cf(&rho, &gamma, &beta, &clustering, &cfg).unwrap();
        assert_relative_eq!(sum, 2.0 * a, epsilon = 1e-14);
    }

    #[test]
    fn cf_with_one_ap_equals_collocated() {
        use rand::Rng;
        let mut rng = crate::seeds::stream(21, 77);
        for _ in 0..50 {
            let n = rng.random_range(2..6);
            let l = rng.random_range(1..=n.min(3));
            let k = rng.random_range((l + 1)..(l + 8));
            let mut cfg = config(1, n, k, l, 40);
            cfg.num_clusters = l;
            cfg.pilot_len = l;
            cfg.ul_pilot_power = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
            cfg.sic_coeff = (0..n).map(|_| rng.random_range(0.0..0.3)).collect();
            let mut lists: Vec<Vec<usize>> = vec![Vec::new(); l];
            for ue in 0..n {
                lists[ue % l].push(ue);
            }
            let clustering = Clustering::from_clusters(lists, n).unwrap();
            let beta_v: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
            let beta = DMatrix::from_row_slice(1, n, &beta_v);
            let (gamma, _) =
                crate::model::estimation_stats(&beta, &clustering, &cfg).unwrap();
            let clustering = crate::clustering::order_within_cluster(&gamma, &clustering).unwrap();
            let (gamma, _) =
                crate::model::estimation_stats(&beta, &clustering, &cfg).unwrap();
            let rho_v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
            let rho = DMatrix::from_row_slice(1, n, &rho_v);

            let gamma_col = gamma_co(&beta_v, &clustering, &cfg).unwrap();
            for (a, b) in gamma_col.iter().zip(gamma.row(0).iter()) {
                assert_relative_eq!(a, b, max_relative = 1e-14);
            }
            for ue in 0..n {
                let cf = user_se_cf(ue, &rho, &gamma, &beta, &clustering, &cfg).unwrap();
                let co =
                    user_se_co(ue, &rho_v, &gamma_col, &beta_v, &clustering, &cfg).unwrap();
                assert_relative_eq!(cf, co, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn single_ue_rate_ignores_sic_coefficient() {
        let mut cfg = config(1, 1, 2, 1, 2);
        let clustering = Clustering::from_clusters(vec![vec![0]], 1).unwrap();
        let rho = DMatrix::from_element(1, 1, 1.0);
        let gamma = DMatrix::from_element(1, 1, 0.5);
        let beta = DMatrix::from_element(1, 1, 1.0);
        let base = user_se_cf(0, &rho, &gamma, &beta, &clustering, &cfg).unwrap();
        cfg.sic_coeff = vec![1.0];
        let with_zeta = user_se_cf(0, &rho, &gamma, &beta, &clustering, &cfg).unwrap();
        assert_eq!(base, with_zeta);
    }

    #[test]
    fn fixed_pa_shapes_and_weights() {
        let cfg = config(1, 2, 4, 1, 8);
        let clustering = Clustering::from_clusters(vec![vec![0, 1]], 2).unwrap();
        // Norms 4 and 1 with alpha = 1: weights 1/4 and 1 -> 0.2 / 0.8.
        let gamma = DMatrix::from_row_slice(1, 2, &[4.0, 1.0]);
        let pa = fixed_pa(&gamma, &clustering, &cfg, 1.0).unwrap();
        let rho = pa.as_cell_free().unwrap();
        assert_relative_eq!(rho[(0, 0)], 0.2, epsilon = 1e-12);
        assert_relative_eq!(rho[(0, 1)], 0.8, epsilon = 1e-12);
        // alpha = 0: equal split.
        let pa = fixed_pa(&gamma, &clustering, &cfg, 0.0).unwrap();
        let rho = pa.as_cell_free().unwrap();
        assert_relative_eq!(rho[(0, 0)], 0.5);
        assert_relative_eq!(rho[(0, 1)], 0.5);
        // Single UE, single cluster: the full per-AP budget.
        let c1 = Clustering::from_clusters(vec![vec![0]], 1).unwrap();
        let g1 = DMatrix::from_element(1, 1, 2.0);
        let cfg1 = config(1, 1, 4, 1, 8);
        let pa = fixed_pa(&g1, &c1, &cfg1, 1.0).unwrap();
        assert_relative_eq!(pa.as_cell_free().unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn fixed_pa_respects_budget_and_sic_order() {
        use rand::Rng;
        let mut rng = crate::seeds::stream(3, 55);
        for _ in 0..20 {
            let m = rng.random_range(1..5);
            let n = rng.random_range(2..7);
            let l = rng.random_range(1..=n.min(3));
            let mut cfg = config(m, n, l + 3, l, 50);
            cfg.num_clusters = l;
            cfg.dl_power_budget = (0..m).map(|_| rng.random_range(0.5..4.0)).collect();
            let mut lists: Vec<Vec<usize>> = vec![Vec::new(); l];
            for ue in 0..n {
                lists[ue % l].push(ue);
            }
            let clustering = Clustering::from_clusters(lists, n).unwrap();
            let gamma = DMatrix::from_fn(m, n, |_, _| rng.random_range(0.01..2.0));
            let clustering = crate::clustering::order_within_cluster(&gamma, &clustering).unwrap();
            let alpha = rng.random_range(0.0..2.0);
            let pa = fixed_pa(&gamma, &clustering, &cfg, alpha).unwrap();
            let rho = pa.as_cell_free().unwrap();
            for mi in 0..m {
                let total: f64 = rho.row(mi).iter().sum();
                assert!(total <= cfg.dl_power_budget[mi] * (1.0 + 1e-12));
                for members in &clustering.clusters {
                    for w in members.windows(2) {
                        assert!(
                            rho[(mi, w[0])] <= rho[(mi, w[1])] * (1.0 + 1e-12),
                            "power must not decrease toward weaker UEs"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn victim_sinr_monotone_in_interferer_power() {
        let cfg = config(2, 4, 6, 2, 20);
        let clustering =
            Clustering::from_clusters(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let gamma = DMatrix::from_fn(2, 4, |m, n| 0.1 + 0.05 * (m + n) as f64);
        let beta = gamma.map(|g| g * 2.5);
        let mut rho = DMatrix::from_element(2, 4, 0.5);
        let base = sinr_cf(0, 1, 0, &rho, &gamma, &beta, &clustering, &cfg)
            .unwrap()
            .sinr;
        for victim in [(0usize, 1usize)] {
            for interferer in 0..4 {
                if interferer == clustering.clusters[victim.0][victim.1] {
                    continue;
                }
                let mut bumped = rho.clone();
                for m in 0..2 {
                    bumped[(m, interferer)] *= 3.0;
                }
                let s = sinr_cf(0, 1, 0, &bumped, &gamma, &beta, &clustering, &cfg)
                    .unwrap()
                    .sinr;
                assert!(s <= base + 1e-14, "interferer {interferer} raised SINR");
            }
        }
        // Raising everyone's zeta never helps the sum SE.
        let mut last = f64::INFINITY;
        for zeta in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let mut cfg2 = cfg.clone();
            cfg2.sic_coeff = vec![zeta; 4];
            let s = sum_se_cf(&rho, &gamma, &beta, &clustering, &cfg2).unwrap();
            assert!(s <= last + 1e-12);
            last = s;
        }
        // Components are nonnegative and consistent with the ratio.
        rho[(0, 0)] = 0.0;
        let s = sinr_cf(0, 1, 1, &rho, &gamma, &beta, &clustering, &cfg).unwrap();
        for v in [s.ds, s.bu, s.ici, s.rici, s.ui] {
            assert!(v >= 0.0);
        }
        assert_relative_eq!(
            s.sinr,
            s.ds / (s.bu + s.ici + s.rici + s.ui + 1.0),
            max_relative = 1e-15
        );
    }

    #[test]
    fn se_bounded_by_prelog_ds_rate() {
        use rand::Rng;
        let mut rng = crate::seeds::stream(14, 31);
        for _ in 0..30 {
            let cfg = config(3, 4, 7, 2, 25);
            let clustering =
                Clustering::from_clusters(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
            let gamma = DMatrix::from_fn(3, 4, |_, _| rng.random_range(0.01..1.0));
            let beta = gamma.map(|g| g * rng.random_range(1.1..3.0));
            let rho = DMatrix::from_fn(3, 4, |_, _| rng.random_range(0.0..2.0));
            for ue in 0..4 {
                let se = user_se_cf(ue, &rho, &gamma, &beta, &clustering, &cfg).unwrap();
                let (l, t) = locate(ue, &clustering).unwrap();
                let ds = sinr_cf(l, t, t, &rho, &gamma, &beta, &clustering, &cfg)
                    .unwrap()
                    .ds;
                assert!(se >= 0.0);
                assert!(se <= cfg.prelog() * (1.0 + ds).log2() + 1e-12);
            }
        }
    }
}
