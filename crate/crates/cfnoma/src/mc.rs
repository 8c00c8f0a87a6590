//! Monte Carlo small-scale-fading oracle.
//!
//! Re-derives every SINR component empirically — desired signal, beamforming
//! uncertainty, post-SIC intra-cluster interference, residual imperfect-SIC
//! interference, inter-cluster leakage — by simulating pilot transmission,
//! MMSE estimation and zero-forcing precoding realization by realization,
//! then compares each term against its closed form. This path is independent
//! of the closed-form code: it never touches `gamma`; only the defining
//! matrix algebra and the analytic precoder normalization.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::clustering::Clustering;
use crate::error::{Error, Result};
use crate::model::SystemConfig;
use crate::seeds::{self, tags};
use crate::sse::{self, PowerAllocation};

/// Oracle run parameters.
#[derive(Debug, Clone)]
pub struct McOracleConfig {
    pub num_realizations: usize,
    pub seed: u64,
    /// Relative tolerance used by callers when judging the report.
    pub tolerance: f64,
}

impl Default for McOracleConfig {
    fn default() -> Self {
        Self {
            num_realizations: 10_000,
            seed: 0,
            tolerance: 0.03,
        }
    }
}

/// Relative errors of each empirical SINR term against its closed form.
#[derive(Debug, Clone, Copy)]
pub struct TermErrors {
    pub ue: usize,
    pub ds: f64,
    pub bu: f64,
    pub ici: f64,
    pub rici: f64,
    pub ui: f64,
    pub se: f64,
}

impl TermErrors {
    pub fn max_term(&self) -> f64 {
        self.ds.max(self.bu).max(self.ici).max(self.rici).max(self.ui)
    }
}

#[derive(Debug, Clone)]
pub struct McVerifyReport {
    pub per_user: Vec<TermErrors>,
    /// Realizations redrawn because a pilot Gram matrix was near-singular.
    pub resamples: usize,
    /// Worst per-realization cross-cluster estimate/precoder product; the
    /// zero-forcing structure makes this zero up to floating point.
    pub max_fpzf_cross: f64,
}

impl McVerifyReport {
    pub fn worst_term_error(&self) -> f64 {
        self.per_user
            .iter()
            .map(TermErrors::max_term)
            .fold(0.0, f64::max)
    }

    pub fn worst_se_error(&self) -> f64 {
        self.per_user.iter().map(|t| t.se).fold(0.0, f64::max)
    }
}

fn rel_err(empirical: f64, closed: f64) -> f64 {
    if closed.abs() <= 1e-300 && empirical.abs() <= 1e-300 {
        0.0
    } else {
        (empirical - closed).abs() / closed.abs().max(1e-300)
    }
}

struct Accum {
    /// Complex running sum of the own-signal amplitude.
    sum_own: Complex64,
    /// Running sum of |amplitude|^2 per in-cluster position.
    sum_sq_intra: Vec<f64>,
    /// Running sum of |amplitude|^2 per out-of-cluster UE.
    sum_sq_inter: Vec<f64>,
}

/// Empirically estimate all five SINR terms and compare with closed forms.
///
/// Per realization and AP the pilot observation is formed, the estimates and
/// the zero-forcing directions are built from it, and the precoder is scaled
/// by its analytic normalization. Realizations whose pilot Gram matrix is
/// ill-conditioned (condition estimate above 1e12) are redrawn and counted.
pub fn mc_verify(
    config: &SystemConfig,
    beta: &DMatrix<f64>,
    clustering: &Clustering,
    rho: &PowerAllocation,
    mc: &McOracleConfig,
) -> Result<McVerifyReport> {
    let rho = rho.as_cell_free()?;
    let m_aps = config.num_aps;
    let n_ues = config.num_ues;
    let k = config.num_antennas;
    let tau_p = config.pilot_len;
    if k <= tau_p {
        return Err(Error::InvalidConfig("need K > tau_p".into()));
    }
    let num_clusters = clustering.num_clusters();
    if num_clusters > tau_p {
        return Err(Error::InvalidConfig(
            "pilot length shorter than the number of clusters".into(),
        ));
    }
    clustering
        .check_partition(n_ues)
        .map_err(Error::InvalidClustering)?;
    if mc.num_realizations == 0 {
        return Err(Error::InvalidInput("need at least one realization".into()));
    }

    // Analytic precoder normalization per (AP, cluster):
    // E||unnormalized w||^2 = 1 / (tau_p D (K - tau_p)) with
    // D = tau_p sum_{n in cluster} rho_ul beta + 1.
    let kf = (k - tau_p) as f64;
    let mut norm_scale = vec![vec![0.0f64; num_clusters]; m_aps];
    for m in 0..m_aps {
        for (l, members) in clustering.clusters.iter().enumerate() {
            let d: f64 = members
                .iter()
                .map(|&n| config.ul_pilot_power[n] * beta[(m, n)])
                .sum::<f64>()
                * tau_p as f64
                + 1.0;
            norm_scale[m][l] = (tau_p as f64 * d * kf).sqrt();
        }
    }

    let mut accums: Vec<Accum> = (0..n_ues)
        .map(|ue| {
            let (l, _) = locate(ue, clustering);
            Accum {
                sum_own: Complex64::new(0.0, 0.0),
                sum_sq_intra: vec![0.0; clustering.clusters[l].len()],
                sum_sq_inter: vec![0.0; n_ues],
            }
        })
        .collect();

    let mut resamples = 0usize;
    let mut max_cross: f64 = 0.0;
    let block_size = 256usize;
    let blocks = mc.num_realizations.div_ceil(block_size);
    let mut done = 0usize;
    for blk in 0..blocks {
        let mut rng = seeds::stream(mc.seed, tags::MC_BLOCK_BASE + blk as u64);
        let todo = block_size.min(mc.num_realizations - done);
        for _ in 0..todo {
            let real = loop {
                match draw_realization(config, beta, clustering, &norm_scale, &mut rng) {
                    Some(r) => break r,
                    None => {
                        resamples += 1;
                        if resamples > 100 * mc.num_realizations {
                            return Err(Error::InvalidInput(
                                "pilot Gram matrices persistently singular".into(),
                            ));
                        }
                    }
                }
            };
            max_cross = max_cross.max(real.max_cross);
            // Amplitudes: for UE n with cluster l, the own-cluster amplitude
            // of member j is sum_m sqrt(rho[m][j]) p[m][n][l], and the
            // inter-cluster amplitude of UE j' in l' uses p[m][n][l'].
            for ue in 0..n_ues {
                let (l, _) = locate(ue, clustering);
                let acc = &mut accums[ue];
                for (j, &member) in clustering.clusters[l].iter().enumerate() {
                    let mut amp = Complex64::new(0.0, 0.0);
                    for m in 0..m_aps {
                        amp += rho[(m, member)].sqrt() * real.p[m][ue][l];
                    }
                    acc.sum_sq_intra[j] += amp.norm_sqr();
                    if member == ue {
                        acc.sum_own += amp;
                    }
                }
                for (lp, others) in clustering.clusters.iter().enumerate() {
                    if lp == l {
                        continue;
                    }
                    for &other in others {
                        let mut amp = Complex64::new(0.0, 0.0);
                        for m in 0..m_aps {
                            amp += rho[(m, other)].sqrt() * real.p[m][ue][lp];
                        }
                        acc.sum_sq_inter[other] += amp.norm_sqr();
                    }
                }
            }
        }
        done += todo;
    }

    let nr = mc.num_realizations as f64;
    let mut per_user = Vec::with_capacity(n_ues);
    for ue in 0..n_ues {
        let (l, t) = locate(ue, clustering);
        let acc = &accums[ue];
        let mean_own = acc.sum_own / nr;
        let ds_emp = mean_own.norm_sqr();
        let bu_emp = acc.sum_sq_intra[t] / nr - ds_emp;
        let mut ici_emp = 0.0;
        let mut rici_emp = 0.0;
        for (j, _) in clustering.clusters[l].iter().enumerate() {
            if j == t {
                continue;
            }
            let mean_sq = acc.sum_sq_intra[j] / nr;
            if j < t {
                ici_emp += mean_sq;
            } else {
                rici_emp += config.sic_coeff[ue] * mean_sq;
            }
        }
        let ui_emp: f64 = acc.sum_sq_inter.iter().map(|s| s / nr).sum();

        // Closed forms, via the estimation statistics the formulas define.
        let (gamma, _) = crate::model::estimation_stats(beta, clustering, config)?;
        let cf = sse::sinr_cf(l, t, t, rho, &gamma, beta, clustering, config)?;
        let sinr_emp = ds_emp / (bu_emp + ici_emp + rici_emp + ui_emp + 1.0);
        let se_emp = config.prelog() * (1.0 + sinr_emp).log2();
        let se_cf = config.prelog() * (1.0 + cf.sinr).log2();
        per_user.push(TermErrors {
            ue,
            ds: rel_err(ds_emp, cf.ds),
            bu: rel_err(bu_emp, cf.bu),
            ici: rel_err(ici_emp, cf.ici),
            rici: rel_err(rici_emp, cf.rici),
            ui: rel_err(ui_emp, cf.ui),
            se: rel_err(se_emp, se_cf),
        });
    }
    Ok(McVerifyReport {
        per_user,
        resamples,
        max_fpzf_cross: max_cross,
    })
}

fn locate(ue: usize, clustering: &Clustering) -> (usize, usize) {
    for (l, members) in clustering.clusters.iter().enumerate() {
        if let Some(pos) = members.iter().position(|&u| u == ue) {
            return (l, pos);
        }
    }
    unreachable!("partition checked on entry");
}

struct Realization {
    /// `p[m][n][l] = h[m][n]^H w[m][l]`.
    p: Vec<Vec<Vec<Complex64>>>,
    max_cross: f64,
}

fn cn01<R: Rng>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * std::f64::consts::FRAC_1_SQRT_2, im * std::f64::consts::FRAC_1_SQRT_2)
}

/// One small-scale realization across all APs, or `None` when a pilot Gram
/// matrix fails the conditioning check and the caller should redraw.
fn draw_realization<R: Rng>(
    config: &SystemConfig,
    beta: &DMatrix<f64>,
    clustering: &Clustering,
    norm_scale: &[Vec<f64>],
    rng: &mut R,
) -> Option<Realization> {
    let m_aps = config.num_aps;
    let n_ues = config.num_ues;
    let k = config.num_antennas;
    let tau_p = config.pilot_len;
    let num_clusters = clustering.num_clusters();
    let tau_pf = tau_p as f64;

    let mut p = vec![vec![vec![Complex64::new(0.0, 0.0); num_clusters]; n_ues]; m_aps];
    let mut max_cross: f64 = 0.0;

    for m in 0..m_aps {
        // Channels h[m][n] = sqrt(beta) hbar, hbar ~ CN(0, I_K).
        let h: Vec<DVector<Complex64>> = (0..n_ues)
            .map(|n| {
                let b = beta[(m, n)].sqrt();
                DVector::from_fn(k, |_, _| cn01(rng) * b)
            })
            .collect();
        // Pilot projection per cluster: tau_p * sum sqrt(rho_ul) h + sqrt(tau_p) noise.
        let mut ht = DMatrix::<Complex64>::zeros(k, tau_p);
        for (l, members) in clustering.clusters.iter().enumerate() {
            let mut col = DVector::<Complex64>::zeros(k);
            for &n in members {
                let w = config.ul_pilot_power[n].sqrt() * tau_pf;
                col += &h[n] * Complex64::new(w, 0.0);
            }
            for r in 0..k {
                col[r] += cn01(rng) * tau_pf.sqrt();
            }
            ht.set_column(l, &col);
        }
        // Unused pilot slots still carry noise; they never enter the
        // zero-forcing directions of active clusters but keep the Gram
        // matrix full rank.
        for l in num_clusters..tau_p {
            let col = DVector::from_fn(k, |_, _| cn01(rng) * tau_pf.sqrt());
            ht.set_column(l, &col);
        }

        let gram = ht.adjoint() * &ht;
        let chol = nalgebra::Cholesky::new(gram)?;
        // Cheap condition estimate from the Cholesky diagonal.
        let diag: Vec<f64> = (0..tau_p).map(|i| chol.l()[(i, i)].norm()).collect();
        let dmax = diag.iter().cloned().fold(0.0f64, f64::max);
        let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(dmin > 0.0) || (dmax / dmin).powi(2) > 1e12 {
            return None;
        }
        // Zero-forcing directions: columns of Ht * Gram^{-1}.
        let gram_inv_cols = chol.solve(&DMatrix::<Complex64>::identity(tau_p, tau_p));
        let dirs = &ht * gram_inv_cols;
        for l in 0..num_clusters {
            let w_col = dirs.column(l) * Complex64::new(norm_scale[m][l], 0.0);
            for n in 0..n_ues {
                let mut dotp = Complex64::new(0.0, 0.0);
                for r in 0..k {
                    dotp += h[n][r].conj() * w_col[r];
                }
                p[m][n][l] = dotp;
            }
            // Zero-forcing check: estimates of other clusters are orthogonal
            // to this direction; the estimate is proportional to Ht e_i.
            for i in 0..num_clusters {
                if i == l {
                    continue;
                }
                let mut dotp = Complex64::new(0.0, 0.0);
                for r in 0..k {
                    dotp += ht[(r, i)].conj() * w_col[r];
                }
                // Scale comparable to the estimate norms involved.
                let scale = ht.column(i).norm() * w_col.norm();
                if scale > 0.0 {
                    max_cross = max_cross.max(dotp.norm() / scale);
                }
            }
        }
    }
    Some(Realization { p, max_cross })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{order_within_cluster, Clustering};
    use crate::model::{estimation_stats, generate_topology, large_scale_fading};
    use crate::sse::fixed_pa;

    fn desk_config(m: usize, n: usize, l: usize, k: usize) -> SystemConfig {
        SystemConfig {
            num_aps: m,
            num_ues: n,
            num_antennas: k,
            num_clusters: l,
            pilot_len: l,
            coherence_len: 200,
            sic_coeff: vec![0.05; n],
            ul_pilot_power: vec![10.0; n],
            dl_power_budget: vec![50.0; m],
            radius_km: 1.0,
            shadow_std_db: 8.0,
            ref_dist_km: (0.01, 0.05),
            min_dist_km: 0.001,
        }
    }

    /// Build a clustered, ordered instance on normalized fading so MC scales
    /// stay O(1) in the test.
    fn instance(
        cfg: &SystemConfig,
        seed: u64,
        lists: Vec<Vec<usize>>,
    ) -> (DMatrix<f64>, Clustering, PowerAllocation) {
        let topo = generate_topology(cfg, seed);
        let mut beta = large_scale_fading(&topo, cfg, seed).unwrap();
        // Normalize so products rho*beta stay near unity.
        let mean = beta.iter().sum::<f64>() / beta.len() as f64;
        beta /= mean;
        let clustering = Clustering::from_clusters(lists, cfg.num_ues).unwrap();
        let (gamma, _) = estimation_stats(&beta, &clustering, cfg).unwrap();
        let clustering = order_within_cluster(&gamma, &clustering).unwrap();
        let (gamma, _) = estimation_stats(&beta, &clustering, cfg).unwrap();
        let rho = fixed_pa(&gamma, &clustering, cfg, 1.0).unwrap();
        (beta, clustering, rho)
    }

    #[test]
    fn fpzf_orthogonality_is_exact_per_realization() {
        let cfg = desk_config(2, 4, 2, 6);
        let (beta, clustering, rho) = instance(&cfg, 3, vec![vec![0, 1], vec![2, 3]]);
        let mc = McOracleConfig {
            num_realizations: 50,
            seed: 1,
            tolerance: 0.03,
        };
        let report = mc_verify(&cfg, &beta, &clustering, &rho, &mc).unwrap();
        assert!(
            report.max_fpzf_cross < 1e-9,
            "cross-cluster gain should vanish, got {}",
            report.max_fpzf_cross
        );
    }

    #[test]
    fn singleton_clusters_have_no_intra_terms() {
        let cfg = desk_config(3, 3, 3, 6);
        let (beta, clustering, rho) = instance(&cfg, 7, vec![vec![0], vec![1], vec![2]]);
        let mc = McOracleConfig {
            num_realizations: 400,
            seed: 2,
            tolerance: 0.03,
        };
        let report = mc_verify(&cfg, &beta, &clustering, &rho, &mc).unwrap();
        for t in &report.per_user {
            assert_eq!(t.ici, 0.0, "no co-members, ICI must be structurally zero");
            assert_eq!(t.rici, 0.0);
        }
    }

    #[test]
    fn desk_scale_terms_match_closed_forms() {
        let cfg = desk_config(4, 4, 2, 6);
        let (beta, clustering, rho) = instance(&cfg, 11, vec![vec![0, 1], vec![2, 3]]);
        let mc = McOracleConfig {
            num_realizations: 4000,
            seed: 3,
            tolerance: 0.05,
        };
        let report = mc_verify(&cfg, &beta, &clustering, &rho, &mc).unwrap();
        assert!(
            report.worst_term_error() < 0.05,
            "terms off by {:.3}",
            report.worst_term_error()
        );
        assert!(report.worst_se_error() < 0.05);
    }
}
