//! Sum-SE maximization by successive inner approximation.
//!
//! The nonconvex rate-maximization is attacked iteratively: around the
//! current point the SINR targets are replaced by concave surrogates
//! (quadratic-over-linear linearizations plus a hyperbolic bound on
//! `ln(1+phi)`), the resulting second-order cone program is solved by the
//! embedded interior-point method, and the expansion point moves to the
//! optimizer. Surrogates are tight at the expansion point, so the objective
//! sequence is non-decreasing and converges to a KKT point.
//!
//! Power variables enter through their square roots (`rho = rho_hat^2`) and
//! are scaled by the per-AP budget inside the builder so the solver sees
//! O(1) data regardless of the physical noise normalization.

use nalgebra::DMatrix;

use crate::clustering::Clustering;
use crate::error::{Error, Result};
use crate::model::SystemConfig;
use crate::sse::{self, eta_coeff, PowerAllocation};
use socp::{ConicProgram, SolveStatus, SparseRow};

const PHI_FLOOR: f64 = 1e-12;

/// Expansion point for one inner-approximation iteration.
///
/// `varpi[l][t][e]` and `theta[l][t][e]` are triangular (`e <= t`) per
/// cluster; `tau[l][t][e]` carries the interference slacks for strict pairs
/// (`e < t`, cell-free only). `phi` is per UE. All values describe the
/// current square-root power point `rho_hat`.
#[derive(Debug, Clone)]
pub struct SurrogatePoint {
    pub rho_hat: DMatrix<f64>,
    pub phi: Vec<f64>,
    pub varpi: Vec<Vec<Vec<f64>>>,
    pub theta: Vec<Vec<Vec<f64>>>,
    pub tau: Vec<Vec<Vec<f64>>>,
}

/// Data for one optimization run.
pub enum IaData<'a> {
    CellFree {
        gamma: &'a DMatrix<f64>,
        beta: &'a DMatrix<f64>,
    },
    Collocated {
        gamma: &'a [f64],
        beta: &'a [f64],
    },
}

#[derive(Debug, Clone)]
pub struct IaOptions {
    /// Relative objective improvement threshold.
    pub epsilon: f64,
    pub max_outer: usize,
    /// Fractional-allocation exponent used for the starting point.
    pub alpha: f64,
    /// Optional seed for randomized starting shares.
    pub randomize: Option<u64>,
    pub solver_tol: f64,
}

impl Default for IaOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_outer: 30,
            alpha: 1.0,
            randomize: None,
            solver_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IaStatus {
    Converged,
    MaxOuter,
    /// A later subproblem failed; the best solution so far is returned.
    Degraded,
}

/// Objective trace of one run; non-decreasing within solver tolerance.
#[derive(Debug, Clone)]
pub struct IaHistory {
    /// `prelog * sum(r)` after each outer iteration, bits/s/Hz.
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub status: IaStatus,
    pub message: String,
}

impl IaHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,objective\n");
        for (i, obj) in self.objectives.iter().enumerate() {
            out.push_str(&format!("{},{:.12}\n", i + 1, obj));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Variable layout
// ---------------------------------------------------------------------------

/// Flat variable indexing shared by the builders and the outer loop.
///
/// Solver variables are normalized at the expansion point: every emitted
/// coefficient is multiplied by the variable's physical scale (budget root
/// for powers, expansion value for slacks), so the interior-point method
/// sees O(1) data and an O(1) starting neighborhood regardless of the noise
/// normalization of the inputs.
pub struct VarMap {
    num_aps: usize,
    num_ues: usize,
    collocated: bool,
    /// `(cluster, target_pos, eval_pos)` per strict pair, in emission order.
    pairs: Vec<(usize, usize, usize)>,
    /// Physical scale per solver variable.
    var_scale: Vec<f64>,
}

impl VarMap {
    fn new(
        config: &SystemConfig,
        clustering: &Clustering,
        point: &SurrogatePoint,
        collocated: bool,
    ) -> Self {
        let num_aps = if collocated { 1 } else { config.num_aps };
        let mut pairs = Vec::new();
        for (l, members) in clustering.clusters.iter().enumerate() {
            for t in 1..members.len() {
                for e in 0..t {
                    pairs.push((l, t, e));
                }
            }
        }
        let mut map = Self {
            num_aps,
            num_ues: config.num_ues,
            collocated,
            pairs,
            var_scale: Vec::new(),
        };
        let mut scale = vec![1.0; map.num_vars()];
        let budgets: Vec<f64> = if collocated {
            vec![config.dl_power_budget.iter().sum::<f64>()]
        } else {
            config.dl_power_budget.clone()
        };
        for m in 0..num_aps {
            let s = budgets[m].sqrt();
            for n in 0..map.num_ues {
                scale[map.rho(m, n)] = if s > 0.0 { s } else { 1.0 };
            }
        }
        for n in 0..map.num_ues {
            let pk = point.phi[n].max(PHI_FLOOR);
            if pk > PHI_FLOOR {
                scale[map.phi(n)] = pk;
                scale[map.phibar(n)] = 1.0 / pk;
            }
        }
        for (pid, &(l, t, e)) in map.pairs.iter().enumerate() {
            let w = point.varpi[l][t][e].max(1e-9);
            let th = point.theta[l][t][e].max(1.0);
            if !collocated {
                scale[map.varpi(pid)] = w;
                scale[map.tau(pid)] = w;
                scale[map.theta(pid)] = th;
            } else {
                scale[map.theta_co(pid)] = th;
            }
        }
        map.var_scale = scale;
        map
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Cell-free: (rho, r, phi, phibar) plus three slack families on strict
    /// pairs. Collocated drops varpi and tau.
    pub fn num_vars(&self) -> usize {
        if self.collocated {
            self.num_ues + 3 * self.num_ues + self.pairs.len()
        } else {
            self.num_aps * self.num_ues + 3 * self.num_ues + 3 * self.pairs.len()
        }
    }

    fn rho(&self, m: usize, ue: usize) -> usize {
        m * self.num_ues + ue
    }
    fn r(&self, ue: usize) -> usize {
        self.num_aps * self.num_ues + ue
    }
    fn phi(&self, ue: usize) -> usize {
        self.num_aps * self.num_ues + self.num_ues + ue
    }
    fn phibar(&self, ue: usize) -> usize {
        self.num_aps * self.num_ues + 2 * self.num_ues + ue
    }
    fn slack_base(&self) -> usize {
        self.num_aps * self.num_ues + 3 * self.num_ues
    }
    fn varpi(&self, pid: usize) -> usize {
        self.slack_base() + pid
    }
    fn theta(&self, pid: usize) -> usize {
        self.slack_base() + self.pairs.len() + pid
    }
    fn tau(&self, pid: usize) -> usize {
        self.slack_base() + 2 * self.pairs.len() + pid
    }
    /// Collocated layout: theta directly after (rho, r, phi, phibar).
    fn theta_co(&self, pid: usize) -> usize {
        self.num_ues + 3 * self.num_ues + pid
    }

    fn pair_id(&self, cluster: usize, target_pos: usize, eval_pos: usize) -> Option<usize> {
        self.pairs
            .iter()
            .position(|&(l, t, e)| l == cluster && t == target_pos && e == eval_pos)
    }

    /// Fold the per-variable scales into the emitted coefficients.
    fn apply_scaling(&self, prog: &mut ConicProgram) {
        let scale = &self.var_scale;
        let mut obj = prog.objective().to_vec();
        for (j, v) in obj.iter_mut().enumerate() {
            *v *= scale[j];
        }
        prog.set_objective(obj);
        for lc in prog.linear.iter_mut() {
            for (j, v) in lc.terms.iter_mut() {
                *v *= scale[*j];
            }
        }
        for soc in prog.socs.iter_mut() {
            for (row, _) in soc.norm_rows.iter_mut() {
                for (j, v) in row.iter_mut() {
                    *v *= scale[*j];
                }
            }
            for (j, v) in soc.bound.0.iter_mut() {
                *v *= scale[*j];
            }
        }
    }

    /// Solution vector back in physical units.
    fn unscale(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.var_scale).map(|(v, s)| v * s).collect()
    }

    /// Recover physical square-root powers from a physical-units vector.
    fn extract_rho_hat(&self, x_phys: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_aps, self.num_ues, |m, n| x_phys[self.rho(m, n)])
    }
}

// ---------------------------------------------------------------------------
// Shared expressions
// ---------------------------------------------------------------------------

/// Coherent-gain value `sum_m rho_hat[m][u_t] sqrt(gamma[m][u_e])`.
fn ds_value(
    rho_hat: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    members: &[usize],
    target_pos: usize,
    eval_pos: usize,
) -> f64 {
    let target = members[target_pos];
    let eval = members[eval_pos];
    (0..rho_hat.nrows())
        .map(|m| rho_hat[(m, target)] * gamma[(m, eval)].sqrt())
        .sum()
}

/// Interference value at a point, with interference slacks tight.
fn interference_value(
    rho_hat: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    clustering: &Clustering,
    config: &SystemConfig,
    cluster: usize,
    target_pos: usize,
    eval_pos: usize,
) -> f64 {
    let members = &clustering.clusters[cluster];
    let eval = members[eval_pos];
    let target = members[target_pos];
    let kf = (config.num_antennas - config.pilot_len) as f64;
    let zeta = config.sic_coeff[target];
    let mut total = 0.0;
    for (j, _) in members.iter().enumerate() {
        if j == target_pos {
            continue;
        }
        let eta = eta_coeff(cluster, j, cluster, target_pos, zeta);
        let v = ds_value(rho_hat, gamma, members, j, eval_pos);
        total += eta * kf * v * v;
    }
    for (lp, others) in clustering.clusters.iter().enumerate() {
        for (j, &other) in others.iter().enumerate() {
            let eta = eta_coeff(lp, j, cluster, target_pos, zeta);
            for m in 0..rho_hat.nrows() {
                total += eta
                    * rho_hat[(m, other)]
                    * rho_hat[(m, other)]
                    * (beta[(m, eval)] - gamma[(m, eval)]);
            }
        }
    }
    total
}

/// SOC rows for `sum_i w_i (affine_i)^2 <= bound_affine + bound_const`,
/// encoded as `|| (2 sqrt(w_i) affine_i ; bound - 1) || <= bound + 1`.
fn add_quadratic_le(
    prog: &mut ConicProgram,
    quad: Vec<(f64, SparseRow)>,
    bound: SparseRow,
    bound_const: f64,
) {
    let mut norm_rows: Vec<(SparseRow, f64)> = Vec::with_capacity(quad.len() + 1);
    for (w, row) in quad {
        if w == 0.0 {
            continue;
        }
        let c = 2.0 * w.sqrt();
        norm_rows.push((row.iter().map(|&(i, v)| (i, c * v)).collect(), 0.0));
    }
    norm_rows.push((bound.clone(), bound_const - 1.0));
    prog.add_soc(norm_rows, (bound, bound_const + 1.0));
}

// ---------------------------------------------------------------------------
// Cell-free subproblem
// ---------------------------------------------------------------------------

fn validate_point_cf(
    point: &SurrogatePoint,
    gamma: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    clustering: &Clustering,
    config: &SystemConfig,
) -> Result<()> {
    let rtol = 1e-6;
    for (l, members) in clustering.clusters.iter().enumerate() {
        for t in 0..members.len() {
            for e in 0..=t {
                let w = point.varpi[l][t][e];
                let th = point.theta[l][t][e];
                if !w.is_finite() || !th.is_finite() || w < 0.0 || th < 0.0 {
                    return Err(Error::InvalidPoint(format!(
                        "nonfinite or negative slack at cluster {l}, pair ({t},{e})"
                    )));
                }
                let ds = ds_value(&point.rho_hat, gamma, members, t, e);
                if w > ds * (1.0 + rtol) + 1e-9 {
                    return Err(Error::InvalidPoint(format!(
                        "varpi {w} exceeds coherent gain {ds} at cluster {l} pair ({t},{e})"
                    )));
                }
                let iv = interference_value(
                    &point.rho_hat,
                    gamma,
                    beta,
                    clustering,
                    config,
                    l,
                    t,
                    e,
                );
                if iv > th * (1.0 + rtol) + 1e-9 {
                    return Err(Error::InvalidPoint(format!(
                        "theta {th} below interference {iv} at cluster {l} pair ({t},{e})"
                    )));
                }
            }
        }
    }
    for (n, &phi) in point.phi.iter().enumerate() {
        if !phi.is_finite() || phi < 0.0 {
            return Err(Error::InvalidPoint(format!("bad phi for UE {n}")));
        }
    }
    Ok(())
}

/// Build the cell-free conic subproblem around an expansion point.
pub fn build_cf_subproblem(
    point: &SurrogatePoint,
    gamma: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    clustering: &Clustering,
    config: &SystemConfig,
) -> Result<(ConicProgram, VarMap)> {
    if config.num_antennas <= config.pilot_len {
        return Err(Error::InvalidConfig("need K > tau_p".into()));
    }
    validate_point_cf(point, gamma, beta, clustering, config)?;
    let map = VarMap::new(config, clustering, point, false);
    let kf = (config.num_antennas - config.pilot_len) as f64;
    let mut prog = ConicProgram::new(map.num_vars());

    // Maximize prelog * sum r  ==  minimize the negation.
    let mut obj = vec![0.0; map.num_vars()];
    for n in 0..config.num_ues {
        obj[map.r(n)] = -config.prelog();
    }
    prog.set_objective(obj);

    // Coherent-gain row for (target, evaluator) within a cluster.
    let ds_row = |members: &[usize], t: usize, e: usize| -> SparseRow {
        let eval = members[e];
        (0..config.num_aps)
            .map(|m| (map.rho(m, members[t]), gamma[(m, eval)].sqrt()))
            .collect()
    };

    // Quadratic interference terms for (target t, evaluator e): strict-pair
    // slacks where they exist, inline affine gains otherwise, plus the
    // scatter terms over every transmitted power.
    let interference_quad = |l: usize, t: usize, e: usize| -> Vec<(f64, SparseRow)> {
        let members = &clustering.clusters[l];
        let target = members[t];
        let zeta = config.sic_coeff[target];
        let mut quad: Vec<(f64, SparseRow)> = Vec::new();
        for j in 0..members.len() {
            if j == t {
                continue;
            }
            let eta = eta_coeff(l, j, l, t, zeta);
            let row = if j > e {
                let pid = map.pair_id(l, j, e).expect("strict pair exists");
                vec![(map.tau(pid), 1.0)]
            } else {
                ds_row(members, j, e)
            };
            quad.push((eta * kf, row));
        }
        let eval = members[e];
        for (lp, others) in clustering.clusters.iter().enumerate() {
            for (j, &other) in others.iter().enumerate() {
                let eta = eta_coeff(lp, j, l, t, zeta);
                for m in 0..config.num_aps {
                    let w = eta * (beta[(m, eval)] - gamma[(m, eval)]).max(0.0);
                    quad.push((w, vec![(map.rho(m, other), 1.0)]));
                }
            }
        }
        quad
    };

    // Strict pairs: slack definitions, interference bound, linearized ratio.
    for (pid, &(l, t, e)) in map.pairs.iter().enumerate() {
        let members = &clustering.clusters[l];
        let target = members[t];
        let row = ds_row(members, t, e);
        // varpi <= coherent gain
        let mut ge_row = row.clone();
        ge_row.push((map.varpi(pid), -1.0));
        prog.add_ge(ge_row, 0.0);
        // tau >= the same gain (same physical quantity as interference)
        let mut le_row = row;
        le_row.push((map.tau(pid), -1.0));
        prog.add_le(le_row, 0.0);
        // varpi >= 0 keeps the squared lower bound one-sided.
        prog.add_ge(vec![(map.varpi(pid), 1.0)], 0.0);
        // Interference <= theta.
        add_quadratic_le(
            &mut prog,
            interference_quad(l, t, e),
            vec![(map.theta(pid), 1.0)],
            0.0,
        );
        // Linearized quadratic-over-linear ratio >= phi.
        let w_k = point.varpi[l][t][e];
        let th_k = point.theta[l][t][e];
        let a = kf * 2.0 * w_k / (th_k + 1.0);
        let b = kf * w_k * w_k / ((th_k + 1.0) * (th_k + 1.0));
        prog.add_ge(
            vec![
                (map.varpi(pid), a),
                (map.theta(pid), -b),
                (map.phi(target), -1.0),
            ],
            b,
        );
    }

    // Diagonal (self-decoding) surrogate with the slacks substituted.
    for (l, members) in clustering.clusters.iter().enumerate() {
        for t in 0..members.len() {
            let target = members[t];
            let w_k = point.varpi[l][t][t];
            let th_k = point.theta[l][t][t];
            let a = kf * 2.0 * w_k / (th_k + 1.0);
            let b = kf * w_k * w_k / ((th_k + 1.0) * (th_k + 1.0));
            // b * (I(rho) + 1) + phi <= a * ds_row
            let mut bound: SparseRow = ds_row(members, t, t)
                .into_iter()
                .map(|(i, v)| (i, a * v))
                .collect();
            bound.push((map.phi(target), -1.0));
            let quad = interference_quad(l, t, t)
                .into_iter()
                .map(|(w, row)| (b * w, row))
                .collect();
            add_quadratic_le(&mut prog, quad, bound, -b);
        }
    }

    // Rate surrogate and hyperbolic bound per UE.
    add_rate_constraints(&mut prog, &map, &point.phi, config, |n| map.phi(n));

    // Power structure: SIC ordering chains, nonnegative heads, budgets.
    for members in &clustering.clusters {
        for m in 0..config.num_aps {
            prog.add_ge(vec![(map.rho(m, members[0]), 1.0)], 0.0);
            for w in members.windows(2) {
                prog.add_le(vec![(map.rho(m, w[0]), 1.0), (map.rho(m, w[1]), -1.0)], 0.0);
            }
        }
    }
    for m in 0..config.num_aps {
        add_budget(&mut prog, &map, m, config.dl_power_budget[m]);
    }
    map.apply_scaling(&mut prog);

    Ok((prog, map))
}

/// Shared rate-surrogate emission: `F(phibar) >= r ln2` and `phi phibar >= 1`.
///
/// An expansion value of zero (a UE currently receiving nothing) degenerates
/// to `r <= 0` and drops the hyperbolic cone for that UE.
fn add_rate_constraints<F>(
    prog: &mut ConicProgram,
    map: &VarMap,
    phi_k: &[f64],
    config: &SystemConfig,
    phi_index: F,
) where
    F: Fn(usize) -> usize,
{
    let ln2 = std::f64::consts::LN_2;
    for n in 0..config.num_ues {
        let pk = phi_k[n];
        if pk <= PHI_FLOOR {
            prog.add_le(vec![(map.r(n), ln2)], 0.0);
            continue;
        }
        let f_const = (1.0 + pk).ln() + pk / (1.0 + pk);
        let c_phibar = pk * pk / (1.0 + pk);
        prog.add_le(vec![(map.r(n), ln2), (map.phibar(n), c_phibar)], f_const);
        // || (2, phi - phibar) || <= phi + phibar
        prog.add_soc(
            vec![
                (vec![], 2.0),
                (vec![(phi_index(n), 1.0), (map.phibar(n), -1.0)], 0.0),
            ],
            (vec![(phi_index(n), 1.0), (map.phibar(n), 1.0)], 0.0),
        );
    }
}

/// Per-AP (or total) power budget `||rho_hat row|| <= sqrt(P)`; a zero
/// budget degenerates to explicit zero equalities.
fn add_budget(prog: &mut ConicProgram, map: &VarMap, m: usize, budget: f64) {
    if budget == 0.0 {
        for n in 0..map.num_ues {
            prog.add_eq(vec![(map.rho(m, n), 1.0)], 0.0);
        }
        return;
    }
    let rows: Vec<(SparseRow, f64)> = (0..map.num_ues)
        .map(|n| (vec![(map.rho(m, n), 1.0)], 0.0))
        .collect();
    prog.add_soc(rows, (vec![], budget.sqrt()));
}

// ---------------------------------------------------------------------------
// Collocated subproblem
// ---------------------------------------------------------------------------

/// Build the collocated conic subproblem. The expansion point carries
/// `rho_hat` (1 x N), `theta` and `phi`; the coherent gain is linear in the
/// single site's `rho_hat`, so no `varpi`/`tau` slacks are needed.
pub fn build_co_subproblem(
    point: &SurrogatePoint,
    gamma_co: &[f64],
    beta_co: &[f64],
    clustering: &Clustering,
    config: &SystemConfig,
) -> Result<(ConicProgram, VarMap)> {
    if config.num_antennas <= config.pilot_len {
        return Err(Error::InvalidConfig("need K > tau_p".into()));
    }
    if point.rho_hat.nrows() != 1 {
        return Err(Error::InvalidPoint("collocated point must be 1 x N".into()));
    }
    let map = VarMap::new(config, clustering, point, true);
    let kf = (config.num_antennas - config.pilot_len) as f64;
    let mut prog = ConicProgram::new(map.num_vars());
    let mut obj = vec![0.0; map.num_vars()];
    for n in 0..config.num_ues {
        obj[map.r(n)] = -config.prelog();
    }
    prog.set_objective(obj);

    let interference_quad = |l: usize, t: usize, e: usize| -> Vec<(f64, SparseRow)> {
        let members = &clustering.clusters[l];
        let target = members[t];
        let eval = members[e];
        let zeta = config.sic_coeff[target];
        let mut quad = Vec::new();
        for (j, &ue) in members.iter().enumerate() {
            if j == t {
                continue;
            }
            let eta = eta_coeff(l, j, l, t, zeta);
            quad.push((eta * kf * gamma_co[eval], vec![(map.rho(0, ue), 1.0)]));
        }
        for (lp, others) in clustering.clusters.iter().enumerate() {
            for (j, &ue) in others.iter().enumerate() {
                let eta = eta_coeff(lp, j, l, t, zeta);
                quad.push((
                    eta * (beta_co[eval] - gamma_co[eval]).max(0.0),
                    vec![(map.rho(0, ue), 1.0)],
                ));
            }
        }
        quad
    };

    for (pid, &(l, t, e)) in map.pairs.iter().enumerate() {
        let members = &clustering.clusters[l];
        let target = members[t];
        let eval = members[e];
        add_quadratic_le(
            &mut prog,
            interference_quad(l, t, e),
            vec![(map.theta_co(pid), 1.0)],
            0.0,
        );
        // Linearized (K - tau_p) gamma_e rho_t^2 / (theta + 1) >= phi.
        let rk = point.rho_hat[(0, target)];
        let th_k = point.theta[l][t][e];
        let g = kf * gamma_co[eval];
        let a = g * 2.0 * rk / (th_k + 1.0);
        let b = g * rk * rk / ((th_k + 1.0) * (th_k + 1.0));
        prog.add_ge(
            vec![
                (map.rho(0, target), a),
                (map.theta_co(pid), -b),
                (map.phi(target), -1.0),
            ],
            b,
        );
    }

    for (l, members) in clustering.clusters.iter().enumerate() {
        for t in 0..members.len() {
            let target = members[t];
            let rk = point.rho_hat[(0, target)];
            let th_k = point.theta[l][t][t];
            let g = kf * gamma_co[target];
            let a = g * 2.0 * rk / (th_k + 1.0);
            let b = g * rk * rk / ((th_k + 1.0) * (th_k + 1.0));
            let bound: SparseRow = vec![(map.rho(0, target), a), (map.phi(target), -1.0)];
            let quad = interference_quad(l, t, t)
                .into_iter()
                .map(|(w, row)| (b * w, row))
                .collect();
            add_quadratic_le(&mut prog, quad, bound, -b);
        }
    }

    add_rate_constraints(&mut prog, &map, &point.phi, config, |n| map.phi(n));

    for members in &clustering.clusters {
        prog.add_ge(vec![(map.rho(0, members[0]), 1.0)], 0.0);
        for w in members.windows(2) {
            prog.add_le(vec![(map.rho(0, w[0]), 1.0), (map.rho(0, w[1]), -1.0)], 0.0);
        }
    }
    add_budget(&mut prog, &map, 0, config.dl_power_budget.iter().sum());
    map.apply_scaling(&mut prog);

    Ok((prog, map))
}

// ---------------------------------------------------------------------------
// Initial point and the outer loop
// ---------------------------------------------------------------------------

/// Deterministic starting point: fractional fixed allocation scaled to 90%
/// of the budget, with every slack set to its tight value. The point is
/// feasible for the first subproblem by construction. With `randomize`, the
/// per-cluster power shares are jittered before scaling (the within-cluster
/// fractions, and hence SIC ordering, are preserved).
pub fn initial_point(
    config: &SystemConfig,
    data: &IaData,
    clustering: &Clustering,
    opts: &IaOptions,
) -> Result<SurrogatePoint> {
    let (gamma_mat, beta_mat) = data_matrices(data);
    let rho0 = match data {
        IaData::CellFree { gamma, .. } => {
            sse::fixed_pa(gamma, clustering, config, opts.alpha)?
                .as_cell_free()?
                .clone()
        }
        IaData::Collocated { gamma, .. } => {
            let total = config.dl_power_budget.iter().sum();
            let v = sse::fixed_pa_co(gamma, clustering, total, opts.alpha)?;
            DMatrix::from_row_slice(1, config.num_ues, v.as_collocated()?)
        }
    };
    let mut rho0 = rho0 * 0.9;
    if let Some(seed) = opts.randomize {
        use rand::Rng;
        let mut rng = crate::seeds::stream(seed, 0x1a);
        for members in &clustering.clusters {
            let f: f64 = rng.random_range(0.5..1.0);
            for &ue in members {
                for m in 0..rho0.nrows() {
                    rho0[(m, ue)] *= f;
                }
            }
        }
    }
    let rho_hat = rho0.map(|v| v.sqrt());
    Ok(point_at(
        &rho_hat,
        &gamma_mat,
        &beta_mat,
        clustering,
        config,
    ))
}

fn data_matrices(data: &IaData) -> (DMatrix<f64>, DMatrix<f64>) {
    match data {
        IaData::CellFree { gamma, beta } => ((*gamma).clone(), (*beta).clone()),
        IaData::Collocated { gamma, beta } => (
            DMatrix::from_row_slice(1, gamma.len(), gamma),
            DMatrix::from_row_slice(1, beta.len(), beta),
        ),
    }
}

/// Tight slack values at a square-root power point.
fn point_at(
    rho_hat: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    clustering: &Clustering,
    config: &SystemConfig,
) -> SurrogatePoint {
    let kf = (config.num_antennas - config.pilot_len) as f64;
    let mut varpi = Vec::new();
    let mut theta = Vec::new();
    let mut tau = Vec::new();
    let mut phi = vec![0.0; config.num_ues];
    for (l, members) in clustering.clusters.iter().enumerate() {
        let mut v_c = Vec::new();
        let mut t_c = Vec::new();
        let mut tau_c = Vec::new();
        for t in 0..members.len() {
            let mut v_row = Vec::new();
            let mut t_row = Vec::new();
            let mut tau_row = Vec::new();
            for e in 0..=t {
                let w = ds_value(rho_hat, gamma, members, t, e);
                let iv =
                    interference_value(rho_hat, gamma, beta, clustering, config, l, t, e);
                v_row.push(w);
                t_row.push(iv);
                if e < t {
                    // tau at pair (t, e) bounds the gain of interferer t at
                    // evaluator e, which is the same quantity.
                    tau_row.push(w);
                }
                let sinr = kf * w * w / (iv + 1.0);
                let ue = members[t];
                if e == 0 {
                    phi[ue] = sinr;
                } else {
                    phi[ue] = phi[ue].min(sinr);
                }
            }
            v_c.push(v_row);
            t_c.push(t_row);
            tau_c.push(tau_row);
        }
        varpi.push(v_c);
        theta.push(t_c);
        tau.push(tau_c);
    }
    SurrogatePoint {
        rho_hat: rho_hat.clone(),
        phi,
        varpi,
        theta,
        tau,
    }
}

/// Run the inner-approximation loop to convergence.
///
/// Returns the optimized powers (squared, clamped, budget-exact) and the
/// objective history. A first-iteration subproblem failure is an
/// initialization error; later failures return the best point found with a
/// `Degraded` status.
pub fn ia_maximize(
    config: &SystemConfig,
    data: &IaData,
    clustering: &Clustering,
    opts: &IaOptions,
) -> Result<(PowerAllocation, IaHistory)> {
    if opts.epsilon <= 0.0 {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    let (gamma_mat, beta_mat) = data_matrices(data);
    let collocated = matches!(data, IaData::Collocated { .. });
    let mut point = initial_point(config, data, clustering, opts)?;
    let mut objectives = Vec::new();
    let mut status = IaStatus::MaxOuter;
    let mut message = String::new();

    for outer in 0..opts.max_outer {
        let (prog, map) = if collocated {
            // A 1 x N matrix is stored contiguously, so the slice is the row.
            build_co_subproblem(
                &point,
                gamma_mat.as_slice(),
                beta_mat.as_slice(),
                clustering,
                config,
            )?
        } else {
            build_cf_subproblem(&point, &gamma_mat, &beta_mat, clustering, config)?
        };
        let sol = socp::solve_conic(&prog, opts.solver_tol)?;
        match sol.status {
            SolveStatus::Optimal => {}
            // The outer loop only needs the subproblem solved to well below
            // its own stopping tolerance; accept stalled-but-accurate
            // iterates instead of aborting the run.
            SolveStatus::MaxIters if sol.merit() <= 1e-6 => {}
            SolveStatus::Infeasible => {
                if outer == 0 {
                    return Err(Error::Initialization(
                        "first subproblem reported infeasible".into(),
                    ));
                }
                status = IaStatus::Degraded;
                message = format!("subproblem {outer} infeasible: {}", sol.message);
                break;
            }
            SolveStatus::MaxIters => {
                if outer == 0 {
                    return Err(Error::Initialization(format!(
                        "first subproblem did not solve: {}",
                        sol.message
                    )));
                }
                status = IaStatus::Degraded;
                message = format!("subproblem {outer} stalled: {}", sol.message);
                break;
            }
        }
        let objective = -sol.objective_value;
        objectives.push(objective);

        // Move the expansion point to the optimizer: take (phi, varpi,
        // theta) from the solution, recompute the substituted self-decoding
        // slacks tight at the new powers.
        let x_phys = map.unscale(&sol.x);
        let rho_hat_new = map.extract_rho_hat(&x_phys);
        let mut next = point_at(&rho_hat_new, &gamma_mat, &beta_mat, clustering, config);
        for n in 0..config.num_ues {
            next.phi[n] = x_phys[map.phi(n)].max(0.0);
        }
        if !collocated {
            for (pid, &(l, t, e)) in map.pairs.iter().enumerate() {
                next.varpi[l][t][e] = x_phys[map.varpi(pid)].max(0.0);
                next.theta[l][t][e] = x_phys[map.theta(pid)].max(0.0);
            }
        } else {
            for (pid, &(l, t, e)) in map.pairs.iter().enumerate() {
                next.theta[l][t][e] = x_phys[map.theta_co(pid)].max(0.0);
            }
        }
        point = next;

        if objectives.len() >= 2 {
            let prev = objectives[objectives.len() - 2];
            let rel = (objective - prev) / prev.abs().max(1e-12);
            if rel < opts.epsilon {
                status = IaStatus::Converged;
                break;
            }
        }
    }

    let iterations = objectives.len();
    let rho = finalize_rho(&point.rho_hat, clustering, config, collocated)?;
    Ok((
        rho,
        IaHistory {
            objectives,
            iterations,
            status,
            message,
        },
    ))
}

/// Square the final point and repair floating-point dust: clamp tiny
/// negatives, restore exact within-cluster monotonicity, rescale any AP a
/// hair over budget.
fn finalize_rho(
    rho_hat: &DMatrix<f64>,
    clustering: &Clustering,
    config: &SystemConfig,
    collocated: bool,
) -> Result<PowerAllocation> {
    let mut rho = rho_hat.map(|v| {
        let sq = v * v * v.signum();
        if sq < 0.0 {
            debug_assert!(sq > -1e-10, "materially negative power {sq}");
            0.0
        } else {
            sq
        }
    });
    for members in &clustering.clusters {
        for m in 0..rho.nrows() {
            for w in members.windows(2) {
                if rho[(m, w[1])] < rho[(m, w[0])] {
                    rho[(m, w[1])] = rho[(m, w[0])];
                }
            }
        }
    }
    if collocated {
        let budget: f64 = config.dl_power_budget.iter().sum();
        let total: f64 = rho.iter().sum();
        if total > budget {
            rho *= if total > 0.0 { budget / total } else { 0.0 };
        }
        Ok(PowerAllocation::Collocated(
            rho.row(0).iter().copied().collect(),
        ))
    } else {
        for m in 0..rho.nrows() {
            let total: f64 = rho.row(m).iter().sum();
            let budget = config.dl_power_budget[m];
            if total > budget && total > 0.0 {
                let f = budget / total;
                for n in 0..rho.ncols() {
                    rho[(m, n)] *= f;
                }
            }
        }
        Ok(PowerAllocation::CellFree(rho))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn config(m: usize, n: usize, l: usize, k: usize, p: f64) -> SystemConfig {
        SystemConfig {
            num_aps: m,
            num_ues: n,
            num_antennas: k,
            num_clusters: l,
            pilot_len: l,
            coherence_len: 200,
            sic_coeff: vec![0.05; n],
            ul_pilot_power: vec![1.0; n],
            dl_power_budget: vec![p; m],
            radius_km: 1.0,
            shadow_std_db: 8.0,
            ref_dist_km: (0.01, 0.05),
            min_dist_km: 0.001,
        }
    }

    #[test]
    fn single_ue_subproblem_saturates_budget() {
        // One UE, one AP: the surrogate is maximized by spending the whole
        // budget, rho_hat = sqrt(P).
        let cfg = config(1, 1, 1, 2, 1.0);
        let clustering = Clustering::from_clusters(vec![vec![0]], 1).unwrap();
        let gamma = DMatrix::from_element(1, 1, 0.5);
        let beta = DMatrix::from_element(1, 1, 1.0);
        let data = IaData::CellFree {
            gamma: &gamma,
            beta: &beta,
        };
        let opts = IaOptions::default();
        let point = initial_point(&cfg, &data, &clustering, &opts).unwrap();
        // phi0 equals the closed-form SINR at 0.9 * fixed power.
        let rho0 = DMatrix::from_element(1, 1, 0.9);
        let s = crate::sse::sinr_cf(0, 0, 0, &rho0, &gamma, &beta, &clustering, &cfg)
            .unwrap();
        assert_relative_eq!(point.phi[0], s.sinr, max_relative = 1e-12);

        let (prog, map) = build_cf_subproblem(&point, &gamma, &beta, &clustering, &cfg).unwrap();
        let sol = socp::solve_conic(&prog, 1e-8).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "{}", sol.message);
        let rho_hat = map.extract_rho_hat(&map.unscale(&sol.x));
        assert_relative_eq!(rho_hat[(0, 0)], 1.0, max_relative = 1e-5);
    }

    #[test]
    fn initial_point_is_subproblem_feasible() {
        let cfg = config(3, 4, 2, 5, 2.0);
        let clustering = Clustering::from_clusters(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let gamma = DMatrix::from_fn(3, 4, |m, n| 0.05 + 0.03 * ((m + 2 * n) as f64));
        let beta = gamma.map(|g| 2.0 * g);
        // Decode order must match the gamma norms.
        let clustering = crate::clustering::order_within_cluster(&gamma, &clustering).unwrap();
        let data = IaData::CellFree {
            gamma: &gamma,
            beta: &beta,
        };
        let point = initial_point(&cfg, &data, &clustering, &IaOptions::default()).unwrap();
        assert!(build_cf_subproblem(&point, &gamma, &beta, &clustering, &cfg).is_ok());
        // Randomized variant stays feasible too.
        let opts = IaOptions {
            randomize: Some(5),
            ..IaOptions::default()
        };
        let p2 = initial_point(&cfg, &data, &clustering, &opts).unwrap();
        assert!(build_cf_subproblem(&p2, &gamma, &beta, &clustering, &cfg).is_ok());
        // Deterministic without randomization.
        let p3 = initial_point(&cfg, &data, &clustering, &IaOptions::default()).unwrap();
        assert_eq!(point.rho_hat, p3.rho_hat);
    }

    #[test]
    fn corrupted_point_is_rejected() {
        let cfg = config(1, 2, 1, 3, 1.0);
        let clustering = Clustering::from_clusters(vec![vec![0, 1]], 2).unwrap();
        let gamma = DMatrix::from_element(1, 2, 0.2);
        let beta = DMatrix::from_element(1, 2, 0.5);
        let data = IaData::CellFree {
            gamma: &gamma,
            beta: &beta,
        };
        let mut point = initial_point(&cfg, &data, &clustering, &IaOptions::default()).unwrap();
        point.varpi[0][1][0] *= 100.0; // now exceeds the coherent gain
        assert!(matches!(
            build_cf_subproblem(&point, &gamma, &beta, &clustering, &cfg),
            Err(Error::InvalidPoint(_))
        ));
    }

    #[test]
    fn single_ue_run_converges_to_full_power() {
        let cfg = config(1, 1, 1, 2, 1.0);
        let clustering = Clustering::from_clusters(vec![vec![0]], 1).unwrap();
        let gamma = DMatrix::from_element(1, 1, 0.5);
        let beta = DMatrix::from_element(1, 1, 1.0);
        let data = IaData::CellFree {
            gamma: &gamma,
            beta: &beta,
        };
        let (pa, history) = ia_maximize(&cfg, &data, &clustering, &IaOptions::default()).unwrap();
        let rho = pa.as_cell_free().unwrap();
        assert_relative_eq!(rho[(0, 0)], 1.0, max_relative = 1e-4);
        assert!(history.iterations <= 3, "took {}", history.iterations);
        for w in history.objectives.windows(2) {
            assert!(w[1] >= w[0] - 1e-6);
        }
        // History serializes one line per iteration.
        let csv = history.to_csv();
        assert_eq!(csv.lines().count(), history.iterations + 1);
    }

    #[test]
    fn collocated_zero_budget_yields_zero() {
        let cfg = config(1, 2, 1, 3, 0.0);
        let clustering = Clustering::from_clusters(vec![vec![0, 1]], 2).unwrap();
        let gamma = vec![0.3, 0.2];
        let beta = vec![0.9, 0.8];
        let data = IaData::Collocated {
            gamma: &gamma,
            beta: &beta,
        };
        let (pa, history) = ia_maximize(&cfg, &data, &clustering, &IaOptions::default()).unwrap();
        let rho = pa.as_collocated().unwrap();
        assert!(rho.iter().all(|&v| v == 0.0), "{rho:?}");
        assert!(history.objectives.iter().all(|&o| o.abs() < 1e-6));
    }

    #[test]
    fn cf_one_ap_matches_collocated_subproblem() {
        // With one AP the two builders encode the same mathematical program
        // (the coherent-gain slack collapses onto rho_hat), so a single
        // solve from the matched starting point must agree tightly.
        let n = 4;
        let cfg = config(1, n, 2, 4, 3.0);
        let clustering = Clustering::from_clusters(vec![vec![0, 1], vec![2, 3]], n).unwrap();
        let gamma_v = vec![0.4, 0.25, 0.3, 0.2];
        let beta_v = vec![0.9, 0.7, 0.8, 0.6];
        let gamma = DMatrix::from_row_slice(1, n, &gamma_v);
        let beta = DMatrix::from_row_slice(1, n, &beta_v);
        let clustering = crate::clustering::order_within_cluster(&gamma, &clustering).unwrap();
        let cf = IaData::CellFree {
            gamma: &gamma,
            beta: &beta,
        };
        let co = IaData::Collocated {
            gamma: &gamma_v,
            beta: &beta_v,
        };
        let opts = IaOptions::default();
        let point_cf = initial_point(&cfg, &cf, &clustering, &opts).unwrap();
        let point_co = initial_point(&cfg, &co, &clustering, &opts).unwrap();
        assert_eq!(point_cf.rho_hat, point_co.rho_hat);
        let (prog_cf, _) =
            build_cf_subproblem(&point_cf, &gamma, &beta, &clustering, &cfg).unwrap();
        let (prog_co, _) =
            build_co_subproblem(&point_co, &gamma_v, &beta_v, &clustering, &cfg).unwrap();
        let a = socp::solve_conic(&prog_cf, 1e-8).unwrap();
        let b = socp::solve_conic(&prog_co, 1e-8).unwrap();
        assert_eq!(a.status, SolveStatus::Optimal, "{}", a.message);
        assert_eq!(b.status, SolveStatus::Optimal, "{}", b.message);
        assert_relative_eq!(a.objective_value, b.objective_value, max_relative = 1e-6);

        // Full runs agree to the outer stopping tolerance.
        let (_, hist_cf) = ia_maximize(&cfg, &cf, &clustering, &opts).unwrap();
        let (_, hist_co) = ia_maximize(&cfg, &co, &clustering, &opts).unwrap();
        let a = hist_cf.objectives.last().unwrap();
        let b = hist_co.objectives.last().unwrap();
        assert_relative_eq!(a, b, max_relative = 2.0 * opts.epsilon);
    }

    #[test]
    fn variable_counts_follow_the_layout() {
        let cfg = config(5, 6, 2, 4, 1.0);
        let clustering =
            Clustering::from_clusters(vec![vec![0, 1, 2], vec![3, 4, 5]], 6).unwrap();
        let point = SurrogatePoint {
            rho_hat: DMatrix::zeros(5, 6),
            phi: vec![1.0; 6],
            varpi: vec![vec![vec![1.0; 3]; 3]; 2],
            theta: vec![vec![vec![1.0; 3]; 3]; 2],
            tau: vec![vec![vec![1.0; 3]; 3]; 2],
        };
        let map = VarMap::new(&cfg, &clustering, &point, false);
        // Strict pairs: 3 per cluster of size 3.
        assert_eq!(map.num_pairs(), 6);
        assert_eq!(map.num_vars(), 5 * 6 + 3 * 6 + 3 * 6);
        let co_point = SurrogatePoint {
            rho_hat: DMatrix::zeros(1, 6),
            ..point
        };
        let co = VarMap::new(&cfg, &clustering, &co_point, true);
        assert_eq!(co.num_vars(), 4 * 6 + 6);
    }
}
