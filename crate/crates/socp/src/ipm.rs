//! Homogeneous self-dual interior-point method over the nonnegative orthant
//! and second-order cones.
//!
//! The implementation follows the usual primal-dual recipe: Nesterov-Todd
//! scaling, a Mehrotra predictor-corrector step, and a dense factorization of
//! the reduced KKT system. Problems are converted from [`ConicProgram`] form
//! into the standard embedding
//!
//! ```text
//!   minimize  c'x   s.t.  A x = b,  G x + s = h,  s in K,
//! ```
//!
//! where `K` is a product of one nonnegative block and zero or more
//! second-order cone blocks. The homogeneous embedding carries the extra
//! `(tau, kappa)` pair so primal infeasibility is detected by certificate
//! instead of by iteration timeout.

use nalgebra::{DMatrix, DVector};

use crate::program::{
    ConicProgram, ConicSolution, ProgramError, Sense, SolveStatus, SparseRow,
};

/// Tunables for the interior-point loop.
#[derive(Debug, Clone)]
pub struct IpmSettings {
    /// Absolute duality-gap and feasibility tolerance for an `Optimal` claim.
    pub tol: f64,
    pub max_iters: usize,
    /// Static regularization added to the KKT system.
    pub static_reg: f64,
    /// Fraction-to-boundary factor for combined steps.
    pub step_frac: f64,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 100,
            static_reg: 1e-10,
            step_frac: 0.99,
        }
    }
}

/// Solve a conic program to the given absolute tolerance.
///
/// `Optimal` is only reported when the duality gap, primal residual and dual
/// residual are all below `min(tol, 1e-8)`; anything else comes back as
/// `Infeasible` (with certificate) or `MaxIters` with diagnostics in
/// `message`.
pub fn solve_conic(prog: &ConicProgram, tol: f64) -> Result<ConicSolution, ProgramError> {
    prog.validate()?;
    let settings = IpmSettings {
        tol,
        ..IpmSettings::default()
    };
    let std = StdForm::from_program(prog)?;
    Ok(run_ipm(&std, &settings))
}

// ---------------------------------------------------------------------------
// Standard form
// ---------------------------------------------------------------------------

struct StdForm {
    n: usize,
    p: usize,
    m: usize,
    c: Vec<f64>,
    a_rows: Vec<SparseRow>,
    b: Vec<f64>,
    g_rows: Vec<SparseRow>,
    h: Vec<f64>,
    /// Leading nonnegative-orthant dimension of the cone.
    nonneg: usize,
    /// Dimensions of the trailing second-order cone blocks.
    soc_dims: Vec<usize>,
    /// Column (variable) equilibration scales; `x_original = col_scale * x`.
    col_scale: Vec<f64>,
    /// Original objective, for reporting unscaled values.
    c_original: Vec<f64>,
    /// Objective normalization applied after column scaling.
    obj_scale: f64,
}

impl StdForm {
    fn from_program(prog: &ConicProgram) -> Result<Self, ProgramError> {
        let n = prog.num_vars();
        let mut a_rows = Vec::new();
        let mut b = Vec::new();
        let mut g_rows = Vec::new();
        let mut h = Vec::new();
        for lc in &prog.linear {
            match lc.sense {
                Sense::Eq => {
                    a_rows.push(lc.terms.clone());
                    b.push(lc.rhs);
                }
                Sense::Le => {
                    // s = rhs - terms.x >= 0
                    g_rows.push(lc.terms.clone());
                    h.push(lc.rhs);
                }
            }
        }
        let nonneg = g_rows.len();
        let mut soc_dims = Vec::new();
        for soc in &prog.socs {
            // s0 = d + c'x, s_i = b_i + A_i x; cone rows store -coeff so
            // that s = h - Gx.
            let neg = |row: &SparseRow| -> SparseRow {
                row.iter().map(|&(i, v)| (i, -v)).collect()
            };
            g_rows.push(neg(&soc.bound.0));
            h.push(soc.bound.1);
            for (row, off) in &soc.norm_rows {
                g_rows.push(neg(row));
                h.push(*off);
            }
            soc_dims.push(1 + soc.norm_rows.len());
        }
        let m = g_rows.len();
        if m == 0 {
            return Err(ProgramError::Invalid(
                "program has no inequality or cone constraints".into(),
            ));
        }
        let mut std = Self {
            n,
            p: b.len(),
            m,
            c: prog.objective().to_vec(),
            a_rows,
            b,
            g_rows,
            h,
            nonneg,
            soc_dims,
            col_scale: vec![1.0; n],
            c_original: prog.objective().to_vec(),
            obj_scale: 1.0,
        };
        std.equilibrate();
        Ok(std)
    }

    /// Ruiz equilibration: iteratively scale rows and columns toward unit
    /// infinity norm, with one uniform factor per second-order cone block so
    /// cone membership is preserved, then normalize the objective.
    fn equilibrate(&mut self) {
        let n = self.n;
        for _ in 0..3 {
            // Row scales: individual for orthant and equality rows, shared
            // within each cone block.
            let apply_row = |row: &mut SparseRow, rhs: &mut f64, scale: f64| {
                for (_, v) in row.iter_mut() {
                    *v *= scale;
                }
                *rhs *= scale;
            };
            for i in 0..self.nonneg {
                let m = row_max(&self.g_rows[i]);
                if m > 0.0 {
                    let s = 1.0 / m.sqrt();
                    let mut h = self.h[i];
                    apply_row(&mut self.g_rows[i], &mut h, s);
                    self.h[i] = h;
                }
            }
            let mut off = self.nonneg;
            for &d in &self.soc_dims.clone() {
                let m = (off..off + d)
                    .map(|i| row_max(&self.g_rows[i]))
                    .fold(0.0f64, f64::max);
                if m > 0.0 {
                    let s = 1.0 / m.sqrt();
                    for i in off..off + d {
                        let mut h = self.h[i];
                        apply_row(&mut self.g_rows[i], &mut h, s);
                        self.h[i] = h;
                    }
                }
                off += d;
            }
            for r in 0..self.p {
                let m = row_max(&self.a_rows[r]);
                if m > 0.0 {
                    let s = 1.0 / m.sqrt();
                    let mut b = self.b[r];
                    apply_row(&mut self.a_rows[r], &mut b, s);
                    self.b[r] = b;
                }
            }
            // Column scales.
            let mut col_max = vec![0.0f64; n];
            for row in self.g_rows.iter().chain(self.a_rows.iter()) {
                for &(j, v) in row {
                    col_max[j] = col_max[j].max(v.abs());
                }
            }
            let col_adj: Vec<f64> = col_max
                .iter()
                .map(|&m| if m > 0.0 { 1.0 / m.sqrt() } else { 1.0 })
                .collect();
            for row in self.g_rows.iter_mut().chain(self.a_rows.iter_mut()) {
                for (j, v) in row.iter_mut() {
                    *v *= col_adj[*j];
                }
            }
            for j in 0..n {
                self.col_scale[j] *= col_adj[j];
                self.c[j] *= col_adj[j];
            }
        }
        let cmax = self.c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if cmax > 0.0 {
            self.obj_scale = cmax;
            for v in self.c.iter_mut() {
                *v /= cmax;
            }
        }
    }

    fn gx(&self, x: &[f64], out: &mut [f64]) {
        for (r, row) in self.g_rows.iter().enumerate() {
            out[r] = row.iter().map(|&(i, v)| v * x[i]).sum();
        }
    }

    fn gt(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, row) in self.g_rows.iter().enumerate() {
            for &(i, c) in row {
                out[i] += c * v[r];
            }
        }
    }

    fn ax(&self, x: &[f64], out: &mut [f64]) {
        for (r, row) in self.a_rows.iter().enumerate() {
            out[r] = row.iter().map(|&(i, v)| v * x[i]).sum();
        }
    }

    fn at(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, row) in self.a_rows.iter().enumerate() {
            for &(i, c) in row {
                out[i] += c * v[r];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Cone algebra
// ---------------------------------------------------------------------------

/// Nesterov-Todd scaling state. `W` is symmetric, so `W' = W` throughout.
struct Scaling {
    /// `s_i / z_i` on the nonnegative block (`W^2` diagonal).
    w2_diag: Vec<f64>,
    /// `(eta, wbar)` per second-order cone block.
    socs: Vec<(f64, Vec<f64>)>,
    /// Analytic hyperbolic residual of `lambda = W z` per cone block,
    /// `lam0^2 - ||lam1||^2 = snorm * znorm`; the direct subtraction cancels
    /// catastrophically for boundary-hugging blocks.
    lam_res: Vec<f64>,
}

fn soc_residual(v: &[f64]) -> f64 {
    v[0] * v[0] - v[1..].iter().map(|a| a * a).sum::<f64>()
}

fn compute_scaling(std: &StdForm, s: &[f64], z: &[f64]) -> Option<Scaling> {
    let nn = std.nonneg;
    let mut w2_diag = Vec::with_capacity(nn);
    for i in 0..nn {
        if s[i] <= 0.0 || z[i] <= 0.0 {
            return None;
        }
        w2_diag.push(s[i] / z[i]);
    }
    let mut socs = Vec::with_capacity(std.soc_dims.len());
    let mut lam_res = Vec::with_capacity(std.soc_dims.len());
    let mut off = nn;
    for &d in &std.soc_dims {
        let sb = &s[off..off + d];
        let zb = &z[off..off + d];
        let res_s = soc_residual(sb);
        let res_z = soc_residual(zb);
        if res_s <= 0.0 || res_z <= 0.0 || sb[0] <= 0.0 || zb[0] <= 0.0 {
            return None;
        }
        let snorm = res_s.sqrt();
        let znorm = res_z.sqrt();
        lam_res.push(snorm * znorm);
        // Normalized points and the geometric-mean scaling point.
        let sdot: f64 = sb[0] * zb[0] / (snorm * znorm)
            + sb[1..]
                .iter()
                .zip(&zb[1..])
                .map(|(a, b)| a * b / (snorm * znorm))
                .sum::<f64>();
        let gamma = ((1.0 + sdot) / 2.0).sqrt();
        let mut wbar = vec![0.0; d];
        wbar[0] = (sb[0] / snorm + zb[0] / znorm) / (2.0 * gamma);
        for i in 1..d {
            wbar[i] = (sb[i] / snorm - zb[i] / znorm) / (2.0 * gamma);
        }
        let eta = (snorm / znorm).sqrt();
        socs.push((eta, wbar));
        off += d;
    }
    Some(Scaling {
        w2_diag,
        socs,
        lam_res,
    })
}

impl Scaling {
    /// `out = W v` (symmetric scaling).
    fn apply_w(&self, std: &StdForm, v: &[f64], out: &mut [f64]) {
        for i in 0..std.nonneg {
            out[i] = self.w2_diag[i].sqrt() * v[i];
        }
        let mut off = std.nonneg;
        for (k, &d) in std.soc_dims.iter().enumerate() {
            let (eta, wbar) = &self.socs[k];
            let vb = &v[off..off + d];
            let a = wbar[0];
            let bdot: f64 = wbar[1..].iter().zip(&vb[1..]).map(|(x, y)| x * y).sum();
            out[off] = eta * (a * vb[0] + bdot);
            let coef = vb[0] + bdot / (1.0 + a);
            for i in 1..d {
                out[off + i] = eta * (vb[i] + coef * wbar[i]);
            }
            off += d;
        }
    }

    /// `out = W^{-1} v`.
    fn apply_winv(&self, std: &StdForm, v: &[f64], out: &mut [f64]) {
        for i in 0..std.nonneg {
            out[i] = v[i] / self.w2_diag[i].sqrt();
        }
        let mut off = std.nonneg;
        for (k, &d) in std.soc_dims.iter().enumerate() {
            let (eta, wbar) = &self.socs[k];
            let vb = &v[off..off + d];
            let a = wbar[0];
            let bdot: f64 = wbar[1..].iter().zip(&vb[1..]).map(|(x, y)| x * y).sum();
            out[off] = (a * vb[0] - bdot) / eta;
            let coef = -vb[0] + bdot / (1.0 + a);
            for i in 1..d {
                out[off + i] = (vb[i] + coef * wbar[i]) / eta;
            }
            off += d;
        }
    }

    /// `out = W^{-2} v = (W'W)^{-1} v`.
    fn apply_w2inv(&self, std: &StdForm, v: &[f64], out: &mut [f64]) {
        for i in 0..std.nonneg {
            out[i] = v[i] / self.w2_diag[i];
        }
        let mut off = std.nonneg;
        for (k, &d) in std.soc_dims.iter().enumerate() {
            let (eta, wbar) = &self.socs[k];
            let vb = &v[off..off + d];
            // (W^2)^{-1} = eta^{-2} (2 vhat vhat' - J), vhat = J wbar.
            let vhat_dot = wbar[0] * vb[0]
                - wbar[1..]
                    .iter()
                    .zip(&vb[1..])
                    .map(|(x, y)| x * y)
                    .sum::<f64>();
            let e2 = eta * eta;
            out[off] = (2.0 * wbar[0] * vhat_dot - vb[0]) / e2;
            for i in 1..d {
                out[off + i] = (-2.0 * wbar[i] * vhat_dot + vb[i]) / e2;
            }
            off += d;
        }
    }
}

/// Identity element of the cone's Jordan algebra.
fn cone_identity(std: &StdForm) -> Vec<f64> {
    let mut e = vec![0.0; std.m];
    for v in e.iter_mut().take(std.nonneg) {
        *v = 1.0;
    }
    let mut off = std.nonneg;
    for &d in &std.soc_dims {
        e[off] = 1.0;
        off += d;
    }
    e
}

/// Jordan product `u o v`.
fn jordan_prod(std: &StdForm, u: &[f64], v: &[f64], out: &mut [f64]) {
    for i in 0..std.nonneg {
        out[i] = u[i] * v[i];
    }
    let mut off = std.nonneg;
    for &d in &std.soc_dims {
        let ub = &u[off..off + d];
        let vb = &v[off..off + d];
        out[off] = ub.iter().zip(vb).map(|(a, b)| a * b).sum();
        for i in 1..d {
            out[off + i] = ub[0] * vb[i] + vb[0] * ub[i];
        }
        off += d;
    }
}

/// Jordan division: solve `lambda o x = d`. Returns false on singular
/// blocks. `soc_alpha` supplies analytic hyperbolic residuals of `lambda`
/// when the caller knows them (the NT scaled point does).
fn jordan_div(
    std: &StdForm,
    lambda: &[f64],
    d: &[f64],
    out: &mut [f64],
    soc_alpha: Option<&[f64]>,
) -> bool {
    for i in 0..std.nonneg {
        if lambda[i] == 0.0 {
            return false;
        }
        out[i] = d[i] / lambda[i];
    }
    let mut off = std.nonneg;
    for (k, &dim) in std.soc_dims.iter().enumerate() {
        let lb = &lambda[off..off + dim];
        let db = &d[off..off + dim];
        let alpha = match soc_alpha {
            Some(a) => a[k],
            None => soc_residual(lb),
        };
        if alpha <= 0.0 || lb[0] <= 0.0 {
            return false;
        }
        let ldot: f64 = lb[1..].iter().zip(&db[1..]).map(|(a, b)| a * b).sum();
        let x0 = (lb[0] * db[0] - ldot) / alpha;
        out[off] = x0;
        for i in 1..dim {
            out[off + i] = (db[i] - x0 * lb[i]) / lb[0];
        }
        off += dim;
    }
    true
}

/// Largest step `alpha` with `v + alpha dv` staying in the cone, capped at
/// `cap`.
fn max_cone_step(std: &StdForm, v: &[f64], dv: &[f64], cap: f64) -> f64 {
    let mut alpha = cap;
    for i in 0..std.nonneg {
        if dv[i] < 0.0 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    }
    let mut off = std.nonneg;
    for &d in &std.soc_dims {
        let vb = &v[off..off + d];
        let db = &dv[off..off + d];
        // Boundary condition: (v0+a d0)^2 - ||v1+a d1||^2 = 0 with v0+a d0 >= 0.
        let a2 = db[0] * db[0] - db[1..].iter().map(|x| x * x).sum::<f64>();
        let a1 = 2.0
            * (vb[0] * db[0]
                - vb[1..]
                    .iter()
                    .zip(&db[1..])
                    .map(|(x, y)| x * y)
                    .sum::<f64>());
        let a0 = soc_residual(vb).max(0.0);
        let mut best = cap;
        // Smallest positive root of a2 t^2 + a1 t + a0 = 0.
        let disc = a1 * a1 - 4.0 * a2 * a0;
        if a2.abs() < 1e-300 {
            if a1 < 0.0 {
                best = best.min(-a0 / a1);
            }
        } else if disc >= 0.0 {
            let sq = disc.sqrt();
            for r in [(-a1 - sq) / (2.0 * a2), (-a1 + sq) / (2.0 * a2)] {
                if r > 0.0 && vb[0] + r * db[0] >= 0.0 {
                    best = best.min(r);
                }
            }
            // Falling below the s0 >= 0 half-space also leaves the cone.
            if db[0] < 0.0 {
                best = best.min(-vb[0] / db[0]);
            }
        }
        alpha = alpha.min(best);
        off += d;
    }
    alpha.max(0.0)
}

// ---------------------------------------------------------------------------
// KKT system
// ---------------------------------------------------------------------------

struct KktSolver {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    h: DMatrix<f64>,
    reg: f64,
}

impl KktSolver {
    /// Assemble and factor `[[G'W^{-2}G + dI, A'], [A, -dI]]`.
    fn factor(std: &StdForm, scaling: &Scaling, reg: f64) -> Option<Self> {
        let n = std.n;
        let p = std.p;
        let mut h = DMatrix::<f64>::zeros(n, n);
        // Nonnegative block: sum (z_i/s_i) g_i g_i'.
        for (r, row) in std.g_rows.iter().take(std.nonneg).enumerate() {
            let wi = 1.0 / scaling.w2_diag[r];
            for &(i, vi) in row {
                for &(j, vj) in row {
                    h[(i, j)] += wi * vi * vj;
                }
            }
        }
        // SOC blocks: eta^{-2} (2 aa' - r0 r0' + sum_{i>=1} r_i r_i'),
        // a = sum_i vhat_i r_i with vhat = J wbar.
        let mut off = std.nonneg;
        for (k, &d) in std.soc_dims.iter().enumerate() {
            let (eta, wbar) = &scaling.socs[k];
            let e2inv = 1.0 / (eta * eta);
            let mut a = vec![0.0f64; n];
            for i in 0..d {
                let sign = if i == 0 { wbar[0] } else { -wbar[i] };
                for &(j, v) in &std.g_rows[off + i] {
                    a[j] += sign * v;
                }
            }
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                for (j, &aj) in a.iter().enumerate() {
                    if aj != 0.0 {
                        h[(i, j)] += 2.0 * e2inv * ai * aj;
                    }
                }
            }
            for i in 0..d {
                let sgn = if i == 0 { -1.0 } else { 1.0 };
                let row = &std.g_rows[off + i];
                for &(a_i, v_i) in row {
                    for &(b_i, v_j) in row {
                        h[(a_i, b_i)] += sgn * e2inv * v_i * v_j;
                    }
                }
            }
            off += d;
        }
        let mut kkt = DMatrix::<f64>::zeros(n + p, n + p);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        for i in 0..n {
            kkt[(i, i)] += reg;
        }
        for (r, row) in std.a_rows.iter().enumerate() {
            for &(i, v) in row {
                kkt[(n + r, i)] = v;
                kkt[(i, n + r)] = v;
            }
            kkt[(n + r, n + r)] = -reg;
        }
        let lu = kkt.lu();
        // Partial-pivot LU in nalgebra has no rank check on solve; probe with
        // the determinant sign instead.
        if lu.determinant() == 0.0 {
            return None;
        }
        Some(Self { lu, h, reg })
    }

    /// Solve the 3x3 scaled KKT system with full-system iterative
    /// refinement. The reduced solve recovers `dz` through `W^{-2}`, which
    /// amplifies factorization error near convergence; refining against the
    /// unreduced residuals keeps all three blocks accurate.
    fn solve(
        &self,
        std: &StdForm,
        scaling: &Scaling,
        r1: &[f64],
        r2: &[f64],
        r3: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (mut dx, mut dy, mut dz) = self.solve_raw(std, scaling, r1, r2, r3);
        let scale = 1.0 + [r1, r2, r3]
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |a, x| a.max(x.abs()));
        let mut last = f64::INFINITY;
        for _ in 0..3 {
            // Residuals of the unreduced system.
            let mut res1 = vec![0.0; std.n];
            std.at(&dy, &mut res1);
            let mut gt = vec![0.0; std.n];
            std.gt(&dz, &mut gt);
            for i in 0..std.n {
                res1[i] = r1[i] - res1[i] - gt[i];
            }
            let mut res2 = vec![0.0; std.p];
            std.ax(&dx, &mut res2);
            for i in 0..std.p {
                res2[i] = r2[i] - res2[i];
            }
            let mut gdx = vec![0.0; std.m];
            std.gx(&dx, &mut gdx);
            let mut w2dz = vec![0.0; std.m];
            let mut wdz = vec![0.0; std.m];
            scaling.apply_w(std, &dz, &mut wdz);
            scaling.apply_w(std, &wdz, &mut w2dz);
            let mut res3 = vec![0.0; std.m];
            for i in 0..std.m {
                res3[i] = r3[i] - gdx[i] + w2dz[i];
            }
            let rnorm = inf_norm(&res1).max(inf_norm(&res2)).max(inf_norm(&res3));
            if std::env::var_os("SOCP_TRACE_REFINE").is_some() {
                eprintln!("  refine: rnorm={rnorm:.3e} scale={scale:.3e}");
            }
            if rnorm <= 1e-14 * scale || rnorm >= 0.9 * last {
                break;
            }
            last = rnorm;
            let (cx, cy, cz) = self.solve_raw(std, scaling, &res1, &res2, &res3);
            for i in 0..std.n {
                dx[i] += cx[i];
            }
            for i in 0..std.p {
                dy[i] += cy[i];
            }
            for i in 0..std.m {
                dz[i] += cz[i];
            }
        }
        (dx, dy, dz)
    }

    fn solve_raw(
        &self,
        std: &StdForm,
        scaling: &Scaling,
        r1: &[f64],
        r2: &[f64],
        r3: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = std.n;
        let p = std.p;
        let mut w2inv_r3 = vec![0.0; std.m];
        scaling.apply_w2inv(std, r3, &mut w2inv_r3);
        let mut gt_term = vec![0.0; n];
        std.gt(&w2inv_r3, &mut gt_term);

        let mut rhs = DVector::<f64>::zeros(n + p);
        for i in 0..n {
            rhs[i] = r1[i] + gt_term[i];
        }
        for r in 0..p {
            rhs[n + r] = r2[r];
        }
        let mut sol = self
            .lu
            .solve(&rhs)
            .unwrap_or_else(|| DVector::zeros(n + p));

        // Iterative refinement against the unregularized system; the static
        // regularization in the factorization biases the raw solve, and near
        // the central-path floor the KKT matrix is ill-conditioned enough
        // that one correction is not sufficient.
        let refine = |sol: &DVector<f64>| -> DVector<f64> {
            let mut res = rhs.clone();
            let x = sol.rows(0, n);
            let hx = &self.h * x;
            for i in 0..n {
                res[i] -= hx[i];
            }
            for (r, row) in std.a_rows.iter().enumerate() {
                let ax: f64 = row.iter().map(|&(i, v)| v * sol[i]).sum();
                res[n + r] -= ax;
                for &(i, v) in row {
                    res[i] -= v * sol[n + r];
                }
            }
            res
        };
        let rhs_scale = 1.0 + rhs.amax();
        let mut last_res = f64::INFINITY;
        for _ in 0..4 {
            let res = refine(&sol);
            let rnorm = res.amax();
            if rnorm <= 1e-15 * rhs_scale || rnorm >= 0.5 * last_res {
                break;
            }
            last_res = rnorm;
            match self.lu.solve(&res) {
                Some(corr) => sol += corr,
                None => break,
            }
        }
        let _ = self.reg;

        let dx: Vec<f64> = (0..n).map(|i| sol[i]).collect();
        let dy: Vec<f64> = (0..p).map(|r| sol[n + r]).collect();
        // dz = W^{-2} (G dx - r3)
        let mut gdx = vec![0.0; std.m];
        std.gx(&dx, &mut gdx);
        for i in 0..std.m {
            gdx[i] -= r3[i];
        }
        let mut dz = vec![0.0; std.m];
        scaling.apply_w2inv(std, &gdx, &mut dz);
        (dx, dy, dz)
    }
}

// ---------------------------------------------------------------------------
// Main loop
// ---------------------------------------------------------------------------

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

fn row_max(row: &SparseRow) -> f64 {
    row.iter().fold(0.0f64, |acc, &(_, v)| acc.max(v.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn run_ipm(std: &StdForm, settings: &IpmSettings) -> ConicSolution {
    let n = std.n;
    let p = std.p;
    let m = std.m;
    let nu = (std.nonneg + std.soc_dims.len()) as f64;
    let tol = settings.tol.min(1e-8);
    let e = cone_identity(std);

    // --- Initialization: least-squares point shifted into the cone. -------
    let ident = Scaling {
        w2_diag: vec![1.0; std.nonneg],
        socs: std
            .soc_dims
            .iter()
            .map(|&d| {
                let mut wbar = vec![0.0; d];
                wbar[0] = 1.0;
                (1.0, wbar)
            })
            .collect(),
        lam_res: vec![1.0; std.soc_dims.len()],
    };
    let mut x = vec![0.0; n];
    let mut y = vec![0.0; p];
    let mut s = vec![0.0; m];
    let mut z = vec![0.0; m];
    match KktSolver::factor(std, &ident, settings.static_reg.max(1e-12)) {
        Some(kkt) => {
            let zeros_n = vec![0.0; n];
            let zeros_p = vec![0.0; p];
            let zeros_m = vec![0.0; m];
            let (xp, _, zp) = kkt.solve(std, &ident, &zeros_n, &std.b, &std.h);
            // s_hat = h - G x_hat = -zp by the reduction identity.
            let s_hat: Vec<f64> = zp.iter().map(|v| -v).collect();
            x = xp;
            let neg_c: Vec<f64> = std.c.iter().map(|v| -v).collect();
            let (_, yd, zd) = kkt.solve(std, &ident, &neg_c, &zeros_p, &zeros_m);
            y = yd;
            let shift_into = |v: &Vec<f64>| -> Vec<f64> {
                // Distance to the cone along e.
                let mut alpha = f64::NEG_INFINITY;
                for i in 0..std.nonneg {
                    alpha = alpha.max(-v[i]);
                }
                let mut off = std.nonneg;
                for &d in &std.soc_dims {
                    let vb = &v[off..off + d];
                    let norm1 = vb[1..].iter().map(|a| a * a).sum::<f64>().sqrt();
                    alpha = alpha.max(norm1 - vb[0]);
                    off += d;
                }
                let mut out = v.clone();
                if alpha >= 0.0 {
                    for i in 0..m {
                        out[i] += (1.0 + alpha) * e[i];
                    }
                }
                out
            };
            s = shift_into(&s_hat);
            z = shift_into(&zd);
        }
        None => {
            s.copy_from_slice(&e);
            z.copy_from_slice(&e);
        }
    }
    let mut tau = 1.0f64;
    let mut kappa = 1.0f64;

    let scale_b = 1.0 + inf_norm(&std.b).max(inf_norm(&std.h));
    let scale_c = 1.0 + inf_norm(&std.c);

    let mut best_msg = String::new();
    let mut iterations = 0;

    // Best-iterate safeguard: near machine precision the scaled KKT system
    // degrades and further steps can destroy an already-converged iterate.
    struct Best {
        merit: f64,
        x: Vec<f64>,
        z: Vec<f64>,
        s: Vec<f64>,
        tau: f64,
        gap: f64,
        pres: f64,
        dres: f64,
    }
    let mut best: Option<Best> = None;
    let mut stall = 0usize;

    let mut hx = vec![0.0; n];
    let mut hy = vec![0.0; p];
    let mut hz = vec![0.0; m];
    let mut tmp_n = vec![0.0; n];
    let mut tmp_m = vec![0.0; m];

    for iter in 0..settings.max_iters {
        iterations = iter;
        // --- Residuals -----------------------------------------------------
        std.at(&y, &mut hx);
        std.gt(&z, &mut tmp_n);
        for i in 0..n {
            hx[i] += tmp_n[i] + std.c[i] * tau;
        }
        std.ax(&x, &mut hy);
        for r in 0..p {
            hy[r] -= std.b[r] * tau;
        }
        std.gx(&x, &mut hz);
        for i in 0..m {
            hz[i] += s[i] - std.h[i] * tau;
        }
        let htau = dot(&std.c, &x) + dot(&std.b, &y) + dot(&std.h, &z) + kappa;

        let sz = dot(&s, &z);
        let mu = (sz + tau * kappa) / (nu + 1.0);
        let pcost = dot(&std.c, &x) / tau;
        let dcost = -(dot(&std.b, &y) + dot(&std.h, &z)) / tau;
        // Relative measures on the equilibrated problem, the quantities the
        // convergence test is stated in.
        let gap_abs = sz / (tau * tau) / pcost.abs().max(dcost.abs()).max(1.0);
        let pres = inf_norm(&hy).max(inf_norm(&hz)) / tau / scale_b;
        let dres = inf_norm(&hx) / tau / scale_c;

        if std::env::var_os("SOCP_TRACE").is_some() {
            eprintln!(
                "iter {iter}: mu={mu:.3e} gap={gap_abs:.3e} pres={pres:.3e} dres={dres:.3e} \
                 tau={tau:.3e} kappa={kappa:.3e} pcost={pcost:.6e} dcost={dcost:.6e}"
            );
        }
        if pres <= tol && dres <= tol && gap_abs <= tol {
            return finish(
                std, &x, &y, &z, &s, tau, SolveStatus::Optimal, gap_abs, pres, dres, iter,
                String::new(),
            );
        }
        // --- Infeasibility certificates -------------------------------------
        let cert_val = dot(&std.b, &y) + dot(&std.h, &z);
        if cert_val < -1e-12 {
            // hx - c tau = A'y + G'z
            let cert_res = (0..n)
                .map(|i| (hx[i] - std.c[i] * tau).abs())
                .fold(0.0f64, f64::max);
            if cert_res <= 1e-7 * (-cert_val) && tau <= 1e-4 * kappa.max(1e-10) {
                return finish(
                    std,
                    &x,
                    &y,
                    &z,
                    &s,
                    tau.max(1e-300),
                    SolveStatus::Infeasible,
                    gap_abs,
                    pres,
                    dres,
                    iter,
                    "primal infeasibility certificate found".into(),
                );
            }
        }

        let merit = pres.max(dres).max(gap_abs);
        if best.as_ref().is_none_or(|b| merit < 0.999 * b.merit) {
            best = Some(Best {
                merit,
                x: x.clone(),
                z: z.clone(),
                s: s.clone(),
                tau,
                gap: gap_abs,
                pres,
                dres,
            });
            stall = 0;
        } else {
            stall += 1;
            if stall >= 5 {
                let b = best.as_ref().expect("stall implies a best iterate");
                best_msg = format!(
                    "progress stalled near the numerical floor \
                     (gap {:.2e}, pres {:.2e}, dres {:.2e})",
                    b.gap, b.pres, b.dres
                );
                break;
            }
        }
        let cx = dot(&std.c, &x);
        if cx < -1e-12 && tau <= 1e-6 * kappa.max(1.0) {
            let mut gxs = vec![0.0; m];
            std.gx(&x, &mut gxs);
            for i in 0..m {
                gxs[i] += s[i];
            }
            let mut axv = vec![0.0; p];
            std.ax(&x, &mut axv);
            if inf_norm(&gxs).max(inf_norm(&axv)) <= 1e-9 * (-cx) {
                return finish(
                    std, &x, &y, &z, &s, 1.0, SolveStatus::MaxIters, gap_abs, pres, dres, iter,
                    "dual infeasibility certificate (problem unbounded)".into(),
                );
            }
        }
        let _ = (pcost, dcost);

        // --- Scaling and factorization --------------------------------------
        let scaling = match compute_scaling(std, &s, &z) {
            Some(sc) => sc,
            None => {
                best_msg = "iterate left cone interior".into();
                break;
            }
        };
        let kkt = match KktSolver::factor(std, &scaling, settings.static_reg) {
            Some(k) => k,
            None => {
                best_msg = "singular KKT system".into();
                break;
            }
        };

        // lambda = W z (= W^{-T} s)
        let mut lambda = vec![0.0; m];
        scaling.apply_w(std, &z, &mut lambda);
        let mut lam_lam = vec![0.0; m];
        jordan_prod(std, &lambda, &lambda, &mut lam_lam);

        let neg_c: Vec<f64> = std.c.iter().map(|v| -v).collect();
        let u1 = kkt.solve(std, &scaling, &neg_c, &std.b, &std.h);

        let direction = |sigma: f64,
                             corr_s: Option<&[f64]>,
                             corr_kappa: f64|
         -> Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64, f64)> {
            let fw = 1.0 - sigma;
            let rx: Vec<f64> = hx.iter().map(|v| -fw * v).collect();
            let ry: Vec<f64> = hy.iter().map(|v| -fw * v).collect();
            let rtau = -fw * htau;
            // ds = -lam o lam - corr + sigma mu e
            let mut ds = vec![0.0; m];
            for i in 0..m {
                ds[i] = -lam_lam[i] + sigma * mu * e[i] - corr_s.map_or(0.0, |c| c[i]);
            }
            let dkappa_rhs = -tau * kappa - corr_kappa + sigma * mu;
            // rz_tilde = -fw*hz - W (lambda \ ds)
            let mut lam_div = vec![0.0; m];
            if !jordan_div(std, &lambda, &ds, &mut lam_div, Some(&scaling.lam_res)) {
                return None;
            }
            let mut w_lamdiv = vec![0.0; m];
            scaling.apply_w(std, &lam_div, &mut w_lamdiv);
            let rz: Vec<f64> = (0..m).map(|i| -fw * hz[i] - w_lamdiv[i]).collect();

            let u2 = kkt.solve(std, &scaling, &rx, &ry, &rz);
            let denom = dot(&std.c, &u1.0) + dot(&std.b, &u1.1) + dot(&std.h, &u1.2)
                - kappa / tau;
            if denom.abs() < 1e-300 {
                return None;
            }
            let numer = rtau - dkappa_rhs / tau
                - (dot(&std.c, &u2.0) + dot(&std.b, &u2.1) + dot(&std.h, &u2.2));
            let dtau = numer / denom;
            let dx: Vec<f64> = (0..n).map(|i| u2.0[i] + dtau * u1.0[i]).collect();
            let dy: Vec<f64> = (0..p).map(|i| u2.1[i] + dtau * u1.1[i]).collect();
            let dz: Vec<f64> = (0..m).map(|i| u2.2[i] + dtau * u1.2[i]).collect();
            // dsvec = W(lam_div) - W^2 dz = W(lam_div - W dz)
            let mut wdz = vec![0.0; m];
            scaling.apply_w(std, &dz, &mut wdz);
            let mut inner = vec![0.0; m];
            for i in 0..m {
                inner[i] = lam_div[i] - wdz[i];
            }
            let mut dsvec = vec![0.0; m];
            scaling.apply_w(std, &inner, &mut dsvec);
            let dkappa = (dkappa_rhs - kappa * dtau) / tau;
            Some((dx, dy, dz, dsvec, dtau, dkappa))
        };

        // Predictor.
        let Some((_, _, dz_a, ds_a, dtau_a, dkappa_a)) = direction(0.0, None, 0.0) else {
            best_msg = "failed to compute affine direction".into();
            break;
        };
        let mut alpha_aff = max_cone_step(std, &s, &ds_a, 1.0);
        alpha_aff = max_cone_step(std, &z, &dz_a, alpha_aff);
        if dtau_a < 0.0 {
            alpha_aff = alpha_aff.min(-tau / dtau_a);
        }
        if dkappa_a < 0.0 {
            alpha_aff = alpha_aff.min(-kappa / dkappa_a);
        }
        let mu_aff = {
            let mut sdot = 0.0;
            for i in 0..m {
                sdot += (s[i] + alpha_aff * ds_a[i]) * (z[i] + alpha_aff * dz_a[i]);
            }
            (sdot + (tau + alpha_aff * dtau_a) * (kappa + alpha_aff * dkappa_a)) / (nu + 1.0)
        };
        let sigma = ((mu_aff / mu).powi(3)).clamp(1e-8, 0.999);

        // Corrector: (W^{-T} ds_a) o (W dz_a).
        scaling.apply_winv(std, &ds_a, &mut tmp_m);
        let mut wdz_a = vec![0.0; m];
        scaling.apply_w(std, &dz_a, &mut wdz_a);
        let mut corr = vec![0.0; m];
        jordan_prod(std, &tmp_m, &wdz_a, &mut corr);

        let Some((dx, dy, dz, dsvec, dtau, dkappa)) =
            direction(sigma, Some(&corr), dtau_a * dkappa_a)
        else {
            best_msg = "failed to compute combined direction".into();
            break;
        };

        let mut alpha = max_cone_step(std, &s, &dsvec, 1.0 / settings.step_frac);
        alpha = max_cone_step(std, &z, &dz, alpha);
        if dtau < 0.0 {
            alpha = alpha.min(-tau / dtau);
        }
        if dkappa < 0.0 {
            alpha = alpha.min(-kappa / dkappa);
        }
        alpha = (settings.step_frac * alpha).min(1.0);
        if alpha <= 1e-10 {
            best_msg = "step size collapsed".into();
            break;
        }

        // The boundary step is computed from a quadratic that can round the
        // wrong way for near-degenerate blocks; verify strict interiority
        // and backtrack if the trial point escaped.
        let interior = |s: &[f64], z: &[f64]| -> bool {
            compute_scaling(std, s, z).is_some()
        };
        let mut accepted = false;
        for _ in 0..40 {
            let trial_s: Vec<f64> = (0..m).map(|i| s[i] + alpha * dsvec[i]).collect();
            let trial_z: Vec<f64> = (0..m).map(|i| z[i] + alpha * dz[i]).collect();
            let trial_tau = tau + alpha * dtau;
            let trial_kappa = kappa + alpha * dkappa;
            if trial_tau > 0.0 && trial_kappa > 0.0 && interior(&trial_s, &trial_z) {
                for i in 0..n {
                    x[i] += alpha * dx[i];
                }
                for i in 0..p {
                    y[i] += alpha * dy[i];
                }
                s = trial_s;
                z = trial_z;
                tau = trial_tau;
                kappa = trial_kappa;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            best_msg = "no interior step found".into();
            break;
        }
    }

    // Ran out of iterations or hit a numerical wall: fall back to the best
    // iterate seen; report it as optimal only if it genuinely qualifies.
    if best_msg.is_empty() {
        best_msg = "iteration limit reached".into();
    }
    if let Some(b) = best {
        let status = if b.pres <= tol && b.dres <= tol && b.gap <= tol {
            SolveStatus::Optimal
        } else {
            SolveStatus::MaxIters
        };
        let msg = if status == SolveStatus::Optimal {
            String::new()
        } else {
            best_msg
        };
        return finish(
            std,
            &b.x,
            &[],
            &b.z,
            &b.s,
            b.tau,
            status,
            b.gap,
            b.pres,
            b.dres,
            iterations + 1,
            msg,
        );
    }
    let pcost = dot(&std.c, &x) / tau;
    let dcost = -(dot(&std.b, &y) + dot(&std.h, &z)) / tau;
    let gap_abs = dot(&s, &z) / (tau * tau) / pcost.abs().max(dcost.abs()).max(1.0);
    std.ax(&x, &mut hy);
    for r in 0..p {
        hy[r] -= std.b[r] * tau;
    }
    std.gx(&x, &mut hz);
    for i in 0..m {
        hz[i] += s[i] - std.h[i] * tau;
    }
    let pres = inf_norm(&hy).max(inf_norm(&hz)) / tau / scale_b;
    std.at(&y, &mut hx);
    std.gt(&z, &mut tmp_n);
    for i in 0..n {
        hx[i] += tmp_n[i] + std.c[i] * tau;
    }
    let dres = inf_norm(&hx) / tau / scale_c;
    finish(
        std,
        &x,
        &y,
        &z,
        &s,
        tau,
        SolveStatus::MaxIters,
        gap_abs,
        pres,
        dres,
        iterations + 1,
        best_msg,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    std: &StdForm,
    x: &[f64],
    _y: &[f64],
    z: &[f64],
    s: &[f64],
    tau: f64,
    status: SolveStatus,
    gap: f64,
    pres: f64,
    dres: f64,
    iterations: usize,
    message: String,
) -> ConicSolution {
    // Undo the equilibration column scaling; report the objective in the
    // caller's units.
    let xs: Vec<f64> = x
        .iter()
        .zip(&std.col_scale)
        .map(|(v, d)| v / tau * d)
        .collect();
    let objective_value = dot(&std.c_original, &xs);
    // Complementarity of the equilibrated problem: |s o z|_inf / tau^2.
    let mut soz = vec![0.0; std.m];
    jordan_prod(std, s, z, &mut soz);
    let complementarity = inf_norm(&soz) / (tau * tau);
    ConicSolution {
        x: xs,
        objective_value,
        status,
        duality_gap: gap,
        primal_residual: pres,
        dual_residual: dres,
        complementarity,
        iterations,
        message,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_std() -> StdForm {
        StdForm {
            n: 1,
            p: 0,
            m: 4,
            c: vec![1.0],
            a_rows: vec![],
            b: vec![],
            g_rows: vec![vec![(0, 1.0)], vec![(0, 0.0)], vec![(0, 1.0)], vec![(0, -1.0)]],
            h: vec![1.0, 2.0, 0.5, 0.5],
            nonneg: 1,
            soc_dims: vec![3],
            col_scale: vec![1.0],
            c_original: vec![1.0],
            obj_scale: 1.0,
        }
    }

    #[test]
    fn nt_scaling_identity_holds() {
        // W z must equal W^{-1} s for interior points.
        let std = toy_std();
        let s = vec![0.7, 3.0, 0.4, -0.2];
        let z = vec![1.3, 2.0, -0.3, 0.8];
        let sc = compute_scaling(&std, &s, &z).expect("interior");
        let mut wz = vec![0.0; 4];
        sc.apply_w(&std, &z, &mut wz);
        let mut winvs = vec![0.0; 4];
        sc.apply_winv(&std, &s, &mut winvs);
        for i in 0..4 {
            assert!((wz[i] - winvs[i]).abs() < 1e-12, "{wz:?} vs {winvs:?}");
        }
        // W^{-2} (W^2 v) = v
        let v = vec![0.3, 1.1, -0.4, 0.2];
        let mut wv = vec![0.0; 4];
        sc.apply_w(&std, &v, &mut wv);
        let mut w2v = vec![0.0; 4];
        sc.apply_w(&std, &wv, &mut w2v);
        let mut back = vec![0.0; 4];
        sc.apply_w2inv(&std, &w2v, &mut back);
        for i in 0..4 {
            assert!((back[i] - v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn jordan_div_inverts_product() {
        let std = toy_std();
        let lam = vec![0.9, 2.0, 0.3, -0.5];
        let want = vec![0.4, 0.7, -0.2, 1.0];
        let mut d = vec![0.0; 4];
        jordan_prod(&std, &lam, &want, &mut d);
        let mut got = vec![0.0; 4];
        assert!(jordan_div(&std, &lam, &d, &mut got, None));
        for i in 0..4 {
            assert!((got[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cone_step_respects_boundary() {
        let std = toy_std();
        let v = vec![1.0, 1.0, 0.0, 0.0];
        let dv = vec![-0.5, -0.25, 0.5, 0.0];
        let alpha = max_cone_step(&std, &v, &dv, 10.0);
        // Nonneg part allows 2.0; SOC part: (1-0.25a)^2 = (0.5a)^2 -> a = 4/3.
        assert!((alpha - 4.0 / 3.0).abs() < 1e-9, "alpha = {alpha}");
    }
}
