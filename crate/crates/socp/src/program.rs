//! Conic program container and solution types.

use thiserror::Error;

/// Sparse affine row: list of `(variable index, coefficient)` pairs.
pub type SparseRow = Vec<(usize, f64)>;

/// Direction of a scalar linear constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    /// `terms . x <= rhs`
    Le,
    /// `terms . x == rhs`
    Eq,
}

/// A scalar affine constraint `terms . x (<=|==) rhs`.
#[derive(Debug, Clone)]
pub struct LinearConstraint {
    pub terms: SparseRow,
    pub sense: Sense,
    pub rhs: f64,
}

/// A second-order cone constraint `||A x + b||_2 <= c . x + d`.
///
/// `norm_rows[i]` holds the `i`-th row of `A` together with the matching
/// entry of `b`; `bound` holds `(c, d)`.
#[derive(Debug, Clone)]
pub struct SocConstraint {
    pub norm_rows: Vec<(SparseRow, f64)>,
    pub bound: (SparseRow, f64),
}

#[derive(Debug, Error)]
pub enum ProgramError {
    #[error("constraint {constraint} references variable {var} but the program has {num_vars}")]
    VariableOutOfRange {
        constraint: String,
        var: usize,
        num_vars: usize,
    },
    #[error("objective has {got} coefficients for {num_vars} variables")]
    ObjectiveLength { got: usize, num_vars: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Minimization problem over a flat variable vector.
///
/// The container is deliberately dumb: it stores the objective, the scalar
/// linear constraints and the second-order cone constraints exactly as the
/// caller emitted them. Conversion to the solver's standard form happens
/// inside [`crate::solve_conic`].
#[derive(Debug, Clone)]
pub struct ConicProgram {
    num_vars: usize,
    objective: Vec<f64>,
    pub linear: Vec<LinearConstraint>,
    pub socs: Vec<SocConstraint>,
}

impl ConicProgram {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            objective: vec![0.0; num_vars],
            linear: Vec::new(),
            socs: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    /// Total number of constraints (scalar linear rows plus cone blocks).
    pub fn num_constraints(&self) -> usize {
        self.linear.len() + self.socs.len()
    }

    pub fn num_linear(&self) -> usize {
        self.linear.len()
    }

    pub fn num_socs(&self) -> usize {
        self.socs.len()
    }

    /// Set the minimization objective `minimize coeffs . x`.
    pub fn set_objective(&mut self, coeffs: Vec<f64>) {
        self.objective = coeffs;
    }

    /// Add a single objective coefficient (accumulating).
    pub fn add_objective_term(&mut self, var: usize, coeff: f64) {
        self.objective[var] += coeff;
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn add_le(&mut self, terms: SparseRow, rhs: f64) {
        self.linear.push(LinearConstraint {
            terms,
            sense: Sense::Le,
            rhs,
        });
    }

    /// Add `terms . x >= rhs` (stored as the negated `<=` row).
    pub fn add_ge(&mut self, terms: SparseRow, rhs: f64) {
        let neg = terms.into_iter().map(|(i, v)| (i, -v)).collect();
        self.add_le(neg, -rhs);
    }

    pub fn add_eq(&mut self, terms: SparseRow, rhs: f64) {
        self.linear.push(LinearConstraint {
            terms,
            sense: Sense::Eq,
            rhs,
        });
    }

    pub fn add_soc(&mut self, norm_rows: Vec<(SparseRow, f64)>, bound: (SparseRow, f64)) {
        self.socs.push(SocConstraint { norm_rows, bound });
    }

    /// Check that every referenced variable index is in range and the
    /// objective has the right length.
    pub fn validate(&self) -> Result<(), ProgramError> {
        if self.objective.len() != self.num_vars {
            return Err(ProgramError::ObjectiveLength {
                got: self.objective.len(),
                num_vars: self.num_vars,
            });
        }
        let check = |terms: &SparseRow, what: &str| -> Result<(), ProgramError> {
            for &(i, v) in terms {
                if i >= self.num_vars {
                    return Err(ProgramError::VariableOutOfRange {
                        constraint: what.to_string(),
                        var: i,
                        num_vars: self.num_vars,
                    });
                }
                if !v.is_finite() {
                    return Err(ProgramError::Invalid(format!(
                        "non-finite coefficient in {what}"
                    )));
                }
            }
            Ok(())
        };
        for (k, lc) in self.linear.iter().enumerate() {
            check(&lc.terms, &format!("linear[{k}]"))?;
            if !lc.rhs.is_finite() {
                return Err(ProgramError::Invalid(format!("non-finite rhs in linear[{k}]")));
            }
        }
        for (k, soc) in self.socs.iter().enumerate() {
            for (r, (row, b)) in soc.norm_rows.iter().enumerate() {
                check(row, &format!("soc[{k}].row[{r}]"))?;
                if !b.is_finite() {
                    return Err(ProgramError::Invalid(format!(
                        "non-finite offset in soc[{k}].row[{r}]"
                    )));
                }
            }
            check(&soc.bound.0, &format!("soc[{k}].bound"))?;
        }
        Ok(())
    }

    /// Plain-text canonical form, one constraint per line. Intended for
    /// debugging solver inputs, not for machine consumption.
    pub fn dump(&self) -> String {
        fn row(terms: &SparseRow, constant: f64) -> String {
            let mut s = String::new();
            for &(i, v) in terms {
                if !s.is_empty() {
                    s.push_str(" + ");
                }
                s.push_str(&format!("{v:.6e}*x{i}"));
            }
            if s.is_empty() {
                s.push('0');
            }
            if constant != 0.0 {
                s.push_str(&format!(" + {constant:.6e}"));
            }
            s
        }
        let mut out = String::new();
        let obj: SparseRow = self
            .objective
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .collect();
        out.push_str(&format!("minimize: {}\n", row(&obj, 0.0)));
        for (k, lc) in self.linear.iter().enumerate() {
            let op = match lc.sense {
                Sense::Le => "<=",
                Sense::Eq => "==",
            };
            out.push_str(&format!("lin[{k}]: {} {op} {:.6e}\n", row(&lc.terms, 0.0), lc.rhs));
        }
        for (k, soc) in self.socs.iter().enumerate() {
            out.push_str(&format!("soc[{k}]: ||\n"));
            for (r, b) in &soc.norm_rows {
                out.push_str(&format!("    {}\n", row(r, *b)));
            }
            out.push_str(&format!("  || <= {}\n", row(&soc.bound.0, soc.bound.1)));
        }
        out
    }
}

/// Outcome class of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// KKT point found: primal residual and duality gap below tolerance.
    Optimal,
    /// A certificate of primal infeasibility was found.
    Infeasible,
    /// Iteration or numerical limit hit; `x` is the best iterate, not a
    /// verified optimum.
    MaxIters,
}

/// Solver output.
///
/// Residual and gap fields are the solver's convergence measures on the
/// equilibrated problem: the duality gap is relative to the larger of the
/// primal/dual cost magnitudes, and the residuals are scaled by the data
/// norms. `Optimal` is claimed only when all three are at or below the
/// requested tolerance (capped at 1e-8).
#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    pub objective_value: f64,
    pub status: SolveStatus,
    /// Relative duality gap at termination.
    pub duality_gap: f64,
    /// Scaled infinity norm of the primal equality/cone residual.
    pub primal_residual: f64,
    /// Scaled infinity norm of the dual residual.
    pub dual_residual: f64,
    /// Worst complementary-slackness entry `|s o z|_inf / tau^2` over cones.
    pub complementarity: f64,
    pub iterations: usize,
    /// Human-readable diagnostics for non-optimal exits.
    pub message: String,
}

impl ConicSolution {
    /// Worst of the three convergence measures; small values mean the
    /// iterate is a usable near-optimum even when `status` is `MaxIters`.
    pub fn merit(&self) -> f64 {
        self.duality_gap
            .max(self.primal_residual)
            .max(self.dual_residual)
    }
}
