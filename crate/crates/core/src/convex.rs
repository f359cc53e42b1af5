//! Convex master-problem machinery shared by the capacity solvers.
//!
//! Two families of programs appear:
//!
//! * the p-modulus program: minimize sum mu_x rho_x^p subject to
//!   row_j . rho >= 1 with nonnegative rows (path constraints). Since the
//!   rows are nonnegative, the dual-optimal primal point
//!   rho_x = ((A' lambda)_x / (p mu_x))^(1/(p-1)) is automatically
//!   nonnegative, so the sign constraint never binds. Solved either by
//!   cyclic dual coordinate ascent (exact closed-form steps at p = 2,
//!   safeguarded bisection otherwise) or by projected gradient ascent on the
//!   dual with exact/backtracking line search — two distinct routes used to
//!   cross-check each other.
//!
//! * diagonal-quadratic programs: minimize 1/2 z' diag(q) z subject to
//!   sparse rows a_j . z <= b_j, solved by Hildreth's cyclic method.

#[derive(Debug, Clone)]
pub struct SparseRow {
    pub idx: Vec<u32>,
    pub coeff: Vec<f64>,
}

impl SparseRow {
    pub fn dot(&self, z: &[f64]) -> f64 {
        self.idx
            .iter()
            .zip(&self.coeff)
            .map(|(&i, &c)| c * z[i as usize])
            .sum()
    }
}

/// minimize sum w_x rho_x^p  s.t.  rows . rho >= 1, rho >= 0.
#[derive(Debug, Clone)]
pub struct ModulusProgram {
    pub weights: Vec<f64>,
    pub p: f64,
    pub rows: Vec<SparseRow>,
}

#[derive(Debug, Clone)]
pub struct ModulusSolution {
    pub rho: Vec<f64>,
    pub dual: Vec<f64>,
    /// Objective at `rho`.
    pub value: f64,
    /// Relative duality gap at termination.
    pub gap: f64,
    /// Worst constraint violation max_j (1 - row_j . rho).
    pub feasibility: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ModulusProgram {
    fn rho_at(&self, x: usize, s: f64) -> f64 {
        let p = self.p;
        let base = s / (p * self.weights[x]);
        if base <= 0.0 {
            0.0
        } else if p == 2.0 {
            base
        } else {
            base.powf(1.0 / (p - 1.0))
        }
    }

    fn rho_from(&self, s: &[f64]) -> Vec<f64> {
        (0..s.len()).map(|x| self.rho_at(x, s[x])).collect()
    }

    pub fn objective(&self, rho: &[f64]) -> f64 {
        rho.iter()
            .zip(&self.weights)
            .map(|(&r, &w)| w * r.powf(self.p))
            .sum()
    }

    fn row_value(&self, j: usize, s: &[f64], shift: f64) -> f64 {
        let row = &self.rows[j];
        row.idx
            .iter()
            .zip(&row.coeff)
            .map(|(&x, &c)| c * self.rho_at(x as usize, s[x as usize] + shift * c))
            .sum()
    }

    fn stats(&self, s: &[f64], lambda: &[f64]) -> (f64, f64, f64) {
        let rho = self.rho_from(s);
        let value = self.objective(&rho);
        let feas = self
            .rows
            .iter()
            .map(|row| 1.0 - row.dot(&rho))
            .fold(0.0f64, f64::max);
        let lambda_sum: f64 = lambda.iter().sum();
        // Complementary slackness: at the optimum sum(lambda) = p * value.
        let gap = (self.p * value - lambda_sum).abs() / value.abs().max(1.0);
        (value, feas, gap)
    }

    /// Cyclic dual coordinate ascent (Hildreth at p = 2). `lambda` warm-starts
    /// the dual when the row pool grew incrementally.
    pub fn solve_coordinate(
        &self,
        tol: f64,
        max_sweeps: usize,
        warm: Option<Vec<f64>>,
    ) -> ModulusSolution {
        let n = self.weights.len();
        let m = self.rows.len();
        let mut lambda = warm.unwrap_or_else(|| vec![0.0; m]);
        lambda.resize(m, 0.0);
        let mut s = vec![0.0; n];
        for (j, row) in self.rows.iter().enumerate() {
            if lambda[j] != 0.0 {
                for (&x, &c) in row.idx.iter().zip(&row.coeff) {
                    s[x as usize] += lambda[j] * c;
                }
            }
        }
        if m == 0 {
            return ModulusSolution {
                rho: vec![0.0; n],
                dual: lambda,
                value: 0.0,
                gap: 0.0,
                feasibility: 0.0,
                iterations: 0,
                converged: true,
            };
        }

        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < max_sweeps {
            sweeps += 1;
            for j in 0..m {
                let step = self.coordinate_step(j, &s, lambda[j]);
                if step != 0.0 {
                    lambda[j] += step;
                    let row = &self.rows[j];
                    for (&x, &c) in row.idx.iter().zip(&row.coeff) {
                        s[x as usize] += step * c;
                    }
                }
            }
            if sweeps % 4 == 0 || sweeps == max_sweeps {
                let (value, feas, gap) = self.stats(&s, &lambda);
                let _ = value;
                if feas <= tol && gap <= tol {
                    converged = true;
                    break;
                }
            }
        }
        let rho = self.rho_from(&s);
        let (value, feas, gap) = self.stats(&s, &lambda);
        ModulusSolution {
            rho,
            dual: lambda,
            value,
            gap,
            feasibility: feas,
            iterations: sweeps,
            converged,
        }
    }

    /// Exact maximizing step for coordinate j: at p = 2 the dual restricted
    /// to one coordinate is quadratic; otherwise the stationarity equation is
    /// solved by monotone bisection. Returns the step, clipped at -lambda_j.
    fn coordinate_step(&self, j: usize, s: &[f64], lambda_j: f64) -> f64 {
        let row = &self.rows[j];
        if self.p == 2.0 {
            let q: f64 = row
                .idx
                .iter()
                .zip(&row.coeff)
                .map(|(&x, &c)| c * c / (2.0 * self.weights[x as usize]))
                .sum();
            if q == 0.0 {
                return 0.0;
            }
            let r = 1.0 - self.row_value(j, s, 0.0);
            (r / q).max(-lambda_j)
        } else {
            // phi'(t) = 1 - row.rho(s + t row); decreasing in t. Maximize on
            // [-lambda_j, inf): boundary step if the slope is already
            // nonpositive there, otherwise bisect to the stationary point.
            let lo_slope = 1.0 - self.row_value(j, s, -lambda_j);
            if lo_slope <= 0.0 {
                return -lambda_j;
            }
            let mut lo = -lambda_j;
            let mut hi = if 1.0 - self.row_value(j, s, 0.0) <= 0.0 {
                0.0
            } else {
                let mut hi = 1.0f64.max(lambda_j);
                let mut guard = 0;
                while 1.0 - self.row_value(j, s, hi) > 0.0 && guard < 200 {
                    hi *= 2.0;
                    guard += 1;
                }
                hi
            };
            for _ in 0..90 {
                let mid = 0.5 * (lo + hi);
                if 1.0 - self.row_value(j, s, mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        }
    }

    /// Projected gradient ascent on the dual with exact line search at p = 2
    /// and backtracking otherwise; the independent oracle route.
    pub fn solve_projected_gradient(&self, tol: f64, max_iter: usize) -> ModulusSolution {
        let n = self.weights.len();
        let m = self.rows.len();
        if m == 0 {
            return ModulusSolution {
                rho: vec![0.0; n],
                dual: Vec::new(),
                value: 0.0,
                gap: 0.0,
                feasibility: 0.0,
                iterations: 0,
                converged: true,
            };
        }
        let mut lambda = vec![0.0f64; m];
        let mut s = vec![0.0f64; n];
        let mut iterations = 0;
        let mut converged = false;
        let mut t_prev = 1.0f64;

        let dual_value = |s: &[f64], lambda: &[f64]| -> f64 {
            let rho = self.rho_from(s);
            lambda.iter().sum::<f64>() - (self.p - 1.0) * self.objective(&rho)
        };

        while iterations < max_iter {
            iterations += 1;
            let rho = self.rho_from(&s);
            // Projected ascent direction.
            let mut dir = vec![0.0f64; m];
            let mut grad_dot = 0.0f64;
            for j in 0..m {
                let gj = 1.0 - self.rows[j].dot(&rho);
                let dj = if lambda[j] == 0.0 { gj.max(0.0) } else { gj };
                dir[j] = dj;
                grad_dot += gj * dj;
            }
            if grad_dot <= 0.0 {
                converged = true;
                break;
            }
            // Image of the direction in rho-space.
            let mut a_dir = vec![0.0f64; n];
            for (j, row) in self.rows.iter().enumerate() {
                if dir[j] != 0.0 {
                    for (&x, &c) in row.idx.iter().zip(&row.coeff) {
                        a_dir[x as usize] += dir[j] * c;
                    }
                }
            }
            let t = if self.p == 2.0 {
                let denom: f64 = a_dir
                    .iter()
                    .zip(&self.weights)
                    .map(|(&v, &w)| v * v / (2.0 * w))
                    .sum();
                if denom <= 0.0 {
                    converged = true;
                    break;
                }
                grad_dot / denom
            } else {
                // Armijo search along the projection arc: accept t when the
                // dual gain covers a fixed fraction of the first-order gain
                // predicted for the projected displacement. The initial step
                // never collapses below 1, so short accepted steps cannot
                // strand later iterations.
                let grad: Vec<f64> = (0..m).map(|j| 1.0 - self.rows[j].dot(&rho)).collect();
                let base = dual_value(&s, &lambda);
                let mut t = (2.0 * t_prev).max(1.0);
                let mut accepted = None;
                for _ in 0..100 {
                    let mut s_try = s.clone();
                    let mut l_sum = 0.0;
                    let mut proj_dot = 0.0;
                    for j in 0..m {
                        let nl = (lambda[j] + t * dir[j]).max(0.0);
                        let dl = nl - lambda[j];
                        if dl != 0.0 {
                            let row = &self.rows[j];
                            for (&x, &c) in row.idx.iter().zip(&row.coeff) {
                                s_try[x as usize] += dl * c;
                            }
                        }
                        proj_dot += grad[j] * dl;
                        l_sum += nl;
                    }
                    let rho_try = self.rho_from(&s_try);
                    let value_try = l_sum - (self.p - 1.0) * self.objective(&rho_try);
                    if value_try > base && value_try - base >= 0.1 * proj_dot {
                        accepted = Some(t);
                        break;
                    }
                    t *= 0.5;
                }
                match accepted {
                    Some(t) => t,
                    None => {
                        converged = true;
                        break;
                    }
                }
            };
            t_prev = t;
            for j in 0..m {
                let nl = (lambda[j] + t * dir[j]).max(0.0);
                let dl = nl - lambda[j];
                if dl != 0.0 {
                    let row = &self.rows[j];
                    for (&x, &c) in row.idx.iter().zip(&row.coeff) {
                        s[x as usize] += dl * c;
                    }
                }
                lambda[j] = nl;
            }
            if iterations % 16 == 0 {
                let (_, feas, gap) = self.stats(&s, &lambda);
                if feas <= tol && gap <= tol {
                    converged = true;
                    break;
                }
            }
        }
        let rho = self.rho_from(&s);
        let (value, feas, gap) = self.stats(&s, &lambda);
        ModulusSolution {
            rho,
            dual: lambda,
            value,
            gap,
            feasibility: feas,
            iterations,
            converged: converged && feas <= tol && gap <= tol,
        }
    }
}

/// minimize 1/2 z' diag(q) z  s.t.  rows . z <= b, with q > 0 entrywise.
#[derive(Debug, Clone)]
pub struct DiagQp {
    pub q: Vec<f64>,
    pub rows: Vec<SparseRow>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: Vec<f64>,
    pub dual: Vec<f64>,
    pub feasibility: f64,
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl DiagQp {
    /// Hildreth's cyclic coordinate method on the dual: z = -Q^-1 A' lambda.
    pub fn solve_hildreth(&self, tol: f64, max_sweeps: usize) -> QpSolution {
        let n = self.q.len();
        let m = self.rows.len();
        let mut lambda = vec![0.0f64; m];
        let mut z = vec![0.0f64; n];
        let q_norm: Vec<f64> = self
            .rows
            .iter()
            .map(|row| {
                row.idx
                    .iter()
                    .zip(&row.coeff)
                    .map(|(&x, &c)| c * c / self.q[x as usize])
                    .sum()
            })
            .collect();
        let scale = self
            .b
            .iter()
            .map(|v| v.abs())
            .fold(1.0f64, f64::max);

        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < max_sweeps {
            sweeps += 1;
            let mut moved = 0.0f64;
            for j in 0..m {
                if q_norm[j] == 0.0 {
                    continue;
                }
                let r = self.rows[j].dot(&z) - self.b[j];
                let new_l = (lambda[j] + r / q_norm[j]).max(0.0);
                let dl = new_l - lambda[j];
                if dl != 0.0 {
                    lambda[j] = new_l;
                    let row = &self.rows[j];
                    for (&x, &c) in row.idx.iter().zip(&row.coeff) {
                        z[x as usize] -= dl * c / self.q[x as usize];
                    }
                    moved = moved.max(dl.abs() * q_norm[j].sqrt());
                }
            }
            if moved <= tol * 1e-3 || sweeps == max_sweeps {
                let feas = self
                    .rows
                    .iter()
                    .zip(&self.b)
                    .map(|(row, &b)| row.dot(&z) - b)
                    .fold(0.0f64, f64::max);
                let primal: f64 = z.iter().zip(&self.q).map(|(&v, &q)| 0.5 * q * v * v).sum();
                let lam_b: f64 = lambda.iter().zip(&self.b).map(|(&l, &b)| l * b).sum();
                let gap = (2.0 * primal + lam_b).abs() / primal.abs().max(scale);
                if feas <= tol && gap <= tol.max(1e-12) {
                    converged = true;
                    break;
                }
                if sweeps == max_sweeps {
                    break;
                }
            }
        }
        let feas = self
            .rows
            .iter()
            .zip(&self.b)
            .map(|(row, &b)| row.dot(&z) - b)
            .fold(0.0f64, f64::max);
        let primal: f64 = z.iter().zip(&self.q).map(|(&v, &q)| 0.5 * q * v * v).sum();
        let lam_b: f64 = lambda.iter().zip(&self.b).map(|(&l, &b)| l * b).sum();
        let gap = (2.0 * primal + lam_b).abs() / primal.abs().max(scale);
        QpSolution { z, dual: lambda, feasibility: feas, gap, iterations: sweeps, converged }
    }
}
