//! Whitney-type extension pipeline: from f known on a compact core K (and
//! vanishing outside B(x0, R)) to a globally defined f~ built by infimizing
//! penalized admissible paths, with every promised property re-checked on
//! the cloud and reported.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::fields::{
    build_aux_triple, good_sequence, local_lip_gradient, lp_energy, AuxTriple, ScalarField,
};
use crate::infimize::{admissible_extension_value, discrete_ug_check, select_indices};
use crate::space::{MetricMeasureSpace, PointSet, SetLabel};
use crate::Result;

/// Input data for the extension: f and an upper-gradient seed g_star, both
/// supported in B(x0, R), with f continuous (finite) on K and g_star bounded
/// on K.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtensionProblem {
    pub f: ScalarField,
    pub g_star: ScalarField,
    pub k: PointSet,
    pub x0: usize,
    pub r: f64,
    /// Energy slack for the gradient bound; the internal good-sequence budget
    /// is eps * 2^-5, so eps must lie in (0, 32).
    pub eps: f64,
    /// Integrability exponent for the energy comparison.
    #[serde(default = "default_p")]
    pub p: f64,
}

fn default_p() -> f64 {
    2.0
}

impl ExtensionProblem {
    pub fn validate(&self, space: &MetricMeasureSpace) -> Result<()> {
        let n = space.len();
        if self.f.len() != n || self.g_star.len() != n {
            return Err(Error::InvalidInput("field lengths must match the space".into()));
        }
        if self.k.is_empty() {
            return Err(Error::InvalidInput("extension needs a nonempty K".into()));
        }
        if self.x0 >= n {
            return Err(Error::InvalidInput(format!("x0 = {} out of bounds", self.x0)));
        }
        if !(self.r > 0.0) {
            return Err(Error::InvalidInput(format!("radius must be positive, got {}", self.r)));
        }
        if !(self.p >= 1.0) {
            return Err(Error::InvalidInput(format!("p must be >= 1, got {}", self.p)));
        }
        if !(self.eps > 0.0 && self.eps < 32.0) {
            return Err(Error::InvalidInput(format!(
                "eps must lie in (0, 32) so the internal budget eps/32 is a valid slack, got {}",
                self.eps
            )));
        }
        if !self.f.is_finite() {
            return Err(Error::InvalidInput("f must be finite".into()));
        }
        if self.g_star.iter().any(|v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("g_star must be finite and nonnegative".into()));
        }
        for x in self.k.iter() {
            if !(space.dist(self.x0, x) < self.r) {
                return Err(Error::InvalidInput(format!(
                    "K must sit inside B(x0, R); point {x} is at distance {}",
                    space.dist(self.x0, x)
                )));
            }
        }
        for x in 0..n {
            if space.dist(self.x0, x) >= self.r && self.f.get(x) != 0.0 {
                return Err(Error::InvalidInput(format!(
                    "f must vanish outside B(x0, R); nonzero at point {x}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub pass: bool,
    /// Margin by which the property held (negative = violation size).
    pub slack: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtensionDiagnostics {
    /// Property (1): sup |f~| <= sup_K |f|.
    pub sup_bound: PropertyCheck,
    /// Property (2): f~ = f on K and f~ = 0 off B(x0, R).
    pub agreement: PropertyCheck,
    /// Property (4): energy off K of the verification gradient against the
    /// seed energy plus eps, both in the rescaled metric.
    pub energy: PropertyCheck,
    pub energy_lhs: f64,
    pub energy_rhs: f64,
    /// Verification-gradient radius: the cloud's connectivity radius.
    pub delta_cloud: f64,
    /// Metric rescale factor applied to enforce d(K, X \ B(x0,R)) >= 1.
    pub rescale_factor: f64,
    /// Which case of the scaling convention the instance is in.
    pub exterior_empty: bool,
    pub stopping_shell: usize,
    pub indices: Vec<usize>,
}

/// The computed extension together with everything needed to audit it. All
/// fields live in the rescaled metric carried by `scaled_space`.
#[derive(Debug, Clone)]
pub struct ExtensionResult {
    pub f_tilde: ScalarField,
    pub x0: usize,
    pub k_set: PointSet,
    pub aux: AuxTriple,
    pub c_set: PointSet,
    pub v_set: PointSet,
    pub scaled_space: MetricMeasureSpace,
    pub g_star_scaled: ScalarField,
    pub m_bound: f64,
    pub diagnostics: ExtensionDiagnostics,
}

/// Serializable report per the external interface: f_tilde, the selected
/// index sequence, and the per-property pass/slack table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtensionReport {
    pub f_tilde: Vec<f64>,
    pub aux: AuxIndices,
    pub diagnostics: ExtensionDiagnostics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuxIndices {
    pub indices: Vec<usize>,
}

impl ExtensionResult {
    pub fn report(&self) -> ExtensionReport {
        ExtensionReport {
            f_tilde: self.f_tilde.values().to_vec(),
            aux: AuxIndices { indices: self.aux.indices.clone() },
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn all_structural_pass(&self) -> bool {
        self.diagnostics.sup_bound.pass
            && self.diagnostics.agreement.pass
            && self.diagnostics.energy.pass
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExtensionConfig {
    /// Search cap per level for index selection.
    pub index_cap: usize,
    /// Override for the dyadic ladder depth; by default it stops at the
    /// cloud's minimum positive distance scale.
    pub depth: Option<usize>,
}

impl Default for ExtensionConfig {
    fn default() -> Self {
        ExtensionConfig { index_cap: crate::infimize::SELECT_INDICES_CAP, depth: None }
    }
}

/// Runs the extension pipeline: rescale the metric, build the modulus of
/// continuity and good sequence, select the index ladder, assemble the
/// D/G/penalty triple, infimize over admissible paths, and re-check the
/// promised properties.
pub fn whitney_extend(
    problem: &ExtensionProblem,
    space: &MetricMeasureSpace,
    config: &ExtensionConfig,
) -> Result<ExtensionResult> {
    problem.validate(space)?;
    let n = space.len();
    let k = &problem.k;

    // Exterior of the open ball B(x0, R).
    let ball_r = space.ball(problem.x0, problem.r);
    let exterior = space.complement(&ball_r);
    let exterior_empty = exterior.is_empty();

    // Enforce d(K, exterior) >= 1 by the exact rescale factor; slope-like
    // data transforms inversely so that g * d is invariant.
    let factor = if exterior_empty {
        1.0
    } else {
        let gap = k.iter().map(|x| space.dist_to_set(x, &exterior)).fold(f64::INFINITY, f64::min);
        1.0 / gap
    };
    let scaled_space = space.scale_metric(factor)?;
    let g_star_scaled = problem.g_star.map("g_star", |v| v / factor);
    let r_scaled = problem.r * factor;

    let (c_set, v_set) = if exterior_empty {
        (
            PointSet::new(SetLabel::C, k.iter()),
            scaled_space.all_points(),
        )
    } else {
        let v = scaled_space.closed_ball(problem.x0, 2.0 * r_scaled);
        let inner = scaled_space.ball(problem.x0, r_scaled);
        let annulus = PointSet::new(
            SetLabel::Generic,
            v.iter().filter(|&x| !inner.contains(x)),
        );
        (PointSet::new(SetLabel::C, k.iter().chain(annulus.iter())), v)
    };

    let m_bound = problem.f.sup_abs_on(k);

    // Good sequence from the seed with the split budget: the power bound
    // carries eps * 2^-5 <= eps * 2^-4 into property (4).
    let eps_budget = problem.eps * 2f64.powi(-5);
    let seq = good_sequence(&g_star_scaled, eps_budget, problem.p, problem.x0, Some(k), &scaled_space)?;

    // Ladder depth: deepest populated dyadic shell plus the two extra levels
    // the gap function reads, floored at 3.
    let depth = config.depth.unwrap_or_else(|| {
        let mut deepest = 1usize;
        for x in 0..n {
            if !k.contains(x) {
                let d = scaled_space.dist_to_set(x, k);
                if d > 0.0 && d < 0.5 {
                    let mut shell = 1usize;
                    while d < 2f64.powi(-(shell as i32) - 1) && shell < 40 {
                        shell += 1;
                    }
                    deepest = deepest.max(shell);
                }
            }
        }
        (deepest + 2).max(3)
    });

    let indices = select_indices(&problem.f, &seq, &c_set, &v_set, depth, config.index_cap, &scaled_space)?;
    let aux = build_aux_triple(&problem.f, &seq, &indices, k, &scaled_space)?;

    let f_tilde = admissible_extension_value(&scaled_space, &c_set, &v_set, &problem.f, &aux, m_bound)?;

    // Property (1): clamp makes the upper bound structural; check both sides.
    let sup_f_tilde = (0..n).map(|x| f_tilde.get(x).abs()).fold(0.0, f64::max);
    let sup_bound = PropertyCheck { pass: sup_f_tilde <= m_bound, slack: m_bound - sup_f_tilde };

    // Property (2): agreement on K and vanishing off B(x0, R).
    let mut dev = 0.0f64;
    for x in k.iter() {
        dev = dev.max((f_tilde.get(x) - problem.f.get(x)).abs());
    }
    for x in exterior.iter() {
        dev = dev.max(f_tilde.get(x).abs());
    }
    let agreement = PropertyCheck { pass: dev == 0.0, slack: -dev };

    // Property (4): verification gradient at the connectivity radius.
    let delta_cloud = scaled_space.connectivity_radius();
    let g_ver = local_lip_gradient(&f_tilde, delta_cloud, &scaled_space);
    let off_k = |field: &ScalarField| -> ScalarField {
        ScalarField::new(
            "restricted",
            (0..n).map(|x| if k.contains(x) { 0.0 } else { field.get(x) }).collect(),
        )
    };
    let energy_lhs = lp_energy(&off_k(&g_ver), problem.p, &scaled_space);
    let energy_rhs = lp_energy(&off_k(&g_star_scaled), problem.p, &scaled_space) + problem.eps;
    let energy = PropertyCheck { pass: energy_lhs <= energy_rhs, slack: energy_rhs - energy_lhs };

    let diagnostics = ExtensionDiagnostics {
        sup_bound,
        agreement,
        energy,
        energy_lhs,
        energy_rhs,
        delta_cloud,
        rescale_factor: factor,
        exterior_empty,
        stopping_shell: aux.stopping_shell,
        indices: indices.clone(),
    };

    Ok(ExtensionResult {
        f_tilde,
        x0: problem.x0,
        k_set: k.clone(),
        aux,
        c_set,
        v_set,
        scaled_space,
        g_star_scaled,
        m_bound,
        diagnostics,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinuityCheck {
    pub pass: bool,
    /// Largest violation of f~(y) <= f(x) + P(d(x,y)) + G(x) d(x,y) over
    /// all x in K, y in V (nonpositive when the table passes).
    pub max_violation: f64,
    /// Smallest margin observed, with the attaining pair.
    pub min_slack: f64,
    pub worst_pair: (usize, usize),
}

/// Exhaustive finite analogue of continuity at the boundary of K: the
/// one-jump path (x, y) is always admissible, so its cost dominates f~(y).
pub fn continuity_surrogate_check(
    result: &ExtensionResult,
    f: &ScalarField,
    k: &PointSet,
) -> ContinuityCheck {
    let space = &result.scaled_space;
    let tol = 1e-12 * (1.0 + result.m_bound.abs());
    let mut max_violation = f64::NEG_INFINITY;
    let mut min_slack = f64::INFINITY;
    let mut worst = (0usize, 0usize);
    for x in k.iter() {
        for y in result.v_set.iter() {
            let d = space.dist(x, y);
            let bound = f.get(x) + result.aux.penalty.eval(d) + result.aux.g_cand.get(x) * d;
            let slack = bound - result.f_tilde.get(y);
            if slack < min_slack {
                min_slack = slack;
                worst = (x, y);
            }
            max_violation = max_violation.max(-slack);
        }
    }
    ContinuityCheck { pass: max_violation <= tol, max_violation, min_slack, worst_pair: worst }
}

/// Re-validates clause (i) of the triple: each selected level i_n is an
/// (1/i_n, 2^-n)-discrete upper gradient for f on (C, V). Used by fixtures
/// and the verification suite.
pub fn validate_index_ladder(
    result: &ExtensionResult,
    f: &ScalarField,
    seq_source: &ScalarField,
    eps: f64,
    p: f64,
) -> Result<bool> {
    let space = &result.scaled_space;
    let seq = good_sequence(seq_source, eps * 2f64.powi(-5), p, result.x0, Some(&result.k_set), space)?;
    for (n, &i) in result.aux.indices.iter().enumerate() {
        let level = seq.level(i, space);
        let check = discrete_ug_check(
            f,
            &level,
            1.0 / i as f64,
            2f64.powi(-(n as i32 + 1)),
            &result.c_set,
            &result.v_set,
            space,
        )?;
        if !check.pass {
            return Ok(false);
        }
    }
    Ok(true)
}


#[cfg(test)]
mod tests {
    use super::*;

    fn chain_problem(n: usize, k_len: usize) -> (MetricMeasureSpace, ExtensionProblem) {
        // Points on a line with spacing 0.08, K at the left end, f a ramp on
        // K and zero past the support radius.
        let h = 0.08;
        let coords: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 * h]).collect();
        let space = MetricMeasureSpace::from_coords(coords, vec![h; n]).unwrap();
        let k = PointSet::new(SetLabel::K, 0..k_len);
        let r = (k_len as f64 + 2.0) * h;
        let mut f_vals = vec![0.0; n];
        for x in 0..k_len {
            f_vals[x] = 0.3 + 0.5 * (x as f64 / k_len as f64);
        }
        let f = ScalarField::new("f", f_vals);
        let g0 = local_lip_gradient(&f, 2.0 * h, &space);
        let g_star = ScalarField::new(
            "g_star",
            (0..n)
                .map(|x| if space.dist(0, x) < r { g0.get(x) * 1.5 + 0.4 } else { 0.0 })
                .collect(),
        );
        let problem = ExtensionProblem { f, g_star, k, x0: 0, r, eps: 1.0, p: 2.0 };
        (space, problem)
    }

    #[test]
    fn constant_f_extends_constantly_on_k() {
        let h = 0.1;
        let n = 20;
        let coords: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 * h]).collect();
        let space = MetricMeasureSpace::from_coords(coords, vec![h; n]).unwrap();
        let k = PointSet::new(SetLabel::K, 0..4);
        let r = 0.8;
        let f = ScalarField::new(
            "f",
            (0..n).map(|x| if space.dist(0, x) < r && x < 4 { 0.6 } else { 0.0 }).collect(),
        );
        let g_star = ScalarField::new(
            "g_star",
            (0..n).map(|x| if space.dist(0, x) < r { 0.5 } else { 0.0 }).collect(),
        );
        let problem = ExtensionProblem { f, g_star, k: k.clone(), x0: 0, r, eps: 2.0, p: 2.0 };
        let result = whitney_extend(&problem, &space, &ExtensionConfig::default()).unwrap();
        for x in k.iter() {
            assert_eq!(result.f_tilde.get(x), 0.6);
        }
        assert!(result.diagnostics.sup_bound.pass);
        assert!(result.diagnostics.agreement.pass);
        // Bounded by M = 0.6 everywhere.
        for x in 0..n {
            assert!(result.f_tilde.get(x).abs() <= 0.6 + 1e-15);
        }
    }

    #[test]
    fn single_point_core_with_zero_f() {
        let coords: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.1]).collect();
        let space = MetricMeasureSpace::from_coords(coords, vec![0.1; 10]).unwrap();
        let k = PointSet::new(SetLabel::K, [0]);
        let f = ScalarField::zeros("f", 10);
        let g_star = ScalarField::new(
            "g",
            (0..10).map(|x| if x < 5 { 0.3 } else { 0.0 }).collect(),
        );
        let problem = ExtensionProblem { f, g_star, k, x0: 0, r: 0.45, eps: 1.0, p: 2.0 };
        let result = whitney_extend(&problem, &space, &ExtensionConfig::default()).unwrap();
        // M = 0: the clamp pins f~ to <= 0 and Phi >= 0 pins it from below.
        for x in result.v_set.iter() {
            assert_eq!(result.f_tilde.get(x), 0.0);
        }
        assert!(result.all_structural_pass());
    }

    #[test]
    fn chain_fixture_passes_all_diagnostics() {
        let (space, problem) = chain_problem(24, 6);
        let result = whitney_extend(&problem, &space, &ExtensionConfig::default()).unwrap();
        assert!(result.diagnostics.sup_bound.pass, "{:?}", result.diagnostics);
        assert!(result.diagnostics.agreement.pass, "{:?}", result.diagnostics);
        assert!(
            result.diagnostics.energy.pass,
            "energy {} vs {}",
            result.diagnostics.energy_lhs,
            result.diagnostics.energy_rhs
        );
        let cont = continuity_surrogate_check(&result, &problem.f, &problem.k);
        assert!(cont.pass, "continuity violation {}", cont.max_violation);

        // The selected ladder really is a discrete upper gradient per level.
        assert!(validate_index_ladder(&result, &problem.f, &result.g_star_scaled, problem.eps, problem.p).unwrap());
    }

    #[test]
    fn impossible_depth_exhausts_cap() {
        let (space, problem) = chain_problem(16, 4);
        let config = ExtensionConfig { index_cap: 1, depth: Some(3) };
        // With a cap of one index total, the strictly-increasing ladder of
        // depth 3 cannot be built.
        let err = whitney_extend(&problem, &space, &config).unwrap_err();
        assert!(matches!(err, Error::IndexCapExhausted { .. }));
    }

    #[test]
    fn idempotence_on_extended_data() {
        let (space, problem) = chain_problem(20, 5);
        let result = whitney_extend(&problem, &space, &ExtensionConfig::default()).unwrap();

        // Re-run with K grown to every C-pinned point and f replaced by f~,
        // in the already-rescaled metric.
        let space2 = result.scaled_space.clone();
        let r2 = problem.r * result.diagnostics.rescale_factor;
        let k2 = PointSet::new(
            SetLabel::K,
            result.c_set.iter().filter(|&x| space2.dist(problem.x0, x) < r2),
        );
        let problem2 = ExtensionProblem {
            f: result.f_tilde.clone(),
            g_star: result.g_star_scaled.clone(),
            k: k2,
            x0: problem.x0,
            r: r2,
            eps: problem.eps,
            p: problem.p,
        };
        let result2 = whitney_extend(&problem2, &space2, &ExtensionConfig::default()).unwrap();
        for x in result.v_set.iter() {
            assert!(
                (result2.f_tilde.get(x) - result.f_tilde.get(x)).abs() <= 1e-9,
                "idempotence broke at {x}: {} vs {}",
                result2.f_tilde.get(x),
                result.f_tilde.get(x)
            );
        }
    }
}
