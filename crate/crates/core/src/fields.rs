//! Scalar fields on the point cloud and the auxiliary functions the
//! constructions need: L^p norms, modulus of continuity, good-function
//! sequences, the gap/candidate-gradient/penalty triple, partition of unity,
//! truncation, and the discrete local-Lipschitz gradient surrogate.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::space::{exhaustion, MetricMeasureSpace, PointSet};
use crate::Result;

/// One real value per point of the parent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    name: String,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        ScalarField { name: name.into(), values }
    }

    pub fn constant(name: impl Into<String>, n: usize, value: f64) -> Self {
        ScalarField { name: name.into(), values: vec![value; n] }
    }

    pub fn zeros(name: impl Into<String>, n: usize) -> Self {
        Self::constant(name, n, 0.0)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn set(&mut self, i: usize, v: f64) {
        self.values[i] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied()
    }

    pub fn map(&self, name: impl Into<String>, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField::new(name, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Pointwise check that every value is finite.
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Maximum of |f| over a set.
    pub fn sup_abs_on(&self, set: &PointSet) -> f64 {
        set.iter().map(|x| self.values[x].abs()).fold(0.0, f64::max)
    }

    /// Minimum over a set.
    pub fn min_on(&self, set: &PointSet) -> f64 {
        set.iter().map(|x| self.values[x]).fold(f64::INFINITY, f64::min)
    }
}

impl std::ops::Index<usize> for ScalarField {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Discrete weighted L^p norm: (sum |g(x)|^p mu_x)^(1/p).
pub fn lp_norm(g: &ScalarField, p: f64, space: &MetricMeasureSpace) -> f64 {
    lp_energy(g, p, space).powf(1.0 / p)
}

/// The p-th power of the L^p norm: sum |g(x)|^p mu_x.
pub fn lp_energy(g: &ScalarField, p: f64, space: &MetricMeasureSpace) -> f64 {
    g.values
        .iter()
        .zip(space.masses())
        .map(|(&v, &m)| v.abs().powf(p) * m)
        .sum()
}

/// Modulus of continuity of f restricted to K, as an exact step function on
/// the sorted pairwise distances within K: omega(d) = max { |f(x)-f(y)| :
/// x,y in K, d(x,y) <= d }.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaTable {
    /// (distance, cumulative max jump), strictly increasing in both columns.
    steps: Vec<(f64, f64)>,
}

impl OmegaTable {
    pub fn eval(&self, delta: f64) -> f64 {
        if delta < 0.0 {
            return 0.0;
        }
        // Largest step with distance <= delta.
        let mut value = 0.0;
        for &(d, w) in &self.steps {
            if d <= delta {
                value = w;
            } else {
                break;
            }
        }
        value
    }

    pub fn steps(&self) -> &[(f64, f64)] {
        &self.steps
    }

    /// omega over the whole distance range (= max |f(x)-f(y)| over K).
    pub fn sup(&self) -> f64 {
        self.steps.last().map_or(0.0, |&(_, w)| w)
    }
}

pub fn modulus_of_continuity(
    f: &ScalarField,
    k: &PointSet,
    space: &MetricMeasureSpace,
) -> Result<OmegaTable> {
    if k.is_empty() {
        return Err(Error::InvalidInput("modulus of continuity needs a nonempty K".into()));
    }
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    let members = k.members();
    for (a, &x) in members.iter().enumerate() {
        for &y in &members[a + 1..] {
            pairs.push((space.dist(x, y), (f.get(x) - f.get(y)).abs()));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut steps: Vec<(f64, f64)> = Vec::new();
    let mut running = 0.0f64;
    for (d, jump) in pairs {
        running = running.max(jump);
        match steps.last_mut() {
            Some(last) if last.0 == d => last.1 = running,
            Some(last) if running > last.1 => steps.push((d, running)),
            None if running > 0.0 => steps.push((d, running)),
            _ => {}
        }
    }
    Ok(OmegaTable { steps })
}

/// Penalty function on first jumps: 2M above 1/i_3, dyadic omega sums below,
/// zero at zero. Ties at thresholds resolve to the branch whose interval is
/// closed on the left, matching 1/i_{n+1} <= r < 1/i_n.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenaltyFunction {
    indices: Vec<usize>,
    plateau: f64,
    omega: OmegaTable,
}

impl PenaltyFunction {
    pub fn new(indices: Vec<usize>, sup_abs_f: f64, omega: OmegaTable) -> Result<Self> {
        if indices.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "penalty needs at least indices i_1..i_3, got {}",
                indices.len()
            )));
        }
        if indices.windows(2).any(|w| w[1] <= w[0]) || indices[0] == 0 {
            return Err(Error::InvalidInput("index sequence must be strictly increasing and positive".into()));
        }
        Ok(PenaltyFunction { indices, plateau: 2.0 * sup_abs_f, omega })
    }

    pub fn plateau(&self) -> f64 {
        self.plateau
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn omega(&self) -> &OmegaTable {
        &self.omega
    }

    pub fn eval(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        let inv = |n: usize| 1.0 / self.indices[n - 1] as f64;
        if r >= inv(3) {
            return self.plateau;
        }
        let deepest = self.indices.len();
        for n in 3..deepest {
            if r >= inv(n + 1) {
                // 1/i_{n+1} <= r < 1/i_n
                return self.omega.eval(2f64.powi(1 - n as i32)) + self.omega.eval(r);
            }
        }
        // Below the deepest threshold: extend the last dyadic branch.
        self.omega.eval(2f64.powi(1 - deepest as i32)) + self.omega.eval(r)
    }
}

/// Good sequence of functions built from a base density g: Lipschitz
/// regularizations plus exhaustion-driven dyadic correction terms, with an
/// everywhere-positive lower-semicontinuous limit.
#[derive(Debug, Clone)]
pub struct GoodSequence {
    base: ScalarField,
    eps_user: f64,
    eps_internal: f64,
    p: f64,
    x0: usize,
    /// E_n, stabilized at the full space after `levels.len()` entries.
    exhaustion_sets: Vec<PointSet>,
    /// Correction term fields, one per dyadic level n = 1..=cover.
    terms: Vec<Vec<f64>>,
    /// Ball masses mu(B(x0, n+1)) for n = 1..=cover.
    ball_mass: Vec<f64>,
    limit: ScalarField,
}

impl GoodSequence {
    /// Number of dyadic correction levels after which everything is constant.
    pub fn cover_level(&self) -> usize {
        self.terms.len()
    }

    pub fn eps_internal(&self) -> f64 {
        self.eps_internal
    }

    pub fn eps_user(&self) -> f64 {
        self.eps_user
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn base(&self) -> &ScalarField {
        &self.base
    }

    /// Pointwise limit of the sequence, with the constant tail of the
    /// correction series summed in closed form.
    pub fn limit(&self) -> &ScalarField {
        &self.limit
    }

    pub fn x0(&self) -> usize {
        self.x0
    }

    pub fn exhaustion_sets(&self) -> &[PointSet] {
        &self.exhaustion_sets
    }

    /// The proof-level positivity floor eta_i on B(x0, i).
    pub fn eta(&self, i: usize) -> f64 {
        let mass = if i <= self.ball_mass.len() {
            self.ball_mass[i - 1]
        } else {
            *self.ball_mass.last().unwrap()
        };
        self.eps_internal * 8f64.powi(-(i as i32)) / (mass + 1.0)
    }

    /// Level i of the sequence (1-based), computed per the dyadic formula.
    pub fn level(&self, i: usize, space: &MetricMeasureSpace) -> ScalarField {
        assert!(i >= 1, "levels are 1-based");
        let n_pts = self.base.len();
        let mut values = lipschitz_regularization(&self.base, i as f64, space);
        for n in 1..=i {
            if n <= self.terms.len() {
                for (v, t) in values.iter_mut().zip(&self.terms[n - 1]) {
                    *v += t;
                }
            } else {
                // Stabilized region: E_n is the whole space and psi_n = 1, so
                // the term is a constant.
                let c = self.eps_internal * 8f64.powi(-(n as i32)) / (self.ball_mass.last().unwrap() + 1.0);
                for v in values.iter_mut() {
                    *v += c;
                }
            }
        }
        debug_assert_eq!(values.len(), n_pts);
        ScalarField::new(format!("{}~{}", self.base.name(), i), values)
    }
}

/// Pasch-Hausdorff regularization: g_i(x) = min over y of g(y) + slope * d(x,y).
/// Exact all-pairs scan; increasing in the slope and equal to g once the slope
/// dominates every pairwise difference quotient.
pub fn lipschitz_regularization(g: &ScalarField, slope: f64, space: &MetricMeasureSpace) -> Vec<f64> {
    let n = g.len();
    let mut out = vec![0.0; n];
    for x in 0..n {
        let mut best = g.get(x);
        for y in 0..n {
            if y != x {
                best = best.min(g.get(y) + slope * space.dist(x, y));
            }
        }
        out[x] = best;
    }
    out
}

/// Build the good sequence for `g` with slack `eps` (in (0,1)), exponent `p`,
/// center `x0`, and optional compact core `k` kept inside every exhaustion
/// level. The internal slack is eps / (p (||g||_p + 1)^(p-1)), which makes
/// both the norm bound ||g~||_p <= ||g||_p + eps and the p-th power bound
/// hold.
pub fn good_sequence(
    g: &ScalarField,
    eps: f64,
    p: f64,
    x0: usize,
    k: Option<&PointSet>,
    space: &MetricMeasureSpace,
) -> Result<GoodSequence> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidInput(format!("good_sequence requires eps in (0,1), got {eps}")));
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidInput(format!("good_sequence requires p >= 1, got {p}")));
    }
    if g.values().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("good_sequence requires a finite density g >= 0".into()));
    }
    let norm = lp_norm(g, p, space);
    let eps_internal = eps / (p * (norm + 1.0).powf(p - 1.0));
    let sets = exhaustion(space, x0, eps_internal, p, k)?;
    build_good_sequence(g, eps, eps_internal, p, x0, sets, space)
}

/// Same construction with caller-supplied exhaustion sets; the deficit bound
/// mu(B(x0, n+1) \ E_n) <= eps_int^p 2^(-4 p n) is validated per level.
pub fn good_sequence_with_exhaustion(
    g: &ScalarField,
    eps: f64,
    eps_internal: f64,
    p: f64,
    x0: usize,
    sets: Vec<PointSet>,
    space: &MetricMeasureSpace,
) -> Result<GoodSequence> {
    for (idx, level) in sets.iter().enumerate() {
        let n = idx + 1;
        let deficit = crate::space::exhaustion_deficit(space, x0, n, level);
        let budget = eps_internal.powf(p) * 2f64.powf(-4.0 * p * n as f64);
        if deficit > budget {
            return Err(Error::Construction(format!(
                "exhaustion level {n}: deficit {deficit} exceeds budget {budget}"
            )));
        }
    }
    build_good_sequence(g, eps, eps_internal, p, x0, sets, space)
}

fn build_good_sequence(
    g: &ScalarField,
    eps_user: f64,
    eps_internal: f64,
    p: f64,
    x0: usize,
    mut sets: Vec<PointSet>,
    space: &MetricMeasureSpace,
) -> Result<GoodSequence> {
    let n_pts = space.len();
    // Dyadic levels are materialized until both the exhaustion stabilizes and
    // the cutoff psi_n covers the whole cloud.
    let max_d = (0..n_pts).map(|x| space.dist(x0, x)).fold(0.0, f64::max);
    let cover = (max_d.ceil() as usize).max(sets.len()).max(1);
    while sets.len() < cover {
        let last = sets.last().unwrap().clone();
        sets.push(last.union(&space.ball(x0, (sets.len() + 2) as f64)));
    }

    let mut terms = Vec::with_capacity(cover);
    let mut ball_mass = Vec::with_capacity(cover);
    for n in 1..=cover {
        let ball = space.ball(x0, (n + 1) as f64);
        let mu = space.set_mass(&ball);
        ball_mass.push(mu);
        let e_n = &sets[n - 1];
        let coeff = eps_internal * 8f64.powi(-(n as i32)) / (mu + 1.0);
        let term: Vec<f64> = (0..n_pts)
            .map(|x| {
                let d0 = space.dist(x0, x);
                let psi = (n as f64 + 1.0 - d0).min(1.0).max(0.0);
                let gap = space.dist_to_set(x, e_n).min(1.0);
                (n as f64 * gap + coeff) * psi
            })
            .collect();
        terms.push(term);
    }

    // Limit: g plus all terms, with the constant tail past `cover` summed in
    // closed form (psi = 1, E = X, so the term is eps 8^-n / (mu(X)+1)).
    let mu_full = *ball_mass.last().unwrap();
    let tail = eps_internal * 8f64.powi(-(cover as i32)) / 7.0 / (mu_full + 1.0);
    let mut limit: Vec<f64> = g.values().to_vec();
    for term in &terms {
        for (v, t) in limit.iter_mut().zip(term) {
            *v += t;
        }
    }
    for v in limit.iter_mut() {
        *v += tail;
    }

    Ok(GoodSequence {
        base: g.clone(),
        eps_user,
        eps_internal,
        p,
        x0,
        exhaustion_sets: sets,
        terms,
        ball_mass,
        limit: ScalarField::new(format!("{}~", g.name()), limit),
    })
}

/// Gap function D, candidate upper gradient G, and penalty P, fixed at dyadic
/// length scales from the distance to K.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuxTriple {
    pub d_gap: ScalarField,
    pub g_cand: ScalarField,
    pub penalty: PenaltyFunction,
    pub indices: Vec<usize>,
    /// Deepest dyadic shell that is populated on this cloud.
    pub stopping_shell: usize,
}

/// Builds the triple from the selected index sequence. The shell formulas:
/// D = min(1/i_{n+2}, 2^(-n-3)) on the shell 2^(-n-1) <= d(x,K) < 2^(-n),
/// D = min(1/i_3, 1/8) for d(x,K) >= 1/2, D = 0 on K; G = g_{i_n} on shells,
/// g_{i_3} far away, and the limit g on K.
pub fn build_aux_triple(
    f: &ScalarField,
    seq: &GoodSequence,
    indices: &[usize],
    k: &PointSet,
    space: &MetricMeasureSpace,
) -> Result<AuxTriple> {
    if k.is_empty() {
        return Err(Error::InvalidInput("aux triple needs a nonempty K".into()));
    }
    if indices.len() < 3 {
        return Err(Error::InvalidInput("aux triple needs at least 3 selected indices".into()));
    }
    if indices.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("index sequence must be strictly increasing".into()));
    }
    let n_pts = space.len();
    let deepest = indices.len();

    // Deepest shell actually populated by a non-K point.
    let mut stopping_shell = 3usize;
    for x in 0..n_pts {
        if !k.contains(x) {
            let d = space.dist_to_set(x, k);
            if d < 0.5 {
                let shell = shell_of(d);
                stopping_shell = stopping_shell.max(shell);
            }
        }
    }

    // Materialize the levels we will read: i_n for n <= deepest.
    let levels: Vec<ScalarField> =
        indices.iter().map(|&i| seq.level(i, space)).collect();
    let g_limit = seq.limit();

    let mut d_gap = vec![0.0; n_pts];
    let mut g_cand = vec![0.0; n_pts];
    for x in 0..n_pts {
        if k.contains(x) {
            d_gap[x] = 0.0;
            g_cand[x] = g_limit.get(x);
            continue;
        }
        let d = space.dist_to_set(x, k);
        if d >= 0.5 {
            d_gap[x] = (1.0 / indices[2] as f64).min(0.125);
            g_cand[x] = levels[2].get(x);
        } else {
            let n = shell_of(d);
            let n_d = (n + 2).min(deepest);
            d_gap[x] = (1.0 / indices[n_d - 1] as f64).min(2f64.powi(-(n as i32) - 3));
            let n_g = n.max(3).min(deepest);
            g_cand[x] = levels[n_g - 1].get(x);
        }
    }

    let m = f.sup_abs_on(k);
    let omega = modulus_of_continuity(f, k, space)?;
    let penalty = PenaltyFunction::new(indices.to_vec(), m, omega)?;

    let triple = AuxTriple {
        d_gap: ScalarField::new("D", d_gap),
        g_cand: ScalarField::new("G", g_cand),
        penalty,
        indices: indices.to_vec(),
        stopping_shell,
    };
    validate_aux_triple(&triple, seq, k, space)?;
    Ok(triple)
}

/// Dyadic shell index n >= 1 with 2^(-n-1) <= d < 2^(-n); requires d < 1/2.
fn shell_of(d: f64) -> usize {
    debug_assert!(d > 0.0 && d < 0.5);
    let mut n = 1usize;
    while d < 2f64.powi(-(n as i32) - 1) && n < 60 {
        n += 1;
    }
    n
}

/// Re-validates the pointwise clauses of the aux-triple contract over the
/// cloud, up to the resolution floor.
fn validate_aux_triple(
    t: &AuxTriple,
    seq: &GoodSequence,
    k: &PointSet,
    space: &MetricMeasureSpace,
) -> Result<()> {
    let n_pts = space.len();
    let deepest = t.indices.len();
    let levels: Vec<ScalarField> = t.indices.iter().map(|&i| seq.level(i, space)).collect();
    let limit = seq.limit();
    for x in 0..n_pts {
        let dk = space.dist_to_set(x, k);
        let dv = t.d_gap.get(x);
        let gv = t.g_cand.get(x);
        // (ii)(a) D <= d(x,K)/4; D = 0 exactly on K; D > 0 off K.
        if k.contains(x) {
            if dv != 0.0 {
                return Err(Error::Construction(format!("D({x}) = {dv} nonzero on K")));
            }
            if gv != limit.get(x) {
                return Err(Error::Construction(format!("G({x}) != g on K")));
            }
        } else {
            if !(dv > 0.0) {
                return Err(Error::Construction(format!("D({x}) = {dv} not positive off K")));
            }
            if dv > dk / 4.0 + 1e-15 {
                return Err(Error::Construction(format!("D({x}) = {dv} exceeds d(x,K)/4 = {}", dk / 4.0)));
            }
        }
        // (iii)(a) G >= g_{i_3} everywhere.
        if gv < levels[2].get(x) - 1e-12 {
            return Err(Error::Construction(format!("G({x}) below g_(i_3)")));
        }
        // (iii)(b,c) shell comparisons up to the resolution floor.
        for n in 3..=deepest {
            let li = levels[n - 1].get(x);
            if n > 3 && dk <= 2f64.powi(-(n as i32)) && gv < li - 1e-12 {
                return Err(Error::Construction(format!("G({x}) below g_(i_{n}) at depth {dk}")));
            }
            if dk >= 2f64.powi(-(n as i32) - 1) && !k.contains(x) && gv > li + 1e-12 {
                return Err(Error::Construction(format!("G({x}) above g_(i_{n}) at distance {dk}")));
            }
        }
    }
    // (iv) penalty clauses on a distance grid.
    let probe = penalty_probe_radii(t, space);
    let mut prev = 0.0;
    for &r in &probe {
        let v = t.penalty.eval(r);
        if v + 1e-15 < prev {
            return Err(Error::Construction(format!("penalty not nondecreasing at r = {r}")));
        }
        prev = v;
        if v + 1e-12 < t.penalty.omega().eval(r) {
            return Err(Error::Construction(format!("penalty below omega at r = {r}")));
        }
        if r >= 1.0 / t.indices[2] as f64 && v + 1e-12 < t.penalty.plateau() {
            return Err(Error::Construction(format!("penalty below plateau at r = {r}")));
        }
    }
    Ok(())
}

fn penalty_probe_radii(t: &AuxTriple, space: &MetricMeasureSpace) -> Vec<f64> {
    let mut probe: Vec<f64> = t.indices.iter().map(|&i| 1.0 / i as f64).collect();
    probe.extend(t.indices.iter().map(|&i| 1.0 / i as f64 * 0.999));
    probe.extend(t.penalty.omega().steps().iter().map(|&(d, _)| d));
    let diam = space.diameter();
    probe.extend([diam, diam * 0.5, diam * 0.25, 1e-9]);
    probe.retain(|r| r.is_finite() && *r > 0.0);
    probe.sort_by(f64::total_cmp);
    probe
}

/// Partition of unity subordinate to the dyadic distance shells from a marked
/// boundary set: psi_n = (1 - sum_{k<n} psi_k) min(1, 2^(n+1) d(x, S_{n+1}))
/// where S_i = { y : d(y, boundary) < 2^-i }. The sum telescopes to 1 at
/// every point off the boundary.
pub fn partition_of_unity(
    space: &MetricMeasureSpace,
    boundary: &PointSet,
    levels: Option<usize>,
) -> Vec<ScalarField> {
    let n_pts = space.len();
    let auto = if boundary.is_empty() {
        1
    } else {
        // Stop once 2^-(n-1) is below every positive distance to the boundary;
        // later levels are identically zero.
        let min_pos = (0..n_pts)
            .filter(|&x| !boundary.contains(x))
            .map(|x| space.dist_to_set(x, boundary))
            .fold(f64::INFINITY, f64::min);
        if min_pos.is_finite() {
            (2 - min_pos.log2().floor() as i64).clamp(1, 60) as usize
        } else {
            1
        }
    };
    let n_levels = levels.unwrap_or(auto);

    let mut fields = Vec::with_capacity(n_levels + 1);
    let mut acc = vec![0.0f64; n_pts];
    for n in 0..=n_levels {
        // S_{n+1} = points strictly closer than 2^-(n+1) to the boundary
        // (including the boundary itself).
        let s = PointSet::new(
            crate::space::SetLabel::Generic,
            (0..n_pts).filter(|&x| space.dist_to_set(x, boundary) < 2f64.powi(-(n as i32) - 1)),
        );
        let scale = 2f64.powi(n as i32 + 1);
        let values: Vec<f64> = (0..n_pts)
            .map(|x| {
                let cut = (scale * space.dist_to_set(x, &s)).min(1.0);
                (1.0 - acc[x]) * cut
            })
            .collect();
        for (a, v) in acc.iter_mut().zip(&values) {
            *a += v;
        }
        fields.push(ScalarField::new(format!("psi_{n}"), values));
    }
    fields
}

/// Truncation with radial cutoff: f_M = psi_M clamp(f, -M, M) with
/// psi_M(x) = max(min(2 - d(x0,x)/M, 1), 0).
pub fn truncate_cutoff(
    f: &ScalarField,
    m: f64,
    x0: usize,
    space: &MetricMeasureSpace,
) -> Result<ScalarField> {
    if !(m > 0.0) {
        return Err(Error::InvalidInput(format!("truncate_cutoff requires M > 0, got {m}")));
    }
    let values = (0..f.len())
        .map(|x| {
            let psi = (2.0 - space.dist(x0, x) / m).min(1.0).max(0.0);
            psi * f.get(x).clamp(-m, m)
        })
        .collect();
    Ok(ScalarField::new(format!("{}_trunc", f.name()), values))
}

/// Discrete local-Lipschitz gradient: g_u(x) = max over delta-neighbors of
/// |u(x)-u(y)| / d(x,y), zero when x has no delta-neighbors. The finite-data
/// surrogate for the minimal upper gradient.
pub fn local_lip_gradient(
    u: &ScalarField,
    delta: f64,
    space: &MetricMeasureSpace,
) -> ScalarField {
    let n = u.len();
    let mut out = vec![0.0; n];
    for x in 0..n {
        let mut best = 0.0f64;
        for y in 0..n {
            if y == x {
                continue;
            }
            let d = space.dist(x, y);
            if d <= delta {
                best = best.max((u.get(x) - u.get(y)).abs() / d);
            }
        }
        out[x] = best;
    }
    ScalarField::new(format!("lip_{}", u.name()), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::SetLabel;

    fn unit_line(n: usize) -> MetricMeasureSpace {
        let coords = (0..n).map(|i| vec![i as f64]).collect();
        MetricMeasureSpace::from_coords(coords, vec![1.0; n]).unwrap()
    }

    #[test]
    fn lp_norm_examples() {
        let s1 = MetricMeasureSpace::from_matrix(vec![vec![0.0]], vec![3.0]).unwrap();
        let g = ScalarField::constant("g", 1, 2.0);
        assert!((lp_norm(&g, 2.0, &s1) - 12f64.sqrt()).abs() < 1e-15);

        let s2 = unit_line(2);
        let ones = ScalarField::constant("g", 2, 1.0);
        assert_eq!(lp_norm(&ones, 1.0, &s2), 2.0);
        assert_eq!(lp_norm(&ScalarField::zeros("z", 2), 3.0, &s2), 0.0);
    }

    #[test]
    fn omega_step_function() {
        let s = unit_line(3);
        let k = PointSet::new(SetLabel::K, 0..3);

        let constant = ScalarField::constant("c", 3, 4.0);
        let w = modulus_of_continuity(&constant, &k, &s).unwrap();
        assert_eq!(w.eval(0.5), 0.0);
        assert_eq!(w.eval(10.0), 0.0);

        let f = ScalarField::new("f", vec![0.0, 1.0, 5.0]);
        let w = modulus_of_continuity(&f, &k, &s).unwrap();
        assert_eq!(w.eval(1.0), 4.0);
        assert_eq!(w.eval(2.0), 5.0);
        assert_eq!(w.eval(0.999), 0.0);
        // omega dominates every pairwise jump.
        for x in 0..3 {
            for y in 0..3 {
                assert!(w.eval(s.dist(x, y)) >= (f.get(x) - f.get(y)).abs());
            }
        }
    }

    #[test]
    fn omega_two_points() {
        let s = unit_line(2);
        let k = PointSet::new(SetLabel::K, 0..2);
        let f = ScalarField::new("f", vec![0.0, 3.0]);
        let w = modulus_of_continuity(&f, &k, &s).unwrap();
        assert_eq!(w.eval(0.5), 0.0);
        assert_eq!(w.eval(1.0), 3.0);
        assert_eq!(w.eval(7.0), 3.0);
    }

    #[test]
    fn good_sequence_single_point() {
        let s = MetricMeasureSpace::from_matrix(vec![vec![0.0]], vec![1.0]).unwrap();
        let g = ScalarField::zeros("g", 1);
        let eps = 0.25;
        let seq = good_sequence(&g, eps, 2.0, 0, None, &s).unwrap();
        let limit = seq.limit();
        assert!(limit.get(0) > 0.0);
        assert!(limit.get(0) <= eps);
        assert!(lp_norm(limit, 2.0, &s) <= eps);
    }

    #[test]
    fn good_sequence_monotone_positive_and_norm_bound() {
        // Unit-scale cloud: 16 points with spacing 0.1, so the dyadic terms
        // stay well above the f64 resolution of g = 1.
        let coords: Vec<Vec<f64>> = (0..16).map(|i| vec![i as f64 * 0.1]).collect();
        let s = MetricMeasureSpace::from_coords(coords, vec![1.0; 16]).unwrap();
        let g = ScalarField::constant("g", 16, 1.0);
        let eps = 0.5;
        let p = 2.0;
        let seq = good_sequence(&g, eps, p, 0, None, &s).unwrap();

        let mut prev: Option<ScalarField> = None;
        for i in 1..=20 {
            let level = seq.level(i, &s);
            if let Some(prev) = &prev {
                for x in 0..16 {
                    assert!(level.get(x) >= prev.get(x) - 1e-15, "level {i} not monotone at {x}");
                }
            }
            // Positivity floor eta_i on B(x0, i), per the construction.
            let eta = seq.eta(i);
            assert!(eta > 0.0);
            for x in s.ball(0, i as f64).iter() {
                assert!(level.get(x) >= eta, "level {i} below eta at {x}");
            }
            prev = Some(level);
        }

        // Limit dominates g with a strictly positive margin (finite-space
        // form of the eta_A lower bound).
        let limit = seq.limit();
        let margin = (0..16).map(|x| limit.get(x) - g.get(x)).fold(f64::INFINITY, f64::min);
        assert!(margin > 0.0);
        // Levels never exceed the limit.
        let lv = seq.level(40, &s);
        for x in 0..16 {
            assert!(lv.get(x) <= limit.get(x) + 1e-15);
        }

        // Norm bound, both in norm form and p-th power form.
        let base_norm = lp_norm(&g, p, &s);
        let lim_norm = lp_norm(limit, p, &s);
        assert!(lim_norm <= base_norm + eps + 1e-12);
        assert!(lp_energy(limit, p, &s) <= lp_energy(&g, p, &s) + eps + 1e-12);
    }

    #[test]
    fn good_sequence_positive_for_zero_density() {
        let s = unit_line(5);
        let g = ScalarField::zeros("g", 5);
        let seq = good_sequence(&g, 0.9, 1.5, 2, None, &s).unwrap();
        for x in 0..5 {
            assert!(seq.limit().get(x) > 0.0, "limit not positive at {x}");
        }
    }

    #[test]
    fn good_sequence_bounded_on_k() {
        let s = unit_line(12);
        let mut g = ScalarField::zeros("g", 12);
        g.set(6, 3.0);
        let k = PointSet::new(SetLabel::K, [0, 1]);
        let eps = 0.25;
        let seq = good_sequence(&g, eps, 2.0, 0, Some(&k), &s).unwrap();
        for x in k.iter() {
            assert!(seq.limit().get(x) <= g.get(x) + eps + 1e-15);
        }
    }

    #[test]
    fn good_sequence_custom_exhaustion_respects_budget() {
        let s = unit_line(6);
        let g = ScalarField::constant("g", 6, 1.0);
        // A deliberately leaky exhaustion: drop point 5 from every level; its
        // deficit exceeds the budget once the ball reaches it.
        let leaky: Vec<PointSet> = (1..=6)
            .map(|i| {
                PointSet::new(
                    SetLabel::Generic,
                    s.ball(0, (i + 1) as f64).iter().filter(|&x| x != 5),
                )
            })
            .collect();
        let err =
            good_sequence_with_exhaustion(&g, 0.5, 0.1, 2.0, 0, leaky, &s).unwrap_err();
        assert!(matches!(err, Error::Construction(_)));
    }

    #[test]
    fn lipschitz_regularization_is_exact_floor() {
        let s = unit_line(4);
        let g = ScalarField::new("g", vec![0.0, 10.0, 0.0, 2.0]);
        let r1 = lipschitz_regularization(&g, 1.0, &s);
        // g_1(1) = min(10, 0+1, 0+1, 2+2) = 1.
        assert_eq!(r1[1], 1.0);
        // Large slope reproduces g exactly.
        let r = lipschitz_regularization(&g, 1e6, &s);
        assert_eq!(r, g.values());
        // Monotone in the slope.
        let r2 = lipschitz_regularization(&g, 2.0, &s);
        for x in 0..4 {
            assert!(r1[x] <= r2[x]);
        }
    }

    #[test]
    fn partition_of_unity_no_boundary() {
        let s = unit_line(4);
        let psi = partition_of_unity(&s, &PointSet::empty(SetLabel::Generic), None);
        assert_eq!(psi[0].values(), &[1.0; 4]);
        for field in &psi[1..] {
            assert_eq!(field.values(), &[0.0; 4]);
        }
    }

    #[test]
    fn partition_of_unity_sums_to_one() {
        // Boundary at the left end of a line with mixed spacings.
        let coords: Vec<Vec<f64>> =
            [0.0, 0.05, 0.11, 0.30, 0.55, 1.0, 1.7, 2.5].iter().map(|&x| vec![x]).collect();
        let s = MetricMeasureSpace::from_coords(coords, vec![1.0; 8]).unwrap();
        let boundary = PointSet::new(SetLabel::Generic, [0]);
        let psi = partition_of_unity(&s, &boundary, None);

        for x in 1..8 {
            let total: f64 = psi.iter().map(|f| f.get(x)).sum();
            assert!((total - 1.0).abs() <= 1e-12, "sum {total} at point {x}");
            let active = psi.iter().filter(|f| f.get(x) != 0.0).count();
            assert!(active <= 3, "{active} active terms at point {x}");
            // Every psi_n(x) >= 1 far from the boundary collapses to psi_0.
            if s.dist_to_set(x, &boundary) >= 1.0 {
                assert_eq!(psi[0].get(x), 1.0);
                for f in &psi[1..] {
                    assert_eq!(f.get(x), 0.0);
                }
            }
        }
        // Boundary points carry no mass of the partition.
        let total0: f64 = psi.iter().map(|f| f.get(0)).sum();
        assert_eq!(total0, 0.0);

        // Support containment: psi_n vanishes on X_{n-1} and outside X_{n+1}.
        for (n, field) in psi.iter().enumerate() {
            for x in 0..8 {
                let d = s.dist_to_set(x, &boundary);
                if field.get(x) != 0.0 {
                    if n >= 1 {
                        assert!(d < 2f64.powi(-(n as i32) + 1), "psi_{n} alive inside X_(n-1) at {x}");
                    }
                    assert!(d > 0.0);
                }
            }
        }

        // Measured cloud Lipschitz constant of psi_n stays within the
        // recursion's explicit bound (4^n - 1)/3 + 2^(n+1), which is <= 4^n
        // from n = 2 on.
        for (n, field) in psi.iter().enumerate() {
            let mut lip = 0.0f64;
            for x in 0..8 {
                for y in (x + 1)..8 {
                    lip = lip.max((field.get(x) - field.get(y)).abs() / s.dist(x, y));
                }
            }
            let bound = (4f64.powi(n as i32) - 1.0) / 3.0 + 2f64.powi(n as i32 + 1);
            assert!(lip <= bound + 1e-12, "psi_{n} lipschitz {lip} vs {bound}");
            if n >= 2 {
                assert!(lip <= 4f64.powi(n as i32) + 1e-12, "psi_{n} lipschitz {lip}");
            }
        }
    }

    #[test]
    fn truncate_cutoff_examples() {
        let s = unit_line(3);
        let zero = ScalarField::zeros("f", 3);
        assert_eq!(truncate_cutoff(&zero, 1.0, 0, &s).unwrap().values(), &[0.0; 3]);

        // |f| <= M and d(x0,x) <= M: f_M = f.
        let f = ScalarField::new("f", vec![0.5, -1.0, 2.0]);
        let m = 2.0;
        let t = truncate_cutoff(&f, m, 0, &s).unwrap();
        for x in 0..3 {
            if f.get(x).abs() <= m && s.dist(0, x) <= m {
                assert_eq!(t.get(x), f.get(x));
            }
        }

        // Clamp: f = 10 near x0 with M = 1.
        let big = ScalarField::new("f", vec![10.0, 0.0, 0.0]);
        let t = truncate_cutoff(&big, 1.0, 0, &s).unwrap();
        assert_eq!(t.get(0), 1.0);
        // |f_M| <= min(|f|, M) everywhere.
        for x in 0..3 {
            assert!(t.get(x).abs() <= big.get(x).abs().min(1.0) + 1e-15);
        }
    }

    #[test]
    fn local_lip_gradient_examples() {
        let s2 = unit_line(2);
        let u = ScalarField::new("u", vec![0.0, 1.0]);
        assert_eq!(local_lip_gradient(&u, 1.0, &s2).values(), &[1.0, 1.0]);

        let s3 = unit_line(3);
        let c = ScalarField::constant("u", 3, 5.0);
        assert_eq!(local_lip_gradient(&c, 1.0, &s3).values(), &[0.0; 3]);

        let u = ScalarField::new("u", vec![0.0, 1.0, 1.0]);
        assert_eq!(local_lip_gradient(&u, 1.0, &s3).values(), &[1.0, 1.0, 0.0]);

        // Single-edge upper-gradient inequality over all delta-pairs.
        let g = local_lip_gradient(&u, 1.0, &s3);
        for x in 0..3 {
            for y in 0..3 {
                if x != y && s3.dist(x, y) <= 1.0 {
                    assert!(
                        (u.get(x) - u.get(y)).abs()
                            <= g.get(x).max(g.get(y)) * s3.dist(x, y) + 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn penalty_function_branches() {
        let s = unit_line(2);
        let k = PointSet::new(SetLabel::K, 0..2);
        let f = ScalarField::new("f", vec![0.0, 3.0]);
        let omega = modulus_of_continuity(&f, &k, &s).unwrap();
        // indices i_1..i_5 = 2, 4, 8, 16, 32; sup |f| = 3 so the plateau is 6.
        let p = PenaltyFunction::new(vec![2, 4, 8, 16, 32], 3.0, omega).unwrap();
        assert_eq!(p.eval(0.0), 0.0);
        assert_eq!(p.eval(0.125), 6.0); // r = 1/i_3
        assert_eq!(p.eval(5.0), 6.0);
        // 1/i_4 <= r < 1/i_3: omega(2^-2) + omega(r), both zero below d = 1.
        assert_eq!(p.eval(0.0625), 0.0);
        // Nondecreasing on a sweep.
        let mut prev = 0.0;
        for k in 0..200 {
            let r = k as f64 * 0.01;
            let v = p.eval(r);
            assert!(v >= prev);
            prev = v;
        }
    }
}
