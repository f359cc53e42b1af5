//! Instance generators, analytic and brute-force oracles, convergence
//! sweeps, and the quasicontinuity-witness experiment.

use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capacity::{
    function_min, modulus_cg, primal_sequence, set_capacity, CapacityReport, CondenserSpec,
};
use crate::error::Error;
use crate::fields::{local_lip_gradient, lp_energy, ScalarField};
use crate::space::{MetricMeasureSpace, PointSet, SetLabel};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridDomain {
    UnitSquare,
    /// Disk mask with condenser plates at |x| <= r and |x| >= big_r.
    Annulus { r: f64, big_r: f64 },
}

/// Uniform grid with cell-center inclusion; boundary cells get full cell
/// mass.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSpec {
    pub resolution: usize,
    pub domain: GridDomain,
    pub connectivity: Connectivity,
}

impl GridSpec {
    pub fn annulus(resolution: usize, r: f64, big_r: f64, connectivity: Connectivity) -> Self {
        GridSpec { resolution, domain: GridDomain::Annulus { r, big_r }, connectivity }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 {
            return Err(Error::InvalidInput(format!(
                "grid resolution must be at least 4, got {}",
                self.resolution
            )));
        }
        if let GridDomain::Annulus { r, big_r } = self.domain {
            if !(r > 0.0 && r < big_r) {
                return Err(Error::InvalidInput(format!(
                    "annulus needs 0 < r < R, got r = {r}, R = {big_r}"
                )));
            }
        }
        Ok(())
    }

    /// Grid spacing: the outer diameter divided by the resolution.
    pub fn spacing(&self) -> f64 {
        match self.domain {
            GridDomain::UnitSquare => 1.0 / self.resolution as f64,
            GridDomain::Annulus { big_r, .. } => 2.0 * big_r / self.resolution as f64,
        }
    }

    /// Mesh bound for the path family: 1.01 h for 4-neighbor grids,
    /// 1.01 sqrt(2) h for 8-neighbor.
    pub fn delta(&self) -> f64 {
        let h = self.spacing();
        match self.connectivity {
            Connectivity::Four => 1.01 * h,
            Connectivity::Eight => 1.01 * std::f64::consts::SQRT_2 * h,
        }
    }
}

/// Builds the annulus condenser: cell-centered grid points inside the disk
/// mask of radius R + 3h, masses h^2, E the inner plate |x| <= r, F the
/// outer plate |x| >= R.
pub fn make_annulus_condenser(
    grid: &GridSpec,
    p: f64,
) -> Result<(MetricMeasureSpace, CondenserSpec)> {
    grid.validate()?;
    let GridDomain::Annulus { r, big_r } = grid.domain else {
        return Err(Error::InvalidInput("annulus condenser needs an annulus domain".into()));
    };
    let h = grid.spacing();
    let mask = big_r + 3.0 * h;
    let m = (2.0 * mask / h).ceil() as i64;

    let mut coords = Vec::new();
    let mut e_ids = Vec::new();
    let mut f_ids = Vec::new();
    for i in 0..m {
        for j in 0..m {
            let x = (i as f64 + 0.5) * h - mask;
            let y = (j as f64 + 0.5) * h - mask;
            let rho = (x * x + y * y).sqrt();
            if rho <= mask {
                let id = coords.len();
                coords.push(vec![x, y]);
                if rho <= r {
                    e_ids.push(id);
                } else if rho >= big_r {
                    f_ids.push(id);
                }
            }
        }
    }
    if e_ids.is_empty() || f_ids.is_empty() {
        return Err(Error::Construction(format!(
            "annulus plates empty at resolution {} (|E| = {}, |F| = {})",
            grid.resolution,
            e_ids.len(),
            f_ids.len()
        )));
    }
    let n = coords.len();
    let space = MetricMeasureSpace::from_coords(coords, vec![h * h; n])?
        .with_sets([
            ("E".to_string(), PointSet::new(SetLabel::E, e_ids.clone())),
            ("F".to_string(), PointSet::new(SetLabel::F, f_ids.clone())),
        ])?;
    let spec = CondenserSpec::new(
        PointSet::new(SetLabel::E, e_ids),
        PointSet::new(SetLabel::F, f_ids),
        p,
        grid.delta(),
    );
    spec.validate(&space)?;
    Ok((space, spec))
}

/// Classical planar condenser capacity of the ring r < |x| < R at p = 2:
/// 2 pi / ln(R / r). Rejected outside p = 2 and near the singular limit.
pub fn ring_capacity_oracle(r: f64, big_r: f64, p: f64) -> Result<f64> {
    if p != 2.0 {
        return Err(Error::InvalidInput(format!("ring oracle supports p = 2 only, got {p}")));
    }
    if !(r > 0.0 && big_r > r) {
        return Err(Error::InvalidInput(format!("ring oracle needs 0 < r < R, got {r}, {big_r}")));
    }
    let log_ratio = (big_r / r).ln();
    if log_ratio < 1e-6 {
        return Err(Error::InvalidInput("ring oracle singular: ln(R/r) < 1e-6".into()));
    }
    Ok(2.0 * std::f64::consts::PI / log_ratio)
}

/// Independent confirmation of the ring oracle: radial finite-difference
/// solve of (rho u')' = 0 on [r, R] with u(r) = 0, u(R) = 1 by the Thomas
/// algorithm, then the Dirichlet energy 2 pi int u'^2 rho d rho by midpoint
/// differences.
pub fn radial_harmonic_energy(r: f64, big_r: f64, n_grid: usize) -> f64 {
    let n = n_grid.max(8);
    let h = (big_r - r) / n as f64;
    let rho = |k: usize| r + k as f64 * h;
    // Interior unknowns u_1..u_{n-1}; u_0 = 0, u_n = 1.
    // (rho_{k+1/2}(u_{k+1}-u_k) - rho_{k-1/2}(u_k - u_{k-1})) / h^2 = 0.
    let m = n - 1;
    let mut sub = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut sup = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    for k in 1..=m {
        let w_minus = rho(k) - 0.5 * h;
        let w_plus = rho(k) + 0.5 * h;
        diag[k - 1] = w_minus + w_plus;
        if k > 1 {
            sub[k - 1] = -w_minus;
        }
        if k < m {
            sup[k - 1] = -w_plus;
        } else {
            rhs[k - 1] += w_plus; // u_n = 1
        }
    }
    // Thomas elimination.
    for k in 1..m {
        let f = sub[k] / diag[k - 1];
        diag[k] -= f * sup[k - 1];
        rhs[k] -= f * rhs[k - 1];
    }
    let mut u = vec![0.0; n + 1];
    u[n] = 1.0;
    if m > 0 {
        u[m] = rhs[m - 1] / diag[m - 1];
        for k in (1..m).rev() {
            u[k] = (rhs[k - 1] - sup[k - 1] * u[k + 1]) / diag[k - 1];
        }
    }
    let mut energy = 0.0;
    for k in 0..n {
        let du = (u[k + 1] - u[k]) / h;
        let mid = rho(k) + 0.5 * h;
        energy += du * du * mid * h;
    }
    2.0 * std::f64::consts::PI * energy
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepSolver {
    Modulus,
    Function,
    Primal,
}

impl SweepSolver {
    pub fn name(&self) -> &'static str {
        match self {
            SweepSolver::Modulus => "modulus-cg",
            SweepSolver::Function => "function-min",
            SweepSolver::Primal => "primal-seq",
        }
    }
}

/// JSON has no NaN literal; absent oracles and errors round-trip as null.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub resolution: usize,
    pub solver: String,
    pub p: f64,
    pub delta: f64,
    #[serde(with = "nan_as_null")]
    pub value: f64,
    #[serde(with = "nan_as_null")]
    pub oracle: f64,
    #[serde(with = "nan_as_null")]
    pub rel_error: f64,
    pub iterations: usize,
    pub runtime_s: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Full solver reports aligned with `rows`; None for failed cells.
    pub reports: Vec<Option<CapacityReport>>,
    pub failures: Vec<String>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "resolution,solver,p,delta,value,oracle,rel_error,iterations,runtime_s,seed\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                row.resolution,
                row.solver,
                row.p,
                row.delta,
                row.value,
                row.oracle,
                row.rel_error,
                row.iterations,
                row.runtime_s,
                row.seed
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep report serializes")
    }
}

/// Runs the full resolution x solver grid on the annulus template. Cells
/// run in parallel up to `workers`; each cell is an isolated pure
/// computation and the row order is deterministic.
pub fn convergence_sweep(
    resolutions: &[usize],
    solvers: &[SweepSolver],
    template: &GridSpec,
    p: f64,
    tol: f64,
    max_iter: usize,
    workers: usize,
    seed: u64,
) -> Result<SweepReport> {
    let workers = workers.max(1);
    let cells: Vec<(usize, SweepSolver)> = resolutions
        .iter()
        .flat_map(|&res| solvers.iter().map(move |&s| (res, s)))
        .collect();
    let results: Mutex<Vec<Option<(SweepRow, Option<CapacityReport>, Option<String>)>>> =
        Mutex::new(vec![None; cells.len()]);

    let oracle = match template.domain {
        GridDomain::Annulus { r, big_r } if p == 2.0 => {
            ring_capacity_oracle(r, big_r, 2.0).unwrap_or(f64::NAN)
        }
        _ => f64::NAN,
    };

    std::thread::scope(|scope| {
        for w in 0..workers {
            let cells = &cells;
            let results = &results;
            scope.spawn(move || {
                for (idx, &(res, solver)) in cells.iter().enumerate() {
                    if idx % workers != w {
                        continue;
                    }
                    let grid = GridSpec { resolution: res, ..*template };
                    let start = Instant::now();
                    let outcome = run_cell(&grid, solver, p, tol, max_iter);
                    let runtime = start.elapsed().as_secs_f64();
                    let entry = match outcome {
                        Ok(report) => {
                            let rel = if oracle.is_finite() && oracle != 0.0 {
                                (report.value - oracle).abs() / oracle
                            } else {
                                f64::NAN
                            };
                            let row = SweepRow {
                                resolution: res,
                                solver: solver.name().to_string(),
                                p,
                                delta: grid.delta(),
                                value: report.value,
                                oracle,
                                rel_error: rel,
                                iterations: report.iterations,
                                runtime_s: runtime,
                                seed,
                            };
                            (row, Some(report), None)
                        }
                        Err(err) => {
                            let row = SweepRow {
                                resolution: res,
                                solver: solver.name().to_string(),
                                p,
                                delta: grid.delta(),
                                value: f64::NAN,
                                oracle,
                                rel_error: f64::NAN,
                                iterations: 0,
                                runtime_s: runtime,
                                seed,
                            };
                            (row, None, Some(format!("{res}/{}: {err}", solver.name())))
                        }
                    };
                    results.lock().unwrap()[idx] = Some(entry);
                }
            });
        }
    });

    let mut report = SweepReport::default();
    for entry in results.into_inner().unwrap() {
        let (row, cell_report, failure) = entry.expect("every cell filled");
        report.rows.push(row);
        report.reports.push(cell_report);
        if let Some(f) = failure {
            report.failures.push(f);
        }
    }
    Ok(report)
}

fn run_cell(
    grid: &GridSpec,
    solver: SweepSolver,
    p: f64,
    tol: f64,
    max_iter: usize,
) -> Result<CapacityReport> {
    let (space, spec) = make_annulus_condenser(grid, p)?;
    match solver {
        SweepSolver::Modulus => modulus_cg(&spec, &space, tol, max_iter),
        SweepSolver::Function => function_min(&spec, &space, tol, max_iter),
        SweepSolver::Primal => {
            let i_max = (space.diameter() / grid.spacing()).ceil() as usize + 4;
            primal_sequence(&spec, &space, None, 0.1, i_max)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuasiRow {
    pub n: usize,
    pub set_size: usize,
    pub cap: f64,
    /// N^{1,p}-norm^p of the test function u_n = |f_n - f| n / eps0.
    pub test_bound: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuasiReport {
    pub rows: Vec<QuasiRow>,
    /// (N, Cap_p(E_N)) for the tails E_N = union of E_n over n >= N.
    pub tails: Vec<(usize, f64)>,
}

/// The quasicontinuity witness experiment: exceptional sets
/// E_{eps0,n} = { x : |f_n - f| >= eps0 / n }, their capacities against the
/// test-function bounds, and the capacity decay of the tail unions.
pub fn quasicontinuity_witness(
    f: &ScalarField,
    approximants: &[ScalarField],
    eps0: f64,
    p: f64,
    delta: f64,
    space: &MetricMeasureSpace,
    tol: f64,
) -> Result<QuasiReport> {
    if !(eps0 > 0.0) {
        return Err(Error::InvalidInput("eps0 must be positive".into()));
    }
    let n_pts = space.len();
    let mut level_sets = Vec::with_capacity(approximants.len());
    let mut rows = Vec::with_capacity(approximants.len());
    for (idx, f_n) in approximants.iter().enumerate() {
        let n = idx + 1;
        let threshold = eps0 / n as f64;
        let set = PointSet::new(
            SetLabel::Generic,
            (0..n_pts).filter(|&x| (f_n.get(x) - f.get(x)).abs() >= threshold),
        );
        let cap = if set.is_empty() {
            0.0
        } else {
            set_capacity(&set, p, delta, space, tol)?.value
        };
        let u_n = ScalarField::new(
            format!("u_{n}"),
            (0..n_pts)
                .map(|x| (f_n.get(x) - f.get(x)).abs() * n as f64 / eps0)
                .collect(),
        );
        let g_n = local_lip_gradient(&u_n, delta, space);
        let test_bound = lp_energy(&u_n, p, space) + lp_energy(&g_n, p, space);
        rows.push(QuasiRow { n, set_size: set.len(), cap, test_bound });
        level_sets.push(set);
    }

    let mut tails = Vec::with_capacity(level_sets.len());
    for start in 0..level_sets.len() {
        let mut union = PointSet::empty(SetLabel::Generic);
        for set in &level_sets[start..] {
            union = union.union(set);
        }
        let cap = if union.is_empty() {
            0.0
        } else {
            set_capacity(&union, p, delta, space, tol)?.value
        };
        tails.push((start + 1, cap));
    }
    Ok(QuasiReport { rows, tails })
}

/// Seeded random scalar field with values uniform in [lo, hi).
pub fn random_field(n: usize, lo: f64, hi: f64, seed: u64) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScalarField::new("f", (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Geometric approximants f_k = f + 2^-k xi_k with seeded noise in [-1, 1).
pub fn geometric_approximants(f: &ScalarField, count: usize, seed: u64) -> Vec<ScalarField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (1..=count)
        .map(|k| {
            let scale = 2f64.powi(-(k as i32));
            ScalarField::new(
                format!("f_{k}"),
                (0..f.len()).map(|x| f.get(x) + scale * rng.gen_range(-1.0..1.0)).collect(),
            )
        })
        .collect()
}

/// Seeded random point cloud in the unit square with masses in [0.5, 1.5];
/// coincident points are resampled.
pub fn random_cloud(n: usize, seed: u64, scale: f64) -> MetricMeasureSpace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let coords: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.gen_range(0.0..scale), rng.gen_range(0.0..scale)])
            .collect();
        let mass: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        if let Ok(space) = MetricMeasureSpace::from_coords(coords, mass) {
            return space;
        }
    }
}

/// Seeded random condenser on a small cloud: a far-apart point pair as the
/// plates and a mesh bound wide enough to admit paths.
pub fn random_condenser(n: usize, p: f64, seed: u64) -> (MetricMeasureSpace, CondenserSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let space = random_cloud(n, seed, 1.0);
    // Plates: the two most distant points.
    let mut best = (0usize, 1usize, 0.0f64);
    for i in 0..n {
        for j in (i + 1)..n {
            if space.dist(i, j) > best.2 {
                best = (i, j, space.dist(i, j));
            }
        }
    }
    let delta = rng.gen_range(0.4..1.0) * best.2;
    let spec = CondenserSpec::new(
        PointSet::new(SetLabel::E, [best.0]),
        PointSet::new(SetLabel::F, [best.1]),
        p,
        delta,
    );
    (space, spec)
}
