//! Finite metric measure space: representation, validation, ingestion, and
//! set/ball geometry queries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Dense distance matrices are cached up to this many points; above it,
/// coordinates are required and distances are computed on demand.
pub const DENSE_MATRIX_LIMIT: usize = 4096;

/// Full O(n^3) triangle-inequality validation up to this size; larger
/// coordinate-derived spaces are spot-checked on a deterministic sample.
const TRIANGLE_FULL_CHECK_LIMIT: usize = 512;
const TRIANGLE_SAMPLE_COUNT: usize = 1 << 20;

/// Role tag for a point set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetLabel {
    E,
    F,
    K,
    C,
    V,
    Generic,
}

impl SetLabel {
    fn from_name(name: &str) -> SetLabel {
        match name {
            "E" => SetLabel::E,
            "F" => SetLabel::F,
            "K" => SetLabel::K,
            "C" => SetLabel::C,
            "V" => SetLabel::V,
            _ => SetLabel::Generic,
        }
    }
}

/// A sorted, duplicate-free set of point ids with a role tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointSet {
    members: Vec<usize>,
    label: SetLabel,
}

impl PointSet {
    pub fn new(label: SetLabel, members: impl IntoIterator<Item = usize>) -> Self {
        let mut members: Vec<usize> = members.into_iter().collect();
        members.sort_unstable();
        members.dedup();
        PointSet { members, label }
    }

    pub fn empty(label: SetLabel) -> Self {
        PointSet { members: Vec::new(), label }
    }

    pub fn label(&self) -> SetLabel {
        self.label
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, x: usize) -> bool {
        self.members.binary_search(&x).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().copied()
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn union(&self, other: &PointSet) -> PointSet {
        PointSet::new(self.label, self.iter().chain(other.iter()))
    }

    pub fn is_subset_of(&self, other: &PointSet) -> bool {
        self.iter().all(|x| other.contains(x))
    }

    pub fn is_disjoint_from(&self, other: &PointSet) -> bool {
        !self.iter().any(|x| other.contains(x))
    }

    /// Membership indicator as a bit vector of length `n`.
    pub fn indicator(&self, n: usize) -> Vec<bool> {
        let mut mask = vec![false; n];
        for x in self.iter() {
            mask[x] = true;
        }
        mask
    }
}

/// JSON document for a space, per the external interface.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceDoc {
    points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    coords: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dist: Option<Vec<Vec<f64>>>,
    mass: Vec<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    sets: BTreeMap<String, Vec<usize>>,
}

/// A finite metric measure space: points 0..n-1 with pairwise distances and
/// positive point masses. Immutable after construction; all queries are pure.
#[derive(Debug, Clone)]
pub struct MetricMeasureSpace {
    n: usize,
    coords: Option<Vec<Vec<f64>>>,
    dense: Option<Vec<f64>>,
    mass: Vec<f64>,
    sets: BTreeMap<String, PointSet>,
    diameter: f64,
    min_positive_dist: f64,
}

impl MetricMeasureSpace {
    /// Build from ambient Euclidean coordinates; distances derived and cached.
    pub fn from_coords(coords: Vec<Vec<f64>>, mass: Vec<f64>) -> Result<Self> {
        Self::build(Some(coords), None, mass, BTreeMap::new())
    }

    /// Build from an explicit symmetric distance matrix.
    pub fn from_matrix(dist: Vec<Vec<f64>>, mass: Vec<f64>) -> Result<Self> {
        Self::build(None, Some(dist), mass, BTreeMap::new())
    }

    pub fn with_sets(mut self, sets: impl IntoIterator<Item = (String, PointSet)>) -> Result<Self> {
        for (name, set) in sets {
            if let Some(&bad) = set.members().iter().find(|&&x| x >= self.n) {
                return Err(Error::Schema(format!(
                    "set {name:?} references point {bad} out of bounds (n = {})",
                    self.n
                )));
            }
            self.sets.insert(name, set);
        }
        Ok(self)
    }

    fn build(
        coords: Option<Vec<Vec<f64>>>,
        matrix: Option<Vec<Vec<f64>>>,
        mass: Vec<f64>,
        raw_sets: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        let n = mass.len();
        if n == 0 {
            return Err(Error::Schema("space must contain at least one point".into()));
        }
        for (i, &m) in mass.iter().enumerate() {
            if !(m > 0.0) || !m.is_finite() {
                return Err(Error::NonpositiveMass { i, value: m });
            }
        }

        let (coords, dense, derived) = match (coords, matrix) {
            (Some(c), None) => {
                if c.len() != n {
                    return Err(Error::Schema(format!(
                        "coords has {} rows but mass has {} entries",
                        c.len(),
                        n
                    )));
                }
                let dim = c[0].len();
                if dim == 0 || c.iter().any(|row| row.len() != dim) {
                    return Err(Error::Schema("coords rows must share a positive dimension".into()));
                }
                if c.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Schema("coords must be finite".into()));
                }
                let dense = if n <= DENSE_MATRIX_LIMIT { Some(derive_dense(&c)) } else { None };
                (Some(c), dense, true)
            }
            (None, Some(m)) => {
                if m.len() != n || m.iter().any(|row| row.len() != n) {
                    return Err(Error::Schema(format!("dist must be a {n}x{n} matrix")));
                }
                if n > DENSE_MATRIX_LIMIT {
                    return Err(Error::Schema(format!(
                        "explicit matrices supported up to n = {DENSE_MATRIX_LIMIT}; provide coords instead"
                    )));
                }
                let mut dense = vec![0.0; n * n];
                for (i, row) in m.iter().enumerate() {
                    dense[i * n..(i + 1) * n].copy_from_slice(row);
                }
                (None, Some(dense), false)
            }
            (Some(_), Some(_)) => {
                return Err(Error::Schema("exactly one of coords/dist is required, got both".into()))
            }
            (None, None) => {
                return Err(Error::Schema("exactly one of coords/dist is required, got neither".into()))
            }
        };

        let mut space = MetricMeasureSpace {
            n,
            coords,
            dense,
            mass,
            sets: BTreeMap::new(),
            diameter: 0.0,
            min_positive_dist: f64::INFINITY,
        };
        space.validate_metric(derived)?;
        space = space.with_sets(
            raw_sets
                .into_iter()
                .map(|(name, ids)| {
                    let label = SetLabel::from_name(&name);
                    (name, PointSet::new(label, ids))
                })
                .collect::<Vec<_>>(),
        )?;
        Ok(space)
    }

    fn validate_metric(&mut self, derived: bool) -> Result<()> {
        let n = self.n;
        let mut diameter = 0.0f64;
        let mut min_pos = f64::INFINITY;
        for i in 0..n {
            let dii = self.dist(i, i);
            if dii != 0.0 {
                return Err(Error::NonzeroDiagonal { i, value: dii });
            }
            for j in (i + 1)..n {
                let dij = self.dist(i, j);
                let dji = self.dist(j, i);
                if dij != dji {
                    return Err(Error::Asymmetric { i, j, dij, dji });
                }
                if !(dij > 0.0) || !dij.is_finite() {
                    return Err(Error::NonpositiveDistance { i, j, value: dij });
                }
                diameter = diameter.max(dij);
                min_pos = min_pos.min(dij);
            }
        }
        self.diameter = diameter;
        self.min_positive_dist = min_pos;

        // Explicit matrices are validated exactly; coordinate-derived ones get
        // a tolerance because floating-point Euclidean distances can violate
        // the triangle inequality by ulps.
        let tol = if derived { 1e-9 * diameter.max(1.0) } else { 0.0 };
        if n <= TRIANGLE_FULL_CHECK_LIMIT {
            for i in 0..n {
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let dij = self.dist(i, j);
                    for k in (i + 1)..n {
                        if k == j {
                            continue;
                        }
                        let dik = self.dist(i, k);
                        let djk = self.dist(j, k);
                        if dik > dij + djk + tol {
                            return Err(Error::TriangleViolation { i, j, k, dik, dij, djk });
                        }
                    }
                }
            }
        } else {
            // Deterministic sampled check for large coordinate clouds.
            let mut state = 0x9e3779b97f4a7c15u64;
            let mut next = move || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                state
            };
            for _ in 0..TRIANGLE_SAMPLE_COUNT {
                let i = (next() % n as u64) as usize;
                let j = (next() % n as u64) as usize;
                let k = (next() % n as u64) as usize;
                if i == j || j == k || i == k {
                    continue;
                }
                let (dik, dij, djk) = (self.dist(i, k), self.dist(i, j), self.dist(j, k));
                if dik > dij + djk + tol {
                    return Err(Error::TriangleViolation { i, j, k, dik, dij, djk });
                }
            }
        }
        Ok(())
    }

    /// Number of points.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Distance between points `i` and `j`.
    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        if let Some(d) = &self.dense {
            d[i * self.n + j]
        } else {
            let c = self.coords.as_ref().expect("no dense matrix implies coords");
            euclid(&c[i], &c[j])
        }
    }

    pub fn mass(&self, i: usize) -> f64 {
        self.mass[i]
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    /// Total measure of the whole space.
    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Measure of a point set.
    pub fn set_mass(&self, set: &PointSet) -> f64 {
        set.iter().map(|x| self.mass[x]).sum()
    }

    pub fn coords(&self) -> Option<&[Vec<f64>]> {
        self.coords.as_deref()
    }

    pub fn sets(&self) -> &BTreeMap<String, PointSet> {
        &self.sets
    }

    pub fn set(&self, name: &str) -> Option<&PointSet> {
        self.sets.get(name)
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Smallest positive pairwise distance (infinite for a single point).
    pub fn min_positive_dist(&self) -> f64 {
        self.min_positive_dist
    }

    /// d(x, A) = min over a in A of d(x, a); infinity for empty A, per the
    /// convention that the distance of a point to an empty set is infinite.
    pub fn dist_to_set(&self, x: usize, set: &PointSet) -> f64 {
        set.iter().map(|a| self.dist(x, a)).fold(f64::INFINITY, f64::min)
    }

    /// d(A, B) = min over pairs; infinity if either is empty.
    pub fn dist_between_sets(&self, a: &PointSet, b: &PointSet) -> f64 {
        a.iter()
            .map(|x| self.dist_to_set(x, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// Open ball { y : d(x0, y) < r } as an index set.
    pub fn ball(&self, x0: usize, r: f64) -> PointSet {
        PointSet::new(SetLabel::Generic, (0..self.n).filter(|&y| self.dist(x0, y) < r))
    }

    /// Closed variant { y : d(x0, y) <= r }, used for C/V construction.
    pub fn closed_ball(&self, x0: usize, r: f64) -> PointSet {
        PointSet::new(SetLabel::Generic, (0..self.n).filter(|&y| self.dist(x0, y) <= r))
    }

    /// Closed metric neighborhood { x : d(x, set) <= r }.
    pub fn neighborhood(&self, set: &PointSet, r: f64) -> PointSet {
        PointSet::new(
            SetLabel::Generic,
            (0..self.n).filter(|&x| self.dist_to_set(x, set) <= r),
        )
    }

    /// Complement of a set.
    pub fn complement(&self, set: &PointSet) -> PointSet {
        PointSet::new(SetLabel::Generic, (0..self.n).filter(|&x| !set.contains(x)))
    }

    /// All points of the space as a set.
    pub fn all_points(&self) -> PointSet {
        PointSet::new(SetLabel::Generic, 0..self.n)
    }

    /// Smallest radius for which the delta-graph (edges between points at
    /// distance <= delta) is connected: the largest edge on a minimum
    /// spanning tree, via Prim's algorithm.
    pub fn connectivity_radius(&self) -> f64 {
        let n = self.n;
        if n == 1 {
            return 0.0;
        }
        let mut in_tree = vec![false; n];
        let mut best = vec![f64::INFINITY; n];
        best[0] = 0.0;
        let mut radius = 0.0f64;
        for _ in 0..n {
            let mut u = usize::MAX;
            let mut ud = f64::INFINITY;
            for v in 0..n {
                if !in_tree[v] && best[v] < ud {
                    ud = best[v];
                    u = v;
                }
            }
            in_tree[u] = true;
            radius = radius.max(ud);
            for v in 0..n {
                if !in_tree[v] {
                    let d = self.dist(u, v);
                    if d < best[v] {
                        best[v] = d;
                    }
                }
            }
        }
        radius
    }

    /// A copy of the space with all distances multiplied by `factor`;
    /// masses and sets are unchanged.
    pub fn scale_metric(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::InvalidInput(format!("scale factor must be positive, got {factor}")));
        }
        let mut scaled = if let Some(coords) = &self.coords {
            let scaled_coords = coords
                .iter()
                .map(|row| row.iter().map(|v| v * factor).collect())
                .collect();
            Self::from_coords(scaled_coords, self.mass.clone())?
        } else {
            let d = self.dense.as_ref().expect("matrix space has dense storage");
            let matrix = (0..self.n)
                .map(|i| d[i * self.n..(i + 1) * self.n].iter().map(|v| v * factor).collect())
                .collect();
            Self::from_matrix(matrix, self.mass.clone())?
        };
        scaled.sets = self.sets.clone();
        Ok(scaled)
    }

    /// Load a space document from a JSON file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SpaceDoc = serde_json::from_str(text).map_err(Error::schema)?;
        if doc.points != doc.mass.len() {
            return Err(Error::Schema(format!(
                "points = {} but mass has {} entries",
                doc.points,
                doc.mass.len()
            )));
        }
        Self::build(doc.coords, doc.dist, doc.mass, doc.sets)
    }

    pub fn to_json(&self) -> String {
        let dist = if self.coords.is_some() {
            None
        } else {
            let d = self.dense.as_ref().expect("matrix space has dense storage");
            Some((0..self.n).map(|i| d[i * self.n..(i + 1) * self.n].to_vec()).collect())
        };
        let doc = SpaceDoc {
            points: self.n,
            coords: self.coords.clone(),
            dist,
            mass: self.mass.clone(),
            sets: self
                .sets
                .iter()
                .map(|(name, set)| (name.clone(), set.members().to_vec()))
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("space serialization cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn derive_dense(coords: &[Vec<f64>]) -> Vec<f64> {
    let n = coords.len();
    let mut dense = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclid(&coords[i], &coords[j]);
            dense[i * n + j] = d;
            dense[j * n + i] = d;
        }
    }
    dense
}

/// Nested exhaustion sets E_1 <= E_2 <= ... with mass deficit
/// mu(B(x0, i+1) \ E_i) <= eps^p 2^(-4 p i) at every level, containing `k0`
/// when given, and stabilizing at the full space.
///
/// Levels are the sets E_i = K0 union B(x0, i+1), which carry zero deficit;
/// the bound is still validated so callers can substitute leaner sets.
pub fn exhaustion(
    space: &MetricMeasureSpace,
    x0: usize,
    eps: f64,
    p: f64,
    k0: Option<&PointSet>,
) -> Result<Vec<PointSet>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("exhaustion requires eps > 0, got {eps}")));
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidInput(format!("exhaustion requires p >= 1, got {p}")));
    }
    if x0 >= space.len() {
        return Err(Error::InvalidInput(format!("x0 = {x0} out of bounds")));
    }
    let mut levels = Vec::new();
    let mut i = 1usize;
    loop {
        let mut level = space.ball(x0, (i + 1) as f64);
        if let Some(k0) = k0 {
            level = level.union(k0);
        }
        let deficit = exhaustion_deficit(space, x0, i, &level);
        let budget = eps.powf(p) * 2f64.powf(-4.0 * p * i as f64);
        if deficit > budget {
            return Err(Error::Construction(format!(
                "exhaustion level {i}: deficit {deficit} exceeds budget {budget}"
            )));
        }
        let full = level.len() == space.len();
        levels.push(level);
        if full {
            break;
        }
        i += 1;
    }
    Ok(levels)
}

/// Mass of B(x0, i+1) not covered by `level`: the deficit the paper bounds.
pub fn exhaustion_deficit(
    space: &MetricMeasureSpace,
    x0: usize,
    i: usize,
    level: &PointSet,
) -> f64 {
    space
        .ball(x0, (i + 1) as f64)
        .iter()
        .filter(|&x| !level.contains(x))
        .map(|x| space.mass(x))
        .sum()
}
