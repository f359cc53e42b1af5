//! Discrete paths, their metric functionals, left-endpoint discrete
//! integrals, and piecewise-linear interpolation with constant-speed
//! parametrization.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::fields::ScalarField;
use crate::space::MetricMeasureSpace;
use crate::Result;

/// A non-repeating ordered sequence of point ids; a single node is allowed
/// and has mesh, length and diameter zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscretePath {
    nodes: Vec<usize>,
}

impl DiscretePath {
    pub fn new(space: &MetricMeasureSpace, nodes: Vec<usize>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidInput("a path needs at least one node".into()));
        }
        let mut seen = vec![false; space.len()];
        for &x in &nodes {
            if x >= space.len() {
                return Err(Error::InvalidInput(format!("path node {x} out of bounds")));
            }
            if seen[x] {
                return Err(Error::InvalidInput(format!("path repeats node {x}")));
            }
            seen[x] = true;
        }
        Ok(DiscretePath { nodes })
    }

    pub fn single(node: usize) -> Self {
        DiscretePath { nodes: vec![node] }
    }

    /// Unchecked constructor for internal callers that guarantee simplicity.
    pub(crate) fn from_simple_nodes(nodes: Vec<usize>) -> Self {
        debug_assert!(!nodes.is_empty());
        DiscretePath { nodes }
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn first(&self) -> usize {
        self.nodes[0]
    }

    pub fn last(&self) -> usize {
        *self.nodes.last().unwrap()
    }

    fn steps<'a>(&'a self, space: &'a MetricMeasureSpace) -> impl Iterator<Item = f64> + 'a {
        self.nodes.windows(2).map(move |w| space.dist(w[0], w[1]))
    }

    /// Largest single step.
    pub fn mesh(&self, space: &MetricMeasureSpace) -> f64 {
        self.steps(space).fold(0.0, f64::max)
    }

    /// Sum of consecutive steps.
    pub fn length(&self, space: &MetricMeasureSpace) -> f64 {
        self.steps(space).sum()
    }

    /// Diameter of the node set.
    pub fn diameter(&self, space: &MetricMeasureSpace) -> f64 {
        let mut best = 0.0f64;
        for (a, &x) in self.nodes.iter().enumerate() {
            for &y in &self.nodes[a + 1..] {
                best = best.max(space.dist(x, y));
            }
        }
        best
    }

    /// Left-endpoint discrete integral: sum of g(p_k) d(p_k, p_{k+1});
    /// zero for a single-node path.
    pub fn discrete_integral(&self, g: &ScalarField, space: &MetricMeasureSpace) -> f64 {
        self.nodes
            .windows(2)
            .map(|w| g.get(w[0]) * space.dist(w[0], w[1]))
            .sum()
    }

    /// Appends a node; if the node already occurs at index i, the path is
    /// truncated at that index instead, keeping it simple.
    pub fn pushed(&self, node: usize) -> DiscretePath {
        match self.nodes.iter().position(|&x| x == node) {
            Some(i) => DiscretePath { nodes: self.nodes[..=i].to_vec() },
            None => {
                let mut nodes = self.nodes.clone();
                nodes.push(node);
                DiscretePath { nodes }
            }
        }
    }

    /// Concatenation at a shared endpoint: other's first node is dropped when
    /// it equals this path's last; revisits truncate at the first repeat.
    pub fn concat(&self, other: &DiscretePath) -> DiscretePath {
        let mut out = self.clone();
        let mut rest = other.nodes.iter();
        if other.first() == self.last() {
            rest.next();
        }
        for &x in rest {
            out = out.pushed(x);
        }
        out
    }
}

/// The linearly interpolating curve of a discrete path in ambient Euclidean
/// coordinates, parametrized with constant speed on [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolylineCurve {
    breakpoints: Vec<Vec<f64>>,
    times: Vec<f64>,
    speed: f64,
}

impl PolylineCurve {
    pub fn breakpoints(&self) -> &[Vec<f64>] {
        &self.breakpoints
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Constant speed; equals the curve length since the domain is [0,1].
    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn length(&self) -> f64 {
        self.speed
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        if self.breakpoints.len() == 1 {
            return self.breakpoints[0].clone();
        }
        let t = t.clamp(0.0, 1.0);
        // Segment index with times[l] <= t <= times[l+1].
        let mut l = match self.times.binary_search_by(|probe| probe.total_cmp(&t)) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if l + 1 >= self.times.len() {
            l = self.times.len() - 2;
        }
        let (t0, t1) = (self.times[l], self.times[l + 1]);
        let w = (t - t0) / (t1 - t0);
        self.breakpoints[l]
            .iter()
            .zip(&self.breakpoints[l + 1])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }
}

/// Linear interpolation of a path through its ambient coordinates, with the
/// time partition t_l = sum d(p_k, p_{k+1}) / Len(P). A zero-length path
/// yields the constant curve with zero speed.
pub fn interpolate(path: &DiscretePath, space: &MetricMeasureSpace) -> Result<PolylineCurve> {
    let coords = space
        .coords()
        .ok_or_else(|| Error::InvalidInput("interpolation needs ambient coordinates".into()))?;
    let len = path.length(space);
    if len == 0.0 {
        return Ok(PolylineCurve {
            breakpoints: vec![coords[path.first()].clone()],
            times: vec![0.0],
            speed: 0.0,
        });
    }
    let mut times = Vec::with_capacity(path.len());
    times.push(0.0);
    let mut acc = 0.0;
    for w in path.nodes().windows(2) {
        acc += space.dist(w[0], w[1]);
        times.push(acc / len);
    }
    *times.last_mut().unwrap() = 1.0;
    Ok(PolylineCurve {
        breakpoints: path.nodes().iter().map(|&x| coords[x].clone()).collect(),
        times,
        speed: len,
    })
}

/// Composite midpoint quadrature of the path integral Len(curve) times the
/// average of g along the curve, with `quad_n` panels per segment. Exact for
/// per-segment affine integrands, O(quad_n^-2) otherwise.
pub fn curve_integral(
    curve: &PolylineCurve,
    g: impl Fn(&[f64]) -> f64,
    quad_n: usize,
) -> f64 {
    assert!(quad_n >= 1, "quadrature needs at least one panel per segment");
    if curve.breakpoints.len() < 2 || curve.speed == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut point = vec![0.0; curve.breakpoints[0].len()];
    for seg in curve.breakpoints.windows(2) {
        let (a, b) = (&seg[0], &seg[1]);
        let seg_len = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let mut seg_sum = 0.0;
        for q in 0..quad_n {
            let w = (q as f64 + 0.5) / quad_n as f64;
            for ((p, &x), &y) in point.iter_mut().zip(a.iter()).zip(b.iter()) {
                *p = x + w * (y - x);
            }
            seg_sum += g(&point);
        }
        total += seg_len * seg_sum / quad_n as f64;
    }
    total
}

/// Subdivides every step of the path into `k` equal ambient pieces and snaps
/// the new vertices to their nearest cloud points (lowest id on ties).
/// Returns the refined simple path and the largest snapping displacement.
pub fn refine_along(
    path: &DiscretePath,
    k: usize,
    space: &MetricMeasureSpace,
) -> Result<(DiscretePath, f64)> {
    if k == 0 {
        return Err(Error::InvalidInput("subdivision count must be at least 1".into()));
    }
    let coords = space
        .coords()
        .ok_or_else(|| Error::InvalidInput("refinement needs ambient coordinates".into()))?;
    if k == 1 || path.len() == 1 {
        return Ok((path.clone(), 0.0));
    }

    let mut candidates = Vec::with_capacity(path.len() * k);
    let mut max_snap = 0.0f64;
    let dim = coords[0].len();
    let mut virt = vec![0.0; dim];
    for w in path.nodes().windows(2) {
        candidates.push(w[0]);
        let (a, b) = (&coords[w[0]], &coords[w[1]]);
        for q in 1..k {
            let frac = q as f64 / k as f64;
            for ((v, &x), &y) in virt.iter_mut().zip(a.iter()).zip(b.iter()) {
                *v = x + frac * (y - x);
            }
            let (snap, err) = nearest_point(&virt, coords);
            candidates.push(snap);
            max_snap = max_snap.max(err);
        }
    }
    candidates.push(path.last());

    // De-duplicate keeping first occurrences, then make sure the path still
    // ends at the original endpoint by truncating at its first occurrence.
    let mut seen = vec![false; space.len()];
    let mut nodes = Vec::with_capacity(candidates.len());
    for c in candidates {
        if !seen[c] {
            seen[c] = true;
            nodes.push(c);
        }
    }
    let end = path.last();
    if *nodes.last().unwrap() != end {
        let pos = nodes.iter().position(|&x| x == end).expect("endpoint was seen");
        nodes.truncate(pos + 1);
    }
    Ok((DiscretePath::from_simple_nodes(nodes), max_snap))
}

fn nearest_point(target: &[f64], coords: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d2 = f64::INFINITY;
    for (i, c) in coords.iter().enumerate() {
        let d2: f64 = c.iter().zip(target).map(|(x, y)| (x - y) * (x - y)).sum();
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    (best, best_d2.sqrt())
}
