//! Embedded deformation graph with a gravity-alignment term.
//!
//! Each node `l` has a position `g_l`, an unconstrained 3×3 matrix `R_l`
//! and a translation `t_l`. A point is moved by
//! `φ(p) = Σ_l w_l(p) [R_l (p − g_l) + g_l + t_l]` over its `k` nearest nodes
//! within `d_max`, with `w_l ∝ (1 − ‖p − g_l‖ / d_max)²`.

use std::collections::BTreeMap;

use nalgebra::{DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use super::grid::PointGrid;
use super::SurfelMap;
use crate::error::{Error, Result};
use crate::manifold::{Mat3, Vec3};

pub type Mat12 = SMatrix<f64, 12, 12>;
type Vec12 = SVector<f64, 12>;
type Block = SMatrix<f64, 6, 12>;

/// Parameters per node: `R` row-major (9) then `t` (3).
pub const NODE_PARAMS: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationNode {
    pub g: Vec3,
    pub r: Mat3,
    pub t: Vec3,
    pub neighbors: Vec<usize>,
    /// Nodes only connect to and influence points of their own group.
    pub group: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    /// Matched surface pair (`Q_s` → `Q_d`).
    Surface,
    /// Point of the inactive map that must stay put.
    Pin,
    /// Earlier loop closure that must not be pulled apart (global only).
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationConstraint {
    pub source: Vec3,
    pub destination: Vec3,
    pub kind: ConstraintKind,
    /// Node group the source point belongs to.
    pub group: u8,
}

impl DeformationConstraint {
    pub fn surface(source: Vec3, destination: Vec3) -> Self {
        DeformationConstraint {
            source,
            destination,
            kind: ConstraintKind::Surface,
            group: 0,
        }
    }

    pub fn pin(point: Vec3) -> Self {
        DeformationConstraint {
            source: point,
            destination: point,
            kind: ConstraintKind::Pin,
            group: 0,
        }
    }

    pub fn in_group(self, group: u8) -> Self {
        DeformationConstraint { group, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyKind {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyWeights {
    pub rot: f64,
    pub reg: f64,
    pub con: f64,
    pub imu: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        EnergyWeights {
            rot: 1.0,
            reg: 10.0,
            con: 100.0,
            imu: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformationConfig {
    pub spacing: f64,
    pub k: usize,
    /// `d_max = range_factor · spacing`.
    pub range_factor: f64,
    /// Spacing grows until the node count fits.
    pub max_nodes: usize,
    pub weights: EnergyWeights,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        DeformationConfig {
            spacing: 0.3,
            k: 4,
            range_factor: 2.5,
            max_nodes: 1500,
            weights: EnergyWeights::default(),
            max_iterations: 50,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeformationGraph {
    pub nodes: Vec<DeformationNode>,
    pub k: usize,
    pub d_max: f64,
    positions: Vec<Vec3>,
    grid: PointGrid,
}

/// Node weights of one point; empty when no node is in range.
pub type Influence = Vec<(usize, f64)>;

impl DeformationGraph {
    /// Identity graph over the given node positions, each connected to its
    /// `k` nearest other nodes.
    pub fn new(positions: Vec<Vec3>, k: usize, d_max: f64) -> Self {
        let groups = vec![0; positions.len()];
        Self::with_groups(positions, groups, k, d_max)
    }

    /// Like [`new`](Self::new), but nodes only link within their group.
    pub fn with_groups(positions: Vec<Vec3>, groups: Vec<u8>, k: usize, d_max: f64) -> Self {
        assert_eq!(positions.len(), groups.len());
        let n = positions.len();
        let nodes = (0..n)
            .map(|i| {
                let mut others: Vec<(usize, f64)> = (0..n)
                    .filter(|&j| j != i && groups[j] == groups[i])
                    .map(|j| (j, (positions[j] - positions[i]).norm()))
                    .collect();
                others.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                DeformationNode {
                    g: positions[i],
                    r: Mat3::identity(),
                    t: Vec3::zeros(),
                    neighbors: others.iter().take(k).map(|x| x.0).collect(),
                    group: groups[i],
                }
            })
            .collect();
        let mut grid = PointGrid::new(d_max);
        for (i, p) in positions.iter().enumerate() {
            grid.insert(i, p);
        }
        DeformationGraph {
            nodes,
            k,
            d_max,
            positions,
            grid,
        }
    }

    /// Samples nodes uniformly over `points` (greedy Poisson-disk at the
    /// configured spacing, widened until at most `max_nodes` remain).
    pub fn sample(points: &[Vec3], config: &DeformationConfig) -> Result<Self> {
        let (chosen, spacing) = poisson_sample(points, config)?;
        Ok(Self::new(chosen, config.k, config.range_factor * spacing))
    }

    /// Samples each group of points separately; `groups[i]` labels
    /// `points[i]`. Empty groups get no nodes.
    pub fn sample_grouped(
        points: &[Vec3],
        groups: &[u8],
        config: &DeformationConfig,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyMap);
        }
        let labels: std::collections::BTreeSet<u8> = groups.iter().copied().collect();
        let per_group = DeformationConfig {
            max_nodes: (config.max_nodes / labels.len().max(1)).max(1),
            ..*config
        };
        let (mut positions, mut node_groups, mut spacing) =
            (Vec::new(), Vec::new(), config.spacing);
        for g in labels {
            let pts: Vec<Vec3> = points
                .iter()
                .zip(groups)
                .filter(|(_, &h)| h == g)
                .map(|(p, _)| *p)
                .collect();
            let (chosen, s) = poisson_sample(&pts, &per_group)?;
            spacing = spacing.max(s);
            node_groups.extend(std::iter::repeat_n(g, chosen.len()));
            positions.extend(chosen);
        }
        Ok(Self::with_groups(
            positions,
            node_groups,
            config.k,
            config.range_factor * spacing,
        ))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node weights of a group-0 point.
    pub fn influence(&self, p: &Vec3) -> Influence {
        self.influence_in(p, 0)
    }

    pub fn influence_in(&self, p: &Vec3, group: u8) -> Influence {
        let near = self.grid.within(&self.positions, p, self.d_max);
        let mut out: Influence = near
            .iter()
            .filter(|&&(i, _)| self.nodes[i].group == group)
            .take(self.k)
            .map(|&(i, d)| (i, (1.0 - d / self.d_max).powi(2)))
            .filter(|x| x.1 > 0.0)
            .collect();
        let sum: f64 = out.iter().map(|x| x.1).sum();
        if sum <= 0.0 {
            return Vec::new();
        }
        for x in &mut out {
            x.1 /= sum;
        }
        out
    }

    pub fn apply(&self, p: &Vec3, influence: &Influence) -> Vec3 {
        if influence.is_empty() {
            return *p;
        }
        // written as an offset so identity nodes reproduce p bit-exactly
        let offset = influence.iter().fold(Vec3::zeros(), |acc, &(l, w)| {
            let n = &self.nodes[l];
            let d = p - n.g;
            acc + w * (n.r * d - d + n.t)
        });
        p + offset
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.apply(p, &self.influence(p))
    }

    /// Number of points with no node within `d_max`.
    pub fn uncovered(&self, points: &[Vec3]) -> usize {
        points
            .iter()
            .filter(|p| self.influence(p).is_empty())
            .count()
    }

    pub fn params(&self) -> DVector<f64> {
        let mut x = DVector::zeros(NODE_PARAMS * self.len());
        for (l, n) in self.nodes.iter().enumerate() {
            for a in 0..3 {
                for b in 0..3 {
                    x[NODE_PARAMS * l + 3 * a + b] = n.r[(a, b)];
                }
                x[NODE_PARAMS * l + 9 + a] = n.t[a];
            }
        }
        x
    }

    pub fn set_params(&mut self, x: &DVector<f64>) {
        for (l, n) in self.nodes.iter_mut().enumerate() {
            for a in 0..3 {
                for b in 0..3 {
                    n.r[(a, b)] = x[NODE_PARAMS * l + 3 * a + b];
                }
                n.t[a] = x[NODE_PARAMS * l + 9 + a];
            }
        }
    }
}

fn poisson_sample(points: &[Vec3], config: &DeformationConfig) -> Result<(Vec<Vec3>, f64)> {
    if points.is_empty() {
        return Err(Error::EmptyMap);
    }
    let mut spacing = config.spacing;
    loop {
        let mut chosen: Vec<Vec3> = Vec::new();
        let mut grid = PointGrid::new(spacing);
        for p in points {
            if !grid.any_within(&chosen, p, spacing) {
                grid.insert(chosen.len(), p);
                chosen.push(*p);
            }
        }
        if chosen.len() <= config.max_nodes.max(1) {
            return Ok((chosen, spacing));
        }
        spacing *= 1.25;
    }
}

/// Mean `‖R_l g − g‖` over nodes.
pub fn gravity_misalignment(graph: &DeformationGraph, gravity: &Vec3) -> f64 {
    if graph.is_empty() {
        return 0.0;
    }
    graph
        .nodes
        .iter()
        .map(|n| (n.r * gravity - gravity).norm())
        .sum::<f64>()
        / graph.len() as f64
}

/// Moves every surfel through the graph; returns the number left unmoved
/// because no node was in range.
pub fn deform(map: &mut SurfelMap, graph: &DeformationGraph) -> usize {
    deform_grouped(map, graph, |_| 0)
}

/// [`deform`] with surfel `i` assigned to node group `group_of(i)`.
pub fn deform_grouped(
    map: &mut SurfelMap,
    graph: &DeformationGraph,
    group_of: impl Fn(usize) -> u8,
) -> usize {
    let mut unmoved = 0;
    for (i, s) in map.surfels.iter_mut().enumerate() {
        let inf = graph.influence_in(&s.position, group_of(i));
        if inf.is_empty() {
            unmoved += 1;
            continue;
        }
        let mut blend = Mat3::zeros();
        for &(l, w) in &inf {
            blend += w * graph.nodes[l].r;
        }
        s.position = graph.apply(&s.position, &inf);
        let n = blend * s.normal;
        if n.norm() > 1e-12 {
            s.normal = n.normalize();
        }
    }
    unmoved
}

struct Residual {
    weight: f64,
    dim: usize,
    r: SVector<f64, 6>,
    blocks: Vec<(usize, Block)>,
}

fn rot_residual(l: usize, n: &DeformationNode, weight: f64) -> Residual {
    let c = [
        n.r.column(0).into_owned(),
        n.r.column(1).into_owned(),
        n.r.column(2).into_owned(),
    ];
    let pairs = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];
    let mut r = SVector::<f64, 6>::zeros();
    let mut j = Block::zeros();
    for (row, &(a, b)) in pairs.iter().enumerate() {
        let s = if a == b {
            1.0
        } else {
            std::f64::consts::SQRT_2
        };
        r[row] = s * (c[a].dot(&c[b]) - if a == b { 1.0 } else { 0.0 });
        for i in 0..3 {
            // column a of R holds entries (i, a) -> param 3i + a
            j[(row, 3 * i + a)] += s * c[b][i];
            j[(row, 3 * i + b)] += s * c[a][i];
        }
    }
    Residual {
        weight,
        dim: 6,
        r,
        blocks: vec![(l, j)],
    }
}

/// Residual `R v + c` with `dR` taken from `v`; returns its 3×12 block.
fn linear_block(v: &Vec3, scale: f64) -> Block {
    let mut j = Block::zeros();
    for a in 0..3 {
        for b in 0..3 {
            j[(a, 3 * a + b)] = scale * v[b];
        }
        j[(a, 9 + a)] = scale;
    }
    j
}

fn residuals(
    graph: &DeformationGraph,
    constraints: &[(DeformationConstraint, Influence)],
    gravity: &Vec3,
    kind: EnergyKind,
    w: &EnergyWeights,
) -> Vec<Residual> {
    let mut out = Vec::new();
    for (l, n) in graph.nodes.iter().enumerate() {
        if w.rot != 0.0 {
            out.push(rot_residual(l, n, w.rot));
        }
        if w.reg != 0.0 {
            for &m in &n.neighbors {
                let nm = &graph.nodes[m];
                let d = nm.g - n.g;
                let r = n.r * d - d + n.t - nm.t;
                let mut jm = Block::zeros();
                for a in 0..3 {
                    jm[(a, 9 + a)] = -1.0;
                }
                out.push(Residual {
                    weight: w.reg,
                    dim: 3,
                    r: SVector::<f64, 6>::new(r.x, r.y, r.z, 0.0, 0.0, 0.0),
                    blocks: vec![(l, linear_block(&d, 1.0)), (m, jm)],
                });
            }
        }
        if w.imu != 0.0 {
            let r = n.r * gravity - gravity;
            let mut j = linear_block(gravity, 1.0);
            for a in 0..3 {
                j[(a, 9 + a)] = 0.0;
            }
            out.push(Residual {
                weight: w.imu,
                dim: 3,
                r: SVector::<f64, 6>::new(r.x, r.y, r.z, 0.0, 0.0, 0.0),
                blocks: vec![(l, j)],
            });
        }
    }
    for (c, inf) in constraints {
        if c.kind == ConstraintKind::Relative && kind == EnergyKind::Local {
            continue;
        }
        if inf.is_empty() {
            continue;
        }
        let r = graph.apply(&c.source, inf) - c.destination;
        let blocks = inf
            .iter()
            .map(|&(l, wl)| (l, linear_block(&(c.source - graph.nodes[l].g), wl)))
            .collect();
        out.push(Residual {
            weight: w.con,
            dim: 3,
            r: SVector::<f64, 6>::new(r.x, r.y, r.z, 0.0, 0.0, 0.0),
            blocks,
        });
    }
    out
}

fn with_influence(
    graph: &DeformationGraph,
    constraints: &[DeformationConstraint],
) -> Vec<(DeformationConstraint, Influence)> {
    constraints
        .iter()
        .map(|c| (*c, graph.influence_in(&c.source, c.group)))
        .collect()
}

fn energy_of(res: &[Residual]) -> f64 {
    res.iter()
        .map(|r| r.weight * r.r.rows(0, r.dim).norm_squared())
        .sum()
}

/// Total energy and its analytic gradient with respect to the stacked node
/// parameters (see [`DeformationGraph::params`]).
pub fn deformation_energy(
    graph: &DeformationGraph,
    constraints: &[DeformationConstraint],
    gravity: &Vec3,
    kind: EnergyKind,
    weights: &EnergyWeights,
) -> (f64, DVector<f64>) {
    let cons = with_influence(graph, constraints);
    let res = residuals(graph, &cons, gravity, kind, weights);
    let mut grad = DVector::zeros(NODE_PARAMS * graph.len());
    for r in &res {
        for (l, j) in &r.blocks {
            let g: Vec12 = 2.0 * r.weight * j.transpose() * r.r;
            let mut seg = grad.fixed_rows_mut::<12>(NODE_PARAMS * l);
            seg += g;
        }
    }
    (energy_of(&res), grad)
}

/// Block-sparse symmetric system over node parameters.
struct BlockSystem {
    diag: Vec<Mat12>,
    off: BTreeMap<(usize, usize), Mat12>,
    rhs: DVector<f64>,
}

impl BlockSystem {
    fn build(n: usize, res: &[Residual]) -> Self {
        let mut diag = vec![Mat12::zeros(); n];
        let mut off: BTreeMap<(usize, usize), Mat12> = BTreeMap::new();
        let mut rhs = DVector::zeros(NODE_PARAMS * n);
        for r in res {
            for (a, ja) in &r.blocks {
                let jta = ja.transpose() * r.weight;
                let mut seg = rhs.fixed_rows_mut::<12>(NODE_PARAMS * a);
                seg -= jta * r.r;
                for (b, jb) in &r.blocks {
                    let h = jta * jb;
                    if a == b {
                        diag[*a] += h;
                    } else if a < b {
                        *off.entry((*a, *b)).or_insert_with(Mat12::zeros) += h;
                    }
                }
            }
        }
        BlockSystem { diag, off, rhs }
    }

    fn mul(&self, x: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let mut y = DVector::zeros(x.len());
        for (l, d) in self.diag.iter().enumerate() {
            let xl = x.fixed_rows::<12>(NODE_PARAMS * l);
            let mut yl = d * xl;
            for i in 0..12 {
                yl[i] += lambda * d[(i, i)] * xl[i];
            }
            let mut seg = y.fixed_rows_mut::<12>(NODE_PARAMS * l);
            seg += yl;
        }
        for (&(a, b), h) in &self.off {
            let xa = x.fixed_rows::<12>(NODE_PARAMS * a).into_owned();
            let xb = x.fixed_rows::<12>(NODE_PARAMS * b).into_owned();
            let ya = h * xb;
            let yb = h.transpose() * xa;
            let mut sa = y.fixed_rows_mut::<12>(NODE_PARAMS * a);
            sa += ya;
            let mut sb = y.fixed_rows_mut::<12>(NODE_PARAMS * b);
            sb += yb;
        }
        y
    }

    /// Preconditioned conjugate gradients on `(H + λ diag H) x = rhs`.
    fn solve(&self, lambda: f64) -> DVector<f64> {
        let n = self.diag.len();
        let precond: Vec<Mat12> = self
            .diag
            .iter()
            .map(|d| {
                let mut m = *d;
                for i in 0..12 {
                    m[(i, i)] = m[(i, i)] * (1.0 + lambda) + 1e-12;
                }
                m.cholesky().map(|c| c.inverse()).unwrap_or_else(|| {
                    Mat12::from_diagonal(&Vec12::from_fn(|i, _| 1.0 / m[(i, i)].abs().max(1e-12)))
                })
            })
            .collect();
        let apply_m = |r: &DVector<f64>| {
            let mut z = DVector::zeros(r.len());
            for (l, p) in precond.iter().enumerate() {
                let mut seg = z.fixed_rows_mut::<12>(NODE_PARAMS * l);
                seg.copy_from(&(p * r.fixed_rows::<12>(NODE_PARAMS * l)));
            }
            z
        };
        let mut x = DVector::zeros(NODE_PARAMS * n);
        let mut r = self.rhs.clone();
        let b_norm = r.norm();
        if b_norm == 0.0 {
            return x;
        }
        let mut z = apply_m(&r);
        let mut p = z.clone();
        let mut rz = r.dot(&z);
        for _ in 0..(4 * NODE_PARAMS * n).min(2000) {
            let ap = self.mul(&p, lambda);
            let pap = p.dot(&ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            x.axpy(alpha, &p, 1.0);
            r.axpy(-alpha, &ap, 1.0);
            if r.norm() < 1e-12 * b_norm {
                break;
            }
            z = apply_m(&r);
            let rz_new = r.dot(&z);
            p = &z + (rz_new / rz) * &p;
            rz = rz_new;
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizationReport {
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub converged: bool,
}

/// Damped Gauss-Newton over all node parameters. The energy never
/// increases; if the iteration cap is hit the best iterate is kept and
/// `converged` is false.
pub fn optimize_graph(
    graph: &mut DeformationGraph,
    constraints: &[DeformationConstraint],
    gravity: &Vec3,
    kind: EnergyKind,
    config: &DeformationConfig,
) -> Result<OptimizationReport> {
    if constraints.is_empty() {
        return Err(Error::NoConstraints);
    }
    let cons = with_influence(graph, constraints);
    let w = config.weights;
    let n = graph.len();
    let mut res = residuals(graph, &cons, gravity, kind, &w);
    let initial = energy_of(&res);
    let mut energy = initial;
    let mut lambda = 1e-4;
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..config.max_iterations {
        let sys = BlockSystem::build(n, &res);
        if sys.rhs.amax() < 1e-14 {
            converged = true;
            break;
        }
        let x = graph.params();
        let mut accepted = false;
        while lambda < 1e12 {
            let delta = sys.solve(lambda);
            let mut trial = graph.clone();
            trial.set_params(&(&x + &delta));
            let trial_res = residuals(&trial, &cons, gravity, kind, &w);
            let e = energy_of(&trial_res);
            if e < energy {
                *graph = trial;
                res = trial_res;
                energy = e;
                lambda = (lambda * 0.1).max(1e-10);
                accepted = true;
                iterations += 1;
                converged = delta.norm() < config.tolerance;
                break;
            }
            if delta.norm() < config.tolerance {
                converged = true;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || converged {
            converged |= !accepted;
            break;
        }
    }
    if !converged {
        log::warn!(
            "deformation graph did not converge in {} iterations",
            config.max_iterations
        );
    }
    Ok(OptimizationReport {
        initial_energy: initial,
        final_energy: energy,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::exp_rotation;
    use crate::map::{MapConfig, Surfel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const G: Vec3 = Vec3::new(0.0, 0.0, -9.81);

    fn grid_nodes(n: usize, step: f64) -> Vec<Vec3> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                v.push(Vec3::new(i as f64 * step, j as f64 * step, 0.0));
            }
        }
        v
    }

    fn random_graph(rng: &mut ChaCha8Rng) -> DeformationGraph {
        let mut g = DeformationGraph::new(grid_nodes(3, 0.3), 4, 0.75);
        for n in &mut g.nodes {
            n.r =
                Mat3::from_fn(|i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3));
            n.t = Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1));
        }
        g
    }

    fn map_of(points: &[Vec3]) -> SurfelMap {
        SurfelMap {
            surfels: points
                .iter()
                .map(|p| Surfel {
                    position: *p,
                    normal: Vec3::z(),
                    radius: 0.01,
                    confidence: 1.0,
                    last_seen: 0,
                    intensity: 0.0,
                })
                .collect(),
            config: MapConfig::default(),
        }
    }

    #[test]
    fn identity_graph_leaves_map_unchanged() {
        let pts: Vec<Vec3> = (0..50)
            .map(|i| Vec3::new(0.01 * i as f64, 0.3, 0.0))
            .collect();
        let mut map = map_of(&pts);
        let before = map.surfels.clone();
        let g = DeformationGraph::new(grid_nodes(3, 0.3), 4, 0.75);
        assert_eq!(deform(&mut map, &g), 0);
        assert_eq!(map.surfels, before);
    }

    #[test]
    fn common_translation_is_reproduced_exactly() {
        let pts: Vec<Vec3> = (0..50)
            .map(|i| Vec3::new(0.012 * i as f64, 0.2, 0.05))
            .collect();
        let mut map = map_of(&pts);
        let mut g = DeformationGraph::new(grid_nodes(3, 0.3), 4, 0.75);
        for n in &mut g.nodes {
            n.t = Vec3::new(0.0, 0.0, 0.1);
        }
        deform(&mut map, &g);
        for (s, p) in map.surfels.iter().zip(&pts) {
            assert!((s.position - p - Vec3::new(0.0, 0.0, 0.1)).norm() < 1e-15);
        }
    }

    #[test]
    fn single_node_rotation_preserves_orbit_radius() {
        let mut g = DeformationGraph::new(vec![Vec3::new(1.0, 1.0, 1.0)], 4, 2.0);
        g.nodes[0].r = exp_rotation(&Vec3::new(0.3, -0.5, 0.9))
            .to_rotation_matrix()
            .into_inner();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p =
                Vec3::new(1.0, 1.0, 1.0) + Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)) * 0.5;
            let q = g.transform_point(&p);
            assert!(((q - g.nodes[0].g).norm() - (p - g.nodes[0].g).norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_range_points_are_flagged() {
        let g = DeformationGraph::new(vec![Vec3::zeros()], 4, 0.5);
        let mut map = map_of(&[Vec3::new(3.0, 0.0, 0.0), Vec3::new(0.1, 0.0, 0.0)]);
        assert_eq!(deform(&mut map, &g), 1);
        assert_eq!(g.uncovered(&map.positions()), 1);
    }

    #[test]
    fn satisfied_identity_graph_has_zero_energy() {
        let g = DeformationGraph::new(grid_nodes(3, 0.3), 4, 0.75);
        let c = vec![DeformationConstraint::surface(
            Vec3::new(0.1, 0.2, 0.0),
            Vec3::new(0.1, 0.2, 0.0),
        )];
        let (e, grad) =
            deformation_energy(&g, &c, &G, EnergyKind::Local, &EnergyWeights::default());
        assert_eq!(e, 0.0);
        assert_eq!(grad.amax(), 0.0);
    }

    #[test]
    fn gravity_term_values() {
        let mut g = DeformationGraph::new(vec![Vec3::zeros()], 4, 1.0);
        let w = EnergyWeights {
            rot: 0.0,
            reg: 0.0,
            con: 0.0,
            imu: 1.0,
        };
        g.nodes[0].r = exp_rotation(&Vec3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0))
            .to_rotation_matrix()
            .into_inner();
        let (e, _) = deformation_energy(&g, &[], &G, EnergyKind::Local, &w);
        assert!((e - 192.47).abs() < 0.005, "{e}");
        for angle in [0.3, 1.0, 2.5, -1.7] {
            g.nodes[0].r = exp_rotation(&Vec3::new(0.0, 0.0, angle))
                .to_rotation_matrix()
                .into_inner();
            let (e, _) = deformation_energy(&g, &[], &G, EnergyKind::Local, &w);
            assert!(e < 1e-24);
        }
    }

    #[test]
    fn rotation_term_vanishes_exactly_for_orthonormal_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = EnergyWeights {
            rot: 1.0,
            reg: 0.0,
            con: 0.0,
            imu: 0.0,
        };
        let mut g = DeformationGraph::new(vec![Vec3::zeros()], 4, 1.0);
        for _ in 0..50 {
            let r = exp_rotation(&Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0)))
                .to_rotation_matrix()
                .into_inner();
            g.nodes[0].r = r;
            assert!(deformation_energy(&g, &[], &G, EnergyKind::Local, &w).0 < 1e-28);
            g.nodes[0].r = r + Mat3::from_fn(|_, _| rng.random_range(-0.01..0.01));
            assert!(deformation_energy(&g, &[], &G, EnergyKind::Local, &w).0 > 0.0);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let g = random_graph(&mut rng);
            let cons: Vec<DeformationConstraint> = (0..5)
                .map(|_| {
                    let s = Vec3::new(rng.random_range(0.0..0.6), rng.random_range(0.0..0.6), 0.0);
                    let d = s + Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1));
                    DeformationConstraint::surface(s, d)
                })
                .collect();
            let w = EnergyWeights::default();
            let (_, grad) = deformation_energy(&g, &cons, &G, EnergyKind::Global, &w);
            let x = g.params();
            for i in 0..x.len() {
                let h = 1e-6;
                let mut gp = g.clone();
                let mut xp = x.clone();
                xp[i] += h;
                gp.set_params(&xp);
                let mut gm = g.clone();
                let mut xm = x.clone();
                xm[i] -= h;
                gm.set_params(&xm);
                let fd = (deformation_energy(&gp, &cons, &G, EnergyKind::Global, &w).0
                    - deformation_energy(&gm, &cons, &G, EnergyKind::Global, &w).0)
                    / (2.0 * h);
                let scale = grad[i].abs().max(1.0);
                assert!(
                    (fd - grad[i]).abs() / scale < 1e-5,
                    "{i}: {fd} vs {}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn satisfied_constraints_need_no_iterations() {
        let mut g = DeformationGraph::new(grid_nodes(3, 0.3), 4, 0.75);
        let p = Vec3::new(0.2, 0.2, 0.0);
        let r = optimize_graph(
            &mut g,
            &[DeformationConstraint::surface(p, p)],
            &G,
            EnergyKind::Local,
            &DeformationConfig::default(),
        )
        .unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(
            g.params(),
            DeformationGraph::new(grid_nodes(3, 0.3), 4, 0.75).params()
        );
        assert!(matches!(
            optimize_graph(
                &mut g,
                &[],
                &G,
                EnergyKind::Local,
                &DeformationConfig::default()
            ),
            Err(Error::NoConstraints)
        ));
    }

    #[test]
    fn single_constraint_is_met() {
        let mut g = DeformationGraph::new(grid_nodes(5, 0.2), 4, 0.5);
        let s = Vec3::new(0.4, 0.4, 0.0);
        let d = s + Vec3::new(0.0, 0.0, 0.1);
        let cfg = DeformationConfig::default();
        let r = optimize_graph(
            &mut g,
            &[DeformationConstraint::surface(s, d)],
            &G,
            EnergyKind::Local,
            &cfg,
        )
        .unwrap();
        assert!(r.final_energy <= r.initial_energy);
        assert!((g.transform_point(&s) - d).norm() < 1e-3);
    }

    #[test]
    fn relative_constraints_only_count_globally() {
        let g = DeformationGraph::new(grid_nodes(3, 0.3), 4, 0.75);
        let c = [DeformationConstraint {
            source: Vec3::new(0.1, 0.1, 0.0),
            destination: Vec3::new(0.1, 0.1, 0.2),
            kind: ConstraintKind::Relative,
            group: 0,
        }];
        let w = EnergyWeights::default();
        assert_eq!(deformation_energy(&g, &c, &G, EnergyKind::Local, &w).0, 0.0);
        assert!(deformation_energy(&g, &c, &G, EnergyKind::Global, &w).0 > 0.0);
    }

    #[test]
    fn sampling_respects_spacing_and_cap() {
        let pts: Vec<Vec3> = (0..400)
            .map(|i| Vec3::new((i % 20) as f64 * 0.05, (i / 20) as f64 * 0.05, 0.0))
            .collect();
        let g = DeformationGraph::sample(&pts, &DeformationConfig::default()).unwrap();
        for (i, a) in g.nodes.iter().enumerate() {
            for b in &g.nodes[i + 1..] {
                assert!((a.g - b.g).norm() >= 0.3);
            }
        }
        assert_eq!(g.uncovered(&pts), 0);
        let capped = DeformationGraph::sample(
            &pts,
            &DeformationConfig {
                max_nodes: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(capped.len() <= 3);
        assert!(DeformationGraph::sample(&[], &DeformationConfig::default()).is_err());
    }

    #[test]
    fn groups_do_not_mix() {
        let points: Vec<Vec3> = grid_nodes(10, 0.1);
        let groups: Vec<u8> = points.iter().map(|p| u8::from(p.x > 0.45)).collect();
        let config = DeformationConfig {
            spacing: 0.2,
            ..Default::default()
        };
        let g = DeformationGraph::sample_grouped(&points, &groups, &config).unwrap();
        assert!(g.nodes.iter().any(|n| n.group == 0) && g.nodes.iter().any(|n| n.group == 1));
        for n in &g.nodes {
            assert!(n.neighbors.iter().all(|&j| g.nodes[j].group == n.group));
        }
        let p = Vec3::new(0.45, 0.4, 0.0);
        for group in [0, 1] {
            let inf = g.influence_in(&p, group);
            assert!(!inf.is_empty());
            assert!(inf.iter().all(|&(i, _)| g.nodes[i].group == group));
        }

        // moving only group-1 nodes leaves group-0 points in place
        let mut moved = g.clone();
        for n in moved.nodes.iter_mut().filter(|n| n.group == 1) {
            n.t = Vec3::new(0.0, 0.0, 0.3);
        }
        let mut map = map_of(&points);
        deform_grouped(&mut map, &moved, |k| groups[k]);
        for (s, (p, grp)) in map.surfels.iter().zip(points.iter().zip(&groups)) {
            let dz = s.position.z - p.z;
            if *grp == 0 {
                assert_eq!(dz, 0.0);
            } else {
                assert!((dz - 0.3).abs() < 1e-12);
            }
        }
    }
}
