//! Point-cloud geometric kernels.
//!
//! Value-domain operations (normalization, farthest point sampling, k-nearest
//! neighbors) run in f64 and are deterministic with ties broken toward the
//! lowest index. The differentiable node operations — offset prediction,
//! region feature gathering, and inverse-distance interpolation back to
//! points — are built on tape tensors and take explicit row indices, so one
//! call can cover a whole batch of clouds laid out as stacked rows.
//!
//! Index selection (which points are neighbors, which rows win a max) is
//! piecewise constant: gradients flow through feature values and through the
//! interpolation weights into node positions, not through index choices.

use thiserror::Error;

use crate::tensor::{Element, Tape, Tensor, TensorError, TensorResult};

#[derive(Error, Debug)]
pub enum GeomError {
    #[error("operation requires a non-empty point cloud")]
    EmptyCloud,
    #[error("{what}: requested {requested} but only {available} points available")]
    NotEnoughPoints {
        what: &'static str,
        requested: usize,
        available: usize,
    },
    #[error("feature rows ({features}) do not match point count ({points})")]
    FeatureMismatch { points: usize, features: usize },
    #[error("interpolation requires at least 3 nodes, got {got}")]
    TooFewNodes { got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type GeomResult<T> = Result<T, GeomError>;

/// Which side of the adaptation pair a cloud belongs to.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DomainTag {
    Source,
    Target,
}

/// One object: T points with 3D coordinates and an optional class label.
#[derive(Clone, Debug)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub label: Option<usize>,
    pub domain: DomainTag,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud {
            points,
            label: None,
            domain: DomainTag::Source,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_norm(&self) -> f64 {
        self.points
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max)
    }

    /// Flatten coordinates row-major for tensor constants.
    pub fn coords_flat<E: Element>(&self) -> Vec<E> {
        let mut out = Vec::with_capacity(self.points.len() * 3);
        for p in &self.points {
            out.push(E::from_f64(p[0]));
            out.push(E::from_f64(p[1]));
            out.push(E::from_f64(p[2]));
        }
        out
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Center at the origin and scale so the farthest point sits on the unit
/// sphere. A degenerate all-identical cloud collapses to the origin.
pub fn normalize(cloud: &PointCloud) -> GeomResult<PointCloud> {
    if cloud.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    let t = cloud.len() as f64;
    let mut centroid = [0.0f64; 3];
    for p in &cloud.points {
        centroid[0] += p[0];
        centroid[1] += p[1];
        centroid[2] += p[2];
    }
    for c in centroid.iter_mut() {
        *c /= t;
    }
    let mut centered: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let max_norm = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    let scale = if max_norm > 0.0 { max_norm } else { 1.0 };
    for p in centered.iter_mut() {
        p[0] /= scale;
        p[1] /= scale;
        p[2] /= scale;
    }
    Ok(PointCloud {
        points: centered,
        label: cloud.label,
        domain: cloud.domain,
    })
}

/// Permutation-invariant seed for FPS: the point farthest from the origin,
/// ties broken by lexicographic coordinate order. Keeps the whole node
/// pipeline independent of point numbering.
pub fn canonical_start(points: &[[f64; 3]]) -> usize {
    let mut best = 0usize;
    let mut best_key = (f64::NEG_INFINITY, [0.0f64; 3]);
    for (i, p) in points.iter().enumerate() {
        let n2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        let key = (n2, *p);
        let better = key.0 > best_key.0
            || (key.0 == best_key.0 && lex_less(&key.1, &best_key.1));
        if i == 0 || better {
            best = i;
            best_key = key;
        }
    }
    best
}

fn lex_less(a: &[f64; 3], b: &[f64; 3]) -> bool {
    for d in 0..3 {
        if a[d] < b[d] {
            return true;
        }
        if a[d] > b[d] {
            return false;
        }
    }
    false
}

/// Greedy farthest point sampling: repeatedly pick the point with the
/// largest distance to the selected set. Ties go to the lowest index.
pub fn fps(points: &[[f64; 3]], n: usize, start: usize) -> GeomResult<Vec<usize>> {
    if n == 0 || n > points.len() {
        return Err(GeomError::NotEnoughPoints {
            what: "fps",
            requested: n,
            available: points.len(),
        });
    }
    assert!(start < points.len(), "fps: start index out of range");
    let mut selected = Vec::with_capacity(n);
    selected.push(start);
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[start])).collect();
    while selected.len() < n {
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = sq_dist(&points[i], &points[best]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

/// Per query, the k nearest points by Euclidean distance, ordered by
/// (distance, index) ascending. Returns a flat `queries.len() * k` index
/// vector. A query coinciding with a point includes that point.
pub fn knn(queries: &[[f64; 3]], points: &[[f64; 3]], k: usize) -> GeomResult<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(GeomError::NotEnoughPoints {
            what: "knn",
            requested: k,
            available: points.len(),
        });
    }
    let mut out = Vec::with_capacity(queries.len() * k);
    // Insertion into a small sorted buffer; distinct from the full-sort
    // oracle used by the tests.
    let mut buf: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for q in queries {
        buf.clear();
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(q, p);
            if buf.len() == k {
                let (wd, wi) = buf[k - 1];
                if d > wd || (d == wd && i > wi) {
                    continue;
                }
            }
            let pos = buf
                .partition_point(|&(bd, bi)| bd < d || (bd == d && bi < i));
            buf.insert(pos, (d, i));
            if buf.len() > k {
                buf.pop();
            }
        }
        out.extend(buf.iter().map(|&(_, i)| i));
    }
    Ok(out)
}

/// Local-region anchors for one cloud: positions, per-node point regions,
/// and the learned shift that produced the current positions.
#[derive(Clone, Debug)]
pub struct NodeSet {
    /// Where each node started (the FPS-selected point).
    pub initial_positions: Vec<[f64; 3]>,
    /// Current positions; always `initial + offsets` exactly.
    pub positions: Vec<[f64; 3]>,
    pub offsets: Vec<[f64; 3]>,
    /// Index of the point each node was initialized at.
    pub source_rows: Vec<usize>,
    /// Flat n*k neighbor point indices.
    pub neighbor_indices: Vec<usize>,
    pub k: usize,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// FPS-initialize n nodes over a cloud (seeded at the canonical start point)
/// and collect their k-neighborhoods.
pub fn build_nodes(points: &[[f64; 3]], n: usize, k: usize) -> GeomResult<NodeSet> {
    let source_rows = fps(points, n, canonical_start(points))?;
    let positions: Vec<[f64; 3]> = source_rows.iter().map(|&i| points[i]).collect();
    let neighbor_indices = knn(&positions, points, k)?;
    Ok(NodeSet {
        initial_positions: positions.clone(),
        positions,
        offsets: vec![[0.0; 3]; n],
        source_rows,
        neighbor_indices,
        k,
    })
}

/// Apply offsets once and rebuild each region from the shifted position.
pub fn update_nodes(
    nodes: &NodeSet,
    offsets: &[[f64; 3]],
    points: &[[f64; 3]],
    k: usize,
) -> GeomResult<NodeSet> {
    assert_eq!(offsets.len(), nodes.len(), "update_nodes: offset count");
    let positions: Vec<[f64; 3]> = nodes
        .initial_positions
        .iter()
        .zip(offsets)
        .map(|(p, o)| [p[0] + o[0], p[1] + o[1], p[2] + o[2]])
        .collect();
    let neighbor_indices = knn(&positions, points, k)?;
    Ok(NodeSet {
        initial_positions: nodes.initial_positions.clone(),
        positions,
        offsets: offsets.to_vec(),
        source_rows: nodes.source_rows.clone(),
        neighbor_indices,
        k,
    })
}

/// Edge vectors x_cj − x̂_c for every node/neighbor pair, flat (n*k)×3.
pub fn edge_vectors(nodes: &NodeSet, points: &[[f64; 3]]) -> Vec<f64> {
    let mut out = Vec::with_capacity(nodes.neighbor_indices.len() * 3);
    for (c, pos) in nodes.initial_positions.iter().enumerate() {
        for j in 0..nodes.k {
            let p = points[nodes.neighbor_indices[c * nodes.k + j]];
            out.push(p[0] - pos[0]);
            out.push(p[1] - pos[1]);
            out.push(p[2] - pos[2]);
        }
    }
    out
}

/// Predicted node shift: the mean of each region's edge vectors, weighted by
/// a learned scalar significance of the corresponding edge feature.
///
/// `point_features` holds one row per point (stacked over any number of
/// clouds); `node_source_rows`/`neighbor_rows` index into those rows.
/// `edge_vecs` is the constant (N*k)×3 edge geometry.
pub fn predict_offsets<'t, E: Element>(
    point_features: Tensor<'t, E>,
    node_source_rows: &[usize],
    neighbor_rows: &[usize],
    edge_vecs: Tensor<'t, E>,
    k: usize,
    rt_weight: Tensor<'t, E>,
    rt_bias: Tensor<'t, E>,
) -> TensorResult<Tensor<'t, E>> {
    assert_eq!(neighbor_rows.len(), node_source_rows.len() * k);
    let v_neighbors = point_features.gather_rows(neighbor_rows)?;
    let v_nodes = point_features.gather_rows(node_source_rows)?.repeat_rows(k)?;
    let edge_feat = v_neighbors.sub(v_nodes)?;
    let significance = edge_feat.linear(rt_weight, rt_bias)?;
    edge_vecs.mul_colvec(significance)?.segment_mean(k)
}

/// Region feature: elementwise max over each region of a learned pointwise
/// map of the neighbor features.
pub fn gather_node_features<'t, E: Element>(
    point_features: Tensor<'t, E>,
    neighbor_rows: &[usize],
    k: usize,
    rg_weight: Tensor<'t, E>,
    rg_bias: Tensor<'t, E>,
) -> TensorResult<Tensor<'t, E>> {
    let v_neighbors = point_features.gather_rows(neighbor_rows)?;
    let mapped = v_neighbors.linear(rg_weight, rg_bias)?.relu();
    mapped.segment_max(k)
}

const INTERP_EPS: f64 = 1e-10;
const INTERP_NEIGHBORS: usize = 3;

/// Interpolate node features back to points: inverse-squared-distance
/// weights over each point's 3 nearest nodes, normalized to sum to one.
/// Differentiable in both node features and node positions — this is the
/// gradient path into the offset predictor.
///
/// `nearest_nodes` holds 3 node-row indices per point row; `point_rep` is a
/// constant with each point's coordinates repeated 3 times, (P*3)×3.
pub fn interpolate_to_points<'t, E: Element>(
    node_features: Tensor<'t, E>,
    node_positions: Tensor<'t, E>,
    point_rep: Tensor<'t, E>,
    nearest_nodes: &[usize],
) -> TensorResult<Tensor<'t, E>> {
    let n_nodes = node_positions.rows();
    if n_nodes < INTERP_NEIGHBORS {
        // Mapped through TensorError to keep this signature tensor-only;
        // callers with cloud context wrap it in GeomError::TooFewNodes.
        return Err(TensorError::InvalidShape {
            op: "interpolate_to_points",
            shape: format!("[{n_nodes}, 3]"),
            detail: "need at least 3 nodes".into(),
        });
    }
    assert_eq!(nearest_nodes.len(), point_rep.rows());
    let gathered_pos = node_positions.gather_rows(nearest_nodes)?;
    let diff = gathered_pos.sub(point_rep)?;
    let d2 = diff.mul(diff)?.reduce_sum(1)?.reshape(&[nearest_nodes.len(), 1])?;
    let w = d2.recip(INTERP_EPS);
    let norm = w.segment_sum(INTERP_NEIGHBORS)?.repeat_rows(INTERP_NEIGHBORS)?;
    let w_norm = w.div(norm)?;
    let gathered_feat = node_features.gather_rows(nearest_nodes)?;
    gathered_feat.mul_colvec(w_norm)?.segment_sum(INTERP_NEIGHBORS)
}

/// Single-cloud convenience wrapper around [`predict_offsets`].
pub fn predict_offsets_for_cloud<'t, E: Element>(
    tape: &'t Tape<E>,
    nodes: &NodeSet,
    points: &[[f64; 3]],
    point_features: Tensor<'t, E>,
    rt_weight: Tensor<'t, E>,
    rt_bias: Tensor<'t, E>,
) -> GeomResult<Tensor<'t, E>> {
    if point_features.rows() != points.len() {
        return Err(GeomError::FeatureMismatch {
            points: points.len(),
            features: point_features.rows(),
        });
    }
    let ev = edge_vectors(nodes, points);
    let ev_t = tape.constant(
        ev.iter().map(|&v| E::from_f64(v)).collect(),
        &[nodes.neighbor_indices.len(), 3],
    );
    Ok(predict_offsets(
        point_features,
        &nodes.source_rows,
        &nodes.neighbor_indices,
        ev_t,
        nodes.k,
        rt_weight,
        rt_bias,
    )?)
}

/// Single-cloud convenience wrapper around [`interpolate_to_points`].
pub fn interpolate_for_cloud<'t, E: Element>(
    tape: &'t Tape<E>,
    nodes: &NodeSet,
    node_features: Tensor<'t, E>,
    node_positions: Tensor<'t, E>,
    points: &[[f64; 3]],
) -> GeomResult<Tensor<'t, E>> {
    if nodes.len() < INTERP_NEIGHBORS {
        return Err(GeomError::TooFewNodes { got: nodes.len() });
    }
    let nearest = knn(points, &nodes.positions, INTERP_NEIGHBORS)?;
    let mut rep = Vec::with_capacity(points.len() * INTERP_NEIGHBORS * 3);
    for p in points {
        for _ in 0..INTERP_NEIGHBORS {
            rep.push(E::from_f64(p[0]));
            rep.push(E::from_f64(p[1]));
            rep.push(E::from_f64(p[2]));
        }
    }
    let rep_t = tape.constant(rep, &[points.len() * INTERP_NEIGHBORS, 3]);
    Ok(interpolate_to_points(node_features, node_positions, rep_t, &nearest)?)
}

#[cfg(test)]
mod tests;
