use super::*;
use crate::tensor::gradcheck;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_points(rng: &mut ChaCha8Rng, t: usize) -> Vec<[f64; 3]> {
    (0..t)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect()
}

// ── value-domain kernels ─────────────────────────────────────────────

#[test]
fn normalize_two_point_cloud() {
    let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
    let n = normalize(&cloud).unwrap();
    assert_eq!(n.points, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
}

#[test]
fn normalize_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cloud = PointCloud::new(random_points(&mut rng, 40));
    let once = normalize(&cloud).unwrap();
    let twice = normalize(&once).unwrap();
    for (a, b) in once.points.iter().zip(&twice.points) {
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn normalize_invariants_on_random_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let mut cloud = PointCloud::new(random_points(&mut rng, 64));
        for p in cloud.points.iter_mut() {
            p[0] = p[0] * 3.0 + 5.0;
            p[1] *= 0.2;
        }
        let n = normalize(&cloud).unwrap();
        let mut centroid = [0.0f64; 3];
        for p in &n.points {
            for c in 0..3 {
                centroid[c] += p[c];
            }
        }
        let cn = centroid.iter().map(|c| (c / 64.0).powi(2)).sum::<f64>().sqrt();
        assert!(cn < 1e-9, "centroid norm {cn}");
        assert!((n.max_norm() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn normalize_degenerate_cloud_goes_to_origin() {
    let cloud = PointCloud::new(vec![[3.0, 1.0, -2.0]; 5]);
    let n = normalize(&cloud).unwrap();
    assert!(n.points.iter().all(|p| *p == [0.0, 0.0, 0.0]));
}

#[test]
fn normalize_empty_errors() {
    assert!(matches!(normalize(&PointCloud::new(vec![])), Err(GeomError::EmptyCloud)));
}

#[test]
fn fps_square_picks_diagonal() {
    let pts = vec![
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
    ];
    assert_eq!(fps(&pts, 2, 0).unwrap(), vec![0, 3]);
}

#[test]
fn fps_n_equals_t_selects_all() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pts = random_points(&mut rng, 12);
    let mut sel = fps(&pts, 12, 0).unwrap();
    sel.sort_unstable();
    assert_eq!(sel, (0..12).collect::<Vec<_>>());
}

#[test]
fn fps_too_many_errors() {
    let pts = vec![[0.0; 3]; 4];
    assert!(fps(&pts, 5, 0).is_err());
}

/// Greedy oracle that recomputes every distance from scratch at each step.
fn fps_oracle(points: &[[f64; 3]], n: usize, start: usize) -> Vec<usize> {
    let mut selected = vec![start];
    while selected.len() < n {
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..points.len() {
            let d = selected
                .iter()
                .map(|&s| sq_dist(&points[i], &points[s]))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
    }
    selected
}

#[test]
fn fps_matches_bruteforce_oracle_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let t = rng.random_range(2..=64);
        let n = rng.random_range(1..=t);
        let pts = random_points(&mut rng, t);
        assert_eq!(fps(&pts, n, 0).unwrap(), fps_oracle(&pts, n, 0));
    }
}

#[test]
fn knn_simple_line() {
    let pts = vec![[0.0, 0.0, 1.0], [0.0, 0.0, 2.0], [0.0, 0.0, 3.0]];
    assert_eq!(knn(&[[0.0, 0.0, 0.0]], &pts, 2).unwrap(), vec![0, 1]);
}

#[test]
fn knn_k_equals_t_sorted_by_distance() {
    let pts = vec![[0.0, 0.0, 3.0], [0.0, 0.0, 1.0], [0.0, 0.0, 2.0]];
    assert_eq!(knn(&[[0.0, 0.0, 0.0]], &pts, 3).unwrap(), vec![1, 2, 0]);
}

#[test]
fn knn_query_coinciding_with_point_includes_it() {
    let pts = vec![[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [2.0, 2.0, 2.0]];
    let got = knn(&[[1.0, 1.0, 1.0]], &pts, 1).unwrap();
    assert_eq!(got, vec![0]);
}

#[test]
fn knn_too_large_k_errors() {
    let pts = vec![[0.0; 3]; 3];
    assert!(knn(&[[0.0; 3]], &pts, 4).is_err());
}

/// Full-sort oracle.
fn knn_oracle(queries: &[[f64; 3]], points: &[[f64; 3]], k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for q in queries {
        let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (sq_dist(q, p), i)).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.extend(all[..k].iter().map(|&(_, i)| i));
    }
    out
}

#[test]
fn knn_matches_fullsort_oracle_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let t = rng.random_range(1..=64);
        let k = rng.random_range(1..=t);
        let q = rng.random_range(1..=8);
        let pts = random_points(&mut rng, t);
        let queries = random_points(&mut rng, q);
        assert_eq!(knn(&queries, &pts, k).unwrap(), knn_oracle(&queries, &pts, k));
    }
}

// ── node construction and update ─────────────────────────────────────

#[test]
fn update_nodes_zero_offsets_keeps_neighbors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts = random_points(&mut rng, 50);
    let nodes = build_nodes(&pts, 8, 5).unwrap();
    let updated = update_nodes(&nodes, &vec![[0.0; 3]; 8], &pts, 5).unwrap();
    assert_eq!(nodes.neighbor_indices, updated.neighbor_indices);
    assert_eq!(nodes.positions, updated.positions);
}

#[test]
fn update_nodes_positions_are_exact_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts = random_points(&mut rng, 30);
    let nodes = build_nodes(&pts, 4, 3).unwrap();
    let offsets: Vec<[f64; 3]> = (0..4)
        .map(|_| {
            [
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            ]
        })
        .collect();
    let updated = update_nodes(&nodes, &offsets, &pts, 3).unwrap();
    for c in 0..4 {
        for d in 0..3 {
            let expect = nodes.initial_positions[c][d] + offsets[c][d];
            assert_eq!(updated.positions[c][d].to_bits(), expect.to_bits());
        }
    }
}

#[test]
fn update_nodes_moving_onto_cluster_adopts_it() {
    // Two separated clusters; first node belongs to the low cluster.
    let mut pts: Vec<[f64; 3]> = (0..10)
        .map(|i| [i as f64 * 0.01, 0.0, 0.0])
        .collect();
    pts.extend((0..10).map(|i| [10.0 + i as f64 * 0.01, 0.0, 0.0]));
    let nodes = build_nodes(&pts, 2, 4).unwrap();
    let node_at_origin = nodes
        .initial_positions
        .iter()
        .position(|p| p[0] < 5.0)
        .unwrap();
    let mut offsets = vec![[0.0; 3]; 2];
    offsets[node_at_origin] = [10.0, 0.0, 0.0];
    let updated = update_nodes(&nodes, &offsets, &pts, 4).unwrap();
    for j in 0..4 {
        let nb = updated.neighbor_indices[node_at_origin * 4 + j];
        assert!(nb >= 10, "neighbor {nb} not drawn from the far cluster");
    }
}

// ── differentiable node ops ──────────────────────────────────────────

struct OffsetRig {
    pts: Vec<[f64; 3]>,
    nodes: NodeSet,
    feats: Vec<f64>,
    c: usize,
}

fn offset_rig(seed: u64, t: usize, n: usize, k: usize, c: usize) -> OffsetRig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = random_points(&mut rng, t);
    let nodes = build_nodes(&pts, n, k).unwrap();
    let feats = (0..t * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    OffsetRig { pts, nodes, feats, c }
}

#[test]
fn offsets_with_unit_weight_are_region_centroids() {
    let rig = offset_rig(21, 40, 6, 5, 4);
    let tape: Tape<f64> = Tape::new();
    let feats = tape.constant(rig.feats.clone(), &[40, rig.c]);
    let w = tape.constant(vec![0.0; rig.c], &[rig.c, 1]);
    let b = tape.constant(vec![1.0], &[1]);
    let off = predict_offsets_for_cloud(&tape, &rig.nodes, &rig.pts, feats, w, b)
        .unwrap()
        .value();
    for (cnode, pos) in rig.nodes.initial_positions.iter().enumerate() {
        let mut centroid = [0.0f64; 3];
        for j in 0..5 {
            let p = rig.pts[rig.nodes.neighbor_indices[cnode * 5 + j]];
            for d in 0..3 {
                centroid[d] += p[d] / 5.0;
            }
        }
        for d in 0..3 {
            assert!((off[cnode * 3 + d] - (centroid[d] - pos[d])).abs() < 1e-12);
        }
    }
}

#[test]
fn offsets_with_zero_map_are_zero() {
    let rig = offset_rig(22, 30, 4, 6, 5);
    let tape: Tape<f64> = Tape::new();
    let feats = tape.constant(rig.feats.clone(), &[30, rig.c]);
    let w = tape.constant(vec![0.0; rig.c], &[rig.c, 1]);
    let b = tape.constant(vec![0.0], &[1]);
    let off = predict_offsets_for_cloud(&tape, &rig.nodes, &rig.pts, feats, w, b)
        .unwrap()
        .value();
    assert!(off.iter().all(|&v| v == 0.0));
}

#[test]
fn offset_gradient_wrt_transform_params_matches_fd() {
    let rig = offset_rig(23, 30, 5, 4, 6);
    let report = gradcheck::<f64, _>(
        |tape, rt_w| {
            let feats = tape.constant(rig.feats.clone(), &[30, rig.c]);
            let b = tape.constant(vec![0.2], &[1]);
            let ev = edge_vectors(&rig.nodes, &rig.pts);
            let ev_t = tape.constant(ev, &[rig.nodes.neighbor_indices.len(), 3]);
            let off = predict_offsets(
                feats,
                &rig.nodes.source_rows,
                &rig.nodes.neighbor_indices,
                ev_t,
                rig.nodes.k,
                rt_w,
                b,
            )?;
            Ok(off.mul(off)?.sum_all())
        },
        &vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.25],
        &[6, 1],
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn offsets_are_translation_equivariant() {
    let rig = offset_rig(24, 36, 5, 4, 4);
    let shift = [0.7, -1.3, 2.1];
    let shifted_pts: Vec<[f64; 3]> = rig
        .pts
        .iter()
        .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
        .collect();
    let mut shifted_nodes = rig.nodes.clone();
    for p in shifted_nodes.initial_positions.iter_mut() {
        for d in 0..3 {
            p[d] += shift[d];
        }
    }

    let run = |pts: &Vec<[f64; 3]>, nodes: &NodeSet| {
        let tape: Tape<f64> = Tape::new();
        let feats = tape.constant(rig.feats.clone(), &[36, rig.c]);
        let w = tape.constant(vec![0.3, -0.1, 0.2, 0.4], &[rig.c, 1]);
        let b = tape.constant(vec![0.1], &[1]);
        predict_offsets_for_cloud(&tape, nodes, pts, feats, w, b)
            .unwrap()
            .value()
    };
    let base = run(&rig.pts, &rig.nodes);
    let shifted = run(&shifted_pts, &shifted_nodes);
    for (a, b) in base.iter().zip(&shifted) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn gather_with_identity_map_is_neighbor_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let pts = random_points(&mut rng, 25);
    let nodes = build_nodes(&pts, 4, 3).unwrap();
    let c = 4;
    // all-positive features so relu never clamps
    let feats: Vec<f64> = (0..25 * c).map(|_| rng.random_range(0.1..1.0)).collect();
    let tape: Tape<f64> = Tape::new();
    let feats_t = tape.constant(feats.clone(), &[25, c]);
    let mut ident = vec![0.0; c * c];
    for i in 0..c {
        ident[i * c + i] = 1.0;
    }
    let w = tape.constant(ident, &[c, c]);
    let b = tape.constant(vec![0.0; c], &[c]);
    let out = gather_node_features(feats_t, &nodes.neighbor_indices, 3, w, b)
        .unwrap()
        .value();
    for node in 0..4 {
        for col in 0..c {
            let manual = (0..3)
                .map(|j| feats[nodes.neighbor_indices[node * 3 + j] * c + col])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((out[node * c + col] - manual).abs() < 1e-15);
        }
    }
}

#[test]
fn gather_with_k1_is_single_neighbor_through_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let pts = random_points(&mut rng, 10);
    let nodes = build_nodes(&pts, 3, 1).unwrap();
    let feats: Vec<f64> = (0..10 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tape: Tape<f64> = Tape::new();
    let feats_t = tape.constant(feats.clone(), &[10, 2]);
    let w = tape.constant(vec![0.5, -0.3, 0.2, 0.8], &[2, 2]);
    let b = tape.constant(vec![0.05, -0.05], &[2]);
    let out = gather_node_features(feats_t, &nodes.neighbor_indices, 1, w, b)
        .unwrap()
        .value();
    for node in 0..3 {
        let nb = nodes.neighbor_indices[node];
        let f0 = feats[nb * 2];
        let f1 = feats[nb * 2 + 1];
        let expect = [
            (f0 * 0.5 + f1 * 0.2 + 0.05).max(0.0),
            (f0 * -0.3 + f1 * 0.8 - 0.05).max(0.0),
        ];
        for col in 0..2 {
            assert!((out[node * 2 + col] - expect[col]).abs() < 1e-14);
        }
    }
}

#[test]
fn gather_gradient_wrt_region_params_matches_fd() {
    let rig = offset_rig(33, 24, 4, 3, 3);
    let w0: Vec<f64> = (0..9).map(|i| 0.17 * i as f64 - 0.6).collect();
    let report = gradcheck::<f64, _>(
        |tape, rg_w| {
            let feats = tape.constant(rig.feats.clone(), &[24, rig.c]);
            let b = tape.constant(vec![0.1, -0.1, 0.2], &[3]);
            let out = gather_node_features(feats, &rig.nodes.neighbor_indices, rig.nodes.k, rg_w, b)?;
            Ok(out.mul(out)?.sum_all())
        },
        &w0,
        &[3, 3],
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn interpolation_at_coincident_point_returns_node_feature() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let pts = random_points(&mut rng, 20);
    let nodes = build_nodes(&pts, 5, 3).unwrap();
    let c = 4;
    let nf: Vec<f64> = (0..5 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tape: Tape<f64> = Tape::new();
    let nf_t = tape.constant(nf.clone(), &[5, c]);
    let pos_flat: Vec<f64> = nodes.positions.iter().flat_map(|p| p.to_vec()).collect();
    let pos_t = tape.constant(pos_flat, &[5, 3]);
    // query exactly at node 2's position
    let query = vec![nodes.positions[2]];
    let out = interpolate_for_cloud(&tape, &nodes, nf_t, pos_t, &query)
        .unwrap()
        .value();
    for col in 0..c {
        assert!((out[col] - nf[2 * c + col]).abs() < 1e-6);
    }
}

#[test]
fn interpolation_at_equidistant_point_is_mean() {
    // Three nodes on a unit circle around the origin query point.
    let positions = [
        [1.0, 0.0, 0.0],
        [-0.5, 0.75f64.sqrt(), 0.0],
        [-0.5, -(0.75f64.sqrt()), 0.0],
    ];
    let nodes = NodeSet {
        initial_positions: positions.to_vec(),
        positions: positions.to_vec(),
        offsets: vec![[0.0; 3]; 3],
        source_rows: vec![0, 1, 2],
        neighbor_indices: vec![0, 1, 2],
        k: 1,
    };
    let tape: Tape<f64> = Tape::new();
    let nf = vec![1.0, 5.0, 2.0, -1.0, 0.0, 3.0];
    let nf_t = tape.constant(nf.clone(), &[3, 2]);
    let pos_t = tape.constant(positions.iter().flatten().copied().collect(), &[3, 3]);
    let out = interpolate_for_cloud(&tape, &nodes, nf_t, pos_t, &[[0.0, 0.0, 0.0]])
        .unwrap()
        .value();
    assert!((out[0] - (1.0 + 2.0 + 0.0) / 3.0).abs() < 1e-12);
    assert!((out[1] - (5.0 - 1.0 + 3.0) / 3.0).abs() < 1e-12);
}

#[test]
fn interpolation_requires_three_nodes() {
    let pts = vec![[0.0; 3]; 10];
    let nodes = NodeSet {
        initial_positions: vec![[0.0; 3]; 2],
        positions: vec![[0.0; 3]; 2],
        offsets: vec![[0.0; 3]; 2],
        source_rows: vec![0, 1],
        neighbor_indices: vec![0, 1],
        k: 1,
    };
    let tape: Tape<f64> = Tape::new();
    let nf = tape.constant(vec![0.0; 4], &[2, 2]);
    let pos = tape.constant(vec![0.0; 6], &[2, 3]);
    assert!(matches!(
        interpolate_for_cloud(&tape, &nodes, nf, pos, &pts),
        Err(GeomError::TooFewNodes { got: 2 })
    ));
}

#[test]
fn interpolation_stays_in_convex_hull_and_weights_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let pts = random_points(&mut rng, 100);
    let node_pts = random_points(&mut rng, 8);
    let mut nodes = build_nodes(&node_pts, 8, 2).unwrap();
    nodes.positions = node_pts.clone();
    let c = 3;
    let nf: Vec<f64> = (0..8 * c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let tape: Tape<f64> = Tape::new();
    let nf_t = tape.constant(nf.clone(), &[8, c]);
    let pos_t = tape.constant(node_pts.iter().flatten().copied().collect(), &[8, 3]);
    let nearest = knn(&pts, &node_pts, 3).unwrap();
    let out = interpolate_for_cloud(&tape, &nodes, nf_t, pos_t, &pts)
        .unwrap()
        .value();
    for (t, _) in pts.iter().enumerate() {
        for col in 0..c {
            let contributors: Vec<f64> = (0..3)
                .map(|j| nf[nearest[t * 3 + j] * c + col])
                .collect();
            let lo = contributors.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-9;
            let hi = contributors.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-9;
            let v = out[t * c + col];
            assert!(v >= lo && v <= hi, "point {t} col {col}: {v} not in [{lo}, {hi}]");
        }
    }
}

#[test]
fn interpolation_gradient_wrt_positions_and_features_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let query_pts = random_points(&mut rng, 6);
    let node_pts = random_points(&mut rng, 5);
    let c = 3;
    let nf: Vec<f64> = (0..5 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nearest = knn(&query_pts, &node_pts, 3).unwrap();
    let mut rep = Vec::new();
    for p in &query_pts {
        for _ in 0..3 {
            rep.extend_from_slice(p);
        }
    }

    // gradient w.r.t. node positions (the path into the offset predictor)
    let pos0: Vec<f64> = node_pts.iter().flatten().copied().collect();
    let report = gradcheck::<f64, _>(
        |tape, pos| {
            let nf_t = tape.constant(nf.iter().map(|&v| v).collect(), &[5, c]);
            let rep_t = tape.constant(rep.clone(), &[18, 3]);
            let out = interpolate_to_points(nf_t, pos, rep_t, &nearest)?;
            Ok(out.mul(out)?.sum_all())
        },
        &pos0,
        &[5, 3],
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(report.pass, "positions: {report:?}");

    // gradient w.r.t. node features
    let report = gradcheck::<f64, _>(
        |tape, nf_t| {
            let pos_t = tape.constant(pos0.clone(), &[5, 3]);
            let rep_t = tape.constant(rep.clone(), &[18, 3]);
            let out = interpolate_to_points(nf_t, pos_t, rep_t, &nearest)?;
            Ok(out.mul(out)?.sum_all())
        },
        &nf,
        &[5, c],
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(report.pass, "features: {report:?}");
}

#[test]
fn gradient_reaches_transform_params_through_interpolation() {
    // End-to-end: loss on interpolated features must move R_T.
    let rig = offset_rig(51, 40, 6, 5, 4);
    let tape: Tape<f64> = Tape::new();
    let feats = tape.constant(rig.feats.clone(), &[40, rig.c]);
    let rt_w = tape.leaf(vec![0.4, -0.3, 0.2, 0.6], &[rig.c, 1]);
    let rt_b = tape.leaf(vec![0.1], &[1]);
    let offsets = predict_offsets_for_cloud(&tape, &rig.nodes, &rig.pts, feats, rt_w, rt_b).unwrap();

    let init_flat: Vec<f64> = rig.nodes.initial_positions.iter().flatten().copied().collect();
    let init_t = tape.constant(init_flat, &[6, 3]);
    let new_pos = init_t.add(offsets).unwrap();

    // region features at the shifted nodes (indices recomputed on values)
    let off_vals = offsets.value();
    let off_arr: Vec<[f64; 3]> = (0..6)
        .map(|i| [off_vals[i * 3], off_vals[i * 3 + 1], off_vals[i * 3 + 2]])
        .collect();
    let updated = update_nodes(&rig.nodes, &off_arr, &rig.pts, 5).unwrap();
    let rg_w = tape.constant(
        (0..rig.c * rig.c).map(|i| 0.1 * (i % 7) as f64 - 0.3).collect(),
        &[rig.c, rig.c],
    );
    let rg_b = tape.constant(vec![0.1; rig.c], &[rig.c]);
    let node_feats = gather_node_features(feats, &updated.neighbor_indices, 5, rg_w, rg_b).unwrap();

    let interp = {
        let nearest = knn(&rig.pts, &updated.positions, 3).unwrap();
        let mut rep = Vec::new();
        for p in &rig.pts {
            for _ in 0..3 {
                rep.extend_from_slice(p);
            }
        }
        let rep_t = tape.constant(rep, &[rig.pts.len() * 3, 3]);
        interpolate_to_points(node_feats, new_pos, rep_t, &nearest).unwrap()
    };
    let loss = interp.mul(interp).unwrap().sum_all();
    tape.backward(loss).unwrap();
    let gw = rt_w.grad().unwrap();
    let gb = rt_b.grad().unwrap();
    let mag: f64 = gw.iter().chain(gb.iter()).map(|g| g.abs()).sum();
    assert!(mag > 1e-8, "gradient into transform params vanished: {mag}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn fps_is_permutation_covariant(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.random_range(4..32);
        let n = rng.random_range(1..=t);
        let pts = random_points(&mut rng, t);
        // reverse as the permutation
        let perm: Vec<usize> = (0..t).rev().collect();
        let permuted: Vec<[f64;3]> = perm.iter().map(|&i| pts[i]).collect();
        let base = fps(&pts, n, 0).unwrap();
        // the start point must map through the permutation
        let start_in_permuted = perm.iter().position(|&i| i == 0).unwrap();
        let moved = fps(&permuted, n, start_in_permuted).unwrap();
        let base_set: Vec<[f64;3]> = base.iter().map(|&i| pts[i]).collect();
        let moved_set: Vec<[f64;3]> = moved.iter().map(|&i| permuted[i]).collect();
        prop_assert_eq!(base_set, moved_set);
    }

    #[test]
    fn knn_is_permutation_covariant(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(9000));
        let t = rng.random_range(3..32);
        let k = rng.random_range(1..=t);
        let pts = random_points(&mut rng, t);
        let queries = random_points(&mut rng, 4);
        let perm: Vec<usize> = (0..t).rev().collect();
        let permuted: Vec<[f64;3]> = perm.iter().map(|&i| pts[i]).collect();
        let base = knn(&queries, &pts, k).unwrap();
        let moved = knn(&queries, &permuted, k).unwrap();
        let base_geo: Vec<[f64;3]> = base.iter().map(|&i| pts[i]).collect();
        let moved_geo: Vec<[f64;3]> = moved.iter().map(|&i| permuted[i]).collect();
        prop_assert_eq!(base_geo, moved_geo);
    }
}
