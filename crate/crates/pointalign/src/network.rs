//! The alignment network: a pointwise encoder, self-adjusting local nodes
//! with per-node attention, feature fusion, a generator head pooled into a
//! global feature, and twin classifiers.
//!
//! Forward passes are batched: clouds are stacked row-wise so each pointwise
//! stage is one matrix product over every point in the batch, and per-cloud
//! structure (regions, pooling) is carried by explicit row indices.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::{
    self, build_nodes, edge_vectors, knn, update_nodes, GeomError, PointCloud,
};
use crate::tensor::gradcheck::{gradcheck_subset, CheckCase};
use crate::tensor::{Element, Tape, Tensor, TensorError, TensorResult};

pub const POINT_DIM: usize = 3;
/// Width of the encoder stages (the mid-level feature the nodes read).
pub const FEAT_DIM: usize = 64;
/// Width after fusing interpolated node features with point features.
pub const FUSED_DIM: usize = 2 * FEAT_DIM;
pub const GENERATOR_HIDDEN: usize = 128;
/// Global feature dimensionality.
pub const GLOBAL_DIM: usize = 1024;
pub const CLASSIFIER_HIDDEN: usize = 512;

const CHECKPOINT_MAGIC: &[u8; 4] = b"PDAN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum NetError {
    #[error("input cloud is not normalized (max point norm {max_norm:.6} > 1.001)")]
    UnnormalizedInput { max_norm: f64 },
    #[error("all clouds in a batch must have the same point count (saw {a} and {b})")]
    InconsistentPointCounts { a: usize, b: usize },
    #[error("invalid model configuration: {detail}")]
    BadConfig { detail: String },
    #[error("match_nodes: top_m {top_m} exceeds the {available} available pairs")]
    TooManyMatches { top_m: usize, available: usize },
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

pub type NetResult<T> = Result<T, NetError>;

/// Hyperparameters that shape the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub classes: usize,
    pub n_nodes: usize,
    pub k_neighbors: usize,
    /// Attention bottleneck reduction ratio.
    pub reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 10,
            n_nodes: 64,
            k_neighbors: 20,
            reduction: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> NetResult<()> {
        if self.classes < 2 {
            return Err(NetError::BadConfig {
                detail: format!("need at least 2 classes, got {}", self.classes),
            });
        }
        if self.n_nodes < 3 {
            return Err(NetError::BadConfig {
                detail: format!("need at least 3 nodes for interpolation, got {}", self.n_nodes),
            });
        }
        if self.reduction == 0 || self.n_nodes % self.reduction != 0 {
            return Err(NetError::BadConfig {
                detail: format!(
                    "node count {} must be divisible by the attention reduction {}",
                    self.n_nodes, self.reduction
                ),
            });
        }
        if self.k_neighbors == 0 {
            return Err(NetError::BadConfig {
                detail: "k_neighbors must be positive".into(),
            });
        }
        Ok(())
    }
}

/// One learnable array with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<E> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<E>,
    pub grad: Vec<E>,
}

impl<E: Element> Param<E> {
    fn init(name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Self {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
        let len: usize = shape.iter().product();
        let value = (0..len)
            .map(|_| E::from_f64(rng.random_range(-bound..bound)))
            .collect();
        Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
            grad: vec![E::ZERO; len],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = E::ZERO);
    }
}

/// FNV-1a over the parameter name mixed into the run seed, so every tensor
/// draws from its own stream regardless of initialization order.
fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for b in name.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Clone, Debug)]
pub struct LinearParams<E> {
    pub weight: Param<E>,
    pub bias: Param<E>,
}

impl<E: Element> LinearParams<E> {
    fn init(name: &str, cin: usize, cout: usize, seed: u64) -> Self {
        LinearParams {
            weight: Param::init(&format!("{name}.weight"), &[cin, cout], cin, seed),
            bias: Param::init(&format!("{name}.bias"), &[cout], cin, seed),
        }
    }
}

/// The learnable parameter groups the two training steps partition.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamGroup {
    Encoder,
    Transform,
    Gather,
    Attention,
    Generator,
    Classifier1,
    Classifier2,
}

impl ParamGroup {
    /// Groups updated by the classifier step.
    pub fn is_classifier(self) -> bool {
        matches!(self, ParamGroup::Classifier1 | ParamGroup::Classifier2)
    }

    /// Groups updated by the feature step (encoder, transform/gather maps,
    /// attention, generator).
    pub fn is_backbone(self) -> bool {
        !self.is_classifier()
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Transform => "transform",
            ParamGroup::Gather => "gather",
            ParamGroup::Attention => "attention",
            ParamGroup::Generator => "generator",
            ParamGroup::Classifier1 => "classifier1",
            ParamGroup::Classifier2 => "classifier2",
        }
    }
}

/// All learnable state of the model.
#[derive(Clone, Debug)]
pub struct ModelParams<E> {
    pub cfg: ModelConfig,
    pub encoder: Vec<LinearParams<E>>,
    pub transform: LinearParams<E>,
    pub gather: LinearParams<E>,
    pub attn_down: Param<E>,
    pub attn_up: Param<E>,
    pub generator: Vec<LinearParams<E>>,
    pub classifier1: Vec<LinearParams<E>>,
    pub classifier2: Vec<LinearParams<E>>,
}

impl<E: Element> ModelParams<E> {
    pub fn init(cfg: ModelConfig, seed: u64) -> NetResult<Self> {
        cfg.validate()?;
        let bottleneck = cfg.n_nodes / cfg.reduction;
        let model = ModelParams {
            cfg,
            encoder: vec![
                LinearParams::init("encoder.0", POINT_DIM, FEAT_DIM, seed),
                LinearParams::init("encoder.1", FEAT_DIM, FEAT_DIM, seed),
                LinearParams::init("encoder.2", FEAT_DIM, FEAT_DIM, seed),
            ],
            transform: LinearParams::init("transform", FEAT_DIM, 1, seed),
            gather: LinearParams::init("gather", FEAT_DIM, FEAT_DIM, seed),
            attn_down: Param::init("attention.down", &[cfg.n_nodes, bottleneck], cfg.n_nodes, seed),
            attn_up: Param::init("attention.up", &[bottleneck, cfg.n_nodes], bottleneck, seed),
            generator: vec![
                LinearParams::init("generator.0", FUSED_DIM, GENERATOR_HIDDEN, seed),
                LinearParams::init("generator.1", GENERATOR_HIDDEN, GLOBAL_DIM, seed),
            ],
            classifier1: vec![
                LinearParams::init("classifier1.0", GLOBAL_DIM, CLASSIFIER_HIDDEN, seed),
                LinearParams::init("classifier1.1", CLASSIFIER_HIDDEN, cfg.classes, seed),
            ],
            classifier2: vec![
                LinearParams::init("classifier2.0", GLOBAL_DIM, CLASSIFIER_HIDDEN, seed),
                LinearParams::init("classifier2.1", CLASSIFIER_HIDDEN, cfg.classes, seed),
            ],
        };
        debug_assert!(
            model.classifier1[0].weight.value != model.classifier2[0].weight.value,
            "twin classifiers must start from different draws"
        );
        Ok(model)
    }

    /// Parameters in canonical order, tagged with their training group.
    pub fn flat(&self) -> Vec<(ParamGroup, &Param<E>)> {
        let mut out = Vec::with_capacity(24);
        for l in &self.encoder {
            out.push((ParamGroup::Encoder, &l.weight));
            out.push((ParamGroup::Encoder, &l.bias));
        }
        out.push((ParamGroup::Transform, &self.transform.weight));
        out.push((ParamGroup::Transform, &self.transform.bias));
        out.push((ParamGroup::Gather, &self.gather.weight));
        out.push((ParamGroup::Gather, &self.gather.bias));
        out.push((ParamGroup::Attention, &self.attn_down));
        out.push((ParamGroup::Attention, &self.attn_up));
        for l in &self.generator {
            out.push((ParamGroup::Generator, &l.weight));
            out.push((ParamGroup::Generator, &l.bias));
        }
        for l in &self.classifier1 {
            out.push((ParamGroup::Classifier1, &l.weight));
            out.push((ParamGroup::Classifier1, &l.bias));
        }
        for l in &self.classifier2 {
            out.push((ParamGroup::Classifier2, &l.weight));
            out.push((ParamGroup::Classifier2, &l.bias));
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<(ParamGroup, &mut Param<E>)> {
        let mut out: Vec<(ParamGroup, &mut Param<E>)> = Vec::with_capacity(24);
        for l in self.encoder.iter_mut() {
            out.push((ParamGroup::Encoder, &mut l.weight));
            out.push((ParamGroup::Encoder, &mut l.bias));
        }
        out.push((ParamGroup::Transform, &mut self.transform.weight));
        out.push((ParamGroup::Transform, &mut self.transform.bias));
        out.push((ParamGroup::Gather, &mut self.gather.weight));
        out.push((ParamGroup::Gather, &mut self.gather.bias));
        out.push((ParamGroup::Attention, &mut self.attn_down));
        out.push((ParamGroup::Attention, &mut self.attn_up));
        for l in self.generator.iter_mut() {
            out.push((ParamGroup::Generator, &mut l.weight));
            out.push((ParamGroup::Generator, &mut l.bias));
        }
        for l in self.classifier1.iter_mut() {
            out.push((ParamGroup::Classifier1, &mut l.weight));
            out.push((ParamGroup::Classifier1, &mut l.bias));
        }
        for l in self.classifier2.iter_mut() {
            out.push((ParamGroup::Classifier2, &mut l.weight));
            out.push((ParamGroup::Classifier2, &mut l.bias));
        }
        out
    }

    /// Bind every parameter onto a tape; `grad(group)` decides which groups
    /// record gradients.
    pub fn bind<'t>(
        &self,
        tape: &'t Tape<E>,
        grad: impl Fn(ParamGroup) -> bool,
    ) -> BoundModel<'t, E> {
        let tensors: Vec<Tensor<'t, E>> = self
            .flat()
            .into_iter()
            .map(|(g, p)| {
                if grad(g) {
                    tape.leaf(p.value.clone(), &p.shape)
                } else {
                    tape.constant(p.value.clone(), &p.shape)
                }
            })
            .collect();
        BoundModel::from_tensors(&self.cfg, tensors)
    }

    /// Bind from a single flat leaf holding all parameters end to end
    /// (used to finite-difference the whole objective at once).
    pub fn bind_from_flat_leaf<'t>(
        &self,
        x: Tensor<'t, E>,
    ) -> TensorResult<BoundModel<'t, E>> {
        let mut tensors = Vec::with_capacity(24);
        let mut offset = 0usize;
        for (_, p) in self.flat() {
            let len: usize = p.shape.iter().product();
            let rows: Vec<usize> = (offset..offset + len).collect();
            tensors.push(x.gather_rows(&rows)?.reshape(&p.shape)?);
            offset += len;
        }
        Ok(BoundModel::from_tensors(&self.cfg, tensors))
    }

    /// Concatenation of all parameter values in canonical order.
    pub fn flat_values_f64(&self) -> Vec<f64> {
        self.flat()
            .iter()
            .flat_map(|(_, p)| p.value.iter().map(|v| v.to_f64()))
            .collect()
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear<'t, E: Element> {
    pub weight: Tensor<'t, E>,
    pub bias: Tensor<'t, E>,
}

impl<'t, E: Element> BoundLinear<'t, E> {
    fn apply(&self, x: Tensor<'t, E>) -> TensorResult<Tensor<'t, E>> {
        x.linear(self.weight, self.bias)
    }
}

/// Tape-bound view of the whole model, in the canonical parameter order.
pub struct BoundModel<'t, E: Element> {
    pub encoder: Vec<BoundLinear<'t, E>>,
    pub transform: BoundLinear<'t, E>,
    pub gather: BoundLinear<'t, E>,
    pub attn_down: Tensor<'t, E>,
    pub attn_up: Tensor<'t, E>,
    pub generator: Vec<BoundLinear<'t, E>>,
    pub classifier1: Vec<BoundLinear<'t, E>>,
    pub classifier2: Vec<BoundLinear<'t, E>>,
    /// Same tensors in canonical order (for gradient harvesting).
    pub ordered: Vec<Tensor<'t, E>>,
}

impl<'t, E: Element> BoundModel<'t, E> {
    pub fn from_tensors(_cfg: &ModelConfig, ts: Vec<Tensor<'t, E>>) -> Self {
        assert_eq!(ts.len(), 24, "canonical parameter list must have 24 tensors");
        let lin = |i: usize| BoundLinear { weight: ts[i], bias: ts[i + 1] };
        BoundModel {
            encoder: vec![lin(0), lin(2), lin(4)],
            transform: lin(6),
            gather: lin(8),
            attn_down: ts[10],
            attn_up: ts[11],
            generator: vec![lin(12), lin(14)],
            classifier1: vec![lin(16), lin(18)],
            classifier2: vec![lin(20), lin(22)],
            ordered: ts,
        }
    }

    /// The classifier sub-view in canonical order.
    pub fn heads(&self) -> BoundHeads<'t, E> {
        BoundHeads {
            classifier1: self.classifier1.clone(),
            classifier2: self.classifier2.clone(),
        }
    }
}

/// Tape-bound twin classifiers.
pub struct BoundHeads<'t, E: Element> {
    pub classifier1: Vec<BoundLinear<'t, E>>,
    pub classifier2: Vec<BoundLinear<'t, E>>,
}

/// Bind only the classifier parameters (used to re-run the heads after a
/// classifier update without re-recording the backbone).
pub fn bind_heads<'t, E: Element>(
    tape: &'t Tape<E>,
    model: &ModelParams<E>,
    grad: bool,
) -> BoundHeads<'t, E> {
    let mut bind_lin = |l: &LinearParams<E>| BoundLinear {
        weight: if grad {
            tape.leaf(l.weight.value.clone(), &l.weight.shape)
        } else {
            tape.constant(l.weight.value.clone(), &l.weight.shape)
        },
        bias: if grad {
            tape.leaf(l.bias.value.clone(), &l.bias.shape)
        } else {
            tape.constant(l.bias.value.clone(), &l.bias.shape)
        },
    };
    BoundHeads {
        classifier1: model.classifier1.iter().map(&mut bind_lin).collect(),
        classifier2: model.classifier2.iter().map(&mut bind_lin).collect(),
    }
}

/// Everything the losses and diagnostics need from one batched pass up to
/// the global feature.
pub struct FeatureOutput<'t, E: Element> {
    /// Per-point encoder features, (B·T)×64.
    pub point_features: Tensor<'t, E>,
    /// Attention-weighted node features h, (B·n)×64.
    pub node_attended: Tensor<'t, E>,
    /// Fused per-point features, (B·T)×128.
    pub fused: Tensor<'t, E>,
    /// Global feature rows, B×1024.
    pub global_features: Tensor<'t, E>,
    /// Updated node positions (values), flat per cloud.
    pub node_positions: Vec<[f64; 3]>,
    pub node_offsets: Vec<[f64; 3]>,
    pub batch: usize,
    pub points_per_cloud: usize,
}

/// Softmax outputs of both classifiers, B×K each.
pub struct HeadOutput<'t, E: Element> {
    pub probs1: Tensor<'t, E>,
    pub probs2: Tensor<'t, E>,
}

/// Pointwise encoder: three affine+relu stages over every point row.
/// Rejects clouds that were not normalized.
pub fn encode<'t, E: Element>(
    tape: &'t Tape<E>,
    clouds: &[&PointCloud],
    encoder: &[BoundLinear<'t, E>],
) -> NetResult<Tensor<'t, E>> {
    assert!(!clouds.is_empty(), "encode: empty batch");
    let t = clouds[0].len();
    let mut coords = Vec::with_capacity(clouds.len() * t * POINT_DIM);
    for cloud in clouds {
        if cloud.len() != t {
            return Err(NetError::InconsistentPointCounts { a: t, b: cloud.len() });
        }
        let mn = cloud.max_norm();
        if mn > 1.0 + 1e-3 {
            return Err(NetError::UnnormalizedInput { max_norm: mn });
        }
        coords.extend(cloud.coords_flat::<E>());
    }
    let x = tape.constant(coords, &[clouds.len() * t, POINT_DIM]);
    let mut h = x;
    for stage in encoder {
        h = stage.apply(h)?.relu();
    }
    Ok(h)
}

/// Per-node gate in (0,1) from a squeeze over feature channels and a
/// bottleneck across the node axis, applied with a residual:
/// `h_c = g_c * v_c + v_c`.
pub fn attend_nodes<'t, E: Element>(
    node_features: Tensor<'t, E>,
    batch: usize,
    n_nodes: usize,
    attn_down: Tensor<'t, E>,
    attn_up: Tensor<'t, E>,
) -> TensorResult<Tensor<'t, E>> {
    let z = node_features.reduce_mean(1)?.reshape(&[batch, n_nodes])?;
    let gate = z
        .matmul(attn_down)?
        .relu()
        .matmul(attn_up)?
        .sigmoid()
        .reshape(&[batch * n_nodes])?;
    node_features.mul_colvec(gate)?.add(node_features)
}

/// Run the shared trunk over a batch of clouds (source and target sides are
/// usually concatenated into one batch). With `sa_enabled` off, node offsets
/// are pinned to zero and the attention gate to one — the fixed-node
/// configuration.
pub fn forward_features<'t, E: Element>(
    tape: &'t Tape<E>,
    clouds: &[&PointCloud],
    bound: &BoundModel<'t, E>,
    cfg: &ModelConfig,
    sa_enabled: bool,
) -> NetResult<FeatureOutput<'t, E>> {
    cfg.validate()?;
    let b = clouds.len();
    let t = clouds[0].len();
    let n = cfg.n_nodes;
    let k = cfg.k_neighbors;
    if t < n {
        return Err(NetError::BadConfig {
            detail: format!("cloud has {t} points but {n} nodes requested"),
        });
    }
    if k > t {
        return Err(NetError::BadConfig {
            detail: format!("k={k} neighbors requested from {t} points"),
        });
    }

    let feats = encode(tape, clouds, &bound.encoder)?;

    // Per-cloud node construction on raw coordinates; indices are lifted to
    // batch-global rows.
    let mut node_src_rows = Vec::with_capacity(b * n);
    let mut neighbor_rows = Vec::with_capacity(b * n * k);
    let mut init_positions = Vec::with_capacity(b * n);
    let mut edge_vecs: Vec<E> = Vec::with_capacity(b * n * k * 3);
    let mut per_cloud_nodes = Vec::with_capacity(b);
    for (ci, cloud) in clouds.iter().enumerate() {
        let nodes = build_nodes(&cloud.points, n, k)?;
        node_src_rows.extend(nodes.source_rows.iter().map(|&r| ci * t + r));
        neighbor_rows.extend(nodes.neighbor_indices.iter().map(|&r| ci * t + r));
        init_positions.extend_from_slice(&nodes.initial_positions);
        edge_vecs.extend(edge_vectors(&nodes, &cloud.points).iter().map(|&v| E::from_f64(v)));
        per_cloud_nodes.push(nodes);
    }

    let offsets = if sa_enabled {
        let ev = tape.constant(edge_vecs, &[b * n * k, 3]);
        geometry::predict_offsets(
            feats,
            &node_src_rows,
            &neighbor_rows,
            ev,
            k,
            bound.transform.weight,
            bound.transform.bias,
        )?
    } else {
        tape.constant(vec![E::ZERO; b * n * 3], &[b * n, 3])
    };

    // Update positions on values and rebuild regions per cloud.
    let off_values = offsets.value();
    let mut node_offsets = Vec::with_capacity(b * n);
    for i in 0..b * n {
        node_offsets.push([
            off_values[i * 3].to_f64(),
            off_values[i * 3 + 1].to_f64(),
            off_values[i * 3 + 2].to_f64(),
        ]);
    }
    let mut new_neighbor_rows = Vec::with_capacity(b * n * k);
    let mut node_positions = Vec::with_capacity(b * n);
    let mut nearest_nodes = Vec::with_capacity(b * t * 3);
    for (ci, cloud) in clouds.iter().enumerate() {
        let updated = update_nodes(
            &per_cloud_nodes[ci],
            &node_offsets[ci * n..(ci + 1) * n],
            &cloud.points,
            k,
        )?;
        new_neighbor_rows.extend(updated.neighbor_indices.iter().map(|&r| ci * t + r));
        // 3 nearest updated nodes per point, for interpolation
        let nearest = knn(&cloud.points, &updated.positions, 3)?;
        nearest_nodes.extend(nearest.iter().map(|&c| ci * n + c));
        node_positions.extend_from_slice(&updated.positions);
    }

    // Index selections happen on values, outside the tape; register them so
    // gradcheck can tell when a perturbation flips one.
    tape.fold_branch_indices(&node_src_rows);
    tape.fold_branch_indices(&neighbor_rows);
    tape.fold_branch_indices(&new_neighbor_rows);
    tape.fold_branch_indices(&nearest_nodes);

    let node_feats = geometry::gather_node_features(
        feats,
        &new_neighbor_rows,
        k,
        bound.gather.weight,
        bound.gather.bias,
    )?;

    let attended = if sa_enabled {
        attend_nodes(node_feats, b, n, bound.attn_down, bound.attn_up)?
    } else {
        let ones = tape.constant(vec![E::ONE; b * n], &[b * n]);
        node_feats.mul_colvec(ones)?.add(node_feats)?
    };

    // Positions as tensors: initial (constant) + offsets, so the gradient of
    // the interpolation weights reaches the offset predictor.
    let init_flat: Vec<E> = init_positions
        .iter()
        .flat_map(|p| p.iter().map(|&v| E::from_f64(v)))
        .collect();
    let init_t = tape.constant(init_flat, &[b * n, 3]);
    let positions_t = init_t.add(offsets)?;

    let mut rep = Vec::with_capacity(b * t * 3 * 3);
    for cloud in clouds {
        for p in &cloud.points {
            for _ in 0..3 {
                rep.push(E::from_f64(p[0]));
                rep.push(E::from_f64(p[1]));
                rep.push(E::from_f64(p[2]));
            }
        }
    }
    let rep_t = tape.constant(rep, &[b * t * 3, 3]);
    let interp = geometry::interpolate_to_points(attended, positions_t, rep_t, &nearest_nodes)?;

    let fused = interp.concat_cols(feats)?;

    let g1 = bound.generator[0].apply(fused)?.relu();
    let g2 = bound.generator[1].apply(g1)?;
    // relu and per-cloud max pooling commute; pooling first is cheaper
    let global = g2.segment_max(t)?.relu();

    Ok(FeatureOutput {
        point_features: feats,
        node_attended: attended,
        fused,
        global_features: global,
        node_positions,
        node_offsets,
        batch: b,
        points_per_cloud: t,
    })
}

/// Classify global features with both heads.
pub fn forward_heads<'t, E: Element>(
    global: Tensor<'t, E>,
    heads: &BoundHeads<'t, E>,
) -> TensorResult<HeadOutput<'t, E>> {
    let h1 = heads.classifier1[0].apply(global)?.relu();
    let probs1 = heads.classifier1[1].apply(h1)?.softmax()?;
    let h2 = heads.classifier2[0].apply(global)?.relu();
    let probs2 = heads.classifier2[1].apply(h2)?.softmax()?;
    Ok(HeadOutput { probs1, probs2 })
}

/// One full pass over a batch: features then heads.
pub fn forward<'t, E: Element>(
    tape: &'t Tape<E>,
    clouds: &[&PointCloud],
    bound: &BoundModel<'t, E>,
    cfg: &ModelConfig,
    sa_enabled: bool,
) -> NetResult<(FeatureOutput<'t, E>, HeadOutput<'t, E>)> {
    let features = forward_features(tape, clouds, bound, cfg, sa_enabled)?;
    let heads = forward_heads(features.global_features, &bound.heads())?;
    Ok((features, heads))
}

/// Cross-domain node matching: scores are the inner products h_s · h_t^T and
/// the `top_m` highest pairs are returned in descending score order, ties in
/// lexicographic (source, target) index order.
pub fn match_nodes(
    h_source: &[f64],
    h_target: &[f64],
    n: usize,
    width: usize,
    top_m: usize,
) -> NetResult<Vec<(usize, usize, f64)>> {
    assert_eq!(h_source.len(), n * width);
    assert_eq!(h_target.len(), n * width);
    if top_m > n * n {
        return Err(NetError::TooManyMatches { top_m, available: n * n });
    }
    let mut scores = vec![0.0f64; n * n];
    f64::gemm_nt(n, width, n, h_source, h_target, &mut scores);
    // Selection sort over a heap of the current best would also work; a
    // partial sort keeps the tie rule explicit.
    let mut order: Vec<usize> = (0..n * n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| a.cmp(&b))
    });
    Ok(order[..top_m]
        .iter()
        .map(|&idx| (idx / n, idx % n, scores[idx]))
        .collect())
}

// ── checkpoint io ────────────────────────────────────────────────────

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Serialize all parameters: magic, version, model config, then per
/// parameter its name, shape, and little-endian f64 payload.
pub fn save_checkpoint<E: Element>(model: &ModelParams<E>, path: &Path) -> NetResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    write_u32(&mut w, model.cfg.classes as u32)?;
    write_u32(&mut w, model.cfg.n_nodes as u32)?;
    write_u32(&mut w, model.cfg.k_neighbors as u32)?;
    write_u32(&mut w, model.cfg.reduction as u32)?;
    let flat = model.flat();
    write_u32(&mut w, flat.len() as u32)?;
    for (_, p) in flat {
        write_u32(&mut w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        write_u32(&mut w, p.shape.len() as u32)?;
        for &d in &p.shape {
            write_u32(&mut w, d as u32)?;
        }
        for v in &p.value {
            w.write_all(&v.to_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a checkpoint back. Unknown versions and malformed payloads are
/// rejected with a format error.
pub fn load_checkpoint<E: Element>(path: &Path) -> NetResult<ModelParams<E>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NetError::CheckpointFormat(format!(
            "bad magic {:?}, expected {:?}",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NetError::CheckpointFormat(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let cfg = ModelConfig {
        classes: read_u32(&mut r)? as usize,
        n_nodes: read_u32(&mut r)? as usize,
        k_neighbors: read_u32(&mut r)? as usize,
        reduction: read_u32(&mut r)? as usize,
    };
    let mut model = ModelParams::<E>::init(cfg, 0)?;
    let count = read_u32(&mut r)? as usize;
    let mut expected: std::collections::HashMap<String, usize> = model
        .flat()
        .iter()
        .enumerate()
        .map(|(i, (_, p))| (p.name.clone(), i))
        .collect();
    if count != expected.len() {
        return Err(NetError::CheckpointFormat(format!(
            "parameter count {count} does not match the {} this model expects",
            expected.len()
        )));
    }
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(NetError::CheckpointFormat("parameter name too long".into()));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| NetError::CheckpointFormat("parameter name is not utf-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let idx = expected
            .remove(&name)
            .ok_or_else(|| NetError::CheckpointFormat(format!("unexpected parameter {name}")))?;
        let len: usize = shape.iter().product();
        let mut buf = vec![0u8; len * 8];
        r.read_exact(&mut buf).map_err(|_| {
            NetError::CheckpointFormat(format!("truncated payload for parameter {name}"))
        })?;
        let values: Vec<E> = buf
            .chunks_exact(8)
            .map(|c| E::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let mut flat = model.flat_mut();
        let (_, p) = &mut flat[idx];
        if p.shape != shape {
            return Err(NetError::CheckpointFormat(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                shape, p.shape
            )));
        }
        p.value = values;
    }
    Ok(model)
}

// ── registered end-to-end gradient checks ────────────────────────────

/// A deterministic random normalized cloud for toy rigs.
pub fn toy_cloud(seed: u64, t: usize, label: Option<usize>) -> PointCloud {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let points = (0..t)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let mut cloud = geometry::normalize(&PointCloud::new(points)).expect("non-empty");
    cloud.label = label;
    cloud
}

fn toy_model_cfg() -> ModelConfig {
    ModelConfig {
        classes: 3,
        n_nodes: 8,
        k_neighbors: 4,
        reduction: 4,
    }
}

/// Named gradient checks through the network: the encoder w.r.t. its input
/// cloud, and the full two-domain objective w.r.t. every parameter (on a
/// random coordinate subset per parameter).
pub fn network_cases<E: Element>() -> Vec<CheckCase<E>> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    vec![
        CheckCase::new("encode/input", |seed: u64, fault: bool| {
            let cloud = toy_cloud(seed, 8, None);
            let model = ModelParams::<E>::init(toy_model_cfg(), seed).expect("valid config");
            let x0: Vec<f64> = cloud.points.iter().flatten().copied().collect();
            let coords: Vec<usize> = (0..x0.len()).collect();
            gradcheck_subset::<E, _>(
                |tape, x| {
                    let bound = model.bind(tape, |_| false);
                    let mut h = x;
                    for stage in &bound.encoder {
                        h = stage.apply(h)?.relu();
                    }
                    Ok(h.mul(h)?.sum_all())
                },
                &x0,
                &[8, 3],
                1e-6,
                1e-5,
                &coords,
                fault,
            )
        }),
        CheckCase::new("objective/full_two_domain", |seed: u64, fault: bool| {
            run_objective_gradcheck::<E>(seed, fault, 1e-5, 1e-4)
        }),
    ]
}

/// Finite-difference the full two-domain objective w.r.t. a random subset of
/// coordinates of every parameter, on the 32-point toy rig.
pub fn run_objective_gradcheck<E: Element>(
    seed: u64,
    fault: bool,
    eps: f64,
    tol: f64,
) -> TensorResult<crate::tensor::gradcheck::GradReport> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    {
        {
                let cfg = toy_model_cfg();
                let model = ModelParams::<E>::init(cfg, seed).expect("valid config");
                let src: Vec<PointCloud> = (0..2)
                    .map(|i| toy_cloud(seed * 31 + i, 32, Some(i as usize % 3)))
                    .collect();
                let tgt: Vec<PointCloud> = (0..2).map(|i| toy_cloud(seed * 57 + i + 100, 32, None)).collect();
                let labels: Vec<usize> = src.iter().map(|c| c.label.unwrap()).collect();
                let x0 = model.flat_values_f64();
                // a deterministic subset: up to 8 coordinates per parameter
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
                let mut coords = Vec::new();
                let mut offset = 0usize;
                for (_, p) in model.flat() {
                    let len: usize = p.shape.iter().product();
                    for _ in 0..8usize.min(len) {
                        coords.push(offset + rng.random_range(0..len));
                    }
                    offset += len;
                }
                coords.sort_unstable();
                coords.dedup();
                let kernel = crate::losses::KernelConfig {
                    bandwidths: crate::losses::Bandwidths::Fixed(vec![0.5, 1.0, 2.0]),
                };
                let weights = crate::losses::LossWeights::default();
                gradcheck_subset::<E, _>(
                    |tape, x| {
                        let bound = model.bind_from_flat_leaf(x)?;
                        let clouds: Vec<&PointCloud> = src.iter().chain(tgt.iter()).collect();
                        let (features, heads) = forward(tape, &clouds, &bound, &cfg, true)
                            .map_err(|e| TensorError::InvalidShape {
                                op: "forward",
                                shape: "-".into(),
                                detail: e.to_string(),
                            })?;
                        let bs = src.len();
                        let bt = tgt.len();
                        let src_rows: Vec<usize> = (0..bs).collect();
                        let tgt_rows: Vec<usize> = (bs..bs + bt).collect();
                        let p1s = heads.probs1.gather_rows(&src_rows)?;
                        let p2s = heads.probs2.gather_rows(&src_rows)?;
                        let p1t = heads.probs1.gather_rows(&tgt_rows)?;
                        let p2t = heads.probs2.gather_rows(&tgt_rows)?;
                        let l_cls = crate::losses::cross_entropy(p1s, &labels)?
                            .add(crate::losses::cross_entropy(p2s, &labels)?)?
                            .scale(0.5);
                        let l_dis = crate::losses::discrepancy(p1t, p2t)?;
                        let n = cfg.n_nodes;
                        let node_src: Vec<usize> = (0..bs * n).collect();
                        let node_tgt: Vec<usize> = (bs * n..(bs + bt) * n).collect();
                        let h_s = features.node_attended.gather_rows(&node_src)?;
                        let h_t = features.node_attended.gather_rows(&node_tgt)?;
                        let l_mmd = crate::losses::mmd_rbf(h_s, h_t, &kernel)?;
                        crate::losses::step2_objective(l_cls, l_dis, l_mmd, &weights)
                    },
                    &x0,
                    &[x0.len(), 1],
                    eps,
                    tol,
                    &coords,
                    fault,
                )
        }
    }
}
