//! The matching head: projections, attention branches per variant, the
//! gated similarity feature and fc-3, with a batched backward pass.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend_backward, collab_attend, collab_attend_recorded, self_attend, self_attend_recorded, AttendRecord,
    Correlation, CorrelationMode, ProjectedClip, SequenceDescriptor,
};
use crate::error::{Result, ScanError};
use crate::losses::{bce_with_logit, oim_forward, OimTable};
use crate::numkit::{
    axpy, column_max, column_max_backward, column_mean, column_mean_backward, linear_backward,
    linear_forward, LinearLayer, Matrix, Vector,
};
use crate::similarity::{gated_difference, gated_difference_backward, match_score, MatchScore, PoolMode};

pub const DEFAULT_WIDTH: usize = 128;

/// Temporal modelling variants, numbered as in the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    AvgPool,
    MaxPool,
    SanOnly,
    CanOnly,
    SinglePath,
    SharedFc,
    DotProduct,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::AvgPool,
        Variant::MaxPool,
        Variant::SanOnly,
        Variant::CanOnly,
        Variant::SinglePath,
        Variant::SharedFc,
        Variant::DotProduct,
        Variant::Full,
    ];

    pub fn id(self) -> u8 {
        Self::ALL.iter().position(|&v| v == self).unwrap() as u8 + 1
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get((id as usize).checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::AvgPool => "avg-pool",
            Variant::MaxPool => "max-pool",
            Variant::SanOnly => "san-only",
            Variant::CanOnly => "can-only",
            Variant::SinglePath => "single-path",
            Variant::SharedFc => "shared-fc",
            Variant::DotProduct => "dot-product",
            Variant::Full => "full",
        }
    }

    pub fn uses_san(self) -> bool {
        matches!(
            self,
            Variant::SanOnly | Variant::SinglePath | Variant::SharedFc | Variant::DotProduct | Variant::Full
        )
    }

    pub fn uses_can(self) -> bool {
        matches!(
            self,
            Variant::CanOnly | Variant::SinglePath | Variant::SharedFc | Variant::DotProduct | Variant::Full
        )
    }

    /// Pooling computed per clip, if any.
    pub fn pooling(self) -> Option<PoolMode> {
        match self {
            Variant::AvgPool | Variant::CanOnly | Variant::SinglePath => Some(PoolMode::Avg),
            Variant::MaxPool => Some(PoolMode::Max),
            _ => None,
        }
    }

    pub fn shares_fc(self) -> bool {
        self == Variant::SharedFc
    }

    pub fn correlation_mode(self) -> CorrelationMode {
        if self == Variant::DotProduct {
            CorrelationMode::Dot
        } else {
            CorrelationMode::Hadamard
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ScanError;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(id) = s.parse::<u8>() {
            return Variant::from_id(id).ok_or_else(|| ScanError::Config(format!("unknown variant id {id}")));
        }
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| ScanError::Config(format!("unknown variant {s:?}")))
    }
}

/// Trainable layers plus the variant they are wired for. `fc2` is `None`
/// when the variant shares fc-1 between both attention branches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub fc0: LinearLayer,
    pub fc1: LinearLayer,
    pub fc2: Option<LinearLayer>,
    pub fc3: LinearLayer,
    pub variant: Variant,
    pub temperature: f64,
}

fn init_layer<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> LinearLayer {
    let bound = (1.0 / in_dim as f64).sqrt();
    let data = (0..in_dim * out_dim)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    LinearLayer {
        weight: Matrix::from_vec(in_dim, out_dim, data).expect("sized above"),
        bias: Vector::zeros(out_dim),
    }
}

impl ModelParams {
    /// Uniform `±sqrt(1/in_dim)` weights and zero biases.
    pub fn init<R: Rng>(feature_dim: usize, width: usize, variant: Variant, rng: &mut R) -> Result<Self> {
        if feature_dim == 0 || width == 0 {
            return Err(ScanError::Config("feature_dim and width must be >= 1".into()));
        }
        let fc0 = init_layer(feature_dim, width, rng);
        let fc1 = init_layer(feature_dim, width, rng);
        let fc2 = init_layer(feature_dim, width, rng);
        let fc3 = init_layer(width, 1, rng);
        Ok(Self {
            fc0,
            fc1,
            fc2: (!variant.shares_fc()).then_some(fc2),
            fc3,
            variant,
            temperature: 1.0,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.fc0.in_dim()
    }

    pub fn width(&self) -> usize {
        self.fc0.out_dim()
    }

    pub fn correlation(&self) -> Correlation {
        Correlation {
            mode: self.variant.correlation_mode(),
            temperature: self.temperature,
        }
    }

    pub fn fc2(&self) -> &LinearLayer {
        self.fc2.as_ref().unwrap_or(&self.fc1)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, w) = (self.feature_dim(), self.width());
        let mut layers = vec![("fc1", &self.fc1)];
        if let Some(fc2) = &self.fc2 {
            layers.push(("fc2", fc2));
        }
        for (name, l) in layers {
            if l.in_dim() != d || l.out_dim() != w {
                return Err(ScanError::dim(
                    "ModelParams",
                    format!("{name} of shape {d}x{w}"),
                    format!("{}x{}", l.in_dim(), l.out_dim()),
                ));
            }
        }
        if self.fc3.in_dim() != w || self.fc3.out_dim() != 1 {
            return Err(ScanError::dim(
                "ModelParams",
                format!("fc3 of shape {w}x1"),
                format!("{}x{}", self.fc3.in_dim(), self.fc3.out_dim()),
            ));
        }
        if self.fc2.is_some() == self.variant.shares_fc() {
            return Err(ScanError::Contract(format!(
                "variant {} {} a separate fc2",
                self.variant,
                if self.variant.shares_fc() {
                    "forbids"
                } else {
                    "requires"
                }
            )));
        }
        if !self.layers().iter().all(|(_, l)| l.is_finite()) {
            return Err(ScanError::Contract("non-finite parameters".into()));
        }
        Ok(())
    }

    /// Named layers in storage order.
    pub fn layers(&self) -> Vec<(&'static str, &LinearLayer)> {
        let mut out = vec![("fc0", &self.fc0), ("fc1", &self.fc1)];
        if let Some(fc2) = &self.fc2 {
            out.push(("fc2", fc2));
        }
        out.push(("fc3", &self.fc3));
        out
    }

    pub fn layers_mut(&mut self) -> Vec<(&'static str, &mut LinearLayer)> {
        let mut out = vec![("fc0", &mut self.fc0), ("fc1", &mut self.fc1)];
        if let Some(fc2) = &mut self.fc2 {
            out.push(("fc2", fc2));
        }
        out.push(("fc3", &mut self.fc3));
        out
    }

    /// Trainable parameter count per component. The attention branches
    /// appear with zero parameters.
    pub fn census(&self) -> Vec<(&'static str, usize)> {
        let mut out: Vec<(&'static str, usize)> = self
            .layers()
            .into_iter()
            .map(|(n, l)| (n, l.param_count()))
            .collect();
        out.push(("san", 0));
        out.push(("can", 0));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.param_count()).sum()
    }

    /// All parameters flattened in [`ModelParams::layers`] order, weights before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, l) in self.layers() {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(ScanError::dim(
                "ModelParams::set_flat",
                self.param_count(),
                flat.len(),
            ));
        }
        let mut pos = 0;
        for (_, l) in self.layers_mut() {
            let n = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
            let n = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        Ok(())
    }

    /// Zero-valued layers shaped like this model's, for gradients and velocities.
    pub fn zeros_like(&self) -> Vec<LinearLayer> {
        self.layers()
            .into_iter()
            .map(|(_, l)| LinearLayer::zeros(l.in_dim(), l.out_dim()))
            .collect()
    }
}

/// Parameter gradients in [`ModelParams::layers`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<LinearLayer>,
}

impl ModelGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }
}

/// Forward state of one clip: projections and the per-clip descriptors the
/// variant needs.
#[derive(Clone, Debug)]
pub struct ClipEncoding {
    raw: Matrix,
    pub projected: ProjectedClip,
    pub san: Option<SequenceDescriptor>,
    pub pooled: Option<SequenceDescriptor>,
    san_record: Option<AttendRecord>,
    pool_argmax: Option<Vec<usize>>,
}

impl ClipEncoding {
    /// The descriptor that represents this clip on its own: the
    /// self-attended one when the variant has a self branch, else the pooled one.
    pub fn identity_descriptor(&self) -> &SequenceDescriptor {
        self.san
            .as_ref()
            .or(self.pooled.as_ref())
            .expect("every variant produces a per-clip descriptor")
    }
}

/// Projects a clip and computes its per-clip descriptors. With `record`
/// set, the backward records are kept for [`batch_forward_backward`].
pub fn encode_clip(params: &ModelParams, raw: &Matrix, record: bool) -> Result<ClipEncoding> {
    if raw.rows() == 0 {
        return Err(ScanError::Contract("a clip needs at least one frame".into()));
    }
    let variant = params.variant;
    let f = linear_forward(raw, &params.fc0)?;
    let s = if variant.uses_san() {
        linear_forward(raw, &params.fc1)?
    } else {
        Matrix::zeros(raw.rows(), params.width())
    };
    // A bias on the CAN keys shifts every logit column by a constant, which the
    // temporal softmax cancels. Leaving it out keeps that gradient exactly zero.
    let c = if variant.uses_can() {
        raw.matmul(&params.fc2().weight)?
    } else {
        Matrix::zeros(raw.rows(), params.width())
    };
    let projected = ProjectedClip::new(f, s, c)?;
    let corr = params.correlation();

    let (san, san_record) = if variant.uses_san() {
        if record {
            let (d, r) = self_attend_recorded(&projected, &corr)?;
            (Some(d), Some(r))
        } else {
            (Some(self_attend(&projected, &corr)?.0), None)
        }
    } else {
        (None, None)
    };
    let (pooled, pool_argmax) = match variant.pooling() {
        Some(PoolMode::Avg) => (Some(column_mean(&projected.f_feat)), None),
        Some(PoolMode::Max) => {
            let (v, arg) = column_max(&projected.f_feat);
            (Some(v), Some(arg))
        }
        None => (None, None),
    };
    let pooled = pooled.map(|vec| SequenceDescriptor {
        vec,
        role: crate::attention::Role::SelfAttended,
    });
    Ok(ClipEncoding {
        raw: if record { raw.clone() } else { Matrix::zeros(0, 0) },
        projected,
        san,
        pooled,
        san_record,
        pool_argmax,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Probe,
    Gallery,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Node {
    San(Side),
    Pool(Side),
    Can(Side),
}

/// Which node feeds each slot of `(a − b) ∘ (u − v)` and what each
/// collaborative branch queries with.
struct Wiring {
    slots: [Node; 4],
    can_probe_query: Option<Node>,
    can_gallery_query: Option<Node>,
}

fn wiring(variant: Variant) -> Wiring {
    use Node::*;
    use Side::*;
    match variant {
        Variant::AvgPool | Variant::MaxPool => Wiring {
            slots: [Pool(Probe), Pool(Gallery), Pool(Probe), Pool(Gallery)],
            can_probe_query: None,
            can_gallery_query: None,
        },
        Variant::SanOnly => Wiring {
            slots: [San(Probe), San(Gallery), San(Probe), San(Gallery)],
            can_probe_query: None,
            can_gallery_query: None,
        },
        Variant::CanOnly => Wiring {
            slots: [Can(Probe), Can(Gallery), Can(Probe), Can(Gallery)],
            can_probe_query: Some(Pool(Gallery)),
            can_gallery_query: Some(Pool(Probe)),
        },
        Variant::SinglePath => Wiring {
            slots: [San(Probe), Pool(Gallery), Pool(Probe), Can(Gallery)],
            can_probe_query: None,
            can_gallery_query: Some(San(Probe)),
        },
        Variant::SharedFc | Variant::DotProduct | Variant::Full => Wiring {
            slots: [San(Probe), San(Gallery), Can(Probe), Can(Gallery)],
            can_probe_query: Some(San(Gallery)),
            can_gallery_query: Some(San(Probe)),
        },
    }
}

struct PairForward {
    slots: [Vector; 4],
    feature: Vector,
    score: MatchScore,
    can_probe: Option<AttendRecord>,
    can_gallery: Option<AttendRecord>,
}

fn node_value<'a>(
    node: Node,
    probe: &'a ClipEncoding,
    gallery: &'a ClipEncoding,
    can_probe: Option<&'a SequenceDescriptor>,
    can_gallery: Option<&'a SequenceDescriptor>,
) -> Result<&'a SequenceDescriptor> {
    let missing = || ScanError::Contract(format!("node {node:?} not computed for this variant"));
    match node {
        Node::San(Side::Probe) => probe.san.as_ref().ok_or_else(missing),
        Node::San(Side::Gallery) => gallery.san.as_ref().ok_or_else(missing),
        Node::Pool(Side::Probe) => probe.pooled.as_ref().ok_or_else(missing),
        Node::Pool(Side::Gallery) => gallery.pooled.as_ref().ok_or_else(missing),
        Node::Can(Side::Probe) => can_probe.ok_or_else(missing),
        Node::Can(Side::Gallery) => can_gallery.ok_or_else(missing),
    }
}

fn pair_forward(
    params: &ModelParams,
    probe: &ClipEncoding,
    gallery: &ClipEncoding,
    record: bool,
) -> Result<PairForward> {
    let w = wiring(params.variant);
    let corr = params.correlation();
    let run_can = |clip: &ClipEncoding,
                   query: Option<Node>|
     -> Result<Option<(SequenceDescriptor, Option<AttendRecord>)>> {
        let Some(q) = query else { return Ok(None) };
        let partner = node_value(q, probe, gallery, None, None)?;
        if record {
            let (d, r) = collab_attend_recorded(&clip.projected, partner, &corr)?;
            Ok(Some((d, Some(r))))
        } else {
            Ok(Some((collab_attend(&clip.projected, partner, &corr)?.0, None)))
        }
    };
    let can_p = run_can(probe, w.can_probe_query)?;
    let can_g = run_can(gallery, w.can_gallery_query)?;
    let cp = can_p.as_ref().map(|(d, _)| d);
    let cg = can_g.as_ref().map(|(d, _)| d);
    let mut slots: [Vector; 4] = Default::default();
    for (dst, node) in slots.iter_mut().zip(w.slots) {
        *dst = node_value(node, probe, gallery, cp, cg)?.vec.clone();
    }
    let feature = gated_difference(&slots[0], &slots[1], &slots[2], &slots[3])?;
    let score = match_score(&feature, &params.fc3)?;
    Ok(PairForward {
        slots,
        feature: feature.s,
        score,
        can_probe: can_p.and_then(|(_, r)| r),
        can_gallery: can_g.and_then(|(_, r)| r),
    })
}

/// Matching score of two encoded clips (probe first).
pub fn score_encoded_pair(
    params: &ModelParams,
    probe: &ClipEncoding,
    gallery: &ClipEncoding,
) -> Result<MatchScore> {
    Ok(pair_forward(params, probe, gallery, false)?.score)
}

/// Matching score of two raw clips (probe first).
pub fn score_clip_pair(params: &ModelParams, probe: &Matrix, gallery: &Matrix) -> Result<MatchScore> {
    let p = encode_clip(params, probe, false)?;
    let g = encode_clip(params, gallery, false)?;
    score_encoded_pair(params, &p, &g)
}

/// A pair inside a batch, by clip position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairRef {
    pub probe: usize,
    pub gallery: usize,
    pub label: bool,
}

/// Identity-loss inputs: the prototype table and each clip's table row.
pub struct IdentityTargets<'a> {
    pub table: &'a OimTable,
    pub rows: &'a [usize],
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    /// `mean BCE + lambda * mean OIM`.
    pub loss: f64,
    pub bce: f64,
    pub oim: f64,
    pub accuracy: f64,
    pub grads: ModelGrads,
    /// Gradient with respect to each raw clip, when requested.
    pub input_grads: Option<Vec<Matrix>>,
    /// Per-clip identity descriptors, for the prototype update.
    pub identity_descriptors: Vec<Vector>,
    pub probabilities: Vec<f64>,
}

struct ClipGrad {
    f: Matrix,
    s: Matrix,
    c: Matrix,
    san: Vector,
    pool: Vector,
}

impl ClipGrad {
    fn new(rows: usize, width: usize) -> Self {
        Self {
            f: Matrix::zeros(rows, width),
            s: Matrix::zeros(rows, width),
            c: Matrix::zeros(rows, width),
            san: Vector::zeros(width),
            pool: Vector::zeros(width),
        }
    }
}

fn add_into(dst: &mut Vector, src: &Vector) {
    axpy(1.0, src.as_slice(), dst.as_mut_slice());
}

/// Loss over a batch of clips and pairs together with exact gradients for
/// every trainable layer.
///
/// Pair losses are averaged over pairs and identity losses over clips.
/// Gradients accumulate in pair order, then clip order, so results are
/// deterministic.
pub fn batch_forward_backward(
    params: &ModelParams,
    clips: &[Matrix],
    pairs: &[PairRef],
    identity: Option<IdentityTargets<'_>>,
    want_input_grads: bool,
) -> Result<BatchResult> {
    params.validate()?;
    let variant = params.variant;
    let width = params.width();
    let mut enc: Vec<ClipEncoding> = clips
        .iter()
        .map(|c| encode_clip(params, c, true))
        .collect::<Result<_>>()?;
    let mut acc: Vec<ClipGrad> = clips.iter().map(|c| ClipGrad::new(c.rows(), width)).collect();
    let mut fc3_grad = LinearLayer::zeros(width, 1);
    let w = wiring(variant);

    let n_pairs = pairs.len();
    let mut bce_sum = 0.0;
    let mut correct = 0usize;
    let mut probabilities = Vec::with_capacity(n_pairs);
    for pair in pairs {
        if pair.probe >= clips.len() || pair.gallery >= clips.len() {
            return Err(ScanError::Contract(format!(
                "pair {pair:?} outside batch of {}",
                clips.len()
            )));
        }
        let fwd = pair_forward(params, &enc[pair.probe], &enc[pair.gallery], true)?;
        let loss = bce_with_logit(fwd.score.logit, pair.label);
        bce_sum += loss.value;
        probabilities.push(fwd.score.probability);
        if (fwd.score.probability > 0.5) == pair.label {
            correct += 1;
        }
        let dlogit = loss.grad[0] / n_pairs as f64;

        // fc-3
        axpy(dlogit, fwd.feature.as_slice(), fc3_grad.weight.data_mut());
        fc3_grad.bias[0] += dlogit;
        let grad_s = Vector::from(
            params
                .fc3
                .weight
                .data()
                .iter()
                .map(|w| w * dlogit)
                .collect::<Vec<_>>(),
        );
        let [a, b, u, v] = &fwd.slots;
        let slot_grads = gated_difference_backward(a, b, u, v, &grad_s);

        let mut can_grad = [Vector::zeros(width), Vector::zeros(width)];
        let side_index = |side: Side| match side {
            Side::Probe => pair.probe,
            Side::Gallery => pair.gallery,
        };
        // clip-level nodes accumulate per clip; collaborative nodes per pair
        let route_clip = |node: Node, g: &Vector, acc: &mut [ClipGrad]| match node {
            Node::San(side) => add_into(&mut acc[side_index(side)].san, g),
            Node::Pool(side) => add_into(&mut acc[side_index(side)].pool, g),
            Node::Can(_) => unreachable!("collaborative nodes are routed per pair"),
        };
        for (node, g) in w.slots.iter().zip(&slot_grads) {
            match node {
                Node::Can(Side::Probe) => add_into(&mut can_grad[0], g),
                Node::Can(Side::Gallery) => add_into(&mut can_grad[1], g),
                _ => route_clip(*node, g, &mut acc),
            }
        }
        let [grad_can_probe, grad_can_gallery] = can_grad;
        for (record, grad, side, query) in [
            (fwd.can_probe, grad_can_probe, Side::Probe, w.can_probe_query),
            (
                fwd.can_gallery,
                grad_can_gallery,
                Side::Gallery,
                w.can_gallery_query,
            ),
        ] {
            let (Some(record), Some(query)) = (record, query) else {
                continue;
            };
            let g = attend_backward(record, &grad)?;
            let clip = side_index(side);
            acc[clip].f.add_assign(&g.grad_frames)?;
            acc[clip].c.add_assign(&g.grad_keys)?;
            route_clip(query, &g.grad_query, &mut acc);
        }
    }

    // identity loss on each clip's own descriptor
    let identity_descriptors: Vec<Vector> = enc.iter().map(|e| e.identity_descriptor().vec.clone()).collect();
    let mut oim_mean = 0.0;
    let mut lambda = 0.0;
    if let Some(targets) = &identity {
        if targets.rows.len() != clips.len() {
            return Err(ScanError::dim(
                "batch identity rows",
                clips.len(),
                targets.rows.len(),
            ));
        }
        lambda = targets.lambda;
        let n = clips.len() as f64;
        for (i, desc) in identity_descriptors.iter().enumerate() {
            let term = oim_forward(desc, targets.rows[i], targets.table)?;
            oim_mean += term.value / n;
            if lambda != 0.0 {
                let scaled = Vector::from(
                    term.grad
                        .as_slice()
                        .iter()
                        .map(|g| g * lambda / n)
                        .collect::<Vec<_>>(),
                );
                if enc[i].san.is_some() {
                    add_into(&mut acc[i].san, &scaled);
                } else {
                    add_into(&mut acc[i].pool, &scaled);
                }
            }
        }
    }

    // per-clip branches back to the projections, then into the layers
    let mut grads = params.zeros_like();
    let fc2_slot = if params.fc2.is_some() { 2 } else { 1 };
    let mut input_grads = want_input_grads.then(Vec::new);
    for (i, (e, g)) in enc.iter_mut().zip(acc.iter_mut()).enumerate() {
        if let Some(record) = e.san_record.take() {
            let back = attend_backward(record, &g.san)?;
            g.f.add_assign(&back.grad_frames)?;
            g.s.add_assign(&back.grad_keys)?;
        }
        match variant.pooling() {
            Some(PoolMode::Avg) => g.f.add_assign(&column_mean_backward(e.raw.rows(), &g.pool))?,
            Some(PoolMode::Max) => {
                let arg = e.pool_argmax.as_ref().expect("max pooling records argmax");
                g.f.add_assign(&column_max_backward(e.raw.rows(), arg, &g.pool))?
            }
            None => {}
        }
        let mut grad_x = Matrix::zeros(e.raw.rows(), e.raw.cols());
        let mut apply = |slot: usize, layer: &LinearLayer, upstream: &Matrix, bias: bool| -> Result<()> {
            let lg = linear_backward(&e.raw, layer, upstream)?;
            grads[slot].weight.add_assign(&lg.grad_weight)?;
            if bias {
                add_into(&mut grads[slot].bias, &lg.grad_bias);
            }
            grad_x.add_assign(&lg.grad_x)?;
            Ok(())
        };
        apply(0, &params.fc0, &g.f, true)?;
        if variant.uses_san() {
            apply(1, &params.fc1, &g.s, true)?;
        }
        if variant.uses_can() {
            apply(fc2_slot, params.fc2(), &g.c, false)?;
        }
        if let Some(list) = input_grads.as_mut() {
            debug_assert_eq!(list.len(), i);
            list.push(grad_x);
        }
    }
    let last = grads.len() - 1;
    grads[last] = fc3_grad;

    let bce = if n_pairs > 0 {
        bce_sum / n_pairs as f64
    } else {
        0.0
    };
    Ok(BatchResult {
        loss: bce + lambda * oim_mean,
        bce,
        oim: oim_mean,
        accuracy: if n_pairs > 0 {
            correct as f64 / n_pairs as f64
        } else {
            0.0
        },
        grads: ModelGrads { layers: grads },
        input_grads,
        identity_descriptors,
        probabilities,
    })
}
