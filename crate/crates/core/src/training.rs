//! SGD with momentum and weight decay, the step learning-rate schedule and
//! the pair-batch training loop.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    pair_batch, sample_batch, ClipCatalog, Dataset, DEFAULT_CLIPS_PER_ID, DEFAULT_CLIP_LEN,
    DEFAULT_IDS_PER_BATCH, DEFAULT_STRIDE,
};
use crate::error::{Result, ScanError};
use crate::losses::{oim_update, OimTable, DEFAULT_OIM_MOMENTUM, DEFAULT_OIM_TEMPERATURE};
use crate::model::{
    batch_forward_backward, encode_clip, IdentityTargets, ModelGrads, ModelParams, PairRef, Variant,
    DEFAULT_WIDTH,
};
use crate::numkit::{LinearLayer, Matrix};

/// The learning rate drops by this factor every [`LR_STEP_EPOCHS`] epochs.
pub const LR_DECAY: f64 = 0.001;
pub const LR_STEP_EPOCHS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lambda_id: f64,
    /// `None` means `ceil(training clips / batch size)`.
    pub batches_per_epoch: Option<usize>,
    pub seed: u64,
    pub variant: Variant,
    pub width: usize,
    pub clip_len: usize,
    pub stride: usize,
    pub ids_per_batch: usize,
    pub clips_per_id: usize,
    pub oim_momentum: f64,
    pub oim_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            lambda_id: 1.0,
            batches_per_epoch: None,
            seed: 0,
            variant: Variant::Full,
            width: DEFAULT_WIDTH,
            clip_len: DEFAULT_CLIP_LEN,
            stride: DEFAULT_STRIDE,
            ids_per_batch: DEFAULT_IDS_PER_BATCH,
            clips_per_id: DEFAULT_CLIPS_PER_ID,
            oim_momentum: DEFAULT_OIM_MOMENTUM,
            oim_temperature: DEFAULT_OIM_TEMPERATURE,
        }
    }
}

impl TrainConfig {
    /// `epochs == 0` is accepted here; [`train`] then returns the
    /// initialization unchanged.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ScanError::Config(msg));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda_id >= 0.0) {
            return bad("weight_decay and lambda_id must be >= 0".into());
        }
        if self.width == 0 || self.clip_len == 0 || self.stride == 0 {
            return bad("width, clip_len and stride must be >= 1".into());
        }
        if self.ids_per_batch < 2 || self.clips_per_id < 1 {
            return bad("a batch needs at least 2 identities and 1 clip each".into());
        }
        if self.batches_per_epoch == Some(0) {
            return bad("batches_per_epoch must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.oim_momentum) || !(self.oim_temperature > 0.0) {
            return bad("oim_momentum must lie in [0, 1] and oim_temperature be > 0".into());
        }
        Ok(())
    }
}

/// Step decay: `lr0 * 0.001^floor(epoch / 10)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * LR_DECAY.powi((epoch / LR_STEP_EPOCHS) as i32)
}

/// One velocity buffer per layer, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<LinearLayer>,
}

impl SgdState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            velocity: params.zeros_like(),
        }
    }
}

fn check_finite(name: &str, part: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(ScanError::NonFiniteGradient {
            tensor: format!("{name}.{part}"),
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

fn momentum_update(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    decay: f64,
) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + decay * *p;
        *p -= lr * *v;
    }
}

/// `v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v`.
/// Biases take no weight decay. Gradients are checked for NaN/inf before any
/// parameter is touched.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut layers = params.layers_mut();
    if grads.layers.len() != layers.len() || state.velocity.len() != layers.len() {
        return Err(ScanError::dim(
            "sgd_step",
            format!("{} layers", layers.len()),
            format!(
                "{} grads, {} velocities",
                grads.layers.len(),
                state.velocity.len()
            ),
        ));
    }
    for ((name, layer), g) in layers.iter().zip(&grads.layers) {
        if layer.weight.shape() != g.weight.shape() || layer.bias.len() != g.bias.len() {
            return Err(ScanError::dim(
                "sgd_step",
                format!("{name} {:?}", layer.weight.shape()),
                format!("{:?}", g.weight.shape()),
            ));
        }
        check_finite(name, "weight", g.weight.data())?;
        check_finite(name, "bias", g.bias.as_slice())?;
    }
    for (((_, layer), g), v) in layers.iter_mut().zip(&grads.layers).zip(&mut state.velocity) {
        momentum_update(
            layer.weight.data_mut(),
            g.weight.data(),
            v.weight.data_mut(),
            lr,
            momentum,
            weight_decay,
        );
        momentum_update(
            layer.bias.as_mut_slice(),
            g.bias.as_slice(),
            v.bias.as_mut_slice(),
            lr,
            momentum,
            0.0,
        );
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub bce: f64,
    pub oim: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
}

/// Prototype table seeded with each identity's mean clip descriptor under
/// the initial parameters.
fn initial_prototypes(
    params: &ModelParams,
    dataset: &Dataset,
    catalog: &ClipCatalog,
    rows: &BTreeMap<u32, usize>,
    cfg: &TrainConfig,
) -> Result<OimTable> {
    let mut protos = Matrix::zeros(rows.len(), params.width());
    for (&id, &row) in rows {
        for clip in catalog.clips_of(id) {
            let enc = encode_clip(params, &clip.frames(dataset)?, false)?;
            for (p, v) in protos
                .row_mut(row)
                .iter_mut()
                .zip(enc.identity_descriptor().vec.as_slice())
            {
                *p += v;
            }
        }
    }
    OimTable::new(protos, cfg.oim_momentum, cfg.oim_temperature)
}

/// Trains a fresh model. Per step: sample a batch, pair it, run the graph
/// forward and backward, take an SGD step, then update the prototypes with
/// the batch's descriptors.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(ScanError::Contract("cannot train on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(dataset.feature_dim, cfg.width, cfg.variant, &mut rng)?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            history: Vec::new(),
        });
    }

    let catalog = ClipCatalog::build(dataset, cfg.clip_len, cfg.stride);
    let ids_per_batch = cfg.ids_per_batch.min(catalog.identity_count());
    if ids_per_batch < cfg.ids_per_batch {
        warn!(
            "only {} identities available; batches use {ids_per_batch} instead of {}",
            catalog.identity_count(),
            cfg.ids_per_batch
        );
    }
    let batch_size = ids_per_batch * cfg.clips_per_id;
    let batches = cfg
        .batches_per_epoch
        .unwrap_or_else(|| catalog.clip_count().div_ceil(batch_size).max(1));
    let rows: BTreeMap<u32, usize> = catalog.identities().enumerate().map(|(i, id)| (id, i)).collect();
    let mut table = initial_prototypes(&params, dataset, &catalog, &rows, cfg)?;
    let mut state = SgdState::new(&params);
    info!(
        "training {} on {} clips / {} identities: {} epochs x {batches} batches, seed {}",
        cfg.variant,
        catalog.clip_count(),
        catalog.identity_count(),
        cfg.epochs,
        cfg.seed
    );

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let (mut bce, mut oim, mut acc) = (0.0, 0.0, 0.0);
        for _ in 0..batches {
            let batch = sample_batch(&catalog, &mut rng, ids_per_batch, cfg.clips_per_id)?;
            let pairs: Vec<PairRef> = pair_batch(&batch, &mut rng)
                .into_iter()
                .map(|p| PairRef {
                    probe: p.probe_slot,
                    gallery: p.gallery_slot,
                    label: p.label,
                })
                .collect();
            let clips: Vec<Matrix> = batch.iter().map(|c| c.frames(dataset)).collect::<Result<_>>()?;
            let clip_rows: Vec<usize> = batch.iter().map(|c| rows[&c.identity]).collect();
            let result = batch_forward_backward(
                &params,
                &clips,
                &pairs,
                Some(IdentityTargets {
                    table: &table,
                    rows: &clip_rows,
                    lambda: cfg.lambda_id,
                }),
                false,
            )?;
            sgd_step(
                &mut params,
                &result.grads,
                &mut state,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            for (desc, &row) in result.identity_descriptors.iter().zip(&clip_rows) {
                oim_update(&mut table, desc, row)?;
            }
            bce += result.bce;
            oim += result.oim;
            acc += result.accuracy;
        }
        let n = batches as f64;
        let stats = EpochStats {
            epoch,
            lr,
            bce: bce / n,
            oim: oim / n,
            accuracy: acc / n,
        };
        debug!(
            "epoch {epoch}: lr {lr:e} bce {:.4} oim {:.4} acc {:.3}",
            stats.bce, stats.oim, stats.accuracy
        );
        history.push(stats);
    }
    Ok(TrainOutcome { params, history })
}
