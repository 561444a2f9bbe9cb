//! Finite-difference verification of the full training graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{OimTable, DEFAULT_OIM_MOMENTUM, DEFAULT_OIM_TEMPERATURE};
use crate::model::{batch_forward_backward, IdentityTargets, ModelParams, PairRef, Variant};
use crate::numkit::{grad_check_flat, GradReport, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphCheckConfig {
    pub feature_dim: usize,
    pub width: usize,
    pub lambda_id: f64,
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GraphCheckConfig {
    fn default() -> Self {
        Self {
            feature_dim: 6,
            width: 5,
            lambda_id: 1.0,
            h: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// Checks every parameter and input gradient of a small random batch:
/// projections, both attention branches, the similarity feature, fc-3, BCE
/// and the identity loss.
pub fn check_full_graph(seed: u64, variant: Variant, cfg: &GraphCheckConfig) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(cfg.feature_dim, cfg.width, variant, &mut rng)?;
    // nonzero biases so their gradients are exercised away from the init point
    for (_, layer) in params.layers_mut() {
        for b in layer.bias.as_mut_slice() {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
    let frames = [4usize, 3, 5, 4];
    let clips: Vec<Matrix> = frames
        .iter()
        .map(|&t| {
            let data = (0..t * cfg.feature_dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            Matrix::from_vec(t, cfg.feature_dim, data)
        })
        .collect::<Result<_>>()?;
    let pairs = [
        PairRef {
            probe: 0,
            gallery: 1,
            label: true,
        },
        PairRef {
            probe: 2,
            gallery: 3,
            label: true,
        },
        PairRef {
            probe: 1,
            gallery: 2,
            label: false,
        },
        PairRef {
            probe: 3,
            gallery: 0,
            label: false,
        },
    ];
    let rows = [0usize, 0, 1, 1];
    // Prototypes start at the identity means of the clip descriptors, as they
    // would after a few momentum updates. Random prototypes at temperature 0.1
    // inflate the loss, and with it the round-off floor of the difference quotient.
    let warm = batch_forward_backward(&params, &clips, &pairs, None, false)?;
    let mut protos = Matrix::zeros(2, cfg.width);
    for (desc, &row) in warm.identity_descriptors.iter().zip(&rows) {
        for (p, v) in protos.row_mut(row).iter_mut().zip(desc.as_slice()) {
            *p += v;
        }
    }
    let table = OimTable::new(protos, DEFAULT_OIM_MOMENTUM, DEFAULT_OIM_TEMPERATURE)?;
    let targets = || {
        Some(IdentityTargets {
            table: &table,
            rows: &rows,
            lambda: cfg.lambda_id,
        })
    };

    let base = batch_forward_backward(&params, &clips, &pairs, targets(), true)?;
    let mut report = grad_check_flat(
        &format!("{variant}/params"),
        &params.to_flat(),
        &base.grads.to_flat(),
        |flat| {
            let mut p = params.clone();
            p.set_flat(flat)?;
            Ok(batch_forward_backward(&p, &clips, &pairs, targets(), false)?.loss)
        },
        cfg.h,
        cfg.tolerance,
    )?;

    let input_grads = base.input_grads.expect("requested above");
    for (i, grad) in input_grads.iter().enumerate() {
        let shape = clips[i].shape();
        let inputs = grad_check_flat(
            &format!("{variant}/input{i}"),
            clips[i].data(),
            grad.data(),
            |flat| {
                let mut perturbed = clips.clone();
                perturbed[i] = Matrix::from_vec(shape.0, shape.1, flat.to_vec())?;
                Ok(batch_forward_backward(&params, &perturbed, &pairs, targets(), false)?.loss)
            },
            cfg.h,
            cfg.tolerance,
        )?;
        report.merge(&inputs);
    }
    report.op_name = format!("full graph ({variant}, seed {seed})");
    Ok(report)
}
