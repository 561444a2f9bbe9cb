//! Browser bindings for the attention matching demo.
//!
//! Every export returns a JSON string; errors come back as a thrown string.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use scan_core::data::{segment, synthesize_with_truth, Dataset, SyntheticConfig, SyntheticTruth};
use scan_core::error::ScanError;
use scan_core::eval::{evaluate, score_dataset, EvalConfig, MetricsReport, SWEEP_RATES};
use scan_core::model::{encode_clip, ModelParams, Variant};
use scan_core::training::{train, TrainConfig};

fn js_err(e: ScanError) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json<T: Serialize>(value: &T) -> Result<String, JsValue> {
    serde_json::to_string(value).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[derive(Serialize)]
struct Segmentation {
    starts: Vec<usize>,
    clip_len: usize,
    dropped_tail: usize,
}

/// Clip windows for a sequence of `frames` frames.
#[wasm_bindgen]
pub fn segment_sequence(frames: usize, clip_len: usize, stride: usize) -> Result<String, JsValue> {
    if clip_len == 0 || stride == 0 {
        return Err(JsValue::from_str("clip length and stride must be at least 1"));
    }
    let clips = segment(frames, clip_len, stride);
    let covered = clips.last().map_or(0, |r| r.end);
    to_json(&Segmentation {
        starts: clips.iter().map(|r| r.start).collect(),
        clip_len: clips.first().map_or(0, |r| r.len()),
        dropped_tail: frames - covered,
    })
}

/// A small model trained in the page on a synthetic occluded dataset.
#[wasm_bindgen]
pub struct Demo {
    params: ModelParams,
    all: Dataset,
    truth: SyntheticTruth,
    test: Dataset,
    eval: EvalConfig,
}

#[derive(Serialize)]
struct Heatmap {
    identity: u32,
    camera: u32,
    clip_start: usize,
    /// frames x channels SAN weights
    weights: Vec<Vec<f64>>,
    /// mean weight per frame
    frame_weight: Vec<f64>,
    occluded: Vec<bool>,
}

#[derive(Serialize)]
struct Sweep {
    rates: Vec<f64>,
    top1: Vec<f64>,
    map: Vec<f64>,
    cmc_at_rate: Vec<f64>,
}

#[wasm_bindgen]
impl Demo {
    /// Synthesizes 24 identities with `occlusion` frame occlusion and
    /// trains the chosen variant on half of them.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, occlusion: f64, epochs: usize, variant: &str) -> Result<Demo, JsValue> {
        let variant: Variant = variant.parse().map_err(js_err)?;
        let synth = SyntheticConfig {
            n_identities: 24,
            frames_per_sequence: 60,
            feature_dim: 32,
            occlusion_prob: occlusion,
            seed,
            ..SyntheticConfig::default()
        };
        let (all, truth) = synthesize_with_truth(&synth).map_err(js_err)?;
        let (train_set, test) = all.split_identities(0.5).map_err(js_err)?;
        let cfg = TrainConfig {
            variant,
            seed,
            epochs,
            width: 32,
            ids_per_batch: 12,
            ..TrainConfig::default()
        };
        cfg.validate().map_err(js_err)?;
        let params = train(&train_set, &cfg).map_err(js_err)?.params;
        Ok(Demo {
            params,
            all,
            truth,
            test,
            eval: EvalConfig::default(),
        })
    }

    /// Number of held-out sequences that `attention` can show.
    pub fn held_out(&self) -> usize {
        self.test.records.len()
    }

    /// SAN weights over the clip of held-out sequence `index` with the
    /// most occluded frames.
    pub fn attention(&self, index: usize) -> Result<String, JsValue> {
        let record = self
            .test
            .records
            .get(index)
            .ok_or_else(|| JsValue::from_str("no such held-out sequence"))?;
        let source = self
            .all
            .records
            .iter()
            .position(|r| r.identity == record.identity && r.camera == record.camera)
            .ok_or_else(|| JsValue::from_str("sequence missing from the source set"))?;
        let mask = &self.truth.occluded[source];
        let clips = segment(record.frames(), self.eval.clip_len, self.eval.stride);
        let clip = clips
            .iter()
            .max_by_key(|&r| {
                (
                    mask[r.clone()].iter().filter(|&&o| o).count(),
                    usize::MAX - r.start,
                )
            })
            .ok_or_else(|| JsValue::from_str("sequence is empty"))?
            .clone();
        let frames = record
            .features
            .slice_rows(clip.start, clip.len())
            .map_err(js_err)?;
        let enc = encode_clip(&self.params, &frames, false).map_err(js_err)?;
        let (_, weights) =
            scan_core::attention::self_attend(&enc.projected, &self.params.correlation()).map_err(js_err)?;
        let w = weights.coeffs;
        let rows: Vec<Vec<f64>> = (0..w.rows()).map(|r| w.row(r).to_vec()).collect();
        let frame_weight = rows
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect();
        to_json(&Heatmap {
            identity: record.identity,
            camera: record.camera,
            clip_start: clip.start,
            weights: rows,
            frame_weight,
            occluded: mask[clip].to_vec(),
        })
    }

    /// Held-out top-1 and mAP across ensemble rates, plus the CMC curve at `rate`.
    pub fn sweep(&self, rate: f64) -> Result<String, JsValue> {
        let table = score_dataset(&self.params, &self.test, &self.eval).map_err(js_err)?;
        let mut top1 = Vec::new();
        let mut map = Vec::new();
        for &r in SWEEP_RATES.iter() {
            let report = MetricsReport::from_matrix(
                &table.score_matrix(r).map_err(js_err)?,
                r,
                serde_json::Value::Null,
            )
            .map_err(js_err)?;
            top1.push(report.top1);
            map.push(report.map);
        }
        let eval = EvalConfig {
            ensemble_rate: rate,
            ..self.eval.clone()
        };
        let at_rate = evaluate(&self.params, &self.test, &eval, serde_json::Value::Null).map_err(js_err)?;
        to_json(&Sweep {
            rates: SWEEP_RATES.to_vec(),
            top1,
            map,
            cmc_at_rate: at_rate.cmc_curve,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmentation_reports_tail() {
        let v: serde_json::Value = serde_json::from_str(&segment_sequence(23, 10, 5).unwrap()).unwrap();
        assert_eq!(v["starts"], serde_json::json!([0, 5, 10]));
        assert_eq!(v["dropped_tail"], 3);
    }

    #[test]
    fn demo_round_trip() {
        let demo = Demo::new(1, 0.4, 2, "full").unwrap();
        assert!(demo.held_out() > 0);
        let heat: serde_json::Value = serde_json::from_str(&demo.attention(0).unwrap()).unwrap();
        let frames = heat["frame_weight"].as_array().unwrap().len();
        assert_eq!(frames, heat["occluded"].as_array().unwrap().len());
        let sweep: serde_json::Value = serde_json::from_str(&demo.sweep(0.1).unwrap()).unwrap();
        assert_eq!(sweep["top1"].as_array().unwrap().len(), SWEEP_RATES.len());
    }
}
