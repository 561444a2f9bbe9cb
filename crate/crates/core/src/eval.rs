//! Sequence scoring by clip-pair ensembling, and CMC / mAP ranking metrics.

use std::cmp::Ordering;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{segment, Dataset, SequenceRecord, DEFAULT_CLIP_LEN, DEFAULT_STRIDE};
use crate::error::{Result, ScanError};
use crate::model::{encode_clip, score_encoded_pair, ClipEncoding, ModelParams};
use crate::numkit::Matrix;

pub const DEFAULT_ENSEMBLE_RATE: f64 = 0.1;
/// Rates evaluated by the ensemble sweep.
pub const SWEEP_RATES: [f64; 7] = [0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ensemble_rate: f64,
    pub clip_len: usize,
    pub stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ensemble_rate: DEFAULT_ENSEMBLE_RATE,
            clip_len: DEFAULT_CLIP_LEN,
            stride: DEFAULT_STRIDE,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        check_rate(self.ensemble_rate)?;
        if self.clip_len == 0 || self.stride == 0 {
            return Err(ScanError::Config("clip_len and stride must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(ScanError::Config(format!(
            "ensemble rate must lie in (0, 1], got {rate}"
        )))
    }
}

/// Number of top clip pairs averaged: `max(1, ceil(rate * n))`.
pub fn ensemble_count(n: usize, rate: f64) -> usize {
    // 0.1 * 30 is 3.0000000000000004 in binary; the slack keeps whole products whole
    let k = (rate * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n.max(1))
}

/// Mean of the `max(1, ceil(rate * n))` largest clip scores.
pub fn ensemble_score(clip_scores: &[f64], rate: f64) -> Result<f64> {
    if clip_scores.is_empty() {
        return Err(ScanError::Contract("ensemble over an empty score list".into()));
    }
    check_rate(rate)?;
    let k = ensemble_count(clip_scores.len(), rate);
    let mut sorted = clip_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Every clip of a sequence, encoded once and reused against all partners.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub identity: u32,
    pub camera: u32,
    pub clips: Vec<ClipEncoding>,
}

pub fn encode_sequence(
    params: &ModelParams,
    record: &SequenceRecord,
    cfg: &EvalConfig,
) -> Result<EncodedSequence> {
    if record.frames() == 0 {
        return Err(ScanError::Contract(format!(
            "sequence of identity {} camera {} has no frames",
            record.identity, record.camera
        )));
    }
    let clips = segment(record.frames(), cfg.clip_len, cfg.stride)
        .into_iter()
        .map(|r| encode_clip(params, &record.features.slice_rows(r.start, r.len())?, false))
        .collect::<Result<_>>()?;
    Ok(EncodedSequence {
        identity: record.identity,
        camera: record.camera,
        clips,
    })
}

/// Match probabilities of every probe-clip × gallery-clip pair.
pub fn clip_pair_scores(
    params: &ModelParams,
    probe: &EncodedSequence,
    gallery: &EncodedSequence,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(probe.clips.len() * gallery.clips.len());
    for p in &probe.clips {
        for g in &gallery.clips {
            out.push(score_encoded_pair(params, p, g)?.probability);
        }
    }
    Ok(out)
}

pub fn sequence_score(
    params: &ModelParams,
    probe: &SequenceRecord,
    gallery: &SequenceRecord,
    cfg: &EvalConfig,
) -> Result<f64> {
    cfg.validate()?;
    let p = encode_sequence(params, probe, cfg)?;
    let g = encode_sequence(params, gallery, cfg)?;
    ensemble_score(&clip_pair_scores(params, &p, &g)?, cfg.ensemble_rate)
}

/// Probe × gallery similarity scores with identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    scores: Matrix,
    probe_ids: Vec<u32>,
    gallery_ids: Vec<u32>,
}

impl ScoreMatrix {
    pub fn new(scores: Matrix, probe_ids: Vec<u32>, gallery_ids: Vec<u32>) -> Result<Self> {
        if scores.shape() != (probe_ids.len(), gallery_ids.len()) {
            return Err(ScanError::dim(
                "ScoreMatrix::new",
                format!("{}x{}", probe_ids.len(), gallery_ids.len()),
                format!("{}x{}", scores.rows(), scores.cols()),
            ));
        }
        if !scores.is_finite() {
            return Err(ScanError::Contract(
                "score matrix contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            scores,
            probe_ids,
            gallery_ids,
        })
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn probe_ids(&self) -> &[u32] {
        &self.probe_ids
    }

    pub fn gallery_ids(&self) -> &[u32] {
        &self.gallery_ids
    }

    /// Gallery indices for probe `p`, best first; equal scores keep gallery
    /// order.
    pub fn ranking(&self, p: usize) -> Vec<usize> {
        let row = self.scores.row(p);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| match row[b].total_cmp(&row[a]) {
            Ordering::Equal => a.cmp(&b),
            o => o,
        });
        order
    }

    /// Ranked relevance list of probe `p`.
    pub fn relevance(&self, p: usize) -> Vec<bool> {
        let id = self.probe_ids[p];
        self.ranking(p)
            .into_iter()
            .map(|g| self.gallery_ids[g] == id)
            .collect()
    }
}

/// `curve[r]` is the fraction of probes whose first correct gallery entry
/// sits at rank `r + 1` or better. Probes without any correct entry are
/// skipped with a warning.
pub fn cmc(matrix: &ScoreMatrix, max_rank: usize) -> Result<Vec<f64>> {
    if max_rank == 0 {
        return Err(ScanError::Contract("max_rank must be >= 1".into()));
    }
    let mut hits = vec![0usize; max_rank];
    let mut counted = 0usize;
    for p in 0..matrix.probe_ids.len() {
        match matrix.relevance(p).iter().position(|&r| r) {
            Some(rank) => {
                counted += 1;
                if rank < max_rank {
                    hits[rank] += 1;
                }
            }
            None => warn!(
                "probe {p} (identity {}) has no gallery match; excluded",
                matrix.probe_ids[p]
            ),
        }
    }
    if counted == 0 {
        return Err(ScanError::Contract(
            "no probe has a matching gallery entry".into(),
        ));
    }
    let mut curve = Vec::with_capacity(max_rank);
    let mut cum = 0usize;
    for h in hits {
        cum += h;
        curve.push(cum as f64 / counted as f64);
    }
    Ok(curve)
}

/// `AP = (1 / sum r) * sum_i r_i * (sum_{j <= i} r_j) / i` over a ranked
/// relevance list.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let mut found = 0usize;
    let mut acc = 0.0;
    for (i, &r) in relevance.iter().enumerate() {
        if r {
            found += 1;
            acc += found as f64 / (i + 1) as f64;
        }
    }
    if found == 0 {
        return Err(ScanError::Contract(
            "average precision needs a relevant item".into(),
        ));
    }
    Ok(acc / found as f64)
}

pub fn mean_average_precision(matrix: &ScoreMatrix) -> Result<f64> {
    let n = matrix.probe_ids.len();
    if n == 0 {
        return Err(ScanError::Contract("mAP over zero probes".into()));
    }
    let mut sum = 0.0;
    for p in 0..n {
        sum += average_precision(&matrix.relevance(p))?;
    }
    Ok(sum / n as f64)
}

/// Metrics document written by `eval`, `ablate` and `sweep-ensemble`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub top20: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc_curve: Vec<f64>,
    pub ensemble_rate: f64,
    pub probes: usize,
    pub gallery: usize,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn from_matrix(matrix: &ScoreMatrix, ensemble_rate: f64, config: serde_json::Value) -> Result<Self> {
        let curve = cmc(matrix, matrix.gallery_ids.len().max(1))?;
        let at = |k: usize| curve[(k - 1).min(curve.len() - 1)];
        Ok(Self {
            top1: at(1),
            top5: at(5),
            top10: at(10),
            top20: at(20),
            map: mean_average_precision(matrix)?,
            cmc_curve: curve,
            ensemble_rate,
            probes: matrix.probe_ids.len(),
            gallery: matrix.gallery_ids.len(),
            config,
        })
    }

    /// `rank,accuracy` rows, ranks from 1.
    pub fn cmc_csv(&self) -> String {
        let mut out = String::from("rank,accuracy\n");
        for (i, v) in self.cmc_curve.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, v));
        }
        out
    }
}

/// Clip-pair scores for every probe/gallery sequence pair, kept so that
/// several ensemble rates can be evaluated from one scoring pass.
#[derive(Clone, Debug)]
pub struct ClipScoreTable {
    pub probe_ids: Vec<u32>,
    pub gallery_ids: Vec<u32>,
    /// `pairs[p][g]` holds the clip-pair probabilities.
    pub pairs: Vec<Vec<Vec<f64>>>,
}

impl ClipScoreTable {
    pub fn score_matrix(&self, rate: f64) -> Result<ScoreMatrix> {
        let mut scores = Matrix::zeros(self.probe_ids.len(), self.gallery_ids.len());
        for (p, row) in self.pairs.iter().enumerate() {
            for (g, clip_scores) in row.iter().enumerate() {
                scores.set(p, g, ensemble_score(clip_scores, rate)?);
            }
        }
        ScoreMatrix::new(scores, self.probe_ids.clone(), self.gallery_ids.clone())
    }
}

/// Probes are the sequences from the lowest camera id; the gallery is every
/// sequence from the other cameras. Probes whose identity is absent from
/// the gallery are dropped with a warning.
pub fn probe_gallery_split(dataset: &Dataset) -> Result<(Vec<&SequenceRecord>, Vec<&SequenceRecord>)> {
    let probe_cam = *dataset
        .cameras()
        .first()
        .ok_or_else(|| ScanError::Contract("evaluation set is empty".into()))?;
    let (probes, gallery): (Vec<_>, Vec<_>) = dataset.records.iter().partition(|r| r.camera == probe_cam);
    if gallery.is_empty() {
        return Err(ScanError::Contract(
            "evaluation needs at least two cameras".into(),
        ));
    }
    let probes = probes
        .into_iter()
        .filter(|p| {
            let ok = gallery.iter().any(|g| g.identity == p.identity);
            if !ok {
                warn!("probe identity {} has no gallery sequence; dropped", p.identity);
            }
            ok
        })
        .collect::<Vec<_>>();
    if probes.is_empty() {
        return Err(ScanError::Contract("no probe has a gallery match".into()));
    }
    Ok((probes, gallery))
}

pub fn score_dataset(params: &ModelParams, dataset: &Dataset, cfg: &EvalConfig) -> Result<ClipScoreTable> {
    cfg.validate()?;
    let (probes, gallery) = probe_gallery_split(dataset)?;
    let encode = |r: &&SequenceRecord| encode_sequence(params, r, cfg);
    let probe_enc: Vec<EncodedSequence> = probes.iter().map(encode).collect::<Result<_>>()?;
    let gallery_enc: Vec<EncodedSequence> = gallery.iter().map(encode).collect::<Result<_>>()?;
    let pairs = probe_enc
        .iter()
        .map(|p| {
            gallery_enc
                .iter()
                .map(|g| clip_pair_scores(params, p, g))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(ClipScoreTable {
        probe_ids: probe_enc.iter().map(|p| p.identity).collect(),
        gallery_ids: gallery_enc.iter().map(|g| g.identity).collect(),
        pairs,
    })
}

pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    cfg: &EvalConfig,
    config_echo: serde_json::Value,
) -> Result<MetricsReport> {
    let table = score_dataset(params, dataset, cfg)?;
    MetricsReport::from_matrix(
        &table.score_matrix(cfg.ensemble_rate)?,
        cfg.ensemble_rate,
        config_echo,
    )
}
