//! Sequences, clip segmentation and training batch construction.

mod scnf;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScanError};
use crate::numkit::Matrix;

pub use scnf::{
    decode_features, encode_features, read_features, read_manifest, read_record, write_features,
    FeatureManifest, ManifestRecord,
};
pub use synth::{synthesize, synthesize_with_truth, SyntheticConfig, SyntheticTruth};

pub const DEFAULT_CLIP_LEN: usize = 10;
pub const DEFAULT_STRIDE: usize = 5;
pub const DEFAULT_IDS_PER_BATCH: usize = 16;
pub const DEFAULT_CLIPS_PER_ID: usize = 2;

/// Per-frame features of one identity seen by one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub identity: u32,
    pub camera: u32,
    /// `T x d` frame features.
    pub features: Matrix,
}

impl SequenceRecord {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

/// A collection of sequences sharing one feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub records: Vec<SequenceRecord>,
}

impl Dataset {
    pub fn new(feature_dim: usize, records: Vec<SequenceRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.features.cols() != feature_dim {
                return Err(ScanError::dim(
                    "Dataset::new",
                    format!("feature_dim {feature_dim}"),
                    format!("{} in record {i}", r.features.cols()),
                ));
            }
            if r.frames() == 0 {
                return Err(ScanError::Contract(format!("record {i} has no frames")));
            }
        }
        Ok(Self { feature_dim, records })
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn identities(&self) -> Vec<u32> {
        self.records
            .iter()
            .map(|r| r.identity)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn cameras(&self) -> Vec<u32> {
        self.records
            .iter()
            .map(|r| r.camera)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Splits by identity: the first `ceil(fraction * n)` identities in
    /// ascending label order go to the training half.
    pub fn split_identities(&self, train_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(ScanError::Config(format!(
                "train fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        let ids = self.identities();
        let n_train = ((ids.len() as f64) * train_fraction).ceil() as usize;
        let train_ids: BTreeSet<u32> = ids.iter().take(n_train).copied().collect();
        let (train, test): (Vec<_>, Vec<_>) = self
            .records
            .iter()
            .cloned()
            .partition(|r| train_ids.contains(&r.identity));
        Ok((
            Dataset::new(self.feature_dim, train)?,
            Dataset::new(self.feature_dim, test)?,
        ))
    }
}

/// Clip start offsets over a sequence of `frames` frames.
///
/// Windows of `clip_len` start every `stride` frames; leftover tail frames
/// are dropped. A sequence shorter than one window yields a single clip
/// covering all of it.
#[allow(clippy::single_range_in_vec_init)]
pub fn segment(frames: usize, clip_len: usize, stride: usize) -> Vec<Range<usize>> {
    if frames == 0 || clip_len == 0 || stride == 0 {
        return Vec::new();
    }
    if frames < clip_len {
        return vec![0..frames];
    }
    (0..=frames - clip_len)
        .step_by(stride)
        .map(|start| start..start + clip_len)
        .collect()
}

/// A window into one record of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipIndex {
    pub sequence: usize,
    pub start: usize,
    pub length: usize,
    pub identity: u32,
    pub camera: u32,
}

impl ClipIndex {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.length
    }

    /// Copies the clip's frames out of `dataset`.
    pub fn frames(&self, dataset: &Dataset) -> Result<Matrix> {
        let record = dataset.records.get(self.sequence).ok_or_else(|| {
            ScanError::Contract(format!("clip refers to missing sequence {}", self.sequence))
        })?;
        record.features.slice_rows(self.start, self.length)
    }
}

/// All clips of a dataset grouped by identity.
#[derive(Clone, Debug)]
pub struct ClipCatalog {
    by_identity: BTreeMap<u32, Vec<ClipIndex>>,
    camera_count: usize,
}

impl ClipCatalog {
    pub fn build(dataset: &Dataset, clip_len: usize, stride: usize) -> Self {
        let mut by_identity: BTreeMap<u32, Vec<ClipIndex>> = BTreeMap::new();
        for (sequence, record) in dataset.records.iter().enumerate() {
            for range in segment(record.frames(), clip_len, stride) {
                by_identity.entry(record.identity).or_default().push(ClipIndex {
                    sequence,
                    start: range.start,
                    length: range.len(),
                    identity: record.identity,
                    camera: record.camera,
                });
            }
        }
        Self {
            by_identity,
            camera_count: dataset.cameras().len(),
        }
    }

    pub fn identity_count(&self) -> usize {
        self.by_identity.len()
    }

    pub fn clip_count(&self) -> usize {
        self.by_identity.values().map(Vec::len).sum()
    }

    pub fn camera_count(&self) -> usize {
        self.camera_count
    }

    pub fn clips_of(&self, identity: u32) -> &[ClipIndex] {
        self.by_identity.get(&identity).map_or(&[], Vec::as_slice)
    }

    pub fn identities(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_identity.keys().copied()
    }
}

/// Picks `count` clips, spreading picks across cameras when possible and
/// falling back to sampling with replacement when the identity owns fewer
/// clips than requested.
fn pick_clips<R: Rng>(clips: &[ClipIndex], count: usize, rng: &mut R) -> Vec<ClipIndex> {
    if clips.len() < count {
        let mut out = clips.to_vec();
        while out.len() < count {
            out.push(*clips.choose(rng).expect("identity with no clips"));
        }
        return out;
    }
    let mut per_camera: BTreeMap<u32, Vec<ClipIndex>> = BTreeMap::new();
    for c in clips {
        per_camera.entry(c.camera).or_default().push(*c);
    }
    let mut pools: Vec<Vec<ClipIndex>> = per_camera.into_values().collect();
    pools.shuffle(rng);
    for pool in &mut pools {
        pool.shuffle(rng);
    }
    let mut out = Vec::with_capacity(count);
    let mut turn = 0;
    while out.len() < count {
        let n = pools.len();
        if let Some(clip) = pools[turn % n].pop() {
            out.push(clip);
        }
        turn += 1;
    }
    out
}

/// Draws `ids_per_batch` identities without replacement and
/// `clips_per_id` clips from each; the result is shuffled.
pub fn sample_batch<R: Rng>(
    catalog: &ClipCatalog,
    rng: &mut R,
    ids_per_batch: usize,
    clips_per_id: usize,
) -> Result<Vec<ClipIndex>> {
    if catalog.identity_count() < ids_per_batch {
        return Err(ScanError::Contract(format!(
            "batch needs {ids_per_batch} identities, dataset has {}",
            catalog.identity_count()
        )));
    }
    let mut ids: Vec<u32> = catalog.identities().collect();
    ids.shuffle(rng);
    let mut batch = Vec::with_capacity(ids_per_batch * clips_per_id);
    for &id in &ids[..ids_per_batch] {
        let clips = catalog.clips_of(id);
        if clips.is_empty() {
            return Err(ScanError::Contract(format!("identity {id} has no clips")));
        }
        batch.extend(pick_clips(clips, clips_per_id, rng));
    }
    batch.shuffle(rng);
    Ok(batch)
}

/// A labelled probe/gallery pair referencing positions in a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub probe: ClipIndex,
    pub gallery: ClipIndex,
    pub probe_slot: usize,
    pub gallery_slot: usize,
    pub label: bool,
}

fn orient<R: Rng>(batch: &[ClipIndex], i: usize, j: usize, label: bool, rng: &mut R) -> PairSample {
    let (p, g) = if rng.gen_bool(0.5) { (i, j) } else { (j, i) };
    PairSample {
        probe: batch[p],
        gallery: batch[g],
        probe_slot: p,
        gallery_slot: g,
        label,
    }
}

/// Every distinct same-identity clip pair plus an equal number of
/// cross-identity pairs drawn uniformly. When the batch spans two or more
/// cameras, pairs must cross cameras. Probe/gallery orientation is random.
pub fn pair_batch<R: Rng>(batch: &[ClipIndex], rng: &mut R) -> Vec<PairSample> {
    let cross_camera = batch.iter().map(|c| c.camera).collect::<BTreeSet<_>>().len() >= 2;
    let admissible = |i: usize, j: usize| !cross_camera || batch[i].camera != batch[j].camera;

    let mut positives = Vec::new();
    let mut negative_pool = Vec::new();
    for i in 0..batch.len() {
        for j in i + 1..batch.len() {
            if !admissible(i, j) {
                continue;
            }
            if batch[i].identity == batch[j].identity {
                if batch[i] != batch[j] {
                    positives.push((i, j));
                }
            } else {
                negative_pool.push((i, j));
            }
        }
    }

    let identities = batch.iter().map(|c| c.identity).collect::<BTreeSet<_>>().len();
    if identities < 2 {
        warn!("batch holds a single identity; emitting positive pairs only");
    }
    let n_neg = positives.len().min(negative_pool.len());
    let picked = index::sample(rng, negative_pool.len(), n_neg);

    let mut pairs = Vec::with_capacity(positives.len() + n_neg);
    for (i, j) in positives {
        pairs.push(orient(batch, i, j, true, rng));
    }
    for k in picked.iter() {
        let (i, j) = negative_pool[k];
        pairs.push(orient(batch, i, j, false, rng));
    }
    pairs
}
