//! Self and collaborative temporal attention.
//!
//! Both subnetworks are parameter free: a correlation between per-frame keys
//! and a query vector gives logits, a softmax over the temporal axis turns
//! them into per-dimension frame weights, and the weights pool the frame
//! features. The self branch queries with the clip's own pooled keys; the
//! collaborative branch queries with the partner clip's self-attended
//! descriptor.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScanError};
use crate::numkit::{
    column_mean, column_mean_backward, dot, softmax_temporal, softmax_temporal_backward, weighted_sum,
    weighted_sum_backward, Matrix, Vector,
};

/// How frame keys are correlated with the query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationMode {
    /// Per-dimension product; each feature dimension gets its own temporal weights.
    Hadamard,
    /// Whole-frame inner product broadcast to every dimension.
    Dot,
}

/// Correlation function settings. The temperature divides the logits and is
/// 1.0 unless explicitly changed for experiments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub mode: CorrelationMode,
    pub temperature: f64,
}

impl Default for Correlation {
    fn default() -> Self {
        Self {
            mode: CorrelationMode::Hadamard,
            temperature: 1.0,
        }
    }
}

impl Correlation {
    pub fn new(mode: CorrelationMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }
}

/// Raw backbone features of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatures {
    pub raw: Matrix,
    pub identity: u32,
    pub camera: u32,
}

/// The three projections of a clip's frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedClip {
    /// fc-0 output, the features that get pooled.
    pub f_feat: Matrix,
    /// fc-1 output, keys for self attention.
    pub s_feat: Matrix,
    /// fc-2 output, keys for collaborative attention.
    pub c_feat: Matrix,
}

impl ProjectedClip {
    pub fn new(f_feat: Matrix, s_feat: Matrix, c_feat: Matrix) -> Result<Self> {
        if f_feat.shape() != s_feat.shape() || f_feat.shape() != c_feat.shape() {
            return Err(ScanError::dim(
                "ProjectedClip::new",
                format!("{:?} for all projections", f_feat.shape()),
                format!("{:?} / {:?}", s_feat.shape(), c_feat.shape()),
            ));
        }
        if f_feat.rows() == 0 {
            return Err(ScanError::Contract("a clip needs at least one frame".into()));
        }
        Ok(Self {
            f_feat,
            s_feat,
            c_feat,
        })
    }

    pub fn frames(&self) -> usize {
        self.f_feat.rows()
    }

    pub fn width(&self) -> usize {
        self.f_feat.cols()
    }

    /// Reorders frames in all three projections.
    pub fn permute_frames(&self, order: &[usize]) -> Self {
        Self {
            f_feat: self.f_feat.permute_rows(order),
            s_feat: self.s_feat.permute_rows(order),
            c_feat: self.c_feat.permute_rows(order),
        }
    }
}

/// Column-normalized temporal weights, `T x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub coeffs: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    PooledSelf,
    SelfAttended,
    CollabAttended,
}

/// A sequence-level vector together with the branch that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDescriptor {
    pub vec: Vector,
    pub role: Role,
}

fn correlation_logits(keys: &Matrix, query: &Vector, corr: &Correlation) -> Result<Matrix> {
    if keys.cols() != query.len() {
        return Err(ScanError::dim("correlate", keys.cols(), query.len()));
    }
    let inv_temp = 1.0 / corr.temperature;
    let q = query.as_slice();
    let mut logits = Matrix::zeros(keys.rows(), keys.cols());
    match corr.mode {
        CorrelationMode::Hadamard => {
            for t in 0..keys.rows() {
                for ((dst, k), qd) in logits.row_mut(t).iter_mut().zip(keys.row(t)).zip(q) {
                    *dst = k * qd * inv_temp;
                }
            }
        }
        CorrelationMode::Dot => {
            for t in 0..keys.rows() {
                let s = dot(keys.row(t), q) * inv_temp;
                logits.row_mut(t).fill(s);
            }
        }
    }
    Ok(logits)
}

/// Gradient of the correlation logits with respect to `(keys, query)`.
fn correlation_backward(
    keys: &Matrix,
    query: &Vector,
    corr: &Correlation,
    grad_logits: &Matrix,
) -> (Matrix, Vector) {
    let inv_temp = 1.0 / corr.temperature;
    let q = query.as_slice();
    let (rows, cols) = keys.shape();
    let mut grad_keys = Matrix::zeros(rows, cols);
    let mut grad_query = vec![0.0; cols];
    match corr.mode {
        CorrelationMode::Hadamard => {
            for t in 0..rows {
                let g = grad_logits.row(t);
                let k = keys.row(t);
                let gk = grad_keys.row_mut(t);
                for d in 0..cols {
                    gk[d] = g[d] * q[d] * inv_temp;
                    grad_query[d] += g[d] * k[d] * inv_temp;
                }
            }
        }
        CorrelationMode::Dot => {
            for t in 0..rows {
                let g_row: f64 = grad_logits.row(t).iter().sum::<f64>() * inv_temp;
                let k = keys.row(t);
                let gk = grad_keys.row_mut(t);
                for d in 0..cols {
                    gk[d] = g_row * q[d];
                    grad_query[d] += g_row * k[d];
                }
            }
        }
    }
    (grad_keys, Vector::from(grad_query))
}

/// The parameter-free correlation function: logits from `frames` and
/// `query`, normalized by a temporal softmax.
pub fn correlate(frames: &Matrix, query: &Vector, corr: &Correlation) -> Result<AttentionWeights> {
    let logits = correlation_logits(frames, query, corr)?;
    Ok(AttentionWeights {
        coeffs: softmax_temporal(&logits),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttendKind {
    SelfAttention,
    Collaborative,
}

/// Everything the backward pass of one attention application needs.
///
/// [`attend_backward`] consumes the record so it can only be used once.
#[derive(Clone, Debug)]
pub struct AttendRecord {
    pub kind: AttendKind,
    frames: Matrix,
    keys: Matrix,
    query: Vector,
    weights: Matrix,
    corr: Correlation,
}

impl AttendRecord {
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn query(&self) -> &Vector {
        &self.query
    }
}

/// Gradients flowing out of one attention application.
#[derive(Clone, Debug)]
pub struct AttendGrads {
    /// With respect to the pooled features (fc-0 output).
    pub grad_frames: Matrix,
    /// With respect to the keys (fc-1 output for self attention, fc-2 for
    /// collaborative). For self attention this includes the path through the
    /// pooled query.
    pub grad_keys: Matrix,
    /// With respect to the query vector. For self attention the query is the
    /// pooled keys and this term is already folded into `grad_keys`; for
    /// collaborative attention it belongs to the partner descriptor.
    pub grad_query: Vector,
}

fn attend(frames: &Matrix, keys: &Matrix, query: &Vector, corr: &Correlation) -> Result<(Vector, Matrix)> {
    if frames.shape() != keys.shape() {
        return Err(ScanError::dim(
            "attend",
            format!("{:?}", frames.shape()),
            format!("{:?}", keys.shape()),
        ));
    }
    let weights = correlate(keys, query, corr)?.coeffs;
    let desc = weighted_sum(&weights, frames)?;
    Ok((desc, weights))
}

/// Self attention over one clip: pool the fc-1 keys into a query, weight the
/// frames by their correlation with it, and sum the fc-0 features.
pub fn self_attend(
    clip: &ProjectedClip,
    corr: &Correlation,
) -> Result<(SequenceDescriptor, AttentionWeights)> {
    let query = column_mean(&clip.s_feat);
    let (vec, coeffs) = attend(&clip.f_feat, &clip.s_feat, &query, corr)?;
    Ok((
        SequenceDescriptor {
            vec,
            role: Role::SelfAttended,
        },
        AttentionWeights { coeffs },
    ))
}

fn check_partner(partner: &SequenceDescriptor) -> Result<()> {
    if partner.role != Role::SelfAttended {
        return Err(ScanError::Contract(format!(
            "collaborative attention needs a self-attended partner descriptor, got {:?}",
            partner.role
        )));
    }
    Ok(())
}

/// Collaborative attention: weight this clip's frames by their fc-2 keys'
/// correlation with the partner's self-attended descriptor.
pub fn collab_attend(
    clip: &ProjectedClip,
    partner: &SequenceDescriptor,
    corr: &Correlation,
) -> Result<(SequenceDescriptor, AttentionWeights)> {
    check_partner(partner)?;
    let (vec, coeffs) = attend(&clip.f_feat, &clip.c_feat, &partner.vec, corr)?;
    Ok((
        SequenceDescriptor {
            vec,
            role: Role::CollabAttended,
        },
        AttentionWeights { coeffs },
    ))
}

/// [`self_attend`] that also returns the backward record.
pub fn self_attend_recorded(
    clip: &ProjectedClip,
    corr: &Correlation,
) -> Result<(SequenceDescriptor, AttendRecord)> {
    let query = column_mean(&clip.s_feat);
    let (vec, weights) = attend(&clip.f_feat, &clip.s_feat, &query, corr)?;
    Ok((
        SequenceDescriptor {
            vec,
            role: Role::SelfAttended,
        },
        AttendRecord {
            kind: AttendKind::SelfAttention,
            frames: clip.f_feat.clone(),
            keys: clip.s_feat.clone(),
            query,
            weights,
            corr: *corr,
        },
    ))
}

/// [`collab_attend`] that also returns the backward record.
pub fn collab_attend_recorded(
    clip: &ProjectedClip,
    partner: &SequenceDescriptor,
    corr: &Correlation,
) -> Result<(SequenceDescriptor, AttendRecord)> {
    check_partner(partner)?;
    let (vec, weights) = attend(&clip.f_feat, &clip.c_feat, &partner.vec, corr)?;
    Ok((
        SequenceDescriptor {
            vec,
            role: Role::CollabAttended,
        },
        AttendRecord {
            kind: AttendKind::Collaborative,
            frames: clip.f_feat.clone(),
            keys: clip.c_feat.clone(),
            query: partner.vec.clone(),
            weights,
            corr: *corr,
        },
    ))
}

/// Backpropagates a descriptor gradient through weighted sum, temporal
/// softmax, correlation and (for self attention) query pooling.
pub fn attend_backward(record: AttendRecord, grad_desc: &Vector) -> Result<AttendGrads> {
    if grad_desc.len() != record.frames.cols() {
        return Err(ScanError::Contract(format!(
            "record is for width {}, gradient has length {}",
            record.frames.cols(),
            grad_desc.len()
        )));
    }
    let (grad_w, grad_frames) = weighted_sum_backward(&record.weights, &record.frames, grad_desc)?;
    let grad_logits = softmax_temporal_backward(&record.weights, &grad_w)?;
    let (mut grad_keys, grad_query) =
        correlation_backward(&record.keys, &record.query, &record.corr, &grad_logits);
    if record.kind == AttendKind::SelfAttention {
        let pooled = column_mean_backward(record.keys.rows(), &grad_query);
        grad_keys.add_assign(&pooled)?;
    }
    Ok(AttendGrads {
        grad_frames,
        grad_keys,
        grad_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_check_flat;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(values: &[f64]) -> Matrix {
        Matrix::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_clip(rng: &mut ChaCha8Rng, t: usize, d: usize) -> ProjectedClip {
        ProjectedClip::new(
            random_matrix(rng, t, d),
            random_matrix(rng, t, d),
            random_matrix(rng, t, d),
        )
        .unwrap()
    }

    fn self_desc(v: &[f64]) -> SequenceDescriptor {
        SequenceDescriptor {
            vec: Vector::from(v.to_vec()),
            role: Role::SelfAttended,
        }
    }

    #[test]
    fn correlate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let frames = random_matrix(&mut rng, 5, 3);
        for mode in [CorrelationMode::Hadamard, CorrelationMode::Dot] {
            let w = correlate(&frames, &Vector::zeros(3), &Correlation::new(mode)).unwrap();
            for &v in w.coeffs.data() {
                assert_abs_diff_eq!(v, 0.2, epsilon = 1e-15);
            }
            let single = random_matrix(&mut rng, 1, 3);
            let w = correlate(
                &single,
                &Vector::from(vec![1.0, 2.0, 3.0]),
                &Correlation::new(mode),
            )
            .unwrap();
            assert!(w.coeffs.data().iter().all(|&v| v == 1.0));
        }
        let w = correlate(
            &col(&[1.0, 3.0]),
            &Vector::from(vec![0.5]),
            &Correlation::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(w.coeffs.get(0, 0), 0.26894, epsilon = 1e-5);
        assert_abs_diff_eq!(w.coeffs.get(1, 0), 0.73106, epsilon = 1e-5);

        assert!(matches!(
            correlate(&frames, &Vector::zeros(2), &Correlation::default()),
            Err(ScanError::Dimension { .. })
        ));
    }

    #[test]
    fn dot_mode_columns_are_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frames = random_matrix(&mut rng, 6, 4);
        let q = Vector::from(vec![0.3, -1.0, 0.8, 0.1]);
        let w = correlate(&frames, &q, &Correlation::new(CorrelationMode::Dot)).unwrap();
        for t in 0..6 {
            let row = w.coeffs.row(t);
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn self_attend_examples() {
        let same = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let clip = ProjectedClip::new(same.clone(), same.clone(), same).unwrap();
        let (d, w) = self_attend(&clip, &Correlation::default()).unwrap();
        assert_abs_diff_eq!(d.vec[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.vec[1], 2.0, epsilon = 1e-15);
        for &v in w.coeffs.data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let single = random_clip(&mut rng, 1, 4);
        for mode in [CorrelationMode::Hadamard, CorrelationMode::Dot] {
            let (d, _) = self_attend(&single, &Correlation::new(mode)).unwrap();
            assert_eq!(d.vec.as_slice(), single.f_feat.row(0));
            assert_eq!(d.role, Role::SelfAttended);
        }

        let clip = ProjectedClip::new(col(&[10.0, 20.0]), col(&[1.0, 3.0]), col(&[0.0, 0.0])).unwrap();
        let (d, w) = self_attend(&clip, &Correlation::default()).unwrap();
        assert_abs_diff_eq!(w.coeffs.get(0, 0), 0.01799, epsilon = 1e-5);
        assert_abs_diff_eq!(w.coeffs.get(1, 0), 0.98201, epsilon = 1e-5);
        assert_abs_diff_eq!(d.vec[0], 19.8201, epsilon = 1e-3);
    }

    #[test]
    fn collab_attend_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let clip = random_clip(&mut rng, 4, 3);
        let (d, _) = collab_attend(&clip, &self_desc(&[0.0, 0.0, 0.0]), &Correlation::default()).unwrap();
        assert!(d.vec.max_abs_diff(&column_mean(&clip.f_feat)) < 1e-15);

        let single = random_clip(&mut rng, 1, 3);
        let (d, _) = collab_attend(&single, &self_desc(&[4.0, -2.0, 1.0]), &Correlation::default()).unwrap();
        assert_eq!(d.vec.as_slice(), single.f_feat.row(0));
        assert_eq!(d.role, Role::CollabAttended);

        let clip = ProjectedClip::new(col(&[2.0, 4.0]), col(&[0.0, 0.0]), col(&[1.0, -1.0])).unwrap();
        let (d, w) = collab_attend(&clip, &self_desc(&[1.0]), &Correlation::default()).unwrap();
        assert_abs_diff_eq!(w.coeffs.get(0, 0), 0.88080, epsilon = 1e-5);
        assert_abs_diff_eq!(w.coeffs.get(1, 0), 0.11920, epsilon = 1e-5);
        assert_abs_diff_eq!(d.vec[0], 2.2384, epsilon = 1e-3);
    }

    #[test]
    fn collab_attend_rejects_wrong_partner_role() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let clip = random_clip(&mut rng, 3, 2);
        let partner = SequenceDescriptor {
            vec: Vector::zeros(2),
            role: Role::CollabAttended,
        };
        assert!(matches!(
            collab_attend(&clip, &partner, &Correlation::default()),
            Err(ScanError::Contract(_))
        ));
    }

    #[test]
    fn backward_zero_and_single_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let clip = random_clip(&mut rng, 4, 3);
        let (_, rec) = self_attend_recorded(&clip, &Correlation::default()).unwrap();
        let g = attend_backward(rec, &Vector::zeros(3)).unwrap();
        assert!(g.grad_frames.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_keys.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_query.as_slice().iter().all(|&v| v == 0.0));

        let single = random_clip(&mut rng, 1, 3);
        let upstream = Vector::from(vec![0.5, -1.0, 2.0]);
        let (_, rec) =
            collab_attend_recorded(&single, &self_desc(&[1.0, 2.0, 3.0]), &Correlation::default()).unwrap();
        let g = attend_backward(rec, &upstream).unwrap();
        assert_eq!(g.grad_frames.row(0), upstream.as_slice());
        assert!(g.grad_keys.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_query.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let clip = random_clip(&mut rng, 2, 3);
        let (_, rec) = self_attend_recorded(&clip, &Correlation::default()).unwrap();
        assert!(matches!(
            attend_backward(rec, &Vector::zeros(2)),
            Err(ScanError::Contract(_))
        ));
    }

    fn flatten(parts: &[&[f64]]) -> Vec<f64> {
        parts.iter().flat_map(|p| p.iter().copied()).collect()
    }

    #[test]
    fn self_attend_backward_matches_finite_differences() {
        for mode in [CorrelationMode::Hadamard, CorrelationMode::Dot] {
            let corr = Correlation::new(mode);
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let (t, d) = (4, 3);
            let clip = random_clip(&mut rng, t, d);
            let upstream = Vector::from((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
            let (_, rec) = self_attend_recorded(&clip, &corr).unwrap();
            let g = attend_backward(rec, &upstream).unwrap();
            let point = flatten(&[clip.f_feat.data(), clip.s_feat.data()]);
            let analytic = flatten(&[g.grad_frames.data(), g.grad_keys.data()]);
            let c_feat = clip.c_feat.clone();
            let report = grad_check_flat(
                "self_attend",
                &point,
                &analytic,
                |p| {
                    let f = Matrix::from_vec(t, d, p[..t * d].to_vec())?;
                    let s = Matrix::from_vec(t, d, p[t * d..].to_vec())?;
                    let (desc, _) = self_attend(&ProjectedClip::new(f, s, c_feat.clone())?, &corr)?;
                    Ok(dot(desc.vec.as_slice(), upstream.as_slice()))
                },
                1e-5,
                1e-5,
            )
            .unwrap();
            assert!(report.pass, "{mode:?}: {report:?}");
        }
    }

    #[test]
    fn collab_attend_backward_matches_finite_differences() {
        for mode in [CorrelationMode::Hadamard, CorrelationMode::Dot] {
            let corr = Correlation::new(mode);
            let mut rng = ChaCha8Rng::seed_from_u64(18);
            let (t, d) = (4, 3);
            let clip = random_clip(&mut rng, t, d);
            let partner: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let upstream = Vector::from((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
            let (_, rec) = collab_attend_recorded(&clip, &self_desc(&partner), &corr).unwrap();
            let g = attend_backward(rec, &upstream).unwrap();
            let point = flatten(&[clip.f_feat.data(), clip.c_feat.data(), &partner]);
            let analytic = flatten(&[g.grad_frames.data(), g.grad_keys.data(), g.grad_query.as_slice()]);
            let s_feat = clip.s_feat.clone();
            let report = grad_check_flat(
                "collab_attend",
                &point,
                &analytic,
                |p| {
                    let f = Matrix::from_vec(t, d, p[..t * d].to_vec())?;
                    let c = Matrix::from_vec(t, d, p[t * d..2 * t * d].to_vec())?;
                    let clip = ProjectedClip::new(f, s_feat.clone(), c)?;
                    let (desc, _) = collab_attend(&clip, &self_desc(&p[2 * t * d..]), &corr)?;
                    Ok(dot(desc.vec.as_slice(), upstream.as_slice()))
                },
                1e-5,
                1e-5,
            )
            .unwrap();
            assert!(report.pass, "{mode:?}: {report:?}");
        }
    }

    #[test]
    fn tiny_query_recovers_average_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut clip = random_clip(&mut rng, 6, 4);
        clip.s_feat.scale(1e-9);
        let (d, _) = self_attend(&clip, &Correlation::default()).unwrap();
        assert!(d.vec.max_abs_diff(&column_mean(&clip.f_feat)) <= 1e-6);
    }
}
