//! Pairwise similarity feature, fc-3 scoring, pooling baselines and the
//! generalized linear similarity used as a metric-learning reference.

use serde::{Deserialize, Serialize};

use crate::attention::{ProjectedClip, Role, SequenceDescriptor};
use crate::error::{Result, ScanError};
use crate::numkit::{column_max, column_mean, dot, LinearLayer, Matrix, Vector};

/// Gated difference vector fed to the binary classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityFeature {
    pub s: Vector,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchScore {
    pub logit: f64,
    pub probability: f64,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn expect_role(desc: &SequenceDescriptor, role: Role, slot: &str) -> Result<()> {
    if desc.role != role {
        return Err(ScanError::Contract(format!(
            "{slot} must be {role:?}, got {:?}",
            desc.role
        )));
    }
    Ok(())
}

/// `s = (x_xx - y_yy) ∘ (x_yx - y_xy)` for the full two-branch model.
pub fn similarity_feature(
    x_xx: &SequenceDescriptor,
    y_yy: &SequenceDescriptor,
    x_yx: &SequenceDescriptor,
    y_xy: &SequenceDescriptor,
) -> Result<SimilarityFeature> {
    expect_role(x_xx, Role::SelfAttended, "x_xx")?;
    expect_role(y_yy, Role::SelfAttended, "y_yy")?;
    expect_role(x_yx, Role::CollabAttended, "x_yx")?;
    expect_role(y_xy, Role::CollabAttended, "y_xy")?;
    gated_difference(&x_xx.vec, &y_yy.vec, &x_yx.vec, &y_xy.vec)
}

/// `(a - b) ∘ (u - v)` without role checks; the ablation variants put
/// pooled or self descriptors in the collaborative slots.
pub fn gated_difference(a: &Vector, b: &Vector, u: &Vector, v: &Vector) -> Result<SimilarityFeature> {
    let n = a.len();
    if b.len() != n || u.len() != n || v.len() != n {
        return Err(ScanError::dim(
            "similarity_feature",
            format!("four descriptors of length {n}"),
            format!("lengths {}, {}, {}", b.len(), u.len(), v.len()),
        ));
    }
    let s = (0..n).map(|d| (a[d] - b[d]) * (u[d] - v[d])).collect::<Vec<_>>();
    Ok(SimilarityFeature { s: Vector::from(s) })
}

/// Gradients of `(a - b) ∘ (u - v)` for the four slots, in order.
pub fn gated_difference_backward(
    a: &Vector,
    b: &Vector,
    u: &Vector,
    v: &Vector,
    grad_s: &Vector,
) -> [Vector; 4] {
    let n = a.len();
    let mut ga = vec![0.0; n];
    let mut gu = vec![0.0; n];
    for d in 0..n {
        ga[d] = grad_s[d] * (u[d] - v[d]);
        gu[d] = grad_s[d] * (a[d] - b[d]);
    }
    let gb = ga.iter().map(|g| -g).collect::<Vec<_>>();
    let gv = gu.iter().map(|g| -g).collect::<Vec<_>>();
    [
        Vector::from(ga),
        Vector::from(gb),
        Vector::from(gu),
        Vector::from(gv),
    ]
}

/// Final fc-3 layer plus sigmoid.
pub fn match_score(s: &SimilarityFeature, fc3: &LinearLayer) -> Result<MatchScore> {
    if fc3.out_dim() != 1 || fc3.in_dim() != s.s.len() {
        return Err(ScanError::dim(
            "match_score",
            format!("fc3 of shape {}x1", s.s.len()),
            format!("{}x{}", fc3.in_dim(), fc3.out_dim()),
        ));
    }
    let logit = dot(s.s.as_slice(), fc3.weight.data()) + fc3.bias[0];
    Ok(MatchScore {
        logit,
        probability: sigmoid(logit),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    Avg,
    Max,
}

/// Temporal pooling of the fc-0 features, used where a variant replaces an
/// attention branch. The result stands in for a self-attended descriptor.
pub fn pool_baseline(clip: &ProjectedClip, mode: PoolMode) -> SequenceDescriptor {
    let vec = match mode {
        PoolMode::Avg => column_mean(&clip.f_feat),
        PoolMode::Max => column_max(&clip.f_feat).0,
    };
    SequenceDescriptor {
        vec,
        role: Role::SelfAttended,
    }
}

/// Factor matrices of the generalized linear similarity
/// `xᵀAx − yᵀDx + yᵀBy − xᵀCy` with `A = ÃᵀÃ`, `B = B̃ᵀB̃`, `C = C̃xᵀC̃y`
/// and `D = D̃yᵀD̃x`. Every factor is `k x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralizedLinearParams {
    pub a_half: Matrix,
    pub b_half: Matrix,
    pub cx_half: Matrix,
    pub cy_half: Matrix,
    pub dx_half: Matrix,
    pub dy_half: Matrix,
}

impl GeneralizedLinearParams {
    /// The setting `A = B = C = M`, `D = Mᵀ` with `M = LᵀL`.
    pub fn mahalanobis(factor: &Matrix) -> Self {
        Self {
            a_half: factor.clone(),
            b_half: factor.clone(),
            cx_half: factor.clone(),
            cy_half: factor.clone(),
            dx_half: factor.clone(),
            dy_half: factor.clone(),
        }
    }

    pub fn zeros(k: usize, n: usize) -> Self {
        Self::mahalanobis(&Matrix::zeros(k, n))
    }

    fn check(&self, n: usize) -> Result<()> {
        let shape = self.a_half.shape();
        for (name, m) in [
            ("B̃", &self.b_half),
            ("C̃x", &self.cx_half),
            ("C̃y", &self.cy_half),
            ("D̃x", &self.dx_half),
            ("D̃y", &self.dy_half),
        ] {
            if m.shape() != shape {
                return Err(ScanError::dim(
                    "generalized_similarity",
                    format!("{name} of shape {shape:?}"),
                    format!("{:?}", m.shape()),
                ));
            }
        }
        if shape.1 != n {
            return Err(ScanError::dim("generalized_similarity", shape.1, n));
        }
        Ok(())
    }

    /// Expands the factors into `(A, B, C, D)`.
    pub fn full_matrices(&self) -> Result<(Matrix, Matrix, Matrix, Matrix)> {
        Ok((
            self.a_half.transpose().matmul(&self.a_half)?,
            self.b_half.transpose().matmul(&self.b_half)?,
            self.cx_half.transpose().matmul(&self.cy_half)?,
            self.dy_half.transpose().matmul(&self.dx_half)?,
        ))
    }
}

/// Evaluates the generalized linear similarity as
/// `[‖Ãx‖² − (D̃y y)ᵀ(D̃x x)] + [‖B̃y‖² − (C̃x x)ᵀ(C̃y y)]`.
pub fn generalized_similarity(x: &Vector, y: &Vector, p: &GeneralizedLinearParams) -> Result<f64> {
    if x.len() != y.len() {
        return Err(ScanError::dim("generalized_similarity", x.len(), y.len()));
    }
    p.check(x.len())?;
    let (x, y) = (x.as_slice(), y.as_slice());
    let ax = p.a_half.matvec(x)?;
    let dyy = p.dy_half.matvec(y)?;
    let dxx = p.dx_half.matvec(x)?;
    let part_a = dot(ax.as_slice(), ax.as_slice()) - dot(dyy.as_slice(), dxx.as_slice());
    let by = p.b_half.matvec(y)?;
    let cxx = p.cx_half.matvec(x)?;
    let cyy = p.cy_half.matvec(y)?;
    let part_b = dot(by.as_slice(), by.as_slice()) - dot(cxx.as_slice(), cyy.as_slice());
    Ok(part_a + part_b)
}

/// `(x − y)ᵀ M (x − y)`.
pub fn mahalanobis(x: &Vector, y: &Vector, m: &Matrix) -> Result<f64> {
    let n = x.len();
    if y.len() != n || m.shape() != (n, n) {
        return Err(ScanError::dim(
            "mahalanobis",
            format!("vectors of length {n} and a {n}x{n} matrix"),
            format!("y of length {} and {:?}", y.len(), m.shape()),
        ));
    }
    let diff: Vec<f64> = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    let md = m.matvec(&diff)?;
    Ok(dot(&diff, md.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desc(v: &[f64], role: Role) -> SequenceDescriptor {
        SequenceDescriptor {
            vec: Vector::from(v.to_vec()),
            role,
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vector {
        Vector::from((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>())
    }

    #[test]
    fn similarity_feature_examples() {
        let xs = desc(&[0.3, -1.0], Role::SelfAttended);
        let xc = desc(&[2.0, 0.5], Role::CollabAttended);
        let s = similarity_feature(&xs, &xs, &xc, &xc).unwrap();
        assert!(s.s.as_slice().iter().all(|&v| v == 0.0));

        let x_xx = desc(&[1.0, -2.0], Role::SelfAttended);
        let y_yy = desc(&[0.0, 0.0], Role::SelfAttended);
        let x_yx = desc(&[3.0, 4.0], Role::CollabAttended);
        let y_xy = desc(&[0.0, 0.0], Role::CollabAttended);
        let s = similarity_feature(&x_xx, &y_yy, &x_yx, &y_xy).unwrap();
        assert_eq!(s.s.as_slice(), &[3.0, -8.0]);

        let swapped = similarity_feature(&y_yy, &x_xx, &y_xy, &x_yx).unwrap();
        assert_eq!(swapped.s, s.s);
    }

    #[test]
    fn similarity_feature_checks_roles_and_shapes() {
        let a = desc(&[1.0], Role::SelfAttended);
        let c = desc(&[1.0], Role::CollabAttended);
        assert!(matches!(
            similarity_feature(&c, &a, &c, &c),
            Err(ScanError::Contract(_))
        ));
        let long = desc(&[1.0, 2.0], Role::CollabAttended);
        assert!(matches!(
            similarity_feature(&a, &a, &c, &long),
            Err(ScanError::Dimension { .. })
        ));
    }

    #[test]
    fn gated_difference_backward_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let v: Vec<Vector> = (0..4).map(|_| random_vector(&mut rng, 3)).collect();
        let g = random_vector(&mut rng, 3);
        let grads = gated_difference_backward(&v[0], &v[1], &v[2], &v[3], &g);
        let h = 1e-6;
        for slot in 0..4 {
            for d in 0..3 {
                let mut plus = v.clone();
                plus[slot][d] += h;
                let mut minus = v.clone();
                minus[slot][d] -= h;
                let f = |w: &[Vector]| {
                    dot(
                        gated_difference(&w[0], &w[1], &w[2], &w[3]).unwrap().s.as_slice(),
                        g.as_slice(),
                    )
                };
                let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                assert_abs_diff_eq!(grads[slot][d], numeric, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn match_score_examples() {
        let zero = SimilarityFeature { s: Vector::zeros(2) };
        let fc3 = LinearLayer::new(Matrix::from_rows(&[[0.4], [-3.0]]).unwrap(), Vector::zeros(1)).unwrap();
        assert_eq!(match_score(&zero, &fc3).unwrap().probability, 0.5);

        let biased = LinearLayer::new(fc3.weight.clone(), Vector::from(vec![1.7])).unwrap();
        let m = match_score(&zero, &biased).unwrap();
        assert_eq!(m.logit, 1.7);
        assert_abs_diff_eq!(m.probability, sigmoid(1.7), epsilon = 1e-15);

        let s = SimilarityFeature {
            s: Vector::from(vec![1.0, 2.0]),
        };
        let fc3 = LinearLayer::new(
            Matrix::from_rows(&[[1.0], [-1.0]]).unwrap(),
            Vector::from(vec![0.5]),
        )
        .unwrap();
        let m = match_score(&s, &fc3).unwrap();
        assert_abs_diff_eq!(m.logit, -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.probability, 0.37754, epsilon = 1e-5);

        assert!(match_score(&s, &LinearLayer::zeros(2, 2)).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_abs_diff_eq!(sigmoid(1.0) + sigmoid(-1.0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn pool_baseline_examples() {
        let f = Matrix::from_rows(&[[1.0, 5.0], [3.0, 2.0]]).unwrap();
        let clip = ProjectedClip::new(f.clone(), f.clone(), f).unwrap();
        assert_eq!(pool_baseline(&clip, PoolMode::Avg).vec.as_slice(), &[2.0, 3.5]);
        assert_eq!(pool_baseline(&clip, PoolMode::Max).vec.as_slice(), &[3.0, 5.0]);
        let swapped = clip.permute_frames(&[1, 0]);
        assert_eq!(pool_baseline(&swapped, PoolMode::Avg).vec.as_slice(), &[2.0, 3.5]);
        assert_eq!(pool_baseline(&swapped, PoolMode::Max).vec.as_slice(), &[3.0, 5.0]);

        let one = Matrix::from_rows(&[[7.0, -1.0]]).unwrap();
        let clip = ProjectedClip::new(one.clone(), one.clone(), one).unwrap();
        for mode in [PoolMode::Avg, PoolMode::Max] {
            assert_eq!(pool_baseline(&clip, mode).vec.as_slice(), &[7.0, -1.0]);
        }
    }

    #[test]
    fn generalized_similarity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_vector(&mut rng, 3);
        let y = random_vector(&mut rng, 3);
        assert_eq!(
            generalized_similarity(&x, &y, &GeneralizedLinearParams::zeros(2, 3)).unwrap(),
            0.0
        );

        let factor = random_matrix(&mut rng, 3, 3);
        let p = GeneralizedLinearParams::mahalanobis(&factor);
        assert_abs_diff_eq!(generalized_similarity(&x, &x, &p).unwrap(), 0.0, epsilon = 1e-12);

        let p = GeneralizedLinearParams::mahalanobis(&Matrix::identity(2));
        let v =
            generalized_similarity(&Vector::from(vec![1.0, 0.0]), &Vector::from(vec![0.0, 1.0]), &p).unwrap();
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn generalized_similarity_matches_block_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n = 4;
        let p = GeneralizedLinearParams {
            a_half: random_matrix(&mut rng, 3, n),
            b_half: random_matrix(&mut rng, 3, n),
            cx_half: random_matrix(&mut rng, 3, n),
            cy_half: random_matrix(&mut rng, 3, n),
            dx_half: random_matrix(&mut rng, 3, n),
            dy_half: random_matrix(&mut rng, 3, n),
        };
        let (a, b, c, d) = p.full_matrices().unwrap();
        let x = random_vector(&mut rng, n);
        let y = random_vector(&mut rng, n);
        // [xᵀ yᵀ] [[A, −C], [−D, B]] [x; y]
        let mut block = Matrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                block.set(i, j, a.get(i, j));
                block.set(i, n + j, -c.get(i, j));
                block.set(n + i, j, -d.get(i, j));
                block.set(n + i, n + j, b.get(i, j));
            }
        }
        let z: Vec<f64> = x.as_slice().iter().chain(y.as_slice()).copied().collect();
        let expected = dot(&z, block.matvec(&z).unwrap().as_slice());
        assert_abs_diff_eq!(
            generalized_similarity(&x, &y, &p).unwrap(),
            expected,
            epsilon = 1e-10
        );
    }

    #[test]
    fn generalized_similarity_shape_errors() {
        let p = GeneralizedLinearParams::zeros(2, 3);
        assert!(generalized_similarity(&Vector::zeros(2), &Vector::zeros(2), &p).is_err());
        let mut bad = p.clone();
        bad.cy_half = Matrix::zeros(1, 3);
        assert!(generalized_similarity(&Vector::zeros(3), &Vector::zeros(3), &bad).is_err());
    }

    #[test]
    fn mahalanobis_examples() {
        let x = Vector::from(vec![1.0, -4.0]);
        assert_eq!(mahalanobis(&x, &x, &Matrix::identity(2)).unwrap(), 0.0);
        let y = Vector::from(vec![2.0, 1.0]);
        assert_abs_diff_eq!(
            mahalanobis(&x, &y, &Matrix::identity(2)).unwrap(),
            26.0,
            epsilon = 1e-12
        );
        let m = Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0]]).unwrap();
        let v = mahalanobis(&Vector::from(vec![2.0, 0.0]), &Vector::zeros(2), &m).unwrap();
        assert_eq!(v, 12.0);
        assert!(mahalanobis(&x, &y, &Matrix::identity(3)).is_err());
    }
}
