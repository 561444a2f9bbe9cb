//! Pair verification loss and the identity loss with its prototype table.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, ScanError};
use crate::numkit::{dot, Matrix, Vector};
use crate::similarity::sigmoid;

pub const DEFAULT_OIM_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_OIM_MOMENTUM: f64 = 0.5;

/// A loss value and its gradient with respect to the loss input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vector,
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy on a single logit; label `true` means same identity.
///
/// The value is `softplus(logit) − label·logit`, evaluated as `softplus(∓logit)`
/// so it never goes negative through cancellation.
pub fn bce_with_logit(logit: f64, label: bool) -> LossValue {
    let (value, target) = if label {
        (softplus(-logit), 1.0)
    } else {
        (softplus(logit), 0.0)
    };
    LossValue {
        value,
        grad: Vector::from(vec![sigmoid(logit) - target]),
    }
}

/// Per-identity unit-norm prototypes for the identity loss.
#[derive(Clone, Debug, PartialEq)]
pub struct OimTable {
    prototypes: Matrix,
    pub momentum: f64,
    pub temperature: f64,
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let norm = dot(v, v).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(ScanError::Contract(format!(
            "cannot normalize a vector with norm {norm}"
        )));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

impl OimTable {
    /// Builds a table from arbitrary nonzero rows, normalizing each.
    pub fn new(prototypes: Matrix, momentum: f64, temperature: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) && momentum != 1.0 {
            return Err(ScanError::Config(format!(
                "OIM momentum {momentum} outside [0, 1]"
            )));
        }
        if !(temperature > 0.0) {
            return Err(ScanError::Config(format!(
                "OIM temperature must be > 0, got {temperature}"
            )));
        }
        let mut prototypes = prototypes;
        for r in 0..prototypes.rows() {
            let row = normalized(prototypes.row(r))?;
            prototypes.row_mut(r).copy_from_slice(&row);
        }
        Ok(Self {
            prototypes,
            momentum,
            temperature,
        })
    }

    /// Random unit prototypes.
    pub fn random<R: Rng>(
        identities: usize,
        width: usize,
        momentum: f64,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let data = (0..identities * width)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Self::new(Matrix::from_vec(identities, width, data)?, momentum, temperature)
    }

    pub fn identities(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn width(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    fn check(&self, feature: &Vector, identity: usize) -> Result<()> {
        if identity >= self.identities() {
            return Err(ScanError::Contract(format!(
                "identity {identity} outside table of {} rows",
                self.identities()
            )));
        }
        if feature.len() != self.width() {
            return Err(ScanError::dim("oim", self.width(), feature.len()));
        }
        Ok(())
    }
}

/// Softmax cross-entropy over cosine similarities to the prototypes. The
/// gradient is taken with respect to `feature`; prototypes are constants.
pub fn oim_forward(feature: &Vector, identity: usize, table: &OimTable) -> Result<LossValue> {
    table.check(feature, identity)?;
    let norm = feature.norm();
    if !(norm > 0.0) {
        return Err(ScanError::Contract(
            "identity loss needs a nonzero feature".into(),
        ));
    }
    let x: Vec<f64> = feature.as_slice().iter().map(|v| v / norm).collect();
    let inv_t = 1.0 / table.temperature;
    let logits: Vec<f64> = table.prototypes.rows_iter().map(|p| dot(p, &x) * inv_t).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let value = max + sum.ln() - logits[identity];

    // dL/dx = Σ_i (p_i − δ_i) prototype_i / T
    let mut grad_x = vec![0.0; x.len()];
    for (i, (row, l)) in table.prototypes.rows_iter().zip(&logits).enumerate() {
        let p = (l - max).exp() / sum;
        let coeff = (p - if i == identity { 1.0 } else { 0.0 }) * inv_t;
        for (g, w) in grad_x.iter_mut().zip(row) {
            *g += coeff * w;
        }
    }
    // through the normalization: (I − x xᵀ) g / ‖f‖
    let proj = dot(&x, &grad_x);
    let grad = grad_x
        .iter()
        .zip(&x)
        .map(|(g, xi)| (g - xi * proj) / norm)
        .collect::<Vec<_>>();
    Ok(LossValue {
        value: value.max(0.0),
        grad: Vector::from(grad),
    })
}

/// Moves one prototype towards the normalized feature and renormalizes.
pub fn oim_update(table: &mut OimTable, feature: &Vector, identity: usize) -> Result<()> {
    table.check(feature, identity)?;
    let x = normalized(feature.as_slice())
        .map_err(|_| ScanError::Contract("identity update needs a nonzero feature".into()))?;
    if table.momentum == 1.0 {
        return Ok(());
    }
    let m = table.momentum;
    let blended: Vec<f64> = table
        .prototypes
        .row(identity)
        .iter()
        .zip(&x)
        .map(|(p, xi)| m * p + (1.0 - m) * xi)
        .collect();
    // opposite prototype and feature cancel exactly at m = 0.5; keep the old row
    if let Ok(row) = normalized(&blended) {
        table.prototypes.row_mut(identity).copy_from_slice(&row);
    }
    Ok(())
}

/// Weighted sum of the pair loss and the mean identity loss, with each
/// component's input gradient scaled by its weight in the total.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub bce: f64,
    pub oim_mean: f64,
    pub bce_grad: Vector,
    pub oim_grads: Vec<Vector>,
}

pub fn total_loss(bce: &LossValue, oim_terms: &[LossValue], lambda_id: f64) -> Result<CombinedLoss> {
    if !(lambda_id >= 0.0) {
        return Err(ScanError::Config(format!(
            "lambda_id must be >= 0, got {lambda_id}"
        )));
    }
    let (oim_mean, scale) = if oim_terms.is_empty() {
        (0.0, 0.0)
    } else {
        let n = oim_terms.len() as f64;
        (oim_terms.iter().map(|t| t.value).sum::<f64>() / n, lambda_id / n)
    };
    let oim_grads = oim_terms
        .iter()
        .map(|t| Vector::from(t.grad.as_slice().iter().map(|g| g * scale).collect::<Vec<_>>()))
        .collect();
    Ok(CombinedLoss {
        value: bce.value + lambda_id * oim_mean,
        bce: bce.value,
        oim_mean,
        bce_grad: bce.grad.clone(),
        oim_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_check_flat;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_examples() {
        let l = bce_with_logit(0.0, true);
        assert_abs_diff_eq!(l.value, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(l.grad[0], -0.5, epsilon = 1e-15);

        let l = bce_with_logit(30.0, true);
        assert!(l.value < 1e-9);
        assert!(l.grad[0].abs() < 1e-9);

        let l = bce_with_logit(1.0, false);
        assert_abs_diff_eq!(l.value, 1.31326, epsilon = 1e-5);
        assert_abs_diff_eq!(l.grad[0], 0.73106, epsilon = 1e-5);
    }

    #[test]
    fn bce_is_nonnegative_with_bounded_gradient() {
        for i in -400..=400 {
            let logit = i as f64 * 0.25;
            for label in [false, true] {
                let l = bce_with_logit(logit, label);
                assert!(l.value >= 0.0);
                assert!(l.grad[0] > -1.0 && l.grad[0] < 1.0 || logit.abs() > 36.0);
                let target = if label { 1.0 } else { 0.0 };
                assert_eq!(l.grad[0], sigmoid(logit) - target);
            }
        }
    }

    fn table(rows: &[&[f64]], momentum: f64, temperature: f64) -> OimTable {
        OimTable::new(Matrix::from_rows(rows).unwrap(), momentum, temperature).unwrap()
    }

    #[test]
    fn oim_forward_examples() {
        let single = table(&[&[0.2, 0.9]], 0.5, 0.1);
        let l = oim_forward(&Vector::from(vec![3.0, -1.0]), 0, &single).unwrap();
        assert_eq!(l.value, 0.0);

        let two = table(&[&[1.0, 0.0], &[0.0, 1.0]], 0.5, 1.0);
        let l = oim_forward(&Vector::from(vec![1.0, 0.0]), 0, &two).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(l.value, -(e / (e + 1.0)).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l.value, 0.31326, epsilon = 1e-5);
    }

    #[test]
    fn oim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let t = OimTable::random(5, 4, 0.5, 0.1, &mut rng).unwrap();
        let f = Vector::from(vec![0.4, -1.2, 0.7, 0.3]);
        let l = oim_forward(&f, 2, &t).unwrap();
        let report = grad_check_flat(
            "oim",
            f.as_slice(),
            l.grad.as_slice(),
            |p| Ok(oim_forward(&Vector::from(p.to_vec()), 2, &t)?.value),
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn oim_is_scale_invariant_and_rejects_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let t = OimTable::random(3, 3, 0.5, 0.1, &mut rng).unwrap();
        let f = Vector::from(vec![0.5, 1.5, -0.2]);
        let big = Vector::from(vec![5.0, 15.0, -2.0]);
        let a = oim_forward(&f, 1, &t).unwrap().value;
        let b = oim_forward(&big, 1, &t).unwrap().value;
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        assert!(matches!(
            oim_forward(&Vector::zeros(3), 1, &t),
            Err(ScanError::Contract(_))
        ));
        assert!(oim_forward(&f, 3, &t).is_err());
    }

    #[test]
    fn oim_update_examples() {
        let mut frozen = table(&[&[1.0, 0.0], &[0.0, 1.0]], 1.0, 0.1);
        let before = frozen.clone();
        oim_update(&mut frozen, &Vector::from(vec![3.0, 4.0]), 0).unwrap();
        assert_eq!(frozen, before);

        let mut replace = table(&[&[1.0, 0.0], &[0.0, 1.0]], 0.0, 0.1);
        oim_update(&mut replace, &Vector::from(vec![3.0, 4.0]), 0).unwrap();
        assert_abs_diff_eq!(replace.prototypes().get(0, 0), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(replace.prototypes().get(0, 1), 0.8, epsilon = 1e-15);
        assert_eq!(replace.prototypes().row(1), &[0.0, 1.0]);

        let mut half = table(&[&[1.0, 0.0]], 0.5, 0.1);
        oim_update(&mut half, &Vector::from(vec![0.0, 2.0]), 0).unwrap();
        assert_abs_diff_eq!(
            half.prototypes().get(0, 0),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            half.prototypes().get(0, 1),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );

        assert!(oim_update(&mut half, &Vector::zeros(2), 0).is_err());
    }

    #[test]
    fn rows_stay_unit_norm_under_many_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut t = OimTable::random(4, 6, 0.5, 0.1, &mut rng).unwrap();
        for step in 0..2000 {
            let f: Vec<f64> = (0..6)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 10.0)
                .collect();
            oim_update(&mut t, &Vector::from(f), step % 4).unwrap();
        }
        for row in t.prototypes().rows_iter() {
            assert_abs_diff_eq!(dot(row, row).sqrt(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn total_loss_examples() {
        let bce = LossValue {
            value: 1.0,
            grad: Vector::from(vec![0.25]),
        };
        let oim = vec![
            LossValue {
                value: 0.25,
                grad: Vector::from(vec![1.0, 2.0]),
            },
            LossValue {
                value: 0.75,
                grad: Vector::from(vec![-4.0, 0.0]),
            },
        ];
        let zero = total_loss(&bce, &oim, 0.0).unwrap();
        assert_eq!(zero.value, 1.0);
        let one = total_loss(&bce, &oim, 1.0).unwrap();
        assert_eq!(one.value, 1.5);
        assert_eq!(one.oim_grads[0].as_slice(), &[0.5, 1.0]);
        assert_eq!(one.oim_grads[1].as_slice(), &[-2.0, 0.0]);
        assert!(total_loss(&bce, &oim, -1.0).is_err());
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        // total(logit, f1, f2) = bce(logit) + λ·mean(oim(f1), oim(f2))
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let t = OimTable::random(3, 3, 0.5, 0.1, &mut rng).unwrap();
        let lambda = 0.7;
        let eval = |p: &[f64]| -> Result<CombinedLoss> {
            let bce = bce_with_logit(p[0], true);
            let o1 = oim_forward(&Vector::from(p[1..4].to_vec()), 0, &t)?;
            let o2 = oim_forward(&Vector::from(p[4..7].to_vec()), 2, &t)?;
            total_loss(&bce, &[o1, o2], lambda)
        };
        let point = [0.3, 0.5, -1.0, 0.2, 1.1, 0.4, -0.6];
        let c = eval(&point).unwrap();
        let mut analytic = c.bce_grad.as_slice().to_vec();
        for g in &c.oim_grads {
            analytic.extend_from_slice(g.as_slice());
        }
        let report = grad_check_flat("total", &point, &analytic, |p| Ok(eval(p)?.value), 1e-5, 1e-5).unwrap();
        assert!(report.pass, "{report:?}");
    }
}
