use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// `y = A x + ε`, `x ~ N(μ0, Σ0)`, `ε ~ N(0, σ² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinGaussModel {
    pub forward: DMatrix<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
    pub noise_var: f64,
}

impl LinGaussModel {
    pub fn new(
        forward: DMatrix<f64>,
        prior_mean: DVector<f64>,
        prior_cov: DMatrix<f64>,
        noise_var: f64,
    ) -> Result<Self> {
        let d = prior_mean.len();
        if forward.ncols() != d || prior_cov.shape() != (d, d) {
            return Err(Error::DimMismatch(format!(
                "forward {:?}, prior mean {d}, prior covariance {:?}",
                forward.shape(),
                prior_cov.shape()
            )));
        }
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise variance {noise_var}"
            )));
        }
        if (&prior_cov - prior_cov.transpose()).abs().max() > 1e-12 * prior_cov.abs().max().max(1.0)
        {
            return Err(Error::Singular("prior covariance is not symmetric".into()));
        }
        if prior_cov.clone().cholesky().is_none() {
            return Err(Error::Singular(
                "prior covariance is not positive definite".into(),
            ));
        }
        Ok(Self {
            forward,
            prior_mean,
            prior_cov,
            noise_var,
        })
    }

    pub fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    pub fn observations(&self) -> usize {
        self.forward.nrows()
    }
}

fn spd_inverse(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular(what.to_string()))
}

/// Conjugate update: `Σ = (Σ0⁻¹ + AᵀA/σ²)⁻¹`, `μ = Σ (Σ0⁻¹ μ0 + Aᵀ y / σ²)`.
pub fn lin_gauss_posterior(
    model: &LinGaussModel,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if y.len() != model.observations() {
        return Err(Error::DimMismatch(format!(
            "{} observations for a model with {}",
            y.len(),
            model.observations()
        )));
    }
    let prior_prec = spd_inverse(model.prior_cov.clone(), "prior covariance")?;
    let at = model.forward.transpose();
    let prec = &prior_prec + &at * &model.forward / model.noise_var;
    let cov = spd_inverse(prec, "posterior precision")?;
    let mean = &cov * (&prior_prec * &model.prior_mean + &at * y / model.noise_var);
    Ok((mean, cov))
}

/// Closed-form expected information gain (nats) of observing the listed rows of
/// `A`: `½ log det(I + A_m Σ0 A_mᵀ / σ²)`.
pub fn lin_gauss_eig(model: &LinGaussModel, rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= model.observations()) {
        return Err(Error::InvalidParameter(format!(
            "observation row {r} out of range"
        )));
    }
    let a_m = model.forward.select_rows(rows);
    let m = rows.len();
    let inner =
        DMatrix::identity(m, m) + &a_m * &model.prior_cov * a_m.transpose() / model.noise_var;
    let chol = inner
        .cholesky()
        .ok_or_else(|| Error::Singular("information matrix".into()))?;
    Ok(chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_model(seed: u64, m: usize, d: usize, noise_var: f64) -> LinGaussModel {
        let mut rng = rng_from_seed(seed);
        let a = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
        let l = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
        let cov = &l * l.transpose() + DMatrix::identity(d, d) * 0.5;
        let mean = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        LinGaussModel::new(a, mean, cov, noise_var).unwrap()
    }

    #[test]
    fn uninformative_data_returns_prior() {
        let base = random_model(1, 3, 3, 0.5);
        let model = LinGaussModel::new(
            DMatrix::zeros(3, 3),
            base.prior_mean.clone(),
            base.prior_cov.clone(),
            0.5,
        )
        .unwrap();
        let (mean, cov) =
            lin_gauss_posterior(&model, &DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert!((mean - &model.prior_mean).abs().max() < 1e-12);
        assert!((cov - &model.prior_cov).abs().max() < 1e-12);
    }

    #[test]
    fn symmetric_fusion() {
        let model = LinGaussModel::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            1.0,
        )
        .unwrap();
        let y = DVector::from_vec(vec![0.8, -1.4]);
        let (mean, cov) = lin_gauss_posterior(&model, &y).unwrap();
        assert!((mean - &y / 2.0).abs().max() < 1e-15);
        assert!((cov - DMatrix::identity(2, 2) / 2.0).abs().max() < 1e-15);
    }

    #[test]
    fn posterior_mean_matches_importance_sampling() {
        let model = random_model(7, 4, 3, 0.8);
        let mut rng = rng_from_seed(8);
        let y = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let (mean, _) = lin_gauss_posterior(&model, &y).unwrap();

        // self-normalised importance sampling with the prior as proposal
        let chol = model.prior_cov.clone().cholesky().unwrap();
        let n = 200_000;
        let mut xs = Vec::with_capacity(n);
        let mut logw = Vec::with_capacity(n);
        for _ in 0..n {
            let e = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            let x = &model.prior_mean + chol.l() * e;
            let r = &y - &model.forward * &x;
            logw.push(-0.5 * r.norm_squared() / model.noise_var);
            xs.push(x);
        }
        let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
        let wsum: f64 = w.iter().sum();
        let mut est = DVector::zeros(3);
        for (x, wi) in xs.iter().zip(&w) {
            est += x * (wi / wsum);
        }
        for j in 0..3 {
            let var: f64 = xs
                .iter()
                .zip(&w)
                .map(|(x, wi)| (wi / wsum).powi(2) * (x[j] - est[j]).powi(2))
                .sum();
            let se = var.sqrt();
            assert!(
                (est[j] - mean[j]).abs() < 3.0 * se + 1e-12,
                "coord {j}: {} vs {} (se {se})",
                est[j],
                mean[j]
            );
        }
    }

    #[test]
    fn eig_cases() {
        let model = LinGaussModel::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            1.0,
        )
        .unwrap();
        assert_eq!(lin_gauss_eig(&model, &[]).unwrap(), 0.0);
        assert!((lin_gauss_eig(&model, &[0]).unwrap() - 0.5 * 2f64.ln()).abs() < 1e-15);
        let loud = LinGaussModel {
            noise_var: 1e12,
            ..model
        };
        assert!(lin_gauss_eig(&loud, &[0]).unwrap() < 1e-10);
        assert!(lin_gauss_eig(&loud, &[3]).is_err());
    }

    #[test]
    fn eig_agrees_with_parameter_space_determinant() {
        let model = random_model(4, 5, 3, 0.7);
        let rows = [0, 2, 4];
        let a_m = model.forward.select_rows(&rows);
        let direct = 0.5
            * (DMatrix::identity(3, 3)
                + a_m.transpose() * &a_m * &model.prior_cov / model.noise_var)
                .determinant()
                .ln();
        assert!((lin_gauss_eig(&model, &rows).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_models() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(LinGaussModel::new(DMatrix::identity(2, 2), DVector::zeros(2), bad, 1.0).is_err());
        assert!(LinGaussModel::new(
            DMatrix::identity(2, 3),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            1.0
        )
        .is_err());
        assert!(LinGaussModel::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            0.0
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn eig_is_nonnegative_and_monotone(seed in any::<u64>(), extra in 0usize..4) {
            let model = random_model(seed, 4, 3, 0.5);
            let base: Vec<usize> = (0..extra).collect();
            let more: Vec<usize> = (0..=extra).collect();
            let a = lin_gauss_eig(&model, &base).unwrap();
            let b = lin_gauss_eig(&model, &more).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!(b >= a - 1e-12);
        }
    }
}
