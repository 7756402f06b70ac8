//! Evaluation metrics and closed-form linear-Gaussian oracles.

mod lingauss;
mod validate;

pub use lingauss::{lin_gauss_eig, lin_gauss_posterior, LinGaussModel};
pub use validate::{
    amortized_posterior_check, design_ordering_trial, mc_eig_bound, AmortizedCheck, DesignTrial,
    OracleSettings,
};

use crate::sim::PlumeEnsemble;
use crate::{Error, Result, ScalarField2D};

#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub k: usize,
    pub rmse: f64,
    pub mean_posterior_std: f64,
    pub drilled_column: usize,
    pub final_train_loss: f64,
}

/// Outcome of one twin run.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// `"beacon"` or `"random"`
    pub method: String,
    pub seed: u64,
    pub config_digest: String,
    /// ordered by `k`
    pub rows: Vec<IterationMetrics>,
    /// final well density over columns
    pub density: Vec<f64>,
    /// drilled columns in drilling order
    pub drilled: Vec<usize>,
}

pub fn rmse(estimate: &ScalarField2D, truth: &ScalarField2D) -> Result<f64> {
    estimate.ensure_same_dims(truth, "rmse")?;
    let n = estimate.len() as f64;
    let sq: f64 = estimate
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((sq / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: ScalarField2D,
    /// unbiased (N − 1) pointwise standard deviation
    pub std: ScalarField2D,
    pub mean_std: f64,
}

pub fn field_stats(members: &[&ScalarField2D]) -> Result<EnsembleStats> {
    if members.len() < 2 {
        return Err(Error::InvalidParameter(
            "ensemble statistics need at least two members".into(),
        ));
    }
    let (rows, cols) = members[0].dims();
    for m in members {
        m.ensure_same_dims(members[0], "ensemble member")?;
    }
    let n = members.len() as f64;
    // Welford: identical members give exactly zero spread
    let mut mean = ScalarField2D::zeros(rows, cols);
    let mut var = ScalarField2D::zeros(rows, cols);
    for (i, m) in members.iter().enumerate() {
        let count = (i + 1) as f64;
        for ((mu, m2), &v) in mean
            .as_mut_slice()
            .iter_mut()
            .zip(var.as_mut_slice())
            .zip(m.as_slice())
        {
            let delta = v - *mu;
            *mu += delta / count;
            *m2 += delta * (v - *mu);
        }
    }
    let std = var.map(|v| (v / (n - 1.0)).sqrt());
    let mean_std = std.sum() / std.len() as f64;
    Ok(EnsembleStats {
        mean,
        std,
        mean_std,
    })
}

pub fn ensemble_stats(ens: &PlumeEnsemble) -> Result<EnsembleStats> {
    let members: Vec<&ScalarField2D> = ens.members().iter().map(|m| m.saturation()).collect();
    field_stats(&members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::sim::{PermeabilityField, PlumeState};
    use rand_distr::{Distribution, Normal};
    use std::sync::Arc;

    #[test]
    fn rmse_cases() {
        let t = ScalarField2D::from_fn(3, 3, |r, c| (r * c) as f64);
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        assert!((rmse(&t.map(|v| v - 0.25), &t).unwrap() - 0.25).abs() < 1e-15);
        let a = ScalarField2D::from_vec(2, 1, vec![0.0, 0.0]).unwrap();
        let b = ScalarField2D::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        assert!((rmse(&a, &b).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&a, &t).is_err());
    }

    fn ensemble(members: Vec<ScalarField2D>) -> PlumeEnsemble {
        let n = members.len();
        let (r, c) = members[0].dims();
        let perms: Arc<[PermeabilityField]> = (0..n)
            .map(|_| PermeabilityField::new(ScalarField2D::filled(r, c, 1.0)).unwrap())
            .collect();
        PlumeEnsemble::new(
            members.into_iter().map(PlumeState::clamped).collect(),
            perms,
            0,
        )
        .unwrap()
    }

    #[test]
    fn stats_cases() {
        let same = ensemble(vec![ScalarField2D::filled(2, 2, 0.4); 3]);
        let s = ensemble_stats(&same).unwrap();
        assert!(s.std.as_slice().iter().all(|&v| v == 0.0));

        let two = ensemble(vec![
            ScalarField2D::zeros(2, 2),
            ScalarField2D::filled(2, 2, 1.0),
        ]);
        let s = ensemble_stats(&two).unwrap();
        assert!(s.mean.as_slice().iter().all(|&v| v == 0.5));
        assert!(s
            .std
            .as_slice()
            .iter()
            .all(|&v| (v - 0.5f64.sqrt()).abs() < 1e-15));

        let one = ensemble(vec![ScalarField2D::zeros(2, 2)]);
        assert!(ensemble_stats(&one).is_err());
    }

    #[test]
    fn sampled_spread_matches() {
        let mut rng = rng_from_seed(3);
        let normal = Normal::new(0.5, 0.1).unwrap();
        let members: Vec<ScalarField2D> = (0..1000)
            .map(|_| ScalarField2D::from_fn(4, 4, |_, _| normal.sample(&mut rng)))
            .collect();
        let s = ensemble_stats(&ensemble(members)).unwrap();
        assert!((s.mean_std - 0.1).abs() < 0.005, "{}", s.mean_std);
    }
}
