//! Linear-Gaussian toys that exercise the flow and the design density against the
//! closed-form oracles.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::lingauss::{lin_gauss_eig, lin_gauss_posterior, LinGaussModel};
use crate::design::{apply_mask, inclusion_probs, sample_mask, Mask, WellDesignState};
use crate::flow::{nll_loss, sample_posterior_raw, Conditioning, FlowArch, FlowParams};
use crate::nn::AdamState;
use crate::rng::{derive_seed, rng_from_seed};
use crate::twin::{joint_train, TrainSettings, TrainingPair};
use crate::{Error, Execution, Result, ScalarField2D};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSettings {
    pub arch: FlowArch,
    pub n_train: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_design: f64,
    /// posterior draws per test observation
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            arch: FlowArch {
                couplings: 4,
                coupling_hidden: 32,
                coupling_depth: 2,
                embed_dim: 16,
                conditioner_hidden: 32,
            },
            n_train: 5000,
            epochs: 60,
            batch_size: 50,
            lr_theta: 2e-3,
            lr_design: 2e-2,
            n_samples: 5000,
            seed: 0,
        }
    }
}

impl OracleSettings {
    /// Narrow nets on many more draws for the posterior check; the default sizes
    /// overfit 5000 draws enough to bias the posterior mean.
    pub fn amortized() -> Self {
        Self {
            arch: FlowArch {
                couplings: 4,
                coupling_hidden: 16,
                coupling_depth: 1,
                embed_dim: 8,
                conditioner_hidden: 16,
            },
            n_train: 50_000,
            epochs: 10,
            batch_size: 100,
            ..Self::default()
        }
    }
}

/// Negative mean loss over `pairs × n_masks` masks drawn from `design`. Equal to
/// the expected log posterior density up to a design-independent constant, so it
/// only supports ordering designs under a fixed prior.
pub fn mc_eig_bound(
    flow: &FlowParams,
    pairs: &[TrainingPair],
    design: &WellDesignState,
    n_masks: usize,
    rng_seed: u64,
) -> Result<f64> {
    if pairs.is_empty() || n_masks == 0 {
        return Err(Error::InvalidParameter(
            "need pairs and at least one mask".into(),
        ));
    }
    let rows = flow.dims().0;
    let probs = inclusion_probs(design);
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        for j in 0..n_masks {
            let idx = (i * n_masks + j) as u64;
            let mask = sample_mask(
                &probs,
                &design.drilled,
                rows,
                derive_seed(rng_seed, "mask", idx),
            );
            let cond = apply_mask(&mask, &p.y_full, p.seismic.as_ref())?;
            total += nll_loss(flow, &p.x, &cond).map_err(|e| Error::sample(i, e))?;
        }
    }
    Ok(-total / (pairs.len() * n_masks) as f64)
}

fn gaussian_draws(
    model: &LinGaussModel,
    noise_std: &DVector<f64>,
    n: usize,
    rng_seed: u64,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    let chol = model
        .prior_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("prior covariance".into()))?;
    let d = model.dim();
    let m = model.observations();
    let mut rng = rng_from_seed(rng_seed);
    Ok((0..n)
        .map(|_| {
            let e = DVector::from_fn(d, |_, _| {
                Distribution::<f64>::sample(&StandardNormal, &mut rng)
            });
            let x = &model.prior_mean + chol.l() * e;
            let eps = DVector::from_fn(m, |i, _| {
                noise_std[i] * Distribution::<f64>::sample(&StandardNormal, &mut rng)
            });
            let y = &model.forward * &x + eps;
            (x, y)
        })
        .collect())
}

fn to_field(v: &DVector<f64>, rows: usize, cols: usize) -> Result<ScalarField2D> {
    ScalarField2D::from_vec(rows, cols, v.iter().copied().collect())
}

fn train(
    pairs: &[TrainingPair],
    rows: usize,
    cols: usize,
    design: &mut WellDesignState,
    settings: &OracleSettings,
) -> Result<FlowParams> {
    let mut flow = FlowParams::init(
        derive_seed(settings.seed, "flow-init", 0),
        rows,
        cols,
        &settings.arch,
    )?;
    let mut flow_adam = AdamState::new(flow.num_params());
    let mut design_adam = AdamState::new(design.candidates());
    let train = TrainSettings {
        epochs: settings.epochs,
        batch_size: settings.batch_size,
        lr_theta: settings.lr_theta,
        lr_design: settings.lr_design,
        jitter: 0.0,
        seed: derive_seed(settings.seed, "train", 0),
        exec: Execution::Sequential,
    };
    joint_train(
        pairs,
        &mut flow,
        &mut flow_adam,
        design,
        &mut design_adam,
        &train,
    )?;
    Ok(flow)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmortizedCheck {
    /// worst `‖m̂ − m‖ / ‖m‖` over the test observations
    pub mean_rel_error: f64,
    /// worst per-coordinate `|ŝ − s| / s` over the test observations
    pub std_rel_error: f64,
}

/// Trains a flow on `(x, y)` draws of a 2×4 linear-Gaussian problem with every
/// column observed, then compares posterior draws at fresh observations with the
/// conjugate posterior.
pub fn amortized_posterior_check(
    settings: &OracleSettings,
    n_test: usize,
) -> Result<AmortizedCheck> {
    let (rows, cols) = (2, 4);
    let d = rows * cols;
    let mut rng = rng_from_seed(derive_seed(settings.seed, "model", 0));
    let a = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else {
            rng.random_range(-0.3..0.3)
        }
    });
    let l = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.3..0.3));
    let cov = &l * l.transpose() + DMatrix::identity(d, d) * 0.5;
    let mean = DVector::from_fn(d, |_, _| rng.random_range(0.5..1.5));
    let noise_var = 0.25;
    let model = LinGaussModel::new(a, mean, cov, noise_var)?;
    let noise_std = DVector::from_element(d, noise_var.sqrt());

    let draws = gaussian_draws(
        &model,
        &noise_std,
        settings.n_train,
        derive_seed(settings.seed, "train-set", 0),
    )?;
    let pairs = draws
        .iter()
        .map(|(x, y)| {
            Ok(TrainingPair {
                x: to_field(x, rows, cols)?,
                y_full: to_field(y, rows, cols)?,
                seismic: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut design = WellDesignState::new(vec![0.0; cols], 1, (0..cols).collect())?;
    let flow = train(&pairs, rows, cols, &mut design, settings)?;

    let tests = gaussian_draws(
        &model,
        &noise_std,
        n_test,
        derive_seed(settings.seed, "test-set", 0),
    )?;
    let full = Mask::from_columns(vec![true; cols], rows);
    let mut worst = AmortizedCheck {
        mean_rel_error: 0.0,
        std_rel_error: 0.0,
    };
    for (t, (_, y)) in tests.iter().enumerate() {
        let (m, c) = lin_gauss_posterior(&model, y)?;
        let cond: Conditioning = apply_mask(&full, &to_field(y, rows, cols)?, None)?;
        let samples = sample_posterior_raw(
            &flow,
            &cond,
            settings.n_samples,
            derive_seed(settings.seed, "posterior", t as u64),
        )?;
        let n = samples.len() as f64;
        let mut mu = DVector::zeros(d);
        for s in &samples {
            mu += DVector::from_column_slice(s.as_slice());
        }
        mu /= n;
        let mut var: DVector<f64> = DVector::zeros(d);
        for s in &samples {
            for (j, v) in s.as_slice().iter().enumerate() {
                var[j] += (v - mu[j]).powi(2);
            }
        }
        let mean_err = (&mu - &m).norm() / m.norm();
        let std_err = (0..d)
            .map(|j| ((var[j] / (n - 1.0)).sqrt() - c[(j, j)].sqrt()).abs() / c[(j, j)].sqrt())
            .fold(0.0, f64::max);
        worst.mean_rel_error = worst.mean_rel_error.max(mean_err);
        worst.std_rel_error = worst.std_rel_error.max(std_err);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignTrial {
    /// analytic information gain of observing each column alone
    pub eig: [f64; 2],
    pub density: Vec<f64>,
    /// column with the larger analytic gain
    pub optimal: usize,
    /// column with the larger trained density
    pub chosen: usize,
}

/// Two candidate columns observing the state directly, one of them much noisier
/// (which one is drawn from the seed). A budget of one well is trained jointly
/// with the flow from a uniform density.
pub fn design_ordering_trial(
    settings: &OracleSettings,
    rows: usize,
    noise_std: [f64; 2],
) -> Result<DesignTrial> {
    let cols = 2;
    let d = rows * cols;
    let mut rng = rng_from_seed(derive_seed(settings.seed, "model", 0));
    let flip = rng.random::<bool>();
    let col_noise = if flip {
        [noise_std[1], noise_std[0]]
    } else {
        noise_std
    };
    let cell_noise = DVector::from_fn(d, |i, _| col_noise[i % cols]);

    let l = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.2..0.2));
    let cov = &l * l.transpose() + DMatrix::identity(d, d) * 0.5;
    let model = LinGaussModel::new(DMatrix::identity(d, d), DVector::zeros(d), cov, 1.0)?;
    // whitened copy for the analytic gain: y_i / σ_i = x_i / σ_i + ε_i
    let whitened = LinGaussModel::new(
        DMatrix::from_diagonal(&cell_noise.map(|s| 1.0 / s)),
        model.prior_mean.clone(),
        model.prior_cov.clone(),
        1.0,
    )?;
    let column_rows = |c: usize| (0..rows).map(|r| r * cols + c).collect::<Vec<_>>();
    let eig = [
        lin_gauss_eig(&whitened, &column_rows(0))?,
        lin_gauss_eig(&whitened, &column_rows(1))?,
    ];
    let optimal = if eig[1] > eig[0] { 1 } else { 0 };

    let draws = gaussian_draws(
        &model,
        &cell_noise,
        settings.n_train,
        derive_seed(settings.seed, "train-set", 0),
    )?;
    let pairs = draws
        .iter()
        .map(|(x, y)| {
            Ok(TrainingPair {
                x: to_field(x, rows, cols)?,
                y_full: to_field(y, rows, cols)?,
                seismic: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut design = WellDesignState::uniform(cols, 1)?;
    train(&pairs, rows, cols, &mut design, settings)?;
    let density = design.density();
    let chosen = if density[1] > density[0] { 1 } else { 0 };
    Ok(DesignTrial {
        eig,
        density,
        optimal,
        chosen,
    })
}
