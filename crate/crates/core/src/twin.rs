//! Digital-twin loop: forecast the prior ensemble, train the flow and the well
//! density jointly, drill, observe the ground truth, and let the flow's posterior
//! samples become the next prior.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::design::{
    apply_mask, design_gradient, inclusion_probs, sample_mask, select_well, Mask, WellDesignState,
};
use crate::flow::{loss_gradients, sample_posterior_raw, Conditioning, FlowArch, FlowParams};
use crate::nn::AdamState;
use crate::oracle::{ensemble_stats, rmse, IterationMetrics, Report};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sim::{
    corrupt_observation, forecast_ensemble, forecast_member, sample_permeability,
    seismic_surrogate, GeneratorParams, PermeabilityField, PlumeEnsemble, PlumeState, SimParams,
};
use crate::{Error, Execution, Result, ScalarField2D};

#[derive(Debug, Clone, PartialEq)]
pub struct TwinConfig {
    pub rows: usize,
    pub cols: usize,
    pub ensemble_size: usize,
    pub iterations: usize,
    pub budget: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_design: f64,
    /// half-width of the square plume every run starts from
    pub initial_plume_radius: usize,
    pub use_seismic: bool,
    /// lower bound on the per-cell spread used to standardize flow inputs
    pub std_floor: f64,
    /// training-target noise in standardized units; keeps cells where every
    /// member agrees from pulling the likelihood to infinity
    pub train_jitter: f64,
    pub sim: SimParams,
    pub perm: GeneratorParams,
    pub arch: FlowArch,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TwinConfig {
    fn default() -> Self {
        let (rows, cols) = (32, 32);
        Self {
            rows,
            cols,
            ensemble_size: 64,
            iterations: 4,
            budget: 1,
            epochs: 200,
            batch_size: 16,
            lr_theta: 3e-3,
            lr_design: 1e-2,
            initial_plume_radius: 1,
            use_seismic: true,
            std_floor: 0.05,
            train_jitter: 0.5,
            sim: SimParams::for_grid(rows, cols),
            perm: GeneratorParams::default(),
            arch: FlowArch::compact(),
            seed: 0,
            deterministic: true,
        }
    }
}

impl TwinConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rows", self.rows),
            ("cols", self.cols),
            ("ensemble_size", self.ensemble_size),
            ("iterations", self.iterations),
            ("budget", self.budget),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("flow_couplings", self.arch.couplings),
            ("embed_dim", self.arch.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be at least 1"
                )));
            }
        }
        if self.rows < 4 || self.cols < 4 {
            return Err(Error::GridTooSmall {
                rows: self.rows,
                cols: self.cols,
            });
        }
        if self.iterations * self.budget > self.cols {
            return Err(Error::InvalidParameter(format!(
                "{} iterations of {} wells exceed {} candidate columns",
                self.iterations, self.budget, self.cols
            )));
        }
        if !(self.std_floor > 0.0 && self.std_floor.is_finite()) {
            return Err(Error::InvalidParameter("std_floor must be > 0".into()));
        }
        if !(self.train_jitter >= 0.0 && self.train_jitter.is_finite()) {
            return Err(Error::InvalidParameter("train_jitter must be >= 0".into()));
        }
        if !(self.lr_theta >= 0.0) || !(self.lr_design >= 0.0) {
            return Err(Error::InvalidParameter(
                "learning rates must be >= 0".into(),
            ));
        }
        self.sim.validate(self.rows, self.cols)
    }

    pub fn execution(&self) -> Execution {
        Execution::from_deterministic(self.deterministic)
    }

    fn train_settings(&self, k: usize, method: Method) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_theta: self.lr_theta,
            lr_design: match method {
                Method::Beacon => self.lr_design,
                Method::Random => 0.0,
            },
            jitter: self.train_jitter,
            seed: derive_seed(self.seed, "train", k as u64),
            exec: self.execution(),
        }
    }
}

/// Placement rule used when drilling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// argmax of the trained density
    Beacon,
    /// uniform among undrilled columns; density never trained
    Random,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Beacon => "beacon",
            Method::Random => "random",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        match s {
            "beacon" => Ok(Method::Beacon),
            "random" => Ok(Method::Random),
            other => Err(Error::Format(format!("unknown method `{other}`"))),
        }
    }
}

/// A forecast plume and the noisy observation channels derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x: ScalarField2D,
    pub y_full: ScalarField2D,
    pub seismic: Option<ScalarField2D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_design: f64,
    /// std of fresh Gaussian noise added to every training target each epoch
    pub jitter: f64,
    pub seed: u64,
    pub exec: Execution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// mean per-sample loss of the last epoch
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Noisy full observation and seismic image per forecast member. Masks are not
/// applied here; training draws a fresh one per sample per epoch.
pub fn make_training_set(
    forecast: &PlumeEnsemble,
    cfg: &TwinConfig,
    rng_seed: u64,
) -> Result<Vec<TrainingPair>> {
    forecast
        .members()
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let make = || -> Result<TrainingPair> {
                let tag = i as u64;
                let y_full = corrupt_observation(
                    x,
                    cfg.sim.noise_sigma,
                    derive_seed(rng_seed, "noise", tag),
                )?;
                let seismic = if cfg.use_seismic {
                    Some(seismic_surrogate(
                        x,
                        &cfg.sim,
                        derive_seed(rng_seed, "seismic", tag),
                    )?)
                } else {
                    None
                };
                Ok(TrainingPair {
                    x: x.saturation().clone(),
                    y_full,
                    seismic,
                })
            };
            make().map_err(|e| Error::member(i, e))
        })
        .collect()
}

/// Jointly minimises the mean flow loss over `(flow, design logits)`.
///
/// Each epoch shuffles the pairs into batches; every sample gets a fresh mask
/// drawn from the current density (drilled columns forced on). A learning rate of
/// zero freezes the corresponding parameters.
pub fn joint_train(
    pairs: &[TrainingPair],
    flow: &mut FlowParams,
    flow_adam: &mut AdamState,
    design: &mut WellDesignState,
    design_adam: &mut AdamState,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("no training pairs".into()));
    }
    if settings.batch_size == 0 {
        return Err(Error::InvalidParameter(
            "batch_size must be at least 1".into(),
        ));
    }
    if flow_adam.len() != flow.num_params() || design_adam.len() != design.candidates() {
        return Err(Error::DimMismatch("optimizer state vs parameters".into()));
    }
    let rows = flow.dims().0;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(settings.epochs);

    for epoch in 0..settings.epochs {
        let epoch_seed = derive_seed(settings.seed, "epoch", epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng_from_seed(derive_seed(epoch_seed, "shuffle", 0)));
        let mut loss_sum = 0.0;

        for (b, chunk) in order.chunks(settings.batch_size).enumerate() {
            let wrap = |e: Error| Error::Training {
                epoch,
                batch: b,
                source: Box::new(e),
            };
            let probs = inclusion_probs(design);
            let mut masks = Vec::with_capacity(chunk.len());
            let mut conds = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mask = sample_mask(
                    &probs,
                    &design.drilled,
                    rows,
                    derive_seed(epoch_seed, "mask", i as u64),
                );
                let p = &pairs[i];
                conds.push(apply_mask(&mask, &p.y_full, p.seismic.as_ref()).map_err(wrap)?);
                masks.push(mask);
            }
            let jittered: Vec<ScalarField2D> = if settings.jitter > 0.0 {
                chunk
                    .iter()
                    .map(|&i| {
                        let mut rng = rng_from_seed(derive_seed(epoch_seed, "jitter", i as u64));
                        pairs[i].x.map(|v| {
                            v + settings.jitter
                                * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                        })
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let batch: Vec<(&ScalarField2D, &Conditioning)> = chunk
                .iter()
                .enumerate()
                .zip(&conds)
                .map(|((j, &i), c)| (jittered.get(j).unwrap_or(&pairs[i].x), c))
                .collect();
            let grads = loss_gradients(flow, &batch, settings.exec).map_err(wrap)?;
            loss_sum += grads.per_sample_loss.iter().sum::<f64>();

            if settings.lr_design > 0.0 {
                let mut g_logits = vec![0.0; design.candidates()];
                for ((&i, gc), mask) in chunk.iter().zip(&grads.cond).zip(&masks) {
                    let g = design_gradient(design, gc, &pairs[i].y_full, &probs, mask)
                        .map_err(wrap)?;
                    for (acc, v) in g_logits.iter_mut().zip(g) {
                        *acc += v;
                    }
                }
                design_adam
                    .step(&mut design.logits, &g_logits, settings.lr_design)
                    .map_err(wrap)?;
            }
            if settings.lr_theta > 0.0 {
                let mut flat = flow.flatten();
                flow_adam
                    .step(&mut flat, &grads.params, settings.lr_theta)
                    .map_err(wrap)?;
                flow.assign_flat(&flat).map_err(wrap)?;
            }
        }
        let mean = loss_sum / pairs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: 0,
                source: Box::new(Error::NonFinite("epoch loss".into())),
            });
        }
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome {
        final_loss: epoch_losses.last().copied().unwrap_or(f64::NAN),
        epoch_losses,
    })
}

/// Everything the loop carries from one iteration to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinState {
    pub k: usize,
    pub prior: PlumeEnsemble,
    pub design: WellDesignState,
    pub flow: FlowParams,
    pub flow_adam: AdamState,
    pub design_adam: AdamState,
    pub truth: PlumeState,
    pub truth_perm: PermeabilityField,
    pub metrics: Vec<IterationMetrics>,
}

pub fn prior_permeabilities(cfg: &TwinConfig) -> Result<Arc<[PermeabilityField]>> {
    (0..cfg.ensemble_size)
        .map(|i| {
            sample_permeability(
                derive_seed(cfg.seed, "prior-perm", i as u64),
                cfg.rows,
                cfg.cols,
                &cfg.perm,
            )
        })
        .collect()
}

pub fn truth_permeability(cfg: &TwinConfig) -> Result<PermeabilityField> {
    sample_permeability(
        derive_seed(cfg.seed, "truth-perm", 0),
        cfg.rows,
        cfg.cols,
        &cfg.perm,
    )
}

pub fn initial_plume(cfg: &TwinConfig) -> PlumeState {
    PlumeState::injection_blob(
        cfg.rows,
        cfg.cols,
        cfg.sim.injection_cell,
        cfg.initial_plume_radius,
    )
}

/// Step-0 state: common initial plume for truth and every prior member, distinct
/// permeability draws, identity flow, uniform density.
pub fn initial_state(cfg: &TwinConfig) -> Result<TwinState> {
    cfg.validate()?;
    let plume = initial_plume(cfg);
    let perms = prior_permeabilities(cfg)?;
    let prior = PlumeEnsemble::new(vec![plume.clone(); cfg.ensemble_size], perms, 0)?;
    let flow = FlowParams::init(
        derive_seed(cfg.seed, "flow-init", 0),
        cfg.rows,
        cfg.cols,
        &cfg.arch,
    )?;
    let flow_adam = AdamState::new(flow.num_params());
    Ok(TwinState {
        k: 0,
        prior,
        design: WellDesignState::uniform(cfg.cols, cfg.budget)?,
        flow,
        flow_adam,
        design_adam: AdamState::new(cfg.cols),
        truth: plume,
        truth_perm: truth_permeability(cfg)?,
        metrics: Vec::new(),
    })
}

/// Per-cell affine map between physical units and the flow's working units,
/// fitted to one training set. Observations share the state's statistics; the
/// seismic channel has its own.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: ScalarField2D,
    pub std: ScalarField2D,
    pub seismic_mean: Option<ScalarField2D>,
    pub seismic_std: Option<ScalarField2D>,
}

fn moments(fields: &[&ScalarField2D], floor: f64) -> Result<(ScalarField2D, ScalarField2D)> {
    let (rows, cols) = fields[0].dims();
    let n = fields.len() as f64;
    let mut mean = ScalarField2D::zeros(rows, cols);
    for f in fields {
        f.ensure_same_dims(fields[0], "standardizer input")?;
        mean.as_mut_slice()
            .iter_mut()
            .zip(f.as_slice())
            .for_each(|(m, v)| *m += v / n);
    }
    let mut var = ScalarField2D::zeros(rows, cols);
    for f in fields {
        for ((a, v), m) in var
            .as_mut_slice()
            .iter_mut()
            .zip(f.as_slice())
            .zip(mean.as_slice())
        {
            *a += (v - m).powi(2) / n;
        }
    }
    Ok((mean, var.map(|v| v.sqrt().max(floor))))
}

impl Standardizer {
    pub fn fit(pairs: &[TrainingPair], floor: f64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidParameter("no training pairs".into()));
        }
        let xs: Vec<&ScalarField2D> = pairs.iter().map(|p| &p.x).collect();
        let (mean, std) = moments(&xs, floor)?;
        let seismic: Option<Vec<&ScalarField2D>> =
            pairs.iter().map(|p| p.seismic.as_ref()).collect();
        let (seismic_mean, seismic_std) = match seismic {
            Some(s) => {
                let (m, sd) = moments(&s, floor)?;
                (Some(m), Some(sd))
            }
            None => (None, None),
        };
        Ok(Self {
            mean,
            std,
            seismic_mean,
            seismic_std,
        })
    }

    fn forward(v: &ScalarField2D, mean: &ScalarField2D, std: &ScalarField2D) -> ScalarField2D {
        let data = v
            .as_slice()
            .iter()
            .zip(mean.as_slice())
            .zip(std.as_slice())
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        ScalarField2D::from_vec(v.rows(), v.cols(), data).expect("same dims")
    }

    /// State or observation field into working units.
    pub fn state(&self, x: &ScalarField2D) -> Result<ScalarField2D> {
        x.ensure_same_dims(&self.mean, "standardized field")?;
        Ok(Self::forward(x, &self.mean, &self.std))
    }

    pub fn seismic(&self, s: &ScalarField2D) -> Result<ScalarField2D> {
        match (&self.seismic_mean, &self.seismic_std) {
            (Some(m), Some(sd)) => {
                s.ensure_same_dims(m, "standardized seismic")?;
                Ok(Self::forward(s, m, sd))
            }
            _ => Err(Error::InvalidParameter(
                "standardizer was fitted without seismic data".into(),
            )),
        }
    }

    /// Working units back to physical units.
    pub fn restore(&self, z: &ScalarField2D) -> Result<ScalarField2D> {
        z.ensure_same_dims(&self.mean, "restored field")?;
        let data = z
            .as_slice()
            .iter()
            .zip(self.mean.as_slice())
            .zip(self.std.as_slice())
            .map(|((v, m), s)| m + s * v)
            .collect();
        ScalarField2D::from_vec(z.rows(), z.cols(), data)
    }

    pub fn pair(&self, p: &TrainingPair) -> Result<TrainingPair> {
        Ok(TrainingPair {
            x: self.state(&p.x)?,
            y_full: self.state(&p.y_full)?,
            seismic: p.seismic.as_ref().map(|s| self.seismic(s)).transpose()?,
        })
    }
}

/// Unmasked field measurements of the ground truth at twin step `k`. Noise is
/// drawn over the whole grid from a step-keyed seed, so runs that share a seed
/// see identical values at shared wells.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldData {
    pub y: ScalarField2D,
    pub seismic: Option<ScalarField2D>,
}

pub fn field_data(truth: &PlumeState, k: usize, cfg: &TwinConfig) -> Result<FieldData> {
    let y = corrupt_observation(
        truth,
        cfg.sim.noise_sigma,
        derive_seed(cfg.seed, "field-noise", k as u64),
    )?;
    let seismic = if cfg.use_seismic {
        Some(seismic_surrogate(
            truth,
            &cfg.sim,
            derive_seed(cfg.seed, "field-seismic", k as u64),
        )?)
    } else {
        None
    };
    Ok(FieldData { y, seismic })
}

/// Flow conditioning for field data: standardized, visible only at the drilled
/// columns.
pub fn field_conditioning(
    data: &FieldData,
    drilled: &[usize],
    scaler: &Standardizer,
) -> Result<Conditioning> {
    let (rows, cols) = data.y.dims();
    let mask = Mask::drilled_only(drilled, cols, rows);
    let seismic = data
        .seismic
        .as_ref()
        .map(|s| scaler.seismic(s))
        .transpose()?;
    apply_mask(&mask, &scaler.state(&data.y)?, seismic.as_ref())
}

fn random_column(design: &WellDesignState, seed: u64) -> Result<usize> {
    let free: Vec<usize> = (0..design.candidates())
        .filter(|&c| !design.is_drilled(c))
        .collect();
    if free.is_empty() {
        return Err(Error::BudgetExhausted);
    }
    Ok(free[rng_from_seed(seed).random_range(0..free.len())])
}

/// One forecast → train → drill → observe → assimilate cycle.
pub fn run_iteration(state: TwinState, cfg: &TwinConfig, method: Method) -> Result<TwinState> {
    let TwinState {
        k,
        prior,
        mut design,
        mut flow,
        mut flow_adam,
        design_adam: _,
        truth,
        truth_perm,
        mut metrics,
    } = state;
    let k = k + 1;

    let forecast = forecast_ensemble(&prior, &cfg.sim).map_err(|e| Error::stage("forecast", e))?;
    let truth = forecast_member(&truth, &truth_perm, &cfg.sim)
        .map_err(|e| Error::stage("ground truth", e))?;

    let raw_pairs = make_training_set(&forecast, cfg, derive_seed(cfg.seed, "train-set", k as u64))
        .map_err(|e| Error::stage("training set", e))?;
    let scaler = Standardizer::fit(&raw_pairs, cfg.std_floor)?;
    let pairs = raw_pairs
        .iter()
        .map(|p| scaler.pair(p))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::stage("training set", e))?;

    // flow warm-starts; the density restarts from uniform every cycle
    design.reset_logits();
    let mut design_adam = AdamState::new(design.candidates());
    let settings = cfg.train_settings(k, method);
    let outcome = joint_train(
        &pairs,
        &mut flow,
        &mut flow_adam,
        &mut design,
        &mut design_adam,
        &settings,
    )
    .map_err(|e| Error::stage("training", e))?;

    let mut new_wells = Vec::with_capacity(cfg.budget);
    for j in 0..cfg.budget {
        let col = match method {
            Method::Beacon => select_well(&design),
            Method::Random => random_column(
                &design,
                derive_seed(cfg.seed, "random-pick", (k * cfg.budget + j) as u64),
            ),
        }
        .map_err(|e| Error::stage("drilling", e))?;
        design.drill(col)?;
        new_wells.push(col);
    }

    let cond = field_data(&truth, k, cfg)
        .and_then(|d| field_conditioning(&d, &design.drilled, &scaler))
        .map_err(|e| Error::stage("observation", e))?;
    let posterior = sample_posterior_raw(
        &flow,
        &cond,
        cfg.ensemble_size,
        derive_seed(cfg.seed, "posterior", k as u64),
    )
    .and_then(|draws| {
        draws
            .iter()
            .map(|z| scaler.restore(z).map(PlumeState::clamped))
            .collect::<Result<Vec<_>>>()
    })
    .map_err(|e| Error::stage("posterior", e))?;
    let prior = PlumeEnsemble::new(posterior, Arc::clone(forecast.perms()), k)?;

    let stats = ensemble_stats(&prior)?;
    metrics.push(IterationMetrics {
        k,
        rmse: rmse(&stats.mean, truth.saturation())?,
        mean_posterior_std: stats.mean_std,
        drilled_column: new_wells[0],
        final_train_loss: outcome.final_loss,
    });

    Ok(TwinState {
        k,
        prior,
        design,
        flow,
        flow_adam,
        design_adam,
        truth,
        truth_perm,
        metrics,
    })
}

pub fn report_from_state(state: &TwinState, cfg: &TwinConfig, method: Method) -> Report {
    Report {
        method: method.label().to_string(),
        seed: cfg.seed,
        config_digest: crate::io::config_digest(cfg),
        rows: state.metrics.clone(),
        density: state.design.density(),
        drilled: state.design.drilled.clone(),
    }
}

/// Runs from `state` until `cfg.iterations` cycles are complete, calling
/// `after_each` with every new state.
pub fn continue_experiment(
    mut state: TwinState,
    cfg: &TwinConfig,
    method: Method,
    mut after_each: impl FnMut(&TwinState) -> Result<()>,
) -> Result<TwinState> {
    while state.k < cfg.iterations {
        state = run_iteration(state, cfg, method)?;
        after_each(&state)?;
    }
    Ok(state)
}

/// Full BEACON run.
pub fn run_experiment(cfg: &TwinConfig) -> Result<Report> {
    let state = continue_experiment(initial_state(cfg)?, cfg, Method::Beacon, |_| Ok(()))?;
    Ok(report_from_state(&state, cfg, Method::Beacon))
}

/// Same pipeline with uniformly random drilling and a frozen density.
pub fn run_baseline(cfg: &TwinConfig) -> Result<Report> {
    let state = continue_experiment(initial_state(cfg)?, cfg, Method::Random, |_| Ok(()))?;
    Ok(report_from_state(&state, cfg, Method::Random))
}
