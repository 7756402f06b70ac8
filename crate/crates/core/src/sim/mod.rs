//! Synthetic reservoir: layered permeability, Darcy pressure, upwind plume
//! transport, and the observation channels derived from a plume.

mod darcy;
mod observe;
mod perm;
mod transport;

use std::sync::Arc;

use rayon::prelude::*;

pub use darcy::{injection_source, solve_darcy, DarcySolution, VelocityField};
pub use observe::{box_blur, corrupt_observation, seismic_surrogate};
pub use perm::{sample_permeability, GeneratorParams};
pub use transport::advance_plume;

use crate::{Error, Result, ScalarField2D};

/// Strictly positive permeability on the simulation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PermeabilityField {
    field: ScalarField2D,
}

impl PermeabilityField {
    pub fn new(field: ScalarField2D) -> Result<Self> {
        let cols = field.cols();
        if let Some(i) = field.as_slice().iter().position(|&k| !(k > 0.0)) {
            return Err(Error::NonPositivePermeability {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(Self { field })
    }

    pub fn field(&self) -> &ScalarField2D {
        &self.field
    }
}

/// CO₂ saturation; every entry lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlumeState {
    saturation: ScalarField2D,
}

impl PlumeState {
    pub fn new(saturation: ScalarField2D) -> Result<Self> {
        if let Some(i) = saturation
            .as_slice()
            .iter()
            .position(|&s| !(0.0..=1.0).contains(&s))
        {
            return Err(Error::InvalidParameter(format!(
                "saturation entry {i} = {} outside [0, 1]",
                saturation.as_slice()[i]
            )));
        }
        Ok(Self { saturation })
    }

    /// Clamps every entry into `[0, 1]`.
    pub fn clamped(mut field: ScalarField2D) -> Self {
        for v in field.as_mut_slice() {
            *v = v.clamp(0.0, 1.0);
        }
        Self { saturation: field }
    }

    pub fn saturation(&self) -> &ScalarField2D {
        &self.saturation
    }

    pub fn into_field(self) -> ScalarField2D {
        self.saturation
    }

    pub fn dims(&self) -> (usize, usize) {
        self.saturation.dims()
    }

    /// Saturation block of value 1 centred on `cell`, clipped to the grid.
    pub fn injection_blob(rows: usize, cols: usize, cell: (usize, usize), radius: usize) -> Self {
        let (r0, c0) = cell;
        Self {
            saturation: ScalarField2D::from_fn(rows, cols, |r, c| {
                if r.abs_diff(r0) <= radius && c.abs_diff(c0) <= radius {
                    1.0
                } else {
                    0.0
                }
            }),
        }
    }
}

/// Plume samples at twin step `step`, each paired with the permeability that drives it.
#[derive(Debug, Clone, PartialEq)]
pub struct PlumeEnsemble {
    members: Vec<PlumeState>,
    perms: Arc<[PermeabilityField]>,
    step: usize,
}

impl PlumeEnsemble {
    pub fn new(
        members: Vec<PlumeState>,
        perms: Arc<[PermeabilityField]>,
        step: usize,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidParameter("ensemble must be nonempty".into()));
        }
        if members.len() != perms.len() {
            return Err(Error::DimMismatch(format!(
                "{} members but {} permeability fields",
                members.len(),
                perms.len()
            )));
        }
        let dims = members[0].dims();
        for (i, m) in members.iter().enumerate() {
            if m.dims() != dims || perms[i].field().dims() != dims {
                return Err(Error::DimMismatch(format!("ensemble member {i} grid")));
            }
        }
        Ok(Self {
            members,
            perms,
            step,
        })
    }

    pub fn members(&self) -> &[PlumeState] {
        &self.members
    }

    pub fn perms(&self) -> &Arc<[PermeabilityField]> {
        &self.perms
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.members[0].dims()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub injection_cell: (usize, usize),
    pub injection_rate: f64,
    pub dt: f64,
    pub steps_per_interval: usize,
    pub noise_sigma: f64,
    pub seismic_blur_radius: usize,
    pub seismic_sigma: f64,
}

impl SimParams {
    /// Defaults for a `rows x cols` slice: injector three quarters down the
    /// central column.
    pub fn for_grid(rows: usize, cols: usize) -> Self {
        Self {
            injection_cell: (rows * 3 / 4, cols / 2),
            injection_rate: 1.0,
            dt: 0.5,
            steps_per_interval: 80,
            noise_sigma: 0.02,
            seismic_blur_radius: 2,
            seismic_sigma: 0.1,
        }
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        let (r, c) = self.injection_cell;
        if r >= rows || c >= cols {
            return Err(Error::InvalidParameter(format!(
                "injection cell ({r}, {c}) outside {rows}x{cols} grid"
            )));
        }
        if !(self.injection_rate >= 0.0 && self.injection_rate.is_finite()) {
            return Err(Error::InvalidParameter(
                "injection_rate must be >= 0".into(),
            ));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter("dt must be > 0".into()));
        }
        if self.steps_per_interval == 0 {
            return Err(Error::InvalidParameter(
                "steps_per_interval must be >= 1".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.seismic_sigma >= 0.0) {
            return Err(Error::InvalidParameter("noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

/// Advances one member: pressure solve on its own permeability, then transport.
pub fn forecast_member(
    plume: &PlumeState,
    perm: &PermeabilityField,
    params: &SimParams,
) -> Result<PlumeState> {
    let (rows, cols) = plume.dims();
    let source = injection_source(rows, cols, params.injection_cell, params.injection_rate)?;
    let solution = solve_darcy(perm, &source)?;
    advance_plume(plume, &solution.velocity, params)
}

/// Pushes every member forward one monitoring interval. Member order and the
/// permeability list are preserved; the step counter advances by one.
pub fn forecast_ensemble(prior: &PlumeEnsemble, params: &SimParams) -> Result<PlumeEnsemble> {
    let (rows, cols) = prior.dims();
    params.validate(rows, cols)?;
    let members = prior
        .members
        .par_iter()
        .zip(prior.perms.par_iter())
        .enumerate()
        .map(|(i, (m, k))| forecast_member(m, k, params).map_err(|e| Error::member(i, e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PlumeEnsemble {
        members,
        perms: Arc::clone(&prior.perms),
        step: prior.step + 1,
    })
}
