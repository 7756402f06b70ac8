use super::{PlumeState, SimParams, VelocityField};
use crate::{Error, Result, ScalarField2D};

/// Explicit first-order upwind transport in conservative flux form with a point
/// injection source. Runs `steps_per_interval` substeps of `dt` and clamps the
/// result into `[0, 1]` only at the end of the interval, so that before clamping
/// the total saturation changes by exactly `injection_rate * dt * steps`.
pub fn advance_plume(
    sat: &PlumeState,
    vel: &VelocityField,
    params: &SimParams,
) -> Result<PlumeState> {
    let raw = advance_unclamped(sat.saturation(), vel, params)?;
    Ok(PlumeState::clamped(raw))
}

pub(crate) fn advance_unclamped(
    sat: &ScalarField2D,
    vel: &VelocityField,
    params: &SimParams,
) -> Result<ScalarField2D> {
    let (rows, cols) = sat.dims();
    if !vel.is_consistent() || vel.cell_dims() != (rows, cols) {
        return Err(Error::DimMismatch(
            "velocity faces vs saturation grid".into(),
        ));
    }
    params.validate(rows, cols)?;
    let courant = params.dt * vel.max_cell_outflow();
    if courant > 1.0 {
        return Err(Error::CflViolated { courant });
    }

    let dt = params.dt;
    let (ir, ic) = params.injection_cell;
    let inj = ir * cols + ic;
    let mut s = sat.as_slice().to_vec();
    let mut next = s.clone();
    for _ in 0..params.steps_per_interval {
        next.copy_from_slice(&s);
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    let u = vel.vx.get(r, c + 1);
                    let flux = if u > 0.0 { u * s[i] } else { u * s[i + 1] };
                    next[i] -= dt * flux;
                    next[i + 1] += dt * flux;
                }
                if r + 1 < rows {
                    let u = vel.vy.get(r + 1, c);
                    let flux = if u > 0.0 { u * s[i] } else { u * s[i + cols] };
                    next[i] -= dt * flux;
                    next[i + cols] += dt * flux;
                }
            }
        }
        next[inj] += dt * params.injection_rate;
        std::mem::swap(&mut s, &mut next);
    }
    ScalarField2D::from_vec(rows, cols, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{injection_source, sample_permeability, solve_darcy, GeneratorParams};

    fn params(rate: f64, dt: f64, steps: usize) -> SimParams {
        SimParams {
            injection_cell: (4, 4),
            injection_rate: rate,
            dt,
            steps_per_interval: steps,
            ..SimParams::for_grid(8, 8)
        }
    }

    fn center_of_mass_col(f: &ScalarField2D) -> f64 {
        let mut m = 0.0;
        let mut mc = 0.0;
        for r in 0..f.rows() {
            for c in 0..f.cols() {
                m += f.get(r, c);
                mc += c as f64 * f.get(r, c);
            }
        }
        mc / m
    }

    #[test]
    fn null_dynamics_is_identity() {
        let x = PlumeState::injection_blob(8, 8, (3, 3), 1);
        let out = advance_plume(&x, &VelocityField::zeros(8, 8), &params(0.0, 0.5, 10)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn injection_adds_exact_mass() {
        let x = PlumeState::new(ScalarField2D::zeros(8, 8)).unwrap();
        let p = params(0.01, 0.5, 10);
        let out = advance_unclamped(x.saturation(), &VelocityField::zeros(8, 8), &p).unwrap();
        assert!((out.sum() - 0.01 * 0.5 * 10.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_drift_moves_centre_of_mass() {
        let (rows, cols) = (8, 32);
        let x = PlumeState::injection_blob(rows, cols, (4, 8), 1);
        let vel = VelocityField::uniform(rows, cols, 0.4, 0.0);
        let p = SimParams {
            injection_cell: (0, 0),
            injection_rate: 0.0,
            dt: 0.5,
            steps_per_interval: 40,
            ..SimParams::for_grid(rows, cols)
        };
        let out = advance_unclamped(x.saturation(), &vel, &p).unwrap();
        let shift = center_of_mass_col(&out) - center_of_mass_col(x.saturation());
        assert!((shift - 0.4 * 0.5 * 40.0).abs() < 1.0, "shift {shift}");
    }

    #[test]
    fn closed_domain_conserves_mass() {
        let perm = sample_permeability(3, 12, 12, &GeneratorParams::default()).unwrap();
        let q = injection_source(12, 12, (8, 6), 1.0).unwrap();
        let vel = solve_darcy(&perm, &q).unwrap().velocity;
        let x = ScalarField2D::from_fn(12, 12, |r, c| 0.3 + 0.02 * ((r + 2 * c) % 5) as f64);
        let p = SimParams {
            injection_cell: (8, 6),
            injection_rate: 0.0,
            dt: 0.2,
            steps_per_interval: 5,
            ..SimParams::for_grid(12, 12)
        };
        let out = advance_unclamped(&x, &vel, &p).unwrap();
        assert!((out.sum() - x.sum()).abs() < 1e-10);
    }

    #[test]
    fn cfl_guard_fires() {
        let x = PlumeState::injection_blob(8, 8, (3, 3), 1);
        let vel = VelocityField::uniform(8, 8, 1.0, 1.0);
        let err = advance_plume(&x, &vel, &params(0.0, 0.6, 1)).unwrap_err();
        assert!(err.to_string().contains("CFL violated, reduce dt"));
        assert!(advance_plume(&x, &vel, &params(0.0, 0.5, 1)).is_ok());
    }
}
