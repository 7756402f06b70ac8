use rand_distr::{Distribution, Normal};

use super::{PlumeState, SimParams};
use crate::rng::rng_from_seed;
use crate::{Error, Result, ScalarField2D};

/// Mean over the `(2r+1)²` window, truncated at the grid edge.
pub fn box_blur(field: &ScalarField2D, radius: usize) -> ScalarField2D {
    if radius == 0 {
        return field.clone();
    }
    let (rows, cols) = field.dims();
    ScalarField2D::from_fn(rows, cols, |r, c| {
        let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(rows - 1));
        let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(cols - 1));
        let mut acc = 0.0;
        for rr in r0..=r1 {
            for cc in c0..=c1 {
                acc += field.get(rr, cc);
            }
        }
        acc / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64
    })
}

fn add_gaussian_noise(field: &mut ScalarField2D, sigma: f64, rng_seed: u64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = rng_from_seed(rng_seed);
    for v in field.as_mut_slice() {
        *v += normal.sample(&mut rng);
    }
    Ok(())
}

/// `y = x + ε`, `ε ~ N(0, σ²)` i.i.d. per cell. The result is not clamped.
pub fn corrupt_observation(
    x: &PlumeState,
    noise_sigma: f64,
    rng_seed: u64,
) -> Result<ScalarField2D> {
    let mut y = x.saturation().clone();
    add_gaussian_noise(&mut y, noise_sigma, rng_seed)?;
    Ok(y)
}

/// Blurred, noisy image of the plume standing in for imaged seismic.
pub fn seismic_surrogate(
    x: &PlumeState,
    params: &SimParams,
    rng_seed: u64,
) -> Result<ScalarField2D> {
    let mut img = box_blur(x.saturation(), params.seismic_blur_radius);
    add_gaussian_noise(&mut img, params.seismic_sigma, rng_seed)?;
    Ok(img)
}
