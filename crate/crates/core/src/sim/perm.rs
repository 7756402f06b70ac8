use rand_distr::{Distribution, StandardNormal};

use super::observe::box_blur;
use super::PermeabilityField;
use crate::rng::rng_from_seed;
use crate::{Error, Result, ScalarField2D};

/// Layered log-normal permeability generator.
///
/// `log k(r, c) = log_mean + layer_level(r / layer_thickness) + g(r, c)` where the
/// layer levels are i.i.d. `N(0, layer_std²)` and `g` is white noise box-smoothed
/// with `smooth_radius` and rescaled to an interior marginal std of `perturb_std`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub log_mean: f64,
    pub layer_std: f64,
    pub layer_thickness: usize,
    pub perturb_std: f64,
    pub smooth_radius: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            log_mean: 0.0,
            layer_std: 1.0,
            layer_thickness: 2,
            perturb_std: 0.5,
            smooth_radius: 2,
        }
    }
}

pub fn sample_permeability(
    rng_seed: u64,
    rows: usize,
    cols: usize,
    gen: &GeneratorParams,
) -> Result<PermeabilityField> {
    if rows < 4 || cols < 4 {
        return Err(Error::GridTooSmall { rows, cols });
    }
    if !(gen.layer_std >= 0.0) || !(gen.perturb_std >= 0.0) || gen.layer_thickness == 0 {
        return Err(Error::InvalidParameter(
            "generator needs layer_std >= 0, perturb_std >= 0, layer_thickness >= 1".into(),
        ));
    }
    let mut rng = rng_from_seed(rng_seed);
    let n_layers = rows.div_ceil(gen.layer_thickness);
    let levels: Vec<f64> = (0..n_layers)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            gen.log_mean + gen.layer_std * z
        })
        .collect();

    let noise = ScalarField2D::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
    let smooth = box_blur(&noise, gen.smooth_radius);
    let window = (2 * gen.smooth_radius + 1) as f64;
    let scale = gen.perturb_std * window;

    let log_k = ScalarField2D::from_fn(rows, cols, |r, c| {
        levels[r / gen.layer_thickness] + scale * smooth.get(r, c)
    });
    let k = log_k.map(f64::exp);
    k.ensure_finite("permeability")?;
    PermeabilityField::new(k)
}
