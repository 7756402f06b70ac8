//! Gradient and invertibility audit of the hand-written backward passes.

use rand::Rng;

use crate::flow::{
    flow_forward, flow_inverse, loss_gradients, nll_loss, Conditioning, FlowArch, FlowParams,
    LatentVector,
};
use crate::nn::{grad_check, mlp_init, MlpParams};
use crate::rng::{derive_seed, rng_from_seed};
use crate::{Execution, Result, ScalarField2D};

/// Finite-difference step used by every check.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct AuditCheck {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
}

impl AuditCheck {
    pub fn passed(&self) -> bool {
        self.value < self.tolerance
    }
}

fn audit_arch() -> FlowArch {
    FlowArch {
        couplings: 4,
        coupling_hidden: 10,
        coupling_depth: 2,
        embed_dim: 5,
        conditioner_hidden: 6,
    }
}

/// Every weight random; positive biases keep most hidden units on the unit-slope
/// branch so central differences resolve the gradients.
fn randomise(m: &mut MlpParams, rng: &mut impl Rng) {
    for l in m.layers_mut() {
        l.weights
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-0.4..0.4));
        l.biases
            .iter_mut()
            .for_each(|b| *b = rng.random_range(0.1..0.5));
    }
}

fn random_flow(seed: u64, rows: usize, cols: usize) -> Result<FlowParams> {
    let mut f = FlowParams::init(seed, rows, cols, &audit_arch())?;
    let mut rng = rng_from_seed(derive_seed(seed, "audit-weights", 0));
    f.couplings_mut()
        .iter_mut()
        .for_each(|m| randomise(m, &mut rng));
    randomise(f.conditioner_mut(), &mut rng);
    f.log_scale_mut()
        .iter_mut()
        .for_each(|s| *s = rng.random_range(-0.3..0.3));
    Ok(f)
}

fn random_field(rng: &mut impl Rng, rows: usize, cols: usize) -> ScalarField2D {
    ScalarField2D::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_cond(
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
    seismic: bool,
) -> Result<Conditioning> {
    let columns: Vec<bool> = (0..cols).map(|_| rng.random::<bool>()).collect();
    let mask = ScalarField2D::from_fn(rows, cols, |_, c| columns[c] as u8 as f64);
    let y = random_field(rng, rows, cols);
    let obs = ScalarField2D::from_fn(rows, cols, |r, c| mask.get(r, c) * y.get(r, c));
    let s = seismic.then(|| random_field(rng, rows, cols));
    Conditioning::new(obs, mask, s)
}

/// Runs the full audit on a 2×4 problem (D = 8).
pub fn gradient_audit(seed: u64) -> Result<Vec<AuditCheck>> {
    let (rows, cols) = (2, 4);
    let mut rng = rng_from_seed(derive_seed(seed, "audit", 0));
    let mut checks = Vec::new();

    // plain MLP, parameters and inputs
    let mut mlp = mlp_init(derive_seed(seed, "audit-mlp", 0), &[5, 7, 7, 3], false)?;
    randomise(&mut mlp, &mut rng);
    let input: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sq = |out: &[f64]| {
        0.5 * out
            .iter()
            .zip(&target)
            .map(|(o, t)| (o - t).powi(2))
            .sum::<f64>()
    };
    let (out, tape) = mlp.apply(&input)?;
    let d_out: Vec<f64> = out.iter().zip(&target).map(|(o, t)| o - t).collect();
    let (g_params, g_input) = tape.backward(&mlp, &d_out);
    let flat = mlp.flatten();
    checks.push(AuditCheck {
        name: "mlp parameter gradient",
        value: grad_check(
            |p| {
                let mut m = mlp.clone();
                m.assign_flat(p).expect("length");
                sq(&m.output_only(&input).expect("dims"))
            },
            &flat,
            &g_params,
            FD_STEP,
        ),
        tolerance: 1e-4,
    });
    checks.push(AuditCheck {
        name: "mlp input gradient",
        value: grad_check(
            |x| sq(&mlp.output_only(x).expect("dims")),
            &input,
            &g_input,
            FD_STEP,
        ),
        tolerance: 1e-4,
    });

    // flow parameters over a mixed batch
    let flow = random_flow(derive_seed(seed, "audit-flow", 0), rows, cols)?;
    let batch = (0..3)
        .map(|i| {
            Ok((
                random_field(&mut rng, rows, cols),
                random_cond(&mut rng, rows, cols, i != 1)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = batch.iter().map(|(x, c)| (x, c)).collect();
    let g = loss_gradients(&flow, &refs, Execution::Sequential)?;
    let mean_loss = |f: &FlowParams| {
        batch
            .iter()
            .map(|(x, c)| nll_loss(f, x, c).expect("dims"))
            .sum::<f64>()
            / batch.len() as f64
    };
    checks.push(AuditCheck {
        name: "flow parameter gradient",
        value: grad_check(
            |p| {
                let mut f = flow.clone();
                f.assign_flat(p).expect("length");
                mean_loss(&f)
            },
            &flow.flatten(),
            &g.params,
            FD_STEP,
        ),
        tolerance: 1e-4,
    });

    // conditioning channels of a single sample
    let (x, cond) = &batch[0];
    let g = loss_gradients(&flow, &[(x, cond)], Execution::Sequential)?;
    let gc = &g.cond[0];
    let analytic: Vec<f64> = [&gc.masked_obs, &gc.mask, &gc.seismic]
        .iter()
        .flat_map(|f| f.as_slice().iter().copied())
        .collect();
    checks.push(AuditCheck {
        name: "flow conditioning gradient",
        value: grad_check(
            |v| {
                nll_loss(
                    &flow,
                    x,
                    &Conditioning::from_stacked_unchecked(v, rows, cols),
                )
                .expect("dims")
            },
            &cond.stacked(),
            &analytic,
            FD_STEP,
        ),
        tolerance: 1e-4,
    });

    // log-determinant against a central-difference Jacobian
    let (_, logdet) = flow_forward(&flow, x, cond)?;
    let d = rows * cols;
    let h = 1e-6;
    let mut jac = nalgebra::DMatrix::zeros(d, d);
    for j in 0..d {
        let mut up = x.clone();
        up.as_mut_slice()[j] += h;
        let mut down = x.clone();
        down.as_mut_slice()[j] -= h;
        let zu = flow_forward(&flow, &up, cond)?.0 .0;
        let zd = flow_forward(&flow, &down, cond)?.0 .0;
        for i in 0..d {
            jac[(i, j)] = (zu[i] - zd[i]) / (2.0 * h);
        }
    }
    checks.push(AuditCheck {
        name: "logdet vs numerical jacobian",
        value: (jac.determinant().abs().ln() - logdet).abs(),
        tolerance: 1e-5,
    });

    // invertibility both ways
    let mut worst = 0.0f64;
    for (x, cond) in &batch {
        let (z, _) = flow_forward(&flow, x, cond)?;
        worst = worst.max(flow_inverse(&flow, &z, cond)?.max_abs_diff(x));
        let z0 = LatentVector((0..d).map(|_| rng.random_range(-2.0..2.0)).collect());
        let (z1, _) = flow_forward(&flow, &flow_inverse(&flow, &z0, cond)?, cond)?;
        worst =
            z1.0.iter()
                .zip(&z0.0)
                .fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    checks.push(AuditCheck {
        name: "round-trip max error",
        value: worst,
        tolerance: 1e-8,
    });
    Ok(checks)
}
