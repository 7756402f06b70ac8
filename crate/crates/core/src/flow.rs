//! Conditional additive-coupling flow.
//!
//! Forward map: `K` additive couplings over alternating even/odd halves of the
//! flattened grid, `x_b <- x_b + t_i(x_a, e)`, followed by `z = x ⊙ exp(log_scale)`.
//! The conditioning embedding `e` is produced once per sample by a shared MLP over
//! `[masked_obs, mask, seismic]`. Couplings are volume preserving, so
//! `log|det J| = Σ log_scale` exactly.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::nn::{mlp_init, MlpParams, MlpTape};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sim::PlumeState;
use crate::{Error, Execution, Result, ScalarField2D};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowArch {
    pub couplings: usize,
    pub coupling_hidden: usize,
    /// hidden layers per coupling network
    pub coupling_depth: usize,
    pub embed_dim: usize,
    pub conditioner_hidden: usize,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self {
            couplings: 6,
            coupling_hidden: 128,
            coupling_depth: 2,
            embed_dim: 64,
            conditioner_hidden: 64,
        }
    }
}

impl FlowArch {
    /// Narrow single-hidden-layer nets. With a few dozen training members per
    /// iteration the default sizes mostly memorise, at four times the cost.
    pub fn compact() -> Self {
        Self {
            couplings: 4,
            coupling_hidden: 32,
            coupling_depth: 1,
            embed_dim: 32,
            conditioner_hidden: 64,
        }
    }
}

/// Observation channels the flow is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    masked_obs: ScalarField2D,
    mask: ScalarField2D,
    seismic: Option<ScalarField2D>,
}

impl Conditioning {
    pub fn new(
        masked_obs: ScalarField2D,
        mask: ScalarField2D,
        seismic: Option<ScalarField2D>,
    ) -> Result<Self> {
        masked_obs.ensure_same_dims(&mask, "masked observation vs mask")?;
        if let Some(s) = &seismic {
            s.ensure_same_dims(&mask, "seismic vs mask")?;
        }
        for (i, (&m, &y)) in mask
            .as_slice()
            .iter()
            .zip(masked_obs.as_slice())
            .enumerate()
        {
            if m != 0.0 && m != 1.0 {
                return Err(Error::InvalidParameter(format!(
                    "mask entry {i} = {m} is not binary"
                )));
            }
            if m == 0.0 && y != 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "masked observation nonzero at unobserved entry {i}"
                )));
            }
        }
        masked_obs.ensure_finite("masked observation")?;
        Ok(Self {
            masked_obs,
            mask,
            seismic,
        })
    }

    /// Nothing observed, no seismic.
    pub fn void(rows: usize, cols: usize) -> Self {
        Self {
            masked_obs: ScalarField2D::zeros(rows, cols),
            mask: ScalarField2D::zeros(rows, cols),
            seismic: None,
        }
    }

    pub fn masked_obs(&self) -> &ScalarField2D {
        &self.masked_obs
    }

    pub fn mask(&self) -> &ScalarField2D {
        &self.mask
    }

    pub fn seismic(&self) -> Option<&ScalarField2D> {
        self.seismic.as_ref()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    /// `[masked_obs, mask, seismic-or-zeros]`, each flattened row-major.
    /// Inverse of `stacked` without the mask checks; lets gradient audits
    /// perturb the mask channel continuously.
    pub(crate) fn from_stacked_unchecked(v: &[f64], rows: usize, cols: usize) -> Self {
        let d = rows * cols;
        let field =
            |s: &[f64]| ScalarField2D::from_vec(rows, cols, s.to_vec()).expect("channel length");
        Self {
            masked_obs: field(&v[..d]),
            mask: field(&v[d..2 * d]),
            seismic: Some(field(&v[2 * d..3 * d])),
        }
    }

    pub(crate) fn stacked(&self) -> Vec<f64> {
        let d = self.mask.len();
        let mut v = Vec::with_capacity(3 * d);
        v.extend_from_slice(self.masked_obs.as_slice());
        v.extend_from_slice(self.mask.as_slice());
        match &self.seismic {
            Some(s) => v.extend_from_slice(s.as_slice()),
            None => v.resize(3 * d, 0.0),
        }
        v
    }
}

/// Gradient of a loss with respect to each conditioning channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningGrad {
    pub masked_obs: ScalarField2D,
    pub mask: ScalarField2D,
    pub seismic: ScalarField2D,
}

/// Standard-normal latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams {
    rows: usize,
    cols: usize,
    couplings: Vec<MlpParams>,
    conditioner: MlpParams,
    log_scale: Vec<f64>,
    even: Vec<usize>,
    odd: Vec<usize>,
}

struct Trace {
    cond_tape: MlpTape,
    coupling_tapes: Vec<MlpTape>,
    z: Vec<f64>,
}

pub struct BatchGradients {
    /// mean loss over the batch
    pub loss: f64,
    pub per_sample_loss: Vec<f64>,
    /// gradient of the mean loss, in [`FlowParams::flatten`] order
    pub params: Vec<f64>,
    /// gradient of the mean loss w.r.t. each sample's conditioning
    pub cond: Vec<ConditioningGrad>,
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl FlowParams {
    /// Identity-at-init flow: coupling output layers and `log_scale` are zero.
    pub fn init(rng_seed: u64, rows: usize, cols: usize, arch: &FlowArch) -> Result<Self> {
        let d = rows * cols;
        if d < 2 {
            return Err(Error::InvalidParameter(
                "flow needs at least two dimensions".into(),
            ));
        }
        if arch.couplings < 2 || arch.embed_dim == 0 {
            return Err(Error::InvalidParameter(
                "flow needs at least two couplings and a nonempty embedding".into(),
            ));
        }
        let even: Vec<usize> = (0..d).step_by(2).collect();
        let odd: Vec<usize> = (1..d).step_by(2).collect();
        let couplings = (0..arch.couplings)
            .map(|i| {
                let (n_active, n_passive) = if i % 2 == 0 {
                    (even.len(), odd.len())
                } else {
                    (odd.len(), even.len())
                };
                let mut sizes = vec![n_active + arch.embed_dim];
                sizes.extend(std::iter::repeat_n(
                    arch.coupling_hidden,
                    arch.coupling_depth,
                ));
                sizes.push(n_passive);
                mlp_init(derive_seed(rng_seed, "coupling", i as u64), &sizes, true)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cond_sizes = vec![3 * d];
        if arch.conditioner_hidden > 0 {
            cond_sizes.push(arch.conditioner_hidden);
        }
        cond_sizes.push(arch.embed_dim);
        let conditioner = mlp_init(derive_seed(rng_seed, "conditioner", 0), &cond_sizes, false)?;
        Ok(Self {
            rows,
            cols,
            couplings,
            conditioner,
            log_scale: vec![0.0; d],
            even,
            odd,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn embed_dim(&self) -> usize {
        self.conditioner.output_dim()
    }

    pub fn couplings(&self) -> &[MlpParams] {
        &self.couplings
    }

    pub fn couplings_mut(&mut self) -> &mut [MlpParams] {
        &mut self.couplings
    }

    pub fn conditioner(&self) -> &MlpParams {
        &self.conditioner
    }

    pub fn conditioner_mut(&mut self) -> &mut MlpParams {
        &mut self.conditioner
    }

    pub fn log_scale(&self) -> &[f64] {
        &self.log_scale
    }

    pub fn log_scale_mut(&mut self) -> &mut [f64] {
        &mut self.log_scale
    }

    pub fn num_params(&self) -> usize {
        self.couplings
            .iter()
            .map(MlpParams::num_params)
            .sum::<usize>()
            + self.conditioner.num_params()
            + self.log_scale.len()
    }

    /// Couplings in order, then the conditioner, then `log_scale`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for c in &self.couplings {
            c.flatten_into(&mut out);
        }
        self.conditioner.flatten_into(&mut out);
        out.extend_from_slice(&self.log_scale);
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimMismatch(format!(
                "{} values for {} flow parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for c in &mut self.couplings {
            at += c.assign_flat(&flat[at..])?;
        }
        at += self.conditioner.assign_flat(&flat[at..])?;
        self.log_scale.copy_from_slice(&flat[at..]);
        Ok(())
    }

    fn halves(&self, i: usize) -> (&[usize], &[usize]) {
        if i % 2 == 0 {
            (&self.even, &self.odd)
        } else {
            (&self.odd, &self.even)
        }
    }

    fn check_dims(&self, dims: (usize, usize), what: &str) -> Result<()> {
        if dims != (self.rows, self.cols) {
            return Err(Error::DimMismatch(format!(
                "{what} is {}x{}, flow expects {}x{}",
                dims.0, dims.1, self.rows, self.cols
            )));
        }
        Ok(())
    }

    fn coupling_input(&self, active: &[usize], x: &[f64], emb: &[f64]) -> Vec<f64> {
        let mut input = Vec::with_capacity(active.len() + emb.len());
        input.extend(active.iter().map(|&j| x[j]));
        input.extend_from_slice(emb);
        input
    }

    fn trace(&self, x: &ScalarField2D, cond: &Conditioning) -> Result<Trace> {
        self.check_dims(x.dims(), "input field")?;
        self.check_dims(cond.dims(), "conditioning")?;
        let (emb, cond_tape) = self.conditioner.apply(&cond.stacked())?;
        check_finite(&emb, "conditioning embedding")?;
        let mut u = x.as_slice().to_vec();
        let mut coupling_tapes = Vec::with_capacity(self.couplings.len());
        for (i, net) in self.couplings.iter().enumerate() {
            let (active, passive) = self.halves(i);
            let (shift, tape) = net.apply(&self.coupling_input(active, &u, &emb))?;
            for (&j, s) in passive.iter().zip(&shift) {
                u[j] += s;
            }
            check_finite(&u, "coupling output")?;
            coupling_tapes.push(tape);
        }
        let z: Vec<f64> = u
            .iter()
            .zip(&self.log_scale)
            .map(|(v, s)| v * s.exp())
            .collect();
        check_finite(&z, "latent")?;
        Ok(Trace {
            cond_tape,
            coupling_tapes,
            z,
        })
    }

    /// Backpropagates `½‖z‖² − Σ log_scale` for one traced sample. Parameter
    /// gradients are added into `grads`; the conditioning gradient is returned.
    fn backward(&self, trace: &Trace, grads: &mut [f64]) -> Vec<f64> {
        let d = self.dim();
        let n_coupling: usize = self.couplings.iter().map(MlpParams::num_params).sum();
        let n_cond = self.conditioner.num_params();
        let (g_couplings, rest) = grads.split_at_mut(n_coupling);
        let (g_cond, g_scale) = rest.split_at_mut(n_cond);

        let mut g_u = vec![0.0; d];
        for j in 0..d {
            let z = trace.z[j];
            g_scale[j] += z * z - 1.0;
            g_u[j] = z * self.log_scale[j].exp();
        }

        let mut g_emb = vec![0.0; self.embed_dim()];
        let mut offsets = Vec::with_capacity(self.couplings.len());
        let mut at = 0;
        for c in &self.couplings {
            offsets.push(at);
            at += c.num_params();
        }
        for i in (0..self.couplings.len()).rev() {
            let net = &self.couplings[i];
            let (active, passive) = self.halves(i);
            let d_shift: Vec<f64> = passive.iter().map(|&j| g_u[j]).collect();
            let seg = &mut g_couplings[offsets[i]..offsets[i] + net.num_params()];
            let d_in = trace.coupling_tapes[i]
                .backward_into(net, &d_shift, seg, true)
                .expect("input gradient requested");
            for (k, &j) in active.iter().enumerate() {
                g_u[j] += d_in[k];
            }
            for (g, v) in g_emb.iter_mut().zip(&d_in[active.len()..]) {
                *g += v;
            }
        }
        trace
            .cond_tape
            .backward_into(&self.conditioner, &g_emb, g_cond, true)
            .expect("input gradient requested")
    }
}

/// Conditioner MLP applied to the stacked conditioning channels.
pub fn embed_condition(params: &FlowParams, cond: &Conditioning) -> Result<Vec<f64>> {
    params.check_dims(cond.dims(), "conditioning")?;
    params.conditioner.output_only(&cond.stacked())
}

/// `x -> (z, log|det J|)`.
pub fn flow_forward(
    params: &FlowParams,
    x: &ScalarField2D,
    cond: &Conditioning,
) -> Result<(LatentVector, f64)> {
    let trace = params.trace(x, cond)?;
    Ok((LatentVector(trace.z), params.log_scale.iter().sum()))
}

fn inverse_with_embedding(params: &FlowParams, z: &[f64], emb: &[f64]) -> Result<ScalarField2D> {
    let mut u: Vec<f64> = z
        .iter()
        .zip(&params.log_scale)
        .map(|(v, s)| v * (-s).exp())
        .collect();
    for (i, net) in params.couplings.iter().enumerate().rev() {
        let (active, passive) = params.halves(i);
        let shift = net.output_only(&params.coupling_input(active, &u, emb))?;
        for (&j, s) in passive.iter().zip(&shift) {
            u[j] -= s;
        }
    }
    check_finite(&u, "inverse flow output")?;
    ScalarField2D::from_vec(params.rows, params.cols, u)
}

/// Exact inverse of [`flow_forward`]. The result is not clamped.
pub fn flow_inverse(
    params: &FlowParams,
    z: &LatentVector,
    cond: &Conditioning,
) -> Result<ScalarField2D> {
    if z.0.len() != params.dim() {
        return Err(Error::DimMismatch(format!(
            "latent of length {}, flow dimension {}",
            z.0.len(),
            params.dim()
        )));
    }
    check_finite(&z.0, "latent")?;
    let emb = embed_condition(params, cond)?;
    inverse_with_embedding(params, &z.0, &emb)
}

/// Per-sample negative log-likelihood `½‖z‖² − log|det J|` (Gaussian constant dropped).
pub fn nll_loss(params: &FlowParams, x: &ScalarField2D, cond: &Conditioning) -> Result<f64> {
    let (z, logdet) = flow_forward(params, x, cond)?;
    Ok(0.5 * z.0.iter().map(|v| v * v).sum::<f64>() - logdet)
}

/// Mean loss over `batch` and its exact gradients with respect to every flow
/// parameter and every conditioning entry. Per-sample gradients are reduced in
/// batch order, so the result is bit-identical for either execution mode.
pub fn loss_gradients(
    params: &FlowParams,
    batch: &[(&ScalarField2D, &Conditioning)],
    exec: Execution,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let n = params.num_params();
    let d = params.dim();
    let logdet: f64 = params.log_scale.iter().sum();
    let inv_b = 1.0 / batch.len() as f64;

    let one = |(i, (x, cond)): (usize, &(&ScalarField2D, &Conditioning)), grads: &mut [f64]| {
        let trace = params.trace(x, cond).map_err(|e| Error::sample(i, e))?;
        let loss = 0.5 * trace.z.iter().map(|v| v * v).sum::<f64>() - logdet;
        if !loss.is_finite() {
            return Err(Error::sample(i, Error::NonFinite("loss".into())));
        }
        let g_cond = params.backward(&trace, grads);
        Ok((loss, g_cond))
    };

    let mut total = vec![0.0; n];
    let per_sample: Vec<(f64, Vec<f64>)> = match exec {
        Execution::Sequential => batch
            .iter()
            .enumerate()
            .map(|item| one(item, &mut total))
            .collect::<Result<_>>()?,
        Execution::Parallel => {
            let parts = batch
                .par_iter()
                .enumerate()
                .map(|item| {
                    let mut g = vec![0.0; n];
                    one(item, &mut g).map(|r| (r, g))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut out = Vec::with_capacity(parts.len());
            for (r, g) in parts {
                for (t, v) in total.iter_mut().zip(&g) {
                    *t += v;
                }
                out.push(r);
            }
            out
        }
    };
    for t in &mut total {
        *t *= inv_b;
    }
    if total.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }

    let (rows, cols) = params.dims();
    let mut losses = Vec::with_capacity(batch.len());
    let mut cond = Vec::with_capacity(batch.len());
    for (loss, g) in per_sample {
        losses.push(loss);
        let scaled: Vec<f64> = g.iter().map(|v| v * inv_b).collect();
        cond.push(ConditioningGrad {
            masked_obs: ScalarField2D::from_vec(rows, cols, scaled[..d].to_vec())?,
            mask: ScalarField2D::from_vec(rows, cols, scaled[d..2 * d].to_vec())?,
            seismic: ScalarField2D::from_vec(rows, cols, scaled[2 * d..].to_vec())?,
        });
    }
    let loss = losses.iter().sum::<f64>() * inv_b;
    Ok(BatchGradients {
        loss,
        per_sample_loss: losses,
        params: total,
        cond,
    })
}

/// Unclamped posterior draws `f⁻¹(z; cond)`, `z ~ N(0, I)`; draw `j` uses a seed
/// derived from `(rng_seed, j)`.
pub fn sample_posterior_raw(
    params: &FlowParams,
    cond: &Conditioning,
    n: usize,
    rng_seed: u64,
) -> Result<Vec<ScalarField2D>> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "need at least one posterior sample".into(),
        ));
    }
    let emb = embed_condition(params, cond)?;
    let d = params.dim();
    (0..n)
        .into_par_iter()
        .map(|j| {
            let mut rng = rng_from_seed(derive_seed(rng_seed, "posterior", j as u64));
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            inverse_with_embedding(params, &z, &emb)
        })
        .collect()
}

/// Posterior plume samples, clamped into `[0, 1]`.
pub fn sample_posterior(
    params: &FlowParams,
    cond: &Conditioning,
    n: usize,
    rng_seed: u64,
) -> Result<Vec<PlumeState>> {
    Ok(sample_posterior_raw(params, cond, n, rng_seed)?
        .into_iter()
        .map(PlumeState::clamped)
        .collect())
}
