use std::path::Path;
use std::sync::Arc;

use crate::design::WellDesignState;
use crate::flow::FlowParams;
use crate::nn::AdamState;
use crate::oracle::IterationMetrics;
use crate::sim::{PlumeEnsemble, PlumeState};
use crate::twin::{prior_permeabilities, truth_permeability, Method, TwinConfig, TwinState};
use crate::{Error, Result, ScalarField2D};

pub const GRID_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

const GRID_MAGIC: &[u8; 4] = b"BEAC";
const CKPT_MAGIC: &[u8; 4] = b"BCKP";

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }

    fn field(&mut self, f: &ScalarField2D) {
        self.u32(f.rows() as u32);
        self.u32(f.cols() as u32);
        f.as_slice().iter().for_each(|&x| self.f64(x));
    }

    fn adam(&mut self, a: &AdamState) {
        self.u64(a.t);
        self.f64(a.beta1);
        self.f64(a.beta2);
        self.f64(a.eps);
        self.f64s(&a.m);
        self.f64s(&a.v);
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Format("truncated".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.bytes(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.bytes(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.bytes(8)?.try_into().expect("8 bytes"),
        ))
    }

    /// Length prefix, checked against the bytes that remain so a corrupt count
    /// cannot trigger a huge allocation.
    fn len(&mut self, elem_size: usize) -> Result<usize> {
        let n = self.u64()?;
        if n.checked_mul(elem_size as u64)
            .is_none_or(|b| b > self.0.len() as u64)
        {
            return Err(Error::Format("truncated".into()));
        }
        Ok(n as usize)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn field(&mut self) -> Result<ScalarField2D> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Format(format!("grid dimensions {rows}x{cols} overflow")))?;
        if self.0.len() < n * 8 {
            return Err(Error::Format("truncated".into()));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        ScalarField2D::from_vec(rows, cols, data)
    }

    fn adam(&mut self) -> Result<AdamState> {
        let t = self.u64()?;
        let (beta1, beta2, eps) = (self.f64()?, self.f64()?, self.f64()?);
        let m = self.f64s()?;
        let v = self.f64s()?;
        if m.len() != v.len() {
            return Err(Error::Format("optimizer moments differ in length".into()));
        }
        Ok(AdamState {
            m,
            v,
            t,
            beta1,
            beta2,
            eps,
        })
    }

    fn finish(&self) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", self.0.len())))
        }
    }
}

fn encode_grid(field: &ScalarField2D) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(12 + 8 * field.len()));
    w.0.extend_from_slice(GRID_MAGIC);
    w.u32(GRID_VERSION);
    w.field(field);
    w.0
}

fn decode_grid(bytes: &[u8]) -> Result<ScalarField2D> {
    if bytes.len() < 4 || &bytes[..4] != GRID_MAGIC {
        return Err(Error::Format("not a BEAC grid".into()));
    }
    let mut r = Reader(&bytes[4..]);
    let version = r.u32()?;
    if version != GRID_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let field = r.field()?;
    r.finish()?;
    Ok(field)
}

pub fn save_grid(field: &ScalarField2D, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, encode_grid(field))?)
}

pub fn load_grid(path: &Path) -> Result<ScalarField2D> {
    decode_grid(&std::fs::read(path)?)
}

/// Resumable twin state. Permeability fields are not stored; they are
/// regenerated from the config seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub k: u64,
    pub method: Method,
    /// SHA-256 of the canonical config the run was started with
    pub config_digest: [u8; 32],
    /// flow parameters in flattening order
    pub flow: Vec<f64>,
    pub logits: Vec<f64>,
    pub drilled: Vec<u64>,
    pub flow_adam: AdamState,
    pub design_adam: AdamState,
    pub prior: Vec<ScalarField2D>,
    pub truth: ScalarField2D,
    pub metrics: Vec<IterationMetrics>,
}

impl Checkpoint {
    pub fn from_state(state: &TwinState, cfg: &TwinConfig, method: Method) -> Self {
        let mut digest = [0u8; 32];
        hex::decode_to_slice(super::config_digest(cfg), &mut digest).expect("sha256 hex");
        Self {
            k: state.k as u64,
            method,
            config_digest: digest,
            flow: state.flow.flatten(),
            logits: state.design.logits.clone(),
            drilled: state.design.drilled.iter().map(|&c| c as u64).collect(),
            flow_adam: state.flow_adam.clone(),
            design_adam: state.design_adam.clone(),
            prior: state
                .prior
                .members()
                .iter()
                .map(|m| m.saturation().clone())
                .collect(),
            truth: state.truth.saturation().clone(),
            metrics: state.metrics.clone(),
        }
    }

    /// Rebuilds the twin state. Fails if `cfg` is not the config the checkpoint
    /// was written under.
    pub fn into_state(self, cfg: &TwinConfig) -> Result<TwinState> {
        if hex::encode(self.config_digest) != super::config_digest(cfg) {
            return Err(Error::Format(
                "checkpoint was written under a different config".into(),
            ));
        }
        let mut flow = FlowParams::init(0, cfg.rows, cfg.cols, &cfg.arch)?;
        flow.assign_flat(&self.flow)?;
        if self.flow_adam.len() != flow.num_params() {
            return Err(Error::Format(
                "flow optimizer state does not match the flow".into(),
            ));
        }
        let drilled = self.drilled.iter().map(|&c| c as usize).collect();
        let design = WellDesignState::new(self.logits, cfg.budget, drilled)?;
        if self.design_adam.len() != design.candidates() {
            return Err(Error::Format(
                "design optimizer state does not match the design".into(),
            ));
        }
        let members = self
            .prior
            .into_iter()
            .map(PlumeState::new)
            .collect::<Result<Vec<_>>>()?;
        let perms = prior_permeabilities(cfg)?;
        Ok(TwinState {
            k: self.k as usize,
            prior: PlumeEnsemble::new(members, Arc::clone(&perms), self.k as usize)?,
            design,
            flow,
            flow_adam: self.flow_adam,
            design_adam: self.design_adam,
            truth: PlumeState::new(self.truth)?,
            truth_perm: truth_permeability(cfg)?,
            metrics: self.metrics,
        })
    }

    fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CKPT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.k);
        w.u32(match self.method {
            Method::Beacon => 0,
            Method::Random => 1,
        });
        w.0.extend_from_slice(&self.config_digest);
        w.f64s(&self.flow);
        w.f64s(&self.logits);
        w.u64(self.drilled.len() as u64);
        self.drilled.iter().for_each(|&c| w.u64(c));
        w.adam(&self.flow_adam);
        w.adam(&self.design_adam);
        w.u64(self.prior.len() as u64);
        self.prior.iter().for_each(|f| w.field(f));
        w.field(&self.truth);
        w.u64(self.metrics.len() as u64);
        for m in &self.metrics {
            w.u64(m.k as u64);
            w.f64(m.rmse);
            w.f64(m.mean_posterior_std);
            w.u64(m.drilled_column as u64);
            w.f64(m.final_train_loss);
        }
        w.0
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CKPT_MAGIC {
            return Err(Error::Format("not a BCKP checkpoint".into()));
        }
        let mut r = Reader(&bytes[4..]);
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let k = r.u64()?;
        let method = match r.u32()? {
            0 => Method::Beacon,
            1 => Method::Random,
            other => return Err(Error::Format(format!("unknown method tag {other}"))),
        };
        let config_digest = r.bytes(32)?.try_into().expect("32 bytes");
        let flow = r.f64s()?;
        let logits = r.f64s()?;
        let n = r.len(8)?;
        let drilled = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let flow_adam = r.adam()?;
        let design_adam = r.adam()?;
        let n = r.len(8)?;
        let prior = (0..n).map(|_| r.field()).collect::<Result<Vec<_>>>()?;
        let truth = r.field()?;
        let n = r.len(40)?;
        let metrics = (0..n)
            .map(|_| {
                Ok(IterationMetrics {
                    k: r.u64()? as usize,
                    rmse: r.f64()?,
                    mean_posterior_std: r.f64()?,
                    drilled_column: r.u64()? as usize,
                    final_train_loss: r.f64()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self {
            k,
            method,
            config_digest,
            flow,
            logits,
            drilled,
            flow_adam,
            design_adam,
            prior,
            truth,
            metrics,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, ckpt.encode())?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&std::fs::read(path)?)
}
