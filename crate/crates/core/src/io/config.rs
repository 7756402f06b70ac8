use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::sim::SimParams;
use crate::twin::TwinConfig;
use crate::{Error, Result};

/// Everything a CLI run needs: the twin configuration plus output plumbing.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub twin: TwinConfig,
    pub out_dir: PathBuf,
    pub label: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            twin: TwinConfig::default(),
            out_dir: PathBuf::from("out"),
            label: "run".to_string(),
        }
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

struct Entries(BTreeMap<String, String>);

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.0.remove(key) {
            *slot = raw.parse().map_err(|e: T::Err| Error::Config {
                key: key.to_string(),
                message: format!("cannot parse `{raw}`: {e}"),
            })?;
        }
        Ok(())
    }
}

/// Flat `key = value` lines. `#` starts a comment, blank lines are ignored,
/// string values may be double-quoted. Missing keys keep their defaults; the
/// injector position defaults relative to the configured grid.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            key: line.to_string(),
            message: format!("line {} is not `key = value`", n + 1),
        })?;
        let key = key.trim().to_string();
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value)
            .to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config {
                key,
                message: "given more than once".into(),
            });
        }
    }
    let mut e = Entries(map);
    let mut run = RunConfig::default();
    let t = &mut run.twin;

    e.take("rows", &mut t.rows)?;
    e.take("cols", &mut t.cols)?;
    t.sim = SimParams::for_grid(t.rows, t.cols);
    e.take("injection_row", &mut t.sim.injection_cell.0)?;
    e.take("injection_col", &mut t.sim.injection_cell.1)?;
    e.take("injection_rate", &mut t.sim.injection_rate)?;
    e.take("dt", &mut t.sim.dt)?;
    e.take("steps_per_interval", &mut t.sim.steps_per_interval)?;
    e.take("noise_sigma", &mut t.sim.noise_sigma)?;
    e.take("seismic_blur_radius", &mut t.sim.seismic_blur_radius)?;
    e.take("seismic_sigma", &mut t.sim.seismic_sigma)?;

    e.take("ensemble_size", &mut t.ensemble_size)?;
    e.take("iterations", &mut t.iterations)?;
    e.take("budget", &mut t.budget)?;
    e.take("epochs", &mut t.epochs)?;
    e.take("batch_size", &mut t.batch_size)?;
    e.take("lr_theta", &mut t.lr_theta)?;
    e.take("lr_design", &mut t.lr_design)?;
    e.take("initial_plume_radius", &mut t.initial_plume_radius)?;
    e.take("use_seismic", &mut t.use_seismic)?;
    e.take("std_floor", &mut t.std_floor)?;
    e.take("train_jitter", &mut t.train_jitter)?;

    e.take("perm_log_mean", &mut t.perm.log_mean)?;
    e.take("perm_layer_std", &mut t.perm.layer_std)?;
    e.take("perm_layer_thickness", &mut t.perm.layer_thickness)?;
    e.take("perm_perturb_std", &mut t.perm.perturb_std)?;
    e.take("perm_smooth_radius", &mut t.perm.smooth_radius)?;

    e.take("flow_couplings", &mut t.arch.couplings)?;
    e.take("coupling_hidden", &mut t.arch.coupling_hidden)?;
    e.take("coupling_depth", &mut t.arch.coupling_depth)?;
    e.take("embed_dim", &mut t.arch.embed_dim)?;
    e.take("conditioner_hidden", &mut t.arch.conditioner_hidden)?;

    e.take("seed", &mut t.seed)?;
    e.take("deterministic", &mut t.deterministic)?;
    e.take("out_dir", &mut run.out_dir)?;
    e.take("label", &mut run.label)?;

    if let Some(key) = e.0.keys().next() {
        return Err(Error::Config {
            key: key.clone(),
            message: "unknown key".into(),
        });
    }
    run.twin.validate().map_err(|err| Error::Config {
        key: "(config)".into(),
        message: err.to_string(),
    })?;
    Ok(run)
}

/// Canonical text form of a twin configuration; parses back to the same value.
pub fn render_config(cfg: &TwinConfig) -> String {
    let s = &cfg.sim;
    let p = &cfg.perm;
    let a = &cfg.arch;
    let lines: Vec<(&str, String)> = vec![
        ("rows", cfg.rows.to_string()),
        ("cols", cfg.cols.to_string()),
        ("injection_row", s.injection_cell.0.to_string()),
        ("injection_col", s.injection_cell.1.to_string()),
        ("injection_rate", format!("{:?}", s.injection_rate)),
        ("dt", format!("{:?}", s.dt)),
        ("steps_per_interval", s.steps_per_interval.to_string()),
        ("noise_sigma", format!("{:?}", s.noise_sigma)),
        ("seismic_blur_radius", s.seismic_blur_radius.to_string()),
        ("seismic_sigma", format!("{:?}", s.seismic_sigma)),
        ("ensemble_size", cfg.ensemble_size.to_string()),
        ("iterations", cfg.iterations.to_string()),
        ("budget", cfg.budget.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("lr_theta", format!("{:?}", cfg.lr_theta)),
        ("lr_design", format!("{:?}", cfg.lr_design)),
        ("initial_plume_radius", cfg.initial_plume_radius.to_string()),
        ("use_seismic", cfg.use_seismic.to_string()),
        ("std_floor", format!("{:?}", cfg.std_floor)),
        ("train_jitter", format!("{:?}", cfg.train_jitter)),
        ("perm_log_mean", format!("{:?}", p.log_mean)),
        ("perm_layer_std", format!("{:?}", p.layer_std)),
        ("perm_layer_thickness", p.layer_thickness.to_string()),
        ("perm_perturb_std", format!("{:?}", p.perturb_std)),
        ("perm_smooth_radius", p.smooth_radius.to_string()),
        ("flow_couplings", a.couplings.to_string()),
        ("coupling_hidden", a.coupling_hidden.to_string()),
        ("coupling_depth", a.coupling_depth.to_string()),
        ("embed_dim", a.embed_dim.to_string()),
        ("conditioner_hidden", a.conditioner_hidden.to_string()),
        ("seed", cfg.seed.to_string()),
        ("deterministic", cfg.deterministic.to_string()),
    ];
    lines
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

/// SHA-256 (hex) of [`render_config`].
pub fn config_digest(cfg: &TwinConfig) -> String {
    hex::encode(Sha256::digest(render_config(cfg).as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let run = parse_config_str("").unwrap();
        assert_eq!(run, RunConfig::default());
        let t = &run.twin;
        assert_eq!(
            (t.rows, t.cols, t.ensemble_size, t.iterations, t.budget),
            (32, 32, 64, 4, 1)
        );
    }

    #[test]
    fn overrides_and_comments() {
        let run = parse_config_str(
            "# twin\niterations = 2\n\nlabel = \"trial a\" # named\nlr_theta=5e-4\n",
        )
        .unwrap();
        assert_eq!(run.twin.iterations, 2);
        assert_eq!(run.label, "trial a");
        assert_eq!(run.twin.lr_theta, 5e-4);
    }

    #[test]
    fn injector_follows_grid() {
        let run = parse_config_str("rows = 16\ncols = 8").unwrap();
        assert_eq!(run.twin.sim.injection_cell, (12, 4));
        let run = parse_config_str("rows = 16\ncols = 8\ninjection_col = 1").unwrap();
        assert_eq!(run.twin.sim.injection_cell, (12, 1));
    }

    #[test]
    fn type_errors_name_the_key() {
        let err = parse_config_str("iterations = banana").unwrap_err();
        assert!(
            matches!(&err, Error::Config { key, .. } if key == "iterations"),
            "{err}"
        );
        assert!(err.to_string().contains("iterations"));
        let err = parse_config_str("use_seismic = maybe").unwrap_err();
        assert!(err.to_string().contains("use_seismic"));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let err = parse_config_str("iteration = 2").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
        assert!(parse_config_str("seed = 1\nseed = 2").is_err());
        assert!(parse_config_str("just words").is_err());
        assert!(parse_config_str("rows = 2").is_err());
        assert!(parse_config_str("iterations = 40").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut run = parse_config_str(
            "rows = 12\ncols = 10\nlr_design = 0.1\nseed = 99\nuse_seismic = false",
        )
        .unwrap();
        run.twin.sim.dt = 0.1 + 0.2;
        let back = parse_config_str(&render_config(&run.twin)).unwrap();
        assert_eq!(back.twin, run.twin);
        assert_eq!(config_digest(&back.twin), config_digest(&run.twin));
    }

    #[test]
    fn digest_tracks_content() {
        let a = TwinConfig::default();
        let b = TwinConfig {
            seed: 1,
            ..a.clone()
        };
        assert_eq!(config_digest(&a).len(), 64);
        assert_ne!(config_digest(&a), config_digest(&b));
    }
}
