//! Checkpoint files, JSON reports and experiment configs.
//!
//! Task checkpoints and optimizer states share one tensor layout, so a
//! saved training state can be handed straight to the merger. Names:
//! `weights`, `init_weights`, `saliency`, `row_moments` (`m × 1`),
//! `col_moments` (`n × 1`), `momentum_u`, `momentum_sigma` (`1 × r`),
//! `momentum_v`, and optionally `error` and `dense_momentum`.

mod config;
pub mod container;

pub use config::{
    parse_config, read_config, ExperimentConfig, MergeConfig, TaskConfig, TaskKind, TrainConfig,
};
pub use container::{Container, NamedTensor};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, FormatError, Result};
use crate::merge::{importance_mask, TaskCheckpoint};
use crate::optimizer::{CurvatureStats, FactorizedMomentum, OptimizerState};
use crate::tensor::{Matrix, SvdFactors};

const KEY_NAME: &str = "umtam.name";
const KEY_STEP: &str = "umtam.step";
const KEY_SEED: &str = "umtam.seed";
const RESERVED_PREFIX: &str = "umtam.";
const KNOWN: [&str; 10] = [
    "weights",
    "init_weights",
    "saliency",
    "row_moments",
    "col_moments",
    "momentum_u",
    "momentum_sigma",
    "momentum_v",
    "error",
    "dense_momentum",
];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WriteOptions {
    /// Keep only the top-`k`% saliency entries and store them sparse.
    pub sparse_saliency_k: Option<f64>,
}

/// Write `bytes` to a sibling temp file and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Parameter(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn column(values: &[f64]) -> Result<Matrix> {
    Matrix::from_vec(values.len(), 1, values.to_vec())
}

fn vector_of(m: Matrix, name: &str, rows: usize) -> Result<Vec<f64>> {
    let (r, c) = m.shape();
    let ok = if rows == 1 { r == 1 } else { r == rows && c == 1 };
    if !ok {
        return Err(FormatError::Header(format!("tensor `{name}` has unexpected shape {r}×{c}")).into());
    }
    Ok(m.into_vec())
}

struct Parts {
    weights: Matrix,
    init_weights: Matrix,
    saliency: Matrix,
    curvature: CurvatureStats,
    momentum: SvdFactors,
    error: Option<Matrix>,
    dense_momentum: Option<Matrix>,
}

#[allow(clippy::too_many_arguments)]
fn build_container(
    weights: &Matrix,
    init_weights: &Matrix,
    saliency: &Matrix,
    curvature: &CurvatureStats,
    momentum: &SvdFactors,
    error: Option<&Matrix>,
    dense_momentum: Option<&Matrix>,
    opts: &WriteOptions,
) -> Result<Container> {
    let mut c = Container::default();
    c.push("weights", weights.clone());
    c.push("init_weights", init_weights.clone());
    match opts.sparse_saliency_k {
        Some(k) => {
            let mask = importance_mask(saliency, k)?;
            let kept = Matrix::from_fn(saliency.rows(), saliency.cols(), |i, j| {
                if mask.get(i, j) {
                    saliency[(i, j)]
                } else {
                    0.0
                }
            })?;
            c.push_sparse("saliency", kept);
        }
        None => c.push("saliency", saliency.clone()),
    }
    c.push("row_moments", column(&curvature.row_moments)?);
    c.push("col_moments", column(&curvature.col_moments)?);
    c.push("momentum_u", momentum.u.clone());
    c.push("momentum_sigma", Matrix::from_vec(1, momentum.rank(), momentum.sigma.clone())?);
    c.push("momentum_v", momentum.v.clone());
    if let Some(e) = error {
        c.push("error", e.clone());
    }
    if let Some(d) = dense_momentum {
        c.push("dense_momentum", d.clone());
    }
    Ok(c)
}

fn take_parts(c: &mut Container) -> Result<Parts> {
    let weights = c.require("weights")?;
    let (m, n) = weights.shape();
    let init_weights = c.require("init_weights")?;
    let saliency = c.require("saliency")?;
    let row_moments = vector_of(c.require("row_moments")?, "row_moments", m)?;
    let col_moments = vector_of(c.require("col_moments")?, "col_moments", n)?;
    let u = c.require("momentum_u")?;
    let sigma = vector_of(c.require("momentum_sigma")?, "momentum_sigma", 1)?;
    let v = c.require("momentum_v")?;
    if u.cols() != sigma.len() || v.cols() != sigma.len() || u.rows() != m || v.rows() != n {
        return Err(FormatError::Header("momentum factor shapes disagree".into()).into());
    }
    let parts = Parts {
        weights,
        init_weights,
        saliency,
        curvature: CurvatureStats {
            row_moments,
            col_moments,
        },
        momentum: SvdFactors { u, sigma, v },
        error: c.take("error"),
        dense_momentum: c.take("dense_momentum"),
    };
    for (name, t) in [
        ("init_weights", Some(&parts.init_weights)),
        ("saliency", Some(&parts.saliency)),
        ("error", parts.error.as_ref()),
        ("dense_momentum", parts.dense_momentum.as_ref()),
    ] {
        if let Some(t) = t {
            if t.shape() != (m, n) {
                return Err(FormatError::Header(format!("tensor `{name}` does not match weights shape")).into());
            }
        }
    }
    Ok(parts)
}

fn user_meta(metadata: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    metadata
        .iter()
        .filter(|(k, _)| !k.starts_with(RESERVED_PREFIX))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn check_meta_keys(meta: &BTreeMap<String, String>) -> Result<()> {
    if let Some(k) = meta.keys().find(|k| k.starts_with(RESERVED_PREFIX)) {
        return Err(Error::Parameter(format!("metadata key `{k}` uses the reserved prefix")));
    }
    Ok(())
}

pub fn encode_checkpoint(ckpt: &TaskCheckpoint, opts: &WriteOptions) -> Result<Vec<u8>> {
    ckpt.validate()?;
    check_meta_keys(&ckpt.meta)?;
    let mut c = build_container(
        &ckpt.weights,
        &ckpt.init_weights,
        &ckpt.saliency,
        &ckpt.curvature,
        &ckpt.momentum,
        ckpt.error.as_ref(),
        None,
        opts,
    )?;
    for (name, t) in &ckpt.extra {
        if KNOWN.contains(&name.as_str()) && name != "dense_momentum" {
            return Err(Error::Parameter(format!("extra tensor `{name}` shadows a standard tensor")));
        }
        c.push(name.clone(), t.clone());
    }
    c.metadata = ckpt.meta.clone();
    c.metadata.insert(KEY_NAME.into(), ckpt.name.clone());
    container::encode(&c)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TaskCheckpoint> {
    let mut c = container::decode(bytes)?;
    let parts = take_parts(&mut c)?;
    let mut extra: BTreeMap<String, Matrix> = c.tensors.into_iter().map(|t| (t.name, t.data)).collect();
    if let Some(d) = parts.dense_momentum {
        extra.insert("dense_momentum".into(), d);
    }
    let ckpt = TaskCheckpoint {
        name: c.metadata.get(KEY_NAME).cloned().unwrap_or_default(),
        weights: parts.weights,
        init_weights: parts.init_weights,
        saliency: parts.saliency,
        curvature: parts.curvature,
        momentum: parts.momentum,
        error: parts.error,
        meta: user_meta(&c.metadata),
        extra,
    };
    ckpt.validate()
        .map_err(|e| FormatError::Header(format!("inconsistent checkpoint: {e}")))?;
    Ok(ckpt)
}

pub fn write_checkpoint(ckpt: &TaskCheckpoint, path: &Path) -> Result<()> {
    write_checkpoint_with(ckpt, path, &WriteOptions::default())
}

pub fn write_checkpoint_with(ckpt: &TaskCheckpoint, path: &Path, opts: &WriteOptions) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt, opts)?)
}

pub fn read_checkpoint(path: &Path) -> Result<TaskCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Full optimizer state, readable later as either a state or a checkpoint.
pub fn encode_state(
    state: &OptimizerState,
    name: &str,
    meta: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    check_meta_keys(meta)?;
    let mut c = build_container(
        state.weights(),
        state.init_weights(),
        state.saliency(),
        state.curvature(),
        &state.momentum().factors,
        Some(&state.momentum().error),
        state.dense_momentum(),
        &WriteOptions::default(),
    )?;
    c.metadata = meta.clone();
    c.metadata.insert(KEY_NAME.into(), name.to_string());
    c.metadata.insert(KEY_STEP.into(), state.step().to_string());
    c.metadata.insert(KEY_SEED.into(), state.seed().to_string());
    container::encode(&c)
}

/// Decoded optimizer state plus its name and user metadata.
pub struct LoadedState {
    pub state: OptimizerState,
    pub name: String,
    pub meta: BTreeMap<String, String>,
}

pub fn decode_state(bytes: &[u8]) -> Result<LoadedState> {
    let mut c = container::decode(bytes)?;
    let parts = take_parts(&mut c)?;
    let number = |key: &str| -> Result<u64> {
        c.metadata
            .get(key)
            .ok_or_else(|| FormatError::Header(format!("missing metadata `{key}`")))?
            .parse()
            .map_err(|_| FormatError::Header(format!("metadata `{key}` is not an integer")).into())
    };
    let step = number(KEY_STEP)?;
    let seed = number(KEY_SEED)?;
    let error = parts
        .error
        .ok_or_else(|| FormatError::MissingTensor("error".into()))?;
    let state = OptimizerState::from_parts(
        parts.weights,
        parts.init_weights,
        FactorizedMomentum {
            factors: parts.momentum,
            error,
        },
        parts.dense_momentum,
        parts.curvature,
        parts.saliency,
        step,
        seed,
    )
    .map_err(|e| FormatError::Header(format!("inconsistent state: {e}")))?;
    Ok(LoadedState {
        state,
        name: c.metadata.get(KEY_NAME).cloned().unwrap_or_default(),
        meta: user_meta(&c.metadata),
    })
}

pub fn save_state(state: &OptimizerState, name: &str, meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_state(state, name, meta)?)
}

pub fn load_state(path: &Path) -> Result<LoadedState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_state(&bytes)
}

/// Single-tensor file holding merged weights.
pub fn write_weights(weights: &Matrix, meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    check_meta_keys(meta)?;
    let mut c = Container::default();
    c.push("weights", weights.clone());
    c.metadata = meta.clone();
    write_atomic(path, &container::encode(&c)?)
}

/// The `weights` tensor of any container file.
pub fn read_weights(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = container::decode(&bytes)?;
    let w = c.require("weights")?;
    w.ensure_finite("weights")?;
    Ok(w)
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_report<T: Serialize + ?Sized>(report: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(report)?;
    text.push(b'\n');
    write_atomic(path, &text)
}
