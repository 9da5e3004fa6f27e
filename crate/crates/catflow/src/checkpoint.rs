//! Versioned binary checkpoint container.
//!
//! Layout: magic `CFCK`, a little-endian `u32` format version, a `u64`
//! header length, a JSON metadata header (field names, shapes, dtype,
//! endianness, step counters, RNG state, config echo), then the raw
//! little-endian `f64` payloads in header order. Writes go through a
//! temporary file and a rename so a crash never leaves a partial
//! checkpoint behind.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use catflow_core::denoiser::{DenoiserParams, DENOISER_FIELDS};
use catflow_core::embedding::EmbeddingTable;
use catflow_core::mat::Mat;
use catflow_core::rng::Rng;
use catflow_core::scheduler::SchedulerParams;
use catflow_core::trainer::{AdamState, EmaShadow, TrainState, PARAM_GROUPS};

use crate::config::RunConfig;
use crate::CliError;

const MAGIC: [u8; 4] = *b"CFCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct FieldMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    endianness: String,
    step: u64,
    adam_t: u64,
    rng_state: [String; 4],
    config: RunConfig,
    fields: Vec<FieldMeta>,
}

fn field_list(state: &TrainState) -> Vec<(String, Mat)> {
    let mut out = Vec::new();
    for (name, mat) in DENOISER_FIELDS.iter().zip(state.den.fields()) {
        out.push((name.to_string(), mat.clone()));
    }
    out.push(("table".to_string(), state.table.rows().clone()));
    out.push((
        "sched".to_string(),
        Mat::from_vec(1, 3, state.sched.raw().to_vec()),
    ));
    for (name, mat) in DENOISER_FIELDS.iter().zip(state.ema.den.fields()) {
        out.push((format!("ema.{name}"), mat.clone()));
    }
    out.push(("ema.table".to_string(), state.ema.table_rows.clone()));
    for (i, m) in state.opt.m.iter().enumerate() {
        out.push((format!("adam.m.{i}"), m.clone()));
    }
    for (i, v) in state.opt.v.iter().enumerate() {
        out.push((format!("adam.v.{i}"), v.clone()));
    }
    out
}

/// Serializes the checkpoint bytes; pure so tests can diff containers.
pub fn to_bytes(state: &TrainState, config: &RunConfig) -> Result<Vec<u8>, CliError> {
    let fields = field_list(state);
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: "f64".to_string(),
        endianness: "little".to_string(),
        step: state.step,
        adam_t: state.opt.t,
        rng_state: state.rng.state().map(|w| format!("{w:016x}")),
        config: config.clone(),
        fields: fields
            .iter()
            .map(|(name, m)| FieldMeta {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let payload_len: usize = fields.iter().map(|(_, m)| m.len() * 8).sum();
    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload_len);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, m) in &fields {
        for &x in m.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(bytes)
}

/// Atomic checkpoint write: temp file in the target directory, then rename.
pub fn save(state: &TrainState, config: &RunConfig, path: &Path) -> Result<(), CliError> {
    let bytes = to_bytes(state, config)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads and validates a checkpoint, reconstructing the full training
/// state (weights, EMA shadows, optimizer moments, RNG, config echo).
pub fn load(path: &Path) -> Result<(TrainState, RunConfig), CliError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(TrainState, RunConfig), CliError> {
    let need = |n: usize| -> Result<(), CliError> {
        if bytes.len() < n {
            Err(CliError::Checkpoint(format!(
                "truncated checkpoint: need {n} bytes, have {}",
                bytes.len()
            )))
        } else {
            Ok(())
        }
    };
    need(16)?;
    if bytes[..4] != MAGIC {
        return Err(CliError::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CliError::Checkpoint(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    need(16 + header_len)?;
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    if header.format_version != FORMAT_VERSION {
        return Err(CliError::Checkpoint(
            "header/container version mismatch".into(),
        ));
    }
    if header.dtype != "f64" || header.endianness != "little" {
        return Err(CliError::Checkpoint(format!(
            "unsupported payload encoding {}/{}",
            header.dtype, header.endianness
        )));
    }

    let payload = &bytes[16 + header_len..];
    let expected: usize = header.fields.iter().map(|f| f.rows * f.cols * 8).sum();
    if payload.len() != expected {
        return Err(CliError::Checkpoint(format!(
            "payload is {} bytes, header declares {expected}",
            payload.len()
        )));
    }

    let mut mats = Vec::with_capacity(header.fields.len());
    let mut offset = 0usize;
    for meta in &header.fields {
        let count = meta.rows * meta.cols;
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let start = offset + i * 8;
            data.push(f64::from_le_bytes(
                payload[start..start + 8].try_into().unwrap(),
            ));
        }
        offset += count * 8;
        mats.push(Mat::from_vec(meta.rows, meta.cols, data));
    }

    let config = header.config.clone();
    let train_cfg = config.train_config()?;
    let expected_names = expected_field_names();
    if header.fields.len() != expected_names.len() {
        return Err(CliError::Checkpoint(format!(
            "checkpoint has {} fields, expected {}",
            header.fields.len(),
            expected_names.len()
        )));
    }
    for (meta, want) in header.fields.iter().zip(expected_names.iter()) {
        if &meta.name != want {
            return Err(CliError::Checkpoint(format!(
                "field order mismatch: found `{}`, expected `{want}`",
                meta.name
            )));
        }
    }

    // Rebuild a template state to know the expected shapes, then overwrite.
    let mut state = TrainState::new(train_cfg)?;
    let mut it = mats.into_iter();
    {
        let fields = state.den.fields_mut();
        for f in fields {
            let m = it.next().unwrap();
            check_shape(f, &m)?;
            *f = m;
        }
    }
    {
        let m = it.next().unwrap();
        check_shape(state.table.rows(), &m)?;
        state.table = EmbeddingTable::from_projected(m)?;
    }
    {
        let m = it.next().unwrap();
        state.sched = SchedulerParams::from_raw([m.at(0, 0), m.at(0, 1), m.at(0, 2)]);
    }
    {
        let mut den = state.ema.den.clone();
        for f in den.fields_mut() {
            let m = it.next().unwrap();
            check_shape(f, &m)?;
            *f = m;
        }
        let table_rows = it.next().unwrap();
        check_shape(&state.ema.table_rows, &table_rows)?;
        state.ema = EmaShadow { den, table_rows };
    }
    {
        let mut m_moments = Vec::with_capacity(PARAM_GROUPS);
        for old in state.opt.m.iter() {
            let m = it.next().unwrap();
            check_shape(old, &m)?;
            m_moments.push(m);
        }
        let mut v_moments = Vec::with_capacity(PARAM_GROUPS);
        for old in state.opt.v.iter() {
            let v = it.next().unwrap();
            check_shape(old, &v)?;
            v_moments.push(v);
        }
        state.opt = AdamState {
            t: header.adam_t,
            m: m_moments,
            v: v_moments,
        };
    }
    state.step = header.step;
    let mut rng_state = [0u64; 4];
    for (w, s) in rng_state.iter_mut().zip(header.rng_state.iter()) {
        *w = u64::from_str_radix(s, 16)
            .map_err(|_| CliError::Checkpoint(format!("bad rng word `{s}`")))?;
    }
    state.rng = Rng::from_state(rng_state)
        .ok_or_else(|| CliError::Checkpoint("all-zero rng state".into()))?;
    Ok((state, config))
}

fn expected_field_names() -> Vec<String> {
    let mut names: Vec<String> = DENOISER_FIELDS.iter().map(|s| s.to_string()).collect();
    names.push("table".into());
    names.push("sched".into());
    names.extend(DENOISER_FIELDS.iter().map(|s| format!("ema.{s}")));
    names.push("ema.table".into());
    for i in 0..PARAM_GROUPS {
        names.push(format!("adam.m.{i}"));
    }
    for i in 0..PARAM_GROUPS {
        names.push(format!("adam.v.{i}"));
    }
    names
}

fn check_shape(expected: &Mat, got: &Mat) -> Result<(), CliError> {
    if expected.shape() != got.shape() {
        return Err(CliError::Checkpoint(format!(
            "shape mismatch: checkpoint field is {:?}, model expects {:?}",
            got.shape(),
            expected.shape()
        )));
    }
    Ok(())
}

/// Convenience view used by evaluation commands: EMA weights plus the
/// denoiser config and ramp value the checkpoint trained with.
pub struct EvalBundle {
    pub den: DenoiserParams,
    pub table: EmbeddingTable,
    pub sched: SchedulerParams,
    pub cfg: catflow_core::denoiser::DenoiserConfig,
    pub bias_ramp: f64,
    pub step: u64,
    pub seq_len: usize,
}

pub fn eval_bundle(state: &TrainState) -> Result<EvalBundle, CliError> {
    let (den, table) = state.eval_model()?;
    Ok(EvalBundle {
        den,
        table,
        sched: state.sched,
        cfg: state.config.denoiser_config(),
        bias_ramp: state.config.bias_ramp_at(state.step),
        step: state.step,
        seq_len: state.config.seq_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use catflow_core::corpus::MarkovProcess;
    use catflow_core::trainer::train_step;

    fn small_run(steps: usize) -> (TrainState, RunConfig) {
        let mut rc = RunConfig::default();
        rc.task = Some("iid8".into());
        rc.hidden = 8;
        rc.gamma_features = 4;
        rc.batch = 4;
        rc.seed = 9;
        let cfg = rc.train_config().unwrap();
        let mut state = TrainState::new(cfg).unwrap();
        let process = MarkovProcess::uniform_iid(8);
        for _ in 0..steps {
            train_step(&mut state, &process).unwrap();
        }
        (state, rc)
    }

    #[test]
    fn round_trip_is_field_exact() {
        let (state, rc) = small_run(7);
        let bytes = to_bytes(&state, &rc).unwrap();
        let (loaded, rc2) = from_bytes(&bytes).unwrap();
        assert_eq!(state, loaded);
        assert_eq!(
            serde_json::to_string(&rc).unwrap(),
            serde_json::to_string(&rc2).unwrap()
        );
        // Serialization is deterministic.
        assert_eq!(bytes, to_bytes(&loaded, &rc2).unwrap());
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let (state, rc) = small_run(2);
        let bytes = to_bytes(&state, &rc).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 9]).is_err());
        assert!(from_bytes(&bytes[..10]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(from_bytes(&bad_magic).is_err());
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        let err = from_bytes(&bad_version).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn save_then_load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck").join("state.ckpt");
        let (state, rc) = small_run(3);
        save(&state, &rc, &path).unwrap();
        let (loaded, _) = load(&path).unwrap();
        assert_eq!(state, loaded);
        // No temp file left behind.
        assert!(!path.with_extension("ckpt.tmp").exists());
    }
}
