//! Versioned binary checkpoints.
//!
//! Layout: magic `CATFIELD`, `u32` version, `u32` header length, a JSON
//! header (configuration, box, mirror table, tensor lengths, optimizer step
//! counters), then every tensor as little-endian `f32` in header order:
//! parameters, and when present the first and second optimizer moments.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Field, FieldConfig, FieldError, ParamSet, Real};
use crate::raybank::BBox;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CATFIELD";
const VERSION: u32 = 1;

/// Adam moments and per-group step counters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    /// Steps taken per parameter group, in [`ParamSet::groups`] order.
    pub steps: Vec<u64>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: vec![0; params.groups().len()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub field: Field<f32>,
    pub optimizer: Option<OptimizerState>,
    /// Completed training epochs.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: FieldConfig,
    bbox: BBox,
    mirrors: usize,
    anchor: usize,
    epoch: usize,
    groups: Vec<(String, usize)>,
    optimizer_steps: Option<Vec<u64>>,
}

fn write_set<W: Write>(w: &mut W, set: &ParamSet<f32>) -> std::io::Result<()> {
    for (_, g) in set.groups() {
        let mut buf = Vec::with_capacity(4 * g.len());
        for x in g {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_set<R: Read>(r: &mut R, like: &ParamSet<f32>) -> std::io::Result<ParamSet<f32>> {
    let mut out = like.zeros_like();
    for (_, g) in out.groups_mut() {
        let mut buf = vec![0u8; 4 * g.len()];
        r.read_exact(&mut buf)?;
        for (x, b) in g.iter_mut().zip(buf.chunks_exact(4)) {
            *x = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    Ok(out)
}

pub fn save_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<(), FieldError> {
    let f = &ckpt.field;
    let header = Header {
        config: f.config.clone(),
        bbox: f.bbox,
        mirrors: f.mirrors,
        anchor: f.anchor,
        epoch: ckpt.epoch,
        groups: f
            .params
            .groups()
            .iter()
            .map(|(n, g)| (n.to_string(), g.len()))
            .collect(),
        optimizer_steps: ckpt.optimizer.as_ref().map(|o| o.steps.clone()),
    };
    let json = serde_json::to_vec(&header).map_err(|e| FieldError::Checkpoint(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    write_set(&mut w, &f.params)?;
    if let Some(o) = &ckpt.optimizer {
        write_set(&mut w, &o.m)?;
        write_set(&mut w, &o.v)?;
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, FieldError> {
    let bad = |m: String| FieldError::Checkpoint(m);
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    if &head[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a field checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    let shell = Field::<f32>::new(header.config.clone(), header.bbox, header.mirrors, header.anchor, 0)?;
    let expected: Vec<(String, usize)> = shell
        .params
        .groups()
        .iter()
        .map(|(n, g)| (n.to_string(), g.len()))
        .collect();
    if expected != header.groups {
        return Err(bad(format!(
            "tensor table {:?} does not match configuration {expected:?}",
            header.groups
        )));
    }
    let params = read_set(&mut r, &shell.params)?;
    let optimizer = match header.optimizer_steps {
        Some(steps) => {
            if steps.len() != expected.len() {
                return Err(bad("optimizer step table has the wrong length".into()));
            }
            let m = read_set(&mut r, &shell.params)?;
            let v = read_set(&mut r, &shell.params)?;
            Some(OptimizerState { m, v, steps })
        }
        None => None,
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes".into()));
    }
    let field = Field::from_params(header.config, header.bbox, header.mirrors, header.anchor, params)?;
    Ok(Checkpoint {
        field,
        optimizer,
        epoch: header.epoch,
    })
}
