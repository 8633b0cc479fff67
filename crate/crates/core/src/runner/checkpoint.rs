//! Checkpoint file: an 8-byte magic, a little-endian `u64` header length, a
//! JSON header, then the parameter vector and both Adam moment vectors as
//! little-endian `f32`.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, RunStamp};
use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::optim::AdamState;

const MAGIC: &[u8; 8] = b"HSIMCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stamp: RunStamp,
    pub config: ExperimentConfig,
    pub encoder: EncoderConfig,
    /// Number of optimizer steps already applied.
    pub step: usize,
    pub epoch: usize,
    pub num_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
    pub adam: AdamState,
}

fn write_f32s(w: &mut impl Write, v: &[f32]) -> std::io::Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s(bytes: &[u8], n: usize, at: &mut usize) -> Result<Vec<f32>> {
    let end = *at + 4 * n;
    if bytes.len() < end {
        return Err(Error::Checkpoint("checkpoint truncated".into()));
    }
    let out = bytes[*at..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    *at = end;
    Ok(out)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.header.num_params;
        if self.params.len() != n || self.adam.m.len() != n || self.adam.v.len() != n {
            return Err(Error::Checkpoint("vector lengths disagree with the header".into()));
        }
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        {
            let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            let res = (|| -> std::io::Result<()> {
                w.write_all(MAGIC)?;
                w.write_all(&(header.len() as u64).to_le_bytes())?;
                w.write_all(&header)?;
                w.write_all(&self.adam.step.to_le_bytes())?;
                write_f32s(&mut w, &self.params)?;
                write_f32s(&mut w, &self.adam.m)?;
                write_f32s(&mut w, &self.adam.v)?;
                w.flush()
            })();
            res.map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let mut at = 16 + hlen;
        if bytes.len() < at + 8 {
            return Err(Error::Checkpoint("checkpoint truncated".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let adam_step = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        at += 8;
        let n = header.num_params;
        let params = read_f32s(&bytes, n, &mut at)?;
        let m = read_f32s(&bytes, n, &mut at)?;
        let v = read_f32s(&bytes, n, &mut at)?;
        if at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint payload".into()));
        }
        Ok(Self {
            header,
            params,
            adam: AdamState { step: adam_step, m, v },
        })
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch{epoch:03}.bin")
}
