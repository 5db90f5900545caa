//! Checkpoint container.
//!
//! ```text
//! MASKDIFF-CHECKPOINT 1\n
//! {"config":{...},"tensors":[{"name":"tok_emb","shape":[V,D],"offset":0},...],"data_bytes":N}\n
//! <N bytes: little-endian f32 tensor data in directory order>
//! ```
//!
//! Tensor offsets are byte offsets into the data section.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamLayout};

const MAGIC: &str = "MASKDIFF-CHECKPOINT 1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub data_bytes: usize,
}

fn header_for(config: &ModelConfig) -> CheckpointHeader {
    let layout = ParamLayout::new(config);
    let tensors = layout
        .tensors()
        .iter()
        .map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone(), offset: t.offset * 4 })
        .collect();
    CheckpointHeader { config: config.clone(), tensors, data_bytes: layout.total_len() * 4 }
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams<f32>) -> Result<()> {
    let header = header_for(params.config());
    writeln!(w, "{MAGIC}")?;
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(header.data_bytes);
    for v in params.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<ModelParams<f32>> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end_matches('\n') != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic line {:?}", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(&line)?;
    header.config.validate()?;
    let expected = header_for(&header.config);
    if header != expected {
        return Err(Error::Checkpoint("tensor directory does not match config".into()));
    }
    let mut bytes = vec![0u8; header.data_bytes];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated tensor data: {e}")))?;
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    ModelParams::from_data(&header.config, data)
}

pub fn save(path: &Path, params: &ModelParams<f32>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams<f32>> {
    read_checkpoint(std::fs::File::open(path)?)
}
