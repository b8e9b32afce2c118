//! Model checkpoints: parameters, optimizer moments and training state.
//!
//! Layout: the line `ROMCKPT v1`, one line of JSON describing the model
//! config, training state and a tensor manifest, then the tensor payloads
//! back to back in little-endian order. Tensors whose values are all exact
//! in f32 are stored as f32, the rest as f64, so a round trip is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayViewD;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{read_line, truncated, Result, RomError};
use crate::trainer::{Adam, AdamConfig, TrainState};

pub const CHECKPOINT_MAGIC: &str = "ROMCKPT v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub optimizer: Option<Adam>,
    pub state: TrainState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: EncoderConfig,
    state: TrainState,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

fn dtype_for(t: &ArrayViewD<f64>) -> Dtype {
    if t.iter().all(|&x| (x as f32) as f64 == x) {
        Dtype::F32
    } else {
        Dtype::F64
    }
}

fn groups(ckpt: &Checkpoint) -> Vec<(&'static str, &EncoderParams)> {
    let mut g = vec![("", &ckpt.params)];
    if let Some(opt) = &ckpt.optimizer {
        g.push(("adam.m.", &opt.m));
        g.push(("adam.v.", &opt.v));
    }
    g
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut entries = Vec::new();
        for (prefix, p) in groups(self) {
            for (name, t) in p.tensors() {
                entries.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    dtype: dtype_for(&t),
                });
            }
        }
        let header = Header {
            model: self.params.config.clone(),
            state: self.state.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            tensors: entries,
        };
        w.write_all(CHECKPOINT_MAGIC.as_bytes())?;
        w.write_all(b"\n")?;
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        let mut e = header.tensors.iter();
        for (_, p) in groups(self) {
            for (_, t) in p.tensors() {
                let entry = e.next().expect("one entry per tensor");
                for &x in t.iter() {
                    match entry.dtype {
                        Dtype::F32 => w.write_f32::<LittleEndian>(x as f32)?,
                        Dtype::F64 => w.write_f64::<LittleEndian>(x)?,
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(RomError::MissingPrerequisite(path.to_path_buf()));
        }
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let magic = read_line(r, 64)?;
        if magic != CHECKPOINT_MAGIC.as_bytes() {
            return Err(RomError::IncompatibleCheckpoint(format!(
                "expected `{CHECKPOINT_MAGIC}`, found `{}`",
                String::from_utf8_lossy(&magic)
            )));
        }
        let header: Header = serde_json::from_slice(&read_line(r, 1 << 24)?)
            .map_err(|e| RomError::IncompatibleCheckpoint(format!("bad header: {e}")))?;
        header
            .model
            .validate()
            .map_err(|e| RomError::IncompatibleCheckpoint(e.to_string()))?;
        let mut params = EncoderParams::zeros(&header.model);
        let mut optimizer = header.optimizer.as_ref().map(|o| Adam {
            config: o.config,
            step: o.step,
            m: params.zeros_like(),
            v: params.zeros_like(),
        });
        let expected: usize = params.tensors().len() * if optimizer.is_some() { 3 } else { 1 };
        if header.tensors.len() != expected {
            return Err(RomError::IncompatibleCheckpoint(format!(
                "{} tensors listed, {expected} expected",
                header.tensors.len()
            )));
        }
        let mut entries = header.tensors.iter();
        let mut fill = |prefix: &str, target: &mut EncoderParams| -> Result<()> {
            for (name, mut t) in target.tensors_mut() {
                let entry = entries.next().expect("count checked");
                if entry.name != format!("{prefix}{name}") || entry.shape != t.shape() {
                    return Err(RomError::IncompatibleCheckpoint(format!(
                        "tensor `{}` {:?} does not match `{prefix}{name}` {:?}",
                        entry.name,
                        entry.shape,
                        t.shape()
                    )));
                }
                for x in t.iter_mut() {
                    *x = match entry.dtype {
                        Dtype::F32 => r.read_f32::<LittleEndian>().map_err(truncated)? as f64,
                        Dtype::F64 => r.read_f64::<LittleEndian>().map_err(truncated)?,
                    };
                }
            }
            Ok(())
        };
        fill("", &mut params)?;
        if let Some(o) = optimizer.as_mut() {
            fill("adam.m.", &mut o.m)?;
            fill("adam.v.", &mut o.v)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(RomError::IncompatibleCheckpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            params,
            optimizer,
            state: header.state,
        })
    }

    /// Rejects a checkpoint whose vocabulary does not match the corpus.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        if self.params.config.vocab_size != vocab_size {
            return Err(RomError::IncompatibleCheckpoint(format!(
                "checkpoint vocab {} but corpus vocab {vocab_size}",
                self.params.config.vocab_size
            )));
        }
        Ok(())
    }
}
