use std::path::Path;

use crate::binio::{read_file, write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{DType, Tensor};

use super::optim::Optimizer;

const MAGIC: &[u8; 4] = b"LFQG";
pub const CHECKPOINT_VERSION: u32 = 1;
const STEP_RECORD: &str = "optim.step";

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    Float(Tensor),
    U64 { shape: Vec<usize>, values: Vec<u64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub data: RecordData,
}

/// Model parameters, optimizer moments and the run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    /// Snapshot `model` and, if given, the optimizer state.
    pub fn capture<M: Module>(config: &str, model: &M, optim: Option<&Optimizer>) -> Self {
        let mut records = Vec::new();
        model.visit(&mut |p| {
            records.push(Record {
                name: p.name.clone(),
                data: RecordData::Float(p.value.clone()),
            })
        });
        if let Some(o) = optim {
            for (kind, moments) in [("m", &o.m), ("v", &o.v)] {
                for (name, t) in o.names.iter().zip(moments) {
                    records.push(Record {
                        name: format!("optim.{kind}.{name}"),
                        data: RecordData::Float(t.clone()),
                    });
                }
            }
            records.push(Record {
                name: STEP_RECORD.into(),
                data: RecordData::U64 {
                    shape: vec![],
                    values: vec![o.step],
                },
            });
        }
        Self {
            config: config.to_string(),
            records,
        }
    }

    fn find(&self, name: &str) -> Option<&RecordData> {
        self.records.iter().find(|r| r.name == name).map(|r| &r.data)
    }

    fn float(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        match self.find(name) {
            Some(RecordData::Float(t)) if t.shape() == shape => Ok(t.clone()),
            Some(RecordData::Float(t)) => Err(Error::Shape {
                op: "checkpoint record",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            }),
            Some(_) => Err(Error::invalid("checkpoint", format!("record {name} is not a float tensor"))),
            None => Err(Error::invalid("checkpoint", format!("missing record {name}"))),
        }
    }

    /// Overwrite every parameter of `model` with the stored value.
    pub fn restore_model<M: Module>(&self, model: &mut M) -> Result<()> {
        let mut err = None;
        model.visit_mut(&mut |p| {
            if err.is_none() {
                match self.float(&p.name, p.value.shape()) {
                    Ok(t) => p.value = t,
                    Err(e) => err = Some(e),
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn restore_optimizer(&self, optim: &mut Optimizer) -> Result<()> {
        for i in 0..optim.names.len() {
            let name = &optim.names[i];
            optim.m[i] = self.float(&format!("optim.m.{name}"), optim.m[i].shape())?;
            optim.v[i] = self.float(&format!("optim.v.{name}"), optim.v[i].shape())?;
        }
        optim.step = match self.find(STEP_RECORD) {
            Some(RecordData::U64 { values, .. }) if values.len() == 1 => values[0],
            _ => return Err(Error::invalid("checkpoint", "missing optimizer step record")),
        };
        Ok(())
    }

    pub fn has_optimizer(&self) -> bool {
        self.find(STEP_RECORD).is_some()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            b.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            b.extend_from_slice(r.name.as_bytes());
            let (tag, shape) = match &r.data {
                RecordData::Float(t) if t.dtype() == DType::F32 => (0u8, t.shape()),
                RecordData::Float(t) => (1u8, t.shape()),
                RecordData::U64 { shape, .. } => (2u8, shape.as_slice()),
            };
            b.push(tag);
            b.push(shape.len() as u8);
            for &d in shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &r.data {
                RecordData::Float(t) if tag == 0 => {
                    for &v in t.data() {
                        b.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                RecordData::Float(t) => {
                    for &v in t.data() {
                        b.extend_from_slice(&v.to_le_bytes());
                    }
                }
                RecordData::U64 { values, .. } => {
                    for &v in values {
                        b.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        b
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(path, bytes);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let n = r.len_u64()?;
        let config = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.fail("config is not UTF-8"))?;
        let count = r.u32()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.fail("record name is not UTF-8"))?;
            let tag = r.u8()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len_u64()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.fail("record shape overflows"))?;
            let data = match tag {
                0 => {
                    let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.fail("record too large"))?)?;
                    let v = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect();
                    RecordData::Float(Tensor::new(&shape, v)?.to_dtype(DType::F32))
                }
                1 => {
                    let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.fail("record too large"))?)?;
                    let v = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    RecordData::Float(Tensor::new(&shape, v)?)
                }
                2 => {
                    let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.fail("record too large"))?)?;
                    let values = raw
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    RecordData::U64 { shape, values }
                }
                t => return Err(r.fail(format!("record {name}: unknown dtype tag {t}"))),
            };
            records.push(Record { name, data });
        }
        r.finish()?;
        Ok(Self { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &read_file(path)?)
    }
}
