//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic            4 bytes  "INVN"
//! version          u32      FORMAT_VERSION
//! input_channels   u32
//! blocks           u32
//! steps_per_block  u32
//! hidden           u32
//! eps              f64
//! per step (block-major):
//!   channels       u32
//!   split          u32
//!   initialized    u8       actnorm data-init flag
//!   perm           u32 x channels
//!   sign           i8  x channels
//! param_count      u32
//! per param, in InvNormModel::params order:
//!   dims           u32 x 4
//!   values         f32 x product(dims)
//! crc32            u32      over every preceding byte
//! ```

use std::path::Path;

use super::instance_norm::InstanceNormLayer;
use super::model::{FlowBlock, InvNormConfig, InvNormModel, BLOCKS};
use crate::error::{Error, Result};
use crate::flow::{ActnormLayer, CouplingLayer, FlowStep, InvConv1x1};
use crate::numerics::{Param, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"INVN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("extent fits in u32"));
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor<f32>) {
        for d in t.shape().dims() {
            self.usize(d);
        }
        for v in t.data() {
            self.bytes(&v.to_le_bytes());
        }
    }

    /// Append the CRC-32 of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Check magic, version and trailing CRC-32; return a reader positioned
    /// after the version field, over the payload without the CRC.
    pub fn open(data: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        if data.len() < 12 {
            return Err(Error::Format(format!(
                "file truncated: {} bytes",
                data.len()
            )));
        }
        if &data[..4] != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&data[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        let found = u32::from_le_bytes(data[4..8].try_into().unwrap());
        if found != version {
            return Err(Error::Format(format!(
                "unsupported format version {found}; this reader supports version {version}"
            )));
        }
        let (payload, tail) = data.split_at(data.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(Error::Format(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        Ok(Self {
            buf: payload,
            pos: 8,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "file truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn tensor(&mut self) -> Result<Tensor<f32>> {
        let [b, c, h, w] = [self.usize()?, self.usize()?, self.usize()?, self.usize()?];
        let shape = Shape::new(b, c, h, w);
        let n = b
            .checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .filter(|&n| n <= (self.buf.len() - self.pos) / 4)
            .ok_or_else(|| Error::Format(format!("tensor {shape} exceeds file size")))?;
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(format!("bad tensor: {e}")))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} unexpected trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn write_params(w: &mut ByteWriter, params: &[&Param<f32>]) {
    w.usize(params.len());
    for p in params {
        w.tensor(p.value());
    }
}

pub(crate) fn read_params(r: &mut ByteReader<'_>) -> Result<Vec<Tensor<f32>>> {
    let n = r.usize()?;
    (0..n).map(|_| r.tensor()).collect()
}

impl InvNormModel<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.config();
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.usize(cfg.input_channels);
        w.usize(BLOCKS);
        w.usize(cfg.steps_per_block);
        w.usize(cfg.hidden);
        w.f64(cfg.eps);
        for step in self.steps() {
            w.usize(step.channels());
            w.usize(step.coupling.split());
            w.u8(step.actnorm.is_initialized() as u8);
            for &p in step.invconv.perm() {
                w.usize(p);
            }
            for &s in step.invconv.sign() {
                w.u8((s as i8) as u8);
            }
        }
        write_params(&mut w, &self.params());
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(data, MAGIC, FORMAT_VERSION)?;
        let input_channels = r.usize()?;
        let blocks = r.usize()?;
        if blocks != BLOCKS {
            return Err(Error::Format(format!(
                "expected {BLOCKS} blocks, file has {blocks}"
            )));
        }
        let steps_per_block = r.usize()?;
        let hidden = r.usize()?;
        let eps = r.f64()?;
        let config = InvNormConfig {
            input_channels,
            steps_per_block,
            hidden,
            eps,
        };
        config
            .validate()
            .map_err(|e| Error::Format(e.to_string()))?;

        struct StepHeader {
            channels: usize,
            split: usize,
            initialized: bool,
            perm: Vec<usize>,
            sign: Vec<f64>,
        }
        let mut headers = Vec::new();
        for i in 0..BLOCKS * steps_per_block {
            let channels = r.usize()?;
            if channels != config.block_channels(i / steps_per_block) {
                return Err(Error::Format(format!("step {i} has {channels} channels")));
            }
            let split = r.usize()?;
            let initialized = match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(Error::Format(format!("bad actnorm flag {v}"))),
            };
            let perm = (0..channels).map(|_| r.usize()).collect::<Result<_>>()?;
            let sign = (0..channels)
                .map(|_| r.u8().map(|v| (v as i8) as f64))
                .collect::<Result<_>>()?;
            headers.push(StepHeader {
                channels,
                split,
                initialized,
                perm,
                sign,
            });
        }
        let tensors = read_params(&mut r)?;
        r.finish()?;
        let want = headers.len() * 9 + 2;
        if tensors.len() != want {
            return Err(Error::Format(format!(
                "expected {want} parameter tensors, file has {}",
                tensors.len()
            )));
        }
        let fmt = |e: Error| Error::Format(e.to_string());
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked");
        let mut steps = Vec::with_capacity(headers.len());
        for h in headers {
            let actnorm = ActnormLayer::from_parts(next(), next(), h.initialized).map_err(fmt)?;
            let invconv =
                InvConv1x1::from_parts(h.perm, h.sign, next(), next(), next()).map_err(fmt)?;
            let coupling =
                CouplingLayer::from_parts(h.channels, h.split, next(), next(), next(), next())
                    .map_err(fmt)?;
            if coupling.hidden() != hidden {
                return Err(Error::Format("coupling width does not match header".into()));
            }
            steps.push(FlowStep {
                actnorm,
                invconv,
                coupling,
            });
        }
        let norm = InstanceNormLayer::from_parts(next(), next(), eps).map_err(fmt)?;
        let mut steps = steps.into_iter();
        let blocks = (0..BLOCKS)
            .map(|_| FlowBlock {
                steps: steps.by_ref().take(steps_per_block).collect(),
            })
            .collect();
        InvNormModel::from_parts(config, blocks, norm)
    }
}

pub fn save_model(model: &InvNormModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<InvNormModel<f32>> {
    InvNormModel::from_bytes(&std::fs::read(path)?)
}
