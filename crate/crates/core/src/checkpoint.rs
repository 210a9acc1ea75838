//! Flat little-endian binary files for parameters and buffers.
//!
//! Parameter file layout:
//!
//! ```text
//! "CIRP" | u32 version | u32 image_side | u32 num_classes | u32 conv_channels
//! u32 n_hidden | u32 width * n_hidden
//! u32 n_blocks | per block: u32 name_len, name bytes, u32 ndim, u32 dim * ndim
//! f64 values of every block, row-major, in block order
//! ```

use std::fs;
use std::path::Path;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, ModelParams, ParamBlock};
use crate::scalar::Scalar;

pub const PARAMS_MAGIC: &[u8; 4] = b"CIRP";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }
}

pub(crate) struct ByteReader<'a> {
    kind: &'static str,
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(kind: &'static str, data: &'a [u8]) -> Self {
        Self { kind, data, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            kind: self.kind,
            offset: self.pos,
            msg: msg.into(),
        })
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return self.fail(format!(
                "truncated: need {n} bytes, {} left",
                self.data.len() - self.pos
            ));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            self.pos -= 4;
            return self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            ));
        }
        Ok(())
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return self.fail(format!("{} trailing bytes", self.data.len() - self.pos));
        }
        Ok(())
    }
}

pub fn encode_params<S: Scalar>(params: &ModelParams<S>) -> Vec<u8> {
    let mut w = ByteWriter::default();
    let cfg = params.config();
    w.bytes(PARAMS_MAGIC);
    w.u32(PARAMS_VERSION);
    w.len32(cfg.image_side);
    w.len32(cfg.num_classes);
    w.len32(cfg.conv_channels);
    w.len32(cfg.hidden.len());
    for &h in &cfg.hidden {
        w.len32(h);
    }
    w.len32(params.blocks().len());
    for b in params.blocks() {
        w.len32(b.name.len());
        w.bytes(b.name.as_bytes());
        w.len32(b.value.shape().len());
        for &d in b.value.shape() {
            w.len32(d);
        }
    }
    for b in params.blocks() {
        for v in b.value.data() {
            w.f64(v.as_f64());
        }
    }
    w.buf
}

pub fn decode_params<S: Scalar>(bytes: &[u8]) -> Result<ModelParams<S>> {
    let mut r = ByteReader::new("parameter file", bytes);
    r.magic(PARAMS_MAGIC)?;
    let version = r.u32()?;
    if version != PARAMS_VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let image_side = r.usize()?;
    let num_classes = r.usize()?;
    let conv_channels = r.usize()?;
    let n_hidden = r.usize()?;
    let hidden = (0..n_hidden).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        image_side,
        hidden,
        num_classes,
        conv_channels,
    };
    let n_blocks = r.usize()?;
    let mut table = Vec::with_capacity(n_blocks.min(64));
    for _ in 0..n_blocks {
        let len = r.usize()?;
        let name = match std::str::from_utf8(r.take(len)?) {
            Ok(s) => s.to_string(),
            Err(_) => return r.fail("block name is not UTF-8"),
        };
        let ndim = r.usize()?;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        table.push((name, shape));
    }
    let mut blocks = Vec::with_capacity(table.len());
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let at = r.pos();
        let data = (0..n).map(|_| r.f64().map(S::lit)).collect::<Result<Vec<_>>>()?;
        let value = Array::new(shape, data).map_err(|e| Error::Format {
            kind: "parameter file",
            offset: at,
            msg: e.to_string(),
        })?;
        blocks.push(ParamBlock { name, value });
    }
    r.finish()?;
    ModelParams::from_blocks(config, blocks).map_err(|e| Error::Format {
        kind: "parameter file",
        offset: 0,
        msg: e.to_string(),
    })
}

pub fn save_params<S: Scalar>(params: &ModelParams<S>, path: &Path) -> Result<()> {
    fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn load_params<S: Scalar>(path: &Path) -> Result<ModelParams<S>> {
    decode_params(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelParams<f64> {
        let cfg = ModelConfig {
            image_side: 5,
            hidden: vec![4, 3],
            num_classes: 2,
            conv_channels: 2,
        };
        ModelParams::init(cfg, 42).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let back: ModelParams<f64> = decode_params(&encode_params(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = model();
        save_params(&m, &path).unwrap();
        assert_eq!(load_params::<f64>(&path).unwrap(), m);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_params(&model());
        let err = decode_params::<f64>(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset > 0),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_params(&model());
        bytes[0] = b'X';
        assert!(matches!(
            decode_params::<f64>(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
