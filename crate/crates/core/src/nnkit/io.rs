//! Model and tensor file formats.
//!
//! Model file: magic `GQM1`, version u16, architecture tag u8, then
//! per-parameter records (name length u16, name bytes, rank u8, dims u32[],
//! payload little-endian f32) until end of file. BatchNorm running statistics
//! are stored as ordinary records named `bn{k}.running_mean` / `..._var`.
//!
//! Tensor file: magic `GQT1`, rank u8, dims u32[], payload little-endian f32.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nnkit::model::{Arch, Model};
use crate::nnkit::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"GQM1";
pub const TENSOR_MAGIC: &[u8; 4] = b"GQT1";
pub const MODEL_VERSION: u16 = 1;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(format!(
                "truncated file: needed {n} bytes for {what}, {} left",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        let b = self.take(4, what)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    fn peek4(&self) -> Option<&[u8]> {
        if self.remaining() >= 4 {
            Some(&self.buf[self.pos..self.pos + 4])
        } else {
            None
        }
    }
}

pub(crate) use internal::*;

mod internal {
    use super::*;

    pub struct ModelReader<'a> {
        pub(crate) r: Reader<'a>,
    }

    impl<'a> ModelReader<'a> {
        pub fn i32(&mut self, what: &str) -> Result<i32> {
            self.r.i32(what)
        }
        pub fn u8(&mut self, what: &str) -> Result<u8> {
            self.r.u8(what)
        }
        pub fn f32(&mut self, what: &str) -> Result<f32> {
            self.r.f32(what)
        }
        pub fn has_more(&self) -> bool {
            self.r.remaining() > 0
        }
        pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
            let got = self.r.take(4, "section magic")?;
            if got != magic {
                return Err(Error::format(format!(
                    "bad section magic {got:?}, expected {magic:?}"
                )));
            }
            Ok(())
        }
        pub fn name(&mut self) -> Result<String> {
            read_name(&mut self.r)
        }
        pub fn option_tensor(&mut self) -> Result<Option<Tensor>> {
            match self.r.u8("presence flag")? {
                0 => Ok(None),
                1 => Ok(Some(read_tensor_body(&mut self.r)?)),
                other => Err(Error::format(format!("bad presence flag {other}"))),
            }
        }
    }

    pub fn read_name(r: &mut Reader) -> Result<String> {
        let len = r.u16("name length")? as usize;
        if len == 0 || len > 255 {
            return Err(Error::format(format!("implausible name length {len}")));
        }
        let bytes = r.take(len, "name")?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format("parameter name is not UTF-8"))
    }

    pub fn read_tensor_body(r: &mut Reader) -> Result<Tensor> {
        let rank = r.u8("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(format!("implausible tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")? as usize);
        }
        let n: usize = dims.iter().product();
        if n == 0 || n > 1 << 28 {
            return Err(Error::format(format!("implausible tensor dims {dims:?}")));
        }
        let data = r.f32s(n, "tensor payload")?;
        Tensor::new(dims, data)
    }

    pub fn write_name(out: &mut Vec<u8>, name: &str) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }

    pub fn write_tensor_body(out: &mut Vec<u8>, t: &Tensor) {
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialize a model to its byte representation.
pub fn model_to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.push(model.arch.tag());
    for p in &model.params {
        write_name(&mut out, &p.name);
        write_tensor_body(&mut out, &p.tensor);
    }
    for (k, state) in model.bn.iter().enumerate() {
        let mean = Tensor::from_vec(&[state.running_mean.len()], state.running_mean.clone())
            .expect("bn state");
        let var = Tensor::from_vec(&[state.running_var.len()], state.running_var.clone())
            .expect("bn state");
        write_name(&mut out, &format!("bn{}.running_mean", k + 1));
        write_tensor_body(&mut out, &mean);
        write_name(&mut out, &format!("bn{}.running_var", k + 1));
        write_tensor_body(&mut out, &var);
    }
    out
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let bytes = model_to_bytes(model);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parse the base-model section. Returns the model and a reader positioned
/// at whatever follows (quantization sections or end of file).
pub(crate) fn model_from_reader(buf: &[u8]) -> Result<(Model, internal::ModelReader<'_>)> {
    let mut r = Reader::new(buf);
    let magic = r.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::format(format!(
            "bad magic {magic:?}, expected {MODEL_MAGIC:?}"
        )));
    }
    let version = r.u16("version")?;
    if version != MODEL_VERSION {
        return Err(Error::format(format!(
            "unsupported model version {version}, expected {MODEL_VERSION}"
        )));
    }
    let arch = Arch::from_tag(r.u8("architecture tag")?)?;
    let mut model = Model::new(arch, 0);
    let mut remaining: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    for k in 0..model.bn.len() {
        remaining.push(format!("bn{}.running_mean", k + 1));
        remaining.push(format!("bn{}.running_var", k + 1));
    }
    while r.remaining() > 0 {
        if r.peek4() == Some(b"GQQ1") {
            break;
        }
        let name = read_name(&mut r)?;
        let tensor = read_tensor_body(&mut r)?;
        let Some(pos) = remaining.iter().position(|n| *n == name) else {
            return Err(Error::format(format!(
                "unexpected or duplicate record {name:?} for {}",
                arch.name()
            )));
        };
        remaining.remove(pos);
        if let Some(stripped) = name.strip_suffix(".running_mean") {
            let k: usize = stripped[2..]
                .parse()
                .map_err(|_| Error::format(format!("bad BN record name {name:?}")))?;
            model.bn[k - 1].running_mean = tensor.into_data();
        } else if let Some(stripped) = name.strip_suffix(".running_var") {
            if stripped.starts_with("bn") {
                let k: usize = stripped[2..]
                    .parse()
                    .map_err(|_| Error::format(format!("bad BN record name {name:?}")))?;
                if tensor.data().iter().any(|&v| v <= 0.0) {
                    return Err(Error::format(format!(
                        "non-positive running variance in {name:?}"
                    )));
                }
                model.bn[k - 1].running_var = tensor.into_data();
            }
        } else {
            let param = model
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .expect("name came from inventory");
            if param.tensor.shape() != tensor.shape() {
                return Err(Error::format(format!(
                    "record {name:?} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    param.tensor.shape()
                )));
            }
            param.tensor = tensor;
        }
    }
    if !remaining.is_empty() {
        return Err(Error::format(format!(
            "model file is missing records: {remaining:?}"
        )));
    }
    Ok((model, internal::ModelReader { r }))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let (model, rest) = model_from_reader(&buf)?;
    if rest.has_more() {
        return Err(Error::format(
            "trailing bytes after model records (quantized model? use quant::load_quantized)",
        ));
    }
    Ok(model)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    write_tensor_body(&mut out, t);
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader::new(&buf);
    let magic = r.take(4, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::format(format!(
            "bad magic {magic:?}, expected {TENSOR_MAGIC:?}"
        )));
    }
    let t = read_tensor_body(&mut r)?;
    if r.remaining() > 0 {
        return Err(Error::format("trailing bytes after tensor payload"));
    }
    Ok(t)
}

/// FNV-1a hash of a byte stream, hex-encoded. Used to fingerprint model
/// files in filter reports.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    format!("{h:016x}")
}
