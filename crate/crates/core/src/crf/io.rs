//! `PGIMCRF1` model files.
//!
//! Layout (little-endian): magic `PGIMCRF1`, `u32` version, `u32` length of a
//! JSON metadata block and the block itself, `u32` tensor count, then per
//! tensor: `u32` name length, name, `u32` rank, `u32` dims, `f32` values.

use std::fs;
use std::path::Path;

use super::{CrfModel, Matrix, ModelMeta, TagSetIndex};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"PGIMCRF1";
pub const MODEL_VERSION: u32 = 1;

const TENSORS: [&str; 5] = ["table", "w_tok", "w_ctx", "bias", "trans"];

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn model_to_bytes(model: &CrfModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, MODEL_VERSION);
    let meta = serde_json::to_vec(&model.meta)?;
    put_u32(&mut out, meta.len() as u32);
    out.extend_from_slice(&meta);
    let shapes: [Vec<usize>; 5] = [
        vec![model.table.rows, model.table.cols],
        vec![model.w_tok.rows, model.w_tok.cols],
        vec![model.w_ctx.rows, model.w_ctx.cols],
        vec![model.bias.len()],
        vec![model.trans.rows, model.trans.cols],
    ];
    put_u32(&mut out, TENSORS.len() as u32);
    for ((name, shape), data) in TENSORS.iter().zip(&shapes).zip(model.params()) {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, shape.len() as u32);
        for &d in shape {
            put_u32(&mut out, d as u32);
        }
        for &x in data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(self.fail("truncated file"));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn model_from_bytes(bytes: &[u8], path: &Path) -> Result<CrfModel> {
    let mut r = Reader { bytes, path };
    if r.take(8)? != MODEL_MAGIC {
        return Err(r.fail("bad magic, expected PGIMCRF1"));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Version {
            what: "model file",
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let meta_len = r.u32()? as usize;
    let meta: ModelMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| r.fail(format!("bad metadata: {e}")))?;
    let tagset = TagSetIndex::new(&meta.categories)?;
    let (k, e) = (tagset.len(), meta.embedder.e);
    let expected: [Vec<usize>; 5] = [
        vec![meta.embedder.buckets + 1, e],
        vec![e, k],
        vec![e, k],
        vec![k],
        vec![k + 2, k + 2],
    ];
    if r.u32()? as usize != TENSORS.len() {
        return Err(r.fail("unexpected tensor count"));
    }
    let mut tensors = Vec::with_capacity(TENSORS.len());
    for (name, shape) in TENSORS.iter().zip(&expected) {
        let len = r.u32()? as usize;
        if r.take(len)? != name.as_bytes() {
            return Err(r.fail(format!("expected tensor {name}")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(r.fail(format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        let count: usize = dims.iter().product();
        let raw = r.take(4 * count)?;
        tensors.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect::<Vec<f64>>(),
        );
    }
    if !r.bytes.is_empty() {
        return Err(r.fail("trailing bytes"));
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("five tensors");
    let matrix = |rows, cols, data| Matrix { rows, cols, data };
    Ok(CrfModel {
        table: matrix(meta.embedder.buckets + 1, e, next()),
        w_tok: matrix(e, k, next()),
        w_ctx: matrix(e, k, next()),
        bias: next(),
        trans: matrix(k + 2, k + 2, next()),
        tagset,
        meta,
    })
}

pub fn save_model(model: &CrfModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<CrfModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes, path)
}
