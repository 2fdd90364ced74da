//! Checkpoint archive: one plain-text header line, one JSON line with the
//! tensor table and metadata, then every tensor as little-endian `f64`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use codephys_autograd::{Array, ParamStore};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Table {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub struct Archive {
    pub header: String,
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, a) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: a.shape().to_vec(),
                offset,
            });
            offset += a.len();
        }
        let table = Table {
            meta: self.meta.clone(),
            tensors,
        };
        let mut out = Vec::with_capacity(offset * 8 + 4096);
        writeln!(out, "{}", self.header).unwrap();
        serde_json::to_writer(&mut out, &table).unwrap();
        out.push(b'\n');
        out.extend_from_slice(&self.params.bytes_with_prefix(""));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader
            .read_line(&mut header)
            .map_err(|e| Error::io(path, e))?;
        if !header.starts_with("codephys-ckpt v1 ") {
            return Err(Error::file(path, "not a codephys v1 checkpoint"));
        }
        let mut json = String::new();
        reader
            .read_line(&mut json)
            .map_err(|e| Error::io(path, e))?;
        let table: Table = serde_json::from_str(&json)
            .map_err(|e| Error::file(path, format!("bad tensor table: {e}")))?;
        let mut raw = Vec::new();
        reader
            .read_to_end(&mut raw)
            .map_err(|e| Error::io(path, e))?;
        let mut params = ParamStore::new();
        for t in table.tensors {
            let n: usize = t.shape.iter().product();
            let bytes = raw
                .get(t.offset * 8..(t.offset + n) * 8)
                .ok_or_else(|| Error::file(path, format!("tensor {} is truncated", t.name)))?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let a: Array = ArrayD::from_shape_vec(IxDyn(&t.shape), data).unwrap();
            params.insert(t.name, a);
        }
        Ok(Archive {
            header: header.trim_end().to_string(),
            meta: table.meta,
            params,
        })
    }

    /// Value of a `key=value` field of the header line.
    pub fn header_field(&self, key: &str) -> Option<&str> {
        self.header
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
