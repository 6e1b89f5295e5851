//! Self-describing model files: a text header with the TOML metadata,
//! then the raw parameters.
//!
//! ```text
//! DUALVDT-CHECKPOINT 1
//! <byte length of the TOML block>
//! <TOML block>
//! <u64 count> { <u64 name len> <name> <u64 rank> <u64 dims..> <f64 LE values..> }*
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Dims, ModelConfig};
use super::dual::{DualVdt, SeriesMeta};
use super::prepare::DataInfo;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

const MAGIC: &str = "DUALVDT-CHECKPOINT 1";
const MAX_RANK: u64 = 8;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    seed: u64,
    dims: Dims,
    meta: SeriesMeta,
    norm: Option<NormStats>,
    data: Option<DataInfo>,
    model: ModelConfig,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint(model: &DualVdt, out: &mut impl Write) -> Result<()> {
    let header = Header {
        seed: model.init_seed,
        dims: model.dims.clone(),
        meta: model.meta.clone(),
        norm: model.norm.clone(),
        data: model.data,
        model: model.config.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| ck(e.to_string()))?;
    write!(out, "{MAGIC}\n{}\n{text}", text.len())?;
    out.write_all(&(model.store.len() as u64).to_le_bytes())?;
    for (name, t) in model.store.iter() {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_line(r: &mut impl Read) -> Result<String> {
    let mut bytes = Vec::new();
    let mut b = [0u8];
    loop {
        if r.read(&mut b)? == 0 {
            return Err(ck("truncated header"));
        }
        if b[0] == b'\n' {
            break;
        }
        bytes.push(b[0]);
        if bytes.len() > 64 {
            return Err(ck("not a model checkpoint"));
        }
    }
    String::from_utf8(bytes).map_err(|_| ck("not a model checkpoint"))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| ck("truncated parameter block"))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<DualVdt> {
    if read_line(r)? != MAGIC {
        return Err(ck("not a model checkpoint (bad magic)"));
    }
    let len: usize = read_line(r)?.trim().parse().map_err(|_| ck("bad header length"))?;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text).map_err(|_| ck("truncated header"))?;
    let text = String::from_utf8(text).map_err(|_| ck("header is not UTF-8"))?;
    let header: Header = toml::from_str(&text).map_err(|e| ck(format!("bad header: {e}")))?;

    let count = read_u64(r)?;
    let mut params = Vec::new();
    for _ in 0..count {
        let nlen = read_u64(r)?;
        if nlen > 4096 {
            return Err(ck("parameter name too long"));
        }
        let mut name = vec![0u8; nlen as usize];
        r.read_exact(&mut name).map_err(|_| ck("truncated parameter block"))?;
        let name = String::from_utf8(name).map_err(|_| ck("parameter name is not UTF-8"))?;
        let rank = read_u64(r)?;
        if rank > MAX_RANK {
            return Err(ck(format!("parameter `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| ck("shape overflow"))?;
        if numel > 1 << 28 {
            return Err(ck(format!("parameter `{name}` is implausibly large")));
        }
        let data = (0..numel)
            .map(|_| read_u64(r).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        params.push((name, Tensor::new(&shape, data)?));
    }
    let mut rest = [0u8];
    if r.read(&mut rest)? != 0 {
        return Err(ck("trailing bytes after parameters"));
    }

    let mut model = DualVdt::new(header.model, header.dims, header.seed)?;
    model.store.load_from(&params)?;
    model.meta = header.meta;
    model.norm = header.norm;
    model.data = header.data;
    Ok(model)
}

impl DualVdt {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(self, &mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        read_checkpoint(&mut f)
    }
}
