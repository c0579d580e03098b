//! Binary checkpoint of every parameter and buffer of a model.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic   8 bytes  "CIISOD01"
//! version u32
//! count   u32
//! count x { name_len u32, name utf-8, rank u8, dims u32 x rank, values f32 x prod(dims) }
//! ```
//!
//! Parameters come first in module visit order, each shared storage once,
//! then buffers.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Module, ModuleItem};
use crate::tensor::{Buffer, Float, Parameter};

pub const MAGIC: &[u8; 8] = b"CIISOD01";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

enum Slot<T: Float> {
    Param(Parameter<T>),
    Buffer(Buffer<T>),
}

impl<T: Float> Slot<T> {
    fn name(&self) -> &str {
        match self {
            Slot::Param(p) => p.name(),
            Slot::Buffer(b) => b.name(),
        }
    }

    fn dims(&self) -> Vec<usize> {
        match self {
            Slot::Param(p) => p.dims().to_vec(),
            Slot::Buffer(b) => vec![b.len()],
        }
    }

    fn values(&self) -> Vec<f32> {
        let v: Vec<T> = match self {
            Slot::Param(p) => p.values().to_vec(),
            Slot::Buffer(b) => b.get(),
        };
        v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()
    }

    fn assign(&self, values: &[f32]) {
        let v: Vec<T> = values.iter().map(|&x| T::from_f32(x).unwrap_or_else(T::nan)).collect();
        match self {
            Slot::Param(p) => p.set_values(v),
            Slot::Buffer(b) => b.set(v),
        }
    }
}

fn slots<T: Float>(model: &dyn Module<T>) -> Vec<Slot<T>> {
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let mut seen = HashSet::new();
    model.visit(&mut |item| match item {
        ModuleItem::Param(p) => {
            if seen.insert(p.storage_id()) {
                params.push(Slot::Param(p.clone()));
            }
        }
        ModuleItem::Buffer(b) => buffers.push(Slot::Buffer(b.clone())),
    });
    params.extend(buffers);
    params
}

pub fn entries<T: Float>(model: &dyn Module<T>) -> Result<Vec<Entry>> {
    let mut names = HashSet::new();
    slots(model)
        .iter()
        .map(|s| {
            if !names.insert(s.name().to_string()) {
                return Err(Error::Contract(format!("duplicate tensor name {}", s.name())));
            }
            Ok(Entry {
                name: s.name().to_string(),
                dims: s.dims(),
                values: s.values(),
            })
        })
        .collect()
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                path: self.path.to_string(),
                offset: self.pos,
                detail: format!("truncated while reading {what}"),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &str) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0, path };
    let fail = |offset: usize, detail: String| Error::Format {
        path: path.to_string(),
        offset,
        detail,
    };
    if r.take(8, "magic")? != MAGIC {
        return Err(fail(0, "bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(fail(8, format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| fail(at, "name is not utf-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        if !(1..=4).contains(&rank) {
            return Err(fail(r.pos - 1, format!("rank {rank} of {name} outside 1..=4")));
        }
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4, "values")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(Entry { name, dims, values });
    }
    if r.pos != bytes.len() {
        return Err(fail(r.pos, "trailing bytes after last entry".into()));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Float>(model: &dyn Module<T>, path: &Path) -> Result<()> {
    let bytes = encode(&entries(model)?);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Validates every entry against `model` before assigning any of them.
pub fn apply_entries<T: Float>(model: &dyn Module<T>, entries: Vec<Entry>) -> Result<()> {
    let targets = slots(model);
    let mut by_name: HashMap<String, Entry> = HashMap::with_capacity(entries.len());
    for e in entries {
        if by_name.contains_key(&e.name) {
            return Err(Error::Mismatch(format!("duplicate entry {}", e.name)));
        }
        by_name.insert(e.name.clone(), e);
    }
    for t in &targets {
        match by_name.get(t.name()) {
            None => return Err(Error::Mismatch(format!("missing entry {}", t.name()))),
            Some(e) if e.dims != t.dims() => {
                return Err(Error::Mismatch(format!(
                    "{}: file has shape {:?}, model expects {:?}",
                    t.name(),
                    e.dims,
                    t.dims()
                )))
            }
            Some(_) => {}
        }
    }
    if by_name.len() != targets.len() {
        let known: HashSet<&str> = targets.iter().map(Slot::name).collect();
        let mut extra: Vec<&String> = by_name.keys().filter(|k| !known.contains(k.as_str())).collect();
        extra.sort();
        return Err(Error::Mismatch(format!(
            "entry {} does not exist in the model",
            extra.first().map(|s| s.as_str()).unwrap_or("?")
        )));
    }
    for t in &targets {
        t.assign(&by_name[t.name()].values);
    }
    Ok(())
}

pub fn load_checkpoint<T: Float>(model: &dyn Module<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    apply_entries(model, decode(&bytes, &path.display().to_string())?)
}
