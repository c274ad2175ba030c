//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! MAGIC  u64 entry-count
//! entry* := u64 byte-length  u32 name-length  name  u32 rank  u64 extent*rank  f64 payload*
//! u64 manifest-length  manifest (key=value lines)  END
//! ```
//!
//! Entries named `adam.m:NAME` / `adam.v:NAME` hold optimizer moments; every
//! other entry is a model parameter. The manifest lists the parameter names
//! so a missing entry can be reported by name.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::Vocabulary;
use crate::numerics::Tensor;
use crate::optim::AdamState;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"SCACKPT1";
const END: &[u8; 8] = b"SCACKEND";
const MOMENT_M: &str = "adam.m:";
const MOMENT_V: &str = "adam.v:";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: String,
    pub step: u64,
    pub config_hash: String,
    /// Resolved configuration the run used.
    pub config_text: String,
    pub params: ParamStore,
    pub frozen: BTreeSet<String>,
    pub adam: AdamState,
    pub metrics: BTreeMap<String, f64>,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        for n in &self.frozen {
            if !self.params.contains(n) {
                return Err(Error::MissingParam(n.clone()));
            }
            if self.adam.m.contains_key(n) || self.adam.v.contains_key(n) {
                return Err(Error::contract(format!("frozen `{n}` has optimizer state")));
            }
        }
        for n in self.adam.m.keys().chain(self.adam.v.keys()) {
            if !self.params.contains(n) {
                return Err(Error::contract(format!("optimizer state for unknown `{n}`")));
            }
        }
        Ok(())
    }

    /// Accepts a matching hash; a mismatch is a warning with `force` and a
    /// config error without it.
    pub fn check_hash(&self, expected: &str, force: bool) -> Result<()> {
        if self.config_hash == expected {
            return Ok(());
        }
        let msg = format!("checkpoint config hash {} differs from {expected}", self.config_hash);
        if force {
            log::warn!("{msg}; continuing because of --force");
            Ok(())
        } else {
            Err(Error::config(format!("{msg} (pass --force to load anyway)")))
        }
    }
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    let mut e = Vec::with_capacity(16 + name.len() + 8 * t.len());
    e.extend_from_slice(&(name.len() as u32).to_le_bytes());
    e.extend_from_slice(name.as_bytes());
    e.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &x in t.shape() {
        e.extend_from_slice(&(x as u64).to_le_bytes());
    }
    for v in t.data() {
        e.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(e.len() as u64).to_le_bytes());
    out.extend_from_slice(&e);
}

fn manifest(c: &Checkpoint) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "tag={}", c.tag);
    let _ = writeln!(s, "step={}", c.step);
    let _ = writeln!(s, "adam_step={}", c.adam.step);
    let _ = writeln!(s, "config_hash={}", c.config_hash);
    let _ = writeln!(s, "params={}", c.params.names().cloned().collect::<Vec<_>>().join(","));
    let _ = writeln!(s, "frozen={}", c.frozen.iter().cloned().collect::<Vec<_>>().join(","));
    let _ = writeln!(s, "vocab={}", c.vocab.tokens().join(" "));
    for (k, v) in &c.metrics {
        let _ = writeln!(s, "metric.{k}={v}");
    }
    for line in c.config_text.lines() {
        let _ = writeln!(s, "config:{line}");
    }
    s
}

pub fn encode(c: &Checkpoint) -> Result<Vec<u8>> {
    c.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = c.params.len() + c.adam.m.len() + c.adam.v.len();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for (n, t) in c.params.iter() {
        put_entry(&mut out, n, t);
    }
    for (n, t) in &c.adam.m {
        put_entry(&mut out, &format!("{MOMENT_M}{n}"), t);
    }
    for (n, t) in &c.adam.v {
        put_entry(&mut out, &format!("{MOMENT_V}{n}"), t);
    }
    let m = manifest(c);
    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
    out.extend_from_slice(m.as_bytes());
    out.extend_from_slice(END);
    Ok(out)
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(c)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::parse(what, format!("truncated: needs {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn entry(r: &mut Reader, index: u64) -> Result<(String, Tensor)> {
    let at = format!("entry #{index}");
    let len = r.u64(&at)? as usize;
    let body = r.take(len, &at)?;
    let mut e = Reader { buf: body, pos: 0 };
    let nlen = e.u32(&at)? as usize;
    let name = std::str::from_utf8(e.take(nlen, &at)?)
        .map_err(|_| Error::parse(&at, "name is not UTF-8"))?
        .to_string();
    let at = format!("entry `{name}`");
    let rank = e.u32(&at)? as usize;
    if rank > 8 {
        return Err(Error::parse(&at, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(e.u64(&at)? as usize);
    }
    let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| Error::parse(&at, "extent overflow"))?;
    if e.buf.len() - e.pos != 8 * n {
        return Err(Error::parse(&at, format!("payload of {} bytes for shape {shape:?}", e.buf.len() - e.pos)));
    }
    let data = e.buf[e.pos..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((name, Tensor::new(shape, data)?))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "header")? != MAGIC {
        return Err(Error::parse("header", "not a checkpoint container"));
    }
    let count = r.u64("header")?;
    let mut entries = BTreeMap::new();
    for i in 0..count {
        let (name, t) = entry(&mut r, i)?;
        if entries.insert(name.clone(), t).is_some() {
            return Err(Error::parse(format!("entry `{name}`"), "duplicate entry"));
        }
    }
    let mlen = r.u64("manifest")? as usize;
    let text = std::str::from_utf8(r.take(mlen, "manifest")?).map_err(|_| Error::parse("manifest", "not UTF-8"))?;
    if r.take(8, "trailer")? != END || r.pos != bytes.len() {
        return Err(Error::parse("trailer", "missing end marker or trailing bytes"));
    }
    let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
    let mut metrics = BTreeMap::new();
    let mut config_text = String::new();
    for line in text.lines() {
        if let Some(c) = line.strip_prefix("config:") {
            config_text.push_str(c);
            config_text.push('\n');
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::parse("manifest", format!("bad line `{line}`")))?;
        if let Some(m) = k.strip_prefix("metric.") {
            let x = v.parse().map_err(|_| Error::parse("manifest", format!("metric `{m}` is not a number")))?;
            metrics.insert(m.to_string(), x);
        } else {
            kv.insert(k, v);
        }
    }
    let field = |k: &str| kv.get(k).copied().ok_or_else(|| Error::parse("manifest", format!("missing `{k}`")));
    let num = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|_| Error::parse("manifest", format!("`{k}` is not an integer"))) };
    let list = |k: &str| -> Result<Vec<String>> {
        Ok(field(k)?.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect())
    };
    let mut params = ParamStore::new();
    for name in list("params")? {
        let t = entries.remove(&name).ok_or_else(|| Error::parse(format!("entry `{name}`"), "listed in the manifest but missing"))?;
        params.insert(name, t);
    }
    let mut adam = AdamState { step: num("adam_step")?, ..AdamState::default() };
    for (name, t) in entries {
        if let Some(n) = name.strip_prefix(MOMENT_M) {
            adam.m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(MOMENT_V) {
            adam.v.insert(n.to_string(), t);
        } else {
            return Err(Error::parse(format!("entry `{name}`"), "not listed in the manifest"));
        }
    }
    let vocab = Vocabulary::from_text(&field("vocab")?.split(' ').map(|t| format!("{t}\n")).collect::<String>())?;
    let c = Checkpoint {
        tag: field("tag")?.to_string(),
        step: num("step")?,
        config_hash: field("config_hash")?.to_string(),
        config_text,
        params,
        frozen: list("frozen")?.into_iter().collect(),
        adam,
        metrics,
        vocab,
    };
    c.validate()?;
    Ok(c)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse { location: format!("{}: {location}", path.display()), message },
        other => other,
    })
}
