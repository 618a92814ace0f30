use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::value::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "pcodom-params";
const FORMAT_VERSION: u32 = 1;

/// A named, optionally trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered registry of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Invalid(format!("bad parameter name {name:?}")));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    /// Looks up a parameter that construction guarantees to exist.
    pub fn expect(&self, name: &str) -> &Parameter {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Serializes the registry.
    ///
    /// Layout: a text header `pcodom-params\nversion 1\ncount N\n`, then for
    /// each parameter a line `param <name> <trainable 0|1> <rank> <dims..>\n`
    /// followed by its values as raw little-endian `f64` and a newline.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write!(out, "{MAGIC}\nversion {FORMAT_VERSION}\ncount {}\n", self.params.len()).unwrap();
        for p in &self.params {
            write!(out, "param {} {} {}", p.name, u8::from(p.trainable), p.tensor.rank()).unwrap();
            for d in p.tensor.shape() {
                write!(out, " {d}").unwrap();
            }
            out.push(b'\n');
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(b'\n');
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let bad = |msg: String| Error::Invalid(format!("parameter file: {msg}"));
        if cur.line()? != MAGIC {
            return Err(bad("missing magic header".into()));
        }
        let version = cur.keyed("version")?;
        if version != FORMAT_VERSION as usize {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = cur.keyed("count")?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let line = cur.line()?;
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() < 4 || fields[0] != "param" {
                return Err(bad(format!("bad entry header {line:?}")));
            }
            let trainable = match fields[2] {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("bad trainable flag {other:?}"))),
            };
            let rank: usize = fields[3].parse().map_err(|_| bad("bad rank".into()))?;
            if fields.len() != 4 + rank {
                return Err(bad(format!("rank {rank} but {} dims", fields.len() - 4)));
            }
            let shape = fields[4..]
                .iter()
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("bad dimension".into()))?;
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if cur.take(1)? != b"\n" {
                return Err(bad("missing record terminator".into()));
            }
            store.insert(fields[1], Tensor::new(shape, data)?, trainable)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies values from `other`, requiring identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        let mut diffs = Vec::new();
        for p in &self.params {
            match other.get(&p.name) {
                None => diffs.push(format!("{}: missing", p.name)),
                Some(o) if o.tensor.shape() != p.tensor.shape() => diffs.push(format!(
                    "{}: expected {:?}, found {:?}",
                    p.name,
                    p.tensor.shape(),
                    o.tensor.shape()
                )),
                _ => {}
            }
        }
        for o in &other.params {
            if self.get(&o.name).is_none() {
                diffs.push(format!("{}: unexpected", o.name));
            }
        }
        if !diffs.is_empty() {
            return Err(Error::ParamMismatch(diffs.join("; ")));
        }
        for p in &mut self.params {
            p.tensor = other.expect(&p.name).tensor.clone();
        }
        Ok(())
    }
}

pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Invalid("unexpected end of data".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Invalid("non-UTF-8 header".into()))
    }

    pub(crate) fn keyed(&mut self, key: &str) -> Result<usize> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Invalid(format!("expected `{key} <n>`, got {line:?}")))
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Invalid("unexpected end of data".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Writes `bytes` to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
