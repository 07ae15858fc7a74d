//! `LATC` checkpoint files: a key=value config block followed by named
//! float32 tensor sections.
//!
//! Layout (little-endian): magic `LATC`, version u16, config length u32 and
//! UTF-8 `key=value` lines, section count u32, then per section a u16-length
//! name, rank u8, u32 extents and the f32 payload.

use std::path::Path;

use crate::binio::ByteReader;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LATC";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Section {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("checkpoint section", shape, &[data.len()]));
        }
        Ok(Self {
            name,
            shape: shape.to_vec(),
            data,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Ordered `key=value` pairs; keys are unique.
    pub config: Vec<(String, String)>,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parsed value of a required key.
    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks `{key}`")))?;
        raw.parse()
            .map_err(|e| Error::Incompatible(format!("checkpoint key `{key}`=`{raw}`: {e}")))
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut text = String::new();
        for (k, v) in &self.config {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Config(format!("config entry `{k}` cannot be stored as a key=value line")));
            }
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(text.len())?.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&len_u32(self.sections.len())?.to_le_bytes());
        for s in &self.sections {
            let name_len = u16::try_from(s.name.len())
                .map_err(|_| Error::Config(format!("section name `{}` too long", s.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            let rank = u8::try_from(s.shape.len()).map_err(|_| Error::Config("section rank exceeds u8".into()))?;
            out.push(rank);
            for &e in &s.shape {
                out.extend_from_slice(&len_u32(e)?.to_le_bytes());
            }
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if let Some(pos) = magic.iter().zip(MAGIC).position(|(a, b)| a != b) {
            return Err(Error::Format {
                offset: pos as u64,
                reason: format!("bad magic {:?}, expected \"LATC\"", String::from_utf8_lossy(magic)),
            });
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let text_len = r.u32()? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(text_len)?).map_err(|e| Error::Format {
            offset: at as u64,
            reason: format!("config block is not UTF-8: {e}"),
        })?;
        let mut config: Vec<(String, String)> = Vec::new();
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                offset: at as u64,
                reason: format!("config line `{line}` has no `=`"),
            })?;
            if config.iter().any(|(seen, _)| seen == k) {
                return Err(Error::Format {
                    offset: at as u64,
                    reason: format!("duplicate config key `{k}`"),
                });
            }
            config.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Format {
                    offset: at as u64,
                    reason: format!("section name is not UTF-8: {e}"),
                })?
                .to_string();
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<_>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
            let numel = match numel {
                Some(n) if n.checked_mul(4).is_some_and(|b| b <= r.remaining()) => n,
                _ => {
                    return Err(Error::Truncated {
                        offset: r.pos as u64,
                        needed: shape.iter().product::<usize>().saturating_mul(4),
                    })
                }
            };
            let mut data = Vec::with_capacity(numel);
            r.floats(numel, &mut data)?;
            sections.push(Section { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Format {
                offset: r.pos as u64,
                reason: format!("{} trailing bytes", r.remaining()),
            });
        }
        Ok(Self { config, sections })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Config(format!("length {n} exceeds u32")))
}
