//! Versioned little-endian binary container for a [`TrainState`].
//!
//! ```text
//! magic        4 bytes  "AVCK"
//! version      u32
//! meta_count   u32
//!   key        u32 length + UTF-8
//!   value      u32 length + UTF-8
//! entry_count  u32
//!   name       u32 length + UTF-8
//!   kind       u8   0 parameter, 1 first moment, 2 second moment
//!   group      u8   0 backbone, 1 adapter, 2 head
//!   trainable  u8
//!   ndim       u32
//!   dims       u64 × ndim
//!   offset     u64  element offset into the data section
//! data         f64 × Σ numel, entries in manifest order
//! ```
//!
//! Entries are written in name order within each kind, so equal states
//! serialise to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::params::{Param, ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::{Stage, TrainState};

pub const MAGIC: &[u8; 4] = b"AVCK";
pub const VERSION: u32 = 1;

/// Metadata keys written by [`encode`].
pub const META_STEP: &str = "step";
pub const META_SEED: &str = "seed";
pub const META_MOMENT_STEPS: &str = "moment_steps";
pub const META_STAGE: &str = "stage";
pub const META_COMPLETED: &str = "completed";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Param = 0,
    First = 1,
    Second = 2,
}

struct Entry<'a> {
    name: &'a str,
    kind: Kind,
    group: ParamGroup,
    trainable: bool,
    value: &'a Tensor,
}

fn write_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.write_u32::<LE>(s.len() as u32)?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = r.read_u32::<LE>()? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(Error::Format(format!("string of {len} bytes overruns the file")));
    }
    let mut buf = vec![0; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
}

/// Serialise `state` plus caller metadata (e.g. the resolved config).
pub fn encode(state: &TrainState, extra_meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut meta = extra_meta.clone();
    meta.insert(META_STEP.into(), state.step.to_string());
    meta.insert(META_SEED.into(), state.seed.to_string());
    meta.insert(META_MOMENT_STEPS.into(), state.moment_steps.to_string());
    meta.insert(
        META_STAGE.into(),
        state.stage.map_or(String::new(), |s| s.as_str().to_string()),
    );
    meta.insert(
        META_COMPLETED.into(),
        state
            .completed
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join(","),
    );

    let mut entries = Vec::new();
    for (name, p) in state.params.iter() {
        entries.push(Entry {
            name,
            kind: Kind::Param,
            group: p.group,
            trainable: p.trainable,
            value: &p.value,
        });
    }
    for (kind, store) in [(Kind::First, &state.first_moment), (Kind::Second, &state.second_moment)] {
        for (name, t) in store {
            let p = state
                .params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("optimiser moment for unknown parameter {name}")))?;
            entries.push(Entry {
                name,
                kind,
                group: p.group,
                trainable: p.trainable,
                value: t,
            });
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION)?;
    out.write_u32::<LE>(meta.len() as u32)?;
    for (k, v) in &meta {
        write_str(&mut out, k)?;
        write_str(&mut out, v)?;
    }
    out.write_u32::<LE>(entries.len() as u32)?;
    let mut offset = 0u64;
    for e in &entries {
        write_str(&mut out, e.name)?;
        out.write_u8(e.kind as u8)?;
        out.write_u8(e.group.as_u8())?;
        out.write_u8(u8::from(e.trainable))?;
        out.write_u32::<LE>(e.value.ndim() as u32)?;
        for &d in e.value.shape() {
            out.write_u64::<LE>(d as u64)?;
        }
        out.write_u64::<LE>(offset)?;
        offset += e.value.len() as u64;
    }
    for e in &entries {
        for &v in e.value.data() {
            out.write_f64::<LE>(v)?;
        }
    }
    Ok(out)
}

/// Inverse of [`encode`]; returns the state and the full metadata map.
pub fn decode(bytes: &[u8]) -> Result<(TrainState, BTreeMap<String, String>)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut r = Cursor::new(bytes);
    r.set_position(4);
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut meta = BTreeMap::new();
    for _ in 0..r.read_u32::<LE>()? {
        let k = read_str(&mut r)?;
        let v = read_str(&mut r)?;
        meta.insert(k, v);
    }
    struct Header {
        name: String,
        kind: u8,
        group: ParamGroup,
        trainable: bool,
        shape: Vec<usize>,
        offset: u64,
    }
    let count = r.read_u32::<LE>()?;
    let mut headers = Vec::new();
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let kind = r.read_u8()?;
        let group = ParamGroup::from_u8(r.read_u8()?)
            .ok_or_else(|| Error::Format(format!("bad parameter group for {name}")))?;
        let trainable = r.read_u8()? != 0;
        let ndim = r.read_u32::<LE>()?;
        let shape = (0..ndim)
            .map(|_| r.read_u64::<LE>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let offset = r.read_u64::<LE>()?;
        headers.push(Header {
            name,
            kind,
            group,
            trainable,
            shape,
            offset,
        });
    }
    let data_start = r.position() as usize;
    let data = &bytes[data_start..];
    let mut params = ParamStore::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for h in headers {
        let numel: usize = h.shape.iter().product();
        let start = h.offset as usize * 8;
        let end = start + numel * 8;
        if end > data.len() {
            return Err(Error::Format(format!("entry {} overruns the data section", h.name)));
        }
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let value = Tensor::new(h.shape, values).map_err(|e| Error::Format(format!("entry {}: {e}", h.name)))?;
        match h.kind {
            0 => {
                params.insert_param(
                    h.name,
                    Param {
                        value,
                        trainable: h.trainable,
                        group: h.group,
                    },
                );
            }
            1 => {
                first.insert(h.name, value);
            }
            2 => {
                second.insert(h.name, value);
            }
            k => return Err(Error::Format(format!("unknown entry kind {k} for {}", h.name))),
        }
    }
    let parse_u64 = |key: &str| -> Result<u64> {
        meta.get(key)
            .ok_or_else(|| Error::Format(format!("missing metadata {key}")))?
            .parse()
            .map_err(|_| Error::Format(format!("bad metadata {key}")))
    };
    let stage = match meta.get(META_STAGE).map(String::as_str) {
        None | Some("") => None,
        Some(s) => Some(s.parse::<Stage>()?),
    };
    let completed = match meta.get(META_COMPLETED).map(String::as_str) {
        None | Some("") => Vec::new(),
        Some(s) => s.split(',').map(str::parse).collect::<Result<Vec<Stage>>>()?,
    };
    let state = TrainState {
        params,
        first_moment: first,
        second_moment: second,
        step: parse_u64(META_STEP)?,
        moment_steps: parse_u64(META_MOMENT_STEPS)?,
        stage,
        completed,
        seed: parse_u64(META_SEED)?,
    };
    Ok((state, meta))
}

pub fn save(path: impl AsRef<Path>, state: &TrainState, extra_meta: &BTreeMap<String, String>) -> Result<()> {
    let bytes = encode(state, extra_meta)?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(TrainState, BTreeMap<String, String>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_state() -> TrainState {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::from_fn([2, 3], |i| i as f64 * -0.5), ParamGroup::Backbone);
        store.insert("a.up", Tensor::from_fn([4], |i| 1.0 / (i as f64 + 1.0)), ParamGroup::Adapter);
        store.get_mut("b").unwrap().trainable = false;
        let mut st = TrainState::new(store, 42);
        st.first_moment.insert("a.up".into(), Tensor::full([4], 1e-3));
        st.second_moment.insert("a.up".into(), Tensor::full([4], 1e-6));
        st.step = 17;
        st.moment_steps = 7;
        st.stage = Some(Stage::Finetune);
        st.completed = vec![Stage::Mim, Stage::Joint];
        st
    }

    #[test]
    fn round_trip_is_exact() {
        let st = sample_state();
        let meta = BTreeMap::from([("config".to_string(), "{\"x\":1}".to_string())]);
        let bytes = encode(&st, &meta).unwrap();
        let (back, m) = decode(&bytes).unwrap();
        assert_eq!(back, st);
        assert_eq!(m["config"], "{\"x\":1}");
        assert_eq!(encode(&back, &meta).unwrap(), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(decode(b"nope"), Err(Error::Format(_))));
        let mut bytes = encode(&sample_state(), &BTreeMap::new()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        let bytes = encode(&sample_state(), &BTreeMap::new()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 8]).is_err());
    }
}
