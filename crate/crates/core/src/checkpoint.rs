//! Versioned binary checkpoints and the inference-only export.
//!
//! A checkpoint carries all seven parameter sets (student encoder, three
//! decoders, correlation head, two EMA teachers) with optimizer momenta, the
//! diffusion schedule, the iteration counter, a config hash, and opaque
//! JSON sections for the trainer's resumable state. The inference export
//! holds exactly one encoder and one decoder.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{DiffusionSchedule, NetConfig};
use crate::params::{ParamEntry, ParamStore};

const CKPT_MAGIC: &[u8; 4] = b"TSCK";
const EXPORT_MAGIC: &[u8; 4] = b"TSIX";
const FORMAT_VERSION: u32 = 1;

/// FNV-1a hash of a canonical config serialization.
pub fn hash_config(canonical: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canonical.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1_0000_01b3);
    }
    h
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64_slice(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn string(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn store(&mut self, name: &str, store: &ParamStore) {
        self.string(name);
        self.u64(store.entries.len() as u64);
        for e in &store.entries {
            self.string(&e.name);
            self.u64(e.shape.len() as u64);
            for d in &e.shape {
                self.u64(*d as u64);
            }
            self.f64_slice(&e.data);
            self.f64_slice(&e.mom);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if buf.len() < 8 || &buf[..4] != magic {
            return Err(Error::Runtime("bad file magic".into()));
        }
        let version = u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]);
        if version != FORMAT_VERSION {
            return Err(Error::Runtime(format!(
                "unsupported format version {version}"
            )));
        }
        Ok(Reader { buf, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Runtime("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64_slice(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Runtime("invalid utf8 string".into()))
    }

    fn store(&mut self) -> Result<(String, ParamStore)> {
        let name = self.string()?;
        let count = self.u64()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let ename = self.string()?;
            let rank = self.u64()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let data = self.f64_slice()?;
            let mom = self.f64_slice()?;
            if shape.iter().product::<usize>() != data.len() || mom.len() != data.len() {
                return Err(Error::Runtime(format!("corrupt store entry {ename}")));
            }
            store.entries.push(ParamEntry {
                name: ename,
                grad: vec![0.0; data.len()],
                shape,
                data,
                mom,
            });
        }
        Ok((name, store))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Runtime("trailing bytes in file".into()));
        }
        Ok(())
    }
}

fn json_of<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Runtime(format!("serialize: {e}")))
}

fn from_json<T: serde::de::DeserializeOwned>(s: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| Error::Runtime(format!("deserialize: {e}")))
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub iteration: u64,
    pub net_cfg: NetConfig,
    pub schedule: DiffusionSchedule,
    /// Named parameter sets, momenta included.
    pub stores: Vec<(String, ParamStore)>,
    /// Resumable trainer state as named JSON sections.
    pub extra: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(CKPT_MAGIC);
        w.u64(self.config_hash);
        w.u64(self.iteration);
        w.string(&json_of(&self.net_cfg)?);
        // schedule floats stay binary so the round trip is bit exact
        w.u64(self.schedule.t_count as u64);
        w.u64(self.schedule.ddim_steps as u64);
        w.f64_slice(&self.schedule.alpha_bar);
        w.u64(self.stores.len() as u64);
        for (name, store) in &self.stores {
            w.store(name, store);
        }
        w.u64(self.extra.len() as u64);
        for (k, v) in &self.extra {
            w.string(k);
            w.string(v);
        }
        fs::write(path, w.buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(&bytes, CKPT_MAGIC)?;
        let config_hash = r.u64()?;
        let iteration = r.u64()?;
        let net_cfg: NetConfig = from_json(&r.string()?)?;
        let schedule = DiffusionSchedule {
            t_count: r.u64()? as usize,
            ddim_steps: r.u64()? as usize,
            alpha_bar: r.f64_slice()?,
        };
        let n_stores = r.u64()? as usize;
        let mut stores = Vec::with_capacity(n_stores);
        for _ in 0..n_stores {
            stores.push(r.store()?);
        }
        let n_extra = r.u64()? as usize;
        let mut extra = BTreeMap::new();
        for _ in 0..n_extra {
            let k = r.string()?;
            let v = r.string()?;
            extra.insert(k, v);
        }
        r.done()?;
        Ok(Checkpoint {
            config_hash,
            iteration,
            net_cfg,
            schedule,
            stores,
            extra,
        })
    }

    pub fn store(&self, name: &str) -> Result<&ParamStore> {
        self.stores
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Runtime(format!("checkpoint missing store '{name}'")))
    }
}

/// Serving bundle: the shared encoder plus exactly one decoder.
#[derive(Debug, Clone)]
pub struct InferenceExport {
    pub config_hash: u64,
    pub net_cfg: NetConfig,
    /// Which decoder this export serves ("theta" for the unlabeled-flow
    /// decoder, "psi" for the supervised decoder of supervised-only runs).
    pub decoder_role: String,
    pub enc: ParamStore,
    pub dec: ParamStore,
}

impl InferenceExport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(EXPORT_MAGIC);
        w.u64(self.config_hash);
        w.string(&json_of(&self.net_cfg)?);
        w.string(&self.decoder_role);
        w.store("enc", &self.enc);
        w.store("dec", &self.dec);
        fs::write(path, w.buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<InferenceExport> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(&bytes, EXPORT_MAGIC)?;
        let config_hash = r.u64()?;
        let net_cfg: NetConfig = from_json(&r.string()?)?;
        let decoder_role = r.string()?;
        let (n1, enc) = r.store()?;
        let (n2, dec) = r.store()?;
        r.done()?;
        if n1 != "enc" || n2 != "dec" {
            return Err(Error::Runtime("export store layout corrupt".into()));
        }
        Ok(InferenceExport {
            config_hash,
            net_cfg,
            decoder_role,
            enc,
            dec,
        })
    }
}
