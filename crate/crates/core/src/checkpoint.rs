//! Binary checkpoint format.
//!
//! ```text
//! "CMIV" | u32 version | u32 tensor count
//! per tensor: u32 name length | UTF-8 name | u32 rank | u64 dims… | f64 payload…
//! u64 FNV-1a checksum over all payload bytes
//! ```
//! Integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use cmivtp_numerics::Tensor;

use crate::error::{Error, Result};
use crate::model::{fnv1a, CmivtpModel, ModelConfig};
use crate::vgtb::{BankEntry, BankHeader, TrajectoryBank};

pub const MAGIC: &[u8; 4] = b"CMIV";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut payload_hash = Fnv::new();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            let b = v.to_le_bytes();
            payload_hash.update(&b);
            out.extend_from_slice(&b);
        }
    }
    out.extend_from_slice(&payload_hash.0.to_le_bytes());
    out
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(fnv1a(&[]))
    }

    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated while reading {what} at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("bad magic (not a checkpoint)".into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported version {version} (expected {VERSION})"));
    }
    let count = r.u32("tensor count")? as usize;
    let mut payload_hash = Fnv::new();
    let mut out = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| format!("tensor {i}: name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(format!("tensor `{name}`: rank {rank} exceeds {MAX_RANK}"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64("dimension")?).map_err(|_| format!("tensor `{name}`: dimension overflow"))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| format!("tensor `{name}`: element count overflow"))?;
            shape.push(d);
        }
        if numel.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(format!("truncated payload for tensor `{name}`"));
        }
        let raw = r.take(numel * 8, "payload")?;
        payload_hash.update(raw);
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| format!("tensor `{name}`: {e}"))?;
        out.push((name, t));
    }
    let checksum = r.u64("checksum")?;
    if checksum != payload_hash.0 {
        return Err("checksum mismatch".into());
    }
    if r.remaining() != 0 {
        return Err(format!("{} trailing bytes after checksum", r.remaining()));
    }
    Ok(out)
}

pub fn write_tensors(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

const META_CONFIG: &str = "meta.model_config";
const META_HASH: &str = "meta.config_hash";

fn split_u64(v: u64) -> [f64; 2] {
    [(v & 0xFFFF_FFFF) as f64, (v >> 32) as f64]
}

fn join_u64(v: &[f64]) -> Option<u64> {
    let ok = |x: f64| x >= 0.0 && x < 4294967296.0 && x.fract() == 0.0;
    (v.len() == 2 && ok(v[0]) && ok(v[1])).then(|| v[0] as u64 | ((v[1] as u64) << 32))
}

fn schema(name: &str, msg: impl Into<String>) -> Error {
    Error::Schema {
        name: name.into(),
        msg: msg.into(),
    }
}

/// Parameters, the model config and the optional trajectory bank as named tensors.
pub fn model_tensors(model: &CmivtpModel) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .store
        .iter()
        .map(|(n, t)| (n.to_string(), Tensor::new(t.shape(), t.data().to_vec()).expect("valid")))
        .collect();
    out.push((META_CONFIG.into(), Tensor::vector(model.cfg.to_vec())));
    out.push((META_HASH.into(), Tensor::vector(split_u64(model.cfg.hash()).to_vec())));
    if let Some(bank) = &model.bank {
        let h = bank.header;
        let k = bank.entries.len();
        let seed = split_u64(h.seed);
        let flat = |f: &dyn Fn(&BankEntry) -> Vec<f64>| bank.entries.iter().flat_map(f).collect::<Vec<f64>>();
        out.push(("bank.header".into(), Tensor::vector(vec![h.t_obs as f64, h.t_fut as f64, seed[0], seed[1]])));
        out.push((
            "bank.obs".into(),
            Tensor::new(&[k, h.t_obs, 2], flat(&|e| e.obs.iter().flatten().copied().collect())).expect("bank shape"),
        ));
        out.push((
            "bank.fut".into(),
            Tensor::new(&[k, h.t_fut, 2], flat(&|e| e.fut.iter().flatten().copied().collect())).expect("bank shape"),
        ));
        out.push((
            "bank.feat".into(),
            Tensor::new(&[k, 2 * h.t_obs], flat(&|e| e.feat.clone())).expect("bank shape"),
        ));
    }
    out
}

fn bank_from_tensors(map: &BTreeMap<String, Tensor>) -> Result<Option<TrajectoryBank>> {
    let Some(header) = map.get("bank.header") else {
        return Ok(None);
    };
    let h = header.data();
    if h.len() != 4 {
        return Err(schema("bank.header", "expected 4 values"));
    }
    let count = |x: f64, name: &str| -> Result<usize> {
        if x >= 1.0 && x.fract() == 0.0 && x < 1e9 {
            Ok(x as usize)
        } else {
            Err(schema(name, "expected a positive integer"))
        }
    };
    let (t_obs, t_fut) = (count(h[0], "bank.header")?, count(h[1], "bank.header")?);
    let seed = join_u64(&h[2..4]).ok_or_else(|| schema("bank.header", "bad seed encoding"))?;
    let get = |name: &str| map.get(name).ok_or_else(|| schema(name, "missing"));
    let (obs, fut, feat) = (get("bank.obs")?, get("bank.fut")?, get("bank.feat")?);
    let k = obs.shape().first().copied().unwrap_or(0);
    for (name, t, shape) in [
        ("bank.obs", obs, vec![k, t_obs, 2]),
        ("bank.fut", fut, vec![k, t_fut, 2]),
        ("bank.feat", feat, vec![k, 2 * t_obs]),
    ] {
        if t.shape() != shape.as_slice() {
            return Err(schema(name, format!("shape {:?}, expected {shape:?}", t.shape())));
        }
    }
    let pts = |v: &[f64]| v.chunks(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>();
    let entries = (0..k)
        .map(|i| BankEntry {
            obs: pts(&obs.data()[i * 2 * t_obs..(i + 1) * 2 * t_obs]),
            fut: pts(&fut.data()[i * 2 * t_fut..(i + 1) * 2 * t_fut]),
            feat: feat.data()[i * 2 * t_obs..(i + 1) * 2 * t_obs].to_vec(),
        })
        .collect();
    Ok(Some(TrajectoryBank {
        header: BankHeader { t_obs, t_fut, k, seed },
        entries,
    }))
}

/// Rebuild a model from named tensors. With `expected`, the stored config
/// is ignored for construction and every tensor must match that config's
/// shapes.
pub fn model_from_tensors(tensors: Vec<(String, Tensor)>, expected: Option<&ModelConfig>) -> Result<CmivtpModel> {
    let mut map = BTreeMap::new();
    for (n, t) in tensors {
        if map.insert(n.clone(), t).is_some() {
            return Err(schema(&n, "duplicate tensor"));
        }
    }
    let stored_cfg = ModelConfig::from_vec(map.get(META_CONFIG).ok_or_else(|| schema(META_CONFIG, "missing"))?.data())?;
    let stored_hash = join_u64(map.get(META_HASH).ok_or_else(|| schema(META_HASH, "missing"))?.data())
        .ok_or_else(|| schema(META_HASH, "bad encoding"))?;
    if stored_hash != stored_cfg.hash() {
        return Err(schema(META_HASH, "config hash does not match the stored config"));
    }
    if expected.is_none() {
        // refuse to allocate a model far larger than the payload on disk
        let held: usize = map.values().map(Tensor::numel).sum();
        if stored_cfg.min_param_count() > held {
            return Err(schema(META_CONFIG, "config needs more parameters than the checkpoint holds"));
        }
    }
    let cfg = expected.cloned().unwrap_or(stored_cfg);
    let mut model = CmivtpModel::new(cfg)?;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let t = map.get(&name).ok_or_else(|| schema(&name, "missing from checkpoint"))?;
        let target = model.store.get_mut(id);
        if t.shape() != target.shape() {
            return Err(schema(
                &name,
                format!("shape {:?} in checkpoint, {:?} expected", t.shape(), target.shape()),
            ));
        }
        target.data_mut().copy_from_slice(t.data());
    }
    for name in map.keys() {
        if !name.starts_with("meta.") && !name.starts_with("bank.") && model.store.find(name).is_none() {
            return Err(schema(name, "unexpected tensor for this model config"));
        }
    }
    let bank = bank_from_tensors(&map)?;
    model.set_bank(bank)?;
    Ok(model)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &CmivtpModel) -> Result<()> {
    write_tensors(path, &model_tensors(model))
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<CmivtpModel> {
    let path = path.as_ref();
    let tensors = read_tensors(path)?;
    model_from_tensors(tensors, expected).map_err(|e| match e {
        Error::Schema { name, msg } => Error::Schema {
            name,
            msg: format!("{msg} (in {})", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cmivtp_numerics::Rng;

    fn random_tensors(seed: u64) -> Vec<(String, Tensor)> {
        let mut r = Rng::new(seed);
        (0..5)
            .map(|i| {
                let shape: Vec<usize> = (0..1 + i % 3).map(|_| 1 + r.below(4)).collect();
                let n = shape.iter().product();
                (format!("t{i}"), Tensor::new(&shape, (0..n).map(|_| r.normal()).collect()).unwrap())
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = random_tensors(1);
        let bytes = encode(&t);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&random_tensors(2));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode(&bad).unwrap_err().contains("version"));
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 12] ^= 1;
        assert!(decode(&bad).unwrap_err().contains("checksum"));
        assert!(decode(&[]).is_err());
    }

    #[test]
    fn bad_magic_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, b"NOPE0000").unwrap();
        let err = read_tensors(&p).unwrap_err().to_string();
        assert!(err.contains("bad.bin") && err.contains("magic"), "{err}");
    }

    fn small_cfg(d: usize) -> ModelConfig {
        ModelConfig {
            d,
            k_modes: 2,
            latent_dim: 4,
            t_obs: 3,
            t_fut: 2,
            c_f: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn model_round_trip_and_schema_guard() {
        let model = CmivtpModel::new(small_cfg(8)).unwrap();
        let bank = crate::vgtb::build_bank(
            &[vec![[0.0, 0.0], [0.1, 0.0], [0.2, 0.1], [0.3, 0.1], [0.4, 0.2]]],
            4,
            3,
            2,
            7,
        )
        .unwrap();
        let model = model.with_bank(bank).unwrap();
        let bytes = encode(&model_tensors(&model));
        let back = model_from_tensors(decode(&bytes).unwrap(), None).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.bank, model.bank);
        assert_eq!(encode(&model_tensors(&back)), bytes);

        let err = model_from_tensors(decode(&bytes).unwrap(), Some(&small_cfg(4))).unwrap_err();
        match err {
            Error::Schema { name, msg } => {
                assert!(!name.starts_with("meta."), "{name}");
                assert!(msg.contains("shape"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }
    }
}
