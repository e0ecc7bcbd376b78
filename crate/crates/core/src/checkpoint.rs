//! Binary checkpoint container for one trained unit.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DURRCKPT" | u32 version | u8 unit kind
//! arch:      str family | u32 layer count | per layer: str name, str kind tag, u32 in, out, k, stride, dilation
//! params:    u32 count | records
//! optimizer: u8 present | [u8 method | 3 x f64 hyper | u64 step | u32 count | records]
//! meta:      u64 seed | u64 iteration | str schedule | u64 config hash | str notes
//!
//! record:    str name | u8 rank | u32 dims.. | u64 payload bytes | f32 payload | u32 crc32(payload)
//! str:       u16 length | utf-8 bytes
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use durr_tensor::{ArchDescriptor, LayerKind, LayerSpec, NetworkParams, OptMethod, OptState, Tensor};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"DURRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionSkew { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("integrity check failed for record {0:?}")]
    Integrity(String),
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Restorer,
    Policy,
}

impl UnitKind {
    fn tag(self) -> u8 {
        match self {
            UnitKind::Restorer => 0,
            UnitKind::Policy => 1,
        }
    }

    fn from_tag(tag: u8) -> CkResult<Self> {
        match tag {
            0 => Ok(UnitKind::Restorer),
            1 => Ok(UnitKind::Policy),
            t => Err(CheckpointError::Malformed(format!("unknown unit kind {t}"))),
        }
    }
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnitKind::Restorer => "restorer",
            UnitKind::Policy => "policy",
        })
    }
}

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub iteration: u64,
    /// Schedule string, e.g. `25:4,35:6`.
    pub schedule: String,
    pub config_hash: u64,
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: UnitKind,
    pub params: NetworkParams<f32>,
    pub optimizer: Option<OptState<f32>>,
    pub meta: CheckpointMeta,
}

/// CRC32 over every parameter name and payload, in name order.
pub fn params_fingerprint(params: &NetworkParams<f32>) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        t.data().iter().for_each(|v| h.update(&v.to_le_bytes()));
    }
    h.finalize()
}

/// Stable hash of a configuration's textual form.
pub fn config_hash(text: &str) -> u64 {
    crc32fast::hash(text.as_bytes()) as u64
}

impl Checkpoint {
    pub fn new(kind: UnitKind, params: NetworkParams<f32>, optimizer: Option<OptState<f32>>, meta: CheckpointMeta) -> Self {
        Self {
            kind,
            params,
            optimizer,
            meta,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(self.kind.tag());
        write_arch(&mut w, self.params.arch());
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.record(name, t);
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                let (tag, hyper) = match opt.method {
                    OptMethod::Adam { beta1, beta2, eps } => (0u8, [beta1, beta2, eps]),
                    OptMethod::RmsProp { alpha, eps } => (1u8, [alpha, eps, 0.0]),
                };
                w.u8(tag);
                hyper.iter().for_each(|&h| w.f64(h));
                w.u64(opt.step);
                w.u32((opt.first.len() + opt.second.len()) as u32);
                for (name, t) in &opt.first {
                    w.record(&format!("m/{name}"), t);
                }
                for (name, t) in &opt.second {
                    w.record(&format!("v/{name}"), t);
                }
            }
        }
        w.u64(self.meta.seed);
        w.u64(self.meta.iteration);
        w.str(&self.meta.schedule);
        w.u64(self.meta.config_hash);
        w.str(&self.meta.notes);
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> CkResult<Self> {
        Self::parse(data, None)
    }

    /// Parses a checkpoint, failing with [`CheckpointError::ArchMismatch`] before any
    /// tensor record is read if the stored unit differs from `kind`/`arch`.
    pub fn from_bytes_expecting(data: &[u8], kind: UnitKind, arch: &ArchDescriptor) -> CkResult<Self> {
        Self::parse(data, Some((kind, arch)))
    }

    fn parse(data: &[u8], expect: Option<(UnitKind, &ArchDescriptor)>) -> CkResult<Self> {
        let mut r = Reader { data, pos: 0 };
        if r.take(8, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionSkew {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let kind = UnitKind::from_tag(r.u8("unit kind")?)?;
        let arch = read_arch(&mut r)?;
        if let Some((want_kind, want_arch)) = expect {
            if kind != want_kind {
                return Err(CheckpointError::ArchMismatch(format!("checkpoint holds a {kind} unit, expected {want_kind}")));
            }
            if &arch != want_arch {
                return Err(CheckpointError::ArchMismatch(format!(
                    "stored {} differs from expected {}",
                    arch.family, want_arch.family
                )));
            }
        }
        let n = r.u32("parameter count")?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let (name, t) = r.record()?;
            entries.insert(name, t.with_grad(true));
        }
        let params = NetworkParams::new(arch, entries).map_err(|e| CheckpointError::ArchMismatch(e.to_string()))?;
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let tag = r.u8("optimizer method")?;
                let hyper = [r.f64("optimizer")?, r.f64("optimizer")?, r.f64("optimizer")?];
                let method = match tag {
                    0 => OptMethod::Adam {
                        beta1: hyper[0],
                        beta2: hyper[1],
                        eps: hyper[2],
                    },
                    1 => OptMethod::RmsProp {
                        alpha: hyper[0],
                        eps: hyper[1],
                    },
                    t => return Err(CheckpointError::Malformed(format!("unknown optimizer method {t}"))),
                };
                let mut opt = OptState::new(method);
                opt.step = r.u64("optimizer step")?;
                for _ in 0..r.u32("optimizer record count")? {
                    let (name, t) = r.record()?;
                    let slot = match name.split_once('/') {
                        Some(("m", p)) => opt.first.insert(p.to_string(), t),
                        Some(("v", p)) => opt.second.insert(p.to_string(), t),
                        _ => return Err(CheckpointError::Malformed(format!("bad optimizer record {name:?}"))),
                    };
                    if slot.is_some() {
                        return Err(CheckpointError::Malformed(format!("duplicate optimizer record {name:?}")));
                    }
                }
                Some(opt)
            }
            f => return Err(CheckpointError::Malformed(format!("bad optimizer flag {f}"))),
        };
        let meta = CheckpointMeta {
            seed: r.u64("meta")?,
            iteration: r.u64("meta")?,
            schedule: r.str("meta")?,
            config_hash: r.u64("meta")?,
            notes: r.str("meta")?,
        };
        if r.pos != data.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", data.len() - r.pos)));
        }
        Ok(Self {
            kind,
            params,
            optimizer,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        fs::write(path.as_ref(), self.to_bytes()).map_err(|e| crate::DurrError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let data = fs::read(path.as_ref()).map_err(|e| crate::DurrError::io(&path, e))?;
        Ok(Self::from_bytes(&data)?)
    }

    /// Loads a checkpoint that must hold a unit of `kind`.
    pub fn load_kind(path: impl AsRef<Path>, kind: UnitKind) -> crate::Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind != kind {
            return Err(CheckpointError::ArchMismatch(format!("checkpoint holds a {} unit, expected {kind}", ck.kind)).into());
        }
        Ok(ck)
    }

    /// Overwrites `params` from a stored checkpoint; `params` is untouched on any error.
    pub fn load_into(path: impl AsRef<Path>, kind: UnitKind, params: &mut NetworkParams<f32>) -> crate::Result<Self> {
        let data = fs::read(path.as_ref()).map_err(|e| crate::DurrError::io(&path, e))?;
        let ck = Self::from_bytes_expecting(&data, kind, params.arch())?;
        *params = ck.params.clone();
        Ok(ck)
    }
}

fn write_arch(w: &mut Writer, arch: &ArchDescriptor) {
    w.str(&arch.family);
    w.u32(arch.layers.len() as u32);
    for l in &arch.layers {
        w.str(&l.name);
        w.str(l.kind.tag());
        for v in [l.in_ch, l.out_ch, l.kernel, l.stride, l.dilation] {
            w.u32(v as u32);
        }
    }
}

fn read_arch(r: &mut Reader) -> CkResult<ArchDescriptor> {
    let family = r.str("arch")?;
    let n = r.u32("arch")?;
    let mut layers = Vec::with_capacity(n.min(1024) as usize);
    for _ in 0..n {
        let name = r.str("arch")?;
        let tag = r.str("arch")?;
        let kind = LayerKind::from_tag(&tag).ok_or_else(|| CheckpointError::Malformed(format!("unknown layer kind {tag:?}")))?;
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32("arch")? as usize;
        }
        layers.push(LayerSpec {
            name,
            kind,
            in_ch: dims[0],
            out_ch: dims[1],
            kernel: dims[2],
            stride: dims[3],
            dilation: dims[4],
        });
    }
    Ok(ArchDescriptor { family, layers })
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.bytes(&(s.len() as u16).to_le_bytes());
        self.bytes(s.as_bytes());
    }
    fn record(&mut self, name: &str, t: &Tensor<f32>) {
        self.str(name);
        self.u8(t.rank() as u8);
        t.shape().iter().for_each(|&d| self.u32(d as u32));
        let payload: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        self.u64(payload.len() as u64);
        self.bytes(&payload);
        self.u32(crc32fast::hash(&payload));
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> CkResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &'static str) -> CkResult<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &'static str) -> CkResult<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &'static str) -> CkResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> CkResult<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &'static str) -> CkResult<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn str(&mut self, what: &'static str) -> CkResult<String> {
        let n = self.u16(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| CheckpointError::Malformed(format!("non-utf8 string in {what}")))
    }
    fn record(&mut self) -> CkResult<(String, Tensor<f32>)> {
        let name = self.str("record name")?;
        let rank = self.u8("record rank")? as usize;
        let dims = (0..rank).map(|_| self.u32("record dims").map(|d| d as usize)).collect::<CkResult<Vec<_>>>()?;
        let len = self.u64("record length")? as usize;
        let expected = dims.iter().try_fold(4usize, |acc, &d| acc.checked_mul(d));
        if rank == 0 || expected != Some(len) {
            return Err(CheckpointError::Integrity(name));
        }
        let payload = self.take(len, "record payload")?;
        if self.u32("record checksum")? != crc32fast::hash(payload) {
            return Err(CheckpointError::Integrity(name));
        }
        let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::from_vec(dims, values).map_err(|_| CheckpointError::Integrity(name.clone()))?;
        Ok((name, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let arch = ArchDescriptor {
            family: "toy".into(),
            layers: vec![LayerSpec::conv("c", 2, 3, 3, 1, 1), LayerSpec::prelu("a", 3)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = NetworkParams::zeros(arch);
        for (_, t) in params.iter_mut() {
            let fresh = Tensor::randn(t.shape().to_vec(), 1.0, &mut rng);
            t.data_mut().copy_from_slice(fresh.data());
        }
        let mut opt = OptState::new(OptMethod::adam());
        opt.step = 7;
        opt.first.insert("c.w".into(), Tensor::full(vec![3, 2, 3, 3], 0.5));
        opt.second.insert("c.w".into(), Tensor::full(vec![3, 2, 3, 3], 0.25));
        Checkpoint::new(
            UnitKind::Restorer,
            params,
            Some(opt),
            CheckpointMeta {
                seed: 42,
                iteration: 100,
                schedule: "25:4,35:6".into(),
                config_hash: config_hash("cfg"),
                notes: "unit test".into(),
            },
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn each_failure_is_distinct() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::VersionSkew { found: 9, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        // flip a byte inside the first record's payload
        let pos = bytes.windows(3).position(|w| w == b"a.s").unwrap() + 7 + 1 + 4 + 8;
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Integrity(n)) if n == "a.slope"));
    }

    #[test]
    fn wrong_kind_or_arch_is_rejected_first() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let err = Checkpoint::from_bytes_expecting(&bytes, UnitKind::Policy, ck.params.arch());
        assert!(matches!(err, Err(CheckpointError::ArchMismatch(_))));
        let mut other = ck.params.arch().clone();
        other.layers[0].kernel = 5;
        let err = Checkpoint::from_bytes_expecting(&bytes, UnitKind::Restorer, &other);
        assert!(matches!(err, Err(CheckpointError::ArchMismatch(_))));
        // arch is rejected even when a later record is corrupt
        let mut corrupt = bytes.clone();
        let n = corrupt.len();
        corrupt[n - 40] ^= 1;
        let err = Checkpoint::from_bytes_expecting(&corrupt, UnitKind::Restorer, &other);
        assert!(matches!(err, Err(CheckpointError::ArchMismatch(_))));
    }
}
