//! FBSIM1 binary container.
//!
//! All integers are little-endian `u64` unless noted, all reals are
//! little-endian IEEE-754 `f64`.
//!
//! Dataset file:
//!
//! ```text
//! "FBSIM1"  K  input_dim  P
//! K client blocks:
//!     id  scenario:u8  seed  shift_applied:u8  n
//!     scale[input_dim]  offset[input_dim]
//!     features[n * input_dim]            (row-major)
//!     labels[ceil(n * P / 8)] bytes      (row-major bits, LSB first)
//! test block:
//!     n  features[n * input_dim]  labels[ceil(n * P / 8)]
//! ```
//!
//! Parameter bundle (checkpoints), same magic:
//!
//! ```text
//! "FBSIM1"  count
//! count entries:
//!     name  segments  (segment: name kind:u8 offset len)*  len  values[len]
//! ```
//! where `name` is a `u64` byte length followed by UTF-8 bytes.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::partition::{ClientDataset, FederatedDataset, Provenance, ShiftTransform};
use super::synth::{Samples, ScenarioKind, SyntheticConfig};
use crate::error::{Error, Result};
use crate::nn::{Layout, ParamVector, Segment, SegmentKind};

pub const MAGIC: &[u8; 6] = b"FBSIM1";

#[derive(Default)]
struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f64>) {
        for v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn bits(&mut self, labels: &Array2<f64>) {
        let total = labels.len();
        let mut packed = vec![0u8; total.div_ceil(8)];
        for (i, &y) in labels.iter().enumerate() {
            if y == 1.0 {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        self.buf.extend_from_slice(&packed);
    }
}

struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn new(data: &'a [u8]) -> Self {
        Decoder { data, pos: 0 }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.pos as u64, message: message.into() })
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < len {
            return self.err(format!(
                "truncated while reading {what}: need {len} bytes, {} remain",
                self.data.len() - self.pos
            ));
        }
        let out = &self.data[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn count(&mut self, what: &str, limit: usize) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        if v > limit as u64 {
            return Err(Error::Format { offset: at as u64, message: format!("{what} = {v} is implausible") });
        }
        Ok(v as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format { offset: self.pos as u64, message: format!("{what} too large") })?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let len = self.count(what, self.data.len())?;
        let at = self.pos;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Format { offset: at as u64, message: format!("{what} is not UTF-8") })
    }

    fn bits(&mut self, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
        let total = rows * cols;
        let packed = self.take(total.div_ceil(8), what)?;
        let vals = (0..total).map(|i| f64::from((packed[i / 8] >> (i % 8)) & 1)).collect();
        Ok(Array2::from_shape_vec((rows, cols), vals).expect("shape matches count"))
    }

    fn magic(&mut self) -> Result<()> {
        let head = self.take(MAGIC.len(), "magic")?;
        if head == MAGIC {
            return Ok(());
        }
        if head.starts_with(b"FBSIM") {
            return Err(Error::Version {
                found: String::from_utf8_lossy(head).into_owned(),
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
            });
        }
        Err(Error::Format { offset: 0, message: "missing FBSIM1 magic".into() })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return self.err(format!("{} trailing bytes", self.data.len() - self.pos));
        }
        Ok(())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::path(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::path(&tmp, e))?;
    f.sync_all().map_err(|e| Error::path(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::path(path, e))
}

pub fn encode_dataset(ds: &FederatedDataset) -> Result<Vec<u8>> {
    if ds.clients.is_empty() {
        return Err(Error::Config("refusing to save a dataset with no clients".into()));
    }
    let d = ds.input_dim();
    let p = ds.num_classes();
    let mut e = Encoder::default();
    e.buf.extend_from_slice(MAGIC);
    e.u64(ds.clients.len() as u64);
    e.u64(d as u64);
    e.u64(p as u64);
    for c in &ds.clients {
        if c.features.ncols() != d || c.labels.ncols() != p || c.shift.scale.len() != d {
            return Err(Error::Shape(format!("client {} disagrees with the test split's dimensions", c.client_id)));
        }
        e.u64(c.client_id);
        e.u8(c.provenance.scenario.code());
        e.u64(c.provenance.seed);
        e.u8(u8::from(c.provenance.shift_applied));
        e.u64(c.len() as u64);
        e.f64s(&c.shift.scale);
        e.f64s(&c.shift.offset);
        e.f64s(c.features.iter());
        e.bits(&c.labels);
    }
    e.u64(ds.test.len() as u64);
    e.f64s(ds.test.features.iter());
    e.bits(&ds.test.labels);
    Ok(e.buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<FederatedDataset> {
    let mut r = Decoder::new(bytes);
    r.magic()?;
    let limit = bytes.len();
    let k = r.count("client count", limit)?;
    if k == 0 {
        return r.err("dataset has zero clients");
    }
    let d = r.count("input_dim", limit)?;
    let p = r.count("num_classes", limit)?;
    let mut clients = Vec::with_capacity(k);
    for _ in 0..k {
        let client_id = r.u64("client id")?;
        let code = r.u8("scenario")?;
        let scenario = match ScenarioKind::from_code(code) {
            Some(s) => s,
            None => return r.err(format!("unknown scenario code {code}")),
        };
        let seed = r.u64("seed")?;
        let shift_applied = r.u8("shift flag")? != 0;
        let n = r.count("client sample count", limit)?;
        let scale = r.f64s(d, "shift scale")?.into();
        let offset = r.f64s(d, "shift offset")?.into();
        let features = Array2::from_shape_vec((n, d), r.f64s(n * d, "features")?).expect("sized read");
        let labels = r.bits(n, p, "labels")?;
        clients.push(ClientDataset {
            client_id,
            features,
            labels,
            shift: ShiftTransform { scale, offset },
            provenance: Provenance { scenario, seed, shift_applied },
        });
    }
    let n = r.count("test sample count", limit)?;
    let features = Array2::from_shape_vec((n, d), r.f64s(n * d, "test features")?).expect("sized read");
    let labels = r.bits(n, p, "test labels")?;
    r.finish()?;
    Ok(FederatedDataset { clients, test: Samples { features, labels } })
}

pub fn save_dataset(ds: &FederatedDataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<FederatedDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::path(path, e))?;
    decode_dataset(&bytes)
}

/// JSON provenance written next to a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub format: String,
    pub scenario: ScenarioKind,
    pub config: SyntheticConfig,
}

impl DatasetSidecar {
    pub fn new(scenario: ScenarioKind, config: SyntheticConfig) -> Self {
        DatasetSidecar { format: String::from_utf8_lossy(MAGIC).into_owned(), scenario, config }
    }
}

pub fn save_sidecar(sidecar: &DatasetSidecar, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(sidecar)? + "\n";
    write_atomic(path.as_ref(), text.as_bytes())
}

pub fn load_sidecar(path: impl AsRef<Path>) -> Result<DatasetSidecar> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn encode_params(entries: &[(String, &ParamVector)]) -> Vec<u8> {
    let mut e = Encoder::default();
    e.buf.extend_from_slice(MAGIC);
    e.u64(entries.len() as u64);
    for (name, pv) in entries {
        e.str(name);
        let segs = pv.layout().segments();
        e.u64(segs.len() as u64);
        for s in segs {
            e.str(&s.name);
            e.u8(s.kind.code());
            e.u64(s.offset as u64);
            e.u64(s.len as u64);
        }
        e.u64(pv.len() as u64);
        e.f64s(pv.values());
    }
    e.buf
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<(String, ParamVector)>> {
    let mut r = Decoder::new(bytes);
    r.magic()?;
    let limit = bytes.len();
    let count = r.count("entry count", limit)?;
    let mut out = Vec::with_capacity(count);
    // consecutive entries usually share a layout; reuse the Arc
    let mut last: Option<Arc<Layout>> = None;
    for _ in 0..count {
        let name = r.str("entry name")?;
        let nseg = r.count("segment count", limit)?;
        let mut segments = Vec::with_capacity(nseg);
        for _ in 0..nseg {
            let sname = r.str("segment name")?;
            let code = r.u8("segment kind")?;
            let Some(kind) = SegmentKind::from_code(code) else {
                return r.err(format!("unknown segment kind {code}"));
            };
            let offset = r.count("segment offset", usize::MAX)?;
            let len = r.count("segment length", limit)?;
            segments.push(Segment { name: sname, offset, len, kind });
        }
        let at = r.pos;
        let layout = Layout::new(segments).map_err(|e| Error::Format { offset: at as u64, message: e.to_string() })?;
        let layout = match &last {
            Some(prev) if **prev == layout => prev.clone(),
            _ => Arc::new(layout),
        };
        let len = r.count("value count", limit)?;
        if len != layout.len() {
            return r.err(format!("{len} values for a segment map of length {}", layout.len()));
        }
        let values = r.f64s(len, "values")?;
        out.push((name, ParamVector::from_values(layout.clone(), values)?));
        last = Some(layout);
    }
    r.finish()?;
    Ok(out)
}

pub fn save_params(entries: &[(String, &ParamVector)], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_params(entries))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<Vec<(String, ParamVector)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::path(path, e))?;
    decode_params(&bytes)
}
