//! Binary tensor container used for checkpoints and window datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "IDGC" | version u32 | meta_len u32 | meta (UTF-8 key=value lines)
//! | count u32 | count × { name_len u32 | name | dtype u8 | rank u32 | rank × u64 | values }
//! ```
//!
//! Metadata values escape `\` and newline as `\\` and `\n`.

use std::path::Path;

use idgen_tensor::{DType, Real, Tensor};

use crate::data::{LabelVocabulary, NormalizationStats, Provenance, SignalWindow, Source, Split};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IDGC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.dims(),
            TensorData::F64(t) => t.dims(),
        }
    }
}

impl From<Tensor<f32>> for TensorData {
    fn from(t: Tensor<f32>) -> Self {
        TensorData::F32(t)
    }
}

impl From<Tensor<f64>> for TensorData {
    fn from(t: Tensor<f64>) -> Self {
        TensorData::F64(t)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, TensorData)>,
}

fn escape(v: &str) -> String {
    v.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(v: &str) -> Result<String> {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            other => return Err(Error::Container(format!("bad escape `\\{}` in metadata", other.unwrap_or(' ')))),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Container(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Container(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.metadata.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.metadata.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Container(format!("missing metadata key `{key}`")))
    }

    pub fn push(&mut self, name: &str, t: impl Into<TensorData>) {
        self.tensors.push((name.to_string(), t.into()));
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.tensor(name) {
            Some(TensorData::F32(t)) => Ok(t),
            Some(_) => Err(Error::Container(format!("tensor `{name}` is not f32"))),
            None => Err(Error::Container(format!("missing tensor `{name}`"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<&Tensor<f64>> {
        match self.tensor(name) {
            Some(TensorData::F64(t)) => Ok(t),
            Some(_) => Err(Error::Container(format!("tensor `{name}` is not f64"))),
            None => Err(Error::Container(format!("missing tensor `{name}`"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains(['=', '\n', '\\']) {
                return Err(Error::Container(format!("invalid metadata key `{k}`")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(&escape(v));
            meta.push('\n');
        }
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            put_u32(&mut out, t.dims().len())?;
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                TensorData::F32(t) => f32::to_le_bytes_vec(t.data(), &mut out),
                TensorData::F64(t) => f64::to_le_bytes_vec(t.data(), &mut out),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Container("not an IDGC container (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Container(format!(
                "unsupported container version {version} (this build reads version {VERSION})"
            )));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::Container(format!("metadata is not UTF-8: {e}")))?;
        let mut metadata = Vec::new();
        for line in meta.split_terminator('\n') {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Container(format!("metadata line without `=`: `{line}`")))?;
            metadata.push((k.to_string(), unescape(v)?));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|e| Error::Container(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let code = r.take(1, "dtype")?[0];
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Container(format!("tensor `{name}`: unknown dtype code {code}")))?;
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64("dims")? as usize);
            }
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let nbytes = numel
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Container(format!("tensor `{name}`: size overflow")))?;
            let payload = r.take(nbytes, &name)?;
            let t = match dtype {
                DType::F32 => TensorData::F32(Tensor::new(&dims, f32::from_le_bytes_slice(payload))?),
                DType::F64 => TensorData::F64(Tensor::new(&dims, f64::from_le_bytes_slice(payload))?),
            };
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Container(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Container { metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Container(msg) => Error::Container(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// A window collection together with the tables persisted next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<SignalWindow>,
    pub vocab: LabelVocabulary,
    pub stats: Option<NormalizationStats>,
    pub split: Option<Split>,
}

fn join_idx(idx: &[usize]) -> String {
    idx.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_idx(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| v.parse().map_err(|_| Error::Container(format!("bad index `{v}`"))))
        .collect()
}

impl WindowSet {
    pub fn to_container(&self) -> Result<Container> {
        let first = self
            .windows
            .first()
            .ok_or_else(|| Error::Data("cannot store an empty window set".into()))?;
        let mut c = Container::new();
        c.set_meta("kind", "windows");
        c.set_meta("labels", self.vocab.names().join(","));
        c.set_meta("normalized", first.normalized.to_string());
        c.set_meta(
            "sources",
            self.windows.iter().map(|w| w.source.to_string()).collect::<Vec<_>>().join(","),
        );
        c.set_meta(
            "provenance",
            self.windows.iter().map(|w| w.provenance.to_string()).collect::<Vec<_>>().join("\n"),
        );
        if let Some(stats) = &self.stats {
            c.set_meta("stats", stats.to_csv());
        }
        if let Some(split) = &self.split {
            c.set_meta("split.train", join_idx(&split.train));
            c.set_meta("split.val", join_idx(&split.val));
            c.set_meta("split.test", join_idx(&split.test));
        }
        let values: Vec<Tensor<f32>> = self.windows.iter().map(|w| w.values.clone()).collect();
        c.push("windows", Tensor::stack(&values)?);
        let labels: Vec<f64> = self.windows.iter().map(|w| w.label as f64).collect();
        c.push("labels", Tensor::new(&[labels.len()], labels)?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind") != Some("windows") {
            return Err(Error::Container("container does not hold a window set".into()));
        }
        let vocab = LabelVocabulary::new(c.require_meta("labels")?.split(',').map(String::from).collect())?;
        let normalized = c.require_meta("normalized")? == "true";
        let windows_t = c.f32("windows")?;
        let labels = c.f64("labels")?;
        let n = windows_t.dims()[0];
        let sources: Vec<Source> = c
            .require_meta("sources")?
            .split(',')
            .map(|s| match s {
                "real" => Ok(Source::Real),
                "synthetic" => Ok(Source::Synthetic),
                _ => Err(Error::Container(format!("bad source `{s}`"))),
            })
            .collect::<Result<_>>()?;
        let prov: Vec<Provenance> = c
            .require_meta("provenance")?
            .split('\n')
            .map(str::parse)
            .collect::<Result<_>>()?;
        if labels.numel() != n || sources.len() != n || prov.len() != n {
            return Err(Error::Container("window, label, source and provenance counts differ".into()));
        }
        let dims = &windows_t.dims()[1..];
        let mut windows = Vec::with_capacity(n);
        for i in 0..n {
            let label = labels.data()[i] as usize;
            if label >= vocab.len() {
                return Err(Error::Container(format!("window {i}: label id {label} out of vocabulary")));
            }
            windows.push(SignalWindow {
                values: Tensor::new(dims, windows_t.outer(i).to_vec())?,
                label,
                source: sources[i],
                provenance: prov[i].clone(),
                normalized,
            });
        }
        let stats = c.meta("stats").map(NormalizationStats::from_csv).transpose()?;
        let split = match (c.meta("split.train"), c.meta("split.val"), c.meta("split.test")) {
            (Some(a), Some(b), Some(t)) => Some(Split {
                train: parse_idx(a)?,
                val: parse_idx(b)?,
                test: parse_idx(t)?,
            }),
            _ => None,
        };
        Ok(WindowSet {
            windows,
            vocab,
            stats,
            split,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_dataset;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.set_meta("config", "[diffusion]\nepochs = 3\npath = C:\\x");
        c.set_meta("seed", "7");
        c.push("a/w", Tensor::new(&[2, 3], vec![1.0f32, -2.5, 3.0, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap());
        c.push("b", Tensor::new(&[1], vec![std::f64::consts::PI]).unwrap());
        c
    }

    #[test]
    fn byte_exact_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta("config"), c.meta("config"));
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..4], b"IDGC");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    }

    #[test]
    fn rejects_unknown_version_and_truncation() {
        let mut bytes = sample().to_bytes().unwrap();
        let msg = {
            let mut b = bytes.clone();
            b[4] = 9;
            Container::from_bytes(&b).unwrap_err().to_string()
        };
        assert!(msg.contains("unsupported container version 9"), "{msg}");
        bytes.pop();
        assert!(Container::from_bytes(&bytes).unwrap_err().to_string().contains("truncated"));
        assert!(Container::from_bytes(b"NOPE").is_err());
    }

    #[test]
    fn window_set_round_trip() {
        let windows = toy_dataset(2, 3, 16);
        let set = WindowSet {
            windows,
            vocab: LabelVocabulary::default(),
            stats: None,
            split: Some(Split {
                train: vec![0, 1, 2],
                val: vec![],
                test: vec![5],
            }),
        };
        let c = set.to_container().unwrap();
        let back = WindowSet::from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, set);
    }

    proptest! {
        #[test]
        fn arbitrary_containers_round_trip(
            vals in proptest::collection::vec(any::<f32>(), 1..40),
            meta in "[a-z\\\\\n=]{0,20}",
        ) {
            let mut c = Container::new();
            c.set_meta("k", meta.clone());
            let n = vals.len();
            c.push("t", Tensor::new(&[n], vals).unwrap());
            let bytes = c.to_bytes().unwrap();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.meta("k"), Some(meta.as_str()));
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
