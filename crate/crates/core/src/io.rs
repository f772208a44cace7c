//! Atomic file writes and the manifest-plus-blobs container used by
//! checkpoints and datasets.
//!
//! Layout:
//!
//! ```text
//! <MAGIC>
//! version 1
//! [meta]
//! key value
//! [tensor <name>]
//! shape 4,3
//! dtype f32
//! offset 0
//! <extra attributes>
//! [end]
//! <raw little-endian blobs>
//! ```
//!
//! Offsets count bytes from the first byte after the `[end]` line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, DType, Float, Tensor};

pub const FORMAT_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Element type of a stored blob.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlobType {
    Float(DType),
    U32,
}

impl BlobType {
    pub fn as_str(self) -> &'static str {
        match self {
            BlobType::Float(d) => d.as_str(),
            BlobType::U32 => "u32",
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            BlobType::Float(d) => d.size_of(),
            BlobType::U32 => 4,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "u32" => Some(BlobType::U32),
            other => DType::parse(other).map(BlobType::Float),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: BlobType,
    pub offset: usize,
    /// Attributes beyond shape/dtype/offset, in file order.
    pub attrs: Vec<(String, String)>,
}

impl Record {
    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn byte_len(&self) -> usize {
        numel(&self.shape) * self.dtype.size_of()
    }
}

/// A container being assembled in memory.
#[derive(Debug)]
pub struct ContainerWriter {
    magic: &'static str,
    meta: BTreeMap<String, String>,
    records: Vec<Record>,
    blob: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(magic: &'static str) -> Self {
        ContainerWriter { magic, meta: BTreeMap::new(), records: Vec::new(), blob: Vec::new() }
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    fn push_record(&mut self, name: &str, shape: &[usize], dtype: BlobType, attrs: Vec<(String, String)>) -> Result<()> {
        if name.is_empty() || name.contains([']', '\n', '[']) {
            return Err(Error::Checkpoint(format!("invalid record name `{name}`")));
        }
        if self.records.iter().any(|r| r.name == name) {
            return Err(Error::Checkpoint(format!("duplicate record `{name}`")));
        }
        self.records.push(Record {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype,
            offset: self.blob.len(),
            attrs,
        });
        Ok(())
    }

    pub fn tensor<F: Float>(&mut self, name: &str, t: &Tensor<F>, attrs: Vec<(String, String)>) -> Result<()> {
        self.push_record(name, t.shape(), BlobType::Float(F::DTYPE), attrs)?;
        for &v in t.data() {
            v.write_le(&mut self.blob);
        }
        Ok(())
    }

    pub fn u32s(&mut self, name: &str, shape: &[usize], values: &[u32]) -> Result<()> {
        if numel(shape) != values.len() {
            return Err(Error::Shape(format!("{name}: {} values for shape {shape:?}", values.len())));
        }
        self.push_record(name, shape, BlobType::U32, Vec::new())?;
        for v in values {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{}\nversion {}\n[meta]\n", self.magic, FORMAT_VERSION);
        for (k, v) in &self.meta {
            head.push_str(&format!("{k} {v}\n"));
        }
        for r in &self.records {
            let shape = r.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
            head.push_str(&format!(
                "[tensor {}]\nshape {}\ndtype {}\noffset {}\n",
                r.name,
                shape,
                r.dtype.as_str(),
                r.offset
            ));
            for (k, v) in &r.attrs {
                head.push_str(&format!("{k} {v}\n"));
            }
        }
        head.push_str("[end]\n");
        let mut out = head.into_bytes();
        out.extend_from_slice(&self.blob);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

/// A parsed container. Blob reads are bounds-checked against the manifest.
#[derive(Debug)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub records: Vec<Record>,
    blob: Vec<u8>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Container {
    pub fn read(path: &Path, magic: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes, magic).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(bytes: &[u8], magic: &str) -> Result<Self> {
        let first_nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
        let found = String::from_utf8_lossy(&bytes[..first_nl]);
        if found != magic {
            let shown: String = found.chars().take(16).collect();
            return Err(bad(format!("bad magic `{shown}`, expected `{magic}`")));
        }
        let marker = b"\n[end]\n";
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| bad("manifest has no [end] line"))?;
        let head = std::str::from_utf8(&bytes[first_nl + 1..end + 1]).map_err(|_| bad("manifest is not UTF-8"))?;
        let blob = bytes[end + marker.len()..].to_vec();

        let mut meta = BTreeMap::new();
        let mut records: Vec<Record> = Vec::new();
        let mut lines = head.lines();
        match lines.next().and_then(|l| l.strip_prefix("version ")) {
            Some(v) if v.trim().parse::<u32>() == Ok(FORMAT_VERSION) => {}
            Some(v) => return Err(bad(format!("unsupported version {v}"))),
            None => return Err(bad("missing version line")),
        }
        enum Section {
            None,
            Meta,
            Tensor,
        }
        let mut section = Section::None;
        let mut pending: Option<(String, BTreeMap<String, String>, Vec<(String, String)>)> = None;
        let flush = |p: Option<(String, BTreeMap<String, String>, Vec<(String, String)>)>,
                     records: &mut Vec<Record>|
         -> Result<()> {
            let Some((name, fields, attrs)) = p else { return Ok(()) };
            let field = |k: &str| fields.get(k).ok_or_else(|| bad(format!("`{name}` lacks `{k}`")));
            let shape = field("shape")?;
            let shape: Vec<usize> = if shape.is_empty() {
                Vec::new()
            } else {
                shape
                    .split(',')
                    .map(|d| d.trim().parse().map_err(|_| bad(format!("`{name}`: bad shape `{shape}`"))))
                    .collect::<Result<_>>()?
            };
            let dtype = BlobType::parse(field("dtype")?).ok_or_else(|| bad(format!("`{name}`: unknown dtype")))?;
            let offset = field("offset")?.parse().map_err(|_| bad(format!("`{name}`: bad offset")))?;
            records.push(Record { name, shape, dtype, offset, attrs });
            Ok(())
        };
        for line in lines {
            if line == "[meta]" {
                flush(pending.take(), &mut records)?;
                section = Section::Meta;
                continue;
            }
            if let Some(name) = line.strip_prefix("[tensor ").and_then(|s| s.strip_suffix(']')) {
                flush(pending.take(), &mut records)?;
                if records.iter().any(|r| r.name == name) {
                    return Err(bad(format!("duplicate record `{name}`")));
                }
                pending = Some((name.to_string(), BTreeMap::new(), Vec::new()));
                section = Section::Tensor;
                continue;
            }
            let (k, v) = line.split_once(' ').unwrap_or((line, ""));
            match section {
                Section::Meta => {
                    meta.insert(k.to_string(), v.to_string());
                }
                Section::Tensor => {
                    let (_, fields, attrs) = pending.as_mut().expect("tensor section open");
                    if matches!(k, "shape" | "dtype" | "offset") {
                        fields.insert(k.to_string(), v.to_string());
                    } else {
                        attrs.push((k.to_string(), v.to_string()));
                    }
                }
                Section::None => return Err(bad(format!("line outside any section: `{line}`"))),
            }
        }
        flush(pending.take(), &mut records)?;
        for r in &records {
            if r.offset.checked_add(r.byte_len()).is_none_or(|e| e > blob.len()) {
                return Err(bad(format!("`{}` extends past the end of the file", r.name)));
            }
        }
        Ok(Container { meta, records, blob })
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| bad(format!("missing meta key `{key}`")))
    }

    pub fn record(&self, name: &str) -> Result<&Record> {
        self.records.iter().find(|r| r.name == name).ok_or_else(|| bad(format!("missing record `{name}`")))
    }

    fn bytes_of(&self, r: &Record) -> &[u8] {
        &self.blob[r.offset..r.offset + r.byte_len()]
    }

    /// Reads a float record, converting precision if needed.
    pub fn tensor<F: Float>(&self, r: &Record) -> Result<Tensor<F>> {
        let data: Vec<F> = match r.dtype {
            BlobType::Float(DType::F32) => {
                self.bytes_of(r).chunks_exact(4).map(|c| F::from_f64(f32::read_le(c) as f64)).collect()
            }
            BlobType::Float(DType::F64) => {
                self.bytes_of(r).chunks_exact(8).map(|c| F::from_f64(f64::read_le(c))).collect()
            }
            BlobType::U32 => return Err(bad(format!("`{}` holds integers, not floats", r.name))),
        };
        Tensor::new(r.shape.clone(), data)
    }

    pub fn u32s(&self, r: &Record) -> Result<Vec<u32>> {
        if r.dtype != BlobType::U32 {
            return Err(bad(format!("`{}` is not an integer record", r.name)));
        }
        Ok(self.bytes_of(r).chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_mixed_records() {
        let mut w = ContainerWriter::new("TESTFMT1");
        w.meta("note", "two words");
        let t = Tensor::<f32>::from_f64(&[2, 2], &[1.0, -2.5, 3.25, 0.0]).unwrap();
        w.tensor("a.weight", &t, vec![("component".into(), "FFN".into())]).unwrap();
        w.u32s("ids", &[3], &[7, 0, 42]).unwrap();
        let s = Tensor::<f64>::scalar(std::f64::consts::PI);
        w.tensor("s", &s, Vec::new()).unwrap();
        let c = Container::parse(&w.to_bytes(), "TESTFMT1").unwrap();
        assert_eq!(c.meta("note").unwrap(), "two words");
        let r = c.record("a.weight").unwrap();
        assert_eq!(r.attr("component"), Some("FFN"));
        assert_eq!(c.tensor::<f32>(r).unwrap(), t);
        assert_eq!(c.u32s(c.record("ids").unwrap()).unwrap(), vec![7, 0, 42]);
        assert_eq!(c.tensor::<f64>(c.record("s").unwrap()).unwrap(), s);
    }

    #[test]
    fn rejects_corruption() {
        let mut w = ContainerWriter::new("TESTFMT1");
        w.tensor("x", &Tensor::<f64>::zeros(&[4]), Vec::new()).unwrap();
        let bytes = w.to_bytes();
        assert!(Container::parse(&bytes, "OTHERFM1").unwrap_err().to_string().contains("magic"));
        let truncated = &bytes[..bytes.len() - 1];
        assert!(Container::parse(truncated, "TESTFMT1").unwrap_err().to_string().contains("past the end"));
        assert!(w.u32s("x", &[1], &[1]).is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/out.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
