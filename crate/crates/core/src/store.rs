//! Checkpoint storage in a safetensors-compatible single-file layout.
//!
//! ```text
//! [u64 LE header length H][H bytes UTF-8 JSON header][tensor data]
//!
//! header := { "<name>": { "data_offsets": [begin, end],
//!                         "dtype": "F32" | "F16" | "BF16" | "F64",
//!                         "shape": [d0, d1, ...] },
//!             ...,
//!             "__metadata__": { "<key>": "<value>", ... } }   (optional)
//! ```
//!
//! Offsets are relative to the start of the data section and must tile it
//! exactly: no gaps, no overlap, nothing past the end. Writers emit header
//! keys in lexicographic order, lay tensor data out in the same order and
//! pad the header with spaces to an 8-byte boundary, so equal maps always
//! produce equal files.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::dtype::{decode_f32, encode_f32, Dtype};
use crate::error::{Error, Result};

pub const METADATA_KEY: &str = "__metadata__";

/// Refuse headers larger than this; guards allocation on corrupt input.
pub const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Clone, PartialEq)]
pub struct TensorRecord {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl fmt::Debug for TensorRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TensorRecord")
            .field("dtype", &self.dtype)
            .field("shape", &self.shape)
            .field("bytes", &self.data.len())
            .finish()
    }
}

pub fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl TensorRecord {
    pub fn new(dtype: Dtype, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected = element_count(&shape)
            .and_then(|n| n.checked_mul(dtype.byte_width()))
            .ok_or_else(|| Error::InvalidInput(format!("shape {shape:?} overflows")))?;
        if expected != data.len() {
            return Err(Error::InvalidInput(format!(
                "shape {shape:?} of {dtype} needs {expected} bytes, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn from_f32(values: &[f32], dtype: Dtype, shape: Vec<usize>) -> Result<Self> {
        Self::new(dtype, shape, encode_f32(values, dtype))
    }

    pub fn elements(&self) -> usize {
        self.data.len() / self.dtype.byte_width()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        decode_f32(&self.data, self.dtype)
    }
}

/// An in-memory checkpoint. Iteration is lexicographic by tensor name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    pub tensors: BTreeMap<String, TensorRecord>,
    pub metadata: Option<BTreeMap<String, String>>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, record: TensorRecord) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name == METADATA_KEY {
            return Err(Error::InvalidInput(format!("invalid tensor name {name:?}")));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.insert(name, record);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    /// Total parameter count across all tensors.
    pub fn total_elements(&self) -> u64 {
        self.tensors.values().map(|t| t.elements() as u64).sum()
    }

    pub fn layout(&self) -> Vec<TensorInfo> {
        self.tensors
            .iter()
            .map(|(name, t)| TensorInfo {
                name: name.clone(),
                dtype: t.dtype,
                shape: t.shape.clone(),
            })
            .collect()
    }
}

/// Name, dtype and shape of one tensor, without data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn elements(&self) -> usize {
        element_count(&self.shape).unwrap_or(usize::MAX)
    }

    pub fn byte_len(&self) -> usize {
        self.elements() * self.dtype.byte_width()
    }
}

/// Header entry as stored in the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HeaderEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// `[begin, end)` relative to the data section.
    pub data_offsets: [u64; 2],
}

// ---------------------------------------------------------------------------
// Header parsing

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

/// JSON object kept as an ordered list so duplicate keys can be reported
/// instead of silently collapsing.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    out.push((k, v));
                }
                Ok(RawHeader(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Parsed and validated header.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    /// Entries in lexicographic name order.
    pub entries: Vec<HeaderEntry>,
    pub metadata: Option<BTreeMap<String, String>>,
    /// Absolute file offset of the data section.
    pub data_start: u64,
}

impl Header {
    pub fn data_len(&self) -> u64 {
        self.entries.iter().map(|e| e.data_offsets[1]).max().unwrap_or(0)
    }

    pub fn layout(&self) -> Vec<TensorInfo> {
        self.entries
            .iter()
            .map(|e| TensorInfo {
                name: e.name.clone(),
                dtype: e.dtype,
                shape: e.shape.clone(),
            })
            .collect()
    }

    /// Parse header JSON and check it against `data_len` bytes of payload.
    pub fn parse(json: &[u8], data_start: u64, data_len: u64) -> Result<Self> {
        let text = std::str::from_utf8(json)
            .map_err(|e| Error::format_at_offset(8 + e.valid_up_to() as u64, "header is not UTF-8"))?;
        let raw: RawHeader = serde_json::from_str(text)
            .map_err(|e| Error::format(format!("header is not a valid JSON object: {e}")))?;

        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        let mut metadata = None;
        for (name, value) in raw.0 {
            if !seen.insert(name.clone()) {
                return Err(Error::format_at_tensor(&name, "duplicate tensor name"));
            }
            if name == METADATA_KEY {
                let m: BTreeMap<String, String> = serde_json::from_value(value).map_err(|e| {
                    Error::format(format!("{METADATA_KEY} must map strings to strings: {e}"))
                })?;
                metadata = Some(m);
                continue;
            }
            if name.is_empty() {
                return Err(Error::format("empty tensor name"));
            }
            let raw: RawEntry = serde_json::from_value(value)
                .map_err(|e| Error::format_at_tensor(&name, format!("bad entry: {e}")))?;
            let dtype: Dtype = raw
                .dtype
                .parse()
                .map_err(|_| Error::format_at_tensor(&name, format!("unknown dtype {:?}", raw.dtype)))?;
            let shape = raw
                .shape
                .iter()
                .map(|&d| usize::try_from(d))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::format_at_tensor(&name, "dimension exceeds address space"))?;
            let [begin, end] = raw.data_offsets;
            if end < begin {
                return Err(Error::format_at_tensor(&name, format!("data_offsets [{begin}, {end}] are reversed")));
            }
            let need = element_count(&shape)
                .and_then(|n| (n as u64).checked_mul(dtype.byte_width() as u64))
                .ok_or_else(|| Error::format_at_tensor(&name, "shape overflows"))?;
            if end - begin != need {
                return Err(Error::format_at_tensor(
                    &name,
                    format!("data_offsets span {} bytes but {dtype}{shape:?} needs {need}", end - begin),
                ));
            }
            if end > data_len {
                return Err(Error::Format {
                    message: format!("data_offsets end {end} beyond data section of {data_len} bytes"),
                    tensor: Some(name),
                    offset: Some(data_start + end),
                });
            }
            entries.push(HeaderEntry {
                name,
                dtype,
                shape,
                data_offsets: [begin, end],
            });
        }

        // Offsets must tile [0, data_len) exactly.
        let mut by_offset: Vec<&HeaderEntry> = entries.iter().collect();
        by_offset.sort_by_key(|e| (e.data_offsets, e.name.clone()));
        let mut cursor = 0u64;
        for e in &by_offset {
            let [begin, end] = e.data_offsets;
            if begin < cursor {
                return Err(Error::Format {
                    message: format!("data_offsets [{begin}, {end}] overlap a previous tensor"),
                    tensor: Some(e.name.clone()),
                    offset: Some(data_start + begin),
                });
            }
            if begin > cursor {
                return Err(Error::Format {
                    message: format!("gap in data section between bytes {cursor} and {begin}"),
                    tensor: Some(e.name.clone()),
                    offset: Some(data_start + cursor),
                });
            }
            cursor = end;
        }
        if cursor != data_len {
            return Err(Error::format_at_offset(
                data_start + cursor,
                format!("{} trailing bytes after the last tensor", data_len - cursor),
            ));
        }

        entries.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(Header {
            entries,
            metadata,
            data_start,
        })
    }
}

/// Serialize a header for `layout` (any order; emitted sorted) and return
/// the padded header bytes plus the computed entries.
pub fn build_header(
    layout: &[TensorInfo],
    metadata: Option<&BTreeMap<String, String>>,
) -> Result<(Vec<u8>, Vec<HeaderEntry>)> {
    #[derive(Serialize)]
    struct Entry<'a> {
        data_offsets: [u64; 2],
        dtype: &'static str,
        shape: &'a [usize],
    }
    #[derive(Serialize)]
    #[serde(untagged)]
    enum Value<'a> {
        Tensor(Entry<'a>),
        Meta(&'a BTreeMap<String, String>),
    }

    let mut sorted: Vec<&TensorInfo> = layout.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));

    let mut json: BTreeMap<&str, Value> = BTreeMap::new();
    let mut entries = Vec::with_capacity(sorted.len());
    let mut cursor = 0u64;
    for info in sorted {
        if info.name.is_empty() || info.name == METADATA_KEY {
            return Err(Error::InvalidInput(format!("invalid tensor name {:?}", info.name)));
        }
        let bytes = element_count(&info.shape)
            .and_then(|n| (n as u64).checked_mul(info.dtype.byte_width() as u64))
            .ok_or_else(|| {
                Error::InvalidInput(format!("tensor {:?} exceeds the addressable size", info.name))
            })?;
        let end = cursor.checked_add(bytes).ok_or_else(|| {
            Error::InvalidInput(format!("tensor {:?} exceeds the addressable size", info.name))
        })?;
        if json
            .insert(
                &info.name,
                Value::Tensor(Entry {
                    data_offsets: [cursor, end],
                    dtype: info.dtype.as_str(),
                    shape: &info.shape,
                }),
            )
            .is_some()
        {
            return Err(Error::InvalidInput(format!("duplicate tensor name {:?}", info.name)));
        }
        entries.push(HeaderEntry {
            name: info.name.clone(),
            dtype: info.dtype,
            shape: info.shape.clone(),
            data_offsets: [cursor, end],
        });
        cursor = end;
    }
    if let Some(m) = metadata {
        json.insert(METADATA_KEY, Value::Meta(m));
    }
    let mut bytes = serde_json::to_vec(&json).map_err(|e| Error::Internal(e.to_string()))?;
    while bytes.len() % 8 != 0 {
        bytes.push(b' ');
    }
    Ok((bytes, entries))
}

// ---------------------------------------------------------------------------
// Reading

/// Lazily reads tensors from a checkpoint file, one tensor at a time.
#[derive(Debug)]
pub struct CheckpointReader {
    path: PathBuf,
    file: File,
    header: Header,
}

impl CheckpointReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();

        let mut len_bytes = [0u8; 8];
        if file_len < 8 {
            return Err(Error::format_at_offset(0, format!("file is {file_len} bytes, shorter than the 8-byte header length")));
        }
        file.read_exact(&mut len_bytes).map_err(|e| Error::io(&path, e))?;
        let header_len = u64::from_le_bytes(len_bytes);
        if header_len > MAX_HEADER_LEN {
            return Err(Error::format_at_offset(0, format!("header length {header_len} exceeds limit {MAX_HEADER_LEN}")));
        }
        if 8 + header_len > file_len {
            return Err(Error::format_at_offset(0, format!("header length {header_len} runs past end of {file_len}-byte file")));
        }
        let mut json = vec![0u8; header_len as usize];
        file.read_exact(&mut json).map_err(|e| Error::io(&path, e))?;
        let data_start = 8 + header_len;
        let header = Header::parse(&json, data_start, file_len - data_start)?;
        Ok(Self { path, file, header })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn layout(&self) -> Vec<TensorInfo> {
        self.header.layout()
    }

    pub fn entry(&self, name: &str) -> Option<&HeaderEntry> {
        self.header
            .entries
            .binary_search_by(|e| e.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.header.entries[i])
    }

    pub fn read_tensor(&self, name: &str) -> Result<TensorRecord> {
        let entry = self
            .entry(name)
            .ok_or_else(|| Error::InvalidInput(format!("{}: no tensor named {name:?}", self.path.display())))?;
        let [begin, end] = entry.data_offsets;
        let mut data = vec![0u8; (end - begin) as usize];
        self.file
            .read_exact_at(&mut data, self.header.data_start + begin)
            .map_err(|e| Error::io(&self.path, e))?;
        Ok(TensorRecord {
            dtype: entry.dtype,
            shape: entry.shape.clone(),
            data,
        })
    }

    pub fn read_all(&self) -> Result<TensorMap> {
        let mut map = TensorMap {
            tensors: BTreeMap::new(),
            metadata: self.header.metadata.clone(),
        };
        for e in &self.header.entries {
            map.tensors.insert(e.name.clone(), self.read_tensor(&e.name)?);
        }
        Ok(map)
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap> {
    CheckpointReader::open(path)?.read_all()
}

// ---------------------------------------------------------------------------
// Writing

/// Writes a checkpoint whose layout is fixed up front. Tensor payloads may
/// then be written in any order, from any thread.
#[derive(Debug)]
pub struct CheckpointWriter {
    path: PathBuf,
    file: File,
    entries: Vec<HeaderEntry>,
    data_start: u64,
}

impl CheckpointWriter {
    pub fn create(
        path: impl AsRef<Path>,
        layout: &[TensorInfo],
        metadata: Option<&BTreeMap<String, String>>,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let (header, entries) = build_header(layout, metadata)?;
        let data_len = entries.last().map(|e| e.data_offsets[1]).unwrap_or(0);
        let data_start = 8 + header.len() as u64;

        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        {
            let mut w = BufWriter::new(&file);
            w.write_all(&(header.len() as u64).to_le_bytes())
                .and_then(|_| w.write_all(&header))
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;
        }
        file.set_len(data_start + data_len).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            file,
            entries,
            data_start,
        })
    }

    pub fn entries(&self) -> &[HeaderEntry] {
        &self.entries
    }

    /// Write one tensor's payload. Safe to call concurrently for distinct names.
    pub fn write_tensor(&self, name: &str, data: &[u8]) -> Result<()> {
        let entry = self
            .entries
            .binary_search_by(|e| e.name.as_str().cmp(name))
            .map(|i| &self.entries[i])
            .map_err(|_| Error::Internal(format!("tensor {name:?} not in output layout")))?;
        let [begin, end] = entry.data_offsets;
        if (end - begin) as usize != data.len() {
            return Err(Error::Internal(format!(
                "tensor {name:?}: payload is {} bytes, layout expects {}",
                data.len(),
                end - begin
            )));
        }
        self.file
            .write_all_at(data, self.data_start + begin)
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(self) -> Result<()> {
        self.file.sync_all().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_checkpoint(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    for (name, t) in &map.tensors {
        let need = element_count(&t.shape).map(|n| n * t.dtype.byte_width());
        if need != Some(t.data.len()) {
            return Err(Error::InvalidInput(format!(
                "tensor {name:?}: {} data bytes do not match {}{:?}",
                t.data.len(),
                t.dtype,
                t.shape
            )));
        }
    }
    let writer = CheckpointWriter::create(path, &map.layout(), map.metadata.as_ref())?;
    for (name, t) in &map.tensors {
        writer.write_tensor(name, &t.data)?;
    }
    writer.finish()
}

/// Serialize to an in-memory byte vector; identical to the file contents
/// `write_checkpoint` would produce.
pub fn to_bytes(map: &TensorMap) -> Result<Vec<u8>> {
    let (header, entries) = build_header(&map.layout(), map.metadata.as_ref())?;
    let mut out = Vec::with_capacity(8 + header.len() + map.tensors.values().map(|t| t.data.len()).sum::<usize>());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for e in &entries {
        out.extend_from_slice(&map.tensors[&e.name].data);
    }
    Ok(out)
}

/// Parse an in-memory checkpoint image.
pub fn from_bytes(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < 8 {
        return Err(Error::format_at_offset(0, "buffer shorter than the 8-byte header length"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_LEN || 8 + header_len > bytes.len() as u64 {
        return Err(Error::format_at_offset(0, format!("invalid header length {header_len}")));
    }
    let data_start = 8 + header_len as usize;
    let header = Header::parse(&bytes[8..data_start], data_start as u64, (bytes.len() - data_start) as u64)?;
    let data = &bytes[data_start..];
    let mut map = TensorMap {
        tensors: BTreeMap::new(),
        metadata: header.metadata.clone(),
    };
    for e in header.entries {
        let [b, end] = e.data_offsets;
        map.tensors.insert(
            e.name,
            TensorRecord {
                dtype: e.dtype,
                shape: e.shape,
                data: data[b as usize..end as usize].to_vec(),
            },
        );
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Compatibility

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub name: String,
    pub left: String,
    pub right: String,
}

/// Result of comparing two layouts tensor by tensor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CompatReport {
    /// Present in right only.
    pub missing_left: Vec<String>,
    /// Present in left only.
    pub missing_right: Vec<String>,
    pub shape_mismatch: Vec<Mismatch>,
    pub dtype_mismatch: Vec<Mismatch>,
}

impl CompatReport {
    pub fn is_compatible(&self) -> bool {
        self.missing_left.is_empty()
            && self.missing_right.is_empty()
            && self.shape_mismatch.is_empty()
            && self.dtype_mismatch.is_empty()
    }

    /// Every tensor name involved in some mismatch.
    pub fn offending_names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self
            .missing_left
            .iter()
            .chain(&self.missing_right)
            .map(String::as_str)
            .chain(self.shape_mismatch.iter().map(|m| m.name.as_str()))
            .chain(self.dtype_mismatch.iter().map(|m| m.name.as_str()))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

impl fmt::Display for CompatReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_compatible() {
            return writeln!(f, "  compatible");
        }
        for n in &self.missing_left {
            writeln!(f, "  {n}: missing from left")?;
        }
        for n in &self.missing_right {
            writeln!(f, "  {n}: missing from right")?;
        }
        for m in &self.shape_mismatch {
            writeln!(f, "  {}: shape {} vs {}", m.name, m.left, m.right)?;
        }
        for m in &self.dtype_mismatch {
            writeln!(f, "  {}: dtype {} vs {}", m.name, m.left, m.right)?;
        }
        Ok(())
    }
}

pub fn compare_layouts(left: &[TensorInfo], right: &[TensorInfo]) -> CompatReport {
    let l: BTreeMap<&str, &TensorInfo> = left.iter().map(|t| (t.name.as_str(), t)).collect();
    let r: BTreeMap<&str, &TensorInfo> = right.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut report = CompatReport::default();
    for (name, lt) in &l {
        match r.get(name) {
            None => report.missing_right.push(name.to_string()),
            Some(rt) => {
                if lt.shape != rt.shape {
                    report.shape_mismatch.push(Mismatch {
                        name: name.to_string(),
                        left: format!("{:?}", lt.shape),
                        right: format!("{:?}", rt.shape),
                    });
                }
                if lt.dtype != rt.dtype {
                    report.dtype_mismatch.push(Mismatch {
                        name: name.to_string(),
                        left: lt.dtype.to_string(),
                        right: rt.dtype.to_string(),
                    });
                }
            }
        }
    }
    report.missing_left = r.keys().filter(|n| !l.contains_key(*n)).map(|n| n.to_string()).collect();
    report
}

pub fn validate_compat(left: &TensorMap, right: &TensorMap) -> CompatReport {
    compare_layouts(&left.layout(), &right.layout())
}
