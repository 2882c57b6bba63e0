//! `FTNS` storage for backbone feature maps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header   "FTNS" | u32 version=1 | u32 C | u8 dtype (0 = f32) | u32 count
//! record   u32 image_id | u32 H | u32 W | C·H·W f32 (c, then h, then w) | u32 CRC32(payload)
//! footer   count × (u32 image_id | u64 record offset) | u32 CRC32(index table)
//! ```
//!
//! The footer sits at the end of the file, so its position follows from the
//! file length and `count`. A store is read-only once opened and may be shared
//! between threads.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::codec::{crc32, DecodeError, Decoder};
use crate::tensor::Tensor3;

const MAGIC: &[u8; 4] = b"FTNS";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 4 + 4 + 4 + 1 + 4;
const RECORD_HEADER_LEN: usize = 12;
const INDEX_ENTRY_LEN: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("image {image_id} has {found} channels, store holds {expected}")]
    MixedChannelCount {
        image_id: u32,
        expected: usize,
        found: usize,
    },
    #[error("image id {0} written twice")]
    DuplicateImageId(u32),
    #[error("image id {0} is not in the store")]
    MissingId(u32),
    #[error("record for image {image_id} is corrupt: {reason}")]
    CorruptRecord { image_id: u32, reason: String },
    #[error("image {image_id} has a non-finite value in channel {channel}")]
    NonFiniteValue { image_id: u32, channel: usize },
    #[error("feature map of image {image_id} has an empty dimension ({channels}x{height}x{width})")]
    EmptyShape {
        image_id: u32,
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("store declared {declared} records but {written} were written")]
    CountMismatch { declared: usize, written: usize },
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("feature store: {0}")]
    Format(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One backbone activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub image_id: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `channels * height * width` values, c-major then h then w.
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(image_id: u32, channels: usize, height: usize, width: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), channels * height * width, "feature map length mismatch");
        Self {
            image_id,
            channels,
            height,
            width,
            values,
        }
    }

    /// Upcasts to the 64-bit tensor used by the layers.
    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3::from_vec(
            self.channels,
            self.height,
            self.width,
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// First channel holding a NaN or infinity, if any.
    pub fn first_non_finite_channel(&self) -> Option<usize> {
        let plane = (self.height * self.width).max(1);
        self.values.iter().position(|v| !v.is_finite()).map(|i| i / plane)
    }
}

/// Positional read access to the bytes of a store.
pub trait RecordSource: Send + Sync {
    fn byte_len(&self) -> u64;
    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()>;
}

impl RecordSource for Vec<u8> {
    fn byte_len(&self) -> u64 {
        self.len() as u64
    }

    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()> {
        let start = usize::try_from(offset).map_err(|_| io::ErrorKind::UnexpectedEof)?;
        let end = start
            .checked_add(buf.len())
            .filter(|&e| e <= self.len())
            .ok_or(io::ErrorKind::UnexpectedEof)?;
        buf.copy_from_slice(&self[start..end]);
        Ok(())
    }
}

#[cfg(unix)]
impl RecordSource for File {
    fn byte_len(&self) -> u64 {
        self.metadata().map(|m| m.len()).unwrap_or(0)
    }

    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()> {
        std::os::unix::fs::FileExt::read_exact_at(self, buf, offset)
    }
}

#[cfg(not(unix))]
impl RecordSource for std::sync::Mutex<File> {
    fn byte_len(&self) -> u64 {
        self.lock().ok().and_then(|f| f.metadata().ok()).map_or(0, |m| m.len())
    }

    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()> {
        use std::io::{Read, Seek, SeekFrom};
        let mut f = self.lock().map_err(|_| io::Error::other("poisoned store lock"))?;
        f.seek(SeekFrom::Start(offset))?;
        f.read_exact(buf)
    }
}

/// Streaming `FTNS` writer. The record count is fixed up front because it is
/// part of the header.
pub struct FeatureStoreWriter<W: Write> {
    sink: W,
    channels: usize,
    declared: usize,
    offset: u64,
    index: Vec<(u32, u64)>,
    seen: BTreeSet<u32>,
}

impl<W: Write> FeatureStoreWriter<W> {
    pub fn new(mut sink: W, channels: usize, count: usize) -> Result<Self, FeatureError> {
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&(channels as u32).to_le_bytes());
        header.push(DTYPE_F32);
        header.extend_from_slice(&(count as u32).to_le_bytes());
        sink.write_all(&header)?;
        Ok(Self {
            sink,
            channels,
            declared: count,
            offset: HEADER_LEN as u64,
            index: Vec::with_capacity(count),
            seen: BTreeSet::new(),
        })
    }

    pub fn push(&mut self, map: &FeatureMap) -> Result<(), FeatureError> {
        if map.channels != self.channels {
            return Err(FeatureError::MixedChannelCount {
                image_id: map.image_id,
                expected: self.channels,
                found: map.channels,
            });
        }
        if map.channels == 0 || map.height == 0 || map.width == 0 {
            return Err(FeatureError::EmptyShape {
                image_id: map.image_id,
                channels: map.channels,
                height: map.height,
                width: map.width,
            });
        }
        if !self.seen.insert(map.image_id) {
            return Err(FeatureError::DuplicateImageId(map.image_id));
        }
        if self.index.len() == self.declared {
            return Err(FeatureError::CountMismatch {
                declared: self.declared,
                written: self.declared + 1,
            });
        }
        let mut record = Vec::with_capacity(RECORD_HEADER_LEN + 4 * map.values.len() + 4);
        record.extend_from_slice(&map.image_id.to_le_bytes());
        record.extend_from_slice(&(map.height as u32).to_le_bytes());
        record.extend_from_slice(&(map.width as u32).to_le_bytes());
        for v in &map.values {
            record.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32(&record[RECORD_HEADER_LEN..]);
        record.extend_from_slice(&crc.to_le_bytes());
        self.sink.write_all(&record)?;
        self.index.push((map.image_id, self.offset));
        self.offset += record.len() as u64;
        Ok(())
    }

    /// Writes the index footer and returns the sink.
    pub fn finish(mut self) -> Result<W, FeatureError> {
        if self.index.len() != self.declared {
            return Err(FeatureError::CountMismatch {
                declared: self.declared,
                written: self.index.len(),
            });
        }
        let mut footer = Vec::with_capacity(self.index.len() * INDEX_ENTRY_LEN + 4);
        for &(id, offset) in &self.index {
            footer.extend_from_slice(&id.to_le_bytes());
            footer.extend_from_slice(&offset.to_le_bytes());
        }
        let crc = crc32(&footer);
        footer.extend_from_slice(&crc.to_le_bytes());
        self.sink.write_all(&footer)?;
        self.sink.flush()?;
        Ok(self.sink)
    }
}

/// Writes `maps` as one store and returns the number of records.
///
/// The channel count is taken from the first map (0 for an empty store).
pub fn write_store<W: Write>(maps: &[FeatureMap], sink: W) -> Result<usize, FeatureError> {
    let channels = maps.first().map_or(0, |m| m.channels);
    let mut writer = FeatureStoreWriter::new(sink, channels, maps.len())?;
    for m in maps {
        writer.push(m)?;
    }
    writer.finish()?;
    Ok(maps.len())
}

pub fn write_store_file(maps: &[FeatureMap], path: &Path) -> Result<usize, FeatureError> {
    let file = io::BufWriter::new(File::create(path)?);
    write_store(maps, file)
}

/// Read-only view of an `FTNS` store.
pub struct FeatureStore {
    channels: usize,
    index: HashMap<u32, u64>,
    ids: Vec<u32>,
    records_end: u64,
    source: Box<dyn RecordSource>,
}

impl std::fmt::Debug for FeatureStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureStore")
            .field("channels", &self.channels)
            .field("count", &self.ids.len())
            .finish_non_exhaustive()
    }
}

impl FeatureStore {
    pub fn open(path: &Path) -> Result<Self, FeatureError> {
        let file = File::open(path)?;
        #[cfg(unix)]
        let source: Box<dyn RecordSource> = Box::new(file);
        #[cfg(not(unix))]
        let source: Box<dyn RecordSource> = Box::new(std::sync::Mutex::new(file));
        Self::from_source(source)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, FeatureError> {
        Self::from_source(Box::new(bytes))
    }

    pub fn from_source(source: Box<dyn RecordSource>) -> Result<Self, FeatureError> {
        let len = source.byte_len();
        let mut header = [0u8; HEADER_LEN];
        source.read_exact_at(&mut header, 0).map_err(truncated)?;
        let mut dec = Decoder::new(&header);
        dec.expect_magic(MAGIC)?;
        dec.expect_version(VERSION)?;
        let channels = dec.u32()? as usize;
        let dtype = dec.u8()?;
        if dtype != DTYPE_F32 {
            return Err(FeatureError::UnsupportedDtype(dtype));
        }
        let count = dec.u32()? as usize;

        let footer_len = (count * INDEX_ENTRY_LEN + 4) as u64;
        if len < HEADER_LEN as u64 + footer_len {
            return Err(DecodeError::Truncated(len as usize).into());
        }
        let mut footer = vec![0u8; footer_len as usize];
        source.read_exact_at(&mut footer, len - footer_len)?;
        let (table, tail) = footer.split_at(footer.len() - 4);
        let stored = LittleEndian::read_u32(tail);
        let computed = crc32(table);
        if stored != computed {
            return Err(DecodeError::ChecksumMismatch { stored, computed }.into());
        }
        let mut index = HashMap::with_capacity(count);
        let mut ids = Vec::with_capacity(count);
        let records_end = len - footer_len;
        for entry in table.chunks_exact(INDEX_ENTRY_LEN) {
            let id = LittleEndian::read_u32(&entry[..4]);
            let offset = LittleEndian::read_u64(&entry[4..]);
            if offset < HEADER_LEN as u64 || offset >= records_end {
                return Err(DecodeError::Invalid(format!(
                    "index offset {offset} of image {id} outside the record area"
                ))
                .into());
            }
            if index.insert(id, offset).is_some() {
                return Err(FeatureError::DuplicateImageId(id));
            }
            ids.push(id);
        }
        Ok(Self {
            channels,
            index,
            ids,
            records_end,
            source,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Image ids in write order.
    pub fn image_ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn contains(&self, image_id: u32) -> bool {
        self.index.contains_key(&image_id)
    }

    /// Reads, checksums and validates one map.
    pub fn read(&self, image_id: u32) -> Result<FeatureMap, FeatureError> {
        let &offset = self.index.get(&image_id).ok_or(FeatureError::MissingId(image_id))?;
        let corrupt = |reason: String| FeatureError::CorruptRecord { image_id, reason };
        let mut head = [0u8; RECORD_HEADER_LEN];
        self.source
            .read_exact_at(&mut head, offset)
            .map_err(|e| corrupt(e.to_string()))?;
        let stored_id = LittleEndian::read_u32(&head[..4]);
        let height = LittleEndian::read_u32(&head[4..8]) as usize;
        let width = LittleEndian::read_u32(&head[8..]) as usize;
        if stored_id != image_id {
            return Err(corrupt(format!("record header names image {stored_id}")));
        }
        // Headers are not checksummed; bound the size before allocating.
        let n = self
            .channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .filter(|&n| offset + (RECORD_HEADER_LEN + 4) as u64 + 4 * n as u64 <= self.records_end)
            .ok_or_else(|| corrupt(format!("record shape {height}x{width} overruns the record area")))?;
        if height == 0 || width == 0 {
            return Err(corrupt("empty spatial shape".into()));
        }
        let mut payload = vec![0u8; 4 * n + 4];
        self.source
            .read_exact_at(&mut payload, offset + RECORD_HEADER_LEN as u64)
            .map_err(|e| corrupt(e.to_string()))?;
        let (data, tail) = payload.split_at(4 * n);
        let stored = LittleEndian::read_u32(tail);
        let computed = crc32(data);
        if stored != computed {
            return Err(corrupt(format!(
                "checksum mismatch (stored {stored:#010x}, computed {computed:#010x})"
            )));
        }
        let mut values = vec![0f32; n];
        LittleEndian::read_f32_into(data, &mut values);
        let map = FeatureMap::new(image_id, self.channels, height, width, values);
        if let Some(channel) = map.first_non_finite_channel() {
            return Err(FeatureError::NonFiniteValue { image_id, channel });
        }
        Ok(map)
    }

    /// Reads `ids` in the requested order.
    pub fn read_batch(&self, ids: &[u32]) -> Result<Vec<FeatureMap>, FeatureError> {
        ids.iter().map(|&id| self.read(id)).collect()
    }
}

fn truncated(e: io::Error) -> FeatureError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        DecodeError::Truncated(0).into()
    } else {
        e.into()
    }
}
