//! CUB-200-2011 annotation parsing.
//!
//! The raw dataset lists one `(image, attribute, is_present, certainty, time)`
//! line per image and attribute. This module turns those rows into a dense
//! binary image × attribute matrix, derives the attribute-group taxonomy from
//! the `group::variety` attribute names, and builds the train / validation /
//! test split (validation images are drawn from the official test partition).

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read, Write};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::rng::{stream_rng, SeedStream};

/// Attribute count of the full CUB-200-2011 vocabulary.
pub const CUB_NUM_ATTRIBUTES: usize = 312;
/// Number of attribute groups in the CUB vocabulary.
pub const CUB_NUM_GROUPS: usize = 28;
/// Number of images in CUB-200-2011.
pub const CUB_NUM_IMAGES: usize = 11788;
/// Expected range of varieties per CUB attribute group.
pub const CUB_GROUP_SIZE_RANGE: (usize, usize) = (3, 15);

const FTLM_MAGIC: &[u8; 4] = b"FTLM";
const FTLM_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: malformed line {content:?}")]
    MalformedLine { line: usize, content: String },
    #[error("line {line}: duplicate attribute id {id}")]
    DuplicateId { line: usize, id: u32 },
    #[error("attribute ids are not contiguous: expected {expected}, found {found}")]
    NonContiguousIds { expected: u32, found: u32 },
    #[error("line {line}: image id {id} outside 1..={max}")]
    ImageIdOutOfRange { line: usize, id: u32, max: usize },
    #[error("line {line}: attribute id {id} outside 1..={max}")]
    AttributeIdOutOfRange { line: usize, id: u32, max: usize },
    #[error("line {line}: presence flag must be 0 or 1, found {value:?}")]
    InvalidPresenceFlag { line: usize, value: String },
    #[error("line {line}: conflicting duplicate entry for image {image_id}, attribute {attribute_id}")]
    ConflictingEntry {
        line: usize,
        image_id: u32,
        attribute_id: u32,
    },
    #[error("validation size {requested} exceeds the {available} images of the test partition")]
    ValSizeTooLarge { requested: usize, available: usize },
    #[error("line {line}: duplicate image id {id} in split file")]
    DuplicateImageId { line: usize, id: u32 },
    #[error("unknown image id {0}")]
    UnknownImageId(u32),
    #[error("image ids must be strictly increasing")]
    UnsortedImageIds,
    #[error("label matrix file: {0}")]
    Format(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One attribute of the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    /// 1-based id as written in `attributes.txt`.
    pub id: u32,
    pub group: String,
    pub variety: String,
}

/// A named family of related attributes, e.g. `has_bill_shape`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeGroup {
    pub name: String,
    /// 0-based column indices into the label matrix.
    pub columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVocabulary {
    entries: Vec<Attribute>,
}

impl AttributeVocabulary {
    /// Builds a vocabulary from entries whose ids must run 1..=len in order.
    pub fn new(entries: Vec<Attribute>) -> Result<Self, DataError> {
        for (i, e) in entries.iter().enumerate() {
            let expected = i as u32 + 1;
            if e.id != expected {
                return Err(DataError::NonContiguousIds { expected, found: e.id });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Attribute] {
        &self.entries
    }

    pub fn num_attributes(&self) -> usize {
        self.entries.len()
    }

    /// Full `group::variety` name of the attribute in column `col`.
    pub fn full_name(&self, col: usize) -> String {
        let e = &self.entries[col];
        if e.group == e.variety {
            e.group.clone()
        } else {
            format!("{}::{}", e.group, e.variety)
        }
    }

    /// Groups in order of first appearance.
    pub fn groups(&self) -> Vec<AttributeGroup> {
        let mut order: Vec<AttributeGroup> = Vec::new();
        let mut position: BTreeMap<&str, usize> = BTreeMap::new();
        for (col, e) in self.entries.iter().enumerate() {
            match position.get(e.group.as_str()) {
                Some(&g) => order[g].columns.push(col),
                None => {
                    position.insert(&e.group, order.len());
                    order.push(AttributeGroup {
                        name: e.group.clone(),
                        columns: vec![col],
                    });
                }
            }
        }
        order
    }

    /// Describes every way this vocabulary departs from the CUB layout
    /// (312 attributes, 28 groups of 3..=15 varieties). Empty when it matches.
    pub fn cub_shape_warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        if self.num_attributes() != CUB_NUM_ATTRIBUTES {
            warnings.push(format!(
                "{} attributes (CUB has {CUB_NUM_ATTRIBUTES})",
                self.num_attributes()
            ));
        }
        let groups = self.groups();
        if groups.len() != CUB_NUM_GROUPS {
            warnings.push(format!("{} groups (CUB has {CUB_NUM_GROUPS})", groups.len()));
        }
        let (lo, hi) = CUB_GROUP_SIZE_RANGE;
        for g in &groups {
            if g.columns.len() < lo || g.columns.len() > hi {
                warnings.push(format!(
                    "group {} has {} varieties (expected {lo}..={hi})",
                    g.name,
                    g.columns.len()
                ));
            }
        }
        warnings
    }
}

fn split_name(name: &str) -> (String, String) {
    match name.split_once("::") {
        Some((group, variety)) => (group.to_string(), variety.to_string()),
        None => (name.to_string(), name.to_string()),
    }
}

/// Parses `attributes.txt`: one `<id> <group>::<variety>` per nonempty line.
pub fn parse_vocabulary<R: BufRead>(reader: R) -> Result<AttributeVocabulary, DataError> {
    let mut entries: Vec<Attribute> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let malformed = || DataError::MalformedLine {
            line: lineno,
            content: line.clone(),
        };
        let (id, name) = trimmed.split_once(char::is_whitespace).ok_or_else(malformed)?;
        let id: u32 = id.parse().map_err(|_| malformed())?;
        let name = name.trim();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(malformed());
        }
        if !seen.insert(id) {
            return Err(DataError::DuplicateId { line: lineno, id });
        }
        let (group, variety) = split_name(name);
        if group.is_empty() {
            return Err(malformed());
        }
        entries.push(Attribute { id, group, variety });
    }
    entries.sort_by_key(|e| e.id);
    AttributeVocabulary::new(entries)
}

/// Dense binary image × attribute relevance matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
    image_ids: Vec<u32>,
}

impl LabelMatrix {
    pub fn zeros(image_ids: Vec<u32>, cols: usize) -> Result<Self, DataError> {
        if image_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::UnsortedImageIds);
        }
        Ok(Self {
            rows: image_ids.len(),
            cols,
            bits: vec![0; image_ids.len() * cols],
            image_ids,
        })
    }

    /// Builds a matrix from 0/1 rows; image ids are `1..=rows.len()`.
    pub fn from_rows(rows: &[Vec<u8>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut m = Self::zeros((1..=rows.len() as u32).collect(), cols).expect("sequential ids are sorted");
        for (r, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), cols, "ragged label rows");
            for (c, &b) in row.iter().enumerate() {
                m.set(r, c, b != 0);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn image_ids(&self) -> &[u32] {
        &self.image_ids
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.cols + col] = u8::from(value);
    }

    /// The 0/1 cells of one row.
    pub fn row(&self, row: usize) -> &[u8] {
        &self.bits[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_index(&self, image_id: u32) -> Option<usize> {
        self.image_ids.binary_search(&image_id).ok()
    }

    /// Row of `image_id`, or [`DataError::UnknownImageId`].
    pub fn row_of(&self, image_id: u32) -> Result<&[u8], DataError> {
        self.row_index(image_id)
            .map(|r| self.row(r))
            .ok_or(DataError::UnknownImageId(image_id))
    }

    pub fn positive_count(&self) -> u64 {
        self.bits.iter().map(|&b| u64::from(b)).sum()
    }

    /// Ids of images with no positive attribute. They stay in the matrix; loss
    /// and metric code skips them.
    pub fn empty_rows(&self) -> Vec<u32> {
        (0..self.rows)
            .filter(|&r| self.row(r).iter().all(|&b| b == 0))
            .map(|r| self.image_ids[r])
            .collect()
    }

    /// Serializes to the `FTLM` format: magic, version, rows, cols, the cells
    /// packed LSB-first row-major, the image ids, and a CRC32 of all of it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.put_bytes(FTLM_MAGIC);
        enc.put_u32(FTLM_VERSION);
        enc.put_u32(self.rows as u32);
        enc.put_u32(self.cols as u32);
        let mut packed = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            packed[i / 8] |= b << (i % 8);
        }
        enc.put_bytes(&packed);
        for &id in &self.image_ids {
            enc.put_u32(id);
        }
        enc.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut dec = Decoder::with_trailing_crc(bytes)?;
        dec.expect_magic(FTLM_MAGIC)?;
        dec.expect_version(FTLM_VERSION)?;
        let rows = dec.u32()? as usize;
        let cols = dec.u32()? as usize;
        let cells = rows
            .checked_mul(cols)
            .ok_or_else(|| DecodeError::Invalid("matrix too large".into()))?;
        let packed = dec.take(cells.div_ceil(8))?;
        let mut bits = vec![0u8; cells];
        for (i, b) in bits.iter_mut().enumerate() {
            *b = (packed[i / 8] >> (i % 8)) & 1;
        }
        if cells % 8 != 0 && packed[cells / 8] >> (cells % 8) != 0 {
            return Err(DecodeError::Invalid("nonzero padding bits".into()).into());
        }
        let image_ids = (0..rows).map(|_| dec.u32()).collect::<Result<Vec<_>, _>>()?;
        dec.finish()?;
        let mut m = Self::zeros(image_ids, cols)?;
        m.bits = bits;
        Ok(m)
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<(), DataError> {
        sink.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut source: R) -> Result<Self, DataError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Parsing options for [`build_label_matrix_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct AnnotationOptions {
    /// Require the certainty and time columns to be present.
    pub strict: bool,
}

/// Builds the image × attribute matrix from `image_attribute_labels.txt`.
///
/// Image ids are `1..=num_images`; pairs absent from the file stay 0.
pub fn build_label_matrix<R: BufRead>(
    annotations: R,
    vocab: &AttributeVocabulary,
    num_images: usize,
) -> Result<LabelMatrix, DataError> {
    build_label_matrix_with(annotations, vocab, num_images, AnnotationOptions::default())
}

pub fn build_label_matrix_with<R: BufRead>(
    annotations: R,
    vocab: &AttributeVocabulary,
    num_images: usize,
    options: AnnotationOptions,
) -> Result<LabelMatrix, DataError> {
    let cols = vocab.num_attributes();
    let mut matrix = LabelMatrix::zeros((1..=num_images as u32).collect(), cols)?;
    let mut seen = vec![false; num_images * cols];
    let min_fields = if options.strict { 5 } else { 3 };
    for (i, line) in annotations.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let malformed = || DataError::MalformedLine {
            line: lineno,
            content: line.clone(),
        };
        if fields.len() < min_fields {
            return Err(malformed());
        }
        let image_id: u32 = fields[0].parse().map_err(|_| malformed())?;
        let attribute_id: u32 = fields[1].parse().map_err(|_| malformed())?;
        let present = match fields[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(DataError::InvalidPresenceFlag {
                    line: lineno,
                    value: other.to_string(),
                })
            }
        };
        if image_id == 0 || image_id as usize > num_images {
            return Err(DataError::ImageIdOutOfRange {
                line: lineno,
                id: image_id,
                max: num_images,
            });
        }
        if attribute_id == 0 || attribute_id as usize > cols {
            return Err(DataError::AttributeIdOutOfRange {
                line: lineno,
                id: attribute_id,
                max: cols,
            });
        }
        let (r, c) = (image_id as usize - 1, attribute_id as usize - 1);
        let cell = r * cols + c;
        if seen[cell] && matrix.get(r, c) != present {
            return Err(DataError::ConflictingEntry {
                line: lineno,
                image_id,
                attribute_id,
            });
        }
        seen[cell] = true;
        matrix.set(r, c, present);
    }
    Ok(matrix)
}

/// Reads `images.txt` (`<id> <relative path>`) and returns the sorted ids.
pub fn parse_image_ids<R: BufRead>(reader: R) -> Result<Vec<u32>, DataError> {
    let mut ids = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let Some(first) = line.split_whitespace().next() else {
            continue;
        };
        let id: u32 = first.parse().map_err(|_| DataError::MalformedLine {
            line: i + 1,
            content: line.clone(),
        })?;
        ids.push(id);
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Train / validation / test partition of image ids, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<u32>,
    pub val_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    pub seed: u64,
}

/// Named subset of a [`DatasetSplit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl DatasetSplit {
    pub fn ids(&self, subset: Subset) -> &[u32] {
        match subset {
            Subset::Train => &self.train_ids,
            Subset::Val => &self.val_ids,
            Subset::Test => &self.test_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.train_ids.len() + self.val_ids.len() + self.test_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds the split from `train_test_split.txt` (`<image_id> <is_train>`).
///
/// Training ids are the official training partition. `val_size` ids are drawn
/// uniformly without replacement from the official test partition using the
/// [`SeedStream::ValidationSplit`] stream of `seed`; the rest form the test set.
pub fn make_split<R: BufRead>(official: R, val_size: usize, seed: u64) -> Result<DatasetSplit, DataError> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in official.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let malformed = || DataError::MalformedLine {
            line: lineno,
            content: line.clone(),
        };
        if fields.len() != 2 {
            return Err(malformed());
        }
        let id: u32 = fields[0].parse().map_err(|_| malformed())?;
        if !seen.insert(id) {
            return Err(DataError::DuplicateImageId { line: lineno, id });
        }
        match fields[1] {
            "1" => train.push(id),
            "0" => test.push(id),
            _ => return Err(malformed()),
        }
    }
    if val_size > test.len() {
        return Err(DataError::ValSizeTooLarge {
            requested: val_size,
            available: test.len(),
        });
    }
    train.sort_unstable();
    test.sort_unstable();
    let mut rng = stream_rng(seed, SeedStream::ValidationSplit);
    let picked: BTreeSet<usize> = index::sample(&mut rng, test.len(), val_size).into_iter().collect();
    let (mut val, mut rest) = (Vec::with_capacity(val_size), Vec::new());
    for (i, id) in test.into_iter().enumerate() {
        if picked.contains(&i) {
            val.push(id);
        } else {
            rest.push(id);
        }
    }
    val.sort_unstable();
    rest.sort_unstable();
    Ok(DatasetSplit {
        train_ids: train,
        val_ids: val,
        test_ids: rest,
        seed,
    })
}

/// Per-attribute positive counts over the images in `ids`.
pub fn label_frequencies(matrix: &LabelMatrix, ids: &[u32]) -> Result<Vec<u64>, DataError> {
    let mut counts = vec![0u64; matrix.cols()];
    for &id in ids {
        for (c, &b) in matrix.row_of(id)?.iter().enumerate() {
            counts[c] += u64::from(b);
        }
    }
    Ok(counts)
}
