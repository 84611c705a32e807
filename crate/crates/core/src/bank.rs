//! Persistent two-level feature store: slide id → tile index → feature.
//!
//! File layout (little-endian): magic `DRSB`, `u32` format version, `u32` d,
//! `u64` slide count; per slide a `u32`-length-prefixed UTF-8 id and a `u64`
//! tile count; per tile a `u32` tile index and `d` `f32` values. A trailing
//! `u64` CRC-64/XZ covers every preceding byte. The same layout carries raw
//! tile vectors in dataset tile files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};

pub const BANK_MAGIC: &[u8; 4] = b"DRSB";
pub const BANK_FORMAT_VERSION: u32 = 1;

pub type SlideFeatures = BTreeMap<u32, Vec<f32>>;

/// One pending overwrite for [`MemoryBank::replace_batch`].
#[derive(Clone, Debug)]
pub struct FeatureUpdate {
    pub slide_id: String,
    pub tile_index: u32,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MemoryBank {
    feature_dim: usize,
    entries: BTreeMap<String, SlideFeatures>,
    version: u64,
}

fn normalized_f32(feature: &[f64]) -> Vec<f32> {
    let n = feature.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > crate::numeric::L2_EPS {
        feature.iter().map(|x| (x / n) as f32).collect()
    } else {
        feature.iter().map(|&x| x as f32).collect()
    }
}

/// Equal when the stored features are equal; the in-memory version counter
/// is ignored.
impl PartialEq for MemoryBank {
    fn eq(&self, other: &Self) -> bool {
        self.feature_dim == other.feature_dim && self.entries == other.entries
    }
}

impl MemoryBank {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            entries: BTreeMap::new(),
            version: 0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Mutation counter; not persisted.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn slide_count(&self) -> usize {
        self.entries.len()
    }

    pub fn tile_count(&self, slide_id: &str) -> Option<usize> {
        self.entries.get(slide_id).map(BTreeMap::len)
    }

    pub fn total_tiles(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn slide_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains_slide(&self, slide_id: &str) -> bool {
        self.entries.contains_key(slide_id)
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.feature_dim {
            return Err(Error::dim("memory bank", &[self.feature_dim], &[len]));
        }
        Ok(())
    }

    /// Creates or overwrites one entry; the stored copy is L2-normalized and
    /// rounded to `f32`.
    pub fn insert(&mut self, slide_id: &str, tile_index: u32, feature: &[f64]) -> Result<()> {
        self.check_dim(feature.len())?;
        self.entries
            .entry(slide_id.to_owned())
            .or_default()
            .insert(tile_index, normalized_f32(feature));
        self.version += 1;
        Ok(())
    }

    pub fn get(&self, slide_id: &str, tile_index: u32) -> Option<&[f32]> {
        self.entries
            .get(slide_id)
            .and_then(|s| s.get(&tile_index))
            .map(Vec::as_slice)
    }

    /// Borrowed view of one slide, ordered by tile index.
    pub fn slide(&self, slide_id: &str) -> Result<&SlideFeatures> {
        self.entries
            .get(slide_id)
            .ok_or_else(|| Error::MissingSlide(slide_id.to_owned()))
    }

    /// Owned snapshot of one slide's features in ascending tile order.
    pub fn get_slide(&self, slide_id: &str) -> Result<Vec<Vec<f32>>> {
        Ok(self.slide(slide_id)?.values().cloned().collect())
    }

    /// Applies all updates or none. Every slide and tile must already exist.
    pub fn replace_batch(&mut self, updates: &[FeatureUpdate]) -> Result<()> {
        if updates.is_empty() {
            return Ok(());
        }
        for u in updates {
            self.check_dim(u.feature.len())?;
            let slide = self
                .entries
                .get(&u.slide_id)
                .ok_or_else(|| Error::MissingSlide(u.slide_id.clone()))?;
            if !slide.contains_key(&u.tile_index) {
                return Err(Error::Input(format!(
                    "slide `{}` has no tile {}",
                    u.slide_id, u.tile_index
                )));
            }
        }
        for u in updates {
            let slot = self
                .entries
                .get_mut(&u.slide_id)
                .and_then(|s| s.get_mut(&u.tile_index))
                .expect("validated above");
            *slot = normalized_f32(&u.feature);
        }
        self.version += 1;
        Ok(())
    }

    /// Every stored feature in slide-then-tile order.
    pub fn all_features(&self) -> Vec<&[f32]> {
        self.entries
            .values()
            .flat_map(|s| s.values().map(Vec::as_slice))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_records(
            self.feature_dim,
            self.entries
                .iter()
                .map(|(id, tiles)| (id.as_str(), tiles.iter().map(|(i, f)| (*i, f.as_slice())))),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (feature_dim, slides) = decode_records(bytes)?;
        let mut entries = BTreeMap::new();
        for (id, tiles) in slides {
            let map: SlideFeatures = tiles.into_iter().collect();
            if entries.insert(id.clone(), map).is_some() {
                return Err(Error::format(0, format!("duplicate slide id `{id}`")));
            }
        }
        Ok(Self {
            feature_dim,
            entries,
            version: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

pub(crate) fn encode_records<'a, S, T>(d: usize, slides: S) -> Vec<u8>
where
    S: IntoIterator<Item = (&'a str, T)>,
    S::IntoIter: ExactSizeIterator,
    T: IntoIterator<Item = (u32, &'a [f32])>,
    T::IntoIter: ExactSizeIterator,
{
    let slides = slides.into_iter();
    let mut w = Writer::with_magic(BANK_MAGIC);
    w.u32(BANK_FORMAT_VERSION);
    w.u32(d as u32);
    w.u64(slides.len() as u64);
    for (id, tiles) in slides {
        let tiles = tiles.into_iter();
        w.str(id);
        w.u64(tiles.len() as u64);
        for (idx, f) in tiles {
            debug_assert_eq!(f.len(), d);
            w.u32(idx);
            for &v in f {
                w.f32(v);
            }
        }
    }
    w.finish_with_crc()
}

pub(crate) type DecodedRecords = (usize, Vec<(String, Vec<(u32, Vec<f32>)>)>);

pub(crate) fn decode_records(bytes: &[u8]) -> Result<DecodedRecords> {
    let mut r = Reader::new(bytes);
    r.magic(BANK_MAGIC)?;
    let body = codec::verify_crc(bytes)?;
    let mut r = Reader::new(body);
    r.magic(BANK_MAGIC)?;
    let at = r.offset();
    let version = r.u32()?;
    if version != BANK_FORMAT_VERSION {
        return Err(Error::format(at, format!("unsupported format version {version}")));
    }
    let d = r.u32()? as usize;
    if d == 0 {
        return Err(Error::format(at + 4, "feature dimension is zero"));
    }
    let n_slides = r.count(12)?;
    let mut slides = Vec::with_capacity(n_slides);
    for _ in 0..n_slides {
        let id = r.str()?;
        let n_tiles = r.count(4 + 4 * d)?;
        let mut tiles = Vec::with_capacity(n_tiles);
        for _ in 0..n_tiles {
            let at = r.offset();
            let idx = r.u32()?;
            if tiles.last().is_some_and(|(prev, _): &(u32, _)| *prev >= idx) {
                return Err(Error::format(at, "tile indices not strictly ascending"));
            }
            tiles.push((idx, r.f32s(d)?));
        }
        slides.push((id, tiles));
    }
    if !r.at_end() {
        return Err(Error::format(r.offset(), "trailing bytes before checksum"));
    }
    Ok((d, slides))
}
