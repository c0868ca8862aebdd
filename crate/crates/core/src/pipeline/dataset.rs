//! In-memory samples and the `HODS` dataset container.
//!
//! ```text
//! magic   "HODS"
//! version u32 (= 1)
//! count   u32
//! K, c, h, w  u32 each
//! count × { identity u32, camera u32, occlusion mask ⌈K/32⌉ × u32,
//!           m_cnn f64 × c·h·w, raw heatmaps f64 × K·h·w }
//! ```
//! Little-endian throughout; bit `k % 32` of mask word `k / 32` marks
//! keypoint `k` occluded.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::*;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::semantic::{FeatureMap, HeatmapSet};

pub const DATASET_MAGIC: &[u8; 4] = b"HODS";
pub const DATASET_VERSION: u32 = 1;

/// One image: feature map, raw keypoint heatmaps, labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub identity: u32,
    pub camera: u32,
    pub occluded: Vec<bool>,
    pub m_cnn: FeatureMap,
    pub heatmaps: HeatmapSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub k: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub samples: Vec<Sample>,
}

/// Query / gallery / training index sets over one dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

impl Dataset {
    pub fn new(k: usize, c: usize, h: usize, w: usize, samples: Vec<Sample>) -> Result<Self> {
        let d = Dataset { k, c, h, w, samples };
        for (i, s) in d.samples.iter().enumerate() {
            d.check_sample(s).map_err(|e| Error::Invalid(format!("sample {i}: {e}")))?;
        }
        Ok(d)
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        if s.m_cnn.tensor().shape() != [self.c, self.h, self.w] {
            return Err(Error::shape("dataset", s.m_cnn.tensor().shape(), &[self.c, self.h, self.w]));
        }
        if s.heatmaps.raw().shape() != [self.k, self.h, self.w] {
            return Err(Error::shape("dataset", s.heatmaps.raw().shape(), &[self.k, self.h, self.w]));
        }
        if s.occluded.len() != self.k {
            return Err(Error::Invalid("occlusion mask length differs from K".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn identities(&self) -> Vec<u32> {
        self.samples
            .iter()
            .map(|s| s.identity)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Disjoint identity halves: the lower half of the sorted identities
    /// trains; of the rest, camera-0 images are queries and all other
    /// images form the gallery.
    pub fn split(&self) -> Result<Split> {
        let ids = self.identities();
        if ids.len() < 4 {
            return Err(Error::Invalid(format!("need at least 4 identities to split, got {}", ids.len())));
        }
        let cut = ids[ids.len() / 2];
        let mut split = Split {
            train: Vec::new(),
            query: Vec::new(),
            gallery: Vec::new(),
        };
        for (i, s) in self.samples.iter().enumerate() {
            if s.identity < cut {
                split.train.push(i);
            } else if s.camera == 0 {
                split.query.push(i);
            } else {
                split.gallery.push(i);
            }
        }
        Ok(split)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        put_u32(w, DATASET_VERSION)?;
        put_len(w, self.samples.len(), "sample count")?;
        for d in [self.k, self.c, self.h, self.w] {
            put_len(w, d, "dimension")?;
        }
        for s in &self.samples {
            put_u32(w, s.identity)?;
            put_u32(w, s.camera)?;
            for word in mask_words(&s.occluded) {
                put_u32(w, word)?;
            }
            put_f64s(w, s.m_cnn.tensor().data())?;
            put_f64s(w, s.heatmaps.raw().data())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, DATASET_MAGIC)?;
        let version = get_u32(r, "version")?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let count = get_u32(r, "sample count")? as usize;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = get_u32(r, "dimension")? as usize;
        }
        let [k, c, h, w] = dims;
        let plane = h.checked_mul(w).filter(|&p| p > 0);
        let (map_len, hm_len) = match plane.and_then(|p| Some((p.checked_mul(c)?, p.checked_mul(k)?))) {
            Some((m, hm)) if k > 0 && c > 0 && m <= 1 << 26 && hm <= 1 << 26 => (m, hm),
            _ => return Err(Error::Format(format!("unusable dimensions K={k} c={c} h={h} w={w}"))),
        };
        let words = k.div_ceil(32);
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let identity = get_u32(r, "identity")?;
            let camera = get_u32(r, "camera")?;
            let mask = (0..words)
                .map(|_| get_u32(r, "occlusion mask"))
                .collect::<Result<Vec<_>>>()?;
            let occluded = (0..k).map(|i| mask[i / 32] >> (i % 32) & 1 == 1).collect();
            let m = Tensor::new(vec![c, h, w], get_f64s(r, map_len, "feature map")?)?;
            let hm = Tensor::new(vec![k, h, w], get_f64s(r, hm_len, "heatmaps")?)?;
            samples.push(Sample {
                identity,
                camera,
                occluded,
                m_cnn: FeatureMap::new(m).map_err(|e| Error::Format(e.to_string()))?,
                heatmaps: HeatmapSet::new(hm).map_err(|e| Error::Format(e.to_string()))?,
            });
        }
        expect_eof(r)?;
        Dataset::new(k, c, h, w, samples)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

fn mask_words(mask: &[bool]) -> Vec<u32> {
    let mut words = vec![0u32; mask.len().div_ceil(32)];
    for (i, _) in mask.iter().enumerate().filter(|(_, &o)| o) {
        words[i / 32] |= 1 << (i % 32);
    }
    words
}
