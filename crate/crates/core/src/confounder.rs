//! The confounder dictionary: per-class mean RoI features plus a class prior.
//!
//! Row `i` of the dictionary is the average feature of every RoI of class
//! `i` in the construction corpus, and `prior[i]` is that class's empirical
//! frequency. Classes that never occur keep a zero row so the `N×d` shape is
//! independent of corpus coverage.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_at, shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DICT_MAGIC: &[u8; 8] = b"IPCDICT1";

/// One detected region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoI {
    pub class_id: usize,
    /// `(x0, y0, x1, y1)` in normalized image coordinates.
    pub bbox: [f64; 4],
    pub feature: Vec<f64>,
}

impl RoI {
    pub fn new(class_id: usize, bbox: [f64; 4], feature: Vec<f64>) -> Self {
        Self {
            class_id,
            bbox,
            feature,
        }
    }

    pub fn validate(&self, num_classes: usize, dim: usize) -> Result<()> {
        let [x0, y0, x1, y1] = self.bbox;
        if !(x0 < x1 && y0 < y1) || [x0, y0, x1, y1].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid(format!(
                "degenerate or out-of-range box {:?}",
                self.bbox
            )));
        }
        if self.feature.len() != dim {
            return Err(shape_err(format!(
                "RoI feature has length {}, expected {dim}",
                self.feature.len()
            )));
        }
        if self.class_id >= num_classes {
            return Err(invalid(format!(
                "class id {} outside [0, {num_classes})",
                self.class_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderDictionary {
    entries: Tensor,
    counts: Vec<u64>,
    prior: Vec<f64>,
    /// Set when built from an empty corpus (all-zero entries, uniform prior).
    pub empty_corpus: bool,
}

impl ConfounderDictionary {
    /// Builds from explicit rows and counts; the prior is derived from counts.
    pub fn from_parts(entries: Tensor, counts: Vec<u64>) -> Result<Self> {
        if entries.rows() != counts.len() {
            return Err(shape_err(format!(
                "{} entries but {} counts",
                entries.rows(),
                counts.len()
            )));
        }
        if entries.rows() == 0 {
            return Err(invalid("dictionary needs at least one class"));
        }
        let prior = prior_from_counts(&counts);
        let empty_corpus = counts.iter().all(|&c| c == 0);
        Ok(Self {
            entries,
            counts,
            prior,
            empty_corpus,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entry(&self, class: usize) -> &[f64] {
        self.entries.row(class)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Count-weighted union of two dictionaries over the same classes.
    pub fn merge(&self, other: &ConfounderDictionary) -> Result<Self> {
        if self.entries.shape() != other.entries.shape() {
            return Err(shape_err("cannot merge dictionaries of different shape"));
        }
        let mut entries = Tensor::zeros(self.num_classes(), self.dim());
        let mut counts = Vec::with_capacity(self.num_classes());
        for i in 0..self.num_classes() {
            let (a, b) = (self.counts[i], other.counts[i]);
            let total = a + b;
            counts.push(total);
            if total == 0 {
                continue;
            }
            let (wa, wb) = (a as f64 / total as f64, b as f64 / total as f64);
            for (j, out) in entries.row_mut(i).iter_mut().enumerate() {
                *out = wa * self.entries.get(i, j) + wb * other.entries.get(i, j);
            }
        }
        Self::from_parts(entries, counts)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DICT_MAGIC)?;
        w.write_all(&(self.num_classes() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for &c in &self.counts {
            w.write_all(&c.to_le_bytes())?;
        }
        for &v in self.entries.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DICT_MAGIC {
            return Err(Error::Format("missing IPCDICT1 magic".into()));
        }
        let n = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        let counts = (0..n)
            .map(|_| read_u64(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(n * d);
        let mut buf = [0u8; 4];
        for _ in 0..n * d {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        Self::from_parts(Tensor::from_vec(n, d, data), counts)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(
            File::open(path).map_err(|e| io_at(path, e))?,
        ))
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn prior_from_counts(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        let n = counts.len() as f64;
        return vec![1.0 / n; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Averages features per class. Classes without samples get a zero row and
/// count 0; an empty sample list yields an all-zero dictionary with a uniform
/// prior and `empty_corpus` set.
pub fn build_dictionary<'a, I>(
    samples: I,
    num_classes: usize,
    dim: usize,
) -> Result<ConfounderDictionary>
where
    I: IntoIterator<Item = (usize, &'a [f64])>,
{
    if num_classes == 0 || dim == 0 {
        return Err(invalid("num_classes and dim must be positive"));
    }
    let mut sums = Tensor::zeros(num_classes, dim);
    let mut counts = vec![0u64; num_classes];
    for (class, feature) in samples {
        if feature.len() != dim {
            return Err(shape_err(format!(
                "feature of class {class} has length {}, expected {dim}",
                feature.len()
            )));
        }
        if class >= num_classes {
            return Err(invalid(format!(
                "class id {class} outside [0, {num_classes})"
            )));
        }
        counts[class] += 1;
        for (s, v) in sums.row_mut(class).iter_mut().zip(feature) {
            *s += v;
        }
    }
    for (class, &count) in counts.iter().enumerate() {
        if count > 0 {
            let inv = 1.0 / count as f64;
            sums.row_mut(class).iter_mut().for_each(|s| *s *= inv);
        }
    }
    ConfounderDictionary::from_parts(sums, counts)
}

/// Convenience wrapper over RoIs.
pub fn build_from_rois<'a, I>(
    rois: I,
    num_classes: usize,
    dim: usize,
) -> Result<ConfounderDictionary>
where
    I: IntoIterator<Item = &'a RoI>,
{
    build_dictionary(
        rois.into_iter().map(|r| (r.class_id, r.feature.as_slice())),
        num_classes,
        dim,
    )
}

/// The stored class prior `P(z)`.
pub fn class_prior(dict: &ConfounderDictionary) -> &[f64] {
    &dict.prior
}
