//! Face comparators: embeddings and cosine scores.
//!
//! The toy comparator is a fixed random projection of a 16x16 luma
//! thumbnail. External comparators replay embeddings precomputed by a real
//! face-recognition system and stored as CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::image::{resize_bilinear, FaceImage};
use crate::error::{validation, Error, Result};
use crate::scalar::Scalar;

pub const TOY_THUMBNAIL: usize = 16;
pub const TOY_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub vector: Vec<T>,
    pub comparator: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComparatorKind {
    Toy,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparatorDescriptor {
    pub name: String,
    pub dim: usize,
    pub kind: ComparatorKind,
}

pub trait Comparator<T>: Send + Sync {
    fn descriptor(&self) -> &ComparatorDescriptor;
    fn embed(&self, image: &FaceImage<T>) -> Result<Embedding<T>>;

    fn name(&self) -> &str {
        &self.descriptor().name
    }
}

/// Stable 64-bit seed derived from a name (SHA-256 prefix).
pub fn name_seed(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub struct ToyComparator<T> {
    descriptor: ComparatorDescriptor,
    /// Row-major `dim x 256` projection.
    projection: Vec<T>,
}

impl<T: Scalar> ToyComparator<T> {
    pub fn new(name: &str, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(validation("comparator dimension must be positive"));
        }
        let inputs = TOY_THUMBNAIL * TOY_THUMBNAIL;
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(name));
        let scale = 1.0 / (inputs as f64).sqrt();
        let projection = (0..dim * inputs)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(z * scale)
            })
            .collect();
        Ok(Self {
            descriptor: ComparatorDescriptor { name: name.to_string(), dim, kind: ComparatorKind::Toy },
            projection,
        })
    }
}

/// Luma thumbnail: block means when the size divides evenly, bilinear otherwise.
pub fn luma_thumbnail<T: Scalar>(image: &FaceImage<T>, side: usize) -> Vec<T> {
    let gray = image.grayscale();
    let n = image.size();
    if n % side != 0 {
        return resize_bilinear(&gray, n, n, 1, side, side);
    }
    let block = n / side;
    let count = T::from_usize_lossy(block * block);
    let mut out = Vec::with_capacity(side * side);
    for by in 0..side {
        for bx in 0..side {
            let mut acc = T::zero();
            for y in by * block..(by + 1) * block {
                for x in bx * block..(bx + 1) * block {
                    acc = acc + gray[y * n + x];
                }
            }
            out.push(acc / count);
        }
    }
    out
}

impl<T: Scalar> Comparator<T> for ToyComparator<T> {
    fn descriptor(&self) -> &ComparatorDescriptor {
        &self.descriptor
    }

    fn embed(&self, image: &FaceImage<T>) -> Result<Embedding<T>> {
        let thumb = luma_thumbnail(image, TOY_THUMBNAIL);
        let mut v: Vec<T> = self
            .projection
            .chunks_exact(thumb.len())
            .map(|row| row.iter().zip(&thumb).map(|(w, x)| *w * *x).sum())
            .collect();
        let norm = v.iter().map(|x| *x * *x).sum::<T>().sqrt();
        if norm > T::zero() {
            v.iter_mut().for_each(|x| *x = *x / norm);
        }
        Ok(Embedding { vector: v, comparator: self.descriptor.name.clone() })
    }
}

/// Replays precomputed embeddings keyed by image id.
pub struct ExternalComparator<T> {
    descriptor: ComparatorDescriptor,
    table: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> ExternalComparator<T> {
    pub fn from_table(name: &str, dim: usize, table: BTreeMap<String, Vec<T>>) -> Result<Self> {
        if dim == 0 {
            return Err(validation("comparator dimension must be positive"));
        }
        if let Some((id, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(validation(format!("embedding for {id} has {} dims, expected {dim}", v.len())));
        }
        Ok(Self {
            descriptor: ComparatorDescriptor { name: name.to_string(), dim, kind: ComparatorKind::External },
            table,
        })
    }

    pub fn from_csv(name: &str, dim: usize, path: &Path) -> Result<Self> {
        let rows = read_embeddings_csv::<T>(path)?;
        let table = rows
            .into_iter()
            .filter(|(_, e)| e.comparator == name)
            .map(|(id, e)| (id, e.vector))
            .collect();
        Self::from_table(name, dim, table)
    }
}

impl<T: Scalar> Comparator<T> for ExternalComparator<T> {
    fn descriptor(&self) -> &ComparatorDescriptor {
        &self.descriptor
    }

    fn embed(&self, image: &FaceImage<T>) -> Result<Embedding<T>> {
        let v = self.table.get(&image.image_id).ok_or_else(|| {
            Error::Registry(format!("{} has no embedding for image {}", self.descriptor.name, image.image_id))
        })?;
        Ok(Embedding { vector: v.clone(), comparator: self.descriptor.name.clone() })
    }
}

fn check_pair<T>(a: &Embedding<T>, b: &Embedding<T>) -> Result<()> {
    if a.comparator != b.comparator {
        return Err(validation(format!("comparing {} with {}", a.comparator, b.comparator)));
    }
    if a.vector.len() != b.vector.len() {
        return Err(validation(format!("dimension mismatch {} vs {}", a.vector.len(), b.vector.len())));
    }
    Ok(())
}

/// Cosine similarity clamped to `[-1, 1]`. A zero vector scores 0.
pub fn similarity<T: Scalar>(a: &Embedding<T>, b: &Embedding<T>) -> Result<T> {
    check_pair(a, b)?;
    Ok(cosine(&a.vector, &b.vector))
}

pub(crate) fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(x, y)| *x * *y).sum();
    let na: T = a.iter().map(|x| *x * *x).sum();
    let nb: T = b.iter().map(|x| *x * *x).sum();
    // na * nb is commutative, so the score is exactly symmetric
    let denom = (na * nb).sqrt();
    if !(denom > T::zero()) {
        log::warn!("cosine similarity of a zero vector; scoring 0");
        return T::zero();
    }
    (dot / denom).max(-T::one()).min(T::one())
}

/// Cosine distance `1 - similarity`, in `[0, 2]`.
pub fn distance<T: Scalar>(a: &Embedding<T>, b: &Embedding<T>) -> Result<T> {
    Ok(T::one() - similarity(a, b)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparatorSpec {
    pub name: String,
    pub kind: ComparatorKind,
    pub dim: usize,
    /// Embedding CSV for external comparators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
}

impl ComparatorSpec {
    pub fn toy(name: &str) -> Self {
        Self { name: name.into(), kind: ComparatorKind::Toy, dim: TOY_DIM, embeddings: None }
    }
}

pub struct ComparatorRegistry<T> {
    entries: Vec<Box<dyn Comparator<T>>>,
}

impl<T: Scalar> ComparatorRegistry<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn register(&mut self, c: Box<dyn Comparator<T>>) -> Result<()> {
        if self.entries.iter().any(|e| e.name() == c.name()) {
            return Err(Error::Registry(format!("comparator {} registered twice", c.name())));
        }
        self.entries.push(c);
        Ok(())
    }

    /// Builds comparators from specs; relative embedding paths resolve against `base`.
    pub fn from_specs(specs: &[ComparatorSpec], base: &Path) -> Result<Self> {
        let mut reg = Self::new();
        for s in specs {
            let c: Box<dyn Comparator<T>> = match s.kind {
                ComparatorKind::Toy => Box::new(ToyComparator::new(&s.name, s.dim)?),
                ComparatorKind::External => {
                    let rel = s.embeddings.as_ref().ok_or_else(|| {
                        Error::Config(format!("external comparator {} needs an embeddings file", s.name))
                    })?;
                    Box::new(ExternalComparator::from_csv(&s.name, s.dim, &base.join(rel))?)
                }
            };
            reg.register(c)?;
        }
        Ok(reg)
    }

    pub fn get(&self, name: &str) -> Result<&dyn Comparator<T>> {
        self.entries
            .iter()
            .find(|c| c.name() == name)
            .map(|c| c.as_ref())
            .ok_or_else(|| Error::Registry(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn Comparator<T>> {
        self.entries.iter().map(|c| c.as_ref())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<T: Scalar> Default for ComparatorRegistry<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parses `image_id,comparator,d0..dN` rows.
pub fn read_embeddings_csv<T: Scalar>(path: &Path) -> Result<Vec<(String, Embedding<T>)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read embeddings {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| validation("embedding file is empty"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "image_id" || cols[1] != "comparator" {
        return Err(validation("embedding header must start with image_id,comparator"));
    }
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("d{i}") {
            return Err(validation(format!("unexpected embedding column {c:?}")));
        }
    }
    let dim = cols.len() - 2;
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 2 {
            return Err(validation(format!("row {} has {} fields, expected {}", n + 2, fields.len(), dim + 2)));
        }
        let vector = fields[2..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(T::lit)
                    .ok_or_else(|| validation(format!("row {}: bad value {f:?}", n + 2)))
            })
            .collect::<Result<Vec<T>>>()?;
        out.push((fields[0].to_string(), Embedding { vector, comparator: fields[1].to_string() }));
    }
    Ok(out)
}

pub fn write_embeddings_csv<T: Scalar>(path: &Path, rows: &[(String, Embedding<T>)]) -> Result<()> {
    let dim = rows.first().map_or(0, |(_, e)| e.vector.len());
    let mut s = String::from("image_id,comparator");
    for i in 0..dim {
        let _ = write!(s, ",d{i}");
    }
    s.push('\n');
    for (id, e) in rows {
        if e.vector.len() != dim {
            return Err(validation("embeddings in one file must share a dimension"));
        }
        s.push_str(id);
        s.push(',');
        s.push_str(&e.comparator);
        for v in &e.vector {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}
