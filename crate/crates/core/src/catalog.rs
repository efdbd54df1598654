//! Item catalog: embeddings, interaction counts, cold flags, the binary
//! `VSID` file format and the synthetic Zipfian generator.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, WriteLe};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub const CATALOG_MAGIC: [u8; 4] = *b"VSID";
pub const CATALOG_VERSION: u32 = 1;

/// The object universe. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    embeddings: Array2<f32>,
    popularity: Vec<u64>,
    cold: Vec<bool>,
}

impl Catalog {
    pub fn new(embeddings: Array2<f32>, popularity: Vec<u64>, cold: Vec<bool>) -> Result<Self> {
        let (n, d) = embeddings.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!("catalog needs n_items >= 1 and dim >= 1, got {n} x {d}")));
        }
        if popularity.len() != n || cold.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} embeddings, {} popularity counts, {} cold flags",
                popularity.len(),
                cold.len()
            )));
        }
        Ok(Self { embeddings, popularity, cold })
    }

    pub fn n_items(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<f32> {
        &self.embeddings
    }

    pub fn popularity(&self) -> &[u64] {
        &self.popularity
    }

    pub fn cold_flags(&self) -> &[bool] {
        &self.cold
    }

    pub fn is_cold(&self, item: usize) -> bool {
        self.cold[item]
    }

    /// Indices of items that take part in training.
    pub fn train_items(&self) -> Vec<usize> {
        (0..self.n_items()).filter(|&i| !self.cold[i]).collect()
    }

    pub fn cold_items(&self) -> Vec<usize> {
        (0..self.n_items()).filter(|&i| self.cold[i]).collect()
    }

    /// Gathers the given rows as a dense `f64` batch.
    pub fn batch(&self, items: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((items.len(), self.dim()));
        for (r, &i) in items.iter().enumerate() {
            out.row_mut(r).assign(&self.embeddings.row(i).mapv(f64::from));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.embeddings.dim();
        let mut buf = Vec::with_capacity(16 + n * d * 4 + n * 9);
        buf.extend_from_slice(&CATALOG_MAGIC);
        buf.put_u32(CATALOG_VERSION);
        buf.put_u32(n as u32);
        buf.put_u32(d as u32);
        for &v in self.embeddings.iter() {
            buf.put_f32(v);
        }
        for &p in &self.popularity {
            buf.put_u64(p);
        }
        for &c in &self.cold {
            buf.put_u8(c as u8);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "catalog");
        r.magic(CATALOG_MAGIC)?;
        let version = r.u32()?;
        if version != CATALOG_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: CATALOG_VERSION });
        }
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let expected = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(4))
            .and_then(|b| b.checked_add(n * 9))
            .ok_or_else(|| Error::Truncated("catalog header sizes overflow".into()))?;
        if r.remaining() < expected {
            return Err(Error::Truncated(format!("catalog body needs {expected} bytes, found {}", r.remaining())));
        }
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            data.push(r.f32()?);
        }
        let embeddings = Array2::from_shape_vec((n, d), data).expect("shape checked above");
        let popularity = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let mut cold = Vec::with_capacity(n);
        for i in 0..n {
            let flag = r.u8()?;
            if flag > 1 {
                return Err(Error::InvalidArgument(format!("reserved cold-flag bits set on item {i}: {flag:#04x}")));
            }
            cold.push(flag == 1);
        }
        if r.remaining() != 0 {
            return Err(Error::InvalidArgument(format!("{} trailing bytes after catalog", r.remaining())));
        }
        Catalog::new(embeddings, popularity, cold)
    }
}

pub fn save_catalog(catalog: &Catalog, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, catalog.to_bytes())?;
    Ok(())
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<Catalog> {
    Catalog::from_bytes(&fs::read(path)?)
}

/// Divides every embedding row by its Euclidean norm.
pub fn normalize_embeddings(catalog: &Catalog) -> Result<Catalog> {
    let mut emb = catalog.embeddings.clone();
    for (i, mut row) in emb.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroEmbedding { row: i });
        }
        row.mapv_inplace(|v| (f64::from(v) / norm) as f32);
    }
    Catalog::new(emb, catalog.popularity.clone(), catalog.cold.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistributionKind {
    CatalogUniform,
    DataUnigram,
}

/// A probability vector over catalog items.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemDistribution {
    pub weights: Vec<f64>,
    pub kind: DistributionKind,
}

impl ItemDistribution {
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(i, _)| i)
    }

    /// Point mass on one item.
    pub fn point(n_items: usize, item: usize) -> Self {
        let mut weights = vec![0.0; n_items];
        weights[item] = 1.0;
        Self { weights, kind: DistributionKind::CatalogUniform }
    }
}

/// Which part of the catalog a statistic is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slice {
    Train,
    Cold,
}

/// Catalog-uniform and popularity-weighted distributions over one slice.
pub fn slice_distributions(catalog: &Catalog, slice: Slice) -> Result<(ItemDistribution, ItemDistribution)> {
    let n = catalog.n_items();
    let member: Vec<bool> = catalog.cold.iter().map(|&c| c == (slice == Slice::Cold)).collect();
    let count = member.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptySlice);
    }
    let total: u64 = (0..n).filter(|&i| member[i]).map(|i| catalog.popularity[i]).sum();
    if total == 0 {
        return Err(Error::NoInteractions);
    }
    let uniform = (0..n).map(|i| if member[i] { 1.0 / count as f64 } else { 0.0 }).collect();
    let data = (0..n)
        .map(|i| if member[i] { catalog.popularity[i] as f64 / total as f64 } else { 0.0 })
        .collect();
    Ok((
        ItemDistribution { weights: uniform, kind: DistributionKind::CatalogUniform },
        ItemDistribution { weights: data, kind: DistributionKind::DataUnigram },
    ))
}

/// `(p_catalog, p_data)` over the non-cold items.
pub fn empirical_distributions(catalog: &Catalog) -> Result<(ItemDistribution, ItemDistribution)> {
    slice_distributions(catalog, Slice::Train)
}

/// Gini coefficient of a set of nonnegative counts.
pub fn gini(counts: &[u64]) -> f64 {
    let mut v: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    let total: f64 = v.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let weighted: f64 = v.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x).sum();
    (2.0 * weighted) / (n * total) - (n + 1.0) / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_items: usize,
    pub dim: usize,
    pub zipf_exponent: f64,
    pub n_clusters: usize,
    pub cold_fraction: f64,
    /// Total interactions drawn across the whole catalog.
    pub interactions: u64,
    /// Isotropic noise std around each cluster centre (before normalization).
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 5000,
            dim: 16,
            zipf_exponent: 1.1,
            n_clusters: 200,
            cold_fraction: 0.1,
            interactions: 200_000,
            noise: 0.35,
            seed: 0,
        }
    }
}

/// Expected popularity shares by rank, `∝ (r + 1)^(-exponent)`.
pub fn zipf_shares(n_items: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n_items).map(|r| (r as f64).powf(-exponent)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Cluster-structured embeddings with Zipf-distributed interaction counts.
///
/// Ranks are assigned by a random permutation independent of the clusters.
/// Cold items keep their sampled counts as the held-out ledger.
pub fn synth_zipf_catalog(cfg: &SynthConfig) -> Result<Catalog> {
    if cfg.n_items == 0 || cfg.dim == 0 {
        return Err(Error::InvalidArgument("n_items and dim must be positive".into()));
    }
    if cfg.n_clusters == 0 || cfg.n_clusters > cfg.n_items {
        return Err(Error::InvalidArgument(format!(
            "n_clusters must be in 1..={}, got {}",
            cfg.n_items, cfg.n_clusters
        )));
    }
    if !(cfg.zipf_exponent >= 0.0 && cfg.zipf_exponent.is_finite()) {
        return Err(Error::InvalidArgument(format!("zipf exponent must be >= 0, got {}", cfg.zipf_exponent)));
    }
    if !(0.0..1.0).contains(&cfg.cold_fraction) {
        return Err(Error::InvalidArgument(format!("cold fraction must be in [0, 1), got {}", cfg.cold_fraction)));
    }
    let mut rng = stream(cfg.seed, Stream::Synth);
    let (n, d) = (cfg.n_items, cfg.dim);

    let mut centres = Array2::<f64>::zeros((cfg.n_clusters, d));
    for mut row in centres.rows_mut() {
        loop {
            row.mapv_inplace(|_| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-6 {
                row /= norm;
                break;
            }
        }
    }
    let mut assignment: Vec<usize> = (0..n).map(|i| i % cfg.n_clusters).collect();
    assignment.shuffle(&mut rng);

    let noise_scale = cfg.noise / (d as f64).sqrt();
    let mut emb = Array2::<f32>::zeros((n, d));
    for (i, mut row) in emb.rows_mut().into_iter().enumerate() {
        loop {
            let v: Vec<f64> = (0..d)
                .map(|j| centres[[assignment[i], j]] + noise_scale * rand::Rng::sample::<f64, _>(&mut rng, StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for (o, x) in row.iter_mut().zip(v) {
                    *o = (x / norm) as f32;
                }
                break;
            }
        }
    }

    let mut rank_to_item: Vec<usize> = (0..n).collect();
    rank_to_item.shuffle(&mut rng);
    let shares = zipf_shares(n, cfg.zipf_exponent);
    let sampler = WeightedIndex::new(&shares).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut popularity = vec![0u64; n];
    for _ in 0..cfg.interactions {
        popularity[rank_to_item[sampler.sample(&mut rng)]] += 1;
    }

    let n_cold = (cfg.cold_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cold = vec![false; n];
    for &i in order.iter().take(n_cold.min(n - 1)) {
        cold[i] = true;
    }
    Catalog::new(emb, popularity, cold)
}
