//! Residual k-means: fixed-length codes from k-means on successive
//! quantization residuals.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, WriteLe};
use crate::catalog::Catalog;
use crate::encoder::SemanticId;
use crate::error::{Error, Result};
use crate::evaluation::{unit_embeddings, SemanticCoder};
use crate::rng::{stream, Stream};

pub const RKMEANS_MAGIC: [u8; 4] = *b"VSKM";
pub const RKMEANS_VERSION: u32 = 1;

/// Per-level codebooks, each `V × dim`, stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct RKMeansModel {
    pub centroids: Vec<Array2<f32>>,
}

/// Outcome of one k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Array2<f64>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances after each assignment sweep.
    pub objective: Vec<f64>,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the closest centroid; ties go to the
/// lower index.
pub fn nearest(x: ArrayView1<'_, f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_pp(points: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, centroids.row(0))).collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // every point already coincides with a centroid
            Err(_) => rng.random_range(0..n),
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (d, p) in d2.iter_mut().zip(points.rows()) {
            *d = d.min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeds. Runs `iters` sweeps or until
/// assignments stop changing. An empty cluster is moved to the point
/// currently farthest from its centroid.
pub fn kmeans(points: &Array2<f64>, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Result<KMeansFit> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={n}")));
    }
    let mut centroids = kmeans_pp(points, k, rng);
    let mut assignment = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut objective = Vec::new();
    for _ in 0..iters.max(1) {
        let mut changed = false;
        for (i, p) in points.rows().into_iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            changed |= assignment[i] != c;
            assignment[i] = c;
            dists[i] = d;
        }
        objective.push(dists.iter().sum());
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (p, &c) in points.rows().into_iter().zip(&assignment) {
            let mut row = sums.row_mut(c);
            row += &p;
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }
        for c in (0..k).filter(|&c| counts[c] == 0) {
            let far = (0..n)
                .map(|i| (i, sq_dist(points.row(i), centroids.row(assignment[i]))))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                .0;
            centroids.row_mut(c).assign(&points.row(far));
            assignment[far] = c;
        }
    }
    Ok(KMeansFit { centroids, assignment, objective })
}

/// Fits `T` levels of `V` centroids on the non-cold items.
pub fn rkmeans_fit(catalog: &Catalog, max_len: usize, vocab: usize, iters: usize, seed: u64) -> Result<RKMeansModel> {
    let train = catalog.train_items();
    if vocab == 0 || vocab > train.len() {
        return Err(Error::InvalidArgument(format!("vocabulary {vocab} must be in 1..={} (training items)", train.len())));
    }
    if max_len == 0 {
        return Err(Error::InvalidArgument("max length must be >= 1".into()));
    }
    let emb = unit_embeddings(catalog)?;
    let mut residual = Array2::from_shape_fn((train.len(), emb.ncols()), |(r, j)| emb[[train[r], j]]);
    let mut rng = stream(seed, Stream::KMeans);
    let mut centroids = Vec::with_capacity(max_len);
    for _ in 0..max_len {
        let fit = kmeans(&residual, vocab, iters, &mut rng)?;
        let stored = fit.centroids.mapv(|v| v as f32);
        // residuals follow the rounded centroids so encoding replays training
        let rounded = stored.mapv(f64::from);
        for mut row in residual.rows_mut() {
            let (c, _) = nearest(row.view(), &rounded);
            row -= &rounded.row(c);
        }
        centroids.push(stored);
    }
    Ok(RKMeansModel { centroids })
}

impl RKMeansModel {
    pub fn levels(&self) -> usize {
        self.centroids.len()
    }

    pub fn vocab(&self) -> usize {
        self.centroids[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].ncols()
    }

    /// Greedy nearest centroid per level on the running residual.
    pub fn encode_path(&self, x: ArrayView1<'_, f64>) -> Vec<u32> {
        let mut r = x.to_owned();
        self.centroids
            .iter()
            .map(|level| {
                let c64 = level.mapv(f64::from);
                let (k, _) = nearest(r.view(), &c64);
                r -= &c64.row(k);
                k as u32
            })
            .collect()
    }

    /// Sum of the centroids named by `tokens`.
    pub fn decode(&self, tokens: &[u32]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (level, &tok) in self.centroids.iter().zip(tokens) {
            for (o, &c) in out.iter_mut().zip(level.row(tok as usize)) {
                *o += f64::from(c);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&RKMEANS_MAGIC);
        out.put_u32(RKMEANS_VERSION);
        out.put_u32(self.levels() as u32);
        out.put_u32(self.vocab() as u32);
        out.put_u32(self.dim() as u32);
        for level in &self.centroids {
            for &v in level.iter() {
                out.put_f32(v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "r-kmeans model");
        r.magic(RKMEANS_MAGIC)?;
        let version = r.u32()?;
        if version != RKMEANS_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: RKMEANS_VERSION });
        }
        let (t, v, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if t == 0 || v == 0 || d == 0 {
            return Err(Error::InvalidArgument("r-kmeans model with an empty dimension".into()));
        }
        let expected = t.checked_mul(v).and_then(|x| x.checked_mul(d)).and_then(|x| x.checked_mul(4));
        if expected != Some(r.remaining()) {
            return Err(Error::Truncated(format!("expected {t}x{v}x{d} centroids, found {} bytes", r.remaining())));
        }
        let centroids = (0..t)
            .map(|_| {
                let data = (0..v * d).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
                Ok(Array2::from_shape_vec((v, d), data).expect("shape"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { centroids })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Semantic ID of one embedding; always `T` tokens.
pub fn rkmeans_encode(x: ArrayView1<'_, f64>, model: &RKMeansModel) -> SemanticId {
    SemanticId { tokens: model.encode_path(x) }
}

impl SemanticCoder for RKMeansModel {
    fn max_len(&self) -> usize {
        self.levels()
    }

    fn encode_full(&self, x: &Array2<f64>) -> Result<Vec<(Vec<u32>, usize)>> {
        Ok(x.rows().into_iter().map(|row| (self.encode_path(row), self.levels())).collect())
    }

    /// Raw centroid sums (not renormalized), so each extra level can only
    /// refine the training residuals.
    fn reconstruct(&self, prefixes: &[Vec<u32>]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((prefixes.len(), self.dim()));
        for (r, p) in prefixes.iter().enumerate() {
            for (o, v) in out.row_mut(r).iter_mut().zip(self.decode(p)) {
                *o = v;
            }
        }
        Ok(out)
    }
}
