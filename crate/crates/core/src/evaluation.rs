//! Reconstruction, vocabulary-usage and code-length statistics for any
//! semantic-ID model, plus the report files.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::catalog::{normalize_embeddings, slice_distributions, Catalog, ItemDistribution, Slice};
use crate::decoder::{decode_values, reconstruction_error};
use crate::encoder::SemanticId;
use crate::error::{Error, Result};
use crate::model::DvaeModel;
use crate::rng::{stream, Stream};

/// Rows handled per encoder/decoder call.
const EVAL_CHUNK: usize = 1024;

/// What evaluation needs from a tokenizer.
pub trait SemanticCoder {
    fn max_len(&self) -> usize;

    /// For each row of unit-norm `x`: the full `T`-token greedy path and the
    /// length the model itself would stop at.
    fn encode_full(&self, x: &Array2<f64>) -> Result<Vec<(Vec<u32>, usize)>>;

    /// Reconstructions from token prefixes, all of one length.
    fn reconstruct(&self, prefixes: &[Vec<u32>]) -> Result<Array2<f64>>;
}

/// Decodes hard prefixes with a prefix decoder over a `vocab`-way input.
pub(crate) fn decode_hard_prefixes(
    store: &crate::nn::ParamStore,
    decoder: &crate::decoder::DecoderParams,
    vocab: usize,
    prefixes: &[Vec<u32>],
) -> Result<Array2<f64>> {
    let k = prefixes.first().map_or(0, Vec::len);
    if prefixes.iter().any(|p| p.len() != k) {
        return Err(Error::ShapeMismatch("prefixes must share one length".into()));
    }
    let messages: Vec<Array2<f64>> = (0..k)
        .map(|t| {
            let mut m = Array2::zeros((prefixes.len(), vocab));
            for (r, p) in prefixes.iter().enumerate() {
                m[[r, p[t] as usize]] = 1.0;
            }
            m
        })
        .collect();
    let mut out = decode_values(store, decoder, &messages)?;
    Ok(out.pop().expect("k >= 1"))
}

impl SemanticCoder for DvaeModel {
    fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    fn encode_full(&self, x: &Array2<f64>) -> Result<Vec<(Vec<u32>, usize)>> {
        self.encode_hard_full(x)
    }

    fn reconstruct(&self, prefixes: &[Vec<u32>]) -> Result<Array2<f64>> {
        decode_hard_prefixes(&self.store, &self.decoder, self.cfg.vocab, prefixes)
    }
}

/// Unit-norm catalog embeddings in `f64`.
pub fn unit_embeddings(catalog: &Catalog) -> Result<Array2<f64>> {
    Ok(normalize_embeddings(catalog)?.embeddings().mapv(f64::from))
}

/// Full paths and own lengths for `items`, in order.
pub fn encode_items<M: SemanticCoder + ?Sized>(model: &M, emb: &Array2<f64>, items: &[usize]) -> Result<Vec<(Vec<u32>, usize)>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_CHUNK) {
        let x = Array2::from_shape_fn((chunk.len(), emb.ncols()), |(r, j)| emb[[chunk[r], j]]);
        out.extend(model.encode_full(&x)?);
    }
    Ok(out)
}

/// Semantic IDs truncated to each model-chosen length.
pub fn ids_from_paths(paths: &[(Vec<u32>, usize)]) -> Vec<SemanticId> {
    paths.iter().map(|(p, l)| SemanticId { tokens: p[..*l].to_vec() }).collect()
}

/// Reconstruction error of each item from `paths[i][..lengths[i]]`.
fn prefix_errors<M: SemanticCoder + ?Sized>(
    model: &M,
    emb: &Array2<f64>,
    items: &[usize],
    paths: &[(Vec<u32>, usize)],
    lengths: &[usize],
) -> Result<Vec<f64>> {
    let mut errors = vec![0.0; items.len()];
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, &l) in lengths.iter().enumerate() {
        by_len.entry(l).or_default().push(pos);
    }
    for (l, positions) in by_len {
        for chunk in positions.chunks(EVAL_CHUNK) {
            let prefixes: Vec<Vec<u32>> = chunk.iter().map(|&p| paths[p].0[..l].to_vec()).collect();
            let rec = model.reconstruct(&prefixes)?;
            for (r, &p) in chunk.iter().enumerate() {
                let x = emb.row(items[p]);
                errors[p] = reconstruction_error(x.as_slice().unwrap(), rec.row(r).as_slice().unwrap());
            }
        }
    }
    Ok(errors)
}

fn support(dist: &ItemDistribution) -> Result<Vec<usize>> {
    let items: Vec<usize> = dist.support().collect();
    if items.is_empty() {
        return Err(Error::EmptySlice);
    }
    Ok(items)
}

fn weighted_mean(items: &[usize], values: &[f64], dist: &ItemDistribution) -> f64 {
    let total: f64 = items.iter().map(|&i| dist.weights[i]).sum();
    items.iter().zip(values).map(|(&i, v)| dist.weights[i] * v).sum::<f64>() / total
}

/// `dist`-weighted error of each item's reconstruction from its own hard
/// prefix (length chosen by the model).
pub fn eval_reconstruction<M: SemanticCoder + ?Sized>(model: &M, catalog: &Catalog, dist: &ItemDistribution) -> Result<f64> {
    let items = support(dist)?;
    let emb = unit_embeddings(catalog)?;
    let paths = encode_items(model, &emb, &items)?;
    let lengths: Vec<usize> = paths.iter().map(|p| p.1).collect();
    let errors = prefix_errors(model, &emb, &items, &paths, &lengths)?;
    Ok(weighted_mean(&items, &errors, dist))
}

/// Entry `k - 1` is the `dist`-weighted error when every item is decoded
/// from its first `k` tokens, ignoring the model's own stopping.
pub fn prefix_recon_table<M: SemanticCoder + ?Sized>(model: &M, catalog: &Catalog, dist: &ItemDistribution) -> Result<Vec<f64>> {
    let items = support(dist)?;
    let emb = unit_embeddings(catalog)?;
    let paths = encode_items(model, &emb, &items)?;
    (1..=model.max_len())
        .map(|k| {
            let errors = prefix_errors(model, &emb, &items, &paths, &vec![k; items.len()])?;
            Ok(weighted_mean(&items, &errors, dist))
        })
        .collect()
}

fn exp_entropy<'a>(tokens: impl Iterator<Item = &'a u32>) -> Option<f64> {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    let mut total = 0usize;
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return None;
    }
    let n = total as f64;
    let h: f64 = counts.values().map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum();
    Some(h.exp())
}

/// Exponentiated entropy of the token distribution pooled over all
/// positions; 1.0 for an empty collection.
pub fn micro_ppl(ids: &[SemanticId]) -> f64 {
    exp_entropy(ids.iter().flat_map(|id| id.tokens.iter())).unwrap_or(1.0)
}

/// Number of ids long enough to have a token at each position `1..=T`.
pub fn participation(ids: &[SemanticId], max_len: usize) -> Vec<usize> {
    (0..max_len).map(|t| ids.iter().filter(|id| id.tokens.len() > t).count()).collect()
}

/// Per-position exponentiated entropy over the ids that reach that
/// position; `None` where no id does.
pub fn positional_ppl(ids: &[SemanticId], max_len: usize) -> Vec<Option<f64>> {
    (0..max_len).map(|t| exp_entropy(ids.iter().filter_map(|id| id.tokens.get(t)))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthBucket {
    pub length: usize,
    pub mean_popularity: f64,
    pub max_popularity: u64,
    pub count: usize,
}

/// Popularity statistics of `items` grouped by code length `1..=T`.
/// Empty buckets report zero popularity.
pub fn length_popularity_table(ids: &[SemanticId], catalog: &Catalog, items: &[usize], max_len: usize) -> Vec<LengthBucket> {
    let mut buckets: Vec<LengthBucket> =
        (1..=max_len).map(|length| LengthBucket { length, mean_popularity: 0.0, max_popularity: 0, count: 0 }).collect();
    let mut sums = vec![0u64; max_len];
    for (id, &item) in ids.iter().zip(items) {
        let l = id.length();
        let pop = catalog.popularity()[item];
        let b = &mut buckets[l - 1];
        b.count += 1;
        b.max_popularity = b.max_popularity.max(pop);
        sums[l - 1] += pop;
    }
    for (b, s) in buckets.iter_mut().zip(sums) {
        if b.count > 0 {
            b.mean_popularity = s as f64 / b.count as f64;
        }
    }
    buckets
}

/// `Σ_i dist[i] · L_i` with `ids` aligned to `items`.
pub fn avg_length(ids: &[SemanticId], items: &[usize], dist: &ItemDistribution) -> f64 {
    let total: f64 = items.iter().map(|&i| dist.weights[i]).sum();
    ids.iter().zip(items).map(|(id, &i)| dist.weights[i] * id.length() as f64).sum::<f64>() / total
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument("rank correlation needs at least 3 items".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::DegenerateRanks);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Rank correlation between item popularity and code length.
pub fn zla_spearman(ids: &[SemanticId], catalog: &Catalog, items: &[usize]) -> Result<f64> {
    let pop: Vec<f64> = items.iter().map(|&i| catalog.popularity()[i] as f64).collect();
    let len: Vec<f64> = ids.iter().map(|id| id.length() as f64).collect();
    spearman(&pop, &len)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetStats {
    pub avg_tokens: f64,
    pub avg_events: f64,
    /// One plus the mean candidate length (the extra unique-id token).
    pub l_cand: f64,
}

/// Each event costs its code length plus one unique-id token. Every user
/// keeps the longest suffix of their history that fits in `budget`.
/// `lengths` is indexed by item and doubles as the candidate set.
pub fn budget_stats(lengths: &[usize], histories: &[Vec<usize>], budget: usize) -> Result<BudgetStats> {
    if lengths.is_empty() {
        return Err(Error::EmptySlice);
    }
    let max_cost = lengths.iter().max().unwrap() + 1;
    if budget < max_cost {
        return Err(Error::InvalidArgument(format!("budget {budget} below the largest event cost {max_cost}")));
    }
    let l_cand = 1.0 + lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
    let mut tokens = 0usize;
    let mut events = 0usize;
    for history in histories {
        let mut used = 0;
        for &item in history.iter().rev() {
            let cost = lengths[item] + 1;
            if used + cost > budget {
                break;
            }
            used += cost;
            events += 1;
        }
        tokens += used;
    }
    let users = histories.len().max(1) as f64;
    Ok(BudgetStats { avg_tokens: tokens as f64 / users, avg_events: events as f64 / users, l_cand })
}

/// `n_users` histories of `length` events drawn i.i.d. from `dist`.
pub fn synthetic_histories(dist: &ItemDistribution, n_users: usize, length: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let sampler = WeightedIndex::new(&dist.weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = stream(seed, Stream::Histories);
    Ok((0..n_users).map(|_| (0..length).map(|_| sampler.sample(&mut rng)).collect()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub budget: usize,
    pub n_users: usize,
    pub history_len: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { budget: 512, n_users: 1000, history_len: 200, seed: 0 }
    }
}

/// Statistics of one slice (train or cold).
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStats {
    pub recon_data: f64,
    pub recon_uniform: f64,
    pub e_len_data: f64,
    pub e_len_catalog: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub max_len: usize,
    pub train: SliceStats,
    pub cold: Option<SliceStats>,
    pub micro_ppl: f64,
    pub positional_ppl: Vec<Option<f64>>,
    pub participation: Vec<usize>,
    pub length_buckets: Vec<LengthBucket>,
    /// `None` when every code has the same length.
    pub zla_spearman: Option<f64>,
    /// Data-weighted over the train slice.
    pub prefix_recon: Vec<f64>,
    pub budget: BudgetStats,
}

pub const REPORT_HEADER: &str = "# vsid eval report v1";
pub const BUCKETS_HEADER: &str = "# vsid length buckets v1";

fn slice_stats<M: SemanticCoder + ?Sized>(
    model: &M,
    emb: &Array2<f64>,
    items: &[usize],
    paths: &[(Vec<u32>, usize)],
    uniform: &ItemDistribution,
    data: &ItemDistribution,
) -> Result<SliceStats> {
    let lengths: Vec<usize> = paths.iter().map(|p| p.1).collect();
    let errors = prefix_errors(model, emb, items, paths, &lengths)?;
    let ids = ids_from_paths(paths);
    Ok(SliceStats {
        recon_data: weighted_mean(items, &errors, data),
        recon_uniform: weighted_mean(items, &errors, uniform),
        e_len_data: avg_length(&ids, items, data),
        e_len_catalog: avg_length(&ids, items, uniform),
    })
}

/// Runs the full metric suite. Token statistics, length buckets and the
/// rank correlation use the train slice; the budget candidates are all items.
pub fn evaluate<M: SemanticCoder + ?Sized>(model: &M, catalog: &Catalog, opts: &EvalOptions) -> Result<EvalReport> {
    let emb = unit_embeddings(catalog)?;
    let all: Vec<usize> = (0..catalog.n_items()).collect();
    let paths = encode_items(model, &emb, &all)?;
    let t = model.max_len();

    let (train_u, train_d) = slice_distributions(catalog, Slice::Train)?;
    let train_items = catalog.train_items();
    let train_paths: Vec<_> = train_items.iter().map(|&i| paths[i].clone()).collect();
    let train = slice_stats(model, &emb, &train_items, &train_paths, &train_u, &train_d)?;

    let cold = match slice_distributions(catalog, Slice::Cold) {
        Ok((u, d)) => {
            let items = catalog.cold_items();
            let p: Vec<_> = items.iter().map(|&i| paths[i].clone()).collect();
            Some(slice_stats(model, &emb, &items, &p, &u, &d)?)
        }
        Err(Error::EmptySlice | Error::NoInteractions) => None,
        Err(e) => return Err(e),
    };

    let train_ids = ids_from_paths(&train_paths);
    let zla = match zla_spearman(&train_ids, catalog, &train_items) {
        Ok(r) => Some(r),
        Err(Error::DegenerateRanks | Error::InvalidArgument(_)) => None,
        Err(e) => return Err(e),
    };
    let prefix_recon = (1..=t)
        .map(|k| {
            let errors = prefix_errors(model, &emb, &train_items, &train_paths, &vec![k; train_items.len()])?;
            Ok(weighted_mean(&train_items, &errors, &train_d))
        })
        .collect::<Result<Vec<f64>>>()?;
    let lengths: Vec<usize> = paths.iter().map(|p| p.1).collect();
    let histories = synthetic_histories(&train_d, opts.n_users, opts.history_len, opts.seed)?;
    let budget = budget_stats(&lengths, &histories, opts.budget)?;

    Ok(EvalReport {
        max_len: t,
        train,
        cold,
        micro_ppl: micro_ppl(&train_ids),
        positional_ppl: positional_ppl(&train_ids, t),
        participation: participation(&train_ids, t),
        length_buckets: length_popularity_table(&train_ids, catalog, &train_items, t),
        zla_spearman: zla,
        prefix_recon,
        budget,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl EvalReport {
    /// `metric<TAB>value` lines under a version header.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}\t{v}");
        };
        put("max_len", self.max_len.to_string());
        put("recon", self.train.recon_data.to_string());
        put("recon_uniform", self.train.recon_uniform.to_string());
        put("e_len_data", self.train.e_len_data.to_string());
        put("e_len_catalog", self.train.e_len_catalog.to_string());
        put("recon_cold", opt(self.cold.as_ref().map(|c| c.recon_data)));
        put("recon_cold_uniform", opt(self.cold.as_ref().map(|c| c.recon_uniform)));
        put("cold_e_len_data", opt(self.cold.as_ref().map(|c| c.e_len_data)));
        put("cold_e_len_catalog", opt(self.cold.as_ref().map(|c| c.e_len_catalog)));
        put("micro_ppl", self.micro_ppl.to_string());
        for (t, p) in self.positional_ppl.iter().enumerate() {
            put(&format!("positional_ppl@{}", t + 1), opt(*p));
        }
        for (t, n) in self.participation.iter().enumerate() {
            put(&format!("participation@{}", t + 1), n.to_string());
        }
        put("zla_spearman", opt(self.zla_spearman));
        for (k, r) in self.prefix_recon.iter().enumerate() {
            put(&format!("prefix_recon@{}", k + 1), r.to_string());
        }
        put("budget_tokens", self.budget.avg_tokens.to_string());
        put("budget_events", self.budget.avg_events.to_string());
        put("l_cand", self.budget.l_cand.to_string());
        format!("{REPORT_HEADER}\n{s}")
    }

    pub fn buckets_tsv(&self) -> String {
        let mut s = format!("{BUCKETS_HEADER}\nlength\tmean_popularity\tmax_popularity\tcount\n");
        for b in &self.length_buckets {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", b.length, b.mean_popularity, b.max_popularity, b.count);
        }
        s
    }

    /// Writes `<stem>.tsv` (metrics) and `<stem>.buckets.tsv`.
    pub fn write(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        fs::write(stem.with_extension("tsv"), self.to_kv())?;
        fs::write(stem.with_extension("buckets.tsv"), self.buckets_tsv())?;
        Ok(())
    }
}

/// Parses a `metric<TAB>value` file written by [`EvalReport::to_kv`].
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::InvalidArgument("missing report header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('\t')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::InvalidArgument(format!("malformed report line `{l}`")))
        })
        .collect()
}

/// Side-by-side table of named reports: reconstruction, perplexity and
/// average length under both distributions.
pub fn comparison_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut s = String::from("method\trecon\trecon_cold\tmicro_ppl\tE_data[L]\tE_catalog[L]\tcold_E_data[L]\n");
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{name}\t{:.4}\t{}\t{:.1}\t{:.2}\t{:.2}\t{}",
            r.train.recon_data,
            r.cold.as_ref().map_or("NA".into(), |c| format!("{:.4}", c.recon_data)),
            r.micro_ppl,
            r.train.e_len_data,
            r.train.e_len_catalog,
            r.cold.as_ref().map_or("NA".into(), |c| format!("{:.2}", c.e_len_data)),
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::DistributionKind;
    use ndarray::array;
    use proptest::prelude::*;

    /// Token = item index; reconstruction is exact.
    struct Lookup {
        emb: Array2<f64>,
    }

    impl SemanticCoder for Lookup {
        fn max_len(&self) -> usize {
            1
        }

        fn encode_full(&self, x: &Array2<f64>) -> Result<Vec<(Vec<u32>, usize)>> {
            Ok(x.rows()
                .into_iter()
                .map(|row| {
                    let i = self.emb.rows().into_iter().position(|e| e == row).unwrap();
                    (vec![i as u32], 1)
                })
                .collect())
        }

        fn reconstruct(&self, prefixes: &[Vec<u32>]) -> Result<Array2<f64>> {
            let mut out = Array2::zeros((prefixes.len(), self.emb.ncols()));
            for (r, p) in prefixes.iter().enumerate() {
                out.row_mut(r).assign(&self.emb.row(p[0] as usize));
            }
            Ok(out)
        }
    }

    /// Always reconstructs the first axis.
    struct Constant;

    impl SemanticCoder for Constant {
        fn max_len(&self) -> usize {
            2
        }

        fn encode_full(&self, x: &Array2<f64>) -> Result<Vec<(Vec<u32>, usize)>> {
            Ok(vec![(vec![0, 0], 2); x.nrows()])
        }

        fn reconstruct(&self, prefixes: &[Vec<u32>]) -> Result<Array2<f64>> {
            let mut out = Array2::zeros((prefixes.len(), 2));
            out.column_mut(0).fill(1.0);
            Ok(out)
        }
    }

    fn small_catalog() -> Catalog {
        let emb = array![[1.0f32, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.6, 0.8]];
        Catalog::new(emb, vec![6, 2, 0, 5], vec![false, false, false, true]).unwrap()
    }

    fn ids(lengths: &[usize]) -> Vec<SemanticId> {
        lengths.iter().map(|&l| SemanticId { tokens: vec![0; l] }).collect()
    }

    #[test]
    fn identity_model_has_zero_error() {
        let cat = small_catalog();
        let model = Lookup { emb: unit_embeddings(&cat).unwrap() };
        let (u, d) = slice_distributions(&cat, Slice::Train).unwrap();
        assert_eq!(eval_reconstruction(&model, &cat, &u).unwrap(), 0.0);
        assert_eq!(eval_reconstruction(&model, &cat, &d).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_weighting() {
        let cat = small_catalog();
        // errors vs (1, 0): item0 0, item1 2, item2 4, item3 (0.6,0.8) → 0.8
        let point = ItemDistribution::point(4, 2);
        assert!((eval_reconstruction(&Constant, &cat, &point).unwrap() - 4.0).abs() < 1e-12);
        let (u, d) = slice_distributions(&cat, Slice::Train).unwrap();
        let manual_u = (0.0 + 2.0 + 4.0) / 3.0;
        let manual_d = (6.0 * 0.0 + 2.0 * 2.0) / 8.0;
        assert!((eval_reconstruction(&Constant, &cat, &u).unwrap() - manual_u).abs() < 1e-9);
        assert!((eval_reconstruction(&Constant, &cat, &d).unwrap() - manual_d).abs() < 1e-9);
        let (_, cold) = slice_distributions(&cat, Slice::Cold).unwrap();
        assert!((eval_reconstruction(&Constant, &cat, &cold).unwrap() - 0.8).abs() < 1e-6);
        let empty = ItemDistribution { weights: vec![0.0; 4], kind: DistributionKind::CatalogUniform };
        assert!(matches!(eval_reconstruction(&Constant, &cat, &empty), Err(Error::EmptySlice)));
    }

    #[test]
    fn perplexity_cases() {
        let same = vec![SemanticId { tokens: vec![3, 3] }, SemanticId { tokens: vec![3] }];
        assert_eq!(micro_ppl(&same), 1.0);
        let two = vec![SemanticId { tokens: vec![0] }, SemanticId { tokens: vec![1] }];
        assert!((micro_ppl(&two) - 2.0).abs() < 1e-15);
        let all: Vec<SemanticId> = (0..4096).map(|t| SemanticId { tokens: vec![t] }).collect();
        assert!((micro_ppl(&all) - 4096.0).abs() < 1e-6);
        let ones = ids(&[1, 1, 1]);
        assert_eq!(positional_ppl(&ones, 3), vec![Some(1.0), None, None]);
        let fixed = ids(&[3, 3]);
        assert_eq!(participation(&fixed, 3), vec![2, 2, 2]);
    }

    #[test]
    fn length_cases() {
        let five = ids(&[5, 5, 5]);
        let d = ItemDistribution { weights: vec![0.2, 0.5, 0.3], kind: DistributionKind::DataUnigram };
        assert!((avg_length(&five, &[0, 1, 2], &d) - 5.0).abs() < 1e-12);
        let two = ids(&[1, 5]);
        let d = ItemDistribution { weights: vec![0.75, 0.25], kind: DistributionKind::DataUnigram };
        assert!((avg_length(&two, &[0, 1], &d) - 2.0).abs() < 1e-12);
        let u = ItemDistribution { weights: vec![0.25; 4], kind: DistributionKind::CatalogUniform };
        assert!((avg_length(&ids(&[1, 2, 4, 5]), &[0, 1, 2, 3], &u) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn buckets_partition_items() {
        let cat = small_catalog();
        let b = length_popularity_table(&ids(&[2, 2, 2, 2]), &cat, &[0, 1, 2, 3], 3);
        assert_eq!(b[1].count, 4);
        assert_eq!(b[0].count + b[2].count, 0);
        assert_eq!(b[1].max_popularity, 6);
        assert!((b[1].mean_popularity - 13.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_cases() {
        let pop = [10.0, 7.0, 3.0, 1.0];
        assert!((spearman(&pop, &[1.0, 2.0, 3.0, 4.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(spearman(&pop, &[2.0; 4]), Err(Error::DegenerateRanks)));
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
        // rank by counting: r_i = 1 + #{j: v_j < v_i} + (#{j != i: v_j == v_i}) / 2
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|a| {
                    let less = v.iter().filter(|b| *b < a).count() as f64;
                    let eq = v.iter().filter(|b| *b == a).count() as f64 - 1.0;
                    1.0 + less + eq / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(x), rank(y));
        let n = x.len() as f64;
        let mx = rx.iter().sum::<f64>() / n;
        let my = ry.iter().sum::<f64>() / n;
        let num: f64 = (0..x.len()).map(|i| (rx[i] - mx) * (ry[i] - my)).sum();
        let den = ((0..x.len()).map(|i| (rx[i] - mx).powi(2)).sum::<f64>()
            * (0..x.len()).map(|i| (ry[i] - my).powi(2)).sum::<f64>())
        .sqrt();
        num / den
    }

    #[test]
    fn budget_cases() {
        let fixed = vec![5usize; 10];
        let histories = vec![vec![0; 100], vec![3; 86]];
        let s = budget_stats(&fixed, &histories, 512).unwrap();
        assert_eq!(s.avg_events, 85.0);
        assert_eq!(s.avg_tokens, 510.0);
        assert_eq!(s.l_cand, 6.0);
        let s = budget_stats(&fixed, &[vec![]], 512).unwrap();
        assert_eq!((s.avg_tokens, s.avg_events, s.l_cand), (0.0, 0.0, 6.0));
        assert!(budget_stats(&fixed, &[], 5).is_err());
        // the suffix stops at the first event that does not fit
        let mixed = vec![1usize, 4];
        let s = budget_stats(&mixed, &[vec![0, 0, 1, 0]], 9).unwrap();
        assert_eq!((s.avg_tokens, s.avg_events), (9.0, 3.0));
    }

    #[test]
    fn report_round_trip() {
        let cat = small_catalog();
        let model = Lookup { emb: unit_embeddings(&cat).unwrap() };
        let report = evaluate(&model, &cat, &EvalOptions { n_users: 5, history_len: 10, ..Default::default() }).unwrap();
        let kv = parse_kv(&report.to_kv()).unwrap();
        assert_eq!(kv["recon"], "0");
        assert_eq!(kv["zla_spearman"], "NA");
        assert_eq!(kv["l_cand"], "2");
        assert!(report.buckets_tsv().starts_with(BUCKETS_HEADER));
        assert_eq!(report.length_buckets.iter().map(|b| b.count).sum::<usize>(), 3);
    }

    proptest! {
        #[test]
        fn spearman_matches_brute_force(
            pairs in proptest::collection::vec((0u32..20, 1usize..6), 3..60),
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            match spearman(&x, &y) {
                Ok(r) => {
                    prop_assert!((r - brute_spearman(&x, &y)).abs() < 1e-9);
                    prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
                }
                Err(Error::DegenerateRanks) => {
                    prop_assert!(x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]));
                }
                Err(e) => prop_assert!(false, "{e}"),
            }
        }

        #[test]
        fn participation_counts(lengths in proptest::collection::vec(1usize..6, 1..50)) {
            let ids: Vec<SemanticId> = lengths.iter().map(|&l| SemanticId { tokens: (0..l as u32).collect() }).collect();
            let counts = participation(&ids, 5);
            for t in 1..=5 {
                let mut n = 0;
                for &l in &lengths {
                    if l >= t {
                        n += 1;
                    }
                }
                prop_assert_eq!(counts[t - 1], n);
            }
            let ppl = micro_ppl(&ids);
            prop_assert!((1.0..=5.0 + 1e-9).contains(&ppl));
            for p in positional_ppl(&ids, 5).into_iter().flatten() {
                prop_assert!((1.0..=5.0 + 1e-9).contains(&p));
            }
        }

        #[test]
        fn budget_never_exceeded(lengths in proptest::collection::vec(1usize..6, 1..20), seed in 0u64..100, budget in 6usize..80) {
            let n = lengths.len();
            let d = ItemDistribution { weights: vec![1.0 / n as f64; n], kind: DistributionKind::CatalogUniform };
            let hist = synthetic_histories(&d, 20, 40, seed).unwrap();
            let s = budget_stats(&lengths, &hist, budget).unwrap();
            prop_assert!(s.avg_tokens <= budget as f64);
            for h in &hist {
                let one = budget_stats(&lengths, std::slice::from_ref(h), budget).unwrap();
                prop_assert!(one.avg_tokens <= budget as f64);
                // the next older event would not have fit
                let k = one.avg_events as usize;
                if k < h.len() {
                    prop_assert!(one.avg_tokens as usize + lengths[h[h.len() - 1 - k]] + 1 > budget);
                }
            }
        }
    }
}
