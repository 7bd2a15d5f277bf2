//! Mated / non-mated comparison protocol and score-distribution metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curation::EmbeddingVector;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::scalar::Scalar;
use crate::seeding;

/// Equal-width histogram over [-1, 1]. Out-of-range scores land in the edge
/// bins; a score of exactly 1 belongs to the last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram<T> {
    pub bin_edges: Vec<T>,
    pub probabilities: Vec<T>,
}

impl<T: Scalar> Histogram<T> {
    pub fn new(scores: &[T], bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::input(format!("histogram needs >= 2 bins, got {bins}")));
        }
        if scores.is_empty() {
            return Err(Error::input("histogram of an empty score list"));
        }
        let mut counts = vec![0usize; bins];
        for &s in scores {
            if !s.is_finite() {
                return Err(Error::input("non-finite score"));
            }
            let pos = ((s.as_f64() + 1.0) / 2.0 * bins as f64).floor();
            let idx = pos.clamp(0.0, (bins - 1) as f64) as usize;
            counts[idx] += 1;
        }
        let n = T::of_usize(scores.len());
        Ok(Histogram {
            bin_edges: (0..=bins)
                .map(|i| T::of(-1.0 + 2.0 * i as f64 / bins as f64))
                .collect(),
            probabilities: counts.into_iter().map(|c| T::of_usize(c) / n).collect(),
        })
    }

    pub fn bins(&self) -> usize {
        self.probabilities.len()
    }

    pub fn centers(&self) -> impl Iterator<Item = T> + '_ {
        self.bin_edges.windows(2).map(|w| (w[0] + w[1]) / T::of(2.0))
    }

    /// Adds `epsilon` to every bin and renormalizes.
    pub fn smoothed(&self, epsilon: T) -> Vec<T> {
        let total = T::one() + T::of_usize(self.bins()) * epsilon;
        self.probabilities.iter().map(|&p| (p + epsilon) / total).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution<T> {
    pub scores: Vec<T>,
    pub mean: T,
    /// Population standard deviation.
    pub std: T,
    pub histogram: Histogram<T>,
}

impl<T: Scalar> ScoreDistribution<T> {
    pub fn new(scores: Vec<T>, bins: usize) -> Result<Self> {
        let histogram = Histogram::new(&scores, bins)?;
        let n = T::of_usize(scores.len());
        let mean = scores.iter().copied().sum::<T>() / n;
        let var = scores.iter().map(|&s| (s - mean) * (s - mean)).sum::<T>() / n;
        Ok(ScoreDistribution {
            scores,
            mean,
            std: var.sqrt(),
            histogram,
        })
    }

    /// `"0.67 ± 0.14"`.
    pub fn summary(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean.as_f64(), self.std.as_f64())
    }
}

/// `Σ p ln(p / q)` over smoothed masses: `epsilon` is added to every bin of
/// both distributions and each is renormalized.
pub fn kl_from_masses<T: Scalar>(p: &[T], q: &[T], epsilon: T) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            expected: p.len(),
            found: q.len(),
        });
    }
    if p.len() < 2 {
        return Err(Error::input("KL needs >= 2 bins"));
    }
    let k = T::of_usize(p.len());
    let sp = p.iter().copied().sum::<T>() + k * epsilon;
    let sq = q.iter().copied().sum::<T>() + k * epsilon;
    let mut kl = T::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        let a = (pi + epsilon) / sp;
        let b = (qi + epsilon) / sq;
        if a > T::zero() {
            kl = kl + a * (a / b).ln();
        }
    }
    // rounding can leave a tiny negative for near-identical inputs
    Ok(kl.max(T::zero()))
}

/// KL divergence in nats between the score histograms of `p` and `q`, on
/// `bins` shared equal-width bins over [-1, 1].
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T], bins: usize, epsilon: T) -> Result<T> {
    if bins < 2 {
        return Err(Error::input(format!("KL needs >= 2 bins, got {bins}")));
    }
    let hp = Histogram::new(p, bins)?;
    let hq = Histogram::new(q, bins)?;
    kl_from_masses(&hp.probabilities, &hq.probabilities, epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer<T> {
    pub eer: T,
    pub threshold: T,
}

fn fraction_at_or_above<T: Scalar>(sorted: &[T], t: T) -> T {
    let below = sorted.partition_point(|&s| s < t);
    T::of_usize(sorted.len() - below) / T::of_usize(sorted.len())
}

/// Equal error rate with `FMR(t) = P(nonmated >= t)` and
/// `FNMR(t) = P(mated < t)`, linearly interpolated between adjacent candidate
/// thresholds (the sorted distinct scores, plus one threshold above the
/// maximum where FMR = 0 and FNMR = 1).
pub fn compute_eer<T: Scalar>(mated: &[T], nonmated: &[T]) -> Result<Eer<T>> {
    if mated.is_empty() || nonmated.is_empty() {
        return Err(Error::input("EER needs nonempty mated and non-mated scores"));
    }
    if mated.iter().chain(nonmated).any(|s| !s.is_finite()) {
        return Err(Error::input("non-finite score"));
    }
    let sort = |v: &[T]| {
        let mut v = v.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    };
    let m = sort(mated);
    let n = sort(nonmated);
    let mut candidates: Vec<T> = m.iter().chain(&n).copied().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();

    let top = *candidates.last().expect("nonempty");
    let sentinel = top + T::one();

    let mut prev: Option<(T, T, T)> = None;
    for t in candidates.into_iter().chain(std::iter::once(sentinel)) {
        let (fmr, fnmr) = if t == sentinel {
            (T::zero(), T::one())
        } else {
            (fraction_at_or_above(&n, t), T::one() - fraction_at_or_above(&m, t))
        };
        let d = fmr - fnmr;
        if d == T::zero() {
            return Ok(Eer { eer: fmr, threshold: t });
        }
        if d < T::zero() {
            let (t0, fmr0, fnmr0) = prev.expect("FMR - FNMR is 1 at the lowest candidate");
            let d0 = fmr0 - fnmr0;
            let lambda = d0 / (d0 - d);
            return Ok(Eer {
                eer: fmr0 + lambda * (fmr - fmr0),
                threshold: t0 + lambda * (t - t0),
            });
        }
        prev = Some((t, fmr, fnmr));
    }
    unreachable!("the sentinel threshold always has FMR < FNMR")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparisonParams {
    pub per_identity: usize,
    pub mated_per_id: usize,
    pub nonmated_per_id: usize,
}

impl Default for ComparisonParams {
    fn default() -> Self {
        ComparisonParams {
            per_identity: 10,
            mated_per_id: 20,
            nonmated_per_id: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSet {
    pub dataset_id: String,
    pub seed: u64,
    pub n_identities: usize,
    pub skipped_identities: Vec<String>,
    pub mated: Vec<(String, String)>,
    pub nonmated: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Seeded mated / non-mated pair sampling. `dataset` maps identity id to its
/// surviving sample ids. Identities with fewer than `per_identity` samples
/// are skipped and reported.
pub fn sample_comparisons(
    dataset_id: &str,
    dataset: &BTreeMap<String, Vec<String>>,
    params: &ComparisonParams,
    seed: u64,
) -> Result<ComparisonSet> {
    if params.per_identity < 2 {
        return Err(Error::input("per_identity must be >= 2"));
    }
    let mut warnings = Vec::new();
    let mut skipped = Vec::new();
    let mut selected: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (k, (id, samples)) in dataset.iter().enumerate() {
        let mut unique: Vec<&str> = samples.iter().map(String::as_str).collect();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() < params.per_identity {
            skipped.push(id.clone());
            continue;
        }
        let mut rng = seeding::derived_rng(seed, "select", k as u64);
        unique.shuffle(&mut rng);
        unique.truncate(params.per_identity);
        unique.sort_unstable();
        selected.insert(id, unique);
    }
    if !skipped.is_empty() {
        warnings.push(format!(
            "{} identities have fewer than {} samples and were skipped",
            skipped.len(),
            params.per_identity
        ));
    }
    if selected.len() < 2 {
        return Err(Error::input(format!(
            "need >= 2 identities with {} samples, found {}",
            params.per_identity,
            selected.len()
        )));
    }

    let possible = params.per_identity * (params.per_identity - 1) / 2;
    let mated_per_id = if params.mated_per_id > possible {
        warnings.push(format!(
            "mated_per_id {} exceeds the {possible} possible pairs; capped",
            params.mated_per_id
        ));
        possible
    } else {
        params.mated_per_id
    };

    let ids: Vec<&str> = selected.keys().copied().collect();
    let mut mated = Vec::new();
    let mut nonmated = Vec::new();
    let mut seen_nonmated: BTreeSet<(String, String)> = BTreeSet::new();
    for (k, id) in ids.iter().enumerate() {
        let mut rng = seeding::derived_rng(seed, "pairs", k as u64);
        let imgs = &selected[id];
        let mut all_pairs = Vec::with_capacity(possible);
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                all_pairs.push((imgs[i].to_string(), imgs[j].to_string()));
            }
        }
        all_pairs.shuffle(&mut rng);
        all_pairs.truncate(mated_per_id);
        mated.extend(all_pairs);

        let mut drawn = 0;
        let mut attempts = 0;
        let max_attempts = 100 * params.nonmated_per_id.max(1);
        while drawn < params.nonmated_per_id && attempts < max_attempts {
            attempts += 1;
            let other = loop {
                let o = ids[rng.random_range(0..ids.len())];
                if o != *id {
                    break o;
                }
            };
            let a = imgs.choose(&mut rng).expect("nonempty");
            let b = selected[other].choose(&mut rng).expect("nonempty");
            let pair = ordered(a, b);
            if seen_nonmated.insert(pair.clone()) {
                nonmated.push(pair);
                drawn += 1;
            }
        }
        if drawn < params.nonmated_per_id {
            warnings.push(format!(
                "identity `{id}`: only {drawn} distinct non-mated pairs available"
            ));
        }
    }

    Ok(ComparisonSet {
        dataset_id: dataset_id.to_string(),
        seed,
        n_identities: selected.len(),
        skipped_identities: skipped,
        mated,
        nonmated,
        warnings,
    })
}

/// Cosine similarity of every pair, reduced in list order.
pub fn score_comparisons<T: Scalar>(
    set: &ComparisonSet,
    embeddings: &BTreeMap<String, EmbeddingVector<T>>,
    bins: usize,
) -> Result<(ScoreDistribution<T>, ScoreDistribution<T>)> {
    let score = |pairs: &[(String, String)]| -> Result<Vec<T>> {
        pairs
            .par_iter()
            .map(|(a, b)| {
                let ea = embeddings
                    .get(a)
                    .ok_or_else(|| Error::data(format!("no embedding for sample `{a}`")))?;
                let eb = embeddings
                    .get(b)
                    .ok_or_else(|| Error::data(format!("no embedding for sample `{b}`")))?;
                ea.cosine(eb)
            })
            .collect()
    };
    let mated = ScoreDistribution::new(score(&set.mated)?, bins)?;
    let nonmated = ScoreDistribution::new(score(&set.nonmated)?, bins)?;
    Ok((mated, nonmated))
}

#[derive(Debug, Clone)]
pub struct DatasetScores<T> {
    pub name: String,
    pub n_identities: usize,
    pub mated: ScoreDistribution<T>,
    pub nonmated: ScoreDistribution<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub dataset: String,
    pub n_identities: usize,
    pub mated_mean: f64,
    pub mated_std: f64,
    pub nonmated_mean: f64,
    pub nonmated_std: f64,
    pub eer: f64,
    pub kl_mated: Vec<(String, f64)>,
    pub kl_nonmated: Vec<(String, f64)>,
    pub mated_summary: String,
    pub nonmated_summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionReport {
    pub bins: usize,
    pub epsilon: f64,
    pub references: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// One row per dataset with mean ± std, EER and a KL column pair per
/// reference dataset.
pub fn distribution_report<T: Scalar>(
    datasets: &[DatasetScores<T>],
    references: &[String],
    bins: usize,
    epsilon: f64,
) -> Result<DistributionReport> {
    let by_name: BTreeMap<&str, &DatasetScores<T>> =
        datasets.iter().map(|d| (d.name.as_str(), d)).collect();
    let refs = references
        .iter()
        .map(|r| {
            by_name
                .get(r.as_str())
                .copied()
                .ok_or_else(|| Error::config(format!("unknown reference dataset `{r}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let eps = T::of(epsilon);
    let rows = datasets
        .iter()
        .map(|d| {
            let eer = compute_eer(&d.mated.scores, &d.nonmated.scores)?;
            let mut kl_mated = Vec::new();
            let mut kl_nonmated = Vec::new();
            for r in &refs {
                kl_mated.push((
                    r.name.clone(),
                    kl_divergence(&d.mated.scores, &r.mated.scores, bins, eps)?.as_f64(),
                ));
                kl_nonmated.push((
                    r.name.clone(),
                    kl_divergence(&d.nonmated.scores, &r.nonmated.scores, bins, eps)?.as_f64(),
                ));
            }
            Ok(ReportRow {
                dataset: d.name.clone(),
                n_identities: d.n_identities,
                mated_mean: d.mated.mean.as_f64(),
                mated_std: d.mated.std.as_f64(),
                nonmated_mean: d.nonmated.mean.as_f64(),
                nonmated_std: d.nonmated.std.as_f64(),
                eer: eer.eer.as_f64(),
                kl_mated,
                kl_nonmated,
                mated_summary: d.mated.summary(),
                nonmated_summary: d.nonmated.summary(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DistributionReport {
        bins,
        epsilon,
        references: references.to_vec(),
        rows,
    })
}

impl DistributionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "# kl: equal-width histogram on [-1,1], bins={}, epsilon={}; eer: linear interpolation at FMR=FNMR; std: population",
            self.bins, self.epsilon
        )
        .unwrap();
        out.push_str("dataset,n_identities,mated_mean,mated_std,nonmated_mean,nonmated_std,eer");
        for r in &self.references {
            write!(out, ",kl_mated_vs_{r}").unwrap();
        }
        for r in &self.references {
            write!(out, ",kl_nonmated_vs_{r}").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{},{}",
                row.dataset,
                row.n_identities,
                row.mated_mean,
                row.mated_std,
                row.nonmated_mean,
                row.nonmated_std,
                row.eer
            )
            .unwrap();
            for (_, v) in row.kl_mated.iter().chain(&row.kl_nonmated) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable table with `mean ± std` cells.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| Dataset | Id. | Mated scores | Non-mated scores | EER |");
        for r in &self.references {
            write!(out, " KL mated vs {r} |").unwrap();
        }
        for r in &self.references {
            write!(out, " KL non-mated vs {r} |").unwrap();
        }
        out.push('\n');
        out.push_str("|---|---|---|---|---|");
        for _ in 0..2 * self.references.len() {
            out.push_str("---|");
        }
        out.push('\n');
        for row in &self.rows {
            write!(
                out,
                "| {} | {} | {} | {} | {:.2}% |",
                row.dataset,
                row.n_identities,
                row.mated_summary,
                row.nonmated_summary,
                100.0 * row.eer
            )
            .unwrap();
            for (_, v) in row.kl_mated.iter().chain(&row.kl_nonmated) {
                write!(out, " {v:.2} |").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// `bin_center,probability,series` rows for external plotting.
pub fn histogram_csv<T: Scalar>(d: &DatasetScores<T>) -> String {
    let mut out = String::from("bin_center,probability,series\n");
    for (series, dist) in [("mated", &d.mated), ("nonmated", &d.nonmated)] {
        for (c, p) in dist.histogram.centers().zip(&dist.histogram.probabilities) {
            writeln!(out, "{},{},{series}", c.as_f64(), p.as_f64()).unwrap();
        }
    }
    out
}

/// Writes `report.csv`, `report.md` and one histogram file per dataset.
pub fn write_report<T: Scalar>(
    dir: &Path,
    report: &DistributionReport,
    datasets: &[DatasetScores<T>],
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let csv = dir.join("report.csv");
    fsutil::write_atomic(&csv, report.to_csv().as_bytes())?;
    written.push(csv);
    let md = dir.join("report.md");
    fsutil::write_atomic(&md, report.to_markdown().as_bytes())?;
    written.push(md);
    for d in datasets {
        let p = dir.join("histograms").join(format!("{}.csv", d.name));
        fsutil::write_atomic(&p, histogram_csv(d).as_bytes())?;
        written.push(p);
    }
    Ok(written)
}
