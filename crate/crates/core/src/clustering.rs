//! Day-period traffic profiles and K-means clustering of cells.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::trace::{SteppedTrace, MS_PER_DAY, MS_PER_HOUR};

pub const N_PERIODS: usize = 6;

/// Four-hour wall-clock periods starting at midnight.
pub const PERIOD_NAMES: [&str; N_PERIODS] = [
    "late_night",
    "early_morning",
    "morning",
    "afternoon",
    "evening",
    "night",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodProfile {
    pub cell_id: u32,
    pub features: [f64; N_PERIODS],
}

/// Mean activity per day in each of the six periods, for every cell.
///
/// A period's sum on a given local day is averaged over the days on which that
/// period was observed at all, so traces that start or end mid-day do not
/// deflate the boundary periods.
pub fn compute_period_profiles(
    trace: &SteppedTrace,
    utc_offset_hours: f64,
) -> Result<Vec<PeriodProfile>> {
    let span_ms = trace.n_steps() as i64 * i64::from(trace.step_duration_s()) * 1000;
    if span_ms < MS_PER_DAY {
        return Err(Error::Clustering(format!(
            "trace covers {:.2} h, need at least one day",
            span_ms as f64 / MS_PER_HOUR as f64
        )));
    }
    let offset_ms = (utc_offset_hours * MS_PER_HOUR as f64).round() as i64;
    let n = trace.n_cells();
    let mut sums = vec![[0.0; N_PERIODS]; n];
    let mut seen: [HashSet<i64>; N_PERIODS] = Default::default();
    for (step, row) in trace.rows().enumerate() {
        let local = trace.step_start_ms(step) + offset_ms;
        let day = local.div_euclid(MS_PER_DAY);
        let period = (local.rem_euclid(MS_PER_DAY) / (4 * MS_PER_HOUR)) as usize;
        seen[period].insert(day);
        for (acc, v) in sums.iter_mut().zip(row) {
            acc[period] += v;
        }
    }
    Ok(trace
        .cell_ids()
        .iter()
        .zip(sums)
        .map(|(&cell_id, mut features)| {
            for (f, days) in features.iter_mut().zip(&seen) {
                if !days.is_empty() {
                    *f /= days.len() as f64;
                }
            }
            PeriodProfile { cell_id, features }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<[f64; N_PERIODS]>,
    pub assignments: BTreeMap<u32, usize>,
    pub sse: f64,
    pub seed: u64,
}

impl ClusterModel {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in self.assignments.values() {
            sizes[c] += 1;
        }
        sizes
    }

    /// Writes `cell_id,cluster_index` rows in ascending cell order.
    pub fn write_map_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "cell_id,cluster_index")?;
        for (cell, c) in &self.assignments {
            writeln!(out, "{cell},{c}")?;
        }
        Ok(())
    }
}

pub fn sq_dist(a: &[f64; N_PERIODS], b: &[f64; N_PERIODS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(p: &[f64; N_PERIODS], centroids: &[[f64; N_PERIODS]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

struct Fit {
    centroids: Vec<[f64; N_PERIODS]>,
    labels: Vec<usize>,
    sse: f64,
}

fn kmeans_pp_seed(points: &[[f64; N_PERIODS]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; N_PERIODS]> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.push(points[first]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every remaining point coincides with a centroid
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        centroids.push(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
    }
    centroids
}

fn lloyd(points: &[[f64; N_PERIODS]], mut centroids: Vec<[f64; N_PERIODS]>, cfg: &KMeansConfig) -> Fit {
    let k = centroids.len();
    let mut labels = vec![0usize; points.len()];
    for _ in 0..cfg.max_iter {
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(p, &centroids).0;
        }
        let mut sums = vec![[0.0; N_PERIODS]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        // Empty clusters take the point farthest from its own centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let (far, _) = labels
                    .iter()
                    .zip(points)
                    .enumerate()
                    .filter(|(_, (&l, _))| counts[l] > 1)
                    .map(|(i, (&l, p))| (i, sq_dist(p, &centroids[l])))
                    .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                if far == usize::MAX {
                    continue;
                }
                let old = labels[far];
                counts[old] -= 1;
                for (s, v) in sums[old].iter_mut().zip(&points[far]) {
                    *s -= v;
                }
                labels[far] = c;
                counts[c] = 1;
                sums[c] = points[far];
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mut next = sums[c];
            for v in next.iter_mut() {
                *v /= counts[c] as f64;
            }
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < cfg.tol {
            break;
        }
    }
    // Final assignment against the final centroids so every label is optimal.
    let mut sse = 0.0;
    for (l, p) in labels.iter_mut().zip(points) {
        let (c, d) = nearest(p, &centroids);
        *l = c;
        sse += d;
    }
    Fit {
        centroids,
        labels,
        sse,
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::Clustering(format!("k = {k} with {n} profiles")));
    }
    Ok(())
}

fn best_of_restarts(points: &[[f64; N_PERIODS]], k: usize, seed: u64, cfg: &KMeansConfig) -> Fit {
    let restarts = cfg.restarts.max(1);
    let fits: Vec<Fit> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "kmeans", (k * 1_000 + r) as u64));
            lloyd(points, kmeans_pp_seed(points, k, &mut rng), cfg)
        })
        .collect();
    pick_best(fits)
}

fn pick_best(fits: Vec<Fit>) -> Fit {
    // strict `<` keeps the lowest restart index on ties
    fits.into_iter()
        .reduce(|best, f| if f.sse < best.sse { f } else { best })
        .expect("at least one fit")
}

fn into_model(profiles: &[PeriodProfile], k: usize, seed: u64, fit: Fit) -> ClusterModel {
    ClusterModel {
        k,
        centroids: fit.centroids,
        assignments: profiles
            .iter()
            .zip(fit.labels)
            .map(|(p, l)| (p.cell_id, l))
            .collect(),
        sse: fit.sse,
        seed,
    }
}

/// Lloyd's algorithm from k-means++ seeding, best of `cfg.restarts` runs.
pub fn kmeans_fit(
    profiles: &[PeriodProfile],
    k: usize,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<ClusterModel> {
    check_k(profiles.len(), k)?;
    let points: Vec<_> = profiles.iter().map(|p| p.features).collect();
    let fit = best_of_restarts(&points, k, seed, cfg);
    Ok(into_model(profiles, k, seed, fit))
}

/// `(k, sse)` for every k in `k_range`, in order.
///
/// Besides the random restarts, each k > first also runs Lloyd from the
/// previous k's best centroids plus the worst-fitting point, which makes the
/// reported sse non-increasing in k.
pub fn elbow_scan(
    profiles: &[PeriodProfile],
    k_range: RangeInclusive<usize>,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<Vec<(usize, f64)>> {
    let (lo, hi) = (*k_range.start(), *k_range.end());
    check_k(profiles.len(), lo)?;
    check_k(profiles.len(), hi)?;
    let points: Vec<_> = profiles.iter().map(|p| p.features).collect();
    let mut out = Vec::with_capacity(hi.saturating_sub(lo) + 1);
    let mut prev: Option<Fit> = None;
    for k in k_range {
        let mut best = best_of_restarts(&points, k, seed, cfg);
        if let Some(p) = &prev {
            let (worst, _) = p
                .labels
                .iter()
                .zip(&points)
                .enumerate()
                .map(|(i, (&l, x))| (i, sq_dist(x, &p.centroids[l])))
                .fold((0, -1.0), |b, c| if c.1 > b.1 { c } else { b });
            let mut init = p.centroids.clone();
            init.push(points[worst]);
            let warm = lloyd(&points, init, cfg);
            best = pick_best(vec![best, warm]);
        }
        out.push((k, best.sse));
        prev = Some(best);
    }
    Ok(out)
}

/// Suggested elbow: the point of the normalised `(k, sse)` curve farthest
/// below the chord joining its endpoints.
pub fn suggest_elbow(scan: &[(usize, f64)]) -> Option<usize> {
    let (&(k0, s0), &(k1, s1)) = (scan.first()?, scan.last()?);
    if scan.len() < 3 || k1 == k0 || s0 == s1 {
        return None;
    }
    let norm = |&(k, s): &(usize, f64)| {
        (
            (k - k0) as f64 / (k1 - k0) as f64,
            (s - s1) / (s0 - s1),
        )
    };
    scan.iter()
        .map(|pt| {
            let (x, y) = norm(pt);
            // chord runs from (0, 1) to (1, 0)
            (pt.0, 1.0 - x - y)
        })
        .fold(None, |best: Option<(usize, f64)>, cur| match best {
            Some(b) if b.1 >= cur.1 => Some(b),
            _ => Some(cur),
        })
        .map(|(k, _)| k)
}

pub fn write_elbow_csv<W: Write>(mut out: W, scan: &[(usize, f64)]) -> std::io::Result<()> {
    writeln!(out, "k,sse")?;
    for (k, sse) in scan {
        writeln!(out, "{k},{sse}")?;
    }
    Ok(())
}

/// Cells assigned to `cluster_index`, ascending.
pub fn select_cells(model: &ClusterModel, cluster_index: usize) -> Result<Vec<u32>> {
    if cluster_index >= model.k {
        return Err(Error::Clustering(format!(
            "cluster {cluster_index} out of range for k = {}",
            model.k
        )));
    }
    // BTreeMap iteration is already ascending by cell id
    Ok(model
        .assignments
        .iter()
        .filter(|(_, &c)| c == cluster_index)
        .map(|(&cell, _)| cell)
        .collect())
}
