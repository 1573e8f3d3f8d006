//! Reference implementations used as oracles by the integration tests.
//! They are deliberately naive and share no code with the library.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mskd::data::{generate_synthetic, Dataset, SynthConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_dataset(seed: u64, ids: usize) -> Dataset {
    let cfg = SynthConfig {
        num_identities: ids,
        instances_per_identity: 10,
        query_per_identity: 1,
        gallery_per_identity: 2,
        seed,
        ..Default::default()
    };
    generate_synthetic(&cfg, &mut rng(seed)).unwrap()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        self.parent[x] = r;
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// DBSCAN by connected components of core points.
///
/// Components are numbered by their smallest core index (the order a
/// left-to-right scan meets them). A border point belongs to the
/// lowest-numbered component among its core neighbors.
pub fn brute_force_dbscan(d: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = d.len();
    let count = |i: usize| (0..n).filter(|&j| d[i][j] <= eps).count();
    let core: Vec<bool> = (0..n).map(|i| count(i) >= min_pts).collect();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && d[i][j] <= eps {
                uf.union(i, j);
            }
        }
    }
    let mut roots: Vec<usize> = (0..n).filter(|&i| core[i]).map(|i| uf.find(i)).collect();
    roots.sort_unstable();
    roots.dedup();
    let rank = |root: usize| roots.iter().position(|&r| r == root).unwrap();
    (0..n)
        .map(|i| {
            if core[i] {
                Some(rank(uf.find(i)))
            } else {
                (0..n)
                    .filter(|&j| core[j] && d[i][j] <= eps)
                    .map(|j| rank(uf.find(j)))
                    .min()
            }
        })
        .collect()
}

#[derive(Debug)]
pub struct NaiveReport {
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    pub skipped: usize,
}

/// Retrieval metrics computed the slow way: every gallery item gets a
/// distance and an explicit position, and AP is the mean of `i / rank_i`
/// over the positions of the matches.
pub fn naive_evaluate(
    q: &[Vec<f64>],
    qmeta: &[(Option<u32>, u32)],
    g: &[Vec<f64>],
    gmeta: &[(Option<u32>, u32)],
) -> NaiveReport {
    let mut aps = Vec::new();
    let mut first_hits = Vec::new();
    let mut skipped = 0;
    for (qi, qv) in q.iter().enumerate() {
        let (qid, qcam) = qmeta[qi];
        let Some(qid) = qid else {
            skipped += 1;
            continue;
        };
        let mut kept: Vec<(f64, usize)> = Vec::new();
        for (gi, gv) in g.iter().enumerate() {
            let (gid, gcam) = gmeta[gi];
            if gid == Some(qid) && gcam == qcam {
                continue;
            }
            let mut s = 0.0;
            for k in 0..qv.len() {
                s += qv[k] * gv[k];
            }
            kept.push((1.0 - s, gi));
        }
        // Insertion sort on (distance, gallery index).
        for i in 1..kept.len() {
            let mut j = i;
            while j > 0 && (kept[j - 1].0 > kept[j].0 || (kept[j - 1].0 == kept[j].0 && kept[j - 1].1 > kept[j].1)) {
                kept.swap(j - 1, j);
                j -= 1;
            }
        }
        let ranks: Vec<usize> = kept
            .iter()
            .enumerate()
            .filter(|(_, (_, gi))| gmeta[*gi].0 == Some(qid))
            .map(|(pos, _)| pos + 1)
            .collect();
        if ranks.is_empty() {
            skipped += 1;
            continue;
        }
        let ap = ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| (i + 1) as f64 / r as f64)
            .sum::<f64>()
            / ranks.len() as f64;
        aps.push(ap);
        first_hits.push(ranks[0]);
    }
    let n = aps.len();
    let map = if n == 0 { 0.0 } else { aps.iter().sum::<f64>() / n as f64 };
    let cmc = [1usize, 5, 10]
        .into_iter()
        .map(|r| {
            let hits = first_hits.iter().filter(|&&f| f <= r).count();
            (r, if n == 0 { 0.0 } else { hits as f64 / n as f64 })
        })
        .collect();
    NaiveReport { map, cmc, skipped }
}

/// Central differences with an explicit loop over coordinates.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Worst coordinate-wise relative error, with a floor of 1e-3 times the
/// largest gradient magnitude so that near-zero entries are judged on an
/// absolute scale.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let scale = a.iter().chain(n).map(|v| v.abs()).fold(0.0, f64::max);
    let floor = (scale * 1e-3).max(1e-10);
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, |m, e| if e.is_nan() || m.is_nan() { f64::NAN } else { m.max(e) })
}

pub fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}
