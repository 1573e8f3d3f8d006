//! Retrieval metrics (mAP, CMC) on global embeddings and clustering quality
//! against ground-truth identities.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::clustering::PseudoLabeling;
use crate::data::{Dataset, Instance, Split};
use crate::encoder::{forward, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::numerics::dot;

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub skipped: usize,
}

impl EvaluationReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.get(&1).copied().unwrap_or(0.0)
    }
}

/// Identity and camera of one retrieval item. `identity: None` is unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemMeta {
    pub identity: Option<u32>,
    pub camera: u32,
}

impl From<&Instance> for ItemMeta {
    fn from(i: &Instance) -> Self {
        Self {
            identity: i.identity,
            camera: i.camera,
        }
    }
}

/// Eval-mode global embeddings; the local branches are discarded.
pub fn extract_global(params: &EncoderParams, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    inputs
        .iter()
        .map(|x| forward(params, x, Mode::Eval).map(|(e, _)| e.global))
        .collect()
}

/// Mean over relevant positions of precision at that position. `None` when
/// nothing is relevant.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Ranks the gallery for every query by ascending cosine distance (ties by
/// gallery index), dropping gallery items that share both identity and camera
/// with the query. Queries with no relevant item left are skipped.
pub fn evaluate_embeddings(
    queries: &[Vec<f64>],
    query_meta: &[ItemMeta],
    gallery: &[Vec<f64>],
    gallery_meta: &[ItemMeta],
) -> Result<EvaluationReport> {
    if queries.len() != query_meta.len() || gallery.len() != gallery_meta.len() {
        return Err(Error::DimensionMismatch {
            expected: queries.len(),
            got: query_meta.len(),
        });
    }
    let mut ap_sum = 0.0;
    let mut hits = [0usize; CMC_RANKS.len()];
    let mut valid = 0usize;
    let mut skipped = 0usize;
    for (q, qm) in queries.iter().zip(query_meta) {
        let Some(qid) = qm.identity else {
            skipped += 1;
            continue;
        };
        let mut ranked: Vec<(f64, usize)> = gallery
            .iter()
            .enumerate()
            .filter(|(j, _)| {
                let gm = gallery_meta[*j];
                !(gm.identity == Some(qid) && gm.camera == qm.camera)
            })
            .map(|(j, g)| (1.0 - dot(q, g), j))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let relevance: Vec<bool> = ranked
            .iter()
            .map(|&(_, j)| gallery_meta[j].identity == Some(qid))
            .collect();
        let Some(ap) = average_precision(&relevance) else {
            skipped += 1;
            continue;
        };
        valid += 1;
        ap_sum += ap;
        let first = relevance.iter().position(|&r| r).expect("ap implies a hit");
        for (h, &r) in hits.iter_mut().zip(&CMC_RANKS) {
            if first < r {
                *h += 1;
            }
        }
    }
    let denom = valid.max(1) as f64;
    Ok(EvaluationReport {
        map: if valid == 0 { 0.0 } else { ap_sum / denom },
        cmc: CMC_RANKS
            .iter()
            .zip(hits)
            .map(|(&r, h)| (r, h as f64 / denom))
            .collect(),
        num_queries: queries.len(),
        num_gallery: gallery.len(),
        skipped,
    })
}

/// Evaluates the query split against the gallery split of a dataset.
pub fn evaluate(params: &EncoderParams, dataset: &Dataset) -> Result<EvaluationReport> {
    let query = dataset.split(Split::Query);
    let gallery = dataset.split(Split::Gallery);
    let embed = |items: &[&Instance]| -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<&[f64]> = items.iter().map(|i| i.input.as_slice()).collect();
        extract_global(params, &inputs)
    };
    let q = embed(&query)?;
    let g = embed(&gallery)?;
    let qm: Vec<ItemMeta> = query.iter().map(|&i| i.into()).collect();
    let gm: Vec<ItemMeta> = gallery.iter().map(|&i| i.into()).collect();
    evaluate_embeddings(&q, &qm, &g, &gm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    /// Absent when every instance is an outlier.
    pub ari: Option<f64>,
    pub purity: Option<f64>,
    pub num_outliers: usize,
}

fn comb2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index<A, B>(a: &[A], b: &[B]) -> f64
where
    A: Eq + std::hash::Hash + Copy,
    B: Eq + std::hash::Hash + Copy,
{
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut table: HashMap<(A, B), usize> = HashMap::new();
    let mut rows: HashMap<A, usize> = HashMap::new();
    let mut cols: HashMap<B, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| comb2(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| comb2(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| comb2(v)).sum();
    let total = comb2(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // Both partitions trivial in the same way (all singletons or one block).
        return if rows.len() == cols.len() { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

/// ARI and purity of pseudo labels over non-outlier instances.
pub fn cluster_quality(pseudo: &PseudoLabeling, truth: &[Option<u32>]) -> Result<ClusterQuality> {
    if pseudo.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: pseudo.len(),
            got: truth.len(),
        });
    }
    let pairs: Vec<(usize, Option<u32>)> = pseudo
        .assignment
        .iter()
        .zip(truth)
        .filter_map(|(p, t)| p.map(|k| (k, *t)))
        .collect();
    let num_outliers = pseudo.num_outliers();
    if pairs.is_empty() {
        return Ok(ClusterQuality {
            ari: None,
            purity: None,
            num_outliers,
        });
    }
    let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<Option<u32>> = pairs.iter().map(|p| p.1).collect();
    let ari = adjusted_rand_index(&a, &b);

    let mut per_cluster: HashMap<usize, HashMap<Option<u32>, usize>> = HashMap::new();
    for &(k, t) in &pairs {
        *per_cluster.entry(k).or_default().entry(t).or_default() += 1;
    }
    let purity = per_cluster
        .values()
        .map(|counts| {
            let total: usize = counts.values().sum();
            *counts.values().max().expect("nonempty") as f64 / total as f64
        })
        .sum::<f64>()
        / per_cluster.len() as f64;
    Ok(ClusterQuality {
        ari: Some(ari),
        purity: Some(purity),
        num_outliers,
    })
}
