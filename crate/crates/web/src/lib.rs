//! Browser bindings for three interactive views of the core library:
//! pseudo-label clustering of a synthetic identity set, the GEM pooling
//! curve, and ClusterNCE as a function of the temperature.
//!
//! The computations are plain functions so they can be tested natively; the
//! `wasm_bindgen` exports only convert arguments and serialize results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use mskd::clustering::{generate_pseudo_labels, DbscanConfig};
use mskd::data::{generate_synthetic, Split, SynthConfig};
use mskd::encoder::{embed_all, EncoderDims, EncoderParams};
use mskd::evaluation::adjusted_rand_index;
use mskd::losses::cluster_nce;
use mskd::numerics::{gem_pool, Mat};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterView {
    /// 2-D projection of each training embedding (global branch).
    pub points: Vec<[f64; 2]>,
    /// Pseudo label per point, -1 for outliers.
    pub labels: Vec<i64>,
    pub identities: Vec<u32>,
    pub num_clusters: usize,
    pub num_outliers: usize,
    /// Agreement with the true identities over clustered points.
    pub ari: Option<f64>,
}

/// Leading principal directions by power iteration with deflation.
fn principal_axes(rows: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let dim = rows.first().map_or(0, Vec::len);
    let n = rows.len().max(1) as f64;
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for a in 0..k {
        // A fixed, non-symmetric start keeps the projection reproducible.
        let mut v: Vec<f64> = (0..dim).map(|j| 1.0 + ((j + a) % 3) as f64).collect();
        for _ in 0..200 {
            let mut next = vec![0.0; dim];
            for r in &centered {
                let s: f64 = r.iter().zip(&v).map(|(x, y)| x * y).sum();
                for (n, x) in next.iter_mut().zip(r) {
                    *n += s * x;
                }
            }
            for prev in &axes {
                let s: f64 = next.iter().zip(prev).map(|(x, y)| x * y).sum();
                for (n, p) in next.iter_mut().zip(prev) {
                    *n -= s * p;
                }
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                break;
            }
            v = next.into_iter().map(|x| x / norm).collect();
        }
        axes.push(v);
    }
    axes
}

/// Clusters the training split of a synthetic dataset with a randomly
/// initialized (BN-calibrated) encoder and the blended distance.
pub fn cluster_view(
    seed: u64,
    num_identities: usize,
    noise_scale: f64,
    lambda1: f64,
    eps: f64,
    min_pts: usize,
) -> mskd::Result<ClusterView> {
    let synth = SynthConfig {
        num_identities,
        noise_scale,
        seed,
        ..Default::default()
    };
    let ds = generate_synthetic(&synth, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let train = ds.split(Split::Train);
    let inputs: Vec<&[f64]> = train.iter().map(|i| i.input.as_slice()).collect();
    let identities: Vec<u32> = train.iter().map(|i| i.identity.unwrap_or(u32::MAX)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = EncoderParams::init(EncoderDims::default(), &mut rng)?;
    params.calibrate_batch_norm(&inputs)?;
    let embs = embed_all(&params, &inputs)?;
    let labeling = generate_pseudo_labels(&embs, lambda1, &DbscanConfig { eps, min_pts })?;

    let globals: Vec<Vec<f64>> = embs.iter().map(|e| e.global.clone()).collect();
    let axes = principal_axes(&globals, 2);
    let project = |v: &[f64], a: &[f64]| v.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
    let points = globals
        .iter()
        .map(|g| [project(g, &axes[0]), project(g, &axes[1])])
        .collect();

    let clustered: Vec<usize> = labeling.clustered();
    let ari = (!clustered.is_empty()).then(|| {
        let a: Vec<usize> = clustered.iter().map(|&i| labeling.assignment[i].unwrap()).collect();
        let b: Vec<u32> = clustered.iter().map(|&i| identities[i]).collect();
        adjusted_rand_index(&a, &b)
    });
    Ok(ClusterView {
        points,
        labels: labeling
            .assignment
            .iter()
            .map(|a| a.map_or(-1, |k| k as i64))
            .collect(),
        identities,
        num_clusters: labeling.num_clusters,
        num_outliers: labeling.num_outliers(),
        ari,
    })
}

/// GEM-pooled value of one channel for each exponent in `ps`.
pub fn gem_curve(values: &[f64], ps: &[f64]) -> mskd::Result<Vec<f64>> {
    let cells: Vec<[f64; 1]> = values.iter().map(|&v| [v]).collect();
    let region: Vec<&[f64]> = cells.iter().map(|c| c.as_slice()).collect();
    ps.iter().map(|&p| gem_pool(&region, p).map(|out| out[0])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NceCurve {
    pub taus: Vec<f64>,
    pub losses: Vec<f64>,
    /// Softmax over clusters at each temperature.
    pub probabilities: Vec<Vec<f64>>,
}

/// ClusterNCE for a query whose cosine similarity to each centroid is
/// given, swept over temperatures.
pub fn nce_curve(similarities: &[f64], positive: usize, taus: &[f64]) -> mskd::Result<NceCurve> {
    // Unit vectors in the plane realise any similarity in [-1, 1] to u = e1.
    let rows: Vec<Vec<f64>> = similarities
        .iter()
        .map(|&s| {
            let s = s.clamp(-1.0, 1.0);
            vec![s, (1.0 - s * s).sqrt()]
        })
        .collect();
    let centroids = Mat::from_rows(&rows)?;
    let u = [1.0, 0.0];
    let mut losses = Vec::with_capacity(taus.len());
    let mut probabilities = Vec::with_capacity(taus.len());
    for &tau in taus {
        let (loss, _) = cluster_nce(&u, &centroids, positive, tau)?;
        losses.push(loss);
        let max = similarities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = similarities.iter().map(|s| ((s - max) / tau).exp()).collect();
        let z: f64 = exps.iter().sum();
        probabilities.push(exps.into_iter().map(|e| e / z).collect());
    }
    Ok(NceCurve {
        taus: taus.to_vec(),
        losses,
        probabilities,
    })
}

fn to_js<T: Serialize>(result: mskd::Result<T>) -> Result<String, JsValue> {
    let value = result.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsValue::from_str(&e.to_string()))
}

/// JSON-encoded [`ClusterView`].
#[wasm_bindgen(js_name = clusterView)]
pub fn cluster_view_js(
    seed: u32,
    num_identities: u32,
    noise_scale: f64,
    lambda1: f64,
    eps: f64,
    min_pts: u32,
) -> Result<String, JsValue> {
    to_js(cluster_view(
        u64::from(seed),
        num_identities as usize,
        noise_scale,
        lambda1,
        eps,
        min_pts as usize,
    ))
}

#[wasm_bindgen(js_name = gemCurve)]
pub fn gem_curve_js(values: Vec<f64>, ps: Vec<f64>) -> Result<Vec<f64>, JsValue> {
    gem_curve(&values, &ps).map_err(|e| JsValue::from_str(&e.to_string()))
}

/// JSON-encoded [`NceCurve`].
#[wasm_bindgen(js_name = nceCurve)]
pub fn nce_curve_js(similarities: Vec<f64>, positive: u32, taus: Vec<f64>) -> Result<String, JsValue> {
    to_js(nce_curve(&similarities, positive as usize, &taus))
}
