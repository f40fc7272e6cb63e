//! Anchor-similarity density head: spatial features -> per-category count-bin
//! probabilities -> expected density maps -> counts and centroid estimates.

use crate::anchors::AnchorTensor;
use crate::datamodel::CountBinning;
use crate::graph::{Graph, Var};
use crate::tensor::Matrix;

/// Spatial feature grid flattened to (h*w) x d, row-major over blocks.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub h_blocks: usize,
    pub w_blocks: usize,
    pub values: Matrix,
}

impl FeatureMap {
    pub fn new(h_blocks: usize, w_blocks: usize, values: Matrix) -> Self {
        assert_eq!(values.rows, h_blocks * w_blocks, "feature rows");
        FeatureMap {
            h_blocks,
            w_blocks,
            values,
        }
    }

    pub fn d(&self) -> usize {
        self.values.cols
    }
}

/// Per-category bin probabilities and expected densities on the block grid.
#[derive(Debug, Clone)]
pub struct DensityBundle {
    pub h_blocks: usize,
    pub w_blocks: usize,
    /// per category: (h*w) x (n+1) probabilities
    pub probs: Vec<Matrix>,
    /// per category: h*w expected densities
    pub densities: Vec<Vec<f64>>,
}

impl DensityBundle {
    pub fn m(&self) -> usize {
        self.probs.len()
    }

    /// Spatial sums per category.
    pub fn total_counts(&self) -> Vec<f64> {
        self.densities.iter().map(|d| d.iter().sum()).collect()
    }
}

/// Cosine-similarity bin probabilities for one category on the tape.
/// `features` is (h*w) x d with d matching the anchors; rows with norm below
/// `norm_floor` get all-zero cosines, i.e. a uniform distribution.
pub fn similarity_probs_graph(
    g: &mut Graph,
    features: Var,
    anchors: &AnchorTensor,
    category: usize,
    temperature: f64,
    norm_floor: f64,
) -> Var {
    assert!(temperature > 0.0, "temperature must be positive");
    assert_eq!(g.value(features).cols, anchors.d, "feature/anchor dim");
    let a = g.constant(anchors.category_matrix(category)); // (n+1) x d
    let dots = g.gemm(false, true, features, a); // (h*w) x (n+1)
    // row norms, clamped: sqrt(max(sum(x^2), floor^2)) so zero rows stay zero
    let sq = g.mul_elem(features, features);
    let rs = g.rowwise_sum(sq);
    let ln = g.ln_clamped(rs, norm_floor * norm_floor);
    let half = g.scale_const(ln, 0.5);
    let norms = g.exp(half);
    let inv = g.recip(norms);
    let cos = g.rowwise_scale(dots, inv);
    let logits = g.scale_const(cos, 1.0 / temperature);
    g.softmax_rows(logits)
}

/// Expected density per block on the tape: P

/// (h*w) x (n+1) times the bin representatives.
pub fn expected_density_graph(g: &mut Graph, probs: Var, binning: CountBinning) -> Var {
    let reps = g.constant(Matrix::from_vec(
        binning.num_bins(),
        1,
        binning.representatives(),
    ));
    g.matmul(probs, reps) // (h*w) x 1
}

/// Plain-value head over all categories.
pub fn similarity_bundle(
    features: &FeatureMap,
    anchors: &AnchorTensor,
    binning: CountBinning,
    temperature: f64,
    norm_floor: f64,
) -> DensityBundle {
    let mut g = Graph::new();
    let f = g.constant(features.values.clone());
    let mut probs = Vec::with_capacity(anchors.m);
    let mut densities = Vec::with_capacity(anchors.m);
    for cat in 0..anchors.m {
        let p = similarity_probs_graph(&mut g, f, anchors, cat, temperature, norm_floor);
        let d = expected_density_graph(&mut g, p, binning);
        probs.push(g.value(p).clone());
        densities.push(g.value(d).data.clone());
    }
    DensityBundle {
        h_blocks: features.h_blocks,
        w_blocks: features.w_blocks,
        probs,
        densities,
    }
}

/// Expected density from explicit probabilities (no tape).
pub fn expected_density(probs: &Matrix, binning: CountBinning) -> Vec<f64> {
    let reps = binning.representatives();
    assert_eq!(probs.cols, reps.len());
    (0..probs.rows)
        .map(|r| probs.row(r).iter().zip(&reps).map(|(p, v)| p * v).sum())
        .collect()
}

pub fn total_count(density: &[f64]) -> f64 {
    density.iter().sum()
}

/// One-hot probability matrix from ground-truth bin indices.
pub fn one_hot_probs(bins: &[usize], num_bins: usize) -> Matrix {
    let mut m = Matrix::zeros(bins.len(), num_bins);
    for (r, &b) in bins.iter().enumerate() {
        assert!(b < num_bins);
        m.data[r * num_bins + b] = 1.0;
    }
    m
}

/// Strict 8-neighborhood local maxima above `threshold`, greedily suppressed
/// so surviving peaks are at least `min_distance` apart (Chebyshev), returned
/// ordered by descending value.
pub fn extract_centroids(
    density: &[f64],
    h_blocks: usize,
    w_blocks: usize,
    threshold: f64,
    min_distance: usize,
) -> Vec<(usize, usize)> {
    assert_eq!(density.len(), h_blocks * w_blocks);
    assert!(min_distance >= 1, "min_distance must be >= 1");
    let at = |u: i64, v: i64| -> f64 {
        if u < 0 || v < 0 || u >= h_blocks as i64 || v >= w_blocks as i64 {
            f64::NEG_INFINITY
        } else {
            density[u as usize * w_blocks + v as usize]
        }
    };
    let mut peaks: Vec<(usize, usize, f64)> = Vec::new();
    for u in 0..h_blocks {
        for v in 0..w_blocks {
            let val = density[u * w_blocks + v];
            if val <= threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for du in -1i64..=1 {
                for dv in -1i64..=1 {
                    if du == 0 && dv == 0 {
                        continue;
                    }
                    if at(u as i64 + du, v as i64 + dv) >= val {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push((u, v, val));
            }
        }
    }
    // descending value; deterministic tie-break on position
    peaks.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for (u, v, _) in peaks {
        let ok = kept.iter().all(|&(ku, kv)| {
            let d = (ku as i64 - u as i64).abs().max((kv as i64 - v as i64).abs());
            d >= min_distance as i64
        });
        if ok {
            kept.push((u, v));
        }
    }
    kept
}
