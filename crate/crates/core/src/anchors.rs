//! Semantic anchors: structured text prompts for every (category, count-bin)
//! pair, embedded into a deterministic unit-norm tensor.

use crate::datamodel::{CategorySet, CountBinning};
use crate::error::{CoreError, Result};
use crate::rng::{hash_str, SplitMix64};
use crate::tensor::Matrix;

/// Deterministic text embedding: same string, same vector, always.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<f64>;
}

/// Reference encoder: a counter-based PRNG seeded with a 64-bit hash of the
/// prompt draws d standard normals. Distinct prompts map to distinct
/// directions with overwhelming probability; no pretrained weights needed.
/// External pretrained text encoders drop in behind the same trait.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    dim: usize,
}

impl HashTextEncoder {
    pub fn new(dim: usize) -> Self {
        HashTextEncoder { dim }
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        let mut rng = SplitMix64::new(hash_str(text));
        (0..self.dim).map(|_| rng.next_gaussian()).collect()
    }
}

/// Renders the prompt for one (category, bin) pair.
///
/// bin {0}      -> "There is no [z]"
/// bin {1}      -> "There is 1 [z]"
/// bin {k}, k<n -> "There are k [z]s"
/// bin [n, inf) -> "There are more than n [z]s"
pub fn render_prompt(category: &str, bin: usize, n: usize) -> String {
    debug_assert!(bin <= n);
    if bin == 0 {
        format!("There is no {category}")
    } else if bin == 1 && n > 1 {
        format!("There is 1 {category}")
    } else if bin < n {
        format!("There are {bin} {category}s")
    } else {
        format!("There are more than {n} {category}s")
    }
}

/// m x (n+1) x d unit-norm anchor embeddings plus their prompt table.
#[derive(Debug, Clone)]
pub struct AnchorTensor {
    pub m: usize,
    pub num_bins: usize,
    pub d: usize,
    /// m * (n+1) rows of d, category-major
    values: Matrix,
    prompt_table: Vec<String>,
}

impl AnchorTensor {
    pub fn anchor(&self, category: usize, bin: usize) -> &[f64] {
        self.values.row(category * self.num_bins + bin)
    }

    pub fn prompt(&self, category: usize, bin: usize) -> &str {
        &self.prompt_table[category * self.num_bins + bin]
    }

    /// (n+1) x d matrix of one category's anchors.
    pub fn category_matrix(&self, category: usize) -> Matrix {
        let mut out = Matrix::zeros(self.num_bins, self.d);
        for b in 0..self.num_bins {
            out.row_mut(b).copy_from_slice(self.anchor(category, b));
        }
        out
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompt_table
    }
}

/// Embeds every (category, bin) prompt and L2-normalizes.
pub fn build_anchor_tensor(
    categories: &CategorySet,
    binning: CountBinning,
    enc: &dyn TextEncoder,
) -> Result<AnchorTensor> {
    let m = categories.len();
    let num_bins = binning.num_bins();
    let d = enc.dim();
    let mut values = Matrix::zeros(m * num_bins, d);
    let mut prompt_table = Vec::with_capacity(m * num_bins);
    for i in 0..m {
        for b in 0..num_bins {
            let prompt = render_prompt(categories.name(i), b, binning.n());
            let v = enc.encode(&prompt);
            if v.len() != d {
                return Err(CoreError::InvalidArgument(format!(
                    "encoder returned {} dims, expected {d}",
                    v.len()
                )));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(CoreError::ZeroEmbedding(prompt));
            }
            let row = values.row_mut(i * num_bins + b);
            for (slot, x) in row.iter_mut().zip(&v) {
                *slot = x / norm;
            }
            prompt_table.push(prompt);
        }
    }
    Ok(AnchorTensor {
        m,
        num_bins,
        d,
        values,
        prompt_table,
    })
}

/// Class-agnostic anchors over count bins for the ranking stage, bundled with
/// the similarity temperature so count decoding is self-contained.
#[derive(Debug, Clone)]
pub struct RatsAnchorSet {
    pub anchors: AnchorTensor,
    pub binning: CountBinning,
    pub temperature: f64,
}

impl RatsAnchorSet {
    pub fn build(binning: CountBinning, temperature: f64, enc: &dyn TextEncoder) -> Result<Self> {
        let cats = CategorySet::single("cell");
        let anchors = build_anchor_tensor(&cats, binning, enc)?;
        Ok(RatsAnchorSet {
            anchors,
            binning,
            temperature,
        })
    }

    pub fn d(&self) -> usize {
        self.anchors.d
    }

    /// Expected count after cosine-softmax decoding of `embedding`.
    pub fn decode_count(&self, embedding: &[f64]) -> f64 {
        let probs = self.decode_probs(embedding);
        probs
            .iter()
            .enumerate()
            .map(|(b, p)| p * self.binning.representative(b))
            .sum()
    }

    pub fn decode_probs(&self, embedding: &[f64]) -> Vec<f64> {
        let norm = embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = self.binning.num_bins();
        let mut logits = Vec::with_capacity(nb);
        for b in 0..nb {
            let a = self.anchors.anchor(0, b);
            let cos = if norm < 1e-8 {
                0.0
            } else {
                a.iter().zip(embedding).map(|(x, y)| x * y).sum::<f64>() / norm
            };
            logits.push(cos / self.temperature);
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= s;
        }
        probs
    }

    /// Unit vector whose decoded expected count approximates `target`
    /// (clamped to [0, n]). Integer targets land on their anchor direction;
    /// fractional targets are solved by bisection between the two bracketing
    /// anchors. Decoding error stays below ~1e-3 for the default temperature.
    pub fn count_embedding(&self, target: f64) -> Vec<f64> {
        let n = self.binning.n() as f64;
        let t = target.clamp(0.0, n);
        let lo_bin = t.floor() as usize;
        if lo_bin as f64 >= n {
            return self.anchors.anchor(0, self.binning.n()).to_vec();
        }
        let a = self.anchors.anchor(0, lo_bin).to_vec();
        let b = self.anchors.anchor(0, lo_bin + 1).to_vec();
        let blend = |theta: f64| -> Vec<f64> {
            let mut v: Vec<f64> = a
                .iter()
                .zip(&b)
                .map(|(x, y)| x * (1.0 - theta) + y * theta)
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut v {
                *x /= norm;
            }
            v
        };
        let e0 = self.decode_count(&blend(0.0));
        if e0 >= t {
            return blend(0.0);
        }
        let e1 = self.decode_count(&blend(1.0));
        if e1 <= t {
            return blend(1.0);
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.decode_count(&blend(mid)) < t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        blend(0.5 * (lo + hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_templates_exact() {
        assert_eq!(
            render_prompt("positive tumor cell", 0, 4),
            "There is no positive tumor cell"
        );
        assert_eq!(
            render_prompt("positive tumor cell", 1, 4),
            "There is 1 positive tumor cell"
        );
        assert_eq!(
            render_prompt("positive tumor cell", 2, 4),
            "There are 2 positive tumor cells"
        );
        assert_eq!(
            render_prompt("negative tumor cell", 4, 4),
            "There are more than 4 negative tumor cells"
        );
        // n = 1 degenerates to {0} and the open bin
        assert_eq!(render_prompt("cell", 0, 1), "There is no cell");
        assert_eq!(render_prompt("cell", 1, 1), "There are more than 1 cells");
    }

    #[test]
    fn anchor_tensor_shape_and_unit_norm() {
        let cats = CategorySet::default_ihc();
        let binning = CountBinning::new(4).unwrap();
        let enc = HashTextEncoder::new(16);
        let t = build_anchor_tensor(&cats, binning, &enc).unwrap();
        assert_eq!((t.m, t.num_bins, t.d), (2, 5, 16));
        for i in 0..2 {
            for b in 0..5 {
                let norm: f64 = t.anchor(i, b).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
            }
        }
    }

    #[test]
    fn determinism_and_injectivity() {
        let cats = CategorySet::default_ihc();
        let binning = CountBinning::new(4).unwrap();
        let enc = HashTextEncoder::new(16);
        let a = build_anchor_tensor(&cats, binning, &enc).unwrap();
        let b = build_anchor_tensor(&cats, binning, &enc).unwrap();
        for i in 0..2 {
            for bin in 0..5 {
                assert_eq!(a.anchor(i, bin), b.anchor(i, bin));
            }
        }
        // all 10 prompts distinct, all 10 vectors pairwise non-identical
        let mut prompts: Vec<_> = a.prompts().to_vec();
        prompts.sort();
        prompts.dedup();
        assert_eq!(prompts.len(), 10);
        for r1 in 0..10 {
            for r2 in r1 + 1..10 {
                let v1 = a.anchor(r1 / 5, r1 % 5);
                let v2 = a.anchor(r2 / 5, r2 % 5);
                assert_ne!(v1, v2, "anchors {r1} and {r2} identical");
            }
        }
    }

    #[test]
    fn zero_embedding_rejected() {
        struct ZeroEnc;
        impl TextEncoder for ZeroEnc {
            fn dim(&self) -> usize {
                8
            }
            fn encode(&self, _: &str) -> Vec<f64> {
                vec![0.0; 8]
            }
        }
        let cats = CategorySet::single("cell");
        let binning = CountBinning::new(2).unwrap();
        assert!(matches!(
            build_anchor_tensor(&cats, binning, &ZeroEnc),
            Err(CoreError::ZeroEmbedding(_))
        ));
    }

    #[test]
    fn count_embedding_roundtrip() {
        let binning = CountBinning::new(4).unwrap();
        let rats = RatsAnchorSet::build(binning, 0.07, &HashTextEncoder::new(64)).unwrap();
        for target in [0.0, 1.0, 2.0, 3.0, 4.0, 0.4, 1.7, 2.5, 3.9] {
            let e = rats.count_embedding(target);
            let decoded = rats.decode_count(&e);
            assert!(
                (decoded - target).abs() < 1e-3,
                "target {target} decoded {decoded}"
            );
        }
        // clamping
        assert!((rats.decode_count(&rats.count_embedding(9.0)) - 4.0).abs() < 1e-3);
        assert!((rats.decode_count(&rats.count_embedding(-3.0)) - 0.0).abs() < 1e-3);
    }

    #[test]
    fn count_embedding_monotone() {
        let binning = CountBinning::new(4).unwrap();
        let rats = RatsAnchorSet::build(binning, 0.07, &HashTextEncoder::new(64)).unwrap();
        let mut last = -1.0;
        for i in 0..=40 {
            let t = i as f64 * 0.1;
            let d = rats.decode_count(&rats.count_embedding(t));
            assert!(d >= last - 5e-4, "t {t}: {d} < {last}");
            last = d;
        }
    }
}
