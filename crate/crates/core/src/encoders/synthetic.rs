//! Skill-controlled synthetic teachers.
//!
//! A synthetic teacher reads the exact count metadata attached to a patch and
//! emits features that decode (through its paired projector and the anchor
//! head) to the true counts corrupted by Gaussian noise of scale sigma. With
//! sigma = 0 it is a counting oracle; larger sigma degrades its ranking
//! skill, which is exactly what the teacher-selection stage must detect.
//!
//! Features live in a non-negative "lifted" space of width 2 * d_anchor
//! ([v_+; v_-] for an anchor-space vector v) so the paired two-layer ReLU
//! projector can reproduce v exactly; see [`Projector::identity_lift`].

use crate::anchors::{AnchorTensor, RatsAnchorSet};
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::patchgroup::Patch;
use crate::rng::{hash_f32s, SplitMix64};
use crate::tensor::Matrix;

use super::{BatchOutput, Encoder, Projector};

/// Anchor context a synthetic teacher needs: class-agnostic ranking anchors
/// for pooled counts plus per-category anchors for spatial token texture.
#[derive(Debug, Clone)]
pub struct AnchorBundle {
    pub rats: RatsAnchorSet,
    pub category: AnchorTensor,
}

impl AnchorBundle {
    pub fn d_anchor(&self) -> usize {
        self.category.d
    }
}

pub struct SyntheticTeacher {
    pub sigma: f64,
    pub seed: u64,
    bundle: AnchorBundle,
    patch: usize,
    input_side: usize,
}

/// Builds a frozen synthetic encoder. Pooled outputs decode (via the exact
/// identity-lift projector and the ranking anchors) to
/// clip(true_count + N(0, sigma^2), 0, n).
pub fn make_synthetic_teacher(
    skill_noise: f64,
    seed: u64,
    anchors: &AnchorBundle,
    patch: usize,
    input_side: usize,
) -> Result<SyntheticTeacher> {
    if skill_noise < 0.0 {
        return Err(CoreError::InvalidArgument("skill_noise must be >= 0".into()));
    }
    if anchors.rats.d() != anchors.category.d {
        return Err(CoreError::InvalidArgument(
            "rats and category anchors disagree on dimension".into(),
        ));
    }
    Ok(SyntheticTeacher {
        sigma: skill_noise,
        seed,
        bundle: anchors.clone(),
        patch,
        input_side,
    })
}

impl SyntheticTeacher {
    /// The projector that exactly inverts the lifting; frozen after
    /// construction unless pretraining is explicitly requested.
    pub fn paired_projector(&self) -> Projector {
        Projector::identity_lift(self.bundle.d_anchor())
    }

    fn lift(v: &[f64], out: &mut [f64]) {
        let d = v.len();
        for (i, &x) in v.iter().enumerate() {
            out[i] = x.max(0.0);
            out[d + i] = (-x).max(0.0);
        }
    }
}

impl Encoder for SyntheticTeacher {
    fn d_enc(&self) -> usize {
        2 * self.bundle.d_anchor()
    }

    fn patch_size(&self) -> usize {
        self.patch
    }

    fn input_side(&self) -> usize {
        self.input_side
    }

    fn forward_batch(&self, g: &mut Graph, patches: &[Patch]) -> Result<BatchOutput> {
        let s = (self.input_side / self.patch) * (self.input_side / self.patch);
        let d = self.bundle.d_anchor();
        let m = self.bundle.category.m;
        let n = self.bundle.rats.binning.n();
        let grid = self.input_side / self.patch;
        let mut tokens = Matrix::zeros(patches.len() * s, 2 * d);
        let mut pooled = Matrix::zeros(patches.len(), 2 * d);

        for (bi, patch) in patches.iter().enumerate() {
            if !patch.has_metadata() {
                return Err(CoreError::InvalidArgument(format!(
                    "synthetic teacher needs count metadata, patch `{}` has none",
                    patch.source_id
                )));
            }
            if patch.side != self.input_side {
                return Err(CoreError::InvalidArgument(format!(
                    "patch side {} does not match teacher input {}",
                    patch.side, self.input_side
                )));
            }
            // teacher-specific frozen noise: a fixed function of the pixels,
            // so the same patch always gets the same corruption
            let mut rng =
                SplitMix64::new(self.seed ^ hash_f32s(&patch.pixels).wrapping_mul(0x9E37));

            // pooled: ranking-anchor embedding of the corrupted total count
            let total = patch.total_count().unwrap() as f64;
            let target = (total + self.sigma * rng.next_gaussian()).clamp(0.0, n as f64);
            let v = self.bundle.rats.count_embedding(target);
            Self::lift(&v, pooled.row_mut(bi));

            // tokens: per-block mixture of category anchors at the corrupted
            // block counts; block noise scales down by sqrt(#blocks)
            let counts = patch.block_counts(self.patch, m).unwrap();
            let block_sigma = self.sigma / (s as f64).sqrt();
            for blk in 0..s {
                let mut w = vec![0.0f64; d];
                for cat in 0..m {
                    let c = counts[blk * m + cat] as f64;
                    let noisy = (c + block_sigma * rng.next_gaussian())
                        .round()
                        .clamp(0.0, n as f64) as usize;
                    let a = self.bundle.category.anchor(cat, noisy);
                    for (slot, x) in w.iter_mut().zip(a) {
                        *slot += x / m as f64;
                    }
                }
                Self::lift(&w, tokens.row_mut(bi * s + blk));
            }
            let _ = grid;
        }
        let tokens = g.constant(tokens);
        let pooled = g.constant(pooled);
        Ok(BatchOutput {
            tokens,
            pooled,
            intermediates: vec![],
            seq: s,
        })
    }

    fn params(&self) -> Vec<&crate::graph::Param> {
        vec![]
    }

    fn params_mut(&mut self) -> Vec<&mut crate::graph::Param> {
        vec![]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::HashTextEncoder;
    use crate::datamodel::{CategorySet, CountBinning};
    use crate::synthdata::{generate_image, SynthConfig};

    pub(crate) fn bundle(d: usize, n: usize) -> AnchorBundle {
        let binning = CountBinning::new(n).unwrap();
        let enc = HashTextEncoder::new(d);
        AnchorBundle {
            rats: RatsAnchorSet::build(binning, 0.07, &enc).unwrap(),
            category: crate::anchors::build_anchor_tensor(
                &CategorySet::default_ihc(),
                binning,
                &enc,
            )
            .unwrap(),
        }
    }

    fn sparse_patch(seed: u64) -> Patch {
        let img = generate_image(
            &SynthConfig {
                image_size: 28,
                num_neg: [1, 2],
                num_pos: [0, 1],
                cell_radius: [2.0, 3.0],
                seed,
                ..SynthConfig::default()
            },
            0,
        )
        .unwrap();
        crate::patchgroup::full_resize_patch(&img, 28).unwrap()
    }

    #[test]
    fn noiseless_teacher_decodes_exact_counts() {
        let b = bundle(64, 4);
        let t = make_synthetic_teacher(0.0, 1, &b, 14, 28).unwrap();
        let proj = t.paired_projector();
        for seed in 0..10 {
            let patch = sparse_patch(seed);
            let want = patch.total_count().unwrap().min(4) as f64;
            let mut g = Graph::new();
            let out = t.forward_batch(&mut g, &[patch]).unwrap();
            let projected = proj.forward_frozen(&mut g, out.pooled);
            let emb = g.value(projected).row(0).to_vec();
            let decoded = b.rats.decode_count(&emb);
            assert!(
                (decoded - want).abs() < 1e-3,
                "seed {seed}: decoded {decoded}, want {want}"
            );
        }
    }

    #[test]
    fn metadata_required() {
        let b = bundle(32, 4);
        let t = make_synthetic_teacher(0.0, 1, &b, 14, 28).unwrap();
        let raw = Patch::from_raw(28, vec![0.0; 28 * 28 * 3], "raw".into());
        let mut g = Graph::new();
        assert!(t.forward_batch(&mut g, &[raw]).is_err());
    }

    #[test]
    fn noise_is_frozen_per_patch() {
        let b = bundle(32, 4);
        let t = make_synthetic_teacher(5.0, 1, &b, 14, 28).unwrap();
        let patch = sparse_patch(3);
        let mut g1 = Graph::new();
        let o1 = t.forward_batch(&mut g1, &[patch.clone()]).unwrap();
        let mut g2 = Graph::new();
        let o2 = t.forward_batch(&mut g2, &[patch]).unwrap();
        assert_eq!(g1.value(o1.pooled).data, g2.value(o2.pooled).data);
        assert_eq!(g1.value(o1.tokens).data, g2.value(o2.tokens).data);
    }

    #[test]
    fn different_sigma_different_output() {
        let b = bundle(32, 4);
        let t0 = make_synthetic_teacher(0.0, 1, &b, 14, 28).unwrap();
        let t5 = make_synthetic_teacher(5.0, 1, &b, 14, 28).unwrap();
        let patch = sparse_patch(4);
        let mut g = Graph::new();
        let o0 = t0.forward_batch(&mut g, &[patch.clone()]).unwrap();
        let o5 = t5.forward_batch(&mut g, &[patch]).unwrap();
        assert_ne!(g.value(o0.pooled).data, g.value(o5.pooled).data);
    }
}
