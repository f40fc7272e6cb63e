//! Encoder abstraction shared by the student and the teacher pool, plus the
//! projector machinery that maps every backbone into the anchor space.

mod synthetic;
mod vit;

pub use synthetic::{make_synthetic_teacher, AnchorBundle, SyntheticTeacher};
pub use vit::{ToyVit, VitConfig};

use crate::anchors::AnchorTensor;
use crate::datamodel::BlockTargets;
use crate::densityhead::{expected_density_graph, similarity_probs_graph};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, Param, Var};
use crate::losses::{count_loss_graph, HeadOutputs, LossConfig};
use crate::ot::grid_cost_matrix;
use crate::patchgroup::Patch;
use crate::rng::SplitMix64;
use crate::tensor::Matrix;
use crate::train::Adam;

/// One batched forward pass: token grid rows are segment-major
/// (patch 0 rows, then patch 1, ...).
pub struct BatchOutput {
    /// (batch * seq) x d_enc final tokens
    pub tokens: Var,
    /// batch x d_enc pooled vectors
    pub pooled: Var,
    /// selected intermediate token grids, each (batch * seq) x d_enc
    pub intermediates: Vec<Var>,
    pub seq: usize,
}

/// A patch encoder: image in, token grid + pooled vector + selected
/// intermediates out. Deterministic in eval mode.
pub trait Encoder: Send + Sync {
    fn d_enc(&self) -> usize;
    fn patch_size(&self) -> usize;
    fn input_side(&self) -> usize;
    fn forward_batch(&self, g: &mut Graph, patches: &[Patch]) -> Result<BatchOutput>;
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn grid_side(&self) -> usize {
        self.input_side() / self.patch_size()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Little-endian byte image of all parameters, for frozenness checks.
    fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params() {
            for v in &p.value.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

// ── projector ────────────────────────────────────────────────────────────────

/// Two-layer perceptron d_in -> max(d_in, d_out) -> d_out with ReLU.
pub struct Projector {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl Projector {
    pub fn new(name: &str, d_in: usize, d_out: usize, seed: u64) -> Self {
        let hidden = d_in.max(d_out);
        let mut rng = SplitMix64::substream(seed, 0x7072_6f6a); // "proj"
        Projector {
            w1: Param::new(
                format!("{name}.w1"),
                Matrix::randn_scaled(d_in, hidden, d_in, &mut rng),
            ),
            b1: Param::new(format!("{name}.b1"), Matrix::zeros(1, hidden)),
            w2: Param::new(
                format!("{name}.w2"),
                Matrix::randn_scaled(hidden, d_out, hidden, &mut rng),
            ),
            b2: Param::new(format!("{name}.b2"), Matrix::zeros(1, d_out)),
        }
    }

    /// Exact inverse of the non-negative lifting [v+; v-] -> v: W1 = I,
    /// ReLU is the identity on non-negative inputs, W2 = [I; -I].
    pub fn identity_lift(d: usize) -> Self {
        let mut w2 = Matrix::zeros(2 * d, d);
        for i in 0..d {
            w2.data[i * d + i] = 1.0;
            w2.data[(d + i) * d + i] = -1.0;
        }
        Projector {
            w1: Param::new("lift.w1", Matrix::identity(2 * d)),
            b1: Param::new("lift.b1", Matrix::zeros(1, 2 * d)),
            w2: Param::new("lift.w2", w2),
            b2: Param::new("lift.b2", Matrix::zeros(1, d)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.value.rows
    }

    pub fn d_out(&self) -> usize {
        self.w2.value.cols
    }

    fn run(&self, g: &mut Graph, x: Var, trainable: bool) -> Var {
        let bind = |g: &mut Graph, p: &Param| {
            if trainable {
                g.param(p)
            } else {
                g.constant_arc(p.value.clone())
            }
        };
        let w1 = bind(g, &self.w1);
        let b1 = bind(g, &self.b1);
        let w2 = bind(g, &self.w2);
        let b2 = bind(g, &self.b2);
        let h = g.matmul(x, w1);
        let h = g.add_row_broadcast(h, b1);
        let h = g.relu(h);
        let out = g.matmul(h, w2);
        g.add_row_broadcast(out, b2)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.run(g, x, true)
    }

    pub fn forward_frozen(&self, g: &mut Graph, x: Var) -> Var {
        self.run(g, x, false)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Trainable vision decoder used in fine-tuning: a residual projector block
/// on top of the frozen student features. The second layer starts at zero so
/// the decoder is the identity at initialization.
pub struct VisionDecoder {
    pub mlp: Projector,
}

impl VisionDecoder {
    pub fn new(d: usize, seed: u64) -> Self {
        let mut mlp = Projector::new("decoder", d, d, seed);
        mlp.w2.set(Matrix::zeros(d, d));
        VisionDecoder { mlp }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let delta = self.mlp.forward(g, x);
        g.add(x, delta)
    }

    pub fn forward_frozen(&self, g: &mut Graph, x: Var) -> Var {
        let delta = self.mlp.forward_frozen(g, x);
        g.add(x, delta)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.mlp.params_mut()
    }
}

// ── student ──────────────────────────────────────────────────────────────────

/// Student = toy ViT backbone + one projector per exposed intermediate
/// layer; the public feature map is the elementwise mean of the per-layer
/// projections, and the pooled vector is its spatial mean.
pub struct StudentModel {
    pub vit: ToyVit,
    pub projectors: Vec<Projector>,
    pub d_anchor: usize,
}

pub struct StudentFeatures {
    /// (batch * seq) x d_anchor aggregated feature map
    pub tokens: Var,
    /// batch x d_anchor pooled vectors
    pub pooled: Var,
    pub seq: usize,
}

impl StudentModel {
    pub fn new(cfg: VitConfig, d_anchor: usize, seed: u64) -> Result<Self> {
        let vit = ToyVit::new(cfg, seed)?;
        let layer_ids = vit.cfg.resolved_layer_ids();
        let projectors = layer_ids
            .iter()
            .map(|l| {
                Projector::new(
                    &format!("student_proj{l}"),
                    vit.cfg.d_enc,
                    d_anchor,
                    seed ^ (0x1000 + *l as u64),
                )
            })
            .collect();
        Ok(StudentModel {
            vit,
            projectors,
            d_anchor,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.vit.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.vit.frozen = frozen;
    }

    pub fn forward_features(&self, g: &mut Graph, patches: &[Patch]) -> Result<StudentFeatures> {
        let out = self.vit.forward_batch(g, patches)?;
        assert_eq!(out.intermediates.len(), self.projectors.len());
        let frozen = self.vit.frozen;
        let mut agg: Option<Var> = None;
        for (layer, proj) in out.intermediates.iter().zip(&self.projectors) {
            let projected = if frozen {
                proj.forward_frozen(g, *layer)
            } else {
                proj.forward(g, *layer)
            };
            agg = Some(match agg {
                Some(a) => g.add(a, projected),
                None => projected,
            });
        }
        let mut tokens = agg.expect("at least one exposed layer");
        if self.projectors.len() > 1 {
            tokens = g.scale_const(tokens, 1.0 / self.projectors.len() as f64);
        }
        let pooled = g.segment_mean_rows(tokens, out.seq);
        Ok(StudentFeatures {
            tokens,
            pooled,
            seq: out.seq,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.vit.params();
        for p in &self.projectors {
            out.extend(p.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.vit.params_mut();
        for p in &mut self.projectors {
            out.extend(p.params_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params() {
            for v in &p.value.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

// ── teacher pool ─────────────────────────────────────────────────────────────

/// Ordered set of frozen encoders, each paired with its anchor-space
/// projector. Teachers never receive gradient updates; projectors train only
/// during their dedicated pretraining phase.
pub struct TeacherPool {
    pub teachers: Vec<Box<dyn Encoder>>,
    pub projectors: Vec<Projector>,
    pub names: Vec<String>,
}

impl TeacherPool {
    pub fn new() -> Self {
        TeacherPool {
            teachers: Vec::new(),
            projectors: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, teacher: Box<dyn Encoder>, projector: Projector) {
        assert_eq!(
            teacher.d_enc(),
            projector.d_in(),
            "projector width must match teacher"
        );
        self.teachers.push(teacher);
        self.projectors.push(projector);
        self.names.push(name.into());
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }
}

impl Default for TeacherPool {
    fn default() -> Self {
        Self::new()
    }
}

// ── projector pretraining ────────────────────────────────────────────────────

/// Trains a teacher's projector to minimize the category-aware counting loss
/// of the teacher + projector density head on annotated patches. The teacher
/// stays frozen. Returns the projector and per-epoch mean losses.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_projector(
    teacher: &dyn Encoder,
    mut projector: Projector,
    data: &[(Patch, BlockTargets)],
    anchors: &AnchorTensor,
    loss_cfg: &LossConfig,
    temperature: f64,
    epochs: usize,
    batch_size: usize,
    lr: f64,
) -> Result<(Projector, Vec<f64>)> {
    if data.is_empty() {
        return Err(CoreError::InvalidArgument(
            "pretrain_projector needs at least one sample".into(),
        ));
    }
    let grid = teacher.grid_side();
    let cost = std::sync::Arc::new(grid_cost_matrix(grid, grid));
    let mut opt = Adam::new(lr);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut epoch_sum = 0.0;
        let mut batches = 0.0;
        for chunk in data.chunks(batch_size.max(1)) {
            let mut g = Graph::new();
            let patches: Vec<Patch> = chunk.iter().map(|(p, _)| p.clone()).collect();
            let out = teacher.forward_batch(&mut g, &patches)?;
            let projected = projector.forward(&mut g, out.tokens);
            let seq = out.seq;
            let mut total: Option<Var> = None;
            for (i, (_, targets)) in chunk.iter().enumerate() {
                let img_tokens = g.slice_rows(projected, i * seq, seq);
                let mut probs = Vec::with_capacity(anchors.m);
                let mut densities = Vec::with_capacity(anchors.m);
                for cat in 0..anchors.m {
                    let p = similarity_probs_graph(
                        &mut g,
                        img_tokens,
                        anchors,
                        cat,
                        temperature,
                        loss_cfg.norm_floor,
                    );
                    let d = expected_density_graph(&mut g, p, crate::datamodel::CountBinning::new(anchors.num_bins - 1)?);
                    probs.push(p);
                    densities.push(d);
                }
                let head = HeadOutputs { probs, densities };
                let l = count_loss_graph(&mut g, &head, targets, cost.clone(), loss_cfg)?;
                total = Some(match total {
                    Some(t) => g.add(t, l),
                    None => l,
                });
            }
            let total = total.unwrap();
            let loss = g.scale_const(total, 1.0 / chunk.len() as f64);
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(CoreError::Diverged(epoch));
            }
            epoch_sum += loss_val;
            batches += 1.0;
            let grads = g.backward(loss);
            opt.step(&mut projector.params_mut(), &grads);
        }
        epoch_losses.push(epoch_sum / batches);
    }
    Ok((projector, epoch_losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::HashTextEncoder;
    use crate::datamodel::{build_block_targets, CategorySet, CountBinning};
    use crate::patchgroup::{full_resize_patch, quantized_points};
    use crate::synthdata::{generate_image, SynthConfig};

    fn bundle(d: usize) -> AnchorBundle {
        let binning = CountBinning::new(4).unwrap();
        let enc = HashTextEncoder::new(d);
        AnchorBundle {
            rats: crate::anchors::RatsAnchorSet::build(binning, 0.07, &enc).unwrap(),
            category: crate::anchors::build_anchor_tensor(
                &CategorySet::default_ihc(),
                binning,
                &enc,
            )
            .unwrap(),
        }
    }

    fn annotated_patches(count: usize, base_seed: u64) -> Vec<(Patch, BlockTargets)> {
        let binning = CountBinning::new(4).unwrap();
        (0..count)
            .map(|i| {
                let img = generate_image(
                    &SynthConfig {
                        image_size: 28,
                        num_neg: [1, 4],
                        num_pos: [0, 2],
                        cell_radius: [2.0, 3.0],
                        seed: base_seed + i as u64,
                        ..SynthConfig::default()
                    },
                    i,
                )
                .unwrap();
                let patch = full_resize_patch(&img, 28).unwrap();
                let t =
                    build_block_targets(&quantized_points(&patch), 28, 28, 14, binning, 2).unwrap();
                (patch, t)
            })
            .collect()
    }

    #[test]
    fn projector_identity_lift_is_exact() {
        let d = 16;
        let proj = Projector::identity_lift(d);
        let mut rng = SplitMix64::new(3);
        let v = Matrix::from_fn(5, d, |_, _| rng.next_gaussian());
        // lift each row then project back
        let mut lifted = Matrix::zeros(5, 2 * d);
        for r in 0..5 {
            for c in 0..d {
                let x = v.at(r, c);
                lifted.data[r * 2 * d + c] = x.max(0.0);
                lifted.data[r * 2 * d + d + c] = (-x).max(0.0);
            }
        }
        let mut g = Graph::new();
        let x = g.constant(lifted);
        let y = proj.forward_frozen(&mut g, x);
        for (a, b) in g.value(y).data.iter().zip(&v.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn student_single_layer_aggregation_is_projection() {
        let cfg = VitConfig {
            d_enc: 32,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            patch: 14,
            input_side: 28,
            layer_ids: vec![1],
        };
        let student = StudentModel::new(cfg, 16, 7).unwrap();
        assert_eq!(student.projectors.len(), 1);
        let data = annotated_patches(1, 50);
        let mut g = Graph::new();
        let f = student
            .forward_features(&mut g, &[data[0].0.clone()])
            .unwrap();
        assert_eq!(g.shape(f.tokens), (4, 16));
        assert_eq!(g.shape(f.pooled), (1, 16));
        // pooled = spatial mean of tokens
        let tv = g.value(f.tokens).clone();
        let pv = g.value(f.pooled).clone();
        for c in 0..16 {
            let mean: f64 = (0..4).map(|r| tv.at(r, c)).sum::<f64>() / 4.0;
            assert!((mean - pv.at(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn student_two_identical_layers_average_to_either() {
        // expose the same block twice: aggregation must equal the single
        // projection when the projectors share weights
        let cfg = VitConfig {
            d_enc: 32,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            patch: 14,
            input_side: 28,
            layer_ids: vec![1, 1],
        };
        let mut student = StudentModel::new(cfg, 16, 9).unwrap();
        // copy projector 0 into projector 1
        let w1 = student.projectors[0].w1.matrix().clone();
        let b1 = student.projectors[0].b1.matrix().clone();
        let w2 = student.projectors[0].w2.matrix().clone();
        let b2 = student.projectors[0].b2.matrix().clone();
        student.projectors[1].w1.set(w1);
        student.projectors[1].b1.set(b1);
        student.projectors[1].w2.set(w2);
        student.projectors[1].b2.set(b2);

        let data = annotated_patches(1, 60);
        let mut g = Graph::new();
        let both = student
            .forward_features(&mut g, &[data[0].0.clone()])
            .unwrap();

        let cfg_single = VitConfig {
            layer_ids: vec![1],
            ..student.vit.cfg.clone()
        };
        let mut single = StudentModel::new(cfg_single, 16, 9).unwrap();
        // same backbone weights (same seed) and same projector weights
        single.projectors[0].w1.set(student.projectors[0].w1.matrix().clone());
        single.projectors[0].b1.set(student.projectors[0].b1.matrix().clone());
        single.projectors[0].w2.set(student.projectors[0].w2.matrix().clone());
        single.projectors[0].b2.set(student.projectors[0].b2.matrix().clone());
        let mut g2 = Graph::new();
        let one = single
            .forward_features(&mut g2, &[data[0].0.clone()])
            .unwrap();
        for (a, b) in g.value(both.tokens).data.iter().zip(&g2.value(one.tokens).data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pretrain_zero_epochs_returns_initialization() {
        let b = bundle(32);
        let teacher = make_synthetic_teacher(0.0, 1, &b, 14, 28).unwrap();
        let proj = Projector::new("t0", teacher.d_enc(), 32, 5);
        let w1_before = proj.w1.matrix().clone();
        let data = annotated_patches(2, 70);
        let cfg = LossConfig::default();
        let (proj, losses) =
            pretrain_projector(&teacher, proj, &data, &b.category, &cfg, 0.07, 0, 2, 1e-3).unwrap();
        assert!(losses.is_empty());
        assert_eq!(proj.w1.matrix().data, w1_before.data);
    }

    #[test]
    fn pretrain_descends() {
        let b = bundle(32);
        let teacher = make_synthetic_teacher(0.0, 1, &b, 14, 28).unwrap();
        let proj = Projector::new("t0", teacher.d_enc(), 32, 5);
        let data = annotated_patches(6, 80);
        let mut cfg = LossConfig::default();
        // moderate regularization for speed; the descent property is what
        // this test pins down
        cfg.ot_reg = 0.2;
        cfg.ot_tol = 1e-4;
        let (_, losses) =
            pretrain_projector(&teacher, proj, &data, &b.category, &cfg, 0.07, 4, 3, 3e-3).unwrap();
        assert!(losses.len() == 4);
        assert!(
            losses.last().unwrap() <= losses.first().unwrap(),
            "{losses:?}"
        );
    }

    #[test]
    fn identity_lift_pretrained_teacher_counts_held_out_patches() {
        // sigma = 0 teacher with its exact projector: held-out patch-count
        // MAE must be tiny when no block saturates the open bin
        let b = bundle(64);
        let teacher = make_synthetic_teacher(0.0, 3, &b, 14, 28).unwrap();
        let proj = teacher.paired_projector();
        let binning = CountBinning::new(4).unwrap();
        let held_out = annotated_patches(10, 900);
        let mut abs_err = 0.0;
        for (patch, targets) in &held_out {
            let mut g = Graph::new();
            let out = teacher.forward_batch(&mut g, &[patch.clone()]).unwrap();
            let projected = proj.forward_frozen(&mut g, out.tokens);
            let mut predicted_total = 0.0;
            for cat in 0..2 {
                let p = similarity_probs_graph(&mut g, projected, &b.category, cat, 0.07, 1e-8);
                let d = expected_density_graph(&mut g, p, binning);
                predicted_total += g.value(d).sum();
            }
            let truth: f64 = (0..2)
                .map(|c| {
                    targets
                        .bins_for_category(c)
                        .iter()
                        .map(|&x| x as f64)
                        .sum::<f64>()
                })
                .sum();
            abs_err += (predicted_total - truth).abs();
        }
        let mae = abs_err / held_out.len() as f64;
        assert!(mae < 0.5, "held-out patch-count MAE {mae}");
    }
}
