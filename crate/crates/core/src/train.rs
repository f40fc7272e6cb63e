//! Optimization machinery and the two training loops: multi-teacher
//! agglomeration of the student and anchor-guided fine-tuning of the vision
//! decoder.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::anchors::{AnchorTensor, RatsAnchorSet};
use crate::datamodel::{build_block_targets, BlockTargets, CountBinning, Dataset};
use crate::densityhead::{
    expected_density_graph, similarity_probs_graph, DensityBundle, FeatureMap,
};
use crate::encoders::{StudentModel, TeacherPool, VisionDecoder};
use crate::error::{CoreError, Result};
use crate::graph::{Gradients, Graph, Param, Var};
use crate::losses::{count_loss_graph, se_pairs_mean_graph, HeadOutputs, LossConfig};
use crate::metrics::EvalRecord;
use crate::ot::grid_cost_matrix;
use crate::patchgroup::{full_resize_patch, make_ranked_group, quantized_points};
use crate::rats::{agglomerate_step, SelectionRecord, Strategy};
use crate::rng::SplitMix64;
use crate::tensor::Matrix;

// ── optimizer ────────────────────────────────────────────────────────────────

/// Adam with decoupled weight decay (AdamW when weight_decay > 0).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    state: BTreeMap<u64, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn with_weight_decay(lr: f64, weight_decay: f64) -> Self {
        Adam {
            weight_decay,
            ..Adam::new(lr)
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [&mut Param], grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params.iter_mut() {
            let Some(grad) = grads.get(p) else { continue };
            let (m, v) = self.state.entry(p.uid).or_insert_with(|| {
                (
                    Matrix::zeros(grad.rows, grad.cols),
                    Matrix::zeros(grad.rows, grad.cols),
                )
            });
            let value = Arc::make_mut(&mut p.value);
            for i in 0..grad.data.len() {
                let gi = grad.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                value.data[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps)
                    + self.weight_decay * value.data[i]);
            }
        }
    }

    /// Exposes the moment tensors for checkpointing.
    pub fn state_tensors(&self) -> Vec<(u64, &Matrix, &Matrix)> {
        self.state.iter().map(|(&u, (m, v))| (u, m, v)).collect()
    }

    pub fn restore_state(&mut self, t: u64, entries: Vec<(u64, Matrix, Matrix)>) {
        self.t = t;
        self.state = entries.into_iter().map(|(u, m, v)| (u, (m, v))).collect();
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// Cosine decay with linear warm-up, computed per step.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = (step - self.warmup_steps.min(step)) as f64 / span as f64;
        let progress = progress.clamp(0.0, 1.0);
        self.min_lr
            + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Deterministic Fisher-Yates shuffle of 0..n.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::substream(seed, 0x7368_7566); // "shuf"
    for i in (1..n).rev() {
        let j = rng.next_range(0, i as u64) as usize;
        idx.swap(i, j);
    }
    idx
}

// ── agglomeration loop ───────────────────────────────────────────────────────

pub struct AgglomerationParams {
    pub m_side: usize,
    pub ratios: Vec<f64>,
    /// patches per batch; must be a multiple of the group size k
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: CosineSchedule,
    pub weight_decay: f64,
    pub strategy: Strategy,
    pub per_group_selection: bool,
    pub tdrop_keep: f64,
    pub seed: u64,
}

pub struct AgglomerationOutcome {
    pub epoch_losses: Vec<f64>,
    pub records: Vec<SelectionRecord>,
}

/// Trains the student by rank-aware distillation over the dataset images at
/// `indices`. One ranked group is built per image per epoch.
pub fn run_agglomeration(
    student: &mut StudentModel,
    pool: &TeacherPool,
    dataset: &Dataset,
    indices: &[usize],
    anchors: &RatsAnchorSet,
    loss_cfg: &LossConfig,
    params: &AgglomerationParams,
) -> Result<AgglomerationOutcome> {
    if pool.is_empty() {
        return Err(CoreError::InvalidArgument("teacher pool is empty".into()));
    }
    let k = params.ratios.len();
    if k == 0 || params.batch_size % k != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "batch size {} is not a multiple of the group size {k}",
            params.batch_size
        )));
    }
    let groups_per_batch = params.batch_size / k;
    let mut records = Vec::new();
    let mut epoch_losses = Vec::with_capacity(params.epochs);
    let mut opt = Adam::with_weight_decay(params.schedule.base_lr, params.weight_decay);
    let mut step = 0usize;
    let mut batch_id = 0u64;

    for epoch in 0..params.epochs {
        let order = shuffled_indices(indices.len(), params.seed ^ (epoch as u64) << 17);
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(groups_per_batch) {
            let mut groups = Vec::with_capacity(chunk.len());
            for &oi in chunk {
                let image = dataset.get(indices[oi])?;
                let group_seed = SplitMix64::substream(
                    params.seed,
                    (epoch as u64) << 32 | indices[oi] as u64,
                )
                .next_u64();
                groups.push(make_ranked_group(
                    &image,
                    params.m_side,
                    &params.ratios,
                    group_seed,
                )?);
            }
            opt.set_lr(params.schedule.lr_at(step));
            let out = agglomerate_step(
                student,
                pool,
                &groups,
                anchors,
                params.strategy,
                params.per_group_selection,
                params.tdrop_keep,
                loss_cfg,
                &mut opt,
                batch_id,
            )?;
            epoch_sum += out.loss;
            records.extend(out.records);
            step += 1;
            batch_id += 1;
            batches += 1;
        }
        let mean = epoch_sum / batches.max(1) as f64;
        log::info!("agglomeration epoch {epoch}: mean distill loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(AgglomerationOutcome {
        epoch_losses,
        records,
    })
}

// ── fine-tuning loop ─────────────────────────────────────────────────────────

pub struct FinetuneParams {
    pub m_side: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: CosineSchedule,
    pub seed: u64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct FinetuneEpochLoss {
    pub total: f64,
    pub count_part: f64,
    pub se_part: f64,
}

/// Cached frozen-student features plus block targets for one image.
pub struct CachedSample {
    pub features: Matrix,
    pub targets: BlockTargets,
}

/// Runs every dataset image through the frozen student once.
pub fn cache_student_features(
    student: &StudentModel,
    dataset: &Dataset,
    indices: &[usize],
    m_side: usize,
    binning: CountBinning,
    m: usize,
) -> Result<Vec<CachedSample>> {
    assert!(student.is_frozen(), "cache requires a frozen student");
    let p = student.vit.cfg.patch;
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let image = dataset.get(i)?;
        let patch = full_resize_patch(&image, m_side)?;
        let targets = build_block_targets(&quantized_points(&patch), m_side, m_side, p, binning, m)?;
        let mut g = Graph::new();
        let feats = student.forward_features(&mut g, &[patch])?;
        out.push(CachedSample {
            features: g.value(feats.tokens).clone(),
            targets,
        });
    }
    Ok(out)
}

/// Trains the vision decoder with the full counting objective against cached
/// frozen-student features. Returns per-epoch loss components.
pub fn run_finetune(
    decoder: &mut VisionDecoder,
    cache: &[CachedSample],
    anchors: &AnchorTensor,
    binning: CountBinning,
    loss_cfg: &LossConfig,
    params: &FinetuneParams,
) -> Result<Vec<FinetuneEpochLoss>> {
    if cache.is_empty() {
        return Err(CoreError::InvalidArgument("empty fine-tune set".into()));
    }
    let grid_h = cache[0].targets.h_blocks;
    let grid_w = cache[0].targets.w_blocks;
    let seq = grid_h * grid_w;
    let cost = Arc::new(grid_cost_matrix(grid_h, grid_w));
    let mut opt = Adam::new(params.schedule.base_lr);
    let mut step = 0usize;
    let mut history = Vec::with_capacity(params.epochs);

    for epoch in 0..params.epochs {
        let order = shuffled_indices(cache.len(), params.seed ^ 0xF1E7 ^ (epoch as u64) << 13);
        let (mut sum_total, mut sum_count, mut sum_se) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(params.batch_size.max(1)) {
            let mut g = Graph::new();
            // stack image features into one batched matrix
            let d = cache[chunk[0]].features.cols;
            let mut stacked = Matrix::zeros(chunk.len() * seq, d);
            for (bi, &ci) in chunk.iter().enumerate() {
                for r in 0..seq {
                    stacked
                        .row_mut(bi * seq + r)
                        .copy_from_slice(cache[ci].features.row(r));
                }
            }
            let feats = g.constant(stacked);
            let decoded = decoder.forward(&mut g, feats);

            let mut count_total: Option<Var> = None;
            let mut se_total: Option<Var> = None;
            for (bi, &ci) in chunk.iter().enumerate() {
                let img = g.slice_rows(decoded, bi * seq, seq);
                let mut probs = Vec::with_capacity(anchors.m);
                let mut densities = Vec::with_capacity(anchors.m);
                for cat in 0..anchors.m {
                    let p = similarity_probs_graph(
                        &mut g,
                        img,
                        anchors,
                        cat,
                        params.temperature,
                        loss_cfg.norm_floor,
                    );
                    let dens = expected_density_graph(&mut g, p, binning);
                    probs.push(p);
                    densities.push(dens);
                }
                let head = HeadOutputs { probs, densities };
                let cnt = count_loss_graph(&mut g, &head, &cache[ci].targets, cost.clone(), loss_cfg)?;
                count_total = Some(match count_total {
                    Some(t) => g.add(t, cnt),
                    None => cnt,
                });
                if let Some(se) =
                    se_pairs_mean_graph(&mut g, &head.densities, loss_cfg.alpha, loss_cfg.tau)
                {
                    se_total = Some(match se_total {
                        Some(t) => g.add(t, se),
                        None => se,
                    });
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let count_mean = g.scale_const(count_total.unwrap(), inv);
            let loss = match se_total {
                Some(se) if loss_cfg.gamma > 0.0 => {
                    let se_mean = g.scale_const(se, inv);
                    let weighted = g.scale_const(se_mean, loss_cfg.gamma);
                    g.add(count_mean, weighted)
                }
                _ => count_mean,
            };
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(CoreError::Diverged(epoch));
            }
            sum_total += loss_val;
            sum_count += g.value(count_mean).item();
            sum_se += se_total.map(|v| g.value(v).item() * inv).unwrap_or(0.0);
            opt.set_lr(params.schedule.lr_at(step));
            let grads = g.backward(loss);
            opt.step(&mut decoder.params_mut(), &grads);
            step += 1;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        let rec = FinetuneEpochLoss {
            total: sum_total / b,
            count_part: sum_count / b,
            se_part: sum_se / b,
        };
        log::info!(
            "finetune epoch {epoch}: total {:.5} (count {:.5}, se {:.5})",
            rec.total,
            rec.count_part,
            rec.se_part
        );
        history.push(rec);
    }
    Ok(history)
}

/// End-to-end fine-tuning with the encoder unfrozen: every step runs the
/// full student forward and updates student and decoder jointly. Supported
/// for the explicit unfreeze flag; markedly slower than the cached path.
#[allow(clippy::too_many_arguments)]
pub fn run_finetune_unfrozen(
    student: &mut StudentModel,
    decoder: &mut VisionDecoder,
    dataset: &Dataset,
    indices: &[usize],
    anchors: &AnchorTensor,
    binning: CountBinning,
    loss_cfg: &LossConfig,
    params: &FinetuneParams,
) -> Result<Vec<FinetuneEpochLoss>> {
    if indices.is_empty() {
        return Err(CoreError::InvalidArgument("empty fine-tune set".into()));
    }
    let p = student.vit.cfg.patch;
    let grid = params.m_side / p;
    let seq = grid * grid;
    let m = anchors.m;
    let cost = Arc::new(grid_cost_matrix(grid, grid));
    let mut opt = Adam::new(params.schedule.base_lr);
    let mut step = 0usize;
    let mut history = Vec::with_capacity(params.epochs);

    for epoch in 0..params.epochs {
        let order = shuffled_indices(indices.len(), params.seed ^ 0xF1E8 ^ (epoch as u64) << 13);
        let (mut sum_total, mut sum_count, mut sum_se) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(params.batch_size.max(1)) {
            let mut patches = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &oi in chunk {
                let image = dataset.get(indices[oi])?;
                let patch = full_resize_patch(&image, params.m_side)?;
                targets.push(build_block_targets(
                    &quantized_points(&patch),
                    params.m_side,
                    params.m_side,
                    p,
                    binning,
                    m,
                )?);
                patches.push(patch);
            }
            let mut g = Graph::new();
            let feats = student.forward_features(&mut g, &patches)?;
            let decoded = decoder.forward(&mut g, feats.tokens);

            let mut count_total: Option<Var> = None;
            let mut se_total: Option<Var> = None;
            for (bi, t) in targets.iter().enumerate() {
                let img = g.slice_rows(decoded, bi * seq, seq);
                let mut probs = Vec::with_capacity(m);
                let mut densities = Vec::with_capacity(m);
                for cat in 0..m {
                    let pm = similarity_probs_graph(
                        &mut g,
                        img,
                        anchors,
                        cat,
                        params.temperature,
                        loss_cfg.norm_floor,
                    );
                    let dens = expected_density_graph(&mut g, pm, binning);
                    probs.push(pm);
                    densities.push(dens);
                }
                let head = HeadOutputs { probs, densities };
                let cnt = count_loss_graph(&mut g, &head, t, cost.clone(), loss_cfg)?;
                count_total = Some(match count_total {
                    Some(acc) => g.add(acc, cnt),
                    None => cnt,
                });
                if let Some(se) =
                    se_pairs_mean_graph(&mut g, &head.densities, loss_cfg.alpha, loss_cfg.tau)
                {
                    se_total = Some(match se_total {
                        Some(acc) => g.add(acc, se),
                        None => se,
                    });
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let count_mean = g.scale_const(count_total.unwrap(), inv);
            let loss = match se_total {
                Some(se) if loss_cfg.gamma > 0.0 => {
                    let se_mean = g.scale_const(se, inv);
                    let weighted = g.scale_const(se_mean, loss_cfg.gamma);
                    g.add(count_mean, weighted)
                }
                _ => count_mean,
            };
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(CoreError::Diverged(epoch));
            }
            sum_total += loss_val;
            sum_count += g.value(count_mean).item();
            sum_se += se_total.map(|v| g.value(v).item() * inv).unwrap_or(0.0);
            opt.set_lr(params.schedule.lr_at(step));
            let grads = g.backward(loss);
            let mut all_params = student.params_mut();
            all_params.extend(decoder.params_mut());
            opt.step(&mut all_params, &grads);
            step += 1;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        history.push(FinetuneEpochLoss {
            total: sum_total / b,
            count_part: sum_count / b,
            se_part: sum_se / b,
        });
    }
    Ok(history)
}

// ── inference / evaluation ───────────────────────────────────────────────────

/// Full-image prediction: frozen student + decoder + anchor head.
pub fn predict_image(
    student: &StudentModel,
    decoder: &VisionDecoder,
    anchors: &AnchorTensor,
    binning: CountBinning,
    temperature: f64,
    norm_floor: f64,
    patch: &crate::patchgroup::Patch,
) -> Result<DensityBundle> {
    let p = student.vit.cfg.patch;
    let grid = patch.side / p;
    let mut g = Graph::new();
    let feats = student.forward_features(&mut g, std::slice::from_ref(patch))?;
    let decoded = decoder.forward_frozen(&mut g, feats.tokens);
    let fm = FeatureMap::new(grid, grid, g.value(decoded).clone());
    Ok(crate::densityhead::similarity_bundle(
        &fm,
        anchors,
        binning,
        temperature,
        norm_floor,
    ))
}

/// Evaluates predicted vs ground-truth counts per image over a dataset split.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    student: &StudentModel,
    decoder: &VisionDecoder,
    anchors: &AnchorTensor,
    binning: CountBinning,
    temperature: f64,
    norm_floor: f64,
    dataset: &Dataset,
    indices: &[usize],
    m_side: usize,
) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::with_capacity(indices.len());
    for &i in indices {
        let image = dataset.get(i)?;
        let patch = full_resize_patch(&image, m_side)?;
        let bundle = predict_image(
            student, decoder, anchors, binning, temperature, norm_floor, &patch,
        )?;
        let predicted = bundle.total_counts();
        let ground_truth: Vec<f64> = (0..anchors.m)
            .map(|c| image.count_for_category(c) as f64)
            .collect();
        records.push(EvalRecord {
            id: image.id,
            predicted,
            ground_truth,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_toward_minimum() {
        // minimize (x - 3)^2 by hand-fed gradients
        let mut p = Param::new("x", Matrix::scalar(0.0));
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            let x = p.value.item();
            let mut g = Graph::new();
            let xv = g.param(&p);
            let c = g.scalar(3.0);
            let d = g.sub(xv, c);
            let sq = g.mul_elem(d, d);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            opt.step(&mut [&mut p], &grads);
            let _ = x;
        }
        assert!((p.value.item() - 3.0).abs() < 1e-3, "{}", p.value.item());
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = CosineSchedule {
            base_lr: 1e-3,
            min_lr: 1e-6,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert!(s.lr_at(0) < s.lr_at(9));
        assert!((s.lr_at(9) - 1e-3).abs() < 1.01e-4);
        assert!((s.lr_at(10) - 1e-3).abs() < 1e-9);
        assert!(s.lr_at(60) < 1e-3);
        assert!((s.lr_at(110) - 1e-6).abs() < 1e-9);
        assert!(s.lr_at(10_000) >= 1e-6);
    }

    #[test]
    fn shuffle_is_deterministic_permutation() {
        let a = shuffled_indices(100, 5);
        let b = shuffled_indices(100, 5);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(a, shuffled_indices(100, 6));
    }
}
