//! Rank-aware teacher selection and the distillation step that routes the
//! selected teacher's knowledge into the student.

use serde::{Deserialize, Serialize};

use crate::anchors::RatsAnchorSet;
use crate::encoders::{Encoder, Projector, StudentModel, TeacherPool};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::losses::{distill_loss_graph, rank_loss_with_pairs, LossConfig};
use crate::patchgroup::{group_count_order, RankedPatchGroup};
use crate::rng::SplitMix64;
use crate::train::Adam;

/// Outcome of one per-batch teacher selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub batch_id: u64,
    pub rank_losses: Vec<f64>,
    pub selected_index: usize,
    pub tie_broken: bool,
}

/// Agglomeration strategies. `Rats` selects per batch by ranking skill;
/// `Equal` averages all teachers; `TDrop` keeps the hardest teacher and
/// drops the rest with fixed probability (ablation baselines).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Rats,
    Equal,
    TDrop,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Rats => write!(f, "rats"),
            Strategy::Equal => write!(f, "equal"),
            Strategy::TDrop => write!(f, "tdrop"),
        }
    }
}

/// Per-patch expected counts for one teacher on one ranked group: pooled
/// embedding -> projector -> cosine softmax over the ranking anchors ->
/// expectation over bin representatives.
pub fn predict_group_counts(
    teacher: &dyn Encoder,
    projector: &Projector,
    group: &RankedPatchGroup,
    anchors: &RatsAnchorSet,
) -> Result<Vec<f64>> {
    if projector.d_in() != teacher.d_enc() {
        return Err(CoreError::InvalidArgument(format!(
            "projector expects d_in {}, teacher emits {}",
            projector.d_in(),
            teacher.d_enc()
        )));
    }
    let mut g = Graph::new();
    let out = teacher.forward_batch(&mut g, &group.patches)?;
    let projected = projector.forward_frozen(&mut g, out.pooled);
    let emb = g.value(projected);
    Ok((0..emb.rows)
        .map(|r| anchors.decode_count(emb.row(r)))
        .collect())
}

/// Evaluates every teacher's count-ranking loss over the batch of groups and
/// picks the argmin; ties break to the lowest pool index.
pub fn select_teacher(
    pool: &TeacherPool,
    groups: &[RankedPatchGroup],
    anchors: &RatsAnchorSet,
    cfg: &LossConfig,
    batch_id: u64,
) -> Result<SelectionRecord> {
    if pool.is_empty() {
        return Err(CoreError::InvalidArgument("teacher pool is empty".into()));
    }
    if groups.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    let mut rank_losses = Vec::with_capacity(pool.len());
    for t in 0..pool.len() {
        let mut counts = Vec::with_capacity(groups.len());
        let mut pairs = Vec::with_capacity(groups.len());
        for group in groups {
            counts.push(predict_group_counts(
                pool.teachers[t].as_ref(),
                &pool.projectors[t],
                group,
                anchors,
            )?);
            pairs.push(group_count_order(group.k()));
        }
        rank_losses.push(rank_loss_with_pairs(&counts, &pairs, cfg.epsilon_rank));
    }
    let selected_index = argmin(&rank_losses);
    let tie_broken = rank_losses
        .iter()
        .enumerate()
        .any(|(i, &l)| i != selected_index && l == rank_losses[selected_index]);
    Ok(SelectionRecord {
        batch_id,
        rank_losses,
        selected_index,
        tie_broken,
    })
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Distillation loss of the student against one teacher over a flat list of
/// patches: token-grid alignment plus pooled alignment, equal weight.
fn distill_against(
    g: &mut Graph,
    student_tokens: Var,
    student_pooled: Var,
    pool: &TeacherPool,
    teacher_idx: usize,
    patches: &[crate::patchgroup::Patch],
    cfg: &LossConfig,
) -> Result<Var> {
    let t_out = pool.teachers[teacher_idx].forward_batch(g, patches)?;
    let proj = &pool.projectors[teacher_idx];
    let t_tokens = proj.forward_frozen(g, t_out.tokens);
    let t_pooled = proj.forward_frozen(g, t_out.pooled);
    let token_term = distill_loss_graph(g, student_tokens, t_tokens, cfg.norm_floor);
    let pooled_term = distill_loss_graph(g, student_pooled, t_pooled, cfg.norm_floor);
    Ok(g.add(token_term, pooled_term))
}

pub struct StepOutcome {
    pub loss: f64,
    pub records: Vec<SelectionRecord>,
}

/// One agglomeration step: select supervision per the strategy, compute the
/// distillation loss over all patches in the batch, and apply one optimizer
/// step to the student. Teachers and their projectors stay untouched.
#[allow(clippy::too_many_arguments)]
pub fn agglomerate_step(
    student: &mut StudentModel,
    pool: &TeacherPool,
    groups: &[RankedPatchGroup],
    anchors: &RatsAnchorSet,
    strategy: Strategy,
    per_group_selection: bool,
    tdrop_keep: f64,
    cfg: &LossConfig,
    opt: &mut Adam,
    batch_id: u64,
) -> Result<StepOutcome> {
    if groups.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    let all_patches: Vec<_> = groups
        .iter()
        .flat_map(|gr| gr.patches.iter().cloned())
        .collect();

    let mut g = Graph::new();
    let feats = student.forward_features(&mut g, &all_patches)?;
    let mut records = Vec::new();

    let loss = match strategy {
        Strategy::Rats if per_group_selection => {
            // per-group argmin; distill each group against its own teacher
            let seq = feats.seq;
            let mut terms: Vec<Var> = Vec::with_capacity(groups.len());
            let mut offset = 0usize;
            for (gi, group) in groups.iter().enumerate() {
                let rec = select_teacher(
                    pool,
                    std::slice::from_ref(group),
                    anchors,
                    cfg,
                    batch_id * 1_000_000 + gi as u64,
                )?;
                let k = group.k();
                let s_tokens = g.slice_rows(feats.tokens, offset * seq, k * seq);
                let s_pooled = g.slice_rows(feats.pooled, offset, k);
                let term = distill_against(
                    &mut g,
                    s_tokens,
                    s_pooled,
                    pool,
                    rec.selected_index,
                    &group.patches,
                    cfg,
                )?;
                terms.push(term);
                records.push(rec);
                offset += k;
            }
            let mut total = terms[0];
            for t in &terms[1..] {
                total = g.add(total, *t);
            }
            g.scale_const(total, 1.0 / terms.len() as f64)
        }
        Strategy::Rats => {
            let rec = select_teacher(pool, groups, anchors, cfg, batch_id)?;
            let loss = distill_against(
                &mut g,
                feats.tokens,
                feats.pooled,
                pool,
                rec.selected_index,
                &all_patches,
                cfg,
            )?;
            records.push(rec);
            loss
        }
        Strategy::Equal => {
            let mut terms = Vec::with_capacity(pool.len());
            for t in 0..pool.len() {
                terms.push(distill_against(
                    &mut g,
                    feats.tokens,
                    feats.pooled,
                    pool,
                    t,
                    &all_patches,
                    cfg,
                )?);
            }
            let mut total = terms[0];
            for t in &terms[1..] {
                total = g.add(total, *t);
            }
            g.scale_const(total, 1.0 / pool.len() as f64)
        }
        Strategy::TDrop => {
            // keep the teacher with the highest distillation loss, drop the
            // others with probability 1 - tdrop_keep
            let mut terms = Vec::with_capacity(pool.len());
            for t in 0..pool.len() {
                terms.push(distill_against(
                    &mut g,
                    feats.tokens,
                    feats.pooled,
                    pool,
                    t,
                    &all_patches,
                    cfg,
                )?);
            }
            let values: Vec<f64> = terms.iter().map(|&t| g.value(t).item()).collect();
            let hardest = values
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            let mut rng = SplitMix64::substream(batch_id, 0x7464_726f); // "tdro"
            let kept: Vec<usize> = (0..pool.len())
                .filter(|&i| i == hardest || rng.next_f64() < tdrop_keep)
                .collect();
            let mut total = terms[kept[0]];
            for &i in &kept[1..] {
                total = g.add(total, terms[i]);
            }
            g.scale_const(total, 1.0 / kept.len() as f64)
        }
    };

    let loss_val = g.value(loss).item();
    if !loss_val.is_finite() {
        return Err(CoreError::NonFiniteLoss(
            loss_val,
            format!("agglomeration batch {batch_id}"),
        ));
    }
    let grads = g.backward(loss);
    opt.step(&mut student.params_mut(), &grads);
    Ok(StepOutcome {
        loss: loss_val,
        records,
    })
}

/// Serializes selection records as newline-delimited JSON.
pub fn write_selection_log(records: &[SelectionRecord], path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(
            &serde_json::to_string(r)
                .map_err(|e| CoreError::Other(format!("selection log: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CoreError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::HashTextEncoder;
    use crate::datamodel::{CategorySet, CountBinning};
    use crate::encoders::{make_synthetic_teacher, AnchorBundle, StudentModel, VitConfig};
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

    fn sparse_group(seed: u64) -> RankedPatchGroup {
        let img = generate_image(
            &SynthConfig {
                image_size: 28,
                num_neg: [0, 3],
                num_pos: [0, 1],
                cell_radius: [2.0, 3.0],
                seed,
                ..SynthConfig::default()
            },
            0,
        )
        .unwrap();
        crate::patchgroup::make_ranked_group(&img, 28, &[5.0 / 8.0, 0.75, 7.0 / 8.0, 1.0], seed)
            .unwrap()
    }

    fn pool_with_sigmas(bundle: &AnchorBundle, sigmas: &[f64]) -> TeacherPool {
        let mut pool = TeacherPool::new();
        for (i, &s) in sigmas.iter().enumerate() {
            let t = make_synthetic_teacher(s, 100 + i as u64, bundle, 14, 28).unwrap();
            let proj = t.paired_projector();
            pool.push(format!("sigma{s}"), Box::new(t), proj);
        }
        pool
    }

    #[test]
    fn noiseless_predictions_match_true_counts() {
        let b = bundle(64);
        let pool = pool_with_sigmas(&b, &[0.0]);
        for seed in 0..8 {
            let group = sparse_group(seed);
            let counts = predict_group_counts(
                pool.teachers[0].as_ref(),
                &pool.projectors[0],
                &group,
                &b.rats,
            )
            .unwrap();
            for (got, want) in counts.iter().zip(group.true_counts()) {
                let clipped = want.min(4) as f64;
                assert!(
                    (got - clipped).abs() < 1e-3,
                    "seed {seed}: {got} vs {clipped}"
                );
                assert!(*got >= 0.0 && *got <= 4.0);
            }
        }
    }

    #[test]
    fn noiseless_rank_loss_is_zero() {
        let b = bundle(64);
        let pool = pool_with_sigmas(&b, &[0.0]);
        for seed in 20..30 {
            let group = sparse_group(seed);
            let counts = predict_group_counts(
                pool.teachers[0].as_ref(),
                &pool.projectors[0],
                &group,
                &b.rats,
            )
            .unwrap();
            let pairs = group_count_order(group.k());
            let l = rank_loss_with_pairs(&[counts], &[pairs], 0.0);
            assert!(l < 1e-9, "seed {seed}: rank loss {l}");
        }
    }

    #[test]
    fn single_teacher_selected_trivially() {
        let b = bundle(32);
        let pool = pool_with_sigmas(&b, &[0.0]);
        let groups = vec![sparse_group(1)];
        let rec = select_teacher(&pool, &groups, &b.rats, &LossConfig::default(), 0).unwrap();
        assert_eq!(rec.selected_index, 0);
    }

    #[test]
    fn identical_teachers_tie_break_to_lowest_index() {
        let b = bundle(32);
        let mut pool = TeacherPool::new();
        for name in ["a", "b"] {
            let t = make_synthetic_teacher(0.0, 42, &b, 14, 28).unwrap();
            let proj = t.paired_projector();
            pool.push(name, Box::new(t), proj);
        }
        let groups = vec![sparse_group(2)];
        let rec = select_teacher(&pool, &groups, &b.rats, &LossConfig::default(), 0).unwrap();
        assert_eq!(rec.selected_index, 0);
        assert!(rec.tie_broken);
    }

    #[test]
    fn oracle_teacher_wins_selection() {
        let b = bundle(64);
        let pool = pool_with_sigmas(&b, &[5.0, 0.0]);
        let mut wins = 0;
        let batches = 40;
        for batch in 0..batches {
            let groups: Vec<_> = (0..4)
                .map(|i| sparse_group(1000 + batch * 10 + i))
                .collect();
            let rec =
                select_teacher(&pool, &groups, &b.rats, &LossConfig::default(), batch).unwrap();
            assert_eq!(rec.selected_index, argmin(&rec.rank_losses));
            if rec.selected_index == 1 {
                wins += 1;
            }
        }
        assert!(
            wins as f64 >= 0.9 * batches as f64,
            "oracle won {wins}/{batches}"
        );
    }

    #[test]
    fn empty_batch_rejected() {
        let b = bundle(32);
        let pool = pool_with_sigmas(&b, &[0.0]);
        assert!(select_teacher(&pool, &[], &b.rats, &LossConfig::default(), 0).is_err());
    }

    fn tiny_student() -> StudentModel {
        StudentModel::new(
            VitConfig {
                d_enc: 32,
                blocks: 2,
                heads: 2,
                mlp_ratio: 2,
                patch: 14,
                input_side: 28,
                layer_ids: vec![],
            },
            32,
            11,
        )
        .unwrap()
    }

    #[test]
    fn zero_lr_step_keeps_student_unchanged() {
        let b = bundle(32);
        let pool = pool_with_sigmas(&b, &[0.0]);
        let mut student = tiny_student();
        let before = student.param_bytes();
        let mut opt = Adam::new(0.0);
        let groups = vec![sparse_group(7)];
        agglomerate_step(
            &mut student,
            &pool,
            &groups,
            &b.rats,
            Strategy::Rats,
            false,
            0.5,
            &LossConfig::default(),
            &mut opt,
            0,
        )
        .unwrap();
        assert_eq!(student.param_bytes(), before);
    }

    fn projector_bytes(pool: &TeacherPool) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &pool.projectors {
            for q in p.params() {
                for v in &q.value.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    #[test]
    fn teachers_frozen_through_steps() {
        let b = bundle(32);
        let pool = pool_with_sigmas(&b, &[0.0, 3.0]);
        let before = projector_bytes(&pool);
        let mut student = tiny_student();
        let mut opt = Adam::new(1e-3);
        for batch in 0..3 {
            let groups = vec![sparse_group(50 + batch), sparse_group(60 + batch)];
            agglomerate_step(
                &mut student,
                &pool,
                &groups,
                &b.rats,
                Strategy::Rats,
                false,
                0.5,
                &LossConfig::default(),
                &mut opt,
                batch,
            )
            .unwrap();
        }
        assert_eq!(projector_bytes(&pool), before);
        for t in &pool.teachers {
            assert!(t.param_bytes().is_empty()); // synthetic teachers carry no params
        }
    }

    #[test]
    fn fixed_batch_descent() {
        let b = bundle(32);
        let pool = pool_with_sigmas(&b, &[0.0]);
        let mut student = tiny_student();
        let mut opt = Adam::new(3e-4);
        let groups = vec![sparse_group(70), sparse_group(71)];
        let mut losses = Vec::new();
        for step in 0..10 {
            let out = agglomerate_step(
                &mut student,
                &pool,
                &groups,
                &b.rats,
                Strategy::Rats,
                false,
                0.5,
                &LossConfig::default(),
                &mut opt,
                step,
            )
            .unwrap();
            losses.push(out.loss);
        }
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "{losses:?}"
        );
    }

    #[test]
    fn equal_strategy_produces_no_records() {
        let b = bundle(32);
        let pool = pool_with_sigmas(&b, &[0.0, 2.0]);
        let mut student = tiny_student();
        let mut opt = Adam::new(1e-3);
        let groups = vec![sparse_group(80)];
        let out = agglomerate_step(
            &mut student,
            &pool,
            &groups,
            &b.rats,
            Strategy::Equal,
            false,
            0.5,
            &LossConfig::default(),
            &mut opt,
            0,
        )
        .unwrap();
        assert!(out.records.is_empty());
    }

    #[test]
    fn per_group_selection_emits_one_record_per_group() {
        let b = bundle(32);
        let pool = pool_with_sigmas(&b, &[0.0, 2.0]);
        let mut student = tiny_student();
        let mut opt = Adam::new(1e-3);
        let groups = vec![sparse_group(81), sparse_group(82), sparse_group(83)];
        let out = agglomerate_step(
            &mut student,
            &pool,
            &groups,
            &b.rats,
            Strategy::Rats,
            true,
            0.5,
            &LossConfig::default(),
            &mut opt,
            0,
        )
        .unwrap();
        assert_eq!(out.records.len(), 3);
    }
}
