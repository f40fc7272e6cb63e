//! Training objectives: feature distillation, count ranking, blockwise
//! cross-entropy, distribution matching with entropic 2-Wasserstein
//! transport, spatial exclusivity, and their weighted combinations.
//!
//! Each loss has a tape variant (`*_graph`, differentiable) and a plain
//! evaluator built on top of it.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datamodel::BlockTargets;
use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::ot::{grid_cost_matrix, sinkhorn_w2_graph, OtParams};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// ranking margin
    pub epsilon_rank: f64,
    /// exclusivity sigmoid steepness
    pub alpha: f64,
    /// exclusivity confidence threshold
    pub tau: f64,
    /// per-category weights, index order follows the category set
    /// (negative first -> [0.4, 0.6] puts 0.6 on positive cells)
    pub lambda: Vec<f64>,
    /// weight of the exclusivity term in the total objective
    pub gamma: f64,
    /// entropic OT regularization
    pub ot_reg: f64,
    /// entropic OT iteration cap
    pub ot_iters: usize,
    /// entropic OT marginal tolerance (0 = fixed iteration count)
    pub ot_tol: f64,
    pub norm_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon_rank: 0.0,
            alpha: 10.0,
            tau: 0.3,
            lambda: vec![0.4, 0.6],
            gamma: 0.5,
            ot_reg: 0.05,
            ot_iters: 500,
            ot_tol: 1e-7,
            norm_floor: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn ot_params(&self) -> OtParams {
        OtParams {
            reg: self.ot_reg,
            max_iters: self.ot_iters,
            tol: self.ot_tol,
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.epsilon_rank < 0.0 {
            return Err(CoreError::InvalidArgument("epsilon_rank must be >= 0".into()));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("tau", self.tau),
            ("gamma", self.gamma),
            ("ot_reg", self.ot_reg),
            ("norm_floor", self.norm_floor),
        ] {
            if v < 0.0 {
                return Err(CoreError::InvalidArgument(format!("{name} must be >= 0")));
            }
        }
        if self.lambda.len() != m {
            return Err(CoreError::InvalidArgument(format!(
                "lambda has {} entries for m = {m} categories",
                self.lambda.len()
            )));
        }
        if self.lambda.iter().any(|&l| l <= 0.0) {
            return Err(CoreError::InvalidArgument("lambda entries must be > 0".into()));
        }
        Ok(())
    }
}

// ── distillation ─────────────────────────────────────────────────────────────

/// Mean over token rows of (1 - cos(s, t)) + smoothL1(s - t). Rows where
/// either side has norm below `norm_floor` contribute a worst-case cosine
/// term of 1 and are logged.
pub fn distill_loss_graph(g: &mut Graph, student: Var, teacher: Var, norm_floor: f64) -> Var {
    {
        let (sv, tv) = (g.value(student), g.value(teacher));
        assert_eq!((sv.rows, sv.cols), (tv.rows, tv.cols), "distill shapes");
        let mut degenerate = 0usize;
        for r in 0..sv.rows {
            let ns: f64 = sv.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            let nt: f64 = tv.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if ns < norm_floor || nt < norm_floor {
                degenerate += 1;
            }
        }
        if degenerate > 0 {
            log::warn!("distill_loss: {degenerate} zero-norm token row(s), cosine term pinned at 1");
        }
    }
    let cos = g.rowwise_cosine(student, teacher, norm_floor);
    let neg = g.scale_const(cos, -1.0);
    let cos_term = g.add_const(neg, 1.0);
    let sl1 = g.smooth_l1_row_mean(student, teacher);
    let per_row = g.add(cos_term, sl1);
    g.mean_all(per_row)
}

pub fn distill_loss(student: &Matrix, teacher: &Matrix, norm_floor: f64) -> f64 {
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let t = g.constant(teacher.clone());
    let l = distill_loss_graph(&mut g, s, t, norm_floor);
    g.value(l).item()
}

// ── count ranking ────────────────────────────────────────────────────────────

/// Summed hinge over ranked pairs: max(0, -(C_j - C_i) + eps) for each
/// (i, j) in each group's pair set.
pub fn rank_loss_graph(
    g: &mut Graph,
    counts_per_group: &[Vec<Var>],
    pairs_per_group: &[Vec<(usize, usize)>],
    epsilon: f64,
) -> Var {
    assert_eq!(counts_per_group.len(), pairs_per_group.len());
    let mut violations: Vec<Var> = Vec::new();
    for (counts, pairs) in counts_per_group.iter().zip(pairs_per_group) {
        for &(i, j) in pairs {
            let diff = g.sub(counts[i], counts[j]); // C_i - C_j
            let shifted = g.add_const(diff, epsilon);
            violations.push(g.relu(shifted));
        }
    }
    if violations.is_empty() {
        return g.scalar(0.0);
    }
    let stacked = g.concat_scalars(&violations);
    g.sum_all(stacked)
}

pub fn rank_loss_with_pairs(
    counts_per_group: &[Vec<f64>],
    pairs_per_group: &[Vec<(usize, usize)>],
    epsilon: f64,
) -> f64 {
    let mut total = 0.0;
    for (counts, pairs) in counts_per_group.iter().zip(pairs_per_group) {
        for &(i, j) in pairs {
            total += (counts[i] - counts[j] + epsilon).max(0.0);
        }
    }
    total
}

/// Rank loss with the full i < j pair set per group.
pub fn rank_loss(counts_per_group: &[Vec<f64>], epsilon: f64) -> f64 {
    let pairs: Vec<_> = counts_per_group
        .iter()
        .map(|c| crate::patchgroup::group_count_order(c.len()))
        .collect();
    rank_loss_with_pairs(counts_per_group, &pairs, epsilon)
}

// ── blockwise cross-entropy ──────────────────────────────────────────────────

/// -sum over blocks of log p_hat[block, target_bin], probability clamped at
/// `norm_floor` before the log (clamps are logged).
pub fn ce_loss_graph(g: &mut Graph, p_hat: Var, target_bins: &[usize], norm_floor: f64) -> Var {
    {
        let pv = g.value(p_hat);
        assert_eq!(pv.rows, target_bins.len(), "one target bin per block");
        let clamped = target_bins
            .iter()
            .enumerate()
            .filter(|(r, &b)| pv.at(*r, b) < norm_floor)
            .count();
        if clamped > 0 {
            log::warn!("ce_loss: {clamped} target probability(ies) clamped at {norm_floor}");
        }
    }
    let picked = g.select_cols(p_hat, target_bins.to_vec());
    let lp = g.ln_clamped(picked, norm_floor);
    let s = g.sum_all(lp);
    g.scale_const(s, -1.0)
}

pub fn ce_loss(p_hat: &Matrix, target_bins: &[usize], norm_floor: f64) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(p_hat.clone());
    let l = ce_loss_graph(&mut g, p, target_bins, norm_floor);
    g.value(l).item()
}

// ── 2-Wasserstein transport cost (spec surface over the ot module) ──────────

/// Entropic squared 2-Wasserstein cost between two normalized densities on an
/// h x w block grid.
pub fn w2_transport_cost(mu: &[f64], nu: &[f64], h: usize, w: usize, cfg: &LossConfig) -> Result<f64> {
    let cost = grid_cost_matrix(h, w);
    crate::ot::sinkhorn_w2(mu, nu, &cost, cfg.ot_params())
}

// ── distribution matching ────────────────────────────────────────────────────

/// |‖gt‖1 - ‖hat‖1| + W2²(gt/‖gt‖1, hat/‖hat‖1) + ½‖gt‖1 ‖gt/‖gt‖1 - hat/‖hat‖1‖1.
/// If either total mass falls below `norm_floor` the transport and L1 terms
/// are dropped and only the count term remains.
pub fn dm_loss_graph(
    g: &mut Graph,
    d_gt: Var,
    d_hat: Var,
    cost: Arc<Matrix>,
    cfg: &LossConfig,
) -> Result<Var> {
    {
        let (gv, hv) = (g.value(d_gt), g.value(d_hat));
        assert_eq!((gv.rows, gv.cols), (hv.rows, hv.cols), "dm shapes");
        if gv.data.iter().any(|&x| x < 0.0) || hv.data.iter().any(|&x| x < 0.0) {
            return Err(CoreError::InvalidArgument(
                "dm_loss: negative density entries".into(),
            ));
        }
    }
    let mass_gt = g.sum_all(d_gt);
    let mass_hat = g.sum_all(d_hat);
    let diff = g.sub(mass_gt, mass_hat);
    let count_term = g.abs(diff);

    let (mg, mh) = (g.value(mass_gt).item(), g.value(mass_hat).item());
    if mg < cfg.norm_floor || mh < cfg.norm_floor {
        return Ok(count_term);
    }

    let inv_gt = g.recip(mass_gt);
    let inv_hat = g.recip(mass_hat);
    let mu = g.scale_by_scalar(d_gt, inv_gt);
    let nu = g.scale_by_scalar(d_hat, inv_hat);

    let w2 = sinkhorn_w2_graph(g, mu, nu, cost, cfg.ot_params())?;

    let delta = g.sub(mu, nu);
    let l1 = g.abs(delta);
    let l1_sum = g.sum_all(l1);
    let half_mass = g.scale_const(mass_gt, 0.5);
    let l1_term = g.mul_elem(half_mass, l1_sum);

    let a = g.add(count_term, w2);
    Ok(g.add(a, l1_term))
}

pub fn dm_loss(d_gt: &[f64], d_hat: &[f64], h: usize, w: usize, cfg: &LossConfig) -> Result<f64> {
    assert_eq!(d_gt.len(), h * w);
    let cost = Arc::new(grid_cost_matrix(h, w));
    let mut g = Graph::new();
    let gt = g.constant(Matrix::column(d_gt));
    let hat = g.constant(Matrix::column(d_hat));
    let l = dm_loss_graph(&mut g, gt, hat, cost, cfg)?;
    Ok(g.value(l).item())
}

// ── spatial exclusivity ──────────────────────────────────────────────────────

/// Mean over blocks of sigmoid(alpha (D1 - tau)) * sigmoid(alpha (D2 - tau)).
pub fn se_loss_graph(g: &mut Graph, d1: Var, d2: Var, alpha: f64, tau: f64) -> Var {
    let s1 = {
        let shifted = g.add_const(d1, -tau);
        let scaled = g.scale_const(shifted, alpha);
        g.sigmoid(scaled)
    };
    let s2 = {
        let shifted = g.add_const(d2, -tau);
        let scaled = g.scale_const(shifted, alpha);
        g.sigmoid(scaled)
    };
    let prod = g.mul_elem(s1, s2);
    g.mean_all(prod)
}

pub fn se_loss(d1: &[f64], d2: &[f64], alpha: f64, tau: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Matrix::column(d1));
    let b = g.constant(Matrix::column(d2));
    let l = se_loss_graph(&mut g, a, b, alpha, tau);
    g.value(l).item()
}

// ── combined objectives ──────────────────────────────────────────────────────

/// Per-category predicted head outputs for one image.
pub struct HeadOutputs {
    /// per category: (h*w) x (n+1) probabilities
    pub probs: Vec<Var>,
    /// per category: (h*w) x 1 expected densities
    pub densities: Vec<Var>,
}

/// sum_i lambda_i (ce_i + dm_i) with the truncated ground-truth density
/// min(count, n) as the DM target.
pub fn count_loss_graph(
    g: &mut Graph,
    head: &HeadOutputs,
    targets: &BlockTargets,
    cost: Arc<Matrix>,
    cfg: &LossConfig,
) -> Result<Var> {
    let m = targets.m;
    cfg.validate(m)?;
    assert_eq!(head.probs.len(), m, "one probability map per category");
    let mut total: Option<Var> = None;
    for cat in 0..m {
        let bins = targets.bins_for_category(cat);
        let ce = ce_loss_graph(g, head.probs[cat], &bins, cfg.norm_floor);
        let gt = g.constant(Matrix::column(&targets.density_for_category(cat)));
        let dm = dm_loss_graph(g, gt, head.densities[cat], cost.clone(), cfg)?;
        let part = g.add(ce, dm);
        let weighted = g.scale_const(part, cfg.lambda[cat]);
        total = Some(match total {
            Some(t) => g.add(t, weighted),
            None => weighted,
        });
    }
    Ok(total.expect("m >= 1"))
}

/// Mean of the exclusivity loss over all unordered category pairs; `None`
/// for a single category.
pub fn se_pairs_mean_graph(
    g: &mut Graph,
    densities: &[Var],
    alpha: f64,
    tau: f64,
) -> Option<Var> {
    let m = densities.len();
    if m < 2 {
        return None;
    }
    let mut se_terms: Vec<Var> = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            se_terms.push(se_loss_graph(g, densities[a], densities[b], alpha, tau));
        }
    }
    let mut se = se_terms[0];
    for t in &se_terms[1..] {
        se = g.add(se, *t);
    }
    Some(g.scale_const(se, 1.0 / se_terms.len() as f64))
}

/// count loss + gamma * SE loss. For m > 2 the exclusivity term averages
/// over all unordered category pairs.
pub fn total_loss_graph(
    g: &mut Graph,
    head: &HeadOutputs,
    targets: &BlockTargets,
    cost: Arc<Matrix>,
    cfg: &LossConfig,
) -> Result<Var> {
    let cnt = count_loss_graph(g, head, targets, cost, cfg)?;
    if cfg.gamma == 0.0 || targets.m < 2 {
        return Ok(cnt);
    }
    let se_mean = se_pairs_mean_graph(g, &head.densities, cfg.alpha, cfg.tau)
        .expect("m >= 2 checked above");
    let weighted = g.scale_const(se_mean, cfg.gamma);
    Ok(g.add(cnt, weighted))
}

/// Plain-value count loss over explicit per-category predictions.
pub fn count_loss(
    probs: &[Matrix],
    densities: &[Vec<f64>],
    targets: &BlockTargets,
    cfg: &LossConfig,
) -> Result<f64> {
    let (head, mut g, cost) = head_from_values(probs, densities, targets);
    let l = count_loss_graph(&mut g, &head, targets, cost, cfg)?;
    Ok(g.value(l).item())
}

/// Plain-value total loss over explicit per-category predictions.
pub fn total_loss(
    probs: &[Matrix],
    densities: &[Vec<f64>],
    targets: &BlockTargets,
    cfg: &LossConfig,
) -> Result<f64> {
    let (head, mut g, cost) = head_from_values(probs, densities, targets);
    let l = total_loss_graph(&mut g, &head, targets, cost, cfg)?;
    Ok(g.value(l).item())
}

fn head_from_values(
    probs: &[Matrix],
    densities: &[Vec<f64>],
    targets: &BlockTargets,
) -> (HeadOutputs, Graph, Arc<Matrix>) {
    let mut g = Graph::new();
    let head = HeadOutputs {
        probs: probs.iter().map(|p| g.constant(p.clone())).collect(),
        densities: densities
            .iter()
            .map(|d| g.constant(Matrix::column(d)))
            .collect(),
    };
    let cost = Arc::new(grid_cost_matrix(targets.h_blocks, targets.w_blocks));
    (head, g, cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{build_block_targets, CountBinning, PointAnnotation};
    use crate::densityhead::one_hot_probs;
    use crate::rng::SplitMix64;

    #[test]
    fn distill_identical_is_zero() {
        let m = Matrix::from_vec(2, 2, vec![0.3, -0.7, 1.2, 0.4]);
        assert!(distill_loss(&m, &m, 1e-8).abs() < 1e-12);
    }

    #[test]
    fn distill_hand_cases() {
        // s=(1,0), t=(0,1): (1-0) + mean(0.5, 0.5) = 1.5
        let s = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
        let t = Matrix::from_vec(1, 2, vec![0.0, 1.0]);
        assert!((distill_loss(&s, &t, 1e-8) - 1.5).abs() < 1e-12);
        // t = -s: (1-(-1)) + mean(smoothL1(2), smoothL1(0)) = 2 + 0.75 = 2.75
        let t = Matrix::from_vec(1, 2, vec![-1.0, 0.0]);
        assert!((distill_loss(&s, &t, 1e-8) - 2.75).abs() < 1e-12);
    }

    #[test]
    fn distill_zero_norm_pins_cosine_term() {
        let s = Matrix::from_vec(1, 2, vec![0.0, 0.0]);
        let t = Matrix::from_vec(1, 2, vec![0.5, 0.0]);
        // cosine term 1 (worst case), smoothL1 mean = 0.125/2... = (0.5^2/2)/2
        let want = 1.0 + (0.5f64 * 0.5 * 0.5) / 2.0;
        assert!((distill_loss(&s, &t, 1e-8) - want).abs() < 1e-12);
    }

    #[test]
    fn rank_loss_cases() {
        assert_eq!(rank_loss(&[vec![0.0, 1.0, 2.0, 3.0]], 0.0), 0.0);
        assert_eq!(rank_loss(&[vec![3.0, 2.0, 1.0, 0.0]], 0.0), 10.0);
        assert_eq!(rank_loss(&[vec![5.0, 5.0, 5.0, 5.0]], 0.0), 0.0);
        // margin makes ties costly
        assert!((rank_loss(&[vec![1.0, 1.0]], 0.5) - 0.5).abs() < 1e-12);
        // groups sum
        assert_eq!(
            rank_loss(&[vec![3.0, 2.0, 1.0, 0.0], vec![0.0, 1.0]], 0.0),
            10.0
        );
    }

    #[test]
    fn rank_loss_order_invariance_property() {
        let mut rng = SplitMix64::new(4);
        for _ in 0..50 {
            let counts: Vec<f64> = (0..5).map(|_| rng.next_f64() * 4.0).collect();
            let before = rank_loss(&[counts.clone()], 0.0);
            // strictly increasing transform x -> exp(x) + 2x preserves order
            let mapped: Vec<f64> = counts.iter().map(|&c| c.exp() + 2.0 * c).collect();
            let after = rank_loss(&[mapped], 0.0);
            if before == 0.0 {
                assert_eq!(after, 0.0);
            }
        }
    }

    #[test]
    fn ce_loss_cases() {
        // perfect one-hot predictions: 0
        let p = one_hot_probs(&[1, 3, 0], 5);
        assert!(ce_loss(&p, &[1, 3, 0], 1e-12).abs() < 1e-9);
        // uniform, one block: ln 5
        let p = Matrix::from_vec(1, 5, vec![0.2; 5]);
        assert!((ce_loss(&p, &[2], 1e-12) - 5.0f64.ln()).abs() < 1e-12);
        // two uniform blocks: additive
        let p = Matrix::from_vec(2, 5, vec![0.2; 10]);
        assert!((ce_loss(&p, &[0, 4], 1e-12) - 2.0 * 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dm_loss_cases() {
        let cfg = LossConfig::default();
        // identical maps with positive mass: 0 to solver precision
        let d = vec![0.5, 0.0, 0.0, 1.5];
        let v = dm_loss(&d, &d, 2, 2, &cfg).unwrap();
        assert!(v.abs() < 5.0 * cfg.ot_reg, "{v}");

        // point masses |a-b| = 3: 0 + 9 + 0.5*1*(1+1) = 10
        let gt = vec![1.0, 0.0, 0.0, 0.0];
        let hat = vec![0.0, 0.0, 0.0, 1.0];
        let v = dm_loss(&gt, &hat, 1, 4, &cfg).unwrap();
        assert!((v - 10.0).abs() < 1e-6, "{v}");

        // empty ground truth: count term only
        let gt = vec![0.0; 4];
        let hat = vec![0.5, 0.5, 0.5, 0.5];
        let v = dm_loss(&gt, &hat, 2, 2, &cfg).unwrap();
        assert!((v - 2.0).abs() < 1e-12, "{v}");

        // negative densities rejected
        assert!(dm_loss(&[-0.1, 0.2], &[0.1, 0.1], 1, 2, &cfg).is_err());
    }

    #[test]
    fn se_loss_cases() {
        // D1 = D2 = tau: sigma(0)^2 = 0.25
        let d = vec![0.3; 9];
        assert!((se_loss(&d, &d, 10.0, 0.3) - 0.25).abs() < 1e-12);
        // D1 = D2 = 0: sigma(-3)^2
        let z = vec![0.0; 9];
        let s3 = 1.0 / (1.0 + 3.0f64.exp());
        assert!((se_loss(&z, &z, 10.0, 0.3) - s3 * s3).abs() < 1e-9);
        // saturated second map
        let hi = vec![10.0; 9];
        let want = s3 * (1.0 / (1.0 + (-97.0f64).exp()));
        assert!((se_loss(&z, &hi, 10.0, 0.3) - want).abs() < 1e-6);
        // symmetry
        let mut rng = SplitMix64::new(8);
        let a: Vec<f64> = (0..9).map(|_| rng.next_f64() * 4.0).collect();
        let b: Vec<f64> = (0..9).map(|_| rng.next_f64() * 4.0).collect();
        assert_eq!(se_loss(&a, &b, 10.0, 0.3), se_loss(&b, &a, 10.0, 0.3));
    }

    fn toy_targets() -> BlockTargets {
        let binning = CountBinning::new(4).unwrap();
        let points = vec![
            PointAnnotation { x: 2, y: 2, category_index: 0 },
            PointAnnotation { x: 16, y: 3, category_index: 0 },
            PointAnnotation { x: 17, y: 4, category_index: 1 },
            PointAnnotation { x: 3, y: 17, category_index: 1 },
        ];
        build_block_targets(&points, 28, 28, 14, binning, 2).unwrap()
    }

    #[test]
    fn count_loss_perfect_prediction_is_near_zero() {
        let cfg = LossConfig::default();
        let t = toy_targets();
        let binning = CountBinning::new(4).unwrap();
        let probs: Vec<Matrix> = (0..2).map(|c| one_hot_probs(&t.bins_for_category(c), 5)).collect();
        let densities: Vec<Vec<f64>> = (0..2)
            .map(|c| crate::densityhead::expected_density(&probs[c], binning))
            .collect();
        let v = count_loss(&probs, &densities, &t, &cfg).unwrap();
        // ce = 0 exactly; dm identity keeps only solver slack
        assert!(v < 5.0 * cfg.ot_reg, "{v}");
    }

    #[test]
    fn count_loss_lambda_linearity() {
        let t = toy_targets();
        let mut rng = SplitMix64::new(3);
        // random positive probabilities, rows normalized
        let mut probs = Vec::new();
        let mut densities = Vec::new();
        let binning = CountBinning::new(4).unwrap();
        for _ in 0..2 {
            let mut p = Matrix::from_fn(4, 5, |_, _| rng.next_f64() + 0.05);
            for r in 0..4 {
                let s: f64 = p.row(r).iter().sum();
                for v in p.row_mut(r) {
                    *v /= s;
                }
            }
            densities.push(crate::densityhead::expected_density(&p, binning));
            probs.push(p);
        }
        let mut cfg = LossConfig::default();
        cfg.lambda = vec![1.0, 1.0];
        let base_parts: Vec<f64> = (0..2)
            .map(|c| {
                let mut one_cat = cfg.clone();
                one_cat.lambda = vec![1.0];
                let sub_targets = BlockTargets {
                    h_blocks: t.h_blocks,
                    w_blocks: t.w_blocks,
                    m: 1,
                    count_map: (0..4).map(|b| t.count_map[b * 2 + c]).collect(),
                    class_index_map: (0..4).map(|b| t.class_index_map[b * 2 + c]).collect(),
                };
                count_loss(
                    &probs[c..c + 1],
                    &densities[c..c + 1],
                    &sub_targets,
                    &one_cat,
                )
                .unwrap()
            })
            .collect();
        // weighted combination matches per-category parts
        let mut cfg2 = LossConfig::default();
        cfg2.lambda = vec![0.4, 0.6];
        let v = count_loss(&probs, &densities, &t, &cfg2).unwrap();
        let want = 0.4 * base_parts[0] + 0.6 * base_parts[1];
        assert!((v - want).abs() < 1e-9, "{v} vs {want}");
        // doubling a lambda doubles that category's contribution
        let mut cfg3 = cfg2.clone();
        cfg3.lambda = vec![0.8, 0.6];
        let v3 = count_loss(&probs, &densities, &t, &cfg3).unwrap();
        assert!((v3 - (0.8 * base_parts[0] + 0.6 * base_parts[1])).abs() < 1e-9);
    }

    #[test]
    fn total_loss_composition() {
        let t = toy_targets();
        let binning = CountBinning::new(4).unwrap();
        let probs: Vec<Matrix> = (0..2).map(|c| one_hot_probs(&t.bins_for_category(c), 5)).collect();
        let densities: Vec<Vec<f64>> = (0..2)
            .map(|c| crate::densityhead::expected_density(&probs[c], binning))
            .collect();
        let mut cfg = LossConfig::default();
        cfg.gamma = 0.0;
        let cnt = count_loss(&probs, &densities, &t, &cfg).unwrap();
        let tot0 = total_loss(&probs, &densities, &t, &cfg).unwrap();
        assert_eq!(cnt, tot0);
        cfg.gamma = 0.5;
        let se = se_loss(&densities[0], &densities[1], cfg.alpha, cfg.tau);
        let tot = total_loss(&probs, &densities, &t, &cfg).unwrap();
        assert!((tot - (cnt + 0.5 * se)).abs() < 1e-12);
    }

    #[test]
    fn losses_are_non_negative() {
        let mut rng = SplitMix64::new(17);
        let cfg = LossConfig::default();
        for _ in 0..10 {
            let s = Matrix::from_fn(3, 4, |_, _| rng.next_gaussian());
            let t = Matrix::from_fn(3, 4, |_, _| rng.next_gaussian());
            assert!(distill_loss(&s, &t, cfg.norm_floor) >= 0.0);
            let counts: Vec<f64> = (0..4).map(|_| rng.next_f64() * 4.0).collect();
            assert!(rank_loss(&[counts], 0.0) >= 0.0);
            let d1: Vec<f64> = (0..4).map(|_| rng.next_f64() * 4.0).collect();
            let d2: Vec<f64> = (0..4).map(|_| rng.next_f64() * 4.0).collect();
            assert!(se_loss(&d1, &d2, cfg.alpha, cfg.tau) >= 0.0);
            assert!(dm_loss(&d1, &d2, 2, 2, &cfg).unwrap() >= 0.0);
        }
    }
}
