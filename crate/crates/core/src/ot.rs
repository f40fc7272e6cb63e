//! Optimal transport between discrete densities on a block grid.
//!
//! Two independent routes:
//! - [`sinkhorn_w2_graph`]: entropic regularization, log-domain alternating
//!   updates recorded on the autodiff tape, so gradients flow through the
//!   solver's fixed-point iterations. This is the training path.
//! - [`exact_w2`]: the transportation linear program solved exactly by
//!   successive shortest paths. Test oracle for small grids; shares no code
//!   with the entropic path.
//!
//! Ground cost is squared Euclidean distance between block centers with
//! block side 1.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy)]
pub struct OtParams {
    pub reg: f64,
    pub max_iters: usize,
    /// L1 marginal violation target; 0 disables early stopping (the solver
    /// then always runs `max_iters` iterations, which keeps the recorded
    /// computation smooth for finite-difference checks)
    pub tol: f64,
}

impl Default for OtParams {
    fn default() -> Self {
        OtParams {
            reg: 0.05,
            max_iters: 500,
            tol: 1e-7,
        }
    }
}

/// Squared Euclidean costs between centers of an h x w unit-side block grid,
/// between all pairs (row-major flattening both sides).
pub fn grid_cost_matrix(h: usize, w: usize) -> Matrix {
    let n = h * w;
    let mut c = Matrix::zeros(n, n);
    for a in 0..n {
        let (ya, xa) = ((a / w) as f64, (a % w) as f64);
        for b in 0..n {
            let (yb, xb) = ((b / w) as f64, (b % w) as f64);
            c.data[a * n + b] = (ya - yb) * (ya - yb) + (xa - xb) * (xa - xb);
        }
    }
    c
}

const MASS_TOL: f64 = 1e-6;

fn check_normalized(name: &str, data: &[f64]) -> Result<()> {
    let s: f64 = data.iter().sum();
    if (s - 1.0).abs() > MASS_TOL {
        return Err(CoreError::InvalidArgument(format!(
            "{name} must be normalized to total mass 1, got {s}"
        )));
    }
    if data.iter().any(|&x| x < 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "{name} has negative entries"
        )));
    }
    Ok(())
}

/// Entropic OT cost <plan, cost> between two normalized densities, recorded
/// on the tape. `mu` is k x 1, `nu` is l x 1, `cost` is k x l.
///
/// Errors if the final L1 marginal violation exceeds `tol` (when tol > 0).
pub fn sinkhorn_w2_graph(
    g: &mut Graph,
    mu: Var,
    nu: Var,
    cost: Arc<Matrix>,
    params: OtParams,
) -> Result<Var> {
    let (k, l) = (cost.rows, cost.cols);
    {
        let muv = g.value(mu);
        let nuv = g.value(nu);
        assert_eq!((muv.rows, muv.cols), (k, 1), "mu shape");
        assert_eq!((nuv.rows, nuv.cols), (l, 1), "nu shape");
        check_normalized("mu", &muv.data)?;
        check_normalized("nu", &nuv.data)?;
    }
    let eps_target = params.reg;
    let cost_t = Arc::new(cost.transpose());

    let ln_mu = g.ln_clamped(mu, 1e-300);
    let ln_nu = g.ln_clamped(nu, 1e-300);

    // Epsilon scaling: warm-start the potentials at coarse regularization and
    // halve down to the target. The schedule depends only on the cost matrix
    // and the target, never on the marginals, so the recorded computation
    // stays smooth in (mu, nu).
    let max_c = cost.data.iter().cloned().fold(0.0f64, f64::max);
    let mut levels = Vec::new();
    let mut e = max_c / 4.0;
    while e > eps_target * 1.0001 {
        levels.push(e);
        e *= 0.5;
    }
    levels.push(eps_target);
    const WARMUP_ITERS: usize = 4;

    let mut f = g.constant(Matrix::zeros(k, 1));
    let mut g_pot = g.constant(Matrix::zeros(l, 1));
    let mut residual = f64::INFINITY;
    let mut iters_used = 0;
    'levels: for (li, &eps) in levels.iter().enumerate() {
        let final_level = li + 1 == levels.len();
        let eps_ln_mu = g.scale_const(ln_mu, eps);
        let eps_ln_nu = g.scale_const(ln_nu, eps);
        let budget = if final_level {
            params.max_iters.saturating_sub(iters_used).max(1)
        } else {
            WARMUP_ITERS
        };
        for _ in 0..budget {
            // f_i = eps * ln mu_i - eps * lse_j((g_j - C_ij)/eps)
            let lse_f = g.lse_shift(g_pot, cost.clone(), eps);
            let scaled = g.scale_const(lse_f, eps);
            f = g.sub(eps_ln_mu, scaled);
            // g_j = eps * ln nu_j - eps * lse_i((f_i - C_ij)/eps)
            let lse_g = g.lse_shift(f, cost_t.clone(), eps);
            let scaled = g.scale_const(lse_g, eps);
            g_pot = g.sub(eps_ln_nu, scaled);

            iters_used += 1;
            if final_level && params.tol > 0.0 {
                residual =
                    row_marginal_violation(g.value(f), g.value(g_pot), &cost, eps, g.value(mu));
                if residual < params.tol {
                    break 'levels;
                }
            }
            if iters_used >= params.max_iters && !final_level {
                break 'levels;
            }
        }
    }
    if params.tol > 0.0 && residual > params.tol {
        return Err(CoreError::OtNotConverged {
            iters: iters_used,
            residual,
            tol: params.tol,
        });
    }
    Ok(g.transport_cost(f, g_pot, cost, eps_target))
}

/// Plain-value entropic OT cost.
pub fn sinkhorn_w2(mu: &[f64], nu: &[f64], cost: &Matrix, params: OtParams) -> Result<f64> {
    let mut g = Graph::new();
    let mu_v = g.constant(Matrix::column(mu));
    let nu_v = g.constant(Matrix::column(nu));
    let v = sinkhorn_w2_graph(&mut g, mu_v, nu_v, Arc::new(cost.clone()), params)?;
    Ok(g.value(v).item())
}

/// After a column update the column marginals are exact; convergence is
/// judged on the L1 row-marginal violation.
fn row_marginal_violation(f: &Matrix, g_pot: &Matrix, cost: &Matrix, eps: f64, mu: &Matrix) -> f64 {
    let mut viol = 0.0;
    for i in 0..cost.rows {
        let mut row = 0.0;
        for j in 0..cost.cols {
            row += ((f.data[i] + g_pot.data[j] - cost.at(i, j)) / eps).exp();
        }
        viol += (row - mu.data[i]).abs();
    }
    viol
}

// ── exact transportation LP (oracle) ─────────────────────────────────────────

/// Exact optimal transport cost by successive shortest augmenting paths on
/// the bipartite residual network. Intended for small instances (the test
/// oracle); cost is O(cells^3) per unit of path structure, fine to a few
/// hundred cells.
pub fn exact_w2(mu: &[f64], nu: &[f64], cost: &Matrix) -> Result<f64> {
    let (k, l) = (mu.len(), nu.len());
    assert_eq!(cost.rows, k);
    assert_eq!(cost.cols, l);
    check_normalized("mu", mu)?;
    check_normalized("nu", nu)?;

    const EPS: f64 = 1e-14;
    let mut supply = mu.to_vec();
    let mut demand = nu.to_vec();
    let mut flow = vec![0.0f64; k * l];

    loop {
        let total_remaining: f64 = supply.iter().sum();
        if total_remaining <= EPS {
            break;
        }
        // Bellman-Ford over the residual graph. Nodes: 0..k suppliers,
        // k..k+l consumers. Forward edges i->j cost C, backward j->i cost
        // -C where flow exists.
        let nn = k + l;
        let mut dist = vec![f64::INFINITY; nn];
        let mut pred: Vec<Option<usize>> = vec![None; nn];
        for i in 0..k {
            if supply[i] > EPS {
                dist[i] = 0.0;
            }
        }
        for _ in 0..nn {
            let mut changed = false;
            for i in 0..k {
                if dist[i].is_finite() {
                    for j in 0..l {
                        let nd = dist[i] + cost.at(i, j);
                        if nd < dist[k + j] - 1e-15 {
                            dist[k + j] = nd;
                            pred[k + j] = Some(i);
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..l {
                if dist[k + j].is_finite() {
                    for i in 0..k {
                        if flow[i * l + j] > EPS {
                            let nd = dist[k + j] - cost.at(i, j);
                            if nd < dist[i] - 1e-15 {
                                dist[i] = nd;
                                pred[i] = Some(k + j);
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        // cheapest reachable consumer with unmet demand
        let mut best: Option<usize> = None;
        for j in 0..l {
            if demand[j] > EPS
                && dist[k + j].is_finite()
                && (best.is_none() || dist[k + j] < dist[k + best.unwrap()])
            {
                best = Some(j);
            }
        }
        let Some(jt) = best else {
            return Err(CoreError::Other(
                "transportation LP: no augmenting path (unbalanced problem?)".into(),
            ));
        };

        // walk back to find the bottleneck
        let mut path = Vec::new();
        let mut node = k + jt;
        while let Some(p) = pred[node] {
            path.push((p, node));
            node = p;
        }
        let start = node;
        let mut bottleneck = supply[start].min(demand[jt]);
        for &(a, b) in &path {
            if a >= k {
                // backward edge consumer->supplier, limited by its flow
                bottleneck = bottleneck.min(flow[b * l + (a - k)]);
            }
        }
        debug_assert!(bottleneck > 0.0, "zero bottleneck augmentation");
        for &(a, b) in &path {
            if a < k {
                flow[a * l + (b - k)] += bottleneck;
            } else {
                flow[b * l + (a - k)] -= bottleneck;
            }
        }
        supply[start] -= bottleneck;
        demand[jt] -= bottleneck;
    }

    let mut total = 0.0;
    for i in 0..k {
        for j in 0..l {
            total += flow[i * l + j] * cost.at(i, j);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_density(n: usize, rng: &mut SplitMix64) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| rng.next_f64() + 0.01).collect();
        let s: f64 = v.iter().sum();
        for x in &mut v {
            *x /= s;
        }
        v
    }

    #[test]
    fn identity_transport_is_zero() {
        let cost = grid_cost_matrix(2, 2);
        let mu = vec![0.25; 4];
        let exact = exact_w2(&mu, &mu, &cost).unwrap();
        assert!(exact.abs() < 1e-12);
        let params = OtParams::default();
        let ent = sinkhorn_w2(&mu, &mu, &cost, params).unwrap();
        assert!(ent <= 5.0 * params.reg, "entropic identity cost {ent}");
    }

    #[test]
    fn two_point_masses_cost_is_squared_distance() {
        // unit masses on cells at Euclidean distance 3 on a 1x4 grid
        let cost = grid_cost_matrix(1, 4);
        let mu = vec![1.0, 0.0, 0.0, 0.0];
        let nu = vec![0.0, 0.0, 0.0, 1.0];
        let exact = exact_w2(&mu, &nu, &cost).unwrap();
        assert!((exact - 9.0).abs() < 1e-12);
        // forced coupling: the entropic plan coincides with the LP plan
        let ent = sinkhorn_w2(&mu, &nu, &cost, OtParams::default()).unwrap();
        assert!((ent - 9.0).abs() < 1e-6, "{ent}");
    }

    #[test]
    fn half_mass_move() {
        // mu uniform on two cells distance 2 apart, nu all on the first
        let cost = grid_cost_matrix(1, 3);
        let mu = vec![0.5, 0.0, 0.5];
        let nu = vec![1.0, 0.0, 0.0];
        let exact = exact_w2(&mu, &nu, &cost).unwrap();
        assert!((exact - 2.0).abs() < 1e-12, "{exact}");
    }

    #[test]
    fn non_normalized_rejected() {
        let cost = grid_cost_matrix(1, 2);
        assert!(exact_w2(&[0.7, 0.7], &[0.5, 0.5], &cost).is_err());
        assert!(sinkhorn_w2(&[0.7, 0.7], &[0.5, 0.5], &cost, OtParams::default()).is_err());
    }

    #[test]
    fn entropic_matches_lp_on_random_grids() {
        let mut rng = SplitMix64::new(31);
        // default regularization; generous iteration budget because tight
        // eps needs a few thousand iterations on unlucky instances
        let params = OtParams {
            max_iters: 20_000,
            ..OtParams::default()
        };
        let tol = (10.0 * params.reg).max(1e-3);
        let shapes = [(1usize, 2usize), (2, 2), (1, 6), (2, 4), (3, 3), (4, 4)];
        for round in 0..30 {
            let (h, w) = shapes[round % shapes.len()];
            let n = h * w;
            let cost = grid_cost_matrix(h, w);
            let mu = random_density(n, &mut rng);
            let nu = random_density(n, &mut rng);
            let exact = exact_w2(&mu, &nu, &cost).unwrap();
            let ent = sinkhorn_w2(&mu, &nu, &cost, params).unwrap();
            assert!(
                (ent - exact).abs() <= tol,
                "grid {h}x{w} round {round}: entropic {ent} vs exact {exact}"
            );
            assert!(ent >= -1e-9, "negative transport cost");
        }
    }

    #[test]
    fn lp_matches_closed_form_on_two_cells() {
        // overlap stays, the rest moves distance 1 -> cost 0.5
        let cost = grid_cost_matrix(1, 2);
        let mu = vec![0.8, 0.2];
        let nu = vec![0.3, 0.7];
        let exact = exact_w2(&mu, &nu, &cost).unwrap();
        assert!((exact - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sinkhorn_gradient_matches_fd() {
        let cost = Arc::new(grid_cost_matrix(2, 2));
        let mut rng = SplitMix64::new(77);
        let mu0 = random_density(4, &mut rng);
        let nu0 = random_density(4, &mut rng);
        // fixed iteration count keeps the recorded function smooth under FD
        let params = OtParams {
            reg: 0.1,
            max_iters: 400,
            tol: 0.0,
        };
        let build = |g: &mut Graph, nu_in: Var, mu_c: Var| -> Var {
            let s = g.sum_all(nu_in);
            let inv = g.recip(s);
            let nu_v = g.scale_by_scalar(nu_in, inv);
            sinkhorn_w2_graph(g, mu_c, nu_v, cost.clone(), params).unwrap()
        };
        let mut g = Graph::new();
        let mu_c = g.constant(Matrix::column(&mu0));
        let nu_in = g.input(Matrix::column(&nu0));
        let w2 = build(&mut g, nu_in, mu_c);
        let analytic = g.grad_of_input(w2, nu_in);

        let eval = |nu_raw: &[f64]| {
            let mut g2 = Graph::new();
            let mu_c = g2.constant(Matrix::column(&mu0));
            let nu_in = g2.input(Matrix::column(nu_raw));
            let v = build(&mut g2, nu_in, mu_c);
            g2.value(v).item()
        };
        let numeric = crate::gradcheck::central_diff(&eval, &nu0, 1e-6);
        let err = crate::gradcheck::max_rel_error(&analytic.data, &numeric, 1e-6);
        assert!(err < 1e-4, "relative error {err}");
    }
}
