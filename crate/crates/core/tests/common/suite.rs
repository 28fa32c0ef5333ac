//! Oracle comparisons shared by the oracle tests and the acceptance driver.
//! Each check returns the worst discrepancy it saw.

use super::*;
use mibounds::distributions::{stream_rng, ConditionalModel, KnownGaussianConditional};
use mibounds::estimators::*;
use mibounds::nn::Parameters;
use mibounds::trainer::{conditional_bound_graph, critic_bound_graph};
use mibounds::{Graph, Tensor, Var};

/// Every negative assignment for a batch of `n`.
pub fn all_negatives(n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..n).map(move |k| {
                    let mut q = p.clone();
                    q.push(k);
                    q
                })
            })
            .collect();
    }
    out
}

/// Variational conditional estimators and the likelihood loss, n = 2..=5.
pub fn conditional_loop_gap() -> f64 {
    let mut worst: f64 = 0.0;
    for n in 2..=5 {
        for seed in 0..4 {
            let b = batch(seed, n, 3, 2);
            let c = cond(seed, 3, 2);
            let lp = log_q_matrix(&c, &b);
            let neg: Vec<usize> = (0..n).map(|i| (i * 7 + 1) % n).collect();
            let nll: f64 = -(0..n).map(|i| lp[i][i]).sum::<f64>() / n as f64;
            for (a, o) in [
                (vclub(&b, &c).unwrap().value, club_loop(&lp)),
                (vvub(&b, &c).unwrap().value, vub_loop(&lp, &b)),
                (vl1out(&b, &c).unwrap().value, l1out_loop(&lp)),
                (
                    vclub_sampled_with(&b, &c, &neg).unwrap().value,
                    club_sampled_loop(&lp, &neg),
                ),
                (loglik_loss(&b, &c).unwrap(), nll),
            ] {
                worst = worst.max((a - o).abs());
            }
        }
    }
    worst
}

/// Bounds on the exact conditional, n = 2..=5.
pub fn known_loop_gap() -> f64 {
    let mut worst: f64 = 0.0;
    for n in 2..=5 {
        let b = batch(n as u64, n, 2, 2);
        for rho in [-0.6, 0.0, 0.3, 0.8] {
            let k = KnownGaussianConditional { rho, dim: 2 };
            let lp = log_p_matrix(rho, &b);
            for (a, o) in [
                (club_known(&b, &k).unwrap().value, club_loop(&lp)),
                (vub(&b, &k).unwrap().value, vub_loop(&lp, &b)),
                (l1out(&b, &k).unwrap().value, l1out_loop(&lp)),
            ] {
                worst = worst.max((a - o).abs());
            }
        }
    }
    worst
}

/// Critic bounds, n = 2..=5.
pub fn critic_loop_gap() -> f64 {
    let mut worst: f64 = 0.0;
    for n in 2..=5 {
        for seed in 0..4 {
            let b = batch(seed + 10, n, 3, 2);
            let c = critic(seed, 3, 2);
            let f = scores(&c, &b);
            for (a, o) in [
                (nwj(&b, &c).unwrap().value, nwj_loop(&f)),
                (mine(&b, &c).unwrap().value, mine_loop(&f)),
                (infonce(&b, &c).unwrap().value, infonce_loop(&f)),
            ] {
                worst = worst.max((a - o).abs());
            }
        }
    }
    worst
}

/// Average of vCLUB-S over all 27 negative assignments at n = 3, minus vCLUB.
pub fn enumeration_gap() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let b = batch(seed, 3, 2, 2);
        let c = cond(seed, 2, 2);
        let full = vclub(&b, &c).unwrap().value;
        let assignments = all_negatives(3);
        let avg: f64 = assignments
            .iter()
            .map(|neg| vclub_sampled_with(&b, &c, neg).unwrap().value)
            .sum::<f64>()
            / assignments.len() as f64;
        worst = worst.max((avg - full).abs());
    }
    worst
}

/// Central differences over every parameter and every input entry.
fn gradient_gap<M: Parameters + Clone>(
    model: &M,
    b: &Batch,
    build: impl Fn(&M, &mut Graph, Var, Var) -> (Var, Vec<Var>),
) -> f64 {
    let eval = |m: &M, x: &Tensor, y: &Tensor| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let (out, _) = build(m, &mut g, xv, yv);
        g.check().unwrap();
        g.scalar(out)
    };

    let mut g = Graph::new();
    let xv = g.leaf(b.x.clone());
    let yv = g.leaf(b.y.clone());
    let (out, params) = build(model, &mut g, xv, yv);
    let grads = g.backward(out).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;

    for (p, &pv) in params.iter().enumerate() {
        let analytic = grads.get(pv);
        for k in 0..analytic.len() {
            let mut plus = model.clone();
            plus.parameters_mut()[p].data_mut()[k] += h;
            let mut minus = model.clone();
            minus.parameters_mut()[p].data_mut()[k] -= h;
            let fd = (eval(&plus, &b.x, &b.y) - eval(&minus, &b.x, &b.y)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[k], fd));
        }
    }
    for (which, v) in [(0, xv), (1, yv)] {
        let analytic = grads.get(v);
        for k in 0..analytic.len() {
            let (mut xp, mut yp) = (b.x.clone(), b.y.clone());
            let (mut xm, mut ym) = (b.x.clone(), b.y.clone());
            if which == 0 {
                xp.data_mut()[k] += h;
                xm.data_mut()[k] -= h;
            } else {
                yp.data_mut()[k] += h;
                ym.data_mut()[k] -= h;
            }
            let fd = (eval(model, &xp, &yp) - eval(model, &xm, &ym)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[k], fd));
        }
    }
    worst
}

#[derive(Clone)]
struct NoParams;

impl Parameters for NoParams {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![]
    }
}

/// Worst relative gradient error per estimator loss, batch 8, dim 4.
pub fn gradient_gaps() -> Vec<(String, f64)> {
    let b = batch(8, 8, 4, 4);
    let c = cond(8, 4, 4);
    let mut out = Vec::new();
    for id in [
        EstimatorId::VClub,
        EstimatorId::VClubS,
        EstimatorId::VVub,
        EstimatorId::VL1Out,
    ] {
        let e = gradient_gap(&c, &b, |m, g, x, y| {
            let bound = m.bind(g);
            let v = conditional_bound_graph(g, id, &bound, x, y, &mut stream_rng(1, 1));
            (v, bound.params())
        });
        out.push((id.to_string(), e));
    }
    let e = gradient_gap(&c, &b, |m, g, x, y| {
        let bound = m.bind(g);
        (loglik_loss_graph(g, &bound, x, y), bound.params())
    });
    out.push(("loglik".into(), e));

    let k = KnownGaussianConditional { rho: 0.5, dim: 4 };
    for id in [EstimatorId::Club, EstimatorId::Vub, EstimatorId::L1Out] {
        let e = gradient_gap(&NoParams, &b, |_, g, x, y| {
            let v = conditional_bound_graph(g, id, &k, x, y, &mut stream_rng(1, 1));
            (v, vec![])
        });
        out.push((id.to_string(), e));
    }

    let f = critic(8, 4, 4);
    for pairing in [MarginalPairing::AllPairs, MarginalPairing::Shuffle] {
        for id in [EstimatorId::Nwj, EstimatorId::Mine, EstimatorId::InfoNce] {
            let e = gradient_gap(&f, &b, |m, g, x, y| {
                let bound = m.bind(g);
                let (v, _) =
                    critic_bound_graph(g, id, &bound, x, y, pairing, &mut stream_rng(2, 2));
                (v, bound.net.params())
            });
            out.push((format!("{id}/{pairing}"), e));
        }
    }
    out
}
