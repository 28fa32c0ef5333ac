//! Sample-based mutual-information bounds.
//!
//! Each bound is available at two levels:
//!
//! * `*_graph` functions build the estimate as a differentiable scalar on a
//!   [`Graph`], so it can be maximized (critic training) or minimized
//!   (channel training) by backpropagation;
//! * plain functions such as [`vclub`] or [`infonce`] take a [`Batch`] and
//!   a model, validate shapes, and return an [`Estimate`].
//!
//! Upper bounds contrast log-densities of positive pairs `(x_i, y_i)`
//! against negative pairs `(x_i, y_j)`; lower bounds score pairs with a
//! [`Critic`]. Everything is in nats.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    gaussian_log_density, standard_normal_log_density, Conditional, ConditionalModel,
    DiagGaussianCond, KnownGaussianConditional, Pairing, LN_2PI,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BoundNet, DenseNet, Parameters};
use crate::tensor::{Axis, Tensor};

/// Paired draws from a joint distribution; row `i` of `x` goes with row `i` of `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
}

impl Batch {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::dim(format!(
                "x has {} rows but y has {}",
                x.rows(),
                y.rows()
            )));
        }
        if x.rows() < 2 {
            return Err(Error::contract(format!(
                "a batch needs at least two pairs, got {}",
                x.rows()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Reorders rows of `x` and `y` jointly.
    pub fn permuted(&self, perm: &[usize]) -> Batch {
        let pick = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
            Tensor::from_rows(&rows).expect("rectangular")
        };
        Batch {
            x: pick(&self.x),
            y: pick(&self.y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundKind {
    Upper,
    Lower,
}

/// How the model behind an estimator is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelFamily {
    /// Uses the exact conditional of the source; nothing to train.
    Known,
    /// Uses a fitted [`DiagGaussianCond`].
    Variational,
    /// Uses a trained [`Critic`].
    Critic,
}

/// The ten bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum EstimatorId {
    Club,
    VClub,
    VClubS,
    Vub,
    VVub,
    L1Out,
    VL1Out,
    Nwj,
    Mine,
    InfoNce,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 10] = [
        EstimatorId::Club,
        EstimatorId::VClub,
        EstimatorId::VClubS,
        EstimatorId::Vub,
        EstimatorId::VVub,
        EstimatorId::L1Out,
        EstimatorId::VL1Out,
        EstimatorId::Nwj,
        EstimatorId::Mine,
        EstimatorId::InfoNce,
    ];

    /// The seven estimators compared on the simulation grid.
    pub const SIMULATION: [EstimatorId; 7] = [
        EstimatorId::VVub,
        EstimatorId::Nwj,
        EstimatorId::Mine,
        EstimatorId::InfoNce,
        EstimatorId::VL1Out,
        EstimatorId::VClub,
        EstimatorId::VClubS,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorId::Club => "club",
            EstimatorId::VClub => "vclub",
            EstimatorId::VClubS => "vclub-s",
            EstimatorId::Vub => "vub",
            EstimatorId::VVub => "vvub",
            EstimatorId::L1Out => "l1out",
            EstimatorId::VL1Out => "vl1out",
            EstimatorId::Nwj => "nwj",
            EstimatorId::Mine => "mine",
            EstimatorId::InfoNce => "infonce",
        }
    }

    pub fn kind(self) -> BoundKind {
        match self {
            EstimatorId::Nwj | EstimatorId::Mine | EstimatorId::InfoNce => BoundKind::Lower,
            _ => BoundKind::Upper,
        }
    }

    pub fn family(self) -> ModelFamily {
        match self {
            EstimatorId::Club | EstimatorId::Vub | EstimatorId::L1Out => ModelFamily::Known,
            EstimatorId::VClub | EstimatorId::VClubS | EstimatorId::VVub | EstimatorId::VL1Out => {
                ModelFamily::Variational
            }
            EstimatorId::Nwj | EstimatorId::Mine | EstimatorId::InfoNce => ModelFamily::Critic,
        }
    }

    pub fn valid_ids() -> String {
        Self::ALL.map(|e| e.as_str()).join(", ")
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == norm)
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown estimator `{s}`; valid ids: {}",
                    Self::valid_ids()
                ))
            })
    }
}

impl From<EstimatorId> for String {
    fn from(e: EstimatorId) -> String {
        e.as_str().to_string()
    }
}

impl TryFrom<String> for EstimatorId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub kind: BoundKind,
    pub id: EstimatorId,
}

impl Estimate {
    fn new(id: EstimatorId, value: f64) -> Self {
        Self {
            value,
            kind: id.kind(),
            id,
        }
    }
}

/// Finite-sample stand-in for `E_{p(x)p(y)}` in the critic bounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginalPairing {
    /// All `N²` pairs `(x_i, y_j)`, diagonal included.
    #[default]
    AllPairs,
    /// `N` pairs `(x_i, y_π(i))` for a random permutation `π`.
    Shuffle,
}

impl FromStr for MarginalPairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "allpairs" | "all-pairs" => Ok(Self::AllPairs),
            "shuffle" => Ok(Self::Shuffle),
            other => Err(Error::contract(format!(
                "unknown pairing `{other}`; valid: allpairs, shuffle"
            ))),
        }
    }
}

impl fmt::Display for MarginalPairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AllPairs => "allpairs",
            Self::Shuffle => "shuffle",
        })
    }
}

/// Scalar score network `f(x, y)` over `concat(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub net: DenseNet,
    x_dim: usize,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(x_dim: usize, y_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            net: DenseNet::new(&[x_dim + y_dim, hidden, 1], rng),
            x_dim,
        }
    }

    pub fn from_net(net: DenseNet, x_dim: usize) -> Result<Self> {
        if net.output_width() != 1 || net.input_width() <= x_dim {
            return Err(Error::dim(
                "critic network must map x_dim + y_dim inputs to one output",
            ));
        }
        Ok(Self { net, x_dim })
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn y_dim(&self) -> usize {
        self.net.input_width() - self.x_dim
    }

    pub fn bind(&self, g: &mut Graph) -> BoundCritic {
        BoundCritic {
            net: self.net.bind(g),
            x_dim: self.x_dim,
            y_dim: self.y_dim(),
        }
    }

    fn check(&self, batch: &Batch) -> Result<()> {
        if batch.x.cols() != self.x_dim || batch.y.cols() != self.y_dim() {
            return Err(Error::dim(format!(
                "critic expects ({}, {}) columns, batch has ({}, {})",
                self.x_dim,
                self.y_dim(),
                batch.x.cols(),
                batch.y.cols()
            )));
        }
        Ok(())
    }
}

impl Parameters for Critic {
    fn parameters(&self) -> Vec<&Tensor> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.parameters_mut()
    }
}

#[derive(Clone, Debug)]
pub struct BoundCritic {
    pub net: BoundNet,
    x_dim: usize,
    y_dim: usize,
}

impl BoundCritic {
    /// `f(x_i, y_i)` as an `n×1` column.
    pub fn score_pairs(&self, g: &mut Graph, x: Var, y: Var) -> Var {
        let xy = g.concat_cols(x, y);
        self.net.forward(g, xy)
    }

    /// `f(x_i, y_j)` as an `n×m` matrix.
    ///
    /// The first layer is split as `W [x; y] = W [x; 0] + W [0; y]`, so the
    /// `n·m` pairs only materialize at the hidden width.
    pub fn score_matrix(&self, g: &mut Graph, x: Var, y: Var) -> Var {
        let (n, m) = (g.shape(x).0, g.shape(y).0);
        let (w, b) = self.net.layer(0);
        let wt = g.transpose(w);
        let zy = g.constant(Tensor::zeros(n, self.y_dim));
        let x_pad = g.concat_cols(x, zy);
        let zx = g.constant(Tensor::zeros(m, self.x_dim));
        let y_pad = g.concat_cols(zx, y);
        let hx = g.matmul(x_pad, wt);
        let hy = g.matmul(y_pad, wt);
        let rows_x: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, m)).collect();
        let rows_y: Vec<usize> = (0..n).flat_map(|_| 0..m).collect();
        let gx = g.gather_rows(hx, rows_x);
        let gy = g.gather_rows(hy, rows_y);
        let pre = g.add(gx, gy);
        let mut h = g.add_row(pre, b);
        if self.net.depth() > 1 {
            h = g.relu(h);
        }
        let scores = self.net.forward_from(g, h, 1);
        g.reshape(scores, n, m)
    }
}

/// Uniform negatives `k'_i ∈ {0..n}`, self-index allowed.
pub fn sample_negatives<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// `(1/N²) Σ_i Σ_j [log q(y_i|x_i) − log q(y_j|x_i)]`.
pub fn club_graph<C: Conditional + ?Sized>(g: &mut Graph, cond: &C, x: Var, y: Var) -> Var {
    let full = cond.log_density(g, x, y, Pairing::Full);
    let pos = g.diag(full);
    let pos_mean = g.mean(pos, Axis::All);
    let neg_mean = g.mean(full, Axis::All);
    g.sub(pos_mean, neg_mean)
}

/// `(1/N) Σ_i [log q(y_i|x_i) − log q(y_{k'_i}|x_i)]`.
pub fn club_sampled_graph<C: Conditional + ?Sized>(
    g: &mut Graph,
    cond: &C,
    x: Var,
    y: Var,
    negatives: &[usize],
) -> Var {
    let (mu, logvar) = cond.moments(g, x);
    let pos = gaussian_log_density(g, mu, logvar, y, Pairing::Diagonal);
    let y_neg = g.gather_rows(y, negatives.to_vec());
    let neg = gaussian_log_density(g, mu, logvar, y_neg, Pairing::Diagonal);
    let diff = g.sub(pos, neg);
    g.mean(diff, Axis::All)
}

/// `(1/N) Σ_i [log q(y_i|x_i) − log r(y_i)]` with `r = N(0, I)`.
pub fn vub_graph<C: Conditional + ?Sized>(g: &mut Graph, cond: &C, x: Var, y: Var) -> Var {
    let pos = cond.log_density(g, x, y, Pairing::Diagonal);
    let marg = standard_normal_log_density(g, y);
    let diff = g.sub(pos, marg);
    g.mean(diff, Axis::All)
}

/// Leave-one-out bound, with the denominator average taken in log space.
pub fn l1out_graph<C: Conditional + ?Sized>(g: &mut Graph, cond: &C, x: Var, y: Var) -> Var {
    let n = g.shape(x).0;
    // full[j, i] = log q(y_i | x_j); column i holds every conditional of y_i.
    let full = cond.log_density(g, x, y, Pairing::Full);
    let pos = g.diag(full);
    let pos_mean = g.mean(pos, Axis::All);
    let lse = g.logsumexp_off_diagonal(full, Axis::Rows);
    let lse_mean = g.mean(lse, Axis::All);
    let diff = g.sub(pos_mean, lse_mean);
    g.add_scalar(diff, ((n - 1) as f64).ln())
}

/// `mean(f_joint) − mean(exp(f_marginal − 1))`, the exponential averaged
/// through a max-shifted log-sum-exp.
pub fn nwj_from_scores(g: &mut Graph, joint: Var, marginal: Var) -> Var {
    let k = g.value(marginal).len() as f64;
    let j = g.mean(joint, Axis::All);
    let lse = g.logsumexp(marginal, Axis::All);
    let shifted = g.add_scalar(lse, -1.0 - k.ln());
    let avg_exp = g.exp(shifted);
    g.sub(j, avg_exp)
}

/// `mean(f_joint) − log mean(exp(f_marginal))`.
pub fn mine_from_scores(g: &mut Graph, joint: Var, marginal: Var) -> Var {
    let k = g.value(marginal).len() as f64;
    let j = g.mean(joint, Axis::All);
    let lse = g.logsumexp(marginal, Axis::All);
    let log_mean = g.add_scalar(lse, -k.ln());
    g.sub(j, log_mean)
}

/// `(1/N) Σ_i [f(x_i,y_i) − logsumexp_j f(x_i,y_j) + log N]`.
pub fn infonce_from_matrix(g: &mut Graph, scores: Var) -> Var {
    let n = g.shape(scores).0;
    let pos = g.diag(scores);
    let pos_mean = g.mean(pos, Axis::All);
    let lse = g.logsumexp(scores, Axis::Cols);
    let lse_mean = g.mean(lse, Axis::All);
    let diff = g.sub(pos_mean, lse_mean);
    g.add_scalar(diff, (n as f64).ln())
}

/// Joint and marginal critic scores under `pairing`. With all-pairs the
/// joint scores are the diagonal of the shared `N×N` matrix, which is also
/// returned.
pub fn critic_scores<R: Rng + ?Sized>(
    g: &mut Graph,
    critic: &BoundCritic,
    x: Var,
    y: Var,
    pairing: MarginalPairing,
    rng: &mut R,
) -> (Var, Var, Option<Var>) {
    match pairing {
        MarginalPairing::AllPairs => {
            let full = critic.score_matrix(g, x, y);
            let joint = g.diag(full);
            (joint, full, Some(full))
        }
        MarginalPairing::Shuffle => {
            let n = g.shape(y).0;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            let joint = critic.score_pairs(g, x, y);
            let y_perm = g.gather_rows(y, perm);
            let marginal = critic.score_pairs(g, x, y_perm);
            (joint, marginal, None)
        }
    }
}

/// `−(1/N) Σ_i log q(y_i|x_i)`.
pub fn loglik_loss_graph<C: Conditional + ?Sized>(g: &mut Graph, cond: &C, x: Var, y: Var) -> Var {
    let pos = cond.log_density(g, x, y, Pairing::Diagonal);
    let m = g.mean(pos, Axis::All);
    g.neg(m)
}

fn check_conditional<C: ConditionalModel>(cond: &C, batch: &Batch) -> Result<()> {
    if batch.x.cols() != cond.x_dim() || batch.y.cols() != cond.y_dim() {
        return Err(Error::dim(format!(
            "conditional expects ({}, {}) columns, batch has ({}, {})",
            cond.x_dim(),
            cond.y_dim(),
            batch.x.cols(),
            batch.y.cols()
        )));
    }
    Ok(())
}

fn run_conditional<C: ConditionalModel>(
    cond: &C,
    batch: &Batch,
    f: impl FnOnce(&mut Graph, &C::Bound, Var, Var) -> Var,
) -> Result<f64> {
    check_conditional(cond, batch)?;
    let mut g = Graph::new();
    let bound = cond.bind(&mut g);
    let x = g.constant(batch.x.clone());
    let y = g.constant(batch.y.clone());
    let out = f(&mut g, &bound, x, y);
    g.check()?;
    Ok(g.scalar(out))
}

fn run_critic(
    critic: &Critic,
    batch: &Batch,
    f: impl FnOnce(&mut Graph, Var, Var) -> Var,
) -> Result<f64> {
    critic.check(batch)?;
    let mut g = Graph::new();
    let bound = critic.bind(&mut g);
    let x = g.constant(batch.x.clone());
    let y = g.constant(batch.y.clone());
    let full = bound.score_matrix(&mut g, x, y);
    let out = f(&mut g, full, x);
    g.check()?;
    Ok(g.scalar(out))
}

/// CLUB with the exact conditional.
///
/// The all-pairs mean is taken through per-coordinate sums of `y` and `y²`,
/// which is exact for a Gaussian conditional and needs `O(N d)` work, so
/// very large batches are fine. Not differentiable; use [`club_graph`] for
/// gradients.
pub fn club_known(batch: &Batch, cond: &KnownGaussianConditional) -> Result<Estimate> {
    check_conditional(cond, batch)?;
    let (n, d) = (batch.len(), cond.dim);
    let rho = cond.rho;
    let var = 1.0 - rho * rho;
    let norm = -0.5 * (LN_2PI + var.ln());
    let mut s1 = vec![0.0; d];
    let mut s2 = vec![0.0; d];
    for j in 0..n {
        for (k, &v) in batch.y.row(j).iter().enumerate() {
            s1[k] += v;
            s2[k] += v * v;
        }
    }
    let nf = n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let (x, y) = (batch.x.row(i), batch.y.row(i));
        for k in 0..d {
            let mu = rho * x[k];
            let pos = norm - (y[k] - mu) * (y[k] - mu) / (2.0 * var);
            let mean_sq = s2[k] / nf - 2.0 * mu * s1[k] / nf + mu * mu;
            let neg = norm - mean_sq / (2.0 * var);
            total += pos - neg;
        }
    }
    let v = total / nf;
    if !v.is_finite() {
        return Err(Error::Numeric("CLUB estimate is not finite".into()));
    }
    Ok(Estimate::new(EstimatorId::Club, v))
}

/// CLUB with a fitted variational conditional.
pub fn vclub(batch: &Batch, cond: &DiagGaussianCond) -> Result<Estimate> {
    let v = run_conditional(cond, batch, club_graph)?;
    Ok(Estimate::new(EstimatorId::VClub, v))
}

/// Sampled vCLUB with fresh uniform negatives.
pub fn vclub_sampled<R: Rng + ?Sized>(
    batch: &Batch,
    cond: &DiagGaussianCond,
    rng: &mut R,
) -> Result<Estimate> {
    let negatives = sample_negatives(batch.len(), rng);
    vclub_sampled_with(batch, cond, &negatives)
}

/// Sampled vCLUB with caller-chosen negative indices.
pub fn vclub_sampled_with(
    batch: &Batch,
    cond: &DiagGaussianCond,
    negatives: &[usize],
) -> Result<Estimate> {
    if negatives.len() != batch.len() || negatives.iter().any(|&k| k >= batch.len()) {
        return Err(Error::contract(
            "one in-range negative index per row is required",
        ));
    }
    let v = run_conditional(cond, batch, |g, c, x, y| {
        club_sampled_graph(g, c, x, y, negatives)
    })?;
    Ok(Estimate::new(EstimatorId::VClubS, v))
}

/// VUB with the exact conditional, against a standard-normal marginal.
pub fn vub(batch: &Batch, cond: &KnownGaussianConditional) -> Result<Estimate> {
    let v = run_conditional(cond, batch, vub_graph)?;
    Ok(Estimate::new(EstimatorId::Vub, v))
}

/// Variational VUB.
pub fn vvub(batch: &Batch, cond: &DiagGaussianCond) -> Result<Estimate> {
    let v = run_conditional(cond, batch, vub_graph)?;
    Ok(Estimate::new(EstimatorId::VVub, v))
}

/// Leave-one-out bound with the exact conditional.
pub fn l1out(batch: &Batch, cond: &KnownGaussianConditional) -> Result<Estimate> {
    let v = run_conditional(cond, batch, l1out_graph)?;
    Ok(Estimate::new(EstimatorId::L1Out, v))
}

/// Variational leave-one-out bound.
pub fn vl1out(batch: &Batch, cond: &DiagGaussianCond) -> Result<Estimate> {
    let v = run_conditional(cond, batch, l1out_graph)?;
    Ok(Estimate::new(EstimatorId::VL1Out, v))
}

/// NWJ over all `N²` marginal pairs.
pub fn nwj(batch: &Batch, critic: &Critic) -> Result<Estimate> {
    let v = run_critic(critic, batch, |g, full, _| {
        let joint = g.diag(full);
        nwj_from_scores(g, joint, full)
    })?;
    Ok(Estimate::new(EstimatorId::Nwj, v))
}

/// MINE (Donsker–Varadhan) over all `N²` marginal pairs.
pub fn mine(batch: &Batch, critic: &Critic) -> Result<Estimate> {
    let v = run_critic(critic, batch, |g, full, _| {
        let joint = g.diag(full);
        mine_from_scores(g, joint, full)
    })?;
    Ok(Estimate::new(EstimatorId::Mine, v))
}

pub fn infonce(batch: &Batch, critic: &Critic) -> Result<Estimate> {
    let v = run_critic(critic, batch, |g, full, _| infonce_from_matrix(g, full))?;
    Ok(Estimate::new(EstimatorId::InfoNce, v))
}

/// Negative mean log-likelihood of the positive pairs.
pub fn loglik_loss<C: ConditionalModel>(batch: &Batch, cond: &C) -> Result<f64> {
    run_conditional(cond, batch, loglik_loss_graph)
}
