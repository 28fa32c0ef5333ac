//! Conditional densities and data sources with known mutual information.
//!
//! All quantities are in nats.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimators::Batch;
use crate::graph::{Graph, Var};
use crate::nn::{BoundNet, Dense, DenseNet, Parameters};
use crate::tensor::{Axis, Tensor};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Default clamp for the raw log-variance output.
pub const DEFAULT_LOGVAR_BOUND: f64 = 10.0;

/// Condition-number ceiling for the cubic mixing matrix.
pub const MAX_MIXING_CONDITION: f64 = 1e3;

/// Which `(x, y)` combinations a log-density is evaluated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    /// `log q(y_i | x_i)` as an `n×1` column; needs equal row counts.
    Diagonal,
    /// `log q(y_j | x_i)` at row `i`, column `j` of an `n×m` matrix.
    Full,
}

/// A conditional density whose log evaluates on a [`Graph`].
pub trait Conditional {
    /// `(μ(x), log σ²(x))`, one row per row of `x`.
    fn moments(&self, g: &mut Graph, x: Var) -> (Var, Var);

    fn log_density(&self, g: &mut Graph, x: Var, y: Var, pairing: Pairing) -> Var {
        let (mu, logvar) = self.moments(g, x);
        gaussian_log_density(g, mu, logvar, y, pairing)
    }
}

/// A conditional model that can place itself on a graph.
pub trait ConditionalModel {
    type Bound: Conditional;
    fn bind(&self, g: &mut Graph) -> Self::Bound;
    fn x_dim(&self) -> usize;
    fn y_dim(&self) -> usize;
}

/// Creates an independent, reproducible RNG stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    )
}

/// `log N(y | mu, diag(exp(logvar)))` on the graph.
///
/// The quadratic form is expanded as `Σ p y² − 2 Σ p μ y + Σ p μ²`
/// (with `p = exp(−logvar)`) so the full `n×m` matrix is two matrix
/// products. The diagonal pairing uses the identical expansion and
/// summation order, so it reproduces the diagonal of the full matrix
/// bit for bit.
pub fn gaussian_log_density(g: &mut Graph, mu: Var, logvar: Var, y: Var, pairing: Pairing) -> Var {
    let d = g.shape(mu).1;
    let neg_logvar = g.neg(logvar);
    let prec = g.exp(neg_logvar);
    let mu_prec = g.mul(mu, prec);
    let mu_sq_prec = g.mul(mu_prec, mu);
    let mu_term = g.sum(mu_sq_prec, Axis::Cols);
    let y_sq = g.square(y);

    let (quad_y, cross) = match pairing {
        Pairing::Diagonal => {
            let py = g.mul(prec, y_sq);
            let a = g.sum(py, Axis::Cols);
            let my = g.mul(mu_prec, y);
            let b = g.sum(my, Axis::Cols);
            (a, b)
        }
        Pairing::Full => {
            let y_sq_t = g.transpose(y_sq);
            let a = g.matmul(prec, y_sq_t);
            let y_t = g.transpose(y);
            let b = g.matmul(mu_prec, y_t);
            (a, b)
        }
    };
    let two_cross = g.scale(cross, 2.0);
    let partial = g.sub(quad_y, two_cross);
    let quad = match pairing {
        Pairing::Diagonal => g.add(partial, mu_term),
        Pairing::Full => g.add_col(partial, mu_term),
    };
    let half_quad = g.scale(quad, -0.5);

    let logvar_sum = g.sum(logvar, Axis::Cols);
    let half_logvar = g.scale(logvar_sum, -0.5);
    let norm = g.add_scalar(half_logvar, -0.5 * d as f64 * LN_2PI);
    match pairing {
        Pairing::Diagonal => g.add(half_quad, norm),
        Pairing::Full => g.add_col(half_quad, norm),
    }
}

/// `log N(y | 0, I)` per row, as an `n×1` column.
pub fn standard_normal_log_density(g: &mut Graph, y: Var) -> Var {
    let d = g.shape(y).1;
    let sq = g.square(y);
    let s = g.sum(sq, Axis::Cols);
    let h = g.scale(s, -0.5);
    g.add_scalar(h, -0.5 * d as f64 * LN_2PI)
}

fn validate_pairing(x: &Tensor, y: &Tensor, dx: usize, dy: usize, pairing: Pairing) -> Result<()> {
    if x.cols() != dx {
        return Err(Error::dim(format!(
            "x has {} columns, expected {dx}",
            x.cols()
        )));
    }
    if y.cols() != dy {
        return Err(Error::dim(format!(
            "y has {} columns, expected {dy}",
            y.cols()
        )));
    }
    if pairing == Pairing::Diagonal && x.rows() != y.rows() {
        return Err(Error::dim(format!(
            "diagonal pairing needs equal row counts, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    Ok(())
}

/// Evaluates any conditional model off-graph, with shape checks.
pub fn log_prob<C: ConditionalModel>(
    cond: &C,
    x: &Tensor,
    y: &Tensor,
    pairing: Pairing,
) -> Result<Tensor> {
    validate_pairing(x, y, cond.x_dim(), cond.y_dim(), pairing)?;
    let mut g = Graph::new();
    let bound = cond.bind(&mut g);
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let out = bound.log_density(&mut g, xv, yv, pairing);
    g.check()?;
    Ok(g.value(out).clone())
}

/// `q(y | x) = N(μ(x), σ²(x) I)` with both moments produced by networks.
///
/// The log-variance network output `t` is squashed to `B·tanh(t/B)`, so
/// `σ²` always lies in `[e^-B, e^B]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussianCond {
    pub mu_net: DenseNet,
    pub logvar_net: DenseNet,
    pub logvar_bound: f64,
}

impl DiagGaussianCond {
    pub fn new<R: Rng + ?Sized>(x_dim: usize, y_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            mu_net: DenseNet::new(&[x_dim, hidden, y_dim], rng),
            logvar_net: DenseNet::new(&[x_dim, hidden, y_dim], rng),
            logvar_bound: DEFAULT_LOGVAR_BOUND,
        }
    }

    /// Networks hand-set to `μ(x) = ρx`, `σ² = 1 − ρ²`: the exact
    /// conditional of a Gaussian source, expressed as a variational model.
    pub fn exact_for(dim: usize, rho: f64) -> Self {
        // Hidden layer holds [x; −x] so the ReLU passes both signs.
        let mut w1 = Tensor::zeros(2 * dim, dim);
        let mut w2 = Tensor::zeros(dim, 2 * dim);
        for k in 0..dim {
            w1.set(k, k, 1.0);
            w1.set(dim + k, k, -1.0);
            w2.set(k, k, rho);
            w2.set(k, dim + k, -rho);
        }
        let mu = DenseNet::from_layers(vec![
            Dense {
                weight: w1,
                bias: Tensor::zeros(1, 2 * dim),
            },
            Dense {
                weight: w2,
                bias: Tensor::zeros(1, dim),
            },
        ])
        .expect("consistent layer shapes");
        let b = DEFAULT_LOGVAR_BOUND;
        let target = (1.0 - rho * rho).ln();
        let mut logvar = DenseNet::zeroed(&[dim, 2 * dim, dim]);
        logvar.layers_mut()[1].bias = Tensor::full(1, dim, b * (target / b).atanh());
        Self {
            mu_net: mu,
            logvar_net: logvar,
            logvar_bound: b,
        }
    }

    pub fn from_nets(mu_net: DenseNet, logvar_net: DenseNet, logvar_bound: f64) -> Result<Self> {
        if mu_net.input_width() != logvar_net.input_width()
            || mu_net.output_width() != logvar_net.output_width()
        {
            return Err(Error::dim(
                "mean and log-variance networks disagree on shape",
            ));
        }
        if !(logvar_bound > 0.0 && logvar_bound.is_finite()) {
            return Err(Error::contract("log-variance bound must be positive"));
        }
        Ok(Self {
            mu_net,
            logvar_net,
            logvar_bound,
        })
    }
}

impl Parameters for DiagGaussianCond {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.mu_net.parameters();
        p.extend(self.logvar_net.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.mu_net.parameters_mut();
        p.extend(self.logvar_net.parameters_mut());
        p
    }
}

#[derive(Clone, Debug)]
pub struct BoundGaussianCond {
    pub mu: BoundNet,
    pub logvar: BoundNet,
    pub logvar_bound: f64,
}

impl BoundGaussianCond {
    pub fn params(&self) -> Vec<Var> {
        let mut p = self.mu.params();
        p.extend(self.logvar.params());
        p
    }
}

impl Conditional for BoundGaussianCond {
    /// The log-variance is squashed into `(-B, B)`.
    fn moments(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let mu = self.mu.forward(g, x);
        let raw = self.logvar.forward(g, x);
        let scaled = g.scale(raw, 1.0 / self.logvar_bound);
        let squashed = g.tanh(scaled);
        let logvar = g.scale(squashed, self.logvar_bound);
        (mu, logvar)
    }
}

impl ConditionalModel for DiagGaussianCond {
    type Bound = BoundGaussianCond;

    fn bind(&self, g: &mut Graph) -> BoundGaussianCond {
        BoundGaussianCond {
            mu: self.mu_net.bind(g),
            logvar: self.logvar_net.bind(g),
            logvar_bound: self.logvar_bound,
        }
    }

    fn x_dim(&self) -> usize {
        self.mu_net.input_width()
    }

    fn y_dim(&self) -> usize {
        self.mu_net.output_width()
    }
}

/// The exact conditional `p(y | x) = N(ρx, (1 − ρ²) I)` of a Gaussian source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnownGaussianConditional {
    pub rho: f64,
    pub dim: usize,
}

impl Conditional for KnownGaussianConditional {
    fn moments(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let n = g.shape(x).0;
        let mu = g.scale(x, self.rho);
        let logvar = g.constant(Tensor::full(n, self.dim, (1.0 - self.rho * self.rho).ln()));
        (mu, logvar)
    }
}

impl ConditionalModel for KnownGaussianConditional {
    type Bound = KnownGaussianConditional;

    fn bind(&self, _g: &mut Graph) -> Self {
        *self
    }

    fn x_dim(&self) -> usize {
        self.dim
    }

    fn y_dim(&self) -> usize {
        self.dim
    }
}

/// `I = −(d/2) ln(1 − ρ²)` for `d` independent coordinate pairs with correlation `ρ`.
pub fn gaussian_true_mi(dim: usize, rho: f64) -> f64 {
    -0.5 * dim as f64 * (1.0 - rho * rho).ln()
}

/// Inverse of [`gaussian_true_mi`]: the non-negative `ρ` giving `target_mi` nats.
pub fn rho_for_mi(target_mi: f64, dim: usize) -> Result<f64> {
    if !(target_mi >= 0.0) || !target_mi.is_finite() {
        return Err(Error::contract(format!(
            "target mutual information must be finite and >= 0, got {target_mi}"
        )));
    }
    if dim == 0 {
        return Err(Error::contract("dimension must be positive"));
    }
    Ok((-(-2.0 * target_mi / dim as f64).exp_m1()).sqrt())
}

/// Jointly Gaussian `(x, y)` with per-coordinate correlation `ρ`, optionally
/// followed by `y → (W y)³`.
#[derive(Clone, Debug)]
pub struct CorrelatedGaussianSource {
    dim: usize,
    rho: f64,
    mixing: Option<Tensor>,
    seed: u64,
}

impl CorrelatedGaussianSource {
    /// `seed` drives the mixing matrix of the cubic variant only.
    pub fn new(dim: usize, rho: f64, cubic: bool, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("dimension must be positive"));
        }
        check_rho(rho)?;
        let mixing = cubic.then(|| well_conditioned_mixing(dim, seed));
        Ok(Self {
            dim,
            rho,
            mixing,
            seed,
        })
    }

    pub fn gaussian(dim: usize, rho: f64) -> Result<Self> {
        Self::new(dim, rho, false, 0)
    }

    /// Same source (and mixing matrix) at a new correlation.
    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(Self {
            rho,
            ..self.clone()
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn is_cubic(&self) -> bool {
        self.mixing.is_some()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mixing(&self) -> Option<&Tensor> {
        self.mixing.as_ref()
    }

    /// Exact for both variants: the cubic map is a smooth bijection of `y`.
    pub fn true_mi(&self) -> f64 {
        gaussian_true_mi(self.dim, self.rho)
    }

    pub fn known_conditional(&self) -> Result<KnownGaussianConditional> {
        if self.is_cubic() {
            return Err(Error::Unsupported(
                "the cubic source has no closed-form conditional".into(),
            ));
        }
        Ok(KnownGaussianConditional {
            rho: self.rho,
            dim: self.dim,
        })
    }

    /// `x ~ N(0, I)`, `y = ρx + √(1−ρ²) ε`, then `y ← (W y)³` if cubic.
    pub fn sample_joint<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        if n < 2 {
            return Err(Error::contract(format!("batch size must be >= 2, got {n}")));
        }
        let x = standard_normal(rng, n, self.dim);
        let eps = standard_normal(rng, n, self.dim);
        let s = (1.0 - self.rho * self.rho).sqrt();
        let mut y = x.zip_map(&eps, |a, e| self.rho * a + s * e);
        if let Some(w) = &self.mixing {
            y = y.matmul(&w.transpose()).map(|v| v * v * v);
        }
        Batch::new(x, y)
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > -1.0 && rho < 1.0) {
        return Err(Error::contract(format!(
            "correlation must lie in the open interval (-1, 1), got {rho}"
        )));
    }
    Ok(())
}

fn condition_number(t: &Tensor) -> f64 {
    let m = DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
    let s = m.singular_values();
    s.max() / s.min()
}

/// Standard-normal entries, redrawn until the condition number is acceptable.
fn well_conditioned_mixing(dim: usize, seed: u64) -> Tensor {
    let mut rng = stream_rng(seed, 0x3a11);
    loop {
        let w = standard_normal(&mut rng, dim, dim);
        if condition_number(&w) < MAX_MIXING_CONDITION {
            return w;
        }
    }
}

/// Known conditional log-density of a Gaussian source.
pub fn known_cond_log_prob(
    src: &CorrelatedGaussianSource,
    x: &Tensor,
    y: &Tensor,
    pairing: Pairing,
) -> Result<Tensor> {
    log_prob(&src.known_conditional()?, x, y, pairing)
}

/// `x ~ N(0, I)`, `y = A x + ε` with `ε ~ N(0, I)`; `A` is trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianChannel {
    pub a: Tensor,
}

/// Exogenous noise of one channel draw; `y` is a deterministic function of it and `A`.
#[derive(Clone, Debug)]
pub struct ChannelNoise {
    pub x: Tensor,
    pub eps: Tensor,
}

impl LinearGaussianChannel {
    pub fn new(a: Tensor) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::dim(format!(
                "channel matrix must be square, got {:?}",
                a.shape()
            )));
        }
        if !a.is_finite() {
            return Err(Error::Numeric("channel matrix is not finite".into()));
        }
        Ok(Self { a })
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    /// A random direction rescaled so the channel carries `target_mi` nats.
    pub fn with_true_mi<R: Rng + ?Sized>(dim: usize, target_mi: f64, rng: &mut R) -> Result<Self> {
        if !(target_mi >= 0.0) || !target_mi.is_finite() {
            return Err(Error::contract("target mutual information must be >= 0"));
        }
        if dim == 0 {
            return Err(Error::contract("dimension must be positive"));
        }
        let base = standard_normal(rng, dim, dim);
        if target_mi == 0.0 {
            return Self::new(Tensor::zeros(dim, dim));
        }
        let mi_at = |c: f64| Self::new(base.map(|v| v * c)).and_then(|ch| ch.true_mi());
        let (mut lo, mut hi) = (0.0, 1.0);
        while mi_at(hi)? < target_mi {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mi_at(mid)? < target_mi {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Self::new(base.map(|v| v * hi))
    }

    /// `½ ln det(I + A Aᵀ)` via a Cholesky factorization.
    pub fn true_mi(&self) -> Result<f64> {
        if !self.a.is_finite() {
            return Err(Error::Numeric("channel matrix is not finite".into()));
        }
        let d = self.dim();
        let mut m = self.a.matmul(&self.a.transpose());
        for i in 0..d {
            m.set(i, i, m.get(i, i) + 1.0);
        }
        Ok(0.5 * cholesky_log_det(&m)?)
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> ChannelNoise {
        ChannelNoise {
            x: standard_normal(rng, n, self.dim()),
            eps: standard_normal(rng, n, self.dim()),
        }
    }

    /// `y = x Aᵀ + ε` on the graph, differentiable in `a`.
    pub fn response(g: &mut Graph, a: Var, x: Var, eps: Var) -> Var {
        let at = g.transpose(a);
        let ax = g.matmul(x, at);
        g.add(ax, eps)
    }

    pub fn realize(&self, noise: &ChannelNoise) -> Result<Batch> {
        let y = noise.x.matmul(&self.a.transpose());
        let y = y.zip_map(&noise.eps, |a, e| a + e);
        Batch::new(noise.x.clone(), y)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        let noise = self.sample_noise(n, rng);
        self.realize(&noise)
    }
}

/// Channel oracle as a free function.
pub fn channel_true_mi(ch: &LinearGaussianChannel) -> Result<f64> {
    ch.true_mi()
}

/// `ln det M` for symmetric positive-definite `M`.
fn cholesky_log_det(m: &Tensor) -> Result<f64> {
    let n = m.rows();
    let mut l = vec![0.0; n * n];
    let mut log_det = 0.0;
    for j in 0..n {
        let mut diag = m.get(j, j);
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > 0.0) {
            return Err(Error::Numeric("matrix is not positive definite".into()));
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        log_det += 2.0 * ljj.ln();
        for i in j + 1..n {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Ok(log_det)
}
