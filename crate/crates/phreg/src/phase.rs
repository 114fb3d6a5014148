//! Phase-type (PH) and inhomogeneous phase-type (IPH) distribution core.
//!
//! A PH law is the absorption time of a Markov jump process on transient
//! states `1..p` plus one absorbing state, parametrized by an initial
//! probability vector `pi` and a sub-intensity matrix `T` (exit rates
//! `t = -T e`). An IPH law is `Y = g(Z)` with `Z ~ PH(pi, T)` and `g` a
//! parametric increasing transform with `g(0) = 0`; equivalently the jump
//! intensity is scaled by `lambda(t) = d/dt g^{-1}(t)`. The transform
//! family controls the tail: exponential transforms give Pareto tails,
//! power transforms give heavy- or light-tailed Weibull, and so on.

use crate::error::{Error, Result};
use crate::matexp::{self, SquareMatrix};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Values below this are reported as underflowed rather than silently
/// collapsing to zero; tail diagnostics need distinguishable magnitudes.
pub const TAIL_CLAMP: f64 = 1e-300;

/// A tail-sensitive evaluation: the (possibly clamped) value plus a flag
/// telling whether the exact value underflowed the clamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailEval {
    pub value: f64,
    pub underflowed: bool,
}

// ---------------------------------------------------------------------------
// Markov structures
// ---------------------------------------------------------------------------

/// Named sparsity classes for `(pi, T)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StructureKind {
    Exponential,
    Erlang,
    Hyperexponential,
    Coxian,
    GeneralizedCoxian,
    General,
}

impl StructureKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StructureKind::Exponential => "exponential",
            StructureKind::Erlang => "erlang",
            StructureKind::Hyperexponential => "hyperexp",
            StructureKind::Coxian => "coxian",
            StructureKind::GeneralizedCoxian => "gcoxian",
            StructureKind::General => "general",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exponential" => Ok(StructureKind::Exponential),
            "erlang" => Ok(StructureKind::Erlang),
            "hyperexp" => Ok(StructureKind::Hyperexponential),
            "coxian" => Ok(StructureKind::Coxian),
            "gcoxian" => Ok(StructureKind::GeneralizedCoxian),
            "general" => Ok(StructureKind::General),
            other => Err(Error::Structure(format!("unknown structure '{other}'"))),
        }
    }
}

/// A structure kind together with its number of transient phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MarkovStructure {
    kind: StructureKind,
    phases: usize,
}

impl MarkovStructure {
    pub fn new(kind: StructureKind, phases: usize) -> Result<Self> {
        if phases == 0 {
            return Err(Error::Structure("number of phases must be at least 1".into()));
        }
        if kind == StructureKind::Exponential && phases != 1 {
            return Err(Error::Structure(format!(
                "exponential structure requires p = 1, got p = {phases}"
            )));
        }
        Ok(Self { kind, phases })
    }

    pub fn kind(&self) -> StructureKind {
        self.kind
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    /// Whether a transition rate `k -> s` (k != s) may be nonzero.
    pub fn allows_transition(&self, k: usize, s: usize) -> bool {
        match self.kind {
            StructureKind::Exponential | StructureKind::Hyperexponential => false,
            StructureKind::Erlang | StructureKind::Coxian | StructureKind::GeneralizedCoxian => {
                s == k + 1
            }
            StructureKind::General => k != s,
        }
    }

    /// Whether the chain may start in state `k`.
    pub fn allows_start(&self, k: usize) -> bool {
        match self.kind {
            StructureKind::Erlang | StructureKind::Coxian => k == 0,
            _ => true,
        }
    }

    /// Whether state `k` may exit directly to absorption.
    pub fn allows_exit(&self, k: usize) -> bool {
        match self.kind {
            StructureKind::Erlang => k == self.phases - 1,
            _ => true,
        }
    }

    /// Number of free rate parameters in `(pi, T)` under this structure's
    /// canonical parametrization.
    pub fn free_parameters(&self) -> usize {
        let p = self.phases;
        match self.kind {
            StructureKind::Exponential => 1,
            StructureKind::Erlang => 1,
            StructureKind::Hyperexponential => 2 * p - 1,
            StructureKind::Coxian => 2 * p - 1,
            StructureKind::GeneralizedCoxian => 3 * p - 2,
            StructureKind::General => p * p + p - 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Inhomogeneity transforms
// ---------------------------------------------------------------------------

/// Transform family tag; the parametrized transform is
/// [`InhomogeneityTransform`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformFamily {
    Identity,
    Pareto,
    Weibull,
    LogNormal,
    Gompertz,
}

impl TransformFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransformFamily::Identity => "identity",
            TransformFamily::Pareto => "pareto",
            TransformFamily::Weibull => "weibull",
            TransformFamily::LogNormal => "lognormal",
            TransformFamily::Gompertz => "gompertz",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TransformFamily::Identity),
            "pareto" => Ok(TransformFamily::Pareto),
            "weibull" => Ok(TransformFamily::Weibull),
            "lognormal" => Ok(TransformFamily::LogNormal),
            "gompertz" => Ok(TransformFamily::Gompertz),
            other => Err(Error::UnsupportedTransform(format!("unknown family '{other}'"))),
        }
    }

    pub fn theta_dim(&self) -> usize {
        match self {
            TransformFamily::Identity => 0,
            _ => 1,
        }
    }

    pub fn theta_name(&self) -> &'static str {
        match self {
            TransformFamily::LogNormal => "gamma",
            _ => "eta",
        }
    }
}

/// Parametric increasing transform `g` with `g(0) = 0`, its inverse
/// `g^{-1}(y) = int_0^y lambda(s) ds`, and the intensity `lambda`.
///
/// Families and their transforms `g(z)`:
/// - `Identity`:  `z`
/// - `Pareto`:    `eta (e^z - 1)`, `eta > 0` (regularly varying tails)
/// - `Weibull`:   `z^{1/eta}`, `eta > 0`
/// - `LogNormal`: `exp(z^{1/gamma}) - 1`, `gamma > 1`
/// - `Gompertz`:  `log(eta z + 1) / eta`, `eta > 0`
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InhomogeneityTransform {
    Identity,
    MatrixPareto { eta: f64 },
    MatrixWeibull { eta: f64 },
    MatrixLogNormal { gamma: f64 },
    MatrixGompertz { eta: f64 },
}

impl InhomogeneityTransform {
    pub fn from_family(family: TransformFamily, theta: &[f64]) -> Result<Self> {
        let need = family.theta_dim();
        if theta.len() != need {
            return Err(Error::UnsupportedTransform(format!(
                "family '{}' takes {} parameter(s), got {}",
                family.as_str(),
                need,
                theta.len()
            )));
        }
        match family {
            TransformFamily::Identity => Ok(InhomogeneityTransform::Identity),
            TransformFamily::Pareto => Self::pareto(theta[0]),
            TransformFamily::Weibull => Self::weibull(theta[0]),
            TransformFamily::LogNormal => Self::log_normal(theta[0]),
            TransformFamily::Gompertz => Self::gompertz(theta[0]),
        }
    }

    pub fn pareto(eta: f64) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::UnsupportedTransform(format!("pareto requires eta > 0, got {eta}")));
        }
        Ok(InhomogeneityTransform::MatrixPareto { eta })
    }

    pub fn weibull(eta: f64) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::UnsupportedTransform(format!("weibull requires eta > 0, got {eta}")));
        }
        Ok(InhomogeneityTransform::MatrixWeibull { eta })
    }

    pub fn log_normal(gamma: f64) -> Result<Self> {
        if !(gamma > 1.0) || !gamma.is_finite() {
            return Err(Error::UnsupportedTransform(format!(
                "lognormal requires gamma > 1, got {gamma}"
            )));
        }
        Ok(InhomogeneityTransform::MatrixLogNormal { gamma })
    }

    pub fn gompertz(eta: f64) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::UnsupportedTransform(format!(
                "gompertz requires eta > 0, got {eta}"
            )));
        }
        Ok(InhomogeneityTransform::MatrixGompertz { eta })
    }

    pub fn family(&self) -> TransformFamily {
        match self {
            InhomogeneityTransform::Identity => TransformFamily::Identity,
            InhomogeneityTransform::MatrixPareto { .. } => TransformFamily::Pareto,
            InhomogeneityTransform::MatrixWeibull { .. } => TransformFamily::Weibull,
            InhomogeneityTransform::MatrixLogNormal { .. } => TransformFamily::LogNormal,
            InhomogeneityTransform::MatrixGompertz { .. } => TransformFamily::Gompertz,
        }
    }

    pub fn theta(&self) -> Vec<f64> {
        match *self {
            InhomogeneityTransform::Identity => vec![],
            InhomogeneityTransform::MatrixPareto { eta }
            | InhomogeneityTransform::MatrixWeibull { eta }
            | InhomogeneityTransform::MatrixGompertz { eta } => vec![eta],
            InhomogeneityTransform::MatrixLogNormal { gamma } => vec![gamma],
        }
    }

    pub fn theta_dim(&self) -> usize {
        self.family().theta_dim()
    }

    /// `g(z)` for `z >= 0`.
    pub fn g(&self, z: f64) -> f64 {
        match *self {
            InhomogeneityTransform::Identity => z,
            InhomogeneityTransform::MatrixPareto { eta } => eta * z.exp_m1(),
            InhomogeneityTransform::MatrixWeibull { eta } => z.powf(1.0 / eta),
            InhomogeneityTransform::MatrixLogNormal { gamma } => z.powf(1.0 / gamma).exp_m1(),
            InhomogeneityTransform::MatrixGompertz { eta } => (eta * z).ln_1p() / eta,
        }
    }

    /// `g^{-1}(y) = int_0^y lambda(s) ds`, the cumulative intensity.
    pub fn g_inverse(&self, y: f64) -> f64 {
        match *self {
            InhomogeneityTransform::Identity => y,
            InhomogeneityTransform::MatrixPareto { eta } => (y / eta).ln_1p(),
            InhomogeneityTransform::MatrixWeibull { eta } => y.powf(eta),
            InhomogeneityTransform::MatrixLogNormal { gamma } => y.ln_1p().powf(gamma),
            InhomogeneityTransform::MatrixGompertz { eta } => (eta * y).exp_m1() / eta,
        }
    }

    /// `lambda(s) = d/ds g^{-1}(s)`, positive for `s > 0`.
    pub fn intensity(&self, s: f64) -> f64 {
        match *self {
            InhomogeneityTransform::Identity => 1.0,
            InhomogeneityTransform::MatrixPareto { eta } => 1.0 / (eta + s),
            InhomogeneityTransform::MatrixWeibull { eta } => eta * s.powf(eta - 1.0),
            InhomogeneityTransform::MatrixLogNormal { gamma } => {
                gamma * s.ln_1p().powf(gamma - 1.0) / (1.0 + s)
            }
            InhomogeneityTransform::MatrixGompertz { eta } => (eta * s).exp(),
        }
    }

    /// `d/d theta lambda(s; theta)`; zero-dimensional for the identity.
    pub fn intensity_dtheta(&self, s: f64) -> f64 {
        match *self {
            InhomogeneityTransform::Identity => 0.0,
            InhomogeneityTransform::MatrixPareto { eta } => -1.0 / ((eta + s) * (eta + s)),
            InhomogeneityTransform::MatrixWeibull { eta } => {
                s.powf(eta - 1.0) * (1.0 + eta * s.ln())
            }
            InhomogeneityTransform::MatrixLogNormal { gamma } => {
                let u = s.ln_1p();
                u.powf(gamma - 1.0) * (1.0 + gamma * u.ln()) / (1.0 + s)
            }
            InhomogeneityTransform::MatrixGompertz { eta } => s * (eta * s).exp(),
        }
    }

    /// `d/d theta g^{-1}(y; theta)`.
    pub fn g_inverse_dtheta(&self, y: f64) -> f64 {
        match *self {
            InhomogeneityTransform::Identity => 0.0,
            InhomogeneityTransform::MatrixPareto { eta } => 1.0 / (eta + y) - 1.0 / eta,
            InhomogeneityTransform::MatrixWeibull { eta } => y.powf(eta) * y.ln(),
            InhomogeneityTransform::MatrixLogNormal { gamma } => {
                let u = y.ln_1p();
                u.powf(gamma) * u.ln()
            }
            InhomogeneityTransform::MatrixGompertz { eta } => {
                ((eta * y) * (eta * y).exp() - (eta * y).exp_m1()) / (eta * eta)
            }
        }
    }

    /// `g'(z)`, used when integrating survival in PH time.
    pub fn g_derivative(&self, z: f64) -> f64 {
        match *self {
            InhomogeneityTransform::Identity => 1.0,
            InhomogeneityTransform::MatrixPareto { eta } => eta * z.exp(),
            InhomogeneityTransform::MatrixWeibull { eta } => z.powf(1.0 / eta - 1.0) / eta,
            InhomogeneityTransform::MatrixLogNormal { gamma } => {
                let r = z.powf(1.0 / gamma);
                r.exp() * z.powf(1.0 / gamma - 1.0) / gamma
            }
            InhomogeneityTransform::MatrixGompertz { eta } => 1.0 / (eta * z + 1.0),
        }
    }

    /// Maps `theta` to an unconstrained coordinate for optimizers
    /// (`log eta`, or `log(gamma - 1)` for the lognormal family).
    pub fn to_unconstrained(&self) -> Option<f64> {
        match *self {
            InhomogeneityTransform::Identity => None,
            InhomogeneityTransform::MatrixPareto { eta }
            | InhomogeneityTransform::MatrixWeibull { eta }
            | InhomogeneityTransform::MatrixGompertz { eta } => Some(eta.ln()),
            InhomogeneityTransform::MatrixLogNormal { gamma } => Some((gamma - 1.0).ln()),
        }
    }

    /// Rebuilds the transform from an unconstrained coordinate.
    pub fn with_unconstrained(&self, u: f64) -> Result<Self> {
        match self.family() {
            TransformFamily::Identity => Ok(InhomogeneityTransform::Identity),
            TransformFamily::Pareto => Self::pareto(u.exp()),
            TransformFamily::Weibull => Self::weibull(u.exp()),
            TransformFamily::LogNormal => Self::log_normal(1.0 + u.exp()),
            TransformFamily::Gompertz => Self::gompertz(u.exp()),
        }
    }
}

// ---------------------------------------------------------------------------
// Phase-type law
// ---------------------------------------------------------------------------

/// PH(pi, T) with a declared sparsity structure. The exit vector
/// `t = -T e` is derived at construction. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseTypeLaw {
    pi: Vec<f64>,
    t: SquareMatrix,
    exit: Vec<f64>,
    structure: MarkovStructure,
}

impl PhaseTypeLaw {
    pub fn new(pi: Vec<f64>, t: SquareMatrix, structure: MarkovStructure) -> Result<Self> {
        let p = structure.phases();
        if t.dim() != p || pi.len() != p {
            return Err(Error::Dimension(format!(
                "law dimensions (pi {}, T {}) do not match structure p = {}",
                pi.len(),
                t.dim(),
                p
            )));
        }
        if pi.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NumericDomain("initial vector must be nonnegative".into()));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::NumericDomain(format!("initial vector sums to {total}, not 1")));
        }
        matexp::validate_sub_intensity(&t)?;
        let scale = t.max_abs();
        for k in 0..p {
            if !structure.allows_start(k) && pi[k] != 0.0 {
                return Err(Error::Structure(format!(
                    "structure {} forbids starting mass in state {k}",
                    structure.kind().as_str()
                )));
            }
            for s in 0..p {
                if k != s && !structure.allows_transition(k, s) && t[(k, s)] != 0.0 {
                    return Err(Error::Structure(format!(
                        "structure {} forbids transition {k} -> {s}",
                        structure.kind().as_str()
                    )));
                }
            }
        }
        let mut exit = vec![0.0; p];
        for k in 0..p {
            let row_sum: f64 = t.row(k).iter().sum();
            let mut e = -row_sum;
            if e < 0.0 {
                // rounding from the diagonal assembly; already bounded by
                // validate_sub_intensity
                e = 0.0;
            }
            if !structure.allows_exit(k) && e > 1e-12 * scale {
                return Err(Error::Structure(format!(
                    "structure {} forbids exit from state {k} (rate {e})",
                    structure.kind().as_str()
                )));
            }
            exit[k] = e;
        }
        Ok(Self { pi, t, exit, structure })
    }

    pub fn phases(&self) -> usize {
        self.structure.phases()
    }

    pub fn initial(&self) -> &[f64] {
        &self.pi
    }

    pub fn sub_intensity(&self) -> &SquareMatrix {
        &self.t
    }

    pub fn exit(&self) -> &[f64] {
        &self.exit
    }

    pub fn structure(&self) -> MarkovStructure {
        self.structure
    }
}

// ---------------------------------------------------------------------------
// Fast functional evaluation
// ---------------------------------------------------------------------------

/// Cached uniformization series for the scalar functionals
/// `pi' exp(Tz) t` (density kernel) and `pi' exp(Tz) e` (survival kernel).
///
/// With `Q = I + T/phi` the functional is `sum_n pois(phi z; n) c_n` where
/// `c_n = pi' Q^n w` is nonnegative and bounded by `max w`, so the series
/// has no cancellation and the truncation tail is controlled by a running
/// geometric bound. Coefficients are shared across all `z` for a fixed
/// law, which makes repeated evaluation (EM inner loops, quadrature) cheap.
pub(crate) struct LawKernel {
    phi: f64,
    q: SquareMatrix,
    t: SquareMatrix,
    pi: Vec<f64>,
    exit: Vec<f64>,
    pow_row: Vec<f64>, // pi' Q^n for n = coefficient count so far
    dens: Vec<f64>,    // pi' Q^n t
    surv: Vec<f64>,    // pi' Q^n e
    exit_sup: f64,
    tol: f64,
}

/// Poisson means above this go through the squaring-based matrix route;
/// below it the linear-space series is both faster and relatively accurate.
const SERIES_MEAN_LIMIT: f64 = 700.0;

impl LawKernel {
    pub fn new(law: &PhaseTypeLaw, tol: f64) -> Self {
        let p = law.phases();
        let t = law.sub_intensity().clone();
        let phi = (0..p).fold(0.0f64, |acc, k| acc.max(-t[(k, k)]));
        let mut q = SquareMatrix::identity(p).expect("p >= 1");
        for r in 0..p {
            for c in 0..p {
                q[(r, c)] += t[(r, c)] / phi;
            }
        }
        let pi = law.initial().to_vec();
        let exit = law.exit().to_vec();
        let exit_sup = exit.iter().fold(0.0f64, |a, b| a.max(*b));
        let dens = vec![dot(&pi, &exit)];
        let surv = vec![pi.iter().sum()];
        Self { phi, q, t, pow_row: pi.clone(), pi, exit, dens, surv, exit_sup, tol }
    }

    fn extend(&mut self) {
        self.pow_row = self.q.vecmat(&self.pow_row);
        self.dens.push(dot(&self.pow_row, &self.exit));
        self.surv.push(self.pow_row.iter().sum());
    }

    /// `ln(pi' exp(Tz) t)`; `-inf` when the value underflows entirely.
    pub fn log_density(&mut self, z: f64) -> f64 {
        self.log_functional(z, true)
    }

    /// `ln(pi' exp(Tz) e)`.
    pub fn log_survival(&mut self, z: f64) -> f64 {
        self.log_functional(z, false)
    }

    fn log_functional(&mut self, z: f64, density: bool) -> f64 {
        if !z.is_finite() || z < 0.0 {
            return f64::NEG_INFINITY;
        }
        let mu = self.phi * z;
        if mu > SERIES_MEAN_LIMIT {
            return self.log_functional_matrix(z, density);
        }
        let w_sup = if density { self.exit_sup } else { 1.0 };
        let mut weight = (-mu).exp();
        let mut sum = 0.0f64;
        let mut n = 0usize;
        loop {
            if n >= self.dens.len() {
                self.extend();
            }
            let c = if density { self.dens[n] } else { self.surv[n] };
            sum += c * weight;
            let next = n as f64 + 1.0;
            weight *= mu / next;
            n += 1;
            if weight == 0.0 {
                break;
            }
            if n as f64 > mu {
                // terms decay at least geometrically with ratio r from here
                let r = mu / (n as f64 + 1.0);
                let tail = w_sup * weight / (1.0 - r);
                if tail <= 1e-15 * sum {
                    break;
                }
            }
        }
        if sum > 0.0 {
            sum.ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    fn log_functional_matrix(&self, z: f64, density: bool) -> f64 {
        let plan = matexp::UniformizationPlan::build(&self.t, z, self.tol)
            .expect("validated law and finite nonnegative time");
        // the factored form keeps log-scale fidelity long after exp(Tz)
        // itself would underflow
        let (e, log_scale) = plan.execute_log_scaled();
        let row = e.vecmat(&self.pi);
        let v: f64 = if density {
            dot(&row, &self.exit)
        } else {
            row.iter().sum()
        };
        if v > 0.0 {
            v.ln() + log_scale
        } else {
            f64::NEG_INFINITY
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Builds a valid random law with the exact zero pattern of the requested
/// structure. Off-diagonal splits and starting masses are drawn uniformly;
/// rates are drawn on `(0.1, 1.1) * p / data_scale` and the whole matrix is
/// then rescaled so the unconditional mean `pi (-T)^{-1} e` equals
/// `data_scale`.
pub fn build_structure(
    structure: MarkovStructure,
    seed: u64,
    data_scale: f64,
) -> Result<PhaseTypeLaw> {
    if !(data_scale > 0.0) || !data_scale.is_finite() {
        return Err(Error::Domain(format!("data scale must be positive, got {data_scale}")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let p = structure.phases();
    let base = p as f64 / data_scale;
    let draw_rate = |rng: &mut ChaCha12Rng| rng.gen_range(0.1..1.1) * base;

    let mut t = SquareMatrix::zeros(p)?;
    let mut pi = vec![0.0; p];
    match structure.kind() {
        StructureKind::Exponential => {
            pi[0] = 1.0;
            t[(0, 0)] = -draw_rate(&mut rng);
        }
        StructureKind::Erlang => {
            pi[0] = 1.0;
            let alpha = draw_rate(&mut rng);
            for k in 0..p {
                t[(k, k)] = -alpha;
                if k + 1 < p {
                    t[(k, k + 1)] = alpha;
                }
            }
        }
        StructureKind::Hyperexponential => {
            random_simplex(&mut rng, &mut pi);
            for k in 0..p {
                t[(k, k)] = -draw_rate(&mut rng);
            }
        }
        StructureKind::Coxian | StructureKind::GeneralizedCoxian => {
            if structure.kind() == StructureKind::Coxian {
                pi[0] = 1.0;
            } else {
                random_simplex(&mut rng, &mut pi);
            }
            for k in 0..p {
                let alpha = draw_rate(&mut rng);
                t[(k, k)] = -alpha;
                if k + 1 < p {
                    let q: f64 = rng.gen_range(0.2..0.8);
                    t[(k, k + 1)] = q * alpha;
                }
            }
        }
        StructureKind::General => {
            random_simplex(&mut rng, &mut pi);
            for k in 0..p {
                let alpha = draw_rate(&mut rng);
                // split the total rate over the p - 1 transitions plus exit
                let mut shares: Vec<f64> = (0..p).map(|_| rng.gen_range(0.1..1.1)).collect();
                let total: f64 = shares.iter().sum();
                for s in &mut shares {
                    *s *= alpha / total;
                }
                t[(k, k)] = -alpha;
                let mut idx = 0;
                for s in 0..p {
                    if s != k {
                        t[(k, s)] = shares[idx];
                        idx += 1;
                    }
                }
                // shares[p - 1] is the exit rate, implicit in the row sum
            }
        }
    }
    let law = PhaseTypeLaw::new(pi.clone(), t.clone(), structure)?;
    let mean = ph_mean(&law)?;
    t.scale_in_place(mean / data_scale);
    PhaseTypeLaw::new(pi, t, structure)
}

fn random_simplex(rng: &mut ChaCha12Rng, out: &mut [f64]) {
    let mut total = 0.0;
    for v in out.iter_mut() {
        *v = rng.gen_range(0.1..1.1);
        total += *v;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
}

/// Log of the IPH density `lambda(y) pi' exp(g^{-1}(y) T) t`.
pub fn iph_log_density(
    law: &PhaseTypeLaw,
    transform: &InhomogeneityTransform,
    y: f64,
) -> Result<f64> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::Domain(format!("density requires y > 0, got {y}")));
    }
    let mut kernel = LawKernel::new(law, matexp::DEFAULT_TOL);
    let z = transform.g_inverse(y);
    Ok(transform.intensity(y).ln() + kernel.log_density(z))
}

/// IPH density at `y > 0`; integrates to one over the positive axis.
pub fn iph_density(law: &PhaseTypeLaw, transform: &InhomogeneityTransform, y: f64) -> Result<f64> {
    Ok(iph_log_density(law, transform, y)?.exp())
}

fn log_survival_inner(law: &PhaseTypeLaw, transform: &InhomogeneityTransform, y: f64) -> f64 {
    let mut kernel = LawKernel::new(law, matexp::DEFAULT_TOL);
    kernel.log_survival(transform.g_inverse(y))
}

/// Survival `pi' exp(g^{-1}(y) T) e`, clamped at [`TAIL_CLAMP`] with the
/// underflow recorded in the flag.
pub fn iph_survival_checked(
    law: &PhaseTypeLaw,
    transform: &InhomogeneityTransform,
    y: f64,
) -> Result<TailEval> {
    if !(y >= 0.0) || !y.is_finite() {
        return Err(Error::Domain(format!("survival requires y >= 0, got {y}")));
    }
    if y == 0.0 {
        return Ok(TailEval { value: 1.0, underflowed: false });
    }
    let ls = log_survival_inner(law, transform, y);
    if ls < TAIL_CLAMP.ln() {
        Ok(TailEval { value: TAIL_CLAMP, underflowed: true })
    } else {
        Ok(TailEval { value: ls.exp().min(1.0), underflowed: false })
    }
}

/// Survival function value in [0, 1] (clamped in the extreme tail).
pub fn iph_survival(law: &PhaseTypeLaw, transform: &InhomogeneityTransform, y: f64) -> Result<f64> {
    Ok(iph_survival_checked(law, transform, y)?.value)
}

/// Hazard `f(y) / S(y)`; survival underflow yields an infinite hazard with
/// the tail-underflow flag set.
pub fn iph_hazard(
    law: &PhaseTypeLaw,
    transform: &InhomogeneityTransform,
    y: f64,
) -> Result<TailEval> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::Domain(format!("hazard requires y > 0, got {y}")));
    }
    let ld = iph_log_density(law, transform, y)?;
    let ls = log_survival_inner(law, transform, y);
    if ls < TAIL_CLAMP.ln() {
        return Ok(TailEval { value: f64::INFINITY, underflowed: true });
    }
    Ok(TailEval { value: (ld - ls).exp(), underflowed: false })
}

/// Cumulative hazard `-ln S(y)`; nondecreasing in `y`.
pub fn iph_cumhazard(
    law: &PhaseTypeLaw,
    transform: &InhomogeneityTransform,
    y: f64,
) -> Result<f64> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::Domain(format!("cumulative hazard requires y > 0, got {y}")));
    }
    Ok(-log_survival_inner(law, transform, y))
}

/// Draws one PH absorption time by simulating the embedded jump chain.
pub fn sample_ph_with_rng<R: Rng + ?Sized>(law: &PhaseTypeLaw, rng: &mut R) -> f64 {
    let p = law.phases();
    let t = law.sub_intensity();
    let exit = law.exit();
    let mut state = categorical(rng, law.initial());
    let mut z = 0.0;
    loop {
        let alpha = -t[(state, state)];
        let draw: f64 = rand_distr::Exp1.sample(rng);
        z += draw / alpha;
        // choose the destination among transitions and absorption
        let u: f64 = rng.gen_range(0.0..1.0) * alpha;
        let mut acc = exit[state];
        if u < acc {
            return z;
        }
        let mut next = state;
        for s in 0..p {
            if s == state {
                continue;
            }
            acc += t[(state, s)];
            if u < acc {
                next = s;
                break;
            }
        }
        if next == state {
            // numerical slack in the row sum; treat as absorption
            return z;
        }
        state = next;
    }
}

use rand_distr::Distribution;

fn categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Simulates `n` IPH draws `Y = g(Z)` with `Z ~ PH(pi, T)`.
pub fn sample(
    law: &PhaseTypeLaw,
    transform: &InhomogeneityTransform,
    n: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    sample_with_rng(law, transform, n, &mut rng)
}

pub fn sample_with_rng<R: Rng + ?Sized>(
    law: &PhaseTypeLaw,
    transform: &InhomogeneityTransform,
    n: usize,
    rng: &mut R,
) -> Vec<f64> {
    (0..n).map(|_| transform.g(sample_ph_with_rng(law, rng))).collect()
}

/// Largest real eigenvalue of a sub-intensity matrix (always real and
/// dominant among real parts for essentially nonnegative matrices).
/// Triangular matrices read it off the diagonal; otherwise inverse power
/// iteration on `(-T)^{-1}` (a nonnegative matrix) finds the Perron root.
pub(crate) fn largest_real_eigenvalue(t: &SquareMatrix) -> Result<f64> {
    let p = t.dim();
    if t.is_upper_triangular() || t.is_lower_triangular() {
        return Ok((0..p).fold(f64::NEG_INFINITY, |acc, k| acc.max(t[(k, k)])));
    }
    let mut neg = t.clone();
    neg.scale_in_place(-1.0);
    let inv = neg.inverse()?;
    let mut v = vec![1.0 / p as f64; p];
    let mut rho_prev = 0.0;
    for iter in 0..200_000 {
        let w = inv.matvec(&v);
        let rho = dot(&w, &v) / dot(&v, &v);
        let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NumericDomain("power iteration broke down".into()));
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
        if iter > 3 && (rho - rho_prev).abs() <= 1e-14 * rho.abs() {
            return Ok(-1.0 / rho);
        }
        rho_prev = rho;
    }
    Ok(-1.0 / rho_prev)
}

/// Largest real eigenvalue of the law's sub-intensity matrix.
pub(crate) fn largest_real_eigenvalue_of(law: &PhaseTypeLaw) -> Result<f64> {
    largest_real_eigenvalue(law.sub_intensity())
}

/// Tail index of a Matrix-Pareto law: `-1 / chi` with `chi` the largest
/// real eigenvalue of `T`. Other transform families are refused.
pub fn tail_index(law: &PhaseTypeLaw, transform: &InhomogeneityTransform) -> Result<f64> {
    match transform {
        InhomogeneityTransform::MatrixPareto { .. } => {
            let chi = largest_real_eigenvalue(law.sub_intensity())?;
            Ok(-1.0 / chi)
        }
        other => Err(Error::UnsupportedTransform(format!(
            "tail index is defined for the pareto family, not '{}'",
            other.family().as_str()
        ))),
    }
}

/// Unconditional PH mean `pi (-T)^{-1} e`.
pub fn ph_mean(law: &PhaseTypeLaw) -> Result<f64> {
    let p = law.phases();
    let mut neg = law.sub_intensity().clone();
    neg.scale_in_place(-1.0);
    let x = neg.solve(&vec![1.0; p])?;
    Ok(dot(law.initial(), &x))
}
