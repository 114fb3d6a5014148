//! Phase-type regression: covariates act multiplicatively on the Markov
//! intensity through a positive link `m`, so the conditional density is
//!
//! `f(y | x) = m(x'b) lambda(y; th) pi' exp(m(x'b) g^{-1}(y; th) T) t`.
//!
//! The transform identity `g^{-1}(y | x) = m(x'b) g^{-1}(y; th)` turns the
//! conditional law into plain PH(pi, T) on transformed data, which is what
//! the generalized EM fitter exploits: transform, one (E, M) pass for
//! `(pi, T)`, then a derivative-free ascent step over `(th, b)` with
//! `(pi, T)` held fixed. Each stage increases the observed likelihood.

use crate::emfit::{self, EvalControl};
use crate::error::{Error, Result};
use crate::matexp::SquareMatrix;
use crate::numeric;
use crate::phase::{
    self, build_structure, InhomogeneityTransform, LawKernel, MarkovStructure, PhaseTypeLaw,
    TransformFamily,
};

// ---------------------------------------------------------------------------
// Link functions
// ---------------------------------------------------------------------------

/// Positive differentiable link `m`. The exponential link is the default;
/// softplus is provided as an alternative behind the same interface.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Link {
    Exp,
    Softplus,
}

impl Link {
    pub fn value(&self, x: f64) -> f64 {
        match self {
            Link::Exp => x.exp(),
            Link::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Link::Exp => x.exp(),
            Link::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Link::Exp => "exp",
            Link::Softplus => "softplus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(Link::Exp),
            "softplus" => Ok(Link::Softplus),
            other => Err(Error::UnsupportedTransform(format!("unknown link '{other}'"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Positive responses with covariate rows. `d = 0` means marginal fitting.
#[derive(Clone, Debug)]
pub struct Dataset {
    y: Vec<f64>,
    x: Vec<f64>, // row-major, n x d
    d: usize,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, x_rows: Vec<Vec<f64>>, names: Vec<String>) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Data("dataset must contain at least one observation".into()));
        }
        let d = names.len();
        if x_rows.len() != y.len() && !(d == 0 && x_rows.is_empty()) {
            return Err(Error::Data(format!(
                "covariate rows ({}) do not match responses ({})",
                x_rows.len(),
                y.len()
            )));
        }
        for (i, v) in y.iter().enumerate() {
            if !(*v > 0.0) || !v.is_finite() {
                return Err(Error::Data(format!("response at row {i} is {v}; must be positive")));
            }
        }
        let mut x = Vec::with_capacity(y.len() * d);
        if d > 0 {
            for (i, row) in x_rows.iter().enumerate() {
                if row.len() != d {
                    return Err(Error::Data(format!(
                        "covariate row {i} has {} entries, expected {d}",
                        row.len()
                    )));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!("covariate row {i} has non-finite values")));
                }
                x.extend_from_slice(row);
            }
        }
        Ok(Self { y, x, d, names })
    }

    pub fn marginal(y: Vec<f64>) -> Result<Self> {
        Self::new(y, Vec::new(), Vec::new())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.d
    }

    pub fn responses(&self) -> &[f64] {
        &self.y
    }

    pub fn covariate_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.names
    }

    /// Projects onto a subset of covariate columns, by name.
    pub fn select_covariates(&self, names: &[String]) -> Result<Dataset> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| Error::Data(format!("covariate column '{n}' not found")))
            })
            .collect::<Result<_>>()?;
        let rows: Vec<Vec<f64>> = (0..self.len())
            .map(|i| idx.iter().map(|&j| self.covariate_row(i)[j]).collect())
            .collect();
        Dataset::new(self.y.clone(), rows, names.to_vec())
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// The full conditional law of `Y | X`: PH core, inhomogeneity transform,
/// regression coefficients, and link. There is no intercept column; the
/// overall level lives in `T`.
#[derive(Clone, Debug)]
pub struct RegressionModel {
    pub law: PhaseTypeLaw,
    pub transform: InhomogeneityTransform,
    pub beta: Vec<f64>,
    pub link: Link,
}

impl RegressionModel {
    pub fn new(
        law: PhaseTypeLaw,
        transform: InhomogeneityTransform,
        beta: Vec<f64>,
        link: Link,
    ) -> Result<Self> {
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NumericDomain("regression coefficients must be finite".into()));
        }
        Ok(Self { law, transform, beta, link })
    }

    pub fn covariate_dim(&self) -> usize {
        self.beta.len()
    }

    /// `m(x'b)` for one covariate row.
    pub fn multiplier(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.beta.len() {
            return Err(Error::Dimension(format!(
                "covariate row has {} entries, model expects {}",
                x.len(),
                self.beta.len()
            )));
        }
        Ok(self.link.value(phase::dot(x, &self.beta)))
    }

    /// Conditional survival `S(y | x)`.
    pub fn conditional_survival(&self, x: &[f64], y: f64) -> Result<f64> {
        Ok(self.conditional_log_survival(x, y)?.exp().min(1.0))
    }

    pub fn conditional_log_survival(&self, x: &[f64], y: f64) -> Result<f64> {
        if !(y >= 0.0) || !y.is_finite() {
            return Err(Error::Domain(format!("survival requires y >= 0, got {y}")));
        }
        let m = self.multiplier(x)?;
        let mut kernel = LawKernel::new(&self.law, crate::matexp::DEFAULT_TOL);
        Ok(kernel.log_survival(m * self.transform.g_inverse(y)))
    }

    pub fn conditional_log_density(&self, x: &[f64], y: f64) -> Result<f64> {
        if !(y > 0.0) || !y.is_finite() {
            return Err(Error::Domain(format!("density requires y > 0, got {y}")));
        }
        let m = self.multiplier(x)?;
        let mut kernel = LawKernel::new(&self.law, crate::matexp::DEFAULT_TOL);
        Ok(m.ln()
            + self.transform.intensity(y).ln()
            + kernel.log_density(m * self.transform.g_inverse(y)))
    }

    /// Degrees of freedom: free structural rates plus transform and
    /// regression parameters.
    pub fn degrees_of_freedom(&self) -> usize {
        self.law.structure().free_parameters() + self.transform.theta_dim() + self.beta.len()
    }

    /// Simulates one response per covariate row.
    pub fn simulate<R: rand::Rng + ?Sized>(&self, rows: &[&[f64]], rng: &mut R) -> Result<Vec<f64>> {
        rows.iter()
            .map(|x| {
                let m = self.multiplier(x)?;
                let z = phase::sample_ph_with_rng(&self.law, rng);
                Ok(self.transform.g(z / m))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Likelihood machinery
// ---------------------------------------------------------------------------

/// `z_i = g^{-1}(y_i; th) m(x_i'b)`; under the model, `z ~ PH(pi, T)`.
pub fn transform_data(model: &RegressionModel, data: &Dataset) -> Result<Vec<f64>> {
    if data.covariate_dim() != model.covariate_dim() {
        return Err(Error::Dimension(format!(
            "dataset has {} covariates, model expects {}",
            data.covariate_dim(),
            model.covariate_dim()
        )));
    }
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let m = model.multiplier(data.covariate_row(i))?;
        let z = model.transform.g_inverse(data.responses()[i]) * m;
        if !z.is_finite() {
            return Err(Error::TransformOverflow { index: i });
        }
        if !(z > 0.0) {
            return Err(Error::Data(format!(
                "transformed observation {i} is {z}; transform degenerated below resolution"
            )));
        }
        out.push(z);
    }
    Ok(out)
}

/// Batch log-likelihood for arbitrary `(law, transform, beta)`; returns
/// `-inf` when any observation overflows or underflows, which makes it
/// directly usable as a search objective.
fn loglik_value(
    law: &PhaseTypeLaw,
    transform: &InhomogeneityTransform,
    beta: &[f64],
    link: Link,
    data: &Dataset,
    control: &EvalControl,
) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    let result = emfit::chunked_map_reduce(&idx, control.threads, 0.0f64, |chunk, acc| {
        let mut kernel = LawKernel::new(law, control.kernel_tol);
        let mut local = 0.0;
        for &i in chunk {
            let y = data.responses()[i];
            let eta = phase::dot(data.covariate_row(i), beta);
            let m = link.value(eta);
            let z = transform.g_inverse(y) * m;
            if !(z > 0.0) || !z.is_finite() || !m.is_finite() {
                return Err(Error::LikelihoodUnderflow { index: i });
            }
            let ld = kernel.log_density(z);
            // candidates whose PH kernel drops below f64 range would make
            // the E-step integrals vanish; treat them as infeasible
            if ld < -690.0 {
                return Err(Error::LikelihoodUnderflow { index: i });
            }
            local += m.ln() + transform.intensity(y).ln() + ld;
        }
        *acc += local;
        Ok(())
    });
    match result {
        Ok(v) if v.is_finite() => v,
        _ => f64::NEG_INFINITY,
    }
}

/// Observed-data log-likelihood of the regression model; flags the first
/// underflowing observation.
pub fn regression_loglik(model: &RegressionModel, data: &Dataset) -> Result<f64> {
    regression_loglik_with(model, data, &EvalControl::default())
}

pub fn regression_loglik_with(
    model: &RegressionModel,
    data: &Dataset,
    control: &EvalControl,
) -> Result<f64> {
    if data.covariate_dim() != model.covariate_dim() {
        return Err(Error::Dimension(format!(
            "dataset has {} covariates, model expects {}",
            data.covariate_dim(),
            model.covariate_dim()
        )));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    emfit::chunked_map_reduce(&idx, control.threads, 0.0f64, |chunk, acc| {
        let mut kernel = LawKernel::new(&model.law, control.kernel_tol);
        for &i in chunk {
            let y = data.responses()[i];
            let m = model.multiplier(data.covariate_row(i))?;
            if !m.is_finite() {
                return Err(Error::TransformOverflow { index: i });
            }
            let z = model.transform.g_inverse(y) * m;
            let ld = kernel.log_density(z);
            if ld == f64::NEG_INFINITY {
                return Err(Error::LikelihoodUnderflow { index: i });
            }
            *acc += m.ln() + model.transform.intensity(y).ln() + ld;
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub structure: MarkovStructure,
    pub family: TransformFamily,
    pub link: Link,
    pub seed: u64,
    /// Stop when the relative log-likelihood improvement drops below this.
    pub stop_tol: f64,
    pub max_iter: usize,
    /// Evaluation budget of the inner `(th, b)` search per outer iteration.
    pub inner_max_evals: usize,
    /// Number of random starting laws. With more than one, every candidate
    /// runs for `restart_burn_in` iterations and the best likelihood is
    /// continued; the EM surface is multimodal and single starts can land
    /// in clearly inferior optima.
    pub init_restarts: usize,
    pub restart_burn_in: usize,
    pub control: EvalControl,
}

impl FitConfig {
    pub fn new(structure: MarkovStructure, family: TransformFamily) -> Self {
        Self {
            structure,
            family,
            link: Link::Exp,
            seed: 1,
            stop_tol: 1e-8,
            max_iter: 500,
            inner_max_evals: 200,
            init_restarts: 1,
            restart_burn_in: 40,
            control: EvalControl::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub iterations: usize,
    pub converged: bool,
    pub loglik: f64,
    /// Log-likelihood after each outer iteration, starting at the initial
    /// model; nondecreasing by construction up to evaluation rounding.
    pub loglik_trace: Vec<f64>,
    pub df: usize,
    pub aic: f64,
    pub bic: f64,
    pub n: usize,
    pub seed: u64,
    /// Outer iterations where the inner search could not improve and the
    /// previous `(th, b)` was kept (a valid generalized-EM step).
    pub inner_fallbacks: usize,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: RegressionModel,
    pub report: FitReport,
}

/// Moment-style starting value for the transform parameter.
fn initial_transform(family: TransformFamily, y: &[f64]) -> Result<InhomogeneityTransform> {
    let med = numeric::median(y);
    match family {
        TransformFamily::Identity => Ok(InhomogeneityTransform::Identity),
        TransformFamily::Pareto => InhomogeneityTransform::pareto(med),
        TransformFamily::Weibull => InhomogeneityTransform::weibull(1.0),
        TransformFamily::LogNormal => InhomogeneityTransform::log_normal(2.0),
        TransformFamily::Gompertz => {
            let max = y.iter().cloned().fold(0.0f64, f64::max);
            InhomogeneityTransform::gompertz((1.0 / med).min(3.0 / max))
        }
    }
}

/// Running state of one EM chain.
struct EmState {
    law: PhaseTypeLaw,
    transform: InhomogeneityTransform,
    beta: Vec<f64>,
    loglik: f64,
    trace: Vec<f64>,
    iterations: usize,
    inner_fallbacks: usize,
    converged: bool,
}

fn init_state(data: &Dataset, config: &FitConfig, law_seed: u64) -> Result<EmState> {
    let d = data.covariate_dim();
    let transform = initial_transform(config.family, data.responses())?;
    let beta = vec![0.0; d];
    // scale-match the random start to the transformed data
    let z0: Vec<f64> = data
        .responses()
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            transform.g_inverse(y) * config.link.value(phase::dot(data.covariate_row(i), &beta))
        })
        .collect();
    let scale = z0.iter().sum::<f64>() / z0.len() as f64;
    let law = build_structure(config.structure, law_seed, scale)?;
    let loglik = loglik_value(&law, &transform, &beta, config.link, data, &config.control);
    if loglik == f64::NEG_INFINITY {
        return Err(Error::NumericDomain(
            "initial model has non-finite likelihood; rescale the data or change the family".into(),
        ));
    }
    Ok(EmState {
        law,
        transform,
        beta,
        loglik,
        trace: vec![loglik],
        iterations: 0,
        inner_fallbacks: 0,
        converged: false,
    })
}

/// Runs outer iterations on one chain until convergence or the total
/// iteration count reaches `iteration_limit`.
fn advance(
    state: &mut EmState,
    data: &Dataset,
    config: &FitConfig,
    iteration_limit: usize,
) -> Result<()> {
    let d = data.covariate_dim();
    while !state.converged && state.iterations < iteration_limit {
        let model =
            RegressionModel::new(state.law.clone(), state.transform, state.beta.clone(), config.link)?;
        let z = transform_data(&model, data)?;
        let stats = emfit::e_step_with(&state.law, &z, None, &config.control)?;
        state.law = emfit::m_step(&stats, config.structure)?;

        let next = if state.transform.theta_dim() + d > 0 {
            let (new_transform, new_beta, value, moved) = inner_ascent(
                &state.law,
                &state.transform,
                &state.beta,
                config.link,
                data,
                config.inner_max_evals,
                &config.control,
            );
            if !moved {
                state.inner_fallbacks += 1;
            }
            state.transform = new_transform;
            state.beta = new_beta;
            value
        } else {
            loglik_value(&state.law, &state.transform, &state.beta, config.link, data, &config.control)
        };

        state.trace.push(next);
        state.iterations += 1;
        let improvement = (next - state.loglik) / (1.0 + state.loglik.abs());
        state.loglik = next;
        if improvement < config.stop_tol {
            state.converged = true;
        }
    }
    Ok(())
}

/// Generalized EM for the phase-type regression model.
///
/// Alternates (1) data transformation, (2) E-step, (3) M-step for
/// `(pi, T)`, (4) simplex ascent over `(th, b)` with the law fixed, and
/// (5) a relative-improvement stopping check. With `init_restarts > 1`
/// several random starting laws run for a burn-in and the best chain is
/// continued. On non-convergence the best model so far is returned with
/// `converged = false`.
pub fn fit(data: &Dataset, config: &FitConfig) -> Result<FitOutcome> {
    let restarts = config.init_restarts.max(1);
    let mut best: Option<EmState> = None;
    let mut first_error: Option<Error> = None;
    for r in 0..restarts {
        let law_seed = config.seed.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let chain = init_state(data, config, law_seed).and_then(|mut s| {
            let burn = if restarts == 1 { config.max_iter } else { config.restart_burn_in };
            advance(&mut s, data, config, burn.min(config.max_iter))?;
            Ok(s)
        });
        match chain {
            Ok(s) => {
                if best.as_ref().map_or(true, |b| s.loglik > b.loglik) {
                    best = Some(s);
                }
            }
            // a bad random start may degenerate; other starts still count
            Err(e) => first_error = first_error.or(Some(e)),
        }
    }
    let mut state = match best {
        Some(s) => s,
        None => return Err(first_error.expect("restarts >= 1")),
    };
    advance(&mut state, data, config, config.max_iter)?;

    let model = RegressionModel::new(state.law, state.transform, state.beta, config.link)?;
    let df = model.degrees_of_freedom();
    let (aic, bic) = crate::inference::aic_bic(state.loglik, df, data.len());
    Ok(FitOutcome {
        model,
        report: FitReport {
            iterations: state.iterations,
            converged: state.converged,
            loglik: state.loglik,
            loglik_trace: state.trace,
            df,
            aic,
            bic,
            n: data.len(),
            seed: config.seed,
            inner_fallbacks: state.inner_fallbacks,
        },
    })
}

/// Step 4 of the outer loop: derivative-free ascent over `(th, b)` with the
/// law fixed. Transform parameters are searched on an unconstrained scale
/// (`log eta`, `log(gamma - 1)`), so domain bounds never bind. Returns the
/// new pair, the attained log-likelihood, and whether it improved.
fn inner_ascent(
    law: &PhaseTypeLaw,
    transform: &InhomogeneityTransform,
    beta: &[f64],
    link: Link,
    data: &Dataset,
    max_evals: usize,
    control: &EvalControl,
) -> (InhomogeneityTransform, Vec<f64>, f64, bool) {
    let d = beta.len();
    let mut start: Vec<f64> = beta.to_vec();
    if let Some(u) = transform.to_unconstrained() {
        start.push(u);
    }
    let mut objective = |coords: &[f64]| -> f64 {
        let b = &coords[..d];
        let tr = if coords.len() > d {
            match transform.with_unconstrained(coords[d]) {
                Ok(t) => t,
                Err(_) => return f64::NEG_INFINITY,
            }
        } else {
            *transform
        };
        loglik_value(law, &tr, b, link, data, control)
    };
    let start_value = objective(&start);
    let (best, value) = numeric::nelder_mead_max(&mut objective, &start, max_evals);
    if value > start_value {
        let new_beta = best[..d].to_vec();
        let new_transform = if best.len() > d {
            transform.with_unconstrained(best[d]).expect("searched point was feasible")
        } else {
            *transform
        };
        (new_transform, new_beta, value, true)
    } else {
        (*transform, beta.to_vec(), start_value, false)
    }
}

/// Public wrapper for the inner maximization step: returns `(th, b)` with
/// `regression_loglik` no smaller than at the start.
pub fn inner_maximize(
    model: &RegressionModel,
    data: &Dataset,
    max_evals: usize,
) -> (InhomogeneityTransform, Vec<f64>) {
    let (t, b, _, _) = inner_ascent(
        &model.law,
        &model.transform,
        &model.beta,
        model.link,
        data,
        max_evals,
        &EvalControl::default(),
    );
    (t, b)
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// Conditional mean by integrating the conditional survival function.
///
/// The integral runs in PH time `v = g^{-1}(y)`, where the survival factor
/// decays exponentially; a per-family power substitution removes the
/// endpoint singularity of `g'`. Geometric panels are added until their
/// contribution is negligible at `quad_tol` relative accuracy.
pub fn conditional_mean(model: &RegressionModel, x: &[f64], quad_tol: f64) -> Result<f64> {
    let m = model.multiplier(x)?;
    if !m.is_finite() || !(m > 0.0) {
        return Err(Error::NumericDomain(format!("link multiplier is {m}")));
    }
    if model.transform.family() == TransformFamily::Pareto {
        let chi = phase::largest_real_eigenvalue_of(&model.law)?;
        let xi = -1.0 / (m * chi);
        if xi >= 1.0 {
            return Err(Error::InfiniteMean { tail_index: xi });
        }
    }
    let kappa = match model.transform {
        InhomogeneityTransform::MatrixWeibull { eta } if eta > 1.0 => eta,
        InhomogeneityTransform::MatrixLogNormal { gamma } => gamma,
        _ => 1.0,
    };
    let mut kernel = LawKernel::new(&model.law, crate::matexp::DEFAULT_TOL);
    let transform = model.transform;
    let mut integrand = |s: f64| -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let v = s.powf(kappa);
        let ls = kernel.log_survival(m * v);
        let scale = transform.g_derivative(v) * kappa * s.powf(kappa - 1.0);
        let val = ls.exp() * scale;
        if val.is_finite() {
            val
        } else {
            0.0
        }
    };

    let mut total = 0.0f64;
    let mut scale_est = 0.0f64;
    let (mut a, mut b) = (0.0f64, 1.0f64);
    let mut quiet_panels = 0;
    for _ in 0..64 {
        let rough = numeric::integrate(&mut integrand, a, b, f64::INFINITY).0.abs();
        scale_est = scale_est.max(rough).max(total.abs());
        let tol = (quad_tol * scale_est / 64.0).max(1e-305);
        let (v, _) = numeric::integrate(&mut integrand, a, b, tol);
        total += v;
        if v.abs() <= quad_tol * total.abs() / 4.0 {
            quiet_panels += 1;
            if quiet_panels >= 2 {
                break;
            }
        } else {
            quiet_panels = 0;
        }
        a = b;
        b *= 2.0;
    }
    Ok(total)
}

/// Outcome of the closed-form Matrix-Weibull mean; the flag records a
/// fallback to quadrature when the eigendecomposition route is unavailable
/// (non-triangular or defective `-T`).
#[derive(Clone, Copy, Debug)]
pub struct MeanEstimate {
    pub value: f64,
    pub via_quadrature_fallback: bool,
}

/// Closed-form conditional mean for the Matrix-Weibull family:
/// `Gamma(1 + 1/th) pi' (-T)^{-1/th} e / m(x'b)^{1/th}`, with the
/// fractional power computed by eigendecomposition of triangular `-T`.
pub fn weibull_mean(model: &RegressionModel, x: &[f64]) -> Result<MeanEstimate> {
    let eta = match model.transform {
        InhomogeneityTransform::MatrixWeibull { eta } => eta,
        ref other => {
            return Err(Error::UnsupportedTransform(format!(
                "closed-form mean applies to the weibull family, not '{}'",
                other.family().as_str()
            )))
        }
    };
    let m = model.multiplier(x)?;
    let s = 1.0 / eta;
    match fractional_inverse_power_times_ones(model.law.sub_intensity(), s) {
        Some(vec) => {
            let value = statrs::function::gamma::gamma(1.0 + s)
                * phase::dot(model.law.initial(), &vec)
                / m.powf(s);
            Ok(MeanEstimate { value, via_quadrature_fallback: false })
        }
        None => {
            let value = conditional_mean(model, x, 1e-9)?;
            Ok(MeanEstimate { value, via_quadrature_fallback: true })
        }
    }
}

/// `(-T)^{-s} e` via the eigendecomposition of an upper-triangular `-T`
/// with well-separated eigenvalues; `None` when that route does not apply.
fn fractional_inverse_power_times_ones(t: &SquareMatrix, s: f64) -> Option<Vec<f64>> {
    let p = t.dim();
    if !t.is_upper_triangular() {
        return None;
    }
    let diag: Vec<f64> = (0..p).map(|k| -t[(k, k)]).collect();
    for i in 0..p {
        for j in 0..i {
            if (diag[i] - diag[j]).abs() <= 1e-7 * diag[i].max(diag[j]) {
                return None; // repeated eigenvalue: possibly defective
            }
        }
    }
    // columns of V solve (A - d_k I) v = 0 with unit diagonal, A = -T
    let mut v = SquareMatrix::identity(p).ok()?;
    for k in 0..p {
        for i in (0..k).rev() {
            let mut acc = 0.0;
            for j in i + 1..=k {
                acc += -t[(i, j)] * v[(j, k)];
            }
            v[(i, k)] = -acc / (diag[i] - diag[k]);
        }
    }
    // solve V u = e by back-substitution, scale by d^{-s}, map back
    let mut u = vec![1.0; p];
    for i in (0..p).rev() {
        for j in i + 1..p {
            u[i] -= v[(i, j)] * u[j];
        }
    }
    for (ui, dk) in u.iter_mut().zip(&diag) {
        *ui *= dk.powf(-s);
    }
    let mut out = vec![0.0; p];
    for i in 0..p {
        for j in i..p {
            out[i] += v[(i, j)] * u[j];
        }
    }
    Some(out)
}

/// Conditional quantile by bracketing and bisection on `y`; relative
/// tolerance 1e-10. The conditional survival is continuous and strictly
/// decreasing, so the bracket always closes.
pub fn predict_quantile(model: &RegressionModel, x: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("quantile level must be in (0, 1), got {q}")));
    }
    let m = model.multiplier(x)?;
    let mut kernel = LawKernel::new(&model.law, crate::matexp::DEFAULT_TOL);
    let transform = model.transform;
    let mut survival = |y: f64| -> f64 { kernel.log_survival(m * transform.g_inverse(y)).exp() };
    let target = 1.0 - q;
    let mut hi = 1.0f64;
    let mut guard = 0;
    while survival(hi) > target {
        hi *= 2.0;
        guard += 1;
        if guard > 4000 {
            return Err(Error::NumericDomain("quantile bracket did not close".into()));
        }
    }
    let mut lo = 0.0f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if survival(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-10 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::StructureKind;

    fn structure(kind: StructureKind, p: usize) -> MarkovStructure {
        MarkovStructure::new(kind, p).unwrap()
    }

    fn scalar_model(alpha: f64, transform: InhomogeneityTransform, beta: Vec<f64>) -> RegressionModel {
        let s = structure(StructureKind::Exponential, 1);
        let law = PhaseTypeLaw::new(
            vec![1.0],
            SquareMatrix::from_rows(&[vec![-alpha]]).unwrap(),
            s,
        )
        .unwrap();
        RegressionModel::new(law, transform, beta, Link::Exp).unwrap()
    }

    fn toy_dataset(seed: u64, n: usize, truth: &RegressionModel) -> Dataset {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let d = truth.covariate_dim();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let y = truth.simulate(&refs, &mut rng).unwrap();
        let names = (0..d).map(|j| format!("X{}", j + 1)).collect();
        Dataset::new(y, rows, names).unwrap()
    }

    #[test]
    fn transform_data_special_cases() {
        // beta = 0, identity transform: z = y
        let model = scalar_model(1.0, InhomogeneityTransform::Identity, vec![0.0]);
        let data = Dataset::new(
            vec![0.5, 2.0],
            vec![vec![1.0], vec![-1.0]],
            vec!["X1".into()],
        )
        .unwrap();
        let z = transform_data(&model, &data).unwrap();
        assert_eq!(z, vec![0.5, 2.0]);

        // marginal case: z = g^{-1}(y)
        let model = scalar_model(1.0, InhomogeneityTransform::pareto(1.0).unwrap(), vec![]);
        let data = Dataset::marginal(vec![std::f64::consts::E - 1.0]).unwrap();
        let z = transform_data(&model, &data).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-12);

        // hand case: eta = 1, y = e - 1, x'b = ln 2 -> z = 2 ln(e) = 2
        let model = scalar_model(
            1.0,
            InhomogeneityTransform::pareto(1.0).unwrap(),
            vec![2.0f64.ln()],
        );
        let data = Dataset::new(
            vec![std::f64::consts::E - 1.0],
            vec![vec![1.0]],
            vec!["X1".into()],
        )
        .unwrap();
        let z = transform_data(&model, &data).unwrap();
        assert!((z[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn loglik_reduces_to_marginal_density() {
        let s = structure(StructureKind::Coxian, 2);
        let law = build_structure(s, 3, 1.0).unwrap();
        let transform = InhomogeneityTransform::weibull(1.3).unwrap();
        let model =
            RegressionModel::new(law.clone(), transform, vec![0.0], Link::Exp).unwrap();
        let data = Dataset::new(
            vec![0.4, 1.1, 2.7],
            vec![vec![0.3], vec![0.9], vec![0.1]],
            vec!["X1".into()],
        )
        .unwrap();
        let ll = regression_loglik(&model, &data).unwrap();
        let direct: f64 = data
            .responses()
            .iter()
            .map(|&y| phase::iph_density(&law, &transform, y).unwrap().ln())
            .sum();
        assert!((ll - direct).abs() < 1e-10);
    }

    #[test]
    fn exponential_glm_density_shape() {
        // p = 1, identity: f(y | x) = m e^{-m y}
        let model = scalar_model(1.0, InhomogeneityTransform::Identity, vec![0.7]);
        let data =
            Dataset::new(vec![1.4], vec![vec![0.5]], vec!["X1".into()]).unwrap();
        let ll = regression_loglik(&model, &data).unwrap();
        let m = (0.7f64 * 0.5).exp();
        assert!((ll - (m.ln() - m * 1.4)).abs() < 1e-10);
    }

    #[test]
    fn link_covariance_invariance() {
        let s = structure(StructureKind::Coxian, 2);
        let law = build_structure(s, 8, 1.0).unwrap();
        let transform = InhomogeneityTransform::pareto(2.0).unwrap();
        let data = toy_dataset(
            4,
            60,
            &RegressionModel::new(law.clone(), transform, vec![-0.6, 0.3], Link::Exp).unwrap(),
        );
        let c = 3.7;
        let scaled_rows: Vec<Vec<f64>> =
            (0..data.len()).map(|i| data.covariate_row(i).iter().map(|v| v * c).collect()).collect();
        let scaled = Dataset::new(
            data.responses().to_vec(),
            scaled_rows,
            data.covariate_names().to_vec(),
        )
        .unwrap();
        let beta = vec![-0.6, 0.3];
        let beta_scaled: Vec<f64> = beta.iter().map(|b| b / c).collect();
        let m1 = RegressionModel::new(law.clone(), transform, beta, Link::Exp).unwrap();
        let m2 = RegressionModel::new(law, transform, beta_scaled, Link::Exp).unwrap();
        let l1 = regression_loglik(&m1, &data).unwrap();
        let l2 = regression_loglik(&m2, &scaled).unwrap();
        assert!((l1 - l2).abs() < 1e-10 * (1.0 + l1.abs()));
    }

    #[test]
    fn fit_trace_is_monotone_and_converges_on_glm_case() {
        let truth = scalar_model(0.8, InhomogeneityTransform::Identity, vec![-1.0]);
        let data = toy_dataset(11, 400, &truth);
        let mut config = FitConfig::new(
            structure(StructureKind::Exponential, 1),
            TransformFamily::Identity,
        );
        config.seed = 2;
        config.stop_tol = 1e-10;
        config.max_iter = 400;
        let out = fit(&data, &config).unwrap();
        assert!(out.report.converged);
        for w in out.report.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * (1.0 + w[0].abs()));
        }
        // compare against a Newton fit of the exponential GLM: rate = e^{b0 + x b}
        let (b0, b1) = exponential_glm_newton(&data);
        let alpha = -out.model.law.sub_intensity()[(0, 0)];
        assert!(
            (out.model.beta[0] - b1).abs() < 1e-4,
            "beta {} vs {}",
            out.model.beta[0],
            b1
        );
        assert!((alpha.ln() - b0).abs() < 1e-4, "log alpha {} vs {}", alpha.ln(), b0);
    }

    /// Direct Newton iteration on the exponential GLM log-likelihood
    /// `sum ln r_i - r_i y_i`, `r_i = exp(b0 + x_i b1)`; strictly concave.
    fn exponential_glm_newton(data: &Dataset) -> (f64, f64) {
        let mut b = [0.0f64; 2];
        for _ in 0..100 {
            let mut grad = [0.0f64; 2];
            let mut hess = [[0.0f64; 2]; 2];
            for i in 0..data.len() {
                let x = data.covariate_row(i)[0];
                let y = data.responses()[i];
                let r = (b[0] + b[1] * x).exp();
                let g = 1.0 - r * y;
                grad[0] += g;
                grad[1] += g * x;
                let h = r * y;
                hess[0][0] -= h;
                hess[0][1] -= h * x;
                hess[1][0] -= h * x;
                hess[1][1] -= h * x * x;
            }
            let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
            let step0 = (hess[1][1] * grad[0] - hess[0][1] * grad[1]) / det;
            let step1 = (hess[0][0] * grad[1] - hess[1][0] * grad[0]) / det;
            b[0] -= step0;
            b[1] -= step1;
            if step0.abs() + step1.abs() < 1e-12 {
                break;
            }
        }
        (b[0], b[1])
    }

    #[test]
    fn inner_maximize_identity_family_optimizes_beta_alone() {
        let truth = scalar_model(1.0, InhomogeneityTransform::Identity, vec![0.9]);
        let data = toy_dataset(21, 200, &truth);
        let start = scalar_model(1.0, InhomogeneityTransform::Identity, vec![0.0]);
        let l0 = regression_loglik(&start, &data).unwrap();
        let (tr, beta) = inner_maximize(&start, &data, 200);
        assert_eq!(tr, InhomogeneityTransform::Identity);
        let moved = RegressionModel::new(start.law.clone(), tr, beta, Link::Exp).unwrap();
        assert!(regression_loglik(&moved, &data).unwrap() >= l0);
    }

    #[test]
    fn inner_maximize_ascends_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        for trial in 0..25 {
            let law = build_structure(structure(StructureKind::Coxian, 2), trial, 1.0).unwrap();
            let transform = InhomogeneityTransform::pareto(rng.gen_range(0.5..3.0)).unwrap();
            let truth = RegressionModel::new(
                law.clone(),
                transform,
                vec![rng.gen_range(-1.0..1.0)],
                Link::Exp,
            )
            .unwrap();
            let data = toy_dataset(1000 + trial, 50, &truth);
            let start = RegressionModel::new(
                law,
                InhomogeneityTransform::pareto(1.0).unwrap(),
                vec![0.0],
                Link::Exp,
            )
            .unwrap();
            let l0 = regression_loglik(&start, &data).unwrap();
            let (tr, beta) = inner_maximize(&start, &data, 150);
            let moved = RegressionModel::new(start.law.clone(), tr, beta, Link::Exp).unwrap();
            let l1 = regression_loglik(&moved, &data).unwrap();
            assert!(l1 >= l0 - 1e-12, "trial {trial}: {l0} -> {l1}");
        }
    }

    #[test]
    fn conditional_mean_exponential_case() {
        // p = 1, T = (-1), identity: mean = 1 / m(x'b)
        let model = scalar_model(1.0, InhomogeneityTransform::Identity, vec![0.8]);
        let x = [0.6];
        let mean = conditional_mean(&model, &x, 1e-10).unwrap();
        let expected = 1.0 / (0.8f64 * 0.6).exp();
        assert!((mean - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn conditional_mean_refuses_infinite_pareto() {
        // p = 1, alpha = 0.8 < 1: marginal Pareto mean diverges
        let model = scalar_model(0.8, InhomogeneityTransform::pareto(1.0).unwrap(), vec![]);
        match conditional_mean(&model, &[], 1e-8) {
            Err(Error::InfiniteMean { tail_index }) => assert!(tail_index >= 1.0),
            other => panic!("expected infinite-mean error, got {other:?}"),
        }
    }

    #[test]
    fn weibull_mean_closed_forms() {
        // p = 1, T = (-1), eta = 1, beta = 0: Gamma(2) = 1
        let model = scalar_model(1.0, InhomogeneityTransform::weibull(1.0).unwrap(), vec![]);
        let est = weibull_mean(&model, &[]).unwrap();
        assert!(!est.via_quadrature_fallback);
        assert!((est.value - 1.0).abs() < 1e-12);

        // scalar weibull mean Gamma(1 + 1/2) for eta = 2
        let model = scalar_model(1.0, InhomogeneityTransform::weibull(2.0).unwrap(), vec![]);
        let est = weibull_mean(&model, &[]).unwrap();
        assert!((est.value - statrs::function::gamma::gamma(1.5)).abs() < 1e-12);
    }

    #[test]
    fn weibull_mean_matches_quadrature_on_coxian() {
        let law = build_structure(structure(StructureKind::Coxian, 3), 14, 1.0).unwrap();
        let transform = InhomogeneityTransform::weibull(1.6).unwrap();
        let model =
            RegressionModel::new(law, transform, vec![-0.4], Link::Exp).unwrap();
        let x = [0.7];
        let closed = weibull_mean(&model, &x).unwrap();
        assert!(!closed.via_quadrature_fallback);
        let quad = conditional_mean(&model, &x, 1e-9).unwrap();
        assert!(
            (closed.value - quad).abs() < 1e-6 * quad.abs(),
            "closed {} vs quadrature {}",
            closed.value,
            quad
        );
    }

    #[test]
    fn erlang_weibull_mean_falls_back() {
        // repeated eigenvalues: defective -T, quadrature fallback
        let s = structure(StructureKind::Erlang, 3);
        let mut t = SquareMatrix::zeros(3).unwrap();
        for k in 0..3 {
            t[(k, k)] = -2.0;
            if k < 2 {
                t[(k, k + 1)] = 2.0;
            }
        }
        let law = PhaseTypeLaw::new(vec![1.0, 0.0, 0.0], t, s).unwrap();
        let model = RegressionModel::new(
            law,
            InhomogeneityTransform::weibull(1.5).unwrap(),
            vec![],
            Link::Exp,
        )
        .unwrap();
        let est = weibull_mean(&model, &[]).unwrap();
        assert!(est.via_quadrature_fallback);
        let quad = conditional_mean(&model, &[], 1e-9).unwrap();
        assert!((est.value - quad).abs() < 1e-8 * quad.abs());
    }

    #[test]
    fn quantile_exponential_closed_form() {
        let model = scalar_model(1.0, InhomogeneityTransform::Identity, vec![]);
        let q = 1.0 - (-1.0f64).exp();
        let y = predict_quantile(&model, &[], q).unwrap();
        assert!((y - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quantile_is_monotone_and_inverts_survival() {
        let law = build_structure(structure(StructureKind::GeneralizedCoxian, 3), 6, 2.0).unwrap();
        let model = RegressionModel::new(
            law,
            InhomogeneityTransform::pareto(1.2).unwrap(),
            vec![0.5],
            Link::Exp,
        )
        .unwrap();
        let x = [0.4];
        let mut prev = 0.0;
        for k in 1..10 {
            let q = k as f64 / 10.0;
            let y = predict_quantile(&model, &x, q).unwrap();
            assert!(y >= prev);
            prev = y;
            let s = model.conditional_survival(&x, y).unwrap();
            assert!((s - (1.0 - q)).abs() < 1e-9, "q={q}: S={s}");
        }
    }

    #[test]
    fn ph_reduction_at_convergence() {
        let truth = scalar_model(1.0, InhomogeneityTransform::pareto(1.5).unwrap(), vec![-0.8]);
        let data = toy_dataset(31, 500, &truth);
        let mut config =
            FitConfig::new(structure(StructureKind::Exponential, 1), TransformFamily::Pareto);
        config.stop_tol = 1e-11;
        config.max_iter = 3000;
        let out = fit(&data, &config).unwrap();
        assert!(out.report.converged);
        // refit the PH core on the transformed data starting at the estimate
        let z = transform_data(&out.model, &data).unwrap();
        let refit = emfit::fit_ph(
            &out.model.law,
            &z,
            None,
            &emfit::PhEmOptions { max_iter: 50, stop_tol: 0.0, ..Default::default() },
        )
        .unwrap();
        let gain = refit.loglik - refit.trace[0];
        assert!(gain < 1e-4, "PH refit gained {gain}");
    }

    #[test]
    fn marginal_pareto_recovery() {
        // d = 0 self-consistency at moderate sample size
        let truth = scalar_model(2.0, InhomogeneityTransform::pareto(3.0).unwrap(), vec![]);
        let data = toy_dataset(77, 10_000, &truth);
        let mut config =
            FitConfig::new(structure(StructureKind::Exponential, 1), TransformFamily::Pareto);
        config.stop_tol = 1e-10;
        config.max_iter = 4000;
        let out = fit(&data, &config).unwrap();
        let alpha = -out.model.law.sub_intensity()[(0, 0)];
        let eta = out.model.transform.theta()[0];
        assert!((alpha - 2.0).abs() < 0.2, "alpha {alpha}");
        assert!((eta - 3.0).abs() < 0.45, "eta {eta}");
    }

    #[test]
    fn fit_report_counts_degrees_of_freedom() {
        let truth = RegressionModel::new(
            build_structure(structure(StructureKind::Coxian, 3), 5, 2.0).unwrap(),
            InhomogeneityTransform::pareto(1.0).unwrap(),
            vec![-0.5],
            Link::Exp,
        )
        .unwrap();
        let data = toy_dataset(41, 150, &truth);
        let mut config =
            FitConfig::new(structure(StructureKind::Coxian, 3), TransformFamily::Pareto);
        config.max_iter = 12;
        let out = fit(&data, &config).unwrap();
        assert_eq!(out.report.df, 7);
        let expected_aic = -2.0 * out.report.loglik + 14.0;
        assert!((out.report.aic - expected_aic).abs() < 1e-9);
    }
}
