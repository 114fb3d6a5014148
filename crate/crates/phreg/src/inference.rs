//! Inference for the regression parameters `(b, th)`: analytic scores,
//! Fisher information (score outer product, or a numerical Hessian as the
//! fallback for near-singular cases), Wald standard errors and confidence
//! intervals, PIT residuals, and the model-comparison statistics.
//!
//! No inference is reported for `(pi, T)`: phase-type representations are
//! not identifiable, so their asymptotic theory is unreliable; the matrix
//! parameters are a vehicle for the distribution shape only.

use crate::emfit::EvalControl;
use crate::error::{Error, Result};
use crate::matexp::{self, SquareMatrix};
use crate::numeric;
use crate::phase::{self, LawKernel, TailEval, TAIL_CLAMP};
use crate::regression::{regression_loglik_with, Dataset, RegressionModel};
use serde::{Deserialize, Serialize};

/// How the information matrix was assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FisherSource {
    OuterProduct,
    NumericalHessian,
}

impl FisherSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            FisherSource::OuterProduct => "outer-product",
            FisherSource::NumericalHessian => "numerical-hessian",
        }
    }
}

const CONDITION_LIMIT: f64 = 1e12;

/// Wald-type inference summary for `(b, th)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferenceReport {
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub p_values: Vec<f64>,
    pub source: FisherSource,
    pub condition: f64,
    pub loglik: f64,
    pub df: usize,
    pub aic: f64,
    pub bic: f64,
}

/// Per-observation score rows `(G1(i, 1..d), G2(i))` stacked over the
/// sample; summing the rows gives the score vector.
fn score_rows(model: &RegressionModel, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let d = model.covariate_dim();
    let tdim = model.transform.theta_dim();
    let t = model.law.sub_intensity();
    let pi = model.law.initial();
    let exit = model.law.exit();
    let t_exit = t.matvec(exit);
    let tol = matexp::DEFAULT_TOL;
    let mut rows = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let x = data.covariate_row(i);
        let y = data.responses()[i];
        let eta = phase::dot(x, &model.beta);
        let m = model.link.value(eta);
        let mprime = model.link.derivative(eta);
        let h = model.transform.g_inverse(y);
        let z = m * h;
        let expm = matexp::matrix_exponential(t, z, tol)?;
        let front = expm.vecmat(pi);
        let den = phase::dot(&front, exit);
        if !(den > 0.0) || !den.is_finite() {
            return Err(Error::LikelihoodUnderflow { index: i });
        }
        let ratio = phase::dot(&front, &t_exit) / den;
        let mut row = Vec::with_capacity(d + tdim);
        for j in 0..d {
            row.push(x[j] * mprime * (1.0 / m + h * ratio));
        }
        if tdim == 1 {
            let lam = model.transform.intensity(y);
            let dlam = model.transform.intensity_dtheta(y);
            let dh = model.transform.g_inverse_dtheta(y);
            row.push(dlam / lam + m * dh * ratio);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Score of the log-likelihood in `(b, th)`, assembled from the per-term
/// matrix-exponential expressions.
pub fn score(model: &RegressionModel, data: &Dataset) -> Result<Vec<f64>> {
    let rows = score_rows(model, data)?;
    let dim = model.covariate_dim() + model.transform.theta_dim();
    let mut out = vec![0.0; dim];
    for row in rows {
        for (o, v) in out.iter_mut().zip(&row) {
            *o += v;
        }
    }
    Ok(out)
}

/// Fisher information in `(b, th)` from the requested source. Both forms
/// are symmetric; the outer product is positive semidefinite by
/// construction.
pub fn fisher_information(
    model: &RegressionModel,
    data: &Dataset,
    source: FisherSource,
) -> Result<SquareMatrix> {
    let dim = model.covariate_dim() + model.transform.theta_dim();
    if dim == 0 {
        return Err(Error::Domain("model has no regression or transform parameters".into()));
    }
    match source {
        FisherSource::OuterProduct => {
            let rows = score_rows(model, data)?;
            let mut info = SquareMatrix::zeros(dim)?;
            for row in rows {
                for j in 0..dim {
                    for k in j..dim {
                        info[(j, k)] += row[j] * row[k];
                    }
                }
            }
            for j in 0..dim {
                for k in 0..j {
                    info[(j, k)] = info[(k, j)];
                }
            }
            Ok(info)
        }
        FisherSource::NumericalHessian => {
            let params = pack_parameters(model);
            let control = EvalControl::default();
            let f = |p: &[f64]| -> Result<f64> {
                let rebuilt = unpack_parameters(model, p)?;
                regression_loglik_with(&rebuilt, data, &control)
            };
            let mut steps = vec![0.0; dim];
            for j in 0..dim {
                let mut h = 1e-5 * (1.0 + params[j].abs());
                // keep transform parameters inside their domain
                if j >= model.covariate_dim() {
                    let bound = domain_margin(model, params[j]);
                    h = h.min(0.45 * bound);
                }
                steps[j] = h;
            }
            let mut hess = SquareMatrix::zeros(dim)?;
            let base = f(&params)?;
            for j in 0..dim {
                for k in j..dim {
                    let v = if j == k {
                        let mut p1 = params.clone();
                        p1[j] += steps[j];
                        let mut p2 = params.clone();
                        p2[j] -= steps[j];
                        (f(&p1)? - 2.0 * base + f(&p2)?) / (steps[j] * steps[j])
                    } else {
                        let mut pp = params.clone();
                        pp[j] += steps[j];
                        pp[k] += steps[k];
                        let mut pm = params.clone();
                        pm[j] += steps[j];
                        pm[k] -= steps[k];
                        let mut mp = params.clone();
                        mp[j] -= steps[j];
                        mp[k] += steps[k];
                        let mut mm = params.clone();
                        mm[j] -= steps[j];
                        mm[k] -= steps[k];
                        (f(&pp)? - f(&pm)? - f(&mp)? + f(&mm)?) / (4.0 * steps[j] * steps[k])
                    };
                    hess[(j, k)] = -v;
                    hess[(k, j)] = -v;
                }
            }
            Ok(hess)
        }
    }
}

fn pack_parameters(model: &RegressionModel) -> Vec<f64> {
    let mut p = model.beta.clone();
    p.extend(model.transform.theta());
    p
}

fn unpack_parameters(model: &RegressionModel, params: &[f64]) -> Result<RegressionModel> {
    let d = model.covariate_dim();
    let beta = params[..d].to_vec();
    let transform = crate::phase::InhomogeneityTransform::from_family(
        model.transform.family(),
        &params[d..],
    )?;
    RegressionModel::new(model.law.clone(), transform, beta, model.link)
}

/// Distance from a transform parameter to its domain boundary.
fn domain_margin(model: &RegressionModel, value: f64) -> f64 {
    match model.transform.family() {
        crate::phase::TransformFamily::LogNormal => value - 1.0,
        _ => value,
    }
}

fn parameter_names(model: &RegressionModel, covariates: &[String]) -> Vec<String> {
    let mut names: Vec<String> = covariates.to_vec();
    if model.transform.theta_dim() == 1 {
        names.push(model.transform.family().theta_name().to_string());
    }
    names
}

/// Wald report with the default source preference: the score outer product
/// first, falling back to the numerical Hessian when near-singular.
pub fn wald_report(model: &RegressionModel, data: &Dataset) -> Result<InferenceReport> {
    match wald_report_with(model, data, FisherSource::OuterProduct) {
        Ok(r) => Ok(r),
        Err(Error::IllConditioned { .. }) => {
            wald_report_with(model, data, FisherSource::NumericalHessian)
        }
        Err(e) => Err(e),
    }
}

/// Wald report from one specific information source. Refuses to invert a
/// matrix with condition estimate above 1e12 and recommends the other
/// source instead.
pub fn wald_report_with(
    model: &RegressionModel,
    data: &Dataset,
    source: FisherSource,
) -> Result<InferenceReport> {
    let info = fisher_information(model, data, source)?;
    let inv = info.inverse().map_err(|_| Error::IllConditioned { condition: f64::INFINITY })?;
    let condition = info.norm_one() * inv.norm_one();
    if !condition.is_finite() || condition > CONDITION_LIMIT {
        return Err(Error::IllConditioned { condition });
    }
    let estimates = pack_parameters(model);
    let dim = estimates.len();
    let mut std_errors = Vec::with_capacity(dim);
    for j in 0..dim {
        let v = inv[(j, j)];
        if v < 0.0 {
            return Err(Error::IllConditioned { condition });
        }
        std_errors.push(v.sqrt());
    }
    let ci_lower: Vec<f64> =
        estimates.iter().zip(&std_errors).map(|(e, s)| e - 1.96 * s).collect();
    let ci_upper: Vec<f64> =
        estimates.iter().zip(&std_errors).map(|(e, s)| e + 1.96 * s).collect();
    let p_values: Vec<f64> = estimates
        .iter()
        .zip(&std_errors)
        .map(|(e, s)| {
            if *s > 0.0 {
                2.0 * (1.0 - numeric::normal_cdf((e / s).abs()))
            } else {
                f64::NAN
            }
        })
        .collect();
    let loglik = crate::regression::regression_loglik(model, data)?;
    let df = model.degrees_of_freedom();
    let (aic, bic) = aic_bic(loglik, df, data.len());
    let names = parameter_names(model, data.covariate_names());
    Ok(InferenceReport {
        names,
        estimates,
        std_errors,
        ci_lower,
        ci_upper,
        p_values,
        source,
        condition,
        loglik,
        df,
        aic,
        bic,
    })
}

/// PIT residuals: the conditional survival evaluated at each observation.
/// Under a correctly specified model they are iid uniform. Underflowing
/// values are clamped to `[1e-300, 1]` and their indices reported.
#[derive(Clone, Debug)]
pub struct PitResiduals {
    pub values: Vec<f64>,
    pub underflowed: Vec<usize>,
}

pub fn pit_residuals(model: &RegressionModel, data: &Dataset) -> Result<PitResiduals> {
    if data.covariate_dim() != model.covariate_dim() {
        return Err(Error::Dimension(format!(
            "dataset has {} covariates, model expects {}",
            data.covariate_dim(),
            model.covariate_dim()
        )));
    }
    let mut kernel = LawKernel::new(&model.law, matexp::DEFAULT_TOL);
    let mut values = Vec::with_capacity(data.len());
    let mut underflowed = Vec::new();
    for i in 0..data.len() {
        let m = model.multiplier(data.covariate_row(i))?;
        let z = m * model.transform.g_inverse(data.responses()[i]);
        let ls = kernel.log_survival(z);
        let TailEval { value, underflowed: flag } = if ls < TAIL_CLAMP.ln() {
            TailEval { value: TAIL_CLAMP, underflowed: true }
        } else {
            TailEval { value: ls.exp().min(1.0), underflowed: false }
        };
        if flag {
            underflowed.push(i);
        }
        values.push(value);
    }
    Ok(PitResiduals { values, underflowed })
}

/// Kolmogorov-Smirnov statistic of a sample in [0, 1] against the uniform
/// law: the sup distance between the empirical CDF and the identity.
pub fn ks_statistic(u: &[f64]) -> Result<f64> {
    if u.is_empty() {
        return Err(Error::Domain("KS statistic of an empty sample".into()));
    }
    if u.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
        return Err(Error::Domain("KS input must lie in [0, 1]".into()));
    }
    let mut sorted = u.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut sup = 0.0f64;
    for (i, v) in sorted.iter().enumerate() {
        sup = sup.max((v - i as f64 / n).abs()).max(((i + 1) as f64 / n - v).abs());
    }
    Ok(sup)
}

/// `AIC = -2 l + 2 df`, `BIC = -2 l + df ln N`.
pub fn aic_bic(loglik: f64, df: usize, n: usize) -> (f64, f64) {
    let k = df as f64;
    (-2.0 * loglik + 2.0 * k, -2.0 * loglik + k * (n as f64).ln())
}
