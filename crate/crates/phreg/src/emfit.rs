//! EM algorithm for PH(pi, T) on positive data.
//!
//! The complete-data likelihood of a phase-type path factors over four
//! sufficient statistics: starts per state `B_k`, sojourn times `Z_k`,
//! jump counts `N_ks`, and exits to absorption `N_k`. The E-step computes
//! their conditional expectations given the absorption times; every
//! integral `int_0^z e^{T(z-u)} t pi' e^{Tu} du` comes from the Van Loan
//! block exponential. The M-step is the closed-form exponential-family
//! maximizer, restricted to the declared sparsity structure (zeros stay
//! zero forever, so the search never leaves the structure class).

use crate::error::{Error, Result};
use crate::matexp::{self, SquareMatrix};
use crate::phase::{LawKernel, MarkovStructure, PhaseTypeLaw, StructureKind};

/// Evaluation controls shared by the E-step and likelihood evaluation.
#[derive(Clone, Copy, Debug)]
pub struct EvalControl {
    /// Entrywise tolerance for the matrix-exponential kernels.
    pub kernel_tol: f64,
    /// Worker count for the map-reduce over observations. Partial sums are
    /// accumulated per fixed-size chunk and reduced in chunk order, so the
    /// result is bit-identical for every worker count.
    pub threads: usize,
}

impl Default for EvalControl {
    fn default() -> Self {
        Self { kernel_tol: matexp::DEFAULT_TOL, threads: 1 }
    }
}

const CHUNK: usize = 64;

/// Conditional expectations of the path statistics, summed over the sample.
#[derive(Clone, Debug)]
pub struct SufficientStats {
    /// Expected starts per state; sums to the (weighted) sample size.
    pub starts: Vec<f64>,
    /// Expected total sojourn time per state.
    pub sojourn: Vec<f64>,
    /// Expected jump counts `k -> s`; the diagonal is unused.
    pub jumps: SquareMatrix,
    /// Expected exits to absorption per state; sums to the sample size.
    pub exits: Vec<f64>,
    /// Total weight `N`.
    pub total_weight: f64,
}

impl SufficientStats {
    fn zeros(p: usize) -> Self {
        Self {
            starts: vec![0.0; p],
            sojourn: vec![0.0; p],
            jumps: SquareMatrix::zeros(p).expect("p >= 1"),
            exits: vec![0.0; p],
            total_weight: 0.0,
        }
    }

    fn merge(&mut self, other: &Self) {
        for (a, b) in self.starts.iter_mut().zip(&other.starts) {
            *a += b;
        }
        for (a, b) in self.sojourn.iter_mut().zip(&other.sojourn) {
            *a += b;
        }
        for (a, b) in self.exits.iter_mut().zip(&other.exits) {
            *a += b;
        }
        let p = self.starts.len();
        for k in 0..p {
            for s in 0..p {
                self.jumps[(k, s)] += other.jumps[(k, s)];
            }
        }
        self.total_weight += other.total_weight;
    }
}

/// One aggregated observation: a unique value, its total weight, and the
/// first index at which it appeared (for error reporting).
struct Aggregated {
    value: f64,
    weight: f64,
    first_index: usize,
}

fn aggregate(z: &[f64], weights: Option<&[f64]>) -> Result<Vec<Aggregated>> {
    if z.is_empty() {
        return Err(Error::Data("empty sample".into()));
    }
    if let Some(w) = weights {
        if w.len() != z.len() {
            return Err(Error::Dimension("weights length does not match sample".into()));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data("weights must be finite and nonnegative".into()));
        }
    }
    for (i, v) in z.iter().enumerate() {
        if !(*v > 0.0) || !v.is_finite() {
            return Err(Error::Data(format!("observation {i} = {v} must be positive and finite")));
        }
    }
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
    let mut out: Vec<Aggregated> = Vec::new();
    for idx in order {
        let w = weights.map_or(1.0, |w| w[idx]);
        match out.last_mut() {
            Some(last) if last.value == z[idx] => last.weight += w,
            _ => out.push(Aggregated { value: z[idx], weight: w, first_index: idx }),
        }
    }
    Ok(out)
}

/// Runs `work` over fixed-size chunks of `items`, merging the per-chunk
/// results in chunk order. `threads <= 1` runs inline; larger counts use
/// scoped threads pulling chunk ids from a shared counter. Either way the
/// reduction order is identical.
pub(crate) fn chunked_map_reduce<T, S, F>(items: &[T], threads: usize, init: S, work: F) -> Result<S>
where
    T: Sync,
    S: Clone + Send + Sync,
    F: Fn(&[T], &mut S) -> Result<()> + Sync,
    S: MergeChunk,
{
    let chunks: Vec<&[T]> = items.chunks(CHUNK).collect();
    let mut partials: Vec<Option<S>> = vec![None; chunks.len()];
    if threads <= 1 || chunks.len() == 1 {
        for (slot, chunk) in partials.iter_mut().zip(&chunks) {
            let mut acc = init.clone();
            work(chunk, &mut acc)?;
            *slot = Some(acc);
        }
    } else {
        let counter = std::sync::atomic::AtomicUsize::new(0);
        let results = std::sync::Mutex::new(&mut partials);
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for _ in 0..threads.min(chunks.len()) {
                handles.push(scope.spawn(|| -> Result<()> {
                    loop {
                        let id = counter.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if id >= chunks.len() {
                            return Ok(());
                        }
                        let mut acc = init.clone();
                        work(chunks[id], &mut acc)?;
                        results.lock().expect("no poison")[id] = Some(acc);
                    }
                }));
            }
            for h in handles {
                h.join().expect("worker panicked")?;
            }
            Ok(())
        })?;
    }
    let mut acc = init;
    for p in partials {
        acc.merge_chunk(&p.expect("all chunks computed"));
    }
    Ok(acc)
}

pub(crate) trait MergeChunk {
    fn merge_chunk(&mut self, other: &Self);
}

impl MergeChunk for SufficientStats {
    fn merge_chunk(&mut self, other: &Self) {
        self.merge(other);
    }
}

impl MergeChunk for f64 {
    fn merge_chunk(&mut self, other: &Self) {
        *self += other;
    }
}

/// E-step: conditional expectations of `(B, Z, N_ks, N_k)` given the
/// absorption times `z`, summed with the optional observation weights.
/// Identical observations are aggregated first, so the cost is per unique
/// value.
pub fn e_step(
    law: &PhaseTypeLaw,
    z: &[f64],
    weights: Option<&[f64]>,
) -> Result<SufficientStats> {
    e_step_with(law, z, weights, &EvalControl::default())
}

pub fn e_step_with(
    law: &PhaseTypeLaw,
    z: &[f64],
    weights: Option<&[f64]>,
    control: &EvalControl,
) -> Result<SufficientStats> {
    let agg = aggregate(z, weights)?;
    let p = law.phases();
    let t = law.sub_intensity();
    let pi = law.initial();
    let exit = law.exit();
    let tol = control.kernel_tol;

    chunked_map_reduce(&agg, control.threads, SufficientStats::zeros(p), |chunk, acc| {
        for obs in chunk {
            let (expm, integral) = matexp::van_loan_integral(t, exit, pi, obs.value, tol)?;
            let exp_exit = expm.matvec(exit);
            let pi_exp = expm.vecmat(pi);
            let den = crate::phase::dot(pi, &exp_exit);
            if !(den > 0.0) || !den.is_finite() {
                return Err(Error::LikelihoodUnderflow { index: obs.first_index });
            }
            let w = obs.weight / den;
            for k in 0..p {
                acc.starts[k] += w * pi[k] * exp_exit[k];
                acc.sojourn[k] += w * integral[(k, k)];
                acc.exits[k] += w * exit[k] * pi_exp[k];
                for s in 0..p {
                    if s != k {
                        acc.jumps[(k, s)] += w * t[(k, s)] * integral[(s, k)];
                    }
                }
            }
            acc.total_weight += obs.weight;
        }
        Ok(())
    })
}

/// M-step: closed-form maximizer of the expected complete-data likelihood
/// within the structure class. `pi` is re-pinned to `e_1` for Erlang and
/// Coxian structures; the Erlang update maximizes under its equal-rate
/// constraint (`alpha = p N / sum_k Z_k`), keeping its single-parameter
/// count truthful.
pub fn m_step(stats: &SufficientStats, structure: MarkovStructure) -> Result<PhaseTypeLaw> {
    let p = structure.phases();
    if stats.starts.len() != p {
        return Err(Error::Dimension("statistics dimension does not match structure".into()));
    }
    let n = stats.total_weight;
    if !(n > 0.0) {
        return Err(Error::Data("statistics carry no weight".into()));
    }

    let mut pi = vec![0.0; p];
    match structure.kind() {
        StructureKind::Erlang | StructureKind::Coxian => pi[0] = 1.0,
        StructureKind::Exponential => pi[0] = 1.0,
        _ => {
            for k in 0..p {
                pi[k] = stats.starts[k] / n;
            }
        }
    }

    let mut t = SquareMatrix::zeros(p)?;
    if structure.kind() == StructureKind::Erlang {
        let total_sojourn: f64 = stats.sojourn.iter().sum();
        if !(total_sojourn > 0.0) {
            return Err(Error::DegenerateState { state: 0, sojourn: total_sojourn });
        }
        let alpha = p as f64 * n / total_sojourn;
        for k in 0..p {
            t[(k, k)] = -alpha;
            if k + 1 < p {
                t[(k, k + 1)] = alpha;
            }
        }
    } else {
        for k in 0..p {
            let zk = stats.sojourn[k];
            if !(zk > 0.0) {
                return Err(Error::DegenerateState { state: k, sojourn: zk });
            }
            let mut total = stats.exits[k] / zk;
            let exit_rate = total;
            for s in 0..p {
                if s != k && structure.allows_transition(k, s) {
                    let rate = stats.jumps[(k, s)] / zk;
                    t[(k, s)] = rate;
                    total += rate;
                }
            }
            if !(total > 0.0) {
                return Err(Error::DegenerateState { state: k, sojourn: zk });
            }
            t[(k, k)] = -total;
            let _ = exit_rate; // implicit in the row sum
        }
    }
    PhaseTypeLaw::new(pi, t, structure)
}

/// Observed-data log-likelihood `sum_i w_i ln(pi' e^{T z_i} t)`.
pub fn ph_loglik(law: &PhaseTypeLaw, z: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    ph_loglik_with(law, z, weights, &EvalControl::default())
}

pub fn ph_loglik_with(
    law: &PhaseTypeLaw,
    z: &[f64],
    weights: Option<&[f64]>,
    control: &EvalControl,
) -> Result<f64> {
    let agg = aggregate(z, weights)?;
    let kernel_proto = LawKernel::new(law, control.kernel_tol);
    let value = chunked_map_reduce(&agg, control.threads, 0.0f64, |chunk, acc| {
        let mut kernel = LawKernel::new(law, control.kernel_tol);
        for obs in chunk {
            let ld = kernel.log_density(obs.value);
            if ld == f64::NEG_INFINITY {
                return Err(Error::LikelihoodUnderflow { index: obs.first_index });
            }
            *acc += obs.weight * ld;
        }
        Ok(())
    })?;
    drop(kernel_proto);
    Ok(value)
}

/// Stopping rule and iteration cap for the EM loop.
#[derive(Clone, Copy, Debug)]
pub struct PhEmOptions {
    /// Stop once the relative log-likelihood improvement falls below this.
    pub stop_tol: f64,
    pub max_iter: usize,
    pub control: EvalControl,
}

impl Default for PhEmOptions {
    fn default() -> Self {
        Self { stop_tol: 1e-8, max_iter: 5000, control: EvalControl::default() }
    }
}

#[derive(Clone, Debug)]
pub struct PhEmFit {
    pub law: PhaseTypeLaw,
    pub loglik: f64,
    /// Log-likelihood after each iteration, starting with the initial value.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates (E-step, M-step) from `start` until the relative improvement
/// drops below `stop_tol` or `max_iter` is reached.
pub fn fit_ph(
    start: &PhaseTypeLaw,
    z: &[f64],
    weights: Option<&[f64]>,
    opts: &PhEmOptions,
) -> Result<PhEmFit> {
    let mut law = start.clone();
    let mut loglik = ph_loglik_with(&law, z, weights, &opts.control)?;
    let mut trace = vec![loglik];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        let stats = e_step_with(&law, z, weights, &opts.control)?;
        law = m_step(&stats, law.structure())?;
        let next = ph_loglik_with(&law, z, weights, &opts.control)?;
        trace.push(next);
        iterations += 1;
        let improvement = (next - loglik) / (1.0 + loglik.abs());
        loglik = next;
        if improvement < opts.stop_tol {
            converged = true;
            break;
        }
    }
    Ok(PhEmFit { law, loglik, trace, iterations, converged })
}
