//! Small numeric utilities: derivative-free maximization, adaptive
//! quadrature, and distribution helpers.

/// Standard normal CDF via the complementary error function.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Nelder-Mead simplex maximization with a hard evaluation budget.
///
/// The start point is part of the initial simplex and the best point ever
/// seen is returned, so the result never scores below the start: callers
/// rely on this ascent guarantee. Objectives may return `-inf` for
/// infeasible points; those simply rank worst.
pub(crate) fn nelder_mead_max<F>(
    objective: &mut F,
    start: &[f64],
    max_evals: usize,
) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = start.len();
    let f0 = objective(start);
    if dim == 0 || max_evals <= 1 {
        return (start.to_vec(), f0);
    }
    let mut evals = 1usize;
    let mut best = (start.to_vec(), f0);

    let mut eval = |x: &[f64], evals: &mut usize, best: &mut (Vec<f64>, f64)| -> f64 {
        let v = objective(x);
        *evals += 1;
        if v > best.1 {
            *best = (x.to_vec(), v);
        }
        v
    };

    // simplex of dim + 1 points around the start
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((start.to_vec(), f0));
    for j in 0..dim {
        let mut x = start.to_vec();
        x[j] += 0.1 * (1.0 + x[j].abs());
        let v = eval(&x, &mut evals, &mut best);
        simplex.push((x, v));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    while evals < max_evals {
        // descending by objective value (best first)
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let spread = simplex[0].1 - simplex[dim].1;
        if spread.abs() < 1e-12 * (1.0 + simplex[0].1.abs()) && simplex[0].1.is_finite() {
            break;
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|j| simplex[..dim].iter().map(|(x, _)| x[j]).sum::<f64>() / dim as f64)
            .collect();
        let worst = simplex[dim].clone();
        let reflect: Vec<f64> = (0..dim)
            .map(|j| centroid[j] + alpha * (centroid[j] - worst.0[j]))
            .collect();
        let fr = eval(&reflect, &mut evals, &mut best);
        if fr > simplex[0].1 {
            // try to expand
            let expand: Vec<f64> = (0..dim)
                .map(|j| centroid[j] + gamma * (reflect[j] - centroid[j]))
                .collect();
            let fe = eval(&expand, &mut evals, &mut best);
            simplex[dim] = if fe > fr { (expand, fe) } else { (reflect, fr) };
        } else if fr > simplex[dim - 1].1 {
            simplex[dim] = (reflect, fr);
        } else {
            let contract: Vec<f64> = (0..dim)
                .map(|j| centroid[j] + rho * (worst.0[j] - centroid[j]))
                .collect();
            let fc = eval(&contract, &mut evals, &mut best);
            if fc > worst.1 {
                simplex[dim] = (contract, fc);
            } else {
                // shrink toward the best vertex
                let anchor = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    for j in 0..dim {
                        vertex.0[j] = anchor[j] + sigma * (vertex.0[j] - anchor[j]);
                    }
                    vertex.1 = eval(&vertex.0, &mut evals, &mut best);
                    if evals >= max_evals {
                        break;
                    }
                }
            }
        }
    }
    best
}

// 7-point Gauss / 15-point Kronrod pair on [-1, 1].
const GK_NODES: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.0,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut kronrod = 0.0;
    let mut gauss = 0.0;
    for (i, (&x, &w)) in GK_NODES.iter().zip(GK_WEIGHTS.iter()).enumerate() {
        let (lo, hi) = (f(c - h * x), f(c + h * x));
        let pair = if x == 0.0 { f(c) } else { lo + hi };
        kronrod += w * pair;
        if i % 2 == 1 {
            gauss += GAUSS_WEIGHTS[i / 2] * pair;
        }
    }
    let value = kronrod * h;
    let err = ((kronrod - gauss) * h).abs();
    (value, err)
}

fn adaptive_gk<F: FnMut(f64) -> f64>(
    f: &mut F,
    a: f64,
    b: f64,
    tol: f64,
    depth: usize,
) -> (f64, f64) {
    let (value, err) = gk15(f, a, b);
    if err <= tol || depth >= 60 || !value.is_finite() {
        return (value, err);
    }
    let mid = 0.5 * (a + b);
    let (v1, e1) = adaptive_gk(f, a, mid, 0.5 * tol, depth + 1);
    let (v2, e2) = adaptive_gk(f, mid, b, 0.5 * tol, depth + 1);
    (v1 + v2, e1 + e2)
}

/// Adaptive Gauss-Kronrod integration on a finite interval to an absolute
/// tolerance. Returns the estimate and an error estimate.
pub(crate) fn integrate<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, tol: f64) -> (f64, f64) {
    if a == b {
        return (0.0, 0.0);
    }
    adaptive_gk(f, a, b, tol, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_matches_closed_forms() {
        let (v, _) = integrate(&mut |x: f64| x.exp(), 0.0, 1.0, 1e-12);
        assert!((v - (std::f64::consts::E - 1.0)).abs() < 1e-11);
        let (v, _) = integrate(&mut |x: f64| x.sqrt(), 0.0, 1.0, 1e-10);
        assert!((v - 2.0 / 3.0).abs() < 1e-8, "{v}");
    }

    #[test]
    fn nelder_mead_finds_quadratic_maximum() {
        let mut f = |x: &[f64]| -((x[0] - 1.5).powi(2) + 2.0 * (x[1] + 0.5).powi(2));
        let (x, v) = nelder_mead_max(&mut f, &[0.0, 0.0], 400);
        assert!(v > -1e-8);
        assert!((x[0] - 1.5).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn nelder_mead_never_returns_below_start() {
        // objective with a cliff next to the start
        let mut f = |x: &[f64]| {
            if x[0] > 0.05 {
                f64::NEG_INFINITY
            } else {
                -x[0] * x[0]
            }
        };
        let (_, v) = nelder_mead_max(&mut f, &[0.0], 60);
        assert!(v >= 0.0 - 1e-15);
    }

    #[test]
    fn normal_cdf_symmetry() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-9);
    }
}
