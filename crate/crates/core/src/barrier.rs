//! Log-barrier interior-point solver for small max-min problems
//!
//! ```text
//! maximize    min_i φ_i(y)
//! subject to  y >= 0,  Σ_{j ∈ b} y_j <= 1  for every block b
//! ```
//!
//! with smooth concave `φ_i`. The epigraph form `max s, s <= φ_i(y)` is
//! centered with damped Newton steps on
//! `-t s - Σ ln(φ_i - s) - Σ ln y_j - Σ ln(1 - Σ_b y)` for an increasing `t`.
//! Problems here have at most a few dozen variables, so dense factorizations
//! are fine.

use nalgebra::{DMatrix, DVector};

/// A family of concave pieces over `dim()` variables.
pub trait ConcavePieces {
    fn dim(&self) -> usize;

    fn count(&self) -> usize;

    /// Piece values at `y`. Returns `false` if `y` is outside the domain of
    /// some piece.
    fn values(&self, y: &[f64], out: &mut [f64]) -> bool;

    /// Values and gradients at `y`; `grad` is row-major `count × dim`.
    fn gradients(&self, y: &[f64], values: &mut [f64], grad: &mut [f64]) -> bool;

    /// Adds `Σ_i weights[i] ∇²φ_i(y)` to the row-major `dim × dim` `out`.
    /// Called right after [`ConcavePieces::gradients`] at the same `y`.
    fn add_weighted_hessian(&self, y: &[f64], weights: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierSettings {
    /// Stop once the barrier duality-gap bound `m / t` falls below this.
    pub gap_tol: f64,
    /// Cap on the total number of Newton steps.
    pub max_newton_steps: usize,
    pub t_initial: f64,
    pub t_growth: f64,
}

impl Default for BarrierSettings {
    fn default() -> Self {
        Self {
            gap_tol: 1e-6,
            max_newton_steps: 600,
            t_initial: 1.0,
            t_growth: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierOutcome {
    pub y: Vec<f64>,
    /// `min_i φ_i(y)`.
    pub objective: f64,
    pub newton_steps: usize,
    /// Whether the gap target was met within the step budget.
    pub converged: bool,
}

fn barrier_value<P: ConcavePieces>(
    pieces: &P,
    blocks: &[Vec<usize>],
    t: f64,
    y: &[f64],
    s: f64,
    vals: &mut [f64],
) -> Option<f64> {
    if y.iter().any(|&v| v <= 0.0) {
        return None;
    }
    let mut f = -t * s;
    for b in blocks {
        let slack = 1.0 - b.iter().map(|&j| y[j]).sum::<f64>();
        if slack <= 0.0 {
            return None;
        }
        f -= slack.ln();
    }
    f -= y.iter().map(|v| v.ln()).sum::<f64>();
    if !pieces.values(y, vals) {
        return None;
    }
    for &v in vals.iter() {
        let u = v - s;
        if !(u > 0.0) {
            return None;
        }
        f -= u.ln();
    }
    f.is_finite().then_some(f)
}

fn solve_spd(mut h: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let n = h.nrows();
    let scale = (0..n)
        .map(|i| h[(i, i)].abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    let mut reg = 0.0;
    for _ in 0..8 {
        if let Some(ch) = h.clone().cholesky() {
            let x = ch.solve(rhs);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        reg = if reg == 0.0 {
            scale * 1e-14
        } else {
            reg * 100.0
        };
        for i in 0..n {
            h[(i, i)] += reg;
        }
    }
    h.lu().solve(rhs)
}

/// Maximizes `min_i φ_i(y)` from a strictly feasible `y0`.
pub fn maximize_min<P: ConcavePieces>(
    pieces: &P,
    blocks: &[Vec<usize>],
    y0: &[f64],
    settings: &BarrierSettings,
) -> Option<BarrierOutcome> {
    let n = pieces.dim();
    let c = pieces.count();
    assert_eq!(y0.len(), n);
    let dim = n + 1;
    let mut vals = vec![0.0; c];
    let mut grad = vec![0.0; c * n];
    let mut weights = vec![0.0; c];
    let mut hy = vec![0.0; n * n];
    let mut trial_vals = vec![0.0; c];
    let mut y_trial = vec![0.0; n];

    let mut y = y0.to_vec();
    if !pieces.values(&y, &mut vals) {
        return None;
    }
    let mut s = vals.iter().copied().fold(f64::INFINITY, f64::min);
    s -= 1.0f64.max(s.abs() * 1e-3);
    let constraints = (c + n + blocks.len()) as f64;

    let mut t = settings.t_initial;
    let mut steps = 0usize;
    let mut converged = false;

    'outer: loop {
        // Centering.
        for _ in 0..80 {
            if steps >= settings.max_newton_steps {
                break 'outer;
            }
            if !pieces.gradients(&y, &mut vals, &mut grad) {
                return None;
            }
            let mut g = DVector::zeros(dim);
            let mut h = DMatrix::zeros(dim, dim);
            g[n] = -t;
            hy.fill(0.0);
            for i in 0..c {
                let inv = 1.0 / (vals[i] - s);
                let inv2 = inv * inv;
                weights[i] = -inv;
                let gi = &grad[i * n..(i + 1) * n];
                for a in 0..n {
                    if gi[a] == 0.0 {
                        continue;
                    }
                    g[a] -= gi[a] * inv;
                    h[(a, n)] -= gi[a] * inv2;
                    let ca = gi[a] * inv2;
                    for b in 0..n {
                        hy[a * n + b] += ca * gi[b];
                    }
                }
                g[n] += inv;
                h[(n, n)] += inv2;
            }
            pieces.add_weighted_hessian(&y, &weights, &mut hy);
            for a in 0..n {
                for b in 0..n {
                    h[(a, b)] = hy[a * n + b];
                }
                h[(n, a)] = h[(a, n)];
                g[a] -= 1.0 / y[a];
                h[(a, a)] += 1.0 / (y[a] * y[a]);
            }
            for b in blocks {
                let slack = 1.0 - b.iter().map(|&j| y[j]).sum::<f64>();
                let inv = 1.0 / slack;
                for &a in b {
                    g[a] += inv;
                    for &bb in b {
                        h[(a, bb)] += inv * inv;
                    }
                }
            }
            let Some(dx) = solve_spd(h, &(-&g)) else {
                break 'outer;
            };
            steps += 1;
            let decrement = -g.dot(&dx);
            if !(decrement.is_finite()) {
                break 'outer;
            }
            if decrement / 2.0 <= 1e-10 {
                break;
            }
            let Some(f0) = barrier_value(pieces, blocks, t, &y, s, &mut trial_vals) else {
                return None;
            };
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha > 1e-14 {
                for a in 0..n {
                    y_trial[a] = y[a] + alpha * dx[a];
                }
                let s_trial = s + alpha * dx[n];
                if let Some(f1) =
                    barrier_value(pieces, blocks, t, &y_trial, s_trial, &mut trial_vals)
                {
                    if f1 <= f0 - 0.25 * alpha * decrement {
                        y.copy_from_slice(&y_trial);
                        s = s_trial;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if constraints / t < settings.gap_tol {
            converged = true;
            break;
        }
        t *= settings.t_growth;
    }

    if !pieces.values(&y, &mut vals) {
        return None;
    }
    let objective = vals.iter().copied().fold(f64::INFINITY, f64::min);
    Some(BarrierOutcome {
        y,
        objective,
        newton_steps: steps,
        converged,
    })
}
