//! Unconstrained minimizers: BFGS with a strong-Wolfe line search, and a
//! Nelder-Mead simplex used when the line search breaks down.

/// Objective returning f(x) and, when asked, writing the gradient.
pub trait Objective {
    fn eval(&mut self, x: &[f64], grad: Option<&mut [f64]>) -> f64;
}

impl<F> Objective for F
where
    F: FnMut(&[f64], Option<&mut [f64]>) -> f64,
{
    fn eval(&mut self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        self(x, grad)
    }
}

#[derive(Clone, Debug)]
pub struct Options {
    pub max_iter: usize,
    /// Stop when the largest gradient component falls below this.
    pub gtol: f64,
    /// Stop when an iteration improves f by less than `ftol * (1 + |f|)`.
    pub ftol: f64,
    pub max_nelder_mead_evals: usize,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            max_iter: 1000,
            gtol: 1e-6,
            ftol: 1e-14,
            max_nelder_mead_evals: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// The simplex fallback was used after a line-search failure.
    pub used_fallback: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Counted<'a, O: Objective> {
    inner: &'a mut O,
    evals: usize,
}

impl<O: Objective> Counted<'_, O> {
    fn eval(&mut self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        self.evals += 1;
        self.inner.eval(x, grad)
    }
}

struct LinePoint {
    alpha: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

/// Strong-Wolfe line search (bracketing then zoom by safeguarded
/// quadratic interpolation).
fn line_search<O: Objective>(
    obj: &mut Counted<'_, O>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    dir: &[f64],
    alpha_init: f64,
) -> Option<LinePoint> {
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    const MAX_EVALS: usize = 40;
    let n = x.len();
    let probe = |alpha: f64, obj: &mut Counted<'_, O>| -> LinePoint {
        let xn: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + alpha * d).collect();
        let mut g = vec![0.0; n];
        let f = obj.eval(&xn, Some(&mut g));
        let slope = dot(&g, dir);
        LinePoint {
            alpha,
            f,
            slope,
            x: xn,
            g,
        }
    };

    let mut prev = LinePoint {
        alpha: 0.0,
        f: f0,
        slope: slope0,
        x: x.to_vec(),
        g: Vec::new(),
    };
    let mut alpha = alpha_init;
    let mut evals = 0;
    let (mut lo, mut hi);
    loop {
        let cur = probe(alpha, obj);
        evals += 1;
        if !cur.f.is_finite() {
            // step into an overflow region; shrink
            alpha = 0.5 * (prev.alpha + alpha);
            if evals >= MAX_EVALS {
                return None;
            }
            continue;
        }
        if cur.f > f0 + C1 * alpha * slope0 || (evals > 1 && cur.f >= prev.f) {
            lo = prev;
            hi = cur;
            break;
        }
        if cur.slope.abs() <= -C2 * slope0 {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        if evals >= MAX_EVALS {
            return None;
        }
        prev = cur;
        alpha *= 2.0;
    }

    while evals < MAX_EVALS {
        // quadratic interpolation from lo's value and slope and hi's value
        let da = hi.alpha - lo.alpha;
        let denom = 2.0 * (hi.f - lo.f - lo.slope * da);
        let mut trial = if denom.abs() > 0.0 {
            lo.alpha - lo.slope * da * da / denom
        } else {
            lo.alpha + 0.5 * da
        };
        let (a, b) = if lo.alpha < hi.alpha {
            (lo.alpha, hi.alpha)
        } else {
            (hi.alpha, lo.alpha)
        };
        let margin = 0.1 * (b - a);
        if !trial.is_finite() || trial < a + margin || trial > b - margin {
            trial = 0.5 * (a + b);
        }
        if (b - a).abs() < 1e-16 * a.abs().max(1.0) {
            return None;
        }
        let cur = probe(trial, obj);
        evals += 1;
        if !cur.f.is_finite() || cur.f > f0 + C1 * trial * slope0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.slope.abs() <= -C2 * slope0 {
                return Some(cur);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    // accept the best sufficient-decrease point if the curvature test never
    // passed; BFGS skips the update when s'y <= 0
    if lo.alpha > 0.0 && lo.f < f0 {
        if lo.g.is_empty() {
            return None;
        }
        return Some(lo);
    }
    None
}

/// BFGS on the inverse Hessian. On a line-search failure the Hessian
/// approximation is reset once; a second failure hands over to
/// Nelder-Mead from the current iterate.
pub fn minimize<O: Objective>(objective: &mut O, x0: &[f64], opts: &Options) -> Minimum {
    let n = x0.len();
    let mut obj = Counted {
        inner: objective,
        evals: 0,
    };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = obj.eval(&x, Some(&mut g));
    let mut h = identity(n);
    let mut fresh_h = true;
    let mut iterations = 0;

    if !f.is_finite() {
        return Minimum {
            x,
            f,
            iterations: 0,
            evaluations: obj.evals,
            converged: false,
            used_fallback: false,
        };
    }

    let mut converged = inf_norm(&g) < opts.gtol;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut dir: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            h = identity(n);
            fresh_h = true;
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let alpha0 = if fresh_h { (1.0 / inf_norm(&g).max(1e-300)).min(1.0) } else { 1.0 };
        let step = match line_search(&mut obj, &x, f, slope, &dir, alpha0) {
            Some(s) => s,
            None if !fresh_h => {
                h = identity(n);
                fresh_h = true;
                continue;
            }
            None => {
                let nm = nelder_mead(&mut obj, &x, f, opts.max_nelder_mead_evals);
                let improved = nm.1 < f;
                if improved {
                    x = nm.0;
                    f = nm.1;
                }
                return Minimum {
                    x,
                    f,
                    iterations,
                    evaluations: obj.evals,
                    converged: false,
                    used_fallback: true,
                };
            }
        };

        let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let f_old = f;
        x = step.x;
        g = step.g;
        f = step.f;
        let _ = step.alpha;

        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh_h {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n {
                    h[i * n + i] = scale;
                }
                fresh_h = false;
            }
            bfgs_update(&mut h, &s, &y, sy);
        }

        if inf_norm(&g) < opts.gtol {
            converged = true;
        } else if (f_old - f).abs() <= opts.ftol * (1.0 + f.abs()) && inf_norm(&s) < 1e-10 {
            converged = true;
        }
    }
    Minimum {
        x,
        f,
        iterations,
        evaluations: obj.evals,
        converged,
        used_fallback: false,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

/// H <- (I - rho s y') H (I - rho y s') + rho s s'
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    let coef = (1.0 + rho * yhy) * rho;
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

/// Adaptive Nelder-Mead (dimension-dependent coefficients). Returns the best
/// vertex and its value.
fn nelder_mead<O: Objective>(obj: &mut Counted<'_, O>, x0: &[f64], f0: f64, max_evals: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let nf = n as f64;
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf);
    let start = obj.evals;
    let eval = |x: &[f64], obj: &mut Counted<'_, O>| {
        let v = obj.eval(x, None);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += if x[i].abs() > 1e-3 { 0.05 * x[i].abs() } else { 0.05 };
        let v = eval(&x, obj);
        simplex.push((x, v));
    }
    while obj.evals - start < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[n].1 - simplex[0].1;
        if spread.abs() <= 1e-12 * (1.0 + simplex[0].1.abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / nf)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(alpha);
        let fr = eval(&xr, obj);
        if fr < simplex[0].1 {
            let xe = along(alpha * gamma);
            let fe = eval(&xe, obj);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = along(alpha * rho);
                let fc = eval(&xc, obj);
                (xc, fc)
            } else {
                let xc = along(-rho);
                let fc = eval(&xc, obj);
                (xc, fc)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    v.0 = best.iter().zip(&v.0).map(|(b, x)| b + sigma * (x - b)).collect();
                    v.1 = eval(&v.0, obj);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}
