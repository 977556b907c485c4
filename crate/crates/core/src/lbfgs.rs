//! Limited-memory BFGS with a strong Wolfe line search.

use std::collections::VecDeque;

use log::debug;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_iterations: usize,
    /// Objective evaluations across all iterations, line searches included.
    pub max_evaluations: usize,
    /// Stop when `‖∇f‖_∞` falls to this.
    pub gradient_tolerance: f64,
    pub max_line_search: usize,
    /// Optional box `[−b, b]` applied to every trial point.
    pub bound: Option<f64>,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            max_iterations: usize::MAX,
            max_evaluations: 2000,
            gradient_tolerance: 1e-10,
            max_line_search: 20,
            bound: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LbfgsStatus {
    /// The caller's stopping test accepted the current point.
    Stopped,
    GradientSmall,
    MaxIter,
    LineSearchFail,
}

#[derive(Clone, Debug)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    /// Objective after each accepted iteration, starting with the initial point.
    pub history: Vec<f64>,
    pub status: LbfgsStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

struct Evaluator<'a, F> {
    f: &'a mut F,
    count: usize,
    budget: usize,
    bound: Option<f64>,
}

impl<F> Evaluator<'_, F>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    fn exhausted(&self) -> bool {
        self.count >= self.budget
    }

    /// Non-finite values and failed evaluations read as `+∞`.
    fn at(&mut self, x0: &[f64], p: &[f64], alpha: f64) -> Point {
        let mut x: Vec<f64> = x0.iter().zip(p).map(|(a, b)| a + alpha * b).collect();
        if let Some(b) = self.bound {
            x.iter_mut().for_each(|v| *v = v.clamp(-b, b));
        }
        self.count += 1;
        match (self.f)(&x) {
            Some((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Point { x, f, g },
            _ => Point {
                g: vec![0.0; x.len()],
                x,
                f: f64::INFINITY,
            },
        }
    }
}

/// Minimizer of the cubic through `(a, fa, da)` and `(b, fb, db)`, safeguarded to the interval.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let bisect = 0.5 * (a + b);
    if !disc.is_finite() || disc < 0.0 {
        return bisect;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t > lo + margin && t < hi - margin {
        t
    } else {
        bisect
    }
}

/// Strong Wolfe line search along `p`; `None` if no acceptable step was found.
fn line_search<F>(
    ev: &mut Evaluator<'_, F>,
    cur: &Point,
    p: &[f64],
    alpha0: f64,
    cfg: &LbfgsConfig,
) -> Option<Point>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let d0 = dot(&cur.g, p);
    if d0 >= 0.0 {
        return None;
    }
    let wolfe_armijo = |alpha: f64, f: f64| f <= cur.f + cfg.c1 * alpha * d0;
    let curvature = |d: f64| d.abs() <= -cfg.c2 * d0;

    let mut prev_alpha = 0.0;
    let mut prev_f = cur.f;
    let mut prev_d = d0;
    let mut alpha = alpha0;
    let mut trials = 0;
    let (mut lo, mut hi);
    loop {
        if trials >= cfg.max_line_search || ev.exhausted() {
            return None;
        }
        trials += 1;
        let pt = ev.at(&cur.x, p, alpha);
        let d = dot(&pt.g, p);
        if !wolfe_armijo(alpha, pt.f) || (trials > 1 && pt.f >= prev_f) {
            lo = (prev_alpha, prev_f, prev_d);
            hi = (alpha, pt.f, d);
            break;
        }
        if curvature(d) {
            return Some(pt);
        }
        if d >= 0.0 {
            lo = (alpha, pt.f, d);
            hi = (prev_alpha, prev_f, prev_d);
            break;
        }
        prev_alpha = alpha;
        prev_f = pt.f;
        prev_d = d;
        alpha *= 2.0;
    }
    // Zoom.
    loop {
        if trials >= cfg.max_line_search || ev.exhausted() {
            return None;
        }
        trials += 1;
        let a = if hi.1.is_finite() {
            cubic_min(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2)
        } else {
            0.5 * (lo.0 + hi.0)
        };
        let pt = ev.at(&cur.x, p, a);
        let d = dot(&pt.g, p);
        if !wolfe_armijo(a, pt.f) || pt.f >= lo.1 {
            hi = (a, pt.f, d);
        } else {
            if curvature(d) {
                return Some(pt);
            }
            if d * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, pt.f, d);
        }
        if (hi.0 - lo.0).abs() <= 1e-14 * lo.0.abs().max(1e-14) {
            // Interval collapsed; accept a point with sufficient decrease.
            return (lo.0 > 0.0 && lo.1 < cur.f).then(|| ev.at(&cur.x, p, lo.0));
        }
    }
}

/// Two-loop recursion for `−H ∇f`.
fn direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimizes `f`, where `f` returns `None` on a numerical failure.
/// `stop` is consulted at every accepted point, including the initial one.
pub fn minimize<F, S>(mut f: F, x0: Vec<f64>, cfg: &LbfgsConfig, mut stop: S) -> LbfgsOutcome
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    S: FnMut(f64, &[f64]) -> bool,
{
    let n = x0.len();
    let mut ev = Evaluator {
        f: &mut f,
        count: 0,
        budget: cfg.max_evaluations.max(1),
        bound: cfg.bound,
    };
    let mut cur = ev.at(&x0, &vec![0.0; n], 0.0);
    let mut history = vec![cur.f];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut iterations = 0;
    let mut reset = false;
    let finish = |cur: Point, iterations, evaluations, history, status| LbfgsOutcome {
        x: cur.x,
        value: cur.f,
        gradient: cur.g,
        iterations,
        evaluations,
        history,
        status,
    };
    if !cur.f.is_finite() {
        let evaluations = ev.count;
        return finish(cur, 0, evaluations, history, LbfgsStatus::LineSearchFail);
    }
    loop {
        if stop(cur.f, &cur.x) {
            let evaluations = ev.count;
            return finish(cur, iterations, evaluations, history, LbfgsStatus::Stopped);
        }
        if inf_norm(&cur.g) <= cfg.gradient_tolerance {
            let evaluations = ev.count;
            return finish(cur, iterations, evaluations, history, LbfgsStatus::GradientSmall);
        }
        if iterations >= cfg.max_iterations || ev.exhausted() {
            let evaluations = ev.count;
            return finish(cur, iterations, evaluations, history, LbfgsStatus::MaxIter);
        }
        let p = direction(&cur.g, &pairs);
        let alpha0 = if pairs.is_empty() {
            (1.0 / inf_norm(&cur.g)).min(1.0)
        } else {
            1.0
        };
        match line_search(&mut ev, &cur, &p, alpha0, cfg) {
            Some(next) => {
                let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                    if pairs.len() == cfg.memory {
                        pairs.pop_front();
                    }
                    pairs.push_back((s, y, 1.0 / sy));
                }
                cur = next;
                iterations += 1;
                reset = false;
                history.push(cur.f);
            }
            None if ev.exhausted() => {
                let evaluations = ev.count;
                return finish(cur, iterations, evaluations, history, LbfgsStatus::MaxIter);
            }
            None if !reset && !pairs.is_empty() => {
                debug!("line search failed at iteration {iterations}; clearing memory");
                pairs.clear();
                reset = true;
            }
            None => {
                let evaluations = ev.count;
                return finish(cur, iterations, evaluations, history, LbfgsStatus::LineSearchFail);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let mut f = 0.0;
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() - 1 {
            let a = x[i + 1] - x[i] * x[i];
            let b = 1.0 - x[i];
            f += 100.0 * a * a + b * b;
            g[i] += -400.0 * x[i] * a - 2.0 * b;
            g[i + 1] += 200.0 * a;
        }
        Some((f, g))
    }

    #[test]
    fn minimizes_rosenbrock() {
        let cfg = LbfgsConfig {
            gradient_tolerance: 1e-8,
            ..Default::default()
        };
        let out = minimize(rosenbrock, vec![-1.2, 1.0, -0.5, 0.8], &cfg, |_, _| false);
        assert_eq!(out.status, LbfgsStatus::GradientSmall);
        assert!(out.x.iter().all(|v| (v - 1.0).abs() < 1e-6), "{:?}", out.x);
        for w in out.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn quadratic_in_few_iterations() {
        let f = |x: &[f64]| {
            let d = [1.0, 10.0, 100.0];
            let v = x.iter().zip(d).map(|(a, b)| 0.5 * b * a * a).sum();
            Some((v, x.iter().zip(d).map(|(a, b)| b * a).collect()))
        };
        let out = minimize(f, vec![1.0, 1.0, 1.0], &LbfgsConfig::default(), |_, _| false);
        assert_eq!(out.status, LbfgsStatus::GradientSmall);
        assert!(out.iterations < 30);
    }

    #[test]
    fn budget_and_stop_rules() {
        let cfg = LbfgsConfig {
            max_iterations: 0,
            ..Default::default()
        };
        let out = minimize(rosenbrock, vec![0.0, 0.0], &cfg, |_, _| false);
        assert_eq!(out.status, LbfgsStatus::MaxIter);
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.x, vec![0.0, 0.0]);

        let out = minimize(rosenbrock, vec![0.0, 0.0], &LbfgsConfig::default(), |f, _| f < 0.5);
        assert_eq!(out.status, LbfgsStatus::Stopped);
        assert!(out.value < 0.5);

        let cfg = LbfgsConfig {
            max_evaluations: 5,
            ..Default::default()
        };
        let out = minimize(rosenbrock, vec![-1.2, 1.0], &cfg, |_, _| false);
        assert_eq!(out.status, LbfgsStatus::MaxIter);
        assert!(out.evaluations <= 5);
    }

    #[test]
    fn failures_do_not_panic() {
        let out = minimize(|_| None, vec![1.0], &LbfgsConfig::default(), |_, _| false);
        assert_eq!(out.status, LbfgsStatus::LineSearchFail);
        // A wall of NaNs beyond x = 0.5 forces backtracking.
        let f = |x: &[f64]| {
            if x[0] > 0.5 {
                Some((f64::NAN, vec![0.0]))
            } else {
                Some(((x[0] - 1.0).powi(2), vec![2.0 * (x[0] - 1.0)]))
            }
        };
        let out = minimize(f, vec![-3.0], &LbfgsConfig::default(), |_, _| false);
        assert!(out.x[0] <= 0.5 && out.value.is_finite());
    }

    #[test]
    fn box_bound_is_respected() {
        let f = |x: &[f64]| Some(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]));
        let cfg = LbfgsConfig {
            bound: Some(1.0),
            ..Default::default()
        };
        let out = minimize(f, vec![0.0], &cfg, |_, _| false);
        assert!(out.x[0] <= 1.0);
        assert!((out.x[0] - 1.0).abs() < 1e-9);
    }
}
