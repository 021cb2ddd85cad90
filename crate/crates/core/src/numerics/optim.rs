//! One-dimensional minimizers and root finders, and Powell's
//! conjugate-direction method for derivative-free minimization.

use crate::error::{Error, Result};

const GOLD: f64 = 0.381_966_011_250_105_1;

/// Golden-section search for a minimum on `[a, b]`.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let mut c = a + GOLD * (b - a);
    let mut d = b - GOLD * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol * (1.0 + c.abs() + d.abs()) {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = a + GOLD * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = b - GOLD * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Brent's parabolic/golden minimizer on `[a, b]`.
pub fn brent_min<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64, max_iter: usize) -> (f64, f64) {
    let (mut a, mut b) = if a < b { (a, b) } else { (b, a) };
    let mut x = a + GOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1 * d.signum() };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Bisection for a sign change of `f` on `[a, b]`.
pub fn bisect<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64, max_iter: usize) -> Result<f64> {
    let mut fa = f(a);
    let fb = f(b);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::Domain(format!("no sign change on [{a}, {b}]")));
    }
    for _ in 0..max_iter {
        let m = 0.5 * (a + b);
        if (b - a).abs() < tol {
            return Ok(m);
        }
        let fm = f(m);
        if fm == 0.0 {
            return Ok(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Brent's root finder (inverse quadratic interpolation with bisection).
pub fn brent_root<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64, max_iter: usize) -> Result<f64> {
    let (mut a, mut b) = (a, b);
    let mut fa = f(a);
    let mut fb = f(b);
    if fa.signum() == fb.signum() && fa != 0.0 && fb != 0.0 {
        return Err(Error::Domain(format!("root not bracketed on [{a}, {b}]")));
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() && fb != 0.0 {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * tol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            if 2.0 * p < (3.0 * xm * q - (tol1 * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1 * xm.signum() };
        fb = f(b);
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowellConfig {
    pub max_iter: usize,
    /// Relative decrease of the objective below which an iteration counts as stalled.
    pub ftol: f64,
    /// Initial step length along each direction.
    pub step: f64,
    pub line_tol: f64,
}

impl Default for PowellConfig {
    fn default() -> Self {
        Self { max_iter: 200, ftol: 1e-12, step: 0.3, line_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowellResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

/// Minimizes along `x + t d`, bracketing outward from `t = 0` first.
fn line_minimize<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x: &[f64],
    d: &[f64],
    fx: f64,
    step: f64,
    tol: f64,
    evals: &mut usize,
) -> (f64, f64) {
    let mut g = |t: f64| {
        *evals += 1;
        let p: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
        let v = f(&p);
        if v.is_finite() {
            v
        } else {
            f64::MAX
        }
    };
    let (mut a, mut fa) = (0.0, fx);
    let (mut b, mut fb) = (step, g(step));
    if fb > fa {
        let (c, fc) = (-step, g(-step));
        if fc >= fa {
            // Minimum bracketed by [-step, step].
            let (t, ft) = brent_min(&mut g, -step, step, tol, 60);
            return if ft < fx { (t, ft) } else { (0.0, fx) };
        }
        b = c;
        fb = fc;
    }
    // Expand in the descending direction until the value rises.
    let dir = b.signum();
    let mut width = b.abs();
    for _ in 0..40 {
        let c = b + dir * width * 1.618;
        let fc = g(c);
        if fc >= fb {
            let (lo, hi) = if a < c { (a, c) } else { (c, a) };
            let (t, ft) = brent_min(&mut g, lo, hi, tol, 80);
            return if ft < fb { (t, ft) } else { (b, fb) };
        }
        a = b;
        fa = fb;
        b = c;
        fb = fc;
        width *= 1.618;
    }
    let _ = fa;
    (b, fb)
}

/// Powell's method with direction replacement.
pub fn powell<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], cfg: &PowellConfig) -> PowellResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut evals = 1;
    let mut fx = f(&x);
    let mut dirs: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let mut it = 0;
    while it < cfg.max_iter {
        it += 1;
        let f_start = fx;
        let x_start = x.clone();
        let mut biggest = 0.0;
        let mut big_idx = 0;
        for (i, d) in dirs.iter().enumerate() {
            let before = fx;
            let (t, ft) = line_minimize(&mut f, &x, d, fx, cfg.step, cfg.line_tol, &mut evals);
            if ft < fx {
                for k in 0..n {
                    x[k] += t * d[k];
                }
                fx = ft;
            }
            if before - fx > biggest {
                biggest = before - fx;
                big_idx = i;
            }
        }
        if 2.0 * (f_start - fx) <= cfg.ftol * (f_start.abs() + fx.abs()) + 1e-300 {
            break;
        }
        let new_dir: Vec<f64> = x.iter().zip(&x_start).map(|(a, b)| a - b).collect();
        let ext: Vec<f64> = x.iter().zip(&x_start).map(|(a, b)| 2.0 * a - b).collect();
        evals += 1;
        let fe = f(&ext);
        if fe < f_start {
            let t = 2.0 * (f_start - 2.0 * fx + fe) * (f_start - fx - biggest).powi(2)
                - biggest * (f_start - fe).powi(2);
            if t < 0.0 {
                let (s, fs) = line_minimize(&mut f, &x, &new_dir, fx, 1.0, cfg.line_tol, &mut evals);
                if fs < fx {
                    for k in 0..n {
                        x[k] += s * new_dir[k];
                    }
                    fx = fs;
                }
                dirs.remove(big_idx);
                dirs.push(new_dir);
            }
        }
    }
    PowellResult { x, fx, iterations: it, evaluations: evals }
}
