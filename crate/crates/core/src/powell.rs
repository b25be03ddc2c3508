//! Derivative-free direction-set minimization: Powell's method with Brent
//! line searches, in the classic Numerical Recipes formulation (including
//! the direction-replacement heuristic that keeps the set well conditioned).
//!
//! The similarity objectives this optimizer runs on are cheap but noisy in
//! their far tails (overlap penalties), so the implementation never trusts
//! gradients and treats any non-finite objective value as a hard abort that
//! carries the best point seen so far.

use crate::{Error, Result};

const GOLD: f64 = 1.618_034;
const GLIMIT: f64 = 100.0;
const TINY: f64 = 1e-20;
const CGOLD: f64 = 0.381_966_0;
const ZEPS: f64 = 1e-12;
const BRENT_ITMAX: usize = 100;

/// Outcome of a Powell run.
#[derive(Clone, Debug)]
pub struct PowellResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub n_evaluations: usize,
    pub sweeps: usize,
    /// False when the sweep limit stopped the run before the tolerance did.
    pub converged: bool,
}

/// Tuning knobs; the defaults match the registration configuration.
#[derive(Clone, Copy, Debug)]
pub struct PowellParams {
    /// Relative decrease over a full sweep below which we stop.
    pub ftol: f64,
    pub max_sweeps: usize,
    /// Initial step used to bracket each line minimum, in parameter units.
    pub bracket_step: f64,
    /// Relative tolerance of each Brent line search.
    pub line_tol: f64,
}

impl Default for PowellParams {
    fn default() -> Self {
        Self {
            ftol: 1e-4,
            max_sweeps: 20,
            bracket_step: 2.0,
            line_tol: 1e-4,
        }
    }
}

struct Prober<'a> {
    f: &'a mut dyn FnMut(&[f64]) -> f64,
    n_evaluations: usize,
    best_x: Vec<f64>,
    best_f: f64,
}

impl<'a> Prober<'a> {
    fn eval(&mut self, x: &[f64]) -> Result<f64> {
        let v = (self.f)(x);
        self.n_evaluations += 1;
        if !v.is_finite() {
            return Err(Error::OptimizerAbort {
                best_point: self.best_x.clone(),
                best_value: self.best_f,
            });
        }
        if v < self.best_f {
            self.best_f = v;
            self.best_x = x.to_vec();
        }
        Ok(v)
    }
}

/// Brackets a minimum of `g` starting from abscissae `(a, b)`, returning
/// `(ax, bx, cx)` with `g(bx)` below both ends.
fn bracket(
    g: &mut dyn FnMut(&mut Prober, f64) -> Result<f64>,
    p: &mut Prober,
    mut ax: f64,
    mut bx: f64,
) -> Result<(f64, f64, f64, f64)> {
    let mut fa = g(p, ax)?;
    let mut fb = g(p, bx)?;
    if fb > fa {
        std::mem::swap(&mut ax, &mut bx);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut cx = bx + GOLD * (bx - ax);
    let mut fc = g(p, cx)?;
    while fb > fc {
        let r = (bx - ax) * (fb - fc);
        let q = (bx - cx) * (fb - fa);
        // Fortran SIGN semantics: zero counts as positive.
        let sign = if q >= r { 1.0 } else { -1.0 };
        let denom = 2.0 * (q - r).abs().max(TINY) * sign;
        let mut u = bx - ((bx - cx) * q - (bx - ax) * r) / denom;
        let ulim = bx + GLIMIT * (cx - bx);
        let mut fu;
        if (bx - u) * (u - cx) > 0.0 {
            fu = g(p, u)?;
            if fu < fc {
                return Ok((bx, u, cx, fu));
            } else if fu > fb {
                return Ok((ax, bx, u, fb));
            }
            u = cx + GOLD * (cx - bx);
            fu = g(p, u)?;
        } else if (cx - u) * (u - ulim) > 0.0 {
            fu = g(p, u)?;
            if fu < fc {
                bx = cx;
                cx = u;
                u = cx + GOLD * (cx - bx);
                fb = fc;
                fc = fu;
                fu = g(p, u)?;
            }
        } else if (u - ulim) * (ulim - cx) >= 0.0 {
            u = ulim;
            fu = g(p, u)?;
        } else {
            u = cx + GOLD * (cx - bx);
            fu = g(p, u)?;
        }
        ax = bx;
        bx = cx;
        cx = u;
        fa = fb;
        fb = fc;
        fc = fu;
    }
    Ok((ax, bx, cx, fb))
}

/// Brent's parabolic-interpolation line minimum inside a bracket.
fn brent(
    g: &mut dyn FnMut(&mut Prober, f64) -> Result<f64>,
    p: &mut Prober,
    ax: f64,
    bx: f64,
    cx: f64,
    fbx: f64,
    tol: f64,
) -> Result<(f64, f64)> {
    let (mut a, mut b) = (ax.min(cx), ax.max(cx));
    let (mut x, mut w, mut v) = (bx, bx, bx);
    let (mut fx, mut fw, mut fv) = (fbx, fbx, fbx);
    let mut d = 0.0f64;
    let mut e = 0.0f64;
    for _ in 0..BRENT_ITMAX {
        let xm = 0.5 * (a + b);
        let tol1 = tol * x.abs() + ZEPS;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            return Ok((x, fx));
        }
        let mut took_golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut pp = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                pp = -pp;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if pp.abs() < (0.5 * q * etemp).abs() && pp > q * (a - x) && pp < q * (b - x) {
                d = pp / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                took_golden = false;
            }
        }
        if took_golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + tol1.copysign(d)
        };
        let fu = g(p, u)?;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            w = x;
            x = u;
            fv = fw;
            fw = fx;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                w = u;
                fv = fw;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Ok((x, fx))
}

/// Minimizes along `point + t * dir`, updating `point` in place only when
/// the line minimum strictly improves on `f_current` (so a flat objective
/// never drifts), and returns the resulting objective value.
fn line_minimize(
    p: &mut Prober,
    point: &mut [f64],
    dir: &[f64],
    f_current: f64,
    step: f64,
    tol: f64,
) -> Result<f64> {
    let base = point.to_vec();
    let mut g = |p: &mut Prober, t: f64| -> Result<f64> {
        let probe: Vec<f64> = base.iter().zip(dir).map(|(b, d)| b + t * d).collect();
        p.eval(&probe)
    };
    let (ax, bx, cx, fbx) = bracket(&mut g, p, 0.0, step)?;
    let (tmin, fmin) = brent(&mut g, p, ax, bx, cx, fbx, tol)?;
    if fmin < f_current {
        for (pt, d) in point.iter_mut().zip(dir) {
            *pt += tmin * d;
        }
        Ok(fmin)
    } else {
        Ok(f_current)
    }
}

/// Powell direction-set minimization of `f` from `x0`.
pub fn powell_brent_minimize(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    params: &PowellParams,
) -> Result<PowellResult> {
    let n = x0.len();
    let mut prober = Prober {
        f,
        n_evaluations: 0,
        best_x: x0.to_vec(),
        best_f: f64::INFINITY,
    };
    let mut point = x0.to_vec();
    let mut fret = prober.eval(&point)?;
    let mut dirs: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < params.max_sweeps {
        sweeps += 1;
        let fp = fret;
        let pt = point.clone();
        let mut del = 0.0f64;
        let mut ibig = 0usize;
        for (i, dir) in dirs.iter().enumerate() {
            let fptt = fret;
            fret = line_minimize(
                &mut prober,
                &mut point,
                dir,
                fret,
                params.bracket_step,
                params.line_tol,
            )?;
            if fptt - fret > del {
                del = fptt - fret;
                ibig = i;
            }
        }
        if 2.0 * (fp - fret) <= params.ftol * (fp.abs() + fret.abs()) + 1e-25 {
            converged = true;
            break;
        }
        // Try the extrapolated point along the sweep's net displacement and
        // adopt that direction if it is profitable (Numerical Recipes test).
        let ptt: Vec<f64> = point.iter().zip(&pt).map(|(p2, p0)| 2.0 * p2 - p0).collect();
        let xit: Vec<f64> = point.iter().zip(&pt).map(|(p2, p0)| p2 - p0).collect();
        let fptt = prober.eval(&ptt)?;
        if fptt < fp {
            let t = 2.0 * (fp - 2.0 * fret + fptt) * (fp - fret - del).powi(2)
                - del * (fp - fptt).powi(2);
            if t < 0.0 {
                fret = line_minimize(
                    &mut prober,
                    &mut point,
                    &xit,
                    fret,
                    params.bracket_step,
                    params.line_tol,
                )?;
                dirs[ibig] = dirs[n - 1].clone();
                dirs[n - 1] = xit;
            }
        }
    }
    Ok(PowellResult {
        value: fret,
        x: point,
        n_evaluations: prober.n_evaluations,
        sweeps,
        converged,
    })
}
