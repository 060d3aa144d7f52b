//! Small numeric integration helpers shared by the kernel, certificate and
//! Lyapunov modules: composite midpoint rules with doubling, analytic
//! power-law tail integrals, and midpoint grids over the window.

use crate::geometry::{Point, Window, MAX_DIM};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuadratureError {
    #[error("integrand produced a non-finite value at r = {0}")]
    NonFinite(f64),
    #[error("integral did not converge to relative tolerance {tol} (last change {change})")]
    NoConvergence { tol: f64, change: f64 },
    #[error("power-law tail integral needs beta > dim, got beta = {beta}, dim = {dim}")]
    DivergentTail { beta: f64, dim: usize },
    #[error("bad integration interval [{a}, {b}]")]
    BadInterval { a: f64, b: f64 },
}

/// Surface measure of the unit sphere in `dim` dimensions (2, 2pi, 4pi).
pub fn sphere_surface(dim: usize) -> f64 {
    match dim {
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI,
        _ => panic!("unsupported dimension {dim}"),
    }
}

/// Composite midpoint rule with `n` cells.
pub fn midpoint_fixed<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, n: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let h = (b - a) / n as f64;
    let mut sum = 0.0;
    for i in 0..n {
        sum += f(a + (i as f64 + 0.5) * h);
    }
    sum * h
}

/// Midpoint rule with interval doubling until the relative change drops
/// below `rel_tol` (with a small absolute floor so zero integrands converge).
pub fn adaptive_midpoint<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    rel_tol: f64,
) -> Result<f64, QuadratureError> {
    if b <= a {
        return Ok(0.0);
    }
    let mut n = 64usize;
    let mut prev = midpoint_fixed(f, a, b, n);
    if !prev.is_finite() {
        return Err(QuadratureError::NonFinite(a));
    }
    loop {
        n *= 2;
        let cur = midpoint_fixed(f, a, b, n);
        if !cur.is_finite() {
            return Err(QuadratureError::NonFinite(b));
        }
        let change = (cur - prev).abs();
        if change <= rel_tol * cur.abs() + 1e-300 {
            return Ok(cur);
        }
        if n >= 1 << 22 {
            return Err(QuadratureError::NoConvergence { tol: rel_tol, change });
        }
        prev = cur;
    }
}

/// Analytic `\int_{r0}^\infty (1+s)^{-beta} s^{dim-1} ds` (no sphere factor).
pub fn power_law_tail(r0: f64, beta: f64, dim: usize) -> Result<f64, QuadratureError> {
    if beta <= dim as f64 {
        return Err(QuadratureError::DivergentTail { beta, dim });
    }
    let u = 1.0 + r0;
    // expand s^{dim-1} in powers of (1+s)
    let val = match dim {
        1 => u.powf(1.0 - beta) / (beta - 1.0),
        2 => u.powf(2.0 - beta) / (beta - 2.0) - u.powf(1.0 - beta) / (beta - 1.0),
        3 => {
            u.powf(3.0 - beta) / (beta - 3.0) - 2.0 * u.powf(2.0 - beta) / (beta - 2.0)
                + u.powf(1.0 - beta) / (beta - 1.0)
        }
        _ => panic!("unsupported dimension {dim}"),
    };
    Ok(val)
}

/// Analytic `\int_a^b (1+s)^{-beta} s^{dim-1} ds` for finite `0 <= a <= b`
/// (no sphere factor). Any real `beta` is allowed on a finite interval.
pub fn power_law_between(a: f64, b: f64, beta: f64, dim: usize) -> Result<f64, QuadratureError> {
    if !(0.0 <= a && a <= b && b.is_finite()) {
        return Err(QuadratureError::BadInterval { a, b });
    }
    // antiderivative of (1+s)^{-gamma}
    let prim = |gamma: f64, s: f64| -> f64 {
        let u = 1.0 + s;
        if (gamma - 1.0).abs() < 1e-12 {
            u.ln()
        } else {
            u.powf(1.0 - gamma) / (1.0 - gamma)
        }
    };
    let seg = |gamma: f64| prim(gamma, b) - prim(gamma, a);
    let val = match dim {
        1 => seg(beta),
        2 => seg(beta - 1.0) - seg(beta),
        3 => seg(beta - 2.0) - 2.0 * seg(beta - 1.0) + seg(beta),
        _ => panic!("unsupported dimension {dim}"),
    };
    Ok(val)
}

/// Visit the midpoint nodes of a uniform `n^dim` grid over the window,
/// passing each node and its cell volume.
pub fn for_each_window_node<F: FnMut(&Point, f64)>(window: &Window, n: usize, mut f: F) {
    let dim = window.dim();
    let h = window.side() / n as f64;
    let weight = h.powi(dim as i32);
    let mut idx = [0usize; MAX_DIM];
    loop {
        let mut c = [0.0; MAX_DIM];
        for i in 0..dim {
            c[i] = (idx[i] as f64 + 0.5) * h;
        }
        f(&Point(c), weight);
        // odometer increment
        let mut axis = 0;
        loop {
            idx[axis] += 1;
            if idx[axis] < n {
                break;
            }
            idx[axis] = 0;
            axis += 1;
            if axis == dim {
                return;
            }
        }
    }
}
