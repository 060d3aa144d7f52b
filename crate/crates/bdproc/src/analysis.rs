//! Numeric certificates: closed-form crowding constants, the lattice series
//! bound behind the global birth-rate certificate, the dominating kernel c_g,
//! the Neumann fixpoint f = c_g + c_g * f, and the extinction audit.

use crate::quadrature::{power_law_tail, sphere_surface, QuadratureError};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("lattice tail does not shrink below the reporting threshold (last tail bound {0:.3e})")]
    TailTooSlow(f64),
    #[error("envelope mass {0} is not below 1; dominating-kernel construction refused")]
    EnvelopeMassTooLarge(f64),
    #[error("discrete kernel mass {0} is not below 1; fixpoint series diverges")]
    FixpointMassTooLarge(f64),
    #[error("fixpoint iteration cap reached with step {0:.3e}")]
    FixpointNoConvergence(f64),
    #[error("dominating kernel fails at r = {r}: c_g = {cg} < g = {g}")]
    DominationFailure { r: f64, cg: f64, g: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// sup over s >= 0 of (1 + p s) e^{-theta s}, in closed form.
///
/// The derivative vanishes at s* = (p - theta)/(p theta); for p <= theta the
/// supremum sits at s = 0.
fn crowding_sup_theta(p: f64, theta: f64) -> f64 {
    if p <= theta {
        1.0
    } else {
        (p / theta) * (theta / p - 1.0).exp()
    }
}

/// sup over s >= 0 of (1 + p s) e^{-s}: the per-parent crowding envelope.
pub fn crowding_sup(p: f64) -> f64 {
    crowding_sup_theta(p, 1.0)
}

/// sup over s >= 0 of (1 + p s) e^{-s/2}: the crowding factor left over when
/// half of the repulsion is spent on the lattice part of the global bound.
pub fn crowding_sup_half(p: f64) -> f64 {
    crowding_sup_theta(p, 0.5)
}

/// sup over s >= 0 of s (1 + p s) e^{-s}, the survival-yield constant of the
/// establishment bound. The maximizer solves p s^2 + (1 - 2p) s - 1 = 0.
pub fn survival_yield_sup(p: f64) -> f64 {
    let s = if p == 0.0 {
        1.0
    } else {
        (2.0 * p - 1.0 + (1.0 + 4.0 * p * p).sqrt()) / (2.0 * p)
    };
    s * (1.0 + p * s) * (-s).exp()
}

/// Certified upper bound on the lattice-indexed series behind the global
/// birth-rate bound, for a power-law envelope b_f(s) = amp (1+s)^{-beta}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatticeBound {
    /// e^{alpha} / (alpha e) times the series bound.
    pub value: f64,
    pub prefactor: f64,
    /// Certified upper bound on the full lattice series (partial + tail).
    pub series: f64,
    pub partial: f64,
    pub tail: f64,
    /// Number of completed shells (d >= 2) or one-sided terms (d = 1).
    pub terms: u64,
}

const LATTICE_TERM_CAP: u64 = 100_000;
const LATTICE_SHELL_CAP: [u64; 3] = [100_000, 4_096, 256];

/// Bound sup over (x, eta) of sum_y b_f(|x-y|) exp(-sum_{z != y} phi(z-y))
/// when phi >= alpha on the ball of radius rho, via the cube decomposition:
/// (e^alpha / (alpha e)) sum_{j in Z^d} b_f((q|j| - rho) v 0) with q = rho/sqrt(d).
///
/// The series is truncated when the certified tail falls below 1e-10 of the
/// partial sum, or at the term cap; the tail is added to the partial sum so
/// the result stays an upper bound either way.
pub fn lattice_envelope_bound(
    dim: usize,
    amp: f64,
    beta: f64,
    alpha: f64,
    rho: f64,
) -> Result<LatticeBound, AnalysisError> {
    if !(1..=3).contains(&dim) {
        return Err(AnalysisError::BadParameter(format!("dim {dim}")));
    }
    if !(amp >= 0.0) || !amp.is_finite() {
        return Err(AnalysisError::BadParameter(format!("amp {amp}")));
    }
    if !(beta > dim as f64) {
        return Err(AnalysisError::BadParameter(format!(
            "envelope exponent {beta} must exceed dim {dim}"
        )));
    }
    if !(alpha > 0.0) || !(rho > 0.0) {
        return Err(AnalysisError::BadParameter(format!(
            "floor (alpha, rho) = ({alpha}, {rho})"
        )));
    }
    let prefactor = alpha.exp() / (alpha * std::f64::consts::E);
    if amp == 0.0 {
        return Ok(LatticeBound { value: 0.0, prefactor, series: 0.0, partial: 0.0, tail: 0.0, terms: 0 });
    }
    let d = dim as f64;
    let q = rho / d.sqrt();
    let term = |dist: f64| amp * (1.0 + (q * dist - rho).max(0.0)).powf(-beta);

    let mut partial = term(0.0);
    let (tail, terms);

    if dim == 1 {
        let mut j: u64 = 1;
        loop {
            partial += 2.0 * term(j as f64);
            let u0 = q * (j as f64 + 0.5) - rho;
            let done = j >= LATTICE_TERM_CAP;
            if (j % 64 == 0 || done) && u0 > 0.0 {
                // midpoint integral test: the summand is convex and decreasing
                // in j on this range, so the remainder is at most the integral
                // from j + 1/2
                let t = 2.0 * amp * (1.0 + u0).powf(1.0 - beta) / (q * (beta - 1.0));
                if t <= 1e-10 * partial || done {
                    tail = t;
                    terms = j;
                    break;
                }
            } else if done {
                return Err(AnalysisError::TailTooSlow(f64::INFINITY));
            }
            j += 1;
        }
    } else {
        // per-shell exact sums; the tail bound counts |j|_inf = m points by
        // 2d 3^{d-1} m^{d-1} and integrates the decreasing majorant
        let cap = LATTICE_SHELL_CAP[dim - 1];
        let mono_from = ((d - 1.0) * (1.0 - rho).max(0.0)) / (q * (beta - d + 1.0));
        let mut m: u64 = 1;
        loop {
            let mut shell = 0.0;
            for_each_shell_point(dim, m as i64, |j| {
                let dist = ((j[0] * j[0] + j[1] * j[1] + j[2] * j[2]) as f64).sqrt();
                shell += term(dist);
            });
            partial += shell;
            let mf = m as f64;
            let done = m >= cap;
            if (m % 8 == 0 || done) && q * mf > rho && mf >= mono_from {
                let t = 2.0 * d * 3.0f64.powi(dim as i32 - 1) * amp * q.powf(-d)
                    * (1.0 + rho).powf(d - 1.0)
                    * (1.0 + q * mf - rho).powf(d - beta)
                    / (beta - d);
                if t <= 1e-10 * partial || done {
                    tail = t;
                    terms = m;
                    break;
                }
            } else if done {
                return Err(AnalysisError::TailTooSlow(f64::INFINITY));
            }
            m += 1;
        }
    }

    if tail > 1e-3 * partial {
        return Err(AnalysisError::TailTooSlow(tail));
    }
    let series = partial + tail;
    Ok(LatticeBound { value: prefactor * series, prefactor, series, partial, tail, terms })
}

/// Visit every lattice point with |j|_inf = m (all points for m = 0).
fn for_each_shell_point<F: FnMut([i64; 3])>(dim: usize, m: i64, mut f: F) {
    if m == 0 {
        f([0, 0, 0]);
        return;
    }
    match dim {
        1 => {
            f([m, 0, 0]);
            f([-m, 0, 0]);
        }
        2 => {
            for a in -m..=m {
                f([a, m, 0]);
                f([a, -m, 0]);
            }
            for b in -(m - 1)..=(m - 1) {
                f([m, b, 0]);
                f([-m, b, 0]);
            }
        }
        _ => {
            for a in -m..=m {
                for b in -m..=m {
                    f([a, b, m]);
                    f([a, b, -m]);
                }
            }
            for a in -m..=m {
                for c in -(m - 1)..=(m - 1) {
                    f([a, m, c]);
                    f([a, -m, c]);
                }
            }
            for b in -(m - 1)..=(m - 1) {
                for c in -(m - 1)..=(m - 1) {
                    f([m, b, c]);
                    f([-m, b, c]);
                }
            }
        }
    }
}

/// The dominating kernel c_g: the envelope b_g(s) = bg_amp (1+s)^{-bg_beta}
/// up to radius r, its plateau value on [r, r1], then the pure power tail
/// (1+s)^{-(d + 1.5 eps)}. Continuous, positive, decreasing, mass < 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CgKernel {
    pub dim: usize,
    pub eps: f64,
    pub bg_amp: f64,
    pub bg_beta: f64,
    /// The envelope constant with b_g <= c_env (1+s)^{-d-2 eps}.
    pub c_env: f64,
    pub r: f64,
    pub r1: f64,
    pub plateau: f64,
    pub tail_beta: f64,
    /// Analytic integral over R^d.
    pub mass: f64,
    /// Analytic mass of b_g alone.
    pub envelope_mass: f64,
}

impl CgKernel {
    pub fn eval(&self, s: f64) -> f64 {
        if s <= self.r {
            self.bg_amp * (1.0 + s).powf(-self.bg_beta)
        } else if s <= self.r1 {
            self.plateau
        } else {
            (1.0 + s).powf(-self.tail_beta)
        }
    }

    /// Smallest radius beyond which the remaining mass is below `frac`
    /// (absolute). Used to size the fixpoint domain.
    pub fn tail_radius(&self, frac: f64) -> f64 {
        let sigma = sphere_surface(self.dim);
        let tail = |x: f64| sigma * power_law_tail(x, self.tail_beta, self.dim).unwrap();
        let mut lo = self.r1;
        if tail(lo) <= frac {
            return lo;
        }
        let mut hi = lo.max(1.0);
        while tail(hi) > frac {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if tail(mid) > frac {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }
}

/// Construct c_g from the power envelope b_g(s) = bg_amp (1+s)^{-bg_beta}
/// with bg_beta >= d + 2 eps and bg_amp <= c_env.
///
/// The knot r satisfies both c_env <= (1+r)^{eps/2} and the analytic tail
/// rule sigma_d int_r^inf (1+s)^{-d-1.5 eps} s^{d-1} ds <= (1 - <b_g>)/2,
/// which forces <c_g> <= (1 + <b_g>)/2 < 1.
pub fn build_cg(
    dim: usize,
    eps: f64,
    bg_amp: f64,
    bg_beta: f64,
    c_env: f64,
) -> Result<CgKernel, AnalysisError> {
    if !(1..=3).contains(&dim) {
        return Err(AnalysisError::BadParameter(format!("dim {dim}")));
    }
    if !(eps > 0.0) {
        return Err(AnalysisError::BadParameter(format!("eps {eps}")));
    }
    if !(bg_amp > 0.0) || !bg_amp.is_finite() {
        return Err(AnalysisError::BadParameter(format!("bg_amp {bg_amp}")));
    }
    let d = dim as f64;
    if !(bg_beta >= d + 2.0 * eps - 1e-12) {
        return Err(AnalysisError::BadParameter(format!(
            "bg_beta {bg_beta} must be at least d + 2 eps = {}",
            d + 2.0 * eps
        )));
    }
    if !(c_env >= bg_amp) {
        return Err(AnalysisError::BadParameter(format!(
            "c_env {c_env} must dominate bg_amp {bg_amp}"
        )));
    }
    let sigma = sphere_surface(dim);
    let envelope_mass = sigma * bg_amp * power_law_tail(0.0, bg_beta, dim)?;
    if envelope_mass >= 1.0 {
        return Err(AnalysisError::EnvelopeMassTooLarge(envelope_mass));
    }

    let tail_beta = d + 1.5 * eps;
    let r_env = (c_env.powf(2.0 / eps) - 1.0).max(0.0);
    let target = 0.5 * (1.0 - envelope_mass);
    let tail_at = |x: f64| sigma * power_law_tail(x, tail_beta, dim).unwrap();
    let r_tail = {
        let mut lo = 0.0;
        let mut hi = 1.0;
        while tail_at(hi) > target {
            hi *= 2.0;
        }
        if tail_at(lo) <= target {
            0.0
        } else {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if tail_at(mid) > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            hi
        }
    };
    let r = r_env.max(r_tail);
    let plateau = bg_amp * (1.0 + r).powf(-bg_beta);
    let r1 = plateau.powf(-1.0 / tail_beta) - 1.0;
    // guaranteed by c_env <= (1+r)^{eps/2}; keep as a hard check
    if r1 < r - 1e-9 {
        return Err(AnalysisError::BadParameter(format!(
            "plateau knots out of order: r = {r}, r1 = {r1}"
        )));
    }
    let r1 = r1.max(r);

    let head = bg_amp * (power_law_tail(0.0, bg_beta, dim)? - power_law_tail(r, bg_beta, dim)?);
    let plate = plateau * (r1.powf(d) - r.powf(d)) / d;
    let tail = power_law_tail(r1, tail_beta, dim)?;
    let mass = sigma * (head + plate + tail);
    if mass >= 1.0 {
        return Err(AnalysisError::EnvelopeMassTooLarge(mass));
    }

    Ok(CgKernel {
        dim,
        eps,
        bg_amp,
        bg_beta,
        c_env,
        r,
        r1,
        plateau,
        tail_beta,
        mass,
        envelope_mass,
    })
}

/// Uniform grid for the fixpoint iteration.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FixpointGrid {
    pub dim: usize,
    pub spacing: f64,
    pub half_extent: f64,
}

impl FixpointGrid {
    /// Production rule: spacing = base_cutoff/256 (d=1) or /64 (d=2,3), domain
    /// extended until the c_g tail mass beyond it is below 1e-8.
    pub fn production(cg: &CgKernel, base_cutoff: f64) -> Result<Self, AnalysisError> {
        if !(base_cutoff > 0.0) {
            return Err(AnalysisError::BadParameter(format!("base cutoff {base_cutoff}")));
        }
        let spacing = match cg.dim {
            1 => base_cutoff / 256.0,
            _ => base_cutoff / 64.0,
        };
        let half_extent = cg.tail_radius(1e-8);
        Ok(FixpointGrid { dim: cg.dim, spacing, half_extent })
    }

    pub fn explicit(dim: usize, spacing: f64, half_extent: f64) -> Result<Self, AnalysisError> {
        if !(1..=3).contains(&dim) || !(spacing > 0.0) || !(half_extent > spacing) {
            return Err(AnalysisError::BadParameter(format!(
                "grid dim {dim} spacing {spacing} half extent {half_extent}"
            )));
        }
        Ok(FixpointGrid { dim, spacing, half_extent })
    }
}

/// Gridded solution of f = c_g + c_g * f with its certificates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fixpoint {
    pub dim: usize,
    pub spacing: f64,
    /// f sampled at radii k * spacing (d = 1, 2) or (k + 1/2) * spacing (d = 3).
    pub radial: Vec<f64>,
    /// Radius of the first radial sample.
    pub r0: f64,
    /// Discrete mass of f on the grid.
    pub mass: f64,
    /// Discrete mass of c_g on the same grid.
    pub cg_mass: f64,
    /// Sup-norm residual of f - c_g - c_g * f on the grid.
    pub residual: f64,
    pub iterations: usize,
    /// Relative error of mass against cg_mass/(1 - cg_mass).
    pub mass_balance_err: f64,
}

impl Fixpoint {
    /// Linear interpolation on the radial samples; clamps beyond the grid.
    pub fn eval(&self, radius: f64) -> f64 {
        let t = (radius - self.r0) / self.spacing;
        if t <= 0.0 {
            return self.radial[0];
        }
        let k = t.floor() as usize;
        if k + 1 >= self.radial.len() {
            return *self.radial.last().unwrap();
        }
        let w = t - k as f64;
        self.radial[k] * (1.0 - w) + self.radial[k + 1] * w
    }

    /// Copy with the radial table cut at `r_max` (for compact serialization).
    pub fn truncated(&self, r_max: f64) -> Fixpoint {
        let keep = (((r_max - self.r0) / self.spacing).ceil() as usize + 2).min(self.radial.len());
        Fixpoint { radial: self.radial[..keep].to_vec(), ..self.clone() }
    }
}

const FIXPOINT_STEP_TOL: f64 = 1e-8;
const FIXPOINT_ITER_CAP: usize = 20_000;

/// Solve f = c + c * f on the grid by fixpoint iteration from f_0 = c, where
/// c(x) = cg_eval(|x|). The discrete convolution is linear (zero padded, no
/// periodic wraparound) with the kernel sampled out to twice the domain, so
/// every retained output node sees the exact discrete sum.
pub fn convolution_fixpoint<F: Fn(f64) -> f64>(
    grid: FixpointGrid,
    cg_eval: F,
) -> Result<Fixpoint, AnalysisError> {
    match grid.dim {
        1 => fixpoint_line(grid, cg_eval),
        2 => fixpoint_plane(grid, cg_eval),
        _ => fixpoint_radial3(grid, cg_eval),
    }
}

fn fixpoint_core(
    c_domain: Vec<f64>,
    cell_mass: impl Fn(&[f64]) -> f64,
    conv: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<(Vec<f64>, f64, f64, f64, usize), AnalysisError> {
    let cg_mass = cell_mass(&c_domain);
    if cg_mass >= 1.0 {
        return Err(AnalysisError::FixpointMassTooLarge(cg_mass));
    }
    let mut f = c_domain.clone();
    let mut iterations = 0;
    loop {
        let cf = conv(&f);
        let mut step: f64 = 0.0;
        let mut next = vec![0.0; f.len()];
        for i in 0..f.len() {
            next[i] = c_domain[i] + cf[i];
            step = step.max((next[i] - f[i]).abs());
        }
        f = next;
        iterations += 1;
        if step <= FIXPOINT_STEP_TOL {
            break;
        }
        if iterations >= FIXPOINT_ITER_CAP {
            return Err(AnalysisError::FixpointNoConvergence(step));
        }
    }
    let cf = conv(&f);
    let mut residual: f64 = 0.0;
    for i in 0..f.len() {
        residual = residual.max((f[i] - c_domain[i] - cf[i]).abs());
    }
    let mass = cell_mass(&f);
    Ok((f, mass, cg_mass, residual, iterations))
}

/// Linear convolution of two real sequences via zero-padded FFT.
struct LineConv {
    kernel_spectrum: Vec<Complex<f64>>,
    fft_len: usize,
    kernel_offset: usize,
    scale: f64,
}

impl LineConv {
    /// kernel index i corresponds to position (i - kernel_offset) cells.
    fn new(kernel: &[f64], signal_len: usize, kernel_offset: usize, scale: f64) -> Self {
        let need = kernel.len() + signal_len - 1;
        let fft_len = need.next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(fft_len);
        let mut spec: Vec<Complex<f64>> =
            kernel.iter().map(|&v| Complex::new(v, 0.0)).collect();
        spec.resize(fft_len, Complex::new(0.0, 0.0));
        fft.process(&mut spec);
        LineConv { kernel_spectrum: spec, fft_len, kernel_offset, scale }
    }

    /// Returns the convolution at positions 0..signal_len (cells), i.e. the
    /// output is aligned with the input signal.
    fn apply(&self, signal: &[f64]) -> Vec<f64> {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(self.fft_len);
        let ifft = planner.plan_fft_inverse(self.fft_len);
        let mut buf: Vec<Complex<f64>> =
            signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
        buf.resize(self.fft_len, Complex::new(0.0, 0.0));
        fft.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel_spectrum) {
            *b *= *k;
        }
        ifft.process(&mut buf);
        let norm = self.scale / self.fft_len as f64;
        (0..signal.len())
            .map(|i| buf[i + self.kernel_offset].re * norm)
            .collect()
    }
}

fn fixpoint_line<F: Fn(f64) -> f64>(
    grid: FixpointGrid,
    cg_eval: F,
) -> Result<Fixpoint, AnalysisError> {
    let h = grid.spacing;
    let n = (grid.half_extent / h).ceil() as usize;
    let len = 2 * n + 1;
    let c_domain: Vec<f64> = (0..len).map(|i| cg_eval(h * (i as f64 - n as f64).abs())).collect();
    // kernel sampled out to twice the domain so every in-domain output node
    // sees the full discrete sum
    let c_long: Vec<f64> =
        (0..4 * n + 1).map(|i| cg_eval(h * (i as f64 - 2.0 * n as f64).abs())).collect();
    let conv = LineConv::new(&c_long, len, 2 * n, h);

    let (f, mass, cg_mass, residual, iterations) =
        fixpoint_core(c_domain, |v| h * v.iter().sum::<f64>(), |v| conv.apply(v))?;

    // extract the radial profile; the solution is symmetric by construction
    // up to FFT roundoff, so average the two sides
    let radial: Vec<f64> = (0..=n).map(|k| 0.5 * (f[n + k] + f[n - k])).collect();
    let predicted = cg_mass / (1.0 - cg_mass);
    Ok(Fixpoint {
        dim: 1,
        spacing: h,
        radial,
        r0: 0.0,
        mass,
        cg_mass,
        residual,
        iterations,
        mass_balance_err: (mass - predicted).abs() / predicted,
    })
}

/// Square-grid linear convolution via row-column FFTs.
struct PlaneConv {
    kernel_spectrum: Vec<Complex<f64>>,
    fft_len: usize,
    signal_n: usize,
    kernel_offset: usize,
    scale: f64,
}

impl PlaneConv {
    fn fft2(buf: &mut [Complex<f64>], p: usize, inverse: bool) {
        let mut planner = FftPlanner::new();
        let fft = if inverse { planner.plan_fft_inverse(p) } else { planner.plan_fft_forward(p) };
        for row in buf.chunks_mut(p) {
            fft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); p];
        for j in 0..p {
            for i in 0..p {
                col[i] = buf[i * p + j];
            }
            fft.process(&mut col);
            for i in 0..p {
                buf[i * p + j] = col[i];
            }
        }
    }

    fn new(kernel: &[f64], kernel_n: usize, signal_n: usize, kernel_offset: usize, scale: f64) -> Self {
        let need = kernel_n + signal_n - 1;
        let fft_len = need.next_power_of_two();
        let mut spec = vec![Complex::new(0.0, 0.0); fft_len * fft_len];
        for i in 0..kernel_n {
            for j in 0..kernel_n {
                spec[i * fft_len + j] = Complex::new(kernel[i * kernel_n + j], 0.0);
            }
        }
        Self::fft2(&mut spec, fft_len, false);
        PlaneConv { kernel_spectrum: spec, fft_len, signal_n, kernel_offset, scale }
    }

    fn apply(&self, signal: &[f64]) -> Vec<f64> {
        let p = self.fft_len;
        let n = self.signal_n;
        let mut buf = vec![Complex::new(0.0, 0.0); p * p];
        for i in 0..n {
            for j in 0..n {
                buf[i * p + j] = Complex::new(signal[i * n + j], 0.0);
            }
        }
        Self::fft2(&mut buf, p, false);
        for (b, k) in buf.iter_mut().zip(&self.kernel_spectrum) {
            *b *= *k;
        }
        Self::fft2(&mut buf, p, true);
        let norm = self.scale / (p * p) as f64;
        let off = self.kernel_offset;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = buf[(i + off) * p + (j + off)].re * norm;
            }
        }
        out
    }
}

fn fixpoint_plane<F: Fn(f64) -> f64>(
    grid: FixpointGrid,
    cg_eval: F,
) -> Result<Fixpoint, AnalysisError> {
    let h = grid.spacing;
    let n = (grid.half_extent / h).ceil() as usize;
    let side = 2 * n + 1;
    let radius = |i: usize, j: usize, half: f64| {
        let x = h * (i as f64 - half);
        let y = h * (j as f64 - half);
        (x * x + y * y).sqrt()
    };
    let mut c_domain = vec![0.0; side * side];
    for i in 0..side {
        for j in 0..side {
            c_domain[i * side + j] = cg_eval(radius(i, j, n as f64));
        }
    }
    let long_side = 4 * n + 1;
    let mut c_long = vec![0.0; long_side * long_side];
    for i in 0..long_side {
        for j in 0..long_side {
            c_long[i * long_side + j] = cg_eval(radius(i, j, 2.0 * n as f64));
        }
    }
    let conv = PlaneConv::new(&c_long, long_side, side, 2 * n, h * h);

    let (f, mass, cg_mass, residual, iterations) =
        fixpoint_core(c_domain, |v| h * h * v.iter().sum::<f64>(), |v| conv.apply(v))?;

    let radial: Vec<f64> = (0..=n).map(|k| f[n * side + n + k]).collect();
    let predicted = cg_mass / (1.0 - cg_mass);
    Ok(Fixpoint {
        dim: 2,
        spacing: h,
        radial,
        r0: 0.0,
        mass,
        cg_mass,
        residual,
        iterations,
        mass_balance_err: (mass - predicted).abs() / predicted,
    })
}

/// d = 3: radial reduction. For radial functions on R^3,
/// (c * f)(r) = (2 pi / r) int s f(s) [ W(r+s) - W(|r-s|) ] ds with
/// W(t) = int_0^t u c(u) du; nodes sit at half cells so r = 0 never occurs.
fn fixpoint_radial3<F: Fn(f64) -> f64>(
    grid: FixpointGrid,
    cg_eval: F,
) -> Result<Fixpoint, AnalysisError> {
    let h = grid.spacing;
    let n = (grid.half_extent / h).ceil() as usize;
    let r_at = |k: usize| (k as f64 + 0.5) * h;

    // cumulative table for W on a refined grid
    let fine: usize = 8;
    let hw = h / fine as f64;
    let w_len = 2 * n * fine + 2 * fine + 1;
    let mut w_table = vec![0.0; w_len];
    for i in 1..w_len {
        let mid = (i as f64 - 0.5) * hw;
        w_table[i] = w_table[i - 1] + mid * cg_eval(mid) * hw;
    }
    let w_of = |t: f64| -> f64 {
        let x = t / hw;
        let k = (x.floor() as usize).min(w_len - 2);
        let frac = x - k as f64;
        w_table[k] * (1.0 - frac) + w_table[k + 1] * frac
    };

    let mut matrix = vec![0.0; n * n];
    for k in 0..n {
        let r = r_at(k);
        for j in 0..n {
            let s = r_at(j);
            matrix[k * n + j] =
                2.0 * std::f64::consts::PI * s * h * (w_of(r + s) - w_of((r - s).abs())) / r;
        }
    }
    let shell = |k: usize| {
        let lo = k as f64 * h;
        let hi = lo + h;
        4.0 * std::f64::consts::PI / 3.0 * (hi.powi(3) - lo.powi(3))
    };
    let c_domain: Vec<f64> = (0..n).map(|k| cg_eval(r_at(k))).collect();
    let cell_mass = |v: &[f64]| v.iter().enumerate().map(|(k, &x)| x * shell(k)).sum::<f64>();
    let conv = |v: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|k| (0..n).map(|j| matrix[k * n + j] * v[j]).sum::<f64>())
            .collect()
    };

    let (f, mass, cg_mass, residual, iterations) = fixpoint_core(c_domain, cell_mass, conv)?;
    let predicted = cg_mass / (1.0 - cg_mass);
    Ok(Fixpoint {
        dim: 3,
        spacing: h,
        radial: f,
        r0: 0.5 * h,
        mass,
        cg_mass,
        residual,
        iterations,
        mass_balance_err: (mass - predicted).abs() / predicted,
    })
}

/// Subcriticality certificate for the per-parent offspring kernel: the
/// envelope g, its mass verdict, and when the construction goes through, the
/// dominating kernel c_g and the fixpoint f.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubcriticalReport {
    pub model: String,
    /// Mass of the offspring envelope g (r_p-scaled dispersal for
    /// fecundity/establishment, the offspring kernel itself for contact).
    pub g_mass: f64,
    pub subcritical: bool,
    pub bg_amp: f64,
    pub bg_beta: f64,
    pub cg: Option<CgKernel>,
    pub fixpoint: Option<Fixpoint>,
    /// Construction steps that were refused, with reasons. An empty list
    /// means the full certificate chain was produced.
    pub refusals: Vec<String>,
}

/// Run the subcriticality chain for a per-parent model: envelope g, radial
/// bound b_g, dominating kernel c_g, fixpoint f = c_g + c_g * f.
///
/// The verdict `subcritical` is `<g> < 1`. Construction failures downstream
/// (an envelope too lossy to keep mass below 1) are recorded as refusals
/// rather than errors; structural misuse (a model without per-parent
/// structure) is an error.
pub fn subcritical_check(
    model: &crate::rates::BirthModel,
    grid_override: Option<FixpointGrid>,
) -> Result<SubcriticalReport, AnalysisError> {
    use crate::kernels::Profile;
    use crate::rates::Variant;

    let dim = model.dim();
    let eps = model.gw().eps();
    let (kernel, scale) = match model.variant() {
        Variant::Fecundity { a, .. } | Variant::Establishment { a, .. } => {
            (a, model.r_p().expect("certified model has r_p"))
        }
        Variant::Contact { g } => (g, 1.0),
        other => {
            return Err(AnalysisError::BadParameter(format!(
                "{} has no per-parent offspring kernel",
                other.name()
            )))
        }
    };
    let g_eval = |s: f64| scale * kernel.eval(s);
    let g_mass = scale * kernel.mass();
    let cutoff = kernel.cutoff();
    let subcritical = g_mass < 1.0;
    let mut refusals = Vec::new();

    // radial bound b_g: the profile itself when it is already a power law at
    // least as steep as the reference envelope, otherwise the smallest
    // power-law envelope with the reference exponent
    let reference = dim as f64 + 2.0 * eps;
    let (bg_amp, bg_beta) = match kernel.profile() {
        Profile::PowerLaw { amplitude, beta } if *beta >= reference - 1e-12 => {
            (scale * amplitude, *beta)
        }
        _ => {
            let mut c: f64 = 0.0;
            let n = 8192;
            for i in 0..=n {
                let s = cutoff * i as f64 / n as f64;
                c = c.max(g_eval(s) * (1.0 + s).powf(reference));
            }
            (c, reference)
        }
    };

    if bg_amp <= 0.0 {
        return Err(AnalysisError::BadParameter("offspring envelope is zero".into()));
    }

    let cg = match build_cg(dim, eps, bg_amp, bg_beta, bg_amp) {
        Ok(cg) => Some(cg),
        Err(AnalysisError::EnvelopeMassTooLarge(m)) => {
            refusals.push(format!(
                "dominating-kernel construction refused: envelope mass {m:.6} is not below 1"
            ));
            None
        }
        Err(e) => return Err(e),
    };

    if let Some(cg) = &cg {
        // certify dominance c_g >= g on a dense grid over g's support
        let n = 16384;
        for i in 0..=n {
            let s = cutoff * i as f64 / n as f64;
            let (cv, gv) = (cg.eval(s), g_eval(s));
            if cv < gv * (1.0 - 1e-9) {
                return Err(AnalysisError::DominationFailure { r: s, cg: cv, g: gv });
            }
        }
    }

    let fixpoint = match &cg {
        Some(cg) => {
            let grid = match grid_override {
                Some(g) => g,
                None => FixpointGrid::production(cg, cutoff)?,
            };
            match convolution_fixpoint(grid, |s| cg.eval(s)) {
                Ok(fp) => Some(fp),
                Err(AnalysisError::FixpointMassTooLarge(m)) => {
                    refusals.push(format!(
                        "fixpoint refused: discrete kernel mass {m:.6} is not below 1"
                    ));
                    None
                }
                Err(e) => return Err(e),
            }
        }
        None => None,
    };

    Ok(SubcriticalReport {
        model: model.variant().name().to_string(),
        g_mass,
        subcritical,
        bg_amp,
        bg_beta,
        cg,
        fixpoint,
        refusals,
    })
}

/// One replicate's contribution to the extinction audit: F(eta_0), F(eta_t)
/// at the sample times, and the accumulated integral of <c_g, eta_s> ds.
#[derive(Debug, Clone)]
pub struct SupermartingalePath {
    pub f0: f64,
    pub f_at: Vec<f64>,
    pub int_cg_at: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SupermartingaleReport {
    pub times: Vec<f64>,
    /// Mean over replicates of F(eta_t) + int_0^t <c_g, eta_s> ds - F(eta_0).
    pub margin: Vec<f64>,
    pub sem: Vec<f64>,
    pub ok: bool,
    pub first_violation: Option<usize>,
    pub extinct_fraction: f64,
    pub wilson_lower: f64,
}

/// Check the supermartingale inequality mean(F_t + int - F_0) <= 3 sem at
/// every sample time, pooling per-replicate differences.
pub fn supermartingale_audit(
    paths: &[SupermartingalePath],
    times: &[f64],
    extinct_count: u64,
) -> SupermartingaleReport {
    let mut margin = Vec::with_capacity(times.len());
    let mut sem = Vec::with_capacity(times.len());
    let mut first_violation = None;
    for k in 0..times.len() {
        let mut acc = crate::stats::Running::default();
        for p in paths {
            acc.push(p.f_at[k] + p.int_cg_at[k] - p.f0);
        }
        let m = acc.mean();
        let s = acc.sem();
        if m > 3.0 * s + 1e-12 && first_violation.is_none() {
            first_violation = Some(k);
        }
        margin.push(m);
        sem.push(s);
    }
    let n = paths.len() as u64;
    SupermartingaleReport {
        times: times.to_vec(),
        margin,
        sem,
        ok: first_violation.is_none(),
        first_violation,
        extinct_fraction: if n > 0 { extinct_count as f64 / n as f64 } else { 0.0 },
        wilson_lower: crate::stats::wilson_lower(extinct_count, n, 1.96),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::adaptive_midpoint;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // three rounds of scan refinement around the running argmax
    fn grid_max<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
        let mut best_x = lo;
        for _ in 0..4 {
            let mut best = f64::NEG_INFINITY;
            for i in 0..=4096 {
                let x = lo + (hi - lo) * i as f64 / 4096.0;
                let v = f(x);
                if v > best {
                    best = v;
                    best_x = x;
                }
            }
            let w = (hi - lo) / 4096.0;
            lo = (best_x - w).max(lo);
            hi = (best_x + w).min(hi);
        }
        f(best_x)
    }

    #[test]
    fn crowding_constants_closed_forms() {
        assert_relative_eq!(crowding_sup(0.0), 1.0);
        assert_relative_eq!(crowding_sup(1.0), 1.0);
        assert_relative_eq!(crowding_sup(2.0), 2.0 * (-0.5f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(crowding_sup(2.0), 1.2130613194252668, max_relative = 1e-12);
        assert_relative_eq!(crowding_sup_half(0.3), 1.0);
        assert_relative_eq!(crowding_sup_half(1.0), 2.0 * (-0.5f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(survival_yield_sup(0.0), (-1.0f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn crowding_constants_match_grid_maximization() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let p: f64 = rng.random::<f64>() * 4.0;
            let direct = grid_max(|s| (1.0 + p * s) * (-s).exp(), 0.0, 60.0);
            assert_relative_eq!(crowding_sup(p), direct, max_relative = 1e-10);
            let direct_half = grid_max(|s| (1.0 + p * s) * (-0.5 * s).exp(), 0.0, 60.0);
            assert_relative_eq!(crowding_sup_half(p), direct_half, max_relative = 1e-10);
            let direct_yield = grid_max(|s| s * (1.0 + p * s) * (-s).exp(), 0.0, 60.0);
            assert_relative_eq!(survival_yield_sup(p), direct_yield, max_relative = 1e-10);
        }
    }

    #[test]
    fn lattice_bound_worked_example_line() {
        // d=1, b_f(s) = B(1+s)^{-2}, rho = alpha = 1: series closes to
        // B(1 + pi^2/3) and the prefactor is 1
        let b = lattice_envelope_bound(1, 1.0, 2.0, 1.0, 1.0).unwrap();
        let exact = 1.0 + std::f64::consts::PI.powi(2) / 3.0;
        assert_relative_eq!(b.value, exact, max_relative = 1e-9);
        assert_relative_eq!(b.prefactor, 1.0, max_relative = 1e-15);

        let scaled = lattice_envelope_bound(1, 2.5, 2.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(scaled.value, 2.5 * exact, max_relative = 1e-9);
    }

    #[test]
    fn lattice_bound_prefactor_scaling() {
        let base = lattice_envelope_bound(1, 1.0, 3.0, 1.0, 1.0).unwrap();
        let tall = lattice_envelope_bound(1, 1.0, 3.0, 2.0, 1.0).unwrap();
        // same series (rho unchanged), prefactor e^2/(2e) vs 1
        assert_relative_eq!(tall.series, base.series, max_relative = 1e-12);
        assert_relative_eq!(
            tall.value / base.value,
            std::f64::consts::E / 2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn lattice_bound_rejects_heavy_tails() {
        assert!(lattice_envelope_bound(1, 1.0, 0.9, 1.0, 1.0).is_err());
        assert!(lattice_envelope_bound(2, 1.0, 1.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn lattice_bound_plane_and_space_are_certified_upper_bounds() {
        for dim in [2usize, 3] {
            let beta = dim as f64 + 2.0;
            let b = lattice_envelope_bound(dim, 0.7, beta, 1.0, 1.0).unwrap();
            assert!(b.value.is_finite());
            assert!(b.series >= 0.7, "central term alone is {}", 0.7);
            assert!(b.tail >= 0.0);
            // partial sums are monotone in the cap, so series >= any partial
            assert!(b.series >= b.partial);
        }
    }

    #[test]
    fn lattice_bound_dominates_randomized_configurations() {
        // random and clustered configurations never beat the certified bound
        // for sum_y b_f(|x-y|) exp(-sum_{z!=y} phi(|z-y|)) with phi a top-hat
        // floor (alpha, rho)
        let (amp, beta, alpha, rho) = (0.8, 2.5, 1.0, 1.0);
        let bound = lattice_envelope_bound(1, amp, beta, alpha, rho).unwrap().value;
        let b_f = |s: f64| amp * (1.0 + s).powf(-beta);
        let phi = |s: f64| if s <= rho { alpha } else { 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for case in 0..2200 {
            let n = if case < 2000 { rng.random_range(1..=40) } else { rng.random_range(20..=80) };
            let spread = if case < 2000 { 12.0 } else { rho };
            let pts: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() - 0.5) * 2.0 * spread).collect();
            let x: f64 = (rng.random::<f64>() - 0.5) * 2.0 * spread;
            let mut total = 0.0;
            for (i, &y) in pts.iter().enumerate() {
                let mut energy = 0.0;
                for (j, &z) in pts.iter().enumerate() {
                    if i != j {
                        energy += phi((z - y).abs());
                    }
                }
                total += b_f((x - y).abs()) * (-energy).exp();
            }
            worst = worst.max(total);
            assert!(
                total <= bound * (1.0 + 1e-12),
                "configuration of {n} points reached {total} > bound {bound}"
            );
        }
        assert!(worst > 0.5 * amp, "search never came near the bound ({worst})");
    }

    #[test]
    fn cg_worked_example_and_quadrature_oracle() {
        // d=1, eps=1, b_g(s) = 0.2 (1+s)^{-3}
        let cg = build_cg(1, 1.0, 0.2, 3.0, 0.2).unwrap();
        assert_relative_eq!(cg.envelope_mass, 0.2, max_relative = 1e-12);
        assert!(cg.mass < 1.0);
        assert!(cg.r1 >= cg.r);

        // mass against direct quadrature (split at the knots, where the
        // integrand has kinks) plus the analytic far tail
        let far = cg.r1 + 50.0;
        let head = adaptive_midpoint(&|s| cg.eval(s), 0.0, cg.r, 1e-11).unwrap()
            + adaptive_midpoint(&|s| cg.eval(s), cg.r, cg.r1, 1e-11).unwrap()
            + adaptive_midpoint(&|s| cg.eval(s), cg.r1, far, 1e-11).unwrap();
        let tail = power_law_tail(far, cg.tail_beta, 1).unwrap();
        assert_relative_eq!(cg.mass, 2.0 * (head + tail), max_relative = 1e-8);

        // continuity at both knots
        for knot in [cg.r, cg.r1] {
            let lo = cg.eval(knot - 1e-9);
            let hi = cg.eval(knot + 1e-9);
            assert_relative_eq!(lo, hi, max_relative = 1e-6);
        }

        // decreasing and dominating on a grid
        let mut prev = f64::INFINITY;
        for i in 0..=4000 {
            let s = 20.0 * i as f64 / 4000.0;
            let v = cg.eval(s);
            assert!(v <= prev + 1e-15);
            assert!(v >= 0.2 * (1.0 + s).powf(-3.0) - 1e-15);
            prev = v;
        }
    }

    #[test]
    fn cg_refuses_supercritical_envelope() {
        let err = build_cg(1, 1.0, 1.2, 3.0, 1.2).unwrap_err();
        match err {
            AnalysisError::EnvelopeMassTooLarge(m) => assert_relative_eq!(m, 1.2, max_relative = 1e-12),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn cg_respects_envelope_exponent_requirement() {
        assert!(build_cg(1, 1.0, 0.2, 2.4, 0.2).is_err());
    }

    #[test]
    fn fixpoint_line_matches_neumann_series() {
        // mass-0.5 top-hat: c(s) = 0.25 on [0,1]
        let c = |s: f64| if s <= 1.0 { 0.25 } else { 0.0 };
        let grid = FixpointGrid::explicit(1, 1.0 / 256.0, 45.0).unwrap();
        let fp = convolution_fixpoint(grid, c).unwrap();
        assert!(fp.residual < 1e-8, "residual {}", fp.residual);
        assert_relative_eq!(fp.cg_mass, 0.5, max_relative = 1e-2);
        // the stopping tolerance (sup step 1e-8) limits how closely the
        // discrete masses can balance; the production criterion is 1e-6
        assert!(fp.mass_balance_err < 1e-6, "balance {}", fp.mass_balance_err);

        // direct Neumann summation on the same grid, truncated at n = 40
        let h = grid.spacing;
        let n = (grid.half_extent / h).ceil() as usize;
        let len = 2 * n + 1;
        let sample = |i: usize, half: f64| c(h * (i as f64 - half).abs());
        let c_dom: Vec<f64> = (0..len).map(|i| sample(i, n as f64)).collect();
        let c_long: Vec<f64> = (0..4 * n + 1).map(|i| sample(i, 2.0 * n as f64)).collect();
        let conv = LineConv::new(&c_long, len, 2 * n, h);
        let mut term = c_dom.clone();
        let mut series = c_dom.clone();
        for _ in 2..=40 {
            term = conv.apply(&term);
            for (s, t) in series.iter_mut().zip(&term) {
                *s += *t;
            }
        }
        let mut worst: f64 = 0.0;
        for k in 0..=n {
            worst = worst.max((fp.radial[k] - series[n + k]).abs());
            assert!(fp.radial[k] >= c_dom[n + k] - 1e-12, "f >= c_g fails at {k}");
        }
        assert!(worst < 1e-8, "Neumann mismatch {worst}");
    }

    #[test]
    fn fixpoint_refuses_supercritical_mass() {
        let c = |s: f64| if s <= 1.0 { 0.75 } else { 0.0 };
        let grid = FixpointGrid::explicit(1, 1.0 / 64.0, 10.0).unwrap();
        match convolution_fixpoint(grid, c) {
            Err(AnalysisError::FixpointMassTooLarge(m)) => assert!(m > 1.0),
            other => panic!("expected mass refusal, got {other:?}"),
        }
    }

    #[test]
    fn plane_fft_convolution_matches_direct_sum() {
        let n: usize = 31;
        let long: usize = 2 * n - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kernel: Vec<f64> = (0..long * long).map(|_| rng.random::<f64>()).collect();
        let signal: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        let off = (long - 1) / 2;
        let conv = PlaneConv::new(&kernel, long, n, off, 1.0);
        let fast = conv.apply(&signal);
        for i in 0..n {
            for j in 0..n {
                let mut direct = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        let ki = i + off - a;
                        let kj = j + off - b;
                        direct += kernel[ki * long + kj] * signal[a * n + b];
                    }
                }
                assert_relative_eq!(fast[i * n + j], direct, max_relative = 1e-10, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn fixpoint_plane_small_tophat() {
        let c = |s: f64| if s <= 1.0 { 0.1 } else { 0.0 };
        let grid = FixpointGrid::explicit(2, 1.0 / 8.0, 16.0).unwrap();
        let fp = convolution_fixpoint(grid, c).unwrap();
        assert!(fp.residual < 1e-8, "residual {}", fp.residual);
        // discrete mass of the sampled disk indicator approximates 0.1 pi
        assert_relative_eq!(fp.cg_mass, 0.1 * std::f64::consts::PI, max_relative = 3e-2);
        assert!(fp.mass_balance_err < 1e-5, "balance {}", fp.mass_balance_err);
        for (k, &v) in fp.radial.iter().enumerate() {
            let s = k as f64 * fp.spacing;
            assert!(v >= c(s) - 1e-12);
        }
    }

    #[test]
    fn radial3_convolution_matches_gaussian_oracle() {
        // conv of A1 e^{-r^2/2s1^2} and A2 e^{-r^2/2s2^2} in R^3
        let (a1, s1) = (0.7, 0.6);
        let (a2, s2) = (1.1, 0.8);
        let h = 0.01;
        let n = 800;
        let grid = FixpointGrid { dim: 3, spacing: h, half_extent: n as f64 * h };
        let c1 = move |r: f64| a1 * (-r * r / (2.0 * s1 * s1)).exp();

        // reuse the internal machinery by building the matrix through a
        // one-step "fixpoint" is awkward; test the formula directly instead
        let fine = 8;
        let hw = h / fine as f64;
        let w_len = 2 * n * fine + 2 * fine + 1;
        let mut w_table = vec![0.0; w_len];
        for i in 1..w_len {
            let mid = (i as f64 - 0.5) * hw;
            w_table[i] = w_table[i - 1] + mid * c1(mid) * hw;
        }
        let w_of = |t: f64| -> f64 {
            let x = t / hw;
            let k = (x.floor() as usize).min(w_len - 2);
            let frac = x - k as f64;
            w_table[k] * (1.0 - frac) + w_table[k + 1] * frac
        };
        let r_at = |k: usize| (k as f64 + 0.5) * h;
        let f2: Vec<f64> = (0..n).map(|j| a2 * (-r_at(j) * r_at(j) / (2.0 * s2 * s2)).exp()).collect();

        let svar = s1 * s1 + s2 * s2;
        let pref = a1 * a2
            * (2.0 * std::f64::consts::PI * s1 * s1 * s2 * s2 / svar).powf(1.5);
        for k in [10usize, 50, 100, 150] {
            let r = r_at(k);
            let mut acc = 0.0;
            for j in 0..n {
                let s = r_at(j);
                acc += 2.0 * std::f64::consts::PI * s * h * (w_of(r + s) - w_of((r - s).abs())) / r
                    * f2[j];
            }
            let oracle = pref * (-r * r / (2.0 * svar)).exp();
            assert_relative_eq!(acc, oracle, max_relative = 2e-4);
        }
        let _ = grid;
    }

    #[test]
    fn fixpoint_radial3_smoke() {
        let c = |s: f64| if s <= 1.0 { 0.05 } else { 0.0 };
        let grid = FixpointGrid::explicit(3, 1.0 / 32.0, 8.0).unwrap();
        let fp = convolution_fixpoint(grid, c).unwrap();
        assert!(fp.residual < 1e-8);
        // top-hat mass in R^3 is 0.05 * 4pi/3
        assert_relative_eq!(
            fp.cg_mass,
            0.05 * 4.0 * std::f64::consts::PI / 3.0,
            max_relative = 1e-3
        );
        assert!(fp.mass_balance_err < 1e-2, "balance {}", fp.mass_balance_err);
        for (k, &v) in fp.radial.iter().enumerate() {
            assert!(v >= c(fp.r0 + k as f64 * fp.spacing) - 1e-12);
        }
    }

    #[test]
    fn fixpoint_interpolation_clamps() {
        let fp = Fixpoint {
            dim: 1,
            spacing: 0.5,
            radial: vec![4.0, 2.0, 1.0],
            r0: 0.0,
            mass: 0.0,
            cg_mass: 0.0,
            residual: 0.0,
            iterations: 1,
            mass_balance_err: 0.0,
        };
        assert_relative_eq!(fp.eval(0.0), 4.0);
        assert_relative_eq!(fp.eval(0.25), 3.0);
        assert_relative_eq!(fp.eval(0.75), 1.5);
        assert_relative_eq!(fp.eval(9.0), 1.0);
        let cut = fp.truncated(0.5);
        assert!(cut.radial.len() <= fp.radial.len());
        assert_relative_eq!(cut.eval(0.25), 3.0);
    }

    #[test]
    fn supermartingale_audit_detects_drift() {
        let times = vec![1.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // a martingale-like batch: differences centered at zero
        let flat: Vec<SupermartingalePath> = (0..400)
            .map(|_| {
                let noise = rng.random::<f64>() - 0.5;
                SupermartingalePath {
                    f0: 1.0,
                    f_at: vec![0.6 + noise * 0.1, 0.3 + noise * 0.1],
                    int_cg_at: vec![0.4 - 0.05, 0.7 - 0.05],
                }
            })
            .collect();
        let rep = supermartingale_audit(&flat, &times, 399);
        assert!(rep.ok, "margin {:?} sem {:?}", rep.margin, rep.sem);
        assert!(rep.extinct_fraction > 0.99);
        assert!(rep.wilson_lower > 0.97);

        // systematic upward drift must fail
        let drift: Vec<SupermartingalePath> = (0..400)
            .map(|_| {
                let noise = rng.random::<f64>() - 0.5;
                SupermartingalePath {
                    f0: 1.0,
                    f_at: vec![1.2 + noise * 0.1, 1.5 + noise * 0.1],
                    int_cg_at: vec![0.3, 0.6],
                }
            })
            .collect();
        let rep = supermartingale_audit(&drift, &times, 0);
        assert!(!rep.ok);
        assert_eq!(rep.first_violation, Some(0));
    }

    #[test]
    fn subcritical_chain_contact_power_law() {
        use crate::kernels::{Profile, RadialKernel};
        use crate::rates::{BirthModel, Variant};
        // g keeps its own power-law profile as b_g (beta = 5 = d + 2 eps)
        let g = RadialKernel::with_cutoff(
            Profile::PowerLaw { amplitude: 0.3, beta: 5.0 },
            1,
            4.95,
        )
        .unwrap();
        let model = BirthModel::certify(Variant::Contact { g: g.clone() }, 1, 2.0).unwrap();
        let rep = subcritical_check(&model, None).unwrap();
        assert!(rep.subcritical);
        assert!(rep.refusals.is_empty(), "{:?}", rep.refusals);
        assert_relative_eq!(rep.g_mass, g.mass(), max_relative = 1e-12);
        assert_relative_eq!(rep.bg_amp, 0.3, max_relative = 1e-12);
        assert_relative_eq!(rep.bg_beta, 5.0, max_relative = 1e-12);

        let cg = rep.cg.as_ref().unwrap();
        // analytic envelope mass: 2 * 0.3 * int (1+s)^{-5} = 0.15
        assert_relative_eq!(cg.envelope_mass, 0.15, max_relative = 1e-12);
        assert!(cg.mass < 1.0);

        let fp = rep.fixpoint.as_ref().unwrap();
        assert!(fp.residual < 1e-8, "residual {}", fp.residual);
        assert!(fp.mass_balance_err < 1e-6, "balance {}", fp.mass_balance_err);
        // f dominates c_g pointwise on the grid
        for (k, &v) in fp.radial.iter().enumerate() {
            let s = fp.r0 + k as f64 * fp.spacing;
            assert!(v >= cg.eval(s) - 1e-10, "f < c_g at {s}");
        }
    }

    #[test]
    fn subcritical_chain_envelope_branch_and_refusal() {
        use crate::kernels::{Profile, RadialKernel};
        use crate::rates::{BirthModel, Variant};

        // establishment with a top-hat dispersal: b_g must fall back to the
        // reference power envelope C (1+s)^{-5}
        let a = RadialKernel::new(Profile::TopHat { height: 0.05, radius: 1.0 }, 1).unwrap();
        let phi = RadialKernel::new(Profile::TopHat { height: 2.0, radius: 1.0 }, 1).unwrap();
        let c = RadialKernel::new(Profile::TopHat { height: 0.6, radius: 1.0 }, 1).unwrap();
        let model =
            BirthModel::certify(Variant::Establishment { a, phi, c }, 1, 2.0).unwrap();
        let grid = FixpointGrid::explicit(1, 1.0 / 64.0, 60.0).unwrap();
        let rep = subcritical_check(&model, Some(grid)).unwrap();
        assert!(rep.subcritical);
        assert!(rep.refusals.is_empty(), "{:?}", rep.refusals);
        // C = 0.05 * 2^5 at the support edge, r_p = 1 since p <= 1
        assert_relative_eq!(rep.bg_amp, 1.6, max_relative = 1e-9);
        assert_relative_eq!(rep.bg_beta, 5.0, max_relative = 1e-12);
        let fp = rep.fixpoint.as_ref().unwrap();
        assert!(fp.residual < 1e-8);
        // the deliberately small test domain leaks tail mass, so only a loose
        // balance holds here; the production-grid case is covered above
        assert!(fp.mass_balance_err < 1e-4, "balance {}", fp.mass_balance_err);

        // a shallow dispersal envelope overshoots mass 1: refusal, not error
        let a = RadialKernel::with_cutoff(
            Profile::PowerLaw { amplitude: 0.35, beta: 2.0 },
            1,
            4.0,
        )
        .unwrap();
        let phi = RadialKernel::new(Profile::TopHat { height: 2.0, radius: 1.0 }, 1).unwrap();
        let c = RadialKernel::new(Profile::TopHat { height: 1.2, radius: 1.0 }, 1).unwrap();
        let model = BirthModel::certify(Variant::Fecundity { a, phi, c }, 1, 1.0).unwrap();
        let rep = subcritical_check(&model, None).unwrap();
        assert!(rep.subcritical, "g mass {} should be below 1", rep.g_mass);
        assert!(!rep.refusals.is_empty());
        assert!(rep.cg.is_none());
        assert!(rep.fixpoint.is_none());
    }

    #[test]
    fn subcritical_check_needs_per_parent_structure() {
        use crate::rates::{BirthModel, Variant};
        let model = BirthModel::certify(Variant::Surgailis { bconst: 0.5 }, 1, 1.0).unwrap();
        assert!(subcritical_check(&model, None).is_err());
    }

    #[test]
    fn shell_point_counts() {
        for m in 1..=5i64 {
            let mut n2 = 0u64;
            for_each_shell_point(2, m, |_| n2 += 1);
            assert_eq!(n2, 8 * m as u64);
            let mut n3 = 0u64;
            for_each_shell_point(3, m, |_| n3 += 1);
            assert_eq!(n3, (24 * m * m + 2) as u64);
        }
        let mut n0 = 0;
        for_each_shell_point(3, 0, |_| n0 += 1);
        assert_eq!(n0, 1);
    }
}
