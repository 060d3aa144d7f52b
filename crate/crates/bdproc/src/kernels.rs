//! Radial interaction kernels with hard cutoffs, the polynomial weight
//! function G, and the grid-certified admissibility checks that every model
//! certificate builds on.

use crate::quadrature::{
    adaptive_midpoint, power_law_between, power_law_tail, sphere_surface, QuadratureError,
};
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MASS_REL_TOL: f64 = 1e-8;
/// Infinite-support profiles are cut where the omitted mass drops below this
/// fraction of the total.
pub const TRUNCATION_MASS_FRACTION: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("kernel parameter {name} must be positive and finite, got {value}")]
    BadParameter { name: &'static str, value: f64 },
    #[error("power-law kernel needs beta > dim for finite mass (beta = {beta}, dim = {dim})")]
    InfiniteMass { beta: f64, dim: usize },
    #[error("tabulated kernel needs at least two samples")]
    TableTooShort,
    #[error("tabulated radii must be nonnegative and strictly increasing (row {0})")]
    TableNotIncreasing(usize),
    #[error("tabulated values must be finite and nonnegative (row {0})")]
    TableBadValue(usize),
    #[error("could not parse tabulated kernel row {row}: {line:?}")]
    TableParse { row: usize, line: String },
    #[error("explicit cutoff must be positive and finite, got {0}")]
    BadCutoff(f64),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// Radial profile shapes. All evaluate to nonnegative values.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "profile", rename_all = "lowercase")]
pub enum Profile {
    Zero,
    TopHat { height: f64, radius: f64 },
    Triangular { height: f64, radius: f64 },
    Gaussian { amplitude: f64, sigma: f64 },
    PowerLaw { amplitude: f64, beta: f64 },
    Tabulated { radii: Vec<f64>, values: Vec<f64> },
}

impl Profile {
    fn validate(&self) -> Result<(), KernelError> {
        let check = |name: &'static str, value: f64| {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(KernelError::BadParameter { name, value })
            }
        };
        match self {
            Profile::Zero => Ok(()),
            Profile::TopHat { height, radius } | Profile::Triangular { height, radius } => {
                check("height", *height)?;
                check("radius", *radius)
            }
            Profile::Gaussian { amplitude, sigma } => {
                check("amplitude", *amplitude)?;
                check("sigma", *sigma)
            }
            Profile::PowerLaw { amplitude, beta } => {
                check("amplitude", *amplitude)?;
                check("beta", *beta)
            }
            Profile::Tabulated { radii, values } => {
                if radii.len() < 2 || radii.len() != values.len() {
                    return Err(KernelError::TableTooShort);
                }
                for (i, pair) in radii.windows(2).enumerate() {
                    if !(pair[0] >= 0.0 && pair[1] > pair[0] && pair[1].is_finite()) {
                        return Err(KernelError::TableNotIncreasing(i + 1));
                    }
                }
                for (i, &v) in values.iter().enumerate() {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(KernelError::TableBadValue(i));
                    }
                }
                Ok(())
            }
        }
    }

    /// Raw profile value at radius `r >= 0`, before any cutoff.
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            Profile::Zero => 0.0,
            Profile::TopHat { height, radius } => {
                if r <= *radius {
                    *height
                } else {
                    0.0
                }
            }
            Profile::Triangular { height, radius } => {
                if r <= *radius {
                    height * (1.0 - r / radius)
                } else {
                    0.0
                }
            }
            Profile::Gaussian { amplitude, sigma } => {
                amplitude * (-0.5 * (r / sigma).powi(2)).exp()
            }
            Profile::PowerLaw { amplitude, beta } => amplitude * (1.0 + r).powf(-beta),
            Profile::Tabulated { radii, values } => {
                if r <= radii[0] {
                    return values[0];
                }
                if r > *radii.last().unwrap() {
                    return 0.0;
                }
                let i = radii.partition_point(|&x| x < r).min(radii.len() - 1);
                let (r0, r1) = (radii[i - 1], radii[i]);
                let t = (r - r0) / (r1 - r0);
                values[i - 1] * (1.0 - t) + values[i] * t
            }
        }
    }

    fn natural_support(&self) -> Option<f64> {
        match self {
            Profile::Zero => Some(0.0),
            Profile::TopHat { radius, .. } | Profile::Triangular { radius, .. } => Some(*radius),
            Profile::Tabulated { radii, .. } => Some(*radii.last().unwrap()),
            Profile::Gaussian { .. } | Profile::PowerLaw { .. } => None,
        }
    }

    /// Parse a two-column whitespace-separated text table (radius, value).
    /// Blank lines and `#` comments are skipped.
    pub fn tabulated_from_str(text: &str) -> Result<Profile, KernelError> {
        let mut radii = Vec::new();
        let mut values = Vec::new();
        for (row, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>| {
                tok.and_then(|t| t.parse::<f64>().ok()).ok_or(KernelError::TableParse {
                    row: row + 1,
                    line: line.to_string(),
                })
            };
            radii.push(parse(it.next())?);
            values.push(parse(it.next())?);
        }
        let p = Profile::Tabulated { radii, values };
        p.validate()?;
        Ok(p)
    }
}

/// A radial kernel: profile, spatial dimension, hard cutoff and cached mass
/// `sigma_d \int_0^cutoff profile(r) r^{d-1} dr`.
#[derive(Debug, Clone, Serialize)]
pub struct RadialKernel {
    profile: Profile,
    dim: usize,
    cutoff: f64,
    mass: f64,
}

fn mass_between(profile: &Profile, dim: usize, a: f64, b: f64) -> Result<f64, KernelError> {
    // power laws integrate in closed form; their auto-cutoff supports are far
    // too wide for adaptive quadrature
    if let Profile::PowerLaw { amplitude, beta } = profile {
        return Ok(sphere_surface(dim) * amplitude * power_law_between(a, b, *beta, dim)?);
    }
    let integrand = |r: f64| profile.eval(r) * r.powi(dim as i32 - 1);
    Ok(sphere_surface(dim) * adaptive_midpoint(&integrand, a, b, MASS_REL_TOL)?)
}

impl RadialKernel {
    /// Build with automatic cutoff: the natural support for compact profiles,
    /// or the radius where the omitted mass falls below
    /// `TRUNCATION_MASS_FRACTION` of the total for infinite-support ones.
    pub fn new(profile: Profile, dim: usize) -> Result<Self, KernelError> {
        profile.validate()?;
        let cutoff = match profile.natural_support() {
            Some(r) => r,
            None => auto_cutoff(&profile, dim)?,
        };
        let mass = mass_between(&profile, dim, 0.0, cutoff)?;
        Ok(RadialKernel { profile, dim, cutoff, mass })
    }

    /// Build with an explicit cutoff (e.g. to keep the support inside half a
    /// periodic window). The omitted mass is the caller's modeling choice.
    pub fn with_cutoff(profile: Profile, dim: usize, cutoff: f64) -> Result<Self, KernelError> {
        profile.validate()?;
        if !(cutoff.is_finite() && cutoff >= 0.0) {
            return Err(KernelError::BadCutoff(cutoff));
        }
        let cutoff = match profile.natural_support() {
            Some(r) => r.min(cutoff),
            None => cutoff,
        };
        let mass = mass_between(&profile, dim, 0.0, cutoff)?;
        Ok(RadialKernel { profile, dim, cutoff, mass })
    }

    pub fn zero(dim: usize) -> Self {
        RadialKernel { profile: Profile::Zero, dim, cutoff: 0.0, mass: 0.0 }
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// Cached total mass `<k>` of the (truncated) kernel.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn is_zero(&self) -> bool {
        self.mass == 0.0
    }

    /// Kernel value at radius `r`; zero beyond the cutoff.
    pub fn eval(&self, r: f64) -> f64 {
        if r > self.cutoff {
            0.0
        } else {
            self.profile.eval(r)
        }
    }
}

/// Samples displacements from the normalized kernel density
/// `mass^{-1} k(|x|)`: radius by inverse CDF of `k(r) r^{d-1}` on a fine
/// table, direction uniform on the sphere.
#[derive(Debug, Clone)]
pub struct DisplacementSampler {
    dim: usize,
    radii: Vec<f64>,
    cdf: Vec<f64>,
}

const SAMPLER_CELLS: usize = 8192;

impl DisplacementSampler {
    pub fn new(kernel: &RadialKernel) -> Result<Self, KernelError> {
        if kernel.mass() <= 0.0 {
            return Err(KernelError::BadParameter { name: "mass", value: kernel.mass() });
        }
        let n = SAMPLER_CELLS;
        let h = kernel.cutoff() / n as f64;
        let dim = kernel.dim();
        let mut radii = Vec::with_capacity(n + 1);
        let mut cdf = Vec::with_capacity(n + 1);
        radii.push(0.0);
        cdf.push(0.0);
        let mut acc = 0.0;
        for i in 0..n {
            let r = (i as f64 + 0.5) * h;
            acc += kernel.eval(r) * r.powi(dim as i32 - 1) * h;
            radii.push((i + 1) as f64 * h);
            cdf.push(acc);
        }
        let total = *cdf.last().unwrap();
        if total <= 0.0 {
            return Err(KernelError::BadParameter { name: "mass", value: total });
        }
        for v in cdf.iter_mut() {
            *v /= total;
        }
        Ok(DisplacementSampler { dim, radii, cdf })
    }

    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> [f64; crate::geometry::MAX_DIM] {
        let u: f64 = rng.random();
        let i = self.cdf.partition_point(|&c| c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        let r = self.radii[i - 1] + t * (self.radii[i] - self.radii[i - 1]);

        let mut out = [0.0; crate::geometry::MAX_DIM];
        match self.dim {
            1 => {
                out[0] = if rng.random::<bool>() { r } else { -r };
            }
            2 => {
                let [x, y]: [f64; 2] = rand_distr::UnitCircle.sample(rng);
                out[0] = r * x;
                out[1] = r * y;
            }
            _ => {
                let [x, y, z]: [f64; 3] = rand_distr::UnitSphere.sample(rng);
                out[0] = r * x;
                out[1] = r * y;
                out[2] = r * z;
            }
        }
        out
    }
}

fn auto_cutoff(profile: &Profile, dim: usize) -> Result<f64, KernelError> {
    if let Profile::PowerLaw { beta, .. } = profile {
        if *beta <= dim as f64 {
            return Err(KernelError::InfiniteMass { beta: *beta, dim });
        }
    }
    // total mass over a domain large enough that the remainder is negligible
    let tail = |r0: f64| -> Result<f64, KernelError> {
        match profile {
            Profile::PowerLaw { amplitude, beta } => {
                Ok(sphere_surface(dim) * amplitude * power_law_tail(r0, *beta, dim)?)
            }
            Profile::Gaussian { sigma, .. } => mass_between(profile, dim, r0, r0 + 14.0 * sigma),
            _ => unreachable!("compact profiles have natural supports"),
        }
    };
    // grow until the tail is tiny relative to the head, then bisect
    let mut hi = 1.0;
    let target = loop {
        let head = mass_between(profile, dim, 0.0, hi)?;
        let t = tail(hi)?;
        if t < TRUNCATION_MASS_FRACTION * (head + t) {
            break TRUNCATION_MASS_FRACTION * (head + t);
        }
        hi *= 2.0;
        if hi > 1e9 {
            return Err(KernelError::InfiniteMass { beta: f64::NAN, dim });
        }
    };
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tail(mid)? < target {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-9 * (1.0 + hi) {
            break;
        }
    }
    Ok(hi)
}

/// The weight `G(x) = (1+|x|)^{-dim-eps}`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GWeight {
    dim: usize,
    eps: f64,
}

impl GWeight {
    pub fn new(dim: usize, eps: f64) -> Result<Self, KernelError> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(KernelError::BadParameter { name: "eps", value: eps });
        }
        Ok(GWeight { dim, eps })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn exponent(&self) -> f64 {
        self.dim as f64 + self.eps
    }

    pub fn eval_r(&self, r: f64) -> f64 {
        (1.0 + r).powf(-self.exponent())
    }
}

/// Outcome of the grid-certified kernel admissibility checks.
///
/// Certification is on a finite radial grid: `grid_points` samples over the
/// union of the kernel supports. That caveat travels with the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionReport {
    /// Smallest B >= 1 with `a <= B G^2` and `phi <= B G` on the grid.
    pub b_strong: f64,
    /// Smallest B >= 1 with `a <= B G` and `phi <= B G` on the grid
    /// (the weaker variant some bounds need).
    pub b_weak: f64,
    /// Grid supremum of `a / G`, the envelope amplitude fed to the lattice
    /// bound (no >= 1 clamp).
    pub a_envelope_amp: f64,
    /// A certified floor `(alpha, rho)`: `phi >= alpha` on `|x| <= rho`.
    pub phi_floor: Option<(f64, f64)>,
    /// Subsampled list of admissible floors, for bound optimization.
    pub floor_candidates: Vec<(f64, f64)>,
    /// Smallest p with `c <= p phi` on the grid, when it exists.
    pub p_found: Option<f64>,
    /// Smallest q with `a <= q phi` on the grid, when it exists.
    pub q_found: Option<f64>,
    pub grid_points: usize,
    /// `a <= B G^2`, `phi <= B G` hold with finite B.
    pub envelope_ok: bool,
    /// phi has a positive floor near the origin.
    pub floor_ok: bool,
    /// c is dominated by a multiple of phi.
    pub crowding_ok: bool,
}

impl ConditionReport {
    pub fn all_ok(&self) -> bool {
        self.envelope_ok && self.floor_ok && self.crowding_ok
    }
}

/// Check the dispersal/competition/crowding kernels against the weight G on
/// a uniform radial grid with `n + 1` samples.
pub fn check_conditions(
    a: &RadialKernel,
    phi: &RadialKernel,
    c: &RadialKernel,
    gw: &GWeight,
    n: usize,
) -> ConditionReport {
    let r_max = a.cutoff().max(phi.cutoff()).max(c.cutoff()).max(1e-9);
    let n = n.max(16);
    // uniform grid plus the exact cutoff radii, where piecewise profiles put
    // their ratio suprema
    let mut radii: Vec<f64> = (0..=n).map(|i| r_max * i as f64 / n as f64).collect();
    for k in [a, phi, c] {
        if k.cutoff() > 0.0 && k.cutoff() < r_max {
            radii.push(k.cutoff());
        }
    }
    radii.sort_by(f64::total_cmp);
    radii.dedup();

    let mut b_strong: f64 = 1.0;
    let mut b_weak: f64 = 1.0;
    let mut a_env: f64 = 0.0;
    let mut p_found: Option<f64> = Some(0.0);
    let mut q_found: Option<f64> = Some(0.0);

    for &r in &radii {
        let g = gw.eval_r(r);
        let av = a.eval(r);
        let pv = phi.eval(r);
        let cv = c.eval(r);

        a_env = a_env.max(av / g);
        b_strong = b_strong.max(av / (g * g)).max(pv / g);
        b_weak = b_weak.max(av / g).max(pv / g);

        if cv > 0.0 {
            match p_found {
                Some(p) if pv > 0.0 => p_found = Some(p.max(cv / pv)),
                _ => p_found = None,
            }
        }
        if av > 0.0 {
            match q_found {
                Some(q) if pv > 0.0 => q_found = Some(q.max(av / pv)),
                _ => q_found = None,
            }
        }
    }

    // Floor candidates live on phi's own support so a wide dispersal kernel
    // cannot coarsen them.
    let mut running_min = f64::INFINITY;
    let mut candidates: Vec<(f64, f64)> = Vec::new();
    let mut phi_max: f64 = 0.0;
    if phi.cutoff() > 0.0 {
        let m = n.min(4096);
        let stride = (m / 64).max(1);
        for i in 0..=m {
            let r = phi.cutoff() * i as f64 / m as f64;
            let pv = phi.eval(r);
            phi_max = phi_max.max(pv);
            running_min = running_min.min(pv);
            if i > 0 && running_min > 0.0 && (i % stride == 0 || i == m) {
                candidates.push((running_min, r));
            }
        }
    }

    // representative floor: the largest radius where phi stays above half its
    // grid maximum (matches the natural choice for plateau-like kernels)
    let phi_floor = candidates
        .iter()
        .rev()
        .find(|(alpha, _)| *alpha >= 0.5 * phi_max)
        .or(candidates.last())
        .copied();

    ConditionReport {
        envelope_ok: b_strong.is_finite(),
        floor_ok: phi_floor.is_some(),
        crowding_ok: p_found.is_some(),
        b_strong,
        b_weak,
        a_envelope_amp: a_env,
        phi_floor,
        floor_candidates: candidates,
        p_found,
        q_found,
        grid_points: radii.len(),
    }
}
