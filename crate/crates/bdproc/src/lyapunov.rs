//! The Foster-Lyapunov functional W(eta) = sum h + sum of pair potentials,
//! its exact generator action, drift verification, and return-time
//! statistics.
//!
//! The pair kernel K must blow up at 0, stay locally integrable, and have an
//! integrable tail; a single power law cannot do all three, so K is the
//! piecewise power q^{-beta0} on (0,1], q^{-beta1} beyond.

use serde::{Deserialize, Serialize};

use crate::engine::{sample_poisson_field, EngineError, EventKind, EventLog, Replayer};
use crate::geometry::{Configuration, GeometryError, Point, Window};
use crate::kernels::{GWeight, KernelError, Profile, RadialKernel};
use crate::quadrature::sphere_surface;
use crate::rates::{BirthModel, RateError};
use crate::stats::Running;

#[derive(Debug, thiserror::Error)]
pub enum LyapunovError {
    #[error("bad parameter {name} = {value}")]
    BadParameter { name: &'static str, value: f64 },
    #[error("pair potential is singular at coincident points")]
    CoincidentPoints,
    #[error("refused: {0}")]
    Refused(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Piecewise power pair kernel: K(q) = q^{-beta0} for q <= 1, q^{-beta1}
/// for q > 1. Local integrability needs beta0 < d, tail integrability
/// beta1 > d, and the singularity at 0 needs beta0 > 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairKernel {
    dim: usize,
    beta0: f64,
    beta1: f64,
}

impl PairKernel {
    pub fn new(dim: usize, beta0: f64, beta1: f64) -> Result<Self, LyapunovError> {
        if dim == 0 || dim > crate::geometry::MAX_DIM {
            return Err(LyapunovError::BadParameter { name: "dim", value: dim as f64 });
        }
        if !(beta0 > 0.0 && beta0 < dim as f64) {
            return Err(LyapunovError::BadParameter { name: "beta0", value: beta0 });
        }
        if !(beta1 > dim as f64 && beta1.is_finite()) {
            return Err(LyapunovError::BadParameter { name: "beta1", value: beta1 });
        }
        Ok(PairKernel { dim, beta0, beta1 })
    }

    pub fn default_for(dim: usize) -> Result<Self, LyapunovError> {
        PairKernel::new(dim, dim as f64 / 2.0, dim as f64 + 1.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn eval(&self, q: f64) -> f64 {
        if q <= 0.0 {
            f64::INFINITY
        } else if q <= 1.0 {
            q.powf(-self.beta0)
        } else {
            q.powf(-self.beta1)
        }
    }

    /// int_0^r K(q) q^{d-1} dq, finite for every r by beta0 < d < beta1.
    pub fn radial_mass(&self, r: f64) -> f64 {
        let d = self.dim as f64;
        if r <= 0.0 {
            0.0
        } else if r <= 1.0 {
            r.powf(d - self.beta0) / (d - self.beta0)
        } else {
            1.0 / (d - self.beta0) + (r.powf(d - self.beta1) - 1.0) / (d - self.beta1)
        }
    }

    /// int_0^r K(q) q^d dq, the first moment of the radial mass. The tail
    /// power beta1 = d + 1 makes the integrand 1/q there, hence the log.
    pub fn radial_first_moment(&self, r: f64) -> f64 {
        let d = self.dim as f64;
        let head = |r: f64| r.powf(d + 1.0 - self.beta0) / (d + 1.0 - self.beta0);
        let tail = |r: f64| {
            let e = d + 1.0 - self.beta1;
            if e.abs() < 1e-12 {
                r.ln()
            } else {
                (r.powf(e) - 1.0) / e
            }
        };
        if r <= 0.0 {
            0.0
        } else if r <= 1.0 {
            head(r)
        } else {
            head(1.0) + tail(r)
        }
    }
}

/// Calibrated drift functional: W(eta) = sum_x h(x) + sum_{pairs} psi(x,y)
/// with psi(x,y) = phi(x) phi(y) K(|x-y|). `phi` and `h` are radial about
/// the window center; distances use the window metric.
#[derive(Debug, Clone)]
pub struct LyapunovSpec {
    pub window: Window,
    pub k: PairKernel,
    pub phi: RadialKernel,
    pub h: RadialKernel,
    /// Certified sup_x int_W phi(y) K(|x-y|) dy, grid error already added.
    pub c1: f64,
    pub c1_err: f64,
    /// The model's certified global birth bound.
    pub bconst: f64,
    mean_h: f64,
}

impl LyapunovSpec {
    pub fn new(
        window: Window,
        k: PairKernel,
        phi: RadialKernel,
        h: RadialKernel,
        c1: f64,
        c1_err: f64,
        bconst: f64,
    ) -> Result<Self, LyapunovError> {
        if k.dim() != window.dim() {
            return Err(LyapunovError::BadParameter {
                name: "pair kernel dim",
                value: k.dim() as f64,
            });
        }
        if !(bconst > 0.0 && bconst.is_finite()) {
            return Err(LyapunovError::BadParameter { name: "bconst", value: bconst });
        }
        let mean_h = mean_over_window(&h, &window);
        Ok(LyapunovSpec { window, k, phi, h, c1, c1_err, bconst, mean_h })
    }

    pub fn phi_at(&self, x: &Point) -> f64 {
        self.phi.eval(self.window.radius_from_center(x))
    }

    pub fn h_at(&self, x: &Point) -> f64 {
        self.h.eval(self.window.radius_from_center(x))
    }

    /// <h> = int_W h, by midpoint quadrature at construction time.
    pub fn mean_h(&self) -> f64 {
        self.mean_h
    }

    pub fn drift_level(&self) -> f64 {
        self.bconst * self.mean_h
    }

    /// Samples the calibration chain 2 C1 b phi(x) <= h(x) <= G(x) on
    /// `n` radii out to the window corner.
    pub fn chain_holds(&self, gw: &GWeight, n: usize) -> bool {
        let r_max = self.window.side() * (self.window.dim() as f64).sqrt() / 2.0;
        (0..n).all(|i| {
            let r = r_max * i as f64 / (n - 1).max(1) as f64;
            let lhs = 2.0 * self.c1 * self.bconst * self.phi.eval(r);
            let h = self.h.eval(r);
            lhs <= h * (1.0 + 1e-12) && h <= gw.eval_r(r) * (1.0 + 1e-12)
        })
    }
}

fn mean_over_window(h: &RadialKernel, window: &Window) -> f64 {
    let dim = window.dim();
    let cells_per_axis: usize = match dim {
        1 => 8192,
        2 => 512,
        _ => 128,
    };
    let hstep = window.side() / cells_per_axis as f64;
    let mut total = 0.0;
    let cell_vol = hstep.powi(dim as i32);
    let n_cells = cells_per_axis.pow(dim as u32);
    for idx in 0..n_cells {
        let mut rem = idx;
        let mut c = [0.0; crate::geometry::MAX_DIM];
        for v in c.iter_mut().take(dim) {
            *v = (rem % cells_per_axis) as f64 * hstep + 0.5 * hstep;
            rem /= cells_per_axis;
        }
        let p = Point(c);
        total += h.eval(window.radius_from_center(&p)) * cell_vol;
    }
    total
}

/// psi(x, y) = phi(x) phi(y) K(|x - y|) with the window metric.
pub fn pair_potential(
    x: &Point,
    y: &Point,
    spec: &LyapunovSpec,
) -> Result<f64, LyapunovError> {
    let q = spec.window.distance(x, y);
    if q == 0.0 {
        return Err(LyapunovError::CoincidentPoints);
    }
    Ok(spec.phi_at(x) * spec.phi_at(y) * spec.k.eval(q))
}

/// W(eta) by exact double loop. Coincident pairs give W = infinity (the
/// configuration is outside the finite-energy set), not an error.
pub fn w_value(cfg: &Configuration, spec: &LyapunovSpec) -> f64 {
    let pts: Vec<&Point> = cfg.iter_live().map(|(_, p)| p).collect();
    let mut w = 0.0;
    for (i, x) in pts.iter().enumerate() {
        w += spec.h_at(x);
        for y in pts.iter().skip(i + 1) {
            let q = spec.window.distance(x, y);
            w += spec.phi_at(x) * spec.phi_at(y) * spec.k.eval(q);
        }
    }
    w
}

/// The twinge increment W(eta + x) - W(eta) = h(x) + sum_y psi(x, y),
/// evaluated against the live points of `cfg` (which must not contain x).
pub fn w_increment(x: &Point, cfg: &Configuration, spec: &LyapunovSpec) -> f64 {
    let mut delta = spec.h_at(x);
    for (_, y) in cfg.iter_live() {
        let q = spec.window.distance(x, y);
        delta += spec.phi_at(x) * spec.phi_at(y) * spec.k.eval(q);
    }
    delta
}

/// Certified sup of the convolution int_W phi(y) K(|x-y|) dy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct C1Certificate {
    /// Fine-grid estimate of the sup.
    pub value: f64,
    /// Two-level grid-refinement error estimate.
    pub error: f64,
}

impl C1Certificate {
    /// Safe-side value: estimate plus the stated grid error.
    pub fn padded(&self) -> f64 {
        self.value + self.error
    }
}

/// Unit directions with surface-measure weights summing to sphere_surface.
fn direction_set(dim: usize, resolution: usize) -> Vec<(f64, [f64; crate::geometry::MAX_DIM])> {
    match dim {
        1 => vec![(1.0, [1.0, 0.0, 0.0]), (1.0, [-1.0, 0.0, 0.0])],
        2 => {
            let n = resolution.max(8);
            let w = 2.0 * std::f64::consts::PI / n as f64;
            (0..n)
                .map(|i| {
                    let th = (i as f64 + 0.5) * 2.0 * std::f64::consts::PI / n as f64;
                    (w, [th.cos(), th.sin(), 0.0])
                })
                .collect()
        }
        _ => {
            // product grid: midpoints in u = cos(theta), uniform azimuth
            let nu = (resolution / 2).max(8);
            let naz = resolution.max(8);
            let w = (2.0 / nu as f64) * (2.0 * std::f64::consts::PI / naz as f64);
            let mut out = Vec::with_capacity(nu * naz);
            for iu in 0..nu {
                let u = -1.0 + (iu as f64 + 0.5) * 2.0 / nu as f64;
                let s = (1.0 - u * u).sqrt();
                for iaz in 0..naz {
                    let az = (iaz as f64 + 0.5) * 2.0 * std::f64::consts::PI / naz as f64;
                    out.push((w, [s * az.cos(), s * az.sin(), u]));
                }
            }
            out
        }
    }
}

/// The convolution at one probe by radial shells graded toward 0. Per shell
/// the angular phi-average A(q) is interpolated linearly between the shell
/// endpoints and integrated against the exact zeroth and first K-moments,
/// so the K(0+) singularity never meets the quadrature and the remaining
/// error is A's curvature over a shell.
fn convolution_at(
    phi: &RadialKernel,
    k: &PairKernel,
    window: &Window,
    x: &Point,
    shells: usize,
    angular: usize,
) -> f64 {
    let dim = window.dim();
    let half = window.side() / 2.0;
    // integration domain for the displacement u = y - x: the window itself
    // for free boundaries, the min-image cube |u|_inf <= side/2 on the torus
    let r_max = match window.boundary() {
        crate::geometry::Boundary::Periodic => half * (dim as f64).sqrt(),
        crate::geometry::Boundary::Free => {
            let mut s = 0.0;
            for a in 0..dim {
                let m = x.0[a].max(window.side() - x.0[a]);
                s += m * m;
            }
            s.sqrt()
        }
    };
    let dirs = direction_set(dim, angular);
    let a_at = |q: f64| -> f64 {
        let mut avg = 0.0;
        for (w, dir) in &dirs {
            let mut inside = true;
            let mut c = [0.0; crate::geometry::MAX_DIM];
            for a in 0..dim {
                let u = q * dir[a];
                c[a] = x.0[a] + u;
                // closed interval: a sample landing exactly on the edge is
                // the limit from inside, and the edge set has measure zero
                inside &= match window.boundary() {
                    crate::geometry::Boundary::Periodic => u.abs() <= half,
                    crate::geometry::Boundary::Free => (0.0..=window.side()).contains(&c[a]),
                };
            }
            if inside {
                let y = window.wrap(Point(c));
                avg += w * phi.eval(window.radius_from_center(&y));
            }
        }
        avg
    };
    let grade = |j: usize| -> f64 {
        let f = j as f64 / shells as f64;
        r_max * f * f
    };
    let mut total = 0.0;
    let mut a_lo = a_at(0.0);
    for j in 0..shells {
        let (lo, hi) = (grade(j), grade(j + 1));
        let a_hi = a_at(hi);
        let m0 = k.radial_mass(hi) - k.radial_mass(lo);
        let m1 = k.radial_first_moment(hi) - k.radial_first_moment(lo);
        // int K(q) q^{d-1} [A(lo) (hi-q) + A(hi) (q-lo)] / (hi-lo) dq
        total += (a_lo * (hi * m0 - m1) + a_hi * (m1 - lo * m0)) / (hi - lo);
        a_lo = a_hi;
    }
    total
}

/// Sup over probe points of int_W phi(y) K(|x-y|) dy, by the radial-shell
/// quadrature above; the error estimate comes from halving both the shell
/// count and the angular resolution (two grid levels).
pub fn certify_c1(
    phi: &RadialKernel,
    k: &PairKernel,
    window: &Window,
) -> Result<C1Certificate, LyapunovError> {
    let dim = window.dim();
    if k.dim() != dim {
        return Err(LyapunovError::BadParameter { name: "pair kernel dim", value: k.dim() as f64 });
    }
    // probe points: the exact center, plus points along the main diagonal
    // for free boundaries (periodic convolutions are translation invariant)
    let mut probes = vec![window.center()];
    if window.boundary() == crate::geometry::Boundary::Free {
        let c = window.center();
        for i in 1..=8 {
            let f = 0.9 * i as f64 / 8.0;
            let mut p = c;
            for v in p.0.iter_mut().take(dim) {
                *v += f * window.side() / 2.0;
            }
            probes.push(p);
        }
    }
    let sup_at = |shells: usize, angular: usize| -> f64 {
        probes
            .iter()
            .map(|x| convolution_at(phi, k, window, x, shells, angular))
            .fold(0.0, f64::max)
    };
    let v_fine = sup_at(2048, 256);
    let v_coarse = sup_at(1024, 128);
    Ok(C1Certificate { value: v_fine, error: (v_fine - v_coarse).abs() })
}

/// Builds the calibrated spec: h = G, phi = c G with c = 1/sqrt(2 C_G b),
/// so the admissibility chain 2 C1 b phi = h = G holds with equality. The
/// padded C_G keeps the chain on the safe side of the grid error.
pub fn calibrate_spec(
    bound: f64,
    k: PairKernel,
    gw: &GWeight,
    window: Window,
) -> Result<LyapunovSpec, LyapunovError> {
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(LyapunovError::BadParameter { name: "bound", value: bound });
    }
    if gw.dim() != window.dim() || k.dim() != window.dim() {
        return Err(LyapunovError::Refused("dimension mismatch".into()));
    }
    let g = RadialKernel::new(
        Profile::PowerLaw { amplitude: 1.0, beta: gw.exponent() },
        window.dim(),
    )?;
    let cg = certify_c1(&g, &k, &window)?;
    let c = 1.0 / (2.0 * cg.padded() * bound).sqrt();
    let phi = RadialKernel::new(
        Profile::PowerLaw { amplitude: c, beta: gw.exponent() },
        window.dim(),
    )?;
    LyapunovSpec::new(window, k, phi, g, c * cg.padded(), c * cg.error, bound)
}

/// Exact generator action on W at a fixed configuration, with the two
/// integrals by midpoint quadrature (d <= 2) or Monte Carlo (d = 3).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LwReport {
    pub lw: f64,
    pub w: f64,
    pub mean_h: f64,
    /// Drift bound b<h> - W/2: LW must sit below it (plus quadrature slack).
    pub drift_bound: f64,
    /// Envelope b<h> + 2W: |LW| must sit below it.
    pub envelope: f64,
    /// Two-level quadrature error estimate (d <= 2), else 0.
    pub quad_err: f64,
    /// Monte Carlo standard error (d = 3), else 0.
    pub mc_se: f64,
}

/// LW(eta) = -sum h(z) - 2 sum_{pairs} psi + int b(x,eta) [h(x) + sum_y
/// psi(x,y)] dx. `cells_per_axis = 0` picks the default 128.
pub fn lw_exact(
    cfg: &Configuration,
    model: &BirthModel,
    spec: &LyapunovSpec,
    cells_per_axis: usize,
) -> Result<LwReport, LyapunovError> {
    if cfg.len() > 500 {
        return Err(LyapunovError::Refused(format!(
            "configuration of {} points is too large for the exact quadrature audit",
            cfg.len()
        )));
    }
    let dim = spec.window.dim();
    let cells = if cells_per_axis == 0 { 128 } else { cells_per_axis };
    let w = w_value(cfg, spec);
    let sum_h: f64 = cfg.iter_live().map(|(_, p)| spec.h_at(p)).sum();
    let pair_sum = w - sum_h;
    let death_part = -sum_h - 2.0 * pair_sum;

    let pts: Vec<(f64, Point)> = cfg.iter_live().map(|(_, p)| (spec.phi_at(p), *p)).collect();

    let (birth_part, quad_err, mc_se);
    if dim <= 2 {
        // Midpoint rule for the smooth parts. The pair term psi(x, y) blows
        // up at each particle, so the cell holding a particle gets the
        // analytic K mass and cells within four widths get 2^d subsamples;
        // plain midpoint there would leave an O(sqrt(h)) error per particle.
        let grid_total = |cells: usize| -> Result<f64, LyapunovError> {
            let hstep = spec.window.side() / cells as f64;
            let half_step = hstep / 2.0;
            let cell_vol = hstep.powi(dim as i32);
            let n_cells = cells.pow(dim as u32);
            let ball_vol = match dim {
                1 => hstep,
                _ => std::f64::consts::PI * half_step * half_step,
            };
            let corner_radius = half_step * (1.0 + (dim as f64).sqrt()) / 2.0;
            let mut total = 0.0;
            for idx in 0..n_cells {
                let mut rem = idx;
                let mut c = [0.0; crate::geometry::MAX_DIM];
                for v in c.iter_mut().take(dim) {
                    *v = (rem % cells) as f64 * hstep + 0.5 * hstep;
                    rem /= cells;
                }
                let mid = Point(c);
                let b = model.birth_rate(&mid, cfg)?;
                if b == 0.0 {
                    continue;
                }
                let phi_mid = spec.phi_at(&mid);
                let mut inc = spec.h_at(&mid) * cell_vol;
                for (phi_y, y) in &pts {
                    if *phi_y == 0.0 {
                        continue;
                    }
                    let u = spec.window.min_image(&mid, y);
                    let in_cell =
                        u[..dim].iter().all(|&ua| (-half_step..half_step).contains(&ua));
                    if in_cell {
                        let mass = if dim == 1 {
                            spec.k.radial_mass(half_step + u[0])
                                + spec.k.radial_mass(half_step - u[0])
                        } else {
                            sphere_surface(dim) * spec.k.radial_mass(half_step)
                                + (cell_vol - ball_vol).max(0.0) * spec.k.eval(corner_radius)
                        };
                        inc += phi_mid * phi_y * mass;
                        continue;
                    }
                    let q = crate::geometry::norm(&u, dim);
                    if q <= 4.0 * hstep {
                        let quarter = hstep / 4.0;
                        for sub in 0..(1usize << dim) {
                            let mut sc = mid.0;
                            for (a, v) in sc.iter_mut().enumerate().take(dim) {
                                *v += if sub >> a & 1 == 1 { quarter } else { -quarter };
                            }
                            let sp = spec.window.wrap(Point(sc));
                            inc += spec.phi_at(&sp)
                                * phi_y
                                * spec.k.eval(spec.window.distance(&sp, y))
                                * (cell_vol / (1 << dim) as f64);
                        }
                    } else {
                        inc += phi_mid * phi_y * spec.k.eval(q) * cell_vol;
                    }
                }
                total += b * inc;
            }
            Ok(total)
        };
        let fine = grid_total(cells)?;
        let coarse = grid_total((cells / 2).max(1))?;
        birth_part = fine;
        quad_err = (fine - coarse).abs();
        mc_se = 0.0;
    } else {
        let samples = (cells * cells).max(10_000);
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0x1f2e_3d4c);
        let mut run = Running::default();
        for _ in 0..samples {
            let mut c = [0.0; crate::geometry::MAX_DIM];
            for v in c.iter_mut().take(dim) {
                *v = rng.random::<f64>() * spec.window.side();
            }
            let x = Point(c);
            let b = model.birth_rate(&x, cfg)?;
            run.push(if b == 0.0 { 0.0 } else { b * w_increment(&x, cfg, spec) });
        }
        birth_part = run.mean() * spec.window.volume();
        mc_se = run.sem() * spec.window.volume();
        quad_err = 0.0;
    }

    let lw = death_part + birth_part;
    let level = spec.drift_level();
    Ok(LwReport {
        lw,
        w,
        mean_h: spec.mean_h(),
        drift_bound: level - w / 2.0,
        envelope: level + 2.0 * w,
        quad_err,
        mc_se,
    })
}

/// Return time to the sublevel set {W < K} after the burn-in delta.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReturnTimeSample {
    pub k_level: f64,
    pub delta: f64,
    pub tau: f64,
    pub censored: bool,
}

/// W along the replayed path, sampled at the given times. W changes only at
/// events and is updated incrementally by the twinge identity.
pub fn w_path(
    log: &EventLog,
    spec: &LyapunovSpec,
    times: &[f64],
) -> Result<Vec<f64>, LyapunovError> {
    if times.windows(2).any(|p| p[0] > p[1]) {
        return Err(LyapunovError::Refused("sample times must be nondecreasing".into()));
    }
    let mut rep = Replayer::new(spec.window, replay_range(spec))?;
    let mut w = 0.0f64;
    let mut out = Vec::with_capacity(times.len());
    let mut i = 0usize;
    for &tau in times {
        while i < log.events.len() && log.events[i].t <= tau {
            let e = &log.events[i];
            w = step_w(&mut rep, w, spec, e.kind, &e.x)?;
            i += 1;
        }
        out.push(w);
    }
    Ok(out)
}

fn replay_range(spec: &LyapunovSpec) -> f64 {
    spec.window.side() / 4.0
}

/// tau_K = inf{t > delta : W(eta_t) < K}. If W is already below K on the
/// piece containing delta, the infimum is delta itself and the sample
/// reports the next representable time. Censored when no crossing occurs
/// in the log's horizon.
pub fn tau_k(
    log: &EventLog,
    spec: &LyapunovSpec,
    k_level: f64,
    delta: f64,
) -> Result<ReturnTimeSample, LyapunovError> {
    if !(k_level > 0.0) {
        return Err(LyapunovError::BadParameter { name: "k_level", value: k_level });
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(LyapunovError::BadParameter { name: "delta", value: delta });
    }
    let mut rep = Replayer::new(spec.window, replay_range(spec))?;
    let mut w = 0.0f64;
    let mut i = 0usize;
    // state at time delta
    while i < log.events.len() && log.events[i].t <= delta {
        let e = &log.events[i];
        w = step_w(&mut rep, w, spec, e.kind, &e.x)?;
        i += 1;
    }
    if w < k_level {
        return Ok(ReturnTimeSample {
            k_level,
            delta,
            tau: f64::next_up(delta),
            censored: false,
        });
    }
    while i < log.events.len() {
        let e = &log.events[i];
        w = step_w(&mut rep, w, spec, e.kind, &e.x)?;
        if e.t > delta && w < k_level {
            return Ok(ReturnTimeSample { k_level, delta, tau: e.t, censored: false });
        }
        i += 1;
    }
    Ok(ReturnTimeSample { k_level, delta, tau: log.t_max.max(delta), censored: true })
}

fn step_w(
    rep: &mut Replayer,
    w: f64,
    spec: &LyapunovSpec,
    kind: EventKind,
    x: &Point,
) -> Result<f64, LyapunovError> {
    match kind {
        EventKind::Birth => {
            let delta = w_increment(x, rep.configuration(), spec);
            rep.apply(0.0, kind, x)?;
            Ok(w + delta)
        }
        EventKind::Death => {
            rep.apply(0.0, kind, x)?;
            let delta = w_increment(x, rep.configuration(), spec);
            Ok(w - delta)
        }
    }
}

/// Ensemble drift audit against the comparison-principle curve
/// e^{-t/2} E W(eta_0) + 2 b <h>.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftReport {
    pub times: Vec<f64>,
    pub mean_w: Vec<f64>,
    pub sem: Vec<f64>,
    pub bound: Vec<f64>,
    pub ok: Vec<bool>,
    pub all_ok: bool,
    pub w0_mean: f64,
    pub w0_sem: f64,
    /// Max ensemble mean over the last quarter of the horizon.
    pub limsup_estimate: f64,
    /// The theorem's asymptotic band 2 b <h>.
    pub band: f64,
}

pub fn drift_audit(
    w0: &[f64],
    w_paths: &[Vec<f64>],
    times: &[f64],
    spec: &LyapunovSpec,
) -> Result<DriftReport, LyapunovError> {
    if w0.len() != w_paths.len() || w_paths.is_empty() {
        return Err(LyapunovError::Refused("ensemble shapes do not match".into()));
    }
    let mut r0 = Running::default();
    for &v in w0 {
        r0.push(v);
    }
    let band = 2.0 * spec.drift_level();
    let mut mean_w = Vec::with_capacity(times.len());
    let mut sems = Vec::with_capacity(times.len());
    let mut bounds = Vec::with_capacity(times.len());
    let mut oks = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let mut r = Running::default();
        for path in w_paths {
            if path.len() != times.len() {
                return Err(LyapunovError::Refused("path length mismatch".into()));
            }
            r.push(path[k]);
        }
        // curve bound with the W0 estimation error folded into the slack
        let bound = (-t / 2.0).exp() * r0.mean() + band;
        let slack = 3.0 * (r.sem() + (-t / 2.0).exp() * r0.sem());
        mean_w.push(r.mean());
        sems.push(r.sem());
        bounds.push(bound);
        oks.push(r.mean() <= bound + slack);
    }
    let tail_from = times.len() - (times.len() / 4).max(1);
    let limsup_estimate =
        mean_w[tail_from..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let all_ok = oks.iter().all(|&b| b);
    Ok(DriftReport {
        times: times.to_vec(),
        mean_w,
        sem: sems,
        bound: bounds,
        ok: oks,
        all_ok,
        w0_mean: r0.mean(),
        w0_sem: r0.sem(),
        limsup_estimate,
        band,
    })
}

impl DriftReport {
    /// CSV with columns (t, statistic, value, ci_low, ci_high, bound).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,statistic,value,ci_low,ci_high,bound\n");
        for k in 0..self.times.len() {
            let (m, e) = (self.mean_w[k], self.sem[k]);
            s.push_str(&format!(
                "{},mean_w,{},{},{},{}\n",
                self.times[k],
                m,
                m - 3.0 * e,
                m + 3.0 * e,
                self.bound[k]
            ));
        }
        s.push_str(&format!(
            ",limsup_estimate,{},,,{}\n",
            self.limsup_estimate, self.band
        ));
        s
    }
}

/// Return-time statistics: mean bound (Foster-Lyapunov) and the exponential
/// moment bound at rate theta.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnReport {
    pub k_level: f64,
    pub delta: f64,
    pub n: usize,
    pub censored: usize,
    pub censored_fraction: f64,
    pub mean_tau: f64,
    pub sem_tau: f64,
    pub mean_bound: f64,
    pub mean_ok: bool,
    pub theta: f64,
    /// K_level > (theta + b<h>)/(1/2 - theta) must hold for the moment bound.
    pub exp_precondition_ok: bool,
    pub mean_exp: f64,
    pub sem_exp: f64,
    pub exp_bound: f64,
    pub exp_ok: bool,
    pub w0_mean: f64,
    pub w0_sem: f64,
}

pub fn return_time_audit(
    samples: &[ReturnTimeSample],
    w0: &[f64],
    spec: &LyapunovSpec,
    theta: f64,
) -> Result<ReturnReport, LyapunovError> {
    if samples.is_empty() || w0.is_empty() {
        return Err(LyapunovError::Refused("empty ensemble".into()));
    }
    let k_level = samples[0].k_level;
    let delta = samples[0].delta;
    if samples.iter().any(|s| s.k_level != k_level || s.delta != delta) {
        return Err(LyapunovError::Refused("mixed return-time parameters".into()));
    }
    let level = spec.drift_level();
    if k_level <= level {
        return Err(LyapunovError::Refused(format!(
            "K = {k_level} does not exceed b<h> = {level}"
        )));
    }
    let mut r0 = Running::default();
    for &v in w0 {
        r0.push(v);
    }
    let mut rt = Running::default();
    let mut re = Running::default();
    let mut censored = 0usize;
    for s in samples {
        if s.censored {
            censored += 1;
        } else {
            rt.push(s.tau);
            re.push((theta * s.tau).exp());
        }
    }
    let kappa = k_level - level;
    let mean_bound = r0.mean() / kappa;
    let mean_ok = rt.n() > 0
        && rt.mean() <= mean_bound + 3.0 * (rt.sem() + r0.sem() / kappa);
    let exp_precondition_ok = theta < 0.5 && k_level > (theta + level) / (0.5 - theta);
    let exp_bound = r0.mean() + 1.0;
    let exp_ok = exp_precondition_ok
        && re.n() > 0
        && re.mean() <= exp_bound + 3.0 * (re.sem() + r0.sem());
    Ok(ReturnReport {
        k_level,
        delta,
        n: samples.len(),
        censored,
        censored_fraction: censored as f64 / samples.len() as f64,
        mean_tau: rt.mean(),
        sem_tau: rt.sem(),
        mean_bound,
        mean_ok,
        theta,
        exp_precondition_ok,
        mean_exp: re.mean(),
        sem_exp: re.sem(),
        exp_bound,
        exp_ok,
        w0_mean: r0.mean(),
        w0_sem: r0.sem(),
    })
}

impl ReturnReport {
    /// CSV with columns (replicate, statistic, value, ci_low, ci_high,
    /// bound); summary rows leave the replicate column empty.
    pub fn to_csv(&self, samples: &[ReturnTimeSample]) -> String {
        let mut s = String::from("replicate,statistic,value,ci_low,ci_high,bound\n");
        for (i, r) in samples.iter().enumerate() {
            let stat = if r.censored { "tau_censored" } else { "tau" };
            s.push_str(&format!("{i},{stat},{},,,{}\n", r.tau, self.mean_bound));
        }
        s.push_str(&format!(
            ",mean_tau,{},{},{},{}\n",
            self.mean_tau,
            self.mean_tau - 3.0 * self.sem_tau,
            self.mean_tau + 3.0 * self.sem_tau,
            self.mean_bound
        ));
        s.push_str(&format!(
            ",exp_moment,{},{},{},{}\n",
            self.mean_exp,
            self.mean_exp - 3.0 * self.sem_exp,
            self.mean_exp + 3.0 * self.sem_exp,
            self.exp_bound
        ));
        s.push_str(&format!(",censored_fraction,{},,,\n", self.censored_fraction));
        s
    }
}

/// Statistical check of the pathwise finiteness decomposition: the running
/// ensemble mean of W stays below E W(eta_0) + E W(Pi) + (t/2) E W(eta_0),
/// where Pi is the dominating Poisson field at intensity b (which bounds
/// the transient intensity b (1 - e^{-t}) at every t).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EwReport {
    pub times: Vec<f64>,
    pub mean_w: Vec<f64>,
    pub bound: Vec<f64>,
    pub ok: Vec<bool>,
    pub all_ok: bool,
    pub w_poisson_mean: f64,
    pub w_poisson_sem: f64,
}

pub fn ew_finiteness_audit(
    w0: &[f64],
    w_paths: &[Vec<f64>],
    times: &[f64],
    spec: &LyapunovSpec,
    seed: u64,
    poisson_reps: usize,
) -> Result<EwReport, LyapunovError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut rpi = Running::default();
    for _ in 0..poisson_reps.max(2) {
        let pts = sample_poisson_field(spec.bconst, &spec.window, &mut rng)?;
        let cfg = Configuration::from_points(spec.window, replay_range(spec), &pts)?;
        rpi.push(w_value(&cfg, spec));
    }
    let mut r0 = Running::default();
    for &v in w0 {
        r0.push(v);
    }
    let mut mean_w = Vec::new();
    let mut bound = Vec::new();
    let mut ok = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        let mut r = Running::default();
        for path in w_paths {
            r.push(path[k]);
        }
        let b = r0.mean() * (1.0 + t / 2.0) + rpi.mean();
        let slack = 3.0 * (r.sem() + r0.sem() * (1.0 + t / 2.0) + rpi.sem());
        mean_w.push(r.mean());
        bound.push(b);
        ok.push(r.mean().is_finite() && r.mean() <= b + slack);
    }
    let all_ok = ok.iter().all(|&b| b);
    Ok(EwReport {
        times: times.to_vec(),
        mean_w,
        bound,
        ok,
        all_ok,
        w_poisson_mean: rpi.mean(),
        w_poisson_sem: rpi.sem(),
    })
}

/// Builds a deterministic cluster around the window center whose W value
/// reaches at least `target`: points are laid out on the first axis at the
/// given spacing, alternating sides. Returns the points and their exact W.
pub fn cluster_for_w(
    spec: &LyapunovSpec,
    target: f64,
    spacing: f64,
) -> Result<(Vec<Point>, f64), LyapunovError> {
    if !(target > 0.0 && spacing > 0.0) {
        return Err(LyapunovError::BadParameter { name: "target/spacing", value: target });
    }
    let mut cfg = Configuration::new(spec.window, replay_range(spec))?;
    let mut pts = Vec::new();
    let mut w = 0.0;
    let center = spec.window.center();
    let mut k = 0usize;
    while w < target {
        let offset = if k % 2 == 0 {
            (k / 2) as f64 * spacing + 0.5 * spacing
        } else {
            -(((k / 2) as f64 + 1.0) * spacing)
        };
        let mut p = center;
        p.0[0] += offset;
        if !spec.window.contains(&p) {
            return Err(LyapunovError::Refused(format!(
                "cluster left the window before reaching W = {target}"
            )));
        }
        w += w_increment(&p, &cfg, spec);
        cfg.insert(p)?;
        pts.push(p);
        k += 1;
        if k > 100_000 {
            return Err(LyapunovError::Refused("cluster target unreachable".into()));
        }
    }
    Ok((pts, w))
}
