//! Birth-rate evaluation for the five models, the per-parent decomposition
//! used by the thinning engine, and certified global/per-parent bounds.

use crate::analysis::{
    crowding_sup, crowding_sup_half, lattice_envelope_bound, survival_yield_sup, AnalysisError,
    LatticeBound,
};
use crate::geometry::{Configuration, GeometryError, ParticleId, Point, Window};
use crate::kernels::{check_conditions, ConditionReport, GWeight, KernelError, RadialKernel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RateError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("certification refused: {0}")]
    CertificationRefused(String),
    #[error("birth rate {rate} exceeds the certified global bound {bound}")]
    BoundViolation { rate: f64, bound: f64 },
    #[error("acceptance probability {0} exceeds 1")]
    AcceptanceViolation(f64),
    #[error("operation unsupported for this model: {0}")]
    Unsupported(String),
}

/// The five birth mechanisms. Death rate is 1 for every model.
#[derive(Debug, Clone)]
pub enum Variant {
    /// b(x, eta) = sum_y a(x-y) (1 + sum_{z != y} c(z-y)) exp(-sum_{z != y} phi(z-y))
    Fecundity {
        a: RadialKernel,
        phi: RadialKernel,
        c: RadialKernel,
    },
    /// b(x, eta) = (sum_y a(x-y)) (1 + sum_z c(x-z)) exp(-sum_z phi(x-z))
    Establishment {
        a: RadialKernel,
        phi: RadialKernel,
        c: RadialKernel,
    },
    /// b(x, eta) = z exp(-sum_y phi(x-y))
    Glauber { z: f64, phi: RadialKernel },
    /// b(x, eta) = bconst
    Surgailis { bconst: f64 },
    /// b(x, eta) = sum_y g(x-y); global rate unbounded, per-parent only
    Contact { g: RadialKernel },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Fecundity { .. } => "fecundity",
            Variant::Establishment { .. } => "establishment",
            Variant::Glauber { .. } => "glauber",
            Variant::Surgailis { .. } => "surgailis",
            Variant::Contact { .. } => "contact",
        }
    }
}

/// What the certification found, for reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifiedBounds {
    pub bound_global: Option<f64>,
    pub bound_per_parent: Option<f64>,
    pub r_p: Option<f64>,
    pub p_found: Option<f64>,
    pub q_found: Option<f64>,
    pub floor_used: Option<(f64, f64)>,
    pub lattice: Option<LatticeBound>,
}

/// A birth model together with its certified bounds. Only `certify`
/// constructs one, so every instance carries valid certificates.
#[derive(Debug, Clone)]
pub struct BirthModel {
    variant: Variant,
    dim: usize,
    gw: GWeight,
    conditions: Option<ConditionReport>,
    bounds: CertifiedBounds,
}

const CONDITION_GRID: usize = 4096;

impl BirthModel {
    /// Validate the kernels, check the admissibility conditions where the
    /// model has any, and compute the certified bounds.
    pub fn certify(variant: Variant, dim: usize, eps: f64) -> Result<Self, RateError> {
        let gw = GWeight::new(dim, eps)?;
        let mut conditions = None;
        let bounds = match &variant {
            Variant::Fecundity { a, phi, c } | Variant::Establishment { a, phi, c } => {
                for k in [a, phi, c] {
                    if k.dim() != dim {
                        return Err(RateError::CertificationRefused(format!(
                            "kernel dimension {} does not match model dimension {dim}",
                            k.dim()
                        )));
                    }
                }
                let report = check_conditions(a, phi, c, &gw, CONDITION_GRID);
                if !report.all_ok() {
                    return Err(RateError::CertificationRefused(format!(
                        "admissibility conditions failed (envelope {}, floor {}, crowding {})",
                        report.envelope_ok, report.floor_ok, report.crowding_ok
                    )));
                }
                if !(a.mass() > 0.0) {
                    return Err(RateError::CertificationRefused(
                        "dispersal kernel has zero mass".into(),
                    ));
                }
                let p = report.p_found.expect("crowding_ok implies p_found");
                let r_p = crowding_sup(p);
                let per_parent = a.mass() * r_p;

                let global = match &variant {
                    Variant::Fecundity { .. } => {
                        // split e^{-phi} evenly between the crowding factor
                        // and the lattice series, then take the best floor
                        let mut best: Option<(f64, (f64, f64), LatticeBound)> = None;
                        for &(alpha, rho) in &report.floor_candidates {
                            let lb = lattice_envelope_bound(
                                dim,
                                report.a_envelope_amp,
                                gw.exponent(),
                                alpha / 2.0,
                                rho,
                            )?;
                            let value = crowding_sup_half(p) * lb.value;
                            if best.as_ref().is_none_or(|(v, _, _)| value < *v) {
                                best = Some((value, (alpha, rho), lb));
                            }
                        }
                        let (value, floor, lb) = best.ok_or_else(|| {
                            RateError::CertificationRefused("no usable interaction floor".into())
                        })?;
                        CertifiedBounds {
                            bound_global: Some(value),
                            bound_per_parent: Some(per_parent),
                            r_p: Some(r_p),
                            p_found: Some(p),
                            q_found: report.q_found,
                            floor_used: Some(floor),
                            lattice: Some(lb),
                        }
                    }
                    _ => {
                        let q = report.q_found.ok_or_else(|| {
                            RateError::CertificationRefused(
                                "dispersal kernel is not dominated by a multiple of the \
                                 interaction kernel"
                                    .into(),
                            )
                        })?;
                        CertifiedBounds {
                            bound_global: Some(q * survival_yield_sup(p)),
                            bound_per_parent: Some(per_parent),
                            r_p: Some(r_p),
                            p_found: Some(p),
                            q_found: Some(q),
                            floor_used: report.phi_floor,
                            lattice: None,
                        }
                    }
                };
                conditions = Some(report);
                global
            }
            Variant::Glauber { z, phi } => {
                if phi.dim() != dim {
                    return Err(RateError::CertificationRefused(
                        "interaction kernel dimension mismatch".into(),
                    ));
                }
                if !(z.is_finite() && *z > 0.0) {
                    return Err(RateError::CertificationRefused(format!("activity z = {z}")));
                }
                CertifiedBounds {
                    bound_global: Some(*z),
                    bound_per_parent: None,
                    r_p: None,
                    p_found: None,
                    q_found: None,
                    floor_used: None,
                    lattice: None,
                }
            }
            Variant::Surgailis { bconst } => {
                if !(bconst.is_finite() && *bconst > 0.0) {
                    return Err(RateError::CertificationRefused(format!(
                        "constant birth rate {bconst}"
                    )));
                }
                CertifiedBounds {
                    bound_global: Some(*bconst),
                    bound_per_parent: None,
                    r_p: None,
                    p_found: None,
                    q_found: None,
                    floor_used: None,
                    lattice: None,
                }
            }
            Variant::Contact { g } => {
                if g.dim() != dim {
                    return Err(RateError::CertificationRefused(
                        "offspring kernel dimension mismatch".into(),
                    ));
                }
                if !(g.mass() > 0.0 && g.mass().is_finite()) {
                    return Err(RateError::CertificationRefused(format!(
                        "offspring kernel mass {}",
                        g.mass()
                    )));
                }
                CertifiedBounds {
                    bound_global: None,
                    bound_per_parent: Some(g.mass()),
                    r_p: None,
                    p_found: None,
                    q_found: None,
                    floor_used: None,
                    lattice: None,
                }
            }
        };
        Ok(BirthModel { variant, dim, gw, conditions, bounds })
    }

    pub fn variant(&self) -> &Variant {
        &self.variant
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gw(&self) -> &GWeight {
        &self.gw
    }

    pub fn global_bound(&self) -> Option<f64> {
        self.bounds.bound_global
    }

    pub fn per_parent_bound(&self) -> Option<f64> {
        self.bounds.bound_per_parent
    }

    pub fn r_p(&self) -> Option<f64> {
        self.bounds.r_p
    }

    pub fn bounds(&self) -> &CertifiedBounds {
        &self.bounds
    }

    pub fn conditions(&self) -> Option<&ConditionReport> {
        self.conditions.as_ref()
    }

    /// The kernel that directs offspring displacements from a parent, when
    /// the model has per-parent structure.
    pub fn displacement_kernel(&self) -> Option<&RadialKernel> {
        match &self.variant {
            Variant::Fecundity { a, .. } | Variant::Establishment { a, .. } => Some(a),
            Variant::Contact { g } => Some(g),
            _ => None,
        }
    }

    /// Largest kernel cutoff: beyond this distance particles do not interact.
    pub fn interaction_range(&self) -> f64 {
        match &self.variant {
            Variant::Fecundity { a, phi, c } | Variant::Establishment { a, phi, c } => {
                a.cutoff().max(phi.cutoff()).max(c.cutoff())
            }
            Variant::Glauber { phi, .. } => phi.cutoff(),
            Variant::Surgailis { .. } => 0.0,
            Variant::Contact { g } => g.cutoff(),
        }
    }

    /// b(x, eta). Asserts the certified global bound on every evaluation for
    /// the bounded models.
    pub fn birth_rate(&self, x: &Point, cfg: &Configuration) -> Result<f64, RateError> {
        let rate = match &self.variant {
            Variant::Fecundity { a, phi, c } => {
                let mut total = 0.0;
                let mut err = None;
                cfg.for_each_neighbor(x, a.cutoff(), None, |id, _, dist| {
                    if err.is_some() {
                        return;
                    }
                    let av = a.eval(dist);
                    if av == 0.0 {
                        return;
                    }
                    let y = *cfg.get(id).expect("neighbor id is live");
                    match fecundity_factor(&y, cfg, phi, c, Some(id)) {
                        Ok(fac) => total += av * fac,
                        Err(e) => err = Some(e),
                    }
                })?;
                if let Some(e) = err {
                    return Err(e);
                }
                total
            }
            Variant::Establishment { a, phi, c } => {
                let mut disp = 0.0;
                cfg.for_each_neighbor(x, a.cutoff(), None, |_, _, dist| {
                    disp += a.eval(dist);
                })?;
                if disp == 0.0 {
                    0.0
                } else {
                    disp * fecundity_factor(x, cfg, phi, c, None)?
                }
            }
            Variant::Glauber { z, phi } => {
                z * (-local_energy(x, cfg, phi, None)?).exp()
            }
            Variant::Surgailis { bconst } => *bconst,
            Variant::Contact { g } => {
                let mut total = 0.0;
                cfg.for_each_neighbor(x, g.cutoff(), None, |_, _, dist| {
                    total += g.eval(dist);
                })?;
                total
            }
        };
        if let Some(bound) = self.bounds.bound_global {
            if rate > bound * (1.0 + 1e-9) {
                return Err(RateError::BoundViolation { rate, bound });
            }
        }
        Ok(rate)
    }

    /// Per-parent proposal intensity: the total rate at which one parent
    /// emits candidate offspring under the thinning envelope.
    pub fn proposal_intensity(&self) -> Result<f64, RateError> {
        self.bounds.bound_per_parent.ok_or_else(|| {
            RateError::Unsupported(format!(
                "{} has no per-parent decomposition",
                self.variant.name()
            ))
        })
    }

    /// Acceptance probability for a candidate at `x` proposed by `parent`,
    /// with the displacement already drawn from the displacement kernel.
    pub fn acceptance(
        &self,
        x: &Point,
        parent: ParticleId,
        cfg: &Configuration,
    ) -> Result<f64, RateError> {
        let acc = match &self.variant {
            Variant::Fecundity { phi, c, .. } => {
                let y = *cfg
                    .get(parent)
                    .ok_or(GeometryError::NoSuchParticle(parent))?;
                let r_p = self.bounds.r_p.expect("certified fecundity has r_p");
                fecundity_factor(&y, cfg, phi, c, Some(parent))? / r_p
            }
            Variant::Establishment { phi, c, .. } => {
                let r_p = self.bounds.r_p.expect("certified establishment has r_p");
                fecundity_factor(x, cfg, phi, c, None)? / r_p
            }
            Variant::Contact { .. } => 1.0,
            other => {
                return Err(RateError::Unsupported(format!(
                    "{} has no per-parent decomposition",
                    other.name()
                )))
            }
        };
        if acc > 1.0 + 1e-12 {
            return Err(RateError::AcceptanceViolation(acc));
        }
        Ok(acc.min(1.0))
    }
}

/// sum over z in eta minus the excluded id of phi(|z - y|).
pub fn local_energy(
    y: &Point,
    cfg: &Configuration,
    phi: &RadialKernel,
    exclude: Option<ParticleId>,
) -> Result<f64, RateError> {
    if phi.is_zero() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    cfg.for_each_neighbor(y, phi.cutoff(), exclude, |_, _, dist| {
        sum += phi.eval(dist);
    })?;
    Ok(sum)
}

/// (1 + sum c(z-y)) exp(-sum phi(z-y)), both sums over eta minus the
/// excluded id.
pub fn fecundity_factor(
    y: &Point,
    cfg: &Configuration,
    phi: &RadialKernel,
    c: &RadialKernel,
    exclude: Option<ParticleId>,
) -> Result<f64, RateError> {
    let radius = phi.cutoff().max(c.cutoff());
    if radius == 0.0 {
        return Ok(1.0);
    }
    let mut s_phi = 0.0;
    let mut s_c = 0.0;
    cfg.for_each_neighbor(y, radius, exclude, |_, _, dist| {
        s_phi += phi.eval(dist);
        s_c += c.eval(dist);
    })?;
    Ok((1.0 + s_c) * (-s_phi).exp())
}

/// Numerical working constant M for |b(x, eta + x') - b(x, eta)| <= M G(x-x'):
/// randomized maximum of the observed ratio, doubled as safety margin.
pub fn estimate_lipschitz<R: rand::Rng>(
    model: &BirthModel,
    window: &Window,
    trials: usize,
    rng: &mut R,
) -> Result<f64, RateError> {
    let dim = model.dim();
    if window.dim() != dim {
        return Err(RateError::CertificationRefused(
            "window dimension does not match the model".into(),
        ));
    }
    let range = model.interaction_range().max(0.5);
    let uniform_point = |rng: &mut R| {
        let mut p = Point::zero();
        for k in 0..dim {
            p.0[k] = rng.random::<f64>() * window.side();
        }
        p
    };
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.random_range(0..=30);
        let mut cfg = Configuration::new(window.clone(), range)?;
        for _ in 0..n {
            cfg.insert(uniform_point(rng))?;
        }
        let x = uniform_point(rng);
        // bias half the probes toward short |x - x'| where G is largest
        let xp = if rng.random::<bool>() {
            let mut p = x;
            for k in 0..dim {
                p.0[k] += (rng.random::<f64>() - 0.5) * 2.0;
            }
            window.wrap(p)
        } else {
            uniform_point(rng)
        };
        let before = model.birth_rate(&x, &cfg)?;
        let mut grown = cfg.clone();
        grown.insert(xp)?;
        let after = model.birth_rate(&x, &grown)?;
        let g = model.gw().eval_r(window.distance(&x, &xp));
        worst = worst.max((after - before).abs() / g);
    }
    Ok(2.0 * worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Boundary;
    use crate::kernels::Profile;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn free_window(dim: usize, side: f64) -> Window {
        Window::new(dim, side, Boundary::Free).unwrap()
    }

    fn tophat(dim: usize, height: f64, radius: f64) -> RadialKernel {
        RadialKernel::new(Profile::TopHat { height, radius }, dim).unwrap()
    }

    fn random_config(
        window: &Window,
        range: f64,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Configuration {
        let mut cfg = Configuration::new(window.clone(), range).unwrap();
        for _ in 0..n {
            let mut p = Point::zero();
            for k in 0..window.dim() {
                p.0[k] = rng.random::<f64>() * window.side();
            }
            cfg.insert(p).unwrap();
        }
        cfg
    }

    #[test]
    fn local_energy_trivial_cases() {
        let w = free_window(1, 10.0);
        let phi = tophat(1, 0.5, 2.0);
        let mut cfg = Configuration::new(w, 2.0).unwrap();
        let id = cfg.insert(Point::from_slice(&[5.0])).unwrap();
        let y = *cfg.get(id).unwrap();
        assert_eq!(local_energy(&y, &cfg, &phi, Some(id)).unwrap(), 0.0);

        let other = cfg.insert(Point::from_slice(&[6.0])).unwrap();
        assert_relative_eq!(local_energy(&y, &cfg, &phi, Some(id)).unwrap(), 0.5);
        let _ = other;
    }

    #[test]
    fn local_energy_matches_brute_force() {
        let w = free_window(2, 8.0);
        let phi = RadialKernel::new(
            Profile::Gaussian { amplitude: 0.7, sigma: 1.1 },
            2,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = random_config(&w, phi.cutoff(), 5, &mut rng);
        let pts: Vec<Point> = cfg.iter_live().map(|(_, p)| *p).collect();
        for (id, y) in cfg.iter_live() {
            let mut brute = 0.0;
            for z in &pts {
                let d = w.distance(y, z);
                if d > 0.0 {
                    brute += phi.eval(d);
                }
            }
            let fast = local_energy(y, &cfg, &phi, Some(id)).unwrap();
            assert_relative_eq!(fast, brute, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn fecundity_factor_hand_values() {
        let w = free_window(1, 10.0);
        let phi = tophat(1, 0.5, 2.0);
        // c = p phi with p = 2
        let c = tophat(1, 1.0, 2.0);
        let mut cfg = Configuration::new(w, 2.0).unwrap();
        let id = cfg.insert(Point::from_slice(&[5.0])).unwrap();
        let y = *cfg.get(id).unwrap();
        assert_relative_eq!(fecundity_factor(&y, &cfg, &phi, &c, Some(id)).unwrap(), 1.0);

        cfg.insert(Point::from_slice(&[6.0])).unwrap();
        let expected = 2.0 * (-0.5f64).exp();
        assert_relative_eq!(
            fecundity_factor(&y, &cfg, &phi, &c, Some(id)).unwrap(),
            expected,
            max_relative = 1e-15
        );
    }

    #[test]
    fn fecundity_factor_bounded_by_crowding_constant() {
        // c <= p phi implies factor <= sup (1+ps)e^{-s}
        let w = free_window(1, 12.0);
        let phi = tophat(1, 0.8, 1.5);
        let c = tophat(1, 1.6, 1.5); // p = 2
        let r_p = crowding_sup(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10_000 {
            let n = rng.random_range(1..=25);
            let cfg = random_config(&w, 1.5, n, &mut rng);
            let (id, y) = cfg.iter_live().next().unwrap();
            let f = fecundity_factor(y, &cfg, &phi, &c, Some(id)).unwrap();
            assert!(f <= r_p * (1.0 + 1e-12), "factor {f} beats r_p {r_p}");
        }
    }

    fn worked_fecundity(dim_b: f64) -> BirthModel {
        // kernels matching the closed-form lattice series: a = B (1+s)^{-2}
        // in d = 1 with eps = 1, phi a top-hat of height 2 so the halved
        // floor is (1, 1), c = 0.6 phi
        let a = RadialKernel::new(
            Profile::PowerLaw { amplitude: dim_b, beta: 2.0 },
            1,
        )
        .unwrap();
        let phi = tophat(1, 2.0, 1.0);
        let c = tophat(1, 1.2, 1.0);
        BirthModel::certify(Variant::Fecundity { a, phi, c }, 1, 1.0).unwrap()
    }

    #[test]
    fn certify_fecundity_composes_crowding_and_lattice_bound() {
        let b = 0.35;
        let model = worked_fecundity(b);
        let exact_series = b * (1.0 + std::f64::consts::PI.powi(2) / 3.0);
        let expected = crowding_sup_half(0.6) * exact_series;
        let got = model.global_bound().unwrap();
        assert_relative_eq!(got, expected, max_relative = 1e-6);
        assert_relative_eq!(model.bounds().p_found.unwrap(), 0.6, max_relative = 1e-12);
        assert_relative_eq!(model.r_p().unwrap(), 1.0, max_relative = 1e-15);
        let (alpha, rho) = model.bounds().floor_used.unwrap();
        assert_relative_eq!(alpha, 2.0, max_relative = 1e-12);
        assert_relative_eq!(rho, 1.0, max_relative = 1e-12);
        // per-parent envelope: mass of a times r_p
        assert_relative_eq!(
            model.per_parent_bound().unwrap(),
            2.0 * b,
            max_relative = 1e-6
        );
    }

    #[test]
    fn certify_trivial_models() {
        let sur = BirthModel::certify(Variant::Surgailis { bconst: 0.5 }, 2, 1.0).unwrap();
        assert_eq!(sur.global_bound(), Some(0.5));
        assert_eq!(sur.per_parent_bound(), None);

        let phi = tophat(2, 1.0, 1.0);
        let gla = BirthModel::certify(Variant::Glauber { z: 2.0, phi }, 2, 1.0).unwrap();
        assert_eq!(gla.global_bound(), Some(2.0));
        assert_eq!(gla.per_parent_bound(), None);

        let g = tophat(2, 0.3, 1.0);
        let mass = g.mass();
        let con = BirthModel::certify(Variant::Contact { g }, 2, 1.0).unwrap();
        assert_eq!(con.global_bound(), None);
        assert_relative_eq!(con.per_parent_bound().unwrap(), mass, max_relative = 1e-12);
    }

    #[test]
    fn certify_establishment_survival_yield() {
        let a = tophat(1, 0.3, 1.0);
        let phi = tophat(1, 2.0, 1.0);
        let c = tophat(1, 0.6, 1.0);
        let model =
            BirthModel::certify(Variant::Establishment { a, phi, c }, 1, 1.0).unwrap();
        // q = 0.15, p = 0.3
        let expected = 0.15 * survival_yield_sup(0.3);
        assert_relative_eq!(model.global_bound().unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn certify_refusals() {
        // establishment with a supported where phi vanishes: no q
        let a = RadialKernel::new(Profile::PowerLaw { amplitude: 0.2, beta: 3.0 }, 1).unwrap();
        let phi = tophat(1, 2.0, 1.0);
        let c = tophat(1, 0.6, 1.0);
        assert!(matches!(
            BirthModel::certify(
                Variant::Establishment { a: a.clone(), phi: phi.clone(), c: c.clone() },
                1,
                1.0
            ),
            Err(RateError::CertificationRefused(_))
        ));

        // crowding violated: c positive where phi vanishes
        let wide_c = tophat(1, 0.6, 3.0);
        assert!(matches!(
            BirthModel::certify(
                Variant::Fecundity { a: a.clone(), phi: phi.clone(), c: wide_c },
                1,
                1.0
            ),
            Err(RateError::CertificationRefused(_))
        ));

        // no interaction floor: phi identically zero
        let zero_phi = RadialKernel::zero(1);
        assert!(matches!(
            BirthModel::certify(
                Variant::Fecundity { a, phi: zero_phi, c },
                1,
                1.0
            ),
            Err(RateError::CertificationRefused(_))
        ));

        assert!(BirthModel::certify(Variant::Surgailis { bconst: 0.0 }, 1, 1.0).is_err());
        assert!(BirthModel::certify(
            Variant::Glauber { z: f64::INFINITY, phi: tophat(1, 1.0, 1.0) },
            1,
            1.0
        )
        .is_err());
    }

    #[test]
    fn birth_rate_trivial_cases() {
        let w = free_window(1, 10.0);
        let empty = Configuration::new(w.clone(), 1.0).unwrap();

        let model = worked_fecundity(0.35);
        assert_eq!(model.birth_rate(&w.center(), &empty).unwrap(), 0.0);

        let sur = BirthModel::certify(Variant::Surgailis { bconst: 0.5 }, 1, 1.0).unwrap();
        assert_eq!(sur.birth_rate(&w.center(), &empty).unwrap(), 0.5);

        let gla = BirthModel::certify(
            Variant::Glauber { z: 2.0, phi: tophat(1, 1.0, 1.0) },
            1,
            1.0,
        )
        .unwrap();
        assert_eq!(gla.birth_rate(&w.center(), &empty).unwrap(), 2.0);

        let g = tophat(1, 0.3, 2.0);
        let con = BirthModel::certify(Variant::Contact { g }, 1, 1.0).unwrap();
        let mut one = Configuration::new(w.clone(), 2.0).unwrap();
        one.insert(Point::from_slice(&[5.5])).unwrap();
        assert_relative_eq!(
            con.birth_rate(&Point::from_slice(&[5.0]), &one).unwrap(),
            0.3,
            max_relative = 1e-15
        );
    }

    #[test]
    fn fecundity_birth_rate_matches_double_loop_oracle() {
        let model = worked_fecundity(0.35);
        let (a, phi, c) = match model.variant() {
            Variant::Fecundity { a, phi, c } => (a.clone(), phi.clone(), c.clone()),
            _ => unreachable!(),
        };
        let w = free_window(1, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let cfg = random_config(&w, model.interaction_range(), 6, &mut rng);
            let pts: Vec<Point> = cfg.iter_live().map(|(_, p)| *p).collect();
            let x = Point::from_slice(&[rng.random::<f64>() * 10.0]);
            let mut oracle = 0.0;
            for (i, y) in pts.iter().enumerate() {
                let mut s_phi = 0.0;
                let mut s_c = 0.0;
                for (j, z) in pts.iter().enumerate() {
                    if i != j {
                        let d = w.distance(y, z);
                        s_phi += phi.eval(d);
                        s_c += c.eval(d);
                    }
                }
                oracle += a.eval(w.distance(&x, y)) * (1.0 + s_c) * (-s_phi).exp();
            }
            let fast = model.birth_rate(&x, &cfg).unwrap();
            assert_relative_eq!(fast, oracle, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn establishment_birth_rate_matches_oracle() {
        let a = tophat(1, 0.3, 1.0);
        let phi = tophat(1, 2.0, 1.0);
        let c = tophat(1, 0.6, 1.0);
        let model = BirthModel::certify(
            Variant::Establishment { a: a.clone(), phi: phi.clone(), c: c.clone() },
            1,
            1.0,
        )
        .unwrap();
        let w = free_window(1, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let cfg = random_config(&w, 1.0, 8, &mut rng);
            let x = Point::from_slice(&[rng.random::<f64>() * 10.0]);
            let pts: Vec<Point> = cfg.iter_live().map(|(_, p)| *p).collect();
            let mut disp = 0.0;
            let mut s_phi = 0.0;
            let mut s_c = 0.0;
            for y in &pts {
                let d = w.distance(&x, y);
                disp += a.eval(d);
                s_phi += phi.eval(d);
                s_c += c.eval(d);
            }
            let oracle = disp * (1.0 + s_c) * (-s_phi).exp();
            let fast = model.birth_rate(&x, &cfg).unwrap();
            assert_relative_eq!(fast, oracle, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn birth_rate_is_local() {
        // truncated dispersal so every kernel has a finite reach
        let a = RadialKernel::with_cutoff(
            Profile::PowerLaw { amplitude: 0.35, beta: 2.0 },
            1,
            4.0,
        )
        .unwrap();
        let phi = tophat(1, 2.0, 1.0);
        let c = tophat(1, 1.2, 1.0);
        let model = BirthModel::certify(Variant::Fecundity { a, phi, c }, 1, 1.0).unwrap();
        let w = free_window(1, 200.0);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut cfg = Configuration::new(w.clone(), model.interaction_range()).unwrap();
        for _ in 0..10 {
            cfg.insert(Point::from_slice(&[100.0 + rng.random::<f64>() * 4.0])).unwrap();
        }
        let x = Point::from_slice(&[101.0]);
        let before = model.birth_rate(&x, &cfg).unwrap();
        // far beyond every cutoff
        cfg.insert(Point::from_slice(&[180.0])).unwrap();
        let after = model.birth_rate(&x, &cfg).unwrap();
        assert_relative_eq!(before, after, max_relative = 1e-12);
    }

    #[test]
    fn global_bound_holds_on_adversarial_configurations() {
        // small-scale version of the acceptance stress test: clustered
        // configurations hunting for a bound violation
        let model = worked_fecundity(0.35);
        let bound = model.global_bound().unwrap();
        let w = free_window(1, 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for case in 0..500 {
            let n = rng.random_range(1..=60);
            let spread = if case % 2 == 0 { 8.0 } else { 0.7 };
            let mut cfg = Configuration::new(w.clone(), model.interaction_range()).unwrap();
            for _ in 0..n {
                cfg.insert(Point::from_slice(&[10.0 + (rng.random::<f64>() - 0.5) * spread]))
                    .unwrap();
            }
            let x = Point::from_slice(&[10.0 + (rng.random::<f64>() - 0.5) * spread]);
            let rate = model.birth_rate(&x, &cfg).unwrap();
            assert!(rate <= bound * (1.0 + 1e-9));
        }
    }

    #[test]
    fn per_parent_thinning_is_consistent() {
        // acceptance in [0, 1] everywhere, and the thinned total never
        // exceeds the proposal total |eta| <a> r_p
        let model = worked_fecundity(0.35);
        let kappa = model.displacement_kernel().unwrap().mass();
        let r_p = model.r_p().unwrap();
        let w = free_window(1, 12.0);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..200 {
            let n = rng.random_range(1..=30);
            let cfg = random_config(&w, model.interaction_range(), n, &mut rng);
            let mut thinned_total = 0.0;
            for (id, _) in cfg.iter_live() {
                let x = Point::from_slice(&[rng.random::<f64>() * 12.0]);
                let acc = model.acceptance(&x, id, &cfg).unwrap();
                assert!((0.0..=1.0).contains(&acc));
                thinned_total += kappa * r_p * acc;
            }
            assert!(thinned_total <= kappa * r_p * n as f64 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn acceptance_unsupported_for_mean_field_models() {
        let sur = BirthModel::certify(Variant::Surgailis { bconst: 0.5 }, 1, 1.0).unwrap();
        let w = free_window(1, 10.0);
        let cfg = Configuration::new(w.clone(), 1.0).unwrap();
        assert!(matches!(
            sur.acceptance(&w.center(), 0, &cfg),
            Err(RateError::Unsupported(_))
        ));
        assert!(matches!(sur.proposal_intensity(), Err(RateError::Unsupported(_))));
    }

    #[test]
    fn lipschitz_estimate_covers_fresh_samples() {
        let model = worked_fecundity(0.35);
        let w = free_window(1, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let m = estimate_lipschitz(&model, &w, 400, &mut rng).unwrap();
        assert!(m.is_finite() && m > 0.0);
        // fresh draws from the same generator family stay under M G(x - x')
        for _ in 0..400 {
            let n = rng.random_range(0..=30);
            let mut cfg = Configuration::new(w.clone(), model.interaction_range()).unwrap();
            for _ in 0..n {
                cfg.insert(Point::from_slice(&[rng.random::<f64>() * 10.0])).unwrap();
            }
            let x = Point::from_slice(&[rng.random::<f64>() * 10.0]);
            let xp = Point::from_slice(&[rng.random::<f64>() * 10.0]);
            let before = model.birth_rate(&x, &cfg).unwrap();
            let mut grown = cfg.clone();
            grown.insert(xp).unwrap();
            let after = model.birth_rate(&x, &grown).unwrap();
            let g = model.gw().eval_r(w.distance(&x, &xp));
            assert!(
                (after - before).abs() <= m * g,
                "lipschitz check failed: delta {} vs M G = {}",
                (after - before).abs(),
                m * g
            );
        }
    }
}
