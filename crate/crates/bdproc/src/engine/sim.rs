//! Exact event-driven simulation of the birth-and-death process.
//!
//! Two samplers produce the same law:
//! - the driver algorithm thins a homogeneous space-time proposal stream of
//!   intensity `bound * volume` (needs a certified global bound),
//! - the per-parent algorithm proposes offspring around uniformly chosen
//!   parents at the certified per-parent intensity and thins by the
//!   acceptance probability (works for the unbounded contact model too).
//!
//! `run_coupled` runs the thinned process jointly with the dominating
//! pure-birth-death process on shared randomness and checks containment
//! after every event.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Exp1, Poisson};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    Boundary, Configuration, GeometryError, ParticleId, Point, Window, MAX_DIM,
};
use crate::kernels::{DisplacementSampler, KernelError};
use crate::rates::{BirthModel, RateError, Variant};

use super::rng::DriverStreams;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("coupling violation at t = {t}")]
    CouplingViolation { t: f64 },
    #[error("replay failed: {0}")]
    Replay(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse failed: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Driver,
    PerParent,
}

#[derive(Debug, Clone)]
pub enum InitialState {
    Empty,
    /// Homogeneous Poisson field with the given intensity per unit volume.
    PoissonField(f64),
    /// Exactly this many points, each uniform on the window.
    Uniform(usize),
    Explicit(Vec<Point>),
}

#[derive(Debug, Clone)]
pub struct SimParams {
    pub window: Window,
    pub t_max: f64,
    pub initial: InitialState,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Birth,
    Death,
}

#[derive(Debug, Clone)]
pub struct EventRecord {
    pub t: f64,
    pub kind: EventKind,
    /// Wrapped position inside the window.
    pub x: Point,
    /// Configuration id of the parent for per-parent births.
    pub parent: Option<u64>,
}

/// Time-ordered record of one run. Initial particles appear as births at
/// t = 0. Counters describe the proposal stream: `accepted` and `rejected`
/// count thinning decisions, `escaped` counts per-parent proposals that
/// landed outside a free-boundary window.
#[derive(Debug, Clone)]
pub struct EventLog {
    pub events: Vec<EventRecord>,
    pub accepted: u64,
    pub rejected: u64,
    pub escaped: u64,
    pub t_max: f64,
    pub dim: usize,
}

#[derive(Serialize, Deserialize)]
struct LineEvent {
    t: f64,
    kind: String,
    x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<u64>,
}

impl EventLog {
    pub fn births(&self) -> usize {
        self.events.iter().filter(|e| e.kind == EventKind::Birth).count()
    }

    pub fn deaths(&self) -> usize {
        self.events.iter().filter(|e| e.kind == EventKind::Death).count()
    }

    /// One JSON object per line; floats print in shortest round-trip form,
    /// so reading the file back reproduces every coordinate bit for bit.
    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<(), EngineError> {
        for e in &self.events {
            let line = LineEvent {
                t: e.t,
                kind: match e.kind {
                    EventKind::Birth => "birth".into(),
                    EventKind::Death => "death".into(),
                },
                x: e.x.coords(self.dim).to_vec(),
                parent: e.parent,
            };
            let s = serde_json::to_string(&line)
                .map_err(|err| EngineError::Parse(err.to_string()))?;
            writeln!(w, "{s}")?;
        }
        Ok(())
    }

    /// Reads back the event stream only. Counters and `t_max` are not part
    /// of the line format; they come back zeroed (`t_max` as the last event
    /// time). Replay and observables need nothing else.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<EventLog, EngineError> {
        let mut events = Vec::new();
        let mut dim = 0usize;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let le: LineEvent = serde_json::from_str(&line)
                .map_err(|err| EngineError::Parse(format!("line {}: {err}", lineno + 1)))?;
            if dim == 0 {
                dim = le.x.len();
            }
            if le.x.len() != dim || dim == 0 || dim > MAX_DIM {
                return Err(EngineError::Parse(format!(
                    "line {}: coordinate count {} (expected {dim})",
                    lineno + 1,
                    le.x.len()
                )));
            }
            let kind = match le.kind.as_str() {
                "birth" => EventKind::Birth,
                "death" => EventKind::Death,
                other => {
                    return Err(EngineError::Parse(format!(
                        "line {}: unknown event kind {other:?}",
                        lineno + 1
                    )))
                }
            };
            events.push(EventRecord {
                t: le.t,
                kind,
                x: Point::from_slice(&le.x),
                parent: le.parent,
            });
        }
        let t_max = events.last().map_or(0.0, |e| e.t);
        Ok(EventLog { events, accepted: 0, rejected: 0, escaped: 0, t_max, dim })
    }
}

/// Pending death, ordered by time with a sequence tie-break so heap order is
/// deterministic.
struct Scheduled {
    t: f64,
    seq: u64,
    eta_id: Option<ParticleId>,
    xi_id: Option<ParticleId>,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.t.total_cmp(&other.t) == Ordering::Equal && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap and we want the earliest death
        other
            .t
            .total_cmp(&self.t)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

fn exp1<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(Exp1)
}

fn uniform_point<R: Rng>(window: &Window, rng: &mut R) -> Point {
    let mut c = [0.0; MAX_DIM];
    for v in c.iter_mut().take(window.dim()) {
        *v = rng.random::<f64>() * window.side();
    }
    Point(c)
}

/// Draws a homogeneous Poisson field of the given intensity on the window.
pub fn sample_poisson_field<R: Rng>(
    intensity: f64,
    window: &Window,
    rng: &mut R,
) -> Result<Vec<Point>, EngineError> {
    if !(intensity.is_finite() && intensity >= 0.0) {
        return Err(EngineError::BadParams(format!("poisson intensity {intensity}")));
    }
    let mean = intensity * window.volume();
    if mean == 0.0 {
        return Ok(Vec::new());
    }
    let n = rng.sample(
        Poisson::new(mean).map_err(|e| EngineError::BadParams(format!("poisson: {e}")))?,
    ) as usize;
    Ok((0..n).map(|_| uniform_point(window, rng)).collect())
}

/// Returns true when the model cannot give birth from the empty
/// configuration, so empty + no pending deaths is an absorbing state.
fn trapped_when_empty(model: &BirthModel) -> bool {
    matches!(
        model.variant(),
        Variant::Fecundity { .. } | Variant::Establishment { .. } | Variant::Contact { .. }
    )
}

fn cell_range(model: &BirthModel, window: &Window) -> f64 {
    // cell-list target: the interaction range when it is meaningful,
    // otherwise a window fraction so the grid stays small
    let ir = model.interaction_range();
    ir.clamp(window.side() / 32.0, window.side())
}

fn check_params(model: &BirthModel, params: &SimParams) -> Result<(), EngineError> {
    if params.window.dim() != model.dim() {
        return Err(EngineError::BadParams(format!(
            "window dimension {} does not match model dimension {}",
            params.window.dim(),
            model.dim()
        )));
    }
    if !(params.t_max.is_finite() && params.t_max >= 0.0) {
        return Err(EngineError::BadParams(format!("t_max = {}", params.t_max)));
    }
    Ok(())
}

/// Initial atoms with their positions wrapped into the window. Positions and
/// lifetimes both come from the initial-state stream so the four driver
/// streams carry only the dynamics.
fn initial_points(
    params: &SimParams,
    streams: &mut DriverStreams,
) -> Result<Vec<Point>, EngineError> {
    let pts = match &params.initial {
        InitialState::Empty => Vec::new(),
        InitialState::PoissonField(lam) => {
            sample_poisson_field(*lam, &params.window, &mut streams.initial_state)?
        }
        InitialState::Uniform(n) => (0..*n)
            .map(|_| uniform_point(&params.window, &mut streams.initial_state))
            .collect(),
        InitialState::Explicit(pts) => {
            let mut out = Vec::with_capacity(pts.len());
            for p in pts {
                if !p.is_finite(params.window.dim()) {
                    return Err(EngineError::BadParams("non-finite initial point".into()));
                }
                match params.window.boundary() {
                    Boundary::Periodic => out.push(params.window.wrap(*p)),
                    Boundary::Free => {
                        if !params.window.contains(p) {
                            return Err(EngineError::BadParams(format!(
                                "initial point {:?} outside the free window",
                                p.coords(params.window.dim())
                            )));
                        }
                        out.push(*p);
                    }
                }
            }
            out
        }
    };
    Ok(pts)
}

pub fn run(
    model: &BirthModel,
    params: &SimParams,
    algorithm: Algorithm,
) -> Result<EventLog, EngineError> {
    match algorithm {
        Algorithm::Driver => run_driver(model, params),
        Algorithm::PerParent => run_per_parent(model, params),
    }
}

/// Thinning of a space-time proposal stream of intensity `bound * volume`.
/// Draw order per proposal is fixed (location, mark, lifetime) and the
/// proposal clock is never redrawn on deaths, so the realized proposal
/// stream is an exact homogeneous Poisson process regardless of the
/// configuration history.
pub fn run_driver(model: &BirthModel, params: &SimParams) -> Result<EventLog, EngineError> {
    let bound = model.global_bound().ok_or_else(|| {
        EngineError::Unsupported(format!(
            "{} has no certified global bound; use the per-parent algorithm",
            model.variant().name()
        ))
    })?;
    check_params(model, params)?;
    let window = params.window;
    let dim = window.dim();
    let mut streams = DriverStreams::from_seed(params.seed);
    let mut cfg = Configuration::new(window, cell_range(model, &window))?;
    let mut heap: BinaryHeap<Scheduled> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut events = Vec::new();
    let (mut accepted, mut rejected) = (0u64, 0u64);

    for p in initial_points(params, &mut streams)? {
        let life = exp1(&mut streams.initial_state);
        let id = cfg.insert(p)?;
        let stored = *cfg.get(id).expect("just inserted");
        heap.push(Scheduled { t: life, seq, eta_id: Some(id), xi_id: None });
        seq += 1;
        events.push(EventRecord { t: 0.0, kind: EventKind::Birth, x: stored, parent: None });
    }

    let lam = bound * window.volume();
    let mut next_prop = exp1(&mut streams.proposal_times) / lam;

    loop {
        // absorbing state: nothing alive, nothing scheduled, and the model
        // cannot create from nothing. Every remaining proposal would be
        // rejected, so stop here. This skips those would-be rejections, so
        // the rejected counter undercounts relative to a run that grinds
        // through the full proposal stream; it is still deterministic per
        // seed.
        if cfg.is_empty() && heap.is_empty() && trapped_when_empty(model) {
            break;
        }
        let next_death = heap.peek().map_or(f64::INFINITY, |s| s.t);
        if next_death.min(next_prop) > params.t_max {
            break;
        }
        if next_death <= next_prop {
            let s = heap.pop().expect("peeked");
            let id = s.eta_id.expect("driver deaths carry an id");
            let x = cfg.remove(id)?;
            events.push(EventRecord { t: s.t, kind: EventKind::Death, x, parent: None });
        } else {
            let t = next_prop;
            // fixed draw order: location, acceptance mark, lifetime
            let x = uniform_point(&window, &mut streams.locations);
            let u = streams.u_marks.random::<f64>() * bound;
            let life = exp1(&mut streams.lifetimes);
            let rate = model.birth_rate(&x, &cfg)?;
            if u <= rate {
                let id = cfg.insert(x)?;
                let stored = *cfg.get(id).expect("just inserted");
                heap.push(Scheduled { t: t + life, seq, eta_id: Some(id), xi_id: None });
                seq += 1;
                events.push(EventRecord { t, kind: EventKind::Birth, x: stored, parent: None });
                accepted += 1;
            } else {
                rejected += 1;
            }
            next_prop = t + exp1(&mut streams.proposal_times) / lam;
        }
    }

    Ok(EventLog { events, accepted, rejected, escaped: 0, t_max: params.t_max, dim })
}

/// Per-parent thinning: proposals arrive at rate `kappa * |eta|`, each picks
/// a uniform parent and a displacement from the dispersal kernel, and is
/// accepted with the model's acceptance probability. The waiting time is
/// redrawn after every event, which is valid by memorylessness because the
/// total proposal intensity changes with |eta|.
pub fn run_per_parent(model: &BirthModel, params: &SimParams) -> Result<EventLog, EngineError> {
    let kappa = model.proposal_intensity()?;
    let kernel = model
        .displacement_kernel()
        .ok_or_else(|| {
            EngineError::Unsupported(format!(
                "{} has no displacement kernel",
                model.variant().name()
            ))
        })?;
    let sampler = DisplacementSampler::new(kernel)?;
    check_params(model, params)?;
    let window = params.window;
    let dim = window.dim();
    let mut streams = DriverStreams::from_seed(params.seed);
    let mut cfg = Configuration::new(window, cell_range(model, &window))?;
    let mut heap: BinaryHeap<Scheduled> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut events = Vec::new();
    let (mut accepted, mut rejected, mut escaped) = (0u64, 0u64, 0u64);

    for p in initial_points(params, &mut streams)? {
        let life = exp1(&mut streams.initial_state);
        let id = cfg.insert(p)?;
        let stored = *cfg.get(id).expect("just inserted");
        heap.push(Scheduled { t: life, seq, eta_id: Some(id), xi_id: None });
        seq += 1;
        events.push(EventRecord { t: 0.0, kind: EventKind::Birth, x: stored, parent: None });
    }

    let mut t_cur = 0.0f64;
    loop {
        let n = cfg.len();
        let next_birth = if n > 0 {
            t_cur + exp1(&mut streams.proposal_times) / (kappa * n as f64)
        } else {
            f64::INFINITY
        };
        let next_death = heap.peek().map_or(f64::INFINITY, |s| s.t);
        if next_death.min(next_birth) > params.t_max {
            break;
        }
        if next_death <= next_birth {
            let s = heap.pop().expect("peeked");
            let id = s.eta_id.expect("deaths carry an id");
            let x = cfg.remove(id)?;
            events.push(EventRecord { t: s.t, kind: EventKind::Death, x, parent: None });
            t_cur = s.t;
        } else {
            let t = next_birth;
            let k = streams.locations.random_range(0..n);
            let (pid, ppos) = cfg.iter_live().nth(k).expect("k < live count");
            let ppos = *ppos;
            let disp = sampler.sample(&mut streams.locations);
            let mut c = [0.0; MAX_DIM];
            for i in 0..dim {
                c[i] = ppos.0[i] + disp[i];
            }
            let cand = Point(c);
            // mark and lifetime are drawn before the boundary check so the
            // stream layout is the same under both boundary conditions
            let u = streams.u_marks.random::<f64>();
            let life = exp1(&mut streams.lifetimes);
            if window.boundary() == Boundary::Free && !window.contains(&cand) {
                escaped += 1;
            } else {
                let landed = window.wrap(cand);
                let acc = model.acceptance(&landed, pid, &cfg)?;
                if u <= acc {
                    let id = cfg.insert(landed)?;
                    let stored = *cfg.get(id).expect("just inserted");
                    heap.push(Scheduled { t: t + life, seq, eta_id: Some(id), xi_id: None });
                    seq += 1;
                    events.push(EventRecord {
                        t,
                        kind: EventKind::Birth,
                        x: stored,
                        parent: Some(pid),
                    });
                    accepted += 1;
                } else {
                    rejected += 1;
                }
            }
            t_cur = t;
        }
    }

    Ok(EventLog { events, accepted, rejected, escaped, t_max: params.t_max, dim })
}

/// Joint run of the thinned process eta inside the dominating process xi on
/// shared randomness, with containment checked after every event.
#[derive(Debug, Clone)]
pub struct CoupledLog {
    pub eta: EventLog,
    pub xi: EventLog,
    /// Number of containment checks performed (one per event).
    pub checks: u64,
}

pub fn run_coupled(model: &BirthModel, params: &SimParams) -> Result<CoupledLog, EngineError> {
    let bound = model.global_bound().ok_or_else(|| {
        EngineError::Unsupported(format!(
            "{} has no certified global bound, so there is no dominating process to couple to",
            model.variant().name()
        ))
    })?;
    check_params(model, params)?;
    let window = params.window;
    let dim = window.dim();
    let range = cell_range(model, &window);
    let mut streams = DriverStreams::from_seed(params.seed);
    let mut eta = Configuration::new(window, range)?;
    let mut xi = Configuration::new(window, range)?;
    // eta id -> xi id for every live eta particle
    let mut twin: HashMap<ParticleId, ParticleId> = HashMap::new();
    let mut heap: BinaryHeap<Scheduled> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut eta_events = Vec::new();
    let mut xi_events = Vec::new();
    let (mut eta_accepted, mut eta_rejected) = (0u64, 0u64);
    let mut xi_accepted = 0u64;
    // live xi particles whose eta twin was rejected at birth
    let mut rejected_alive = 0u64;
    let mut checks = 0u64;

    let check = |t: f64,
                 eta: &Configuration,
                 xi: &Configuration,
                 twin: &HashMap<ParticleId, ParticleId>,
                 rejected_alive: u64|
     -> Result<(), EngineError> {
        if eta.len() > xi.len()
            || xi.len() - eta.len() != rejected_alive as usize
            || twin.len() != eta.len()
        {
            return Err(EngineError::CouplingViolation { t });
        }
        for (eid, xid) in twin {
            let (Some(pe), Some(px)) = (eta.get(*eid), xi.get(*xid)) else {
                return Err(EngineError::CouplingViolation { t });
            };
            for i in 0..dim {
                if pe.0[i].to_bits() != px.0[i].to_bits() {
                    return Err(EngineError::CouplingViolation { t });
                }
            }
        }
        Ok(())
    };

    for p in initial_points(params, &mut streams)? {
        let life = exp1(&mut streams.initial_state);
        let eid = eta.insert(p)?;
        let xid = xi.insert(p)?;
        twin.insert(eid, xid);
        let stored = *eta.get(eid).expect("just inserted");
        heap.push(Scheduled { t: life, seq, eta_id: Some(eid), xi_id: Some(xid) });
        seq += 1;
        eta_events.push(EventRecord { t: 0.0, kind: EventKind::Birth, x: stored, parent: None });
        xi_events.push(EventRecord { t: 0.0, kind: EventKind::Birth, x: stored, parent: None });
    }
    check(0.0, &eta, &xi, &twin, rejected_alive)?;
    checks += 1;

    let lam = bound * window.volume();
    let mut next_prop = exp1(&mut streams.proposal_times) / lam;

    loop {
        let next_death = heap.peek().map_or(f64::INFINITY, |s| s.t);
        if next_death.min(next_prop) > params.t_max {
            break;
        }
        let t;
        if next_death <= next_prop {
            let s = heap.pop().expect("peeked");
            t = s.t;
            let xid = s.xi_id.expect("coupled deaths carry a xi id");
            let x = xi.remove(xid)?;
            xi_events.push(EventRecord { t, kind: EventKind::Death, x, parent: None });
            if let Some(eid) = s.eta_id {
                let xe = eta.remove(eid)?;
                twin.remove(&eid);
                eta_events.push(EventRecord { t, kind: EventKind::Death, x: xe, parent: None });
            } else {
                rejected_alive -= 1;
            }
        } else {
            t = next_prop;
            let x = uniform_point(&window, &mut streams.locations);
            let u = streams.u_marks.random::<f64>() * bound;
            let life = exp1(&mut streams.lifetimes);
            // xi accepts every proposal; eta thins against its own state
            let rate = model.birth_rate(&x, &eta)?;
            let xid = xi.insert(x)?;
            let stored = *xi.get(xid).expect("just inserted");
            xi_events.push(EventRecord { t, kind: EventKind::Birth, x: stored, parent: None });
            xi_accepted += 1;
            let eta_id = if u <= rate {
                let eid = eta.insert(x)?;
                twin.insert(eid, xid);
                eta_events.push(EventRecord {
                    t,
                    kind: EventKind::Birth,
                    x: stored,
                    parent: None,
                });
                eta_accepted += 1;
                Some(eid)
            } else {
                eta_rejected += 1;
                rejected_alive += 1;
                None
            };
            heap.push(Scheduled { t: t + life, seq, eta_id, xi_id: Some(xid) });
            seq += 1;
            next_prop = t + exp1(&mut streams.proposal_times) / lam;
        }
        check(t, &eta, &xi, &twin, rejected_alive)?;
        checks += 1;
    }

    Ok(CoupledLog {
        eta: EventLog {
            events: eta_events,
            accepted: eta_accepted,
            rejected: eta_rejected,
            escaped: 0,
            t_max: params.t_max,
            dim,
        },
        xi: EventLog {
            events: xi_events,
            accepted: xi_accepted,
            rejected: 0,
            escaped: 0,
            t_max: params.t_max,
            dim,
        },
        checks,
    })
}
