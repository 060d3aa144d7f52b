//! Replay of event logs into configurations and path observables.
//!
//! The simulator emits only the event stream; every observable is computed
//! by replaying that stream. Deaths are matched to live particles by the
//! exact bit pattern of their logged position, which the engine guarantees
//! by recording wrapped positions.

use std::collections::HashMap;

use crate::geometry::{Configuration, ParticleId, Point, Window, MAX_DIM};

use super::sim::{EngineError, EventKind, EventLog};

pub struct Replayer {
    cfg: Configuration,
    index: HashMap<[u64; MAX_DIM], Vec<ParticleId>>,
    dim: usize,
}

impl Replayer {
    pub fn new(window: Window, range: f64) -> Result<Self, EngineError> {
        let dim = window.dim();
        Ok(Replayer { cfg: Configuration::new(window, range)?, index: HashMap::new(), dim })
    }

    fn key(&self, x: &Point) -> [u64; MAX_DIM] {
        let mut k = [0u64; MAX_DIM];
        for i in 0..self.dim {
            k[i] = x.0[i].to_bits();
        }
        k
    }

    pub fn apply(&mut self, t: f64, kind: EventKind, x: &Point) -> Result<(), EngineError> {
        match kind {
            EventKind::Birth => {
                let key = self.key(x);
                let id = self.cfg.insert(*x)?;
                let stored = self.cfg.get(id).expect("just inserted");
                if self.key(stored) != key {
                    return Err(EngineError::Replay(format!(
                        "birth at t = {t} was not logged in wrapped form"
                    )));
                }
                self.index.entry(key).or_default().push(id);
                Ok(())
            }
            EventKind::Death => {
                let key = self.key(x);
                let ids = self.index.get_mut(&key).ok_or_else(|| {
                    EngineError::Replay(format!(
                        "death at t = {t} has no live particle at that position"
                    ))
                })?;
                let id = ids.pop().expect("index entries are nonempty");
                if ids.is_empty() {
                    self.index.remove(&key);
                }
                self.cfg.remove(id)?;
                Ok(())
            }
        }
    }

    pub fn configuration(&self) -> &Configuration {
        &self.cfg
    }
}

fn check_times(times: &[f64]) -> Result<(), EngineError> {
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(EngineError::BadParams("sample times must be finite and >= 0".into()));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(EngineError::BadParams("sample times must be nondecreasing".into()));
    }
    Ok(())
}

/// Evaluates `stat` on the replayed configuration at each sample time.
/// Events with `t <= tau` are applied before sampling at `tau`.
pub fn sample_statistic<F>(
    log: &EventLog,
    window: &Window,
    range: f64,
    times: &[f64],
    mut stat: F,
) -> Result<Vec<f64>, EngineError>
where
    F: FnMut(&Configuration) -> f64,
{
    check_times(times)?;
    let mut rep = Replayer::new(*window, range)?;
    let mut out = Vec::with_capacity(times.len());
    let mut i = 0usize;
    let mut last_t = 0.0f64;
    for &tau in times {
        while i < log.events.len() && log.events[i].t <= tau {
            let e = &log.events[i];
            if e.t < last_t {
                return Err(EngineError::Replay("event times decrease".into()));
            }
            last_t = e.t;
            rep.apply(e.t, e.kind, &e.x)?;
            i += 1;
        }
        out.push(stat(rep.configuration()));
    }
    Ok(out)
}

/// Integrated weighted population: at each sample time `tau` returns
/// `int_0^tau sum_{y in eta_s} weight(y) ds`, computed exactly between
/// events. The running sum is recomputed from the live configuration after
/// every event (deterministic iteration order, no drift).
pub fn path_integral<F>(
    log: &EventLog,
    window: &Window,
    range: f64,
    times: &[f64],
    weight: F,
) -> Result<Vec<f64>, EngineError>
where
    F: Fn(&Point) -> f64,
{
    check_times(times)?;
    let mut rep = Replayer::new(*window, range)?;
    let total = |cfg: &Configuration| -> f64 { cfg.iter_live().map(|(_, p)| weight(p)).sum() };
    let mut out = Vec::with_capacity(times.len());
    let mut i = 0usize;
    let mut t_cur = 0.0f64;
    let mut s = 0.0f64;
    let mut integral = 0.0f64;
    for &tau in times {
        while i < log.events.len() && log.events[i].t <= tau {
            let e = &log.events[i];
            if e.t < t_cur {
                return Err(EngineError::Replay("event times decrease".into()));
            }
            integral += s * (e.t - t_cur);
            t_cur = e.t;
            rep.apply(e.t, e.kind, &e.x)?;
            s = total(rep.configuration());
            i += 1;
        }
        integral += s * (tau - t_cur);
        t_cur = tau;
        out.push(integral);
    }
    Ok(out)
}

/// Counting statistic for the axis-aligned box of the given half side
/// centered in the window.
pub fn region_box(window: &Window, half_side: f64) -> impl Fn(&Configuration) -> f64 {
    let w = *window;
    move |cfg: &Configuration| {
        let dim = w.dim();
        cfg.iter_live()
            .filter(|(_, p)| {
                let c = w.centered(p);
                c[..dim].iter().all(|&v| v.abs() <= half_side)
            })
            .count() as f64
    }
}

/// The canonical sample grid `t_max * k / n` for `k = 1..=n`.
pub fn uniform_times(t_max: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|k| t_max * k as f64 / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::sim::{run_driver, EventRecord, InitialState, SimParams};
    use crate::geometry::Boundary;
    use crate::rates::{BirthModel, Variant};

    fn free_line_window() -> Window {
        Window::new(1, 10.0, Boundary::Free).unwrap()
    }

    fn hand_log(events: Vec<(f64, EventKind, f64)>) -> EventLog {
        EventLog {
            events: events
                .into_iter()
                .map(|(t, kind, x)| EventRecord {
                    t,
                    kind,
                    x: Point::from_slice(&[x]),
                    parent: None,
                })
                .collect(),
            accepted: 0,
            rejected: 0,
            escaped: 0,
            t_max: 10.0,
            dim: 1,
        }
    }

    #[test]
    fn replay_matches_event_counts() {
        let model = BirthModel::certify(Variant::Surgailis { bconst: 0.5 }, 1, 1.0).unwrap();
        let w = Window::new(1, 10.0, Boundary::Periodic).unwrap();
        let p = SimParams {
            window: w,
            t_max: 12.0,
            initial: InitialState::PoissonField(0.8),
            seed: 5,
        };
        let log = run_driver(&model, &p).unwrap();
        assert!(log.births() > 0 && log.deaths() > 0);
        let counts = sample_statistic(&log, &w, 1.0, &[12.0], |cfg| cfg.len() as f64).unwrap();
        assert_eq!(counts[0] as usize, log.births() - log.deaths());
        // a box covering the whole torus sees every particle
        let all = sample_statistic(&log, &w, 1.0, &[12.0], region_box(&w, 5.0)).unwrap();
        assert_eq!(all[0], counts[0]);
    }

    #[test]
    fn path_integral_hand_oracle() {
        // birth x=2 at t=0, birth x=3 at t=1, death x=2 at t=2
        // with weight(y) = y: S = 2 on [0,1), 5 on [1,2), 3 from t=2
        let log = hand_log(vec![
            (0.0, EventKind::Birth, 2.0),
            (1.0, EventKind::Birth, 3.0),
            (2.0, EventKind::Death, 2.0),
        ]);
        let w = free_line_window();
        let vals =
            path_integral(&log, &w, 1.0, &[0.5, 1.5, 2.5, 3.0], |p| p.0[0]).unwrap();
        assert_eq!(vals, vec![1.0, 4.5, 8.5, 10.0]);
    }

    #[test]
    fn replay_rejects_unmatched_death() {
        let log = hand_log(vec![
            (0.0, EventKind::Birth, 2.0),
            (1.0, EventKind::Death, 2.5),
        ]);
        let w = free_line_window();
        let err = sample_statistic(&log, &w, 1.0, &[2.0], |c| c.len() as f64).unwrap_err();
        assert!(matches!(err, EngineError::Replay(_)));
    }

    #[test]
    fn duplicate_positions_replay_cleanly() {
        let log = hand_log(vec![
            (0.0, EventKind::Birth, 2.0),
            (0.0, EventKind::Birth, 2.0),
            (1.0, EventKind::Death, 2.0),
            (2.0, EventKind::Death, 2.0),
        ]);
        let w = free_line_window();
        let counts =
            sample_statistic(&log, &w, 1.0, &[0.5, 1.5, 2.5], |c| c.len() as f64).unwrap();
        assert_eq!(counts, vec![2.0, 1.0, 0.0]);
    }

    #[test]
    fn sample_times_must_be_sorted() {
        let log = hand_log(vec![(0.0, EventKind::Birth, 2.0)]);
        let w = free_line_window();
        let err = sample_statistic(&log, &w, 1.0, &[2.0, 1.0], |c| c.len() as f64).unwrap_err();
        assert!(matches!(err, EngineError::BadParams(_)));
    }

    #[test]
    fn uniform_times_hits_endpoint() {
        let ts = uniform_times(8.0, 4);
        assert_eq!(ts, vec![2.0, 4.0, 6.0, 8.0]);
        assert!(uniform_times(1.0, 0).is_empty());
    }
}
