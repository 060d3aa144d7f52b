//! Command implementations behind the bdproc binary: certify, simulate,
//! and the audits that re-check simulation output against the certified
//! bounds. Replicates run on a rayon pool; every output file has a single
//! writer.

use std::collections::HashMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::analysis::{supermartingale_audit, SupermartingalePath};
use crate::certify::{build_certificates, Certified, CertifyError};
use crate::config::{AlgorithmName, Config, ConfigError, InitialKind};
use crate::engine::{
    derive_seed, path_integral, region_box, run_coupled, run_replicates, sample_statistic,
    Algorithm, EngineError, EventLog, InitialState, SimParams,
};
use crate::geometry::{Boundary, Window};
use crate::lyapunov::{
    cluster_for_w, drift_audit, return_time_audit, tau_k, w_path, LyapunovError, LyapunovSpec,
    ReturnTimeSample,
};
use crate::manifest::{ManifestError, RunManifest};
use crate::stats::Running;

#[derive(Debug, Error)]
pub enum CliError {
    /// Usage or configuration problem: exit code 2.
    #[error("{0}")]
    Usage(String),
    /// A certified inequality or audit assertion failed: exit code 1.
    #[error("{0}")]
    Assertion(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Assertion(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<CertifyError> for CliError {
    fn from(e: CertifyError) -> Self {
        match e {
            CertifyError::Config(c) => CliError::Usage(c.to_string()),
            CertifyError::Failed(m) => CliError::Assertion(format!("certification failed: {m}")),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            // a violated pathwise bound is an assertion failure, not misuse
            EngineError::CouplingViolation { t } => CliError::Assertion(format!(
                "coupling violation: the thinned process left the dominating one at t = {t}"
            )),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<LyapunovError> for CliError {
    fn from(e: LyapunovError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------- certify

pub fn cmd_certify(config_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = Config::load(config_path)?;
    let certified = build_certificates(&cfg)?;
    let dir = out.unwrap_or(&cfg.output.dir).to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    write_certificates(&dir, &certified)?;
    print!("{}", certified.set.text_report());
    println!("wrote {}", dir.join("certificates.json").display());
    Ok(())
}

fn write_certificates(dir: &Path, certified: &Certified) -> Result<(), CliError> {
    let json_path = dir.join("certificates.json");
    let json = serde_json::to_string_pretty(&certified.set)
        .map_err(|e| CliError::Usage(format!("serialize certificates: {e}")))?;
    fs::write(&json_path, json).map_err(|e| io_err(&json_path, e))?;
    let txt_path = dir.join("certificates.txt");
    fs::write(&txt_path, certified.set.text_report()).map_err(|e| io_err(&txt_path, e))?;
    Ok(())
}

// --------------------------------------------------------------- simulate

#[derive(Debug, Default, Clone)]
pub struct SimulateOverrides {
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
    pub algorithm: Option<AlgorithmName>,
    /// Flag: can only turn event emission on, never off.
    pub emit_events: bool,
    pub out: Option<PathBuf>,
}

/// Runs the ensemble a config or an existing manifest describes. Returns
/// the output directory.
pub fn cmd_simulate(path: &Path, ov: &SimulateOverrides) -> Result<PathBuf, CliError> {
    let mut cfg = if path.extension().and_then(|e| e.to_str()) == Some("json") {
        RunManifest::load(path)?.config
    } else {
        Config::load(path)?
    };
    if let Some(n) = ov.replicates {
        cfg.run.replicates = n;
    }
    if let Some(s) = ov.seed {
        cfg.run.seed = s;
    }
    if let Some(a) = ov.algorithm {
        cfg.run.algorithm = a;
    }
    if ov.emit_events {
        cfg.output.emit_events = true;
    }
    if let Some(d) = &ov.out {
        cfg.output.dir = d.clone();
    }
    cfg.validate()?;
    cfg.resolve();

    // certification always precedes simulation
    let certified = build_certificates(&cfg)?;
    let dir = cfg.output.dir.clone();
    let outputs = run_ensemble(&cfg, &certified)?;

    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    write_certificates(&dir, &certified)?;
    let manifest = RunManifest::new(cfg.clone(), certified.set.clone());
    manifest
        .save(&dir.join("manifest.json"))
        .map_err(CliError::from)?;
    let csv_path = dir.join("observables.csv");
    fs::write(&csv_path, &outputs.csv).map_err(|e| io_err(&csv_path, e))?;
    for (name, payload) in &outputs.event_files {
        let p = dir.join(name);
        fs::write(&p, payload).map_err(|e| io_err(&p, e))?;
    }
    println!(
        "wrote {}: {} replicates, {} sample times, algorithm {}{}",
        dir.display(),
        cfg.run.replicates,
        manifest.times.len(),
        cfg.run.algorithm.as_str(),
        if cfg.output.emit_events {
            format!(", {} event logs", outputs.event_files.len())
        } else {
            String::new()
        }
    );
    Ok(dir)
}

struct EnsembleOutputs {
    csv: String,
    event_files: Vec<(String, String)>,
}

/// One replicate's contribution: observable rows (time, name, value) and
/// zero or more event-log payloads keyed by file name.
type RepOut = (Vec<(f64, String, f64)>, Vec<(String, String)>);

fn run_ensemble(cfg: &Config, certified: &Certified) -> Result<EnsembleOutputs, CliError> {
    let window = cfg.build_window()?;
    let times = cfg.resolved_times();
    let initial = build_initial(cfg, certified)?;
    let base = SimParams {
        window,
        t_max: cfg.run.t_max,
        initial,
        seed: cfg.run.seed,
    };
    let model = &certified.model;
    let spec = certified.spec.as_ref();
    let n = cfg.run.replicates;
    let emit = cfg.output.emit_events;
    let box_half = cfg.run.box_half_side;

    let reps: Vec<RepOut> = match cfg.run.algorithm {
        AlgorithmName::Driver | AlgorithmName::PerParent => {
            let alg = match cfg.run.algorithm {
                AlgorithmName::Driver => Algorithm::Driver,
                _ => Algorithm::PerParent,
            };
            let outs: Vec<RepOut> =
                run_replicates(model, &base, alg, n, cfg.run.seed, |_seed, log| {
                    let rows = observe_rows(log, &window, &times, box_half, spec, "")
                        .map_err(|e| EngineError::Replay(e.to_string()))?;
                    let files = if emit {
                        vec![("".to_string(), event_payload(log)?)]
                    } else {
                        Vec::new()
                    };
                    Ok((rows, files))
                })?;
            outs
        }
        AlgorithmName::Coupled => (0..n)
            .into_par_iter()
            .map(|i| -> Result<RepOut, CliError> {
                let seed = derive_seed(cfg.run.seed, "replicate", i as u64);
                let params = SimParams {
                    seed,
                    ..base.clone()
                };
                let coupled = run_coupled(model, &params)?;
                let mut rows = observe_rows(&coupled.eta, &window, &times, box_half, spec, "eta_")?;
                rows.extend(observe_rows(&coupled.xi, &window, &times, box_half, spec, "xi_")?);
                let files = if emit {
                    vec![
                        ("-eta".to_string(), event_payload(&coupled.eta)?),
                        ("-xi".to_string(), event_payload(&coupled.xi)?),
                    ]
                } else {
                    Vec::new()
                };
                Ok((rows, files))
            })
            .collect::<Result<Vec<_>, CliError>>()?,
    };

    let mut csv = String::from("replicate,time,name,value\n");
    let mut event_files = Vec::new();
    for (i, (rows, files)) in reps.into_iter().enumerate() {
        for (t, name, v) in rows {
            csv.push_str(&format!("{i},{t},{name},{v}\n"));
        }
        for (suffix, payload) in files {
            event_files.push((format!("events-rep{i:04}{suffix}.jsonl"), payload));
        }
    }
    Ok(EnsembleOutputs { csv, event_files })
}

fn build_initial(cfg: &Config, certified: &Certified) -> Result<InitialState, CliError> {
    if let Some(init) = cfg.run.initial.to_engine() {
        return Ok(init);
    }
    // cluster: validated to require the [lyapunov] calibration
    debug_assert_eq!(cfg.run.initial.kind, InitialKind::Cluster);
    let spec = certified
        .spec
        .as_ref()
        .expect("validated: cluster initial requires [lyapunov]");
    let target = cfg.run.initial.target_w.expect("validated");
    let spacing = cfg.run.initial.spacing.expect("validated");
    let (points, _w) = cluster_for_w(spec, target, spacing)?;
    Ok(InitialState::Explicit(points))
}

fn event_payload(log: &EventLog) -> Result<String, EngineError> {
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf)?;
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

/// Samples the standard observables off one replayed log. Rows come back
/// grouped by observable, times in order, names prefixed for coupled runs.
fn observe_rows(
    log: &EventLog,
    window: &Window,
    times: &[f64],
    box_half: Option<f64>,
    spec: Option<&LyapunovSpec>,
    prefix: &str,
) -> Result<Vec<(f64, String, f64)>, CliError> {
    let range = window.side() / 4.0;
    let mut rows = Vec::new();
    let pop = sample_statistic(log, window, range, times, |c| c.len() as f64)?;
    rows.extend(
        times
            .iter()
            .zip(pop)
            .map(|(&t, v)| (t, format!("{prefix}population"), v)),
    );
    if let Some(h) = box_half {
        let stat = region_box(window, h);
        let counts = sample_statistic(log, window, range, times, stat)?;
        rows.extend(
            times
                .iter()
                .zip(counts)
                .map(|(&t, v)| (t, format!("{prefix}count_box"), v)),
        );
    }
    if let Some(spec) = spec {
        let ws = w_path(log, spec, times)?;
        rows.extend(
            times
                .iter()
                .zip(ws)
                .map(|(&t, v)| (t, format!("{prefix}w"), v)),
        );
    }
    Ok(rows)
}

// ------------------------------------------------------------------ audit

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditKind {
    Drift,
    Domination,
    ReturnTimes,
    Supermartingale,
    Density,
}

impl std::str::FromStr for AuditKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "drift" => Ok(AuditKind::Drift),
            "domination" => Ok(AuditKind::Domination),
            "return-times" => Ok(AuditKind::ReturnTimes),
            "supermartingale" => Ok(AuditKind::Supermartingale),
            "density" => Ok(AuditKind::Density),
            other => Err(format!(
                "unknown audit kind {other:?} (expected drift, domination, return-times, \
                 supermartingale, or density)"
            )),
        }
    }
}

pub fn cmd_audit(
    dir: &Path,
    kind: AuditKind,
    certificates_override: Option<&Path>,
) -> Result<(), CliError> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(CliError::Usage(format!(
            "no manifest.json in {}; run `bdproc simulate` first",
            dir.display()
        )));
    }
    let manifest = RunManifest::load(&manifest_path)?;
    manifest.config.validate()?;
    match kind {
        AuditKind::Drift => audit_drift(dir, &manifest),
        AuditKind::ReturnTimes => audit_return_times(dir, &manifest),
        AuditKind::Domination => audit_domination(dir, &manifest),
        AuditKind::Supermartingale => audit_supermartingale(dir, &manifest, certificates_override),
        AuditKind::Density => audit_density(dir, &manifest),
    }
}

/// Reads one replicate's event log, restoring the true horizon (the jsonl
/// format does not carry t_max).
fn load_logs(dir: &Path, n: usize, suffix: &str, t_max: f64) -> Result<Vec<EventLog>, CliError> {
    (0..n)
        .map(|i| {
            let path = dir.join(format!("events-rep{i:04}{suffix}.jsonl"));
            let file = fs::File::open(&path).map_err(|_| {
                CliError::Usage(format!(
                    "missing event log {}; rerun `bdproc simulate` with --emit-events \
                     (or set emit_events = true in [output])",
                    path.display()
                ))
            })?;
            let mut log = EventLog::read_jsonl(BufReader::new(file))
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            log.t_max = t_max;
            Ok(log)
        })
        .collect()
}

fn write_report<T: Serialize>(dir: &Path, name: &str, report: &T) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| CliError::Usage(format!("serialize {name}: {e}")))?;
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

/// Rebuilds the calibrated spec the manifest's config describes. The
/// calibration is deterministic, so this reproduces the certified floats.
fn spec_from_manifest(manifest: &RunManifest) -> Result<(Certified, LyapunovSpec), CliError> {
    let certified = build_certificates(&manifest.config)?;
    match certified.spec.clone() {
        Some(spec) => Ok((certified, spec)),
        None => Err(CliError::Usage(
            "the manifest's config has no [lyapunov] section; this audit needs the \
             calibrated weight W"
                .into(),
        )),
    }
}

fn audit_drift(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let (_certified, spec) = spec_from_manifest(manifest)?;
    let n = manifest.config.run.replicates;
    let logs = load_logs(dir, n, "", manifest.config.run.t_max)?;
    let mut times0 = vec![0.0];
    times0.extend_from_slice(&manifest.times);
    let paths0: Vec<Vec<f64>> = logs
        .par_iter()
        .map(|log| w_path(log, &spec, &times0).map_err(CliError::from))
        .collect::<Result<_, _>>()?;
    let w0: Vec<f64> = paths0.iter().map(|v| v[0]).collect();
    let w_paths: Vec<Vec<f64>> = paths0.into_iter().map(|v| v[1..].to_vec()).collect();
    let report = drift_audit(&w0, &w_paths, &manifest.times, &spec)?;
    write_report(dir, "drift_report.json", &report)?;
    let csv_path = dir.join("drift_report.csv");
    fs::write(&csv_path, report.to_csv()).map_err(|e| io_err(&csv_path, e))?;
    let failures = report.ok.iter().filter(|&&b| !b).count();
    println!(
        "drift audit: {} ({} of {} sample times within the comparison curve; \
         limsup estimate {:.6} vs band {:.6})",
        if report.all_ok { "PASS" } else { "FAIL" },
        report.times.len() - failures,
        report.times.len(),
        report.limsup_estimate,
        report.band
    );
    if report.all_ok {
        Ok(())
    } else {
        Err(CliError::Assertion(format!(
            "drift audit failed at {failures} of {} sample times",
            report.times.len()
        )))
    }
}

fn audit_return_times(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let (certified, spec) = spec_from_manifest(manifest)?;
    let ly = certified
        .set
        .lyapunov
        .as_ref()
        .expect("spec implies lyapunov certificates");
    let n = manifest.config.run.replicates;
    let logs = load_logs(dir, n, "", manifest.config.run.t_max)?;
    let samples: Vec<ReturnTimeSample> = logs
        .par_iter()
        .map(|log| tau_k(log, &spec, ly.k_level, ly.delta).map_err(CliError::from))
        .collect::<Result<_, _>>()?;
    let w0: Vec<f64> = logs
        .par_iter()
        .map(|log| w_path(log, &spec, &[0.0]).map(|v| v[0]).map_err(CliError::from))
        .collect::<Result<_, _>>()?;
    let report = return_time_audit(&samples, &w0, &spec, ly.theta)?;
    write_report(dir, "return_report.json", &report)?;
    let csv_path = dir.join("return_report.csv");
    fs::write(&csv_path, report.to_csv(&samples)).map_err(|e| io_err(&csv_path, e))?;
    let mean_line = format!(
        "mean tau {:.6} (+-{:.6}) vs bound {:.6}",
        report.mean_tau, report.sem_tau, report.mean_bound
    );
    let exp_line = if report.exp_precondition_ok {
        format!(
            "exp moment {:.6} (+-{:.6}) vs bound {:.6}",
            report.mean_exp, report.sem_exp, report.exp_bound
        )
    } else {
        "exp moment not applicable (k_level below the precondition)".to_string()
    };
    let pass = report.mean_ok && (!report.exp_precondition_ok || report.exp_ok);
    println!(
        "return-time audit: {} ({mean_line}; {exp_line}; censored {:.4})",
        if pass { "PASS" } else { "FAIL" },
        report.censored_fraction
    );
    if pass {
        Ok(())
    } else {
        Err(CliError::Assertion(format!(
            "return-time audit failed: {mean_line}; {exp_line}"
        )))
    }
}

#[derive(Debug, Serialize)]
struct DominationReport {
    replicates: usize,
    events_checked: u64,
    violations: u64,
    /// Up to the first 100 violations as (replicate, time).
    first_violations: Vec<(usize, f64)>,
    ok: bool,
}

fn audit_domination(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    if manifest.config.run.algorithm != AlgorithmName::Coupled {
        return Err(CliError::Usage(
            "domination audit needs a coupled run; rerun simulate with --algorithm coupled"
                .into(),
        ));
    }
    let n = manifest.config.run.replicates;
    let t_max = manifest.config.run.t_max;
    let eta_logs = load_logs(dir, n, "-eta", t_max)?;
    let xi_logs = load_logs(dir, n, "-xi", t_max)?;
    let per_rep: Vec<(u64, Vec<f64>)> = eta_logs
        .par_iter()
        .zip(xi_logs.par_iter())
        .map(|(eta, xi)| containment_check(eta, xi))
        .collect();
    let mut report = DominationReport {
        replicates: n,
        events_checked: 0,
        violations: 0,
        first_violations: Vec::new(),
        ok: true,
    };
    for (i, (checks, bad)) in per_rep.into_iter().enumerate() {
        report.events_checked += checks;
        report.violations += bad.len() as u64;
        for t in bad {
            if report.first_violations.len() < 100 {
                report.first_violations.push((i, t));
            }
        }
    }
    report.ok = report.violations == 0;
    write_report(dir, "domination_report.json", &report)?;
    println!(
        "domination audit: {} ({} events checked across {} replicates, {} violations)",
        if report.ok { "PASS" } else { "FAIL" },
        report.events_checked,
        report.replicates,
        report.violations
    );
    if report.ok {
        Ok(())
    } else {
        Err(CliError::Assertion(format!(
            "domination audit failed: {} containment violations",
            report.violations
        )))
    }
}

/// Multiset containment of the thinned log in the dominating log, replayed
/// from disk. Tracks the multiplicity surplus of xi over eta per exact
/// coordinate bit pattern; the surplus must never go negative. At equal
/// times, xi births apply before eta births and eta deaths before xi
/// deaths, matching the coupled sampler's event emission.
fn containment_check(eta: &EventLog, xi: &EventLog) -> (u64, Vec<f64>) {
    use crate::engine::EventKind;

    #[derive(Clone, Copy)]
    struct Step<'a> {
        t: f64,
        // 0: xi birth, 1: eta birth, 2: eta death, 3: xi death
        rank: u8,
        x: &'a crate::geometry::Point,
        sign: i64,
    }
    let mut steps: Vec<Step> = Vec::with_capacity(eta.events.len() + xi.events.len());
    for e in &xi.events {
        let (rank, sign) = match e.kind {
            EventKind::Birth => (0, 1),
            EventKind::Death => (3, -1),
        };
        steps.push(Step { t: e.t, rank, x: &e.x, sign });
    }
    for e in &eta.events {
        let (rank, sign) = match e.kind {
            EventKind::Birth => (1, -1),
            EventKind::Death => (2, 1),
        };
        steps.push(Step { t: e.t, rank, x: &e.x, sign });
    }
    steps.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.rank.cmp(&b.rank)));

    let key = |p: &crate::geometry::Point| [p.0[0].to_bits(), p.0[1].to_bits(), p.0[2].to_bits()];
    let mut surplus: HashMap<[u64; 3], i64> = HashMap::new();
    let mut checks = 0u64;
    let mut violations = Vec::new();
    for s in steps {
        let c = surplus.entry(key(s.x)).or_insert(0);
        *c += s.sign;
        checks += 1;
        if *c < 0 {
            violations.push(s.t);
            // keep scanning, but do not double-report the same point
            *c = 0;
        }
    }
    (checks, violations)
}

#[derive(Debug, Serialize)]
struct SupermartingaleAuditFile {
    times: Vec<f64>,
    margin: Vec<f64>,
    sem: Vec<f64>,
    ok: bool,
    first_violation: Option<usize>,
    extinct_fraction: f64,
    wilson_lower: f64,
    certificates_source: String,
}

fn audit_supermartingale(
    dir: &Path,
    manifest: &RunManifest,
    certificates_override: Option<&Path>,
) -> Result<(), CliError> {
    let window = manifest.config.build_window()?;
    if window.boundary() != Boundary::Free {
        return Err(CliError::Usage(
            "supermartingale audit needs a free window: the drift functional is radial \
             about the center and wrap-around would break the convolution bound"
                .into(),
        ));
    }
    let (set, source) = match certificates_override {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let set: crate::certify::CertificateSet = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            (set, p.display().to_string())
        }
        None => (manifest.certificates.clone(), "manifest".to_string()),
    };
    let sub = set.subcriticality.as_ref().ok_or_else(|| {
        CliError::Usage(
            "certificates carry no subcriticality report; the audit needs a model with a \
             per-parent offspring kernel"
                .into(),
        )
    })?;
    let cg = sub.cg.as_ref().ok_or_else(|| {
        CliError::Usage(
            "certificates carry no dominating kernel; pass --certificates pointing at a \
             subcritical run's certificates.json"
                .into(),
        )
    })?;
    let f = sub.fixpoint.as_ref().ok_or_else(|| {
        CliError::Usage(
            "certificates carry no fixpoint; pass --certificates pointing at a subcritical \
             run's certificates.json"
                .into(),
        )
    })?;
    if set.dim != window.dim() {
        return Err(CliError::Usage(format!(
            "certificates are for dimension {}, run is dimension {}",
            set.dim,
            window.dim()
        )));
    }

    let n = manifest.config.run.replicates;
    let logs = load_logs(dir, n, "", manifest.config.run.t_max)?;
    let range = window.side() / 4.0;
    let mut times0 = vec![0.0];
    times0.extend_from_slice(&manifest.times);
    let results: Vec<(SupermartingalePath, bool)> = logs
        .par_iter()
        .map(|log| -> Result<(SupermartingalePath, bool), CliError> {
            let fs = sample_statistic(log, &window, range, &times0, |cfg| {
                cfg.iter_live()
                    .map(|(_, p)| f.eval(window.radius_from_center(p)))
                    .sum()
            })?;
            let ints = path_integral(log, &window, range, &manifest.times, |p| {
                cg.eval(window.radius_from_center(p))
            })?;
            let extinct = log.births() == log.deaths();
            Ok((
                SupermartingalePath {
                    f0: fs[0],
                    f_at: fs[1..].to_vec(),
                    int_cg_at: ints,
                },
                extinct,
            ))
        })
        .collect::<Result<_, _>>()?;
    let extinct_count = results.iter().filter(|(_, e)| *e).count() as u64;
    let paths: Vec<SupermartingalePath> = results.into_iter().map(|(p, _)| p).collect();
    let report = supermartingale_audit(&paths, &manifest.times, extinct_count);
    let file = SupermartingaleAuditFile {
        times: report.times.clone(),
        margin: report.margin.clone(),
        sem: report.sem.clone(),
        ok: report.ok,
        first_violation: report.first_violation,
        extinct_fraction: report.extinct_fraction,
        wilson_lower: report.wilson_lower,
        certificates_source: source,
    };
    write_report(dir, "supermartingale_report.json", &file)?;
    println!(
        "supermartingale audit: {} (max margin {:.6}, extinct fraction {:.4}, \
         wilson lower {:.4})",
        if report.ok { "PASS" } else { "FAIL" },
        report
            .margin
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max),
        report.extinct_fraction,
        report.wilson_lower
    );
    if report.ok {
        Ok(())
    } else {
        Err(CliError::Assertion(format!(
            "supermartingale audit failed at sample time index {:?}",
            report.first_violation
        )))
    }
}

#[derive(Debug, Serialize)]
struct DensityReport {
    /// "exact-curve" for the constant-rate model, "ceiling" otherwise.
    kind: String,
    box_half_side: f64,
    box_volume: f64,
    initial_mean: f64,
    times: Vec<f64>,
    mean: Vec<f64>,
    sem: Vec<f64>,
    reference: Vec<f64>,
    ok: Vec<bool>,
    all_ok: bool,
}

fn audit_density(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let cfg = &manifest.config;
    let window = cfg.build_window()?;
    let b = manifest.certificates.bounds.bound_global.ok_or_else(|| {
        CliError::Usage(
            "density audit needs a certified global bound; the contact model has none".into(),
        )
    })?;
    let half = cfg.run.box_half_side.ok_or_else(|| {
        CliError::Usage(
            "config has no box_half_side, so count_box was never observed; set it under [run]"
                .into(),
        )
    })?;
    let dim = window.dim();
    let box_vol = (2.0 * half).powi(dim as i32);
    let e0 = initial_box_mean(cfg, &window, half, manifest)?;

    let n = cfg.run.replicates;
    let logs = load_logs(dir, n, "", cfg.run.t_max)?;
    let range = window.side() / 4.0;
    let counts: Vec<Vec<f64>> = logs
        .par_iter()
        .map(|log| {
            sample_statistic(log, &window, range, &manifest.times, region_box(&window, half))
                .map_err(CliError::from)
        })
        .collect::<Result<_, _>>()?;

    let exact = cfg.model.variant == crate::config::VariantName::Surgailis;
    let mut report = DensityReport {
        kind: if exact { "exact-curve" } else { "ceiling" }.to_string(),
        box_half_side: half,
        box_volume: box_vol,
        initial_mean: e0,
        times: manifest.times.clone(),
        mean: Vec::new(),
        sem: Vec::new(),
        reference: Vec::new(),
        ok: Vec::new(),
        all_ok: true,
    };
    for (k, &t) in manifest.times.iter().enumerate() {
        let mut r = Running::default();
        for row in &counts {
            r.push(row[k]);
        }
        let (reference, ok) = if exact {
            // immigration at rate b per unit volume, unit death rate:
            // E count = E0 e^{-t} + vol(B) b (1 - e^{-t})
            let curve = e0 * (-t).exp() + box_vol * b * (1.0 - (-t).exp());
            (curve, (r.mean() - curve).abs() <= 3.0 * r.sem() + 1e-9)
        } else {
            // mean-density ceiling: the expected count never exceeds the
            // larger of the stationary level vol(B) b and its start value
            let ceiling = (box_vol * b).max(e0) + 3.0 * r.sem();
            (ceiling, r.mean() <= ceiling + 1e-9)
        };
        report.mean.push(r.mean());
        report.sem.push(r.sem());
        report.reference.push(reference);
        report.ok.push(ok);
        report.all_ok &= ok;
    }
    write_report(dir, "density_report.json", &report)?;
    let csv_path = dir.join("density_report.csv");
    let mut csv = String::from("time,mean,sem,reference,ok\n");
    for k in 0..report.times.len() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            report.times[k], report.mean[k], report.sem[k], report.reference[k], report.ok[k]
        ));
    }
    fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;
    let failures = report.ok.iter().filter(|&&b| !b).count();
    println!(
        "density audit ({}): {} ({} of {} sample times consistent)",
        report.kind,
        if report.all_ok { "PASS" } else { "FAIL" },
        report.times.len() - failures,
        report.times.len()
    );
    if report.all_ok {
        Ok(())
    } else {
        Err(CliError::Assertion(format!(
            "density audit failed at {failures} of {} sample times",
            report.times.len()
        )))
    }
}

/// Exact expected initial count in the centered box, computed from the
/// initial-state description rather than estimated from logs.
fn initial_box_mean(
    cfg: &Config,
    window: &Window,
    half: f64,
    manifest: &RunManifest,
) -> Result<f64, CliError> {
    let dim = window.dim();
    let box_vol = (2.0 * half).powi(dim as i32);
    let in_box = |p: &crate::geometry::Point| {
        let c = window.centered(p);
        c[..dim].iter().all(|v| v.abs() <= half)
    };
    Ok(match cfg.run.initial.kind {
        InitialKind::Empty => 0.0,
        InitialKind::Poisson => cfg.run.initial.intensity.expect("validated") * box_vol,
        InitialKind::Uniform => {
            cfg.run.initial.count.expect("validated") as f64 * box_vol / window.volume()
        }
        InitialKind::Explicit => cfg
            .run
            .initial
            .points
            .as_ref()
            .expect("validated")
            .iter()
            .filter(|p| in_box(&crate::geometry::Point::from_slice(p)))
            .count() as f64,
        InitialKind::Cluster => {
            let (_certified, spec) = spec_from_manifest(manifest)?;
            let target = cfg.run.initial.target_w.expect("validated");
            let spacing = cfg.run.initial.spacing.expect("validated");
            let (points, _) = cluster_for_w(&spec, target, spacing)?;
            points.iter().filter(|p| in_box(p)).count() as f64
        }
    })
}
