//! Seeded Monte-Carlo experiment runner.
//!
//! Every realization owns the random stream `(seed, realization index)`, so
//! all sweep points see the same geometry draws for a given index and the
//! output does not depend on how jobs are spread over workers. Aggregation
//! walks the records in order.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::channel::{draw_channel, normalize, ChannelRealization};
use crate::consumption::{network_power, ConsumptionReport, NetworkParams};
use crate::precoding::{
    optimal_precoder, per_antenna_powers, power_map, solve_antenna_powers, zf_precoder,
    zf_residual, AntennaPowerVector, FixedPointOptions, FixedPointReport, PrecoderKind,
    PrecoderSet,
};
use crate::rmt::{pbar_map, rmt_induced_precoder, solve_pbar, RmtInput, RmtOptions};
use crate::scenario::{realization_rng, Scenario, SystemConfig, TargetProfile};
use crate::{Error, Result};

/// Relative ZF constraint violation tolerated on an emitted record.
pub const ZF_TOLERANCE: f64 = 1e-9;
/// Relative gap between `p` and the powers of the precoder built from `p`.
pub const CONSISTENCY_TOLERANCE: f64 = 1e-6;

pub const QUICK_REALIZATIONS: usize = 20;
pub const QUICK_MAX_SUBCARRIERS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    AntennaProfile,
    SubcarrierSweep,
    LoadSweep,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AntennaProfile => "antenna-profile",
            Self::SubcarrierSweep => "subcarrier-sweep",
            Self::LoadSweep => "load-sweep",
        }
    }

    /// Methods evaluated on every realization. The load sweep only needs the
    /// statistical solution and its baseline.
    pub fn methods(self) -> &'static [PrecoderKind] {
        match self {
            Self::AntennaProfile | Self::SubcarrierSweep => &[
                PrecoderKind::Conventional,
                PrecoderKind::ConsumedPowerOptimal,
                PrecoderKind::RmtInduced,
            ],
            Self::LoadSweep => &[PrecoderKind::Conventional, PrecoderKind::RmtInduced],
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub base: SystemConfig,
    /// Q values of the subcarrier sweep.
    pub subcarriers: Vec<usize>,
    /// K values of the load sweep.
    pub users: Vec<usize>,
    /// L values of the load sweep.
    pub aps: Vec<usize>,
    pub realizations: usize,
    pub seed: u64,
    /// Worker threads; 0 lets rayon decide.
    pub workers: usize,
}

impl ExperimentSpec {
    /// One realization at the base configuration.
    pub fn antenna_profile(base: SystemConfig, seed: u64) -> Self {
        Self {
            kind: ExperimentKind::AntennaProfile,
            subcarriers: vec![base.subcarriers],
            users: vec![base.users],
            aps: vec![base.aps],
            base,
            realizations: 1,
            seed,
            workers: 0,
        }
    }

    pub fn subcarrier_sweep(base: SystemConfig, subcarriers: Vec<usize>, realizations: usize, seed: u64) -> Self {
        Self {
            kind: ExperimentKind::SubcarrierSweep,
            users: vec![base.users],
            aps: vec![base.aps],
            base,
            subcarriers,
            realizations,
            seed,
            workers: 0,
        }
    }

    pub fn load_sweep(
        base: SystemConfig,
        users: Vec<usize>,
        aps: Vec<usize>,
        realizations: usize,
        seed: u64,
    ) -> Self {
        Self {
            kind: ExperimentKind::LoadSweep,
            subcarriers: vec![base.subcarriers],
            base,
            users,
            aps,
            realizations,
            seed,
            workers: 0,
        }
    }

    /// Defaults used by the CLI when no sweep values are given.
    pub fn default_for(kind: ExperimentKind, base: SystemConfig, seed: u64) -> Self {
        match kind {
            ExperimentKind::AntennaProfile => Self::antenna_profile(base, seed),
            ExperimentKind::SubcarrierSweep => {
                Self::subcarrier_sweep(base, (0..=8).map(|e| 1 << e).collect(), 100, seed)
            }
            ExperimentKind::LoadSweep => {
                Self::load_sweep(base, (1..=19).collect(), (2..=10).collect(), 100, seed)
            }
        }
    }

    /// Desk-scale profile: Q capped at 64 and at most 20 realizations.
    pub fn quick(mut self) -> Self {
        self.subcarriers.retain(|&q| q <= QUICK_MAX_SUBCARRIERS);
        if self.subcarriers.is_empty() {
            self.subcarriers.push(QUICK_MAX_SUBCARRIERS);
        }
        self.base.subcarriers = self.base.subcarriers.min(QUICK_MAX_SUBCARRIERS);
        self.realizations = self.realizations.min(QUICK_REALIZATIONS);
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.realizations == 0 {
            return Err(Error::Config("at least one realization is required".into()));
        }
        if self.subcarriers.is_empty() || self.users.is_empty() || self.aps.is_empty() {
            return Err(Error::Config("sweep lists must not be empty".into()));
        }
        if self.subcarriers.contains(&0) || self.users.contains(&0) || self.aps.contains(&0) {
            return Err(Error::Config("sweep values must be positive".into()));
        }
        if self.kind == ExperimentKind::LoadSweep {
            let m = self.base.antennas[0];
            if self.base.antennas.iter().any(|&x| x != m) {
                return Err(Error::Config("the load sweep needs the same M at every AP".into()));
            }
        }
        Ok(())
    }

    /// Sweep points in output order, followed by the points skipped because
    /// `K ≥ N`.
    pub fn sweep_points(&self) -> (Vec<SweepPoint>, Vec<SweepPoint>) {
        let mut points = Vec::new();
        match self.kind {
            ExperimentKind::AntennaProfile => points.push(SweepPoint::from(&self.base)),
            ExperimentKind::SubcarrierSweep => {
                for &q in &self.subcarriers {
                    points.push(SweepPoint {
                        subcarriers: q,
                        ..SweepPoint::from(&self.base)
                    });
                }
            }
            ExperimentKind::LoadSweep => {
                for &aps in &self.aps {
                    for &users in &self.users {
                        points.push(SweepPoint {
                            aps,
                            users,
                            subcarriers: self.base.subcarriers,
                        });
                    }
                }
            }
        }
        let m = self.base.antennas[0];
        points.into_iter().partition(|p| match self.kind {
            ExperimentKind::LoadSweep => p.users < p.aps * m,
            _ => p.users <= self.base.total_antennas(),
        })
    }

    pub fn config_at(&self, point: &SweepPoint) -> SystemConfig {
        let mut cfg = self.base.clone();
        if point.aps != cfg.aps {
            cfg = cfg.with_aps(point.aps, cfg.antennas[0]);
        }
        cfg.with_users(point.users).with_subcarriers(point.subcarriers)
    }

    /// Short SHA-256 of everything that determines the output.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.kind.as_str());
        h.update(self.base.to_toml_string()?);
        for list in [&self.subcarriers, &self.users, &self.aps] {
            h.update(format!("{list:?}"));
        }
        h.update(self.realizations.to_le_bytes());
        h.update(self.seed.to_le_bytes());
        Ok(hex_prefix(&h.finalize()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SweepPoint {
    pub aps: usize,
    pub users: usize,
    pub subcarriers: usize,
}

impl From<&SystemConfig> for SweepPoint {
    fn from(cfg: &SystemConfig) -> Self {
        Self {
            aps: cfg.aps,
            users: cfg.users,
            subcarriers: cfg.subcarriers,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub kind: PrecoderKind,
    pub powers: AntennaPowerVector,
    pub report: ConsumptionReport,
    pub zf_residual: f64,
    /// Solver diagnostics of the optimal and statistical solutions.
    pub fixed_point: Option<FixedPointReport>,
    /// `max|p̂ − p| / max p` between the solver powers and the powers of the
    /// precoder built from them.
    pub consistency_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordStatus {
    Ok,
    SolverError(String),
    InvariantViolation(String),
}

impl RecordStatus {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::SolverError(_) => "solver-error",
            Self::InvariantViolation(_) => "invariant-violation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealizationRecord {
    pub point: SweepPoint,
    pub realization: usize,
    pub seed: u64,
    /// Short SHA-256 of AP/user positions, LSF coefficients and targets.
    pub digest: String,
    pub antennas: Vec<usize>,
    pub outcomes: Vec<MethodOutcome>,
    pub status: RecordStatus,
}

impl RealizationRecord {
    pub fn outcome(&self, kind: PrecoderKind) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub point: SweepPoint,
    pub method: PrecoderKind,
    pub metric: &'static str,
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloResult {
    pub kind: ExperimentKind,
    pub records: Vec<RealizationRecord>,
    pub aggregates: Vec<Aggregate>,
    pub skipped: Vec<SweepPoint>,
}

impl MonteCarloResult {
    pub fn violations(&self) -> impl Iterator<Item = &RealizationRecord> {
        self.records
            .iter()
            .filter(|r| matches!(r.status, RecordStatus::InvariantViolation(_)))
    }

    pub fn aggregate(&self, point: &SweepPoint, method: PrecoderKind, metric: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.point == *point && a.method == method && a.metric == metric)
    }
}

fn hex_prefix(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn scenario_digest(scenario: &Scenario) -> String {
    let mut h = Sha256::new();
    let g = &scenario.geometry;
    for pos in g.ap_positions.iter().chain(&g.user_positions) {
        h.update(pos[0].to_le_bytes());
        h.update(pos[1].to_le_bytes());
    }
    for b in scenario.large_scale.beta.iter() {
        h.update(b.to_le_bytes());
    }
    for g in &scenario.targets.gamma {
        h.update(g.to_le_bytes());
    }
    hex_prefix(&h.finalize())
}

/// Largest `|p̂_n − p_n| / max p` between powers and the powers of the
/// precoder they induce.
pub fn self_consistency_gap(p: &AntennaPowerVector, ws: &PrecoderSet) -> f64 {
    let induced = per_antenna_powers(ws);
    let max = p.p.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return f64::INFINITY;
    }
    p.p.iter()
        .zip(&induced.p)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / max
}

fn outcome(
    kind: PrecoderKind,
    ch: &ChannelRealization,
    targets: &TargetProfile,
    cfg: &SystemConfig,
    ws: &PrecoderSet,
    fixed_point: Option<FixedPointReport>,
) -> Result<MethodOutcome> {
    let powers = per_antenna_powers(ws);
    let report = network_power(&powers, &cfg.antennas, &NetworkParams::from(cfg))?.with_rates(targets);
    Ok(MethodOutcome {
        kind,
        zf_residual: zf_residual(ch, ws, targets, cfg.noise_power),
        powers,
        report,
        fixed_point,
        consistency_gap: None,
    })
}

/// Draws realization `index` at `cfg` and evaluates `methods` on it.
pub fn evaluate_realization(
    cfg: &SystemConfig,
    seed: u64,
    index: usize,
    methods: &[PrecoderKind],
) -> RealizationRecord {
    let mut record = RealizationRecord {
        point: SweepPoint::from(cfg),
        realization: index,
        seed,
        digest: String::new(),
        antennas: cfg.antennas.clone(),
        outcomes: Vec::new(),
        status: RecordStatus::Ok,
    };
    if let Err(e) = run_methods(cfg, seed, index, methods, &mut record) {
        record.status = RecordStatus::SolverError(e.to_string());
        return record;
    }
    if let Some(msg) = check_invariants(&record) {
        record.status = RecordStatus::InvariantViolation(msg);
    }
    record
}

fn run_methods(
    cfg: &SystemConfig,
    seed: u64,
    index: usize,
    methods: &[PrecoderKind],
    record: &mut RealizationRecord,
) -> Result<()> {
    let mut rng = realization_rng(seed, index as u64);
    let scenario = Scenario::draw(cfg, &mut rng)?;
    record.digest = scenario_digest(&scenario);
    let ch = draw_channel(&scenario.large_scale.beta, &scenario.correlation, cfg.subcarriers, &mut rng)?;
    let targets = &scenario.targets;
    let noise = cfg.noise_power;

    for &kind in methods {
        let done = match kind {
            PrecoderKind::Conventional => {
                let ws = zf_precoder(&ch, targets, noise)?;
                outcome(kind, &ch, targets, cfg, &ws, None)?
            }
            PrecoderKind::ConsumedPowerOptimal => {
                let nch = normalize(&ch, targets, noise)?;
                let (p, rep) = solve_antenna_powers(&nch, &FixedPointOptions::default())?;
                let ws = optimal_precoder(&ch, targets, noise, &p)?;
                let mut out = outcome(kind, &ch, targets, cfg, &ws, Some(rep))?;
                out.consistency_gap = Some(self_consistency_gap(&p, &ws));
                out
            }
            PrecoderKind::RmtInduced => {
                let input = RmtInput::from_statistics(&scenario.large_scale.beta, &scenario.correlation, targets, noise)?;
                let opts = RmtOptions {
                    activation_threshold_rel: cfg.activation_threshold_rel,
                    ..RmtOptions::default()
                };
                let (p_ap, rep) = solve_pbar(&input, &opts)?;
                let ws = rmt_induced_precoder(&ch, targets, noise, &p_ap)?;
                outcome(kind, &ch, targets, cfg, &ws, Some(rep))?
            }
        };
        record.outcomes.push(done);
    }

    if let Some(base) = record.outcome(PrecoderKind::Conventional).map(|o| o.report.clone()) {
        for o in record.outcomes.iter_mut().filter(|o| o.kind != PrecoderKind::Conventional) {
            o.report = std::mem::take(&mut o.report).with_gain(&base)?;
        }
    }
    Ok(())
}

fn check_invariants(record: &RealizationRecord) -> Option<String> {
    for o in &record.outcomes {
        if !(o.zf_residual <= ZF_TOLERANCE) {
            return Some(format!("{} ZF residual {:.3e}", o.kind.as_str(), o.zf_residual));
        }
    }
    let opt = record.outcome(PrecoderKind::ConsumedPowerOptimal)?;
    let converged = opt.fixed_point.as_ref()?.converged;
    match opt.consistency_gap {
        Some(gap) if converged && !(gap <= CONSISTENCY_TOLERANCE) => {
            Some(format!("optimal self-consistency gap {gap:.3e}"))
        }
        _ => None,
    }
}

/// Runs every realization of every sweep point on a pool of `spec.workers`
/// threads.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<MonteCarloResult> {
    spec.validate()?;
    let (points, skipped) = spec.sweep_points();
    let methods = spec.kind.methods();
    let jobs: Vec<(SystemConfig, usize)> = points
        .iter()
        .flat_map(|pt| {
            let cfg = spec.config_at(pt);
            (0..spec.realizations).map(move |r| (cfg.clone(), r))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let records: Vec<RealizationRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|(cfg, r)| evaluate_realization(cfg, spec.seed, *r, methods))
            .collect()
    });
    let aggregates = aggregate(&points, methods, &records);
    Ok(MonteCarloResult {
        kind: spec.kind,
        records,
        aggregates,
        skipped,
    })
}

pub fn run_antenna_profile(spec: &ExperimentSpec) -> Result<MonteCarloResult> {
    expect_kind(spec, ExperimentKind::AntennaProfile)?;
    run_experiment(spec)
}

pub fn run_subcarrier_sweep(spec: &ExperimentSpec) -> Result<MonteCarloResult> {
    expect_kind(spec, ExperimentKind::SubcarrierSweep)?;
    run_experiment(spec)
}

pub fn run_load_sweep(spec: &ExperimentSpec) -> Result<MonteCarloResult> {
    expect_kind(spec, ExperimentKind::LoadSweep)?;
    run_experiment(spec)
}

fn expect_kind(spec: &ExperimentSpec, kind: ExperimentKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::Config(format!("expected a {kind} spec, got {}", spec.kind)));
    }
    Ok(())
}

fn metric_values(record: &RealizationRecord, o: &MethodOutcome) -> Vec<(&'static str, f64)> {
    let r = &o.report;
    let mut v = vec![
        ("p_tx", r.p_tx),
        ("p_pas", r.p_pas),
        ("p_net", r.p_net),
        ("active_aps", r.active_ap_count as f64),
    ];
    if let (Some(net), Some(pas)) = (r.gain_net, r.gain_pas) {
        v.push(("gain_net", net));
        v.push(("gain_pas", pas));
    }
    if o.kind == PrecoderKind::RmtInduced {
        if let Some(opt) = record.outcome(PrecoderKind::ConsumedPowerOptimal) {
            v.push(("pas_ratio", r.p_pas / opt.report.p_pas));
        }
    }
    v
}

/// Mean and standard error of every metric over the `ok` records of each
/// point, summed in realization order.
pub fn aggregate(points: &[SweepPoint], methods: &[PrecoderKind], records: &[RealizationRecord]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for point in points {
        let ok: Vec<&RealizationRecord> = records
            .iter()
            .filter(|r| r.point == *point && r.status == RecordStatus::Ok)
            .collect();
        for &method in methods {
            let mut columns: Vec<(&'static str, Vec<f64>)> = Vec::new();
            for rec in &ok {
                let Some(o) = rec.outcome(method) else { continue };
                for (name, value) in metric_values(rec, o) {
                    match columns.iter_mut().find(|(n, _)| *n == name) {
                        Some((_, vals)) => vals.push(value),
                        None => columns.push((name, vec![value])),
                    }
                }
            }
            for (metric, vals) in columns {
                let (mean, stderr) = mean_stderr(&vals);
                out.push(Aggregate {
                    point: *point,
                    method,
                    metric,
                    mean,
                    stderr,
                    count: vals.len(),
                });
            }
        }
    }
    out
}

pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub const AGGREGATE_HEADER: &str = "aps,users,subcarriers,method,metric,mean,stderr,count";
pub const RECORD_HEADER: &str = "aps,users,subcarriers,realization,seed,digest,status,method,\
p_tx,p_pas,p_net,active_aps,gain_net,gain_pas,zf_residual,iterations,converged,final_residual";
pub const PROFILE_HEADER: &str = "antenna,ap,optimal,conventional,rmt";

/// Shortest round-trip representation, scientific outside `[1e-3, 1e7)`.
fn num(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-3..1e7).contains(&a) || !a.is_finite() {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}

fn opt_num(x: Option<f64>) -> String {
    x.map_or_else(String::new, num)
}

pub fn write_aggregates_csv<W: Write>(result: &MonteCarloResult, mut out: W) -> Result<()> {
    writeln!(out, "{AGGREGATE_HEADER}")?;
    for a in &result.aggregates {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            a.point.aps,
            a.point.users,
            a.point.subcarriers,
            a.method.as_str(),
            a.metric,
            num(a.mean),
            num(a.stderr),
            a.count
        )?;
    }
    Ok(())
}

pub fn write_records_csv<W: Write>(result: &MonteCarloResult, mut out: W) -> Result<()> {
    writeln!(out, "{RECORD_HEADER}")?;
    for r in &result.records {
        let p = r.point;
        let prefix = format!(
            "{},{},{},{},{},{},{}",
            p.aps, p.users, p.subcarriers, r.realization, r.seed, r.digest, r.status.label()
        );
        if r.outcomes.is_empty() {
            writeln!(out, "{prefix},,,,,,,,,,,")?;
        }
        for o in &r.outcomes {
            let rep = &o.report;
            let (it, conv, res) = o.fixed_point.as_ref().map_or((String::new(), String::new(), String::new()), |f| {
                (f.iterations.to_string(), f.converged.to_string(), num(f.final_residual))
            });
            writeln!(
                out,
                "{prefix},{},{},{},{},{},{},{},{},{it},{conv},{res}",
                o.kind.as_str(),
                num(rep.p_tx),
                num(rep.p_pas),
                num(rep.p_net),
                rep.active_ap_count,
                opt_num(rep.gain_net),
                opt_num(rep.gain_pas),
                num(o.zf_residual),
            )?;
        }
    }
    Ok(())
}

/// Per-antenna band powers of the first record, one row per antenna.
pub fn write_antenna_profile_csv<W: Write>(result: &MonteCarloResult, mut out: W) -> Result<()> {
    writeln!(out, "{PROFILE_HEADER}")?;
    let Some(rec) = result.records.first() else { return Ok(()) };
    let column = |kind| rec.outcome(kind).map(|o: &MethodOutcome| &o.powers.p);
    let cols = [
        column(PrecoderKind::ConsumedPowerOptimal),
        column(PrecoderKind::Conventional),
        column(PrecoderKind::RmtInduced),
    ];
    let mut n = 0;
    for (l, &m) in rec.antennas.iter().enumerate() {
        for _ in 0..m {
            let cells: Vec<String> = cols.iter().map(|c| opt_num(c.map(|p| p[n]))).collect();
            writeln!(out, "{n},{l},{}", cells.join(","))?;
            n += 1;
        }
    }
    Ok(())
}

/// Sidecar metadata: digest, seed, versions and anything skipped or failed.
pub fn write_metadata<W: Write>(spec: &ExperimentSpec, result: &MonteCarloResult, mut out: W) -> Result<()> {
    writeln!(out, "experiment = {}", spec.kind)?;
    writeln!(out, "config_digest = {}", spec.digest()?)?;
    writeln!(out, "seed = {}", spec.seed)?;
    writeln!(out, "realizations = {}", spec.realizations)?;
    writeln!(out, "cfmimo_version = {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(out, "nalgebra_version = 0.33")?;
    writeln!(out, "records = {}", result.records.len())?;
    for status in ["ok", "solver-error", "invariant-violation"] {
        let n = result.records.iter().filter(|r| r.status.label() == status).count();
        writeln!(out, "records_{} = {n}", status.replace('-', "_"))?;
    }
    for p in &result.skipped {
        writeln!(out, "skipped = aps {} users {} subcarriers {} (K >= N)", p.aps, p.users, p.subcarriers)?;
    }
    for r in &result.records {
        if let RecordStatus::SolverError(msg) | RecordStatus::InvariantViolation(msg) = &r.status {
            writeln!(
                out,
                "failure = aps {} users {} subcarriers {} realization {}: {msg}",
                r.point.aps, r.point.users, r.point.subcarriers, r.realization
            )?;
        }
    }
    writeln!(out, "[config]")?;
    write!(out, "{}", spec.base.to_toml_string()?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub bound: f64,
}

/// Randomized invariant suite behind the `validate` subcommand.
pub fn run_validation(seed: u64, realizations: usize) -> Vec<CheckOutcome> {
    let mut zf = 0.0f64;
    let mut consistency = 0.0f64;
    let mut square = 0.0f64;
    let mut scale = 0.0f64;
    let mut failures = 0usize;
    for r in 0..realizations {
        let (k, l, q) = [(1, 1, 1), (4, 2, 16), (8, 8, 1), (4, 8, 16)][r % 4];
        let cfg = SystemConfig::default().with_aps(l, 8).with_users(k).with_subcarriers(q);
        let rec = evaluate_realization(&cfg, seed, r, ExperimentKind::SubcarrierSweep.methods());
        match &rec.status {
            RecordStatus::Ok => {}
            _ => failures += 1,
        }
        for o in &rec.outcomes {
            zf = zf.max(o.zf_residual);
        }
        if let Some(gap) = validation_consistency(&cfg, seed, r) {
            consistency = consistency.max(gap);
        }
        if let Some(d) = validation_square(seed, r) {
            square = square.max(d);
        }
        if let Some(d) = validation_scale(&cfg, seed, r) {
            scale = scale.max(d);
        }
    }
    vec![
        CheckOutcome { name: "zf-feasibility", passed: zf <= ZF_TOLERANCE, worst: zf, bound: ZF_TOLERANCE },
        CheckOutcome {
            name: "fixed-point-consistency",
            passed: consistency <= CONSISTENCY_TOLERANCE,
            worst: consistency,
            bound: CONSISTENCY_TOLERANCE,
        },
        CheckOutcome { name: "square-equivalence", passed: square <= 1e-10, worst: square, bound: 1e-10 },
        CheckOutcome { name: "rmt-scale-invariance", passed: scale <= 1e-12, worst: scale, bound: 1e-12 },
        CheckOutcome { name: "solver-failures", passed: failures == 0, worst: failures as f64, bound: 0.0 },
    ]
}

fn validation_channel(cfg: &SystemConfig, seed: u64, r: usize) -> Option<(Scenario, ChannelRealization)> {
    let mut rng = realization_rng(seed, r as u64);
    let sc = Scenario::draw(cfg, &mut rng).ok()?;
    let ch = draw_channel(&sc.large_scale.beta, &sc.correlation, cfg.subcarriers, &mut rng).ok()?;
    Some((sc, ch))
}

fn validation_consistency(cfg: &SystemConfig, seed: u64, r: usize) -> Option<f64> {
    let (sc, ch) = validation_channel(cfg, seed, r)?;
    let nch = normalize(&ch, &sc.targets, cfg.noise_power).ok()?;
    let (p, rep) = solve_antenna_powers(&nch, &FixedPointOptions::default()).ok()?;
    if !rep.converged {
        return None;
    }
    let ws = optimal_precoder(&ch, &sc.targets, cfg.noise_power, &p).ok()?;
    Some(self_consistency_gap(&p, &ws))
}

fn validation_square(seed: u64, r: usize) -> Option<f64> {
    let cfg = SystemConfig::default().with_aps(1, 4).with_users(4).with_subcarriers(2);
    let (sc, ch) = validation_channel(&cfg, seed, r)?;
    let zf = zf_precoder(&ch, &sc.targets, cfg.noise_power).ok()?;
    let p = AntennaPowerVector::new(vec![0.37, 1.9, 0.05, 4.2]);
    let opt = optimal_precoder(&ch, &sc.targets, cfg.noise_power, &p).ok()?;
    zf.w.iter()
        .zip(&opt.w)
        .map(|(a, b)| (a - b).camax() / a.camax())
        .reduce(f64::max)
}

fn validation_scale(cfg: &SystemConfig, seed: u64, r: usize) -> Option<f64> {
    let (sc, _) = validation_channel(cfg, seed, r)?;
    let input = RmtInput::from_statistics(&sc.large_scale.beta, &sc.correlation, &sc.targets, cfg.noise_power).ok()?;
    let p: Vec<f64> = (0..input.aps()).map(|l| 0.5 + l as f64).collect();
    let base = pbar_map(&input, &p).ok()?;
    let mut worst = 0.0f64;
    for alpha in [0.1, 10.0] {
        let scaled: Vec<f64> = p.iter().map(|x| alpha * x).collect();
        let other = pbar_map(&input, &scaled).ok()?;
        for (a, b) in base.iter().zip(&other) {
            worst = worst.max((a - b).abs() / a.abs().max(f64::MIN_POSITIVE));
        }
    }
    Some(worst)
}

/// Relative gap between the statistical per-AP powers and the per-AP mean
/// of the instantaneous power map evaluated at those powers, averaged over
/// active APs.
pub fn asymptotic_gap(cfg: &SystemConfig, seed: u64, r: usize) -> Result<f64> {
    let mut rng = realization_rng(seed, r as u64);
    let sc = Scenario::draw(cfg, &mut rng)?;
    let ch = draw_channel(&sc.large_scale.beta, &sc.correlation, cfg.subcarriers, &mut rng)?;
    let input = RmtInput::from_statistics(&sc.large_scale.beta, &sc.correlation, &sc.targets, cfg.noise_power)?;
    let opts = RmtOptions {
        activation_threshold_rel: cfg.activation_threshold_rel,
        ..RmtOptions::default()
    };
    let (p_ap, _) = solve_pbar(&input, &opts)?;
    let nch = normalize(&ch, &sc.targets, cfg.noise_power)?;
    let mapped = power_map(&nch, &p_ap.expand(&cfg.antennas).p)?;
    let mut total = 0.0;
    for &l in &p_ap.active_set {
        let range = ch.ap_range(l);
        let m = range.len() as f64;
        let mean = mapped[range].iter().sum::<f64>() / m;
        total += (mean - p_ap.p_ap[l]).abs() / p_ap.p_ap[l];
    }
    Ok(total / p_ap.active_set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SystemConfig {
        SystemConfig::default().with_aps(3, 4).with_users(2).with_subcarriers(4)
    }

    #[test]
    fn spec_validation() {
        let spec = ExperimentSpec::subcarrier_sweep(small(), vec![1, 4], 2, 0);
        assert!(spec.validate().is_ok());
        assert!(ExperimentSpec { realizations: 0, ..spec.clone() }.validate().is_err());
        assert!(ExperimentSpec { subcarriers: vec![], ..spec }.validate().is_err());
    }

    #[test]
    fn quick_profile_caps() {
        let spec = ExperimentSpec::default_for(ExperimentKind::SubcarrierSweep, SystemConfig::default(), 1).quick();
        assert_eq!(spec.subcarriers, vec![1, 2, 4, 8, 16, 32, 64]);
        assert_eq!(spec.realizations, QUICK_REALIZATIONS);
        let load = ExperimentSpec::default_for(ExperimentKind::LoadSweep, SystemConfig::default(), 1).quick();
        assert_eq!(load.base.subcarriers, 64);
    }

    #[test]
    fn load_sweep_skips_overloaded_points() {
        let spec = ExperimentSpec::load_sweep(SystemConfig::default().with_aps(2, 2), vec![1, 3, 4, 5], vec![1, 2], 1, 0);
        let (points, skipped) = spec.sweep_points();
        assert_eq!(points.iter().map(|p| (p.aps, p.users)).collect::<Vec<_>>(), vec![(1, 1), (2, 1), (2, 3)]);
        assert_eq!(skipped.len(), 5);
    }

    #[test]
    fn record_count_and_aggregates() {
        let spec = ExperimentSpec::subcarrier_sweep(small(), vec![1, 4], 3, 7);
        let res = run_experiment(&spec).unwrap();
        assert_eq!(res.records.len(), 6);
        assert!(res.records.iter().all(|r| r.status == RecordStatus::Ok));
        let pt = SweepPoint { aps: 3, users: 2, subcarriers: 4 };
        let agg = res.aggregate(&pt, PrecoderKind::RmtInduced, "pas_ratio").unwrap();
        let vals: Vec<f64> = res
            .records
            .iter()
            .filter(|r| r.point == pt)
            .map(|r| r.outcome(PrecoderKind::RmtInduced).unwrap().report.p_pas / r.outcome(PrecoderKind::ConsumedPowerOptimal).unwrap().report.p_pas)
            .collect();
        assert_eq!((agg.mean, agg.stderr), mean_stderr(&vals));
        assert_eq!(agg.count, 3);
        assert!(agg.mean >= 1.0 - 1e-6);
    }

    #[test]
    fn common_random_numbers_across_points() {
        let spec = ExperimentSpec::subcarrier_sweep(small(), vec![1, 8], 2, 3);
        let res = run_experiment(&spec).unwrap();
        assert_eq!(res.records[0].digest, res.records[2].digest);
        assert_ne!(res.records[0].digest, res.records[1].digest);
    }

    #[test]
    fn stderr_examples() {
        assert_eq!(mean_stderr(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn csv_headers() {
        let spec = ExperimentSpec::antenna_profile(small(), 5);
        let res = run_antenna_profile(&spec).unwrap();
        let mut buf = Vec::new();
        write_antenna_profile_csv(&res, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], PROFILE_HEADER);
        assert_eq!(lines.len(), 1 + 12);
        let mut buf = Vec::new();
        write_aggregates_csv(&res, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with(AGGREGATE_HEADER));
        assert!(run_load_sweep(&spec).is_err());
    }
}
