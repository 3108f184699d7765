//! Orchestration behind the command line: single runs, alpha sweeps, checks
//! and snapshot inspection.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use crate::checks::{self, drifts, CheckReport, Drifts};
use crate::config::Config;
use crate::diagnostics::{l1_distance, moments, DiagnosticsRecord, Moments};
use crate::error::{Error, Result};
use crate::integrator::{Termination, Trajectory};
use crate::phase_grid::{build_velocity_grid, SpatialGrid};
use crate::prepare::{MollifyReport, ProfileReport};
use crate::snapshot::{read_snapshot, write_snapshot, SnapshotHeader};
use crate::transport::{DistributionField, PhaseSpace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

pub const DIAGNOSTICS_FILE: &str = "diagnostics.ndjson";
pub const CSV_FILE: &str = "diagnostics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "sweep.json";

/// Exit status for an error that ended a command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::ConfigParse { .. }
        | Error::ConfigValue { .. }
        | Error::Read { .. }
        | Error::InvalidGrid(_)
        | Error::UnknownRule(_)
        | Error::UnsupportedOrder { .. }
        | Error::InvalidKernel(_)
        | Error::InvalidProfile(_)
        | Error::InvalidStepper(_)
        | Error::Snapshot(_)
        | Error::UnknownCheck(_) => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Read {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes records as NDJSON and, optionally, CSV.
struct RecordSink {
    ndjson: BufWriter<File>,
    ndjson_path: PathBuf,
    csv: Option<(csv::Writer<File>, PathBuf)>,
}

impl RecordSink {
    fn create(dir: &Path, with_csv: bool, lambdas: &[f64]) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        let ndjson_path = dir.join(DIAGNOSTICS_FILE);
        let ndjson = BufWriter::new(File::create(&ndjson_path).map_err(io_at(&ndjson_path))?);
        let csv = if with_csv {
            let path = dir.join(CSV_FILE);
            let mut w = csv::Writer::from_path(&path).map_err(|e| io_at(&path)(e.into()))?;
            w.write_record(DiagnosticsRecord::csv_header(lambdas))
                .map_err(|e| io_at(&path)(e.into()))?;
            Some((w, path))
        } else {
            None
        };
        Ok(Self { ndjson, ndjson_path, csv })
    }

    fn push(&mut self, rec: &DiagnosticsRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::Snapshot(e.to_string()))?;
        writeln!(self.ndjson, "{line}").map_err(io_at(&self.ndjson_path))?;
        if let Some((w, path)) = &mut self.csv {
            w.write_record(rec.csv_row()).map_err(|e| io_at(path)(e.into()))?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.ndjson.flush().map_err(io_at(&self.ndjson_path))?;
        if let Some((mut w, path)) = self.csv {
            w.flush().map_err(io_at(&path))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderSummary {
    pub base: i32,
    pub rung: i32,
    pub crossings: Vec<f64>,
    pub t_infinity: Option<f64>,
    pub extrapolated: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminationSummary {
    Completed,
    CandidateBlowup { t: f64, dt: f64, t_infinity: f64 },
}

impl From<&Termination> for TerminationSummary {
    fn from(t: &Termination) -> Self {
        match *t {
            Termination::Completed => Self::Completed,
            Termination::CandidateBlowup { t, dt, t_infinity } => Self::CandidateBlowup { t, dt, t_infinity },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialSummary {
    pub c0: f64,
    pub bound_exponent: i32,
    pub sup: f64,
    pub capped_mass: Option<f64>,
    pub truncated_mass: Option<f64>,
}

impl InitialSummary {
    fn new(report: &ProfileReport, mollify: Option<&MollifyReport>) -> Self {
        Self {
            c0: report.c0,
            bound_exponent: report.bound_exponent,
            sup: report.sup,
            capped_mass: mollify.map(|m| m.capped_mass),
            truncated_mass: mollify.map(|m| m.truncated_mass),
        }
    }
}

/// Final line of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub alpha: f64,
    pub t_final: f64,
    pub steps: usize,
    pub final_dt: f64,
    pub termination: TerminationSummary,
    pub drifts: Drifts,
    pub initial_moments: Moments,
    pub final_moments: Moments,
    pub m_alpha: f64,
    pub linf: f64,
    /// Smallest `1/alpha - sup f` over the recorded states; absent for
    /// `alpha = 0`.
    pub saturation_gap: Option<f64>,
    pub ladder: LadderSummary,
    pub initial: InitialSummary,
}

/// Outcome of one trajectory inside a command.
pub struct RunResult {
    pub summary: RunSummary,
    pub field: DistributionField,
    /// Fields at the requested capture times, in order; `None` when the run
    /// ended before reaching one.
    pub captures: Vec<Option<DistributionField>>,
}

fn snapshot_times(config: &Config) -> Vec<f64> {
    let Some(c) = config.output.snapshot_cadence else {
        return Vec::new();
    };
    let t_max = config.time.t_max;
    (1..)
        .map(|k| k as f64 * c)
        .take_while(|t| *t <= t_max * (1.0 + 1e-12))
        .map(|t| t.min(t_max))
        .collect()
}

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

/// Runs one trajectory at `alpha` from `sampled` data, writing its outputs
/// into `dir`.
pub fn run_alpha(
    config: &Config,
    sampled: &DistributionField,
    profile: &ProfileReport,
    alpha: f64,
    dir: &Path,
    captures: &[f64],
) -> Result<RunResult> {
    let (initial, mollified) = config.initial_for(sampled, alpha)?;
    if let Some(m) = &mollified {
        info!(
            "alpha = {alpha}: mollified initial data, capped mass {:e}, truncated mass {:e}",
            m.capped_mass, m.truncated_mass
        );
    }
    let stepper = config.stepper(alpha)?;
    let snaps = snapshot_times(config);
    let mut extra: Vec<f64> = snaps.clone();
    extra.extend_from_slice(captures);
    let mut traj = Trajectory::new(&initial, &stepper, &config.run_options(extra))?;

    let mut sink = RecordSink::create(dir, config.output.csv, &config.output.tail_lambdas)?;
    let mut snap_index = 0usize;
    let mut write_snap = |field: &DistributionField| -> Result<()> {
        let path = dir.join(format!("snapshot_{snap_index:05}.bnks"));
        snap_index += 1;
        write_snapshot(&path, field)
    };
    if !snaps.is_empty() {
        write_snap(traj.field())?;
    }
    let mut captured: Vec<Option<DistributionField>> = vec![None; captures.len()];
    let saturation = initial.saturation();
    let mut top = traj.field().sup();
    sink.push(&traj.record()?)?;
    loop {
        let rec = match traj.advance() {
            Ok(Some(rec)) => rec,
            Ok(None) => break,
            Err(e) => {
                sink.finish()?;
                return Err(e);
            }
        };
        sink.push(&rec)?;
        top = top.max(rec.linf);
        let t = traj.field().time();
        if snaps.iter().any(|s| near(t, *s)) {
            write_snap(traj.field())?;
        }
        for (k, c) in captures.iter().enumerate() {
            if near(t, *c) {
                captured[k] = Some(traj.field().clone());
            }
        }
    }
    sink.finish()?;
    write_snapshot(&dir.join("final.bnks"), traj.field())?;

    let final_moments = moments(traj.field())?;
    let ladder = traj.ladder();
    let termination = traj.termination().cloned().unwrap_or(Termination::Completed);
    if let Termination::CandidateBlowup { t, .. } = termination {
        warn!("alpha = {alpha}: step size collapsed at t = {t}; candidate blow-up");
    }
    let summary = RunSummary {
        alpha,
        t_final: traj.field().time(),
        steps: traj.steps(),
        final_dt: traj.current_dt(),
        termination: (&termination).into(),
        drifts: drifts(traj.initial_moments(), &final_moments),
        initial_moments: *traj.initial_moments(),
        final_moments,
        m_alpha: traj.running_sup().m_alpha(),
        linf: traj.field().sup(),
        saturation_gap: saturation.is_finite().then(|| saturation - top),
        ladder: LadderSummary {
            base: ladder.base(),
            rung: ladder.rung(),
            crossings: ladder.crossings().to_vec(),
            t_infinity: ladder.t_infinity(),
            extrapolated: ladder.extrapolate(),
        },
        initial: InitialSummary::new(profile, mollified.as_ref()),
    };
    Ok(RunResult {
        summary,
        field: traj.field().clone(),
        captures: captured,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Snapshot(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_at(path))
}

/// `run`: one trajectory at `stats.alpha`.
pub fn cmd_run(config: &Config) -> Result<RunSummary> {
    let (sampled, profile) = config.sample_initial()?;
    info!(
        "initial data: c0 = {:e}, sup = {:e}, L = {}",
        profile.c0, profile.sup, profile.bound_exponent
    );
    let dir = &config.output.path;
    let result = run_alpha(config, &sampled, &profile, config.stats.alpha, dir, &[])?;
    write_json(&dir.join(SUMMARY_FILE), &result.summary)?;
    Ok(result.summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub t: f64,
    /// `d[i][j] = |g_i - g_j|_1`; `None` where a run ended early.
    pub distances: Vec<Vec<Option<f64>>>,
    /// `d(alpha_k, alpha_k+1)` along the list.
    pub adjacent: Vec<Option<f64>>,
    /// Whether the adjacent distances strictly decrease.
    pub decreasing: bool,
    /// `|g_alpha - g_0|_1` when the bosonic run is included.
    pub to_bosonic: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub alphas: Vec<f64>,
    pub tables: Vec<SweepTable>,
    pub runs: Vec<RunSummary>,
}

fn alpha_dir(root: &Path, alpha: f64) -> PathBuf {
    root.join(format!("alpha_{alpha}"))
}

/// `sweep`: matched runs over the configured alphas and their pairwise
/// `L^1` distances at the comparison times.
pub fn cmd_sweep(config: &Config) -> Result<SweepReport> {
    let sweep = config.sweep.as_ref().ok_or_else(|| Error::ConfigValue {
        key: "sweep".into(),
        message: "the sweep command needs a [sweep] section".into(),
    })?;
    let (sampled, profile) = config.sample_initial()?;
    let root = &config.output.path;
    let times = &sweep.compare_times;
    let mut results = Vec::new();
    for &alpha in &sweep.alphas {
        results.push(run_alpha(config, &sampled, &profile, alpha, &alpha_dir(root, alpha), times)?);
    }
    let bosonic = if sweep.include_bosonic {
        Some(run_alpha(config, &sampled, &profile, 0.0, &alpha_dir(root, 0.0), times)?)
    } else {
        None
    };

    let mut tables = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        let fields: Vec<Option<&DistributionField>> = results.iter().map(|r| r.captures[k].as_ref()).collect();
        let dist = |a: Option<&DistributionField>, b: Option<&DistributionField>| -> Result<Option<f64>> {
            match (a, b) {
                (Some(a), Some(b)) => l1_distance(a, b).map(Some),
                _ => Ok(None),
            }
        };
        let mut distances = Vec::new();
        for a in &fields {
            distances.push(fields.iter().map(|b| dist(*a, *b)).collect::<Result<Vec<_>>>()?);
        }
        let adjacent: Vec<Option<f64>> = (1..fields.len()).map(|i| distances[i - 1][i]).collect();
        let decreasing = adjacent.windows(2).all(|w| matches!((w[0], w[1]), (Some(a), Some(b)) if b < a));
        if !decreasing {
            warn!("t = {t}: adjacent alpha distances do not strictly decrease: {adjacent:?}");
        }
        let to_bosonic = match &bosonic {
            Some(b) => Some(
                fields
                    .iter()
                    .map(|a| dist(*a, b.captures[k].as_ref()))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        tables.push(SweepTable {
            t,
            distances,
            adjacent,
            decreasing,
            to_bosonic,
        });
    }
    let mut runs: Vec<RunSummary> = results.into_iter().map(|r| r.summary).collect();
    if let Some(b) = bosonic {
        runs.push(b.summary);
    }
    let report = SweepReport {
        alphas: sweep.alphas.clone(),
        tables,
        runs,
    };
    fs::create_dir_all(root).map_err(io_at(root))?;
    write_json(&root.join(SWEEP_FILE), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckName {
    Equilibrium,
    Oracle,
    Geometry,
    Conservation,
}

impl std::str::FromStr for CheckName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equilibrium" => Ok(Self::Equilibrium),
            "oracle" => Ok(Self::Oracle),
            "geometry" => Ok(Self::Geometry),
            "conservation" => Ok(Self::Conservation),
            other => Err(Error::UnknownCheck(other.into())),
        }
    }
}

/// `check <name>`.
pub fn cmd_check(config: &Config, name: CheckName) -> Result<CheckReport> {
    match name {
        CheckName::Geometry => checks::geometry_check(checks::GEOMETRY_SAMPLES, 0),
        CheckName::Oracle => checks::oracle_check(),
        CheckName::Equilibrium => checks::equilibrium_check(config, &[8, 12, 16]),
        CheckName::Conservation => checks::conservation_check(config),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotDump {
    pub version: u32,
    pub n_x: u32,
    pub n_v: u32,
    pub v_max: f64,
    pub time: f64,
    pub values: usize,
    pub sup: f64,
    pub moments: Moments,
}

/// `snapshot-dump <file>`: header fields and moments.
pub fn snapshot_dump(path: &Path) -> Result<SnapshotDump> {
    let (h, data): (SnapshotHeader, Vec<f64>) = read_snapshot(path)?;
    let phase = PhaseSpace::new(SpatialGrid::new(h.n_x as usize)?, build_velocity_grid(h.n_v as usize, h.v_max)?);
    let field = DistributionField::from_data(phase, f64::INFINITY, h.time, data)?;
    Ok(SnapshotDump {
        version: h.version,
        n_x: h.n_x,
        n_v: h.n_v,
        v_max: h.v_max,
        time: h.time,
        values: h.value_count(),
        sup: field.sup(),
        moments: moments(&field)?,
    })
}
