//! Monte Carlo campaigns and accuracy reports.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{FeederError, FeederModel};
use crate::locator::{
    calibrate_threshold, Locator, LocatorConfig, LocatorError, Outcome, ThresholdMode,
};
use crate::measurement::{measure_true, synthesize, MeasurementSet, NoiseProfile};
use crate::phase::PhaseSet;
use crate::powerflow::{run_powerflow, FaultScenario, FaultType, PowerFlowError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("campaign file: {0}")]
    Campaign(String),
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error(transparent)]
    Locator(#[from] LocatorError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Per-trial seed from the campaign seed, cell and trial numbers.
pub fn derive_seed(seed: u64, cell: u64, trial: u64) -> u64 {
    let mut x =
        seed ^ cell.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ trial.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finaliser
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDoc {
    pub fault_types: Vec<FaultType>,
    #[serde(default)]
    pub phases: Option<Vec<PhaseSet>>,
    pub impedances_ohm: Vec<f64>,
    pub branches: Vec<String>,
    pub positions: Vec<f64>,
}

/// Gaussian, zero-mean relative error on every branch's R and X, clipped
/// to ±`max_fraction` (treated as 3σ).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub max_fraction: f64,
}

/// Campaign file schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignDoc {
    /// Path relative to the campaign file, or `bundled:<name>`.
    pub feeder: String,
    pub grid: GridDoc,
    #[serde(default)]
    pub noise: NoiseProfile,
    #[serde(default)]
    pub perturbation: Perturbation,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub locator: LocatorConfig,
    #[serde(default = "default_calibration_trials")]
    pub calibration_trials: usize,
    /// Write per-location timings into the report; they vary run to run.
    #[serde(default = "default_true")]
    pub record_timing: bool,
}

fn default_calibration_trials() -> usize {
    500
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub id: usize,
    pub scenario: FaultScenario,
}

#[derive(Clone, Debug)]
pub struct Campaign {
    pub model: FeederModel,
    pub cells: Vec<Cell>,
    pub noise: NoiseProfile,
    pub perturbation: Perturbation,
    pub trials: usize,
    pub seed: u64,
    pub locator: LocatorConfig,
    pub calibration_trials: usize,
    pub record_timing: bool,
}

pub fn resolve_feeder(spec: &str, base_dir: &Path) -> Result<FeederModel, HarnessError> {
    if let Some(name) = spec.strip_prefix("bundled:") {
        return crate::bundled::by_name(name)
            .ok_or_else(|| HarnessError::Campaign(format!("unknown bundled feeder {name:?}")));
    }
    let p: PathBuf = base_dir.join(spec);
    Ok(FeederModel::load(&p)?)
}

impl Campaign {
    pub fn from_doc(doc: &CampaignDoc, model: FeederModel) -> Result<Campaign, HarnessError> {
        let bad = |m: String| HarnessError::Campaign(m);
        if doc.trials == 0 {
            return Err(bad("trials must be at least 1".into()));
        }
        let g = &doc.grid;
        if g.fault_types.is_empty()
            || g.impedances_ohm.is_empty()
            || g.branches.is_empty()
            || g.positions.is_empty()
        {
            return Err(bad("every grid axis needs at least one value".into()));
        }
        if let Some(ph) = &g.phases {
            if ph.len() != g.fault_types.len() {
                return Err(bad(
                    "grid.phases must list one phase set per fault type".into()
                ));
            }
        }
        let mut cells = Vec::new();
        for (ti, &t) in g.fault_types.iter().enumerate() {
            let phases = g
                .phases
                .as_ref()
                .map(|p| p[ti])
                .unwrap_or_else(|| t.default_phases());
            for &z in &g.impedances_ohm {
                for b in &g.branches {
                    let branch = model
                        .branch_index(b)
                        .ok_or_else(|| bad(format!("grid.branches: unknown branch {b:?}")))?;
                    for &position in &g.positions {
                        let scenario = FaultScenario {
                            branch,
                            position,
                            fault_type: t,
                            phases,
                            impedance_ohm: z,
                        };
                        scenario
                            .validate(&model)
                            .map_err(|e| bad(format!("grid cell {}: {e}", cells.len())))?;
                        cells.push(Cell {
                            id: cells.len(),
                            scenario,
                        });
                    }
                }
            }
        }
        Ok(Campaign {
            model,
            cells,
            noise: doc.noise,
            perturbation: doc.perturbation,
            trials: doc.trials,
            seed: doc.seed,
            locator: doc.locator.clone(),
            calibration_trials: doc.calibration_trials,
            record_timing: doc.record_timing,
        })
    }

    pub fn load(path: &Path) -> Result<Campaign, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let doc: CampaignDoc =
            serde_json::from_str(&text).map_err(|e| HarnessError::Campaign(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let model = resolve_feeder(&doc.feeder, base)?;
        Campaign::from_doc(&doc, model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Exact,
    Adjacent,
    Other(usize),
}

/// Distance between two branches in hops: 0 for the same branch, 1 when they
/// share a node, otherwise one more than the node distance between their
/// nearest endpoints.
pub fn branch_hops(model: &FeederModel, a: usize, b: usize) -> usize {
    if a == b {
        return 0;
    }
    let (ba, bb) = (&model.branches[a], &model.branches[b]);
    let d = [
        (ba.from, bb.from),
        (ba.from, bb.to),
        (ba.to, bb.from),
        (ba.to, bb.to),
    ]
    .iter()
    .map(|&(x, y)| model.node_distance(x, y))
    .min()
    .expect("four pairs");
    1 + d
}

pub fn classify_verdict(model: &FeederModel, truth: usize, verdict: usize) -> Classification {
    match branch_hops(model, truth, verdict) {
        0 => Classification::Exact,
        1 => Classification::Adjacent,
        h => Classification::Other(h),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub cell: usize,
    pub trial: usize,
    pub seed: u64,
    pub verdict: Option<String>,
    pub outcome: Option<Outcome>,
    pub hops: Option<usize>,
    pub error: Option<String>,
    #[serde(skip)]
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub n_trials: usize,
    pub n_exact: usize,
    pub n_adjacent: usize,
    pub n_other: usize,
    /// Trials in `n_other` where no branch was returned.
    pub n_missed: usize,
    pub n_failed: usize,
    pub alpha: f64,
    pub beta: f64,
    pub other: f64,
    pub max_error_hops: Option<usize>,
    pub mean_ms: Option<f64>,
    pub p95_ms: Option<f64>,
}

impl Tally {
    fn from_records(records: &[&TrialRecord], timing: bool) -> Tally {
        let mut t = Tally {
            n_trials: records.len(),
            ..Default::default()
        };
        let mut times = Vec::new();
        for r in records {
            if r.error.is_some() {
                t.n_failed += 1;
                continue;
            }
            times.push(r.elapsed_ms);
            match r.hops {
                Some(0) => t.n_exact += 1,
                Some(1) => t.n_adjacent += 1,
                Some(_) => t.n_other += 1,
                None => {
                    t.n_other += 1;
                    t.n_missed += 1;
                }
            }
            if let Some(h) = r.hops {
                t.max_error_hops = Some(t.max_error_hops.map_or(h, |m| m.max(h)));
            }
        }
        let n = t.n_trials as f64;
        t.alpha = t.n_exact as f64 / n;
        t.beta = t.n_adjacent as f64 / n;
        t.other = (t.n_trials - t.n_exact - t.n_adjacent) as f64 / n;
        if timing && !times.is_empty() {
            t.mean_ms = Some(times.iter().sum::<f64>() / times.len() as f64);
            t.p95_ms = Some(crate::locator::quantile(&times, 0.95));
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub id: usize,
    pub fault_type: FaultType,
    pub phases: PhaseSet,
    pub impedance_ohm: f64,
    pub branch: String,
    pub position: f64,
    #[serde(flatten)]
    pub tally: Tally,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub feeder: String,
    pub seed: u64,
    pub threshold: f64,
    pub cells: Vec<CellReport>,
    pub overall: Tally,
    pub trials: Vec<TrialRecord>,
}

impl AccuracyReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "cell_id",
            "fault_type",
            "impedance_ohm",
            "branch",
            "position",
            "alpha",
            "beta",
            "other",
            "max_error_hops",
            "mean_ms",
            "p95_ms",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
        let row = |id: String, t: String, z: String, b: String, p: String, tally: &Tally| {
            vec![
                id,
                t,
                z,
                b,
                p,
                format!("{:.6}", tally.alpha),
                format!("{:.6}", tally.beta),
                format!("{:.6}", tally.other),
                tally
                    .max_error_hops
                    .map(|h| h.to_string())
                    .unwrap_or_default(),
                opt(tally.mean_ms),
                opt(tally.p95_ms),
            ]
        };
        for c in &self.cells {
            w.write_record(row(
                c.id.to_string(),
                c.fault_type.to_string(),
                c.impedance_ohm.to_string(),
                c.branch.clone(),
                c.position.to_string(),
                &c.tally,
            ))?;
        }
        w.write_record(row(
            "all".into(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            &self.overall,
        ))?;
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<(), HarnessError> {
        serde_json::to_writer_pretty(&mut out, self)
            .map_err(|e| HarnessError::Campaign(e.to_string()))?;
        writeln!(out)?;
        Ok(())
    }

    /// Tally over the cells selected by `keep`.
    pub fn tally_where(&self, keep: impl Fn(&CellReport) -> bool) -> Tally {
        let ids: Vec<usize> = self
            .cells
            .iter()
            .filter(|c| keep(c))
            .map(|c| c.id)
            .collect();
        let recs: Vec<&TrialRecord> = self
            .trials
            .iter()
            .filter(|t| ids.contains(&t.cell))
            .collect();
        Tally::from_records(&recs, self.overall.mean_ms.is_some())
    }
}

/// Relative R and X factors per branch.
pub fn perturbation_factors(n: usize, p: Perturbation, seed: u64) -> Vec<(f64, f64)> {
    if p.max_fraction <= 0.0 {
        return vec![(1.0, 1.0); n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, p.max_fraction / 3.0).expect("finite σ");
    let mut draw = || 1.0 + d.sample(&mut rng).clamp(-p.max_fraction, p.max_fraction);
    (0..n).map(|_| (draw(), draw())).collect()
}

fn run_trial(
    campaign: &Campaign,
    nominal: &Locator<'_>,
    cell: &Cell,
    exact: &Result<MeasurementSet, String>,
    trial: usize,
) -> TrialRecord {
    let seed = derive_seed(campaign.seed, cell.id as u64, trial as u64);
    let mut rec = TrialRecord {
        cell: cell.id,
        trial,
        seed,
        verdict: None,
        outcome: None,
        hops: None,
        error: None,
        elapsed_ms: 0.0,
    };
    let exact = match exact {
        Ok(e) => e,
        Err(e) => {
            rec.error = Some(e.clone());
            return rec;
        }
    };
    let set = synthesize(exact, &campaign.noise, seed);
    let result = if campaign.perturbation.max_fraction > 0.0 {
        let factors = perturbation_factors(
            campaign.model.branches.len(),
            campaign.perturbation,
            derive_seed(seed, u64::MAX - 1, 0),
        );
        let model = campaign.model.with_scaled_impedances(&factors);
        Locator::new(&model, nominal.config.clone()).and_then(|loc| {
            let t0 = Instant::now();
            let v = loc.locate(&set);
            v.map(|v| (v, t0.elapsed().as_secs_f64() * 1e3))
        })
    } else {
        let t0 = Instant::now();
        nominal
            .locate(&set)
            .map(|v| (v, t0.elapsed().as_secs_f64() * 1e3))
    };
    match result {
        Ok((v, ms)) => {
            rec.elapsed_ms = ms;
            rec.outcome = Some(v.outcome);
            rec.hops = v
                .branch_index
                .map(|b| branch_hops(&campaign.model, cell.scenario.branch, b));
            rec.verdict = v.branch;
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// Runs every cell × trial. Failures are recorded per trial.
pub fn run_campaign(campaign: &Campaign) -> Result<AccuracyReport, HarnessError> {
    let mut config = campaign.locator.clone();
    if config.threshold_mode == ThresholdMode::Calibrated {
        let cal = calibrate_threshold(
            &campaign.model,
            &campaign.noise,
            campaign.calibration_trials,
            campaign.seed,
            &config,
        )?;
        config.threshold = cal.threshold;
    }
    let nominal = Locator::new(&campaign.model, config.clone())?;
    let exact: Vec<Result<MeasurementSet, String>> = campaign
        .cells
        .par_iter()
        .map(|c| {
            run_powerflow(&campaign.model, Some(&c.scenario))
                .map(|st| measure_true(&campaign.model, &st, &campaign.noise))
                .map_err(|e| e.to_string())
        })
        .collect();
    let jobs: Vec<(usize, usize)> = (0..campaign.cells.len())
        .flat_map(|c| (0..campaign.trials).map(move |t| (c, t)))
        .collect();
    let trials: Vec<TrialRecord> = jobs
        .par_iter()
        .map(|&(c, t)| run_trial(campaign, &nominal, &campaign.cells[c], &exact[c], t))
        .collect();

    let cells = campaign
        .cells
        .iter()
        .map(|c| {
            let recs: Vec<&TrialRecord> = trials.iter().filter(|t| t.cell == c.id).collect();
            CellReport {
                id: c.id,
                fault_type: c.scenario.fault_type,
                phases: c.scenario.phases,
                impedance_ohm: c.scenario.impedance_ohm,
                branch: campaign.model.branches[c.scenario.branch].id.clone(),
                position: c.scenario.position,
                tally: Tally::from_records(&recs, campaign.record_timing),
            }
        })
        .collect();
    let all: Vec<&TrialRecord> = trials.iter().collect();
    Ok(AccuracyReport {
        feeder: campaign.model.name.clone(),
        seed: campaign.seed,
        threshold: config.threshold,
        cells,
        overall: Tally::from_records(&all, campaign.record_timing),
        trials,
    })
}
