//! Two-step faulted-line search.
//!
//! Step one estimates every subgraph under the no-fault hypothesis and picks
//! the one with the largest WMR. Step two walks the nested path chain of that
//! subgraph. For path `s` the statistic `T_s` is the smallest WMR the whole
//! subgraph can reach when the fault is allowed to sit anywhere outside the
//! path; the first path whose statistic exceeds the threshold holds the
//! fault.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsse::{assemble, Assembly, DsseConfig, DsseError, RowTag, Scope, WlsResult};
use crate::feeder::{
    enumerate_paths, partition, FeederModel, PartitionError, PathChain, SubgraphPartition,
};
use crate::measurement::{End, MeasurementSet};
use crate::phase::C64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocatorError {
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("estimation failed in subgraph(s) {0:?}")]
    SubgraphsFailed(Vec<(usize, String)>),
    #[error(transparent)]
    Dsse(#[from] DsseError),
    #[error("calibration failed: {0}")]
    Calibration(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Fixed,
    Calibrated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocatorConfig {
    pub threshold: f64,
    pub threshold_mode: ThresholdMode,
    pub refine_laterals: bool,
    pub calibration_quantile: f64,
    pub safety_factor: f64,
    /// Closest approach, as a fraction of its length, of a hypothetical fault
    /// on the first trunk branch beyond a path to the path's end node.
    pub boundary_margin: f64,
    /// Bound for the two-end screen of directly observed branches, in σ.
    pub direct_sigma_bound: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LocatorConfig {
    fn default() -> Self {
        LocatorConfig {
            threshold: 500.0,
            threshold_mode: ThresholdMode::Fixed,
            refine_laterals: true,
            calibration_quantile: 0.999,
            safety_factor: 2.0,
            boundary_margin: 0.2,
            direct_sigma_bound: 5.0,
            tolerance: 1e-6,
            max_iterations: 20,
        }
    }
}

impl LocatorConfig {
    pub fn dsse(&self) -> DsseConfig {
        DsseConfig {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Located,
    NoFault,
    /// Step one flagged a subgraph but no path statistic crossed the threshold.
    NotFoundInSubgraph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementStep {
    pub added: String,
    pub wmr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationVerdict {
    pub outcome: Outcome,
    pub branch: Option<String>,
    #[serde(skip)]
    pub branch_index: Option<usize>,
    pub direct_branch: bool,
    /// Faulted subgraph K*, 1-based.
    pub subgraph: Option<usize>,
    pub tie: bool,
    pub subgraph_wmr: Vec<f64>,
    pub path_wmr: Vec<f64>,
    /// Path number s at which the statistic first exceeded the threshold.
    pub crossing: Option<usize>,
    pub refinement: Vec<RefinementStep>,
    pub threshold: f64,
    pub step_one_ms: f64,
    pub step_two_ms: f64,
}

/// Result of the subgraph scan.
#[derive(Clone, Debug)]
pub struct StepOne {
    pub direct_hit: Option<usize>,
    pub wmr: Vec<f64>,
    pub best: usize,
    pub tie: bool,
    pub estimates: Vec<(Assembly, WlsResult)>,
}

/// Fault-current columns of a hypothetical fault on one branch, split into
/// the parts constant in and proportional to the position λ.
struct FaultColumns {
    /// (row, coefficient at λ = 0, slope in λ) per fault-current column.
    cols: Vec<Vec<(usize, f64, f64)>>,
}

impl FaultColumns {
    fn new(model: &FeederModel, asm: &Assembly, branch: usize) -> FaultColumns {
        let b = &model.branches[branch];
        let mut cols = Vec::new();
        for p in b.phases.iter() {
            for im in [false, true] {
                let mut col = Vec::new();
                for (r, &(tag, part)) in asm.tags.iter().enumerate() {
                    if part != im {
                        continue;
                    }
                    match tag {
                        RowTag::Injection { node, phase, .. } if phase == p => {
                            if node == b.from {
                                col.push((r, -1.0, 1.0));
                            } else if node == b.to {
                                col.push((r, 0.0, -1.0));
                            }
                        }
                        RowTag::Current {
                            branch: cb,
                            end,
                            phase,
                        } if phase == p && cb == branch => match end {
                            End::Sending => col.push((r, 1.0, -1.0)),
                            End::Receiving => col.push((r, 0.0, -1.0)),
                        },
                        _ => {}
                    }
                }
                cols.push(col);
            }
        }
        FaultColumns { cols }
    }
}

/// A linear WLS solution of the no-fault model.
struct LinearFit {
    x: DVector<f64>,
    z: DVector<f64>,
    w: DVector<f64>,
    factor: Cholesky<f64, Dyn>,
    wmr: f64,
}

impl LinearFit {
    fn of(base: &WlsResult) -> LinearFit {
        LinearFit {
            x: base.x.clone(),
            z: base.z.clone(),
            w: base.w.clone(),
            factor: base.factor.clone(),
            wmr: base.wmr,
        }
    }
}

/// WMR of the frozen linear model after freeing a fault current at
/// fraction λ of one branch, as a function of λ.
struct CandidateCurve {
    j0: f64,
    b0: DVector<f64>,
    b1: DVector<f64>,
    m0: DMatrix<f64>,
    m1: DMatrix<f64>,
    m2: DMatrix<f64>,
}

impl CandidateCurve {
    fn new(asm: &Assembly, fit: &LinearFit, fc: &FaultColumns) -> CandidateCurve {
        let k = fc.cols.len();
        let n = asm.ncols;
        let r0 = &fit.z - asm.h_times(&fit.x);
        let w = &fit.w;
        let mut p0 = DMatrix::zeros(n, k);
        let mut p1 = DMatrix::zeros(n, k);
        let mut b0 = DVector::zeros(k);
        let mut b1 = DVector::zeros(k);
        let mut d = [
            DMatrix::zeros(k, k),
            DMatrix::zeros(k, k),
            DMatrix::zeros(k, k),
        ];
        for (j, col) in fc.cols.iter().enumerate() {
            for &(r, a0, a1) in col {
                let wr = w[r];
                for &(c, h) in &asm.rows[r] {
                    p0[(c, j)] += h * wr * a0;
                    p1[(c, j)] += h * wr * a1;
                }
                b0[j] += a0 * wr * r0[r];
                b1[j] += a1 * wr * r0[r];
            }
            for (i, other) in fc.cols.iter().enumerate() {
                for &(r, a0, a1) in col {
                    if let Some(&(_, c0, c1)) = other.iter().find(|e| e.0 == r) {
                        let wr = w[r];
                        d[0][(j, i)] += wr * a0 * c0;
                        d[1][(j, i)] += wr * (a0 * c1 + a1 * c0);
                        d[2][(j, i)] += wr * a1 * c1;
                    }
                }
            }
        }
        let c0 = fit.factor.solve(&p0);
        let c1 = fit.factor.solve(&p1);
        let [d0, d1, d2] = d;
        let m0 = d0 - p0.transpose() * &c0;
        let m1 = d1 - (p0.transpose() * &c1 + p1.transpose() * &c0);
        let m2 = d2 - p1.transpose() * &c1;
        CandidateCurve {
            j0: fit.wmr,
            b0,
            b1,
            m0,
            m1,
            m2,
        }
    }

    fn wmr(&self, lambda: f64) -> f64 {
        let m = &self.m0 + &self.m1 * lambda + &self.m2 * (lambda * lambda);
        let b = &self.b0 + &self.b1 * lambda;
        let eig = SymmetricEigen::new(m);
        let top = eig.eigenvalues.amax();
        let mut drop = 0.0;
        for (i, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev > 1e-10 * top {
                let proj = eig.eigenvectors.column(i).dot(&b);
                drop += proj * proj / ev;
            }
        }
        (self.j0 - drop).max(0.0)
    }

    /// Grid scan followed by golden-section refinement on [lo, hi].
    fn minimize(&self, lo: f64, hi: f64) -> (f64, f64) {
        const GRID: usize = 8;
        let xs: Vec<f64> = (0..=GRID)
            .map(|i| lo + (hi - lo) * i as f64 / GRID as f64)
            .collect();
        let vals: Vec<f64> = xs.iter().map(|&x| self.wmr(x)).collect();
        let (ib, _) =
            vals.iter().enumerate().fold(
                (0, f64::INFINITY),
                |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc },
            );
        let (mut a, mut b) = (xs[ib.saturating_sub(1)], xs[(ib + 1).min(GRID)]);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (self.wmr(c), self.wmr(d));
        while b - a > 1e-4 {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = self.wmr(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = self.wmr(d);
            }
        }
        let mut best = (xs[ib], vals[ib]);
        for (x, v) in [(c, fc), (d, fd)] {
            if v < best.1 {
                best = (x, v);
            }
        }
        best
    }
}

/// Abscissa of the minimum of the parabola through three points, if it opens upward.
fn parabola_vertex(p: &[(f64, f64)]) -> Option<f64> {
    let [(x0, y0), (x1, y1), (x2, y2)] = [p[0], p[1], p[2]];
    let d01 = (y1 - y0) / (x1 - x0);
    let d12 = (y2 - y1) / (x2 - x1);
    let a = (d12 - d01) / (x2 - x0);
    if !a.is_finite() || a <= 0.0 {
        return None;
    }
    Some((x0 + x1) / 2.0 - d01 / (2.0 * a))
}

pub struct Locator<'a> {
    pub model: &'a FeederModel,
    pub partition: SubgraphPartition,
    pub chains: Vec<PathChain>,
    pub scopes: Vec<Scope>,
    pub config: LocatorConfig,
}

impl<'a> Locator<'a> {
    pub fn new(model: &'a FeederModel, config: LocatorConfig) -> Result<Self, LocatorError> {
        let partition = partition(model)?;
        let chains = (0..partition.subgraphs.len())
            .map(|k| enumerate_paths(model, &partition, k).expect("subgraph exists"))
            .collect();
        let scopes = partition
            .subgraphs
            .iter()
            .map(|g| Scope::subgraph(model, g))
            .collect();
        Ok(Locator {
            model,
            partition,
            chains,
            scopes,
            config,
        })
    }

    /// Largest normalized two-end residual on a directly observed branch:
    /// KVL across the branch and current continuity through it.
    pub fn direct_branch_statistic(&self, set: &MeasurementSet, b: usize) -> Option<f64> {
        let br = &self.model.branches[b];
        let mut worst: f64 = 0.0;
        let mut any = false;
        for p in br.phases.iter() {
            let (Some(vu), Some(vv)) = (set.voltage(br.from, p), set.voltage(br.to, p)) else {
                continue;
            };
            let iu = set.current(b, End::Sending, p);
            let iv = set.current(b, End::Receiving, p);
            if iu.is_none() && iv.is_none() {
                continue;
            }
            any = true;
            // KVL with whichever end current is available, all phases coupled
            let mut drop = C64::new(0.0, 0.0);
            let mut var = [
                vu.variance[0] + vv.variance[0],
                vu.variance[1] + vv.variance[1],
            ];
            for q in br.phases.iter() {
                let m = if iu.is_some() {
                    set.current(b, End::Sending, q)
                } else {
                    set.current(b, End::Receiving, q)
                };
                let Some(m) = m else { continue };
                let z = br.z[(p.index(), q.index())];
                drop += z * m.complex();
                var[0] += z.re * z.re * m.variance[0] + z.im * z.im * m.variance[1];
                var[1] += z.im * z.im * m.variance[0] + z.re * z.re * m.variance[1];
            }
            let kvl = vu.complex() - vv.complex() - drop;
            worst = worst
                .max(kvl.re.abs() / var[0].sqrt())
                .max(kvl.im.abs() / var[1].sqrt());
            if let (Some(a), Some(c)) = (iu, iv) {
                let d = a.complex() - c.complex();
                worst = worst
                    .max(d.re.abs() / (a.variance[0] + c.variance[0]).sqrt())
                    .max(d.im.abs() / (a.variance[1] + c.variance[1]).sqrt());
            }
        }
        any.then_some(worst)
    }

    pub fn identify_faulted_subgraph(&self, set: &MeasurementSet) -> Result<StepOne, LocatorError> {
        let direct_hit = self.partition.direct_branches.iter().copied().find(|&b| {
            self.direct_branch_statistic(set, b)
                .is_some_and(|s| s > self.config.direct_sigma_bound)
        });
        let cfg = self.config.dsse();
        let results: Vec<Result<(Assembly, WlsResult), DsseError>> = self
            .scopes
            .par_iter()
            .map(|s| {
                let a = assemble(self.model, s, set)?;
                let r = a.estimate(self.model, set, &cfg)?;
                Ok((a, r))
            })
            .collect();
        let mut failed = Vec::new();
        let mut estimates = Vec::new();
        for (k, r) in results.into_iter().enumerate() {
            match r {
                Ok(e) => estimates.push(e),
                Err(e) => failed.push((k + 1, e.to_string())),
            }
        }
        if !failed.is_empty() {
            return Err(LocatorError::SubgraphsFailed(failed));
        }
        let wmr: Vec<f64> = estimates.iter().map(|(_, r)| r.wmr).collect();
        let mut best = 0;
        for (k, &j) in wmr.iter().enumerate() {
            if j > wmr[best] {
                best = k;
            }
        }
        let top = wmr[best];
        let tie = wmr
            .iter()
            .enumerate()
            .any(|(k, &j)| k != best && (j - top).abs() <= 1e-9 * top.abs().max(1e-300));
        Ok(StepOne {
            direct_hit,
            wmr,
            best,
            tie,
            estimates,
        })
    }

    /// Smallest WMR of the subgraph with a fault on `branch` at λ ∈ [lo, 1].
    ///
    /// The frozen linear model gives a starting position only: the equivalent
    /// injections move a lot once a large fault current is admitted and its
    /// minimum drifts toward the ends of the branch. Full estimates around
    /// that start are then fitted with a parabola, which the WMR closely
    /// follows in λ, and the vertex is refined until it settles.
    fn candidate_min(
        &self,
        set: &MeasurementSet,
        asm: &Assembly,
        base: &WlsResult,
        branch: usize,
        lo: f64,
    ) -> f64 {
        const STEP: f64 = 0.1;
        const VERTEX_ROUNDS: usize = 4;
        let fc = FaultColumns::new(self.model, asm, branch);
        let cfg = self.config.dsse();
        let (start, frozen) = CandidateCurve::new(asm, &LinearFit::of(base), &fc).minimize(lo, 1.0);
        let full = |lambda: f64| {
            let scope = asm.scope.clone().with_fault(branch, lambda);
            assemble(self.model, &scope, set)
                .and_then(|a| a.estimate(self.model, set, &cfg))
                .ok()
                .map(|r| (lambda, r.wmr))
        };
        let h = STEP.min((1.0 - lo) / 2.0);
        let start = start.clamp(lo + h, 1.0 - h);
        let mut pts: Vec<(f64, f64)> = [start - h, start, start + h]
            .into_iter()
            .filter_map(full)
            .collect();
        for _ in 0..VERTEX_ROUNDS {
            if pts.len() < 3 {
                break;
            }
            pts.sort_by(|a, b| a.1.total_cmp(&b.1));
            pts.truncate(3);
            let Some(v) = parabola_vertex(&pts).map(|v| v.clamp(lo, 1.0)) else {
                break;
            };
            if pts.iter().any(|p| (p.0 - v).abs() < 1e-6) {
                break;
            }
            match full(v) {
                Some(p) => pts.push(p),
                None => break,
            }
        }
        if pts.is_empty() {
            return frozen;
        }
        pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)
    }

    /// Step two inside subgraph `k` (0-based), given its no-fault estimate.
    pub fn locate_faulted_line(
        &self,
        set: &MeasurementSet,
        k: usize,
        asm: &Assembly,
        base: &WlsResult,
    ) -> LineSearch {
        let chain = &self.chains[k];
        let eps = self.config.threshold;
        let s_max = chain.len();
        let margin = self.config.boundary_margin;
        let min_of = |b: usize, lo: f64| self.candidate_min(set, asm, base, b, lo);
        // minima over each full trunk branch, over the trunk branch minus its
        // upstream margin, and over each lateral
        let full: Vec<f64> = chain
            .increments
            .iter()
            .map(|i| min_of(i.trunk_edge, 0.0))
            .collect();
        let trimmed: Vec<f64> = chain
            .increments
            .iter()
            .map(|i| min_of(i.trunk_edge, margin))
            .collect();
        let lateral_min: Vec<Vec<f64>> = chain
            .increments
            .iter()
            .map(|i| i.laterals.iter().map(|&b| min_of(b, 0.0)).collect())
            .collect();
        let lat_best = |j: usize| lateral_min[j].iter().copied().fold(f64::INFINITY, f64::min);
        let mut suffix = vec![f64::INFINITY; s_max + 1];
        for j in (0..s_max).rev() {
            suffix[j] = full[j].min(lat_best(j)).min(suffix[j + 1]);
        }
        // T_s: fault anywhere beyond path s (increment index s is the next one)
        let beyond = |s: usize| {
            if s >= s_max {
                base.wmr
            } else {
                trimmed[s].min(lat_best(s)).min(suffix[s + 1])
            }
        };
        let trace: Vec<f64> = (1..=s_max).map(beyond).collect();
        let Some(s) = trace.iter().position(|&t| t > eps).map(|i| i + 1) else {
            return LineSearch {
                branch: None,
                trace,
                crossing: None,
                refinement: Vec::new(),
            };
        };
        let inc = &chain.increments[s - 1];
        let mut laterals: Vec<usize> = inc.laterals.clone();
        if s == 1 {
            laterals.splice(0..0, chain.root_laterals.iter().copied());
        }
        if laterals.is_empty() || !self.config.refine_laterals {
            return LineSearch {
                branch: Some(inc.trunk_edge),
                trace,
                crossing: Some(s),
                refinement: Vec::new(),
            };
        }
        let mut lateral_min = lateral_min[s - 1].clone();
        if s == 1 {
            lateral_min.splice(0..0, chain.root_laterals.iter().map(|&b| min_of(b, 0.0)));
        }
        // lateral chains hanging at trunk nodes, each entered through its head edge
        let mut chains: Vec<(usize, f64)> = Vec::new();
        for (&b, &j) in laterals.iter().zip(&lateral_min) {
            match chains.last_mut() {
                Some(c) if !chain.trunk_nodes.contains(&self.model.branches[b].from) => {
                    c.1 = c.1.min(j)
                }
                _ => chains.push((b, j)),
            }
        }
        let rest = beyond(s);
        let mut refinement = Vec::new();
        let mut verdict = None;
        for i in 0..=chains.len() {
            let t = chains[i..].iter().map(|c| c.1).fold(rest, f64::min);
            let added = if i == 0 {
                inc.trunk_edge
            } else {
                chains[i - 1].0
            };
            refinement.push(RefinementStep {
                added: self.model.branches[added].id.clone(),
                wmr: t,
            });
            if t > eps {
                verdict = Some(added);
                break;
            }
        }
        LineSearch {
            branch: verdict.or(chains.last().map(|c| c.0)),
            trace,
            crossing: Some(s),
            refinement,
        }
    }

    pub fn locate(&self, set: &MeasurementSet) -> Result<LocationVerdict, LocatorError> {
        let t0 = Instant::now();
        let one = self.identify_faulted_subgraph(set)?;
        let step_one_ms = t0.elapsed().as_secs_f64() * 1e3;
        let mut v = LocationVerdict {
            outcome: Outcome::NoFault,
            branch: None,
            branch_index: None,
            direct_branch: false,
            subgraph: None,
            tie: false,
            subgraph_wmr: one.wmr.clone(),
            path_wmr: Vec::new(),
            crossing: None,
            refinement: Vec::new(),
            threshold: self.config.threshold,
            step_one_ms,
            step_two_ms: 0.0,
        };
        if let Some(b) = one.direct_hit {
            v.outcome = Outcome::Located;
            v.branch = Some(self.model.branches[b].id.clone());
            v.branch_index = Some(b);
            v.direct_branch = true;
            return Ok(v);
        }
        if one.wmr[one.best] <= self.config.threshold {
            return Ok(v);
        }
        v.subgraph = Some(self.partition.subgraphs[one.best].index);
        v.tie = one.tie;
        let t1 = Instant::now();
        let (asm, base) = &one.estimates[one.best];
        let search = self.locate_faulted_line(set, one.best, asm, base);
        v.step_two_ms = t1.elapsed().as_secs_f64() * 1e3;
        v.path_wmr = search.trace;
        v.crossing = search.crossing;
        v.refinement = search.refinement;
        match search.branch {
            Some(b) => {
                v.outcome = Outcome::Located;
                v.branch = Some(self.model.branches[b].id.clone());
                v.branch_index = Some(b);
            }
            None => v.outcome = Outcome::NotFoundInSubgraph,
        }
        Ok(v)
    }
}

/// Outcome of step two.
#[derive(Clone, Debug, PartialEq)]
pub struct LineSearch {
    pub branch: Option<usize>,
    pub trace: Vec<f64>,
    pub crossing: Option<usize>,
    pub refinement: Vec<RefinementStep>,
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return f64::NAN;
    }
    let h = (s.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub quantile_value: f64,
    pub trials: usize,
    pub excluded: usize,
    /// Largest subgraph WMR of every retained trial.
    #[serde(skip)]
    pub samples: Vec<f64>,
}

/// No-fault Monte Carlo threshold: `safety_factor` times the configured
/// quantile of the largest WMR over all subgraphs and paths per trial.
pub fn calibrate_threshold(
    model: &FeederModel,
    profile: &crate::measurement::NoiseProfile,
    trials: usize,
    seed: u64,
    config: &LocatorConfig,
) -> Result<Calibration, LocatorError> {
    if trials < 100 {
        return Err(LocatorError::Calibration(format!(
            "at least 100 trials required, got {trials}"
        )));
    }
    let truth = crate::powerflow::run_powerflow(model, None)
        .map_err(|e| LocatorError::Calibration(e.to_string()))?;
    let exact = crate::measurement::measure_true(model, &truth, profile);
    let loc = Locator::new(model, config.clone())?;
    let cfg = config.dsse();
    let outcomes: Vec<Option<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let set = crate::measurement::synthesize(
                &exact,
                profile,
                crate::harness::derive_seed(seed, u64::MAX, t as u64),
            );
            let mut worst: f64 = 0.0;
            for s in &loc.scopes {
                let r = assemble(model, s, &set)
                    .and_then(|a| a.estimate(model, &set, &cfg))
                    .ok()?;
                if !r.converged {
                    return None;
                }
                // path statistics never exceed the subgraph WMR
                worst = worst.max(r.wmr);
            }
            Some(worst)
        })
        .collect();
    let samples: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let excluded = trials - samples.len();
    if excluded * 20 > trials {
        return Err(LocatorError::Calibration(format!(
            "{excluded} of {trials} trials did not converge"
        )));
    }
    let q = quantile(&samples, config.calibration_quantile);
    Ok(Calibration {
        threshold: config.safety_factor * q,
        quantile_value: q,
        trials,
        excluded,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::fixtures::*;
    use crate::feeder::PmuDoc;
    use crate::measurement::{measure_true, synthesize, Measurement, NoiseProfile};
    use crate::powerflow::{run_powerflow, FaultScenario, FaultType};
    use proptest::prelude::*;

    fn model() -> FeederModel {
        FeederModel::from_document(&five_node_doc()).unwrap()
    }

    fn faulted(
        m: &FeederModel,
        branch: &str,
        position: f64,
        ft: FaultType,
        z: f64,
    ) -> MeasurementSet {
        let sc = FaultScenario {
            branch: m.branch_index(branch).unwrap(),
            position,
            fault_type: ft,
            phases: ft.default_phases(),
            impedance_ohm: z,
        };
        let st = run_powerflow(m, Some(&sc)).unwrap();
        measure_true(m, &st, &NoiseProfile::default())
    }

    fn exact_config() -> LocatorConfig {
        LocatorConfig {
            threshold: 1.0,
            ..LocatorConfig::default()
        }
    }

    #[test]
    fn trunk_fault_is_located_on_its_branch() {
        let m = model();
        let set = faulted(&m, "3-5", 0.5, FaultType::LG, 5.0);
        let loc = Locator::new(&m, exact_config()).unwrap();
        let v = loc.locate(&set).unwrap();
        assert_eq!(v.outcome, Outcome::Located);
        assert_eq!(v.subgraph, Some(1));
        assert_eq!(v.branch.as_deref(), Some("3-5"));
        assert_eq!(v.crossing, Some(3));
        assert_eq!(v.path_wmr.len(), 3);
        assert!(
            v.path_wmr[0] < 1e-6 && v.path_wmr[1] < 1e-6,
            "{:?}",
            v.path_wmr
        );
        assert!(v.subgraph_wmr[0] > v.subgraph_wmr[1]);
    }

    #[test]
    fn lateral_fault_is_found_by_refinement() {
        let m = model();
        let set = faulted(&m, "3-4", 0.5, FaultType::LLL, 2.0);
        let loc = Locator::new(&m, exact_config()).unwrap();
        let v = loc.locate(&set).unwrap();
        assert_eq!(v.crossing, Some(2), "{:?}", v.path_wmr);
        assert_eq!(v.branch.as_deref(), Some("3-4"));
        let added: Vec<&str> = v.refinement.iter().map(|r| r.added.as_str()).collect();
        assert_eq!(added, ["2-3", "3-4"]);
        assert!(v.refinement[0].wmr <= 1.0 && v.refinement[1].wmr > 1.0);
    }

    #[test]
    fn refinement_can_be_switched_off() {
        let m = model();
        let set = faulted(&m, "3-4", 0.5, FaultType::LLL, 2.0);
        let loc = Locator::new(
            &m,
            LocatorConfig {
                refine_laterals: false,
                ..exact_config()
            },
        )
        .unwrap();
        let v = loc.locate(&set).unwrap();
        assert_eq!(v.branch.as_deref(), Some("2-3"));
        assert!(v.refinement.is_empty());
    }

    #[test]
    fn bolted_fault_on_first_branch() {
        let m = model();
        let set = faulted(&m, "1-2", 0.5, FaultType::LLL, 0.0);
        let loc = Locator::new(&m, exact_config()).unwrap();
        let v = loc.locate(&set).unwrap();
        assert!(v.path_wmr[0] > 1e3, "{:?}", v.path_wmr);
        assert_eq!(v.crossing, Some(1));
        assert_eq!(v.branch.as_deref(), Some("1-2"));
    }

    #[test]
    fn second_subgraph_fault() {
        let m = model();
        let set = faulted(&m, "6-7", 0.4, FaultType::LL, 5.0);
        let loc = Locator::new(&m, exact_config()).unwrap();
        let v = loc.locate(&set).unwrap();
        assert_eq!(v.subgraph, Some(2));
        assert_eq!(v.branch.as_deref(), Some("6-7"));
    }

    #[test]
    fn argmax_is_invariant_to_variance_scaling() {
        let m = model();
        let exact = faulted(&m, "2-3", 0.5, FaultType::LG, 50.0);
        let set = synthesize(&exact, &NoiseProfile::default(), 3);
        let mut scaled = MeasurementSet::new(set.scenario.clone());
        let c = 4.0;
        for e in set.entries() {
            scaled.push(Measurement {
                variance: [e.variance[0] * c, e.variance[1] * c],
                ..*e
            });
        }
        let loc = Locator::new(&m, LocatorConfig::default()).unwrap();
        let a = loc.identify_faulted_subgraph(&set).unwrap();
        let b = loc.identify_faulted_subgraph(&scaled).unwrap();
        assert_eq!(a.best, b.best);
        for (ja, jb) in a.wmr.iter().zip(&b.wmr) {
            assert!((ja / c - jb).abs() <= 1e-6 * ja.max(1.0), "{ja} {jb}");
        }
    }

    #[test]
    fn no_fault_guard() {
        let m = model();
        let st = run_powerflow(&m, None).unwrap();
        let set = synthesize(
            &measure_true(&m, &st, &NoiseProfile::default()),
            &NoiseProfile::default(),
            11,
        );
        let v = Locator::new(&m, LocatorConfig::default())
            .unwrap()
            .locate(&set)
            .unwrap();
        assert_eq!(v.outcome, Outcome::NoFault);
        assert!(v.branch.is_none() && v.subgraph.is_none());
        assert_eq!(v.subgraph_wmr.len(), 2);
    }

    fn with_direct_branch() -> FeederModel {
        let mut doc = five_node_doc();
        doc.pmus = vec![
            PmuDoc {
                node: "1".into(),
                branches: vec!["1-2".into()],
            },
            PmuDoc {
                node: "5".into(),
                branches: vec!["3-5".into(), "5-6".into()],
            },
            PmuDoc {
                node: "6".into(),
                branches: vec!["5-6".into(), "6-7".into()],
            },
            PmuDoc {
                node: "7".into(),
                branches: vec!["6-7".into()],
            },
        ];
        FeederModel::from_document(&doc).unwrap()
    }

    #[test]
    fn direct_branch_screen() {
        let m = with_direct_branch();
        let loc = Locator::new(&m, LocatorConfig::default()).unwrap();
        let b56 = m.branch_index("5-6").unwrap();
        assert!(loc.partition.direct_branches.contains(&b56));
        let set = faulted(&m, "5-6", 0.5, FaultType::LG, 20.0);
        let v = loc.locate(&set).unwrap();
        assert!(v.direct_branch);
        assert_eq!(v.branch.as_deref(), Some("5-6"));

        let st = run_powerflow(&m, None).unwrap();
        let clean = synthesize(
            &measure_true(&m, &st, &NoiseProfile::default()),
            &NoiseProfile::default(),
            2,
        );
        assert!(loc.direct_branch_statistic(&clean, b56).unwrap() < 5.0);
    }

    #[test]
    fn calibration_collapses_without_noise() {
        let m = model();
        let cal = calibrate_threshold(
            &m,
            &NoiseProfile::noiseless(),
            100,
            1,
            &LocatorConfig::default(),
        )
        .unwrap();
        assert!(cal.threshold < 1e-6, "{}", cal.threshold);
        assert_eq!(cal.excluded, 0);
        assert_eq!(cal.samples.len(), 100);
    }

    #[test]
    fn calibration_scales_the_quantile() {
        let m = model();
        let cfg = LocatorConfig::default();
        let cal = calibrate_threshold(&m, &NoiseProfile::default(), 200, 5, &cfg).unwrap();
        assert!((cal.threshold - cfg.safety_factor * cal.quantile_value).abs() < 1e-12);
        assert!(cal.quantile_value >= quantile(&cal.samples, 0.5));
        assert!(calibrate_threshold(&m, &NoiseProfile::default(), 99, 5, &cfg).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[0.0, 10.0], 0.25), 2.5);
        assert_eq!(quantile(&[4.0], 0.999), 4.0);
        assert!(quantile(&[], 0.5).is_nan());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        // on noiseless data every path holding the fault scores above every
        // fault-free path, and the verdict lies in the crossing increment
        #[test]
        fn noiseless_trace_separates(
            br in prop::sample::select(vec!["1-2", "2-3", "3-5"]),
            pos in 0.3f64..0.7,
            ft in prop::sample::select(vec![FaultType::LG, FaultType::LL, FaultType::LLG, FaultType::LLL]),
            z in 0.0f64..20.0,
        ) {
            let m = model();
            let set = faulted(&m, br, pos, ft, z);
            let loc = Locator::new(&m, exact_config()).unwrap();
            let v = loc.locate(&set).unwrap();
            let chain = &loc.chains[0];
            let b = m.branch_index(br).unwrap();
            let s_fault = chain.increments.iter().position(|i| i.edges().any(|e| e == b)).unwrap();
            let clean = v.path_wmr[..s_fault].iter().copied().fold(0.0, f64::max);
            for &t in &v.path_wmr[s_fault..] {
                prop_assert!(t > clean, "{:?}", v.path_wmr);
            }
            let s = v.crossing.unwrap();
            prop_assert!(chain.increments[s - 1].edges().any(|e| Some(e) == v.branch_index));
            prop_assert_eq!(v.branch.as_deref(), Some(br));
        }
    }
}
