//! Measurement vectors: exact values from a solved state, seeded noise,
//! and the power-to-equivalent-current conversions used by the estimator.

use std::collections::HashMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{FeederModel, Subgraph};
use crate::phase::{Phase, Vec3, C64};
use crate::powerflow::TruePhasorState;

/// Smallest variance assigned to any measurement, p.u.².
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Below this magnitude a voltage is unusable as a divisor.
pub const DEGENERATE_VOLTAGE_PU: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasurementError {
    #[error("voltage magnitude {0:.3e} p.u. too small for an equivalent-current conversion")]
    DegenerateVoltage(f64),
    #[error("boundary node {node:?} has no measured outflow current on branch {branch:?}")]
    MissingBoundaryCurrent { node: String, branch: String },
    #[error("no voltage measurement at root {0:?}")]
    MissingRootVoltage(String),
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("measurement file line {line}: {reason}")]
    Row { line: u64, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeasKind {
    VRect,
    IRect,
    PqPseudo,
    IEquiv,
    ISub,
}

impl MeasKind {
    pub fn label(self) -> &'static str {
        match self {
            MeasKind::VRect => "V_rect",
            MeasKind::IRect => "I_rect",
            MeasKind::PqPseudo => "PQ_pseudo",
            MeasKind::IEquiv => "I_equiv",
            MeasKind::ISub => "I_sub",
        }
    }
}

/// Which end of a branch a current phasor was taken at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum End {
    Sending,
    Receiving,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Location {
    Node(usize),
    Branch { branch: usize, end: End },
}

/// Source of a measurement; decides its error class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Meter {
    Pmu,
    /// Load forecast.
    Pseudo,
    /// Metered distributed generation, stored as negative consumption.
    DgMeter,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub kind: MeasKind,
    pub location: Location,
    pub phase: Phase,
    pub meter: Meter,
    /// Rectangular phasor for V/I kinds, (P, Q) consumed for pseudo powers. p.u.
    pub value: [f64; 2],
    pub variance: [f64; 2],
}

impl Measurement {
    pub fn complex(&self) -> C64 {
        C64::new(self.value[0], self.value[1])
    }
}

type Key = (MeasKind, Location, Phase, Meter);

#[derive(Clone, Debug, Default)]
pub struct MeasurementSet {
    entries: Vec<Measurement>,
    index: HashMap<Key, usize>,
    pub scenario: String,
    pub seed: Option<u64>,
}

impl MeasurementSet {
    pub fn new(scenario: impl Into<String>) -> Self {
        MeasurementSet {
            scenario: scenario.into(),
            ..Default::default()
        }
    }

    /// Adds or replaces the entry with the same (kind, location, phase, meter).
    pub fn push(&mut self, m: Measurement) {
        let key = (m.kind, m.location, m.phase, m.meter);
        match self.index.get(&key) {
            Some(&i) => self.entries[i] = m,
            None => {
                self.index.insert(key, self.entries.len());
                self.entries.push(m);
            }
        }
    }

    pub fn entries(&self) -> &[Measurement] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn get(&self, key: Key) -> Option<&Measurement> {
        self.index.get(&key).map(|&i| &self.entries[i])
    }

    pub fn voltage(&self, node: usize, phase: Phase) -> Option<&Measurement> {
        self.get((MeasKind::VRect, Location::Node(node), phase, Meter::Pmu))
    }

    pub fn current(&self, branch: usize, end: End, phase: Phase) -> Option<&Measurement> {
        self.get((
            MeasKind::IRect,
            Location::Branch { branch, end },
            phase,
            Meter::Pmu,
        ))
    }

    /// Measured current on `branch` taken at either end, preferring `end`.
    pub fn any_current(&self, branch: usize, end: End, phase: Phase) -> Option<&Measurement> {
        let other = if end == End::Sending {
            End::Receiving
        } else {
            End::Sending
        };
        self.current(branch, end, phase)
            .or_else(|| self.current(branch, other, phase))
    }

    pub fn pseudo_powers(&self, node: usize, phase: Phase) -> impl Iterator<Item = &Measurement> {
        [Meter::Pseudo, Meter::DgMeter]
            .into_iter()
            .filter_map(move |m| self.get((MeasKind::PqPseudo, Location::Node(node), phase, m)))
    }

    /// CSV dump: kind, location, phase, real, imag, var_real, var_imag, seed, meter.
    pub fn write_csv<W: Write>(&self, model: &FeederModel, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "kind", "location", "phase", "real", "imag", "var_real", "var_imag", "seed", "meter",
        ])?;
        let seed = self.seed.map(|s| s.to_string()).unwrap_or_default();
        for m in &self.entries {
            let loc = match m.location {
                Location::Node(k) => model.nodes[k].id.clone(),
                Location::Branch { branch, end } => {
                    let b = &model.branches[branch];
                    let at = if end == End::Sending { b.from } else { b.to };
                    format!("{}@{}", b.id, model.nodes[at].id)
                }
            };
            w.write_record([
                m.kind.label().to_string(),
                loc,
                m.phase.as_char().to_string(),
                m.value[0].to_string(),
                m.value[1].to_string(),
                m.variance[0].to_string(),
                m.variance[1].to_string(),
                seed.clone(),
                format!("{:?}", m.meter),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl MeasurementSet {
    /// Reads the format written by [`MeasurementSet::write_csv`].
    pub fn read_csv<R: std::io::Read>(
        model: &FeederModel,
        input: R,
    ) -> Result<MeasurementSet, ReadError> {
        let mut r = csv::Reader::from_reader(input);
        let mut set = MeasurementSet::new("");
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let bad = |reason: String| ReadError::Row { line, reason };
            if rec.len() < 8 {
                return Err(bad(format!(
                    "expected at least 8 fields, found {}",
                    rec.len()
                )));
            }
            let kind = match &rec[0] {
                "V_rect" => MeasKind::VRect,
                "I_rect" => MeasKind::IRect,
                "PQ_pseudo" => MeasKind::PqPseudo,
                "I_equiv" => MeasKind::IEquiv,
                "I_sub" => MeasKind::ISub,
                k => return Err(bad(format!("unknown kind {k:?}"))),
            };
            let location = match rec[1].split_once('@') {
                Some((b, at)) => {
                    let branch = model
                        .branch_index(b)
                        .ok_or_else(|| bad(format!("unknown branch {b:?}")))?;
                    let at = model
                        .node_index(at)
                        .ok_or_else(|| bad(format!("unknown node {at:?}")))?;
                    let end = if model.branches[branch].from == at {
                        End::Sending
                    } else {
                        End::Receiving
                    };
                    Location::Branch { branch, end }
                }
                None => Location::Node(
                    model
                        .node_index(&rec[1])
                        .ok_or_else(|| bad(format!("unknown node {:?}", &rec[1])))?,
                ),
            };
            let phase = rec[2]
                .chars()
                .next()
                .and_then(Phase::from_char)
                .ok_or_else(|| bad(format!("bad phase {:?}", &rec[2])))?;
            let num = |i: usize| {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("field {}: {e}", i + 1)))
            };
            let value = [num(3)?, num(4)?];
            let variance = [num(5)?, num(6)?];
            let meter = match rec.get(8).unwrap_or("") {
                "Pmu" => Meter::Pmu,
                "Pseudo" => Meter::Pseudo,
                "DgMeter" => Meter::DgMeter,
                "" if kind == MeasKind::PqPseudo => Meter::Pseudo,
                "" => Meter::Pmu,
                m => return Err(bad(format!("unknown meter {m:?}"))),
            };
            if set.seed.is_none() && !rec[7].is_empty() {
                set.seed = rec[7].parse().ok();
            }
            set.push(Measurement {
                kind,
                location,
                phase,
                meter,
                value,
                variance,
            });
        }
        Ok(set)
    }
}

/// Maximum errors of each meter class and the divisor turning them into σ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseProfile {
    pub pmu_mag_max_err: f64,
    pub pmu_ang_max_err: f64,
    pub pseudo_max_err: f64,
    pub dg_meter_max_err: f64,
    pub sigma_rule: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile {
            pmu_mag_max_err: 0.01,
            pmu_ang_max_err: 0.01,
            pseudo_max_err: 0.20,
            dg_meter_max_err: 0.03,
            sigma_rule: 3.0,
        }
    }
}

impl NoiseProfile {
    pub fn noiseless() -> Self {
        NoiseProfile {
            pmu_mag_max_err: 0.0,
            pmu_ang_max_err: 0.0,
            pseudo_max_err: 0.0,
            dg_meter_max_err: 0.0,
            sigma_rule: 3.0,
        }
    }

    /// Polar standard deviations (magnitude, angle) of a phasor reading.
    fn pmu_sigmas(&self, true_value: C64) -> (f64, f64) {
        (
            self.pmu_mag_max_err * true_value.norm() / self.sigma_rule,
            self.pmu_ang_max_err / self.sigma_rule,
        )
    }

    fn power_fraction(&self, meter: Meter) -> f64 {
        match meter {
            Meter::DgMeter => self.dg_meter_max_err,
            _ => self.pseudo_max_err,
        }
    }

    /// Variance pair assigned to a measurement with true value `value`.
    pub fn variance(&self, kind: MeasKind, meter: Meter, value: [f64; 2]) -> [f64; 2] {
        let v = match kind {
            MeasKind::PqPseudo => {
                let e = self.power_fraction(meter) / self.sigma_rule;
                [(e * value[0]).powi(2), (e * value[1]).powi(2)]
            }
            _ => {
                let z = C64::new(value[0], value[1]);
                polar_to_rect_variance(z, self.pmu_sigmas(z))
            }
        };
        [v[0].max(VARIANCE_FLOOR), v[1].max(VARIANCE_FLOOR)]
    }
}

/// First-order propagation of independent magnitude/angle errors.
pub fn polar_to_rect_variance(z: C64, (s_mag, s_ang): (f64, f64)) -> [f64; 2] {
    let (mag, th) = (z.norm(), z.arg());
    let (s, c) = th.sin_cos();
    let a = s_mag * s_mag;
    let b = (mag * s_ang).powi(2);
    [a * c * c + b * s * s, a * s * s + b * c * c]
}

/// Noise-free measurements of every meter on the feeder, with variances
/// assigned from `profile`.
pub fn measure_true(
    model: &FeederModel,
    state: &TruePhasorState,
    profile: &NoiseProfile,
) -> MeasurementSet {
    let mut set = MeasurementSet::new("");
    let mut add = |kind, location, phase, meter, z: C64| {
        let value = [z.re, z.im];
        set.push(Measurement {
            kind,
            location,
            phase,
            meter,
            value,
            variance: profile.variance(kind, meter, value),
        });
    };
    for pmu in &model.pmus {
        let k = pmu.node;
        for p in model.nodes[k].phases.iter() {
            add(
                MeasKind::VRect,
                Location::Node(k),
                p,
                Meter::Pmu,
                state.node_voltages[k][p.index()],
            );
        }
        for &b in &pmu.measured_branches {
            let br = &model.branches[b];
            let (end, i) = if br.from == k {
                (End::Sending, state.sending_currents[b])
            } else {
                (End::Receiving, state.receiving_currents[b])
            };
            for p in br.phases.iter() {
                add(
                    MeasKind::IRect,
                    Location::Branch { branch: b, end },
                    p,
                    Meter::Pmu,
                    i[p.index()],
                );
            }
        }
    }
    for (k, node) in model.nodes.iter().enumerate() {
        if k == model.slack {
            continue;
        }
        for p in node.phases.iter() {
            let i = p.index();
            // actual consumption, which departs from nominal once a load
            // falls back to constant impedance
            let nominal = model.loads[k][i] - model.dgs[k][i];
            let drawn = state.node_voltages[k][i] * state.load_currents[k][i].conj();
            let scale = if nominal.norm() > 0.0 {
                drawn.norm() / nominal.norm()
            } else {
                1.0
            };
            let (load, dg) = (model.loads[k][i] * scale, model.dgs[k][i] * scale);
            let has_dg = dg != C64::new(0.0, 0.0);
            if load != C64::new(0.0, 0.0) || !has_dg {
                add(
                    MeasKind::PqPseudo,
                    Location::Node(k),
                    p,
                    Meter::Pseudo,
                    load,
                );
            }
            if has_dg {
                add(
                    MeasKind::PqPseudo,
                    Location::Node(k),
                    p,
                    Meter::DgMeter,
                    -dg,
                );
            }
        }
    }
    set
}

/// Perturbs `exact` with Gaussian noise drawn from a generator seeded by `seed`.
pub fn synthesize(exact: &MeasurementSet, profile: &NoiseProfile, seed: u64) -> MeasurementSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MeasurementSet::new(exact.scenario.clone());
    out.seed = Some(seed);
    for m in exact.entries() {
        let n1: f64 = StandardNormal.sample(&mut rng);
        let n2: f64 = StandardNormal.sample(&mut rng);
        let mut noisy = *m;
        match m.kind {
            MeasKind::PqPseudo => {
                let e = profile.power_fraction(m.meter) / profile.sigma_rule;
                noisy.value = [
                    m.value[0] + e * m.value[0].abs() * n1,
                    m.value[1] + e * m.value[1].abs() * n2,
                ];
            }
            MeasKind::VRect | MeasKind::IRect => {
                let z = m.complex();
                let (s_mag, s_ang) = profile.pmu_sigmas(z);
                if s_mag > 0.0 || s_ang > 0.0 {
                    let perturbed = C64::from_polar(z.norm() + s_mag * n1, z.arg() + s_ang * n2);
                    noisy.value = [perturbed.re, perturbed.im];
                }
            }
            // derived quantities carry no noise of their own
            MeasKind::IEquiv | MeasKind::ISub => {}
        }
        noisy.variance = profile.variance(m.kind, m.meter, m.value);
        out.push(noisy);
    }
    out
}

/// Complex current and rectangular variance pair.
pub type CurrentEstimate = (C64, [f64; 2]);

/// Equivalent current conj(S / V) of a consumed power `s` with variances
/// `var_pq`, linearized about `v`.
pub fn to_equivalent_current(
    s: C64,
    var_pq: [f64; 2],
    v: C64,
) -> Result<CurrentEstimate, MeasurementError> {
    let mag = v.norm();
    if mag < DEGENERATE_VOLTAGE_PU {
        return Err(MeasurementError::DegenerateVoltage(mag));
    }
    let i = (s / v).conj();
    let (sn, cs) = v.arg().sin_cos();
    let m2 = mag * mag;
    let var = [
        ((var_pq[0] * cs * cs + var_pq[1] * sn * sn) / m2).max(VARIANCE_FLOOR),
        ((var_pq[0] * sn * sn + var_pq[1] * cs * cs) / m2).max(VARIANCE_FLOOR),
    ];
    Ok((i, var))
}

/// Equivalent current of every pseudo power at (`node`, `phase`), summed.
/// A node with no pseudo entry yields a zero current at the variance floor.
pub fn node_equivalent(
    set: &MeasurementSet,
    node: usize,
    phase: Phase,
    v: C64,
) -> Result<CurrentEstimate, MeasurementError> {
    let mut total = C64::new(0.0, 0.0);
    let mut var = [0.0, 0.0];
    let mut any = false;
    for m in set.pseudo_powers(node, phase) {
        let (i, vv) = to_equivalent_current(m.complex(), m.variance, v)?;
        total += i;
        var[0] += vv[0];
        var[1] += vv[1];
        any = true;
    }
    if !any {
        var = [VARIANCE_FLOOR, VARIANCE_FLOOR];
    }
    Ok((total, var))
}

/// Injection seen at a far-end boundary node: its own equivalent current
/// plus the measured currents leaving the scope through `outflows`.
pub fn boundary_equivalent(
    model: &FeederModel,
    set: &MeasurementSet,
    node: usize,
    phase: Phase,
    own: CurrentEstimate,
    outflows: &[usize],
) -> Result<CurrentEstimate, MeasurementError> {
    let (mut total, mut var) = own;
    for &b in outflows {
        if !model.branches[b].phases.contains(phase) {
            continue;
        }
        let m = set.current(b, End::Sending, phase).ok_or_else(|| {
            MeasurementError::MissingBoundaryCurrent {
                node: model.nodes[node].id.clone(),
                branch: model.branches[b].id.clone(),
            }
        })?;
        total += m.complex();
        var[0] += m.variance[0];
        var[1] += m.variance[1];
    }
    Ok((total, var))
}

/// Branches leaving `node` that are not part of `sub`.
pub fn outflow_branches(model: &FeederModel, sub: &Subgraph, node: usize) -> Vec<usize> {
    model.nodes[node]
        .children
        .iter()
        .copied()
        .filter(|&b| !sub.contains_edge(b))
        .collect()
}

/// Node, injected current and its (real, imaginary) variances per phase.
pub type NodeInjection = (usize, Vec3, [[f64; 3]; 2]);

/// Starting injections for every non-root node of `sub`, evaluated with the
/// root voltage at every node.
pub fn initial_equivalents(
    model: &FeederModel,
    sub: &Subgraph,
    set: &MeasurementSet,
) -> Result<Vec<NodeInjection>, MeasurementError> {
    let root = sub.root;
    let mut v_root = Vec3::zeros();
    for p in model.nodes[root].phases.iter() {
        let m = set
            .voltage(root, p)
            .ok_or_else(|| MeasurementError::MissingRootVoltage(model.nodes[root].id.clone()))?;
        v_root[p.index()] = m.complex();
    }
    let mut out = Vec::new();
    for &(k, class) in &sub.nodes {
        if k == root {
            continue;
        }
        let mut i = Vec3::zeros();
        let mut var = [[0.0; 3]; 2];
        let outflows = if class == crate::feeder::NodeClass::FarPmu {
            outflow_branches(model, sub, k)
        } else {
            Vec::new()
        };
        for p in model.nodes[k].phases.iter() {
            let own = node_equivalent(set, k, p, v_root[p.index()])?;
            let (c, v) = boundary_equivalent(model, set, k, p, own, &outflows)?;
            i[p.index()] = c;
            var[0][p.index()] = v[0];
            var[1][p.index()] = v[1];
        }
        out.push((k, i, var));
    }
    Ok(out)
}
