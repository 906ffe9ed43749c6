//! Ground-truth three-phase power flow: forward-backward sweep on the radial
//! tree, optionally with a shunt fault stamped part-way along one branch.
//!
//! The faulted branch is split at `position` into two sub-branches joined by
//! a fictitious node that carries the fault admittance. Each sweep computes
//! the open-circuit voltage at that node and closes the fault through its
//! Thevenin impedance, so even bolted faults converge in a few sweeps.

use std::io::Write;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::FeederModel;
use crate::phase::{balanced, mask_vec, max_abs, Mat3, Phase, PhaseSet, Vec3, C64};

/// Conductance used in place of a zero fault impedance, p.u.
pub const BOLTED_CONDUCTANCE_PU: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("power flow did not converge after {iterations} sweeps (last max |dV| = {last_change:.3e} p.u.)")]
    NonConvergence { iterations: usize, last_change: f64 },
    #[error("invalid fault scenario: {0}")]
    InvalidScenario(String),
    #[error("singular fault stamp on branch {0:?}")]
    SingularFault(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultType {
    LG,
    LL,
    LLG,
    LLL,
}

impl FaultType {
    pub fn phase_count(self) -> usize {
        match self {
            FaultType::LG => 1,
            FaultType::LL | FaultType::LLG => 2,
            FaultType::LLL => 3,
        }
    }

    /// Phases used when a campaign does not name them explicitly.
    pub fn default_phases(self) -> PhaseSet {
        match self {
            FaultType::LG => PhaseSet::single(Phase::A),
            FaultType::LL | FaultType::LLG => PhaseSet::from_phases([Phase::B, Phase::C]),
            FaultType::LLL => PhaseSet::ABC,
        }
    }
}

impl std::fmt::Display for FaultType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for FaultType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "LG" => Ok(FaultType::LG),
            "LL" => Ok(FaultType::LL),
            "LLG" => Ok(FaultType::LLG),
            "LLL" => Ok(FaultType::LLL),
            _ => Err(format!("unknown fault type {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaultScenario {
    pub branch: usize,
    /// Fraction of the branch length from its upstream end, in (0, 1).
    pub position: f64,
    pub fault_type: FaultType,
    pub phases: PhaseSet,
    pub impedance_ohm: f64,
}

/// Scenario file schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub branch: String,
    pub position: f64,
    #[serde(rename = "type")]
    pub fault_type: FaultType,
    #[serde(default)]
    pub phases: Option<PhaseSet>,
    pub impedance_ohm: f64,
}

impl FaultScenario {
    pub fn from_doc(doc: &ScenarioDoc, model: &FeederModel) -> Result<Self, PowerFlowError> {
        let branch = model.branch_index(&doc.branch).ok_or_else(|| {
            PowerFlowError::InvalidScenario(format!("unknown branch {:?}", doc.branch))
        })?;
        let s = FaultScenario {
            branch,
            position: doc.position,
            fault_type: doc.fault_type,
            phases: doc
                .phases
                .unwrap_or_else(|| doc.fault_type.default_phases()),
            impedance_ohm: doc.impedance_ohm,
        };
        s.validate(model)?;
        Ok(s)
    }

    pub fn to_doc(&self, model: &FeederModel) -> ScenarioDoc {
        ScenarioDoc {
            branch: model.branches[self.branch].id.clone(),
            position: self.position,
            fault_type: self.fault_type,
            phases: Some(self.phases),
            impedance_ohm: self.impedance_ohm,
        }
    }

    pub fn validate(&self, model: &FeederModel) -> Result<(), PowerFlowError> {
        let bad = |m: String| Err(PowerFlowError::InvalidScenario(m));
        let Some(b) = model.branches.get(self.branch) else {
            return bad(format!("branch index {} out of range", self.branch));
        };
        if !(self.position > 0.0 && self.position < 1.0) {
            return bad(format!("position {} outside (0, 1)", self.position));
        }
        if !(self.impedance_ohm >= 0.0 && self.impedance_ohm.is_finite()) {
            return bad(format!(
                "impedance {} must be finite and non-negative",
                self.impedance_ohm
            ));
        }
        if self.phases.len() != self.fault_type.phase_count() {
            return bad(format!(
                "{} fault needs {} phases, got {}",
                self.fault_type,
                self.fault_type.phase_count(),
                self.phases
            ));
        }
        if !self.phases.is_subset_of(b.phases) {
            return bad(format!(
                "phases {} not present on branch {}",
                self.phases, b.id
            ));
        }
        Ok(())
    }

    /// Fault admittance matrix in p.u. over the three phases.
    pub fn admittance(&self, z_base: f64) -> Mat3 {
        let y = if self.impedance_ohm == 0.0 {
            C64::new(BOLTED_CONDUCTANCE_PU, 0.0)
        } else {
            C64::new(z_base / self.impedance_ohm, 0.0)
        };
        let ph: Vec<usize> = self.phases.iter().map(Phase::index).collect();
        let mut m = Mat3::zeros();
        match self.fault_type {
            FaultType::LG | FaultType::LLG => {
                for &p in &ph {
                    m[(p, p)] = y;
                }
            }
            FaultType::LL => {
                let (p, q) = (ph[0], ph[1]);
                m[(p, p)] = y;
                m[(q, q)] = y;
                m[(p, q)] = -y;
                m[(q, p)] = -y;
            }
            FaultType::LLL => {
                // three equal legs to a floating star point
                for i in 0..3 {
                    for j in 0..3 {
                        m[(i, j)] = if i == j { y * (2.0 / 3.0) } else { -y / 3.0 };
                    }
                }
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerFlowOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Below this voltage magnitude constant-power loads turn into constant impedances.
    pub v_min_pu: f64,
    pub slack_voltage: Vec3,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        PowerFlowOptions {
            tolerance: 1e-9,
            max_iterations: 100,
            v_min_pu: 0.7,
            slack_voltage: balanced(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaultSolution {
    pub branch: usize,
    pub position: f64,
    pub phases: PhaseSet,
    pub node_voltage: Vec3,
    /// Current drawn by the fault per phase (zero on uninvolved phases).
    pub current: Vec3,
}

/// Solved phasors on the original topology (p.u.).
#[derive(Clone, Debug, PartialEq)]
pub struct TruePhasorState {
    pub node_voltages: Vec<Vec3>,
    /// Branch current at the upstream end, reference direction from → to.
    pub sending_currents: Vec<Vec3>,
    /// Branch current at the downstream end; differs from the sending
    /// current only on the faulted branch.
    pub receiving_currents: Vec<Vec3>,
    /// Current drawn by the net load at each node, evaluated at the final voltages.
    pub load_currents: Vec<Vec3>,
    pub fault: Option<FaultSolution>,
    pub converged: bool,
    pub iterations: usize,
    pub max_kcl_residual: f64,
    pub max_kvl_residual: f64,
}

/// Load current for constant power `s` (consumption positive) at voltage `v`.
fn load_current(s: C64, v: C64, v_min: f64) -> C64 {
    if s == C64::new(0.0, 0.0) {
        return C64::new(0.0, 0.0);
    }
    let mag = v.norm();
    if mag >= v_min {
        (s / v).conj()
    } else {
        s.conj() * v / (v_min * v_min)
    }
}

fn node_load_currents(model: &FeederModel, v: &[Vec3], v_min: f64) -> Vec<Vec3> {
    (0..model.nodes.len())
        .map(|k| {
            let s = model.net_load(k);
            let ph = model.nodes[k].phases;
            Vec3::from_fn(|i, _| {
                if ph.contains(Phase::from_index(i)) {
                    load_current(s[i], v[k][i], v_min)
                } else {
                    C64::new(0.0, 0.0)
                }
            })
        })
        .collect()
}

/// Expanded radial network with the fictitious fault node appended.
struct Network {
    /// (from, to, z, phases) for every sub-branch, in preorder of `to`.
    edges: Vec<(usize, usize, Mat3, PhaseSet)>,
    node_phases: Vec<PhaseSet>,
    slack: usize,
}

impl Network {
    fn build(model: &FeederModel, fault: Option<&FaultScenario>) -> Network {
        let n = model.nodes.len();
        let mut node_phases: Vec<PhaseSet> = model.nodes.iter().map(|nd| nd.phases).collect();
        let mut edges = Vec::with_capacity(model.branches.len() + 1);
        for &k in &model.preorder {
            let Some(bi) = model.nodes[k].parent else {
                continue;
            };
            let b = &model.branches[bi];
            match fault {
                Some(f) if f.branch == bi => {
                    node_phases.push(b.phases);
                    edges.push((b.from, n, b.z * C64::new(f.position, 0.0), b.phases));
                    edges.push((n, b.to, b.z * C64::new(1.0 - f.position, 0.0), b.phases));
                }
                _ => edges.push((b.from, b.to, b.z, b.phases)),
            }
        }
        Network {
            edges,
            node_phases,
            slack: model.slack,
        }
    }

    fn backward(&self, injections: &[Vec3]) -> Vec<Vec3> {
        let mut through = injections.to_vec();
        let mut currents = vec![Vec3::zeros(); self.edges.len()];
        for (e, &(from, to, _, ph)) in self.edges.iter().enumerate().rev() {
            let i = mask_vec(through[to], ph);
            currents[e] = i;
            through[from] += i;
        }
        currents
    }

    fn forward(&self, slack: &Vec3, currents: &[Vec3]) -> Vec<Vec3> {
        let mut v = vec![Vec3::zeros(); self.node_phases.len()];
        v[self.slack] = mask_vec(*slack, self.node_phases[self.slack]);
        for (e, &(from, to, z, _)) in self.edges.iter().enumerate() {
            v[to] = mask_vec(v[from] - z * currents[e], self.node_phases[to]);
        }
        v
    }

    /// Sum of sub-branch impedances from the slack to `node`.
    fn thevenin(&self, node: usize) -> Mat3 {
        let mut z = Mat3::zeros();
        let mut k = node;
        while k != self.slack {
            let &(from, _, ze, _) = self
                .edges
                .iter()
                .find(|e| e.1 == k)
                .expect("node has a parent edge");
            z += ze;
            k = from;
        }
        z
    }
}

pub fn run_powerflow(
    model: &FeederModel,
    scenario: Option<&FaultScenario>,
) -> Result<TruePhasorState, PowerFlowError> {
    run_powerflow_with(model, scenario, &PowerFlowOptions::default())
}

pub fn run_powerflow_with(
    model: &FeederModel,
    scenario: Option<&FaultScenario>,
    opts: &PowerFlowOptions,
) -> Result<TruePhasorState, PowerFlowError> {
    if let Some(s) = scenario {
        s.validate(model)?;
    }
    let n = model.nodes.len();
    let net = Network::build(model, scenario);
    let fault_node = scenario.map(|_| n);
    let y_fault = scenario.map(|s| s.admittance(model.base.z_base()));
    let closing = match (fault_node, y_fault) {
        (Some(f), Some(y)) => {
            let m: Mat3 = Matrix3::identity() + y * net.thevenin(f);
            Some(m.try_inverse().ok_or_else(|| {
                PowerFlowError::SingularFault(model.branches[scenario.unwrap().branch].id.clone())
            })?)
        }
        _ => None,
    };

    let mut v: Vec<Vec3> = net
        .node_phases
        .iter()
        .map(|ph| mask_vec(opts.slack_voltage, *ph))
        .collect();
    let mut currents = vec![Vec3::zeros(); net.edges.len()];
    let mut i_fault = Vec3::zeros();
    let mut last_change = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        iterations += 1;
        let mut inj = node_load_currents(model, &v[..n], opts.v_min_pu);
        if let (Some(f), Some(y), Some(close)) = (fault_node, y_fault, closing) {
            inj.push(Vec3::zeros());
            let open = net.forward(&opts.slack_voltage, &net.backward(&inj));
            i_fault = close * (y * open[f]);
            inj[f] = i_fault;
        }
        currents = net.backward(&inj);
        let v_new = net.forward(&opts.slack_voltage, &currents);
        last_change = v_new
            .iter()
            .zip(&v)
            .map(|(a, b)| max_abs(&(a - b)))
            .fold(0.0, f64::max);
        v = v_new;
        if last_change < opts.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(PowerFlowError::NonConvergence {
            iterations,
            last_change,
        });
    }

    // map sub-branch currents back onto the original branches
    let mut sending = vec![Vec3::zeros(); model.branches.len()];
    let mut receiving = vec![Vec3::zeros(); model.branches.len()];
    let mut edge_of_branch = Vec::with_capacity(net.edges.len());
    for &k in &model.preorder {
        if let Some(bi) = model.nodes[k].parent {
            edge_of_branch.push(bi);
            if scenario.is_some_and(|s| s.branch == bi) {
                edge_of_branch.push(bi);
            }
        }
    }
    for (e, &bi) in edge_of_branch.iter().enumerate() {
        let (from, to, _, _) = net.edges[e];
        if from == model.branches[bi].from {
            sending[bi] = currents[e];
        }
        if to == model.branches[bi].to {
            receiving[bi] = currents[e];
        }
    }

    let load_currents = node_load_currents(model, &v[..n], opts.v_min_pu);
    let fault = scenario.map(|s| FaultSolution {
        branch: s.branch,
        position: s.position,
        phases: s.phases,
        node_voltage: v[n],
        current: i_fault,
    });

    // KVL on every sub-branch, KCL on every node of the expanded network
    let max_kvl_residual = net
        .edges
        .iter()
        .enumerate()
        .map(|(e, &(from, to, z, ph))| max_abs(&mask_vec(v[from] - z * currents[e] - v[to], ph)))
        .fold(0.0, f64::max);
    let mut balance = vec![Vec3::zeros(); net.node_phases.len()];
    for (e, &(from, to, _, _)) in net.edges.iter().enumerate() {
        balance[from] -= currents[e];
        balance[to] += currents[e];
    }
    for k in 0..n {
        balance[k] -= load_currents[k];
    }
    if let Some(f) = fault_node {
        balance[f] -= i_fault;
    }
    let max_kcl_residual = balance
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != net.slack)
        .map(|(_, b)| max_abs(b))
        .fold(0.0, f64::max);

    Ok(TruePhasorState {
        node_voltages: v[..n].to_vec(),
        sending_currents: sending,
        receiving_currents: receiving,
        load_currents,
        fault,
        converged,
        iterations,
        max_kcl_residual,
        max_kvl_residual,
    })
}

fn dot_conj(v: &Vec3, i: &Vec3) -> C64 {
    v.iter().zip(i.iter()).map(|(a, b)| a * b.conj()).sum()
}

impl TruePhasorState {
    /// Complex power delivered by the slack minus everything it feeds:
    /// loads, series losses and fault dissipation. Zero at a solved state.
    pub fn power_balance_mismatch(&self, model: &FeederModel) -> f64 {
        let slack = model.slack;
        let supplied: C64 = model.nodes[slack]
            .children
            .iter()
            .map(|&b| dot_conj(&self.node_voltages[slack], &self.sending_currents[b]))
            .sum();
        let consumed: C64 = (0..model.nodes.len())
            .map(|k| dot_conj(&self.node_voltages[k], &self.load_currents[k]))
            .sum();
        let mut losses = C64::new(0.0, 0.0);
        for (bi, b) in model.branches.iter().enumerate() {
            match &self.fault {
                Some(f) if f.branch == bi => {
                    let up = self.node_voltages[b.from] - f.node_voltage;
                    let down = f.node_voltage - self.node_voltages[b.to];
                    losses += dot_conj(&up, &self.sending_currents[bi])
                        + dot_conj(&down, &self.receiving_currents[bi]);
                }
                _ => {
                    let dv = self.node_voltages[b.from] - self.node_voltages[b.to];
                    losses += dot_conj(&dv, &self.sending_currents[bi]);
                }
            }
        }
        let fault: C64 = self
            .fault
            .as_ref()
            .map(|f| dot_conj(&f.node_voltage, &f.current))
            .unwrap_or_default();
        (supplied - consumed - losses - fault).norm()
    }

    /// Per-node phasor dump: node, phase, |V|, angle (rad), Re, Im.
    pub fn write_csv<W: Write>(&self, model: &FeederModel, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "element,kind,phase,magnitude_pu,angle_rad,real_pu,imag_pu"
        )?;
        for (k, node) in model.nodes.iter().enumerate() {
            for p in node.phases.iter() {
                let v = self.node_voltages[k][p.index()];
                writeln!(
                    out,
                    "{},V,{},{},{},{},{}",
                    node.id,
                    p,
                    v.norm(),
                    v.arg(),
                    v.re,
                    v.im
                )?;
            }
        }
        for (bi, b) in model.branches.iter().enumerate() {
            for p in b.phases.iter() {
                let i = self.sending_currents[bi][p.index()];
                writeln!(
                    out,
                    "{},I,{},{},{},{},{}",
                    b.id,
                    p,
                    i.norm(),
                    i.arg(),
                    i.re,
                    i.im
                )?;
            }
        }
        if let Some(f) = &self.fault {
            for p in f.phases.iter() {
                let i = f.current[p.index()];
                writeln!(
                    out,
                    "fault,IF,{},{},{},{},{}",
                    p,
                    i.norm(),
                    i.arg(),
                    i.re,
                    i.im
                )?;
            }
        }
        Ok(())
    }
}
