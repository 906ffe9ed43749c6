//! Branch-current weighted least squares estimator.
//!
//! States are the root voltage and the sending-end current of every branch
//! in scope, rectangular and per phase. With equivalent injections frozen the
//! measurement model is affine, so each outer iteration solves one linear
//! WLS problem and then refreshes the injections from swept voltages.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::feeder::{FeederModel, NodeClass, PathChain, Subgraph};
use crate::measurement::{
    boundary_equivalent, node_equivalent, outflow_branches, End, MeasurementError, MeasurementSet,
};
use crate::phase::{Phase, PhaseSet, Vec3, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DsseError {
    #[error("scope {scope:?} is unobservable (states without coverage: {states:?})")]
    Unobservable { scope: String, states: Vec<String> },
    #[error("scope {scope:?} lacks measurement {what}")]
    MissingMeasurement { scope: String, what: String },
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DsseConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for DsseConfig {
    fn default() -> Self {
        DsseConfig {
            tolerance: 1e-6,
            max_iterations: 20,
        }
    }
}

/// Hypothetical shunt current drawn at fraction `lambda` along `branch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultCandidate {
    pub branch: usize,
    pub lambda: f64,
}

/// Which branches are estimated and which meters feed the estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct Scope {
    pub label: String,
    pub root: usize,
    /// Branches in scope, parents before children.
    pub edges: Vec<usize>,
    /// Branches whose head node is left unmodelled: their current is a free
    /// state and the head carries no injection row.
    pub open: Vec<usize>,
    pub currents: Vec<(usize, End)>,
    /// Non-root nodes whose voltage phasor is used.
    pub voltage_nodes: Vec<usize>,
    /// Nodes whose injection folds in measured currents leaving the scope.
    pub boundary: Vec<(usize, Vec<usize>)>,
    pub fault: Option<FaultCandidate>,
}

fn pmu_currents(model: &FeederModel, meters: &[usize], edges: &[usize]) -> Vec<(usize, End)> {
    let mut out = Vec::new();
    for &b in edges {
        let br = &model.branches[b];
        for (node, end) in [(br.from, End::Sending), (br.to, End::Receiving)] {
            if !meters.contains(&node) {
                continue;
            }
            if let Some(p) = model.pmu_at[node] {
                if model.pmus[p].measured_branches.contains(&b) {
                    out.push((b, end));
                }
            }
        }
    }
    out
}

impl Scope {
    /// Whole subgraph with every micro-PMU reading it owns.
    pub fn subgraph(model: &FeederModel, sub: &Subgraph) -> Scope {
        let mut meters = vec![sub.root];
        meters.extend(&sub.far_pmus);
        let boundary = sub
            .nodes
            .iter()
            .filter(|(_, c)| *c == NodeClass::FarPmu)
            .map(|&(k, _)| (k, outflow_branches(model, sub, k)))
            .filter(|(_, out)| !out.is_empty())
            .collect();
        Scope {
            label: format!("G{}", sub.index),
            root: sub.root,
            edges: sub.edges.clone(),
            open: Vec::new(),
            currents: pmu_currents(model, &meters, &sub.edges),
            voltage_nodes: sub.far_pmus.clone(),
            boundary,
            fault: None,
        }
    }

    /// Path `s` (1-based) estimated on its own: root readings, equivalent
    /// injections along the path, and the current leaving it as a free state.
    /// The last path also takes the far micro-PMU's voltage and outflows.
    pub fn path(model: &FeederModel, sub: &Subgraph, chain: &PathChain, s: usize) -> Scope {
        let mut edges = chain.path_edges(s);
        let root_edges: Vec<usize> = edges
            .iter()
            .copied()
            .filter(|&b| model.branches[b].from == sub.root)
            .collect();
        let mut currents: Vec<(usize, End)> =
            root_edges.iter().map(|&b| (b, End::Sending)).collect();
        let mut voltage_nodes = Vec::new();
        let open = if s < chain.len() {
            chain.frontier(s)
        } else {
            let mut out = Vec::new();
            for &far in &sub.far_pmus {
                let o = outflow_branches(model, sub, far);
                currents.extend(o.iter().map(|&b| (b, End::Sending)));
                out.extend(o);
                voltage_nodes.push(far);
            }
            out
        };
        edges.extend(&open);
        Scope {
            label: format!("G{}/P{}", sub.index, s),
            root: sub.root,
            edges,
            open,
            currents,
            voltage_nodes,
            boundary: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(mut self, branch: usize, lambda: f64) -> Scope {
        self.fault = Some(FaultCandidate { branch, lambda });
        self
    }
}

/// Row provenance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowTag {
    Voltage {
        node: usize,
        phase: Phase,
    },
    Current {
        branch: usize,
        end: End,
        phase: Phase,
    },
    Injection {
        node: usize,
        phase: Phase,
        boundary: bool,
    },
}

/// Constant Jacobian and everything needed to rebuild z and W.
#[derive(Clone, Debug)]
pub struct Assembly {
    pub scope: Scope,
    /// Sparse rows of H. Rows come in (real, imaginary) pairs.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub tags: Vec<(RowTag, bool)>,
    pub ncols: usize,
    slack_cols: [Option<usize>; 3],
    edge_cols: Vec<[Option<usize>; 3]>,
    fault_cols: [Option<usize>; 3],
    edge_pos: HashMap<usize, usize>,
    /// Injection nodes with the phases they are written for.
    inj_nodes: Vec<(usize, PhaseSet, Vec<usize>)>,
    root_phases: PhaseSet,
}

fn col_names(model: &FeederModel, a: &Assembly) -> Vec<String> {
    let mut names = vec![String::new(); a.ncols];
    for p in Phase::ALL {
        if let Some(c) = a.slack_cols[p.index()] {
            names[c] = format!("V{}{}", model.nodes[a.scope.root].id, p);
            names[c + 1] = names[c].clone();
        }
        for (pos, &b) in a.scope.edges.iter().enumerate() {
            if let Some(c) = a.edge_cols[pos][p.index()] {
                names[c] = format!("I{}{}", model.branches[b].id, p);
                names[c + 1] = names[c].clone();
            }
        }
        if let Some(c) = a.fault_cols[p.index()] {
            names[c] = format!("F{}", p);
            names[c + 1] = names[c].clone();
        }
    }
    names
}

pub fn assemble(
    model: &FeederModel,
    scope: &Scope,
    set: &MeasurementSet,
) -> Result<Assembly, DsseError> {
    let missing = |what: String| DsseError::MissingMeasurement {
        scope: scope.label.clone(),
        what,
    };
    let root = scope.root;
    let root_phases = model.nodes[root].phases;
    let mut ncols = 0;
    let mut slack_cols = [None; 3];
    for p in root_phases.iter() {
        slack_cols[p.index()] = Some(ncols);
        ncols += 2;
    }
    let mut edge_pos = HashMap::new();
    let mut edge_cols = Vec::with_capacity(scope.edges.len());
    for (pos, &b) in scope.edges.iter().enumerate() {
        edge_pos.insert(b, pos);
        let mut c = [None; 3];
        for p in model.branches[b].phases.iter() {
            c[p.index()] = Some(ncols);
            ncols += 2;
        }
        edge_cols.push(c);
    }
    let mut fault_cols = [None; 3];
    if let Some(f) = scope.fault {
        for p in model.branches[f.branch].phases.iter() {
            fault_cols[p.index()] = Some(ncols);
            ncols += 2;
        }
    }

    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut tags = Vec::new();

    // voltage rows
    let mut vnodes = vec![root];
    vnodes.extend(&scope.voltage_nodes);
    for &k in &vnodes {
        let path: Vec<usize> = model
            .path_from_slack(k)
            .into_iter()
            .filter(|b| edge_pos.contains_key(b))
            .collect();
        for p in model.nodes[k].phases.iter() {
            set.voltage(k, p)
                .ok_or_else(|| missing(format!("V at {} phase {}", model.nodes[k].id, p)))?;
            let sc = slack_cols[p.index()].ok_or_else(|| missing(format!("root phase {p}")))?;
            let mut re = vec![(sc, 1.0)];
            let mut im = vec![(sc + 1, 1.0)];
            for &b in &path {
                let z = &model.branches[b].z;
                for q in model.branches[b].phases.iter() {
                    let zpq = z[(p.index(), q.index())];
                    let c = edge_cols[edge_pos[&b]][q.index()].expect("phase column");
                    re.push((c, -zpq.re));
                    re.push((c + 1, zpq.im));
                    im.push((c, -zpq.im));
                    im.push((c + 1, -zpq.re));
                }
            }
            rows.push(re);
            rows.push(im);
            tags.push((RowTag::Voltage { node: k, phase: p }, false));
            tags.push((RowTag::Voltage { node: k, phase: p }, true));
        }
    }

    // current rows
    for &(b, end) in &scope.currents {
        let pos = edge_pos[&b];
        for p in model.branches[b].phases.iter() {
            set.current(b, end, p)
                .ok_or_else(|| missing(format!("I on {} phase {}", model.branches[b].id, p)))?;
            let c = edge_cols[pos][p.index()].expect("phase column");
            let mut re = vec![(c, 1.0)];
            let mut im = vec![(c + 1, 1.0)];
            if let (Some(f), Some(fc)) = (scope.fault, fault_cols[p.index()]) {
                if f.branch == b {
                    let k = if end == End::Sending {
                        1.0 - f.lambda
                    } else {
                        -f.lambda
                    };
                    re.push((fc, k));
                    im.push((fc + 1, k));
                }
            }
            rows.push(re);
            rows.push(im);
            tags.push((
                RowTag::Current {
                    branch: b,
                    end,
                    phase: p,
                },
                false,
            ));
            tags.push((
                RowTag::Current {
                    branch: b,
                    end,
                    phase: p,
                },
                true,
            ));
        }
    }

    // injection rows
    let mut inj_nodes = Vec::new();
    for (pos, &b) in scope.edges.iter().enumerate() {
        if scope.open.contains(&b) {
            continue;
        }
        let k = model.branches[b].to;
        let phases = model.branches[b].phases;
        let outflows = scope
            .boundary
            .iter()
            .find(|(n, _)| *n == k)
            .map(|(_, o)| o.clone())
            .unwrap_or_default();
        for p in phases.iter() {
            let c = edge_cols[pos][p.index()].expect("phase column");
            let mut re = vec![(c, 1.0)];
            let mut im = vec![(c + 1, 1.0)];
            for &child in &model.nodes[k].children {
                if let Some(&cp) = edge_pos.get(&child) {
                    if let Some(cc) = edge_cols[cp][p.index()] {
                        re.push((cc, -1.0));
                        im.push((cc + 1, -1.0));
                    }
                }
            }
            if let (Some(f), Some(fc)) = (scope.fault, fault_cols[p.index()]) {
                let fb = &model.branches[f.branch];
                let k_f = if fb.from == k {
                    -(1.0 - f.lambda)
                } else if fb.to == k {
                    -f.lambda
                } else {
                    0.0
                };
                if k_f != 0.0 {
                    re.push((fc, k_f));
                    im.push((fc + 1, k_f));
                }
            }
            rows.push(re);
            rows.push(im);
            let tag = RowTag::Injection {
                node: k,
                phase: p,
                boundary: !outflows.is_empty(),
            };
            tags.push((tag, false));
            tags.push((tag, true));
        }
        inj_nodes.push((k, phases, outflows));
    }

    Ok(Assembly {
        scope: scope.clone(),
        rows,
        tags,
        ncols,
        slack_cols,
        edge_cols,
        fault_cols,
        edge_pos,
        inj_nodes,
        root_phases,
    })
}

/// Output of one estimation.
#[derive(Clone, Debug)]
pub struct WlsResult {
    pub x: DVector<f64>,
    pub wmr: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Weighted residuals sqrt(w)·(z − Hx); their squares sum to `wmr`.
    pub residuals: Vec<f64>,
    pub dof: isize,
    /// Voltages at every node in scope (root included).
    pub node_voltages: Vec<(usize, Vec3)>,
    /// Per-iteration (max |Δx|, WMR).
    pub trace: Vec<(f64, f64)>,
    /// Measurement vector and weights of the final linear solve.
    pub z: DVector<f64>,
    pub w: DVector<f64>,
    pub factor: Cholesky<f64, Dyn>,
    /// Nodes whose swept voltage was too small for the power conversion.
    pub degenerate_nodes: usize,
}

impl Assembly {
    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn dof(&self) -> isize {
        self.rows.len() as isize - self.ncols as isize
    }

    /// Dense copy of H.
    pub fn dense_h(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.rows.len(), self.ncols);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                h[(r, c)] += v;
            }
        }
        h
    }

    pub fn h_times(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|row| row.iter().map(|&(c, v)| v * x[c]).sum()),
        )
    }

    pub fn edge_current(&self, x: &DVector<f64>, pos: usize) -> Vec3 {
        Vec3::from_fn(|i, _| {
            self.edge_cols[pos][i]
                .map(|c| C64::new(x[c], x[c + 1]))
                .unwrap_or_default()
        })
    }

    pub fn branch_current(&self, x: &DVector<f64>, branch: usize) -> Option<Vec3> {
        self.edge_pos
            .get(&branch)
            .map(|&pos| self.edge_current(x, pos))
    }

    pub fn fault_current(&self, x: &DVector<f64>) -> Option<Vec3> {
        self.scope.fault.map(|_| {
            Vec3::from_fn(|i, _| {
                self.fault_cols[i]
                    .map(|c| C64::new(x[c], x[c + 1]))
                    .unwrap_or_default()
            })
        })
    }

    pub fn slack_voltage(&self, x: &DVector<f64>) -> Vec3 {
        Vec3::from_fn(|i, _| {
            self.slack_cols[i]
                .map(|c| C64::new(x[c], x[c + 1]))
                .unwrap_or_default()
        })
    }

    /// V_k = V_root − Σ Z_e i_e along the path from the scope root.
    pub fn forward_sweep_voltages(
        &self,
        model: &FeederModel,
        x: &DVector<f64>,
    ) -> Vec<(usize, Vec3)> {
        let mut out = Vec::with_capacity(self.scope.edges.len() + 1);
        let mut v: HashMap<usize, Vec3> = HashMap::new();
        let vr = self.slack_voltage(x);
        v.insert(self.scope.root, vr);
        out.push((self.scope.root, vr));
        for (pos, &b) in self.scope.edges.iter().enumerate() {
            let br = &model.branches[b];
            let vf = v[&br.from];
            let mut vt = vf - br.z * self.edge_current(x, pos);
            for p in Phase::ALL {
                if !br.phases.contains(p) {
                    vt[p.index()] = C64::new(0.0, 0.0);
                }
            }
            v.insert(br.to, vt);
            out.push((br.to, vt));
        }
        out
    }

    /// Equivalent injections (value, variance) for every injection row,
    /// converted at `voltage(node)`.
    fn injection_z(
        &self,
        model: &FeederModel,
        set: &MeasurementSet,
        voltage: impl Fn(usize) -> Vec3,
        degenerate: &mut usize,
    ) -> Result<Vec<(f64, f64)>, DsseError> {
        let v_root = self.root_voltage(set);
        let mut out = Vec::new();
        for (k, phases, outflows) in &self.inj_nodes {
            let v = voltage(*k);
            for p in phases.iter() {
                let mut vk = v[p.index()];
                if vk.norm() < crate::measurement::DEGENERATE_VOLTAGE_PU {
                    *degenerate += 1;
                    vk = v_root[p.index()];
                }
                let own = node_equivalent(set, *k, p, vk)?;
                let (i, var) = boundary_equivalent(model, set, *k, p, own, outflows)?;
                out.push((i.re, var[0]));
                out.push((i.im, var[1]));
            }
        }
        Ok(out)
    }

    /// Root voltage as read by its micro-PMU.
    pub fn root_voltage(&self, set: &MeasurementSet) -> Vec3 {
        Vec3::from_fn(|i, _| {
            let p = Phase::from_index(i);
            match (
                self.root_phases.contains(p),
                set.voltage(self.scope.root, p),
            ) {
                (true, Some(m)) => m.complex(),
                _ => C64::new(0.0, 0.0),
            }
        })
    }

    fn fill_zw(
        &self,
        set: &MeasurementSet,
        inj: &[(f64, f64)],
    ) -> Result<(DVector<f64>, DVector<f64>), DsseError> {
        let mut z = DVector::zeros(self.rows.len());
        let mut w = DVector::zeros(self.rows.len());
        let mut it = inj.iter();
        for (r, &(tag, im)) in self.tags.iter().enumerate() {
            let m = match tag {
                RowTag::Voltage { node, phase } => set.voltage(node, phase),
                RowTag::Current { branch, end, phase } => set.current(branch, end, phase),
                RowTag::Injection { .. } => None,
            };
            let (val, var) = match (tag, m) {
                (RowTag::Injection { .. }, _) => *it.next().expect("one injection value per row"),
                (_, Some(m)) => {
                    let k = usize::from(im);
                    (m.value[k], m.variance[k])
                }
                (_, None) => {
                    return Err(DsseError::MissingMeasurement {
                        scope: self.scope.label.clone(),
                        what: format!("{tag:?}"),
                    })
                }
            };
            z[r] = val;
            w[r] = 1.0 / var;
        }
        Ok((z, w))
    }

    /// z and W with injections evaluated at the root voltage.
    pub fn initial_zw(
        &self,
        model: &FeederModel,
        set: &MeasurementSet,
    ) -> Result<(DVector<f64>, DVector<f64>), DsseError> {
        let mut d = 0;
        let v_root = self.root_voltage(set);
        let inj = self.injection_z(model, set, |_| v_root, &mut d)?;
        self.fill_zw(set, &inj)
    }

    /// HᵀWH accumulated row by row.
    pub fn gain(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.ncols, self.ncols);
        for (r, row) in self.rows.iter().enumerate() {
            let wr = w[r];
            for &(ci, vi) in row {
                for &(cj, vj) in row {
                    g[(ci, cj)] += wr * vi * vj;
                }
            }
        }
        g
    }

    /// Hᵀ v for a row-space vector.
    pub fn ht_times(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, h) in row {
                out[c] += h * v[r];
            }
        }
        out
    }

    fn factorize(
        &self,
        model: &FeederModel,
        w: &DVector<f64>,
    ) -> Result<Cholesky<f64, Dyn>, DsseError> {
        let g = self.gain(w);
        let uncovered = |g: &DMatrix<f64>| {
            let names = col_names(model, self);
            let mut out: Vec<String> = (0..self.ncols)
                .filter(|&c| g[(c, c)] == 0.0)
                .map(|c| names[c].clone())
                .collect();
            out.dedup();
            out
        };
        // a pivot far below its diagonal means a rank-deficient gain matrix
        let scale = (0..self.ncols).map(|c| g[(c, c)]).fold(0.0, f64::max);
        match Cholesky::new(g.clone()) {
            Some(ch)
                if (0..self.ncols)
                    .all(|c| ch.l_dirty()[(c, c)].powi(2) > 1e-13 * scale.max(1e-300)) =>
            {
                Ok(ch)
            }
            _ => Err(DsseError::Unobservable {
                scope: self.scope.label.clone(),
                states: uncovered(&g),
            }),
        }
    }

    /// Sweep initialisation: injections at the root voltage, currents by a
    /// backward sweep, root voltage from its micro-PMU.
    fn initial_state(
        &self,
        model: &FeederModel,
        set: &MeasurementSet,
    ) -> Result<DVector<f64>, DsseError> {
        let mut x = DVector::zeros(self.ncols);
        let v_root = self.root_voltage(set);
        for p in self.root_phases.iter() {
            if let Some(c) = self.slack_cols[p.index()] {
                x[c] = v_root[p.index()].re;
                x[c + 1] = v_root[p.index()].im;
            }
        }
        let mut d = 0;
        let inj = self.injection_z(model, set, |_| v_root, &mut d)?;
        let mut through: HashMap<usize, Vec3> = HashMap::new();
        let mut it = inj.chunks(2);
        for (k, phases, _) in &self.inj_nodes {
            let mut i = Vec3::zeros();
            for p in phases.iter() {
                let c = it.next().expect("injection pair");
                i[p.index()] = C64::new(c[0].0, c[1].0);
            }
            through.insert(*k, i);
        }
        for &b in &self.scope.open {
            let br = &model.branches[b];
            let mut i = Vec3::zeros();
            for p in br.phases.iter() {
                if let Some(m) = set.any_current(b, End::Sending, p) {
                    i[p.index()] = m.complex();
                }
            }
            through.insert(br.to, i);
        }
        for (pos, &b) in self.scope.edges.iter().enumerate().rev() {
            let br = &model.branches[b];
            let i = through.get(&br.to).copied().unwrap_or_default();
            for p in br.phases.iter() {
                let c = self.edge_cols[pos][p.index()].expect("phase column");
                x[c] = i[p.index()].re;
                x[c + 1] = i[p.index()].im;
            }
            if br.from != self.scope.root {
                *through.entry(br.from).or_default() += i;
            }
        }
        Ok(x)
    }

    /// Outer/inner Gauss-Newton loop from the sweep initialisation.
    pub fn estimate(
        &self,
        model: &FeederModel,
        set: &MeasurementSet,
        cfg: &DsseConfig,
    ) -> Result<WlsResult, DsseError> {
        let x0 = self.initial_state(model, set)?;
        self.estimate_from(model, set, cfg, x0)
    }

    /// Same loop from a caller-supplied starting state.
    pub fn estimate_from(
        &self,
        model: &FeederModel,
        set: &MeasurementSet,
        cfg: &DsseConfig,
        mut x: DVector<f64>,
    ) -> Result<WlsResult, DsseError> {
        let mut trace = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        let mut degenerate = 0;
        let mut last = None;
        while iterations < cfg.max_iterations {
            iterations += 1;
            let volts: HashMap<usize, Vec3> =
                self.forward_sweep_voltages(model, &x).into_iter().collect();
            degenerate = 0;
            let inj = self.injection_z(model, set, |k| volts[&k], &mut degenerate)?;
            let (z, w) = self.fill_zw(set, &inj)?;
            let factor = self.factorize(model, &w)?;
            let r = &z - self.h_times(&x);
            let dx = factor.solve(&self.ht_times(&r.component_mul(&w)));
            x += &dx;
            let r = &z - self.h_times(&x);
            let wmr = r.component_mul(&r).dot(&w);
            let step = dx.amax();
            trace.push((step, wmr));
            last = Some((z, w, factor));
            if step < cfg.tolerance {
                converged = true;
                break;
            }
        }
        let (z, w, factor) = last.expect("at least one iteration");
        let r = &z - self.h_times(&x);
        let residuals: Vec<f64> = r.iter().zip(w.iter()).map(|(r, w)| r * w.sqrt()).collect();
        let wmr = residuals.iter().map(|r| r * r).sum();
        Ok(WlsResult {
            node_voltages: self.forward_sweep_voltages(model, &x),
            x,
            wmr,
            iterations,
            converged,
            residuals,
            dof: self.dof(),
            trace,
            z,
            w,
            factor,
            degenerate_nodes: degenerate,
        })
    }

    /// Measurement labels in row order, one per (kind, location), for
    /// inspection: `V@node`, `I@branch`, `Ieq@node`, `Isub@node`.
    pub fn measurement_labels(&self, model: &FeederModel) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (tag, _) in &self.tags {
            let l = match *tag {
                RowTag::Voltage { node, .. } => format!("V@{}", model.nodes[node].id),
                RowTag::Current { branch, .. } => format!("I@{}", model.branches[branch].id),
                RowTag::Injection {
                    node,
                    boundary: false,
                    ..
                } => format!("Ieq@{}", model.nodes[node].id),
                RowTag::Injection {
                    node,
                    boundary: true,
                    ..
                } => format!("Isub@{}", model.nodes[node].id),
            };
            if out.last() != Some(&l) {
                out.push(l);
            }
        }
        out
    }
}

/// Assemble and estimate in one call.
pub fn estimate(
    model: &FeederModel,
    scope: &Scope,
    set: &MeasurementSet,
    cfg: &DsseConfig,
) -> Result<WlsResult, DsseError> {
    assemble(model, scope, set)?.estimate(model, set, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::fixtures::*;
    use crate::feeder::{
        enumerate_paths, partition, BaseDoc, BranchDoc, FeederDocument, InjectionDoc, NodeDoc,
        PmuDoc,
    };
    use crate::measurement::{measure_true, synthesize, NoiseProfile};
    use crate::powerflow::{run_powerflow, FaultScenario, FaultType, TruePhasorState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn five() -> (FeederModel, TruePhasorState, MeasurementSet) {
        let m = FeederModel::from_document(&five_node_doc()).unwrap();
        let st = run_powerflow(&m, None).unwrap();
        let set = measure_true(&m, &st, &NoiseProfile::default());
        (m, st, set)
    }

    fn sorted(mut v: Vec<String>) -> Vec<String> {
        v.sort();
        v
    }

    fn strs(v: &[&str]) -> Vec<String> {
        sorted(v.iter().map(|s| s.to_string()).collect())
    }

    fn state_names(m: &FeederModel, a: &Assembly) -> Vec<String> {
        a.scope
            .edges
            .iter()
            .map(|&b| m.branches[b].id.clone())
            .collect()
    }

    #[test]
    fn path_scopes_reproduce_the_five_node_table() {
        let (m, _, set) = five();
        let part = partition(&m).unwrap();
        let chain = enumerate_paths(&m, &part, 0).unwrap();
        let g = &part.subgraphs[0];
        let a1 = assemble(&m, &Scope::path(&m, g, &chain, 1), &set).unwrap();
        assert_eq!(state_names(&m, &a1), ["1-2", "2-3"]);
        assert_eq!(
            sorted(a1.measurement_labels(&m)),
            strs(&["V@1", "I@1-2", "Ieq@2"])
        );
        let a2 = assemble(&m, &Scope::path(&m, g, &chain, 2), &set).unwrap();
        assert_eq!(state_names(&m, &a2), ["1-2", "2-3", "3-4", "3-5"]);
        assert_eq!(
            sorted(a2.measurement_labels(&m)),
            strs(&["V@1", "I@1-2", "Ieq@2", "Ieq@3", "Ieq@4"])
        );
        let a3 = assemble(&m, &Scope::path(&m, g, &chain, 3), &set).unwrap();
        assert_eq!(state_names(&m, &a3), ["1-2", "2-3", "3-4", "3-5", "5-6"]);
        assert_eq!(
            sorted(a3.measurement_labels(&m)),
            strs(&["V@1", "I@1-2", "Ieq@2", "Ieq@3", "Ieq@4", "Ieq@5", "I@5-6", "V@5"])
        );
        // the shorter paths carry no redundancy
        assert_eq!(a1.dof(), 0);
        assert_eq!(a2.dof(), 0);
        assert_eq!(a3.dof(), 12);
    }

    fn two_node_doc() -> FeederDocument {
        let mut r = [0.0; 9];
        let mut x = [0.0; 9];
        r[0] = 0.5;
        x[0] = 1.0;
        FeederDocument {
            name: String::new(),
            base: BaseDoc {
                kv_ll: 4.16,
                mva: 1.0,
            },
            substation: "1".into(),
            nodes: vec![
                NodeDoc {
                    id: "1".into(),
                    phases: PhaseSet::single(Phase::A),
                },
                NodeDoc {
                    id: "2".into(),
                    phases: PhaseSet::single(Phase::A),
                },
            ],
            branches: vec![BranchDoc {
                id: "1-2".into(),
                from: "1".into(),
                to: "2".into(),
                length_m: 100.0,
                r_ohm: r,
                x_ohm: x,
            }],
            loads: vec![InjectionDoc {
                node: "2".into(),
                p_w: [100e3, 0.0, 0.0],
                q_var: [30e3, 0.0, 0.0],
            }],
            dgs: vec![],
            pmus: vec![
                PmuDoc {
                    node: "1".into(),
                    branches: vec!["1-2".into()],
                },
                PmuDoc {
                    node: "2".into(),
                    branches: vec![],
                },
            ],
        }
    }

    #[test]
    fn single_branch_matrix_matches_hand_assembly() {
        let m = FeederModel::from_document(&two_node_doc()).unwrap();
        let st = run_powerflow(&m, None).unwrap();
        let set = measure_true(&m, &st, &NoiseProfile::default());
        let scope = Scope {
            label: "t".into(),
            root: 0,
            edges: vec![0],
            open: vec![],
            currents: vec![(0, End::Sending)],
            voltage_nodes: vec![],
            boundary: vec![],
            fault: None,
        };
        let a = assemble(&m, &scope, &set).unwrap();
        #[rustfmt::skip]
        let expect = DMatrix::from_row_slice(6, 4, &[
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        ]);
        assert_eq!(a.dense_h(), expect);

        // adding the far voltage brings in the -R / +X drop pattern
        let scope = Scope {
            voltage_nodes: vec![1],
            ..scope
        };
        let a = assemble(&m, &scope, &set).unwrap();
        let z = m.branches[0].z[(0, 0)];
        let h = a.dense_h();
        assert_eq!(
            h.row(2).iter().copied().collect::<Vec<_>>(),
            vec![1.0, 0.0, -z.re, z.im]
        );
        assert_eq!(
            h.row(3).iter().copied().collect::<Vec<_>>(),
            vec![0.0, 1.0, -z.im, -z.re]
        );
    }

    #[test]
    fn voltage_rows_touch_exactly_the_path_branches() {
        let (m, _, set) = five();
        let part = partition(&m).unwrap();
        let g2 = &part.subgraphs[1];
        let a = assemble(&m, &Scope::subgraph(&m, g2), &set).unwrap();
        let n7 = m.node_index("7").unwrap();
        let row = a
            .tags
            .iter()
            .position(|(t, im)| {
                *t == RowTag::Voltage {
                    node: n7,
                    phase: Phase::A,
                } && !im
            })
            .unwrap();
        let cols: Vec<usize> = a.rows[row].iter().map(|&(c, _)| c).collect();
        for b in ["5-6", "6-7"] {
            let pos = a
                .scope
                .edges
                .iter()
                .position(|&e| m.branches[e].id == b)
                .unwrap();
            let c = a.edge_cols[pos][0].unwrap();
            assert!(cols.contains(&c));
            let r = a.rows[row].iter().find(|e| e.0 == c).unwrap().1;
            assert_eq!(r, -m.branches[a.scope.edges[pos]].z[(0, 0)].re);
        }
        // slack real part + two branches × three coupled phases × (re, im)
        assert_eq!(a.rows[row].len(), 1 + 2 * 3 * 2);
    }

    /// Measurement functions evaluated directly with complex arithmetic.
    fn h_direct(m: &FeederModel, a: &Assembly, x: &DVector<f64>) -> Vec<f64> {
        let v = a.forward_sweep_voltages(m, x);
        let volt = |k: usize| v.iter().find(|e| e.0 == k).unwrap().1;
        let f = a.fault_current(x);
        let cand = a.scope.fault;
        let mut out = Vec::new();
        for (tag, im) in &a.tags {
            let c = match *tag {
                RowTag::Voltage { node, phase } => volt(node)[phase.index()],
                RowTag::Current { branch, end, phase } => {
                    let mut i = a.branch_current(x, branch).unwrap()[phase.index()];
                    if let (Some(c), Some(f)) = (cand, f) {
                        if c.branch == branch {
                            i += f[phase.index()]
                                * if end == End::Sending {
                                    1.0 - c.lambda
                                } else {
                                    -c.lambda
                                };
                        }
                    }
                    i
                }
                RowTag::Injection { node, phase, .. } => {
                    let p = phase.index();
                    let mut i = a.branch_current(x, m.nodes[node].parent.unwrap()).unwrap()[p];
                    for &ch in &m.nodes[node].children {
                        if let Some(ci) = a.branch_current(x, ch) {
                            i -= ci[p];
                        }
                    }
                    if let (Some(c), Some(f)) = (cand, f) {
                        let b = &m.branches[c.branch];
                        if b.from == node {
                            i -= f[p] * (1.0 - c.lambda);
                        }
                        if b.to == node {
                            i -= f[p] * c.lambda;
                        }
                    }
                    i
                }
            };
            out.push(if *im { c.im } else { c.re });
        }
        out
    }

    #[test]
    fn jacobian_matches_direct_evaluation_and_finite_differences() {
        let (m, _, set) = five();
        let part = partition(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for scope in [
            Scope::subgraph(&m, &part.subgraphs[0]),
            Scope::subgraph(&m, &part.subgraphs[0]).with_fault(m.branch_index("2-3").unwrap(), 0.3),
            Scope::subgraph(&m, &part.subgraphs[1]).with_fault(m.branch_index("6-7").unwrap(), 0.8),
        ] {
            let a = assemble(&m, &scope, &set).unwrap();
            for _ in 0..20 {
                let x = DVector::from_fn(a.ncols, |_, _| rng.gen_range(-1.0..1.0));
                let hx = a.h_times(&x);
                let direct = h_direct(&m, &a, &x);
                for (p, q) in hx.iter().zip(&direct) {
                    assert!((p - q).abs() < 1e-12);
                }
                let h = a.dense_h();
                for c in 0..a.ncols {
                    let d = 1e-3;
                    let mut xp = x.clone();
                    xp[c] += d;
                    let fd: Vec<f64> = h_direct(&m, &a, &xp)
                        .iter()
                        .zip(&direct)
                        .map(|(p, q)| (p - q) / d)
                        .collect();
                    for (r, v) in fd.iter().enumerate() {
                        assert!((v - h[(r, c)]).abs() <= 1e-6 * h[(r, c)].abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn jacobian_is_independent_of_data() {
        let (m, _, set) = five();
        let noisy = synthesize(&set, &NoiseProfile::default(), 5);
        let part = partition(&m).unwrap();
        let s = Scope::subgraph(&m, &part.subgraphs[0]);
        let a = assemble(&m, &s, &set).unwrap();
        let b = assemble(&m, &s, &noisy).unwrap();
        assert_eq!(a.rows, b.rows);
        let ra = a.estimate(&m, &noisy, &DsseConfig::default()).unwrap();
        assert!(ra.iterations > 1);
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn noiseless_data_recovers_the_true_state() {
        let (m, st, set) = five();
        let part = partition(&m).unwrap();
        for g in &part.subgraphs {
            let a = assemble(&m, &Scope::subgraph(&m, g), &set).unwrap();
            let r = a.estimate(&m, &set, &DsseConfig::default()).unwrap();
            assert!(r.converged);
            assert!(r.wmr < 1e-8, "{}", r.wmr);
            for &b in &g.edges {
                let est = a.branch_current(&r.x, b).unwrap();
                assert!((est - st.sending_currents[b]).map(|c| c.norm()).max() < 1e-6);
            }
            for (k, v) in &r.node_voltages {
                assert!((v - st.node_voltages[*k]).map(|c| c.norm()).max() < 1e-6);
            }
        }
    }

    #[test]
    fn converged_estimate_satisfies_normal_equations() {
        let (m, _, set) = five();
        let part = partition(&m).unwrap();
        let a = assemble(&m, &Scope::subgraph(&m, &part.subgraphs[0]), &set).unwrap();
        for seed in 0..20 {
            let noisy = synthesize(&set, &NoiseProfile::default(), seed);
            let r = a.estimate(&m, &noisy, &DsseConfig::default()).unwrap();
            assert!(r.converged);
            let g = a.ht_times(&(&r.z - a.h_times(&r.x)).component_mul(&r.w));
            assert!(g.amax() <= 1e-6, "{}", g.amax());
            let recomputed: f64 = r.residuals.iter().map(|e| e * e).sum();
            assert_eq!(recomputed, r.wmr);
            assert!(r.wmr >= 0.0);
        }
    }

    #[test]
    fn no_fault_wmr_mean_tracks_dof() {
        let (m, _, set) = five();
        let part = partition(&m).unwrap();
        for g in &part.subgraphs {
            let a = assemble(&m, &Scope::subgraph(&m, g), &set).unwrap();
            let n = 1000;
            let mut sum = 0.0;
            for seed in 0..n {
                let noisy = synthesize(&set, &NoiseProfile::default(), seed);
                sum += a.estimate(&m, &noisy, &DsseConfig::default()).unwrap().wmr;
            }
            let mean = sum / n as f64;
            let dof = a.dof() as f64;
            assert!(
                (mean / dof - 1.0).abs() < 0.2,
                "G{}: mean {mean} dof {dof}",
                g.index
            );
        }
    }

    #[test]
    fn forward_sweep_drops() {
        let (m, _, set) = five();
        let part = partition(&m).unwrap();
        let a = assemble(&m, &Scope::subgraph(&m, &part.subgraphs[0]), &set).unwrap();
        let mut x = DVector::zeros(a.ncols);
        let vr = crate::phase::balanced(1.0);
        for i in 0..3 {
            let c = a.slack_cols[i].unwrap();
            x[c] = vr[i].re;
            x[c + 1] = vr[i].im;
        }
        for (_, v) in a.forward_sweep_voltages(&m, &x) {
            assert_eq!(v, vr);
        }
        // current on the first branch only: drop equals the dense Z·i product
        let i = Vec3::new(
            C64::new(0.1, -0.05),
            C64::new(-0.08, 0.02),
            C64::new(0.03, 0.07),
        );
        for p in 0..3 {
            let c = a.edge_cols[0][p].unwrap();
            x[c] = i[p].re;
            x[c + 1] = i[p].im;
        }
        let z = m.branches[a.scope.edges[0]].z;
        let mut expect = Vec3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                expect[r] += z[(r, c)] * i[c];
            }
        }
        let v2 = a.forward_sweep_voltages(&m, &x)[1].1;
        assert!((vr - v2 - expect).map(|c| c.norm()).max() < 1e-15);
    }

    #[test]
    fn missing_coverage_is_reported() {
        let (m, _, set) = five();
        let b = m.branch_index("1-2").unwrap();
        let scope = Scope {
            label: "bare".into(),
            root: m.slack,
            edges: vec![b],
            open: vec![b],
            currents: vec![],
            voltage_nodes: vec![],
            boundary: vec![],
            fault: None,
        };
        let err = estimate(&m, &scope, &set, &DsseConfig::default()).unwrap_err();
        match err {
            DsseError::Unobservable { states, .. } => {
                assert!(states.iter().any(|s| s.starts_with("I1-2")))
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn fault_candidate_at_the_true_spot_explains_the_data() {
        let m = FeederModel::from_document(&five_node_doc()).unwrap();
        let b = m.branch_index("3-5").unwrap();
        let sc = FaultScenario {
            branch: b,
            position: 0.4,
            fault_type: FaultType::LG,
            phases: FaultType::LG.default_phases(),
            impedance_ohm: 20.0,
        };
        let st = run_powerflow(&m, Some(&sc)).unwrap();
        let set = measure_true(&m, &st, &NoiseProfile::default());
        let part = partition(&m).unwrap();
        let g = &part.subgraphs[0];
        let plain = estimate(&m, &Scope::subgraph(&m, g), &set, &DsseConfig::default()).unwrap();
        let hit = estimate(
            &m,
            &Scope::subgraph(&m, g).with_fault(b, 0.4),
            &set,
            &DsseConfig::default(),
        )
        .unwrap();
        let miss = estimate(
            &m,
            &Scope::subgraph(&m, g).with_fault(m.branch_index("1-2").unwrap(), 0.5),
            &set,
            &DsseConfig::default(),
        )
        .unwrap();
        assert!(plain.wmr > 1e3, "{}", plain.wmr);
        assert!(hit.wmr < 1e-6, "{}", hit.wmr);
        assert!(miss.wmr > 10.0, "{}", miss.wmr);
        let a = assemble(&m, &Scope::subgraph(&m, g).with_fault(b, 0.4), &set).unwrap();
        let f = a.fault_current(&hit.x).unwrap();
        assert!((f - st.fault.unwrap().current).map(|c| c.norm()).max() < 1e-6);
    }
}
