//! Three-phase radial feeder graph: loading, validation and per-unit model.

mod document;
mod partition;
mod paths;

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

pub use document::{BaseDoc, BranchDoc, FeederDocument, InjectionDoc, NodeDoc, PmuDoc};
pub use partition::{partition, NodeClass, PartitionError, Subgraph, SubgraphPartition};
pub use paths::{enumerate_paths, Increment, PathChain};

use crate::phase::{Mat3, Phase, PhaseSet, Vec3, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeederError {
    #[error("malformed feeder document: {0}")]
    Parse(String),
    #[error("duplicate id {0:?}")]
    Duplicate(String),
    #[error("element {element:?} references unknown node {node:?}")]
    UnknownNode { element: String, node: String },
    #[error("cycle detected: branch {0:?} closes a loop")]
    Cycle(String),
    #[error("node {0:?} is not connected to the substation")]
    Disconnected(String),
    #[error("phase mask inconsistency at {element:?}: {reason}")]
    PhaseMismatch { element: String, reason: String },
    #[error("invalid impedance on branch {branch:?}: {reason}")]
    InvalidImpedance { branch: String, reason: String },
    #[error("missing micro-PMU at substation {0:?}")]
    MissingSubstationPmu(String),
    #[error("micro-PMU at {node:?} lists branch {branch:?} which is not incident to it")]
    PmuBranch { node: String, branch: String },
    #[error("invalid base: {0}")]
    InvalidBase(String),
}

/// Voltage and power bases. Per-unit quantities are per phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Base {
    pub kv_ll: f64,
    pub mva: f64,
}

impl Base {
    /// Phase-to-neutral base voltage in volts.
    pub fn v_phase(&self) -> f64 {
        self.kv_ll * 1e3 / 3f64.sqrt()
    }

    /// Single-phase base power in VA.
    pub fn s_phase(&self) -> f64 {
        self.mva * 1e6 / 3.0
    }

    pub fn z_base(&self) -> f64 {
        self.kv_ll * self.kv_ll / self.mva
    }

    pub fn i_base(&self) -> f64 {
        self.s_phase() / self.v_phase()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: String,
    pub phases: PhaseSet,
    /// Branch feeding this node from the substation side.
    pub parent: Option<usize>,
    /// Branches leaving this node away from the substation.
    pub children: Vec<usize>,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub id: String,
    /// Upstream end (closer to the substation).
    pub from: usize,
    pub to: usize,
    pub length_m: f64,
    pub phases: PhaseSet,
    pub r_ohm: [f64; 9],
    pub x_ohm: [f64; 9],
    /// Series impedance in per-unit.
    pub z: Mat3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PmuPlacement {
    pub node: usize,
    pub measured_branches: Vec<usize>,
}

/// Validated radial feeder in per-unit. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct FeederModel {
    pub name: String,
    pub base: Base,
    pub slack: usize,
    pub nodes: Vec<Node>,
    pub branches: Vec<Branch>,
    /// Per-node consumed complex power (p.u., per phase).
    pub loads: Vec<Vec3>,
    /// Per-node generated complex power (p.u., per phase).
    pub dgs: Vec<Vec3>,
    pub pmus: Vec<PmuPlacement>,
    /// Index into `pmus` for every node carrying a micro-PMU.
    pub pmu_at: Vec<Option<usize>>,
    /// Nodes in depth-first preorder from the slack, children in document order.
    pub preorder: Vec<usize>,
    raw_loads: Vec<InjectionDoc>,
    raw_dgs: Vec<InjectionDoc>,
}

fn impedance_phases(id: &str, r: &[f64; 9], x: &[f64; 9]) -> Result<PhaseSet, FeederError> {
    let bad = |reason: String| FeederError::InvalidImpedance {
        branch: id.to_string(),
        reason,
    };
    for m in [r, x] {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite entry".into()));
        }
        let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
        for i in 0..3 {
            for j in 0..i {
                if (m[3 * i + j] - m[3 * j + i]).abs() > 1e-9 * scale {
                    return Err(bad(format!("matrix not symmetric at ({i},{j})")));
                }
            }
        }
    }
    let mut phases = PhaseSet::EMPTY;
    for p in Phase::ALL {
        let i = p.index();
        if r[4 * i] > 0.0 {
            phases.insert(p);
        } else if r[4 * i] < 0.0 {
            return Err(bad(format!("negative resistance on phase {p}")));
        }
    }
    if phases.is_empty() {
        return Err(bad("no phase with positive resistance".into()));
    }
    for p in Phase::ALL {
        if phases.contains(p) {
            if x[4 * p.index()] <= 0.0 {
                return Err(bad(format!("non-positive reactance on phase {p}")));
            }
            continue;
        }
        let i = p.index();
        for j in 0..3 {
            for m in [r, x] {
                if m[3 * i + j] != 0.0 || m[3 * j + i] != 0.0 {
                    return Err(bad(format!("nonzero coupling on absent phase {p}")));
                }
            }
        }
    }
    Ok(phases)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn injection_vectors(
    docs: &[InjectionDoc],
    index: &HashMap<String, usize>,
    nodes: &[Node],
    s_phase: f64,
) -> Result<Vec<Vec3>, FeederError> {
    let mut out = vec![Vec3::zeros(); nodes.len()];
    for d in docs {
        let &k = index.get(&d.node).ok_or_else(|| FeederError::UnknownNode {
            element: format!("injection@{}", d.node),
            node: d.node.clone(),
        })?;
        for p in Phase::ALL {
            let i = p.index();
            if !(d.p_w[i].is_finite() && d.q_var[i].is_finite()) {
                return Err(FeederError::Parse(format!(
                    "non-finite power at node {:?}",
                    d.node
                )));
            }
            if (d.p_w[i] != 0.0 || d.q_var[i] != 0.0) && !nodes[k].phases.contains(p) {
                return Err(FeederError::PhaseMismatch {
                    element: d.node.clone(),
                    reason: format!("power on absent phase {p}"),
                });
            }
            out[k][i] += C64::new(d.p_w[i], d.q_var[i]) / s_phase;
        }
    }
    Ok(out)
}

impl FeederModel {
    pub fn from_json(text: &str) -> Result<Self, FeederError> {
        let doc = FeederDocument::from_json(text).map_err(|e| FeederError::Parse(e.to_string()))?;
        Self::from_document(&doc)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, FeederError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FeederError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Validate a feeder document and convert it to a per-unit tree model.
    pub fn from_document(doc: &FeederDocument) -> Result<Self, FeederError> {
        let base = Base {
            kv_ll: doc.base.kv_ll,
            mva: doc.base.mva,
        };
        if !(base.kv_ll > 0.0 && base.mva > 0.0) {
            return Err(FeederError::InvalidBase(format!(
                "kv_ll={} mva={}",
                base.kv_ll, base.mva
            )));
        }
        let mut index = HashMap::new();
        let mut nodes = Vec::with_capacity(doc.nodes.len());
        for n in &doc.nodes {
            if index.insert(n.id.clone(), nodes.len()).is_some() {
                return Err(FeederError::Duplicate(n.id.clone()));
            }
            if n.phases.is_empty() {
                return Err(FeederError::PhaseMismatch {
                    element: n.id.clone(),
                    reason: "no phases".into(),
                });
            }
            nodes.push(Node {
                id: n.id.clone(),
                phases: n.phases,
                parent: None,
                children: vec![],
                depth: 0,
            });
        }
        let slack = *index
            .get(&doc.substation)
            .ok_or_else(|| FeederError::UnknownNode {
                element: "substation".into(),
                node: doc.substation.clone(),
            })?;

        let mut branch_index = HashMap::new();
        let mut uf: Vec<usize> = (0..nodes.len()).collect();
        let mut raw = Vec::with_capacity(doc.branches.len());
        for b in &doc.branches {
            if branch_index.insert(b.id.clone(), raw.len()).is_some() {
                return Err(FeederError::Duplicate(b.id.clone()));
            }
            let lookup = |name: &String| {
                index
                    .get(name)
                    .copied()
                    .ok_or_else(|| FeederError::UnknownNode {
                        element: b.id.clone(),
                        node: name.clone(),
                    })
            };
            let (u, v) = (lookup(&b.from)?, lookup(&b.to)?);
            if b.length_m.is_nan() || b.length_m <= 0.0 {
                return Err(FeederError::InvalidImpedance {
                    branch: b.id.clone(),
                    reason: "length must be positive".into(),
                });
            }
            let phases = impedance_phases(&b.id, &b.r_ohm, &b.x_ohm)?;
            for end in [u, v] {
                if !phases.is_subset_of(nodes[end].phases) {
                    return Err(FeederError::PhaseMismatch {
                        element: b.id.clone(),
                        reason: format!(
                            "branch phases {phases} not present at node {}",
                            nodes[end].id
                        ),
                    });
                }
            }
            let (ru, rv) = (find(&mut uf, u), find(&mut uf, v));
            if ru == rv {
                return Err(FeederError::Cycle(b.id.clone()));
            }
            uf[ru] = rv;
            raw.push((u, v, phases));
        }

        // Orient every branch away from the slack.
        let mut adjacency: Vec<Vec<usize>> = vec![vec![]; nodes.len()];
        for (bi, &(u, v, _)) in raw.iter().enumerate() {
            adjacency[u].push(bi);
            adjacency[v].push(bi);
        }
        let z_base = base.z_base();
        let mut branches: Vec<Option<Branch>> = vec![None; raw.len()];
        let mut seen = vec![false; nodes.len()];
        seen[slack] = true;
        let mut queue = VecDeque::from([slack]);
        while let Some(k) = queue.pop_front() {
            for &bi in &adjacency[k] {
                if branches[bi].is_some() {
                    continue;
                }
                let (u, v, phases) = raw[bi];
                let child = if u == k { v } else { u };
                let d = &doc.branches[bi];
                let z =
                    Mat3::from_fn(|i, j| C64::new(d.r_ohm[3 * i + j], d.x_ohm[3 * i + j]) / z_base);
                branches[bi] = Some(Branch {
                    id: d.id.clone(),
                    from: k,
                    to: child,
                    length_m: d.length_m,
                    phases,
                    r_ohm: d.r_ohm,
                    x_ohm: d.x_ohm,
                    z,
                });
                nodes[child].parent = Some(bi);
                nodes[child].depth = nodes[k].depth + 1;
                seen[child] = true;
                queue.push_back(child);
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(FeederError::Disconnected(nodes[k].id.clone()));
        }
        let branches: Vec<Branch> = branches
            .into_iter()
            .map(|b| b.expect("tree covers all branches"))
            .collect();
        for (bi, b) in branches.iter().enumerate() {
            nodes[b.from].children.push(bi);
        }

        let s_phase = base.s_phase();
        let loads = injection_vectors(&doc.loads, &index, &nodes, s_phase)?;
        let dgs = injection_vectors(&doc.dgs, &index, &nodes, s_phase)?;

        let mut pmus = Vec::with_capacity(doc.pmus.len());
        let mut pmu_at = vec![None; nodes.len()];
        for p in &doc.pmus {
            let &k = index.get(&p.node).ok_or_else(|| FeederError::UnknownNode {
                element: "pmu".into(),
                node: p.node.clone(),
            })?;
            if pmu_at[k].is_some() {
                return Err(FeederError::Duplicate(format!("pmu@{}", p.node)));
            }
            let mut measured = Vec::new();
            for name in &p.branches {
                let bi = branch_index
                    .get(name)
                    .copied()
                    .filter(|&bi| branches[bi].from == k || branches[bi].to == k);
                match bi {
                    Some(bi) if !measured.contains(&bi) => measured.push(bi),
                    Some(_) => {
                        return Err(FeederError::Duplicate(format!("pmu@{}:{}", p.node, name)))
                    }
                    None => {
                        return Err(FeederError::PmuBranch {
                            node: p.node.clone(),
                            branch: name.clone(),
                        })
                    }
                }
            }
            pmu_at[k] = Some(pmus.len());
            pmus.push(PmuPlacement {
                node: k,
                measured_branches: measured,
            });
        }
        if pmu_at[slack].is_none() {
            return Err(FeederError::MissingSubstationPmu(nodes[slack].id.clone()));
        }

        let mut preorder = Vec::with_capacity(nodes.len());
        let mut stack = vec![slack];
        while let Some(k) = stack.pop() {
            preorder.push(k);
            for &bi in nodes[k].children.iter().rev() {
                stack.push(branches[bi].to);
            }
        }

        Ok(FeederModel {
            name: doc.name.clone(),
            base,
            slack,
            nodes,
            branches,
            loads,
            dgs,
            pmus,
            pmu_at,
            preorder,
            raw_loads: doc.loads.clone(),
            raw_dgs: doc.dgs.clone(),
        })
    }

    /// Serialize back to a document. Branches come out oriented away from the slack.
    pub fn to_document(&self) -> FeederDocument {
        FeederDocument {
            name: self.name.clone(),
            base: BaseDoc {
                kv_ll: self.base.kv_ll,
                mva: self.base.mva,
            },
            substation: self.nodes[self.slack].id.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDoc {
                    id: n.id.clone(),
                    phases: n.phases,
                })
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|b| BranchDoc {
                    id: b.id.clone(),
                    from: self.nodes[b.from].id.clone(),
                    to: self.nodes[b.to].id.clone(),
                    length_m: b.length_m,
                    r_ohm: b.r_ohm,
                    x_ohm: b.x_ohm,
                })
                .collect(),
            loads: self.raw_loads.clone(),
            dgs: self.raw_dgs.clone(),
            pmus: self
                .pmus
                .iter()
                .map(|p| PmuDoc {
                    node: self.nodes[p.node].id.clone(),
                    branches: p
                        .measured_branches
                        .iter()
                        .map(|&b| self.branches[b].id.clone())
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn branch_index(&self, id: &str) -> Option<usize> {
        self.branches.iter().position(|b| b.id == id)
    }

    /// Net consumed power at a node (loads minus DG output), p.u.
    pub fn net_load(&self, node: usize) -> Vec3 {
        self.loads[node] - self.dgs[node]
    }

    /// Branches on the path from the slack down to `node`, slack side first.
    pub fn path_from_slack(&self, node: usize) -> Vec<usize> {
        let mut path = Vec::with_capacity(self.nodes[node].depth);
        let mut k = node;
        while let Some(bi) = self.nodes[k].parent {
            path.push(bi);
            k = self.branches[bi].from;
        }
        path.reverse();
        path
    }

    /// Number of edges on the tree path between two nodes.
    pub fn node_distance(&self, mut a: usize, mut b: usize) -> usize {
        let mut d = 0;
        while self.nodes[a].depth > self.nodes[b].depth {
            a = self.branches[self.nodes[a].parent.unwrap()].from;
            d += 1;
        }
        while self.nodes[b].depth > self.nodes[a].depth {
            b = self.branches[self.nodes[b].parent.unwrap()].from;
            d += 1;
        }
        while a != b {
            a = self.branches[self.nodes[a].parent.unwrap()].from;
            b = self.branches[self.nodes[b].parent.unwrap()].from;
            d += 2;
        }
        d
    }

    /// Copy of the model with every branch impedance scaled independently.
    /// `scale[b] = (r_factor, x_factor)`.
    pub fn with_scaled_impedances(&self, scale: &[(f64, f64)]) -> FeederModel {
        let mut m = self.clone();
        let z_base = self.base.z_base();
        for (b, &(fr, fx)) in m.branches.iter_mut().zip(scale) {
            for v in b.r_ohm.iter_mut() {
                *v *= fr;
            }
            for v in b.x_ohm.iter_mut() {
                *v *= fx;
            }
            b.z = Mat3::from_fn(|i, j| C64::new(b.r_ohm[3 * i + j], b.x_ohm[3 * i + j]) / z_base);
        }
        m
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn line(id: &str, from: &str, to: &str, km: f64) -> BranchDoc {
        let r = [0.35, 0.16, 0.16, 0.16, 0.35, 0.16, 0.16, 0.16, 0.35].map(|v| v * km);
        let x = [0.80, 0.35, 0.30, 0.35, 0.80, 0.33, 0.30, 0.33, 0.80].map(|v| v * km);
        BranchDoc {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            length_m: km * 1e3,
            r_ohm: r,
            x_ohm: x,
        }
    }

    pub fn load(node: &str, kw: f64) -> InjectionDoc {
        InjectionDoc {
            node: node.into(),
            p_w: [kw * 1e3; 3],
            q_var: [kw * 400.0; 3],
        }
    }

    /// Five-node subgraph (nodes 1-5, lateral 3-4) rooted at the substation
    /// node 1, followed by boundary branch 5-6 and a second subgraph 5-6-7.
    pub fn five_node_doc() -> FeederDocument {
        let ids = ["1", "2", "3", "4", "5", "6", "7"];
        FeederDocument {
            name: "five-node".into(),
            base: BaseDoc {
                kv_ll: 12.47,
                mva: 1.0,
            },
            substation: "1".into(),
            nodes: ids
                .iter()
                .map(|i| NodeDoc {
                    id: (*i).into(),
                    phases: PhaseSet::ABC,
                })
                .collect(),
            branches: vec![
                line("1-2", "1", "2", 1.5),
                line("2-3", "2", "3", 2.0),
                line("3-4", "3", "4", 1.0),
                line("3-5", "3", "5", 2.5),
                line("5-6", "5", "6", 1.0),
                line("6-7", "6", "7", 1.2),
            ],
            loads: vec![
                load("2", 80.0),
                load("3", 60.0),
                load("4", 40.0),
                load("5", 50.0),
                load("6", 90.0),
                load("7", 30.0),
            ],
            dgs: vec![],
            pmus: vec![
                PmuDoc {
                    node: "1".into(),
                    branches: vec!["1-2".into()],
                },
                PmuDoc {
                    node: "5".into(),
                    branches: vec!["3-5".into(), "5-6".into()],
                },
                PmuDoc {
                    node: "7".into(),
                    branches: vec!["6-7".into()],
                },
            ],
        }
    }
}
