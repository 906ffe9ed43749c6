//! Split the feeder into subgraphs bounded by adjacent micro-PMUs.

use thiserror::Error;

use super::FeederModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("at least two micro-PMUs are required, found {0}")]
    TooFewPmus(usize),
    #[error("unobservable region at node {node:?}: {reason}")]
    Unobservable { node: String, reason: String },
}

/// Measurement class of a node inside a subgraph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeClass {
    /// Subgraph root: micro-PMU data only.
    Root,
    /// Far-end micro-PMU node: micro-PMU data plus pseudo-measurements.
    FarPmu,
    /// Pseudo-measurements only.
    Pseudo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subgraph {
    /// 1-based subgraph number.
    pub index: usize,
    pub root: usize,
    pub far_pmus: Vec<usize>,
    /// Branches from the root to the far micro-PMU, root side first.
    pub trunk: Vec<usize>,
    /// All branches, parents before children.
    pub edges: Vec<usize>,
    /// Nodes with their class, root first, in the same order as `edges`' heads.
    pub nodes: Vec<(usize, NodeClass)>,
}

impl Subgraph {
    pub fn contains_edge(&self, b: usize) -> bool {
        self.edges.contains(&b)
    }

    pub fn class_of(&self, node: usize) -> Option<NodeClass> {
        self.nodes.iter().find(|(k, _)| *k == node).map(|(_, c)| *c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphPartition {
    pub subgraphs: Vec<Subgraph>,
    /// Branches whose both endpoints carry micro-PMUs and that are
    /// observed directly rather than through a subgraph.
    pub direct_branches: Vec<usize>,
    /// Owning subgraph position (0-based into `subgraphs`) per branch.
    pub owner: Vec<Option<usize>>,
}

impl SubgraphPartition {
    pub fn subgraph_of_branch(&self, b: usize) -> Option<&Subgraph> {
        self.owner[b].map(|i| &self.subgraphs[i])
    }
}

/// Build the subgraph partition. One subgraph per non-substation micro-PMU,
/// spanning the tree path from its nearest upstream micro-PMU plus the
/// laterals hanging off that path; laterals at a subgraph root belong to the
/// subgraph that ends there.
pub fn partition(model: &FeederModel) -> Result<SubgraphPartition, PartitionError> {
    if model.pmus.len() < 2 {
        return Err(PartitionError::TooFewPmus(model.pmus.len()));
    }
    let n = model.nodes.len();
    let is_pmu = |k: usize| model.pmu_at[k].is_some();
    let parent_node = |k: usize| model.nodes[k].parent.map(|b| model.branches[b].from);

    // Candidate intervals in preorder of their far micro-PMU.
    struct Interval {
        root: usize,
        far: usize,
        trunk: Vec<usize>,
    }
    let mut intervals = Vec::new();
    for &k in &model.preorder {
        if k == model.slack || !is_pmu(k) {
            continue;
        }
        let mut trunk = vec![];
        let mut cur = k;
        while let Some(p) = parent_node(cur) {
            trunk.push(model.nodes[cur].parent.unwrap());
            cur = p;
            if is_pmu(cur) {
                break;
            }
        }
        trunk.reverse();
        intervals.push(Interval {
            root: cur,
            far: k,
            trunk,
        });
    }

    let mut direct_branches = Vec::new();
    let mut owner: Vec<Option<usize>> = vec![None; model.branches.len()];
    let mut subgraphs: Vec<Subgraph> = Vec::new();
    // trunk_of[node] = subgraph owning the node as a non-root trunk node
    let mut trunk_of: Vec<Option<usize>> = vec![None; n];
    let mut on_any_trunk = vec![false; n];
    for iv in &intervals {
        on_any_trunk[iv.root] = true;
        on_any_trunk[iv.far] = true;
        if iv.trunk.len() == 1 {
            direct_branches.push(iv.trunk[0]);
            continue;
        }
        let pos = subgraphs.len();
        for &b in &iv.trunk {
            owner[b] = Some(pos);
            let to = model.branches[b].to;
            trunk_of[to] = Some(pos);
            on_any_trunk[to] = true;
        }
        subgraphs.push(Subgraph {
            index: pos + 1,
            root: iv.root,
            far_pmus: vec![iv.far],
            trunk: iv.trunk.clone(),
            edges: vec![],
            nodes: vec![],
        });
    }

    // Assign laterals: every remaining branch hangs below some trunk node.
    for &k in &model.preorder {
        let Some(b) = model.nodes[k].parent else {
            continue;
        };
        if owner[b].is_some() || direct_branches.contains(&b) {
            continue;
        }
        let from = model.branches[b].from;
        let sub = if !on_any_trunk[from] {
            // inside a lateral already assigned through its parent branch
            owner[model.nodes[from].parent.unwrap()]
        } else if let Some(s) = trunk_of[from] {
            Some(s)
        } else {
            subgraphs.iter().position(|s| s.root == from)
        };
        match sub {
            Some(s) => owner[b] = Some(s),
            None => {
                return Err(PartitionError::Unobservable {
                    node: model.nodes[from].id.clone(),
                    reason: format!(
                        "branch {} is not enclosed by any pair of micro-PMUs",
                        model.branches[b].id
                    ),
                })
            }
        }
    }

    for &k in &model.preorder {
        if let Some(b) = model.nodes[k].parent {
            if let Some(s) = owner[b] {
                subgraphs[s].edges.push(b);
            }
        }
    }
    for sg in subgraphs.iter_mut() {
        sg.nodes.push((sg.root, NodeClass::Root));
        for &b in &sg.edges {
            let to = model.branches[b].to;
            let class = if sg.far_pmus.contains(&to) {
                NodeClass::FarPmu
            } else {
                NodeClass::Pseudo
            };
            sg.nodes.push((to, class));
        }
        check_observable(model, sg)?;
    }

    Ok(SubgraphPartition {
        subgraphs,
        direct_branches,
        owner,
    })
}

fn check_observable(model: &FeederModel, sg: &Subgraph) -> Result<(), PartitionError> {
    let measured = |node: usize, b: usize| {
        model.pmu_at[node].is_some_and(|p| model.pmus[p].measured_branches.contains(&b))
    };
    let unobservable = |node: usize, reason: String| PartitionError::Unobservable {
        node: model.nodes[node].id.clone(),
        reason,
    };
    for &b in &model.nodes[sg.root].children {
        if sg.edges.contains(&b) && !measured(sg.root, b) {
            return Err(unobservable(
                sg.root,
                format!(
                    "root micro-PMU of subgraph {} does not measure branch {}",
                    sg.index, model.branches[b].id
                ),
            ));
        }
    }
    for &(k, class) in &sg.nodes[1..] {
        for &b in &model.nodes[k].children {
            if sg.edges.contains(&b) {
                continue;
            }
            if class != NodeClass::FarPmu || !measured(k, b) {
                return Err(unobservable(
                    k,
                    format!(
                        "outflow on branch {} leaves subgraph {} unmeasured",
                        model.branches[b].id, sg.index
                    ),
                ));
            }
        }
    }
    Ok(())
}
