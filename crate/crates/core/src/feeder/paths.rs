//! Nested root-anchored paths inside a subgraph.

use super::{FeederModel, SubgraphPartition};

/// Branches added when a path grows by one trunk step: the trunk edge and
/// every complete lateral rooted at the trunk node it reaches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Increment {
    pub trunk_edge: usize,
    /// Lateral branches, parents before children.
    pub laterals: Vec<usize>,
}

impl Increment {
    pub fn edges(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.trunk_edge).chain(self.laterals.iter().copied())
    }

    pub fn len(&self) -> usize {
        1 + self.laterals.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Path chain P_1 ⊂ P_2 ⊂ … ⊂ P_S of one subgraph. `increments[0]` is P_1
/// itself (first trunk edge plus laterals at its head, plus any laterals
/// hanging at the root); `increments[s]` is P_{s+1} \ P_s.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathChain {
    /// Position of the subgraph in the partition (0-based).
    pub subgraph: usize,
    pub increments: Vec<Increment>,
    /// Trunk nodes n_0 (root) … n_S (far micro-PMU).
    pub trunk_nodes: Vec<usize>,
    /// Lateral branches hanging directly at the root (part of P_1).
    pub root_laterals: Vec<usize>,
}

impl PathChain {
    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    /// Edges of path `s` (1-based), in increment order.
    pub fn path_edges(&self, s: usize) -> Vec<usize> {
        let mut out = self.root_laterals.clone();
        for inc in &self.increments[..s] {
            out.extend(inc.edges());
        }
        out
    }

    /// Sending-end branches that leave path `s` towards the rest of the
    /// subgraph. Their currents are free states when the path is
    /// estimated on its own.
    pub fn frontier(&self, s: usize) -> Vec<usize> {
        self.increments
            .get(s)
            .map(|inc| vec![inc.trunk_edge])
            .unwrap_or_default()
    }
}

/// Enumerate the path chain of subgraph `k` (0-based position).
pub fn enumerate_paths(
    model: &FeederModel,
    partition: &SubgraphPartition,
    k: usize,
) -> Option<PathChain> {
    let sg = partition.subgraphs.get(k)?;
    let in_sub = |b: usize| partition.owner[b] == Some(k);
    let on_trunk = |b: usize| sg.trunk.contains(&b);

    // complete lateral subtrees hanging at `node`
    let laterals_at = |node: usize| {
        let mut out = vec![];
        let mut stack: Vec<usize> = model.nodes[node]
            .children
            .iter()
            .rev()
            .copied()
            .filter(|&b| in_sub(b) && !on_trunk(b))
            .collect();
        while let Some(b) = stack.pop() {
            out.push(b);
            let to = model.branches[b].to;
            stack.extend(
                model.nodes[to]
                    .children
                    .iter()
                    .rev()
                    .copied()
                    .filter(|&c| in_sub(c)),
            );
        }
        out
    };

    let mut trunk_nodes = vec![sg.root];
    let increments = sg
        .trunk
        .iter()
        .map(|&b| {
            let to = model.branches[b].to;
            trunk_nodes.push(to);
            Increment {
                trunk_edge: b,
                laterals: laterals_at(to),
            }
        })
        .collect();
    Some(PathChain {
        subgraph: k,
        increments,
        trunk_nodes,
        root_laterals: laterals_at(sg.root),
    })
}
