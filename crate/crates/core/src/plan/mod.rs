//! Query-plan data model, node featurization and hierarchical spectral
//! positional encoding.

mod features;
mod hspe;

use std::collections::{HashMap, VecDeque};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{featurize, FeatureVocab, NodeEncoding};
pub use hspe::{adjacency_mask, bfs_depths, hspe, laplacian, spectral_encoding, Hspe, DEFAULT_EIGENVECTORS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompareOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl CompareOp {
    pub const ALL: [CompareOp; 6] = [
        CompareOp::Eq,
        CompareOp::Ne,
        CompareOp::Lt,
        CompareOp::Le,
        CompareOp::Gt,
        CompareOp::Ge,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }
}

/// `<column, comparison, value>` with `value` already normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub column: String,
    pub op: CompareOp,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub id: usize,
    pub op: String,
    #[serde(default)]
    pub tables: Vec<String>,
    #[serde(default)]
    pub columns: Vec<String>,
    #[serde(default)]
    pub predicates: Vec<Predicate>,
    #[serde(default)]
    pub join: Option<(String, String)>,
    #[serde(default)]
    pub aggs: Vec<String>,
    pub card_est: f64,
    pub cost_est: f64,
    #[serde(default)]
    pub children: Vec<usize>,
}

/// Operator tree for one query. Node positions in `nodes` are the canonical
/// node order used by every encoding in this crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub query_id: String,
    pub nodes: Vec<PlanNode>,
    pub root: usize,
}

impl QueryPlan {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn positions(&self) -> HashMap<usize, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect()
    }

    /// Checks the tree invariants: unique ids, one root, every other node
    /// has exactly one parent, everything reachable from the root.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPlan(format!("{}: {m}", self.query_id)));
        if self.nodes.is_empty() {
            return bad("plan has no nodes".into());
        }
        let pos = self.positions();
        if pos.len() != self.nodes.len() {
            return bad("duplicate node ids".into());
        }
        if !pos.contains_key(&self.root) {
            return bad(format!("root {} is not a node", self.root));
        }
        let mut parents = vec![0usize; self.nodes.len()];
        for n in &self.nodes {
            if !(n.card_est.is_finite() && n.card_est >= 0.0 && n.cost_est.is_finite() && n.cost_est >= 0.0) {
                return bad(format!("node {} has invalid estimates", n.id));
            }
            if let Some(p) = n.predicates.iter().find(|p| !(0.0..=1.0).contains(&p.value)) {
                return bad(format!("node {} predicate value {} outside [0,1]", n.id, p.value));
            }
            for c in &n.children {
                match pos.get(c) {
                    Some(&ci) => parents[ci] += 1,
                    None => return bad(format!("node {} references missing child {c}", n.id)),
                }
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let expected = usize::from(n.id != self.root);
            if parents[i] != expected {
                return bad(format!("node {} has {} parents", n.id, parents[i]));
            }
        }
        if self.bfs_order().len() != self.nodes.len() {
            return bad("plan is not connected".into());
        }
        Ok(())
    }

    /// Node positions in breadth-first order from the root, children visited
    /// in their listed order.
    pub fn bfs_order(&self) -> Vec<usize> {
        let pos = self.positions();
        let Some(&root) = pos.get(&self.root) else {
            return Vec::new();
        };
        let mut seen = vec![false; self.nodes.len()];
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for c in &self.nodes[i].children {
                if let Some(&ci) = pos.get(c) {
                    if !seen[ci] {
                        seen[ci] = true;
                        queue.push_back(ci);
                    }
                }
            }
        }
        order
    }

    /// Undirected tree edges as position pairs `(parent, child)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let pos = self.positions();
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(i, n)| n.children.iter().filter_map(|c| pos.get(c)).map(move |&ci| (i, ci)))
            .collect()
    }
}

/// Reads a plan corpus in JSON Lines form (one [`QueryPlan`] per line).
/// Blank lines are ignored; every plan is validated.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<QueryPlan>> {
    let mut plans = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let plan: QueryPlan = serde_json::from_str(&line)
            .map_err(|e| Error::config(format!("line {}", lineno + 1), e.to_string()))?;
        plan.validate()?;
        plans.push(plan);
    }
    Ok(plans)
}

pub fn write_corpus<W: std::io::Write>(mut w: W, plans: &[QueryPlan]) -> Result<()> {
    for p in plans {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod test_plans {
    use super::*;

    pub fn node(id: usize, op: &str, children: Vec<usize>) -> PlanNode {
        PlanNode {
            id,
            op: op.to_string(),
            tables: vec![],
            columns: vec![],
            predicates: vec![],
            join: None,
            aggs: vec![],
            card_est: 100.0,
            cost_est: 10.0,
            children,
        }
    }

    pub fn chain(n: usize) -> QueryPlan {
        QueryPlan {
            query_id: format!("chain{n}"),
            nodes: (0..n)
                .map(|i| node(i, "filter", if i + 1 < n { vec![i + 1] } else { vec![] }))
                .collect(),
            root: 0,
        }
    }

    pub fn cherry() -> QueryPlan {
        QueryPlan {
            query_id: "cherry".into(),
            nodes: vec![node(0, "hash_join", vec![1, 2]), node(1, "scan", vec![]), node(2, "scan", vec![])],
            root: 0,
        }
    }
}
