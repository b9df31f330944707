use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{CompareOp, QueryPlan};
use crate::error::{Error, Result};

/// Per-corpus feature vocabulary.
///
/// Node vectors are laid out as
///
/// ```text
/// [ operator one-hot | tables | columns | join columns | aggregates
/// | predicate slot 0 .. slot P-1 | cardinality | cost ]
/// ```
///
/// where each predicate slot is `[column one-hot | comparison one-hot | value]`
/// and `P` is the largest predicate count seen in the corpus. Cardinality and
/// cost are min-max scaled over `ln(1 + x)` across the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVocab {
    pub operators: Vec<String>,
    pub tables: Vec<String>,
    pub columns: Vec<String>,
    pub aggs: Vec<String>,
    pub max_predicates: usize,
    pub card_range: (f64, f64),
    pub cost_range: (f64, f64),
}

/// Fixed-width node feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEncoding(pub Vec<f64>);

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn scale(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        ((v.ln_1p() - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

impl FeatureVocab {
    pub fn from_plans(plans: &[QueryPlan]) -> Self {
        let mut ops = BTreeSet::new();
        let mut tables = BTreeSet::new();
        let mut columns = BTreeSet::new();
        let mut aggs = BTreeSet::new();
        let mut max_predicates = 0;
        for n in plans.iter().flat_map(|p| &p.nodes) {
            ops.insert(n.op.clone());
            tables.extend(n.tables.iter().cloned());
            columns.extend(n.columns.iter().cloned());
            columns.extend(n.predicates.iter().map(|p| p.column.clone()));
            if let Some((a, b)) = &n.join {
                columns.insert(a.clone());
                columns.insert(b.clone());
            }
            aggs.extend(n.aggs.iter().cloned());
            max_predicates = max_predicates.max(n.predicates.len());
        }
        let nodes = || plans.iter().flat_map(|p| &p.nodes);
        Self {
            operators: ops.into_iter().collect(),
            tables: tables.into_iter().collect(),
            columns: columns.into_iter().collect(),
            aggs: aggs.into_iter().collect(),
            max_predicates,
            card_range: range(nodes().map(|n| n.card_est.ln_1p())),
            cost_range: range(nodes().map(|n| n.cost_est.ln_1p())),
        }
    }

    fn predicate_width(&self) -> usize {
        self.columns.len() + CompareOp::ALL.len() + 1
    }

    /// Width of every node encoding.
    pub fn dim(&self) -> usize {
        self.operators.len()
            + self.tables.len()
            + 2 * self.columns.len()
            + self.aggs.len()
            + self.max_predicates * self.predicate_width()
            + 2
    }

    pub fn operator_index(&self, op: &str) -> Option<usize> {
        self.operators.binary_search_by(|o| o.as_str().cmp(op)).ok()
    }

    pub fn num_node_types(&self) -> usize {
        self.operators.len()
    }
}

fn lookup(list: &[String], key: &str, what: &str, plan: &QueryPlan) -> Result<usize> {
    list.binary_search_by(|x| x.as_str().cmp(key))
        .map_err(|_| Error::Featurization(format!("{}: unknown {what} `{key}`", plan.query_id)))
}

/// One encoding per node, in `plan.nodes` order.
pub fn featurize(plan: &QueryPlan, vocab: &FeatureVocab) -> Result<Vec<NodeEncoding>> {
    let nc = vocab.columns.len();
    let op_off = 0;
    let table_off = op_off + vocab.operators.len();
    let col_off = table_off + vocab.tables.len();
    let join_off = col_off + nc;
    let agg_off = join_off + nc;
    let pred_off = agg_off + vocab.aggs.len();
    let tail = pred_off + vocab.max_predicates * vocab.predicate_width();

    plan.nodes
        .iter()
        .map(|n| {
            let mut v = vec![0.0; vocab.dim()];
            v[op_off + lookup(&vocab.operators, &n.op, "operator", plan)?] = 1.0;
            for t in &n.tables {
                v[table_off + lookup(&vocab.tables, t, "table", plan)?] = 1.0;
            }
            for c in &n.columns {
                v[col_off + lookup(&vocab.columns, c, "column", plan)?] = 1.0;
            }
            if let Some((a, b)) = &n.join {
                v[join_off + lookup(&vocab.columns, a, "column", plan)?] = 1.0;
                v[join_off + lookup(&vocab.columns, b, "column", plan)?] = 1.0;
            }
            for a in &n.aggs {
                v[agg_off + lookup(&vocab.aggs, a, "aggregate", plan)?] = 1.0;
            }
            if n.predicates.len() > vocab.max_predicates {
                return Err(Error::Featurization(format!(
                    "{}: node {} has {} predicates, vocabulary allows {}",
                    plan.query_id,
                    n.id,
                    n.predicates.len(),
                    vocab.max_predicates
                )));
            }
            for (slot, p) in n.predicates.iter().enumerate() {
                let base = pred_off + slot * vocab.predicate_width();
                v[base + lookup(&vocab.columns, &p.column, "column", plan)?] = 1.0;
                v[base + nc + p.op.index()] = 1.0;
                v[base + nc + CompareOp::ALL.len()] = p.value;
            }
            v[tail] = scale(n.card_est, vocab.card_range);
            v[tail + 1] = scale(n.cost_est, vocab.cost_range);
            Ok(NodeEncoding(v))
        })
        .collect()
}
