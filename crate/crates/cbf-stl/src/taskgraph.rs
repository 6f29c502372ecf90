//! Task and logic trees, the min/max satisfaction function σ, and the
//! parameter-sharing layout.
//!
//! A normalized formula is modeled as a rooted tree whose vertices are
//! temporal operators, logical connectives, and predicate leaves. Removing
//! the temporal vertices (and attaching to each predicate leaf the operator
//! stack composed from its temporal ancestors, outermost first) yields a
//! proper logic tree of ∧/∨ over operator leaves. Bottom-up grouping folds
//! that tree into a min/max expression σ whose nonnegativity certifies
//! satisfaction. Parameter slots that must coincide — the shared slot of an
//! until pair, and the replicated slot of a temporal ancestor dominating
//! several leaves — are tied via a symmetric adjacency matrix `A`, reduced
//! to independent columns `Â` with `τ = Â·τ̂`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::formula::{Formula, NormalizedFormula};
use crate::operator::{LayerKind, NestedOperator, OperatorLayer, ParamBox, SlotBound};

/// Vertex kinds of the STL operator tree.
#[derive(Debug, Clone, PartialEq)]
pub enum StlVertex {
    Temporal { label: String },
    Logical { and: bool },
    Leaf { label: String, negated: bool },
}

/// Rooted STL operator tree (arena representation).
#[derive(Debug, Clone, PartialEq)]
pub struct StlTree {
    pub vertices: Vec<StlVertex>,
    pub children: Vec<Vec<usize>>,
    pub root: usize,
}

impl StlTree {
    fn push(&mut self, v: StlVertex) -> usize {
        self.vertices.push(v);
        self.children.push(Vec::new());
        self.vertices.len() - 1
    }

    /// DOT export with vertex labels.
    pub fn to_dot(&self, name: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph {name} {{");
        for (i, v) in self.vertices.iter().enumerate() {
            let label = match v {
                StlVertex::Temporal { label } => label.clone(),
                StlVertex::Logical { and } => if *and { "and" } else { "or" }.to_string(),
                StlVertex::Leaf { label, negated } => {
                    if *negated {
                        format!("!{label}")
                    } else {
                        label.clone()
                    }
                }
            };
            let _ = writeln!(out, "  n{i} [label=\"{label}\"];");
        }
        for (i, cs) in self.children.iter().enumerate() {
            for c in cs {
                let _ = writeln!(out, "  n{i} -> n{c};");
            }
        }
        out.push_str("}\n");
        out
    }
}

fn fmt_num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e12 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Build the STL operator tree of a normalized formula (until nodes appear
/// as their decomposed left/right conjuncts).
pub fn build_stl_tree(nf: &NormalizedFormula) -> StlTree {
    fn go(f: &Formula, nf: &NormalizedFormula, tree: &mut StlTree) -> usize {
        match f {
            Formula::Predicate { label, negated } => tree.push(StlVertex::Leaf {
                label: label.clone(),
                negated: *negated,
            }),
            Formula::And(cs) | Formula::Or(cs) => {
                let and = matches!(f, Formula::And(_));
                let id = tree.push(StlVertex::Logical { and });
                for c in cs {
                    let cid = go(c, nf, tree);
                    tree.children[id].push(cid);
                }
                id
            }
            Formula::Always { t_lo, t_hi, child } => {
                let id = tree.push(StlVertex::Temporal {
                    label: format!("G[{},{}]", fmt_num(*t_lo), fmt_num(*t_hi)),
                });
                let cid = go(child, nf, tree);
                tree.children[id].push(cid);
                id
            }
            Formula::Eventually { t_lo, t_hi, child } => {
                let id = tree.push(StlVertex::Temporal {
                    label: format!("F[{},{}]", fmt_num(*t_lo), fmt_num(*t_hi)),
                });
                let cid = go(child, nf, tree);
                tree.children[id].push(cid);
                id
            }
            Formula::UntilLeft { t_lo, slot, child } => {
                let hi = nf.until_slots[*slot].hi;
                let id = tree.push(StlVertex::Temporal {
                    label: format!("UL[{},{}]", fmt_num(*t_lo), fmt_num(*t_lo + hi)),
                });
                let cid = go(child, nf, tree);
                tree.children[id].push(cid);
                id
            }
            Formula::UntilRight { t_lo, slot, child } => {
                let hi = nf.until_slots[*slot].hi;
                let id = tree.push(StlVertex::Temporal {
                    label: format!("UR[{},{}]", fmt_num(*t_lo), fmt_num(*t_lo + hi)),
                });
                let cid = go(child, nf, tree);
                tree.children[id].push(cid);
                id
            }
            Formula::Until { .. } => unreachable!("normalized formulas carry no raw until"),
        }
    }
    let mut tree = StlTree {
        vertices: Vec::new(),
        children: Vec::new(),
        root: 0,
    };
    let root = go(&nf.root, nf, &mut tree);
    tree.root = root;
    tree
}

/// Key identifying a tie class of parameter slots: slots with equal keys
/// must coincide at runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TieKey {
    /// The replicated slot of one temporal AST vertex (shared across every
    /// leaf it dominates).
    Node(usize),
    /// The shared slot of an until pair.
    Until(usize),
}

/// One temporal layer on a leaf's ancestor chain (outermost first).
#[derive(Debug, Clone, PartialEq)]
pub struct LeafLayer {
    pub kind: LayerKind,
    pub t_lo: f64,
    pub t_hi: f64,
    /// Tie class of this layer's parameter slot, if it has one.
    pub tie: Option<TieKey>,
}

/// One operator leaf of the logic tree.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafInfo {
    pub label: String,
    pub negated: bool,
    pub layers: Vec<LeafLayer>,
}

/// Proper logic tree: ∧/∨ inner nodes over operator leaves (indices into
/// [`LogicTree::leaves`]).
#[derive(Debug, Clone, PartialEq)]
pub enum LogicNode {
    And(Vec<LogicNode>),
    Or(Vec<LogicNode>),
    Leaf(usize),
}

impl LogicNode {
    /// Original leaf indices under this node, left to right.
    pub fn leaf_indices(&self) -> Vec<usize> {
        match self {
            LogicNode::Leaf(k) => vec![*k],
            LogicNode::And(cs) | LogicNode::Or(cs) => {
                cs.iter().flat_map(LogicNode::leaf_indices).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogicTree {
    pub root: LogicNode,
    pub leaves: Vec<LeafInfo>,
}

impl LogicTree {
    /// DOT export.
    pub fn to_dot(&self, name: &str) -> String {
        fn go(node: &LogicNode, leaves: &[LeafInfo], next: &mut usize, out: &mut String) -> usize {
            let id = *next;
            *next += 1;
            match node {
                LogicNode::Leaf(k) => {
                    let _ = writeln!(out, "  n{id} [label=\"V{} ({})\"];", k + 1, leaves[*k].label);
                }
                LogicNode::And(cs) | LogicNode::Or(cs) => {
                    let lbl = if matches!(node, LogicNode::And(_)) {
                        "and"
                    } else {
                        "or"
                    };
                    let _ = writeln!(out, "  n{id} [label=\"{lbl}\"];");
                    for c in cs {
                        let cid = go(c, leaves, next, out);
                        let _ = writeln!(out, "  n{id} -> n{cid};");
                    }
                }
            }
            id
        }
        let mut out = String::new();
        let _ = writeln!(out, "digraph {name} {{");
        let mut next = 0;
        go(&self.root, &self.leaves, &mut next, &mut out);
        out.push_str("}\n");
        out
    }
}

/// Build the logic tree: strip temporal vertices, attach to each predicate
/// leaf the ancestor layer chain (outermost first), contract single-child
/// roots.
pub fn build_logic_tree(nf: &NormalizedFormula) -> LogicTree {
    fn go(
        f: &Formula,
        nf: &NormalizedFormula,
        stack: &mut Vec<LeafLayer>,
        node_id: &mut usize,
        leaves: &mut Vec<LeafInfo>,
    ) -> LogicNode {
        let my_id = *node_id;
        *node_id += 1;
        match f {
            Formula::Predicate { label, negated } => {
                leaves.push(LeafInfo {
                    label: label.clone(),
                    negated: *negated,
                    layers: stack.clone(),
                });
                LogicNode::Leaf(leaves.len() - 1)
            }
            Formula::And(cs) | Formula::Or(cs) => {
                let children = cs
                    .iter()
                    .map(|c| go(c, nf, stack, node_id, leaves))
                    .collect();
                if matches!(f, Formula::And(_)) {
                    LogicNode::And(children)
                } else {
                    LogicNode::Or(children)
                }
            }
            Formula::Always { t_lo, t_hi, child } => {
                stack.push(LeafLayer {
                    kind: LayerKind::Always,
                    t_lo: *t_lo,
                    t_hi: *t_hi,
                    tie: None,
                });
                let n = go(child, nf, stack, node_id, leaves);
                stack.pop();
                n
            }
            Formula::Eventually { t_lo, t_hi, child } => {
                stack.push(LeafLayer {
                    kind: LayerKind::Eventually,
                    t_lo: *t_lo,
                    t_hi: *t_hi,
                    tie: Some(TieKey::Node(my_id)),
                });
                let n = go(child, nf, stack, node_id, leaves);
                stack.pop();
                n
            }
            Formula::UntilLeft { t_lo, slot, child } => {
                stack.push(LeafLayer {
                    kind: LayerKind::UntilLeft,
                    t_lo: *t_lo,
                    t_hi: *t_lo + nf.until_slots[*slot].hi,
                    tie: Some(TieKey::Until(*slot)),
                });
                let n = go(child, nf, stack, node_id, leaves);
                stack.pop();
                n
            }
            Formula::UntilRight { t_lo, slot, child } => {
                stack.push(LeafLayer {
                    kind: LayerKind::UntilRight,
                    t_lo: *t_lo,
                    t_hi: *t_lo + nf.until_slots[*slot].hi,
                    tie: Some(TieKey::Until(*slot)),
                });
                let n = go(child, nf, stack, node_id, leaves);
                stack.pop();
                n
            }
            Formula::Until { .. } => unreachable!("normalized formulas carry no raw until"),
        }
    }
    let mut leaves = Vec::new();
    let mut stack = Vec::new();
    let mut node_id = 0;
    let root = go(&nf.root, nf, &mut stack, &mut node_id, &mut leaves);
    LogicTree { root, leaves }
}

/// Instantiate the composed per-leaf nested operator from its layer chain.
pub fn instantiate_leaf(leaf: &LeafInfo) -> NestedOperator {
    let templates: Vec<OperatorLayer> = leaf
        .layers
        .iter()
        .map(|l| OperatorLayer {
            kind: l.kind,
            // alpha/beta/theta are re-minted by `from_layers`; only the
            // template interval and kind matter here.
            alpha: crate::operator::WindowFunction::constant(l.t_lo),
            beta: crate::operator::WindowFunction::constant(l.t_hi),
            theta: ParamBox::empty(),
            t_lo: l.t_lo,
            t_hi: l.t_hi,
        })
        .collect();
    if templates.is_empty() {
        NestedOperator::from_layer(crate::operator::layer_identity())
    } else {
        NestedOperator::from_layers(templates)
    }
}

/// Min/max expression over leaf evaluators, isomorphic to the logic tree.
#[derive(Debug, Clone, PartialEq)]
pub enum SigmaExpr {
    Min(Vec<SigmaExpr>),
    Max(Vec<SigmaExpr>),
    Leaf(usize),
}

impl SigmaExpr {
    /// Render like `max{V1, min{V2, V3}}`.
    pub fn shape(&self) -> String {
        match self {
            SigmaExpr::Leaf(k) => format!("V{}", k + 1),
            SigmaExpr::Min(cs) => format!(
                "min{{{}}}",
                cs.iter().map(SigmaExpr::shape).collect::<Vec<_>>().join(", ")
            ),
            SigmaExpr::Max(cs) => format!(
                "max{{{}}}",
                cs.iter().map(SigmaExpr::shape).collect::<Vec<_>>().join(", ")
            ),
        }
    }
}

/// Fold the logic tree bottom-up: repeatedly find the inner node of maximum
/// depth whose children are all folded, replace it by the min (∧) or max (∨)
/// of its children, until the root remains. Ties process in leftmost-leaf
/// order. Also returns, per folding step, the set of original leaf indices
/// grouped at that step.
pub fn fold_sigma_with_order(lt: &LogicTree) -> (SigmaExpr, Vec<Vec<usize>>) {
    #[derive(Clone)]
    enum Work {
        Done(SigmaExpr, Vec<usize>),
        Inner {
            and: bool,
            children: Vec<Work>,
        },
    }
    fn from_node(n: &LogicNode) -> Work {
        match n {
            LogicNode::Leaf(k) => Work::Done(SigmaExpr::Leaf(*k), vec![*k]),
            LogicNode::And(cs) | LogicNode::Or(cs) => Work::Inner {
                and: matches!(n, LogicNode::And(_)),
                children: cs.iter().map(from_node).collect(),
            },
        }
    }
    /// Depth of the deepest inner node whose children are all folded.
    fn max_ready_depth(w: &Work, d: usize) -> Option<usize> {
        match w {
            Work::Done(..) => None,
            Work::Inner { children, .. } => {
                let ready = children.iter().all(|c| matches!(c, Work::Done(..)));
                let below = children
                    .iter()
                    .filter_map(|c| max_ready_depth(c, d + 1))
                    .max();
                match (ready, below) {
                    (true, Some(b)) => Some(b.max(d)),
                    (true, None) => Some(d),
                    (false, b) => b,
                }
            }
        }
    }
    /// Fold the leftmost ready inner node at exactly depth `target`.
    fn fold_at(w: &mut Work, d: usize, target: usize, order: &mut Vec<Vec<usize>>) -> bool {
        if let Work::Inner { and, children } = w {
            if d == target && children.iter().all(|c| matches!(c, Work::Done(..))) {
                let mut exprs = Vec::new();
                let mut idxs = Vec::new();
                for c in children.drain(..) {
                    if let Work::Done(e, i) = c {
                        exprs.push(e);
                        idxs.extend(i);
                    }
                }
                let expr = if *and {
                    SigmaExpr::Min(exprs)
                } else {
                    SigmaExpr::Max(exprs)
                };
                order.push(idxs.clone());
                *w = Work::Done(expr, idxs);
                return true;
            }
            for c in children.iter_mut() {
                if fold_at(c, d + 1, target, order) {
                    return true;
                }
            }
        }
        false
    }

    let mut work = from_node(&lt.root);
    let mut order = Vec::new();
    while let Some(target) = max_ready_depth(&work, 0) {
        assert!(fold_at(&mut work, 0, target, &mut order));
    }
    match work {
        Work::Done(e, _) => (e, order),
        Work::Inner { .. } => unreachable!("folding terminates at the root"),
    }
}

/// Fold the logic tree into its min/max satisfaction expression.
pub fn fold_sigma(lt: &LogicTree) -> SigmaExpr {
    fold_sigma_with_order(lt).0
}

/// Evaluate a σ expression given a per-leaf evaluator. Completed leaves
/// should evaluate to `+∞` (a fully discharged obligation is vacuous under
/// min and never the argmax under max).
pub fn sigma_fold_eval<F>(expr: &SigmaExpr, leaf_value: &mut F) -> Result<f64>
where
    F: FnMut(usize) -> Result<f64>,
{
    match expr {
        SigmaExpr::Leaf(k) => leaf_value(*k),
        SigmaExpr::Min(cs) => {
            let mut out = f64::INFINITY;
            for c in cs {
                out = out.min(sigma_fold_eval(c, leaf_value)?);
            }
            Ok(out)
        }
        SigmaExpr::Max(cs) => {
            let mut out = f64::NEG_INFINITY;
            for c in cs {
                out = out.max(sigma_fold_eval(c, leaf_value)?);
            }
            Ok(out)
        }
    }
}

/// One stacked parameter slot: a parameterized layer of one leaf.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackedSlot {
    pub leaf: usize,
    /// Index into the leaf's layer chain.
    pub layer: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Parameter-sharing layout: stacked slots, tie adjacency `A`, reduction
/// `Â` with `τ = Â·τ̂`, and the independent-slot domain box.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub stacked: Vec<StackedSlot>,
    /// Symmetric 0/1 adjacency over stacked slots (diagonal all ones).
    pub a: Vec<Vec<u8>>,
    /// stacked × independent 0/1 matrix.
    pub a_hat: Vec<Vec<u8>>,
    /// Independent class of each stacked slot.
    pub class_of: Vec<usize>,
    /// Independent-slot bounds (Θ of the reduced parameters).
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
}

impl ParamLayout {
    /// Number of independent slots L̂.
    pub fn num_independent(&self) -> usize {
        self.lb.len()
    }

    /// Expand independent parameters to the stacked vector (`τ = Â·τ̂`).
    pub fn expand(&self, tau_hat: &[f64]) -> Vec<f64> {
        self.class_of.iter().map(|&c| tau_hat[c]).collect()
    }

    /// Independent slot index backing a given leaf layer, if parameterized.
    pub fn independent_of(&self, leaf: usize, layer: usize) -> Option<usize> {
        self.stacked
            .iter()
            .position(|s| s.leaf == leaf && s.layer == layer)
            .map(|i| self.class_of[i])
    }

    /// Reduced-domain box as slot bounds (ids are independent indices).
    pub fn theta_box(&self) -> ParamBox {
        ParamBox {
            slots: self
                .lb
                .iter()
                .zip(&self.ub)
                .enumerate()
                .map(|(i, (&lo, &hi))| SlotBound { id: i, lo, hi })
                .collect(),
        }
    }

    /// Matrix pretty-printer for diagnostics.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "stacked slots: {}", self.stacked.len());
        for (i, s) in self.stacked.iter().enumerate() {
            let _ = writeln!(
                out,
                "  tau_{}: leaf {} layer {} in [{}, {}] -> tau_hat_{}",
                i + 1,
                s.leaf + 1,
                s.layer,
                s.lo,
                s.hi,
                self.class_of[i] + 1
            );
        }
        let _ = writeln!(out, "A =");
        for row in &self.a {
            let _ = writeln!(
                out,
                "  [{}]",
                row.iter().map(u8::to_string).collect::<Vec<_>>().join(" ")
            );
        }
        let _ = writeln!(out, "A_hat =");
        for row in &self.a_hat {
            let _ = writeln!(
                out,
                "  [{}]",
                row.iter().map(u8::to_string).collect::<Vec<_>>().join(" ")
            );
        }
        let _ = writeln!(
            out,
            "theta_hat = {}",
            self.lb
                .iter()
                .zip(&self.ub)
                .map(|(l, u)| format!("[{l}, {u}]"))
                .collect::<Vec<_>>()
                .join(" x ")
        );
        out
    }
}

/// Build the parameter layout from a logic tree: stack every parameterized
/// layer of every leaf (leaf order, outermost first within a leaf), tie
/// slots with equal tie keys, reduce to first-occurrence independent
/// columns.
pub fn build_param_layout(lt: &LogicTree) -> Result<ParamLayout> {
    let mut stacked = Vec::new();
    let mut keys: Vec<TieKey> = Vec::new();
    for (k, leaf) in lt.leaves.iter().enumerate() {
        for (li, layer) in leaf.layers.iter().enumerate() {
            if let Some(tie) = layer.tie {
                stacked.push(StackedSlot {
                    leaf: k,
                    layer: li,
                    lo: 0.0,
                    hi: layer.t_hi - layer.t_lo,
                });
                keys.push(tie);
            }
        }
    }
    let n = stacked.len();
    let mut class_keys: Vec<TieKey> = Vec::new();
    let mut class_of = Vec::with_capacity(n);
    let mut lb: Vec<f64> = Vec::new();
    let mut ub: Vec<f64> = Vec::new();
    for (i, key) in keys.iter().enumerate() {
        match class_keys.iter().position(|k| k == key) {
            Some(c) => {
                if (stacked[i].lo - lb[c]).abs() > 1e-12 || (stacked[i].hi - ub[c]).abs() > 1e-12 {
                    let first = class_of.iter().position(|&cc| cc == c).unwrap();
                    return Err(Error::InconsistentSlotDomains { a: first, b: i });
                }
                class_of.push(c);
            }
            None => {
                class_keys.push(*key);
                class_of.push(class_keys.len() - 1);
                lb.push(stacked[i].lo);
                ub.push(stacked[i].hi);
            }
        }
    }
    let a = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| u8::from(class_of[i] == class_of[j]))
                .collect()
        })
        .collect();
    let a_hat = (0..n)
        .map(|i| {
            (0..lb.len())
                .map(|c| u8::from(class_of[i] == c))
                .collect()
        })
        .collect();
    Ok(ParamLayout {
        stacked,
        a,
        a_hat,
        class_of,
        lb,
        ub,
    })
}

/// Worst-case completion horizon of a logic tree's obligations: the largest
/// per-leaf sum of window-end upper bounds, plus slack for the final
/// instance to play out.
pub fn completion_horizon(lt: &LogicTree) -> f64 {
    let per_leaf = lt
        .leaves
        .iter()
        .map(|leaf| leaf.layers.iter().map(|l| l.t_hi).sum::<f64>())
        .fold(0.0, f64::max);
    per_leaf + 5.0
}
