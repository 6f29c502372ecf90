//! STL formulas over scalar band predicates.
//!
//! Surface grammar (precedence: unary > `U` > `&` > `|`, parentheses
//! override):
//!
//! ```text
//! formula := or
//! or      := and ('|' and)*
//! and     := until ('&' until)*
//! until   := unary ('U[a,b]' until)?          // right-associative
//! unary   := '!' primary
//!          | 'G[a,b]' '(' formula ')'
//!          | 'F[a,b]' '(' formula ')'
//!          | primary
//! primary := label | '(' formula ')'
//! ```
//!
//! Negation is resolved at parse time by flipping the sign of the predicate
//! function `h`; negating anything but a predicate is rejected.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// A scalar band predicate `h(x) = c·(r² − (x − x0)²)`, true on the band
/// `|x − x0| ≤ r`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BandPredicate {
    /// Positive scale factor.
    pub c: f64,
    /// Positive band radius (state units).
    pub r: f64,
    /// Band center (state units).
    pub x0: f64,
    /// Identifier used in formula text.
    pub label: String,
}

impl BandPredicate {
    /// Construct a predicate, validating `c > 0` and `r > 0`.
    pub fn new(label: impl Into<String>, c: f64, r: f64, x0: f64) -> Result<Self> {
        let label = label.into();
        if !(c > 0.0) || !(r > 0.0) {
            return Err(Error::InvalidPredicate { label, c, r });
        }
        Ok(Self { c, r, x0, label })
    }

    /// Evaluate `h(x) = c·(r² − (x − x0)²)`.
    pub fn eval(&self, x: f64) -> f64 {
        self.c * (self.r * self.r - (x - self.x0) * (x - self.x0))
    }

    /// Spatial derivative `h′(x) = −2c·(x − x0)`.
    pub fn eval_grad(&self, x: f64) -> f64 {
        -2.0 * self.c * (x - self.x0)
    }
}

/// Evaluate a predicate at a state (module-level convenience mirroring the
/// predicate-evaluation operation).
pub fn eval_predicate(p: &BandPredicate, x: f64) -> f64 {
    p.eval(x)
}

/// Identifier of a shared until parameter slot, assigned by
/// [`normalize_until`].
pub type UntilSlotId = usize;

/// STL abstract syntax tree. `And`/`Or` are n-ary and flattened.
///
/// The `UntilLeft`/`UntilRight` variants only appear after
/// [`normalize_until`]: an until `L U[a,b] R` is rewritten to
/// `UntilLeft(a, slot, L) & UntilRight(a, slot, R)` where the left conjunct
/// carries the window `[0, a+τ]`, the right conjunct the point window
/// `a+τ`, and both reference the same fresh slot `τ ∈ [0, b−a]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Formula {
    /// Predicate leaf; `negated` flips the sign of `h`.
    Predicate { label: String, negated: bool },
    /// n-ary conjunction (≥ 2 children).
    And(Vec<Formula>),
    /// n-ary disjunction (≥ 2 children).
    Or(Vec<Formula>),
    /// `G[t_lo, t_hi] child`.
    Always {
        t_lo: f64,
        t_hi: f64,
        child: Box<Formula>,
    },
    /// `F[t_lo, t_hi] child`.
    Eventually {
        t_lo: f64,
        t_hi: f64,
        child: Box<Formula>,
    },
    /// `left U[t_lo, t_hi] right`.
    Until {
        t_lo: f64,
        t_hi: f64,
        left: Box<Formula>,
        right: Box<Formula>,
    },
    /// Normalized until, left conjunct: hold `child` on `[0, t_lo + τ]`.
    UntilLeft {
        t_lo: f64,
        slot: UntilSlotId,
        child: Box<Formula>,
    },
    /// Normalized until, right conjunct: satisfy `child` at `t_lo + τ`.
    UntilRight {
        t_lo: f64,
        slot: UntilSlotId,
        child: Box<Formula>,
    },
}

impl Formula {
    /// True if the tree contains no raw `Until` node.
    pub fn is_until_free(&self) -> bool {
        match self {
            Formula::Predicate { .. } => true,
            Formula::And(cs) | Formula::Or(cs) => cs.iter().all(Formula::is_until_free),
            Formula::Always { child, .. }
            | Formula::Eventually { child, .. }
            | Formula::UntilLeft { child, .. }
            | Formula::UntilRight { child, .. } => child.is_until_free(),
            Formula::Until { .. } => false,
        }
    }

    /// All predicate labels referenced, in left-to-right occurrence order
    /// (with duplicates).
    pub fn predicate_occurrences(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_labels(&mut out);
        out
    }

    fn collect_labels<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Formula::Predicate { label, .. } => out.push(label),
            Formula::And(cs) | Formula::Or(cs) => {
                for c in cs {
                    c.collect_labels(out);
                }
            }
            Formula::Always { child, .. }
            | Formula::Eventually { child, .. }
            | Formula::UntilLeft { child, .. }
            | Formula::UntilRight { child, .. } => child.collect_labels(out),
            Formula::Until { left, right, .. } => {
                left.collect_labels(out);
                right.collect_labels(out);
            }
        }
    }

    /// Total time horizon of the formula: the latest time (relative to the
    /// evaluation instant) any predicate value can influence satisfaction.
    pub fn horizon(&self) -> f64 {
        match self {
            Formula::Predicate { .. } => 0.0,
            Formula::And(cs) | Formula::Or(cs) => {
                cs.iter().map(Formula::horizon).fold(0.0, f64::max)
            }
            Formula::Always { t_hi, child, .. } | Formula::Eventually { t_hi, child, .. } => {
                t_hi + child.horizon()
            }
            Formula::Until {
                t_hi, left, right, ..
            } => t_hi + left.horizon().max(right.horizon()),
            // Normalized until conjuncts: τ can stretch to the slot's upper
            // bound, which equals the original t_hi − t_lo; conservatively the
            // caller should prefer the raw formula's horizon. Without the slot
            // table we bound by t_lo + child horizon (the slot bound is added
            // by `NormalizedFormula::horizon`).
            Formula::UntilLeft { t_lo, child, .. } | Formula::UntilRight { t_lo, child, .. } => {
                t_lo + child.horizon()
            }
        }
    }
}

/// A predicate declaration table keyed by label.
pub type PredicateMap = BTreeMap<String, BandPredicate>;

/// Domain of one shared until slot: `τ ∈ [0, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UntilSlot {
    /// Upper bound `t_hi − t_lo` of the originating until interval.
    pub hi: f64,
}

/// Result of [`normalize_until`]: the rewritten tree plus the table of shared
/// slots (indexed by [`UntilSlotId`]) recorded for the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFormula {
    pub root: Formula,
    pub until_slots: Vec<UntilSlot>,
}

impl NormalizedFormula {
    /// Worst-case total horizon, accounting for until slots at their upper
    /// bounds.
    pub fn horizon(&self) -> f64 {
        fn go(f: &Formula, slots: &[UntilSlot]) -> f64 {
            match f {
                Formula::Predicate { .. } => 0.0,
                Formula::And(cs) | Formula::Or(cs) => {
                    cs.iter().map(|c| go(c, slots)).fold(0.0, f64::max)
                }
                Formula::Always { t_hi, child, .. } | Formula::Eventually { t_hi, child, .. } => {
                    t_hi + go(child, slots)
                }
                Formula::Until {
                    t_hi, left, right, ..
                } => t_hi + go(left, slots).max(go(right, slots)),
                Formula::UntilLeft { t_lo, slot, child } | Formula::UntilRight { t_lo, slot, child } => {
                    t_lo + slots[*slot].hi + go(child, slots)
                }
            }
        }
        go(&self.root, &self.until_slots)
    }
}

/// Rewrite every `Until(t_lo, t_hi, L, R)` into
/// `And(UntilLeft(t_lo, τ, L), UntilRight(t_lo, τ, R))` with one fresh shared
/// slot `τ ∈ [0, t_hi − t_lo]` per until node. Idempotent: a tree without raw
/// untils is returned unchanged (and its existing slot table preserved when
/// re-normalizing a [`NormalizedFormula`] root).
pub fn normalize_until(f: &Formula) -> NormalizedFormula {
    let mut slots = Vec::new();
    let root = rewrite(f, &mut slots);
    NormalizedFormula {
        root,
        until_slots: slots,
    }
}

fn rewrite(f: &Formula, slots: &mut Vec<UntilSlot>) -> Formula {
    match f {
        Formula::Predicate { .. } => f.clone(),
        Formula::And(cs) => Formula::And(cs.iter().map(|c| rewrite(c, slots)).collect()),
        Formula::Or(cs) => Formula::Or(cs.iter().map(|c| rewrite(c, slots)).collect()),
        Formula::Always { t_lo, t_hi, child } => Formula::Always {
            t_lo: *t_lo,
            t_hi: *t_hi,
            child: Box::new(rewrite(child, slots)),
        },
        Formula::Eventually { t_lo, t_hi, child } => Formula::Eventually {
            t_lo: *t_lo,
            t_hi: *t_hi,
            child: Box::new(rewrite(child, slots)),
        },
        Formula::Until {
            t_lo,
            t_hi,
            left,
            right,
        } => {
            let slot = slots.len();
            slots.push(UntilSlot { hi: t_hi - t_lo });
            Formula::And(vec![
                Formula::UntilLeft {
                    t_lo: *t_lo,
                    slot,
                    child: Box::new(rewrite(left, slots)),
                },
                Formula::UntilRight {
                    t_lo: *t_lo,
                    slot,
                    child: Box::new(rewrite(right, slots)),
                },
            ])
        }
        Formula::UntilLeft { t_lo, slot, child } => Formula::UntilLeft {
            t_lo: *t_lo,
            slot: *slot,
            child: Box::new(rewrite(child, slots)),
        },
        Formula::UntilRight { t_lo, slot, child } => Formula::UntilRight {
            t_lo: *t_lo,
            slot: *slot,
            child: Box::new(rewrite(child, slots)),
        },
    }
}

// Pre-existing normalized nodes keep their slot ids; re-normalizing is the
// identity on them, so `normalize_until` is idempotent provided slot ids in
// the input are already dense. The public entry point is always called on
// parser output (no normalized nodes), or on its own output (no raw untils).

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

impl Formula {
    // Precedence levels: 0 = or, 1 = and, 2 = until, 3 = unary/primary.
    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, prec: u8) -> fmt::Result {
        match self {
            Formula::Predicate { label, negated } => {
                if *negated {
                    write!(f, "!{label}")
                } else {
                    write!(f, "{label}")
                }
            }
            Formula::Or(cs) => {
                if prec > 0 {
                    write!(f, "(")?;
                }
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        write!(f, " | ")?;
                    }
                    c.fmt_prec(f, 1)?;
                }
                if prec > 0 {
                    write!(f, ")")?;
                }
                Ok(())
            }
            Formula::And(cs) => {
                if prec > 1 {
                    write!(f, "(")?;
                }
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        write!(f, " & ")?;
                    }
                    c.fmt_prec(f, 2)?;
                }
                if prec > 1 {
                    write!(f, ")")?;
                }
                Ok(())
            }
            Formula::Until {
                t_lo,
                t_hi,
                left,
                right,
            } => {
                if prec > 2 {
                    write!(f, "(")?;
                }
                left.fmt_prec(f, 3)?;
                write!(f, " U[{},{}] ", fmt_num(*t_lo), fmt_num(*t_hi))?;
                right.fmt_prec(f, 2)?;
                if prec > 2 {
                    write!(f, ")")?;
                }
                Ok(())
            }
            Formula::Always { t_lo, t_hi, child } => {
                write!(f, "G[{},{}](", fmt_num(*t_lo), fmt_num(*t_hi))?;
                child.fmt_prec(f, 0)?;
                write!(f, ")")
            }
            Formula::Eventually { t_lo, t_hi, child } => {
                write!(f, "F[{},{}](", fmt_num(*t_lo), fmt_num(*t_hi))?;
                child.fmt_prec(f, 0)?;
                write!(f, ")")
            }
            Formula::UntilLeft { t_lo, slot, child } => {
                write!(f, "Gshared[0,{}+tau{}](", fmt_num(*t_lo), slot)?;
                child.fmt_prec(f, 0)?;
                write!(f, ")")
            }
            Formula::UntilRight { t_lo, slot, child } => {
                write!(f, "Fshared[{0}+tau{1},{0}+tau{1}](", fmt_num(*t_lo), slot)?;
                child.fmt_prec(f, 0)?;
                write!(f, ")")
            }
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Parse formula text against a predicate declaration table.
pub fn parse_formula(text: &str, predicates: &PredicateMap) -> Result<Formula> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        predicates,
    };
    p.skip_ws();
    let f = p.parse_or()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(f)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    predicates: &'a PredicateMap,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Syntax {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, b: u8) -> Result<()> {
        if self.eat(b) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{}`", b as char)))
        }
    }

    fn parse_or(&mut self) -> Result<Formula> {
        let first = self.parse_and()?;
        let mut children = vec![first];
        loop {
            self.skip_ws();
            if self.eat(b'|') {
                self.skip_ws();
                let next = self.parse_and()?;
                // Flatten nested disjunctions into one n-ary node.
                if let Formula::Or(cs) = next {
                    children.extend(cs);
                } else {
                    children.push(next);
                }
            } else {
                break;
            }
        }
        Ok(if children.len() == 1 {
            children.pop().unwrap()
        } else {
            Formula::Or(children)
        })
    }

    fn parse_and(&mut self) -> Result<Formula> {
        let first = self.parse_until()?;
        let mut children = vec![first];
        loop {
            self.skip_ws();
            if self.eat(b'&') {
                self.skip_ws();
                let next = self.parse_until()?;
                if let Formula::And(cs) = next {
                    children.extend(cs);
                } else {
                    children.push(next);
                }
            } else {
                break;
            }
        }
        Ok(if children.len() == 1 {
            children.pop().unwrap()
        } else {
            Formula::And(children)
        })
    }

    fn parse_until(&mut self) -> Result<Formula> {
        let left = self.parse_unary()?;
        self.skip_ws();
        if self.peek() == Some(b'U') && !self.is_label_continuation(1) {
            self.pos += 1;
            let (t_lo, t_hi) = self.parse_interval()?;
            self.skip_ws();
            // Right-associative: `a U b U c` = `a U (b U c)`.
            let right = self.parse_until()?;
            Ok(Formula::Until {
                t_lo,
                t_hi,
                left: Box::new(left),
                right: Box::new(right),
            })
        } else {
            Ok(left)
        }
    }

    /// True if the byte at `self.pos + offset` would extend an identifier, so
    /// `G`, `F`, `U` followed by label characters are treated as labels.
    fn is_label_continuation(&self, offset: usize) -> bool {
        matches!(
            self.src.get(self.pos + offset),
            Some(b) if b.is_ascii_alphanumeric() || *b == b'_'
        )
    }

    fn parse_unary(&mut self) -> Result<Formula> {
        self.skip_ws();
        match self.peek() {
            Some(b'!') => {
                let neg_pos = self.pos;
                self.pos += 1;
                self.skip_ws();
                if matches!(self.peek(), Some(b'G') | Some(b'F'))
                    && !self.is_label_continuation(1)
                {
                    return Err(Error::NegatedNonPredicate { pos: neg_pos });
                }
                let inner = self.parse_primary()?;
                match inner {
                    Formula::Predicate { label, negated } => Ok(Formula::Predicate {
                        label,
                        negated: !negated,
                    }),
                    _ => Err(Error::NegatedNonPredicate { pos: neg_pos }),
                }
            }
            Some(b'G') if !self.is_label_continuation(1) => {
                self.pos += 1;
                let (t_lo, t_hi) = self.parse_interval()?;
                // The child binds tightly: a parenthesized formula, another
                // unary operator, or a bare predicate.
                let child = self.parse_unary()?;
                Ok(Formula::Always {
                    t_lo,
                    t_hi,
                    child: Box::new(child),
                })
            }
            Some(b'F') if !self.is_label_continuation(1) => {
                self.pos += 1;
                let (t_lo, t_hi) = self.parse_interval()?;
                let child = self.parse_unary()?;
                Ok(Formula::Eventually {
                    t_lo,
                    t_hi,
                    child: Box::new(child),
                })
            }
            _ => self.parse_primary(),
        }
    }

    fn parse_primary(&mut self) -> Result<Formula> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let f = self.parse_or()?;
                self.skip_ws();
                self.expect(b')')?;
                Ok(f)
            }
            Some(b) if b.is_ascii_alphabetic() || b == b'_' => {
                let start = self.pos;
                while self
                    .peek()
                    .map(|b| b.is_ascii_alphanumeric() || b == b'_')
                    .unwrap_or(false)
                {
                    self.pos += 1;
                }
                let label = std::str::from_utf8(&self.src[start..self.pos])
                    .expect("ascii range")
                    .to_string();
                if !self.predicates.contains_key(&label) {
                    return Err(Error::UnknownPredicate(label));
                }
                Ok(Formula::Predicate {
                    label,
                    negated: false,
                })
            }
            _ => Err(self.err("expected predicate, `(`, `!`, `G[..]`, or `F[..]`")),
        }
    }

    fn parse_interval(&mut self) -> Result<(f64, f64)> {
        self.skip_ws();
        self.expect(b'[')?;
        let lo = self.parse_number()?;
        self.skip_ws();
        self.expect(b',')?;
        let hi = self.parse_number()?;
        self.skip_ws();
        self.expect(b']')?;
        if !(0.0 <= lo && lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidInterval { lo, hi });
        }
        Ok((lo, hi))
    }

    fn parse_number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        if self.peek() == Some(b'-') {
            self.pos += 1;
        }
        while self
            .peek()
            .map(|b| b.is_ascii_digit() || b == b'.' || b == b'e' || b == b'E' || b == b'+')
            .unwrap_or(false)
        {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii range");
        text.parse::<f64>()
            .map_err(|_| self.err(format!("invalid number `{text}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(labels: &[&str]) -> PredicateMap {
        labels
            .iter()
            .map(|l| {
                (
                    l.to_string(),
                    BandPredicate::new(*l, 10.0, 0.25, 1.0).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn eval_predicate_values() {
        let h1 = BandPredicate::new("p1", 10.0, 0.25, 1.0).unwrap();
        assert_eq!(eval_predicate(&h1, 1.0), 0.625);
        assert_eq!(eval_predicate(&h1, 1.25), 0.0);
        assert_eq!(eval_predicate(&h1, 0.0), -9.375);
    }

    #[test]
    fn predicate_band_membership() {
        let h1 = BandPredicate::new("p1", 10.0, 0.25, 1.0).unwrap();
        for x in [0.76, 1.0, 1.24] {
            assert!(h1.eval(x) > 0.0);
        }
        for x in [0.74, 1.26, -3.0] {
            assert!(h1.eval(x) < 0.0);
        }
    }

    #[test]
    fn invalid_predicate_rejected() {
        assert!(BandPredicate::new("p", -1.0, 0.25, 0.0).is_err());
        assert!(BandPredicate::new("p", 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn parse_flagship_formula() {
        let m = preds(&["p1", "p2"]);
        let f = parse_formula("G[0,25](F[3,4](p1 U[1,2] (F[1,2](p2))))", &m).unwrap();
        match &f {
            Formula::Always { t_lo, t_hi, child } => {
                assert_eq!((*t_lo, *t_hi), (0.0, 25.0));
                match child.as_ref() {
                    Formula::Eventually { t_lo, t_hi, child } => {
                        assert_eq!((*t_lo, *t_hi), (3.0, 4.0));
                        match child.as_ref() {
                            Formula::Until {
                                t_lo,
                                t_hi,
                                left,
                                right,
                            } => {
                                assert_eq!((*t_lo, *t_hi), (1.0, 2.0));
                                assert!(matches!(left.as_ref(), Formula::Predicate { label, .. } if label == "p1"));
                                assert!(matches!(right.as_ref(), Formula::Eventually { .. }));
                            }
                            other => panic!("expected until, got {other:?}"),
                        }
                    }
                    other => panic!("expected eventually, got {other:?}"),
                }
            }
            other => panic!("expected always, got {other:?}"),
        }
    }

    #[test]
    fn parse_single_leaf() {
        let m = preds(&["p1"]);
        let f = parse_formula("p1", &m).unwrap();
        assert!(matches!(f, Formula::Predicate { ref label, negated: false } if label == "p1"));
    }

    #[test]
    fn parse_disjunction_with_until_precedence() {
        let m = preds(&["p1", "p2", "p3"]);
        let f = parse_formula("F[0,15](G[2,10](p1) | p2 U[5,10] p3)", &m).unwrap();
        match &f {
            Formula::Eventually { t_lo, t_hi, child } => {
                assert_eq!((*t_lo, *t_hi), (0.0, 15.0));
                match child.as_ref() {
                    Formula::Or(cs) => {
                        assert_eq!(cs.len(), 2);
                        assert!(matches!(cs[0], Formula::Always { .. }));
                        assert!(matches!(cs[1], Formula::Until { .. }));
                    }
                    other => panic!("expected or, got {other:?}"),
                }
            }
            other => panic!("expected eventually, got {other:?}"),
        }
    }

    #[test]
    fn until_binds_tighter_than_and_and_or() {
        let m = preds(&["p1", "p2", "p3", "p4"]);
        let f = parse_formula("p1 U[0,1] p2 & p3 | p4", &m).unwrap();
        // ((p1 U p2) & p3) | p4
        match &f {
            Formula::Or(cs) => {
                assert_eq!(cs.len(), 2);
                match &cs[0] {
                    Formula::And(inner) => {
                        assert!(matches!(inner[0], Formula::Until { .. }));
                        assert!(matches!(inner[1], Formula::Predicate { .. }));
                    }
                    other => panic!("expected and, got {other:?}"),
                }
            }
            other => panic!("expected or, got {other:?}"),
        }
    }

    #[test]
    fn nary_flattening() {
        let m = preds(&["p1", "p2", "p3"]);
        let f = parse_formula("p1 & p2 & p3", &m).unwrap();
        assert!(matches!(&f, Formula::And(cs) if cs.len() == 3));
        let f = parse_formula("p1 | (p2 | p3)", &m).unwrap();
        assert!(matches!(&f, Formula::Or(cs) if cs.len() == 3));
    }

    #[test]
    fn negation_only_on_predicates() {
        let m = preds(&["p1"]);
        let f = parse_formula("!p1", &m).unwrap();
        assert!(matches!(f, Formula::Predicate { negated: true, .. }));
        assert!(matches!(
            parse_formula("!G[0,1](p1)", &m),
            Err(Error::Syntax { .. }) | Err(Error::NegatedNonPredicate { .. })
        ));
        assert!(matches!(
            parse_formula("!(p1 & p1)", &m),
            Err(Error::NegatedNonPredicate { .. })
        ));
    }

    #[test]
    fn parse_errors() {
        let m = preds(&["p1"]);
        assert!(matches!(
            parse_formula("qq", &m),
            Err(Error::UnknownPredicate(_))
        ));
        assert!(matches!(
            parse_formula("G[3,1](p1)", &m),
            Err(Error::InvalidInterval { .. })
        ));
        assert!(matches!(
            parse_formula("G[-1,1](p1)", &m),
            Err(Error::InvalidInterval { .. })
        ));
        assert!(parse_formula("G[0,1](p1", &m).is_err());
        assert!(parse_formula("p1 &", &m).is_err());
    }

    #[test]
    fn normalize_until_basic() {
        let m = preds(&["p1", "p2"]);
        let f = parse_formula("p1 U[1,2] p2", &m).unwrap();
        let n = normalize_until(&f);
        assert_eq!(n.until_slots.len(), 1);
        assert_eq!(n.until_slots[0].hi, 1.0);
        match &n.root {
            Formula::And(cs) => {
                assert_eq!(cs.len(), 2);
                match (&cs[0], &cs[1]) {
                    (
                        Formula::UntilLeft {
                            t_lo: a, slot: s1, ..
                        },
                        Formula::UntilRight {
                            t_lo: b, slot: s2, ..
                        },
                    ) => {
                        assert_eq!((*a, *b), (1.0, 1.0));
                        assert_eq!(s1, s2);
                    }
                    other => panic!("unexpected children {other:?}"),
                }
            }
            other => panic!("expected and, got {other:?}"),
        }
    }

    #[test]
    fn normalize_until_identity_without_until() {
        let m = preds(&["p1"]);
        let f = parse_formula("G[0,5](p1)", &m).unwrap();
        let n = normalize_until(&f);
        assert_eq!(n.root, f);
        assert!(n.until_slots.is_empty());
    }

    #[test]
    fn normalize_until_idempotent() {
        let m = preds(&["p1", "p2", "p3"]);
        let f = parse_formula("F[0,15](G[2,10](p1) | p2 U[5,10] p3)", &m).unwrap();
        let n1 = normalize_until(&f);
        let n2 = normalize_until(&n1.root);
        assert_eq!(n1.root, n2.root);
        assert_eq!(n1.until_slots[0].hi, 5.0);
    }

    #[test]
    fn print_parse_round_trip() {
        let m = preds(&["p1", "p2", "p3", "p4"]);
        for s in [
            "G[0,25](F[3,4](p1 U[1,2] (F[1,2](p2))))",
            "F[0,15](G[2,10](p1) | p2 U[5,10] p3)",
            "p1 & p2 & !p3 | p4",
            "p1 U[0.5,2.5] (p2 & p3)",
            "G[0,100](F[1,3](p1 & F[10,30](G[0,1](p2))))",
        ] {
            let f1 = parse_formula(s, &m).unwrap();
            let printed = f1.to_string();
            let f2 = parse_formula(&printed, &m).unwrap();
            assert_eq!(f1, f2, "round trip failed for `{s}` → `{printed}`");
        }
    }

    #[test]
    fn horizon_computation() {
        let m = preds(&["p1", "p2"]);
        let f = parse_formula("G[0,25](F[3,4](p1 U[1,2] (F[1,2](p2))))", &m).unwrap();
        // 25 + 4 + (2 + max(0, 2)) = 33
        assert_eq!(f.horizon(), 33.0);
        let n = normalize_until(&f);
        assert_eq!(n.horizon(), 33.0);
    }
}
