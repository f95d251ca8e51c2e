//! PCTL formulas and the reduction of bounded-until checking to
//! finite-horizon dynamic programming.
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! spec  := 'P' cmp prob '[' path ']'
//! cmp   := '<=' | '<' | '>=' | '>'
//! path  := 'X' phi | phi 'U' ('<=' k)? phi
//! phi   := unary ('&' unary)*
//! unary := '!' unary | '(' phi ')' | 'true' | '"' name '"'
//! ```
//!
//! Only bounded until can be checked. `X` and unbounded `U` are accepted by
//! the parser and rejected by [`check`].

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Belief, VarPomdpModel};
use crate::planner::{self, AlphaVectorSet, BeliefSet, PlannerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Comparator {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
}

impl Comparator {
    pub fn holds(self, value: f64, bound: f64) -> bool {
        match self {
            Self::Le => value <= bound,
            Self::Lt => value < bound,
            Self::Ge => value >= bound,
            Self::Gt => value > bound,
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Le => "<=",
            Self::Lt => "<",
            Self::Ge => ">=",
            Self::Gt => ">",
        })
    }
}

/// Propositional state formula.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StateFormula {
    True,
    Ap(String),
    Not(Box<StateFormula>),
    And(Box<StateFormula>, Box<StateFormula>),
}

impl StateFormula {
    pub fn holds(&self, labels: &BTreeSet<String>) -> bool {
        match self {
            Self::True => true,
            Self::Ap(name) => labels.contains(name),
            Self::Not(f) => !f.holds(labels),
            Self::And(a, b) => a.holds(labels) && b.holds(labels),
        }
    }
}

impl fmt::Display for StateFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::True => f.write_str("true"),
            Self::Ap(name) => write!(f, "\"{name}\""),
            Self::Not(inner) => write!(f, "!{inner}"),
            Self::And(a, b) => write!(f, "({a} & {b})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathFormula {
    Next(StateFormula),
    Until(StateFormula, StateFormula),
    BoundedUntil(StateFormula, StateFormula, usize),
}

/// `P ⋈ p [ψ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PctlSpec {
    pub comparator: Comparator,
    pub bound: f64,
    pub path: PathFormula,
}

impl PctlSpec {
    /// `(phi1, phi2, k)` for bounded until, otherwise an unsupported-operator error.
    pub fn bounded_until(&self) -> Result<(&StateFormula, &StateFormula, usize)> {
        match &self.path {
            PathFormula::BoundedUntil(a, b, k) => Ok((a, b, *k)),
            PathFormula::Until(..) => Err(Error::UnsupportedForChecking(
                "unbounded until (U without <=k)".into(),
            )),
            PathFormula::Next(_) => Err(Error::UnsupportedForChecking("next (X)".into())),
        }
    }
}

impl fmt::Display for PctlSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}{} [ ", self.comparator, self.bound)?;
        match &self.path {
            PathFormula::Next(phi) => write!(f, "X {phi}")?,
            PathFormula::Until(a, b) => write!(f, "{a} U {b}")?,
            PathFormula::BoundedUntil(a, b, k) => write!(f, "{a} U<={k} {b}")?,
        }
        f.write_str(" ]")
    }
}

impl std::str::FromStr for PctlSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_spec(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    P,
    Cmp(Comparator),
    Num(String),
    LBracket,
    RBracket,
    LParen,
    RParen,
    Not,
    And,
    True,
    X,
    U,
    Ap(String),
    Minus,
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |position: usize, message: String| Error::Parse { position, message };
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '[' => out.push((start, Tok::LBracket)),
            ']' => out.push((start, Tok::RBracket)),
            '(' => out.push((start, Tok::LParen)),
            ')' => out.push((start, Tok::RParen)),
            '!' => out.push((start, Tok::Not)),
            '&' => out.push((start, Tok::And)),
            '-' => out.push((start, Tok::Minus)),
            '<' | '>' => {
                let eq = chars.get(i + 1) == Some(&'=');
                let cmp = match (c, eq) {
                    ('<', true) => Comparator::Le,
                    ('<', false) => Comparator::Lt,
                    ('>', true) => Comparator::Ge,
                    _ => Comparator::Gt,
                };
                if eq {
                    i += 1;
                }
                out.push((start, Tok::Cmp(cmp)));
            }
            '"' => {
                let close = chars[i + 1..]
                    .iter()
                    .position(|&ch| ch == '"')
                    .ok_or_else(|| err(start, "unterminated atomic proposition".into()))?;
                let name: String = chars[i + 1..i + 1 + close].iter().collect();
                if name.is_empty() {
                    return Err(err(start, "empty atomic proposition".into()));
                }
                out.push((start, Tok::Ap(name)));
                i += close + 1;
            }
            c if c.is_ascii_digit() || c == '.' => {
                while i + 1 < chars.len()
                    && (chars[i + 1].is_ascii_digit()
                        || chars[i + 1] == '.'
                        || chars[i + 1] == 'e'
                        || chars[i + 1] == 'E'
                        || ((chars[i + 1] == '-' || chars[i + 1] == '+')
                            && matches!(chars[i], 'e' | 'E')))
                {
                    i += 1;
                }
                out.push((start, Tok::Num(chars[start..=i].iter().collect())));
            }
            c if c.is_ascii_alphabetic() => {
                while i + 1 < chars.len() && chars[i + 1].is_ascii_alphanumeric() {
                    i += 1;
                }
                let word: String = chars[start..=i].iter().collect();
                let tok = match word.as_str() {
                    "P" => Tok::P,
                    "X" => Tok::X,
                    "U" => Tok::U,
                    "true" => Tok::True,
                    _ => {
                        return Err(err(
                            start,
                            format!("unexpected word `{word}` (atomic propositions are quoted)"),
                        ))
                    }
                };
                out.push((start, tok));
            }
            other => return Err(err(start, format!("unexpected character `{other}`"))),
        }
        i += 1;
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            position: self.offset(),
            message: message.into(),
        })
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<()> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            self.fail(format!("expected {what}"))
        }
    }

    fn spec(&mut self) -> Result<PctlSpec> {
        self.expect(Tok::P, "`P`")?;
        let comparator = match self.peek() {
            Some(Tok::Cmp(c)) => *c,
            _ => return self.fail("expected a comparator (<=, <, >=, >)"),
        };
        self.pos += 1;
        let bound_at = self.offset();
        let bound = match self.next() {
            Some(Tok::Num(n)) => n.parse::<f64>().map_err(|_| Error::Parse {
                position: bound_at,
                message: format!("`{n}` is not a probability"),
            })?,
            Some(Tok::Minus) => {
                return Err(Error::Parse {
                    position: bound_at,
                    message: "probability bound must lie in [0, 1]".into(),
                })
            }
            _ => {
                return Err(Error::Parse {
                    position: bound_at,
                    message: "expected a probability bound".into(),
                })
            }
        };
        if !(0.0..=1.0).contains(&bound) {
            return Err(Error::Parse {
                position: bound_at,
                message: format!("probability bound {bound} must lie in [0, 1]"),
            });
        }
        self.expect(Tok::LBracket, "`[`")?;
        let path = self.path()?;
        self.expect(Tok::RBracket, "`]`")?;
        if self.pos < self.toks.len() {
            return self.fail("trailing input after `]`");
        }
        Ok(PctlSpec {
            comparator,
            bound,
            path,
        })
    }

    fn path(&mut self) -> Result<PathFormula> {
        if self.peek() == Some(&Tok::X) {
            self.pos += 1;
            return Ok(PathFormula::Next(self.phi()?));
        }
        let lhs = self.phi()?;
        self.expect(Tok::U, "`U`")?;
        if self.peek() == Some(&Tok::Cmp(Comparator::Le)) {
            self.pos += 1;
            let at = self.offset();
            let k = match self.next() {
                Some(Tok::Num(n)) => n.parse::<usize>().map_err(|_| Error::Parse {
                    position: at,
                    message: format!("step bound `{n}` is not a non-negative integer"),
                })?,
                Some(Tok::Minus) => {
                    return Err(Error::Parse {
                        position: at,
                        message: "step bound must be non-negative".into(),
                    })
                }
                _ => {
                    return Err(Error::Parse {
                        position: at,
                        message: "expected a step bound after `U<=`".into(),
                    })
                }
            };
            let rhs = self.phi()?;
            Ok(PathFormula::BoundedUntil(lhs, rhs, k))
        } else if matches!(self.peek(), Some(Tok::Cmp(_))) {
            self.fail("until bounds must use `<=`")
        } else {
            let rhs = self.phi()?;
            Ok(PathFormula::Until(lhs, rhs))
        }
    }

    fn phi(&mut self) -> Result<StateFormula> {
        let mut lhs = self.unary()?;
        while self.peek() == Some(&Tok::And) {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = StateFormula::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<StateFormula> {
        match self.peek() {
            Some(Tok::Not) => {
                self.pos += 1;
                Ok(StateFormula::Not(Box::new(self.unary()?)))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let inner = self.phi()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Some(Tok::True) => {
                self.pos += 1;
                Ok(StateFormula::True)
            }
            Some(Tok::Ap(_)) => match self.next() {
                Some(Tok::Ap(name)) => Ok(StateFormula::Ap(name)),
                _ => unreachable!(),
            },
            Some(Tok::P) => self.fail("nested probabilistic operators are not supported"),
            _ => self.fail("expected a state formula"),
        }
    }
}

/// Parses a PCTL probabilistic formula.
pub fn parse_spec(text: &str) -> Result<PctlSpec> {
    let toks = lex(text)?;
    Parser {
        toks,
        pos: 0,
        end: text.chars().count(),
    }
    .spec()
}

/// `S^yes = Sat(φ2)`, `S^no = S \ (Sat(φ1) ∪ Sat(φ2))`, `S^? = rest`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatePartition {
    pub s_yes: BTreeSet<usize>,
    pub s_no: BTreeSet<usize>,
    pub s_q: BTreeSet<usize>,
    /// 1 on `s_yes`, 0 elsewhere.
    pub p0: Vec<f64>,
}

pub fn partition_states(model: &VarPomdpModel, spec: &PctlSpec) -> Result<StatePartition> {
    let (phi1, phi2, _) = spec.bounded_until()?;
    let mut part = StatePartition {
        s_yes: BTreeSet::new(),
        s_no: BTreeSet::new(),
        s_q: BTreeSet::new(),
        p0: vec![0.0; model.num_states],
    };
    for s in 0..model.num_states {
        let labels = model.labels.get(s).cloned().unwrap_or_default();
        if phi2.holds(&labels) {
            part.s_yes.insert(s);
            part.p0[s] = 1.0;
        } else if phi1.holds(&labels) {
            part.s_q.insert(s);
        } else {
            part.s_no.insert(s);
        }
    }
    Ok(part)
}

/// Makes every `S^yes` and `S^no` state absorbing under every action.
pub fn transform_model(model: &VarPomdpModel, partition: &StatePartition) -> VarPomdpModel {
    let mut out = model.clone();
    for slice in out.transitions.iter_mut() {
        for &s in partition.s_yes.iter().chain(&partition.s_no) {
            slice[s] = (0..model.num_states)
                .map(|j| if j == s { 1.0 } else { 0.0 })
                .collect();
        }
    }
    out
}

/// Outcome of [`check`].
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub p_max: f64,
    pub satisfied: bool,
    pub horizon: usize,
    /// Chosen action at the initial belief.
    pub action: usize,
    pub partition: StatePartition,
    /// Alpha sets for steps `0..=horizon`.
    pub alphas: Vec<AlphaVectorSet>,
}

/// Checks `P ⋈ p [φ1 U<=k φ2]` from belief `b0` under maximizing semantics:
/// the result reports whether `p_max ⋈ p`, where `p_max` is the best
/// reach probability any policy achieves.
pub fn check(
    model: &VarPomdpModel,
    b0: &Belief,
    spec: &PctlSpec,
    belief_set: &BeliefSet,
    config: &PlannerConfig,
) -> Result<CheckResult> {
    model.ensure_valid()?;
    if b0.len() != model.num_states {
        return Err(Error::Dimension(format!(
            "initial belief has {} entries for {} states",
            b0.len(),
            model.num_states
        )));
    }
    let (_, _, horizon) = spec.bounded_until()?;
    let partition = partition_states(model, spec)?;
    let absorbing = transform_model(model, &partition);
    let alphas = planner::pbvi(&absorbing, &partition.p0, horizon, belief_set, config)?;
    let last = alphas.last().expect("pbvi returns horizon + 1 sets");
    let p_max = planner::value_at(last, b0)?.clamp(0.0, 1.0);
    let action = planner::extract_action(last, b0)?;
    Ok(CheckResult {
        p_max,
        satisfied: spec.comparator.holds(p_max, spec.bound),
        horizon,
        action,
        partition,
        alphas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::scalar_model;

    fn ap(s: &str) -> StateFormula {
        StateFormula::Ap(s.into())
    }

    #[test]
    fn parses_fail_spec() {
        let s = parse_spec(r#"P<=0.5 [ true U<=4 "Fail" ]"#).unwrap();
        assert_eq!(s.comparator, Comparator::Le);
        assert_eq!(s.bound, 0.5);
        assert_eq!(
            s.path,
            PathFormula::BoundedUntil(StateFormula::True, ap("Fail"), 4)
        );
        let compact = parse_spec(r#"P<=0.5[true U<=4"Fail"]"#).unwrap();
        assert_eq!(compact, s);
    }

    #[test]
    fn parses_negation_and_conjunction() {
        let s = parse_spec(r#"P>=0.9 [ !"danger" U<=10 "goal" ]"#).unwrap();
        assert_eq!(s.comparator, Comparator::Ge);
        assert_eq!(
            s.path,
            PathFormula::BoundedUntil(StateFormula::Not(Box::new(ap("danger"))), ap("goal"), 10)
        );
        let s = parse_spec(r#"P>0.1 [ ("a" & !("b")) U "c" ]"#).unwrap();
        assert!(matches!(s.path, PathFormula::Until(StateFormula::And(..), _)));
        let s = parse_spec(r#"P<0.2 [ X "c" ]"#).unwrap();
        assert_eq!(s.path, PathFormula::Next(ap("c")));
    }

    #[test]
    fn rejects_bad_specs() {
        for bad in [
            r#"P<=1.5 [ true U<=4 "Fail" ]"#,
            r#"P<=-0.1 [ true U<=4 "Fail" ]"#,
            r#"P<=0.5 [ true U<=-1 "Fail" ]"#,
            r#"P<=0.5 [ true U<=4 Fail ]"#,
            r#"P<=0.5 [ true U<=4 "Fail" "#,
            r#"P<=0.5 [ P>=0.1 [ X true ] U<=2 true ]"#,
            r#"P<=0.5 [ true U<=4 "Fail" ] extra"#,
            r#"P<=0.5 [ true U<4 "Fail" ]"#,
        ] {
            assert!(
                matches!(parse_spec(bad), Err(Error::Parse { .. })),
                "accepted {bad}"
            );
        }
        match parse_spec(r#"P<=0.5 [ true U<=4 Fail ]"#) {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 19),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn display_roundtrips() {
        let s = parse_spec(r#"P>=0.9 [ (!"danger" & "x") U<=10 "goal" ]"#).unwrap();
        assert_eq!(parse_spec(&s.to_string()).unwrap(), s);
    }

    fn labelled(labels: &[&[&str]]) -> VarPomdpModel {
        let mut m = scalar_model(&vec![1.0; labels.len()], &vec![0.0; labels.len()], 0);
        m.labels = labels
            .iter()
            .map(|l| l.iter().map(|s| s.to_string()).collect())
            .collect();
        m
    }

    #[test]
    fn partitions() {
        let m = labelled(&[&["safe"], &[], &["Fail"]]);
        let p = partition_states(&m, &parse_spec(r#"P<=0.5 [ true U<=4 "Fail" ]"#).unwrap())
            .unwrap();
        assert_eq!(p.s_yes, BTreeSet::from([2]));
        assert!(p.s_no.is_empty());
        assert_eq!(p.s_q, BTreeSet::from([0, 1]));
        assert_eq!(p.p0, vec![0.0, 0.0, 1.0]);

        let p = partition_states(&m, &parse_spec("P<=0.5 [ true U<=4 true ]").unwrap()).unwrap();
        assert_eq!(p.s_yes.len(), 3);

        let p = partition_states(&m, &parse_spec(r#"P<=0.5 [ !true U<=4 "nope" ]"#).unwrap())
            .unwrap();
        assert!(p.s_yes.is_empty());
        assert_eq!(p.s_no.len(), 3);

        let unbounded = parse_spec(r#"P<=0.5 [ true U "Fail" ]"#).unwrap();
        assert!(matches!(
            partition_states(&m, &unbounded),
            Err(Error::UnsupportedForChecking(_))
        ));
    }

    #[test]
    fn absorbing_transform() {
        let mut m = labelled(&[&[], &["bad"]]);
        m.transitions[0] = vec![vec![0.4, 0.6], vec![0.3, 0.7]];
        let spec = parse_spec(r#"P<=0.5 [ !"bad" U<=3 "goal" ]"#).unwrap();
        let p = partition_states(&m, &spec).unwrap();
        assert_eq!(p.s_no, BTreeSet::from([1]));
        let t = transform_model(&m, &p);
        assert_eq!(t.transitions[0][1], vec![0.0, 1.0]);
        assert_eq!(t.transitions[0][0], vec![0.4, 0.6]);
        assert_eq!(transform_model(&t, &p), t);
        assert_eq!(m.transitions[0][1], vec![0.3, 0.7]);
    }
}
