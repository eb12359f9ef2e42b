//! Rule language for chains on the nonnegative integers, truncation to a
//! finite window and the Lyapunov workflow on top of it.
//!
//! A rule file holds one transition rule per line, `to = <expr> ; p = <expr>`,
//! an optional weight line `V = <expr>`, and `#` comments. Expressions are
//! built from the state `x`, decimal literals, `+ - * /`, parentheses and the
//! two-argument functions `min`, `max`, `pow`.

use std::fmt;

use serde::Serialize;

mod lyapunov;
mod parse;
mod truncation;

pub use lyapunov::{lyapunov_check, qsd_stability, LyapunovReport, PairComparison, StabilityReport, TruncationSummary};
pub use parse::{parse_expr, parse_rules, ParseError};
pub use truncation::{build_truncation, TruncatedChain, TruncationError};

/// Byte offsets into the source line, 0-based, end exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Func {
    Min,
    Max,
    Pow,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Min => "min",
            Func::Max => "max",
            Func::Pow => "pow",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        match s {
            "min" => Some(Func::Min),
            "max" => Some(Func::Max),
            "pow" => Some(Func::Pow),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum ExprKind {
    Num(f64),
    Var,
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>, Box<Expr>),
}

/// Expression node. Equality is structural and ignores spans.
#[derive(Debug, Clone)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: Span,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        match (&self.kind, &other.kind) {
            (ExprKind::Num(a), ExprKind::Num(b)) => a.to_bits() == b.to_bits(),
            (ExprKind::Var, ExprKind::Var) => true,
            (ExprKind::Neg(a), ExprKind::Neg(b)) => a == b,
            (ExprKind::Bin(o1, a1, b1), ExprKind::Bin(o2, a2, b2)) => o1 == o2 && a1 == a2 && b1 == b2,
            (ExprKind::Call(f1, a1, b1), ExprKind::Call(f2, a2, b2)) => f1 == f2 && a1 == a2 && b1 == b2,
            _ => false,
        }
    }
}

/// Division by zero, the only failure of evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalError {
    pub x: f64,
    pub span: Span,
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "division by zero at x = {} (column {})", self.x, self.span.start + 1)
    }
}

impl std::error::Error for EvalError {}

impl Expr {
    pub fn new(kind: ExprKind, span: Span) -> Self {
        Expr { kind, span }
    }

    pub fn eval(&self, x: f64) -> Result<f64, EvalError> {
        Ok(match &self.kind {
            ExprKind::Num(v) => *v,
            ExprKind::Var => x,
            ExprKind::Neg(a) => -a.eval(x)?,
            ExprKind::Bin(op, a, b) => {
                let (a, b) = (a.eval(x)?, b.eval(x)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(EvalError { x, span: self.span });
                        }
                        a / b
                    }
                }
            }
            ExprKind::Call(func, a, b) => {
                let (a, b) = (a.eval(x)?, b.eval(x)?);
                match func {
                    Func::Min => a.min(b),
                    Func::Max => a.max(b),
                    Func::Pow => a.powf(b),
                }
            }
        })
    }

    fn precedence(&self) -> u8 {
        match &self.kind {
            ExprKind::Bin(op, ..) => op.precedence(),
            ExprKind::Neg(_) => 3,
            _ => 4,
        }
    }

    fn write_operand(&self, f: &mut fmt::Formatter<'_>, parens: bool) -> fmt::Result {
        if parens {
            write!(f, "({self})")
        } else {
            write!(f, "{self}")
        }
    }
}

/// Canonical form: minimal parentheses for left-associative binary operators,
/// shortest round-trip literals.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ExprKind::Num(v) => write!(f, "{v}"),
            ExprKind::Var => write!(f, "x"),
            ExprKind::Neg(a) => {
                write!(f, "-")?;
                a.write_operand(f, a.precedence() < 3)
            }
            ExprKind::Bin(op, a, b) => {
                let p = op.precedence();
                a.write_operand(f, a.precedence() < p)?;
                write!(f, " {} ", op.symbol())?;
                b.write_operand(f, b.precedence() <= p)
            }
            ExprKind::Call(func, a, b) => write!(f, "{}({a}, {b})", func.name()),
        }
    }
}

/// One transition rule: from `x`, move to `target(x)` with probability `prob(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub target: Expr,
    pub prob: Expr,
    /// 1-based source line.
    pub line: usize,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "to = {} ; p = {}", self.target, self.prob)
    }
}

/// Parsed rule file. Absorption from `x` is `1 - sum of rule probabilities`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
    /// Weight function from a `V = ...` line, if present.
    pub weight: Option<Expr>,
}

impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rules {
            writeln!(f, "{r}")?;
        }
        if let Some(v) = &self.weight {
            writeln!(f, "V = {v}")?;
        }
        Ok(())
    }
}
