use std::fmt;

use super::{BinOp, Expr, ExprKind, Func, Rule, RuleSet, Span};

/// Syntax error with a 1-based line and column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: {}", self.line, self.column, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    span: Span,
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Num(v) => format!("number {v}"),
        Tok::Ident(s) => format!("'{s}'"),
        Tok::Sym(c) => format!("'{c}'"),
        Tok::End => "end of line".to_string(),
    }
}

struct Err0 {
    at: usize,
    message: String,
}

fn err<T>(at: usize, message: impl Into<String>) -> Result<T, Err0> {
    Err(Err0 { at, message: message.into() })
}

fn lex(src: &str) -> Result<Vec<Token>, Err0> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut k = i + 1;
                if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                    k += 1;
                }
                if k < bytes.len() && bytes[k].is_ascii_digit() {
                    i = k;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            match text.parse::<f64>() {
                Ok(v) if v.is_finite() => out.push(Token { tok: Tok::Num(v), span: Span { start, end: i } }),
                _ => return err(start, format!("malformed number '{text}'")),
            }
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token { tok: Tok::Ident(src[start..i].to_string()), span: Span { start, end: i } });
        } else if b"+-*/(),;=".contains(&c) {
            out.push(Token { tok: Tok::Sym(c as char), span: Span { start: i, end: i + 1 } });
            i += 1;
        } else {
            let ch = src[i..].chars().next().unwrap_or('?');
            return err(i, format!("unexpected character '{ch}'"));
        }
    }
    out.push(Token { tok: Tok::End, span: Span { start: src.len(), end: src.len() } });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect_sym(&mut self, c: char) -> Result<Span, Err0> {
        let t = self.peek();
        if t.tok == Tok::Sym(c) {
            Ok(self.bump().span)
        } else {
            err(t.span.start, format!("expected '{c}', found {}", describe(&t.tok)))
        }
    }

    fn expect_ident(&mut self, name: &str) -> Result<(), Err0> {
        let t = self.peek();
        if t.tok == Tok::Ident(name.to_string()) {
            self.bump();
            Ok(())
        } else {
            err(t.span.start, format!("expected '{name}', found {}", describe(&t.tok)))
        }
    }

    fn starts_operand(&self) -> bool {
        matches!(self.peek().tok, Tok::Num(_) | Tok::Ident(_) | Tok::Sym('(') | Tok::Sym('-'))
    }

    /// Right operand of an operator; a missing one is reported at the operator.
    fn operand(&mut self, op: &Token, level: fn(&mut Parser) -> Result<Expr, Err0>) -> Result<Expr, Err0> {
        if !self.starts_operand() {
            let Tok::Sym(c) = op.tok else { unreachable!() };
            return err(op.span.start, format!("operator '{c}' is missing its right operand"));
        }
        level(self)
    }

    fn expr(&mut self) -> Result<Expr, Err0> {
        let mut lhs = self.term()?;
        while let Tok::Sym(c @ ('+' | '-')) = self.peek().tok {
            let op = self.bump();
            let rhs = self.operand(&op, Parser::term)?;
            let bin = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::new(ExprKind::Bin(bin, Box::new(lhs), Box::new(rhs)), op.span);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, Err0> {
        let mut lhs = self.unary()?;
        while let Tok::Sym(c @ ('*' | '/')) = self.peek().tok {
            let op = self.bump();
            let rhs = self.operand(&op, Parser::unary)?;
            let bin = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::new(ExprKind::Bin(bin, Box::new(lhs), Box::new(rhs)), op.span);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, Err0> {
        if self.peek().tok == Tok::Sym('-') {
            let op = self.bump();
            let inner = self.operand(&op, Parser::unary)?;
            let span = Span { start: op.span.start, end: inner.span.end.max(op.span.end) };
            return Ok(Expr::new(ExprKind::Neg(Box::new(inner)), span));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, Err0> {
        let t = self.bump();
        match t.tok {
            Tok::Num(v) => Ok(Expr::new(ExprKind::Num(v), t.span)),
            Tok::Ident(ref name) if name == "x" => Ok(Expr::new(ExprKind::Var, t.span)),
            Tok::Ident(ref name) => {
                let Some(func) = Func::from_name(name) else {
                    return err(t.span.start, format!("unknown name '{name}' (expected x, min, max or pow)"));
                };
                self.expect_sym('(')?;
                let a = self.expr()?;
                self.expect_sym(',')?;
                let b = self.expr()?;
                let close = self.expect_sym(')')?;
                Ok(Expr::new(ExprKind::Call(func, Box::new(a), Box::new(b)), Span { start: t.span.start, end: close.end }))
            }
            Tok::Sym('(') => {
                let inner = self.expr()?;
                self.expect_sym(')')?;
                Ok(inner)
            }
            other => err(t.span.start, format!("expected a number, x, a function or '(', found {}", describe(&other))),
        }
    }

    fn finish(&mut self) -> Result<(), Err0> {
        let t = self.peek();
        if t.tok == Tok::End {
            Ok(())
        } else {
            err(t.span.start, format!("unexpected {} after the end of the expression", describe(&t.tok)))
        }
    }
}

fn column(src: &str, at: usize) -> usize {
    src[..at.min(src.len())].chars().count() + 1
}

fn lift<T>(src: &str, line: usize, r: Result<T, Err0>) -> Result<T, ParseError> {
    r.map_err(|e| ParseError { line, column: column(src, e.at), message: e.message })
}

/// Parses a single expression.
pub fn parse_expr(src: &str) -> Result<Expr, ParseError> {
    lift(src, 1, (|| {
        let mut p = Parser { toks: lex(src)?, pos: 0 };
        let e = p.expr()?;
        p.finish()?;
        Ok(e)
    })())
}

enum Line {
    Rule(Expr, Expr),
    Weight(Expr),
}

fn parse_line(src: &str) -> Result<Line, Err0> {
    let mut p = Parser { toks: lex(src)?, pos: 0 };
    if p.peek().tok == Tok::Ident("V".into()) {
        p.bump();
        p.expect_sym('=')?;
        let v = p.expr()?;
        p.finish()?;
        return Ok(Line::Weight(v));
    }
    p.expect_ident("to")?;
    p.expect_sym('=')?;
    let target = p.expr()?;
    p.expect_sym(';')?;
    p.expect_ident("p")?;
    p.expect_sym('=')?;
    let prob = p.expr()?;
    p.finish()?;
    Ok(Line::Rule(target, prob))
}

/// Parses a rule file: `to = <expr> ; p = <expr>` lines, at most one
/// `V = <expr>` line, `#` comments and blank lines.
pub fn parse_rules(text: &str) -> Result<RuleSet, ParseError> {
    let mut set = RuleSet::default();
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.split('#').next().unwrap_or("");
        if line.trim().is_empty() {
            continue;
        }
        match lift(line, line_no, parse_line(line))? {
            Line::Rule(target, prob) => set.rules.push(Rule { target, prob, line: line_no }),
            Line::Weight(v) => {
                if set.weight.is_some() {
                    return Err(ParseError { line: line_no, column: 1, message: "second 'V =' line".into() });
                }
                set.weight = Some(v);
            }
        }
    }
    if set.rules.is_empty() {
        return Err(ParseError { line: text.lines().count().max(1), column: 1, message: "no rules".into() });
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_rule_file() {
        let rs = parse_rules("to = x+1 ; p = 0.3\nto = x-1 ; p = min(0.6, 0.1*x)\n").unwrap();
        assert_eq!(rs.rules.len(), 2);
        assert_eq!(rs.rules[1].line, 2);
        assert_eq!(rs.rules[1].prob.eval(3.0).unwrap(), 0.30000000000000004);
        assert_eq!(rs.rules[1].prob.eval(10.0).unwrap(), 0.6);
        assert!(rs.weight.is_none());
    }

    #[test]
    fn dangling_operator_points_at_operator() {
        let e = parse_rules("to = x* ; p = 1").unwrap_err();
        assert_eq!((e.line, e.column), (1, 7));
        assert!(e.message.contains("'*'"));
    }

    #[test]
    fn error_positions() {
        let e = parse_rules("# header\n\nto = x+1 ; p = 0.2\nto = foo(x) ; p = 1\n").unwrap_err();
        assert_eq!((e.line, e.column), (4, 6));
        let e = parse_rules("to = x+1 p = 0.2").unwrap_err();
        assert_eq!(e.column, 10);
        let e = parse_rules("to = (x+1 ; p = 0.2").unwrap_err();
        assert_eq!(e.column, 11);
        let e = parse_rules("to = x ; p = 0.2 0.3").unwrap_err();
        assert_eq!(e.column, 18);
        let e = parse_rules("to = x ; p = 0.2 $").unwrap_err();
        assert_eq!(e.column, 18);
        assert!(parse_rules("# only a comment\n").is_err());
    }

    #[test]
    fn weight_line_and_comments() {
        let rs = parse_rules("to = x+1 ; p = 0.2 # up\nV = pow(1.5, x)\n").unwrap();
        assert_eq!(rs.weight.unwrap().eval(2.0).unwrap(), 2.25);
        assert!(parse_rules("to = x ; p = 1\nV = 1\nV = 2\n").is_err());
    }

    #[test]
    fn scientific_literals() {
        assert_eq!(parse_expr("1.5e-3*x").unwrap().eval(2.0).unwrap(), 3e-3);
        assert_eq!(parse_expr(".5").unwrap().eval(0.0).unwrap(), 0.5);
    }
}
