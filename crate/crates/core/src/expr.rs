//! Scalar coefficient expressions in `t` and `x1..xn`.
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! expr   := term (("+"|"-") term)*
//! term   := factor (("*"|"/") factor)*
//! factor := "-"? atom ("^" number)?
//! atom   := number | "t" | "x" digits | ident "(" expr ")" | "(" expr ")"
//! ```
//!
//! Powers are restricted to numeric-literal exponents, which keeps
//! evaluation total. Domain violations (log of a non-positive value,
//! square root of a negative value, division by zero) are reported as
//! errors rather than silently producing NaN.

use std::fmt;
use thiserror::Error;

/// Unary functions available in coefficient expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
    Sign,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "tan" => Some(Func::Tan),
            "exp" => Some(Func::Exp),
            "log" => Some(Func::Log),
            "sqrt" => Some(Func::Sqrt),
            "abs" => Some(Func::Abs),
            "tanh" => Some(Func::Tanh),
            "sign" => Some(Func::Sign),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
            Func::Sign => "sign",
        }
    }
}

/// Abstract syntax tree of a parsed coefficient expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(f64),
    /// The time variable `t`.
    Time,
    /// State variable `x<k>`, 1-based.
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    /// Power by a numeric-literal exponent.
    Pow(Box<Expr>, f64),
    Apply(Func, Box<Expr>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown function `{name}` at offset {offset}")]
    UnknownFunction { offset: usize, name: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("empty expression")]
    Empty,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("log of non-positive value {arg}")]
    Log { arg: f64 },
    #[error("square root of negative value {arg}")]
    Sqrt { arg: f64 },
    #[error("division by zero")]
    DivByZero,
    #[error("non-finite result in `{op}`")]
    NonFinite { op: &'static str },
    #[error("variable x{index} out of range (dimension {dim})")]
    VarOutOfRange { index: usize, dim: usize },
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), ParseError> {
        match self.peek() {
            Some(got) if got == c => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.syntax(format!("expected `{}`", c as char))),
        }
    }

    fn syntax(&mut self, message: String) -> ParseError {
        self.skip_ws();
        ParseError::Syntax {
            offset: self.pos,
            message,
        }
    }

    fn parse_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_term()?;
        while let Some(c) = self.peek() {
            match c {
                b'+' => {
                    self.pos += 1;
                    let rhs = self.parse_term()?;
                    lhs = Expr::Add(Box::new(lhs), Box::new(rhs));
                }
                b'-' => {
                    self.pos += 1;
                    let rhs = self.parse_term()?;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn parse_term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_factor()?;
        while let Some(c) = self.peek() {
            match c {
                b'*' => {
                    self.pos += 1;
                    let rhs = self.parse_factor()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
                }
                b'/' => {
                    self.pos += 1;
                    let rhs = self.parse_factor()?;
                    lhs = Expr::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn parse_factor(&mut self) -> Result<Expr, ParseError> {
        let negated = if self.peek() == Some(b'-') {
            self.pos += 1;
            true
        } else {
            false
        };
        let mut atom = self.parse_atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exp_neg = if self.peek() == Some(b'-') {
                self.pos += 1;
                true
            } else {
                false
            };
            let num = self.parse_number()?;
            atom = Expr::Pow(Box::new(atom), if exp_neg { -num } else { num });
        }
        Ok(if negated {
            Expr::Neg(Box::new(atom))
        } else {
            atom
        })
    }

    fn parse_atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            None => Err(self.syntax("expected expression".into())),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.parse_expr()?;
                self.expect(b')')?;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => Ok(Expr::Lit(self.parse_number()?)),
            Some(c) if c.is_ascii_alphabetic() => self.parse_ident(),
            Some(c) => Err(self.syntax(format!("unexpected character `{}`", c as char))),
        }
    }

    fn parse_number(&mut self) -> Result<f64, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if self.pos == start || (self.pos == start + 1 && self.src[start] == b'.') {
            self.pos = start;
            return Err(self.syntax("expected number".into()));
        }
        if self.pos < self.src.len() && (self.src[self.pos] | 32) == b'e' {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-')
            {
                self.pos += 1;
            }
            let digits = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == digits {
                // not an exponent suffix after all (e.g. `2*exp(t)`)
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<f64>()
            .map_err(|_| self.syntax(format!("invalid number `{text}`")))
    }

    fn parse_ident(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_owned();
        if name == "t" {
            return Ok(Expr::Time);
        }
        if let Some(rest) = name.strip_prefix('x') {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                let index: usize = rest
                    .parse()
                    .map_err(|_| self.syntax(format!("invalid variable index `{name}`")))?;
                if index == 0 {
                    return Err(ParseError::Syntax {
                        offset: start,
                        message: "variable indices are 1-based".into(),
                    });
                }
                return Ok(Expr::Var(index));
            }
        }
        if self.peek() == Some(b'(') {
            let func = Func::from_name(&name).ok_or(ParseError::UnknownFunction {
                offset: start,
                name: name.clone(),
            })?;
            self.expect(b'(')?;
            let arg = self.parse_expr()?;
            self.expect(b')')?;
            Ok(Expr::Apply(func, Box::new(arg)))
        } else {
            Err(ParseError::UnknownIdentifier {
                offset: start,
                name,
            })
        }
    }
}

/// Parse an expression from source text.
pub fn parse(source: &str) -> Result<Expr, ParseError> {
    if source.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let mut p = Parser::new(source);
    let expr = p.parse_expr()?;
    if p.peek().is_some() {
        return Err(p.syntax("trailing input".into()));
    }
    Ok(expr)
}

impl Expr {
    /// Largest state-variable index appearing in the tree, or 0 if none.
    pub fn max_var_index(&self) -> usize {
        match self {
            Expr::Lit(_) | Expr::Time => 0,
            Expr::Var(k) => *k,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Apply(_, a) => a.max_var_index(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.max_var_index().max(b.max_var_index())
            }
        }
    }

    /// Check that every variable index is within dimension `n`.
    pub fn bind(&self, n: usize) -> Result<(), EvalError> {
        let k = self.max_var_index();
        if k > n {
            Err(EvalError::VarOutOfRange { index: k, dim: n })
        } else {
            Ok(())
        }
    }

    /// Evaluate with time `t` and state `x`; `sign(0) = 0`.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Lit(c) => *c,
            Expr::Time => t,
            Expr::Var(k) => {
                if *k > x.len() {
                    return Err(EvalError::VarOutOfRange {
                        index: *k,
                        dim: x.len(),
                    });
                }
                x[*k - 1]
            }
            Expr::Neg(a) => -a.eval(t, x)?,
            Expr::Add(a, b) => a.eval(t, x)? + b.eval(t, x)?,
            Expr::Sub(a, b) => a.eval(t, x)? - b.eval(t, x)?,
            Expr::Mul(a, b) => a.eval(t, x)? * b.eval(t, x)?,
            Expr::Div(a, b) => {
                let d = b.eval(t, x)?;
                if d == 0.0 {
                    return Err(EvalError::DivByZero);
                }
                a.eval(t, x)? / d
            }
            Expr::Pow(a, p) => {
                let base = a.eval(t, x)?;
                let v = base.powf(*p);
                if !v.is_finite() {
                    return Err(EvalError::NonFinite { op: "pow" });
                }
                v
            }
            Expr::Apply(f, a) => {
                let arg = a.eval(t, x)?;
                match f {
                    Func::Sin => arg.sin(),
                    Func::Cos => arg.cos(),
                    Func::Tan => arg.tan(),
                    Func::Exp => arg.exp(),
                    Func::Log => {
                        if arg <= 0.0 {
                            return Err(EvalError::Log { arg });
                        }
                        arg.ln()
                    }
                    Func::Sqrt => {
                        if arg < 0.0 {
                            return Err(EvalError::Sqrt { arg });
                        }
                        arg.sqrt()
                    }
                    Func::Abs => arg.abs(),
                    Func::Tanh => arg.tanh(),
                    Func::Sign => {
                        if arg > 0.0 {
                            1.0
                        } else if arg < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite { op: "arith" })
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn wrap(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
            if e.precedence() < min_prec {
                write!(f, "(")?;
                write!(f, "{e}")?;
                write!(f, ")")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Lit(c) => {
                if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) {
                    // negative literals re-parse as unary negation; print wrapped
                    write!(f, "({c})")
                } else {
                    write!(f, "{c}")
                }
            }
            Expr::Time => write!(f, "t"),
            Expr::Var(k) => write!(f, "x{k}"),
            Expr::Neg(a) => {
                write!(f, "-")?;
                wrap(f, a, 4)
            }
            Expr::Add(a, b) => {
                wrap(f, a, 1)?;
                write!(f, " + ")?;
                wrap(f, b, 2)
            }
            Expr::Sub(a, b) => {
                wrap(f, a, 1)?;
                write!(f, " - ")?;
                wrap(f, b, 2)
            }
            Expr::Mul(a, b) => {
                wrap(f, a, 2)?;
                write!(f, "*")?;
                wrap(f, b, 3)
            }
            Expr::Div(a, b) => {
                wrap(f, a, 2)?;
                write!(f, "/")?;
                wrap(f, b, 3)
            }
            Expr::Pow(a, p) => {
                wrap(f, a, 5)?;
                if *p < 0.0 {
                    write!(f, "^-{}", -p)
                } else {
                    write!(f, "^{p}")
                }
            }
            Expr::Apply(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_negated_literal() {
        assert_eq!(parse("-1").unwrap(), Expr::Neg(Box::new(Expr::Lit(1.0))));
    }

    #[test]
    fn parses_grammar_forced_shape() {
        let e = parse("sin(t)*x1 + 2").unwrap();
        assert_eq!(
            e,
            Expr::Add(
                Box::new(Expr::Mul(
                    Box::new(Expr::Apply(Func::Sin, Box::new(Expr::Time))),
                    Box::new(Expr::Var(1)),
                )),
                Box::new(Expr::Lit(2.0)),
            )
        );
    }

    #[test]
    fn unclosed_paren_reports_offset() {
        match parse("exp(") {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_function_and_identifier() {
        assert!(matches!(
            parse("foo(x1)"),
            Err(ParseError::UnknownFunction { .. })
        ));
        assert!(matches!(
            parse("y + 1"),
            Err(ParseError::UnknownIdentifier { .. })
        ));
    }

    #[test]
    fn eval_basic_product() {
        let e = parse("t*x1").unwrap();
        assert_eq!(e.eval(2.0, &[3.0]).unwrap(), 6.0);
    }

    #[test]
    fn sign_zero_is_zero() {
        let e = parse("sign(0)").unwrap();
        assert_eq!(e.eval(0.0, &[]).unwrap(), 0.0);
        assert_eq!(parse("sign(2)").unwrap().eval(0.0, &[]).unwrap(), 1.0);
        assert_eq!(parse("sign(-2)").unwrap().eval(0.0, &[]).unwrap(), -1.0);
    }

    #[test]
    fn division_by_zero_is_reported() {
        let e = parse("1/ (t-1)").unwrap();
        assert_eq!(e.eval(1.0, &[]).unwrap_err(), EvalError::DivByZero);
        assert!(e.eval(2.0, &[]).is_ok());
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(
            parse("log(t)").unwrap().eval(-1.0, &[]),
            Err(EvalError::Log { .. })
        ));
        assert!(matches!(
            parse("sqrt(t)").unwrap().eval(-4.0, &[]),
            Err(EvalError::Sqrt { .. })
        ));
    }

    #[test]
    fn precedence_pow_binds_tighter_than_neg() {
        // -x1^2 = -(x1^2)
        let e = parse("-x1^2").unwrap();
        assert_eq!(e.eval(0.0, &[3.0]).unwrap(), -9.0);
    }

    #[test]
    fn bind_checks_dimension() {
        let e = parse("x3 + x1").unwrap();
        assert!(e.bind(3).is_ok());
        assert!(e.bind(2).is_err());
    }

    #[test]
    fn print_parse_round_trip() {
        for src in [
            "-1",
            "sin(t)*x1 + 2",
            "1/(t - 1)",
            "x1^2 - x2^-1",
            "tanh(abs(t))*sqrt(x1 + 4)",
            "2e-3*exp(t) - (t + 1)^3",
        ] {
            let a = parse(src).unwrap();
            let b = parse(&a.to_string()).unwrap();
            assert_eq!(a, b, "round trip failed for {src}");
        }
    }
}
