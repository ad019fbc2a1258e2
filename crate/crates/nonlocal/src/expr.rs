//! A small arithmetic expression language used by configuration files.
//!
//! Grammar (usual precedence, `^` is right associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := ('-' | '+') unary | power
//! power  := atom ('^' unary)?
//! atom   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Variables are `x1..x3` (with `x`, `y`, `z` as aliases), `t`, `r` (the
//! Euclidean norm of the spatial point) and `theta1..theta3` for angular
//! profiles. Functions: `exp sin cos tan sqrt log abs pos neg sign min max`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{message} at column {column}")]
pub struct ParseError {
    pub message: String,
    /// 1-based column in the expression source.
    pub column: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Var {
    X(usize),
    Theta(usize),
    T,
    R,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Exp,
    Sin,
    Cos,
    Tan,
    Sqrt,
    Log,
    Abs,
    Pos,
    Neg,
    Sign,
    Min,
    Max,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "sqrt" => Func::Sqrt,
            "log" | "ln" => Func::Log,
            "abs" => Func::Abs,
            "pos" => Func::Pos,
            "neg" => Func::Neg,
            "sign" => Func::Sign,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// Evaluation context for an expression.
#[derive(Debug, Clone, Copy, Default)]
pub struct Env<'a> {
    pub x: &'a [f64],
    pub t: f64,
}

/// A parsed expression together with its source text.
#[derive(Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
    max_var: usize,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Expr, ParseError> {
        let tokens = tokenize(source)?;
        let mut p = Parser { tokens, pos: 0, max_var: 0, len: source.chars().count() };
        let root = p.expr()?;
        if let Some(tok) = p.peek() {
            return Err(ParseError { message: format!("unexpected {}", tok.kind), column: tok.column });
        }
        Ok(Expr { source: source.to_string(), root, max_var: p.max_var })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Largest spatial (or angular) index referenced, 0 when none.
    pub fn max_variable_index(&self) -> usize {
        self.max_var
    }

    pub fn eval(&self, env: Env<'_>) -> f64 {
        eval(&self.root, &env)
    }

    pub fn eval_x(&self, x: &[f64]) -> f64 {
        self.eval(Env { x, t: 0.0 })
    }

    pub fn eval_tx(&self, t: f64, x: &[f64]) -> f64 {
        self.eval(Env { x, t })
    }
}

fn eval(node: &Node, env: &Env<'_>) -> f64 {
    match node {
        Node::Num(v) => *v,
        Node::Var(v) => match *v {
            Var::X(i) | Var::Theta(i) => env.x.get(i).copied().unwrap_or(0.0),
            Var::T => env.t,
            Var::R => env.x.iter().map(|c| c * c).sum::<f64>().sqrt(),
        },
        Node::Neg(a) => -eval(a, env),
        Node::Add(a, b) => eval(a, env) + eval(b, env),
        Node::Sub(a, b) => eval(a, env) - eval(b, env),
        Node::Mul(a, b) => eval(a, env) * eval(b, env),
        Node::Div(a, b) => eval(a, env) / eval(b, env),
        Node::Pow(a, b) => {
            let base = eval(a, env);
            let expo = eval(b, env);
            if expo == expo.round() && expo.abs() <= 64.0 {
                base.powi(expo as i32)
            } else {
                base.powf(expo)
            }
        }
        Node::Call(f, args) => {
            let a = eval(&args[0], env);
            match f {
                Func::Exp => a.exp(),
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Tan => a.tan(),
                Func::Sqrt => a.sqrt(),
                Func::Log => a.ln(),
                Func::Abs => a.abs(),
                Func::Pos => a.max(0.0),
                Func::Neg => (-a).max(0.0),
                Func::Sign => {
                    if a > 0.0 {
                        1.0
                    } else if a < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                Func::Min => a.min(eval(&args[1], env)),
                Func::Max => a.max(eval(&args[1], env)),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Num(f64),
    Ident(String),
    Op(char),
}

impl fmt::Display for TokKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokKind::Num(v) => write!(f, "number {v}"),
            TokKind::Ident(s) => write!(f, "identifier '{s}'"),
            TokKind::Op(c) => write!(f, "'{c}'"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    column: usize,
}

fn tokenize(src: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 =
                text.parse().map_err(|_| ParseError { message: format!("malformed number '{text}'"), column })?;
            out.push(Token { kind: TokKind::Num(v), column });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token { kind: TokKind::Ident(chars[start..i].iter().collect()), column });
        } else if "+-*/^(),".contains(c) {
            out.push(Token { kind: TokKind::Op(c), column });
            i += 1;
        } else {
            return Err(ParseError { message: format!("unexpected character '{c}'"), column });
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    max_var: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn eof_column(&self) -> usize {
        self.len + 1
    }

    fn eat_op(&mut self, op: char) -> bool {
        if matches!(self.peek(), Some(Token { kind: TokKind::Op(c), .. }) if *c == op) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: char) -> Result<(), ParseError> {
        if self.eat_op(op) {
            return Ok(());
        }
        match self.peek() {
            Some(t) => Err(ParseError { message: format!("expected '{op}', found {}", t.kind), column: t.column }),
            None => {
                Err(ParseError { message: format!("expected '{op}', found end of input"), column: self.eof_column() })
            }
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat_op('+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat_op('-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat_op('*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat_op('/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        if self.eat_op('-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat_op('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.atom()?;
        if self.eat_op('^') {
            let expo = self.unary()?;
            return Ok(Node::Pow(Box::new(base), Box::new(expo)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(ParseError { message: "unexpected end of input".into(), column: self.eof_column() });
        };
        self.pos += 1;
        match tok.kind {
            TokKind::Num(v) => Ok(Node::Num(v)),
            TokKind::Op('(') => {
                let inner = self.expr()?;
                self.expect_op(')')?;
                Ok(inner)
            }
            TokKind::Op(c) => Err(ParseError { message: format!("unexpected '{c}'"), column: tok.column }),
            TokKind::Ident(name) => {
                if let Some(func) = Func::from_name(&name) {
                    self.expect_op('(')?;
                    let mut args = vec![self.expr()?];
                    while self.eat_op(',') {
                        args.push(self.expr()?);
                    }
                    self.expect_op(')')?;
                    if args.len() != func.arity() {
                        return Err(ParseError {
                            message: format!(
                                "function '{name}' takes {} argument(s), got {}",
                                func.arity(),
                                args.len()
                            ),
                            column: tok.column,
                        });
                    }
                    return Ok(Node::Call(func, args));
                }
                match self.variable(&name) {
                    Some(node) => Ok(node),
                    None => Err(ParseError { message: format!("unknown identifier '{name}'"), column: tok.column }),
                }
            }
        }
    }

    fn variable(&mut self, name: &str) -> Option<Node> {
        let var = match name {
            "pi" => return Some(Node::Num(std::f64::consts::PI)),
            "e" => return Some(Node::Num(std::f64::consts::E)),
            "x" => Var::X(0),
            "y" => Var::X(1),
            "z" => Var::X(2),
            "t" => Var::T,
            "r" => Var::R,
            _ => {
                let (prefix, idx) = if let Some(rest) = name.strip_prefix("theta") {
                    (true, rest)
                } else if let Some(rest) = name.strip_prefix('x') {
                    (false, rest)
                } else {
                    return None;
                };
                let i: usize = idx.parse().ok()?;
                if !(1..=3).contains(&i) {
                    return None;
                }
                if prefix {
                    Var::Theta(i - 1)
                } else {
                    Var::X(i - 1)
                }
            }
        };
        if let Var::X(i) | Var::Theta(i) = var {
            self.max_var = self.max_var.max(i + 1);
        }
        Some(Node::Var(var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, x: &[f64]) -> f64 {
        Expr::parse(s).unwrap().eval_x(x)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 + 2 * 3", &[]), 7.0);
        assert_eq!(ev("2 ^ 3 ^ 2", &[]), 512.0);
        assert_eq!(ev("-2 ^ 2", &[]), -4.0);
        assert_eq!(ev("(1 - 2) - 3", &[]), -4.0);
        assert_eq!(ev("8 / 4 / 2", &[]), 1.0);
    }

    #[test]
    fn variables_and_functions() {
        assert!((ev("exp(-x1^2)", &[0.5]) - (-0.25f64).exp()).abs() < 1e-15);
        assert_eq!(ev("pos(x1) + neg(x2)", &[-1.0, -2.0]), 2.0);
        assert_eq!(ev("r", &[3.0, 4.0]), 5.0);
        assert_eq!(ev("max(x, y)", &[3.0, 4.0]), 4.0);
        assert_eq!(Expr::parse("x2 + theta3").unwrap().max_variable_index(), 3);
        assert_eq!(Expr::parse("t").unwrap().eval_tx(2.5, &[]), 2.5);
    }

    #[test]
    fn errors_carry_columns() {
        let e = Expr::parse("1 + * 2").unwrap_err();
        assert_eq!(e.column, 5);
        let e = Expr::parse("sin(x1").unwrap_err();
        assert_eq!(e.column, 7);
        let e = Expr::parse("foo(1)").unwrap_err();
        assert_eq!(e.column, 1);
        let e = Expr::parse("x1 $ 2").unwrap_err();
        assert_eq!(e.column, 4);
        assert!(Expr::parse("min(1)").is_err());
        assert!(Expr::parse("x4").is_err());
    }
}
