//! Small arithmetic-expression language over chart coordinates.
//!
//! Grammar: `+ - * / ^` (power is right-associative and binds tighter than
//! unary minus), parentheses, numeric literals, the constants `pi` and `e`,
//! and the functions `sin cos exp tanh log`.

use std::fmt;

use crate::error::{Error, Result};
use crate::manifold::{Manifold, ManifoldId};

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Bin(Op, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
    Log,
}

impl Node {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Node::Num(v) => *v,
            Node::Var(i) => x[*i],
            Node::Neg(a) => -a.eval(x),
            Node::Bin(op, a, b) => {
                let (a, b) = (a.eval(x), b.eval(x));
                match op {
                    Op::Add => a + b,
                    Op::Sub => a - b,
                    Op::Mul => a * b,
                    Op::Div => a / b,
                    Op::Pow => {
                        if b.fract() == 0.0 && b.abs() <= 64.0 {
                            a.powi(b as i32)
                        } else {
                            a.powf(b)
                        }
                    }
                }
            }
            Node::Call(f, a) => {
                let a = a.eval(x);
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Tanh => a.tanh(),
                    Func::Log => a.ln(),
                }
            }
        }
    }

    fn max_var(&self) -> Option<usize> {
        match self {
            Node::Num(_) => None,
            Node::Var(i) => Some(*i),
            Node::Neg(a) | Node::Call(_, a) => a.max_var(),
            Node::Bin(_, a, b) => a.max_var().max(b.max_var()),
        }
    }
}

/// Parsed expression bound to a variable table.
#[derive(Clone, PartialEq)]
pub struct Expr {
    src: String,
    root: Node,
    arity: usize,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.src)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.src)
    }
}

impl Expr {
    /// Parses `src`; identifiers resolve through `vars` (name, coordinate index).
    pub fn parse(src: &str, vars: &[(String, usize)]) -> Result<Self> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens, pos: 0, vars };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Parse(format!("unexpected trailing input in '{src}'")));
        }
        let arity = root.max_var().map_or(0, |i| i + 1);
        Ok(Expr { src: src.trim().to_string(), root, arity })
    }

    /// Parses with the coordinate names of `m`.
    pub fn for_manifold(src: &str, m: &dyn Manifold) -> Result<Self> {
        Self::parse(src, &coordinate_table(m))
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert!(x.len() >= self.arity);
        self.root.eval(x)
    }

    pub fn source(&self) -> &str {
        &self.src
    }

    /// True when the expression has no free variables.
    pub fn is_constant(&self) -> bool {
        self.arity == 0
    }
}

/// Identifier table of a manifold's coordinates, aliases included.
pub fn coordinate_table(m: &dyn Manifold) -> Vec<(String, usize)> {
    let mut t: Vec<(String, usize)> = m.coord_names().into_iter().enumerate().map(|(i, n)| (n, i)).collect();
    let alias = |t: &mut Vec<(String, usize)>, name: &str, i: usize| {
        if !t.iter().any(|(n, _)| n == name) {
            t.push((name.to_string(), i));
        }
    };
    match m.builtin() {
        Some(ManifoldId::Euclidean(d)) => {
            for (i, n) in ["x", "y", "z"].iter().enumerate().take(d) {
                alias(&mut t, n, i);
            }
        }
        Some(ManifoldId::Circle) => alias(&mut t, "x", 0),
        Some(ManifoldId::Torus2) => {
            alias(&mut t, "x", 0);
            alias(&mut t, "y", 1);
        }
        _ => {}
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn lex(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part, e.g. 1e-3
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v = s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number '{s}'")))?;
            out.push(Tok::Num(v));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^()".contains(c) {
            out.push(Tok::Sym(c));
            i += 1;
        } else {
            return Err(Error::Parse(format!("unexpected character '{c}' in '{src}'")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Tok>,
    pos: usize,
    vars: &'a [(String, usize)],
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                Op::Add
            } else if self.eat('-') {
                Op::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                Op::Mul
            } else if self.eat('/') {
                Op::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat('-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat('^') {
            let exp = self.unary()?;
            return Ok(Node::Bin(Op::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.tokens.get(self.pos).cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Node::Num(v))
            }
            Some(Tok::Sym('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(Error::Parse("missing ')'".into()));
                }
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                let func = match name.as_str() {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "exp" => Some(Func::Exp),
                    "tanh" => Some(Func::Tanh),
                    "log" => Some(Func::Log),
                    _ => None,
                };
                if let Some(f) = func {
                    if !self.eat('(') {
                        return Err(Error::Parse(format!("'{name}' needs an argument in parentheses")));
                    }
                    let arg = self.expr()?;
                    if !self.eat(')') {
                        return Err(Error::Parse("missing ')'".into()));
                    }
                    return Ok(Node::Call(f, Box::new(arg)));
                }
                if let Some((_, i)) = self.vars.iter().find(|(n, _)| *n == name) {
                    return Ok(Node::Var(*i));
                }
                match name.as_str() {
                    "pi" => Ok(Node::Num(std::f64::consts::PI)),
                    "e" => Ok(Node::Num(std::f64::consts::E)),
                    _ => Err(Error::Parse(format!("unknown identifier '{name}'"))),
                }
            }
            Some(t) => Err(Error::Parse(format!("unexpected token {t:?}"))),
            None => Err(Error::Parse("unexpected end of expression".into())),
        }
    }
}
