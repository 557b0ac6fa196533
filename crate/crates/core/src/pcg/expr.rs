//! Scalar expressions used as parameter maps.
//!
//! Grammar: `+ - * /`, integer powers `x^3`, unary minus, parentheses,
//! `sin cos exp log sqrt`, numeric literals, and references to parent
//! parameters as `name` (component 0) or `name[k]`.

use std::fmt;

use crate::ad::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String, usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

impl Func {
    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(x) => write!(f, "{x}"),
            Expr::Var(n, k) => write!(f, "{n}[{k}]"),
            Expr::Neg(a) => write!(f, "-({a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, n) => write!(f, "({a})^{n}"),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

impl Expr {
    /// Every `(name, component)` referenced.
    pub fn vars(&self, out: &mut Vec<(String, usize)>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(n, k) => out.push((n.clone(), *k)),
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.vars(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.vars(out);
                b.vars(out);
            }
        }
    }

    /// Record the expression on `tape`; `lookup` maps a variable to a scalar node.
    pub fn record(&self, tape: &mut Tape, lookup: &dyn Fn(&str, usize) -> Option<NodeId>) -> Option<NodeId> {
        Some(match self {
            Expr::Num(x) => tape.constant_scalar(*x),
            Expr::Var(n, k) => lookup(n, *k)?,
            Expr::Neg(a) => {
                let a = a.record(tape, lookup)?;
                tape.neg(a)
            }
            Expr::Add(a, b) => {
                let (a, b) = (a.record(tape, lookup)?, b.record(tape, lookup)?);
                tape.add(a, b)
            }
            Expr::Sub(a, b) => {
                let (a, b) = (a.record(tape, lookup)?, b.record(tape, lookup)?);
                tape.sub(a, b)
            }
            Expr::Mul(a, b) => {
                let (a, b) = (a.record(tape, lookup)?, b.record(tape, lookup)?);
                tape.mul(a, b)
            }
            Expr::Div(a, b) => {
                let (a, b) = (a.record(tape, lookup)?, b.record(tape, lookup)?);
                tape.div(a, b)
            }
            Expr::Pow(a, n) => {
                let a = a.record(tape, lookup)?;
                tape.powi(a, *n)
            }
            Expr::Call(func, a) => {
                let a = a.record(tape, lookup)?;
                match func {
                    Func::Sin => tape.sin(a),
                    Func::Cos => tape.cos(a),
                    Func::Exp => tape.exp(a),
                    Func::Log => tape.log(a),
                    Func::Sqrt => tape.sqrt(a),
                }
            }
        })
    }

    /// Plain evaluation without a tape.
    pub fn eval(&self, lookup: &dyn Fn(&str, usize) -> Option<f64>) -> Option<f64> {
        Some(match self {
            Expr::Num(x) => *x,
            Expr::Var(n, k) => lookup(n, *k)?,
            Expr::Neg(a) => -a.eval(lookup)?,
            Expr::Add(a, b) => a.eval(lookup)? + b.eval(lookup)?,
            Expr::Sub(a, b) => a.eval(lookup)? - b.eval(lookup)?,
            Expr::Mul(a, b) => a.eval(lookup)? * b.eval(lookup)?,
            Expr::Div(a, b) => a.eval(lookup)? / b.eval(lookup)?,
            Expr::Pow(a, n) => a.eval(lookup)?.powi(*n),
            Expr::Call(func, a) => {
                let x = a.eval(lookup)?;
                match func {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                    Func::Log => x.ln(),
                    Func::Sqrt => x.sqrt(),
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn lex(src: &str) -> Result<Vec<Tok>, String> {
    let mut out = Vec::new();
    let cs: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < cs.len() {
        let c = cs[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < cs.len() && (cs[i].is_ascii_digit() || cs[i] == '.') {
                i += 1;
            }
            if i < cs.len() && (cs[i] == 'e' || cs[i] == 'E') {
                let save = i;
                i += 1;
                if i < cs.len() && (cs[i] == '+' || cs[i] == '-') {
                    i += 1;
                }
                if i < cs.len() && cs[i].is_ascii_digit() {
                    while i < cs.len() && cs[i].is_ascii_digit() {
                        i += 1;
                    }
                } else {
                    i = save;
                }
            }
            let s: String = cs[start..i].iter().collect();
            out.push(Tok::Num(s.parse().map_err(|_| format!("bad number `{s}`"))?));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < cs.len() && (cs[i].is_alphanumeric() || cs[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(cs[start..i].iter().collect()));
        } else if "+-*/^()[]".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(format!("unexpected character `{c}`"));
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Op(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), String> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(format!("expected `{c}`"))
        }
    }

    fn expr(&mut self) -> Result<Expr, String> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, String> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, String> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        let base = self.atom()?;
        if self.eat('^') {
            let neg = self.eat('-');
            match self.peek().cloned() {
                Some(Tok::Num(n)) if n.fract() == 0.0 => {
                    self.pos += 1;
                    let n = if neg { -(n as i32) } else { n as i32 };
                    return Ok(Expr::Pow(Box::new(base), n));
                }
                _ => return Err("exponent must be an integer literal".into()),
            }
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, String> {
        match self.peek().cloned() {
            Some(Tok::Num(x)) => {
                self.pos += 1;
                Ok(Expr::Num(x))
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.eat('(') {
                    let func = Func::from_name(&name).ok_or_else(|| format!("unknown function `{name}`"))?;
                    let arg = self.expr()?;
                    self.expect(')')?;
                    return Ok(Expr::Call(func, Box::new(arg)));
                }
                if self.eat('[') {
                    let k = match self.peek().cloned() {
                        Some(Tok::Num(k)) if k.fract() == 0.0 && k >= 0.0 => k as usize,
                        _ => return Err("component index must be a non-negative integer".into()),
                    };
                    self.pos += 1;
                    self.expect(']')?;
                    return Ok(Expr::Var(name, k));
                }
                Ok(Expr::Var(name, 0))
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(t) => Err(format!("unexpected token {t:?}")),
            None => Err("unexpected end of expression".into()),
        }
    }
}

/// Parse one scalar expression.
pub fn parse_expr(src: &str) -> Result<Expr, String> {
    let mut p = Parser { toks: lex(src)?, pos: 0 };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(format!("trailing input after expression: {:?}", &p.toks[p.pos..]));
    }
    Ok(e)
}
