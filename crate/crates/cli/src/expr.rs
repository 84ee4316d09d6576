//! Arithmetic expressions over `t, x, x1, x2, y, z, u, c`.
//!
//! Grammar (usual precedence, `^` right-associative and binding tighter than
//! unary minus):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | name | name '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Functions: `exp`, `log`, `sqrt`, `abs`, `pow(a, b)`, `min(a, b)`, `max(a, b)`.
//! Constants: `pi`, plus any user-supplied names.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Var {
    T,
    X,
    X1,
    X2,
    Y,
    Z,
    U,
    C,
}

impl Var {
    pub const ALL: [Var; 8] = [Var::T, Var::X, Var::X1, Var::X2, Var::Y, Var::Z, Var::U, Var::C];

    fn from_name(s: &str) -> Option<Var> {
        Some(match s {
            "t" => Var::T,
            "x" => Var::X,
            "x1" => Var::X1,
            "x2" => Var::X2,
            "y" => Var::Y,
            "z" => Var::Z,
            "u" => Var::U,
            "c" => Var::C,
            _ => return None,
        })
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = ["t", "x", "x1", "x2", "y", "z", "u", "c"][self.index()];
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("{src:?}: {msg} at byte {pos}")]
    Syntax { src: String, pos: usize, msg: String },
    #[error("{src:?}: variable `{var}` is not available here (allowed: {allowed})")]
    Variable { src: String, var: Var, allowed: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Exp,
    Log,
    Sqrt,
    Abs,
    Pow,
    Min,
    Max,
}

impl Func {
    fn lookup(s: &str) -> Option<(Func, usize)> {
        Some(match s {
            "exp" => (Func::Exp, 1),
            "log" => (Func::Log, 1),
            "sqrt" => (Func::Sqrt, 1),
            "abs" => (Func::Abs, 1),
            "pow" => (Func::Pow, 2),
            "min" => (Func::Min, 2),
            "max" => (Func::Max, 2),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// Values of the eight variables, indexed in [`Var::ALL`] order.
pub type Env = [f64; 8];

pub fn env(t: f64, x: f64, x1: f64, x2: f64, y: f64, z: f64, u: &[f64]) -> Env {
    [t, x, x1, x2, y, z, u.first().copied().unwrap_or(0.0), u.get(1).copied().unwrap_or(0.0)]
}

/// A parsed expression. Constants are folded at parse time.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    src: String,
    root: Node,
}

impl Expr {
    /// Parses `src` and rejects any variable outside `allowed`.
    pub fn parse(src: &str, constants: &BTreeMap<String, f64>, allowed: &[Var]) -> Result<Self, ExprError> {
        let mut p = Parser { src, bytes: src.as_bytes(), pos: 0, constants };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(p.error("unexpected trailing input"));
        }
        let expr = Self { src: src.to_string(), root };
        let mut used = Vec::new();
        collect_vars(&expr.root, &mut used);
        if let Some(v) = used.into_iter().find(|v| !allowed.contains(v)) {
            let allowed = allowed.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ");
            return Err(ExprError::Variable { src: src.to_string(), var: v, allowed });
        }
        Ok(expr)
    }

    pub fn source(&self) -> &str {
        &self.src
    }

    pub fn eval(&self, env: &Env) -> f64 {
        eval(&self.root, env)
    }
}

fn collect_vars(n: &Node, out: &mut Vec<Var>) {
    match n {
        Node::Num(_) => {}
        Node::Var(v) => out.push(*v),
        Node::Neg(a) => collect_vars(a, out),
        Node::Bin(_, a, b) => {
            collect_vars(a, out);
            collect_vars(b, out);
        }
        Node::Call(_, args) => args.iter().for_each(|a| collect_vars(a, out)),
    }
}

fn eval(n: &Node, env: &Env) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Var(v) => env[v.index()],
        Node::Neg(a) => -eval(a, env),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, env), eval(b, env));
            match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                '/' => a / b,
                _ => pow(a, b),
            }
        }
        Node::Call(f, args) => {
            let a = eval(&args[0], env);
            match f {
                Func::Exp => a.exp(),
                Func::Log => a.ln(),
                Func::Sqrt => a.sqrt(),
                Func::Abs => a.abs(),
                Func::Pow => pow(a, eval(&args[1], env)),
                Func::Min => a.min(eval(&args[1], env)),
                Func::Max => a.max(eval(&args[1], env)),
            }
        }
    }
}

/// Integer exponents use `powi` so negative bases stay real.
fn pow(a: f64, b: f64) -> f64 {
    if b.fract() == 0.0 && b.abs() <= 64.0 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

fn fold(n: Node) -> Node {
    let mut vars = Vec::new();
    collect_vars(&n, &mut vars);
    if vars.is_empty() && !matches!(n, Node::Num(_)) {
        Node::Num(eval(&n, &[0.0; 8]))
    } else {
        n
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    constants: &'a BTreeMap<String, f64>,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> ExprError {
        ExprError::Syntax { src: self.src.to_string(), pos: self.pos, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = fold(Node::Bin(op as char, Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(op @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = fold(Node::Bin(op as char, Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.eat(b'-') {
            return Ok(fold(Node::Neg(Box::new(self.unary()?))));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exp = self.unary()?;
            return Ok(fold(Node::Bin('^', Box::new(base), Box::new(exp))));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.name(),
            Some(_) => Err(self.error("unexpected character")),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Node, ExprError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            while p.pos < p.bytes.len() && p.bytes[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
        };
        digits(self);
        if self.bytes.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            digits(self);
        }
        if matches!(self.bytes.get(self.pos), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.bytes.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            let exp_start = self.pos;
            digits(self);
            if self.pos == exp_start {
                self.pos = save;
            }
        }
        self.src[start..self.pos].parse::<f64>().map(Node::Num).map_err(|_| {
            self.pos = start;
            self.error("malformed number")
        })
    }

    fn name(&mut self) -> Result<Node, ExprError> {
        let start = self.pos;
        while self.pos < self.bytes.len() && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_') {
            self.pos += 1;
        }
        let name = &self.src[start..self.pos];
        if self.peek() == Some(b'(') {
            let Some((func, arity)) = Func::lookup(name) else {
                self.pos = start;
                return Err(self.error(&format!("unknown function `{name}`")));
            };
            self.pos += 1;
            let mut args = vec![self.expr()?];
            while self.eat(b',') {
                args.push(self.expr()?);
            }
            if !self.eat(b')') {
                return Err(self.error("expected `)` or `,`"));
            }
            if args.len() != arity {
                self.pos = start;
                return Err(self.error(&format!("`{name}` takes {arity} argument(s), got {}", args.len())));
            }
            return Ok(fold(Node::Call(func, args)));
        }
        if let Some(v) = Var::from_name(name) {
            return Ok(Node::Var(v));
        }
        if let Some(v) = self.constants.get(name) {
            return Ok(Node::Num(*v));
        }
        if name == "pi" {
            return Ok(Node::Num(std::f64::consts::PI));
        }
        self.pos = start;
        Err(self.error(&format!("unknown name `{name}`")))
    }
}
