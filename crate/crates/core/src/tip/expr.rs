//! A small arithmetic language for property extractors.
//!
//! A program is a list of `name = expression` lines. Expressions use numbers,
//! named state fields, `local_heights[i]`, the operators `+ - * /` (also `×`
//! and `÷`), comparisons (`< <= > >= == !=`, yielding 1 or 0), parentheses and
//! the functions `min`, `max`, `abs`, `clamp` and `smoothstep`. There are no
//! loops, no assignments between lines and no side effects.

use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Field(String),
    Index(String, usize),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Min,
    Max,
    Abs,
    Clamp,
    SmoothStep,
}

impl Func {
    fn parse(name: &str) -> Option<Func> {
        match name {
            "min" => Some(Func::Min),
            "max" => Some(Func::Max),
            "abs" => Some(Func::Abs),
            "clamp" => Some(Func::Clamp),
            "smoothstep" => Some(Func::SmoothStep),
            _ => None,
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Func::Min | Func::Max => n >= 2,
            Func::Abs => n == 1,
            Func::Clamp | Func::SmoothStep => n == 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Program {
    pub outputs: Vec<(String, Expr)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ParseError {}

/// Resolves field names during evaluation.
pub trait Fields {
    fn scalar(&self, name: &str) -> Option<f64>;
    fn indexed(&self, name: &str, i: usize) -> Option<f64>;
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(&'static str),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
}

fn tokenize(src: &str, line: usize) -> Result<Vec<Tok>, ParseError> {
    let err = |m: String| ParseError { line, message: m };
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                i += 1;
                if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                    i += 1;
                }
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v = s.parse::<f64>().map_err(|_| err(format!("bad number `{s}`")))?;
            out.push(Tok::Num(v));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
            continue;
        }
        let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
        let op2 = match two.as_str() {
            "<=" => Some("<="),
            ">=" => Some(">="),
            "==" => Some("=="),
            "!=" => Some("!="),
            _ => None,
        };
        if let Some(op) = op2 {
            out.push(Tok::Op(op));
            i += 2;
            continue;
        }
        let tok = match c {
            '+' => Tok::Op("+"),
            '-' | '−' => Tok::Op("-"),
            '*' | '×' => Tok::Op("*"),
            '/' | '÷' => Tok::Op("/"),
            '<' => Tok::Op("<"),
            '>' => Tok::Op(">"),
            '=' => Tok::Op("="),
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '[' => Tok::LBracket,
            ']' => Tok::RBracket,
            ',' => Tok::Comma,
            other => return Err(err(format!("unexpected character `{other}`"))),
        };
        out.push(tok);
        i += 1;
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
    line: usize,
}

impl Parser {
    fn err<T>(&self, m: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            line: self.line,
            message: m.into(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, t: Tok) -> Result<(), ParseError> {
        match self.next() {
            Some(ref got) if *got == t => Ok(()),
            got => self.err(format!("expected {t:?}, found {got:?}")),
        }
    }

    fn comparison(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.additive()?;
        let op = match self.peek() {
            Some(Tok::Op("<")) => BinOp::Lt,
            Some(Tok::Op("<=")) => BinOp::Le,
            Some(Tok::Op(">")) => BinOp::Gt,
            Some(Tok::Op(">=")) => BinOp::Ge,
            Some(Tok::Op("==")) => BinOp::Eq,
            Some(Tok::Op("!=")) => BinOp::Ne,
            _ => return Ok(lhs),
        };
        self.pos += 1;
        let rhs = self.additive()?;
        Ok(Expr::Bin(op, Box::new(lhs), Box::new(rhs)))
    }

    fn additive(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.multiplicative()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Op("+")) => BinOp::Add,
                Some(Tok::Op("-")) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.multiplicative()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn multiplicative(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Op("*")) => BinOp::Mul,
                Some(Tok::Op("/")) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if let Some(Tok::Op("-")) = self.peek() {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if let Some(Tok::Op("+")) = self.peek() {
            self.pos += 1;
            return self.unary();
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Expr::Num(v)),
            Some(Tok::LParen) => {
                let e = self.comparison()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => match self.peek() {
                Some(Tok::LParen) => {
                    self.pos += 1;
                    let Some(func) = Func::parse(&name) else {
                        return self.err(format!("unknown function `{name}`"));
                    };
                    let mut args = Vec::new();
                    if self.peek() != Some(&Tok::RParen) {
                        loop {
                            args.push(self.comparison()?);
                            match self.peek() {
                                Some(Tok::Comma) => self.pos += 1,
                                _ => break,
                            }
                        }
                    }
                    self.expect(Tok::RParen)?;
                    if !func.arity_ok(args.len()) {
                        return self.err(format!("wrong number of arguments to `{name}`"));
                    }
                    Ok(Expr::Call(func, args))
                }
                Some(Tok::LBracket) => {
                    self.pos += 1;
                    let idx = match self.next() {
                        Some(Tok::Num(v)) if v >= 0.0 && v.fract() == 0.0 => v as usize,
                        other => return self.err(format!("index must be a non-negative integer, found {other:?}")),
                    };
                    self.expect(Tok::RBracket)?;
                    Ok(Expr::Index(name, idx))
                }
                _ => Ok(Expr::Field(name)),
            },
            other => self.err(format!("unexpected token {other:?}")),
        }
    }
}

/// Parses a program and checks every referenced field against `known`.
pub fn parse_program(src: &str, known: &dyn Fn(&str, Option<usize>) -> bool) -> Result<Program, ParseError> {
    let mut outputs = Vec::new();
    for (n, raw) in src.lines().enumerate() {
        let line = n + 1;
        let text = raw.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let toks = tokenize(text, line)?;
        let mut p = Parser { toks, pos: 0, line };
        let name = match p.next() {
            Some(Tok::Ident(name)) => name,
            other => return p.err(format!("expected output name, found {other:?}")),
        };
        p.expect(Tok::Op("="))?;
        let expr = p.comparison()?;
        if p.pos != p.toks.len() {
            return p.err("trailing tokens after expression");
        }
        check_fields(&expr, known, line)?;
        if outputs.iter().any(|(n, _)| n == &name) {
            return p.err(format!("duplicate output `{name}`"));
        }
        outputs.push((name, expr));
    }
    if outputs.is_empty() {
        return Err(ParseError {
            line: 0,
            message: "program defines no outputs".into(),
        });
    }
    Ok(Program { outputs })
}

fn check_fields(e: &Expr, known: &dyn Fn(&str, Option<usize>) -> bool, line: usize) -> Result<(), ParseError> {
    let bad = |m: String| Err(ParseError { line, message: m });
    match e {
        Expr::Num(_) => Ok(()),
        Expr::Field(f) if known(f, None) => Ok(()),
        Expr::Field(f) => bad(format!("unknown field `{f}`")),
        Expr::Index(f, i) if known(f, Some(*i)) => Ok(()),
        Expr::Index(f, i) => bad(format!("unknown indexed field `{f}[{i}]`")),
        Expr::Neg(a) => check_fields(a, known, line),
        Expr::Bin(_, a, b) => {
            check_fields(a, known, line)?;
            check_fields(b, known, line)
        }
        Expr::Call(_, args) => args.iter().try_for_each(|a| check_fields(a, known, line)),
    }
}

pub fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn truth(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

impl Expr {
    pub fn eval(&self, fields: &dyn Fields) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Field(f) => fields.scalar(f).unwrap_or(f64::NAN),
            Expr::Index(f, i) => fields.indexed(f, *i).unwrap_or(f64::NAN),
            Expr::Neg(a) => -a.eval(fields),
            Expr::Bin(op, a, b) => {
                let (x, y) = (a.eval(fields), b.eval(fields));
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                    BinOp::Lt => truth(x < y),
                    BinOp::Le => truth(x <= y),
                    BinOp::Gt => truth(x > y),
                    BinOp::Ge => truth(x >= y),
                    BinOp::Eq => truth(x == y),
                    BinOp::Ne => truth(x != y),
                }
            }
            Expr::Call(func, args) => {
                let v: Vec<f64> = args.iter().map(|a| a.eval(fields)).collect();
                match func {
                    Func::Min => v.iter().copied().fold(f64::INFINITY, f64::min),
                    Func::Max => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    Func::Abs => v[0].abs(),
                    Func::Clamp => {
                        if v[0].is_nan() {
                            f64::NAN
                        } else {
                            v[0].max(v[1]).min(v[2])
                        }
                    }
                    Func::SmoothStep => smoothstep(v[0], v[1], v[2]),
                }
            }
        }
    }

    /// Every field name this expression reads.
    pub fn fields(&self, out: &mut Vec<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Field(f) | Expr::Index(f, _) => out.push(f.clone()),
            Expr::Neg(a) => a.fields(out),
            Expr::Bin(_, a, b) => {
                a.fields(out);
                b.fields(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.fields(out)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    struct Map(HashMap<&'static str, f64>);

    impl Fields for Map {
        fn scalar(&self, name: &str) -> Option<f64> {
            self.0.get(name).copied()
        }
        fn indexed(&self, name: &str, i: usize) -> Option<f64> {
            (name == "h" && i < 3).then(|| i as f64 * 10.0)
        }
    }

    fn known(name: &str, idx: Option<usize>) -> bool {
        match idx {
            None => matches!(name, "a" | "b"),
            Some(i) => name == "h" && i < 3,
        }
    }

    fn run(src: &str) -> Vec<f64> {
        let p = parse_program(src, &known).unwrap();
        let m = Map(HashMap::from([("a", 2.0), ("b", -3.0)]));
        p.outputs.iter().map(|(_, e)| e.eval(&m)).collect()
    }

    #[test]
    fn precedence_and_functions() {
        assert_eq!(run("x = 1 + 2 * 3"), vec![7.0]);
        assert_eq!(run("x = (1 + 2) * 3"), vec![9.0]);
        assert_eq!(run("x = -a * b"), vec![6.0]);
        assert_eq!(run("x = min(a, b, 0)\ny = max(a, b)"), vec![-3.0, 2.0]);
        assert_eq!(run("x = clamp(a * 10, -1, 1)"), vec![1.0]);
        assert_eq!(run("x = abs(b) + h[2]"), vec![23.0]);
        assert_eq!(run("x = (a > b) + (a <= b) + (a != b)"), vec![2.0]);
        assert_eq!(run("x = 6 ÷ 3 × 2"), vec![4.0]);
        assert_eq!(run("x = smoothstep(0, 1, 0.5)"), vec![0.5]);
        assert_eq!(run("# comment\nx = 1e-1 * 10"), vec![1.0]);
    }

    #[test]
    fn rejects_unknown_names_and_garbage() {
        assert!(parse_program("x = c + 1", &known).is_err());
        assert!(parse_program("x = foo(a)", &known).is_err());
        assert!(parse_program("x = a +", &known).is_err());
        assert!(parse_program("x = h[7]", &known).is_err());
        assert!(parse_program("x = abs(a, b)", &known).is_err());
        assert!(parse_program("import os", &known).is_err());
        assert!(parse_program("", &known).is_err());
        assert!(parse_program("x = 1\nx = 2", &known).is_err());
    }

    #[test]
    fn division_by_zero_is_not_finite() {
        let v = run("x = a / (b + 3)");
        assert!(!v[0].is_finite());
    }
}
