//! Differentiable scalar expressions over the slow variables `y1..yn`.
//!
//! Expressions are parsed into an [`ExprNode`] tree and compiled into a flat
//! evaluation tape. The tape propagates truncated Taylor jets (value,
//! gradient, Hessian) in a caller-provided scratch buffer, so repeated
//! evaluation inside integration loops does not allocate.

use crate::error::{Error, Result};
use crate::jet::Jet2;

/// Expression tree node. Variables are 1-based in the surface syntax
/// (`y1..yn`) and 0-based internally.
#[derive(Debug, Clone, PartialEq)]
pub enum ExprNode {
    Const(f64),
    /// 0-based slow-variable index.
    Var(usize),
    Add(Box<ExprNode>, Box<ExprNode>),
    Sub(Box<ExprNode>, Box<ExprNode>),
    Mul(Box<ExprNode>, Box<ExprNode>),
    /// Quotient; the denominator carries a positivity domain assumption,
    /// checked at evaluation time.
    Div(Box<ExprNode>, Box<ExprNode>),
    /// Integer power.
    Pow(Box<ExprNode>, i32),
    Sin(Box<ExprNode>),
    Cos(Box<ExprNode>),
    Exp(Box<ExprNode>),
    /// Natural logarithm; positivity checked at evaluation time.
    Log(Box<ExprNode>),
}

impl ExprNode {
    /// Largest 0-based variable index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            ExprNode::Const(_) => None,
            ExprNode::Var(j) => Some(*j),
            ExprNode::Add(a, b)
            | ExprNode::Sub(a, b)
            | ExprNode::Mul(a, b)
            | ExprNode::Div(a, b) => opt_max(a.max_var(), b.max_var()),
            ExprNode::Pow(a, _) => a.max_var(),
            ExprNode::Sin(a) | ExprNode::Cos(a) | ExprNode::Exp(a) | ExprNode::Log(a) => {
                a.max_var()
            }
        }
    }

    pub fn parse(input: &str) -> Result<ExprNode> {
        Parser::new(input)?.parse_full()
    }
}

fn opt_max(a: Option<usize>, b: Option<usize>) -> Option<usize> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Var(usize),
    Func(&'static str),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn new(input: &str) -> Result<Parser> {
        let mut tokens = Vec::new();
        let bytes = input.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i] as char;
            match c {
                ' ' | '\t' | '\n' | '\r' => i += 1,
                '+' => {
                    tokens.push(Token::Plus);
                    i += 1;
                }
                '-' => {
                    tokens.push(Token::Minus);
                    i += 1;
                }
                '*' => {
                    tokens.push(Token::Star);
                    i += 1;
                }
                '/' => {
                    tokens.push(Token::Slash);
                    i += 1;
                }
                '^' => {
                    tokens.push(Token::Caret);
                    i += 1;
                }
                '(' => {
                    tokens.push(Token::LParen);
                    i += 1;
                }
                ')' => {
                    tokens.push(Token::RParen);
                    i += 1;
                }
                '0'..='9' | '.' => {
                    let start = i;
                    while i < bytes.len()
                        && matches!(bytes[i] as char, '0'..='9' | '.' | 'e' | 'E')
                    {
                        // Allow exponent signs as in 1.5e-3.
                        if matches!(bytes[i] as char, 'e' | 'E')
                            && i + 1 < bytes.len()
                            && matches!(bytes[i + 1] as char, '+' | '-')
                        {
                            i += 1;
                        }
                        i += 1;
                    }
                    let text = &input[start..i];
                    let v: f64 = text.parse().map_err(|_| {
                        Error::MalformedExpression(format!("bad number literal `{text}`"))
                    })?;
                    tokens.push(Token::Num(v));
                }
                'a'..='z' | 'A'..='Z' => {
                    let start = i;
                    while i < bytes.len() && (bytes[i] as char).is_ascii_alphanumeric() {
                        i += 1;
                    }
                    let word = &input[start..i];
                    match word {
                        "sin" => tokens.push(Token::Func("sin")),
                        "cos" => tokens.push(Token::Func("cos")),
                        "exp" => tokens.push(Token::Func("exp")),
                        "log" => tokens.push(Token::Func("log")),
                        _ => {
                            if let Some(idx) = word.strip_prefix('y') {
                                let j: usize = idx.parse().map_err(|_| {
                                    Error::MalformedExpression(format!(
                                        "bad variable name `{word}`"
                                    ))
                                })?;
                                if j == 0 {
                                    return Err(Error::MalformedExpression(
                                        "variable indices start at y1".into(),
                                    ));
                                }
                                tokens.push(Token::Var(j - 1));
                            } else {
                                return Err(Error::MalformedExpression(format!(
                                    "unknown identifier `{word}`"
                                )));
                            }
                        }
                    }
                }
                other => {
                    return Err(Error::MalformedExpression(format!(
                        "unexpected character `{other}`"
                    )))
                }
            }
        }
        Ok(Parser { tokens, pos: 0 })
    }

    fn parse_full(mut self) -> Result<ExprNode> {
        let expr = self.expr()?;
        if self.pos != self.tokens.len() {
            return Err(Error::MalformedExpression(format!(
                "trailing tokens after expression (at token {})",
                self.pos
            )));
        }
        Ok(expr)
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<ExprNode> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = ExprNode::Add(Box::new(lhs), Box::new(rhs));
                }
                Some(Token::Minus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = ExprNode::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<ExprNode> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = ExprNode::Mul(Box::new(lhs), Box::new(rhs));
                }
                Some(Token::Slash) => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = ExprNode::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<ExprNode> {
        let base = self.atom()?;
        if let Some(Token::Caret) = self.peek() {
            self.pos += 1;
            let neg = if let Some(Token::Minus) = self.peek() {
                self.pos += 1;
                true
            } else {
                false
            };
            match self.next() {
                Some(Token::Num(v)) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => {
                    let mut k = v as i32;
                    if neg {
                        k = -k;
                    }
                    Ok(ExprNode::Pow(Box::new(base), k))
                }
                _ => Err(Error::MalformedExpression(
                    "exponent must be an integer literal".into(),
                )),
            }
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<ExprNode> {
        match self.next() {
            Some(Token::Num(v)) => Ok(ExprNode::Const(v)),
            Some(Token::Var(j)) => Ok(ExprNode::Var(j)),
            Some(Token::Minus) => {
                let inner = self.factor()?;
                Ok(ExprNode::Sub(
                    Box::new(ExprNode::Const(0.0)),
                    Box::new(inner),
                ))
            }
            Some(Token::Func(name)) => {
                match self.next() {
                    Some(Token::LParen) => {}
                    _ => {
                        return Err(Error::MalformedExpression(format!(
                            "expected `(` after `{name}`"
                        )))
                    }
                }
                let arg = self.expr()?;
                match self.next() {
                    Some(Token::RParen) => {}
                    _ => {
                        return Err(Error::MalformedExpression(format!(
                            "unclosed argument list of `{name}`"
                        )))
                    }
                }
                let arg = Box::new(arg);
                Ok(match name {
                    "sin" => ExprNode::Sin(arg),
                    "cos" => ExprNode::Cos(arg),
                    "exp" => ExprNode::Exp(arg),
                    "log" => ExprNode::Log(arg),
                    _ => unreachable!(),
                })
            }
            Some(Token::LParen) => {
                let inner = self.expr()?;
                match self.next() {
                    Some(Token::RParen) => Ok(inner),
                    _ => Err(Error::MalformedExpression("unbalanced parentheses".into())),
                }
            }
            other => Err(Error::MalformedExpression(format!(
                "unexpected token {other:?}"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Compiled tape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Instr {
    Const(f64),
    Var(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Pow(usize, i32),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Log(usize),
}

/// Flat postorder form of an expression, ready for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Tape {
    instrs: Vec<Instr>,
}

impl Tape {
    pub fn compile(expr: &ExprNode) -> Tape {
        let mut instrs = Vec::new();
        fn go(e: &ExprNode, out: &mut Vec<Instr>) -> usize {
            let instr = match e {
                ExprNode::Const(v) => Instr::Const(*v),
                ExprNode::Var(j) => Instr::Var(*j),
                ExprNode::Add(a, b) => Instr::Add(go(a, out), go(b, out)),
                ExprNode::Sub(a, b) => Instr::Sub(go(a, out), go(b, out)),
                ExprNode::Mul(a, b) => Instr::Mul(go(a, out), go(b, out)),
                ExprNode::Div(a, b) => Instr::Div(go(a, out), go(b, out)),
                ExprNode::Pow(a, k) => Instr::Pow(go(a, out), *k),
                ExprNode::Sin(a) => Instr::Sin(go(a, out)),
                ExprNode::Cos(a) => Instr::Cos(go(a, out)),
                ExprNode::Exp(a) => Instr::Exp(go(a, out)),
                ExprNode::Log(a) => Instr::Log(go(a, out)),
            };
            out.push(instr);
            out.len() - 1
        }
        go(expr, &mut instrs);
        Tape { instrs }
    }

    /// Plain value evaluation.
    pub fn eval_value(&self, y: &[f64], scratch: &mut Vec<f64>) -> Result<f64> {
        scratch.clear();
        scratch.resize(self.instrs.len(), 0.0);
        for (i, instr) in self.instrs.iter().enumerate() {
            scratch[i] = match *instr {
                Instr::Const(v) => v,
                Instr::Var(j) => y[j],
                Instr::Add(a, b) => scratch[a] + scratch[b],
                Instr::Sub(a, b) => scratch[a] - scratch[b],
                Instr::Mul(a, b) => scratch[a] * scratch[b],
                Instr::Div(a, b) => {
                    check_denominator(scratch[b])?;
                    scratch[a] / scratch[b]
                }
                Instr::Pow(a, k) => {
                    check_pow(scratch[a], k)?;
                    scratch[a].powi(k)
                }
                Instr::Sin(a) => scratch[a].sin(),
                Instr::Cos(a) => scratch[a].cos(),
                Instr::Exp(a) => scratch[a].exp(),
                Instr::Log(a) => {
                    check_log(scratch[a])?;
                    scratch[a].ln()
                }
            };
        }
        Ok(*scratch.last().expect("non-empty tape"))
    }

    /// First-order evaluation: returns the value and writes the gradient
    /// into `grad` (length `n`). Slot layout in `scratch`: `[value, grad; n]`.
    pub fn eval_grad(&self, y: &[f64], scratch: &mut Vec<f64>, grad: &mut [f64]) -> Result<f64> {
        let n = y.len();
        debug_assert_eq!(grad.len(), n);
        let stride = 1 + n;
        scratch.clear();
        scratch.resize(self.instrs.len() * stride, 0.0);
        for (i, instr) in self.instrs.iter().enumerate() {
            let (done, rest) = scratch.split_at_mut(i * stride);
            let dst = &mut rest[..stride];
            match *instr {
                Instr::Const(v) => {
                    dst[0] = v;
                    dst[1..].fill(0.0);
                }
                Instr::Var(j) => {
                    dst[0] = y[j];
                    dst[1..].fill(0.0);
                    dst[1 + j] = 1.0;
                }
                Instr::Add(a, b) => {
                    let (sa, sb) = (slot(done, a, stride), slot(done, b, stride));
                    for k in 0..stride {
                        dst[k] = sa[k] + sb[k];
                    }
                }
                Instr::Sub(a, b) => {
                    let (sa, sb) = (slot(done, a, stride), slot(done, b, stride));
                    for k in 0..stride {
                        dst[k] = sa[k] - sb[k];
                    }
                }
                Instr::Mul(a, b) => {
                    let (sa, sb) = (slot(done, a, stride), slot(done, b, stride));
                    dst[0] = sa[0] * sb[0];
                    for k in 1..stride {
                        dst[k] = sa[k] * sb[0] + sb[k] * sa[0];
                    }
                }
                Instr::Div(a, b) => {
                    let (sa, sb) = (slot(done, a, stride), slot(done, b, stride));
                    check_denominator(sb[0])?;
                    let inv = 1.0 / sb[0];
                    dst[0] = sa[0] * inv;
                    for k in 1..stride {
                        dst[k] = (sa[k] - dst[0] * sb[k]) * inv;
                    }
                }
                Instr::Pow(a, k) => {
                    let sa = slot(done, a, stride);
                    check_pow(sa[0], k)?;
                    let df = f64::from(k) * powi_or_zero(sa[0], k - 1);
                    dst[0] = sa[0].powi(k);
                    for m in 1..stride {
                        dst[m] = df * sa[m];
                    }
                }
                Instr::Sin(a) => unary_grad(slot(done, a, stride), dst, f64::sin, f64::cos),
                Instr::Cos(a) => {
                    unary_grad(slot(done, a, stride), dst, f64::cos, |x| -x.sin())
                }
                Instr::Exp(a) => unary_grad(slot(done, a, stride), dst, f64::exp, f64::exp),
                Instr::Log(a) => {
                    let sa = slot(done, a, stride);
                    check_log(sa[0])?;
                    unary_grad(sa, dst, f64::ln, |x| 1.0 / x);
                }
            }
        }
        let last = &scratch[(self.instrs.len() - 1) * stride..];
        grad.copy_from_slice(&last[1..1 + n]);
        Ok(last[0])
    }

    /// Second-order evaluation: returns the value and writes gradient and
    /// row-major Hessian. Slot layout: `[value, grad; n, hess; n*n]`.
    pub fn eval_jet2(
        &self,
        y: &[f64],
        scratch: &mut Vec<f64>,
        grad: &mut [f64],
        hess: &mut [f64],
    ) -> Result<f64> {
        let n = y.len();
        debug_assert_eq!(grad.len(), n);
        debug_assert_eq!(hess.len(), n * n);
        let stride = 1 + n + n * n;
        scratch.clear();
        scratch.resize(self.instrs.len() * stride, 0.0);
        for (i, instr) in self.instrs.iter().enumerate() {
            let (done, rest) = scratch.split_at_mut(i * stride);
            let dst = &mut rest[..stride];
            match *instr {
                Instr::Const(v) => {
                    dst[0] = v;
                    dst[1..].fill(0.0);
                }
                Instr::Var(j) => {
                    dst[0] = y[j];
                    dst[1..].fill(0.0);
                    dst[1 + j] = 1.0;
                }
                Instr::Add(a, b) => {
                    let (sa, sb) = (slot(done, a, stride), slot(done, b, stride));
                    for k in 0..stride {
                        dst[k] = sa[k] + sb[k];
                    }
                }
                Instr::Sub(a, b) => {
                    let (sa, sb) = (slot(done, a, stride), slot(done, b, stride));
                    for k in 0..stride {
                        dst[k] = sa[k] - sb[k];
                    }
                }
                Instr::Mul(a, b) => {
                    let (sa, sb) = (slot(done, a, stride), slot(done, b, stride));
                    dst[0] = sa[0] * sb[0];
                    for k in 0..n {
                        dst[1 + k] = sa[1 + k] * sb[0] + sb[1 + k] * sa[0];
                    }
                    for p in 0..n {
                        for q in 0..n {
                            dst[1 + n + p * n + q] = sa[1 + n + p * n + q] * sb[0]
                                + sb[1 + n + p * n + q] * sa[0]
                                + sa[1 + p] * sb[1 + q]
                                + sa[1 + q] * sb[1 + p];
                        }
                    }
                }
                Instr::Div(a, b) => {
                    let (sa, sb) = (slot(done, a, stride), slot(done, b, stride));
                    check_denominator(sb[0])?;
                    // a / b = a * g(b), g(x) = 1/x.
                    let x = sb[0];
                    let g0 = 1.0 / x;
                    let g1 = -g0 * g0;
                    let g2 = 2.0 * g0 * g0 * g0;
                    compose_then_mul(sa, sb, dst, n, g0, g1, g2);
                }
                Instr::Pow(a, k) => {
                    let sa = slot(done, a, stride);
                    check_pow(sa[0], k)?;
                    let x = sa[0];
                    let f0 = x.powi(k);
                    let f1 = f64::from(k) * powi_or_zero(x, k - 1);
                    let f2 = f64::from(k) * f64::from(k - 1) * powi_or_zero(x, k - 2);
                    unary_jet2(sa, dst, n, f0, f1, f2);
                }
                Instr::Sin(a) => {
                    let sa = slot(done, a, stride);
                    let x = sa[0];
                    unary_jet2(sa, dst, n, x.sin(), x.cos(), -x.sin());
                }
                Instr::Cos(a) => {
                    let sa = slot(done, a, stride);
                    let x = sa[0];
                    unary_jet2(sa, dst, n, x.cos(), -x.sin(), -x.cos());
                }
                Instr::Exp(a) => {
                    let sa = slot(done, a, stride);
                    let e = sa[0].exp();
                    unary_jet2(sa, dst, n, e, e, e);
                }
                Instr::Log(a) => {
                    let sa = slot(done, a, stride);
                    check_log(sa[0])?;
                    let x = sa[0];
                    unary_jet2(sa, dst, n, x.ln(), 1.0 / x, -1.0 / (x * x));
                }
            }
        }
        let last = &scratch[(self.instrs.len() - 1) * stride..];
        grad.copy_from_slice(&last[1..1 + n]);
        hess.copy_from_slice(&last[1 + n..1 + n + n * n]);
        Ok(last[0])
    }

    /// Convenience wrapper returning an owned [`Jet2`].
    pub fn eval_jet2_owned(&self, y: &[f64]) -> Result<Jet2> {
        let n = y.len();
        let mut scratch = Vec::new();
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n * n];
        let value = self.eval_jet2(y, &mut scratch, &mut grad, &mut hess)?;
        Ok(Jet2 {
            value,
            gradient: grad,
            hessian: hess,
        })
    }
}

fn slot(done: &[f64], idx: usize, stride: usize) -> &[f64] {
    &done[idx * stride..(idx + 1) * stride]
}

fn unary_grad(src: &[f64], dst: &mut [f64], f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) {
    let x = src[0];
    let d = df(x);
    dst[0] = f(x);
    for k in 1..src.len() {
        dst[k] = d * src[k];
    }
}

// dst = f(src) for jet2 slots, with f, f', f'' supplied at src value.
fn unary_jet2(src: &[f64], dst: &mut [f64], n: usize, f0: f64, f1: f64, f2: f64) {
    dst[0] = f0;
    for k in 0..n {
        dst[1 + k] = f1 * src[1 + k];
    }
    for p in 0..n {
        for q in 0..n {
            dst[1 + n + p * n + q] =
                f1 * src[1 + n + p * n + q] + f2 * src[1 + p] * src[1 + q];
        }
    }
}

// dst = sa * g(sb) for jet2 slots, used by Div.
fn compose_then_mul(sa: &[f64], sb: &[f64], dst: &mut [f64], n: usize, g0: f64, g1: f64, g2: f64) {
    // jet of g(sb)
    let mut gv = vec![0.0; 1 + n + n * n];
    unary_jet2(sb, &mut gv, n, g0, g1, g2);
    dst[0] = sa[0] * gv[0];
    for k in 0..n {
        dst[1 + k] = sa[1 + k] * gv[0] + gv[1 + k] * sa[0];
    }
    for p in 0..n {
        for q in 0..n {
            dst[1 + n + p * n + q] = sa[1 + n + p * n + q] * gv[0]
                + gv[1 + n + p * n + q] * sa[0]
                + sa[1 + p] * gv[1 + q]
                + sa[1 + q] * gv[1 + p];
        }
    }
}

fn check_denominator(v: f64) -> Result<()> {
    if v <= 0.0 {
        Err(Error::DomainError(format!(
            "quotient denominator must be positive, got {v}"
        )))
    } else {
        Ok(())
    }
}

fn check_log(v: f64) -> Result<()> {
    if v <= 0.0 {
        Err(Error::DomainError(format!(
            "log of non-positive argument {v}"
        )))
    } else {
        Ok(())
    }
}

fn check_pow(base: f64, k: i32) -> Result<()> {
    if k < 0 && base == 0.0 {
        Err(Error::DomainError("zero raised to a negative power".into()))
    } else {
        Ok(())
    }
}

fn powi_or_zero(x: f64, k: i32) -> f64 {
    if x == 0.0 && k < 0 {
        0.0
    } else {
        x.powi(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn parses_sum_of_const_and_sin() {
        let e = ExprNode::parse("2 + sin(y1)").unwrap();
        assert_eq!(
            e,
            ExprNode::Add(
                Box::new(ExprNode::Const(2.0)),
                Box::new(ExprNode::Sin(Box::new(ExprNode::Var(0))))
            )
        );
    }

    #[test]
    fn parses_test_model_frequency() {
        let e = ExprNode::parse("4 + (y1*y2)^2").unwrap();
        let tape = Tape::compile(&e);
        let mut s = Vec::new();
        let v = tape.eval_value(&[1.0, -0.5], &mut s).unwrap();
        assert_relative_eq!(v, 4.25);
    }

    #[test]
    fn rejects_garbage() {
        assert!(ExprNode::parse("2 +* y1").is_err());
        assert!(ExprNode::parse("sin y1").is_err());
        assert!(ExprNode::parse("y0").is_err());
        assert!(ExprNode::parse("tan(y1)").is_err());
        assert!(ExprNode::parse("y1^y2").is_err());
    }

    #[test]
    fn unary_minus() {
        let e = ExprNode::parse("-y1^2 + 1").unwrap();
        let tape = Tape::compile(&e);
        let mut s = Vec::new();
        assert_relative_eq!(tape.eval_value(&[3.0], &mut s).unwrap(), -8.0);
    }

    #[test]
    fn gradient_and_hessian_of_quartic() {
        // V = 0.5 y1^4: grad = 2 y1^3, hess = 6 y1^2.
        let e = ExprNode::parse("0.5*y1^4").unwrap();
        let tape = Tape::compile(&e);
        let mut s = Vec::new();
        let mut g = [0.0];
        let mut h = [0.0];
        let v = tape.eval_jet2(&[1.0], &mut s, &mut g, &mut h).unwrap();
        assert_relative_eq!(v, 0.5);
        assert_relative_eq!(g[0], 2.0);
        assert_relative_eq!(h[0], 6.0);
    }

    #[test]
    fn log_of_non_positive_errors() {
        let e = ExprNode::parse("log(y1)").unwrap();
        let tape = Tape::compile(&e);
        let mut s = Vec::new();
        assert!(tape.eval_value(&[-2.0], &mut s).is_err());
    }

    // Central finite differences as the independent check on the jet
    // propagation rules.
    fn fd_grad(tape: &Tape, y: &[f64], h: f64) -> Vec<f64> {
        let mut s = Vec::new();
        (0..y.len())
            .map(|j| {
                let mut yp = y.to_vec();
                let mut ym = y.to_vec();
                yp[j] += h;
                ym[j] -= h;
                (tape.eval_value(&yp, &mut s).unwrap() - tape.eval_value(&ym, &mut s).unwrap())
                    / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn jets_match_finite_differences_on_test_sweep() {
        let exprs = [
            "0.5*y1^4 + 0.5*y2^4",
            "4 + (y1*y2)^2",
            "2 + sin(y1)",
            "exp(y1) / (3 + cos(y2))",
            "log(2 + y1^2) * sin(y2)",
        ];
        let points: [[f64; 2]; 4] = [[1.0, -0.5], [0.3, 0.8], [-1.2, 0.1], [2.0, -2.0]];
        let h = 1e-5;
        for src in exprs {
            let tape = Tape::compile(&ExprNode::parse(src).unwrap());
            for y in &points {
                let jet = tape.eval_jet2_owned(y).unwrap();
                let fd = fd_grad(&tape, y, h);
                for j in 0..2 {
                    let scale = jet.gradient[j].abs().max(1.0);
                    assert!(
                        (jet.gradient[j] - fd[j]).abs() / scale <= 1e-5,
                        "{src} grad[{j}] at {y:?}: {} vs fd {}",
                        jet.gradient[j],
                        fd[j]
                    );
                }
                // Hessian row j vs finite difference of the gradient.
                let mut s = Vec::new();
                for j in 0..2 {
                    let mut yp = *y;
                    let mut ym = *y;
                    yp[j] += h;
                    ym[j] -= h;
                    let mut gp = [0.0; 2];
                    let mut gm = [0.0; 2];
                    tape.eval_grad(&yp, &mut s, &mut gp).unwrap();
                    tape.eval_grad(&ym, &mut s, &mut gm).unwrap();
                    for i in 0..2 {
                        let fd_h = (gp[i] - gm[i]) / (2.0 * h);
                        let scale = jet.hess(j, i).abs().max(1.0);
                        assert!(
                            (jet.hess(j, i) - fd_h).abs() / scale <= 1e-5,
                            "{src} hess[{j},{i}] at {y:?}: {} vs fd {}",
                            jet.hess(j, i),
                            fd_h
                        );
                    }
                }
            }
        }
    }
}
