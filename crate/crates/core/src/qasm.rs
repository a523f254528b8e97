//! OpenQASM-2-style text form of [`QuantumCircuit`].
//!
//! ```text
//! program   = [ "OPENQASM" real ";" ] { "include" string ";" }
//!             "qreg" ident "[" int "]" ";" { statement }
//! statement = creg | measure | gate [ "(" angle ")" ] qarg { "," qarg } ";"
//! creg      = "creg" ident "[" int "]" ";"
//! measure   = "measure" qarg [ "->" ident "[" int "]" ] ";"
//! qarg      = ident "[" int "]"
//! angle     = [ "-" ] ( number | "pi" [ "/" int ] | int "*" "pi" [ "/" int ] )
//! ```
//!
//! `//` starts a comment running to end of line. A comment of the form
//! `// @meta key=value` carries one circuit metadata entry; the serializer
//! writes metadata this way so that it survives a round trip.
//!
//! Counts are reported in qubit order, so a classical target must use the
//! same index as the measured qubit.
//!
//! Canonical output: metadata lines, `qreg q[N];`, then one lowercase
//! statement per line, LF endings, angles with 17 significant digits.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt::Write;

use crate::circuit::{CircuitError, Gate, GateKind, QuantumCircuit};

const META_PREFIX: &str = " @meta ";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{line}:{column}: {kind}")]
pub struct QasmError {
    pub line: usize,
    pub column: usize,
    pub kind: QasmErrorKind,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QasmErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown gate `{0}`")]
    UnknownGate(String),
    #[error("qubit index {index} out of range for register of size {size}")]
    QubitOutOfRange { index: usize, size: usize },
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(String),
    Real(String),
    Str(String),
    Meta(String),
    Sym(char),
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

fn err(line: usize, column: usize, kind: QasmErrorKind) -> QasmError {
    QasmError { line, column, kind }
}

fn lex(src: &str) -> Result<Vec<Spanned>, QasmError> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'/') {
            let start = i + 2;
            let mut end = start;
            while end < chars.len() && chars[end] != '\n' {
                end += 1;
            }
            let body: String = chars[start..end].iter().collect();
            if let Some(rest) = body.strip_prefix(META_PREFIX) {
                out.push(Spanned {
                    tok: Tok::Meta(rest.trim_end_matches('\r').to_string()),
                    line: tl,
                    column: tc,
                });
            }
            col += end - i;
            i = end;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start;
            out.push(Spanned {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                line: tl,
                column: tc,
            });
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            let mut real = false;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                real = true;
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    real = true;
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            col += i - start;
            let text: String = chars[start..i].iter().collect();
            out.push(Spanned {
                tok: if real { Tok::Real(text) } else { Tok::Int(text) },
                line: tl,
                column: tc,
            });
            continue;
        }
        if c == '"' {
            let start = i + 1;
            let mut end = start;
            while end < chars.len() && chars[end] != '"' && chars[end] != '\n' {
                end += 1;
            }
            if end >= chars.len() || chars[end] != '"' {
                return Err(err(tl, tc, QasmErrorKind::Syntax("unterminated string".into())));
            }
            out.push(Spanned {
                tok: Tok::Str(chars[start..end].iter().collect()),
                line: tl,
                column: tc,
            });
            col += end + 1 - i;
            i = end + 1;
            continue;
        }
        if matches!(c, ';' | '[' | ']' | '(' | ')' | ',' | '*' | '/' | '-' | '+' | '>') {
            out.push(Spanned {
                tok: Tok::Sym(c),
                line: tl,
                column: tc,
            });
            i += 1;
            col += 1;
            continue;
        }
        return Err(err(tl, tc, QasmErrorKind::Syntax(format!("unexpected character {c:?}"))));
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    eof: (usize, usize),
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|s| &s.tok)
    }

    fn here(&self) -> (usize, usize) {
        self.toks.get(self.pos).map(|s| (s.line, s.column)).unwrap_or(self.eof)
    }

    fn fail<T>(&self, kind: QasmErrorKind) -> Result<T, QasmError> {
        let (l, c) = self.here();
        Err(err(l, c, kind))
    }

    fn syntax<T>(&self, expected: &str) -> Result<T, QasmError> {
        let found = match self.peek() {
            None => "end of input".to_string(),
            Some(Tok::Ident(s)) | Some(Tok::Int(s)) | Some(Tok::Real(s)) => format!("`{s}`"),
            Some(Tok::Str(s)) => format!("string {s:?}"),
            Some(Tok::Meta(_)) => "metadata comment".to_string(),
            Some(Tok::Sym(c)) => format!("`{c}`"),
        };
        self.fail(QasmErrorKind::Syntax(format!("expected {expected}, found {found}")))
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|s| s.tok.clone());
        self.pos += 1;
        t
    }

    fn eat_sym(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, c: char) -> Result<(), QasmError> {
        if self.eat_sym(c) {
            Ok(())
        } else {
            self.syntax(&format!("`{c}`"))
        }
    }

    fn expect_ident(&mut self) -> Result<String, QasmError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.syntax("identifier"),
        }
    }

    fn expect_int(&mut self) -> Result<usize, QasmError> {
        match self.peek() {
            Some(Tok::Int(s)) => match s.parse::<usize>() {
                Ok(v) => {
                    self.pos += 1;
                    Ok(v)
                }
                Err(_) => self.fail(QasmErrorKind::Syntax(format!("integer `{s}` too large"))),
            },
            _ => self.syntax("integer"),
        }
    }

    fn is_ident(&self, name: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s == name)
    }

    fn pi_tail(&mut self, scale: f64) -> Result<f64, QasmError> {
        let mut v = scale * PI;
        if self.eat_sym('/') {
            let (l, c) = self.here();
            let d = self.expect_int()?;
            if d == 0 {
                return Err(err(l, c, QasmErrorKind::BadParameter("division by zero".into())));
            }
            v /= d as f64;
        }
        Ok(v)
    }

    fn angle(&mut self) -> Result<f64, QasmError> {
        let (l, c) = self.here();
        let sign = if self.eat_sym('-') { -1.0 } else { 1.0 };
        let v = match self.peek().cloned() {
            Some(Tok::Ident(s)) if s == "pi" => {
                self.pos += 1;
                self.pi_tail(1.0)?
            }
            Some(Tok::Int(s)) => {
                self.pos += 1;
                let n: f64 = s
                    .parse()
                    .map_err(|_| err(l, c, QasmErrorKind::BadParameter(format!("bad number `{s}`"))))?;
                if self.eat_sym('*') {
                    if !self.is_ident("pi") {
                        return self.fail(QasmErrorKind::BadParameter("expected `pi` after `*`".into()));
                    }
                    self.pos += 1;
                    self.pi_tail(n)?
                } else {
                    n
                }
            }
            Some(Tok::Real(s)) => {
                self.pos += 1;
                s.parse::<f64>()
                    .map_err(|_| err(l, c, QasmErrorKind::BadParameter(format!("bad number `{s}`"))))?
            }
            _ => return self.fail(QasmErrorKind::BadParameter("expected a number or pi expression".into())),
        };
        let v = sign * v;
        if !v.is_finite() {
            return Err(err(l, c, QasmErrorKind::BadParameter("angle is not finite".into())));
        }
        if self.peek() != Some(&Tok::Sym(')')) {
            return self.fail(QasmErrorKind::BadParameter(
                "only literals, pi, pi/INT and INT*pi/INT are supported".into(),
            ));
        }
        Ok(v)
    }

    fn qarg(&mut self, reg: &str, size: usize) -> Result<usize, QasmError> {
        let (l, c) = self.here();
        let name = self.expect_ident()?;
        if name != reg {
            return Err(err(l, c, QasmErrorKind::Syntax(format!("unknown register `{name}`"))));
        }
        self.expect_sym('[')?;
        let (il, ic) = self.here();
        let index = self.expect_int()?;
        self.expect_sym(']')?;
        if index >= size {
            return Err(err(il, ic, QasmErrorKind::QubitOutOfRange { index, size }));
        }
        Ok(index)
    }
}

fn parse_meta(text: &str, line: usize, column: usize) -> Result<(String, String), QasmError> {
    let Some((k, v)) = text.split_once('=') else {
        return Err(err(line, column, QasmErrorKind::Syntax("metadata entry needs `key=value`".into())));
    };
    Ok((unescape(k.trim()), unescape(v)))
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '=' => out.push_str("\\e"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('e') => out.push('='),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// Parses the OpenQASM subset into a circuit. Gate order is preserved.
pub fn parse_circuit(text: &str) -> Result<QuantumCircuit, QasmError> {
    let toks = lex(text)?;
    let eof = {
        let lines = text.split('\n').count();
        let last = text.rsplit('\n').next().map(|l| l.chars().count()).unwrap_or(0);
        (lines.max(1), last + 1)
    };
    let mut metadata = Vec::new();
    let mut plain = Vec::with_capacity(toks.len());
    for t in toks {
        match t.tok {
            Tok::Meta(ref m) => metadata.push(parse_meta(m, t.line, t.column)?),
            _ => plain.push(t),
        }
    }
    let mut p = Parser {
        toks: plain,
        pos: 0,
        eof,
    };

    if p.is_ident("OPENQASM") {
        p.pos += 1;
        match p.bump() {
            Some(Tok::Real(_)) | Some(Tok::Int(_)) => {}
            _ => {
                p.pos -= 1;
                return p.syntax("version number");
            }
        }
        p.expect_sym(';')?;
    }
    while p.is_ident("include") {
        p.pos += 1;
        match p.peek() {
            Some(Tok::Str(_)) => p.pos += 1,
            _ => return p.syntax("include path string"),
        }
        p.expect_sym(';')?;
    }

    if !p.is_ident("qreg") {
        return p.syntax("`qreg` declaration");
    }
    p.pos += 1;
    let reg = p.expect_ident()?;
    p.expect_sym('[')?;
    let (sl, sc) = p.here();
    let size = p.expect_int()?;
    p.expect_sym(']')?;
    p.expect_sym(';')?;
    let mut circuit =
        QuantumCircuit::new(size).map_err(|e| err(sl, sc, QasmErrorKind::Circuit(e)))?;
    circuit.metadata.extend(metadata);
    let mut cregs: Vec<(String, usize)> = Vec::new();

    while p.peek().is_some() {
        let (gl, gc) = p.here();
        let name = p.expect_ident()?;
        if name == "qreg" {
            return Err(err(gl, gc, QasmErrorKind::Syntax("only one qreg is supported".into())));
        }
        if name == "creg" {
            let c = p.expect_ident()?;
            if c == reg || cregs.iter().any(|(n, _)| *n == c) {
                return Err(err(gl, gc, QasmErrorKind::Syntax(format!("register `{c}` declared twice"))));
            }
            p.expect_sym('[')?;
            let n = p.expect_int()?;
            p.expect_sym(']')?;
            p.expect_sym(';')?;
            cregs.push((c, n));
            continue;
        }
        let Some(kind) = GateKind::from_name(&name) else {
            return Err(err(gl, gc, QasmErrorKind::UnknownGate(name)));
        };
        let param = if p.eat_sym('(') {
            let a = p.angle()?;
            p.expect_sym(')')?;
            Some(a)
        } else {
            None
        };
        let mut qubits = Vec::with_capacity(2);
        qubits.push(p.qarg(&reg, size)?);
        while p.eat_sym(',') {
            qubits.push(p.qarg(&reg, size)?);
        }
        if kind == GateKind::Measure && p.eat_sym('-') {
            p.expect_sym('>')?;
            let (cl, cc) = p.here();
            let c = p.expect_ident()?;
            let Some(&(_, n)) = cregs.iter().find(|(name, _)| *name == c) else {
                return Err(err(cl, cc, QasmErrorKind::Syntax(format!("unknown register `{c}`"))));
            };
            p.expect_sym('[')?;
            let (il, ic) = p.here();
            let bit = p.expect_int()?;
            p.expect_sym(']')?;
            if bit >= n {
                return Err(err(il, ic, QasmErrorKind::QubitOutOfRange { index: bit, size: n }));
            }
            if bit != qubits[0] {
                return Err(err(il, ic, QasmErrorKind::BadParameter(format!(
                    "measurement of qubit {} must target bit {}",
                    qubits[0], qubits[0]
                ))));
            }
        }
        p.expect_sym(';')?;
        let gate = Gate::new(kind, &qubits, param).map_err(|e| err(gl, gc, e.into()))?;
        circuit.push(gate).map_err(|e| err(gl, gc, e.into()))?;
    }
    Ok(circuit)
}

/// Canonical text form; `parse_circuit` inverts it exactly.
pub fn serialize_circuit(c: &QuantumCircuit) -> String {
    let mut out = String::new();
    for (k, v) in &c.metadata {
        let _ = writeln!(out, "//{META_PREFIX}{}={}", escape(k), escape(v));
    }
    let _ = writeln!(out, "qreg q[{}];", c.num_qubits());
    for g in c.gates() {
        out.push_str(g.kind().name());
        if let Some(p) = g.param() {
            out.push('(');
            out.push_str(&format_angle(p));
            out.push(')');
        }
        let mut sep = ' ';
        for q in g.qubits() {
            let _ = write!(out, "{sep}q[{q}]");
            sep = ',';
        }
        out.push_str(";\n");
    }
    out
}

/// `%.17g`: 17 significant digits, trailing zeros trimmed, exponent form
/// outside `1e-5 <= |x| < 1e17`. Enough digits for a bit-exact round trip.
pub fn format_angle(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..17).contains(&exp) {
        let m = trim_zeros(mantissa);
        return format!("{m}e{exp}");
    }
    let prec = (16 - exp) as usize;
    trim_zeros(&format!("{x:.prec$}")).to_string()
}

// Circuits travel inside JSON documents as their canonical text.
impl serde::Serialize for QuantumCircuit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&serialize_circuit(self))
    }
}

impl<'de> serde::Deserialize<'de> for QuantumCircuit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = <String as serde::Deserialize>::deserialize(d)?;
        parse_circuit(&text).map_err(serde::de::Error::custom)
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
