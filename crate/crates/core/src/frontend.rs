//! Parser for the textual kernel DSL (`.dk` files).
//!
//! Grammar:
//!
//! ```text
//! program    := (field_decl | kernel_decl)*
//! field_decl := "field" IDENT ":" ("f32"|"i32") "[" (INT ("," INT)*)? "]" ("needs_grad")? ";"
//! kernel_decl:= "kernel" IDENT "(" (IDENT ":" type ("," IDENT ":" type)*)? ")" block
//! stmt       := for_stmt | if_stmt | let_stmt | assign_stmt | atomic_stmt
//! for_stmt   := ("parallel")? "for" IDENT "in" expr ".." expr block
//! if_stmt    := "if" expr block ("else" block)?
//! let_stmt   := "let" ("mut")? IDENT "=" expr ";"
//! assign_stmt:= IDENT "=" expr ";"  |  IDENT "[" (expr ("," expr)*)? "]" "=" expr ";"
//! atomic_stmt:= IDENT "[" (expr ("," expr)*)? "]" "+=" expr ";"
//! ```
//!
//! Expressions use `+ - * / %`, comparisons `< <= == > >= !=` (yielding i32
//! 0/1), unary `-`, and the builtins `sin cos exp sqrt abs tanh floor min
//! max select i32 f32`. `%` is Euclidean. `#` starts a line comment.
//! Integer literals coerce to f32 where the other operand is f32; all
//! other mixes need an explicit cast.
//!
//! A parallel `for` is permitted only as a top-level statement of a kernel
//! body; inner loops are serial. On success the returned program passes
//! [`crate::ir::validate`] with zero diagnostics and all kernels are at
//! stage `parsed`.

use crate::ir::{BinOp, Expr, FieldDecl, Kernel, Program, ScalarType, SlotId, Stmt, UnOp};
use std::collections::HashMap;

/// Location of a token or diagnostic in a source file. 1-based line and
/// column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceSpan {
    pub file: String,
    pub line: u32,
    pub column: u32,
    pub length: u32,
}

impl std::fmt::Display for SourceSpan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.file, self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub span: SourceSpan,
    pub message: String,
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.span, self.message)
    }
}

impl std::error::Error for ParseError {}

pub fn parse_program(source: &str) -> Result<Program, Vec<ParseError>> {
    parse_program_named(source, "<input>")
}

pub fn parse_program_named(source: &str, file: &str) -> Result<Program, Vec<ParseError>> {
    let tokens = lex(source, file);
    let mut parser =
        Parser { tokens, pos: 0, errors: Vec::new(), program: Program::default() };
    parser.parse();
    if parser.errors.is_empty() {
        Ok(parser.program)
    } else {
        Err(parser.errors)
    }
}

// ── Lexer ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    // keywords
    Field,
    Kernel,
    Parallel,
    For,
    In,
    If,
    Else,
    Let,
    Mut,
    NeedsGrad,
    F32,
    I32,
    // punctuation
    LParen,
    RParen,
    LBracket,
    RBracket,
    LBrace,
    RBrace,
    Comma,
    Colon,
    Semi,
    Assign,
    PlusAssign,
    DotDot,
    Plus,
    Minus,
    Star,
    Slash,
    Percent,
    Lt,
    Le,
    EqEq,
    Gt,
    Ge,
    Ne,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Int(v) => format!("integer `{v}`"),
            Tok::Float(v) => format!("float `{v}`"),
            Tok::Eof => "end of input".into(),
            other => format!("`{}`", token_text(other)),
        }
    }
}

fn token_text(t: &Tok) -> &'static str {
    match t {
        Tok::Field => "field",
        Tok::Kernel => "kernel",
        Tok::Parallel => "parallel",
        Tok::For => "for",
        Tok::In => "in",
        Tok::If => "if",
        Tok::Else => "else",
        Tok::Let => "let",
        Tok::Mut => "mut",
        Tok::NeedsGrad => "needs_grad",
        Tok::F32 => "f32",
        Tok::I32 => "i32",
        Tok::LParen => "(",
        Tok::RParen => ")",
        Tok::LBracket => "[",
        Tok::RBracket => "]",
        Tok::LBrace => "{",
        Tok::RBrace => "}",
        Tok::Comma => ",",
        Tok::Colon => ":",
        Tok::Semi => ";",
        Tok::Assign => "=",
        Tok::PlusAssign => "+=",
        Tok::DotDot => "..",
        Tok::Plus => "+",
        Tok::Minus => "-",
        Tok::Star => "*",
        Tok::Slash => "/",
        Tok::Percent => "%",
        Tok::Lt => "<",
        Tok::Le => "<=",
        Tok::EqEq => "==",
        Tok::Gt => ">",
        Tok::Ge => ">=",
        Tok::Ne => "!=",
        Tok::Eof => "",
        Tok::Ident(_) | Tok::Int(_) | Tok::Float(_) => "",
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    span: SourceSpan,
}

fn lex(source: &str, file: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let bytes = source.as_bytes();
    let mut i = 0;
    let mut line: u32 = 1;
    let mut col: u32 = 1;
    let span = |line, col, len| SourceSpan { file: file.to_string(), line, column: col, length: len };
    while i < bytes.len() {
        let c = bytes[i] as char;
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
        if c == '#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start_col = col;
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len()
                && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
            {
                i += 1;
                col += 1;
            }
            let word = &source[start..i];
            let tok = match word {
                "field" => Tok::Field,
                "kernel" => Tok::Kernel,
                "parallel" => Tok::Parallel,
                "for" => Tok::For,
                "in" => Tok::In,
                "if" => Tok::If,
                "else" => Tok::Else,
                "let" => Tok::Let,
                "mut" => Tok::Mut,
                "needs_grad" => Tok::NeedsGrad,
                "f32" => Tok::F32,
                "i32" => Tok::I32,
                _ => Tok::Ident(word.to_string()),
            };
            out.push(Token { tok, span: span(line, start_col, (i - start) as u32) });
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            let mut is_float = false;
            while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                i += 1;
            }
            // `..` must not be eaten as a decimal point
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1] != b'.' {
                is_float = true;
                i += 1;
                while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                    i += 1;
                }
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                    is_float = true;
                    i = j;
                    while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &source[start..i];
            let len = (i - start) as u32;
            col += len;
            let tok = if is_float {
                Tok::Float(text.parse().unwrap_or(f64::NAN))
            } else {
                match text.parse() {
                    Ok(v) => Tok::Int(v),
                    Err(_) => Tok::Float(text.parse().unwrap_or(f64::NAN)),
                }
            };
            out.push(Token { tok, span: span(line, start_col, len) });
            continue;
        }
        let two = if i + 1 < bytes.len() { &source[i..i + 2] } else { "" };
        let (tok, len) = match two {
            "+=" => (Tok::PlusAssign, 2),
            ".." => (Tok::DotDot, 2),
            "<=" => (Tok::Le, 2),
            ">=" => (Tok::Ge, 2),
            "==" => (Tok::EqEq, 2),
            "!=" => (Tok::Ne, 2),
            _ => {
                let t = match c {
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    '[' => Tok::LBracket,
                    ']' => Tok::RBracket,
                    '{' => Tok::LBrace,
                    '}' => Tok::RBrace,
                    ',' => Tok::Comma,
                    ':' => Tok::Colon,
                    ';' => Tok::Semi,
                    '=' => Tok::Assign,
                    '+' => Tok::Plus,
                    '-' => Tok::Minus,
                    '*' => Tok::Star,
                    '/' => Tok::Slash,
                    '%' => Tok::Percent,
                    '<' => Tok::Lt,
                    '>' => Tok::Gt,
                    _ => {
                        out.push(Token {
                            tok: Tok::Ident(c.to_string()),
                            span: span(line, start_col, 1),
                        });
                        i += 1;
                        col += 1;
                        continue;
                    }
                };
                (t, 1)
            }
        };
        out.push(Token { tok, span: span(line, start_col, len as u32) });
        i += len;
        col += len as u32;
    }
    out.push(Token { tok: Tok::Eof, span: span(line, col, 0) });
    out
}

// ── Parser ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
enum Binding {
    Param(usize, ScalarType),
    Loop(SlotId),
    Local(SlotId, ScalarType, bool),
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    errors: Vec<ParseError>,
    program: Program,
}

/// Marker returned on unrecoverable statement/expression errors; the
/// error itself has already been recorded.
struct Bail;

type PResult<T> = Result<T, Bail>;

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn peek2(&self) -> &Tok {
        &self.tokens[(self.pos + 1).min(self.tokens.len() - 1)].tok
    }

    fn span(&self) -> SourceSpan {
        self.tokens[self.pos].span.clone()
    }

    fn bump(&mut self) -> Tok {
        let t = self.tokens[self.pos].tok.clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.peek() == t {
            self.bump();
            true
        } else {
            false
        }
    }

    fn error_here(&mut self, message: impl Into<String>) -> Bail {
        self.errors.push(ParseError { span: self.span(), message: message.into() });
        Bail
    }

    fn expect(&mut self, t: Tok) -> PResult<()> {
        if self.eat(&t) {
            Ok(())
        } else {
            let msg = format!("expected `{}`, found {}", token_text(&t), self.peek().describe());
            Err(self.error_here(msg))
        }
    }

    fn expect_ident(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            other => {
                let msg = format!("expected identifier, found {}", other.describe());
                Err(self.error_here(msg))
            }
        }
    }

    fn parse(&mut self) {
        loop {
            match self.peek() {
                Tok::Eof => break,
                Tok::Field => {
                    if self.field_decl().is_err() {
                        self.recover_top();
                    }
                }
                Tok::Kernel => {
                    if self.kernel_decl().is_err() {
                        self.recover_top();
                    }
                }
                _ => {
                    let msg = format!(
                        "expected `field` or `kernel`, found {}",
                        self.peek().describe()
                    );
                    self.error_here(msg);
                    self.recover_top();
                }
            }
        }
    }

    fn recover_top(&mut self) {
        loop {
            match self.peek() {
                Tok::Eof | Tok::Field | Tok::Kernel => break,
                _ => {
                    self.bump();
                }
            }
        }
    }

    fn scalar_type(&mut self) -> PResult<ScalarType> {
        match self.peek() {
            Tok::F32 => {
                self.bump();
                Ok(ScalarType::F32)
            }
            Tok::I32 => {
                self.bump();
                Ok(ScalarType::I32)
            }
            other => {
                let msg = format!("expected `f32` or `i32`, found {}", other.describe());
                Err(self.error_here(msg))
            }
        }
    }

    fn field_decl(&mut self) -> PResult<()> {
        self.expect(Tok::Field)?;
        let name = self.expect_ident()?;
        let name_span = self.tokens[self.pos - 1].span.clone();
        self.expect(Tok::Colon)?;
        let elem = self.scalar_type()?;
        self.expect(Tok::LBracket)?;
        let mut shape = Vec::new();
        if !self.eat(&Tok::RBracket) {
            loop {
                match self.peek().clone() {
                    Tok::Int(v) if v >= 1 => {
                        self.bump();
                        shape.push(v as usize);
                    }
                    other => {
                        let msg =
                            format!("expected a positive extent, found {}", other.describe());
                        return Err(self.error_here(msg));
                    }
                }
                if !self.eat(&Tok::Comma) {
                    break;
                }
            }
            self.expect(Tok::RBracket)?;
        }
        let needs_grad = self.eat(&Tok::NeedsGrad);
        self.expect(Tok::Semi)?;
        if self.program.field(&name).is_some() {
            self.errors.push(ParseError {
                span: name_span,
                message: format!("field `{name}` is already declared"),
            });
            return Ok(());
        }
        if needs_grad && elem != ScalarType::F32 {
            self.errors.push(ParseError {
                span: name_span,
                message: format!("needs_grad field `{name}` must be f32"),
            });
        }
        self.program.fields.push(FieldDecl {
            name,
            elem,
            shape,
            needs_grad,
            stop_grad: false,
        });
        Ok(())
    }

    fn kernel_decl(&mut self) -> PResult<()> {
        self.expect(Tok::Kernel)?;
        let name = self.expect_ident()?;
        let name_span = self.tokens[self.pos - 1].span.clone();
        self.expect(Tok::LParen)?;
        let mut params = Vec::new();
        if !self.eat(&Tok::RParen) {
            loop {
                let pname = self.expect_ident()?;
                self.expect(Tok::Colon)?;
                let pty = self.scalar_type()?;
                params.push((pname, pty));
                if !self.eat(&Tok::Comma) {
                    break;
                }
            }
            self.expect(Tok::RParen)?;
        }
        if self.program.kernel(&name).is_some() {
            self.errors.push(ParseError {
                span: name_span,
                message: format!("kernel `{name}` is already defined"),
            });
        }
        let mut lower = KernelLower {
            parser: self,
            kernel: Kernel::new(name, params),
            scopes: vec![HashMap::new()],
        };
        lower.block(true)?;
        let kernel = lower.kernel;
        if self.program.kernel(&kernel.name).is_none() {
            self.program.kernels.push(kernel);
        }
        Ok(())
    }
}

struct KernelLower<'p> {
    parser: &'p mut Parser,
    kernel: Kernel,
    scopes: Vec<HashMap<String, Binding>>,
}

impl<'p> KernelLower<'p> {
    fn lookup(&self, name: &str) -> Option<Binding> {
        for scope in self.scopes.iter().rev() {
            if let Some(b) = scope.get(name) {
                return Some(*b);
            }
        }
        self.kernel
            .params
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| Binding::Param(i, self.kernel.params[i].1))
    }

    fn define(&mut self, name: String, b: Binding) {
        self.scopes.last_mut().unwrap().insert(name, b);
    }

    /// Parses `{ stmt* }` and returns the lowered statements. `top` marks
    /// the kernel's outermost block, the only place a parallel for may
    /// appear.
    fn block(&mut self, top: bool) -> PResult<Vec<Stmt>> {
        self.parser.expect(Tok::LBrace)?;
        self.scopes.push(HashMap::new());
        let mut stmts = Vec::new();
        while !self.parser.eat(&Tok::RBrace) {
            if matches!(self.parser.peek(), Tok::Eof) {
                self.scopes.pop();
                return Err(self.parser.error_here("unexpected end of input in block"));
            }
            match self.stmt(top) {
                Ok(s) => stmts.push(s),
                Err(Bail) => self.recover_stmt(),
            }
        }
        self.scopes.pop();
        if top {
            self.kernel.body = stmts.clone();
        }
        Ok(stmts)
    }

    fn recover_stmt(&mut self) {
        let mut depth = 0usize;
        loop {
            match self.parser.peek() {
                Tok::Eof => break,
                Tok::Semi if depth == 0 => {
                    self.parser.bump();
                    break;
                }
                Tok::LBrace => {
                    depth += 1;
                    self.parser.bump();
                }
                Tok::RBrace => {
                    if depth == 0 {
                        break;
                    }
                    depth -= 1;
                    self.parser.bump();
                }
                _ => {
                    self.parser.bump();
                }
            }
        }
    }

    fn stmt(&mut self, top: bool) -> PResult<Stmt> {
        match self.parser.peek().clone() {
            Tok::Parallel | Tok::For => self.for_stmt(top),
            Tok::If => self.if_stmt(),
            Tok::Let => self.let_stmt(),
            Tok::Ident(name) => self.assign_stmt(name),
            other => {
                let msg = format!("expected a statement, found {}", other.describe());
                Err(self.parser.error_here(msg))
            }
        }
    }

    fn for_stmt(&mut self, top: bool) -> PResult<Stmt> {
        let parallel = self.parser.eat(&Tok::Parallel);
        if parallel && !top {
            self.parser
                .error_here("parallel for is only allowed as the outermost loop of a kernel");
            // keep parsing the loop body as serial
        }
        self.parser.expect(Tok::For)?;
        let var_name = self.parser.expect_ident()?;
        self.parser.expect(Tok::In)?;
        let (lo, lo_ty) = self.expr()?;
        if lo_ty != ScalarType::I32 {
            self.parser.error_here("loop bounds must be i32");
        }
        self.parser.expect(Tok::DotDot)?;
        let (hi, hi_ty) = self.expr()?;
        if hi_ty != ScalarType::I32 {
            self.parser.error_here("loop bounds must be i32");
        }
        let var = self.kernel.fresh_slot();
        self.scopes.push(HashMap::new());
        self.define(var_name, Binding::Loop(var));
        let body = self.block(false)?;
        self.scopes.pop();
        Ok(Stmt::For { var, lo, hi, parallel: parallel && top, reversed: false, body })
    }

    fn if_stmt(&mut self) -> PResult<Stmt> {
        self.parser.expect(Tok::If)?;
        let (cond, cond_ty) = self.expr()?;
        if cond_ty != ScalarType::I32 {
            self.parser.error_here("if condition must be i32 (a comparison)");
        }
        let then_block = self.block(false)?;
        let else_block = if self.parser.eat(&Tok::Else) {
            self.block(false)?
        } else {
            Vec::new()
        };
        Ok(Stmt::If { cond, then_block, else_block })
    }

    fn let_stmt(&mut self) -> PResult<Stmt> {
        self.parser.expect(Tok::Let)?;
        let mutable = self.parser.eat(&Tok::Mut);
        let name = self.parser.expect_ident()?;
        self.parser.expect(Tok::Assign)?;
        let (init, ty) = self.expr()?;
        self.parser.expect(Tok::Semi)?;
        let slot = self.kernel.fresh_slot();
        self.define(name, Binding::Local(slot, ty, mutable));
        Ok(Stmt::LocalDecl { slot, mutable, init })
    }

    fn assign_stmt(&mut self, name: String) -> PResult<Stmt> {
        let name_span = self.parser.span();
        self.parser.bump();
        if self.parser.eat(&Tok::LBracket) {
            // field store / atomic add
            let decl = match self.parser.program.field(&name) {
                Some(d) => d.clone(),
                None => {
                    self.parser.errors.push(ParseError {
                        span: name_span,
                        message: format!("undeclared field `{name}`"),
                    });
                    return Err(Bail);
                }
            };
            let mut idx = Vec::new();
            if !self.parser.eat(&Tok::RBracket) {
                loop {
                    let (e, ty) = self.expr()?;
                    if ty != ScalarType::I32 {
                        self.parser.error_here("field indices must be i32");
                    }
                    idx.push(e);
                    if !self.parser.eat(&Tok::Comma) {
                        break;
                    }
                }
                self.parser.expect(Tok::RBracket)?;
            }
            if idx.len() != decl.shape.len() {
                self.parser.errors.push(ParseError {
                    span: name_span,
                    message: format!(
                        "field `{name}` has {} dimensions but {} indices given",
                        decl.shape.len(),
                        idx.len()
                    ),
                });
            }
            let atomic = match self.parser.peek() {
                Tok::Assign => {
                    self.parser.bump();
                    false
                }
                Tok::PlusAssign => {
                    self.parser.bump();
                    true
                }
                other => {
                    let msg = format!("expected `=` or `+=`, found {}", other.describe());
                    return Err(self.parser.error_here(msg));
                }
            };
            let (value, vty) = self.expr()?;
            let value = self.coerce(value, vty, decl.elem)?;
            self.parser.expect(Tok::Semi)?;
            if atomic {
                Ok(Stmt::AtomicAdd { field: name, grad: false, idx, value })
            } else {
                Ok(Stmt::FieldStore { field: name, grad: false, idx, value })
            }
        } else {
            // local assignment
            self.parser.expect(Tok::Assign)?;
            let (value, vty) = self.expr()?;
            self.parser.expect(Tok::Semi)?;
            match self.lookup(&name) {
                Some(Binding::Local(slot, ty, mutable)) => {
                    if !mutable {
                        self.parser.errors.push(ParseError {
                            span: name_span,
                            message: format!("cannot assign to immutable local `{name}`"),
                        });
                    }
                    let value = self.coerce(value, vty, ty)?;
                    Ok(Stmt::LocalAssign { slot, value })
                }
                Some(Binding::Loop(_)) => {
                    self.parser.errors.push(ParseError {
                        span: name_span,
                        message: format!("cannot assign to loop variable `{name}`"),
                    });
                    Err(Bail)
                }
                Some(Binding::Param(..)) => {
                    self.parser.errors.push(ParseError {
                        span: name_span,
                        message: format!("cannot assign to parameter `{name}`"),
                    });
                    Err(Bail)
                }
                None => {
                    let msg = if self.parser.program.field(&name).is_some() {
                        format!("field `{name}` must be assigned through an index list")
                    } else {
                        format!("undeclared identifier `{name}`")
                    };
                    self.parser.errors.push(ParseError { span: name_span, message: msg });
                    Err(Bail)
                }
            }
        }
    }

    // ── Expressions ──────────────────────────────────────────────────

    fn expr(&mut self) -> PResult<(Expr, ScalarType)> {
        let lhs = self.add_expr()?;
        let op = match self.parser.peek() {
            Tok::Lt => Some((BinOp::CmpLt, false, false)),
            Tok::Le => Some((BinOp::CmpLe, false, false)),
            Tok::EqEq => Some((BinOp::CmpEq, false, false)),
            Tok::Gt => Some((BinOp::CmpLt, true, false)),
            Tok::Ge => Some((BinOp::CmpLe, true, false)),
            Tok::Ne => Some((BinOp::CmpEq, false, true)),
            _ => None,
        };
        let Some((op, swap, negate)) = op else { return Ok(lhs) };
        self.parser.bump();
        let rhs = self.add_expr()?;
        let (a, b, _) = self.unify(lhs, rhs)?;
        let (a, b) = if swap { (b, a) } else { (a, b) };
        let cmp = Expr::bin(op, a, b);
        let e = if negate {
            Expr::bin(BinOp::Sub, Expr::i(1), cmp)
        } else {
            cmp
        };
        Ok((e, ScalarType::I32))
    }

    fn add_expr(&mut self) -> PResult<(Expr, ScalarType)> {
        let mut lhs = self.mul_expr()?;
        loop {
            let op = match self.parser.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.parser.bump();
            let rhs = self.mul_expr()?;
            let (a, b, ty) = self.unify(lhs, rhs)?;
            lhs = (Expr::bin(op, a, b), ty);
        }
        Ok(lhs)
    }

    fn mul_expr(&mut self) -> PResult<(Expr, ScalarType)> {
        let mut lhs = self.unary_expr()?;
        loop {
            let op = match self.parser.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                Tok::Percent => BinOp::Mod,
                _ => break,
            };
            self.parser.bump();
            let rhs = self.unary_expr()?;
            let (a, b, ty) = self.unify(lhs, rhs)?;
            lhs = (Expr::bin(op, a, b), ty);
        }
        Ok(lhs)
    }

    fn unary_expr(&mut self) -> PResult<(Expr, ScalarType)> {
        if self.parser.eat(&Tok::Minus) {
            let (e, ty) = self.unary_expr()?;
            // fold literal negation so dumps round-trip
            let e = match e {
                Expr::ConstF(v) => Expr::ConstF(-v),
                Expr::ConstI(v) => Expr::ConstI(-v),
                other => Expr::un(UnOp::Neg, other),
            };
            return Ok((e, ty));
        }
        self.primary_expr()
    }

    fn primary_expr(&mut self) -> PResult<(Expr, ScalarType)> {
        match self.parser.peek().clone() {
            Tok::Int(v) => {
                self.parser.bump();
                Ok((Expr::i(v), ScalarType::I32))
            }
            Tok::Float(v) => {
                self.parser.bump();
                Ok((Expr::f(v), ScalarType::F32))
            }
            Tok::LParen => {
                self.parser.bump();
                let e = self.expr()?;
                self.parser.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::F32 => {
                self.parser.bump();
                self.parser.expect(Tok::LParen)?;
                let (e, _) = self.expr()?;
                self.parser.expect(Tok::RParen)?;
                Ok((Expr::Cast { to: ScalarType::F32, a: Box::new(e) }, ScalarType::F32))
            }
            Tok::I32 => {
                self.parser.bump();
                self.parser.expect(Tok::LParen)?;
                let (e, _) = self.expr()?;
                self.parser.expect(Tok::RParen)?;
                Ok((Expr::Cast { to: ScalarType::I32, a: Box::new(e) }, ScalarType::I32))
            }
            Tok::Ident(name) => {
                if matches!(self.parser.peek2(), Tok::LParen) {
                    if let Some(b) = builtin(&name) {
                        return self.builtin_call(name, b);
                    }
                }
                self.parser.bump();
                let name_span = self.parser.tokens[self.parser.pos - 1].span.clone();
                if self.parser.eat(&Tok::LBracket) {
                    let decl = match self.parser.program.field(&name) {
                        Some(d) => d.clone(),
                        None => {
                            self.parser.errors.push(ParseError {
                                span: name_span,
                                message: format!("undeclared field `{name}`"),
                            });
                            return Err(Bail);
                        }
                    };
                    let mut idx = Vec::new();
                    if !self.parser.eat(&Tok::RBracket) {
                        loop {
                            let (e, ty) = self.expr()?;
                            if ty != ScalarType::I32 {
                                self.parser.error_here("field indices must be i32");
                            }
                            idx.push(e);
                            if !self.parser.eat(&Tok::Comma) {
                                break;
                            }
                        }
                        self.parser.expect(Tok::RBracket)?;
                    }
                    if idx.len() != decl.shape.len() {
                        self.parser.errors.push(ParseError {
                            span: name_span,
                            message: format!(
                                "field `{name}` has {} dimensions but {} indices given",
                                decl.shape.len(),
                                idx.len()
                            ),
                        });
                    }
                    Ok((
                        Expr::FieldLoad { field: name, grad: false, idx },
                        decl.elem,
                    ))
                } else {
                    match self.lookup(&name) {
                        Some(Binding::Param(i, ty)) => Ok((Expr::Param(i), ty)),
                        Some(Binding::Loop(slot)) => Ok((Expr::LoopVar(slot), ScalarType::I32)),
                        Some(Binding::Local(slot, ty, _)) => Ok((Expr::LocalRead(slot), ty)),
                        None => {
                            let msg = if self.parser.program.field(&name).is_some() {
                                format!("field `{name}` must be read through an index list")
                            } else {
                                format!("undeclared identifier `{name}`")
                            };
                            self.parser.errors.push(ParseError { span: name_span, message: msg });
                            Err(Bail)
                        }
                    }
                }
            }
            other => {
                let msg = format!("expected an expression, found {}", other.describe());
                Err(self.parser.error_here(msg))
            }
        }
    }

    fn builtin_call(&mut self, name: String, b: Builtin) -> PResult<(Expr, ScalarType)> {
        self.parser.bump(); // ident
        self.parser.expect(Tok::LParen)?;
        let mut args = Vec::new();
        if !self.parser.eat(&Tok::RParen) {
            loop {
                args.push(self.expr()?);
                if !self.parser.eat(&Tok::Comma) {
                    break;
                }
            }
            self.parser.expect(Tok::RParen)?;
        }
        let arity = match b {
            Builtin::Un(_) => 1,
            Builtin::Bin(_) => 2,
            Builtin::Select => 3,
        };
        if args.len() != arity {
            let msg = format!("`{name}` takes {arity} arguments, got {}", args.len());
            return Err(self.parser.error_here(msg));
        }
        match b {
            Builtin::Un(op) => {
                let (e, ty) = args.pop().unwrap();
                match op {
                    UnOp::Abs => Ok((Expr::un(op, e), ty)),
                    _ => {
                        let e = self.coerce(e, ty, ScalarType::F32)?;
                        Ok((Expr::un(op, e), ScalarType::F32))
                    }
                }
            }
            Builtin::Bin(op) => {
                let rhs = args.pop().unwrap();
                let lhs = args.pop().unwrap();
                let (a, bb, ty) = self.unify(lhs, rhs)?;
                Ok((Expr::bin(op, a, bb), ty))
            }
            Builtin::Select => {
                let b_arm = args.pop().unwrap();
                let a_arm = args.pop().unwrap();
                let (cond, cty) = args.pop().unwrap();
                if cty != ScalarType::I32 {
                    self.parser.error_here("select condition must be i32");
                }
                let (a, bb, ty) = self.unify(a_arm, b_arm)?;
                Ok((Expr::select(cond, a, bb), ty))
            }
        }
    }

    /// Brings both operands to one type, coercing integer literals toward
    /// f32; anything else mixed is an error.
    fn unify(
        &mut self,
        (a, ta): (Expr, ScalarType),
        (b, tb): (Expr, ScalarType),
    ) -> PResult<(Expr, Expr, ScalarType)> {
        if ta == tb {
            return Ok((a, b, ta));
        }
        match (ta, tb) {
            (ScalarType::F32, ScalarType::I32) => {
                let b = self.coerce(b, tb, ScalarType::F32)?;
                Ok((a, b, ScalarType::F32))
            }
            (ScalarType::I32, ScalarType::F32) => {
                let a = self.coerce(a, ta, ScalarType::F32)?;
                Ok((a, b, ScalarType::F32))
            }
            _ => unreachable!(),
        }
    }

    fn coerce(&mut self, e: Expr, from: ScalarType, to: ScalarType) -> PResult<Expr> {
        if from == to {
            return Ok(e);
        }
        match (&e, to) {
            (Expr::ConstI(v), ScalarType::F32) => Ok(Expr::f(*v as f64)),
            _ => Err(self.parser.error_here(format!(
                "type mismatch: expected {to}, got {from} (use `{to}(...)` to cast)"
            ))),
        }
    }
}

#[derive(Clone, Copy)]
enum Builtin {
    Un(UnOp),
    Bin(BinOp),
    Select,
}

fn builtin(name: &str) -> Option<Builtin> {
    Some(match name {
        "sin" => Builtin::Un(UnOp::Sin),
        "cos" => Builtin::Un(UnOp::Cos),
        "exp" => Builtin::Un(UnOp::Exp),
        "sqrt" => Builtin::Un(UnOp::Sqrt),
        "abs" => Builtin::Un(UnOp::Abs),
        "tanh" => Builtin::Un(UnOp::Tanh),
        "floor" => Builtin::Un(UnOp::Floor),
        "min" => Builtin::Bin(BinOp::Min),
        "max" => Builtin::Bin(BinOp::Max),
        "select" => Builtin::Select,
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{self, dump_program, Stage};

    #[test]
    fn empty_source_gives_empty_program() {
        let p = parse_program("").unwrap();
        assert!(p.fields.is_empty());
        assert!(p.kernels.is_empty());
    }

    #[test]
    fn mass_spring_time_integrate_parses() {
        let src = "
field x: f32[128, 3] needs_grad;
field v: f32[128, 3] needs_grad;
field force: f32[128, 3] needs_grad;

kernel time_integrate(t: i32, dt: f32, damping: f32) {
  parallel for i in 0..3 {
    let s = exp(-dt * damping);
    v[t, i] = s * v[t - 1, i] + dt * force[t, i];
    x[t, i] = x[t - 1, i] + dt * v[t, i];
  }
}
";
        let p = parse_program(src).unwrap();
        assert!(ir::validate(&p).is_empty());
        let k = p.kernel("time_integrate").unwrap();
        assert_eq!(k.stage, Stage::Parsed);
        let Stmt::For { parallel, .. } = &k.body[0] else { panic!("expected for") };
        assert!(parallel);
        let text = ir::dump_ir(k, Stage::Parsed).unwrap();
        assert!(text.contains("exp(-dt * damping)"));
    }

    #[test]
    fn syntax_error_reports_span() {
        let src = "field x: f32[1];\nkernel f() { x[0] = ; }";
        let errs = parse_program(src).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].span.line, 2);
        assert!(errs[0].message.contains("expected an expression"));
    }

    #[test]
    fn undeclared_field_is_an_error() {
        let errs = parse_program("kernel f() { z[0] = 1.0; }").unwrap_err();
        assert!(errs.iter().any(|e| e.message.contains("`z`")));
    }

    #[test]
    fn parallel_inner_loop_rejected() {
        let src = "kernel f() { for i in 0..4 { parallel for j in 0..4 { } } }";
        let errs = parse_program(src).unwrap_err();
        assert!(errs[0].message.contains("outermost"));
    }

    #[test]
    fn int_literals_coerce_to_f32() {
        let src = "
field y: f32[4] needs_grad;
kernel f(b: f32) {
  parallel for i in 0..4 { y[i] = 2 * b; }
}
";
        let p = parse_program(src).unwrap();
        assert!(ir::validate(&p).is_empty());
    }

    #[test]
    fn mixed_non_literal_types_need_cast() {
        let src = "field y: f32[4];\nkernel f(n: i32) { y[0] = n; }";
        let errs = parse_program(src).unwrap_err();
        assert!(errs[0].message.contains("cast"));
        let src = "field y: f32[4];\nkernel f(n: i32) { y[0] = f32(n); }";
        assert!(parse_program(src).is_ok());
    }

    #[test]
    fn zero_dim_field_uses_empty_index() {
        let src = "
field loss: f32[] needs_grad;
kernel f() { loss[] = 1.0; }
";
        let p = parse_program(src).unwrap();
        assert!(ir::validate(&p).is_empty());
        assert_eq!(p.field("loss").unwrap().shape.len(), 0);
    }

    #[test]
    fn dump_round_trips_on_parsed_stage() {
        let src = "
field x: f32[8, 2] needs_grad;
field n: i32[8];
field loss: f32[] needs_grad;

kernel f(t: i32, dt: f32) {
  parallel for i in 0..8 {
    let a = n[i];
    let mut w = x[t % 8, a] + 1e-4;
    if w > 0.5 {
      w = w * 2.0;
    } else {
      w = -w;
    }
    for j in 0..2 {
      loss[] += select(j == 0, w, min(w, dt)) * 0.5;
    }
    x[i, a] = sqrt(abs(w));
  }
}
";
        let p1 = parse_program(src).unwrap();
        let dumped = dump_program(&p1);
        let p2 = parse_program(&dumped).unwrap();
        assert_eq!(p1, p2);
        // and the dump of the reparse is byte-identical
        assert_eq!(dumped, dump_program(&p2));
    }
}
