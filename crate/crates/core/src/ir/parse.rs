//! Recursive-descent parser for the EIR text format.
//!
//! Newlines are not significant: every opcode has a fixed operand shape, so
//! the token stream alone delimits instructions.

use super::*;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Local(String),
    Input(usize),
    Int(i64),
    Punct(char),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(src: &str) -> Result<Vec<Token>, IrError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let err = |line, col, msg: String| IrError::Syntax { line, col, msg };
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
        if c == ';' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let tok = if c == '%' || c == '$' {
            i += 1;
            while i < chars.len() && is_ident_char(chars[i]) {
                i += 1;
            }
            let name: String = chars[start + 1..i].iter().collect();
            if name.is_empty() {
                return Err(err(tl, tc, format!("expected a name after `{c}`")));
            }
            if c == '%' {
                Tok::Local(name)
            } else {
                Tok::Input(name.parse().map_err(|_| err(tl, tc, format!("bad input index `${name}`")))?)
            }
        } else if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            i += 1;
            while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            let value = if let Some(hex) = text.strip_prefix("0x") {
                i64::from_str_radix(hex, 16)
            } else if let Some(hex) = text.strip_prefix("-0x") {
                i64::from_str_radix(hex, 16).map(|v| -v)
            } else {
                text.parse()
            };
            Tok::Int(value.map_err(|_| err(tl, tc, format!("bad integer `{text}`")))?)
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < chars.len() && is_ident_char(chars[i]) {
                i += 1;
            }
            Tok::Ident(chars[start..i].iter().collect())
        } else if "(){}[],:=!".contains(c) {
            i += 1;
            Tok::Punct(c)
        } else {
            return Err(err(tl, tc, format!("unexpected character `{c}`")));
        };
        col += i - start;
        out.push(Token { tok, line: tl, col: tc });
    }
    out.push(Token { tok: Tok::Eof, line, col });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.toks[(self.pos + n).min(self.toks.len() - 1)].tok
    }

    fn here(&self) -> (usize, usize) {
        let t = &self.toks[self.pos];
        (t.line, t.col)
    }

    fn error<T>(&self, msg: impl Into<String>) -> Result<T, IrError> {
        let (line, col) = self.here();
        Err(IrError::Syntax { line, col, msg: msg.into() })
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if *self.peek() == Tok::Punct(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, c: char) -> Result<(), IrError> {
        if self.eat_punct(c) {
            Ok(())
        } else {
            self.error(format!("expected `{c}`, found {}", describe(self.peek())))
        }
    }

    fn expect_ident(&mut self) -> Result<String, IrError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            other => self.error(format!("expected identifier, found {}", describe(&other))),
        }
    }

    fn expect_int(&mut self) -> Result<i64, IrError> {
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(v)
            }
            other => self.error(format!("expected integer, found {}", describe(&other))),
        }
    }

    fn expect_i32(&mut self) -> Result<i32, IrError> {
        let v = self.expect_int()?;
        // Accept the full u32 range so hex masks like 0xFFFFFFFF read naturally.
        if v >= i32::MIN as i64 && v <= u32::MAX as i64 {
            Ok(v as u32 as i32)
        } else {
            self.error(format!("integer {v} does not fit in 32 bits"))
        }
    }

    fn expect_local(&mut self) -> Result<String, IrError> {
        match self.peek().clone() {
            Tok::Local(s) => {
                self.bump();
                Ok(s)
            }
            other => self.error(format!("expected %name, found {}", describe(&other))),
        }
    }

    fn value(&mut self) -> Result<Value, IrError> {
        match self.peek().clone() {
            Tok::Local(s) => {
                self.bump();
                Ok(Value::Ssa(s))
            }
            Tok::Int(_) => Ok(Value::Const(self.expect_i32()?)),
            other => self.error(format!("expected value, found {}", describe(&other))),
        }
    }

    fn program(&mut self) -> Result<EirProgram, IrError> {
        let mut functions = Vec::new();
        let mut threads = Vec::new();
        let mut entry = None;
        loop {
            match self.peek().clone() {
                Tok::Eof => break,
                Tok::Ident(kw) if kw == "fn" => {
                    self.bump();
                    functions.push(self.function()?);
                }
                Tok::Ident(kw) if kw == "entry" => {
                    self.bump();
                    entry = Some(self.expect_ident()?);
                }
                Tok::Ident(kw) if kw == "thread" => {
                    self.bump();
                    threads.push(self.thread()?);
                }
                other => return self.error(format!("expected `fn`, `entry` or `thread`, found {}", describe(&other))),
            }
        }
        Ok(EirProgram { entry: entry.unwrap_or_else(|| DEFAULT_ENTRY.to_string()), threads, functions })
    }

    fn thread(&mut self) -> Result<ThreadDecl, IrError> {
        let function = self.expect_ident()?;
        self.expect_punct('(')?;
        let mut args = Vec::new();
        if !self.eat_punct(')') {
            loop {
                match self.peek().clone() {
                    Tok::Input(k) => {
                        self.bump();
                        args.push(ThreadArg::Input(k));
                    }
                    Tok::Int(_) => args.push(ThreadArg::Lit(self.expect_i32()?)),
                    other => return self.error(format!("expected literal or $input, found {}", describe(&other))),
                }
                if self.eat_punct(')') {
                    break;
                }
                self.expect_punct(',')?;
            }
        }
        let mut core = 0;
        if matches!(self.peek(), Tok::Ident(s) if s == "core") {
            self.bump();
            let c = self.expect_int()?;
            if !(0..=u32::MAX as i64).contains(&c) {
                return self.error("core index out of range");
            }
            core = c as u32;
        }
        Ok(ThreadDecl { function, args, core })
    }

    fn function(&mut self) -> Result<EirFunction, IrError> {
        let name = self.expect_ident()?;
        self.expect_punct('(')?;
        let mut params = Vec::new();
        if !self.eat_punct(')') {
            loop {
                params.push(self.expect_local()?);
                if self.eat_punct(')') {
                    break;
                }
                self.expect_punct(',')?;
            }
        }
        self.expect_punct('{')?;
        let mut blocks = Vec::new();
        while !self.eat_punct('}') {
            blocks.push(self.block()?);
        }
        Ok(EirFunction { name, params, blocks })
    }

    fn at_label(&self) -> bool {
        matches!(self.peek(), Tok::Ident(_)) && *self.peek_at(1) == Tok::Punct(':')
    }

    fn block(&mut self) -> Result<EirBlock, IrError> {
        if !self.at_label() {
            return self.error(format!("expected block label, found {}", describe(self.peek())));
        }
        let label = self.expect_ident()?;
        self.expect_punct(':')?;
        let mut bound = None;
        if *self.peek() == Tok::Punct('!') && matches!(self.peek_at(1), Tok::Ident(s) if s == "bound") {
            self.bump();
            self.bump();
            let k = self.expect_int()?;
            if !(0..=u32::MAX as i64).contains(&k) {
                return self.error("loop bound out of range");
            }
            bound = Some(k as u32);
        }
        let mut instrs = Vec::new();
        while !self.at_label() && *self.peek() != Tok::Punct('}') {
            if *self.peek() == Tok::Eof {
                return self.error("unexpected end of input inside function");
            }
            instrs.push(self.instr()?);
        }
        Ok(EirBlock { label, bound, instrs })
    }

    fn instr(&mut self) -> Result<EirInstr, IrError> {
        let result = if let Tok::Local(name) = self.peek().clone() {
            self.bump();
            self.expect_punct('=')?;
            Some(name)
        } else {
            None
        };
        let (line, col) = self.here();
        let op = match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                s
            }
            other => return self.error(format!("expected opcode, found {}", describe(&other))),
        };
        let kind = match op.as_str() {
            "const" => InstKind::Const(self.expect_i32()?),
            "icmp" => {
                let pname = self.expect_ident()?;
                let pred = match CmpPred::from_name(&pname) {
                    Some(p) => p,
                    None => return self.error(format!("unknown icmp predicate `{pname}`")),
                };
                let a = self.value()?;
                self.expect_punct(',')?;
                let b = self.value()?;
                InstKind::Icmp(pred, a, b)
            }
            "phi" => {
                let mut incs = Vec::new();
                loop {
                    self.expect_punct('[')?;
                    let pred = self.expect_ident()?;
                    self.expect_punct(',')?;
                    let v = self.value()?;
                    self.expect_punct(']')?;
                    incs.push((pred, v));
                    if !self.eat_punct(',') {
                        break;
                    }
                }
                InstKind::Phi(incs)
            }
            "br" => InstKind::Br(self.expect_ident()?),
            "brcond" => {
                let c = self.value()?;
                self.expect_punct(',')?;
                let t = self.expect_ident()?;
                self.expect_punct(',')?;
                let f = self.expect_ident()?;
                InstKind::BrCond(c, t, f)
            }
            "switch" => {
                let v = self.value()?;
                self.expect_punct(',')?;
                let default = self.expect_ident()?;
                let mut cases = Vec::new();
                while self.eat_punct(',') {
                    self.expect_punct('[')?;
                    let k = self.expect_i32()?;
                    self.expect_punct(',')?;
                    let t = self.expect_ident()?;
                    self.expect_punct(']')?;
                    cases.push((k, t));
                }
                InstKind::Switch(v, default, cases)
            }
            "call" => {
                let callee = self.expect_ident()?;
                self.expect_punct('(')?;
                let mut args = Vec::new();
                if !self.eat_punct(')') {
                    loop {
                        args.push(self.value()?);
                        if self.eat_punct(')') {
                            break;
                        }
                        self.expect_punct(',')?;
                    }
                }
                InstKind::Call(callee, args)
            }
            "ret" => match self.peek() {
                Tok::Local(_) | Tok::Int(_) => InstKind::Ret(Some(self.value()?)),
                _ => InstKind::Ret(None),
            },
            "load" => InstKind::Load(self.value()?),
            "store" => {
                let v = self.value()?;
                self.expect_punct(',')?;
                InstKind::Store(v, self.value()?)
            }
            "chan_send" => {
                let ch = self.value()?;
                self.expect_punct(',')?;
                InstKind::ChanSend(ch, self.value()?)
            }
            "chan_recv" => InstKind::ChanRecv(self.value()?),
            "emit" => {
                let id = self.expect_int()?;
                if !(0..=u32::MAX as i64).contains(&id) {
                    return self.error("emit id out of range");
                }
                InstKind::Emit(id as u32)
            }
            other => match BinOp::from_name(other) {
                Some(bop) => {
                    let a = self.value()?;
                    self.expect_punct(',')?;
                    let b = self.value()?;
                    InstKind::Bin(bop, a, b)
                }
                None => return Err(IrError::UnknownOpcode { line, col, op: other.to_string() }),
            },
        };
        let mut dbg = None;
        if *self.peek() == Tok::Punct('!') && matches!(self.peek_at(1), Tok::Ident(s) if s == "dbg") {
            self.bump();
            self.bump();
            let d = self.expect_int()?;
            if !(1..=u32::MAX as i64).contains(&d) {
                return self.error("debug location must be a positive integer");
            }
            dbg = Some(DebugLoc(d as u32));
        }
        match (kind.requires_result(), &result) {
            (Some(true), None) => {
                return Err(IrError::Syntax { line, col, msg: format!("`{op}` must define a result") })
            }
            (Some(false), Some(_)) => {
                return Err(IrError::Syntax { line, col, msg: format!("`{op}` does not produce a result") })
            }
            _ => {}
        }
        Ok(EirInstr { result, kind, dbg })
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Local(s) => format!("`%{s}`"),
        Tok::Input(k) => format!("`${k}`"),
        Tok::Int(v) => format!("`{v}`"),
        Tok::Punct(c) => format!("`{c}`"),
        Tok::Eof => "end of input".to_string(),
    }
}

/// Parses EIR text and checks the structural invariants (terminators,
/// branch targets, single definitions, phi shape, call arity).
pub fn parse_eir(text: &str) -> Result<EirProgram, IrError> {
    let toks = lex(text)?;
    let mut p = Parser { toks, pos: 0 };
    let prog = p.program()?;
    validate_structure(&prog)?;
    Ok(prog)
}
