//! Textual dump of ISA programs, one instruction per line.
//!
//! ```text
//! fn main(1):
//! entry:
//!   stw lr, sp inj dbg=1
//!   add l0, r0, 5 dbg=2
//!   bu @exit dbg=3
//! ```

use std::fmt::{self, Display, Formatter};

use super::*;
use crate::ir::ThreadArg;

impl Display for Reg {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self {
            Reg::Arg(n) => write!(f, "r{n}"),
            Reg::Local(n) => write!(f, "l{n}"),
            Reg::Lr => f.write_str("lr"),
            Reg::Sp => f.write_str("sp"),
        }
    }
}

impl Display for Operand {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) => write!(f, "{v}"),
            Operand::Label(l) | Operand::Func(l) => write!(f, "@{l}"),
            Operand::Pred(p) => f.write_str(p.name()),
        }
    }
}

impl Display for IsaInstr {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        f.write_str(self.op.name())?;
        for (k, o) in self.operands.iter().enumerate() {
            let sep = match (k, self.operands.get(k.wrapping_sub(1))) {
                (0, _) | (_, Some(Operand::Pred(_))) => " ",
                _ => ", ",
            };
            write!(f, "{sep}{o}")?;
        }
        if self.injected {
            f.write_str(" inj")?;
        }
        if let Some(d) = self.dbg {
            write!(f, " dbg={d}")?;
        }
        Ok(())
    }
}

impl Display for IsaProgram {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        if self.entry != DEFAULT_ENTRY {
            writeln!(f, "entry {}", self.entry)?;
        }
        for t in &self.threads {
            let args: Vec<String> = t.args.iter().map(|a| a.to_string()).collect();
            writeln!(f, "thread {}({}) core {}", t.function, args.join(", "), t.core)?;
        }
        for func in &self.functions {
            writeln!(f, "fn {}({}):", func.name, func.params)?;
            for b in &func.blocks {
                writeln!(f, "{}:", b.label)?;
                for i in &b.instrs {
                    writeln!(f, "  {i}")?;
                }
            }
        }
        Ok(())
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> IsaError {
    IsaError::Syntax { line, msg: msg.into() }
}

fn parse_reg(s: &str) -> Option<Reg> {
    match s {
        "lr" => Some(Reg::Lr),
        "sp" => Some(Reg::Sp),
        _ => {
            let (head, num) = s.split_at(1);
            match head {
                "r" => num.parse().ok().filter(|n| *n < ARG_REGS).map(Reg::Arg),
                "l" => num.parse().ok().map(Reg::Local),
                _ => None,
            }
        }
    }
}

fn parse_int(s: &str) -> Option<i32> {
    if let Some(h) = s.strip_prefix("0x") {
        return u32::from_str_radix(h, 16).ok().map(|v| v as i32);
    }
    s.parse::<i32>().ok().or_else(|| s.parse::<u32>().ok().map(|v| v as i32))
}

fn parse_operand(op: Opcode, s: &str, line: usize) -> Result<Operand, IsaError> {
    if let Some(name) = s.strip_prefix('@') {
        return Ok(if op == Opcode::Bl {
            Operand::Func(name.to_string())
        } else {
            Operand::Label(name.to_string())
        });
    }
    if let Some(p) = CmpPred::from_name(s) {
        return Ok(Operand::Pred(p));
    }
    if let Some(r) = parse_reg(s) {
        return Ok(Operand::Reg(r));
    }
    parse_int(s).map(Operand::Imm).ok_or_else(|| syntax(line, format!("bad operand `{s}`")))
}

fn parse_instr(text: &str, line: usize) -> Result<IsaInstr, IsaError> {
    let mut words: Vec<&str> = text.split_whitespace().collect();
    let mut dbg = None;
    let mut injected = false;
    while let Some(last) = words.last() {
        if let Some(d) = last.strip_prefix("dbg=") {
            let v = d.parse().map_err(|_| syntax(line, "bad dbg tag"))?;
            dbg = Some(DebugLoc(v));
        } else if *last == "inj" {
            injected = true;
        } else {
            break;
        }
        words.pop();
    }
    let Some((name, rest)) = words.split_first() else {
        return Err(syntax(line, "missing opcode"));
    };
    let op = Opcode::from_name(name).ok_or_else(|| syntax(line, format!("unknown opcode `{name}`")))?;
    let joined = rest.join(" ");
    let mut operands = Vec::new();
    for part in joined.split([',', ' ']).filter(|s| !s.is_empty()) {
        operands.push(parse_operand(op, part, line)?);
    }
    Ok(IsaInstr { op, operands, dbg, injected })
}

fn parse_thread(rest: &str, line: usize) -> Result<ThreadDecl, IsaError> {
    let bad = || syntax(line, "malformed thread declaration");
    let (func, tail) = rest.split_once('(').ok_or_else(bad)?;
    let (args, tail) = tail.split_once(')').ok_or_else(bad)?;
    let core = tail.trim().strip_prefix("core").ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    let mut parsed = Vec::new();
    for a in args.split(',').map(str::trim).filter(|a| !a.is_empty()) {
        parsed.push(match a.strip_prefix('$') {
            Some(k) => ThreadArg::Input(k.parse().map_err(|_| bad())?),
            None => ThreadArg::Lit(parse_int(a).ok_or_else(bad)?),
        });
    }
    Ok(ThreadDecl { function: func.trim().to_string(), args: parsed, core })
}

/// Parses the dump produced by `Display for IsaProgram`.
pub fn parse_isa(text: &str) -> Result<IsaProgram, IsaError> {
    let mut p = IsaProgram::default();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split(';').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let indented = content.starts_with(' ') || content.starts_with('\t');
        let t = content.trim();
        if indented {
            let b = p
                .functions
                .last_mut()
                .and_then(|f| f.blocks.last_mut())
                .ok_or_else(|| syntax(line, "instruction outside a block"))?;
            b.instrs.push(parse_instr(t, line)?);
        } else if let Some(rest) = t.strip_prefix("fn ") {
            let rest = rest.strip_suffix(':').ok_or_else(|| syntax(line, "expected `:`"))?;
            let (name, params) = rest.split_once('(').ok_or_else(|| syntax(line, "expected `(`"))?;
            let params = params
                .strip_suffix(')')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| syntax(line, "bad parameter count"))?;
            p.functions.push(IsaFunction { name: name.to_string(), params, blocks: vec![] });
        } else if let Some(rest) = t.strip_prefix("entry ") {
            p.entry = rest.trim().to_string();
        } else if let Some(rest) = t.strip_prefix("thread ") {
            p.threads.push(parse_thread(rest, line)?);
        } else if let Some(label) = t.strip_suffix(':') {
            let f = p.functions.last_mut().ok_or_else(|| syntax(line, "label outside a function"))?;
            f.blocks.push(IsaBlock { label: label.to_string(), instrs: vec![] });
        } else {
            return Err(syntax(line, format!("unexpected `{t}`")));
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let src = "\
entry w
thread w(3, $0) core 1
fn w(2):
entry:
  stw lr, sp inj dbg=1
  ldc l0, 70000 inj
  add l1, r0, 5 dbg=2
  bt ult l1, l0, @x dbg=3
  bu @y dbg=3
x:
  fnop
  bl @w dbg=4
  bu @y dbg=5
y:
  retsp dbg=6
";
        let p = parse_isa(src).unwrap();
        assert_eq!(p.to_string(), src);
        assert_eq!(p.functions[0].blocks[0].instrs[3].operands[0], Operand::Pred(CmpPred::Ult));
        assert!(p.functions[0].blocks[0].instrs[1].injected);
        assert_eq!(p.threads[0].core, 1);
        p.validate().unwrap();
    }

    #[test]
    fn unknown_opcode_is_rejected() {
        let err = parse_isa("fn main(0):\nb:\n  jmp @b\n").unwrap_err();
        assert_eq!(err, IsaError::Syntax { line: 3, msg: "unknown opcode `jmp`".into() });
    }
}
