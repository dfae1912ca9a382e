use std::fmt::{self, Display, Formatter};

use super::*;

impl Display for Value {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self {
            Value::Ssa(s) => write!(f, "%{s}"),
            Value::Const(c) => write!(f, "{c}"),
        }
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
}

impl Display for InstKind {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self {
            InstKind::Const(c) => write!(f, "const {c}"),
            InstKind::Bin(op, a, b) => write!(f, "{} {a}, {b}", op.name()),
            InstKind::Icmp(p, a, b) => write!(f, "icmp {} {a}, {b}", p.name()),
            InstKind::Phi(incs) => {
                let parts: Vec<String> = incs.iter().map(|(l, v)| format!("[{l}, {v}]")).collect();
                write!(f, "phi {}", parts.join(", "))
            }
            InstKind::Br(t) => write!(f, "br {t}"),
            InstKind::BrCond(c, t, e) => write!(f, "brcond {c}, {t}, {e}"),
            InstKind::Switch(v, d, cases) => {
                write!(f, "switch {v}, {d}")?;
                for (k, t) in cases {
                    write!(f, ", [{k}, {t}]")?;
                }
                Ok(())
            }
            InstKind::Call(callee, args) => write!(f, "call {callee}({})", join(args)),
            InstKind::Ret(None) => write!(f, "ret"),
            InstKind::Ret(Some(v)) => write!(f, "ret {v}"),
            InstKind::Load(a) => write!(f, "load {a}"),
            InstKind::Store(v, a) => write!(f, "store {v}, {a}"),
            InstKind::ChanSend(c, v) => write!(f, "chan_send {c}, {v}"),
            InstKind::ChanRecv(c) => write!(f, "chan_recv {c}"),
            InstKind::Emit(id) => write!(f, "emit {id}"),
        }
    }
}

impl Display for EirInstr {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        if let Some(r) = &self.result {
            write!(f, "%{r} = ")?;
        }
        write!(f, "{}", self.kind)?;
        if let Some(d) = self.dbg {
            write!(f, " !dbg {d}")?;
        }
        Ok(())
    }
}

impl Display for EirFunction {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        let params: Vec<String> = self.params.iter().map(|p| format!("%{p}")).collect();
        writeln!(f, "fn {}({}) {{", self.name, params.join(", "))?;
        for b in &self.blocks {
            match b.bound {
                Some(k) => writeln!(f, "{}: !bound {k}", b.label)?,
                None => writeln!(f, "{}:", b.label)?,
            }
            for i in &b.instrs {
                writeln!(f, "  {i}")?;
            }
        }
        writeln!(f, "}}")
    }
}

impl Display for ThreadArg {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self {
            ThreadArg::Lit(v) => write!(f, "{v}"),
            ThreadArg::Input(k) => write!(f, "${k}"),
        }
    }
}

impl Display for EirProgram {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        let mut header = false;
        if self.entry != DEFAULT_ENTRY {
            writeln!(f, "entry {}", self.entry)?;
            header = true;
        }
        for t in &self.threads {
            writeln!(f, "thread {}({}) core {}", t.function, join(&t.args), t.core)?;
            header = true;
        }
        for (i, func) in self.functions.iter().enumerate() {
            if i > 0 || header {
                writeln!(f)?;
            }
            write!(f, "{func}")?;
        }
        Ok(())
    }
}
