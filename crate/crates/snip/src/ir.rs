//! The intermediate representation: instructions, programs, memory layout,
//! the textual program format and structural validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

pub type Value = u64;

pub const DEFAULT_WIDTH: u32 = 8;
pub const STACK: &str = "stk";

/// Index into [`Program::regs`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Reg(pub u32);

/// Index into [`Program::labels`] / [`Program::code`]. Ordered by position in the listing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Pc(pub u32);

/// Index into [`Program::mems`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Var(pub u32);

impl Reg {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl Pc {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl Var {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Lt,
    Eq,
    And,
    Or,
}

impl Op {
    pub const ALL: [Op; 7] = [Op::Add, Op::Sub, Op::Mul, Op::Lt, Op::Eq, Op::And, Op::Or];

    pub fn name(self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Lt => "lt",
            Op::Eq => "eq",
            Op::And => "and",
            Op::Or => "or",
        }
    }

    pub fn from_name(s: &str) -> Option<Op> {
        Op::ALL.iter().copied().find(|op| op.name() == s)
    }

    /// Comparisons encode truth as 0, so `if` (which takes its first
    /// successor on 0) follows the comparison directly.
    pub fn apply(self, a: Value, b: Value, width: u32) -> Value {
        let r = match self {
            Op::Add => a.wrapping_add(b),
            Op::Sub => a.wrapping_sub(b),
            Op::Mul => a.wrapping_mul(b),
            Op::Lt => u64::from(a >= b),
            Op::Eq => u64::from(a != b),
            Op::And => a & b,
            Op::Or => a | b,
        };
        r & mask(width)
    }
}

pub fn mask(width: u32) -> Value {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    High,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MemVar {
    pub name: String,
    pub size: u64,
    pub level: Level,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Addr {
    Reg(Reg),
    Const(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Instr {
    Exit,
    Nop { next: Pc },
    Asgn { dst: Reg, lhs: Reg, op: Op, rhs: Reg, next: Pc },
    Load { dst: Reg, var: Var, addr: Addr, next: Pc },
    Store { var: Var, addr: Addr, src: Reg, next: Pc },
    If { cond: Reg, on_true: Pc, on_false: Pc },
    Sfence { next: Pc },
    Slh { reg: Reg, next: Pc },
    Move { dst: Reg, src: Reg, next: Pc },
    Fill { dst: Reg, slot: u64, next: Pc },
    Spill { slot: u64, src: Reg, next: Pc },
}

impl Instr {
    pub fn successors(&self) -> Vec<Pc> {
        match *self {
            Instr::Exit => vec![],
            Instr::If { on_true, on_false, .. } => vec![on_true, on_false],
            Instr::Nop { next }
            | Instr::Asgn { next, .. }
            | Instr::Load { next, .. }
            | Instr::Store { next, .. }
            | Instr::Sfence { next }
            | Instr::Slh { next, .. }
            | Instr::Move { next, .. }
            | Instr::Fill { next, .. }
            | Instr::Spill { next, .. } => vec![next],
        }
    }

    /// The single fall-through successor, `None` for `ret` and `if`.
    pub fn next(&self) -> Option<Pc> {
        match self {
            Instr::Exit | Instr::If { .. } => None,
            _ => self.successors().first().copied(),
        }
    }

    pub fn map_successors(&self, mut f: impl FnMut(Pc) -> Pc) -> Instr {
        let mut i = *self;
        match &mut i {
            Instr::Exit => {}
            Instr::If { on_true, on_false, .. } => {
                *on_true = f(*on_true);
                *on_false = f(*on_false);
            }
            Instr::Nop { next }
            | Instr::Asgn { next, .. }
            | Instr::Load { next, .. }
            | Instr::Store { next, .. }
            | Instr::Sfence { next }
            | Instr::Slh { next, .. }
            | Instr::Move { next, .. }
            | Instr::Fill { next, .. }
            | Instr::Spill { next, .. } => *next = f(*next),
        }
        i
    }

    pub fn is_shuffle(&self) -> bool {
        matches!(
            self,
            Instr::Move { .. } | Instr::Fill { .. } | Instr::Spill { .. } | Instr::Slh { .. } | Instr::Sfence { .. }
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Instr::Exit => "ret",
            Instr::Nop { .. } => "nop",
            Instr::Asgn { .. } => "asgn",
            Instr::Load { .. } => "load",
            Instr::Store { .. } => "store",
            Instr::If { .. } => "if",
            Instr::Sfence { .. } => "sfence",
            Instr::Slh { .. } => "slh",
            Instr::Move { .. } => "move",
            Instr::Fill { .. } => "fill",
            Instr::Spill { .. } => "spill",
        }
    }
}

/// Registers read and written by an instruction.
pub fn uses_defs(i: &Instr) -> (BTreeSet<Reg>, BTreeSet<Reg>) {
    let mut uses = BTreeSet::new();
    let mut defs = BTreeSet::new();
    match *i {
        Instr::Exit | Instr::Nop { .. } | Instr::Sfence { .. } => {}
        Instr::Asgn { dst, lhs, rhs, .. } => {
            uses.insert(lhs);
            uses.insert(rhs);
            defs.insert(dst);
        }
        Instr::Load { dst, addr, .. } => {
            if let Addr::Reg(b) = addr {
                uses.insert(b);
            }
            defs.insert(dst);
        }
        Instr::Store { addr, src, .. } => {
            if let Addr::Reg(b) = addr {
                uses.insert(b);
            }
            uses.insert(src);
        }
        Instr::If { cond, .. } => {
            uses.insert(cond);
        }
        Instr::Slh { reg, .. } => {
            uses.insert(reg);
            defs.insert(reg);
        }
        Instr::Move { dst, src, .. } => {
            uses.insert(src);
            defs.insert(dst);
        }
        Instr::Fill { dst, .. } => {
            defs.insert(dst);
        }
        Instr::Spill { src, .. } => {
            uses.insert(src);
        }
    }
    (uses, defs)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    /// Register names, sorted.
    pub regs: Vec<String>,
    pub mems: Vec<MemVar>,
    /// Labels in listing order; `code[i]` sits at `labels[i]`.
    pub labels: Vec<String>,
    pub code: Vec<Instr>,
    pub entry: Pc,
    pub width: u32,
}

impl Program {
    pub fn instr(&self, pc: Pc) -> &Instr {
        &self.code[pc.idx()]
    }

    pub fn label(&self, pc: Pc) -> &str {
        &self.labels[pc.idx()]
    }

    pub fn reg_name(&self, r: Reg) -> &str {
        &self.regs[r.idx()]
    }

    pub fn var_name(&self, v: Var) -> &str {
        &self.mems[v.idx()].name
    }

    pub fn pc_of(&self, label: &str) -> Option<Pc> {
        self.labels.iter().position(|l| l == label).map(|i| Pc(i as u32))
    }

    pub fn reg_of(&self, name: &str) -> Option<Reg> {
        self.regs.binary_search_by(|r| r.as_str().cmp(name)).ok().map(|i| Reg(i as u32))
    }

    pub fn var_of(&self, name: &str) -> Option<Var> {
        self.mems.iter().position(|m| m.name == name).map(|i| Var(i as u32))
    }

    pub fn stack(&self) -> Option<Var> {
        self.var_of(STACK)
    }

    pub fn pcs(&self) -> impl Iterator<Item = Pc> {
        (0..self.code.len() as u32).map(Pc)
    }

    pub fn reg_ids(&self) -> impl Iterator<Item = Reg> {
        (0..self.regs.len() as u32).map(Reg)
    }

    pub fn var_ids(&self) -> impl Iterator<Item = Var> {
        (0..self.mems.len() as u32).map(Var)
    }

    pub fn size(&self, v: Var) -> u64 {
        self.mems[v.idx()].size
    }

    pub fn mask(&self) -> Value {
        mask(self.width)
    }

    /// Offset of the first cell of `v` in the flattened memory.
    pub fn cell_base(&self, v: Var) -> usize {
        self.mems[..v.idx()].iter().map(|m| m.size as usize).sum()
    }

    pub fn cell_index(&self, v: Var, off: u64) -> usize {
        self.cell_base(v) + off as usize
    }

    pub fn total_cells(&self) -> usize {
        self.mems.iter().map(|m| m.size as usize).sum()
    }

    /// All `(var, offset)` pairs in layout order.
    pub fn cells(&self) -> Vec<(Var, u64)> {
        self.var_ids().flat_map(|v| (0..self.size(v)).map(move |o| (v, o))).collect()
    }

    pub fn predecessors(&self) -> Vec<Vec<Pc>> {
        let mut preds = vec![Vec::new(); self.code.len()];
        for pc in self.pcs() {
            for s in self.instr(pc).successors() {
                if s.idx() < preds.len() && !preds[s.idx()].contains(&pc) {
                    preds[s.idx()].push(pc);
                }
            }
        }
        preds
    }

    pub fn with_width(mut self, width: u32) -> Program {
        self.width = width;
        self
    }

    /// Renders one instruction in the textual format (without the label).
    pub fn fmt_instr(&self, i: &Instr) -> String {
        let r = |x: Reg| self.reg_name(x).to_string();
        let l = |x: Pc| self.label(x).to_string();
        let a = |x: Addr| match x {
            Addr::Reg(b) => r(b),
            Addr::Const(n) => format!("#{n}"),
        };
        match *i {
            Instr::Exit => "ret".into(),
            Instr::Nop { next } => format!("nop -> {}", l(next)),
            Instr::Asgn { dst, lhs, op, rhs, next } => {
                format!("{} = {} {} {} -> {}", r(dst), r(lhs), op.name(), r(rhs), l(next))
            }
            Instr::Load { dst, var, addr, next } => {
                format!("load {} <- {}[{}] -> {}", r(dst), self.var_name(var), a(addr), l(next))
            }
            Instr::Store { var, addr, src, next } => {
                format!("store {}[{}] <- {} -> {}", self.var_name(var), a(addr), r(src), l(next))
            }
            Instr::If { cond, on_true, on_false } => {
                format!("if {} ? {} : {}", r(cond), l(on_true), l(on_false))
            }
            Instr::Sfence { next } => format!("sfence -> {}", l(next)),
            Instr::Slh { reg, next } => format!("slh {} -> {}", r(reg), l(next)),
            Instr::Move { dst, src, next } => format!("move {} <- {} -> {}", r(dst), r(src), l(next)),
            Instr::Fill { dst, slot, next } => format!("fill {} <- {STACK}#{slot} -> {}", r(dst), l(next)),
            Instr::Spill { slot, src, next } => format!("spill {STACK}#{slot} <- {} -> {}", r(src), l(next)),
        }
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_program(self))
    }
}

pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    for m in &p.mems {
        let lvl = match m.level {
            Level::Low => "low",
            Level::High => "high",
        };
        out.push_str(&format!("mem {} {} {}\n", m.name, m.size, lvl));
    }
    out.push_str(&format!("entry {}\n", p.label(p.entry)));
    for pc in p.pcs() {
        out.push_str(&format!("{}: {}\n", p.label(pc), p.fmt_instr(p.instr(pc))));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{line}:{col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

impl ParseError {
    pub fn new(line: usize, col: usize, msg: impl Into<String>) -> Self {
        ParseError { line, col, msg: msg.into() }
    }
}

/// A name together with the position it was written at (1-based, 0 when synthesized).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Name {
    pub text: String,
    pub line: usize,
    pub col: usize,
}

impl Name {
    pub fn synth(s: impl Into<String>) -> Name {
        Name { text: s.into(), line: 0, col: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError::new(self.line, self.col, msg)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RawAddr {
    Reg(Name),
    Const(u64, Name),
}

/// Instruction with unresolved names, as written in a listing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RawInstr {
    Exit,
    Nop { next: Name },
    Asgn { dst: Name, lhs: Name, op: Op, rhs: Name, next: Name },
    Load { dst: Name, var: Name, addr: RawAddr, next: Name },
    Store { var: Name, addr: RawAddr, src: Name, next: Name },
    If { cond: Name, on_true: Name, on_false: Name },
    Sfence { next: Name },
    Slh { reg: Name, next: Name },
    Move { dst: Name, src: Name, next: Name },
    Fill { dst: Name, slot: u64, slot_pos: Name, next: Name },
    Spill { slot: u64, slot_pos: Name, src: Name, next: Name },
}

impl RawInstr {
    fn regs(&self) -> Vec<&Name> {
        match self {
            RawInstr::Exit | RawInstr::Nop { .. } | RawInstr::Sfence { .. } => vec![],
            RawInstr::Asgn { dst, lhs, rhs, .. } => vec![dst, lhs, rhs],
            RawInstr::Load { dst, addr, .. } => match addr {
                RawAddr::Reg(b) => vec![dst, b],
                RawAddr::Const(..) => vec![dst],
            },
            RawInstr::Store { addr, src, .. } => match addr {
                RawAddr::Reg(b) => vec![b, src],
                RawAddr::Const(..) => vec![src],
            },
            RawInstr::If { cond, .. } => vec![cond],
            RawInstr::Slh { reg, .. } => vec![reg],
            RawInstr::Move { dst, src, .. } => vec![dst, src],
            RawInstr::Fill { dst, .. } => vec![dst],
            RawInstr::Spill { src, .. } => vec![src],
        }
    }
}

/// Assembles programs from names; used by the parser and by transformations
/// that emit fresh code.
#[derive(Clone, Debug, Default)]
pub struct ProgramBuilder {
    mems: Vec<(MemVar, Name)>,
    entry: Option<Name>,
    instrs: Vec<(Name, RawInstr)>,
    width: Option<u32>,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mem(&mut self, name: &str, size: u64, level: Level) -> &mut Self {
        let var = MemVar { name: name.to_string(), size, level };
        self.mems.push((var, Name::synth(name)));
        self
    }

    pub fn entry(&mut self, label: &str) -> &mut Self {
        self.entry = Some(Name::synth(label));
        self
    }

    pub fn width(&mut self, w: u32) -> &mut Self {
        self.width = Some(w);
        self
    }

    pub fn raw(&mut self, label: Name, i: RawInstr) -> &mut Self {
        self.instrs.push((label, i));
        self
    }

    /// Adds an instruction given in the textual syntax, e.g. `"a = b add c -> 2"`.
    pub fn instr(&mut self, label: &str, text: &str) -> Result<&mut Self, ParseError> {
        let toks = tokenize(text, 0)?;
        let mut c = Cursor { toks: &toks, pos: 0, line: 0 };
        let i = parse_instr(&mut c)?;
        c.end()?;
        self.instrs.push((Name::synth(label), i));
        Ok(self)
    }

    pub fn build(&self) -> Result<Program, ParseError> {
        let mut mems: Vec<MemVar> = Vec::new();
        for (m, pos) in &self.mems {
            if mems.iter().any(|x| x.name == m.name) {
                return Err(pos.err(format!("duplicate memory variable `{}`", m.name)));
            }
            if m.size == 0 {
                return Err(pos.err(format!("memory variable `{}` has size 0", m.name)));
            }
            if m.name == STACK && m.level != Level::Low {
                return Err(pos.err("`stk` must be low"));
            }
            mems.push(m.clone());
        }
        let mut labels: Vec<String> = Vec::new();
        for (l, _) in &self.instrs {
            if labels.contains(&l.text) {
                return Err(l.err(format!("duplicate label `{}`", l.text)));
            }
            labels.push(l.text.clone());
        }
        let entry_name = self.entry.clone().ok_or_else(|| ParseError::new(0, 0, "missing entry declaration"))?;
        let pc = |n: &Name| -> Result<Pc, ParseError> {
            labels
                .iter()
                .position(|l| *l == n.text)
                .map(|i| Pc(i as u32))
                .ok_or_else(|| n.err(format!("unknown successor `{}`", n.text)))
        };
        let entry = labels
            .iter()
            .position(|l| *l == entry_name.text)
            .map(|i| Pc(i as u32))
            .ok_or_else(|| entry_name.err(format!("unknown entry label `{}`", entry_name.text)))?;

        let mut reg_names: BTreeSet<String> = BTreeSet::new();
        for (_, i) in &self.instrs {
            for r in i.regs() {
                reg_names.insert(r.text.clone());
            }
        }
        let regs: Vec<String> = reg_names.into_iter().collect();
        let reg = |n: &Name| Reg(regs.binary_search(&n.text).expect("interned") as u32);
        let var = |n: &Name| -> Result<Var, ParseError> {
            mems.iter()
                .position(|m| m.name == n.text)
                .map(|i| Var(i as u32))
                .ok_or_else(|| n.err(format!("unknown memory variable `{}`", n.text)))
        };
        let addr = |v: Var, a: &RawAddr| -> Result<Addr, ParseError> {
            match a {
                RawAddr::Reg(b) => Ok(Addr::Reg(reg(b))),
                RawAddr::Const(n, pos) => {
                    if *n >= mems[v.idx()].size {
                        Err(pos.err(format!(
                            "const address out of bounds: #{n} not below size {} of `{}`",
                            mems[v.idx()].size,
                            mems[v.idx()].name
                        )))
                    } else {
                        Ok(Addr::Const(*n))
                    }
                }
            }
        };
        let slot = |n: u64, pos: &Name| -> Result<u64, ParseError> {
            match mems.iter().find(|m| m.name == STACK) {
                None => Err(pos.err("stack slot used but `stk` is not declared")),
                Some(m) if n >= m.size => Err(pos.err(format!("stack slot {n} out of bounds (size {})", m.size))),
                Some(_) => Ok(n),
            }
        };

        let mut code = Vec::with_capacity(self.instrs.len());
        for (_, raw) in &self.instrs {
            let i = match raw {
                RawInstr::Exit => Instr::Exit,
                RawInstr::Nop { next } => Instr::Nop { next: pc(next)? },
                RawInstr::Asgn { dst, lhs, op, rhs, next } => Instr::Asgn {
                    dst: reg(dst),
                    lhs: reg(lhs),
                    op: *op,
                    rhs: reg(rhs),
                    next: pc(next)?,
                },
                RawInstr::Load { dst, var: v, addr: a, next } => {
                    let v = var(v)?;
                    Instr::Load { dst: reg(dst), var: v, addr: addr(v, a)?, next: pc(next)? }
                }
                RawInstr::Store { var: v, addr: a, src, next } => {
                    let v = var(v)?;
                    Instr::Store { var: v, addr: addr(v, a)?, src: reg(src), next: pc(next)? }
                }
                RawInstr::If { cond, on_true, on_false } => Instr::If {
                    cond: reg(cond),
                    on_true: pc(on_true)?,
                    on_false: pc(on_false)?,
                },
                RawInstr::Sfence { next } => Instr::Sfence { next: pc(next)? },
                RawInstr::Slh { reg: r, next } => Instr::Slh { reg: reg(r), next: pc(next)? },
                RawInstr::Move { dst, src, next } => Instr::Move { dst: reg(dst), src: reg(src), next: pc(next)? },
                RawInstr::Fill { dst, slot: n, slot_pos, next } => Instr::Fill {
                    dst: reg(dst),
                    slot: slot(*n, slot_pos)?,
                    next: pc(next)?,
                },
                RawInstr::Spill { slot: n, slot_pos, src, next } => Instr::Spill {
                    slot: slot(*n, slot_pos)?,
                    src: reg(src),
                    next: pc(next)?,
                },
            };
            code.push(i);
        }
        Ok(Program { regs, mems, labels, code, entry, width: self.width.unwrap_or(DEFAULT_WIDTH) })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Word(String),
    Sym(&'static str),
}

#[derive(Clone, Debug)]
struct Spanned {
    tok: Tok,
    col: usize,
}

fn is_word(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn tokenize(line: &str, lineno: usize) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        // `#` opens a comment unless it is glued to a preceding `[` or word, as in `buf[#3]` and `stk#0`.
        if c == '#' && (i == 0 || chars[i - 1].is_whitespace()) {
            break;
        }
        if is_word(c) {
            let start = i;
            while i < chars.len() && is_word(chars[i]) {
                i += 1;
            }
            out.push(Spanned { tok: Tok::Word(chars[start..i].iter().collect()), col });
            continue;
        }
        let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
        let sym = match two.as_str() {
            "->" => Some("->"),
            "<-" => Some("<-"),
            _ => None,
        };
        if let Some(s) = sym {
            out.push(Spanned { tok: Tok::Sym(s), col });
            i += 2;
            continue;
        }
        let s = match c {
            ':' => ":",
            '=' => "=",
            '[' => "[",
            ']' => "]",
            '#' => "#",
            '?' => "?",
            _ => return Err(ParseError::new(lineno, col, format!("unexpected character `{c}`"))),
        };
        out.push(Spanned { tok: Tok::Sym(s), col });
        i += 1;
    }
    Ok(out)
}

struct Cursor<'a> {
    toks: &'a [Spanned],
    pos: usize,
    line: usize,
}

impl Cursor<'_> {
    fn col(&self) -> usize {
        self.toks.get(self.pos).map(|t| t.col).unwrap_or_else(|| self.toks.last().map(|t| t.col + 1).unwrap_or(1))
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError::new(self.line, self.col(), msg)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn word(&mut self, what: &str) -> Result<Name, ParseError> {
        match self.toks.get(self.pos) {
            Some(Spanned { tok: Tok::Word(w), col }) => {
                self.pos += 1;
                Ok(Name { text: w.clone(), line: self.line, col: *col })
            }
            _ => Err(self.err(format!("expected {what}"))),
        }
    }

    fn reg(&mut self) -> Result<Name, ParseError> {
        let n = self.word("register")?;
        if !n.text.starts_with(|c: char| c.is_ascii_alphabetic() || c == '_') {
            return Err(n.err(format!("`{}` is not a register name", n.text)));
        }
        Ok(n)
    }

    fn int(&mut self) -> Result<(u64, Name), ParseError> {
        let n = self.word("integer")?;
        let v = n.text.parse::<u64>().map_err(|_| n.err(format!("`{}` is not an integer", n.text)))?;
        Ok((v, n))
    }

    fn sym(&mut self, s: &'static str) -> Result<(), ParseError> {
        if self.peek() == Some(&Tok::Sym(s)) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected `{s}`")))
        }
    }

    fn keyword(&mut self, k: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::Word(w)) if w == k => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err(format!("expected `{k}`"))),
        }
    }

    fn end(&self) -> Result<(), ParseError> {
        if self.pos < self.toks.len() {
            Err(self.err("trailing input"))
        } else {
            Ok(())
        }
    }

    fn next_label(&mut self) -> Result<Name, ParseError> {
        self.sym("->")?;
        self.word("successor label")
    }

    fn addr(&mut self) -> Result<RawAddr, ParseError> {
        self.sym("[")?;
        let a = if self.peek() == Some(&Tok::Sym("#")) {
            self.pos += 1;
            let (v, n) = self.int()?;
            RawAddr::Const(v, n)
        } else {
            RawAddr::Reg(self.reg()?)
        };
        self.sym("]")?;
        Ok(a)
    }

    fn slot(&mut self) -> Result<(u64, Name), ParseError> {
        self.keyword(STACK)?;
        self.sym("#")?;
        self.int()
    }
}

fn parse_instr(c: &mut Cursor<'_>) -> Result<RawInstr, ParseError> {
    if c.toks.get(c.pos + 1).map(|t| &t.tok) == Some(&Tok::Sym("=")) {
        let dst = c.reg()?;
        c.sym("=")?;
        let lhs = c.reg()?;
        let opn = c.word("operator")?;
        let op = Op::from_name(&opn.text).ok_or_else(|| opn.err(format!("unknown operator `{}`", opn.text)))?;
        let rhs = c.reg()?;
        let next = c.next_label()?;
        return Ok(RawInstr::Asgn { dst, lhs, op, rhs, next });
    }
    let kw = c.word("instruction")?;
    let i = match kw.text.as_str() {
        "ret" => RawInstr::Exit,
        "nop" => RawInstr::Nop { next: c.next_label()? },
        "load" => {
            let dst = c.reg()?;
            c.sym("<-")?;
            let var = c.word("memory variable")?;
            let addr = c.addr()?;
            RawInstr::Load { dst, var, addr, next: c.next_label()? }
        }
        "store" => {
            let var = c.word("memory variable")?;
            let addr = c.addr()?;
            c.sym("<-")?;
            let src = c.reg()?;
            RawInstr::Store { var, addr, src, next: c.next_label()? }
        }
        "if" => {
            let cond = c.reg()?;
            c.sym("?")?;
            let on_true = c.word("label")?;
            c.sym(":")?;
            let on_false = c.word("label")?;
            RawInstr::If { cond, on_true, on_false }
        }
        "sfence" => RawInstr::Sfence { next: c.next_label()? },
        "slh" => {
            let reg = c.reg()?;
            RawInstr::Slh { reg, next: c.next_label()? }
        }
        "move" => {
            let dst = c.reg()?;
            c.sym("<-")?;
            let src = c.reg()?;
            RawInstr::Move { dst, src, next: c.next_label()? }
        }
        "fill" => {
            let dst = c.reg()?;
            c.sym("<-")?;
            let (slot, slot_pos) = c.slot()?;
            RawInstr::Fill { dst, slot, slot_pos, next: c.next_label()? }
        }
        "spill" => {
            let (slot, slot_pos) = c.slot()?;
            c.sym("<-")?;
            let src = c.reg()?;
            RawInstr::Spill { slot, slot_pos, src, next: c.next_label()? }
        }
        other => return Err(kw.err(format!("unknown instruction `{other}`"))),
    };
    Ok(i)
}

pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut b = ProgramBuilder::new();
    let mut entry_seen = false;
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let toks = tokenize(line, lineno)?;
        if toks.is_empty() {
            continue;
        }
        let mut c = Cursor { toks: &toks, pos: 0, line: lineno };
        match &toks[0].tok {
            Tok::Word(w) if w == "mem" && toks.get(1).map(|t| &t.tok) != Some(&Tok::Sym(":")) => {
                c.pos = 1;
                let name = c.word("memory variable name")?;
                let (size, _) = c.int()?;
                let lvl = c.word("`low` or `high`")?;
                let level = match lvl.text.as_str() {
                    "low" => Level::Low,
                    "high" => Level::High,
                    _ => return Err(lvl.err("expected `low` or `high`")),
                };
                c.end()?;
                b.mems.push((MemVar { name: name.text.clone(), size, level }, name));
            }
            Tok::Word(w) if w == "entry" && toks.get(1).map(|t| &t.tok) != Some(&Tok::Sym(":")) => {
                if entry_seen {
                    return Err(ParseError::new(lineno, 1, "duplicate entry declaration"));
                }
                entry_seen = true;
                c.pos = 1;
                let l = c.word("entry label")?;
                c.end()?;
                b.entry = Some(l);
            }
            _ => {
                let label = c.word("label")?;
                c.sym(":")?;
                let i = parse_instr(&mut c)?;
                c.end()?;
                b.instrs.push((label, i));
            }
        }
    }
    b.build()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub pc: Option<String>,
    pub msg: String,
}

/// Structural checks; empty iff the program satisfies every IR invariant.
pub fn validate_program(p: &Program) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let n = p.code.len();
    let label = |pc: usize| p.labels.get(pc).cloned();
    if p.entry.idx() >= n {
        out.push(Diagnostic { pc: None, msg: format!("entry {} does not exist", p.entry.0) });
    }
    if p.labels.len() != n {
        out.push(Diagnostic { pc: None, msg: "label table and code differ in length".into() });
    }
    let mut seen = BTreeSet::new();
    for (i, l) in p.labels.iter().enumerate() {
        if !seen.insert(l) {
            out.push(Diagnostic { pc: label(i), msg: format!("duplicate label `{l}`") });
        }
    }
    let mut names = BTreeSet::new();
    for m in &p.mems {
        if !names.insert(&m.name) {
            out.push(Diagnostic { pc: None, msg: format!("duplicate memory variable `{}`", m.name) });
        }
        if m.size == 0 {
            out.push(Diagnostic { pc: None, msg: format!("memory variable `{}` has size 0", m.name) });
        }
        if m.name == STACK && m.level != Level::Low {
            out.push(Diagnostic { pc: None, msg: "`stk` must be low".into() });
        }
    }
    if p.width == 0 || p.width > 64 {
        out.push(Diagnostic { pc: None, msg: format!("unsupported width {}", p.width) });
    }
    let stk = p.stack().map(|v| p.size(v));
    for (i, instr) in p.code.iter().enumerate() {
        let here = label(i);
        let mut diag = |msg: String| out.push(Diagnostic { pc: here.clone(), msg });
        for s in instr.successors() {
            if s.idx() >= n {
                diag(format!("successor {} does not exist", s.0));
            }
        }
        let (u, d) = uses_defs(instr);
        if u.iter().chain(d.iter()).any(|r| r.idx() >= p.regs.len()) {
            diag("register out of range".into());
        }
        match *instr {
            Instr::Load { var, addr, .. } | Instr::Store { var, addr, .. } => {
                if var.idx() >= p.mems.len() {
                    diag(format!("memory variable {} does not exist", var.0));
                } else if let Addr::Const(c) = addr {
                    if c >= p.size(var) {
                        diag(format!("const address #{c} out of bounds of `{}`", p.var_name(var)));
                    }
                }
            }
            Instr::Fill { slot, .. } | Instr::Spill { slot, .. } => match stk {
                None => diag("stack slot used but `stk` is not declared".into()),
                Some(sz) if slot >= sz => diag(format!("stack slot {slot} out of bounds (size {sz})")),
                _ => {}
            },
            _ => {}
        }
    }
    out
}

/// Non-fatal observations, currently only "no `ret` reachable from the entry".
pub fn warnings(p: &Program) -> Vec<Diagnostic> {
    let mut seen = vec![false; p.code.len()];
    let mut stack = vec![p.entry];
    let mut exit = false;
    while let Some(pc) = stack.pop() {
        if pc.idx() >= seen.len() || seen[pc.idx()] {
            continue;
        }
        seen[pc.idx()] = true;
        if matches!(p.instr(pc), Instr::Exit) {
            exit = true;
        }
        stack.extend(p.instr(pc).successors());
    }
    if exit {
        vec![]
    } else {
        vec![Diagnostic { pc: None, msg: "no `ret` reachable from the entry".into() }]
    }
}

/// Reverse postorder of the pcs reachable from the entry.
pub fn reverse_postorder(p: &Program) -> Vec<Pc> {
    let mut seen = vec![false; p.code.len()];
    let mut post = Vec::new();
    let mut stack: Vec<(Pc, usize)> = vec![(p.entry, 0)];
    seen[p.entry.idx()] = true;
    while let Some((pc, i)) = stack.pop() {
        let succ = p.instr(pc).successors();
        if i < succ.len() {
            stack.push((pc, i + 1));
            let s = succ[i];
            if !seen[s.idx()] {
                seen[s.idx()] = true;
                stack.push((s, 0));
            }
        } else {
            post.push(pc);
        }
    }
    post.reverse();
    post
}

/// Parses `reg <name> <int>` / `cell <var> <off> <int>` lines into explicit
/// assignments; everything unlisted stays 0.
pub fn parse_assignments(p: &Program, text: &str) -> Result<(BTreeMap<Reg, Value>, BTreeMap<(Var, u64), Value>), ParseError> {
    let mut regs = BTreeMap::new();
    let mut cells = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let toks = tokenize(line, lineno)?;
        if toks.is_empty() {
            continue;
        }
        let mut c = Cursor { toks: &toks, pos: 0, line: lineno };
        let kw = c.word("`reg` or `cell`")?;
        let check = |v: u64, pos: &Name| -> Result<Value, ParseError> {
            if v > p.mask() {
                Err(pos.err(format!("value {v} does not fit in {} bits", p.width)))
            } else {
                Ok(v)
            }
        };
        match kw.text.as_str() {
            "reg" => {
                let r = c.reg()?;
                let (v, vpos) = c.int()?;
                c.end()?;
                let id = p.reg_of(&r.text).ok_or_else(|| r.err(format!("unknown register `{}`", r.text)))?;
                regs.insert(id, check(v, &vpos)?);
            }
            "cell" => {
                let var = c.word("memory variable")?;
                let (off, opos) = c.int()?;
                let (v, vpos) = c.int()?;
                c.end()?;
                let id = p.var_of(&var.text).ok_or_else(|| var.err(format!("unknown memory variable `{}`", var.text)))?;
                if off >= p.size(id) {
                    return Err(opos.err(format!("offset {off} out of bounds of `{}`", var.text)));
                }
                cells.insert((id, off), check(v, &vpos)?);
            }
            _ => return Err(kw.err("expected `reg` or `cell`")),
        }
    }
    Ok((regs, cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    const DCE: &str = "\
mem secret 1 high
mem buf 2 low
entry 1
1: if c ? 2 : 3
2: load a <- buf[i] -> 3
3: a = z sub z -> 4
4: ret
";

    #[test]
    fn minimal_program() {
        let p = parse_program("entry L0\nL0: ret").unwrap();
        assert_eq!(p.label(p.entry), "L0");
        assert_eq!(p.code, vec![Instr::Exit]);
        assert_eq!(print_program(&p), "entry L0\nL0: ret\n");
    }

    #[test]
    fn dce_listing_prints_four_instructions() {
        let p = parse_program(DCE).unwrap();
        let text = print_program(&p);
        assert_eq!(text.lines().filter(|l| l.contains(": ")).count(), 4);
        assert_eq!(parse_program(&text).unwrap(), p);
    }

    #[test]
    fn const_address_out_of_bounds() {
        let e = parse_program("mem buf 8 low\nentry 1\n1: load a <- buf[#9] -> 2\n2: ret").unwrap_err();
        assert!(e.msg.contains("const address out of bounds"), "{e}");
        assert_eq!((e.line, e.col), (3, 19));
    }

    #[test]
    fn duplicate_label_and_unknown_successor() {
        let e = parse_program("entry 1\n1: nop -> 2\n1: ret").unwrap_err();
        assert!(e.msg.contains("duplicate label"));
        assert_eq!(e.line, 3);
        let e = parse_program("entry 1\n1: nop -> 7").unwrap_err();
        assert!(e.msg.contains("unknown successor"));
        assert_eq!((e.line, e.col), (2, 11));
    }

    #[test]
    fn comments_and_hash_forms() {
        let p = parse_program(
            "# header\nmem stk 2 low  # the stack\nentry a\na: spill stk#1 <- x -> b # spill\nb: fill y <- stk#1 -> c\nc: ret",
        )
        .unwrap();
        assert_eq!(p.code.len(), 3);
        assert!(matches!(p.code[0], Instr::Spill { slot: 1, .. }));
    }

    #[test]
    fn fill_slot_out_of_bounds_is_rejected() {
        let e = parse_program("mem stk 1 low\nentry a\na: fill x <- stk#1 -> b\nb: ret").unwrap_err();
        assert!(e.msg.contains("stack slot"));
    }

    #[test]
    fn validate_reports_missing_successor_and_bad_slot() {
        let mut p = parse_program("mem stk 1 low\nentry a\na: fill x <- stk#0 -> b\nb: ret").unwrap();
        assert!(validate_program(&p).is_empty());
        let mut q = p.clone();
        q.code[1] = Instr::Nop { next: Pc(9) };
        let d = validate_program(&q);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].pc.as_deref(), Some("b"));
        p.code[0] = Instr::Fill { dst: Reg(0), slot: 3, next: Pc(1) };
        let d = validate_program(&p);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].pc.as_deref(), Some("a"));
    }

    #[test]
    fn uses_defs_table() {
        let p = parse_program("mem buf 8 low\nentry 1\n1: load a <- buf[b] -> 2\n2: c = a add b -> 3\n3: nop -> 4\n4: ret").unwrap();
        let r = |n: &str| p.reg_of(n).unwrap();
        let (u, d) = uses_defs(&p.code[0]);
        assert_eq!((u, d), ([r("b")].into(), [r("a")].into()));
        let (u, d) = uses_defs(&p.code[1]);
        assert_eq!((u, d), ([r("a"), r("b")].into(), [r("c")].into()));
        assert_eq!(uses_defs(&p.code[2]), (BTreeSet::new(), BTreeSet::new()));
    }

    #[test]
    fn comparisons_encode_truth_as_zero() {
        assert_eq!(Op::Lt.apply(3, 8, 8), 0);
        assert_eq!(Op::Lt.apply(8, 8, 8), 1);
        assert_eq!(Op::Eq.apply(5, 5, 8), 0);
        assert_eq!(Op::Add.apply(255, 2, 8), 1);
        assert_eq!(Op::Sub.apply(0, 1, 2), 3);
    }
}
