//! Speculation-free and speculative small-step semantics, driven by directives.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::ir::{Addr, Instr, Pc, Program, Reg, Value, Var};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State {
    pub pc: Pc,
    pub regs: Vec<Value>,
    pub mem: Vec<Value>,
}

impl State {
    /// All registers and cells zero, at the entry.
    pub fn zero(p: &Program) -> State {
        State { pc: p.entry, regs: vec![0; p.regs.len()], mem: vec![0; p.total_cells()] }
    }

    pub fn from_assignments(p: &Program, regs: &BTreeMap<Reg, Value>, cells: &BTreeMap<(Var, u64), Value>) -> State {
        let mut s = State::zero(p);
        for (r, v) in regs {
            s.regs[r.idx()] = *v & p.mask();
        }
        for ((var, off), v) in cells {
            s.mem[p.cell_index(*var, *off)] = *v & p.mask();
        }
        s
    }

    pub fn reg(&self, r: Reg) -> Value {
        self.regs[r.idx()]
    }

    pub fn cell(&self, p: &Program, v: Var, off: u64) -> Value {
        self.mem[p.cell_index(v, off)]
    }

    pub fn set_cell(&mut self, p: &Program, v: Var, off: u64, val: Value) {
        let i = p.cell_index(v, off);
        self.mem[i] = val;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpecState(pub Vec<State>);

impl SpecState {
    pub fn new(s: State) -> SpecState {
        SpecState(vec![s])
    }

    pub fn top(&self) -> &State {
        self.0.last().expect("non-empty speculative state")
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_speculating(&self) -> bool {
        self.0.len() >= 2
    }

    pub fn pcs(&self) -> Vec<Pc> {
        self.0.iter().map(|s| s.pc).collect()
    }

    pub fn is_final(&self, p: &Program) -> bool {
        self.0.len() == 1 && matches!(p.instr(self.top().pc), Instr::Exit)
    }

    pub fn fmt_pcs(&self, p: &Program) -> String {
        self.0.iter().map(|s| p.label(s.pc)).collect::<Vec<_>>().join(",")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Directive {
    Step,
    If,
    Spec,
    Rb,
    Load(Var, u64),
    Store(Var, u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Leak {
    None,
    If(bool),
    Load(Value),
    Store(Value),
    Rb,
}

impl fmt::Display for Leak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Leak::None => write!(f, "none"),
            Leak::If(b) => write!(f, "if {b}"),
            Leak::Load(a) => write!(f, "load {a}"),
            Leak::Store(a) => write!(f, "store {a}"),
            Leak::Rb => write!(f, "rb"),
        }
    }
}

pub fn fmt_directive(p: &Program, d: &Directive) -> String {
    match d {
        Directive::Step => "step".into(),
        Directive::If => "if".into(),
        Directive::Spec => "spec".into(),
        Directive::Rb => "rb".into(),
        Directive::Load(v, o) => format!("load {} {o}", p.var_name(*v)),
        Directive::Store(v, o) => format!("store {} {o}", p.var_name(*v)),
    }
}

pub fn fmt_directives(p: &Program, ds: &[Directive]) -> String {
    ds.iter().map(|d| fmt_directive(p, d)).collect::<Vec<_>>().join(" · ")
}

pub fn fmt_leaks(ls: &[Leak]) -> String {
    ls.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" · ")
}

/// Parses one directive per line; blank lines and `#` comments are skipped.
pub fn parse_directives(p: &Program, text: &str) -> Result<Vec<Directive>, crate::ir::ParseError> {
    use crate::ir::ParseError;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        let w: Vec<&str> = line.split_whitespace().collect();
        if w.is_empty() {
            continue;
        }
        let err = |m: String| ParseError::new(n + 1, 1, m);
        let d = match w.as_slice() {
            ["step"] => Directive::Step,
            ["if"] => Directive::If,
            ["spec"] => Directive::Spec,
            ["rb"] => Directive::Rb,
            [k @ ("load" | "store"), var, off] => {
                let v = p.var_of(var).ok_or_else(|| err(format!("unknown memory variable `{var}`")))?;
                let o: u64 = off.parse().map_err(|_| err(format!("`{off}` is not an offset")))?;
                if o >= p.size(v) {
                    return Err(err(format!("offset {o} out of bounds of `{var}`")));
                }
                if *k == "load" {
                    Directive::Load(v, o)
                } else {
                    Directive::Store(v, o)
                }
            }
            _ => return Err(err(format!("cannot parse directive `{}`", line.trim()))),
        };
        out.push(d);
    }
    Ok(out)
}

/// Whether `branch` takes its first successor: the register holds 0.
pub fn branch_taken(v: Value) -> bool {
    v == 0
}

fn target_addr(s: &State, a: Addr) -> Value {
    match a {
        Addr::Reg(b) => s.reg(b),
        Addr::Const(n) => n,
    }
}

/// One step of a single frame. `speculating` selects the sfence/slh behaviour;
/// `Spec` is handled by the caller.
fn step_frame(p: &Program, s: &State, d: Directive, speculating: bool) -> Option<(State, Leak)> {
    let m = p.mask();
    let mut n = s.clone();
    let i = *p.instr(s.pc);
    let leak = match (i, d) {
        (Instr::Exit, _) => return None,
        (Instr::Nop { next }, Directive::Step) => {
            n.pc = next;
            Leak::None
        }
        (Instr::Asgn { dst, lhs, op, rhs, next }, Directive::Step) => {
            n.regs[dst.idx()] = op.apply(s.reg(lhs), s.reg(rhs), p.width);
            n.pc = next;
            Leak::None
        }
        (Instr::Move { dst, src, next }, Directive::Step) => {
            n.regs[dst.idx()] = s.reg(src);
            n.pc = next;
            Leak::None
        }
        (Instr::If { cond, on_true, on_false }, Directive::If) => {
            let b = branch_taken(s.reg(cond));
            n.pc = if b { on_true } else { on_false };
            Leak::If(b)
        }
        (Instr::Load { dst, var, addr, next }, _) => {
            let a = target_addr(s, addr);
            let v = match d {
                Directive::Step if a < p.size(var) => s.cell(p, var, a),
                Directive::Load(y, o) if a >= p.size(var) && o < p.size(y) => s.cell(p, y, o),
                _ => return None,
            };
            n.regs[dst.idx()] = v & m;
            n.pc = next;
            Leak::Load(a)
        }
        (Instr::Store { var, addr, src, next }, _) => {
            let a = target_addr(s, addr);
            match d {
                Directive::Step if a < p.size(var) => n.set_cell(p, var, a, s.reg(src)),
                Directive::Store(y, o) if a >= p.size(var) && o < p.size(y) => n.set_cell(p, y, o, s.reg(src)),
                _ => return None,
            }
            n.pc = next;
            Leak::Store(a)
        }
        (Instr::Fill { dst, slot, next }, Directive::Step) => {
            let stk = p.stack()?;
            n.regs[dst.idx()] = s.cell(p, stk, slot);
            n.pc = next;
            Leak::Load(slot)
        }
        (Instr::Spill { slot, src, next }, Directive::Step) => {
            let stk = p.stack()?;
            n.set_cell(p, stk, slot, s.reg(src));
            n.pc = next;
            Leak::Store(slot)
        }
        (Instr::Sfence { next }, Directive::Step) if !speculating => {
            n.pc = next;
            Leak::None
        }
        (Instr::Slh { reg, next }, Directive::Step) => {
            if speculating {
                n.regs[reg.idx()] = 0;
            }
            n.pc = next;
            Leak::None
        }
        _ => return None,
    };
    Some((n, leak))
}

/// Speculation-free step; `sfence` and `slh` behave as in a non-speculating state.
pub fn step_spec_free(p: &Program, s: &State, d: Directive) -> Option<(State, Leak)> {
    if matches!(d, Directive::Spec | Directive::Rb) {
        return None;
    }
    step_frame(p, s, d, false)
}

pub fn step_spec(p: &Program, nu: &SpecState, d: Directive) -> Option<(SpecState, Leak)> {
    let len = nu.len();
    match d {
        Directive::Rb => {
            if len < 2 {
                return None;
            }
            let mut v = nu.0.clone();
            v.pop();
            Some((SpecState(v), Leak::Rb))
        }
        Directive::Spec => {
            let top = nu.top();
            let Instr::If { cond, on_true, on_false } = *p.instr(top.pc) else {
                return None;
            };
            let b = branch_taken(top.reg(cond));
            let mut v = nu.0.clone();
            let mut wrong = top.clone();
            v.last_mut().unwrap().pc = if b { on_true } else { on_false };
            wrong.pc = if b { on_false } else { on_true };
            v.push(wrong);
            Some((SpecState(v), Leak::If(b)))
        }
        _ => {
            let (s, l) = step_frame(p, nu.top(), d, len >= 2)?;
            let mut v = nu.0.clone();
            *v.last_mut().unwrap() = s;
            Some((SpecState(v), l))
        }
    }
}

/// All memory-access directives for the declared layout.
pub fn access_directives(p: &Program, store: bool) -> Vec<Directive> {
    p.cells()
        .into_iter()
        .map(|(v, o)| if store { Directive::Store(v, o) } else { Directive::Load(v, o) })
        .collect()
}

/// The complete directive universe for a program: used to cross-check [`enabled_directives`].
pub fn all_directives(p: &Program) -> Vec<Directive> {
    let mut v = vec![Directive::Step, Directive::If, Directive::Spec, Directive::Rb];
    v.extend(access_directives(p, false));
    v.extend(access_directives(p, true));
    v
}

/// Exactly the directives for which [`step_spec`] is defined, sorted.
pub fn enabled_directives(p: &Program, nu: &SpecState) -> Vec<Directive> {
    let top = nu.top();
    let spec = nu.is_speculating();
    let mut out = Vec::new();
    match *p.instr(top.pc) {
        Instr::Exit => {}
        Instr::If { .. } => {
            out.push(Directive::If);
            out.push(Directive::Spec);
        }
        Instr::Load { var, addr, .. } | Instr::Store { var, addr, .. } => {
            if target_addr(top, addr) < p.size(var) {
                out.push(Directive::Step);
            } else {
                let store = matches!(p.instr(top.pc), Instr::Store { .. });
                out.extend(access_directives(p, store));
            }
        }
        Instr::Sfence { .. } => {
            if !spec {
                out.push(Directive::Step);
            }
        }
        Instr::Fill { .. } | Instr::Spill { .. } => {
            if p.stack().is_some() {
                out.push(Directive::Step);
            }
        }
        _ => out.push(Directive::Step),
    }
    if spec {
        out.push(Directive::Rb);
    }
    out.sort();
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceStep {
    pub directive: Directive,
    pub leak: Leak,
    pub state: SpecState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    /// Every directive applied; the end state is not final.
    Completed,
    /// Directive at this index was not enabled.
    Stuck(usize),
    /// Every directive applied and the end state is final.
    Final,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Execution {
    pub initial: SpecState,
    pub steps: Vec<TraceStep>,
    pub status: RunStatus,
}

impl Execution {
    pub fn last(&self) -> &SpecState {
        self.steps.last().map(|s| &s.state).unwrap_or(&self.initial)
    }

    pub fn leaks(&self) -> Vec<Leak> {
        self.steps.iter().map(|s| s.leak).collect()
    }

    pub fn directives(&self) -> Vec<Directive> {
        self.steps.iter().map(|s| s.directive).collect()
    }

    /// One line per step: `<directive> | <leak> | <pc stack>`.
    pub fn trace_lines(&self, p: &Program) -> Vec<String> {
        self.steps
            .iter()
            .map(|s| format!("{} | {} | {}", fmt_directive(p, &s.directive), s.leak, s.state.fmt_pcs(p)))
            .collect()
    }
}

pub fn run_directives(p: &Program, nu0: &SpecState, ds: &[Directive]) -> Execution {
    let mut steps = Vec::with_capacity(ds.len());
    let mut cur = nu0.clone();
    for (i, d) in ds.iter().enumerate() {
        match step_spec(p, &cur, *d) {
            Some((n, l)) => {
                steps.push(TraceStep { directive: *d, leak: l, state: n.clone() });
                cur = n;
            }
            None => return Execution { initial: nu0.clone(), steps, status: RunStatus::Stuck(i) },
        }
    }
    let status = if cur.is_final(p) { RunStatus::Final } else { RunStatus::Completed };
    Execution { initial: nu0.clone(), steps, status }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bounds {
    pub max_steps: usize,
    pub max_spec_depth: usize,
}

impl Bounds {
    pub fn new(max_steps: usize, max_spec_depth: usize) -> Bounds {
        assert!(max_steps >= 1 && max_spec_depth >= 1, "bounds must be positive");
        Bounds { max_steps, max_spec_depth }
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { max_steps: 32, max_spec_depth: 3 }
    }
}

/// (leak trace, directive trace)
pub type Behavior = (Vec<Leak>, Vec<Directive>);

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BehaviorSet {
    pub terminated: BTreeSet<Behavior>,
    pub truncated: BTreeSet<Behavior>,
}

/// Enumerates every directive sequence from `nu0` up to the bounds.
pub fn explore_behaviors(p: &Program, nu0: &SpecState, b: Bounds) -> BehaviorSet {
    let mut out = BehaviorSet::default();
    let mut ds = Vec::new();
    let mut ls = Vec::new();
    explore_rec(p, nu0, b, &mut ds, &mut ls, &mut out);
    out
}

fn explore_rec(p: &Program, nu: &SpecState, b: Bounds, ds: &mut Vec<Directive>, ls: &mut Vec<Leak>, out: &mut BehaviorSet) {
    if nu.is_final(p) {
        out.terminated.insert((ls.clone(), ds.clone()));
        return;
    }
    if ds.len() >= b.max_steps {
        out.truncated.insert((ls.clone(), ds.clone()));
        return;
    }
    for d in enabled_directives(p, nu) {
        let (n, l) = step_spec(p, nu, d).expect("enabled directive steps");
        ds.push(d);
        ls.push(l);
        if n.len() > b.max_spec_depth {
            out.truncated.insert((ls.clone(), ds.clone()));
        } else {
            explore_rec(p, &n, b, ds, ls, out);
        }
        ds.pop();
        ls.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn prog(s: &str) -> Program {
        parse_program(s).unwrap()
    }

    const SIMPLER: &str = "\
mem buf 8 low
mem stk 1 low
entry 1
1: a = b lt n -> 2
2: if a ? 3 : 4
3: store buf[b] <- secret -> 4
4: load bytes <- stk[#0] -> 5
5: if bytes ? 6 : 6
6: ret
";

    #[test]
    fn unsafe_store_writes_chosen_cell() {
        let p = prog(SIMPLER);
        let mut s = State::zero(&p);
        s.pc = p.pc_of("3").unwrap();
        s.regs[p.reg_of("b").unwrap().idx()] = 8;
        s.regs[p.reg_of("secret").unwrap().idx()] = 42;
        let stk = p.var_of("stk").unwrap();
        let buf = p.var_of("buf").unwrap();
        assert!(step_spec_free(&p, &s, Directive::Step).is_none());
        assert!(step_spec_free(&p, &s, Directive::Load(stk, 0)).is_none());
        let (n, l) = step_spec_free(&p, &s, Directive::Store(stk, 0)).unwrap();
        assert_eq!(l, Leak::Store(8));
        assert_eq!(n.cell(&p, stk, 0), 42);
        assert_eq!(p.label(n.pc), "4");
        let nu = SpecState(vec![s.clone(), s.clone()]);
        let en = enabled_directives(&p, &nu);
        assert_eq!(en.len(), 9 + 1);
        assert!(en.contains(&Directive::Store(buf, 7)));
    }

    #[test]
    fn exit_enables_nothing() {
        let p = prog("entry L0\nL0: ret");
        let nu = SpecState::new(State::zero(&p));
        assert!(enabled_directives(&p, &nu).is_empty());
        for d in all_directives(&p) {
            assert!(step_spec(&p, &nu, d).is_none());
        }
        let bs = explore_behaviors(&p, &nu, Bounds::new(4, 2));
        assert_eq!(bs.terminated, BTreeSet::from([(vec![], vec![])]));
        assert!(bs.truncated.is_empty());
    }

    #[test]
    fn spec_pushes_wrong_branch_and_leaks_condition() {
        let p = prog(SIMPLER);
        let mut s = State::zero(&p);
        s.pc = p.pc_of("2").unwrap();
        s.regs[p.reg_of("a").unwrap().idx()] = 1;
        let nu = SpecState::new(s);
        assert_eq!(enabled_directives(&p, &nu), vec![Directive::If, Directive::Spec]);
        let (n, l) = step_spec(&p, &nu, Directive::Spec).unwrap();
        assert_eq!(l, Leak::If(false));
        assert_eq!(n.fmt_pcs(&p), "4,3");
        let (r, l) = step_spec(&p, &n, Directive::Rb).unwrap();
        assert_eq!(l, Leak::Rb);
        assert_eq!(r.pcs(), vec![p.pc_of("4").unwrap()]);
    }

    #[test]
    fn sfence_blocks_while_speculating() {
        let p = prog("entry a\na: sfence -> b\nb: slh x -> c\nc: ret");
        let mut s = State::zero(&p);
        s.regs[0] = 5;
        let two = SpecState(vec![s.clone(), s.clone()]);
        assert_eq!(enabled_directives(&p, &two), vec![Directive::Rb]);
        let one = SpecState::new(s.clone());
        let (n, _) = step_spec(&p, &one, Directive::Step).unwrap();
        let (m, _) = step_spec(&p, &n, Directive::Step).unwrap();
        assert_eq!(m.top().regs[0], 5);
        s.pc = Pc(1);
        let two = SpecState(vec![s.clone(), s]);
        let (m, _) = step_spec(&p, &two, Directive::Step).unwrap();
        assert_eq!(m.top().regs[0], 0);
        assert_eq!(m.0[0].regs[0], 5);
    }

    #[test]
    fn run_status() {
        let p = prog(SIMPLER);
        let nu = SpecState::new(State::zero(&p));
        assert_eq!(run_directives(&p, &nu, &[]).status, RunStatus::Completed);
        let e = run_directives(&p, &nu, &[Directive::Rb]);
        assert_eq!(e.status, RunStatus::Stuck(0));
        assert!(e.steps.is_empty());
    }

    #[test]
    fn straight_line_has_one_behavior() {
        let p = prog("entry 1\n1: a = b add c -> 2\n2: nop -> 3\n3: b = a mul a -> 4\n4: ret");
        let bs = explore_behaviors(&p, &SpecState::new(State::zero(&p)), Bounds::new(10, 2));
        assert_eq!(bs.terminated.len(), 1);
        assert!(bs.truncated.is_empty());
    }

    #[test]
    fn trace_line_format() {
        let p = prog(SIMPLER);
        let mut s = State::zero(&p);
        s.regs[p.reg_of("b").unwrap().idx()] = 8;
        s.regs[p.reg_of("n").unwrap().idx()] = 8;
        let ds = parse_directives(&p, "step\nspec\nstore stk 0\n").unwrap();
        let e = run_directives(&p, &SpecState::new(s), &ds);
        assert_eq!(e.trace_lines(&p), vec!["step | none | 2", "spec | if false | 4,3", "store stk 0 | store 8 | 4,4"]);
    }
}
