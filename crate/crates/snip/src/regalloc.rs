//! Register allocation witnesses: the instruction injection φ, the relocation
//! ρ, their validation, a text format, and a greedy allocator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::dataflow::{FlowError, FlowSolution};
use crate::ir::{parse_program, reverse_postorder, uses_defs, Addr, Instr, Level, ParseError, Pc, Program, ProgramBuilder, Reg, STACK};
use crate::liveness::{live_ins, liveness, LiveSet};
use crate::sem::State;

/// Where a source register lives in the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Loc {
    Reg(Reg),
    Stk(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RaWitness {
    pub src: Program,
    pub tgt: Program,
    /// Source pc to target pc.
    pub phi: Vec<Pc>,
    /// Target pc, then source register.
    pub rho: Vec<Vec<Option<Loc>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RaKind {
    InstructionMatching,
    ShuffleConformity,
    ObeyingLiveness,
}

impl fmt::Display for RaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RaKind::InstructionMatching => "instruction-matching",
            RaKind::ShuffleConformity => "shuffle-conformity",
            RaKind::ObeyingLiveness => "obeying-liveness",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct RaDiagnostic {
    pub kind: RaKind,
    pub pcs: Vec<String>,
    pub msg: String,
}

impl fmt::Display for RaDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}: {}", self.kind, self.pcs.join(","), self.msg)
    }
}

/// Liveness used for allocation: only memory is live at exit.
pub fn ra_liveness(src: &Program) -> Result<FlowSolution<LiveSet>, FlowError> {
    liveness(src, &LiveSet::all_mems(src))
}

impl RaWitness {
    pub fn loc(&self, tpc: Pc, r: Reg) -> Option<Loc> {
        self.rho[tpc.idx()][r.idx()]
    }

    /// Target pc to the source pc it matches.
    pub fn image(&self) -> Vec<Option<Pc>> {
        let mut im = vec![None; self.tgt.code.len()];
        for (s, t) in self.phi.iter().enumerate() {
            if t.idx() < im.len() {
                im[t.idx()] = Some(Pc(s as u32));
            }
        }
        im
    }

    /// Follows shuffle successors from `t` until a matched pc.
    pub fn chain_end(&self, image: &[Option<Pc>], mut t: Pc) -> Option<Pc> {
        for _ in 0..=self.tgt.code.len() {
            if image[t.idx()].is_some() {
                return Some(t);
            }
            let i = self.tgt.instr(t);
            if !i.is_shuffle() {
                return None;
            }
            t = i.next()?;
        }
        None
    }

    /// The source pc whose state a target pc stands for: its match, or the
    /// match at the end of its shuffle chain.
    pub fn src_pc_of(&self, image: &[Option<Pc>], t: Pc) -> Option<Pc> {
        self.chain_end(image, t).and_then(|e| image[e.idx()])
    }

    pub fn is_matched(&self, image: &[Option<Pc>], t: Pc) -> bool {
        image[t.idx()].is_some()
    }

    /// The source state for a target initial state: registers read through
    /// ρ at the entry, memory without `stk`.
    pub fn map_state(&self, t: &State) -> State {
        let entry = self.tgt.entry;
        let mut s = State::zero(&self.src);
        s.pc = self.src.entry;
        for r in self.src.reg_ids() {
            s.regs[r.idx()] = match self.loc(entry, r) {
                Some(Loc::Reg(x)) => t.reg(x),
                Some(Loc::Stk(n)) => self.tgt.stack().map(|v| t.cell(&self.tgt, v, n)).unwrap_or(0),
                None => 0,
            };
        }
        for v in self.src.var_ids() {
            let tv = self.tgt.var_of(self.src.var_name(v)).expect("target declares every source variable");
            for o in 0..self.src.size(v) {
                s.set_cell(&self.src, v, o, t.cell(&self.tgt, tv, o));
            }
        }
        s
    }

    pub fn fmt_loc(&self, l: Option<Loc>) -> String {
        match l {
            None => "_".into(),
            Some(Loc::Reg(r)) => self.tgt.reg_name(r).to_string(),
            Some(Loc::Stk(n)) => format!("{STACK}#{n}"),
        }
    }
}

fn shuffle_uses_defs(i: &Instr) -> (Vec<Loc>, Vec<Loc>) {
    match *i {
        Instr::Move { dst, src, .. } => (vec![Loc::Reg(src)], vec![Loc::Reg(dst)]),
        Instr::Fill { dst, slot, .. } => (vec![Loc::Stk(slot)], vec![Loc::Reg(dst)]),
        Instr::Spill { slot, src, .. } => (vec![Loc::Reg(src)], vec![Loc::Stk(slot)]),
        _ => (vec![], vec![]),
    }
}

struct Checker<'a> {
    w: &'a RaWitness,
    image: Vec<Option<Pc>>,
    live: Vec<LiveSet>,
    out: Vec<RaDiagnostic>,
}

impl Checker<'_> {
    fn diag(&mut self, kind: RaKind, pcs: &[Pc], msg: String) {
        let pcs = pcs.iter().map(|p| self.w.tgt.label(*p).to_string()).collect();
        self.out.push(RaDiagnostic { kind, pcs, msg });
    }

    fn sname(&self, r: Reg) -> &str {
        self.w.src.reg_name(r)
    }

    fn tname(&self, r: Reg) -> &str {
        self.w.tgt.reg_name(r)
    }

    /// Source register `a` must sit in target register `b` at `t`.
    fn expect_reg(&mut self, t: Pc, a: Reg, b: Reg, what: &str) {
        if self.w.loc(t, a) != Some(Loc::Reg(b)) {
            let got = self.w.fmt_loc(self.w.loc(t, a));
            let msg = format!("{what} `{}` is at {got} but the target uses `{}`", self.sname(a), self.tname(b));
            self.diag(RaKind::InstructionMatching, &[t], msg);
        }
    }

    fn expect_succ(&mut self, t: Pc, ts: Pc, s: Pc) {
        let want = self.w.phi[s.idx()];
        if self.w.chain_end(&self.image, ts) != Some(want) {
            let msg = format!("successor does not lead to {} (the match of source {})", self.w.tgt.label(want), self.w.src.label(s));
            self.diag(RaKind::InstructionMatching, &[t], msg);
        }
    }

    fn same_var(&self, sv: crate::ir::Var, tv: crate::ir::Var) -> bool {
        self.w.src.var_name(sv) == self.w.tgt.var_name(tv)
    }

    fn same_addr(&mut self, t: Pc, sa: Addr, ta: Addr) -> bool {
        match (sa, ta) {
            (Addr::Const(a), Addr::Const(b)) => a == b,
            (Addr::Reg(a), Addr::Reg(b)) => {
                self.expect_reg(t, a, b, "address register");
                true
            }
            _ => false,
        }
    }

    fn matched(&mut self, s: Pc, t: Pc) {
        let w = self.w;
        let si = *w.src.instr(s);
        let ti = *w.tgt.instr(t);
        let tn = ti.next();
        let mismatch = |c: &mut Self| {
            let msg = format!("`{}` does not match source `{}`", w.tgt.fmt_instr(&ti), w.src.fmt_instr(&si));
            c.diag(RaKind::InstructionMatching, &[t], msg);
        };
        let ok = match (si, ti) {
            (Instr::Exit, Instr::Exit) | (Instr::Nop { .. }, Instr::Nop { .. }) | (Instr::Sfence { .. }, Instr::Sfence { .. }) => true,
            (Instr::Asgn { dst, lhs, op, rhs, .. }, Instr::Asgn { dst: d2, lhs: l2, op: o2, rhs: r2, .. }) if op == o2 => {
                self.expect_reg(t, lhs, l2, "operand");
                self.expect_reg(t, rhs, r2, "operand");
                self.expect_reg(tn.unwrap(), dst, d2, "destination");
                true
            }
            (Instr::Move { dst, src, .. }, Instr::Move { dst: d2, src: s2, .. }) => {
                self.expect_reg(t, src, s2, "operand");
                self.expect_reg(tn.unwrap(), dst, d2, "destination");
                true
            }
            (Instr::Load { dst, var, addr, .. }, Instr::Load { dst: d2, var: v2, addr: a2, .. }) if self.same_var(var, v2) => {
                let ok = self.same_addr(t, addr, a2);
                self.expect_reg(tn.unwrap(), dst, d2, "destination");
                ok
            }
            (Instr::Store { var, addr, src, .. }, Instr::Store { var: v2, addr: a2, src: s2, .. }) if self.same_var(var, v2) => {
                let ok = self.same_addr(t, addr, a2);
                self.expect_reg(t, src, s2, "stored register");
                ok
            }
            (Instr::If { cond, .. }, Instr::If { cond: c2, .. }) => {
                self.expect_reg(t, cond, c2, "condition");
                true
            }
            (Instr::Slh { reg, .. }, Instr::Slh { reg: r2, .. }) => {
                self.expect_reg(t, reg, r2, "hardened register");
                self.expect_reg(tn.unwrap(), reg, r2, "hardened register");
                true
            }
            (Instr::Fill { dst, slot, .. }, Instr::Fill { dst: d2, slot: s2, .. }) if slot == s2 => {
                self.expect_reg(tn.unwrap(), dst, d2, "destination");
                true
            }
            (Instr::Spill { slot, src, .. }, Instr::Spill { slot: s2, src: r2, .. }) if slot == s2 => {
                self.expect_reg(t, src, r2, "stored register");
                true
            }
            _ => false,
        };
        if !ok {
            mismatch(self);
            return;
        }
        for (ss, ts) in si.successors().into_iter().zip(ti.successors()) {
            self.expect_succ(t, ts, ss);
        }
        // Registers the instruction does not define stay where they are.
        let (_, defs) = uses_defs(&si);
        for ts in ti.successors() {
            self.frame(t, ts, &defs, &[]);
        }
    }

    /// Frame condition between `t` and its successor `ts` for registers other
    /// than `except`; `moved` lists (register, new location) pairs.
    fn frame(&mut self, t: Pc, ts: Pc, except: &BTreeSet<Reg>, moved: &[(Reg, Loc)]) {
        for a in self.w.src.reg_ids() {
            if except.contains(&a) {
                continue;
            }
            let before = self.w.loc(t, a);
            let after = self.w.loc(ts, a);
            if let Some((_, to)) = moved.iter().find(|(r, _)| *r == a) {
                if after != Some(*to) {
                    let msg = format!("`{}` should move to {} but is at {}", self.sname(a), self.w.fmt_loc(Some(*to)), self.w.fmt_loc(after));
                    self.diag(RaKind::ShuffleConformity, &[t, ts], msg);
                }
                continue;
            }
            if let (Some(x), Some(y)) = (before, after) {
                if x != y {
                    let msg = format!("`{}` changes location from {} to {}", self.sname(a), self.w.fmt_loc(Some(x)), self.w.fmt_loc(Some(y)));
                    self.diag(RaKind::ShuffleConformity, &[t, ts], msg);
                }
            }
        }
    }

    fn shuffle(&mut self, t: Pc) {
        let w = self.w;
        let ti = *w.tgt.instr(t);
        let Some(ts) = ti.next() else { return };
        let img: BTreeSet<Loc> = w.src.reg_ids().filter_map(|a| w.loc(t, a)).collect();
        let (uses, defs) = shuffle_uses_defs(&ti);
        if let (Some(u), Some(d)) = (uses.first(), defs.first()) {
            if img.contains(d) {
                let msg = format!("`{}` writes {} which is not free", w.tgt.fmt_instr(&ti), w.fmt_loc(Some(*d)));
                self.diag(RaKind::ShuffleConformity, &[t], msg);
            }
            let moved: Vec<(Reg, Loc)> = w.src.reg_ids().filter(|a| w.loc(t, *a) == Some(*u)).map(|a| (a, *d)).collect();
            if moved.is_empty() {
                let msg = format!("`{}` moves no source register", w.tgt.fmt_instr(&ti));
                self.diag(RaKind::ShuffleConformity, &[t], msg);
            }
            self.frame(t, ts, &BTreeSet::new(), &moved);
        } else {
            self.frame(t, ts, &BTreeSet::new(), &[]);
        }
    }

    fn liveness(&mut self, t: Pc) {
        let w = self.w;
        let Some(s) = w.src_pc_of(&self.image, t) else { return };
        let live: Vec<Reg> = self.live[s.idx()].regs().collect();
        let mut seen: BTreeMap<Loc, Reg> = BTreeMap::new();
        for a in live {
            match w.loc(t, a) {
                None => {
                    let msg = format!("live register `{}` is not mapped", self.sname(a));
                    self.diag(RaKind::ObeyingLiveness, &[t], msg);
                }
                Some(l) => {
                    if let Some(b) = seen.insert(l, a) {
                        let msg = format!("`{}` and `{}` share {}", self.sname(b), self.sname(a), w.fmt_loc(Some(l)));
                        self.diag(RaKind::ObeyingLiveness, &[t], msg);
                    }
                }
            }
        }
        let stk = w.tgt.stack().map(|v| w.tgt.size(v));
        for a in w.src.reg_ids() {
            match (w.loc(t, a), stk) {
                (Some(Loc::Stk(_)), None) => {
                    let msg = format!("`{}` is on the stack but `stk` is not declared", self.sname(a));
                    self.diag(RaKind::ObeyingLiveness, &[t], msg);
                }
                (Some(Loc::Stk(n)), Some(sz)) if n >= sz => {
                    let msg = format!("`{}` uses slot {n} beyond the stack size {sz}", self.sname(a));
                    self.diag(RaKind::ObeyingLiveness, &[t], msg);
                }
                (Some(Loc::Reg(r)), _) if r.idx() >= w.tgt.regs.len() => {
                    self.diag(RaKind::ObeyingLiveness, &[t], "relocation names an unknown register".into());
                }
                _ => {}
            }
        }
    }
}

/// Checks instruction matching, shuffle conformity and obeying liveness.
/// `live` is the source liveness solution (live-out per source pc).
pub fn validate_ra(w: &RaWitness, live: &FlowSolution<LiveSet>) -> Vec<RaDiagnostic> {
    let mut c = Checker { w, image: w.image(), live: live_ins(&w.src, live), out: Vec::new() };
    let nt = w.tgt.code.len();
    if w.phi.len() != w.src.code.len() || w.rho.len() != nt || w.phi.iter().any(|t| t.idx() >= nt) {
        c.diag(RaKind::InstructionMatching, &[], "φ or ρ has the wrong shape".into());
        return c.out;
    }
    let mut firsts: BTreeMap<Pc, Pc> = BTreeMap::new();
    for s in w.src.pcs() {
        let t = w.phi[s.idx()];
        if let Some(o) = firsts.insert(t, s) {
            let msg = format!("φ maps both {} and {} here", w.src.label(o), w.src.label(s));
            c.diag(RaKind::InstructionMatching, &[t], msg);
        }
    }
    if w.chain_end(&c.image, w.tgt.entry) != Some(w.phi[w.src.entry.idx()]) {
        c.diag(RaKind::InstructionMatching, &[w.tgt.entry], "target entry does not lead to the match of the source entry".into());
    }
    for t in w.tgt.pcs() {
        match c.image[t.idx()] {
            Some(s) => c.matched(s, t),
            None => {
                if !w.tgt.instr(t).is_shuffle() {
                    let msg = format!("unmatched `{}` is not a shuffle instruction", w.tgt.fmt_instr(w.tgt.instr(t)));
                    c.diag(RaKind::InstructionMatching, &[t], msg);
                } else if w.chain_end(&c.image, t).is_none() {
                    c.diag(RaKind::InstructionMatching, &[t], "shuffle sequence never reaches a matched instruction".into());
                } else {
                    c.shuffle(t);
                }
            }
        }
        c.liveness(t);
    }
    c.out.sort();
    c.out.dedup();
    c.out
}

pub fn validate_ra_default(w: &RaWitness) -> Result<Vec<RaDiagnostic>, FlowError> {
    Ok(validate_ra(w, &ra_liveness(&w.src)?))
}

/// The map every target pc starts from before overrides: same-named registers.
fn identity_map(src: &Program, tgt: &Program) -> Vec<Option<Loc>> {
    src.reg_ids().map(|r| tgt.reg_of(src.reg_name(r)).map(Loc::Reg)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("witness line {line}: {msg}")]
pub struct WitnessError {
    pub line: usize,
    pub msg: String,
}

/// Parses `phi: <src> -> <tgt>` and `rho <tgt>: <reg> -> <reg | stk#n | _>`
/// lines. Each target pc inherits the map of the previous pc in the listing;
/// the first one starts from same-named registers. Unlisted source pcs map
/// to the target pc with the same label.
pub fn parse_ra_witness(src: &Program, tgt: &Program, text: &str) -> Result<RaWitness, WitnessError> {
    let mut phi: Vec<Option<Pc>> = vec![None; src.code.len()];
    let mut over: BTreeMap<Pc, Vec<(Reg, Option<Loc>)>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let err = |m: String| WitnessError { line: n + 1, msg: m };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let w: Vec<&str> = line.split_whitespace().collect();
        match w.as_slice() {
            ["phi:", s, "->", t] => {
                let sp = src.pc_of(s).ok_or_else(|| err(format!("unknown source pc `{s}`")))?;
                let tp = tgt.pc_of(t).ok_or_else(|| err(format!("unknown target pc `{t}`")))?;
                phi[sp.idx()] = Some(tp);
            }
            ["rho", t, r, "->", l] if t.ends_with(':') => {
                let t = &t[..t.len() - 1];
                let tp = tgt.pc_of(t).ok_or_else(|| err(format!("unknown target pc `{t}`")))?;
                let a = src.reg_of(r).ok_or_else(|| err(format!("unknown source register `{r}`")))?;
                let loc = if *l == "_" {
                    None
                } else if let Some(k) = l.strip_prefix("stk#") {
                    Some(Loc::Stk(k.parse().map_err(|_| err(format!("malformed slot `{l}`")))?))
                } else {
                    Some(Loc::Reg(tgt.reg_of(l).ok_or_else(|| err(format!("unknown target register `{l}`")))?))
                };
                over.entry(tp).or_default().push((a, loc));
            }
            _ => return Err(err(format!("malformed witness line `{line}`"))),
        }
    }
    let phi = phi
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            t.or_else(|| tgt.pc_of(src.label(Pc(i as u32))))
                .ok_or_else(|| WitnessError { line: 0, msg: format!("no φ entry for source pc `{}`", src.label(Pc(i as u32))) })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut cur = identity_map(src, tgt);
    let mut rho = Vec::with_capacity(tgt.code.len());
    for t in tgt.pcs() {
        for (a, l) in over.get(&t).into_iter().flatten() {
            cur[a.idx()] = *l;
        }
        rho.push(cur.clone());
    }
    Ok(RaWitness { src: src.clone(), tgt: tgt.clone(), phi, rho })
}

/// Inverse of [`parse_ra_witness`]: all φ entries, then ρ as differences.
pub fn serialize_ra_witness(w: &RaWitness) -> String {
    let mut out = String::new();
    for s in w.src.pcs() {
        out.push_str(&format!("phi: {} -> {}\n", w.src.label(s), w.tgt.label(w.phi[s.idx()])));
    }
    let mut cur = identity_map(&w.src, &w.tgt);
    for t in w.tgt.pcs() {
        for a in w.src.reg_ids() {
            let l = w.rho[t.idx()][a.idx()];
            if cur[a.idx()] != l {
                out.push_str(&format!("rho {}: {} -> {}\n", w.tgt.label(t), w.src.reg_name(a), w.fmt_loc(l)));
                cur[a.idx()] = l;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum AllocError {
    #[error("`{pc}` needs {need} registers at once but only {k} are available")]
    Infeasible { pc: String, need: usize, k: usize },
    #[error("the source program already uses `stk` or stack shuffles")]
    SourceUsesStack,
    #[error("at least one hardware register is required")]
    NoRegisters,
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("internal: generated target does not parse: {0}")]
    Build(#[from] ParseError),
}

/// Location of every source register during allocation; `hw[i]` holds the
/// source register in hardware register `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Assign {
    loc: Vec<ALoc>,
    hw: Vec<Option<Reg>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ALoc {
    Hw(usize),
    Home,
}

enum Emit {
    Fill { hw: usize, a: Reg },
    Spill { hw: usize, a: Reg },
}

struct Alloc<'a> {
    p: &'a Program,
    k: usize,
    hw_names: Vec<String>,
    /// Distance (in instructions) to the next use of each register from each pc.
    next_use: Vec<Vec<usize>>,
    /// Generated code: (label, text, map before the instruction).
    code: Vec<(String, String, Assign)>,
    labels: BTreeSet<String>,
    d_in: Vec<Option<Assign>>,
    head: Vec<Option<String>>,
}

const FAR: usize = usize::MAX;

fn next_uses(p: &Program) -> Vec<Vec<usize>> {
    let n = p.code.len();
    let r = p.regs.len();
    let ud: Vec<_> = p.code.iter().map(uses_defs).collect();
    let mut d = vec![vec![FAR; r]; n];
    for _ in 0..=n {
        let mut changed = false;
        for pc in 0..n {
            for a in 0..r {
                let reg = Reg(a as u32);
                let v = if ud[pc].0.contains(&reg) {
                    0
                } else if ud[pc].1.contains(&reg) {
                    FAR
                } else {
                    p.code[pc].successors().iter().map(|s| d[s.idx()][a]).min().unwrap_or(FAR).saturating_add(1)
                };
                if v < d[pc][a] {
                    d[pc][a] = v;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    d
}

const PLACEHOLDER: &str = "\u{0}";

impl Alloc<'_> {
    fn fresh(&mut self, base: &str, counter: &mut usize) -> String {
        loop {
            let l = format!("{base}.s{counter}");
            *counter += 1;
            if !self.labels.contains(&l) && self.p.pc_of(&l).is_none() {
                self.labels.insert(l.clone());
                return l;
            }
        }
    }

    fn hw(&self, i: usize) -> &str {
        &self.hw_names[i]
    }

    /// Frees a hardware register, spilling its occupant home. `keep` are not evicted.
    fn evict(&self, d: &mut Assign, at: Pc, keep: &BTreeSet<Reg>, out: &mut Vec<Emit>) -> Option<usize> {
        if let Some(i) = d.hw.iter().position(|x| x.is_none()) {
            return Some(i);
        }
        let succ = self.p.instr(at).successors();
        let dist = |a: Reg| -> usize {
            let (_, defs) = uses_defs(self.p.instr(at));
            if defs.contains(&a) {
                return FAR;
            }
            succ.iter().map(|s| self.next_use[s.idx()][a.idx()]).min().unwrap_or(FAR)
        };
        let (i, a) = d
            .hw
            .iter()
            .enumerate()
            .filter_map(|(i, x)| x.map(|a| (i, a)))
            .filter(|(_, a)| !keep.contains(a))
            .max_by_key(|(_, a)| (dist(*a), a.0))?;
        out.push(Emit::Spill { hw: i, a });
        d.hw[i] = None;
        d.loc[a.idx()] = ALoc::Home;
        Some(i)
    }

    fn emit_text(&self, e: &Emit, next: &str) -> String {
        match *e {
            Emit::Fill { hw, a } => format!("fill {} <- {STACK}#{} -> {next}", self.hw(hw), a.0),
            Emit::Spill { hw, a } => format!("spill {STACK}#{} <- {} -> {next}", a.0, self.hw(hw)),
        }
    }

    fn apply(d: &mut Assign, e: &Emit) {
        match *e {
            Emit::Fill { hw, a } => {
                d.hw[hw] = Some(a);
                d.loc[a.idx()] = ALoc::Hw(hw);
            }
            Emit::Spill { hw, a } => {
                d.hw[hw] = None;
                d.loc[a.idx()] = ALoc::Home;
            }
        }
    }

    /// Appends a shuffle sequence; returns the label of its first instruction
    /// (or `after` when empty) and the map after it.
    fn push_chain(&mut self, base: &str, counter: &mut usize, start: &Assign, emits: &[Emit], after: &str) -> String {
        if emits.is_empty() {
            return after.to_string();
        }
        let labels: Vec<String> = emits.iter().map(|_| self.fresh(base, counter)).collect();
        let mut d = start.clone();
        for (j, e) in emits.iter().enumerate() {
            let next = labels.get(j + 1).map(String::as_str).unwrap_or(after);
            let text = self.emit_text(e, next);
            self.code.push((labels[j].clone(), text, d.clone()));
            Self::apply(&mut d, e);
        }
        labels[0].clone()
    }

    fn reconcile(from: &Assign, to: &Assign) -> Vec<Emit> {
        let mut out = Vec::new();
        for (a, l) in from.loc.iter().enumerate() {
            if let ALoc::Hw(h) = l {
                if to.loc[a] != *l {
                    out.push(Emit::Spill { hw: *h, a: Reg(a as u32) });
                }
            }
        }
        for (a, l) in to.loc.iter().enumerate() {
            if let ALoc::Hw(h) = l {
                if from.loc[a] != *l {
                    out.push(Emit::Fill { hw: *h, a: Reg(a as u32) });
                }
            }
        }
        out
    }

    fn render(&self, i: &Instr, pre: &Assign, post: &Assign, succ: &[String]) -> String {
        let p = self.p;
        let u = |r: Reg| match pre.loc[r.idx()] {
            ALoc::Hw(h) => self.hw(h).to_string(),
            ALoc::Home => unreachable!("use not in a register"),
        };
        let d = |r: Reg| match post.loc[r.idx()] {
            ALoc::Hw(h) => self.hw(h).to_string(),
            ALoc::Home => unreachable!("def not in a register"),
        };
        let a = |x: Addr| match x {
            Addr::Reg(b) => u(b),
            Addr::Const(n) => format!("#{n}"),
        };
        let next = || succ[0].clone();
        match *i {
            Instr::Exit => "ret".into(),
            Instr::Nop { .. } => format!("nop -> {}", next()),
            Instr::Sfence { .. } => format!("sfence -> {}", next()),
            Instr::Asgn { dst, lhs, op, rhs, .. } => format!("{} = {} {} {} -> {}", d(dst), u(lhs), op.name(), u(rhs), next()),
            Instr::Move { dst, src, .. } => format!("move {} <- {} -> {}", d(dst), u(src), next()),
            Instr::Load { dst, var, addr, .. } => format!("load {} <- {}[{}] -> {}", d(dst), p.var_name(var), a(addr), next()),
            Instr::Store { var, addr, src, .. } => format!("store {}[{}] <- {} -> {}", p.var_name(var), a(addr), u(src), next()),
            Instr::If { cond, .. } => format!("if {} ? {} : {}", u(cond), succ[0], succ[1]),
            Instr::Slh { reg, .. } => format!("slh {} -> {}", u(reg), next()),
            Instr::Fill { .. } | Instr::Spill { .. } => unreachable!("rejected earlier"),
        }
    }

    fn process(&mut self, pc: Pc) -> Result<(), AllocError> {
        let p = self.p;
        let label = p.label(pc).to_string();
        let mut counter = 0;
        let start = self.d_in[pc.idx()].clone().expect("map fixed before processing");
        let mut d = start.clone();
        let i = *p.instr(pc);
        let (uses, defs) = uses_defs(&i);
        let need = uses.union(&defs).count();
        if need > self.k {
            return Err(AllocError::Infeasible { pc: label, need, k: self.k });
        }
        let mut emits = Vec::new();
        for &u in &uses {
            if let ALoc::Home = d.loc[u.idx()] {
                let h = self.evict(&mut d, pc, &uses, &mut emits).expect("feasible");
                let e = Emit::Fill { hw: h, a: u };
                Self::apply(&mut d, &e);
                emits.push(e);
            }
        }
        let mut post = d.clone();
        for &x in &defs {
            if let ALoc::Home = d.loc[x.idx()] {
                let keep: BTreeSet<Reg> = uses.union(&defs).copied().collect();
                let h = self.evict(&mut d, pc, &keep, &mut emits).expect("feasible");
                post = d.clone();
                post.hw[h] = Some(x);
                post.loc[x.idx()] = ALoc::Hw(h);
            }
        }
        // `emits` were applied to `d` incrementally; replay from `start` for the chain labels.
        let head = self.push_chain(&label, &mut counter, &start, &emits, &label);
        self.head[pc.idx()] = Some(head);
        let mut succ_labels = Vec::new();
        let mut edge_chains = Vec::new();
        for s in i.successors() {
            match &self.d_in[s.idx()] {
                None => {
                    self.d_in[s.idx()] = Some(post.clone());
                    succ_labels.push(format!("{PLACEHOLDER}{}", s.0));
                }
                Some(want) if *want == post => succ_labels.push(format!("{PLACEHOLDER}{}", s.0)),
                Some(want) => {
                    let em = Self::reconcile(&post, want);
                    edge_chains.push((s, em));
                    succ_labels.push(String::new());
                }
            }
        }
        let at = self.code.len();
        self.code.push((label.clone(), String::new(), d.clone()));
        let mut k = 0;
        for (s, em) in edge_chains {
            while !succ_labels[k].is_empty() {
                k += 1;
            }
            let target = format!("{PLACEHOLDER}{}", s.0);
            let first = self.push_chain(&label, &mut counter, &post, &em, &target);
            succ_labels[k] = first;
        }
        self.code[at].1 = self.render(&i, &d, &post, &succ_labels);
        Ok(())
    }
}

/// Greedy allocation onto `k` hardware registers with spills to per-register
/// home slots in `stk`. Programs with at most `k` registers are returned
/// unchanged with an identity relocation.
pub fn allocate(p: &Program, k: usize) -> Result<RaWitness, AllocError> {
    if k == 0 {
        return Err(AllocError::NoRegisters);
    }
    if p.stack().is_some() || p.code.iter().any(|i| matches!(i, Instr::Fill { .. } | Instr::Spill { .. })) {
        return Err(AllocError::SourceUsesStack);
    }
    let n = p.regs.len();
    if n <= k {
        for pc in p.pcs() {
            let (u, d) = uses_defs(p.instr(pc));
            if u.union(&d).count() > k {
                return Err(AllocError::Infeasible { pc: p.label(pc).to_string(), need: u.union(&d).count(), k });
            }
        }
        let rho = vec![identity_map(p, p); p.code.len()];
        return Ok(RaWitness { src: p.clone(), tgt: p.clone(), phi: p.pcs().collect(), rho });
    }
    let live = ra_liveness(p)?;
    let entry_live = crate::liveness::live_in(p, &live, p.entry);
    let mut prio: Vec<Reg> = p.reg_ids().filter(|r| entry_live.has_reg(*r)).collect();
    prio.extend(p.reg_ids().filter(|r| !entry_live.has_reg(*r)));
    let hw_names: Vec<String> = prio[..k].iter().map(|r| p.reg_name(*r).to_string()).collect();
    let mut init = Assign { loc: vec![ALoc::Home; n], hw: vec![None; k] };
    for (i, r) in prio[..k].iter().enumerate() {
        init.loc[r.idx()] = ALoc::Hw(i);
        init.hw[i] = Some(*r);
    }
    let mut a = Alloc {
        p,
        k,
        hw_names,
        next_use: next_uses(p),
        code: Vec::new(),
        labels: p.labels.iter().cloned().collect(),
        d_in: vec![None; p.code.len()],
        head: vec![None; p.code.len()],
    };
    a.d_in[p.entry.idx()] = Some(init.clone());
    let mut order = reverse_postorder(p);
    let reached: BTreeSet<Pc> = order.iter().copied().collect();
    order.extend(p.pcs().filter(|pc| !reached.contains(pc)));
    // Emit in listing order but allocate in reverse postorder.
    let mut chunks: BTreeMap<Pc, Vec<(String, String, Assign)>> = BTreeMap::new();
    for pc in order {
        if a.d_in[pc.idx()].is_none() {
            a.d_in[pc.idx()] = Some(init.clone());
        }
        let before = a.code.len();
        a.process(pc)?;
        chunks.insert(pc, a.code.split_off(before));
    }
    let code: Vec<(String, String, Assign)> = p.pcs().flat_map(|pc| chunks.remove(&pc).unwrap_or_default()).collect();
    let resolve = |text: &str| -> String {
        let mut out = String::new();
        let mut rest = text;
        while let Some(i) = rest.find(PLACEHOLDER) {
            out.push_str(&rest[..i]);
            let tail = &rest[i + PLACEHOLDER.len()..];
            let end = tail.find(|c: char| !c.is_ascii_digit()).unwrap_or(tail.len());
            let s: usize = tail[..end].parse().expect("placeholder index");
            out.push_str(a.head[s].as_deref().unwrap_or(p.label(Pc(s as u32))));
            rest = &tail[end..];
        }
        out.push_str(rest);
        out
    };
    let mut b = ProgramBuilder::new();
    for m in &p.mems {
        b.mem(&m.name, m.size, m.level);
    }
    if code.iter().any(|(_, t, _)| t.contains("stk#")) {
        b.mem(STACK, n as u64, Level::Low);
    }
    b.entry(a.head[p.entry.idx()].as_deref().unwrap_or(p.label(p.entry)));
    b.width(p.width);
    for (l, t, _) in &code {
        b.instr(l, &resolve(t))?;
    }
    let tgt = b.build()?;
    let rho = code
        .iter()
        .map(|(_, _, d)| {
            d.loc
                .iter()
                .enumerate()
                .map(|(r, l)| {
                    Some(match l {
                        ALoc::Hw(h) => Loc::Reg(tgt.reg_of(&a.hw_names[*h]).expect("hardware register appears in target")),
                        ALoc::Home => Loc::Stk(r as u64),
                    })
                })
                .collect()
        })
        .collect();
    let phi = p.pcs().map(|pc| tgt.pc_of(p.label(pc)).expect("matched label")).collect();
    Ok(RaWitness { src: p.clone(), tgt, phi, rho })
}

/// Parses a program and witness from text; used by the CLI and tests.
pub fn load_witness(src: &str, tgt: &str, wit: &str) -> Result<RaWitness, String> {
    let s = parse_program(src).map_err(|e| format!("source: {e}"))?;
    let t = parse_program(tgt).map_err(|e| format!("target: {e}"))?;
    parse_ra_witness(&s, &t, wit).map_err(|e| e.to_string())
}
