//! Liveness of registers and memory cells, dead code elimination, and the
//! simulation witness for it.

use crate::dataflow::{Direction, FlowError, FlowProblem, FlowSolution, Lattice};
use crate::ir::{Addr, Instr, Pc, Program, Reg, Var};
use crate::sem::{enabled_directives, step_spec, Bounds, Directive, SpecState, State};
use crate::snippy::{SimInterval, SimWitness};

/// A set of registers and memory cells. Registers occupy bits `0..regs`,
/// cells follow in layout order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LiveSet {
    bits: Vec<u64>,
    regs: usize,
    len: usize,
}

impl LiveSet {
    pub fn empty(p: &Program) -> LiveSet {
        let len = p.regs.len() + p.total_cells();
        LiveSet { bits: vec![0; len.div_ceil(64)], regs: p.regs.len(), len }
    }

    pub fn all_regs(p: &Program) -> LiveSet {
        let mut s = LiveSet::empty(p);
        for r in p.reg_ids() {
            s.insert_reg(r);
        }
        s
    }

    pub fn all_mems(p: &Program) -> LiveSet {
        let mut s = LiveSet::empty(p);
        s.add_mems();
        s
    }

    pub fn full(p: &Program) -> LiveSet {
        let mut s = LiveSet::all_regs(p);
        s.add_mems();
        s
    }

    fn get(&self, i: usize) -> bool {
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    fn set(&mut self, i: usize, v: bool) {
        if v {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn has_reg(&self, r: Reg) -> bool {
        self.get(r.idx())
    }

    pub fn insert_reg(&mut self, r: Reg) {
        self.set(r.idx(), true)
    }

    pub fn remove_reg(&mut self, r: Reg) {
        self.set(r.idx(), false)
    }

    /// By flattened cell index.
    pub fn has_cell(&self, i: usize) -> bool {
        self.get(self.regs + i)
    }

    pub fn insert_cell(&mut self, i: usize) {
        self.set(self.regs + i, true)
    }

    pub fn remove_cell(&mut self, i: usize) {
        self.set(self.regs + i, false)
    }

    fn add_mems(&mut self) {
        for i in self.regs..self.len {
            self.set(i, true);
        }
    }

    pub fn union(&self, o: &LiveSet) -> LiveSet {
        LiveSet { bits: self.bits.iter().zip(&o.bits).map(|(a, b)| a | b).collect(), regs: self.regs, len: self.len }
    }

    pub fn is_subset(&self, o: &LiveSet) -> bool {
        self.bits.iter().zip(&o.bits).all(|(a, b)| a & !b == 0)
    }

    pub fn regs(&self) -> impl Iterator<Item = Reg> + '_ {
        (0..self.regs).filter(|&i| self.get(i)).map(|i| Reg(i as u32))
    }

    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len - self.regs).filter(|&i| self.has_cell(i))
    }

    pub fn render(&self, p: &Program) -> String {
        let cells = p.cells();
        let mut v: Vec<String> = self.regs().map(|r| p.reg_name(r).to_string()).collect();
        v.extend(self.cells().map(|i| format!("{}[{}]", p.var_name(cells[i].0), cells[i].1)));
        format!("{{{}}}", v.join(", "))
    }
}

pub struct LiveLattice {
    template: LiveSet,
}

impl LiveLattice {
    pub fn new(p: &Program) -> LiveLattice {
        LiveLattice { template: LiveSet::empty(p) }
    }
}

impl Lattice for LiveLattice {
    type Elem = LiveSet;
    fn bottom(&self) -> LiveSet {
        self.template.clone()
    }
    fn join(&self, a: &LiveSet, b: &LiveSet) -> LiveSet {
        a.union(b)
    }
    fn le(&self, a: &LiveSet, b: &LiveSet) -> bool {
        a.is_subset(b)
    }
    fn height(&self) -> usize {
        self.template.len
    }
}

fn stk_cell(p: &Program, slot: u64) -> usize {
    p.cell_index(p.stack().expect("stk declared"), slot)
}

/// Live-in from live-out for one instruction.
pub fn transfer(p: &Program, i: &Instr, out: &LiveSet) -> LiveSet {
    let mut l = out.clone();
    match *i {
        Instr::Exit | Instr::Nop { .. } | Instr::Sfence { .. } => {}
        Instr::Asgn { dst, lhs, rhs, .. } => {
            if l.has_reg(dst) {
                l.remove_reg(dst);
                l.insert_reg(lhs);
                l.insert_reg(rhs);
            }
        }
        Instr::Move { dst, src, .. } => {
            if l.has_reg(dst) {
                l.remove_reg(dst);
                l.insert_reg(src);
            }
        }
        Instr::Load { dst, var, addr, .. } => {
            if l.has_reg(dst) {
                l.remove_reg(dst);
                match addr {
                    Addr::Const(n) => l.insert_cell(p.cell_index(var, n)),
                    Addr::Reg(b) => {
                        l.add_mems();
                        l.insert_reg(b);
                    }
                }
            }
        }
        Instr::Fill { dst, slot, .. } => {
            if l.has_reg(dst) {
                l.remove_reg(dst);
                l.insert_cell(stk_cell(p, slot));
            }
        }
        Instr::Store { var, addr, src, .. } => match addr {
            Addr::Const(n) => {
                let c = p.cell_index(var, n);
                if l.has_cell(c) {
                    l.remove_cell(c);
                    l.insert_reg(src);
                }
            }
            Addr::Reg(b) => {
                l.insert_reg(b);
                l.insert_reg(src);
            }
        },
        Instr::Spill { slot, src, .. } => {
            let c = stk_cell(p, slot);
            if l.has_cell(c) {
                l.remove_cell(c);
                l.insert_reg(src);
            }
        }
        Instr::If { cond, .. } => l.insert_reg(cond),
        Instr::Slh { reg, .. } => l.insert_reg(reg),
    }
    l
}

/// Least solution of the backward problem; `facts[pc]` is the live-out set at `pc`.
pub fn liveness(p: &Program, exit_fact: &LiveSet) -> Result<FlowSolution<LiveSet>, FlowError> {
    let lat = LiveLattice::new(p);
    let mut edges = Vec::new();
    for pc in p.pcs() {
        for s in p.instr(pc).successors() {
            edges.push((pc.idx(), s.idx()));
        }
    }
    let exits: Vec<usize> = p.pcs().filter(|pc| matches!(p.instr(*pc), Instr::Exit)).map(|pc| pc.idx()).collect();
    let prob = FlowProblem {
        lattice: &lat,
        nodes: p.code.len(),
        edges,
        direction: Direction::Backward,
        transfer: Box::new(move |n, l: &LiveSet| transfer(p, &p.code[n], l)),
        init: exit_fact.clone(),
        init_nodes: exits,
        names: p.labels.clone(),
    };
    prob.solve()
}

pub fn live_in(p: &Program, sol: &FlowSolution<LiveSet>, pc: Pc) -> LiveSet {
    transfer(p, p.instr(pc), sol.get(pc.idx()))
}

pub fn live_ins(p: &Program, sol: &FlowSolution<LiveSet>) -> Vec<LiveSet> {
    p.pcs().map(|pc| live_in(p, sol, pc)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DceResult {
    pub target: Program,
    pub replaced: Vec<bool>,
    pub liveness: FlowSolution<LiveSet>,
}

/// Whether the instruction only writes a location that is dead afterwards.
pub fn is_dead(p: &Program, i: &Instr, out: &LiveSet) -> bool {
    match *i {
        Instr::Asgn { dst, .. } | Instr::Load { dst, .. } => !out.has_reg(dst),
        Instr::Store { var, addr: Addr::Const(n), .. } => !out.has_cell(p.cell_index(var, n)),
        _ => false,
    }
}

/// Replaces assignments, loads and constant-address stores whose destination
/// is dead by `nop`. Labels, registers and memory layout are kept.
pub fn dce_transform(p: &Program, sol: &FlowSolution<LiveSet>) -> DceResult {
    let mut t = p.clone();
    let mut replaced = vec![false; p.code.len()];
    for pc in p.pcs() {
        let i = p.instr(pc);
        if is_dead(p, i, sol.get(pc.idx())) {
            t.code[pc.idx()] = Instr::Nop { next: i.next().expect("single successor") };
            replaced[pc.idx()] = true;
        }
    }
    DceResult { target: t, replaced, liveness: sol.clone() }
}

pub fn dce(p: &Program) -> Result<DceResult, FlowError> {
    let sol = liveness(p, &LiveSet::full(p))?;
    Ok(dce_transform(p, &sol))
}

/// How DCE intervals are cut.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntervalPolicy {
    /// One interval per target step.
    Lockstep,
    /// A misprediction and the straight-line steps after it form one interval.
    SpecWindow,
}

/// The witness: states agree on everything live at their pcs, frame by frame,
/// and target steps over removed instructions are matched by source steps
/// that may pick a canonical location for unsafe accesses.
pub struct DceWitness {
    pub src: Program,
    pub tgt: Program,
    pub replaced: Vec<bool>,
    pub live_in: Vec<LiveSet>,
    pub policy: IntervalPolicy,
}

impl DceWitness {
    pub fn new(src: &Program, res: &DceResult, policy: IntervalPolicy) -> DceWitness {
        DceWitness {
            src: src.clone(),
            tgt: res.target.clone(),
            replaced: res.replaced.clone(),
            live_in: live_ins(src, &res.liveness),
            policy,
        }
    }

    fn agree(&self, s: &State, t: &State) -> bool {
        if s.pc != t.pc {
            return false;
        }
        let l = &self.live_in[s.pc.idx()];
        l.regs().all(|r| s.reg(r) == t.reg(r)) && l.cells().all(|c| s.mem[c] == t.mem[c])
    }

    /// Source directive matched with target directive `d` at this pair.
    pub fn dtf(&self, src: &SpecState, tgt: &SpecState, d: Directive) -> Directive {
        let pc = tgt.top().pc;
        if d != Directive::Step || !self.replaced[pc.idx()] {
            return d;
        }
        let canonical = Var(0);
        match *self.src.instr(pc) {
            Instr::Load { .. } | Instr::Store { .. } => {
                let en = enabled_directives(&self.src, src);
                if en.contains(&Directive::Step) {
                    Directive::Step
                } else if matches!(self.src.instr(pc), Instr::Load { .. }) {
                    Directive::Load(canonical, 0)
                } else {
                    Directive::Store(canonical, 0)
                }
            }
            _ => Directive::Step,
        }
    }

    fn single(&self, pair: &(SpecState, SpecState), d: Directive, b: Bounds) -> SimInterval<(SpecState, SpecState)> {
        let (s, t) = pair;
        let sd = self.dtf(s, t, d);
        let (t2, tl) = step_spec(&self.tgt, t, d).expect("enabled target directive");
        let (s2, sl) = step_spec(&self.src, s, sd).expect("matched source directive");
        let truncated = t2.len() > b.max_spec_depth;
        SimInterval {
            tgt_dirs: vec![d],
            tgt_leaks: vec![tl],
            src_dirs: vec![sd],
            src_leaks: vec![sl],
            end: (s2, t2),
            unguarded: false,
            truncated,
        }
    }
}

impl SimWitness for DceWitness {
    type Pair = (SpecState, SpecState);

    fn source(&self) -> &Program {
        &self.src
    }

    fn target(&self) -> &Program {
        &self.tgt
    }

    fn src_state<'a>(&self, pair: &'a Self::Pair) -> &'a SpecState {
        &pair.0
    }

    fn tgt_state<'a>(&self, pair: &'a Self::Pair) -> &'a SpecState {
        &pair.1
    }

    fn related(&self, (s, t): &Self::Pair) -> bool {
        s.len() == t.len() && s.0.iter().zip(&t.0).all(|(a, b)| self.agree(a, b))
    }

    fn map_initial(&self, tgt: &State) -> Self::Pair {
        (SpecState::new(tgt.clone()), SpecState::new(tgt.clone()))
    }

    fn intervals(&self, pair: &Self::Pair, b: Bounds) -> Vec<SimInterval<Self::Pair>> {
        let mut out = Vec::new();
        for d in enabled_directives(&self.tgt, &pair.1) {
            let mut iv = self.single(pair, d, b);
            if self.policy == IntervalPolicy::SpecWindow && d == Directive::Spec && !iv.truncated {
                loop {
                    let t = &iv.end.1;
                    let top = self.tgt.instr(t.top().pc);
                    if matches!(top, Instr::If { .. } | Instr::Exit | Instr::Sfence { .. }) {
                        break;
                    }
                    let en: Vec<Directive> = enabled_directives(&self.tgt, t).into_iter().filter(|d| *d != Directive::Rb).collect();
                    if en != [Directive::Step] {
                        break;
                    }
                    if iv.tgt_dirs.len() >= b.max_steps {
                        iv.truncated = true;
                        break;
                    }
                    let next = self.single(&iv.end, Directive::Step, b);
                    iv.tgt_dirs.extend(next.tgt_dirs);
                    iv.tgt_leaks.extend(next.tgt_leaks);
                    iv.src_dirs.extend(next.src_dirs);
                    iv.src_leaks.extend(next.src_leaks);
                    iv.end = next.end;
                }
            }
            out.push(iv);
        }
        out
    }
}
