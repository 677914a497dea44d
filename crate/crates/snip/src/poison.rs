//! Poison tracking across a register allocation: the product of source and
//! target runs, its static approximation, typability, and fence insertion.

use std::fmt;

use crate::dataflow::{Direction, FlowError, FlowProblem, FlowSolution, Lattice};
use crate::ir::{Addr, Instr, Pc, Program, Reg, Var, STACK};
use crate::liveness::{live_ins, LiveSet};
use crate::regalloc::{ra_liveness, validate_ra, Loc, RaDiagnostic, RaWitness};
use crate::sem::{enabled_directives, fmt_directive, step_spec, Bounds, Directive, Leak, SpecState, State};
use crate::snippy::{SimInterval, SimWitness};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PV {
    Bot,
    /// Healthy: source and target agree.
    H,
    /// Weakly poisoned: the target holds 0.
    W,
    P,
}

impl PV {
    pub fn join(self, o: PV) -> PV {
        match (self, o) {
            (PV::Bot, x) | (x, PV::Bot) => x,
            (a, b) if a == b => a,
            _ => PV::P,
        }
    }

    pub fn le(self, o: PV) -> bool {
        self == o || self == PV::Bot || o == PV::P
    }

    pub fn symbol(self) -> &'static str {
        match self {
            PV::Bot => "-",
            PV::H => "H",
            PV::W => "W",
            PV::P => "P",
        }
    }
}

impl fmt::Display for PV {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Poison values for source registers followed by source memory cells.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PoisonType(pub Vec<PV>);

impl PoisonType {
    pub fn uniform(len: usize, v: PV) -> PoisonType {
        PoisonType(vec![v; len])
    }

    pub fn join(&self, o: &PoisonType) -> PoisonType {
        PoisonType(self.0.iter().zip(&o.0).map(|(a, b)| a.join(*b)).collect())
    }

    pub fn le(&self, o: &PoisonType) -> bool {
        self.0.iter().zip(&o.0).all(|(a, b)| PV::le(*a, *b))
    }
}

/// Layout of poison types for a source program.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub regs: usize,
    pub cells: usize,
}

impl Layout {
    pub fn of(p: &Program) -> Layout {
        Layout { regs: p.regs.len(), cells: p.total_cells() }
    }

    pub fn len(&self) -> usize {
        self.regs + self.cells
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn reg(&self, r: Reg) -> usize {
        r.idx()
    }

    pub fn cell(&self, i: usize) -> usize {
        self.regs + i
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProductState {
    pub src: SpecState,
    pub tgt: SpecState,
    pub pis: Vec<PoisonType>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProductTransition {
    pub tgt_dir: Directive,
    pub tgt_leak: Leak,
    /// `None` while the target runs shuffle code and the source stutters.
    pub src: Option<(Directive, Leak)>,
    pub rule: &'static str,
    pub next: ProductState,
}

/// Precomputed data for stepping the product of a witness.
pub struct Product<'a> {
    pub w: &'a RaWitness,
    pub layout: Layout,
    image: Vec<Option<Pc>>,
    live: Vec<LiveSet>,
    stk: Option<Var>,
}

impl<'a> Product<'a> {
    pub fn new(w: &'a RaWitness) -> Result<Product<'a>, FlowError> {
        let live = live_ins(&w.src, &ra_liveness(&w.src)?);
        Ok(Product { w, layout: Layout::of(&w.src), image: w.image(), live, stk: w.tgt.stack() })
    }

    pub fn healthy(&self) -> PoisonType {
        PoisonType::uniform(self.layout.len(), PV::H)
    }

    pub fn initial(&self, t: &State) -> ProductState {
        ProductState { src: SpecState::new(self.w.map_state(t)), tgt: SpecState::new(t.clone()), pis: vec![self.healthy()] }
    }

    pub fn is_matched(&self, t: Pc) -> bool {
        self.image[t.idx()].is_some()
    }

    pub fn src_pc_of(&self, t: Pc) -> Option<Pc> {
        self.w.src_pc_of(&self.image, t)
    }

    fn tgt_value(&self, t: &State, l: Loc) -> u64 {
        match l {
            Loc::Reg(r) => t.reg(r),
            Loc::Stk(n) => self.stk.map(|v| t.cell(&self.w.tgt, v, n)).unwrap_or(0),
        }
    }

    /// Source and target frames agree up to poison and relocation.
    pub fn frame_agrees(&self, s: &State, t: &State, pi: &PoisonType) -> bool {
        let w = self.w;
        if self.src_pc_of(t.pc) != Some(s.pc) {
            return false;
        }
        for a in self.live[s.pc.idx()].regs() {
            let Some(l) = w.loc(t.pc, a) else { return false };
            let tv = self.tgt_value(t, l);
            let ok = match pi.0[self.layout.reg(a)] {
                PV::H => tv == s.reg(a),
                PV::W => tv == 0,
                _ => true,
            };
            if !ok {
                return false;
            }
        }
        for (i, (v, o)) in w.src.cells().into_iter().enumerate() {
            let tv = w.tgt.var_of(w.src.var_name(v)).map(|x| t.cell(&w.tgt, x, o)).unwrap_or(0);
            let ok = match pi.0[self.layout.cell(i)] {
                PV::H => tv == s.mem[i],
                PV::W => tv == 0,
                _ => true,
            };
            if !ok {
                return false;
            }
        }
        true
    }

    pub fn approx(&self, st: &ProductState) -> bool {
        st.src.len() == st.tgt.len()
            && st.src.len() == st.pis.len()
            && st.src.0.iter().zip(&st.tgt.0).zip(&st.pis).all(|((s, t), pi)| self.frame_agrees(s, t, pi))
    }

    fn src_var(&self, tv: Var) -> Option<Var> {
        self.w.src.var_of(self.w.tgt.var_name(tv))
    }

    fn cell_ix(&self, v: Var, o: u64) -> usize {
        self.layout.cell(self.w.src.cell_index(v, o))
    }

    /// Source registers that live in stack slot `m` after the target step.
    fn regs_at_slot(&self, tpc: Pc, m: u64) -> Vec<usize> {
        self.w.src.reg_ids().filter(|a| self.w.loc(tpc, *a) == Some(Loc::Stk(m))).map(|a| self.layout.reg(a)).collect()
    }

    /// Replays one enabled target directive. With `guarded` the poison guards
    /// of the rules apply; without, a poisoned guard is stepped through and
    /// the results are poisoned instead (used to expose what leaks there).
    pub fn replay(&self, st: &ProductState, d: Directive, guarded: bool) -> Option<ProductTransition> {
        let w = self.w;
        let (sp, tp) = (&w.src, &w.tgt);
        let len = st.tgt.len();
        if !enabled_directives(tp, &st.tgt).contains(&d) {
            return None;
        }
        let (tnext, tleak) = step_spec(tp, &st.tgt, d)?;
        let t = st.tgt.top();
        let s = st.src.top();
        let mut pis = st.pis.clone();

        if d == Directive::Rb {
            let (snext, sleak) = step_spec(sp, &st.src, Directive::Rb)?;
            pis.pop();
            return Some(ProductTransition {
                tgt_dir: d,
                tgt_leak: tleak,
                src: Some((Directive::Rb, sleak)),
                rule: "rollback",
                next: ProductState { src: snext, tgt: tnext, pis },
            });
        }

        let ti = *tp.instr(t.pc);
        if !self.is_matched(t.pc) {
            let pi = pis.last_mut().unwrap();
            if let Instr::Slh { reg, .. } = ti {
                for a in sp.reg_ids() {
                    if w.loc(t.pc, a) == Some(Loc::Reg(reg)) && len >= 2 {
                        pi.0[self.layout.reg(a)] = PV::W;
                    }
                }
            }
            return Some(ProductTransition {
                tgt_dir: d,
                tgt_leak: tleak,
                src: None,
                rule: "shuffle",
                next: ProductState { src: st.src.clone(), tgt: tnext, pis },
            });
        }

        let si = *sp.instr(s.pc);
        let tsucc = ti.next();
        let l = self.layout;
        let pi = pis.last().unwrap().clone();
        let pv = |r: Reg| pi.0[l.reg(r)];
        let mut np = pi.clone();
        let mut unguarded = false;
        let (sd, rule) = match si {
            Instr::Exit => return None,
            Instr::Nop { .. } | Instr::Sfence { .. } => (Directive::Step, "step"),
            Instr::Asgn { dst, lhs, rhs, .. } => {
                np.0[l.reg(dst)] = if pv(lhs) == PV::H && pv(rhs) == PV::H { PV::H } else { PV::P };
                (Directive::Step, "asgn")
            }
            Instr::Move { dst, src, .. } => {
                np.0[l.reg(dst)] = pv(src);
                (Directive::Step, "move")
            }
            Instr::Slh { reg, .. } => {
                np.0[l.reg(reg)] = if len == 1 { pv(reg) } else { PV::H };
                (Directive::Step, "slh")
            }
            Instr::If { cond, .. } => {
                if pv(cond) != PV::H {
                    if guarded {
                        return None;
                    }
                    unguarded = true;
                }
                (d, if d == Directive::Spec { "healthy-spec" } else { "healthy-branch" })
            }
            Instr::Fill { .. } | Instr::Spill { .. } => return None,
            Instr::Load { dst, var, addr, .. } => match addr {
                Addr::Const(n) => {
                    np.0[l.reg(dst)] = pi.0[self.cell_ix(var, n)];
                    (Directive::Step, "load-const")
                }
                Addr::Reg(b) => {
                    let safe = s.reg(b) < sp.size(var);
                    match (pv(b), d) {
                        (PV::H, Directive::Step) => {
                            np.0[l.reg(dst)] = pi.0[self.cell_ix(var, s.reg(b))];
                            (Directive::Step, "healthy-load-safe")
                        }
                        (PV::H, Directive::Load(y, _)) if Some(y) == self.stk => {
                            np.0[l.reg(dst)] = PV::P;
                            (Directive::Load(var, 0), "poison-load-stkunsafe")
                        }
                        (PV::H, Directive::Load(y, m)) => {
                            let ys = self.src_var(y)?;
                            np.0[l.reg(dst)] = pi.0[self.cell_ix(ys, m)];
                            (Directive::Load(ys, m), "healthy-load-unsafe")
                        }
                        (PV::W, _) => {
                            np.0[l.reg(dst)] = PV::P;
                            if safe {
                                (Directive::Step, "poison-load-safe")
                            } else {
                                (Directive::Load(var, 0), "poison-load-unsafe")
                            }
                        }
                        _ => {
                            if guarded {
                                return None;
                            }
                            unguarded = true;
                            np.0[l.reg(dst)] = PV::P;
                            (self.relaxed_source(safe, d, var, false), "unguarded-load")
                        }
                    }
                }
            },
            Instr::Store { var, addr, src, .. } => match addr {
                Addr::Const(n) => {
                    np.0[self.cell_ix(var, n)] = pv(src);
                    (Directive::Step, "store-const")
                }
                Addr::Reg(b) => {
                    let safe = s.reg(b) < sp.size(var);
                    match (pv(b), d) {
                        (PV::H, Directive::Step) => {
                            np.0[self.cell_ix(var, s.reg(b))] = pv(src);
                            (Directive::Step, "healthy-store-safe")
                        }
                        (PV::H, Directive::Store(y, m)) if Some(y) == self.stk => {
                            for i in self.regs_at_slot(tsucc?, m) {
                                np.0[i] = PV::P;
                            }
                            np.0[self.cell_ix(var, 0)] = PV::P;
                            (Directive::Store(var, 0), "poison-store-stkunsafe")
                        }
                        (PV::H, Directive::Store(y, m)) => {
                            let ys = self.src_var(y)?;
                            np.0[self.cell_ix(ys, m)] = pv(src);
                            (Directive::Store(ys, m), "healthy-store-unsafe")
                        }
                        (PV::W, _) => {
                            if safe {
                                np.0[self.cell_ix(var, s.reg(b))] = PV::P;
                                np.0[self.cell_ix(var, 0)] = PV::P;
                                (Directive::Step, "poison-store-safe")
                            } else {
                                np.0[self.cell_ix(var, 0)] = pv(src);
                                (Directive::Store(var, 0), "poison-store-unsafe")
                            }
                        }
                        _ => {
                            if guarded {
                                return None;
                            }
                            unguarded = true;
                            let sd = self.relaxed_source(safe, d, var, true);
                            let tv = tp.var_of(sp.var_name(var));
                            match d {
                                Directive::Step => {
                                    if let Some(tv) = tv {
                                        let _ = tv;
                                        np.0[self.cell_ix(var, t.reg(self.tgt_addr_reg(ti)?))] = PV::P;
                                    }
                                }
                                Directive::Store(y, m) if Some(y) == self.stk => {
                                    for i in self.regs_at_slot(tsucc?, m) {
                                        np.0[i] = PV::P;
                                    }
                                }
                                Directive::Store(y, m) => np.0[self.cell_ix(self.src_var(y)?, m)] = PV::P,
                                _ => {}
                            }
                            match sd {
                                Directive::Step => np.0[self.cell_ix(var, s.reg(b))] = PV::P,
                                Directive::Store(y, m) => np.0[self.cell_ix(y, m)] = PV::P,
                                _ => {}
                            }
                            (sd, "unguarded-store")
                        }
                    }
                }
            },
        };
        let (snext, sleak) = step_spec(sp, &st.src, sd)?;
        match d {
            Directive::Spec => {
                *pis.last_mut().unwrap() = np.clone();
                pis.push(np);
            }
            _ => *pis.last_mut().unwrap() = np,
        }
        let rule = if unguarded && rule.starts_with("healthy") { "unguarded-branch" } else { rule };
        Some(ProductTransition {
            tgt_dir: d,
            tgt_leak: tleak,
            src: Some((sd, sleak)),
            rule,
            next: ProductState { src: snext, tgt: tnext, pis },
        })
    }

    fn tgt_addr_reg(&self, ti: Instr) -> Option<Reg> {
        match ti {
            Instr::Load { addr: Addr::Reg(b), .. } | Instr::Store { addr: Addr::Reg(b), .. } => Some(b),
            _ => None,
        }
    }

    fn relaxed_source(&self, safe: bool, d: Directive, var: Var, store: bool) -> Directive {
        if safe {
            return Directive::Step;
        }
        let mirror = match d {
            Directive::Load(y, m) | Directive::Store(y, m) if Some(y) != self.stk => self.src_var(y).map(|ys| (ys, m)),
            _ => None,
        };
        let (v, m) = mirror.unwrap_or((var, 0));
        if store {
            Directive::Store(v, m)
        } else {
            Directive::Load(v, m)
        }
    }

    pub fn replay_target_step(&self, st: &ProductState, d: Directive) -> Option<ProductTransition> {
        self.replay(st, d, true)
    }

    /// Guarded transitions for every enabled target directive.
    pub fn product_transitions(&self, st: &ProductState) -> Vec<ProductTransition> {
        enabled_directives(&self.w.tgt, &st.tgt).into_iter().filter_map(|d| self.replay(st, d, true)).collect()
    }

    pub fn fmt_transition(&self, tr: &ProductTransition) -> String {
        let src = match &tr.src {
            None => "ε".to_string(),
            Some((d, l)) => format!("{} / {}", fmt_directive(&self.w.src, d), l),
        };
        format!(
            "{} / {} ∥ {} [{}] -> {} | {}",
            fmt_directive(&self.w.tgt, &tr.tgt_dir),
            tr.tgt_leak,
            src,
            tr.rule,
            tr.next.src.fmt_pcs(&self.w.src),
            tr.next.tgt.fmt_pcs(&self.w.tgt)
        )
    }

    pub fn render_pi(&self, pi: &PoisonType) -> String {
        let p = &self.w.src;
        let mut parts: Vec<String> = p.reg_ids().map(|r| format!("{}={}", p.reg_name(r), pi.0[self.layout.reg(r)])).collect();
        for (i, (v, o)) in p.cells().into_iter().enumerate() {
            parts.push(format!("{}[{o}]={}", p.var_name(v), pi.0[self.layout.cell(i)]));
        }
        parts.join(" ")
    }
}

/// Node of the static analysis: a target pc with its source counterpart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ProdPc {
    Matched { src: Pc, tgt: Pc },
    Shuffle { src: Pc, tgt: Pc },
}

pub struct PoisonLattice {
    len: usize,
}

impl Lattice for PoisonLattice {
    type Elem = Option<PoisonType>;
    fn bottom(&self) -> Self::Elem {
        None
    }
    fn join(&self, a: &Self::Elem, b: &Self::Elem) -> Self::Elem {
        match (a, b) {
            (None, x) | (x, None) => x.clone(),
            (Some(a), Some(b)) => Some(a.join(b)),
        }
    }
    fn le(&self, a: &Self::Elem, b: &Self::Elem) -> bool {
        match (a, b) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(a), Some(b)) => a.le(b),
        }
    }
    fn height(&self) -> usize {
        2 * self.len + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StaticPoison {
    /// Per target pc; `None` if the analysis never reaches it.
    pub facts: Vec<Option<PoisonType>>,
    pub nodes: Vec<Option<ProdPc>>,
}

impl Product<'_> {
    pub fn prod_pc(&self, t: Pc) -> Option<ProdPc> {
        match self.image[t.idx()] {
            Some(s) => Some(ProdPc::Matched { src: s, tgt: t }),
            None => self.src_pc_of(t).map(|s| ProdPc::Shuffle { src: s, tgt: t }),
        }
    }

    /// Static transfer along target pc `t`.
    pub fn transfer(&self, t: Pc, pi: &PoisonType) -> PoisonType {
        let w = self.w;
        let l = self.layout;
        let mut np = pi.clone();
        let healthy = self.healthy();
        let Some(s) = self.image[t.idx()] else {
            return match *w.tgt.instr(t) {
                Instr::Slh { reg, .. } => {
                    for a in w.src.reg_ids() {
                        if w.loc(t, a) == Some(Loc::Reg(reg)) {
                            np.0[l.reg(a)] = PV::W;
                        }
                    }
                    np
                }
                Instr::Sfence { .. } => healthy,
                _ => np,
            };
        };
        let pv = |r: Reg| pi.0[l.reg(r)];
        match *w.src.instr(s) {
            Instr::Exit | Instr::Nop { .. } => {}
            Instr::Sfence { .. } => return healthy,
            Instr::Slh { reg, .. } => np.0[l.reg(reg)] = PV::H,
            Instr::Asgn { dst, lhs, rhs, .. } => {
                np.0[l.reg(dst)] = if pv(lhs) == PV::H && pv(rhs) == PV::H { PV::H } else { PV::P };
            }
            Instr::Move { dst, src, .. } => np.0[l.reg(dst)] = pv(src),
            Instr::Load { dst, addr: Addr::Reg(_), .. } => np.0[l.reg(dst)] = PV::P,
            Instr::Load { dst, var, addr: Addr::Const(n), .. } => np.0[l.reg(dst)] = pi.0[self.cell_ix(var, n)],
            Instr::Store { var, addr: Addr::Const(n), src, .. } => np.0[self.cell_ix(var, n)] = pv(src),
            Instr::Store { var, addr: Addr::Reg(_), src, .. } => {
                let c = pv(src);
                for i in 0..l.cells {
                    np.0[l.cell(i)] = np.0[l.cell(i)].join(c);
                }
                for r in w.src.reg_ids() {
                    np.0[l.reg(r)] = PV::P;
                }
                for o in 0..w.src.size(var) {
                    np.0[self.cell_ix(var, o)] = PV::P;
                }
            }
            Instr::If { cond, .. } => {
                if pv(cond) != PV::H {
                    return PoisonType::uniform(l.len(), PV::P);
                }
            }
            Instr::Fill { .. } | Instr::Spill { .. } => {}
        }
        np
    }

    pub fn poison_analysis(&self) -> Result<StaticPoison, FlowError> {
        let w = self.w;
        let lat = PoisonLattice { len: self.layout.len() };
        let mut edges = Vec::new();
        for t in w.tgt.pcs() {
            for s in w.tgt.instr(t).successors() {
                edges.push((t.idx(), s.idx()));
            }
        }
        let prob = FlowProblem {
            lattice: &lat,
            nodes: w.tgt.code.len(),
            edges,
            direction: Direction::Forward,
            transfer: Box::new(|n, x: &Option<PoisonType>| x.as_ref().map(|pi| self.transfer(Pc(n as u32), pi))),
            init: Some(self.healthy()),
            init_nodes: vec![w.tgt.entry.idx()],
            names: w.tgt.labels.clone(),
        };
        let sol: FlowSolution<Option<PoisonType>> = prob.solve()?;
        Ok(StaticPoison { facts: sol.facts, nodes: w.tgt.pcs().map(|t| self.prod_pc(t)).collect() })
    }

    /// The poison stack a product state is bounded by: healthy at the bottom,
    /// the static fact at each speculative frame's pc.
    pub fn static_stack(&self, sp: &StaticPoison, tgt: &SpecState) -> Vec<Option<PoisonType>> {
        tgt.0
            .iter()
            .enumerate()
            .map(|(i, f)| if i == 0 { Some(self.healthy()) } else { sp.facts[f.pc.idx()].clone() })
            .collect()
    }

    pub fn render_static(&self, sp: &StaticPoison) -> Vec<String> {
        let w = self.w;
        w.tgt
            .pcs()
            .map(|t| {
                let node = match sp.nodes[t.idx()] {
                    Some(ProdPc::Matched { src, .. }) => format!("({}, {})", w.src.label(src), w.tgt.label(t)),
                    Some(ProdPc::Shuffle { src, .. }) => format!("({}, {})*", w.src.label(src), w.tgt.label(t)),
                    None => format!("(?, {})", w.tgt.label(t)),
                };
                match &sp.facts[t.idx()] {
                    None => format!("{node}: unreached"),
                    Some(pi) => format!("{node}: {}", self.render_pi(pi)),
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Constraint {
    /// Address registers must be healthy or weakly poisoned.
    Address,
    /// Branch conditions must be healthy.
    Branch,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Constraint::Address => "address",
            Constraint::Branch => "branch",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TypeViolation {
    pub src: Pc,
    pub tgt: Pc,
    pub reg: Reg,
    pub kind: Constraint,
    pub value: PV,
}

impl Product<'_> {
    /// Violations ordered by target pc, then register name.
    pub fn check_poison_typable(&self, sp: &StaticPoison) -> Vec<TypeViolation> {
        let w = self.w;
        let mut out = Vec::new();
        for t in w.tgt.pcs() {
            let Some(s) = self.image[t.idx()] else { continue };
            let Some(pi) = &sp.facts[t.idx()] else { continue };
            let (reg, kind) = match *w.src.instr(s) {
                Instr::Load { addr: Addr::Reg(b), .. } | Instr::Store { addr: Addr::Reg(b), .. } => (b, Constraint::Address),
                Instr::If { cond, .. } => (cond, Constraint::Branch),
                _ => continue,
            };
            let v = pi.0[self.layout.reg(reg)];
            let ok = match kind {
                Constraint::Address => matches!(v, PV::H | PV::W),
                Constraint::Branch => v == PV::H,
            };
            if !ok {
                out.push(TypeViolation { src: s, tgt: t, reg, kind, value: v });
            }
        }
        out
    }

    pub fn fmt_violation(&self, v: &TypeViolation) -> String {
        format!(
            "{} constraint at ({}, {}): `{}` is {}",
            v.kind,
            self.w.src.label(v.src),
            self.w.tgt.label(v.tgt),
            self.w.src.reg_name(v.reg),
            v.value
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Insertion {
    pub label: String,
    pub instr: String,
    pub before: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct FixReport {
    pub iterations: usize,
    pub inserted: Vec<Insertion>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum FixError {
    #[error("fix did not converge within {0} iterations")]
    IterationCap(usize),
    #[error("fixed witness no longer validates: {0}")]
    Invalid(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

fn fresh_label(p: &Program, base: &str, kind: &str) -> String {
    let mut k = 0;
    loop {
        let l = if k == 0 { format!("{base}.{kind}") } else { format!("{base}.{kind}{k}") };
        if p.pc_of(&l).is_none() {
            return l;
        }
        k += 1;
    }
}

/// Inserts `instr` (whose successor is rewritten to `before`) as a new pc
/// right before `before`, redirecting every edge into `before`.
pub fn insert_before(w: &RaWitness, before: Pc, label: String, instr: Instr) -> RaWitness {
    let at = before.idx();
    let shift = |p: Pc| if p.idx() >= at { Pc(p.0 + 1) } else { p };
    let new = Pc(at as u32);
    let old_shifted = Pc(at as u32 + 1);
    let mut tgt = w.tgt.clone();
    let mut code: Vec<Instr> = tgt.code.iter().map(|i| i.map_successors(|s| if s == before { new } else { shift(s) })).collect();
    code.insert(at, instr.map_successors(|_| old_shifted));
    tgt.code = code;
    tgt.labels.insert(at, label);
    tgt.entry = if tgt.entry == before { new } else { shift(tgt.entry) };
    let mut rho = w.rho.clone();
    rho.insert(at, w.rho[at].clone());
    let phi = w.phi.iter().map(|p| shift(*p)).collect();
    RaWitness { src: w.src.clone(), tgt, phi, rho }
}

/// Repeatedly inserts `slh` (address violations) or `sfence` (branch
/// violations) before the first violating matched pc until typable.
pub fn fix_ra(w: &RaWitness) -> Result<(RaWitness, FixReport), FixError> {
    let live = ra_liveness(&w.src)?;
    let mut cur = w.clone();
    let mut report = FixReport::default();
    let cap = w.tgt.code.len() * w.src.regs.len().max(1) + 1;
    loop {
        let prod = Product::new(&cur)?;
        let sp = prod.poison_analysis()?;
        let vs = prod.check_poison_typable(&sp);
        let Some(v) = vs.first() else { return Ok((cur, report)) };
        if report.iterations >= cap {
            return Err(FixError::IterationCap(cap));
        }
        report.iterations += 1;
        let before = cur.tgt.label(v.tgt).to_string();
        let (instr, kind) = match v.kind {
            Constraint::Address => {
                let Some(Loc::Reg(r)) = cur.loc(v.tgt, v.reg) else {
                    return Err(FixError::Invalid(format!("address register not in a register at {before}")));
                };
                (Instr::Slh { reg: r, next: v.tgt }, "slh")
            }
            Constraint::Branch => (Instr::Sfence { next: v.tgt }, "sfence"),
        };
        let label = fresh_label(&cur.tgt, &before, kind);
        let reason = prod.fmt_violation(v);
        let next = insert_before(&cur, v.tgt, label.clone(), instr);
        let text = next.tgt.fmt_instr(next.tgt.instr(next.tgt.pc_of(&label).unwrap()));
        report.inserted.push(Insertion { label, instr: text, before, reason });
        let diags: Vec<RaDiagnostic> = validate_ra(&next, &live);
        if let Some(d) = diags.first() {
            return Err(FixError::Invalid(d.to_string()));
        }
        cur = next;
    }
}

/// The register allocation witness as a simulation: pairs are product states,
/// intervals run one matched step followed by the shuffle code up to the next
/// matched pc, possibly ending in a rollback.
pub struct RaSim<'a> {
    pub prod: Product<'a>,
}

impl<'a> RaSim<'a> {
    pub fn new(w: &'a RaWitness) -> Result<RaSim<'a>, FlowError> {
        Ok(RaSim { prod: Product::new(w)? })
    }

    fn extend(&self, iv: &mut SimInterval<ProductState>, tr: &ProductTransition) {
        iv.tgt_dirs.push(tr.tgt_dir);
        iv.tgt_leaks.push(tr.tgt_leak);
        if let Some((d, l)) = tr.src {
            iv.src_dirs.push(d);
            iv.src_leaks.push(l);
        }
        iv.end = tr.next.clone();
    }

    /// Continues `iv` through shuffle code, branching on rollbacks.
    fn tail(&self, iv: SimInterval<ProductState>, b: Bounds, out: &mut Vec<SimInterval<ProductState>>) {
        let t = iv.end.tgt.top().pc;
        if self.prod.is_matched(t) || iv.truncated {
            out.push(iv);
            return;
        }
        if iv.tgt_dirs.len() >= b.max_steps {
            let mut iv = iv;
            iv.truncated = true;
            out.push(iv);
            return;
        }
        for d in enabled_directives(&self.prod.w.tgt, &iv.end.tgt) {
            let Some(tr) = self.prod.replay(&iv.end, d, true) else { continue };
            let mut next = iv.clone();
            self.extend(&mut next, &tr);
            if d == Directive::Rb {
                out.push(next);
            } else {
                self.tail(next, b, out);
            }
        }
    }
}

impl SimWitness for RaSim<'_> {
    type Pair = ProductState;

    fn source(&self) -> &Program {
        &self.prod.w.src
    }

    fn target(&self) -> &Program {
        &self.prod.w.tgt
    }

    fn src_state<'a>(&self, pair: &'a ProductState) -> &'a SpecState {
        &pair.src
    }

    fn tgt_state<'a>(&self, pair: &'a ProductState) -> &'a SpecState {
        &pair.tgt
    }

    fn related(&self, pair: &ProductState) -> bool {
        self.prod.approx(pair)
    }

    fn map_initial(&self, tgt: &State) -> ProductState {
        self.prod.initial(tgt)
    }

    fn intervals(&self, pair: &ProductState, b: Bounds) -> Vec<SimInterval<ProductState>> {
        let mut out = Vec::new();
        for d in enabled_directives(&self.prod.w.tgt, &pair.tgt) {
            let (tr, unguarded) = match self.prod.replay(pair, d, true) {
                Some(tr) => (tr, false),
                None => match self.prod.replay(pair, d, false) {
                    Some(tr) => (tr, true),
                    None => continue,
                },
            };
            let mut iv = SimInterval {
                tgt_dirs: vec![],
                tgt_leaks: vec![],
                src_dirs: vec![],
                src_leaks: vec![],
                end: pair.clone(),
                unguarded,
                truncated: false,
            };
            self.extend(&mut iv, &tr);
            iv.truncated = iv.end.tgt.len() > b.max_spec_depth;
            if d == Directive::Rb {
                out.push(iv);
            } else {
                self.tail(iv, b, &mut out);
            }
        }
        out
    }
}

/// `stk` is excluded from poison types: it is a target-only variable.
pub fn stack_name() -> &'static str {
    STACK
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regalloc::load_witness;

    const SRC: &str = "\
mem buf 8 low
mem key 1 high
entry 0
0: load secret <- key[#0] -> 1
1: a = b lt n -> 2
2: if a ? 3 : 4
3: store buf[b] <- secret -> 4
4: if bytes ? 5 : 5
5: ret
";

    const TGT: &str = "\
mem buf 8 low
mem key 1 high
mem stk 1 low
entry l
l: load secret <- key[#0] -> a
a: a = b lt n -> b
b: spill stk#0 <- bytes -> c
c: if a ? d : e
d: store buf[b] <- secret -> e
e: fill a <- stk#0 -> f
f: if a ? g : g
g: ret
";

    const WIT: &str = "phi: 0 -> l\nphi: 1 -> a\nphi: 2 -> c\nphi: 3 -> d\nphi: 4 -> f\nphi: 5 -> g\nrho c: bytes -> stk#0\nrho d: a -> _\nrho f: bytes -> a\n";

    #[test]
    fn join_table() {
        assert_eq!(PV::H.join(PV::W), PV::P);
        assert_eq!(PV::Bot.join(PV::W), PV::W);
        assert!(PV::H.le(PV::P) && !PV::H.le(PV::W) && PV::Bot.le(PV::H));
    }

    #[test]
    fn one_violation_then_fixed() {
        let w = load_witness(SRC, TGT, WIT).unwrap();
        let prod = Product::new(&w).unwrap();
        let sp = prod.poison_analysis().unwrap();
        let vs = prod.check_poison_typable(&sp);
        assert_eq!(vs.len(), 1);
        assert_eq!(prod.fmt_violation(&vs[0]), "branch constraint at (4, f): `bytes` is P");
        let (fixed, rep) = fix_ra(&w).unwrap();
        assert_eq!(rep.inserted.len(), 1);
        assert_eq!(rep.inserted[0].instr, "sfence -> f");
        let e = fixed.tgt.pc_of("e").unwrap();
        assert_eq!(fixed.tgt.label(fixed.tgt.instr(e).next().unwrap()), "f.sfence");
        let p2 = Product::new(&fixed).unwrap();
        assert!(p2.check_poison_typable(&p2.poison_analysis().unwrap()).is_empty());
        let (again, rep2) = fix_ra(&fixed).unwrap();
        assert_eq!(again, fixed);
        assert_eq!(rep2.iterations, 0);
    }

    #[test]
    fn attack_run_poisons_bytes() {
        let w = load_witness(SRC, TGT, WIT).unwrap();
        let prod = Product::new(&w).unwrap();
        let t = &w.tgt;
        let mut s = State::zero(t);
        s.regs[t.reg_of("b").unwrap().idx()] = 8;
        s.regs[t.reg_of("n").unwrap().idx()] = 8;
        s.regs[t.reg_of("bytes").unwrap().idx()] = 32;
        s.set_cell(t, t.var_of("key").unwrap(), 0, 42);
        let mut st = prod.initial(&s);
        let stk = t.var_of("stk").unwrap();
        for d in [Directive::Step, Directive::Step, Directive::Step, Directive::Spec, Directive::Store(stk, 0), Directive::Step] {
            let tr = prod.replay_target_step(&st, d).unwrap_or_else(|| panic!("stuck on {d:?}"));
            if d == Directive::Store(stk, 0) {
                assert_eq!(tr.rule, "poison-store-stkunsafe");
                assert_eq!(tr.src.unwrap().0, Directive::Store(w.src.var_of("buf").unwrap(), 0));
            }
            st = tr.next;
            assert!(prod.approx(&st));
        }
        assert_eq!(t.label(st.tgt.top().pc), "f");
        let pi = st.pis.last().unwrap();
        assert_eq!(pi.0[w.src.reg_of("bytes").unwrap().idx()], PV::P);
        assert!(prod.product_transitions(&st).iter().all(|tr| tr.tgt_dir == Directive::Rb));
    }
}
