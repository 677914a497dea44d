//! Low-equivalence, safety, and bounded speculative non-interference checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ir::{Instr, Level, Program, Var};
use crate::sem::{enabled_directives, step_spec, step_spec_free, Bounds, Directive, Leak, SpecState, State};

/// Same pc, same registers, same low memory.
pub fn low_equivalent(p: &Program, s1: &State, s2: &State) -> bool {
    if s1.pc != s2.pc || s1.regs != s2.regs {
        return false;
    }
    p.cells()
        .into_iter()
        .filter(|(v, _)| p.mems[v.idx()].level == Level::Low)
        .all(|(v, o)| s1.cell(p, v, o) == s2.cell(p, v, o))
}

/// Flattened indices of every high cell, in layout order.
pub fn high_cells(p: &Program) -> Vec<(Var, u64)> {
    p.cells().into_iter().filter(|(v, _)| p.mems[v.idx()].level == Level::High).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Safety {
    Safe,
    /// Index of the first step that needs an out-of-bounds directive.
    Unsafe(usize),
    BoundExhausted,
}

/// Runs the deterministic speculation-free semantics from `s0`.
pub fn check_safety(p: &Program, s0: &State, max_steps: usize) -> Safety {
    let mut s = s0.clone();
    for i in 0..max_steps {
        let d = match p.instr(s.pc) {
            Instr::Exit => return Safety::Safe,
            Instr::If { .. } => Directive::If,
            _ => Directive::Step,
        };
        match step_spec_free(p, &s, d) {
            Some((n, _)) => s = n,
            None => return Safety::Unsafe(i),
        }
    }
    if matches!(p.instr(s.pc), Instr::Exit) {
        Safety::Safe
    } else {
        Safety::BoundExhausted
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Divergence {
    DifferentLeak(Leak, Leak),
    DifferentEnabled(Vec<Directive>, Vec<Directive>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub s1: State,
    pub s2: State,
    /// Directives up to and including the diverging one (for a leak divergence).
    pub directives: Vec<Directive>,
    pub divergence: Divergence,
    pub leaks1: Vec<Leak>,
    pub leaks2: Vec<Leak>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SniVerdict {
    Secure { truncated: usize },
    Violation(Box<Violation>),
}

impl SniVerdict {
    pub fn is_violation(&self) -> bool {
        matches!(self, SniVerdict::Violation(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SniError {
    #[error("initial states are not low-equivalent")]
    NotLowEquivalent,
    #[error("exhaustive enumeration needs {needed} bits of high state, budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },
}

struct PairSearch<'a> {
    p: &'a Program,
    b: Bounds,
    truncated: usize,
    ds: Vec<Directive>,
    l1: Vec<Leak>,
    l2: Vec<Leak>,
}

impl PairSearch<'_> {
    fn run(&mut self, n1: &SpecState, n2: &SpecState) -> Option<(Divergence, Vec<Directive>, Vec<Leak>, Vec<Leak>)> {
        if n1.is_final(self.p) && n2.is_final(self.p) {
            return None;
        }
        if self.ds.len() >= self.b.max_steps {
            self.truncated += 1;
            return None;
        }
        let e1 = enabled_directives(self.p, n1);
        let e2 = enabled_directives(self.p, n2);
        if e1 != e2 {
            return Some((Divergence::DifferentEnabled(e1, e2), self.ds.clone(), self.l1.clone(), self.l2.clone()));
        }
        for d in e1 {
            let (m1, x1) = step_spec(self.p, n1, d).expect("enabled");
            let (m2, x2) = step_spec(self.p, n2, d).expect("enabled");
            self.ds.push(d);
            self.l1.push(x1);
            self.l2.push(x2);
            let r = if x1 != x2 {
                Some((Divergence::DifferentLeak(x1, x2), self.ds.clone(), self.l1.clone(), self.l2.clone()))
            } else if m1.len() > self.b.max_spec_depth {
                self.truncated += 1;
                None
            } else {
                self.run(&m1, &m2)
            };
            self.ds.pop();
            self.l1.pop();
            self.l2.pop();
            if r.is_some() {
                return r;
            }
        }
        None
    }
}

/// Synchronized bounded search for a directive sequence on which the two runs differ.
pub fn check_sni_pair(p: &Program, s1: &State, s2: &State, b: Bounds) -> Result<SniVerdict, SniError> {
    if !low_equivalent(p, s1, s2) {
        return Err(SniError::NotLowEquivalent);
    }
    let mut search = PairSearch { p, b, truncated: 0, ds: Vec::new(), l1: Vec::new(), l2: Vec::new() };
    let r = search.run(&SpecState::new(s1.clone()), &SpecState::new(s2.clone()));
    Ok(match r {
        None => SniVerdict::Secure { truncated: search.truncated },
        Some((divergence, directives, leaks1, leaks2)) => SniVerdict::Violation(Box::new(Violation {
            s1: s1.clone(),
            s2: s2.clone(),
            directives,
            divergence,
            leaks1,
            leaks2,
        })),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PairSource {
    /// The base state against every other assignment of the high cells.
    Exhaustive,
    /// `n` pairs with independently drawn high cells.
    Random { n: usize, seed: u64 },
    Explicit(State),
}

pub const DEFAULT_BUDGET: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SniReport {
    pub verdict: SniVerdict,
    pub pairs: usize,
    pub truncated: usize,
}

/// Every assignment of the high cells, lexicographic with the first cell most significant.
pub fn high_assignments(p: &Program, base: &State, budget: usize) -> Result<Vec<State>, SniError> {
    let hc = high_cells(p);
    let needed = hc.len() * p.width as usize;
    if needed > budget {
        return Err(SniError::BudgetExceeded { needed, budget });
    }
    let w = p.width;
    let total: u64 = 1u64 << needed;
    let mut out = Vec::with_capacity(total as usize);
    for k in 0..total {
        let mut s = base.clone();
        for (i, (v, o)) in hc.iter().enumerate() {
            let shift = (hc.len() - 1 - i) as u32 * w;
            s.set_cell(p, *v, *o, (k >> shift) & p.mask());
        }
        out.push(s);
    }
    Ok(out)
}

fn randomize_high(p: &Program, base: &State, rng: &mut ChaCha8Rng) -> State {
    let mut s = base.clone();
    for (v, o) in high_cells(p) {
        s.set_cell(p, v, o, rng.gen::<u64>() & p.mask());
    }
    s
}

/// Pairs of low-equivalent initial states drawn from `src`.
pub fn initial_pairs(p: &Program, base: &State, src: &PairSource, budget: usize) -> Result<Vec<(State, State)>, SniError> {
    Ok(match src {
        PairSource::Exhaustive => high_assignments(p, base, budget)?
            .into_iter()
            .filter(|s| s != base)
            .map(|s| (base.clone(), s))
            .collect(),
        PairSource::Random { n, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..*n).map(|_| (randomize_high(p, base, &mut rng), randomize_high(p, base, &mut rng))).collect()
        }
        PairSource::Explicit(s2) => vec![(base.clone(), s2.clone())],
    })
}

/// Checks every pair from the source, stopping at the first violation.
///
/// Exhaustive mode compares the base state against every other high
/// assignment; equality of behaviours is transitive, so this covers all pairs.
pub fn check_sni(p: &Program, base: &State, src: &PairSource, b: Bounds, budget: usize) -> Result<SniReport, SniError> {
    let pairs = initial_pairs(p, base, src, budget)?;
    let mut truncated = 0;
    let mut count = 0;
    for (s1, s2) in &pairs {
        count += 1;
        match check_sni_pair(p, s1, s2, b)? {
            SniVerdict::Secure { truncated: t } => truncated += t,
            v => return Ok(SniReport { verdict: v, pairs: count, truncated }),
        }
    }
    Ok(SniReport { verdict: SniVerdict::Secure { truncated }, pairs: count, truncated })
}
