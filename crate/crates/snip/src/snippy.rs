//! Directive-transforming simulations: interval extraction, bounded replay
//! checking, and the speculative constant-time cube.

use std::collections::BTreeSet;
use std::fmt::Debug;

use crate::ir::Program;
use crate::security::{initial_pairs, low_equivalent, PairSource, SniError};
use crate::sem::{enabled_directives, run_directives, Bounds, Directive, Leak, RunStatus, SpecState, State};

/// One synchronized step of a simulation: the target runs `tgt_dirs`, the
/// source runs `src_dirs`, and both land in `end`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimInterval<P> {
    pub tgt_dirs: Vec<Directive>,
    pub tgt_leaks: Vec<Leak>,
    pub src_dirs: Vec<Directive>,
    pub src_leaks: Vec<Leak>,
    pub end: P,
    /// Produced by a relaxed replay past a failed guard; not a valid simulation step.
    pub unguarded: bool,
    /// Cut short by the bounds; `end` is not necessarily related.
    pub truncated: bool,
}

impl<P> SimInterval<P> {
    pub fn same_traces<Q>(&self, o: &SimInterval<Q>) -> bool {
        self.tgt_dirs == o.tgt_dirs && self.tgt_leaks == o.tgt_leaks && self.src_dirs == o.src_dirs && self.src_leaks == o.src_leaks
    }
}

pub trait SimWitness {
    type Pair: Clone + Debug + Ord;
    fn source(&self) -> &Program;
    fn target(&self) -> &Program;
    fn src_state<'a>(&self, pair: &'a Self::Pair) -> &'a SpecState;
    fn tgt_state<'a>(&self, pair: &'a Self::Pair) -> &'a SpecState;
    fn related(&self, pair: &Self::Pair) -> bool;
    /// The source initial state (and pairing data) for a target initial state.
    fn map_initial(&self, tgt: &State) -> Self::Pair;
    fn intervals(&self, pair: &Self::Pair, b: Bounds) -> Vec<SimInterval<Self::Pair>>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimFailure {
    pub src: SpecState,
    pub tgt: SpecState,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SimVerdict {
    Pass { pairs: usize, intervals: usize, truncated: usize },
    Fail(Box<SimFailure>),
}

impl SimVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, SimVerdict::Pass { .. })
    }
}

/// Replays `dirs` from `from` and checks leaks and end state.
fn replays(p: &Program, from: &SpecState, dirs: &[Directive], leaks: &[Leak], end: &SpecState) -> Result<(), String> {
    let e = run_directives(p, from, dirs);
    if let RunStatus::Stuck(i) = e.status {
        return Err(format!("directive {i} of the interval is not enabled"));
    }
    if e.leaks() != leaks {
        return Err("interval leaks do not match a replay".into());
    }
    if e.last() != end {
        return Err("interval end does not match a replay".into());
    }
    Ok(())
}

struct SimSearch<'a, W: SimWitness> {
    w: &'a W,
    b: Bounds,
    seen: BTreeSet<W::Pair>,
    pairs: usize,
    intervals: usize,
    truncated: usize,
}

impl<W: SimWitness> SimSearch<'_, W> {
    fn fail(&self, pair: &W::Pair, reason: String) -> SimVerdict {
        SimVerdict::Fail(Box::new(SimFailure {
            src: self.w.src_state(pair).clone(),
            tgt: self.w.tgt_state(pair).clone(),
            reason,
        }))
    }

    fn visit(&mut self, pair: &W::Pair, steps: usize) -> Option<SimVerdict> {
        if !self.seen.insert(pair.clone()) {
            return None;
        }
        self.pairs += 1;
        let (s, t) = (self.w.source(), self.w.target());
        if !self.w.related(pair) {
            return Some(self.fail(pair, "pair is not related".into()));
        }
        let tgt = self.w.tgt_state(pair);
        if tgt.is_final(t) {
            return None;
        }
        if steps >= self.b.max_steps {
            self.truncated += 1;
            return None;
        }
        let ivs = self.w.intervals(pair, self.b);
        for d in enabled_directives(t, tgt) {
            if !ivs.iter().any(|i| i.tgt_dirs.first() == Some(&d)) {
                return Some(self.fail(pair, format!("target directive `{}` starts no interval", crate::sem::fmt_directive(t, &d))));
            }
        }
        for iv in &ivs {
            self.intervals += 1;
            if iv.unguarded {
                return Some(self.fail(
                    pair,
                    format!("product is stuck on target directives {}", crate::sem::fmt_directives(t, &iv.tgt_dirs)),
                ));
            }
            let te = self.w.tgt_state(&iv.end);
            let se = self.w.src_state(&iv.end);
            if let Err(e) = replays(t, tgt, &iv.tgt_dirs, &iv.tgt_leaks, te) {
                return Some(self.fail(pair, format!("target: {e}")));
            }
            if let Err(e) = replays(s, self.w.src_state(pair), &iv.src_dirs, &iv.src_leaks, se) {
                return Some(self.fail(pair, format!("source: {e}")));
            }
            if iv.truncated {
                self.truncated += 1;
                continue;
            }
            if let Some(v) = self.visit(&iv.end, steps + iv.tgt_dirs.len()) {
                return Some(v);
            }
        }
        None
    }
}

/// Bounded check that the witness is a directive-transforming simulation
/// from every given target initial state.
pub fn check_simulation<W: SimWitness>(w: &W, inits: &[State], b: Bounds) -> SimVerdict {
    let mut s = SimSearch { w, b, seen: BTreeSet::new(), pairs: 0, intervals: 0, truncated: 0 };
    for t in inits {
        let pair = w.map_initial(t);
        if let Some(v) = s.visit(&pair, 0) {
            return v;
        }
    }
    SimVerdict::Pass { pairs: s.pairs, intervals: s.intervals, truncated: s.truncated }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CubeFailure {
    pub src1: SpecState,
    pub tgt1: SpecState,
    pub src2: SpecState,
    pub tgt2: SpecState,
    pub tgt_dirs: Vec<Directive>,
    pub tgt_leaks: Vec<Leak>,
    pub src_dirs: Vec<Directive>,
    pub src_leaks: Vec<Leak>,
    /// Target leaks of the second pair under the same target directives, if it can run them.
    pub other_tgt_leaks: Option<Vec<Leak>>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CubeVerdict {
    Pass { quadruples: usize, intervals: usize, truncated: usize },
    Fail(Box<CubeFailure>),
}

impl CubeVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, CubeVerdict::Pass { .. })
    }
}

struct Cube<'a, W: SimWitness> {
    w: &'a W,
    b: Bounds,
    seen: BTreeSet<(W::Pair, W::Pair)>,
    quadruples: usize,
    intervals: usize,
    truncated: usize,
}

impl<W: SimWitness> Cube<'_, W> {
    /// Every interval of `a` whose source part `b`'s source can follow must exist for `b` too.
    fn one_way(&mut self, a: &W::Pair, bp: &W::Pair, ia: &[SimInterval<W::Pair>], ib: &[SimInterval<W::Pair>]) -> Result<Vec<(usize, usize)>, Box<CubeFailure>> {
        let s = self.w.source();
        let mut next = Vec::new();
        for (i, iv) in ia.iter().enumerate() {
            self.intervals += 1;
            let e = run_directives(s, self.w.src_state(bp), &iv.src_dirs);
            if matches!(e.status, RunStatus::Stuck(_)) || e.leaks() != iv.src_leaks {
                continue;
            }
            match ib.iter().position(|j| j.same_traces(iv)) {
                Some(j) => next.push((i, j)),
                None => {
                    let te = run_directives(self.w.target(), self.w.tgt_state(bp), &iv.tgt_dirs);
                    let other = (!matches!(te.status, RunStatus::Stuck(_))).then(|| te.leaks());
                    return Err(Box::new(CubeFailure {
                        src1: self.w.src_state(a).clone(),
                        tgt1: self.w.tgt_state(a).clone(),
                        src2: self.w.src_state(bp).clone(),
                        tgt2: self.w.tgt_state(bp).clone(),
                        tgt_dirs: iv.tgt_dirs.clone(),
                        tgt_leaks: iv.tgt_leaks.clone(),
                        src_dirs: iv.src_dirs.clone(),
                        src_leaks: iv.src_leaks.clone(),
                        other_tgt_leaks: other,
                        reason: "second pair has no interval with the same directives and leaks".into(),
                    }));
                }
            }
        }
        Ok(next)
    }

    fn visit(&mut self, p1: &W::Pair, p2: &W::Pair, steps: usize) -> Result<(), Box<CubeFailure>> {
        if !self.seen.insert((p1.clone(), p2.clone())) {
            return Ok(());
        }
        self.quadruples += 1;
        if steps >= self.b.max_steps {
            self.truncated += 1;
            return Ok(());
        }
        let i1 = self.w.intervals(p1, self.b);
        let i2 = self.w.intervals(p2, self.b);
        let fwd = self.one_way(p1, p2, &i1, &i2)?;
        let bwd = self.one_way(p2, p1, &i2, &i1)?;
        let mut todo: BTreeSet<(usize, usize)> = fwd.into_iter().collect();
        todo.extend(bwd.into_iter().map(|(j, i)| (i, j)));
        for (i, j) in todo {
            let (a, b) = (&i1[i], &i2[j]);
            if a.truncated || b.truncated {
                self.truncated += 1;
                continue;
            }
            self.visit(&a.end, &b.end, steps + a.tgt_dirs.len())?;
        }
        Ok(())
    }
}

/// Checks the cube condition on every pair of low-equivalent target initial
/// states drawn from `src`, mapping each to its source counterpart.
pub fn check_snippy_cube<W: SimWitness>(w: &W, base: &State, src: &PairSource, b: Bounds, budget: usize) -> Result<CubeVerdict, SniError> {
    let t = w.target();
    let mut c = Cube { w, b, seen: BTreeSet::new(), quadruples: 0, intervals: 0, truncated: 0 };
    for (t1, t2) in initial_pairs(t, base, src, budget)? {
        let p1 = w.map_initial(&t1);
        let p2 = w.map_initial(&t2);
        let tl = low_equivalent(t, &t1, &t2);
        let sl = low_equivalent(w.source(), w.src_state(&p1).top(), w.src_state(&p2).top());
        if tl != sl {
            return Ok(CubeVerdict::Fail(Box::new(CubeFailure {
                src1: w.src_state(&p1).clone(),
                tgt1: w.tgt_state(&p1).clone(),
                src2: w.src_state(&p2).clone(),
                tgt2: w.tgt_state(&p2).clone(),
                tgt_dirs: vec![],
                tgt_leaks: vec![],
                src_dirs: vec![],
                src_leaks: vec![],
                other_tgt_leaks: None,
                reason: "initial-state mapping does not respect low-equivalence".into(),
            })));
        }
        if let Err(f) = c.visit(&p1, &p2, 0) {
            return Ok(CubeVerdict::Fail(f));
        }
    }
    Ok(CubeVerdict::Pass { quadruples: c.quadruples, intervals: c.intervals, truncated: c.truncated })
}

/// Whether the target directive sequence splits into consecutive intervals
/// starting from `pair`. Used to test that intervals cover behaviours.
pub fn decomposes<W: SimWitness>(w: &W, pair: &W::Pair, dirs: &[Directive], b: Bounds) -> bool {
    if dirs.is_empty() {
        return true;
    }
    w.intervals(pair, b).iter().any(|iv| {
        !iv.tgt_dirs.is_empty()
            && dirs.starts_with(&iv.tgt_dirs)
            && (iv.tgt_dirs.len() == dirs.len() || (!iv.truncated && decomposes(w, &iv.end, &dirs[iv.tgt_dirs.len()..], b)))
    })
}

/// Wraps a witness and drops every interval that starts with a rollback.
pub struct WithoutRollback<'a, W>(pub &'a W);

impl<W: SimWitness> SimWitness for WithoutRollback<'_, W> {
    type Pair = W::Pair;
    fn source(&self) -> &Program {
        self.0.source()
    }
    fn target(&self) -> &Program {
        self.0.target()
    }
    fn src_state<'a>(&self, pair: &'a Self::Pair) -> &'a SpecState {
        self.0.src_state(pair)
    }
    fn tgt_state<'a>(&self, pair: &'a Self::Pair) -> &'a SpecState {
        self.0.tgt_state(pair)
    }
    fn related(&self, pair: &Self::Pair) -> bool {
        self.0.related(pair)
    }
    fn map_initial(&self, tgt: &State) -> Self::Pair {
        self.0.map_initial(tgt)
    }
    fn intervals(&self, pair: &Self::Pair, b: Bounds) -> Vec<SimInterval<Self::Pair>> {
        self.0.intervals(pair, b).into_iter().filter(|i| i.tgt_dirs.first() != Some(&Directive::Rb)).collect()
    }
}
