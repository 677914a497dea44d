//! Random programs and states for the property suites. Shared with the
//! acceptance target of the CLI crate through a `#[path]` include.
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use snip::ir::{parse_program, Program};
use snip::sem::{enabled_directives, step_spec, Directive, SpecState, State};

pub const CASES: u32 = 1000;

const OPS: [&str; 7] = ["add", "sub", "mul", "lt", "eq", "and", "or"];

/// One instruction drawn as raw numbers; rendered against its position.
#[derive(Clone, Debug)]
pub struct RawI {
    kind: u8,
    a: u8,
    b: u8,
    c: u8,
    s1: u8,
    s2: u8,
}

fn raw_instr() -> impl Strategy<Value = RawI> {
    (0u8..12, any::<u8>(), any::<u8>(), any::<u8>(), any::<u8>(), any::<u8>()).prop_map(|(kind, a, b, c, s1, s2)| RawI { kind, a, b, c, s1, s2 })
}

/// Forward-only control flow, so every run terminates. Registers `r0..r3`,
/// a low `buf` and a high `key`.
pub fn render(raw: &[RawI], buf: u64, key: u64, regs: u8) -> String {
    let n = raw.len() + 1;
    let mut t = format!("mem buf {buf} low\nmem key {key} high\nentry 0\n");
    let r = |x: u8| format!("r{}", x % regs);
    let succ = |i: usize, x: u8| i + 1 + (x as usize) % (n - i - 1);
    for (i, w) in raw.iter().enumerate() {
        let nx = succ(i, w.s1);
        let (var, size) = if w.c % 3 == 0 { ("key", key) } else { ("buf", buf) };
        let line = match w.kind {
            0 | 1 => format!("{} = {} {} {}", r(w.a), r(w.b), OPS[(w.c % 7) as usize], r(w.c / 7)),
            2 => format!("load {} <- {var}[{}]", r(w.a), r(w.b)),
            3 => format!("load {} <- {var}[#{}]", r(w.a), w.b as u64 % size),
            4 => format!("store {var}[{}] <- {}", r(w.b), r(w.a)),
            5 => format!("store {var}[#{}] <- {}", w.b as u64 % size, r(w.a)),
            6 | 7 => {
                t.push_str(&format!("{i}: if {} ? {nx} : {}\n", r(w.a), succ(i, w.s2)));
                continue;
            }
            8 => "nop".into(),
            9 => "sfence".into(),
            10 => format!("slh {}", r(w.a)),
            _ => format!("move {} <- {}", r(w.a), r(w.b)),
        };
        t.push_str(&format!("{i}: {line} -> {nx}\n"));
    }
    t.push_str(&format!("{}: ret\n", n - 1));
    t
}

#[derive(Clone, Debug)]
pub struct Case {
    pub text: String,
    pub width: u32,
    pub vals: Vec<u64>,
    pub alt: Vec<u64>,
    pub picks: Vec<usize>,
}

impl Case {
    pub fn program(&self) -> Program {
        parse_program(&self.text).expect("generated program parses").with_width(self.width)
    }

    fn fill(p: &Program, vals: &[u64]) -> State {
        let mut s = State::zero(p);
        let m = p.mask();
        let mut it = vals.iter().cycle();
        for r in s.regs.iter_mut() {
            *r = it.next().unwrap() & m;
        }
        for c in s.mem.iter_mut() {
            *c = it.next().unwrap() & m;
        }
        s
    }

    pub fn state(&self, p: &Program) -> State {
        Self::fill(p, &self.vals)
    }

    /// Low-equivalent to `state`: only the high cells differ.
    pub fn low_twin(&self, p: &Program) -> State {
        let mut s = self.state(p);
        let alt = Self::fill(p, &self.alt);
        for (i, (v, _)) in p.cells().into_iter().enumerate() {
            if p.mems[v.idx()].level == snip::ir::Level::High {
                s.mem[i] = alt.mem[i];
            }
        }
        s
    }

    /// Same pcs, every value redrawn.
    pub fn same_point(&self, p: &Program, nu: &SpecState) -> SpecState {
        SpecState(
            nu.0.iter()
                .map(|f| {
                    let mut g = Self::fill(p, &self.alt);
                    g.pc = f.pc;
                    g
                })
                .collect(),
        )
    }
}

pub fn case_with(len: std::ops::Range<usize>, regs: u8) -> impl Strategy<Value = Case> {
    (
        prop::collection::vec(raw_instr(), len),
        1u64..4,
        1u64..3,
        2u32..4,
        prop::collection::vec(any::<u64>(), 12),
        prop::collection::vec(any::<u64>(), 12),
        prop::collection::vec(any::<usize>(), 24),
    )
        .prop_map(move |(raw, buf, key, width, vals, alt, picks)| Case { text: render(&raw, buf, key, regs), width, vals, alt, picks })
}

pub fn case() -> impl Strategy<Value = Case> {
    case_with(1..8, 4)
}

/// Follows `picks` through enabled directives, at most `depth` frames deep.
pub fn walk(p: &Program, nu0: &SpecState, picks: &[usize], depth: usize) -> Vec<(Directive, SpecState)> {
    let mut out = vec![];
    let mut cur = nu0.clone();
    for &k in picks {
        let en: Vec<Directive> = enabled_directives(p, &cur).into_iter().filter(|d| *d != Directive::Spec || cur.len() < depth).collect();
        if en.is_empty() {
            break;
        }
        let d = en[k % en.len()];
        cur = step_spec(p, &cur, d).expect("enabled directive steps").0;
        out.push((d, cur.clone()));
    }
    out
}

/// Runs `f` on `CASES` generated cases; `Err` carries the minimal failure.
pub fn check<S: Strategy>(strategy: S, f: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let cfg = Config { cases: CASES, max_global_rejects: 20 * CASES, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, f).map_err(|e| e.to_string())
}
