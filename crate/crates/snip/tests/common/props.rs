//! Invariants checked on random programs. Each returns `Err` with the
//! shrunk counterexample on failure.
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use snip::ir::{uses_defs, Addr, Instr};
use snip::liveness::{is_dead, live_in, liveness, LiveSet};
use snip::security::{check_safety, Safety};
use snip::poison::{fix_ra, Product, ProductState};
use snip::regalloc::{allocate, validate_ra_default, RaWitness};
use snip::sem::{all_directives, enabled_directives, step_spec, Directive, SpecState};

use crate::common::{case, case_with, check, walk, Case};

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

/// Stepping is a function of (state, directive): repeated steps agree, and
/// exactly the enabled directives step.
pub fn determinism() -> Result<(), String> {
    check(case(), |c| {
        let p = c.program();
        let nu0 = SpecState::new(c.state(&p));
        let mut states = vec![nu0.clone()];
        states.extend(walk(&p, &nu0, &c.picks, 3).into_iter().map(|(_, s)| s));
        for nu in &states {
            let en = enabled_directives(&p, nu);
            for d in all_directives(&p) {
                let a = step_spec(&p, nu, d);
                let b = step_spec(&p, nu, d);
                prop_assert_eq!(&a, &b);
                prop_assert_eq!(a.is_some(), en.contains(&d), "{:?} at {}", d, nu.fmt_pcs(&p));
            }
        }
        Ok(())
    })
}

/// Same-point states stepping under one directive with equal leaks stay same-point.
pub fn pc_leakage() -> Result<(), String> {
    check(case(), |c| {
        let p = c.program();
        let nu0 = SpecState::new(c.state(&p));
        let mut states = vec![nu0.clone()];
        states.extend(walk(&p, &nu0, &c.picks, 3).into_iter().map(|(_, s)| s));
        for nu1 in &states {
            let nu2 = c.same_point(&p, nu1);
            for d in all_directives(&p) {
                if let (Some((a, la)), Some((b, lb))) = (step_spec(&p, nu1, d), step_spec(&p, &nu2, d)) {
                    if la == lb {
                        prop_assert_eq!(a.pcs(), b.pcs());
                    }
                }
            }
        }
        Ok(())
    })
}

/// Registers used and cells loaded by a live instruction are live before it.
pub fn liveness_guarantee() -> Result<(), String> {
    check(case(), |c| {
        let p = c.program();
        let sol = liveness(&p, &LiveSet::full(&p)).map_err(|e| fail(e.to_string()))?;
        let nu0 = SpecState::new(c.state(&p));
        let steps = walk(&p, &nu0, &c.picks, 3);
        for nu in std::iter::once(&nu0).chain(steps.iter().map(|(_, s)| s)) {
            let pc = nu.top().pc;
            let li = live_in(&p, &sol, pc);
            // A dead instruction makes nothing live, so only live ones are checked.
            let out = sol.get(pc.idx());
            let (uses, defs) = uses_defs(p.instr(pc));
            if is_dead(&p, p.instr(pc), out) || (!defs.is_empty() && defs.iter().all(|r| !out.has_reg(*r))) {
                continue;
            }
            for r in uses {
                prop_assert!(li.has_reg(r), "{} used but not live at {}", p.reg_name(r), p.label(pc));
            }
            if let Instr::Load { var, addr, .. } = *p.instr(pc) {
                let off = match addr {
                    Addr::Const(n) => n,
                    Addr::Reg(b) => nu.top().reg(b),
                };
                if off < p.size(var) {
                    prop_assert!(li.has_cell(p.cell_index(var, off)), "cell not live at {}", p.label(pc));
                }
            }
        }
        Ok(())
    })
}

pub fn allocator_validity() -> Result<(), String> {
    check((case_with(1..10, 4), 1usize..5), |(c, k)| {
        let p = c.program();
        let w = allocate(&p, k);
        prop_assume!(w.is_ok());
        let w = w.unwrap();
        let d = validate_ra_default(&w).map_err(|e| fail(e.to_string()))?;
        prop_assert!(d.is_empty(), "{}\n{}", snip::ir::print_program(&w.tgt), d[0]);
        Ok(())
    })
}

/// An allocation of a random program, plus a random product walk over it.
fn ra_case() -> impl Strategy<Value = (Case, usize)> {
    (case_with(1..8, 4), 1usize..4)
}

/// `None` unless the allocation exists and the source runs safely without
/// speculation from the mapped initial state.
fn witness(c: &Case, k: usize, fixed: bool) -> Option<RaWitness> {
    let w = allocate(&c.program(), k).ok()?;
    if check_safety(&w.src, &w.map_state(&c.state(&w.tgt)), 64) != Safety::Safe {
        return None;
    }
    if fixed {
        fix_ra(&w).ok().map(|x| x.0)
    } else {
        Some(w)
    }
}

/// Walks guarded product transitions, choosing among those that exist.
fn product_walk(prod: &Product, st0: &ProductState, picks: &[usize], depth: usize) -> Vec<ProductState> {
    let mut out = vec![st0.clone()];
    let mut cur = st0.clone();
    for &k in picks {
        let trs: Vec<_> = prod
            .product_transitions(&cur)
            .into_iter()
            .filter(|t| t.tgt_dir != Directive::Spec || cur.tgt.len() < depth)
            .collect();
        if trs.is_empty() {
            break;
        }
        cur = trs[k % trs.len()].next.clone();
        out.push(cur.clone());
    }
    out
}

pub fn product_well_defined() -> Result<(), String> {
    check(ra_case(), |(c, k)| {
        let w = witness(&c, k, false);
        prop_assume!(w.is_some());
        let w = w.unwrap();
        let prod = Product::new(&w).unwrap();
        let st0 = prod.initial(&c.state(&w.tgt));
        for st in product_walk(&prod, &st0, &c.picks, 3) {
            prop_assert!(prod.approx(&st), "unrelated at {} / {}", st.src.fmt_pcs(&w.src), st.tgt.fmt_pcs(&w.tgt));
        }
        Ok(())
    })
}

pub fn spec_free_purity() -> Result<(), String> {
    check(ra_case(), |(c, k)| {
        let w = witness(&c, k, false);
        prop_assume!(w.is_some());
        let w = w.unwrap();
        let prod = Product::new(&w).unwrap();
        let st0 = prod.initial(&c.state(&w.tgt));
        let healthy = prod.healthy();
        for st in product_walk(&prod, &st0, &c.picks, 1) {
            prop_assert_eq!(&st.pis, &vec![healthy.clone()]);
        }
        Ok(())
    })
}

pub fn static_overapprox() -> Result<(), String> {
    check(ra_case(), |(c, k)| {
        let w = witness(&c, k, false);
        prop_assume!(w.is_some());
        let w = w.unwrap();
        let prod = Product::new(&w).unwrap();
        let sp = prod.poison_analysis().unwrap();
        let st0 = prod.initial(&c.state(&w.tgt));
        for st in product_walk(&prod, &st0, &c.picks, 3) {
            let bound = prod.static_stack(&sp, &st.tgt);
            for (i, (dynamic, stat)) in st.pis.iter().zip(&bound).enumerate() {
                let Some(stat) = stat else { return Err(fail(format!("level {i} reached an unreached pc"))) };
                prop_assert!(dynamic.le(stat), "level {}: {} vs {}", i, prod.render_pi(dynamic), prod.render_pi(stat));
            }
        }
        Ok(())
    })
}

/// After the fix, every enabled target directive has a guarded replay.
pub fn typable_never_stuck() -> Result<(), String> {
    check(ra_case(), |(c, k)| {
        let w = witness(&c, k, true);
        prop_assume!(w.is_some());
        let w = w.unwrap();
        let prod = Product::new(&w).unwrap();
        let st0 = prod.initial(&c.state(&w.tgt));
        for st in product_walk(&prod, &st0, &c.picks, 3) {
            for d in enabled_directives(&w.tgt, &st.tgt) {
                prop_assert!(prod.replay_target_step(&st, d).is_some(), "stuck on {:?} at {}", d, st.tgt.fmt_pcs(&w.tgt));
            }
        }
        Ok(())
    })
}
