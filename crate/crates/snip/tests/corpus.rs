//! End-to-end checks on the bundled example programs.

use snip::ir::{parse_assignments, parse_program, Program};
use snip::liveness::{dce, DceWitness, IntervalPolicy};
use snip::poison::{fix_ra, Product, RaSim};
use snip::regalloc::{load_witness, validate_ra_default, RaWitness};
use snip::security::{check_sni, PairSource, SniVerdict};
use snip::sem::{fmt_directives, fmt_leaks, parse_directives, run_directives, Bounds, Directive, Leak, RunStatus, SpecState, State};
use snip::snippy::{check_simulation, check_snippy_cube, SimWitness};

macro_rules! corpus {
    ($f:literal) => {
        include_str!(concat!("../../../corpus/", $f))
    };
}

fn state(p: &Program, text: &str) -> State {
    let (r, c) = parse_assignments(p, text).unwrap();
    State::from_assignments(p, &r, &c)
}

fn codera() -> RaWitness {
    load_witness(corpus!("codera.sp"), corpus!("codera.tgt.sp"), corpus!("codera.wit")).unwrap()
}

fn codera_w2() -> RaWitness {
    let mut w = load_witness(corpus!("codera_w2.sp"), corpus!("codera_w2.tgt.sp"), corpus!("codera_w2.wit")).unwrap();
    w.src = w.src.clone().with_width(2);
    w.tgt = w.tgt.clone().with_width(2);
    w
}

#[test]
fn all_corpus_programs_parse() {
    for text in [
        corpus!("codedce.sp"),
        corpus!("codera.sp"),
        corpus!("codera.tgt.sp"),
        corpus!("codera_w2.sp"),
        corpus!("codera_w2.tgt.sp"),
        corpus!("simplerv1.sp"),
        corpus!("specv1.sp"),
        corpus!("leaky.sp"),
    ] {
        let p = parse_program(text).unwrap();
        assert!(snip::ir::validate_program(&p).is_empty());
    }
}

#[test]
fn codera_witnesses_validate() {
    assert!(validate_ra_default(&codera()).unwrap().is_empty());
    assert!(validate_ra_default(&codera_w2()).unwrap().is_empty());
}

#[test]
fn codera_target_leaks_source_does_not() {
    let w = codera();
    let b = Bounds::new(32, 3);
    let t0 = state(&w.tgt, corpus!("codera.init"));
    let t1 = state(&w.tgt, corpus!("codera.alt.init"));
    let r = check_sni(&w.tgt, &t0, &PairSource::Explicit(t1.clone()), b, 16).unwrap();
    let SniVerdict::Violation(v) = r.verdict else { panic!("target should leak") };
    let stk = w.tgt.var_of("stk").unwrap();
    let spec = v.directives.iter().position(|d| *d == Directive::Spec).unwrap();
    assert!(v.directives[spec..].contains(&Directive::Store(stk, 0)), "{}", fmt_directives(&w.tgt, &v.directives));
    let s0 = w.map_state(&t0);
    let s1 = w.map_state(&t1);
    let r = check_sni(&w.src, &s0, &PairSource::Explicit(s1), b, 16).unwrap();
    assert!(matches!(r.verdict, SniVerdict::Secure { .. }));
}

#[test]
fn codera_fix_makes_target_secure() {
    let w = codera();
    let prod = Product::new(&w).unwrap();
    let vs = prod.check_poison_typable(&prod.poison_analysis().unwrap());
    assert_eq!(vs.len(), 1);
    let (fixed, rep) = fix_ra(&w).unwrap();
    assert_eq!(rep.inserted.len(), 1);
    let b = Bounds::new(32, 3);
    let t0 = state(&fixed.tgt, corpus!("codera.init"));
    let t1 = state(&fixed.tgt, corpus!("codera.alt.init"));
    let r = check_sni(&fixed.tgt, &t0, &PairSource::Explicit(t1), b, 16).unwrap();
    assert!(matches!(r.verdict, SniVerdict::Secure { .. }));
}

#[test]
fn dce_intervals_match_the_worked_example() {
    let src = parse_program(corpus!("codedce.sp")).unwrap();
    let res = dce(&src).unwrap();
    let w = DceWitness::new(&src, &res, IntervalPolicy::SpecWindow);
    let t0 = state(&w.tgt, corpus!("codedce.init"));
    let pair = w.map_initial(&t0);
    let ivs = w.intervals(&pair, Bounds::new(8, 3));
    let secret = src.var_of("secret").unwrap();
    let mut got: Vec<_> = ivs
        .iter()
        .filter(|iv| iv.tgt_dirs != [Directive::Rb])
        .map(|iv| (iv.tgt_dirs.clone(), iv.tgt_leaks.clone(), iv.src_dirs.clone(), iv.src_leaks.clone()))
        .collect();
    got.sort();
    let i = 2;
    let want = vec![
        (vec![Directive::If], vec![Leak::If(false)], vec![Directive::If], vec![Leak::If(false)]),
        (
            vec![Directive::Spec, Directive::Step, Directive::Step],
            vec![Leak::If(false), Leak::None, Leak::None],
            vec![Directive::Spec, Directive::Load(secret, 0), Directive::Step],
            vec![Leak::If(false), Leak::Load(i), Leak::None],
        ),
    ];
    assert_eq!(got, want, "{:?}", ivs.iter().map(|iv| fmt_leaks(&iv.tgt_leaks)).collect::<Vec<_>>());
}

#[test]
fn dce_simulation_passes() {
    let src = parse_program(corpus!("codedce.sp")).unwrap().with_width(2);
    let res = dce(&src).unwrap();
    let w = DceWitness::new(&src, &res, IntervalPolicy::Lockstep);
    let t0 = state(&w.tgt, corpus!("codedce.init"));
    assert!(check_simulation(&w, &[t0], Bounds::new(16, 2)).passed());
}

#[test]
fn cube_discriminates_fixed_from_unfixed() {
    let b = Bounds::new(24, 2);
    let w = codera_w2();
    let t0 = state(&w.tgt, corpus!("codera_w2.init"));
    let sim = RaSim::new(&w).unwrap();
    let v = check_snippy_cube(&sim, &t0, &PairSource::Exhaustive, b, 16).unwrap();
    assert!(!v.passed());
    let (fixed, _) = fix_ra(&w).unwrap();
    let t0 = state(&fixed.tgt, corpus!("codera_w2.init"));
    let sim = RaSim::new(&fixed).unwrap();
    let v = check_snippy_cube(&sim, &t0, &PairSource::Exhaustive, b, 16).unwrap();
    assert!(v.passed(), "{v:?}");
    assert!(check_simulation(&sim, &[t0], b).passed());
}

#[test]
fn specv1_script_reaches_the_leak() {
    let p = parse_program(corpus!("specv1.sp")).unwrap();
    let ds = parse_directives(&p, corpus!("specv1.dirs")).unwrap();
    let s = state(&p, corpus!("specv1.init"));
    let e = run_directives(&p, &SpecState::new(s), &ds);
    assert_eq!(e.status, RunStatus::Completed);
    assert!(matches!(e.leaks().last(), Some(Leak::If(_))));
}
