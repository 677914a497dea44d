use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use snip::ir::{parse_assignments, parse_program, print_program, validate_program, Program};
use snip::liveness::{dce, liveness, live_in, DceWitness, IntervalPolicy, LiveSet};
use snip::poison::{fix_ra, FixReport, Product, RaSim};
use snip::regalloc::{allocate, parse_ra_witness, serialize_ra_witness, validate_ra_default, RaWitness};
use snip::security::{check_safety, check_sni, PairSource, Safety, SniReport, SniVerdict, Violation, DEFAULT_BUDGET};
use snip::sem::{
    explore_behaviors, fmt_directive, fmt_directives, fmt_leaks, parse_directives, run_directives, Bounds, Directive, Execution,
    RunStatus, SpecState, State,
};
use snip::snippy::{check_simulation, check_snippy_cube, CubeVerdict, SimVerdict, SimWitness};

const PASS: u8 = 0;
const VIOLATION: u8 = 1;
const INCONCLUSIVE: u8 = 2;
const USAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "snip", version, about = "Speculative non-interference checks for a small register IR")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Exploration bounds, e.g. `steps=32,depth=3`.
    #[arg(long, global = true, default_value = "steps=32,depth=3", value_parser = parse_bounds)]
    bounds: Bounds,
    /// Value width in bits.
    #[arg(long, global = true)]
    width: Option<u32>,
    /// `exhaustive`, `random:<n>`, or `explicit` (with `--against`).
    #[arg(long, global = true, default_value = "exhaustive")]
    pairs: String,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Maximum number of high bits enumerated exhaustively.
    #[arg(long, global = true, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct RaFiles {
    source: PathBuf,
    target: PathBuf,
    witness: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WitnessKind {
    Dce,
    Ra,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay a directive script.
    Run {
        program: PathBuf,
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long)]
        directives: Option<PathBuf>,
    },
    /// Enumerate all behaviors within the bounds.
    Explore {
        program: PathBuf,
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Run without speculation and report unsafe accesses.
    CheckSafe {
        program: PathBuf,
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Bounded speculative non-interference check.
    CheckSni {
        program: PathBuf,
        #[arg(long)]
        state: Option<PathBuf>,
        /// Second initial state for `--pairs explicit`.
        #[arg(long)]
        against: Option<PathBuf>,
        /// Directory receiving replayable files for a violation.
        #[arg(long)]
        witness_out: Option<PathBuf>,
    },
    /// Dead code elimination.
    Dce {
        program: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Live registers and cells before each instruction.
    Liveness {
        program: PathBuf,
        /// Fact at exit: everything (`all`) or memory only (`mems`).
        #[arg(long, default_value = "all")]
        exit: String,
    },
    /// Register allocation with `k` hardware registers.
    Allocate {
        program: PathBuf,
        #[arg(short, long)]
        k: usize,
        #[arg(long)]
        out_target: Option<PathBuf>,
        #[arg(long)]
        out_witness: Option<PathBuf>,
    },
    /// Check a register allocation witness.
    ValidateRa(RaFiles),
    /// Replay target directives on the poison product.
    ProductRun {
        #[command(flatten)]
        files: RaFiles,
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long)]
        directives: Option<PathBuf>,
    },
    /// Static poison types at every target pc.
    PoisonAnalyze(RaFiles),
    /// Report poison-typability violations.
    CheckTypable(RaFiles),
    /// Insert fences or hardening until the allocation is typable.
    Fix {
        #[command(flatten)]
        files: RaFiles,
        #[arg(long)]
        out_target: Option<PathBuf>,
        #[arg(long)]
        out_witness: Option<PathBuf>,
        /// Overwrite the target and witness files.
        #[arg(long)]
        in_place: bool,
    },
    /// Bounded simulation check of a witness.
    CheckSim {
        #[arg(long, value_enum)]
        witness: WitnessKind,
        /// One program for `dce`; source, target and witness for `ra`.
        files: Vec<PathBuf>,
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Bounded check of the speculative constant-time cube for a witness.
    CheckSnippy {
        #[arg(long, value_enum)]
        witness: WitnessKind,
        files: Vec<PathBuf>,
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// Reproduce the spilled-register attack, its detection and its fix.
    DemoCodera,
}

fn parse_bounds(s: &str) -> Result<Bounds, String> {
    let mut b = Bounds::default();
    for part in s.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| format!("expected key=value, got `{part}`"))?;
        let n: usize = v.trim().parse().map_err(|_| format!("`{v}` is not a number"))?;
        if n == 0 {
            return Err(format!("{k} must be positive"));
        }
        match k.trim() {
            "steps" => b.max_steps = n,
            "depth" => b.max_spec_depth = n,
            _ => return Err(format!("unknown bound `{k}`")),
        }
    }
    Ok(b)
}

/// Errors that map to the usage exit code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

struct Out {
    code: u8,
    text: Vec<String>,
    json: Value,
}

impl Out {
    fn new(code: u8, text: Vec<String>, json: Value) -> Out {
        Out { code, text, json }
    }
}

struct Ctx {
    c: Common,
}

impl Ctx {
    fn read(&self, path: &Path) -> Result<String> {
        fs::read_to_string(path).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
    }

    fn program_text(&self, text: &str, what: &str) -> Result<Program> {
        let p = match parse_program(text) {
            Ok(p) => p,
            Err(e) => return usage(format!("{what}: {e}")),
        };
        let p = match self.c.width {
            Some(w) => p.with_width(w),
            None => p,
        };
        let diags = validate_program(&p);
        if let Some(d) = diags.first() {
            return usage(format!("{what}: {}", d.msg));
        }
        Ok(p)
    }

    fn program(&self, path: &Path) -> Result<Program> {
        let text = self.read(path)?;
        self.program_text(&text, &path.display().to_string())
    }

    fn state_text(&self, p: &Program, text: &str, what: &str) -> Result<State> {
        match parse_assignments(p, text) {
            Ok((r, c)) => Ok(State::from_assignments(p, &r, &c)),
            Err(e) => usage(format!("{what}: {e}")),
        }
    }

    fn state(&self, p: &Program, path: Option<&PathBuf>) -> Result<State> {
        match path {
            None => Ok(State::zero(p)),
            Some(f) => {
                let text = self.read(f)?;
                self.state_text(p, &text, &f.display().to_string())
            }
        }
    }

    fn witness_text(&self, src: &str, tgt: &str, wit: &str) -> Result<RaWitness> {
        let s = self.program_text(src, "source")?;
        let t = self.program_text(tgt, "target")?;
        match parse_ra_witness(&s, &t, wit) {
            Ok(w) => Ok(w),
            Err(e) => usage(format!("witness: {e}")),
        }
    }

    fn witness(&self, f: &RaFiles) -> Result<RaWitness> {
        let s = self.program(&f.source)?;
        let t = self.program(&f.target)?;
        let text = self.read(&f.witness)?;
        match parse_ra_witness(&s, &t, &text) {
            Ok(w) => Ok(w),
            Err(e) => usage(format!("{}: {e}", f.witness.display())),
        }
    }

    fn pair_source(&self, p: &Program, against: Option<&PathBuf>) -> Result<PairSource> {
        let s = self.c.pairs.as_str();
        if s == "exhaustive" {
            if against.is_some() {
                return usage("--against needs --pairs explicit");
            }
            return Ok(PairSource::Exhaustive);
        }
        if s == "explicit" {
            let Some(f) = against else { return usage("--pairs explicit needs --against <state>") };
            return Ok(PairSource::Explicit(self.state(p, Some(f))?));
        }
        if let Some(n) = s.strip_prefix("random:") {
            let n: usize = n.parse().map_err(|_| Usage(format!("`{n}` is not a pair count")))?;
            return Ok(PairSource::Random { n, seed: self.c.seed });
        }
        usage(format!("unknown pair source `{s}`"))
    }

    fn bounds_json(&self) -> Value {
        json!({"steps": self.c.bounds.max_steps, "depth": self.c.bounds.max_spec_depth})
    }
}

fn state_json(p: &Program, s: &State) -> Value {
    let regs: serde_json::Map<String, Value> = p.reg_ids().map(|r| (p.reg_name(r).to_string(), json!(s.reg(r)))).collect();
    let cells: serde_json::Map<String, Value> =
        p.cells().into_iter().enumerate().map(|(i, (v, o))| (format!("{}[{o}]", p.var_name(v)), json!(s.mem[i]))).collect();
    json!({"pc": p.label(s.pc), "regs": regs, "cells": cells})
}

/// The assignment file format read by `--state`.
fn state_file(p: &Program, s: &State) -> String {
    let mut out = String::new();
    for r in p.reg_ids() {
        out.push_str(&format!("reg {} {}\n", p.reg_name(r), s.reg(r)));
    }
    for (i, (v, o)) in p.cells().into_iter().enumerate() {
        out.push_str(&format!("cell {} {o} {}\n", p.var_name(v), s.mem[i]));
    }
    out
}

fn dirs_json(p: &Program, ds: &[Directive]) -> Value {
    json!(ds.iter().map(|d| fmt_directive(p, d)).collect::<Vec<_>>())
}

fn leaks_json(ls: &[snip::sem::Leak]) -> Value {
    json!(ls.iter().map(|l| l.to_string()).collect::<Vec<_>>())
}

fn exec_json(p: &Program, e: &Execution) -> Value {
    let steps: Vec<Value> = e
        .steps
        .iter()
        .map(|s| json!({"directive": fmt_directive(p, &s.directive), "leak": s.leak.to_string(), "pcs": s.state.fmt_pcs(p)}))
        .collect();
    let status = match e.status {
        RunStatus::Completed => json!("completed"),
        RunStatus::Final => json!("final"),
        RunStatus::Stuck(i) => json!({"stuck": i}),
    };
    json!({"status": status, "steps": steps})
}

fn violation_text(p: &Program, v: &Violation) -> Vec<String> {
    let div = match &v.divergence {
        snip::security::Divergence::DifferentLeak(a, b) => format!("different leak: {a} vs {b}"),
        snip::security::Divergence::DifferentEnabled(a, b) => {
            format!("different enabled directives: [{}] vs [{}]", fmt_directives(p, a), fmt_directives(p, b))
        }
    };
    vec![
        format!("directives: {}", fmt_directives(p, &v.directives)),
        format!("leaks 1: {}", fmt_leaks(&v.leaks1)),
        format!("leaks 2: {}", fmt_leaks(&v.leaks2)),
        div,
    ]
}

fn violation_json(p: &Program, v: &Violation) -> Value {
    let div = match &v.divergence {
        snip::security::Divergence::DifferentLeak(a, b) => json!({"kind": "leak", "left": a.to_string(), "right": b.to_string()}),
        snip::security::Divergence::DifferentEnabled(a, b) => {
            json!({"kind": "enabled", "left": dirs_json(p, a), "right": dirs_json(p, b)})
        }
    };
    json!({
        "state1": state_json(p, &v.s1),
        "state2": state_json(p, &v.s2),
        "directives": dirs_json(p, &v.directives),
        "leaks1": leaks_json(&v.leaks1),
        "leaks2": leaks_json(&v.leaks2),
        "divergence": div,
    })
}

fn sni_out(p: &Program, r: &SniReport) -> (u8, Vec<String>, Value) {
    match &r.verdict {
        SniVerdict::Violation(v) => {
            let mut t = vec![format!("violation after {} pair(s)", r.pairs)];
            t.extend(violation_text(p, v));
            (VIOLATION, t, json!({"verdict": "violation", "pairs": r.pairs, "violation": violation_json(p, v)}))
        }
        SniVerdict::Secure { truncated } => {
            let code = if *truncated > 0 { INCONCLUSIVE } else { PASS };
            let t = if *truncated > 0 {
                format!("secure up to bounds on {} pair(s); {truncated} path(s) cut by the bounds", r.pairs)
            } else {
                format!("secure on {} pair(s)", r.pairs)
            };
            (code, vec![t], json!({"verdict": "secure", "pairs": r.pairs, "truncated": truncated}))
        }
    }
}

fn sim_out(v: &SimVerdict, src: &Program, tgt: &Program) -> (u8, Vec<String>, Value) {
    match v {
        SimVerdict::Pass { pairs, intervals, truncated } => (
            if *truncated > 0 { INCONCLUSIVE } else { PASS },
            vec![
                format!("pass: {pairs} related pair(s), {intervals} interval(s), {truncated} truncated"),
                "evidence up to the bounds, not a proof".into(),
            ],
            json!({"verdict": "pass", "pairs": pairs, "intervals": intervals, "truncated": truncated}),
        ),
        SimVerdict::Fail(f) => (
            VIOLATION,
            vec![format!("fail at source {} / target {}: {}", f.src.fmt_pcs(src), f.tgt.fmt_pcs(tgt), f.reason)],
            json!({"verdict": "fail", "source_pcs": f.src.fmt_pcs(src), "target_pcs": f.tgt.fmt_pcs(tgt), "reason": f.reason}),
        ),
    }
}

fn cube_out(v: &CubeVerdict, src: &Program, tgt: &Program) -> (u8, Vec<String>, Value) {
    match v {
        CubeVerdict::Pass { quadruples, intervals, truncated } => (
            if *truncated > 0 { INCONCLUSIVE } else { PASS },
            vec![
                format!("pass: {quadruples} quadruple(s), {intervals} interval(s), {truncated} truncated"),
                "evidence up to the bounds, not a proof".into(),
            ],
            json!({"verdict": "pass", "quadruples": quadruples, "intervals": intervals, "truncated": truncated}),
        ),
        CubeVerdict::Fail(f) => {
            let other = f.other_tgt_leaks.as_ref().map(|l| fmt_leaks(l)).unwrap_or_else(|| "(not executable)".into());
            (
                VIOLATION,
                vec![
                    format!("fail: {}", f.reason),
                    format!("pair 1: source {} / target {}", f.src1.fmt_pcs(src), f.tgt1.fmt_pcs(tgt)),
                    format!("pair 2: source {} / target {}", f.src2.fmt_pcs(src), f.tgt2.fmt_pcs(tgt)),
                    format!("target directives: {}", fmt_directives(tgt, &f.tgt_dirs)),
                    format!("target leaks 1: {}", fmt_leaks(&f.tgt_leaks)),
                    format!("target leaks 2: {other}"),
                    format!("source directives: {}", fmt_directives(src, &f.src_dirs)),
                    format!("source leaks: {}", fmt_leaks(&f.src_leaks)),
                ],
                json!({
                    "verdict": "fail",
                    "reason": f.reason,
                    "target_directives": dirs_json(tgt, &f.tgt_dirs),
                    "target_leaks": leaks_json(&f.tgt_leaks),
                    "other_target_leaks": f.other_tgt_leaks.as_ref().map(|l| leaks_json(l)),
                    "source_directives": dirs_json(src, &f.src_dirs),
                    "source_leaks": leaks_json(&f.src_leaks),
                    "state1": {"source": state_json(src, f.src1.top()), "target": state_json(tgt, f.tgt1.top())},
                    "state2": {"source": state_json(src, f.src2.top()), "target": state_json(tgt, f.tgt2.top())},
                }),
            )
        }
    }
}

fn fix_lines(r: &FixReport) -> Vec<String> {
    let mut t = vec![format!("{} iteration(s), {} insertion(s)", r.iterations, r.inserted.len())];
    for i in &r.inserted {
        t.push(format!("inserted {}: {} before {} ({})", i.label, i.instr, i.before, i.reason));
    }
    t
}

fn fix_json(r: &FixReport) -> Value {
    let ins: Vec<Value> = r
        .inserted
        .iter()
        .map(|i| json!({"label": i.label, "instr": i.instr, "before": i.before, "reason": i.reason}))
        .collect();
    json!({"iterations": r.iterations, "inserted": ins})
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ra_files(files: &[PathBuf]) -> Result<RaFiles> {
    match files {
        [s, t, w] => Ok(RaFiles { source: s.clone(), target: t.clone(), witness: w.clone() }),
        _ => usage("an ra witness takes three files: source, target, witness"),
    }
}

fn dce_file(files: &[PathBuf]) -> Result<&PathBuf> {
    match files {
        [p] => Ok(p),
        _ => usage("a dce witness takes one file: the source program"),
    }
}

fn execute(ctx: &Ctx, cmd: &Cmd) -> Result<Out> {
    let b = ctx.c.bounds;
    Ok(match cmd {
        Cmd::Run { program, state, directives } => {
            let p = ctx.program(program)?;
            let s = ctx.state(&p, state.as_ref())?;
            let ds = match directives {
                None => vec![],
                Some(f) => {
                    let text = ctx.read(f)?;
                    match parse_directives(&p, &text) {
                        Ok(ds) => ds,
                        Err(e) => return usage(format!("{}: {e}", f.display())),
                    }
                }
            };
            let e = run_directives(&p, &SpecState::new(s), &ds);
            let mut t = e.trace_lines(&p);
            let code = match e.status {
                RunStatus::Completed => {
                    t.push(format!("completed at {}", e.last().fmt_pcs(&p)));
                    PASS
                }
                RunStatus::Final => {
                    t.push("final".into());
                    PASS
                }
                RunStatus::Stuck(i) => {
                    t.push(format!("stuck: directive {i} ({}) is not enabled at {}", fmt_directive(&p, &ds[i]), e.last().fmt_pcs(&p)));
                    VIOLATION
                }
            };
            Out::new(code, t, exec_json(&p, &e))
        }
        Cmd::Explore { program, state } => {
            let p = ctx.program(program)?;
            let s = ctx.state(&p, state.as_ref())?;
            let bs = explore_behaviors(&p, &SpecState::new(s), b);
            let mut t = vec![format!("{} terminated, {} truncated", bs.terminated.len(), bs.truncated.len())];
            for (ls, ds) in &bs.terminated {
                t.push(format!("{} | {}", fmt_directives(&p, ds), fmt_leaks(ls)));
            }
            for (ls, ds) in &bs.truncated {
                t.push(format!("{} | {} | truncated", fmt_directives(&p, ds), fmt_leaks(ls)));
            }
            let beh = |set: &std::collections::BTreeSet<snip::sem::Behavior>| -> Vec<Value> {
                set.iter().map(|(ls, ds)| json!({"directives": dirs_json(&p, ds), "leaks": leaks_json(ls)})).collect()
            };
            let code = if bs.truncated.is_empty() { PASS } else { INCONCLUSIVE };
            Out::new(code, t, json!({"terminated": beh(&bs.terminated), "truncated": beh(&bs.truncated)}))
        }
        Cmd::CheckSafe { program, state } => {
            let p = ctx.program(program)?;
            let s = ctx.state(&p, state.as_ref())?;
            match check_safety(&p, &s, b.max_steps) {
                Safety::Safe => Out::new(PASS, vec!["safe".into()], json!({"verdict": "safe"})),
                Safety::Unsafe(i) => {
                    Out::new(VIOLATION, vec![format!("unsafe access at step {i}")], json!({"verdict": "unsafe", "step": i}))
                }
                Safety::BoundExhausted => Out::new(
                    INCONCLUSIVE,
                    vec![format!("no unsafe access within {} steps", b.max_steps)],
                    json!({"verdict": "bound-exhausted"}),
                ),
            }
        }
        Cmd::CheckSni { program, state, against, witness_out } => {
            let p = ctx.program(program)?;
            let s = ctx.state(&p, state.as_ref())?;
            let src = ctx.pair_source(&p, against.as_ref())?;
            let r = match check_sni(&p, &s, &src, b, ctx.c.budget) {
                Ok(r) => r,
                Err(e) => return usage(e.to_string()),
            };
            let (code, mut t, mut j) = sni_out(&p, &r);
            if let (SniVerdict::Violation(v), Some(dir)) = (&r.verdict, witness_out) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                write_file(&dir.join("state1.init"), &state_file(&p, &v.s1))?;
                write_file(&dir.join("state2.init"), &state_file(&p, &v.s2))?;
                let ds: String = v.directives.iter().map(|d| fmt_directive(&p, d) + "\n").collect();
                write_file(&dir.join("directives.txt"), &ds)?;
                t.push(format!("replay files written to {}", dir.display()));
                j["witness_dir"] = json!(dir.display().to_string());
            }
            j["bounds"] = ctx.bounds_json();
            Out::new(code, t, j)
        }
        Cmd::Dce { program, output } => {
            let p = ctx.program(program)?;
            let r = dce(&p)?;
            let text = print_program(&r.target);
            let removed: Vec<&str> = p.pcs().filter(|pc| r.replaced[pc.idx()]).map(|pc| p.label(pc)).collect();
            let mut t = vec![];
            match output {
                Some(f) => {
                    write_file(f, &text)?;
                    t.push(format!("wrote {}", f.display()));
                }
                None => t.extend(text.lines().map(String::from)),
            }
            t.push(format!("replaced by nop: {}", if removed.is_empty() { "none".into() } else { removed.join(", ") }));
            Out::new(PASS, t, json!({"target": text, "replaced": removed}))
        }
        Cmd::Liveness { program, exit } => {
            let p = ctx.program(program)?;
            let exit_fact = match exit.as_str() {
                "all" => LiveSet::full(&p),
                "mems" => LiveSet::all_mems(&p),
                other => return usage(format!("unknown exit fact `{other}`")),
            };
            let sol = liveness(&p, &exit_fact)?;
            let mut t = vec![];
            let mut rows = vec![];
            for pc in p.pcs() {
                let li = live_in(&p, &sol, pc);
                let lo = sol.get(pc.idx());
                t.push(format!("{}: in {} out {}", p.label(pc), li.render(&p), lo.render(&p)));
                rows.push(json!({"pc": p.label(pc), "in": li.render(&p), "out": lo.render(&p)}));
            }
            Out::new(PASS, t, json!({"facts": rows}))
        }
        Cmd::Allocate { program, k, out_target, out_witness } => {
            let p = ctx.program(program)?;
            let w = match allocate(&p, *k) {
                Ok(w) => w,
                Err(e) => return Ok(Out::new(VIOLATION, vec![format!("allocation failed: {e}")], json!({"error": e.to_string()}))),
            };
            let tgt = print_program(&w.tgt);
            let wit = serialize_ra_witness(&w);
            let mut t = vec![];
            match out_target {
                Some(f) => write_file(f, &tgt)?,
                None => t.extend(tgt.lines().map(String::from)),
            }
            match out_witness {
                Some(f) => write_file(f, &wit)?,
                None => {
                    t.push(String::new());
                    t.extend(wit.lines().map(String::from))
                }
            }
            let diags = validate_ra_default(&w)?;
            t.push(format!("{} diagnostic(s)", diags.len()));
            Out::new(if diags.is_empty() { PASS } else { VIOLATION }, t, json!({"target": tgt, "witness": wit, "diagnostics": diags.len()}))
        }
        Cmd::ValidateRa(f) => {
            let w = ctx.witness(f)?;
            let diags = validate_ra_default(&w)?;
            let mut t: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
            if diags.is_empty() {
                t.push("valid".into());
            }
            let j: Vec<Value> =
                diags.iter().map(|d| json!({"kind": d.kind.to_string(), "pcs": d.pcs, "message": d.msg})).collect();
            Out::new(if diags.is_empty() { PASS } else { VIOLATION }, t, json!({"diagnostics": j}))
        }
        Cmd::ProductRun { files, state, directives } => {
            let w = ctx.witness(files)?;
            product_run(ctx, &w, state.as_ref(), directives.as_ref())?
        }
        Cmd::PoisonAnalyze(f) => {
            let w = ctx.witness(f)?;
            let prod = Product::new(&w)?;
            let sp = prod.poison_analysis()?;
            let t = prod.render_static(&sp);
            let rows: Vec<Value> = w
                .tgt
                .pcs()
                .map(|pc| {
                    let fact = sp.facts[pc.idx()].as_ref().map(|pi| prod.render_pi(pi));
                    json!({"pc": w.tgt.label(pc), "matched": prod.is_matched(pc), "poison": fact})
                })
                .collect();
            Out::new(PASS, t, json!({"facts": rows}))
        }
        Cmd::CheckTypable(f) => {
            let w = ctx.witness(f)?;
            typable(&w)?
        }
        Cmd::Fix { files, out_target, out_witness, in_place } => {
            let w = ctx.witness(files)?;
            let (fixed, rep) = match fix_ra(&w) {
                Ok(x) => x,
                Err(e) => return Ok(Out::new(VIOLATION, vec![format!("fix failed: {e}")], json!({"error": e.to_string()}))),
            };
            let tgt = print_program(&fixed.tgt);
            let wit = serialize_ra_witness(&fixed);
            let (ot, ow) = if *in_place {
                (Some(&files.target), Some(&files.witness))
            } else {
                (out_target.as_ref(), out_witness.as_ref())
            };
            let mut t = fix_lines(&rep);
            match ot {
                Some(f) => write_file(f, &tgt)?,
                None => t.extend(tgt.lines().map(String::from)),
            }
            match ow {
                Some(f) => write_file(f, &wit)?,
                None => t.extend(wit.lines().map(String::from)),
            }
            let mut j = fix_json(&rep);
            j["target"] = json!(tgt);
            j["witness"] = json!(wit);
            Out::new(PASS, t, j)
        }
        Cmd::CheckSim { witness, files, state } => match witness {
            WitnessKind::Dce => {
                let p = ctx.program(dce_file(files)?)?;
                let r = dce(&p)?;
                let w = DceWitness::new(&p, &r, IntervalPolicy::Lockstep);
                let t0 = ctx.state(&w.tgt, state.as_ref())?;
                let (c, t, j) = sim_out(&check_simulation(&w, &[t0], b), &w.src, &w.tgt);
                Out::new(c, t, j)
            }
            WitnessKind::Ra => {
                let w = ctx.witness(&ra_files(files)?)?;
                let sim = RaSim::new(&w)?;
                let t0 = ctx.state(&w.tgt, state.as_ref())?;
                let (c, t, j) = sim_out(&check_simulation(&sim, &[t0], b), &w.src, &w.tgt);
                Out::new(c, t, j)
            }
        },
        Cmd::CheckSnippy { witness, files, state, against } => match witness {
            WitnessKind::Dce => {
                let p = ctx.program(dce_file(files)?)?;
                let r = dce(&p)?;
                let w = DceWitness::new(&p, &r, IntervalPolicy::Lockstep);
                cube(ctx, &w, state.as_ref(), against.as_ref())?
            }
            WitnessKind::Ra => {
                let w = ctx.witness(&ra_files(files)?)?;
                let sim = RaSim::new(&w)?;
                cube(ctx, &sim, state.as_ref(), against.as_ref())?
            }
        },
        Cmd::DemoCodera => demo(ctx)?,
    })
}

fn cube<W: SimWitness>(ctx: &Ctx, w: &W, state: Option<&PathBuf>, against: Option<&PathBuf>) -> Result<Out> {
    let t0 = ctx.state(w.target(), state)?;
    let src = ctx.pair_source(w.target(), against)?;
    let v = match check_snippy_cube(w, &t0, &src, ctx.c.bounds, ctx.c.budget) {
        Ok(v) => v,
        Err(e) => return usage(e.to_string()),
    };
    let (c, t, mut j) = cube_out(&v, w.source(), w.target());
    j["bounds"] = ctx.bounds_json();
    Ok(Out::new(c, t, j))
}

fn typable(w: &RaWitness) -> Result<Out> {
    let prod = Product::new(w)?;
    let vs = prod.check_poison_typable(&prod.poison_analysis()?);
    let mut t: Vec<String> = vs.iter().map(|v| prod.fmt_violation(v)).collect();
    if vs.is_empty() {
        t.push("typable".into());
    }
    let j: Vec<Value> = vs
        .iter()
        .map(|v| {
            json!({
                "kind": v.kind.to_string(),
                "source_pc": w.src.label(v.src),
                "target_pc": w.tgt.label(v.tgt),
                "register": w.src.reg_name(v.reg),
                "poison": v.value.to_string(),
            })
        })
        .collect();
    Ok(Out::new(if vs.is_empty() { PASS } else { VIOLATION }, t, json!({"violations": j})))
}

fn product_run(ctx: &Ctx, w: &RaWitness, state: Option<&PathBuf>, directives: Option<&PathBuf>) -> Result<Out> {
    let prod = Product::new(w)?;
    let t0 = ctx.state(&w.tgt, state)?;
    let ds = match directives {
        None => vec![],
        Some(f) => {
            let text = ctx.read(f)?;
            match parse_directives(&w.tgt, &text) {
                Ok(ds) => ds,
                Err(e) => return usage(format!("{}: {e}", f.display())),
            }
        }
    };
    let mut st = prod.initial(&t0);
    let mut t = vec![];
    let mut steps = vec![];
    for (i, d) in ds.iter().enumerate() {
        let Some(tr) = prod.replay_target_step(&st, *d) else {
            let why = if prod.replay(&st, *d, false).is_some() { "a poison guard fails" } else { "not enabled" };
            t.push(format!("stuck at directive {i} ({}): {why}", fmt_directive(&w.tgt, d)));
            return Ok(Out::new(VIOLATION, t, json!({"steps": steps, "stuck": i, "reason": why})));
        };
        t.push(prod.fmt_transition(&tr));
        t.push(format!("  poison {}", prod.render_pi(tr.next.pis.last().unwrap())));
        steps.push(json!({
            "target_directive": fmt_directive(&w.tgt, &tr.tgt_dir),
            "target_leak": tr.tgt_leak.to_string(),
            "source_directive": tr.src.map(|(d, _)| fmt_directive(&w.src, &d)),
            "source_leak": tr.src.map(|(_, l)| l.to_string()),
            "rule": tr.rule,
            "related": prod.approx(&tr.next),
        }));
        st = tr.next;
    }
    Ok(Out::new(PASS, t, json!({"steps": steps})))
}

const CODERA_SRC: &str = include_str!("../../../corpus/codera.sp");
const CODERA_TGT: &str = include_str!("../../../corpus/codera.tgt.sp");
const CODERA_WIT: &str = include_str!("../../../corpus/codera.wit");
const CODERA_INIT: &str = include_str!("../../../corpus/codera.init");
const CODERA_ALT: &str = include_str!("../../../corpus/codera.alt.init");

fn demo(ctx: &Ctx) -> Result<Out> {
    let b = ctx.c.bounds;
    let w = ctx.witness_text(CODERA_SRC, CODERA_TGT, CODERA_WIT)?;
    let t0 = ctx.state_text(&w.tgt, CODERA_INIT, "codera.init")?;
    let t1 = ctx.state_text(&w.tgt, CODERA_ALT, "codera.alt.init")?;
    let mut t = vec!["== target as allocated".to_string()];
    let r = check_sni(&w.tgt, &t0, &PairSource::Explicit(t1.clone()), b, ctx.c.budget)?;
    let mut j = json!({"bounds": ctx.bounds_json()});
    match &r.verdict {
        SniVerdict::Violation(v) => {
            t.extend(violation_text(&w.tgt, v));
            let e = run_directives(&w.tgt, &SpecState::new(v.s1.clone()), &v.directives);
            t.push("trace of the first run:".into());
            t.extend(e.trace_lines(&w.tgt).into_iter().map(|l| format!("  {l}")));
            j["attack"] = violation_json(&w.tgt, v);
        }
        SniVerdict::Secure { .. } => {
            t.push("no leak found".into());
            j["attack"] = Value::Null;
        }
    }
    t.push("== source".into());
    let rs = check_sni(&w.src, &w.map_state(&t0), &PairSource::Explicit(w.map_state(&t1)), b, ctx.c.budget)?;
    let (_, st, sj) = sni_out(&w.src, &rs);
    t.extend(st);
    j["source"] = sj;
    t.push("== poison analysis".into());
    let ty = typable(&w)?;
    t.extend(ty.text);
    j["typability"] = ty.json;
    t.push("== fix".into());
    let (fixed, rep) = fix_ra(&w).map_err(|e| anyhow!("{e}"))?;
    t.extend(fix_lines(&rep));
    j["fix"] = fix_json(&rep);
    t.push("== fixed target".into());
    let rf = check_sni(&fixed.tgt, &t0, &PairSource::Explicit(t1), b, ctx.c.budget)?;
    let (code, ft, fj) = sni_out(&fixed.tgt, &rf);
    t.extend(ft);
    j["fixed"] = fj;
    let ok = r.verdict.is_violation() && !rs.verdict.is_violation() && code == PASS;
    t.push(if ok { "reproduced: the allocation leaks, the fix removes the leak".into() } else { "not reproduced".into() });
    Ok(Out::new(if ok { PASS } else { VIOLATION }, t, j))
}

fn command_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Run { .. } => "run",
        Cmd::Explore { .. } => "explore",
        Cmd::CheckSafe { .. } => "check-safe",
        Cmd::CheckSni { .. } => "check-sni",
        Cmd::Dce { .. } => "dce",
        Cmd::Liveness { .. } => "liveness",
        Cmd::Allocate { .. } => "allocate",
        Cmd::ValidateRa(_) => "validate-ra",
        Cmd::ProductRun { .. } => "product-run",
        Cmd::PoisonAnalyze(_) => "poison-analyze",
        Cmd::CheckTypable(_) => "check-typable",
        Cmd::Fix { .. } => "fix",
        Cmd::CheckSim { .. } => "check-sim",
        Cmd::CheckSnippy { .. } => "check-snippy",
        Cmd::DemoCodera => "demo-codera",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { PASS });
        }
    };
    let format = cli.common.format;
    let name = command_name(&cli.cmd);
    let ctx = Ctx { c: cli.common };
    match execute(&ctx, &cli.cmd) {
        Ok(out) => {
            match format {
                Format::Text => {
                    for l in &out.text {
                        println!("{l}");
                    }
                }
                Format::Json => {
                    let mut j = json!({"schema": 1, "command": name, "exit": out.code});
                    if let Value::Object(m) = out.json {
                        for (k, v) in m {
                            j[k] = v;
                        }
                    } else {
                        j["result"] = out.json;
                    }
                    println!("{}", serde_json::to_string_pretty(&j).expect("json"));
                }
            }
            ExitCode::from(out.code)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::from(VIOLATION)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_flag() {
        let b = parse_bounds("steps=16,depth=2").unwrap();
        assert_eq!((b.max_steps, b.max_spec_depth), (16, 2));
        assert!(parse_bounds("steps=0").is_err());
        assert!(parse_bounds("depth").is_err());
        assert!(parse_bounds("size=3").is_err());
    }

    #[test]
    fn state_file_round_trips() {
        let p = parse_program(CODERA_SRC).unwrap();
        let (r, c) = parse_assignments(&p, CODERA_INIT).unwrap();
        let s = State::from_assignments(&p, &r, &c);
        let (r2, c2) = parse_assignments(&p, &state_file(&p, &s)).unwrap();
        assert_eq!(State::from_assignments(&p, &r2, &c2), s);
    }
}

