//! Acceptance suite: one line per criterion, then a single assertion over all of them.
//!
//! Tolerances: criterion 1 must finish within 5 s of wall time; every other
//! criterion is an exact match.

#[path = "../../snip/tests/common/mod.rs"]
mod common;
#[path = "../../snip/tests/common/props.rs"]
mod props;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use serde_json::Value;
use snip::ir::{parse_assignments, parse_program, print_program, Program};
use snip::liveness::{dce, DceWitness, IntervalPolicy};
use snip::security::{check_sni_pair, SniVerdict};
use snip::sem::{Bounds, Directive, Leak, State};
use snip::snippy::SimWitness;

const TIME_LIMIT: Duration = Duration::from_secs(5);

fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

fn corpus(name: &str) -> String {
    std::fs::read_to_string(corpus_dir().join(name)).unwrap()
}

/// Runs the binary from the corpus directory with JSON output.
fn snip(args: &[&str]) -> (i32, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_snip")).current_dir(corpus_dir()).arg("--format").arg("json").args(args).output().unwrap();
    let code = out.status.code().unwrap_or(-1);
    let json = serde_json::from_slice(&out.stdout).unwrap_or(Value::Null);
    (code, json)
}

fn state(p: &Program, text: &str) -> State {
    let (r, c) = parse_assignments(p, text).unwrap();
    State::from_assignments(p, &r, &c)
}

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn line(&mut self, n: usize, res: Result<String, String>) {
        match res {
            Ok(m) => println!("[PASS] criterion {n}: {m}"),
            Err(m) => {
                println!("[FAIL] criterion {n}: {m}");
                self.failed.push(n);
            }
        }
    }
}

fn strings(v: &Value) -> Vec<String> {
    v.as_array().map(|a| a.iter().filter_map(|x| x.as_str().map(String::from)).collect()).unwrap_or_default()
}

/// Index of `spec` and of a later `store stk 0`, if both occur.
fn spec_then_stack_store(dirs: &[String]) -> Option<(usize, usize)> {
    let s = dirs.iter().position(|d| d == "spec")?;
    let t = dirs[s..].iter().position(|d| d == "store stk 0")? + s;
    Some((s, t))
}

fn criterion1() -> Result<String, String> {
    let start = Instant::now();
    let mut notes = vec![];
    // 42 against 0 explicitly, then 42 against every other key value.
    for pairs in [&["--pairs", "explicit", "--against", "codera.alt.init"][..], &["--pairs", "exhaustive"][..]] {
        let mut args = vec!["--bounds", "steps=32,depth=3", "check-sni", "codera.tgt.sp", "--state", "codera.init"];
        args.extend(pairs);
        let (code, j) = snip(&args);
        if code != 1 || j["verdict"] != "violation" {
            return Err(format!("target with {}: exit {code}, verdict {}", pairs[1], j["verdict"]));
        }
        let dirs = strings(&j["violation"]["directives"]);
        if spec_then_stack_store(&dirs).is_none() {
            return Err(format!("target trace lacks spec then store stk 0: {}", dirs.join(" · ")));
        }
        notes.push(format!("target {}: {}", pairs[1], dirs.join(" · ")));
        args[3] = "codera.sp";
        let (code, j) = snip(&args);
        if code != 0 || j["verdict"] != "secure" {
            return Err(format!("source with {}: exit {code}, verdict {}", pairs[1], j["verdict"]));
        }
    }
    let t = start.elapsed();
    if t >= TIME_LIMIT {
        return Err(format!("took {t:?}, limit {TIME_LIMIT:?}"));
    }
    Ok(format!("{}; source secure; {:.0?} (limit 5 s)", notes.join("; "), t))
}

fn criterion2() -> Result<String, String> {
    let (code, j) = snip(&["check-typable", "codera.sp", "codera.tgt.sp", "codera.wit"]);
    let vs = j["violations"].as_array().cloned().unwrap_or_default();
    if code != 1 || vs.len() != 1 {
        return Err(format!("expected one violation, exit {code}, got {}", vs.len()));
    }
    let v = &vs[0];
    if v["kind"] != "branch" || v["source_pc"] != "4" || v["target_pc"] != "f" || v["register"] != "bytes" {
        return Err(format!("wrong violation {v}"));
    }
    let dir = tempdir();
    let (ft, fw) = (dir.join("fixed.sp"), dir.join("fixed.wit"));
    let (ft, fw) = (ft.to_str().unwrap(), fw.to_str().unwrap());
    let (code, j) = snip(&["fix", "codera.sp", "codera.tgt.sp", "codera.wit", "--out-target", ft, "--out-witness", fw]);
    let ins = j["inserted"].as_array().cloned().unwrap_or_default();
    if code != 0 || ins.len() != 1 {
        return Err(format!("fix: exit {code}, {} insertion(s)", ins.len()));
    }
    let instr = ins[0]["instr"].as_str().unwrap_or_default().to_string();
    if !(instr.starts_with("sfence") || instr.starts_with("slh")) {
        return Err(format!("inserted {instr}, not a fence-class instruction"));
    }
    let (code, j) = snip(&["check-typable", "codera.sp", ft, fw]);
    if code != 0 || !j["violations"].as_array().is_some_and(|a| a.is_empty()) {
        return Err(format!("fixed witness still untypable: {}", j["violations"]));
    }
    for pairs in [&["--pairs", "explicit", "--against", "codera.alt.init"][..], &["--pairs", "exhaustive"][..]] {
        let mut args = vec!["--bounds", "steps=32,depth=3", "check-sni", ft, "--state", "codera.init"];
        args.extend(pairs);
        let (code, j) = snip(&args);
        if code != 0 || j["verdict"] != "secure" {
            return Err(format!("fixed target with {}: exit {code}, verdict {}", pairs[1], j["verdict"]));
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(format!("one branch violation at (4, f) on bytes; fix inserted `{instr}`; 0 after; fixed target secure on the same pairs"))
}

fn tempdir() -> PathBuf {
    let d = std::env::temp_dir().join(format!("snip-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

const DCE_GOLDEN: &str = "\
mem secret 1 high
mem buf 2 low
entry 1
1: if c ? 2 : 3
2: nop -> 3
3: a = z sub z -> 4
4: ret
";

fn criterion3() -> Result<String, String> {
    let src = parse_program(&corpus("codedce.sp")).unwrap();
    let res = dce(&src).map_err(|e| e.to_string())?;
    let text = print_program(&res.target);
    if text != DCE_GOLDEN {
        return Err(format!("target differs from the golden listing:\n{text}"));
    }
    let src = src.with_width(2);
    let tgt = res.target.with_width(2);
    let b = Bounds::new(16, 2);
    let regs = src.regs.len();
    let low_cells: Vec<usize> = src.cells().into_iter().enumerate().filter(|(_, (v, _))| src.mems[v.idx()].level == snip::ir::Level::Low).map(|(i, _)| i).collect();
    let high: Vec<usize> = (0..src.cells().len()).filter(|i| !low_cells.contains(i)).collect();
    let low_bits = 2 * (regs + low_cells.len());
    let mut pairs = 0;
    let mut secure = 0;
    for low in 0u64..1 << low_bits {
        let mut base = State::zero(&src);
        let mut bits = low;
        for r in base.regs.iter_mut() {
            *r = bits & 3;
            bits >>= 2;
        }
        for &c in &low_cells {
            base.mem[c] = bits & 3;
            bits >>= 2;
        }
        let highs: Vec<State> = (0u64..1 << (2 * high.len()))
            .map(|h| {
                let mut s = base.clone();
                for (k, &c) in high.iter().enumerate() {
                    s.mem[c] = (h >> (2 * k)) & 3;
                }
                s
            })
            .collect();
        for i in 0..highs.len() {
            for j in i + 1..highs.len() {
                let vs = check_sni_pair(&src, &highs[i], &highs[j], b).map_err(|e| e.to_string())?;
                let vt = check_sni_pair(&tgt, &highs[i], &highs[j], b).map_err(|e| e.to_string())?;
                if vs.is_violation() != vt.is_violation() {
                    return Err(format!("verdicts differ on {:?} / {:?}", highs[i], highs[j]));
                }
                if let (SniVerdict::Secure { truncated: a }, SniVerdict::Secure { truncated: b }) = (&vs, &vt) {
                    if *a + *b > 0 {
                        return Err("bounds cut a path; agreement is not exhaustive".into());
                    }
                    secure += 1;
                }
                pairs += 1;
            }
        }
    }
    Ok(format!("golden target matches; verdicts agree on all {pairs} low-equivalent pairs at width 2 ({secure} secure in both)"))
}

fn criterion4() -> Result<String, String> {
    let src = parse_program(&corpus("codedce.sp")).unwrap();
    let res = dce(&src).map_err(|e| e.to_string())?;
    let w = DceWitness::new(&src, &res, IntervalPolicy::SpecWindow);
    let pair = w.map_initial(&state(&w.tgt, &corpus("codedce.init")));
    let secret = src.var_of("secret").unwrap();
    let mut got: Vec<_> = w
        .intervals(&pair, Bounds::new(8, 3))
        .into_iter()
        .filter(|iv| iv.tgt_dirs != [Directive::Rb])
        .map(|iv| (iv.tgt_dirs, iv.tgt_leaks, iv.src_dirs, iv.src_leaks))
        .collect();
    got.sort();
    let want = vec![
        (vec![Directive::If], vec![Leak::If(false)], vec![Directive::If], vec![Leak::If(false)]),
        (
            vec![Directive::Spec, Directive::Step, Directive::Step],
            vec![Leak::If(false), Leak::None, Leak::None],
            vec![Directive::Spec, Directive::Load(secret, 0), Directive::Step],
            vec![Leak::If(false), Leak::Load(2), Leak::None],
        ),
    ];
    if got != want {
        return Err(format!("intervals {got:?}"));
    }
    Ok("exactly (if ∥ if) and (spec · step · step ∥ spec · load secret 0 · step) with the listed leaks".into())
}

fn criterion5() -> Result<String, String> {
    let props: [(&str, fn() -> Result<(), String>); 8] = [
        ("directive determinism", props::determinism),
        ("pc leakage", props::pc_leakage),
        ("product well-definedness", props::product_well_defined),
        ("spec-free purity", props::spec_free_purity),
        ("static over-approximation", props::static_overapprox),
        ("typable never stuck", props::typable_never_stuck),
        ("liveness guarantee", props::liveness_guarantee),
        ("allocator validity", props::allocator_validity),
    ];
    let mut bad = vec![];
    for (name, f) in props {
        if let Err(e) = f() {
            bad.push(format!("{name}: {e}"));
        }
    }
    if bad.is_empty() {
        Ok(format!("{} properties, {} cases each", props.len(), common::CASES))
    } else {
        Err(bad.join("; "))
    }
}

fn criterion6() -> Result<String, String> {
    let w2 = ["--width", "2", "--bounds", "steps=24,depth=2"];
    let cube = |files: &[&str], kind: &str, init: &str| {
        let mut args = w2.to_vec();
        args.extend(["check-snippy", "--witness", kind]);
        args.extend(files);
        args.extend(["--state", init]);
        snip(&args)
    };
    let (code, j) = cube(&["codera_w2.sp", "codera_w2.tgt.sp", "codera_w2.wit"], "ra", "codera_w2.init");
    if code != 1 || j["verdict"] != "fail" {
        return Err(format!("unfixed allocation: exit {code}, verdict {}", j["verdict"]));
    }
    let dir = tempdir();
    let (ft, fw) = (dir.join("fixed_w2.sp"), dir.join("fixed_w2.wit"));
    let (ft, fw) = (ft.to_str().unwrap(), fw.to_str().unwrap());
    let mut args = w2.to_vec();
    args.extend(["fix", "codera_w2.sp", "codera_w2.tgt.sp", "codera_w2.wit", "--out-target", ft, "--out-witness", fw]);
    let (code, _) = snip(&args);
    if code != 0 {
        return Err(format!("fix exited {code}"));
    }
    let (code, j) = cube(&["codera_w2.sp", ft, fw], "ra", "codera_w2.init");
    let _ = std::fs::remove_dir_all(&dir);
    if code != 0 || j["verdict"] != "pass" || j["truncated"] != 0 {
        return Err(format!("fixed allocation: exit {code}, verdict {}", j["verdict"]));
    }
    let q = j["quadruples"].clone();
    let (code, j) = cube(&["codedce.sp"], "dce", "codedce.init");
    if code != 0 || j["verdict"] != "pass" || j["truncated"] != 0 {
        return Err(format!("dce: exit {code}, verdict {}", j["verdict"]));
    }
    Ok(format!("unfixed fails; fixed passes ({q} quadruples); dce passes ({} quadruples); exhaustive, no truncation", j["quadruples"]))
}

#[test]
fn acceptance() {
    let mut r = Report { failed: vec![] };
    r.line(1, criterion1());
    r.line(2, criterion2());
    r.line(3, criterion3());
    r.line(4, criterion4());
    r.line(5, criterion5());
    r.line(6, criterion6());
    println!("[N/A]  criterion 7: the compiled-library experiment is not reproduced; criteria 1 and 2 stand in for it on the bundled encoding");
    assert!(r.failed.is_empty(), "failed criteria: {:?}", r.failed);
}
