//! Acceptance gates. Runs without the libtest harness so that every gate
//! prints exactly one PASS/FAIL line; the process fails if any gate fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use ttvm_core::bench::callabit_cases;
use ttvm_core::cfg::instruction_cfg;
use ttvm_core::stitcher::{do_trace_stitching, link_segments, stitch, StitchedCode};
use ttvm_core::tracer::{
    trace_method, BridgeLink, GuardId, InputArgs, RetSlot, StackRef, TraceOp, TraverseStack, DEFAULT_MAX_TRACE_OPS,
};
use ttvm_core::tiers::CompileKind;
use ttvm_core::{assemble, programs, Mode, Opcode, Outcome, Pc, Program, TierPolicy, Value, VmSession};

type Gate = Result<String, String>;
type GateFn = fn() -> Gate;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn bundled_programs() -> Vec<(&'static str, Program)> {
    [("loop", programs::LOOP), ("loopabit", programs::LOOPABIT), ("callabit", programs::CALLABIT)]
        .into_iter()
        .map(|(n, s)| (n, assemble(s).unwrap()))
        .collect()
}

const DIFF_MODES: [Mode; 4] = [Mode::Interp, Mode::T1, Mode::T2, Mode::Annotated];

/// Interpreter-only reference value, computed in a fresh session.
fn reference(p: &Program, arg: i64) -> Outcome {
    VmSession::new(p.clone(), TierPolicy::with_mode(Mode::Interp)).unwrap().run(Value::Int(arg))
}

/// Returns (runs, tier-2 traces installed, tier-1 methods compiled).
fn differential(name: &str, p: &Program, args: &[i64]) -> Result<(usize, usize, usize), String> {
    let expected: Vec<Outcome> = args.iter().map(|&a| reference(p, a)).collect();
    for (a, e) in args.iter().zip(&expected) {
        ensure!(matches!(e, Outcome::Done(_)), "{name}: reference run with arg {a} gave {e:?}");
    }
    let (mut runs, mut t2, mut t1) = (0, 0, 0);
    for mode in DIFF_MODES {
        for policy in [TierPolicy::with_mode(mode), TierPolicy::eager(mode)] {
            // One long-lived session sees every argument (and so warms up);
            // each argument also runs in a fresh session.
            let mut warm = VmSession::new(p.clone(), policy).unwrap();
            for _ in 0..2 {
                for (&a, e) in args.iter().zip(&expected) {
                    let got = warm.run(Value::Int(a));
                    ensure!(&got == e, "{name}: {mode} warm arg {a}: {got:?} != {e:?}");
                    runs += 1;
                }
            }
            for c in &warm.metrics().compilations {
                match c.kind {
                    CompileKind::Method => t1 += 1,
                    _ => t2 += 1,
                }
            }
            for (&a, e) in args.iter().zip(&expected).take(8) {
                let got = VmSession::new(p.clone(), policy).unwrap().run(Value::Int(a));
                ensure!(&got == e, "{name}: {mode} cold arg {a}: {got:?} != {e:?}");
                runs += 1;
            }
        }
    }
    Ok((runs, t2, t1))
}

fn gate_correctness() -> Gate {
    let t0 = Instant::now();
    let (mut runs, mut t2, mut t1) = (0, 0, 0);
    let mut add = |(r, a, b): (usize, usize, usize)| {
        runs += r;
        t2 += a;
        t1 += b;
    };
    let args: Vec<i64> = (1..=100).collect();
    for (name, p) in bundled_programs() {
        add(differential(name, &p, &args)?);
    }
    let suite = common::suite(1000);
    for (seed, p) in &suite {
        add(differential(&format!("seed {seed}"), p, &[0, 3, 17, 42, 99])?);
    }
    ensure!(t1 > 0 && t2 > 0, "nothing compiled: {t1} methods, {t2} traces");
    Ok(format!(
        "{} random programs + 3 bundled, {runs} runs identical across {} modes \
         ({t1} methods, {t2} loop/bridge traces compiled) in {:.1}s",
        suite.len(),
        DIFF_MODES.len(),
        t0.elapsed().as_secs_f64()
    ))
}

/// All tier-1 methods of `p`, compiled directly from their entries.
fn methods(p: &Program) -> Vec<(Pc, StitchedCode)> {
    p.function_entries()
        .into_iter()
        .map(|entry| {
            let t = trace_method(p, entry, &mut TraverseStack::new(), DEFAULT_MAX_TRACE_OPS).unwrap();
            (entry, stitch(&t).unwrap())
        })
        .collect()
}

fn check_structure(code: &StitchedCode) -> Result<(), String> {
    let marked = code
        .segments
        .iter()
        .flat_map(|s| &s.ops)
        .filter(|op| op.is_marked_guard())
        .count();
    ensure!(code.segments.len() == marked + 1, "{} segments for {marked} marked guards", code.segments.len());
    let mut seen = BTreeSet::new();
    for (g, seg) in code.links() {
        ensure!(seg >= 1 && seg < code.segments.len(), "guard {g} links to segment {seg}");
        ensure!(seen.insert(seg), "segment {seg} linked twice");
        let resume = code.guards[&g].resume_pc;
        let entry = code.segments[seg].entry_pc;
        ensure!(resume == entry, "guard {g} resumes at {resume}, bridge enters at {entry}");
    }
    ensure!(seen.len() == marked, "{} links for {marked} marked guards", seen.len());
    Ok(())
}

fn gate_stitch_structure() -> Gate {
    let shape = |src| {
        let c = &methods(&assemble(src).unwrap())[0].1;
        (c.segments.len() - c.bridges().len(), c.bridges().len())
    };
    ensure!(shape(programs::LOOP) == (1, 1), "loop: {:?}", shape(programs::LOOP));
    ensure!(shape(programs::LOOPABIT) == (1, 2), "loopabit: {:?}", shape(programs::LOOPABIT));
    let mut n = 0;
    let mut bridges = 0;
    for (seed, p) in common::suite(1000) {
        for (entry, code) in methods(&p) {
            check_structure(&code).map_err(|e| format!("seed {seed} entry {entry}: {e}"))?;
            bridges += code.bridges().len();
            n += 1;
        }
    }
    Ok(format!("loop 1+1, loopabit 1+2, {n} random methods ({bridges} bridges) balanced"))
}

fn gate_cfg_oracle() -> Gate {
    let mut n = 0;
    let mut check = |label: &str, p: &Program| -> Result<(), String> {
        for (entry, code) in methods(p) {
            let expected = instruction_cfg(p, entry).unwrap();
            let got = code.reconstruct_cfg();
            ensure!(got.nodes == expected.nodes, "{label} entry {entry}: node sets differ");
            ensure!(got.edges == expected.edges, "{label} entry {entry}: edge sets differ");
            n += 1;
        }
        Ok(())
    };
    for (name, p) in bundled_programs() {
        check(name, &p)?;
    }
    check("nested_branches", &assemble(programs::NESTED_BRANCHES).unwrap())?;
    for (seed, p) in common::suite(1000) {
        check(&format!("seed {seed}"), &p)?;
    }
    // Methods compiled by live sessions as well.
    for (seed, p) in common::suite(200) {
        let mut s = VmSession::new(p.clone(), TierPolicy::eager(Mode::T1)).unwrap();
        s.run(Value::Int(20));
        for entry in s.compiled_methods() {
            let got = s.method(entry).unwrap().reconstruct_cfg();
            ensure!(got == instruction_cfg(&p, entry).unwrap(), "seed {seed} session method {entry}");
            n += 1;
        }
    }
    Ok(format!("{n} reconstructed method CFGs equal the decoded CFGs"))
}

fn gate_trace_size() -> Gate {
    let cases = callabit_cases(200);
    let ops_of = |label: &str| -> Result<usize, String> {
        let case = cases.iter().find(|c| c.name.contains(label)).unwrap();
        let policy = TierPolicy {
            mode: case.mode,
            entry_kind: case.entry_kind,
            ..TierPolicy::default()
        };
        let mut s = VmSession::new(case.program.clone(), policy).unwrap();
        for _ in 0..5 {
            let out = s.run(Value::Int(case.arg));
            ensure!(out == Outcome::Done(Value::Int(0)), "{label}: {out:?}");
        }
        Ok(s.metrics().total_trace_ops())
    };
    let c = ops_of("_c_")?;
    let e = ops_of("_e_")?;
    let ratio = c as f64 / e as f64;
    ensure!(c > 0 && (c as f64) < 0.8 * e as f64, "variant c {c} ops vs variant e {e} ops (ratio {ratio:.3})");
    Ok(format!(
        "variant c {c} ops, variant e {e} ops, c is {:.0}% smaller",
        (1.0 - ratio) * 100.0
    ))
}

fn gate_dispatch_economy() -> Gate {
    let p = assemble(programs::LOOP).unwrap();
    let n = Value::Int(1_000_000);
    let measure = |mode| -> Result<(u64, u64), String> {
        let mut s = VmSession::new(p.clone(), TierPolicy::with_mode(mode)).unwrap();
        for _ in 0..20 {
            s.run(Value::Int(200));
        }
        let before = s.counters();
        let out = s.run(n);
        ensure!(out == Outcome::Done(Value::Int(-10)), "{mode}: {out:?}");
        let d = s.counters().since(&before);
        Ok((d.decodes, d.dispatch_events()))
    };
    let (_, interp) = measure(Mode::Interp)?;
    let mut parts = vec![format!("interp {interp}")];
    for mode in [Mode::T1, Mode::T2] {
        let (decodes, events) = measure(mode)?;
        ensure!(decodes == 0, "{mode}: {decodes} decodes in steady state");
        ensure!(events < interp, "{mode}: {events} dispatch events, interp {interp}");
        parts.push(format!("{mode} {events}"));
    }
    Ok(format!("0 decodes; dispatch events {}", parts.join(", ")))
}

fn op(pc: Pc) -> TraceOp {
    TraceOp::CallHandler {
        origin_pc: pc,
        opcode: Opcode::Dup,
        operand: None,
    }
}

fn guard(pc: Pc, id: GuardId, resume: Pc) -> TraceOp {
    TraceOp::Guard {
        origin_pc: pc,
        guard_id: id,
        expected: false,
        resume_pc: resume,
        marked: true,
    }
}

fn emit_jump(pc: Pc, target: Pc) -> TraceOp {
    TraceOp::EmitJump {
        origin_pc: pc,
        target_pc: target,
        synthetic: false,
    }
}

fn gate_pairing() -> Gate {
    // A -> B; B -> {C, D} via g1; C -> {E, F} via g2; E and F jump back to B.
    let (a, b, g1, c, g2, e, je, f, jf, d, ret) = (0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10);
    let ops = vec![
        op(a),
        op(b),
        guard(g1, 1, d),
        op(c),
        guard(g2, 2, f),
        op(e),
        emit_jump(je, b),
        op(f),
        emit_jump(jf, b),
        op(d),
        TraceOp::EmitRet {
            origin_pc: ret,
            slot: RetSlot::Exit,
        },
    ];
    let args = InputArgs {
        entry_pc: a,
        stack_depth: Some(1),
    };
    let st = do_trace_stitching(&args, &ops).map_err(|e| e.to_string())?;
    // Pops happen in reverse order of the guards' appearance.
    let pops: Vec<Option<GuardId>> = st.pairs.iter().map(|(_, g)| g.as_ref().map(|g| g.guard_id)).collect();
    ensure!(pops == vec![Some(2), Some(1), None], "pop order {pops:?}");
    let code = link_segments(st.pairs, st.token_map, args).map_err(|e| e.to_string())?;
    let entries: Vec<Pc> = code.segments.iter().map(|s| s.entry_pc).collect();
    ensure!(entries == vec![a, f, d], "segment entries {entries:?}");
    let incoming: BTreeMap<usize, GuardId> = code.links().map(|(g, s)| (s, g)).collect();
    ensure!(!incoming.contains_key(&0), "body has an incoming guard");
    ensure!(incoming.get(&1) == Some(&2), "F segment not linked from g2");
    ensure!(incoming.get(&2) == Some(&1), "D segment not linked from g1");

    // The same shape traced from real bytecode.
    let p = assemble(programs::NESTED_BRANCHES).unwrap();
    let code = &methods(&p)[0].1;
    let entries: Vec<Pc> = code.segments.iter().map(|s| s.entry_pc).collect();
    ensure!(entries == vec![0, 20, 25], "nested_branches segments {entries:?}");
    let guard_pc = |g: GuardId| {
        code.segments
            .iter()
            .flat_map(|s| &s.ops)
            .find_map(|op| match op {
                TraceOp::Guard { origin_pc, guard_id, .. } if *guard_id == g => Some(*origin_pc),
                _ => None,
            })
            .unwrap()
    };
    let linked: BTreeMap<Pc, Pc> = code.links().map(|(g, s)| (guard_pc(g), code.segments[s].entry_pc)).collect();
    ensure!(linked == BTreeMap::from([(7, 25), (13, 20)]), "nested_branches links {linked:?}");
    Ok("(body, none), (F <- g2), (D <- g1); pops g2 then g1".into())
}

fn gate_interning() -> Gate {
    let mut rng_state: u64 = 0x2545_F491_4F6C_DD1D;
    let mut next = move || {
        rng_state ^= rng_state << 13;
        rng_state ^= rng_state >> 7;
        rng_state ^= rng_state << 17;
        rng_state
    };
    let mut ts = TraverseStack::new();
    let mut oracle: HashMap<(Pc, StackRef), StackRef> = HashMap::new();
    let mut shadow: Vec<Pc> = Vec::new();
    let mut cur = ts.empty();
    let mut pushes = 0;
    for _ in 0..10_000 {
        if shadow.is_empty() || next() % 5 < 3 {
            let pc = (next() % 12) as Pc;
            let r = ts.t_push(pc, cur);
            if let Some(&prev) = oracle.get(&(pc, cur)) {
                ensure!(prev == r, "key ({pc}, {cur:?}) allocated twice");
            }
            oracle.insert((pc, cur), r);
            shadow.push(pc);
            cur = r;
            pushes += 1;
        } else {
            let (pc, rest) = ts.t_pop(cur).map_err(|_| "pop of a non-empty stack failed".to_string())?;
            ensure!(Some(pc) == shadow.pop(), "pop returned {pc}");
            cur = rest;
        }
        ensure!(ts.t_is_empty(cur) == shadow.is_empty(), "emptiness disagrees");
    }
    let distinct: BTreeSet<StackRef> = oracle.values().copied().collect();
    ensure!(distinct.len() == oracle.len(), "two keys share a node");
    ensure!(ts.node_count() == oracle.len(), "{} nodes for {} distinct keys", ts.node_count(), oracle.len());
    Ok(format!("{pushes} pushes, {} distinct keys, {} nodes", oracle.len(), ts.node_count()))
}

fn gate_bridge_lifecycle() -> Gate {
    let policy = TierPolicy {
        bridge_threshold: 3,
        ..TierPolicy::with_mode(Mode::T2)
    };
    let mut s = VmSession::new(assemble(programs::LOOP).unwrap(), policy).unwrap();
    let mut per_run = Vec::new();
    for _ in 0..12 {
        let before = s.counters().deopts;
        let out = s.run(Value::Int(300));
        ensure!(out == Outcome::Done(Value::Int(-10)), "{out:?}");
        per_run.push(s.counters().deopts - before);
    }
    let total: u64 = per_run.iter().sum();
    ensure!(total == 3, "deopts per run {per_run:?}");
    let last = per_run.iter().rposition(|&d| d > 0).unwrap();
    ensure!(last <= 2, "deopt after the bridge was installed: {per_run:?}");
    let g = s.guard(0).ok_or("no tier-2 guard")?;
    ensure!(g.failure_count == 3, "failure count {}", g.failure_count);
    ensure!(matches!(g.bridge, Some(BridgeLink::Trace(_))), "no bridge attached");
    Ok(format!("deopts per run {per_run:?}"))
}

fn main() {
    let gates: [(&str, GateFn); 8] = [
        ("1 differential correctness", gate_correctness),
        ("2 stitching structure", gate_stitch_structure),
        ("3 cfg oracle", gate_cfg_oracle),
        ("4 trace size", gate_trace_size),
        ("5 dispatch economy", gate_dispatch_economy),
        ("6 guard pairing", gate_pairing),
        ("7 traverse-stack interning", gate_interning),
        ("8 deopt/bridge lifecycle", gate_bridge_lifecycle),
    ];
    let mut failed = 0;
    for (name, gate) in gates {
        match std::panic::catch_unwind(gate) {
            Ok(Ok(detail)) => println!("PASS criterion {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL criterion {name}: panicked");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
