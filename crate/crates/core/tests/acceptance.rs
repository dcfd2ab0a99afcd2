//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfold_core::placement::{commit, feasible_on_empty, reconfig_place, rfold_place, PlacementPlan, PolicyKind};
use rfold_core::shapes::{
    brute_force_embeddable, comm_graph, enumerate_folds, find_cycle, verify_mapping, AvailGraph, FoldContext, PlacementMapping,
    RingMode, DEFAULT_CYCLE_BUDGET, DEFAULT_ORACLE_BOUND,
};
use rfold_core::simulator::run;
use rfold_core::sweep::{run_sweep, write_outputs, Cell, ExperimentConfig, SweepResult};
use rfold_core::topology::{build_cluster, ClusterSpec, ClusterState, JobId, XpuId};
use rfold_core::workload::{generate_trace, GenConfig, Shape};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

/// Lays a fold variant onto a free static torus at the origin and verifies it.
fn fold_verifies(shape: Shape, target: Shape, fabric: [usize; 3], ctx: FoldContext) -> Result<(), String> {
    let variant = enumerate_folds(shape, ctx)
        .into_iter()
        .find(|v| v.target == target)
        .ok_or_else(|| format!("no {target} variant of {shape}"))?;
    let state = build_cluster(&ClusterSpec::static_torus(fabric)).map_err(|e| e.to_string())?;
    let comm = comm_graph(shape);
    let idx: Vec<usize> = variant.node_map().iter().map(|&c| state.index_of(XpuId::new(0, c)).unwrap()).collect();
    let mapping = PlacementMapping::realize(&state, &comm, &idx, RingMode::RingComplete);
    if !mapping.all_closed() {
        return Err(format!("{shape} -> {target} leaves rings open"));
    }
    verify_mapping(&mapping, &comm, &state).map_err(|v| format!("{v:?}"))
}

fn criterion_1() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (shape, target, fabric) in [(Shape::new(1, 6, 4), Shape::new(4, 2, 3), [4, 2, 3]), (Shape::new(4, 8, 2), Shape::new(4, 4, 4), [4, 4, 4])]
    {
        match fold_verifies(shape, target, fabric, FoldContext::Any) {
            Ok(()) => notes.push(format!("{shape}->{target} ring-complete")),
            Err(e) => {
                pass = false;
                notes.push(e);
            }
        }
    }
    let t = Instant::now();
    let r = brute_force_embeddable(Shape::new(1, 8, 3), [1, 4, 6], [true; 3], RingMode::RingComplete, DEFAULT_ORACLE_BOUND);
    let took = t.elapsed();
    match r {
        Ok(false) if took < Duration::from_secs(60) => notes.push(format!("1x8x3->1x4x6 not embeddable ({took:.2?})")),
        other => {
            pass = false;
            notes.push(format!("1x8x3->1x4x6 oracle gave {other:?} in {took:.2?}"));
        }
    }
    let t = Instant::now();
    let r = brute_force_embeddable(Shape::new(1, 6, 4), [4, 2, 3], [true, false, false], RingMode::RingComplete, DEFAULT_ORACLE_BOUND);
    let took = t.elapsed();
    if !matches!(r, Ok(true)) || took >= Duration::from_secs(60) {
        pass = false;
        notes.push(format!("1x6x4->4x2x3 oracle gave {r:?} in {took:.2?}"));
    }
    Outcome::new(pass, notes.join("; "))
}

fn criterion_2() -> Outcome {
    let state = build_cluster(&ClusterSpec::static_torus([4, 8, 4])).unwrap();
    let g = AvailGraph::free(&state);
    let t = Instant::now();
    let cycle = find_cycle(&g, 18, DEFAULT_CYCLE_BUDGET);
    let took = t.elapsed();
    let mut pass = took < Duration::from_secs(1) && cycle.as_ref().is_some_and(|c| is_cycle(&state, &g, c, 18));
    let mut detail = format!("18-cycle on 4x8x4 in {took:.2?}");
    let state = build_cluster(&ClusterSpec::static_torus([4, 4, 4])).unwrap();
    let g = AvailGraph::free(&state);
    for len in [3, 5, 7, 9] {
        if find_cycle(&g, len, DEFAULT_CYCLE_BUDGET).is_some() {
            pass = false;
            detail.push_str(&format!("; found an odd {len}-cycle"));
        }
    }
    detail.push_str("; no odd cycle of 3, 5, 7 or 9 on 4x4x4");
    Outcome::new(pass, detail)
}

fn is_cycle(state: &ClusterState, g: &AvailGraph, c: &[usize], len: usize) -> bool {
    let xs: Vec<XpuId> = c.iter().map(|&p| state.xpu_at(g.xpu_index(p))).collect();
    let distinct: HashSet<XpuId> = xs.iter().copied().collect();
    let comm = comm_graph(Shape::new(len, 1, 1));
    let idx: Vec<usize> = c.iter().map(|&p| g.xpu_index(p)).collect();
    let m = PlacementMapping::realize(state, &comm, &idx, RingMode::RingComplete);
    c.len() == len && distinct.len() == len && m.all_closed() && verify_mapping(&m, &comm, state).is_ok()
}

fn committed(state: &ClusterState, plan: &PlacementPlan) -> Result<usize, String> {
    let mut s = state.clone();
    commit(&mut s, JobId(1), plan).map_err(|e| e.to_string())?;
    s.check_invariants()?;
    let cubes: HashSet<usize> = plan.xpus().iter().map(|x| x.cube).collect();
    Ok(cubes.len())
}

fn criterion_3() -> Outcome {
    let state = build_cluster(&ClusterSpec::reconfigurable(64, 4)).unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for (shape, cubes, mode) in
        [(Shape::new(4, 4, 32), 8, RingMode::RingComplete), (Shape::new(4, 4, 34), 9, RingMode::LineComplete)]
    {
        let Some(plan) = reconfig_place(&state, shape) else {
            pass = false;
            notes.push(format!("{shape}: no plan"));
            continue;
        };
        let used = committed(&state, &plan);
        let z_open = plan
            .comm()
            .rings
            .iter()
            .zip(&plan.mapping.rings)
            .filter(|(r, _)| r.dim == 2)
            .all(|(_, m)| m.hops.iter().filter(|h| h.is_none()).count() == usize::from(mode == RingMode::LineComplete));
        let ok = used == Ok(cubes) && plan.cost.cubes_used == cubes && plan.mode == mode && z_open;
        pass &= ok;
        notes.push(format!("{shape}: {used:?} cubes, {} Z rings", plan.mode.as_str()));
    }
    Outcome::new(pass, notes.join("; "))
}

fn criterion_4() -> Outcome {
    let state = build_cluster(&ClusterSpec::reconfigurable(64, 4)).unwrap();
    let shape = Shape::new(4, 8, 2);
    let f = rfold_place(&state, shape).map(|p| committed(&state, &p));
    let r = reconfig_place(&state, shape).map(|p| committed(&state, &p));
    Outcome::new(f == Some(Ok(1)) && r == Some(Ok(2)), format!("RFold {f:?} cubes, Reconfig {r:?} cubes"))
}

fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    loop {
        let dims = rng.random_range(1..=3);
        let mut e = [1usize; 3];
        for x in e.iter_mut().take(dims) {
            // Log-uniform extents so both small and long dimensions appear.
            *x = (2f64.powf(rng.random_range(0.0..12.0))).round() as usize;
        }
        let s = Shape(e);
        if s.size() <= 4096 {
            return s;
        }
    }
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let torus = ClusterSpec::static_torus([16, 16, 16]);
    let cubes = [ClusterSpec::reconfigurable(512, 2), ClusterSpec::reconfigurable(64, 4), ClusterSpec::reconfigurable(8, 8)];
    let mut violations = Vec::new();
    let (mut ff, mut fo) = (0, 0);
    for _ in 0..1000 {
        let s = random_shape(&mut rng);
        let a = feasible_on_empty(PolicyKind::FirstFit, s, &torus);
        let b = feasible_on_empty(PolicyKind::Folding, s, &torus);
        ff += a as usize;
        fo += b as usize;
        if a && !b {
            violations.push(format!("Folding misses {s}"));
        }
        for spec in &cubes {
            if feasible_on_empty(PolicyKind::Reconfig, s, spec) && !feasible_on_empty(PolicyKind::RFold, s, spec) {
                violations.push(format!("RFold misses {s} on {spec}"));
            }
        }
    }
    Outcome::new(
        violations.is_empty(),
        format!("{} violations over 1000 shapes (FirstFit {ff}, Folding {fo} feasible) {:?}", violations.len(), violations.iter().take(3).collect::<Vec<_>>()),
    )
}

fn table_cells() -> Vec<Cell> {
    vec![
        Cell::new(PolicyKind::FirstFit, ClusterSpec::static_torus([16, 16, 16])),
        Cell::new(PolicyKind::Folding, ClusterSpec::static_torus([16, 16, 16])),
        Cell::new(PolicyKind::Reconfig, ClusterSpec::reconfigurable(8, 8)),
        Cell::new(PolicyKind::RFold, ClusterSpec::reconfigurable(8, 8)),
        Cell::new(PolicyKind::Reconfig, ClusterSpec::reconfigurable(64, 4)),
        Cell::new(PolicyKind::RFold, ClusterSpec::reconfigurable(64, 4)),
    ]
}

/// Per-trial values of `f` for one cell, in trial order.
fn per_trial(r: &SweepResult, policy: PolicyKind, cube: &str, f: impl Fn(&rfold_core::simulator::RunStats) -> f64) -> Vec<f64> {
    r.cell(policy, cube).map(|c| c.trials.iter().map(f).collect()).unwrap_or_default()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Seeds where `lhs < rhs`, or `lhs <= rhs` when not `strict`.
fn count(lhs: &[f64], rhs: &[f64], strict: bool) -> usize {
    lhs.iter().zip(rhs).filter(|(a, b)| if strict { a < b } else { a <= b }).count()
}

fn criterion_6(r: &SweepResult) -> Outcome {
    use PolicyKind::*;
    let jcr = |p, c| per_trial(r, p, c, |s| s.jcr);
    let (ff, fo) = (jcr(FirstFit, "16^3"), jcr(Folding, "16^3"));
    let (r8, f8) = (jcr(Reconfig, "8^3"), jcr(RFold, "8^3"));
    let (r4, f4) = (jcr(Reconfig, "4^3"), jcr(RFold, "4^3"));
    let n = r.seeds.len();
    let a = count(&ff, &fo, true);
    let b = count(&r8, &f8, true);
    let full = r4.len() == n && f4.len() == n && r4.iter().chain(&f4).all(|&x| x == 1.0);
    let pass = mean(&ff) < mean(&fo) && mean(&r8) < mean(&f8) && a >= 90 && b >= 90 && full && ff.len() == n;
    Outcome::new(
        pass,
        format!(
            "JCR FirstFit {:.4} < Folding {:.4} in {a}/{n}; Reconfig(8^3) {:.4} < RFold(8^3) {:.4} in {b}/{n}; Reconfig(4^3) {:.4}, RFold(4^3) {:.4}",
            mean(&ff),
            mean(&fo),
            mean(&r8),
            mean(&f8),
            mean(&r4),
            mean(&f4)
        ),
    )
}

fn criterion_7(r: &SweepResult) -> Outcome {
    use PolicyKind::*;
    let p50 = |p| per_trial(r, p, "4^3", |s| s.p50.unwrap_or(f64::INFINITY));
    let (rp, fp) = (p50(Reconfig), p50(RFold));
    let wins = count(&fp, &rp, false);
    let util = |p, c| mean(&per_trial(r, p, c, |s| s.mean_utilization));
    let u = [util(RFold, "4^3"), util(Reconfig, "4^3"), util(Folding, "16^3"), util(FirstFit, "16^3")];
    let ordered = u.windows(2).all(|w| w[0] >= w[1]);
    let n = r.seeds.len();
    let pass = mean(&fp) <= mean(&rp) && ordered && wins >= 90 && rp.len() == n;
    Outcome::new(
        pass,
        format!(
            "mean p50 RFold(4^3) {:.0} s vs Reconfig(4^3) {:.0} s, RFold <= Reconfig in {wins}/{n} seeds (need 90); utilization RFold {:.4} >= Reconfig {:.4} >= Folding {:.4} >= FirstFit {:.4}: {ordered}",
            mean(&fp),
            mean(&rp),
            u[0],
            u[1],
            u[2],
            u[3]
        ),
    )
}

fn criterion_8(r: &SweepResult) -> Outcome {
    let failed: Vec<String> = r.failed().map(|c| format!("{}: {}", c.cell.label(), c.error.as_deref().unwrap_or(""))).collect();
    let checked = cfg!(debug_assertions);
    Outcome::new(
        checked && failed.is_empty(),
        format!(
            "{} runs completed with per-event invariant checks {}; {} failed cells {failed:?}",
            r.cells.iter().map(|c| c.trials.len()).sum::<usize>(),
            if checked { "on" } else { "OFF" },
            failed.len()
        ),
    )
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        trials: 3,
        gen: GenConfig { job_count: 120, ..GenConfig::default() },
        base_seed: 11,
        ..ExperimentConfig::default()
    };
    let mut outputs = Vec::new();
    for (k, parallelism) in [(0, 0), (1, 0), (2, 1)] {
        let res = run_sweep(&ExperimentConfig { parallelism, ..cfg.clone() }).unwrap();
        let out = dir.path().join(k.to_string());
        let files = write_outputs(&res, &out).unwrap();
        outputs.push(files.iter().map(|p| (p.file_name().unwrap().to_owned(), std::fs::read(p).unwrap())).collect::<Vec<_>>());
    }
    let sweeps_equal = outputs.windows(2).all(|w| w[0] == w[1]);

    let trace = generate_trace(&GenConfig { seed: 3, job_count: 200, ..GenConfig::default() }).unwrap();
    let spec = ClusterSpec::reconfigurable(64, 4);
    let bytes = || {
        let r = run(&trace, PolicyKind::RFold, &spec).unwrap();
        let (mut json, mut csv) = (Vec::new(), Vec::new());
        r.write_json(&mut json).unwrap();
        r.write_jobs_csv(&mut csv).unwrap();
        (json, csv)
    };
    let runs_equal = bytes() == bytes();
    Outcome::new(
        sweeps_equal && runs_equal,
        format!(
            "{} sweep files identical across 3 repeats (sequential and parallel): {sweeps_equal}; single run JSON and CSV identical: {runs_equal}",
            outputs[0].len()
        ),
    )
}

fn main() {
    let mut results: Vec<(u8, Outcome)> =
        vec![(1, criterion_1()), (2, criterion_2()), (3, criterion_3()), (4, criterion_4()), (5, criterion_5())];
    for (id, o) in &results {
        report(*id, o);
    }

    let cfg = ExperimentConfig { cells: table_cells(), trials: 100, gen: GenConfig::default(), base_seed: 1, ..ExperimentConfig::default() };
    let t = Instant::now();
    let sweep = run_sweep(&cfg).expect("sweep config is valid");
    println!("sweep: {} cells x {} trials in {:.1?}", cfg.cells.len(), cfg.trials, t.elapsed());
    for (id, o) in [(6, criterion_6(&sweep)), (7, criterion_7(&sweep)), (8, criterion_8(&sweep)), (9, criterion_9())] {
        report(id, &o);
        results.push((id, o));
    }

    let failed: Vec<u8> = results.iter().filter(|(_, o)| !o.pass).map(|(id, _)| *id).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

fn report(id: u8, o: &Outcome) {
    println!("criterion {id}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}
