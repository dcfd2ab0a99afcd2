//! Job-level discrete-event simulation with FIFO blocking admission.
//!
//! Jobs queue in arrival order. The head is rejected if its policy cannot
//! place it even on an empty cluster; otherwise it is placed as soon as
//! resources allow, and everything behind it waits.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::placement::{commit, FeasibilityCache, Placer, PolicyKind};
use crate::shapes::RingMode;
use crate::topology::{ClusterSpec, ClusterState, JobId};
use crate::workload::{Shape, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Completed,
    Rejected,
}

impl JobStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Completed => "completed",
            JobStatus::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub shape: Shape,
    pub status: JobStatus,
    pub arrival_s: f64,
    pub start_s: Option<f64>,
    pub finish_s: Option<f64>,
    pub mode: Option<RingMode>,
    pub cubes_used: Option<usize>,
    pub circuits_used: Option<usize>,
}

impl JobRecord {
    pub fn jct(&self) -> Option<f64> {
        self.finish_s.map(|f| f - self.arrival_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: PolicyKind,
    pub spec: ClusterSpec,
    pub seed: Option<u64>,
    /// Set when the trace had no jobs (the JCR of 1.0 is then vacuous).
    pub empty_trace: bool,
    pub jobs: Vec<JobRecord>,
    pub jcr: f64,
    /// `finish - arrival` of completed jobs, in trace order.
    pub jct: Vec<f64>,
    /// `(time, busy fraction)` after each event time.
    pub utilization: Vec<(f64, f64)>,
    /// Resolved configuration that produced this run, if recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl RunReport {
    pub fn completed(&self) -> usize {
        self.jobs.iter().filter(|j| j.status == JobStatus::Completed).count()
    }

    pub fn rejected(&self) -> usize {
        self.jobs.len() - self.completed()
    }

    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// One row per job: id, status, arrival_s, start_s, finish_s, mode,
    /// cubes_used, circuits_used. Missing values are empty.
    pub fn write_jobs_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(["id", "status", "arrival_s", "start_s", "finish_s", "mode", "cubes_used", "circuits_used"])
            .map_err(io)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for j in &self.jobs {
            out.write_record([
                j.id.clone(),
                j.status.as_str().to_string(),
                j.arrival_s.to_string(),
                opt(j.start_s.map(|v| v.to_string())),
                opt(j.finish_s.map(|v| v.to_string())),
                opt(j.mode.map(|m| m.as_str().to_string())),
                opt(j.cubes_used.map(|v| v.to_string())),
                opt(j.circuits_used.map(|v| v.to_string())),
            ])
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Time-weighted mean busy fraction over the simulated horizon.
    pub fn mean_utilization(&self) -> f64 {
        let cdf = weighted_samples(&self.utilization);
        let total: f64 = cdf.iter().map(|s| s.1).sum();
        if total == 0.0 {
            return 0.0;
        }
        cdf.iter().map(|s| s.0 * s.1).sum::<f64>() / total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Departure,
    Arrival,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    kind: EventKind,
    seq: u64,
    job: usize,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    /// Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.kind.cmp(&self.kind))
            .then(other.seq.cmp(&self.seq))
    }
}

/// Simulates `trace` under `policy` on a fresh `spec` cluster.
pub fn run(trace: &Trace, policy: PolicyKind, spec: &ClusterSpec) -> Result<RunReport> {
    run_with_cache(trace, policy, spec, Arc::new(FeasibilityCache::new()))
}

/// As [`run`], sharing empty-cluster feasibility results through `cache`.
pub fn run_with_cache(trace: &Trace, policy: PolicyKind, spec: &ClusterSpec, cache: Arc<FeasibilityCache>) -> Result<RunReport> {
    let mut placer = Placer::with_cache(policy, spec.clone(), cache)?;
    let mut state = ClusterState::new(spec.clone())?;
    let jobs = &trace.jobs;
    let mut records: Vec<JobRecord> = jobs
        .iter()
        .map(|j| JobRecord {
            id: j.id.clone(),
            shape: j.shape,
            status: JobStatus::Rejected,
            arrival_s: j.arrival,
            start_s: None,
            finish_s: None,
            mode: None,
            cubes_used: None,
            circuits_used: None,
        })
        .collect();
    let mut events = BinaryHeap::with_capacity(jobs.len() * 2);
    let mut seq = 0u64;
    for (i, j) in jobs.iter().enumerate() {
        events.push(Event { time: j.arrival, kind: EventKind::Arrival, seq, job: i });
        seq += 1;
    }
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut head_checked = false;
    let mut blocked = false;
    let mut utilization = Vec::new();
    let total = state.total_xpus() as f64;
    while let Some(first) = events.pop() {
        let now = first.time;
        let mut batch = vec![first];
        while events.peek().is_some_and(|e| e.time == now) {
            batch.push(events.pop().expect("peeked"));
        }
        let mut departed = false;
        for e in batch {
            match e.kind {
                EventKind::Departure => {
                    state.release(JobId(e.job as u32))?;
                    departed = true;
                }
                EventKind::Arrival => queue.push_back(e.job),
            }
        }
        if departed {
            blocked = false;
        }
        while !blocked {
            let Some(&head) = queue.front() else { break };
            let shape = jobs[head].shape;
            if !head_checked {
                head_checked = true;
                if !placer.feasible_on_empty(shape) {
                    queue.pop_front();
                    head_checked = false;
                    continue;
                }
            }
            match placer.plan(&state, shape) {
                Some(plan) => {
                    commit(&mut state, JobId(head as u32), &plan)?;
                    let r = &mut records[head];
                    r.status = JobStatus::Completed;
                    r.start_s = Some(now);
                    r.finish_s = Some(now + jobs[head].duration);
                    r.mode = Some(plan.mode);
                    r.cubes_used = Some(plan.cost.cubes_used);
                    r.circuits_used = Some(plan.cost.ocs_circuits_used);
                    events.push(Event { time: now + jobs[head].duration, kind: EventKind::Departure, seq, job: head });
                    seq += 1;
                    queue.pop_front();
                    head_checked = false;
                }
                None => blocked = true,
            }
        }
        debug_assert!(state.check_invariants().is_ok(), "{:?}", state.check_invariants());
        utilization.push((now, state.busy_xpus() as f64 / total));
    }
    if !queue.is_empty() {
        return Err(Error::Validation(format!("{} jobs still queued after the last event", queue.len())));
    }
    let completed = records.iter().filter(|r| r.status == JobStatus::Completed).count();
    let jcr = if records.is_empty() { 1.0 } else { completed as f64 / records.len() as f64 };
    Ok(RunReport {
        policy,
        spec: spec.clone(),
        seed: None,
        empty_trace: records.is_empty(),
        jct: records.iter().filter_map(JobRecord::jct).collect(),
        jobs: records,
        jcr,
        utilization,
        config: None,
    })
}

/// `(value, weight)` pairs: each sample weighs the time until the next one.
/// A lone sample gets weight 1.
fn weighted_samples(samples: &[(f64, f64)]) -> Vec<(f64, f64)> {
    match samples.len() {
        0 => Vec::new(),
        1 => vec![(samples[0].1, 1.0)],
        n => (0..n).map(|i| (samples[i].1, if i + 1 < n { samples[i + 1].0 - samples[i].0 } else { 0.0 })).collect(),
    }
}

/// Time-weighted CDF of utilization: `(fraction, cumulative weight)` at
/// each distinct fraction, ascending, ending at 1.
///
/// # Panics
/// If the report has no samples.
pub fn utilization_cdf(report: &RunReport) -> Vec<(f64, f64)> {
    assert!(!report.utilization.is_empty(), "utilization_cdf needs at least one sample");
    let mut w = weighted_samples(&report.utilization);
    let total: f64 = w.iter().map(|s| s.1).sum();
    if total == 0.0 {
        // Zero-length horizon: every sample is instantaneous.
        w.iter_mut().for_each(|s| s.1 = 1.0);
    }
    let total: f64 = w.iter().map(|s| s.1).sum();
    w.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut acc = 0.0;
    for (v, wt) in w {
        acc += wt;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = acc / total,
            _ => out.push((v, acc / total)),
        }
    }
    if let Some(last) = out.last_mut() {
        last.1 = 1.0;
    }
    out
}

/// Smallest fraction whose cumulative weight reaches `q` (in `[0, 1]`).
pub fn cdf_quantile(cdf: &[(f64, f64)], q: f64) -> f64 {
    cdf.iter().find(|p| p.1 >= q - 1e-12).or(cdf.last()).map(|p| p.0).unwrap_or(0.0)
}

/// Nearest-rank percentile of an ascending slice (`p` in `(0, 100]`).
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Per-run statistics that [`aggregate`] averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub jcr: f64,
    pub p50: Option<f64>,
    pub p90: Option<f64>,
    pub p99: Option<f64>,
    pub mean_utilization: f64,
    /// Utilization quantiles at 0%, 1%, ..., 100% of time.
    pub utilization_quantiles: Vec<f64>,
}

impl RunStats {
    pub fn of(report: &RunReport) -> Self {
        let mut jct = report.jct.clone();
        jct.sort_by(f64::total_cmp);
        let quantiles = if report.utilization.is_empty() {
            vec![0.0; 101]
        } else {
            let cdf = utilization_cdf(report);
            (0..=100).map(|q| cdf_quantile(&cdf, q as f64 / 100.0)).collect()
        };
        Self {
            jcr: report.jcr,
            p50: nearest_rank(&jct, 50.0),
            p90: nearest_rank(&jct, 90.0),
            p99: nearest_rank(&jct, 99.0),
            mean_utilization: report.mean_utilization(),
            utilization_quantiles: quantiles,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub mean_jcr: f64,
    /// Mean over runs with at least one completed job.
    pub mean_p50: Option<f64>,
    pub mean_p90: Option<f64>,
    pub mean_p99: Option<f64>,
    pub mean_utilization: f64,
    /// Mean of the per-run utilization quantiles (101 points).
    pub utilization_quantiles: Vec<f64>,
}

/// Averages per-run statistics.
///
/// # Panics
/// On an empty input.
pub fn aggregate(reports: &[RunReport]) -> Summary {
    let stats: Vec<RunStats> = reports.iter().map(RunStats::of).collect();
    aggregate_stats(&stats)
}

/// As [`aggregate`], from precomputed statistics.
pub fn aggregate_stats(stats: &[RunStats]) -> Summary {
    assert!(!stats.is_empty(), "aggregate needs at least one run");
    let n = stats.len() as f64;
    let mean_opt = |f: fn(&RunStats) -> Option<f64>| {
        let v: Vec<f64> = stats.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut quantiles = vec![0.0; 101];
    for s in stats {
        for (q, v) in quantiles.iter_mut().zip(&s.utilization_quantiles) {
            *q += v / n;
        }
    }
    Summary {
        runs: stats.len(),
        mean_jcr: stats.iter().map(|s| s.jcr).sum::<f64>() / n,
        mean_p50: mean_opt(|s| s.p50),
        mean_p90: mean_opt(|s| s.p90),
        mean_p99: mean_opt(|s| s.p99),
        mean_utilization: stats.iter().map(|s| s.mean_utilization).sum::<f64>() / n,
        utilization_quantiles: quantiles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Job;

    fn job(id: &str, arrival: f64, duration: f64, shape: Shape) -> Job {
        Job { id: id.into(), arrival, duration, shape }
    }

    fn small() -> ClusterSpec {
        ClusterSpec::reconfigurable(2, 4)
    }

    #[test]
    fn single_job() {
        let t = Trace::new(vec![job("a", 5.0, 10.0, Shape::new(4, 4, 4))]);
        let r = run(&t, PolicyKind::RFold, &small()).unwrap();
        assert_eq!(r.jcr, 1.0);
        assert_eq!(r.jct, vec![10.0]);
        assert_eq!(r.jobs[0].start_s, Some(5.0));
    }

    #[test]
    fn whole_cluster_jobs_queue() {
        let t = Trace::new(vec![job("a", 0.0, 10.0, Shape::new(4, 4, 8)), job("b", 1.0, 10.0, Shape::new(4, 4, 8))]);
        let r = run(&t, PolicyKind::Reconfig, &small()).unwrap();
        assert_eq!(r.jobs[1].start_s, Some(10.0));
        assert_eq!(r.jct, vec![10.0, 19.0]);
    }

    #[test]
    fn infeasible_shape_rejected() {
        let spec = ClusterSpec::static_torus([16, 16, 16]);
        let t = Trace::new(vec![job("a", 0.0, 10.0, Shape::new(4, 4, 4)), job("b", 1.0, 10.0, Shape::new(17, 1, 1))]);
        let r = run(&t, PolicyKind::FirstFit, &spec).unwrap();
        assert_eq!(r.jcr, 0.5);
        assert_eq!(r.jobs[1].status, JobStatus::Rejected);
        assert_eq!(r.completed() + r.rejected(), 2);
    }

    #[test]
    fn head_blocks_followers() {
        // The head needs the whole cluster; a small job behind it waits.
        let t = Trace::new(vec![
            job("a", 0.0, 10.0, Shape::new(4, 4, 4)),
            job("b", 1.0, 5.0, Shape::new(4, 4, 8)),
            job("c", 2.0, 1.0, Shape::new(1, 1, 1)),
        ]);
        let r = run(&t, PolicyKind::Reconfig, &small()).unwrap();
        assert_eq!(r.jobs[1].start_s, Some(10.0));
        assert_eq!(r.jobs[2].start_s, Some(15.0));
    }

    #[test]
    fn departures_precede_arrivals() {
        let t = Trace::new(vec![job("a", 0.0, 10.0, Shape::new(4, 4, 8)), job("b", 10.0, 1.0, Shape::new(4, 4, 8))]);
        let r = run(&t, PolicyKind::Reconfig, &small()).unwrap();
        assert_eq!(r.jobs[1].start_s, Some(10.0));
    }

    #[test]
    fn incompatible_policy_errors() {
        let t = Trace::new(vec![]);
        assert!(matches!(run(&t, PolicyKind::FirstFit, &small()), Err(Error::Config(_))));
        let r = run(&t, PolicyKind::RFold, &small()).unwrap();
        assert!(r.empty_trace);
        assert_eq!(r.jcr, 1.0);
        assert!(r.utilization.is_empty());
    }

    fn report_with(samples: Vec<(f64, f64)>) -> RunReport {
        RunReport {
            policy: PolicyKind::RFold,
            spec: small(),
            seed: None,
            empty_trace: false,
            jobs: vec![],
            jcr: 1.0,
            jct: vec![],
            utilization: samples,
            config: None,
        }
    }

    #[test]
    fn cdf_examples() {
        let r = report_with(vec![(0.0, 0.5), (10.0, 0.5)]);
        assert_eq!(utilization_cdf(&r), vec![(0.5, 1.0)]);
        let r = report_with(vec![(0.0, 0.0), (5.0, 1.0), (10.0, 0.0)]);
        let cdf = utilization_cdf(&r);
        assert_eq!(cdf, vec![(0.0, 0.5), (1.0, 1.0)]);
        assert_eq!(cdf_quantile(&cdf, 0.25), 0.0);
        assert_eq!(cdf_quantile(&cdf, 0.5), 0.0);
        assert_eq!(cdf_quantile(&cdf, 0.75), 1.0);
        let r = report_with(vec![(3.0, 0.25)]);
        assert_eq!(utilization_cdf(&r), vec![(0.25, 1.0)]);
        assert!((r.mean_utilization() - 0.25).abs() < 1e-12);
    }

    #[test]
    #[should_panic]
    fn cdf_of_nothing_panics() {
        utilization_cdf(&report_with(vec![]));
    }

    #[test]
    fn nearest_rank_on_hundred() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 50.0), Some(50.0));
        assert_eq!(nearest_rank(&v, 90.0), Some(90.0));
        assert_eq!(nearest_rank(&v, 99.0), Some(99.0));
        assert_eq!(nearest_rank(&[], 50.0), None);
        assert_eq!(nearest_rank(&[7.0], 1.0), Some(7.0));
    }

    #[test]
    fn aggregate_means() {
        let mut a = report_with(vec![(0.0, 0.2), (1.0, 0.2)]);
        a.jcr = 0.4;
        a.jct = (1..=100).map(f64::from).collect();
        let mut b = a.clone();
        b.jcr = 0.6;
        let s = aggregate(&[a.clone(), b]);
        assert!((s.mean_jcr - 0.5).abs() < 1e-12);
        assert_eq!(s.mean_p50, Some(50.0));
        let one = aggregate(&[a.clone()]);
        let st = RunStats::of(&a);
        assert_eq!(one.mean_jcr, st.jcr);
        assert_eq!(one.mean_p99, st.p99);
        assert_eq!(one.utilization_quantiles, st.utilization_quantiles);
    }

    #[test]
    fn report_csv_and_json() {
        let t = Trace::new(vec![job("a", 0.0, 2.0, Shape::new(2, 1, 1)), job("b", 0.5, 1.0, Shape::new(9, 9, 9))]);
        let r = run(&t, PolicyKind::Reconfig, &small()).unwrap();
        let mut buf = Vec::new();
        r.write_jobs_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,status,arrival_s,start_s,finish_s,mode,cubes_used,circuits_used");
        assert_eq!(lines[1], "a,completed,0,0,2,ring,1,0");
        assert_eq!(lines[2], "b,rejected,0.5,,,,,");
        let mut js = Vec::new();
        r.write_json(&mut js).unwrap();
        let back: RunReport = serde_json::from_slice(&js).unwrap();
        assert_eq!(back, r);
    }
}
