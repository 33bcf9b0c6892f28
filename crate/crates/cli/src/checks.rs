//! Assertions behind `experiment --check`. Each returns the failed checks.

use std::collections::BTreeMap;
use std::time::Duration;

use sds_harness::lsm::{check_stall_log, run_lsm_experiment, LsmMode, LsmRun, LsmSimConfig};
use sds_harness::microbench::MicrobenchRow;
use sds_harness::tenants::{run_tenant_experiment, TenantMode, TenantRun, TenantSimConfig};

const MIB: f64 = 1_048_576.0;

pub fn lsm(cfg: &LsmSimConfig, run: &LsmRun) -> Vec<String> {
    let mut failed = Vec::new();
    if let Err(e) = check_stall_log(&run.events) {
        failed.push(format!("stall log inconsistent at {e:?}"));
    }
    if run.mode == LsmMode::PaioTailLatency {
        match run_lsm_experiment(cfg, LsmMode::Baseline) {
            Ok(base) => {
                println!("baseline: {:.0} ops/s, p99 {:.2} ms", base.mean_throughput(), base.p99 as f64 / 1e6);
                if run.p99 as f64 > 0.5 * base.p99 as f64 {
                    failed.push(format!("p99 {} ns is above half of baseline {} ns", run.p99, base.p99));
                }
                let ratio = run.mean_throughput() / base.mean_throughput();
                if (ratio - 1.0).abs() > 0.10 {
                    failed.push(format!("throughput ratio {ratio:.3} outside 0.9..1.1"));
                }
            }
            Err(e) => failed.push(format!("baseline run: {e}")),
        }
    }
    failed
}

pub fn tenants(cfg: &TenantSimConfig, run: &TenantRun, wall: Duration) -> Vec<String> {
    let mut failed = Vec::new();
    if run.phases.len() != 7 {
        failed.push(format!("{} phase markers instead of 7", run.phases.len()));
    }
    if run.mode != TenantMode::Paio {
        return failed;
    }
    for i in &run.instances {
        if i.mean_bandwidth() < 0.95 * i.demand {
            failed.push(format!(
                "{} averaged {:.2} MiB/s against a {:.2} MiB/s demand",
                i.name,
                i.mean_bandwidth() / MIB,
                i.demand / MIB
            ));
        }
    }
    if let Some(peak) = run.total_per_second.iter().copied().reduce(f64::max) {
        if peak > 1.05 * cfg.max_bandwidth {
            failed.push(format!("aggregate reached {:.2} MiB/s", peak / MIB));
        }
    }
    for d in run.departure_responses() {
        if !d.rose() {
            failed.push(format!("{} did not speed up after {} left at {:.1} s", d.survivor, d.departed, d.at));
        }
    }
    if wall >= Duration::from_secs(120) {
        failed.push(format!("run took {wall:?}"));
    }
    match run_tenant_experiment(cfg, TenantMode::StaticLimit) {
        Ok(fixed) => {
            let first = |r: &TenantRun| r.instances[0].active_secs();
            println!("instance 1 completion: static {:.1} s, paio {:.1} s", first(&fixed), first(run));
            if first(&fixed) < 1.25 * first(run) {
                failed.push("static limits finish instance 1 less than 25% later".into());
            }
        }
        Err(e) => failed.push(format!("static run: {e}")),
    }
    failed
}

pub fn microbench(rows: &[MicrobenchRow]) -> Vec<String> {
    let mut failed = Vec::new();
    for r in rows {
        if r.identity_failures > 0 {
            failed.push(format!(
                "{} of {} payloads changed at {} channels, {} B",
                r.identity_failures, r.identity_checked, r.channels, r.request_size
            ));
        }
    }
    let mut empty: BTreeMap<usize, f64> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.request_size == 0) {
        let best = empty.entry(r.channels).or_insert(0.0);
        *best = best.max(r.ops_per_sec());
    }
    let series: Vec<(usize, f64)> = empty.into_iter().collect();
    for w in series.windows(2) {
        if w[1].1 < w[0].1 {
            failed.push(format!("{:.0} ops/s at {} channels after {:.0} at {}", w[1].1, w[1].0, w[0].1, w[0].0));
        }
    }
    failed
}
