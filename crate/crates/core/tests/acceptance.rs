//! End-to-end acceptance suite. Every criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! Accuracy campaigns run on the three-phase trunk of the 34-node feeder.

use std::time::Instant;

use faultloc::bundled;
use faultloc::dsse::{assemble, DsseConfig, Scope};
use faultloc::harness::{derive_seed, run_campaign, AccuracyReport, Campaign, CampaignDoc, Tally};
use faultloc::locator::{calibrate_threshold, Locator, LocatorConfig};
use faultloc::measurement::{measure_true, synthesize, NoiseProfile};
use faultloc::powerflow::{run_powerflow, FaultScenario, FaultType};
use faultloc::FeederModel;
use serde_json::json;

const TRUNK34: [&str; 12] = [
    "800-802", "802-806", "806-808", "808-812", "812-814", "814-816", "816-824", "824-828",
    "828-830", "830-854", "854-852", "852-832",
];
const POSITIONS: [f64; 3] = [0.25, 0.5, 0.75];
const SEED: u64 = 20240611;

struct Verdicts {
    lines: Vec<String>,
    failed: Vec<usize>,
}

impl Verdicts {
    fn record(&mut self, n: usize, pass: bool, detail: String) {
        let line = format!(
            "criterion {n:>2}: {} {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        println!("{line}");
        self.lines.push(line);
        if !pass {
            self.failed.push(n);
        }
    }
}

fn campaign(model: &FeederModel, extra: serde_json::Value) -> Campaign {
    let mut doc = json!({
        "feeder": "unused",
        "trials": 10,
        "seed": SEED,
        "record_timing": false,
        "locator": { "threshold_mode": "calibrated" },
        "grid": { "fault_types": ["LG"], "impedances_ohm": [50.0], "branches": TRUNK34, "positions": POSITIONS },
    });
    merge(&mut doc, extra);
    let doc: CampaignDoc = serde_json::from_value(doc).unwrap();
    Campaign::from_doc(&doc, model.clone()).unwrap()
}

fn merge(a: &mut serde_json::Value, b: serde_json::Value) {
    match (a, b) {
        (serde_json::Value::Object(a), serde_json::Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

fn fault_type_of(r: &AccuracyReport, t: FaultType) -> Tally {
    r.tally_where(|c| c.fault_type == t)
}

fn max_err(t: &Tally) -> String {
    t.max_error_hops.map_or("-".into(), |h| h.to_string())
}

fn hops_ok(t: &Tally, bound: usize) -> bool {
    t.max_error_hops.is_some_and(|h| h <= bound)
}

fn oracle_recovery(v: &mut Verdicts) {
    let t0 = Instant::now();
    let cfg = DsseConfig {
        tolerance: 1e-10,
        max_iterations: 50,
    };
    let (mut state_err, mut wmr) = (0.0f64, 0.0f64);
    for model in [bundled::feeder34(), bundled::feeder123()] {
        let truth = run_powerflow(&model, None).unwrap();
        let set = measure_true(&model, &truth, &NoiseProfile::default());
        let loc = Locator::new(&model, LocatorConfig::default()).unwrap();
        for sub in &loc.partition.subgraphs {
            let asm = assemble(&model, &Scope::subgraph(&model, sub), &set).unwrap();
            let r = asm.estimate(&model, &set, &cfg).unwrap();
            wmr = wmr.max(r.wmr);
            for (node, vv) in &r.node_voltages {
                state_err = state_err.max((vv - truth.node_voltages[*node]).camax());
            }
            for &b in &sub.edges {
                if let Some(i) = asm.branch_current(&r.x, b) {
                    state_err = state_err.max((i - truth.sending_currents[b]).camax());
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    v.record(
        1,
        state_err <= 1e-6 && wmr < 1e-8 && secs < 1.0,
        format!("max state error {state_err:.2e} p.u., max WMR {wmr:.2e}, {secs:.3} s"),
    );
}

fn powerflow_validity(v: &mut Verdicts) {
    let (mut kcl, mut kvl, mut bal, mut solved) = (0.0f64, 0.0f64, 0.0f64, 0);
    for model in [bundled::feeder34(), bundled::feeder123()] {
        let mut scenarios: Vec<Option<FaultScenario>> = vec![None];
        let branches: Vec<usize> = (0..model.branches.len())
            .filter(|&b| model.branches[b].phases.len() == 3)
            .step_by(3)
            .collect();
        for &b in &branches {
            for t in [FaultType::LG, FaultType::LL, FaultType::LLG, FaultType::LLL] {
                for z in [0.0, 50.0] {
                    scenarios.push(Some(FaultScenario {
                        branch: b,
                        position: 0.5,
                        fault_type: t,
                        phases: t.default_phases(),
                        impedance_ohm: z,
                    }));
                }
            }
        }
        for s in &scenarios {
            let Ok(st) = run_powerflow(&model, s.as_ref()) else {
                continue;
            };
            if !st.converged {
                continue;
            }
            solved += 1;
            kcl = kcl.max(st.max_kcl_residual);
            kvl = kvl.max(st.max_kvl_residual);
            bal = bal.max(st.power_balance_mismatch(&model));
        }
    }
    v.record(
        2,
        kcl <= 1e-8 && kvl <= 1e-8 && bal <= 1e-6,
        format!(
            "{solved} solves, max KCL {kcl:.2e}, max KVL {kvl:.2e}, max power balance {bal:.2e}"
        ),
    );
}

fn subgraph_identification(v: &mut Verdicts) {
    let t0 = Instant::now();
    let model = bundled::feeder34();
    let loc = Locator::new(&model, LocatorConfig::default()).unwrap();
    let noise = NoiseProfile::default();
    let (mut right, mut total) = (0usize, 0usize);
    for (k, sub) in loc.partition.subgraphs.iter().enumerate() {
        let n = sub.trunk.len();
        let picks = [sub.trunk[0], sub.trunk[n / 2], sub.trunk[n - 1]];
        for b in picks {
            for pos in POSITIONS {
                let sc = FaultScenario {
                    branch: b,
                    position: pos,
                    fault_type: FaultType::LG,
                    phases: FaultType::LG.default_phases(),
                    impedance_ohm: 100.0,
                };
                let exact =
                    measure_true(&model, &run_powerflow(&model, Some(&sc)).unwrap(), &noise);
                for t in 0..50 {
                    let set = synthesize(
                        &exact,
                        &noise,
                        derive_seed(SEED, (b * 10) as u64 + (pos * 4.0) as u64, t),
                    );
                    let one = loc.identify_faulted_subgraph(&set).unwrap();
                    total += 1;
                    right += usize::from(one.best == k);
                }
            }
        }
    }
    let rate = right as f64 / total as f64;
    let secs = t0.elapsed().as_secs_f64();
    v.record(
        3,
        rate >= 0.99 && secs < 300.0,
        format!("K* correct {right}/{total} = {rate:.4}, {secs:.1} s"),
    );
}

fn fault_type_table(v: &mut Verdicts, model: &FeederModel) -> AccuracyReport {
    let c = campaign(
        model,
        json!({ "trials": 34, "record_timing": true, "grid": { "fault_types": ["LG", "LL", "LLG", "LLL"] } }),
    );
    let r = run_campaign(&c).unwrap();
    let mut pass = true;
    let mut detail = format!("ε={:.1}", r.threshold);
    for t in [FaultType::LG, FaultType::LL, FaultType::LLG, FaultType::LLL] {
        let s = fault_type_of(&r, t);
        pass &= s.n_trials >= 1200 && s.alpha >= 0.90 && s.alpha + s.beta >= 0.98;
        detail += &format!(
            "; {t} n={} α={:.4} α+β={:.4}",
            s.n_trials,
            s.alpha,
            s.alpha + s.beta
        );
    }
    v.record(4, pass, detail);
    r
}

fn impedance_sweep(v: &mut Verdicts, model: &FeederModel) {
    let c = campaign(
        model,
        json!({ "trials": 20, "grid": { "fault_types": ["LL"], "impedances_ohm": [0.0, 10.0, 50.0, 100.0, 200.0] } }),
    );
    let r = run_campaign(&c).unwrap();
    let mut pass = true;
    let mut detail = String::new();
    for z in [0.0, 10.0, 50.0, 100.0, 200.0] {
        let s = r.tally_where(|c| c.impedance_ohm == z);
        pass &= if z == 0.0 {
            s.alpha == 1.0 && s.max_error_hops == Some(0)
        } else {
            s.alpha >= 0.90 && hops_ok(&s, 1)
        };
        detail += &format!("{z} Ω α={:.4} max={}; ", s.alpha, max_err(&s));
    }
    v.record(5, pass, detail.trim_end_matches("; ").to_string());
}

fn robustness(v: &mut Verdicts, model: &FeederModel) {
    let c = campaign(
        model,
        json!({
            "trials": 15,
            "noise": { "pmu_mag_max_err": 0.02, "pmu_ang_max_err": 0.02, "pseudo_max_err": 0.5, "dg_meter_max_err": 0.03, "sigma_rule": 3.0 },
            "grid": { "fault_types": ["LG", "LL"] },
        }),
    );
    let r = run_campaign(&c).unwrap();
    let s = &r.overall;
    v.record(
        6,
        s.alpha + s.beta >= 0.98 && hops_ok(s, 1),
        format!(
            "n={} ε={:.1} α={:.4} α+β={:.4} max={}",
            s.n_trials,
            r.threshold,
            s.alpha,
            s.alpha + s.beta,
            max_err(s)
        ),
    );
}

fn threshold_monotonicity(v: &mut Verdicts, model: &FeederModel) {
    let alpha = |eps: f64| {
        let c = campaign(
            model,
            json!({ "trials": 5, "locator": { "threshold_mode": "fixed", "threshold": eps }, "grid": { "fault_types": ["LG", "LL", "LLG", "LLL"] } }),
        );
        run_campaign(&c).unwrap().overall.alpha
    };
    let (a100, a500, a1000) = (alpha(100.0), alpha(500.0), alpha(1000.0));
    v.record(
        7,
        a1000 >= a500 && a500 >= a100,
        format!("α(100)={a100:.4} α(500)={a500:.4} α(1000)={a1000:.4}"),
    );
}

fn line_parameters(v: &mut Verdicts, model: &FeederModel) {
    let run = |frac: f64| {
        let c = campaign(
            model,
            json!({ "trials": 10, "perturbation": { "max_fraction": frac }, "grid": { "fault_types": ["LG", "LL"] } }),
        );
        run_campaign(&c).unwrap().overall
    };
    let (p5, p10) = (run(0.05), run(0.10));
    let classified = p5.n_exact + p5.n_adjacent + p5.n_other;
    let within1 = p5.n_exact + p5.n_adjacent;
    v.record(
        8,
        classified > 0 && within1 == classified && hops_ok(&p10, 2),
        format!(
            "5%: {within1}/{classified} within 1 branch (α={:.4}); 10%: α={:.4} α+β={:.4} max={}",
            p5.alpha,
            p10.alpha,
            p10.alpha + p10.beta,
            max_err(&p10)
        ),
    );
}

fn no_fault_statistics(v: &mut Verdicts, model: &FeederModel) {
    let noise = NoiseProfile::default();
    let cfg = LocatorConfig::default();
    let eps = calibrate_threshold(model, &noise, 500, SEED, &cfg)
        .unwrap()
        .threshold;
    let loc = Locator::new(model, cfg).unwrap();
    let exact = measure_true(model, &run_powerflow(model, None).unwrap(), &noise);
    let k = loc.partition.subgraphs.len();
    let mut sums = vec![0.0; k];
    let mut dofs = vec![0isize; k];
    let mut maxima = Vec::with_capacity(1000);
    for t in 0..1000 {
        let set = synthesize(&exact, &noise, derive_seed(SEED ^ 0x5eed, 0, t));
        let one = loc.identify_faulted_subgraph(&set).unwrap();
        for (i, (_, r)) in one.estimates.iter().enumerate() {
            sums[i] += r.wmr;
            dofs[i] = r.dof;
        }
        maxima.push(one.wmr.iter().cloned().fold(0.0, f64::max));
    }
    maxima.sort_by(f64::total_cmp);
    let p99 = maxima[(0.99 * maxima.len() as f64).ceil() as usize - 1];
    let mut pass = p99 < eps;
    let mut detail = String::new();
    for i in 0..k {
        let mean = sums[i] / 1000.0;
        let d = dofs[i] as f64;
        pass &= d > 0.0 && (mean - d).abs() <= 0.3 * d;
        detail += &format!("G{} mean {mean:.2} dof {d}; ", i + 1);
    }
    v.record(
        9,
        pass,
        format!("{detail}p99 max WMR {p99:.2} < ε {eps:.2}"),
    );
}

fn timing(v: &mut Verdicts, r34: &AccuracyReport) {
    let ms34 = r34.overall.mean_ms.unwrap_or(f64::INFINITY);
    let model = bundled::feeder123();
    let trunk: Vec<String> = (1..24)
        .step_by(3)
        .map(|i| format!("{}-{}", i, i + 1))
        .collect();
    let c = campaign(
        &model,
        json!({
            "trials": 10, "record_timing": true,
            "locator": { "threshold_mode": "fixed", "threshold": 500.0 },
            "grid": { "fault_types": ["LG", "LLL"], "branches": trunk, "positions": [0.5] },
        }),
    );
    let ms123 = run_campaign(&c)
        .unwrap()
        .overall
        .mean_ms
        .unwrap_or(f64::INFINITY);
    v.record(
        10,
        ms34 <= 100.0 && ms123 <= 150.0,
        format!("mean per location: 34-node {ms34:.2} ms, 123-node {ms123:.2} ms"),
    );
}

fn determinism(v: &mut Verdicts, model: &FeederModel) {
    let c = campaign(
        model,
        json!({ "trials": 3, "grid": { "fault_types": ["LG", "LLG"], "branches": ["802-806", "816-824", "852-832"] } }),
    );
    let csv = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let r = pool.install(|| run_campaign(&c)).unwrap();
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        r.write_json(&mut out).unwrap();
        out
    };
    let (a, b, c3) = (csv(1), csv(1), csv(3));
    v.record(
        11,
        a == b && a == c3,
        format!(
            "{} report bytes; identical across repeat and thread count: {}",
            a.len(),
            a == b && a == c3
        ),
    );
}

#[test]
fn acceptance_criteria() {
    let model = bundled::feeder34();
    let mut v = Verdicts {
        lines: Vec::new(),
        failed: Vec::new(),
    };
    oracle_recovery(&mut v);
    powerflow_validity(&mut v);
    subgraph_identification(&mut v);
    let r34 = fault_type_table(&mut v, &model);
    impedance_sweep(&mut v, &model);
    robustness(&mut v, &model);
    threshold_monotonicity(&mut v, &model);
    line_parameters(&mut v, &model);
    no_fault_statistics(&mut v, &model);
    timing(&mut v, &r34);
    determinism(&mut v, &model);
    assert!(
        v.failed.is_empty(),
        "failed criteria {:?}\n{}",
        v.failed,
        v.lines.join("\n")
    );
}
