//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.

use std::time::Instant;

use nalgebra::DMatrix;
use pbtrack::report::PlantMetrics;
use pbtrack::{preset, simulate_source, RunOutcome};
use pbtrack_core::bilinear::{psd_sqrt, BilinearSystem, Disturbance};
use pbtrack_core::metrics::{thd_full_band, SteadyWindow};
use pbtrack_core::props::{run_property_suite, PropertyConfig, PropertyReport};
use pbtrack_core::sim::{simulate, BilinearLoop, Drive, SimConfig, SinusoidalInput};
use pbtrack_core::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn run_preset(name: &str) -> (RunOutcome, f64) {
    let start = Instant::now();
    let out = simulate_source(preset(name).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
    (out, start.elapsed().as_secs_f64())
}

fn boost(out: &RunOutcome) -> &pbtrack::report::BoostMetricsReport {
    match &out.summary.metrics {
        PlantMetrics::Boost(m) => m,
        PlantMetrics::Mmc(_) => panic!("expected boost metrics"),
    }
}

fn boost_criteria(results: &mut Vec<Outcome>) {
    let (lin, t_lin) = run_preset("boost_table1");
    let (tanh, t_tanh) = run_preset("boost_table1_tanh");
    let (ml, mt) = (boost(&lin), boost(&tanh));
    results.push(Outcome {
        id: 1,
        name: "boost power factor",
        pass: ml.power_factor >= 0.95 && mt.power_factor >= ml.power_factor - 0.005 && t_lin < 60.0 && t_tanh < 60.0,
        detail: format!(
            "PF linear {:.4}, tanh {:.4}; runtime {:.2} s / {:.2} s",
            ml.power_factor, mt.power_factor, t_lin, t_tanh
        ),
    });
    let band = 0.10..=0.32;
    results.push(Outcome {
        id: 2,
        name: "boost THD",
        pass: band.contains(&ml.thd) && band.contains(&mt.thd),
        detail: format!(
            "THD linear {:.2} %, tanh {:.2} % (line side {:.2} % / {:.2} %)",
            100.0 * ml.thd,
            100.0 * mt.thd,
            100.0 * ml.thd_line,
            100.0 * mt.thd_line
        ),
    });
    let settle = |m: &pbtrack::report::BoostMetricsReport| m.settling_time.map_or("never".into(), |s| format!("{s:.3} s"));
    results.push(Outcome {
        id: 3,
        name: "boost settling",
        pass: ml.settling_time.is_some_and(|s| s <= 1.0),
        detail: format!("v_C inside 15 V ± 2 % from {} (tanh: {})", settle(ml), settle(mt)),
    });

    let (step, _) = run_preset("boost_loadstep");
    let ms = boost(&step);
    let rec = ms.recoveries.iter().find(|r| r.param == "R");
    let recovery = rec.and_then(|r| r.recovery_time);
    results.push(Outcome {
        id: 4,
        name: "boost load step",
        pass: rec.is_some() && recovery.is_some_and(|r| r <= 0.7),
        detail: format!(
            "R x0.7 at 1.5 s, back in band after {}",
            recovery.map_or("never".into(), |r| format!("{r:.3} s"))
        ),
    });
}

fn mmc_criterion(results: &mut Vec<Outcome>) {
    let (out, _) = run_preset("mmc_fig7");
    let PlantMetrics::Mmc(m) = &out.summary.metrics else {
        panic!("expected mmc metrics")
    };
    results.push(Outcome {
        id: 5,
        name: "MMC tracking",
        pass: m.i_v_relative_error <= 0.03 && m.u_cu_relative_error <= 0.05 && m.u_cl_relative_error <= 0.05,
        detail: format!(
            "i_v {:.2} % of amplitude; u_CU {:.2} %, u_CL {:.2} %",
            100.0 * m.i_v_relative_error,
            100.0 * m.u_cu_relative_error,
            100.0 * m.u_cl_relative_error
        ),
    });
}

fn property_criteria(results: &mut Vec<Outcome>, report: &PropertyReport) {
    let n = report.cases.len();
    results.push(Outcome {
        id: 6,
        name: "dissipation property",
        pass: report.errors == 0 && report.dissipation_failures == 0 && report.negative_control.flagged,
        detail: format!(
            "{} / {n} violations, {} errors; broken certificate flagged: {} ({} violations)",
            report.dissipation_failures, report.errors, report.negative_control.flagged, report.negative_control.violations
        ),
    });
    let worst = report
        .cases
        .iter()
        .filter(|c| c.rank_full)
        .map(|c| c.convergence)
        .fold(0.0, f64::max);
    results.push(Outcome {
        id: 7,
        name: "Lyapunov property",
        pass: report.errors == 0 && report.lyapunov_failures == 0 && report.convergence_failures == 0,
        detail: format!(
            "W increases {} / {n}; convergence failures {} / {} rank-full cases (worst ratio {worst:.2e})",
            report.lyapunov_failures, report.convergence_failures, report.rank_full_cases
        ),
    });
}

fn rk4_ratio() -> f64 {
    let end_error = |dt: f64| {
        let sys = BilinearSystem::new(-DMatrix::<f64>::identity(1, 1), vec![], Disturbance::Zero).unwrap();
        let drive = Drive::OpenLoop(SinusoidalInput { channels: vec![] });
        let mut lp = BilinearLoop::new(sys, DMatrix::identity(1, 1), drive).unwrap();
        let tr = simulate(&mut lp, &[1.0], &SimConfig::new(dt, 1.0)).unwrap();
        (tr.x.row(tr.len() - 1)[0] - (-1f64).exp()).abs()
    };
    end_error(0.1) / end_error(0.05)
}

fn square_wave_gap() -> f64 {
    let (periods, per) = (10usize, 20_000usize);
    let n = periods * per;
    let signal: Vec<f64> = (0..n)
        .map(|k| {
            let phase = ((k % per) as f64 + 0.5) / per as f64;
            if phase < 0.5 {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    let window = SteadyWindow::new(0, n, per as f64, 1.0).unwrap();
    let oracle = (std::f64::consts::PI.powi(2) / 8.0 - 1.0).sqrt();
    (thd_full_band(&signal, &window).unwrap() - oracle).abs()
}

fn psd_sqrt_worst() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let n = rng.random_range(1..=6);
        // every fourth matrix is rank deficient
        let r = if i % 4 == 0 { rng.random_range(0..n) } else { n };
        let g = DMatrix::from_fn(n, r.max(1), |_, j| if j < r { rng.random_range(-1.0..1.0) } else { 0.0 });
        let q = &g * g.transpose();
        let s = psd_sqrt(&q, 1e-12).unwrap();
        worst = worst.max((&s * &s - &q).amax());
    }
    worst
}

fn hygiene(results: &mut Vec<Outcome>) {
    let ratio = rk4_ratio();
    let gap = square_wave_gap();
    let sq = psd_sqrt_worst();
    results.push(Outcome {
        id: 8,
        name: "numerical hygiene",
        pass: (12.0..=20.0).contains(&ratio) && gap <= 1e-6 && sq <= 1e-10,
        detail: format!("RK4 ratio {ratio:.3}; square-wave THD gap {gap:.2e}; max |S·S − Q| {sq:.2e}"),
    });
}

fn main() {
    let mut results = Vec::new();
    boost_criteria(&mut results);
    mmc_criterion(&mut results);
    let report = run_property_suite(&PropertyConfig::new(42, 100), Execution::Parallel).expect("property suite");
    property_criteria(&mut results, &report);
    hygiene(&mut results);

    results.sort_by_key(|r| r.id);
    for r in &results {
        println!(
            "{} criterion {}: {} ({})",
            if r.pass { "PASS" } else { "FAIL" },
            r.id,
            r.name,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
