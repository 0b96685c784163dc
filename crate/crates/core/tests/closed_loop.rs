use pbtrack_core::bilinear::{verify_storage_certificate, DEFAULT_CERT_TOL};
use pbtrack_core::boost::{BoostConfig, BoostGains, BoostParams};
use pbtrack_core::control::ControllerMode;
use pbtrack_core::mmc::{mmc_system, rank_margin, MmcConfig, MmcParams};
use pbtrack_core::sim::{
    augmented_output_series, run_batch, run_closed_loop, ParamChange, ParamEvent, PlantConfig, Scenario, SimConfig,
};
use pbtrack_core::Execution;

fn boost_scenario(t_end: f64) -> Scenario {
    let gains = BoostGains {
        kp: 0.013,
        ki: 1e-4,
        mode: ControllerMode::Linear,
        kp_comp: 1.0,
        ki_comp: 20.0,
        phi_min: 0.0,
        phi_max: 40.0,
    };
    let cfg = BoostConfig::new(BoostParams::bench(), gains);
    Scenario::new(PlantConfig::Boost(cfg), SimConfig::new(1e-6, t_end).record_every(10))
}

fn mmc_scenario(t_end: f64) -> Scenario {
    let cfg = MmcConfig::new(MmcParams::lab(), [[1e-3, 0.0], [0.0, 1e-3]], [[1e-5, 0.0], [0.0, 1e-5]]);
    Scenario::new(PlantConfig::Mmc(cfg), SimConfig::new(1e-5, t_end))
}

#[test]
fn boost_output_voltage_stays_positive() {
    let tr = run_closed_loop(&boost_scenario(0.4)).unwrap();
    let v_c = tr.state("v_C").unwrap();
    assert!(v_c.iter().all(|v| *v > 0.0));
    let i_l = tr.state("i_L").unwrap();
    assert!(i_l.iter().all(|i| *i >= 0.0), "diode clamp keeps i_L non-negative");
    assert!(tr.u.column(0).iter().all(|u| (0.0..=1.0).contains(u)));
    assert!((tr.saturated_steps as f64) < 0.05 * tr.total_steps as f64);
}

#[test]
fn load_event_applies_at_first_sample_after_its_time() {
    let mut sc = boost_scenario(0.2);
    sc.sim = sc.sim.with_event(ParamEvent {
        t: 0.1000005,
        param: "R".into(),
        change: ParamChange::Scale(0.7),
    });
    let tr = run_closed_loop(&sc).unwrap();
    assert_eq!(tr.events.len(), 1);
    let ev = &tr.events[0];
    assert_eq!(ev.param, "R");
    assert_eq!(ev.old, 22.0);
    assert!((ev.new - 15.4).abs() < 1e-12);
    assert!(ev.t >= 0.1000005 && ev.t < 0.1000005 + 1e-6 + 1e-12, "applied at {}", ev.t);
}

#[test]
fn batch_runs_match_across_execution_modes() {
    let scenarios = vec![boost_scenario(0.05), mmc_scenario(0.05)];
    let seq = run_batch(&scenarios, Execution::Sequential);
    let par = run_batch(&scenarios, Execution::Parallel);
    for (a, b) in seq.iter().zip(&par) {
        let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
        assert_eq!(a.x, b.x);
        assert_eq!(a.u, b.u);
        assert_eq!(a.aux, b.aux);
    }
}

#[test]
fn mmc_references_are_periodic_after_warm_up() {
    let tr = run_closed_loop(&mmc_scenario(0.6)).unwrap();
    let period = (1.0 / 50.0 / tr.sample_interval()).round() as usize;
    let start = tr.index_at(0.5);
    for name in ["u_CU_ref", "u_CL_ref"] {
        let r = tr.aux(name).unwrap();
        for k in start..start + period {
            assert!((r[k] - r[k - period]).abs() < 1e-3 * r[k].abs(), "{name} at {}", tr.t[k]);
        }
    }
    for j in 0..2 {
        let xs = tr.x_star.column(j);
        for k in start..start + period {
            assert!((xs[k] - xs[k - period]).abs() < 1e-9 * (1.0 + xs[k].abs()));
        }
    }
}

#[test]
fn mmc_rank_flags_sit_where_the_margin_changes_sign() {
    let sc = mmc_scenario(0.1);
    let tr = run_closed_loop(&sc).unwrap();
    let p = tr.storage.clone().unwrap();
    let cert = verify_storage_certificate(&mmc_system(&MmcParams::lab()).unwrap(), &p, DEFAULT_CERT_TOL).unwrap();
    let rep = augmented_output_series(&tr, &cert).unwrap();
    let margin: Vec<f64> = (0..tr.len())
        .map(|k| rank_margin(tr.x_star.row(k)[0], tr.x_star.row(k)[1]))
        .collect();
    let crossings: Vec<f64> = (1..tr.len())
        .filter(|&k| margin[k - 1].signum() != margin[k].signum())
        .map(|k| tr.t[k])
        .collect();
    assert!(!crossings.is_empty());
    for t in &rep.rank_deficient_times {
        let nearest = crossings.iter().map(|c| (c - t).abs()).fold(f64::INFINITY, f64::min);
        assert!(nearest < 5e-4, "flag at {t} is {nearest} s from a crossing");
    }
}
