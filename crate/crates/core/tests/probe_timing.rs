//! Manual timing probe for the toy benchmark (run with --ignored).

use std::time::Instant;

use s2d_core::bench::{build_seed_datasets, toy_model_spec, BenchConfig};
use s2d_core::train::{evaluate_model, train_ddet, train_sdet, AblationFlags, TrainConfig};
use s2d_core::train::DecodeConfig;
use s2d_core::evalmetrics::EvalConfig;

#[test]
#[ignore]
fn probe_single_seed_timing() {
    let cfg = BenchConfig::default();
    let spec = toy_model_spec();
    let t0 = Instant::now();
    let (train_data, eval_data) = build_seed_datasets(&cfg, 0).unwrap();
    println!("data gen: {:.2?} ({} train samples)", t0.elapsed(), train_data.samples.len());

    let t0 = Instant::now();
    let ddet_cfg = TrainConfig { steps: 20, seed: 0, ..Default::default() };
    let (teacher, logs) = train_ddet(&train_data, &spec, &ddet_cfg).unwrap();
    println!(
        "ddet 20 steps: {:.2?} ({:.0} ms/step), loss {:.3} -> {:.3}",
        t0.elapsed(),
        t0.elapsed().as_millis() as f64 / 20.0,
        logs[0].loss.total,
        logs.last().unwrap().loss.total
    );

    for (label, flags) in [
        ("baseline", AblationFlags { distill: false, s2d: false, pcr: false }),
        ("full", AblationFlags { distill: true, s2d: true, pcr: true }),
    ] {
        let t0 = Instant::now();
        let sdet_cfg = TrainConfig { steps: 10, seed: 0, ablation: flags, ..Default::default() };
        let (student, logs) = train_sdet(&train_data, &teacher, &spec, &sdet_cfg).unwrap();
        println!(
            "sdet {label} 10 steps: {:.2?} ({:.0} ms/step), loss {:.3} -> {:.3}",
            t0.elapsed(),
            t0.elapsed().as_millis() as f64 / 10.0,
            logs[0].loss.total,
            logs.last().unwrap().loss.total
        );
        let t0 = Instant::now();
        let report = evaluate_model(
            &student,
            flags.s2d,
            &spec,
            &eval_data,
            &DecodeConfig::default(),
            &EvalConfig::default(),
            Some(&teacher),
        )
        .unwrap();
        println!(
            "eval {label}: {:.2?}, vehicle AP {:.3}, fMSE {:.5}",
            t0.elapsed(),
            report.vehicle.ap,
            report.feature_mse.unwrap()
        );
    }
}
