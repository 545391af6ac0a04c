#![allow(dead_code)]

use dlora_sim::lora::ModelSpec;
use dlora_sim::scenario::{dbm_to_watts, RadioConfig, Vehicle, VehicleId};
use dlora_sim::scheduler::{ObjectiveParams, SchedulerEnv};
use rand::Rng;

/// A vehicle anywhere in coverage with parameters drawn from wide ranges, so
/// deadlines bind for some and not for others.
pub fn random_vehicle<R: Rng>(id: u64, radio: &RadioConfig, rng: &mut R) -> Vehicle {
    let radius = radio.coverage_radius * rng.gen::<f64>().sqrt() * 0.999;
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let heading = rng.gen_range(0.0..std::f64::consts::TAU);
    Vehicle {
        id: VehicleId(id),
        position: [radius * angle.cos(), radius * angle.sin()],
        heading: [heading.cos(), heading.sin()],
        speed: rng.gen_range(12.0..22.0),
        cpu_freq: rng.gen_range(1.9e9..3.0e9),
        cycles_per_sample: rng.gen_range(0.8e7..1.2e7),
        gamma: rng.gen_range(1.3..1.5),
        tx_power: dbm_to_watts(rng.gen_range(10.0..28.0)),
        dataset_size: rng.gen_range(100..3000),
    }
}

pub fn random_spec<R: Rng>(rng: &mut R) -> ModelSpec {
    let depth = rng.gen_range(1..=3);
    let widths: Vec<usize> = (0..=depth).map(|_| rng.gen_range(4..=64)).collect();
    ModelSpec::mlp(&widths).unwrap()
}

/// Environment whose bandwidth budget is drawn log-uniformly over a range
/// where it is sometimes binding and sometimes not.
pub fn random_env<R: Rng>(rng: &mut R) -> SchedulerEnv {
    let radio = RadioConfig {
        total_bandwidth: 10f64.powf(rng.gen_range(1.0..5.0)),
        ..RadioConfig::default()
    };
    SchedulerEnv {
        spec: random_spec(rng),
        radio,
        epochs: rng.gen_range(1..=4),
    }
}

pub fn random_params<R: Rng>(spec: &ModelSpec, rng: &mut R) -> ObjectiveParams {
    ObjectiveParams::for_spec(
        spec,
        rng.gen_range(0.001..0.1),
        rng.gen_range(0.5..5.0),
        rng.gen_range(0.1..100.0),
        rng.gen_range(0.01..0.2),
    )
}

pub fn random_fleet<R: Rng>(n: usize, radio: &RadioConfig, rng: &mut R) -> Vec<Vehicle> {
    (0..n as u64)
        .map(|id| random_vehicle(id, radio, rng))
        .collect()
}
