//! Single-cell vehicular environment.
//!
//! The base station sits at the origin and covers a disk of radius
//! `coverage_radius`. Vehicles drive in straight lines at constant speed.
//! Uplink is FDMA: a vehicle given `b` Hz gets the Shannon rate
//! `b log2(1 + P h / (b N0))`, with `h` from a log-distance path-loss model.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::ModelSpec;
use crate::seeding::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u64);

impl std::fmt::Display for VehicleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: VehicleId,
    /// Meters, relative to the base station.
    pub position: [f64; 2],
    /// Unit vector.
    pub heading: [f64; 2],
    /// m/s
    pub speed: f64,
    /// Hz
    pub cpu_freq: f64,
    /// CPU cycles needed per training sample.
    pub cycles_per_sample: f64,
    /// Compensation for the frozen base model's forward-only compute.
    pub gamma: f64,
    /// Watts
    pub tx_power: f64,
    /// Samples
    pub dataset_size: usize,
}

impl Vehicle {
    pub fn distance(&self) -> f64 {
        self.position[0].hypot(self.position[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[serde(rename = "10")]
    Ten,
    #[serde(rename = "2")]
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Fading {
    Off,
    /// Block Rayleigh fading: the power gain is scaled by an `Exp(1)` draw,
    /// fixed per vehicle for the given seed.
    Rayleigh {
        seed: u64,
    },
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioConfig {
    /// Hz
    pub total_bandwidth: f64,
    /// W/Hz
    pub noise_psd: f64,
    /// dB at 1 km.
    pub pathloss_a: f64,
    /// dB per unit of log(distance in km).
    pub pathloss_b: f64,
    pub pathloss_log_base: LogBase,
    /// m
    pub coverage_radius: f64,
    /// Bits per uploaded parameter.
    pub bit_width: u32,
    pub fading: Fading,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            total_bandwidth: 10e6,
            // -174 dBm/Hz
            noise_psd: dbm_to_watts(-174.0),
            pathloss_a: 128.1,
            pathloss_b: 37.6,
            pathloss_log_base: LogBase::Ten,
            coverage_radius: 500.0,
            bit_width: 32,
            fading: Fading::Off,
        }
    }
}

impl RadioConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("total_bandwidth", self.total_bandwidth),
            ("noise_psd", self.noise_psd),
            ("coverage_radius", self.coverage_radius),
            ("pathloss_b", self.pathloss_b),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.bit_width == 0 {
            return Err(Error::Config("bit_width must be positive".into()));
        }
        Ok(())
    }

    /// Path loss in dB at `distance_km`.
    pub fn path_loss_db(&self, distance_km: f64) -> f64 {
        let log = match self.pathloss_log_base {
            LogBase::Ten => distance_km.log10(),
            LogBase::Two => distance_km.log2(),
        };
        self.pathloss_a + self.pathloss_b * log
    }
}

/// Distances below this are clamped before evaluating path loss.
pub const MIN_DISTANCE_M: f64 = 1.0;

/// Time until the vehicle leaves coverage along its heading. Zero speed is
/// treated as unconstrained and returns `f64::INFINITY`; a vehicle already
/// outside coverage gets 0.
pub fn sojourn_time(v: &Vehicle, radio: &RadioConfig) -> f64 {
    if v.speed <= 0.0 {
        return f64::INFINITY;
    }
    exit_distance(v.position, v.heading, radio.coverage_radius) / v.speed
}

/// Distance along `heading` from `position` to the boundary of the disk of
/// `radius` around the origin: the positive root of `|p + t d|^2 = R^2`.
pub fn exit_distance(position: [f64; 2], heading: [f64; 2], radius: f64) -> f64 {
    let norm = heading[0].hypot(heading[1]);
    if norm == 0.0 {
        return f64::INFINITY;
    }
    let d = [heading[0] / norm, heading[1] / norm];
    let p_dot_d = position[0] * d[0] + position[1] * d[1];
    let c = position[0] * position[0] + position[1] * position[1] - radius * radius;
    if c > 0.0 {
        return 0.0;
    }
    let disc = (p_dot_d * p_dot_d - c).max(0.0);
    (-p_dot_d + disc.sqrt()).max(0.0)
}

/// Power gain `10^(-PL/10)`, scaled by the fading draw when enabled.
pub fn channel_gain(v: &Vehicle, radio: &RadioConfig) -> f64 {
    let distance_km = v.distance().max(MIN_DISTANCE_M) / 1000.0;
    let gain = 10f64.powf(-radio.path_loss_db(distance_km) / 10.0);
    match radio.fading {
        Fading::Off => gain,
        Fading::Rayleigh { seed } => {
            let mut rng = seeding::stream(seed, &[domain::FADING, v.id.0]);
            let power: f64 = Exp1.sample(&mut rng);
            gain * power
        }
    }
}

/// Shannon rate for received power `rx_power = P h` over `bandwidth` Hz.
pub fn shannon_rate(rx_power: f64, bandwidth: f64, noise_psd: f64) -> f64 {
    if bandwidth <= 0.0 {
        return 0.0;
    }
    bandwidth * (rx_power / (bandwidth * noise_psd)).ln_1p() / std::f64::consts::LN_2
}

/// bit/s
pub fn uplink_rate(v: &Vehicle, bandwidth: f64, radio: &RadioConfig) -> f64 {
    shannon_rate(
        v.tx_power * channel_gain(v, radio),
        bandwidth,
        radio.noise_psd,
    )
}

/// Parameter counts that drive the delay models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSize {
    /// N
    pub full_params: usize,
    /// Sum of `h + w` over layers.
    pub lora_params_per_rank: usize,
}

impl From<&ModelSpec> for ModelSize {
    fn from(spec: &ModelSpec) -> Self {
        Self {
            full_params: spec.full_params(),
            lora_params_per_rank: spec.lora_params_per_rank(),
        }
    }
}

impl ModelSize {
    pub fn lora_params(&self, rank: usize) -> usize {
        rank * self.lora_params_per_rank
    }
}

/// Local training time at rank `r`:
/// `gamma E D w_bar r n_lora / (f N)`.
pub fn local_train_delay(v: &Vehicle, rank: usize, model: ModelSize, epochs: usize) -> f64 {
    v.gamma
        * epochs as f64
        * v.dataset_size as f64
        * v.cycles_per_sample
        * model.lora_params(rank) as f64
        / (v.cpu_freq * model.full_params as f64)
}

/// Local training time when every parameter is trained (FedAvg baseline).
pub fn full_train_delay(v: &Vehicle, epochs: usize) -> f64 {
    epochs as f64 * v.dataset_size as f64 * v.cycles_per_sample / v.cpu_freq
}

/// Time to push `params` parameters of `bit_width` bits at `rate` bit/s.
/// A nonpositive rate can never finish and yields `f64::INFINITY`.
pub fn transfer_delay(params: usize, bit_width: u32, rate: f64) -> f64 {
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    bit_width as f64 * params as f64 / rate
}

/// Upload time of the rank-`r` factors, `d r n_lora / C`.
pub fn upload_delay(rank: usize, model: ModelSize, rate: f64, radio: &RadioConfig) -> f64 {
    transfer_delay(model.lora_params(rank), radio.bit_width, rate)
}

/// Ranges vehicles are sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    /// Target number of vehicles in coverage.
    pub population: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub cpu_freq_min: f64,
    pub cpu_freq_max: f64,
    pub cycles_min: f64,
    pub cycles_max: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub tx_power_dbm: f64,
    pub dataset_size: usize,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            population: 20,
            speed_min: 12.0,
            speed_max: 22.0,
            cpu_freq_min: 1.9e9,
            cpu_freq_max: 3.0e9,
            cycles_min: 0.8e7,
            cycles_max: 1.2e7,
            gamma_min: 1.3,
            gamma_max: 1.5,
            tx_power_dbm: 28.0,
            dataset_size: 300,
        }
    }
}

impl FleetConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("speed", self.speed_min, self.speed_max),
            ("cpu_freq", self.cpu_freq_min, self.cpu_freq_max),
            ("cycles", self.cycles_min, self.cycles_max),
            ("gamma", self.gamma_min, self.gamma_max),
        ];
        for (name, lo, hi) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} range [{lo}, {hi}] is invalid"
                )));
            }
        }
        if self.population == 0 {
            return Err(Error::Config("population must be positive".into()));
        }
        if self.dataset_size == 0 {
            return Err(Error::Config("dataset_size must be positive".into()));
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(
        &self,
        id: VehicleId,
        position: [f64; 2],
        heading: [f64; 2],
        rng: &mut R,
    ) -> Vehicle {
        Vehicle {
            id,
            position,
            heading,
            speed: rng.gen_range(self.speed_min..=self.speed_max),
            cpu_freq: rng.gen_range(self.cpu_freq_min..=self.cpu_freq_max),
            cycles_per_sample: rng.gen_range(self.cycles_min..=self.cycles_max),
            gamma: rng.gen_range(self.gamma_min..=self.gamma_max),
            tx_power: dbm_to_watts(self.tx_power_dbm),
            dataset_size: self.dataset_size,
        }
    }
}

/// How departed vehicles are replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpawnPolicy {
    /// Vehicles are spawned at the boundary until this many are in coverage.
    pub target: usize,
}

/// Spawned vehicles start this far inside the boundary, relative to the radius.
const SPAWN_INSET: f64 = 1e-9;
/// Max deviation of a spawned vehicle's heading from the inward normal.
const SPAWN_MAX_ANGLE: f64 = PI / 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub vehicles: Vec<Vehicle>,
    /// Id handed to the next spawned vehicle.
    pub next_id: u64,
}

impl Scenario {
    /// `fleet.population` vehicles placed uniformly in the disk with uniform
    /// headings.
    pub fn initial(fleet: &FleetConfig, radio: &RadioConfig, seed: u64) -> Self {
        let mut rng = seeding::stream(seed, &[domain::SCENARIO]);
        let radius = radio.coverage_radius;
        let vehicles = (0..fleet.population as u64)
            .map(|id| {
                let rho = radius * rng.gen::<f64>().sqrt();
                let theta = rng.gen_range(0.0..2.0 * PI);
                let phi = rng.gen_range(0.0..2.0 * PI);
                fleet.sample(
                    VehicleId(id),
                    [rho * theta.cos(), rho * theta.sin()],
                    [phi.cos(), phi.sin()],
                    &mut rng,
                )
            })
            .collect();
        Self {
            vehicles,
            next_id: fleet.population as u64,
        }
    }

    /// Moves every vehicle `dt` seconds along its heading, drops the ones that
    /// left coverage, and spawns replacements at the boundary heading inward.
    pub fn advance(
        &self,
        dt: f64,
        policy: SpawnPolicy,
        fleet: &FleetConfig,
        radio: &RadioConfig,
        seed: u64,
    ) -> Result<Self> {
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "time step must be >= 0, got {dt}"
            )));
        }
        if dt == 0.0 {
            return Ok(self.clone());
        }
        let radius = radio.coverage_radius;
        let mut vehicles: Vec<Vehicle> = self
            .vehicles
            .iter()
            .map(|v| {
                let mut moved = v.clone();
                moved.position[0] += v.heading[0] * v.speed * dt;
                moved.position[1] += v.heading[1] * v.speed * dt;
                moved
            })
            .filter(|v| v.distance() <= radius)
            .collect();

        let mut next_id = self.next_id;
        while vehicles.len() < policy.target {
            let mut rng = seeding::stream(seed, &[domain::SPAWN, next_id]);
            let theta = rng.gen_range(0.0..2.0 * PI);
            let deviation = rng.gen_range(-SPAWN_MAX_ANGLE..SPAWN_MAX_ANGLE);
            let rho = radius * (1.0 - SPAWN_INSET);
            let inward = theta + PI + deviation;
            vehicles.push(fleet.sample(
                VehicleId(next_id),
                [rho * theta.cos(), rho * theta.sin()],
                [inward.cos(), inward.sin()],
                &mut rng,
            ));
            next_id += 1;
        }
        Ok(Self { vehicles, next_id })
    }
}

/// One row of a scenario snapshot CSV. Units: meters, m/s, Hz, cycles,
/// watts, samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SnapshotRow {
    id: u64,
    x: f64,
    y: f64,
    heading_x: f64,
    heading_y: f64,
    v: f64,
    f: f64,
    w_bar: f64,
    gamma: f64,
    #[serde(rename = "P")]
    p: f64,
    #[serde(rename = "D")]
    d: usize,
}

impl From<&Vehicle> for SnapshotRow {
    fn from(v: &Vehicle) -> Self {
        Self {
            id: v.id.0,
            x: v.position[0],
            y: v.position[1],
            heading_x: v.heading[0],
            heading_y: v.heading[1],
            v: v.speed,
            f: v.cpu_freq,
            w_bar: v.cycles_per_sample,
            gamma: v.gamma,
            p: v.tx_power,
            d: v.dataset_size,
        }
    }
}

impl From<SnapshotRow> for Vehicle {
    fn from(r: SnapshotRow) -> Self {
        Self {
            id: VehicleId(r.id),
            position: [r.x, r.y],
            heading: [r.heading_x, r.heading_y],
            speed: r.v,
            cpu_freq: r.f,
            cycles_per_sample: r.w_bar,
            gamma: r.gamma,
            tx_power: r.p,
            dataset_size: r.d,
        }
    }
}

pub fn write_snapshot<W: Write>(writer: W, vehicles: &[Vehicle]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for v in vehicles {
        out.serialize(SnapshotRow::from(v))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_snapshot<R: Read>(reader: R) -> csv::Result<Vec<Vehicle>> {
    csv::Reader::from_reader(reader)
        .deserialize::<SnapshotRow>()
        .map(|row| row.map(Vehicle::from))
        .collect()
}

pub fn save_snapshot(path: &Path, vehicles: &[Vehicle]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_snapshot(file, vehicles).map_err(|source| Error::Csv {
        path: path.into(),
        source,
    })
}

pub fn load_snapshot(path: &Path) -> Result<Vec<Vehicle>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_snapshot(file).map_err(|source| Error::Csv {
        path: path.into(),
        source,
    })
}
