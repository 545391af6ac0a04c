//! Experiment orchestration.
//!
//! A run is fully described by an [`ExperimentConfig`]. Each round the
//! scenario advances by the previous round's simulated duration, the
//! configured scheduler picks vehicles (and for ARBVS the rank), the selected
//! vehicles train in parallel, the server aggregates, and the global model is
//! evaluated on a held-out set. Rounds are synchronous: a round lasts as long
//! as its slowest selected vehicle.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gap::{self, BoundParams};
use crate::lora::{self, ModelSpec};
use crate::scenario::{
    Fading, FleetConfig, LogBase, RadioConfig, Scenario, SpawnPolicy, VehicleId,
};
use crate::scheduler::{self, ObjectiveParams, Payload, ScheduleDecision, SchedulerEnv};
use crate::seeding;
use crate::trainer::{
    self, DataMode, DataPartition, Dataset, GaussianMixture, GlobalModel, TrainConfig,
};

/// Simulated seconds that pass when a round selects nobody.
pub const IDLE_STEP_S: f64 = 1.0;

/// Accuracy levels reported in `plotdata/time_to_target.csv`.
pub const PLOT_TARGETS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    /// Joint rank, bandwidth and vehicle selection; LoRA training.
    Arbvs,
    /// Uniform sample of `random_fraction`, equal split, LoRA at `fixed_rank`.
    Random,
    /// Uniform sample of `random_fraction`, equal split, full-model training.
    FedavgRandom,
    /// Every vehicle in coverage trains the full model, no deadline.
    FedavgOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataModeKind {
    Iid,
    Noniid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadingKind {
    Off,
    Rayleigh,
}

/// Flat experiment description. Every key is optional in a config file;
/// missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // fleet
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

    // radio
    pub total_bandwidth: f64,
    pub noise_psd: f64,
    pub pathloss_a: f64,
    pub pathloss_b: f64,
    pub pathloss_log_base: LogBase,
    pub coverage_radius: f64,
    pub bit_width: u32,
    pub fading: FadingKind,
    pub fading_seed: u64,

    // model and data
    pub layer_widths: Vec<usize>,
    pub classes: usize,
    pub samples_per_icv: usize,
    pub test_samples: usize,
    pub class_separation: f64,
    pub noise_std: f64,
    pub data_mode: DataModeKind,
    pub class_budget: usize,

    // training
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rounds: usize,
    /// Unset means `1 / sqrt(rank)`.
    pub a_init_std: Option<f64>,

    // scheduling
    pub scheduler: SchedulerKind,
    pub random_fraction: f64,
    pub fixed_rank: usize,
    pub rank_cap: usize,
    pub bisection_eps: f64,

    // bound constants
    pub beta: f64,
    pub sigma2: f64,
    pub m: f64,
    pub loss_init: Option<f64>,
    pub loss_star: Option<f64>,

    // seeds and execution
    pub scenario_seed: u64,
    pub data_seed: u64,
    pub train_seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for client training; 0 uses every core.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fleet = FleetConfig::default();
        let radio = RadioConfig::default();
        let train = TrainConfig::default();
        Self {
            population: fleet.population,
            speed_min: fleet.speed_min,
            speed_max: fleet.speed_max,
            cpu_freq_min: fleet.cpu_freq_min,
            cpu_freq_max: fleet.cpu_freq_max,
            cycles_min: fleet.cycles_min,
            cycles_max: fleet.cycles_max,
            gamma_min: fleet.gamma_min,
            gamma_max: fleet.gamma_max,
            tx_power_dbm: fleet.tx_power_dbm,

            total_bandwidth: radio.total_bandwidth,
            noise_psd: radio.noise_psd,
            pathloss_a: radio.pathloss_a,
            pathloss_b: radio.pathloss_b,
            pathloss_log_base: radio.pathloss_log_base,
            coverage_radius: radio.coverage_radius,
            bit_width: radio.bit_width,
            fading: FadingKind::Off,
            fading_seed: 0,

            layer_widths: vec![32, 64, 10],
            classes: 10,
            samples_per_icv: fleet.dataset_size,
            test_samples: 2000,
            class_separation: 3.0,
            noise_std: 1.0,
            data_mode: DataModeKind::Iid,
            class_budget: 3,

            eta: train.eta,
            epochs: train.epochs,
            batch_size: train.batch_size,
            rounds: train.rounds,
            a_init_std: train.a_init_std,

            scheduler: SchedulerKind::Arbvs,
            random_fraction: 0.2,
            fixed_rank: 10,
            rank_cap: 32,
            bisection_eps: scheduler::DEFAULT_EPS,

            beta: 1.0,
            sigma2: 1.0,
            m: gap::DEFAULT_M,
            loss_init: None,
            loss_star: None,

            scenario_seed: 1,
            data_seed: 2,
            train_seed: 3,
            output_dir: PathBuf::from("out"),
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are all representable")
    }

    /// Same run with every seed offset by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            scenario_seed: seed,
            data_seed: seeding::mix(seed, &[1]),
            train_seed: seeding::mix(seed, &[2]),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fleet().validate()?;
        self.radio().validate()?;
        self.train_config().validate()?;
        let spec = self.model_spec()?;
        if spec.output_dim() != self.classes {
            return Err(Error::Config(format!(
                "last layer width {} must equal classes {}",
                spec.output_dim(),
                self.classes
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.test_samples == 0 {
            return Err(Error::Config("test_samples must be positive".into()));
        }
        if !(self.class_separation >= 0.0 && self.noise_std > 0.0) {
            return Err(Error::Config(
                "class_separation must be >= 0 and noise_std > 0".into(),
            ));
        }
        if self.data_mode == DataModeKind::Noniid
            && !(1..=self.classes).contains(&self.class_budget)
        {
            return Err(Error::Config(format!(
                "class_budget {} outside 1..={}",
                self.class_budget, self.classes
            )));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be positive".into()));
        }
        if !(self.random_fraction > 0.0 && self.random_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "random_fraction must be in (0, 1], got {}",
                self.random_fraction
            )));
        }
        if self.rank_cap == 0 {
            return Err(Error::Config("rank_cap must be positive".into()));
        }
        lora::rank_upper_bound(&spec, self.rank_cap)?;
        if self.scheduler == SchedulerKind::Random {
            spec.check_rank(self.fixed_rank)?;
        }
        if !(self.bisection_eps > 0.0 && self.bisection_eps < 1.0) {
            return Err(Error::Config("bisection_eps must be in (0, 1)".into()));
        }
        if !(self.beta > 0.0 && self.sigma2 >= 0.0 && self.m >= 0.0) {
            return Err(Error::Config("beta must be > 0, sigma2 and m >= 0".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::mlp(&self.layer_widths).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn fleet(&self) -> FleetConfig {
        FleetConfig {
            population: self.population,
            speed_min: self.speed_min,
            speed_max: self.speed_max,
            cpu_freq_min: self.cpu_freq_min,
            cpu_freq_max: self.cpu_freq_max,
            cycles_min: self.cycles_min,
            cycles_max: self.cycles_max,
            gamma_min: self.gamma_min,
            gamma_max: self.gamma_max,
            tx_power_dbm: self.tx_power_dbm,
            dataset_size: self.samples_per_icv,
        }
    }

    pub fn radio(&self) -> RadioConfig {
        RadioConfig {
            total_bandwidth: self.total_bandwidth,
            noise_psd: self.noise_psd,
            pathloss_a: self.pathloss_a,
            pathloss_b: self.pathloss_b,
            pathloss_log_base: self.pathloss_log_base,
            coverage_radius: self.coverage_radius,
            bit_width: self.bit_width,
            fading: match self.fading {
                FadingKind::Off => Fading::Off,
                FadingKind::Rayleigh => Fading::Rayleigh {
                    seed: self.fading_seed,
                },
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            epochs: self.epochs,
            batch_size: self.batch_size,
            rounds: self.rounds,
            seed: self.train_seed,
            a_init_std: self.a_init_std,
        }
    }

    pub fn data_mode(&self) -> DataMode {
        match self.data_mode {
            DataModeKind::Iid => DataMode::Iid,
            DataModeKind::Noniid => DataMode::NonIid {
                class_budget: self.class_budget,
            },
        }
    }

    pub fn scheduler_env(&self) -> Result<SchedulerEnv> {
        Ok(SchedulerEnv {
            spec: self.model_spec()?,
            radio: self.radio(),
            epochs: self.epochs,
        })
    }

    pub fn objective_params(&self) -> Result<ObjectiveParams> {
        Ok(ObjectiveParams::for_spec(
            &self.model_spec()?,
            self.eta,
            self.beta,
            self.sigma2,
            self.m,
        ))
    }

    /// Bound constants; the loss estimates fall back to `estimate` when the
    /// config leaves them unset.
    pub fn bound_params(&self, estimate: Option<(f64, f64)>) -> Result<BoundParams> {
        let mut p = BoundParams::for_spec(
            &self.model_spec()?,
            self.eta,
            self.beta,
            self.sigma2,
            self.m,
        );
        p.t = self.rounds;
        let (init, star) = estimate.unwrap_or((0.0, 0.0));
        p.loss_init = self.loss_init.unwrap_or(init);
        p.loss_star = self.loss_star.unwrap_or(star);
        Ok(p)
    }
}

/// One row of `metrics.csv` plus the selected ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub t: usize,
    /// Rank trained this round; 0 for full-model rounds and empty rounds.
    pub r: usize,
    pub s_size: usize,
    pub selected: Vec<VehicleId>,
    pub bw_used_hz: f64,
    pub uplink_bits_round: u64,
    pub uplink_bits_cum: u64,
    pub max_delay_s: f64,
    pub sim_time_s: f64,
    /// Mean local loss over the selected clients; absent for empty rounds.
    pub train_loss: Option<f64>,
    pub test_loss: f64,
    pub test_acc: f64,
    pub objective: f64,
    pub empty_round: bool,
    pub straggler_drops: usize,
}

/// CSV shape of [`RoundMetrics`]; the selected ids live in `schedule.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: usize,
    pub r: usize,
    pub s_size: usize,
    pub bw_used_hz: f64,
    pub uplink_bits_round: u64,
    pub uplink_bits_cum: u64,
    pub max_delay_s: f64,
    pub sim_time_s: f64,
    pub train_loss: Option<f64>,
    pub test_loss: f64,
    pub test_acc: f64,
    pub objective: f64,
    pub flags: String,
}

pub const METRICS_COLUMNS: [&str; 13] = [
    "t",
    "r",
    "s_size",
    "bw_used_hz",
    "uplink_bits_round",
    "uplink_bits_cum",
    "max_delay_s",
    "sim_time_s",
    "train_loss",
    "test_loss",
    "test_acc",
    "objective",
    "flags",
];

impl From<&RoundMetrics> for MetricsRow {
    fn from(m: &RoundMetrics) -> Self {
        let mut flags = Vec::new();
        if m.empty_round {
            flags.push("empty_round".to_string());
        }
        if m.straggler_drops > 0 {
            flags.push(format!("straggler_drops={}", m.straggler_drops));
        }
        Self {
            t: m.t,
            r: m.r,
            s_size: m.s_size,
            bw_used_hz: m.bw_used_hz,
            uplink_bits_round: m.uplink_bits_round,
            uplink_bits_cum: m.uplink_bits_cum,
            max_delay_s: m.max_delay_s,
            sim_time_s: m.sim_time_s,
            train_loss: m.train_loss,
            test_loss: m.test_loss,
            test_acc: m.test_acc,
            objective: m.objective,
            flags: flags.join(";"),
        }
    }
}

impl MetricsRow {
    pub fn empty_round(&self) -> bool {
        self.flags.split(';').any(|f| f == "empty_round")
    }

    pub fn straggler_drops(&self) -> usize {
        self.flags
            .split(';')
            .find_map(|f| f.strip_prefix("straggler_drops="))
            .and_then(|n| n.parse().ok())
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub decisions: Vec<ScheduleDecision>,
}

struct Workload {
    partitions: Vec<DataPartition>,
    test: Dataset,
}

fn build_workload(cfg: &ExperimentConfig, spec: &ModelSpec) -> Result<Workload> {
    let mixture = GaussianMixture::new(
        cfg.classes,
        spec.input_dim(),
        cfg.class_separation,
        cfg.noise_std,
        cfg.data_seed,
    );
    // Non-IID partitions draw whole classes, so leave headroom in each pool.
    let headroom = match cfg.data_mode {
        DataModeKind::Iid => 1,
        DataModeKind::Noniid => cfg.classes.div_ceil(cfg.class_budget).max(2),
    };
    let train_size = cfg.population * cfg.samples_per_icv * headroom;
    let train = mixture.sample(train_size, seeding::mix(cfg.data_seed, &[1]));
    let test = mixture.sample(cfg.test_samples, seeding::mix(cfg.data_seed, &[2]));
    let partitions = trainer::partition_dataset(
        &train,
        cfg.population,
        cfg.samples_per_icv,
        cfg.data_mode(),
        cfg.data_seed,
    )?;
    Ok(Workload { partitions, test })
}

/// Partition a vehicle trains on. Vehicle ids grow without bound as the fleet
/// churns, so ids wrap onto the fixed set of partitions.
pub fn partition_index(id: VehicleId, partitions: usize) -> usize {
    (id.0 % partitions as u64) as usize
}

fn schedule_round(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    env: &SchedulerEnv,
    params: &ObjectiveParams,
    t: usize,
) -> Result<ScheduleDecision> {
    let vehicles = &scenario.vehicles;
    let random_seed = seeding::mix(
        cfg.train_seed,
        &[seeding::domain::RANDOM_SCHEDULE, t as u64],
    );
    match cfg.scheduler {
        SchedulerKind::Arbvs => {
            scheduler::arbvs_schedule(vehicles, env, params, cfg.rank_cap, cfg.bisection_eps)
        }
        SchedulerKind::Random => scheduler::random_schedule(
            vehicles,
            cfg.random_fraction,
            Payload::Lora {
                rank: cfg.fixed_rank,
            },
            env,
            params,
            random_seed,
        ),
        SchedulerKind::FedavgRandom => scheduler::random_schedule(
            vehicles,
            cfg.random_fraction,
            Payload::Full,
            env,
            params,
            random_seed,
        ),
        SchedulerKind::FedavgOracle => Ok(scheduler::full_participation_schedule(
            vehicles, env, params,
        )),
    }
}

/// Wall time of a synchronous round: the server waits for every scheduled
/// vehicle. A dropped vehicle is written off once it leaves coverage.
pub fn round_duration(decision: &ScheduleDecision) -> f64 {
    let finished = decision.selected.iter().map(|id| {
        let a = &decision.per_vehicle[id];
        a.t_l + a.t_u
    });
    let lost = decision.dropped.iter().map(|id| {
        let a = &decision.per_vehicle[id];
        (a.t_l + a.t_u).min(a.t_st)
    });
    finished.chain(lost).fold(0.0, f64::max)
}

/// Runs every round of `cfg` and returns the per-round metrics and decisions.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_rounds(cfg))
}

fn run_rounds(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let spec = cfg.model_spec()?;
    let env = cfg.scheduler_env()?;
    let params = cfg.objective_params()?;
    let fleet = cfg.fleet();
    let radio = cfg.radio();
    let train_cfg = cfg.train_config();
    let policy = SpawnPolicy {
        target: cfg.population,
    };
    let workload = build_workload(cfg, &spec)?;

    let mut global = GlobalModel::init(&spec, cfg.train_seed);
    let mut scenario = Scenario::initial(&fleet, &radio, cfg.scenario_seed);
    let mut last_eval = trainer::evaluate(&global, &workload.test)?;
    let mut sim_time = 0.0;
    let mut cum_bits = 0u64;
    let mut prev_duration = 0.0;
    let mut out = RunOutput {
        metrics: Vec::with_capacity(cfg.rounds),
        decisions: Vec::with_capacity(cfg.rounds),
    };

    for t in 1..=cfg.rounds {
        if t > 1 {
            scenario =
                scenario.advance(prev_duration, policy, &fleet, &radio, cfg.scenario_seed)?;
        }
        let decision = schedule_round(cfg, &scenario, &env, &params, t)?;
        let selected = decision.selected.clone();

        let (duration, train_loss, bits_round) = if selected.is_empty() {
            (IDLE_STEP_S, None, 0)
        } else {
            let clients: Vec<(VehicleId, &DataPartition)> = selected
                .iter()
                .map(|&id| {
                    (
                        id,
                        &workload.partitions[partition_index(id, workload.partitions.len())],
                    )
                })
                .collect();
            let weights = trainer::uniform_weights(clients.len());
            let (next, losses) = match decision.payload() {
                Payload::Lora { rank } => {
                    let updates = trainer::train_lora_clients(&global, &clients, &train_cfg, rank)?;
                    let losses: Vec<f64> = updates.iter().map(|u| u.local_loss).collect();
                    (trainer::aggregate(&global, &updates, &weights)?, losses)
                }
                Payload::Full => {
                    let updates = trainer::train_full_clients(&global, &clients, &train_cfg)?;
                    let losses: Vec<f64> = updates.iter().map(|u| u.local_loss).collect();
                    (
                        trainer::aggregate_full(&global, &updates, &weights)?,
                        losses,
                    )
                }
            };
            global = next;
            last_eval = trainer::evaluate(&global, &workload.test)?;
            let duration = round_duration(&decision);
            let bits = selected.len() as u64 * env.upload_bits(decision.payload());
            (
                duration,
                Some(losses.iter().sum::<f64>() / losses.len() as f64),
                bits,
            )
        };

        cum_bits += bits_round;
        sim_time += duration;
        prev_duration = duration;
        out.metrics.push(RoundMetrics {
            t,
            r: if decision.full_model {
                0
            } else {
                decision.rank
            },
            s_size: selected.len(),
            selected,
            bw_used_hz: decision.total_bandwidth(),
            uplink_bits_round: bits_round,
            uplink_bits_cum: cum_bits,
            max_delay_s: if train_loss.is_some() { duration } else { 0.0 },
            sim_time_s: sim_time,
            train_loss,
            test_loss: last_eval.loss,
            test_acc: last_eval.accuracy,
            objective: decision.objective,
            empty_round: decision.selected.is_empty(),
            straggler_drops: decision.dropped.len(),
        });
        out.decisions.push(decision);
    }
    Ok(out)
}

/// Simulated time at the end of the first round whose test accuracy reaches
/// `target`, or `None` if no round does.
pub fn time_to_accuracy(metrics: &[RoundMetrics], target: f64) -> Option<f64> {
    metrics
        .iter()
        .find(|m| m.test_acc >= target)
        .map(|m| m.sim_time_s)
}

/// Cumulative uplink bits at the first round reaching `target`.
pub fn bits_to_accuracy(metrics: &[RoundMetrics], target: f64) -> Option<u64> {
    metrics
        .iter()
        .find(|m| m.test_acc >= target)
        .map(|m| m.uplink_bits_cum)
}

pub fn write_metrics<W: Write>(writer: W, metrics: &[RoundMetrics]) -> csv::Result<()> {
    let mut out = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    out.write_record(METRICS_COLUMNS)?;
    for m in metrics {
        out.serialize(MetricsRow::from(m))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(reader: R) -> csv::Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(reader).deserialize().collect()
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_metrics(file).map_err(|source| Error::Csv {
        path: path.into(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.into(),
        source,
    }
}

/// Writes `metrics.csv`, `schedule.jsonl`, `config.echo` and the
/// `plotdata/` tables into `outdir`.
pub fn emit_outputs(
    metrics: &[RoundMetrics],
    decisions: &[ScheduleDecision],
    cfg: &ExperimentConfig,
    outdir: &Path,
) -> Result<()> {
    let plotdir = outdir.join("plotdata");
    fs::create_dir_all(&plotdir).map_err(|e| Error::io(&plotdir, e))?;

    let path = outdir.join("metrics.csv");
    write_metrics(create(&path)?, metrics).map_err(csv_err(&path))?;

    let path = outdir.join("schedule.jsonl");
    let mut w = create(&path)?;
    for d in decisions {
        let line = serde_json::to_string(d).map_err(|e| Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = outdir.join("config.echo");
    fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;

    let path = plotdir.join("accuracy_vs_round.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["t", "test_acc", "test_loss", "train_loss"])
        .map_err(csv_err(&path))?;
    for m in metrics {
        w.serialize((m.t, m.test_acc, m.test_loss, m.train_loss))
            .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = plotdir.join("cost_vs_accuracy.csv");
    let mut rows: Vec<(u64, f64, usize)> = metrics
        .iter()
        .map(|m| (m.uplink_bits_cum, m.test_acc, m.t))
        .collect();
    rows.sort_by_key(|r| r.0);
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["uplink_bits_cum", "test_acc", "t"])
        .map_err(csv_err(&path))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = plotdir.join("time_to_target.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["target", "time_s", "uplink_bits_cum"])
        .map_err(csv_err(&path))?;
    for target in PLOT_TARGETS {
        w.serialize((
            target,
            time_to_accuracy(metrics, target),
            bits_to_accuracy(metrics, target),
        ))
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// One point of the average-gradient bound as a function of rank or of the
/// number of selected vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundPoint {
    pub sweep: &'static str,
    pub r: usize,
    pub s_size: usize,
    pub avg_grad_bound: f64,
    pub gap_term: f64,
}

/// Bound curves over `r in 1..=max_rank` at `|S| = population`, and over
/// `|S| in 1..=population` at `r = max_rank`.
pub fn bound_curves(cfg: &ExperimentConfig, params: &BoundParams) -> Result<Vec<BoundPoint>> {
    let max_rank = lora::rank_upper_bound(&cfg.model_spec()?, cfg.rank_cap)?;
    let mut points = Vec::new();
    for r in 1..=max_rank {
        points.push(BoundPoint {
            sweep: "rank",
            r,
            s_size: cfg.population,
            avg_grad_bound: gap::avg_grad_bound(params, cfg.population, r)?,
            gap_term: params.gap_term(r),
        });
    }
    for s in 1..=cfg.population {
        points.push(BoundPoint {
            sweep: "vehicles",
            r: max_rank,
            s_size: s,
            avg_grad_bound: gap::avg_grad_bound(params, s, max_rank)?,
            gap_term: params.gap_term(max_rank),
        });
    }
    Ok(points)
}

/// First-round test loss and best test loss of a run, the stand-ins for the
/// initial and optimal loss in the bound.
pub fn loss_estimates(metrics: &[RoundMetrics]) -> Option<(f64, f64)> {
    let first = metrics.first()?.test_loss;
    let best = metrics
        .iter()
        .map(|m| m.test_loss)
        .fold(f64::INFINITY, f64::min);
    Some((first, best))
}
