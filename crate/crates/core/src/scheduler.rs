//! Joint rank, bandwidth and vehicle selection.
//!
//! For a fixed rank every vehicle needs a minimum bandwidth so that local
//! training plus upload fits inside its sojourn time. That minimum is found by
//! bisection on the (increasing) Shannon rate. Vehicles are then admitted in
//! ascending order of their minimum bandwidth until the budget is exhausted,
//! which maximizes the number selected. Enumerating the rank and keeping the
//! best objective gives the schedule.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{rank_upper_bound, ModelSpec};
use crate::scenario::{
    channel_gain, full_train_delay, local_train_delay, shannon_rate, sojourn_time, ModelSize,
    RadioConfig, Vehicle, VehicleId,
};
use crate::seeding::{self, domain};

/// Lower end of the bisection interval, in Hz.
pub const BISECTION_FLOOR_HZ: f64 = 1.0;
/// Default relative tolerance of the bisection.
pub const DEFAULT_EPS: f64 = 1e-6;
/// Largest instance [`brute_force_schedule`] accepts.
pub const BRUTE_FORCE_LIMIT: usize = 16;
/// Relative slack the validator allows on rate-derived quantities.
pub const VALIDATION_RTOL: f64 = 1e-9;

/// Everything the delay model needs besides the vehicle itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerEnv {
    pub spec: ModelSpec,
    pub radio: RadioConfig,
    /// Local epochs per round.
    pub epochs: usize,
}

impl SchedulerEnv {
    pub fn model_size(&self) -> ModelSize {
        ModelSize::from(&self.spec)
    }

    /// Parameters one client uploads.
    pub fn upload_params(&self, payload: Payload) -> usize {
        match payload {
            Payload::Lora { rank } => rank * self.spec.lora_params_per_rank(),
            Payload::Full => self.spec.full_params(),
        }
    }

    pub fn upload_bits(&self, payload: Payload) -> u64 {
        self.radio.bit_width as u64 * self.upload_params(payload) as u64
    }

    pub fn train_delay(&self, v: &Vehicle, payload: Payload) -> f64 {
        match payload {
            Payload::Lora { rank } => local_train_delay(v, rank, self.model_size(), self.epochs),
            Payload::Full => full_train_delay(v, self.epochs),
        }
    }
}

/// What a client trains and uploads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Payload {
    Lora {
        rank: usize,
    },
    /// Every weight, as in FedAvg.
    Full,
}

/// Weights of the scheduling objective `eta beta sigma2 / |S| + M^2 (K - L r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParams {
    pub eta: f64,
    pub beta: f64,
    pub sigma2: f64,
    pub m: f64,
    pub k: usize,
    pub l: usize,
    /// `(2 / (eta T)) (E[loss(x1)] - loss*)`; reported, never compared.
    pub constant_term: f64,
}

impl ObjectiveParams {
    pub fn for_spec(spec: &ModelSpec, eta: f64, beta: f64, sigma2: f64, m: f64) -> Self {
        Self {
            eta,
            beta,
            sigma2,
            m,
            k: spec.singular_value_count(),
            l: spec.layer_count(),
            constant_term: 0.0,
        }
    }
}

/// `eta beta sigma2 / s + M^2 (K - L r)`; an empty selection scores `+inf`.
pub fn objective_value(params: &ObjectiveParams, s_size: usize, r: usize) -> f64 {
    if s_size == 0 {
        return f64::INFINITY;
    }
    params.eta * params.beta * params.sigma2 / s_size as f64
        + params.m * params.m * (params.k as f64 - (params.l * r) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Infeasibility {
    /// Local training alone does not fit in the sojourn time.
    TrainingExceedsSojourn,
    /// Even the whole budget cannot carry the required rate.
    RateUnreachable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MinBandwidth {
    Feasible(f64),
    Infeasible(Infeasibility),
}

impl MinBandwidth {
    pub fn hz(self) -> Option<f64> {
        match self {
            MinBandwidth::Feasible(b) => Some(b),
            MinBandwidth::Infeasible(_) => None,
        }
    }
}

/// Smallest `b` in `[1 Hz, budget]` with `shannon_rate(rx_power, b) >=
/// required_rate`, to relative tolerance `eps`.
pub fn min_bandwidth_for_rate(
    rx_power: f64,
    required_rate: f64,
    noise_psd: f64,
    budget: f64,
    eps: f64,
) -> MinBandwidth {
    let rate = |b: f64| shannon_rate(rx_power, b, noise_psd);
    if rate(budget) < required_rate || rate(budget).is_nan() {
        return MinBandwidth::Infeasible(Infeasibility::RateUnreachable);
    }
    let mut lo = BISECTION_FLOOR_HZ.min(budget);
    if rate(lo) >= required_rate {
        return MinBandwidth::Feasible(lo);
    }
    let mut hi = budget;
    // Invariant: rate(lo) < required <= rate(hi).
    while hi - lo > eps * hi {
        let mid = 0.5 * (lo + hi);
        if rate(mid) >= required_rate {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    MinBandwidth::Feasible(hi)
}

/// Rate needed to upload `payload` in the time left after training, or
/// `None` when training alone overruns the sojourn time.
pub fn required_rate(v: &Vehicle, payload: Payload, env: &SchedulerEnv) -> Option<f64> {
    let slack = sojourn_time(v, &env.radio) - env.train_delay(v, payload);
    (slack > 0.0).then(|| env.upload_bits(payload) as f64 / slack)
}

pub fn min_bandwidth(v: &Vehicle, rank: usize, env: &SchedulerEnv, eps: f64) -> MinBandwidth {
    min_bandwidth_payload(v, Payload::Lora { rank }, env, eps)
}

fn min_bandwidth_payload(
    v: &Vehicle,
    payload: Payload,
    env: &SchedulerEnv,
    eps: f64,
) -> MinBandwidth {
    let Some(required) = required_rate(v, payload, env) else {
        return MinBandwidth::Infeasible(Infeasibility::TrainingExceedsSojourn);
    };
    let rx = v.tx_power * channel_gain(v, &env.radio);
    min_bandwidth_for_rate(
        rx,
        required,
        env.radio.noise_psd,
        env.radio.total_bandwidth,
        eps,
    )
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Selection {
    pub selected: Vec<VehicleId>,
    pub total_bandwidth: f64,
}

/// Admits feasible vehicles by ascending minimum bandwidth (ties by id) and
/// stops before the first one that would overrun `budget`.
pub fn greedy_select(b_mins: &[(VehicleId, MinBandwidth)], budget: f64) -> Selection {
    let mut feasible: Vec<(VehicleId, f64)> = b_mins
        .iter()
        .filter_map(|&(id, b)| b.hz().map(|hz| (id, hz)))
        .collect();
    feasible.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let mut selection = Selection::default();
    for (id, b) in feasible {
        if selection.total_bandwidth + b > budget {
            break;
        }
        selection.total_bandwidth += b;
        selection.selected.push(id);
    }
    selection
}

/// Per-vehicle view of a decision. Delays are evaluated at the bandwidth the
/// vehicle was given, or at its minimum bandwidth if it was not selected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleAssessment {
    #[serde(with = "nullable_f64")]
    pub b_min: f64,
    pub t_l: f64,
    #[serde(with = "nullable_f64")]
    pub t_u: f64,
    #[serde(with = "nullable_f64")]
    pub t_st: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    /// 0 when nothing was scheduled or the payload is the full model.
    pub rank: usize,
    /// Vehicles that train and upload this round, ascending id.
    pub selected: Vec<VehicleId>,
    /// Hz per vehicle holding spectrum, including dropped stragglers.
    pub bandwidth: BTreeMap<VehicleId, f64>,
    #[serde(with = "nullable_f64")]
    pub objective: f64,
    pub per_vehicle: BTreeMap<VehicleId, VehicleAssessment>,
    /// Given bandwidth but cannot finish before leaving coverage.
    #[serde(default)]
    pub dropped: Vec<VehicleId>,
    /// Uploads carry every weight rather than LoRA factors.
    #[serde(default)]
    pub full_model: bool,
    /// No vehicle could be scheduled.
    #[serde(default)]
    pub empty: bool,
}

impl ScheduleDecision {
    pub fn empty() -> Self {
        Self {
            rank: 0,
            selected: Vec::new(),
            bandwidth: BTreeMap::new(),
            objective: f64::INFINITY,
            per_vehicle: BTreeMap::new(),
            dropped: Vec::new(),
            full_model: false,
            empty: true,
        }
    }

    pub fn payload(&self) -> Payload {
        if self.full_model {
            Payload::Full
        } else {
            Payload::Lora { rank: self.rank }
        }
    }

    pub fn total_bandwidth(&self) -> f64 {
        self.bandwidth.values().sum()
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "rank {}  selected {}  bandwidth {:.3} MHz  objective {}",
            self.rank,
            self.selected.len(),
            self.total_bandwidth() / 1e6,
            self.objective
        );
        let _ = writeln!(
            out,
            "{:>6} {:>9} {:>12} {:>10} {:>10} {:>10} {:>9}",
            "id", "status", "b_min_hz", "t_l_s", "t_u_s", "t_st_s", "b_hz"
        );
        for (id, a) in &self.per_vehicle {
            let status = if self.selected.contains(id) {
                "selected"
            } else if self.dropped.contains(id) {
                "dropped"
            } else if a.feasible {
                "idle"
            } else {
                "infeasible"
            };
            let b = self.bandwidth.get(id).copied().unwrap_or(0.0);
            let _ = writeln!(
                out,
                "{:>6} {:>9} {:>12.1} {:>10.4} {:>10.4} {:>10.3} {:>9.1}",
                id, status, a.b_min, a.t_l, a.t_u, a.t_st, b
            );
        }
        out
    }
}

/// (objective, vehicle count, rank, bandwidth used)
type CandidateKey = (f64, usize, usize, f64);

/// Candidate ordering: lower objective, then more vehicles, then higher
/// rank, then less bandwidth.
fn better(a: CandidateKey, b: CandidateKey) -> bool {
    a.0.total_cmp(&b.0)
        .then(b.1.cmp(&a.1))
        .then(b.2.cmp(&a.2))
        .then(a.3.total_cmp(&b.3))
        == Ordering::Less
}

struct Prepared {
    id: VehicleId,
    rx_power: f64,
    t_st: f64,
}

fn prepare(vehicles: &[Vehicle], env: &SchedulerEnv) -> Vec<Prepared> {
    vehicles
        .iter()
        .map(|v| Prepared {
            id: v.id,
            rx_power: v.tx_power * channel_gain(v, &env.radio),
            t_st: sojourn_time(v, &env.radio),
        })
        .collect()
}

fn min_bandwidths(
    vehicles: &[Vehicle],
    prepared: &[Prepared],
    payload: Payload,
    env: &SchedulerEnv,
    eps: f64,
) -> Vec<(VehicleId, MinBandwidth, f64)> {
    let bits = env.upload_bits(payload) as f64;
    vehicles
        .iter()
        .zip(prepared)
        .map(|(v, p)| {
            let t_l = env.train_delay(v, payload);
            let slack = p.t_st - t_l;
            let b = if slack > 0.0 {
                min_bandwidth_for_rate(
                    p.rx_power,
                    bits / slack,
                    env.radio.noise_psd,
                    env.radio.total_bandwidth,
                    eps,
                )
            } else {
                MinBandwidth::Infeasible(Infeasibility::TrainingExceedsSojourn)
            };
            (p.id, b, t_l)
        })
        .collect()
}

fn assess(
    prepared: &Prepared,
    b_min: MinBandwidth,
    t_l: f64,
    given: Option<f64>,
    bits: f64,
    radio: &RadioConfig,
) -> VehicleAssessment {
    let at = given.or(b_min.hz());
    let t_u = at
        .map(|b| bits / shannon_rate(prepared.rx_power, b, radio.noise_psd))
        .unwrap_or(f64::INFINITY);
    VehicleAssessment {
        b_min: b_min.hz().unwrap_or(f64::INFINITY),
        t_l,
        t_u,
        t_st: prepared.t_st,
        feasible: b_min.hz().is_some(),
    }
}

fn build_decision(
    rank: usize,
    selected: &[VehicleId],
    rows: &[(VehicleId, MinBandwidth, f64)],
    prepared: &[Prepared],
    objective: f64,
    env: &SchedulerEnv,
) -> ScheduleDecision {
    let bits = env.upload_bits(Payload::Lora { rank }) as f64;
    let mut bandwidth = BTreeMap::new();
    let mut per_vehicle = BTreeMap::new();
    for ((id, b_min, t_l), p) in rows.iter().zip(prepared) {
        let given = selected.contains(id).then(|| b_min.hz()).flatten();
        if let Some(b) = given {
            bandwidth.insert(*id, b);
        }
        per_vehicle.insert(*id, assess(p, *b_min, *t_l, given, bits, &env.radio));
    }
    let mut selected = selected.to_vec();
    selected.sort();
    ScheduleDecision {
        rank,
        selected,
        bandwidth,
        objective,
        per_vehicle,
        dropped: Vec::new(),
        full_model: false,
        empty: false,
    }
}

/// Enumerates ranks `1..=rank_upper_bound(spec, rank_cap)`; at each rank
/// every vehicle gets its minimum bandwidth and the greedy pass picks the
/// largest admissible set. Returns the best (rank, set) by objective.
pub fn arbvs_schedule(
    vehicles: &[Vehicle],
    env: &SchedulerEnv,
    params: &ObjectiveParams,
    rank_cap: usize,
    eps: f64,
) -> Result<ScheduleDecision> {
    let max_rank = rank_upper_bound(&env.spec, rank_cap)?;
    let prepared = prepare(vehicles, env);

    let mut best: Option<(CandidateKey, usize, Selection, Vec<_>)> = None;
    for rank in 1..=max_rank {
        let rows = min_bandwidths(vehicles, &prepared, Payload::Lora { rank }, env, eps);
        let pairs: Vec<_> = rows.iter().map(|&(id, b, _)| (id, b)).collect();
        let selection = greedy_select(&pairs, env.radio.total_bandwidth);
        if selection.selected.is_empty() {
            continue;
        }
        let s = selection.selected.len();
        let key = (
            objective_value(params, s, rank),
            s,
            rank,
            selection.total_bandwidth,
        );
        if best.as_ref().is_none_or(|(k, ..)| better(key, *k)) {
            best = Some((key, rank, selection, rows));
        }
    }

    Ok(match best {
        Some(((objective, ..), rank, selection, rows)) => {
            build_decision(rank, &selection.selected, &rows, &prepared, objective, env)
        }
        None => ScheduleDecision::empty(),
    })
}

/// Exhaustive search over rank and every subset of vehicles, each member
/// given its minimum bandwidth. Exponential; for validation only.
pub fn brute_force_schedule(
    vehicles: &[Vehicle],
    env: &SchedulerEnv,
    params: &ObjectiveParams,
    rank_cap: usize,
    eps: f64,
) -> Result<ScheduleDecision> {
    if vehicles.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::TooManyVehicles {
            count: vehicles.len(),
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if vehicles.is_empty() {
        return Ok(ScheduleDecision::empty());
    }
    let max_rank = rank_upper_bound(&env.spec, rank_cap)?;
    let prepared = prepare(vehicles, env);
    let budget = env.radio.total_bandwidth;

    let mut best: Option<(CandidateKey, usize, Vec<VehicleId>, Vec<_>)> = None;
    for rank in 1..=max_rank {
        let rows = min_bandwidths(vehicles, &prepared, Payload::Lora { rank }, env, eps);
        for mask in 1u32..(1u32 << vehicles.len()) {
            let mut total = 0.0;
            let mut members = Vec::new();
            let mut feasible = true;
            for (i, (id, b, _)) in rows.iter().enumerate() {
                if mask & (1 << i) == 0 {
                    continue;
                }
                match b.hz() {
                    Some(hz) => {
                        total += hz;
                        members.push(*id);
                    }
                    None => {
                        feasible = false;
                        break;
                    }
                }
            }
            if !feasible || total > budget {
                continue;
            }
            let s = members.len();
            let key = (objective_value(params, s, rank), s, rank, total);
            if best.as_ref().is_none_or(|(k, ..)| better(key, *k)) {
                best = Some((key, rank, members, rows.clone()));
            }
        }
    }

    Ok(match best {
        Some(((objective, ..), rank, members, rows)) => {
            build_decision(rank, &members, &rows, &prepared, objective, env)
        }
        None => ScheduleDecision::empty(),
    })
}

/// Baseline: a seeded uniform sample of `ceil(fraction |U|)` vehicles splits
/// the budget evenly. Sampled vehicles that cannot train and upload before
/// leaving coverage at that share are marked dropped; they hold spectrum but
/// contribute nothing.
pub fn random_schedule(
    vehicles: &[Vehicle],
    fraction: f64,
    payload: Payload,
    env: &SchedulerEnv,
    params: &ObjectiveParams,
    seed: u64,
) -> Result<ScheduleDecision> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "random fraction must be in (0, 1], got {fraction}"
        )));
    }
    if let Payload::Lora { rank } = payload {
        env.spec.check_rank(rank)?;
    }
    if vehicles.is_empty() {
        return Ok(ScheduleDecision::empty());
    }
    let count = ((fraction * vehicles.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let count = count.min(vehicles.len());
    let mut rng = seeding::stream(seed, &[domain::RANDOM_SCHEDULE]);
    let mut picked = index::sample(&mut rng, vehicles.len(), count).into_vec();
    picked.sort_by_key(|&i| vehicles[i].id);

    let share = env.radio.total_bandwidth / count as f64;
    let bits = env.upload_bits(payload) as f64;
    let prepared = prepare(vehicles, env);

    let mut decision = ScheduleDecision {
        rank: match payload {
            Payload::Lora { rank } => rank,
            Payload::Full => 0,
        },
        full_model: payload == Payload::Full,
        ..ScheduleDecision::empty()
    };
    decision.empty = false;
    for i in picked {
        let (v, p) = (&vehicles[i], &prepared[i]);
        let t_l = env.train_delay(v, payload);
        let b_min = min_bandwidth_payload(v, payload, env, DEFAULT_EPS);
        let t_u = bits / shannon_rate(p.rx_power, share, env.radio.noise_psd);
        decision.bandwidth.insert(v.id, share);
        decision.per_vehicle.insert(
            v.id,
            VehicleAssessment {
                b_min: b_min.hz().unwrap_or(f64::INFINITY),
                t_l,
                t_u,
                t_st: p.t_st,
                feasible: b_min.hz().is_some(),
            },
        );
        if t_l + t_u <= p.t_st {
            decision.selected.push(v.id);
        } else {
            decision.dropped.push(v.id);
        }
    }
    decision.objective = match payload {
        Payload::Lora { rank } => objective_value(params, decision.selected.len(), rank),
        Payload::Full if decision.selected.is_empty() => f64::INFINITY,
        Payload::Full => params.eta * params.beta * params.sigma2 / decision.selected.len() as f64,
    };
    Ok(decision)
}

/// Every vehicle trains the full model and shares the budget evenly, with no
/// deadline. Reference point for what unconstrained participation achieves.
pub fn full_participation_schedule(
    vehicles: &[Vehicle],
    env: &SchedulerEnv,
    params: &ObjectiveParams,
) -> ScheduleDecision {
    if vehicles.is_empty() {
        return ScheduleDecision::empty();
    }
    let share = env.radio.total_bandwidth / vehicles.len() as f64;
    let bits = env.upload_bits(Payload::Full) as f64;
    let prepared = prepare(vehicles, env);
    let mut decision = ScheduleDecision {
        full_model: true,
        empty: false,
        objective: params.eta * params.beta * params.sigma2 / vehicles.len() as f64,
        ..ScheduleDecision::empty()
    };
    let mut ids: Vec<_> = vehicles.iter().zip(&prepared).collect();
    ids.sort_by_key(|(v, _)| v.id);
    for (v, p) in ids {
        decision.selected.push(v.id);
        decision.bandwidth.insert(v.id, share);
        decision.per_vehicle.insert(
            v.id,
            VehicleAssessment {
                b_min: f64::INFINITY,
                t_l: env.train_delay(v, Payload::Full),
                t_u: bits / shannon_rate(p.rx_power, share, env.radio.noise_psd),
                t_st: p.t_st,
                feasible: true,
            },
        );
    }
    decision
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// C1/C2: selection is not a set of distinct known vehicles.
    Selection(String),
    /// C3
    BudgetExceeded { total: f64, budget: f64 },
    /// C4
    BandwidthOutOfRange { id: VehicleId, bandwidth: f64 },
    /// C5
    Deadline {
        id: VehicleId,
        delay: f64,
        sojourn: f64,
    },
}

/// Independent check of a decision against the problem constraints. Rates,
/// delays and sojourn times are recomputed from the raw vehicle records.
///
/// `deadline` switches the per-vehicle C5 check; full-participation
/// reference decisions are exempt from it.
pub fn validate_decision(
    decision: &ScheduleDecision,
    vehicles: &[Vehicle],
    env: &SchedulerEnv,
    deadline: bool,
) -> std::result::Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let budget = env.radio.total_bandwidth;
    let by_id: BTreeMap<VehicleId, &Vehicle> = vehicles.iter().map(|v| (v.id, v)).collect();

    let mut seen = std::collections::BTreeSet::new();
    for id in &decision.selected {
        if !seen.insert(*id) {
            violations.push(Violation::Selection(format!("vehicle {id} selected twice")));
        }
        if !by_id.contains_key(id) {
            violations.push(Violation::Selection(format!("unknown vehicle {id}")));
        }
        if decision.dropped.contains(id) {
            violations.push(Violation::Selection(format!(
                "vehicle {id} both selected and dropped"
            )));
        }
        if !decision.bandwidth.contains_key(id) {
            violations.push(Violation::Selection(format!(
                "vehicle {id} has no bandwidth"
            )));
        }
    }

    let total: f64 = decision.bandwidth.values().sum();
    if total > budget * (1.0 + 1e-12) {
        violations.push(Violation::BudgetExceeded { total, budget });
    }
    for (&id, &b) in &decision.bandwidth {
        if !(0.0..=budget).contains(&b) {
            violations.push(Violation::BandwidthOutOfRange { id, bandwidth: b });
        }
    }

    if deadline && !decision.selected.is_empty() {
        let model = ModelSize::from(&env.spec);
        let params = if decision.full_model {
            model.full_params
        } else {
            decision.rank * model.lora_params_per_rank
        };
        for id in &decision.selected {
            let (Some(v), Some(&b)) = (by_id.get(id), decision.bandwidth.get(id)) else {
                continue;
            };
            let r = env.radio;
            let distance_km = v.position[0].hypot(v.position[1]).max(1.0) / 1000.0;
            let path_loss = r.path_loss_db(distance_km);
            let mut gain = 10f64.powf(-path_loss / 10.0);
            if r.fading != crate::scenario::Fading::Off {
                gain = channel_gain(v, &r);
            }
            let snr = v.tx_power * gain / (b * r.noise_psd);
            let rate = b * (1.0 + snr).log2();
            let upload = r.bit_width as f64 * params as f64 / rate;
            let train = if decision.full_model {
                env.epochs as f64 * v.dataset_size as f64 * v.cycles_per_sample / v.cpu_freq
            } else {
                v.gamma
                    * env.epochs as f64
                    * v.dataset_size as f64
                    * v.cycles_per_sample
                    * params as f64
                    / (v.cpu_freq * model.full_params as f64)
            };
            let sojourn =
                crate::scenario::exit_distance(v.position, v.heading, r.coverage_radius) / v.speed;
            let delay = train + upload;
            if delay > sojourn * (1.0 + VALIDATION_RTOL) {
                violations.push(Violation::Deadline {
                    id: *id,
                    delay,
                    sojourn,
                });
            }
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Serializes non-finite floats as JSON `null` and reads `null` back as
/// `+inf`.
mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}
