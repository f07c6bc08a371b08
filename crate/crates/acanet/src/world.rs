//! Synthetic on-demand food-delivery world.
//!
//! Generates order histories for one delivery district and derives every
//! model input and supervision target from them with exact oracles: the
//! global graph over the full history, per-minute ongoing graphs of open
//! orders, supply/environment feature vectors, the pressure label (mean
//! delivery time of orders created in the next five minutes), and the truth
//! future adjacency (order count × mean delivery time per directed AOI
//! pair in that window).
//!
//! Delivery time model per order:
//!
//! ```text
//! t = prep(src) + distance(src, dst) / rider_speed * congestion(minute)
//!   + QUEUE_DELAY_PER_LOAD_S * open_orders / riders(minute)
//!   + gaussian_noise(sigma)            floored at MIN_DELIVERY_TIME_S
//! ```
//!
//! All randomness flows from the config seed through separate ChaCha
//! streams (layout, arrivals, pair choice, noise, demand drift), so two
//! worlds differing only in spatial pattern see identical arrival counts —
//! which is what makes the matched-volume scenario comparison meaningful.

use crate::graph::{
    AoiNode, Dataset, FlowEdge, FlowGraph, GraphKind, Sample, SupplyEnvVector,
};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Node feature width written to dataset headers.
pub const F_AOI: u32 = 8;
/// Supply/environment feature width written to dataset headers.
pub const N_F: u32 = 12;
/// Ongoing graphs cover open orders created within this many past minutes.
pub const ONGOING_WINDOW_MIN: u32 = 30;
/// Queue delay seconds added per unit of load ratio (open orders / riders).
pub const QUEUE_DELAY_PER_LOAD_S: f64 = 90.0;
/// Hard floor for any delivery time.
pub const MIN_DELIVERY_TIME_S: f64 = 60.0;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("history is empty")]
    EmptyHistory,
    #[error("invalid split {0:?}: fractions must be nonnegative and sum to 1")]
    InvalidSplit([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialPattern {
    /// AOIs on a ring; long cross-ring hauls dominate.
    Annular,
    /// AOIs on an astroid curve; mass concentrates near the cusps and the
    /// center, shortening typical hauls at matched order volume.
    Astroid,
    /// AOIs uniform in a square.
    Uniform,
    /// Four clusters with a slowly drifting hot-cluster demand mix.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Global AOI count.
    pub n_aoi: u32,
    pub pattern: SpatialPattern,
    /// Per-minute Poisson arrival intensity, cycled over its length.
    pub arrival_rate_profile: Vec<f64>,
    /// Per-minute on-duty rider counts, cycled.
    pub rider_count_profile: Vec<u32>,
    /// Meters per second.
    pub rider_speed: f64,
    /// Per-minute travel-time multiplier, >= 1, cycled.
    pub congestion_profile: Vec<f64>,
    /// Gaussian delivery-time noise in seconds.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Label window length in minutes.
    pub horizon_minutes: u32,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let fail = |msg: String| Err(WorldError::InvalidConfig(msg));
        if self.n_aoi < 2 {
            return fail(format!("n_aoi must be >= 2, got {}", self.n_aoi));
        }
        if self.horizon_minutes < 1 {
            return fail("horizon_minutes must be >= 1".into());
        }
        if self.arrival_rate_profile.is_empty()
            || self.arrival_rate_profile.iter().any(|&v| !(v > 0.0))
        {
            return fail("arrival_rate_profile must be nonempty and strictly positive".into());
        }
        if self.rider_count_profile.is_empty() || self.rider_count_profile.iter().any(|&v| v == 0)
        {
            return fail("rider_count_profile must be nonempty and strictly positive".into());
        }
        if self.congestion_profile.is_empty() || self.congestion_profile.iter().any(|&v| v < 1.0) {
            return fail("congestion_profile must be nonempty with multipliers >= 1".into());
        }
        if !(self.rider_speed > 0.0) {
            return fail("rider_speed must be positive".into());
        }
        if self.noise_sigma < 0.0 {
            return fail("noise_sigma must be nonnegative".into());
        }
        Ok(())
    }

    /// Desk-scale default: mixed four-cluster city, lunch/dinner demand
    /// peaks, matched rider ramp-up, mild congestion waves.
    pub fn default_world(seed: u64) -> Self {
        WorldConfig {
            n_aoi: 24,
            pattern: SpatialPattern::Mixed,
            arrival_rate_profile: day_curve(&[
                (0, 2.0),
                (420, 3.0),
                (660, 9.0),
                (780, 5.0),
                (1050, 8.5),
                (1200, 4.0),
                (1380, 2.5),
            ]),
            rider_count_profile: day_curve(&[
                (0, 30.0),
                (420, 34.0),
                (660, 52.0),
                (780, 40.0),
                (1050, 50.0),
                (1200, 36.0),
                (1380, 30.0),
            ])
            .into_iter()
            .map(|v| v.round() as u32)
            .collect(),
            rider_speed: 5.0,
            congestion_profile: day_curve(&[
                (0, 1.0),
                (480, 1.35),
                (600, 1.1),
                (1020, 1.5),
                (1140, 1.15),
                (1320, 1.0),
            ]),
            noise_sigma: 25.0,
            seed,
            horizon_minutes: 5,
        }
    }

    /// Ring-city scenario used for the matched-volume pressure comparison.
    pub fn annular_preset(seed: u64) -> Self {
        WorldConfig {
            pattern: SpatialPattern::Annular,
            ..Self::default_world(seed)
        }
    }

    /// Astroid-city counterpart of [`WorldConfig::annular_preset`]; the two
    /// share every profile and every arrival draw.
    pub fn astroid_preset(seed: u64) -> Self {
        WorldConfig {
            pattern: SpatialPattern::Astroid,
            ..Self::default_world(seed)
        }
    }
}

/// Piecewise-linear day curve through (minute, value) knots, cycled at 1440.
fn day_curve(knots: &[(u32, f64)]) -> Vec<f64> {
    assert!(!knots.is_empty());
    let mut out = vec![0.0; 1440];
    let n = knots.len();
    for (i, slot) in out.iter_mut().enumerate() {
        let m = i as f64;
        // Find surrounding knots, wrapping around midnight.
        let mut prev = knots[n - 1];
        let mut next = knots[0];
        for w in 0..n {
            let (km, _) = knots[w];
            if km as f64 <= m {
                prev = knots[w];
                next = knots[(w + 1) % n];
            }
        }
        let (m0, v0) = (prev.0 as f64, prev.1);
        let (mut m1, v1) = (next.0 as f64, next.1);
        if m1 <= m0 {
            m1 += 1440.0;
        }
        let mut mm = m;
        if mm < m0 {
            mm += 1440.0;
        }
        let t = (mm - m0) / (m1 - m0);
        *slot = v0 + (v1 - v0) * t;
    }
    out
}

/// One generated order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderEvent {
    pub create_minute: u32,
    pub src_aoi: u32,
    pub dst_aoi: u32,
    /// Seconds, always >= MIN_DELIVERY_TIME_S.
    pub delivery_time: f64,
}

impl OrderEvent {
    /// Fractional minute at which the order is delivered.
    pub fn completion_minute(&self) -> f64 {
        self.create_minute as f64 + self.delivery_time / 60.0
    }
}

const MIXED_CLUSTERS: usize = 4;
const MIXED_BLOCK_MIN: u32 = 15;

/// Static per-AOI geometry and attributes derived from the config seed.
#[derive(Debug, Clone)]
struct AoiLayout {
    positions: Vec<(f64, f64)>,
    prep_time: Vec<f64>,
    difficulty: Vec<f64>,
    cluster: Vec<usize>,
}

/// A configured world: layout plus generation and oracle operations.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    layout: AoiLayout,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self, WorldError> {
        config.validate()?;
        let layout = build_layout(&config);
        Ok(World { config, layout })
    }

    pub fn position(&self, aoi: u32) -> (f64, f64) {
        self.layout.positions[aoi as usize]
    }

    pub fn prep_time(&self, aoi: u32) -> f64 {
        self.layout.prep_time[aoi as usize]
    }

    pub fn distance(&self, src: u32, dst: u32) -> f64 {
        let (x0, y0) = self.position(src);
        let (x1, y1) = self.position(dst);
        ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt()
    }

    fn arrival_rate(&self, minute: u32) -> f64 {
        let p = &self.config.arrival_rate_profile;
        p[minute as usize % p.len()]
    }

    fn riders(&self, minute: u32) -> u32 {
        let p = &self.config.rider_count_profile;
        p[minute as usize % p.len()]
    }

    fn congestion(&self, minute: u32) -> f64 {
        let p = &self.config.congestion_profile;
        p[minute as usize % p.len()]
    }

    /// Generates the full order history, minute by minute.
    pub fn generate_history(&self, total_minutes: u32) -> Vec<OrderEvent> {
        let seed = self.config.seed;
        let mut arrivals_rng = stream_rng(seed, 2);
        let mut pair_rng = stream_rng(seed, 3);
        let mut noise_rng = stream_rng(seed, 4);
        let demand = DemandMix::new(&self.config, total_minutes);

        let mut events: Vec<OrderEvent> = Vec::new();
        // Completion minutes of currently open orders, for queue load.
        let mut open: Vec<f64> = Vec::new();

        for minute in 0..total_minutes {
            let now = minute as f64;
            open.retain(|&c| c > now);

            let lambda = self.arrival_rate(minute);
            let poisson = Poisson::new(lambda).expect("validated positive rate");
            let count = poisson.sample(&mut arrivals_rng) as usize;

            for _ in 0..count {
                let (src, dst) = demand.draw_pair(self, minute, &mut pair_rng);
                let riders = self.riders(minute).max(1) as f64;
                let load_ratio = open.len() as f64 / riders;
                let queue = QUEUE_DELAY_PER_LOAD_S * load_ratio;
                let travel = self.distance(src, dst) / self.config.rider_speed
                    * self.congestion(minute);
                let noise = if self.config.noise_sigma > 0.0 {
                    Normal::new(0.0, self.config.noise_sigma)
                        .expect("validated sigma")
                        .sample(&mut noise_rng)
                } else {
                    0.0
                };
                let delivery_time =
                    (self.prep_time(src) + travel + queue + noise).max(MIN_DELIVERY_TIME_S);
                open.push(minute as f64 + delivery_time / 60.0);
                events.push(OrderEvent {
                    create_minute: minute,
                    src_aoi: src,
                    dst_aoi: dst,
                    delivery_time,
                });
            }
        }
        events
    }

    fn node_features(&self, id: u32, volume_per_day: f64) -> Vec<f64> {
        let (x, y) = self.position(id);
        let mut f = vec![
            self.prep_time(id),
            self.layout.difficulty[id as usize],
            volume_per_day,
            x,
            y,
        ];
        f.resize(F_AOI as usize, 0.0);
        f
    }

    /// Aggregates the whole history into the global graph: every AOI that
    /// ever appears, mean daily order volume and mean delivery time per
    /// directed pair.
    pub fn build_global_graph(
        &self,
        history: &[OrderEvent],
        total_minutes: u32,
    ) -> Result<FlowGraph, WorldError> {
        if history.is_empty() {
            return Err(WorldError::EmptyHistory);
        }
        let days = f64::from(total_minutes) / 1440.0;
        let mut volume: BTreeMap<u32, f64> = BTreeMap::new();
        let mut pair: BTreeMap<(u32, u32), Vec<f64>> = BTreeMap::new();
        for e in history {
            *volume.entry(e.src_aoi).or_insert(0.0) += 1.0;
            volume.entry(e.dst_aoi).or_insert(0.0);
            pair.entry((e.src_aoi, e.dst_aoi))
                .or_default()
                .push(e.delivery_time);
        }
        let nodes = volume
            .iter()
            .map(|(&id, &vol)| AoiNode {
                id,
                features: self.node_features(id, vol / days),
            })
            .collect();
        let edges = pair
            .into_iter()
            .map(|((src, dst), mut times)| {
                // Canonical summation order keeps the graph bit-identical
                // under permutations of the history.
                times.sort_by(f64::total_cmp);
                let count = times.len() as f64;
                FlowEdge {
                    src,
                    dst,
                    order_count: count / days,
                    avg_delivery_time: times.iter().sum::<f64>() / count,
                }
            })
            .collect();
        Ok(FlowGraph {
            kind: GraphKind::Global,
            nodes,
            edges,
        })
    }

    /// Open orders created within the last [`ONGOING_WINDOW_MIN`] minutes
    /// and still undelivered at `minute`. Edge attributes are real-time:
    /// open order count and mean elapsed seconds since creation.
    pub fn build_ongoing_graph(&self, history: &[OrderEvent], minute: u32) -> FlowGraph {
        let from = minute.saturating_sub(ONGOING_WINDOW_MIN);
        let mut per_node_volume: BTreeMap<u32, f64> = BTreeMap::new();
        let mut pair: BTreeMap<(u32, u32), (f64, f64)> = BTreeMap::new();
        for e in history {
            if e.create_minute < from || e.create_minute >= minute {
                continue;
            }
            if e.completion_minute() <= minute as f64 {
                continue;
            }
            let elapsed = (minute - e.create_minute) as f64 * 60.0;
            *per_node_volume.entry(e.src_aoi).or_insert(0.0) += 1.0;
            per_node_volume.entry(e.dst_aoi).or_insert(0.0);
            let slot = pair.entry((e.src_aoi, e.dst_aoi)).or_insert((0.0, 0.0));
            slot.0 += 1.0;
            slot.1 += elapsed;
        }
        let nodes = per_node_volume
            .iter()
            .map(|(&id, &vol)| AoiNode {
                id,
                features: self.node_features(id, vol),
            })
            .collect();
        let edges = pair
            .into_iter()
            .map(|((src, dst), (count, elapsed_sum))| FlowEdge {
                src,
                dst,
                order_count: count,
                avg_delivery_time: elapsed_sum / count,
            })
            .collect();
        FlowGraph {
            kind: GraphKind::Ongoing,
            nodes,
            edges,
        }
    }

    /// Oracle label and truth adjacency for the window
    /// `[minute, minute + horizon)`. `None` when the window has no orders.
    pub fn label_and_truth(
        &self,
        history: &[OrderEvent],
        minute: u32,
        global: &FlowGraph,
    ) -> Option<(f64, Vec<Vec<f64>>)> {
        let end = minute + self.config.horizon_minutes;
        let mut sum = 0.0;
        let mut n = 0usize;
        let m = global.nodes.len();
        let index: BTreeMap<u32, usize> = global
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| (node.id, i))
            .collect();
        let mut pair: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
        for e in history {
            if e.create_minute < minute || e.create_minute >= end {
                continue;
            }
            sum += e.delivery_time;
            n += 1;
            if let (Some(&i), Some(&j)) = (index.get(&e.src_aoi), index.get(&e.dst_aoi)) {
                let slot = pair.entry((i, j)).or_insert((0.0, 0.0));
                slot.0 += 1.0;
                slot.1 += e.delivery_time;
            }
        }
        if n == 0 {
            return None;
        }
        let mut a_truth = vec![vec![0.0; m]; m];
        for ((i, j), (count, time_sum)) in pair {
            a_truth[i][j] = count * (time_sum / count);
        }
        Some((sum / n as f64, a_truth))
    }

    /// Supply/environment features observable at the start of `minute`.
    pub fn supply_env_vector(&self, history: &[OrderEvent], minute: u32) -> SupplyEnvVector {
        let now = minute as f64;
        let riders = f64::from(self.riders(minute));
        let mut open = 0.0;
        let mut open_elapsed_sum = 0.0;
        let mut recent_created = 0.0;
        let mut completed_recent = 0.0;
        let mut completed_time_sum = 0.0;
        for e in history {
            if e.create_minute >= minute {
                continue;
            }
            let completion = e.completion_minute();
            if completion > now {
                open += 1.0;
                open_elapsed_sum += (now - e.create_minute as f64) * 60.0;
            }
            if e.create_minute + 5 >= minute {
                recent_created += 1.0;
            }
            if completion <= now && completion > now - 15.0 {
                completed_recent += 1.0;
                completed_time_sum += e.delivery_time;
            }
        }
        let day_phase = 2.0 * std::f64::consts::PI * f64::from(minute % 1440) / 1440.0;
        let values = vec![
            riders,
            open,
            (riders - open).max(0.0),
            open / riders.max(1.0),
            self.congestion(minute),
            recent_created / 5.0,
            day_phase.sin(),
            day_phase.cos(),
            if open > 0.0 { open_elapsed_sum / open } else { 0.0 },
            if completed_recent > 0.0 {
                completed_time_sum / completed_recent
            } else {
                0.0
            },
            completed_recent,
            f64::from(minute % 1440) / 1440.0,
        ];
        debug_assert_eq!(values.len(), N_F as usize);
        SupplyEnvVector { values }
    }

    /// Past time-slice graphs for the sequence-baseline payload: slice `j`
    /// is the open-order graph at `minute - j` over the full global node
    /// set, newest first.
    pub fn sequence_slices(
        &self,
        history: &[OrderEvent],
        global: &FlowGraph,
        minute: u32,
        k: usize,
    ) -> Vec<FlowGraph> {
        (0..k as u32)
            .map(|j| {
                let at = minute.saturating_sub(j);
                let open = self.build_ongoing_graph(history, at);
                FlowGraph {
                    kind: GraphKind::Ongoing,
                    nodes: global.nodes.clone(),
                    edges: open.edges,
                }
            })
            .collect()
    }

    /// Generates a world history and splits its labeled minutes
    /// chronologically into train/validation/test datasets.
    pub fn make_dataset(
        &self,
        total_minutes: u32,
        split: [f64; 3],
    ) -> Result<(Dataset, Dataset, Dataset), WorldError> {
        if split.iter().any(|&v| v < 0.0) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(WorldError::InvalidSplit(split));
        }
        if total_minutes <= self.config.horizon_minutes {
            return Err(WorldError::InvalidConfig(
                "total_minutes must exceed the label horizon".into(),
            ));
        }
        let history = self.generate_history(total_minutes);
        let global = self.build_global_graph(&history, total_minutes)?;

        let mut samples = Vec::new();
        for minute in 0..(total_minutes - self.config.horizon_minutes) {
            let Some((label, a_truth)) = self.label_and_truth(&history, minute, &global) else {
                continue;
            };
            samples.push(Sample {
                district_id: 0,
                minute_index: minute,
                ongoing: self.build_ongoing_graph(&history, minute),
                global_ref: 0,
                f: self.supply_env_vector(&history, minute),
                label_pressure: label,
                a_truth,
            });
        }

        let n = samples.len();
        let n_train = (n as f64 * split[0]).round() as usize;
        let n_val = (n as f64 * split[1]).round() as usize;
        let n_train = n_train.min(n);
        let n_val = n_val.min(n - n_train);
        let rest = samples.split_off(n_train);
        let (val, test) = {
            let mut rest = rest;
            let test = rest.split_off(n_val.min(rest.len()));
            (rest, test)
        };
        let train = samples;
        Ok((
            Dataset::new(F_AOI, N_F, global.clone(), train),
            Dataset::new(F_AOI, N_F, global.clone(), val),
            Dataset::new(F_AOI, N_F, global, test),
        ))
    }
}

// ── spatial layout and demand mix ────────────────────────────────────

fn build_layout(config: &WorldConfig) -> AoiLayout {
    let mut rng = stream_rng(config.seed, 1);
    let n = config.n_aoi as usize;
    let radius = 2400.0;
    let mut positions = Vec::with_capacity(n);
    let mut cluster = vec![0usize; n];
    match config.pattern {
        SpatialPattern::Annular => {
            for i in 0..n {
                let theta = 2.0 * std::f64::consts::PI * (i as f64 / n as f64)
                    + rng.gen_range(-0.05..0.05);
                positions.push((radius * theta.cos(), radius * theta.sin()));
            }
        }
        SpatialPattern::Astroid => {
            for i in 0..n {
                let theta = 2.0 * std::f64::consts::PI * (i as f64 / n as f64)
                    + rng.gen_range(-0.05..0.05);
                positions.push((
                    radius * theta.cos().powi(3),
                    radius * theta.sin().powi(3),
                ));
            }
        }
        SpatialPattern::Uniform => {
            for _ in 0..n {
                positions.push((
                    rng.gen_range(-radius..radius),
                    rng.gen_range(-radius..radius),
                ));
            }
        }
        SpatialPattern::Mixed => {
            let centers = [
                (0.0, 0.0),
                (2600.0, 400.0),
                (-600.0, 3800.0),
                (-3000.0, -2200.0),
            ];
            for (i, c) in cluster.iter_mut().enumerate() {
                *c = i % MIXED_CLUSTERS;
                let (cx, cy) = centers[*c];
                positions.push((
                    cx + rng.gen_range(-350.0..350.0),
                    cy + rng.gen_range(-350.0..350.0),
                ));
            }
        }
    }
    let difficulty: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let prep_time: Vec<f64> = (0..n)
        .map(|i| 150.0 + rng.gen_range(0.0..200.0) + 80.0 * difficulty[i])
        .collect();
    AoiLayout {
        positions,
        prep_time,
        difficulty,
        cluster,
    }
}

/// Where orders come from and go to at each minute.
struct DemandMix {
    /// Per-minute cluster weights (mixed pattern only), row-major
    /// minutes × clusters.
    cluster_weights: Vec<[f64; MIXED_CLUSTERS]>,
}

impl DemandMix {
    fn new(config: &WorldConfig, total_minutes: u32) -> Self {
        let mut cluster_weights = Vec::new();
        if config.pattern == SpatialPattern::Mixed {
            // Random-walk logits per 15-minute block, linearly interpolated.
            // The walk is seeded, not time-of-day driven: the hot cluster is
            // only observable through recent orders.
            let mut rng = stream_rng(config.seed, 5);
            let blocks = (total_minutes / MIXED_BLOCK_MIN + 2) as usize;
            let mut logits = [0.0f64; MIXED_CLUSTERS];
            let mut block_weights = Vec::with_capacity(blocks);
            for _ in 0..blocks {
                for l in &mut logits {
                    *l += rng.gen_range(-1.1..1.1);
                    *l *= 0.92;
                }
                block_weights.push(softmax4(&logits, 1.8));
            }
            cluster_weights.reserve(total_minutes as usize);
            for minute in 0..total_minutes {
                let b = (minute / MIXED_BLOCK_MIN) as usize;
                let t = f64::from(minute % MIXED_BLOCK_MIN) / f64::from(MIXED_BLOCK_MIN);
                let mut w = [0.0; MIXED_CLUSTERS];
                for (k, slot) in w.iter_mut().enumerate() {
                    *slot = block_weights[b][k] * (1.0 - t) + block_weights[b + 1][k] * t;
                }
                cluster_weights.push(w);
            }
        }
        DemandMix { cluster_weights }
    }

    fn draw_pair(&self, world: &World, minute: u32, rng: &mut ChaCha12Rng) -> (u32, u32) {
        let n = world.config.n_aoi;
        if world.config.pattern != SpatialPattern::Mixed {
            return (rng.gen_range(0..n), rng.gen_range(0..n));
        }
        let weights = &self.cluster_weights[minute as usize];
        let src_cluster = pick_weighted(weights, rng);
        // Cross-cluster shipping ring: a hot cluster mostly feeds its ring
        // successor, so which cluster is hot changes typical haul length.
        let r: f64 = rng.gen();
        let dst_cluster = if r < 0.6 {
            (src_cluster + 1) % MIXED_CLUSTERS
        } else if r < 0.85 {
            src_cluster
        } else {
            pick_weighted(weights, rng)
        };
        let src = pick_in_cluster(&world.layout, src_cluster, rng);
        let dst = pick_in_cluster(&world.layout, dst_cluster, rng);
        (src, dst)
    }
}

fn softmax4(logits: &[f64; MIXED_CLUSTERS], sharpness: f64) -> [f64; MIXED_CLUSTERS] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; MIXED_CLUSTERS];
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max) * sharpness).exp();
        sum += *o;
    }
    for o in &mut out {
        *o /= sum;
    }
    out
}

fn pick_weighted(weights: &[f64; MIXED_CLUSTERS], rng: &mut ChaCha12Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r: f64 = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            return i;
        }
        r -= w;
    }
    MIXED_CLUSTERS - 1
}

fn pick_in_cluster(layout: &AoiLayout, cluster: usize, rng: &mut ChaCha12Rng) -> u32 {
    let members: Vec<u32> = layout
        .cluster
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == cluster)
        .map(|(i, _)| i as u32)
        .collect();
    members[rng.gen_range(0..members.len())]
}
