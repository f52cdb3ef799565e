//! Fleet-wide update cost model: one key update per device versus four
//! firmware-update baselines.
//!
//! Transfers are modelled as sequential at full bandwidth, so fleet time is
//! the sum of per-device times. Restarting strategies (BL1, BL2, OTA-Key)
//! resend the whole payload after a failure; resumable ones (BL3, BL4) only
//! resend the chunk that failed.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const MB: f64 = 1e6;
pub const MIB: u64 = 1 << 20;
/// Two 18 KiB key areas.
pub const DEFAULT_KEY_PAYLOAD: f64 = 36_864.0;
pub const DEFAULT_DELTA_RATIO: f64 = 0.20;
pub const DEFAULT_FAILURE_RATE: f64 = 0.05;
pub const FLEET_BANDWIDTH: f64 = 6.5 * MB;
pub const SINGLE_BANDWIDTH: f64 = 1.0 * MB;

/// Typical firmware images: gateway, camera, drone, gimbal camera.
pub const FIRMWARE_SIZES_MB: [f64; 4] = [9.68, 32.1, 175.84, 76.1];
/// Image used for the fleet-scale runs.
pub const FLEET_FIRMWARE_MB: f64 = 32.1;
pub const FLEET_SIZES: [u64; 5] = [1000, 3000, 5000, 8000, 10000];
pub const GRAY_FLEET_SIZES: [u64; 4] = [100, 300, 500, 1000];

/// Fleet time of the delta baseline at 1000 devices that the fleet preset is
/// calibrated to.
pub const DELTA_ANCHOR_SECS: f64 = 2000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "BL1")]
    Bl1,
    #[serde(rename = "BL2")]
    Bl2,
    #[serde(rename = "BL3")]
    Bl3,
    #[serde(rename = "BL4")]
    Bl4,
    OtaKey,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [Self::Bl1, Self::Bl2, Self::Bl3, Self::Bl4, Self::OtaKey];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bl1 => "BL1",
            Self::Bl2 => "BL2",
            Self::Bl3 => "BL3",
            Self::Bl4 => "BL4",
            Self::OtaKey => "OtaKey",
        }
    }

    pub fn is_delta(self) -> bool {
        matches!(self, Self::Bl2 | Self::Bl4)
    }

    pub fn is_resumable(self) -> bool {
        matches!(self, Self::Bl3 | Self::Bl4)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub delta_ratio: f64,
    pub chunk_size: u64,
    /// Fixed seconds per attempt on top of the transfer.
    pub per_device_overhead: f64,
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self { kind, delta_ratio: DEFAULT_DELTA_RATIO, chunk_size: MIB, per_device_overhead: 0.0 }
    }

    pub fn with_delta_ratio(mut self, r: f64) -> Self {
        self.delta_ratio = r;
        self
    }

    pub fn with_overhead(mut self, secs: f64) -> Self {
        self.per_device_overhead = secs;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.delta_ratio > 0.0 && self.delta_ratio <= 1.0) {
            return Err(format!("delta ratio {} outside (0, 1]", self.delta_ratio));
        }
        if self.chunk_size == 0 {
            return Err("chunk size must be positive".into());
        }
        if self.per_device_overhead.is_nan() || self.per_device_overhead < 0.0 {
            return Err("overhead must be non-negative".into());
        }
        Ok(())
    }

    /// Bytes of one full attempt.
    pub fn payload(&self, firmware_size: f64, key_payload: f64) -> f64 {
        match self.kind {
            StrategyKind::Bl1 | StrategyKind::Bl3 => firmware_size,
            StrategyKind::Bl2 | StrategyKind::Bl4 => self.delta_ratio * firmware_size,
            StrategyKind::OtaKey => key_payload,
        }
    }

    /// Share of the payload resent after a failure.
    pub fn chunk_fraction_lost(&self, payload: f64) -> f64 {
        if payload <= 0.0 {
            return 0.0;
        }
        (self.chunk_size as f64 / payload).min(1.0)
    }
}

/// Time for one device with no failures.
pub fn single_device_time(s: &Strategy, firmware_size: f64, bandwidth: f64, key_payload: f64) -> f64 {
    assert!(bandwidth > 0.0, "bandwidth must be positive");
    s.payload(firmware_size, key_payload) / bandwidth + s.per_device_overhead
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SimMode {
    Expected,
    Stochastic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    pub n_devices: u64,
    /// Bytes per second.
    pub bandwidth: f64,
    pub failure_rate: f64,
    /// Bytes.
    pub firmware_size: f64,
    pub key_payload: f64,
    pub mode: SimMode,
    /// Seconds to deliver keys to one device, replacing the payload model
    /// for OTA-Key.
    pub per_device_service_time: f64,
}

impl FleetConfig {
    /// Fleet-scale defaults: 6.5 MB/s, 5 % failures, 32.1 MB image.
    pub fn fleet(n_devices: u64) -> Self {
        Self {
            n_devices,
            bandwidth: FLEET_BANDWIDTH,
            failure_rate: DEFAULT_FAILURE_RATE,
            firmware_size: FLEET_FIRMWARE_MB * MB,
            key_payload: DEFAULT_KEY_PAYLOAD,
            mode: SimMode::Expected,
            per_device_service_time: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.bandwidth.is_nan() || self.bandwidth <= 0.0 {
            return Err("bandwidth must be positive".into());
        }
        if !(0.0..1.0).contains(&self.failure_rate) {
            return Err(format!("failure rate {} outside [0, 1)", self.failure_rate));
        }
        if !(self.firmware_size >= 0.0 && self.key_payload >= 0.0 && self.per_device_service_time >= 0.0) {
            return Err("sizes and service time must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub total_time: f64,
    pub total_bytes: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_device_breakdown: Option<Vec<f64>>,
}

/// Seconds and bytes of one successful attempt.
fn attempt_cost(s: &Strategy, cfg: &FleetConfig) -> (f64, f64) {
    let bytes = s.payload(cfg.firmware_size, cfg.key_payload);
    let secs = match s.kind {
        StrategyKind::OtaKey => cfg.per_device_service_time + s.per_device_overhead,
        _ => bytes / cfg.bandwidth + s.per_device_overhead,
    };
    (secs, bytes)
}

/// Cost of one device given `failures` failed transfers before success.
fn device_cost(s: &Strategy, cfg: &FleetConfig, failures: f64) -> (f64, f64) {
    let (secs, bytes) = attempt_cost(s, cfg);
    if s.kind.is_resumable() {
        let resent = failures * s.chunk_fraction_lost(bytes) * bytes;
        (secs + resent / cfg.bandwidth, bytes + resent)
    } else {
        ((1.0 + failures) * secs, (1.0 + failures) * bytes)
    }
}

pub fn fleet_update(s: &Strategy, cfg: &FleetConfig) -> SimResult {
    match cfg.mode {
        SimMode::Expected => {
            let (t, b) = device_cost(s, cfg, cfg.failure_rate);
            let n = cfg.n_devices as f64;
            SimResult { total_time: n * t, total_bytes: n * b, per_device_breakdown: None }
        }
        SimMode::Stochastic { seed } => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut per = Vec::with_capacity(cfg.n_devices as usize);
            let mut bytes = 0.0;
            for _ in 0..cfg.n_devices {
                let mut failures = 0u32;
                while rng.random::<f64>() < cfg.failure_rate {
                    failures += 1;
                }
                let (t, b) = device_cost(s, cfg, failures as f64);
                per.push(t);
                bytes += b;
            }
            SimResult { total_time: per.iter().sum(), total_bytes: bytes, per_device_breakdown: Some(per) }
        }
    }
}

pub fn fleet_volume(s: &Strategy, cfg: &FleetConfig) -> f64 {
    fleet_update(s, cfg).total_bytes
}

/// Per-device overhead that puts the delta baseline at
/// [`DELTA_ANCHOR_SECS`] for 1000 devices under [`FleetConfig::fleet`].
pub fn calibrated_delta_overhead(delta_ratio: f64, failure_rate: f64) -> f64 {
    let cfg = FleetConfig::fleet(1000);
    let transfer = delta_ratio * cfg.firmware_size / cfg.bandwidth;
    (DELTA_ANCHOR_SECS / (1000.0 * (1.0 + failure_rate)) - transfer).max(0.0)
}

/// Strategies as configured for the fleet-scale runs.
pub fn fleet_strategies(delta_ratio: f64, failure_rate: f64) -> Vec<Strategy> {
    let overhead = calibrated_delta_overhead(delta_ratio, failure_rate);
    StrategyKind::ALL
        .into_iter()
        .map(|k| {
            let s = Strategy::new(k).with_delta_ratio(delta_ratio);
            if k.is_delta() {
                s.with_overhead(overhead)
            } else {
                s
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrayReleasePlan {
    pub batch_size: u64,
    pub check_time: f64,
}

impl Default for GrayReleasePlan {
    fn default() -> Self {
        Self { batch_size: 100, check_time: 180.0 }
    }
}

/// Batches of `batch_size` devices, each followed by a check.
pub fn gray_release_time(n_devices: u64, plan: &GrayReleasePlan, per_device_service_time: f64) -> f64 {
    assert!(plan.batch_size > 0, "batch size must be positive");
    let batches = n_devices.div_ceil(plan.batch_size);
    n_devices as f64 * per_device_service_time + batches as f64 * plan.check_time
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub strategy: StrategyKind,
    pub n_devices: u64,
    pub firmware_mb: f64,
    pub time_s: f64,
    pub bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayRow {
    pub n_devices: u64,
    pub batches: u64,
    pub transmission_s: f64,
    pub check_s: f64,
    pub time_s: f64,
    pub time_min: f64,
}

/// Knobs shared by the experiment grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub delta_ratio: f64,
    pub failure_rate: f64,
    pub seed: Option<u64>,
}

impl Default for SimParams {
    fn default() -> Self {
        Self { delta_ratio: DEFAULT_DELTA_RATIO, failure_rate: DEFAULT_FAILURE_RATE, seed: None }
    }
}

impl SimParams {
    fn mode(&self) -> SimMode {
        self.seed.map_or(SimMode::Expected, |seed| SimMode::Stochastic { seed })
    }
}

/// Single device at 1 MB/s, no failures, every image size.
pub fn fig7(p: &SimParams) -> Vec<SimRow> {
    let mut rows = Vec::new();
    for k in StrategyKind::ALL {
        let s = Strategy::new(k).with_delta_ratio(p.delta_ratio);
        for mb in FIRMWARE_SIZES_MB {
            let fw = mb * MB;
            rows.push(SimRow {
                strategy: k,
                n_devices: 1,
                firmware_mb: mb,
                time_s: single_device_time(&s, fw, SINGLE_BANDWIDTH, DEFAULT_KEY_PAYLOAD),
                bytes: s.payload(fw, DEFAULT_KEY_PAYLOAD),
            });
        }
    }
    rows
}

/// Every strategy, image size and fleet size under the fleet preset.
pub fn fleet_grid(p: &SimParams) -> Vec<SimRow> {
    let strategies = fleet_strategies(p.delta_ratio, p.failure_rate);
    let mut points = Vec::new();
    for s in &strategies {
        for mb in FIRMWARE_SIZES_MB {
            for n in FLEET_SIZES {
                points.push((*s, mb, n));
            }
        }
    }
    points
        .par_iter()
        .map(|&(s, mb, n)| {
            let cfg = FleetConfig { firmware_size: mb * MB, failure_rate: p.failure_rate, mode: p.mode(), ..FleetConfig::fleet(n) };
            let r = fleet_update(&s, &cfg);
            SimRow { strategy: s.kind, n_devices: n, firmware_mb: mb, time_s: r.total_time, bytes: r.total_bytes }
        })
        .collect()
}

pub fn gray_rows(plan: &GrayReleasePlan, service_time: f64) -> Vec<GrayRow> {
    GRAY_FLEET_SIZES
        .into_iter()
        .map(|n| {
            let time = gray_release_time(n, plan, service_time);
            let batches = n.div_ceil(plan.batch_size);
            GrayRow {
                n_devices: n,
                batches,
                transmission_s: n as f64 * service_time,
                check_s: batches as f64 * plan.check_time,
                time_s: time,
                time_min: time / 60.0,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), csv::Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Figure {
    Fig7,
    Fig8,
    Fig9,
    Gray,
}

impl Figure {
    pub const ALL: [Figure; 4] = [Self::Fig7, Self::Fig8, Self::Fig9, Self::Gray];

    pub fn file_name(self) -> &'static str {
        match self {
            Self::Fig7 => "fig7_single_device.csv",
            Self::Fig8 => "fig8_fleet_time.csv",
            Self::Fig9 => "fig9_fleet_volume.csv",
            Self::Gray => "gray_release.csv",
        }
    }
}

/// Writes the CSV for `fig` into `dir` and returns its path.
pub fn emit(fig: Figure, dir: &Path, p: &SimParams) -> Result<PathBuf, csv::Error> {
    let path = dir.join(fig.file_name());
    match fig {
        Figure::Fig7 => write_csv(&path, &fig7(p))?,
        Figure::Fig8 | Figure::Fig9 => write_csv(&path, &fleet_grid(p))?,
        Figure::Gray => write_csv(&path, &gray_rows(&GrayReleasePlan::default(), 1.0))?,
    }
    Ok(path)
}

pub fn run_experiment_suite(dir: &Path, p: &SimParams) -> Result<Vec<PathBuf>, csv::Error> {
    Figure::ALL.into_iter().map(|f| emit(f, dir, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use super::Strategy;

    fn approx(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-12)
    }

    #[test]
    fn single_device_matches_size_over_bandwidth() {
        let bl1 = Strategy::new(StrategyKind::Bl1);
        assert!(approx(single_device_time(&bl1, 175.84 * MB, MB, DEFAULT_KEY_PAYLOAD), 175.84, 1e-12));
        assert!(approx(single_device_time(&bl1, 9.68 * MB, MB, DEFAULT_KEY_PAYLOAD), 9.68, 1e-12));
        let ota = Strategy::new(StrategyKind::OtaKey);
        assert_eq!(
            single_device_time(&ota, 175.84 * MB, MB, DEFAULT_KEY_PAYLOAD),
            single_device_time(&ota, 9.68 * MB, MB, DEFAULT_KEY_PAYLOAD)
        );
    }

    #[test]
    fn fleet_anchors() {
        let cfg = FleetConfig::fleet(1000);
        let bl1 = fleet_update(&Strategy::new(StrategyKind::Bl1), &cfg).total_time;
        assert!(approx(bl1, 1000.0 * 1.05 * 32.1 / 6.5, 1e-12));
        let ota = fleet_update(&Strategy::new(StrategyKind::OtaKey), &cfg).total_time;
        assert!(approx(ota, 1050.0, 1e-12));
        for k in StrategyKind::ALL {
            let r = fleet_update(&Strategy::new(k), &FleetConfig::fleet(0));
            assert_eq!((r.total_time, r.total_bytes), (0.0, 0.0));
        }
    }

    #[test]
    fn calibrated_delta_hits_its_anchor() {
        let s = fleet_strategies(DEFAULT_DELTA_RATIO, DEFAULT_FAILURE_RATE);
        let bl2 = s.iter().find(|s| s.kind == StrategyKind::Bl2).unwrap();
        let t = fleet_update(bl2, &FleetConfig::fleet(1000)).total_time;
        assert!(approx(t, DELTA_ANCHOR_SECS, 1e-9), "{t}");
    }

    #[test]
    fn volume_ratios() {
        let cfg = FleetConfig::fleet(1000);
        let v = |k| fleet_volume(&Strategy::new(k), &cfg);
        assert!(approx(v(StrategyKind::Bl2) / v(StrategyKind::Bl1), 0.20, 1e-12));
        assert!(v(StrategyKind::OtaKey) / v(StrategyKind::Bl1) < 0.002);
        let one = FleetConfig::fleet(1);
        assert!(approx(fleet_volume(&Strategy::new(StrategyKind::OtaKey), &one), DEFAULT_KEY_PAYLOAD * 1.05, 1e-12));
    }

    #[test]
    fn gray_release_examples() {
        let plan = GrayReleasePlan::default();
        assert_eq!(gray_release_time(100, &plan, 1.0), 280.0);
        assert_eq!(gray_release_time(100, &GrayReleasePlan { check_time: 0.0, ..plan }, 1.0), 100.0);
        assert_eq!(gray_release_time(1000, &plan, 1.0), 2800.0);
        assert_eq!(gray_release_time(150, &plan, 1.0), 150.0 + 360.0);
    }

    #[test]
    fn stochastic_mean_converges_to_expected() {
        let expected = FleetConfig::fleet(100);
        for k in StrategyKind::ALL {
            let s = Strategy::new(k);
            let target = fleet_update(&s, &expected).total_time;
            let mean = (0..1000)
                .map(|seed| fleet_update(&s, &FleetConfig { mode: SimMode::Stochastic { seed }, ..expected.clone() }).total_time)
                .sum::<f64>()
                / 1000.0;
            assert!(approx(mean, target, 0.02), "{k}: {mean} vs {target}");
        }
    }

    #[test]
    fn emitted_csv_has_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let paths = run_experiment_suite(dir.path(), &SimParams::default()).unwrap();
        assert_eq!(paths.len(), 4);
        let text = std::fs::read_to_string(&paths[0]).unwrap();
        assert!(text.starts_with("strategy,n_devices,firmware_mb,time_s,bytes\n"));
        assert_eq!(text.lines().count(), 1 + 5 * 4);
    }

    proptest! {
        #[test]
        fn expected_mode_is_linear_in_fleet_size(n in 0u64..50_000, k in 0usize..5, mb in 1.0f64..300.0) {
            let s = Strategy::new(StrategyKind::ALL[k]);
            let mk = |n| FleetConfig { firmware_size: mb * MB, ..FleetConfig::fleet(n) };
            let one = fleet_update(&s, &mk(1));
            let many = fleet_update(&s, &mk(n));
            prop_assert!(approx(many.total_time, n as f64 * one.total_time, 1e-9) || n == 0);
            prop_assert!(approx(many.total_bytes, n as f64 * one.total_bytes, 1e-9) || n == 0);
        }

        #[test]
        fn bytes_never_below_payload(n in 0u64..2000, seed in any::<u64>(), k in 0usize..5) {
            let s = Strategy::new(StrategyKind::ALL[k]);
            let cfg = FleetConfig { mode: SimMode::Stochastic { seed }, ..FleetConfig::fleet(n) };
            let r = fleet_update(&s, &cfg);
            prop_assert!(r.total_bytes + 1e-6 >= n as f64 * s.payload(cfg.firmware_size, cfg.key_payload));
            prop_assert_eq!(r.clone(), fleet_update(&s, &cfg));
        }
    }
}
