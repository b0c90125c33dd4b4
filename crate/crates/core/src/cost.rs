//! Calibrated cost model: every emulated latency in the system comes from here.
//!
//! Durations are computed in emulated seconds and only converted to wall-clock
//! time, once, when a live process actually sleeps.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GpuModel;

/// Read bandwidth of the reference shared filesystem, 84 Gb/s, in bytes per second.
pub const FS_PEAK_BANDWIDTH: f64 = 84e9 / 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    FsFetch,
    DiskLoad,
    GpuLoad,
    Infer,
    Dispatch,
    PeerTransfer,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::FsFetch => "fs_fetch",
            Stage::DiskLoad => "disk_load",
            Stage::GpuLoad => "gpu_load",
            Stage::Infer => "infer",
            Stage::Dispatch => "dispatch",
            Stage::PeerTransfer => "peer_transfer",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Filesystem read bandwidth shared by all concurrent readers, bytes/s.
    pub fs_aggregate_bandwidth: f64,
    /// Cap on simultaneous fetch streams; further readers queue.
    pub fs_max_concurrent_ops: u32,
    /// Local disk to host memory, bytes/s.
    pub disk_bandwidth: f64,
    /// Worker to worker, per transfer pair, bytes/s.
    pub peer_bandwidth: f64,
    /// GPU seconds per cost unit on a speed_factor 1.0 device.
    pub per_inference_seconds_reference: f64,
    /// Sandbox setup plus context attach, paid once per invocation.
    pub invoke_dispatch_overhead_seconds: f64,
    /// Wall seconds per emulated second.
    pub time_scale: f64,
}

impl Default for CostModel {
    /// Calibrated against the static 10 x A10 + 10 x TITAN X (Pascal) pool.
    /// The filesystem bandwidth is the effective share the application sees,
    /// well below the 84 Gb/s hardware peak.
    fn default() -> Self {
        CostModel {
            fs_aggregate_bandwidth: 3.0e9,
            fs_max_concurrent_ops: 94,
            disk_bandwidth: 2.0e8,
            peer_bandwidth: 1.25e9,
            per_inference_seconds_reference: 0.27,
            invoke_dispatch_overhead_seconds: 0.05,
            time_scale: 0.002,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("negative or non-finite amount {0} for stage {1}")]
    NegativeAmount(f64, Stage),
    #[error("a filesystem fetch needs at least one concurrent reader")]
    NoReaders,
    #[error("cost model field {0} must be positive")]
    NonPositive(&'static str),
}

impl CostModel {
    pub fn validate(&self) -> Result<(), CostError> {
        let rates = [
            ("fs_aggregate_bandwidth", self.fs_aggregate_bandwidth),
            ("disk_bandwidth", self.disk_bandwidth),
            ("peer_bandwidth", self.peer_bandwidth),
            ("per_inference_seconds_reference", self.per_inference_seconds_reference),
            ("time_scale", self.time_scale),
        ];
        for (name, v) in rates {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CostError::NonPositive(name));
            }
        }
        if self.fs_max_concurrent_ops == 0 {
            return Err(CostError::NonPositive("fs_max_concurrent_ops"));
        }
        if !(self.invoke_dispatch_overhead_seconds >= 0.0) {
            return Err(CostError::NonPositive("invoke_dispatch_overhead_seconds"));
        }
        Ok(())
    }

    /// Emulated seconds spent in `stage`.
    ///
    /// `amount` is bytes for the transfer stages and cost units for `Infer`;
    /// `Dispatch` ignores it. `concurrent_fs_readers` only matters for `FsFetch`.
    pub fn stage_duration(
        &self,
        stage: Stage,
        amount: f64,
        gpu: &GpuModel,
        concurrent_fs_readers: u32,
    ) -> Result<f64, CostError> {
        if !(amount >= 0.0) || !amount.is_finite() {
            return Err(CostError::NegativeAmount(amount, stage));
        }
        let secs = match stage {
            Stage::FsFetch => {
                if concurrent_fs_readers == 0 {
                    return Err(CostError::NoReaders);
                }
                let sharing = concurrent_fs_readers.min(self.fs_max_concurrent_ops);
                amount / (self.fs_aggregate_bandwidth / f64::from(sharing))
            }
            Stage::DiskLoad => amount / self.disk_bandwidth,
            Stage::GpuLoad => amount / gpu.gpu_load_bandwidth,
            Stage::Infer => amount * self.per_inference_seconds_reference / gpu.speed_factor,
            Stage::Dispatch => self.invoke_dispatch_overhead_seconds,
            Stage::PeerTransfer => amount / self.peer_bandwidth,
        };
        Ok(secs)
    }

    /// Disk to memory to GPU for `bytes` of model parameters.
    pub fn model_load_seconds(&self, bytes: u64, gpu: &GpuModel) -> f64 {
        bytes as f64 / self.disk_bandwidth + bytes as f64 / gpu.gpu_load_bandwidth
    }

    pub fn infer_seconds(&self, units: f64, gpu: &GpuModel) -> f64 {
        units.max(0.0) * self.per_inference_seconds_reference / gpu.speed_factor
    }

    /// Wall-clock time for an emulated duration, rounded up to the microsecond.
    pub fn wall_duration(&self, emulated_seconds: f64) -> Duration {
        if !(emulated_seconds > 0.0) {
            return Duration::ZERO;
        }
        let micros = (emulated_seconds * self.time_scale * 1e6).ceil();
        Duration::from_micros(micros as u64)
    }

    /// Inverse of [`wall_duration`](Self::wall_duration), without rounding.
    pub fn emulated_seconds(&self, wall: Duration) -> f64 {
        wall.as_secs_f64() / self.time_scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GpuCatalog, A10, TITAN_X_PASCAL};

    fn a10() -> GpuModel {
        GpuCatalog::standard().get(A10).unwrap().clone()
    }

    #[test]
    fn zero_units_infer_is_free() {
        let cm = CostModel::default();
        assert_eq!(cm.stage_duration(Stage::Infer, 0.0, &a10(), 1).unwrap(), 0.0);
    }

    #[test]
    fn negative_amounts_rejected() {
        let cm = CostModel::default();
        for stage in [
            Stage::FsFetch,
            Stage::DiskLoad,
            Stage::GpuLoad,
            Stage::Infer,
            Stage::Dispatch,
        ] {
            assert!(matches!(
                cm.stage_duration(stage, -1.0, &a10(), 1),
                Err(CostError::NegativeAmount(_, _))
            ));
        }
        assert_eq!(
            cm.stage_duration(Stage::FsFetch, 1.0, &a10(), 0),
            Err(CostError::NoReaders)
        );
        assert!(cm.stage_duration(Stage::DiskLoad, f64::NAN, &a10(), 1).is_err());
    }

    #[test]
    fn ops_cap_limits_sharing() {
        let cm = CostModel {
            fs_max_concurrent_ops: 4,
            ..CostModel::default()
        };
        let at_cap = cm.stage_duration(Stage::FsFetch, 1e9, &a10(), 4).unwrap();
        let above = cm.stage_duration(Stage::FsFetch, 1e9, &a10(), 40).unwrap();
        assert_eq!(at_cap, above);
    }

    #[test]
    fn titan_is_slower_than_a10() {
        let cm = CostModel::default();
        let cat = GpuCatalog::standard();
        let fast = cm
            .stage_duration(Stage::Infer, 100.0, cat.get(A10).unwrap(), 1)
            .unwrap();
        let slow = cm
            .stage_duration(Stage::Infer, 100.0, cat.get(TITAN_X_PASCAL).unwrap(), 1)
            .unwrap();
        assert!((slow / fast - 2.0).abs() < 1e-12);
    }

    #[test]
    fn wall_duration_rounds_up() {
        let cm = CostModel {
            time_scale: 0.002,
            ..CostModel::default()
        };
        assert_eq!(cm.wall_duration(32.0), Duration::from_millis(64));
        assert_eq!(cm.wall_duration(1e-9), Duration::from_micros(1));
        assert_eq!(cm.wall_duration(0.0), Duration::ZERO);
        assert_eq!(cm.wall_duration(-3.0), Duration::ZERO);
    }

    #[test]
    fn default_validates() {
        CostModel::default().validate().unwrap();
        let bad = CostModel {
            time_scale: 0.0,
            ..CostModel::default()
        };
        assert_eq!(bad.validate(), Err(CostError::NonPositive("time_scale")));
    }
}
