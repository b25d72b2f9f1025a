//! Shared workload definitions for the criterion benchmarks.

use statfuse_core::fusion::FusionInputs;
use statfuse_core::metrics::bench_workload;
use statfuse_core::synth::Scenario;
use statfuse_core::{FusionModel, Result};

/// Image size, class count, expert count and Monte-Carlo samples of the
/// reference timing setup.
pub const REFERENCE: Size = Size {
    height: 384,
    width: 768,
    classes: 12,
    experts: 2,
    samples: 4,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub experts: usize,
    pub samples: usize,
}

impl Size {
    pub fn elements(&self) -> u64 {
        (self.height * self.width) as u64
    }

    pub fn label(&self) -> String {
        format!("{}x{}/K{}/M{}", self.width, self.height, self.classes, self.experts)
    }
}

pub fn workload(size: Size, seed: u64) -> Result<(FusionInputs, FusionModel)> {
    let scenario = Scenario::throughput(size.classes, size.experts, size.samples, size.height, size.width)?;
    bench_workload(&scenario, seed)
}
