//! Kernel identifiers and a uniform prepare/execute front end.
//!
//! Preparation (layout conversion, weight packing and transforms) happens
//! once; `execute` is what the harness times.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::direct::{self, DirectConfig};
use crate::error::{Error, Result};
use crate::lowering::{self, ImplicitTileConfig};
use crate::problem::ConvProblem;
use crate::reference::{conv_naive, ConvInputs};
use crate::tensor::Tensor4D;
use crate::winograd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelId {
    Naive,
    Direct,
    Im2row,
    Gemm,
    Wino,
}

/// Oracle-equivalence bound for the non-Winograd kernels.
pub const TOLERANCE: f64 = 1e-5;
/// Winograd transforms amplify rounding.
pub const WINO_TOLERANCE: f64 = 1e-4;

impl KernelId {
    pub const ALL: [KernelId; 5] = [
        KernelId::Naive,
        KernelId::Direct,
        KernelId::Im2row,
        KernelId::Gemm,
        KernelId::Wino,
    ];
    pub const OPTIMIZED: [KernelId; 4] = [KernelId::Direct, KernelId::Im2row, KernelId::Gemm, KernelId::Wino];

    pub fn name(self) -> &'static str {
        match self {
            KernelId::Naive => "naive",
            KernelId::Direct => "direct",
            KernelId::Im2row => "im2row",
            KernelId::Gemm => "gemm",
            KernelId::Wino => "wino",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            KernelId::Naive => 0.0,
            KernelId::Wino => WINO_TOLERANCE,
            _ => TOLERANCE,
        }
    }

    pub fn supports(self, p: &ConvProblem) -> std::result::Result<(), String> {
        match self {
            KernelId::Wino => winograd::supports(p),
            _ => Ok(()),
        }
    }

    /// Comma-separated list, e.g. `direct,wino`; `all` selects the optimized kernels.
    pub fn parse_list(s: &str) -> std::result::Result<Vec<KernelId>, String> {
        if s.trim() == "all" {
            return Ok(KernelId::OPTIMIZED.to_vec());
        }
        s.split(',').map(|t| t.trim().parse()).collect()
    }
}

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        KernelId::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown kernel '{s}' (expected one of naive, direct, im2row, gemm, wino)"))
    }
}

enum Prepared {
    Naive(ConvInputs),
    Direct(direct::DirectPrepared),
    Im2row(lowering::LoweringPrepared),
    Gemm(lowering::LoweringPrepared, ImplicitTileConfig),
    Wino(winograd::WinogradPrepared),
}

/// A kernel bound to one problem and its inputs, ready to run repeatedly.
pub struct PreparedConv {
    kernel: KernelId,
    problem: ConvProblem,
    threads: usize,
    state: Prepared,
}

impl PreparedConv {
    pub fn new(kernel: KernelId, p: &ConvProblem, inputs: &ConvInputs, threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        kernel.supports(p).map_err(|reason| Error::Unsupported {
            kernel: kernel.to_string(),
            reason,
        })?;
        let state = match kernel {
            KernelId::Naive => {
                inputs.check(p)?;
                Prepared::Naive(ConvInputs::new(
                    inputs.src.to_plain(),
                    inputs.wei.to_plain(),
                    inputs.bias.clone(),
                ))
            }
            KernelId::Direct => Prepared::Direct(direct::prepare(p, inputs, &DirectConfig::with_threads(threads))?),
            KernelId::Im2row => Prepared::Im2row(lowering::prepare(p, inputs)?),
            KernelId::Gemm => Prepared::Gemm(lowering::prepare(p, inputs)?, ImplicitTileConfig::for_problem(p, threads)),
            KernelId::Wino => Prepared::Wino(winograd::prepare(p, inputs)?),
        };
        Ok(PreparedConv {
            kernel,
            problem: p.clone(),
            threads,
            state,
        })
    }

    pub fn kernel(&self) -> KernelId {
        self.kernel
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn execute(&self) -> Result<Tensor4D> {
        let p = &self.problem;
        match &self.state {
            Prepared::Naive(inputs) => conv_naive(p, inputs),
            Prepared::Direct(prep) => direct::execute(p, prep).map(|(t, _)| t),
            Prepared::Im2row(prep) => lowering::execute_im2row(p, prep, self.threads),
            Prepared::Gemm(prep, cfg) => lowering::execute_implicit(p, prep, cfg).map(|(t, _)| t),
            Prepared::Wino(prep) => winograd::execute(p, prep, self.threads),
        }
    }
}

/// One-shot convolution with each kernel's default configuration.
pub fn run_kernel(kernel: KernelId, p: &ConvProblem, inputs: &ConvInputs, threads: usize) -> Result<Tensor4D> {
    PreparedConv::new(kernel, p, inputs, threads)?.execute()
}
