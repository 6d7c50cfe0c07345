//! Operator micro-benchmarks: dense versus dictionary-based token mixing.
//!
//! Timings are only comparable within one run on one machine.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accounting::{count_unit_params, Convention};
use crate::error::{Error, Result};
use crate::gating::{gate, split_halves, GatingParams, GatingUnitSpec, UnitKind};
use crate::rpe::{lazy_mix, RelPosDictionary, RelPosKind, RelationIndexCache, Window};
use crate::tensor::init::{seeded, trunc_normal};
use crate::tensor::{hadamard, Tape, Tensor};

pub const MIN_REPS: usize = 10;
pub const WARMUP_REPS: usize = 3;
pub const DEFAULT_MEMORY_CAP: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BenchKind {
    /// A gating unit with its relation matrix materialized.
    Unit(UnitKind),
    /// Joint positional gating that reads the dictionary per pair.
    LazyPoSTGU,
}

impl BenchKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "potgu" => BenchKind::Unit(UnitKind::PoTGU),
            "posgu" => BenchKind::Unit(UnitKind::PoSGU),
            "postgu" => BenchKind::Unit(UnitKind::PoSTGU),
            "sgu" => BenchKind::Unit(UnitKind::SGU),
            "tgu" => BenchKind::Unit(UnitKind::TGU),
            "postgu-lazy" => BenchKind::LazyPoSTGU,
            _ => return None,
        })
    }

    fn unit_kind(self) -> UnitKind {
        match self {
            BenchKind::Unit(k) => k,
            BenchKind::LazyPoSTGU => UnitKind::PoSTGU,
        }
    }
}

impl fmt::Display for BenchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchKind::Unit(k) => write!(f, "{k:?}"),
            BenchKind::LazyPoSTGU => f.write_str("PoSTGU-lazy"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub kind: BenchKind,
    pub window: Window,
    /// Positions one relation matrix spans.
    pub tokens: usize,
    /// Counted under [`Convention::Comparison`].
    pub params: usize,
    pub param_bytes: usize,
    /// Scratch memory beyond inputs and outputs: the expanded relation
    /// matrices, or nothing for the lazy path.
    pub peak_transient_bytes: usize,
    pub ns_median: f64,
    pub reps_kept: usize,
}

/// Median, after dropping samples more than five MADs from the median.
pub fn robust_median(samples: &[f64]) -> (f64, usize) {
    let med = median(samples);
    let dev: Vec<f64> = samples.iter().map(|s| (s - med).abs()).collect();
    let mad = median(&dev);
    let kept: Vec<f64> = samples.iter().copied().filter(|s| (s - med).abs() <= 5.0 * mad).collect();
    (median(&kept), kept.len())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Pins the calling thread to the first CPU it may run on.
#[cfg(target_os = "linux")]
pub fn pin_to_one_core() -> bool {
    // SAFETY: cpu_set_t is plain data; the calls only read and write it.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
            return false;
        }
        let Some(cpu) = (0..libc::CPU_SETSIZE as usize).find(|&c| libc::CPU_ISSET(c, &set)) else {
            return false;
        };
        let mut one: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut one);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &one) == 0
    }
}

#[cfg(not(target_os = "linux"))]
pub fn pin_to_one_core() -> bool {
    false
}

/// Times one gating forward on a single `window × channels` input.
pub fn bench_operator(
    kind: BenchKind,
    window: Window,
    channels: usize,
    groups: usize,
    reps: usize,
    memory_cap: usize,
) -> Result<BenchResult> {
    if reps < MIN_REPS {
        return Err(Error::Invalid(format!("at least {MIN_REPS} reps are required, got {reps}")));
    }
    let unit_kind = kind.unit_kind();
    let groups = if unit_kind.is_positional() { groups } else { 1 };
    let spec = GatingUnitSpec::new(unit_kind, window, groups, channels)?;
    let n = spec.tokens();
    let matrices = if unit_kind.is_positional() { groups } else { 1 };
    let transient = match kind {
        BenchKind::LazyPoSTGU => 0,
        BenchKind::Unit(_) => matrices * n * n * 8,
    };
    let stored = spec.param_count() * 8;
    if transient + stored > memory_cap {
        return Err(Error::Invalid(format!(
            "{kind} at window {window} needs {} bytes, cap is {memory_cap}",
            transient + stored
        )));
    }
    let mut rng = seeded(0);
    let params = GatingParams::init(&spec, &mut rng);
    let x = trunc_normal([1, window.t, window.h, window.w, channels], 1.0, &mut rng);

    let mut samples = Vec::with_capacity(reps);
    match kind {
        BenchKind::Unit(_) => {
            let mut cache = RelationIndexCache::default();
            let mut run = || -> Result<()> {
                let mut tape = Tape::new();
                let w = tape.constant(params.weight.clone());
                let b = tape.constant(params.bias.clone());
                let v = tape.constant(x.clone());
                gate(&mut tape, &spec, w, b, v, &mut cache)?;
                Ok(())
            };
            time_reps(&mut run, reps, &mut samples)?;
        }
        BenchKind::LazyPoSTGU => {
            let dict = RelPosDictionary::from_table(RelPosKind::SpatioTemporal, window, params.weight.clone())?;
            let mut run = || -> Result<()> {
                lazy_gate(&dict, &params.bias, &x)?;
                Ok(())
            };
            time_reps(&mut run, reps, &mut samples)?;
        }
    }
    let (ns_median, reps_kept) = robust_median(&samples);
    let count = count_unit_params(&spec, Convention::Comparison);
    Ok(BenchResult {
        kind,
        window,
        tokens: n,
        params: count,
        param_bytes: count * 8,
        peak_transient_bytes: transient,
        ns_median,
        reps_kept,
    })
}

fn time_reps(run: &mut dyn FnMut() -> Result<()>, reps: usize, samples: &mut Vec<f64>) -> Result<()> {
    for _ in 0..WARMUP_REPS {
        run()?;
    }
    for _ in 0..reps {
        let start = Instant::now();
        run()?;
        samples.push(start.elapsed().as_nanos() as f64);
    }
    Ok(())
}

/// Joint positional gating without materializing any relation matrix.
pub fn lazy_gate(dict: &RelPosDictionary, beta: &Tensor, v: &Tensor) -> Result<Tensor> {
    let shape = v.shape();
    let runtime = Window::new(shape[1], shape[2], shape[3]);
    let (x1, x2) = split_halves(v)?;
    let mut mixed = lazy_mix(dict, runtime, &x1, shape[0], 1)?;
    let c = mixed.channels();
    let cg = c / dict.groups;
    for (i, m) in mixed.data_mut().iter_mut().enumerate() {
        *m += beta.data()[(i % c) / cg];
    }
    hadamard(&mixed, &x2)
}

pub fn csv_header() -> &'static str {
    "kind,N,params_bytes,ns_median"
}

pub fn to_csv(results: &[BenchResult]) -> String {
    let mut out = String::from(csv_header());
    out.push('\n');
    for r in results {
        out.push_str(&format!("{},{},{},{:.0}\n", r.kind, r.tokens, r.param_bytes, r.ns_median));
    }
    out
}
