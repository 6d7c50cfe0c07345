use serde::{Deserialize, Serialize};

use crate::accounting::{count_model_flops, count_model_params, count_unit_params, Convention, MacConvention};
use crate::gating::{gate, gate_forward, GatingParams, GatingUnitSpec, UnitKind};
use crate::network::{window_partition, window_unpartition, ModelConfig};
use crate::rpe::{is_translation_invariant, offset_index, RelPosDictionary, RelPosKind, RelationIndexCache, Window};
use crate::tensor::init::{seeded, trunc_normal};
use crate::tensor::{finite_diff_check, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, f: impl FnOnce() -> crate::Result<(bool, String)>) -> CheckResult {
    let (passed, detail) = f().unwrap_or_else(|e| (false, e.to_string()));
    CheckResult { name: name.to_string(), passed, detail }
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    ((got - want) / want).abs() <= tol
}

/// Runs a fast subset of the oracle and invariant checks.
pub fn run_selftest() -> Vec<CheckResult> {
    vec![
        check("unit parameter counts", || {
            let w = Window::new(16, 7, 7);
            let c = |k, g| count_unit_params(&GatingUnitSpec::new(k, w, g, 2 * g).unwrap(), Convention::RelationOnly);
            let got = [c(UnitKind::PoTGU, 8), c(UnitKind::PoSGU, 8), c(UnitKind::PoSTGU, 8)];
            let sgu = count_unit_params(&GatingUnitSpec::new(UnitKind::SGU, w, 1, 2)?, Convention::Stored);
            Ok((got == [248, 1352, 41_912] && sgu == 615_440, format!("{got:?}, dense {sgu}")))
        }),
        check("model totals", || {
            let mut detail = Vec::new();
            let mut ok = true;
            for (c, want) in [(ModelConfig::small(), 13.51e6), (ModelConfig::base(), 18.98e6), (ModelConfig::large(), 35.4e6)] {
                let got = count_model_params(&c, Convention::Stored)?.total as f64;
                ok &= within(got, want, 0.02);
                detail.push(format!("{:.2}M", got / 1e6));
            }
            Ok((ok, detail.join(" ")))
        }),
        check("small model GFLOPs", || {
            let c = ModelConfig::small();
            let g = count_model_flops(&c, c.input)?.gflops(MacConvention::Mac);
            Ok((within(g, 40.49, 0.10), format!("{g:.2}")))
        }),
        check("expansion equals pair lookup", || {
            let w = Window::new(3, 2, 3);
            let d = RelPosDictionary::new(RelPosKind::SpatioTemporal, w, 2, 1.0, &mut seeded(1))?;
            let r = d.expand();
            let (n, axes) = (w.tokens(), [w.t, w.h, w.w]);
            let pos = |i: usize| [i / (w.h * w.w), (i / w.w) % w.h, i % w.w];
            let mut ok = true;
            for g in 0..2 {
                for i in 0..n {
                    for j in 0..n {
                        let off = offset_index(&pos(i), &pos(j), &axes)?;
                        ok &= r.matrix.at(&[g, i, j]) == d.table.data()[g * d.table.len() / 2 + off];
                    }
                }
            }
            let toeplitz = is_translation_invariant(RelPosKind::SpatioTemporal, w, &r.group(1));
            Ok((ok && toeplitz, String::new()))
        }),
        check("window partition round trip", || {
            let x = trunc_normal([2, 2, 8, 4, 3], 1.0, &mut seeded(2));
            let win = Window::new(1, 4, 2);
            let back = window_unpartition(&window_partition(&x, win)?, x.shape(), win)?;
            Ok((back == x, String::new()))
        }),
        check("grouping collapses to one group", || {
            let w = Window::new(2, 2, 2);
            let one = GatingUnitSpec::new(UnitKind::PoSTGU, w, 1, 8)?;
            let four = GatingUnitSpec::new(UnitKind::PoSTGU, w, 4, 8)?;
            let p1 = GatingParams::init(&one, &mut seeded(3));
            let p4 = GatingParams {
                weight: Tensor::from_fn(four.param_shapes().0, |i| p1.weight.data()[i % p1.weight.len()]),
                bias: Tensor::ones([4]),
            };
            let x = trunc_normal([2, 2, 2, 8], 1.0, &mut seeded(4));
            Ok((gate_forward(&one, &p1, &x)? == gate_forward(&four, &p4, &x)?, String::new()))
        }),
        check("temporal order sensitivity", || {
            let spec = GatingUnitSpec::new(UnitKind::PoTGU, Window::new(2, 1, 1), 1, 2)?;
            let (a, b, c) = (1.0, 2.0, 5.0);
            let p = GatingParams { weight: Tensor::new([1, 3], vec![a, b, c])?, bias: Tensor::zeros([1]) };
            let fwd = gate_forward(&spec, &p, &Tensor::new([2, 1, 1, 2], vec![1.0, 1.0, 0.0, 1.0])?)?;
            let rev = gate_forward(&spec, &p, &Tensor::new([2, 1, 1, 2], vec![0.0, 1.0, 1.0, 1.0])?)?;
            Ok((fwd.data() == [b, c] && rev.data() == [a, b], format!("{:?} vs {:?}", fwd.data(), rev.data())))
        }),
        check("joint unit gradient", || {
            let spec = GatingUnitSpec::new(UnitKind::PoSTGU, Window::new(2, 2, 2), 2, 8)?;
            let p = GatingParams::init(&spec, &mut seeded(5));
            let x = trunc_normal([1, 2, 2, 2, 8], 1.0, &mut seeded(6));
            let proj = trunc_normal([1, 2, 2, 2, 4], 1.0, &mut seeded(7));
            let err = finite_diff_check(
                |tape, xv| {
                    let mut cache = RelationIndexCache::default();
                    let w = tape.param(p.weight.clone());
                    let b = tape.param(p.bias.clone());
                    let z = gate(tape, &spec, w, b, xv, &mut cache)?;
                    let c = tape.constant(proj.clone());
                    let y = tape.hadamard(z, c)?;
                    tape.sum(y)
                },
                &x,
                1e-6,
            )?;
            Ok((err < 1e-4, format!("max rel err {err:.2e}")))
        }),
    ]
}
