//! Numerical self-checks shared by the test suites and the `selftest` command:
//! the recurrence/convolution scan oracle, finite-difference validation of every
//! differentiable block, and the exact structural invariants of the fusion block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{
    channel_swap_tensors, dssf, fmb, fmb_eval, vss_block, FmbConfig, FmbParams, VssBlockParams,
};
use crate::gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport, ScalarFunction};
use crate::params::{Binding, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::ss2d::{scan_expand, scan_merge, ss2d_forward, Ss2dParams};
use crate::ssm::{discretize_zoh, lti_conv_kernel, lti_scan, lti_scan_via_kernel, LtiParams, Sequence, SsmParams, S6};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

fn random<S: Scalar, R: Rng>(rng: &mut R, shape: Shape, bound: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_, _, _, _| S::of(rng.gen_range(-bound..=bound)))
}

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub draws: usize,
    /// Worst `max |y_conv − y_scan| / max |y_scan|` over all draws.
    pub max_rel_error: f64,
}

/// Random time-invariant systems (`N ≤ 16`, `D ≤ 8`, `L ≤ 64`) run through the
/// recurrence and through the causal-convolution kernel, in `f32`.
pub fn scan_oracle(draws: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let n = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=8);
        let l = rng.gen_range(1..=64);
        let dn = d * n;
        let a: Vec<f32> = (0..dn).map(|_| -rng.gen_range(0.05f32..4.0)).collect();
        let b: Vec<f32> = (0..dn).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let delta: Vec<f32> = (0..dn).map(|_| rng.gen_range(1e-3f32..1.0)).collect();
        let (a_bar, b_bar) = discretize_zoh(&a, &b, &delta)?;
        let p = LtiParams {
            dim: d,
            state: n,
            a_bar,
            b_bar,
            c: (0..dn).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            d_skip: vec![0.0; d],
        };
        let x = Sequence::new(l, d, (0..l * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect())?;
        let y_scan = lti_scan(&x, &p)?;
        let y_conv = lti_scan_via_kernel(&x, &lti_conv_kernel(&p, l)?)?;
        let scale = y_scan.max_abs().f64();
        let diff = y_scan
            .values()
            .iter()
            .zip(y_conv.values())
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        let rel = if scale > 0.0 { diff / scale } else { diff };
        worst = worst.max(rel);
    }
    Ok(OracleReport {
        draws,
        max_rel_error: worst,
    })
}

/// Fixed pseudo-random weights so that `Σ w·out` exercises every output element.
fn readout<S: Scalar>(tape: &mut Tape<S>, out: Var) -> Result<Var> {
    let shape = tape.shape(out);
    let mut i = 0usize;
    let w = Tensor::from_fn(shape, |_, _, _, _| {
        i += 1;
        S::of((1.7 * i as f64 + 0.3).sin())
    });
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// One gradient-check fixture: parameters, inputs stored as parameters, and the block to run.
pub enum Probe {
    Silu { x: ParamId },
    LayerNorm { x: ParamId, gamma: ParamId, beta: ParamId },
    Linear { x: ParamId, w: ParamId, b: ParamId },
    DwConv { x: ParamId, k: ParamId, b: ParamId },
    Conv2d { x: ParamId, k: ParamId, b: ParamId, stride: usize },
    S6 { x: ParamId, p: SsmParams },
    Ss2d { x: ParamId, p: Ss2dParams },
    Vss { x: ParamId, p: VssBlockParams },
    Dssf { r: ParamId, ir: ParamId, p: FmbParams, cfg: FmbConfig },
    /// `loss = Σ P`.
    Fmb { r: ParamId, ir: ParamId, p: FmbParams, cfg: FmbConfig },
}

impl ScalarFunction for Probe {
    fn eval<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding) -> Result<Var> {
        let out = match self {
            Probe::Silu { x } => tape.silu(bind[*x]),
            Probe::LayerNorm { x, gamma, beta } => tape.layer_norm(bind[*x], bind[*gamma], bind[*beta])?,
            Probe::Linear { x, w, b } => tape.linear(bind[*x], bind[*w], Some(bind[*b]))?,
            Probe::DwConv { x, k, b } => tape.depthwise_conv2d(bind[*x], bind[*k], Some(bind[*b]))?,
            Probe::Conv2d { x, k, b, stride } => tape.conv2d(bind[*x], bind[*k], Some(bind[*b]), *stride)?,
            Probe::S6 { x, p } => S6 { params: p }.forward(tape, bind, bind[*x])?,
            Probe::Ss2d { x, p } => ss2d_forward(tape, bind, p, bind[*x])?,
            Probe::Vss { x, p } => vss_block(tape, bind, p, bind[*x])?,
            Probe::Dssf { r, ir, p, cfg } => {
                let (a, b) = dssf(tape, bind, p, cfg, bind[*r], bind[*ir])?;
                let la = readout(tape, a)?;
                let lb = readout(tape, b)?;
                return tape.add(la, lb);
            }
            Probe::Fmb { r, ir, p, cfg } => {
                let out = fmb(tape, bind, p, cfg, bind[*r], bind[*ir])?;
                return Ok(tape.sum(out.fused));
            }
        };
        readout(tape, out)
    }
}

/// A named fixture ready for [`finite_diff_check`].
pub struct GradientCase {
    pub name: &'static str,
    pub store: ParamStore<f64>,
    pub probe: Probe,
}

/// The fixture for `name`, one of [`GRADIENT_CASES`].
pub fn gradient_case(name: &str, seed: u64) -> Option<GradientCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::<f64>::new();
    let rng = &mut rng;
    let (name, probe) = match name {
        "silu" => {
            let x = s.add("x", random(rng, Shape::new(2, 3, 4, 4), 4.0));
            ("silu", Probe::Silu { x })
        }
        "layer_norm" => {
            let x = s.add("x", random(rng, Shape::new(2, 5, 3, 3), 2.0));
            let gamma = s.add("gamma", random(rng, Shape::new(1, 5, 1, 1), 1.5));
            let beta = s.add("beta", random(rng, Shape::new(1, 5, 1, 1), 1.0));
            ("layer_norm", Probe::LayerNorm { x, gamma, beta })
        }
        "linear" => {
            let x = s.add("x", random(rng, Shape::new(2, 4, 3, 3), 1.0));
            let w = s.add("w", random(rng, Shape::new(6, 4, 1, 1), 1.0));
            let b = s.add("b", random(rng, Shape::new(1, 6, 1, 1), 1.0));
            ("linear", Probe::Linear { x, w, b })
        }
        "depthwise_conv2d" => {
            let x = s.add("x", random(rng, Shape::new(2, 3, 5, 4), 1.0));
            let k = s.add("k", random(rng, Shape::new(3, 1, 3, 3), 1.0));
            let b = s.add("b", random(rng, Shape::new(1, 3, 1, 1), 1.0));
            ("depthwise_conv2d", Probe::DwConv { x, k, b })
        }
        "conv2d" => {
            let x = s.add("x", random(rng, Shape::new(2, 3, 5, 6), 1.0));
            let k = s.add("k", random(rng, Shape::new(4, 3, 3, 3), 1.0));
            let b = s.add("b", random(rng, Shape::new(1, 4, 1, 1), 1.0));
            ("conv2d", Probe::Conv2d { x, k, b, stride: 2 })
        }
        "s6_forward" => {
            let x = s.add("x", random(rng, Shape::new(2, 4, 1, 12), 1.0));
            let p = SsmParams::new(&mut s, "s6", 4, 6, rng);
            randomize_ssm(&mut s, &p, rng);
            ("s6_forward", Probe::S6 { x, p })
        }
        "ss2d_forward" => {
            let x = s.add("x", random(rng, Shape::new(1, 3, 3, 4), 1.0));
            let p = Ss2dParams::new(&mut s, "ss2d", 3, 4, rng);
            for d in &p.dirs {
                randomize_ssm(&mut s, d, rng);
            }
            ("ss2d_forward", Probe::Ss2d { x, p })
        }
        "vss_block" => {
            let x = s.add("x", random(rng, Shape::new(1, 4, 4, 4), 1.0));
            let p = VssBlockParams::new(&mut s, "vss", 4, 2, 4, rng);
            randomize_affine(&mut s, rng);
            ("vss_block", Probe::Vss { x, p })
        }
        "dssf" => {
            let r = s.add("f_r", random(rng, Shape::new(1, 4, 3, 3), 1.0));
            let ir = s.add("f_ir", random(rng, Shape::new(1, 4, 3, 3), 1.0));
            let cfg = FmbConfig {
                n_dssf: 2,
                state_dim: 4,
                ..Default::default()
            };
            let p = FmbParams::new(&mut s, "fmb", 4, &cfg, rng).expect("valid fixture");
            randomize_affine(&mut s, rng);
            ("dssf", Probe::Dssf { r, ir, p, cfg })
        }
        "fmb" => {
            let r = s.add("f_r", random(rng, Shape::new(1, 4, 4, 4), 1.0));
            let ir = s.add("f_ir", random(rng, Shape::new(1, 4, 4, 4), 1.0));
            let cfg = FmbConfig::default();
            let p = FmbParams::new(&mut s, "fmb", 4, &cfg, rng).expect("valid fixture");
            randomize_affine(&mut s, rng);
            ("fmb", Probe::Fmb { r, ir, p, cfg })
        }
        _ => return None,
    };
    Some(GradientCase { name, store: s, probe })
}

pub const GRADIENT_CASES: [&str; 10] = [
    "silu",
    "layer_norm",
    "linear",
    "depthwise_conv2d",
    "conv2d",
    "s6_forward",
    "ss2d_forward",
    "vss_block",
    "dssf",
    "fmb",
];

/// Moves selection projections and skips away from their initial values so
/// that every path through the scan carries gradient.
fn randomize_ssm<R: Rng>(s: &mut ParamStore<f64>, p: &SsmParams, rng: &mut R) {
    for id in [p.w_b, p.w_c, p.w_delta, p.d_skip] {
        let shape = s.get(id).shape();
        s.set(id, random(rng, shape, 0.8)).expect("same shape");
    }
    let shape = s.get(p.a_log).shape();
    s.set(p.a_log, random(rng, shape, 1.0)).expect("same shape");
}

/// Perturbs every norm affine and bias so that none sits at a symmetric point.
fn randomize_affine<R: Rng>(s: &mut ParamStore<f64>, rng: &mut R) {
    let ids: Vec<(ParamId, String)> = s.iter().map(|(id, n, _)| (id, n.to_string())).collect();
    for (id, name) in ids {
        let t = s.get(id).clone();
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias") {
            let noise: Tensor<f64> = random(rng, t.shape(), 0.3);
            s.set(id, t.add(&noise).expect("same shape")).expect("same shape");
        }
    }
}

/// Runs [`finite_diff_check`] on one case at `f32`.
pub fn check_gradient(case: &GradientCase, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    finite_diff_check::<f32, _>(&case.probe, &case.store, cfg)
}

#[derive(Clone, Debug)]
pub struct InvariantResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: impl Into<String>) -> InvariantResult {
    InvariantResult {
        name,
        passed,
        detail: detail.into(),
    }
}

/// The exact structural identities of the swap, scan and fusion blocks, at `f32`.
pub fn exact_invariants(seed: u64) -> Result<Vec<InvariantResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let shape = Shape::new(2, 8, 3, 5);
    let a: Tensor<f32> = random(&mut rng, shape, 3.0);
    let b: Tensor<f32> = random(&mut rng, shape, 3.0);

    let t_r = channel_swap_tensors(&a, &b)?;
    let t_ir = channel_swap_tensors(&b, &a)?;
    let back_a = channel_swap_tensors(&t_r, &t_ir)?;
    let back_b = channel_swap_tensors(&t_ir, &t_r)?;
    out.push(outcome(
        "channel_swap_involution",
        back_a == a && back_b == b,
        "CS(CS(a,b), CS(b,a)) = a and CS(CS(b,a), CS(a,b)) = b",
    ));
    let conserved = (0..shape.batch()).all(|n| {
        (0..shape.channels()).all(|c| {
            let (tr, ti) = (t_r.plane(n, c), t_ir.plane(n, c));
            let (fa, fb) = (a.plane(n, c), b.plane(n, c));
            (tr == fa && ti == fb) || (tr == fb && ti == fa)
        })
    });
    out.push(outcome(
        "channel_conservation",
        conserved,
        "(T_R, T_IR) permutes the channel slices of (F_R, F_IR)",
    ));

    let x: Tensor<f32> = random(&mut rng, Shape::new(2, 3, 4, 5), 5.0);
    out.push(outcome(
        "merge_expand_four_identity",
        scan_merge(&scan_expand(&x))? == x.scale(4.0),
        "merge(expand(x)) = 4x bitwise",
    ));

    let cfg = FmbConfig {
        n_dssf: 3,
        state_dim: 4,
        ..Default::default()
    };
    let mut store = ParamStore::<f32>::new();
    let params = FmbParams::new(&mut store, "fmb", 8, &cfg, &mut rng)?;
    let f_r: Tensor<f32> = random(&mut rng, Shape::new(1, 8, 4, 4), 2.0);
    let f_ir: Tensor<f32> = random(&mut rng, Shape::new(1, 8, 4, 4), 2.0);

    let dssf_eval = |store: &ParamStore<f32>| -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::new();
        let bind = store.bind_constants(&mut tape);
        let r = tape.constant(f_r.clone());
        let ir = tape.constant(f_ir.clone());
        let (a, b) = dssf(&mut tape, &bind, &params, &cfg, r, ir)?;
        Ok((tape.value(a).clone(), tape.value(b).clone()))
    };

    let mut zeroed = store.clone();
    for l in &params.dssf {
        for p in [&l.r, &l.ir] {
            let shape = zeroed.get(p.out_proj.weight).shape();
            zeroed.set(p.out_proj.weight, Tensor::zeros(shape))?;
        }
    }
    let (yr, yir) = dssf_eval(&zeroed)?;
    out.push(outcome(
        "dssf_residual_identity",
        yr == f_r && yir == f_ir,
        "zero out-projections leave (F̃_R, F̃_IR) unchanged",
    ));

    let mut closed = store.clone();
    for l in &params.dssf {
        for p in [&l.r, &l.ir] {
            let w = closed.get(p.gate_proj.weight).shape();
            closed.set(p.gate_proj.weight, Tensor::zeros(w))?;
            if let Some(bias) = p.gate_proj.bias {
                let shape = closed.get(bias).shape();
                closed.set(bias, Tensor::zeros(shape))?;
            }
        }
    }
    let (yr, yir) = dssf_eval(&closed)?;
    out.push(outcome(
        "gate_closure",
        yr == f_r && yir == f_ir,
        "z = 0 gives y' = 0 and F̄ = F̃",
    ));

    let full_cfg = FmbConfig {
        n_dssf: 2,
        state_dim: 4,
        ..Default::default()
    };
    let mut store = ParamStore::<f32>::new();
    let params = FmbParams::new(&mut store, "fmb", 8, &full_cfg, &mut rng)?;
    let fwd = fmb_eval(&store, &params, &full_cfg, &f_r, &f_ir)?;
    let swapped = fmb_eval(&store, &params.swapped_branches(), &full_cfg, &f_ir, &f_r)?;
    out.push(outcome(
        "branch_swap_equivariance",
        swapped.r == fwd.ir && swapped.ir == fwd.r && swapped.fused == fwd.fused,
        "fmb(F_IR, F_R) with exchanged parameters = (F̂_IR, F̂_R, P)",
    ));
    let sum = fwd.r.add(&fwd.ir)?;
    out.push(outcome("fused_is_sum", sum == fwd.fused, "P = F̂_R + F̂_IR elementwise"));
    Ok(out)
}
