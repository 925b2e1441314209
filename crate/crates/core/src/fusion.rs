//! Cross-modality fusion: VSS blocks, channel swapping (shallow fusion) and
//! the gated dual hidden-state fusion stack (deep fusion), composed into the
//! fusion block that turns a pair of stage features into `(F̂_R, F̂_IR, P)`.
//!
//! Per fusion block:
//!
//! ```text
//! T_R = CS(F_R, F_IR)            T_IR = CS(F_IR, F_R)
//! F̃_R = VSS_R(T_R)               F̃_IR = VSS_IR(T_IR)
//! repeat N times:
//!     y = P_in(F̃)                z = SiLU(Linear(Norm(F̃)))
//!     y'_R  = y_R z_R  + z_R  y_IR
//!     y'_IR = y_IR z_IR + z_IR y_R
//!     F̃ ← Linear(y') + F̃
//! F̂ = F + F̃                      P = F̂_R + F̂_IR
//! ```

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, ChannelSource};
use crate::params::{Binding, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::ss2d::{ss2d_forward_planned, ScanPlan, Ss2dParams};
use crate::ssm::uniform;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EXPANSION: usize = 2;
pub const DEFAULT_STATE_DIM: usize = 16;
pub const DWCONV_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, channels: usize) -> Self {
        LayerNormParams {
            gamma: store.add(
                format!("{prefix}.gamma"),
                Tensor::full(Shape::new(1, channels, 1, 1), S::one()),
            ),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(Shape::new(1, channels, 1, 1))),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm(x, bind[self.gamma], bind[self.beta])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearParams {
    /// Weights uniform in `±scale / sqrt(c_in)`, bias zero.
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let bound = scale / (c_in as f64).sqrt();
        LinearParams {
            weight: store.add(
                format!("{prefix}.weight"),
                uniform(rng, Shape::new(c_out, c_in, 1, 1), bound),
            ),
            bias: bias.then(|| {
                store.add(format!("{prefix}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)))
            }),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, x: Var) -> Result<Var> {
        tape.linear(x, bind[self.weight], self.bias.map(|b| bind[b]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DwConvParams {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl DwConvParams {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / k as f64;
        DwConvParams {
            kernel: store.add(
                format!("{prefix}.kernel"),
                uniform(rng, Shape::new(channels, 1, k, k), bound),
            ),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(Shape::new(1, channels, 1, 1))),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, x: Var) -> Result<Var> {
        tape.depthwise_conv2d(x, bind[self.kernel], Some(bind[self.bias]))
    }
}

/// Parameters of one VSS block; also used for one DSSF branch, where the
/// gate and out-projection are split out into [`gate`] and [`project_out`].
#[derive(Clone, Debug, PartialEq)]
pub struct VssBlockParams {
    pub channels: usize,
    pub inner: usize,
    pub norm: LayerNormParams,
    pub in_proj: LinearParams,
    pub dwconv: DwConvParams,
    pub ss2d: Ss2dParams,
    pub out_norm: LayerNormParams,
    pub gate_proj: LinearParams,
    pub out_proj: LinearParams,
}

impl VssBlockParams {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: usize,
        expansion: usize,
        state: usize,
        rng: &mut R,
    ) -> Self {
        let inner = expansion * channels;
        VssBlockParams {
            channels,
            inner,
            norm: LayerNormParams::new(store, &format!("{prefix}.norm"), channels),
            in_proj: LinearParams::new(store, &format!("{prefix}.in_proj"), channels, inner, true, 1.0, rng),
            dwconv: DwConvParams::new(store, &format!("{prefix}.dwconv"), inner, DWCONV_KERNEL, rng),
            ss2d: Ss2dParams::new(store, &format!("{prefix}.ss2d"), inner, state, rng),
            out_norm: LayerNormParams::new(store, &format!("{prefix}.out_norm"), inner),
            gate_proj: LinearParams::new(store, &format!("{prefix}.gate_proj"), channels, inner, true, 1.0, rng),
            out_proj: LinearParams::new(store, &format!("{prefix}.out_proj"), inner, channels, false, 0.5, rng),
        }
    }

    /// Every parameter id owned by this block.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![
            self.norm.gamma,
            self.norm.beta,
            self.in_proj.weight,
            self.dwconv.kernel,
            self.dwconv.bias,
            self.out_norm.gamma,
            self.out_norm.beta,
            self.gate_proj.weight,
            self.out_proj.weight,
        ];
        v.extend(self.in_proj.bias);
        v.extend(self.gate_proj.bias);
        v.extend(self.out_proj.bias);
        for d in &self.ss2d.dirs {
            v.extend(d.ids());
        }
        v
    }
}

fn check_channels<S: Scalar>(tape: &Tape<S>, x: Var, c: usize, what: &str) -> Result<()> {
    let got = tape.shape(x).channels();
    if got != c {
        return Err(Error::dim(format!("{what} expects {c} channels, got {got}")));
    }
    Ok(())
}

/// `Norm(SS2D(SiLU(DWConv(Linear(normed)))))` for an already normalized input.
fn project_in_normed<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &Binding,
    p: &VssBlockParams,
    plan: &ScanPlan,
    normed: Var,
) -> Result<Var> {
    let x = p.in_proj.forward(tape, bind, normed)?;
    let x = p.dwconv.forward(tape, bind, x)?;
    let x = tape.silu(x);
    let y = ss2d_forward_planned(tape, bind, &p.ss2d, plan, x)?;
    p.out_norm.forward(tape, bind, y)
}

fn plan_for<S: Scalar>(tape: &Tape<S>, x: Var) -> ScanPlan {
    let s = tape.shape(x);
    ScanPlan::new(s.height(), s.width())
}

/// Projects `F̃` into the hidden state space: the VSS pipeline without gating.
pub fn project_in<S: Scalar>(tape: &mut Tape<S>, bind: &Binding, p: &VssBlockParams, x: Var) -> Result<Var> {
    check_channels(tape, x, p.channels, "project_in")?;
    let plan = plan_for(tape, x);
    let n = p.norm.forward(tape, bind, x)?;
    project_in_normed(tape, bind, p, &plan, n)
}

/// `z = SiLU(Linear(Norm(F̃)))`.
pub fn gate<S: Scalar>(tape: &mut Tape<S>, bind: &Binding, p: &VssBlockParams, x: Var) -> Result<Var> {
    check_channels(tape, x, p.channels, "gate")?;
    let n = p.norm.forward(tape, bind, x)?;
    let z = p.gate_proj.forward(tape, bind, n)?;
    Ok(tape.silu(z))
}

/// `x + OutProj(P_in(x) · SiLU(GateProj(Norm(x))))`.
pub fn vss_block<S: Scalar>(tape: &mut Tape<S>, bind: &Binding, p: &VssBlockParams, x: Var) -> Result<Var> {
    check_channels(tape, x, p.channels, "vss_block")?;
    let plan = plan_for(tape, x);
    vss_block_planned(tape, bind, p, &plan, x)
}

fn vss_block_planned<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &Binding,
    p: &VssBlockParams,
    plan: &ScanPlan,
    x: Var,
) -> Result<Var> {
    let n = p.norm.forward(tape, bind, x)?;
    let y = project_in_normed(tape, bind, p, plan, n)?;
    let z = p.gate_proj.forward(tape, bind, n)?;
    let z = tape.silu(z);
    let gated = tape.mul(y, z)?;
    let out = p.out_proj.forward(tape, bind, gated)?;
    tape.add(x, out)
}

/// `F̄ = Linear(y') + F̃`.
pub fn project_out<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &Binding,
    p: &VssBlockParams,
    y: Var,
    residual: Var,
) -> Result<Var> {
    check_channels(tape, y, p.inner, "project_out")?;
    let out = p.out_proj.forward(tape, bind, y)?;
    tape.add(out, residual)
}

/// Which cross-branch terms of the dual fusion are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DualAttention {
    /// `z_R · y_IR` in the RGB update.
    pub rgb_cross: bool,
    /// `z_IR · y_R` in the IR update.
    pub ir_cross: bool,
}

impl DualAttention {
    pub const FULL: DualAttention = DualAttention {
        rgb_cross: true,
        ir_cross: true,
    };
    pub const NONE: DualAttention = DualAttention {
        rgb_cross: false,
        ir_cross: false,
    };
}

impl Default for DualAttention {
    fn default() -> Self {
        Self::FULL
    }
}

/// `y'_R = y_R z_R + z_R y_IR`, `y'_IR = y_IR z_IR + z_IR y_R`, with each cross term optional.
pub fn dual_fuse<S: Scalar>(
    tape: &mut Tape<S>,
    y_r: Var,
    y_ir: Var,
    z_r: Var,
    z_ir: Var,
    dual: DualAttention,
) -> Result<(Var, Var)> {
    let self_r = tape.mul(y_r, z_r)?;
    let self_ir = tape.mul(y_ir, z_ir)?;
    let out_r = if dual.rgb_cross {
        let cross = tape.mul(z_r, y_ir)?;
        tape.add(self_r, cross)?
    } else {
        self_r
    };
    let out_ir = if dual.ir_cross {
        let cross = tape.mul(z_ir, y_r)?;
        tape.add(self_ir, cross)?
    } else {
        self_ir
    };
    Ok((out_r, out_ir))
}

/// Quarter-wise channel map: parts 1 and 3 from the first input, 2 and 4 from the second.
pub fn channel_swap_map(channels: usize) -> Result<Vec<ChannelSource>> {
    if !channels.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "channel swap needs C divisible by 4, got {channels}"
        )));
    }
    let q = channels / 4;
    Ok((0..channels)
        .map(|c| {
            if (c / q).is_multiple_of(2) {
                ChannelSource::First(c)
            } else {
                ChannelSource::Second(c)
            }
        })
        .collect())
}

pub fn channel_swap<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(format!(
            "channel swap shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let map: Rc<[ChannelSource]> = channel_swap_map(tape.shape(a).channels())?.into();
    tape.select_channels(a, b, map)
}

/// [`channel_swap`] on plain tensors.
pub fn channel_swap_tensors<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.check_same(b, "channel_swap")?;
    ops::select_channels(a, b, &channel_swap_map(a.shape().channels())?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FmbConfig {
    /// VSS blocks applied per branch after the swap.
    pub n_sscs: usize,
    /// Depth of the dual fusion stack.
    pub n_dssf: usize,
    pub use_sscs: bool,
    pub use_dssf: bool,
    /// Backbone stages (2..=5) that receive a fusion block.
    pub stages: Vec<usize>,
    pub dual: DualAttention,
    /// Applies SiLU a second time to the gates inside the dual fusion.
    pub gate_silu_twice: bool,
    pub expansion: usize,
    pub state_dim: usize,
    /// Forces `D = 0` in every scan.
    pub zero_skip: bool,
}

impl Default for FmbConfig {
    fn default() -> Self {
        FmbConfig {
            n_sscs: 1,
            n_dssf: 8,
            use_sscs: true,
            use_dssf: true,
            stages: vec![3, 4, 5],
            dual: DualAttention::FULL,
            gate_silu_twice: false,
            expansion: DEFAULT_EXPANSION,
            state_dim: DEFAULT_STATE_DIM,
            zero_skip: false,
        }
    }
}

impl FmbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_dssf == 0 {
            return Err(Error::Config("n_dssf must be at least 1".into()));
        }
        if self.n_sscs == 0 {
            return Err(Error::Config("n_sscs must be at least 1".into()));
        }
        if self.expansion == 0 || self.state_dim == 0 {
            return Err(Error::Config("expansion and state_dim must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one fusion stage is required".into()));
        }
        let mut seen = [false; 6];
        for &s in &self.stages {
            if !(2..=5).contains(&s) {
                return Err(Error::Config(format!("stage {s} is outside 2..=5")));
            }
            if seen[s] {
                return Err(Error::Config(format!("stage {s} listed twice")));
            }
            seen[s] = true;
        }
        Ok(())
    }

    /// Neither shallow nor deep fusion: the block reduces to `P = F_R + F_IR`.
    pub fn is_addition_only(&self) -> bool {
        !self.use_sscs && !self.use_dssf
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DssfLayer {
    pub r: VssBlockParams,
    pub ir: VssBlockParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FmbParams {
    pub channels: usize,
    pub sscs_r: Vec<VssBlockParams>,
    pub sscs_ir: Vec<VssBlockParams>,
    pub dssf: Vec<DssfLayer>,
}

impl FmbParams {
    /// Allocates only the parts enabled by `cfg`.
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: usize,
        cfg: &FmbConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        channel_swap_map(channels)?;
        let mut vss = |name: String, store: &mut ParamStore<S>| {
            let mut p = VssBlockParams::new(store, &name, channels, cfg.expansion, cfg.state_dim, rng);
            p.ss2d.set_zero_skip(cfg.zero_skip);
            p
        };
        let (mut sscs_r, mut sscs_ir, mut dssf) = (Vec::new(), Vec::new(), Vec::new());
        if cfg.use_sscs {
            for i in 0..cfg.n_sscs {
                sscs_r.push(vss(format!("{prefix}.sscs{i}.r"), store));
                sscs_ir.push(vss(format!("{prefix}.sscs{i}.ir"), store));
            }
        }
        if cfg.use_dssf {
            for k in 0..cfg.n_dssf {
                let r = vss(format!("{prefix}.dssf{k}.r"), store);
                let ir = vss(format!("{prefix}.dssf{k}.ir"), store);
                dssf.push(DssfLayer { r, ir });
            }
        }
        Ok(FmbParams {
            channels,
            sscs_r,
            sscs_ir,
            dssf,
        })
    }

    /// The same block with the RGB and IR parameter sets exchanged.
    pub fn swapped_branches(&self) -> Self {
        FmbParams {
            channels: self.channels,
            sscs_r: self.sscs_ir.clone(),
            sscs_ir: self.sscs_r.clone(),
            dssf: self
                .dssf
                .iter()
                .map(|l| DssfLayer {
                    r: l.ir.clone(),
                    ir: l.r.clone(),
                })
                .collect(),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for p in self.sscs_r.iter().chain(&self.sscs_ir) {
            v.extend(p.ids());
        }
        for l in &self.dssf {
            v.extend(l.r.ids());
            v.extend(l.ir.ids());
        }
        v
    }

    /// Out-projection weights of every VSS block and fusion layer.
    pub fn out_projections(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self
            .sscs_r
            .iter()
            .chain(&self.sscs_ir)
            .map(|p| p.out_proj.weight)
            .collect();
        for l in &self.dssf {
            v.push(l.r.out_proj.weight);
            v.push(l.ir.out_proj.weight);
        }
        v
    }
}

/// Shallow fusion: swap quarter channels across modalities, then VSS per branch.
pub fn sscs<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &Binding,
    params: &FmbParams,
    f_r: Var,
    f_ir: Var,
) -> Result<(Var, Var)> {
    let plan = plan_for(tape, f_r);
    let mut t_r = channel_swap(tape, f_r, f_ir)?;
    let mut t_ir = channel_swap(tape, f_ir, f_r)?;
    for (pr, pir) in params.sscs_r.iter().zip(&params.sscs_ir) {
        t_r = vss_block_planned(tape, bind, pr, &plan, t_r)?;
        t_ir = vss_block_planned(tape, bind, pir, &plan, t_ir)?;
    }
    Ok((t_r, t_ir))
}

/// One dual fusion layer: project in, gate, fuse across branches, project out.
pub fn dssf_layer<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &Binding,
    layer: &DssfLayer,
    cfg: &FmbConfig,
    plan: &ScanPlan,
    f_r: Var,
    f_ir: Var,
) -> Result<(Var, Var)> {
    let n_r = layer.r.norm.forward(tape, bind, f_r)?;
    let n_ir = layer.ir.norm.forward(tape, bind, f_ir)?;
    let y_r = project_in_normed(tape, bind, &layer.r, plan, n_r)?;
    let y_ir = project_in_normed(tape, bind, &layer.ir, plan, n_ir)?;
    let z_r = layer.r.gate_proj.forward(tape, bind, n_r)?;
    let mut z_r = tape.silu(z_r);
    let z_ir = layer.ir.gate_proj.forward(tape, bind, n_ir)?;
    let mut z_ir = tape.silu(z_ir);
    if cfg.gate_silu_twice {
        z_r = tape.silu(z_r);
        z_ir = tape.silu(z_ir);
    }
    let (yp_r, yp_ir) = dual_fuse(tape, y_r, y_ir, z_r, z_ir, cfg.dual)?;
    let out_r = project_out(tape, bind, &layer.r, yp_r, f_r)?;
    let out_ir = project_out(tape, bind, &layer.ir, yp_ir, f_ir)?;
    Ok((out_r, out_ir))
}

/// Deep fusion: the dual fusion layer stacked, each layer feeding the next.
pub fn dssf<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &Binding,
    params: &FmbParams,
    cfg: &FmbConfig,
    f_r: Var,
    f_ir: Var,
) -> Result<(Var, Var)> {
    let plan = plan_for(tape, f_r);
    let (mut r, mut ir) = (f_r, f_ir);
    for layer in &params.dssf {
        (r, ir) = dssf_layer(tape, bind, layer, cfg, &plan, r, ir)?;
    }
    Ok((r, ir))
}

#[derive(Clone, Copy, Debug)]
pub struct FmbOutput {
    pub r: Var,
    pub ir: Var,
    pub fused: Var,
}

/// Full fusion block. With both submodules disabled the inputs pass through
/// unchanged and `P = F_R + F_IR`.
pub fn fmb<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &Binding,
    params: &FmbParams,
    cfg: &FmbConfig,
    f_r: Var,
    f_ir: Var,
) -> Result<FmbOutput> {
    if tape.shape(f_r) != tape.shape(f_ir) {
        return Err(Error::dim(format!(
            "fusion inputs {:?} and {:?} differ",
            tape.shape(f_r),
            tape.shape(f_ir)
        )));
    }
    check_channels(tape, f_r, params.channels, "fmb")?;
    if cfg.is_addition_only() {
        let fused = tape.add(f_r, f_ir)?;
        return Ok(FmbOutput {
            r: f_r,
            ir: f_ir,
            fused,
        });
    }
    let (mut r, mut ir) = (f_r, f_ir);
    if cfg.use_sscs {
        (r, ir) = sscs(tape, bind, params, r, ir)?;
    }
    if cfg.use_dssf {
        (r, ir) = dssf(tape, bind, params, cfg, r, ir)?;
    }
    let hat_r = tape.add(f_r, r)?;
    let hat_ir = tape.add(f_ir, ir)?;
    let fused = tape.add(hat_r, hat_ir)?;
    Ok(FmbOutput {
        r: hat_r,
        ir: hat_ir,
        fused,
    })
}

/// Plain-tensor result of [`fmb_eval`].
#[derive(Clone, Debug, PartialEq)]
pub struct FmbTensors<S = f32> {
    pub r: Tensor<S>,
    pub ir: Tensor<S>,
    pub fused: Tensor<S>,
}

/// Evaluates [`fmb`] without recording gradients.
pub fn fmb_eval<S: Scalar>(
    store: &ParamStore<S>,
    params: &FmbParams,
    cfg: &FmbConfig,
    f_r: &Tensor<S>,
    f_ir: &Tensor<S>,
) -> Result<FmbTensors<S>> {
    let mut tape = Tape::new();
    let bind = store.bind_constants(&mut tape);
    let a = tape.constant(f_r.clone());
    let b = tape.constant(f_ir.clone());
    let out = fmb(&mut tape, &bind, params, cfg, a, b)?;
    Ok(FmbTensors {
        r: tape.value(out.r).clone(),
        ir: tape.value(out.ir).clone(),
        fused: tape.value(out.fused).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swap_map_quarters() {
        let m = channel_swap_map(8).unwrap();
        use ChannelSource::*;
        assert_eq!(
            m,
            vec![First(0), First(1), Second(2), Second(3), First(4), First(5), Second(6), Second(7)]
        );
        assert!(matches!(channel_swap_map(6), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(FmbConfig::default().validate().is_ok());
        let bad = FmbConfig {
            n_dssf: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = FmbConfig {
            stages: vec![1, 3, 4],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = FmbConfig {
            stages: vec![3, 3, 4],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
