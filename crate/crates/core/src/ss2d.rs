//! Four-direction 2D selective scan.
//!
//! A `(B, D, H, W)` map is unrolled into four length-`H*W` sequences:
//! row-major, column-major, and the reversal of each. Each sequence is run
//! through its own selective scan, mapped back to its spatial position and the
//! four maps are summed.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Binding, ParamStore};
use crate::scalar::Scalar;
use crate::ssm::{SsmParams, S6};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    RowFwd,
    ColFwd,
    RowBwd,
    ColBwd,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowFwd,
        Direction::ColFwd,
        Direction::RowBwd,
        Direction::ColBwd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::RowFwd => "row_fwd",
            Direction::ColFwd => "col_fwd",
            Direction::RowBwd => "row_bwd",
            Direction::ColBwd => "col_bwd",
        }
    }

    /// `order[k]` is the row-major spatial index visited at step `k`.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let row: Vec<usize> = (0..h * w).collect();
        let col: Vec<usize> = (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect();
        match self {
            Direction::RowFwd => row,
            Direction::ColFwd => col,
            Direction::RowBwd => row.into_iter().rev().collect(),
            Direction::ColBwd => col.into_iter().rev().collect(),
        }
    }

    /// `inverse[p]` is the step at which spatial index `p` is visited.
    pub fn inverse_order(self, h: usize, w: usize) -> Vec<usize> {
        invert(&self.order(h, w))
    }
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// The four directional sequences of one map, each stored as `(B, D, 1, H*W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanSequences<S = f32> {
    pub height: usize,
    pub width: usize,
    /// Indexed like [`Direction::ALL`].
    pub seqs: [Tensor<S>; 4],
}

impl<S: Scalar> ScanSequences<S> {
    pub fn get(&self, dir: Direction) -> &Tensor<S> {
        &self.seqs[dir as usize]
    }

    pub fn get_mut(&mut self, dir: Direction) -> &mut Tensor<S> {
        &mut self.seqs[dir as usize]
    }
}

pub fn scan_expand<S: Scalar>(x: &Tensor<S>) -> ScanSequences<S> {
    let (h, w) = (x.shape().height(), x.shape().width());
    let seqs = Direction::ALL
        .map(|dir| ops::gather_spatial(x, &dir.order(h, w), 1, h * w).expect("valid permutation"));
    ScanSequences {
        height: h,
        width: w,
        seqs,
    }
}

/// Un-permutes every sequence back to `H x W` and sums the four maps.
pub fn scan_merge<S: Scalar>(seqs: &ScanSequences<S>) -> Result<Tensor<S>> {
    let (h, w) = (seqs.height, seqs.width);
    let first = seqs.seqs[0].shape();
    let mut maps = Vec::with_capacity(4);
    for dir in Direction::ALL {
        let s = seqs.get(dir);
        if s.shape().spatial() != h * w || s.shape().with_spatial(1, 1) != first.with_spatial(1, 1) {
            return Err(Error::dim(format!(
                "{} sequence {:?} does not fit a {h}x{w} map",
                dir.name(),
                s.shape()
            )));
        }
        maps.push(ops::gather_spatial(s, &dir.inverse_order(h, w), h, w)?);
    }
    // Pairwise so that four identical maps sum to exactly 4x.
    maps[0].add(&maps[1])?.add(&maps[2].add(&maps[3])?)
}

/// Independent selective-scan parameters for each direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Ss2dParams {
    /// Indexed like [`Direction::ALL`].
    pub dirs: [SsmParams; 4],
}

impl Ss2dParams {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        dim: usize,
        state: usize,
        rng: &mut R,
    ) -> Self {
        let dirs = Direction::ALL
            .map(|d| SsmParams::new(store, &format!("{prefix}.{}", d.name()), dim, state, rng));
        Ss2dParams { dirs }
    }

    pub fn set_zero_skip(&mut self, zero: bool) {
        for d in &mut self.dirs {
            d.zero_skip = zero;
        }
    }
}

/// Scan orders for one map size, shared across calls through `Rc`.
#[derive(Clone, Debug)]
pub struct ScanPlan {
    pub height: usize,
    pub width: usize,
    orders: [Rc<[usize]>; 4],
    inverses: [Rc<[usize]>; 4],
}

impl ScanPlan {
    pub fn new(height: usize, width: usize) -> Self {
        ScanPlan {
            height,
            width,
            orders: Direction::ALL.map(|d| d.order(height, width).into()),
            inverses: Direction::ALL.map(|d| d.inverse_order(height, width).into()),
        }
    }
}

/// `scan_merge(S6_dir(scan_expand(x)))` on the tape.
pub fn ss2d_forward<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &Binding,
    params: &Ss2dParams,
    x: Var,
) -> Result<Var> {
    let Shape([_, _, h, w]) = tape.shape(x);
    let plan = ScanPlan::new(h, w);
    ss2d_forward_planned(tape, bind, params, &plan, x)
}

pub fn ss2d_forward_planned<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &Binding,
    params: &Ss2dParams,
    plan: &ScanPlan,
    x: Var,
) -> Result<Var> {
    let (h, w) = (plan.height, plan.width);
    if tape.shape(x).height() != h || tape.shape(x).width() != w {
        return Err(Error::dim(format!(
            "scan plan is {h}x{w}, input is {:?}",
            tape.shape(x)
        )));
    }
    let mut maps = [x; 4];
    for (i, p) in params.dirs.iter().enumerate() {
        let seq = tape.gather_spatial(x, plan.orders[i].clone(), 1, h * w)?;
        let y = S6 { params: p }.forward(tape, bind, seq)?;
        maps[i] = tape.gather_spatial(y, plan.inverses[i].clone(), h, w)?;
    }
    let a = tape.add(maps[0], maps[1])?;
    let b = tape.add(maps[2], maps[3])?;
    tape.add(a, b)
}

/// Evaluates [`ss2d_forward`] without recording gradients.
pub fn ss2d_eval<S: Scalar>(x: &Tensor<S>, store: &ParamStore<S>, params: &Ss2dParams) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let bind = store.bind_constants(&mut tape);
    let xv = tape.constant(x.clone());
    let y = ss2d_forward(&mut tape, &bind, params, xv)?;
    Ok(tape.value(y).clone())
}
