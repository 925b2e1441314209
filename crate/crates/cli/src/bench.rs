//! Wall-clock scaling of the selective scan, the four-direction scan and a
//! naive quadratic cross-attention over doubling sequence lengths.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use fmamba_core::ss2d::Ss2dParams;
use fmamba_core::ssm::{s6_forward, Sequence, SsmParams};
use fmamba_core::{ss2d::ss2d_eval, Error, ParamStore, Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_SIZES: &[usize] = &[256, 512, 1024, 2048, 4096];
pub const REPS: usize = 5;
pub const CSV_HEADER: &str = "kernel,size,mean_ms,std_ms,reps";
/// Channel width of every kernel.
pub const WIDTH: usize = 16;
pub const STATE: usize = 16;
/// Row length of the 2D map benchmarked by `ss2d`; sizes must be multiples of it.
pub const SS2D_ROW: usize = 16;

/// Largest per-doubling time ratio accepted for the linear-time scan.
pub const SCAN_MAX_GROWTH: f64 = 2.6;
/// Smallest per-doubling time ratio expected from quadratic attention.
pub const ATTENTION_MIN_GROWTH: f64 = 3.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    S6,
    Ss2d,
    Attention,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::S6, Kernel::Ss2d, Kernel::Attention];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::S6 => "s6_forward",
            Kernel::Ss2d => "ss2d_forward",
            Kernel::Attention => "cross_attention",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kernel: Kernel,
    pub size: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub reps: usize,
}

/// Parses a comma-separated size list such as `256,512,1024`.
pub fn parse_sizes(text: &str) -> Result<Vec<usize>> {
    let sizes: Vec<usize> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("`{s}` is not a size")))
        })
        .collect::<Result<_>>()?;
    if sizes.is_empty() || sizes.iter().any(|&s| s == 0 || s % SS2D_ROW != 0) {
        return Err(Error::Usage(format!("sizes must be positive multiples of {SS2D_ROW}")));
    }
    Ok(sizes)
}

/// `softmax(Q Kᵀ / √d) V` with queries from one token set and keys/values from the other.
pub fn cross_attention(q: &[f32], kv: &[f32], len: usize, d: usize) -> Vec<f32> {
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; len * d];
    let mut scores = vec![0.0f32; len];
    for i in 0..len {
        let qi = &q[i * d..(i + 1) * d];
        let mut max = f32::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &kv[j * d..(j + 1) * d];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
            max = max.max(*s);
        }
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, s) in scores.iter().enumerate() {
            let w = s / z;
            for (o, v) in oi.iter_mut().zip(&kv[j * d..(j + 1) * d]) {
                *o += w * v;
            }
        }
    }
    out
}

fn stats(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn time_ms(reps: usize, mut f: impl FnMut()) -> Vec<f64> {
    // one untimed warm-up call
    f();
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect()
}

/// Times one kernel at one length.
pub fn measure(kernel: Kernel, size: usize, reps: usize, seed: u64) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let samples = match kernel {
        Kernel::S6 => {
            let mut store = ParamStore::<f32>::new();
            let p = SsmParams::new(&mut store, "s6", WIDTH, STATE, &mut ChaCha8Rng::seed_from_u64(seed));
            let x = Sequence::new(size, WIDTH, random(size * WIDTH))?;
            let mut err = None;
            let t = time_ms(reps, || {
                if let Err(e) = s6_forward(&x, &store, &p).map(black_box) {
                    err = Some(e);
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            t
        }
        Kernel::Ss2d => {
            let mut store = ParamStore::<f32>::new();
            let p = Ss2dParams::new(&mut store, "ss2d", WIDTH, STATE, &mut ChaCha8Rng::seed_from_u64(seed));
            let shape = Shape::new(1, WIDTH, size / SS2D_ROW, SS2D_ROW);
            let x = Tensor::from_vec(shape, random(shape.numel()))?;
            let mut err = None;
            let t = time_ms(reps, || {
                if let Err(e) = ss2d_eval(&x, &store, &p).map(black_box) {
                    err = Some(e);
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            t
        }
        Kernel::Attention => {
            let q = random(size * WIDTH);
            let kv = random(size * WIDTH);
            time_ms(reps, || {
                black_box(cross_attention(&q, &kv, size, WIDTH));
            })
        }
    };
    let (mean_ms, std_ms) = stats(&samples);
    Ok(BenchRow {
        kernel,
        size,
        mean_ms,
        std_ms,
        reps,
    })
}

/// Every kernel at every size: `3 · sizes.len()` rows, kernel-major.
pub fn run(sizes: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(Kernel::ALL.len() * sizes.len());
    for k in Kernel::ALL {
        for &s in sizes {
            rows.push(measure(k, s, reps, seed)?);
        }
    }
    Ok(rows)
}

pub fn csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{:.6},{:.6},{}", r.kernel.name(), r.size, r.mean_ms, r.std_ms, r.reps).unwrap();
    }
    out
}

/// `mean(L_{i+1}) / mean(L_i)` for consecutive sizes of one kernel.
pub fn growth(rows: &[BenchRow], kernel: Kernel) -> Vec<(usize, usize, f64)> {
    let r: Vec<&BenchRow> = rows.iter().filter(|r| r.kernel == kernel).collect();
    r.windows(2)
        .map(|w| (w[0].size, w[1].size, w[1].mean_ms / w[0].mean_ms))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ScalingVerdict {
    pub passed: bool,
    pub scan_growth: Vec<(usize, usize, f64)>,
    pub attention_growth: Vec<(usize, usize, f64)>,
}

impl ScalingVerdict {
    pub fn summary(&self) -> String {
        let fmt = |g: &[(usize, usize, f64)]| {
            g.iter()
                .map(|(a, b, r)| format!("{a}->{b}: {r:.2}"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        format!(
            "scan growth [{}] (max {SCAN_MAX_GROWTH}); attention growth [{}] (min {ATTENTION_MIN_GROWTH})",
            fmt(&self.scan_growth),
            fmt(&self.attention_growth)
        )
    }
}

/// Checks every doubling of `sizes`: scan ratio at most [`SCAN_MAX_GROWTH`],
/// attention ratio at least [`ATTENTION_MIN_GROWTH`].
pub fn scaling_verdict(rows: &[BenchRow]) -> ScalingVerdict {
    let scan_growth = growth(rows, Kernel::S6);
    let attention_growth = growth(rows, Kernel::Attention);
    let passed = !scan_growth.is_empty()
        && scan_growth.iter().all(|g| g.2 <= SCAN_MAX_GROWTH)
        && attention_growth.iter().all(|g| g.2 >= ATTENTION_MIN_GROWTH);
    ScalingVerdict {
        passed,
        scan_growth,
        attention_growth,
    }
}

/// Runs the scan and attention kernels over `sizes` and checks their growth,
/// measuring a second time if the first attempt fails.
pub fn check_scaling(sizes: &[usize], seed: u64) -> Result<(ScalingVerdict, usize)> {
    let mut last = None;
    for attempt in 1..=2 {
        let mut rows = Vec::new();
        for k in [Kernel::S6, Kernel::Attention] {
            for &s in sizes {
                rows.push(measure(k, s, REPS, seed)?);
            }
        }
        let v = scaling_verdict(&rows);
        if v.passed {
            return Ok((v, attempt));
        }
        last = Some(v);
    }
    Ok((last.expect("two attempts ran"), 2))
}
