//! Fused CPU kernels for the elementwise-heavy layers. Composed from
//! primitive tensor ops these dominate a training step through their
//! backward graphs (broadcast reductions, several temporaries per op).

use candle_core::{
    backend::BackendStorage, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor, WithDType,
};

fn contiguous<'a, T: WithDType>(v: &'a [T], l: &Layout, op: &str) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("{op} expects contiguous input"),
    }
}

macro_rules! map1 {
    ($op:expr, $s:expr, $l:expr, |$a:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(v) => {
                let $a = contiguous(v, $l, $op)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(v) => {
                let $a = contiguous(v, $l, $op)?;
                CpuStorage::F64($body)
            }
            CpuStorage::F16(v) => {
                let $a = contiguous(v, $l, $op)?;
                CpuStorage::F16($body)
            }
            other => candle_core::bail!("{}: unsupported dtype {:?}", $op, other.dtype()),
        }
    };
}

macro_rules! map2 {
    ($op:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(x), CpuStorage::F32(y)) => {
                let ($a, $b) = (contiguous(x, $l1, $op)?, contiguous(y, $l2, $op)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(x), CpuStorage::F64(y)) => {
                let ($a, $b) = (contiguous(x, $l1, $op)?, contiguous(y, $l2, $op)?);
                CpuStorage::F64($body)
            }
            (CpuStorage::F16(x), CpuStorage::F16(y)) => {
                let ($a, $b) = (contiguous(x, $l1, $op)?, contiguous(y, $l2, $op)?);
                CpuStorage::F16($body)
            }
            (x, y) => candle_core::bail!("{}: unsupported dtypes {:?}/{:?}", $op, x.dtype(), y.dtype()),
        }
    };
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------- SiLU

struct Silu;
struct SiluGrad;

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "histogen-silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        fn run<T: WithDType>(x: &[T]) -> Vec<T> {
            x.iter()
                .map(|v| {
                    let v = v.to_f64();
                    T::from_f64(v * sigmoid(v))
                })
                .collect()
        }
        Ok((map1!("silu", s, l, |x| run(x)), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SiluGrad)?))
    }
}

impl CustomOp2 for SiluGrad {
    fn name(&self) -> &'static str {
        "histogen-silu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        fn run<T: WithDType>(x: &[T], g: &[T]) -> Vec<T> {
            x.iter()
                .zip(g)
                .map(|(v, g)| {
                    let v = v.to_f64();
                    let s = sigmoid(v);
                    T::from_f64(g.to_f64() * s * (1.0 + v * (1.0 - s)))
                })
                .collect()
        }
        Ok((map2!("silu-grad", s1, l1, s2, l2, |x, g| run(x, g)), l1.shape().clone()))
    }
}

/// `x · σ(x)` with a single-pass backward.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Silu)
}

// ---------------------------------------------------------- upsampling

struct Upsample2;
struct Downsum2;

fn dims4(l: &Layout) -> Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "histogen-upsample2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l)?;
        fn run<T: WithDType>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
            let mut out = vec![T::zero(); planes * 4 * h * w];
            for p in 0..planes {
                let src = &x[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let v = src[y * w + x];
                        let o = 2 * y * 2 * w + 2 * x;
                        dst[o] = v;
                        dst[o + 1] = v;
                        dst[o + 2 * w] = v;
                        dst[o + 2 * w + 1] = v;
                    }
                }
            }
            out
        }
        Ok((map1!("upsample2", s, l, |x| run(x, b * c, h, w)), Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Downsum2)?))
    }
}

impl CustomOp1 for Downsum2 {
    fn name(&self) -> &'static str {
        "histogen-downsum2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h2, w2) = dims4(l)?;
        let (h, w) = (h2 / 2, w2 / 2);
        fn run<T: WithDType>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
            let mut out = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let o = 2 * y * 2 * w + 2 * x;
                        out[p * h * w + y * w + x] = src[o] + src[o + 1] + src[o + 2 * w] + src[o + 2 * w + 1];
                    }
                }
            }
            out
        }
        Ok((map1!("downsum2", s, l, |g| run(g, b * c, h, w)), Shape::from((b, c, h, w))))
    }
}

/// Nearest-neighbour 2× upsampling of `(B, C, H, W)`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2)
}

// ------------------------------------------------------ channel bias

struct BiasAdd;
struct ChannelSum;

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "histogen-bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1)?;
        fn run<T: WithDType>(x: &[T], bias: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
            let mut out = x.to_vec();
            for bi in 0..b {
                for (ch, bv) in bias.iter().enumerate().take(c) {
                    for v in &mut out[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                        *v += *bv;
                    }
                }
            }
            out
        }
        Ok((map2!("bias-add", s1, l1, s2, l2, |x, bias| run(x, bias, b, c, h * w)), l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, _b: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let db = grad.contiguous()?.apply_op1_no_bwd(&ChannelSum)?;
        Ok((Some(grad.clone()), Some(db)))
    }
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "histogen-channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l)?;
        fn run<T: WithDType>(g: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
            let mut out = vec![0f64; c];
            for bi in 0..b {
                for (ch, o) in out.iter_mut().enumerate() {
                    *o += g[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().map(|v| v.to_f64()).sum::<f64>();
                }
            }
            out.into_iter().map(T::from_f64).collect()
        }
        Ok((map1!("channel-sum", s, l, |g| run(g, b, c, h * w)), Shape::from(c)))
    }
}

/// `x + bias` with `x` (B, C, H, W) and `bias` (C).
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    if bias.dims() != [c] {
        candle_core::bail!("channel bias {:?} for {c} channels", bias.dims());
    }
    x.contiguous()?.apply_op2(&bias.contiguous()?, BiasAdd)
}

// ---------------------------------------------------------- group norm

#[derive(Clone, Copy)]
struct GroupNormOp {
    groups: usize,
    eps: f64,
}

struct GroupNormGrad(GroupNormOp);

/// Per-(batch, group) mean and reciprocal std, accumulated in f64.
fn group_stats<T: WithDType>(x: &[T], n_groups: usize, group_len: usize, eps: f64) -> Vec<(f64, f64)> {
    (0..n_groups)
        .map(|g| {
            let v = &x[g * group_len..(g + 1) * group_len];
            let mean = v.iter().map(|a| a.to_f64()).sum::<f64>() / group_len as f64;
            let var = v.iter().map(|a| (a.to_f64() - mean).powi(2)).sum::<f64>() / group_len as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "histogen-group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1)?;
        let op = *self;
        fn run<T: WithDType>(op: GroupNormOp, x: &[T], gamma: &[T], beta: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
            let cpg = c / op.groups;
            let stats = group_stats(x, b * op.groups, cpg * hw, op.eps);
            let mut out = vec![T::zero(); x.len()];
            for bi in 0..b {
                for ch in 0..c {
                    let (mean, rstd) = stats[bi * op.groups + ch / cpg];
                    let (ga, be) = (gamma[ch].to_f64(), beta[ch].to_f64());
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        out[i] = T::from_f64((x[i].to_f64() - mean) * rstd * ga + be);
                    }
                }
            }
            out
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(be)) => CpuStorage::F32(run(
                op,
                contiguous(x, l1, "group-norm")?,
                contiguous(g, l2, "group-norm")?,
                contiguous(be, l3, "group-norm")?,
                b,
                c,
                h * w,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(be)) => CpuStorage::F64(run(
                op,
                contiguous(x, l1, "group-norm")?,
                contiguous(g, l2, "group-norm")?,
                contiguous(be, l3, "group-norm")?,
                b,
                c,
                h * w,
            )),
            (x, _, _) => candle_core::bail!("group-norm: unsupported dtype {:?}", x.dtype()),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let c = gamma.dim(0)?;
        let packed = x
            .contiguous()?
            .apply_op3_no_bwd(&gamma.contiguous()?, &grad.contiguous()?, &GroupNormGrad(*self))?;
        let n = x.elem_count();
        let dx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let dgamma = packed.narrow(0, n, c)?;
        let dbeta = packed.narrow(0, n + c, c)?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

impl CustomOp3 for GroupNormGrad {
    fn name(&self) -> &'static str {
        "histogen-group-norm-grad"
    }

    /// Output: `[dx (flattened) | dgamma (C) | dbeta (C)]`.
    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1)?;
        let op = self.0;
        fn run<T: WithDType>(op: GroupNormOp, x: &[T], gamma: &[T], dy: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
            let cpg = c / op.groups;
            let glen = cpg * hw;
            let stats = group_stats(x, b * op.groups, glen, op.eps);
            let mut dx = vec![0f64; x.len()];
            let mut dgamma = vec![0f64; c];
            let mut dbeta = vec![0f64; c];
            for bi in 0..b {
                for g in 0..op.groups {
                    let (mean, rstd) = stats[bi * op.groups + g];
                    // means over the group of dxhat and dxhat·xhat
                    let (mut m1, mut m2) = (0f64, 0f64);
                    for ch in g * cpg..(g + 1) * cpg {
                        let ga = gamma[ch].to_f64();
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            let xhat = (x[i].to_f64() - mean) * rstd;
                            let d = dy[i].to_f64();
                            dgamma[ch] += d * xhat;
                            dbeta[ch] += d;
                            m1 += d * ga;
                            m2 += d * ga * xhat;
                        }
                    }
                    m1 /= glen as f64;
                    m2 /= glen as f64;
                    for ch in g * cpg..(g + 1) * cpg {
                        let ga = gamma[ch].to_f64();
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            let xhat = (x[i].to_f64() - mean) * rstd;
                            dx[i] = rstd * (dy[i].to_f64() * ga - m1 - xhat * m2);
                        }
                    }
                }
            }
            dx.into_iter().chain(dgamma).chain(dbeta).map(T::from_f64).collect()
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(d)) => CpuStorage::F32(run(
                op,
                contiguous(x, l1, "group-norm-grad")?,
                contiguous(g, l2, "group-norm-grad")?,
                contiguous(d, l3, "group-norm-grad")?,
                b,
                c,
                h * w,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(d)) => CpuStorage::F64(run(
                op,
                contiguous(x, l1, "group-norm-grad")?,
                contiguous(g, l2, "group-norm-grad")?,
                contiguous(d, l3, "group-norm-grad")?,
                b,
                c,
                h * w,
            )),
            (x, _, _) => candle_core::bail!("group-norm-grad: unsupported dtype {:?}", x.dtype()),
        };
        Ok((out, Shape::from(b * c * h * w + 2 * c)))
    }
}

/// Group normalization with per-channel affine, f32/f64 only.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if groups == 0 || c % groups != 0 || gamma.dims() != [c] || beta.dims() != [c] {
        candle_core::bail!("group_norm: {c} channels, {groups} groups, affine {:?}", gamma.dims());
    }
    x.contiguous()?.apply_op3(gamma, beta, GroupNormOp { groups, eps })
}
