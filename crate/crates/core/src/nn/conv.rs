//! 2-D convolution as a custom op: im2col + gemm forward, with explicit
//! input/weight gradient kernels. The stock CPU backward is several times
//! slower than its forward at the sizes the toy pipeline trains on.

use candle_core::{backend::BackendStorage, CpuStorage, CustomOp2, Layout, Result, Shape, Tensor, WithDType};
use half::f16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

trait Elem: WithDType + 'static {}
impl Elem for f32 {}
impl Elem for f64 {}
impl Elem for f16 {}

fn parallelism() -> gemm::Parallelism {
    match rayon::current_num_threads() {
        0 | 1 => gemm::Parallelism::None,
        n => gemm::Parallelism::Rayon(n),
    }
}

/// `dst (m×n) [+]= op(a) (m×k) · op(b) (k×n)`, all buffers row-major.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Elem>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
) {
    assert!(dst.len() >= m * n && a.len() >= m * k && b.len() >= k * n);
    let (a_cs, a_rs) = if a_transposed { (m as isize, 1) } else { (1, k as isize) };
    let (b_cs, b_rs) = if b_transposed { (k as isize, 1) } else { (1, n as isize) };
    // SAFETY: the asserts above bound every index gemm touches for these strides.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            a_cs,
            a_rs,
            b.as_ptr(),
            b_cs,
            b_rs,
            T::one(),
            T::one(),
            false,
            false,
            false,
            parallelism(),
        )
    }
}

/// Output columns `ox` whose input column `ox·s + j − p` lies in `[0, width)`.
fn valid_range(g: &Geometry, j: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.padding);
    let lo = if j >= p { 0 } else { (p - j).div_ceil(s) };
    let hi = if g.width + p > j { ((g.width + p - j - 1) / s + 1).min(g.out_w) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Elem>(g: &Geometry, x: &[T], col: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let hw = g.out_len();
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..k {
            for j in 0..k {
                let row = &mut col[((c * k + i) * k + j) * hw..][..hw];
                let (lo, hi) = valid_range(g, j);
                for oy in 0..g.out_h {
                    let y = (oy * s + i) as isize - p as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let x0 = lo * s + j - p;
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (n, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[x0 + n * s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Elem>(g: &Geometry, col: &[T], x: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let hw = g.out_len();
    for c in 0..g.in_ch {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..k {
            for j in 0..k {
                let row = &col[((c * k + i) * k + j) * hw..][..hw];
                let (lo, hi) = valid_range(g, j);
                if lo >= hi {
                    continue;
                }
                let x0 = lo * s + j - p;
                for oy in 0..g.out_h {
                    let y = (oy * s + i) as isize - p as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    let src = &row[oy * g.out_w + lo..oy * g.out_w + hi];
                    if s == 1 {
                        for (d, v) in dst[x0..x0 + src.len()].iter_mut().zip(src) {
                            *d += *v;
                        }
                    } else {
                        for (n, v) in src.iter().enumerate() {
                            dst[x0 + n * s] += *v;
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Elem>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let (ckk, hw) = (g.patch_len(), g.out_len());
    let in_len = g.in_ch * g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.out_ch * hw];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * hw] };
    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        let ob = &mut out[b * g.out_ch * hw..(b + 1) * g.out_ch * hw];
        matmul(g.out_ch, hw, ckk, ob, false, w, false, cols, false);
    }
    out
}

fn grad_input<T: Elem>(g: &Geometry, w: &[T], gout: &[T]) -> Vec<T> {
    let (ckk, hw) = (g.patch_len(), g.out_len());
    let in_len = g.in_ch * g.height * g.width;
    let mut gx = vec![T::zero(); g.batch * in_len];
    let mut gcol = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * hw] };
    for b in 0..g.batch {
        let gb = &gout[b * g.out_ch * hw..(b + 1) * g.out_ch * hw];
        let gxb = &mut gx[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            matmul(ckk, hw, g.out_ch, gxb, false, w, true, gb, false);
        } else {
            matmul(ckk, hw, g.out_ch, &mut gcol, false, w, true, gb, false);
            col2im_add(g, &gcol, gxb);
        }
    }
    gx
}

fn grad_weight<T: Elem>(g: &Geometry, x: &[T], gout: &[T]) -> Vec<T> {
    let (ckk, hw) = (g.patch_len(), g.out_len());
    let in_len = g.in_ch * g.height * g.width;
    // Accumulated transposed (ckk × out): gemm is several times faster in
    // this orientation than with the long reduction on the right operand.
    let mut gwt = vec![T::zero(); ckk * g.out_ch];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * hw] };
    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        let gb = &gout[b * g.out_ch * hw..(b + 1) * g.out_ch * hw];
        matmul(ckk, g.out_ch, hw, &mut gwt, b > 0, cols, false, gb, true);
    }
    let mut gw = vec![T::zero(); g.out_ch * ckk];
    for r in 0..ckk {
        for o in 0..g.out_ch {
            gw[o * ckk + r] = gwt[r * g.out_ch + o];
        }
    }
    gw
}

fn slice<'a, T: WithDType>(v: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("conv2d expects contiguous operands"),
    }
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let ($a, $b) = (slice(a, $l1)?, slice(b, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let ($a, $b) = (slice(a, $l1)?, slice(b, $l2)?);
                CpuStorage::F64($body)
            }
            // f16 storage with f32 accumulation
            (CpuStorage::F16(a), CpuStorage::F16(b)) => {
                let a: Vec<f32> = slice(a, $l1)?.iter().map(|v| v.to_f32()).collect();
                let b: Vec<f32> = slice(b, $l2)?.iter().map(|v| v.to_f32()).collect();
                let ($a, $b) = (a.as_slice(), b.as_slice());
                let out: Vec<f32> = $body;
                CpuStorage::F16(out.into_iter().map(f16::from_f32).collect())
            }
            (a, b) => candle_core::bail!(
                "conv2d: unsupported dtype pair {:?}/{:?}",
                a.dtype(),
                b.dtype()
            ),
        }
    };
}

struct Conv2dForward(Geometry);
struct Conv2dGradInput(Geometry);
struct Conv2dGradWeight(Geometry);

impl CustomOp2 for Conv2dForward {
    fn name(&self) -> &'static str {
        "histogen-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch2!(s1, l1, s2, l2, |x, w| forward(g, x, w));
        Ok((out, Shape::from((g.batch, g.out_ch, g.out_h, g.out_w))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = w.apply_op2_no_bwd(&grad, &Conv2dGradInput(self.0))?;
        let gw = x.apply_op2_no_bwd(&grad, &Conv2dGradWeight(self.0))?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for Conv2dGradInput {
    fn name(&self) -> &'static str {
        "histogen-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch2!(s1, l1, s2, l2, |w, gout| grad_input(g, w, gout));
        Ok((out, Shape::from((g.batch, g.in_ch, g.height, g.width))))
    }
}

impl CustomOp2 for Conv2dGradWeight {
    fn name(&self) -> &'static str {
        "histogen-conv2d-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch2!(s1, l1, s2, l2, |x, gout| grad_weight(g, x, gout));
        Ok((out, Shape::from((g.out_ch, g.in_ch, g.kernel, g.kernel))))
    }
}

/// Square-kernel convolution of `x` (B×C×H×W) with `w` (O×C×k×k), no bias.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (batch, in_ch, height, width) = x.dims4()?;
    let (out_ch, w_in, kernel, k2) = w.dims4()?;
    if w_in != in_ch || kernel != k2 {
        candle_core::bail!(
            "conv2d: weight {:?} incompatible with input {:?}",
            w.dims(),
            x.dims()
        );
    }
    if stride == 0 || height + 2 * padding < kernel || width + 2 * padding < kernel {
        candle_core::bail!("conv2d: degenerate geometry for input {:?}", x.dims());
    }
    let g = Geometry {
        batch,
        in_ch,
        height,
        width,
        out_ch,
        kernel,
        stride,
        padding,
        out_h: (height + 2 * padding - kernel) / stride + 1,
        out_w: (width + 2 * padding - kernel) / stride + 1,
    };
    x.contiguous()?
        .apply_op2(&w.contiguous()?, Conv2dForward(g))
}
