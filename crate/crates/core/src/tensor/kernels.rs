//! Value-level forward and backward kernels.
//!
//! The graph calls these; they are also usable on plain tensors (the
//! inference and data paths resize images without building a graph).
//! Convolution parallelizes over channels with each task writing a disjoint
//! slice, so results do not depend on the thread schedule.

use rayon::prelude::*;

use super::Tensor;
use crate::error::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Nearest,
    Bilinear,
    AvgPool,
}

// ---------------------------------------------------------------------------
// broadcast plumbing
// ---------------------------------------------------------------------------

/// Checks that `b` right-aligns against `a` (each dim equal or 1) and returns
/// per-`a`-dim strides into `b` (0 where `b` repeats).
pub fn broadcast_strides(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, TensorError> {
    if b.len() > a.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let off = a.len() - b.len();
    let mut strides = vec![0usize; a.len()];
    let mut acc = 1usize;
    for d in (0..b.len()).rev() {
        if b[d] == a[off + d] {
            strides[off + d] = acc;
        } else if b[d] == 1 {
            strides[off + d] = 0;
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        acc *= b[d];
    }
    Ok(strides)
}

/// Calls `f(ai, bi)` for every element of `a` in row-major order.
pub fn for_each_pair(a_shape: &[usize], b_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = a_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = a_shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut coord = vec![0usize; rank];
    let mut bi = 0usize;
    for ai in 0..numel {
        f(ai, bi);
        // increment the mixed-radix counter and keep bi in sync
        for d in (0..rank).rev() {
            coord[d] += 1;
            bi += b_strides[d];
            if coord[d] < a_shape[d] {
                break;
            }
            bi -= b_strides[d] * a_shape[d];
            coord[d] = 0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

pub fn binary_forward(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if op == BinaryOp::Div && b.data().iter().any(|&v| v == 0.0) {
        return Err(TensorError::DivByZero);
    }
    let apply = |x: f32, y: f32| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
    };
    let mut out = vec![0f32; a.numel()];
    if a.shape() == b.shape() {
        for (o, (&x, &y)) in out.iter_mut().zip(a.data().iter().zip(b.data())) {
            *o = apply(x, y);
        }
    } else if b.numel() == 1 {
        let y = b.data()[0];
        for (o, &x) in out.iter_mut().zip(a.data()) {
            *o = apply(x, y);
        }
    } else {
        let strides = broadcast_strides(op.name(), a.shape(), b.shape())?;
        let (ad, bd) = (a.data(), b.data());
        for_each_pair(a.shape(), &strides, |ai, bi| {
            out[ai] = apply(ad[ai], bd[bi]);
        });
    }
    Tensor::new(a.shape(), out)
}

/// Accumulates an `a`-shaped gradient into a `b`-shaped buffer, summing over
/// broadcast dimensions.
pub fn reduce_grad_to_b(
    grad: &[f32],
    a_shape: &[usize],
    b_shape: &[usize],
    gb: &mut [f32],
    scale_from: impl Fn(usize, usize) -> f32,
) {
    let strides = broadcast_strides("reduce_grad", a_shape, b_shape).expect("validated in forward");
    for_each_pair(a_shape, &strides, |ai, bi| {
        gb[bi] += grad[ai] * scale_from(ai, bi);
    });
}

// ---------------------------------------------------------------------------
// unary maps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Abs,
    Tanh,
    Square,
    Sqrt,
    Exp,
    Ln,
    LeakyRelu(f32),
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Abs => "abs",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Square => "square",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Exp => "exp",
            UnaryOp::Ln => "ln",
            UnaryOp::LeakyRelu(_) => "leaky_relu",
        }
    }
}

pub fn unary_forward(op: UnaryOp, a: &Tensor) -> Result<Tensor, TensorError> {
    match op {
        UnaryOp::Sqrt => {
            if a.data().iter().any(|&v| v < 0.0) {
                return Err(TensorError::Invalid {
                    op: "sqrt",
                    msg: "negative input".into(),
                });
            }
        }
        UnaryOp::Ln => {
            if a.data().iter().any(|&v| v <= 0.0) {
                return Err(TensorError::Invalid {
                    op: "ln",
                    msg: "non-positive input".into(),
                });
            }
        }
        _ => {}
    }
    let data = a
        .data()
        .iter()
        .map(|&x| match op {
            UnaryOp::Abs => x.abs(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Square => x * x,
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Ln => x.ln(),
            UnaryOp::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
        })
        .collect();
    Tensor::new(a.shape(), data)
}

/// d out / d in for a unary op, given input and output values.
/// `abs` uses subgradient 0 at exactly 0; `leaky_relu` uses the slope there.
pub fn unary_derivative(op: UnaryOp, x: f32, y: f32) -> f32 {
    match op {
        UnaryOp::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryOp::Tanh => 1.0 - y * y,
        UnaryOp::Square => 2.0 * x,
        UnaryOp::Sqrt => 0.5 / y,
        UnaryOp::Exp => y,
        UnaryOp::Ln => 1.0 / x,
        UnaryOp::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
    }
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

impl ReduceOp {
    pub fn name(self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Max => "max",
        }
    }
}

pub struct ReducePlan {
    pub out_shape: Vec<usize>,
    /// Per input dimension: stride into the output (0 for reduced dims).
    pub out_strides: Vec<usize>,
    pub reduced_count: usize,
}

pub fn reduce_plan(
    op: ReduceOp,
    shape: &[usize],
    axes: Option<&[usize]>,
    keepdims: bool,
) -> Result<ReducePlan, TensorError> {
    let all: Vec<usize> = (0..shape.len()).collect();
    let mut ax: Vec<usize> = axes.map(|a| a.to_vec()).unwrap_or(all);
    ax.sort_unstable();
    ax.dedup();
    if ax.iter().any(|&d| d >= shape.len()) {
        return Err(TensorError::Invalid {
            op: op.name(),
            msg: format!("axis out of range for shape {:?}", shape),
        });
    }
    let mut reduced_count = 1usize;
    let mut out_shape = Vec::new();
    for (d, &s) in shape.iter().enumerate() {
        if ax.contains(&d) {
            reduced_count *= s;
            if keepdims {
                out_shape.push(1);
            }
        } else {
            out_shape.push(s);
        }
    }
    if reduced_count == 0 {
        return Err(TensorError::EmptyReduction { op: op.name() });
    }
    // out stride per input dim
    let mut out_strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    let mut od = out_shape.len();
    for d in (0..shape.len()).rev() {
        if ax.contains(&d) {
            if keepdims {
                od -= 1; // size-1 dim, stride irrelevant (coordinate always 0)
            }
        } else {
            od -= 1;
            out_strides[d] = acc;
            acc *= out_shape[od];
        }
    }
    Ok(ReducePlan {
        out_shape,
        out_strides,
        reduced_count,
    })
}

fn for_each_reduce(shape: &[usize], plan: &ReducePlan, mut f: impl FnMut(usize, usize)) {
    let numel: usize = shape.iter().product();
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let mut coord = vec![0usize; shape.len()];
    let mut oi = 0usize;
    for i in 0..numel {
        f(i, oi);
        for d in (0..shape.len()).rev() {
            coord[d] += 1;
            oi += plan.out_strides[d];
            if coord[d] < shape[d] {
                break;
            }
            oi -= plan.out_strides[d] * shape[d];
            coord[d] = 0;
        }
    }
}

pub fn reduce_forward(
    op: ReduceOp,
    a: &Tensor,
    axes: Option<&[usize]>,
    keepdims: bool,
) -> Result<Tensor, TensorError> {
    let plan = reduce_plan(op, a.shape(), axes, keepdims)?;
    let out_numel: usize = plan.out_shape.iter().product();
    let mut out = match op {
        ReduceOp::Max => vec![f32::NEG_INFINITY; out_numel],
        _ => vec![0f32; out_numel],
    };
    let data = a.data();
    for_each_reduce(a.shape(), &plan, |i, oi| match op {
        ReduceOp::Max => {
            if data[i] > out[oi] {
                out[oi] = data[i];
            }
        }
        _ => out[oi] += data[i],
    });
    if op == ReduceOp::Mean {
        let inv = 1.0 / plan.reduced_count as f32;
        for v in &mut out {
            *v *= inv;
        }
    }
    Tensor::new(&plan.out_shape, out)
}

/// Scatter the output gradient back over the input. For `max`, gradient goes
/// to the first element (row-major) attaining the maximum of its group.
pub fn reduce_backward(
    op: ReduceOp,
    input: &Tensor,
    output: &Tensor,
    grad_out: &[f32],
    axes: Option<&[usize]>,
    keepdims: bool,
    grad_in: &mut [f32],
) {
    let plan = reduce_plan(op, input.shape(), axes, keepdims).expect("validated in forward");
    match op {
        ReduceOp::Sum => {
            for_each_reduce(input.shape(), &plan, |i, oi| {
                grad_in[i] += grad_out[oi];
            });
        }
        ReduceOp::Mean => {
            let inv = 1.0 / plan.reduced_count as f32;
            for_each_reduce(input.shape(), &plan, |i, oi| {
                grad_in[i] += grad_out[oi] * inv;
            });
        }
        ReduceOp::Max => {
            let mut taken = vec![false; output.numel()];
            let (data, out) = (input.data(), output.data());
            for_each_reduce(input.shape(), &plan, |i, oi| {
                if !taken[oi] && data[i] == out[oi] {
                    taken[oi] = true;
                    grad_in[i] += grad_out[oi];
                }
            });
        }
    }
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

pub fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// dA = dC B^T, dB = A^T dC.
pub fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    grad_out: &[f32],
    grad_a: Option<&mut [f32]>,
    grad_b: Option<&mut [f32]>,
) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    if let Some(ga) = grad_a {
        for i in 0..m {
            let grow = &grad_out[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &bd[p * n..(p + 1) * n];
                let mut acc = 0f32;
                for (&g, &bv) in grow.iter().zip(brow) {
                    acc += g * bv;
                }
                ga[i * k + p] += acc;
            }
        }
    }
    if let Some(gb) = grad_b {
        for i in 0..m {
            let grow = &grad_out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let gbrow = &mut gb[p * n..(p + 1) * n];
                for (o, &g) in gbrow.iter_mut().zip(grow) {
                    *o += av * g;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

pub fn conv2d_out_dims(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize), TensorError> {
    if k % 2 == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: format!("kernel size {k} must be odd"),
        });
    }
    if stride == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: "stride must be positive".into(),
        });
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: "non-positive output dims".into(),
        });
    }
    Ok(((h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1))
}

pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    if input.shape().len() != 3 || kernel.shape().len() != 4 || input.shape()[0] != kernel.shape()[1]
        || kernel.shape()[2] != kernel.shape()[3]
    {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (kernel.shape()[0], kernel.shape()[2]);
    let (oh, ow) = conv2d_out_dims(h, w, k, stride, padding)?;
    let ind = input.data();
    let kd = kernel.data();

    let mut out = vec![0f32; co * oh * ow];
    // One accumulator row per output row keeps stores out of the inner loop;
    // channels parallelize over disjoint output planes.
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(oc, oplane)| {
        if stride == 1 {
            let mut acc = vec![0f32; ow];
            for oy in 0..oh {
                acc.iter_mut().for_each(|v| *v = 0.0);
                for ic in 0..ci {
                    let iplane = &ind[ic * h * w..(ic + 1) * h * w];
                    for ky in 0..k {
                        let iy = (oy + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                        let krow = &kd[((oc * ci + ic) * k + ky) * k..((oc * ci + ic) * k + ky) * k + k];
                        for (kx, &wgt) in krow.iter().enumerate() {
                            if wgt == 0.0 {
                                continue;
                            }
                            let ox0 = padding.saturating_sub(kx);
                            let ox1 = (w + padding - kx).min(ow);
                            let shift = ox0 + kx - padding;
                            for (a, &iv) in acc[ox0..ox1].iter_mut().zip(&irow[shift..shift + (ox1 - ox0)]) {
                                *a += wgt * iv;
                            }
                        }
                    }
                }
                oplane[oy * ow..(oy + 1) * ow].copy_from_slice(&acc);
            }
        } else {
            for ic in 0..ci {
                let iplane = &ind[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt = kd[((oc * ci + ic) * k + ky) * k + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                oplane[oy * ow + ox] += wgt * iplane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(&[co, oh, ow], out)
}

pub fn conv2d_backward_input(
    input_shape: &[usize],
    kernel: &Tensor,
    grad_out: &[f32],
    stride: usize,
    padding: usize,
    grad_in: &mut [f32],
) {
    let (ci, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (co, k) = (kernel.shape()[0], kernel.shape()[2]);
    let (oh, ow) = conv2d_out_dims(h, w, k, stride, padding).expect("validated in forward");
    let kd = kernel.data();
    grad_in.par_chunks_mut(h * w).enumerate().for_each(|(ic, gplane)| {
        if stride == 1 {
            // din[iy][ix] += w[ky][kx] * gout[iy - ky + p][ix - kx + p]
            let mut acc = vec![0f32; w];
            for iy in 0..h {
                acc.iter_mut().for_each(|v| *v = 0.0);
                for oc in 0..co {
                    let goplane = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
                    for ky in 0..k {
                        let oy = (iy + padding) as isize - ky as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let grow = &goplane[oy as usize * ow..(oy as usize + 1) * ow];
                        let kbase = ((oc * ci + ic) * k + ky) * k;
                        for kx in 0..k {
                            let wgt = kd[kbase + kx];
                            if wgt == 0.0 {
                                continue;
                            }
                            // valid ix range: 0 <= ix - kx + p < ow
                            let ix0 = kx.saturating_sub(padding);
                            let ix1 = (ow + kx).saturating_sub(padding).min(w);
                            if ix0 >= ix1 {
                                continue;
                            }
                            let shift = ix0 + padding - kx;
                            for (a, &g) in acc[ix0..ix1]
                                .iter_mut()
                                .zip(&grow[shift..shift + (ix1 - ix0)])
                            {
                                *a += wgt * g;
                            }
                        }
                    }
                }
                for (o, &a) in gplane[iy * w..(iy + 1) * w].iter_mut().zip(&acc) {
                    *o += a;
                }
            }
        } else {
            for oc in 0..co {
                let goplane = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt = kd[((oc * ci + ic) * k + ky) * k + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gplane[iy as usize * w + ix as usize] +=
                                    wgt * goplane[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn conv2d_backward_kernel(
    input: &Tensor,
    kernel_shape: &[usize],
    grad_out: &[f32],
    stride: usize,
    padding: usize,
    grad_k: &mut [f32],
) {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let k = kernel_shape[2];
    let (oh, ow) = conv2d_out_dims(h, w, k, stride, padding).expect("validated in forward");
    let ind = input.data();
    grad_k
        .par_chunks_mut(ci * k * k)
        .enumerate()
        .for_each(|(oc, gkslice)| {
            let goplane = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..ci {
                let iplane = &ind[ic * h * w..(ic + 1) * h * w];
                if stride == 1 {
                    // One pass per (oc, ic): each output row feeds all k*k tap
                    // accumulators, so the rows are read once, not k^2 times.
                    let mut acc = vec![0f32; k * k];
                    for oy in 0..oh {
                        for (ky, acc_row) in acc.chunks_mut(k).enumerate() {
                            let iy = (oy + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                            let grow = &goplane[oy * ow..(oy + 1) * ow];
                            for (kx, a) in acc_row.iter_mut().enumerate() {
                                let ox0 = padding.saturating_sub(kx);
                                let ox1 = (w + padding - kx).min(ow);
                                if ox0 >= ox1 {
                                    continue;
                                }
                                let shift = ox0 + kx - padding;
                                let mut s = 0f32;
                                for (&g, &iv) in grow[ox0..ox1]
                                    .iter()
                                    .zip(&irow[shift..shift + (ox1 - ox0)])
                                {
                                    s += g * iv;
                                }
                                *a += s;
                            }
                        }
                    }
                    for (g, a) in gkslice[ic * k * k..(ic + 1) * k * k].iter_mut().zip(&acc) {
                        *g += a;
                    }
                } else {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0f32;
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += goplane[oy * ow + ox]
                                        * iplane[iy as usize * w + ix as usize];
                                }
                            }
                            gkslice[(ic * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

fn check_chw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize), TensorError> {
    if t.shape().len() != 3 {
        return Err(TensorError::Invalid {
            op,
            msg: format!("expected [c,h,w], got {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

pub fn resample_forward(
    input: &Tensor,
    th: usize,
    tw: usize,
    mode: ResampleMode,
) -> Result<Tensor, TensorError> {
    let (c, h, w) = check_chw("resample", input)?;
    if th == 0 || tw == 0 {
        return Err(TensorError::Invalid {
            op: "resample",
            msg: "target dims must be at least 1".into(),
        });
    }
    let ind = input.data();
    let mut out = vec![0f32; c * th * tw];
    match mode {
        ResampleMode::AvgPool => {
            if h % th != 0 || w % tw != 0 {
                return Err(TensorError::Invalid {
                    op: "resample",
                    msg: format!("avg-pool target {th}x{tw} must divide input {h}x{w}"),
                });
            }
            let (fh, fw) = (h / th, w / tw);
            let inv = 1.0 / (fh * fw) as f32;
            for ch in 0..c {
                for oy in 0..th {
                    for ox in 0..tw {
                        let mut acc = 0f32;
                        for dy in 0..fh {
                            for dx in 0..fw {
                                acc += ind[(ch * h + oy * fh + dy) * w + ox * fw + dx];
                            }
                        }
                        out[(ch * th + oy) * tw + ox] = acc * inv;
                    }
                }
            }
        }
        ResampleMode::Bilinear => {
            for ch in 0..c {
                for oy in 0..th {
                    for ox in 0..tw {
                        let (y0, x0, y1, x1, wy, wx) = bilinear_coords(h, w, th, tw, oy, ox);
                        let v00 = ind[(ch * h + y0) * w + x0];
                        let v01 = ind[(ch * h + y0) * w + x1];
                        let v10 = ind[(ch * h + y1) * w + x0];
                        let v11 = ind[(ch * h + y1) * w + x1];
                        out[(ch * th + oy) * tw + ox] = v00 * (1.0 - wy) * (1.0 - wx)
                            + v01 * (1.0 - wy) * wx
                            + v10 * wy * (1.0 - wx)
                            + v11 * wy * wx;
                    }
                }
            }
        }
        ResampleMode::Nearest => {
            for ch in 0..c {
                for oy in 0..th {
                    for ox in 0..tw {
                        let sy = nearest_coord(h, th, oy);
                        let sx = nearest_coord(w, tw, ox);
                        out[(ch * th + oy) * tw + ox] = ind[(ch * h + sy) * w + sx];
                    }
                }
            }
        }
    }
    Tensor::new(&[c, th, tw], out)
}

fn bilinear_coords(
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
    oy: usize,
    ox: usize,
) -> (usize, usize, usize, usize, f32, f32) {
    let fy = ((oy as f32 + 0.5) * h as f32 / th as f32 - 0.5).clamp(0.0, (h - 1) as f32);
    let fx = ((ox as f32 + 0.5) * w as f32 / tw as f32 - 0.5).clamp(0.0, (w - 1) as f32);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    (y0, x0, y1, x1, fy - y0 as f32, fx - x0 as f32)
}

fn nearest_coord(n: usize, tn: usize, o: usize) -> usize {
    ((((o as f32 + 0.5) * n as f32 / tn as f32).floor()) as usize).min(n - 1)
}

pub fn resample_backward(
    input_shape: &[usize],
    grad_out: &[f32],
    th: usize,
    tw: usize,
    mode: ResampleMode,
    grad_in: &mut [f32],
) {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    match mode {
        ResampleMode::AvgPool => {
            let (fh, fw) = (h / th, w / tw);
            let inv = 1.0 / (fh * fw) as f32;
            for ch in 0..c {
                for oy in 0..th {
                    for ox in 0..tw {
                        let g = grad_out[(ch * th + oy) * tw + ox] * inv;
                        for dy in 0..fh {
                            for dx in 0..fw {
                                grad_in[(ch * h + oy * fh + dy) * w + ox * fw + dx] += g;
                            }
                        }
                    }
                }
            }
        }
        ResampleMode::Bilinear => {
            for ch in 0..c {
                for oy in 0..th {
                    for ox in 0..tw {
                        let g = grad_out[(ch * th + oy) * tw + ox];
                        let (y0, x0, y1, x1, wy, wx) = bilinear_coords(h, w, th, tw, oy, ox);
                        grad_in[(ch * h + y0) * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                        grad_in[(ch * h + y0) * w + x1] += g * (1.0 - wy) * wx;
                        grad_in[(ch * h + y1) * w + x0] += g * wy * (1.0 - wx);
                        grad_in[(ch * h + y1) * w + x1] += g * wy * wx;
                    }
                }
            }
        }
        ResampleMode::Nearest => unreachable!("nearest resampling is not differentiable"),
    }
}

// ---------------------------------------------------------------------------
// forward differences and concatenation
// ---------------------------------------------------------------------------

pub fn diff_forward(a: &Tensor, along_x: bool) -> Result<Tensor, TensorError> {
    let op = if along_x { "diff_x" } else { "diff_y" };
    let (c, h, w) = check_chw(op, a)?;
    let (need, oh, ow) = if along_x {
        (w, h, w.saturating_sub(1))
    } else {
        (h, h.saturating_sub(1), w)
    };
    if need < 2 {
        return Err(TensorError::Invalid {
            op,
            msg: "dimension too small for a forward difference".into(),
        });
    }
    let ind = a.data();
    let mut out = vec![0f32; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = if along_x {
                    ind[(ch * h + y) * w + x + 1] - ind[(ch * h + y) * w + x]
                } else {
                    ind[(ch * h + y + 1) * w + x] - ind[(ch * h + y) * w + x]
                };
                out[(ch * oh + y) * ow + x] = base;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub fn diff_backward(
    input_shape: &[usize],
    grad_out: &[f32],
    along_x: bool,
    grad_in: &mut [f32],
) {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = if along_x { (h, w - 1) } else { (h - 1, w) };
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let g = grad_out[(ch * oh + y) * ow + x];
                if along_x {
                    grad_in[(ch * h + y) * w + x] -= g;
                    grad_in[(ch * h + y) * w + x + 1] += g;
                } else {
                    grad_in[(ch * h + y) * w + x] -= g;
                    grad_in[(ch * h + y + 1) * w + x] += g;
                }
            }
        }
    }
}

pub fn concat0_forward(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    if parts.is_empty() {
        return Err(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        });
    }
    let tail = &parts[0].shape()[1..];
    for p in parts {
        if p.shape().is_empty() || &p.shape()[1..] != tail {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let lead: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&shape, data)
}
