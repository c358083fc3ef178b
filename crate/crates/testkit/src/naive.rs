//! Naive f64 reference implementations of every tensor operation.
//!
//! Written as direct loops with no shared code or cleverness. Broadcast rules
//! mirror the production contract: only the right-hand operand broadcasts,
//! with shapes aligned at the trailing dimension.

/// Minimal f64 array: shape plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Arr {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Arr {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Arr {
        Arr::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Arr {
        Arr::new(&[], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

fn coords(mut idx: usize, shape: &[usize]) -> Vec<usize> {
    let mut c = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        c[d] = idx % shape[d];
        idx /= shape[d];
    }
    c
}

/// Index into `b` (right-aligned, size-1 dims repeat) for position `ac` of `a`.
fn broadcast_index(ac: &[usize], b_shape: &[usize]) -> usize {
    let off = ac.len() - b_shape.len();
    let mut idx = 0;
    for (d, &bs) in b_shape.iter().enumerate() {
        let c = if bs == 1 { 0 } else { ac[off + d] };
        idx = idx * bs + c;
    }
    idx
}

pub fn binary(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    if b.numel() == 1 {
        let bv = b.data[0];
        return Arr::new(&a.shape, a.data.iter().map(|&x| f(x, bv)).collect());
    }
    assert!(b.shape.len() <= a.shape.len(), "rhs rank exceeds lhs rank");
    let mut out = Arr::zeros(&a.shape);
    for i in 0..a.numel() {
        let ac = coords(i, &a.shape);
        out.data[i] = f(a.data[i], b.data[broadcast_index(&ac, &b.shape)]);
    }
    out
}

pub fn add(a: &Arr, b: &Arr) -> Arr {
    binary(a, b, |x, y| x + y)
}
pub fn sub(a: &Arr, b: &Arr) -> Arr {
    binary(a, b, |x, y| x - y)
}
pub fn mul(a: &Arr, b: &Arr) -> Arr {
    binary(a, b, |x, y| x * y)
}
pub fn div(a: &Arr, b: &Arr) -> Arr {
    binary(a, b, |x, y| x / y)
}

pub fn map(a: &Arr, f: impl Fn(f64) -> f64) -> Arr {
    Arr::new(&a.shape, a.data.iter().map(|&x| f(x)).collect())
}

pub fn abs(a: &Arr) -> Arr {
    map(a, f64::abs)
}
pub fn tanh(a: &Arr) -> Arr {
    map(a, f64::tanh)
}
pub fn square(a: &Arr) -> Arr {
    map(a, |x| x * x)
}
pub fn sqrt(a: &Arr) -> Arr {
    map(a, f64::sqrt)
}
pub fn exp(a: &Arr) -> Arr {
    map(a, f64::exp)
}
pub fn ln(a: &Arr) -> Arr {
    map(a, f64::ln)
}
pub fn leaky_relu(a: &Arr, slope: f64) -> Arr {
    map(a, |x| if x > 0.0 { x } else { slope * x })
}
pub fn add_scalar(a: &Arr, s: f64) -> Arr {
    map(a, |x| x + s)
}
pub fn mul_scalar(a: &Arr, s: f64) -> Arr {
    map(a, |x| x * s)
}

/// Sum over the given axes (all axes when `axes` is `None`).
pub fn sum(a: &Arr, axes: Option<&[usize]>, keepdims: bool) -> Arr {
    let all: Vec<usize> = (0..a.shape.len()).collect();
    let axes: Vec<usize> = axes.map(|s| s.to_vec()).unwrap_or(all);
    let mut out_shape: Vec<usize> = Vec::new();
    for (d, &s) in a.shape.iter().enumerate() {
        if axes.contains(&d) {
            if keepdims {
                out_shape.push(1);
            }
        } else {
            out_shape.push(s);
        }
    }
    let mut out = Arr::zeros(&out_shape);
    for i in 0..a.numel() {
        let ac = coords(i, &a.shape);
        let mut oi = 0;
        for (d, &s) in a.shape.iter().enumerate() {
            if axes.contains(&d) {
                if keepdims {
                    oi *= 1; // reduced dim contributes coordinate 0 of size 1
                }
            } else {
                oi = oi * s + ac[d];
            }
        }
        out.data[oi] += a.data[i];
    }
    out
}

pub fn mean(a: &Arr, axes: Option<&[usize]>, keepdims: bool) -> Arr {
    let s = sum(a, axes, keepdims);
    let count = a.numel() / s.numel().max(1);
    mul_scalar(&s, 1.0 / count as f64)
}

pub fn matmul(a: &Arr, b: &Arr) -> Arr {
    assert_eq!(a.shape.len(), 2);
    assert_eq!(b.shape.len(), 2);
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2);
    let mut out = Arr::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data[i * k + p] * b.data[p * n + j];
            }
            out.data[i * n + j] = acc;
        }
    }
    out
}

/// Direct six-loop convolution: input [c_in, h, w], kernel [c_out, c_in, k, k].
pub fn conv2d(input: &Arr, kernel: &Arr, stride: usize, padding: usize) -> Arr {
    let (ci, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (co, ci2, k, k2) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    assert_eq!(ci, ci2);
    assert_eq!(k, k2);
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = Arr::zeros(&[co, oh, ow]);
    for oc in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ic in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                acc += input.data[(ic * h + iy as usize) * w + ix as usize]
                                    * kernel.data[((oc * ci + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out.data[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Average pooling to a target size that divides the input exactly.
pub fn avg_pool(input: &Arr, th: usize, tw: usize) -> Arr {
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    assert_eq!(h % th, 0);
    assert_eq!(w % tw, 0);
    let (fh, fw) = (h / th, w / tw);
    let mut out = Arr::zeros(&[c, th, tw]);
    for ch in 0..c {
        for oy in 0..th {
            for ox in 0..tw {
                let mut acc = 0.0;
                for dy in 0..fh {
                    for dx in 0..fw {
                        acc += input.data[(ch * h + oy * fh + dy) * w + ox * fw + dx];
                    }
                }
                out.data[(ch * th + oy) * tw + ox] = acc / (fh * fw) as f64;
            }
        }
    }
    out
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear(input: &Arr, th: usize, tw: usize) -> Arr {
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let mut out = Arr::zeros(&[c, th, tw]);
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    for ch in 0..c {
        for oy in 0..th {
            for ox in 0..tw {
                let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let y0 = fy.floor() as usize;
                let x0 = fx.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let wy = fy - y0 as f64;
                let wx = fx - x0 as f64;
                let v00 = input.data[(ch * h + y0) * w + x0];
                let v01 = input.data[(ch * h + y0) * w + x1];
                let v10 = input.data[(ch * h + y1) * w + x0];
                let v11 = input.data[(ch * h + y1) * w + x1];
                out.data[(ch * th + oy) * tw + ox] = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
            }
        }
    }
    out
}

/// Nearest-neighbor resize with half-pixel centers.
pub fn nearest(input: &Arr, th: usize, tw: usize) -> Arr {
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let mut out = Arr::zeros(&[c, th, tw]);
    for ch in 0..c {
        for oy in 0..th {
            for ox in 0..tw {
                let sy = (((oy as f64 + 0.5) * h as f64 / th as f64).floor() as usize).min(h - 1);
                let sx = (((ox as f64 + 0.5) * w as f64 / tw as f64).floor() as usize).min(w - 1);
                out.data[(ch * th + oy) * tw + ox] = input.data[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Forward difference along x: [c, h, w] -> [c, h, w-1].
pub fn diff_x(a: &Arr) -> Arr {
    let (c, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
    let mut out = Arr::zeros(&[c, h, w - 1]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w - 1 {
                out.data[(ch * h + y) * (w - 1) + x] =
                    a.data[(ch * h + y) * w + x + 1] - a.data[(ch * h + y) * w + x];
            }
        }
    }
    out
}

/// Forward difference along y: [c, h, w] -> [c, h-1, w].
pub fn diff_y(a: &Arr) -> Arr {
    let (c, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
    let mut out = Arr::zeros(&[c, h - 1, w]);
    for ch in 0..c {
        for y in 0..h - 1 {
            for x in 0..w {
                out.data[(ch * (h - 1) + y) * w + x] =
                    a.data[(ch * h + y + 1) * w + x] - a.data[(ch * h + y) * w + x];
            }
        }
    }
    out
}

/// Concatenate along axis 0; all trailing dims must match.
pub fn concat0(parts: &[&Arr]) -> Arr {
    let tail = &parts[0].shape[1..];
    let total: usize = parts.iter().map(|p| p.shape[0]).sum();
    let mut shape = vec![total];
    shape.extend_from_slice(tail);
    let mut data = Vec::new();
    for p in parts {
        assert_eq!(&p.shape[1..], tail);
        data.extend_from_slice(&p.data);
    }
    Arr::new(&shape, data)
}

/// Weighted sum of all elements; the standard scalar probe for gradient
/// checks (random weights exercise the whole Jacobian).
pub fn probe(a: &Arr, weights: &[f64]) -> f64 {
    assert_eq!(a.numel(), weights.len());
    a.data.iter().zip(weights).map(|(x, w)| x * w).sum()
}
