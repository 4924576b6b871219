//! Dense real arrays and the convolution kernels of the recurrent cell.

use std::fmt;

/// Row-major real array. Feature maps are `[channels, height, width]`,
/// convolution weights `[out, in, k, k]`, biases `[out]`, scalars `[]`.
#[derive(Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array{:?}", self.shape)
    }
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a feature map.
    pub fn chw(&self) -> (usize, usize, usize) {
        match self.shape[..] {
            [c, h, w] => (c, h, w),
            _ => panic!("expected a feature map, got shape {:?}", self.shape),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel-wise concatenation of two feature maps.
    pub fn concat(a: &Self, b: &Self) -> Self {
        let (ca, h, w) = a.chw();
        let (cb, hb, wb) = b.chw();
        assert_eq!((h, w), (hb, wb));
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Self::new(vec![ca + cb, h, w], data)
    }

    pub fn channels(&self, start: usize, len: usize) -> Self {
        let (_, h, w) = self.chw();
        Self::new(vec![len, h, w], self.data[start * h * w..(start + len) * h * w].to_vec())
    }
}

/// Fills `cols` with the `[c·k·k, h·w]` patch matrix of a same-padded
/// `k×k` convolution.
fn im2col_into(input: &Array, k: usize, cols: &mut [f64]) {
    let (c, h, w) = input.chw();
    let pad = k / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &input.data[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * hw;
                let dst = &mut cols[row..row + hw];
                let off = kj as isize - pad as isize;
                let (j0, j1) = ((-off).clamp(0, w as isize) as usize, (w as isize - off).clamp(0, w as isize) as usize);
                let j1 = j1.max(j0);
                for i in 0..h {
                    let d = &mut dst[i * w..(i + 1) * w];
                    let si = i as isize + ki as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    d[..j0].fill(0.0);
                    d[j1..].fill(0.0);
                    if j1 > j0 {
                        let s0 = (j0 as isize + off) as usize;
                        d[j0..j1].copy_from_slice(&src[s0..s0 + (j1 - j0)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`].
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Array {
    let pad = k / 2;
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * hw;
                let src = &cols[row..row + hw];
                let off = kj as isize - pad as isize;
                let (j0, j1) = ((-off).clamp(0, w as isize) as usize, (w as isize - off).clamp(0, w as isize) as usize);
                if j1 <= j0 {
                    continue;
                }
                let s0 = (j0 as isize + off) as usize;
                for i in 0..h {
                    let si = i as isize + ki as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[si as usize * w + s0..si as usize * w + s0 + (j1 - j0)];
                    for (d, v) in dst.iter_mut().zip(&src[i * w + j0..i * w + j1]) {
                        *d += v;
                    }
                }
            }
        }
    }
    Array::new(vec![c, h, w], out)
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// Runs `f` on two reusable buffers of at least `a` and `b` entries.
fn with_scratch<R>(a: usize, b: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (x, y) = &mut *guard;
        if x.len() < a {
            x.resize(a, 0.0);
        }
        if y.len() < b {
            y.resize(b, 0.0);
        }
        f(&mut x[..a], &mut y[..b])
    })
}

/// `c[m×n] = a·b + beta·c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same-padded convolution (cross-correlation) with bias.
pub fn conv2d(input: &Array, weight: &Array, bias: &Array) -> Array {
    let (cin, h, w) = input.chw();
    let (cout, k) = (weight.shape[0], weight.shape[2]);
    assert_eq!(weight.shape, vec![cout, cin, k, k], "conv weight shape");
    assert_eq!(bias.shape, vec![cout]);
    let hw = h * w;
    let kk = cin * k * k;
    let mut out = vec![0.0; cout * hw];
    with_scratch(kk * hw, hw * cout, |cols, out_t| {
        im2col_into(input, k, cols);
        // outᵀ = colsᵀ · Wᵀ, the faster orientation for a short output side.
        gemm(hw, kk, cout, cols, (1, hw as isize), &weight.data, (1, kk as isize), 0.0, out_t);
        for (o, (plane, b)) in out.chunks_mut(hw).zip(&bias.data).enumerate() {
            for (p, v) in plane.iter_mut().enumerate() {
                *v = out_t[p * cout + o] + b;
            }
        }
    });
    Array::new(vec![cout, h, w], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(input: &Array, weight: &Array, grad_out: &Array) -> (Array, Array, Array) {
    let (cin, h, w) = input.chw();
    let (cout, k) = (weight.shape[0], weight.shape[2]);
    let hw = h * w;
    let kk = cin * k * k;
    let gb: Vec<f64> = grad_out.data.chunks(hw).map(|c| c.iter().sum()).collect();
    let mut gw = vec![0.0; cout * kk];
    let gin = with_scratch(kk * hw, kk * hw, |cols, gcols| {
        im2col_into(input, k, cols);
        // gW = gout · colsᵀ
        gemm(cout, hw, kk, &grad_out.data, (hw as isize, 1), cols, (1, hw as isize), 0.0, &mut gw);
        // gcols = Wᵀ · gout
        gemm(kk, cout, hw, &weight.data, (1, kk as isize), &grad_out.data, (hw as isize, 1), 0.0, gcols);
        col2im(gcols, cin, h, w, k)
    });
    (gin, Array::new(weight.shape.clone(), gw), Array::new(vec![cout], gb))
}
