//! Layer primitives with explicit forward and backward passes.
//!
//! Feature maps are `C × N` buffers (channel-major, each channel an x-fastest
//! volume of `N = nx·ny·nz` voxels).

use super::scalar::Scalar;
use super::NetError;
use crate::volgrid::Dims;

/// 3D convolution with odd cubic kernel `k`, stride 1 and zero padding `k / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// `[cout][cin][kz][ky][kx]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv<T> {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            cin,
            cout,
            k,
            weight: vec![T::zero(); cout * cin * k * k * k],
            bias: vec![T::zero(); cout],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    pub fn forward(&self, input: &[T], dims: Dims) -> Result<Vec<T>, NetError> {
        conv3d(input, dims, self)
    }
}

/// Fully connected layer, `weight` is `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inp: usize,
    pub out: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            inp,
            out,
            weight: vec![T::zero(); inp * out],
            bias: vec![T::zero(); out],
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        (0..self.out)
            .map(|o| {
                let row = &self.weight[o * self.inp..(o + 1) * self.inp];
                row.iter()
                    .zip(x)
                    .fold(self.bias[o], |acc, (&w, &v)| acc + w * v)
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[T], dy: &[T], grad: &mut Dense<T>) -> Vec<T> {
        let mut dx = vec![T::zero(); self.inp];
        for o in 0..self.out {
            let g = dy[o];
            grad.bias[o] = grad.bias[o] + g;
            let row = &self.weight[o * self.inp..(o + 1) * self.inp];
            let grow = &mut grad.weight[o * self.inp..(o + 1) * self.inp];
            for i in 0..self.inp {
                grow[i] = grow[i] + g * x[i];
                dx[i] = dx[i] + row[i] * g;
            }
        }
        dx
    }
}

fn voxels(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Unfolds `input` (`cin × N`) into a `(cin·k³) × N` patch matrix.
fn im2col<T: Scalar>(input: &[T], dims: Dims, cin: usize, k: usize) -> Vec<T> {
    let n = voxels(dims);
    let [nx, ny, nz] = dims;
    let pad = (k / 2) as isize;
    let kk = k * k * k;
    let mut cols = vec![T::zero(); cin * kk * n];
    for ci in 0..cin {
        let src = &input[ci * n..(ci + 1) * n];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ci * kk + (kz * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let (dx, dy, dz) = (kx as isize - pad, ky as isize - pad, kz as isize - pad);
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (nx as isize - dx).min(nx as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for z in 0..nz {
                        let sz = z as isize + dz;
                        if sz < 0 || sz >= nz as isize {
                            continue;
                        }
                        for y in 0..ny {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let o = nx * (y + ny * z);
                            let s =
                                (nx as isize * (sy + ny as isize * sz) + x0 as isize + dx) as usize;
                            dst[o + x0..o + x1].copy_from_slice(&src[s..s + x1 - x0]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a patch-matrix gradient back onto a `cin × N` buffer (adjoint of [`im2col`]).
fn col2im<T: Scalar>(cols: &[T], dims: Dims, cin: usize, k: usize) -> Vec<T> {
    let n = voxels(dims);
    let [nx, ny, nz] = dims;
    let pad = (k / 2) as isize;
    let kk = k * k * k;
    let mut out = vec![T::zero(); cin * n];
    for ci in 0..cin {
        let dst = &mut out[ci * n..(ci + 1) * n];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ci * kk + (kz * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    let (dx, dy, dz) = (kx as isize - pad, ky as isize - pad, kz as isize - pad);
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (nx as isize - dx).min(nx as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for z in 0..nz {
                        let sz = z as isize + dz;
                        if sz < 0 || sz >= nz as isize {
                            continue;
                        }
                        for y in 0..ny {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let o = nx * (y + ny * z);
                            let s =
                                (nx as isize * (sy + ny as isize * sz) + x0 as isize + dx) as usize;
                            for (d, &g) in dst[s..s + x1 - x0].iter_mut().zip(&src[o + x0..o + x1])
                            {
                                *d = *d + g;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation `out[co] = bias[co] + Σ_ci w[co,ci] ⋆ input[ci]`,
/// output spatial dims equal to the input's.
pub fn conv3d<T: Scalar>(input: &[T], dims: Dims, conv: &Conv<T>) -> Result<Vec<T>, NetError> {
    if conv.k % 2 == 0
        || conv.weight.len() != conv.cout * conv.fan_in()
        || conv.bias.len() != conv.cout
    {
        return Err(NetError::Shape(
            "inconsistent convolution parameters".into(),
        ));
    }
    if dims.iter().any(|&d| d == 0) || input.len() != conv.cin * voxels(dims) {
        return Err(NetError::Shape(format!(
            "conv input of length {} does not match {} channels of {dims:?}",
            input.len(),
            conv.cin
        )));
    }
    let n = voxels(dims);
    let kdim = conv.fan_in();
    let mut out = vec![T::zero(); conv.cout * n];
    for co in 0..conv.cout {
        out[co * n..(co + 1) * n].fill(conv.bias[co]);
    }
    let cols;
    let b: &[T] = if conv.k == 1 {
        input
    } else {
        cols = im2col(input, dims, conv.cin, conv.k);
        &cols
    };
    T::gemm(
        conv.cout,
        kdim,
        n,
        T::one(),
        &conv.weight,
        kdim as isize,
        1,
        b,
        n as isize,
        1,
        T::one(),
        &mut out,
        n as isize,
        1,
    );
    Ok(out)
}

/// Accumulates weight/bias gradients into `grad` and returns `dL/dinput`.
pub fn conv3d_backward<T: Scalar>(
    input: &[T],
    dims: Dims,
    conv: &Conv<T>,
    dout: &[T],
    grad: &mut Conv<T>,
    need_input_grad: bool,
) -> Option<Vec<T>> {
    let n = voxels(dims);
    let kdim = conv.fan_in();
    for co in 0..conv.cout {
        let s: T = dout[co * n..(co + 1) * n].iter().copied().sum();
        grad.bias[co] = grad.bias[co] + s;
    }
    let cols;
    let b: &[T] = if conv.k == 1 {
        input
    } else {
        cols = im2col(input, dims, conv.cin, conv.k);
        &cols
    };
    // dW (cout × kdim) += dout (cout × n) · colsᵀ (n × kdim)
    T::gemm(
        conv.cout,
        n,
        kdim,
        T::one(),
        dout,
        n as isize,
        1,
        b,
        1,
        n as isize,
        T::one(),
        &mut grad.weight,
        kdim as isize,
        1,
    );
    if !need_input_grad {
        return None;
    }
    // dcols (kdim × n) = Wᵀ (kdim × cout) · dout (cout × n)
    let mut dcols = vec![T::zero(); kdim * n];
    T::gemm(
        kdim,
        conv.cout,
        n,
        T::one(),
        &conv.weight,
        1,
        kdim as isize,
        dout,
        n as isize,
        1,
        T::zero(),
        &mut dcols,
        n as isize,
        1,
    );
    Some(if conv.k == 1 {
        dcols
    } else {
        col2im(&dcols, dims, conv.cin, conv.k)
    })
}

/// Per-channel global maximum with the position of its first occurrence.
pub fn adaptive_max_pool_global<T: Scalar>(
    features: &[T],
    channels: usize,
) -> (Vec<T>, Vec<usize>) {
    let n = features.len() / channels;
    let mut maxima = Vec::with_capacity(channels);
    let mut argmax = Vec::with_capacity(channels);
    for c in 0..channels {
        let ch = &features[c * n..(c + 1) * n];
        let mut best = 0;
        for (i, &v) in ch.iter().enumerate().skip(1) {
            if v > ch[best] {
                best = i;
            }
        }
        maxima.push(ch[best]);
        argmax.push(best);
    }
    (maxima, argmax)
}

/// Routes each channel's pooled gradient to its recorded argmax.
pub fn adaptive_max_pool_backward<T: Scalar>(
    dpooled: &[T],
    argmax: &[usize],
    n: usize,
    dfeatures: &mut [T],
) {
    for (c, (&g, &i)) in dpooled.iter().zip(argmax).enumerate() {
        dfeatures[c * n + i] = dfeatures[c * n + i] + g;
    }
}

/// Scale-and-shift conditioning `pooled[c] * scale[c] + shift[c]`.
pub fn modulate<T: Scalar>(pooled: &[T], scale: &[T], shift: &[T]) -> Result<Vec<T>, NetError> {
    if pooled.len() != scale.len() || pooled.len() != shift.len() {
        return Err(NetError::Shape(format!(
            "modulation lengths differ: pooled {}, scale {}, shift {}",
            pooled.len(),
            scale.len(),
            shift.len()
        )));
    }
    Ok(pooled
        .iter()
        .zip(scale.iter().zip(shift))
        .map(|(&p, (&s, &b))| p * s + b)
        .collect())
}

/// Gradients of [`modulate`] with respect to `(pooled, scale, shift)`.
pub fn modulate_backward<T: Scalar>(
    pooled: &[T],
    scale: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dp = dout.iter().zip(scale).map(|(&g, &s)| g * s).collect();
    let ds = dout.iter().zip(pooled).map(|(&g, &p)| g * p).collect();
    (dp, ds, dout.to_vec())
}

pub fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect()
}

/// `dy` masked by `pre > 0`.
pub fn relu_backward<T: Scalar>(pre: &[T], dy: &[T]) -> Vec<T> {
    pre.iter()
        .zip(dy)
        .map(|(&p, &g)| if p > T::zero() { g } else { T::zero() })
        .collect()
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng;
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    fn rand_conv(cin: usize, cout: usize, k: usize, seed: u64) -> Conv<f64> {
        let mut c = Conv::zeros(cin, cout, k);
        c.weight = rand_vec(c.weight.len(), seed);
        c.bias = rand_vec(cout, seed + 1);
        c
    }

    /// Direct seven-loop cross-correlation with zero padding.
    fn conv_oracle(input: &[f64], dims: Dims, c: &Conv<f64>) -> Vec<f64> {
        let [nx, ny, nz] = dims;
        let n = nx * ny * nz;
        let pad = (c.k / 2) as isize;
        let mut out = vec![0.0; c.cout * n];
        for co in 0..c.cout {
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let mut acc = c.bias[co];
                        for ci in 0..c.cin {
                            for kz in 0..c.k {
                                for ky in 0..c.k {
                                    for kx in 0..c.k {
                                        let sx = x as isize + kx as isize - pad;
                                        let sy = y as isize + ky as isize - pad;
                                        let sz = z as isize + kz as isize - pad;
                                        if sx < 0
                                            || sy < 0
                                            || sz < 0
                                            || sx >= nx as isize
                                            || sy >= ny as isize
                                            || sz >= nz as isize
                                        {
                                            continue;
                                        }
                                        let w = c.weight[(((co * c.cin + ci) * c.k + kz) * c.k
                                            + ky)
                                            * c.k
                                            + kx];
                                        acc += w * input[ci * n
                                            + sx as usize
                                            + nx * (sy as usize + ny * sz as usize)];
                                    }
                                }
                            }
                        }
                        out[co * n + x + nx * (y + ny * z)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_kernel_scales() {
        let mut c = Conv::<f32>::zeros(1, 1, 1);
        c.weight[0] = 2.0;
        let x: Vec<f32> = (0..27).map(|i| i as f32 - 4.0).collect();
        let y = conv3d(&x, [3, 3, 3], &c).unwrap();
        assert!(y.iter().zip(&x).all(|(a, b)| *a == 2.0 * b));
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let mut c = Conv::<f32>::zeros(1, 1, 3);
        c.weight.fill(1.0);
        let y = conv3d(&[1.0; 125], [5, 5, 5], &c).unwrap();
        assert_eq!(y[0], 8.0);
        assert_eq!(y[2 + 5 * (2 + 5 * 2)], 27.0);
        assert_eq!(y[2 + 5 * (0 + 5 * 2)], 18.0);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let dims = [5, 4, 3];
        let c = rand_conv(3, 2, 3, 10);
        let x = rand_vec(3 * 60, 3);
        let got = conv3d(&x, dims, &c).unwrap();
        let want = conv_oracle(&x, dims, &c);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
        let c32 = Conv::<f32> {
            cin: 3,
            cout: 2,
            k: 3,
            weight: c.weight.iter().map(|&v| v as f32).collect(),
            bias: c.bias.iter().map(|&v| v as f32).collect(),
        };
        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let got32 = conv3d(&x32, dims, &c32).unwrap();
        for (a, b) in got32.iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_shape_errors() {
        let c = Conv::<f32>::zeros(2, 1, 3);
        assert!(matches!(
            conv3d(&[0.0; 27], [3, 3, 3], &c),
            Err(NetError::Shape(_))
        ));
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x) - b, y> == <x, convᵀ(y)> and dW from a finite difference
        let dims = [4, 3, 5];
        let n = 60;
        let c = rand_conv(2, 3, 3, 20);
        let x = rand_vec(2 * n, 21);
        let dy = rand_vec(3 * n, 22);
        let mut g = Conv::zeros(2, 3, 3);
        let dx = conv3d_backward(&x, dims, &c, &dy, &mut g, true).unwrap();
        let mut c0 = c.clone();
        c0.bias.fill(0.0);
        let y = conv3d(&x, dims, &c0).unwrap();
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let loss = |cc: &Conv<f64>| -> f64 {
            conv3d(&x, dims, cc)
                .unwrap()
                .iter()
                .zip(&dy)
                .map(|(a, b)| a * b)
                .sum()
        };
        for idx in [0, 17, 53, 161] {
            let h = 1e-6;
            let mut p = c.clone();
            p.weight[idx] += h;
            let mut m = c.clone();
            m.weight[idx] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g.weight[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn pooling_examples() {
        let (m, a) = adaptive_max_pool_global(&[1.0f32, 5.0, 3.0, 2.0], 1);
        assert_eq!((m[0], a[0]), (5.0, 1));
        let (m, a) = adaptive_max_pool_global(&[4.0f32; 8], 2);
        assert_eq!(m, vec![4.0, 4.0]);
        assert_eq!(a, vec![0, 0]);
        let mut d = vec![0.0f32; 8];
        adaptive_max_pool_backward(&[1.5, 2.0], &a, 4, &mut d);
        assert_eq!(d, vec![1.5, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pooling_gradient_matches_fd() {
        let x = rand_vec(2 * 27, 5);
        let w = rand_vec(2, 6);
        let f = |x: &[f64]| -> f64 {
            let (m, _) = adaptive_max_pool_global(x, 2);
            m[0] * w[0] + m[1] * w[1]
        };
        let (_, a) = adaptive_max_pool_global(&x, 2);
        let mut d = vec![0.0; 54];
        adaptive_max_pool_backward(&w, &a, 27, &mut d);
        for i in 0..54 {
            let mut p = x.clone();
            p[i] += 1e-6;
            let mut m = x.clone();
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!(
                (fd - d[i]).abs() <= 1e-4 * fd.abs().max(1e-6),
                "{i}: {fd} vs {}",
                d[i]
            );
        }
    }

    #[test]
    fn modulation_examples() {
        let out = modulate(&[2.0f32, 3.0], &[0.5, 2.0], &[1.0, -1.0]).unwrap();
        assert_eq!(out, vec![2.0, 5.0]);
        let p = [0.3f32, -7.25, 1e-7];
        assert_eq!(modulate(&p, &[1.0; 3], &[0.0; 3]).unwrap(), p.to_vec());
        assert!(matches!(
            modulate(&p, &[1.0; 2], &[0.0; 3]),
            Err(NetError::Shape(_))
        ));
    }

    #[test]
    fn modulation_gradient_matches_fd() {
        let p = rand_vec(4, 1);
        let s = rand_vec(4, 2);
        let b = rand_vec(4, 3);
        let w = rand_vec(4, 4);
        let loss = |p: &[f64], s: &[f64], b: &[f64]| -> f64 {
            modulate(p, s, b)
                .unwrap()
                .iter()
                .zip(&w)
                .map(|(a, c)| a * c)
                .sum()
        };
        let (dp, ds, db) = modulate_backward(&p, &s, &w);
        let h = 1e-6;
        for i in 0..4 {
            let bump = |v: &[f64], d: f64| -> Vec<f64> {
                let mut v = v.to_vec();
                v[i] += d;
                v
            };
            let fd_p = (loss(&bump(&p, h), &s, &b) - loss(&bump(&p, -h), &s, &b)) / (2.0 * h);
            let fd_s = (loss(&p, &bump(&s, h), &b) - loss(&p, &bump(&s, -h), &b)) / (2.0 * h);
            let fd_b = (loss(&p, &s, &bump(&b, h)) - loss(&p, &s, &bump(&b, -h))) / (2.0 * h);
            for (fd, an) in [(fd_p, dp[i]), (fd_s, ds[i]), (fd_b, db[i])] {
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-6));
            }
        }
    }
}
