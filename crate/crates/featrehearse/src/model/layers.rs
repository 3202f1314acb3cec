//! Building-block layers with explicit forward and backward passes.
//!
//! Convolution is implemented as im2col plus one matrix multiply so the heavy
//! lifting lands in the GEMM kernel. Every backward pass takes the gradient
//! with respect to the layer output and produces gradients for its parameters
//! and (where needed) for its input.

use crate::real::Real;
use ndarray::{Array1, Array2, Array4, Axis};

/// Activation flowing between layers: spatial maps before flattening,
/// plain matrices after.
#[derive(Debug, Clone)]
pub enum Act<F> {
    Spatial(Array4<F>),
    Flat(Array2<F>),
}

impl<F: Real> Act<F> {
    pub fn spatial(&self) -> &Array4<F> {
        match self {
            Act::Spatial(a) => a,
            Act::Flat(_) => panic!("expected spatial activation"),
        }
    }
    pub fn flat(&self) -> &Array2<F> {
        match self {
            Act::Flat(a) => a,
            Act::Spatial(_) => panic!("expected flat activation"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense<F> {
    /// (outputs, inputs)
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Dense<F> {
    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Returns (grad_input, grad_weight, grad_bias).
    pub fn backward(
        &self,
        x: &Array2<F>,
        grad_y: &Array2<F>,
    ) -> (Array2<F>, Array2<F>, Array1<F>) {
        let grad_w = grad_y.t().dot(x);
        let grad_b = grad_y.sum_axis(Axis(0));
        let grad_x = grad_y.dot(&self.weight);
        (grad_x, grad_w, grad_b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// (out_channels, in_channels, kernel, kernel)
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub padding: usize,
}

impl<F: Real> Conv2d<F> {
    fn dims(&self, x: &Array4<F>) -> (usize, usize, usize, usize, usize, usize) {
        let (n, c, h, w) = x.dim();
        let k = self.weight.shape()[2];
        debug_assert_eq!(c, self.weight.shape()[1]);
        let oh = h + 2 * self.padding - k + 1;
        let ow = w + 2 * self.padding - k + 1;
        (n, c, oh, ow, h, w)
    }

    /// Unfolds x into (n*oh*ow, c*k*k) patch rows.
    pub fn im2col(&self, x: &Array4<F>) -> Array2<F> {
        let (n, c, oh, ow, h, w) = self.dims(x);
        let k = self.weight.shape()[2];
        let pad = self.padding as isize;
        let xs = x.as_slice().expect("input is standard layout");
        let mut cols = Array2::<F>::zeros((n * oh * ow, c * k * k));
        let cs = cols.as_slice_mut().unwrap();
        let row_len = c * k * k;
        for img in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((img * oh + oy) * ow + ox) * row_len;
                    for ch in 0..c {
                        let plane = (img * c + ch) * h * w;
                        for ky in 0..k {
                            let sy = oy as isize + ky as isize - pad;
                            let dst = row + (ch * k + ky) * k;
                            if sy < 0 || sy >= h as isize {
                                continue; // padded rows stay zero
                            }
                            let src_row = plane + sy as usize * w;
                            for kx in 0..k {
                                let sx = ox as isize + kx as isize - pad;
                                if sx >= 0 && sx < w as isize {
                                    cs[dst + kx] = xs[src_row + sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, Array2<F>) {
        let (n, _, oh, ow, _, _) = self.dims(x);
        let oc = self.weight.shape()[0];
        let k = self.weight.shape()[2];
        let cols = self.im2col(x);
        let w2 = self
            .weight
            .view()
            .into_shape((oc, self.weight.shape()[1] * k * k))
            .unwrap();
        let mut y2 = cols.dot(&w2.t());
        y2 += &self.bias;
        let y = y2
            .into_shape((n, oh, ow, oc))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (y, cols)
    }

    /// Returns (grad_input, grad_weight, grad_bias); `cols` is the im2col
    /// buffer saved by forward.
    pub fn backward(
        &self,
        x_shape: (usize, usize, usize, usize),
        cols: &Array2<F>,
        grad_y: &Array4<F>,
        need_grad_input: bool,
    ) -> (Option<Array4<F>>, Array4<F>, Array1<F>) {
        let (n, c, h, w) = x_shape;
        let (oc, _, k, _) = self.weight.dim();
        let (_, _, oh, ow) = grad_y.dim();
        let g2 = grad_y
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_shape((n * oh * ow, oc))
            .unwrap()
            .to_owned();
        let grad_b = g2.sum_axis(Axis(0));
        let grad_w = g2
            .t()
            .dot(cols)
            .into_shape((oc, c, k, k))
            .unwrap();
        if !need_grad_input {
            return (None, grad_w, grad_b);
        }
        let w2 = self.weight.view().into_shape((oc, c * k * k)).unwrap();
        let grad_cols = g2.dot(&w2);
        // col2im: scatter-add patch gradients back onto the input grid.
        let mut grad_x = Array4::<F>::zeros((n, c, h, w));
        let gx = grad_x.as_slice_mut().unwrap();
        let gc = grad_cols.as_slice().unwrap();
        let pad = self.padding as isize;
        let row_len = c * k * k;
        for img in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((img * oh + oy) * ow + ox) * row_len;
                    for ch in 0..c {
                        let plane = (img * c + ch) * h * w;
                        for ky in 0..k {
                            let sy = oy as isize + ky as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let dst_row = plane + sy as usize * w;
                            let src = row + (ch * k + ky) * k;
                            for kx in 0..k {
                                let sx = ox as isize + kx as isize - pad;
                                if sx >= 0 && sx < w as isize {
                                    gx[dst_row + sx as usize] += gc[src + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        (Some(grad_x), grad_w, grad_b)
    }
}

pub fn relu_forward<F: Real>(act: &Act<F>) -> Act<F> {
    let f = |v: &F| if *v > F::zero() { *v } else { F::zero() };
    match act {
        Act::Spatial(a) => Act::Spatial(a.map(f)),
        Act::Flat(a) => Act::Flat(a.map(f)),
    }
}

/// Masks the output gradient by where the forward input was positive.
pub fn relu_backward<F: Real>(input: &Act<F>, grad: Act<F>) -> Act<F> {
    match (input, grad) {
        (Act::Spatial(x), Act::Spatial(mut g)) => {
            ndarray::Zip::from(&mut g).and(x).for_each(|gv, &xv| {
                if xv <= F::zero() {
                    *gv = F::zero();
                }
            });
            Act::Spatial(g)
        }
        (Act::Flat(x), Act::Flat(mut g)) => {
            ndarray::Zip::from(&mut g).and(x).for_each(|gv, &xv| {
                if xv <= F::zero() {
                    *gv = F::zero();
                }
            });
            Act::Flat(g)
        }
        _ => panic!("relu input/grad rank mismatch"),
    }
}

/// Non-overlapping max pooling with square window `size`. Returns the pooled
/// map plus, per output cell, the flat input index that won (for backward).
pub fn maxpool_forward<F: Real>(x: &Array4<F>, size: usize) -> (Array4<F>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    debug_assert!(h % size == 0 && w % size == 0);
    let (oh, ow) = (h / size, w / size);
    let xs = x.as_slice().expect("input is standard layout");
    let mut out = Array4::<F>::zeros((n, c, oh, ow));
    let os = out.as_slice_mut().unwrap();
    let mut argmax = vec![0u32; n * c * oh * ow];
    for img in 0..n {
        for ch in 0..c {
            let plane = (img * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_at = 0usize;
                    for dy in 0..size {
                        let row = plane + (oy * size + dy) * w + ox * size;
                        for dx in 0..size {
                            let v = xs[row + dx];
                            if v > best {
                                best = v;
                                best_at = row + dx;
                            }
                        }
                    }
                    let o = ((img * c + ch) * oh + oy) * ow + ox;
                    os[o] = best;
                    argmax[o] = best_at as u32;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward<F: Real>(
    x_shape: (usize, usize, usize, usize),
    argmax: &[u32],
    grad_y: &Array4<F>,
) -> Array4<F> {
    let mut grad_x = Array4::<F>::zeros(x_shape);
    let gx = grad_x.as_slice_mut().unwrap();
    let gy = grad_y.as_slice().expect("grad is standard layout");
    for (g, &at) in gy.iter().zip(argmax) {
        gx[at as usize] += *g;
    }
    grad_x
}

pub fn flatten_forward<F: Real>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    x.view()
        .into_shape((n, c * h * w))
        .unwrap()
        .to_owned()
}

pub fn flatten_backward<F: Real>(
    x_shape: (usize, usize, usize, usize),
    grad_y: Array2<F>,
) -> Array4<F> {
    grad_y.into_shape(x_shape).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array};

    #[test]
    fn dense_forward_matches_hand_result() {
        let d = Dense {
            weight: arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]),
            bias: arr1(&[0.5, -0.5, 0.0]),
        };
        let x = arr2(&[[1.0, 1.0], [2.0, 0.0]]);
        let y = d.forward(&x);
        assert_eq!(y, arr2(&[[3.5, 6.5, 11.0], [2.5, 5.5, 10.0]]));
    }

    #[test]
    fn dense_backward_shapes_and_values() {
        let d = Dense {
            weight: arr2(&[[1.0, -1.0]]),
            bias: arr1(&[0.0]),
        };
        let x = arr2(&[[2.0, 3.0]]);
        let gy = arr2(&[[1.0]]);
        let (gx, gw, gb) = d.backward(&x, &gy);
        assert_eq!(gx, arr2(&[[1.0, -1.0]]));
        assert_eq!(gw, arr2(&[[2.0, 3.0]]));
        assert_eq!(gb, arr1(&[1.0]));
    }

    #[test]
    fn conv_trace_kernel() {
        let x = Array::from_shape_vec(
            (1, 1, 3, 3),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let conv = Conv2d {
            weight: Array::from_shape_vec((1, 1, 2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: arr1(&[0.5]),
            padding: 0,
        };
        let (y, _) = conv.forward(&x);
        let want = Array::from_shape_vec((1, 1, 2, 2), vec![6.5, 8.5, 12.5, 14.5]).unwrap();
        assert_eq!(y, want);
    }

    #[test]
    fn conv_padding_zero_fills() {
        let x = Array::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let conv = Conv2d {
            weight: Array::from_shape_vec((1, 1, 3, 3), {
                let mut w = vec![0.0; 9];
                w[0] = 1.0; // top-left tap reaches into the pad at the corner
                w
            })
            .unwrap(),
            bias: arr1(&[0.0]),
            padding: 1,
        };
        let (y, _) = conv.forward(&x);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[[0, 0, 0, 0]], 0.0);
        assert_eq!(y[[0, 0, 1, 1]], 1.0);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = crate::rng::stream_rng(5, "convfd", 0);
        use rand::Rng;
        let mut next = |_: usize| rng.gen_range(-1.0..1.0f64);
        let x = Array::from_shape_fn((2, 2, 4, 4), |_| next(0));
        let conv = Conv2d {
            weight: Array::from_shape_fn((3, 2, 3, 3), |_| next(0)),
            bias: Array::from_shape_fn(3, |_| next(0)),
            padding: 1,
        };
        let probe = Array::from_shape_fn((2, 3, 4, 4), |_| next(0));
        let loss = |c: &Conv2d<f64>, x: &Array4<f64>| (&c.forward(x).0 * &probe).sum();

        let (y, cols) = conv.forward(&x);
        assert_eq!(y.dim(), probe.dim());
        let (gx, gw, gb) = conv.backward(x.dim(), &cols, &probe, true);
        let gx = gx.unwrap();

        let eps = 1e-6;
        // weights
        for idx in [[0, 0, 0, 0], [2, 1, 2, 2], [1, 0, 1, 2]] {
            let mut cp = conv.clone();
            cp.weight[idx] += eps;
            let up = loss(&cp, &x);
            cp.weight[idx] -= 2.0 * eps;
            let dn = loss(&cp, &x);
            let fd = (up - dn) / (2.0 * eps);
            assert!((fd - gw[idx]).abs() < 1e-6, "w{idx:?}: fd {fd} vs {}", gw[idx]);
        }
        // bias
        for i in 0..3 {
            let mut cp = conv.clone();
            cp.bias[i] += eps;
            let up = loss(&cp, &x);
            cp.bias[i] -= 2.0 * eps;
            let dn = loss(&cp, &x);
            let fd = (up - dn) / (2.0 * eps);
            assert!((fd - gb[i]).abs() < 1e-6);
        }
        // input
        for idx in [[0, 0, 0, 0], [1, 1, 3, 3], [0, 1, 2, 1]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let up = loss(&conv, &xp);
            xp[idx] -= 2.0 * eps;
            let dn = loss(&conv, &xp);
            let fd = (up - dn) / (2.0 * eps);
            assert!((fd - gx[idx]).abs() < 1e-6, "x{idx:?}: fd {fd} vs {}", gx[idx]);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = Array::from_shape_vec(
            (1, 1, 4, 4),
            vec![
                1.0, 2.0, 5.0, 4.0, //
                3.0, 0.0, 1.0, 1.0, //
                9.0, 1.0, 2.0, 2.0, //
                1.0, 1.0, 2.0, 8.0,
            ],
        )
        .unwrap();
        let (y, arg) = maxpool_forward(&x, 2);
        assert_eq!(
            y,
            Array::from_shape_vec((1, 1, 2, 2), vec![3.0, 5.0, 9.0, 8.0]).unwrap()
        );
        let gy = Array::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gx = maxpool_backward(x.dim(), &arg, &gy);
        assert_eq!(gx[[0, 0, 1, 0]], 1.0);
        assert_eq!(gx[[0, 0, 0, 2]], 2.0);
        assert_eq!(gx[[0, 0, 2, 0]], 3.0);
        assert_eq!(gx[[0, 0, 3, 3]], 4.0);
        assert_eq!(gx.sum(), 10.0);
    }

    #[test]
    fn relu_masks_by_input_sign() {
        let x = Act::Flat(arr2(&[[1.0, -2.0, 0.0]]));
        let y = relu_forward(&x);
        assert_eq!(y.flat(), &arr2(&[[1.0, 0.0, 0.0]]));
        let g = relu_backward(&x, Act::Flat(arr2(&[[5.0, 5.0, 5.0]])));
        assert_eq!(g.flat(), &arr2(&[[5.0, 0.0, 0.0]]));
    }

    #[test]
    fn flatten_round_trip() {
        let x = Array::from_shape_fn((2, 3, 2, 2), |(a, b, c, d)| (a * 100 + b * 10 + c * 2 + d) as f32);
        let f = flatten_forward(&x);
        assert_eq!(f.dim(), (2, 12));
        let back = flatten_backward(x.dim(), f);
        assert_eq!(back, x);
    }
}
