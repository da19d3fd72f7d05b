//! Layers with explicit forward/backward passes.
//!
//! Backward passes accumulate into `Param::grad` and return the gradient
//! w.r.t. the layer input.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

/// A trainable tensor with its gradient and optimizer state.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub velocity: ArrayD<T>,
    /// Whether weight decay applies (off for biases and norm affine terms).
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>, decay: bool) -> Self {
        let zeros = ArrayD::zeros(value.raw_dim());
        Param {
            grad: zeros.clone(),
            velocity: zeros,
            value,
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn matrix(&self) -> ArrayView2<'_, T> {
        self.value.view().into_dimensionality::<Ix2>().expect("2-d param")
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub(crate) fn gaussian<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(rng: &mut impl Rng, input: usize, output: usize, gain: f64) -> Self {
        let std = gain / (input as f64).sqrt();
        Linear {
            weight: Param::new(gaussian(rng, &[output, input], std), true),
            bias: Param::new(ArrayD::zeros(IxDyn(&[output])), false),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("1-d bias");
        x.dot(&self.weight.matrix().t()) + b
    }

    pub fn backward(&mut self, x: ArrayView2<'_, T>, grad_out: ArrayView2<'_, T>) -> Array2<T> {
        let gw = grad_out.t().dot(&x);
        self.weight.grad += &gw.into_dyn();
        self.bias.grad += &grad_out.sum_axis(Axis(0)).into_dyn();
        grad_out.dot(&self.weight.matrix())
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// Zeroes `grad` wherever the post-activation `out` is not positive.
pub fn relu_backward<T: Scalar, D: ndarray::Dimension>(
    grad: &mut ndarray::Array<T, D>,
    out: &ndarray::Array<T, D>,
) {
    ndarray::Zip::from(grad).and(out).for_each(|g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}

/// Square-kernel 2-d convolution without bias, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        rng: &mut impl Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Conv2d {
            weight: Param::new(gaussian(rng, &[out_channels, fan_in], std), true),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut Array2<T>) {
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let cols = cols.as_slice_mut().expect("standard layout");
        let mut r = 0;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[r * oh * ow..(r + 1) * oh * ow];
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            row[oi * ow + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                plane[ii as usize * w + jj as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &Array2<T>, h: usize, w: usize, dx: &mut [T]) {
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let cols = cols.as_slice().expect("standard layout");
        let mut r = 0;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[r * oh * ow..(r + 1) * oh * ow];
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii as usize >= h {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj >= 0 && (jj as usize) < w {
                                plane[ii as usize * w + jj as usize] += row[oi * ow + oj];
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    pub fn forward(&self, x: ArrayView4<'_, T>) -> Array4<T> {
        let (n, _, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let per = self.in_channels * h * w;
        let mut out = Array4::zeros((n, self.out_channels, oh, ow));
        let mut cols = Array2::zeros((self.in_channels * self.kernel * self.kernel, oh * ow));
        let weight = self.weight.matrix();
        for (s, mut o) in out.outer_iter_mut().enumerate() {
            self.im2col(&xs[s * per..(s + 1) * per], h, w, &mut cols);
            let y = weight.dot(&cols);
            o.assign(&y.into_shape_with_order((self.out_channels, oh, ow)).expect("conv output shape"));
        }
        out
    }

    pub fn backward(&mut self, x: ArrayView4<'_, T>, grad_out: ArrayView4<'_, T>) -> Array4<T> {
        let (n, _, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let g = grad_out.as_standard_layout();
        let per = self.in_channels * h * w;
        let mut dx = Array4::zeros((n, self.in_channels, h, w));
        let mut cols = Array2::zeros((self.in_channels * self.kernel * self.kernel, oh * ow));
        let mut dw = Array2::<T>::zeros((self.out_channels, cols.nrows()));
        let weight = self.weight.matrix().to_owned();
        {
            let dxs = dx.as_slice_mut().expect("standard layout");
            for s in 0..n {
                self.im2col(&xs[s * per..(s + 1) * per], h, w, &mut cols);
                let gs = g
                    .index_axis(Axis(0), s)
                    .into_shape_with_order((self.out_channels, oh * ow))
                    .expect("grad shape");
                ndarray::linalg::general_mat_mul(T::one(), &gs, &cols.t(), T::one(), &mut dw);
                let dcols = weight.t().dot(&gs);
                self.col2im(&dcols, h, w, &mut dxs[s * per..(s + 1) * per]);
            }
        }
        self.weight.grad += &dw.into_dyn();
        dx
    }
}

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    x_hat: Array4<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels])), false),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels])), false),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn affine(&self, x_hat: &mut Array4<T>) {
        for (c, mut plane) in x_hat.axis_iter_mut(Axis(1)).enumerate() {
            let g = self.gamma.value[[c]];
            let b = self.beta.value[[c]];
            plane.mapv_inplace(|v| v * g + b);
        }
    }

    pub fn forward_train(&mut self, x: ArrayView4<'_, T>) -> (Array4<T>, BatchNormCache<T>) {
        let (n, ch, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut x_hat = x.to_owned();
        let mut inv_std = Array1::zeros(ch);
        let mom = T::of(self.momentum);
        for (c, mut plane) in x_hat.axis_iter_mut(Axis(1)).enumerate() {
            let mean = plane.sum() / T::of(m);
            let var = plane.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / T::of(m);
            let inv = T::one() / (var + T::of(self.eps)).sqrt();
            plane.mapv_inplace(|v| (v - mean) * inv);
            inv_std[c] = inv;
            let unbiased = if m > 1.0 { var * T::of(m / (m - 1.0)) } else { var };
            self.running_mean[[c]] = (T::one() - mom) * self.running_mean[[c]] + mom * mean;
            self.running_var[[c]] = (T::one() - mom) * self.running_var[[c]] + mom * unbiased;
        }
        let mut y = x_hat.clone();
        self.affine(&mut y);
        (y, BatchNormCache { x_hat, inv_std })
    }

    pub fn forward_eval(&self, x: ArrayView4<'_, T>) -> Array4<T> {
        let mut y = x.to_owned();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let mean = self.running_mean[[c]];
            let inv = T::one() / (self.running_var[[c]] + T::of(self.eps)).sqrt();
            plane.mapv_inplace(|v| (v - mean) * inv);
        }
        self.affine(&mut y);
        y
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, grad_out: ArrayView4<'_, T>) -> Array4<T> {
        let (n, _, h, w) = grad_out.dim();
        let m = T::of((n * h * w) as f64);
        let mut dx = grad_out.to_owned();
        for (c, mut plane) in dx.axis_iter_mut(Axis(1)).enumerate() {
            let xh = cache.x_hat.index_axis(Axis(1), c);
            let sum_dy = plane.sum();
            let sum_dy_xh = ndarray::Zip::from(&plane).and(&xh).fold(T::zero(), |acc, &g, &x| acc + g * x);
            self.gamma.grad[[c]] += sum_dy_xh;
            self.beta.grad[[c]] += sum_dy;
            let scale = self.gamma.value[[c]] * cache.inv_std[c] / m;
            ndarray::Zip::from(&mut plane).and(&xh).for_each(|g, &x| {
                *g = scale * (m * *g - sum_dy - x * sum_dy_xh);
            });
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error, STEP};
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array::from_shape_fn(shape, |_| rng.sample(StandardNormal))
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new(&mut rng, 2, 3, 3, 2, 1);
        let x = randn4(&mut rng, (1, 2, 5, 5));
        let y = conv.forward(x.view());
        assert_eq!(y.dim(), (1, 3, 3, 3));
        let wt = conv.weight.matrix();
        for o in 0..3 {
            for oi in 0..3 {
                for oj in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ii = (oi * 2 + ki) as isize - 1;
                                let jj = (oj * 2 + kj) as isize - 1;
                                if (0..5).contains(&ii) && (0..5).contains(&jj) {
                                    acc += wt[[o, c * 9 + ki * 3 + kj]] * x[[0, c, ii as usize, jj as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[0, o, oi, oj]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::<f64>::new(&mut rng, 2, 2, 3, 2, 1);
        let x = randn4(&mut rng, (2, 2, 4, 4));
        let probe = randn4(&mut rng, (2, 2, 2, 2));
        let dx = conv.backward(x.view(), probe.view());
        let dw: Vec<f64> = conv.weight.grad.iter().copied().collect();
        let loss_x = |p: &[f64]| {
            let xp = Array4::from_shape_vec(x.raw_dim(), p.to_vec()).unwrap();
            (conv.forward(xp.view()) * &probe).sum()
        };
        let num_x = central_difference(loss_x, x.as_slice().unwrap(), STEP);
        assert!(max_relative_error(dx.as_slice().unwrap(), &num_x) < 1e-4);
        let w0: Vec<f64> = conv.weight.value.iter().copied().collect();
        let mut c2 = conv.clone();
        let num_w = central_difference(
            |p| {
                c2.weight.value = ArrayD::from_shape_vec(conv.weight.value.raw_dim(), p.to_vec()).unwrap();
                (c2.forward(x.view()) * &probe).sum()
            },
            &w0,
            STEP,
        );
        assert!(max_relative_error(&dw, &num_w) < 1e-4);
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma.value = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.3, -0.7]).unwrap();
        let x = randn4(&mut rng, (3, 2, 2, 2));
        let probe = randn4(&mut rng, (3, 2, 2, 2));
        let (_, cache) = bn.forward_train(x.view());
        let dx = bn.backward(&cache, probe.view());
        let mut bn2 = bn.clone();
        let num = central_difference(
            |p| {
                let xp = Array4::from_shape_vec(x.raw_dim(), p.to_vec()).unwrap();
                (bn2.forward_train(xp.view()).0 * &probe).sum()
            },
            x.as_slice().unwrap(),
            STEP,
        );
        assert!(max_relative_error(dx.as_slice().unwrap(), &num) < 1e-4);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = Array4::from_shape_fn((4, 1, 1, 1), |(i, ..)| i as f64);
        for _ in 0..200 {
            bn.forward_train(x.view());
        }
        assert!((bn.running_mean[[0]] - 1.5).abs() < 1e-6);
        let y = bn.forward_eval(x.view());
        let y2 = bn.forward_eval(x.view());
        assert_eq!(y, y2);
        assert!(y.sum().abs() < 1e-4);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut lin = Linear::<f64>::new(&mut rng, 3, 2, 1.0);
        let x = Array2::from_shape_fn((4, 3), |_| rng.sample(StandardNormal));
        let probe = Array2::from_shape_fn((4, 2), |_| rng.sample(StandardNormal));
        let dx = lin.backward(x.view(), probe.view());
        let num = central_difference(
            |p| (lin.forward(ArrayView2::from_shape((4, 3), p).unwrap()) * &probe).sum(),
            x.as_slice().unwrap(),
            STEP,
        );
        assert!(max_relative_error(dx.as_slice().unwrap(), &num) < 1e-4);
        let gb: Vec<f64> = lin.bias.grad.iter().copied().collect();
        let expected: Vec<f64> = probe.sum_axis(Axis(0)).to_vec();
        assert!(max_relative_error(&gb, &expected) < 1e-12);
    }
}
