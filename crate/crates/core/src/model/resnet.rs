//! CIFAR-style residual network (3 stages, basic blocks, parameter-free
//! shortcuts). `blocks_per_stage = 5` with `base_width = 16` is ResNet-32.

use ndarray::{s, Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis};
use rand::Rng;

use super::layers::{relu_backward, BatchNorm2d, BatchNormCache, Conv2d, Param};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
struct ConvBn<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

#[derive(Debug, Clone)]
struct ConvBnCache<T> {
    input: Array4<T>,
    bn: BatchNormCache<T>,
}

impl<T: Scalar> ConvBn<T> {
    fn new(rng: &mut impl Rng, cin: usize, cout: usize, stride: usize) -> Self {
        ConvBn {
            conv: Conv2d::new(rng, cin, cout, 3, stride, 1),
            bn: BatchNorm2d::new(cout),
        }
    }

    fn infer(&self, x: ArrayView4<'_, T>) -> Array4<T> {
        self.bn.forward_eval(self.conv.forward(x).view())
    }

    fn forward_train(&mut self, x: ArrayView4<'_, T>) -> (Array4<T>, ConvBnCache<T>) {
        let z = self.conv.forward(x);
        let (y, bn) = self.bn.forward_train(z.view());
        (
            y,
            ConvBnCache {
                input: x.to_owned(),
                bn,
            },
        )
    }

    fn backward(&mut self, cache: &ConvBnCache<T>, grad: ArrayView4<'_, T>) -> Array4<T> {
        let dz = self.bn.backward(&cache.bn, grad);
        self.conv.backward(cache.input.view(), dz.view())
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.conv.weight, &mut self.bn.gamma, &mut self.bn.beta]
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.conv.weight, &self.bn.gamma, &self.bn.beta]
    }

    fn buffers_mut(&mut self) -> Vec<&mut ArrayD<T>> {
        vec![&mut self.bn.running_mean, &mut self.bn.running_var]
    }

    fn buffers(&self) -> Vec<&ArrayD<T>> {
        vec![&self.bn.running_mean, &self.bn.running_var]
    }
}

#[derive(Debug, Clone)]
struct BasicBlock<T> {
    a: ConvBn<T>,
    b: ConvBn<T>,
    stride: usize,
    in_channels: usize,
    out_channels: usize,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    a: ConvBnCache<T>,
    mid: Array4<T>,
    b: ConvBnCache<T>,
    out: Array4<T>,
}

impl<T: Scalar> BasicBlock<T> {
    fn shortcut(&self, x: ArrayView4<'_, T>) -> Array4<T> {
        if self.stride == 1 && self.in_channels == self.out_channels {
            return x.to_owned();
        }
        let sub = x.slice(s![.., .., ..;self.stride, ..;self.stride]);
        let (n, _, h, w) = sub.dim();
        let mut out = Array4::zeros((n, self.out_channels, h, w));
        out.slice_mut(s![.., ..self.in_channels, .., ..]).assign(&sub);
        out
    }

    fn shortcut_backward(&self, grad: ArrayView4<'_, T>, dx: &mut Array4<T>) {
        if self.stride == 1 && self.in_channels == self.out_channels {
            *dx += &grad;
            return;
        }
        let mut target = dx.slice_mut(s![.., .., ..;self.stride, ..;self.stride]);
        target += &grad.slice(s![.., ..self.in_channels, .., ..]);
    }

    fn infer(&self, x: ArrayView4<'_, T>) -> Array4<T> {
        let mid = self.a.infer(x).mapv_into(|v| v.max(T::zero()));
        let y = self.b.infer(mid.view()) + self.shortcut(x);
        y.mapv_into(|v| v.max(T::zero()))
    }

    fn forward_train(&mut self, x: ArrayView4<'_, T>) -> (Array4<T>, BlockCache<T>) {
        let (mid, a) = self.a.forward_train(x);
        let mid = mid.mapv_into(|v| v.max(T::zero()));
        let (y, b) = self.b.forward_train(mid.view());
        let out = (y + self.shortcut(x)).mapv_into(|v| v.max(T::zero()));
        let cache = BlockCache {
            a,
            mid,
            b,
            out: out.clone(),
        };
        (out, cache)
    }

    fn backward(&mut self, cache: &BlockCache<T>, grad: ArrayView4<'_, T>) -> Array4<T> {
        let mut dz = grad.to_owned();
        relu_backward(&mut dz, &cache.out);
        let mut dmid = self.b.backward(&cache.b, dz.view());
        relu_backward(&mut dmid, &cache.mid);
        let mut dx = self.a.backward(&cache.a, dmid.view());
        self.shortcut_backward(dz.view(), &mut dx);
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ResNetShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub blocks_per_stage: usize,
    pub base_width: usize,
}

#[derive(Debug, Clone)]
pub struct ResNet<T> {
    shape: ResNetShape,
    stem: ConvBn<T>,
    blocks: Vec<BasicBlock<T>>,
}

#[derive(Debug, Clone)]
pub struct ResNetCache<T> {
    stem: ConvBnCache<T>,
    stem_out: Array4<T>,
    blocks: Vec<BlockCache<T>>,
    pooled_hw: (usize, usize, usize, usize),
}

impl<T: Scalar> ResNet<T> {
    pub fn new(rng: &mut impl Rng, shape: ResNetShape) -> Self {
        let w = shape.base_width;
        let stem = ConvBn::new(rng, shape.channels, w, 1);
        let mut blocks = Vec::new();
        let mut cin = w;
        for stage in 0..3 {
            let cout = w << stage;
            for b in 0..shape.blocks_per_stage {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock {
                    a: ConvBn::new(rng, cin, cout, stride),
                    b: ConvBn::new(rng, cout, cout, 1),
                    stride,
                    in_channels: cin,
                    out_channels: cout,
                });
                cin = cout;
            }
        }
        ResNet { shape, stem, blocks }
    }

    pub fn embedding_dim(&self) -> usize {
        self.shape.base_width * 4
    }

    fn as_images<'a>(&self, x: ArrayView2<'a, T>) -> ArrayView4<'a, T> {
        let n = x.nrows();
        x.into_shape_with_order((n, self.shape.channels, self.shape.height, self.shape.width))
            .expect("input rows match the image shape")
    }

    fn pool(x: &Array4<T>) -> Array2<T> {
        let (_, _, h, w) = x.dim();
        x.sum_axis(Axis(3)).sum_axis(Axis(2)) / T::of((h * w) as f64)
    }

    pub fn infer(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let x = x.as_standard_layout();
        let mut h = self.stem.infer(self.as_images(x.view())).mapv_into(|v| v.max(T::zero()));
        for b in &self.blocks {
            h = b.infer(h.view());
        }
        Self::pool(&h)
    }

    pub fn forward_train(&mut self, x: ArrayView2<'_, T>) -> (Array2<T>, ResNetCache<T>) {
        let x = x.as_standard_layout();
        let images = self.as_images(x.view()).to_owned();
        let (h, stem) = self.stem.forward_train(images.view());
        let stem_out = h.mapv_into(|v| v.max(T::zero()));
        let mut h = stem_out.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in self.blocks.iter_mut() {
            let (next, cache) = b.forward_train(h.view());
            caches.push(cache);
            h = next;
        }
        let pooled_hw = h.dim();
        (
            Self::pool(&h),
            ResNetCache {
                stem,
                stem_out,
                blocks: caches,
                pooled_hw,
            },
        )
    }

    pub fn backward(&mut self, cache: &ResNetCache<T>, grad: ArrayView2<'_, T>) -> Array2<T> {
        let (n, c, h, w) = cache.pooled_hw;
        let scale = T::one() / T::of((h * w) as f64);
        let mut g = Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| grad[[i, j]] * scale);
        for (b, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = b.backward(bc, g.view());
        }
        relu_backward(&mut g, &cache.stem_out);
        let dx = self.stem.backward(&cache.stem, g.view());
        let len = dx.len() / n;
        dx.into_shape_with_order((n, len)).expect("flatten input grad")
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.stem.params_mut();
        for b in self.blocks.iter_mut() {
            out.extend(b.a.params_mut());
            out.extend(b.b.params_mut());
        }
        out
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.stem.params();
        for b in &self.blocks {
            out.extend(b.a.params());
            out.extend(b.b.params());
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut ArrayD<T>> {
        let mut out = self.stem.buffers_mut();
        for b in self.blocks.iter_mut() {
            out.extend(b.a.buffers_mut());
            out.extend(b.b.buffers_mut());
        }
        out
    }

    pub fn buffers(&self) -> Vec<&ArrayD<T>> {
        let mut out = self.stem.buffers();
        for b in &self.blocks {
            out.extend(b.a.buffers());
            out.extend(b.b.buffers());
        }
        out
    }
}
