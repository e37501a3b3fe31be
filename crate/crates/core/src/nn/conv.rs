use super::param::{join, Param, Parameterized};
use super::Float;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array4, ArrayView2, ArrayViewMut2};
use rand::Rng;

/// 2-D convolution lowered to a single matrix product via im2col.
///
/// The weight is stored as `(out_channels, in_channels * k * k)`, i.e. the
/// flattened `(c, ky, kx)` kernel per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Float> Conv2d<T> {
    /// He-uniform initialisation, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::uniform(&[out_channels, fan_in], bound, rng),
            bias: Param::zeros(&[out_channels]),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    fn weight_view(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape(
            (self.out_channels, self.in_channels * self.kernel * self.kernel),
            self.weight.values(),
        )
        .expect("conv weight shape")
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_size(h, w);
        let n = b * ho * wo;
        let k = c * self.kernel * self.kernel;
        let cols = self.im2col(x, ho, wo);
        let cols = ArrayView2::from_shape((k, n), &cols).expect("cols shape");
        let mut ymat = vec![T::zero(); self.out_channels * n];
        {
            let mut yv = ArrayViewMut2::from_shape((self.out_channels, n), &mut ymat[..])
                .expect("ymat shape");
            general_mat_mul(T::one(), &self.weight_view(), &cols, T::zero(), &mut yv);
        }
        let hw = ho * wo;
        let bias = self.bias.values();
        let mut out = Array4::zeros((b, self.out_channels, ho, wo));
        let out_s = out.as_slice_mut().expect("standard layout");
        for bi in 0..b {
            for co in 0..self.out_channels {
                let src = &ymat[co * n + bi * hw..co * n + (bi + 1) * hw];
                let dst = &mut out_s[(bi * self.out_channels + co) * hw..][..hw];
                let bv = bias[co];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and optionally returns the input gradient.
    pub fn backward(&mut self, x: &Array4<T>, dy: &Array4<T>, need_dx: bool) -> Option<Array4<T>> {
        let (b, c, h, w) = x.dim();
        let (_, co_n, ho, wo) = dy.dim();
        assert_eq!(co_n, self.out_channels);
        let hw = ho * wo;
        let n = b * hw;
        let k = c * self.kernel * self.kernel;

        let dy_s = dy.as_standard_layout();
        let dy_s = dy_s.as_slice().expect("standard layout");
        let mut dymat = vec![T::zero(); co_n * n];
        for bi in 0..b {
            for co in 0..co_n {
                dymat[co * n + bi * hw..co * n + (bi + 1) * hw]
                    .copy_from_slice(&dy_s[(bi * co_n + co) * hw..][..hw]);
            }
        }
        let dyv = ArrayView2::from_shape((co_n, n), &dymat).expect("dy shape");

        {
            let db = self.bias.grad.as_slice_mut().expect("contiguous");
            for co in 0..co_n {
                let s: T = dymat[co * n..(co + 1) * n].iter().copied().sum();
                db[co] += s;
            }
        }

        let cols = self.im2col(x, ho, wo);
        let colsv = ArrayView2::from_shape((k, n), &cols).expect("cols shape");
        {
            let dw = self.weight.grad.as_slice_mut().expect("contiguous");
            let mut dwv = ArrayViewMut2::from_shape((co_n, k), dw).expect("dw shape");
            general_mat_mul(T::one(), &dyv, &colsv.t(), T::one(), &mut dwv);
        }
        drop(cols);

        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); k * n];
        {
            let mut dcv = ArrayViewMut2::from_shape((k, n), &mut dcols[..]).expect("dcols shape");
            general_mat_mul(T::one(), &self.weight_view().t(), &dyv, T::zero(), &mut dcv);
        }
        Some(self.col2im(&dcols, (b, c, h, w), ho, wo))
    }

    fn im2col(&self, x: &Array4<T>, ho: usize, wo: usize) -> Vec<T> {
        let (b, c, h, w) = x.dim();
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let kk = self.kernel;
        let n = b * ho * wo;
        let mut cols = vec![T::zero(); c * kk * kk * n];
        let (s, p) = (self.stride as isize, self.padding as isize);
        for ci in 0..c {
            for ky in 0..kk {
                for kx in 0..kk {
                    let row = (ci * kk + ky) * kk + kx;
                    let dst_row = &mut cols[row * n..(row + 1) * n];
                    for bi in 0..b {
                        let plane = &xs[(bi * c + ci) * h * w..][..h * w];
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - p;
                            let dst = &mut dst_row[(bi * ho + oy) * wo..][..wo];
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * w..][..w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[T], shape: (usize, usize, usize, usize), ho: usize, wo: usize) -> Array4<T> {
        let (b, c, h, w) = shape;
        let kk = self.kernel;
        let n = b * ho * wo;
        let mut dx = Array4::<T>::zeros(shape);
        let dxs = dx.as_slice_mut().expect("standard layout");
        let (s, p) = (self.stride as isize, self.padding as isize);
        for ci in 0..c {
            for ky in 0..kk {
                for kx in 0..kk {
                    let row = (ci * kk + ky) * kk + kx;
                    let src_row = &dcols[row * n..(row + 1) * n];
                    for bi in 0..b {
                        let plane = &mut dxs[(bi * c + ci) * h * w..][..h * w];
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &src_row[(bi * ho + oy) * wo..][..wo];
                            let dst = &mut plane[iy as usize * w..][..w];
                            for (ox, &g) in src.iter().enumerate() {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<T: Float> Parameterized<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// 2x2 max pooling with stride 2 (floor semantics).
pub fn max_pool2<T: Float>(x: &Array4<T>) -> (Array4<T>, Vec<u32>) {
    let (b, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut out = Array4::zeros((b, c, ho, wo));
    let mut arg = vec![0u32; b * c * ho * wo];
    let os = out.as_slice_mut().expect("standard layout");
    for plane in 0..b * c {
        let src = &xs[plane * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                os[o] = src[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Float>(
    dy: &Array4<T>,
    arg: &[u32],
    in_shape: (usize, usize, usize, usize),
) -> Array4<T> {
    let (b, c, h, w) = in_shape;
    let (_, _, ho, wo) = dy.dim();
    let dys = dy.as_standard_layout();
    let dys = dys.as_slice().expect("standard layout");
    let mut dx = Array4::zeros(in_shape);
    let dxs = dx.as_slice_mut().expect("standard layout");
    for plane in 0..b * c {
        for o in 0..ho * wo {
            let i = plane * ho * wo + o;
            dxs[plane * h * w + arg[i] as usize] += dys[i];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let (ho, wo) = conv.output_size(h, w);
        let k = conv.kernel;
        let wv = conv.weight_view();
        let mut out = Array4::zeros((b, conv.out_channels, ho, wo));
        for bi in 0..b {
            for co in 0..conv.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.values()[co];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wv[[co, (ci * k + ky) * k + kx]]
                                            * x[[bi, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        out[[bi, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_input(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let d = rand_distr::Uniform::new(-1.0, 1.0).unwrap();
        Array4::from_shape_fn(shape, |_| rand_distr::Distribution::sample(&d, rng))
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (3, 1, 0)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, s, p, &mut rng);
            conv.bias = Param::uniform(&[4], 0.5, &mut rng);
            let x = random_input(&mut rng, (2, 3, 7, 6));
            let fast = conv.forward(&x);
            let slow = direct_conv(&conv, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, &mut rng);
        let x = random_input(&mut rng, (2, 2, 5, 5));
        let y = conv.forward(&x);
        let g = random_input(&mut rng, y.dim());
        // loss = <g, conv(x)>
        let loss = |conv: &Conv2d<f64>, x: &Array4<f64>| -> f64 {
            conv.forward(x).iter().zip(g.iter()).map(|(a, b)| a * b).sum()
        };
        conv.zero_grad();
        let dx = conv.backward(&x, &g, true).unwrap();
        let h = 1e-6;
        for i in 0..conv.weight.len() {
            let mut c2 = conv.clone();
            c2.weight.values_mut()[i] += h;
            let up = loss(&c2, &x);
            c2.weight.values_mut()[i] -= 2.0 * h;
            let dn = loss(&c2, &x);
            let num = (up - dn) / (2.0 * h);
            assert!((num - conv.weight.grads()[i]).abs() < 1e-7);
        }
        let xs = x.as_slice().unwrap();
        for i in 0..xs.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            let up = loss(&conv, &xp);
            xp.as_slice_mut().unwrap()[i] -= 2.0 * h;
            let dn = loss(&conv, &xp);
            let num = (up - dn) / (2.0 * h);
            assert!((num - dx.as_slice().unwrap()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Array4::from_shape_vec((1, 1, 2, 4), vec![1.0, 5.0, 2.0, 2.0, 3.0, 0.0, 9.0, 1.0]).unwrap();
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.as_slice().unwrap(), &[5.0, 9.0]);
        let dy = Array4::from_shape_vec((1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let dx = max_pool2_backward(&dy, &arg, x.dim());
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }
}
