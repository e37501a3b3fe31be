//! Feature projections and classifier heads, generic over the scalar type so
//! the same code runs in `f32` for training and `f64` for gradient checks.

use crate::error::{Error, Result};
use crate::nn::linear::softmax_rows;
use crate::nn::param::join;
use crate::nn::{Activation, Float, Linear, Param, Parameterized};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Channel-mixing map applied at every spatial position, then flattened.
///
/// For `F` of shape `(C, H, W)` the output is `f[c·HW + r·W + k] = Σ_j W[c,j]·F[j,r,k] + b[c]`,
/// i.e. a 1×1 convolution flattened in (channel, row, column) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection<T> {
    pub channels: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Float> Projection<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let bound = (3.0 / channels as f64).sqrt();
        Self { channels, weight: Param::uniform(&[channels, channels], bound, rng), bias: Param::zeros(&[channels]) }
    }

    fn w(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.channels, self.channels), self.weight.values()).expect("projection weight")
    }

    /// `(B, C, H, W)` → `(B, C·H·W)`.
    pub fn forward(&self, f: &Array4<T>) -> Result<Array2<T>> {
        let (b, c, h, w) = f.dim();
        if c != self.channels {
            return Err(Error::Shape(format!("projection expects {} channels, got {c}", self.channels)));
        }
        let hw = h * w;
        let fs = f.as_standard_layout();
        let fs = fs.as_slice().expect("standard layout");
        let mut out = Array2::zeros((b, c * hw));
        let bias = self.bias.values();
        for (bi, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let x = ArrayView2::from_shape((c, hw), &fs[bi * c * hw..][..c * hw]).expect("slice");
            let dst = row.as_slice_mut().expect("row contiguous");
            let mut y = ArrayViewMut2::from_shape((c, hw), dst).expect("row shape");
            general_mat_mul(T::one(), &self.w(), &x, T::zero(), &mut y);
            for (ci, mut r) in y.axis_iter_mut(Axis(0)).enumerate() {
                r.mapv_inplace(|v| v + bias[ci]);
            }
        }
        Ok(out)
    }

    /// Accumulates gradients from `dy` (shape of the output); returns `dF` when asked.
    pub fn backward(&mut self, f: &Array4<T>, dy: &Array2<T>, need_dx: bool) -> Option<Array4<T>> {
        let (b, c, h, w) = f.dim();
        let hw = h * w;
        let fs = f.as_standard_layout();
        let fs = fs.as_slice().expect("standard layout");
        let dys = dy.as_standard_layout();
        let dys = dys.as_slice().expect("standard layout");
        let mut dx = need_dx.then(|| Array4::zeros((b, c, h, w)));
        for bi in 0..b {
            let x = ArrayView2::from_shape((c, hw), &fs[bi * c * hw..][..c * hw]).expect("slice");
            let g = ArrayView2::from_shape((c, hw), &dys[bi * c * hw..][..c * hw]).expect("slice");
            {
                let dw = self.weight.grad.as_slice_mut().expect("contiguous");
                let mut dwv = ArrayViewMut2::from_shape((c, c), dw).expect("dw");
                general_mat_mul(T::one(), &g, &x.t(), T::one(), &mut dwv);
            }
            let db = self.bias.grad.as_slice_mut().expect("contiguous");
            for (ci, r) in g.axis_iter(Axis(0)).enumerate() {
                db[ci] += r.sum();
            }
            if let Some(dx) = dx.as_mut() {
                let dst = dx.as_slice_mut().expect("standard layout");
                let mut d = ArrayViewMut2::from_shape((c, hw), &mut dst[bi * c * hw..][..c * hw]).expect("slice");
                general_mat_mul(T::one(), &self.w().t(), &g, T::zero(), &mut d);
            }
        }
        dx
    }
}

impl<T: Float> Parameterized<T> for Projection<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Layer widths and activations of a classifier head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub hidden1: usize,
    pub act1: Activation,
    pub hidden2: usize,
}

impl HeadShape {
    /// 128 ReLU → 256 sigmoid.
    pub fn speaker() -> Self {
        Self { hidden1: 128, act1: Activation::Relu, hidden2: 256 }
    }

    /// 512 sigmoid → 512 sigmoid.
    pub fn keyword() -> Self {
        Self { hidden1: 512, act1: Activation::Sigmoid, hidden2: 512 }
    }
}

/// `fc1 → act1 → fc2 → sigmoid → out`; softmax is applied by the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<T> {
    pub shape: HeadShape,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub out: Linear<T>,
}

/// Activations of one head application, kept for backward.
#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    pub input: Array2<T>,
    pub a1: Array2<T>,
    /// Second hidden layer output; the speaker head's d-vector.
    pub a2: Array2<T>,
}

impl<T: Float> ClassifierHead<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, classes: usize, shape: HeadShape, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(input, shape.hidden1, rng),
            fc2: Linear::new(shape.hidden1, shape.hidden2, rng),
            out: Linear::new(shape.hidden2, classes, rng),
            shape,
        }
    }

    pub fn input_width(&self) -> usize {
        self.fc1.in_features
    }

    pub fn classes(&self) -> usize {
        self.out.out_features
    }

    /// Logits plus the cached activations.
    pub fn forward(&self, x: Array2<T>) -> Result<(Array2<T>, HeadCache<T>)> {
        if x.ncols() != self.input_width() {
            return Err(Error::Shape(format!("head expects {} inputs, got {}", self.input_width(), x.ncols())));
        }
        let mut a1 = self.fc1.forward(&x.view());
        self.shape.act1.apply(&mut a1);
        let mut a2 = self.fc2.forward(&a1.view());
        Activation::Sigmoid.apply(&mut a2);
        let logits = self.out.forward(&a2.view());
        Ok((logits, HeadCache { input: x, a1, a2 }))
    }

    /// Probability vectors per row.
    pub fn classify(&self, x: Array2<T>) -> Result<Array2<f64>> {
        let (logits, _) = self.forward(x)?;
        Ok(softmax_rows(&logits.view()))
    }

    pub fn backward(&mut self, cache: &HeadCache<T>, dlogits: &Array2<T>, need_dx: bool) -> Option<Array2<T>> {
        let mut da2 = self.out.backward(&cache.a2.view(), &dlogits.view(), true).expect("dx requested");
        Activation::Sigmoid.backward(&cache.a2, &mut da2);
        let mut da1 = self.fc2.backward(&cache.a1.view(), &da2.view(), true).expect("dx requested");
        self.shape.act1.backward(&cache.a1, &mut da1);
        self.fc1.backward(&cache.input.view(), &da1.view(), need_dx)
    }

    /// Replaces the output layer with a randomly initialised one of `classes` rows.
    pub fn resize_output<R: Rng + ?Sized>(&mut self, classes: usize, rng: &mut R) {
        self.out = Linear::new(self.shape.hidden2, classes, rng);
    }
}

impl<T: Float> Parameterized<T> for ClassifierHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// The four networks downstream of the shared feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads<T> {
    pub subject_projection: Projection<T>,
    pub keyword_projection: Projection<T>,
    pub speaker_head: ClassifierHead<T>,
    pub keyword_head: ClassifierHead<T>,
}

/// Logits of the four paths for a batch.
#[derive(Clone, Debug)]
pub struct PathLogits<T> {
    pub s: Array2<T>,
    pub w: Array2<T>,
    pub sw: Array2<T>,
    pub ws: Array2<T>,
}

/// Everything backward needs from one forward pass of [`Heads`].
#[derive(Clone, Debug)]
pub struct HeadsCache<T> {
    pub features: Array4<T>,
    pub s: HeadCache<T>,
    pub w: HeadCache<T>,
    pub sw: HeadCache<T>,
    pub ws: HeadCache<T>,
}

impl<T: Float> Heads<T> {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        side: usize,
        speakers: usize,
        keywords: usize,
        speaker_shape: HeadShape,
        keyword_shape: HeadShape,
        rng: &mut R,
    ) -> Self {
        let d = channels * side * side;
        Self {
            subject_projection: Projection::new(channels, rng),
            keyword_projection: Projection::new(channels, rng),
            speaker_head: ClassifierHead::new(d, speakers, speaker_shape, rng),
            keyword_head: ClassifierHead::new(d, keywords, keyword_shape, rng),
        }
    }

    /// Subject and keyword heads on their own features plus both cross paths.
    pub fn forward(&self, features: Array4<T>) -> Result<(PathLogits<T>, HeadsCache<T>)> {
        let fs = self.subject_projection.forward(&features)?;
        let fw = self.keyword_projection.forward(&features)?;
        let (s, cs) = self.speaker_head.forward(fs.clone())?;
        let (sw, csw) = self.keyword_head.forward(fs)?;
        let (w, cw) = self.keyword_head.forward(fw.clone())?;
        let (ws, cws) = self.speaker_head.forward(fw)?;
        Ok((PathLogits { s, w, sw, ws }, HeadsCache { features, s: cs, w: cw, sw: csw, ws: cws }))
    }

    /// Backpropagates the four logit gradients; returns `dF` when asked.
    pub fn backward(&mut self, cache: &HeadsCache<T>, d: &PathLogits<T>, need_dx: bool) -> Option<Array4<T>> {
        let mut dfs = self.speaker_head.backward(&cache.s, &d.s, true).expect("dx");
        dfs += &self.keyword_head.backward(&cache.sw, &d.sw, true).expect("dx");
        let mut dfw = self.keyword_head.backward(&cache.w, &d.w, true).expect("dx");
        dfw += &self.speaker_head.backward(&cache.ws, &d.ws, true).expect("dx");
        let a = self.subject_projection.backward(&cache.features, &dfs, need_dx);
        let b = self.keyword_projection.backward(&cache.features, &dfw, need_dx);
        match (a, b) {
            (Some(mut a), Some(b)) => {
                a += &b;
                Some(a)
            }
            _ => None,
        }
    }
}

impl<T: Float> Parameterized<T> for Heads<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.subject_projection.visit(&join(prefix, "subject_projection"), f);
        self.keyword_projection.visit(&join(prefix, "keyword_projection"), f);
        self.speaker_head.visit(&join(prefix, "speaker_head"), f);
        self.keyword_head.visit(&join(prefix, "keyword_head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.subject_projection.visit_mut(&join(prefix, "subject_projection"), f);
        self.keyword_projection.visit_mut(&join(prefix, "keyword_projection"), f);
        self.speaker_head.visit_mut(&join(prefix, "speaker_head"), f);
        self.keyword_head.visit_mut(&join(prefix, "keyword_head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn random_features(b: usize, c: usize, rng: &mut ChaCha8Rng) -> Array4<f64> {
        let u = Uniform::new(-1.0, 1.0).unwrap();
        Array4::from_shape_fn((b, c, 7, 7), |_| u.sample(rng))
    }

    #[test]
    fn reference_projection_width() {
        // 2048 channels at 7×7 flatten to 100352 features
        assert_eq!(2048 * 7 * 7, 100_352);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Projection::<f32>::new(16, &mut rng);
        let y = p.forward(&Array4::zeros((2, 16, 7, 7))).unwrap();
        assert_eq!(y.dim(), (2, 784));
    }

    #[test]
    fn zero_and_identity_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_features(2, 4, &mut rng);
        let mut p = Projection::<f64>::new(4, &mut rng);
        p.weight.values_mut().fill(0.0);
        assert!(p.forward(&f).unwrap().iter().all(|&v| v == 0.0));
        for i in 0..4 {
            p.weight.values_mut()[i * 4 + i] = 1.0;
        }
        let y = p.forward(&f).unwrap();
        // flatten order is (channel, row, column); reshaping recovers F exactly
        let back = y.into_shape_with_order((2, 4, 7, 7)).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn projection_mixes_channels_per_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_features(1, 3, &mut rng);
        let p = Projection::<f64>::new(3, &mut rng);
        let y = p.forward(&f).unwrap();
        let w = p.weight.values();
        let (c, r, k) = (2, 4, 5);
        let direct: f64 = (0..3).map(|j| w[c * 3 + j] * f[[0, j, r, k]]).sum::<f64>() + p.bias.values()[c];
        assert!((y[[0, c * 49 + r * 7 + k]] - direct).abs() < 1e-12);
        assert!(p.forward(&random_features(1, 4, &mut rng)).is_err());
    }

    #[test]
    fn zero_output_layer_gives_uniform_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut h = ClassifierHead::<f64>::new(10, 5, HeadShape::speaker(), &mut rng);
        h.out.weight.values_mut().fill(0.0);
        let p = h.classify(Array2::from_elem((3, 10), 0.7)).unwrap();
        assert!(p.iter().all(|&v| v == 0.2));
        assert!(h.classify(Array2::zeros((1, 9))).is_err());
    }

    #[test]
    fn constant_logit_shift_leaves_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut h = ClassifierHead::<f64>::new(6, 4, HeadShape::keyword(), &mut rng);
        let x = Array2::from_shape_fn((2, 6), |(i, j)| (i + j) as f64 * 0.1);
        let a = h.classify(x.clone()).unwrap();
        h.out.bias.values_mut().iter_mut().for_each(|b| *b += 3.25);
        let b = h.classify(x).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
