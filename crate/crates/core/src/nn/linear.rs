use super::param::{join, Param, Parameterized};
use super::Float;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fully connected layer `y = x W^T + b`, weight stored as `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Float> Linear<T> {
    /// Uniform fan-in initialisation `U(-sqrt(3/fan_in), sqrt(3/fan_in))`, zero bias.
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = (3.0 / in_features as f64).sqrt();
        Self {
            in_features,
            out_features,
            weight: Param::uniform(&[out_features, in_features], bound, rng),
            bias: Param::zeros(&[out_features]),
        }
    }

    pub fn weight_view(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.out_features, self.in_features), self.weight.values())
            .expect("linear weight shape")
    }

    pub fn forward(&self, x: &ArrayView2<'_, T>) -> Array2<T> {
        assert_eq!(x.ncols(), self.in_features, "linear input width");
        let mut y = Array2::zeros((x.nrows(), self.out_features));
        general_mat_mul(T::one(), x, &self.weight_view().t(), T::zero(), &mut y);
        let b = ArrayView2::from_shape((1, self.out_features), self.bias.values()).expect("bias");
        y += &b;
        y
    }

    pub fn backward(&mut self, x: &ArrayView2<'_, T>, dy: &ArrayView2<'_, T>, need_dx: bool) -> Option<Array2<T>> {
        {
            let dw = self.weight.grad.as_slice_mut().expect("contiguous");
            let mut dwv = ArrayViewMut2::from_shape((self.out_features, self.in_features), dw).expect("dw");
            general_mat_mul(T::one(), &dy.t(), x, T::one(), &mut dwv);
        }
        {
            let db = self.bias.grad.as_slice_mut().expect("contiguous");
            for (d, s) in db.iter_mut().zip(dy.sum_axis(Axis(0)).iter()) {
                *d += *s;
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Array2::zeros((dy.nrows(), self.in_features));
        general_mat_mul(T::one(), dy, &self.weight_view(), T::zero(), &mut dx);
        Some(dx)
    }
}

impl<T: Float> Parameterized<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Element-wise activation tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Float>(self, z: &mut Array2<T>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
        }
    }

    /// Gradient w.r.t. the pre-activation, expressed through the activation output `a`.
    pub fn backward<T: Float>(self, a: &Array2<T>, da: &mut Array2<T>) {
        match self {
            Activation::Relu => ndarray::Zip::from(da).and(a).for_each(|g, &v| {
                if v <= T::zero() {
                    *g = T::zero();
                }
            }),
            Activation::Sigmoid => {
                ndarray::Zip::from(da).and(a).for_each(|g, &v| *g *= v * (T::one() - v))
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax computed in `f64`.
pub fn softmax_rows<T: Float>(logits: &ArrayView2<'_, T>) -> Array2<f64> {
    let mut out = logits.mapv(|v| v.f64());
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise log-sum-exp in `f64`.
pub fn log_sum_exp_rows<T: Float>(logits: &ArrayView2<'_, T>) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v.f64()));
            max + row.iter().map(|&v| (v.f64() - max).exp()).sum::<f64>().ln()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_are_normalised_and_shift_invariant() {
        let z = array![[1.0f32, 2.0, 3.0], [1000.0, 1000.0, 1000.0]];
        let p = softmax_rows(&z.view());
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((p[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
        let shifted = z.mapv(|v| v + 7.5);
        let q = softmax_rows(&shifted.view());
        for (a, b) in p.iter().zip(q.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linear_forward_matches_manual() {
        let mut rng = rand::rng();
        let mut l = Linear::<f64>::new(2, 2, &mut rng);
        l.weight.values_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        l.bias.values_mut().copy_from_slice(&[0.5, -0.5]);
        let y = l.forward(&array![[1.0, 1.0], [0.0, 2.0]].view());
        assert_eq!(y, array![[3.5, 6.5], [4.5, 7.5]]);
    }
}
