use super::param::Parameterized;
use super::Float;

/// Adam with bias correction. Moment buffers follow the visiting order of the
/// parameters it was built for; a filter picks which named tensors it updates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter whose name passes `trainable`.
    pub fn step<T: Float, P: Parameterized<T> + ?Sized>(
        &mut self,
        model: &mut P,
        lr: f64,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        // bias correction folded into the step size and epsilon
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let eps = (self.eps * bc2.sqrt()) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let mut slot = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |name, p| {
            if ms.len() <= slot {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[slot], &mut vs[slot]);
            slot += 1;
            if !trainable(name) {
                return;
            }
            assert_eq!(m.len(), p.len(), "parameter layout changed under the optimizer");
            let (w, g) = p.split_mut();
            for (((wi, gi), mi), vi) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.f64() as f32;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *wi -= T::of((step * *mi / (vi.sqrt() + eps)) as f64);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct One(Param<f64>);
    impl Parameterized<f64> for One {
        fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f(p, &self.0)
        }
        fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(p, &mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut x = One(Param::zeros(&[2]));
        x.0.grad.as_slice_mut().unwrap().copy_from_slice(&[3.0, -0.01]);
        let mut opt = Adam::new();
        opt.step(&mut x, 0.1, &|_| true);
        let w = x.0.values();
        assert!((w[0] + 0.1).abs() < 1e-6);
        assert!((w[1] - 0.1).abs() < 1e-5);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut x = One(Param::zeros(&[1]));
        x.0.values_mut()[0] = 5.0;
        let mut opt = Adam::new();
        for _ in 0..2000 {
            let w = x.0.values()[0];
            x.0.grad.as_slice_mut().unwrap()[0] = 2.0 * (w - 1.5);
            opt.step(&mut x, 0.05, &|_| true);
        }
        assert!((x.0.values()[0] - 1.5).abs() < 1e-2);
    }

    #[test]
    fn filtered_parameters_stay_put() {
        let mut x = One(Param::zeros(&[1]));
        x.0.grad.as_slice_mut().unwrap()[0] = 1.0;
        let mut opt = Adam::new();
        opt.step(&mut x, 0.1, &|_| false);
        assert_eq!(x.0.values()[0], 0.0);
    }
}
